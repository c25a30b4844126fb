use super::spec::{HeadConfig, HeadSpec, LevelOutput, LevelSpec};
use super::RawPrediction;
use crate::error::{Error, Result};
use crate::nn::layers::{join, ActivationKind, Module, ParamMut, StateDict};
use crate::nn::{ConvLayer, Mode, Shape, Tensor};

enum OutLayers {
    Split { cls: ConvLayer, reg: ConvLayer, obj: ConvLayer },
    Coupled { all: ConvLayer },
}

struct LevelLayers {
    stem: ConvLayer,
    cls_tower: Vec<ConvLayer>,
    reg_tower: Vec<ConvLayer>,
    output: OutLayers,
}

/// Trainable counterpart of a training-form [`HeadSpec`].
pub struct HeadLayers {
    pub config: HeadConfig,
    levels: Vec<LevelLayers>,
}

fn silu(spec: &crate::nn::ConvSpec) -> Result<ConvLayer> {
    ConvLayer::new(spec.clone(), ActivationKind::Silu)
}

fn linear(spec: &crate::nn::ConvSpec) -> Result<ConvLayer> {
    ConvLayer::new(spec.clone(), ActivationKind::Identity)
}

fn tower_forward(tower: &mut [ConvLayer], x: Tensor, mode: Mode) -> Result<Tensor> {
    tower.iter_mut().try_fold(x, |t, l| l.forward(&t, mode))
}

fn tower_backward(tower: &mut [ConvLayer], g: Tensor) -> Result<Tensor> {
    tower.iter_mut().rev().try_fold(g, |g, l| l.backward(&g))
}

impl HeadLayers {
    pub fn new(spec: &HeadSpec) -> Result<Self> {
        let levels = spec
            .levels
            .iter()
            .map(|l| {
                let output = match &l.output {
                    LevelOutput::Split { cls, reg, obj } => {
                        OutLayers::Split { cls: linear(cls)?, reg: linear(reg)?, obj: linear(obj)? }
                    }
                    LevelOutput::Coupled { all } => OutLayers::Coupled { all: linear(all)? },
                    LevelOutput::Merged { .. } => {
                        return Err(Error::invalid("head", "a fused head cannot be trained"));
                    }
                };
                Ok(LevelLayers {
                    stem: silu(&l.stem)?,
                    cls_tower: l.cls_tower.iter().map(silu).collect::<Result<_>>()?,
                    reg_tower: l.reg_tower.iter().map(silu).collect::<Result<_>>()?,
                    output,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { config: spec.config.clone(), levels })
    }

    pub fn to_spec(&self) -> HeadSpec {
        let levels = self
            .levels
            .iter()
            .map(|l| LevelSpec {
                stem: l.stem.to_spec(),
                cls_tower: l.cls_tower.iter().map(ConvLayer::to_spec).collect(),
                reg_tower: l.reg_tower.iter().map(ConvLayer::to_spec).collect(),
                output: match &l.output {
                    OutLayers::Split { cls, reg, obj } => {
                        LevelOutput::Split { cls: cls.to_spec(), reg: reg.to_spec(), obj: obj.to_spec() }
                    }
                    OutLayers::Coupled { all } => LevelOutput::Coupled { all: all.to_spec() },
                },
            })
            .collect();
        HeadSpec { config: self.config.clone(), levels }
    }

    pub fn forward(&mut self, features: &[Tensor], mode: Mode) -> Result<RawPrediction> {
        if features.len() != self.levels.len() {
            return Err(Error::shape(
                "head_forward",
                format!("{} feature maps for {} strides", features.len(), self.levels.len()),
            ));
        }
        let maps = features
            .iter()
            .zip(&mut self.levels)
            .map(|(x, l)| {
                let t = l.stem.forward(x, mode)?;
                match &mut l.output {
                    OutLayers::Split { cls, reg, obj } => {
                        let c = tower_forward(&mut l.cls_tower, t.clone(), mode)?;
                        let r = tower_forward(&mut l.reg_tower, t, mode)?;
                        Tensor::concat_channels(&[
                            &reg.forward(&r, mode)?,
                            &obj.forward(&r, mode)?,
                            &cls.forward(&c, mode)?,
                        ])
                    }
                    OutLayers::Coupled { all } => {
                        let c = tower_forward(&mut l.cls_tower, t, mode)?;
                        all.forward(&c, mode)
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RawPrediction { strides: self.config.strides.clone(), maps })
    }

    /// Accumulates parameter gradients and returns one gradient per input
    /// feature map.
    pub fn backward(&mut self, grad: &RawPrediction) -> Result<Vec<Tensor>> {
        if grad.maps.len() != self.levels.len() {
            return Err(Error::shape("head backward", "gradient level count differs"));
        }
        let nc = self.config.num_classes;
        grad.maps
            .iter()
            .zip(&mut self.levels)
            .map(|(g, l)| {
                let dt = match &mut l.output {
                    OutLayers::Split { cls, reg, obj } => {
                        let parts = g.split_channels(&[4, 1, nc])?;
                        let dr = reg.backward(&parts[0])?.add(&obj.backward(&parts[1])?)?;
                        let dc = cls.backward(&parts[2])?;
                        let dr = tower_backward(&mut l.reg_tower, dr)?;
                        let dc = tower_backward(&mut l.cls_tower, dc)?;
                        dr.add(&dc)?
                    }
                    OutLayers::Coupled { all } => {
                        let dc = all.backward(g)?;
                        tower_backward(&mut l.cls_tower, dc)?
                    }
                };
                l.stem.backward(&dt)
            })
            .collect()
    }
}

impl Module for HeadLayers {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_>)) {
        for (i, l) in self.levels.iter_mut().enumerate() {
            let p = join(prefix, &format!("levels.{i}"));
            l.stem.visit_params(&join(&p, "stem"), f);
            for (j, c) in l.cls_tower.iter_mut().enumerate() {
                c.visit_params(&join(&p, &format!("cls_tower.{j}")), f);
            }
            for (j, c) in l.reg_tower.iter_mut().enumerate() {
                c.visit_params(&join(&p, &format!("reg_tower.{j}")), f);
            }
            match &mut l.output {
                OutLayers::Split { cls, reg, obj } => {
                    cls.visit_params(&join(&p, "cls_pred"), f);
                    reg.visit_params(&join(&p, "reg_pred"), f);
                    obj.visit_params(&join(&p, "obj_pred"), f);
                }
                OutLayers::Coupled { all } => all.visit_params(&join(&p, "pred"), f),
            }
        }
    }
}

impl StateDict for HeadLayers {
    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Shape, &mut [f32])) {
        for (i, l) in self.levels.iter_mut().enumerate() {
            let p = join(prefix, &format!("levels.{i}"));
            l.stem.visit_state(&join(&p, "stem"), f);
            for (j, c) in l.cls_tower.iter_mut().enumerate() {
                c.visit_state(&join(&p, &format!("cls_tower.{j}")), f);
            }
            for (j, c) in l.reg_tower.iter_mut().enumerate() {
                c.visit_state(&join(&p, &format!("reg_tower.{j}")), f);
            }
            match &mut l.output {
                OutLayers::Split { cls, reg, obj } => {
                    cls.visit_state(&join(&p, "cls_pred"), f);
                    reg.visit_state(&join(&p, "reg_pred"), f);
                    obj.visit_state(&join(&p, "obj_pred"), f);
                }
                OutLayers::Coupled { all } => all.visit_state(&join(&p, "pred"), f),
            }
        }
    }
}
