use rand::Rng;
use serde::{Deserialize, Serialize};

use super::RawPrediction;
use crate::error::{Error, Result};
use crate::nn::init::{conv_uniform, random_bn, random_vec};
use crate::nn::layers::{activation, join, ActivationKind, StateDict};
use crate::nn::{conv2d, BatchNormParams, ConvSpec, Shape, Tensor};
use crate::reparam::{fold_all, fold_bn, merge_parallel_convs};

/// Initial objectness/class bias: logit of a 1% prior.
pub const PRIOR_BIAS: f32 = -4.595_12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// One 3×3 conv per branch at `head_channels`.
    #[default]
    Lite,
    /// Two 3×3 convs per branch at the input feature width.
    Original,
    /// One shared tower and one output conv for all channels.
    Coupled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub num_classes: usize,
    pub head_channels: usize,
    pub in_channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kind: HeadKind,
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.head_channels == 0 {
            return Err(Error::invalid("head", "num_classes and head_channels must be positive"));
        }
        if self.in_channels.len() != self.strides.len() || self.strides.is_empty() {
            return Err(Error::invalid("head", "one input width per stride required"));
        }
        if self.strides.windows(2).any(|w| w[0] >= w[1]) || self.strides[0] == 0 {
            return Err(Error::invalid("head", format!("strides must increase strictly: {:?}", self.strides)));
        }
        Ok(())
    }

    fn tower_width(&self, level: usize) -> usize {
        match self.kind {
            HeadKind::Original => self.in_channels[level],
            _ => self.head_channels,
        }
    }

    fn tower_depth(&self) -> usize {
        match self.kind {
            HeadKind::Original => 2,
            _ => 1,
        }
    }
}

/// Output convolutions of one level.
#[derive(Clone, Debug, PartialEq)]
pub enum LevelOutput {
    /// Training form: separate class, box and objectness convs.
    Split { cls: ConvSpec, reg: ConvSpec, obj: ConvSpec },
    /// Fused form: box and objectness merged into one 5-channel conv.
    Merged { cls: ConvSpec, reg_obj: ConvSpec },
    /// Coupled head: one conv emitting all `5 + C` channels.
    Coupled { all: ConvSpec },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelSpec {
    pub stem: ConvSpec,
    /// Class tower; the shared tower for coupled heads.
    pub cls_tower: Vec<ConvSpec>,
    /// Box tower; empty for coupled heads.
    pub reg_tower: Vec<ConvSpec>,
    pub output: LevelOutput,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadSpec {
    pub config: HeadConfig,
    pub levels: Vec<LevelSpec>,
}

fn hidden(rng: &mut impl Rng, in_c: usize, out_c: usize, k: usize, random_stats: bool) -> ConvSpec {
    let bn = if random_stats { random_bn(rng, out_c) } else { BatchNormParams::identity(out_c) };
    conv_uniform(rng, in_c, out_c, k, 1).with_bn(bn)
}

fn pred(rng: &mut impl Rng, in_c: usize, out_c: usize, bias: f32, random_implicit: bool) -> ConvSpec {
    let mut s = conv_uniform(rng, in_c, out_c, 1, 1);
    s.bias = vec![bias; out_c];
    if random_implicit {
        s.implicit_add = Some(random_vec(rng, in_c, -0.5, 0.5));
        s.implicit_mul = Some(random_vec(rng, out_c, 0.5, 1.5));
    } else {
        s.implicit_add = Some(vec![0.0; in_c]);
        s.implicit_mul = Some(vec![1.0; out_c]);
    }
    s
}

impl HeadSpec {
    /// Training-form head with fresh weights: identity batch-norm
    /// statistics, neutral implicit layers and prior-biased logits.
    pub fn init(config: HeadConfig, rng: &mut impl Rng) -> Result<Self> {
        Self::build(config, rng, false)
    }

    /// Training-form head with random batch-norm statistics and implicit
    /// values; used to exercise fusion.
    pub fn random(config: HeadConfig, rng: &mut impl Rng) -> Result<Self> {
        Self::build(config, rng, true)
    }

    fn build(config: HeadConfig, rng: &mut impl Rng, random: bool) -> Result<Self> {
        config.validate()?;
        let nc = config.num_classes;
        let mut levels = Vec::new();
        for (l, &in_c) in config.in_channels.iter().enumerate() {
            let w = config.tower_width(l);
            let stem = hidden(rng, in_c, w, 1, random);
            let tower =
                |rng: &mut _| (0..config.tower_depth()).map(|_| hidden(rng, w, w, 3, random)).collect::<Vec<_>>();
            let cls_tower = tower(rng);
            let (reg_tower, output) = if config.kind == HeadKind::Coupled {
                let mut all = pred(rng, w, 5 + nc, PRIOR_BIAS, random);
                all.bias[..4].fill(0.0);
                (Vec::new(), LevelOutput::Coupled { all })
            } else {
                let reg_tower = tower(rng);
                let cls = pred(rng, w, nc, PRIOR_BIAS, random);
                let reg = pred(rng, w, 4, 0.0, random);
                let obj = pred(rng, w, 1, PRIOR_BIAS, random);
                (reg_tower, LevelOutput::Split { cls, reg, obj })
            };
            levels.push(LevelSpec { stem, cls_tower, reg_tower, output });
        }
        Ok(Self { config, levels })
    }

    pub fn param_count(&self) -> usize {
        self.levels
            .iter()
            .map(|l| {
                let out = match &l.output {
                    LevelOutput::Split { cls, reg, obj } => cls.param_count() + reg.param_count() + obj.param_count(),
                    LevelOutput::Merged { cls, reg_obj } => cls.param_count() + reg_obj.param_count(),
                    LevelOutput::Coupled { all } => all.param_count(),
                };
                l.stem.param_count()
                    + l.cls_tower.iter().chain(&l.reg_tower).map(ConvSpec::param_count).sum::<usize>()
                    + out
            })
            .sum()
    }

    /// Inference-equivalent head with every batch-norm and implicit layer
    /// folded and box/objectness outputs merged.
    pub fn fuse(&self) -> Result<HeadSpec> {
        let fold_hidden = |s: &ConvSpec| if s.bn.is_some() { fold_bn(s) } else { Ok(s.clone()) };
        let levels = self
            .levels
            .iter()
            .map(|l| {
                let output = match &l.output {
                    LevelOutput::Split { cls, reg, obj } => LevelOutput::Merged {
                        cls: fold_all(cls)?,
                        reg_obj: merge_parallel_convs(&fold_all(reg)?, &fold_all(obj)?)?,
                    },
                    LevelOutput::Merged { cls, reg_obj } => {
                        LevelOutput::Merged { cls: fold_all(cls)?, reg_obj: fold_all(reg_obj)? }
                    }
                    LevelOutput::Coupled { all } => LevelOutput::Coupled { all: fold_all(all)? },
                };
                Ok(LevelSpec {
                    stem: fold_hidden(&l.stem)?,
                    cls_tower: l.cls_tower.iter().map(fold_hidden).collect::<Result<_>>()?,
                    reg_tower: l.reg_tower.iter().map(fold_hidden).collect::<Result<_>>()?,
                    output,
                })
            })
            .collect::<Result<_>>()?;
        Ok(HeadSpec { config: self.config.clone(), levels })
    }

    pub fn is_fused(&self) -> bool {
        self.levels.iter().all(|l| {
            let outs: Vec<&ConvSpec> = match &l.output {
                LevelOutput::Split { .. } => return false,
                LevelOutput::Merged { cls, reg_obj } => vec![cls, reg_obj],
                LevelOutput::Coupled { all } => vec![all],
            };
            std::iter::once(&l.stem).chain(&l.cls_tower).chain(&l.reg_tower).chain(outs).all(ConvSpec::is_plain)
        })
    }
}

impl StateDict for HeadSpec {
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
                LevelOutput::Split { cls, reg, obj } => {
                    cls.visit_state(&join(&p, "cls_pred"), f);
                    reg.visit_state(&join(&p, "reg_pred"), f);
                    obj.visit_state(&join(&p, "obj_pred"), f);
                }
                LevelOutput::Merged { cls, reg_obj } => {
                    cls.visit_state(&join(&p, "cls_pred"), f);
                    reg_obj.visit_state(&join(&p, "reg_obj_pred"), f);
                }
                LevelOutput::Coupled { all } => all.visit_state(&join(&p, "pred"), f),
            }
        }
    }
}

fn conv_act(x: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    Ok(activation(&conv2d(x, spec)?, ActivationKind::Silu))
}

/// Inference forward over one feature map per stride.
pub fn head_forward(features: &[Tensor], spec: &HeadSpec) -> Result<RawPrediction> {
    if features.len() != spec.levels.len() {
        return Err(Error::shape(
            "head_forward",
            format!("{} feature maps for {} strides", features.len(), spec.levels.len()),
        ));
    }
    let maps = features
        .iter()
        .zip(&spec.levels)
        .map(|(x, l)| {
            let t = conv_act(x, &l.stem)?;
            let mut c = t.clone();
            for s in &l.cls_tower {
                c = conv_act(&c, s)?;
            }
            let mut r = t;
            for s in &l.reg_tower {
                r = conv_act(&r, s)?;
            }
            match &l.output {
                LevelOutput::Split { cls, reg, obj } => {
                    Tensor::concat_channels(&[&conv2d(&r, reg)?, &conv2d(&r, obj)?, &conv2d(&c, cls)?])
                }
                LevelOutput::Merged { cls, reg_obj } => {
                    Tensor::concat_channels(&[&conv2d(&r, reg_obj)?, &conv2d(&c, cls)?])
                }
                LevelOutput::Coupled { all } => conv2d(&c, all),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RawPrediction { strides: spec.config.strides.clone(), maps })
}
