//! The toy detector: strided-conv backbone with RepConv stages, a light
//! top-down neck and the detection head.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::layers::HeadLayers;
use super::spec::{head_forward, HeadConfig, HeadKind, HeadSpec};
use super::{RawPrediction, DEFAULT_STRIDES};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::nn::init::conv_uniform;
use crate::nn::layers::{activation, join, ActivationKind, Module, ParamMut, StateDict};
use crate::nn::{
    conv2d, upsample2x, upsample2x_backward, BatchNormParams, Checkpoint, ConvLayer, ConvSpec, Mode, RepConvLayer,
    Shape, Tensor,
};
use crate::reparam::{fold_bn, fuse_repconv, RepConvBlock};
use crate::rng::{derive_seed, keyed};

/// Backbone widths at `width_mult = 1.0`: stride-4 stem, C3, C4, C5.
const BASE_WIDTHS: [usize; 4] = [32, 64, 128, 192];
const BASE_HEAD_CHANNELS: usize = 48;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub width_mult: f32,
    #[serde(default)]
    pub head_kind: HeadKind,
    /// Defaults to `48 × width_mult`.
    #[serde(default)]
    pub head_channels: Option<usize>,
}

impl ModelConfig {
    pub fn new(num_classes: usize, width_mult: f32) -> Self {
        Self { num_classes, width_mult, head_kind: HeadKind::Lite, head_channels: None }
    }

    pub fn validate(&self) -> Result<()> {
        if ![0.25, 0.5, 1.0].contains(&self.width_mult) {
            return Err(Error::invalid("width_mult", format!("{} is not one of 0.25, 0.5, 1.0", self.width_mult)));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("num_classes", "must be positive"));
        }
        Ok(())
    }

    fn scaled(&self, base: usize) -> usize {
        ((base as f32 * self.width_mult).round() as usize).max(4)
    }

    pub fn widths(&self) -> [usize; 4] {
        BASE_WIDTHS.map(|b| self.scaled(b))
    }

    /// Output widths of the three feature maps fed to the head (P3, P4, P5).
    pub fn feature_widths(&self) -> [usize; 3] {
        let w = self.widths();
        [w[1], w[2], w[3]]
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            num_classes: self.num_classes,
            head_channels: self.head_channels.unwrap_or_else(|| self.scaled(BASE_HEAD_CHANNELS)),
            in_channels: self.feature_widths().to_vec(),
            strides: DEFAULT_STRIDES.to_vec(),
            kind: self.head_kind,
        }
    }
}

/// Architecture sidecar stored next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArchFile {
    fused: bool,
    model: ModelConfig,
}

pub fn arch_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().unwrap_or_default().to_os_string();
    name.push(".arch");
    checkpoint.with_file_name(name)
}

fn check_input(x: &Tensor) -> Result<()> {
    if x.channels() != 3
        || !x.height().is_multiple_of(32)
        || !x.width().is_multiple_of(32)
        || x.height() == 0
        || x.width() == 0
    {
        return Err(Error::shape(
            "detector",
            format!("input must be [N, 3, H, W] with H, W positive multiples of 32, got {:?}", x.shape()),
        ));
    }
    Ok(())
}

fn conv_bn(rng: &mut impl rand::Rng, i: usize, o: usize, k: usize, s: usize) -> ConvSpec {
    conv_uniform(rng, i, o, k, s).with_bn(BatchNormParams::identity(o))
}

fn repconv(rng: &mut impl rand::Rng, c: usize) -> Result<RepConvLayer> {
    let mut one = conv_bn(rng, c, c, 1, 1);
    one.padding = 0;
    RepConvLayer::new(conv_bn(rng, c, c, 3, 1), one, Some(BatchNormParams::identity(c)), ActivationKind::Silu)
}

/// Trainable toy detector.
pub struct ToyModel {
    pub config: ModelConfig,
    stem: ConvLayer,
    down2: ConvLayer,
    stage3: RepConvLayer,
    down3: ConvLayer,
    stage4: RepConvLayer,
    down4: ConvLayer,
    stage5: RepConvLayer,
    lat4: ConvLayer,
    lat3: ConvLayer,
    pub head: HeadLayers,
}

/// Builds a freshly initialised toy detector.
pub fn build_toy_model(num_classes: usize, width_mult: f32, seed: u64) -> Result<ToyModel> {
    ToyModel::new(ModelConfig::new(num_classes, width_mult), seed)
}

impl ToyModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = keyed(derive_seed(seed, "model-init"), 0);
        let [w1, w2, w3, w4] = config.widths();
        let silu = |s: ConvSpec| ConvLayer::new(s, ActivationKind::Silu);
        // Non-overlapping 4×4 patches: no full-resolution activation is ever stored.
        let mut patch = conv_bn(&mut rng, 3, w1, 4, 4);
        patch.padding = 0;
        let mut stem = silu(patch)?;
        stem.need_input_grad = false;
        let down2 = silu(conv_bn(&mut rng, w1, w2, 3, 2))?;
        let stage3 = repconv(&mut rng, w2)?;
        let down3 = silu(conv_bn(&mut rng, w2, w3, 3, 2))?;
        let stage4 = repconv(&mut rng, w3)?;
        let down4 = silu(conv_bn(&mut rng, w3, w4, 3, 2))?;
        let stage5 = repconv(&mut rng, w4)?;
        let lat4 = silu(conv_bn(&mut rng, w4 + w3, w3, 1, 1))?;
        let lat3 = silu(conv_bn(&mut rng, w3 + w2, w2, 1, 1))?;
        let head = HeadLayers::new(&HeadSpec::init(config.head_config(), &mut rng)?)?;
        Ok(Self { config, stem, down2, stage3, down3, stage4, down4, stage5, lat4, lat3, head })
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<RawPrediction> {
        check_input(x)?;
        let s = self.stem.forward(x, mode)?;
        let c3 = self.stage3.forward(&self.down2.forward(&s, mode)?, mode)?;
        let d3 = self.down3.forward(&c3, mode)?;
        let c4 = self.stage4.forward(&d3, mode)?;
        let d4 = self.down4.forward(&c4, mode)?;
        let c5 = self.stage5.forward(&d4, mode)?;
        let p4 = self.lat4.forward(&Tensor::concat_channels(&[&upsample2x(&c5), &c4])?, mode)?;
        let p3 = self.lat3.forward(&Tensor::concat_channels(&[&upsample2x(&p4), &c3])?, mode)?;
        self.head.forward(&[p3, p4, c5], mode)
    }

    /// Backpropagates a gradient on the raw prediction into every parameter.
    pub fn backward(&mut self, grad: &RawPrediction) -> Result<()> {
        let [_, w2, w3, w4] = self.config.widths();
        let mut g = self.head.backward(grad)?.into_iter();
        let (g3, g4, g5) = match (g.next(), g.next(), g.next()) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => return Err(Error::shape("detector backward", "head returned too few gradients")),
        };
        let parts = self.lat3.backward(&g3)?.split_channels(&[w3, w2])?;
        let g4 = g4.add(&upsample2x_backward(&parts[0])?)?;
        let mut gc3 = parts[1].clone();
        let parts = self.lat4.backward(&g4)?.split_channels(&[w4, w3])?;
        let g5 = g5.add(&upsample2x_backward(&parts[0])?)?;
        let mut gc4 = parts[1].clone();
        let gd4 = self.stage5.backward(&g5)?;
        gc4 = gc4.add(&self.down4.backward(&gd4)?)?;
        let gd3 = self.stage4.backward(&gc4)?;
        gc3 = gc3.add(&self.down3.backward(&gd3)?)?;
        let gs = self.down2.backward(&self.stage3.backward(&gc3)?)?;
        self.stem.backward(&gs)?;
        Ok(())
    }

    /// Inference spec with current weights and statistics (unfused).
    pub fn to_spec(&self) -> DetectorSpec {
        DetectorSpec {
            config: self.config.clone(),
            stem: Block::Conv(self.stem.to_spec()),
            down2: Block::Conv(self.down2.to_spec()),
            stage3: Block::RepConv(self.stage3.to_block()),
            down3: Block::Conv(self.down3.to_spec()),
            stage4: Block::RepConv(self.stage4.to_block()),
            down4: Block::Conv(self.down4.to_spec()),
            stage5: Block::RepConv(self.stage5.to_block()),
            lat4: Block::Conv(self.lat4.to_spec()),
            lat3: Block::Conv(self.lat3.to_spec()),
            head: self.head.to_spec(),
        }
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        Checkpoint::from_module(self).save(path)?;
        write_arch(path, false, &self.config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (fused, config) = read_arch(path)?;
        if fused {
            return Err(Error::Checkpoint("fused checkpoints cannot be trained".into()));
        }
        let mut model = ToyModel::new(config, 0)?;
        Checkpoint::load(path)?.load_into(&mut model)?;
        Ok(model)
    }
}

macro_rules! visit_layers {
    ($self:ident, $prefix:ident, $method:ident, $f:ident) => {
        $self.stem.$method(&join($prefix, "stem"), $f);
        $self.down2.$method(&join($prefix, "down2"), $f);
        $self.stage3.$method(&join($prefix, "stage3"), $f);
        $self.down3.$method(&join($prefix, "down3"), $f);
        $self.stage4.$method(&join($prefix, "stage4"), $f);
        $self.down4.$method(&join($prefix, "down4"), $f);
        $self.stage5.$method(&join($prefix, "stage5"), $f);
        $self.lat4.$method(&join($prefix, "lat4"), $f);
        $self.lat3.$method(&join($prefix, "lat3"), $f);
        $self.head.$method(&join($prefix, "head"), $f);
    };
}

impl Module for ToyModel {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_>)) {
        visit_layers!(self, prefix, visit_params, f);
    }
}

impl StateDict for ToyModel {
    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Shape, &mut [f32])) {
        visit_layers!(self, prefix, visit_state, f);
    }
}

/// One backbone or neck block in inference form; always followed by SiLU.
#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    Conv(ConvSpec),
    RepConv(RepConvBlock),
}

impl Block {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Block::Conv(s) => Ok(activation(&conv2d(x, s)?, ActivationKind::Silu)),
            Block::RepConv(b) => b.forward(x),
        }
    }

    pub fn fuse(&self) -> Result<Block> {
        Ok(match self {
            Block::Conv(s) if s.bn.is_some() => Block::Conv(fold_bn(s)?),
            Block::Conv(s) => Block::Conv(s.clone()),
            Block::RepConv(b) => Block::Conv(fuse_repconv(b)?),
        })
    }

    pub fn param_count(&self) -> usize {
        match self {
            Block::Conv(s) => s.param_count(),
            Block::RepConv(b) => b.param_count(),
        }
    }

    fn is_fused(&self) -> bool {
        matches!(self, Block::Conv(s) if s.is_plain())
    }
}

impl StateDict for Block {
    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Shape, &mut [f32])) {
        match self {
            Block::Conv(s) => s.visit_state(prefix, f),
            Block::RepConv(b) => b.visit_state(prefix, f),
        }
    }
}

/// Immutable inference model, unfused or fused. Safe to share across threads.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorSpec {
    pub config: ModelConfig,
    pub stem: Block,
    pub down2: Block,
    pub stage3: Block,
    pub down3: Block,
    pub stage4: Block,
    pub down4: Block,
    pub stage5: Block,
    pub lat4: Block,
    pub lat3: Block,
    pub head: HeadSpec,
}

impl DetectorSpec {
    pub fn infer(&self, x: &Tensor) -> Result<RawPrediction> {
        check_input(x)?;
        let c3 = self.stage3.forward(&self.down2.forward(&self.stem.forward(x)?)?)?;
        let c4 = self.stage4.forward(&self.down3.forward(&c3)?)?;
        let c5 = self.stage5.forward(&self.down4.forward(&c4)?)?;
        let p4 = self.lat4.forward(&Tensor::concat_channels(&[&upsample2x(&c5), &c4])?)?;
        let p3 = self.lat3.forward(&Tensor::concat_channels(&[&upsample2x(&p4), &c3])?)?;
        head_forward(&[p3, p4, c5], &self.head)
    }

    fn blocks(&self) -> [&Block; 9] {
        [
            &self.stem,
            &self.down2,
            &self.stage3,
            &self.down3,
            &self.stage4,
            &self.down4,
            &self.stage5,
            &self.lat4,
            &self.lat3,
        ]
    }

    /// Per-block max-abs output difference against `other` (typically the
    /// fused form), each block fed this spec's own activations so errors do
    /// not compound. The last row compares the full model.
    pub fn block_diffs(&self, other: &DetectorSpec, x: &Tensor) -> Result<Vec<(&'static str, f32)>> {
        check_input(x)?;
        let mut rows = Vec::new();
        let mut step = |name: &'static str, a: &Block, b: &Block, input: &Tensor| -> Result<Tensor> {
            let out = a.forward(input)?;
            rows.push((name, out.max_abs_diff(&b.forward(input)?)?));
            Ok(out)
        };
        let s = step("stem", &self.stem, &other.stem, x)?;
        let d2 = step("down2", &self.down2, &other.down2, &s)?;
        let c3 = step("stage3", &self.stage3, &other.stage3, &d2)?;
        let d3 = step("down3", &self.down3, &other.down3, &c3)?;
        let c4 = step("stage4", &self.stage4, &other.stage4, &d3)?;
        let d4 = step("down4", &self.down4, &other.down4, &c4)?;
        let c5 = step("stage5", &self.stage5, &other.stage5, &d4)?;
        let p4 = step("lat4", &self.lat4, &other.lat4, &Tensor::concat_channels(&[&upsample2x(&c5), &c4])?)?;
        let p3 = step("lat3", &self.lat3, &other.lat3, &Tensor::concat_channels(&[&upsample2x(&p4), &c3])?)?;
        let feats = [p3, p4, c5];
        rows.push(("head", head_forward(&feats, &self.head)?.max_abs_diff(&head_forward(&feats, &other.head)?)?));
        rows.push(("model", self.infer(x)?.max_abs_diff(&other.infer(x)?)?));
        Ok(rows)
    }

    /// Folds batch-norm, collapses RepConv blocks, folds implicit layers and
    /// merges box/objectness outputs.
    pub fn fuse(&self) -> Result<DetectorSpec> {
        Ok(DetectorSpec {
            config: self.config.clone(),
            stem: self.stem.fuse()?,
            down2: self.down2.fuse()?,
            stage3: self.stage3.fuse()?,
            down3: self.down3.fuse()?,
            stage4: self.stage4.fuse()?,
            down4: self.down4.fuse()?,
            stage5: self.stage5.fuse()?,
            lat4: self.lat4.fuse()?,
            lat3: self.lat3.fuse()?,
            head: self.head.fuse()?,
        })
    }

    pub fn is_fused(&self) -> bool {
        self.blocks().iter().all(|b| b.is_fused()) && self.head.is_fused()
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.param_count()).sum::<usize>() + self.head.param_count()
    }

    /// Correctly shaped spec with placeholder weights, for loading.
    pub fn skeleton(config: ModelConfig, fused: bool) -> Result<Self> {
        let spec = ToyModel::new(config, 0)?.to_spec();
        if fused {
            spec.fuse()
        } else {
            Ok(spec)
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut copy = self.clone();
        Checkpoint::from_module(&mut copy).save(path)?;
        write_arch(path, self.is_fused(), &self.config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (fused, config) = read_arch(path)?;
        let mut spec = Self::skeleton(config, fused)?;
        Checkpoint::load(path)?.load_into(&mut spec)?;
        Ok(spec)
    }
}

impl StateDict for DetectorSpec {
    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Shape, &mut [f32])) {
        visit_layers!(self, prefix, visit_state, f);
    }
}

fn write_arch(path: &Path, fused: bool, config: &ModelConfig) -> Result<()> {
    let text = toml::to_string(&ArchFile { fused, model: config.clone() }).map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(&arch_path(path), text.as_bytes())
}

fn read_arch(path: &Path) -> Result<(bool, ModelConfig)> {
    let p = arch_path(path);
    let text = std::fs::read_to_string(&p)
        .map_err(|e| Error::Checkpoint(format!("cannot read architecture file {}: {e}", p.display())))?;
    let arch: ArchFile = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
    arch.model.validate()?;
    Ok((arch.fused, arch.model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init::random_tensor;

    #[test]
    fn param_count_grows_with_width() {
        let counts: Vec<usize> =
            [0.25, 0.5, 1.0].iter().map(|&w| build_toy_model(3, w, 0).unwrap().to_spec().param_count()).collect();
        assert!(counts[0] < counts[1] && counts[1] < counts[2], "{counts:?}");
    }

    #[test]
    fn output_grid_sizes() {
        let spec = build_toy_model(3, 0.25, 0).unwrap().to_spec();
        let raw = spec.infer(&Tensor::zeros([1, 3, 320, 320])).unwrap();
        let dims: Vec<_> = raw.maps.iter().map(|m| (m.channels(), m.height(), m.width())).collect();
        assert_eq!(dims, vec![(8, 40, 40), (8, 20, 20), (8, 10, 10)]);
    }

    #[test]
    fn rejects_unaligned_input() {
        let spec = build_toy_model(3, 0.25, 0).unwrap().to_spec();
        assert!(matches!(spec.infer(&Tensor::zeros([1, 3, 100, 96])), Err(Error::Shape { .. })));
    }

    #[test]
    fn train_and_inference_forward_agree_in_eval_mode() {
        let mut model = build_toy_model(2, 0.25, 5).unwrap();
        let x = random_tensor(&mut keyed(9, 0), [1, 3, 64, 64], 0.0, 1.0);
        let a = model.forward(&x, Mode::Eval).unwrap();
        let spec = model.to_spec();
        let b = spec.infer(&x).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-5);
        let c = spec.fuse().unwrap().infer(&x).unwrap();
        assert!(a.max_abs_diff(&c).unwrap() < 1e-4);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = build_toy_model(2, 0.25, 1).unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let loaded = DetectorSpec::load(&path).unwrap();
        assert_eq!(loaded, model.to_spec());
        let fused = loaded.fuse().unwrap();
        let fpath = dir.path().join("f.ckpt");
        fused.save(&fpath).unwrap();
        assert_eq!(DetectorSpec::load(&fpath).unwrap(), fused);
        assert!(ToyModel::load(&fpath).is_err());
    }
}
