//! Analytic gradients of every layer type against central differences on
//! small random tensors, 20 seeds per case.

use rand::Rng;

use edgedet::nn::init::{conv_uniform, random_bn, random_tensor, random_vec};
use edgedet::nn::layers::mul_backward;
use edgedet::nn::{
    activation, activation_backward, finite_difference_grad, upsample2x, upsample2x_backward, ActivationKind,
    BatchNormLayer, ConvLayer, ConvSpec, Mode, Module, RepConvLayer, Tensor,
};
use edgedet::rng::keyed;

const SEEDS: u64 = 20;
const EPS: f32 = 2.5e-3;
const TOL: f64 = 1e-3;

/// `Σ y·w` in f64, the scalar every check differentiates.
fn weighted(y: &Tensor, w: &Tensor) -> f64 {
    y.data().iter().zip(w.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

trait Layer: Module {
    fn fwd(&mut self, x: &Tensor) -> Tensor;
    fn bwd(&mut self, g: &Tensor) -> Tensor;
}

struct Conv(ConvLayer, Mode);
impl edgedet::nn::StateDict for Conv {
    fn visit_state(&mut self, p: &str, f: &mut dyn FnMut(&str, edgedet::nn::Shape, &mut [f32])) {
        self.0.visit_state(p, f)
    }
}
impl Module for Conv {
    fn visit_params(&mut self, p: &str, f: &mut dyn FnMut(edgedet::nn::ParamMut<'_>)) {
        self.0.visit_params(p, f)
    }
}
impl Layer for Conv {
    fn fwd(&mut self, x: &Tensor) -> Tensor {
        self.0.forward(x, self.1).unwrap()
    }
    fn bwd(&mut self, g: &Tensor) -> Tensor {
        self.0.backward(g).unwrap()
    }
}

struct Bn(BatchNormLayer, Mode);
impl edgedet::nn::StateDict for Bn {
    fn visit_state(&mut self, p: &str, f: &mut dyn FnMut(&str, edgedet::nn::Shape, &mut [f32])) {
        self.0.visit_state(p, f)
    }
}
impl Module for Bn {
    fn visit_params(&mut self, p: &str, f: &mut dyn FnMut(edgedet::nn::ParamMut<'_>)) {
        self.0.visit_params(p, f)
    }
}
impl Layer for Bn {
    fn fwd(&mut self, x: &Tensor) -> Tensor {
        self.0.forward(x, self.1).unwrap()
    }
    fn bwd(&mut self, g: &Tensor) -> Tensor {
        self.0.backward(g).unwrap()
    }
}

struct Rep(RepConvLayer);
impl edgedet::nn::StateDict for Rep {
    fn visit_state(&mut self, p: &str, f: &mut dyn FnMut(&str, edgedet::nn::Shape, &mut [f32])) {
        self.0.visit_state(p, f)
    }
}
impl Module for Rep {
    fn visit_params(&mut self, p: &str, f: &mut dyn FnMut(edgedet::nn::ParamMut<'_>)) {
        self.0.visit_params(p, f)
    }
}
impl Layer for Rep {
    fn fwd(&mut self, x: &Tensor) -> Tensor {
        self.0.forward(x, Mode::Train).unwrap()
    }
    fn bwd(&mut self, g: &Tensor) -> Tensor {
        self.0.backward(g).unwrap()
    }
}

/// Worst relative error over the input gradient and every parameter.
fn audit(layer: &mut dyn Layer, x: &Tensor, rng: &mut impl Rng) -> Vec<(String, f64)> {
    let y = layer.fwd(x);
    let w = random_tensor(rng, y.shape(), -1.0, 1.0);
    let resolution = fd_resolution(&y, &w);
    layer.zero_grad();
    layer.fwd(x);
    let dx = layer.bwd(&w);
    let mut analytic: Vec<(String, Vec<f32>, Vec<f32>)> = Vec::new();
    layer.visit_params("", &mut |p| analytic.push((p.name.clone(), p.value.to_vec(), p.grad.to_vec())));

    let mut rows = Vec::new();
    let fd_x = finite_difference_grad(|t| Ok(weighted(&layer.fwd(t), &w)), x, EPS).unwrap();
    rows.push(("input".to_string(), floored_error(dx.data(), fd_x.data(), resolution)));
    for (name, value, grad) in analytic {
        let mut fd = vec![0.0f32; value.len()];
        for (k, slot) in fd.iter_mut().enumerate() {
            let mut eval = |v: f32| {
                layer.visit_params("", &mut |p| {
                    if p.name == name {
                        p.value[k] = v;
                    }
                });
                weighted(&layer.fwd(x), &w)
            };
            let (hi, lo) = (value[k] + EPS, value[k] - EPS);
            *slot = ((eval(hi) - eval(lo)) / (hi as f64 - lo as f64)) as f32;
            eval(value[k]);
        }
        rows.push((name, floored_error(&grad, &fd, resolution)));
    }
    rows
}

/// Per-element error a central difference of `Σ y·w` cannot resolve: the
/// forward pass runs in f32, so each evaluation carries rounding of order
/// `ε·Σ|y·w|`, amplified by `1/(2·EPS)`. The factor 8 covers accumulation.
fn fd_resolution(y: &Tensor, w: &Tensor) -> f64 {
    let mass: f64 = y.data().iter().zip(w.data()).map(|(&a, &b)| (a as f64 * b as f64).abs()).sum();
    8.0 * f32::EPSILON as f64 * mass / (2.0 * EPS as f64)
}

/// Norm-wise relative error whose scale is floored at what the finite
/// difference can resolve. A parameter whose true gradient vanishes (a conv
/// bias feeding train-mode batch-norm) would otherwise compare two
/// rounding-noise vectors.
fn floored_error(a: &[f32], b: &[f32], resolution: f64) -> f64 {
    let norm = |v: &[f32]| v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let diff: Vec<f32> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let floor = resolution * (a.len() as f64).sqrt() / TOL;
    norm(&diff) / norm(a).max(norm(b)).max(floor)
}

fn assert_rows(case: &str, seed: u64, rows: &[(String, f64)]) {
    for (name, err) in rows {
        assert!(*err <= TOL, "{case} seed {seed}: {name} relative error {err:.2e}");
    }
}

fn random_conv(
    rng: &mut impl Rng,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    bn: bool,
    implicit: bool,
) -> ConvSpec {
    let mut spec = conv_uniform(rng, in_ch, out_ch, k, stride);
    spec.bias = random_vec(rng, out_ch, -0.5, 0.5);
    if bn {
        let stats = random_bn(rng, out_ch);
        spec = spec.with_bn(stats);
    }
    if implicit {
        spec.implicit_add = Some(random_vec(rng, in_ch, -0.5, 0.5));
        spec.implicit_mul = Some(random_vec(rng, out_ch, 0.5, 1.5));
    }
    spec
}

#[test]
fn conv_layers() {
    let acts = [ActivationKind::Silu, ActivationKind::Sigmoid, ActivationKind::Identity];
    for seed in 0..SEEDS {
        let mut rng = keyed(seed, 1);
        let (in_ch, out_ch) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let k = if rng.random_bool(0.5) { 3 } else { 1 };
        let stride = rng.random_range(1..=2);
        let bn = rng.random_bool(0.5);
        let implicit = rng.random_bool(0.5);
        let act = acts[seed as usize % 3];
        let mode = if bn && rng.random_bool(0.5) { Mode::Eval } else { Mode::Train };
        let spec = random_conv(&mut rng, in_ch, out_ch, k, stride, bn, implicit);
        let (h, w) = (rng.random_range(2..=4), rng.random_range(2..=4));
        let x = random_tensor(&mut rng, [2, in_ch, h, w], -1.0, 1.0);
        let mut layer = Conv(ConvLayer::new(spec, act).unwrap(), mode);
        let rows = audit(&mut layer, &x, &mut rng);
        assert_rows(&format!("conv k{k} s{stride} bn {bn} implicit {implicit} {act:?} {mode:?}"), seed, &rows);
    }
}

#[test]
fn batch_norm_layer() {
    for seed in 0..SEEDS {
        let mut rng = keyed(seed, 2);
        let c = rng.random_range(1..=4);
        let mode = if seed % 2 == 0 { Mode::Train } else { Mode::Eval };
        let n = rng.random_range(2..=3);
        let x = random_tensor(&mut rng, [n, c, 3, 4], -2.0, 2.0);
        let mut layer = Bn(BatchNormLayer::new(random_bn(&mut rng, c)), mode);
        assert_rows(&format!("bn {mode:?}"), seed, &audit(&mut layer, &x, &mut rng));
    }
}

#[test]
fn repconv_layer() {
    for seed in 0..SEEDS {
        let mut rng = keyed(seed, 3);
        let c = rng.random_range(1..=4);
        let out = if seed % 2 == 0 { c } else { rng.random_range(1..=4) };
        let b3 = random_conv(&mut rng, c, out, 3, 1, true, false);
        let b1 = random_conv(&mut rng, c, out, 1, 1, true, false);
        let id = (c == out).then(|| random_bn(&mut rng, c));
        let x = random_tensor(&mut rng, [2, c, 4, 4], -1.0, 1.0);
        let mut layer = Rep(RepConvLayer::new(b3, b1, id, ActivationKind::Silu).unwrap());
        assert_rows("repconv", seed, &audit(&mut layer, &x, &mut rng));
    }
}

/// Input gradient of a stateless op against central differences.
fn stateless(x: &Tensor, w: &Tensor, f: impl Fn(&Tensor) -> Tensor, analytic: &Tensor) -> f64 {
    let fd = finite_difference_grad(|t| Ok(weighted(&f(t), w)), x, EPS).unwrap();
    floored_error(analytic.data(), fd.data(), fd_resolution(&f(x), w))
}

#[test]
fn activations_and_upsample() {
    for seed in 0..SEEDS {
        let mut rng = keyed(seed, 4);
        let c = rng.random_range(1..=4);
        let x = random_tensor(&mut rng, [2, c, 3, 4], -3.0, 3.0);
        for kind in [ActivationKind::Silu, ActivationKind::Sigmoid, ActivationKind::Identity] {
            let w = random_tensor(&mut rng, x.shape(), -1.0, 1.0);
            let dx = activation_backward(&x, &w, kind).unwrap();
            let err = stateless(&x, &w, |t| activation(t, kind), &dx);
            assert!(err <= TOL, "{kind:?} seed {seed}: {err:.2e}");
        }
        let up = upsample2x(&x);
        let w = random_tensor(&mut rng, up.shape(), -1.0, 1.0);
        let err = stateless(&x, &w, upsample2x, &upsample2x_backward(&w).unwrap());
        assert!(err <= TOL, "upsample seed {seed}: {err:.2e}");
    }
}

#[test]
fn concat_add_and_mul() {
    for seed in 0..SEEDS {
        let mut rng = keyed(seed, 5);
        let (ca, cb) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let a = random_tensor(&mut rng, [2, ca, 3, 3], -1.0, 1.0);
        let b = random_tensor(&mut rng, [2, cb, 3, 3], -1.0, 1.0);
        let w = random_tensor(&mut rng, [2, ca + cb, 3, 3], -1.0, 1.0);
        let parts = w.split_channels(&[ca, cb]).unwrap();
        let err_a = stateless(&a, &w, |t| Tensor::concat_channels(&[t, &b]).unwrap(), &parts[0]);
        let err_b = stateless(&b, &w, |t| Tensor::concat_channels(&[&a, t]).unwrap(), &parts[1]);
        assert!(err_a <= TOL && err_b <= TOL, "concat seed {seed}: {err_a:.2e} {err_b:.2e}");

        let c = random_tensor(&mut rng, a.shape(), -1.0, 1.0);
        let w = random_tensor(&mut rng, a.shape(), -1.0, 1.0);
        let err = stateless(&a, &w, |t| t.add(&c).unwrap(), &w);
        assert!(err <= TOL, "add seed {seed}: {err:.2e}");
        let (ga, gc) = mul_backward(&a, &c, &w).unwrap();
        let err_a = stateless(&a, &w, |t| t.mul(&c).unwrap(), &ga);
        let err_c = stateless(&c, &w, |t| a.mul(t).unwrap(), &gc);
        assert!(err_a <= TOL && err_c <= TOL, "mul seed {seed}: {err_a:.2e} {err_c:.2e}");
    }
}

#[test]
fn conv_is_affine_in_its_input() {
    for seed in 0..SEEDS {
        let mut rng = keyed(seed, 6);
        let spec = random_conv(&mut rng, 3, 2, 3, 1, false, false);
        let x = random_tensor(&mut rng, [1, 3, 5, 5], -1.0, 1.0);
        let y = random_tensor(&mut rng, [1, 3, 5, 5], -1.0, 1.0);
        let conv = |t: &Tensor| edgedet::nn::conv2d(t, &spec).unwrap();
        let lhs = conv(&x.scale(2.0).add(&y.scale(3.0)).unwrap());
        // The bias enters once on the left and five times on the right.
        let bias = conv(&Tensor::zeros(x.shape()));
        let rhs = conv(&x).scale(2.0).add(&conv(&y).scale(3.0)).unwrap().add(&bias.scale(-4.0)).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-5, "seed {seed}");
    }
}
