//! Kernel behaviour and finite-difference checks of every backward pass.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use vinlab_core::nnet::gradcheck::{branch_signature, relative_error, FD_STEP};
use vinlab_core::nnet::*;

fn random_tensor(shape: Shape, rng: &mut SplitMix64) -> Tensor {
    Tensor::from_fn(shape, |_, _, _| rng.random_range(-1.0..1.0))
}

fn random_layer(name: &str, shape: &[usize], bias: Option<usize>, rng: &mut SplitMix64) -> LayerParams {
    let mut l = LayerParams::zeros(name, shape, bias);
    for i in 0..l.parameter_count() {
        *l.param_mut(i) = rng.random_range(-1.0..1.0);
    }
    l
}

type Forward = fn(&[Tensor], &LayerParams) -> (Vec<f64>, u64);
type Backward = fn(&mut [Tensor], &mut LayerParams, &[f64]);

/// Loss = <projection, flattened output>; parameters are the inputs'
/// values followed by the layer's parameters.
struct OpProbe {
    inputs: Vec<Tensor>,
    layer: LayerParams,
    projection: Vec<f64>,
    forward: Forward,
    backward: Backward,
}

impl OpProbe {
    fn new(inputs: Vec<Tensor>, layer: LayerParams, forward: Forward, backward: Backward, rng: &mut SplitMix64) -> Self {
        let n = forward(&inputs, &layer).0.len();
        let projection = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        OpProbe {
            inputs,
            layer,
            projection,
            forward,
            backward,
        }
    }

    fn locate(&self, mut i: usize) -> (Option<usize>, usize) {
        for (t, x) in self.inputs.iter().enumerate() {
            if i < x.shape().len() {
                return (Some(t), i);
            }
            i -= x.shape().len();
        }
        (None, i)
    }
}

impl GradProbe for OpProbe {
    fn num_params(&self) -> usize {
        self.inputs.iter().map(|t| t.shape().len()).sum::<usize>() + self.layer.parameter_count()
    }

    fn param(&self, i: usize) -> f64 {
        match self.locate(i) {
            (Some(t), j) => self.inputs[t].values()[j],
            (None, j) => self.layer.param(j),
        }
    }

    fn set_param(&mut self, i: usize, value: f64) {
        match self.locate(i) {
            (Some(t), j) => self.inputs[t].values_mut()[j] = value,
            (None, j) => *self.layer.param_mut(j) = value,
        }
    }

    fn is_trainable(&self, i: usize) -> bool {
        self.locate(i).0.is_some() || !self.layer.is_frozen()
    }

    fn evaluate(&mut self) -> (f64, u64) {
        let (out, sig) = (self.forward)(&self.inputs, &self.layer);
        (out.iter().zip(&self.projection).map(|(a, b)| a * b).sum(), sig)
    }

    fn analytic_gradient(&mut self) -> Vec<f64> {
        self.inputs.iter_mut().for_each(Tensor::zero_grad);
        self.layer.zero_grad();
        (self.backward)(&mut self.inputs, &mut self.layer, &self.projection);
        let mut g: Vec<f64> = self.inputs.iter().flat_map(|t| t.grad().to_vec()).collect();
        g.extend((0..self.layer.parameter_count()).map(|i| self.layer.grad(i)));
        g
    }
}

fn with_grad(mut t: Tensor, grad: &[f64]) -> Tensor {
    t.grad_mut().copy_from_slice(grad);
    t
}

fn conv_fwd(x: &[Tensor], l: &LayerParams) -> (Vec<f64>, u64) {
    (conv2d(&x[0], l).unwrap().values().to_vec(), 0)
}

fn conv_bwd(x: &mut [Tensor], l: &mut LayerParams, g: &[f64]) {
    let out = with_grad(conv2d(&x[0], l).unwrap(), g);
    conv2d_backward(&mut x[0], l, &out).unwrap();
}

fn max_fwd(x: &[Tensor], _: &LayerParams) -> (Vec<f64>, u64) {
    (channel_max(&x[0]).values().to_vec(), branch_signature(channel_argmax(&x[0])))
}

fn max_bwd(x: &mut [Tensor], _: &mut LayerParams, g: &[f64]) {
    let out = with_grad(channel_max(&x[0]), g);
    channel_max_backward(&mut x[0], &out);
}

fn mul_fwd(x: &[Tensor], _: &LayerParams) -> (Vec<f64>, u64) {
    (pointwise_mul(&x[0], &x[1]).unwrap().values().to_vec(), 0)
}

fn mul_bwd(x: &mut [Tensor], _: &mut LayerParams, g: &[f64]) {
    let out = with_grad(pointwise_mul(&x[0], &x[1]).unwrap(), g);
    let (a, b) = x.split_at_mut(1);
    pointwise_mul_backward(&mut a[0], &mut b[0], &out);
}

fn dense_fwd(x: &[Tensor], l: &LayerParams) -> (Vec<f64>, u64) {
    (dense(&x[0], l).unwrap(), 0)
}

fn dense_bwd(x: &mut [Tensor], l: &mut LayerParams, g: &[f64]) {
    dense_backward(&mut x[0], l, g).unwrap();
}

const VI_ITERS: usize = 4;

fn vi_fwd(x: &[Tensor], l: &LayerParams) -> (Vec<f64>, u64) {
    let trace = vi_module(&x[0], l, VI_ITERS).unwrap();
    let sig = (1..=VI_ITERS).flat_map(|k| trace.argmax_at(k).iter().map(|&a| usize::from(a)).collect::<Vec<_>>());
    (trace.value().values().to_vec(), branch_signature(sig))
}

fn vi_bwd(x: &mut [Tensor], l: &mut LayerParams, g: &[f64]) {
    let trace = vi_module(&x[0], l, VI_ITERS).unwrap();
    vi_module_backward(&mut x[0], l, &trace, g).unwrap();
}

fn none() -> LayerParams {
    LayerParams::zeros("none", &[1, 1], None)
}

#[test]
fn conv1x1_identity_and_lookup() {
    let mut rng = SplitMix64::seed_from_u64(1);
    let x = random_tensor(Shape::new(8, 8, 3), &mut rng);
    let mut eye = LayerParams::zeros("eye", &[3, 3], None);
    for i in 0..3 {
        eye.weights_mut()[i * 3 + i] = 1.0;
    }
    assert_eq!(conv1x1(&x, &eye).unwrap().values(), x.values());

    // One-hot input selects a row of the score table.
    let table = [0.5, -2.0, 7.0];
    let mut scores = LayerParams::zeros("score", &[3, 1], None);
    scores.weights_mut().copy_from_slice(&table);
    let onehot = Tensor::from_fn(Shape::new(8, 8, 3), |h, w, c| f64::from(u8::from((h + w) % 3 == c)));
    let out = conv1x1(&onehot, &scores).unwrap();
    for h in 0..8 {
        for w in 0..8 {
            assert_eq!(out.get(h, w, 0), table[(h + w) % 3]);
        }
    }
}

#[test]
fn conv2d_delta_and_plateau() {
    let mut rng = SplitMix64::seed_from_u64(2);
    let x = random_tensor(Shape::new(8, 8, 1), &mut rng);
    let mut delta = LayerParams::zeros("delta", &[3, 3, 1, 1], None);
    delta.weights_mut()[4] = 1.0;
    assert_eq!(conv2d(&x, &delta).unwrap().values(), x.values());

    let mut ones = LayerParams::zeros("ones", &[3, 3, 1, 1], None);
    ones.weights_mut().iter_mut().for_each(|w| *w = 1.0);
    for (r, c) in [(4usize, 4usize), (0, 0), (7, 3)] {
        let mut impulse = Tensor::zeros(Shape::new(8, 8, 1));
        impulse.set(r, c, 0, 1.0);
        let out = conv2d(&impulse, &ones).unwrap();
        for h in 0..8usize {
            for w in 0..8usize {
                let inside = h.abs_diff(r) <= 1 && w.abs_diff(c) <= 1;
                assert_eq!(out.get(h, w, 0), f64::from(u8::from(inside)), "({h},{w})");
            }
        }
    }
}

#[test]
fn conv_shape_errors() {
    let x = Tensor::zeros(Shape::new(8, 8, 3));
    assert!(conv2d(&x, &LayerParams::zeros("w", &[3, 3, 2, 1], None)).is_err());
    assert!(conv2d(&x, &LayerParams::zeros("w", &[2, 2, 3, 1], None)).is_err());
    assert!(conv1x1(&x, &LayerParams::zeros("w", &[3, 3, 3, 1], None)).is_err());
    assert!(dense(&x, &LayerParams::zeros("w", &[192, 4], None)).is_err());
    assert!(pointwise_mul(&x, &x).is_err());
}

#[test]
fn channel_max_values() {
    let x = Tensor::from_fn(Shape::new(1, 1, 3), |_, _, c| [-1.0, 2.0, 0.0][c]);
    assert_eq!(channel_max(&x).values(), &[2.0]);
    let mut rng = SplitMix64::seed_from_u64(3);
    let single = random_tensor(Shape::new(8, 8, 1), &mut rng);
    assert_eq!(channel_max(&single).values(), single.values());
}

#[test]
fn channel_max_tie_routes_to_lowest_index() {
    let mut x = Tensor::from_fn(Shape::new(1, 2, 2), |_, w, c| if w == 0 { 1.0 } else { c as f64 });
    let mut out = channel_max(&x);
    out.grad_mut().copy_from_slice(&[1.0, 1.0]);
    channel_max_backward(&mut x, &out);
    assert_eq!(x.grad_at(0, 0, 0), 1.0);
    assert_eq!(x.grad_at(0, 0, 1), 0.0);
    assert_eq!(x.grad_at(0, 1, 1), 1.0);
}

#[test]
fn pointwise_mul_masks() {
    let mut rng = SplitMix64::seed_from_u64(4);
    let b = random_tensor(Shape::new(8, 8, 4), &mut rng);
    let ones = Tensor::from_fn(Shape::new(8, 8, 1), |_, _, _| 1.0);
    assert_eq!(pointwise_mul(&ones, &b).unwrap().values(), b.values());
    let spot = Tensor::from_fn(Shape::new(8, 8, 1), |h, w, _| f64::from(u8::from((h, w) == (2, 5))));
    let out = pointwise_mul(&spot, &b).unwrap();
    for c in 0..4 {
        for h in 0..8 {
            for w in 0..8 {
                let expected = if (h, w) == (2, 5) { b.get(h, w, c) } else { 0.0 };
                assert_eq!(out.get(h, w, c), expected);
            }
        }
    }
}

#[test]
fn dense_bias_and_row_selection() {
    let x = Tensor::zeros(Shape::new(2, 2, 1));
    let mut l = LayerParams::zeros("q", &[4, 4], Some(4));
    l.bias_mut().unwrap().copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(dense(&x, &l).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
    for (i, w) in l.weights_mut().iter_mut().enumerate() {
        *w = i as f64;
    }
    let onehot = Tensor::from_fn(Shape::new(2, 2, 1), |h, w, _| f64::from(u8::from((h, w) == (1, 0))));
    assert_eq!(dense(&onehot, &l).unwrap(), vec![9.0, 11.0, 13.0, 15.0]);
}

/// Independent scalar restatement of the value-iteration recurrence.
fn reference_vi(reward: &[[f64; 8]; 8], w: &[f64], filters: usize, iterations: usize) -> [[f64; 8]; 8] {
    let mut v = [[0.0; 8]; 8];
    for _ in 0..iterations {
        let mut next = [[f64::NEG_INFINITY; 8]; 8];
        for y in 0..8i32 {
            for x in 0..8i32 {
                for f in 0..filters {
                    let mut q = 0.0;
                    for ky in 0..3i32 {
                        for kx in 0..3i32 {
                            let (sy, sx) = (y + ky - 1, x + kx - 1);
                            if !(0..8).contains(&sy) || !(0..8).contains(&sx) {
                                continue;
                            }
                            let tap = ((ky * 3 + kx) * 2) as usize;
                            q += w[tap * filters + f] * reward[sy as usize][sx as usize];
                            q += w[(tap + 1) * filters + f] * v[sy as usize][sx as usize];
                        }
                    }
                    next[y as usize][x as usize] = next[y as usize][x as usize].max(q);
                }
            }
        }
        v = next;
    }
    v
}

fn grid_to_tensor(g: &[[f64; 8]; 8]) -> Tensor {
    Tensor::from_fn(Shape::new(8, 8, 1), |h, w, _| g[h][w])
}

#[test]
fn vi_zero_iterations_is_zero() {
    let mut rng = SplitMix64::seed_from_u64(5);
    let r = random_tensor(Shape::new(8, 8, 1), &mut rng);
    let l = random_layer("vi", &[3, 3, 2, 2], None, &mut rng);
    assert!(vi_module(&r, &l, 0).unwrap().value().values().iter().all(|&v| v == 0.0));
}

#[test]
fn vi_translation_kernel_reachability() {
    // Filter 0 copies the reward, filter 1 shifts the value one cell right.
    let mut l = LayerParams::zeros("vi", &[3, 3, 2, 2], None);
    let tap = |ky: usize, kx: usize, ci: usize, f: usize| ((ky * 3 + kx) * 2 + ci) * 2 + f;
    l.weights_mut()[tap(1, 1, 0, 0)] = 1.0;
    l.weights_mut()[tap(1, 0, 1, 1)] = 1.0;
    let mut reward = [[0.0; 8]; 8];
    reward[4][2] = 1.0;
    let trace = vi_module(&grid_to_tensor(&reward), &l, 3).unwrap();
    let expected = reference_vi(&reward, l.weights(), 2, 3);
    let v = trace.value();
    for y in 0..8 {
        for x in 0..8 {
            assert_eq!(v.get(y, x, 0), expected[y][x]);
            let reachable = y == 4 && (2..=4).contains(&x);
            assert_eq!(v.get(y, x, 0), f64::from(u8::from(reachable)), "({y},{x})");
        }
    }
}

#[test]
fn vi_matches_reference_on_random_weights() {
    let mut rng = SplitMix64::seed_from_u64(6);
    for _ in 0..5 {
        let mut reward = [[0.0; 8]; 8];
        reward.iter_mut().flatten().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let l = random_layer("vi", &[3, 3, 2, 2], None, &mut rng);
        let got = vi_module(&grid_to_tensor(&reward), &l, 7).unwrap().value();
        let want = reference_vi(&reward, l.weights(), 2, 7);
        for y in 0..8 {
            for x in 0..8 {
                assert!((got.get(y, x, 0) - want[y][x]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn vi_nonnegative_inputs_stay_nonnegative() {
    let mut rng = SplitMix64::seed_from_u64(7);
    let r = Tensor::from_fn(Shape::new(8, 8, 1), |_, _, _| rng.random_range(0.0..1.0));
    let mut l = LayerParams::zeros("vi", &[3, 3, 2, 2], None);
    l.weights_mut().iter_mut().for_each(|w| *w = rng.random_range(0.0..0.2));
    let trace = vi_module(&r, &l, 10).unwrap();
    assert!(trace.value().values().iter().all(|&v| v >= 0.0));
}

fn check(probe: &mut OpProbe, tolerance: f64) {
    let report = gradient_check(probe, FD_STEP);
    assert!(report.checked > 0);
    assert!(report.passes(tolerance), "{report:?}");
}

#[test]
fn conv1x1_gradient() {
    let mut rng = SplitMix64::seed_from_u64(10);
    let x = random_tensor(Shape::new(8, 8, 5), &mut rng);
    let l = random_layer("att", &[5, 1], None, &mut rng);
    check(&mut OpProbe::new(vec![x], l, conv_fwd, conv_bwd, &mut rng), 1e-6);
}

#[test]
fn conv2d_gradient() {
    let mut rng = SplitMix64::seed_from_u64(11);
    for (k, cin, cout) in [(3, 2, 4), (5, 1, 2)] {
        let x = random_tensor(Shape::new(8, 8, cin), &mut rng);
        let l = random_layer("conv", &[k, k, cin, cout], None, &mut rng);
        check(&mut OpProbe::new(vec![x], l, conv_fwd, conv_bwd, &mut rng), 1e-6);
    }
}

#[test]
fn channel_max_gradient_away_from_ties() {
    let mut rng = SplitMix64::seed_from_u64(12);
    let x = random_tensor(Shape::new(8, 8, 3), &mut rng);
    check(&mut OpProbe::new(vec![x], none(), max_fwd, max_bwd, &mut rng), 1e-6);
}

#[test]
fn channel_max_tie_is_excluded_from_check() {
    let mut rng = SplitMix64::seed_from_u64(13);
    let mut x = random_tensor(Shape::new(2, 2, 2), &mut rng);
    let v = x.get(0, 0, 0);
    x.set(0, 0, 1, v);
    let mut probe = OpProbe::new(vec![x], none(), max_fwd, max_bwd, &mut rng);
    let report = gradient_check(&mut probe, FD_STEP);
    assert_eq!(report.skipped_ties, 2);
    assert!(report.passes(1e-6), "{report:?}");
}

#[test]
fn pointwise_mul_gradient() {
    let mut rng = SplitMix64::seed_from_u64(14);
    let a = random_tensor(Shape::new(8, 8, 1), &mut rng);
    let b = random_tensor(Shape::new(8, 8, 4), &mut rng);
    check(&mut OpProbe::new(vec![a, b], none(), mul_fwd, mul_bwd, &mut rng), 1e-6);
}

#[test]
fn dense_gradient() {
    let mut rng = SplitMix64::seed_from_u64(15);
    let x = random_tensor(Shape::new(8, 8, 4), &mut rng);
    let l = random_layer("q", &[256, 4], Some(4), &mut rng);
    let mut probe = OpProbe::new(vec![x], l, dense_fwd, dense_bwd, &mut rng);
    let report = gradient_check(&mut probe, FD_STEP);
    assert!(report.passes(1e-6), "{report:?}");
    assert!(report.max_scaled_error < 1e-8, "{report:?}");
}

#[test]
fn vi_module_gradient() {
    let mut rng = SplitMix64::seed_from_u64(16);
    let r = random_tensor(Shape::new(8, 8, 1), &mut rng);
    let mut l = random_layer("vi", &[3, 3, 2, 2], None, &mut rng);
    l.weights_mut().iter_mut().for_each(|w| *w *= 0.3);
    check(&mut OpProbe::new(vec![r], l, vi_fwd, vi_bwd, &mut rng), 1e-4);
}

#[test]
fn frozen_layer_gets_no_gradient() {
    let mut rng = SplitMix64::seed_from_u64(17);
    let x = random_tensor(Shape::new(8, 8, 2), &mut rng);
    let mut l = random_layer("conv", &[3, 3, 2, 4], None, &mut rng);
    l.set_frozen(true);
    let mut probe = OpProbe::new(vec![x], l, conv_fwd, conv_bwd, &mut rng);
    let report = gradient_check(&mut probe, FD_STEP);
    assert_eq!(report.frozen, 72);
    assert_eq!(report.checked, 128);
    assert!(probe.layer.weight_grad().iter().all(|&g| g == 0.0));
    assert!(report.passes(1e-6));
}

#[test]
fn relative_error_floor() {
    assert_eq!(relative_error(0.0, 0.0), 0.0);
    assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-12);
}

fn linear_combo(a: &Tensor, b: &Tensor, alpha: f64, beta: f64) -> Tensor {
    let v = a.values().iter().zip(b.values()).map(|(x, y)| alpha * x + beta * y).collect();
    Tensor::from_values(a.shape(), v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn linear_layers_are_linear(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let mut rng = SplitMix64::seed_from_u64(seed);
        let s = Shape::new(8, 8, 2);
        let (x, y) = (random_tensor(s, &mut rng), random_tensor(s, &mut rng));
        let z = linear_combo(&x, &y, alpha, beta);
        let close = |p: &[f64], q: &[f64]| p.iter().zip(q).all(|(a, b)| (a - b).abs() < 1e-12 * (1.0 + a.abs()));

        let conv = random_layer("c", &[3, 3, 2, 4], None, &mut rng);
        let (fx, fy, fz) = (conv2d(&x, &conv).unwrap(), conv2d(&y, &conv).unwrap(), conv2d(&z, &conv).unwrap());
        prop_assert!(close(fz.values(), linear_combo(&fx, &fy, alpha, beta).values()));

        let pw = random_layer("p", &[2, 3], None, &mut rng);
        let (fx, fy, fz) = (conv1x1(&x, &pw).unwrap(), conv1x1(&y, &pw).unwrap(), conv1x1(&z, &pw).unwrap());
        prop_assert!(close(fz.values(), linear_combo(&fx, &fy, alpha, beta).values()));

        // Dense is affine: f(ax + by) - bias = a (f(x) - bias) + b (f(y) - bias).
        let d = random_layer("d", &[128, 4], Some(4), &mut rng);
        let bias = d.bias().unwrap().to_vec();
        let (fx, fy, fz) = (dense(&x, &d).unwrap(), dense(&y, &d).unwrap(), dense(&z, &d).unwrap());
        for o in 0..4 {
            let lhs = fz[o] - bias[o];
            let rhs = alpha * (fx[o] - bias[o]) + beta * (fy[o] - bias[o]);
            prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
        }
    }
}
