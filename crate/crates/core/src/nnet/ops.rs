//! Forward and backward kernels.
//!
//! Every `*_backward` takes the forward input (whose gradient buffer it
//! accumulates into), the layer parameters (whose gradients it accumulates
//! unless the layer is frozen) and the forward output carrying the upstream
//! gradient.

use super::params::LayerParams;
use super::tensor::{Shape, Tensor};
use crate::error::{Error, Result};

/// Zero-padded plane geometry for a `k`×`k` kernel.
///
/// A padded plane has `pad` zero rows/columns around the data plus `2 * pad`
/// trailing zeros. Kernels run over the "span": the padded rows holding
/// data, full padded width, so every kernel tap becomes one contiguous
/// multiply-add at a fixed offset. Span entries in padding columns are
/// scratch and are masked out.
#[derive(Clone, Copy, Debug)]
struct Padded {
    height: usize,
    width: usize,
    pad: usize,
    row: usize,
}

impl Padded {
    fn new(height: usize, width: usize, k: usize) -> Self {
        let pad = k / 2;
        Padded {
            height,
            width,
            pad,
            row: width + 2 * pad,
        }
    }

    fn buffer_len(&self) -> usize {
        (self.height + 2 * self.pad) * self.row + 2 * self.pad
    }

    /// Padded-buffer index of span entry 0, i.e. of data cell (0, 0).
    fn span_start(&self) -> usize {
        self.pad * self.row + self.pad
    }

    fn span_len(&self) -> usize {
        self.height * self.row
    }

    /// Padded-buffer index of tap `(ky, kx)` for span entry 0; entry `s`
    /// reads `tap + s`.
    fn tap(&self, ky: usize, kx: usize) -> usize {
        ky * self.row + kx
    }

    fn span_index(&self, y: usize, x: usize) -> usize {
        y * self.row + x
    }

    fn pad_plane(&self, plane: &[f64], buf: &mut [f64]) {
        for y in 0..self.height {
            let dst = self.span_start() + self.span_index(y, 0);
            buf[dst..dst + self.width].copy_from_slice(&plane[y * self.width..(y + 1) * self.width]);
        }
    }

    fn padded(&self, plane: &[f64]) -> Vec<f64> {
        let mut buf = vec![0.0; self.buffer_len()];
        self.pad_plane(plane, &mut buf);
        buf
    }

    fn span_to_plane(&self, span: &[f64], plane: &mut [f64], accumulate: bool) {
        for y in 0..self.height {
            let src = &span[self.span_index(y, 0)..self.span_index(y, 0) + self.width];
            let dst = &mut plane[y * self.width..(y + 1) * self.width];
            if accumulate {
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            } else {
                dst.copy_from_slice(src);
            }
        }
    }

    fn plane_to_span(&self, plane: &[f64], span: &mut [f64]) {
        for y in 0..self.height {
            let i = self.span_index(y, 0);
            span[i..i + self.width].copy_from_slice(&plane[y * self.width..(y + 1) * self.width]);
        }
    }

    /// 1.0 on data columns of the span, 0.0 on padding columns.
    fn mask(&self) -> Vec<f64> {
        (0..self.span_len())
            .map(|s| {
                let col = s % self.row;
                f64::from(u8::from(col < self.width))
            })
            .collect()
    }
}

/// Defines a kernel function twice: a baseline build and an AVX2 build that
/// is picked at runtime when the CPU supports it. Both compile the same
/// scalar code (no fused multiply-add), so results are bit-identical.
macro_rules! kernel {
    ($(#[$m:meta])* fn $name:ident($($arg:ident: $ty:ty),* $(,)?) $(-> $ret:ty)? $body:block) => {
        $(#[$m])*
        fn $name($($arg: $ty),*) $(-> $ret)? {
            #[inline(always)]
            fn body($($arg: $ty),*) $(-> $ret)? $body
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2")]
                fn wide($($arg: $ty),*) $(-> $ret)? {
                    body($($arg),*)
                }
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: the required CPU feature was detected above.
                    return unsafe { wide($($arg),*) };
                }
            }
            body($($arg),*)
        }
    };
}

kernel! {
/// `span[s] += w * padded[s + tap]` (forward correlation tap).
fn tap_axpy(span: &mut [f64], padded: &[f64], tap: usize, w: f64) {
    let src = &padded[tap..tap + span.len()];
    for (d, s) in span.iter_mut().zip(src) {
        *d += w * s;
    }
}
}

kernel! {
/// `padded[s + tap] += w * span[s]` (transpose of [`tap_axpy`]).
fn tap_axpy_transpose(padded: &mut [f64], span: &[f64], tap: usize, w: f64) {
    let dst = &mut padded[tap..tap + span.len()];
    for (d, s) in dst.iter_mut().zip(span) {
        *d += w * s;
    }
}
}

kernel! {
fn tap_dot(span: &[f64], padded: &[f64], tap: usize) -> f64 {
    let src = &padded[tap..tap + span.len()];
    let mut acc = [0.0; 4];
    let chunks = span.len() / 4;
    for i in 0..chunks {
        for j in 0..4 {
            acc[j] += span[4 * i + j] * src[4 * i + j];
        }
    }
    let mut total = acc[0] + acc[1] + acc[2] + acc[3];
    for i in 4 * chunks..span.len() {
        total += span[i] * src[i];
    }
    total
}
}

fn conv_dims(params: &LayerParams, op: &'static str) -> Result<(usize, usize, usize)> {
    match *params.shape() {
        [cin, cout] => Ok((1, cin, cout)),
        [k1, k2, cin, cout] if k1 == k2 && k1 % 2 == 1 => Ok((k1, cin, cout)),
        _ => Err(Error::shape(op, "[cin, cout] or [k, k, cin, cout] with odd k", format!("{:?}", params.shape()))),
    }
}

/// Same-size, zero-padded, stride-1 cross-correlation without bias.
/// A `[cin, cout]` parameter shape is the 1×1 case.
pub fn conv2d(input: &Tensor, params: &LayerParams) -> Result<Tensor> {
    let (k, cin, cout) = conv_dims(params, "conv2d")?;
    let s = input.shape();
    if s.channels != cin {
        return Err(Error::shape("conv2d", format!("{cin} input channels"), s));
    }
    let mut out = Tensor::zeros(Shape::new(s.height, s.width, cout));
    let w = params.weights();
    if k == 1 {
        for ci in 0..cin {
            let src = input.plane(ci);
            for co in 0..cout {
                let wv = w[ci * cout + co];
                if wv != 0.0 {
                    out.plane_mut(co).iter_mut().zip(src).for_each(|(o, x)| *o += wv * x);
                }
            }
        }
        return Ok(out);
    }
    let geo = Padded::new(s.height, s.width, k);
    let padded: Vec<Vec<f64>> = (0..cin).map(|ci| geo.padded(input.plane(ci))).collect();
    let mut span = vec![0.0; geo.span_len()];
    for co in 0..cout {
        span.iter_mut().for_each(|v| *v = 0.0);
        for (ci, src) in padded.iter().enumerate() {
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[((ky * k + kx) * cin + ci) * cout + co];
                    tap_axpy(&mut span, src, geo.tap(ky, kx), wv);
                }
            }
        }
        geo.span_to_plane(&span, out.plane_mut(co), false);
    }
    debug_assert!(out.is_finite(), "conv2d produced a non-finite value");
    Ok(out)
}

pub fn conv2d_backward(input: &mut Tensor, params: &mut LayerParams, output: &Tensor) -> Result<()> {
    let (k, cin, cout) = conv_dims(params, "conv2d_backward")?;
    let s = input.shape();
    if s.channels != cin || output.shape() != Shape::new(s.height, s.width, cout) {
        return Err(Error::shape("conv2d_backward", s, output.shape()));
    }
    let frozen = params.is_frozen();
    let plane = s.plane();
    if k == 1 {
        for ci in 0..cin {
            for co in 0..cout {
                let up = output.grad_plane(co);
                if !frozen {
                    let g: f64 = up.iter().zip(input.plane(ci)).map(|(a, b)| a * b).sum();
                    params.grads_mut().0[ci * cout + co] += g;
                }
                let wv = params.weights()[ci * cout + co];
                let (_, grad) = input.split_mut();
                grad[ci * plane..(ci + 1) * plane]
                    .iter_mut()
                    .zip(up)
                    .for_each(|(g, u)| *g += wv * u);
            }
        }
        return Ok(());
    }
    let geo = Padded::new(s.height, s.width, k);
    let ups: Vec<Vec<f64>> = (0..cout)
        .map(|co| {
            let mut span = vec![0.0; geo.span_len()];
            geo.plane_to_span(output.grad_plane(co), &mut span);
            span
        })
        .collect();
    let weights = params.weights().to_vec();
    let mut grad_pad = vec![0.0; geo.buffer_len()];
    for ci in 0..cin {
        let src = geo.padded(input.plane(ci));
        grad_pad.iter_mut().for_each(|v| *v = 0.0);
        for (co, up) in ups.iter().enumerate() {
            for ky in 0..k {
                for kx in 0..k {
                    let idx = ((ky * k + kx) * cin + ci) * cout + co;
                    let tap = geo.tap(ky, kx);
                    if !frozen {
                        params.grads_mut().0[idx] += tap_dot(up, &src, tap);
                    }
                    tap_axpy_transpose(&mut grad_pad, up, tap, weights[idx]);
                }
            }
        }
        let (_, grad) = input.split_mut();
        geo.span_to_plane(&grad_pad[geo.span_start()..], &mut grad[ci * plane..(ci + 1) * plane], true);
    }
    Ok(())
}

/// 1×1 convolution, `[cin, cout]` weights, no bias.
pub fn conv1x1(input: &Tensor, params: &LayerParams) -> Result<Tensor> {
    match params.shape() {
        [_, _] | [1, 1, _, _] => conv2d(input, params),
        other => Err(Error::shape("conv1x1", "[cin, cout]", format!("{other:?}"))),
    }
}

pub fn conv1x1_backward(input: &mut Tensor, params: &mut LayerParams, output: &Tensor) -> Result<()> {
    conv2d_backward(input, params, output)
}

/// Per-cell maximum over channels.
pub fn channel_max(input: &Tensor) -> Tensor {
    let s = input.shape();
    assert!(s.channels >= 1, "channel_max needs at least one channel");
    let mut out = Tensor::zeros(Shape::new(s.height, s.width, 1));
    out.values_mut().copy_from_slice(input.plane(0));
    for c in 1..s.channels {
        for (o, &v) in out.values_mut().iter_mut().zip(input.plane(c)) {
            if v > *o {
                *o = v;
            }
        }
    }
    out
}

/// Lowest channel index attaining the maximum at each cell.
pub fn channel_argmax(input: &Tensor) -> Vec<usize> {
    let s = input.shape();
    (0..s.plane())
        .map(|p| {
            let mut best = 0;
            for c in 1..s.channels {
                if input.plane(c)[p] > input.plane(best)[p] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Routes each cell's gradient to its lowest-index argmax channel.
pub fn channel_max_backward(input: &mut Tensor, output: &Tensor) {
    let arg = channel_argmax(input);
    let plane = input.shape().plane();
    let (_, grad) = input.split_mut();
    for (p, &c) in arg.iter().enumerate() {
        grad[c * plane + p] += output.grad()[p];
    }
}

/// Broadcast product of a one-channel mask with every channel of `b`.
pub fn pointwise_mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if !sa.same_spatial(&sb) || sa.channels != 1 {
        return Err(Error::shape("pointwise_mul", format!("{}x{}x1", sb.height, sb.width), sa));
    }
    let mut out = b.clone();
    out.zero_grad();
    for c in 0..sb.channels {
        for (o, m) in out.plane_mut(c).iter_mut().zip(a.values()) {
            *o *= m;
        }
    }
    Ok(out)
}

pub fn pointwise_mul_backward(a: &mut Tensor, b: &mut Tensor, output: &Tensor) {
    let sb = b.shape();
    let plane = sb.plane();
    for c in 0..sb.channels {
        let up = output.grad_plane(c);
        {
            let bv = b.plane(c).to_vec();
            let (_, ga) = a.split_mut();
            for p in 0..plane {
                ga[p] += up[p] * bv[p];
            }
        }
        let av = a.values().to_vec();
        let gb = b.grad_plane_mut(c);
        for p in 0..plane {
            gb[p] += up[p] * av[p];
        }
    }
}

fn dense_dims(input: &Tensor, params: &LayerParams) -> Result<(usize, usize)> {
    match *params.shape() {
        [n, out] if n == input.shape().len() && params.bias().is_some_and(|b| b.len() == out) => Ok((n, out)),
        _ => Err(Error::shape(
            "dense",
            format!("[{}, out] with bias", input.shape().len()),
            format!("{:?}", params.shape()),
        )),
    }
}

/// Affine map of the flattened (channel-major) input.
pub fn dense(input: &Tensor, params: &LayerParams) -> Result<Vec<f64>> {
    let (_, out) = dense_dims(input, params)?;
    let mut y = params.bias().expect("dense bias").to_vec();
    let w = params.weights();
    for (i, &x) in input.values().iter().enumerate() {
        if x != 0.0 {
            let row = &w[i * out..(i + 1) * out];
            for (yo, wo) in y.iter_mut().zip(row) {
                *yo += x * wo;
            }
        }
    }
    Ok(y)
}

pub fn dense_backward(input: &mut Tensor, params: &mut LayerParams, output_grad: &[f64]) -> Result<()> {
    let (n, out) = dense_dims(input, params)?;
    if output_grad.len() != out {
        return Err(Error::shape("dense_backward", out, output_grad.len()));
    }
    if !params.is_frozen() {
        let (wg, bg) = params.grads_mut();
        for (b, g) in bg.iter_mut().zip(output_grad) {
            *b += g;
        }
        for (i, &x) in input.values().iter().enumerate() {
            if x != 0.0 {
                for (o, g) in output_grad.iter().enumerate() {
                    wg[i * out + o] += x * g;
                }
            }
        }
    }
    let w = params.weights().to_vec();
    let (_, gin) = input.split_mut();
    for (i, gi) in gin.iter_mut().enumerate().take(n) {
        let row = &w[i * out..(i + 1) * out];
        *gi += row.iter().zip(output_grad).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(())
}

/// Stored forward pass of [`vi_module`]: every intermediate value map and
/// the argmax channel of every iteration.
#[derive(Clone, Debug)]
pub struct ViTrace {
    shape: Shape,
    kernel: usize,
    iterations: usize,
    /// Padded value maps, `iterations + 1` of them back to back.
    values: Vec<f64>,
    /// Span-indexed argmax filters, one span per iteration.
    argmax: Vec<u8>,
}

impl ViTrace {
    fn geometry(&self) -> Padded {
        Padded::new(self.shape.height, self.shape.width, self.kernel)
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Value map after `k` iterations (`k = 0` is the zero map).
    pub fn value_at(&self, k: usize) -> Vec<f64> {
        let geo = self.geometry();
        let mut plane = vec![0.0; self.shape.plane()];
        geo.span_to_plane(&self.padded_value(k)[geo.span_start()..], &mut plane, false);
        plane
    }

    pub fn value(&self) -> Tensor {
        Tensor::from_values(
            Shape::new(self.shape.height, self.shape.width, 1),
            self.value_at(self.iterations),
        )
        .expect("value plane shape")
    }

    fn padded_value(&self, k: usize) -> &[f64] {
        let n = self.geometry().buffer_len();
        &self.values[k * n..(k + 1) * n]
    }

    fn span_argmax(&self, k: usize) -> &[u8] {
        let n = self.geometry().span_len();
        &self.argmax[(k - 1) * n..k * n]
    }

    /// Argmax filters of iteration `k` (1-based, matching `value_at`).
    pub fn argmax_at(&self, k: usize) -> Vec<u8> {
        let geo = self.geometry();
        let arg = self.span_argmax(k);
        (0..self.shape.height)
            .flat_map(|y| (0..self.shape.width).map(move |x| (y, x)))
            .map(|(y, x)| arg[geo.span_index(y, x)])
            .collect()
    }
}

fn vi_dims(reward: &Tensor, params: &LayerParams) -> Result<(usize, usize)> {
    match *params.shape() {
        [k1, k2, 2, f] if k1 == k2 && k1 % 2 == 1 && f >= 1 && reward.shape().channels == 1 => Ok((k1, f)),
        _ => Err(Error::shape(
            "vi_module",
            "1-channel reward map and [k, k, 2, F] kernel",
            format!("{} / {:?}", reward.shape(), params.shape()),
        )),
    }
}

/// Chunk width of the fused value-iteration kernels.
const LANES: usize = 8;

kernel! {
/// One value-iteration step for the common 3×3 kernel with two filters,
/// fused so every span entry is read and written once. Same summation order
/// as the generic path.
fn vi_step_3x2(
    prev: &[f64],
    base: &[f64],
    mask: &[f64],
    taps: &[[f64; 2]; 9],
    row: usize,
    span: &mut [f64],
    arg: &mut [u8],
) {
    let n = span.len();
    let (b0, b1) = base.split_at(n);
    let offsets = [0, 1, 2, row, row + 1, row + 2, 2 * row, 2 * row + 1, 2 * row + 2];
    assert!(prev.len() >= n + offsets[8]);
    let mut s = 0;
    while s + LANES <= n {
        let mut q0: [f64; LANES] = b0[s..s + LANES].try_into().unwrap();
        let mut q1: [f64; LANES] = b1[s..s + LANES].try_into().unwrap();
        for (o, w) in offsets.iter().zip(taps) {
            let p: &[f64; LANES] = prev[s + o..s + o + LANES].try_into().unwrap();
            for j in 0..LANES {
                q0[j] += w[0] * p[j];
                q1[j] += w[1] * p[j];
            }
        }
        for j in 0..LANES {
            let better = q1[j] > q0[j];
            span[s + j] = if better { q1[j] } else { q0[j] } * mask[s + j];
            arg[s + j] = u8::from(better);
        }
        s += LANES;
    }
    for s in s..n {
        let mut q0 = b0[s];
        let mut q1 = b1[s];
        for (o, w) in offsets.iter().zip(taps) {
            let p = prev[s + o];
            q0 += w[0] * p;
            q1 += w[1] * p;
        }
        let better = q1 > q0;
        span[s] = if better { q1 } else { q0 } * mask[s];
        arg[s] = u8::from(better);
    }
}
}

/// Differentiable value iteration: `V0 = 0`, then `iterations` times
/// `V = channel_max(conv2d(concat(reward, V)))`.
///
/// The reward half of the convolution is the same every iteration and is
/// computed once.
pub fn vi_module(reward: &Tensor, params: &LayerParams, iterations: usize) -> Result<ViTrace> {
    let (k, filters) = vi_dims(reward, params)?;
    let s = reward.shape();
    let geo = Padded::new(s.height, s.width, k);
    let span_len = geo.span_len();
    let start = geo.span_start();
    let w = params.weights();
    let weight = |ky: usize, kx: usize, ci: usize, f: usize| w[((ky * k + kx) * 2 + ci) * filters + f];
    let mask = geo.mask();

    let reward_pad = geo.padded(reward.values());
    let mut base = vec![0.0; filters * span_len];
    for f in 0..filters {
        let dst = &mut base[f * span_len..(f + 1) * span_len];
        for ky in 0..k {
            for kx in 0..k {
                tap_axpy(dst, &reward_pad, geo.tap(ky, kx), weight(ky, kx, 0, f));
            }
        }
    }

    let buf_len = geo.buffer_len();
    let mut values = vec![0.0; (iterations + 1) * buf_len];
    let mut argmax = vec![0u8; iterations * span_len];
    let mut q = base.clone();
    for it in 0..iterations {
        let (done, rest) = values.split_at_mut((it + 1) * buf_len);
        let span = &mut rest[start..start + span_len];
        let arg = &mut argmax[it * span_len..(it + 1) * span_len];
        if it > 0 && k == 3 && filters == 2 {
            let mut taps = [[0.0; 2]; 9];
            for (t, tw) in taps.iter_mut().enumerate() {
                *tw = [weight(t / 3, t % 3, 1, 0), weight(t / 3, t % 3, 1, 1)];
            }
            vi_step_3x2(&done[it * buf_len..], &base, &mask, &taps, geo.row, span, arg);
            continue;
        }
        q.copy_from_slice(&base);
        if it > 0 {
            let prev = &done[it * buf_len..];
            for f in 0..filters {
                let dst = &mut q[f * span_len..(f + 1) * span_len];
                for ky in 0..k {
                    for kx in 0..k {
                        tap_axpy(dst, prev, geo.tap(ky, kx), weight(ky, kx, 1, f));
                    }
                }
            }
        }
        span.copy_from_slice(&q[..span_len]);
        for f in 1..filters {
            let qf = &q[f * span_len..(f + 1) * span_len];
            for ((v, a), &cand) in span.iter_mut().zip(arg.iter_mut()).zip(qf) {
                let better = cand > *v;
                *v = if better { cand } else { *v };
                *a = if better { f as u8 } else { *a };
            }
        }
        for (v, m) in span.iter_mut().zip(&mask) {
            *v *= m;
        }
        debug_assert!(span.iter().all(|v| v.is_finite()), "vi_module diverged");
    }
    Ok(ViTrace {
        shape: s,
        kernel: k,
        iterations,
        values,
        argmax,
    })
}

kernel! {
    /// Backward counterpart of [`vi_step_3x2`]. Routes `g` through the argmax
    /// into `dq_sum`, accumulates per-entry weight-gradient products into
    /// `acc` (tap-major, filter-minor, span-long rows; only when `acc` is
    /// non-empty) and writes the masked gradient w.r.t. the previous value
    /// map into `g_next`. `dq_pad` is scratch of length `n + 2 * (row + 1)`.
    fn vi_back_step_3x2(
        prev: &[f64],
        g: &[f64],
        arg: &[u8],
        mask: &[f64],
        taps: &[[f64; 2]; 9],
        row: usize,
        acc: &mut [f64],
        dq_sum: &mut [f64],
        dq_pad: &mut [f64],
        g_next: &mut [f64],
    ) {
        let n = g.len();
        let lead = row + 1;
        let (pad0, pad1) = dq_pad.split_at_mut(dq_pad.len() / 2);
        let (sum0, sum1) = dq_sum.split_at_mut(n);
        let d0 = &mut pad0[lead..lead + n];
        let d1 = &mut pad1[lead..lead + n];
        for s in 0..n {
            let one = arg[s] != 0;
            d0[s] = if one { 0.0 } else { g[s] };
            d1[s] = if one { g[s] } else { 0.0 };
            sum0[s] += d0[s];
            sum1[s] += d1[s];
        }
        let offsets = [0, 1, 2, row, row + 1, row + 2, 2 * row, 2 * row + 1, 2 * row + 2];
        if !acc.is_empty() {
            for (t, &o) in offsets.iter().enumerate() {
                let src = &prev[o..o + n];
                let (a0, rest) = acc[2 * t * n..].split_at_mut(n);
                let a1 = &mut rest[..n];
                for s in 0..n {
                    a0[s] += d0[s] * src[s];
                    a1[s] += d1[s] * src[s];
                }
            }
        }
        let d0 = &pad0[..n + 2 * lead];
        let d1 = &pad1[..n + 2 * lead];
        let src0: [&[f64]; 9] = offsets.map(|o| &d0[2 * lead - o..2 * lead - o + n]);
        let src1: [&[f64]; 9] = offsets.map(|o| &d1[2 * lead - o..2 * lead - o + n]);
        let mut s = 0;
        while s + LANES <= n {
            let mut v = [0.0; LANES];
            for t in 0..9 {
                let p0: &[f64; LANES] = src0[t][s..s + LANES].try_into().unwrap();
                let p1: &[f64; LANES] = src1[t][s..s + LANES].try_into().unwrap();
                for j in 0..LANES {
                    v[j] += taps[t][0] * p0[j] + taps[t][1] * p1[j];
                }
            }
            for j in 0..LANES {
                g_next[s + j] = v[j] * mask[s + j];
            }
            s += LANES;
        }
        for s in s..n {
            let mut v = 0.0;
            for t in 0..9 {
                v += taps[t][0] * src0[t][s] + taps[t][1] * src1[t][s];
            }
            g_next[s] = v * mask[s];
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn vi_generic_backward(
    geo: &Padded,
    w: &[f64],
    filters: usize,
    frozen: bool,
    trace: &ViTrace,
    g: &mut [f64],
    wgrad: &mut [f64],
    dq_sum: &mut [f64],
) {
    let k = trace.kernel;
    let span_len = geo.span_len();
    let idx = |ky: usize, kx: usize, ci: usize, f: usize| ((ky * k + kx) * 2 + ci) * filters + f;
    let mut g_pad = vec![0.0; geo.buffer_len()];
    let mut dq = vec![0.0; filters * span_len];
    for it in (0..trace.iterations).rev() {
        dq.iter_mut().for_each(|v| *v = 0.0);
        for (i, (&f, &gv)) in trace.span_argmax(it + 1).iter().zip(g.iter()).enumerate() {
            dq[usize::from(f) * span_len + i] = gv;
        }
        for (a, b) in dq_sum.iter_mut().zip(&dq) {
            *a += b;
        }
        if it == 0 {
            break;
        }
        let prev = trace.padded_value(it);
        g_pad.iter_mut().for_each(|v| *v = 0.0);
        for f in 0..filters {
            let up = &dq[f * span_len..(f + 1) * span_len];
            for ky in 0..k {
                for kx in 0..k {
                    let i = idx(ky, kx, 1, f);
                    let tap = geo.tap(ky, kx);
                    if !frozen {
                        wgrad[i] += tap_dot(up, prev, tap);
                    }
                    tap_axpy_transpose(&mut g_pad, up, tap, w[i]);
                }
            }
        }
        // Values on padding are constants; drop their gradient.
        let start = geo.span_start();
        g.iter_mut().for_each(|v| *v = 0.0);
        for y in 0..geo.height {
            let i = geo.span_index(y, 0);
            g[i..i + geo.width].copy_from_slice(&g_pad[start + i..start + i + geo.width]);
        }
    }
}

/// Backward through all iterations of [`vi_module`]; `value_grad` is the
/// gradient with respect to the final value map.
pub fn vi_module_backward(reward: &mut Tensor, params: &mut LayerParams, trace: &ViTrace, value_grad: &[f64]) -> Result<()> {
    let (k, filters) = vi_dims(reward, params)?;
    let s = reward.shape();
    if value_grad.len() != s.plane() || trace.kernel != k || trace.shape != s {
        return Err(Error::shape("vi_module_backward", s.plane(), value_grad.len()));
    }
    let geo = Padded::new(s.height, s.width, k);
    let span_len = geo.span_len();
    let frozen = params.is_frozen();
    let w = params.weights().to_vec();
    let idx = |ky: usize, kx: usize, ci: usize, f: usize| ((ky * k + kx) * 2 + ci) * filters + f;

    // Gradient w.r.t. the current value map, on the span (zero on padding).
    let mut g = vec![0.0; span_len];
    geo.plane_to_span(value_grad, &mut g);
    let mut g_pad = vec![0.0; geo.buffer_len()];
    let mut dq_sum = vec![0.0; filters * span_len];
    let mut wgrad = vec![0.0; w.len()];
    if k == 3 && filters == 2 && trace.iterations > 0 {
        let mut taps = [[0.0; 2]; 9];
        for (t, tw) in taps.iter_mut().enumerate() {
            *tw = [w[idx(t / 3, t % 3, 1, 0)], w[idx(t / 3, t % 3, 1, 1)]];
        }
        let mask = geo.mask();
        let mut acc = vec![0.0; if frozen { 0 } else { 18 * span_len }];
        let mut dq_pad = vec![0.0; 2 * (span_len + 2 * (geo.row + 1))];
        let mut g_next = vec![0.0; span_len];
        for it in (1..trace.iterations).rev() {
            vi_back_step_3x2(
                trace.padded_value(it),
                &g,
                trace.span_argmax(it + 1),
                &mask,
                &taps,
                geo.row,
                &mut acc,
                &mut dq_sum,
                &mut dq_pad,
                &mut g_next,
            );
            std::mem::swap(&mut g, &mut g_next);
        }
        for (i, (&f, &gv)) in trace.span_argmax(1).iter().zip(&g).enumerate() {
            dq_sum[usize::from(f) * span_len + i] += gv;
        }
        for (t, row) in acc.chunks_exact(span_len).enumerate() {
            wgrad[idx(t / 6, (t / 2) % 3, 1, t % 2)] += row.iter().sum::<f64>();
        }
    } else {
        vi_generic_backward(&geo, &w, filters, frozen, trace, &mut g, &mut wgrad, &mut dq_sum);
    }
    let reward_pad = geo.padded(reward.values());
    g_pad.iter_mut().for_each(|v| *v = 0.0);
    for f in 0..filters {
        let up = &dq_sum[f * span_len..(f + 1) * span_len];
        for ky in 0..k {
            for kx in 0..k {
                let i = idx(ky, kx, 0, f);
                let tap = geo.tap(ky, kx);
                if !frozen {
                    wgrad[i] += tap_dot(up, &reward_pad, tap);
                }
                tap_axpy_transpose(&mut g_pad, up, tap, w[i]);
            }
        }
    }
    if !frozen {
        for (g, d) in params.grads_mut().0.iter_mut().zip(&wgrad) {
            *g += d;
        }
    }
    let (_, gr) = reward.split_mut();
    geo.span_to_plane(&g_pad[geo.span_start()..], gr, true);
    Ok(())
}
