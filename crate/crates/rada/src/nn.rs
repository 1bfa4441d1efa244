//! Hand-rolled neural-net primitives on dense 4D tensors `[c, h, w, d]`.
//!
//! Every op comes as a `_fwd`/`_bwd` pair with explicit caches; there is no
//! autograd. Ops are generic over the element type: `f32` for training speed
//! on CPU, `f64` for finite-difference gradient verification. Inner loops run
//! over the contiguous last axis so the compiler can vectorize them.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Element scalar for tensors: `f32` or `f64`.
pub trait Real:
    num_traits::Float + Default + std::fmt::Debug + std::iter::Sum + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dims of a `[c, h, w, d]` tensor; `d` is fastest-varying.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape4 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

impl Shape4 {
    pub fn new(c: usize, h: usize, w: usize, d: usize) -> Shape4 {
        Shape4 { c, h, w, d }
    }
    pub fn len(&self) -> usize {
        self.c * self.h * self.w * self.d
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn spatial(&self) -> usize {
        self.h * self.w * self.d
    }
    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize, z: usize) -> usize {
        ((c * self.h + y) * self.w + x) * self.d + z
    }
    pub fn with_channels(&self, c: usize) -> Shape4 {
        Shape4 { c, ..*self }
    }
}

/// Dense owned tensor in C order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub data: Vec<T>,
    pub shape: Shape4,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: Shape4) -> Tensor<T> {
        Tensor {
            data: vec![T::zero(); shape.len()],
            shape,
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Tensor<T> {
        assert_eq!(data.len(), shape.len(), "tensor data/shape mismatch");
        Tensor { data, shape }
    }

    /// Contiguous `[h·w·d]` slice of one channel.
    pub fn channel(&self, c: usize) -> &[T] {
        let s = self.shape.spatial();
        &self.data[c * s..(c + 1) * s]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let s = self.shape.spatial();
        &mut self.data[c * s..(c + 1) * s]
    }

    pub fn map_to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }
}

#[inline]
fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

#[inline]
fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    let mut acc = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        acc = acc + a * b;
    }
    acc
}

// ---------------------------------------------------------------------------
// 3x3x3 convolution, stride 1, zero padding 1 (shape-preserving)
// ---------------------------------------------------------------------------

/// Valid output range along one axis for kernel offset `k - 1` (k in 0..3).
#[inline]
fn conv3_range(n: usize, k: usize) -> (usize, usize) {
    // out + (k-1) must land in [0, n)
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if k == 2 { n - 1 } else { n };
    (lo, hi)
}

/// `w` layout: `[co][ci][3][3][3]`; `b` length `co`.
pub fn conv3_fwd<T: Real>(x: &Tensor<T>, w: &[T], b: &[T], co: usize) -> Tensor<T> {
    let Shape4 { c: ci, h, w: iw, d } = x.shape;
    debug_assert_eq!(w.len(), co * ci * 27);
    debug_assert_eq!(b.len(), co);
    let oshape = x.shape.with_channels(co);
    let mut out = Tensor::zeros(oshape);
    for o in 0..co {
        out.channel_mut(o).fill(b[o]);
    }
    for o in 0..co {
        for i in 0..ci {
            let wbase = (o * ci + i) * 27;
            for ky in 0..3 {
                let (ylo, yhi) = conv3_range(h, ky);
                for kx in 0..3 {
                    let (xlo, xhi) = conv3_range(iw, kx);
                    for kz in 0..3 {
                        let (zlo, zhi) = conv3_range(d, kz);
                        let wk = w[wbase + (ky * 3 + kx) * 3 + kz];
                        let n = zhi - zlo;
                        for y in ylo..yhi {
                            let sy = y + ky - 1;
                            for xx in xlo..xhi {
                                let sx = xx + kx - 1;
                                let ob = oshape.idx(o, y, xx, zlo);
                                let xb = x.shape.idx(i, sy, sx, zlo + kz - 1);
                                axpy(wk, &x.data[xb..xb + n], {
                                    let data = &mut out.data;
                                    &mut data[ob..ob + n]
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates into `gx`, `gw`, `gb`.
pub fn conv3_bwd<T: Real>(
    x: &Tensor<T>,
    w: &[T],
    gout: &Tensor<T>,
    gx: &mut Tensor<T>,
    gw: &mut [T],
    gb: &mut [T],
) {
    let Shape4 { c: ci, h, w: iw, d } = x.shape;
    let co = gout.shape.c;
    debug_assert_eq!(gx.shape, x.shape);
    for o in 0..co {
        gb[o] = gb[o] + gout.channel(o).iter().copied().sum();
    }
    for o in 0..co {
        for i in 0..ci {
            let wbase = (o * ci + i) * 27;
            for ky in 0..3 {
                let (ylo, yhi) = conv3_range(h, ky);
                for kx in 0..3 {
                    let (xlo, xhi) = conv3_range(iw, kx);
                    for kz in 0..3 {
                        let (zlo, zhi) = conv3_range(d, kz);
                        let widx = wbase + (ky * 3 + kx) * 3 + kz;
                        let wk = w[widx];
                        let n = zhi - zlo;
                        let mut wacc = T::zero();
                        for y in ylo..yhi {
                            let sy = y + ky - 1;
                            for xx in xlo..xhi {
                                let sx = xx + kx - 1;
                                let gb_ = gout.shape.idx(o, y, xx, zlo);
                                let xb = x.shape.idx(i, sy, sx, zlo + kz - 1);
                                let grow = &gout.data[gb_..gb_ + n];
                                wacc = wacc + dot(&x.data[xb..xb + n], grow);
                                axpy(wk, grow, &mut gx.data[xb..xb + n]);
                            }
                        }
                        gw[widx] = gw[widx] + wacc;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// 2x2x2 convolution, stride 2 (downsampling)
// ---------------------------------------------------------------------------

/// `w` layout: `[co][ci][2][2][2]`; halves every spatial dim (which must be
/// even).
pub fn down_fwd<T: Real>(x: &Tensor<T>, w: &[T], b: &[T], co: usize) -> Tensor<T> {
    let Shape4 { c: ci, h, w: iw, d } = x.shape;
    debug_assert!(h % 2 == 0 && iw % 2 == 0 && d % 2 == 0);
    let oshape = Shape4::new(co, h / 2, iw / 2, d / 2);
    let mut out = Tensor::zeros(oshape);
    for o in 0..co {
        out.channel_mut(o).fill(b[o]);
    }
    let od = d / 2;
    for o in 0..co {
        for i in 0..ci {
            let wbase = (o * ci + i) * 8;
            for ky in 0..2 {
                for kx in 0..2 {
                    for kz in 0..2 {
                        let wk = w[wbase + (ky * 2 + kx) * 2 + kz];
                        for y in 0..h / 2 {
                            for xx in 0..iw / 2 {
                                let ob = oshape.idx(o, y, xx, 0);
                                let xb = x.shape.idx(i, 2 * y + ky, 2 * xx + kx, kz);
                                let orow = &mut out.data[ob..ob + od];
                                let xrow = &x.data[xb..xb + 2 * od - 1];
                                for (z, oz) in orow.iter_mut().enumerate() {
                                    *oz = *oz + wk * xrow[2 * z];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn down_bwd<T: Real>(
    x: &Tensor<T>,
    w: &[T],
    gout: &Tensor<T>,
    gx: &mut Tensor<T>,
    gw: &mut [T],
    gb: &mut [T],
) {
    let Shape4 { c: ci, h, w: iw, d } = x.shape;
    let co = gout.shape.c;
    let od = d / 2;
    for o in 0..co {
        gb[o] = gb[o] + gout.channel(o).iter().copied().sum();
    }
    for o in 0..co {
        for i in 0..ci {
            let wbase = (o * ci + i) * 8;
            for ky in 0..2 {
                for kx in 0..2 {
                    for kz in 0..2 {
                        let widx = wbase + (ky * 2 + kx) * 2 + kz;
                        let wk = w[widx];
                        let mut wacc = T::zero();
                        for y in 0..h / 2 {
                            for xx in 0..iw / 2 {
                                let gb_ = gout.shape.idx(o, y, xx, 0);
                                let xb = x.shape.idx(i, 2 * y + ky, 2 * xx + kx, kz);
                                let grow = &gout.data[gb_..gb_ + od];
                                for (z, &gz) in grow.iter().enumerate() {
                                    wacc = wacc + x.data[xb + 2 * z] * gz;
                                    gx.data[xb + 2 * z] = gx.data[xb + 2 * z] + wk * gz;
                                }
                            }
                        }
                        gw[widx] = gw[widx] + wacc;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// 2x2x2 transposed convolution, stride 2 (upsampling)
// ---------------------------------------------------------------------------

/// `w` layout: `[co][ci][2][2][2]`; doubles every spatial dim. Each output
/// voxel receives exactly one kernel tap per input channel.
pub fn up_fwd<T: Real>(x: &Tensor<T>, w: &[T], b: &[T], co: usize) -> Tensor<T> {
    let Shape4 { c: ci, h, w: iw, d } = x.shape;
    let oshape = Shape4::new(co, 2 * h, 2 * iw, 2 * d);
    let mut out = Tensor::zeros(oshape);
    for o in 0..co {
        out.channel_mut(o).fill(b[o]);
    }
    for o in 0..co {
        for i in 0..ci {
            let wbase = (o * ci + i) * 8;
            for ky in 0..2 {
                for kx in 0..2 {
                    for kz in 0..2 {
                        let wk = w[wbase + (ky * 2 + kx) * 2 + kz];
                        for y in 0..h {
                            for xx in 0..iw {
                                let xb = x.shape.idx(i, y, xx, 0);
                                let ob = oshape.idx(o, 2 * y + ky, 2 * xx + kx, kz);
                                let xrow = &x.data[xb..xb + d];
                                let orow = &mut out.data[ob..ob + 2 * d - 1];
                                for (z, &xv) in xrow.iter().enumerate() {
                                    orow[2 * z] = orow[2 * z] + wk * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn up_bwd<T: Real>(
    x: &Tensor<T>,
    w: &[T],
    gout: &Tensor<T>,
    gx: &mut Tensor<T>,
    gw: &mut [T],
    gb: &mut [T],
) {
    let Shape4 { c: ci, h, w: iw, d } = x.shape;
    let co = gout.shape.c;
    for o in 0..co {
        gb[o] = gb[o] + gout.channel(o).iter().copied().sum();
    }
    for o in 0..co {
        for i in 0..ci {
            let wbase = (o * ci + i) * 8;
            for ky in 0..2 {
                for kx in 0..2 {
                    for kz in 0..2 {
                        let widx = wbase + (ky * 2 + kx) * 2 + kz;
                        let wk = w[widx];
                        let mut wacc = T::zero();
                        for y in 0..h {
                            for xx in 0..iw {
                                let xb = x.shape.idx(i, y, xx, 0);
                                let ob = gout.shape.idx(o, 2 * y + ky, 2 * xx + kx, kz);
                                let grow = &gout.data[ob..ob + 2 * d - 1];
                                for z in 0..d {
                                    let gz = grow[2 * z];
                                    wacc = wacc + x.data[xb + z] * gz;
                                    gx.data[xb + z] = gx.data[xb + z] + wk * gz;
                                }
                            }
                        }
                        gw[widx] = gw[widx] + wacc;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// 1x1x1 convolution (pointwise channel mix)
// ---------------------------------------------------------------------------

/// `w` layout: `[co][ci]`.
pub fn conv1_fwd<T: Real>(x: &Tensor<T>, w: &[T], b: &[T], co: usize) -> Tensor<T> {
    let ci = x.shape.c;
    let mut out = Tensor::zeros(x.shape.with_channels(co));
    for o in 0..co {
        out.channel_mut(o).fill(b[o]);
    }
    for o in 0..co {
        for i in 0..ci {
            let wk = w[o * ci + i];
            let s = x.shape.spatial();
            let xb = i * s;
            let ob = o * s;
            let (xs, os) = (&x.data[xb..xb + s], &mut out.data[ob..ob + s]);
            axpy(wk, xs, os);
        }
    }
    out
}

pub fn conv1_bwd<T: Real>(
    x: &Tensor<T>,
    w: &[T],
    gout: &Tensor<T>,
    gx: &mut Tensor<T>,
    gw: &mut [T],
    gb: &mut [T],
) {
    let ci = x.shape.c;
    let co = gout.shape.c;
    for o in 0..co {
        gb[o] = gb[o] + gout.channel(o).iter().copied().sum();
        for i in 0..ci {
            gw[o * ci + i] = gw[o * ci + i] + dot(x.channel(i), gout.channel(o));
            axpy(w[o * ci + i], gout.channel(o), gx.channel_mut(i));
        }
    }
}

// ---------------------------------------------------------------------------
// Per-channel batch normalization (single-volume statistics)
// ---------------------------------------------------------------------------

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch statistics cached for the train-mode backward pass.
#[derive(Debug, Clone)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub invstd: Vec<T>,
}

/// Train mode: normalize by this volume's own per-channel statistics and
/// fold them into the running estimates (`momentum` fraction of the new
/// value; running variance uses the unbiased estimate).
pub fn bn_fwd_train<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
) -> (Tensor<T>, BnStats<T>) {
    let c = x.shape.c;
    let n = x.shape.spatial();
    let nf = T::from_f64(n as f64);
    let eps = T::from_f64(BN_EPS);
    let mom = T::from_f64(BN_MOMENTUM);
    let one = T::one();
    let mut out = Tensor::zeros(x.shape);
    let mut stats = BnStats {
        mean: vec![T::zero(); c],
        invstd: vec![T::zero(); c],
    };
    for ch in 0..c {
        let xs = x.channel(ch);
        let mean = xs.iter().copied().sum::<T>() / nf;
        let mut var = T::zero();
        for &v in xs {
            let dv = v - mean;
            var = var + dv * dv;
        }
        var = var / nf;
        let invstd = one / (var + eps).sqrt();
        let g = gamma[ch];
        let b = beta[ch];
        for (o, &v) in out.channel_mut(ch).iter_mut().zip(xs) {
            *o = g * (v - mean) * invstd + b;
        }
        let unbiased = if n > 1 {
            var * nf / T::from_f64((n - 1) as f64)
        } else {
            var
        };
        running_mean[ch] = (one - mom) * running_mean[ch] + mom * mean;
        running_var[ch] = (one - mom) * running_var[ch] + mom * unbiased;
        stats.mean[ch] = mean;
        stats.invstd[ch] = invstd;
    }
    (out, stats)
}

/// Eval / frozen mode: normalize by the running statistics (a per-channel
/// affine map).
pub fn bn_fwd_eval<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
) -> Tensor<T> {
    let eps = T::from_f64(BN_EPS);
    let mut out = Tensor::zeros(x.shape);
    for ch in 0..x.shape.c {
        let invstd = T::one() / (running_var[ch] + eps).sqrt();
        let scale = gamma[ch] * invstd;
        let shift = beta[ch] - running_mean[ch] * scale;
        for (o, &v) in out.channel_mut(ch).iter_mut().zip(x.channel(ch)) {
            *o = scale * v + shift;
        }
    }
    out
}

/// Backward through train-mode normalization (batch statistics are functions
/// of the input).
pub fn bn_bwd_train<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    stats: &BnStats<T>,
    gout: &Tensor<T>,
    gx: &mut Tensor<T>,
    ggamma: &mut [T],
    gbeta: &mut [T],
) {
    let n = x.shape.spatial();
    let nf = T::from_f64(n as f64);
    for ch in 0..x.shape.c {
        let xs = x.channel(ch);
        let gs = gout.channel(ch);
        let mean = stats.mean[ch];
        let invstd = stats.invstd[ch];
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for (&g, &v) in gs.iter().zip(xs) {
            sum_g = sum_g + g;
            sum_gx = sum_gx + g * (v - mean) * invstd;
        }
        ggamma[ch] = ggamma[ch] + sum_gx;
        gbeta[ch] = gbeta[ch] + sum_g;
        let k = gamma[ch] * invstd / nf;
        for ((o, &g), &v) in gx.channel_mut(ch).iter_mut().zip(gs).zip(xs) {
            let xhat = (v - mean) * invstd;
            *o = *o + k * (nf * g - sum_g - xhat * sum_gx);
        }
    }
}

/// Backward through eval-mode normalization (running stats are constants).
pub fn bn_bwd_eval<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    running_mean: &[T],
    running_var: &[T],
    gout: &Tensor<T>,
    gx: &mut Tensor<T>,
    ggamma: &mut [T],
    gbeta: &mut [T],
) {
    let eps = T::from_f64(BN_EPS);
    for ch in 0..x.shape.c {
        let invstd = T::one() / (running_var[ch] + eps).sqrt();
        let mean = running_mean[ch];
        let scale = gamma[ch] * invstd;
        let gs = gout.channel(ch);
        let xs = x.channel(ch);
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for (&g, &v) in gs.iter().zip(xs) {
            sum_g = sum_g + g;
            sum_gx = sum_gx + g * (v - mean) * invstd;
        }
        ggamma[ch] = ggamma[ch] + sum_gx;
        gbeta[ch] = gbeta[ch] + sum_g;
        for (o, &g) in gx.channel_mut(ch).iter_mut().zip(gs) {
            *o = *o + scale * g;
        }
    }
}

// ---------------------------------------------------------------------------
// Pointwise and reduction ops
// ---------------------------------------------------------------------------

pub fn relu_fwd<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(x.shape);
    for (o, &v) in out.data.iter_mut().zip(&x.data) {
        *o = if v > T::zero() { v } else { T::zero() };
    }
    out
}

/// `gx += gout · [x > 0]`.
pub fn relu_bwd<T: Real>(x: &Tensor<T>, gout: &Tensor<T>, gx: &mut Tensor<T>) {
    for ((o, &g), &v) in gx.data.iter_mut().zip(&gout.data).zip(&x.data) {
        if v > T::zero() {
            *o = *o + g;
        }
    }
}

pub fn relu_vec_fwd<T: Real>(x: &[T]) -> Vec<T> {
    x.iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect()
}

pub fn relu_vec_bwd<T: Real>(x: &[T], gout: &[T], gx: &mut [T]) {
    for ((o, &g), &v) in gx.iter_mut().zip(gout).zip(x) {
        if v > T::zero() {
            *o = *o + g;
        }
    }
}

/// Inverted dropout: kept units scaled by `1/(1-p)` so eval needs no scaling.
pub fn dropout_fwd<T: Real>(x: &Tensor<T>, p: f64, rng: &mut ChaCha8Rng) -> (Tensor<T>, Vec<bool>) {
    assert!((0.0..1.0).contains(&p), "dropout p must be in [0,1)");
    let scale = T::from_f64(1.0 / (1.0 - p));
    let mut out = Tensor::zeros(x.shape);
    let mut mask = vec![false; x.data.len()];
    for ((o, m), &v) in out.data.iter_mut().zip(mask.iter_mut()).zip(&x.data) {
        if rng.gen::<f64>() >= p {
            *m = true;
            *o = v * scale;
        }
    }
    (out, mask)
}

pub fn dropout_bwd<T: Real>(mask: &[bool], p: f64, gout: &Tensor<T>, gx: &mut Tensor<T>) {
    let scale = T::from_f64(1.0 / (1.0 - p));
    for ((o, &m), &g) in gx.data.iter_mut().zip(mask).zip(&gout.data) {
        if m {
            *o = *o + g * scale;
        }
    }
}

/// Global average pool: per-channel spatial mean.
pub fn gap_fwd<T: Real>(x: &Tensor<T>) -> Vec<T> {
    let nf = T::from_f64(x.shape.spatial() as f64);
    (0..x.shape.c)
        .map(|c| x.channel(c).iter().copied().sum::<T>() / nf)
        .collect()
}

pub fn gap_bwd<T: Real>(gvec: &[T], gx: &mut Tensor<T>) {
    let nf = T::from_f64(gx.shape.spatial() as f64);
    for (c, &g) in gvec.iter().enumerate() {
        let gn = g / nf;
        for o in gx.channel_mut(c) {
            *o = *o + gn;
        }
    }
}

/// Broadcast a per-channel vector over space: `out[c,·] = x[c,·] + v[c]`.
pub fn add_channel_fwd<T: Real>(x: &Tensor<T>, v: &[T]) -> Tensor<T> {
    let mut out = x.clone();
    for (c, &a) in v.iter().enumerate() {
        for o in out.channel_mut(c) {
            *o = *o + a;
        }
    }
    out
}

/// Gradient w.r.t. the broadcast vector; the input gradient is `gout` itself.
pub fn add_channel_bwd<T: Real>(gout: &Tensor<T>, gv: &mut [T]) {
    for (c, gv) in gv.iter_mut().enumerate() {
        *gv = *gv + gout.channel(c).iter().copied().sum();
    }
}

/// Fully connected layer on flat vectors; `w` layout `[nout][nin]`.
pub fn linear_fwd<T: Real>(x: &[T], w: &[T], b: &[T], nout: usize) -> Vec<T> {
    let nin = x.len();
    debug_assert_eq!(w.len(), nout * nin);
    (0..nout)
        .map(|o| b[o] + dot(&w[o * nin..(o + 1) * nin], x))
        .collect()
}

pub fn linear_bwd<T: Real>(
    x: &[T],
    w: &[T],
    gout: &[T],
    gx: &mut [T],
    gw: &mut [T],
    gb: &mut [T],
) {
    let nin = x.len();
    for (o, &g) in gout.iter().enumerate() {
        gb[o] = gb[o] + g;
        let row = &w[o * nin..(o + 1) * nin];
        axpy(g, row, gx);
        for (k, &xv) in x.iter().enumerate() {
            gw[o * nin + k] = gw[o * nin + k] + g * xv;
        }
    }
}

/// Concatenate along the channel axis.
pub fn concat_fwd<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(
        (a.shape.h, a.shape.w, a.shape.d),
        (b.shape.h, b.shape.w, b.shape.d),
        "concat spatial dims differ"
    );
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::from_vec(a.shape.with_channels(a.shape.c + b.shape.c), data)
}

/// Split a concat gradient back into the two channel blocks (accumulating).
pub fn concat_bwd<T: Real>(gout: &Tensor<T>, ga: &mut Tensor<T>, gb: &mut Tensor<T>) {
    let na = ga.data.len();
    for (o, &g) in ga.data.iter_mut().zip(&gout.data[..na]) {
        *o = *o + g;
    }
    for (o, &g) in gb.data.iter_mut().zip(&gout.data[na..]) {
        *o = *o + g;
    }
}

/// Per-voxel softmax over the channel axis (numerically stable).
pub fn softmax_fwd<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let Shape4 { c, .. } = logits.shape;
    let n = logits.shape.spatial();
    let mut out = Tensor::zeros(logits.shape);
    for v in 0..n {
        let mut maxv = logits.data[v];
        for ch in 1..c {
            maxv = maxv.max(logits.data[ch * n + v]);
        }
        let mut sum = T::zero();
        for ch in 0..c {
            let e = (logits.data[ch * n + v] - maxv).exp();
            out.data[ch * n + v] = e;
            sum = sum + e;
        }
        for ch in 0..c {
            out.data[ch * n + v] = out.data[ch * n + v] / sum;
        }
    }
    out
}

/// `glogits += J_softmaxᵀ · gprobs` per voxel.
pub fn softmax_bwd<T: Real>(probs: &Tensor<T>, gprobs: &Tensor<T>, glogits: &mut Tensor<T>) {
    let c = probs.shape.c;
    let n = probs.shape.spatial();
    for v in 0..n {
        let mut inner = T::zero();
        for ch in 0..c {
            inner = inner + gprobs.data[ch * n + v] * probs.data[ch * n + v];
        }
        for ch in 0..c {
            let p = probs.data[ch * n + v];
            glogits.data[ch * n + v] =
                glogits.data[ch * n + v] + p * (gprobs.data[ch * n + v] - inner);
        }
    }
}

// ---------------------------------------------------------------------------
// Parameter arena
// ---------------------------------------------------------------------------

/// A contiguous run of parameters inside an [`Arena`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub off: usize,
    pub len: usize,
}

impl Slot {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.off..self.off + self.len
    }
}

/// Flat parameter storage with a parallel gradient buffer. Layers hold
/// [`Slot`]s; `data` and `grad` are separate fields so a layer can read its
/// weights while accumulating gradients.
#[derive(Debug, Clone)]
pub struct Arena<T> {
    pub data: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Arena<T> {
    pub fn new() -> Arena<T> {
        Arena {
            data: Vec::new(),
            grad: Vec::new(),
        }
    }

    pub fn alloc(&mut self, len: usize) -> Slot {
        let off = self.data.len();
        self.data.resize(off + len, T::zero());
        self.grad.resize(off + len, T::zero());
        Slot { off, len }
    }

    pub fn alloc_filled(&mut self, len: usize, value: T) -> Slot {
        let slot = self.alloc(len);
        self.data[slot.range()].fill(value);
        slot
    }

    /// He-normal init: N(0, 2/fan_in).
    pub fn alloc_he(&mut self, len: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Slot {
        let slot = self.alloc(len);
        let std = (2.0 / fan_in as f64).sqrt();
        for v in &mut self.data[slot.range()] {
            *v = T::from_f64(sample_standard_normal(rng) * std);
        }
        slot
    }

    pub fn p(&self, s: Slot) -> &[T] {
        &self.data[s.range()]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    /// SGD with classical momentum: `v ← μv + g; p ← p − lr·v`.
    pub fn sgd_step(&mut self, velocity: &mut [T], lr: f64, momentum: f64) {
        debug_assert_eq!(velocity.len(), self.data.len());
        let lr = T::from_f64(lr);
        let mu = T::from_f64(momentum);
        for ((p, v), &g) in self.data.iter_mut().zip(velocity.iter_mut()).zip(&self.grad) {
            *v = mu * *v + g;
            *p = *p - lr * *v;
        }
    }
}

impl<T: Real> Default for Arena<T> {
    fn default() -> Self {
        Arena::new()
    }
}

/// Standard normal via Box-Muller on the raw RNG; avoids depending on the
/// distribution crate's internals for cross-version stability.
pub fn sample_standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        if u1 > 1e-300 {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// SplitMix64 step, used to derive per-purpose RNG seeds functionally.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic RNG for (seed, stream, step) with no carried state.
pub fn derive_rng(seed: u64, stream: u64, step: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let s = splitmix64(splitmix64(seed ^ stream.wrapping_mul(0xa076_1d64_78bd_642f)) ^ step);
    ChaCha8Rng::seed_from_u64(s)
}
