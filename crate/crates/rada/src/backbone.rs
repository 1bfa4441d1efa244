//! The per-view segmentation network: a 3D V-Net-style encoder/decoder with
//! a cross-modal guidance head.
//!
//! Encoder: five stages of 3³ conv→norm→ReLU blocks (depths 1,2,3,3,3) at
//! channel widths B·2ˢ, joined by 2³ stride-2 convs, so a divisible-by-16
//! input reaches a 16B-channel bottleneck at 1/16 resolution. Decoder: four
//! 2³ transposed-conv upsampling stages with encoder skip concatenation
//! (conv depths 3,3,2,1) back to a B-channel feature map `Z` at full
//! resolution.
//!
//! Guidance: `γ = MLP(E_ra © GAP(bottleneck))`, a per-channel vector of
//! length B produced by four 1×1×1 convolutions (32B→16B→8B→4B→B), added to
//! `Z` before the 1³ output head (`P = Conv(Z ⊕ γ)`). Dropout (p = 0.5) sits
//! between `Z` and the head during training.

use rand_chacha::ChaCha8Rng;

use crate::error::{RadaError, Result};
use crate::nn::*;

/// Architecture hyperparameters for one sub-network.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NetConfig {
    /// Width multiplier B; channels run B..16B.
    pub base_channels: usize,
    pub num_classes: usize,
    /// Nominal input dims; every axis must be a positive multiple of 16.
    pub input_dims: [usize; 3],
    pub dropout_p: f64,
    pub guidance_enabled: bool,
    /// Encoder-to-decoder skip concatenation (ablation switch).
    pub skip_enabled: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            base_channels: 4,
            num_classes: 2,
            input_dims: [32, 32, 32],
            dropout_p: 0.5,
            guidance_enabled: true,
            skip_enabled: true,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 1 {
            return Err(RadaError::Config("base_channels must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(RadaError::Config("num_classes must be >= 2".into()));
        }
        if self
            .input_dims
            .iter()
            .any(|&d| d == 0 || d % 16 != 0)
        {
            return Err(RadaError::Config(format!(
                "input dims must be positive multiples of 16, got {:?}",
                self.input_dims
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(RadaError::Config(format!(
                "dropout_p must be in [0,1), got {}",
                self.dropout_p
            )));
        }
        Ok(())
    }

    /// Region-embedding length consumed by the guidance head.
    pub fn d_ra(&self) -> usize {
        16 * self.base_channels
    }
}

/// Per-stage (channels, dims) plan of the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageInfo {
    pub channels: usize,
    pub dims: [usize; 3],
}

/// Stage plan from the config: channels B·2ˢ, dims input/2ˢ, s = 0..4.
pub fn stage_plan(cfg: &NetConfig) -> Vec<StageInfo> {
    (0..5)
        .map(|s| StageInfo {
            channels: cfg.base_channels << s,
            dims: cfg.input_dims.map(|d| d >> s),
        })
        .collect()
}

const ENC_DEPTHS: [usize; 5] = [1, 2, 3, 3, 3];
const DEC_DEPTHS: [usize; 4] = [3, 3, 2, 1];

/// Forward behavior switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, dropout active, running stats updated.
    Train,
    /// Running statistics, no dropout; gradients still well-defined
    /// (used for inference and for finite-difference verification).
    Frozen,
}

// A conv/down/up unit always carries its normalization parameters.
#[derive(Debug, Clone, Copy)]
struct NormConv {
    w: Slot,
    b: Slot,
    gamma: Slot,
    beta: Slot,
    /// Offsets into the running-stats buffer (not trained).
    rm: Slot,
    rv: Slot,
    ci: usize,
    co: usize,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: Slot,
    b: Slot,
    nin: usize,
    nout: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ConvKind {
    Same3,
    Down2,
    Up2,
}

/// One view's network: parameters in a flat arena, running stats alongside.
#[derive(Debug, Clone)]
pub struct Vnet<T> {
    pub cfg: NetConfig,
    pub arena: Arena<T>,
    /// Running normalization statistics, indexed by the units' rm/rv slots.
    pub stats: Vec<T>,
    enc: Vec<Vec<NormConv>>,
    downs: Vec<NormConv>,
    ups: Vec<NormConv>,
    dec: Vec<Vec<NormConv>>,
    head: Dense,
    guidance: [Dense; 4],
}

impl<T: Real> Vnet<T> {
    pub fn new(cfg: NetConfig, rng: &mut ChaCha8Rng) -> Result<Vnet<T>> {
        cfg.validate()?;
        let b = cfg.base_channels;
        let mut arena = Arena::new();
        let mut stats = Vec::new();
        let mut stat_slot = |n: usize, init: f64, stats: &mut Vec<T>| {
            let off = stats.len();
            stats.resize(off + n, T::from_f64(init));
            Slot { off, len: n }
        };
        let mut norm_conv = |ci: usize,
                             co: usize,
                             taps: usize,
                             arena: &mut Arena<T>,
                             stats: &mut Vec<T>,
                             rng: &mut ChaCha8Rng| NormConv {
            w: arena.alloc_he(co * ci * taps, ci * taps, rng),
            b: arena.alloc(co),
            gamma: arena.alloc_filled(co, T::one()),
            beta: arena.alloc(co),
            rm: stat_slot(co, 0.0, stats),
            rv: stat_slot(co, 1.0, stats),
            ci,
            co,
        };

        let ch = |s: usize| b << s;
        let mut enc = Vec::new();
        let mut downs = Vec::new();
        for s in 0..5 {
            let mut blocks = Vec::new();
            for k in 0..ENC_DEPTHS[s] {
                let ci = if k == 0 {
                    if s == 0 {
                        1
                    } else {
                        ch(s)
                    }
                } else {
                    ch(s)
                };
                blocks.push(norm_conv(ci, ch(s), 27, &mut arena, &mut stats, rng));
            }
            enc.push(blocks);
            if s < 4 {
                downs.push(norm_conv(ch(s), ch(s + 1), 8, &mut arena, &mut stats, rng));
            }
        }

        let mut ups = Vec::new();
        let mut dec = Vec::new();
        for t in 0..4 {
            let cin = if t == 0 { ch(4) } else { ch(4 - t) };
            let cout = ch(3 - t);
            ups.push(norm_conv(cin, cout, 8, &mut arena, &mut stats, rng));
            let mut blocks = Vec::new();
            for k in 0..DEC_DEPTHS[t] {
                let ci = if k == 0 {
                    if cfg.skip_enabled {
                        2 * cout
                    } else {
                        cout
                    }
                } else {
                    cout
                };
                blocks.push(norm_conv(ci, cout, 27, &mut arena, &mut stats, rng));
            }
            dec.push(blocks);
        }

        let mut dense = |nin: usize, nout: usize, arena: &mut Arena<T>, rng: &mut ChaCha8Rng| {
            Dense {
                w: arena.alloc_he(nout * nin, nin, rng),
                b: arena.alloc(nout),
                nin,
                nout,
            }
        };
        let head = dense(b, cfg.num_classes, &mut arena, rng);
        let guidance = [
            dense(32 * b, 16 * b, &mut arena, rng),
            dense(16 * b, 8 * b, &mut arena, rng),
            dense(8 * b, 4 * b, &mut arena, rng),
            dense(4 * b, b, &mut arena, rng),
        ];

        let net = Vnet {
            cfg,
            arena,
            stats,
            enc,
            downs,
            ups,
            dec,
            head,
            guidance,
        };
        net.assert_shape_law();
        Ok(net)
    }

    /// Channel/spatial plan sanity: B·2ˢ widths down to a /16 bottleneck,
    /// a B-channel Z and a num_classes head.
    fn assert_shape_law(&self) {
        let plan = stage_plan(&self.cfg);
        for (s, info) in plan.iter().enumerate() {
            assert_eq!(
                self.enc[s].last().unwrap().co,
                info.channels,
                "encoder stage {s} width"
            );
            assert!(info.dims.iter().all(|&d| d >= 1), "stage {s} dims collapse");
        }
        assert_eq!(plan[4].channels, 16 * self.cfg.base_channels);
        assert_eq!(
            plan[4].dims,
            self.cfg.input_dims.map(|d| d / 16),
            "bottleneck resolution"
        );
        assert_eq!(
            self.dec[3].last().unwrap().co,
            self.cfg.base_channels,
            "Z width"
        );
        assert_eq!(self.head.nout, self.cfg.num_classes);
        assert_eq!(self.guidance[0].nin, 2 * self.cfg.d_ra());
        assert_eq!(self.guidance[3].nout, self.cfg.base_channels);
    }

    pub fn num_params(&self) -> usize {
        self.arena.len()
    }
}

// ---------------------------------------------------------------------------
// Forward/backward plumbing
// ---------------------------------------------------------------------------

struct BlockCache<T> {
    x: Tensor<T>,
    conv_out: Tensor<T>,
    bn_out: Tensor<T>,
    stats: Option<BnStats<T>>,
}

struct GuidanceCache<T> {
    layer_in: [Vec<T>; 4],
}

/// Everything the backward pass needs, plus the outputs.
pub struct Forward<T> {
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
    pub gamma: Option<Vec<T>>,
    enc: Vec<BlockCache<T>>,
    downs: Vec<BlockCache<T>>,
    skips: Vec<Tensor<T>>,
    ups: Vec<BlockCache<T>>,
    dec: Vec<BlockCache<T>>,
    bottleneck: Tensor<T>,
    dropout_mask: Option<Vec<bool>>,
    head_in: Tensor<T>,
    guidance: Option<GuidanceCache<T>>,
}

impl<T: Real> Vnet<T> {
    fn run_unit(
        &mut self,
        unit: NormConv,
        kind: ConvKind,
        x: Tensor<T>,
        mode: Mode,
    ) -> (Tensor<T>, BlockCache<T>) {
        let w = &self.arena.data[unit.w.range()];
        let b = &self.arena.data[unit.b.range()];
        let conv_out = match kind {
            ConvKind::Same3 => conv3_fwd(&x, w, b, unit.co),
            ConvKind::Down2 => down_fwd(&x, w, b, unit.co),
            ConvKind::Up2 => up_fwd(&x, w, b, unit.co),
        };
        let gamma = &self.arena.data[unit.gamma.range()];
        let beta = &self.arena.data[unit.beta.range()];
        let (bn_out, stats) = match mode {
            Mode::Train => {
                let (rm_range, rv_range) = (unit.rm.range(), unit.rv.range());
                // Split the stats buffer to borrow mean and var mutably.
                let (head_, tail) = self.stats.split_at_mut(rv_range.start);
                let rm = &mut head_[rm_range];
                let rv = &mut tail[..unit.rv.len];
                let (o, s) = bn_fwd_train(&conv_out, gamma, beta, rm, rv);
                (o, Some(s))
            }
            Mode::Frozen => (
                bn_fwd_eval(
                    &conv_out,
                    gamma,
                    beta,
                    &self.stats[unit.rm.range()],
                    &self.stats[unit.rv.range()],
                ),
                None,
            ),
        };
        let out = relu_fwd(&bn_out);
        (
            out,
            BlockCache {
                x,
                conv_out,
                bn_out,
                stats,
            },
        )
    }

    fn unit_bwd(&mut self, unit: NormConv, kind: ConvKind, cache: &BlockCache<T>, gout: &Tensor<T>) -> Tensor<T> {
        // ReLU
        let mut g_bn = Tensor::zeros(cache.bn_out.shape);
        relu_bwd(&cache.bn_out, gout, &mut g_bn);
        // Norm
        let mut g_conv = Tensor::zeros(cache.conv_out.shape);
        {
            let data = &self.arena.data;
            let grad = &mut self.arena.grad;
            let (gg, gb) = disjoint_mut(grad, unit.gamma, unit.beta);
            match &cache.stats {
                Some(stats) => bn_bwd_train(
                    &cache.conv_out,
                    &data[unit.gamma.range()],
                    stats,
                    &g_bn,
                    &mut g_conv,
                    gg,
                    gb,
                ),
                None => bn_bwd_eval(
                    &cache.conv_out,
                    &data[unit.gamma.range()],
                    &self.stats[unit.rm.range()],
                    &self.stats[unit.rv.range()],
                    &g_bn,
                    &mut g_conv,
                    gg,
                    gb,
                ),
            }
        }
        // Conv
        let mut gx = Tensor::zeros(cache.x.shape);
        {
            let data = &self.arena.data;
            let grad = &mut self.arena.grad;
            let (gw, gb) = disjoint_mut(grad, unit.w, unit.b);
            let w = &data[unit.w.range()];
            match kind {
                ConvKind::Same3 => conv3_bwd(&cache.x, w, &g_conv, &mut gx, gw, gb),
                ConvKind::Down2 => down_bwd(&cache.x, w, &g_conv, &mut gx, gw, gb),
                ConvKind::Up2 => up_bwd(&cache.x, w, &g_conv, &mut gx, gw, gb),
            }
        }
        gx
    }

    /// Run the network on a 1-channel input. `e_ra` feeds the guidance head
    /// (ignored when guidance is disabled); `rng` drives dropout in train
    /// mode. Running stats update only in train mode.
    pub fn forward(
        &mut self,
        x: Tensor<T>,
        e_ra: Option<&[T]>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Forward<T>> {
        let Shape4 { c, h, w, d } = x.shape;
        if c != 1 {
            return Err(RadaError::Validation(format!(
                "network input must have 1 channel, got {c}"
            )));
        }
        if [h, w, d].iter().any(|&n| n == 0 || n % 16 != 0) {
            return Err(RadaError::Validation(format!(
                "input dims must be positive multiples of 16, got {h}x{w}x{d}"
            )));
        }
        if self.cfg.guidance_enabled {
            let need = self.cfg.d_ra();
            let got = e_ra.map(|v| v.len()).unwrap_or(0);
            if got != need {
                return Err(RadaError::Validation(format!(
                    "guidance embedding length {got}, expected {need}"
                )));
            }
        }

        let mut enc_caches = Vec::new();
        let mut down_caches = Vec::new();
        let mut skips = Vec::new();
        let mut cur = x;
        for s in 0..5 {
            for k in 0..self.enc[s].len() {
                let unit = self.enc[s][k];
                let (out, cache) = self.run_unit(unit, ConvKind::Same3, cur, mode);
                enc_caches.push(cache);
                cur = out;
            }
            if s < 4 {
                skips.push(cur.clone());
                let unit = self.downs[s];
                let (out, cache) = self.run_unit(unit, ConvKind::Down2, cur, mode);
                down_caches.push(cache);
                cur = out;
            }
        }
        let bottleneck = cur.clone();

        // Guidance vector from pooled bottleneck features + region embedding.
        let (gamma_vec, guidance_cache) = if self.cfg.guidance_enabled {
            let f_img = gap_fwd(&bottleneck);
            let e = e_ra.expect("checked above");
            let mut v: Vec<T> = Vec::with_capacity(e.len() + f_img.len());
            v.extend_from_slice(e);
            v.extend_from_slice(&f_img);
            let mut layer_in: [Vec<T>; 4] = Default::default();
            for (i, dense) in self.guidance.iter().enumerate() {
                layer_in[i] = v.clone();
                v = linear_fwd(
                    &v,
                    &self.arena.data[dense.w.range()],
                    &self.arena.data[dense.b.range()],
                    dense.nout,
                );
            }
            (Some(v), Some(GuidanceCache { layer_in }))
        } else {
            (None, None)
        };

        let mut up_caches = Vec::new();
        let mut dec_caches = Vec::new();
        for t in 0..4 {
            let unit = self.ups[t];
            let (up_out, cache) = self.run_unit(unit, ConvKind::Up2, cur, mode);
            up_caches.push(cache);
            cur = if self.cfg.skip_enabled {
                concat_fwd(&up_out, &skips[3 - t])
            } else {
                up_out
            };
            for k in 0..self.dec[t].len() {
                let unit = self.dec[t][k];
                let (out, cache) = self.run_unit(unit, ConvKind::Same3, cur, mode);
                dec_caches.push(cache);
                cur = out;
            }
        }

        // Z -> dropout -> (+ gamma) -> 1x1x1 head.
        let (dropped, mask) = match mode {
            Mode::Train if self.cfg.dropout_p > 0.0 => {
                let (o, m) = dropout_fwd(&cur, self.cfg.dropout_p, rng);
                (o, Some(m))
            }
            _ => (cur.clone(), None),
        };
        let head_in = match &gamma_vec {
            Some(g) => add_channel_fwd(&dropped, g),
            None => dropped,
        };
        let logits = conv1_fwd(
            &head_in,
            &self.arena.data[self.head.w.range()],
            &self.arena.data[self.head.b.range()],
            self.head.nout,
        );
        let probs = softmax_fwd(&logits);

        Ok(Forward {
            logits,
            probs,
            gamma: gamma_vec,
            enc: enc_caches,
            downs: down_caches,
            skips,
            ups: up_caches,
            dec: dec_caches,
            bottleneck,
            dropout_mask: mask,
            head_in,
            guidance: guidance_cache,
        })
    }

    /// Backpropagate from a gradient w.r.t. the softmax probabilities.
    /// Accumulates parameter gradients in the arena; returns the gradient
    /// w.r.t. the region embedding when guidance is on.
    pub fn backward(&mut self, fwd: &Forward<T>, gprobs: &Tensor<T>) -> Option<Vec<T>> {
        let mut glogits = Tensor::zeros(fwd.logits.shape);
        softmax_bwd(&fwd.probs, gprobs, &mut glogits);
        self.backward_from_logits(fwd, &glogits)
    }

    /// Backpropagate from a gradient w.r.t. the logits.
    pub fn backward_from_logits(&mut self, fwd: &Forward<T>, glogits: &Tensor<T>) -> Option<Vec<T>> {
        // Head conv.
        let mut g_head_in = Tensor::zeros(fwd.head_in.shape);
        {
            let data = &self.arena.data;
            let grad = &mut self.arena.grad;
            let (gw, gb) = disjoint_mut(grad, self.head.w, self.head.b);
            conv1_bwd(
                &fwd.head_in,
                &data[self.head.w.range()],
                glogits,
                &mut g_head_in,
                gw,
                gb,
            );
        }

        // Gamma add: channel sums feed the guidance MLP; the spatial grad
        // continues to Z.
        let mut g_era: Option<Vec<T>> = None;
        let mut g_bottleneck_extra: Option<Tensor<T>> = None;
        if let (Some(cache), true) = (&fwd.guidance, self.cfg.guidance_enabled) {
            let b = self.cfg.base_channels;
            let mut gv = vec![T::zero(); b];
            add_channel_bwd(&g_head_in, &mut gv);
            let mut g = gv;
            for i in (0..4).rev() {
                let dense = self.guidance[i];
                let mut gx = vec![T::zero(); dense.nin];
                {
                    let data = &self.arena.data;
                    let grad = &mut self.arena.grad;
                    let (gw, gb) = disjoint_mut(grad, dense.w, dense.b);
                    linear_bwd(&cache.layer_in[i], &data[dense.w.range()], &g, &mut gx, gw, gb);
                }
                g = gx;
            }
            let d_ra = self.cfg.d_ra();
            let (ge, gf) = g.split_at(d_ra);
            g_era = Some(ge.to_vec());
            let mut gb_t = Tensor::zeros(fwd.bottleneck.shape);
            gap_bwd(gf, &mut gb_t);
            g_bottleneck_extra = Some(gb_t);
        }

        // Dropout between Z and the head.
        let mut g_z = g_head_in;
        if let Some(mask) = &fwd.dropout_mask {
            let src = g_z;
            let mut gd = Tensor::zeros(src.shape);
            dropout_bwd(mask, self.cfg.dropout_p, &src, &mut gd);
            g_z = gd;
        }

        // Decoder, in reverse.
        let mut skip_grads: Vec<Option<Tensor<T>>> = (0..4).map(|_| None).collect();
        let mut g_cur = g_z;
        let mut dec_idx = fwd.dec.len();
        for t in (0..4).rev() {
            for k in (0..self.dec[t].len()).rev() {
                dec_idx -= 1;
                let unit = self.dec[t][k];
                g_cur = self.unit_bwd(unit, ConvKind::Same3, &fwd.dec[dec_idx], &g_cur);
            }
            let g_up_out = if self.cfg.skip_enabled {
                let skip = &fwd.skips[3 - t];
                let up_c = g_cur.shape.c - skip.shape.c;
                let mut ga = Tensor::zeros(g_cur.shape.with_channels(up_c));
                let mut gs = Tensor::zeros(skip.shape);
                concat_bwd(&g_cur, &mut ga, &mut gs);
                skip_grads[3 - t] = Some(gs);
                ga
            } else {
                g_cur
            };
            g_cur = self.unit_bwd(self.ups[t], ConvKind::Up2, &fwd.ups[t], &g_up_out);
        }

        // The bottleneck gradient also collects the pooled guidance path.
        if let Some(extra) = g_bottleneck_extra {
            for (a, &b) in g_cur.data.iter_mut().zip(&extra.data) {
                *a = *a + b;
            }
        }

        // Encoder, in reverse. Caches were pushed stage by stage, so the
        // cache for stage s, block k sits at (depths of stages < s) + k.
        let mut enc_idx = fwd.enc.len();
        for s in (0..5).rev() {
            if s < 4 {
                let mut g_down = self.unit_bwd(self.downs[s], ConvKind::Down2, &fwd.downs[s], &g_cur);
                if let Some(gs) = &skip_grads[s] {
                    for (a, &b) in g_down.data.iter_mut().zip(&gs.data) {
                        *a = *a + b;
                    }
                }
                g_cur = g_down;
            }
            for k in (0..self.enc[s].len()).rev() {
                enc_idx -= 1;
                let unit = self.enc[s][k];
                g_cur = self.unit_bwd(unit, ConvKind::Same3, &fwd.enc[enc_idx], &g_cur);
            }
        }
        debug_assert_eq!(enc_idx, 0);
        g_era
    }
}

/// Two mutable slices at disjoint slots of one buffer (first must precede
/// the second).
fn disjoint_mut<T>(buf: &mut [T], a: Slot, b: Slot) -> (&mut [T], &mut [T]) {
    assert!(a.off + a.len <= b.off, "slots overlap or out of order");
    let (left, right) = buf.split_at_mut(b.off);
    (&mut left[a.range()], &mut right[..b.len])
}

/// Wrap a scalar grid as a 1-channel network input tensor.
pub fn volume_tensor<T: Real>(data: &ndarray::Array3<f64>) -> Tensor<T> {
    let (h, w, d) = data.dim();
    let std = data.as_standard_layout();
    Tensor::from_vec(
        Shape4::new(1, h, w, d),
        std.iter().map(|&v| T::from_f64(v)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{central_diff, rel_err};
    use rand::{Rng, SeedableRng};

    fn cfg(b: usize, dims: usize) -> NetConfig {
        NetConfig {
            base_channels: b,
            input_dims: [dims; 3],
            ..NetConfig::default()
        }
    }

    fn rand_input(rng: &mut ChaCha8Rng, dims: usize) -> Tensor<f64> {
        Tensor::from_vec(
            Shape4::new(1, dims, dims, dims),
            (0..dims * dims * dims).map(|_| rng.gen::<f64>()).collect(),
        )
    }

    fn rand_era(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen::<f64>() * 0.5).collect()
    }

    #[test]
    fn shape_law_holds_for_each_width() {
        for (b, dims) in [(2usize, 16usize), (4, 16), (16, 32)] {
            let mut rng = ChaCha8Rng::seed_from_u64(b as u64);
            let net: Vnet<f32> = Vnet::new(cfg(b, dims), &mut rng).unwrap();
            let plan = stage_plan(&net.cfg);
            for (s, info) in plan.iter().enumerate() {
                assert_eq!(info.channels, b << s);
                assert_eq!(info.dims, [dims >> s; 3]);
            }
            assert_eq!(plan[4].channels, 16 * b);
            assert_eq!(plan[4].dims, [dims / 16; 3]);
            assert!(net.num_params() > 0);
        }
    }

    #[test]
    fn bottleneck_dims_match_documented_examples() {
        // 16^3 input, B=4 -> 1x1x1x64; 32^3, B=16 -> 2x2x2x256.
        let p1 = stage_plan(&cfg(4, 16));
        assert_eq!((p1[4].channels, p1[4].dims), (64, [1, 1, 1]));
        let p2 = stage_plan(&cfg(16, 32));
        assert_eq!((p2[4].channels, p2[4].dims), (256, [2, 2, 2]));
    }

    #[test]
    fn config_rejects_bad_dims_and_dropout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for bad in [17usize, 24, 0] {
            let c = NetConfig {
                input_dims: [bad.max(16), bad.max(16), bad],
                ..NetConfig::default()
            };
            assert!(Vnet::<f32>::new(c, &mut rng).is_err(), "dims {bad}");
        }
        let c = NetConfig {
            dropout_p: 1.0,
            ..NetConfig::default()
        };
        assert!(Vnet::<f32>::new(c, &mut rng).is_err());
    }

    #[test]
    fn forward_rejects_undivisible_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net: Vnet<f64> = Vnet::new(cfg(2, 16), &mut rng).unwrap();
        let x = Tensor::zeros(Shape4::new(1, 24, 24, 24));
        let era = vec![0.0; net.cfg.d_ra()];
        let err = net
            .forward(x, Some(&era), Mode::Frozen, &mut rng)
            .unwrap_err();
        assert!(matches!(err, RadaError::Validation(_)), "{err}");
    }

    #[test]
    fn forward_shapes_and_probability_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net: Vnet<f64> = Vnet::new(cfg(2, 16), &mut rng).unwrap();
        let x = rand_input(&mut rng, 16);
        let era = rand_era(&mut rng, net.cfg.d_ra());
        let fwd = net.forward(x, Some(&era), Mode::Frozen, &mut rng).unwrap();
        assert_eq!(fwd.logits.shape, Shape4::new(2, 16, 16, 16));
        let n = fwd.probs.shape.spatial();
        for v in 0..n {
            let s = fwd.probs.data[v] + fwd.probs.data[n + v];
            assert!((s - 1.0).abs() < 1e-6, "prob sum {s}");
        }
        assert_eq!(fwd.gamma.as_ref().unwrap().len(), 2);
    }

    #[test]
    fn frozen_forward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net: Vnet<f32> = Vnet::new(cfg(2, 16), &mut rng).unwrap();
        let x = rand_input(&mut rng, 16);
        let xf: Tensor<f32> = Tensor::from_vec(x.shape, x.data.iter().map(|&v| v as f32).collect());
        let era: Vec<f32> = rand_era(&mut rng, net.cfg.d_ra())
            .into_iter()
            .map(|v| v as f32)
            .collect();
        let a = net
            .forward(xf.clone(), Some(&era), Mode::Frozen, &mut rng)
            .unwrap();
        let b = net.forward(xf, Some(&era), Mode::Frozen, &mut rng).unwrap();
        assert_eq!(a.logits.data, b.logits.data);
    }

    #[test]
    fn guidance_shift_is_independent_of_features() {
        // fuse(Z, gamma) - fuse(Z, 0) must be spatially constant per channel:
        // the head is linear, so a per-channel input shift becomes a
        // per-channel output shift.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net: Vnet<f64> = Vnet::new(cfg(2, 16), &mut rng).unwrap();
        let era_a = rand_era(&mut rng, net.cfg.d_ra());
        let era_0 = vec![0.0; net.cfg.d_ra()];
        let x = rand_input(&mut rng, 16);
        let fa = net
            .forward(x.clone(), Some(&era_a), Mode::Frozen, &mut rng)
            .unwrap();
        let f0 = net.forward(x, Some(&era_0), Mode::Frozen, &mut rng).unwrap();
        let n = fa.logits.shape.spatial();
        for c in 0..2 {
            let d0 = fa.logits.data[c * n] - f0.logits.data[c * n];
            for v in 0..n {
                let dv = fa.logits.data[c * n + v] - f0.logits.data[c * n + v];
                assert!((dv - d0).abs() < 1e-9, "channel {c} voxel {v}");
            }
        }
        // And the shift equals the head conv applied to the gamma difference.
        let ga = fa.gamma.unwrap();
        let g0 = f0.gamma.unwrap();
        let w = &net.arena.data[net.head.w.range()];
        for c in 0..2 {
            let want: f64 = (0..2).map(|i| w[c * 2 + i] * (ga[i] - g0[i])).sum();
            let got = fa.logits.data[c * n] - f0.logits.data[c * n];
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_gamma_matches_guidance_disabled_path() {
        let mut rng_a = ChaCha8Rng::seed_from_u64(5);
        let mut rng_b = ChaCha8Rng::seed_from_u64(5);
        let mut on: Vnet<f64> = Vnet::new(cfg(2, 16), &mut rng_a).unwrap();
        let mut off_cfg = cfg(2, 16);
        off_cfg.guidance_enabled = false;
        let mut off: Vnet<f64> = Vnet::new(off_cfg, &mut rng_b).unwrap();
        assert_eq!(on.arena.data, off.arena.data, "same seed, same params");
        // Force gamma = 0 by zeroing the last guidance layer.
        let last = on.guidance[3];
        on.arena.data[last.w.range()].fill(0.0);
        on.arena.data[last.b.range()].fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_input(&mut rng, 16);
        let era = rand_era(&mut rng, on.cfg.d_ra());
        let fa = on
            .forward(x.clone(), Some(&era), Mode::Frozen, &mut rng)
            .unwrap();
        let fb = off.forward(x, None, Mode::Frozen, &mut rng).unwrap();
        assert_eq!(fa.logits.data, fb.logits.data);
    }

    /// Projection-of-logits loss with gradients from the analytic backward,
    /// compared against central differences on selected coordinates.
    fn fd_net_check(mode: Mode, check_full: bool, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = cfg(2, 16);
        c.dropout_p = 0.0; // keep the map differentiable for FD
        let mut net: Vnet<f64> = Vnet::new(c, &mut rng).unwrap();
        let x = rand_input(&mut rng, 16);
        let era = rand_era(&mut rng, net.cfg.d_ra());
        let r: Vec<f64> = (0..2 * 16 * 16 * 16)
            .map(|_| rng.gen::<f64>() * 2.0 - 1.0)
            .collect();

        let params0 = net.arena.data.clone();
        let stats0 = net.stats.clone();
        let mut eval = |p: &[f64], net: &mut Vnet<f64>| -> f64 {
            net.arena.data.copy_from_slice(p);
            net.stats.copy_from_slice(&stats0); // undo running-stat drift
            let mut r_drop = ChaCha8Rng::seed_from_u64(99);
            let fwd = net
                .forward(x.clone(), Some(&era), mode, &mut r_drop)
                .unwrap();
            fwd.logits.data.iter().zip(&r).map(|(a, b)| a * b).sum()
        };

        net.arena.zero_grad();
        net.stats.copy_from_slice(&stats0);
        let mut r_drop = ChaCha8Rng::seed_from_u64(99);
        let fwd = net
            .forward(x.clone(), Some(&era), mode, &mut r_drop)
            .unwrap();
        let glogits = Tensor::from_vec(fwd.logits.shape, r.clone());
        let g_era = net.backward_from_logits(&fwd, &glogits).unwrap();
        let analytic = net.arena.grad.clone();

        // Representative parameter groups, all coordinates.
        let groups: Vec<(&str, Slot)> = vec![
            ("enc0 conv w", net.enc[0][0].w),
            ("enc0 bn gamma", net.enc[0][0].gamma),
            ("down0 w", net.downs[0].w),
            ("up0 w", net.ups[0].w),
            ("dec3 conv w", net.dec[3][0].w),
            ("head w", net.head.w),
            ("head b", net.head.b),
            ("guidance0 w", net.guidance[0].b),
            ("guidance3 w", net.guidance[3].w),
        ];
        let h = 1e-5;
        for (name, slot) in groups {
            let mut fa = Vec::new();
            let mut fn_ = Vec::new();
            let mut p = params0.clone();
            for i in slot.range() {
                let orig = p[i];
                p[i] = orig + h;
                let fp = eval(&p, &mut net);
                p[i] = orig - h;
                let fm = eval(&p, &mut net);
                p[i] = orig;
                fa.push(analytic[i]);
                fn_.push((fp - fm) / (2.0 * h));
            }
            let e = rel_err(&fa, &fn_);
            assert!(e < 1e-4, "{name}: rel err {e:.2e} ({mode:?})");
        }

        if check_full {
            // Random sample across the whole arena.
            let mut idxs: Vec<usize> = (0..60)
                .map(|_| rng.gen_range(0..params0.len()))
                .collect();
            idxs.sort_unstable();
            idxs.dedup();
            let mut fa = Vec::new();
            let mut fn_ = Vec::new();
            let mut p = params0.clone();
            for &i in &idxs {
                let orig = p[i];
                p[i] = orig + h;
                let fp = eval(&p, &mut net);
                p[i] = orig - h;
                let fm = eval(&p, &mut net);
                p[i] = orig;
                fa.push(analytic[i]);
                fn_.push((fp - fm) / (2.0 * h));
            }
            let e = rel_err(&fa, &fn_);
            assert!(e < 1e-3, "full net: rel err {e:.2e} ({mode:?})");
        }

        // Gradient w.r.t. the region embedding, against FD on the inputs.
        net.arena.data.copy_from_slice(&params0);
        let fd_era = central_diff(
            &mut |ed: &[f64]| {
                net.stats.copy_from_slice(&stats0);
                let mut r_drop = ChaCha8Rng::seed_from_u64(99);
                let fwd = net.forward(x.clone(), Some(ed), mode, &mut r_drop).unwrap();
                fwd.logits.data.iter().zip(&r).map(|(a, b)| a * b).sum()
            },
            &era,
            h,
        );
        let e = rel_err(&g_era, &fd_era);
        assert!(e < 1e-4, "region embedding grad: rel err {e:.2e}");
    }

    #[test]
    fn gradients_match_finite_differences_frozen_norm() {
        fd_net_check(Mode::Frozen, true, 7);
    }

    #[test]
    fn gradients_match_finite_differences_batch_norm() {
        fd_net_check(Mode::Train, true, 8);
    }

    #[test]
    fn volume_tensor_preserves_layout() {
        let a = ndarray::Array3::from_shape_fn((2, 3, 4), |(y, x, z)| (100 * y + 10 * x + z) as f64);
        let t: Tensor<f64> = volume_tensor(&a);
        assert_eq!(t.shape, Shape4::new(1, 2, 3, 4));
        assert_eq!(t.data[t.shape.idx(0, 1, 2, 3)], 123.0);
    }
}
