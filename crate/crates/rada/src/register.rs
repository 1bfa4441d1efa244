//! Slice registration and label propagation.
//!
//! From three annotated orthogonal slices, a dense pseudo-label per view is
//! grown by registering each slice to its neighbor (exhaustive integer
//! translation search, MSE objective, parabolic sub-pixel refinement,
//! optional small-angle rotation) and warping the annotation through the
//! composed transforms. Confidence decays with slice distance `d` from the
//! annotation as `α^d`, with `α` following a cosine rampdown from `α₀` to 0
//! in 1000-iteration windows.

use std::f64::consts::PI;

use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::error::{RadaError, Result};
use crate::volume::{
    extract_slice, insert_slice, permute_from_view, permute_to_view, AnnotationEntry, LabelVolume,
    Plane, SparseAnnotation, Volume,
};

/// Rigid 2D transform: rotate about the slice center, then translate.
/// A pure translation maps `warped(y, x) = moving(y - dy, x - dx)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform2D {
    pub dy: f64,
    pub dx: f64,
    /// Rotation in radians, counter-clockwise in (row, col) coordinates.
    pub rot: f64,
}

impl Transform2D {
    pub const IDENTITY: Transform2D = Transform2D {
        dy: 0.0,
        dx: 0.0,
        rot: 0.0,
    };

    pub fn new(dy: f64, dx: f64, rot: f64) -> Result<Transform2D> {
        if !(dy.is_finite() && dx.is_finite() && rot.is_finite()) || rot.abs() > PI {
            return Err(RadaError::Validation(format!(
                "bad transform (dy={dy}, dx={dx}, rot={rot})"
            )));
        }
        Ok(Transform2D { dy, dx, rot })
    }

    /// Apply `self` first, then `after`. Rotations add; the earlier
    /// translation is rotated into the later frame.
    pub fn then(self, after: Transform2D) -> Transform2D {
        let (s, c) = after.rot.sin_cos();
        Transform2D {
            dy: c * self.dy + s * self.dx + after.dy,
            dx: -s * self.dy + c * self.dx + after.dx,
            rot: wrap_angle(self.rot + after.rot),
        }
    }

    pub fn inverse(self) -> Transform2D {
        let (s, c) = (-self.rot).sin_cos();
        Transform2D {
            dy: -(c * self.dy + s * self.dx),
            dx: -(-s * self.dy + c * self.dx),
            rot: wrap_angle(-self.rot),
        }
    }
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a;
    while a > PI {
        a -= 2.0 * PI;
    }
    while a < -PI {
        a += 2.0 * PI;
    }
    a
}

/// Registration and propagation settings.
#[derive(Debug, Clone)]
pub struct RegisterOpts {
    /// Half-width of the exhaustive integer translation search, px.
    pub radius: usize,
    /// Search a small rotation grid in addition to translations.
    pub rotation: bool,
    /// Largest rotation magnitude searched, radians.
    pub rot_max: f64,
    /// Number of rotation grid points (odd, so 0 is included).
    pub rot_steps: usize,
    /// When false, propagation is skipped entirely: supervision degenerates
    /// to the three annotated slices with zero weight elsewhere.
    pub enabled: bool,
}

impl Default for RegisterOpts {
    fn default() -> Self {
        RegisterOpts {
            radius: 5,
            rotation: false,
            rot_max: 0.15,
            rot_steps: 13,
            enabled: true,
        }
    }
}

fn is_constant(img: ArrayView2<'_, f64>) -> bool {
    let mut it = img.iter();
    match it.next() {
        Some(&first) => it.all(|&v| v == first),
        None => true,
    }
}

/// Mean-squared error between `fixed` and `moving` translated by integer
/// `(dy, dx)`; voxels the moving image does not reach count as zero.
fn translation_mse(fixed: ArrayView2<'_, f64>, moving: ArrayView2<'_, f64>, dy: i64, dx: i64) -> f64 {
    let (h, w) = fixed.dim();
    let mut sum = 0.0;
    for y in 0..h as i64 {
        let sy = y - dy;
        for x in 0..w as i64 {
            let sx = x - dx;
            let m = if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                moving[[sy as usize, sx as usize]]
            } else {
                0.0
            };
            let diff = fixed[[y as usize, x as usize]] - m;
            sum += diff * diff;
        }
    }
    sum / (h * w) as f64
}

/// Cost over the full integer search grid, plus the arg-min.
fn translation_grid(
    fixed: ArrayView2<'_, f64>,
    moving: ArrayView2<'_, f64>,
    radius: usize,
) -> (Array2<f64>, (usize, usize)) {
    let n = 2 * radius + 1;
    let r = radius as i64;
    let mut costs = Array2::zeros((n, n));
    let mut best = (0usize, 0usize);
    let mut best_cost = f64::INFINITY;
    for iy in 0..n {
        for ix in 0..n {
            let c = translation_mse(fixed, moving, iy as i64 - r, ix as i64 - r);
            costs[[iy, ix]] = c;
            if c < best_cost {
                best_cost = c;
                best = (iy, ix);
            }
        }
    }
    (costs, best)
}

/// Parabolic sub-pixel offset from three cost samples around a minimum.
/// Returns 0 when the minimum sits on the grid edge, is already exact, or
/// the fit is not convex.
fn parabolic_offset(cm: f64, c0: f64, cp: f64) -> f64 {
    if c0 <= 1e-15 {
        return 0.0;
    }
    let denom = cm - 2.0 * c0 + cp;
    if denom <= 0.0 {
        return 0.0;
    }
    ((cm - cp) / (2.0 * denom)).clamp(-0.5, 0.5)
}

fn refine(costs: &Array2<f64>, best: (usize, usize), radius: usize) -> (f64, f64) {
    let n = 2 * radius + 1;
    let (by, bx) = best;
    let mut dy = by as f64 - radius as f64;
    let mut dx = bx as f64 - radius as f64;
    if by > 0 && by < n - 1 {
        dy += parabolic_offset(costs[[by - 1, bx]], costs[[by, bx]], costs[[by + 1, bx]]);
    }
    if bx > 0 && bx < n - 1 {
        dx += parabolic_offset(costs[[by, bx - 1]], costs[[by, bx]], costs[[by, bx + 1]]);
    }
    (dy, dx)
}

/// Recover the rigid transform aligning `moving` onto `fixed` by exhaustive
/// integer translation search (MSE, zero fill) with parabolic sub-pixel
/// refinement and an optional small-angle rotation grid.
pub fn register_slices(
    fixed: &Array2<f64>,
    moving: &Array2<f64>,
    opts: &RegisterOpts,
) -> Result<Transform2D> {
    if fixed.dim() != moving.dim() {
        return Err(RadaError::Validation(format!(
            "slice dims differ: {:?} vs {:?}",
            fixed.dim(),
            moving.dim()
        )));
    }
    if is_constant(fixed.view()) || is_constant(moving.view()) {
        return Err(RadaError::DegenerateImage(
            "cannot register a constant slice".into(),
        ));
    }
    if !opts.rotation {
        let (costs, best) = translation_grid(fixed.view(), moving.view(), opts.radius);
        let (dy, dx) = refine(&costs, best, opts.radius);
        return Transform2D::new(dy, dx, 0.0);
    }
    let steps = opts.rot_steps.max(1);
    let mut best_overall: Option<(f64, Transform2D)> = None;
    for i in 0..steps {
        let rot = if steps == 1 {
            0.0
        } else {
            -opts.rot_max + 2.0 * opts.rot_max * i as f64 / (steps - 1) as f64
        };
        let rotated = warp_slice(moving, Transform2D { dy: 0.0, dx: 0.0, rot });
        let (costs, best) = translation_grid(fixed.view(), rotated.view(), opts.radius);
        let cost = costs[[best.0, best.1]];
        if best_overall.as_ref().map_or(true, |(c, _)| cost < *c) {
            let (dy, dx) = refine(&costs, best, opts.radius);
            best_overall = Some((cost, Transform2D { dy, dx, rot }));
        }
    }
    let (_, t) = best_overall.expect("rotation grid is non-empty");
    Transform2D::new(t.dy, t.dx, t.rot)
}

/// Source coordinate in `moving` for output pixel `(y, x)` under `t`.
fn source_coord(t: Transform2D, cy: f64, cx: f64, y: f64, x: f64) -> (f64, f64) {
    let (s, c) = (-t.rot).sin_cos();
    let py = y - t.dy - cy;
    let px = x - t.dx - cx;
    (c * py + s * px + cy, -s * py + c * px + cx)
}

/// Warp an intensity slice by `t` with bilinear interpolation, zero fill.
pub fn warp_slice(moving: &Array2<f64>, t: Transform2D) -> Array2<f64> {
    let (h, w) = moving.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (sy, sx) = source_coord(t, cy, cx, y as f64, x as f64);
        bilinear(moving, sy, sx)
    })
}

fn bilinear(img: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = img.dim();
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let mut acc = 0.0;
    for (iy, wy) in [(y0 as i64, 1.0 - fy), (y0 as i64 + 1, fy)] {
        if wy == 0.0 || iy < 0 || iy >= h as i64 {
            continue;
        }
        for (ix, wx) in [(x0 as i64, 1.0 - fx), (x0 as i64 + 1, fx)] {
            if wx == 0.0 || ix < 0 || ix >= w as i64 {
                continue;
            }
            acc += wy * wx * img[[iy as usize, ix as usize]];
        }
    }
    acc
}

/// Warp a label slice by `t` with nearest-neighbor sampling; pixels mapping
/// outside the frame become background.
pub fn warp_labels(moving: &Array2<u8>, t: Transform2D) -> Array2<u8> {
    let (h, w) = moving.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (sy, sx) = source_coord(t, cy, cx, y as f64, x as f64);
        let (iy, ix) = (sy.round() as i64, sx.round() as i64);
        if iy >= 0 && iy < h as i64 && ix >= 0 && ix < w as i64 {
            moving[[iy as usize, ix as usize]]
        } else {
            0
        }
    })
}

/// Grow a dense label volume for one view from a single annotated slice.
///
/// Walking outward from the annotation, each image slice is registered to
/// its already-visited neighbor; the per-step transforms are composed and
/// the original annotation is warped once by the cumulative transform, so
/// nearest-neighbor resampling error does not accumulate. Constant slices
/// contribute an identity step. The annotated slice is copied verbatim.
pub fn propagate_labels(
    x: &Volume,
    entry: &AnnotationEntry,
    num_classes: usize,
    opts: &RegisterOpts,
) -> Result<LabelVolume> {
    let dims = x.dims();
    let axis_len = dims[entry.plane.axis()];
    if entry.index >= axis_len {
        return Err(RadaError::Validation(format!(
            "annotated index {} out of bounds for axis of length {axis_len}",
            entry.index
        )));
    }
    if entry.labels.dim() != entry.plane.slice_dims(dims) {
        return Err(RadaError::Validation(format!(
            "annotation slice dims {:?} do not match in-plane dims {:?}",
            entry.labels.dim(),
            entry.plane.slice_dims(dims)
        )));
    }
    let viewed = permute_to_view(&x.data, entry.plane);
    let mut out = Array3::<u8>::zeros(viewed.dim());
    out.index_axis_mut(Axis(2), entry.index).assign(&entry.labels);

    let mut walk = |range: Box<dyn Iterator<Item = usize>>| -> Result<()> {
        let mut cum = Transform2D::IDENTITY;
        let mut prev = entry.index;
        for j in range {
            let prev_img = viewed.index_axis(Axis(2), prev);
            let cur_img = viewed.index_axis(Axis(2), j);
            if !(is_constant(prev_img) || is_constant(cur_img)) {
                let step = register_slices(
                    &cur_img.to_owned(),
                    &prev_img.to_owned(),
                    opts,
                )?;
                cum = cum.then(step);
            }
            out.index_axis_mut(Axis(2), j)
                .assign(&warp_labels(&entry.labels, cum));
            prev = j;
        }
        Ok(())
    };
    walk(Box::new(entry.index + 1..axis_len))?;
    walk(Box::new((0..entry.index).rev()))?;

    LabelVolume::new(permute_from_view(&out, entry.plane), num_classes)
}

/// Per-view confidence weights: 1 on the source slice, `α^d` at slice
/// distance `d` along the view axis.
#[derive(Debug, Clone)]
pub struct WeightMap {
    pub weights: Array3<f64>,
    pub alpha: f64,
}

/// Build the decay weight map for one annotated slice.
pub fn make_weight_map(
    plane: Plane,
    index: usize,
    dims: [usize; 3],
    alpha: f64,
) -> Result<WeightMap> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(RadaError::Validation(format!(
            "alpha must be in [0,1), got {alpha}"
        )));
    }
    let axis_len = dims[plane.axis()];
    if index >= axis_len {
        return Err(RadaError::Validation(format!(
            "annotated index {index} out of bounds for axis of length {axis_len}"
        )));
    }
    let mut weights = Array3::zeros((dims[0], dims[1], dims[2]));
    for j in 0..axis_len {
        let w = if j == index {
            1.0
        } else {
            alpha.powi((j as i64 - index as i64).unsigned_abs() as i32)
        };
        weights.index_axis_mut(Axis(plane.axis()), j).fill(w);
    }
    Ok(WeightMap { weights, alpha })
}

/// One view's training targets: mixed pseudo-label and its weight map.
#[derive(Debug, Clone)]
pub struct ViewSupervision {
    pub plane: Plane,
    pub label: LabelVolume,
    pub weight: WeightMap,
}

/// Mixed supervision for all three views, in sagittal/coronal/axial order.
#[derive(Debug, Clone)]
pub struct MixedSupervision {
    pub views: [ViewSupervision; 3],
}

impl MixedSupervision {
    pub fn view(&self, plane: Plane) -> &ViewSupervision {
        self.views
            .iter()
            .find(|v| v.plane == plane)
            .expect("all planes present")
    }
}

/// Overwrite every annotated slice (from all three planes) with ground truth
/// in each view's propagated labels and force its weight to 1 there.
///
/// With `propagated = None` (registration disabled) the mixed label is the
/// bare annotation on the three slices and the weight is zero elsewhere.
pub fn mix_labels(
    ann: &SparseAnnotation,
    propagated: Option<&[LabelVolume; 3]>,
    weights: Option<&[WeightMap; 3]>,
    dims: [usize; 3],
) -> Result<MixedSupervision> {
    ann.validate_against(dims)?;
    if propagated.is_some() != weights.is_some() {
        return Err(RadaError::Validation(
            "propagated labels and weight maps must be supplied together".into(),
        ));
    }
    let shape = (dims[0], dims[1], dims[2]);
    let views: Vec<ViewSupervision> = Plane::ALL
        .iter()
        .enumerate()
        .map(|(vi, &plane)| -> Result<ViewSupervision> {
            let mut labels = match propagated {
                Some(p) => {
                    if p[vi].dims() != dims {
                        return Err(RadaError::Validation(format!(
                            "propagated dims {:?} do not match volume dims {dims:?}",
                            p[vi].dims()
                        )));
                    }
                    p[vi].labels.clone()
                }
                None => Array3::zeros(shape),
            };
            let mut w = match weights {
                Some(ws) => {
                    if ws[vi].weights.dim() != shape {
                        return Err(RadaError::Validation(format!(
                            "weight dims {:?} do not match volume dims {dims:?}",
                            ws[vi].weights.dim()
                        )));
                    }
                    ws[vi].weights.clone()
                }
                None => Array3::zeros(shape),
            };
            let ones = |p: Plane| {
                let (a, b) = p.slice_dims(dims);
                Array2::from_elem((a, b), 1.0)
            };
            for e in &ann.entries {
                insert_slice(&mut labels, e.plane, e.index, &e.labels)?;
                insert_slice(&mut w, e.plane, e.index, &ones(e.plane))?;
            }
            Ok(ViewSupervision {
                plane,
                label: LabelVolume::new(labels, ann.num_classes)?,
                weight: WeightMap {
                    weights: w,
                    alpha: weights.map(|ws| ws[vi].alpha).unwrap_or(0.0),
                },
            })
        })
        .collect::<Result<_>>()?;
    let views: [ViewSupervision; 3] = views.try_into().expect("three planes");
    Ok(MixedSupervision { views })
}

/// Full pipeline for one labeled volume: propagate each annotated slice
/// along its axis, build decay weights at the current `alpha`, and mix.
/// The annotation must cover each plane exactly once.
pub fn build_supervision(
    x: &Volume,
    ann: &SparseAnnotation,
    alpha: f64,
    opts: &RegisterOpts,
) -> Result<MixedSupervision> {
    let dims = x.dims();
    ann.validate_against(dims)?;
    if !opts.enabled {
        return mix_labels(ann, None, None, dims);
    }
    let mut propagated = Vec::with_capacity(3);
    let mut weights = Vec::with_capacity(3);
    for plane in Plane::ALL {
        let entry = ann.entry_for(plane).ok_or_else(|| {
            RadaError::Validation(format!(
                "annotation must cover each plane once; {plane:?} is missing"
            ))
        })?;
        propagated.push(propagate_labels(x, entry, ann.num_classes, opts)?);
        weights.push(make_weight_map(plane, entry.index, dims, alpha)?);
    }
    let propagated: [LabelVolume; 3] = propagated.try_into().expect("three planes");
    let weights: [WeightMap; 3] = weights.try_into().expect("three planes");
    mix_labels(ann, Some(&propagated), Some(&weights), dims)
}

/// Cosine rampdown of the decay rate: `α(k) = α₀·½(1 + cos(πk/K))` with
/// `k = ⌊iter/1000⌋` clamped to `K`, so it is piecewise constant over
/// 1000-iteration windows, starts at `α₀` and ends at 0.
pub fn alpha_schedule(iter: u64, total_updates: u64, alpha0: f64) -> f64 {
    if total_updates == 0 {
        return 0.0;
    }
    let k = alpha_window(iter).min(total_updates);
    alpha0 * 0.5 * (1.0 + (PI * k as f64 / total_updates as f64).cos())
}

/// Index of the 1000-iteration window `iter` falls in.
pub fn alpha_window(iter: u64) -> u64 {
    iter / 1000
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{generate_phantom, select_label_slices, PhantomShape, PhantomSpec};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Smooth random slice: a couple of Gaussian blobs plus mild noise.
    fn random_slice(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
        let blobs: Vec<(f64, f64, f64)> = (0..2)
            .map(|_| {
                (
                    rng.gen_range(0.3..0.7) * h as f64,
                    rng.gen_range(0.3..0.7) * w as f64,
                    rng.gen_range(1.5..3.0),
                )
            })
            .collect();
        Array2::from_shape_fn((h, w), |(y, x)| {
            let mut v = 0.0;
            for &(cy, cx, s) in &blobs {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                v += (-d2 / (2.0 * s * s)).exp();
            }
            v + 0.01 * rng.gen::<f64>()
        })
    }

    fn shift_int(img: &Array2<f64>, dy: i64, dx: i64) -> Array2<f64> {
        let (h, w) = img.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            let sy = y as i64 - dy;
            let sx = x as i64 - dx;
            if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                img[[sy as usize, sx as usize]]
            } else {
                0.0
            }
        })
    }

    #[test]
    fn transform_then_and_inverse_cancel() {
        let t = Transform2D::new(1.5, -2.25, 0.2).unwrap();
        let id = t.then(t.inverse());
        assert!(id.dy.abs() < 1e-12 && id.dx.abs() < 1e-12 && id.rot.abs() < 1e-12);
        // Pure translations compose additively.
        let a = Transform2D::new(1.0, 2.0, 0.0).unwrap();
        let b = Transform2D::new(-3.0, 0.5, 0.0).unwrap();
        let ab = a.then(b);
        assert_eq!((ab.dy, ab.dx, ab.rot), (-2.0, 2.5, 0.0));
    }

    #[test]
    fn register_identity_on_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let opts = RegisterOpts::default();
        for _ in 0..20 {
            let img = random_slice(&mut rng, 24, 20);
            let t = register_slices(&img, &img, &opts).unwrap();
            assert_eq!((t.dy, t.dx, t.rot), (0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn register_rejects_constant_slice() {
        let img = Array2::from_elem((16, 16), 0.0);
        let other = Array2::from_shape_fn((16, 16), |(y, x)| (y + x) as f64);
        let opts = RegisterOpts::default();
        for (f, m) in [(&img, &other), (&other, &img), (&img, &img)] {
            let err = register_slices(f, m, &opts).unwrap_err();
            assert!(matches!(err, RadaError::DegenerateImage(_)), "{err}");
        }
    }

    #[test]
    fn register_recovers_known_shift() {
        // Content shifted by (+2,-1) must register as translation (-2,+1).
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fixed = random_slice(&mut rng, 24, 24);
        let moving = shift_int(&fixed, 2, -1);
        let t = register_slices(&fixed, &moving, &RegisterOpts::default()).unwrap();
        assert!(
            (t.dy + 2.0).abs() <= 0.5 && (t.dx - 1.0).abs() <= 0.5,
            "recovered ({}, {})",
            t.dy,
            t.dx
        );
    }

    #[test]
    fn register_shift_recovery_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let opts = RegisterOpts::default();
        let mut hits = 0;
        for _ in 0..100 {
            let img = random_slice(&mut rng, 28, 28);
            let dy = rng.gen_range(-3i64..=3);
            let dx = rng.gen_range(-3i64..=3);
            let moving = shift_int(&img, dy, dx);
            let t = register_slices(&img, &moving, &opts).unwrap();
            if (t.dy + dy as f64).abs() <= 0.5 && (t.dx + dx as f64).abs() <= 0.5 {
                hits += 1;
            }
        }
        assert!(hits >= 95, "only {hits}/100 shifts recovered");
    }

    #[test]
    fn register_recovers_rotation_on_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_slice(&mut rng, 32, 32);
        let true_rot = 0.075; // lies on the default 13-step +/-0.15 grid
        let moving = warp_slice(&img, Transform2D { dy: 0.0, dx: 0.0, rot: -true_rot });
        let opts = RegisterOpts {
            rotation: true,
            ..RegisterOpts::default()
        };
        let t = register_slices(&img, &moving, &opts).unwrap();
        assert!(
            (t.rot - true_rot).abs() <= 0.0125 + 1e-12,
            "recovered rot {}",
            t.rot
        );
        assert!(t.dy.abs() <= 0.5 && t.dx.abs() <= 0.5);
    }

    #[test]
    fn warp_labels_out_of_frame_is_background() {
        let mut labels = Array2::<u8>::zeros((8, 8));
        labels[[4, 4]] = 1;
        let gone = warp_labels(&labels, Transform2D { dy: 100.0, dx: 0.0, rot: 0.0 });
        assert!(gone.iter().all(|&l| l == 0));
    }

    #[test]
    fn propagate_on_slice_constant_volume_replicates_annotation() {
        // Every axial slice identical: all steps are identity transforms.
        let (vol, lab) = generate_phantom(&PhantomSpec {
            size: [16, 16, 16],
            shape: PhantomShape::Sphere,
            noise_sigma: 0.0,
            intensity_contrast: 1.0,
            seed: 0,
            id: None,
        })
        .unwrap();
        let mid = extract_slice(&vol.data, Plane::Axial, 8).unwrap();
        let mut data = Array3::zeros((16, 16, 16));
        for j in 0..16 {
            data.index_axis_mut(Axis(2), j).assign(&mid);
        }
        let constant_vol = Volume::new(data, [1.0; 3], "rep").unwrap();
        let entry = AnnotationEntry {
            plane: Plane::Axial,
            index: 8,
            labels: extract_slice(&lab.labels, Plane::Axial, 8).unwrap(),
        };
        let prop = propagate_labels(&constant_vol, &entry, 2, &RegisterOpts::default()).unwrap();
        for j in 0..16 {
            assert_eq!(
                extract_slice(&prop.labels, Plane::Axial, j).unwrap(),
                entry.labels
            );
        }
    }

    #[test]
    fn propagate_recovers_sheared_cylinder() {
        // A disk whose center drifts +1 row per axial slice. Registration
        // must recover the integer drift, making the propagated label equal
        // the analytic one exactly.
        let (h, w, d) = (16usize, 16usize, 9usize);
        let inside = |y: usize, x: usize, z: usize| {
            let cy = 8.0 + z as f64 - 4.0;
            (y as f64 - cy).powi(2) + (x as f64 - 8.0).powi(2) <= 3.5f64 * 3.5
        };
        let mut data = Array3::zeros((h, w, d));
        let mut truth = Array3::<u8>::zeros((h, w, d));
        for y in 0..h {
            for x in 0..w {
                for z in 0..d {
                    if inside(y, x, z) {
                        data[[y, x, z]] = 1.0;
                        truth[[y, x, z]] = 1;
                    }
                }
            }
        }
        let vol = Volume::new(data, [1.0; 3], "shear").unwrap();
        let entry = AnnotationEntry {
            plane: Plane::Axial,
            index: 4,
            labels: extract_slice(&truth, Plane::Axial, 4).unwrap(),
        };
        let prop = propagate_labels(&vol, &entry, 2, &RegisterOpts::default()).unwrap();
        assert_eq!(prop.labels, truth);
    }

    #[test]
    fn propagate_empty_annotation_stays_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = Array3::from_shape_fn((12, 12, 12), |_| rng.gen::<f64>());
        let vol = Volume::new(data, [1.0; 3], "noise").unwrap();
        let entry = AnnotationEntry {
            plane: Plane::Coronal,
            index: 6,
            labels: Array2::zeros((12, 12)),
        };
        let prop = propagate_labels(&vol, &entry, 2, &RegisterOpts::default()).unwrap();
        assert_eq!(prop.foreground_count(), 0);
    }

    #[test]
    fn weight_map_matches_decay_table() {
        let wm = make_weight_map(Plane::Axial, 5, [1, 1, 11], 0.5).unwrap();
        let expected = [
            0.03125, 0.0625, 0.125, 0.25, 0.5, 1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125,
        ];
        for (j, &e) in expected.iter().enumerate() {
            assert_eq!(wm.weights[[0, 0, j]], e, "slice {j}");
        }
    }

    #[test]
    fn weight_map_alpha_zero_is_indicator() {
        let wm = make_weight_map(Plane::Coronal, 2, [5, 4, 3], 0.0).unwrap();
        for ((y, _, _), &w) in wm.weights.indexed_iter() {
            assert_eq!(w, if y == 2 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn weight_map_exact_powers_random_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..50 {
            let dims = [
                rng.gen_range(1..20usize),
                rng.gen_range(1..20usize),
                rng.gen_range(1..20usize),
            ];
            let plane = Plane::ALL[rng.gen_range(0..3)];
            let index = rng.gen_range(0..dims[plane.axis()]);
            let alpha = rng.gen_range(0.01..0.999);
            let wm = make_weight_map(plane, index, dims, alpha).unwrap();
            for j in 0..dims[plane.axis()] {
                let d = (j as i64 - index as i64).unsigned_abs();
                // Oracle: repeated multiplication.
                let mut want = 1.0;
                for _ in 0..d {
                    want *= alpha;
                }
                let got = wm
                    .weights
                    .index_axis(Axis(plane.axis()), j)
                    .iter()
                    .next()
                    .copied()
                    .unwrap();
                let tol = 1e-12 * want.max(1e-300);
                assert!((got - want).abs() <= tol, "d={d}: {got} vs {want}");
                if d == 0 {
                    assert_eq!(got, 1.0);
                }
            }
        }
    }

    #[test]
    fn weight_map_rejects_bad_alpha() {
        assert!(make_weight_map(Plane::Axial, 0, [4, 4, 4], 1.0).is_err());
        assert!(make_weight_map(Plane::Axial, 0, [4, 4, 4], -0.1).is_err());
    }

    fn sphere_annotation() -> (Volume, SparseAnnotation) {
        let (vol, lab) = generate_phantom(&PhantomSpec {
            size: [16, 16, 16],
            shape: PhantomShape::Sphere,
            noise_sigma: 0.0,
            intensity_contrast: 1.0,
            seed: 0,
            id: None,
        })
        .unwrap();
        let ann = select_label_slices(&lab, &Plane::ALL).unwrap();
        (vol, ann)
    }

    #[test]
    fn mix_overwrites_annotated_slices_with_ground_truth() {
        let (vol, ann) = sphere_annotation();
        // Propagated labels that disagree everywhere: all-foreground.
        let wrong = LabelVolume::new(Array3::ones((16, 16, 16)), 2).unwrap();
        let wm = make_weight_map(Plane::Sagittal, 8, vol.dims(), 0.5).unwrap();
        let mixed = mix_labels(
            &ann,
            Some(&[wrong.clone(), wrong.clone(), wrong]),
            Some(&[wm.clone(), wm.clone(), wm]),
            vol.dims(),
        )
        .unwrap();
        for v in &mixed.views {
            for e in &ann.entries {
                let got = extract_slice(&v.label.labels, e.plane, e.index).unwrap();
                assert_eq!(got, e.labels, "{:?} view, {:?} slice", v.plane, e.plane);
                let w = extract_slice(&v.weight.weights, e.plane, e.index).unwrap();
                assert!(w.iter().all(|&x| x == 1.0));
            }
        }
    }

    #[test]
    fn mix_without_propagation_is_annotation_only() {
        let (vol, ann) = sphere_annotation();
        let mixed = mix_labels(&ann, None, None, vol.dims()).unwrap();
        for v in &mixed.views {
            for ((y, x, z), &w) in v.weight.weights.indexed_iter() {
                let on_ann = ann
                    .entries
                    .iter()
                    .any(|e| [y, x, z][e.plane.axis()] == e.index);
                assert_eq!(w, if on_ann { 1.0 } else { 0.0 });
                if !on_ann {
                    assert_eq!(v.label.labels[[y, x, z]], 0);
                }
            }
        }
    }

    #[test]
    fn build_supervision_weight_one_iff_annotated() {
        let (vol, ann) = sphere_annotation();
        let sup = build_supervision(&vol, &ann, 0.6, &RegisterOpts::default()).unwrap();
        for v in &sup.views {
            for ((y, x, z), &w) in v.weight.weights.indexed_iter() {
                assert!(w > 0.0 && w <= 1.0);
                let on_ann = ann
                    .entries
                    .iter()
                    .any(|e| [y, x, z][e.plane.axis()] == e.index);
                assert_eq!(w == 1.0, on_ann, "at ({y},{x},{z})");
            }
            // Consecutive unannotated slices along the view axis decay by
            // exactly alpha.
            let ax = v.plane.axis();
            let i0 = ann.entry_for(v.plane).unwrap().index;
            for j in 0..vol.dims()[ax] - 1 {
                if j == i0 || j + 1 == i0 {
                    continue;
                }
                // Voxel (0,0) of each slice avoids the other planes'
                // annotated slices (guarded below regardless).
                let wa = v.weight.weights.index_axis(Axis(ax), j)[[0, 0]];
                let wb = v.weight.weights.index_axis(Axis(ax), j + 1)[[0, 0]];
                if wa == 1.0 || wb == 1.0 {
                    continue;
                }
                let ratio = if j >= i0 { wb / wa } else { wa / wb };
                assert!((ratio - 0.6).abs() < 1e-12, "ratio {ratio}");
            }
        }
    }

    #[test]
    fn alpha_schedule_endpoints_and_shape() {
        assert_eq!(alpha_schedule(0, 30, 0.97), 0.97);
        assert_eq!(alpha_schedule(30_000, 30, 0.97), 0.0);
        assert_eq!(alpha_schedule(45_000, 30, 0.97), 0.0);
        assert!((alpha_schedule(15_000, 30, 0.97) - 0.485).abs() < 1e-12);
        // Piecewise constant inside a window, non-increasing across windows.
        let mut prev = f64::INFINITY;
        for k in 0..=30u64 {
            let v = alpha_schedule(k * 1000, 30, 0.97);
            assert_eq!(v, alpha_schedule(k * 1000 + 999, 30, 0.97));
            assert!(v <= prev);
            prev = v;
        }
    }
}
