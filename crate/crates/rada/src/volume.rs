//! Volume data model and I/O.
//!
//! A [`Volume`] is an `H×W×D` scalar grid with voxel spacing, normalized to
//! `[0,1]`. Labels live in a parallel [`LabelVolume`]. Sparse supervision is
//! three annotated orthogonal slices ([`SparseAnnotation`]), one per plane by
//! default, picked by foreground area.
//!
//! On-disk container is MVOL: a 4-byte little-endian header length, a JSON
//! header (dims, spacing, dtype, kind), then the raw voxel payload in C order.
//! NIfTI-1 (`.nii`) is supported read-only.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{RadaError, Result};

/// Orthogonal anatomical planes. Slicing axes on an `[h, w, d]` grid:
/// sagittal cuts along `w`, coronal along `h`, axial along `d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Sagittal,
    Coronal,
    Axial,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Sagittal, Plane::Coronal, Plane::Axial];

    /// Axis index of the slicing direction on an `[h, w, d]` array.
    pub fn axis(self) -> usize {
        match self {
            Plane::Sagittal => 1,
            Plane::Coronal => 0,
            Plane::Axial => 2,
        }
    }

    /// In-plane dims of a slice, as `(rows, cols)` of the extracted 2D grid.
    pub fn slice_dims(self, dims: [usize; 3]) -> (usize, usize) {
        let [h, w, d] = dims;
        match self {
            Plane::Sagittal => (h, d),
            Plane::Coronal => (w, d),
            Plane::Axial => (h, w),
        }
    }

    pub fn from_char(c: char) -> Result<Plane> {
        match c.to_ascii_uppercase() {
            'S' => Ok(Plane::Sagittal),
            'C' => Ok(Plane::Coronal),
            'A' => Ok(Plane::Axial),
            other => Err(RadaError::Config(format!(
                "unknown plane '{other}', expected S, C or A"
            ))),
        }
    }

    pub fn letter(self) -> char {
        match self {
            Plane::Sagittal => 'S',
            Plane::Coronal => 'C',
            Plane::Axial => 'A',
        }
    }
}

/// Parse a plane multiset string such as "SCA" or "AAA".
pub fn parse_planes(s: &str) -> Result<Vec<Plane>> {
    s.chars().map(Plane::from_char).collect()
}

/// 3D scalar image, intensities in `[0,1]`, `[h, w, d]` layout.
#[derive(Debug, Clone)]
pub struct Volume {
    pub data: Array3<f64>,
    /// Physical voxel size per axis, mm.
    pub spacing: [f64; 3],
    pub id: String,
}

impl Volume {
    /// Wrap data already in `[0,1]`. Fails on empty dims, non-finite values
    /// or values outside the unit range.
    pub fn new(data: Array3<f64>, spacing: [f64; 3], id: impl Into<String>) -> Result<Volume> {
        validate_dims(data.dim())?;
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(RadaError::Validation(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        for &v in &data {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(RadaError::Validation(format!(
                    "intensity {v} outside [0,1]; use from_raw for unnormalized data"
                )));
            }
        }
        Ok(Volume {
            data,
            spacing,
            id: id.into(),
        })
    }

    /// Wrap arbitrary finite data, min-max normalizing to `[0,1]`.
    /// A constant field keeps its value (clamped into the unit range).
    pub fn from_raw(
        mut data: Array3<f64>,
        spacing: [f64; 3],
        id: impl Into<String>,
    ) -> Result<Volume> {
        validate_dims(data.dim())?;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &data {
            if !v.is_finite() {
                return Err(RadaError::Validation("non-finite intensity".into()));
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi > lo {
            data.mapv_inplace(|v| (v - lo) / (hi - lo));
        } else {
            data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        }
        Volume::new(data, spacing, id)
    }

    pub fn dims(&self) -> [usize; 3] {
        let (h, w, d) = self.data.dim();
        [h, w, d]
    }
}

/// Integer label grid paired with a [`Volume`], values in `[0, num_classes)`.
#[derive(Debug, Clone)]
pub struct LabelVolume {
    pub labels: Array3<u8>,
    pub num_classes: usize,
}

impl LabelVolume {
    pub fn new(labels: Array3<u8>, num_classes: usize) -> Result<LabelVolume> {
        validate_dims(labels.dim())?;
        if num_classes < 2 {
            return Err(RadaError::Validation(format!(
                "num_classes must be >= 2, got {num_classes}"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| (l as usize) >= num_classes) {
            return Err(RadaError::Validation(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(LabelVolume {
            labels,
            num_classes,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        let (h, w, d) = self.labels.dim();
        [h, w, d]
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }
}

fn validate_dims(dim: (usize, usize, usize)) -> Result<()> {
    if dim.0 == 0 || dim.1 == 0 || dim.2 == 0 {
        return Err(RadaError::Validation(format!(
            "all dims must be >= 1, got {dim:?}"
        )));
    }
    Ok(())
}

/// One annotated 2D slice: plane, slice index, and its label grid.
#[derive(Debug, Clone)]
pub struct AnnotationEntry {
    pub plane: Plane,
    pub index: usize,
    pub labels: Array2<u8>,
}

/// Exactly three annotated slices per labeled volume.
#[derive(Debug, Clone)]
pub struct SparseAnnotation {
    pub entries: Vec<AnnotationEntry>,
    pub num_classes: usize,
}

impl SparseAnnotation {
    pub fn new(entries: Vec<AnnotationEntry>, num_classes: usize) -> Result<SparseAnnotation> {
        if entries.len() != 3 {
            return Err(RadaError::Validation(format!(
                "sparse annotation needs exactly 3 slices, got {}",
                entries.len()
            )));
        }
        Ok(SparseAnnotation {
            entries,
            num_classes,
        })
    }

    /// Bounds- and shape-check the entries against a volume's dims.
    pub fn validate_against(&self, dims: [usize; 3]) -> Result<()> {
        for e in &self.entries {
            let n = dims[e.plane.axis()];
            if e.index >= n {
                return Err(RadaError::Validation(format!(
                    "slice index {} out of bounds for {:?} axis of length {n}",
                    e.index, e.plane
                )));
            }
            let want = e.plane.slice_dims(dims);
            if e.labels.dim() != want {
                return Err(RadaError::Validation(format!(
                    "{:?} slice labels are {:?}, volume in-plane dims are {:?}",
                    e.plane,
                    e.labels.dim(),
                    want
                )));
            }
        }
        Ok(())
    }

    /// First entry for the given plane, if any.
    pub fn entry_for(&self, plane: Plane) -> Option<&AnnotationEntry> {
        self.entries.iter().find(|e| e.plane == plane)
    }
}

// ---------------------------------------------------------------------------
// Slice extraction and view permutation
// ---------------------------------------------------------------------------

/// Extract the in-plane 2D grid at `index`.
pub fn extract_slice<T: Clone>(data: &Array3<T>, plane: Plane, index: usize) -> Result<Array2<T>> {
    let axis = plane.axis();
    let n = data.shape()[axis];
    if index >= n {
        return Err(RadaError::Validation(format!(
            "slice index {index} out of bounds for {plane:?} axis of length {n}"
        )));
    }
    Ok(data.index_axis(Axis(axis), index).to_owned())
}

/// Write a 2D grid back at `index`; inverse of [`extract_slice`].
pub fn insert_slice<T: Clone>(
    data: &mut Array3<T>,
    plane: Plane,
    index: usize,
    slice: &Array2<T>,
) -> Result<()> {
    let axis = plane.axis();
    let n = data.shape()[axis];
    if index >= n {
        return Err(RadaError::Validation(format!(
            "slice index {index} out of bounds for {plane:?} axis of length {n}"
        )));
    }
    let mut view = data.index_axis_mut(Axis(axis), index);
    if view.dim() != slice.dim() {
        return Err(RadaError::Validation(format!(
            "slice dims {:?} do not match in-plane dims {:?}",
            slice.dim(),
            view.dim()
        )));
    }
    view.assign(slice);
    Ok(())
}

fn view_axes(plane: Plane) -> [usize; 3] {
    // The plane's slicing axis moves last; the other two keep their order.
    match plane {
        Plane::Axial => [0, 1, 2],
        Plane::Coronal => [1, 2, 0],
        Plane::Sagittal => [0, 2, 1],
    }
}

fn inverse_axes(axes: [usize; 3]) -> [usize; 3] {
    let mut inv = [0usize; 3];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Permute a grid into view order for `plane`: the slicing axis becomes the
/// last axis, so axial is the identity. Output is in standard layout.
pub fn permute_to_view<T: Clone>(data: &Array3<T>, plane: Plane) -> Array3<T> {
    let axes = view_axes(plane);
    data.view()
        .permuted_axes(axes)
        .as_standard_layout()
        .to_owned()
}

/// Inverse of [`permute_to_view`].
pub fn permute_from_view<T: Clone>(data: &Array3<T>, plane: Plane) -> Array3<T> {
    let axes = inverse_axes(view_axes(plane));
    data.view()
        .permuted_axes(axes)
        .as_standard_layout()
        .to_owned()
}

// ---------------------------------------------------------------------------
// Label slice selection
// ---------------------------------------------------------------------------

/// Foreground voxel count of every slice along `plane`.
pub fn foreground_per_slice(y: &LabelVolume, plane: Plane) -> Vec<usize> {
    let axis = plane.axis();
    (0..y.labels.shape()[axis])
        .map(|i| {
            y.labels
                .index_axis(Axis(axis), i)
                .iter()
                .filter(|&&l| l > 0)
                .count()
        })
        .collect()
}

/// Pick, per requested plane, the slice with the largest foreground area
/// (ties broken by the smallest index). Duplicated planes in the strategy
/// yield duplicated entries.
pub fn select_label_slices(y: &LabelVolume, strategy: &[Plane]) -> Result<SparseAnnotation> {
    if strategy.len() != 3 {
        return Err(RadaError::Selection(format!(
            "slice selection strategy must name 3 planes, got {}",
            strategy.len()
        )));
    }
    let mut entries = Vec::with_capacity(3);
    for &plane in strategy {
        let counts = foreground_per_slice(y, plane);
        let (best, &n) = counts
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.cmp(b).then(ib.cmp(ia)))
            .expect("dims >= 1");
        if n == 0 {
            return Err(RadaError::Selection(format!(
                "no foreground voxels in any {plane:?} slice"
            )));
        }
        entries.push(AnnotationEntry {
            plane,
            index: best,
            labels: extract_slice(&y.labels, plane, best)?,
        });
    }
    SparseAnnotation::new(entries, y.num_classes)
}

// ---------------------------------------------------------------------------
// Phantoms
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomShape {
    Sphere,
    Ellipsoid,
    TwoLobe,
}

/// Analytic test phantom: a bright shape on a dark background plus optional
/// Gaussian noise. Deterministic per seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub size: [usize; 3],
    pub shape: PhantomShape,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default = "default_contrast")]
    pub intensity_contrast: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub id: Option<String>,
}

fn default_contrast() -> f64 {
    1.0
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|&s| s < 8) {
            return Err(RadaError::Validation(format!(
                "phantom size entries must be >= 8, got {:?}",
                self.size
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(RadaError::Validation(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if !(self.intensity_contrast > 0.0 && self.intensity_contrast <= 1.0) {
            return Err(RadaError::Validation(format!(
                "intensity_contrast must be in (0,1], got {}",
                self.intensity_contrast
            )));
        }
        Ok(())
    }

    pub fn id(&self) -> String {
        self.id
            .clone()
            .unwrap_or_else(|| format!("phantom-{}", self.seed))
    }

    /// Analytic foreground indicator at integer voxel coordinates.
    pub fn inside(&self, v: [usize; 3]) -> bool {
        let c = [
            (self.size[0] / 2) as f64,
            (self.size[1] / 2) as f64,
            (self.size[2] / 2) as f64,
        ];
        let p = [v[0] as f64, v[1] as f64, v[2] as f64];
        let min_dim = *self.size.iter().min().unwrap() as f64;
        match self.shape {
            PhantomShape::Sphere => {
                let r = min_dim / 4.0;
                dist2(p, c) <= r * r
            }
            PhantomShape::Ellipsoid => {
                // Distinct semi-axes so the three views see different outlines.
                let a = [
                    0.32 * self.size[0] as f64,
                    0.22 * self.size[1] as f64,
                    0.27 * self.size[2] as f64,
                ];
                let q: f64 = (0..3).map(|i| ((p[i] - c[i]) / a[i]).powi(2)).sum();
                q <= 1.0
            }
            PhantomShape::TwoLobe => {
                let r = min_dim / 5.0;
                let off = self.size[0] as f64 / 5.0;
                let c1 = [c[0] - off, c[1], c[2]];
                let c2 = [c[0] + off, c[1], c[2]];
                dist2(p, c1) <= r * r || dist2(p, c2) <= r * r
            }
        }
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Generate the analytic phantom image and its exact label.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelVolume)> {
    spec.validate()?;
    let [h, w, d] = spec.size;
    let mut labels = Array3::<u8>::zeros((h, w, d));
    let mut image = Array3::<f64>::zeros((h, w, d));
    for x in 0..h {
        for y in 0..w {
            for z in 0..d {
                if spec.inside([x, y, z]) {
                    labels[[x, y, z]] = 1;
                    image[[x, y, z]] = spec.intensity_contrast;
                }
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| RadaError::Validation(format!("bad noise sigma: {e}")))?;
        for v in image.iter_mut() {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    let vol = Volume::new(image, [1.0, 1.0, 1.0], spec.id())?;
    let lab = LabelVolume::new(labels, 2)?;
    Ok((vol, lab))
}

// ---------------------------------------------------------------------------
// MVOL container
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MvolHeader {
    pub magic: String,
    pub version: u32,
    pub kind: String,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default)]
    pub id: String,
}

fn write_mvol(path: &Path, header: &MvolHeader, payload: &[u8]) -> Result<()> {
    let hdr = serde_json::to_vec(header)
        .map_err(|e| RadaError::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let mut bytes = Vec::with_capacity(4 + hdr.len() + payload.len());
    bytes.extend_from_slice(&(hdr.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&hdr);
    bytes.extend_from_slice(payload);
    fs::write(path, bytes).map_err(|e| RadaError::io(path, e))
}

fn read_mvol(path: &Path) -> Result<(MvolHeader, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| RadaError::io(path, e))?;
    let fmt = |reason: &str| RadaError::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 4 {
        return Err(fmt("file shorter than header length field"));
    }
    let hdr_len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    if bytes.len() < 4 + hdr_len {
        return Err(fmt("truncated header"));
    }
    let header: MvolHeader = serde_json::from_slice(&bytes[4..4 + hdr_len])
        .map_err(|e| fmt(&format!("bad JSON header: {e}")))?;
    if header.magic != "MVOL" {
        return Err(fmt(&format!("bad magic {:?}", header.magic)));
    }
    let n: usize = header.dims.iter().product();
    let elem = match header.dtype.as_str() {
        "f64" => 8,
        "u8" => 1,
        other => return Err(fmt(&format!("unsupported dtype {other:?}"))),
    };
    let payload = &bytes[4 + hdr_len..];
    if payload.len() != n * elem {
        return Err(fmt(&format!(
            "payload is {} bytes, expected {}",
            payload.len(),
            n * elem
        )));
    }
    Ok((header, payload.to_vec()))
}

fn f64_payload(a: &Array3<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(a.len() * 8);
    for &v in a.as_standard_layout().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn f64_from_payload(dims: [usize; 3], bytes: &[u8]) -> Array3<f64> {
    let vals: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array3::from_shape_vec((dims[0], dims[1], dims[2]), vals).expect("length checked")
}

/// Save an image volume as MVOL.
pub fn save_volume(path: &Path, v: &Volume) -> Result<()> {
    let header = MvolHeader {
        magic: "MVOL".into(),
        version: 1,
        kind: "image".into(),
        dims: v.dims(),
        spacing: v.spacing,
        dtype: "f64".into(),
        num_classes: None,
        id: v.id.clone(),
    };
    write_mvol(path, &header, &f64_payload(&v.data))
}

/// Save a label volume as MVOL.
pub fn save_labels(path: &Path, y: &LabelVolume, spacing: [f64; 3], id: &str) -> Result<()> {
    let header = MvolHeader {
        magic: "MVOL".into(),
        version: 1,
        kind: "label".into(),
        dims: y.dims(),
        spacing,
        dtype: "u8".into(),
        num_classes: Some(y.num_classes),
        id: id.into(),
    };
    let payload = y.labels.as_standard_layout().iter().copied().collect::<Vec<u8>>();
    write_mvol(path, &header, &payload)
}

/// Save a real-valued grid (e.g. a weight map) as MVOL without normalizing.
pub fn save_field(path: &Path, data: &Array3<f64>, spacing: [f64; 3], id: &str) -> Result<()> {
    let (h, w, d) = data.dim();
    let header = MvolHeader {
        magic: "MVOL".into(),
        version: 1,
        kind: "weight".into(),
        dims: [h, w, d],
        spacing,
        dtype: "f64".into(),
        num_classes: None,
        id: id.into(),
    };
    write_mvol(path, &header, &f64_payload(data))
}

/// Load a label MVOL.
pub fn load_labels(path: &Path) -> Result<LabelVolume> {
    let (header, payload) = read_mvol(path)?;
    if header.dtype != "u8" {
        return Err(RadaError::Format {
            path: path.to_path_buf(),
            reason: format!("label file has dtype {:?}, expected u8", header.dtype),
        });
    }
    let labels = Array3::from_shape_vec(
        (header.dims[0], header.dims[1], header.dims[2]),
        payload,
    )
    .expect("length checked");
    LabelVolume::new(labels, header.num_classes.unwrap_or(2))
}

/// Load a real-valued MVOL grid verbatim (no normalization).
pub fn load_field(path: &Path) -> Result<Array3<f64>> {
    let (header, payload) = read_mvol(path)?;
    if header.dtype != "f64" {
        return Err(RadaError::Format {
            path: path.to_path_buf(),
            reason: format!("field file has dtype {:?}, expected f64", header.dtype),
        });
    }
    Ok(f64_from_payload(header.dims, &payload))
}

/// Sidecar label path: `x.mvol` -> `x.label.mvol`, `x.nii` -> `x.label.nii`.
pub fn label_sidecar(path: &Path) -> PathBuf {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("mvol");
    path.with_extension(format!("label.{ext}"))
}

/// Load a volume (MVOL or NIfTI-1 by extension), normalized, together with
/// its label sidecar when one exists.
pub fn load_volume(path: &Path) -> Result<(Volume, Option<LabelVolume>)> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    let vol = match ext.as_str() {
        "mvol" => {
            let (header, payload) = read_mvol(path)?;
            if header.dtype != "f64" {
                return Err(RadaError::Format {
                    path: path.to_path_buf(),
                    reason: format!("image file has dtype {:?}, expected f64", header.dtype),
                });
            }
            let data = f64_from_payload(header.dims, &payload);
            let id = if header.id.is_empty() {
                stem_of(path)
            } else {
                header.id.clone()
            };
            Volume::from_raw(data, header.spacing, id)?
        }
        "nii" => nifti::load(path)?,
        other => {
            return Err(RadaError::Format {
                path: path.to_path_buf(),
                reason: format!("unknown volume extension {other:?}"),
            })
        }
    };
    let sidecar = label_sidecar(path);
    let labels = if sidecar.exists() {
        let lab = match ext.as_str() {
            "mvol" => load_labels(&sidecar)?,
            _ => nifti::load_labels(&sidecar)?,
        };
        if lab.dims() != vol.dims() {
            return Err(RadaError::Validation(format!(
                "label dims {:?} do not match image dims {:?} for {}",
                lab.dims(),
                vol.dims(),
                path.display()
            )));
        }
        Some(lab)
    } else {
        None
    };
    Ok((vol, labels))
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("volume")
        .to_string()
}

// ---------------------------------------------------------------------------
// Minimal NIfTI-1 ingestion (read-only, uncompressed .nii)
// ---------------------------------------------------------------------------

mod nifti {
    use super::*;

    struct Header {
        dims: [usize; 3],
        spacing: [f64; 3],
        datatype: i16,
        vox_offset: usize,
        scl_slope: f32,
        scl_inter: f32,
        swap: bool,
    }

    fn i16_at(b: &[u8], off: usize, swap: bool) -> i16 {
        let raw: [u8; 2] = b[off..off + 2].try_into().unwrap();
        let v = i16::from_le_bytes(raw);
        if swap {
            v.swap_bytes()
        } else {
            v
        }
    }

    fn f32_at(b: &[u8], off: usize, swap: bool) -> f32 {
        let raw: [u8; 4] = b[off..off + 4].try_into().unwrap();
        if swap {
            f32::from_be_bytes(raw)
        } else {
            f32::from_le_bytes(raw)
        }
    }

    fn parse_header(path: &Path, bytes: &[u8]) -> Result<Header> {
        let fmt = |reason: String| RadaError::Format {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 352 {
            return Err(fmt("file shorter than NIfTI-1 header".into()));
        }
        let sizeof_hdr = i32::from_le_bytes(bytes[..4].try_into().unwrap());
        let swap = match sizeof_hdr {
            348 => false,
            _ if sizeof_hdr.swap_bytes() == 348 => true,
            _ => return Err(fmt(format!("sizeof_hdr = {sizeof_hdr}, expected 348"))),
        };
        if &bytes[344..347] != b"n+1" {
            return Err(fmt("magic is not \"n+1\" (single-file NIfTI-1)".into()));
        }
        let ndim = i16_at(bytes, 40, swap);
        if !(3..=4).contains(&ndim) || (ndim == 4 && i16_at(bytes, 48, swap) != 1) {
            return Err(fmt(format!("unsupported dim[0] = {ndim}, need a 3D image")));
        }
        let dims = [
            i16_at(bytes, 42, swap) as usize,
            i16_at(bytes, 44, swap) as usize,
            i16_at(bytes, 46, swap) as usize,
        ];
        let spacing = [
            f32_at(bytes, 80, swap).abs() as f64,
            f32_at(bytes, 84, swap).abs() as f64,
            f32_at(bytes, 88, swap).abs() as f64,
        ];
        let spacing = spacing.map(|s| if s > 0.0 { s } else { 1.0 });
        Ok(Header {
            dims,
            spacing,
            datatype: i16_at(bytes, 70, swap),
            vox_offset: f32_at(bytes, 108, swap) as usize,
            scl_slope: f32_at(bytes, 112, swap),
            scl_inter: f32_at(bytes, 116, swap),
            swap,
        })
    }

    fn decode(path: &Path, h: &Header, data: &[u8]) -> Result<Vec<f64>> {
        let n: usize = h.dims.iter().product();
        let fmt = |reason: String| RadaError::Format {
            path: path.to_path_buf(),
            reason,
        };
        macro_rules! take {
            ($t:ty, $size:expr) => {{
                if data.len() < n * $size {
                    return Err(fmt("truncated voxel data".into()));
                }
                data.chunks_exact($size)
                    .take(n)
                    .map(|c| {
                        let mut raw = [0u8; $size];
                        raw.copy_from_slice(c);
                        if h.swap {
                            raw.reverse();
                        }
                        <$t>::from_le_bytes(raw) as f64
                    })
                    .collect::<Vec<f64>>()
            }};
        }
        let vals = match h.datatype {
            2 => data
                .iter()
                .take(n)
                .map(|&b| b as f64)
                .collect::<Vec<f64>>(),
            4 => take!(i16, 2),
            8 => take!(i32, 4),
            16 => take!(f32, 4),
            64 => take!(f64, 8),
            512 => take!(u16, 2),
            dt => return Err(fmt(format!("unsupported NIfTI datatype {dt}"))),
        };
        if vals.len() != n {
            return Err(fmt("truncated voxel data".into()));
        }
        let (slope, inter) = if h.scl_slope != 0.0 && h.scl_slope.is_finite() {
            (h.scl_slope as f64, h.scl_inter as f64)
        } else {
            (1.0, 0.0)
        };
        Ok(vals.into_iter().map(|v| v * slope + inter).collect())
    }

    fn to_array(h: &Header, vals: Vec<f64>) -> Array3<f64> {
        // NIfTI stores dim1 fastest; remap to [h, w, d] C order.
        let [d1, d2, d3] = h.dims;
        let mut arr = Array3::zeros((d1, d2, d3));
        for k in 0..d3 {
            for j in 0..d2 {
                for i in 0..d1 {
                    arr[[i, j, k]] = vals[i + d1 * (j + d2 * k)];
                }
            }
        }
        arr
    }

    pub fn load(path: &Path) -> Result<Volume> {
        let bytes = fs::read(path).map_err(|e| RadaError::io(path, e))?;
        let h = parse_header(path, &bytes)?;
        let off = h.vox_offset.max(352);
        let vals = decode(path, &h, &bytes[off.min(bytes.len())..])?;
        Volume::from_raw(to_array(&h, vals), h.spacing, stem_of(path))
    }

    pub fn load_labels(path: &Path) -> Result<LabelVolume> {
        let bytes = fs::read(path).map_err(|e| RadaError::io(path, e))?;
        let h = parse_header(path, &bytes)?;
        let off = h.vox_offset.max(352);
        let vals = decode(path, &h, &bytes[off.min(bytes.len())..])?;
        let max = vals.iter().cloned().fold(0.0f64, f64::max);
        let arr = to_array(&h, vals).mapv(|v| v.round().max(0.0) as u8);
        LabelVolume::new(arr, (max.round() as usize + 1).max(2))
    }
}
