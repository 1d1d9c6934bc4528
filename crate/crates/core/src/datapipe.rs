//! Dataset loading, 2D slicing, per-slice normalization, augmentation and the
//! synthetic phantom generator.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::class_name;
use crate::tensor::Tensor;
use crate::tensorio::{
    read_case, read_dataset_manifest, write_case, write_dataset_manifest, CaseEntry, CaseRecord, DatasetManifest,
    Split,
};

/// Variance below which a slice is treated as constant.
pub const VAR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct SliceSample {
    pub case_id: String,
    pub slice_index: usize,
    pub size: usize,
    /// `[S, S, 3]`, the grey value replicated on every channel.
    pub image: Vec<f32>,
    /// `[S, S]`.
    pub label: Vec<u8>,
}

/// Bilinear resize of one `[h, w]` plane (half-pixel centers).
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    if (h, w) == (oh, ow) {
        return src.to_vec();
    }
    let (sy, sx) = (h as f64 / oh as f64, w as f64 / ow as f64);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
        let y1 = (y0 + 1).min(h - 1);
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
            let x1 = (x0 + 1).min(w - 1);
            let p = |yy: usize, xx: usize| src[yy * w + xx] as f64;
            let top = p(y0, x0) * (1.0 - tx) + p(y0, x1) * tx;
            let bot = p(y1, x0) * (1.0 - tx) + p(y1, x1) * tx;
            out.push((top * (1.0 - ty) + bot * ty) as f32);
        }
    }
    out
}

/// Nearest-neighbour resize; never introduces new values.
pub fn resize_nearest<T: Copy>(src: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    if (h, w) == (oh, ow) {
        return src.to_vec();
    }
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let yy = (((y as f64 + 0.5) * h as f64 / oh as f64) as usize).min(h - 1);
        for x in 0..ow {
            let xx = (((x as f64 + 0.5) * w as f64 / ow as f64) as usize).min(w - 1);
            out.push(src[yy * w + xx]);
        }
    }
    out
}

/// Zero mean, unit variance; constant planes become all zeros.
pub fn normalize_slice(v: &mut [f32]) {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    if var < VAR_FLOOR {
        v.fill(0.0);
        return;
    }
    let inv = 1.0 / var.sqrt();
    for x in v.iter_mut() {
        *x = ((*x as f64 - mean) * inv) as f32;
    }
}

/// Splits a volume into `D` normalized `size × size` samples.
pub fn to_slices(case: &CaseRecord, size: usize) -> Vec<SliceSample> {
    let [d, h, w] = case.dims;
    (0..d)
        .map(|z| {
            let plane = &case.image[z * h * w..(z + 1) * h * w];
            let mut grey = resize_bilinear(plane, h, w, size, size);
            normalize_slice(&mut grey);
            SliceSample {
                case_id: case.case_id.clone(),
                slice_index: z,
                size,
                image: grey.iter().flat_map(|&g| [g, g, g]).collect(),
                label: resize_nearest(&case.label[z * h * w..(z + 1) * h * w], h, w, size, size),
            }
        })
        .collect()
}

/// Stacks per-slice `size × size` predictions back into a `[D, H, W]` volume.
pub fn stack_slices(preds: &[Vec<u8>], size: usize, dims: [usize; 3]) -> Result<Vec<u8>> {
    let [d, h, w] = dims;
    if preds.len() != d {
        return Err(Error::Shape(format!("{} slices for a volume of depth {d}", preds.len())));
    }
    let mut out = Vec::with_capacity(d * h * w);
    for p in preds {
        if p.len() != size * size {
            return Err(Error::Shape(format!("slice of {} pixels, expected {size}²", p.len())));
        }
        out.extend(resize_nearest(p, size, size, h, w));
    }
    Ok(out)
}

/// `[B, S, S, 3]` images and flat `[B·S·S]` labels.
pub fn collate(samples: &[&SliceSample]) -> (Tensor<f32>, Vec<u8>) {
    let s = samples[0].size;
    let mut img = Vec::with_capacity(samples.len() * s * s * 3);
    let mut lab = Vec::with_capacity(samples.len() * s * s);
    for smp in samples {
        img.extend_from_slice(&smp.image);
        lab.extend_from_slice(&smp.label);
    }
    (Tensor::from_vec(&[samples.len(), s, s, 3], img), lab)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flip {
    #[default]
    None,
    Horizontal,
    Vertical,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    /// Counter-clockwise quarter turns, 0..=3.
    pub quarter_turns: u8,
    pub flip: Flip,
    /// Extra rotation in degrees; 0 keeps the transform exact.
    pub angle_deg: f64,
}

/// Per-sample RNG from `sha256(seed ‖ epoch ‖ ordinal)`.
pub fn sample_rng(seed: u64, epoch: u64, ordinal: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(epoch.to_le_bytes());
    h.update(ordinal.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

impl AugmentSpec {
    pub fn random(rng: &mut impl Rng, max_angle_deg: f64) -> Self {
        let quarter_turns = rng.random_range(0..4u8);
        let flip = [Flip::None, Flip::Horizontal, Flip::Vertical][rng.random_range(0..3)];
        let angle_deg = if max_angle_deg > 0.0 {
            rng.random_range(-max_angle_deg..=max_angle_deg)
        } else {
            0.0
        };
        Self {
            quarter_turns,
            flip,
            angle_deg,
        }
    }
}

/// Source coordinate for output pixel `(y, x)` under flip-then-rotate.
fn exact_source(spec: &AugmentSpec, s: usize, y: usize, x: usize) -> (usize, usize) {
    let m = s - 1;
    // undo the rotation first (it was applied last)
    let (mut y, mut x) = (y, x);
    for _ in 0..spec.quarter_turns % 4 {
        // output of one CCW turn at (y, x) reads input at (x, m − y)
        (y, x) = (x, m - y);
    }
    match spec.flip {
        Flip::None => (y, x),
        Flip::Horizontal => (y, m - x),
        Flip::Vertical => (m - y, x),
    }
}

/// Applies the same spatial transform to image (bilinear) and label (nearest).
pub fn augment(sample: &SliceSample, spec: &AugmentSpec) -> SliceSample {
    let s = sample.size;
    let mut out = sample.clone();
    for y in 0..s {
        for x in 0..s {
            let (sy, sx) = exact_source(spec, s, y, x);
            let (o, i) = (y * s + x, sy * s + sx);
            out.label[o] = sample.label[i];
            out.image[o * 3..o * 3 + 3].copy_from_slice(&sample.image[i * 3..i * 3 + 3]);
        }
    }
    if spec.angle_deg != 0.0 {
        out = rotate_small(&out, spec.angle_deg);
    }
    out
}

fn rotate_small(sample: &SliceSample, deg: f64) -> SliceSample {
    let s = sample.size;
    let c = (s as f64 - 1.0) / 2.0;
    let (sin, cos) = deg.to_radians().sin_cos();
    let grey: Vec<f32> = sample.image.chunks_exact(3).map(|p| p[0]).collect();
    let mut out = sample.clone();
    for y in 0..s {
        for x in 0..s {
            let (dy, dx) = (y as f64 - c, x as f64 - c);
            let fy = c + cos * dy - sin * dx;
            let fx = c + sin * dy + cos * dx;
            let o = y * s + x;
            let inside = fy >= 0.0 && fx >= 0.0 && fy <= (s - 1) as f64 && fx <= (s - 1) as f64;
            let (g, l) = if inside {
                let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(s - 1), (x0 + 1).min(s - 1));
                let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
                let p = |yy: usize, xx: usize| grey[yy * s + xx] as f64;
                let v = (p(y0, x0) * (1.0 - tx) + p(y0, x1) * tx) * (1.0 - ty) + (p(y1, x0) * (1.0 - tx) + p(y1, x1) * tx) * ty;
                (v as f32, sample.label[fy.round() as usize * s + fx.round() as usize])
            } else {
                (0.0, 0)
            };
            out.image[o * 3..o * 3 + 3].fill(g);
            out.label[o] = l;
        }
    }
    out
}

/// Reads the cases of one split (`None` for every case) in manifest order.
pub fn load_dataset(root: &Path, split: Option<Split>) -> Result<(DatasetManifest, Vec<CaseRecord>)> {
    let manifest = read_dataset_manifest(root)?;
    let entries: Vec<&CaseEntry> = manifest.cases.iter().filter(|c| split.is_none_or(|s| c.split == s)).collect();
    if entries.is_empty() {
        log::warn!("dataset {} has no cases in split {split:?}", root.display());
    }
    let mut cases = Vec::with_capacity(entries.len());
    for e in entries {
        let case = read_case(root, e)?;
        case.validate(manifest.num_classes)?;
        cases.push(case);
    }
    Ok((manifest, cases))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub cases: usize,
    pub num_classes: usize,
    pub size: usize,
    pub min_slices: usize,
    pub max_slices: usize,
    /// Leading fraction of cases assigned to the training split.
    pub train_fraction: f64,
    pub spacing: [f64; 3],
    pub noise: f64,
    /// Distance between the darkest and brightest organ intensity.
    pub intensity_span: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 11,
            cases: 10,
            num_classes: 9,
            size: 224,
            min_slices: 8,
            max_slices: 16,
            train_fraction: 0.6,
            spacing: [2.5, 1.0, 1.0],
            noise: 0.03,
            intensity_span: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipsoid,
    Box,
}

#[derive(Clone, Copy, Debug)]
struct Organ {
    shape: Shape,
    center: [f64; 3],
    radius: [f64; 3],
}

impl Organ {
    fn contains(&self, z: f64, y: f64, x: f64) -> bool {
        let d = [
            (z - self.center[0]) / self.radius[0],
            (y - self.center[1]) / self.radius[1],
            (x - self.center[2]) / self.radius[2],
        ];
        match self.shape {
            Shape::Ellipsoid => d.iter().map(|v| v * v).sum::<f64>() <= 1.0,
            Shape::Box => d.iter().all(|v| v.abs() <= 1.0),
        }
    }
}

/// Class `k`'s mean intensity; background sits at 0.
fn class_intensity(k: usize, num_classes: usize, span: f64) -> f64 {
    0.5 + span * (k - 1) as f64 / num_classes.saturating_sub(2).max(1) as f64
}

/// One phantom: each foreground class is an ellipsoid or box in its own cell
/// of a square grid, so organs never overlap.
pub fn synth_case(cfg: &SynthConfig, index: usize) -> CaseRecord {
    let case_id = format!("case{index:04}");
    let mut rng = crate::param::tensor_rng(cfg.seed, &format!("synth/{case_id}"));
    let s = cfg.size;
    let d = rng.random_range(cfg.min_slices..=cfg.max_slices);
    let organs_n = cfg.num_classes - 1;
    let grid = (organs_n as f64).sqrt().ceil() as usize;
    let cell = s as f64 / grid as f64;
    let mut cells: Vec<usize> = (0..grid * grid).collect();
    for i in (1..cells.len()).rev() {
        cells.swap(i, rng.random_range(0..=i));
    }
    let organs: Vec<Organ> = (0..organs_n)
        .map(|k| {
            let (cy, cx) = ((cells[k] / grid) as f64, (cells[k] % grid) as f64);
            let ry = rng.random_range(0.28..0.42) * cell;
            let rx = rng.random_range(0.28..0.42) * cell;
            let jy = (0.46 * cell - ry).max(0.0);
            let jx = (0.46 * cell - rx).max(0.0);
            // long in z, so every slice shows every organ at a similar size
            let rz = rng.random_range(1.0..1.5) * d as f64;
            Organ {
                shape: if rng.random_bool(0.3) { Shape::Box } else { Shape::Ellipsoid },
                center: [
                    (d as f64 - 1.0) / 2.0 + rng.random_range(-0.1..0.1) * d as f64,
                    (cy + 0.5) * cell + rng.random_range(-jy..=jy),
                    (cx + 0.5) * cell + rng.random_range(-jx..=jx),
                ],
                radius: [rz, ry, rx],
            }
        })
        .collect();
    let offset = rng.random_range(-0.02..0.02);
    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("noise");
    let mut image = Vec::with_capacity(d * s * s);
    let mut label = Vec::with_capacity(d * s * s);
    for z in 0..d {
        for y in 0..s {
            for x in 0..s {
                let (zf, yf, xf) = (z as f64, y as f64 + 0.5, x as f64 + 0.5);
                let k = organs.iter().position(|o| o.contains(zf, yf, xf)).map_or(0, |i| i + 1);
                let base = if k == 0 { 0.0 } else { class_intensity(k, cfg.num_classes, cfg.intensity_span) + offset };
                let n = if cfg.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                image.push((base + n) as f32);
                label.push(k as u8);
            }
        }
    }
    CaseRecord {
        case_id,
        dims: [d, s, s],
        image,
        label,
        spacing: cfg.spacing,
    }
}

/// Writes a phantom dataset under `root`; regeneration with the same config is
/// byte-identical.
pub fn synth_generate(root: &Path, cfg: &SynthConfig) -> Result<DatasetManifest> {
    if cfg.cases == 0 {
        return Err(Error::Config("synth needs at least one case".into()));
    }
    if !(2..=256).contains(&cfg.num_classes) {
        return Err(Error::Config("classes must be in 2..=256".into()));
    }
    if cfg.min_slices == 0 || cfg.min_slices > cfg.max_slices {
        return Err(Error::Config("slice range must satisfy 1 <= min <= max".into()));
    }
    let mut manifest = DatasetManifest::new(cfg.num_classes);
    manifest.class_names = (1..cfg.num_classes).map(class_name).collect();
    let n_train = ((cfg.cases as f64 * cfg.train_fraction).round() as usize).clamp(1, cfg.cases);
    let mut seen = vec![false; cfg.num_classes];
    for i in 0..cfg.cases {
        let case = synth_case(cfg, i);
        for &l in &case.label {
            seen[l as usize] = true;
        }
        write_case(root, &case)?;
        manifest.cases.push(CaseEntry {
            id: case.case_id.clone(),
            split: if i < n_train { Split::Train } else { Split::Test },
            dims: case.dims,
            spacing: case.spacing,
        });
    }
    if let Some(k) = seen.iter().position(|&s| !s) {
        return Err(Error::Data(format!("synthetic dataset is missing class {k}")));
    }
    write_dataset_manifest(root, &manifest)?;
    Ok(manifest)
}
