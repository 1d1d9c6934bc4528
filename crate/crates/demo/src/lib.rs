//! Browser demo. Three operations on one synthetic case:
//! slice viewing with a label overlay, a gate fusion preview over the two
//! encoder feature maps, and DSC/HD95 of a shifted or grown ground truth.
//!
//! Everything returns plain buffers or JSON strings so the page needs no
//! framework. Inner `*_impl` functions carry the logic and are tested natively.

use sidetune::backbone::{FeatureMap, Provenance};
use sidetune::datapipe::{collate, synth_case, to_slices, SynthConfig};
use sidetune::fusion::{Gate, GateMode};
use sidetune::metrics::{class_name, evaluate_case};
use sidetune::model::{LadderModel, ModelConfig};
use sidetune::tensor::Tensor;
use sidetune::tensorio::CaseRecord;
use wasm_bindgen::prelude::*;

/// Label colours, index = class id.
pub const PALETTE: [[u8; 3]; 9] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

pub fn colour(k: u8) -> [u8; 3] {
    PALETTE[k as usize % PALETTE.len()]
}

pub const SIZE: usize = 128;

#[wasm_bindgen]
pub struct Demo {
    case: CaseRecord,
    classes: usize,
    model: LadderModel<f32>,
    /// Per-slice (backbone, side) feature maps, computed on demand.
    features: Vec<Option<(Tensor<f32>, Tensor<f32>)>>,
}

impl Demo {
    pub fn create(seed: u64, classes: usize) -> Result<Demo, String> {
        if !(2..=PALETTE.len()).contains(&classes) {
            return Err(format!("classes must be in 2..={}", PALETTE.len()));
        }
        let cfg = SynthConfig {
            seed,
            cases: 1,
            num_classes: classes,
            size: SIZE,
            min_slices: 6,
            max_slices: 6,
            ..Default::default()
        };
        let case = synth_case(&cfg, 0);
        let mut mc = ModelConfig::toy(classes).with_image_size(SIZE);
        mc.seed = seed;
        let model = LadderModel::new(&mc).map_err(|e| e.to_string())?;
        let d = case.dims[0];
        Ok(Demo {
            case,
            classes,
            model,
            features: vec![None; d],
        })
    }

    fn plane(&self, z: usize) -> Result<(usize, usize), String> {
        let [d, h, w] = self.case.dims;
        if z >= d {
            return Err(format!("slice {z} out of range 0..{d}"));
        }
        Ok((h, w))
    }

    /// Grey slice with the labels blended in at `opacity`, RGBA.
    pub fn slice_impl(&self, z: usize, opacity: f32) -> Result<Vec<u8>, String> {
        let (h, w) = self.plane(z)?;
        let img = &self.case.image[z * h * w..(z + 1) * h * w];
        let lab = &self.case.label[z * h * w..(z + 1) * h * w];
        let (lo, hi) = img.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let span = (hi - lo).max(1e-6);
        let a = opacity.clamp(0.0, 1.0);
        let mut out = Vec::with_capacity(h * w * 4);
        for (&v, &k) in img.iter().zip(lab) {
            let g = (v - lo) / span * 255.0;
            let c = colour(k);
            for ch in c {
                let m = if k == 0 { g } else { (1.0 - a) * g + a * ch as f32 };
                out.push(m.round() as u8);
            }
            out.push(255);
        }
        Ok(out)
    }

    fn features_for(&mut self, z: usize) -> Result<&(Tensor<f32>, Tensor<f32>), String> {
        self.plane(z)?;
        if self.features[z].is_none() {
            let slices = to_slices(&self.case, SIZE);
            let (images, _) = collate(&[&slices[z]]);
            let xb = self.model.backbone.encode_image(&images).map_err(|e| e.to_string())?.data;
            let xs = self.model.side.infer(&images);
            self.features[z] = Some((xb, xs));
        }
        Ok(self.features[z].as_ref().unwrap())
    }

    /// Side length of the feature grid.
    pub fn grid(&self) -> usize {
        self.model.config.backbone.grid()
    }

    /// Fused map at gate value `alpha` as an RGBA image of the grid: three
    /// channels shown as red, green and blue, scaled over both branches so
    /// colours stay comparable as alpha moves.
    pub fn fusion_impl(&mut self, z: usize, alpha: f32) -> Result<Vec<u8>, String> {
        let (xb, xs) = self.features_for(z)?.clone();
        let gate = gate_at(alpha);
        let b = FeatureMap::new(xb.clone(), Provenance::Backbone);
        let s = FeatureMap::new(xs.clone(), Provenance::Side);
        let fused = gate.fuse(Some(&b), Some(&s)).map_err(|e| e.to_string())?.data;
        let c = *fused.shape.last().unwrap();
        let mut lo = [f32::MAX; 3];
        let mut hi = [f32::MIN; 3];
        for t in [&xb, &xs] {
            for px in t.data.chunks_exact(c) {
                for i in 0..3 {
                    lo[i] = lo[i].min(px[i]);
                    hi[i] = hi[i].max(px[i]);
                }
            }
        }
        let mut out = Vec::with_capacity(fused.len() / c * 4);
        for px in fused.data.chunks_exact(c) {
            for i in 0..3 {
                let v = (px[i] - lo[i]) / (hi[i] - lo[i]).max(1e-6);
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            out.push(255);
        }
        Ok(out)
    }

    /// Ground truth of slice `z` shifted by (dx, dy) pixels, then grown
    /// (`grow > 0`) or shrunk (`grow < 0`) by a square of that radius.
    pub fn perturbed(&self, z: usize, dx: i32, dy: i32, grow: i32) -> Result<Vec<u8>, String> {
        let (h, w) = self.plane(z)?;
        let gt = &self.case.label[z * h * w..(z + 1) * h * w];
        let mut out = vec![0u8; h * w];
        for k in 1..self.classes as u8 {
            let mask: Vec<bool> = gt.iter().map(|&v| v == k).collect();
            let mask = morph(&shift(&mask, h, w, dx, dy), h, w, grow);
            for (o, m) in out.iter_mut().zip(mask) {
                if m {
                    *o = k;
                }
            }
        }
        Ok(out)
    }

    /// Per-class DSC and HD95 of the perturbed mask against the truth, JSON.
    pub fn metrics_impl(&self, z: usize, dx: i32, dy: i32, grow: i32) -> Result<String, String> {
        let (h, w) = self.plane(z)?;
        let pred = self.perturbed(z, dx, dy, grow)?;
        let gt = &self.case.label[z * h * w..(z + 1) * h * w];
        let [_, sy, sx] = self.case.spacing;
        let m = evaluate_case(&self.case.case_id, &pred, gt, [1, h, w], [1.0, sy, sx], self.classes)
            .map_err(|e| e.to_string())?;
        let present: Vec<usize> = (1..self.classes).filter(|&k| gt.contains(&(k as u8))).collect();
        let rows: Vec<serde_json::Value> = present
            .iter()
            .map(|&k| serde_json::json!({"class": k, "name": class_name(k), "dsc": m.dsc[k - 1], "hd95": m.hd95[k - 1]}))
            .collect();
        let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let mean_dsc = mean(present.iter().map(|&k| m.dsc[k - 1]).collect());
        let mean_hd = mean(present.iter().filter_map(|&k| m.hd95[k - 1]).collect());
        Ok(serde_json::json!({"classes": rows, "mean_dsc": mean_dsc, "mean_hd95": mean_hd}).to_string())
    }

    /// Perturbed mask in label colours, RGBA.
    pub fn perturbed_impl(&self, z: usize, dx: i32, dy: i32, grow: i32) -> Result<Vec<u8>, String> {
        Ok(self
            .perturbed(z, dx, dy, grow)?
            .into_iter()
            .flat_map(|k| {
                let [r, g, b] = colour(k);
                [r, g, b, 255]
            })
            .collect())
    }
}

/// Pinned modes at the endpoints so they return one branch unchanged.
fn gate_at(alpha: f32) -> Gate<f32> {
    if alpha <= 0.0 {
        Gate::new(GateMode::SideOnly)
    } else if alpha >= 1.0 {
        Gate::new(GateMode::BackboneOnly)
    } else {
        let mut g = Gate::new(GateMode::Free);
        g.logit.value[0] = (alpha / (1.0 - alpha)).ln();
        g
    }
}

pub fn shift(mask: &[bool], h: usize, w: usize, dx: i32, dy: i32) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h as i32 {
        for x in 0..w as i32 {
            let (sy, sx) = (y - dy, x - dx);
            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                out[y as usize * w + x as usize] = mask[sy as usize * w + sx as usize];
            }
        }
    }
    out
}

/// Dilation (`r > 0`) or erosion (`r < 0`) with a (2|r|+1)² square.
pub fn morph(mask: &[bool], h: usize, w: usize, r: i32) -> Vec<bool> {
    if r == 0 {
        return mask.to_vec();
    }
    let grow = r > 0;
    let r = r.abs();
    let mut out = vec![false; h * w];
    for y in 0..h as i32 {
        for x in 0..w as i32 {
            let mut hit = !grow;
            'win: for yy in y - r..=y + r {
                for xx in x - r..=x + r {
                    let inside = yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w;
                    let v = inside && mask[yy as usize * w + xx as usize];
                    if grow && v {
                        hit = true;
                        break 'win;
                    }
                    if !grow && !v {
                        hit = false;
                        break 'win;
                    }
                }
            }
            out[y as usize * w + x as usize] = hit;
        }
    }
    out
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, classes: usize) -> Result<Demo, JsError> {
        Demo::create(seed as u64, classes).map_err(|e| JsError::new(&e))
    }

    pub fn width(&self) -> usize {
        self.case.dims[2]
    }

    pub fn height(&self) -> usize {
        self.case.dims[1]
    }

    pub fn depth(&self) -> usize {
        self.case.dims[0]
    }

    #[wasm_bindgen(js_name = featureGrid)]
    pub fn feature_grid(&self) -> usize {
        self.grid()
    }

    pub fn slice(&self, z: usize, opacity: f32) -> Result<Vec<u8>, JsError> {
        self.slice_impl(z, opacity).map_err(|e| JsError::new(&e))
    }

    pub fn fusion(&mut self, z: usize, alpha: f32) -> Result<Vec<u8>, JsError> {
        self.fusion_impl(z, alpha).map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(js_name = perturbedMask)]
    pub fn perturbed_mask(&self, z: usize, dx: i32, dy: i32, grow: i32) -> Result<Vec<u8>, JsError> {
        self.perturbed_impl(z, dx, dy, grow).map_err(|e| JsError::new(&e))
    }

    pub fn metrics(&self, z: usize, dx: i32, dy: i32, grow: i32) -> Result<String, JsError> {
        self.metrics_impl(z, dx, dy, grow).map_err(|e| JsError::new(&e))
    }
}
