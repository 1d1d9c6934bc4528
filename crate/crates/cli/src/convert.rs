//! safetensors SAM image-encoder checkpoint -> backbone parameter store.
//!
//! Source tensors use PyTorch layouts: linear weights are `[out, in]`,
//! convolutions `[out, in, kh, kw]`. Position embeddings and relative
//! position tables are resampled when the target grid differs.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use safetensors::{Dtype, SafeTensors};

use sidetune::backbone::{Backbone, BackboneConfig};
use sidetune::tensorio::ParameterStore;

pub struct Converted {
    pub store: ParameterStore,
    pub ignored: usize,
}

fn read_f32(view: &safetensors::tensor::TensorView<'_>, name: &str) -> Result<Vec<f32>> {
    if view.dtype() != Dtype::F32 {
        return Err(sidetune::Error::UnsupportedDtype(format!("{name}: {:?}", view.dtype())).into());
    }
    Ok(view.data().chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
}

/// `[o, i, kh, kw]` -> `[kh, kw, i, o]`.
pub fn oihw_to_hwio(v: &[f32], s: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let (o, i, kh, kw) = (s[0], s[1], s[2], s[3]);
    let mut out = vec![0.0; v.len()];
    for a in 0..o {
        for b in 0..i {
            for y in 0..kh {
                for x in 0..kw {
                    out[((y * kw + x) * i + b) * o + a] = v[((a * i + b) * kh + y) * kw + x];
                }
            }
        }
    }
    (out, vec![kh, kw, i, o])
}

pub fn transpose2(v: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; v.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = v[r * cols + c];
        }
    }
    out
}

/// Linear resampling along the first axis, half-pixel centres.
pub fn resample_rows(v: &[f32], rows: usize, cols: usize, target: usize) -> Vec<f32> {
    if rows == target {
        return v.to_vec();
    }
    let mut out = vec![0.0; target * cols];
    let scale = rows as f64 / target as f64;
    for t in 0..target {
        let src = ((t as f64 + 0.5) * scale - 0.5).clamp(0.0, (rows - 1) as f64);
        let (lo, frac) = (src.floor() as usize, src - src.floor());
        let hi = (lo + 1).min(rows - 1);
        for c in 0..cols {
            out[t * cols + c] = ((1.0 - frac) * v[lo * cols + c] as f64 + frac * v[hi * cols + c] as f64) as f32;
        }
    }
    out
}

/// Bilinear resampling of `[g0, g0, d]` to `[g, g, d]`.
fn resample_grid(v: &[f32], g0: usize, d: usize, g: usize) -> Vec<f32> {
    let rows = resample_rows(v, g0, g0 * d, g);
    let mut out = Vec::with_capacity(g * g * d);
    for r in 0..g {
        out.extend(resample_rows(&rows[r * g0 * d..(r + 1) * g0 * d], g0, d, g));
    }
    out
}

/// Reads `path` and maps every tensor under `prefix` onto the backbone
/// inventory for `config`. Other tensors (prompt encoder, mask decoder) are
/// counted and skipped.
pub fn convert(path: &Path, prefix: &str, config: &BackboneConfig) -> Result<Converted> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let st = SafeTensors::deserialize(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    let (g, d, hd) = (config.grid(), config.embed_dim, config.head_dim());
    let mut mapped: BTreeMap<String, (Vec<f32>, Vec<usize>)> = BTreeMap::new();
    let mut ignored = 0;
    for (name, view) in st.tensors() {
        let Some(rest) = name.strip_prefix(prefix) else {
            ignored += 1;
            continue;
        };
        let block_index = rest.strip_prefix("blocks.").and_then(|r| r.split('.').next()).and_then(|i| i.parse::<usize>().ok());
        if block_index.is_some_and(|i| i >= config.depth) {
            ignored += 1;
            continue;
        }
        let shape = view.shape().to_vec();
        let data = read_f32(&view, &name)?;
        let ours = format!("{}.{rest}", sidetune::backbone::PREFIX);
        let (data, shape) = if shape.len() == 4 && (rest.ends_with("proj.weight") || rest.starts_with("neck.")) {
            oihw_to_hwio(&data, &shape)
        } else if shape.len() == 2 && rest.ends_with(".weight") {
            (transpose2(&data, shape[0], shape[1]), vec![shape[1], shape[0]])
        } else if rest == "pos_embed" {
            if shape.len() != 4 || shape[1] != shape[2] || shape[3] != d {
                bail!("{name}: unexpected shape {shape:?}");
            }
            (resample_grid(&data, shape[1], d, g), vec![1, g, g, d])
        } else if rest.ends_with("rel_pos_h") || rest.ends_with("rel_pos_w") {
            if shape.len() != 2 || shape[1] != hd {
                bail!("{name}: unexpected shape {shape:?}");
            }
            (resample_rows(&data, shape[0], hd, 2 * g - 1), vec![2 * g - 1, hd])
        } else {
            (data, shape)
        };
        mapped.insert(ours, (data, shape));
    }
    let mut store = ParameterStore::new();
    for (name, (data, shape)) in mapped {
        store.insert_f32(&name, &shape, data, false)?;
    }
    // Validates names and shapes against the inventory.
    Backbone::<f32>::from_store(config, &store)?;
    Ok(Converted { store, ignored })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_helpers() {
        let v: Vec<f32> = (0..24).map(|i| i as f32).collect();
        let (h, s) = oihw_to_hwio(&v, &[2, 3, 2, 2]);
        assert_eq!(s, [2, 2, 3, 2]);
        // o=1, i=2, y=1, x=0
        assert_eq!(h[((2) * 3 + 2) * 2 + 1], v[((3 + 2) * 2 + 1) * 2]);
        assert_eq!(transpose2(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, 3), [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(resample_rows(&[0.0, 2.0], 2, 1, 2), [0.0, 2.0]);
        assert_eq!(resample_rows(&[0.0, 4.0], 2, 1, 4), [0.0, 1.0, 3.0, 4.0]);
    }
}
