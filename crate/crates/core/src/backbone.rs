//! Frozen foundation image encoder: patch embedding, transformer blocks and a
//! convolutional neck producing a `[B, H', W', C']` feature map.
//!
//! Parameter names follow the SAM image encoder with the `image_encoder.`
//! prefix replaced by `backbone.`, so converted checkpoints map one to one.
//! The backbone has no backward pass and never allocates gradient storage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{gelu_tensor, Conv2d, LayerNorm, Linear};
use crate::param::{normal_init, Module, Param};
use crate::tensor::{matmul, matmul_nt, Real, Tensor};
use crate::tensorio::{load_checkpoint, ParameterStore};

pub const PREFIX: &str = "backbone";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneVariant {
    Toy,
    VitB,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub out_channels: usize,
    /// Decomposed relative position terms in attention (SAM's encoder uses them).
    pub use_rel_pos: bool,
}

impl BackboneConfig {
    pub fn toy() -> Self {
        Self {
            variant: BackboneVariant::Toy,
            image_size: 224,
            patch_size: 16,
            depth: 2,
            embed_dim: 64,
            num_heads: 4,
            mlp_ratio: 4,
            out_channels: 64,
            use_rel_pos: false,
        }
    }

    /// SAM ViT-B encoder geometry at the given input size.
    pub fn vit_b(image_size: usize) -> Self {
        Self {
            variant: BackboneVariant::VitB,
            image_size,
            patch_size: 16,
            depth: 12,
            embed_dim: 768,
            num_heads: 12,
            mlp_ratio: 4,
            out_channels: 256,
            use_rel_pos: true,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config("embed_dim must be divisible by num_heads".into()));
        }
        if self.depth == 0 || self.out_channels == 0 {
            return Err(Error::Config("depth and out_channels must be positive".into()));
        }
        Ok(())
    }

    /// Every tensor name and shape the variant requires, in canonical order.
    pub fn inventory(&self) -> Vec<(String, Vec<usize>)> {
        let (d, g, hd) = (self.embed_dim, self.grid(), self.head_dim());
        let mut v = vec![
            (format!("{PREFIX}.patch_embed.proj.weight"), vec![self.patch_size, self.patch_size, 3, d]),
            (format!("{PREFIX}.patch_embed.proj.bias"), vec![d]),
            (format!("{PREFIX}.pos_embed"), vec![1, g, g, d]),
            (format!("{PREFIX}.neck.0.weight"), vec![1, 1, d, self.out_channels]),
            (format!("{PREFIX}.neck.1.weight"), vec![self.out_channels]),
            (format!("{PREFIX}.neck.1.bias"), vec![self.out_channels]),
            (format!("{PREFIX}.neck.2.weight"), vec![3, 3, self.out_channels, self.out_channels]),
            (format!("{PREFIX}.neck.3.weight"), vec![self.out_channels]),
            (format!("{PREFIX}.neck.3.bias"), vec![self.out_channels]),
        ];
        for i in 0..self.depth {
            let b = format!("{PREFIX}.blocks.{i}");
            v.push((format!("{b}.norm1.weight"), vec![d]));
            v.push((format!("{b}.norm1.bias"), vec![d]));
            v.push((format!("{b}.attn.qkv.weight"), vec![d, 3 * d]));
            v.push((format!("{b}.attn.qkv.bias"), vec![3 * d]));
            v.push((format!("{b}.attn.proj.weight"), vec![d, d]));
            v.push((format!("{b}.attn.proj.bias"), vec![d]));
            if self.use_rel_pos {
                v.push((format!("{b}.attn.rel_pos_h"), vec![2 * g - 1, hd]));
                v.push((format!("{b}.attn.rel_pos_w"), vec![2 * g - 1, hd]));
            }
            v.push((format!("{b}.norm2.weight"), vec![d]));
            v.push((format!("{b}.norm2.bias"), vec![d]));
            v.push((format!("{b}.mlp.lin1.weight"), vec![d, self.mlp_ratio * d]));
            v.push((format!("{b}.mlp.lin1.bias"), vec![self.mlp_ratio * d]));
            v.push((format!("{b}.mlp.lin2.weight"), vec![self.mlp_ratio * d, d]));
            v.push((format!("{b}.mlp.lin2.bias"), vec![d]));
        }
        v.sort();
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.inventory().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Backbone,
    Side,
    Fused,
}

/// Dense `[B, H', W', C']` activation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub data: Tensor<T>,
    pub provenance: Provenance,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(data: Tensor<T>, provenance: Provenance) -> Self {
        Self { data, provenance }
    }

    pub fn shape(&self) -> &[usize] {
        &self.data.shape
    }
}

#[derive(Clone, Debug)]
struct Attention<T> {
    qkv: Linear<T>,
    proj: Linear<T>,
    rel_pos_h: Option<Param<T>>,
    rel_pos_w: Option<Param<T>>,
}

#[derive(Clone, Debug)]
struct Block<T> {
    norm1: LayerNorm<T>,
    attn: Attention<T>,
    norm2: LayerNorm<T>,
    lin1: Linear<T>,
    lin2: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct Backbone<T> {
    pub config: BackboneConfig,
    patch_embed: Conv2d<T>,
    pos_embed: Param<T>,
    blocks: Vec<Block<T>>,
    neck0: Conv2d<T>,
    neck1: LayerNorm<T>,
    neck2: Conv2d<T>,
    neck3: LayerNorm<T>,
}

impl<T: Real> Backbone<T> {
    /// Seeded random weights at the configured shapes.
    pub fn random(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let (d, g, hd) = (c.embed_dim, c.grid(), c.head_dim());
        let p = |s: &str| format!("{PREFIX}.{s}");
        let patch_w = normal_init(
            seed,
            &p("patch_embed.proj.weight"),
            &[c.patch_size, c.patch_size, 3, d],
            (1.0 / (3 * c.patch_size * c.patch_size) as f64).sqrt(),
        );
        let patch_embed = Conv2d::from_parts(
            patch_w,
            Some(Param::filled(p("patch_embed.proj.bias"), &[d], T::zero())),
            c.patch_size,
            0,
        );
        let blocks = (0..c.depth)
            .map(|i| {
                let b = p(&format!("blocks.{i}"));
                let rel = |axis: &str| {
                    c.use_rel_pos
                        .then(|| normal_init(seed, &format!("{b}.attn.rel_pos_{axis}"), &[2 * g - 1, hd], 0.02))
                };
                Block {
                    norm1: LayerNorm::new(&format!("{b}.norm1"), d, 1e-6),
                    attn: Attention {
                        qkv: Linear::new(&format!("{b}.attn.qkv"), seed, d, 3 * d),
                        proj: Linear::new(&format!("{b}.attn.proj"), seed, d, d),
                        rel_pos_h: rel("h"),
                        rel_pos_w: rel("w"),
                    },
                    norm2: LayerNorm::new(&format!("{b}.norm2"), d, 1e-6),
                    lin1: Linear::new(&format!("{b}.mlp.lin1"), seed, d, c.mlp_ratio * d),
                    lin2: Linear::new(&format!("{b}.mlp.lin2"), seed, c.mlp_ratio * d, d),
                }
            })
            .collect();
        let oc = c.out_channels;
        let neck0_w = normal_init(seed, &p("neck.0.weight"), &[1, 1, d, oc], (1.0 / d as f64).sqrt());
        let neck2_w = normal_init(seed, &p("neck.2.weight"), &[3, 3, oc, oc], (1.0 / (9 * oc) as f64).sqrt());
        let bb = Self {
            config: c.clone(),
            patch_embed,
            pos_embed: normal_init(seed, &p("pos_embed"), &[1, g, g, d], 0.02),
            blocks,
            neck0: Conv2d::from_parts(neck0_w, None, 1, 0),
            neck1: LayerNorm::new(&p("neck.1"), oc, 1e-6),
            neck2: Conv2d::from_parts(neck2_w, None, 1, 1),
            neck3: LayerNorm::new(&p("neck.3"), oc, 1e-6),
        };
        debug_assert_eq!(bb.num_weights(), c.parameter_count());
        Ok(bb)
    }

    /// Builds the backbone from a store holding exactly the variant's inventory.
    pub fn from_store(config: &BackboneConfig, store: &ParameterStore) -> Result<Self> {
        let mut bb = Self::random(config, 0)?;
        let inventory = config.inventory();
        let expected: std::collections::BTreeSet<&str> = inventory.iter().map(|(n, _)| n.as_str()).collect();
        let present: std::collections::BTreeSet<&str> =
            store.names().filter(|n| n.starts_with(&format!("{PREFIX}."))).collect();
        let missing: Vec<String> = expected.difference(&present).map(|s| s.to_string()).collect();
        let extra: Vec<String> = present.difference(&expected).map(|s| s.to_string()).collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::Inventory { missing, extra });
        }
        let mut err = None;
        bb.visit_mut(&mut |p| {
            let t = &store.get(&p.name).expect("inventory checked").record;
            match t.data.as_f32() {
                Some(v) if t.shape == p.shape => p.value = v.iter().map(|&x| T::lit(x as f64)).collect(),
                _ => {
                    err.get_or_insert(Error::Shape(format!(
                        "{}: expected f32 {:?}, found {} {:?}",
                        p.name,
                        p.shape,
                        t.dtype().as_str(),
                        t.shape
                    )));
                }
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(bb),
        }
    }

    /// Runs the encoder on normalized `[B, S, S, 3]` images.
    pub fn encode_image(&self, images: &Tensor<T>) -> Result<FeatureMap<T>> {
        let c = &self.config;
        if images.shape.len() != 4 || images.shape[1] != c.image_size || images.shape[2] != c.image_size || images.shape[3] != 3 {
            return Err(Error::Shape(format!(
                "image size must equal configured image_size {}: got {:?}",
                c.image_size, images.shape
            )));
        }
        if !images.all_finite() {
            return Err(Error::NonFiniteActivation("backbone input".into()));
        }
        let mut x = self.patch_embed.infer(images);
        let per_image = self.pos_embed.value.len();
        for chunk in x.data.chunks_exact_mut(per_image) {
            for (v, &p) in chunk.iter_mut().zip(&self.pos_embed.value) {
                *v += p;
            }
        }
        for block in &self.blocks {
            let a = self.attention(&block.attn, &block.norm1.infer(&x));
            x.add_assign(&a);
            let h = block.lin2.infer(&gelu_tensor(&block.lin1.infer(&block.norm2.infer(&x))));
            x.add_assign(&h);
        }
        let y = self.neck3.infer(&self.neck2.infer(&self.neck1.infer(&self.neck0.infer(&x))));
        Ok(FeatureMap::new(y, Provenance::Backbone))
    }

    fn attention(&self, attn: &Attention<T>, x: &Tensor<T>) -> Tensor<T> {
        let (b, g, _, d) = x.dims4();
        let n = g * g;
        let heads = self.config.num_heads;
        let hd = d / heads;
        let qkv = attn.qkv.infer(x);
        let scale = T::one() / T::of(hd).sqrt();
        let mut out = vec![T::zero(); b * n * d];
        let mut q = vec![T::zero(); n * hd];
        let mut k = vec![T::zero(); n * hd];
        let mut v = vec![T::zero(); n * hd];
        let mut scores = vec![T::zero(); n * n];
        let mut o = vec![T::zero(); n * hd];
        for bi in 0..b {
            let base = bi * n * 3 * d;
            for h in 0..heads {
                for t in 0..n {
                    let row = base + t * 3 * d;
                    q[t * hd..(t + 1) * hd].copy_from_slice(&qkv.data[row + h * hd..row + (h + 1) * hd]);
                    k[t * hd..(t + 1) * hd].copy_from_slice(&qkv.data[row + d + h * hd..row + d + (h + 1) * hd]);
                    v[t * hd..(t + 1) * hd]
                        .copy_from_slice(&qkv.data[row + 2 * d + h * hd..row + 2 * d + (h + 1) * hd]);
                }
                matmul_nt(&q, &k, &mut scores, n, hd, n, false);
                scores.iter_mut().for_each(|s| *s *= scale);
                if let (Some(rh), Some(rw)) = (&attn.rel_pos_h, &attn.rel_pos_w) {
                    add_decomposed_rel_pos(&mut scores, &q, &rh.value, &rw.value, g, hd);
                }
                for row in scores.chunks_exact_mut(n) {
                    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for s in row.iter_mut() {
                        *s = (*s - m).exp();
                        sum += *s;
                    }
                    row.iter_mut().for_each(|s| *s /= sum);
                }
                matmul(&scores, &v, &mut o, n, n, hd, false);
                for t in 0..n {
                    let dst = (bi * n + t) * d + h * hd;
                    out[dst..dst + hd].copy_from_slice(&o[t * hd..(t + 1) * hd]);
                }
            }
        }
        attn.proj.infer(&Tensor::from_vec(&[b, g, g, d], out))
    }
}

/// `scores[(qy,qx),(ky,kx)] += q·Rh[qy-ky+g-1] + q·Rw[qx-kx+g-1]`.
fn add_decomposed_rel_pos<T: Real>(scores: &mut [T], q: &[T], rh: &[T], rw: &[T], g: usize, hd: usize) {
    let n = g * g;
    let dot = |a: &[T], b: &[T]| a.iter().zip(b).map(|(&x, &y)| x * y).sum::<T>();
    let mut th = vec![T::zero(); g];
    let mut tw = vec![T::zero(); g];
    for qi in 0..n {
        let (qy, qx) = (qi / g, qi % g);
        let qv = &q[qi * hd..(qi + 1) * hd];
        for kk in 0..g {
            let ih = qy + g - 1 - kk;
            let iw = qx + g - 1 - kk;
            th[kk] = dot(qv, &rh[ih * hd..(ih + 1) * hd]);
            tw[kk] = dot(qv, &rw[iw * hd..(iw + 1) * hd]);
        }
        let row = &mut scores[qi * n..(qi + 1) * n];
        for ky in 0..g {
            for kx in 0..g {
                row[ky * g + kx] += th[ky] + tw[kx];
            }
        }
    }
}

impl<T: Real> Module<T> for Backbone<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.patch_embed.params().for_each(&mut *f);
        f(&self.pos_embed);
        for b in &self.blocks {
            b.norm1.params().for_each(&mut *f);
            b.attn.qkv.params().chain(b.attn.proj.params()).for_each(&mut *f);
            b.attn.rel_pos_h.iter().chain(b.attn.rel_pos_w.iter()).for_each(&mut *f);
            b.norm2.params().for_each(&mut *f);
            b.lin1.params().chain(b.lin2.params()).for_each(&mut *f);
        }
        self.neck0.params().chain(self.neck1.params()).for_each(&mut *f);
        self.neck2.params().chain(self.neck3.params()).for_each(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.patch_embed.params_mut().for_each(&mut *f);
        f(&mut self.pos_embed);
        for b in &mut self.blocks {
            b.norm1.params_mut().for_each(&mut *f);
            b.attn.qkv.params_mut().chain(b.attn.proj.params_mut()).for_each(&mut *f);
            b.attn.rel_pos_h.iter_mut().chain(b.attn.rel_pos_w.iter_mut()).for_each(&mut *f);
            b.norm2.params_mut().for_each(&mut *f);
            b.lin1.params_mut().chain(b.lin2.params_mut()).for_each(&mut *f);
        }
        self.neck0.params_mut().chain(self.neck1.params_mut()).for_each(&mut *f);
        self.neck2.params_mut().chain(self.neck3.params_mut()).for_each(f);
    }
}

/// Source of backbone weights.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WeightSource<'a> {
    Seeded(u64),
    Checkpoint(&'a Path),
}

/// Produces a frozen-flagged backbone store for the variant, either from a
/// converted checkpoint (validated against the variant inventory) or from a
/// seeded RNG.
pub fn import_foundation_weights(config: &BackboneConfig, source: WeightSource<'_>) -> Result<ParameterStore> {
    let backbone: Backbone<f32> = match source {
        WeightSource::Seeded(seed) => Backbone::random(config, seed)?,
        WeightSource::Checkpoint(path) => {
            let (store, _) = load_checkpoint(path)?;
            Backbone::from_store(config, &store)?
        }
    };
    let mut store = ParameterStore::new();
    let mut err = None;
    backbone.visit(&mut |p| {
        if let Err(e) = store.insert_f32(&p.name, &p.shape, p.value.clone(), false) {
            err.get_or_insert(e);
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(store),
    }
}
