//! Mask head: a residual mixing block on the fused grid, a stack of stride-2
//! transposed-convolution stages (`output_upscaling`) and a 1×1 class head.
//!
//! Only tensors selected by the trainable patterns receive gradients; the
//! default selects the upscaling stages, and the class head is trainable
//! unless `train_class_head` is off.

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{gelu_backward, gelu_tensor, Conv2d, ConvTranspose2d, LayerNorm};
use crate::param::{normal_init, Module, Param};
use crate::tensor::{Real, Tensor};

pub const PREFIX: &str = "decoder";
pub const DEFAULT_TRAINABLE: &str = "output_upscaling.*";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub num_classes: usize,
    pub in_channels: usize,
    /// Frozen-by-default residual conv block ahead of the upscaling stages.
    pub mixer: bool,
    pub upscale_channels: Vec<usize>,
    /// 2 (stride-2, no overlap) or 4 (stride 2, pad 1).
    pub upscale_kernel: usize,
    /// Regexes matched against names relative to `decoder.`.
    pub trainable_patterns: Vec<String>,
    pub train_class_head: bool,
}

impl DecoderConfig {
    pub fn toy(in_channels: usize, num_classes: usize) -> Self {
        Self {
            num_classes,
            in_channels,
            mixer: true,
            upscale_channels: vec![64, 32, 16, 16],
            upscale_kernel: 2,
            trainable_patterns: vec![DEFAULT_TRAINABLE.to_string()],
            train_class_head: true,
        }
    }

    pub fn upscale_factor(&self) -> usize {
        1 << self.upscale_channels.len()
    }

    pub fn validate(&self, grid: usize, image_size: usize) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(Error::Config("num_classes must be in 2..=256".into()));
        }
        if !matches!(self.upscale_kernel, 2 | 4) {
            return Err(Error::Config("upscale_kernel must be 2 or 4".into()));
        }
        if grid * self.upscale_factor() != image_size {
            return Err(Error::Config(format!(
                "decoder maps grid {grid} to {}, expected image size {image_size}",
                grid * self.upscale_factor()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Stage<T> {
    conv: ConvTranspose2d<T>,
    norm: LayerNorm<T>,
    pre_act: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
struct Mixer<T> {
    conv: Conv2d<T>,
    norm: LayerNorm<T>,
    pre_act: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct Decoder<T> {
    pub config: DecoderConfig,
    mixer: Option<Mixer<T>>,
    stages: Vec<Stage<T>>,
    head: Conv2d<T>,
    grid: usize,
}

fn compile(patterns: &[String]) -> Result<Vec<Regex>> {
    patterns
        .iter()
        .map(|p| Regex::new(&format!("^(?:{p})$")).map_err(|e| Error::Config(format!("bad pattern {p:?}: {e}"))))
        .collect()
}

impl<T: Real> Decoder<T> {
    pub fn new(config: &DecoderConfig, grid: usize, image_size: usize, seed: u64) -> Result<Self> {
        config.validate(grid, image_size)?;
        let c = config;
        let mixer = c.mixer.then(|| Mixer {
            conv: Conv2d::new(&format!("{PREFIX}.mixer.conv"), seed, c.in_channels, c.in_channels, 3, 1, 1, true),
            norm: LayerNorm::new(&format!("{PREFIX}.mixer.norm"), c.in_channels, 1e-6),
            pre_act: None,
        });
        let pad = if c.upscale_kernel == 4 { 1 } else { 0 };
        let mut cin = c.in_channels;
        let stages = c
            .upscale_channels
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let name = format!("{PREFIX}.output_upscaling.{i}");
                let s = Stage {
                    conv: ConvTranspose2d::new(&format!("{name}.conv"), seed, cin, cout, c.upscale_kernel, 2, pad),
                    norm: LayerNorm::new(&format!("{name}.norm"), cout, 1e-6),
                    pre_act: None,
                };
                cin = cout;
                s
            })
            .collect();
        let head_w = normal_init(
            seed,
            &format!("{PREFIX}.class_head.weight"),
            &[1, 1, cin, c.num_classes],
            (1.0 / cin as f64).sqrt(),
        );
        let head_b = Param::filled(format!("{PREFIX}.class_head.bias"), &[c.num_classes], T::zero());
        let mut dec = Self {
            config: c.clone(),
            mixer,
            stages,
            head: Conv2d::from_parts(head_w, Some(head_b), 1, 0),
            grid,
        };
        dec.set_trainable_subset(&c.trainable_patterns.clone())?;
        Ok(dec)
    }

    /// Makes exactly the tensors matching `patterns` (plus the class head when
    /// configured) trainable. Returns `(trainable, frozen)` tensor counts.
    pub fn set_trainable_subset(&mut self, patterns: &[String]) -> Result<(usize, usize)> {
        let res = compile(patterns)?;
        let mut names = Vec::new();
        self.visit(&mut |p| names.push(p.name.clone()));
        let rel = |n: &str| n.strip_prefix(&format!("{PREFIX}.")).unwrap_or(n).to_string();
        for (re, pat) in res.iter().zip(patterns) {
            if !names.iter().any(|n| re.is_match(&rel(n))) {
                return Err(Error::Config(format!("trainable pattern {pat:?} matches no decoder tensor")));
            }
        }
        let head = self.config.train_class_head;
        let (mut on, mut off) = (0, 0);
        self.visit_mut(&mut |p| {
            let r = rel(&p.name);
            let train = res.iter().any(|re| re.is_match(&r)) || (head && r.starts_with("class_head."));
            p.set_trainable(train);
            if train {
                on += 1
            } else {
                off += 1
            }
        });
        self.config.trainable_patterns = patterns.to_vec();
        Ok((on, off))
    }

    fn check_input(&self, fused: &Tensor<T>) -> Result<()> {
        let s = &fused.shape;
        if s.len() != 4 || s[1] != self.grid || s[2] != self.grid || s[3] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "decoder expects [B, {g}, {g}, {c}], got {s:?}",
                g = self.grid,
                c = self.config.in_channels
            )));
        }
        if !fused.all_finite() {
            return Err(Error::NonFiniteActivation("decoder input".into()));
        }
        Ok(())
    }

    /// `[B, H', W', C']` → `[B, S, S, K]` logits.
    pub fn decode(&self, fused: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(fused)?;
        let mut x = fused.clone();
        if let Some(m) = &self.mixer {
            let h = gelu_tensor(&m.norm.infer(&m.conv.infer(&x)));
            x.add_assign(&h);
        }
        for s in &self.stages {
            x = gelu_tensor(&s.norm.infer(&s.conv.infer(&x)));
        }
        Ok(self.head.infer(&x))
    }

    pub fn forward(&mut self, fused: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(fused)?;
        let mut x = fused.clone();
        if let Some(m) = &mut self.mixer {
            let pre = m.norm.forward(&m.conv.forward(&x));
            x.add_assign(&gelu_tensor(&pre));
            m.pre_act = Some(pre);
        }
        for s in &mut self.stages {
            let pre = s.norm.forward(&s.conv.forward(&x));
            x = gelu_tensor(&pre);
            s.pre_act = Some(pre);
        }
        Ok(self.head.forward(&x))
    }

    /// Returns the gradient with respect to the fused input.
    pub fn backward(&mut self, d_logits: &Tensor<T>) -> Tensor<T> {
        let mut d = self.head.backward(d_logits, true).unwrap();
        for s in self.stages.iter_mut().rev() {
            let pre = s.pre_act.take().expect("backward without forward");
            d = s.conv.backward(&s.norm.backward(&gelu_backward(&pre, &d)), true).unwrap();
        }
        if let Some(m) = &mut self.mixer {
            let pre = m.pre_act.take().expect("backward without forward");
            let dh = m.conv.backward(&m.norm.backward(&gelu_backward(&pre, &d)), true).unwrap();
            d.add_assign(&dh);
        }
        d
    }
}

impl<T: Real> Module<T> for Decoder<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        if let Some(m) = &self.mixer {
            m.conv.params().chain(m.norm.params()).for_each(&mut *f);
        }
        for s in &self.stages {
            s.conv.params().chain(s.norm.params()).for_each(&mut *f);
        }
        self.head.params().for_each(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        if let Some(m) = &mut self.mixer {
            m.conv.params_mut().chain(m.norm.params_mut()).for_each(&mut *f);
        }
        for s in &mut self.stages {
            s.conv.params_mut().chain(s.norm.params_mut()).for_each(&mut *f);
        }
        self.head.params_mut().for_each(f);
    }
}

/// Per-pixel argmax over the last axis; ties go to the lower class id.
pub fn predict_mask<T: Real>(logits: &Tensor<T>) -> Vec<u8> {
    let k = *logits.shape.last().expect("non-scalar logits");
    logits
        .data
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best as u8
        })
        .collect()
}
