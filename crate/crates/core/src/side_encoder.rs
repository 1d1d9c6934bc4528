//! Trainable complementary CNN: a residual network truncated after its third
//! stage so its output grid matches the backbone's, plus a 1×1 projection to
//! the backbone's channel width.
//!
//! Counted layers are the stem convolution and the two 3×3 convolutions of
//! every basic block. Downsampling shortcuts and the output projection are
//! not counted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{relu_backward, relu_tensor, BatchNorm2d, Conv2d, MaxPool2d};
use crate::param::{normal_init, Module, Param};
use crate::tensor::{Real, Tensor};
use crate::tensorio::{ParameterStore, TensorData};

pub const REQUIRED_CONV_LAYERS: usize = 13;
pub const PREFIX: &str = "side";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SideEncoderConfig {
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_pool: bool,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub conv_layer_count: usize,
    pub match_channels: usize,
    /// Update batch-norm running statistics while training.
    pub bn_update_stats: bool,
}

impl SideEncoderConfig {
    /// Desk-scale widths, ResNet18 topology through stage 3.
    pub fn toy(match_channels: usize) -> Self {
        Self {
            stem_channels: 16,
            stem_kernel: 7,
            stem_stride: 2,
            stem_pool: true,
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: vec![2, 2, 2],
            stage_strides: vec![1, 2, 2],
            conv_layer_count: REQUIRED_CONV_LAYERS,
            match_channels,
            bn_update_stats: true,
        }
    }

    /// Full ResNet18 widths (64/128/256) through stage 3.
    pub fn resnet18(match_channels: usize) -> Self {
        Self {
            stem_channels: 64,
            stage_channels: vec![64, 128, 256],
            ..Self::toy(match_channels)
        }
    }

    pub fn counted_convs(&self) -> usize {
        1 + 2 * self.blocks_per_stage.iter().sum::<usize>()
    }

    pub fn total_stride(&self) -> usize {
        self.stem_stride * if self.stem_pool { 2 } else { 1 } * self.stage_strides.iter().product::<usize>()
    }

    /// Checks the layer budget and that the output grid is `image_size / grid` wide.
    pub fn validate(&self, image_size: usize, grid: usize) -> Result<()> {
        if self.stage_channels.len() != self.blocks_per_stage.len()
            || self.stage_channels.len() != self.stage_strides.len()
        {
            return Err(Error::Config(
                "stage_channels, blocks_per_stage and stage_strides must have equal length".into(),
            ));
        }
        if self.conv_layer_count != REQUIRED_CONV_LAYERS || self.counted_convs() != REQUIRED_CONV_LAYERS {
            return Err(Error::Config(format!(
                "conv_layer_count must be 13 (configured {}, structure has {})",
                self.conv_layer_count,
                self.counted_convs()
            )));
        }
        if grid == 0 || image_size % grid != 0 || self.total_stride() != image_size / grid {
            return Err(Error::Config(format!(
                "output grid mismatch with backbone: stride {} maps {image_size} to {}, backbone grid is {grid}",
                self.total_stride(),
                image_size / self.total_stride().max(1)
            )));
        }
        if self.stem_channels == 0 || self.match_channels == 0 || self.stage_channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct BasicBlock<T> {
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    downsample: Option<(Conv2d<T>, BatchNorm2d<T>)>,
    h1: Option<Tensor<T>>,
    out: Option<Tensor<T>>,
}

impl<T: Real> BasicBlock<T> {
    fn new(name: &str, seed: u64, cin: usize, cout: usize, stride: usize) -> Self {
        let downsample = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(&format!("{name}.downsample.conv"), seed, cin, cout, 1, stride, 0, false),
                BatchNorm2d::new(&format!("{name}.downsample.bn"), cout),
            )
        });
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), seed, cin, cout, 3, stride, 1, false),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), cout),
            conv2: Conv2d::new(&format!("{name}.conv2"), seed, cout, cout, 3, 1, 1, false),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), cout),
            downsample,
            h1: None,
            out: None,
        }
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let h = relu_tensor(&self.bn1.infer(&self.conv1.infer(x)));
        let mut y = self.bn2.infer(&self.conv2.infer(&h));
        match &self.downsample {
            Some((c, b)) => y.add_assign(&b.infer(&c.infer(x))),
            None => y.add_assign(x),
        }
        relu_tensor(&y)
    }

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let h = relu_tensor(&self.bn1.forward(&self.conv1.forward(x)));
        let mut y = self.bn2.forward(&self.conv2.forward(&h));
        match &mut self.downsample {
            Some((c, b)) => y.add_assign(&b.forward(&c.forward(x))),
            None => y.add_assign(x),
        }
        let y = relu_tensor(&y);
        self.h1 = Some(h);
        self.out = Some(y.clone());
        y
    }

    fn backward(&mut self, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let out = self.out.take().expect("backward without forward");
        let h1 = self.h1.take().expect("backward without forward");
        let d = relu_backward(&out, dy);
        let dh = self.conv2.backward(&self.bn2.backward(&d), true).unwrap();
        let dh = relu_backward(&h1, &dh);
        let dx = self.conv1.backward(&self.bn1.backward(&dh), need_dx);
        let dshort = match &mut self.downsample {
            Some((c, b)) => {
                let db = b.backward(&d);
                c.backward(&db, need_dx)
            }
            None => need_dx.then_some(d),
        };
        match (dx, dshort) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b);
                Some(a)
            }
            _ => None,
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv1.params().chain(self.bn1.params()).for_each(&mut *f);
        self.conv2.params().chain(self.bn2.params()).for_each(&mut *f);
        if let Some((c, b)) = &self.downsample {
            c.params().chain(b.params()).for_each(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv1.params_mut().chain(self.bn1.params_mut()).for_each(&mut *f);
        self.conv2.params_mut().chain(self.bn2.params_mut()).for_each(&mut *f);
        if let Some((c, b)) = &mut self.downsample {
            c.params_mut().chain(b.params_mut()).for_each(f);
        }
    }

    fn for_each_bn(&mut self, f: &mut dyn FnMut(&mut BatchNorm2d<T>)) {
        f(&mut self.bn1);
        f(&mut self.bn2);
        if let Some((_, b)) = &mut self.downsample {
            f(b);
        }
    }
}

#[derive(Clone, Debug)]
pub struct SideEncoder<T> {
    pub config: SideEncoderConfig,
    stem_conv: Conv2d<T>,
    stem_bn: BatchNorm2d<T>,
    pool: Option<MaxPool2d>,
    stages: Vec<Vec<BasicBlock<T>>>,
    proj: Conv2d<T>,
    stem_out: Option<Tensor<T>>,
}

impl<T: Real> SideEncoder<T> {
    /// Builds the encoder with seeded random weights. All weights start trainable.
    pub fn new(config: &SideEncoderConfig, image_size: usize, grid: usize, seed: u64) -> Result<Self> {
        config.validate(image_size, grid)?;
        let c = config;
        let pad = c.stem_kernel / 2;
        let stem_conv = Conv2d::new(
            &format!("{PREFIX}.stem.conv"),
            seed,
            3,
            c.stem_channels,
            c.stem_kernel,
            c.stem_stride,
            pad,
            false,
        );
        let mut stages = Vec::new();
        let mut cin = c.stem_channels;
        for (si, ((&cout, &blocks), &stride)) in c
            .stage_channels
            .iter()
            .zip(&c.blocks_per_stage)
            .zip(&c.stage_strides)
            .enumerate()
        {
            let mut stage = Vec::new();
            for bi in 0..blocks {
                let name = format!("{PREFIX}.stage{}.block{bi}", si + 1);
                let s = if bi == 0 { stride } else { 1 };
                stage.push(BasicBlock::new(&name, seed, cin, cout, s));
                cin = cout;
            }
            stages.push(stage);
        }
        let proj_w = normal_init(
            seed,
            &format!("{PREFIX}.proj.weight"),
            &[1, 1, cin, c.match_channels],
            (1.0 / cin as f64).sqrt(),
        );
        let proj_b = Param::filled(format!("{PREFIX}.proj.bias"), &[c.match_channels], T::zero());
        let mut enc = Self {
            config: c.clone(),
            stem_conv,
            stem_bn: BatchNorm2d::new(&format!("{PREFIX}.stem.bn"), c.stem_channels),
            pool: c.stem_pool.then(|| MaxPool2d::new(3, 2, 1)),
            stages,
            proj: Conv2d::from_parts(proj_w, Some(proj_b), 1, 0),
            stem_out: None,
        };
        enc.set_bn_update(c.bn_update_stats);
        enc.set_all_trainable(true);
        Ok(enc)
    }

    fn for_each_bn(&mut self, f: &mut dyn FnMut(&mut BatchNorm2d<T>)) {
        f(&mut self.stem_bn);
        for b in self.stages.iter_mut().flatten() {
            b.for_each_bn(f);
        }
    }

    pub fn set_bn_update(&mut self, on: bool) {
        self.config.bn_update_stats = on;
        self.for_each_bn(&mut |b| b.update_stats = on);
    }

    /// Re-estimates every running mean and variance as the plain average of
    /// per-batch statistics over `batches`, leaving weights untouched.
    pub fn recalibrate_bn<'a>(&mut self, batches: impl IntoIterator<Item = &'a Tensor<T>>) {
        let saved = self.config.bn_update_stats;
        self.for_each_bn(&mut |b| b.update_stats = true);
        for (i, x) in batches.into_iter().enumerate() {
            let m = 1.0 / (i + 1) as f64;
            self.for_each_bn(&mut |b| b.momentum = m);
            self.forward(x);
        }
        self.for_each_bn(&mut |b| b.momentum = 0.1);
        self.set_bn_update(saved);
        self.stem_out = None;
    }

    /// Zeroes the output projection so the encoder emits an all-zero map.
    pub fn zero_projection(&mut self) {
        self.proj.params_mut().for_each(|p| p.value.iter_mut().for_each(|v| *v = T::zero()));
    }

    pub fn infer(&self, images: &Tensor<T>) -> Tensor<T> {
        let mut x = relu_tensor(&self.stem_bn.infer(&self.stem_conv.infer(images)));
        if let Some(p) = &self.pool {
            x = p.infer(&x);
        }
        for b in self.stages.iter().flatten() {
            x = b.infer(&x);
        }
        self.proj.infer(&x)
    }

    pub fn forward(&mut self, images: &Tensor<T>) -> Tensor<T> {
        let s = relu_tensor(&self.stem_bn.forward(&self.stem_conv.forward(images)));
        let mut x = match &mut self.pool {
            Some(p) => p.forward(&s),
            None => s.clone(),
        };
        self.stem_out = Some(s);
        for b in self.stages.iter_mut().flatten() {
            x = b.forward(&x);
        }
        self.proj.forward(&x)
    }

    /// Propagates to every weight; the input gradient is never needed.
    pub fn backward(&mut self, dy: &Tensor<T>) {
        let mut d = self.proj.backward(dy, true).unwrap();
        for b in self.stages.iter_mut().flatten().rev() {
            d = b.backward(&d, true).unwrap();
        }
        if let Some(p) = &mut self.pool {
            d = p.backward(&d);
        }
        let s = self.stem_out.take().expect("backward without forward");
        let d = relu_backward(&s, &d);
        let d = self.stem_bn.backward(&d);
        self.stem_conv.backward(&d, false);
    }

    /// Loads weights from a ResNet18-style inventory (torchvision naming, HWIO
    /// conv layout). Tensors beyond the truncation point are ignored and
    /// returned; the output projection keeps its current values.
    pub fn import_resnet18(&mut self, source: &ParameterStore) -> Result<Vec<String>> {
        let mut mapping: Vec<(String, String)> = Vec::new();
        let mut ours = Vec::new();
        self.visit(&mut |p| ours.push(p.name.clone()));
        for name in ours {
            if name.starts_with(&format!("{PREFIX}.proj.")) {
                continue;
            }
            mapping.push((torchvision_name(&name), name));
        }
        let missing: Vec<String> = mapping
            .iter()
            .filter(|(src, _)| !source.contains(src))
            .map(|(src, _)| src.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Inventory {
                missing,
                extra: Vec::new(),
            });
        }
        let mut values = std::collections::HashMap::new();
        for (src, dst) in &mapping {
            let t = &source.get(src).unwrap().record;
            let TensorData::F32(v) = &t.data else {
                return Err(Error::tensor(src, "expected f32"));
            };
            values.insert(dst.clone(), (t.shape.clone(), v.clone()));
        }
        let mut err = None;
        self.visit_mut(&mut |p| {
            if let Some((shape, v)) = values.get(&p.name) {
                if *shape != p.shape {
                    err.get_or_insert(Error::Shape(format!(
                        "{}: source shape {shape:?}, expected {:?}",
                        p.name, p.shape
                    )));
                } else {
                    p.value = v.iter().map(|&x| T::lit(x as f64)).collect();
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        let used: std::collections::HashSet<&str> = mapping.iter().map(|(s, _)| s.as_str()).collect();
        let ignored: Vec<String> = source
            .names()
            .filter(|n| !used.contains(n) && !n.ends_with("num_batches_tracked"))
            .map(str::to_string)
            .collect();
        for n in &ignored {
            log::info!("side encoder import: ignoring {n}");
        }
        Ok(ignored)
    }
}

/// Maps `side.stage2.block0.downsample.bn.weight` to `layer2.0.downsample.1.weight` etc.
pub fn torchvision_name(ours: &str) -> String {
    let rest = ours.strip_prefix(&format!("{PREFIX}.")).unwrap_or(ours);
    if let Some(r) = rest.strip_prefix("stem.conv.") {
        return format!("conv1.{r}");
    }
    if let Some(r) = rest.strip_prefix("stem.bn.") {
        return format!("bn1.{r}");
    }
    let mut parts = rest.splitn(3, '.');
    let stage = parts.next().unwrap_or_default().trim_start_matches("stage");
    let block = parts.next().unwrap_or_default().trim_start_matches("block");
    let tail = parts.next().unwrap_or_default();
    let tail = tail
        .replacen("downsample.conv.", "downsample.0.", 1)
        .replacen("downsample.bn.", "downsample.1.", 1);
    format!("layer{stage}.{block}.{tail}")
}

impl<T: Real> Module<T> for SideEncoder<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.stem_conv.params().chain(self.stem_bn.params()).for_each(&mut *f);
        for b in self.stages.iter().flatten() {
            b.visit(f);
        }
        self.proj.params().for_each(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.stem_conv.params_mut().chain(self.stem_bn.params_mut()).for_each(&mut *f);
        for b in self.stages.iter_mut().flatten() {
            b.visit_mut(f);
        }
        self.proj.params_mut().for_each(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::conv_out_size;

    #[test]
    fn default_layout_counts_thirteen_convs_and_stride_sixteen() {
        let c = SideEncoderConfig::toy(64);
        // structural count, independent of counted_convs(): stem + 2 convs per block
        let blocks: usize = c.blocks_per_stage.iter().sum();
        assert_eq!(1 + 2 * blocks, 13);
        // stride by walking the spatial sizes the layers produce
        let mut s = conv_out_size(224, 7, 2, 3);
        s = conv_out_size(s, 3, 2, 1);
        for &st in &c.stage_strides {
            s = conv_out_size(s, 3, st, 1);
        }
        assert_eq!(s, 14);
        assert!(c.validate(224, 14).is_ok());
    }

    #[test]
    fn four_stage_config_is_rejected() {
        let mut c = SideEncoderConfig::toy(64);
        c.stage_channels.push(128);
        c.blocks_per_stage.push(2);
        c.stage_strides.push(1);
        c.conv_layer_count = 17;
        let err = c.validate(224, 14).unwrap_err().to_string();
        assert!(err.contains("conv_layer_count must be 13"), "{err}");
    }

    #[test]
    fn stride_eight_config_is_rejected() {
        let mut c = SideEncoderConfig::toy(64);
        c.stage_strides = vec![1, 2, 1];
        let err = c.validate(224, 14).unwrap_err().to_string();
        assert!(err.contains("output grid mismatch with backbone"), "{err}");
    }

    #[test]
    fn zero_projection_gives_zero_map_at_backbone_resolution() {
        let mut enc: SideEncoder<f32> = SideEncoder::new(&SideEncoderConfig::toy(8), 64, 4, 3).unwrap();
        enc.zero_projection();
        let y = enc.infer(&Tensor::zeros(&[1, 64, 64, 3]));
        assert_eq!(y.shape, [1, 4, 4, 8]);
        assert!(y.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn torchvision_names_round_the_stages() {
        assert_eq!(torchvision_name("side.stem.conv.weight"), "conv1.weight");
        assert_eq!(torchvision_name("side.stem.bn.running_var"), "bn1.running_var");
        assert_eq!(torchvision_name("side.stage1.block1.conv2.weight"), "layer1.1.conv2.weight");
        assert_eq!(
            torchvision_name("side.stage3.block0.downsample.bn.bias"),
            "layer3.0.downsample.1.bias"
        );
        assert_eq!(
            torchvision_name("side.stage2.block0.downsample.conv.weight"),
            "layer2.0.downsample.0.weight"
        );
    }
}
