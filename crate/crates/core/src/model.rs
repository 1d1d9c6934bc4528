//! The assembled network: frozen backbone and trainable side encoder in
//! parallel, gated fusion, partially trainable decoder.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, BackboneConfig, FeatureMap};
use crate::decoder::{predict_mask, Decoder, DecoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{Gate, GateMode};
use crate::param::{Module, Param, ParamKind};
use crate::side_encoder::{SideEncoder, SideEncoderConfig};
use crate::tensor::{Real, Tensor};
use crate::tensorio::{digest_where, frozen_digest, ParameterStore, TensorData, TensorRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub side: SideEncoderConfig,
    pub decoder: DecoderConfig,
    pub gate: GateMode,
    pub seed: u64,
}

impl ModelConfig {
    /// Toy backbone, toy side encoder, four-stage decoder.
    pub fn toy(num_classes: usize) -> Self {
        let backbone = BackboneConfig::toy();
        let c = backbone.out_channels;
        Self {
            side: SideEncoderConfig::toy(c),
            decoder: DecoderConfig::toy(c, num_classes),
            backbone,
            gate: GateMode::Free,
            seed: 0,
        }
    }

    /// ViT-B backbone with the full-width ResNet18 side encoder.
    pub fn vit_b(image_size: usize, num_classes: usize) -> Self {
        let backbone = BackboneConfig::vit_b(image_size);
        let c = backbone.out_channels;
        Self {
            side: SideEncoderConfig::resnet18(c),
            decoder: DecoderConfig::toy(c, num_classes),
            backbone,
            gate: GateMode::Free,
            seed: 0,
        }
    }

    /// Same geometry at a different input size.
    pub fn with_image_size(mut self, image_size: usize) -> Self {
        self.backbone.image_size = image_size;
        self
    }

    pub fn image_size(&self) -> usize {
        self.backbone.image_size
    }

    pub fn num_classes(&self) -> usize {
        self.decoder.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let (s, g) = (self.backbone.image_size, self.backbone.grid());
        self.side.validate(s, g)?;
        self.decoder.validate(g, s)?;
        let c = self.backbone.out_channels;
        if self.side.match_channels != c || self.decoder.in_channels != c {
            return Err(Error::Config(format!(
                "side encoder ({}) and decoder ({}) channels must equal backbone output channels {c}",
                self.side.match_channels, self.decoder.in_channels
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("serializable");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterBudget {
    pub trainable: usize,
    pub frozen: usize,
    pub fraction: f64,
}

#[derive(Clone, Debug)]
pub struct LadderModel<T> {
    pub config: ModelConfig,
    pub backbone: Backbone<T>,
    pub side: SideEncoder<T>,
    pub gate: Gate<T>,
    pub decoder: Decoder<T>,
    cache: Option<(Option<Tensor<T>>, Option<Tensor<T>>)>,
}

impl<T: Real> LadderModel<T> {
    /// Seeded random weights everywhere, including the backbone.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::random(&config.backbone, config.seed)?;
        Self::with_backbone(config, backbone)
    }

    pub fn with_backbone(config: &ModelConfig, backbone: Backbone<T>) -> Result<Self> {
        config.validate()?;
        if backbone.config != config.backbone {
            return Err(Error::Config("backbone does not match the model configuration".into()));
        }
        let (s, g) = (config.backbone.image_size, config.backbone.grid());
        let mut m = Self {
            config: config.clone(),
            backbone,
            side: SideEncoder::new(&config.side, s, g, config.seed)?,
            gate: Gate::new(config.gate),
            decoder: Decoder::new(&config.decoder, g, s, config.seed)?,
            cache: None,
        };
        m.apply_freeze_policy();
        Ok(m)
    }

    /// Backbone always frozen; side encoder trainable unless the gate is
    /// pinned to the backbone; gate trainable only when free; decoder by its
    /// patterns.
    pub fn apply_freeze_policy(&mut self) {
        self.backbone.set_all_trainable(false);
        self.side.set_all_trainable(self.gate.mode().uses_side());
        self.gate.pin(self.gate.mode());
    }

    pub fn set_gate_mode(&mut self, mode: GateMode) {
        self.config.gate = mode;
        self.gate.pin(mode);
        self.apply_freeze_policy();
    }

    fn encode(&self, images: &Tensor<T>) -> Result<Option<Tensor<T>>> {
        if !self.gate.mode().uses_backbone() {
            return Ok(None);
        }
        Ok(Some(self.backbone.encode_image(images)?.data))
    }

    /// Training-mode forward; keeps what [`Self::backward`] needs.
    pub fn forward_train(&mut self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let xb = self.encode(images)?;
        let xs = if self.gate.mode().uses_side() {
            Some(self.side.forward(images))
        } else {
            None
        };
        let fused = self.fuse(&xb, &xs)?;
        let logits = self.decoder.forward(&fused)?;
        self.cache = Some((xb, xs));
        Ok(logits)
    }

    fn fuse(&self, xb: &Option<Tensor<T>>, xs: &Option<Tensor<T>>) -> Result<Tensor<T>> {
        use crate::backbone::Provenance;
        let b = xb.as_ref().map(|t| FeatureMap::new(t.clone(), Provenance::Backbone));
        let s = xs.as_ref().map(|t| FeatureMap::new(t.clone(), Provenance::Side));
        Ok(self.gate.fuse(b.as_ref(), s.as_ref())?.data)
    }

    /// Accumulates gradients into every trainable tensor. Backbone
    /// activations enter only as constants.
    pub fn backward(&mut self, d_logits: &Tensor<T>) {
        let (xb, xs) = self.cache.take().expect("backward without forward_train");
        let d_fused = self.decoder.backward(d_logits);
        if let Some(d_side) = self.gate.backward(&d_fused, xb.as_ref(), xs.as_ref()) {
            self.side.backward(&d_side);
        }
    }

    /// Evaluation-mode logits.
    pub fn infer(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let xb = self.encode(images)?;
        let xs = self.gate.mode().uses_side().then(|| self.side.infer(images));
        self.decoder.decode(&self.fuse(&xb, &xs)?)
    }

    /// Per-image argmax masks, `[B·S·S]`.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<u8>> {
        Ok(predict_mask(&self.infer(images)?))
    }

    pub fn parameter_budget(&self) -> ParameterBudget {
        let (mut trainable, mut frozen) = (0, 0);
        self.visit(&mut |p| {
            if p.kind == ParamKind::Weight {
                if p.trainable() {
                    trainable += p.numel()
                } else {
                    frozen += p.numel()
                }
            }
        });
        ParameterBudget {
            trainable,
            frozen,
            fraction: trainable as f64 / (trainable + frozen).max(1) as f64,
        }
    }

    /// Every tensor with its trainable and buffer flags, in f32.
    pub fn to_store(&self) -> Result<ParameterStore> {
        let mut store = ParameterStore::new();
        let mut err = None;
        self.visit(&mut |p| {
            let data = TensorData::F32(p.value.iter().map(|v| v.as_f64() as f32).collect());
            let r = TensorRecord::new(p.name.clone(), &p.shape, data)
                .and_then(|rec| store.insert(rec, p.trainable(), p.kind == ParamKind::Buffer));
            if let Err(e) = r {
                err.get_or_insert(e);
            }
        });
        err.map_or(Ok(store), Err)
    }

    /// Overwrites every tensor from `store`, which must hold exactly this
    /// model's inventory. Trainable flags follow the model's policy, not the store.
    pub fn load_store(&mut self, store: &ParameterStore) -> Result<()> {
        let mut ours = std::collections::BTreeSet::new();
        self.visit(&mut |p| {
            ours.insert(p.name.clone());
        });
        let theirs: std::collections::BTreeSet<String> = store.names().map(String::from).collect();
        let missing: Vec<String> = ours.difference(&theirs).cloned().collect();
        let extra: Vec<String> = theirs.difference(&ours).cloned().collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::Inventory { missing, extra });
        }
        let mut err = None;
        self.visit_mut(&mut |p: &mut Param<T>| {
            let rec = &store.get(&p.name).expect("inventory checked").record;
            match rec.data.as_f32() {
                Some(v) if rec.shape == p.shape => p.value = v.iter().map(|&x| T::lit(x as f64)).collect(),
                _ => {
                    err.get_or_insert(Error::Shape(format!(
                        "{}: checkpoint has {} {:?}, model expects f32 {:?}",
                        p.name,
                        rec.dtype().as_str(),
                        rec.shape,
                        p.shape
                    )));
                }
            }
        });
        err.map_or(Ok(()), Err)
    }

    /// Digest of every frozen parameter (see [`frozen_digest`]).
    pub fn frozen_digest(&self) -> Result<String> {
        Ok(frozen_digest(&self.to_store()?))
    }

    /// Digest of the backbone tensors alone.
    pub fn backbone_digest(&self) -> Result<String> {
        Ok(digest_where(&self.to_store()?, |t| t.record.name.starts_with("backbone.")))
    }
}

impl<T: Real> Module<T> for LadderModel<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.backbone.visit(f);
        self.side.visit(f);
        self.gate.visit(f);
        self.decoder.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.backbone.visit_mut(f);
        self.side.visit_mut(f);
        self.gate.visit_mut(f);
        self.decoder.visit_mut(f);
    }
}
