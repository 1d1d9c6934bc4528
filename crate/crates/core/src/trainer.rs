//! Optimization loop, evaluation and the four-row ablation harness.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{augment, collate, sample_rng, stack_slices, to_slices, AugmentSpec, SliceSample};
use crate::error::{Error, Result};
use crate::fusion::GateMode;
use crate::losses::{combined_loss_and_grad, LossWeights};
use crate::metrics::{aggregate, evaluate_case, CaseMetrics, MetricsReport, UndefinedHd95};
use crate::model::{LadderModel, ModelConfig};
use crate::param::Module;
use crate::tensorio::{load_checkpoint, save_checkpoint, CaseRecord, CheckpointMeta};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// Linear warmup, then constant.
    #[default]
    Constant,
    /// Linear warmup, then cosine decay to zero at `max_steps`.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: u64,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<u64>,
    pub base_lr: f64,
    pub warmup_iters: u64,
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub gate: GateMode,
    pub loss: LossWeights,
    pub trainable_decoder: Vec<String>,
    pub augment: bool,
    /// Extra small-angle rotation range in degrees; 0 keeps augmentation exact.
    pub max_angle_deg: f64,
    /// Log the frozen digest every this many steps (and at the first and last step).
    pub digest_every: u64,
    /// Re-estimate side-encoder batch-norm statistics over the training
    /// slices before each checkpoint and at the end of training.
    pub recalibrate_bn: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            epochs: 10,
            max_steps: None,
            base_lr: 1e-3,
            warmup_iters: 250,
            schedule: LrSchedule::Constant,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            seed: 0,
            gate: GateMode::Free,
            loss: LossWeights::default(),
            trainable_decoder: vec![crate::decoder::DEFAULT_TRAINABLE.to_string()],
            augment: true,
            max_angle_deg: 0.0,
            digest_every: 50,
            recalibrate_bn: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.warmup_iters == 0 {
            return bad("warmup_iters must be at least 1");
        }
        if !(self.base_lr > 0.0) {
            return bad("base_lr must be positive");
        }
        if !(0.0..=1.0).contains(&self.loss.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if !(self.loss.dice_smooth > 0.0) {
            return bad("dice_smooth must be positive");
        }
        if self.schedule == LrSchedule::Cosine && self.max_steps.is_none() {
            return bad("the cosine schedule needs max_steps");
        }
        Ok(())
    }
}

/// `(step+1)/warmup · base` during warmup, `base` afterwards.
pub fn warmup_lr(step: u64, base_lr: f64, warmup_iters: u64) -> f64 {
    if step < warmup_iters {
        (step + 1) as f64 / warmup_iters as f64 * base_lr
    } else {
        base_lr
    }
}

pub fn scheduled_lr(cfg: &TrainConfig, step: u64) -> f64 {
    let lr = warmup_lr(step, cfg.base_lr, cfg.warmup_iters);
    match (cfg.schedule, cfg.max_steps) {
        (LrSchedule::Cosine, Some(total)) if step >= cfg.warmup_iters && total > cfg.warmup_iters => {
            let t = (step - cfg.warmup_iters) as f64 / (total - cfg.warmup_iters) as f64;
            lr * 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
        }
        _ => lr,
    }
}

/// Adam with moments kept in visit order over trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    pub fn step(&mut self, model: &mut LadderModel<f32>, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        let mut i = 0;
        model.visit_mut(&mut |p| {
            let Some(g) = p.grad.as_ref() else { return };
            if m_all.len() <= i {
                m_all.push(vec![0.0; g.len()]);
                v_all.push(vec![0.0; g.len()]);
            }
            let (m, v) = (&mut m_all[i], &mut v_all[i]);
            for j in 0..g.len() {
                let gj = g[j] as f64 + cfg.weight_decay * p.value[j] as f64;
                let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
                let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = lr * (mj / c1) / ((vj / c2).sqrt() + cfg.adam_eps);
                p.value[j] = (p.value[j] as f64 - update) as f32;
            }
            i += 1;
        });
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub dice: f64,
    pub alpha: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frozen_digest: Option<String>,
    pub step_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub steps: u64,
    pub epochs: u64,
    pub final_loss: f64,
    pub best_epoch_loss: f64,
    pub gate_value: f32,
    pub frozen_digest_start: String,
    pub frozen_digest_end: String,
    pub mean_step_ms: f64,
    pub log: Vec<TrainLogRecord>,
}

fn meta(model: &LadderModel<f32>, cfg: &TrainConfig, step: u64, epoch: u64) -> CheckpointMeta {
    let mut m = CheckpointMeta {
        step,
        epoch,
        gate_value: Some(model.gate.gate_value()),
        config_digest: model.config.digest(),
        extra: Default::default(),
    };
    m.extra.insert("model_config".into(), serde_json::to_value(&model.config).expect("json"));
    m.extra.insert("train_config".into(), serde_json::to_value(cfg).expect("json"));
    m
}

pub fn save_model(model: &LadderModel<f32>, cfg: &TrainConfig, step: u64, epoch: u64, dir: &Path) -> Result<()> {
    save_checkpoint(&model.to_store()?, &meta(model, cfg, step, epoch), dir)
}

/// Rebuilds a model saved by [`save_model`].
pub fn load_model(dir: &Path) -> Result<(LadderModel<f32>, CheckpointMeta)> {
    let (store, meta) = load_checkpoint(dir)?;
    let bad = |message: String| Error::Manifest {
        path: dir.to_path_buf(),
        message,
    };
    let value = meta
        .extra
        .get("model_config")
        .ok_or_else(|| bad("checkpoint carries no model_config".into()))?;
    let config: ModelConfig = serde_json::from_value(value.clone()).map_err(|e| bad(format!("model_config: {e}")))?;
    if config.digest() != meta.config_digest {
        return Err(bad("model_config does not match config_digest".into()));
    }
    let mut model = LadderModel::new(&config)?;
    model.load_store(&store)?;
    Ok((model, meta))
}

/// The training configuration stored with a checkpoint, if any.
pub fn stored_train_config(meta: &CheckpointMeta) -> Option<TrainConfig> {
    serde_json::from_value(meta.extra.get("train_config")?.clone()).ok()
}

/// Applies the run's gate mode and decoder subset to the model.
pub fn prepare_model(model: &mut LadderModel<f32>, cfg: &TrainConfig) -> Result<()> {
    model.set_gate_mode(cfg.gate);
    model.decoder.set_trainable_subset(&cfg.trainable_decoder)?;
    model.config.decoder = model.decoder.config.clone();
    Ok(())
}

fn recalibrate(model: &mut LadderModel<f32>, samples: &[SliceSample], cfg: &TrainConfig) {
    if !cfg.recalibrate_bn || !model.gate.mode().uses_side() || !model.side.config.bn_update_stats {
        return;
    }
    let batches: Vec<_> = samples
        .chunks(cfg.batch_size)
        .map(|c| collate(&c.iter().collect::<Vec<_>>()).0)
        .collect();
    model.side.recalibrate_bn(&batches);
}

/// Trains `model` in place on every slice of `cases`. With `out_dir`, writes
/// `train_log.jsonl`, `last/` at each epoch end and `best/` at the lowest
/// epoch-mean loss.
pub fn train(
    model: &mut LadderModel<f32>,
    cases: &[CaseRecord],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    prepare_model(model, cfg)?;
    let size = model.config.image_size();
    let k = model.config.num_classes();
    for c in cases {
        c.validate(k)?;
    }
    let samples: Vec<SliceSample> = cases.iter().flat_map(|c| to_slices(c, size)).collect();
    if samples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut log_file = match out_dir {
        Some(d) => {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let p = d.join("train_log.jsonl");
            Some(BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?))
        }
        None => None,
    };
    let digest_start = model.frozen_digest()?;
    let mut adam = Adam::default();
    let mut log = Vec::new();
    let (mut step, mut epoch, mut best) = (0u64, 0u64, f64::INFINITY);
    let mut last_loss = f64::NAN;
    let budget = cfg.max_steps.unwrap_or(u64::MAX);
    let mut total_ms = 0.0;
    'epochs: while epoch < cfg.epochs && step < budget {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = sample_rng(cfg.seed, epoch, u64::MAX);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let (mut sum, mut n) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= budget {
                break;
            }
            let t0 = Instant::now();
            let batch: Vec<SliceSample> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        let spec = AugmentSpec::random(&mut sample_rng(cfg.seed, epoch, i as u64), cfg.max_angle_deg);
                        augment(&samples[i], &spec)
                    } else {
                        samples[i].clone()
                    }
                })
                .collect();
            let refs: Vec<&SliceSample> = batch.iter().collect();
            let (images, labels) = collate(&refs);
            model.zero_grad();
            let logits = model.forward_train(&images)?;
            let (parts, d_logits) = combined_loss_and_grad(&logits, &labels, &cfg.loss)?;
            if !parts.total.is_finite() {
                return Err(Error::Diverged { step, loss: parts.total });
            }
            model.backward(&d_logits);
            let lr = scheduled_lr(cfg, step);
            adam.step(model, lr, cfg);
            let step_ms = t0.elapsed().as_secs_f64() * 1e3;
            total_ms += step_ms;
            let last_step = step + 1 == budget;
            let rec = TrainLogRecord {
                step,
                epoch,
                lr,
                loss: parts.total,
                ce: parts.ce,
                dice: parts.dice,
                alpha: model.gate.gate_value(),
                frozen_digest: (step % cfg.digest_every.max(1) == 0 || last_step)
                    .then(|| model.frozen_digest())
                    .transpose()?,
                step_ms,
            };
            log::debug!("step {step} loss {:.5} alpha {:.4}", rec.loss, rec.alpha);
            if let Some(f) = log_file.as_mut() {
                let line = serde_json::to_string(&rec).expect("json");
                writeln!(f, "{line}").map_err(|e| Error::io(out_dir.unwrap(), e))?;
            }
            log.push(rec);
            sum += parts.total;
            n += 1;
            last_loss = parts.total;
            step += 1;
        }
        let mean = sum / n.max(1) as f64;
        log::info!("epoch {epoch}: mean loss {mean:.5}, alpha {:.4}", model.gate.gate_value());
        if let Some(d) = out_dir {
            recalibrate(model, &samples, cfg);
            save_model(model, cfg, step, epoch + 1, &d.join("last"))?;
            if mean < best {
                save_model(model, cfg, step, epoch + 1, &d.join("best"))?;
            }
        }
        best = best.min(mean);
        epoch += 1;
        if step >= budget {
            break 'epochs;
        }
    }
    if out_dir.is_none() {
        recalibrate(model, &samples, cfg);
    }
    if let Some(f) = log_file.as_mut() {
        f.flush().map_err(|e| Error::io(out_dir.unwrap(), e))?;
    }
    Ok(TrainOutcome {
        steps: step,
        epochs: epoch,
        final_loss: last_loss,
        best_epoch_loss: best,
        gate_value: model.gate.gate_value(),
        frozen_digest_start: digest_start,
        frozen_digest_end: model.frozen_digest()?,
        mean_step_ms: total_ms / step.max(1) as f64,
        log,
    })
}

/// Predicts each slice independently and stacks back to the case geometry.
pub fn predict_case(model: &LadderModel<f32>, case: &CaseRecord, batch_size: usize) -> Result<Vec<u8>> {
    let size = model.config.image_size();
    let slices = to_slices(case, size);
    let mut preds = Vec::with_capacity(slices.len());
    for chunk in slices.chunks(batch_size.max(1)) {
        let refs: Vec<&SliceSample> = chunk.iter().collect();
        let (images, _) = collate(&refs);
        let masks = model.predict(&images)?;
        preds.extend(masks.chunks_exact(size * size).map(<[u8]>::to_vec));
    }
    stack_slices(&preds, size, case.dims)
}

pub fn evaluate(model: &LadderModel<f32>, cases: &[CaseRecord], policy: UndefinedHd95) -> Result<MetricsReport> {
    let k = model.config.num_classes();
    let mut rows: Vec<CaseMetrics> = Vec::with_capacity(cases.len());
    for c in cases {
        c.validate(k)?;
        let pred = predict_case(model, c, 4)?;
        rows.push(evaluate_case(&c.case_id, &pred, &c.label, c.dims, c.spacing, k)?);
    }
    aggregate(&rows, policy)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    ZeroShot,
    CnnOnly,
    SamOnly,
    Combined,
}

impl AblationMode {
    /// Table row order.
    pub const ALL: [AblationMode; 4] = [Self::ZeroShot, Self::CnnOnly, Self::SamOnly, Self::Combined];

    pub fn label(self) -> &'static str {
        match self {
            Self::ZeroShot => "SAM",
            Self::CnnOnly => "Ours(CNN Encoder only)",
            Self::SamOnly => "Ours(SAM Encoder only)",
            Self::Combined => "Ours",
        }
    }

    pub fn gate(self) -> GateMode {
        match self {
            Self::ZeroShot | Self::SamOnly => GateMode::BackboneOnly,
            Self::CnnOnly => GateMode::SideOnly,
            Self::Combined => GateMode::Free,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub label: String,
    pub steps: u64,
    pub gate_value: f32,
    pub mean_step_ms: f64,
    pub report: MetricsReport,
}

/// Trains one fresh model per mode from the same seed and schedule and
/// evaluates each on `eval_cases`. Rows come back in table order.
pub fn run_ablation(
    model_cfg: &ModelConfig,
    train_cases: &[CaseRecord],
    eval_cases: &[CaseRecord],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let base: LadderModel<f32> = LadderModel::new(model_cfg)?;
    run_ablation_from(&base, train_cases, eval_cases, cfg, out_dir)
}

/// As [`run_ablation`], starting every mode from copies of `base`.
pub fn run_ablation_from(
    base: &LadderModel<f32>,
    train_cases: &[CaseRecord],
    eval_cases: &[CaseRecord],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for mode in AblationMode::ALL {
        let mut model = base.clone();
        let run_cfg = TrainConfig {
            gate: mode.gate(),
            ..cfg.clone()
        };
        let dir: Option<PathBuf> = out_dir.map(|d| d.join(format!("{mode:?}").to_lowercase()));
        let (steps, mean_step_ms) = if mode == AblationMode::ZeroShot {
            prepare_model(&mut model, &run_cfg)?;
            (0, 0.0)
        } else {
            let o = train(&mut model, train_cases, &run_cfg, dir.as_deref())?;
            (o.steps, o.mean_step_ms)
        };
        let report = evaluate(&model, eval_cases, UndefinedHd95::Exclude)?;
        log::info!(
            "{}: DSC {:.2} HD95 {:.2} ({} steps, {:.1} ms/step)",
            mode.label(),
            report.mean_dsc,
            report.mean_hd95,
            steps,
            mean_step_ms
        );
        rows.push(AblationRow {
            mode,
            label: mode.label().to_string(),
            steps,
            gate_value: model.gate.gate_value(),
            mean_step_ms,
            report,
        });
    }
    Ok(rows)
}
