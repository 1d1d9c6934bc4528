use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use sidetune::backbone::{Backbone, BackboneConfig, BackboneVariant};
use sidetune::datapipe::{load_dataset, synth_generate, SynthConfig};
use sidetune::fusion::GateMode;
use sidetune::metrics::{evaluate_case, UndefinedHd95};
use sidetune::model::{LadderModel, ModelConfig};
use sidetune::report::{cmd_report, parse_rows_csv, row_from_case_csv, ReportRow};
use sidetune::tensorio::{
    case_dir, frozen_digest, load_checkpoint, read_case, read_dataset_manifest, read_manifest, save_checkpoint,
    write_blob, CheckpointMeta, Split, TensorData, TensorRecord,
};
use sidetune::trainer::{evaluate, load_model, predict_case, run_ablation_from, train as run_train, LrSchedule, TrainConfig};

use crate::manifest::RunManifest;
use crate::{convert, overlay};
use crate::{ConvertArgs, EvalArgs, InspectArgs, PredictArgs, ReportArgs, SynthArgs, TrainArgs, TrainOverrides, Usage};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn json_pretty<S: Serialize>(v: &S) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn policy(penalty: Option<f64>) -> UndefinedHd95 {
    penalty.map_or(UndefinedHd95::Exclude, UndefinedHd95::Penalty)
}

fn parse_split(s: &str) -> Result<Option<Split>> {
    match s {
        "train" => Ok(Some(Split::Train)),
        "test" => Ok(Some(Split::Test)),
        "all" => Ok(None),
        other => Err(usage(format!("split must be train, test or all, got {other:?}"))),
    }
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        seed: a.seed,
        cases: a.cases,
        num_classes: a.classes,
        size: a.size,
        min_slices: a.min_slices,
        max_slices: a.max_slices,
        train_fraction: a.train_fraction,
        noise: a.noise,
        ..Default::default()
    };
    let mut run = RunManifest::begin(&a.out, "synth", serde_json::to_value(&cfg)?, Some(cfg.seed))?;
    let m = synth_generate(&a.out, &cfg)?;
    run.add(a.out.join(sidetune::tensorio::DATASET_MANIFEST_FILE));
    run.finish()?;
    let train = m.cases.iter().filter(|c| c.split == Split::Train).count();
    println!(
        "wrote {} cases ({train} train, {} test) with {} classes to {}",
        m.cases.len(),
        m.cases.len() - train,
        m.num_classes,
        a.out.display()
    );
    Ok(())
}

fn variant_config(name: &str, image_size: usize) -> Result<BackboneConfig> {
    let mut c = match name {
        "vit_b" => BackboneConfig::vit_b(image_size),
        "toy" => BackboneConfig::toy(),
        other => return Err(usage(format!("unknown variant {other:?}; expected vit_b or toy"))),
    };
    c.image_size = image_size;
    c.validate()?;
    Ok(c)
}

pub fn convert_backbone(a: ConvertArgs) -> Result<()> {
    let config = variant_config(&a.variant, a.image_size)?;
    let mut run = RunManifest::begin(
        &a.out,
        "convert-backbone",
        json!({"variant": a.variant, "input": a.input, "image_size": a.image_size, "prefix": a.prefix}),
        None,
    )?;
    let converted = convert::convert(&a.input, &a.prefix, &config)?;
    let count = converted.store.numel();
    let mut meta = CheckpointMeta::default();
    meta.extra.insert("backbone_config".into(), serde_json::to_value(&config)?);
    meta.extra.insert("parameter_count".into(), json!(count));
    meta.extra.insert("source".into(), json!(a.input.display().to_string()));
    let dir = a.out.join("backbone");
    save_checkpoint(&converted.store, &meta, &dir)?;
    run.add(&dir);
    run.finish()?;
    println!(
        "converted {} tensors ({count} parameters, {} source tensors skipped) into {}",
        converted.store.len(),
        converted.ignored,
        dir.display()
    );
    Ok(())
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelSection {
    variant: Option<String>,
    image_size: Option<usize>,
    seed: Option<u64>,
    upscale_kernel: Option<usize>,
    mixer: Option<bool>,
}

/// Splits a config file into its model table and training fields, rejecting
/// unknown training keys.
fn read_config_file(path: &Path) -> Result<(ModelSection, TrainConfig)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut table: toml::Table = text.parse().map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let model = match table.remove("model") {
        Some(v) => v.try_into().map_err(|e| usage(format!("{} [model]: {e}", path.display())))?,
        None => ModelSection::default(),
    };
    let known = serde_json::to_value(TrainConfig::default())?;
    for (k, v) in &table {
        let Some(default) = known.get(k) else {
            return Err(usage(format!("{}: unknown field {k:?}", path.display())));
        };
        if let (Some(sub), Some(def)) = (v.as_table(), default.as_object()) {
            if let Some(bad) = sub.keys().find(|s| !def.contains_key(*s)) {
                return Err(usage(format!("{}: unknown field {k}.{bad}", path.display())));
            }
        }
    }
    let cfg: TrainConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok((model, cfg))
}

fn apply_overrides(cfg: &mut TrainConfig, o: &TrainOverrides) -> Result<()> {
    macro_rules! set {
        ($($field:ident).+ <- $flag:ident) => {
            if let Some(v) = o.$flag.clone() {
                cfg.$($field).+ = v;
            }
        };
    }
    set!(batch_size <- batch_size);
    set!(epochs <- epochs);
    set!(base_lr <- base_lr);
    set!(warmup_iters <- warmup_iters);
    set!(beta1 <- beta1);
    set!(beta2 <- beta2);
    set!(adam_eps <- adam_eps);
    set!(weight_decay <- weight_decay);
    set!(seed <- seed);
    set!(loss.lambda <- lambda);
    set!(loss.dice_smooth <- dice_smooth);
    set!(loss.include_background <- include_background);
    set!(loss.per_image <- per_image_dice);
    set!(augment <- augment);
    set!(max_angle_deg <- max_angle_deg);
    set!(digest_every <- digest_every);
    set!(recalibrate_bn <- recalibrate_bn);
    if o.max_steps.is_some() {
        cfg.max_steps = o.max_steps;
    }
    if let Some(s) = &o.schedule {
        cfg.schedule = match s.as_str() {
            "constant" => LrSchedule::Constant,
            "cosine" => LrSchedule::Cosine,
            other => return Err(usage(format!("schedule must be constant or cosine, got {other:?}"))),
        };
    }
    if let Some(g) = &o.gate {
        cfg.gate = g.parse::<GateMode>()?;
    }
    if !o.trainable_decoder.is_empty() {
        cfg.trainable_decoder = o.trainable_decoder.clone();
    }
    Ok(())
}

fn build_model(section: &ModelSection, a: &TrainArgs, num_classes: usize) -> Result<LadderModel<f32>> {
    let variant = a.model.clone().or(section.variant.clone()).unwrap_or_else(|| "toy".into());
    let seed = a.model_seed.or(section.seed).unwrap_or(0);
    let mut config = match variant.as_str() {
        "toy" => ModelConfig::toy(num_classes),
        "vit_b" => ModelConfig::vit_b(224, num_classes),
        other => return Err(usage(format!("unknown model {other:?}; expected toy or vit_b"))),
    };
    if let Some(s) = a.image_size.or(section.image_size) {
        config = config.with_image_size(s);
    }
    if let Some(k) = section.upscale_kernel {
        config.decoder.upscale_kernel = k;
    }
    if let Some(m) = section.mixer {
        config.decoder.mixer = m;
    }
    config.seed = seed;
    let Some(dir) = &a.backbone else {
        return Ok(LadderModel::new(&config)?);
    };
    let (store, meta) = load_checkpoint(dir)?;
    let stored: BackboneConfig = meta
        .extra
        .get("backbone_config")
        .cloned()
        .map(serde_json::from_value)
        .transpose()?
        .ok_or_else(|| anyhow!("{} is not a converted backbone checkpoint", dir.display()))?;
    if stored.image_size != config.image_size() {
        return Err(usage(format!(
            "backbone was converted for image size {}, model uses {}",
            stored.image_size,
            config.image_size()
        )));
    }
    let expected = if stored.variant == BackboneVariant::VitB { "vit_b" } else { "toy" };
    if expected != variant {
        return Err(usage(format!("backbone variant {expected} does not match --model {variant}")));
    }
    config.backbone = stored;
    config.side.match_channels = config.backbone.out_channels;
    config.decoder.in_channels = config.backbone.out_channels;
    let backbone = Backbone::from_store(&config.backbone, &store)?;
    Ok(LadderModel::with_backbone(&config, backbone)?)
}

fn resolved_toml(section: &ModelSection, cfg: &TrainConfig) -> Result<String> {
    let mut table = toml::Table::try_from(cfg)?;
    table.insert("model".into(), toml::Value::try_from(section)?);
    Ok(toml::to_string(&table)?)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let (mut section, mut cfg) = match &a.config {
        Some(p) => read_config_file(p)?,
        None => (ModelSection::default(), TrainConfig::default()),
    };
    apply_overrides(&mut cfg, &a.overrides)?;
    cfg.validate()?;
    section.variant = a.model.clone().or(section.variant);
    section.image_size = a.image_size.or(section.image_size);
    section.seed = a.model_seed.or(section.seed);
    let manifest = read_dataset_manifest(&a.data)?;
    let mut model = build_model(&section, &a, manifest.num_classes)?;

    let config_value = json!({
        "train": cfg,
        "model": model.config,
        "data": a.data,
        "backbone": a.backbone,
        "ablation": a.ablation,
    });
    let mut run = RunManifest::begin(&a.out, "train", config_value, Some(cfg.seed))?;
    let resolved = a.out.join("resolved_config.toml");
    write(&resolved, &resolved_toml(&section, &cfg)?)?;
    run.add(&resolved);

    let (_, train_cases) = load_dataset(&a.data, Some(Split::Train))?;
    if a.ablation {
        let (_, eval_cases) = load_dataset(&a.data, Some(Split::Test))?;
        if eval_cases.is_empty() {
            return Err(sidetune::Error::Data("ablation needs a non-empty test split".into()).into());
        }
        let rows = run_ablation_from(&model, &train_cases, &eval_cases, &cfg, Some(&a.out))?;
        let mut csv = String::from("method,dsc,hd95\n");
        let mut table = Vec::new();
        for r in &rows {
            csv.push_str(&format!("{},{:.2},{:.2}\n", r.label, r.report.mean_dsc, r.report.mean_hd95));
            table.push(ReportRow {
                method: r.label.clone(),
                dsc: r.report.mean_dsc,
                hd95: Some(r.report.mean_hd95),
                organs: Vec::new(),
            });
        }
        let summary = a.out.join("ablation_summary.csv");
        write(&summary, &csv)?;
        let detail = a.out.join("ablation.json");
        write(&detail, &json_pretty(&rows))?;
        run.add(&summary);
        run.add(&detail);
        run.finish()?;
        print!("{}", sidetune::report::table2(&table));
        for r in &rows {
            println!("{}: alpha {:.4}, {} steps, {:.1} ms/step", r.label, r.gate_value, r.steps, r.mean_step_ms);
        }
        return Ok(());
    }

    let outcome = run_train(&mut model, &train_cases, &cfg, Some(&a.out))?;
    let summary = json!({
        "steps": outcome.steps,
        "epochs": outcome.epochs,
        "final_loss": outcome.final_loss,
        "best_epoch_loss": outcome.best_epoch_loss,
        "gate_value": outcome.gate_value,
        "frozen_digest_start": outcome.frozen_digest_start,
        "frozen_digest_end": outcome.frozen_digest_end,
        "mean_step_ms": outcome.mean_step_ms,
        "budget": model.parameter_budget(),
    });
    let out_json = a.out.join("outcome.json");
    write(&out_json, &json_pretty(&summary))?;
    for p in ["train_log.jsonl", "last", "best"] {
        run.add(a.out.join(p));
    }
    run.add(&out_json);
    run.finish()?;
    if outcome.frozen_digest_start != outcome.frozen_digest_end {
        return Err(sidetune::Error::Data("frozen parameters changed during training".into()).into());
    }
    println!(
        "trained {} steps over {} epochs: final loss {:.4}, alpha {:.4}, {:.1} ms/step",
        outcome.steps, outcome.epochs, outcome.final_loss, outcome.gate_value, outcome.mean_step_ms
    );
    Ok(())
}

/// Loads the checkpoint and checks its class count against the dataset
/// before any case is read.
fn model_for(checkpoint: &Path, data: &Path) -> Result<LadderModel<f32>> {
    let manifest = read_dataset_manifest(data)?;
    let (model, _) = load_model(checkpoint)?;
    let k = model.config.num_classes();
    if k != manifest.num_classes {
        return Err(sidetune::Error::Data(format!(
            "checkpoint predicts {k} classes but dataset {} has {}",
            data.display(),
            manifest.num_classes
        ))
        .into());
    }
    Ok(model)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let split = parse_split(&a.split)?;
    let model = model_for(&a.checkpoint, &a.data)?;
    let mut run = RunManifest::begin(
        &a.out,
        "eval",
        json!({"checkpoint": a.checkpoint, "data": a.data, "split": a.split, "undefined_penalty": a.undefined_penalty}),
        None,
    )?;
    let (_, cases) = load_dataset(&a.data, split)?;
    if cases.is_empty() {
        return Err(sidetune::Error::Data(format!("split {} of {} is empty", a.split, a.data.display())).into());
    }
    let report = evaluate(&model, &cases, policy(a.undefined_penalty))?;
    let files = [
        ("metrics_cases.csv", report.case_csv()),
        ("metrics_summary.csv", report.summary_csv(&a.label)),
        ("metrics.json", json_pretty(&report)),
    ];
    for (name, text) in files {
        let p = a.out.join(name);
        write(&p, &text)?;
        run.add(p);
    }
    run.finish()?;
    println!(
        "{} cases: DSC {:.2}%, HD95 {:.2} mm ({} undefined HD95 entries)",
        cases.len(),
        report.mean_dsc,
        report.mean_hd95,
        report.undefined_hd95
    );
    for (name, d) in report.class_names.iter().zip(&report.per_class_dsc) {
        println!("  {name:<12} {d:6.2}");
    }
    Ok(())
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let model = model_for(&a.checkpoint, &a.data)?;
    let manifest = read_dataset_manifest(&a.data)?;
    let entry = manifest.cases.iter().find(|c| c.id == a.case).ok_or_else(|| {
        sidetune::Error::Data(format!("no case {:?} in {}", a.case, case_dir(&a.data, &a.case).display()))
    })?;
    let case = read_case(&a.data, entry)?;
    let mut run = RunManifest::begin(
        &a.out,
        "predict",
        json!({"checkpoint": a.checkpoint, "data": a.data, "case": a.case}),
        None,
    )?;
    let pred = predict_case(&model, &case, 4)?;
    let vol = a.out.join(format!("{}.pred.bin", case.case_id));
    write_blob(&vol, &TensorRecord::new(format!("{}.pred", case.case_id), &case.dims, TensorData::U8(pred.clone()))?)?;
    run.add(&vol);
    if !a.no_overlays {
        let [d, h, w] = case.dims;
        let dir = a.out.join(&case.case_id);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        for z in 0..d {
            let r = z * h * w..(z + 1) * h * w;
            let img = overlay::render_slice(&case.image[r.clone()], &case.label[r.clone()], &pred[r], h, w);
            let p = dir.join(format!("slice_{z:03}.png"));
            overlay::save(&img, &p)?;
        }
        run.add(&dir);
    }
    run.finish()?;
    let m = evaluate_case(&case.case_id, &pred, &case.label, case.dims, case.spacing, model.config.num_classes())?;
    let mean = 100.0 * m.dsc.iter().sum::<f64>() / m.dsc.len().max(1) as f64;
    println!("{}: mean DSC {mean:.2}% against its label; wrote {}", case.case_id, vol.display());
    Ok(())
}

pub fn report(a: ReportArgs) -> Result<()> {
    let mut t1 = Vec::new();
    for spec in &a.metrics {
        let (label, path) = spec
            .split_once('=')
            .ok_or_else(|| usage(format!("--metrics expects LABEL=PATH, got {spec:?}")))?;
        let text = fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
        let row = row_from_case_csv(label, &text, policy(a.undefined_penalty)).with_context(|| format!("parsing {path}"))?;
        t1.push(row);
    }
    let mut t2 = Vec::new();
    for path in &a.ablation {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        t2.extend(parse_rows_csv(&text).with_context(|| format!("parsing {}", path.display()))?);
    }
    let r = cmd_report(&t1, &t2);
    print!("{}", r.text);
    if let Some(out) = &a.out {
        let mut run = RunManifest::begin(out, "report", json!({"metrics": a.metrics, "ablation": a.ablation}), None)?;
        for (name, text) in [("report.txt", &r.text), ("table1.csv", &r.table1_csv), ("table2.csv", &r.table2_csv)] {
            let p = out.join(name);
            write(&p, text)?;
            run.add(p);
        }
        run.finish()?;
    }
    Ok(())
}

fn inspect_checkpoint(path: &Path) -> Result<()> {
    let manifest = read_manifest(path)?;
    let (store, meta) = load_checkpoint(path)?;
    let (mut trainable, mut frozen, mut buffers) = (0usize, 0usize, 0usize);
    let mut groups: std::collections::BTreeMap<String, usize> = Default::default();
    for t in store.iter() {
        let n = t.record.numel();
        match (t.buffer, t.trainable) {
            (true, _) => buffers += n,
            (false, true) => trainable += n,
            (false, false) => frozen += n,
        }
        let group = t.record.name.split('.').next().unwrap_or("").to_string();
        *groups.entry(group).or_default() += n;
    }
    println!("checkpoint   {}", path.display());
    println!("format       {} v{}", manifest.format, manifest.version);
    println!("step/epoch   {}/{}", meta.step, meta.epoch);
    if let Some(g) = meta.gate_value {
        println!("gate alpha   {g:.6}");
    }
    println!("tensors      {}", store.len());
    println!("trainable    {trainable}");
    println!("frozen       {frozen}");
    println!("buffers      {buffers}");
    println!(
        "fraction     {:.4} trainable of {} weights",
        trainable as f64 / (trainable + frozen).max(1) as f64,
        trainable + frozen
    );
    for (g, n) in &groups {
        println!("  {g:<10} {n}");
    }
    println!("frozen sha   {}", frozen_digest(&store));
    for (k, v) in &meta.extra {
        let text = match v {
            Value::String(s) => s.clone(),
            other => serde_json::to_string(other)?,
        };
        println!("{k:<12} {text}");
    }
    Ok(())
}

pub fn inspect(a: InspectArgs) -> Result<()> {
    if a.path.join(sidetune::tensorio::MANIFEST_FILE).is_file() {
        return inspect_checkpoint(&a.path);
    }
    if a.path.join(sidetune::tensorio::DATASET_MANIFEST_FILE).is_file() {
        let m = read_dataset_manifest(&a.path)?;
        println!("dataset      {}", a.path.display());
        println!("classes      {} ({})", m.num_classes, m.class_names.join(", "));
        for split in [Split::Train, Split::Test] {
            let cases: Vec<_> = m.cases.iter().filter(|c| c.split == split).collect();
            println!("{:<12} {} cases", format!("{split:?}").to_lowercase(), cases.len());
            for c in cases {
                println!("  {:<10} dims {:?} spacing {:?}", c.id, c.dims, c.spacing);
            }
        }
        return Ok(());
    }
    for sub in ["last", "best", "backbone"] {
        if a.path.join(sub).join(sidetune::tensorio::MANIFEST_FILE).is_file() {
            return inspect_checkpoint(&a.path.join(sub));
        }
    }
    Err(sidetune::Error::Data(format!("{} is neither a checkpoint nor a dataset", a.path.display())).into())
}
