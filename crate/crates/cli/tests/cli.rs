use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use safetensors::tensor::TensorView;
use safetensors::Dtype;
use sidetune::backbone::{Backbone, BackboneConfig};
use sidetune::param::Module;
use sidetune::tensorio::load_checkpoint;

fn sidetune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sidetune")).args(args).output().expect("spawn sidetune")
}

fn ok(args: &[&str]) -> String {
    let out = sidetune(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    sidetune(args).status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, classes: &str) {
    ok(&[
        "synth", "--out", p(dir), "--cases", "3", "--classes", classes, "--size", "64", "--min-slices", "3",
        "--max-slices", "3", "--train-fraction", "0.67",
    ]);
}

#[test]
fn train_eval_is_reproducible_and_checks_class_count() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "4");
    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        ok(&[
            "train", "--data", p(&data), "--out", p(&out), "--image-size", "64", "--max-steps", "6", "--warmup-iters",
            "2", "--batch-size", "2",
        ]);
        for f in ["run_manifest.json", "train_log.jsonl", "outcome.json", "last/manifest.json", "best/manifest.json"] {
            assert!(out.join(f).exists(), "{f} missing");
        }
        let log = fs::read_to_string(out.join("train_log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 6);
        let ev = tmp.path().join(format!("eval_{run}"));
        let printed = ok(&["eval", "--checkpoint", p(&out.join("last")), "--data", p(&data), "--out", p(&ev)]);
        assert!(printed.contains("Kidney(L)"));
        csvs.push(fs::read(ev.join("metrics_cases.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);

    let other = tmp.path().join("other");
    synth(&other, "3");
    let ck = tmp.path().join("a/last");
    assert_eq!(code(&["eval", "--checkpoint", p(&ck), "--data", p(&other), "--out", p(&tmp.path().join("e"))]), 2);
    assert!(!tmp.path().join("e").exists(), "nothing is written before the class check");

    let pred = tmp.path().join("pred");
    ok(&["predict", "--checkpoint", p(&ck), "--data", p(&data), "--case", "case0000", "--out", p(&pred)]);
    assert!(pred.join("case0000.pred.bin").exists());
    assert_eq!(fs::read_dir(pred.join("case0000")).unwrap().count(), 3);
    assert_eq!(
        code(&["predict", "--checkpoint", p(&ck), "--data", p(&data), "--case", "missing", "--out", p(&pred)]),
        2
    );

    let text = ok(&["inspect", p(&tmp.path().join("a"))]);
    assert!(text.contains("frozen sha") && text.contains("gate alpha"));
    assert!(ok(&["inspect", p(&data)]).contains("case0002"));
}

#[test]
fn report_renders_fixtures_and_rejects_bad_csv() {
    let text = ok(&["report"]);
    let swin = text.lines().find(|l| l.starts_with("SwinUNet")).unwrap();
    assert_eq!(swin.split_whitespace().collect::<Vec<_>>()[1..3], ["79.12", "21.55"]);
    let vnet = text.lines().find(|l| l.starts_with("V-Net")).unwrap();
    assert_eq!(vnet.split_whitespace().nth(2), Some("-"));

    let tmp = tempfile::tempdir().unwrap();
    let cases = tmp.path().join("cases.csv");
    fs::write(&cases, "case_id,class,dsc,hd95\nc1,1,0.900000,2.000000\nc1,2,0.700000,UNDEFINED\n").unwrap();
    let abl = tmp.path().join("abl.csv");
    fs::write(&abl, "method,dsc,hd95\nmine,12.50,3.00\n").unwrap();
    let out = tmp.path().join("rep");
    let spec = format!("synthetic={}", p(&cases));
    let text = ok(&["report", "--metrics", &spec, "--ablation", p(&abl), "--out", p(&out)]);
    let row = text.lines().find(|l| l.starts_with("synthetic")).unwrap();
    assert_eq!(row.split_whitespace().collect::<Vec<_>>()[1..5], ["80.00", "2.00", "90.00", "70.00"]);
    assert!(text.contains("1=Aorta, 2=Gallbladder"));
    assert!(text.lines().any(|l| l.starts_with("mine")));
    assert!(fs::read_to_string(out.join("table1.csv")).unwrap().contains("\nsynthetic,80.00,2.00,90.00,70.00,-,"));

    fs::write(&cases, "case_id,class,dsc\n").unwrap();
    assert_eq!(code(&["report", "--metrics", &spec]), 2);
    assert_eq!(code(&["report", "--metrics", "no-equals-sign"]), 1);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "3");
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "base_lr = 0.01\nmax_steps = 2\nwarmup_iters = 1\n[loss]\nlambda = 0.5\n[model]\nimage_size = 64\n").unwrap();
    let out = tmp.path().join("run");
    ok(&["train", "--data", p(&data), "--out", p(&out), "--config", p(&cfg), "--lr", "0.002"]);
    let resolved: toml::Table = fs::read_to_string(out.join("resolved_config.toml")).unwrap().parse().unwrap();
    assert_eq!(resolved["base_lr"].as_float(), Some(0.002));
    assert_eq!(resolved["loss"]["lambda"].as_float(), Some(0.5));
    assert_eq!(resolved["max_steps"].as_integer(), Some(2));

    // The resolved file reproduces the run.
    let again = tmp.path().join("again");
    ok(&["train", "--data", p(&data), "--out", p(&again), "--config", p(&out.join("resolved_config.toml"))]);
    let alpha = |d: &Path| load_checkpoint(&d.join("last")).unwrap().1.gate_value;
    assert_eq!(alpha(&out), alpha(&again));

    fs::write(&cfg, "base_lrr = 0.01\n").unwrap();
    assert_eq!(code(&["train", "--data", p(&data), "--out", p(&out), "--config", p(&cfg)]), 1);
    assert_eq!(code(&["train", "--data", p(&data), "--out", p(&out), "--schedule", "step"]), 1);
}

/// Writes a toy-geometry backbone in the SAM checkpoint layout.
fn write_sam_file(path: &Path, bb: &Backbone<f32>, drop: Option<&str>) {
    let mut tensors: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    bb.visit(&mut |prm| {
        let rest = prm.name.strip_prefix("backbone.").unwrap();
        if Some(rest) == drop {
            return;
        }
        let s = &prm.shape;
        let (shape, data): (Vec<usize>, Vec<f32>) = if s.len() == 4 && (rest.ends_with("proj.weight") || rest.starts_with("neck.")) {
            let (kh, kw, i, o) = (s[0], s[1], s[2], s[3]);
            let mut v = vec![0.0; prm.value.len()];
            for a in 0..o {
                for b in 0..i {
                    for y in 0..kh {
                        for x in 0..kw {
                            v[((a * i + b) * kh + y) * kw + x] = prm.value[((y * kw + x) * i + b) * o + a];
                        }
                    }
                }
            }
            (vec![o, i, kh, kw], v)
        } else if s.len() == 2 && rest.ends_with(".weight") {
            let (r, c) = (s[0], s[1]);
            let mut v = vec![0.0; r * c];
            for y in 0..r {
                for x in 0..c {
                    v[x * r + y] = prm.value[y * c + x];
                }
            }
            (vec![c, r], v)
        } else {
            (s.clone(), prm.value.clone())
        };
        tensors.push((format!("image_encoder.{rest}"), shape, data.iter().flat_map(|f| f.to_le_bytes()).collect()));
    });
    tensors.push(("mask_decoder.iou_token.weight".into(), vec![1, 4], vec![0; 16]));
    let views: Vec<(String, TensorView<'_>)> = tensors
        .iter()
        .map(|(n, s, d)| (n.clone(), TensorView::new(Dtype::F32, s.clone(), d).unwrap()))
        .collect();
    safetensors::serialize_to_file(views, &None, path).unwrap();
}

#[test]
fn convert_backbone_round_trips_and_trains() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = BackboneConfig::toy();
    cfg.image_size = 64;
    let bb: Backbone<f32> = Backbone::random(&cfg, 5).unwrap();
    let src = tmp.path().join("sam.safetensors");
    write_sam_file(&src, &bb, None);
    let out = tmp.path().join("conv");
    let text = ok(&["convert-backbone", "--variant", "toy", "--image-size", "64", "--in", p(&src), "--out", p(&out)]);
    assert!(text.contains("1 source tensors skipped"), "{text}");
    let (store, meta) = load_checkpoint(&out.join("backbone")).unwrap();
    assert_eq!(meta.extra["parameter_count"].as_u64(), Some(cfg.parameter_count() as u64));
    bb.visit(&mut |prm| {
        let t = store.get(&prm.name).unwrap();
        assert!(!t.trainable);
        assert_eq!(t.record.shape, prm.shape, "{}", prm.name);
        assert_eq!(t.record.data.as_f32().unwrap(), &prm.value[..], "{}", prm.name);
    });

    let data = tmp.path().join("data");
    synth(&data, "3");
    let run = tmp.path().join("run");
    ok(&[
        "train", "--data", p(&data), "--out", p(&run), "--image-size", "64", "--backbone", p(&out.join("backbone")),
        "--max-steps", "2", "--warmup-iters", "1",
    ]);
    let (trained, _) = load_checkpoint(&run.join("last")).unwrap();
    let w = "backbone.blocks.0.attn.qkv.weight";
    assert_eq!(trained.get(w).unwrap().record, store.get(w).unwrap().record);

    let broken = tmp.path().join("broken.safetensors");
    write_sam_file(&broken, &bb, Some("neck.1.bias"));
    let args = ["convert-backbone", "--variant", "toy", "--image-size", "64", "--in", p(&broken), "--out", p(&out)];
    let res = sidetune(&args);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("neck.1.bias"));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["train"]), 1);
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["inspect", "/nonexistent/path"]), 2);
}
