use std::path::{Path, PathBuf};
use std::process::Command;

use activeq::bench::EvalSettings;
use activeq::data::{load_csv, save_csv, Label, Manifest, ManifestEntry, Matrix, RawDataset};
use activeq::engine::read_curve_csv;
use activeq::synth::{generate, suite_name, SynthParams};
use activeq_cli::commands::{cmd_ablate, cmd_eval, cmd_synth, cmd_train, EvalRequest, Preset, SynthRequest};
use activeq_cli::config::{self, AblateConfig, TrainConfig};

fn synth(dir: &Path, seeds: Vec<u64>, n: usize) -> Manifest {
    cmd_synth(&SynthRequest {
        out_dir: dir.to_path_buf(),
        preset: Preset::Standard,
        seeds,
        dims: None,
        n: Some(n),
        anomaly_fraction: None,
    })
    .unwrap()
}

fn train_cfg(dir: &Path, steps: usize) -> TrainConfig {
    let text = format!(
        r#"{{"manifest": "data/manifest.json", "datasets": ["synth_00"], "seed": 3,
            "model_out": "out/model.bin", "log_out": "out/log.csv", "ppo": {{"total_timesteps": {steps}}}}}"#
    );
    let path = dir.join("train.json");
    std::fs::write(&path, text).unwrap();
    config::load(Some(&path), Default::default()).unwrap()
}

#[test]
fn train_writes_model_and_one_log_row_per_rollout() {
    let dir = tempfile::tempdir().unwrap();
    synth(&dir.path().join("data"), vec![0], 300);
    let cfg = train_cfg(dir.path(), 2000);
    let out = cmd_train(&cfg, |_| {}).unwrap();
    assert!(cfg.model_out.exists());
    assert_eq!(out.log.len(), 2000usize.div_ceil(128));
    let log = std::fs::read_to_string(cfg.log_out.as_ref().unwrap()).unwrap();
    assert_eq!(log.lines().count(), 1 + 16);
    assert!(log.starts_with("step,"));
    assert!(log.lines().last().unwrap().starts_with("2048,"));

    let first = std::fs::read(&cfg.model_out).unwrap();
    cmd_train(&cfg, |_| {}).unwrap();
    assert_eq!(std::fs::read(&cfg.model_out).unwrap(), first);
}

#[test]
fn schema_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.json");
    std::fs::write(&path, r#"{"model_out": "m.bin"}"#).unwrap();
    let err = config::load::<TrainConfig>(Some(&path), Default::default()).unwrap_err().to_string();
    assert!(err.contains("missing field `manifest`"), "{err}");
    std::fs::write(&path, r#"{"manifest": "m", "model_out": "m.bin", "k": -1}"#).unwrap();
    let err = config::load::<TrainConfig>(Some(&path), Default::default()).unwrap_err().to_string();
    assert!(err.contains("field `k`"), "{err}");
}

#[test]
fn eval_report_matches_per_run_curve_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, vec![0, 1], 300);
    let cfg = train_cfg(dir.path(), 1280);
    cmd_train(&cfg, |_| {}).unwrap();
    let out = dir.path().join("eval");
    let req = EvalRequest {
        model: Some(cfg.model_out.clone()),
        manifest: data.join("manifest.json"),
        datasets: vec!["synth_01".into()],
        strategies: vec!["meta-policy".into(), "unsupervised".into()],
        settings: EvalSettings {
            budget: 50,
            seeds: vec![0, 1, 2],
            checkpoints: vec![10, 25, 50, 100],
            ..EvalSettings::default()
        },
        out_dir: out.clone(),
    };
    let report = cmd_eval(&req).unwrap();
    // Checkpoints beyond the budget are dropped.
    assert!(report.rows.iter().all(|r| r.checkpoint <= 50));
    let truth = load_csv(data.join("synth_01.csv"), Some("label")).unwrap();
    let labels = truth.labels.unwrap();

    let text = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut checked = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let (method, cp) = (&rec[1], rec[2].parse::<usize>().unwrap());
        let values: Vec<f64> = [0, 1, 2]
            .iter()
            .map(|s| {
                let file = out.join("curves").join(format!("synth_01__{method}__seed{s}.csv"));
                let log = read_curve_csv(std::fs::File::open(file).unwrap()).unwrap();
                // The file's answers must be the oracle's, and the count is by hand.
                for q in &log {
                    assert_eq!(q.answer, labels[q.index]);
                }
                log.iter().take(cp).filter(|q| q.answer == Label::Anomaly).count() as f64
            })
            .collect();
        let mean = values.iter().sum::<f64>() / 3.0;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0;
        assert_eq!(rec[3].parse::<f64>().unwrap(), mean);
        assert!((rec[4].parse::<f64>().unwrap() - (var / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(&rec[5], "3");
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo <= mean && mean <= hi);
        checked += 1;
    }
    assert_eq!(checked, 2 * 3);

    let single = EvalRequest {
        settings: EvalSettings { seeds: vec![4], ..req.settings.clone() },
        out_dir: dir.path().join("single"),
        ..req.clone()
    };
    assert!(cmd_eval(&single).unwrap().rows.iter().all(|r| r.stderr == 0.0 && r.runs == 1));

    let missing = EvalRequest { model: Some(dir.path().join("nope.bin")), ..req.clone() };
    assert!(cmd_eval(&missing).is_err());
    let needs_model = EvalRequest { model: None, ..req };
    assert!(cmd_eval(&needs_model).unwrap_err().to_string().contains("needs a trained model"));
}

#[test]
fn all_anomaly_data_fills_every_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64, (i * 7 % 5) as f64]).collect();
    let ds = RawDataset::new(
        "all",
        vec!["a".into(), "b".into()],
        Matrix::from_rows(&rows).unwrap(),
        Some(vec![Label::Anomaly; 40]),
    )
    .unwrap();
    save_csv(&ds, dir.path().join("all.csv")).unwrap();
    Manifest {
        datasets: vec![ManifestEntry { name: "all".into(), path: "all.csv".into(), label_column: Some("label".into()) }],
    }
    .write(dir.path().join("manifest.json"))
    .unwrap();
    let model = dir.path().join("m.bin");
    activeq::PolicyModel::init(Default::default(), 1).save(&model).unwrap();
    let report = cmd_eval(&EvalRequest {
        model: Some(model),
        manifest: dir.path().join("manifest.json"),
        datasets: vec![],
        strategies: vec!["meta-policy".into(), "unsupervised".into()],
        settings: EvalSettings { budget: 40, seeds: vec![0, 1], checkpoints: vec![10, 20, 40], ..Default::default() },
        out_dir: dir.path().join("out"),
    })
    .unwrap();
    assert_eq!(report.rows.len(), 6);
    for r in &report.rows {
        assert_eq!(r.mean, r.checkpoint as f64);
    }
}

#[test]
fn unlabeled_data_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("u.csv"), "a,b\n1,2\n3,4\n5,7\n").unwrap();
    Manifest { datasets: vec![ManifestEntry { name: "u".into(), path: "u.csv".into(), label_column: None }] }
        .write(dir.path().join("manifest.json"))
        .unwrap();
    let err = cmd_eval(&EvalRequest {
        model: None,
        manifest: dir.path().join("manifest.json"),
        datasets: vec![],
        strategies: vec!["unsupervised".into()],
        settings: EvalSettings::default(),
        out_dir: dir.path().join("out"),
    })
    .unwrap_err();
    assert!(err.to_string().contains("no labels"), "{err}");
}

#[test]
fn synth_files_round_trip_and_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let manifest = synth(&a, vec![0, 1, 2], 2000);
    synth(&b, vec![0, 1, 2], 2000);
    assert_eq!(manifest.datasets.len(), 3);
    for (i, e) in manifest.datasets.iter().enumerate() {
        let pa = a.join(&e.path);
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(b.join(&e.path)).unwrap());
        let ds = load_csv(&pa, Some("label")).unwrap();
        assert_eq!(ds.anomaly_count(), Some(60));
        assert_eq!(ds.d(), [2, 4, 8][i]);
        let direct = generate(&suite_name(i as u64), &SynthParams { d: ds.d(), seed: i as u64, ..Default::default() }).unwrap();
        assert_eq!(ds.x, direct.dataset.x);
        assert_eq!(ds.labels, direct.dataset.labels);
    }
    let (read, _) = Manifest::read(a.join("manifest.json")).unwrap();
    assert_eq!(read, manifest);

    let bad = SynthRequest {
        out_dir: dir.path().join("bad"),
        preset: Preset::Standard,
        seeds: vec![0],
        dims: None,
        n: None,
        anomaly_fraction: Some(1.5),
    };
    assert!(cmd_synth(&bad).is_err());
    assert!(cmd_synth(&SynthRequest { dims: Some(vec![0]), anomaly_fraction: None, ..bad.clone() }).is_err());
    let toy = cmd_synth(&SynthRequest { preset: Preset::Toy, anomaly_fraction: None, ..bad }).unwrap();
    let ds = load_csv(dir.path().join("bad").join(&toy.datasets[0].path), Some("label")).unwrap();
    assert_eq!((ds.n(), ds.d(), ds.anomaly_count()), (500, 2, Some(10)));
}

#[test]
fn ablation_emits_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    synth(&dir.path().join("data"), vec![0, 1], 300);
    let text = r#"{"bench": {"manifest": "data/manifest.json", "train": ["synth_00"], "eval": ["synth_01"],
                   "out_dir": "abl", "budget": 20, "checkpoints": [10, 20], "runs": 2,
                   "ppo": {"total_timesteps": 256}},
                   "feature_drops": [[1, 2, 3]], "negative_rewards": [-10, -0.1], "gammas": [0.1, 0.6, 0.99]}"#;
    let path = dir.path().join("ablate.json");
    std::fs::write(&path, text).unwrap();
    let cfg: AblateConfig = config::load(Some(&path), Default::default()).unwrap();
    let rows = cmd_ablate(&cfg, 0).unwrap();
    assert_eq!(rows.len(), 6);
    let summary = std::fs::read_to_string(dir.path().join("abl/ablation.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(
        lines[0],
        "variant,drop_features,negative_reward,gamma,checkpoint,meta-policy_mean,meta-policy_stderr,unsupervised_mean,unsupervised_stderr"
    );
    assert!(lines[1].starts_with("drop_1-2-3,1-2-3,-0.1,0.6,20,"));
    assert!(lines.iter().any(|l| l.starts_with("reward_-10,none,-10.0,")));
    assert!(lines.iter().any(|l| l.starts_with("reward_-0.1,none,-0.1,")));
    let gammas: Vec<&str> = lines.iter().filter(|l| l.starts_with("gamma_")).cloned().collect();
    assert_eq!(gammas.len(), 3);

    // The summary is recomputable from the variant's own report.
    let report = std::fs::read_to_string(dir.path().join("abl/gamma_0.6/report.csv")).unwrap();
    let unsup: Vec<f64> = report
        .lines()
        .filter(|l| l.starts_with("synth_01,unsupervised,20,"))
        .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
        .collect();
    assert_eq!(unsup.len(), 1);
    let row = rows.iter().find(|r| r.variant == "gamma_0.6").unwrap();
    assert_eq!(row.methods[1].1, unsup[0]);
}

fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_activeq"))
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("t.json");
    std::fs::write(&cfg, r#"{"model_out": "m.bin"}"#).unwrap();
    let out = Command::new(bin()).args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest"));

    let out = Command::new(bin()).args(["bench", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success(), "bench without --seed must fail");

    let data = dir.path().join("data");
    let out = Command::new(bin())
        .args(["synth", "--seeds", "0-1", "--n", "200", "--out"])
        .arg(&data)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("synth_01.csv").exists());

    let out = Command::new(bin())
        .args(["train", "--quiet", "--timesteps", "256", "--datasets", "synth_00", "--manifest"])
        .arg(data.join("manifest.json"))
        .arg("--model-out")
        .arg(dir.path().join("m.bin"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = Command::new(bin())
        .args(["eval", "--runs", "2", "--budget", "20", "--datasets", "synth_01", "--manifest"])
        .arg(data.join("manifest.json"))
        .arg("--model")
        .arg(dir.path().join("m.bin"))
        .arg("--out")
        .arg(dir.path().join("eval"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("eval/report.csv").exists());
    let out = Command::new(bin())
        .args(["eval", "--strategies", "random-walk", "--manifest"])
        .arg(data.join("manifest.json"))
        .arg("--out")
        .arg(dir.path().join("e2"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown strategy"));
}
