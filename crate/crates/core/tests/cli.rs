use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use adamoge::checkpoint::Checkpoint;
use adamoge::cli::{self, CHECKPOINT_FILE, REPORT_FILE};
use adamoge::config::RunConfig;
use adamoge::data::{self, NormStats, SeriesTable};
use adamoge::moge::AdaMoGe;
use adamoge::training::EvalReport;

const BIN: &str = env!("CARGO_BIN_EXE_adamoge");

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn dataset() -> PathBuf {
    repo().join("data/synthetic_two_tone.csv")
}

/// Small, fast settings on the bundled dataset.
fn quick_args(out: &Path) -> Vec<String> {
    let mut a = vec!["--config".into(), repo().join("configs/synthetic.conf").display().to_string()];
    for kv in [
        format!("data.path={}", dataset().display()),
        "data.split=2000,2500,3000".into(),
        "model.e_max=3".into(),
        "model.feature_dim=4".into(),
        "train.epochs=2".into(),
    ] {
        a.push("--override".into());
        a.push(kv);
    }
    a.push("--out".into());
    a.push(out.display().to_string());
    a
}

fn run(sub: &str, args: &[String], extra: &[&str]) -> Output {
    Command::new(BIN)
        .arg(sub)
        .args(args)
        .args(extra)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn report(dir: &Path) -> EvalReport {
    EvalReport::from_json(&std::fs::read_to_string(dir.join(REPORT_FILE)).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_then_eval_reproduces_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let args = quick_args(tmp.path());
    let o = run("train", &args, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(tmp.path().join(CHECKPOINT_FILE).exists());
    let trained = report(tmp.path());
    let printed: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let keys: Vec<&str> = printed.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys.len(), 7);
    for k in ["dataset", "horizon", "mse", "mae", "params", "seconds", "fingerprint"] {
        assert!(keys.contains(&k), "missing {k}");
    }

    let o = run("eval", &args, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let evaluated = EvalReport::from_json(std::str::from_utf8(&o.stdout).unwrap()).unwrap();
    assert_eq!(evaluated.mse, trained.mse);
    assert_eq!(evaluated.mae, trained.mae);
    assert_eq!(evaluated.digest(), trained.digest());

    let csv = std::fs::read_to_string(tmp.path().join(cli::REPORTS_CSV)).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
    assert!(csv.starts_with("dataset,horizon,mse,mae,params,seconds,fingerprint"));

    // Horizon changes the fingerprint.
    let o = run("eval", &args, &["--override", "data.horizon=48"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("fingerprint"), "{}", stderr(&o));

    // A learning-rate change alters the fingerprint but not the shapes.
    let o = run("eval", &args, &["--override", "train.base_lr=0.01"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(
        "eval",
        &args,
        &["--override", "train.base_lr=0.01", "--allow-fingerprint-mismatch"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn same_seed_gives_identical_report_hashes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let o = run("train", &quick_args(d.path()), &["--override", "train.seed=7"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (ra, rb) = (report(a.path()), report(b.path()));
    assert_eq!(ra.digest(), rb.digest());
    let ca = std::fs::read(a.path().join(CHECKPOINT_FILE)).unwrap();
    let cb = std::fs::read(b.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ca, cb);
}

#[test]
fn missing_dataset_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(
        "train",
        &quick_args(tmp.path()),
        &["--override", "data.path=/definitely/not/here.csv"],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/definitely/not/here.csv"), "{}", stderr(&o));
}

#[test]
fn usage_and_config_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run("train", &quick_args(tmp.path()), &["--override", "model.e_maks=3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model.e_maks"));
    let o = Command::new(BIN).arg("frobnicate").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let o = Command::new(BIN).arg("--help").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let help = String::from_utf8_lossy(&o.stdout);
    for c in ["train", "eval", "predict", "inspect-spectrum"] {
        assert!(help.contains(c));
    }
}

/// Writes a config and an untrained checkpoint for `table`, returning the config.
fn untrained_checkpoint(dir: &Path, table_path: &Path, stats: &NormStats, variables: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    for kv in [
        format!("data.path={}", table_path.display()),
        "data.kind=ratio".into(),
        "data.lookback=32".into(),
        "data.horizon=16".into(),
        "model.e_max=3".into(),
        "model.feature_dim=4".into(),
        format!("output.dir={}", dir.display()),
    ] {
        cfg.apply_override(&kv).unwrap();
    }
    let model = AdaMoGe::new(cfg.layer_config(variables).unwrap(), 1).unwrap();
    Checkpoint::from_model(&model, stats, cfg.fingerprint_bytes())
        .save(dir.join(CHECKPOINT_FILE))
        .unwrap();
    cfg
}

fn constant_table(rows: usize, c: f64) -> SeriesTable {
    let mut t = data::synthetic_tones(rows, 2, 16, &[1], 60.0, 0).unwrap();
    t.values.data_mut().iter_mut().for_each(|x| *x = c);
    t
}

#[test]
fn predict_boundaries_and_original_units() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("const.csv");
    let c = 123.25;
    let table = constant_table(200, c);
    data::write_csv(&table, &path).unwrap();
    let stats = data::fit_norm(&table, 0..140).unwrap();
    let cfg = untrained_checkpoint(tmp.path(), &path, &stats, 2);
    let ck = tmp.path().join(CHECKPOINT_FILE);

    let out = cli::cmd_predict(&cfg, &ck, &path, 32, false).unwrap();
    let text = std::fs::read_to_string(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "section,row,timestamp,x0,x1");
    assert_eq!(lines.len(), 1 + 32 + 16);
    assert!(lines[1].starts_with("lookback,0,"));
    assert!(lines[33].starts_with("forecast,32,"));
    for l in &lines[33..] {
        for v in l.split(',').skip(3) {
            let v: f64 = v.parse().unwrap();
            assert!((v - c).abs() < 1e-9, "{v}");
        }
    }
    let err = cli::cmd_predict(&cfg, &ck, &path, 31, false).unwrap_err();
    assert_eq!(err.exit_code(), 2);

    // Forecasting past the end of the table extrapolates timestamps.
    let out = cli::cmd_predict(&cfg, &ck, &path, 200, false).unwrap();
    let text = std::fs::read_to_string(out).unwrap();
    assert_eq!(text.lines().count(), 1 + 32 + 16);

    // Through the binary as well.
    let args = [
        "--override".to_string(),
        format!("data.path={}", path.display()),
    ];
    let base: Vec<String> = cfg
        .entries()
        .into_iter()
        .flat_map(|(k, v)| ["--override".to_string(), format!("{k}={v}")])
        .chain(args)
        .collect();
    let o = run("predict", &base, &["--origin", "32"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run("predict", &base, &["--origin", "31"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_expert_model_scores_target_second_moment() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = data::load_csv(dataset()).unwrap();
    let mut cfg = RunConfig::default();
    for kv in [
        format!("data.path={}", dataset().display()),
        "data.split=2000,2500,3000".into(),
        "model.e_max=3".into(),
        "model.feature_dim=4".into(),
        format!("output.dir={}", tmp.path().display()),
    ] {
        cfg.apply_override(&kv).unwrap();
    }
    let prepared = cfg.prepare(&raw).unwrap();
    let mut model = AdaMoGe::new(cfg.layer_config(2).unwrap(), 4).unwrap();
    for p in model.store.iter_mut().filter(|p| p.name.contains(".experts.")) {
        p.value.fill(0.0);
    }
    let ck = tmp.path().join(CHECKPOINT_FILE);
    Checkpoint::from_model(&model, &prepared.stats, cfg.fingerprint_bytes())
        .save(&ck)
        .unwrap();
    let report = cli::cmd_eval(&cfg, &ck, false).unwrap();

    // Oracle straight from the CSV text.
    let mut rdr = csv::Reader::from_path(dataset()).unwrap();
    let rows: Vec<[f64; 2]> = rdr
        .records()
        .map(|r| {
            let r = r.unwrap();
            [r[1].parse().unwrap(), r[2].parse().unwrap()]
        })
        .collect();
    let (l, h) = (96, 96);
    let mut mean = [0.0; 2];
    let mut sd = [0.0; 2];
    for j in 0..2 {
        mean[j] = rows[..2000].iter().map(|r| r[j]).sum::<f64>() / 2000.0;
        sd[j] = (rows[..2000].iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / 2000.0).sqrt();
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for s in (2500 - l)..=(3000 - l - h) {
        for r in &rows[s + l..s + l + h] {
            for j in 0..2 {
                sum += ((r[j] - mean[j]) / sd[j]).powi(2);
                n += 1;
            }
        }
    }
    let expect = sum / n as f64;
    assert!((report.mse - expect).abs() < 1e-6, "{} vs {expect}", report.mse);
}

#[test]
fn inspect_spectrum_writes_all_sections() {
    let tmp = tempfile::tempdir().unwrap();
    let table = data::load_csv(dataset()).unwrap();
    let stats = data::fit_norm(&table, 0..2000).unwrap();
    let cfg = untrained_checkpoint(tmp.path(), &dataset(), &stats, 2);
    let out = cli::cmd_inspect_spectrum(&cfg, &tmp.path().join(CHECKPOINT_FILE), &dataset(), 10, false).unwrap();
    let text = std::fs::read_to_string(out).unwrap();
    assert!(text.starts_with("block,section,index,subindex,value\n"));
    for s in [
        "mu", "intensity", "filter_f1", "filter_f2", "filter_sigma", "response", "gate_prob", "weight", "k_hat",
        ",k,", "selected",
    ] {
        assert!(text.contains(s), "missing {s}");
    }
    let response = text.lines().filter(|l| l.contains(",response,")).count();
    assert_eq!(response, 3 * 17);
    let err = cli::cmd_inspect_spectrum(&cfg, &tmp.path().join(CHECKPOINT_FILE), &dataset(), 7990, false);
    assert!(err.is_err());
}
