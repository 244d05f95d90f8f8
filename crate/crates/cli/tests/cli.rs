use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use cro_cli::checkpoint::{Checkpoint, Metadata, FORMAT_VERSION};
use cro_cli::config::{hex_digest, RunConfig};
use cro_core::problems::{data::load_csv, GmmSpec, Schema};
use cro_core::train::{read_metrics_csv, train, TrainConfig};
use tempfile::TempDir;

const CONFIG: &str = r#"
task = "portfolio"
alphas = [0.1]
seeds = [0]

[split]
sizes = [600, 400, 1000]

[train]
method = "E2E"
representation = "ellipsoid"
epochs = 3
pretrain_epochs = 3
hidden = [16, 16]
batch_size = 128

[train.solver]
rho = 0.05
"#;

fn cro(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cro"))
        .args(args)
        .current_dir(dir)
        .env_remove("CRO_SEED")
        .env_remove("CRO_THREADS")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup() -> TempDir {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("cfg.toml"), CONFIG).unwrap();
    let o = cro(
        dir.path(),
        &[
            "gen-data",
            "portfolio",
            "--n",
            "2000",
            "--seed",
            "0",
            "--out",
            "p.csv",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    dir
}

#[test]
fn gen_data_portfolio_rows_and_round_trip() {
    let dir = setup();
    let rep = load_csv(&dir.path().join("p.csv"), Schema::Portfolio).unwrap();
    assert_eq!(rep.dataset.len(), 2000);
    assert_eq!(rep.nan_rows, 0);
    let direct = GmmSpec::default().sample(2000, 0).unwrap();
    let max_diff = rep
        .dataset
        .y
        .data()
        .iter()
        .zip(direct.y.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(max_diff < 1e-12, "csv round trip drifted by {max_diff}");
    assert!(dir.path().join("p.csv.config.toml").exists());
    assert!(dir.path().join("p.csv.build.json").exists());
}

#[test]
fn gen_data_battery_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let mut hashes = Vec::new();
    for name in ["a.csv", "b.csv"] {
        let o = cro(
            dir.path(),
            &[
                "gen-data", "battery", "--days", "400", "--seed", "1", "--out", name,
            ],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        hashes.push(hex_digest(&std::fs::read(dir.path().join(name)).unwrap()));
    }
    assert_eq!(hashes[0], hashes[1]);
    let rep = load_csv(&dir.path().join("a.csv"), Schema::Battery).unwrap();
    assert_eq!(rep.dataset.len(), 400);
    assert_eq!(rep.dataset.y_dim(), 24);
}

#[test]
fn path_collision_needs_force() {
    let dir = setup();
    let o = cro(
        dir.path(),
        &["gen-data", "portfolio", "--n", "50", "--out", "p.csv"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--force"));
    let o = cro(
        dir.path(),
        &[
            "gen-data",
            "portfolio",
            "--n",
            "50",
            "--out",
            "p.csv",
            "--force",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one() {
    let dir = setup();
    assert_eq!(
        cro(dir.path(), &["train", "--bogus"]).status.code(),
        Some(1)
    );
    assert_eq!(cro(dir.path(), &["no-such-command"]).status.code(), Some(1));
    std::fs::write(
        dir.path().join("bad.toml"),
        "[train]\nlearning_rate = 0.1\n",
    )
    .unwrap();
    let o = cro(
        dir.path(),
        &[
            "train", "--config", "bad.toml", "--data", "p.csv", "--out", "r",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
    assert_eq!(cro(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn full_pipeline_smoke() {
    let dir = setup();
    let p = dir.path();
    let start = Instant::now();

    let o = cro(
        p,
        &[
            "train", "--config", "cfg.toml", "--data", "p.csv", "--out", "run",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "model.ckpt",
        "train.csv",
        "cal.csv",
        "test.csv",
        "history.csv",
        "run.config.toml",
        "run.build.json",
    ] {
        assert!(p.join("run").join(f).exists(), "missing {f}");
    }
    let resolved = RunConfig::load(&p.join("run/run.config.toml")).unwrap();
    assert_eq!(resolved.train.epochs, 3);

    let o = cro(
        p,
        &[
            "eval",
            "--checkpoint",
            "run/model.ckpt",
            "--data",
            "run/test.csv",
            "--out",
            "m.csv",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("calibration required"),
        "{}",
        stderr(&o)
    );

    let o = cro(
        p,
        &[
            "calibrate",
            "--checkpoint",
            "run/model.ckpt",
            "--data",
            "run/cal.csv",
        ],
    );
    assert_eq!(
        o.status.code(),
        Some(1),
        "overwriting the input needs --force"
    );
    let o = cro(
        p,
        &[
            "calibrate",
            "--checkpoint",
            "run/model.ckpt",
            "--data",
            "run/cal.csv",
            "--out",
            "run/cal.ckpt",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));

    let o = cro(
        p,
        &[
            "eval",
            "--checkpoint",
            "run/cal.ckpt",
            "--data",
            "run/test.csv",
            "--out",
            "m.csv",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let header = std::fs::read_to_string(p.join("m.csv")).unwrap();
    assert_eq!(
        header.lines().next().unwrap(),
        "seed,alpha,representation,method,task_loss_mean,task_loss_std,coverage,robust_value_mean,wall_time_s"
    );
    let rows = read_metrics_csv(&p.join("m.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(
        (rows[0].method.as_str(), rows[0].representation.as_str()),
        ("E2E", "ellipsoid")
    );
    assert!(rows[0].coverage > 0.8 && rows[0].coverage < 0.98);

    let o = cro(
        p,
        &[
            "solve",
            "--checkpoint",
            "run/model.ckpt",
            "--cal",
            "run/cal.csv",
            "--alpha",
            "0.1",
            "--x",
            "0.5,-1.0",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let z: Vec<f64> = serde_json::from_value(v["z"].clone()).unwrap();
    assert_eq!(z.len(), 2);
    assert!((z.iter().sum::<f64>() - 1.0).abs() < 1e-6 && z.iter().all(|w| *w > -1e-8));
    assert!(v["q"].as_f64().unwrap() > 0.0 && v["robust_value"].is_number());

    assert!(start.elapsed() < Duration::from_secs(300));
}

#[test]
fn seed_and_threads_from_environment() {
    let dir = setup();
    let o = Command::new(env!("CARGO_BIN_EXE_cro"))
        .args([
            "train", "--config", "cfg.toml", "--data", "p.csv", "--out", "run", "--epochs", "1",
        ])
        .current_dir(dir.path())
        .env("CRO_SEED", "7")
        .env("CRO_THREADS", "2")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let resolved = RunConfig::load(&dir.path().join("run/run.config.toml")).unwrap();
    assert_eq!(resolved.seeds, vec![7]);
    assert_eq!(resolved.train.seed, 7);
    assert_eq!(resolved.train.threads, 2);
}

fn small_checkpoint() -> Checkpoint {
    let ds = GmmSpec::default().sample(300, 3).unwrap();
    let task = cro_core::problems::TaskSpec::portfolio(2).unwrap();
    let cfg = RunConfig {
        train: TrainConfig {
            method: cro_core::train::Method::Eto,
            representation: cro_core::models::Representation::Picnn,
            epochs: 1,
            hidden: vec![8],
            batch_size: 64,
            ..Default::default()
        },
        ..Default::default()
    };
    let (mut pred, report) = train(&cfg.train, &ds, &task).unwrap();
    pred.calibrate(&GmmSpec::default().sample(100, 4).unwrap(), 0.1)
        .unwrap();
    Checkpoint {
        predictor: pred,
        metadata: Metadata::new(&cfg, 3, &report).unwrap(),
    }
}

#[test]
fn checkpoint_reload_is_bit_exact() {
    let ck = small_checkpoint();
    let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    let probe = GmmSpec::default().sample(50, 9).unwrap();
    let a = ck.predictor.scores(&probe).unwrap();
    let b = back.predictor.scores(&probe).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(back.predictor.calibration, ck.predictor.calibration);
    assert_eq!(back.metadata, ck.metadata);
}

#[test]
fn checkpoint_version_mismatch_names_versions() {
    let mut bytes = small_checkpoint().to_bytes().unwrap();
    bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
    assert!(
        err.contains(&format!("version {}", FORMAT_VERSION + 1)),
        "{err}"
    );
    assert!(err.contains(&format!("version {FORMAT_VERSION}")), "{err}");
    assert!(Checkpoint::from_bytes(b"not a checkpoint at all").is_err());
}

#[test]
fn numerical_failure_exits_two() {
    let dir = setup();
    let mut ck = small_checkpoint();
    let params = &mut ck.predictor.model.params;
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        params.get_mut(id).data_mut().fill(f64::NAN);
    }
    ck.predictor.calibration = None;
    ck.save(&dir.path().join("nan.ckpt")).unwrap();
    let o = cro(
        dir.path(),
        &[
            "calibrate",
            "--checkpoint",
            "nan.ckpt",
            "--data",
            "p.csv",
            "--out",
            "out.ckpt",
        ],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["portfolio.toml", "battery.toml"] {
        RunConfig::load(&root.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}
