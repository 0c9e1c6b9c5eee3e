use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use steinprune::data::load_checkpoint;
use steinprune::experiment::{
    network_specs, prepare_data, read_records, ExperimentConfig, SEED_ENV,
};
use steinprune::svgd::ParticleEnsemble;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_steinprune"));
    c.env_remove(SEED_ENV);
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "{e}: {}\n{}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

/// Writes a small blobs config whose outputs land in `dir/run`.
fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        "seed = 5\n\
         [data]\nkind = \"synthetic_blobs\"\nclasses = 2\nper_class = 150\ndim = 5\n\
         [model]\nhidden = [24]\nparticles = 2\n\
         [train]\nbatch_size = 32\n{epochs}{extra}\n\
         [output]\ndir = '{}'\n",
        dir.join("run").display(),
        epochs = if extra.contains("epochs") {
            ""
        } else {
            "epochs = 12\n"
        },
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn ok(out: Output) -> Output {
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn every_command_has_help() {
    for cmd in [
        &[][..],
        &["train"],
        &["prune"],
        &["analyze"],
        &["sweep"],
        &["crlb"],
        &["export-hist"],
    ] {
        let mut args = cmd.to_vec();
        args.push("--help");
        let out = run(&args);
        assert_eq!(code(&out), 0, "{args:?}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
}

#[test]
fn crlb_cases() {
    for (args, want) in [
        (&["--case", "clean", "--eps2", "1"][..], 1.0),
        (
            &["--case", "model_noise", "--eps2", "1", "--alpha2", "1"],
            0.5,
        ),
        (
            &[
                "--case", "both", "--eps2", "1", "--alpha2", "1", "--beta2", "2",
            ],
            0.25,
        ),
    ] {
        let mut full = vec!["crlb", "--json"];
        full.extend_from_slice(args);
        let v = stdout_json(&ok(run(&full)));
        assert_eq!(v["efficiency"].as_f64(), Some(want), "{args:?}");
    }
    let text = ok(run(&[
        "crlb",
        "--case",
        "data-noise",
        "--eps2",
        "3",
        "--beta2",
        "1",
    ]));
    assert!(String::from_utf8_lossy(&text.stdout).contains("efficiency          0.75"));
    assert_eq!(code(&run(&["crlb", "--case", "clean", "--eps2", "0"])), 2);
    assert_eq!(
        code(&run(&[
            "crlb", "--case", "clean", "--eps2", "1", "--alpha2", "1"
        ])),
        2
    );
}

#[test]
fn invalid_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.toml");
    std::fs::write(
        &missing,
        "[data]\nkind = \"csv\"\npath = 'no/such/file.csv'\n[train]\n",
    )
    .unwrap();
    let out = run(&["train", "--config", missing.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    let typo = dir.path().join("typo.toml");
    std::fs::write(&typo, "[train]\nepochz = 3\n").unwrap();
    let out = run(&["train", "--config", typo.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("train.epochz"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let config = small_config(dir.path(), "");
    assert_eq!(
        code(&run(&[
            "sweep",
            "--config",
            config.to_str().unwrap(),
            "--kind",
            "aleatorik"
        ])),
        2
    );
    assert_eq!(
        code(&run(&[
            "train",
            "--config",
            dir.path().join("none.toml").to_str().unwrap()
        ])),
        2
    );
    assert_eq!(
        code(&run(&[
            "analyze",
            "--checkpoint",
            dir.path().join("none.dllp").to_str().unwrap()
        ])),
        2
    );
}

#[test]
fn prune_arguments_must_fit_the_method() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), "epochs = 1");
    ok(run(&["train", "--config", config.to_str().unwrap()]));
    let ck = dir.path().join("run/checkpoint.dllp");
    let ck = ck.to_str().unwrap();
    for args in [
        &["--method", "dllp_slab", "--sparsity", "0.5"][..],
        &["--method", "magnitude"],
        &[
            "--method",
            "magnitude",
            "--sparsity",
            "0.5",
            "--threshold",
            "0.1",
        ],
        &["--method", "magnitude", "--gate-threshold", "0.5"],
        &["--method", "magnitude", "--sparsity", "1.5"],
        &["--method", "dllp-slab", "--gate-threshold", "1.0"],
    ] {
        let mut full = vec!["prune", "--checkpoint", ck];
        full.extend_from_slice(args);
        assert_eq!(code(&run(&full)), 2, "{args:?}");
    }
    let v = stdout_json(&ok(run(&[
        "prune",
        "--checkpoint",
        ck,
        "--method",
        "magnitude",
        "--sparsity",
        "0",
    ])));
    assert_eq!(v["sparsity"].as_f64(), Some(0.0));
    assert_eq!(v["kept"], v["parameters"]);
}

#[test]
fn zero_epochs_save_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let path = small_config(dir.path(), "epochs = 0");
    ok(run(&["train", "--config", path.to_str().unwrap()]));
    let config = ExperimentConfig::load(&path).unwrap();
    let data = prepare_data(&config).unwrap();
    let init =
        ParticleEnsemble::init(&network_specs(&config, &data.train), 2, &config.train).unwrap();
    let ck = load_checkpoint(&dir.path().join("run/checkpoint.dllp")).unwrap();
    assert_eq!(ck.ensemble, init);
    assert_eq!(ck.progress.unwrap().step, 0);
}

#[test]
fn blobs_run_reaches_high_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let path = small_config(dir.path(), "epochs = 200\nplateau_patience = 1000");
    let summary = stdout_json(&ok(run(&["train", "--config", path.to_str().unwrap()])));
    assert_eq!(summary["epochs_completed"].as_u64(), Some(200));
    let records = read_records(&dir.path().join("run/records.jsonl")).unwrap();
    let last = records
        .iter()
        .rfind(|r| r.metric == "train_accuracy")
        .unwrap();
    // Epoch records count from 0.
    assert_eq!(last.step, Some(199));
    assert!(last.value >= 0.99, "{}", last.value);
    let test = records
        .iter()
        .find(|r| r.metric == "test_accuracy")
        .unwrap();
    assert!(test.value >= 0.99, "{}", test.value);
}

fn metric_lines(path: &Path) -> Vec<(String, Option<u64>, u64)> {
    read_records(path)
        .unwrap()
        .into_iter()
        .map(|r| (r.metric, r.step, r.value.to_bits()))
        .collect()
}

#[test]
fn reruns_and_resumes_reproduce() {
    let dir = tempfile::tempdir().unwrap();
    let path = small_config(dir.path(), "");
    let config = path.to_str().unwrap();
    let records = dir.path().join("run/records.jsonl");
    let checkpoint = dir.path().join("run/checkpoint.dllp");

    ok(run(&["train", "--config", config]));
    let first = metric_lines(&records);
    let unbroken = std::fs::read(&checkpoint).unwrap();
    std::fs::remove_file(&records).unwrap();
    ok(run(&["train", "--config", config]));
    assert_eq!(metric_lines(&records), first);
    assert_eq!(std::fs::read(&checkpoint).unwrap(), unbroken);

    std::fs::remove_file(&records).unwrap();
    let part = stdout_json(&ok(run(&[
        "train",
        "--config",
        config,
        "--max-epochs",
        "5",
    ])));
    assert_eq!(part["epochs_completed"].as_u64(), Some(5));
    assert_ne!(std::fs::read(&checkpoint).unwrap(), unbroken);
    let saved = dir.path().join("partial.dllp");
    std::fs::copy(&checkpoint, &saved).unwrap();
    ok(run(&[
        "train",
        "--config",
        config,
        "--resume",
        saved.to_str().unwrap(),
    ]));
    assert_eq!(std::fs::read(&checkpoint).unwrap(), unbroken);
    let epoch_lines = |v: Vec<(String, Option<u64>, u64)>| -> Vec<_> {
        v.into_iter()
            .filter(|(m, _, _)| m != "test_accuracy" && m != "sparsity")
            .collect()
    };
    assert_eq!(
        epoch_lines(metric_lines(&records)),
        epoch_lines(first.clone())
    );
}

#[test]
fn seed_variable_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = small_config(dir.path(), "epochs = 1");
    let plain = stdout_json(&ok(run(&["train", "--config", path.to_str().unwrap()])));
    let out = bin()
        .args(["train", "--config", path.to_str().unwrap()])
        .env(SEED_ENV, "77")
        .output()
        .unwrap();
    let seeded = stdout_json(&ok(out));
    assert!(plain["run_id"].as_str().unwrap().ends_with("-5"));
    assert!(seeded["run_id"].as_str().unwrap().ends_with("-77"));
    assert_ne!(plain["config_hash"], seeded["config_hash"]);
    let bad = bin()
        .args(["train", "--config", path.to_str().unwrap()])
        .env(SEED_ENV, "seven")
        .output()
        .unwrap();
    assert_eq!(code(&bad), 2);
}

#[test]
fn analysis_and_magnitude_pruning() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = ExperimentConfig::load(
        &Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/blobs_desk.toml"),
    )
    .unwrap();
    config.output.dir = dir.path().join("run");
    steinprune::experiment::cmd_train(&config, &Default::default()).unwrap();
    let ck = dir.path().join("run/checkpoint.dllp");
    let ck = ck.to_str().unwrap();

    let analysis = stdout_json(&ok(run(&["analyze", "--checkpoint", ck])));
    let layers = analysis["layers"].as_array().unwrap();
    assert!(
        layers
            .iter()
            .any(|l| l["spike_at_zero"] == Value::Bool(true)),
        "no layer shows a spike at zero: {analysis}"
    );

    let out = dir.path().join("mag");
    let summary = stdout_json(&ok(run(&[
        "prune",
        "--checkpoint",
        ck,
        "--method",
        "magnitude",
        "--sparsity",
        "0.6",
        "--out",
        out.to_str().unwrap(),
    ])));
    let delta = summary["delta"].as_f64().unwrap();
    assert!(delta > 0.0);
    let pruned_path = PathBuf::from(summary["checkpoint"].as_str().unwrap());
    let pruned = load_checkpoint(&pruned_path).unwrap();
    let mask = pruned.mask.expect("pruned checkpoints carry their mask");
    let p0 = pruned.ensemble.particles()[0].params.flatten();
    let kept = mask.kept_values(&p0);
    assert!(!kept.is_empty());
    assert!(
        kept.iter().all(|w| w.abs() > delta),
        "kept weights inside (-delta, delta)"
    );

    let hist = out.join("kept.csv");
    ok(run(&[
        "export-hist",
        "--checkpoint",
        pruned_path.to_str().unwrap(),
        "--out",
        hist.to_str().unwrap(),
    ]));
    let csv = std::fs::read_to_string(&hist).unwrap();
    for line in csv.lines().skip(1) {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        if cols[0] > -delta && cols[1] < delta {
            assert_eq!(cols[2], 0.0, "bin [{}, {}]", cols[0], cols[1]);
        }
    }
}
