use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sparseflow_cli::run::flow_model;
use sparseflow_cli::Checkpoint;
use sparseflow_core::cnf::log_prob;

const TINY: &str = r#"{
  "dataset": {"kind": "gaussians", "n_points": 120},
  "model": {"layer_sizes": [3, 8, 2]},
  "solver": {"method": "rk4", "fixed_step": 0.25, "backprop": "bptt"},
  "train": {"batch_size": 64},
  "prune": {"epochs_per_cycle": 2, "max_iters": 2, "patience": 5},
  "hessian": {"power_iters": 15, "n_probes": 4},
  "eval": {"grid": {"resolution": 6}, "n_samples": 50, "n_trajectories": 3, "n_time_samples": 3},
  "deterministic": true
}"#;

fn sparseflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparseflow"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn setup() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("tiny.json"), TINY).unwrap();
    d
}

fn train(dir: &Path, out: &str) -> Output {
    sparseflow(dir, &["train", "--config", "tiny.json", "--set", &format!("output_dir={out}")])
}

#[test]
fn train_writes_history_and_checkpoints() {
    let d = setup();
    ok(&train(d.path(), "run"));
    let run = d.path().join("run");
    let hist = fs::read_to_string(run.join("history.csv")).unwrap();
    let mut lines = hist.lines();
    assert_eq!(
        lines.next(),
        Some("iter,prune_ratio,params_remaining,train_nll,val_nll,test_nll,n_evals,seconds")
    );
    let ratios: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(ratios.len(), 3);
    assert_eq!(ratios[0], 0.0);
    assert!(ratios.windows(2).all(|w| w[0] <= w[1]));
    for f in ["iter_000.ckpt", "iter_001.ckpt", "iter_002.ckpt", "best.ckpt", "last.ckpt", "data.csv", "data.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    assert!(fs::read_to_string(run.join("data.csv")).unwrap().starts_with("x,y"));
}

#[test]
fn identical_runs_give_identical_history_bytes() {
    let d = setup();
    ok(&train(d.path(), "a"));
    ok(&train(d.path(), "b"));
    let a = fs::read(d.path().join("a/history.csv")).unwrap();
    let b = fs::read(d.path().join("b/history.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn interrupted_run_resumes_to_the_same_result() {
    let d = setup();
    ok(&train(d.path(), "full"));
    ok(&train(d.path(), "cut"));
    let cut = d.path().join("cut");
    // roll the directory back to the state right after iteration 1
    fs::remove_file(cut.join("iter_002.ckpt")).unwrap();
    fs::copy(cut.join("iter_001.ckpt"), cut.join("last.ckpt")).unwrap();
    ok(&train(d.path(), "cut"));
    assert_eq!(
        fs::read(cut.join("history.csv")).unwrap(),
        fs::read(d.path().join("full/history.csv")).unwrap()
    );
    let (a, _) = Checkpoint::load(&cut.join("iter_002.ckpt")).unwrap();
    let (b, _) = Checkpoint::load(&d.path().join("full/iter_002.ckpt")).unwrap();
    assert_eq!((&a.state.params, &a.state.mask, &a.state.adam), (&b.state.params, &b.state.mask, &b.state.adam));
    assert_eq!((&a.state.batch_rng, &a.state.noise_rng), (&b.state.batch_rng, &b.state.noise_rng));

    // a finished run is not retrained
    let before = fs::metadata(cut.join("iter_002.ckpt")).unwrap().modified().unwrap();
    ok(&train(d.path(), "cut"));
    assert_eq!(fs::metadata(cut.join("iter_002.ckpt")).unwrap().modified().unwrap(), before);

    let changed = sparseflow(d.path(), &["train", "--config", "tiny.json", "--set", "output_dir=cut", "--set", "train.lr=0.001"]);
    assert_eq!(changed.status.code(), Some(3));
    ok(&sparseflow(
        d.path(),
        &["train", "--config", "tiny.json", "--set", "output_dir=cut", "--set", "train.lr=0.001", "--fresh"],
    ));
}

#[test]
fn checkpoint_reload_is_bit_exact() {
    let d = setup();
    ok(&train(d.path(), "run"));
    let path = d.path().join("run/best.ckpt");
    let bytes = fs::read(&path).unwrap();
    let (ck, hash) = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.encode(), bytes);
    assert_eq!(hash.len(), 64);
    let model = flow_model(&ck.config, &ck.state.params, &ck.state.mask).unwrap().with_exact_divergence();
    let again = Checkpoint::decode(&ck.encode()).unwrap();
    let model2 = flow_model(&again.config, &again.state.params, &again.state.mask).unwrap().with_exact_divergence();
    let x = [0.3, -1.7];
    assert_eq!(log_prob(&model, &x).unwrap().to_bits(), log_prob(&model2, &x).unwrap().to_bits());
}

#[test]
fn exit_statuses_are_distinct() {
    let d = setup();
    assert_eq!(sparseflow(d.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(sparseflow(d.path(), &["train", "--set", "train.nope=1"]).status.code(), Some(3));
    assert_eq!(sparseflow(d.path(), &["train", "--set", "solver.backprop=bptt"]).status.code(), Some(3));
    let missing = sparseflow(d.path(), &["hessian", "nowhere.ckpt"]);
    assert_eq!(missing.status.code(), Some(4));
    assert_eq!(String::from_utf8_lossy(&missing.stderr).lines().count(), 1);

    ok(&train(d.path(), "run"));
    let mut bytes = fs::read(d.path().join("run/best.ckpt")).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 0x40;
    fs::write(d.path().join("bad.ckpt"), &bytes).unwrap();
    assert_eq!(sparseflow(d.path(), &["sample", "bad.ckpt"]).status.code(), Some(5));
    assert_eq!(
        sparseflow(d.path(), &["sample", "run/best.ckpt", "--config", "tiny.json"]).status.code(),
        Some(2)
    );
}

#[test]
fn analysis_commands_write_their_tables() {
    let d = setup();
    ok(&train(d.path(), "run"));
    ok(&sparseflow(d.path(), &["hessian", "run/iter_000.ckpt", "run/iter_002.ckpt", "--out", "h"]));
    let h = fs::read_to_string(d.path().join("h/hessian.csv")).unwrap();
    let lines: Vec<&str> = h.lines().collect();
    assert_eq!(lines[0], "tag,prune_ratio,nll,lambda_max,lambda_min,trace,kappa,n_probes,se_trace");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("iter_000,0,"));
    let norm = fs::read_to_string(d.path().join("h/hessian_normalized.csv")).unwrap();
    assert!(norm.lines().nth(1).unwrap().starts_with("iter_000,0,1,1,1"));

    ok(&sparseflow(d.path(), &["sample", "run/best.ckpt", "--out", "s"]));
    let s = d.path().join("s");
    let heads = [
        ("samples.csv", "x,y"),
        ("quality.csv", "n_std,good_quality_fraction"),
        ("field.csv", "x,y,fx,fy,norm"),
        ("trajectories.csv", "sample_id,t,z1,z2"),
    ];
    for (f, head) in heads {
        let text = fs::read_to_string(s.join(f)).unwrap();
        assert_eq!(text.lines().next(), Some(head), "{f}");
    }
    assert_eq!(fs::read_to_string(s.join("samples.csv")).unwrap().lines().count(), 51);
    assert_eq!(fs::read_to_string(s.join("density.csv")).unwrap().lines().count(), 7);
    let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(s.join("density.json")).unwrap()).unwrap();
    assert_eq!(side["checkpoint_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn sweep_emits_one_row_per_cell_and_resumes() {
    let d = setup();
    let sweep = r#"{"seeds": [0, 1], "target_ratios": [0.0, 0.3],
        "variants": [{"name": "sig"}, {"name": "tanh", "set": {"model.activation": "tanh"}}]}"#;
    let args = ["sweep", "--config", "tiny.json", "--set", "output_dir=sw", "--set"];
    let sw = format!("sweep={sweep}");
    let mut full: Vec<&str> = args.to_vec();
    full.push(&sw);
    let out = Command::new(env!("CARGO_BIN_EXE_sparseflow"))
        .current_dir(d.path())
        .env("SPARSEFLOW_WORKERS", "2")
        .args(&full)
        .output()
        .unwrap();
    ok(&out);
    let csv = fs::read_to_string(d.path().join("sw/sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,seed,target_ratio,iter,prune_ratio,params_remaining,train_nll,val_nll,test_nll");
    assert_eq!(lines.len(), 1 + 2 * 2 * 2);
    let summary = fs::read_to_string(d.path().join("sw/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2 * 2);
    assert!(d.path().join("sw/tanh/seed1/history.csv").exists());

    let stamp = fs::metadata(d.path().join("sw/sig/seed0/iter_000.ckpt")).unwrap().modified().unwrap();
    ok(&sparseflow(d.path(), &full));
    assert_eq!(fs::read_to_string(d.path().join("sw/sweep.csv")).unwrap(), csv);
    assert_eq!(
        fs::metadata(d.path().join("sw/sig/seed0/iter_000.ckpt")).unwrap().modified().unwrap(),
        stamp
    );

    let bad = Command::new(env!("CARGO_BIN_EXE_sparseflow"))
        .current_dir(d.path())
        .env("SPARSEFLOW_WORKERS", "zero")
        .args(&full)
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(3));
}

#[test]
fn classify_exports_boundary_and_accuracy() {
    let d = setup();
    let cfg = r#"{
      "dataset": {"kind": "moons", "n_points": 150},
      "model": {"layer_sizes": [3, 8, 2]},
      "solver": {"method": "rk4", "fixed_step": 0.25, "backprop": "bptt"},
      "train": {"batch_size": 64},
      "prune": {"epochs_per_cycle": 2},
      "eval": {"grid": {"resolution": 5}, "classify_ratios": [0.0, 0.3], "n_trajectories": 2, "n_time_samples": 3},
      "output_dir": "cls",
      "deterministic": true
    }"#;
    fs::write(d.path().join("moons.json"), cfg).unwrap();
    ok(&sparseflow(d.path(), &["classify", "--config", "moons.json"]));
    let c = d.path().join("cls");
    let acc = fs::read_to_string(c.join("accuracy.csv")).unwrap();
    assert_eq!(acc.lines().next(), Some("iter,prune_ratio,params_remaining,train_acc,val_acc,test_acc"));
    let last: Vec<&str> = acc.lines().last().unwrap().split(',').collect();
    assert!(last[1].parse::<f64>().unwrap() >= 0.25);
    let b = fs::read_to_string(c.join("boundary_iter_000.csv")).unwrap();
    assert_eq!(b.lines().next(), Some("x,y,p_class1"));
    assert_eq!(b.lines().count(), 26);
    for f in ["field_iter_000.csv", "trajectories_iter_000.csv", "classify.json", "history.csv"] {
        assert!(c.join(f).exists(), "{f} missing");
    }
    assert_eq!(sparseflow(d.path(), &["train", "--config", "moons.json"]).status.code(), Some(3));
}
