use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde_json::{json, Map, Value};

use sparseflow_core::cnf;
use sparseflow_core::data::DatasetKind;
use sparseflow_core::eval::{
    export_decision_boundary, export_density_grid, export_trajectories, export_vector_field, field_csv,
    good_quality_fraction, trajectory_csv, ClassifierModel, ClassifierObjective,
};
use sparseflow_core::hessian::{flow_hessian_report, HessianReport};
use sparseflow_core::net::mlp_init;
use sparseflow_core::prune::{sparsity, CycleRecord, PruneHistory};
use sparseflow_core::rng::{self, Stream};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::run::{self, drive, flow_model, flow_objective, iter_path, load_data, plan_targets, write_atomic, write_json};

fn require_flow(cfg: &ExperimentConfig) -> Result<(), CliError> {
    if cfg.dataset.kind == DatasetKind::Moons {
        return Err(CliError::Config("moons is a classification task; use `classify`".into()));
    }
    Ok(())
}

/// Trains one flow in `dir`. Returns the prune history.
pub fn train_flow(cfg: &ExperimentConfig, dir: &Path, fresh: bool, label: &str) -> Result<PruneHistory, CliError> {
    require_flow(cfg)?;
    let data = load_data(cfg)?;
    std::fs::create_dir_all(dir)?;
    run::write_data(dir, cfg, &data)?;
    let init = mlp_init::<f64>(&cfg.model, cfg.train.seed).values;
    let trainer = drive(flow_objective(cfg, &data), init, cfg, dir, fresh, label)?;
    Ok(trainer.history().clone())
}

pub fn train(cfg: &ExperimentConfig, fresh: bool) -> Result<(), CliError> {
    let h = train_flow(cfg, &cfg.output_dir, fresh, "train")?;
    let best = h
        .records
        .iter()
        .min_by(|a, b| a.val_score.total_cmp(&b.val_score))
        .expect("at least one cycle");
    println!(
        "best iteration {} (pruned {:.3}, val nll {:.4}, test nll {:.4}); artifacts in {}",
        best.iter,
        best.prune_ratio,
        best.val_nll,
        best.test_nll,
        cfg.output_dir.display()
    );
    Ok(())
}

pub const SWEEP_HEADER: &str = "variant,seed,target_ratio,iter,prune_ratio,params_remaining,train_nll,val_nll,test_nll";
pub const SUMMARY_HEADER: &str =
    "variant,target_ratio,n_seeds,mean_prune_ratio,mean_test_nll,median_test_nll,mean_val_nll,median_val_nll";

struct Cell {
    variant: String,
    seed: u64,
    cfg: ExperimentConfig,
    iters: Vec<usize>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn worker_count(jobs: usize) -> Result<usize, CliError> {
    let n = match std::env::var("SPARSEFLOW_WORKERS") {
        Ok(s) => s
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("SPARSEFLOW_WORKERS must be a positive integer, got `{s}`")))?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    Ok(n.min(jobs).max(1))
}

/// Every (variant, seed) cell trained to the largest target ratio, each in
/// its own directory; one row per (variant, seed, target ratio).
pub fn sweep(cfg: &ExperimentConfig, fresh: bool) -> Result<(), CliError> {
    require_flow(cfg)?;
    let mut cells = Vec::new();
    for v in &cfg.sweep.variants {
        let base = cfg.with_overrides(&v.set)?;
        require_flow(&base)?;
        for &seed in &cfg.sweep.seeds {
            let mut c = base.clone();
            c.dataset.seed = seed;
            c.train.seed = seed;
            c.hessian.seed = seed;
            c.output_dir = cfg.output_dir.join(&v.name).join(format!("seed{seed}"));
            let (iters, c) = plan_targets(&c, &cfg.sweep.target_ratios)?;
            c.validate()?;
            cells.push(Cell {
                variant: v.name.clone(),
                seed,
                cfg: c,
                iters,
            });
        }
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    let workers = worker_count(cells.len())?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<PruneHistory, CliError>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                let label = format!("{}/seed{}", cell.variant, cell.seed);
                let r = train_flow(&cell.cfg, &cell.cfg.output_dir, fresh, &label);
                results.lock().expect("no poisoned lock")[i] = Some(r);
            });
        }
    });
    let results = results.into_inner().expect("no poisoned lock");

    let mut rows = String::from(SWEEP_HEADER);
    rows.push('\n');
    let mut summary = String::from(SUMMARY_HEADER);
    summary.push('\n');
    let histories = results
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect::<Result<Vec<_>, _>>()?;
    let pick = |h: &PruneHistory, iter: usize| -> CycleRecord {
        h.records
            .iter()
            .min_by_key(|r| r.iter.abs_diff(iter))
            .cloned()
            .expect("completed runs have records")
    };
    for v in &cfg.sweep.variants {
        for (k, &target) in cfg.sweep.target_ratios.iter().enumerate() {
            let mut picked = Vec::new();
            for (cell, h) in cells.iter().zip(&histories).filter(|(c, _)| c.variant == v.name) {
                let r = pick(h, cell.iters[k]);
                let _ = writeln!(
                    rows,
                    "{},{},{},{},{},{},{},{},{}",
                    cell.variant,
                    cell.seed,
                    target,
                    r.iter,
                    r.prune_ratio,
                    r.params_remaining,
                    r.train_nll,
                    r.val_nll,
                    r.test_nll
                );
                picked.push(r);
            }
            let col = |f: fn(&CycleRecord) -> f64| picked.iter().map(f).collect::<Vec<_>>();
            let (pr, test, val) = (col(|r| r.prune_ratio), col(|r| r.test_nll), col(|r| r.val_nll));
            let _ = writeln!(
                summary,
                "{},{},{},{},{},{},{},{}",
                v.name,
                target,
                picked.len(),
                mean(&pr),
                mean(&test),
                median(&test),
                mean(&val),
                median(&val)
            );
        }
    }
    write_atomic(&cfg.output_dir.join("sweep.csv"), rows)?;
    write_atomic(&cfg.output_dir.join("summary.csv"), summary)?;
    write_json(&cfg.output_dir.join("sweep.json"), &cfg.to_value())?;
    println!("{} cells; results in {}", cells.len(), cfg.output_dir.join("sweep.csv").display());
    Ok(())
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "checkpoint".into(), |s| s.to_string_lossy().into_owned())
}

fn out_dir(out: Option<&Path>, ckpt: &Path, default: &str) -> PathBuf {
    match out {
        Some(o) => o.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join(default),
    }
}

pub const HESSIAN_NORMALIZED_HEADER: &str = "tag,prune_ratio,lambda_max_rel,trace_rel,kappa_rel";

/// One report per checkpoint, plus ratios to the least pruned checkpoint.
pub fn hessian(ckpts: &[PathBuf], overrides: &Map<String, Value>, out: Option<&Path>) -> Result<(), CliError> {
    let first = ckpts.first().ok_or_else(|| CliError::Usage("hessian needs at least one checkpoint".into()))?;
    let dir = out_dir(out, first, "hessian");
    let mut reports: Vec<(String, f64, HessianReport)> = Vec::new();
    let mut sources = Vec::new();
    for path in ckpts {
        let (ck, hash) = Checkpoint::load(path)?;
        let cfg = ck.config.with_overrides(overrides)?;
        require_flow(&cfg)?;
        let data = load_data(&cfg)?;
        let mut batch = data.train.batch();
        if cfg.eval.hessian_points > 0 {
            batch.truncate(cfg.eval.hessian_points);
        }
        let model = flow_model(&cfg, &ck.state.params, &ck.state.mask)?;
        let pr = sparsity(&ck.state.mask, &cfg.model, cfg.prune.mode);
        let rep = flow_hessian_report(&model, batch, &cfg.hessian).map_err(CliError::runtime)?;
        eprintln!(
            "hessian {}: pruned {pr:.3} lambda_max {:.5} trace {:.5}{}",
            path.display(),
            rep.lambda_max,
            rep.trace,
            if rep.converged { "" } else { " (power iteration not converged)" }
        );
        sources.push(json!({
            "checkpoint": path.display().to_string(),
            "checkpoint_hash": hash,
            "settings": cfg.hessian,
            "points": cfg.eval.hessian_points,
            "converged": rep.converged,
        }));
        reports.push((stem(path), pr, rep));
    }
    std::fs::create_dir_all(&dir)?;
    let mut csv = format!("{}\n", HessianReport::CSV_HEADER);
    for (tag, pr, r) in &reports {
        csv.push_str(&r.csv_row(tag, *pr));
        csv.push('\n');
    }
    let reference = &reports
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("non-empty")
        .2;
    let mut norm = format!("{HESSIAN_NORMALIZED_HEADER}\n");
    for (tag, pr, r) in &reports {
        let (l, t, k) = r.normalized(reference);
        let _ = writeln!(norm, "{tag},{pr},{l},{t},{k}");
    }
    write_atomic(&dir.join("hessian.csv"), csv)?;
    write_atomic(&dir.join("hessian_normalized.csv"), norm)?;
    write_json(&dir.join("hessian.json"), &json!({ "what": "hessian", "sources": sources }))?;
    println!("{} reports in {}", reports.len(), dir.join("hessian.csv").display());
    Ok(())
}

pub const SAMPLES_HEADER: &str = "x,y";
pub const QUALITY_HEADER: &str = "n_std,good_quality_fraction";

/// Samples, mode-coverage metric and grid exports of one flow checkpoint.
pub fn sample(ckpt: &Path, overrides: &Map<String, Value>, out: Option<&Path>) -> Result<(), CliError> {
    let (ck, hash) = Checkpoint::load(ckpt)?;
    let cfg = ck.config.with_overrides(overrides)?;
    require_flow(&cfg)?;
    let dir = out_dir(out, ckpt, &format!("sample_{}", stem(ckpt)));
    std::fs::create_dir_all(&dir)?;
    let ev = &cfg.eval;
    let model = flow_model(&cfg, &ck.state.params, &ck.state.mask)?.with_exact_divergence();
    let seed = ev.sample_seed;

    let xs = cnf::sample(&model, ev.n_samples, seed).map_err(CliError::runtime)?;
    let pts: Vec<[f64; 2]> = xs.iter().map(|x| [x[0], x[1]]).collect();
    let mut s = format!("{SAMPLES_HEADER}\n");
    for p in &pts {
        let _ = writeln!(s, "{},{}", p[0], p[1]);
    }
    write_atomic(&dir.join("samples.csv"), s)?;
    write_json(
        &dir.join("samples.json"),
        &json!({"what": "samples", "n": pts.len(), "seed": seed, "checkpoint_hash": hash}),
    )?;

    let data = load_data(&cfg)?;
    if let (Some(centers), Some(sigma)) = (&data.full.mode_centers, data.full.mode_sigma) {
        let mut q = format!("{QUALITY_HEADER}\n");
        for &k in &ev.n_std {
            let f = good_quality_fraction(&pts, centers, sigma, k).map_err(CliError::runtime)?;
            let _ = writeln!(q, "{k},{f}");
            println!("good-quality fraction at {k} std: {f:.4}");
        }
        write_atomic(&dir.join("quality.csv"), q)?;
    }

    let dens = export_density_grid(&model, &ev.grid).map_err(CliError::runtime)?;
    write_atomic(&dir.join("density.csv"), dens.to_csv())?;
    let mut side = ev.grid.sidecar("density", Some(seed), Some(&hash));
    side["mass"] = json!(dens.mass());
    side["missing"] = json!(dens.missing);
    write_json(&dir.join("density.json"), &side)?;

    let field = export_vector_field(&cfg.model, &ck.state.params, &ck.state.mask, &ev.grid).map_err(CliError::runtime)?;
    write_atomic(&dir.join("field.csv"), field_csv(&field))?;
    write_json(&dir.join("field.json"), &ev.grid.sidecar("field", None, Some(&hash)))?;

    if ev.n_trajectories > 0 {
        let mut r = rng::stream(seed, Stream::Custom(17));
        let z0: Vec<[f64; 2]> = (0..ev.n_trajectories)
            .map(|_| [r.sample(StandardNormal), r.sample(StandardNormal)])
            .collect();
        let rows = export_trajectories(&cfg.model, &ck.state.params, &ck.state.mask, &cfg.solver, &z0, ev.n_time_samples)
            .map_err(CliError::runtime)?;
        write_atomic(&dir.join("trajectories.csv"), trajectory_csv(&rows))?;
        write_json(
            &dir.join("trajectories.json"),
            &json!({"what": "trajectories", "start": "base samples", "seed": seed, "checkpoint_hash": hash}),
        )?;
    }
    println!("sample artifacts in {}", dir.display());
    Ok(())
}

pub const ACCURACY_HEADER: &str = "iter,prune_ratio,params_remaining,train_acc,val_acc,test_acc";

/// Trains the moons classifier through the prune loop and exports the
/// models nearest each requested cumulative prune ratio.
pub fn classify(cfg: &ExperimentConfig, fresh: bool) -> Result<(), CliError> {
    if cfg.dataset.kind != DatasetKind::Moons {
        return Err(CliError::Config("classify needs dataset.kind = moons".into()));
    }
    let (targets, cfg) = plan_targets(cfg, &cfg.eval.classify_ratios)?;
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    let data = load_data(&cfg)?;
    std::fs::create_dir_all(&dir)?;
    run::write_data(&dir, &cfg, &data)?;
    let obj = ClassifierObjective::new(cfg.model.clone(), cfg.solver.clone(), &data.train, &data.val, &data.test)
        .map_err(CliError::runtime)?;
    let init = ClassifierModel::<f64>::init(cfg.model.clone(), cfg.solver.clone(), cfg.train.seed).params;
    let trainer = drive(obj, init, &cfg, &dir, fresh, "classify")?;
    let obj = &trainer.objective;

    let mut acc = format!("{ACCURACY_HEADER}\n");
    for (snap, rec) in trainer.snapshots().iter().zip(&trainer.history().records) {
        let a = obj.accuracies(&snap.params, &snap.mask).map_err(CliError::runtime)?;
        let _ = writeln!(acc, "{},{},{},{},{},{}", rec.iter, rec.prune_ratio, rec.params_remaining, a[0], a[1], a[2]);
    }
    write_atomic(&dir.join("accuracy.csv"), acc)?;

    let mut exports = Vec::new();
    let mut done = Vec::new();
    for (&target, &want) in cfg.eval.classify_ratios.iter().zip(&targets) {
        let Some(snap) = trainer.snapshots().iter().min_by_key(|s| s.iter.abs_diff(want)) else { continue };
        let rec = &trainer.history().records[trainer.snapshots().iter().position(|s| s.iter == snap.iter).expect("present")];
        let model = obj.model(&snap.params, &snap.mask);
        let a = obj.accuracies(&snap.params, &snap.mask).map_err(CliError::runtime)?;
        println!(
            "target {target}: iteration {} pruned {:.3} test accuracy {:.4}",
            snap.iter, rec.prune_ratio, a[2]
        );
        if !done.contains(&snap.iter) {
            let tag = format!("iter_{:03}", snap.iter);
            let b = export_decision_boundary(&model, &cfg.eval.grid, &obj.test.0).map_err(CliError::runtime)?;
            write_atomic(&dir.join(format!("boundary_{tag}.csv")), b.to_csv())?;
            let f = export_vector_field(&cfg.model, &snap.params, &snap.mask, &cfg.eval.grid).map_err(CliError::runtime)?;
            write_atomic(&dir.join(format!("field_{tag}.csv")), field_csv(&f))?;
            let n = cfg.eval.n_trajectories.min(obj.test.0.len());
            if n > 0 {
                let rows =
                    export_trajectories(&cfg.model, &snap.params, &snap.mask, &cfg.solver, &obj.test.0[..n], cfg.eval.n_time_samples)
                        .map_err(CliError::runtime)?;
                write_atomic(&dir.join(format!("trajectories_{tag}.csv")), trajectory_csv(&rows))?;
            }
            done.push(snap.iter);
            exports.push(json!({
                "iter": snap.iter,
                "prune_ratio": rec.prune_ratio,
                "accuracy": {"train": a[0], "val": a[1], "test": a[2]},
                "margin": b.margin,
                "checkpoint_hash": Checkpoint::hash_of(&std::fs::read(iter_path(&dir, snap.iter))?)
                    .map_err(|e| CliError::CorruptCheckpoint(iter_path(&dir, snap.iter), e))?,
            }));
        }
    }
    let mut side = cfg.eval.grid.sidecar("classifier exports", Some(cfg.train.seed), None);
    side["exports"] = Value::Array(exports);
    side["targets"] = json!(cfg.eval.classify_ratios);
    write_json(&dir.join("classify.json"), &side)?;
    println!("classifier artifacts in {}", dir.display());
    Ok(())
}
