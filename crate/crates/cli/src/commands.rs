//! Command implementations behind the `cdg-lab` binary.
//!
//! Exit codes: 0 success, 1 configuration or I/O error, 2 generative
//! collapse detected during training (so sweep scripts can count failures
//! separately from misconfiguration).

use crate::grid::SweepGrid;
use crate::report;
use anyhow::{bail, Context, Result};
use cdg_core::config::{Method, RunConfig};
use cdg_core::losses::CcdWeights;
use cdg_core::model::Denoiser;
use cdg_core::runner::{evaluate_after_task, run_continual};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_COLLAPSE: i32 = 2;

fn fail(e: impl std::fmt::Display) -> i32 {
    eprintln!("error: {e}");
    EXIT_ERROR
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    RunConfig::from_json_bytes(&bytes).with_context(|| format!("config {}", path.display()))
}

pub fn cmd_train(config: &Path, out: &Path, seed: Option<u64>) -> i32 {
    let mut cfg = match load_config(config) {
        Ok(c) => c,
        Err(e) => return fail(format!("{e:#}")),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    match run_continual(&cfg, Some(out)) {
        Ok(rec) if rec.failed() => {
            let c = rec.collapse.as_ref().expect("failed record has collapse info");
            eprintln!(
                "collapse: non-finite loss term `{}` at task {} step {}",
                c.term, c.task, c.step
            );
            EXIT_COLLAPSE
        }
        Ok(rec) => {
            println!(
                "method={} seed={} mf={:.6} imf={:.6} -> {}",
                cfg.method,
                cfg.seed,
                rec.mf.expect("complete run has mf"),
                rec.imf.expect("complete run has imf"),
                out.display()
            );
            EXIT_OK
        }
        Err(e) => fail(e),
    }
}

pub fn cmd_eval(ckpt: &Path, config: &Path, out: Option<&Path>) -> i32 {
    match eval_inner(ckpt, config, out) {
        Ok(()) => EXIT_OK,
        Err(e) => fail(format!("{e:#}")),
    }
}

fn eval_inner(ckpt: &Path, config: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let (model, meta) =
        Denoiser::load_checkpoint(ckpt).with_context(|| format!("checkpoint {}", ckpt.display()))?;
    if meta.task_index == 0 {
        bail!("checkpoint predates training (task_index 0)");
    }
    let row = evaluate_after_task(&model, &cfg, meta.task_index)?;
    for (i, fd) in row.iter().enumerate() {
        println!("after_task={} eval_task={} fd={}", meta.task_index, i + 1, fd);
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let doc = serde_json::json!({
            "checkpoint_seed": meta.seed,
            "after_task": meta.task_index,
            "fd": row,
        });
        std::fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&doc)?)?;
    }
    Ok(())
}

/// Status and aggregates from a finished child run, read tolerantly.
fn read_run_outcome(dir: &Path) -> (String, Option<f64>, Option<f64>) {
    let parse = || -> Option<(String, Option<f64>, Option<f64>)> {
        let text = std::fs::read_to_string(dir.join("run.json")).ok()?;
        let v: serde_json::Value = serde_json::from_str(&text).ok()?;
        let status = v.get("status")?.as_str()?.to_string();
        Some((status, v.get("mf").and_then(|x| x.as_f64()), v.get("imf").and_then(|x| x.as_f64())))
    };
    parse().unwrap_or_else(|| ("missing".to_string(), None, None))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

fn worker_count(jobs: usize) -> Result<usize> {
    let hw = std::thread::available_parallelism().map_or(1, |n| n.get());
    let cap = match std::env::var("CDG_LAB_THREADS") {
        Ok(s) => {
            let n: usize =
                s.parse().with_context(|| format!("CDG_LAB_THREADS {s:?} is not a number"))?;
            if n == 0 {
                bail!("CDG_LAB_THREADS must be >= 1");
            }
            n
        }
        Err(_) => hw,
    };
    Ok(cap.min(jobs).max(1))
}

/// Run `train` child processes over (config, out) pairs; returns exit codes
/// in job order. Child stderr is forwarded when a child fails.
fn run_children(jobs: &[(PathBuf, PathBuf)]) -> Result<Vec<i32>> {
    let exe = std::env::current_exe().context("locating own executable")?;
    let workers = worker_count(jobs.len())?;
    let next = AtomicUsize::new(0);
    let codes = Mutex::new(vec![EXIT_ERROR; jobs.len()]);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let (cfg, out) = &jobs[i];
                let code = match Command::new(&exe)
                    .arg("train")
                    .arg("--config")
                    .arg(cfg)
                    .arg("--out")
                    .arg(out)
                    .output()
                {
                    Ok(o) => {
                        if !o.status.success() {
                            eprint!("{}", String::from_utf8_lossy(&o.stderr));
                        }
                        o.status.code().unwrap_or(EXIT_ERROR)
                    }
                    Err(e) => {
                        eprintln!("error: spawning {}: {e}", exe.display());
                        EXIT_ERROR
                    }
                };
                codes.lock().expect("no poisoned worker")[i] = code;
            });
        }
    });
    Ok(codes.into_inner().expect("workers joined"))
}

pub fn cmd_sweep(config: &Path, grid: &str, out: &Path) -> i32 {
    match sweep_inner(config, grid, out) {
        Ok(code) => code,
        Err(e) => fail(format!("{e:#}")),
    }
}

fn sweep_inner(config: &Path, grid: &str, out: &Path) -> Result<i32> {
    let base = load_config(config)?;
    if base.method != Method::Ccd {
        bail!("sweep varies consistency weights; config must set method \"ccd\"");
    }
    let points = SweepGrid::parse(grid)?.points();

    let mut jobs = Vec::with_capacity(points.len());
    for (i, point) in points.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.ccd = *point;
        cfg.validate()?;
        let dir = out.join(format!("point_{i:03}"));
        std::fs::create_dir_all(&dir)?;
        let cfg_path = dir.join("config.json");
        std::fs::write(&cfg_path, cfg.to_json_pretty())?;
        jobs.push((cfg_path, dir));
    }

    let codes = run_children(&jobs)?;
    let mut summary = String::from("kappa,lambda,eta,mf,imf\n");
    let mut collapsed = 0usize;
    for ((point, (_, dir)), &code) in points.iter().zip(&jobs).zip(&codes) {
        if code == EXIT_ERROR {
            bail!("sweep point under {} failed (exit 1)", dir.display());
        }
        if code == EXIT_COLLAPSE {
            collapsed += 1;
        }
        let (_, mf, imf) = read_run_outcome(dir);
        let _ = writeln!(
            summary,
            "{},{},{},{},{}",
            point.kappa,
            point.lambda,
            point.eta,
            fmt_opt(mf),
            fmt_opt(imf)
        );
    }
    std::fs::write(out.join("sweep_summary.csv"), &summary)?;
    print!("{summary}");
    println!("{} point(s), {collapsed} collapsed -> {}", points.len(), out.display());
    Ok(EXIT_OK)
}

pub fn cmd_ablate(config: &Path, out: &Path) -> i32 {
    match ablate_inner(config, out) {
        Ok(code) => code,
        Err(e) => fail(format!("{e:#}")),
    }
}

/// The five-row component study: the replay base, then the consistency
/// terms stacked one at a time. Weights come from the config's `ccd` block.
fn ablation_rows(w: CcdWeights) -> [(&'static str, &'static str, Method, CcdWeights); 5] {
    let z = CcdWeights::zeros();
    [
        ("base", "0_base", Method::Er, z),
        ("+ikc", "1_ikc", Method::Ccd, CcdWeights { kappa: w.kappa, ..z }),
        ("+ikc+ukc", "2_ikc_ukc", Method::Ccd, CcdWeights { kappa: w.kappa, lambda: w.lambda, ..z }),
        ("+ikc+lkc", "3_ikc_lkc", Method::Ccd, CcdWeights { kappa: w.kappa, eta: w.eta, ..z }),
        ("+ikc+ukc+lkc", "4_full", Method::Ccd, w),
    ]
}

fn ablate_inner(config: &Path, out: &Path) -> Result<i32> {
    let base = load_config(config)?;
    let mut table = String::from("method,mf,imf\n");
    let mut collapsed = 0usize;
    for (label, dir_name, method, weights) in ablation_rows(base.ccd) {
        let mut cfg = base.clone();
        cfg.method = method;
        cfg.ccd = weights;
        cfg.validate()?;
        let dir = out.join(dir_name);
        let rec = run_continual(&cfg, Some(&dir))?;
        if rec.failed() {
            collapsed += 1;
        }
        let _ = writeln!(table, "{label},{},{}", fmt_opt(rec.mf), fmt_opt(rec.imf));
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("ablation.csv"), &table)?;
    print!("{table}");
    if collapsed > 0 {
        println!("{collapsed} row(s) collapsed");
    }
    Ok(EXIT_OK)
}

pub fn cmd_report(runs: &Path, out: Option<&Path>) -> i32 {
    match report_inner(runs, out) {
        Ok(()) => EXIT_OK,
        Err(e) => fail(format!("{e:#}")),
    }
}

fn report_inner(runs: &Path, out: Option<&Path>) -> Result<()> {
    let scan = report::scan_runs(runs)?;
    for w in &scan.warnings {
        eprintln!("warning: {w}");
    }
    let dir = out.unwrap_or(runs);
    std::fs::create_dir_all(dir)?;
    let md = report::report_md(&scan.runs, &scan.warnings);
    std::fs::write(dir.join("report.md"), &md)?;
    std::fs::write(dir.join("comparison.csv"), report::comparison_csv(&scan.runs))?;
    std::fs::write(dir.join("forgetting_curve.csv"), report::forgetting_curve_csv(&scan.runs))?;
    print!("{md}");
    Ok(())
}
