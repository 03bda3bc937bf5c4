//! Aggregation over completed run directories: a comparison table plus the
//! line-plot data for first-task fidelity against training progress.
//!
//! Readers are tolerant: a directory whose artifacts are missing or
//! unreadable is skipped with a warning instead of failing the whole
//! report, so one broken run cannot hide the rest.

use anyhow::{ensure, Context, Result};
use cdg_core::metrics::FidelityMatrix;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug)]
pub struct RunSummary {
    /// Directory path relative to the scanned root, `/`-separated.
    pub name: String,
    pub method: String,
    pub seed: u64,
    pub status: String,
    pub mf: Option<f64>,
    pub imf: Option<f64>,
    pub fidelity: FidelityMatrix,
}

pub struct ScanOutcome {
    pub runs: Vec<RunSummary>,
    pub warnings: Vec<String>,
}

/// Find every `run.json` under `root` (recursively) and load the usable
/// ones. Errors only when no `run.json` exists at all.
pub fn scan_runs(root: &Path) -> Result<ScanOutcome> {
    let mut files = Vec::new();
    collect_run_files(root, &mut files)?;
    ensure!(!files.is_empty(), "no run.json found under {}", root.display());
    files.sort();

    let mut runs = Vec::new();
    let mut warnings = Vec::new();
    for path in files {
        let name = path
            .parent()
            .and_then(|d| d.strip_prefix(root).ok())
            .map(|r| r.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"))
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| ".".to_string());
        match load_run(&path, &name) {
            Ok(run) => runs.push(run),
            Err(e) => warnings.push(format!("skipping {name}: {e}")),
        }
    }
    runs.sort_by(|a, b| {
        (a.method.as_str(), a.seed, a.name.as_str())
            .cmp(&(b.method.as_str(), b.seed, b.name.as_str()))
    });
    Ok(ScanOutcome { runs, warnings })
}

fn collect_run_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries =
        std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
    for entry in entries {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_run_files(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == "run.json") {
            out.push(path);
        }
    }
    Ok(())
}

fn load_run(run_json: &Path, name: &str) -> Result<RunSummary> {
    let text = std::fs::read_to_string(run_json)?;
    let v: serde_json::Value = serde_json::from_str(&text).context("run.json is not JSON")?;
    let status = v
        .get("status")
        .and_then(|s| s.as_str())
        .context("run.json has no status")?
        .to_string();
    let method = v
        .pointer("/config/method")
        .and_then(|m| m.as_str())
        .context("run.json has no config.method")?
        .to_string();
    let seed =
        v.pointer("/config/seed").and_then(|s| s.as_u64()).context("run.json has no config.seed")?;
    let mf = v.get("mf").and_then(|x| x.as_f64());
    let imf = v.get("imf").and_then(|x| x.as_f64());
    let fm_path = run_json.with_file_name("fidelity_matrix.csv");
    let fm_text = std::fs::read_to_string(&fm_path)
        .with_context(|| format!("missing fidelity matrix {}", fm_path.display()))?;
    let fidelity = FidelityMatrix::from_csv(&fm_text).context("bad fidelity matrix")?;
    Ok(RunSummary { name: name.to_string(), method, seed, status, mf, imf, fidelity })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

/// `run,method,seed,status,mf,imf` — one row per usable run.
pub fn comparison_csv(runs: &[RunSummary]) -> String {
    let mut out = String::from("run,method,seed,status,mf,imf\n");
    for r in runs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.name,
            r.method,
            r.seed,
            r.status,
            fmt_opt(r.mf),
            fmt_opt(r.imf)
        );
    }
    out
}

/// First-task fidelity against training progress: `d[k][0]` after every
/// completed task `k`, one row per (run, k), `after_task` 1-based.
pub fn forgetting_curve_csv(runs: &[RunSummary]) -> String {
    let mut out = String::from("run,method,seed,after_task,fd_task1\n");
    for r in runs {
        for (k, row) in r.fidelity.rows().iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{},{}", r.name, r.method, r.seed, k + 1, row[0]);
        }
    }
    out
}

pub fn report_md(runs: &[RunSummary], warnings: &[String]) -> String {
    let mut out = String::from("# Run comparison\n\n");
    let _ = writeln!(out, "{} run(s) aggregated.\n", runs.len());
    out.push_str("| run | method | seed | status | MF | IMF |\n");
    out.push_str("|---|---|---|---|---|---|\n");
    for r in runs {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} |",
            r.name,
            r.method,
            r.seed,
            r.status,
            fmt_opt(r.mf),
            fmt_opt(r.imf)
        );
    }
    out.push_str("\n## Forgetting curve (first-task fidelity by training progress)\n\n");
    out.push_str("| run | ");
    let max_k = runs.iter().map(|r| r.fidelity.rows().len()).max().unwrap_or(0);
    for k in 1..=max_k {
        let _ = write!(out, "after task {k} | ");
    }
    out.push('\n');
    out.push_str("|---|");
    out.push_str(&"---|".repeat(max_k));
    out.push('\n');
    for r in runs {
        let _ = write!(out, "| {} | ", r.name);
        for k in 0..max_k {
            match r.fidelity.rows().get(k) {
                Some(row) => {
                    let _ = write!(out, "{:.6} | ", row[0]);
                }
                None => {
                    let _ = write!(out, " | ");
                }
            }
        }
        out.push('\n');
    }
    if !warnings.is_empty() {
        out.push_str("\n## Warnings\n\n");
        for w in warnings {
            let _ = writeln!(out, "- {w}");
        }
    }
    out
}
