use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::config::ExperimentConfig;
use super::runs::{cmd_diversity, cmd_eval, cmd_select, cmd_train, write_atomic, EvalSplit, CONFIG_FILE, DIVERSITY_FILE, EVAL_FILE};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::strategies::Strategy;

pub const REPORT_FILE: &str = "report.csv";
pub const SUMMARY_FILE: &str = "report_summary.csv";
pub const SWEEP_LOG_FILE: &str = "sweep.log";
pub const REPORT_HEADER: &str = "ratio,strategy,seed,miou,shannon,simpson";

/// One completed run.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub ratio: f64,
    pub strategy: String,
    pub seed: u64,
    pub miou: f64,
    pub shannon: f64,
    pub simpson: f64,
}

fn key_values(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect())
}

fn field<T: std::str::FromStr>(map: &HashMap<String, String>, key: &str, file: &Path) -> Result<T> {
    let raw = map.get(key).ok_or_else(|| Error::invalid(format!("{} lacks {key}", file.display())))?;
    raw.parse().map_err(|_| Error::invalid(format!("{}: bad {key} {raw:?}", file.display())))
}

pub fn read_run(dir: &Path) -> Result<ReportRow> {
    let (cfg_path, eval_path, div_path) = (dir.join(CONFIG_FILE), dir.join(EVAL_FILE), dir.join(DIVERSITY_FILE));
    let (cfg, eval, div) = (key_values(&cfg_path)?, key_values(&eval_path)?, key_values(&div_path)?);
    Ok(ReportRow {
        ratio: field(&cfg, "selection.labeled_ratio", &cfg_path)?,
        strategy: field(&cfg, "selection.strategy", &cfg_path)?,
        seed: field(&cfg, "seed", &cfg_path)?,
        miou: field(&eval, "miou", &eval_path)?,
        shannon: field(&div, "shannon", &div_path)?,
        simpson: field(&div, "simpson", &div_path)?,
    })
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub ratio: f64,
    pub strategy: String,
    pub runs: usize,
    pub miou: (f64, f64),
    pub shannon: (f64, f64),
    pub simpson: (f64, f64),
}

pub fn summarize(rows: &[ReportRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, String), Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((format!("{:020.10}", r.ratio), r.strategy.clone())).or_default().push(r);
    }
    groups
        .into_values()
        .map(|g| {
            let col = |f: fn(&ReportRow) -> f64| mean_std(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
            SummaryRow {
                ratio: g[0].ratio,
                strategy: g[0].strategy.clone(),
                runs: g.len(),
                miou: col(|r| r.miou),
                shannon: col(|r| r.shannon),
                simpson: col(|r| r.simpson),
            }
        })
        .collect()
}

/// Merge run directories into `report.csv` (one row per run) and
/// `report_summary.csv` (mean and std per ratio and strategy) under `out_dir`.
/// Unreadable runs are skipped with a warning.
pub fn cmd_report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for dir in run_dirs {
        match read_run(dir) {
            Ok(r) => rows.push(r),
            Err(e) => log::warn!("skipping {}: {e}", dir.display()),
        }
    }
    if rows.is_empty() {
        return Err(Error::invalid("no completed run directories"));
    }
    rows.sort_by(|a, b| a.ratio.total_cmp(&b.ratio).then_with(|| a.strategy.cmp(&b.strategy)).then(a.seed.cmp(&b.seed)));

    let mut table = format!("{REPORT_HEADER}\n");
    for r in &rows {
        table.push_str(&format!("{},{},{},{},{},{}\n", r.ratio, r.strategy, r.seed, r.miou, r.shannon, r.simpson));
    }
    let mut summary = String::from("ratio,strategy,runs,miou_mean,miou_std,shannon_mean,shannon_std,simpson_mean,simpson_std\n");
    for s in summarize(&rows) {
        summary.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            s.ratio, s.strategy, s.runs, s.miou.0, s.miou.1, s.shannon.0, s.shannon.1, s.simpson.0, s.simpson.1
        ));
    }
    fs::create_dir_all(out_dir)?;
    write_atomic(&out_dir.join(REPORT_FILE), &table)?;
    write_atomic(&out_dir.join(SUMMARY_FILE), &summary)?;
    Ok(rows)
}

/// Cartesian grid of selection settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    pub alpha_init: Vec<f64>,
    pub beta_q: Vec<f64>,
    pub strategies: Vec<Strategy>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub alpha_init: f64,
    pub beta_q: f64,
    pub strategy: Strategy,
}

impl SweepPoint {
    pub fn name(&self) -> String {
        format!("alpha={}_beta={}_{}", self.alpha_init, self.beta_q, self.strategy)
    }

    /// Per-point seed, keyed by the point's settings.
    pub fn seed(&self, base_seed: u64) -> u64 {
        derive_seed(base_seed, &format!("sweep:{}", self.name()))
    }
}

impl SweepGrid {
    pub fn points(&self) -> Vec<SweepPoint> {
        let mut out = Vec::new();
        for &alpha_init in &self.alpha_init {
            for &beta_q in &self.beta_q {
                for &strategy in &self.strategies {
                    out.push(SweepPoint { alpha_init, beta_q, strategy });
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutcome {
    pub point: SweepPoint,
    pub dir: PathBuf,
    pub seed: u64,
    pub error: Option<String>,
}

fn run_point(cfg: &ExperimentConfig, train: bool) -> Result<()> {
    cmd_select(cfg)?;
    if train {
        cmd_train(cfg, None, None, None)?;
        cmd_eval(cfg, None, EvalSplit::Val, None)?;
    }
    cmd_diversity(cfg, None)?;
    Ok(())
}

/// Run every grid point in its own directory under `base.output_dir`, with
/// up to `workers` points in flight. A failing point is recorded and the
/// sweep carries on.
pub fn cmd_sweep(base: &ExperimentConfig, grid: &SweepGrid, train: bool, workers: usize) -> Result<Vec<SweepOutcome>> {
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::config("sweep grid is empty"));
    }
    base.validate()?;
    let configs: Vec<ExperimentConfig> = points
        .iter()
        .map(|p| {
            let mut cfg = base.clone();
            cfg.selection.alpha_init = p.alpha_init;
            cfg.selection.beta_q = p.beta_q;
            cfg.selection.strategy = p.strategy;
            cfg.seed = p.seed(base.seed);
            cfg.output_dir = base.output_dir.join(p.name());
            cfg
        })
        .collect();

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Option<String>>>> = Mutex::new(vec![None; configs.len()]);
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, configs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cfg) = configs.get(i) else { break };
                let error = run_point(cfg, train).err().map(|e| e.to_string());
                if let Some(e) = &error {
                    log::warn!("sweep point {} failed: {e}", points[i].name());
                }
                results.lock().expect("no panics while holding the lock")[i] = Some(error);
            });
        }
    });

    let results = results.into_inner().expect("workers finished");
    let outcomes: Vec<SweepOutcome> = points
        .into_iter()
        .zip(configs)
        .zip(results)
        .map(|((point, cfg), error)| SweepOutcome { point, dir: cfg.output_dir, seed: cfg.seed, error: error.flatten() })
        .collect();
    let log: String = outcomes
        .iter()
        .map(|o| format!("{}\t{}\t{}\n", o.point.name(), o.seed, o.error.as_deref().unwrap_or("ok")))
        .collect();
    fs::create_dir_all(&base.output_dir)?;
    write_atomic(&base.output_dir.join(SWEEP_LOG_FILE), &log)?;
    Ok(outcomes)
}
