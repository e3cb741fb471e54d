use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sam::SamConfig;

use super::config::RunConfig;
use super::metrics::{CsvAppender, MetricsRow};
use super::train::{run_experiment, RunStats};

/// One configuration of the grid, applied on top of the base config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arm {
    #[serde(default)]
    pub name: Option<String>,
    pub lambda_benign: f64,
    #[serde(default)]
    pub sam: bool,
    #[serde(default)]
    pub discriminator: bool,
    /// Benign InfoNCE only, no attack. An extra baseline outside the
    /// λ × SAM × D product.
    #[serde(default)]
    pub benign_only: bool,
}

impl Arm {
    pub fn label(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        if self.benign_only {
            return "benign-only (no attack)".into();
        }
        let on = |b: bool| if b { "yes" } else { "no" };
        format!(
            "λ={} / SAM {} / D {}",
            self.lambda_benign,
            on(self.sam),
            on(self.discriminator)
        )
    }

    pub fn apply(&self, base: &RunConfig, sam: &SamConfig, seed: u64) -> RunConfig {
        let mut c = base.with_seed(seed);
        c.loss.lambda_benign = self.lambda_benign;
        c.sam = self.sam.then(|| sam.clone());
        c.use_discriminator = self.discriminator;
        c.benign_only = self.benign_only;
        c
    }
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}
fn default_lambdas() -> Vec<f64> {
    vec![0.0, 0.5, 1.0, 2.0]
}
fn default_toggle() -> Vec<bool> {
    vec![false, true]
}

/// `λ_benign × SAM × D` over seeds, or an explicit list of arms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    #[serde(default)]
    pub base: RunConfig,
    #[serde(default = "default_lambdas")]
    pub lambda_benign: Vec<f64>,
    #[serde(default = "default_toggle")]
    pub sam: Vec<bool>,
    #[serde(default = "default_toggle")]
    pub discriminator: Vec<bool>,
    /// Settings used by arms with SAM on.
    #[serde(default = "SamConfig::adaptive")]
    pub sam_config: SamConfig,
    #[serde(default)]
    pub benign_only_arm: bool,
    /// When non-empty, replaces the product of the axes above.
    #[serde(default)]
    pub arms: Vec<Arm>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[serde(default)]
    pub threads: Option<usize>,
}

impl AblationGrid {
    pub fn from_json(text: &str) -> Result<Self> {
        let g: AblationGrid =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        self.sam_config.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("grid needs at least one seed".into()));
        }
        if self.cells().is_empty() {
            return Err(Error::Config("grid has no arms".into()));
        }
        Ok(())
    }

    /// The arms in run order.
    pub fn arms(&self) -> Vec<Arm> {
        if !self.arms.is_empty() {
            return self.arms.clone();
        }
        let mut out = Vec::new();
        for &lambda_benign in &self.lambda_benign {
            for &sam in &self.sam {
                for &discriminator in &self.discriminator {
                    out.push(Arm {
                        name: None,
                        lambda_benign,
                        sam,
                        discriminator,
                        benign_only: false,
                    });
                }
            }
        }
        if self.benign_only_arm {
            out.push(Arm {
                name: None,
                lambda_benign: 1.0,
                sam: false,
                discriminator: false,
                benign_only: true,
            });
        }
        out
    }

    /// `(arm index, config)` for every run, arm-major.
    pub fn cells(&self) -> Vec<(usize, RunConfig)> {
        let mut out = Vec::new();
        for (i, arm) in self.arms().iter().enumerate() {
            for &s in &self.seeds {
                out.push((i, arm.apply(&self.base, &self.sam_config, s)));
            }
        }
        out
    }
}

/// Outcome of one grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub arm: String,
    pub config_hash: String,
    pub seed: u64,
    /// `ok`, or the error that stopped the run.
    pub status: String,
    pub le_clean: Option<f64>,
    pub le_robust: Option<f64>,
    pub at_le_clean: Option<f64>,
    pub at_le_robust: Option<f64>,
    pub attacks_checked: u64,
    pub saturations: u64,
    pub sam_degenerate: u64,
}

impl RunRecord {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub arms: Vec<Arm>,
    pub runs: Vec<RunRecord>,
    pub rows: Vec<MetricsRow>,
}

fn run_cell(label: &str, cfg: &RunConfig) -> (RunRecord, Vec<MetricsRow>) {
    let mut rec = RunRecord {
        arm: label.to_string(),
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
        status: "ok".into(),
        le_clean: None,
        le_robust: None,
        at_le_clean: None,
        at_le_robust: None,
        attacks_checked: 0,
        saturations: 0,
        sam_degenerate: 0,
    };
    match run_experiment(cfg) {
        Ok(r) => {
            rec.le_clean = Some(r.le.clean_acc);
            rec.le_robust = Some(r.le.robust_acc);
            rec.at_le_clean = Some(r.at_le.clean_acc);
            rec.at_le_robust = Some(r.at_le.robust_acc);
            let RunStats {
                attacks_checked,
                saturations,
                sam,
            } = r.stats;
            rec.attacks_checked = attacks_checked;
            rec.saturations = saturations;
            rec.sam_degenerate = sam.degenerate;
            (rec, r.rows)
        }
        Err(e) => {
            rec.status = e.to_string();
            (rec, Vec::new())
        }
    }
}

/// Runs every cell, in parallel across cells. A failing run is recorded and
/// the rest continue. When `sink` is given, each finished run's rows are
/// appended to it; with one thread the file order is deterministic.
pub fn run_ablation(grid: &AblationGrid, sink: Option<&Path>) -> Result<AblationOutcome> {
    grid.validate()?;
    let arms = grid.arms();
    let labels: Vec<String> = arms.iter().map(Arm::label).collect();
    let cells = grid.cells();
    let threads = grid
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .clamp(1, cells.len());
    let appender = match sink {
        Some(p) => Some(Mutex::new(CsvAppender::open(p)?)),
        None => None,
    };
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<(RunRecord, Vec<MetricsRow>)>>> =
        Mutex::new(vec![None; cells.len()]);
    let sink_error: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((arm, cfg)) = cells.get(i) else {
                    break;
                };
                let out = run_cell(&labels[*arm], cfg);
                if let Some(a) = &appender {
                    let mut a = a.lock().expect("appender lock");
                    for row in &out.1 {
                        if let Err(e) = a.append(row) {
                            sink_error.lock().expect("error lock").get_or_insert(e);
                        }
                    }
                }
                slots.lock().expect("slot lock")[i] = Some(out);
            });
        }
    });
    if let Some(e) = sink_error.into_inner().expect("error lock") {
        return Err(e);
    }
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    for slot in slots.into_inner().expect("slot lock") {
        let (r, m) = slot.expect("every cell ran");
        runs.push(r);
        rows.extend(m);
    }
    Ok(AblationOutcome { arms, runs, rows })
}

pub fn write_runs<W: std::io::Write>(runs: &[RunRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in runs {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Sample mean and standard deviation (n − 1 denominator, 0 for one value).
pub fn mean_std(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub arm: Arm,
    pub label: String,
    pub completed: usize,
    pub failed: usize,
    pub le_clean: Option<(f64, f64)>,
    pub le_robust: Option<(f64, f64)>,
    pub at_le_clean: Option<(f64, f64)>,
    pub at_le_robust: Option<(f64, f64)>,
}

pub fn summarize(outcome: &AblationOutcome) -> Vec<SummaryRow> {
    outcome
        .arms
        .iter()
        .map(|arm| {
            let label = arm.label();
            let mine: Vec<&RunRecord> = outcome.runs.iter().filter(|r| r.arm == label).collect();
            let ok: Vec<&RunRecord> = mine.iter().copied().filter(|r| r.ok()).collect();
            let col = |f: fn(&RunRecord) -> Option<f64>| {
                mean_std(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
            };
            SummaryRow {
                arm: arm.clone(),
                completed: ok.len(),
                failed: mine.len() - ok.len(),
                le_clean: col(|r| r.le_clean),
                le_robust: col(|r| r.le_robust),
                at_le_clean: col(|r| r.at_le_clean),
                at_le_robust: col(|r| r.at_le_robust),
                label,
            }
        })
        .collect()
}

/// Markdown table, one row per arm, accuracies in percent as mean ± std.
pub fn render_summary(rows: &[SummaryRow], failures: &[RunRecord]) -> String {
    let cell = |v: Option<(f64, f64)>| match v {
        Some((m, s)) => format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s),
        None => "n/a".into(),
    };
    let mark = |b: bool| if b { "✓" } else { "✗" };
    let mut out = String::new();
    out.push_str(
        "| Arm | λ_benign | SAM | D | LE clean | LE robust | AT-LE clean | AT-LE robust | runs |\n",
    );
    out.push_str("|---|---|---|---|---|---|---|---|---|\n");
    for r in rows {
        let (lambda, sam, d) = if r.arm.benign_only {
            ("benign only".to_string(), "-", "-")
        } else {
            (
                r.arm.lambda_benign.to_string(),
                mark(r.arm.sam),
                mark(r.arm.discriminator),
            )
        };
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {}/{} |",
            r.label,
            lambda,
            sam,
            d,
            cell(r.le_clean),
            cell(r.le_robust),
            cell(r.at_le_clean),
            cell(r.at_le_robust),
            r.completed,
            r.completed + r.failed
        );
    }
    if !failures.is_empty() {
        out.push_str("\nFailed runs:\n\n");
        for f in failures {
            let _ = writeln!(out, "- {} seed {}: {}", f.arm, f.seed, f.status);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_base() -> RunConfig {
        RunConfig::from_json(
            r#"{"epochs_pretrain": 1, "epochs_le": 1, "batch_size": 32,
                "data": {"synthetic": {"n_train": 64, "n_test": 32}}}"#,
        )
        .unwrap()
    }

    #[test]
    fn default_axes_give_sixteen_arms() {
        let g = AblationGrid::from_json("{}").unwrap();
        assert_eq!(g.arms().len(), 16);
        assert_eq!(g.cells().len(), 80);
        let mut with = AblationGrid::from_json(r#"{"benign_only_arm": true}"#).unwrap();
        assert_eq!(with.arms().len(), 17);
        assert!(with.arms().last().unwrap().label().contains("benign-only"));
        with.seeds.clear();
        assert!(with.validate().is_err());
    }

    #[test]
    fn single_cell_grid_has_one_summary_row() {
        let g = AblationGrid {
            base: tiny_base(),
            arms: vec![Arm {
                name: Some("SimCLR".into()),
                lambda_benign: 1.0,
                sam: false,
                discriminator: false,
                benign_only: false,
            }],
            seeds: vec![3],
            threads: Some(1),
            ..AblationGrid::from_json("{}").unwrap()
        };
        let out = run_ablation(&g, None).unwrap();
        let s = summarize(&out);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].completed, 1);
        assert_eq!(s[0].le_clean.unwrap().1, 0.0);
        let md = render_summary(&s, &[]);
        assert_eq!(md.lines().count(), 3);
        assert!(md.contains("| SimCLR | 1 | ✗ | ✗ |"));
    }

    #[test]
    fn failing_run_is_recorded_and_grid_continues() {
        let mut base = tiny_base();
        base.data = super::super::config::DataSource::Cifar {
            train: "/nonexistent/train.bin".into(),
            test: "/nonexistent/test.bin".into(),
        };
        let g = AblationGrid {
            base,
            lambda_benign: vec![0.0, 1.0],
            sam: vec![false],
            discriminator: vec![false],
            seeds: vec![0],
            threads: Some(2),
            ..AblationGrid::from_json("{}").unwrap()
        };
        let out = run_ablation(&g, None).unwrap();
        assert_eq!(out.runs.len(), 2);
        assert!(out.runs.iter().all(|r| !r.ok()));
        let s = summarize(&out);
        assert_eq!(s[0].failed, 1);
        assert!(render_summary(&s, &out.runs).contains("Failed runs"));
    }

    #[test]
    fn mean_std_matches_hand_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(mean_std(&[]).is_none());
    }
}
