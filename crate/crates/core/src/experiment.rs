//! Repeated-seed experiment plans, arm summaries and the dropout
//! robustness study.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data;
use crate::orchestration::metrics::RoundMetrics;
use crate::orchestration::socket::run_socket_threads;
use crate::orchestration::{
    load_config, run_in_process, Algorithm, ConfigError, DropoutMode, DropoutSettings, FederationConfig,
    OrchestrationError, RunOutcome, SiteFinal,
};
use crate::stats::{anova_one_way, mean, std_dev, Anova, StatsError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("arm `{label}` seed {seed}: {source}")]
    Arm { label: String, seed: u64, source: OrchestrationError },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("plan: {0}")]
    Plan(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

impl ExperimentError {
    pub fn is_config(&self) -> bool {
        matches!(self, ExperimentError::Config(_) | ExperimentError::Plan(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub label: String,
    pub config: FederationConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub arms: Vec<Arm>,
    pub repetitions: usize,
    /// Repetition `r` runs with seed `base_seed + r`.
    pub base_seed: u64,
    pub output_dir: Option<PathBuf>,
    /// Run federated arms over loopback sockets instead of in process.
    pub socket: bool,
}

impl ExperimentPlan {
    pub fn new(arms: Vec<Arm>, repetitions: usize) -> Self {
        Self { arms, repetitions, base_seed: 0, output_dir: None, socket: false }
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repetitions as u64).map(|r| self.base_seed + r).collect()
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.repetitions == 0 {
            return Err(ExperimentError::Plan("repetitions must be at least 1".into()));
        }
        if self.arms.is_empty() {
            return Err(ExperimentError::Plan("plan has no arms".into()));
        }
        let mut labels: Vec<&str> = self.arms.iter().map(|a| a.label.as_str()).collect();
        labels.sort_unstable();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return Err(ExperimentError::Plan(format!("duplicate arm label `{}`", w[0])));
        }
        for arm in &self.arms {
            if arm.label.is_empty() || arm.label.contains(['/', '\\']) {
                return Err(ExperimentError::Plan(format!("invalid arm label `{}`", arm.label)));
            }
            arm.config.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    #[serde(default = "default_reps")]
    repetitions: usize,
    #[serde(default)]
    base_seed: u64,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    #[serde(default)]
    socket: bool,
    arms: Vec<ArmFile>,
}

fn default_reps() -> usize {
    10
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArmFile {
    label: String,
    config: PathBuf,
    #[serde(default)]
    algorithm: Option<Algorithm>,
    #[serde(default)]
    layout: Option<PathBuf>,
    #[serde(default)]
    rounds: Option<u64>,
    #[serde(default)]
    dropout: Option<DropoutSettings>,
}

/// Loads a plan file. Config and layout paths resolve relative to it.
pub fn load_plan(path: &Path) -> Result<ExperimentPlan, ExperimentError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    let file: PlanFile =
        toml::from_str(&text).map_err(|source| ConfigError::Parse { path: path.to_path_buf(), source })?;
    let dir = path.parent().unwrap_or(Path::new(""));
    let arms = file
        .arms
        .into_iter()
        .map(|a| {
            let mut config = load_config(&dir.join(&a.config))?;
            if let Some(alg) = a.algorithm {
                config.algorithm = alg;
            }
            if let Some(l) = a.layout {
                config.layout = data::load_layout(&dir.join(l)).map_err(ConfigError::from)?;
            }
            if let Some(r) = a.rounds {
                config.rounds = r;
            }
            if let Some(d) = a.dropout {
                config.dropout = d;
            }
            config.validate()?;
            Ok(Arm { label: a.label, config })
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    let plan = ExperimentPlan {
        arms,
        repetitions: file.repetitions,
        base_seed: file.base_seed,
        output_dir: file.output_dir.map(|o| dir.join(o)),
        socket: file.socket,
    };
    plan.validate()?;
    Ok(plan)
}

/// One repetition of one arm.
#[derive(Debug, Clone, PartialEq)]
pub struct RepResult {
    pub seed: u64,
    pub final_test_loss: f64,
    pub final_test_accuracy: Option<f64>,
    pub site_finals: Vec<SiteFinal>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmSummary {
    pub label: String,
    /// Sorted by seed.
    pub reps: Vec<RepResult>,
    pub mean_test_loss: f64,
    pub std_test_loss: f64,
    pub mean_test_accuracy: Option<f64>,
    pub std_test_accuracy: Option<f64>,
}

impl ArmSummary {
    fn from_reps(label: String, mut reps: Vec<RepResult>) -> Self {
        reps.sort_by_key(|r| r.seed);
        let losses: Vec<f64> = reps.iter().map(|r| r.final_test_loss).collect();
        let accs: Option<Vec<f64>> = reps.iter().map(|r| r.final_test_accuracy).collect();
        Self {
            label,
            mean_test_loss: mean(&losses),
            std_test_loss: std_dev(&losses),
            mean_test_accuracy: accs.as_deref().map(mean),
            std_test_accuracy: accs.as_deref().map(std_dev),
            reps,
        }
    }

    pub fn test_losses(&self) -> Vec<f64> {
        self.reps.iter().map(|r| r.final_test_loss).collect()
    }

    pub fn test_accuracies(&self) -> Option<Vec<f64>> {
        self.reps.iter().map(|r| r.final_test_accuracy).collect()
    }
}

#[derive(Serialize)]
struct ArmRow<'a> {
    label: &'a str,
    seed: u64,
    #[serde(flatten)]
    metrics: &'a RoundMetrics,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    label: &'a str,
    seed: u64,
    final_test_loss: f64,
    final_test_accuracy: Option<f64>,
}

fn run_one(config: &FederationConfig, seed: u64, socket: bool) -> Result<RunOutcome, OrchestrationError> {
    let config = config.clone().with_seed(seed);
    if socket {
        run_socket_threads(&config)
    } else {
        run_in_process(&config)
    }
}

/// Runs every arm × repetition on a pool of worker threads. Results do
/// not depend on scheduling: each run is deterministic in its seed and
/// the summaries are assembled in (label, seed) order.
pub fn run_plan(plan: &ExperimentPlan) -> Result<Vec<ArmSummary>, ExperimentError> {
    plan.validate()?;
    let seeds = plan.seeds();
    let jobs: Vec<(usize, u64)> = (0..plan.arms.len()).flat_map(|a| seeds.iter().map(move |&s| (a, s))).collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunOutcome, OrchestrationError>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(jobs.len());
    // socket arms open many threads and ports each; keep them sequential
    let workers = if plan.socket { 1 } else { workers };
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(arm, seed)) = jobs.get(i) else { return };
                log::info!("arm `{}` seed {seed}", plan.arms[arm].label);
                let r = run_one(&plan.arms[arm].config, seed, plan.socket);
                results.lock().expect("no worker panics while holding the lock")[i] = Some(r);
            });
        }
    });
    let results = results.into_inner().expect("workers joined");

    let mut per_arm: Vec<Vec<(u64, RunOutcome)>> = plan.arms.iter().map(|_| Vec::new()).collect();
    for ((arm, seed), r) in jobs.into_iter().zip(results) {
        let outcome = r.expect("every job ran").map_err(|source| ExperimentError::Arm {
            label: plan.arms[arm].label.clone(),
            seed,
            source,
        })?;
        per_arm[arm].push((seed, outcome));
    }

    if let Some(dir) = &plan.output_dir {
        fs::create_dir_all(dir)?;
        for (arm, runs) in plan.arms.iter().zip(&per_arm) {
            let mut text = String::new();
            for (seed, out) in runs {
                for m in &out.history {
                    let row = ArmRow { label: &arm.label, seed: *seed, metrics: m };
                    text.push_str(&serde_json::to_string(&row).map_err(std::io::Error::from)?);
                    text.push('\n');
                }
            }
            fs::write(dir.join(format!("{}.jsonl", arm.label)), text)?;
        }
    }

    let mut summaries: Vec<ArmSummary> = plan
        .arms
        .iter()
        .zip(per_arm)
        .map(|(arm, runs)| {
            let reps = runs
                .into_iter()
                .map(|(seed, out)| RepResult {
                    seed,
                    final_test_loss: out.final_test_loss,
                    final_test_accuracy: out.final_test_accuracy,
                    site_finals: out.site_finals,
                })
                .collect();
            ArmSummary::from_reps(arm.label.clone(), reps)
        })
        .collect();
    summaries.sort_by(|a, b| a.label.cmp(&b.label));
    if let Some(dir) = &plan.output_dir {
        write_summary_csv(&dir.join("summary.csv"), &summaries)?;
    }
    Ok(summaries)
}

/// `label, seed, final_test_loss, final_test_accuracy`, sorted by label
/// then seed.
pub fn write_summary_csv(path: &Path, summaries: &[ArmSummary]) -> Result<(), ExperimentError> {
    let mut rows: Vec<SummaryRow> = summaries
        .iter()
        .flat_map(|s| {
            s.reps.iter().map(|r| SummaryRow {
                label: &s.label,
                seed: r.seed,
                final_test_loss: r.final_test_loss,
                final_test_accuracy: r.final_test_accuracy,
            })
        })
        .collect();
    rows.sort_by(|a, b| a.label.cmp(b.label).then(a.seed.cmp(&b.seed)));
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// One dropout scenario of the robustness study.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub label: String,
    pub n_max: usize,
    /// `None` for the no-dropout baseline.
    pub mode: Option<DropoutMode>,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropoutReport {
    pub scenarios: Vec<Scenario>,
    pub anova: Anova,
}

impl DropoutReport {
    pub fn baseline(&self) -> &Scenario {
        &self.scenarios[0]
    }

    /// Largest drop in mean accuracy below the baseline, in absolute terms.
    pub fn max_shortfall(&self) -> f64 {
        let base = self.baseline().mean_accuracy;
        self.scenarios.iter().map(|s| base - s.mean_accuracy).fold(0.0, f64::max)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<22} {:>5} {:>11} {:>5} {:>10} {:>10}", "scenario", "n_max", "mode", "reps", "mean_acc", "std_acc");
        for sc in &self.scenarios {
            let _ = writeln!(
                s,
                "{:<22} {:>5} {:>11} {:>5} {:>10.6} {:>10.6}",
                sc.label,
                sc.n_max,
                sc.mode.map_or("-", |m| m.as_str()),
                sc.accuracies.len(),
                sc.mean_accuracy,
                sc.std_accuracy
            );
        }
        let _ = writeln!(
            s,
            "ANOVA F({}, {}) = {:.6}, p = {:.6}",
            self.anova.df_between, self.anova.df_within, self.anova.f, self.anova.p
        );
        let _ = writeln!(s, "max shortfall vs baseline = {:.6}", self.max_shortfall());
        s
    }
}

/// Scenario grid: the no-dropout baseline, then every positive `n_max`
/// under each mode.
pub fn dropout_scenarios(n_max_values: &[usize], modes: &[DropoutMode]) -> Vec<(String, DropoutSettings)> {
    let mut out = vec![("no_dropout".to_string(), DropoutSettings { n_max: 0, mode: DropoutMode::Disconnect })];
    for &n in n_max_values.iter().filter(|&&n| n > 0) {
        for &mode in modes {
            out.push((format!("nmax{n}_{}", mode.as_str()), DropoutSettings { n_max: n, mode }));
        }
    }
    out
}

/// Runs the dropout scenarios of a GCML configuration and compares their
/// final accuracies with a one-way ANOVA. Writes `report.txt` (and the
/// usual plan outputs) when `output_dir` is given.
pub fn dropout_robustness_study(
    base: &FederationConfig,
    n_max_values: &[usize],
    modes: &[DropoutMode],
    repetitions: usize,
    base_seed: u64,
    output_dir: Option<&Path>,
) -> Result<DropoutReport, ExperimentError> {
    if base.algorithm != Algorithm::Gcml {
        return Err(ExperimentError::Plan(format!(
            "dropout study expects a gcml config, got {}",
            base.algorithm.as_str()
        )));
    }
    let scenarios = dropout_scenarios(n_max_values, modes);
    let arms = scenarios
        .iter()
        .map(|(label, d)| {
            let mut config = base.clone();
            config.dropout = *d;
            Arm { label: label.clone(), config }
        })
        .collect();
    let plan = ExperimentPlan {
        arms,
        repetitions,
        base_seed,
        output_dir: output_dir.map(Path::to_path_buf),
        socket: false,
    };
    let summaries = run_plan(&plan)?;
    let mut rows = Vec::with_capacity(scenarios.len());
    for (label, d) in &scenarios {
        let s = summaries.iter().find(|s| &s.label == label).expect("one summary per arm");
        let accuracies = s
            .test_accuracies()
            .ok_or_else(|| ExperimentError::Plan("dropout study needs a classifier".into()))?;
        rows.push(Scenario {
            label: label.clone(),
            n_max: d.n_max,
            mode: (d.n_max > 0).then_some(d.mode),
            mean_accuracy: mean(&accuracies),
            std_accuracy: std_dev(&accuracies),
            accuracies,
        });
    }
    let groups: Vec<&[f64]> = rows.iter().map(|r| r.accuracies.as_slice()).collect();
    let anova = anova_one_way(&groups)?;
    let report = DropoutReport { scenarios: rows, anova };
    if let Some(dir) = output_dir {
        fs::write(dir.join("report.txt"), report.render())?;
    }
    Ok(report)
}
