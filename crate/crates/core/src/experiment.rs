//! Single runs, cohort orchestration, output files and the published-table
//! check.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::metrics::{
    run_metrics, table_stats, CohortStats, MetricsError, RunMetrics, TableRow, METRIC_NAMES,
};
use crate::sim::{self, Condition, RunRecord, SimError, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct RunKey {
    pub participant: usize,
    pub task: Task,
    pub condition: Condition,
}

impl RunKey {
    pub fn file_stem(&self) -> String {
        format!("{}_{}", self.task, self.condition)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub key: RunKey,
    pub record: Result<RunRecord, String>,
    pub metrics: Option<RunMetrics>,
}

impl RunOutcome {
    /// Why the run cannot enter the paired statistics, if it cannot.
    pub fn failure(&self) -> Option<String> {
        match (&self.record, &self.metrics) {
            (Err(e), _) => Some(e.clone()),
            (Ok(r), _) if r.failure.is_some() => r.failure.clone(),
            (Ok(_), Some(m)) if !m.completed() => Some("takeover never completed".into()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub participant: usize,
    pub task: Task,
    pub condition: Condition,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct TaskStats {
    /// Participants with both conditions completed.
    pub participants: Vec<usize>,
    pub rows: Vec<TableRow>,
    pub stats: Option<CohortStats>,
    pub reductions: BTreeMap<String, f64>,
    /// Participants whose proposed value is below their baseline value.
    pub proposed_lower: BTreeMap<String, usize>,
    pub notice: Option<String>,
}

#[derive(Debug, Clone)]
pub struct CohortResult {
    pub config: ExperimentConfig,
    /// Sorted by key.
    pub runs: Vec<RunOutcome>,
    pub tasks: BTreeMap<Task, TaskStats>,
    pub failures: Vec<Failure>,
    /// Per participant, the randomized order in which sessions are presented.
    pub session_order: BTreeMap<usize, Vec<String>>,
}

pub fn run_single(
    cfg: &ExperimentConfig,
    task: Task,
    condition: Condition,
    participant: usize,
) -> Result<RunRecord, SimError> {
    sim::run(
        &cfg.scenario(task),
        &cfg.profile(participant),
        condition,
        &cfg.sim_config(),
        participant,
    )
}

fn session_order(cfg: &ExperimentConfig, participant: usize) -> Vec<RunKey> {
    let mut keys: Vec<RunKey> = cfg
        .experiment
        .tasks
        .iter()
        .flat_map(|&task| {
            cfg.experiment
                .conditions
                .iter()
                .map(move |&condition| RunKey {
                    participant,
                    task,
                    condition,
                })
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.experiment.seed);
    rng.set_stream(1000 + participant as u64);
    keys.shuffle(&mut rng);
    keys
}

/// Runs every participant × task × condition session of the config.
///
/// Runs are independent, so results do not depend on the thread count.
pub fn run_cohort(cfg: &ExperimentConfig) -> CohortResult {
    let mut orders = BTreeMap::new();
    let mut keys = Vec::new();
    for id in cfg.participant_ids() {
        let order = session_order(cfg, id);
        orders.insert(id, order.iter().map(RunKey::file_stem).collect());
        keys.extend(order);
    }
    keys.sort();

    let exec = |keys: &[RunKey]| -> Vec<RunOutcome> {
        keys.par_iter()
            .map(|&key| {
                let record = run_single(cfg, key.task, key.condition, key.participant)
                    .map_err(|e| e.to_string());
                let metrics = record.as_ref().ok().map(run_metrics);
                RunOutcome {
                    key,
                    record,
                    metrics,
                }
            })
            .collect()
    };
    let runs = match rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.experiment.threads)
        .build()
    {
        Ok(pool) => pool.install(|| exec(&keys)),
        Err(_) => exec(&keys),
    };

    let failures = runs
        .iter()
        .filter_map(|r| {
            r.failure().map(|reason| Failure {
                participant: r.key.participant,
                task: r.key.task,
                condition: r.key.condition,
                reason,
            })
        })
        .collect();

    let mut tasks = BTreeMap::new();
    for &task in &cfg.experiment.tasks {
        tasks.insert(task, task_stats(&runs, task));
    }
    CohortResult {
        config: cfg.clone(),
        runs,
        tasks,
        failures,
        session_order: orders,
    }
}

fn task_stats(runs: &[RunOutcome], task: Task) -> TaskStats {
    let values = |cond: Condition| -> BTreeMap<usize, [f64; 7]> {
        runs.iter()
            .filter(|r| r.key.task == task && r.key.condition == cond && r.failure().is_none())
            .filter_map(|r| Some((r.key.participant, r.metrics?.values()?)))
            .collect()
    };
    let b = values(Condition::Baseline);
    let p = values(Condition::Proposed);
    let participants: Vec<usize> = b.keys().filter(|id| p.contains_key(id)).copied().collect();
    let rows: Vec<TableRow> = participants
        .iter()
        .map(|id| TableRow::from_metrics(*id, b[id], p[id]))
        .collect();

    let mut proposed_lower = BTreeMap::new();
    for (k, name) in METRIC_NAMES.iter().enumerate() {
        let n = rows
            .iter()
            .filter(|r| r.proposed()[k] < r.baseline()[k])
            .count();
        proposed_lower.insert((*name).to_string(), n);
    }

    if rows.is_empty() {
        return TaskStats {
            participants,
            rows,
            stats: None,
            reductions: BTreeMap::new(),
            proposed_lower,
            notice: Some("no participant completed both conditions".into()),
        };
    }
    match table_stats(&rows) {
        Ok(stats) => {
            let reductions = METRIC_NAMES
                .iter()
                .filter_map(|m| Some(((*m).to_string(), stats.reduction_percent(m)?)))
                .collect();
            let notice = stats.notice.clone();
            TaskStats {
                participants,
                rows,
                stats: Some(stats),
                reductions,
                proposed_lower,
                notice,
            }
        }
        Err(e) => TaskStats {
            participants,
            rows,
            stats: None,
            reductions: BTreeMap::new(),
            proposed_lower,
            notice: Some(e.to_string()),
        },
    }
}

/// Directory of one participant's runs.
pub fn participant_dir(experiment_dir: &Path, participant: usize) -> PathBuf {
    experiment_dir.join(format!("p{participant:02}"))
}

/// Writes `<stem>.csv` and `<stem>.json` for one run; returns the CSV path.
pub fn write_run(dir: &Path, stem: &str, record: &RunRecord) -> io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let mut w = io::BufWriter::new(fs::File::create(&csv_path)?);
    record.write_csv(&mut w)?;
    w.flush()?;
    let json = serde_json::to_string_pretty(&record.sidecar()).map_err(io::Error::other)?;
    fs::write(dir.join(format!("{stem}.json")), json + "\n")?;
    Ok(csv_path)
}

impl CohortResult {
    pub fn outcome(&self, key: RunKey) -> Option<&RunOutcome> {
        self.runs
            .binary_search_by(|r| r.key.cmp(&key))
            .ok()
            .map(|i| &self.runs[i])
    }

    pub fn summary_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["task".to_string(), "participant".to_string()];
        for m in METRIC_NAMES {
            header.push(format!("{m}_baseline"));
            header.push(format!("{m}_proposed"));
        }
        w.write_record(&header).expect("in-memory write");
        for (task, ts) in &self.tasks {
            for row in &ts.rows {
                let mut rec = vec![task.to_string(), row.participant.to_string()];
                for (b, p) in row.baseline().iter().zip(row.proposed()) {
                    rec.push(b.to_string());
                    rec.push(p.to_string());
                }
                w.write_record(&rec).expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("ASCII")
    }

    pub fn boxplot_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "task",
            "metric",
            "condition",
            "min",
            "q1",
            "median",
            "q3",
            "max",
            "mean",
            "sd",
        ])
        .expect("in-memory write");
        for (task, ts) in &self.tasks {
            let Some(stats) = &ts.stats else { continue };
            for m in &stats.metrics {
                for (cond, b, s) in [
                    (Condition::Baseline, &m.baseline_box, &m.baseline),
                    (Condition::Proposed, &m.proposed_box, &m.proposed),
                ] {
                    w.write_record([
                        task.to_string(),
                        m.metric.clone(),
                        cond.to_string(),
                        b.min.to_string(),
                        b.q1.to_string(),
                        b.median.to_string(),
                        b.q3.to_string(),
                        b.max.to_string(),
                        s.mean.to_string(),
                        s.sd.to_string(),
                    ])
                    .expect("in-memory write");
                }
            }
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("ASCII")
    }

    pub fn stats_json(&self) -> serde_json::Value {
        let e = &self.config.experiment;
        let tasks: BTreeMap<String, serde_json::Value> = self
            .tasks
            .iter()
            .map(|(task, ts)| {
                (
                    task.to_string(),
                    serde_json::json!({
                        "n": ts.participants.len(),
                        "participants": ts.participants,
                        "notice": ts.notice,
                        "metrics": ts.stats.as_ref().map(|s| &s.metrics),
                        "reduction_percent": ts.reductions,
                        "proposed_lower": ts.proposed_lower,
                    }),
                )
            })
            .collect();
        serde_json::json!({
            "experiment": e.name,
            "seed": e.seed,
            "participants": e.participants,
            "noise_enabled": self.config.scenario.noise_enabled,
            "runs": self.runs.len(),
            "tasks": tasks,
            "failures": self.failures,
            "session_order": self.session_order,
        })
    }

    /// Writes per-run files and the cohort aggregates under `dir`.
    pub fn write(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        for r in &self.runs {
            if let Ok(rec) = &r.record {
                write_run(
                    &participant_dir(dir, r.key.participant),
                    &r.key.file_stem(),
                    rec,
                )?;
            }
        }
        fs::write(dir.join("cohort_summary.csv"), self.summary_csv())?;
        fs::write(dir.join("boxplot_data.csv"), self.boxplot_csv())?;
        let json = serde_json::to_string_pretty(&self.stats_json()).map_err(io::Error::other)?;
        fs::write(dir.join("stats.json"), json + "\n")?;
        Ok(())
    }
}

impl fmt::Display for CohortResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} runs, {} failed",
            self.runs.len(),
            self.failures.len()
        )?;
        for (task, ts) in &self.tasks {
            writeln!(
                f,
                "task {task}: {} paired participants",
                ts.participants.len()
            )?;
            if let Some(n) = &ts.notice {
                writeln!(f, "  note: {n}")?;
            }
            let Some(stats) = &ts.stats else { continue };
            for m in &stats.metrics {
                write!(
                    f,
                    "  {:<14} baseline {:>8.3} ± {:<7.3} proposed {:>8.3} ± {:<7.3}",
                    m.metric, m.baseline.mean, m.baseline.sd, m.proposed.mean, m.proposed.sd
                )?;
                match &m.test {
                    Some(t) => writeln!(f, " t = {:>7.3}  p = {:.2e}", t.t, t.p)?,
                    None => writeln!(f)?,
                }
            }
            if let Some(r) = ts.reductions.get("takeover_time") {
                writeln!(f, "  takeover time reduction {r:.1}%")?;
            }
        }
        for fail in &self.failures {
            writeln!(
                f,
                "failed: participant {} task {} {}: {}",
                fail.participant, fail.task, fail.condition, fail.reason
            )?;
        }
        Ok(())
    }
}

/// Cohort means stated in the published results, as (task, metric, baseline,
/// proposed).
pub const PUBLISHED_MEANS: [(Task, &str, f64, f64); 8] = [
    (Task::A, "takeover_time", 8.0, 4.4),
    (Task::A, "torque_mean", 0.9, 0.8),
    (Task::A, "angle_mean", 13.9, 14.4),
    (Task::A, "yaw_rate_mean", 2.3, 2.1),
    (Task::B, "takeover_time", 7.9, 4.4),
    (Task::B, "torque_mean", 0.33, 0.28),
    (Task::B, "angle_mean", 6.44, 6.39),
    (Task::B, "yaw_rate_mean", 0.8, 0.7),
];

/// Allowed distance from a stated (rounded) mean.
pub const PUBLISHED_TOLERANCE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanCheck {
    pub task: Task,
    pub metric: String,
    pub condition: Condition,
    pub computed: f64,
    pub stated: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TableReport {
    pub stats: BTreeMap<Task, CohortStats>,
    pub checks: Vec<MeanCheck>,
    /// Paired-test p-value of the takeover-time difference per task.
    pub takeover_p: BTreeMap<Task, Option<f64>>,
}

impl TableReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.ok)
            && self
                .takeover_p
                .values()
                .all(|p| p.is_some_and(|p| p < crate::metrics::SIGNIFICANCE))
    }
}

impl fmt::Display for TableReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} task {} {:<14} {:<9} computed {:>7.3} stated {:>6.2}",
                if c.ok { "ok  " } else { "FAIL" },
                c.task,
                c.metric,
                c.condition,
                c.computed,
                c.stated
            )?;
        }
        for (task, p) in &self.takeover_p {
            match p {
                Some(p) => writeln!(f, "task {task} takeover time paired p = {p:.3e}")?,
                None => writeln!(f, "task {task} takeover time paired test unavailable")?,
            }
        }
        write!(
            f,
            "{}",
            if self.passed() {
                "tables reproduce the published means"
            } else {
                "tables do not reproduce the published means"
            }
        )
    }
}

/// Aggregates per-participant tables and compares them with
/// [`PUBLISHED_MEANS`].
pub fn validate_tables(tables: &[(Task, Vec<TableRow>)]) -> Result<TableReport, MetricsError> {
    let mut stats = BTreeMap::new();
    let mut checks = Vec::new();
    let mut takeover_p = BTreeMap::new();
    for (task, rows) in tables {
        let s = table_stats(rows)?;
        for &(t, metric, b, p) in PUBLISHED_MEANS.iter().filter(|r| r.0 == *task) {
            let m = s.metric(metric).expect("known metric");
            for (condition, computed, stated) in [
                (Condition::Baseline, m.baseline.mean, b),
                (Condition::Proposed, m.proposed.mean, p),
            ] {
                checks.push(MeanCheck {
                    task: t,
                    metric: metric.to_string(),
                    condition,
                    computed,
                    stated,
                    ok: (computed - stated).abs() <= PUBLISHED_TOLERANCE + 1e-12,
                });
            }
        }
        takeover_p.insert(
            *task,
            s.metric("takeover_time").and_then(|m| m.test.map(|t| t.p)),
        );
        stats.insert(*task, s);
    }
    Ok(TableReport {
        stats,
        checks,
        takeover_p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn session_order_is_seeded_permutation() {
        let cfg = ExperimentConfig::default();
        let a = session_order(&cfg, 3);
        assert_eq!(a, session_order(&cfg, 3));
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted.len(), 4);
        sorted.dedup();
        assert_eq!(sorted.len(), 4);
    }
}
