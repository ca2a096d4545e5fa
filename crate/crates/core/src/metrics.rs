//! Takeover metrics, filtering, paired t-tests and cohort aggregation.

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::scalar::{lit, Scalar};
use crate::sim::RunRecord;

/// Moving-average window (samples) applied before computing statistics.
pub const FILTER_WINDOW: usize = 5;

/// Significance level of the paired tests.
pub const SIGNIFICANCE: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("moving-average window {window} must be odd and at most the series length {len}")]
    BadWindow { window: usize, len: usize },
    #[error("paired samples have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("paired t-test needs at least two pairs, got {0}")]
    TooFewPairs(usize),
    #[error("differences have zero variance but nonzero mean {0}")]
    DegenerateVariance(f64),
    #[error("participant {0} lacks a paired observation")]
    Unpaired(usize),
    #[error("table row {row}: {reason}")]
    Table { row: usize, reason: String },
    #[error("table is missing participant {0}")]
    MissingParticipant(usize),
}

/// Centered moving average; the window shrinks symmetrically near the ends.
pub fn moving_average<T: Scalar>(series: &[T], window: usize) -> Result<Vec<T>, MetricsError> {
    if window == 0 || window % 2 == 0 || window > series.len() {
        return Err(MetricsError::BadWindow {
            window,
            len: series.len(),
        });
    }
    let half = window / 2;
    let n = series.len();
    Ok((0..n)
        .map(|i| {
            let h = half.min(i).min(n - 1 - i);
            let slice = &series[i - h..=i + h];
            slice.iter().fold(T::zero(), |a, &v| a + v) / lit::<T>(slice.len() as f64)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample SD (n − 1); zero for fewer than two values.
    pub sd: f64,
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary {
            mean: f64::NAN,
            sd: f64::NAN,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Summary { mean, sd }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Quantile by linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn five_number(values: &[f64]) -> FiveNumber {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    FiveNumber {
        min: quantile(&v, 0.0),
        q1: quantile(&v, 0.25),
        median: quantile(&v, 0.5),
        q3: quantile(&v, 0.75),
        max: quantile(&v, 1.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub dof: usize,
    pub mean_difference: f64,
    pub significant: bool,
}

/// Two-sided paired t-test on `baseline − proposed`.
pub fn paired_t_test(baseline: &[f64], proposed: &[f64]) -> Result<TTest, MetricsError> {
    if baseline.len() != proposed.len() {
        return Err(MetricsError::LengthMismatch(baseline.len(), proposed.len()));
    }
    let n = baseline.len();
    if n < 2 {
        return Err(MetricsError::TooFewPairs(n));
    }
    let diffs: Vec<f64> = baseline.iter().zip(proposed).map(|(b, p)| b - p).collect();
    let Summary { mean, sd } = summarize(&diffs);
    let dof = n - 1;
    if sd == 0.0 {
        if mean == 0.0 {
            return Ok(TTest {
                t: 0.0,
                p: 1.0,
                dof,
                mean_difference: 0.0,
                significant: false,
            });
        }
        return Err(MetricsError::DegenerateVariance(mean));
    }
    let t = mean / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, dof as f64).expect("dof is positive");
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest {
        t,
        p,
        dof,
        mean_difference: mean,
        significant: p < SIGNIFICANCE,
    })
}

/// Names of the per-run metrics, in table order.
pub const METRIC_NAMES: [&str; 7] = [
    "takeover_time",
    "torque_mean",
    "torque_sd",
    "angle_mean",
    "angle_sd",
    "yaw_rate_mean",
    "yaw_rate_sd",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// TOR to the first stabilization (s); `None` if the run never completed.
    pub takeover_time: Option<f64>,
    pub mean_torque: f64,
    pub sd_torque: f64,
    /// Degrees.
    pub mean_angle: f64,
    pub sd_angle: f64,
    /// Degrees per second.
    pub mean_yaw_rate: f64,
    pub sd_yaw_rate: f64,
    pub window_start: f64,
    pub window_end: f64,
}

impl RunMetrics {
    pub fn completed(&self) -> bool {
        self.takeover_time.is_some()
    }

    /// Values in [`METRIC_NAMES`] order; `None` for incomplete runs.
    pub fn values(&self) -> Option<[f64; 7]> {
        Some([
            self.takeover_time?,
            self.mean_torque,
            self.sd_torque,
            self.mean_angle,
            self.sd_angle,
            self.mean_yaw_rate,
            self.sd_yaw_rate,
        ])
    }
}

/// Statistics of |signal| over the samples with `start ≤ t ≤ end`, filtered
/// after windowing so data outside the window cannot leak in.
fn window_stats(t: &[f64], signal: &[f64], start: f64, end: f64) -> Summary {
    let tol = 1e-9;
    let selected: Vec<f64> = t
        .iter()
        .zip(signal)
        .filter(|(&ti, _)| ti >= start - tol && ti <= end + tol)
        .map(|(_, &v)| v.abs())
        .collect();
    if selected.is_empty() {
        return Summary {
            mean: f64::NAN,
            sd: f64::NAN,
        };
    }
    let window = FILTER_WINDOW.min(if selected.len() % 2 == 1 {
        selected.len()
    } else {
        selected.len() - 1
    });
    let filtered = moving_average(&selected, window.max(1)).expect("window fits");
    summarize(&filtered)
}

/// Metrics over `[t₀, t₀ + takeover_time]`, or from t₀ to the end of the run
/// when it never completed.
pub fn run_metrics(record: &RunRecord) -> RunMetrics {
    let t0 = record.events.tor;
    let takeover_time = record.events.completion.map(|t| t - t0);
    let end = match takeover_time {
        Some(tt) => t0 + tt,
        None => record.ticks.last().map_or(t0, |k| k.t),
    };
    let t: Vec<f64> = record.ticks.iter().map(|k| k.t).collect();
    let torque: Vec<f64> = record.ticks.iter().map(|k| k.split.driver).collect();
    let angle: Vec<f64> = record
        .ticks
        .iter()
        .map(|k| k.state.steering_angle.to_degrees())
        .collect();
    let yaw: Vec<f64> = record
        .ticks
        .iter()
        .map(|k| k.state.yaw_rate.to_degrees())
        .collect();
    let tq = window_stats(&t, &torque, t0, end);
    let an = window_stats(&t, &angle, t0, end);
    let yr = window_stats(&t, &yaw, t0, end);
    RunMetrics {
        takeover_time,
        mean_torque: tq.mean,
        sd_torque: tq.sd,
        mean_angle: an.mean,
        sd_angle: an.sd,
        mean_yaw_rate: yr.mean,
        sd_yaw_rate: yr.sd,
        window_start: t0,
        window_end: end,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub metric: String,
    pub baseline: Summary,
    pub proposed: Summary,
    /// `None` when fewer than two pairs are available.
    pub test: Option<TTest>,
    pub baseline_box: FiveNumber,
    pub proposed_box: FiveNumber,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortStats {
    pub n: usize,
    pub metrics: Vec<MetricStats>,
    /// Why tests were skipped, if they were.
    pub notice: Option<String>,
}

impl CohortStats {
    pub fn metric(&self, name: &str) -> Option<&MetricStats> {
        self.metrics.iter().find(|m| m.metric == name)
    }

    /// Percent reduction of the proposed mean relative to the baseline mean.
    pub fn reduction_percent(&self, name: &str) -> Option<f64> {
        let m = self.metric(name)?;
        Some(100.0 * (m.baseline.mean - m.proposed.mean) / m.baseline.mean)
    }
}

/// Aggregates per-participant metric rows, pairing by participant id.
pub fn cohort_stats(
    baseline: &[(usize, [f64; 7])],
    proposed: &[(usize, [f64; 7])],
) -> Result<CohortStats, MetricsError> {
    let b: BTreeMap<usize, [f64; 7]> = baseline.iter().copied().collect();
    let p: BTreeMap<usize, [f64; 7]> = proposed.iter().copied().collect();
    for id in b.keys().chain(p.keys()) {
        if !(b.contains_key(id) && p.contains_key(id)) {
            return Err(MetricsError::Unpaired(*id));
        }
    }
    let n = b.len();
    let notice =
        (n < 2).then(|| format!("paired t-tests skipped: need at least 2 participants, have {n}"));
    let mut metrics = Vec::with_capacity(METRIC_NAMES.len());
    for (k, name) in METRIC_NAMES.iter().enumerate() {
        let bv: Vec<f64> = b.values().map(|r| r[k]).collect();
        let pv: Vec<f64> = p.values().map(|r| r[k]).collect();
        let test = if n >= 2 {
            match paired_t_test(&bv, &pv) {
                Ok(t) => Some(t),
                Err(MetricsError::DegenerateVariance(_)) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        metrics.push(MetricStats {
            metric: (*name).to_string(),
            baseline: summarize(&bv),
            proposed: summarize(&pv),
            test,
            baseline_box: five_number(&bv),
            proposed_box: five_number(&pv),
        });
    }
    Ok(CohortStats { n, metrics, notice })
}

/// One participant row of a per-participant table: each metric for both
/// conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub participant: usize,
    pub takeover_time_baseline: f64,
    pub takeover_time_proposed: f64,
    pub torque_mean_baseline: f64,
    pub torque_mean_proposed: f64,
    pub torque_sd_baseline: f64,
    pub torque_sd_proposed: f64,
    pub angle_mean_baseline: f64,
    pub angle_mean_proposed: f64,
    pub angle_sd_baseline: f64,
    pub angle_sd_proposed: f64,
    pub yaw_rate_mean_baseline: f64,
    pub yaw_rate_mean_proposed: f64,
    pub yaw_rate_sd_baseline: f64,
    pub yaw_rate_sd_proposed: f64,
}

impl TableRow {
    pub fn baseline(&self) -> [f64; 7] {
        [
            self.takeover_time_baseline,
            self.torque_mean_baseline,
            self.torque_sd_baseline,
            self.angle_mean_baseline,
            self.angle_sd_baseline,
            self.yaw_rate_mean_baseline,
            self.yaw_rate_sd_baseline,
        ]
    }

    pub fn proposed(&self) -> [f64; 7] {
        [
            self.takeover_time_proposed,
            self.torque_mean_proposed,
            self.torque_sd_proposed,
            self.angle_mean_proposed,
            self.angle_sd_proposed,
            self.yaw_rate_mean_proposed,
            self.yaw_rate_sd_proposed,
        ]
    }

    pub fn from_metrics(participant: usize, baseline: [f64; 7], proposed: [f64; 7]) -> Self {
        let (b, p) = (baseline, proposed);
        Self {
            participant,
            takeover_time_baseline: b[0],
            takeover_time_proposed: p[0],
            torque_mean_baseline: b[1],
            torque_mean_proposed: p[1],
            torque_sd_baseline: b[2],
            torque_sd_proposed: p[2],
            angle_mean_baseline: b[3],
            angle_mean_proposed: p[3],
            angle_sd_baseline: b[4],
            angle_sd_proposed: p[4],
            yaw_rate_mean_baseline: b[5],
            yaw_rate_mean_proposed: p[5],
            yaw_rate_sd_baseline: b[6],
            yaw_rate_sd_proposed: p[6],
        }
    }
}

/// Reads a per-participant table and checks that participants `1..=expected`
/// are all present.
pub fn read_table<R: Read>(reader: R, expected: usize) -> Result<Vec<TableRow>, MetricsError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize::<TableRow>().enumerate() {
        let row = rec.map_err(|e| MetricsError::Table {
            row: i + 1,
            reason: e.to_string(),
        })?;
        if row
            .baseline()
            .iter()
            .chain(&row.proposed())
            .any(|v| !v.is_finite())
        {
            return Err(MetricsError::Table {
                row: i + 1,
                reason: "non-finite value".into(),
            });
        }
        rows.push(row);
    }
    for id in 1..=expected {
        if !rows.iter().any(|r| r.participant == id) {
            return Err(MetricsError::MissingParticipant(id));
        }
    }
    Ok(rows)
}

pub fn table_stats(rows: &[TableRow]) -> Result<CohortStats, MetricsError> {
    let b: Vec<(usize, [f64; 7])> = rows.iter().map(|r| (r.participant, r.baseline())).collect();
    let p: Vec<(usize, [f64; 7])> = rows.iter().map(|r| (r.participant, r.proposed())).collect();
    cohort_stats(&b, &p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_average_examples() {
        let s = [0.0, 0.0, 3.0, 0.0, 0.0];
        assert_eq!(
            moving_average(&s, 3).unwrap(),
            vec![0.0, 1.0, 1.0, 1.0, 0.0]
        );
        assert_eq!(moving_average(&s, 1).unwrap(), s.to_vec());
        assert_eq!(moving_average(&[2.0; 7], 5).unwrap(), vec![2.0; 7]);
        assert!(moving_average(&s, 7).is_err());
        assert!(moving_average(&s, 4).is_err());
    }

    #[test]
    fn quartiles_interpolate() {
        let f = five_number(&[4.0, 1.0, 3.0, 2.0]);
        assert_eq!((f.min, f.max, f.median), (1.0, 4.0, 2.5));
        assert!((f.q1 - 1.75).abs() < 1e-12 && (f.q3 - 3.25).abs() < 1e-12);
    }

    #[test]
    fn identical_samples_are_not_significant() {
        let t = paired_t_test(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((t.t, t.p, t.significant), (0.0, 1.0, false));
        assert!(matches!(
            paired_t_test(&[2.0, 3.0], &[1.0, 2.0]),
            Err(MetricsError::DegenerateVariance(_))
        ));
        assert!(paired_t_test(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn unpaired_participant_is_named() {
        let err = cohort_stats(&[(1, [0.0; 7]), (2, [0.0; 7])], &[(1, [0.0; 7])]).unwrap_err();
        assert_eq!(err, MetricsError::Unpaired(2));
    }

    #[test]
    fn single_participant_skips_tests() {
        let s = cohort_stats(&[(1, [1.0; 7])], &[(1, [0.5; 7])]).unwrap();
        assert!(s.notice.is_some());
        assert!(s.metrics.iter().all(|m| m.test.is_none()));
    }
}
