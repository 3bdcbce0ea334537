//! Day metrics, stratified summaries, min-max scores and report files.

mod gantt;

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gantt::{export_gantt, Gantt};

use crate::domain::SimConfig;
use crate::reward;
use crate::simenv::EpisodeRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    PtE,
    PtNe,
    UnservedNe,
    Overtime,
    Delay,
    Revenue,
    Cr,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::PtE,
        Metric::PtNe,
        Metric::UnservedNe,
        Metric::Overtime,
        Metric::Delay,
        Metric::Revenue,
        Metric::Cr,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Metric::PtE => "PT(E)",
            Metric::PtNe => "PT(NE)",
            Metric::UnservedNe => "Unserved(NE)",
            Metric::Overtime => "OT",
            Metric::Delay => "Delay",
            Metric::Revenue => "Revenue",
            Metric::Cr => "CR",
        }
    }

    /// Column stem used in CSV headers.
    pub fn key(self) -> &'static str {
        match self {
            Metric::PtE => "pt_e",
            Metric::PtNe => "pt_ne",
            Metric::UnservedNe => "unserved_ne",
            Metric::Overtime => "overtime",
            Metric::Delay => "delay",
            Metric::Revenue => "revenue",
            Metric::Cr => "cr",
        }
    }

    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::PtE | Metric::PtNe | Metric::Revenue | Metric::Cr)
    }
}

/// The seven metrics of one day, in [`Metric::ALL`] order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DayMetrics {
    pub seed: u64,
    pub emergency_day: bool,
    pub values: [f64; 7],
}

impl DayMetrics {
    pub fn get(&self, m: Metric) -> f64 {
        self.values[m as usize]
    }
}

/// Delay is the mean over served cases of `|beta - tau|` (electives) or
/// `beta - alpha` (non-electives), 0 when nothing was served. Unserved
/// counts non-electives never started.
pub fn compute_metrics(episode: &EpisodeRecord, config: &SimConfig) -> DayMetrics {
    let mut pt_e = 0usize;
    let mut pt_ne = 0usize;
    let mut delay_sum = 0.0;
    for (p, o) in episode.served() {
        match p.reference {
            Some(tau) => {
                pt_e += 1;
                delay_sum += (o.start as f64 - tau as f64).abs();
            }
            None => {
                pt_ne += 1;
                delay_sum += (o.start - p.arrival) as f64;
            }
        }
    }
    let unserved_ne = episode
        .patients
        .iter()
        .zip(&episode.outcomes)
        .filter(|(p, o)| !p.is_elective() && o.is_none())
        .count();
    let served = pt_e + pt_ne;
    let day = reward::day_reward::<f64>(episode, config);
    DayMetrics {
        seed: episode.seed,
        emergency_day: episode.emergency_fired(),
        values: [
            pt_e as f64,
            pt_ne as f64,
            unserved_ne as f64,
            day.overtime_slots as f64,
            if served == 0 { 0.0 } else { delay_sum / served as f64 },
            day.revenue(),
            day.day_reward,
        ],
    }
}

/// Metrics for many episodes, computed in parallel, returned in input order.
pub fn compute_all(episodes: &[EpisodeRecord], config: &SimConfig) -> Vec<DayMetrics> {
    episodes.par_iter().map(|e| compute_metrics(e, config)).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation (0 for fewer than two values).
    pub sd: f64,
}

impl Stat {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Stat {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Stat::default();
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = if v.len() < 2 {
            0.0
        } else {
            (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Stat { mean, sd }
    }
}

/// Mean and sd of each metric over a set of days.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub days: usize,
    pub stats: [Stat; 7],
}

impl MetricsRow {
    pub fn of(days: &[&DayMetrics]) -> MetricsRow {
        let mut stats = [Stat::default(); 7];
        for (i, s) in stats.iter_mut().enumerate() {
            *s = Stat::of(days.iter().map(|d| d.values[i]));
        }
        MetricsRow {
            days: days.len(),
            stats,
        }
    }

    pub fn get(&self, m: Metric) -> Stat {
        self.stats[m as usize]
    }

    pub fn means(&self) -> [f64; 7] {
        self.stats.map(|s| s.mean)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stratum {
    AllDays,
    EmergencyDays,
    NonEmergencyDays,
}

impl Stratum {
    pub const ALL: [Stratum; 3] = [Stratum::AllDays, Stratum::EmergencyDays, Stratum::NonEmergencyDays];

    pub fn label(self) -> &'static str {
        match self {
            Stratum::AllDays => "all_days",
            Stratum::EmergencyDays => "emergency_days",
            Stratum::NonEmergencyDays => "non_emergency_days",
        }
    }

    pub fn contains(self, day: &DayMetrics) -> bool {
        match self {
            Stratum::AllDays => true,
            Stratum::EmergencyDays => day.emergency_day,
            Stratum::NonEmergencyDays => !day.emergency_day,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stratified {
    pub all: MetricsRow,
    pub emergency: MetricsRow,
    pub non_emergency: MetricsRow,
}

impl Stratified {
    pub fn get(&self, s: Stratum) -> &MetricsRow {
        match s {
            Stratum::AllDays => &self.all,
            Stratum::EmergencyDays => &self.emergency,
            Stratum::NonEmergencyDays => &self.non_emergency,
        }
    }
}

pub fn stratify(days: &[DayMetrics]) -> Stratified {
    let pick = |s: Stratum| -> MetricsRow {
        let chosen: Vec<&DayMetrics> = days.iter().filter(|d| s.contains(d)).collect();
        MetricsRow::of(&chosen)
    };
    Stratified {
        all: pick(Stratum::AllDays),
        emergency: pick(Stratum::EmergencyDays),
        non_emergency: pick(Stratum::NonEmergencyDays),
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error("score normalization needs at least two policies, got {0}")]
    TooFewPolicies(usize),
    #[error("metric means must be finite")]
    NonFinite,
}

/// Min-max scores per metric (1 = best, 0 = worst) and their unweighted mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub policies: Vec<String>,
    pub scores: Vec<[f64; 7]>,
    pub average: Vec<f64>,
}

impl ScoreTable {
    pub fn row(&self, policy: &str) -> Option<(&[f64; 7], f64)> {
        let i = self.policies.iter().position(|p| p == policy)?;
        Some((&self.scores[i], self.average[i]))
    }
}

/// Normalizes each metric across policies. A metric on which every policy
/// ties scores 1 for all of them.
pub fn normalize_scores(rows: &[(String, [f64; 7])]) -> Result<ScoreTable, ScoreError> {
    if rows.len() < 2 {
        return Err(ScoreError::TooFewPolicies(rows.len()));
    }
    if rows.iter().any(|(_, v)| v.iter().any(|x| !x.is_finite())) {
        return Err(ScoreError::NonFinite);
    }
    let mut scores = vec![[0.0; 7]; rows.len()];
    for m in Metric::ALL {
        let i = m as usize;
        let lo = rows.iter().map(|r| r.1[i]).fold(f64::INFINITY, f64::min);
        let hi = rows.iter().map(|r| r.1[i]).fold(f64::NEG_INFINITY, f64::max);
        for (row, out) in rows.iter().zip(scores.iter_mut()) {
            out[i] = if hi == lo {
                1.0
            } else if m.higher_is_better() {
                (row.1[i] - lo) / (hi - lo)
            } else {
                (hi - row.1[i]) / (hi - lo)
            };
        }
    }
    let average = scores.iter().map(|s| s.iter().sum::<f64>() / 7.0).collect();
    Ok(ScoreTable {
        policies: rows.iter().map(|r| r.0.clone()).collect(),
        scores,
        average,
    })
}

/// Per-episode results file: `episode_id, seed, emergency_day` and the
/// seven metrics.
pub fn write_results_csv<W: Write>(out: W, days: &[DayMetrics]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["episode_id".to_string(), "seed".into(), "emergency_day".into()];
    header.extend(Metric::ALL.iter().map(|m| m.key().to_string()));
    w.write_record(&header)?;
    for (i, d) in days.iter().enumerate() {
        let mut rec = vec![i.to_string(), d.seed.to_string(), (d.emergency_day as u8).to_string()];
        rec.extend(d.values.iter().map(|v| format_num(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Comparison table: one row per (stratum, policy) with mean and sd of
/// every metric.
pub fn write_comparison_csv<W: Write>(out: W, tables: &[(String, Stratified)]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["stratum".to_string(), "policy".into(), "days".into()];
    for m in Metric::ALL {
        header.push(format!("{}_mean", m.key()));
        header.push(format!("{}_sd", m.key()));
    }
    w.write_record(&header)?;
    for s in Stratum::ALL {
        for (policy, t) in tables {
            let row = t.get(s);
            let mut rec = vec![s.label().to_string(), policy.clone(), row.days.to_string()];
            for st in row.stats {
                rec.push(format_num(st.mean));
                rec.push(format_num(st.sd));
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Score table: one row per (stratum, policy) with the seven scores and the
/// average.
pub fn write_scores_csv<W: Write>(out: W, tables: &[(Stratum, ScoreTable)]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["stratum".to_string(), "policy".into()];
    header.extend(Metric::ALL.iter().map(|m| m.key().to_string()));
    header.push("average_score".into());
    w.write_record(&header)?;
    for (s, t) in tables {
        for (i, policy) in t.policies.iter().enumerate() {
            let mut rec = vec![s.label().to_string(), policy.clone()];
            rec.extend(t.scores[i].iter().map(|v| format!("{v:.4}")));
            rec.push(format!("{:.4}", t.average[i]));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Scores for every stratum of a set of policy summaries. Strata in which
/// some policy has no days are skipped.
pub fn score_strata(tables: &[(String, Stratified)]) -> Result<Vec<(Stratum, ScoreTable)>, ScoreError> {
    let mut out = Vec::new();
    for s in Stratum::ALL {
        if tables.iter().any(|(_, t)| t.get(s).days == 0) {
            continue;
        }
        let rows: Vec<(String, [f64; 7])> = tables.iter().map(|(p, t)| (p.clone(), t.get(s).means())).collect();
        out.push((s, normalize_scores(&rows)?));
    }
    Ok(out)
}

/// Human-readable `mean ± sd` table for one stratum.
pub fn format_table(stratum: Stratum, tables: &[(String, Stratified)]) -> String {
    let mut out = format!("{} ({} policies)\n{:<10}", stratum.label(), tables.len(), "policy");
    for m in Metric::ALL {
        out.push_str(&format!("{:>18}", m.label()));
    }
    out.push('\n');
    for (policy, t) in tables {
        out.push_str(&format!("{policy:<10}"));
        for st in t.get(stratum).stats {
            out.push_str(&format!("{:>18}", format!("{:.2} ± {:.2}", st.mean, st.sd)));
        }
        out.push('\n');
    }
    out
}

fn format_num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:.6}")
    }
}

/// Writes `contents` to `path`, creating parent directories.
pub fn write_file(path: impl AsRef<Path>, contents: &[u8]) -> std::io::Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, contents)
}
