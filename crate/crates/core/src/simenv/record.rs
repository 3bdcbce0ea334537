use std::fmt::Write as _;

use thiserror::Error;

use crate::domain::{Patient, Slot};
use crate::reward;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CaseOutcome {
    pub start: Slot,
    pub or: usize,
    /// Changeover slots at the head of the room block.
    pub setup: Slot,
    /// `start + setup + duration`.
    pub finish: Slot,
}

/// The realized schedule of one day: every patient of the roster with its
/// outcome, if started.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub horizon: Slot,
    pub num_ors: usize,
    pub emergency_slot: Option<Slot>,
    pub patients: Vec<Patient>,
    pub outcomes: Vec<Option<CaseOutcome>>,
    pub or_last_finish: Vec<Slot>,
    /// Team reward streamed at each decision epoch (empty for parsed files).
    pub epoch_rewards: Vec<f64>,
    pub terminal_reward: f64,
}

#[derive(Debug, Error)]
pub enum RecordParseError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("missing header field `{0}`")]
    MissingHeader(&'static str),
}

impl EpisodeRecord {
    pub fn emergency_fired(&self) -> bool {
        self.emergency_slot.is_some()
    }

    pub fn served_count(&self) -> usize {
        self.outcomes.iter().filter(|o| o.is_some()).count()
    }

    pub fn served(&self) -> impl Iterator<Item = (&Patient, &CaseOutcome)> {
        self.patients
            .iter()
            .zip(&self.outcomes)
            .filter_map(|(p, o)| o.as_ref().map(|o| (p, o)))
    }

    pub fn overtime(&self) -> Slot {
        reward::overtime(&self.or_last_finish, self.horizon)
    }

    /// Sum of streamed team rewards plus the terminal penalty.
    pub fn streamed_total(&self) -> f64 {
        self.epoch_rewards.iter().sum::<f64>() + self.terminal_reward
    }

    /// Line-oriented text form: a header, then one
    /// `id class arrival reference duration start or finish plan` line per
    /// patient, with `-` for absent values.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let em = self.emergency_slot.map_or("-".to_string(), |s| s.to_string());
        let _ = writeln!(out, "# orsched episode v1");
        let _ = writeln!(
            out,
            "# seed={} horizon={} ors={} emergency_slot={}",
            self.seed, self.horizon, self.num_ors, em
        );
        let _ = writeln!(out, "id class arrival reference duration start or finish plan");
        let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
        for (p, o) in self.patients.iter().zip(&self.outcomes) {
            let _ = writeln!(
                out,
                "{} {} {} {} {} {} {} {} {}",
                p.id,
                p.class_id,
                p.arrival,
                opt(p.reference.map(|r| r.to_string())),
                p.duration,
                opt(o.map(|o| o.start.to_string())),
                opt(o.map(|o| o.or.to_string())),
                opt(o.map(|o| o.finish.to_string())),
                opt(p.planned_or.map(|r| r.to_string())),
            );
        }
        out
    }

    /// Parses [`EpisodeRecord::to_text`] output. Streamed rewards are not
    /// stored in the file; the terminal reward is recomputed from
    /// `overtime_cost`.
    pub fn from_text(text: &str, overtime_cost: f64) -> Result<Self, RecordParseError> {
        let mut seed = None;
        let mut horizon = None;
        let mut num_ors = None;
        let mut emergency_slot = None;
        let mut patients = Vec::new();
        let mut outcomes = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            let bad = |message: String| RecordParseError::Malformed { line: line_no, message };
            let line = line.trim();
            if line.is_empty() || line.starts_with("id ") {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                for kv in rest.split_whitespace() {
                    let Some((k, v)) = kv.split_once('=') else { continue };
                    let parse = |v: &str| v.parse::<u64>().map_err(|e| bad(format!("{k}: {e}")));
                    match k {
                        "seed" => seed = Some(parse(v)?),
                        "horizon" => horizon = Some(parse(v)? as Slot),
                        "ors" => num_ors = Some(parse(v)? as usize),
                        "emergency_slot" => emergency_slot = if v == "-" { None } else { Some(parse(v)? as Slot) },
                        _ => {}
                    }
                }
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 9 {
                return Err(bad(format!("expected 9 columns, found {}", cols.len())));
            }
            let num = |i: usize| cols[i].parse::<u64>().map_err(|e| bad(format!("column {i}: {e}")));
            let opt = |i: usize| -> Result<Option<u64>, RecordParseError> {
                if cols[i] == "-" {
                    Ok(None)
                } else {
                    num(i).map(Some)
                }
            };
            let duration = num(4)? as Slot;
            patients.push(Patient {
                id: num(0)? as usize,
                class_id: num(1)? as usize,
                arrival: num(2)? as Slot,
                reference: opt(3)?.map(|v| v as Slot),
                duration,
                raw_duration: duration as f64,
                planned_or: opt(8)?.map(|v| v as usize),
            });
            let outcome = match (opt(5)?, opt(6)?, opt(7)?) {
                (Some(start), Some(or), Some(finish)) => {
                    let (start, finish) = (start as Slot, finish as Slot);
                    let setup = finish
                        .checked_sub(start + duration)
                        .ok_or_else(|| bad("finish precedes start + duration".into()))?;
                    Some(CaseOutcome {
                        start,
                        or: or as usize,
                        setup,
                        finish,
                    })
                }
                (None, None, None) => None,
                _ => return Err(bad("start, or and finish must be all present or all absent".into())),
            };
            outcomes.push(outcome);
        }
        let horizon = horizon.ok_or(RecordParseError::MissingHeader("horizon"))?;
        let num_ors = num_ors.ok_or(RecordParseError::MissingHeader("ors"))?;
        let mut or_last_finish = vec![0; num_ors];
        for o in outcomes.iter().flatten() {
            if o.or >= num_ors {
                return Err(RecordParseError::Malformed {
                    line: 0,
                    message: format!("room {} out of range", o.or),
                });
            }
            or_last_finish[o.or] = or_last_finish[o.or].max(o.finish);
        }
        let ot = reward::overtime(&or_last_finish, horizon);
        Ok(EpisodeRecord {
            seed: seed.ok_or(RecordParseError::MissingHeader("seed"))?,
            horizon,
            num_ors,
            emergency_slot,
            patients,
            outcomes,
            or_last_finish,
            epoch_rewards: Vec::new(),
            terminal_reward: reward::terminal_reward(ot as f64, overtime_cost),
        })
    }
}
