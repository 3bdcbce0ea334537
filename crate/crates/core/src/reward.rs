//! Scalar reward signals: waiting, per-start credit, overtime and the
//! day-level objective.

use crate::domain::{Patient, SimConfig, Slot, SurgeryClass};
use crate::scalar::Scalar;
use crate::simenv::EpisodeRecord;

/// Elective: lateness against the reference slot (early starts cost
/// nothing). Non-elective: time since arrival.
#[inline]
pub fn waiting_time(patient: &Patient, start: Slot) -> Slot {
    match patient.reference {
        Some(tau) => start.saturating_sub(tau),
        None => {
            debug_assert!(start >= patient.arrival, "start before arrival");
            start - patient.arrival
        }
    }
}

/// `u_k - c_k * wait^2`.
#[inline]
pub fn immediate_reward<S: Scalar>(class: &SurgeryClass, wait: Slot) -> S {
    let w = S::lit(wait as f64);
    S::lit(class.utility) - S::lit(class.delay_coeff) * w * w
}

/// Suite overtime: summed excess of each room's last completion over the
/// horizon.
pub fn overtime(last_finishes: &[Slot], horizon: Slot) -> Slot {
    last_finishes.iter().map(|&f| f.saturating_sub(horizon)).sum()
}

#[inline]
pub fn terminal_reward<S: Scalar>(overtime: S, overtime_cost: f64) -> S {
    -(S::lit(overtime_cost) * overtime)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientCredit<S> {
    pub patient: usize,
    pub utility: S,
    pub wait: Slot,
    pub delay_penalty: S,
}

/// Day-level decomposition of the objective. Unserved patients carry no
/// term.
#[derive(Clone, Debug, PartialEq)]
pub struct DayOutcome<S> {
    pub credits: Vec<PatientCredit<S>>,
    pub overtime_slots: Slot,
    pub overtime_penalty: S,
    pub day_reward: S,
}

impl<S: Scalar> DayOutcome<S> {
    pub fn revenue(&self) -> S {
        self.credits.iter().map(|c| c.utility).sum()
    }

    pub fn total_delay_penalty(&self) -> S {
        self.credits.iter().map(|c| c.delay_penalty).sum()
    }
}

/// Batch recomputation of the day objective from a finished schedule.
pub fn day_reward<S: Scalar>(episode: &EpisodeRecord, config: &SimConfig) -> DayOutcome<S> {
    let mut credits = Vec::new();
    let mut total = S::zero();
    for (p, o) in episode.served() {
        let class = config.class(p.class_id);
        let wait = waiting_time(p, o.start);
        let w = S::lit(wait as f64);
        let utility = S::lit(class.utility);
        let delay_penalty = S::lit(class.delay_coeff) * w * w;
        total = total + (utility - delay_penalty);
        credits.push(PatientCredit {
            patient: p.id,
            utility,
            wait,
            delay_penalty,
        });
    }
    let overtime_slots = overtime(&episode.or_last_finish, config.horizon);
    let overtime_penalty = S::lit(config.reward.overtime_cost) * S::lit(overtime_slots as f64);
    DayOutcome {
        credits,
        overtime_slots,
        overtime_penalty,
        day_reward: total - overtime_penalty,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::SimConfig;

    fn patient(class_id: usize, arrival: Slot, reference: Option<Slot>) -> Patient {
        Patient {
            id: 0,
            class_id,
            arrival,
            reference,
            duration: 1,
            raw_duration: 1.0,
            planned_or: None,
        }
    }

    #[test]
    fn waiting_time_cases() {
        assert_eq!(waiting_time(&patient(1, 0, Some(15)), 12), 0);
        assert_eq!(waiting_time(&patient(5, 12, None), 20), 8);
        assert_eq!(waiting_time(&patient(1, 0, Some(10)), 10), 0);
        assert_eq!(waiting_time(&patient(1, 0, Some(10)), 13), 3);
    }

    #[test]
    fn immediate_reward_examples() {
        let cfg = SimConfig::default_day();
        let long_urgent = cfg.class(7);
        assert!((immediate_reward::<f64>(long_urgent, 10) - 29.6).abs() < 1e-12);
        for c in &cfg.classes {
            assert_eq!(immediate_reward::<f64>(c, 0), c.utility);
        }
        let minor_elective = cfg.class(1);
        assert!((immediate_reward::<f64>(minor_elective, 20) - 7.2).abs() < 1e-12);
        assert!((immediate_reward::<f32>(minor_elective, 20) - 7.2).abs() < 1e-5);
    }

    #[test]
    fn overtime_examples() {
        assert_eq!(overtime(&[105, 98, 100, 90, 110, 100], 100), 15);
        assert_eq!(overtime(&[10, 99, 100], 100), 0);
        assert_eq!(overtime(&[101], 100), 1);
    }

    #[test]
    fn terminal_reward_examples() {
        assert!((terminal_reward(40.0_f64, 0.005) + 0.2).abs() < 1e-15);
        assert_eq!(terminal_reward(0.0_f64, 0.005), 0.0);
        assert!((terminal_reward(46.38_f64, 0.005) + 0.2319).abs() < 1e-12);
    }
}
