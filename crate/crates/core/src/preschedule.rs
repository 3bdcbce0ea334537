//! Pre-day elective plan: reference start slots `tau` and nominal rooms.
//!
//! Electives are planned under expected (rounded-up mean) durations. Each
//! room runs its cases longest-first, grouping equal classes so that the
//! changeovers are paid once per group. Room assignment minimizes, in
//! lexicographic order, the planned slots beyond the horizon and the sum
//! of squared room loads. Up to [`EXACT_LIMIT`] electives are assigned by
//! branch-and-bound, larger rosters by longest-first list scheduling
//! followed by move/swap local search.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::domain::{SimConfig, Slot};

pub const EXACT_LIMIT: usize = 12;

/// Lexicographic plan cost: slots planned past the horizon, then the sum of
/// squared room loads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PlanObjective {
    pub overage_slots: u64,
    pub load_sq: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub elective: usize,
    pub class_id: usize,
    pub reference: Slot,
    pub planned_or: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreSchedule {
    /// Indexed by elective position in the roster.
    pub entries: Vec<PlanEntry>,
    pub makespan: Slot,
    pub objective: PlanObjective,
    pub exact: bool,
}

impl PreSchedule {
    pub fn reference(&self, elective: usize) -> Slot {
        self.entries[elective].reference
    }

    pub fn planned_or(&self, elective: usize) -> usize {
        self.entries[elective].planned_or
    }

    /// Writes the plan file: one `id class tau room` line per elective.
    pub fn to_plan_file(&self) -> String {
        let mut out = String::from("# orsched plan v1\nid class tau room\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{} {} {} {}\n",
                e.elective, e.class_id, e.reference, e.planned_or
            ));
        }
        out
    }
}

/// The elective roster implied by the config: class ids in duration-class
/// order, one entry per elective.
pub fn elective_roster(config: &SimConfig) -> Vec<usize> {
    let mut out = Vec::with_capacity(config.total_electives());
    for dc in crate::domain::DurationClass::ALL {
        let n = config.elective_counts[dc.index()];
        if n > 0 {
            let class = config.elective_class_for(dc).expect("validated config").id;
            out.extend(std::iter::repeat_n(class, n));
        }
    }
    out
}

struct Planner<'a> {
    config: &'a SimConfig,
    classes: &'a [usize],
    /// Electives in within-room sequencing order.
    order: Vec<usize>,
    /// Rank of each elective in `order`.
    rank: Vec<usize>,
}

impl<'a> Planner<'a> {
    fn new(config: &'a SimConfig, classes: &'a [usize]) -> Self {
        let mut order: Vec<usize> = (0..classes.len()).collect();
        order.sort_by(|&a, &b| {
            let (ma, mb) = (expected(config, classes[a]), expected(config, classes[b]));
            mb.cmp(&ma).then(classes[a].cmp(&classes[b])).then(a.cmp(&b))
        });
        let mut rank = vec![0; classes.len()];
        for (r, &e) in order.iter().enumerate() {
            rank[e] = r;
        }
        Planner {
            config,
            classes,
            order,
            rank,
        }
    }

    /// Load of one room holding `members` (any order).
    fn room_load(&self, members: &[usize]) -> Slot {
        let mut seq: Vec<usize> = members.to_vec();
        seq.sort_by_key(|&e| self.rank[e]);
        let mut load = 0;
        let mut prev = None;
        for e in seq {
            let k = self.classes[e];
            load += expected(self.config, k) + self.config.setup.get(prev, k);
            prev = Some(k);
        }
        load
    }

    fn objective_of_loads(&self, loads: &[Slot]) -> PlanObjective {
        let t = self.config.horizon;
        PlanObjective {
            overage_slots: loads.iter().map(|&m| m.saturating_sub(t) as u64).sum(),
            load_sq: loads.iter().map(|&m| (m as u64) * (m as u64)).sum(),
        }
    }

    fn objective(&self, rooms: &[Vec<usize>]) -> PlanObjective {
        let loads: Vec<Slot> = rooms.iter().map(|r| self.room_load(r)).collect();
        self.objective_of_loads(&loads)
    }

    fn list_schedule(&self) -> Vec<Vec<usize>> {
        let j = self.config.num_ors;
        let mut rooms: Vec<Vec<usize>> = vec![Vec::new(); j];
        let mut loads = vec![0 as Slot; j];
        let mut last: Vec<Option<usize>> = vec![None; j];
        for &e in &self.order {
            let k = self.classes[e];
            let (best, _) = (0..j)
                .map(|r| (r, loads[r] + self.config.setup.get(last[r], k)))
                .min_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)))
                .expect("at least one room");
            loads[best] += expected(self.config, k) + self.config.setup.get(last[best], k);
            last[best] = Some(k);
            rooms[best].push(e);
        }
        rooms
    }

    /// First-improvement descent over single moves and pairwise swaps.
    fn local_search(&self, rooms: &mut [Vec<usize>]) {
        let j = rooms.len();
        let mut loads: Vec<Slot> = rooms.iter().map(|r| self.room_load(r)).collect();
        let mut current = self.objective_of_loads(&loads);
        loop {
            let mut improved = false;
            'scan: for a in 0..j {
                for ia in 0..rooms[a].len() {
                    for b in 0..j {
                        if a == b {
                            continue;
                        }
                        // single move a -> b
                        let e = rooms[a][ia];
                        let mut ra = rooms[a].clone();
                        ra.remove(ia);
                        let mut rb = rooms[b].clone();
                        rb.push(e);
                        let (la, lb) = (self.room_load(&ra), self.room_load(&rb));
                        let cand = self.with_loads(&loads, a, la, b, lb);
                        if cand < current {
                            rooms[a] = ra;
                            rooms[b] = rb;
                            loads[a] = la;
                            loads[b] = lb;
                            current = cand;
                            improved = true;
                            break 'scan;
                        }
                        // swaps a[ia] <-> b[ib]
                        for ib in 0..rooms[b].len() {
                            let f = rooms[b][ib];
                            if self.classes[e] == self.classes[f] {
                                continue;
                            }
                            let mut ra = rooms[a].clone();
                            ra[ia] = f;
                            let mut rb = rooms[b].clone();
                            rb[ib] = e;
                            let (la, lb) = (self.room_load(&ra), self.room_load(&rb));
                            let cand = self.with_loads(&loads, a, la, b, lb);
                            if cand < current {
                                rooms[a] = ra;
                                rooms[b] = rb;
                                loads[a] = la;
                                loads[b] = lb;
                                current = cand;
                                improved = true;
                                break 'scan;
                            }
                        }
                    }
                }
            }
            if !improved {
                break;
            }
        }
    }

    fn with_loads(&self, loads: &[Slot], a: usize, la: Slot, b: usize, lb: Slot) -> PlanObjective {
        let mut l = loads.to_vec();
        l[a] = la;
        l[b] = lb;
        self.objective_of_loads(&l)
    }

    fn exact(&self) -> Vec<Vec<usize>> {
        let j = self.config.num_ors;
        let mut best_rooms = self.list_schedule();
        self.local_search(&mut best_rooms);
        let mut best = self.objective(&best_rooms);
        let remaining_work: Vec<Slot> = {
            // suffix sums of expected work in sequencing order (setups excluded)
            let mut s = vec![0; self.order.len() + 1];
            for i in (0..self.order.len()).rev() {
                s[i] = s[i + 1] + expected(self.config, self.classes[self.order[i]]);
            }
            s
        };
        let mut state = BnbState {
            rooms: vec![Vec::new(); j],
            loads: vec![0; j],
            last: vec![None; j],
        };
        self.branch(0, &mut state, &remaining_work, &mut best, &mut best_rooms);
        best_rooms
    }

    fn branch(
        &self,
        depth: usize,
        st: &mut BnbState,
        remaining: &[Slot],
        best: &mut PlanObjective,
        best_rooms: &mut Vec<Vec<usize>>,
    ) {
        if self.bound(&st.loads, remaining[depth]) >= *best {
            return;
        }
        if depth == self.order.len() {
            let obj = self.objective_of_loads(&st.loads);
            if obj < *best {
                *best = obj;
                *best_rooms = st.rooms.clone();
            }
            return;
        }
        let e = self.order[depth];
        let k = self.classes[e];
        let used = st.rooms.iter().filter(|r| !r.is_empty()).count();
        let limit = (used + 1).min(st.rooms.len());
        for r in 0..limit {
            let add = expected(self.config, k) + self.config.setup.get(st.last[r], k);
            let saved_last = st.last[r];
            st.loads[r] += add;
            st.last[r] = Some(k);
            st.rooms[r].push(e);
            self.branch(depth + 1, st, remaining, best, best_rooms);
            st.rooms[r].pop();
            st.last[r] = saved_last;
            st.loads[r] -= add;
        }
    }

    /// Lower bound over completions: remaining work poured into the least
    /// loaded rooms (water filling) with setups ignored.
    fn bound(&self, loads: &[Slot], remaining: Slot) -> PlanObjective {
        let mut l: Vec<f64> = loads.iter().map(|&x| x as f64).collect();
        l.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
        let mut rem = remaining as f64;
        let n = l.len();
        let mut level = l[0];
        let mut i = 1;
        while rem > 0.0 {
            let next = if i < n { l[i] } else { f64::INFINITY };
            let cap = (next - level) * i as f64;
            if cap >= rem {
                level += rem / i as f64;
                rem = 0.0;
            } else {
                rem -= cap;
                level = next;
                i += 1;
            }
        }
        let filled: Vec<f64> = l.iter().map(|&x| x.max(level)).collect();
        let t = self.config.horizon as f64;
        let over: f64 = filled.iter().map(|&m| (m - t).max(0.0)).sum();
        let sq: f64 = filled.iter().map(|&m| m * m).sum();
        // floor keeps the bound admissible against integer objectives
        PlanObjective {
            overage_slots: (over - 1e-9).max(0.0).floor() as u64,
            load_sq: (sq - 1e-6).max(0.0).floor() as u64,
        }
    }

    fn finish(&self, rooms: Vec<Vec<usize>>, exact: bool) -> PreSchedule {
        let n = self.classes.len();
        let mut entries: Vec<Option<PlanEntry>> = vec![None; n];
        let mut makespan = 0;
        for (r, members) in rooms.iter().enumerate() {
            let mut seq = members.clone();
            seq.sort_by_key(|&e| self.rank[e]);
            let mut clock: Slot = 0;
            let mut prev = None;
            for e in seq {
                let k = self.classes[e];
                entries[e] = Some(PlanEntry {
                    elective: e,
                    class_id: k,
                    reference: clock,
                    planned_or: r,
                });
                clock += expected(self.config, k) + self.config.setup.get(prev, k);
                prev = Some(k);
            }
            makespan = makespan.max(clock);
        }
        PreSchedule {
            entries: entries
                .into_iter()
                .map(|e| e.expect("every elective planned"))
                .collect(),
            makespan,
            objective: self.objective(&rooms),
            exact,
        }
    }
}

struct BnbState {
    rooms: Vec<Vec<usize>>,
    loads: Vec<Slot>,
    last: Vec<Option<usize>>,
}

fn expected(config: &SimConfig, class_id: usize) -> Slot {
    config.class(class_id).duration.mean_slots()
}

/// Plans the given electives (class ids, indexed by elective position).
pub fn build_preschedule(electives: &[usize], config: &SimConfig) -> PreSchedule {
    if electives.is_empty() {
        return PreSchedule {
            entries: Vec::new(),
            makespan: 0,
            objective: PlanObjective {
                overage_slots: 0,
                load_sq: 0,
            },
            exact: true,
        };
    }
    let planner = Planner::new(config, electives);
    if electives.len() <= EXACT_LIMIT {
        let rooms = planner.exact();
        planner.finish(rooms, true)
    } else {
        let mut rooms = planner.list_schedule();
        planner.local_search(&mut rooms);
        planner.finish(rooms, false)
    }
}

/// Heuristic path regardless of size (exposed for cross-checking against
/// the exact solver).
pub fn build_preschedule_heuristic(electives: &[usize], config: &SimConfig) -> PreSchedule {
    let planner = Planner::new(config, electives);
    let mut rooms = planner.list_schedule();
    planner.local_search(&mut rooms);
    planner.finish(rooms, false)
}

/// Evaluates the plan objective of an arbitrary room assignment.
pub fn plan_objective(electives: &[usize], rooms: &[Vec<usize>], config: &SimConfig) -> PlanObjective {
    Planner::new(config, electives).objective(rooms)
}
