//! Simulated annealing over room sequences and serve/unserve decisions,
//! started from the NE_LPT schedule of the same realization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{decode_room, finish_solution, OracleInstance, OracleSolution, SolverStatus};
use crate::heuristics::{heuristic_policy, HeuristicKind};
use crate::simenv::run_on_roster;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchOptions {
    pub iterations: u64,
    pub seed: u64,
    /// Starting and final annealing temperatures, in objective units.
    pub temp_start: f64,
    pub temp_end: f64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            iterations: 100_000,
            seed: 0,
            temp_start: 5.0,
            temp_end: 0.01,
        }
    }
}

/// Room sequences of the NE_LPT run on this realization.
fn seed_rooms(inst: &OracleInstance) -> Vec<Vec<usize>> {
    let mut policy = heuristic_policy(HeuristicKind::NeLpt);
    let mut rooms = vec![Vec::new(); inst.config.num_ors];
    if let Ok(rec) = run_on_roster(&inst.config, &inst.roster, &mut policy) {
        let mut cases: Vec<_> = rec.served().map(|(p, o)| (o.or, o.start, p.id)).collect();
        cases.sort();
        for (or, _, id) in cases {
            rooms[or].push(id);
        }
    }
    rooms
}

struct State<'a> {
    inst: &'a OracleInstance,
    rooms: Vec<Vec<usize>>,
    pool: Vec<usize>,
    values: Vec<f64>,
    scratch: Vec<super::ScheduledCase>,
}

impl State<'_> {
    fn room_value(&mut self, or: usize) -> f64 {
        self.scratch.clear();
        let (credit, ot) = decode_room(self.inst, or, &self.rooms[or], &mut self.scratch);
        credit - self.inst.config.reward.overtime_cost * ot as f64
    }

    fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

enum Undo {
    Rooms(Vec<(usize, Vec<usize>, f64)>),
    RoomsAndPool(Vec<(usize, Vec<usize>, f64)>, Vec<usize>),
}

/// Annealing with a monotone best-so-far. Zero iterations return the seed
/// schedule.
pub fn solve_search(inst: &OracleInstance, opts: &SearchOptions) -> OracleSolution {
    let j = inst.config.num_ors;
    let rooms = seed_rooms(inst);
    let mut served = vec![false; inst.num_patients()];
    for &id in rooms.iter().flatten() {
        served[id] = true;
    }
    let pool: Vec<usize> = (0..inst.num_patients()).filter(|&i| !served[i]).collect();
    let mut st = State {
        inst,
        rooms,
        pool,
        values: vec![0.0; j],
        scratch: Vec::new(),
    };
    for or in 0..j {
        st.values[or] = st.room_value(or);
    }
    let mut current = st.total();
    let mut best = (current, st.rooms.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n_iter = opts.iterations;
    let ratio = (opts.temp_end / opts.temp_start).max(1e-12);

    for it in 0..n_iter {
        if j == 0 || inst.num_patients() == 0 {
            break;
        }
        let temp = opts.temp_start * ratio.powf(it as f64 / n_iter.max(1) as f64);
        let served_total: usize = st.rooms.iter().map(Vec::len).sum();
        let mv = rng.random_range(0..5u8);
        let undo = match mv {
            // insert an unserved patient
            0 if !st.pool.is_empty() => {
                let pi = rng.random_range(0..st.pool.len());
                let or = rng.random_range(0..j);
                let pos = rng.random_range(0..=st.rooms[or].len());
                let saved = (or, st.rooms[or].clone(), st.values[or]);
                let pool_saved = st.pool.clone();
                let id = st.pool.swap_remove(pi);
                st.rooms[or].insert(pos, id);
                st.values[or] = st.room_value(or);
                Undo::RoomsAndPool(vec![saved], pool_saved)
            }
            // drop a served patient
            1 if served_total > 0 => {
                let or = pick_nonempty(&st.rooms, &mut rng);
                let pos = rng.random_range(0..st.rooms[or].len());
                let saved = (or, st.rooms[or].clone(), st.values[or]);
                let pool_saved = st.pool.clone();
                let id = st.rooms[or].remove(pos);
                st.pool.push(id);
                st.values[or] = st.room_value(or);
                Undo::RoomsAndPool(vec![saved], pool_saved)
            }
            // relocate within or across rooms
            2 if served_total > 0 => {
                let from = pick_nonempty(&st.rooms, &mut rng);
                let to = rng.random_range(0..j);
                let mut saved = vec![(from, st.rooms[from].clone(), st.values[from])];
                if to != from {
                    saved.push((to, st.rooms[to].clone(), st.values[to]));
                }
                let pos = rng.random_range(0..st.rooms[from].len());
                let id = st.rooms[from].remove(pos);
                let at = rng.random_range(0..=st.rooms[to].len());
                st.rooms[to].insert(at, id);
                st.values[from] = st.room_value(from);
                if to != from {
                    st.values[to] = st.room_value(to);
                }
                Undo::Rooms(saved)
            }
            // swap two served patients
            3 if served_total > 1 => {
                let a = pick_nonempty(&st.rooms, &mut rng);
                let b = pick_nonempty(&st.rooms, &mut rng);
                let mut saved = vec![(a, st.rooms[a].clone(), st.values[a])];
                if b != a {
                    saved.push((b, st.rooms[b].clone(), st.values[b]));
                }
                let ia = rng.random_range(0..st.rooms[a].len());
                let ib = rng.random_range(0..st.rooms[b].len());
                if a == b {
                    st.rooms[a].swap(ia, ib);
                } else {
                    let tmp = st.rooms[a][ia];
                    st.rooms[a][ia] = st.rooms[b][ib];
                    st.rooms[b][ib] = tmp;
                }
                st.values[a] = st.room_value(a);
                if b != a {
                    st.values[b] = st.room_value(b);
                }
                Undo::Rooms(saved)
            }
            // replace a served patient with an unserved one
            4 if served_total > 0 && !st.pool.is_empty() => {
                let or = pick_nonempty(&st.rooms, &mut rng);
                let pos = rng.random_range(0..st.rooms[or].len());
                let pi = rng.random_range(0..st.pool.len());
                let saved = (or, st.rooms[or].clone(), st.values[or]);
                let pool_saved = st.pool.clone();
                std::mem::swap(&mut st.rooms[or][pos], &mut st.pool[pi]);
                st.values[or] = st.room_value(or);
                Undo::RoomsAndPool(vec![saved], pool_saved)
            }
            _ => continue,
        };
        let proposed = st.total();
        let delta = proposed - current;
        let accept = delta >= 0.0 || rng.random::<f64>() < (delta / temp).exp();
        if accept {
            current = proposed;
            if current > best.0 + 1e-12 {
                best = (current, st.rooms.clone());
            }
        } else {
            match undo {
                Undo::Rooms(saved) => restore(&mut st, saved),
                Undo::RoomsAndPool(saved, pool) => {
                    restore(&mut st, saved);
                    st.pool = pool;
                }
            }
        }
    }
    finish_solution(inst, &best.1, SolverStatus::LocalSearch, n_iter)
}

fn restore(st: &mut State<'_>, saved: Vec<(usize, Vec<usize>, f64)>) {
    for (or, seq, v) in saved {
        st.rooms[or] = seq;
        st.values[or] = v;
    }
}

fn pick_nonempty<R: Rng>(rooms: &[Vec<usize>], rng: &mut R) -> usize {
    let total: usize = rooms.iter().map(Vec::len).sum();
    let mut k = rng.random_range(0..total);
    for (or, r) in rooms.iter().enumerate() {
        if k < r.len() {
            return or;
        }
        k -= r.len();
    }
    unreachable!("total counts every room")
}
