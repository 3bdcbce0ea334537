//! Property tests for the invariants of every core module, driven through
//! the public API.

use std::collections::HashMap;

use orsched::analytics::{compute_all, export_gantt, normalize_scores, stratify, Stratum};
use orsched::domain::{effective_duration, validate_config, Patient, SetupMatrix, SimConfig, Slot};
use orsched::heuristics::{heuristic_policy, HeuristicKind};
use orsched::marl::nn::masked_softmax;
use orsched::marl::ppo::compute_gae;
use orsched::marl::{collect_trajectory, sample_action, ActionMode, ActorCritic, ObsLayout};
use orsched::oracle::{check_feasible, solve_exact};
use orsched::preschedule::{build_preschedule, plan_objective, PreSchedule};
use orsched::reward::{day_reward, immediate_reward, terminal_reward, waiting_time};
use orsched::simenv::{run_on_roster, ActionProvider, EpisodeRecord};
use orsched::theorycheck::{check_regret_bounds, check_weak_coupling, OneStepQ, TinyInstance};
use orsched::{Episode, JointAction, Simulator};
use proptest::prelude::*;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const KINDS: [HeuristicKind; 6] = [
    HeuristicKind::SptU,
    HeuristicKind::LptU,
    HeuristicKind::NeLpt,
    HeuristicKind::ELpt,
    HeuristicKind::NeSpt,
    HeuristicKind::PreSched,
];

fn default_sim() -> &'static Simulator {
    use std::sync::OnceLock;
    static SIM: OnceLock<Simulator> = OnceLock::new();
    SIM.get_or_init(|| Simulator::new(SimConfig::default_day()))
}

/// A feasible joint action drawn uniformly: each free room in turn picks a
/// still non-empty queue or idles.
fn random_joint(ep: &Episode<'_>, rng: &mut ChaCha8Rng) -> JointAction {
    let state = ep.state();
    let k = ep.config.num_classes();
    let mut left: Vec<usize> = (1..=k).map(|c| state.queue_len(c)).collect();
    let mut action = vec![0; ep.config.num_ors];
    for (j, or) in state.ors.iter().enumerate() {
        if !or.is_free() {
            continue;
        }
        let mut options: Vec<usize> = (1..=k).filter(|&c| left[c - 1] > 0).collect();
        options.push(0);
        let pick = *options.choose(rng).unwrap();
        if pick > 0 {
            left[pick - 1] -= 1;
        }
        action[j] = pick;
    }
    JointAction(action)
}

fn config_strategy() -> impl Strategy<Value = SimConfig> {
    (
        40u32..=160,
        1usize..=8,
        0.0f64..0.2,
        0.0f64..=1.0,
        1usize..=8,
        prop::array::uniform4(0usize..=30),
        0.0f64..0.05,
        0u32..=4,
    )
        .prop_map(|(horizon, ors, rate, eps, batch, counts, oc, setup)| {
            let mut cfg = SimConfig::default_day();
            cfg.horizon = horizon;
            cfg.num_ors = ors;
            cfg.urgent_rate = rate;
            cfg.emergency_day_prob = eps;
            cfg.emergency_batch_size = batch;
            cfg.elective_counts = counts;
            cfg.reward.overtime_cost = oc;
            cfg.setup = SetupMatrix::by_duration_class(&cfg.classes, 0, setup);
            cfg
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    // domain

    #[test]
    fn config_round_trips_through_toml(cfg in config_strategy()) {
        let valid = validate_config(cfg).unwrap();
        let back = SimConfig::from_toml_str(&valid.to_toml_string()).unwrap();
        prop_assert_eq!(back, valid);
    }

    #[test]
    fn effective_duration_is_monotone_and_exact_without_setup(
        xi in 0u32..200,
        extra in 0u32..50,
        prev in prop::option::of(1usize..=8),
        next in 1usize..=8,
        other in 0u32..10,
    ) {
        let cfg = SimConfig::default_day();
        let setup = SetupMatrix::by_duration_class(&cfg.classes, 0, other);
        prop_assert!(effective_duration(xi, prev, next, &setup) <= effective_duration(xi + extra, prev, next, &setup));
        let zero = SetupMatrix::zeros(8);
        prop_assert_eq!(effective_duration(xi, prev, next, &zero), xi);
    }

    // simenv

    #[test]
    fn patients_are_conserved_and_starts_never_move(seed in any::<u64>(), walk in any::<u64>()) {
        let sim = default_sim();
        let roster = sim.roster(seed);
        let mut ep = Episode::new(&sim.config, &roster);
        let mut rng = ChaCha8Rng::seed_from_u64(walk);
        let mut started = Vec::new();
        while !ep.is_done() {
            let a = random_joint(&ep, &mut rng);
            for (j, or) in ep.state().ors.iter().enumerate() {
                if !or.is_free() {
                    prop_assert_eq!(a.0[j], 0);
                }
            }
            ep.step(&a).unwrap();
            let s = ep.state();
            let queued: usize = (1..=sim.config.num_classes()).map(|k| s.queue_len(k)).sum();
            prop_assert_eq!(queued + s.served.len() + s.not_yet_arrived(), roster.patients.len());
            prop_assert_eq!(&s.served[..started.len()], &started[..]);
            started = s.served.clone();
        }
    }

    #[test]
    fn same_class_patients_start_in_queue_order(seed in any::<u64>(), kind in 0usize..6) {
        let sim = default_sim();
        let rec = sim.run_episode(seed, &mut heuristic_policy(KINDS[kind])).unwrap();
        let key = |p: &Patient| (p.arrival, p.reference.unwrap_or(0), p.id);
        for (a, oa) in rec.patients.iter().zip(&rec.outcomes) {
            for (b, ob) in rec.patients.iter().zip(&rec.outcomes) {
                if a.class_id != b.class_id || key(a) >= key(b) {
                    continue;
                }
                match (oa, ob) {
                    (Some(x), Some(y)) => prop_assert!(x.start <= y.start, "{} after {}", a.id, b.id),
                    (None, Some(_)) => prop_assert!(false, "{} skipped ahead of {}", b.id, a.id),
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn roster_is_the_same_under_every_policy(seed in any::<u64>()) {
        let sim = default_sim();
        let roster = sim.roster(seed);
        for kind in KINDS {
            let rec = sim.run_episode(seed, &mut heuristic_policy(kind)).unwrap();
            prop_assert_eq!(&rec.patients, &roster.patients);
            prop_assert_eq!(rec.emergency_slot, roster.emergency_slot);
        }
    }

    #[test]
    fn rosters_listed_out_of_arrival_order_run_identically(seed in any::<u64>(), perm in any::<u64>()) {
        let sim = default_sim();
        let roster = sim.roster(seed);
        let n_e = roster.electives().count();
        // regroup non-electives by arrival slot, shuffle the groups, relabel
        let mut groups: Vec<Vec<Patient>> = Vec::new();
        for p in roster.non_electives() {
            match groups.last_mut() {
                Some(g) if g[0].arrival == p.arrival => g.push(p.clone()),
                _ => groups.push(vec![p.clone()]),
            }
        }
        groups.shuffle(&mut ChaCha8Rng::seed_from_u64(perm));
        let mut relabeled = roster.clone();
        relabeled.patients.truncate(n_e);
        let mut new_id = HashMap::new();
        for p in groups.into_iter().flatten() {
            new_id.insert(p.id, relabeled.patients.len());
            let mut q = p;
            q.id = relabeled.patients.len();
            relabeled.patients.push(q);
        }
        for kind in [HeuristicKind::NeLpt, HeuristicKind::ELpt, HeuristicKind::SptU] {
            let a = run_on_roster(&sim.config, &roster, &mut heuristic_policy(kind)).unwrap();
            let b = run_on_roster(&sim.config, &relabeled, &mut heuristic_policy(kind)).unwrap();
            for (p, o) in a.patients.iter().zip(&a.outcomes) {
                let j = new_id.get(&p.id).copied().unwrap_or(p.id);
                prop_assert_eq!(b.outcomes[j], *o, "patient {}", p.id);
            }
            prop_assert_eq!(a.epoch_rewards, b.epoch_rewards);
        }
    }

    // reward

    #[test]
    fn streamed_rewards_equal_the_batch_objective(seed in any::<u64>(), kind in 0usize..6) {
        let sim = default_sim();
        let rec = sim.run_episode(seed, &mut heuristic_policy(KINDS[kind])).unwrap();
        let batch = day_reward::<f64>(&rec, &sim.config).day_reward;
        prop_assert!((rec.streamed_total() - batch).abs() < 1e-9, "{} vs {batch}", rec.streamed_total());
    }

    #[test]
    fn reward_is_nonincreasing_in_wait_and_overtime(class in 1usize..=8, w in 0u32..200, dw in 0u32..50, ot in 0.0f64..500.0, dot in 0.0f64..100.0) {
        let cfg = SimConfig::default_day();
        let c = cfg.class(class);
        prop_assert!(immediate_reward::<f64>(c, w + dw) <= immediate_reward::<f64>(c, w));
        let co = cfg.reward.overtime_cost;
        prop_assert!(terminal_reward::<f64>(ot + dot, co) <= terminal_reward::<f64>(ot, co));
    }

    #[test]
    fn later_start_or_dropped_case_never_raises_the_day(seed in any::<u64>(), pick in any::<prop::sample::Index>(), delay in 1u32..30) {
        let sim = default_sim();
        let rec = sim.run_episode(seed, &mut heuristic_policy(HeuristicKind::NeLpt)).unwrap();
        let served: Vec<usize> = (0..rec.outcomes.len()).filter(|&i| rec.outcomes[i].is_some()).collect();
        prop_assume!(!served.is_empty());
        let i = served[pick.index(served.len())];
        let base = day_reward::<f64>(&rec, &sim.config).day_reward;

        let mut later = rec.clone();
        later.outcomes[i].as_mut().unwrap().start += delay;
        prop_assert!(day_reward::<f64>(&later, &sim.config).day_reward <= base);

        let p = &rec.patients[i];
        let credit = immediate_reward::<f64>(sim.config.class(p.class_id), waiting_time(p, rec.outcomes[i].unwrap().start));
        let mut dropped = rec.clone();
        dropped.outcomes[i] = None;
        let without = day_reward::<f64>(&dropped, &sim.config).day_reward;
        if credit > 0.0 {
            prop_assert!(without < base);
        }
        prop_assert!((base - without - credit).abs() < 1e-9);
    }

    // heuristics

    #[test]
    fn heuristics_are_safe_and_deterministic_on_random_states(seed in any::<u64>(), walk in any::<u64>()) {
        let sim = default_sim();
        let roster = sim.roster(seed);
        let mut ep = Episode::new(&sim.config, &roster);
        let mut rng = ChaCha8Rng::seed_from_u64(walk);
        while !ep.is_done() {
            for kind in KINDS {
                let a = heuristic_policy(kind).joint_action(&ep);
                prop_assert_eq!(&a, &heuristic_policy(kind).joint_action(&ep));
                prop_assert!(ep.clone().step(&a).is_ok(), "{kind} at {}", ep.clock());
                if matches!(kind, HeuristicKind::NeLpt | HeuristicKind::NeSpt) {
                    let elective = |c: usize| sim.config.class(c).category.is_elective();
                    let started_ne = a.0.iter().filter(|&&c| c > 0 && !elective(c)).count();
                    let queued_ne: usize = (1..=8).filter(|&c| !elective(c)).map(|c| ep.state().queue_len(c)).sum();
                    if a.0.iter().any(|&c| c > 0 && elective(c)) {
                        prop_assert_eq!(started_ne, queued_ne, "{} started an elective over a waiting non-elective", kind);
                    }
                }
            }
            let step = random_joint(&ep, &mut rng);
            ep.step(&step).unwrap();
        }
    }

    // marl

    #[test]
    fn masked_classes_are_never_drawn(
        logits in prop::collection::vec(-30.0f64..30.0, 9),
        mask in prop::collection::vec(any::<bool>(), 9),
        seed in any::<u64>(),
    ) {
        let mut mask = mask;
        mask[0] = true;
        let p = masked_softmax(&logits, &mask);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..200 {
            prop_assert!(mask[sample_action(&p, &mut rng)]);
        }
    }

    #[test]
    fn gae_recursion_matches_the_direct_sum(
        rv in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..60),
        boot in -5.0f64..5.0,
        gamma in 0.5f64..=1.0,
        lambda in 0.0f64..=1.0,
    ) {
        let (r, v): (Vec<f64>, Vec<f64>) = rv.into_iter().unzip();
        let n = r.len();
        let value = |t: usize| if t < n { v[t] } else { boot };
        let (adv, ret) = compute_gae(&r, &v, boot, gamma, lambda);
        for t in 0..n {
            let mut direct = 0.0;
            let mut w = 1.0;
            for l in t..n {
                direct += w * (r[l] + gamma * value(l + 1) - v[l]);
                w *= gamma * lambda;
            }
            prop_assert!((adv[t] - direct).abs() < 1e-10);
            prop_assert!((ret[t] - (adv[t] + v[t])).abs() < 1e-12);
        }
    }

    #[test]
    fn team_reward_is_the_sum_of_agent_rewards(seed in any::<u64>(), net_seed in 0u64..4) {
        let sim = default_sim();
        let net = ActorCritic::<f64>::new(ObsLayout::new(8, 6), &[16], net_seed);
        let t = collect_trajectory(sim, seed, &net, ActionMode::Sample(seed ^ 1), false).unwrap();
        let mut per_epoch = vec![0.0; t.epoch_rewards.len()];
        for tr in &t.transitions {
            per_epoch[tr.clock as usize] += tr.reward;
        }
        for (a, b) in per_epoch.iter().zip(&t.epoch_rewards) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        prop_assert!((t.day_reward() - day_reward::<f64>(&t.record, &sim.config).day_reward).abs() < 1e-9);
    }

    // preschedule

    #[test]
    fn plans_are_deterministic_feasible_and_locally_optimal(
        classes in prop::collection::vec(1usize..=4, 1..24),
        ors in 1usize..=6,
    ) {
        let mut cfg = SimConfig::default_day();
        cfg.num_ors = ors;
        let plan = build_preschedule(&classes, &cfg);
        prop_assert_eq!(&plan, &build_preschedule(&classes, &cfg));
        prop_assert_eq!(plan.entries.len(), classes.len());

        let mut rooms = vec![Vec::new(); ors];
        for e in &plan.entries {
            rooms[e.planned_or].push(e.elective);
        }
        for room in &rooms {
            let mut blocks: Vec<(Slot, Slot)> = room
                .iter()
                .map(|&i| {
                    let e = &plan.entries[i];
                    (e.reference, e.reference + cfg.class(e.class_id).duration.mean_slots())
                })
                .collect();
            blocks.sort();
            for w in blocks.windows(2) {
                prop_assert!(w[0].1 <= w[1].0, "{:?}", w);
            }
        }

        let best = plan_objective(&classes, &rooms, &cfg);
        prop_assert_eq!(best, plan.objective);
        for a in 0..ors {
            for b in 0..ors {
                if a == b {
                    continue;
                }
                for ia in 0..rooms[a].len() {
                    let mut moved = rooms.clone();
                    let x = moved[a].remove(ia);
                    moved[b].push(x);
                    prop_assert!(plan_objective(&classes, &moved, &cfg) >= best);
                    for ib in 0..rooms[b].len() {
                        let mut swapped = rooms.clone();
                        let tmp = swapped[a][ia];
                        swapped[a][ia] = swapped[b][ib];
                        swapped[b][ib] = tmp;
                        prop_assert!(plan_objective(&classes, &swapped, &cfg) >= best);
                    }
                }
            }
        }
    }

    #[test]
    fn plan_references_anchor_the_simulated_electives(seed in any::<u64>()) {
        let sim = default_sim();
        let plan: &PreSchedule = &sim.plan;
        let roster = sim.roster(seed);
        for (i, p) in roster.electives().enumerate() {
            prop_assert_eq!(p.reference, Some(plan.reference(i)));
            prop_assert_eq!(p.planned_or, Some(plan.planned_or(i)));
        }
    }

    // oracle

    #[test]
    fn exact_oracle_is_feasible_consistent_and_dominant(seed in any::<u64>()) {
        let tiny = TinyInstance::random(seed, 7);
        let inst = tiny.oracle_instance();
        let sol = solve_exact(&inst).unwrap();
        prop_assert!(check_feasible(&inst, &sol.cases).is_ok());
        let rec = sol.to_record(&inst);
        let recomputed = day_reward::<f64>(&rec, &inst.config).day_reward;
        prop_assert!((recomputed - sol.objective).abs() < 1e-9);
        for kind in KINDS {
            let run = run_on_roster(&inst.config, &inst.roster, &mut heuristic_policy(kind)).unwrap();
            let cr = day_reward::<f64>(&run, &inst.config).day_reward;
            prop_assert!(sol.objective >= cr - 1e-9, "{kind}: oracle {} < {cr}", sol.objective);
        }
    }

    // analytics

    #[test]
    fn scores_span_zero_to_one(rows in prop::collection::vec(prop::array::uniform7(-1e3f64..1e3), 2..9)) {
        let named: Vec<(String, [f64; 7])> = rows.iter().enumerate().map(|(i, r)| (format!("p{i}"), *r)).collect();
        let table = normalize_scores(&named).unwrap();
        for m in 0..7 {
            let col: Vec<f64> = table.scores.iter().map(|s| s[m]).collect();
            prop_assert!(col.iter().all(|v| (0.0..=1.0).contains(v)));
            let distinct = rows.iter().any(|r| r[m] != rows[0][m]);
            if distinct {
                prop_assert_eq!(col.iter().cloned().fold(f64::INFINITY, f64::min), 0.0);
                prop_assert_eq!(col.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 1.0);
            }
        }
        for (s, avg) in table.scores.iter().zip(&table.average) {
            prop_assert!((s.iter().sum::<f64>() / 7.0 - avg).abs() < 1e-12);
        }
    }

    #[test]
    fn strata_partition_the_days(base in any::<u64>(), n in 1usize..40) {
        let sim = default_sim();
        let records: Vec<EpisodeRecord> = (0..n as u64)
            .map(|i| sim.run_episode(base.wrapping_add(i), &mut heuristic_policy(HeuristicKind::NeSpt)).unwrap())
            .collect();
        let days = compute_all(&records, &sim.config);
        let s = stratify(&days);
        let count = |st: Stratum| s.get(st).days;
        prop_assert_eq!(count(Stratum::AllDays), n);
        prop_assert_eq!(count(Stratum::EmergencyDays) + count(Stratum::NonEmergencyDays), n);
    }

    #[test]
    fn gantt_lanes_never_overlap(seed in any::<u64>(), kind in 0usize..6) {
        let sim = default_sim();
        let rec = sim.run_episode(seed, &mut heuristic_policy(KINDS[kind])).unwrap();
        let g = export_gantt(&rec, &sim.config);
        let mut lanes: Vec<Vec<(u32, u32, u32)>> = vec![vec![]; sim.config.num_ors];
        for line in g.timeline.lines().skip(3) {
            let f: Vec<&str> = line.split(' ').collect();
            let or: usize = f[0].parse().unwrap();
            lanes[or].push((f[4].parse().unwrap(), f[5].parse().unwrap(), f[6].parse().unwrap()));
        }
        prop_assert_eq!(lanes.iter().map(Vec::len).sum::<usize>(), rec.served_count());
        for lane in &mut lanes {
            lane.sort();
            for &(start, setup_end, finish) in lane.iter() {
                prop_assert!(start <= setup_end && setup_end <= finish);
            }
            for w in lane.windows(2) {
                prop_assert!(w[0].2 <= w[1].0, "{:?}", w);
            }
        }
    }

    // theorycheck

    #[test]
    fn joint_enumeration_dominates_the_sequential_pick(seed in any::<u64>(), with_ot in any::<bool>()) {
        let q = if with_ot { OneStepQ::WithOvertime } else { OneStepQ::Immediate };
        let tiny = TinyInstance::random(seed, 8);
        let report = check_weak_coupling(&tiny, q);
        for e in &report.epochs {
            prop_assert!(e.joint_value >= e.sequential_value - 1e-9, "{:?}", e);
            prop_assert!((e.gamma - (e.joint_value - e.sequential_value)).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_bound_dominates_the_wait_bound_when_waits_only_grow(seed in any::<u64>(), kind in 0usize..6) {
        let tiny = TinyInstance::random(seed, 6);
        let inst = tiny.oracle_instance();
        let opt = solve_exact(&inst).unwrap();
        let seq = run_on_roster(&inst.config, &inst.roster, &mut heuristic_policy(KINDS[kind])).unwrap();
        let b = check_regret_bounds(&inst, &seq, &opt);
        prop_assume!(b.same_coverage);
        let opt_rec = opt.to_record(&inst);
        let waits_grow = seq.patients.iter().enumerate().all(|(i, p)| match (seq.outcomes[i], opt_rec.outcomes[i]) {
            (Some(s), Some(o)) => waiting_time(p, s.start) >= waiting_time(p, o.start),
            _ => true,
        });
        let horizon_covers = seq
            .served()
            .chain(opt_rec.served())
            .all(|(p, o)| waiting_time(p, o.start) <= inst.config.horizon);
        if waits_grow && horizon_covers {
            prop_assert!(b.monotone(), "{:?}", b);
        }
        prop_assert!(b.wait_holds(), "{:?}", b);
    }
}

#[test]
fn uniform_random_walks_cover_busy_rooms() {
    // guards the fuzzers above against a walk that never fills a room
    let sim = default_sim();
    let roster = sim.roster(1);
    let mut ep = Episode::new(&sim.config, &roster);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut busy = 0;
    while !ep.is_done() {
        busy += ep.state().in_progress();
        let a = random_joint(&ep, &mut rng);
        ep.step(&a).unwrap();
    }
    assert!(busy > 0);
}
