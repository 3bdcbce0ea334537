use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use orsched::analytics::{
    compute_all, export_gantt, format_table, score_strata, stratify, write_comparison_csv, write_results_csv,
    write_scores_csv, Metric, Stratified, Stratum,
};
use orsched::domain::SimConfig;
use orsched::heuristics::{heuristic_policy, HeuristicKind};
use orsched::marl::{self, marl_policy, ActorCritic, Checkpoint, CurvePoint, CHECKPOINT_FORMAT};
use orsched::oracle::{self, OracleInstance, RegretReport, SearchOptions, SolverStatus};
use orsched::scalar::Scalar;
use orsched::seeding::seed_list;
use orsched::simenv::{run_on_roster, EpisodeRecord, ProtocolError, Roster};
use orsched::theorycheck::run_theory_checks;
use orsched::Simulator;
use rayon::prelude::*;
use serde::Serialize;

use crate::manifest::{Outputs, RunManifest};
use crate::{Cli, Command, Common, PolicyArgs, ScalarKind, UsageError, OUT_ENV};

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.common.jobs)
        .build()
        .context("starting the worker pool")?;
    pool.install(|| dispatch(&cli))
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::Simulate(a) => simulate(c, &a.policy, a.days, a.records),
        Command::Train(a) => train(c, a),
        Command::Evaluate(a) => evaluate(c, a.checkpoint.as_deref(), a.days),
        Command::Compare(a) => compare(c, &a.policy, a.checkpoint.as_deref(), a.days),
        Command::Preschedule => preschedule(c),
        Command::Oracle(a) => oracle(c, a),
        Command::Theorycheck(a) => theorycheck(c, a.instances, a.bound_instances),
        Command::Gantt(a) => gantt(c, a.episode.as_deref(), &a.policy),
    }
}

fn load_config(common: &Common) -> anyhow::Result<SimConfig> {
    match &common.config {
        Some(path) => SimConfig::load(path).with_context(|| format!("config {}", path.display())),
        None => Ok(SimConfig::default_day()),
    }
}

fn out_dir(common: &Common, command: &str) -> PathBuf {
    if let Some(p) = &common.out {
        return p.clone();
    }
    match std::env::var_os(OUT_ENV) {
        Some(p) if !p.is_empty() => PathBuf::from(p),
        _ => Path::new("orsched-out").join(command),
    }
}

fn outputs(common: &Common, command: &str, cfg: &SimConfig) -> anyhow::Result<Outputs> {
    let dir = out_dir(common, command);
    let manifest = RunManifest::new(command, cfg.hash_hex(), common.seed, &dir);
    Outputs::new(dir, manifest)
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> csv::Result<()>) -> anyhow::Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn require_days(days: usize) -> anyhow::Result<()> {
    if days == 0 {
        bail!(UsageError("--days must be at least 1".into()));
    }
    Ok(())
}

/// A trained network at either precision.
enum Net {
    F32(ActorCritic<f32>),
    F64(ActorCritic<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PolicySpec {
    Heuristic(HeuristicKind),
    Marl,
}

impl PolicySpec {
    fn parse(s: &str) -> anyhow::Result<Self> {
        if s.eq_ignore_ascii_case("marl") {
            return Ok(PolicySpec::Marl);
        }
        s.parse::<HeuristicKind>()
            .map(PolicySpec::Heuristic)
            .map_err(|e| anyhow::Error::new(UsageError(format!("{e}; or marl"))))
    }

    fn label(self) -> &'static str {
        match self {
            PolicySpec::Heuristic(k) => k.label(),
            PolicySpec::Marl => "MARL",
        }
    }
}

fn load_net(path: Option<&Path>, cfg: &SimConfig) -> anyhow::Result<Net> {
    let Some(path) = path else {
        bail!(UsageError(
            "the marl policy needs --checkpoint <file>; create one with `orsched train --out <dir>`".into()
        ));
    };
    if !path.is_file() {
        bail!(
            "no checkpoint at {}; train one with `orsched train --out {}` or point --checkpoint at an existing file",
            path.display(),
            path.parent()
                .filter(|p| !p.as_os_str().is_empty())
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| ".".into())
        );
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let header: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("{} is not a checkpoint", path.display()))?;
    let hash = cfg.hash_hex();
    let ctx = || format!("loading checkpoint {}", path.display());
    match header.get("scalar").and_then(|v| v.as_str()) {
        Some("f64") => Ok(Net::F64(
            marl::load_checkpoint::<f64>(path, Some(&hash)).with_context(ctx)?.net,
        )),
        Some("f32") => Ok(Net::F32(
            marl::load_checkpoint::<f32>(path, Some(&hash)).with_context(ctx)?.net,
        )),
        other => bail!("{}: unknown scalar {other:?}", path.display()),
    }
}

fn run_roster(
    cfg: &SimConfig,
    roster: &Roster,
    spec: PolicySpec,
    net: Option<&Net>,
) -> Result<EpisodeRecord, ProtocolError> {
    match (spec, net) {
        (PolicySpec::Heuristic(k), _) => run_on_roster(cfg, roster, &mut heuristic_policy(k)),
        (PolicySpec::Marl, Some(Net::F32(n))) => run_on_roster(cfg, roster, &mut marl_policy(n)),
        (PolicySpec::Marl, Some(Net::F64(n))) => run_on_roster(cfg, roster, &mut marl_policy(n)),
        (PolicySpec::Marl, None) => unreachable!("marl runs are preceded by load_net"),
    }
}

/// Episodes for every seed, in seed order regardless of thread count.
fn run_days(sim: &Simulator, spec: PolicySpec, net: Option<&Net>, seeds: &[u64]) -> anyhow::Result<Vec<EpisodeRecord>> {
    seeds
        .par_iter()
        .map(|&s| run_roster(&sim.config, &sim.roster(s), spec, net))
        .collect::<Result<Vec<_>, _>>()
        .with_context(|| format!("{} violated the action protocol", spec.label()))
}

fn policy_with_net(args: &PolicyArgs, cfg: &SimConfig) -> anyhow::Result<(PolicySpec, Option<Net>)> {
    let spec = PolicySpec::parse(&args.policy)?;
    let net = match spec {
        PolicySpec::Marl => Some(load_net(args.checkpoint.as_deref(), cfg)?),
        PolicySpec::Heuristic(_) => None,
    };
    Ok((spec, net))
}

fn mean_cr(records: &[EpisodeRecord], cfg: &SimConfig) -> f64 {
    let days = compute_all(records, cfg);
    days.iter().map(|d| d.get(Metric::Cr)).sum::<f64>() / days.len().max(1) as f64
}

fn simulate(common: &Common, policy: &PolicyArgs, days: usize, records: bool) -> anyhow::Result<()> {
    require_days(days)?;
    let cfg = load_config(common)?;
    let (spec, net) = policy_with_net(policy, &cfg)?;
    let sim = Simulator::new(cfg);
    let seeds = seed_list(common.seed, days);
    let eps = run_days(&sim, spec, net.as_ref(), &seeds)?;
    let metrics = compute_all(&eps, &sim.config);

    let mut out = outputs(common, "simulate", &sim.config)?;
    out.manifest.seeds = seeds;
    out.manifest.policies = vec![spec.label().to_string()];
    out.write("results.csv", &csv_bytes(|b| write_results_csv(b, &metrics))?)?;
    if records {
        for (i, ep) in eps.iter().enumerate() {
            out.write(&format!("records/day_{i:04}.rec"), ep.to_text().as_bytes())?;
        }
    }
    let dir = out.dir.clone();
    out.finish()?;
    println!(
        "{}: {days} days, mean CR {:.2} -> {}",
        spec.label(),
        mean_cr(&eps, &sim.config),
        dir.display()
    );
    Ok(())
}

fn train(common: &Common, args: &crate::TrainArgs) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let mut hyper = cfg.ppo.clone();
    hyper.seed = common.seed;
    if let Some(e) = args.epochs {
        hyper.epochs = e;
    }
    if let Some(t) = args.trajectories {
        hyper.trajectories_per_epoch = t;
    }
    if hyper.epochs == 0 || hyper.trajectories_per_epoch == 0 {
        bail!(UsageError("--epochs and --trajectories must be at least 1".into()));
    }
    let sim = Simulator::new(cfg);
    let mut out = outputs(common, "train", &sim.config)?;
    out.manifest.policies = vec!["MARL".into()];
    match args.scalar {
        ScalarKind::F32 => train_as::<f32>(&sim, hyper, args.progress, "f32", &mut out)?,
        ScalarKind::F64 => train_as::<f64>(&sim, hyper, args.progress, "f64", &mut out)?,
    }
    let dir = out.dir.clone();
    out.finish()?;
    println!("checkpoint -> {}", dir.join("checkpoint.json").display());
    Ok(())
}

fn train_as<S: Scalar + Serialize>(
    sim: &Simulator,
    hyper: orsched::PpoHyper,
    progress: usize,
    scalar: &str,
    out: &mut Outputs,
) -> anyhow::Result<()> {
    let epochs = hyper.epochs;
    let report = marl::train::<S>(sim, &hyper, |p: &CurvePoint| {
        if progress > 0 && ((p.iter + 1).is_multiple_of(progress) || p.iter + 1 == epochs) {
            let val = p
                .validation_cr
                .map(|v| format!(" validation {v:.2}"))
                .unwrap_or_default();
            eprintln!(
                "iter {:>5}/{epochs} mean CR {:.2} entropy {:.3}{val}",
                p.iter + 1,
                p.mean_cr,
                p.entropy
            );
        }
    })?;
    out.manifest.seeds = marl::validation_seeds(&hyper);
    let ckpt = Checkpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        config_hash: sim.config.hash_hex(),
        scalar: scalar.to_string(),
        iteration: report.best_iter,
        validation_cr: report.best_validation_cr,
        hyper,
        net: report.best,
    };
    out.write("checkpoint.json", serde_json::to_string(&ckpt)?.as_bytes())?;
    out.write("curve.csv", &csv_bytes(|b| marl::write_curve_csv(b, &report.curve))?)?;
    if let Some(v) = report.best_validation_cr {
        println!("best validation CR {v:.2} at iteration {}", report.best_iter + 1);
    }
    Ok(())
}

fn evaluate(common: &Common, checkpoint: Option<&Path>, days: usize) -> anyhow::Result<()> {
    require_days(days)?;
    let cfg = load_config(common)?;
    let net = load_net(checkpoint, &cfg)?;
    let sim = Simulator::new(cfg);
    let seeds = seed_list(common.seed, days);
    let eps = run_days(&sim, PolicySpec::Marl, Some(&net), &seeds)?;
    let metrics = compute_all(&eps, &sim.config);
    let mut out = outputs(common, "evaluate", &sim.config)?;
    out.manifest.seeds = seeds;
    out.manifest.policies = vec!["MARL".into()];
    out.write("results.csv", &csv_bytes(|b| write_results_csv(b, &metrics))?)?;
    let dir = out.dir.clone();
    out.finish()?;
    let tables = vec![("MARL".to_string(), stratify(&metrics))];
    print!("{}", format_table(Stratum::AllDays, &tables));
    println!("-> {}", dir.display());
    Ok(())
}

fn expand_policies(names: &[String]) -> anyhow::Result<Vec<PolicySpec>> {
    let mut specs = Vec::new();
    for name in names.iter().map(|s| s.trim()).filter(|s| !s.is_empty()) {
        let expanded: Vec<PolicySpec> = match name.to_ascii_lowercase().as_str() {
            "heuristics" => HeuristicKind::ALL.iter().map(|&k| PolicySpec::Heuristic(k)).collect(),
            "all" => HeuristicKind::ALL
                .iter()
                .map(|&k| PolicySpec::Heuristic(k))
                .chain(std::iter::once(PolicySpec::Marl))
                .collect(),
            _ => vec![PolicySpec::parse(name)?],
        };
        for s in expanded {
            if !specs.contains(&s) {
                specs.push(s);
            }
        }
    }
    if specs.is_empty() {
        bail!(UsageError("--policy lists no policies".into()));
    }
    Ok(specs)
}

fn compare(common: &Common, names: &[String], checkpoint: Option<&Path>, days: usize) -> anyhow::Result<()> {
    require_days(days)?;
    let cfg = load_config(common)?;
    let specs = expand_policies(names)?;
    let net = if specs.contains(&PolicySpec::Marl) {
        Some(load_net(checkpoint, &cfg)?)
    } else {
        None
    };
    let sim = Simulator::new(cfg);
    let seeds = seed_list(common.seed, days);
    let mut out = outputs(common, "compare", &sim.config)?;
    let mut tables: Vec<(String, Stratified)> = Vec::new();
    for &spec in &specs {
        let eps = run_days(&sim, spec, net.as_ref(), &seeds)?;
        let metrics = compute_all(&eps, &sim.config);
        out.write(
            &format!("results/{}.csv", spec.label()),
            &csv_bytes(|b| write_results_csv(b, &metrics))?,
        )?;
        tables.push((spec.label().to_string(), stratify(&metrics)));
    }
    let scores = score_strata(&tables).context("normalizing scores")?;
    out.write("comparison.csv", &csv_bytes(|b| write_comparison_csv(b, &tables))?)?;
    out.write("scores.csv", &csv_bytes(|b| write_scores_csv(b, &scores))?)?;
    out.manifest.seeds = seeds;
    out.manifest.policies = specs.iter().map(|s| s.label().to_string()).collect();
    let dir = out.dir.clone();
    out.finish()?;
    for s in Stratum::ALL {
        println!("{}", format_table(s, &tables));
    }
    for (s, t) in &scores {
        let avg: Vec<String> = tables
            .iter()
            .filter_map(|(p, _)| t.row(p).map(|(_, a)| format!("{p} {a:.2}")))
            .collect();
        println!("{} average score: {}", s.label(), avg.join(", "));
    }
    println!("-> {}", dir.display());
    Ok(())
}

fn preschedule(common: &Common) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let sim = Simulator::new(cfg);
    let mut out = outputs(common, "preschedule", &sim.config)?;
    out.manifest.policies = vec![HeuristicKind::PreSched.label().to_string()];
    out.write("plan.txt", sim.plan.to_plan_file().as_bytes())?;
    let dir = out.dir.clone();
    out.finish()?;
    let p = &sim.plan;
    println!(
        "{} electives, makespan {}, overage {} slots, load sum of squares {}, {} -> {}",
        p.entries.len(),
        p.makespan,
        p.objective.overage_slots,
        p.objective.load_sq,
        if p.exact { "exact" } else { "heuristic" },
        dir.display()
    );
    Ok(())
}

fn read_episode(path: &Path, cfg: &SimConfig) -> anyhow::Result<EpisodeRecord> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading episode {}", path.display()))?;
    let rec = EpisodeRecord::from_text(&text, cfg.reward.overtime_cost)
        .with_context(|| format!("parsing {}", path.display()))?;
    if rec.num_ors != cfg.num_ors || rec.horizon != cfg.horizon {
        bail!(UsageError(format!(
            "{} has {} rooms and horizon {}, the config has {} and {}; pass the config it was simulated with",
            path.display(),
            rec.num_ors,
            rec.horizon,
            cfg.num_ors,
            cfg.horizon
        )));
    }
    Ok(rec)
}

fn oracle(common: &Common, args: &crate::OracleArgs) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let opts = |seed: u64| SearchOptions {
        iterations: args.budget,
        seed,
        ..SearchOptions::default()
    };
    let mut out = outputs(common, "oracle", &cfg)?;
    let solved: Vec<(OracleInstance, EpisodeRecord, RegretReport, oracle::OracleSolution)> = match &args.episode {
        Some(path) => {
            let rec = read_episode(path, &cfg)?;
            let inst = OracleInstance::from_record(cfg.clone(), &rec);
            let sol = oracle::solve(&inst, &opts(rec.seed));
            let report = RegretReport::new(&inst, "episode", &rec, &sol);
            out.manifest.policies = vec!["episode".into()];
            out.manifest.seeds = vec![rec.seed];
            vec![(inst, rec, report, sol)]
        }
        None => {
            require_days(args.days)?;
            let (spec, net) = policy_with_net(&args.policy, &cfg)?;
            let sim = Simulator::new(cfg.clone());
            let seeds = seed_list(common.seed, args.days);
            out.manifest.policies = vec![spec.label().into()];
            out.manifest.seeds = seeds.clone();
            seeds
                .par_iter()
                .map(|&s| {
                    let roster = sim.roster(s);
                    let rec = run_roster(&sim.config, &roster, spec, net.as_ref())?;
                    let inst = OracleInstance::new(sim.config.clone(), roster);
                    let sol = oracle::solve(&inst, &opts(s));
                    let report = RegretReport::new(&inst, spec.label(), &rec, &sol);
                    Ok((inst, rec, report, sol))
                })
                .collect::<Result<Vec<_>, ProtocolError>>()?
        }
    };
    for (i, (inst, _, _, sol)) in solved.iter().enumerate() {
        out.write(
            &format!("oracle/day_{i:04}.rec"),
            sol.to_record(inst).to_text().as_bytes(),
        )?;
    }
    let reports: Vec<RegretReport> = solved.into_iter().map(|(_, _, r, _)| r).collect();
    out.write("regret.csv", &csv_bytes(|b| oracle::write_regret_csv(b, &reports))?)?;
    let dir = out.dir.clone();
    out.finish()?;
    for r in &reports {
        println!(
            "{} seed {}: policy CR {:.2}, oracle CR {:.2} ({}), gap {:.2}",
            r.policy, r.seed, r.policy_cr, r.oracle_cr, r.status, r.gap
        );
    }
    let exact = reports.iter().filter(|r| r.status == SolverStatus::Exact).count();
    let mean_gap = reports.iter().map(|r| r.gap).sum::<f64>() / reports.len().max(1) as f64;
    println!(
        "{} days, {exact} solved exactly, mean gap {mean_gap:.2} -> {}",
        reports.len(),
        dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct CouplingRow {
    seed: u64,
    epochs: usize,
    in_scope_epochs: usize,
    in_scope_equal: usize,
    max_gamma: f64,
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn serialize_rows<T: Serialize>(rows: &[T]) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| anyhow::anyhow!("{}", e.error()))
}

fn theorycheck(common: &Common, instances: usize, bound_instances: usize) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let summary = run_theory_checks(common.seed, instances, bound_instances);
    let mut out = outputs(common, "theorycheck", &cfg)?;
    out.manifest.policies = vec![HeuristicKind::NeLpt.label().into()];
    let c = &summary.coupling;
    let lines = [
        format!(
            "{} weak coupling: {}/{} in-scope epochs equal over {} instances ({} epochs in total, {} unequal out of scope, max gap {:.3e})",
            pass(c.holds()),
            c.in_scope_equal,
            c.in_scope_epochs,
            c.instances,
            c.epochs,
            c.out_of_scope_unequal,
            c.max_gamma
        ),
        format!(
            "{} wait-term regret bound: {} violations over {} instances ({} skipped for coverage mismatch)",
            pass(summary.wait_violations() == 0),
            summary.wait_violations(),
            summary.bounds.len(),
            summary.coverage_skipped
        ),
        format!(
            "{} linear 2T regret bound: {} violations over {} instances",
            pass(summary.linear_violations() == 0),
            summary.linear_violations(),
            summary.bounds.len()
        ),
        format!(
            "{} bound ordering (regret <= wait bound <= linear bound): {} violations",
            pass(summary.monotone_violations() == 0),
            summary.monotone_violations()
        ),
        format!(
            "{} delayed-urgent gap construction: {} cases",
            pass(summary.corollary_holds()),
            summary.corollary.len()
        ),
    ];
    let text = lines.join("\n") + "\n";
    out.write("summary.txt", text.as_bytes())?;
    out.write("bounds.csv", &serialize_rows(&summary.bounds)?)?;
    out.write("corollary.csv", &serialize_rows(&summary.corollary)?)?;
    let dir = out.dir.clone();
    let rows: Vec<CouplingRow> = summary
        .coupling_reports
        .iter()
        .map(|r| CouplingRow {
            seed: r.seed,
            epochs: r.epochs.len(),
            in_scope_epochs: r.in_scope().count(),
            in_scope_equal: r.in_scope().filter(|e| e.equal).count(),
            max_gamma: r.epochs.iter().map(|e| e.gamma).fold(0.0, f64::max),
        })
        .collect();
    out.write("coupling.csv", &serialize_rows(&rows)?)?;
    out.finish()?;
    print!("{text}");
    println!("-> {}", dir.display());
    Ok(())
}

fn gantt(common: &Common, episode: Option<&Path>, policy: &PolicyArgs) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let mut out = outputs(common, "gantt", &cfg)?;
    let rec = match episode {
        Some(path) => {
            let rec = read_episode(path, &cfg)?;
            out.manifest.policies = vec!["episode".into()];
            rec
        }
        None => {
            let (spec, net) = policy_with_net(policy, &cfg)?;
            let sim = Simulator::new(cfg.clone());
            let rec = run_roster(&sim.config, &sim.roster(common.seed), spec, net.as_ref())?;
            out.manifest.policies = vec![spec.label().into()];
            out.write("episode.rec", rec.to_text().as_bytes())?;
            rec
        }
    };
    out.manifest.seeds = vec![rec.seed];
    let g = export_gantt(&rec, &cfg);
    out.write("gantt.svg", g.svg.as_bytes())?;
    out.write("timeline.txt", g.timeline.as_bytes())?;
    let dir = out.dir.clone();
    out.finish()?;
    println!(
        "{} cases on {} rooms -> {}",
        rec.served_count(),
        rec.num_ors,
        dir.display()
    );
    Ok(())
}
