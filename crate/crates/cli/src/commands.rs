use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use anyhow::{Context, Result};
use lineage_core::analytics::{emit_report, fmt_ms, fmt_x, render_lineage_trace, LatencyTable, ReportInputs, RoundtripCell};
use lineage_core::config::Config;
use lineage_core::cost::BudgetMeter;
use lineage_core::deopt::{induce_lineage, DeoptEnv, DeoptError};
use lineage_core::gate::Gate;
use lineage_core::library::{retrieve, InsertOutcome, Similarity, Target};
use lineage_core::lift::{admit_pending, cluster_by, lift_cluster, members_from_lineages, HoldoutStart, LiftError, TrialEnv};
use lineage_core::materialize::{optimize, Ablation, SessionStatus, SubmissionEvent};
use lineage_core::model::{Document, KernelState};
use lineage_core::registry::ActionRegistry;
use lineage_core::sim::{
    case_spec, expert_state, generate_random_lattice, holdout_case, holdout_pool, lattice_of, run_recovery,
    serve_lifter, serve_rewriter, serve_runner, LatticeSpec, RecoveryConfig, SimLifter, SimRewriter, SimRunner,
};
use lineage_core::store::Store;
use serde_json::json;

use crate::exit::{self, fail};
use crate::{AblationArg, AdmitArgs, Cli, Command, Format, InduceArgs, LiftArgs, OptimizeArgs, ReportArgs, RetrieveArgs, SimArgs};

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_config(cli: &Cli) -> Result<Config> {
    match &cli.config {
        Some(p) => Ok(Config::parse(&read(p)?).with_context(|| p.display().to_string())?),
        None => Ok(Config::default()),
    }
}

pub fn run(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::ServeRunner => serve(|b| serve_runner(&SimRunner::new(), b)),
        Command::ServeRewriter => serve(|b| serve_rewriter(&SimRewriter::new(), b)),
        Command::ServeLifter => serve(|b| serve_lifter(&SimLifter::default(), b)),
        cmd => {
            let cfg = load_config(cli)?;
            let store = Store::open(&cli.store)?;
            match cmd {
                Command::Induce(a) => induce(&store, &cfg, a),
                Command::Lift(a) => lift(&store, &cfg, a),
                Command::Admit(a) => admit(&store, &cfg, a),
                Command::Retrieve(a) => retrieve_cmd(&store, &cfg, a),
                Command::Optimize(a) => optimize_cmd(&store, &cfg, a),
                Command::Report(a) => report(&store, a),
                Command::Sim(a) => sim(&store, &cfg, a),
                Command::ValidateStore => validate_store(&store),
                Command::ServeRunner | Command::ServeRewriter | Command::ServeLifter => unreachable!(),
            }
        }
    }
}

fn serve(handler: impl Fn(&[u8]) -> Vec<u8>) -> Result<u8> {
    let mut input = Vec::new();
    std::io::stdin().read_to_end(&mut input)?;
    let out = handler(&input);
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(&out)?;
    stdout.write_all(b"\n")?;
    Ok(0)
}

fn warn_issues(issues: &[lineage_core::store::LoadIssue]) {
    for i in issues {
        log::warn!("skipped {}: {}", i.path.display(), i.error);
    }
}

fn induce(store: &Store, cfg: &Config, a: &InduceArgs) -> Result<u8> {
    let case = match (&a.lattice, &a.case) {
        (Some(p), _) => {
            let spec: LatticeSpec = serde_json::from_str(&read(p)?).context("lattice file")?;
            spec.check()?;
            let case = case_spec(&spec, &spec.case);
            store.put_case(&case)?;
            case
        }
        (None, Some(id)) => store.case(id)?,
        (None, None) => return Err(fail(exit::VALIDATION, "induce needs --case or --lattice")),
    };
    let lattice = lattice_of(&case).ok();
    let expert = match (&a.expert, &lattice) {
        (Some(p), _) => KernelState::from_json(&read(p)?)?,
        (None, Some(spec)) => expert_state(spec)?,
        (None, None) => return Err(fail(exit::VALIDATION, "--expert is required for non-sim cases")),
    };
    let registry = lattice.as_ref().map_or_else(ActionRegistry::seeded, LatticeSpec::registry);
    let gate = Gate::new(cfg.gate.clone(), cfg.runner(&a.runner)?);
    let rewriter = cfg.rewriter(&a.rewriter)?;
    let env = DeoptEnv {
        gate: &gate,
        rewriter: rewriter.as_ref(),
        case: &case,
        config: &cfg.deopt,
    };
    let run_id = a.run_id.clone().unwrap_or_else(|| format!("induce-{}", case.id));
    let ind = match induce_lineage(&expert, &registry, &env, &run_id) {
        Ok(ind) => ind,
        Err(DeoptError::EmptyLineage { expert_id, risks }) => {
            store.append_risk(&expert_id, &risks)?;
            return Err(fail(
                exit::VALIDATION,
                format!("no simplification of {expert_id} was accepted; {} risk records stored", risks.len()),
            ));
        }
        Err(e) => return Err(e.into()),
    };
    store.put_lineage(&ind.lineage)?;
    store.append_risk(&ind.lineage.expert_id, &ind.risks)?;
    store.append_events(&run_id, &ind.events)?;
    print!("{}", render_lineage_trace(&ind.lineage));
    println!(
        "{} transitions, {} risk records, ${}",
        ind.lineage.transitions.len(),
        ind.risks.len(),
        ind.cost_dollars
    );
    Ok(0)
}

fn lift(store: &Store, cfg: &Config, a: &LiftArgs) -> Result<u8> {
    let (lineages, issues) = store.load_lineages()?;
    warn_issues(&issues);
    let (risks, issues) = store.load_risks()?;
    warn_issues(&issues);
    let members = members_from_lineages(&lineages);
    let mut cases = BTreeMap::new();
    for id in members.iter().map(|m| m.case_id.clone()).collect::<BTreeSet<_>>() {
        if let Ok(c) = store.case(&id) {
            cases.insert(id, c.payload);
        }
    }
    let lifter = cfg.lifter(&a.lifter)?;
    let (mut inserted, mut merged, mut rejected) = (0, 0, 0);
    for cluster in cluster_by(&members, |m| &m.transition) {
        match lift_cluster(&cluster, &risks, &cases, lifter.as_ref()) {
            Ok(card) => match store.put_skill(&card)? {
                InsertOutcome::Inserted => inserted += 1,
                InsertOutcome::Merged => merged += 1,
            },
            Err(LiftError::Rejected(why)) => {
                log::warn!("cluster {} rejected: {why}", cluster[0].transition.action_category);
                rejected += 1;
            }
            Err(e) => return Err(e.into()),
        }
    }
    println!("lifted {} transitions: {inserted} new hypotheses, {merged} merged, {rejected} rejected", members.len());
    Ok(0)
}

fn admit(store: &Store, cfg: &Config, a: &AdmitArgs) -> Result<u8> {
    let (mut library, issues) = store.load_library()?;
    warn_issues(&issues);
    let mut starts = Vec::new();
    for p in &a.holdout {
        let state = KernelState::from_json(&read(p)?)?;
        let case = store.case(&state.case_id)?;
        starts.push(HoldoutStart { state, case });
    }
    if a.sim_holdout {
        for id in store.case_ids()? {
            let case = store.case(&id)?;
            let Ok(spec) = lattice_of(&case) else { continue };
            if id == holdout_case(&spec) {
                continue;
            }
            let hcase = case_spec(&spec, &holdout_case(&spec));
            store.put_case(&hcase)?;
            for state in holdout_pool(&spec)? {
                starts.push(HoldoutStart {
                    state,
                    case: hcase.clone(),
                });
            }
        }
    }
    if starts.is_empty() {
        return Err(fail(exit::VALIDATION, "no held-out starts; pass --holdout or --sim-holdout"));
    }
    // Prefer starts drawn from a skill's own workloads.
    let pick = |skill: &lineage_core::model::SkillCard| -> Vec<HoldoutStart> {
        let own: Vec<HoldoutStart> = starts
            .iter()
            .filter(|s| skill.evidence.iter().any(|e| s.case.id.starts_with(&e.case_id)))
            .cloned()
            .collect();
        if own.is_empty() {
            starts.clone()
        } else {
            own
        }
    };
    let gate = Gate::new(cfg.gate.clone(), cfg.runner(&a.runner)?);
    let rewriter = cfg.rewriter(&a.rewriter)?;
    let env = TrialEnv {
        gate: &gate,
        rewriter: rewriter.as_ref(),
        pricing: cfg.optimize.pricing,
    };
    let mut admission = cfg.admission.clone();
    if let Some(n) = a.max_trials {
        admission.max_trials = n;
    }
    let report = admit_pending(&mut library, &pick, &env, &mut BudgetMeter::unlimited(), &admission)?;
    store.save_library(&library)?;
    print!("{}", report.render_table());
    Ok(0)
}

fn retrieve_cmd(store: &Store, cfg: &Config, a: &RetrieveArgs) -> Result<u8> {
    let lib_store = match &a.library {
        Some(p) => Store::open(p)?,
        None => store.clone(),
    };
    let (library, issues) = lib_store.load_library()?;
    warn_issues(&issues);
    let target = Target {
        case_id: a.case.clone(),
        language: a.language.clone(),
        platform: a.platform.clone(),
        applied_actions: a.applied.iter().filter(|s| !s.is_empty()).cloned().collect(),
    };
    let ranked = retrieve(&library, &target, a.k.unwrap_or(cfg.optimize.k), &Similarity::default());
    match a.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&ranked)?),
        Format::Table => {
            println!("| # | skill | intent | total | case | language | platform | prior | via |");
            println!("|---|---|---|---|---|---|---|---|---|");
            for (i, r) in ranked.iter().enumerate() {
                let via: Vec<String> = r
                    .via
                    .iter()
                    .filter_map(|d| serde_json::to_value(d).ok()?.as_str().map(str::to_owned))
                    .collect();
                println!(
                    "| {} | {} | {} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} | {} |",
                    i + 1,
                    &r.skill_id[..r.skill_id.len().min(12)],
                    r.intent,
                    r.total,
                    r.scores.case,
                    r.scores.language,
                    r.scores.platform,
                    r.scores.prior_actions,
                    via.join(",")
                );
            }
        }
    }
    Ok(0)
}

fn load_root(store: &Store, root: &str) -> Result<KernelState> {
    let p = Path::new(root);
    if p.exists() {
        Ok(KernelState::from_json(&read(p)?)?)
    } else {
        Ok(store.state(root)?)
    }
}

fn optimize_cmd(store: &Store, cfg: &Config, a: &OptimizeArgs) -> Result<u8> {
    let lib_store = match &a.library {
        Some(p) => Store::open(p)?,
        None => store.clone(),
    };
    let (library, issues) = lib_store.load_library()?;
    warn_issues(&issues);
    let case = store.case(&a.case)?;
    let root = load_root(store, &a.root)?;
    let mut ocfg = cfg.optimize.clone();
    if let Some(b) = a.budget {
        ocfg.budget = b;
    }
    if let Some(n) = a.max_submissions {
        ocfg.max_submissions = n;
    }
    if a.reference_latency.is_some() {
        ocfg.reference_latency = a.reference_latency;
    }
    if let Some(AblationArg::GeneratedOnly) = a.ablation {
        ocfg.ablation = Some(Ablation::GeneratedOnly { seed: a.seed });
    }
    let gate = Gate::new(cfg.gate.clone(), cfg.runner(&a.runner)?);
    let rewriter = cfg.rewriter(&a.rewriter)?;
    let session = optimize(&case, root, &library, rewriter.as_ref(), &gate, &Similarity::default(), &ocfg)?;
    let mode = if ocfg.ablation.is_some() { "generated-only" } else { "guided" };
    let id = a.session_id.clone().unwrap_or_else(|| format!("{}-{mode}", case.id));
    store.put_session(&id, &session.trajectory)?;
    store.put_state(&session.best_state)?;
    println!("{}", session_summary(&id, &session.trajectory, &session));
    if session.status == SessionStatus::BudgetExhausted {
        return Ok(exit::BUDGET);
    }
    Ok(0)
}

fn session_summary(id: &str, events: &[SubmissionEvent], s: &lineage_core::materialize::SessionState) -> String {
    let best = s.running_best.map(fmt_ms).unwrap_or_else(|| "FAIL".into());
    let speedup = s
        .reference_latency
        .zip(s.running_best)
        .map(|(r, b)| fmt_x(r / b))
        .unwrap_or_else(|| "FAIL".into());
    format!(
        "session {id}: {} submissions, status {:?}, best {best} ms ({speedup}), best state {}, ${}",
        events.len(),
        s.status,
        s.best_state.id,
        s.cumulative_dollars()
    )
}

fn report(store: &Store, a: &ReportArgs) -> Result<u8> {
    let table: Option<LatencyTable> = match &a.table {
        Some(p) => Some(serde_json::from_str(&read(p)?).context("latency table")?),
        None => None,
    };
    let roundtrip: Vec<RoundtripCell> = match &a.roundtrip {
        Some(p) => serde_json::from_str(&read(p)?).context("roundtrip tallies")?,
        None => Vec::new(),
    };
    let (lineages, issues) = store.load_lineages()?;
    warn_issues(&issues);
    let mut sessions = BTreeMap::new();
    for id in store.session_ids()? {
        match store.read_jsonl::<SubmissionEvent>(&store.path("sessions", &id, "jsonl")) {
            Ok(events) => {
                sessions.insert(id, events);
            }
            Err(e) => log::warn!("session {id} skipped: {e}"),
        }
    }
    let inputs = ReportInputs {
        table,
        roundtrip,
        lineages,
        sessions,
    };
    let r = emit_report(&inputs);
    for w in &r.warnings {
        log::warn!("{w}");
    }
    let out = a.out.clone().unwrap_or_else(|| store.root().join("report"));
    fs::create_dir_all(out.join("curves"))?;
    fs::write(out.join("report.md"), &r.markdown)?;
    for (name, csv) in &r.curves {
        fs::write(out.join("curves").join(name), csv)?;
    }
    println!("{}", out.join("report.md").display());
    Ok(0)
}

fn sim(store: &Store, cfg: &Config, a: &SimArgs) -> Result<u8> {
    let specs: Vec<LatticeSpec> = match &a.lattice {
        Some(p) => {
            let spec: LatticeSpec = serde_json::from_str(&read(p)?).context("lattice file")?;
            vec![spec]
        }
        None => (a.seed..a.seed + a.lattices)
            .map(|seed| {
                let mut spec = generate_random_lattice(seed, a.actions, a.depth)?;
                spec.case = format!("sim-lattice-{seed}");
                Ok(spec)
            })
            .collect::<Result<_, lineage_core::sim::SimError>>()?,
    };
    let mut rcfg = RecoveryConfig {
        deopt: cfg.deopt.clone(),
        admission: cfg.admission.clone(),
        ..RecoveryConfig::default()
    };
    rcfg.optimize.pricing = cfg.optimize.pricing;
    if let Some(n) = a.max_submissions {
        rcfg.optimize.max_submissions = n;
    }
    if let Some(b) = a.budget {
        rcfg.optimize.budget = b;
    }
    let mut rows = Vec::new();
    let (mut guided, mut ablated) = (0, 0);
    for (i, spec) in specs.iter().enumerate() {
        rcfg.ablation_seed = a.seed + i as u64;
        let out = run_recovery(spec, &rcfg)?;
        guided += out.guided_pass as usize;
        ablated += out.ablation_pass as usize;
        if a.save {
            save_recovery(store, spec, &out)?;
        }
        rows.push(json!({
            "case": spec.case,
            "transitions": out.induction.lineage.transitions.len(),
            "admitted": out.library.retrievable().count(),
            "skills": out.library.len(),
            "optimal_ms": out.optimal_latency,
            "guided_best_ms": out.guided.running_best,
            "guided_submissions": out.guided.trajectory.len(),
            "guided_dollars": out.guided.cumulative_dollars(),
            "guided_pass": out.guided_pass,
            "ablation_best_ms": out.ablation.running_best,
            "ablation_submissions": out.ablation.trajectory.len(),
            "ablation_pass": out.ablation_pass,
        }));
    }
    match a.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&rows)?),
        Format::Table => {
            println!("| case | transitions | admitted | optimum ms | guided ms | guided | generated-only ms | generated-only |");
            println!("|---|---|---|---|---|---|---|---|");
            let ms = |v: &serde_json::Value| v.as_f64().map(fmt_ms).unwrap_or_else(|| "FAIL".into());
            let pass = |v: &serde_json::Value| if v.as_bool() == Some(true) { "pass" } else { "fail" };
            for r in &rows {
                println!(
                    "| {} | {} | {}/{} | {} | {} | {} | {} | {} |",
                    r["case"].as_str().unwrap_or_default(),
                    r["transitions"],
                    r["admitted"],
                    r["skills"],
                    ms(&r["optimal_ms"]),
                    ms(&r["guided_best_ms"]),
                    pass(&r["guided_pass"]),
                    ms(&r["ablation_best_ms"]),
                    pass(&r["ablation_pass"]),
                );
            }
            println!(
                "\nreached >=90% of optimum: guided {guided}/{n}, generated-only {ablated}/{n}",
                n = specs.len()
            );
        }
    }
    Ok(0)
}

fn save_recovery(store: &Store, spec: &LatticeSpec, out: &lineage_core::sim::RecoveryOutcome) -> Result<()> {
    store.put_case(&case_spec(spec, &spec.case))?;
    store.put_case(&case_spec(spec, &holdout_case(spec)))?;
    let l = &out.induction.lineage;
    store.put_lineage(l)?;
    store.append_risk(&l.expert_id, &out.induction.risks)?;
    store.append_events(&format!("induce-{}", spec.case), &out.induction.events)?;
    for card in out.library.iter() {
        store.put_skill(card)?;
    }
    store.put_session(&format!("{}-guided", spec.case), &out.guided.trajectory)?;
    store.put_session(&format!("{}-generated-only", spec.case), &out.ablation.trajectory)?;
    Ok(())
}

fn validate_store(store: &Store) -> Result<u8> {
    let issues = store.audit()?;
    if issues.is_empty() {
        println!("store {} ok", store.root().display());
        return Ok(0);
    }
    for i in &issues {
        println!("{}: {}", i.path.display(), i.error);
    }
    println!("{} issue(s)", issues.len());
    Ok(exit::VALIDATION)
}
