//! Command-line front end for the mpst toolkit.
//!
//! Exit codes: 0 when the property holds / the operation succeeds, 1 when a
//! check is refuted (a witness is printed), 2 on usage or parse errors.
//! Machine-readable output is selected with `--format json` (or `dot` for
//! state graphs); errors are emitted as JSON objects on stderr. The
//! environment variable MPST_LIMIT overrides the default exploration limit.
//!
//! JSON schema of `props` / `verify` verdicts:
//! ```text
//! { "property": "safe" | "deadlock_free" | "live",
//!   "holds": bool,
//!   "witness": null | {
//!       "trace": ["s:p->q:l", ...],       // transmissions from the input
//!       "pending": "s:p!q:l(S)" | null,   // starving half-action
//!       "cycle": [{"from": N, "label": "s:p->q:l", "to": M}, ...],
//!       "detail": "..." } }
//! ```

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use mpst::analysis::{
    check_all_by_association, check_association, check_completeness_correspondence,
    check_deadlock_free, check_live, check_safety, check_soundness_correspondence,
    AssociationReport, CorrespondenceViolation, PropertyVerdict, Witness, DEFAULT_LIMIT,
};
use mpst::harness::{session_fidelity_harness, subject_reduction_harness, SrOutcome};
use mpst::ident::{Role, Session};
use mpst::lts::{global_steps, reachable_contexts};
use mpst::picalc::{run as run_process, RunOutcome};
use mpst::projection::{project, project_all};
use mpst::subtyping::subtype_local;
use mpst::surface::{self, parse, SourceFile};
use mpst::typing::{typecheck, ProcVarEnv};
use mpst::types::{GlobalType, TypingContext};

#[derive(Parser)]
#[command(
    name = "mpst",
    about = "Multiparty session types: projection, subtyping, model checking, and process typing",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Format {
    Text,
    Json,
    Dot,
}

#[derive(Args)]
struct FileArg {
    /// Path to a .mpst source file
    file: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a file and report well-formedness diagnostics
    Check {
        #[command(flatten)]
        file: FileArg,
    },
    /// Project a global type onto one role or all roles
    Project {
        #[command(flatten)]
        file: FileArg,
        /// Name of a declared global type
        #[arg(long)]
        global: String,
        /// Project onto this role only
        #[arg(long)]
        role: Option<String>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Decide the subtyping relation between two local types
    Subtype {
        #[command(flatten)]
        file: FileArg,
        /// Left type: a declared name or inline syntax
        #[arg(long)]
        left: String,
        /// Right type: a declared name or inline syntax
        #[arg(long)]
        right: String,
    },
    /// Enumerate LTS steps of a global type or the state graph of a context
    Simulate {
        #[command(flatten)]
        file: FileArg,
        #[arg(long, conflicts_with = "context")]
        global: Option<String>,
        /// Exploration depth for global types
        #[arg(long, default_value_t = 3)]
        steps: usize,
        #[arg(long)]
        context: Option<String>,
        #[arg(long, default_value = "s")]
        session: String,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Check association of a context with a global type
    Assoc {
        #[command(flatten)]
        file: FileArg,
        #[arg(long)]
        global: String,
        #[arg(long)]
        context: String,
        #[arg(long, default_value = "s")]
        session: String,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Check safety, deadlock-freedom, and liveness of a context
    Props {
        #[command(flatten)]
        file: FileArg,
        #[arg(long)]
        context: String,
        #[arg(long, default_value = "s")]
        session: String,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Project a global type and verify association plus all properties
    Verify {
        #[command(flatten)]
        file: FileArg,
        #[arg(long)]
        global: String,
        #[arg(long, default_value = "s")]
        session: String,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Type-check a process
    Typecheck {
        #[command(flatten)]
        file: FileArg,
        #[arg(long)]
        process: String,
        /// Optional declared context to type under (default empty)
        #[arg(long)]
        context: Option<String>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Execute a process under a seeded scheduler
    Run {
        #[command(flatten)]
        file: FileArg,
        #[arg(long)]
        process: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        budget: usize,
    },
    /// Theorem harnesses
    #[command(subcommand)]
    Harness(HarnessCommand),
}

#[derive(Args)]
struct CorrespondenceArgs {
    #[command(flatten)]
    file: FileArg,
    #[arg(long)]
    global: String,
    #[arg(long)]
    context: String,
    #[arg(long, default_value = "s")]
    session: String,
    #[arg(long, default_value_t = 6)]
    depth: usize,
}

#[derive(Subcommand)]
enum HarnessCommand {
    /// Soundness of association on all co-reachable pairs
    Soundness(CorrespondenceArgs),
    /// Completeness of association on all co-reachable pairs
    Completeness(CorrespondenceArgs),
    /// Session fidelity of a process against an associated context
    Fidelity {
        #[command(flatten)]
        file: FileArg,
        #[arg(long)]
        global: String,
        #[arg(long)]
        context: String,
        #[arg(long)]
        process: String,
        #[arg(long, default_value = "s")]
        session: String,
        #[arg(long, default_value_t = 64)]
        rounds: usize,
    },
    /// Subject reduction along random executions
    SubjectReduction {
        #[command(flatten)]
        file: FileArg,
        #[arg(long)]
        process: String,
        #[arg(long)]
        context: String,
        /// Session-to-global bindings, e.g. --bind s=G_auth (repeatable)
        #[arg(long = "bind")]
        binds: Vec<String>,
        #[arg(long, default_value_t = 6)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        horizon: usize,
    },
}

fn fail_usage(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("{}", json!({ "error": msg.to_string() }));
    ExitCode::from(2)
}

fn load(path: &PathBuf) -> Result<SourceFile, ExitCode> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| fail_usage(format!("cannot read {}: {e}", path.display())))?;
    parse(&text).map_err(fail_usage)
}

fn env_limit(flag: Option<usize>) -> usize {
    flag.or_else(|| {
        std::env::var("MPST_LIMIT")
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .unwrap_or(DEFAULT_LIMIT)
}

fn lookup_global(file: &SourceFile, name: &str) -> Result<GlobalType, ExitCode> {
    file.global(name)
        .cloned()
        .ok_or_else(|| fail_usage(format!("no global type named `{name}`")))
}

fn lookup_context(file: &SourceFile, name: &str) -> Result<TypingContext, ExitCode> {
    file.context(name)
        .cloned()
        .ok_or_else(|| fail_usage(format!("no context named `{name}`")))
}

fn lookup_process(file: &SourceFile, name: &str) -> Result<mpst::picalc::Process, ExitCode> {
    file.process(name)
        .cloned()
        .ok_or_else(|| fail_usage(format!("no process named `{name}`")))
}

fn witness_json(w: &Witness) -> Value {
    json!({
        "trace": w.trace.iter().map(|l| l.to_string()).collect::<Vec<_>>(),
        "pending": w.pending.as_ref().map(|l| l.to_string()),
        "cycle": w.cycle.iter().map(|e| json!({
            "from": e.from,
            "label": e.label.to_string(),
            "to": e.to,
        })).collect::<Vec<_>>(),
        "detail": w.detail,
    })
}

fn verdict_json(v: &PropertyVerdict) -> Value {
    json!({
        "property": v.property.name(),
        "holds": v.holds,
        "witness": v.witness.as_ref().map(witness_json),
    })
}

fn verdict_text(v: &PropertyVerdict) -> String {
    let mut out = format!("{}: {}", v.property.name(), v.holds);
    if let Some(w) = &v.witness {
        out.push_str(&format!("\n  detail: {}", w.detail));
        if !w.trace.is_empty() {
            let trace: Vec<String> = w.trace.iter().map(|l| l.to_string()).collect();
            out.push_str(&format!("\n  trace: {}", trace.join(" ")));
        }
        if let Some(p) = &w.pending {
            out.push_str(&format!("\n  pending: {p}"));
        }
        if !w.cycle.is_empty() {
            let cycle: Vec<String> = w
                .cycle
                .iter()
                .map(|e| format!("{} --{}--> {}", e.from, e.label, e.to))
                .collect();
            out.push_str(&format!("\n  cycle: {}", cycle.join(" ")));
        }
    }
    out
}

fn association_json(report: &AssociationReport) -> Value {
    json!({
        "holds": report.holds,
        "failure": report.failure,
        "roles": report.role_results.iter().map(|r| json!({
            "role": r.role.to_string(),
            "projection": match &r.projection {
                Ok(t) => json!(surface::print_local(t)),
                Err(e) => json!({ "undefined": e.to_string() }),
            },
            "entry": r.entry.as_ref().map(surface::print_sort),
            "subtype_ok": r.subtype_ok,
        })).collect::<Vec<_>>(),
        "end_part": report.end_part.iter()
            .map(|(s, r)| format!("{s}[{r}]"))
            .collect::<Vec<_>>(),
    })
}

fn ok_or_refuted(holds: bool) -> ExitCode {
    if holds {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(code) => code,
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, ExitCode> {
    match cli.command {
        Command::Check { file } => {
            let parsed = load(&file.file)?;
            if parsed.diagnostics.is_empty() {
                println!("ok: {} declarations", parsed.decls.len());
                Ok(ExitCode::SUCCESS)
            } else {
                for d in &parsed.diagnostics {
                    println!("{d}");
                }
                Ok(ExitCode::from(1))
            }
        }
        Command::Project {
            file,
            global,
            role,
            format,
        } => {
            let parsed = load(&file.file)?;
            let g = lookup_global(&parsed, &global)?;
            match role {
                Some(role) => match project(&g, &Role::new(&role)) {
                    Ok(t) => {
                        if format == Format::Json {
                            println!("{}", json!({ "role": role, "local": surface::print_local(&t) }));
                        } else {
                            println!("{}", surface::print_local(&t));
                        }
                        Ok(ExitCode::SUCCESS)
                    }
                    Err(e) => {
                        println!("{e}");
                        Ok(ExitCode::from(1))
                    }
                },
                None => {
                    let table = project_all(&g);
                    let mut failed = false;
                    let mut entries = Vec::new();
                    for (role, result) in &table.results {
                        match result {
                            Ok(t) => entries.push(json!({
                                "role": role.to_string(),
                                "local": surface::print_local(t),
                            })),
                            Err(e) => {
                                failed = true;
                                entries.push(json!({
                                    "role": role.to_string(),
                                    "undefined": e.to_string(),
                                }));
                            }
                        }
                    }
                    if format == Format::Json {
                        println!("{}", json!({ "global": global, "projections": entries }));
                    } else {
                        for (role, result) in &table.results {
                            match result {
                                Ok(t) => println!("{role}: {}", surface::print_local(t)),
                                Err(e) => println!("{role}: undefined ({e})"),
                            }
                        }
                    }
                    Ok(ok_or_refuted(!failed))
                }
            }
        }
        Command::Subtype { file, left, right } => {
            let parsed = load(&file.file)?;
            let resolve = |text: &str| -> Result<mpst::types::LocalType, ExitCode> {
                if let Some(t) = parsed.local(text) {
                    return Ok(t.clone());
                }
                surface::parse_local_in_scope(&parsed, text).map_err(fail_usage)
            };
            let l = resolve(&left)?;
            let r = resolve(&right)?;
            let holds = subtype_local(&l, &r);
            println!("{holds}");
            Ok(ok_or_refuted(holds))
        }
        Command::Simulate {
            file,
            global,
            steps,
            context,
            session,
            limit,
            format,
        } => {
            let parsed = load(&file.file)?;
            let session = Session::new(&session);
            match (global, context) {
                (Some(name), None) => {
                    let g = lookup_global(&parsed, &name)?;
                    simulate_global(&g, &session, steps, format);
                    Ok(ExitCode::SUCCESS)
                }
                (None, Some(name)) => {
                    let ctx = lookup_context(&parsed, &name)?;
                    let graph = reachable_contexts(&ctx, &session, env_limit(limit))
                        .map_err(fail_usage)?;
                    match format {
                        Format::Dot => print!("{}", graph.to_dot()),
                        Format::Json => {
                            let nodes: Vec<String> =
                                graph.nodes.iter().map(surface::print_context).collect();
                            let edges: Vec<Value> = graph
                                .edges
                                .iter()
                                .map(|e| {
                                    json!({
                                        "from": e.from,
                                        "label": e.label.to_string(),
                                        "to": e.to,
                                    })
                                })
                                .collect();
                            println!("{}", json!({ "nodes": nodes, "edges": edges }));
                        }
                        Format::Text => {
                            for (i, node) in graph.nodes.iter().enumerate() {
                                println!("state {i}: {}", surface::print_context(node));
                            }
                            for e in &graph.edges {
                                println!("  {} --{}--> {}", e.from, e.label, e.to);
                            }
                        }
                    }
                    Ok(ExitCode::SUCCESS)
                }
                _ => Err(fail_usage("simulate needs exactly one of --global or --context")),
            }
        }
        Command::Assoc {
            file,
            global,
            context,
            session,
            format,
        } => {
            let parsed = load(&file.file)?;
            let g = lookup_global(&parsed, &global)?;
            let ctx = lookup_context(&parsed, &context)?;
            let report = check_association(&g, &ctx, &Session::new(&session));
            if format == Format::Json {
                println!("{}", association_json(&report));
            } else {
                println!("association holds: {}", report.holds);
                for r in &report.role_results {
                    let proj = match &r.projection {
                        Ok(t) => surface::print_local(t),
                        Err(e) => format!("undefined ({e})"),
                    };
                    println!(
                        "  {}: projection {} | entry {} | ok: {}",
                        r.role,
                        proj,
                        r.entry
                            .as_ref()
                            .map(surface::print_sort)
                            .unwrap_or_else(|| "missing".into()),
                        r.subtype_ok
                    );
                }
                if let Some(f) = &report.failure {
                    println!("  failure: {f}");
                }
            }
            Ok(ok_or_refuted(report.holds))
        }
        Command::Props {
            file,
            context,
            session,
            limit,
            format,
        } => {
            let parsed = load(&file.file)?;
            let ctx = lookup_context(&parsed, &context)?;
            let s = Session::new(&session);
            let limit = env_limit(limit);
            let safety = check_safety(&ctx, &s, limit).map_err(fail_usage)?;
            let df = check_deadlock_free(&ctx, &s, limit).map_err(fail_usage)?;
            let live = check_live(&ctx, &s, limit).map_err(fail_usage)?;
            let all = safety.holds && df.holds && live.holds;
            if format == Format::Json {
                println!(
                    "{}",
                    json!({
                        "context": context,
                        "session": session,
                        "verdicts": [verdict_json(&safety), verdict_json(&df), verdict_json(&live)],
                    })
                );
            } else {
                println!("{}", verdict_text(&safety));
                println!("{}", verdict_text(&df));
                println!("{}", verdict_text(&live));
            }
            Ok(ok_or_refuted(all))
        }
        Command::Verify {
            file,
            global,
            session,
            limit,
            format,
        } => {
            let parsed = load(&file.file)?;
            let g = lookup_global(&parsed, &global)?;
            let report = check_all_by_association(&g, &Session::new(&session), env_limit(limit))
                .map_err(fail_usage)?;
            if format == Format::Json {
                println!(
                    "{}",
                    json!({
                        "global": global,
                        "context": surface::print_context(&report.context),
                        "association": association_json(&report.association),
                        "verdicts": [
                            verdict_json(&report.safety),
                            verdict_json(&report.deadlock_freedom),
                            verdict_json(&report.liveness),
                        ],
                    })
                );
            } else {
                println!("context: {}", surface::print_context(&report.context));
                println!("association holds: {}", report.association.holds);
                println!("{}", verdict_text(&report.safety));
                println!("{}", verdict_text(&report.deadlock_freedom));
                println!("{}", verdict_text(&report.liveness));
            }
            Ok(ok_or_refuted(report.all_hold()))
        }
        Command::Typecheck {
            file,
            process,
            context,
            format,
        } => {
            let parsed = load(&file.file)?;
            let p = lookup_process(&parsed, &process)?;
            let ctx = match context {
                Some(name) => lookup_context(&parsed, &name)?,
                None => TypingContext::new(),
            };
            match typecheck(&ProcVarEnv::new(), &ctx, &p) {
                Ok(deriv) => {
                    if format == Format::Json {
                        println!(
                            "{}",
                            json!({ "process": process, "well_typed": true, "derivation": deriv.render() })
                        );
                    } else {
                        print!("{}", deriv.render());
                    }
                    Ok(ExitCode::SUCCESS)
                }
                Err(e) => {
                    if format == Format::Json {
                        println!(
                            "{}",
                            json!({
                                "process": process,
                                "well_typed": false,
                                "error": { "rule": e.rule, "position": e.position, "reason": e.reason.to_string() },
                            })
                        );
                    } else {
                        println!("{e}");
                    }
                    Ok(ExitCode::from(1))
                }
            }
        }
        Command::Run {
            file,
            process,
            seed,
            budget,
        } => {
            let parsed = load(&file.file)?;
            let p = lookup_process(&parsed, &process)?;
            let trace = run_process(&p, budget, seed);
            for step in &trace.steps {
                println!("{:>3} [{}] {} |> {}", step.index, step.rule, step.label, step.state);
            }
            println!("outcome: {:?}", trace.outcome);
            Ok(ok_or_refuted(!matches!(
                trace.outcome,
                RunOutcome::ErrorReached | RunOutcome::Fault(_)
            )))
        }
        Command::Harness(h) => harness(h),
    }
}

fn simulate_global(g: &GlobalType, session: &Session, depth: usize, format: Format) {
    let mut frontier = vec![(g.clone(), Vec::<String>::new())];
    let mut rows = Vec::new();
    for _ in 0..depth {
        let mut next = Vec::new();
        for (cur, path) in &frontier {
            match global_steps(cur, session) {
                Ok(steps) => {
                    for step in steps {
                        let mut path = path.clone();
                        path.push(step.label.to_string());
                        rows.push(json!({
                            "path": path,
                            "target": surface::print_global(&step.target),
                        }));
                        next.push((step.target, path));
                    }
                }
                Err(e) => rows.push(json!({ "path": path, "error": e.to_string() })),
            }
        }
        frontier = next;
        if frontier.is_empty() {
            break;
        }
    }
    if format == Format::Json {
        println!("{}", json!({ "steps": rows }));
    } else {
        for row in &rows {
            let path: Vec<&str> = row["path"]
                .as_array()
                .map(|a| a.iter().filter_map(|v| v.as_str()).collect())
                .unwrap_or_default();
            println!("{} => {}", path.join(" "), row["target"].as_str().unwrap_or("?"));
        }
    }
}

fn print_correspondence(violations: &[CorrespondenceViolation], depth: usize) -> ExitCode {
    if violations.is_empty() {
        println!("0 violations to depth {depth}");
        ExitCode::SUCCESS
    } else {
        for v in violations {
            println!("{}", v.detail);
        }
        ExitCode::from(1)
    }
}

fn harness(h: HarnessCommand) -> Result<ExitCode, ExitCode> {
    match h {
        HarnessCommand::Soundness(args) => {
            let parsed = load(&args.file.file)?;
            let g = lookup_global(&parsed, &args.global)?;
            let ctx = lookup_context(&parsed, &args.context)?;
            let violations =
                check_soundness_correspondence(&g, &ctx, &Session::new(&args.session), args.depth);
            Ok(print_correspondence(&violations, args.depth))
        }
        HarnessCommand::Completeness(args) => {
            let parsed = load(&args.file.file)?;
            let g = lookup_global(&parsed, &args.global)?;
            let ctx = lookup_context(&parsed, &args.context)?;
            let violations = check_completeness_correspondence(
                &g,
                &ctx,
                &Session::new(&args.session),
                args.depth,
            );
            Ok(print_correspondence(&violations, args.depth))
        }
        HarnessCommand::Fidelity {
            file,
            global,
            context,
            process,
            session,
            rounds,
        } => {
            let parsed = load(&file.file)?;
            let g = lookup_global(&parsed, &global)?;
            let ctx = lookup_context(&parsed, &context)?;
            let p = lookup_process(&parsed, &process)?;
            let report = session_fidelity_harness(&g, &ctx, &p, &Session::new(&session), rounds);
            if let Some(premise) = &report.premise_failure {
                println!("premise violation: {premise}");
                return Ok(ExitCode::from(1));
            }
            for round in &report.rounds {
                println!("{} |> {}", round.label, round.process);
            }
            match &report.failure {
                None => {
                    println!(
                        "fidelity holds over {} rounds (completed: {})",
                        report.rounds.len(),
                        report.completed
                    );
                    Ok(ExitCode::SUCCESS)
                }
                Some(f) => {
                    println!("fidelity failure: {f}");
                    Ok(ExitCode::from(1))
                }
            }
        }
        HarnessCommand::SubjectReduction {
            file,
            process,
            context,
            binds,
            steps,
            seed,
            horizon,
        } => {
            let parsed = load(&file.file)?;
            let p = lookup_process(&parsed, &process)?;
            let ctx = lookup_context(&parsed, &context)?;
            let mut globals = BTreeMap::new();
            for bind in &binds {
                let Some((sname, gname)) = bind.split_once('=') else {
                    return Err(fail_usage(format!("malformed --bind `{bind}`, expected s=G")));
                };
                let g = lookup_global(&parsed, gname)?;
                globals.insert(Session::new(sname), g);
            }
            let report = subject_reduction_harness(
                &ProcVarEnv::new(),
                &ctx,
                &globals,
                &p,
                steps,
                seed,
                horizon,
            );
            if let Some(premise) = &report.premise_failure {
                println!("premise violation: {premise}");
                return Ok(ExitCode::from(1));
            }
            for step in &report.steps {
                let outcome = match &step.outcome {
                    SrOutcome::Ok(trace) => {
                        let t: Vec<String> = trace.iter().map(|l| l.to_string()).collect();
                        format!("ok via [{}]", t.join(" "))
                    }
                    other => format!("{other:?}"),
                };
                println!("{} |> {}", outcome, step.process);
            }
            Ok(ok_or_refuted(report.failures() == 0))
        }
    }
}
