//! Executable harnesses for the metatheory: subject reduction, session
//! fidelity, and runtime deadlock-freedom / liveness of typed processes.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::check_association;
use crate::ident::{Role, Session};
use crate::lts::{context_transmissions, global_steps};
use crate::picalc::{
    canonical_print, denormalize, has_error, normalize, reduce_steps, steps, NormalForm, Process,
};
use crate::surface;
use crate::typing::{only_plays, typecheck, used_keys, ProcVarEnv};
use crate::types::{ContextKey, GlobalType, Sort, TransitionLabel, TypingContext};

/// How a searched-for typing context was (or was not) found after one
/// process reduction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SrOutcome {
    /// A context reached by these transmissions types the reductum, with
    /// per-session association preserved.
    Ok(Vec<TransitionLabel>),
    /// Every context within the horizon was exhausted; the theorem is
    /// refuted for this step.
    Refuted,
    /// The bounded search ran out of horizon before exhausting candidates.
    NotFound,
    /// The reductum has an error, contradicting type safety.
    ErrorReached,
}

#[derive(Debug, Clone)]
pub struct SrStep {
    pub process: String,
    pub outcome: SrOutcome,
}

#[derive(Debug, Clone)]
pub struct SubjectReductionReport {
    pub premise_failure: Option<String>,
    pub steps: Vec<SrStep>,
}

impl SubjectReductionReport {
    pub fn failures(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| !matches!(s.outcome, SrOutcome::Ok(_)))
            .count()
            + usize::from(self.premise_failure.is_some())
    }
}

/// Drives `steps` random reductions of a well-typed process, searching for
/// a context reduction (bounded by `horizon` transmissions) that types each
/// reductum and keeps every session associated with its global type.
pub fn subject_reduction_harness(
    theta: &ProcVarEnv,
    ctx: &TypingContext,
    globals: &BTreeMap<Session, GlobalType>,
    p: &Process,
    steps_budget: usize,
    seed: u64,
    horizon: usize,
) -> SubjectReductionReport {
    let mut report = SubjectReductionReport {
        premise_failure: None,
        steps: Vec::new(),
    };
    if let Err(e) = typecheck(theta, ctx, p) {
        report.premise_failure = Some(format!("initial process is ill-typed: {e}"));
        return report;
    }
    for session in ctx.sessions() {
        match globals.get(&session) {
            Some(g) => {
                if !check_association(g, &ctx.restrict(&session), &session).holds {
                    report.premise_failure =
                        Some(format!("session {session} is not associated with its global type"));
                    return report;
                }
            }
            None => {
                report.premise_failure =
                    Some(format!("no global type supplied for session {session}"));
                return report;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cur_p = p.clone();
    let mut cur_ctx = ctx.clone();
    let mut cur_globals = globals.clone();
    for _ in 0..steps_budget {
        let successors = reduce_steps(&cur_p);
        if successors.is_empty() {
            break;
        }
        let next = successors[rng.gen_range(0..successors.len())].clone();
        if has_error(&next) {
            report.steps.push(SrStep {
                process: surface::print_process(&next),
                outcome: SrOutcome::ErrorReached,
            });
            return report;
        }
        match find_typing_context(theta, &cur_ctx, &cur_globals, &next, horizon) {
            Search::Found {
                trace,
                ctx,
                globals,
            } => {
                report.steps.push(SrStep {
                    process: surface::print_process(&next),
                    outcome: SrOutcome::Ok(trace),
                });
                cur_p = next;
                cur_ctx = ctx;
                cur_globals = globals;
            }
            Search::Exhausted => {
                report.steps.push(SrStep {
                    process: surface::print_process(&next),
                    outcome: SrOutcome::Refuted,
                });
                return report;
            }
            Search::HorizonCut => {
                report.steps.push(SrStep {
                    process: surface::print_process(&next),
                    outcome: SrOutcome::NotFound,
                });
                return report;
            }
        }
    }
    report
}

enum Search {
    Found {
        trace: Vec<TransitionLabel>,
        ctx: TypingContext,
        globals: BTreeMap<Session, GlobalType>,
    },
    Exhausted,
    HorizonCut,
}

/// BFS over context transmissions (any session), co-stepping each session's
/// global type, until a context types the process.
fn find_typing_context(
    theta: &ProcVarEnv,
    ctx: &TypingContext,
    globals: &BTreeMap<Session, GlobalType>,
    p: &Process,
    horizon: usize,
) -> Search {
    let mut seen = BTreeSet::new();
    let mut frontier = VecDeque::new();
    frontier.push_back((ctx.clone(), globals.clone(), Vec::new()));
    let mut cut = false;
    while let Some((cand_ctx, cand_globals, trace)) = frontier.pop_front() {
        if !seen.insert(cand_ctx.canonical_key()) {
            continue;
        }
        if typecheck(theta, &cand_ctx, p).is_ok() {
            return Search::Found {
                trace,
                ctx: cand_ctx,
                globals: cand_globals,
            };
        }
        if trace.len() >= horizon {
            cut = true;
            continue;
        }
        for session in cand_ctx.sessions() {
            for step in context_transmissions(&cand_ctx, &session) {
                // the session's global type must mirror the step, keeping
                // the association invariant of the theorem
                let Some(g) = cand_globals.get(&session) else {
                    continue;
                };
                let Ok(gsteps) = global_steps(g, &session) else {
                    continue;
                };
                let Some(gs) = gsteps.iter().find(|gs| gs.label == step.label) else {
                    continue;
                };
                if !check_association(&gs.target, &step.target.restrict(&session), &session).holds
                {
                    continue;
                }
                let mut next_globals = cand_globals.clone();
                next_globals.insert(session.clone(), gs.target.clone());
                let mut next_trace = trace.clone();
                next_trace.push(step.label.clone());
                frontier.push_back((step.target, next_globals, next_trace));
            }
        }
    }
    if cut {
        Search::HorizonCut
    } else {
        Search::Exhausted
    }
}

// ---------------------------------------------------------------------------
// Session fidelity
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FidelityRound {
    pub label: TransitionLabel,
    pub process: String,
}

#[derive(Debug, Clone)]
pub struct FidelityReport {
    pub premise_failure: Option<String>,
    pub rounds: Vec<FidelityRound>,
    /// No transmission remained when the harness stopped.
    pub completed: bool,
    pub failure: Option<String>,
}

impl FidelityReport {
    pub fn ok(&self) -> bool {
        self.premise_failure.is_none() && self.failure.is_none()
    }
}

/// Splits a process into parallel components up to structural congruence,
/// pushing each hoisted definition back into the unique thread that calls
/// it. Fails when a definition is shared between threads or a restriction
/// sits at the top.
fn decompose_components(p: &Process) -> Result<Vec<Process>, String> {
    let nf = normalize(p);
    if !nf.restrictions.is_empty() {
        return Err("process is not a bare parallel composition of role players".into());
    }
    // transitive process-variable needs per thread
    let mut needs: Vec<BTreeSet<crate::ident::ProcVar>> = nf
        .threads
        .iter()
        .map(|t| free_proc_vars(t))
        .collect();
    loop {
        let mut changed = false;
        for need in needs.iter_mut() {
            let mut extra = BTreeSet::new();
            for d in &nf.defs {
                if need.contains(&d.name) {
                    for v in free_proc_vars(&d.body) {
                        if v != d.name && !need.contains(&v) {
                            extra.insert(v);
                        }
                    }
                }
            }
            if !extra.is_empty() {
                need.extend(extra);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    for d in &nf.defs {
        let users = needs.iter().filter(|need| need.contains(&d.name)).count();
        if users > 1 {
            return Err(format!(
                "definition {} is shared between parallel components",
                d.name
            ));
        }
    }
    let mut components = Vec::new();
    for (i, thread) in nf.threads.iter().enumerate() {
        let mut comp = thread.clone();
        for d in nf.defs.iter().rev() {
            if needs[i].contains(&d.name) {
                comp = Process::Def {
                    name: d.name.clone(),
                    params: d.params.clone(),
                    body: Box::new(d.body.clone()),
                    scope: Box::new(comp),
                };
            }
        }
        components.push(comp);
    }
    Ok(components)
}

fn free_proc_vars(p: &Process) -> BTreeSet<crate::ident::ProcVar> {
    fn go(p: &Process, bound: &mut Vec<crate::ident::ProcVar>, out: &mut BTreeSet<crate::ident::ProcVar>) {
        match p {
            Process::Inaction | Process::Error => {}
            Process::Restriction { body, .. } => go(body, bound, out),
            Process::Select { cont, .. } => go(cont, bound, out),
            Process::Branch { branches, .. } => {
                for b in branches {
                    go(&b.cont, bound, out);
                }
            }
            Process::Def {
                name, body, scope, ..
            } => {
                bound.push(name.clone());
                go(body, bound, out);
                go(scope, bound, out);
                bound.pop();
            }
            Process::Call { name, .. } => {
                if !bound.contains(name) {
                    out.insert(name.clone());
                }
            }
            Process::Par(l, r) => {
                go(l, bound, out);
                go(r, bound, out);
            }
        }
    }
    let mut out = BTreeSet::new();
    go(p, &mut Vec::new(), &mut out);
    out
}

/// The session-fidelity premises: the context types the process, it is
/// associated with the global type, and the process splits into per-role
/// components that are nil or play exactly their role.
fn check_fidelity_premises(
    g: &GlobalType,
    ctx: &TypingContext,
    p: &Process,
    session: &Session,
) -> Result<(), String> {
    typecheck(&ProcVarEnv::new(), ctx, p).map_err(|e| format!("process is ill-typed: {e}"))?;
    if !check_association(g, ctx, session).holds {
        return Err("context is not associated with the global type".into());
    }
    let components = decompose_components(p)?;
    let mut claimed_roles: BTreeSet<Role> = BTreeSet::new();
    let mut leftover: TypingContext = ctx.clone();
    let mut assignments: Vec<(Process, TypingContext, Role)> = Vec::new();
    for comp in components {
        if crate::picalc::equivalent(&comp, &Process::Inaction) {
            continue;
        }
        let used = used_keys(&comp);
        let mut part = TypingContext::new();
        let mut roles = BTreeSet::new();
        for k in &used {
            if let Some(sort) = leftover.remove(k) {
                if let ContextKey::Endpoint(s, r) = k {
                    if s == session && !matches!(&sort, Sort::Session(t) if t.is_end_like()) {
                        roles.insert(r.clone());
                    }
                }
                part.update(k.clone(), sort);
            }
        }
        let mut roles_iter = roles.into_iter();
        let (Some(role), None) = (roles_iter.next(), roles_iter.next()) else {
            return Err(format!(
                "component `{}` does not play exactly one role",
                surface::print_process(&comp)
            ));
        };
        if !claimed_roles.insert(role.clone()) {
            return Err(format!("two components play role {role}"));
        }
        assignments.push((comp, part, role));
    }
    // end-typed leftovers may sit with any component; park them on the first
    if let Some((_, part, _)) = assignments.first_mut() {
        let rest = std::mem::take(&mut leftover);
        for (k, sort) in rest.iter() {
            part.update(k.clone(), sort.clone());
        }
    }
    for (comp, part, role) in &assignments {
        typecheck(&ProcVarEnv::new(), part, comp)
            .map_err(|e| format!("component for {role} is ill-typed: {e}"))?;
        if !only_plays(comp, role, session, part) {
            return Err(format!(
                "component `{}` does not only play {role} in {session}",
                surface::print_process(comp)
            ));
        }
    }
    Ok(())
}

/// Whenever the context can transmit on the session, the process can match
/// one of those transmissions, re-establishing every premise.
pub fn session_fidelity_harness(
    g: &GlobalType,
    ctx: &TypingContext,
    p: &Process,
    session: &Session,
    max_rounds: usize,
) -> FidelityReport {
    let mut report = FidelityReport {
        premise_failure: None,
        rounds: Vec::new(),
        completed: false,
        failure: None,
    };
    if let Err(e) = check_fidelity_premises(g, ctx, p, session) {
        report.premise_failure = Some(e);
        return report;
    }
    let mut cur_g = g.clone();
    let mut cur_ctx = ctx.clone();
    let mut cur_p = p.clone();
    for _ in 0..max_rounds {
        let ctx_steps = context_transmissions(&cur_ctx, session);
        if ctx_steps.is_empty() {
            report.completed = true;
            return report;
        }
        let defs = count_defs(&cur_p);
        let bound = 2 * defs + 2;
        let mut matched = None;
        'candidates: for step in &ctx_steps {
            let Ok(gsteps) = global_steps(&cur_g, session) else {
                continue;
            };
            let Some(gs) = gsteps.iter().find(|gs| gs.label == step.label) else {
                continue;
            };
            // search process reductions for a residue the new context types
            let mut seen = BTreeSet::new();
            let mut frontier = VecDeque::new();
            frontier.push_back((cur_p.clone(), 0usize));
            while let Some((cand, depth)) = frontier.pop_front() {
                if !seen.insert(canonical_print(&normalize(&cand))) {
                    continue;
                }
                if depth > 0
                    && check_fidelity_premises(&gs.target, &step.target, &cand, session).is_ok()
                {
                    matched = Some((step.clone(), gs.target.clone(), cand));
                    break 'candidates;
                }
                if depth < bound {
                    for next in reduce_steps(&cand) {
                        frontier.push_back((next, depth + 1));
                    }
                }
            }
        }
        match matched {
            Some((step, g_target, p_target)) => {
                report.rounds.push(FidelityRound {
                    label: step.label.clone(),
                    process: surface::print_process(&p_target),
                });
                cur_g = g_target;
                cur_ctx = step.target;
                cur_p = p_target;
            }
            None => {
                report.failure = Some(format!(
                    "no context transmission of {session} is matched by the process `{}`",
                    surface::print_process(&cur_p)
                ));
                return report;
            }
        }
    }
    report.completed = context_transmissions(&cur_ctx, session).is_empty();
    report
}

fn count_defs(p: &Process) -> usize {
    match p {
        Process::Def { body, scope, .. } => 1 + count_defs(body) + count_defs(scope),
        Process::Par(l, r) => count_defs(l) + count_defs(r),
        Process::Restriction { body, .. } => count_defs(body),
        Process::Select { cont, .. } => count_defs(cont),
        Process::Branch { branches, .. } => branches.iter().map(|b| count_defs(&b.cont)).sum(),
        _ => 0,
    }
}

// ---------------------------------------------------------------------------
// Runtime properties of typed processes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ProcessProperties {
    pub deadlock_free: bool,
    pub live: bool,
    pub states: usize,
    pub detail: Option<String>,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum HarnessError {
    #[error("premise violation: {0}")]
    PremiseViolation(String),
    #[error("state space exceeded {0} processes")]
    StateLimit(usize),
}

struct ProcState {
    nf: NormalForm,
    thread_keys: Vec<String>,
}

/// Per-thread canonical keys, stable across alpha-variant normal forms:
/// equal states (by `canonical_print`) agree on the multiset of keys.
fn thread_keys(nf: &NormalForm) -> Vec<String> {
    (0..nf.threads.len())
        .map(|i| {
            let mut single = nf.clone();
            let t = single.threads.remove(i);
            single.threads = vec![t];
            canonical_print(&single)
        })
        .collect()
}

/// Exhaustively explores the reduction graph of a typed single-session
/// process and decides runtime deadlock-freedom and liveness.
pub fn typed_process_properties(
    g: &GlobalType,
    ctx: &TypingContext,
    p: &Process,
    session: &Session,
    state_limit: usize,
) -> Result<ProcessProperties, HarnessError> {
    check_fidelity_premises(g, ctx, p, session).map_err(HarnessError::PremiseViolation)?;
    explore_process_properties(p, state_limit)
}

/// The exploration itself, usable without the typing premises (e.g. for
/// plain executions).
pub fn explore_process_properties(
    p: &Process,
    state_limit: usize,
) -> Result<ProcessProperties, HarnessError> {
    let initial = normalize(p);
    let mut states: Vec<ProcState> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    // edges: (from, rule, consumed thread keys, survivor key pairs, to)
    struct Edge {
        from: usize,
        rule: &'static str,
        consumed: Vec<String>,
        survivors: Vec<(String, String)>,
        to: usize,
    }
    let mut edges: Vec<Edge> = Vec::new();
    let mut frontier = VecDeque::new();
    let key0 = canonical_print(&initial);
    index.insert(key0, 0);
    states.push(ProcState {
        thread_keys: thread_keys(&initial),
        nf: initial,
    });
    frontier.push_back(0usize);
    while let Some(at) = frontier.pop_front() {
        let nf = states[at].nf.clone();
        for step in steps(&nf) {
            let Ok(next) = step.next else {
                continue;
            };
            let key = canonical_print(&next);
            let to = match index.get(&key) {
                Some(&i) => i,
                None => {
                    let i = states.len();
                    if i >= state_limit {
                        return Err(HarnessError::StateLimit(state_limit));
                    }
                    index.insert(key, i);
                    states.push(ProcState {
                        thread_keys: thread_keys(&next),
                        nf: next.clone(),
                    });
                    frontier.push_back(i);
                    i
                }
            };
            let from_keys = &states[at].thread_keys;
            let next_keys = thread_keys(&next);
            let consumed = step
                .consumed
                .iter()
                .map(|&i| from_keys[i].clone())
                .collect();
            let survivors = step
                .survivors
                .iter()
                .map(|&(old, new)| (from_keys[old].clone(), next_keys[new].clone()))
                .collect();
            edges.push(Edge {
                from: at,
                rule: step.rule,
                consumed,
                survivors,
                to,
            });
        }
    }
    let mut out_edges: Vec<Vec<usize>> = vec![Vec::new(); states.len()];
    for (i, e) in edges.iter().enumerate() {
        out_edges[e.from].push(i);
    }
    // Deadlock-freedom: stuck states are inaction.
    let mut deadlock_free = true;
    let mut detail = None;
    for (i, st) in states.iter().enumerate() {
        if out_edges[i].is_empty() && !st.nf.is_nil() {
            deadlock_free = false;
            detail = Some(format!(
                "stuck non-nil state: {}",
                surface::print_process(&denormalize(&st.nf))
            ));
            break;
        }
    }
    // Liveness: every select/branch thread of every reachable state is
    // eventually consumed by a communication on some continuation path.
    let mut live = true;
    'outer: for (i, st) in states.iter().enumerate() {
        for (ti, thread) in st.nf.threads.iter().enumerate() {
            if !matches!(thread, Process::Select { .. } | Process::Branch { .. }) {
                continue;
            }
            let start_key = st.thread_keys[ti].clone();
            // BFS over (state, thread key)
            let mut seen = BTreeSet::new();
            let mut queue = VecDeque::new();
            queue.push_back((i, start_key.clone()));
            let mut fired = false;
            while let Some((at, key)) = queue.pop_front() {
                if !seen.insert((at, key.clone())) {
                    continue;
                }
                for &ei in &out_edges[at] {
                    let e = &edges[ei];
                    if e.rule == "R-comm" && e.consumed.contains(&key) {
                        fired = true;
                        break;
                    }
                    if let Some((_, new_key)) =
                        e.survivors.iter().find(|(old, _)| *old == key)
                    {
                        queue.push_back((e.to, new_key.clone()));
                    }
                }
                if fired {
                    break;
                }
            }
            if !fired {
                live = false;
                if detail.is_none() {
                    detail = Some(format!(
                        "thread `{}` can never fire from state {}",
                        surface::print_process(thread),
                        surface::print_process(&denormalize(&st.nf))
                    ));
                }
                break 'outer;
            }
        }
    }
    Ok(ProcessProperties {
        deadlock_free,
        live,
        states: states.len(),
        detail,
    })
}
