//! Shared test machinery: seeded random generators for types, contexts,
//! and processes, plus independent brute-force oracles that cross-check
//! the production algorithms.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mpst::analysis::check_association;
use mpst::ident::{Label, ProcVar, RecVar, Role, Session, ValVar};
use mpst::lts::{context_half_steps, context_transmissions, global_steps, ContextGraph};
use mpst::picalc::{ChannelExpr, Literal, ProcBranch, Process, ValueExpr};
use mpst::projection::project_all;
use mpst::subtyping::subtype;
use mpst::types::{
    BasicSort, ContextKey, GlobalBranch, GlobalType, LocalBranch, LocalType, Sort, TransitionLabel,
    TypingContext,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub const ROLE_POOL: [&str; 4] = ["p", "q", "r", "u"];
pub const LABEL_POOL: [&str; 5] = ["l1", "l2", "l3", "l4", "l5"];

// ---------------------------------------------------------------------------
// Random local types
// ---------------------------------------------------------------------------

pub struct LocalGenCfg {
    pub max_depth: usize,
    pub max_width: usize,
    pub allow_session_payloads: bool,
}

impl Default for LocalGenCfg {
    fn default() -> Self {
        LocalGenCfg {
            max_depth: 4,
            max_width: 3,
            allow_session_payloads: true,
        }
    }
}

/// A closed, contractive local type.
pub fn gen_local(rng: &mut ChaCha8Rng, cfg: &LocalGenCfg) -> LocalType {
    let mut rec_counter = 0;
    gen_local_at(rng, cfg, 0, &mut Vec::new(), false, &mut rec_counter)
}

fn gen_basic(rng: &mut ChaCha8Rng) -> BasicSort {
    match rng.gen_range(0..5) {
        0 => BasicSort::Int,
        1 => BasicSort::Bool,
        2 => BasicSort::Real,
        3 => BasicSort::Str,
        _ => BasicSort::Unit,
    }
}

fn gen_payload(rng: &mut ChaCha8Rng, cfg: &LocalGenCfg, depth: usize) -> Sort {
    if cfg.allow_session_payloads && depth < cfg.max_depth && rng.gen_ratio(1, 6) {
        let inner_cfg = LocalGenCfg {
            max_depth: cfg.max_depth.saturating_sub(depth + 1),
            max_width: 2,
            allow_session_payloads: false,
        };
        Sort::session(gen_local(rng, &inner_cfg))
    } else {
        Sort::Basic(gen_basic(rng))
    }
}

fn gen_local_at(
    rng: &mut ChaCha8Rng,
    cfg: &LocalGenCfg,
    depth: usize,
    binders: &mut Vec<RecVar>,
    guarded: bool,
    rec_counter: &mut usize,
) -> LocalType {
    if depth >= cfg.max_depth {
        if guarded && !binders.is_empty() && rng.gen_bool(0.5) {
            let v = binders[rng.gen_range(0..binders.len())].clone();
            return LocalType::Var(v);
        }
        return LocalType::End;
    }
    let roll = rng.gen_range(0..10);
    match roll {
        0 | 1 => LocalType::End,
        2 if guarded && !binders.is_empty() => {
            let v = binders[rng.gen_range(0..binders.len())].clone();
            LocalType::Var(v)
        }
        3 if *rec_counter < 2 => {
            *rec_counter += 1;
            let v = RecVar::new(format!("t{rec_counter}"));
            binders.push(v.clone());
            let body = loop {
                let candidate =
                    gen_local_comm(rng, cfg, depth + 1, binders, rec_counter);
                if candidate.free_vars().contains(&v) {
                    break candidate;
                }
                // a recursion that never loops is useless; retry once and
                // fall back to a direct self-loop
                let peer = Role::new(ROLE_POOL[rng.gen_range(0..ROLE_POOL.len())]);
                break LocalType::internal(
                    peer,
                    vec![LocalBranch {
                        label: Label::new("loop"),
                        payload: Sort::UNIT,
                        cont: LocalType::Var(v.clone()),
                    }],
                );
            };
            binders.pop();
            LocalType::Rec(v, Box::new(body))
        }
        _ => gen_local_comm(rng, cfg, depth, binders, rec_counter),
    }
}

fn gen_local_comm(
    rng: &mut ChaCha8Rng,
    cfg: &LocalGenCfg,
    depth: usize,
    binders: &mut Vec<RecVar>,
    rec_counter: &mut usize,
) -> LocalType {
    let peer = Role::new(ROLE_POOL[rng.gen_range(0..ROLE_POOL.len())]);
    let width = rng.gen_range(1..=cfg.max_width);
    let mut labels: Vec<&str> = LABEL_POOL.to_vec();
    let mut branches = Vec::new();
    for _ in 0..width {
        let idx = rng.gen_range(0..labels.len());
        let label = Label::new(labels.remove(idx));
        let payload = gen_payload(rng, cfg, depth);
        let cont = gen_local_at(rng, cfg, depth + 1, binders, true, rec_counter);
        branches.push(LocalBranch {
            label,
            payload,
            cont,
        });
    }
    if rng.gen_bool(0.5) {
        LocalType::Internal {
            peer,
            branches,
        }
    } else {
        LocalType::External {
            peer,
            branches,
        }
    }
}

/// A random supertype of `t`: drops internal branches, adds external
/// branches, and relaxes payloads along the subtyping rules.
pub fn gen_supertype(rng: &mut ChaCha8Rng, t: &LocalType) -> LocalType {
    // unfoldings duplicate recursion sites, so cap them per call
    let mut unfold_budget = 2usize;
    gen_supertype_in(rng, t, &mut unfold_budget)
}

fn gen_supertype_in(rng: &mut ChaCha8Rng, t: &LocalType, unfold_budget: &mut usize) -> LocalType {
    match t {
        LocalType::End => LocalType::End,
        LocalType::Var(v) => LocalType::Var(v.clone()),
        LocalType::Rec(v, body) => {
            if *unfold_budget > 0 && rng.gen_bool(0.3) {
                // a type is below its own unfolding
                *unfold_budget -= 1;
                return match t.unfold_once() {
                    Ok(u) => gen_supertype_in(rng, &u, unfold_budget),
                    Err(_) => t.clone(),
                };
            }
            LocalType::Rec(v.clone(), Box::new(gen_supertype_in(rng, body, unfold_budget)))
        }
        LocalType::Internal { peer, branches } => {
            // supertype may offer fewer output labels
            let keep = if branches.len() > 1 && rng.gen_bool(0.4) {
                let drop = rng.gen_range(0..branches.len());
                branches
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != drop)
                    .map(|(_, b)| b)
                    .collect::<Vec<_>>()
            } else {
                branches.iter().collect()
            };
            LocalType::Internal {
                peer: peer.clone(),
                branches: keep
                    .into_iter()
                    .map(|b| LocalBranch {
                        label: b.label.clone(),
                        payload: narrow_payload(rng, &b.payload),
                        cont: gen_supertype_in(rng, &b.cont, unfold_budget),
                    })
                    .collect(),
            }
        }
        LocalType::External { peer, branches } => {
            let mut out: Vec<LocalBranch> = branches
                .iter()
                .map(|b| LocalBranch {
                    label: b.label.clone(),
                    payload: widen_payload(rng, &b.payload),
                    cont: gen_supertype_in(rng, &b.cont, unfold_budget),
                })
                .collect();
            if rng.gen_bool(0.4) {
                let used: BTreeSet<&str> = branches.iter().map(|b| b.label.as_str()).collect();
                if let Some(extra) = LABEL_POOL.iter().find(|l| !used.contains(**l)) {
                    out.push(LocalBranch {
                        label: Label::new(*extra),
                        payload: Sort::UNIT,
                        cont: LocalType::End,
                    });
                }
            }
            LocalType::External {
                peer: peer.clone(),
                branches: out,
            }
        }
    }
}

/// Output payloads are contravariant: the supertype may demand less.
fn narrow_payload(rng: &mut ChaCha8Rng, s: &Sort) -> Sort {
    match s {
        Sort::Basic(BasicSort::Real) if rng.gen_bool(0.5) => Sort::Basic(BasicSort::Int),
        other => other.clone(),
    }
}

/// Input payloads are covariant: the supertype may accept more.
fn widen_payload(rng: &mut ChaCha8Rng, s: &Sort) -> Sort {
    match s {
        Sort::Basic(BasicSort::Int) if rng.gen_bool(0.5) => Sort::Basic(BasicSort::Real),
        other => other.clone(),
    }
}

// ---------------------------------------------------------------------------
// Random projectable global types
// ---------------------------------------------------------------------------

pub struct GlobalGenCfg {
    pub max_roles: usize,
    pub max_width: usize,
    pub max_recs: usize,
    pub max_depth: usize,
    /// Restrict payloads to basic sorts (needed for process synthesis).
    pub basic_payloads_only: bool,
}

impl Default for GlobalGenCfg {
    fn default() -> Self {
        GlobalGenCfg {
            max_roles: 4,
            max_width: 3,
            max_recs: 2,
            max_depth: 5,
            basic_payloads_only: false,
        }
    }
}

/// Rejection-samples a well-formed global type whose projection is total.
pub fn gen_projectable_global(rng: &mut ChaCha8Rng, cfg: &GlobalGenCfg) -> GlobalType {
    loop {
        let candidate = gen_global_candidate(rng, cfg);
        if candidate.roles().is_empty() {
            continue;
        }
        if !candidate.is_well_formed() {
            continue;
        }
        if project_all(&candidate).total().is_ok() {
            return candidate;
        }
    }
}

fn gen_global_candidate(rng: &mut ChaCha8Rng, cfg: &GlobalGenCfg) -> GlobalType {
    let n_roles = rng.gen_range(2..=cfg.max_roles.max(2));
    let roles: Vec<Role> = ROLE_POOL[..n_roles].iter().map(|r| Role::new(*r)).collect();
    let mut recs = 0;
    gen_global_at(rng, cfg, &roles, 0, None, false, &mut recs)
}

fn gen_global_at(
    rng: &mut ChaCha8Rng,
    cfg: &GlobalGenCfg,
    roles: &[Role],
    depth: usize,
    binder: Option<&RecVar>,
    guarded: bool,
    recs: &mut usize,
) -> GlobalType {
    if depth >= cfg.max_depth {
        if let Some(v) = binder {
            if guarded && rng.gen_bool(0.7) {
                return GlobalType::Var(v.clone());
            }
        }
        return GlobalType::End;
    }
    let roll = rng.gen_range(0..10);
    if roll == 0 && depth > 0 {
        return GlobalType::End;
    }
    if roll == 1 && guarded && binder.is_some() && rng.gen_bool(0.8) {
        return GlobalType::Var(binder.unwrap().clone());
    }
    if roll == 2 && *recs < cfg.max_recs && binder.is_none() {
        *recs += 1;
        let v = RecVar::new(format!("t{recs}"));
        let body = gen_global_comm(rng, cfg, roles, depth + 1, Some(&v), recs);
        if body.free_vars().contains(&v) {
            return GlobalType::Rec(v, Box::new(body));
        }
        return body;
    }
    gen_global_comm(rng, cfg, roles, depth, binder, recs)
}

fn gen_global_comm(
    rng: &mut ChaCha8Rng,
    cfg: &GlobalGenCfg,
    roles: &[Role],
    depth: usize,
    binder: Option<&RecVar>,
    recs: &mut usize,
) -> GlobalType {
    let from = roles[rng.gen_range(0..roles.len())].clone();
    let to = loop {
        let candidate = roles[rng.gen_range(0..roles.len())].clone();
        if candidate != from {
            break candidate;
        }
    };
    let width = if rng.gen_bool(0.55) {
        1
    } else {
        rng.gen_range(2..=cfg.max_width.max(2))
    };
    let mut labels: Vec<&str> = LABEL_POOL.to_vec();
    let mut branches = Vec::new();
    for _ in 0..width {
        let idx = rng.gen_range(0..labels.len());
        let label = Label::new(labels.remove(idx));
        let payload = if cfg.basic_payloads_only || rng.gen_bool(0.85) {
            Sort::Basic(gen_basic(rng))
        } else {
            Sort::session(gen_local(
                rng,
                &LocalGenCfg {
                    max_depth: 2,
                    max_width: 2,
                    allow_session_payloads: false,
                },
            ))
        };
        let cont = gen_global_at(rng, cfg, roles, depth + 1, binder, true, recs);
        branches.push(GlobalBranch {
            label,
            payload,
            cont,
        });
    }
    GlobalType::Comm { from, to, branches }
}

// ---------------------------------------------------------------------------
// Projection-directed process synthesis
// ---------------------------------------------------------------------------

/// Builds, for every role of `g`, a process that follows its projection:
/// selections pick one offered branch, branchings cover every input, and
/// recursion becomes a guarded definition. Returns the composed process and
/// the context of projections.
pub fn synthesize_session(
    g: &GlobalType,
    session: &Session,
    rng: &mut ChaCha8Rng,
) -> (Process, TypingContext) {
    let table = project_all(g).total().expect("generator output is projectable");
    let mut ctx = TypingContext::new();
    let mut processes = Vec::new();
    let mut def_counter = 0usize;
    for (role, t) in &table {
        ctx.update(
            ContextKey::Endpoint(session.clone(), role.clone()),
            Sort::session(t.clone()),
        );
        let chan = ChannelExpr::Endpoint(session.clone(), role.clone());
        processes.push(synth_local(t, &chan, rng, &mut def_counter, &BTreeMap::new()));
    }
    let process = processes
        .into_iter()
        .reduce(Process::par)
        .unwrap_or(Process::Inaction);
    (process, ctx)
}

fn literal_for(sort: &Sort, rng: &mut ChaCha8Rng) -> ValueExpr {
    match sort {
        Sort::Basic(BasicSort::Int) => ValueExpr::Lit(Literal::Int(rng.gen_range(0..100))),
        Sort::Basic(BasicSort::Bool) => ValueExpr::Lit(Literal::Bool(rng.gen_bool(0.5))),
        Sort::Basic(BasicSort::Str) => ValueExpr::Lit(Literal::Str("v".into())),
        // an int literal is usable at real via basic subtyping
        Sort::Basic(BasicSort::Real) => ValueExpr::Lit(Literal::Int(rng.gen_range(0..10))),
        Sort::Basic(BasicSort::Unit) => ValueExpr::Lit(Literal::Unit),
        Sort::Session(_) => panic!("process synthesis requires basic payloads"),
    }
}

fn synth_local(
    t: &LocalType,
    chan: &ChannelExpr,
    rng: &mut ChaCha8Rng,
    def_counter: &mut usize,
    rec_env: &BTreeMap<RecVar, (ProcVar, ValVar)>,
) -> Process {
    match t {
        LocalType::End => Process::Inaction,
        LocalType::Var(v) => {
            let (proc, param) = rec_env.get(v).expect("recursion variable in scope");
            Process::Call {
                name: proc.clone(),
                args: vec![ValueExpr::Var(param.clone())],
            }
        }
        LocalType::Rec(v, body) => {
            *def_counter += 1;
            let name = ProcVar::new(format!("X{def_counter}"));
            let param = ValVar::new(format!("ch{def_counter}"));
            let mut env = rec_env.clone();
            env.insert(v.clone(), (name.clone(), param.clone()));
            let body_proc = synth_local(
                body,
                &ChannelExpr::Var(param.clone()),
                rng,
                def_counter,
                &env,
            );
            Process::Def {
                name: name.clone(),
                params: vec![(param, Sort::session(t.clone()))],
                body: Box::new(body_proc),
                scope: Box::new(Process::Call {
                    name,
                    args: vec![chan.to_value()],
                }),
            }
        }
        LocalType::Internal { peer, branches } => {
            let b = &branches[rng.gen_range(0..branches.len())];
            Process::Select {
                channel: chan.clone(),
                to: peer.clone(),
                label: b.label.clone(),
                payload: literal_for(&b.payload, rng),
                cont: Box::new(synth_local(&b.cont, chan, rng, def_counter, rec_env)),
            }
        }
        LocalType::External { peer, branches } => Process::Branch {
            channel: chan.clone(),
            from: peer.clone(),
            branches: branches
                .iter()
                .enumerate()
                .map(|(i, b)| ProcBranch {
                    label: b.label.clone(),
                    binder: ValVar::new(format!("y{i}")),
                    cont: synth_local(&b.cont, chan, rng, def_counter, rec_env),
                })
                .collect(),
        },
    }
}

// ---------------------------------------------------------------------------
// Independent oracles
// ---------------------------------------------------------------------------

/// Transmissions derived literally from the half-step rule pairing, as an
/// independent route to the production scanner.
pub fn oracle_transmissions(
    ctx: &TypingContext,
    session: &Session,
) -> Vec<(TransitionLabel, TypingContext)> {
    let halves = context_half_steps(ctx, session);
    let mut out = Vec::new();
    for h1 in &halves {
        let TransitionLabel::Output {
            subject: p,
            peer: q,
            label,
            payload: s_out,
            ..
        } = &h1.label
        else {
            continue;
        };
        for h2 in &halves {
            let TransitionLabel::Input {
                subject: q2,
                peer: p2,
                label: label2,
                payload: s_in,
                ..
            } = &h2.label
            else {
                continue;
            };
            if q2 != q || p2 != p || label2 != label {
                continue;
            }
            if !subtype(s_out, s_in) {
                continue;
            }
            // compose the two single-entry updates
            let mut target = ctx.clone();
            let key_p = ContextKey::Endpoint(session.clone(), p.clone());
            let key_q = ContextKey::Endpoint(session.clone(), q.clone());
            target.update(key_p.clone(), h1.target.get(&key_p).unwrap().clone());
            target.update(key_q.clone(), h2.target.get(&key_q).unwrap().clone());
            out.push((
                TransitionLabel::Transmission {
                    session: session.clone(),
                    from: p.clone(),
                    to: q.clone(),
                    label: label.clone(),
                },
                target,
            ));
        }
    }
    out
}

/// Clause-by-clause safety evaluation over a reachability closure built
/// from the oracle transmissions.
pub fn oracle_safety(ctx: &TypingContext, session: &Session, limit: usize) -> bool {
    let mut seen = BTreeSet::new();
    let mut frontier = VecDeque::from([ctx.clone()]);
    while let Some(cur) = frontier.pop_front() {
        if !seen.insert(cur.canonical_key()) {
            continue;
        }
        if seen.len() > limit {
            panic!("oracle exploration exceeded {limit} contexts");
        }
        let halves = context_half_steps(&cur, session);
        let transmissions = oracle_transmissions(&cur, session);
        for h1 in &halves {
            let TransitionLabel::Output {
                subject: p,
                peer: q,
                label,
                ..
            } = &h1.label
            else {
                continue;
            };
            for h2 in &halves {
                let TransitionLabel::Input {
                    subject: q2,
                    peer: p2,
                    ..
                } = &h2.label
                else {
                    continue;
                };
                if q2 != q || p2 != p {
                    continue;
                }
                // phi-com: the receiver must take the sender's label
                let fires = transmissions.iter().any(|(l, _)| {
                    matches!(l, TransitionLabel::Transmission { from, to, label: tl, .. }
                        if from == p && to == q && tl == label)
                });
                if !fires {
                    return false;
                }
            }
        }
        for (_, target) in transmissions {
            frontier.push_back(target);
        }
    }
    true
}

/// Exhaustive fair-lasso liveness oracle for small graphs: enumerates node
/// subsets as candidate fair cycles.
pub fn oracle_live(graph: &ContextGraph) -> bool {
    let n = graph.nodes.len();
    assert!(n <= 16, "oracle_live is exponential; got {n} nodes");
    // terminal violations
    for i in 0..n {
        if graph.is_terminal(i)
            && !context_half_steps(&graph.nodes[i], &graph.session).is_empty()
        {
            return false;
        }
    }
    let full_pairs: Vec<BTreeSet<(Role, Role)>> =
        (0..n).map(|i| graph.enabled_pairs(i)).collect();
    for start in 0..n {
        let obligations: BTreeSet<(Role, Role)> =
            context_half_steps(&graph.nodes[start], &graph.session)
                .iter()
                .map(|h| h.label.pair())
                .collect();
        for pair in obligations {
            // nodes reachable from start avoiding `pair` edges
            let mut reach = BTreeSet::new();
            let mut stack = vec![start];
            while let Some(at) = stack.pop() {
                if !reach.insert(at) {
                    continue;
                }
                for e in graph.outgoing(at) {
                    if e.label.pair() != pair {
                        stack.push(e.to);
                    }
                }
            }
            let reach: Vec<usize> = reach.into_iter().collect();
            let m = reach.len();
            for mask in 1u32..(1 << m) {
                let subset: Vec<usize> = (0..m)
                    .filter(|i| mask & (1 << i) != 0)
                    .map(|i| reach[i])
                    .collect();
                if subset_is_starving_cycle(graph, &subset, &pair, &full_pairs) {
                    return false;
                }
            }
        }
    }
    true
}

fn subset_is_starving_cycle(
    graph: &ContextGraph,
    subset: &[usize],
    avoided: &(Role, Role),
    full_pairs: &[BTreeSet<(Role, Role)>],
) -> bool {
    let members: BTreeSet<usize> = subset.iter().copied().collect();
    let edges: Vec<_> = subset
        .iter()
        .flat_map(|&v| graph.outgoing(v))
        .filter(|e| e.label.pair() != *avoided && members.contains(&e.to))
        .collect();
    if edges.is_empty() {
        return false;
    }
    // strong connectivity of the induced subgraph
    for &v in subset {
        let mut reached = BTreeSet::new();
        let mut stack = vec![v];
        while let Some(at) = stack.pop() {
            if !reached.insert(at) {
                continue;
            }
            for e in &edges {
                if e.from == at {
                    stack.push(e.to);
                }
            }
        }
        if !members.is_subset(&reached) {
            return false;
        }
    }
    let labels: BTreeSet<(Role, Role)> = edges.iter().map(|e| e.label.pair()).collect();
    subset.iter().all(|&v| full_pairs[v].is_subset(&labels))
}

/// Naive path-enumerating correspondence oracle: walks every context
/// transmission path up to `depth` (no deduplication), stepping the global
/// type alongside, and checks the two theorem statements pointwise.
pub fn oracle_correspondence(
    g: &GlobalType,
    ctx: &TypingContext,
    session: &Session,
    depth: usize,
) -> (bool, bool) {
    fn walk(
        g: &GlobalType,
        ctx: &TypingContext,
        session: &Session,
        depth: usize,
        sound: &mut bool,
        complete: &mut bool,
    ) {
        let gsteps = global_steps(g, session).unwrap_or_default();
        let csteps = context_transmissions(ctx, session);
        for gs in &gsteps {
            let (p, q) = gs.label.pair();
            let ok = gsteps.iter().any(|alt| {
                alt.label.pair() == (p.clone(), q.clone())
                    && csteps.iter().any(|cs| {
                        cs.label == alt.label
                            && check_association(&alt.target, &cs.target, session).holds
                    })
            });
            if !ok {
                *sound = false;
            }
        }
        for cs in &csteps {
            match gsteps.iter().find(|gs| gs.label == cs.label) {
                Some(gs) if check_association(&gs.target, &cs.target, session).holds => {
                    if depth > 0 {
                        walk(&gs.target, &cs.target, session, depth - 1, sound, complete);
                    }
                }
                _ => {
                    *complete = false;
                }
            }
        }
    }
    let mut sound = true;
    let mut complete = true;
    walk(g, ctx, session, depth, &mut sound, &mut complete);
    (sound, complete)
}
