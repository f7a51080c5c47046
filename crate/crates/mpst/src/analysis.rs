//! Association checking, the operational-correspondence harnesses, and the
//! safety / deadlock-freedom / liveness decision procedures over the finite
//! context state graph.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::ident::{Role, Session};
use crate::lts::{
    context_half_steps, context_transmissions, global_steps, reachable_contexts, ContextGraph,
    GraphEdge, LimitExceeded,
};
use crate::projection::{project, project_all, ProjectionError};
use crate::subtyping::subtype;
use crate::types::{
    ContextKey, GlobalType, LocalType, Sort, TransitionLabel, TypeKey, TypingContext,
};

/// Default reachability limit, overridable per call (the CLI wires the
/// MPST_LIMIT environment variable to this).
pub const DEFAULT_LIMIT: usize = 100_000;

// ---------------------------------------------------------------------------
// Association
// ---------------------------------------------------------------------------

/// Per-role outcome of an association check.
#[derive(Debug, Clone)]
pub struct RoleAssociation {
    pub role: Role,
    pub projection: Result<LocalType, ProjectionError>,
    pub entry: Option<Sort>,
    pub subtype_ok: bool,
}

/// Result of checking that a context splits into projections of a global
/// type plus end-typed leftovers.
#[derive(Debug, Clone)]
pub struct AssociationReport {
    pub holds: bool,
    pub role_results: Vec<RoleAssociation>,
    /// The leftover endpoints of the session that are `end`.
    pub end_part: Vec<(Session, Role)>,
    pub failure: Option<String>,
}

/// Checks association of `ctx` with `g` for `session`: every role of `g`
/// has an endpoint whose entry is above the projection, and every other
/// endpoint of the session is `end`.
pub fn check_association(g: &GlobalType, ctx: &TypingContext, session: &Session) -> AssociationReport {
    let roles = g.roles();
    let mut role_results = Vec::new();
    let mut holds = true;
    let mut failure = None;
    for role in &roles {
        let projection = project(g, role);
        let entry = ctx.endpoint(session, role).cloned();
        let subtype_ok = match (&projection, &entry) {
            (Ok(t), Some(sort)) => subtype(&Sort::session(t.clone()), sort),
            _ => false,
        };
        if !subtype_ok && failure.is_none() {
            failure = Some(match (&projection, &entry) {
                (Err(e), _) => format!("projection undefined: {e}"),
                (_, None) => format!("missing endpoint {session}[{role}]"),
                _ => format!("projection onto {role} is not a subtype of its entry"),
            });
        }
        holds &= subtype_ok;
        role_results.push(RoleAssociation {
            role: role.clone(),
            projection,
            entry,
            subtype_ok,
        });
    }
    let mut end_part = Vec::new();
    for other in ctx.roles_of(session) {
        if roles.contains(&other) {
            continue;
        }
        let entry = ctx.endpoint(session, &other).unwrap();
        if *entry == Sort::Session(Box::new(LocalType::End)) {
            end_part.push((session.clone(), other));
        } else {
            holds = false;
            if failure.is_none() {
                failure = Some(format!(
                    "leftover endpoint {session}[{other}] is not end"
                ));
            }
        }
    }
    AssociationReport {
        holds,
        role_results,
        end_part,
        failure,
    }
}

// ---------------------------------------------------------------------------
// Soundness / completeness correspondence
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    /// A global transmission with no same-subjects label matched by both
    /// sides with association preserved.
    Soundness,
    /// A context transmission the global type cannot mirror exactly.
    Completeness,
    /// The starting pair is not associated.
    Precondition,
}

#[derive(Debug, Clone)]
pub struct CorrespondenceViolation {
    pub kind: ViolationKind,
    /// Transmissions from the initial pair to the violating pair.
    pub at_trace: Vec<TransitionLabel>,
    pub label: Option<TransitionLabel>,
    pub detail: String,
}

fn correspondence(
    g: &GlobalType,
    ctx: &TypingContext,
    session: &Session,
    depth: usize,
) -> (Vec<CorrespondenceViolation>, Vec<CorrespondenceViolation>) {
    let mut sound = Vec::new();
    let mut complete = Vec::new();
    if !check_association(g, ctx, session).holds {
        let v = CorrespondenceViolation {
            kind: ViolationKind::Precondition,
            at_trace: Vec::new(),
            label: None,
            detail: "initial pair is not associated".into(),
        };
        return (vec![v.clone()], vec![v]);
    }
    let mut seen: BTreeSet<(TypeKey, TypeKey)> = BTreeSet::new();
    let mut frontier: VecDeque<(GlobalType, TypingContext, Vec<TransitionLabel>, usize)> =
        VecDeque::new();
    frontier.push_back((g.clone(), ctx.clone(), Vec::new(), 0));
    while let Some((cur_g, cur_ctx, trace, level)) = frontier.pop_front() {
        let key = (
            cur_g.canonical_key().expect("global types stay closed"),
            cur_ctx.canonical_key(),
        );
        if !seen.insert(key) {
            continue;
        }
        let gsteps = global_steps(&cur_g, session).unwrap_or_default();
        let csteps = context_transmissions(&cur_ctx, session);
        // Soundness: each global transmission's subjects must be matched by
        // some label both sides can take together, preserving association.
        for gs in &gsteps {
            let (p, q) = gs.label.pair();
            let matched = gsteps.iter().any(|alt| {
                alt.label.pair() == (p.clone(), q.clone())
                    && csteps.iter().any(|cs| {
                        cs.label == alt.label
                            && check_association(&alt.target, &cs.target, session).holds
                    })
            });
            if !matched {
                sound.push(CorrespondenceViolation {
                    kind: ViolationKind::Soundness,
                    at_trace: trace.clone(),
                    label: Some(gs.label.clone()),
                    detail: format!(
                        "global step {} has no co-step between {p} and {q} preserving association",
                        gs.label
                    ),
                });
            }
        }
        // Completeness: each context transmission must be mirrored exactly.
        for cs in &csteps {
            let matched = gsteps
                .iter()
                .find(|gs| gs.label == cs.label)
                .filter(|gs| check_association(&gs.target, &cs.target, session).holds);
            match matched {
                Some(gs) => {
                    if level < depth {
                        let mut t = trace.clone();
                        t.push(cs.label.clone());
                        frontier.push_back((gs.target.clone(), cs.target.clone(), t, level + 1));
                    }
                }
                None => complete.push(CorrespondenceViolation {
                    kind: ViolationKind::Completeness,
                    at_trace: trace.clone(),
                    label: Some(cs.label.clone()),
                    detail: format!(
                        "context step {} is not matched by the global type with association preserved",
                        cs.label
                    ),
                }),
            }
        }
    }
    (sound, complete)
}

/// Violations of the soundness-of-association theorem on all co-reachable
/// pairs up to `depth` transmissions.
pub fn check_soundness_correspondence(
    g: &GlobalType,
    ctx: &TypingContext,
    session: &Session,
    depth: usize,
) -> Vec<CorrespondenceViolation> {
    correspondence(g, ctx, session, depth).0
}

/// Violations of the completeness-of-association theorem on all
/// co-reachable pairs up to `depth` transmissions.
pub fn check_completeness_correspondence(
    g: &GlobalType,
    ctx: &TypingContext,
    session: &Session,
    depth: usize,
) -> Vec<CorrespondenceViolation> {
    correspondence(g, ctx, session, depth).1
}

// ---------------------------------------------------------------------------
// Safety, deadlock-freedom, liveness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropertyKind {
    Safe,
    DeadlockFree,
    Live,
}

impl PropertyKind {
    pub fn name(self) -> &'static str {
        match self {
            PropertyKind::Safe => "safe",
            PropertyKind::DeadlockFree => "deadlock_free",
            PropertyKind::Live => "live",
        }
    }
}

/// A counterexample: transmissions from the input context to the violating
/// node, the pending half-action if any, and for liveness the fair cycle.
#[derive(Debug, Clone, Default)]
pub struct Witness {
    pub trace: Vec<TransitionLabel>,
    pub pending: Option<TransitionLabel>,
    pub cycle: Vec<GraphEdge>,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct PropertyVerdict {
    pub property: PropertyKind,
    pub holds: bool,
    pub witness: Option<Witness>,
}

impl PropertyVerdict {
    fn holds(property: PropertyKind) -> Self {
        PropertyVerdict {
            property,
            holds: true,
            witness: None,
        }
    }

    fn refuted(property: PropertyKind, witness: Witness) -> Self {
        PropertyVerdict {
            property,
            holds: false,
            witness: Some(witness),
        }
    }
}

fn unfolded_session_entries(
    ctx: &TypingContext,
    session: &Session,
) -> Vec<(Role, LocalType)> {
    ctx.iter()
        .filter_map(|(k, sort)| match (k, sort) {
            (ContextKey::Endpoint(s, r), Sort::Session(t)) if s == session => {
                t.unfold_once().ok().map(|u| (r.clone(), u))
            }
            _ => None,
        })
        .collect()
}

/// Safety: on every reachable context, whenever a sender's unfolded entry
/// points at a receiver whose unfolded entry expects that sender, every
/// output label must be receivable with a subtyping-compatible payload.
pub fn check_safety(
    ctx: &TypingContext,
    session: &Session,
    limit: usize,
) -> Result<PropertyVerdict, LimitExceeded> {
    let graph = reachable_contexts(ctx, session, limit)?;
    for (idx, node) in graph.nodes.iter().enumerate() {
        let entries = unfolded_session_entries(node, session);
        for (sender, sender_type) in &entries {
            let LocalType::Internal {
                peer: receiver,
                branches: outs,
            } = sender_type
            else {
                continue;
            };
            let Some((_, receiver_type)) = entries
                .iter()
                .find(|(r, _)| r == receiver)
            else {
                continue;
            };
            let LocalType::External {
                peer: back,
                branches: ins,
            } = receiver_type
            else {
                continue;
            };
            if back != sender {
                continue;
            }
            for ob in outs {
                let pending = TransitionLabel::Output {
                    session: session.clone(),
                    subject: sender.clone(),
                    peer: receiver.clone(),
                    label: ob.label.clone(),
                    payload: ob.payload.clone(),
                };
                let Some(ib) = ins.iter().find(|b| b.label == ob.label) else {
                    return Ok(PropertyVerdict::refuted(
                        PropertyKind::Safe,
                        Witness {
                            trace: graph.trace_to(idx),
                            pending: Some(pending),
                            cycle: Vec::new(),
                            detail: format!(
                                "{sender} sends {} to {receiver}, which {receiver} cannot receive",
                                ob.label
                            ),
                        },
                    ));
                };
                if !subtype(&ob.payload, &ib.payload) {
                    return Ok(PropertyVerdict::refuted(
                        PropertyKind::Safe,
                        Witness {
                            trace: graph.trace_to(idx),
                            pending: Some(pending),
                            cycle: Vec::new(),
                            detail: format!(
                                "payload of {} from {sender} to {receiver} is not a subtype ({} vs {})",
                                ob.label, ob.payload, ib.payload
                            ),
                        },
                    ));
                }
            }
        }
    }
    Ok(PropertyVerdict::holds(PropertyKind::Safe))
}

/// Deadlock-freedom: every reachable context without transmissions maps
/// every endpoint of the session to literal `end`.
pub fn check_deadlock_free(
    ctx: &TypingContext,
    session: &Session,
    limit: usize,
) -> Result<PropertyVerdict, LimitExceeded> {
    let graph = reachable_contexts(ctx, session, limit)?;
    for (idx, node) in graph.nodes.iter().enumerate() {
        if !graph.is_terminal(idx) {
            continue;
        }
        for role in node.roles_of(session) {
            let entry = node.endpoint(session, &role).unwrap();
            if *entry != Sort::Session(Box::new(LocalType::End)) {
                return Ok(PropertyVerdict::refuted(
                    PropertyKind::DeadlockFree,
                    Witness {
                        trace: graph.trace_to(idx),
                        pending: None,
                        cycle: Vec::new(),
                        detail: format!(
                            "terminal context maps {session}[{role}] to {}, not end",
                            entry
                        ),
                    },
                ));
            }
        }
    }
    Ok(PropertyVerdict::holds(PropertyKind::DeadlockFree))
}

/// The pair-obligations pending at a context: one per `(sender, receiver)`
/// pair with an enabled output or input half-action, with a representative
/// half-action label.
fn pending_obligations(
    ctx: &TypingContext,
    session: &Session,
) -> Vec<((Role, Role), TransitionLabel)> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for half in context_half_steps(ctx, session) {
        let pair = half.label.pair();
        if seen.insert(pair.clone()) {
            out.push((pair, half.label));
        }
    }
    out
}

/// Liveness under strong pair-fairness: every fair path from every
/// reachable context eventually discharges every pending half-action.
///
/// A violation is either a terminal node with a pending half-action, or a
/// pending pair-obligation at a node `n` together with a strongly connected
/// subgraph reachable from `n` that avoids the obliged pair while firing
/// every pair it enables (a fair cycle that starves the obligation).
pub fn check_live(
    ctx: &TypingContext,
    session: &Session,
    limit: usize,
) -> Result<PropertyVerdict, LimitExceeded> {
    let graph = reachable_contexts(ctx, session, limit)?;
    // Terminal violations.
    for idx in 0..graph.nodes.len() {
        if !graph.is_terminal(idx) {
            continue;
        }
        let pending = pending_obligations(&graph.nodes[idx], session);
        if let Some((_, label)) = pending.first() {
            return Ok(PropertyVerdict::refuted(
                PropertyKind::Live,
                Witness {
                    trace: graph.trace_to(idx),
                    pending: Some(label.clone()),
                    cycle: Vec::new(),
                    detail: "terminal context with a pending half-action".into(),
                },
            ));
        }
    }
    // Cycle violations.
    let full_pairs: Vec<BTreeSet<(Role, Role)>> = (0..graph.nodes.len())
        .map(|n| graph.enabled_pairs(n))
        .collect();
    for n in 0..graph.nodes.len() {
        for (pair, label) in pending_obligations(&graph.nodes[n], session) {
            if let Some(cycle) = starving_component(&graph, n, &pair, &full_pairs) {
                return Ok(PropertyVerdict::refuted(
                    PropertyKind::Live,
                    Witness {
                        trace: graph.trace_to(n),
                        pending: Some(label),
                        cycle,
                        detail: format!(
                            "fair cycle never transmits between {} and {}",
                            pair.0, pair.1
                        ),
                    },
                ));
            }
        }
    }
    Ok(PropertyVerdict::holds(PropertyKind::Live))
}

/// Searches the subgraph reachable from `start` without `(p,q)`-labelled
/// edges for a strongly connected component that, for every node it
/// contains, carries an internal edge for every pair enabled in the full
/// graph. Such a component supports an infinite fair run that keeps the
/// `(p,q)` obligation pending forever.
fn starving_component(
    graph: &ContextGraph,
    start: usize,
    avoided: &(Role, Role),
    full_pairs: &[BTreeSet<(Role, Role)>],
) -> Option<Vec<GraphEdge>> {
    // Reachable set without avoided-pair edges.
    let mut alive: BTreeSet<usize> = BTreeSet::new();
    let mut stack = vec![start];
    while let Some(at) = stack.pop() {
        if !alive.insert(at) {
            continue;
        }
        for e in graph.outgoing(at) {
            if e.label.pair() != *avoided && !alive.contains(&e.to) {
                stack.push(e.to);
            }
        }
    }
    // Iteratively prune nodes that no valid component can contain.
    loop {
        if alive.is_empty() {
            return None;
        }
        let sccs = tarjan_sccs(&alive, |n| {
            graph
                .outgoing(n)
                .filter(|e| e.label.pair() != *avoided && alive.contains(&e.to))
                .map(|e| e.to)
                .collect()
        });
        let mut removed_any = false;
        for scc in &sccs {
            let members: BTreeSet<usize> = scc.iter().copied().collect();
            let internal: Vec<&GraphEdge> = scc
                .iter()
                .flat_map(|&n| graph.outgoing(n))
                .filter(|e| e.label.pair() != *avoided && members.contains(&e.to))
                .collect();
            if internal.is_empty() {
                continue;
            }
            let labels: BTreeSet<(Role, Role)> =
                internal.iter().map(|e| e.label.pair()).collect();
            let bad: Vec<usize> = scc
                .iter()
                .copied()
                .filter(|&t| !full_pairs[t].is_subset(&labels))
                .collect();
            if bad.is_empty() {
                let mut cycle: Vec<GraphEdge> = internal.into_iter().cloned().collect();
                cycle.sort_by_key(|e| (e.from, e.label.to_string(), e.to));
                return Some(cycle);
            }
            for t in bad {
                alive.remove(&t);
                removed_any = true;
            }
        }
        if !removed_any {
            return None;
        }
    }
}

/// Iterative Tarjan over an induced subgraph.
fn tarjan_sccs<F: Fn(usize) -> Vec<usize>>(nodes: &BTreeSet<usize>, succs: F) -> Vec<Vec<usize>> {
    #[derive(Default, Clone)]
    struct NodeState {
        index: Option<usize>,
        lowlink: usize,
        on_stack: bool,
    }
    let mut state: BTreeMap<usize, NodeState> = nodes
        .iter()
        .map(|&n| (n, NodeState::default()))
        .collect();
    let mut counter = 0usize;
    let mut stack: Vec<usize> = Vec::new();
    let mut out = Vec::new();
    for &root in nodes {
        if state[&root].index.is_some() {
            continue;
        }
        // Explicit DFS stack: (node, successor list, next successor index).
        let mut dfs: Vec<(usize, Vec<usize>, usize)> = Vec::new();
        state.get_mut(&root).unwrap().index = Some(counter);
        state.get_mut(&root).unwrap().lowlink = counter;
        state.get_mut(&root).unwrap().on_stack = true;
        counter += 1;
        stack.push(root);
        dfs.push((root, succs(root), 0));
        while let Some((node, children, next)) = dfs.last_mut() {
            if *next < children.len() {
                let child = children[*next];
                *next += 1;
                let child_state = &state[&child];
                if child_state.index.is_none() {
                    state.get_mut(&child).unwrap().index = Some(counter);
                    state.get_mut(&child).unwrap().lowlink = counter;
                    state.get_mut(&child).unwrap().on_stack = true;
                    counter += 1;
                    stack.push(child);
                    dfs.push((child, succs(child), 0));
                } else if child_state.on_stack {
                    let child_index = child_state.index.unwrap();
                    let node = *node;
                    let entry = state.get_mut(&node).unwrap();
                    entry.lowlink = entry.lowlink.min(child_index);
                }
            } else {
                let node = *node;
                dfs.pop();
                let node_state = state[&node].clone();
                if node_state.lowlink == node_state.index.unwrap() {
                    let mut scc = Vec::new();
                    loop {
                        let w = stack.pop().unwrap();
                        state.get_mut(&w).unwrap().on_stack = false;
                        scc.push(w);
                        if w == node {
                            break;
                        }
                    }
                    scc.sort_unstable();
                    out.push(scc);
                }
                if let Some((parent, _, _)) = dfs.last() {
                    let parent = *parent;
                    let low = state[&node].lowlink;
                    let entry = state.get_mut(&parent).unwrap();
                    entry.lowlink = entry.lowlink.min(low);
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Top-down verification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum AnalysisError {
    Projection(Vec<(Role, ProjectionError)>),
    Limit(LimitExceeded),
}

impl std::fmt::Display for AnalysisError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AnalysisError::Projection(errs) => {
                write!(f, "projection failed:")?;
                for (role, e) in errs {
                    write!(f, " [{role}] {e}")?;
                }
                Ok(())
            }
            AnalysisError::Limit(l) => write!(f, "{l}"),
        }
    }
}

impl From<LimitExceeded> for AnalysisError {
    fn from(l: LimitExceeded) -> Self {
        AnalysisError::Limit(l)
    }
}

/// The top-down verification entry point: projects a global type, builds
/// the associated context, and checks association plus all three
/// properties.
#[derive(Debug, Clone)]
pub struct VerificationReport {
    pub context: TypingContext,
    pub association: AssociationReport,
    pub safety: PropertyVerdict,
    pub deadlock_freedom: PropertyVerdict,
    pub liveness: PropertyVerdict,
}

impl VerificationReport {
    pub fn all_hold(&self) -> bool {
        self.association.holds
            && self.safety.holds
            && self.deadlock_freedom.holds
            && self.liveness.holds
    }
}

/// Builds the canonical associated context of a global type: one endpoint
/// per role, carrying its projection.
pub fn projection_context(
    g: &GlobalType,
    session: &Session,
) -> Result<TypingContext, AnalysisError> {
    let table = project_all(g).total().map_err(AnalysisError::Projection)?;
    Ok(table
        .into_iter()
        .map(|(role, t)| {
            (
                ContextKey::Endpoint(session.clone(), role),
                Sort::session(t),
            )
        })
        .collect())
}

pub fn check_all_by_association(
    g: &GlobalType,
    session: &Session,
    limit: usize,
) -> Result<VerificationReport, AnalysisError> {
    let ctx = projection_context(g, session)?;
    let association = check_association(g, &ctx, session);
    let safety = check_safety(&ctx, session, limit)?;
    let deadlock_freedom = check_deadlock_free(&ctx, session, limit)?;
    let liveness = check_live(&ctx, session, limit)?;
    Ok(VerificationReport {
        context: ctx,
        association,
        safety,
        deadlock_freedom,
        liveness,
    })
}

/// Replays a transmission trace from a context, returning the final
/// context. Used to validate counterexample witnesses.
pub fn replay_trace(
    ctx: &TypingContext,
    trace: &[TransitionLabel],
) -> Option<TypingContext> {
    let mut cur = ctx.clone();
    for label in trace {
        let step = context_transmissions(&cur, label.session())
            .into_iter()
            .find(|s| s.label == *label)?;
        cur = step.target;
    }
    Some(cur)
}
