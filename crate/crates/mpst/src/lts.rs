//! Labelled transition semantics for global types and typing contexts, and
//! explicit-state reachability over context transmissions.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::ident::{Role, Session};
use crate::subtyping::subtype;
use crate::types::{
    ContextKey, GlobalType, IllFormed, LocalType, Sort, TransitionLabel, TypeKey, TypingContext,
};

/// One step of the global-type LTS. Labels are always transmissions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalStep {
    pub label: TransitionLabel,
    pub target: GlobalType,
}

/// One step of the typing-context LTS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextStep {
    pub label: TransitionLabel,
    pub target: TypingContext,
}

/// All transitions of a global type, per the reduction rules: communication
/// at the head, recursion unfolding, and causally independent reductions
/// under a prefix (enabled only when every branch can take the same label).
pub fn global_steps(g: &GlobalType, session: &Session) -> Result<Vec<GlobalStep>, IllFormed> {
    let mut stack = Vec::new();
    steps_rec(g, session, &BTreeSet::new(), &mut stack)
}

fn steps_rec(
    g: &GlobalType,
    session: &Session,
    forbidden: &BTreeSet<Role>,
    stack: &mut Vec<(TypeKey, BTreeSet<Role>)>,
) -> Result<Vec<GlobalStep>, IllFormed> {
    let unfolded = g.unfold_once()?;
    let GlobalType::Comm { from, to, branches } = &unfolded else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    if !forbidden.contains(from) && !forbidden.contains(to) {
        for b in branches {
            out.push(GlobalStep {
                label: TransitionLabel::Transmission {
                    session: session.clone(),
                    from: from.clone(),
                    to: to.clone(),
                    label: b.label.clone(),
                },
                target: b.cont.clone(),
            });
        }
    }
    // Reductions under the prefix: subjects must be disjoint from {from,to}
    // and every branch must take the identical label. The stack cuts cyclic
    // regress through recursive types; a repeated (type, forbidden) goal can
    // contribute no step that a shorter derivation does not already yield.
    let mut inner_forbidden = forbidden.clone();
    inner_forbidden.insert(from.clone());
    inner_forbidden.insert(to.clone());
    let key = (unfolded.canonical_key()?, inner_forbidden.clone());
    if stack.contains(&key) {
        return Ok(out);
    }
    stack.push(key);
    let per_branch: Vec<Vec<GlobalStep>> = branches
        .iter()
        .map(|b| steps_rec(&b.cont, session, &inner_forbidden, stack))
        .collect::<Result<_, _>>()?;
    stack.pop();
    for candidate in &per_branch[0] {
        let mut targets = vec![candidate.target.clone()];
        let mut all = true;
        for other in &per_branch[1..] {
            match other.iter().find(|s| s.label == candidate.label) {
                Some(step) => targets.push(step.target.clone()),
                None => {
                    all = false;
                    break;
                }
            }
        }
        if all {
            let stepped = GlobalType::Comm {
                from: from.clone(),
                to: to.clone(),
                branches: branches
                    .iter()
                    .zip(targets)
                    .map(|(b, target)| crate::types::GlobalBranch {
                        label: b.label.clone(),
                        payload: b.payload.clone(),
                        cont: target,
                    })
                    .collect(),
            };
            out.push(GlobalStep {
                label: candidate.label.clone(),
                target: stepped,
            });
        }
    }
    Ok(out)
}

fn unfold_entry(sort: &Sort) -> Option<LocalType> {
    match sort {
        Sort::Session(t) => t.unfold_once().ok(),
        Sort::Basic(_) => None,
    }
}

/// Output and input half-steps of the endpoints of `session`, with
/// recursion unfolded transparently.
pub fn context_half_steps(ctx: &TypingContext, session: &Session) -> Vec<ContextStep> {
    let mut out = Vec::new();
    for (key, sort) in ctx.iter() {
        let ContextKey::Endpoint(s, role) = key else {
            continue;
        };
        if s != session {
            continue;
        }
        let Some(unfolded) = unfold_entry(sort) else {
            continue;
        };
        match unfolded {
            LocalType::Internal { peer, branches } => {
                for b in branches {
                    let mut target = ctx.clone();
                    target.update(key.clone(), Sort::session(b.cont.clone()));
                    out.push(ContextStep {
                        label: TransitionLabel::Output {
                            session: session.clone(),
                            subject: role.clone(),
                            peer: peer.clone(),
                            label: b.label.clone(),
                            payload: b.payload.clone(),
                        },
                        target,
                    });
                }
            }
            LocalType::External { peer, branches } => {
                for b in branches {
                    let mut target = ctx.clone();
                    target.update(key.clone(), Sort::session(b.cont.clone()));
                    out.push(ContextStep {
                        label: TransitionLabel::Input {
                            session: session.clone(),
                            subject: role.clone(),
                            peer: peer.clone(),
                            label: b.label.clone(),
                            payload: b.payload.clone(),
                        },
                        target,
                    });
                }
            }
            _ => {}
        }
    }
    out
}

/// Synchronous transmissions of `session`: an output half and the matching
/// input half with subtyping-compatible payloads, both entries stepping at
/// once and everything else untouched.
pub fn context_transmissions(ctx: &TypingContext, session: &Session) -> Vec<ContextStep> {
    let mut out = Vec::new();
    let roles: Vec<Role> = ctx.roles_of(session).into_iter().collect();
    for sender in &roles {
        let sender_key = ContextKey::Endpoint(session.clone(), sender.clone());
        let Some(sender_unfolded) = ctx.get(&sender_key).and_then(unfold_entry) else {
            continue;
        };
        let LocalType::Internal {
            peer: receiver,
            branches: out_branches,
        } = sender_unfolded
        else {
            continue;
        };
        let receiver_key = ContextKey::Endpoint(session.clone(), receiver.clone());
        let Some(receiver_unfolded) = ctx.get(&receiver_key).and_then(unfold_entry) else {
            continue;
        };
        let LocalType::External {
            peer: back,
            branches: in_branches,
        } = receiver_unfolded
        else {
            continue;
        };
        if back != *sender {
            continue;
        }
        for ob in &out_branches {
            let Some(ib) = in_branches.iter().find(|b| b.label == ob.label) else {
                continue;
            };
            if !subtype(&ob.payload, &ib.payload) {
                continue;
            }
            let mut target = ctx.clone();
            target.update(sender_key.clone(), Sort::session(ob.cont.clone()));
            target.update(receiver_key.clone(), Sort::session(ib.cont.clone()));
            out.push(ContextStep {
                label: TransitionLabel::Transmission {
                    session: session.clone(),
                    from: sender.clone(),
                    to: receiver.clone(),
                    label: ob.label.clone(),
                },
                target,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("state space exceeded the limit of {0} contexts")]
pub struct LimitExceeded(pub usize);

/// An edge of the reachable-context graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphEdge {
    pub from: usize,
    pub label: TransitionLabel,
    pub to: usize,
}

/// The transmission-labelled state graph reachable from one context.
#[derive(Debug, Clone)]
pub struct ContextGraph {
    pub session: Session,
    /// Node 0 is the initial context.
    pub nodes: Vec<TypingContext>,
    pub edges: Vec<GraphEdge>,
    /// Outgoing edge indices per node.
    pub out: Vec<Vec<usize>>,
    /// BFS tree edge into each node, for witness traces.
    pub parent: Vec<Option<usize>>,
}

impl ContextGraph {
    /// Transmission labels along the BFS tree path from the root.
    pub fn trace_to(&self, node: usize) -> Vec<TransitionLabel> {
        let mut labels = Vec::new();
        let mut cur = node;
        while let Some(edge_idx) = self.parent[cur] {
            let edge = &self.edges[edge_idx];
            labels.push(edge.label.clone());
            cur = edge.from;
        }
        labels.reverse();
        labels
    }

    pub fn outgoing(&self, node: usize) -> impl Iterator<Item = &GraphEdge> {
        self.out[node].iter().map(|&i| &self.edges[i])
    }

    pub fn is_terminal(&self, node: usize) -> bool {
        self.out[node].is_empty()
    }

    /// The `(sender, receiver)` pairs with a transmission enabled at `node`.
    pub fn enabled_pairs(&self, node: usize) -> BTreeSet<(Role, Role)> {
        self.outgoing(node).map(|e| e.label.pair()).collect()
    }

    /// DOT rendering: node labels are printed contexts, edge labels are
    /// `s:p->q:l` transmissions.
    pub fn to_dot(&self) -> String {
        let escape = |s: &str| s.replace('\\', "\\\\").replace('"', "\\\"");
        let mut out = String::from("digraph contexts {\n  rankdir=LR;\n");
        for (i, node) in self.nodes.iter().enumerate() {
            out.push_str(&format!(
                "  n{i} [label=\"{}\"];\n",
                escape(&crate::surface::print_context(node))
            ));
        }
        for e in &self.edges {
            out.push_str(&format!(
                "  n{} -> n{} [label=\"{}\"];\n",
                e.from,
                e.to,
                escape(&e.label.to_string())
            ));
        }
        out.push_str("}\n");
        out
    }
}

/// Breadth-first exploration of the reachable contexts of `session`,
/// deduplicated by folded canonical form.
pub fn reachable_contexts(
    ctx: &TypingContext,
    session: &Session,
    limit: usize,
) -> Result<ContextGraph, LimitExceeded> {
    if limit == 0 {
        return Err(LimitExceeded(0));
    }
    let mut nodes = vec![ctx.clone()];
    let mut index: BTreeMap<TypeKey, usize> = BTreeMap::new();
    index.insert(ctx.canonical_key(), 0);
    let mut edges: Vec<GraphEdge> = Vec::new();
    let mut out: Vec<Vec<usize>> = vec![Vec::new()];
    let mut parent: Vec<Option<usize>> = vec![None];
    let mut frontier = VecDeque::from([0usize]);
    while let Some(at) = frontier.pop_front() {
        let steps = context_transmissions(&nodes[at].clone(), session);
        for step in steps {
            let key = step.target.canonical_key();
            let to = match index.get(&key) {
                Some(&i) => i,
                None => {
                    let i = nodes.len();
                    if i >= limit {
                        return Err(LimitExceeded(limit));
                    }
                    nodes.push(step.target.clone());
                    index.insert(key, i);
                    out.push(Vec::new());
                    parent.push(Some(edges.len()));
                    frontier.push_back(i);
                    i
                }
            };
            let edge_idx = edges.len();
            edges.push(GraphEdge {
                from: at,
                label: step.label,
                to,
            });
            out[at].push(edge_idx);
        }
    }
    Ok(ContextGraph {
        session: session.clone(),
        nodes,
        edges,
        out,
        parent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface::parse;

    fn fixture() -> crate::surface::SourceFile {
        parse(
            r#"
            global G_auth = s->c { login . c->a:passwd(str) . a->s:auth(bool) . end,
                                   cancel . c->a:quit . end }
            context Gamma_auth = {
                s[s]: c(+)cancel . end,
                s[c]: s&{ login . a(+)passwd(str) . end, cancel . a(+)quit . end, fail . a(+)fatal . end },
                s[a]: c&{ passwd(str) . s(+)auth(bool) . end, quit . end, fatal . end } }
            context Gamma_E = {
                s[p]: p'(+)l1 . end, s[p']: p&l1 . end,
                s[q]: rec t . q'(+)l2 . t, s[q']: rec t . q&l2 . t }
            "#,
        )
        .unwrap()
    }

    #[test]
    fn oauth_global_has_two_initial_steps() {
        let file = fixture();
        let g = file.global("G_auth").unwrap();
        let steps = global_steps(g, &Session::new("s")).unwrap();
        let labels: Vec<String> = steps.iter().map(|s| s.label.to_string()).collect();
        assert_eq!(labels, vec!["s:s->c:login", "s:s->c:cancel"]);
        assert!(global_steps(&GlobalType::End, &Session::new("s"))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn causally_independent_prefix_steps() {
        // p->q:l1 . r->u:l2 . end can fire r->u:l2 under the prefix
        let file = parse("global G = p->q:l1 . r->u:l2 . end").unwrap();
        let g = file.global("G").unwrap();
        let steps = global_steps(g, &Session::new("s")).unwrap();
        let ctx_step = steps
            .iter()
            .find(|s| s.label.to_string() == "s:r->u:l2")
            .expect("independent step enabled");
        let expected = parse("global G = p->q:l1 . end").unwrap();
        assert_eq!(&ctx_step.target, expected.global("G").unwrap());
    }

    #[test]
    fn auth_context_has_exactly_the_cancel_transmission() {
        let file = fixture();
        let ctx = file.context("Gamma_auth").unwrap();
        let steps = context_transmissions(ctx, &Session::new("s"));
        let labels: Vec<String> = steps.iter().map(|s| s.label.to_string()).collect();
        assert_eq!(labels, vec!["s:s->c:cancel"]);
    }

    #[test]
    fn half_steps_unfold_recursive_entries() {
        let file = fixture();
        let ctx = file.context("Gamma_E").unwrap();
        let halves = context_half_steps(ctx, &Session::new("s"));
        let q_out = halves
            .iter()
            .find(|s| s.label.to_string() == "s:q!q':l2")
            .expect("q's output half");
        // the target folds back to the same recursive entry
        assert_eq!(
            q_out.target.canonical_key(),
            ctx.canonical_key(),
        );
    }

    #[test]
    fn reachability_finds_self_loop_and_terminal() {
        let file = fixture();
        let gamma_e = file.context("Gamma_E").unwrap();
        let graph = reachable_contexts(gamma_e, &Session::new("s"), 1000).unwrap();
        // Gamma_E self-loops on q->q':l2 and steps to a second node on p->p':l1
        assert_eq!(graph.nodes.len(), 2);
        assert!(graph
            .outgoing(0)
            .any(|e| e.to == 0 && e.label.to_string() == "s:q->q':l2"));
        let auth = file.context("Gamma_auth").unwrap();
        let auth_graph = reachable_contexts(auth, &Session::new("s"), 1000).unwrap();
        assert_eq!(auth_graph.nodes.len(), 3);
        let all_end = TypingContext::endpoint_entry("s", "p", LocalType::End);
        let trivial = reachable_contexts(&all_end, &Session::new("s"), 10).unwrap();
        assert_eq!(trivial.nodes.len(), 1);
        assert!(trivial.edges.is_empty());
    }

    #[test]
    fn determinism_of_context_reduction() {
        let file = fixture();
        for name in ["Gamma_auth", "Gamma_E"] {
            let ctx = file.context(name).unwrap();
            let graph = reachable_contexts(ctx, &Session::new("s"), 1000).unwrap();
            for node in 0..graph.nodes.len() {
                let mut seen: BTreeMap<String, usize> = BTreeMap::new();
                for e in graph.outgoing(node) {
                    if let Some(&prev) = seen.get(&e.label.to_string()) {
                        assert_eq!(prev, e.to, "nondeterministic label at node {node}");
                    }
                    seen.insert(e.label.to_string(), e.to);
                }
            }
        }
    }
}
