//! The typing system for session pi-calculus processes: syntax-directed
//! type checking producing replayable derivations, the end-predicate, and
//! the guardedness / role-uniqueness side conditions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::analysis::check_association;
use crate::ident::{Label, ProcVar, Role, Session, ValVar};
use crate::picalc::{
    freshen_avoiding, Annotation, ChannelExpr, Process, ValueExpr,
};
use crate::projection::project_all;
use crate::subtyping::subtype;
use crate::surface;
use crate::types::{ContextKey, GlobalType, LocalType, Sort, TypingContext};

/// The process-variable environment: each `def`-bound variable maps to the
/// tuple of its parameter sorts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProcVarEnv {
    entries: BTreeMap<ProcVar, Vec<Sort>>,
}

impl ProcVarEnv {
    pub fn new() -> Self {
        ProcVarEnv::default()
    }

    pub fn get(&self, name: &ProcVar) -> Option<&Vec<Sort>> {
        self.entries.get(name)
    }

    pub fn extended(&self, name: ProcVar, sorts: Vec<Sort>) -> ProcVarEnv {
        let mut out = self.clone();
        out.entries.insert(name, sorts);
        out
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl fmt::Display for ProcVarEnv {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.entries.is_empty() {
            return f.write_str("{}");
        }
        let entries: Vec<String> = self
            .entries
            .iter()
            .map(|(x, sorts)| {
                let ss: Vec<String> = sorts.iter().map(surface::print_sort).collect();
                format!("{x}: ({})", ss.join(", "))
            })
            .collect();
        write!(f, "{{ {} }}", entries.join(", "))
    }
}

/// `end(Gamma)`: every entry is a basic sort or a session type below `end`.
pub fn end_predicate(ctx: &TypingContext) -> bool {
    ctx.iter().all(|(_, sort)| match sort {
        Sort::Basic(_) => true,
        Sort::Session(t) => t.is_end_like(),
    })
}

/// The judgment proved by one derivation node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Judgment {
    Process {
        theta: ProcVarEnv,
        ctx: TypingContext,
        process: Process,
    },
    Value {
        ctx: TypingContext,
        value: ValueExpr,
        sort: Sort,
    },
    ProcVarLookup {
        theta: ProcVarEnv,
        name: ProcVar,
        sorts: Vec<Sort>,
    },
    EndPredicate {
        ctx: TypingContext,
    },
}

impl fmt::Display for Judgment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Judgment::Process {
                theta,
                ctx,
                process,
            } => {
                if theta.is_empty() {
                    write!(f, "{} |- {}", surface::print_context(ctx), process)
                } else {
                    write!(
                        f,
                        "{theta}; {} |- {}",
                        surface::print_context(ctx),
                        process
                    )
                }
            }
            Judgment::Value { ctx, value, sort } => write!(
                f,
                "{} |- {} : {}",
                surface::print_context(ctx),
                surface::print_value(value),
                surface::print_sort(sort)
            ),
            Judgment::ProcVarLookup { name, sorts, .. } => {
                let ss: Vec<String> = sorts.iter().map(surface::print_sort).collect();
                write!(f, "{name} : ({})", ss.join(", "))
            }
            Judgment::EndPredicate { ctx } => write!(f, "end({})", surface::print_context(ctx)),
        }
    }
}

/// A typing derivation: a rule instance with its premises, replayable by a
/// validator that knows only the rule schemas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Derivation {
    pub rule: &'static str,
    pub conclusion: Judgment,
    pub premises: Vec<Derivation>,
}

impl Derivation {
    fn node(rule: &'static str, conclusion: Judgment, premises: Vec<Derivation>) -> Derivation {
        Derivation {
            rule,
            conclusion,
            premises,
        }
    }

    /// Indented text tree, one `rule: judgment` line per node.
    pub fn render(&self) -> String {
        let mut out = String::new();
        self.render_into(0, &mut out);
        out
    }

    fn render_into(&self, depth: usize, out: &mut String) {
        out.push_str(&"  ".repeat(depth));
        out.push_str(&format!("{}: {}\n", self.rule, self.conclusion));
        for p in &self.premises {
            p.render_into(depth + 1, out);
        }
    }

    pub fn contains_rule(&self, rule: &str) -> bool {
        self.rule == rule || self.premises.iter().any(|p| p.contains_rule(rule))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TypeErrorReason {
    UnboundChannel(ContextKey),
    LabelNotInType(Label),
    PayloadMismatch { expected: Sort, found: Sort },
    NonLinearSplit(ContextKey),
    EndDelegation,
    AssociationFailure(String),
    ArityMismatch { expected: usize, found: usize },
    ChannelShape(String),
    ResidualNotEnd(ContextKey),
    UnboundProcessVariable(ProcVar),
    SessionAlreadyPresent(Session),
    ErrorProcess,
}

impl fmt::Display for TypeErrorReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TypeErrorReason::UnboundChannel(k) => write!(f, "unbound channel or variable {k}"),
            TypeErrorReason::LabelNotInType(l) => write!(f, "label {l} not offered by the type"),
            TypeErrorReason::PayloadMismatch { expected, found } => write!(
                f,
                "payload sort {} is not a subtype of {}",
                surface::print_sort(found),
                surface::print_sort(expected)
            ),
            TypeErrorReason::NonLinearSplit(k) => {
                write!(f, "channel {k} is used by both sides of a parallel")
            }
            TypeErrorReason::EndDelegation => write!(f, "cannot send an end-typed channel"),
            TypeErrorReason::AssociationFailure(m) => write!(f, "association failure: {m}"),
            TypeErrorReason::ArityMismatch { expected, found } => {
                write!(f, "expected {expected} arguments, found {found}")
            }
            TypeErrorReason::ChannelShape(m) => write!(f, "channel type mismatch: {m}"),
            TypeErrorReason::ResidualNotEnd(k) => {
                write!(f, "leftover entry {k} is not end-typed")
            }
            TypeErrorReason::UnboundProcessVariable(x) => {
                write!(f, "unbound process variable {x}")
            }
            TypeErrorReason::SessionAlreadyPresent(s) => {
                write!(f, "session {s} already occurs in the context")
            }
            TypeErrorReason::ErrorProcess => write!(f, "the error process is untypable"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("type error [{rule}] at {position}: {reason}")]
pub struct TypeError {
    pub rule: &'static str,
    pub position: String,
    pub reason: TypeErrorReason,
}

fn err(rule: &'static str, position: &str, reason: TypeErrorReason) -> TypeError {
    TypeError {
        rule,
        position: position.to_string(),
        reason,
    }
}

/// The context keys a process uses freely: channels it communicates on,
/// variables and endpoints it sends or passes.
pub fn used_keys(p: &Process) -> BTreeSet<ContextKey> {
    fn chan_key(c: &ChannelExpr) -> ContextKey {
        match c {
            ChannelExpr::Var(x) => ContextKey::Var(x.clone()),
            ChannelExpr::Endpoint(s, r) => ContextKey::Endpoint(s.clone(), r.clone()),
        }
    }
    fn value_key(v: &ValueExpr) -> Option<ContextKey> {
        match v {
            ValueExpr::Var(x) => Some(ContextKey::Var(x.clone())),
            ValueExpr::Endpoint(s, r) => Some(ContextKey::Endpoint(s.clone(), r.clone())),
            ValueExpr::Lit(_) => None,
        }
    }
    fn go(p: &Process, bound_vars: &mut Vec<ValVar>, bound_sessions: &mut Vec<Session>, out: &mut BTreeSet<ContextKey>) {
        let visible = |k: ContextKey,
                       bound_vars: &[ValVar],
                       bound_sessions: &[Session],
                       out: &mut BTreeSet<ContextKey>| {
            match &k {
                ContextKey::Var(x) if bound_vars.contains(x) => {}
                ContextKey::Endpoint(s, _) if bound_sessions.contains(s) => {}
                _ => {
                    out.insert(k);
                }
            }
        };
        match p {
            Process::Inaction | Process::Error => {}
            Process::Restriction { session, body, .. } => {
                bound_sessions.push(session.clone());
                go(body, bound_vars, bound_sessions, out);
                bound_sessions.pop();
            }
            Process::Select {
                channel,
                payload,
                cont,
                ..
            } => {
                visible(chan_key(channel), bound_vars, bound_sessions, out);
                if let Some(k) = value_key(payload) {
                    visible(k, bound_vars, bound_sessions, out);
                }
                go(cont, bound_vars, bound_sessions, out);
            }
            Process::Branch {
                channel, branches, ..
            } => {
                visible(chan_key(channel), bound_vars, bound_sessions, out);
                for b in branches {
                    bound_vars.push(b.binder.clone());
                    go(&b.cont, bound_vars, bound_sessions, out);
                    bound_vars.pop();
                }
            }
            Process::Def {
                params,
                body,
                scope,
                ..
            } => {
                let n = params.len();
                for (x, _) in params {
                    bound_vars.push(x.clone());
                }
                go(body, bound_vars, bound_sessions, out);
                for _ in 0..n {
                    bound_vars.pop();
                }
                go(scope, bound_vars, bound_sessions, out);
            }
            Process::Call { args, .. } => {
                for a in args {
                    if let Some(k) = value_key(a) {
                        visible(k, bound_vars, bound_sessions, out);
                    }
                }
            }
            Process::Par(l, r) => {
                go(l, bound_vars, bound_sessions, out);
                go(r, bound_vars, bound_sessions, out);
            }
        }
    }
    let mut out = BTreeSet::new();
    go(p, &mut Vec::new(), &mut Vec::new(), &mut out);
    out
}

/// Syntax-directed type reconstruction. Subsumption is folded into channel
/// lookup and payload checks; the result replays under the rule schemas.
pub fn typecheck(
    theta: &ProcVarEnv,
    ctx: &TypingContext,
    p: &Process,
) -> Result<Derivation, TypeError> {
    let mut avoid: BTreeSet<String> = BTreeSet::new();
    for key in ctx.keys() {
        match key {
            ContextKey::Endpoint(s, _) => {
                avoid.insert(s.as_str().to_string());
            }
            ContextKey::Var(x) => {
                avoid.insert(x.as_str().to_string());
            }
        }
    }
    let fresh = freshen_avoiding(p, &avoid);
    check_process(theta, ctx.clone(), &fresh, "root")
}

fn end_derivation(ctx: &TypingContext, rule: &'static str, position: &str) -> Result<Derivation, TypeError> {
    for (k, sort) in ctx.iter() {
        let ok = match sort {
            Sort::Basic(_) => true,
            Sort::Session(t) => t.is_end_like(),
        };
        if !ok {
            return Err(err(rule, position, TypeErrorReason::ResidualNotEnd(k.clone())));
        }
    }
    Ok(Derivation::node(
        "T-end",
        Judgment::EndPredicate { ctx: ctx.clone() },
        Vec::new(),
    ))
}

/// Types a value, consuming its context entry when it is a variable or an
/// endpoint. Returns the minimal sort, the consumed key, and the premise.
fn type_value(
    ctx: &TypingContext,
    v: &ValueExpr,
    rule: &'static str,
    position: &str,
) -> Result<(Sort, Option<ContextKey>, Derivation), TypeError> {
    match v {
        ValueExpr::Lit(l) => {
            let sort = Sort::Basic(l.sort());
            Ok((
                sort.clone(),
                None,
                Derivation::node(
                    "T-B",
                    Judgment::Value {
                        ctx: TypingContext::new(),
                        value: v.clone(),
                        sort,
                    },
                    Vec::new(),
                ),
            ))
        }
        ValueExpr::Var(x) => {
            let key = ContextKey::Var(x.clone());
            let sort = ctx
                .get(&key)
                .cloned()
                .ok_or_else(|| err(rule, position, TypeErrorReason::UnboundChannel(key.clone())))?;
            Ok((
                sort.clone(),
                Some(key.clone()),
                Derivation::node(
                    "T-sub",
                    Judgment::Value {
                        ctx: TypingContext::singleton(key, sort.clone()),
                        value: v.clone(),
                        sort,
                    },
                    Vec::new(),
                ),
            ))
        }
        ValueExpr::Endpoint(s, r) => {
            let key = ContextKey::Endpoint(s.clone(), r.clone());
            let sort = ctx
                .get(&key)
                .cloned()
                .ok_or_else(|| err(rule, position, TypeErrorReason::UnboundChannel(key.clone())))?;
            Ok((
                sort.clone(),
                Some(key.clone()),
                Derivation::node(
                    "T-sub",
                    Judgment::Value {
                        ctx: TypingContext::singleton(key, sort.clone()),
                        value: v.clone(),
                        sort,
                    },
                    Vec::new(),
                ),
            ))
        }
    }
}

fn channel_key(c: &ChannelExpr) -> ContextKey {
    match c {
        ChannelExpr::Var(x) => ContextKey::Var(x.clone()),
        ChannelExpr::Endpoint(s, r) => ContextKey::Endpoint(s.clone(), r.clone()),
    }
}

fn lookup_channel(
    ctx: &TypingContext,
    c: &ChannelExpr,
    rule: &'static str,
    position: &str,
) -> Result<(ContextKey, LocalType), TypeError> {
    let key = channel_key(c);
    let sort = ctx
        .get(&key)
        .ok_or_else(|| err(rule, position, TypeErrorReason::UnboundChannel(key.clone())))?;
    match sort {
        Sort::Session(t) => {
            let unfolded = t.unfold_once().map_err(|e| {
                err(rule, position, TypeErrorReason::ChannelShape(e.to_string()))
            })?;
            Ok((key, unfolded))
        }
        Sort::Basic(b) => Err(err(
            rule,
            position,
            TypeErrorReason::ChannelShape(format!("{key} has basic sort {}", b.name())),
        )),
    }
}

fn is_end_session(sort: &Sort) -> bool {
    matches!(sort, Sort::Session(t) if t.is_end_like())
}

fn check_process(
    theta: &ProcVarEnv,
    ctx: TypingContext,
    p: &Process,
    position: &str,
) -> Result<Derivation, TypeError> {
    match p {
        Process::Inaction => {
            let end = end_derivation(&ctx, "T-0", position)?;
            Ok(Derivation::node(
                "T-0",
                Judgment::Process {
                    theta: theta.clone(),
                    ctx,
                    process: p.clone(),
                },
                vec![end],
            ))
        }
        Process::Error => Err(err("T-0", position, TypeErrorReason::ErrorProcess)),
        Process::Par(l, r) => {
            let used_l = used_keys(l);
            let used_r = used_keys(r);
            if let Some(k) = used_l.intersection(&used_r).next() {
                return Err(err(
                    "T-par",
                    position,
                    TypeErrorReason::NonLinearSplit(k.clone()),
                ));
            }
            let mut left = TypingContext::new();
            let mut right = TypingContext::new();
            for (k, sort) in ctx.iter() {
                if used_l.contains(k) {
                    left.update(k.clone(), sort.clone());
                } else if used_r.contains(k) {
                    right.update(k.clone(), sort.clone());
                } else {
                    // entries used by neither side must already be end-typed
                    let ok = match sort {
                        Sort::Basic(_) => true,
                        Sort::Session(t) => t.is_end_like(),
                    };
                    if !ok {
                        return Err(err(
                            "T-par",
                            position,
                            TypeErrorReason::ResidualNotEnd(k.clone()),
                        ));
                    }
                    left.update(k.clone(), sort.clone());
                }
            }
            let dl = check_process(theta, left, l, &format!("{position}.par.L"))?;
            let dr = check_process(theta, right, r, &format!("{position}.par.R"))?;
            Ok(Derivation::node(
                "T-par",
                Judgment::Process {
                    theta: theta.clone(),
                    ctx,
                    process: p.clone(),
                },
                vec![dl, dr],
            ))
        }
        Process::Select {
            channel,
            to,
            label,
            payload,
            cont,
        } => {
            let pos = format!("{position}.sel({label})");
            let (ckey, unfolded) = lookup_channel(&ctx, channel, "T-(+)", &pos)?;
            let LocalType::Internal { peer, branches } = unfolded else {
                return Err(err(
                    "T-(+)",
                    &pos,
                    TypeErrorReason::ChannelShape(format!(
                        "expected an internal choice toward {to}, found {}",
                        surface::print_local(&unfolded)
                    )),
                ));
            };
            if peer != *to {
                return Err(err(
                    "T-(+)",
                    &pos,
                    TypeErrorReason::ChannelShape(format!(
                        "channel sends to {peer}, process selects toward {to}"
                    )),
                ));
            }
            let branch = branches
                .iter()
                .find(|b| b.label == *label)
                .ok_or_else(|| err("T-(+)", &pos, TypeErrorReason::LabelNotInType(label.clone())))?;
            let mut remaining = ctx.clone();
            remaining.remove(&ckey);
            let (payload_sort, consumed, payload_deriv) =
                type_value(&remaining, payload, "T-(+)", &pos)?;
            if !subtype(&payload_sort, &branch.payload) {
                return Err(err(
                    "T-(+)",
                    &pos,
                    TypeErrorReason::PayloadMismatch {
                        expected: branch.payload.clone(),
                        found: payload_sort,
                    },
                ));
            }
            if is_end_session(&payload_sort) {
                return Err(err("T-(+)", &pos, TypeErrorReason::EndDelegation));
            }
            if let Some(k) = &consumed {
                remaining.remove(k);
            }
            remaining.update(ckey.clone(), Sort::session(branch.cont.clone()));
            let channel_deriv = Derivation::node(
                "T-sub",
                Judgment::Value {
                    ctx: TypingContext::singleton(ckey, ctx.get(&channel_key(channel)).unwrap().clone()),
                    value: channel.to_value(),
                    sort: Sort::session(LocalType::Internal {
                        peer,
                        branches: vec![branch.clone()],
                    }),
                },
                Vec::new(),
            );
            let cont_deriv = check_process(theta, remaining, cont, &pos)?;
            Ok(Derivation::node(
                "T-(+)",
                Judgment::Process {
                    theta: theta.clone(),
                    ctx,
                    process: p.clone(),
                },
                vec![channel_deriv, payload_deriv, cont_deriv],
            ))
        }
        Process::Branch {
            channel,
            from,
            branches,
        } => {
            let pos = format!("{position}.bra");
            let (ckey, unfolded) = lookup_channel(&ctx, channel, "T-&", &pos)?;
            let LocalType::External {
                peer,
                branches: tbranches,
            } = unfolded
            else {
                return Err(err(
                    "T-&",
                    &pos,
                    TypeErrorReason::ChannelShape(format!(
                        "expected an external choice from {from}, found {}",
                        surface::print_local(&unfolded)
                    )),
                ));
            };
            if peer != *from {
                return Err(err(
                    "T-&",
                    &pos,
                    TypeErrorReason::ChannelShape(format!(
                        "channel receives from {peer}, process branches on {from}"
                    )),
                ));
            }
            let channel_deriv = Derivation::node(
                "T-sub",
                Judgment::Value {
                    ctx: TypingContext::singleton(
                        ckey.clone(),
                        ctx.get(&channel_key(channel)).unwrap().clone(),
                    ),
                    value: channel.to_value(),
                    sort: Sort::session(LocalType::External {
                        peer: peer.clone(),
                        branches: tbranches.clone(),
                    }),
                },
                Vec::new(),
            );
            let mut premises = vec![channel_deriv];
            // The type's branches must be a subset of the process's; each
            // continuation is checked with the payload binder in scope.
            for tb in &tbranches {
                let pb = branches
                    .iter()
                    .find(|b| b.label == tb.label)
                    .ok_or_else(|| {
                        err("T-&", &pos, TypeErrorReason::LabelNotInType(tb.label.clone()))
                    })?;
                let mut inner = ctx.clone();
                inner.remove(&ckey);
                inner.update(ContextKey::Var(pb.binder.clone()), tb.payload.clone());
                inner.update(ckey.clone(), Sort::session(tb.cont.clone()));
                premises.push(check_process(
                    theta,
                    inner,
                    &pb.cont,
                    &format!("{pos}({})", tb.label),
                )?);
            }
            Ok(Derivation::node(
                "T-&",
                Judgment::Process {
                    theta: theta.clone(),
                    ctx,
                    process: p.clone(),
                },
                premises,
            ))
        }
        Process::Def {
            name,
            params,
            body,
            scope,
        } => {
            let pos = format!("{position}.def({name})");
            let mut body_ctx = TypingContext::new();
            for (x, sort) in params {
                if body_ctx
                    .insert(ContextKey::Var(x.clone()), sort.clone())
                    .is_err()
                {
                    return Err(err(
                        "T-def",
                        &pos,
                        TypeErrorReason::NonLinearSplit(ContextKey::Var(x.clone())),
                    ));
                }
            }
            let sorts: Vec<Sort> = params.iter().map(|(_, s)| s.clone()).collect();
            let inner_theta = theta.extended(name.clone(), sorts);
            let body_deriv =
                check_process(&inner_theta, body_ctx, body, &format!("{pos}.body"))?;
            let scope_deriv =
                check_process(&inner_theta, ctx.clone(), scope, &format!("{pos}.in"))?;
            Ok(Derivation::node(
                "T-def",
                Judgment::Process {
                    theta: theta.clone(),
                    ctx,
                    process: p.clone(),
                },
                vec![body_deriv, scope_deriv],
            ))
        }
        Process::Call { name, args } => {
            let pos = format!("{position}.call({name})");
            let sorts = theta.get(name).cloned().ok_or_else(|| {
                err(
                    "T-call",
                    &pos,
                    TypeErrorReason::UnboundProcessVariable(name.clone()),
                )
            })?;
            if sorts.len() != args.len() {
                return Err(err(
                    "T-call",
                    &pos,
                    TypeErrorReason::ArityMismatch {
                        expected: sorts.len(),
                        found: args.len(),
                    },
                ));
            }
            let lookup = Derivation::node(
                "T-X",
                Judgment::ProcVarLookup {
                    theta: theta.clone(),
                    name: name.clone(),
                    sorts: sorts.clone(),
                },
                Vec::new(),
            );
            let mut premises = vec![lookup];
            let mut remaining = ctx.clone();
            for (arg, expected) in args.iter().zip(sorts.iter()) {
                let (sort, consumed, deriv) = type_value(&remaining, arg, "T-call", &pos)?;
                if !subtype(&sort, expected) {
                    return Err(err(
                        "T-call",
                        &pos,
                        TypeErrorReason::PayloadMismatch {
                            expected: expected.clone(),
                            found: sort,
                        },
                    ));
                }
                if is_end_session(expected) {
                    return Err(err("T-call", &pos, TypeErrorReason::EndDelegation));
                }
                if let Some(k) = consumed {
                    remaining.remove(&k);
                }
                premises.push(deriv);
            }
            premises.push(end_derivation(&remaining, "T-call", &pos)?);
            Ok(Derivation::node(
                "T-call",
                Judgment::Process {
                    theta: theta.clone(),
                    ctx,
                    process: p.clone(),
                },
                premises,
            ))
        }
        Process::Restriction {
            session,
            annotation,
            body,
        } => {
            let pos = format!("{position}.new({session})");
            if ctx.sessions().contains(session) {
                return Err(err(
                    "T-G-nu",
                    &pos,
                    TypeErrorReason::SessionAlreadyPresent(session.clone()),
                ));
            }
            let extension = match annotation {
                Annotation::Global(g) => {
                    let table = project_all(g).total().map_err(|errs| {
                        let msgs: Vec<String> =
                            errs.iter().map(|(r, e)| format!("[{r}] {e}")).collect();
                        err(
                            "T-G-nu",
                            &pos,
                            TypeErrorReason::AssociationFailure(msgs.join("; ")),
                        )
                    })?;
                    table
                        .into_iter()
                        .map(|(role, t)| {
                            (
                                ContextKey::Endpoint(session.clone(), role),
                                Sort::session(t),
                            )
                        })
                        .collect::<TypingContext>()
                }
                Annotation::Paired(g, c) => {
                    let report = check_association(g, c, session);
                    if !report.holds {
                        return Err(err(
                            "T-G-nu",
                            &pos,
                            TypeErrorReason::AssociationFailure(
                                report.failure.unwrap_or_else(|| "association refuted".into()),
                            ),
                        ));
                    }
                    c.clone()
                }
                Annotation::Context(c) => {
                    // Without a global-type witness the only discharge of the
                    // association premise is the trivial one for `end`.
                    let report = check_association(&GlobalType::End, c, session);
                    if !report.holds {
                        return Err(err(
                            "T-G-nu",
                            &pos,
                            TypeErrorReason::AssociationFailure(
                                "a bare context annotation must be all-end; use `with` to name its global type"
                                    .into(),
                            ),
                        ));
                    }
                    c.clone()
                }
            };
            let composed = ctx.compose(&extension).map_err(|clash| {
                err("T-G-nu", &pos, TypeErrorReason::NonLinearSplit(clash.0))
            })?;
            let body_deriv = check_process(theta, composed, body, &pos)?;
            Ok(Derivation::node(
                "T-G-nu",
                Judgment::Process {
                    theta: theta.clone(),
                    ctx,
                    process: p.clone(),
                },
                vec![body_deriv],
            ))
        }
    }
}

// ---------------------------------------------------------------------------
// Independent derivation replay
// ---------------------------------------------------------------------------

/// Re-checks a derivation against the rule schemas alone, without running
/// the reconstruction algorithm.
pub fn validate_derivation(d: &Derivation) -> Result<(), String> {
    for premise in &d.premises {
        validate_derivation(premise)?;
    }
    let fail = |msg: String| Err(format!("{}: {msg}", d.rule));
    match (d.rule, &d.conclusion) {
        ("T-end", Judgment::EndPredicate { ctx }) => {
            if end_predicate(ctx) {
                Ok(())
            } else {
                fail("context is not end-typed".into())
            }
        }
        ("T-B", Judgment::Value { ctx, value, sort }) => {
            if !ctx.is_empty() {
                return fail("basic values are typed in the empty context".into());
            }
            match value {
                ValueExpr::Lit(l) if Sort::Basic(l.sort()) == *sort => Ok(()),
                _ => fail("literal sort mismatch".into()),
            }
        }
        ("T-sub", Judgment::Value { ctx, value, sort }) => {
            let key = match value {
                ValueExpr::Var(x) => ContextKey::Var(x.clone()),
                ValueExpr::Endpoint(s, r) => ContextKey::Endpoint(s.clone(), r.clone()),
                ValueExpr::Lit(_) => return fail("T-sub types variables and channels".into()),
            };
            if ctx.len() != 1 {
                return fail("T-sub uses a singleton context".into());
            }
            match ctx.get(&key) {
                Some(entry) if subtype(entry, sort) => Ok(()),
                Some(_) => fail("entry is not a subtype of the ascribed sort".into()),
                None => fail("context does not bind the subject".into()),
            }
        }
        ("T-X", Judgment::ProcVarLookup { theta, name, sorts }) => match theta.get(name) {
            Some(declared) if declared == sorts => Ok(()),
            _ => fail("process variable lookup disagrees with the environment".into()),
        },
        (
            "T-0",
            Judgment::Process {
                ctx,
                process: Process::Inaction,
                ..
            },
        ) => match d.premises.as_slice() {
            [Derivation {
                rule: "T-end",
                conclusion: Judgment::EndPredicate { ctx: end_ctx },
                ..
            }] if end_ctx == ctx => Ok(()),
            _ => fail("T-0 requires end(ctx)".into()),
        },
        (
            "T-par",
            Judgment::Process {
                theta,
                ctx,
                process: Process::Par(l, r),
            },
        ) => {
            let [dl, dr] = d.premises.as_slice() else {
                return fail("T-par has two premises".into());
            };
            let (Judgment::Process { theta: tl, ctx: cl, process: pl },
                 Judgment::Process { theta: tr, ctx: cr, process: pr }) =
                (&dl.conclusion, &dr.conclusion)
            else {
                return fail("T-par premises are process judgments".into());
            };
            if tl != theta || tr != theta {
                return fail("premise environments differ".into());
            }
            if pl != l.as_ref() || pr != r.as_ref() {
                return fail("premise subjects are not the components".into());
            }
            match cl.compose(cr) {
                Ok(joined) if joined == *ctx => Ok(()),
                Ok(_) => fail("context split does not recompose".into()),
                Err(_) => fail("premise contexts overlap".into()),
            }
        }
        (
            "T-(+)",
            Judgment::Process {
                theta,
                ctx,
                process:
                    Process::Select {
                        channel,
                        to,
                        label,
                        payload,
                        cont,
                    },
            },
        ) => {
            let [chan_d, pay_d, cont_d] = d.premises.as_slice() else {
                return fail("T-(+) has three premises".into());
            };
            let Judgment::Value {
                ctx: chan_ctx,
                value: chan_v,
                sort: Sort::Session(shape),
            } = &chan_d.conclusion
            else {
                return fail("first premise ascribes the channel".into());
            };
            if *chan_v != channel.to_value() {
                return fail("channel premise subject mismatch".into());
            }
            let LocalType::Internal { peer, branches } = shape.as_ref() else {
                return fail("channel must be ascribed an internal choice".into());
            };
            let [branch] = branches.as_slice() else {
                return fail("ascription fixes one branch".into());
            };
            if peer != to || branch.label != *label {
                return fail("ascription disagrees with the select".into());
            }
            let Judgment::Value {
                ctx: pay_ctx,
                value: pay_v,
                sort: pay_sort,
            } = &pay_d.conclusion
            else {
                return fail("second premise types the payload".into());
            };
            if pay_v != payload {
                return fail("payload premise subject mismatch".into());
            }
            if !subtype(pay_sort, &branch.payload) {
                return fail("payload sort exceeds the branch payload".into());
            }
            if is_end_session(pay_sort) {
                return fail("end-typed delegation".into());
            }
            let Judgment::Process {
                theta: ct,
                ctx: cont_ctx,
                process: cont_p,
            } = &cont_d.conclusion
            else {
                return fail("third premise types the continuation".into());
            };
            if ct != theta || cont_p != cont.as_ref() {
                return fail("continuation premise mismatch".into());
            }
            let ckey = channel_key(channel);
            match cont_ctx.get(&ckey) {
                Some(Sort::Session(t)) if **t == branch.cont => {}
                _ => return fail("continuation context does not advance the channel".into()),
            }
            // ctx = chan_ctx . pay_ctx . (cont_ctx with the channel removed)
            let mut rest = cont_ctx.clone();
            rest.remove(&ckey);
            let rebuilt = chan_ctx
                .compose(pay_ctx)
                .and_then(|c| c.compose(&rest));
            match rebuilt {
                Ok(joined) if joined == *ctx => Ok(()),
                _ => fail("context split does not recompose".into()),
            }
        }
        (
            "T-&",
            Judgment::Process {
                theta,
                ctx,
                process:
                    Process::Branch {
                        channel,
                        from,
                        branches,
                    },
            },
        ) => {
            let Some((chan_d, rest)) = d.premises.split_first() else {
                return fail("T-& has a channel premise".into());
            };
            let Judgment::Value {
                ctx: chan_ctx,
                value: chan_v,
                sort: Sort::Session(shape),
            } = &chan_d.conclusion
            else {
                return fail("first premise ascribes the channel".into());
            };
            if *chan_v != channel.to_value() {
                return fail("channel premise subject mismatch".into());
            }
            let LocalType::External {
                peer,
                branches: tbranches,
            } = shape.as_ref()
            else {
                return fail("channel must be ascribed an external choice".into());
            };
            if peer != from {
                return fail("ascription disagrees with the branch".into());
            }
            if rest.len() != tbranches.len() {
                return fail("one premise per type branch".into());
            }
            let ckey = channel_key(channel);
            let mut base = ctx.clone();
            let Some(entry) = base.remove(&ckey) else {
                return fail("context does not bind the channel".into());
            };
            if chan_ctx.len() != 1 || chan_ctx.get(&ckey) != Some(&entry) {
                return fail("channel premise context mismatch".into());
            }
            for (tb, prem) in tbranches.iter().zip(rest) {
                let Some(pb) = branches.iter().find(|b| b.label == tb.label) else {
                    return fail(format!("process lacks branch {}", tb.label));
                };
                let Judgment::Process {
                    theta: pt,
                    ctx: pctx,
                    process: pp,
                } = &prem.conclusion
                else {
                    return fail("branch premise is a process judgment".into());
                };
                if pt != theta || pp != &pb.cont {
                    return fail("branch premise subject mismatch".into());
                }
                let mut expected = base.clone();
                expected.update(ContextKey::Var(pb.binder.clone()), tb.payload.clone());
                expected.update(ckey.clone(), Sort::session(tb.cont.clone()));
                if *pctx != expected {
                    return fail(format!("branch {} premise context mismatch", tb.label));
                }
            }
            Ok(())
        }
        (
            "T-def",
            Judgment::Process {
                theta,
                ctx,
                process:
                    Process::Def {
                        name,
                        params,
                        body,
                        scope,
                    },
            },
        ) => {
            let [body_d, scope_d] = d.premises.as_slice() else {
                return fail("T-def has two premises".into());
            };
            let sorts: Vec<Sort> = params.iter().map(|(_, s)| s.clone()).collect();
            let extended = theta.extended(name.clone(), sorts);
            let Judgment::Process {
                theta: bt,
                ctx: bctx,
                process: bp,
            } = &body_d.conclusion
            else {
                return fail("body premise is a process judgment".into());
            };
            let mut param_ctx = TypingContext::new();
            for (x, s) in params {
                if param_ctx.insert(ContextKey::Var(x.clone()), s.clone()).is_err() {
                    return fail("duplicate parameter".into());
                }
            }
            if bt != &extended || bp != body.as_ref() || *bctx != param_ctx {
                return fail("body premise mismatch".into());
            }
            let Judgment::Process {
                theta: st,
                ctx: sctx,
                process: sp,
            } = &scope_d.conclusion
            else {
                return fail("scope premise is a process judgment".into());
            };
            if st != &extended || sp != scope.as_ref() || sctx != ctx {
                return fail("scope premise mismatch".into());
            }
            Ok(())
        }
        (
            "T-call",
            Judgment::Process {
                theta,
                ctx,
                process: Process::Call { name, args },
            },
        ) => {
            let Some((lookup, rest)) = d.premises.split_first() else {
                return fail("T-call premises missing".into());
            };
            let Judgment::ProcVarLookup {
                theta: lt,
                name: ln,
                sorts,
            } = &lookup.conclusion
            else {
                return fail("first premise is the variable lookup".into());
            };
            if lt != theta || ln != name {
                return fail("lookup premise mismatch".into());
            }
            if sorts.len() != args.len() || rest.len() != args.len() + 1 {
                return fail("arity mismatch".into());
            }
            let (end_d, arg_ds) = rest.split_last().unwrap();
            let mut consumed = TypingContext::new();
            for ((arg, expected), prem) in args.iter().zip(sorts).zip(arg_ds) {
                let Judgment::Value {
                    ctx: actx,
                    value: av,
                    sort: asort,
                } = &prem.conclusion
                else {
                    return fail("argument premise is a value judgment".into());
                };
                if av != arg {
                    return fail("argument premise subject mismatch".into());
                }
                if !subtype(asort, expected) {
                    return fail("argument sort exceeds the declared sort".into());
                }
                if is_end_session(expected) {
                    return fail("end-typed session argument".into());
                }
                consumed = consumed
                    .compose(actx)
                    .map_err(|_| format!("{}: argument contexts overlap", d.rule))?;
            }
            let Judgment::EndPredicate { ctx: leftover } = &end_d.conclusion else {
                return fail("last premise is the end-predicate".into());
            };
            match consumed.compose(leftover) {
                Ok(joined) if joined == *ctx => Ok(()),
                _ => fail("context split does not recompose".into()),
            }
        }
        (
            "T-G-nu",
            Judgment::Process {
                theta,
                ctx,
                process:
                    Process::Restriction {
                        session,
                        annotation,
                        body,
                    },
            },
        ) => {
            if ctx.sessions().contains(session) {
                return fail("restricted session already in the context".into());
            }
            let [body_d] = d.premises.as_slice() else {
                return fail("T-G-nu has one premise".into());
            };
            let Judgment::Process {
                theta: bt,
                ctx: bctx,
                process: bp,
            } = &body_d.conclusion
            else {
                return fail("premise is a process judgment".into());
            };
            if bt != theta || bp != body.as_ref() {
                return fail("premise mismatch".into());
            }
            // the premise context must be ctx . extension with the extension
            // associated with the annotation's global type
            let mut extension = TypingContext::new();
            for (k, sort) in bctx.iter() {
                match ctx.get(k) {
                    Some(existing) if existing == sort => {}
                    Some(_) => return fail("premise rebinds an outer entry".into()),
                    None => extension.update(k.clone(), sort.clone()),
                }
            }
            if extension.len() + ctx.len() != bctx.len() {
                return fail("premise drops outer entries".into());
            }
            let witness = match annotation {
                Annotation::Global(g) | Annotation::Paired(g, _) => g.clone(),
                Annotation::Context(_) => GlobalType::End,
            };
            if check_association(&witness, &extension, session).holds {
                Ok(())
            } else {
                fail("annotation context is not associated with its global type".into())
            }
        }
        _ => fail("malformed rule instance".into()),
    }
}

// ---------------------------------------------------------------------------
// Guardedness and role uniqueness
// ---------------------------------------------------------------------------

/// True iff every recursive call on a session-typed definition parameter
/// occurs under an input or output prefix on that parameter.
pub fn guarded_definitions(p: &Process) -> bool {
    fn walk(p: &Process, tracked: &BTreeMap<ValVar, bool>) -> bool {
        match p {
            Process::Inaction | Process::Error => true,
            Process::Restriction { body, .. } => walk(body, tracked),
            Process::Select { channel, cont, .. } => {
                let mut inner = tracked.clone();
                if let ChannelExpr::Var(x) = channel {
                    if let Some(flag) = inner.get_mut(x) {
                        *flag = true;
                    }
                }
                walk(cont, &inner)
            }
            Process::Branch {
                channel, branches, ..
            } => branches.iter().all(|b| {
                let mut inner = tracked.clone();
                if let ChannelExpr::Var(x) = channel {
                    if let Some(flag) = inner.get_mut(x) {
                        *flag = true;
                    }
                }
                inner.remove(&b.binder);
                walk(&b.cont, &inner)
            }),
            Process::Def {
                params,
                body,
                scope,
                ..
            } => {
                let mut inner = tracked.clone();
                for (x, sort) in params {
                    if matches!(sort, Sort::Session(_)) {
                        inner.insert(x.clone(), false);
                    } else {
                        inner.remove(x);
                    }
                }
                walk(body, &inner) && walk(scope, tracked)
            }
            Process::Call { args, .. } => args.iter().all(|a| match a {
                ValueExpr::Var(x) => tracked.get(x).copied().unwrap_or(true),
                _ => true,
            }),
            Process::Par(l, r) => walk(l, tracked) && walk(r, tracked),
        }
    }
    walk(&crate::picalc::freshen(p), &BTreeMap::new())
}

/// Conditions for "`p` only plays `role` in `session`, by `ctx`": guarded
/// definitions, no free variables, a single non-end endpoint for the role
/// with end-typed leftovers, and end-only nested restriction annotations.
pub fn only_plays(p: &Process, role: &Role, session: &Session, ctx: &TypingContext) -> bool {
    if !guarded_definitions(p) {
        return false;
    }
    if !p.free_vars().is_empty() {
        return false;
    }
    let key = ContextKey::Endpoint(session.clone(), role.clone());
    let Some(Sort::Session(t)) = ctx.get(&key) else {
        return false;
    };
    if t.is_end_like() {
        return false;
    }
    let mut rest = ctx.clone();
    rest.remove(&key);
    if !end_predicate(&rest) {
        return false;
    }
    nested_annotations_end(p)
}

fn nested_annotations_end(p: &Process) -> bool {
    match p {
        Process::Inaction | Process::Error | Process::Call { .. } => true,
        Process::Restriction {
            annotation, body, ..
        } => {
            let ann_end = match annotation {
                Annotation::Context(c) | Annotation::Paired(_, c) => end_predicate(c),
                Annotation::Global(g) => match project_all(g).total() {
                    Ok(table) => table.values().all(|t| t.is_end_like()),
                    Err(_) => false,
                },
            };
            ann_end && nested_annotations_end(body)
        }
        Process::Select { cont, .. } => nested_annotations_end(cont),
        Process::Branch { branches, .. } => {
            branches.iter().all(|b| nested_annotations_end(&b.cont))
        }
        Process::Def { body, scope, .. } => {
            nested_annotations_end(body) && nested_annotations_end(scope)
        }
        Process::Par(l, r) => nested_annotations_end(l) && nested_annotations_end(r),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface::parse;

    fn file() -> crate::surface::SourceFile {
        parse(
            r#"
            global G_H = p->q:m1(<p(+)m(int) . end>) . r->p:m(int) . end
            context Gamma_H = { s[p]: q(+)m1(<p(+)m(int) . end>) . r&m(int) . end,
                                s[q]: p&m1(<p(+)m(int) . end>) . end,
                                s[r]: p(+)m(int) . end }
            process P = s[p][q](+)m1<s[r]> . s[p][r]&m(x) . 0
            process Q = s[q][p]&m1(x) . x[p](+)m<42> . 0
            process System = new s : G_H in P | Q
            "#,
        )
        .unwrap()
    }

    #[test]
    fn end_predicate_examples() {
        let f = parse("context C = { x: int, s[p]: end }").unwrap();
        assert!(end_predicate(f.context("C").unwrap()));
        assert!(end_predicate(&TypingContext::new()));
        let f2 = parse("context C = { s[p]: q(+)l . end }").unwrap();
        assert!(!end_predicate(f2.context("C").unwrap()));
    }

    #[test]
    fn types_delegation_example() {
        let f = file();
        let ctx = f.context("Gamma_H").unwrap();
        let p = Process::par(
            f.process("P").unwrap().clone(),
            f.process("Q").unwrap().clone(),
        );
        let deriv = typecheck(&ProcVarEnv::new(), ctx, &p).expect("P | Q is well-typed");
        assert_eq!(deriv.rule, "T-par");
        for rule in ["T-(+)", "T-&", "T-0", "T-end", "T-sub"] {
            assert!(deriv.contains_rule(rule), "missing {rule}");
        }
        validate_derivation(&deriv).expect("derivation replays");
    }

    #[test]
    fn types_closed_system_via_restriction() {
        let f = file();
        let system = f.process("System").unwrap();
        let deriv = typecheck(&ProcVarEnv::new(), &TypingContext::new(), system)
            .expect("closed system accepted via T-G-nu");
        assert_eq!(deriv.rule, "T-G-nu");
        validate_derivation(&deriv).expect("derivation replays");
    }

    #[test]
    fn rejects_end_delegation() {
        let f = parse(
            "context C = { s[p]: q(+)l(<end>) . end, s[q]: end }\nprocess P = s[p][q](+)l<s[q]> . 0",
        )
        .unwrap();
        let e = typecheck(&ProcVarEnv::new(), f.context("C").unwrap(), f.process("P").unwrap())
            .unwrap_err();
        assert!(matches!(e.reason, TypeErrorReason::EndDelegation));
    }

    #[test]
    fn rejects_nonlinear_use() {
        let f = parse(
            "context C = { s[p]: q(+)l . end }\nprocess P = s[p][q](+)l . 0 | s[p][q](+)l . 0",
        )
        .unwrap();
        let e = typecheck(&ProcVarEnv::new(), f.context("C").unwrap(), f.process("P").unwrap())
            .unwrap_err();
        assert!(matches!(e.reason, TypeErrorReason::NonLinearSplit(_)));
    }

    #[test]
    fn guardedness_examples() {
        let f = parse(
            r#"
            local T = q(+)l(int) . end
            process Guarded = def X(x: <rec t . q(+)l(int) . t>) = x[q](+)l<1> . X(x) in X(s[p])
            process Unguarded = def X(x: <q(+)l . end>) = X(x) in X(s[p])
            "#,
        )
        .unwrap();
        assert!(guarded_definitions(f.process("Guarded").unwrap()));
        assert!(!guarded_definitions(f.process("Unguarded").unwrap()));
        assert!(guarded_definitions(&Process::Inaction));
    }

    #[test]
    fn only_plays_distinguishes_roles() {
        let f = file();
        let s = Session::new("s");
        let q_ctx = {
            let ctx = f.context("Gamma_H").unwrap();
            let key = ContextKey::Endpoint(s.clone(), Role::new("q"));
            TypingContext::singleton(key.clone(), ctx.get(&key).unwrap().clone())
        };
        assert!(only_plays(f.process("Q").unwrap(), &Role::new("q"), &s, &q_ctx));
        // P holds two non-end endpoints, so it plays two roles
        let ctx = f.context("Gamma_H").unwrap();
        let mut p_ctx = TypingContext::new();
        for r in ["p", "r"] {
            let key = ContextKey::Endpoint(s.clone(), Role::new(r));
            p_ctx.update(key.clone(), ctx.get(&key).unwrap().clone());
        }
        assert!(!only_plays(f.process("P").unwrap(), &Role::new("p"), &s, &p_ctx));
    }
}
