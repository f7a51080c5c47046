//! The multiparty session pi-calculus: process syntax, structural
//! congruence normalization, reduction semantics, and a seeded executor.

use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ident::{Label, ProcVar, Role, Session, ValVar};
use crate::surface;
use crate::types::{GlobalType, Sort, TypingContext};

/// A basic runtime value.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Literal {
    Int(i64),
    Bool(bool),
    Str(String),
    Unit,
}

impl Literal {
    pub fn sort(&self) -> crate::types::BasicSort {
        use crate::types::BasicSort;
        match self {
            Literal::Int(_) => BasicSort::Int,
            Literal::Bool(_) => BasicSort::Bool,
            Literal::Str(_) => BasicSort::Str,
            Literal::Unit => BasicSort::Unit,
        }
    }
}

/// A message payload or call argument.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ValueExpr {
    Lit(Literal),
    Var(ValVar),
    Endpoint(Session, Role),
}

/// A communication subject: a variable or a session endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ChannelExpr {
    Var(ValVar),
    Endpoint(Session, Role),
}

impl ChannelExpr {
    pub fn to_value(&self) -> ValueExpr {
        match self {
            ChannelExpr::Var(x) => ValueExpr::Var(x.clone()),
            ChannelExpr::Endpoint(s, r) => ValueExpr::Endpoint(s.clone(), r.clone()),
        }
    }
}

/// Type annotation on a session restriction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Annotation {
    Global(GlobalType),
    Context(TypingContext),
    Paired(GlobalType, TypingContext),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProcBranch {
    pub label: Label,
    pub binder: ValVar,
    pub cont: Process,
}

/// Process syntax of the multiparty session pi-calculus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Process {
    Inaction,
    Restriction {
        session: Session,
        annotation: Annotation,
        body: Box<Process>,
    },
    Select {
        channel: ChannelExpr,
        to: Role,
        label: Label,
        payload: ValueExpr,
        cont: Box<Process>,
    },
    Branch {
        channel: ChannelExpr,
        from: Role,
        branches: Vec<ProcBranch>,
    },
    Def {
        name: ProcVar,
        params: Vec<(ValVar, Sort)>,
        body: Box<Process>,
        scope: Box<Process>,
    },
    Call {
        name: ProcVar,
        args: Vec<ValueExpr>,
    },
    Par(Box<Process>, Box<Process>),
    Error,
}

impl Process {
    pub fn par(left: Process, right: Process) -> Process {
        Process::Par(Box::new(left), Box::new(right))
    }

    pub fn select(
        channel: ChannelExpr,
        to: impl Into<Role>,
        label: impl Into<Label>,
        payload: ValueExpr,
        cont: Process,
    ) -> Process {
        Process::Select {
            channel,
            to: to.into(),
            label: label.into(),
            payload,
            cont: Box::new(cont),
        }
    }

    /// Free value variables.
    pub fn free_vars(&self) -> BTreeSet<ValVar> {
        fn chan(c: &ChannelExpr, bound: &[ValVar], out: &mut BTreeSet<ValVar>) {
            if let ChannelExpr::Var(x) = c {
                if !bound.contains(x) {
                    out.insert(x.clone());
                }
            }
        }
        fn value(v: &ValueExpr, bound: &[ValVar], out: &mut BTreeSet<ValVar>) {
            if let ValueExpr::Var(x) = v {
                if !bound.contains(x) {
                    out.insert(x.clone());
                }
            }
        }
        fn go(p: &Process, bound: &mut Vec<ValVar>, out: &mut BTreeSet<ValVar>) {
            match p {
                Process::Inaction | Process::Error => {}
                Process::Restriction { body, .. } => go(body, bound, out),
                Process::Select {
                    channel,
                    payload,
                    cont,
                    ..
                } => {
                    chan(channel, bound, out);
                    value(payload, bound, out);
                    go(cont, bound, out);
                }
                Process::Branch {
                    channel, branches, ..
                } => {
                    chan(channel, bound, out);
                    for b in branches {
                        bound.push(b.binder.clone());
                        go(&b.cont, bound, out);
                        bound.pop();
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
                        bound.push(x.clone());
                    }
                    go(body, bound, out);
                    for _ in 0..n {
                        bound.pop();
                    }
                    go(scope, bound, out);
                }
                Process::Call { args, .. } => {
                    for a in args {
                        value(a, bound, out);
                    }
                }
                Process::Par(l, r) => {
                    go(l, bound, out);
                    go(r, bound, out);
                }
            }
        }
        let mut out = BTreeSet::new();
        go(self, &mut Vec::new(), &mut out);
        out
    }

    /// Free sessions: sessions of free channels with roles, including
    /// sessions mentioned by restriction annotations.
    pub fn free_sessions(&self) -> BTreeSet<Session> {
        fn ann_sessions(a: &Annotation, out: &mut BTreeSet<Session>) {
            match a {
                Annotation::Global(_) => {}
                Annotation::Context(c) | Annotation::Paired(_, c) => {
                    out.extend(c.sessions());
                }
            }
        }
        fn go(p: &Process, bound: &mut Vec<Session>, out: &mut BTreeSet<Session>) {
            let chan = |c: &ChannelExpr, bound: &Vec<Session>, out: &mut BTreeSet<Session>| {
                if let ChannelExpr::Endpoint(s, _) = c {
                    if !bound.contains(s) {
                        out.insert(s.clone());
                    }
                }
            };
            match p {
                Process::Inaction | Process::Error => {}
                Process::Restriction {
                    session,
                    annotation,
                    body,
                } => {
                    let mut inner = BTreeSet::new();
                    ann_sessions(annotation, &mut inner);
                    bound.push(session.clone());
                    go(body, bound, &mut inner);
                    bound.pop();
                    for s in inner {
                        if s != *session && !bound.contains(&s) {
                            out.insert(s);
                        }
                    }
                }
                Process::Select {
                    channel,
                    payload,
                    cont,
                    ..
                } => {
                    chan(channel, bound, out);
                    if let ValueExpr::Endpoint(s, _) = payload {
                        if !bound.contains(s) {
                            out.insert(s.clone());
                        }
                    }
                    go(cont, bound, out);
                }
                Process::Branch {
                    channel, branches, ..
                } => {
                    chan(channel, bound, out);
                    for b in branches {
                        go(&b.cont, bound, out);
                    }
                }
                Process::Def { body, scope, .. } => {
                    go(body, bound, out);
                    go(scope, bound, out);
                }
                Process::Call { args, .. } => {
                    for a in args {
                        if let ValueExpr::Endpoint(s, _) = a {
                            if !bound.contains(s) {
                                out.insert(s.clone());
                            }
                        }
                    }
                }
                Process::Par(l, r) => {
                    go(l, bound, out);
                    go(r, bound, out);
                }
            }
        }
        let mut out = BTreeSet::new();
        go(self, &mut Vec::new(), &mut out);
        out
    }

    pub fn is_closed(&self) -> bool {
        self.free_vars().is_empty()
    }
}

/// Substitution of a value for a variable. Fails with a dynamic fault when a
/// basic value lands in channel position.
pub fn subst_value(p: &Process, var: &ValVar, w: &ValueExpr) -> Result<Process, DynamicFault> {
    fn chan(c: &ChannelExpr, var: &ValVar, w: &ValueExpr) -> Result<ChannelExpr, DynamicFault> {
        match c {
            ChannelExpr::Var(x) if x == var => match w {
                ValueExpr::Endpoint(s, r) => Ok(ChannelExpr::Endpoint(s.clone(), r.clone())),
                ValueExpr::Var(y) => Ok(ChannelExpr::Var(y.clone())),
                ValueExpr::Lit(l) => Err(DynamicFault(format!(
                    "basic value {} used in channel position",
                    surface::print_value(&ValueExpr::Lit(l.clone()))
                ))),
            },
            other => Ok(other.clone()),
        }
    }
    fn value(v: &ValueExpr, var: &ValVar, w: &ValueExpr) -> ValueExpr {
        match v {
            ValueExpr::Var(x) if x == var => w.clone(),
            other => other.clone(),
        }
    }
    // Binders are assumed fresh (Barendregt convention via `freshen`), so no
    // capture checks are needed here.
    Ok(match p {
        Process::Inaction => Process::Inaction,
        Process::Error => Process::Error,
        Process::Restriction {
            session,
            annotation,
            body,
        } => Process::Restriction {
            session: session.clone(),
            annotation: annotation.clone(),
            body: Box::new(subst_value(body, var, w)?),
        },
        Process::Select {
            channel,
            to,
            label,
            payload,
            cont,
        } => Process::Select {
            channel: chan(channel, var, w)?,
            to: to.clone(),
            label: label.clone(),
            payload: value(payload, var, w),
            cont: Box::new(subst_value(cont, var, w)?),
        },
        Process::Branch {
            channel,
            from,
            branches,
        } => Process::Branch {
            channel: chan(channel, var, w)?,
            from: from.clone(),
            branches: branches
                .iter()
                .map(|b| {
                    Ok(ProcBranch {
                        label: b.label.clone(),
                        binder: b.binder.clone(),
                        cont: if b.binder == *var {
                            b.cont.clone()
                        } else {
                            subst_value(&b.cont, var, w)?
                        },
                    })
                })
                .collect::<Result<_, DynamicFault>>()?,
        },
        Process::Def {
            name,
            params,
            body,
            scope,
        } => {
            let shadowed = params.iter().any(|(x, _)| x == var);
            Process::Def {
                name: name.clone(),
                params: params.clone(),
                body: Box::new(if shadowed {
                    body.as_ref().clone()
                } else {
                    subst_value(body, var, w)?
                }),
                scope: Box::new(subst_value(scope, var, w)?),
            }
        }
        Process::Call { name, args } => Process::Call {
            name: name.clone(),
            args: args.iter().map(|a| value(a, var, w)).collect(),
        },
        Process::Par(l, r) => Process::Par(
            Box::new(subst_value(l, var, w)?),
            Box::new(subst_value(r, var, w)?),
        ),
    })
}

/// An untyped process misused a value at runtime. Distinct from the
/// calculus `err` process, which is reserved for label mismatches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DynamicFault(pub String);

/// Barendregt freshening: renames bound sessions, process variables, and
/// value binders so they are pairwise distinct and distinct from free names.
pub fn freshen(p: &Process) -> Process {
    freshen_avoiding(p, &BTreeSet::new())
}

/// Freshening that additionally avoids a caller-supplied name pool, e.g.
/// the keys of a typing context.
pub fn freshen_avoiding(p: &Process, avoid: &BTreeSet<String>) -> Process {
    let mut supply = NameSupply {
        used: avoid.clone(),
    };
    for s in p.free_sessions() {
        supply.used.insert(s.as_str().to_string());
    }
    for x in p.free_vars() {
        supply.used.insert(x.as_str().to_string());
    }
    freshen_with(p, &mut supply, &Renaming::default())
}

#[derive(Default)]
pub struct NameSupply {
    used: BTreeSet<String>,
}

impl NameSupply {
    pub fn from_process(p: &Process) -> NameSupply {
        let mut used = BTreeSet::new();
        collect_names(p, &mut used);
        NameSupply { used }
    }

    pub fn fresh(&mut self, base: &str) -> String {
        if self.used.insert(base.to_string()) {
            return base.to_string();
        }
        let root = base.split('\'').next().unwrap_or(base);
        let mut i = 1u32;
        loop {
            let candidate = format!("{root}'{i}");
            if self.used.insert(candidate.clone()) {
                return candidate;
            }
            i += 1;
        }
    }
}

fn collect_names(p: &Process, out: &mut BTreeSet<String>) {
    let chan = |c: &ChannelExpr, out: &mut BTreeSet<String>| match c {
        ChannelExpr::Var(x) => {
            out.insert(x.as_str().to_string());
        }
        ChannelExpr::Endpoint(s, _) => {
            out.insert(s.as_str().to_string());
        }
    };
    let val = |v: &ValueExpr, out: &mut BTreeSet<String>| match v {
        ValueExpr::Var(x) => {
            out.insert(x.as_str().to_string());
        }
        ValueExpr::Endpoint(s, _) => {
            out.insert(s.as_str().to_string());
        }
        ValueExpr::Lit(_) => {}
    };
    match p {
        Process::Inaction | Process::Error => {}
        Process::Restriction { session, body, .. } => {
            out.insert(session.as_str().to_string());
            collect_names(body, out);
        }
        Process::Select {
            channel,
            payload,
            cont,
            ..
        } => {
            chan(channel, out);
            val(payload, out);
            collect_names(cont, out);
        }
        Process::Branch {
            channel, branches, ..
        } => {
            chan(channel, out);
            for b in branches {
                out.insert(b.binder.as_str().to_string());
                collect_names(&b.cont, out);
            }
        }
        Process::Def {
            name,
            params,
            body,
            scope,
        } => {
            out.insert(name.as_str().to_string());
            for (x, _) in params {
                out.insert(x.as_str().to_string());
            }
            collect_names(body, out);
            collect_names(scope, out);
        }
        Process::Call { name, args } => {
            out.insert(name.as_str().to_string());
            for a in args {
                val(a, out);
            }
        }
        Process::Par(l, r) => {
            collect_names(l, out);
            collect_names(r, out);
        }
    }
}

#[derive(Default, Clone)]
struct Renaming {
    sessions: Vec<(Session, Session)>,
    vars: Vec<(ValVar, ValVar)>,
    procs: Vec<(ProcVar, ProcVar)>,
}

impl Renaming {
    fn session(&self, s: &Session) -> Session {
        self.sessions
            .iter()
            .rev()
            .find(|(a, _)| a == s)
            .map(|(_, b)| b.clone())
            .unwrap_or_else(|| s.clone())
    }
    fn var(&self, x: &ValVar) -> ValVar {
        self.vars
            .iter()
            .rev()
            .find(|(a, _)| a == x)
            .map(|(_, b)| b.clone())
            .unwrap_or_else(|| x.clone())
    }
    fn proc(&self, x: &ProcVar) -> ProcVar {
        self.procs
            .iter()
            .rev()
            .find(|(a, _)| a == x)
            .map(|(_, b)| b.clone())
            .unwrap_or_else(|| x.clone())
    }
}

fn rename_channel(c: &ChannelExpr, map: &Renaming) -> ChannelExpr {
    match c {
        ChannelExpr::Var(x) => ChannelExpr::Var(map.var(x)),
        ChannelExpr::Endpoint(s, r) => ChannelExpr::Endpoint(map.session(s), r.clone()),
    }
}

fn rename_value(v: &ValueExpr, map: &Renaming) -> ValueExpr {
    match v {
        ValueExpr::Lit(l) => ValueExpr::Lit(l.clone()),
        ValueExpr::Var(x) => ValueExpr::Var(map.var(x)),
        ValueExpr::Endpoint(s, r) => ValueExpr::Endpoint(map.session(s), r.clone()),
    }
}

fn rename_annotation(a: &Annotation, session: &Session, renamed: &Session) -> Annotation {
    // Context annotations name their own session explicitly; keep them in
    // sync with the (possibly renamed) binder.
    let fix = |ctx: &TypingContext| -> TypingContext {
        ctx.iter()
            .map(|(k, v)| {
                let k = match k {
                    crate::types::ContextKey::Endpoint(s, r) if s == session => {
                        crate::types::ContextKey::Endpoint(renamed.clone(), r.clone())
                    }
                    other => other.clone(),
                };
                (k, v.clone())
            })
            .collect()
    };
    match a {
        Annotation::Global(g) => Annotation::Global(g.clone()),
        Annotation::Context(c) => Annotation::Context(fix(c)),
        Annotation::Paired(g, c) => Annotation::Paired(g.clone(), fix(c)),
    }
}

fn freshen_with(p: &Process, supply: &mut NameSupply, map: &Renaming) -> Process {
    match p {
        Process::Inaction => Process::Inaction,
        Process::Error => Process::Error,
        Process::Restriction {
            session,
            annotation,
            body,
        } => {
            let fresh = Session::new(supply.fresh(session.as_str()));
            let mut inner = map.clone();
            inner.sessions.push((session.clone(), fresh.clone()));
            Process::Restriction {
                annotation: rename_annotation(annotation, session, &fresh),
                session: fresh,
                body: Box::new(freshen_with(body, supply, &inner)),
            }
        }
        Process::Select {
            channel,
            to,
            label,
            payload,
            cont,
        } => Process::Select {
            channel: rename_channel(channel, map),
            to: to.clone(),
            label: label.clone(),
            payload: rename_value(payload, map),
            cont: Box::new(freshen_with(cont, supply, map)),
        },
        Process::Branch {
            channel,
            from,
            branches,
        } => Process::Branch {
            channel: rename_channel(channel, map),
            from: from.clone(),
            branches: branches
                .iter()
                .map(|b| {
                    let fresh = ValVar::new(supply.fresh(b.binder.as_str()));
                    let mut inner = map.clone();
                    inner.vars.push((b.binder.clone(), fresh.clone()));
                    ProcBranch {
                        label: b.label.clone(),
                        binder: fresh,
                        cont: freshen_with(&b.cont, supply, &inner),
                    }
                })
                .collect(),
        },
        Process::Def {
            name,
            params,
            body,
            scope,
        } => {
            let fresh_name = ProcVar::new(supply.fresh(name.as_str()));
            let mut def_map = map.clone();
            def_map.procs.push((name.clone(), fresh_name.clone()));
            let mut body_map = def_map.clone();
            let params: Vec<(ValVar, Sort)> = params
                .iter()
                .map(|(x, s)| {
                    let fresh = ValVar::new(supply.fresh(x.as_str()));
                    body_map.vars.push((x.clone(), fresh.clone()));
                    (fresh, s.clone())
                })
                .collect();
            Process::Def {
                name: fresh_name,
                params,
                body: Box::new(freshen_with(body, supply, &body_map)),
                scope: Box::new(freshen_with(scope, supply, &def_map)),
            }
        }
        Process::Call { name, args } => Process::Call {
            name: map.proc(name),
            args: args.iter().map(|a| rename_value(a, map)).collect(),
        },
        Process::Par(l, r) => Process::Par(
            Box::new(freshen_with(l, supply, map)),
            Box::new(freshen_with(r, supply, map)),
        ),
    }
}

/// A process definition hoisted to the top of a normal form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DefBinding {
    pub name: ProcVar,
    pub params: Vec<(ValVar, Sort)>,
    pub body: Process,
}

/// Structural-congruence normal form: restrictions outermost, then
/// definitions, then a flat multiset of threads.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NormalForm {
    pub restrictions: Vec<(Session, Annotation)>,
    pub defs: Vec<DefBinding>,
    pub threads: Vec<Process>,
}

impl NormalForm {
    pub fn is_nil(&self) -> bool {
        self.threads.is_empty()
    }
}

/// Normalizes a process by the structural congruence rules: parallel
/// flattening, inaction elimination, scope floating, and garbage collection
/// of empty restrictions and definitions.
pub fn normalize(p: &Process) -> NormalForm {
    let fresh = freshen(p);
    let mut nf = NormalForm::default();
    flatten(fresh, &mut nf);
    prune(&mut nf);
    nf
}

fn flatten(p: Process, nf: &mut NormalForm) {
    match p {
        Process::Inaction => {}
        Process::Par(l, r) => {
            flatten(*l, nf);
            flatten(*r, nf);
        }
        Process::Restriction {
            session,
            annotation,
            body,
        } => {
            nf.restrictions.push((session, annotation));
            flatten(*body, nf);
        }
        Process::Def {
            name,
            params,
            body,
            scope,
        } => {
            nf.defs.push(DefBinding {
                name,
                params,
                body: *body,
            });
            flatten(*scope, nf);
        }
        thread => nf.threads.push(thread),
    }
}

fn prune(nf: &mut NormalForm) {
    if nf.threads.is_empty() {
        // nu s . 0 == 0 and def D in 0 == 0
        nf.restrictions.clear();
        nf.defs.clear();
        return;
    }
    // Drop restrictions whose session occurs nowhere in the remaining body.
    let mut used: BTreeSet<Session> = BTreeSet::new();
    for t in &nf.threads {
        used.extend(t.free_sessions());
    }
    for d in &nf.defs {
        used.extend(d.body.free_sessions());
    }
    for (_, ann) in &nf.restrictions {
        if let Annotation::Context(c) | Annotation::Paired(_, c) = ann {
            used.extend(c.sessions());
        }
    }
    nf.restrictions.retain(|(s, _)| used.contains(s));
}

/// Rebuilds a process from a normal form.
pub fn denormalize(nf: &NormalForm) -> Process {
    let mut body = if nf.threads.is_empty() {
        Process::Inaction
    } else {
        let mut it = nf.threads.iter().cloned();
        let first = it.next().unwrap();
        it.fold(first, Process::par)
    };
    for d in nf.defs.iter().rev() {
        body = Process::Def {
            name: d.name.clone(),
            params: d.params.clone(),
            body: Box::new(d.body.clone()),
            scope: Box::new(body),
        };
    }
    for (s, ann) in nf.restrictions.iter().rev() {
        body = Process::Restriction {
            session: s.clone(),
            annotation: ann.clone(),
            body: Box::new(body),
        };
    }
    body
}

/// One reduction performed on a normal form.
#[derive(Debug, Clone)]
pub struct Step {
    /// Fired rule: `R-comm`, `R-err`, or `R-call`.
    pub rule: &'static str,
    /// Human-readable description, e.g. `s:c->a:quit`.
    pub label: String,
    /// Indices of the threads consumed by the step.
    pub consumed: Vec<usize>,
    /// Successor, or the dynamic fault that prevented substitution.
    pub next: Result<NormalForm, DynamicFault>,
    /// Mapping from surviving old thread indices to new indices.
    pub survivors: Vec<(usize, usize)>,
}

/// All one-step successors of a normal form, in deterministic order.
pub fn steps(nf: &NormalForm) -> Vec<Step> {
    let mut out = Vec::new();
    // R-comm / R-err over ordered (branch, select) thread pairs.
    for (bi, bt) in nf.threads.iter().enumerate() {
        let Process::Branch {
            channel: ChannelExpr::Endpoint(bs, bp),
            from: bq,
            branches,
        } = bt
        else {
            continue;
        };
        for (si, st) in nf.threads.iter().enumerate() {
            if si == bi {
                continue;
            }
            let Process::Select {
                channel: ChannelExpr::Endpoint(ss, sq),
                to: sp,
                label,
                payload,
                cont,
            } = st
            else {
                continue;
            };
            // branch at s[p] from q | select at s[q] to p
            if bs != ss || sq != bq || sp != bp {
                continue;
            }
            if let Some(b) = branches.iter().find(|b| b.label == *label) {
                let substituted = subst_value(&b.cont, &b.binder, payload);
                let (next, survivors) = match substituted {
                    Ok(body) => {
                        let (nf2, survivors) =
                            rebuild(nf, &[(bi, body), (si, cont.as_ref().clone())]);
                        (Ok(nf2), survivors)
                    }
                    Err(fault) => (Err(fault), Vec::new()),
                };
                out.push(Step {
                    rule: "R-comm",
                    label: format!("{bs}:{sq}->{bp}:{label}"),
                    consumed: vec![bi, si],
                    next,
                    survivors,
                });
            } else {
                let (next, survivors) =
                    rebuild_with_replacement(nf, &[bi, si], vec![Process::Error]);
                out.push(Step {
                    rule: "R-err",
                    label: format!("{bs}:{sq}->{bp}:{label} (label mismatch)"),
                    consumed: vec![bi, si],
                    next: Ok(next),
                    survivors,
                });
            }
        }
    }
    // R-call
    for (ci, ct) in nf.threads.iter().enumerate() {
        let Process::Call { name, args } = ct else {
            continue;
        };
        let Some(def) = nf.defs.iter().find(|d| d.name == *name) else {
            continue;
        };
        if def.params.len() != args.len() {
            continue;
        }
        let mut supply = supply_of(nf);
        let fresh_body = freshen_with(&def.body, &mut supply, &Renaming::default());
        let mut expanded = Ok(fresh_body);
        for ((x, _), a) in def.params.iter().zip(args.iter()) {
            expanded = expanded.and_then(|b| subst_value(&b, x, a));
        }
        let (next, survivors) = match expanded {
            Ok(body) => {
                let (nf2, survivors) = rebuild(nf, &[(ci, body)]);
                (Ok(nf2), survivors)
            }
            Err(fault) => (Err(fault), Vec::new()),
        };
        out.push(Step {
            rule: "R-call",
            label: format!("{name}(..)"),
            consumed: vec![ci],
            next,
            survivors,
        });
    }
    out
}

fn supply_of(nf: &NormalForm) -> NameSupply {
    let mut used = BTreeSet::new();
    for t in &nf.threads {
        collect_names(t, &mut used);
    }
    for d in &nf.defs {
        used.insert(d.name.as_str().to_string());
        for (x, _) in &d.params {
            used.insert(x.as_str().to_string());
        }
        collect_names(&d.body, &mut used);
    }
    for (s, _) in &nf.restrictions {
        used.insert(s.as_str().to_string());
    }
    NameSupply { used }
}

/// Replaces the threads at the given indices with replacement processes
/// (flattened), keeping everything else.
fn rebuild(nf: &NormalForm, replacements: &[(usize, Process)]) -> (NormalForm, Vec<(usize, usize)>) {
    let mut next = NormalForm {
        restrictions: nf.restrictions.clone(),
        defs: nf.defs.clone(),
        threads: Vec::new(),
    };
    let mut survivors = Vec::new();
    for (i, t) in nf.threads.iter().enumerate() {
        if let Some((_, rep)) = replacements.iter().find(|(j, _)| *j == i) {
            flatten(rep.clone(), &mut next);
        } else {
            survivors.push((i, next.threads.len()));
            next.threads.push(t.clone());
        }
    }
    prune(&mut next);
    (next, survivors)
}

fn rebuild_with_replacement(
    nf: &NormalForm,
    consumed: &[usize],
    additions: Vec<Process>,
) -> (NormalForm, Vec<(usize, usize)>) {
    let mut next = NormalForm {
        restrictions: nf.restrictions.clone(),
        defs: nf.defs.clone(),
        threads: Vec::new(),
    };
    let mut survivors = Vec::new();
    for (i, t) in nf.threads.iter().enumerate() {
        if !consumed.contains(&i) {
            survivors.push((i, next.threads.len()));
            next.threads.push(t.clone());
        }
    }
    for a in additions {
        flatten(a, &mut next);
    }
    prune(&mut next);
    (next, survivors)
}

fn rebuild_survivors(nf: &NormalForm, consumed: &[usize]) -> Vec<(usize, usize)> {
    let mut survivors = Vec::new();
    let mut next_idx = 0usize;
    for i in 0..nf.threads.len() {
        if !consumed.contains(&i) {
            survivors.push((i, next_idx));
            next_idx += 1;
        }
    }
    survivors
}

/// All one-step successors up to structural congruence.
pub fn reduce_steps(p: &Process) -> Vec<Process> {
    let nf = normalize(p);
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for step in steps(&nf) {
        if let Ok(next) = step.next {
            let key = canonical_print(&next);
            if seen.insert(key) {
                out.push(denormalize(&next));
            }
        }
    }
    out
}

/// True iff `err` occurs in reduction-context position.
pub fn has_error(p: &Process) -> bool {
    normalize(p)
        .threads
        .iter()
        .any(|t| matches!(t, Process::Error))
}

/// Alpha-insensitive canonical rendering of a normal form, used for state
/// deduplication and equivalence checks.
pub fn canonical_print(nf: &NormalForm) -> String {
    let mut map = Renaming::default();
    for (i, (s, _)) in nf.restrictions.iter().enumerate() {
        map.sessions.push((s.clone(), Session::new(format!("#s{i}"))));
    }
    for (i, d) in nf.defs.iter().enumerate() {
        map.procs.push((d.name.clone(), ProcVar::new(format!("#X{i}"))));
    }
    let mut out = String::new();
    for (i, (s, ann)) in nf.restrictions.iter().enumerate() {
        let renamed = rename_annotation(ann, s, &Session::new(format!("#s{i}")));
        out.push_str(&format!("nu #s{i}:{};", print_annotation_canonical(&renamed, &map)));
    }
    for d in &nf.defs {
        let mut body_map = map.clone();
        let mut counter = 0usize;
        let mut params = Vec::new();
        for (x, sort) in &d.params {
            let fresh = ValVar::new(format!("#v{counter}"));
            counter += 1;
            body_map.vars.push((x.clone(), fresh.clone()));
            params.push(format!("{fresh}:{}", surface::print_sort(sort)));
        }
        out.push_str(&format!(
            "def {}({})={};",
            map.proc(&d.name),
            params.join(","),
            canon_thread(&d.body, &body_map, &mut counter)
        ));
    }
    let mut rendered: Vec<String> = nf
        .threads
        .iter()
        .map(|t| {
            let mut counter = 0usize;
            canon_thread(t, &map, &mut counter)
        })
        .collect();
    rendered.sort();
    out.push_str(&rendered.join("|"));
    out
}

fn print_annotation_canonical(a: &Annotation, map: &Renaming) -> String {
    // Annotations contain no bound process names besides sessions, which the
    // renaming map already covers via rename_annotation.
    let _ = map;
    match a {
        Annotation::Global(g) => surface::print_global(g),
        Annotation::Context(c) => surface::print_context(c),
        Annotation::Paired(g, c) => {
            format!("{} with {}", surface::print_global(g), surface::print_context(c))
        }
    }
}

fn canon_thread(p: &Process, map: &Renaming, counter: &mut usize) -> String {
    match p {
        Process::Inaction => "0".to_string(),
        Process::Error => "err".to_string(),
        Process::Restriction {
            session,
            annotation,
            body,
        } => {
            let fresh = Session::new(format!("#r{counter}"));
            *counter += 1;
            let mut inner = map.clone();
            inner.sessions.push((session.clone(), fresh.clone()));
            let ann = rename_annotation(annotation, session, &fresh);
            format!(
                "new {fresh}:{} in {}",
                print_annotation_canonical(&ann, &inner),
                canon_thread(body, &inner, counter)
            )
        }
        Process::Select {
            channel,
            to,
            label,
            payload,
            cont,
        } => format!(
            "{}[{to}](+){label}<{}>.{}",
            surface::print_channel(&rename_channel(channel, map)),
            surface::print_value(&rename_value(payload, map)),
            canon_thread(cont, map, counter)
        ),
        Process::Branch {
            channel,
            from,
            branches,
        } => {
            let bs: Vec<String> = branches
                .iter()
                .map(|b| {
                    let fresh = ValVar::new(format!("#v{counter}"));
                    *counter += 1;
                    let mut inner = map.clone();
                    inner.vars.push((b.binder.clone(), fresh.clone()));
                    format!(
                        "{}({fresh}).{}",
                        b.label,
                        canon_thread(&b.cont, &inner, counter)
                    )
                })
                .collect();
            format!(
                "{}[{from}]&{{{}}}",
                surface::print_channel(&rename_channel(channel, map)),
                bs.join(",")
            )
        }
        Process::Def {
            name,
            params,
            body,
            scope,
        } => {
            let fresh_name = ProcVar::new(format!("#d{counter}"));
            *counter += 1;
            let mut def_map = map.clone();
            def_map.procs.push((name.clone(), fresh_name.clone()));
            let mut body_map = def_map.clone();
            let ps: Vec<String> = params
                .iter()
                .map(|(x, s)| {
                    let fresh = ValVar::new(format!("#v{counter}"));
                    *counter += 1;
                    body_map.vars.push((x.clone(), fresh.clone()));
                    format!("{fresh}:{}", surface::print_sort(s))
                })
                .collect();
            format!(
                "def {fresh_name}({})={} in {}",
                ps.join(","),
                canon_thread(body, &body_map, counter),
                canon_thread(scope, &def_map, counter)
            )
        }
        Process::Call { name, args } => {
            let rendered: Vec<String> = args
                .iter()
                .map(|a| surface::print_value(&rename_value(a, map)))
                .collect();
            format!("{}({})", map.proc(name), rendered.join(","))
        }
        Process::Par(l, r) => {
            let mut parts = vec![
                canon_thread(l, map, counter),
                canon_thread(r, map, counter),
            ];
            parts.sort();
            format!("({})", parts.join("|"))
        }
    }
}

/// Structural congruence test.
pub fn equivalent(p: &Process, q: &Process) -> bool {
    canonical_print(&normalize(p)) == canonical_print(&normalize(q))
}

/// Outcome of a bounded execution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunOutcome {
    /// No reduction applies and the residue is inaction.
    Terminated,
    /// No reduction applies but threads remain.
    Stuck,
    /// An `err` thread appeared.
    ErrorReached,
    /// An untyped process misused a value.
    Fault(String),
    /// The step budget ran out first.
    BudgetExhausted,
}

#[derive(Debug, Clone)]
pub struct TraceStep {
    pub index: usize,
    pub rule: &'static str,
    pub label: String,
    /// The normalized process after the step, in surface syntax.
    pub state: String,
}

#[derive(Debug, Clone)]
pub struct Trace {
    pub steps: Vec<TraceStep>,
    pub outcome: RunOutcome,
}

/// Runs a closed process under a seeded scheduler until it is stuck, an
/// error appears, or the budget is exhausted.
pub fn run(p: &Process, max_steps: usize, scheduler_seed: u64) -> Trace {
    let mut rng = ChaCha8Rng::seed_from_u64(scheduler_seed);
    let mut nf = normalize(p);
    let mut trace = Vec::new();
    for index in 0..max_steps {
        if nf.threads.iter().any(|t| matches!(t, Process::Error)) {
            return Trace {
                steps: trace,
                outcome: RunOutcome::ErrorReached,
            };
        }
        let all = steps(&nf);
        if all.is_empty() {
            let outcome = if nf.is_nil() {
                RunOutcome::Terminated
            } else {
                RunOutcome::Stuck
            };
            return Trace {
                steps: trace,
                outcome,
            };
        }
        let pick = rng.gen_range(0..all.len());
        let step = &all[pick];
        match &step.next {
            Ok(next) => {
                nf = next.clone();
                trace.push(TraceStep {
                    index,
                    rule: step.rule,
                    label: step.label.clone(),
                    state: surface::print_process(&denormalize(&nf)),
                });
            }
            Err(DynamicFault(msg)) => {
                return Trace {
                    steps: trace,
                    outcome: RunOutcome::Fault(msg.clone()),
                };
            }
        }
    }
    if nf.threads.iter().any(|t| matches!(t, Process::Error)) {
        return Trace {
            steps: trace,
            outcome: RunOutcome::ErrorReached,
        };
    }
    if steps(&nf).is_empty() {
        let outcome = if nf.is_nil() {
            RunOutcome::Terminated
        } else {
            RunOutcome::Stuck
        };
        return Trace {
            steps: trace,
            outcome,
        };
    }
    Trace {
        steps: trace,
        outcome: RunOutcome::BudgetExhausted,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface::parse;

    fn fixture() -> crate::surface::SourceFile {
        parse(
            r#"
            local T_Hr = p(+)m(int) . end
            global G_H = p->q:m1(<T_Hr>) . r->p:m(int) . end
            process P = s[p][q](+)m1<s[r]> . s[p][r]&m(x) . 0
            process Q = s[q][p]&m1(x) . x[p](+)m<42> . 0
            process System = new s : G_H in P | Q
            global G_auth = s->c { login . c->a:passwd(str) . a->s:auth(bool) . end,
                                   cancel . c->a:quit . end }
            process P_s = s[s][c](+)cancel . 0
            process P_c = s[c][s]&{ login . s[c][a](+)passwd<"XYZ"> . 0,
                                    cancel . s[c][a](+)quit . 0 }
            process P_a = s[a][c]&{ passwd(y) . s[a][s](+)auth<true> . 0, quit . 0 }
            process OAuth = new s : G_auth in P_s | P_c | P_a
            process Loop = def X(x: <q(+)m . end>) = X(x) in X(s[p]) | s[q][p]&m . 0
            "#,
        )
        .unwrap()
    }

    #[test]
    fn normalize_flattens_parallel_and_drops_nil() {
        let f = fixture();
        let p = f.process("P").unwrap().clone();
        let q = f.process("Q").unwrap().clone();
        let composed = Process::par(Process::par(p, Process::Inaction), q);
        let nf = normalize(&composed);
        assert_eq!(nf.threads.len(), 2);
        assert!(nf.restrictions.is_empty());
        let nil = parse("global G = end\nprocess N = new s : G in 0")
            .unwrap()
            .process("N")
            .unwrap()
            .clone();
        let nf2 = normalize(&nil);
        assert!(nf2.is_nil());
        assert!(nf2.restrictions.is_empty());
        assert!(equivalent(&nil, &Process::Inaction));
    }

    #[test]
    fn oauth_normal_form_shape() {
        let f = fixture();
        let nf = normalize(f.process("OAuth").unwrap());
        assert_eq!(nf.restrictions.len(), 1);
        assert_eq!(nf.threads.len(), 3);
        assert_eq!(denormalize(&nf).free_sessions().len(), 0);
    }

    #[test]
    fn delegation_reduces_in_two_steps_through_the_displayed_intermediate() {
        let f = fixture();
        let system = f.process("System").unwrap();
        let first = reduce_steps(system);
        assert_eq!(first.len(), 1);
        // the delegated endpoint s[r] replaces x in Q's continuation
        let expected_mid = parse(
            r#"
            global G_H = p->q:m1(<p(+)m(int) . end>) . r->p:m(int) . end
            process Mid = new s : G_H in s[p][r]&m(x) . 0 | s[r][p](+)m<42> . 0
            "#,
        )
        .unwrap();
        assert!(equivalent(&first[0], expected_mid.process("Mid").unwrap()));
        let second = reduce_steps(&first[0]);
        assert_eq!(second.len(), 1);
        assert!(equivalent(&second[0], &Process::Inaction));
        assert!(reduce_steps(&second[0]).is_empty());
    }

    #[test]
    fn label_mismatch_steps_to_error() {
        let f = parse(
            "process Bad = s[p][q]&l1 . 0 | s[q][p](+)l2 . 0",
        )
        .unwrap();
        let succ = reduce_steps(f.process("Bad").unwrap());
        assert_eq!(succ.len(), 1);
        assert!(has_error(&succ[0]));
        // R-comm and R-err are mutually exclusive for a fixed pair
        let good = parse("process Ok = s[p][q]&l1 . 0 | s[q][p](+)l1 . 0").unwrap();
        let nf = normalize(good.process("Ok").unwrap());
        let all = steps(&nf);
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].rule, "R-comm");
    }

    #[test]
    fn error_detection_is_thread_level() {
        assert!(has_error(&Process::Error));
        assert!(!has_error(&Process::Inaction));
        // an err under a prefix is not yet an error
        let f = parse("process P = s[p][q]&l . err").unwrap();
        assert!(!has_error(f.process("P").unwrap()));
    }

    #[test]
    fn run_oauth_terminates_quickly_on_any_seed() {
        let f = fixture();
        let oauth = f.process("OAuth").unwrap();
        for seed in 0..8 {
            let trace = run(oauth, 10, seed);
            assert_eq!(trace.outcome, RunOutcome::Terminated);
            assert!(trace.steps.len() <= 3);
        }
        let empty = run(&Process::Inaction, 10, 0);
        assert!(empty.steps.is_empty());
        assert_eq!(empty.outcome, RunOutcome::Terminated);
    }

    #[test]
    fn unguarded_loop_exhausts_budget() {
        let f = fixture();
        let trace = run(f.process("Loop").unwrap(), 25, 7);
        assert_eq!(trace.outcome, RunOutcome::BudgetExhausted);
        assert_eq!(trace.steps.len(), 25);
    }

    #[test]
    fn substitution_avoids_capture_under_shadowing() {
        // receive x, then receive another x; the outer payload must not leak
        // into the inner scope
        let f = parse(
            r#"process P = s[p][q]&l(x) . x[q](+)m<x> . 0"#,
        )
        .unwrap();
        let Process::Branch { branches, .. } = f.process("P").unwrap() else {
            panic!("expected branch");
        };
        let b = &branches[0];
        let w = ValueExpr::Endpoint(Session::new("s2"), Role::new("r"));
        let substituted = subst_value(&b.cont, &b.binder, &w).unwrap();
        let expected = parse(r#"process P = s2[r][q](+)m<s2[r]> . 0"#).unwrap();
        assert_eq!(&substituted, expected.process("P").unwrap());
        // shadowed binder: substitution stops at the redefinition
        let g = parse(r#"process P = s[p][q]&l(y) . y[q](+)m<()> . 0"#).unwrap();
        let Process::Branch { branches, .. } = g.process("P").unwrap() else {
            panic!("expected branch");
        };
        let outer = subst_value(
            &Process::Branch {
                channel: ChannelExpr::Endpoint(Session::new("s"), Role::new("p")),
                from: Role::new("q"),
                branches: branches.clone(),
            },
            &branches[0].binder,
            &w,
        )
        .unwrap();
        // y is bound by the branch, so nothing changes
        assert_eq!(
            &outer,
            g.process("P").unwrap()
        );
    }

    #[test]
    fn reduction_is_stable_under_congruence() {
        let f = fixture();
        let p = f.process("P").unwrap().clone();
        let q = f.process("Q").unwrap().clone();
        let sys1 = Process::Restriction {
            session: Session::new("s"),
            annotation: Annotation::Global(GlobalType::End),
            body: Box::new(Process::par(p.clone(), q.clone())),
        };
        let sys2 = Process::Restriction {
            session: Session::new("s"),
            annotation: Annotation::Global(GlobalType::End),
            body: Box::new(Process::par(
                q,
                Process::par(p, Process::Inaction),
            )),
        };
        let succ1: Vec<String> = reduce_steps(&sys1)
            .iter()
            .map(|s| canonical_print(&normalize(s)))
            .collect();
        let succ2: Vec<String> = reduce_steps(&sys2)
            .iter()
            .map(|s| canonical_print(&normalize(s)))
            .collect();
        assert_eq!(succ1, succ2);
    }
}
