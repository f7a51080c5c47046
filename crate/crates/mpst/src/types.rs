//! Core ASTs: sorts, global types, local types, typing contexts, and
//! transition labels, together with well-formedness, unfolding, and
//! alpha-canonical keys.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::ident::{Label, RecVar, Role, Session, ValVar};

/// The fixed universe of basic payload sorts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BasicSort {
    Int,
    Bool,
    Real,
    Str,
    Unit,
}

impl BasicSort {
    pub fn name(self) -> &'static str {
        match self {
            BasicSort::Int => "int",
            BasicSort::Bool => "bool",
            BasicSort::Real => "real",
            BasicSort::Str => "str",
            BasicSort::Unit => "unit",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "int" => Some(BasicSort::Int),
            "bool" => Some(BasicSort::Bool),
            "real" => Some(BasicSort::Real),
            "str" => Some(BasicSort::Str),
            "unit" => Some(BasicSort::Unit),
            _ => None,
        }
    }
}

/// A payload sort: a basic type or a session (local) type.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Sort {
    Basic(BasicSort),
    Session(Box<LocalType>),
}

impl Sort {
    pub const UNIT: Sort = Sort::Basic(BasicSort::Unit);

    pub fn session(t: LocalType) -> Sort {
        Sort::Session(Box::new(t))
    }

    /// True when any session payload appearing here has free recursion
    /// variables when read in isolation.
    pub fn is_closed(&self) -> bool {
        match self {
            Sort::Basic(_) => true,
            Sort::Session(t) => t.free_vars().is_empty(),
        }
    }
}

/// One branch of a global transmission.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GlobalBranch {
    pub label: Label,
    pub payload: Sort,
    pub cont: GlobalType,
}

/// Global types: protocol trees of role-to-role transmissions.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum GlobalType {
    Comm {
        from: Role,
        to: Role,
        branches: Vec<GlobalBranch>,
    },
    Rec(RecVar, Box<GlobalType>),
    Var(RecVar),
    End,
}

/// One branch of a local choice.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LocalBranch {
    pub label: Label,
    pub payload: Sort,
    pub cont: LocalType,
}

/// Local (session) types: a single role's view of the protocol.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum LocalType {
    /// Internal choice: the owner sends to `peer`.
    Internal {
        peer: Role,
        branches: Vec<LocalBranch>,
    },
    /// External choice: the owner receives from `peer`.
    External {
        peer: Role,
        branches: Vec<LocalBranch>,
    },
    Rec(RecVar, Box<LocalType>),
    Var(RecVar),
    End,
}

/// Raised when an operation that requires a closed, contractive type is
/// handed something else.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IllFormed {
    #[error("type has free recursion variable {0}")]
    Open(RecVar),
    #[error("type is not contractive at binder {0}")]
    NonContractive(RecVar),
}

/// A well-formedness diagnostic. `path` traces branch labels from the root
/// to the offending subterm.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WfIssue {
    pub kind: WfIssueKind,
    pub path: Vec<Label>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WfIssueKind {
    /// Transmission from a role to itself.
    SelfReception(Role),
    /// Two branches with the same label.
    DuplicateLabel(Label),
    /// A choice with no branches.
    EmptyBranches,
    /// A recursion variable with no enclosing binder.
    UnboundVar(RecVar),
    /// A `rec` whose chain of bodies loops back to a bound variable or
    /// bottoms out without a communication prefix.
    NonContractive(RecVar),
    /// A session payload that is open when read in isolation.
    OpenPayload,
}

impl fmt::Display for WfIssueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WfIssueKind::SelfReception(r) => write!(f, "SelfReception({r})"),
            WfIssueKind::DuplicateLabel(l) => write!(f, "DuplicateLabel({l})"),
            WfIssueKind::EmptyBranches => write!(f, "EmptyBranches"),
            WfIssueKind::UnboundVar(v) => write!(f, "UnboundVar({v})"),
            WfIssueKind::NonContractive(v) => write!(f, "NonContractive({v})"),
            WfIssueKind::OpenPayload => write!(f, "OpenPayload"),
        }
    }
}

impl fmt::Display for WfIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "{}", self.kind)
        } else {
            let path: Vec<&str> = self.path.iter().map(|l| l.as_str()).collect();
            write!(f, "{} at {}", self.kind, path.join("/"))
        }
    }
}

fn chase_rec_head<'a, T, F: Fn(&'a T) -> RecHead<'a, T>>(
    var: &RecVar,
    body: &'a T,
    head: F,
) -> Option<WfIssueKind> {
    let mut chain: BTreeSet<&RecVar> = BTreeSet::new();
    chain.insert(var);
    let mut cur = body;
    loop {
        match head(cur) {
            RecHead::Rec(v, inner) => {
                chain.insert(v);
                cur = inner;
            }
            RecHead::Var(v) => {
                if chain.contains(v) {
                    return Some(WfIssueKind::NonContractive(v.clone()));
                }
                return None;
            }
            // A recursion that unfolds straight to `end` never reaches a
            // progressive prefix.
            RecHead::End => return Some(WfIssueKind::NonContractive(var.clone())),
            RecHead::Comm => return None,
        }
    }
}

enum RecHead<'a, T> {
    Rec(&'a RecVar, &'a T),
    Var(&'a RecVar),
    End,
    Comm,
}

struct WfWalker {
    issues: Vec<WfIssue>,
    path: Vec<Label>,
}

impl WfWalker {
    fn push(&mut self, kind: WfIssueKind) {
        self.issues.push(WfIssue {
            kind,
            path: self.path.clone(),
        });
    }

    fn check_branch_labels(&mut self, labels: impl Iterator<Item = Label>, count: usize) {
        if count == 0 {
            self.push(WfIssueKind::EmptyBranches);
        }
        let mut seen = BTreeSet::new();
        for l in labels {
            if !seen.insert(l.clone()) {
                self.push(WfIssueKind::DuplicateLabel(l));
            }
        }
    }

    fn check_payload(&mut self, sort: &Sort, env: &BTreeSet<RecVar>) {
        if let Sort::Session(t) = sort {
            if !t.free_vars().is_empty() {
                self.push(WfIssueKind::OpenPayload);
            }
            self.walk_local(t, env);
        }
    }

    fn walk_global(&mut self, g: &GlobalType, env: &BTreeSet<RecVar>) {
        match g {
            GlobalType::Comm { from, to, branches } => {
                if from == to {
                    self.push(WfIssueKind::SelfReception(from.clone()));
                }
                self.check_branch_labels(
                    branches.iter().map(|b| b.label.clone()),
                    branches.len(),
                );
                for b in branches {
                    self.path.push(b.label.clone());
                    self.check_payload(&b.payload, env);
                    self.walk_global(&b.cont, env);
                    self.path.pop();
                }
            }
            GlobalType::Rec(v, body) => {
                if let Some(kind) = chase_rec_head(v, body.as_ref(), |g| match g {
                    GlobalType::Rec(v, b) => RecHead::Rec(v, b),
                    GlobalType::Var(v) => RecHead::Var(v),
                    GlobalType::End => RecHead::End,
                    GlobalType::Comm { .. } => RecHead::Comm,
                }) {
                    self.push(kind);
                }
                let mut env = env.clone();
                env.insert(v.clone());
                self.walk_global(body, &env);
            }
            GlobalType::Var(v) => {
                if !env.contains(v) {
                    self.push(WfIssueKind::UnboundVar(v.clone()));
                }
            }
            GlobalType::End => {}
        }
    }

    fn walk_local(&mut self, t: &LocalType, env: &BTreeSet<RecVar>) {
        match t {
            LocalType::Internal { branches, .. } | LocalType::External { branches, .. } => {
                self.check_branch_labels(
                    branches.iter().map(|b| b.label.clone()),
                    branches.len(),
                );
                for b in branches {
                    self.path.push(b.label.clone());
                    self.check_payload(&b.payload, env);
                    self.walk_local(&b.cont, env);
                    self.path.pop();
                }
            }
            LocalType::Rec(v, body) => {
                if let Some(kind) = chase_rec_head(v, body.as_ref(), |t| match t {
                    LocalType::Rec(v, b) => RecHead::Rec(v, b),
                    LocalType::Var(v) => RecHead::Var(v),
                    LocalType::End => RecHead::End,
                    LocalType::Internal { .. } | LocalType::External { .. } => RecHead::Comm,
                }) {
                    self.push(kind);
                }
                let mut env = env.clone();
                env.insert(v.clone());
                self.walk_local(body, &env);
            }
            LocalType::Var(v) => {
                if !env.contains(v) {
                    self.push(WfIssueKind::UnboundVar(v.clone()));
                }
            }
            LocalType::End => {}
        }
    }
}

fn fresh_var(base: &RecVar, avoid: &BTreeSet<RecVar>) -> RecVar {
    let mut i = 1u32;
    loop {
        let candidate = RecVar::new(format!("{}'{}", base.as_str(), i));
        if !avoid.contains(&candidate) {
            return candidate;
        }
        i += 1;
    }
}

impl GlobalType {
    pub fn comm(from: impl Into<Role>, to: impl Into<Role>, branches: Vec<GlobalBranch>) -> Self {
        GlobalType::Comm {
            from: from.into(),
            to: to.into(),
            branches,
        }
    }

    pub fn rec(v: impl Into<RecVar>, body: GlobalType) -> Self {
        GlobalType::Rec(v.into(), Box::new(body))
    }

    pub fn free_vars(&self) -> BTreeSet<RecVar> {
        fn go(g: &GlobalType, bound: &mut Vec<RecVar>, out: &mut BTreeSet<RecVar>) {
            match g {
                GlobalType::Comm { branches, .. } => {
                    for b in branches {
                        if let Sort::Session(t) = &b.payload {
                            local_free(t, bound, out);
                        }
                        go(&b.cont, bound, out);
                    }
                }
                GlobalType::Rec(v, body) => {
                    bound.push(v.clone());
                    go(body, bound, out);
                    bound.pop();
                }
                GlobalType::Var(v) => {
                    if !bound.contains(v) {
                        out.insert(v.clone());
                    }
                }
                GlobalType::End => {}
            }
        }
        let mut out = BTreeSet::new();
        go(self, &mut Vec::new(), &mut out);
        out
    }

    /// Every role occurring as sender or receiver.
    pub fn roles(&self) -> BTreeSet<Role> {
        let mut out = BTreeSet::new();
        fn go(g: &GlobalType, out: &mut BTreeSet<Role>) {
            if let GlobalType::Comm { from, to, branches } = g {
                out.insert(from.clone());
                out.insert(to.clone());
                for b in branches {
                    go(&b.cont, out);
                }
            } else if let GlobalType::Rec(_, body) = g {
                go(body, out);
            }
        }
        go(self, &mut out);
        out
    }

    /// Capture-avoiding substitution of `rep` for the free variable `var`.
    pub fn subst(&self, var: &RecVar, rep: &GlobalType) -> GlobalType {
        match self {
            GlobalType::Comm { from, to, branches } => GlobalType::Comm {
                from: from.clone(),
                to: to.clone(),
                branches: branches
                    .iter()
                    .map(|b| GlobalBranch {
                        label: b.label.clone(),
                        payload: b.payload.clone(),
                        cont: b.cont.subst(var, rep),
                    })
                    .collect(),
            },
            GlobalType::Rec(v, body) => {
                if v == var {
                    self.clone()
                } else if rep.free_vars().contains(v) {
                    let mut avoid = rep.free_vars();
                    avoid.extend(body.free_vars());
                    avoid.insert(var.clone());
                    let fresh = fresh_var(v, &avoid);
                    let renamed = body.subst(v, &GlobalType::Var(fresh.clone()));
                    GlobalType::Rec(fresh, Box::new(renamed.subst(var, rep)))
                } else {
                    GlobalType::Rec(v.clone(), Box::new(body.subst(var, rep)))
                }
            }
            GlobalType::Var(v) => {
                if v == var {
                    rep.clone()
                } else {
                    self.clone()
                }
            }
            GlobalType::End => GlobalType::End,
        }
    }

    pub fn count_recs(&self) -> usize {
        match self {
            GlobalType::Comm { branches, .. } => branches.iter().map(|b| b.cont.count_recs()).sum(),
            GlobalType::Rec(_, body) => 1 + body.count_recs(),
            _ => 0,
        }
    }

    /// Unfolds top-level recursion until the head is not a `rec`.
    pub fn unfold_once(&self) -> Result<GlobalType, IllFormed> {
        if let Some(v) = self.free_vars().into_iter().next() {
            return Err(IllFormed::Open(v));
        }
        let budget = self.count_recs() + 1;
        let mut cur = self.clone();
        for _ in 0..budget {
            match cur {
                GlobalType::Rec(ref v, ref body) => {
                    let next = body.subst(v, &cur);
                    cur = next;
                }
                GlobalType::Var(v) => return Err(IllFormed::Open(v)),
                _ => return Ok(cur),
            }
        }
        match cur {
            GlobalType::Rec(v, _) => Err(IllFormed::NonContractive(v)),
            _ => Ok(cur),
        }
    }

    pub fn well_formed(&self) -> Vec<WfIssue> {
        let mut w = WfWalker {
            issues: Vec::new(),
            path: Vec::new(),
        };
        w.walk_global(self, &BTreeSet::new());
        w.issues
    }

    pub fn is_well_formed(&self) -> bool {
        self.well_formed().is_empty()
    }

    /// Alpha-equivalence key: recursion binders replaced by de Bruijn
    /// indices, rendered to a stable string.
    pub fn canonical_key(&self) -> Result<TypeKey, IllFormed> {
        if let Some(v) = self.free_vars().into_iter().next() {
            return Err(IllFormed::Open(v));
        }
        let mut s = String::new();
        canon_global(self, &mut Vec::new(), &mut s);
        Ok(TypeKey(s))
    }
}

fn local_free(t: &LocalType, bound: &mut Vec<RecVar>, out: &mut BTreeSet<RecVar>) {
    match t {
        LocalType::Internal { branches, .. } | LocalType::External { branches, .. } => {
            for b in branches {
                if let Sort::Session(p) = &b.payload {
                    local_free(p, bound, out);
                }
                local_free(&b.cont, bound, out);
            }
        }
        LocalType::Rec(v, body) => {
            bound.push(v.clone());
            local_free(body, bound, out);
            bound.pop();
        }
        LocalType::Var(v) => {
            if !bound.contains(v) {
                out.insert(v.clone());
            }
        }
        LocalType::End => {}
    }
}

impl LocalType {
    pub fn internal(peer: impl Into<Role>, branches: Vec<LocalBranch>) -> Self {
        LocalType::Internal {
            peer: peer.into(),
            branches,
        }
    }

    pub fn external(peer: impl Into<Role>, branches: Vec<LocalBranch>) -> Self {
        LocalType::External {
            peer: peer.into(),
            branches,
        }
    }

    pub fn rec(v: impl Into<RecVar>, body: LocalType) -> Self {
        LocalType::Rec(v.into(), Box::new(body))
    }

    pub fn free_vars(&self) -> BTreeSet<RecVar> {
        let mut out = BTreeSet::new();
        local_free(self, &mut Vec::new(), &mut out);
        out
    }

    pub fn subst(&self, var: &RecVar, rep: &LocalType) -> LocalType {
        match self {
            LocalType::Internal { peer, branches } => LocalType::Internal {
                peer: peer.clone(),
                branches: subst_branches(branches, var, rep),
            },
            LocalType::External { peer, branches } => LocalType::External {
                peer: peer.clone(),
                branches: subst_branches(branches, var, rep),
            },
            LocalType::Rec(v, body) => {
                if v == var {
                    self.clone()
                } else if rep.free_vars().contains(v) {
                    let mut avoid = rep.free_vars();
                    avoid.extend(body.free_vars());
                    avoid.insert(var.clone());
                    let fresh = fresh_var(v, &avoid);
                    let renamed = body.subst(v, &LocalType::Var(fresh.clone()));
                    LocalType::Rec(fresh, Box::new(renamed.subst(var, rep)))
                } else {
                    LocalType::Rec(v.clone(), Box::new(body.subst(var, rep)))
                }
            }
            LocalType::Var(v) => {
                if v == var {
                    rep.clone()
                } else {
                    self.clone()
                }
            }
            LocalType::End => LocalType::End,
        }
    }

    pub fn count_recs(&self) -> usize {
        match self {
            LocalType::Internal { branches, .. } | LocalType::External { branches, .. } => {
                branches.iter().map(|b| b.cont.count_recs()).sum()
            }
            LocalType::Rec(_, body) => 1 + body.count_recs(),
            _ => 0,
        }
    }

    pub fn unfold_once(&self) -> Result<LocalType, IllFormed> {
        if let Some(v) = self.free_vars().into_iter().next() {
            return Err(IllFormed::Open(v));
        }
        self.unfold_head().map(|cow| cow.into_owned())
    }

    /// Head unfolding that borrows when the head is already exposed and
    /// skips the closure pre-check. Callers guarantee closed input.
    pub(crate) fn unfold_head(&self) -> Result<std::borrow::Cow<'_, LocalType>, IllFormed> {
        use std::borrow::Cow;
        match self {
            LocalType::Rec(..) => {}
            LocalType::Var(v) => return Err(IllFormed::Open(v.clone())),
            _ => return Ok(Cow::Borrowed(self)),
        }
        let budget = self.count_recs() + 1;
        let mut cur = self.clone();
        for _ in 0..budget {
            match cur {
                LocalType::Rec(ref v, ref body) => {
                    let next = body.subst(v, &cur);
                    cur = next;
                }
                LocalType::Var(v) => return Err(IllFormed::Open(v)),
                _ => return Ok(Cow::Owned(cur)),
            }
        }
        match cur {
            LocalType::Rec(v, _) => Err(IllFormed::NonContractive(v)),
            _ => Ok(Cow::Owned(cur)),
        }
    }

    /// Whether the type unfolds to `end`, without building the unfolding.
    pub fn is_end_like(&self) -> bool {
        let mut chain: Vec<&RecVar> = Vec::new();
        let mut cur = self;
        loop {
            match cur {
                LocalType::End => return true,
                LocalType::Rec(v, body) => {
                    if chain.contains(&v) {
                        return false;
                    }
                    chain.push(v);
                    cur = body;
                }
                LocalType::Var(v) => {
                    // a variable bound in the chain loops forever; a free one
                    // is ill-formed; either way this is not end
                    let _ = v;
                    return false;
                }
                _ => return false,
            }
        }
    }

    pub fn well_formed(&self) -> Vec<WfIssue> {
        let mut w = WfWalker {
            issues: Vec::new(),
            path: Vec::new(),
        };
        w.walk_local(self, &BTreeSet::new());
        w.issues
    }

    pub fn is_well_formed(&self) -> bool {
        self.well_formed().is_empty()
    }

    pub fn canonical_key(&self) -> Result<TypeKey, IllFormed> {
        if let Some(v) = self.free_vars().into_iter().next() {
            return Err(IllFormed::Open(v));
        }
        Ok(self.canonical_key_unchecked())
    }

    /// Canonical key without the closure pre-check, for hot paths that
    /// already know the type is closed.
    pub(crate) fn canonical_key_unchecked(&self) -> TypeKey {
        let mut s = String::new();
        canon_local(self, &mut Vec::new(), &mut s);
        TypeKey(s)
    }
}

fn subst_branches(branches: &[LocalBranch], var: &RecVar, rep: &LocalType) -> Vec<LocalBranch> {
    branches
        .iter()
        .map(|b| LocalBranch {
            label: b.label.clone(),
            payload: match &b.payload {
                Sort::Basic(b) => Sort::Basic(*b),
                Sort::Session(t) => Sort::session(t.subst(var, rep)),
            },
            cont: b.cont.subst(var, rep),
        })
        .collect()
}

/// Opaque alpha-equivalence key for closed types and whole contexts.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TypeKey(String);

impl TypeKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

fn canon_sort(s: &Sort, binders: &mut Vec<RecVar>, out: &mut String) {
    match s {
        Sort::Basic(b) => out.push_str(b.name()),
        Sort::Session(t) => {
            out.push('<');
            canon_local(t, binders, out);
            out.push('>');
        }
    }
}

fn canon_global(g: &GlobalType, binders: &mut Vec<RecVar>, out: &mut String) {
    match g {
        GlobalType::Comm { from, to, branches } => {
            out.push_str("C(");
            out.push_str(from.as_str());
            out.push(',');
            out.push_str(to.as_str());
            out.push_str("){");
            for b in branches {
                out.push_str(b.label.as_str());
                out.push('(');
                canon_sort(&b.payload, binders, out);
                out.push(')');
                canon_global(&b.cont, binders, out);
                out.push(';');
            }
            out.push('}');
        }
        GlobalType::Rec(v, body) => {
            out.push('R');
            binders.push(v.clone());
            canon_global(body, binders, out);
            binders.pop();
        }
        GlobalType::Var(v) => {
            let idx = binders.iter().rev().position(|b| b == v);
            match idx {
                Some(i) => {
                    out.push('V');
                    out.push_str(&i.to_string());
                }
                None => {
                    out.push_str("F(");
                    out.push_str(v.as_str());
                    out.push(')');
                }
            }
        }
        GlobalType::End => out.push('0'),
    }
}

fn canon_local(t: &LocalType, binders: &mut Vec<RecVar>, out: &mut String) {
    match t {
        LocalType::Internal { peer, branches } | LocalType::External { peer, branches } => {
            out.push(if matches!(t, LocalType::Internal { .. }) {
                'I'
            } else {
                'E'
            });
            out.push('(');
            out.push_str(peer.as_str());
            out.push_str("){");
            for b in branches {
                out.push_str(b.label.as_str());
                out.push('(');
                canon_sort(&b.payload, binders, out);
                out.push(')');
                canon_local(&b.cont, binders, out);
                out.push(';');
            }
            out.push('}');
        }
        LocalType::Rec(v, body) => {
            out.push('R');
            binders.push(v.clone());
            canon_local(body, binders, out);
            binders.pop();
        }
        LocalType::Var(v) => {
            let idx = binders.iter().rev().position(|b| b == v);
            match idx {
                Some(i) => {
                    out.push('V');
                    out.push_str(&i.to_string());
                }
                None => {
                    out.push_str("F(");
                    out.push_str(v.as_str());
                    out.push(')');
                }
            }
        }
        LocalType::End => out.push('0'),
    }
}

/// A key of a typing context: a session endpoint or a value variable.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ContextKey {
    Endpoint(Session, Role),
    Var(ValVar),
}

impl fmt::Display for ContextKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContextKey::Endpoint(s, r) => write!(f, "{s}[{r}]"),
            ContextKey::Var(x) => write!(f, "{x}"),
        }
    }
}

/// A typing context: a finite partial map from endpoints and variables to
/// sorts.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TypingContext {
    entries: BTreeMap<ContextKey, Sort>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("context composition is undefined: duplicate key {0}")]
pub struct CompositionClash(pub ContextKey);

impl TypingContext {
    pub fn new() -> Self {
        TypingContext::default()
    }

    pub fn singleton(key: ContextKey, sort: Sort) -> Self {
        let mut entries = BTreeMap::new();
        entries.insert(key, sort);
        TypingContext { entries }
    }

    pub fn endpoint_entry(session: impl Into<Session>, role: impl Into<Role>, t: LocalType) -> Self {
        TypingContext::singleton(
            ContextKey::Endpoint(session.into(), role.into()),
            Sort::session(t),
        )
    }

    pub fn insert(&mut self, key: ContextKey, sort: Sort) -> Result<(), CompositionClash> {
        if self.entries.contains_key(&key) {
            return Err(CompositionClash(key));
        }
        self.entries.insert(key, sort);
        Ok(())
    }

    /// Replaces an existing entry, used by the reduction rules.
    pub fn update(&mut self, key: ContextKey, sort: Sort) {
        self.entries.insert(key, sort);
    }

    pub fn remove(&mut self, key: &ContextKey) -> Option<Sort> {
        self.entries.remove(key)
    }

    pub fn get(&self, key: &ContextKey) -> Option<&Sort> {
        self.entries.get(key)
    }

    pub fn endpoint(&self, session: &Session, role: &Role) -> Option<&Sort> {
        self.entries
            .get(&ContextKey::Endpoint(session.clone(), role.clone()))
    }

    pub fn contains(&self, key: &ContextKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ContextKey, &Sort)> {
        self.entries.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &ContextKey> {
        self.entries.keys()
    }

    pub fn domain(&self) -> BTreeSet<ContextKey> {
        self.entries.keys().cloned().collect()
    }

    /// Composition, defined only on disjoint domains.
    pub fn compose(&self, other: &TypingContext) -> Result<TypingContext, CompositionClash> {
        let mut out = self.clone();
        for (k, v) in other.iter() {
            out.insert(k.clone(), v.clone())?;
        }
        Ok(out)
    }

    /// Restriction to the endpoints of one session.
    pub fn restrict(&self, session: &Session) -> TypingContext {
        TypingContext {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| matches!(k, ContextKey::Endpoint(s, _) if s == session))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// The sessions that occur in the domain.
    pub fn sessions(&self) -> BTreeSet<Session> {
        self.entries
            .keys()
            .filter_map(|k| match k {
                ContextKey::Endpoint(s, _) => Some(s.clone()),
                ContextKey::Var(_) => None,
            })
            .collect()
    }

    pub fn roles_of(&self, session: &Session) -> BTreeSet<Role> {
        self.entries
            .keys()
            .filter_map(|k| match k {
                ContextKey::Endpoint(s, r) if s == session => Some(r.clone()),
                _ => None,
            })
            .collect()
    }

    /// Stable identity for state-space deduplication: entries are folded as
    /// written, compared up to alpha-equivalence.
    pub fn canonical_key(&self) -> TypeKey {
        let mut out = String::new();
        for (k, sort) in &self.entries {
            out.push_str(&k.to_string());
            out.push('=');
            match sort {
                Sort::Basic(b) => out.push_str(b.name()),
                Sort::Session(t) => match t.canonical_key() {
                    Ok(key) => out.push_str(key.as_str()),
                    Err(_) => {
                        let mut raw = String::new();
                        canon_local(t, &mut Vec::new(), &mut raw);
                        out.push_str(&raw);
                    }
                },
            }
            out.push('|');
        }
        TypeKey(out)
    }
}

impl FromIterator<(ContextKey, Sort)> for TypingContext {
    fn from_iter<I: IntoIterator<Item = (ContextKey, Sort)>>(iter: I) -> Self {
        TypingContext {
            entries: iter.into_iter().collect(),
        }
    }
}

/// Transition labels of the global-type and typing-context semantics.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TransitionLabel {
    /// `s:p!q:l(S)` — in session `s`, `subject` sends to `peer`.
    Output {
        session: Session,
        subject: Role,
        peer: Role,
        label: Label,
        payload: Sort,
    },
    /// `s:p?q:l(S)` — in session `s`, `subject` receives from `peer`.
    Input {
        session: Session,
        subject: Role,
        peer: Role,
        label: Label,
        payload: Sort,
    },
    /// `s:p->q:l` — message `l` is transmitted from `from` to `to`.
    Transmission {
        session: Session,
        from: Role,
        to: Role,
        label: Label,
    },
}

impl TransitionLabel {
    pub fn subjects(&self) -> BTreeSet<Role> {
        match self {
            TransitionLabel::Output { subject, .. } | TransitionLabel::Input { subject, .. } => {
                [subject.clone()].into_iter().collect()
            }
            TransitionLabel::Transmission { from, to, .. } => {
                [from.clone(), to.clone()].into_iter().collect()
            }
        }
    }

    pub fn session(&self) -> &Session {
        match self {
            TransitionLabel::Output { session, .. }
            | TransitionLabel::Input { session, .. }
            | TransitionLabel::Transmission { session, .. } => session,
        }
    }

    pub fn is_transmission(&self) -> bool {
        matches!(self, TransitionLabel::Transmission { .. })
    }

    /// The `(sender, receiver)` pair a transmission discharges.
    pub fn pair(&self) -> (Role, Role) {
        match self {
            TransitionLabel::Output { subject, peer, .. } => (subject.clone(), peer.clone()),
            TransitionLabel::Input { subject, peer, .. } => (peer.clone(), subject.clone()),
            TransitionLabel::Transmission { from, to, .. } => (from.clone(), to.clone()),
        }
    }
}

// `Sort` carries no natural order; labels are ordered via their canonical
// rendering so BTree collections stay deterministic.
impl PartialOrd for Sort {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Sort {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        let render = |s: &Sort| -> String {
            let mut out = String::new();
            canon_sort(s, &mut Vec::new(), &mut out);
            out
        };
        render(self).cmp(&render(other))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lbl(s: &str) -> Label {
        Label::new(s)
    }

    fn gb(l: &str, cont: GlobalType) -> GlobalBranch {
        GlobalBranch {
            label: lbl(l),
            payload: Sort::UNIT,
            cont,
        }
    }

    fn lb(l: &str, cont: LocalType) -> LocalBranch {
        LocalBranch {
            label: lbl(l),
            payload: Sort::UNIT,
            cont,
        }
    }

    #[test]
    fn unfold_end_is_identity() {
        assert_eq!(GlobalType::End.unfold_once().unwrap(), GlobalType::End);
        assert_eq!(LocalType::End.unfold_once().unwrap(), LocalType::End);
    }

    #[test]
    fn unfold_exposes_communication_head() {
        // rec t . q(+){ l2 . t }  unfolds to  q(+){ l2 . rec t . q(+){ l2 . t } }
        let t = LocalType::rec("t", LocalType::internal("q", vec![lb("l2", LocalType::Var(RecVar::new("t")))]));
        let unfolded = t.unfold_once().unwrap();
        let expected = LocalType::internal("q", vec![lb("l2", t.clone())]);
        assert_eq!(unfolded, expected);
        // idempotent
        assert_eq!(unfolded.unfold_once().unwrap(), unfolded);
    }

    #[test]
    fn unfold_rejects_unguarded() {
        let t = GlobalType::rec("t", GlobalType::Var(RecVar::new("t")));
        assert!(matches!(t.unfold_once(), Err(IllFormed::NonContractive(_))));
        let t2 = GlobalType::rec("t", GlobalType::rec("u", GlobalType::Var(RecVar::new("t"))));
        assert!(t2.unfold_once().is_err());
        let open = GlobalType::Var(RecVar::new("t"));
        assert!(matches!(open.unfold_once(), Err(IllFormed::Open(_))));
    }

    #[test]
    fn roles_of_collects_senders_and_receivers() {
        assert!(GlobalType::End.roles().is_empty());
        let g = GlobalType::rec(
            "t",
            GlobalType::comm("A", "B", vec![gb("l", GlobalType::Var(RecVar::new("t")))]),
        );
        let roles: Vec<_> = g.roles().into_iter().map(|r| r.as_str().to_string()).collect();
        assert_eq!(roles, vec!["A", "B"]);
    }

    #[test]
    fn well_formed_flags_self_reception() {
        let g = GlobalType::comm("p", "p", vec![gb("l", GlobalType::End)]);
        let issues = g.well_formed();
        assert!(issues
            .iter()
            .any(|i| matches!(i.kind, WfIssueKind::SelfReception(_))));
    }

    #[test]
    fn well_formed_flags_open_payload() {
        // rec t . p(+){ l(<t>) . end } : recursion variable as payload
        let t = LocalType::rec(
            "t",
            LocalType::internal(
                "p",
                vec![LocalBranch {
                    label: lbl("l"),
                    payload: Sort::session(LocalType::Var(RecVar::new("t"))),
                    cont: LocalType::End,
                }],
            ),
        );
        let issues = t.well_formed();
        assert_eq!(issues.len(), 1);
        assert!(matches!(issues[0].kind, WfIssueKind::OpenPayload));
    }

    #[test]
    fn well_formed_flags_duplicate_labels_and_rec_over_end() {
        let t = LocalType::internal("p", vec![lb("l", LocalType::End), lb("l", LocalType::End)]);
        assert!(t
            .well_formed()
            .iter()
            .any(|i| matches!(i.kind, WfIssueKind::DuplicateLabel(_))));
        let r = LocalType::rec("t", LocalType::End);
        assert!(r
            .well_formed()
            .iter()
            .any(|i| matches!(i.kind, WfIssueKind::NonContractive(_))));
    }

    #[test]
    fn canonical_key_is_alpha_invariant() {
        let t1 = LocalType::rec("t", LocalType::internal("p", vec![lb("l", LocalType::Var(RecVar::new("t")))]));
        let t2 = LocalType::rec("u", LocalType::internal("p", vec![lb("l", LocalType::Var(RecVar::new("u")))]));
        assert_eq!(t1.canonical_key().unwrap(), t2.canonical_key().unwrap());
        let internal = LocalType::internal("p", vec![lb("l", LocalType::End)]);
        let external = LocalType::external("p", vec![lb("l", LocalType::End)]);
        assert_ne!(
            internal.canonical_key().unwrap(),
            external.canonical_key().unwrap()
        );
        // folded and unfolded forms stay distinguishable
        assert_ne!(
            t1.canonical_key().unwrap(),
            t1.unfold_once().unwrap().canonical_key().unwrap()
        );
    }

    #[test]
    fn composition_requires_disjoint_domains() {
        let a = TypingContext::endpoint_entry("s", "p", LocalType::End);
        let b = TypingContext::endpoint_entry("s", "p", LocalType::End);
        assert!(a.compose(&b).is_err());
        let c = TypingContext::endpoint_entry("s", "q", LocalType::End);
        assert_eq!(a.compose(&c).unwrap().len(), 2);
    }

    #[test]
    fn restriction_keeps_only_session_endpoints() {
        let mut g = TypingContext::new();
        g.insert(
            ContextKey::Endpoint(Session::new("s"), Role::new("p")),
            Sort::session(LocalType::End),
        )
        .unwrap();
        g.insert(
            ContextKey::Endpoint(Session::new("r"), Role::new("p")),
            Sort::session(LocalType::End),
        )
        .unwrap();
        g.insert(ContextKey::Var(ValVar::new("x")), Sort::Basic(BasicSort::Int))
            .unwrap();
        let restricted = g.restrict(&Session::new("s"));
        assert_eq!(restricted.len(), 1);
    }

    #[test]
    fn label_subjects() {
        let s = Session::new("s");
        let out = TransitionLabel::Output {
            session: s.clone(),
            subject: Role::new("p"),
            peer: Role::new("q"),
            label: lbl("l"),
            payload: Sort::UNIT,
        };
        assert_eq!(out.subjects().len(), 1);
        let tr = TransitionLabel::Transmission {
            session: s,
            from: Role::new("p"),
            to: Role::new("q"),
            label: lbl("l"),
        };
        assert_eq!(tr.subjects().len(), 2);
        assert_eq!(tr.pair(), (Role::new("p"), Role::new("q")));
    }
}
