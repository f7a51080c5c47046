//! Endpoint projection of global types and the full-merge operator on
//! local types.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::ident::{Label, RecVar, Role};
use crate::types::{GlobalType, LocalBranch, LocalType, Sort};

/// Why two local types refused to merge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeReason {
    /// Internal choices with different label sets or payloads.
    InternalChoiceClash,
    /// Same-shape choices toward different peers.
    PeerMismatch,
    /// Session payloads that disagree on a shared label.
    PayloadMismatch,
    /// Basic payloads that disagree on a shared label.
    LabelPayloadClash,
    /// Different constructors altogether.
    ShapeMismatch,
    /// Recursion variables bound by different binders.
    BinderMismatch,
}

impl fmt::Display for MergeReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MergeReason::InternalChoiceClash => "InternalChoiceClash",
            MergeReason::PeerMismatch => "PeerMismatch",
            MergeReason::PayloadMismatch => "PayloadMismatch",
            MergeReason::LabelPayloadClash => "LabelPayloadClash",
            MergeReason::ShapeMismatch => "ShapeMismatch",
            MergeReason::BinderMismatch => "BinderMismatch",
        };
        f.write_str(s)
    }
}

/// A merge failure, with the branch-label trace to the smallest
/// unmergeable pair of subterms.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct MergeFailure {
    pub reason: MergeReason,
    pub path: Vec<Label>,
}

impl fmt::Display for MergeFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "{}", self.reason)
        } else {
            let path: Vec<&str> = self.path.iter().map(|l| l.as_str()).collect();
            write!(f, "{} at {}", self.reason, path.join("/"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProjectionError {
    #[error("projection onto {role} is undefined: {failure}")]
    Merge { role: Role, failure: MergeFailure },
}

/// Full merging of two local types, per the projection definition's merge
/// equations. Operands may be open (merging happens under binders during
/// projection); binders are made pairwise distinct and then aligned right
/// onto left at each `rec`/`rec` pair, realizing the same-variable rule up
/// to alpha.
pub fn merge(t1: &LocalType, t2: &LocalType) -> Result<LocalType, MergeFailure> {
    let mut used: BTreeSet<RecVar> = t1.free_vars();
    used.extend(t2.free_vars());
    let left = freshen_binders(t1, &mut used);
    let right = freshen_binders(t2, &mut used);
    let mut path = Vec::new();
    let mut binders = Vec::new();
    merge_in(&left, &right, &mut binders, &mut path)
}

/// Renames continuation-level binders so each is unique and avoids `used`.
/// Payload session types are inert and left untouched.
fn freshen_binders(t: &LocalType, used: &mut BTreeSet<RecVar>) -> LocalType {
    match t {
        LocalType::Internal { peer, branches } | LocalType::External { peer, branches } => {
            let branches = branches
                .iter()
                .map(|b| LocalBranch {
                    label: b.label.clone(),
                    payload: b.payload.clone(),
                    cont: freshen_binders(&b.cont, used),
                })
                .collect();
            if matches!(t, LocalType::Internal { .. }) {
                LocalType::Internal {
                    peer: peer.clone(),
                    branches,
                }
            } else {
                LocalType::External {
                    peer: peer.clone(),
                    branches,
                }
            }
        }
        LocalType::Rec(v, body) => {
            let name = if used.contains(v) {
                let mut i = 1u32;
                loop {
                    let candidate = RecVar::new(format!("{}'{}", v.as_str(), i));
                    if !used.contains(&candidate) {
                        break candidate;
                    }
                    i += 1;
                }
            } else {
                v.clone()
            };
            used.insert(name.clone());
            let body = if name == *v {
                body.as_ref().clone()
            } else {
                body.subst(v, &LocalType::Var(name.clone()))
            };
            LocalType::Rec(name, Box::new(freshen_binders(&body, used)))
        }
        other => other.clone(),
    }
}

/// Alpha-respecting payload comparison under the current binder stack.
fn payload_equal(s1: &Sort, s2: &Sort, binders: &[RecVar]) -> bool {
    fn canon(s: &Sort, binders: &[RecVar]) -> String {
        match s {
            Sort::Basic(b) => b.name().to_string(),
            Sort::Session(t) => {
                let mut out = String::new();
                canon_under(t, &mut binders.to_vec(), &mut out);
                out
            }
        }
    }
    fn canon_under(t: &LocalType, binders: &mut Vec<RecVar>, out: &mut String) {
        match t {
            LocalType::Internal { peer, branches } | LocalType::External { peer, branches } => {
                out.push(if matches!(t, LocalType::Internal { .. }) {
                    'I'
                } else {
                    'E'
                });
                out.push_str(peer.as_str());
                out.push('{');
                for b in branches {
                    out.push_str(b.label.as_str());
                    out.push('(');
                    out.push_str(&canon(&b.payload, binders));
                    out.push(')');
                    canon_under(&b.cont, binders, out);
                    out.push(';');
                }
                out.push('}');
            }
            LocalType::Rec(v, body) => {
                out.push('R');
                binders.push(v.clone());
                canon_under(body, binders, out);
                binders.pop();
            }
            LocalType::Var(v) => match binders.iter().rev().position(|b| b == v) {
                Some(i) => {
                    out.push('V');
                    out.push_str(&i.to_string());
                }
                None => {
                    out.push('F');
                    out.push_str(v.as_str());
                }
            },
            LocalType::End => out.push('0'),
        }
    }
    canon(s1, binders) == canon(s2, binders)
}

fn merge_in(
    t1: &LocalType,
    t2: &LocalType,
    binders: &mut Vec<RecVar>,
    path: &mut Vec<Label>,
) -> Result<LocalType, MergeFailure> {
    let fail = |reason: MergeReason, path: &[Label]| MergeFailure {
        reason,
        path: path.to_vec(),
    };
    match (t1, t2) {
        (LocalType::End, LocalType::End) => Ok(LocalType::End),
        (LocalType::Var(a), LocalType::Var(b)) => {
            if a == b {
                Ok(LocalType::Var(a.clone()))
            } else {
                Err(fail(MergeReason::BinderMismatch, path))
            }
        }
        (LocalType::Rec(v1, b1), LocalType::Rec(v2, b2)) => {
            // mu t.T merge mu t.T' = mu t.(T merge T'); alpha-align the right
            // binder onto the left one first.
            let aligned = if v1 == v2 {
                b2.as_ref().clone()
            } else {
                b2.subst(v2, &LocalType::Var(v1.clone()))
            };
            binders.push(v1.clone());
            let merged = merge_in(b1, &aligned, binders, path);
            binders.pop();
            Ok(LocalType::Rec(v1.clone(), Box::new(merged?)))
        }
        (
            LocalType::Internal {
                peer: p1,
                branches: bs1,
            },
            LocalType::Internal {
                peer: p2,
                branches: bs2,
            },
        ) => {
            if p1 != p2 {
                return Err(fail(MergeReason::PeerMismatch, path));
            }
            let labels1: BTreeSet<_> = bs1.iter().map(|b| &b.label).collect();
            let labels2: BTreeSet<_> = bs2.iter().map(|b| &b.label).collect();
            if labels1 != labels2 {
                return Err(fail(MergeReason::InternalChoiceClash, path));
            }
            let mut out = Vec::new();
            for b1 in bs1 {
                let b2 = bs2.iter().find(|b| b.label == b1.label).unwrap();
                if !payload_equal(&b1.payload, &b2.payload, binders) {
                    return Err(fail(MergeReason::InternalChoiceClash, path));
                }
                path.push(b1.label.clone());
                let cont = merge_in(&b1.cont, &b2.cont, binders, path)?;
                path.pop();
                out.push(LocalBranch {
                    label: b1.label.clone(),
                    payload: b1.payload.clone(),
                    cont,
                });
            }
            Ok(LocalType::Internal {
                peer: p1.clone(),
                branches: out,
            })
        }
        (
            LocalType::External {
                peer: p1,
                branches: bs1,
            },
            LocalType::External {
                peer: p2,
                branches: bs2,
            },
        ) => {
            if p1 != p2 {
                return Err(fail(MergeReason::PeerMismatch, path));
            }
            let mut out = Vec::new();
            for b1 in bs1 {
                match bs2.iter().find(|b| b.label == b1.label) {
                    Some(b2) => {
                        if !payload_equal(&b1.payload, &b2.payload, binders) {
                            let both_basic = matches!(b1.payload, Sort::Basic(_))
                                && matches!(b2.payload, Sort::Basic(_));
                            let reason = if both_basic {
                                MergeReason::LabelPayloadClash
                            } else {
                                MergeReason::PayloadMismatch
                            };
                            path.push(b1.label.clone());
                            let failure = fail(reason, path);
                            path.pop();
                            return Err(failure);
                        }
                        path.push(b1.label.clone());
                        let cont = merge_in(&b1.cont, &b2.cont, binders, path)?;
                        path.pop();
                        out.push(LocalBranch {
                            label: b1.label.clone(),
                            payload: b1.payload.clone(),
                            cont,
                        });
                    }
                    None => out.push(b1.clone()),
                }
            }
            for b2 in bs2 {
                if !bs1.iter().any(|b| b.label == b2.label) {
                    out.push(b2.clone());
                }
            }
            Ok(LocalType::External {
                peer: p1.clone(),
                branches: out,
            })
        }
        _ => Err(fail(MergeReason::ShapeMismatch, path)),
    }
}

/// Merges a nonempty family left to right.
pub fn merge_all<'a>(
    mut types: impl Iterator<Item = &'a LocalType>,
) -> Result<LocalType, MergeFailure> {
    let first = types
        .next()
        .expect("merge_all requires a nonempty family")
        .clone();
    types.try_fold(first, |acc, t| merge(&acc, t))
}

/// Projection of a global type onto one role.
pub fn project(g: &GlobalType, role: &Role) -> Result<LocalType, ProjectionError> {
    match g {
        GlobalType::Comm { from, to, branches } => {
            let project_branches = |path_role: &Role| -> Result<Vec<LocalBranch>, ProjectionError> {
                branches
                    .iter()
                    .map(|b| {
                        Ok(LocalBranch {
                            label: b.label.clone(),
                            payload: b.payload.clone(),
                            cont: project(&b.cont, path_role)?,
                        })
                    })
                    .collect()
            };
            if role == from {
                Ok(LocalType::Internal {
                    peer: to.clone(),
                    branches: project_branches(role)?,
                })
            } else if role == to {
                Ok(LocalType::External {
                    peer: from.clone(),
                    branches: project_branches(role)?,
                })
            } else {
                let projections: Vec<LocalType> = branches
                    .iter()
                    .map(|b| project(&b.cont, role))
                    .collect::<Result<_, _>>()?;
                merge_all(projections.iter()).map_err(|failure| ProjectionError::Merge {
                    role: role.clone(),
                    failure,
                })
            }
        }
        GlobalType::Rec(v, body) => {
            if body.roles().contains(role) || !g.free_vars().is_empty() {
                Ok(LocalType::Rec(v.clone(), Box::new(project(body, role)?)))
            } else {
                Ok(LocalType::End)
            }
        }
        GlobalType::Var(v) => Ok(LocalType::Var(v.clone())),
        GlobalType::End => Ok(LocalType::End),
    }
}

/// Projection results for every role of a global type.
#[derive(Debug, Clone)]
pub struct ProjectionTable {
    pub results: BTreeMap<Role, Result<LocalType, ProjectionError>>,
}

impl ProjectionTable {
    /// The total map, or every failing role.
    pub fn total(self) -> Result<BTreeMap<Role, LocalType>, Vec<(Role, ProjectionError)>> {
        let mut ok = BTreeMap::new();
        let mut bad = Vec::new();
        for (role, result) in self.results {
            match result {
                Ok(t) => {
                    ok.insert(role, t);
                }
                Err(e) => bad.push((role, e)),
            }
        }
        if bad.is_empty() {
            Ok(ok)
        } else {
            Err(bad)
        }
    }
}

/// Projects a global type onto all of its roles.
pub fn project_all(g: &GlobalType) -> ProjectionTable {
    ProjectionTable {
        results: g
            .roles()
            .into_iter()
            .map(|r| {
                let res = project(g, &r);
                (r, res)
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface::{parse, parse_local_in_scope, print_local};

    fn local(text: &str) -> LocalType {
        parse_local_in_scope(&Default::default(), text).unwrap()
    }

    #[test]
    fn external_merge_unions_disjoint_labels() {
        let a = local("A&greet(str) . end");
        let b = local("A&farewell(bool) . end");
        let merged = merge(&a, &b).unwrap();
        assert_eq!(merged, local("A&{ greet(str) . end, farewell(bool) . end }"));
    }

    #[test]
    fn internal_merge_requires_identical_shape() {
        let a = local("A(+)greet(str) . end");
        let b = local("A(+)farewell(bool) . end");
        assert_eq!(
            merge(&a, &b).unwrap_err().reason,
            MergeReason::InternalChoiceClash
        );
    }

    #[test]
    fn shared_label_payload_clash() {
        let a = local("A&greet(str) . end");
        let b = local("A&greet(bool) . end");
        assert_eq!(
            merge(&a, &b).unwrap_err().reason,
            MergeReason::LabelPayloadClash
        );
    }

    #[test]
    fn peer_mismatch_and_shape_mismatch() {
        let a = local("A(+)greet(str) . end");
        let b = local("B(+)greet(str) . end");
        assert_eq!(merge(&a, &b).unwrap_err().reason, MergeReason::PeerMismatch);
        // same prefixes, unmergeable continuations
        let c = local("A(+)greet(str) . end");
        let d = local("A(+)greet(str) . B&farewell(bool) . end");
        let failure = merge(&c, &d).unwrap_err();
        assert_eq!(failure.reason, MergeReason::ShapeMismatch);
        assert_eq!(failure.path, vec![crate::ident::Label::new("greet")]);
    }

    #[test]
    fn end_merges_with_end() {
        assert_eq!(merge(&LocalType::End, &LocalType::End).unwrap(), LocalType::End);
    }

    #[test]
    fn merge_aligns_alpha_variant_binders() {
        let a = local("rec t . A&{ l . t }");
        let b = local("rec u . A&{ m . u }");
        let merged = merge(&a, &b).unwrap();
        assert_eq!(merged, local("rec t . A&{ l . t, m . t }"));
    }

    #[test]
    fn projects_oauth_types() {
        let file = parse(
            "global G = s->c { login . c->a:passwd(str) . a->s:auth(bool) . end, cancel . c->a:quit . end }",
        )
        .unwrap();
        let g = file.global("G").unwrap();
        let ts = project(g, &Role::new("s")).unwrap();
        assert_eq!(
            ts,
            local("c(+){ login . a&auth(bool) . end, cancel . end }")
        );
        let ta = project(g, &Role::new("a")).unwrap();
        assert_eq!(
            ta,
            local("c&{ passwd(str) . s(+)auth(bool) . end, quit . end }")
        );
        let tc = project(g, &Role::new("c")).unwrap();
        assert_eq!(
            tc,
            local("s&{ login . a(+)passwd(str) . end, cancel . a(+)quit . end }")
        );
    }

    #[test]
    fn unprojectable_choice_fails_on_outsider() {
        let file = parse(
            "global G = A->B { greet(str) . C->A:farewell(bool) . end, farewell(bool) . C->A:greet(str) . end }",
        )
        .unwrap();
        let g = file.global("G").unwrap();
        let err = project(g, &Role::new("C")).unwrap_err();
        let ProjectionError::Merge { role, failure } = err;
        assert_eq!(role, Role::new("C"));
        assert_eq!(failure.reason, MergeReason::InternalChoiceClash);
    }

    #[test]
    fn rec_case_role_absent_yields_end() {
        let file = parse("global G = rec t . A->B { l . t }").unwrap();
        let g = file.global("G").unwrap();
        assert_eq!(project(g, &Role::new("C")).unwrap(), LocalType::End);
        let a = project(g, &Role::new("A")).unwrap();
        assert_eq!(print_local(&a), "rec t . B(+)l . t");
    }

    #[test]
    fn project_all_covers_every_role() {
        let file = parse(
            "global G = s->c { login . c->a:passwd(str) . a->s:auth(bool) . end, cancel . c->a:quit . end }",
        )
        .unwrap();
        let table = project_all(file.global("G").unwrap()).total().unwrap();
        assert_eq!(table.len(), 3);
        assert!(project_all(&GlobalType::End).total().unwrap().is_empty());
    }
}
