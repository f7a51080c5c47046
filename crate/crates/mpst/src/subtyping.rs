//! The coinductive session subtyping relation on closed local types and
//! basic sorts, and the pointwise ordering on typing contexts.

use std::collections::BTreeSet;

use crate::types::{BasicSort, LocalType, Sort, TypeKey, TypingContext};

/// Subtyping on basic sorts: reflexivity plus `int <: real`.
pub fn basic_subtype(b1: BasicSort, b2: BasicSort) -> bool {
    b1 == b2 || (b1 == BasicSort::Int && b2 == BasicSort::Real)
}

/// Decides `s1` subtype-of `s2`. Queries mixing basic and session sorts are
/// false; session operands with free recursion variables are related by no
/// rule, so the query is false.
pub fn subtype(s1: &Sort, s2: &Sort) -> bool {
    match (s1, s2) {
        (Sort::Basic(b1), Sort::Basic(b2)) => basic_subtype(*b1, *b2),
        (Sort::Session(t1), Sort::Session(t2)) => subtype_local(t1, t2),
        _ => false,
    }
}

/// Subtyping on local types.
pub fn subtype_local(t1: &LocalType, t2: &LocalType) -> bool {
    if !t1.free_vars().is_empty() || !t2.free_vars().is_empty() {
        return false;
    }
    let mut visited = BTreeSet::new();
    local_subtype(t1, t2, &mut visited)
}

fn sort_subtype(s1: &Sort, s2: &Sort, visited: &mut BTreeSet<(TypeKey, TypeKey)>) -> bool {
    match (s1, s2) {
        (Sort::Basic(b1), Sort::Basic(b2)) => basic_subtype(*b1, *b2),
        (Sort::Session(t1), Sort::Session(t2)) => local_subtype(t1, t2, visited),
        _ => false,
    }
}

fn local_subtype(t1: &LocalType, t2: &LocalType, visited: &mut BTreeSet<(TypeKey, TypeKey)>) -> bool {
    // Every cycle passes through a recursion unfolding, so the coinductive
    // hypothesis set only needs entries at recursion heads.
    if matches!(t1, LocalType::Rec(..)) || matches!(t2, LocalType::Rec(..)) {
        let key = (t1.canonical_key_unchecked(), t2.canonical_key_unchecked());
        // Greatest fixed point: assumed pairs are accepted on revisit.
        if !visited.insert(key) {
            return true;
        }
    }
    // Unfold both sides (Sub-muL / Sub-muR). Open or non-contractive
    // operands have no applicable rule.
    let Ok(u1) = t1.unfold_head() else {
        return false;
    };
    let Ok(u2) = t2.unfold_head() else {
        return false;
    };
    match (u1.as_ref(), u2.as_ref()) {
        (LocalType::End, LocalType::End) => true,
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
            // Sub-(+): the subtype offers a superset of output labels, with
            // contravariant payloads and covariant continuations.
            p1 == p2
                && bs2.iter().all(|b2| {
                    bs1.iter().any(|b1| {
                        b1.label == b2.label
                            && sort_subtype(&b2.payload, &b1.payload, visited)
                            && local_subtype(&b1.cont, &b2.cont, visited)
                    })
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
            // Sub-&: the subtype accepts a subset of input labels, with
            // covariant payloads and continuations.
            p1 == p2
                && bs1.iter().all(|b1| {
                    bs2.iter().any(|b2| {
                        b1.label == b2.label
                            && sort_subtype(&b1.payload, &b2.payload, visited)
                            && local_subtype(&b1.cont, &b2.cont, visited)
                    })
                })
        }
        _ => false,
    }
}

/// Pointwise context ordering: equal domains and entrywise subtyping.
pub fn context_subtype(g1: &TypingContext, g2: &TypingContext) -> bool {
    if g1.domain() != g2.domain() {
        return false;
    }
    g1.iter().all(|(k, s1)| {
        let s2 = g2.get(k).expect("domains are equal");
        subtype(s1, s2)
    })
}
