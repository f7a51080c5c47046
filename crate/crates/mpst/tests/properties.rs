//! Randomized property suites for the type layer: unfolding, canonical
//! keys, parsing round-trips, merge laws, subtyping laws, and the LTS
//! invariants.

mod common;

use std::collections::BTreeSet;

use common::*;
use mpst::ident::{RecVar, Role, Session};
use mpst::lts::{context_transmissions, global_steps, reachable_contexts};
use mpst::projection::{merge, project, project_all};
use mpst::subtyping::{subtype_local, subtype};
use mpst::surface::{parse, print_context, print_global, print_local, print_process};
use mpst::types::{GlobalType, LocalBranch, LocalType, Sort, TransitionLabel, TypingContext};
use proptest::prelude::*;

fn sorted_branches(t: &LocalType) -> LocalType {
    match t {
        LocalType::Internal { peer, branches } | LocalType::External { peer, branches } => {
            let mut bs: Vec<LocalBranch> = branches
                .iter()
                .map(|b| LocalBranch {
                    label: b.label.clone(),
                    payload: b.payload.clone(),
                    cont: sorted_branches(&b.cont),
                })
                .collect();
            bs.sort_by(|a, b| a.label.cmp(&b.label));
            if matches!(t, LocalType::Internal { .. }) {
                LocalType::Internal {
                    peer: peer.clone(),
                    branches: bs,
                }
            } else {
                LocalType::External {
                    peer: peer.clone(),
                    branches: bs,
                }
            }
        }
        LocalType::Rec(v, body) => LocalType::Rec(v.clone(), Box::new(sorted_branches(body))),
        other => other.clone(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unfold_once_is_idempotent(seed: u64) {
        let t = gen_local(&mut rng(seed), &LocalGenCfg::default());
        let once = t.unfold_once().unwrap();
        prop_assert!(!matches!(once, LocalType::Rec(..) | LocalType::Var(_)));
        prop_assert_eq!(once.unfold_once().unwrap(), once);
    }

    #[test]
    fn canonical_key_ignores_binder_names(seed: u64) {
        let t = gen_local(&mut rng(seed), &LocalGenCfg::default());
        // rename every binder with a deterministic scrambling
        fn scramble(t: &LocalType, salt: u64) -> LocalType {
            match t {
                LocalType::Rec(v, body) => {
                    let fresh = RecVar::new(format!("{}zz{salt}", v.as_str()));
                    let renamed = body.subst(v, &LocalType::Var(fresh.clone()));
                    LocalType::Rec(fresh, Box::new(scramble(&renamed, salt + 1)))
                }
                LocalType::Internal { peer, branches } => LocalType::Internal {
                    peer: peer.clone(),
                    branches: branches
                        .iter()
                        .map(|b| LocalBranch {
                            label: b.label.clone(),
                            payload: b.payload.clone(),
                            cont: scramble(&b.cont, salt),
                        })
                        .collect(),
                },
                LocalType::External { peer, branches } => LocalType::External {
                    peer: peer.clone(),
                    branches: branches
                        .iter()
                        .map(|b| LocalBranch {
                            label: b.label.clone(),
                            payload: b.payload.clone(),
                            cont: scramble(&b.cont, salt),
                        })
                        .collect(),
                },
                other => other.clone(),
            }
        }
        let scrambled = scramble(&t, 1);
        prop_assert_eq!(t.canonical_key().unwrap(), scrambled.canonical_key().unwrap());
    }

    #[test]
    fn roles_are_stable_under_unfolding(seed: u64) {
        let g = gen_projectable_global(&mut rng(seed), &GlobalGenCfg::default());
        prop_assert_eq!(g.roles(), g.unfold_once().unwrap().roles());
    }

    #[test]
    fn local_types_round_trip(seed: u64) {
        let t = gen_local(&mut rng(seed), &LocalGenCfg::default());
        let printed = print_local(&t);
        let file = parse(&format!("local T = {printed}")).unwrap();
        prop_assert_eq!(file.local("T").unwrap(), &t);
    }

    #[test]
    fn global_types_round_trip(seed: u64) {
        let g = gen_projectable_global(&mut rng(seed), &GlobalGenCfg::default());
        let printed = print_global(&g);
        let file = parse(&format!("global G = {printed}")).unwrap();
        prop_assert_eq!(file.global("G").unwrap(), &g);
    }

    #[test]
    fn contexts_and_processes_round_trip(seed: u64) {
        let mut r = rng(seed);
        let g = gen_projectable_global(&mut r, &GlobalGenCfg {
            basic_payloads_only: true,
            ..GlobalGenCfg::default()
        });
        let session = Session::new("s");
        let (process, ctx) = synthesize_session(&g, &session, &mut r);
        let printed_ctx = print_context(&ctx);
        let file = parse(&format!("context C = {printed_ctx}")).unwrap();
        prop_assert_eq!(file.context("C").unwrap(), &ctx);
        let printed_p = print_process(&process);
        let file2 = parse(&format!("process P = {printed_p}")).unwrap();
        prop_assert_eq!(file2.process("P").unwrap(), &process);
    }

    #[test]
    fn subtyping_is_reflexive(seed: u64) {
        let t = gen_local(&mut rng(seed), &LocalGenCfg::default());
        prop_assert!(subtype_local(&t, &t));
    }

    #[test]
    fn subtyping_is_transitive_along_generated_chains(seed: u64) {
        let mut r = rng(seed);
        let t = gen_local(&mut r, &LocalGenCfg::default());
        let u = gen_supertype(&mut r, &t);
        let v = gen_supertype(&mut r, &u);
        prop_assert!(subtype_local(&t, &u));
        prop_assert!(subtype_local(&u, &v));
        prop_assert!(subtype_local(&t, &v));
    }

    #[test]
    fn unfolding_preserves_subtyping_both_ways(seed: u64) {
        let t = gen_local(&mut rng(seed), &LocalGenCfg::default());
        let u = t.unfold_once().unwrap();
        prop_assert!(subtype_local(&t, &u));
        prop_assert!(subtype_local(&u, &t));
    }

    #[test]
    fn merge_is_an_upper_bound(seed: u64) {
        let mut r = rng(seed);
        // merging arises from projections of a shared choice, so derive the
        // family from one global type's outsider projections
        let g = gen_projectable_global(&mut r, &GlobalGenCfg::default());
        for role in g.roles() {
            let t = project(&g, &role).unwrap();
            prop_assert!(subtype_local(&t, &t));
        }
        // direct check: any mergeable pair is below its merge
        let a = gen_local(&mut r, &LocalGenCfg { max_depth: 3, ..Default::default() });
        let b = gen_local(&mut r, &LocalGenCfg { max_depth: 3, ..Default::default() });
        if let Ok(m) = merge(&a, &b) {
            prop_assert!(subtype_local(&a, &m), "left operand below merge");
            prop_assert!(subtype_local(&b, &m), "right operand below merge");
        }
    }

    #[test]
    fn merge_is_commutative_and_associative_up_to_reordering(seed: u64) {
        let mut r = rng(seed);
        let cfg = LocalGenCfg { max_depth: 3, ..Default::default() };
        let a = gen_local(&mut r, &cfg);
        let b = gen_local(&mut r, &cfg);
        let c = gen_local(&mut r, &cfg);
        let ab = merge(&a, &b);
        let ba = merge(&b, &a);
        prop_assert_eq!(ab.is_ok(), ba.is_ok());
        if let (Ok(x), Ok(y)) = (&ab, &ba) {
            prop_assert_eq!(
                sorted_branches(x).canonical_key().unwrap(),
                sorted_branches(y).canonical_key().unwrap()
            );
        }
        let left = ab.and_then(|x| merge(&x, &c));
        let right = merge(&b, &c).and_then(|x| merge(&a, &x));
        prop_assert_eq!(left.is_ok(), right.is_ok());
        if let (Ok(x), Ok(y)) = (left, right) {
            prop_assert_eq!(
                sorted_branches(&x).canonical_key().unwrap(),
                sorted_branches(&y).canonical_key().unwrap()
            );
        }
    }

    #[test]
    fn projection_of_absent_role_is_end(seed: u64) {
        let g = gen_projectable_global(&mut rng(seed), &GlobalGenCfg::default());
        let outsider = Role::new("zz");
        prop_assert_eq!(project(&g, &outsider).unwrap(), LocalType::End);
    }

    #[test]
    fn projection_commutes_with_unfolding(seed: u64) {
        let g = gen_projectable_global(&mut rng(seed), &GlobalGenCfg::default());
        let unfolded = g.unfold_once().unwrap();
        for role in g.roles() {
            let direct = project(&unfolded, &role).unwrap();
            let via = project(&g, &role).unwrap().unfold_once().unwrap();
            // projections of an unfolding may still carry head binders when
            // the body repeats them; compare after unfolding both
            prop_assert_eq!(
                direct.unfold_once().unwrap().canonical_key().unwrap(),
                via.canonical_key().unwrap()
            );
        }
    }

    #[test]
    fn subtyping_inversion_on_internal_heads(seed: u64) {
        let mut r = rng(seed);
        let t = gen_local(&mut r, &LocalGenCfg::default());
        let u = gen_supertype(&mut r, &t);
        if !subtype_local(&t, &u) {
            return Ok(());
        }
        if let LocalType::Internal { peer, branches } = u.unfold_once().unwrap() {
            let unfolded = t.unfold_once().unwrap();
            let LocalType::Internal {
                peer: tp,
                branches: tbs,
            } = &unfolded
            else {
                return Err(TestCaseError::fail("inversion: subtype head is not internal"));
            };
            prop_assert_eq!(&peer, tp);
            for b in &branches {
                let tb = tbs.iter().find(|x| x.label == b.label);
                prop_assert!(tb.is_some(), "superset of output labels");
                let tb = tb.unwrap();
                prop_assert!(subtype(&b.payload, &tb.payload), "contravariant payloads");
                prop_assert!(subtype_local(&tb.cont, &b.cont), "covariant continuations");
            }
        }
    }

    #[test]
    fn global_steps_commute_with_unfolding(seed: u64) {
        let session = Session::new("s");
        let g = gen_projectable_global(&mut rng(seed), &GlobalGenCfg::default());
        let render = |steps: Vec<mpst::lts::GlobalStep>| -> BTreeSet<String> {
            steps
                .into_iter()
                .map(|s| format!("{} => {}", s.label, print_global(&s.target)))
                .collect()
        };
        let folded = render(global_steps(&g, &session).unwrap());
        let unfolded = render(global_steps(&g.unfold_once().unwrap(), &session).unwrap());
        prop_assert_eq!(folded, unfolded);
    }

    #[test]
    fn context_reduction_is_deterministic_and_domain_preserving(seed: u64) {
        let mut r = rng(seed);
        let g = gen_projectable_global(&mut r, &GlobalGenCfg::default());
        let session = Session::new("s");
        let ctx = mpst::analysis::projection_context(&g, &session).unwrap();
        let graph = reachable_contexts(&ctx, &session, 5_000).unwrap();
        let domain = ctx.domain();
        for node in &graph.nodes {
            prop_assert_eq!(&node.domain(), &domain, "domain preservation");
        }
        for n in 0..graph.nodes.len() {
            let mut seen: Vec<(String, usize)> = Vec::new();
            for e in graph.outgoing(n) {
                let key = e.label.to_string();
                if let Some((_, to)) = seen.iter().find(|(k, _)| *k == key) {
                    prop_assert_eq!(*to, e.to, "determinism per label");
                } else {
                    seen.push((key, e.to));
                }
            }
        }
    }

    #[test]
    fn transmissions_only_touch_their_subjects(seed: u64) {
        let mut r = rng(seed);
        let g = gen_projectable_global(&mut r, &GlobalGenCfg::default());
        let session = Session::new("s");
        let ctx = mpst::analysis::projection_context(&g, &session).unwrap();
        for step in context_transmissions(&ctx, &session) {
            let TransitionLabel::Transmission { from, to, .. } = &step.label else {
                panic!("transmission expected");
            };
            for (key, sort) in ctx.iter() {
                let mpst::types::ContextKey::Endpoint(s, role) = key else {
                    continue;
                };
                if s == &session && (role == from || role == to) {
                    continue;
                }
                prop_assert_eq!(step.target.get(key), Some(sort), "frame property");
            }
        }
    }
}

#[test]
fn merge_requires_payload_closed_equality_on_shared_labels() {
    // session payloads compare up to alpha, so alpha-variant payloads merge
    let file = parse(
        r#"
        local A1 = A&l(<rec t . B(+)m(int) . t>) . end
        local A2 = A&l(<rec u . B(+)m(int) . u>) . end
        local B1 = A&l(<rec t . B(+)m(bool) . t>) . end
        "#,
    )
    .unwrap();
    let merged = merge(file.local("A1").unwrap(), file.local("A2").unwrap()).unwrap();
    assert_eq!(&merged, file.local("A1").unwrap());
    let failure = merge(file.local("A1").unwrap(), file.local("B1").unwrap()).unwrap_err();
    assert_eq!(failure.reason, mpst::projection::MergeReason::PayloadMismatch);
}

#[test]
fn projection_table_matches_per_role_projection() {
    let mut r = rng(7);
    for _ in 0..25 {
        let g = gen_projectable_global(&mut r, &GlobalGenCfg::default());
        let table = project_all(&g).total().unwrap();
        assert_eq!(
            table.keys().cloned().collect::<BTreeSet<Role>>(),
            g.roles()
        );
        for (role, t) in table {
            assert_eq!(project(&g, &role).unwrap(), t);
        }
    }
}

#[test]
fn structural_oracle_distinguishes_fold_from_unfold() {
    // independent structural comparison: a plain recursive walk
    fn structurally_equal(a: &LocalType, b: &LocalType) -> bool {
        match (a, b) {
            (LocalType::End, LocalType::End) => true,
            (LocalType::Var(x), LocalType::Var(y)) => x == y,
            (LocalType::Rec(x, bx), LocalType::Rec(y, by)) => x == y && structurally_equal(bx, by),
            (
                LocalType::Internal { peer: p1, branches: b1 },
                LocalType::Internal { peer: p2, branches: b2 },
            )
            | (
                LocalType::External { peer: p1, branches: b1 },
                LocalType::External { peer: p2, branches: b2 },
            ) => {
                p1 == p2
                    && b1.len() == b2.len()
                    && b1.iter().zip(b2).all(|(x, y)| {
                        x.label == y.label
                            && x.payload == y.payload
                            && structurally_equal(&x.cont, &y.cont)
                    })
            }
            _ => false,
        }
    }
    let file = parse("local T = rec t . p(+)l . t").unwrap();
    let t = file.local("T").unwrap();
    let unfolded = t.unfold_once().unwrap();
    assert!(!structurally_equal(t, &unfolded));
    assert_ne!(
        t.canonical_key().unwrap(),
        unfolded.canonical_key().unwrap()
    );
}

#[test]
fn reachable_contexts_respects_the_limit() {
    let file = parse(
        "context C = { s[p]: rec t . q(+){ l1 . t, l2 . t }, s[q]: rec t . p&{ l1 . t, l2 . t } }",
    )
    .unwrap();
    let ctx = file.context("C").unwrap();
    let err = reachable_contexts(ctx, &Session::new("s"), 0).unwrap_err();
    assert_eq!(err.0, 0);
    assert!(reachable_contexts(ctx, &Session::new("s"), 100).is_ok());
}

#[test]
fn generated_globals_respect_the_declared_bounds() {
    let mut r = rng(11);
    for _ in 0..50 {
        let g = gen_projectable_global(&mut r, &GlobalGenCfg::default());
        assert!(g.roles().len() <= 4);
        assert!(g.count_recs() <= 2);
        fn max_width(g: &GlobalType) -> usize {
            match g {
                GlobalType::Comm { branches, .. } => branches
                    .iter()
                    .map(|b| max_width(&b.cont))
                    .max()
                    .unwrap_or(0)
                    .max(branches.len()),
                GlobalType::Rec(_, body) => max_width(body),
                _ => 0,
            }
        }
        assert!(max_width(&g) <= 3);
        assert!(g.is_well_formed());
    }
}
