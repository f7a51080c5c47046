//! A toolkit for synchronous multiparty session types: a surface language
//! for global types, local types, typing contexts, and session pi-calculus
//! processes; endpoint projection with full merging; coinductive subtyping;
//! labelled transition semantics for global types and typing contexts;
//! decision procedures for context safety, deadlock-freedom, and liveness
//! under strong pair-fairness; association checking between global types
//! and contexts; and a type checker and bounded executor for processes.

pub mod analysis;
pub mod harness;
pub mod ident;
pub mod lts;
pub mod picalc;
pub mod projection;
pub mod subtyping;
pub mod surface;
pub mod typing;
pub mod types;

pub use ident::{Label, ProcVar, RecVar, Role, Session, ValVar};
pub use types::{
    BasicSort, ContextKey, GlobalBranch, GlobalType, LocalBranch, LocalType, Sort,
    TransitionLabel, TypingContext,
};
