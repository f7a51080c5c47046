//! Interned identifier newtypes for roles, labels, sessions, and variables.

use std::borrow::Borrow;
use std::fmt;
use std::sync::Arc;

macro_rules! name_type {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(Arc<str>);

        impl $name {
            pub fn new(s: impl AsRef<str>) -> Self {
                debug_assert!(!s.as_ref().is_empty(), "identifiers must be nonempty");
                $name(Arc::from(s.as_ref()))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!(stringify!($name), "({})"), &self.0)
            }
        }

        impl Borrow<str> for $name {
            fn borrow(&self) -> &str {
                &self.0
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name::new(s)
            }
        }
    };
}

name_type! {
    /// A protocol participant.
    Role
}
name_type! {
    /// A message label.
    Label
}
name_type! {
    /// A recursion variable in a global or local type.
    RecVar
}
name_type! {
    /// A session name.
    Session
}
name_type! {
    /// A process variable bound by `def`.
    ProcVar
}
name_type! {
    /// A value variable bound by branching or definition parameters.
    ValVar
}
