//! The three index spaces used by a training step.
//!
//! A [`FeatureId`] addresses the full vocabulary, a [`VirtualId`] addresses
//! the unique-feature list of one deduplicated global batch, and a
//! [`SlotId`] addresses one slot of a worker's cache buffer. They are
//! distinct types so that one can never be passed where another is
//! expected.

use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! index_type {
    ($(#[$meta:meta])* $name:ident, $repr:ty) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name($repr);

        impl $name {
            #[inline]
            pub const fn new(value: $repr) -> Self {
                Self(value)
            }

            #[inline]
            pub const fn get(self) -> $repr {
                self.0
            }

            #[inline]
            pub const fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt(f)
            }
        }
    };
}

index_type!(
    /// Index of one categorical feature in the full vocabulary.
    FeatureId,
    u64
);
index_type!(
    /// Position of a feature in a [`DedupBatch`](crate::DedupBatch)'s
    /// unique-feature list.
    VirtualId,
    u32
);
index_type!(
    /// Slot index inside one worker's cache buffer.
    SlotId,
    u32
);
