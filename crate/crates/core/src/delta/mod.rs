//! Tuning methods: the Mona adapter, the baseline family, and their
//! parameter accounting.

pub mod accounting;
pub mod attach;
pub mod baselines;
pub mod method;
pub mod mona;

pub use accounting::{count_method_on_preset, MethodCount};
pub use attach::{attach_method, detach_method, trainable_parameters};
pub use method::{MethodKind, MethodSpec};
pub use mona::{count_mona, mona_forward, MonaOptions, MonaParams, MonaVariant};
