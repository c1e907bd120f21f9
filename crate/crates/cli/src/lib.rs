//! Pipeline behind the `edeva` command: configuration and the stages that
//! simulate, train, evaluate, correlate, and ablate.

pub mod config;
pub mod pipeline;

pub use config::{RunConfig, UsageError};

/// Exit code for an error: 2 for usage and input problems, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    use edeva_core::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::InvalidInput(_)
                | E::WeightedSamplingUndefined(_)
                | E::SingleClass(_)
                | E::Missing(_)
                | E::UnsupportedKind(_) => 2,
                _ => 1,
            };
        }
    }
    1
}
