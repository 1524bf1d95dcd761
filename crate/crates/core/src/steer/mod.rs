//! Latent steering: per-step history perturbation, fusion, sampling, and
//! the single and ranked generation loops.

mod config;
mod generate;
mod perturb;
mod sampling;

pub use config::{SteeringConfig, SteeringPatch};
pub(crate) use generate::finish_record;
pub use generate::{
    attribute_score, generate, generate_ranked, generate_streaming, prime_history, select_best, Ranked, SampleRecord,
    TokenEvent, Variant,
};
pub use perturb::{perturb_past, steering_objective, DeltaH, ObjectiveValue, SteerState, MIN_GRAD_NORM};
pub use sampling::{fuse_distributions, kl_divergence, sample_top_k, top_k_ids, Fused, FUSION_FLOOR};
