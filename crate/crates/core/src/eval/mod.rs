//! Baselines, fluency scoring, and the experiment harness.

mod experiment;
mod weighted;

pub use experiment::{
    aggregate, derive_seed, run_experiment, Aggregate, AttributeSpec, Candidate, EvalReport, Experiment,
    ExperimentConfig, ExperimentOutcome, ExperimentPlan, ExperimentRecord, ReportRow, RunMatrix, CONFIG_FILE,
    REPORT_CSV, REPORT_JSON, REPORT_MD, SAMPLES_FILE,
};
pub use weighted::{generate_weighted, weighted_decode_bow, weighted_decode_discrim, WdOptions};

use crate::error::{Error, Result};
use crate::lm::{TokenId, TransformerLm};
use crate::scalar::Scalar;

/// `exp(−log p(tokens) / (n − 1))` under `evaluator`.
pub fn perplexity<S: Scalar>(evaluator: &TransformerLm<S>, tokens: &[TokenId]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::Contract(format!("perplexity needs at least 2 tokens, got {}", tokens.len())));
    }
    Ok((-evaluator.sequence_logprob(tokens)? / (tokens.len() - 1) as f64).exp())
}

/// [`perplexity`] of `text` tokenised by the evaluator's own tokenizer.
pub fn text_perplexity<S: Scalar>(evaluator: &TransformerLm<S>, text: &str) -> Result<f64> {
    perplexity(evaluator, &evaluator.tokenizer().encode(text))
}
