//! Entropy and mutual-information measures over predictive distributions.
//!
//! All quantities are in nats. The mutual information here is the epistemic
//! signal: predictive entropy of the ensemble mean minus the expected
//! per-member entropy, so a deterministic model always scores zero and
//! member disagreement is what raises it.

use crate::inference::PredictiveDistribution;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum UncertaintyError {
    #[error("epsilon must lie in (0, 0.5), got {0}")]
    EpsilonRange(f64),
}

/// Decomposition of predictive uncertainty for a single input.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyReport {
    /// Entropy of the mean predictive distribution (total uncertainty).
    pub predictive_entropy: f64,
    /// Weighted mean of per-member entropies (aleatoric part).
    pub expected_entropy: f64,
    /// Epistemic part: `predictive_entropy - expected_entropy`, clamped at
    /// zero against sub-1e-12 rounding.
    pub mutual_information: f64,
}

/// Shannon entropy in nats with the `0 ln 0 = 0` convention.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter()
        .map(|&v| if v > 0.0 { -v * v.ln() } else { 0.0 })
        .sum()
}

/// Epistemic uncertainty of an ensemble prediction.
pub fn mutual_information(pd: &PredictiveDistribution) -> UncertaintyReport {
    let predictive_entropy = entropy(&pd.mean_probs);
    let expected_entropy: f64 = pd
        .member_probs
        .iter()
        .zip(&pd.weights)
        .map(|(row, &w)| w * entropy(row))
        .sum();
    let mutual_information = (predictive_entropy - expected_entropy).max(0.0);
    UncertaintyReport {
        predictive_entropy,
        expected_entropy,
        mutual_information,
    }
}

/// The binary-entropy comparison level `H(eps)` used to decide whether a
/// model counts as "highly confident": epistemic uncertainty above this
/// value flags a prediction as unreliable.
pub fn high_confidence_threshold(epsilon: f64) -> Result<f64, UncertaintyError> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(UncertaintyError::EpsilonRange(epsilon));
    }
    Ok(-epsilon * epsilon.ln() - (1.0 - epsilon) * (1.0 - epsilon).ln())
}
