use serde::{Deserialize, Serialize};

use crate::domains::{class_conditional_knn_kl, dataset_kl, DomainDataset, KlReduction};
use crate::nn::ModelState;
use crate::{Error, Result};

/// Inputs of the MVRML generalization bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundInputs {
    pub empirical_risk: f64,
    pub sup_divergence: f64,
    /// Uniform stability with respect to the trajectory sequences.
    pub beta1: f64,
    /// Uniform stability with respect to the tasks within a sequence.
    pub beta2: f64,
    pub n_sequences: u64,
    pub delta: f64,
    pub loss_bound_m: f64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        let key = |k: &str, m: &str| {
            Err(Error::Config {
                key: k.into(),
                message: m.into(),
            })
        };
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if !nonneg(self.empirical_risk) {
            return key("empirical_risk", "must be a finite non-negative number");
        }
        if !nonneg(self.sup_divergence) {
            return key("sup_divergence", "must be a finite non-negative number");
        }
        if !nonneg(self.beta1) {
            return key("beta1", "must be a finite non-negative number");
        }
        if !nonneg(self.beta2) {
            return key("beta2", "must be a finite non-negative number");
        }
        if self.n_sequences == 0 {
            return key("n_sequences", "must be positive");
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return key("delta", "must lie in (0, 1)");
        }
        if !(self.loss_bound_m > 0.0 && self.loss_bound_m.is_finite()) {
            return key("loss_bound_m", "must be positive");
        }
        Ok(())
    }
}

/// `risk + sup_div / 2 + 2 beta1 + (4 n beta1 + M) sqrt(ln(1/delta) / 2n) + 2 beta2`.
pub fn theorem1_bound(inputs: &BoundInputs) -> Result<f64> {
    inputs.validate()?;
    Ok(terms(inputs).iter().sum())
}

fn terms(i: &BoundInputs) -> [f64; 5] {
    let n = i.n_sequences as f64;
    [
        i.empirical_risk,
        0.5 * i.sup_divergence,
        2.0 * i.beta1,
        (4.0 * n * i.beta1 + i.loss_bound_m) * ((1.0 / i.delta).ln() / (2.0 * n)).sqrt(),
        2.0 * i.beta2,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub format_version: u32,
    pub inputs: BoundInputs,
    pub risk_term: f64,
    pub divergence_term: f64,
    pub sequence_stability_term: f64,
    pub concentration_term: f64,
    pub task_stability_term: f64,
    pub value: f64,
    /// Data estimates behind `empirical_risk` and `sup_divergence`, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimated_terms: Option<BoundTerms>,
}

impl BoundReport {
    pub fn new(inputs: BoundInputs) -> Result<Self> {
        let value = theorem1_bound(&inputs)?;
        let [risk_term, divergence_term, sequence_stability_term, concentration_term, task_stability_term] =
            terms(&inputs);
        Ok(Self {
            format_version: super::ANALYSIS_FORMAT_VERSION,
            inputs,
            risk_term,
            divergence_term,
            sequence_stability_term,
            concentration_term,
            task_stability_term,
            value,
            estimated_terms: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceMethod {
    /// Closed-form Gaussian class-conditional KL from generative specs.
    ClosedForm,
    /// k-NN sample estimate; approximate.
    KnnApproximate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundTermOptions {
    /// Use the k-NN estimate when a dataset lacks a generative spec.
    pub knn_fallback: bool,
    pub knn_k: usize,
}

impl Default for BoundTermOptions {
    fn default() -> Self {
        Self {
            knn_fallback: true,
            knn_k: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    /// Eval-mode mean cross-entropy over the pooled sources.
    pub empirical_risk: f64,
    /// Largest per-source divergence to the target.
    pub sup_divergence: f64,
    pub per_source_divergence: Vec<f64>,
    pub divergence_method: DivergenceMethod,
}

/// Empirical risk over the pooled sources and the largest source-to-target
/// divergence proxy (class-conditional KL, mean over classes).
pub fn estimate_bound_terms(
    model: &ModelState,
    sources: &[DomainDataset],
    target: &DomainDataset,
    options: BoundTermOptions,
) -> Result<BoundTerms> {
    if sources.is_empty() {
        return Err(Error::Empty("bound estimation needs source domains".into()));
    }
    let mut loss_sum = 0.0;
    let mut count = 0usize;
    for d in sources {
        let (loss, _) = model.evaluate(d.features.view(), &d.labels)?;
        loss_sum += loss * d.len() as f64;
        count += d.len();
    }
    let closed = target.spec.is_some() && sources.iter().all(|d| d.spec.is_some());
    let (method, per_source) = if closed {
        let v = sources
            .iter()
            .map(|d| dataset_kl(d, target, KlReduction::MeanOverClasses))
            .collect::<Result<Vec<_>>>()?;
        (DivergenceMethod::ClosedForm, v)
    } else if options.knn_fallback {
        let k = model.arch().num_classes;
        let v = sources
            .iter()
            .map(|d| class_conditional_knn_kl(d, target, k, options.knn_k, KlReduction::MeanOverClasses))
            .collect::<Result<Vec<_>>>()?;
        (DivergenceMethod::KnnApproximate, v)
    } else {
        return Err(Error::Unsupported(
            "closed-form divergence needs generative specs; enable the k-NN fallback for loaded data".into(),
        ));
    };
    Ok(BoundTerms {
        empirical_risk: loss_sum / count as f64,
        sup_divergence: per_source.iter().copied().fold(0.0, f64::max),
        per_source_divergence: per_source,
        divergence_method: method,
    })
}
