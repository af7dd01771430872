//! Positioning error metrics.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::neural_net::{ConfigHash, TrainedModel, TrainingData};
use crate::sslb::{evaluation_rows, FeatureRows, Neighbor, Scheme};

/// Linear interpolation between order statistics at 0-based position
/// `q * (n - 1)`. `sorted` must be ascending and non-empty; `q` is clamped
/// to `[0, 1]`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Error below which a fraction `q` of users fall.
pub fn accuracy_at_quantile(errors: &[f64], q: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::domain("no errors to summarize"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::domain(format!("quantile {q} outside [0, 1]")));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&sorted, q))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scheme: String,
    pub seed: u64,
    pub config_hash: ConfigHash,
    pub errors: Vec<f64>,
    pub err_at_90: f64,
    pub mean_err: f64,
    pub wall_time: f64,
}

impl EvalReport {
    pub fn from_errors(scheme: String, seed: u64, config_hash: ConfigHash, errors: Vec<f64>, wall_time: f64) -> Result<Self> {
        let err_at_90 = accuracy_at_quantile(&errors, 0.9)?;
        let mean_err = errors.iter().sum::<f64>() / errors.len() as f64;
        Ok(Self {
            scheme,
            seed,
            config_hash,
            errors,
            err_at_90,
            mean_err,
            wall_time,
        })
    }
}

/// Euclidean position error of every row.
pub fn row_errors(model: &TrainedModel, rows: &FeatureRows<'_>) -> Result<Vec<f64>> {
    if rows.input_dim() != model.spec().input_dim {
        return Err(Error::config(format!(
            "model expects {} inputs, evaluation rows have {}",
            model.spec().input_dim,
            rows.input_dim()
        )));
    }
    let out = rows.predict(&model.params);
    Ok(out
        .position
        .iter()
        .zip(rows.targets())
        .map(|(p, t)| (p[0] - t.position[0]).hypot(p[1] - t.position[1]))
        .collect())
}

pub fn evaluate(model: &TrainedModel, rows: &FeatureRows<'_>, wall_time: f64) -> Result<EvalReport> {
    EvalReport::from_errors(
        model.provenance.scheme.clone(),
        model.provenance.seed,
        model.provenance.config_hash,
        row_errors(model, rows)?,
        wall_time,
    )
}

/// Scheme encoded in a model's provenance label, e.g. `SSLB+linear@0.5`.
pub fn model_scheme(model: &TrainedModel) -> Result<Scheme> {
    let label = &model.provenance.scheme;
    let name = label.split(['+', '@']).next().unwrap_or_default();
    Scheme::parse(name).map_err(|_| Error::config(format!("model carries unknown scheme tag {label:?}")))
}

/// Position errors of `model` on `test`, building inputs as its scheme requires.
pub fn position_errors(model: &TrainedModel, test: &Dataset, labeled: &Dataset, refs: Option<&[Neighbor]>) -> Result<Vec<f64>> {
    let rows = evaluation_rows(model_scheme(model)?, test, labeled, refs)?;
    row_errors(model, &rows)
}
