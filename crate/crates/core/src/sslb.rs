//! Reference pairing, the biased teacher, KDE confidence weighting and the
//! weighted student, together with the SL / SLR / SSLR baselines.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::metrics::quantile_sorted;
use crate::channel_sim::CirTensor;
use crate::dataset::{unit_energy_scale, write_features, Dataset};
use crate::error::{Error, Result};
use crate::neural_net::{
    init_params, predict_with, train, ConfigHash, NetworkSpec, Outputs, Params, Provenance, Target,
    TrainConfig, TrainedModel, TrainingData,
};

/// Nearest labeled sample of a query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    /// Squared Frobenius distance.
    pub distance_sq: f64,
}

/// Squared Frobenius distance, or `None` once it provably exceeds `bound`.
fn distance_sq_bounded(a: &CirTensor, b: &CirTensor, bound: f64) -> Option<f64> {
    let (n_bs, _, _) = a.dims();
    let mut acc = 0.0f64;
    for bs in 0..n_bs {
        for (x, y) in a.bs_matrix(bs).iter().zip(b.bs_matrix(bs)) {
            let re = x.re as f64 - y.re as f64;
            let im = x.im as f64 - y.im as f64;
            acc += re * re + im * im;
        }
        if acc > bound {
            return None;
        }
    }
    Some(acc)
}

pub fn frobenius_distance_sq(a: &CirTensor, b: &CirTensor) -> f64 {
    distance_sq_bounded(a, b, f64::INFINITY).expect("unbounded distance")
}

fn nearest(query: &CirTensor, candidates: &[&CirTensor], exclude: Option<usize>) -> Result<Neighbor> {
    let mut best: Option<Neighbor> = None;
    for (index, cand) in candidates.iter().enumerate() {
        if Some(index) == exclude {
            continue;
        }
        let bound = best.map_or(f64::INFINITY, |b| b.distance_sq);
        if let Some(d) = distance_sq_bounded(query, cand, bound) {
            // strict comparison keeps the lowest index on ties
            if best.is_none_or(|b| d < b.distance_sq) {
                best = Some(Neighbor { index, distance_sq: d });
            }
        }
    }
    best.ok_or_else(|| Error::domain("no candidate reference samples"))
}

/// Exhaustive nearest neighbor of `query` among the labeled CIRs.
pub fn knn_reference(query: &CirTensor, labeled: &Dataset, exclude: Option<usize>) -> Result<Neighbor> {
    if query.dims() != labeled.dims() {
        return Err(Error::Shape {
            expected: format!("{:?}", labeled.dims()),
            actual: format!("{:?}", query.dims()),
        });
    }
    nearest(query, &labeled.cirs(), exclude)
}

/// References for every sample of `queries`. With `exclude_self` the query
/// set must be the labeled set and each sample skips itself.
pub fn reference_indices(queries: &Dataset, labeled: &Dataset, exclude_self: bool) -> Result<Vec<Neighbor>> {
    if queries.dims() != labeled.dims() {
        return Err(Error::Shape {
            expected: format!("{:?}", labeled.dims()),
            actual: format!("{:?}", queries.dims()),
        });
    }
    if exclude_self && labeled.len() < 2 {
        return Err(Error::domain("self-excluding reference search needs at least 2 labeled samples"));
    }
    let candidates = labeled.cirs();
    queries
        .samples()
        .par_iter()
        .enumerate()
        .map(|(i, s)| nearest(&s.cir, &candidates, exclude_self.then_some(i)))
        .collect()
}

/// One teacher training row.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTarget {
    pub reference: usize,
    pub position: [f64; 2],
    /// Reference position minus own position.
    pub bias: [f64; 2],
}

pub fn teacher_targets_from(labeled: &Dataset, refs: &[Neighbor]) -> Result<Vec<TeacherTarget>> {
    let positions = labeled.positions()?;
    Ok(refs
        .iter()
        .zip(&positions)
        .map(|(r, p)| {
            let q = positions[r.index];
            TeacherTarget {
                reference: r.index,
                position: *p,
                bias: [q[0] - p[0], q[1] - p[1]],
            }
        })
        .collect())
}

pub fn build_teacher_targets(labeled: &Dataset) -> Result<Vec<TeacherTarget>> {
    let refs = reference_indices(labeled, labeled, true)?;
    teacher_targets_from(labeled, &refs)
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape {
            expected: format!("{a} {what}"),
            actual: format!("{b}"),
        });
    }
    Ok(())
}

/// Mean Euclidean position error.
pub fn position_loss(pred: &[[f64; 2]], target: &[[f64; 2]]) -> Result<f64> {
    check_len(pred.len(), target.len(), "targets")?;
    if pred.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| dist(*p, *t)).sum::<f64>() / pred.len() as f64)
}

/// Position loss plus bias loss.
pub fn teacher_loss(
    pred_position: &[[f64; 2]],
    pred_bias: &[[f64; 2]],
    position: &[[f64; 2]],
    bias: &[[f64; 2]],
) -> Result<f64> {
    Ok(position_loss(pred_position, position)? + position_loss(pred_bias, bias)?)
}

/// Residual groups of a two-part (labeled + pseudo) loss.
#[derive(Debug, Clone, Copy)]
pub struct Residuals<'a> {
    pub pred: &'a [[f64; 2]],
    pub target: &'a [[f64; 2]],
}

fn weighted_sum(r: Residuals<'_>, weight: impl Fn(usize) -> f64) -> Result<f64> {
    check_len(r.pred.len(), r.target.len(), "targets")?;
    let mut total = 0.0;
    for (j, (p, t)) in r.pred.iter().zip(r.target).enumerate() {
        let w = weight(j);
        if !(w >= 0.0) {
            return Err(Error::domain(format!("negative or NaN weight {w}")));
        }
        let e = dist(*p, *t);
        total += (w * e * e).sqrt();
    }
    Ok(total)
}

fn pooled(labeled: Residuals<'_>, pseudo: Residuals<'_>, w: impl Fn(usize) -> f64, w_star: impl Fn(usize) -> f64) -> Result<f64> {
    let n = labeled.pred.len() + pseudo.pred.len();
    if n == 0 {
        return Err(Error::domain("empty batch"));
    }
    Ok((weighted_sum(labeled, w)? + weighted_sum(pseudo, w_star)?) / n as f64)
}

/// Student loss with unit labeled weights and per-sample pseudo weights.
pub fn student_loss(labeled: Residuals<'_>, pseudo: Residuals<'_>, weights: &[f64]) -> Result<f64> {
    check_len(pseudo.pred.len(), weights.len(), "weights")?;
    pooled(labeled, pseudo, |_| 1.0, |j| weights[j])
}

/// Pooled loss with scalar labeled weight `w` and pseudo weight `w_star`.
pub fn sslr_weighted_loss(labeled: Residuals<'_>, pseudo: Residuals<'_>, w: f64, w_star: f64) -> Result<f64> {
    pooled(labeled, pseudo, |_| w, |_| w_star)
}

pub fn scale_weights(weights: &[f64], alpha: f64) -> Vec<f64> {
    weights.iter().map(|w| w * alpha).collect()
}

pub const BANDWIDTH_FLOOR: f64 = 1e-6;

/// Silverman's rule of thumb, floored at [`BANDWIDTH_FLOOR`].
pub fn silverman_bandwidth(values: &[f64]) -> Result<f64> {
    let n = values.len();
    if n < 2 {
        return Err(Error::domain("bandwidth estimation needs at least 2 values"));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sigma = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sigma.min(iqr / 1.34) } else { sigma };
    let h = 0.9 * spread * (n as f64).powf(-0.2);
    Ok(if h.is_finite() { h.max(BANDWIDTH_FLOOR) } else { BANDWIDTH_FLOOR })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeModel {
    pub support: Vec<f64>,
    pub bandwidth: f64,
}

impl KdeModel {
    pub fn new(support: Vec<f64>, bandwidth: f64) -> Result<Self> {
        if support.is_empty() || !(bandwidth > 0.0) {
            return Err(Error::domain("KDE needs at least one point and a positive bandwidth"));
        }
        Ok(Self { support, bandwidth })
    }

    /// Silverman bandwidth over the support itself.
    pub fn fit(support: Vec<f64>) -> Result<Self> {
        let h = silverman_bandwidth(&support)?;
        Self::new(support, h)
    }

    /// Gaussian-kernel density estimate at `d`.
    pub fn eval(&self, d: f64) -> f64 {
        let h = self.bandwidth;
        let norm = 1.0 / ((2.0 * PI).sqrt() * h * self.support.len() as f64);
        norm * self
            .support
            .iter()
            .map(|di| {
                let u = (d - di) / h;
                (-0.5 * u * u).exp()
            })
            .sum::<f64>()
    }
}

fn normalize_mean(mut w: Vec<f64>) -> Result<Vec<f64>> {
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    if !(mean > 0.0 && mean.is_finite()) {
        return Err(Error::domain("confidence weights have no positive mean"));
    }
    w.iter_mut().for_each(|x| *x /= mean);
    Ok(w)
}

/// KDE density of each bias norm, rescaled to mean 1.
pub fn confidence_weights(d: &[f64]) -> Result<Vec<f64>> {
    let kde = KdeModel::fit(d.to_vec())?;
    let density: Vec<f64> = d.par_iter().map(|&x| kde.eval(x)).collect();
    normalize_mean(density)
}

/// `1 - minmax(d)`, rescaled to mean 1.
pub fn linear_confidence(d: &[f64]) -> Result<Vec<f64>> {
    if d.len() < 2 {
        return Err(Error::domain("linear confidence needs at least 2 values"));
    }
    let (lo, hi) = d
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(Error::domain("linear confidence is undefined for constant bias norms"));
    }
    normalize_mean(d.iter().map(|x| 1.0 - (x - lo) / range).collect())
}

/// Network inputs built on demand from (CIR, reference CIR) pairs.
pub struct FeatureRows<'a> {
    cirs: Vec<&'a CirTensor>,
    refs: Vec<&'a CirTensor>,
    scales: Vec<(f64, f64)>,
    targets: Vec<Target>,
    dim: usize,
}

impl<'a> FeatureRows<'a> {
    pub fn new(cirs: Vec<&'a CirTensor>, refs: Vec<&'a CirTensor>, targets: Vec<Target>) -> Result<Self> {
        check_len(cirs.len(), refs.len(), "references")?;
        if !targets.is_empty() {
            check_len(cirs.len(), targets.len(), "targets")?;
        }
        let dims = cirs.first().map(|c| c.dims()).unwrap_or((0, 0, 0));
        let scales = cirs
            .par_iter()
            .zip(refs.par_iter())
            .map(|(c, r)| {
                if c.dims() != dims || r.dims() != dims {
                    return Err(Error::Shape {
                        expected: format!("{dims:?}"),
                        actual: format!("{:?} / {:?}", c.dims(), r.dims()),
                    });
                }
                Ok((unit_energy_scale(c)?, unit_energy_scale(r)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dim: crate::dataset::feature_len(dims),
            cirs,
            refs,
            scales,
            targets,
        })
    }

    /// Rows for `samples` of `set`, referenced into `labeled` (or themselves).
    pub fn from_dataset(
        set: &'a Dataset,
        labeled: &'a Dataset,
        refs: Option<&[Neighbor]>,
        targets: Vec<Target>,
    ) -> Result<Self> {
        let cirs: Vec<&CirTensor> = set.cirs();
        let ref_cirs = match refs {
            Some(r) => {
                check_len(cirs.len(), r.len(), "references")?;
                r.iter().map(|n| &labeled.samples()[n.index].cir).collect()
            }
            None => cirs.clone(),
        };
        Self::new(cirs, ref_cirs, targets)
    }

    pub fn with_targets(mut self, targets: Vec<Target>) -> Result<Self> {
        check_len(self.cirs.len(), targets.len(), "targets")?;
        self.targets = targets;
        Ok(self)
    }

    /// Appends another row set with the same dims.
    pub fn extend(&mut self, other: FeatureRows<'a>) -> Result<()> {
        if !other.cirs.is_empty() && !self.cirs.is_empty() && other.dim != self.dim {
            return Err(Error::Shape {
                expected: format!("feature length {}", self.dim),
                actual: format!("{}", other.dim),
            });
        }
        if self.cirs.is_empty() {
            self.dim = other.dim;
        }
        self.cirs.extend(other.cirs);
        self.refs.extend(other.refs);
        self.scales.extend(other.scales);
        self.targets.extend(other.targets);
        Ok(())
    }

    pub fn predict(&self, params: &Params) -> Outputs {
        predict_with(params, self.cirs.len(), 256, |idx, out| self.fill_inputs(idx, out))
    }

    pub fn targets(&self) -> &[Target] {
        &self.targets
    }
}

impl TrainingData for FeatureRows<'_> {
    fn len(&self) -> usize {
        self.cirs.len()
    }

    fn input_dim(&self) -> usize {
        self.dim
    }

    fn fill_inputs(&self, indices: &[usize], out: &mut [f64]) {
        for (row, &i) in out.chunks_exact_mut(self.dim).zip(indices) {
            let (sc, sr) = self.scales[i];
            write_features(self.cirs[i], sc, self.refs[i], sr, row);
        }
    }

    fn target(&self, index: usize) -> Target {
        self.targets[index]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "SL")]
    Sl,
    #[serde(rename = "SLR")]
    Slr,
    #[serde(rename = "SSLR")]
    Sslr,
    #[serde(rename = "SSLB")]
    Sslb,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Sl, Scheme::Slr, Scheme::Sslr, Scheme::Sslb];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Sl => "SL",
            Scheme::Slr => "SLR",
            Scheme::Sslr => "SSLR",
            Scheme::Sslb => "SSLB",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown scheme {s:?}")))
    }

    pub fn needs_unlabeled(self) -> bool {
        matches!(self, Scheme::Sslr | Scheme::Sslb)
    }

    /// Whether inputs pair a CIR with its labeled nearest neighbor.
    pub fn uses_reference(self) -> bool {
        !matches!(self, Scheme::Sl)
    }

    fn default_confidence(self) -> Confidence {
        match self {
            Scheme::Sslb => Confidence::Kde,
            _ => Confidence::Uniform,
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-sample confidence used for pseudo-labeled rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Confidence {
    Uniform,
    Kde,
    Linear,
}

/// A scheme plus the pseudo-label weighting knobs used by the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub scheme: Scheme,
    pub confidence: Confidence,
    /// Multiplier applied to every pseudo-label weight.
    pub alpha: f64,
}

impl Variant {
    pub fn new(scheme: Scheme) -> Self {
        Self {
            scheme,
            confidence: scheme.default_confidence(),
            alpha: 1.0,
        }
    }

    pub fn with_alpha(self, alpha: f64) -> Self {
        Self { alpha, ..self }
    }

    pub fn with_confidence(self, confidence: Confidence) -> Self {
        Self { confidence, ..self }
    }

    pub fn label(&self) -> String {
        let conf = match (self.scheme, self.confidence) {
            (Scheme::Sslb, Confidence::Kde) | (Scheme::Sslr, Confidence::Uniform) => String::new(),
            (Scheme::Sl | Scheme::Slr, _) => String::new(),
            (_, c) => format!("+{}", serde_json::to_value(c).unwrap().as_str().unwrap()),
        };
        if self.alpha == 1.0 || !self.scheme.needs_unlabeled() {
            format!("{}{conf}", self.scheme)
        } else {
            format!("{}{conf}@{}", self.scheme, self.alpha)
        }
    }
}

/// Teacher output for one unlabeled sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoSample {
    pub index: usize,
    pub reference: usize,
    #[serde(rename = "l_star")]
    pub position: [f64; 2],
    #[serde(rename = "dl_star")]
    pub bias: [f64; 2],
    /// Norm of the predicted bias.
    pub d: f64,
    #[serde(rename = "w_star")]
    pub weight: Option<f64>,
}

/// Confidence weights of `pseudo` under `confidence`.
pub fn pseudo_weights(pseudo: &[PseudoSample], confidence: Confidence) -> Result<Vec<f64>> {
    let d: Vec<f64> = pseudo.iter().map(|p| p.d).collect();
    match confidence {
        Confidence::Uniform => Ok(vec![1.0; d.len()]),
        Confidence::Kde => confidence_weights(&d),
        Confidence::Linear => match linear_confidence(&d) {
            Err(Error::Domain(_)) if d.len() >= 2 => Ok(vec![1.0; d.len()]),
            other => other,
        },
    }
}

pub fn write_pseudo_labels(path: &Path, pseudo: &[PseudoSample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in pseudo {
        serde_json::to_writer(&mut w, p).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Teacher predictions for `unlabeled` given precomputed references.
pub fn pseudo_label_with_refs(
    teacher: &TrainedModel,
    unlabeled: &Dataset,
    labeled: &Dataset,
    refs: &[Neighbor],
) -> Result<Vec<PseudoSample>> {
    let rows = FeatureRows::from_dataset(unlabeled, labeled, Some(refs), Vec::new())?;
    if rows.input_dim() != teacher.spec().input_dim {
        return Err(Error::config("teacher input size does not match the unlabeled data"));
    }
    let out = rows.predict(&teacher.params);
    Ok((0..unlabeled.len())
        .map(|i| PseudoSample {
            index: i,
            reference: refs[i].index,
            position: out.position[i],
            bias: out.bias[i],
            d: out.bias[i][0].hypot(out.bias[i][1]),
            weight: None,
        })
        .collect())
}

pub fn pseudo_label(teacher: &TrainedModel, unlabeled: &Dataset, labeled: &Dataset) -> Result<Vec<PseudoSample>> {
    let refs = reference_indices(unlabeled, labeled, false)?;
    pseudo_label_with_refs(teacher, unlabeled, labeled, &refs)
}

fn provenance(spec: &NetworkSpec, cfg: &TrainConfig, variant: &Variant) -> Provenance {
    Provenance {
        seed: cfg.seed,
        config_hash: ConfigHash::of(&(spec, cfg, variant)),
        scheme: variant.label(),
    }
}

/// Runs the schemes of one (labeled, unlabeled) configuration, sharing the
/// reference search, the teacher and its pseudo-labels between them.
pub struct Pipeline<'a> {
    pub labeled: &'a Dataset,
    pub unlabeled: Option<&'a Dataset>,
    pub spec: NetworkSpec,
    pub train: TrainConfig,
    labeled_refs: Option<Vec<Neighbor>>,
    unlabeled_refs: Option<Vec<Neighbor>>,
    teacher: Option<TrainedModel>,
    pseudo: Option<Vec<PseudoSample>>,
}

impl<'a> Pipeline<'a> {
    pub fn new(labeled: &'a Dataset, unlabeled: Option<&'a Dataset>, spec: NetworkSpec, train: TrainConfig) -> Result<Self> {
        if !labeled.is_labeled() || labeled.is_empty() {
            return Err(Error::config("training requires a non-empty labeled dataset"));
        }
        if let Some(u) = unlabeled {
            if u.dims() != labeled.dims() {
                return Err(Error::Shape {
                    expected: format!("{:?}", labeled.dims()),
                    actual: format!("{:?}", u.dims()),
                });
            }
        }
        spec.validate()?;
        train.validate()?;
        Ok(Self {
            labeled,
            unlabeled,
            spec,
            train,
            labeled_refs: None,
            unlabeled_refs: None,
            teacher: None,
            pseudo: None,
        })
    }

    pub fn labeled_refs(&mut self) -> Result<&[Neighbor]> {
        if self.labeled_refs.is_none() {
            self.labeled_refs = Some(reference_indices(self.labeled, self.labeled, true)?);
        }
        Ok(self.labeled_refs.as_deref().unwrap())
    }

    fn unlabeled_set(&self) -> Result<&'a Dataset> {
        self.unlabeled
            .ok_or_else(|| Error::config("semi-supervised schemes need an unlabeled dataset"))
    }

    pub fn unlabeled_refs(&mut self) -> Result<&[Neighbor]> {
        if self.unlabeled_refs.is_none() {
            let u = self.unlabeled_set()?;
            self.unlabeled_refs = Some(reference_indices(u, self.labeled, false)?);
        }
        Ok(self.unlabeled_refs.as_deref().unwrap())
    }

    fn labeled_rows(&mut self, with_bias: bool) -> Result<FeatureRows<'a>> {
        let labeled = self.labeled;
        let refs = self.labeled_refs()?.to_vec();
        let targets: Vec<Target> = teacher_targets_from(labeled, &refs)?
            .into_iter()
            .map(|t| {
                if with_bias {
                    Target::biased(t.position, t.bias)
                } else {
                    Target::position(t.position)
                }
            })
            .collect();
        FeatureRows::from_dataset(labeled, labeled, Some(&refs), targets)
    }

    /// Reference-input model trained on position and bias.
    pub fn teacher(&mut self) -> Result<&TrainedModel> {
        if self.teacher.is_none() {
            let rows = self.labeled_rows(true)?;
            let prov = provenance(&self.spec, &self.train, &Variant::new(Scheme::Slr));
            let model = train(init_params(&self.spec, self.train.seed), &rows, &self.train, prov, None)?;
            self.teacher = Some(model);
        }
        Ok(self.teacher.as_ref().unwrap())
    }

    pub fn pseudo_labels(&mut self) -> Result<&[PseudoSample]> {
        if self.pseudo.is_none() {
            let unlabeled = self.unlabeled_set()?;
            let refs = self.unlabeled_refs()?.to_vec();
            let labeled = self.labeled;
            let teacher = self.teacher()?;
            self.pseudo = Some(pseudo_label_with_refs(teacher, unlabeled, labeled, &refs)?);
        }
        Ok(self.pseudo.as_deref().unwrap())
    }

    /// Student rows: labeled rows with unit weight, pseudo rows with `sqrt(w)`.
    pub fn student_rows(&mut self, weights: &[f64]) -> Result<FeatureRows<'a>> {
        let mut rows = self.labeled_rows(false)?;
        if weights.is_empty() {
            return Ok(rows);
        }
        let unlabeled = self.unlabeled_set()?;
        let refs = self.unlabeled_refs()?.to_vec();
        let pseudo = self.pseudo_labels()?;
        check_len(pseudo.len(), weights.len(), "weights")?;
        let targets = pseudo
            .iter()
            .zip(weights)
            .map(|(p, &w)| {
                if !(w >= 0.0) {
                    return Err(Error::domain(format!("negative or NaN weight {w}")));
                }
                Ok(Target {
                    position: p.position,
                    bias: [0.0; 2],
                    position_scale: w.sqrt(),
                    bias_scale: 0.0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.extend(FeatureRows::from_dataset(unlabeled, self.labeled, Some(&refs), targets)?)?;
        Ok(rows)
    }

    /// Fresh model trained on labeled plus pseudo-labeled rows.
    pub fn train_student(&mut self, weights: &[f64], variant: &Variant) -> Result<TrainedModel> {
        let rows = self.student_rows(weights)?;
        let prov = provenance(&self.spec, &self.train, variant);
        train(init_params(&self.spec, self.train.seed), &rows, &self.train, prov, None)
    }

    /// Pseudo-label weights for `variant`, after the `alpha` scaling.
    pub fn variant_weights(&mut self, variant: &Variant) -> Result<Vec<f64>> {
        let w = pseudo_weights(self.pseudo_labels()?, variant.confidence)?;
        Ok(scale_weights(&w, variant.alpha))
    }

    pub fn run(&mut self, variant: &Variant) -> Result<TrainedModel> {
        self.run_monitored(variant, None)
    }

    /// Like [`Pipeline::run`], exposing every student epoch to `monitor`.
    pub fn run_monitored(
        &mut self,
        variant: &Variant,
        monitor: Option<crate::neural_net::EpochMonitor<'_>>,
    ) -> Result<TrainedModel> {
        if !(variant.alpha > 0.0) {
            return Err(Error::config("weight scale must be positive"));
        }
        match variant.scheme {
            Scheme::Sl => {
                let positions = self.labeled.positions()?;
                let targets = positions.into_iter().map(Target::position).collect();
                let rows = FeatureRows::from_dataset(self.labeled, self.labeled, None, targets)?;
                let prov = provenance(&self.spec, &self.train, variant);
                train(init_params(&self.spec, self.train.seed), &rows, &self.train, prov, monitor)
            }
            Scheme::Slr => {
                let mut model = self.teacher()?.clone();
                model.provenance = provenance(&self.spec, &self.train, variant);
                Ok(model)
            }
            Scheme::Sslr | Scheme::Sslb => {
                self.unlabeled_set()?;
                let weights = self.variant_weights(variant)?;
                let rows = self.student_rows(&weights)?;
                let prov = provenance(&self.spec, &self.train, variant);
                train(init_params(&self.spec, self.train.seed), &rows, &self.train, prov, monitor)
            }
        }
    }
}

/// Inputs for evaluating a model of `scheme` on `set`. Reference schemes
/// pair every sample with its nearest labeled neighbor.
pub fn evaluation_rows<'a>(
    scheme: Scheme,
    set: &'a Dataset,
    labeled: &'a Dataset,
    refs: Option<&[Neighbor]>,
) -> Result<FeatureRows<'a>> {
    let targets = set.positions()?.into_iter().map(Target::position).collect();
    if !scheme.uses_reference() {
        return FeatureRows::from_dataset(set, set, None, targets);
    }
    match refs {
        Some(r) => FeatureRows::from_dataset(set, labeled, Some(r), targets),
        None => {
            let r = reference_indices(set, labeled, false)?;
            FeatureRows::from_dataset(set, labeled, Some(&r), targets)
        }
    }
}

/// Trains `scheme` and evaluates it on `test`.
pub fn run_scheme(
    scheme: Scheme,
    labeled: &Dataset,
    unlabeled: Option<&Dataset>,
    test: &Dataset,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
) -> Result<(TrainedModel, crate::bench::metrics::EvalReport)> {
    if scheme.needs_unlabeled() && unlabeled.is_none() {
        return Err(Error::config(format!("{scheme} needs unlabeled data")));
    }
    let start = std::time::Instant::now();
    let mut pipeline = Pipeline::new(labeled, unlabeled, spec.clone(), cfg.clone())?;
    let model = pipeline.run(&Variant::new(scheme))?;
    let rows = evaluation_rows(scheme, test, labeled, None)?;
    let report = crate::bench::metrics::evaluate(&model, &rows, start.elapsed().as_secs_f64())?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel_sim::CirTensor;
    use crate::dataset::{Manifest, Sample};
    use num_complex::Complex32;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cir(rng: &mut impl Rng, dims: (usize, usize, usize)) -> CirTensor {
        let n = dims.0 * dims.1 * dims.2;
        let data = (0..n)
            .map(|_| Complex32::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        CirTensor::from_vec(dims, data).unwrap()
    }

    fn dataset(cirs: Vec<CirTensor>, positions: Option<Vec<[f64; 2]>>) -> Dataset {
        let dims = cirs[0].dims();
        let labeled = positions.is_some();
        let samples = cirs
            .into_iter()
            .enumerate()
            .map(|(i, cir)| Sample {
                cir,
                position: positions.as_ref().map(|p| p[i]),
            })
            .collect();
        Dataset::new(dims, samples, Manifest { labeled, ..Manifest::default() }).unwrap()
    }

    fn random_set(n: usize, seed: u64, dims: (usize, usize, usize)) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cirs = (0..n).map(|_| random_cir(&mut rng, dims)).collect();
        let pos = (0..n).map(|_| [rng.gen_range(0.0..60.0), rng.gen_range(0.0..60.0)]).collect();
        dataset(cirs, Some(pos))
    }

    fn perturbed(c: &CirTensor, eps: f32, rng: &mut impl Rng) -> CirTensor {
        let mut out = c.clone();
        for v in out.data_mut() {
            v.re += eps * rng.gen_range(-1.0..1.0);
            v.im += eps * rng.gen_range(-1.0..1.0);
        }
        out
    }

    #[test]
    fn knn_prefers_perturbed_copy_and_excludes_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = (2, 2, 4);
        let h1 = random_cir(&mut rng, dims);
        let h2 = perturbed(&h1, 1e-3, &mut rng);
        let mut h3 = random_cir(&mut rng, dims);
        h3.data_mut().iter_mut().for_each(|v| *v *= 50.0);
        let set = dataset(vec![h1.clone(), h2, h3], Some(vec![[0.0; 2]; 3]));
        assert_eq!(knn_reference(&h1, &set, Some(0)).unwrap().index, 1);
        let own = knn_reference(&h1, &set, None).unwrap();
        assert_eq!(own.index, 0);
        assert_eq!(own.distance_sq, 0.0);
    }

    #[test]
    fn knn_ties_go_to_lowest_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = random_cir(&mut rng, (1, 2, 2));
        let set = dataset(vec![h.clone(), h.clone(), h.clone()], None);
        assert_eq!(knn_reference(&h, &set, Some(0)).unwrap().index, 1);
        assert_eq!(knn_reference(&h, &set, None).unwrap().index, 0);
    }

    #[test]
    fn knn_rejects_empty_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = random_cir(&mut rng, (1, 2, 2));
        let set = dataset(vec![h.clone()], None);
        assert!(matches!(knn_reference(&h, &set, Some(0)), Err(Error::Domain(_))));
    }

    fn brute_force_nn(q: &CirTensor, set: &Dataset, exclude: Option<usize>) -> usize {
        let mut best = (f64::INFINITY, usize::MAX);
        for (j, s) in set.samples().iter().enumerate() {
            if Some(j) == exclude {
                continue;
            }
            let mut d = 0.0f64;
            for (a, b) in q.data().iter().zip(s.cir.data()) {
                d += ((a.re as f64) - (b.re as f64)).powi(2) + ((a.im as f64) - (b.im as f64)).powi(2);
            }
            if d < best.0 {
                best = (d, j);
            }
        }
        best.1
    }

    #[test]
    fn knn_matches_double_loop_on_random_set() {
        let set = random_set(50, 3, (3, 2, 4));
        let refs = reference_indices(&set, &set, true).unwrap();
        for (i, r) in refs.iter().enumerate() {
            assert_eq!(r.index, brute_force_nn(&set.samples()[i].cir, &set, Some(i)));
        }
    }

    #[test]
    fn two_samples_reference_each_other() {
        let set = random_set(2, 4, (1, 2, 3));
        let t = build_teacher_targets(&set).unwrap();
        assert_eq!((t[0].reference, t[1].reference), (1, 0));
        assert_eq!(t[0].bias, [-t[1].bias[0], -t[1].bias[1]]);
    }

    #[test]
    fn duplicate_cirs_at_one_position_have_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_cir(&mut rng, (1, 2, 3));
        let set = dataset(vec![h.clone(), h], Some(vec![[3.0, 4.0]; 2]));
        let t = build_teacher_targets(&set).unwrap();
        assert!(t.iter().all(|x| x.bias == [0.0, 0.0]));
    }

    #[test]
    fn teacher_targets_match_recomputation() {
        let set = random_set(20, 6, (2, 2, 3));
        let t = build_teacher_targets(&set).unwrap();
        for (i, x) in t.iter().enumerate() {
            let j = brute_force_nn(&set.samples()[i].cir, &set, Some(i));
            let (p, q) = (set.position(i), set.position(j));
            assert_eq!(x.reference, j);
            assert_eq!(x.bias, [q[0] - p[0], q[1] - p[1]]);
        }
    }

    #[test]
    fn teacher_loss_examples() {
        let z = [[0.0, 0.0]];
        assert_eq!(teacher_loss(&[[1.0, 2.0]], &[[0.5, 0.5]], &[[1.0, 2.0]], &[[0.5, 0.5]]).unwrap(), 0.0);
        assert_eq!(teacher_loss(&[[3.0, 4.0]], &z, &z, &z).unwrap(), 5.0);
        let p = [[1.0, 1.0], [-2.0, 0.5]];
        let t = [[0.0, 3.0], [1.0, 1.0]];
        let b = [[0.2, 0.1], [0.0, 0.0]];
        assert_eq!(teacher_loss(&p, &b, &t, &b).unwrap(), position_loss(&p, &t).unwrap());
    }

    #[test]
    fn student_loss_examples() {
        let r = [[3.0, 4.0]];
        let z = [[0.0, 0.0]];
        let lab = Residuals { pred: &r, target: &z };
        let ps = Residuals { pred: &r, target: &z };
        assert!((student_loss(lab, ps, &[4.0]).unwrap() - 7.5).abs() < 1e-12);
        // zero pseudo weights leave the labeled mean scaled by N/(N+N*)
        let v = student_loss(lab, ps, &[0.0]).unwrap();
        assert!((v - 5.0 / 2.0).abs() < 1e-12);
        assert!(student_loss(lab, ps, &[-1.0]).is_err());
    }

    #[test]
    fn sslr_loss_example() {
        let none: [[f64; 2]; 0] = [];
        let lab = Residuals { pred: &none, target: &none };
        let ps = Residuals {
            pred: &[[0.0, 5.0]],
            target: &[[0.0, 0.0]],
        };
        assert!((sslr_weighted_loss(lab, ps, 1.0, 0.25).unwrap() - 2.5).abs() < 1e-12);
        assert!(sslr_weighted_loss(lab, ps, -1.0, 0.25).is_ok(), "unused labeled weight is not inspected");
        assert!(sslr_weighted_loss(lab, ps, 1.0, -0.25).is_err());
    }

    #[test]
    fn bandwidth_examples() {
        assert_eq!(silverman_bandwidth(&[2.0; 10]).unwrap(), BANDWIDTH_FLOOR);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        let d: Vec<f64> = (0..1000).map(|_| rng.sample(normal)).collect();
        let h = silverman_bandwidth(&d).unwrap();
        let expected = 0.9 * 1000f64.powf(-0.2);
        assert!((h / expected - 1.0).abs() < 0.1, "{h} vs {expected}");
        let scaled: Vec<f64> = d.iter().map(|x| x * 3.5).collect();
        assert!((silverman_bandwidth(&scaled).unwrap() - 3.5 * h).abs() < 1e-12);
        assert!(silverman_bandwidth(&[1.0]).is_err());
    }

    #[test]
    fn kde_single_point_peak() {
        let kde = KdeModel::new(vec![2.5], 1.0).unwrap();
        assert!((kde.eval(2.5) - 0.398_942_280_401_432_7).abs() < 1e-15);
        assert!(kde.eval(1e3) >= 0.0);
        assert!(kde.eval(30.0) > 0.0);
        assert!(KdeModel::new(vec![], 1.0).is_err());
        assert!(KdeModel::new(vec![1.0], 0.0).is_err());
    }

    #[test]
    fn confidence_weight_examples() {
        assert!(confidence_weights(&[4.0; 6]).unwrap().iter().all(|w| (w - 1.0).abs() < 1e-12));
        let w = confidence_weights(&[0.0, 0.0, 10.0]).unwrap();
        assert!(w[0] > w[2] && w[1] > w[2]);
        assert!(w[0] == w[1]);
    }

    #[test]
    fn linear_confidence_examples() {
        assert_eq!(linear_confidence(&[0.0, 10.0]).unwrap(), vec![2.0, 0.0]);
        assert!(matches!(linear_confidence(&[1.0, 1.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn scale_weights_examples() {
        let w = [0.5, 1.0, 1.5];
        assert_eq!(scale_weights(&w, 1.0), w.to_vec());
        assert_eq!(scale_weights(&w, 0.5), vec![0.25, 0.5, 0.75]);
    }

    proptest! {
        #[test]
        fn kde_weights_have_unit_mean(d in prop::collection::vec(0.0f64..30.0, 2..200)) {
            let w = confidence_weights(&d).unwrap();
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            prop_assert!((mean - 1.0).abs() < 1e-9);
            prop_assert!(w.iter().all(|x| *x >= 0.0));
        }

        #[test]
        fn linear_weights_are_normalized_and_monotone(d in prop::collection::vec(0.0f64..30.0, 2..100)) {
            prop_assume!(d.iter().any(|x| *x != d[0]));
            let w = linear_confidence(&d).unwrap();
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            prop_assert!((mean - 1.0).abs() < 1e-12);
            for i in 0..d.len() {
                for j in 0..d.len() {
                    if d[i] < d[j] {
                        prop_assert!(w[i] >= w[j]);
                    }
                }
            }
        }

        #[test]
        fn kde_weight_ranking_is_scale_invariant(
            d in prop::collection::vec(0.0f64..30.0, 3..60),
            c in 0.1f64..20.0,
        ) {
            let w = confidence_weights(&d).unwrap();
            let scaled: Vec<f64> = d.iter().map(|x| x * c).collect();
            let ws = confidence_weights(&scaled).unwrap();
            let rank = |v: &[f64]| {
                let mut idx: Vec<usize> = (0..v.len()).collect();
                idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
                idx
            };
            // ties in density can reorder under rounding, so compare with a tolerance
            let (ra, rb) = (rank(&w), rank(&ws));
            for (a, b) in ra.iter().zip(&rb) {
                prop_assert!(a == b || (w[*a] - w[*b]).abs() < 1e-9);
            }
        }

        #[test]
        fn scaled_weight_mean_is_linear(w in prop::collection::vec(0.0f64..5.0, 1..50), a in 0.01f64..3.0) {
            let s = scale_weights(&w, a);
            let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            prop_assert!((m(&s) - a * m(&w)).abs() < 1e-12);
        }
    }

    #[test]
    fn variant_labels() {
        assert_eq!(Variant::new(Scheme::Sslb).label(), "SSLB");
        assert_eq!(Variant::new(Scheme::Sslr).with_alpha(0.5).label(), "SSLR@0.5");
        assert_eq!(Variant::new(Scheme::Sslb).with_confidence(Confidence::Linear).label(), "SSLB+linear");
        assert_eq!(Scheme::parse("sslb").unwrap(), Scheme::Sslb);
        assert!(Scheme::parse("foo").is_err());
    }

    #[test]
    fn pseudo_label_file_has_one_record_per_line() {
        let p = vec![
            PseudoSample {
                index: 0,
                reference: 3,
                position: [1.0, 2.0],
                bias: [0.5, 0.0],
                d: 0.5,
                weight: Some(1.25),
            };
            3
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        write_pseudo_labels(&path, &p).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        let back: PseudoSample = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(back, p[0]);
    }
}
