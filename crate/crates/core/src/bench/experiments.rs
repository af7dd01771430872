//! Experiment drivers: labeled-count sweep, weight-scale and confidence
//! ablations and the simulator update loop.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::bench::metrics::{evaluate, EvalReport};
use crate::channel_sim::{build_scenario, generate_dataset, ScenarioConfig, SimulatorParams};
use crate::channel_stats::{extract_statistics, update_simulator_params, ChannelStatistics, ExtractionConfig};
use crate::dataset::{feature_len, split, subset_labeled, Dataset};
use crate::error::{Error, Result};
use crate::neural_net::{Activation, ConfigHash, NetworkSpec, Params, TrainConfig};
use crate::rng::derive_seed;
use crate::sslb::{evaluation_rows, reference_indices, Confidence, Pipeline, Scheme, Variant};

/// Where the unlabeled training data comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnlabeledSource {
    /// Base simulator re-fitted to the labeled subset.
    Uchs,
    /// Base simulator without fitting.
    Base,
    /// Same distribution as the labeled data.
    Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Channel that produces the labeled and test data.
    pub real: SimulatorParams,
    /// Simulator before its spread statistics are re-fitted.
    pub base: SimulatorParams,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub train: TrainConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub n_unlabeled: usize,
    pub counts: Vec<usize>,
    pub alphas: Vec<f64>,
    /// Labeled count used by the weight-scale ablation.
    pub ablation_count: usize,
    pub extraction: ExtractionConfig,
    pub unlabeled_source: UnlabeledSource,
    pub seed: u64,
    pub n_seeds: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let scenario = ScenarioConfig::default();
        Self {
            real: real_params(scenario.clone()),
            base: SimulatorParams {
                scenario,
                ..SimulatorParams::default()
            },
            hidden_dims: vec![512, 256, 128],
            activation: Activation::Relu,
            train: TrainConfig::default(),
            n_train: 10_000,
            n_test: 7_200,
            n_unlabeled: 10_000,
            counts: vec![2700, 4500, 6300, 8100, 9900],
            alphas: vec![1.0, 0.5, 0.1],
            ablation_count: 6300,
            extraction: ExtractionConfig::default(),
            unlabeled_source: UnlabeledSource::Uchs,
            seed: 0,
            n_seeds: 5,
        }
    }
}

/// Ground-truth channel used in place of measured data. Its spreads and
/// cluster structure differ from the base simulator, so an unfitted
/// simulator is misspecified.
fn real_params(scenario: ScenarioConfig) -> SimulatorParams {
    SimulatorParams {
        scenario,
        ds_log_mean: -7.35,
        ds_log_std: 0.25,
        as_log_mean: 1.1,
        as_log_std: 0.25,
        n_clusters: 18,
        per_cluster_shadow_std: 4.0,
        ..SimulatorParams::default()
    }
}

impl ExperimentConfig {
    /// Desk-scale preset.
    pub fn fast() -> Self {
        let scenario = ScenarioConfig::fast();
        Self {
            real: real_params(scenario.clone()),
            base: SimulatorParams {
                scenario,
                ..SimulatorParams::default()
            },
            hidden_dims: vec![128, 64],
            train: TrainConfig {
                epochs: 40,
                ..TrainConfig::default()
            },
            n_train: 1000,
            n_test: 1000,
            n_unlabeled: 2000,
            counts: vec![270, 450, 630, 810, 990],
            ablation_count: 630,
            ..Self::default()
        }
    }

    pub fn scenario(&self) -> &ScenarioConfig {
        &self.real.scenario
    }

    pub fn validate(&self) -> Result<()> {
        self.real.validate()?;
        self.base.validate()?;
        if self.real.scenario != self.base.scenario {
            return Err(Error::config("real and base simulators must share one scenario"));
        }
        self.network_spec().validate()?;
        self.train.validate()?;
        if self.n_train == 0 || self.n_test == 0 || self.n_seeds == 0 {
            return Err(Error::config("n_train, n_test and n_seeds must be positive"));
        }
        if let Some(&c) = self.counts.iter().chain([&self.ablation_count]).find(|&&c| c > self.n_train || c < 2) {
            return Err(Error::config(format!(
                "labeled count {c} must lie in [2, n_train = {}]",
                self.n_train
            )));
        }
        if self.alphas.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::config("weight scales must be positive"));
        }
        Ok(())
    }

    pub fn network_spec(&self) -> NetworkSpec {
        let s = self.scenario();
        NetworkSpec {
            input_dim: feature_len((s.n_bs, s.n_port, s.n_delay)),
            hidden_dims: self.hidden_dims.clone(),
            activation: self.activation,
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).map(|i| self.seed + i).collect()
    }

    pub fn config_hash(&self) -> ConfigHash {
        ConfigHash::of(self)
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }
}

/// Labeled train/test data for one seed.
pub struct SeedData {
    pub seed: u64,
    pub train: Dataset,
    pub test: Dataset,
}

pub fn seed_data(cfg: &ExperimentConfig, seed: u64) -> Result<SeedData> {
    let scenario = build_scenario(cfg.scenario())?;
    let all = generate_dataset(&scenario, &cfg.real, cfg.n_train + cfg.n_test, true, derive_seed(seed, 1))?;
    let (train, test) = split(&all, cfg.n_train, cfg.n_test, seed)?;
    Ok(SeedData { seed, train, test })
}

/// Labeled subset plus unlabeled data for one labeled count.
pub struct CountData {
    pub n_labeled: usize,
    pub labeled: Dataset,
    pub unlabeled: Dataset,
    pub fitted: Option<ChannelStatistics>,
    pub unlabeled_params: SimulatorParams,
}

pub fn count_data(cfg: &ExperimentConfig, data: &SeedData, n_labeled: usize) -> Result<CountData> {
    let labeled = subset_labeled(&data.train, n_labeled, data.seed)?;
    let (fitted, params) = match cfg.unlabeled_source {
        UnlabeledSource::Uchs => {
            let stats = extract_statistics(&labeled, cfg.scenario(), &cfg.extraction)?;
            (Some(stats), update_simulator_params(&cfg.base, &stats))
        }
        UnlabeledSource::Base => (None, cfg.base.clone()),
        UnlabeledSource::Real => (None, cfg.real.clone()),
    };
    let scenario = build_scenario(cfg.scenario())?;
    let unlabeled_seed = derive_seed(data.seed, 1_000_000 + n_labeled as u64);
    let unlabeled = generate_dataset(&scenario, &params, cfg.n_unlabeled, false, unlabeled_seed)?;
    Ok(CountData {
        n_labeled,
        labeled,
        unlabeled,
        fitted,
        unlabeled_params: params,
    })
}

/// Per-epoch test loss of one student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub label: String,
    pub seed: u64,
    pub test_loss: Vec<f64>,
}

/// Result of one trained variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub variant: Variant,
    pub n_labeled: usize,
    pub report: EvalReport,
}

/// Trains `variants` on one labeled count and evaluates them on the test set.
/// With `curves`, the test loss of every student epoch is recorded as well.
pub fn run_variants(
    cfg: &ExperimentConfig,
    data: &SeedData,
    count: &CountData,
    variants: &[Variant],
    curves: Option<&mut Vec<LossCurve>>,
) -> Result<Vec<CellResult>> {
    let spec = cfg.network_spec();
    let needs_unlabeled = variants.iter().any(|v| v.scheme.needs_unlabeled());
    let unlabeled = (needs_unlabeled && cfg.n_unlabeled > 0).then_some(&count.unlabeled);
    let mut pipeline = Pipeline::new(&count.labeled, unlabeled, spec, cfg.train_config(data.seed))?;
    let test_refs = reference_indices(&data.test, &count.labeled, false)?;
    let ref_rows = evaluation_rows(Scheme::Slr, &data.test, &count.labeled, Some(&test_refs))?;
    let self_rows = evaluation_rows(Scheme::Sl, &data.test, &count.labeled, None)?;
    let mut results = Vec::with_capacity(variants.len());
    let mut curves = curves;
    for variant in variants {
        let start = Instant::now();
        let rows = if variant.scheme.uses_reference() { &ref_rows } else { &self_rows };
        let model = match curves.as_deref_mut() {
            Some(out) if variant.scheme.needs_unlabeled() => {
                let mut losses = Vec::new();
                let mut monitor = |_: usize, params: &Params| {
                    let pred = rows.predict(params);
                    let total: f64 = pred
                        .position
                        .iter()
                        .zip(rows.targets())
                        .map(|(p, t)| (p[0] - t.position[0]).hypot(p[1] - t.position[1]))
                        .sum();
                    losses.push(total / pred.position.len() as f64);
                };
                let model = pipeline.run_monitored(variant, Some(&mut monitor))?;
                out.push(LossCurve {
                    label: variant.label(),
                    seed: data.seed,
                    test_loss: losses,
                });
                model
            }
            _ => pipeline.run(variant)?,
        };
        let mut report = evaluate(&model, rows, 0.0)?;
        report.wall_time = start.elapsed().as_secs_f64();
        report.config_hash = cfg.config_hash();
        info!(
            "seed {} n={} {}: err90 {:.3} m, mean {:.3} m ({:.1} s)",
            data.seed,
            count.n_labeled,
            variant.label(),
            report.err_at_90,
            report.mean_err,
            report.wall_time
        );
        results.push(CellResult {
            variant: *variant,
            n_labeled: count.n_labeled,
            report,
        });
    }
    Ok(results)
}

/// Published reference value attached to a table cell for comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub label: &'static str,
    pub n_labeled: usize,
    pub err90: f64,
}

const SWEEP_REFERENCE: &[Annotation] = &[
    Annotation { label: "SSLB", n_labeled: 6300, err90: 0.897 },
    Annotation { label: "SL", n_labeled: 9900, err90: 0.969 },
];

const WEIGHT_REFERENCE: &[Annotation] = &[
    Annotation { label: "SSLR", n_labeled: 6300, err90: 0.968 },
    Annotation { label: "SSLR@0.5", n_labeled: 6300, err90: 0.913 },
    Annotation { label: "SSLR@0.1", n_labeled: 6300, err90: 0.917 },
    Annotation { label: "SSLB", n_labeled: 6300, err90: 0.897 },
    Annotation { label: "SSLB@0.5", n_labeled: 6300, err90: 0.889 },
    Annotation { label: "SSLB@0.1", n_labeled: 6300, err90: 0.895 },
];

const CONFIDENCE_REFERENCE: &[Annotation] = &[
    Annotation { label: "SSLR", n_labeled: 2700, err90: 2.143 },
    Annotation { label: "SSLR", n_labeled: 4500, err90: 1.213 },
    Annotation { label: "SSLR", n_labeled: 6300, err90: 0.968 },
    Annotation { label: "SSLR", n_labeled: 8100, err90: 0.842 },
    Annotation { label: "SSLR", n_labeled: 9900, err90: 0.775 },
    Annotation { label: "SSLB+linear", n_labeled: 2700, err90: 2.043 },
    Annotation { label: "SSLB+linear", n_labeled: 4500, err90: 1.191 },
    Annotation { label: "SSLB+linear", n_labeled: 6300, err90: 0.930 },
    Annotation { label: "SSLB+linear", n_labeled: 8100, err90: 0.853 },
    Annotation { label: "SSLB+linear", n_labeled: 9900, err90: 0.764 },
    Annotation { label: "SSLB", n_labeled: 2700, err90: 1.825 },
    Annotation { label: "SSLB", n_labeled: 4500, err90: 1.130 },
    Annotation { label: "SSLB", n_labeled: 6300, err90: 0.897 },
    Annotation { label: "SSLB", n_labeled: 8100, err90: 0.813 },
    Annotation { label: "SSLB", n_labeled: 9900, err90: 0.729 },
];

/// Rows of one experiment, in canonical order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResultTable {
    pub config_hash: ConfigHash,
    pub cells: Vec<CellResult>,
    pub curves: Vec<LossCurve>,
    #[serde(skip)]
    annotations: Vec<(String, usize, f64)>,
}

impl ResultTable {
    fn new(cfg: &ExperimentConfig, annotations: &[Annotation]) -> Self {
        Self {
            config_hash: cfg.config_hash(),
            cells: Vec::new(),
            curves: Vec::new(),
            annotations: annotations
                .iter()
                .map(|a| (a.label.to_string(), a.n_labeled, a.err90))
                .collect(),
        }
    }

    fn sort(&mut self) {
        self.cells.sort_by(|a, b| {
            (a.n_labeled, a.variant.label(), a.report.seed).cmp(&(b.n_labeled, b.variant.label(), b.report.seed))
        });
        self.curves.sort_by(|a, b| (&a.label, a.seed).cmp(&(&b.label, b.seed)));
    }

    /// err@90 values of `label` at `n_labeled`, ordered by seed.
    pub fn err90(&self, label: &str, n_labeled: usize) -> Vec<(u64, f64)> {
        let mut v: Vec<(u64, f64)> = self
            .cells
            .iter()
            .filter(|c| c.n_labeled == n_labeled && c.variant.label() == label)
            .map(|c| (c.report.seed, c.report.err_at_90))
            .collect();
        v.sort_by_key(|x| x.0);
        v
    }

    /// Median err@90 across seeds per (label, n_labeled).
    pub fn median_err90(&self) -> BTreeMap<(String, usize), f64> {
        let mut groups: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
        for c in &self.cells {
            groups
                .entry((c.variant.label(), c.n_labeled))
                .or_default()
                .push(c.report.err_at_90);
        }
        groups
            .into_iter()
            .map(|(k, mut v)| {
                v.sort_by(f64::total_cmp);
                (k, crate::bench::metrics::quantile_sorted(&v, 0.5))
            })
            .collect()
    }

    /// Main result table. Run rows carry `is_reference=false`; published
    /// comparison values follow as `is_reference=true` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["scheme", "n_labeled", "seed", "err90", "mean_err", "config_hash", "is_reference"])?;
        let hash = self.config_hash.to_string();
        for c in &self.cells {
            w.write_record([
                c.variant.label(),
                c.n_labeled.to_string(),
                c.report.seed.to_string(),
                fmt(c.report.err_at_90),
                fmt(c.report.mean_err),
                hash.clone(),
                "false".into(),
            ])?;
        }
        for (label, n, v) in &self.annotations {
            w.write_record([label.clone(), n.to_string(), String::new(), fmt(*v), String::new(), String::new(), "true".into()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Wall-clock seconds per cell, kept apart from the reproducible table.
    pub fn write_timing_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["scheme", "n_labeled", "seed", "wall_time"])?;
        for c in &self.cells {
            w.write_record([
                c.variant.label(),
                c.n_labeled.to_string(),
                c.report.seed.to_string(),
                format!("{:.3}", c.report.wall_time),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Empirical CDF points `(error, fraction, series)` for every cell.
    pub fn write_cdf_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "y", "series"])?;
        for c in &self.cells {
            let series = format!("{}/n{}/s{}", c.variant.label(), c.n_labeled, c.report.seed);
            let mut e = c.report.errors.clone();
            e.sort_by(f64::total_cmp);
            let n = e.len() as f64;
            for (i, x) in e.iter().enumerate() {
                w.write_record([fmt(*x), fmt((i + 1) as f64 / n), series.clone()])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Median err@90 against labeled count, one series per variant.
    pub fn write_trend_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "y", "series"])?;
        for ((label, n), v) in self.median_err90() {
            w.write_record([n.to_string(), fmt(v), label])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Test loss per epoch, one series per (variant, seed).
    pub fn write_curves_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "y", "series"])?;
        for c in &self.curves {
            let series = format!("{}/s{}", c.label, c.seed);
            for (epoch, v) in c.test_loss.iter().enumerate() {
                w.write_record([(epoch + 1).to_string(), fmt(*v), series.clone()])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Writes `<stem>.csv`, `<stem>_timing.csv`, `<stem>_cdf.csv`,
    /// `<stem>_trend.csv` and, when curves exist, `<stem>_curves.csv`.
    pub fn write_all(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.write_csv(&dir.join(format!("{stem}.csv")))?;
        self.write_timing_csv(&dir.join(format!("{stem}_timing.csv")))?;
        self.write_cdf_csv(&dir.join(format!("{stem}_cdf.csv")))?;
        self.write_trend_csv(&dir.join(format!("{stem}_trend.csv")))?;
        if !self.curves.is_empty() {
            self.write_curves_csv(&dir.join(format!("{stem}_curves.csv")))?;
        }
        Ok(())
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

fn run_grid(
    cfg: &ExperimentConfig,
    counts: &[usize],
    variants: &[Variant],
    annotations: &[Annotation],
    with_curves: bool,
) -> Result<ResultTable> {
    cfg.validate()?;
    let mut table = ResultTable::new(cfg, annotations);
    for seed in cfg.seeds() {
        let data = seed_data(cfg, seed)?;
        for &n in counts {
            let count = count_data(cfg, &data, n)?;
            let curves = with_curves.then_some(&mut table.curves);
            table.cells.extend(run_variants(cfg, &data, &count, variants, curves)?);
        }
    }
    table.sort();
    Ok(table)
}

/// err@90 of every scheme at every labeled count.
pub fn sweep_labeled(cfg: &ExperimentConfig, schemes: &[Scheme]) -> Result<ResultTable> {
    let variants: Vec<Variant> = schemes.iter().map(|&s| Variant::new(s)).collect();
    run_grid(cfg, &cfg.counts, &variants, SWEEP_REFERENCE, false)
}

/// SSLR and SSLB with every pseudo-label weight scaled by each alpha.
pub fn ablate_weight_scale(cfg: &ExperimentConfig) -> Result<ResultTable> {
    let variants = weight_variants(&cfg.alphas);
    run_grid(cfg, &[cfg.ablation_count], &variants, WEIGHT_REFERENCE, true)
}

pub fn weight_variants(alphas: &[f64]) -> Vec<Variant> {
    [Scheme::Sslr, Scheme::Sslb]
        .into_iter()
        .flat_map(|s| alphas.iter().map(move |&a| Variant::new(s).with_alpha(a)))
        .collect()
}

/// No confidence, linear confidence and KDE confidence per labeled count.
pub fn ablate_confidence(cfg: &ExperimentConfig) -> Result<ResultTable> {
    run_grid(cfg, &cfg.counts, &confidence_variants(), CONFIDENCE_REFERENCE, false)
}

pub fn confidence_variants() -> Vec<Variant> {
    vec![
        Variant::new(Scheme::Sslr),
        Variant::new(Scheme::Sslb).with_confidence(Confidence::Linear),
        Variant::new(Scheme::Sslb),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatisticDelta {
    pub ds_log_mean: f64,
    pub ds_log_std: f64,
    pub as_log_mean: f64,
    pub as_log_std: f64,
}

impl StatisticDelta {
    fn between(stats: &ChannelStatistics, params: &SimulatorParams) -> Self {
        Self {
            ds_log_mean: stats.ds_log_mean - params.ds_log_mean,
            ds_log_std: stats.ds_log_std - params.ds_log_std,
            as_log_mean: stats.as_log_mean - params.as_log_mean,
            as_log_std: stats.as_log_std - params.as_log_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UchsSeedReport {
    pub seed: u64,
    pub n_labeled: usize,
    /// Statistics fitted on the labeled data.
    pub fitted: ChannelStatistics,
    /// Fitted minus the real channel's parameters.
    pub fitted_minus_real: StatisticDelta,
    /// Statistics re-measured on the updated simulator's unlabeled output.
    pub uchs_measured: ChannelStatistics,
    pub uchs_minus_fitted: StatisticDelta,
    pub err90: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UchsReport {
    pub config_hash: ConfigHash,
    pub real: SimulatorParams,
    pub base: SimulatorParams,
    pub seeds: Vec<UchsSeedReport>,
}

/// Fits the simulator to labeled data, generates unlabeled data with it and
/// trains every scheme.
pub fn uchs_loop(cfg: &ExperimentConfig, n_labeled: usize) -> Result<UchsReport> {
    let cfg = ExperimentConfig {
        unlabeled_source: UnlabeledSource::Uchs,
        ..cfg.clone()
    };
    cfg.validate()?;
    if n_labeled > cfg.n_train {
        return Err(Error::config(format!("n_labeled {n_labeled} exceeds n_train {}", cfg.n_train)));
    }
    let variants: Vec<Variant> = Scheme::ALL.into_iter().map(Variant::new).collect();
    let mut seeds = Vec::new();
    for seed in cfg.seeds() {
        let data = seed_data(&cfg, seed)?;
        let count = count_data(&cfg, &data, n_labeled)?;
        let fitted = count.fitted.expect("updated simulator always fits statistics");
        let measured = extract_statistics(&count.unlabeled, cfg.scenario(), &cfg.extraction)?;
        let cells = run_variants(&cfg, &data, &count, &variants, None)?;
        let fitted_params = update_simulator_params(&cfg.base, &fitted);
        seeds.push(UchsSeedReport {
            seed,
            n_labeled,
            fitted,
            fitted_minus_real: StatisticDelta::between(&fitted, &cfg.real),
            uchs_measured: measured,
            uchs_minus_fitted: StatisticDelta::between(&measured, &fitted_params),
            err90: cells
                .into_iter()
                .map(|c| (c.variant.label(), c.report.err_at_90))
                .collect(),
        });
    }
    Ok(UchsReport {
        config_hash: cfg.config_hash(),
        real: cfg.real.clone(),
        base: cfg.base.clone(),
        seeds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::fast();
        cfg.n_train = 40;
        cfg.n_test = 20;
        cfg.n_unlabeled = 30;
        cfg.counts = vec![20, 40];
        cfg.ablation_count = 40;
        cfg.hidden_dims = vec![8];
        cfg.train.epochs = 2;
        cfg.train.batch_size = 16;
        cfg.n_seeds = 1;
        cfg
    }

    #[test]
    fn presets_validate() {
        ExperimentConfig::default().validate().unwrap();
        ExperimentConfig::fast().validate().unwrap();
        assert_eq!(ExperimentConfig::fast().network_spec().input_dim, 4608);
        assert_eq!(ExperimentConfig::default().network_spec().input_dim, 18_432);
    }

    #[test]
    fn oversized_counts_are_rejected() {
        let mut cfg = tiny();
        cfg.counts = vec![41];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn sweep_has_one_row_per_cell() {
        let cfg = tiny();
        let table = sweep_labeled(&cfg, &Scheme::ALL).unwrap();
        assert_eq!(table.cells.len(), 2 * 4);
        let dir = tempfile::tempdir().unwrap();
        table.write_all(dir.path(), "sweep").unwrap();
        let text = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        assert_eq!(text.lines().count(), 1 + 8 + SWEEP_REFERENCE.len());
        assert!(text.lines().skip(1).take(8).all(|l| l.ends_with(",false")));
    }

    #[test]
    fn weight_ablation_unit_scale_matches_plain_run() {
        let cfg = tiny();
        let table = ablate_weight_scale(&cfg).unwrap();
        assert_eq!(table.cells.len(), 6);
        assert_eq!(table.curves.len(), 6);
        let plain = sweep_labeled(
            &ExperimentConfig {
                counts: vec![40],
                ..tiny()
            },
            &[Scheme::Sslb],
        )
        .unwrap();
        assert_eq!(table.err90("SSLB", 40), plain.err90("SSLB", 40));
    }

    #[test]
    fn confidence_ablation_cells() {
        let cfg = tiny();
        let table = ablate_confidence(&cfg).unwrap();
        assert_eq!(table.cells.len(), 3 * cfg.counts.len());
        let sslr = sweep_labeled(&cfg, &[Scheme::Sslr]).unwrap();
        for &n in &cfg.counts {
            assert_eq!(table.err90("SSLR", n), sslr.err90("SSLR", n));
        }
    }
}
