//! Indoor-factory scenario geometry and stochastic multipath CIR synthesis.
//!
//! The channel model is a reduced cluster model: exponentially distributed
//! cluster delays, exponential power decay with per-cluster lognormal
//! shadowing, Gaussian azimuth offsets around the geometric departure angle
//! and an optional Ricean line-of-sight component. The only knobs fitted from
//! measurements are the lognormal delay-spread and angle-spread parameters.

use std::f64::consts::PI;

use num_complex::{Complex32, Complex64};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel_stats;
use crate::dataset::{Dataset, Manifest, Sample};
use crate::error::{Error, Result};
use crate::rng::{sample_rng, stream_rng, Stream};

const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Half-width of the truncated sinc used for fractional-delay mapping, in taps.
pub const SINC_HALF_WIDTH: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub hall_width: f64,
    pub hall_length: f64,
    pub bs_spacing: f64,
    pub bs_height: f64,
    pub ue_height: f64,
    pub carrier_freq: f64,
    pub bandwidth: f64,
    pub n_bs: usize,
    pub n_port: usize,
    pub n_delay: usize,
    pub clutter_density: f64,
    pub clutter_height: f64,
    pub clutter_size: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            hall_width: 60.0,
            hall_length: 120.0,
            bs_spacing: 20.0,
            bs_height: 8.0,
            ue_height: 1.5,
            carrier_freq: 3.5e9,
            bandwidth: 1e8,
            n_bs: 18,
            n_port: 4,
            n_delay: 64,
            clutter_density: 0.4,
            clutter_height: 2.0,
            clutter_size: 2.0,
        }
    }
}

impl ScenarioConfig {
    /// Desk-scale hall: 60 m x 60 m, nine base stations, 32 taps.
    pub fn fast() -> Self {
        Self {
            hall_length: 60.0,
            n_bs: 9,
            n_delay: 32,
            ..Self::default()
        }
    }

    pub fn tap_spacing(&self) -> f64 {
        1.0 / self.bandwidth
    }

    /// Delays must be strictly below this value to land on the tap grid.
    pub fn max_delay(&self) -> f64 {
        self.n_delay as f64 / self.bandwidth
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_freq
    }

    /// Decay distance `k` of the LOS probability `exp(-d / k)`.
    pub fn los_distance_scale(&self) -> f64 {
        -self.clutter_size / (1.0 - self.clutter_density).ln() * (self.bs_height - self.ue_height)
            / (self.clutter_height - self.ue_height)
    }

    fn grid_count(extent: f64, spacing: f64, axis: &str) -> Result<usize> {
        let count = extent / spacing;
        let rounded = count.round();
        if rounded < 1.0 || (count - rounded).abs() > 1e-9 {
            return Err(Error::config(format!(
                "hall {axis} {extent} m is not a whole number of {spacing} m grid cells"
            )));
        }
        Ok(rounded as usize)
    }

    /// Grid columns along x and rows along y.
    pub fn grid_shape(&self) -> Result<(usize, usize)> {
        Ok((
            Self::grid_count(self.hall_width, self.bs_spacing, "width")?,
            Self::grid_count(self.hall_length, self.bs_spacing, "length")?,
        ))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hall_width", self.hall_width),
            ("hall_length", self.hall_length),
            ("bs_spacing", self.bs_spacing),
            ("carrier_freq", self.carrier_freq),
            ("bandwidth", self.bandwidth),
            ("clutter_size", self.clutter_size),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::config(format!("{name} must be positive, got {value}")));
            }
        }
        if self.n_port == 0 || self.n_delay == 0 {
            return Err(Error::config("n_port and n_delay must be at least 1"));
        }
        if !(self.clutter_density > 0.0 && self.clutter_density < 1.0) {
            return Err(Error::config(format!(
                "clutter_density must lie in (0, 1), got {}",
                self.clutter_density
            )));
        }
        if !(0.0 <= self.ue_height
            && self.ue_height < self.clutter_height
            && self.clutter_height < self.bs_height)
        {
            return Err(Error::config(
                "heights must satisfy ue_height < clutter_height < bs_height",
            ));
        }
        let (cols, rows) = self.grid_shape()?;
        if cols * rows != self.n_bs {
            return Err(Error::config(format!(
                "{cols} x {rows} grid at {} m spacing does not match n_bs = {}",
                self.bs_spacing, self.n_bs
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulatorParams {
    pub scenario: ScenarioConfig,
    /// Mean of log10(delay spread / s).
    pub ds_log_mean: f64,
    pub ds_log_std: f64,
    /// Mean of log10(angle spread / deg).
    pub as_log_mean: f64,
    pub as_log_std: f64,
    pub n_clusters: usize,
    pub delay_scale_r_tau: f64,
    /// Per-cluster shadowing, dB.
    pub per_cluster_shadow_std: f64,
    /// Replaces the clutter-derived LOS decay distance, meters.
    pub los_k_override: Option<f64>,
    pub ricean_k_db: f64,
    pub pathloss_exponent: f64,
    /// Clusters weaker than the strongest one by more than this are dropped, dB.
    pub cluster_cutoff_db: f64,
}

impl Default for SimulatorParams {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            ds_log_mean: -7.2,
            ds_log_std: 0.2,
            as_log_mean: 1.3,
            as_log_std: 0.2,
            n_clusters: 25,
            delay_scale_r_tau: 3.0,
            per_cluster_shadow_std: 3.0,
            los_k_override: None,
            ricean_k_db: 7.0,
            pathloss_exponent: 2.2,
            cluster_cutoff_db: 25.0,
        }
    }
}

impl SimulatorParams {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        if !(self.ds_log_std >= 0.0 && self.as_log_std >= 0.0) {
            return Err(Error::config("log-spread standard deviations must be >= 0"));
        }
        if !(self.ds_log_mean.is_finite() && self.as_log_mean.is_finite()) {
            return Err(Error::config("log-spread means must be finite"));
        }
        if self.n_clusters == 0 {
            return Err(Error::config("n_clusters must be at least 1"));
        }
        if !(self.delay_scale_r_tau > 1.0) {
            return Err(Error::config("delay_scale_r_tau must exceed 1"));
        }
        if let Some(k) = self.los_k_override {
            if !(k > 0.0) {
                return Err(Error::config("los_k_override must be positive"));
            }
        }
        Ok(())
    }

    pub fn los_distance_scale(&self) -> f64 {
        self.los_k_override
            .unwrap_or_else(|| self.scenario.los_distance_scale())
    }
}

/// Uniform linear port array, broadside along +x, elements along y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PortArray {
    pub n_port: usize,
    /// Element spacing in wavelengths.
    pub spacing: f64,
}

impl PortArray {
    pub fn half_wavelength(n_port: usize) -> Self {
        Self { n_port, spacing: 0.5 }
    }

    /// Response of port `p` to a plane wave leaving at azimuth `aod_deg`
    /// (measured from broadside).
    pub fn steering(&self, port: usize, aod_deg: f64) -> Complex64 {
        let phase = 2.0 * PI * self.spacing * port as f64 * aod_deg.to_radians().sin();
        Complex64::from_polar(1.0, phase)
    }

    /// Departure angle in degrees at the centre of DFT bin `k`.
    pub fn bin_angle_deg(&self, k: usize) -> f64 {
        let n = self.n_port as f64;
        let mut freq = k as f64 / n;
        if freq >= 0.5 {
            freq -= 1.0;
        }
        (freq / self.spacing).clamp(-1.0, 1.0).asin().to_degrees()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub bs_positions: Vec<[f64; 3]>,
    pub array: PortArray,
}

/// Lays out the base stations on a regular grid centred in the hall.
pub fn build_scenario(cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    let (cols, rows) = cfg.grid_shape()?;
    let half = cfg.bs_spacing / 2.0;
    let mut bs_positions = Vec::with_capacity(cols * rows);
    for row in 0..rows {
        for col in 0..cols {
            bs_positions.push([
                half + col as f64 * cfg.bs_spacing,
                half + row as f64 * cfg.bs_spacing,
                cfg.bs_height,
            ]);
        }
    }
    Ok(Scenario {
        config: cfg.clone(),
        bs_positions,
        array: PortArray::half_wavelength(cfg.n_port),
    })
}

/// Uniform UE drops over the hall floor at `ue_height`.
pub fn sample_ue_positions(scenario: &Scenario, n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = stream_rng(seed, Stream::Positions);
    let cfg = &scenario.config;
    (0..n)
        .map(|_| {
            [
                rng.gen::<f64>() * cfg.hall_width,
                rng.gen::<f64>() * cfg.hall_length,
                cfg.ue_height,
            ]
        })
        .collect()
}

pub fn los_probability(distance_2d: f64, k: f64) -> f64 {
    (-distance_2d.max(0.0) / k).exp()
}

pub fn draw_los_state<R: Rng + ?Sized>(distance_2d: f64, params: &SimulatorParams, rng: &mut R) -> bool {
    let p = los_probability(distance_2d, params.los_distance_scale());
    rng.gen::<f64>() < p
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkGeometry {
    pub distance_2d: f64,
    pub distance_3d: f64,
    /// Azimuth of the UE seen from the BS, relative to array broadside.
    pub los_aod_deg: f64,
}

impl LinkGeometry {
    pub fn new(bs: [f64; 3], ue: [f64; 3]) -> Self {
        let dx = ue[0] - bs[0];
        let dy = ue[1] - bs[1];
        let dz = ue[2] - bs[2];
        let distance_2d = dx.hypot(dy);
        Self {
            distance_2d,
            distance_3d: (distance_2d * distance_2d + dz * dz).sqrt(),
            los_aod_deg: dy.atan2(dx).to_degrees(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Path {
    pub delay: f64,
    pub power: f64,
    pub aod_deg: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultipathSet {
    pub paths: Vec<Path>,
    pub los: bool,
    /// Drawn delay spread of this link, seconds.
    pub sigma_ds: f64,
    /// Drawn angle spread of this link, degrees.
    pub sigma_as: f64,
}

impl MultipathSet {
    pub fn total_power(&self) -> f64 {
        self.paths.iter().map(|p| p.power).sum()
    }

    /// Power-weighted RMS delay spread of the path set.
    pub fn delay_spread(&self) -> f64 {
        let pairs: Vec<(f64, f64)> = self.paths.iter().map(|p| (p.power, p.delay)).collect();
        channel_stats::delay_spread(&pairs).unwrap_or(0.0)
    }
}

fn wrap_degrees(angle: f64) -> f64 {
    let wrapped = (angle + 180.0).rem_euclid(360.0) - 180.0;
    if wrapped.is_finite() {
        wrapped
    } else {
        0.0
    }
}

fn normalize_powers(paths: &mut [Path]) {
    let total: f64 = paths.iter().map(|p| p.power).sum();
    if total > 0.0 {
        for p in paths.iter_mut() {
            p.power /= total;
        }
    }
}

/// Delay scale `s` and kept prefix length such that the paths (sorted by
/// delay) scaled by `s` and cut at `limit` have RMS delay spread `target`.
///
/// Scaling only ever pushes the latest paths out of the window, so the spread
/// is linear in `s` between consecutive cut points and each prefix admits a
/// closed-form solution. When no prefix reaches `target` the widest spread the
/// window can hold is returned instead.
fn window_scale(paths: &[Path], target: f64, limit: f64) -> (f64, usize) {
    let n = paths.len();
    let inside = limit * (1.0 - 1e-9);
    let mut best = (1.0, n, -1.0);
    for keep in (1..=n).rev() {
        let pairs: Vec<(f64, f64)> = paths[..keep].iter().map(|p| (p.power, p.delay)).collect();
        let spread = channel_stats::delay_spread(&pairs).unwrap_or(0.0);
        let last = paths[keep - 1].delay;
        let upper = if last > 0.0 { inside / last } else { f64::INFINITY };
        let lower = if keep < n { limit / paths[keep].delay } else { 0.0 };
        if spread <= 0.0 {
            // Coincident delays: any scale that drops the rest will do.
            if best.2 < 0.0 {
                best = (if lower > 0.0 { lower } else { 1.0 }, keep, 0.0);
            }
            continue;
        }
        let s = target / spread;
        if s >= lower && s <= upper {
            return (s, keep);
        }
        if upper.is_finite() && upper >= lower && upper * spread > best.2 {
            best = (upper, keep, upper * spread);
        }
    }
    (best.0, best.1)
}

/// Draws the multipath set of one BS-UE link.
///
/// After clustering, delays are rescaled so the RMS delay spread of the paths
/// that fit in the tap window equals the drawn `sigma_ds`; this keeps the
/// realized spread on target under the Ricean LOS component. Paths pushed
/// past the window are discarded and powers renormalized to unit sum. Links
/// whose drawn spread the window cannot hold get the widest spread it can.
///
/// The LOS path carries zero phase at the reference element, so it depends
/// on position only through its angle and the link pathloss. Cluster phases
/// are uniform.
pub fn generate_link_channel<R: Rng + ?Sized>(
    link: &LinkGeometry,
    params: &SimulatorParams,
    rng: &mut R,
) -> MultipathSet {
    let los = draw_los_state(link.distance_2d, params, rng);
    let z_ds: f64 = StandardNormal.sample(rng);
    let z_as: f64 = StandardNormal.sample(rng);
    let sigma_ds = 10f64.powf(params.ds_log_mean + params.ds_log_std * z_ds);
    let sigma_as = 10f64.powf(params.as_log_mean + params.as_log_std * z_as);
    let r_tau = params.delay_scale_r_tau;

    let mut delays: Vec<f64> = (0..params.n_clusters)
        .map(|_| {
            let u: f64 = 1.0 - rng.gen::<f64>();
            -r_tau * sigma_ds * u.ln()
        })
        .collect();
    let min_delay = delays.iter().copied().fold(f64::INFINITY, f64::min);
    for d in &mut delays {
        *d -= min_delay;
    }
    delays.sort_by(|a, b| a.total_cmp(b));

    let mut paths: Vec<Path> = delays
        .into_iter()
        .map(|delay| {
            let shadow: f64 = StandardNormal.sample(rng);
            let power = (-delay * (r_tau - 1.0) / (r_tau * sigma_ds)).exp()
                * 10f64.powf(-params.per_cluster_shadow_std * shadow / 10.0);
            let offset: f64 = StandardNormal.sample(rng);
            Path {
                delay,
                power,
                aod_deg: wrap_degrees(link.los_aod_deg + sigma_as * offset),
                phase: rng.gen::<f64>() * 2.0 * PI,
            }
        })
        .collect();
    normalize_powers(&mut paths);

    let strongest = paths.iter().map(|p| p.power).fold(0.0, f64::max);
    let floor = strongest * 10f64.powf(-params.cluster_cutoff_db / 10.0);
    paths.retain(|p| p.power >= floor);
    normalize_powers(&mut paths);

    if los {
        let k = 10f64.powf(params.ricean_k_db / 10.0);
        for p in &mut paths {
            p.power /= k + 1.0;
        }
        paths.insert(
            0,
            Path {
                delay: 0.0,
                power: k / (k + 1.0),
                aod_deg: wrap_degrees(link.los_aod_deg),
                phase: 0.0,
            },
        );
    }

    let mut set = MultipathSet {
        paths,
        los,
        sigma_ds,
        sigma_as,
    };
    let limit = params.scenario.max_delay();
    let (scale, keep) = window_scale(&set.paths, sigma_ds, limit);
    set.paths.truncate(keep);
    for p in &mut set.paths {
        p.delay *= scale;
    }
    normalize_powers(&mut set.paths);
    set
}

/// Maps continuous paths onto the tap grid of one BS.
///
/// Returns a row-major `n_port x n_delay` matrix. Each path is spread over
/// the taps within [`SINC_HALF_WIDTH`] of its fractional delay by a
/// normalized sinc.
pub fn synthesize_cir(
    paths: &MultipathSet,
    array: &PortArray,
    cfg: &ScenarioConfig,
) -> Result<Vec<Complex64>> {
    let n_delay = cfg.n_delay;
    let mut out = vec![Complex64::new(0.0, 0.0); array.n_port * n_delay];
    let limit = cfg.max_delay();
    for (index, path) in paths.paths.iter().enumerate() {
        if !(path.delay >= 0.0 && path.delay < limit) {
            return Err(Error::DelayOutOfRange {
                path: index,
                delay: path.delay,
                limit,
            });
        }
        let frac = path.delay * cfg.bandwidth;
        let amplitude = Complex64::from_polar(path.power.sqrt(), path.phase);
        let lo = (frac - SINC_HALF_WIDTH as f64).ceil().max(0.0) as usize;
        let hi = ((frac + SINC_HALF_WIDTH as f64).floor() as usize).min(n_delay - 1);
        let steering: Vec<Complex64> = (0..array.n_port)
            .map(|port| amplitude * array.steering(port, path.aod_deg))
            .collect();
        for tap in lo..=hi {
            let weight = sinc(tap as f64 - frac);
            if weight == 0.0 {
                continue;
            }
            for (port, s) in steering.iter().enumerate() {
                out[port * n_delay + tap] += s * weight;
            }
        }
    }
    Ok(out)
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = PI * x;
        // sin(pi * n) is not exactly zero in floating point
        if x.fract() == 0.0 {
            0.0
        } else {
            px.sin() / px
        }
    }
}

/// Path loss in dB: free space at 1 m plus a log-distance slope.
pub fn pathloss_db(distance_3d: f64, params: &SimulatorParams) -> f64 {
    let fspl_1m = 20.0 * (4.0 * PI / params.scenario.wavelength()).log10();
    fspl_1m + 10.0 * params.pathloss_exponent * distance_3d.max(1.0).log10()
}

/// Complex CIR of one UE position, indexed `[bs][port][tap]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CirTensor {
    n_bs: usize,
    n_port: usize,
    n_delay: usize,
    data: Vec<Complex32>,
}

impl CirTensor {
    pub fn zeros(n_bs: usize, n_port: usize, n_delay: usize) -> Self {
        Self {
            n_bs,
            n_port,
            n_delay,
            data: vec![Complex32::new(0.0, 0.0); n_bs * n_port * n_delay],
        }
    }

    pub fn from_vec(dims: (usize, usize, usize), data: Vec<Complex32>) -> Result<Self> {
        let (n_bs, n_port, n_delay) = dims;
        if data.len() != n_bs * n_port * n_delay {
            return Err(Error::Shape {
                expected: format!("{} values", n_bs * n_port * n_delay),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Self {
            n_bs,
            n_port,
            n_delay,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n_bs, self.n_port, self.n_delay)
    }

    pub fn data(&self) -> &[Complex32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex32] {
        &mut self.data
    }

    pub fn get(&self, bs: usize, port: usize, tap: usize) -> Complex32 {
        self.data[(bs * self.n_port + port) * self.n_delay + tap]
    }

    /// Row-major `n_port x n_delay` block of one BS.
    pub fn bs_matrix(&self, bs: usize) -> &[Complex32] {
        let len = self.n_port * self.n_delay;
        &self.data[bs * len..(bs + 1) * len]
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| (c.re as f64).powi(2) + (c.im as f64).powi(2)).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }
}

/// Per-BS multipath draws of a sample, kept for diagnostics and tests.
pub fn generate_links<R: Rng + ?Sized>(
    scenario: &Scenario,
    params: &SimulatorParams,
    position: [f64; 3],
    rng: &mut R,
) -> Vec<(LinkGeometry, MultipathSet)> {
    scenario
        .bs_positions
        .iter()
        .map(|&bs| {
            let link = LinkGeometry::new(bs, position);
            let paths = generate_link_channel(&link, params, rng);
            (link, paths)
        })
        .collect()
}

pub fn generate_sample<R: Rng + ?Sized>(
    scenario: &Scenario,
    params: &SimulatorParams,
    position: [f64; 3],
    rng: &mut R,
) -> Result<CirTensor> {
    let cfg = &scenario.config;
    let mut tensor = CirTensor::zeros(cfg.n_bs, cfg.n_port, cfg.n_delay);
    let block = cfg.n_port * cfg.n_delay;
    for (bs, (link, paths)) in generate_links(scenario, params, position, rng)
        .into_iter()
        .enumerate()
    {
        let cir = synthesize_cir(&paths, &scenario.array, cfg)?;
        let gain = 10f64.powf(-pathloss_db(link.distance_3d, params) / 20.0);
        for (dst, src) in tensor.data[bs * block..(bs + 1) * block].iter_mut().zip(&cir) {
            *dst = Complex32::new((src.re * gain) as f32, (src.im * gain) as f32);
        }
    }
    Ok(tensor)
}

/// Generates `n` samples. Sample `i` depends only on `(seed, i)`.
pub fn generate_dataset(
    scenario: &Scenario,
    params: &SimulatorParams,
    n: usize,
    labeled: bool,
    seed: u64,
) -> Result<Dataset> {
    params.validate()?;
    if params.scenario != scenario.config {
        return Err(Error::config(
            "simulator parameters describe a different scenario",
        ));
    }
    let positions = sample_ue_positions(scenario, n, seed);
    let samples = positions
        .par_iter()
        .enumerate()
        .map(|(index, &position)| {
            let mut rng = sample_rng(seed, index as u64);
            let cir = generate_sample(scenario, params, position, &mut rng)?;
            Ok(Sample {
                cir,
                position: labeled.then_some([position[0], position[1]]),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let cfg = &scenario.config;
    Dataset::new(
        (cfg.n_bs, cfg.n_port, cfg.n_delay),
        samples,
        Manifest::generated(params.clone(), seed, labeled),
    )
}
