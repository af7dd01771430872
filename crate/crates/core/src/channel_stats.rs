//! Delay-spread and angle-spread extraction from CIR tensors, and the
//! lognormal fits that feed back into [`SimulatorParams`].

use std::sync::Arc;

use num_complex::{Complex32, Complex64};
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::channel_sim::{PortArray, ScenarioConfig, SimulatorParams};
use crate::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathEstimate {
    pub tap_index: usize,
    pub delay: f64,
    pub power: f64,
    /// Power-weighted centroid of the angle bins at this tap, degrees.
    pub angle_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStatistics {
    pub ds_log_mean: f64,
    pub ds_log_std: f64,
    pub as_log_mean: f64,
    pub as_log_std: f64,
    /// Number of links that entered the delay-spread fit.
    pub n_samples_used: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    /// Dynamic range below the strongest tap kept as paths, dB.
    pub threshold_db: f64,
    /// Subtract the power-weighted mean angle before computing the spread.
    pub mean_centered_as: bool,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            threshold_db: 25.0,
            mean_centered_as: false,
        }
    }
}

/// Unitary DFT across the port axis of an `n_port x n_delay` matrix.
pub struct AngleTransform {
    n_port: usize,
    fft: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl AngleTransform {
    pub fn new(n_port: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(n_port);
        Self {
            n_port,
            fft,
            scale: 1.0 / (n_port as f64).sqrt(),
        }
    }

    /// `h` is row-major with ports as rows. The result has angle bins as rows.
    pub fn apply<T>(&self, h: &[T], n_delay: usize) -> Vec<Complex64>
    where
        T: Copy + Widen,
    {
        assert_eq!(h.len(), self.n_port * n_delay, "matrix is not n_port x n_delay");
        let mut out = vec![Complex64::new(0.0, 0.0); h.len()];
        let mut column = vec![Complex64::new(0.0, 0.0); self.n_port];
        for tap in 0..n_delay {
            for (port, c) in column.iter_mut().enumerate() {
                *c = h[port * n_delay + tap].widen();
            }
            self.fft.process(&mut column);
            for (bin, c) in column.iter().enumerate() {
                out[bin * n_delay + tap] = c * self.scale;
            }
        }
        out
    }
}

/// Complex sample types accepted by the angle transform.
pub trait Widen {
    fn widen(self) -> Complex64;
}

impl Widen for Complex64 {
    fn widen(self) -> Complex64 {
        self
    }
}

impl Widen for Complex32 {
    fn widen(self) -> Complex64 {
        Complex64::new(self.re as f64, self.im as f64)
    }
}

pub fn to_angle_domain<T>(h: &[T], n_port: usize, n_delay: usize) -> Vec<Complex64>
where
    T: Copy + Widen,
{
    AngleTransform::new(n_port).apply(h, n_delay)
}

/// Taps within `threshold_db` of the strongest tap, as path estimates.
pub fn detect_multipaths(
    cir: &[Complex32],
    cfg: &ScenarioConfig,
    array: &PortArray,
    threshold_db: f64,
) -> Vec<PathEstimate> {
    detect_with(cir, cfg, array, &AngleTransform::new(array.n_port), threshold_db)
}

fn detect_with(
    cir: &[Complex32],
    cfg: &ScenarioConfig,
    array: &PortArray,
    transform: &AngleTransform,
    threshold_db: f64,
) -> Vec<PathEstimate> {
    let n_delay = cfg.n_delay;
    let n_port = array.n_port;
    let tap_power: Vec<f64> = (0..n_delay)
        .map(|tap| {
            (0..n_port)
                .map(|port| cir[port * n_delay + tap].norm_sqr() as f64)
                .sum()
        })
        .collect();
    let strongest = tap_power.iter().copied().fold(0.0, f64::max);
    if strongest <= 0.0 {
        return Vec::new();
    }
    let floor = strongest * 10f64.powf(-threshold_db / 10.0);
    let angular = transform.apply(cir, n_delay);
    let bin_angles: Vec<f64> = (0..n_port).map(|k| array.bin_angle_deg(k)).collect();
    tap_power
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > floor)
        .map(|(tap, &power)| {
            let (num, den) = bin_angles.iter().enumerate().fold((0.0, 0.0), |(n, d), (k, a)| {
                let w = angular[k * n_delay + tap].norm_sqr();
                (n + w * a, d + w)
            });
            PathEstimate {
                tap_index: tap,
                delay: tap as f64 / cfg.bandwidth,
                power,
                angle_deg: if den > 0.0 { num / den } else { 0.0 },
            }
        })
        .collect()
}

fn total_power(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::domain("spread of an empty path set"));
    }
    let total: f64 = pairs.iter().map(|(p, _)| p).sum();
    if !(total > 0.0) {
        return Err(Error::domain("path powers must sum to a positive value"));
    }
    Ok(total)
}

/// RMS angle about zero: `sqrt(sum(theta^2 P) / sum(P))`, input `(P, theta_deg)`.
pub fn angle_spread(paths: &[(f64, f64)]) -> Result<f64> {
    let total = total_power(paths)?;
    let second: f64 = paths.iter().map(|(p, theta)| theta * theta * p).sum();
    Ok((second / total).sqrt())
}

/// RMS angle about the power-weighted mean angle.
pub fn angle_spread_centered(paths: &[(f64, f64)]) -> Result<f64> {
    delay_spread(paths)
}

/// RMS delay spread about the mean delay, input `(P, tau)`.
pub fn delay_spread(paths: &[(f64, f64)]) -> Result<f64> {
    let total = total_power(paths)?;
    let mean = paths.iter().map(|(p, tau)| tau * p).sum::<f64>() / total;
    let var = paths
        .iter()
        .map(|(p, tau)| (tau - mean).powi(2) * p)
        .sum::<f64>()
        / total;
    Ok(var.max(0.0).sqrt())
}

/// Mean and population standard deviation of `log10(values)`.
pub fn fit_lognormal(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::domain(format!(
            "lognormal fit needs at least 2 values, got {}",
            values.len()
        )));
    }
    if let Some(bad) = values.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::domain(format!("lognormal fit got non-positive value {bad}")));
    }
    let logs: Vec<f64> = values.iter().map(|v| v.log10()).collect();
    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Delay and angle spread of one link, `None` when fewer than two paths are found.
pub fn link_spreads(paths: &[PathEstimate], mean_centered_as: bool) -> Option<(f64, f64)> {
    if paths.len() < 2 {
        return None;
    }
    let delays: Vec<(f64, f64)> = paths.iter().map(|p| (p.power, p.delay)).collect();
    let angles: Vec<(f64, f64)> = paths.iter().map(|p| (p.power, p.angle_deg)).collect();
    let ds = delay_spread(&delays).ok()?;
    let angle = if mean_centered_as {
        angle_spread_centered(&angles)
    } else {
        angle_spread(&angles)
    }
    .ok()?;
    Some((ds, angle))
}

/// Pools per-link spreads over every (sample, BS) pair and fits lognormals.
///
/// Links with fewer than two detected paths are left out, as are zero
/// spreads, since their logarithm is undefined.
pub fn extract_statistics(
    dataset: &Dataset,
    cfg: &ScenarioConfig,
    opts: &ExtractionConfig,
) -> Result<ChannelStatistics> {
    if dataset.is_empty() {
        return Err(Error::domain("cannot extract statistics from an empty dataset"));
    }
    let (n_bs, n_port, n_delay) = dataset.dims();
    if (n_bs, n_port, n_delay) != (cfg.n_bs, cfg.n_port, cfg.n_delay) {
        return Err(Error::Shape {
            expected: format!("({}, {}, {})", cfg.n_bs, cfg.n_port, cfg.n_delay),
            actual: format!("({n_bs}, {n_port}, {n_delay})"),
        });
    }
    let array = PortArray::half_wavelength(n_port);
    let per_sample: Vec<Vec<(f64, f64)>> = dataset
        .samples()
        .par_iter()
        .map_init(
            || AngleTransform::new(n_port),
            |transform, sample| {
                (0..n_bs)
                    .filter_map(|bs| {
                        let paths = detect_with(
                            sample.cir.bs_matrix(bs),
                            cfg,
                            &array,
                            transform,
                            opts.threshold_db,
                        );
                        link_spreads(&paths, opts.mean_centered_as)
                    })
                    .collect()
            },
        )
        .collect();
    let mut ds = Vec::new();
    let mut angle = Vec::new();
    for (d, a) in per_sample.into_iter().flatten() {
        if d > 0.0 {
            ds.push(d);
        }
        if a > 0.0 {
            angle.push(a);
        }
    }
    if ds.len() < 2 || angle.len() < 2 {
        return Err(Error::domain(
            "too few links with two or more detected paths to fit spread distributions",
        ));
    }
    let (ds_log_mean, ds_log_std) = fit_lognormal(&ds)?;
    let (as_log_mean, as_log_std) = fit_lognormal(&angle)?;
    Ok(ChannelStatistics {
        ds_log_mean,
        ds_log_std,
        as_log_mean,
        as_log_std,
        n_samples_used: ds.len(),
    })
}

/// Injects fitted spread distributions into `base`; all other fields are kept.
pub fn update_simulator_params(base: &SimulatorParams, stats: &ChannelStatistics) -> SimulatorParams {
    SimulatorParams {
        ds_log_mean: stats.ds_log_mean,
        ds_log_std: stats.ds_log_std,
        as_log_mean: stats.as_log_mean,
        as_log_std: stats.as_log_std,
        ..base.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel_sim::{synthesize_cir, MultipathSet, Path};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use std::f64::consts::PI;

    fn brute_force_dft(h: &[Complex64], n_port: usize, n_delay: usize) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); h.len()];
        for k in 0..n_port {
            for t in 0..n_delay {
                let mut acc = Complex64::new(0.0, 0.0);
                for p in 0..n_port {
                    let angle = -2.0 * PI * (p * k) as f64 / n_port as f64;
                    acc += h[p * n_delay + t] * Complex64::from_polar(1.0, angle);
                }
                out[k * n_delay + t] = acc / (n_port as f64).sqrt();
            }
        }
        out
    }

    fn random_matrix(rng: &mut ChaCha8Rng, len: usize) -> Vec<Complex64> {
        (0..len)
            .map(|_| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
            .collect()
    }

    #[test]
    fn angle_domain_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = random_matrix(&mut rng, 4 * 64);
        let fast = to_angle_domain(&h, 4, 64);
        let slow = brute_force_dft(&h, 4, 64);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn angle_domain_preserves_frobenius_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = random_matrix(&mut rng, 4 * 64);
        let before: f64 = h.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        let after: f64 = to_angle_domain(&h, 4, 64)
            .iter()
            .map(|c| c.norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn steering_vector_concentrates_in_its_bin() {
        let n = 4;
        for k in 0..n {
            let h: Vec<Complex64> = (0..n)
                .map(|p| Complex64::from_polar(1.0, 2.0 * PI * (p * k) as f64 / n as f64) / 2.0)
                .collect();
            let ang = to_angle_domain(&h, n, 1);
            for (bin, c) in ang.iter().enumerate() {
                if bin == k {
                    assert!((c.norm() - 1.0).abs() < 1e-12);
                } else {
                    assert!(c.norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bin_angles_of_half_wavelength_array() {
        let array = PortArray::half_wavelength(4);
        let angles: Vec<f64> = (0..4).map(|k| array.bin_angle_deg(k)).collect();
        let expected = [0.0, 30.0, -90.0, -30.0];
        for (a, e) in angles.iter().zip(expected) {
            assert!((a - e).abs() < 1e-9, "{angles:?}");
        }
    }

    #[test]
    fn angle_spread_examples() {
        assert_eq!(angle_spread(&[(1.0, 0.0)]).unwrap(), 0.0);
        assert!((angle_spread(&[(1.0, 30.0), (1.0, -30.0)]).unwrap() - 30.0).abs() < 1e-12);
        let v = angle_spread(&[(1.0, 0.0), (1.0, 60.0)]).unwrap();
        assert!((v - 1800f64.sqrt()).abs() < 1e-12);
        assert!((v - 42.4264).abs() < 1e-4);
        assert!(matches!(angle_spread(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn centered_spread_removes_mean_angle() {
        let v = angle_spread_centered(&[(1.0, 0.0), (1.0, 60.0)]).unwrap();
        assert!((v - 30.0).abs() < 1e-12);
    }

    #[test]
    fn delay_spread_examples() {
        assert_eq!(delay_spread(&[(2.0, 1e-7)]).unwrap(), 0.0);
        assert!((delay_spread(&[(1.0, 0.0), (1.0, 1e-7)]).unwrap() - 5e-8).abs() < 1e-20);
        let v = delay_spread(&[(1.0, 0.0), (3.0, 4e-8)]).unwrap();
        assert!((v - 3e-16f64.sqrt()).abs() < 1e-21);
        assert!((v - 17.32e-9).abs() < 0.01e-9);
        assert!(matches!(delay_spread(&[]), Err(Error::Domain(_))));
        assert!(matches!(delay_spread(&[(0.0, 1.0)]), Err(Error::Domain(_))));
    }

    proptest! {
        #[test]
        fn spreads_are_power_scale_invariant(
            paths in prop::collection::vec((0.01f64..10.0, -90.0f64..90.0), 1..20),
            scale in 0.001f64..1000.0,
        ) {
            let scaled: Vec<(f64, f64)> = paths.iter().map(|(p, x)| (p * scale, *x)).collect();
            let a = angle_spread(&paths).unwrap();
            let b = angle_spread(&scaled).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
            let ns: Vec<(f64, f64)> = paths.iter().map(|(p, x)| (*p, (x + 90.0) * 1e-9)).collect();
            let ns_scaled: Vec<(f64, f64)> = ns.iter().map(|(p, x)| (p * scale, *x)).collect();
            let a = delay_spread(&ns).unwrap();
            let b = delay_spread(&ns_scaled).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1e-9));
        }

        #[test]
        fn delay_spread_is_shift_invariant(
            paths in prop::collection::vec((0.01f64..10.0, 0.0f64..500.0), 1..20),
            shift in 0.0f64..300.0,
        ) {
            let a = delay_spread(&paths).unwrap();
            let shifted: Vec<(f64, f64)> = paths.iter().map(|(p, t)| (*p, t + shift)).collect();
            let b = delay_spread(&shifted).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn lognormal_fit_examples() {
        let (m, s) = fit_lognormal(&[1e-7; 5]).unwrap();
        assert!((m + 7.0).abs() < 1e-12 && s.abs() < 1e-12);
        let (m, s) = fit_lognormal(&[1e-8, 1e-6]).unwrap();
        assert!((m + 7.0).abs() < 1e-12 && (s - 1.0).abs() < 1e-12);
        assert!(fit_lognormal(&[1.0]).is_err());
        assert!(fit_lognormal(&[1.0, 0.0]).is_err());
        assert!(fit_lognormal(&[1.0, -2.0]).is_err());
    }

    #[test]
    fn lognormal_fit_recovers_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(-7.0, 0.3).unwrap();
        let values: Vec<f64> = (0..10_000).map(|_| 10f64.powf(normal.sample(&mut rng))).collect();
        let (m, s) = fit_lognormal(&values).unwrap();
        assert!((m + 7.0).abs() < 0.01, "mean {m}");
        assert!((s - 0.3).abs() < 0.01, "std {s}");
    }

    fn path(delay: f64, power: f64, aod_deg: f64) -> Path {
        Path {
            delay,
            power,
            aod_deg,
            phase: 0.7,
        }
    }

    fn cir_of(paths: Vec<Path>) -> Vec<Complex32> {
        let cfg = ScenarioConfig::default();
        let set = MultipathSet {
            paths,
            los: false,
            sigma_ds: 0.0,
            sigma_as: 0.0,
        };
        synthesize_cir(&set, &PortArray::half_wavelength(4), &cfg)
            .unwrap()
            .into_iter()
            .map(|c| Complex32::new(c.re as f32, c.im as f32))
            .collect()
    }

    #[test]
    fn detects_single_on_grid_path() {
        let cfg = ScenarioConfig::default();
        let est = detect_multipaths(
            &cir_of(vec![path(1.2e-7, 1.0, 0.0)]),
            &cfg,
            &PortArray::half_wavelength(4),
            25.0,
        );
        assert_eq!(est.len(), 1);
        assert_eq!(est[0].tap_index, 12);
        assert!(est[0].angle_deg.abs() < 1e-9);
    }

    #[test]
    fn threshold_hides_weak_path() {
        let cfg = ScenarioConfig::default();
        let cir = cir_of(vec![path(0.0, 1.0, 0.0), path(1e-7, 1e-3, 0.0)]);
        let est = detect_multipaths(&cir, &cfg, &PortArray::half_wavelength(4), 25.0);
        assert_eq!(est.len(), 1);
        let est = detect_multipaths(&cir, &cfg, &PortArray::half_wavelength(4), 35.0);
        assert_eq!(est.len(), 2);
    }

    #[test]
    fn three_path_link_is_recovered() {
        let cfg = ScenarioConfig::default();
        let truth = vec![path(0.0, 0.6, 0.0), path(7e-8, 0.3, 30.0), path(2.1e-7, 0.1, -30.0)];
        let est = detect_multipaths(&cir_of(truth.clone()), &cfg, &PortArray::half_wavelength(4), 25.0);
        assert_eq!(est.len(), 3);
        for (e, t) in est.iter().zip(&truth) {
            assert_eq!(e.tap_index, (t.delay * cfg.bandwidth).round() as usize);
            // per-tap power sums over 4 ports
            assert!((e.power / (4.0 * t.power) - 1.0).abs() < 0.05);
            assert!((e.angle_deg - t.aod_deg).abs() < 1e-3);
        }
    }

    #[test]
    fn all_zero_cir_has_no_paths() {
        let cfg = ScenarioConfig::default();
        let cir = vec![Complex32::new(0.0, 0.0); 4 * 64];
        assert!(detect_multipaths(&cir, &cfg, &PortArray::half_wavelength(4), 25.0).is_empty());
    }

    #[test]
    fn update_replaces_only_spread_fields() {
        let base = SimulatorParams::default();
        let same = ChannelStatistics {
            ds_log_mean: base.ds_log_mean,
            ds_log_std: base.ds_log_std,
            as_log_mean: base.as_log_mean,
            as_log_std: base.as_log_std,
            n_samples_used: 10,
        };
        assert_eq!(update_simulator_params(&base, &same), base);
        let stats = ChannelStatistics {
            ds_log_mean: -6.5,
            ds_log_std: 0.1,
            as_log_mean: 1.7,
            as_log_std: 0.05,
            n_samples_used: 10,
        };
        let once = update_simulator_params(&base, &stats);
        assert_eq!(once.n_clusters, 25);
        assert_eq!(once.ds_log_mean, -6.5);
        assert_eq!(once.as_log_std, 0.05);
        assert_eq!(update_simulator_params(&once, &stats), once);
    }
}
