//! Simulator parameters survive generation followed by statistic extraction.

use ssl_positioning::channel_sim::{build_scenario, generate_dataset, CirTensor, ScenarioConfig, SimulatorParams};
use ssl_positioning::channel_stats::{extract_statistics, update_simulator_params, ExtractionConfig};
use ssl_positioning::dataset::{Dataset, Manifest, Sample};
use ssl_positioning::error::Error;

#[test]
fn delay_spread_distribution_round_trips() {
    let cfg = ScenarioConfig::default();
    let scenario = build_scenario(&cfg).unwrap();
    let params = SimulatorParams {
        ds_log_mean: -7.0,
        ds_log_std: 0.2,
        ..SimulatorParams::default()
    };
    let data = generate_dataset(&scenario, &params, 2000, true, 1).unwrap();
    let stats = extract_statistics(&data, &cfg, &ExtractionConfig::default()).unwrap();
    println!("{stats:?}");
    assert!((stats.ds_log_mean - params.ds_log_mean).abs() <= 0.1, "{stats:?}");
    assert!((stats.ds_log_std - params.ds_log_std).abs() <= 0.15, "{stats:?}");

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.reverse();
    let reversed = data.select(&order, "reversed".into());
    let again = extract_statistics(&reversed, &cfg, &ExtractionConfig::default()).unwrap();
    assert_eq!(again.n_samples_used, stats.n_samples_used);
    assert!((again.ds_log_mean - stats.ds_log_mean).abs() < 1e-12);
    assert!((again.as_log_std - stats.as_log_std).abs() < 1e-12);

    let updated = update_simulator_params(&SimulatorParams::default(), &stats);
    assert_eq!(updated.ds_log_mean, stats.ds_log_mean);
    assert_eq!(updated.n_clusters, 25);
    assert_eq!(update_simulator_params(&updated, &stats), updated);
}

#[test]
fn single_path_links_cannot_be_fitted() {
    let cfg = ScenarioConfig::fast();
    let (n_bs, n_port, n_delay) = (cfg.n_bs, cfg.n_port, cfg.n_delay);
    let samples = (0..4)
        .map(|i| {
            let mut cir = CirTensor::zeros(n_bs, n_port, n_delay);
            for bs in 0..n_bs {
                for port in 0..n_port {
                    cir.data_mut()[(bs * n_port + port) * n_delay + i].re = 1.0;
                }
            }
            Sample { cir, position: Some([i as f64, 1.0]) }
        })
        .collect();
    let data = Dataset::new((n_bs, n_port, n_delay), samples, Manifest::default()).unwrap();
    assert!(matches!(
        extract_statistics(&data, &cfg, &ExtractionConfig::default()),
        Err(Error::Domain(_))
    ));
}
