//! Identities between the pooled, weighted and student losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssl_positioning::neural_net::{batch_loss, Outputs, Target};
use ssl_positioning::sslb::{position_loss, sslr_weighted_loss, student_loss, teacher_loss, Residuals};

fn points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 2]> {
    (0..n).map(|_| [rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0)]).collect()
}

struct Batch {
    pred_l: Vec<[f64; 2]>,
    target_l: Vec<[f64; 2]>,
    pred_p: Vec<[f64; 2]>,
    target_p: Vec<[f64; 2]>,
}

impl Batch {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let n = rng.gen_range(1..60);
        let n_star = rng.gen_range(0..120);
        Self {
            pred_l: points(rng, n),
            target_l: points(rng, n),
            pred_p: points(rng, n_star),
            target_p: points(rng, n_star),
        }
    }

    fn labeled(&self) -> Residuals<'_> {
        Residuals { pred: &self.pred_l, target: &self.target_l }
    }

    fn pseudo(&self) -> Residuals<'_> {
        Residuals { pred: &self.pred_p, target: &self.target_p }
    }

    fn pooled_position_loss(&self) -> f64 {
        let pred: Vec<_> = self.pred_l.iter().chain(&self.pred_p).copied().collect();
        let target: Vec<_> = self.target_l.iter().chain(&self.target_p).copied().collect();
        position_loss(&pred, &target).unwrap()
    }

    /// Network-side loss with one row per sample and `sqrt(w)` row scales.
    fn row_loss(&self, w: f64, w_star: &[f64]) -> f64 {
        let position: Vec<_> = self.pred_l.iter().chain(&self.pred_p).copied().collect();
        let outputs = Outputs { bias: vec![[0.0; 2]; position.len()], position };
        let targets: Vec<Target> = self
            .target_l
            .iter()
            .map(|t| Target { position_scale: w.sqrt(), ..Target::position(*t) })
            .chain(self.target_p.iter().zip(w_star).map(|(t, ws)| Target {
                position_scale: ws.sqrt(),
                ..Target::position(*t)
            }))
            .collect();
        batch_loss(&outputs, &targets)
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

#[test]
fn unit_weight_losses_reduce_to_pooled_position_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..100 {
        let b = Batch::random(&mut rng);
        let ones = vec![1.0; b.pred_p.len()];
        let pooled = b.pooled_position_loss();
        let student = student_loss(b.labeled(), b.pseudo(), &ones).unwrap();
        let weighted = sslr_weighted_loss(b.labeled(), b.pseudo(), 1.0, 1.0).unwrap();
        assert!(rel(student, pooled) <= 1e-12, "{student} vs {pooled}");
        assert!(rel(weighted, pooled) <= 1e-12, "{weighted} vs {pooled}");
        assert!(rel(b.row_loss(1.0, &ones), pooled) <= 1e-12);
    }
}

#[test]
fn scalar_pseudo_weights_match_weighted_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let b = Batch::random(&mut rng);
        let w_star: f64 = rng.gen_range(0.0..3.0);
        let weights = vec![w_star; b.pred_p.len()];
        let student = student_loss(b.labeled(), b.pseudo(), &weights).unwrap();
        let weighted = sslr_weighted_loss(b.labeled(), b.pseudo(), 1.0, w_star).unwrap();
        assert!(rel(student, weighted) <= 1e-12);
        assert!(rel(b.row_loss(1.0, &weights), weighted) <= 1e-12);
    }
}

#[test]
fn per_sample_weights_match_network_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..100 {
        let b = Batch::random(&mut rng);
        let weights: Vec<f64> = (0..b.pred_p.len()).map(|_| rng.gen_range(0.0..4.0)).collect();
        let student = student_loss(b.labeled(), b.pseudo(), &weights).unwrap();
        assert!(rel(b.row_loss(1.0, &weights), student) <= 1e-12);
    }
}

#[test]
fn zero_pseudo_weights_leave_the_scaled_labeled_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..100 {
        let b = Batch::random(&mut rng);
        let n = b.pred_l.len() as f64;
        let n_star = b.pred_p.len() as f64;
        let zeros = vec![0.0; b.pred_p.len()];
        let student = student_loss(b.labeled(), b.pseudo(), &zeros).unwrap();
        let labeled_only = position_loss(&b.pred_l, &b.target_l).unwrap() * n / (n + n_star);
        assert!(rel(student, labeled_only) <= 1e-12);
    }
}

#[test]
fn teacher_loss_without_bias_residuals_is_position_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..100 {
        let n = rng.gen_range(1..50);
        let pred = points(&mut rng, n);
        let target = points(&mut rng, n);
        let bias = points(&mut rng, n);
        let t = teacher_loss(&pred, &bias, &target, &bias).unwrap();
        assert!(rel(t, position_loss(&pred, &target).unwrap()) <= 1e-12);

        let pred_bias = points(&mut rng, n);
        let outputs = Outputs { position: pred.clone(), bias: pred_bias.clone() };
        let targets: Vec<Target> = target.iter().zip(&bias).map(|(p, b)| Target::biased(*p, *b)).collect();
        let full = teacher_loss(&pred, &pred_bias, &target, &bias).unwrap();
        assert!(rel(batch_loss(&outputs, &targets), full) <= 1e-12);
    }
}
