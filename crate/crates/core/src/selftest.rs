//! Fast oracle checks runnable from the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adversary::{attack_min_max, min_max_bound, GammaSearch};
use crate::aggregators::{agg_coordinatewise, agg_multi_krum, agg_weighted_mean, Coordinatewise};
use crate::datagen::{flip_labels, make_blobs, random_centers, BlobSpec, FlipMode};
use crate::fedcore::leave_one_out;
use crate::metrics::{shapley_values, ShapleyConfig};
use crate::numkit::{finite_difference_grad, forward_loss_grad, vecops, Batch, Matrix, ModelDims, ModelParams};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

fn gradient(rng: &mut ChaCha8Rng) -> Check {
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let dims = ModelDims::mlp(3, 4, 3);
        let p = ModelParams::init(dims, rng).unwrap();
        let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let labels = (0..5).map(|_| rng.random_range(0..3)).collect();
        let batch = Batch::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap();
        let g = forward_loss_grad(&p, &batch).unwrap().grads.into_flat();
        let fd = finite_difference_grad(&p, &batch, 1e-5).unwrap();
        let err = vecops::dist(&g, &fd) / vecops::norm(&g).max(vecops::norm(&fd)).max(1e-12);
        worst = worst.max(err);
    }
    check("gradient", worst < 1e-4, format!("max relative error {worst:.2e}"))
}

fn aggregators(rng: &mut ChaCha8Rng) -> Check {
    let v: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let same = vec![v.clone(); 7];
    let outs = [
        agg_weighted_mean(&same, &[1.0 / 7.0; 7]).unwrap().delta,
        agg_coordinatewise(&same, Coordinatewise::Median).unwrap().delta,
        agg_coordinatewise(&same, Coordinatewise::TrimmedMean(2)).unwrap().delta,
        agg_multi_krum(&same, 2, 3).unwrap().delta,
    ];
    let worst = outs.iter().map(|o| vecops::dist(o, &v)).fold(0.0, f64::max);
    check("unanimity", worst < 1e-12, format!("max deviation {worst:.2e}"))
}

fn min_max(rng: &mut ChaCha8Rng) -> Check {
    let benign: Vec<Vec<f64>> = (0..6).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let refs: Vec<&[f64]> = benign.iter().map(Vec::as_slice).collect();
    let crafted = attack_min_max(&refs, &GammaSearch::default()).unwrap();
    let bound = min_max_bound(&refs);
    let worst = refs.iter().map(|b| vecops::dist(&crafted.delta, b)).fold(0.0, f64::max);
    check("min_max", worst <= bound * (1.0 + 1e-12), format!("gamma {:.6}", crafted.gamma))
}

fn shapley() -> Check {
    let v = [0.5, 0.7, 0.6, 0.8];
    let nu = shapley_values(2, |s| Ok(v[s as usize]), &ShapleyConfig::default()).unwrap();
    let ok = (nu[0] - 0.2).abs() < 1e-12 && (nu[1] - 0.1).abs() < 1e-12;
    check("shapley", ok, format!("values {nu:?}"))
}

fn loo(rng: &mut ChaCha8Rng) -> Check {
    let locals: Vec<Vec<f64>> = (0..5).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let raw: Vec<f64> = (0..5).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let alpha: Vec<f64> = raw.iter().map(|a| a / total).collect();
    let mut w = vec![0.0; 6];
    for (l, a) in locals.iter().zip(&alpha) {
        vecops::axpy(*a, l, &mut w);
    }
    let mut worst = 0.0f64;
    for i in 0..5 {
        let got = leave_one_out(&w, &locals[i], alpha[i]).unwrap();
        let mut want = vec![0.0; 6];
        for j in (0..5).filter(|&j| j != i) {
            vecops::axpy(alpha[j] / (1.0 - alpha[i]), &locals[j], &mut want);
        }
        worst = worst.max(got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    check("leave_one_out", worst < 1e-12, format!("max abs diff {worst:.2e}"))
}

fn flips(rng: &mut ChaCha8Rng) -> Check {
    let centers = random_centers(4, 2, 1.0, rng);
    let ds = make_blobs(
        &BlobSpec { classes: 4, per_class: 2500, centers, sigma: 1.0, domain: 0 },
        rng,
    )
    .unwrap();
    let out = flip_labels(&ds, FlipMode::Pair, 0.5, rng).unwrap();
    let changed = ds.samples.iter().zip(&out.samples).filter(|(a, b)| a.label != b.label).count();
    let rate = changed as f64 / ds.len() as f64;
    let only_successor = ds
        .samples
        .iter()
        .zip(&out.samples)
        .all(|(a, b)| a.label == b.label || b.label == (a.label + 1) % 4);
    check("label_flip", (rate - 0.5).abs() <= 0.02 && only_successor, format!("rate {rate:.4}"))
}

/// Runs every check with a fixed seed.
pub fn run() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(20240601);
    vec![
        gradient(&mut rng),
        aggregators(&mut rng),
        min_max(&mut rng),
        shapley(),
        loo(&mut rng),
        flips(&mut rng),
    ]
}
