//! Library routines checked against independent reference computations.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedsim_core::adversary::{attack_min_max, attack_min_sum, GammaSearch};
use fedsim_core::aggregators::{agg_dnc, dnc_scores, top_singular_vector, DncParams};
use fedsim_core::datagen::{
    domain_blobs, make_blobs, partition_dirichlet, random_centers, AffineTransform, BlobSpec, Dataset, DomainSpec,
    DomainSuiteConfig, PartitionConfig,
};
use fedsim_core::metrics::top1_accuracy;
use fedsim_core::numkit::{forward_loss_grad, sgd_apply, ModelDims, ModelParams, MomentumBuffer, SgdConfig};

fn centred(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let d = rows[0].len();
    let m = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = m.row_mean();
    DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j])
}

#[test]
fn dnc_scores_match_dense_eigendecomposition() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let n = rng.random_range(3..10);
        let d = rng.random_range(2..7);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let c = centred(&rows);
        let eig = SymmetricEigen::new(c.transpose() * &c);
        let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
        // a near-degenerate top pair leaves the direction ill-defined
        if vals[0] - vals[1] < 1e-3 * vals[0] {
            continue;
        }
        let top = eig.eigenvalues.imax();
        let v = eig.eigenvectors.column(top);
        let want: Vec<f64> = (0..n).map(|i| c.row(i).dot(&v.transpose()).powi(2)).collect();
        let got = dnc_scores(&rows, &mut rng);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-8, "{got:?} vs {want:?}");
        }
        let sv = top_singular_vector(&c.row_iter().map(|r| r.iter().copied().collect()).collect::<Vec<Vec<f64>>>(), &mut rng).unwrap();
        let cos: f64 = sv.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        assert!((cos.abs() - 1.0).abs() < 1e-8);
    }
}

#[test]
fn dnc_removes_a_distant_update_across_seeds() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<Vec<f64>> = (0..9).map(|_| (0..2).map(|_| rng.random_range(-0.01..0.01)).collect()).collect();
        rows.push(vec![10.0, 0.0]);
        let params = DncParams { sub_dim: 1000, filter_ratio: 1.0, iterations: 1, f: 1 };
        let out = agg_dnc(&rows, &params, &mut rng).unwrap();
        assert!(!out.selected.contains(&9));
        assert!(out.delta[0].abs() < 0.01);
    }
}

/// Largest γ on a dense grid for which `ok(μ + γ p)` holds.
fn grid_gamma(mu: f64, p: f64, ok: impl Fn(f64) -> bool) -> f64 {
    (0..=400_000).map(|k| k as f64 * 1e-5).take_while(|g| ok(mu + g * p)).last().unwrap()
}

#[test]
fn gamma_searches_match_grid_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let search = GammaSearch::default();
    for _ in 0..30 {
        let pts: Vec<f64> = (0..rng.random_range(2..6)).map(|_| rng.random_range(-1.5..1.5)).collect();
        let rows: Vec<Vec<f64>> = pts.iter().map(|p| vec![*p]).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let mu = pts.iter().sum::<f64>() / pts.len() as f64;
        if mu.abs() < 1e-6 {
            continue;
        }
        let p = -mu.signum();
        let spread = pts.iter().copied().fold(f64::NEG_INFINITY, f64::max) - pts.iter().copied().fold(f64::INFINITY, f64::min);
        let mm = grid_gamma(mu, p, |x| pts.iter().all(|b| (x - b).abs() <= spread));
        assert!((attack_min_max(&refs, &search).unwrap().gamma - mm).abs() < 2e-5);

        let bound = pts.iter().map(|a| pts.iter().map(|b| (a - b).powi(2)).sum::<f64>()).fold(0.0, f64::max);
        let ms = grid_gamma(mu, p, |x| pts.iter().map(|b| (x - b).powi(2)).sum::<f64>() <= bound);
        assert!((attack_min_sum(&refs, &search).unwrap().gamma - ms).abs() < 2e-5);
    }
}

#[test]
fn min_sum_closed_form_on_two_points() {
    // f(γ) = (1 - γ)² + (1 + γ)² <= 4  ⇒  γ <= 1
    let rows = [vec![0.0], vec![2.0]];
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let g = attack_min_sum(&refs, &GammaSearch::default()).unwrap().gamma;
    assert!((g - 1.0).abs() <= 1e-5);
}

#[test]
fn large_beta_keeps_client_proportions_near_global() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = random_centers(2, 2, 2.0, &mut rng);
        let ds = make_blobs(&BlobSpec { classes: 2, per_class: 500, centers, sigma: 1.0, domain: 0 }, &mut rng).unwrap();
        let parts = partition_dirichlet(&ds, &PartitionConfig { clients: 2, beta: 10_000.0 }, &mut rng).unwrap();
        for p in parts {
            let h = p.label_histogram();
            let share = h[0] as f64 / p.len() as f64;
            assert!((share - 0.5).abs() <= 0.05, "seed {seed}: share {share}");
        }
    }
}

fn train_full_batch(ds: &Dataset, epochs: usize, lr: f64, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::init(ModelDims::logistic(ds.dim, ds.classes), &mut rng).unwrap();
    let batch = ds.full_batch();
    let cfg = SgdConfig { lr, momentum: 0.0, weight_decay: 0.0 };
    let mut buf = MomentumBuffer::new();
    for _ in 0..epochs {
        let g = forward_loss_grad(&p, &batch).unwrap().grads;
        sgd_apply(p.as_flat_mut(), g.as_flat(), &cfg, &mut buf).unwrap();
    }
    p
}

#[test]
fn two_separated_blobs_are_learned() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = BlobSpec { classes: 2, per_class: 200, centers: vec![vec![-1.0, 0.0], vec![1.0, 0.0]], sigma: 0.1, domain: 0 };
    let ds = make_blobs(&spec, &mut rng).unwrap();
    let p = train_full_batch(&ds, 50, 0.5, 1);
    assert!(top1_accuracy(&p, &ds).unwrap() >= 0.99);
}

fn two_domain_config() -> DomainSuiteConfig {
    let quarter = AffineTransform { rotation: std::f64::consts::FRAC_PI_2, ..AffineTransform::identity() };
    DomainSuiteConfig {
        classes: 2,
        centers: vec![vec![3.0, 0.0], vec![-3.0, 0.0]],
        sigma: 0.5,
        train_per_class: 200,
        test_per_class: 200,
        clients: 2,
        domains: vec![
            DomainSpec { name: "plain".into(), transform: AffineTransform::identity() },
            DomainSpec { name: "turned".into(), transform: quarter },
        ],
        held_out: None,
    }
}

#[test]
fn rotated_domain_is_a_genuine_shift() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = two_domain_config();
        cfg.classes = 10;
        cfg.centers = random_centers(10, 2, 6.0, &mut rng);
        let plain = domain_blobs(&cfg, 0, 100, &mut rng).unwrap();
        let turned = domain_blobs(&cfg, 1, 100, &mut rng).unwrap();
        let p = train_full_batch(&plain, 300, 0.5, seed);
        let own = top1_accuracy(&p, &plain).unwrap();
        let cross = top1_accuracy(&p, &turned).unwrap();
        assert!(own > 0.8, "seed {seed}: in-domain accuracy {own}");
        assert!(cross < 0.1 + 0.15, "seed {seed}: cross-domain accuracy {cross}");
    }
}

#[test]
fn domains_share_the_global_label_marginal() {
    let cfg = two_domain_config();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for tag in 0..2 {
        let ds = domain_blobs(&cfg, tag, 150, &mut rng).unwrap();
        assert_eq!(ds.label_histogram(), vec![150, 150]);
    }
}
