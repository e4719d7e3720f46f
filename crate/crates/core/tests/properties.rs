use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fedsim_core::adversary::{attack_lie, attack_min_max, attack_min_sum, attack_random_noise, GammaSearch, Perturbation};
use fedsim_core::aggregators::{
    agg_bulyan, agg_coordinatewise, agg_dnc, agg_multi_krum, agg_rfa, agg_weighted_mean, Coordinatewise, DncParams,
};
use fedsim_core::datagen::{
    flip_matrix, inject_trigger, make_blobs, partition_dirichlet, partition_iid, random_centers, triggered_set,
    BackdoorConfig, BlobSpec, Dataset, FlipMode, PartitionConfig,
};
use fedsim_core::metrics::{attack_success_rate, contribution_match_degree, population_std, top1_accuracy};
use fedsim_core::numkit::{loss, Batch, Matrix, ModelDims, ModelParams};

fn rows_strategy(max_n: usize, max_d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max_d).prop_flat_map(move |d| prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), 2..=max_n))
}

fn blobs(seed: u64, classes: usize, per_class: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = random_centers(classes, 3, 2.0, &mut rng);
    make_blobs(&BlobSpec { classes, per_class, centers, sigma: 1.0, domain: 0 }, &mut rng).unwrap()
}

fn sample_keys(ds: &Dataset) -> Vec<(usize, Vec<u64>)> {
    let mut k: Vec<_> = ds
        .samples
        .iter()
        .map(|s| (s.label, s.features.iter().map(|x| x.to_bits()).collect()))
        .collect();
    k.sort();
    k
}

fn within_hull(out: &[f64], rows: &[Vec<f64>]) -> bool {
    (0..out.len()).all(|c| {
        let lo = rows.iter().map(|r| r[c]).fold(f64::INFINITY, f64::min);
        let hi = rows.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max);
        out[c] >= lo - 1e-12 && out[c] <= hi + 1e-12
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cross_entropy_is_non_negative(seed in any::<u64>(), hidden in 0usize..4, n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = if hidden == 0 { ModelDims::logistic(3, 4) } else { ModelDims::mlp(3, hidden, 4) };
        let p = ModelParams::init(dims, &mut rng).unwrap();
        let ds = blobs(seed, 4, n);
        let b: Batch = ds.full_batch();
        prop_assert!(loss(&p, &b).unwrap() >= 0.0);
    }

    #[test]
    fn partitions_are_complete_and_disjoint(seed in any::<u64>(), clients in 1usize..8, beta in 0.05f64..50.0) {
        let ds = blobs(seed, 4, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for parts in [
            partition_dirichlet(&ds, &PartitionConfig { clients, beta }, &mut rng).unwrap(),
            partition_iid(&ds, clients, &mut rng).unwrap(),
        ] {
            prop_assert_eq!(parts.len(), clients);
            prop_assert!(parts.iter().all(|p| !p.is_empty()));
            let merged = Dataset::new(ds.dim, ds.classes, parts.iter().flat_map(|p| p.samples.clone()).collect()).unwrap();
            prop_assert_eq!(sample_keys(&merged), sample_keys(&ds));
        }
    }

    #[test]
    fn flip_matrices_are_row_stochastic(classes in 2usize..12, eps in 0.0f64..1.0) {
        for mode in [FlipMode::Symmetric, FlipMode::Pair] {
            for row in flip_matrix(mode, classes, eps) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|p| *p >= 0.0));
            }
        }
    }

    #[test]
    fn trigger_leaves_unmasked_coordinates_bitwise(x in prop::collection::vec(-10.0f64..10.0, 6), coords in prop::collection::btree_set(0usize..6, 1..4), value in -5.0f64..5.0) {
        let coords: Vec<usize> = coords.into_iter().collect();
        let cfg = BackdoorConfig::on_coords(6, &coords, value, 0, 1.0, 0.5).unwrap();
        let t = inject_trigger(&x, &cfg);
        for c in 0..6 {
            if coords.contains(&c) {
                prop_assert_eq!(t[c], value);
            } else {
                prop_assert_eq!(t[c].to_bits(), x[c].to_bits());
            }
        }
    }

    #[test]
    fn attack_outputs_are_finite_and_sized(rows in rows_strategy(8, 5), z in -3.0f64..3.0, seed in any::<u64>()) {
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let d = rows[0].len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = attack_random_noise(d, 1.0, &mut rng);
        let lie = attack_lie(&refs, z).unwrap();
        for p in [Perturbation::NegUnitMean, Perturbation::NegSign, Perturbation::UnitStd] {
            let s = GammaSearch { perturbation: p, ..GammaSearch::default() };
            for out in [attack_min_max(&refs, &s).unwrap().delta, attack_min_sum(&refs, &s).unwrap().delta] {
                prop_assert_eq!(out.len(), d);
                prop_assert!(out.iter().all(|v| v.is_finite()));
            }
        }
        prop_assert_eq!(noise.len(), d);
        prop_assert!(lie.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn lie_moves_each_coordinate_by_z_sigma(rows in rows_strategy(8, 5), z in -3.0f64..3.0) {
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let n = rows.len() as f64;
        let out = attack_lie(&refs, z).unwrap();
        for (c, o) in out.iter().enumerate() {
            let mu = rows.iter().map(|r| r[c]).sum::<f64>() / n;
            let sd = (rows.iter().map(|r| (r[c] - mu).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!((o - mu - z * sd).abs() < 1e-9);
        }
    }

    #[test]
    fn gamma_searches_stay_feasible(rows in rows_strategy(8, 4)) {
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        let max_pair = rows.iter().flat_map(|a| rows.iter().map(move |b| d2(a, b).sqrt())).fold(0.0, f64::max);
        let mm = attack_min_max(&refs, &GammaSearch::default()).unwrap();
        prop_assert!(rows.iter().all(|r| d2(&mm.delta, r).sqrt() <= max_pair));
        let worst = rows.iter().map(|a| rows.iter().map(|b| d2(a, b)).sum::<f64>()).fold(0.0, f64::max);
        let ms = attack_min_sum(&refs, &GammaSearch::default()).unwrap();
        prop_assert!(rows.iter().map(|r| d2(&ms.delta, r)).sum::<f64>() <= worst);
    }

    #[test]
    fn coordinatewise_rules_ignore_client_order(rows in rows_strategy(8, 4), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = rows.len();
        let uniform = vec![1.0 / n as f64; n];
        let pairs = [
            (agg_coordinatewise(&rows, Coordinatewise::Median).unwrap().delta, agg_coordinatewise(&shuffled, Coordinatewise::Median).unwrap().delta),
            (agg_coordinatewise(&rows, Coordinatewise::TrimmedMean((n - 1) / 2)).unwrap().delta, agg_coordinatewise(&shuffled, Coordinatewise::TrimmedMean((n - 1) / 2)).unwrap().delta),
            (agg_weighted_mean(&rows, &uniform).unwrap().delta, agg_weighted_mean(&shuffled, &uniform).unwrap().delta),
            (agg_rfa(&rows, &uniform, 3, 1e-6).unwrap().delta, agg_rfa(&shuffled, &uniform, 3, 1e-6).unwrap().delta),
        ];
        for (a, b) in pairs {
            prop_assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-9));
        }
    }

    #[test]
    fn krum_ignores_order_without_ties(rows in rows_strategy(8, 3), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        prop_assume!(rows.len() >= 3);
        let mut perm: Vec<usize> = (0..rows.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let a = agg_multi_krum(&rows, 0, 2).unwrap();
        let b = agg_multi_krum(&shuffled, 0, 2).unwrap();
        let mut sorted = a.scores.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assume!(sorted.windows(2).all(|w| w[1] - w[0] > 1e-9));
        for (pos, &i) in perm.iter().enumerate() {
            prop_assert!((a.scores[i] - b.scores[pos]).abs() < 1e-9);
        }
        prop_assert!(a.delta.iter().zip(&b.delta).all(|(x, y)| (x - y).abs() < 1e-9));
    }

    #[test]
    fn selection_rules_stay_in_the_coordinate_hull(rows in rows_strategy(11, 4), seed in any::<u64>()) {
        let n = rows.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if n >= 3 {
            prop_assert!(within_hull(&agg_multi_krum(&rows, (n - 3).min(2), 1.max(n / 2)).unwrap().delta, &rows));
        }
        if n >= 7 {
            prop_assert!(within_hull(&agg_bulyan(&rows, (n - 3) / 4).unwrap().delta, &rows));
        }
        let params = DncParams { sub_dim: 2, filter_ratio: 1.0, iterations: 2, f: n / 4 };
        prop_assert!(within_hull(&agg_dnc(&rows, &params, &mut rng).unwrap().delta, &rows));
    }

    #[test]
    fn rfa_objective_never_increases(rows in rows_strategy(8, 3)) {
        let n = rows.len();
        let out = agg_rfa(&rows, &vec![1.0 / n as f64; n], 20, 1e-6).unwrap();
        prop_assert!(out.trace.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    }

    #[test]
    fn deviation_is_order_free_and_zero_only_when_equal(mut acc in prop::collection::vec(0.0f64..1.0, 1..8)) {
        let v = population_std(&acc);
        acc.reverse();
        prop_assert!((population_std(&acc) - v).abs() < 1e-12);
        let all_equal = acc.iter().all(|a| *a == acc[0]);
        prop_assert_eq!(v == 0.0, all_equal);
    }

    #[test]
    fn match_degree_is_scale_free(drops in prop::collection::vec(0.01f64..1.0, 2..8), c in 0.1f64..10.0, k in 0.1f64..10.0) {
        let n = drops.len();
        let alpha: Vec<f64> = (0..n).map(|i| (i + 1) as f64).collect();
        let total: f64 = alpha.iter().sum();
        let alpha: Vec<f64> = alpha.iter().map(|a| a / total).collect();
        let base = contribution_match_degree(&drops, &alpha).unwrap().unwrap();
        let scaled_drops: Vec<f64> = drops.iter().map(|d| c * d).collect();
        let scaled_alpha: Vec<f64> = alpha.iter().map(|a| k * a).collect();
        let scaled = contribution_match_degree(&scaled_drops, &scaled_alpha).unwrap().unwrap();
        prop_assert!((base - scaled).abs() < 1e-9);
    }

    #[test]
    fn counting_metrics_survive_replication(seed in any::<u64>(), k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = blobs(seed, 3, 7);
        let p = ModelParams::init(ModelDims::logistic(3, 3), &mut rng).unwrap();
        prop_assert_eq!(top1_accuracy(&p, &ds).unwrap(), top1_accuracy(&p, &ds.replicate(k)).unwrap());
        let cfg = BackdoorConfig::on_coords(3, &[0], 4.0, 1, 1.0, 0.5).unwrap();
        let t = triggered_set(&ds, &cfg);
        prop_assert_eq!(attack_success_rate(&p, &t, 1).unwrap(), attack_success_rate(&p, &t.replicate(k), 1).unwrap());
    }
}

#[test]
fn logits_reject_wrong_width() {
    let p = ModelParams::zeros(ModelDims::logistic(3, 2)).unwrap();
    let m = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
    assert!(p.logits(&m).is_err());
}
