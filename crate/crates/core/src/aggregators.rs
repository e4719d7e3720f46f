//! Server-side aggregation rules over client deltas: the plain weighted
//! mean, byzantine-tolerant rules, backdoor defenses, the server optimizer
//! and minimax client reweighting.
//!
//! Every rule is a pure function of the round's deltas (plus an explicit rng
//! where sampling is involved). [`Aggregator`] wraps a rule together with the
//! per-run state some rules keep (FoolsGold history, AFL mixture weights).

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::numkit::vecops;

/// Result of one aggregation, kept in the round record for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationOutcome {
    pub delta: Vec<f64>,
    /// Effective per-client weight in the aggregate (sums to 1 unless every
    /// client was rejected).
    pub weights: Vec<f64>,
    /// Clients that contributed to the aggregate.
    pub selected: Vec<usize>,
    /// Rule-specific per-client scores (Krum scores, trust values, ...).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scores: Vec<f64>,
    /// Rule-specific per-iteration trace (RFA objective values).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl AggregationOutcome {
    fn from_weights(updates: &[Vec<f64>], weights: Vec<f64>) -> Self {
        let dim = updates.first().map_or(0, Vec::len);
        let mut delta = vec![0.0; dim];
        for (u, w) in updates.iter().zip(&weights) {
            if *w != 0.0 {
                vecops::axpy(*w, u, &mut delta);
            }
        }
        let selected = weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.0)
            .map(|(i, _)| i)
            .collect();
        Self {
            delta,
            weights,
            selected,
            scores: Vec::new(),
            trace: Vec::new(),
            notes: Vec::new(),
        }
    }

    /// Unweighted mean of the chosen subset.
    fn subset_mean(updates: &[Vec<f64>], chosen: &[usize]) -> Self {
        let mut weights = vec![0.0; updates.len()];
        let share = 1.0 / chosen.len() as f64;
        for &i in chosen {
            weights[i] = share;
        }
        let mut out = Self::from_weights(updates, weights);
        out.selected = {
            let mut s = chosen.to_vec();
            s.sort_unstable();
            s
        };
        out
    }
}

fn check_updates(updates: &[Vec<f64>]) -> Result<usize> {
    let first = updates.first().ok_or(FedError::Empty("client updates"))?;
    let dim = first.len();
    if let Some(u) = updates.iter().find(|u| u.len() != dim) {
        return Err(FedError::Dimension {
            expected: dim,
            actual: u.len(),
            context: "client update",
        });
    }
    Ok(dim)
}

pub fn check_simplex(alpha: &[f64], n: usize) -> Result<()> {
    if alpha.len() != n {
        return Err(FedError::Dimension {
            expected: n,
            actual: alpha.len(),
            context: "aggregation weights",
        });
    }
    let total: f64 = alpha.iter().sum();
    if alpha.iter().any(|a| !(*a >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(FedError::config(format!(
            "aggregation weights must be non-negative and sum to 1 (sum = {total})"
        )));
    }
    Ok(())
}

pub fn agg_weighted_mean(updates: &[Vec<f64>], alpha: &[f64]) -> Result<AggregationOutcome> {
    check_updates(updates)?;
    check_simplex(alpha, updates.len())?;
    Ok(AggregationOutcome::from_weights(updates, alpha.to_vec()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Coordinatewise {
    Median,
    /// Drop this many largest and smallest values per coordinate.
    TrimmedMean(usize),
}

/// Number of values trimmed from each side for a trim fraction.
pub fn trim_count(n: usize, fraction: f64) -> usize {
    (fraction * n as f64).floor() as usize
}

pub fn agg_coordinatewise(
    updates: &[Vec<f64>],
    mode: Coordinatewise,
) -> Result<AggregationOutcome> {
    let dim = check_updates(updates)?;
    let n = updates.len();
    let (lo, hi) = match mode {
        Coordinatewise::Median => ((n - 1) / 2, n / 2),
        Coordinatewise::TrimmedMean(k) => {
            if n < 2 * k + 1 {
                return Err(FedError::config(format!(
                    "trimmed mean dropping {k} per side needs at least {} clients, got {n}",
                    2 * k + 1
                )));
            }
            (k, n - 1 - k)
        }
    };
    let kept = (hi - lo + 1) as f64;
    let mut delta = vec![0.0; dim];
    let mut uses = vec![0usize; n];
    let mut order: Vec<usize> = (0..n).collect();
    for (d, out) in delta.iter_mut().enumerate() {
        order.sort_by(|&a, &b| updates[a][d].total_cmp(&updates[b][d]).then(a.cmp(&b)));
        let mut acc = 0.0;
        for &i in &order[lo..=hi] {
            acc += updates[i][d];
            uses[i] += 1;
        }
        *out = acc / kept;
    }
    let total: usize = uses.iter().sum();
    let weights = uses.iter().map(|&u| u as f64 / total.max(1) as f64).collect::<Vec<_>>();
    let selected = (0..n).filter(|&i| uses[i] > 0).collect();
    Ok(AggregationOutcome {
        delta,
        weights,
        selected,
        scores: Vec::new(),
        trace: Vec::new(),
        notes: Vec::new(),
    })
}

/// Krum score of every member of `pool`: sum of squared distances to its
/// `pool.len() - f - 2` nearest other members (at least one).
fn krum_scores(updates: &[Vec<f64>], pool: &[usize], f: usize) -> Vec<f64> {
    let m = pool.len();
    let neighbours = m.saturating_sub(f + 2).max(1).min(m.saturating_sub(1));
    pool.iter()
        .map(|&i| {
            let mut d: Vec<f64> = pool
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| vecops::dist_sq(&updates[i], &updates[j]))
                .collect();
            d.sort_by(f64::total_cmp);
            d.iter().take(neighbours).sum()
        })
        .collect()
}

/// Pool positions ordered by ascending score, ties by lower client index.
fn rank_by_score(pool: &[usize], scores: &[f64]) -> Vec<usize> {
    let mut pos: Vec<usize> = (0..pool.len()).collect();
    pos.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(pool[a].cmp(&pool[b])));
    pos
}

pub fn agg_multi_krum(updates: &[Vec<f64>], f: usize, k: usize) -> Result<AggregationOutcome> {
    check_updates(updates)?;
    let n = updates.len();
    if n < f + 3 {
        return Err(FedError::config(format!(
            "multi-krum with f = {f} needs at least {} clients, got {n}",
            f + 3
        )));
    }
    if k == 0 || k > n {
        return Err(FedError::config(format!(
            "multi-krum k must be in 1..={n}, got {k}"
        )));
    }
    let pool: Vec<usize> = (0..n).collect();
    let scores = krum_scores(updates, &pool, f);
    let chosen: Vec<usize> = rank_by_score(&pool, &scores)
        .into_iter()
        .take(k)
        .map(|p| pool[p])
        .collect();
    let mut out = AggregationOutcome::subset_mean(updates, &chosen);
    out.scores = scores;
    Ok(out)
}

pub fn agg_bulyan(updates: &[Vec<f64>], f: usize) -> Result<AggregationOutcome> {
    let dim = check_updates(updates)?;
    let n = updates.len();
    if n < 4 * f + 3 {
        return Err(FedError::config(format!(
            "bulyan with f = {f} needs at least {} clients, got {n}",
            4 * f + 3
        )));
    }
    let theta = n - 2 * f;
    let beta = theta - 2 * f;
    let mut pool: Vec<usize> = (0..n).collect();
    let mut chosen = Vec::with_capacity(theta);
    let mut first_scores = Vec::new();
    while chosen.len() < theta {
        let scores = krum_scores(updates, &pool, f);
        if first_scores.is_empty() {
            first_scores = scores.clone();
        }
        let best = rank_by_score(&pool, &scores)[0];
        chosen.push(pool.remove(best));
    }
    let mut delta = vec![0.0; dim];
    let mut uses = vec![0usize; n];
    let mut vals: Vec<(f64, usize)> = Vec::with_capacity(theta);
    for (d, out) in delta.iter_mut().enumerate() {
        vals.clear();
        vals.extend(chosen.iter().map(|&i| (updates[i][d], i)));
        vals.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let median = if theta % 2 == 1 {
            vals[theta / 2].0
        } else {
            0.5 * (vals[theta / 2 - 1].0 + vals[theta / 2].0)
        };
        vals.sort_by(|a, b| {
            (a.0 - median)
                .abs()
                .total_cmp(&(b.0 - median).abs())
                .then(a.1.cmp(&b.1))
        });
        let mut acc = 0.0;
        for &(v, i) in &vals[..beta] {
            acc += v;
            uses[i] += 1;
        }
        *out = acc / beta as f64;
    }
    let total: usize = uses.iter().sum();
    chosen.sort_unstable();
    Ok(AggregationOutcome {
        delta,
        weights: uses.iter().map(|&u| u as f64 / total.max(1) as f64).collect(),
        selected: chosen,
        scores: first_scores,
        trace: Vec::new(),
        notes: Vec::new(),
    })
}

/// FoolsGold weights from per-client accumulated update histories.
pub fn foolsgold_weights(history: &[Vec<f64>], epsilon: f64) -> Vec<f64> {
    let n = history.len();
    if n == 1 {
        return vec![1.0];
    }
    let mut cs = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                cs[i][j] = vecops::cosine(&history[i], &history[j]);
            }
        }
    }
    let maxcs: Vec<f64> = cs
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    // pardoning
    for i in 0..n {
        for j in 0..n {
            if i != j && maxcs[i] < maxcs[j] && maxcs[j] > 0.0 {
                cs[i][j] *= maxcs[i] / maxcs[j];
            }
        }
    }
    let mut wv: Vec<f64> = cs
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let m = row
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            (1.0 - m).clamp(0.0, 1.0)
        })
        .collect();
    let top = wv.iter().copied().fold(0.0, f64::max).max(epsilon);
    for w in wv.iter_mut() {
        *w /= top;
        if *w >= 1.0 {
            *w = 0.99;
        }
        // logit sharpening
        let sharpened = if *w <= 0.0 {
            0.0
        } else {
            (*w / (1.0 - *w)).ln() + 0.5
        };
        *w = sharpened.clamp(0.0, 1.0);
    }
    wv
}

pub fn agg_foolsgold(
    updates: &[Vec<f64>],
    history: &[Vec<f64>],
    epsilon: f64,
) -> Result<AggregationOutcome> {
    check_updates(updates)?;
    if history.len() != updates.len() {
        return Err(FedError::Dimension {
            expected: updates.len(),
            actual: history.len(),
            context: "foolsgold history",
        });
    }
    let raw = foolsgold_weights(history, epsilon);
    let total: f64 = raw.iter().sum();
    let mut notes = Vec::new();
    let weights = if total > 0.0 {
        raw.iter().map(|w| w / total).collect()
    } else {
        notes.push("foolsgold rejected every client; falling back to uniform mean".into());
        vec![1.0 / updates.len() as f64; updates.len()]
    };
    let mut out = AggregationOutcome::from_weights(updates, weights);
    out.scores = raw;
    out.notes = notes;
    Ok(out)
}

/// Top right singular vector of `rows` via power iteration on the smaller
/// Gram matrix. Returns `None` when the matrix is zero.
pub fn top_singular_vector<R: Rng + ?Sized>(rows: &[Vec<f64>], rng: &mut R) -> Option<Vec<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().all(|r| r.iter().all(|v| *v == 0.0)) {
        return None;
    }
    let matvec_rows = |u: &[f64]| -> Vec<f64> {
        // X^T u
        let mut out = vec![0.0; d];
        for (r, ui) in rows.iter().zip(u) {
            vecops::axpy(*ui, r, &mut out);
        }
        out
    };
    let matvec_cols = |v: &[f64]| -> Vec<f64> { rows.iter().map(|r| vecops::dot(r, v)).collect() };

    let (use_gram, size) = if n <= d { (true, n) } else { (false, d) };
    let mut x: Vec<f64> = (0..size).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut nx = vecops::norm(&x);
    vecops::scale(1.0 / nx, &mut x);
    for _ in 0..20_000 {
        let mut y = if use_gram {
            matvec_cols(&matvec_rows(&x))
        } else {
            matvec_rows(&matvec_cols(&x))
        };
        nx = vecops::norm(&y);
        if nx == 0.0 {
            return None;
        }
        vecops::scale(1.0 / nx, &mut y);
        let change = vecops::dist(&x, &y);
        x = y;
        if change < 1e-14 {
            break;
        }
    }
    let mut v = if use_gram { matvec_rows(&x) } else { x };
    let nv = vecops::norm(&v);
    if nv == 0.0 {
        return None;
    }
    vecops::scale(1.0 / nv, &mut v);
    Some(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DncParams {
    pub sub_dim: usize,
    pub filter_ratio: f64,
    pub iterations: usize,
    pub f: usize,
}

/// Spectral outlier scores: squared projection of each mean-centred row on
/// the top right singular vector.
pub fn dnc_scores<R: Rng + ?Sized>(rows: &[Vec<f64>], rng: &mut R) -> Vec<f64> {
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let mu = vecops::mean(&refs);
    let centred: Vec<Vec<f64>> = rows.iter().map(|r| vecops::sub(r, &mu)).collect();
    match top_singular_vector(&centred, rng) {
        Some(v) => centred
            .iter()
            .map(|c| {
                let p = vecops::dot(c, &v);
                p * p
            })
            .collect(),
        None => vec![0.0; rows.len()],
    }
}

pub fn agg_dnc<R: Rng + ?Sized>(
    updates: &[Vec<f64>],
    params: &DncParams,
    rng: &mut R,
) -> Result<AggregationOutcome> {
    let dim = check_updates(updates)?;
    let n = updates.len();
    if n < 2 {
        return Err(FedError::config("divide-and-conquer needs at least two clients"));
    }
    if params.iterations == 0 {
        return Err(FedError::config("divide-and-conquer needs iterations >= 1"));
    }
    let remove = (params.filter_ratio * params.f as f64).ceil() as usize;
    let mut survivors = vec![true; n];
    let mut last_scores = vec![0.0; n];
    for _ in 0..params.iterations {
        let coords: Vec<usize> = if params.sub_dim >= dim {
            (0..dim).collect()
        } else {
            let mut c = index::sample(rng, dim, params.sub_dim).into_vec();
            c.sort_unstable();
            c
        };
        let sub: Vec<Vec<f64>> = updates
            .iter()
            .map(|u| coords.iter().map(|&c| u[c]).collect())
            .collect();
        let scores = dnc_scores(&sub, rng);
        if scores.iter().any(|s| *s > 0.0) {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            for &i in order.iter().take(remove) {
                survivors[i] = false;
            }
        }
        last_scores = scores;
    }
    let kept: Vec<usize> = (0..n).filter(|&i| survivors[i]).collect();
    let mut out = if kept.is_empty() {
        let mut o = AggregationOutcome::subset_mean(updates, &(0..n).collect::<Vec<_>>());
        o.notes
            .push("divide-and-conquer removed every client; using plain mean".into());
        log::warn!("divide-and-conquer removed every client; using plain mean");
        o
    } else {
        AggregationOutcome::subset_mean(updates, &kept)
    };
    out.scores = last_scores;
    Ok(out)
}

/// `Σ α_i ‖z - x_i‖`
pub fn geometric_objective(z: &[f64], points: &[Vec<f64>], alpha: &[f64]) -> f64 {
    points
        .iter()
        .zip(alpha)
        .map(|(p, a)| a * vecops::dist(z, p))
        .sum()
}

/// Smoothed Weiszfeld iterations for the weighted geometric median,
/// started at the weighted mean. `trace` holds the objective after each
/// iteration (index 0 is the starting point).
pub fn agg_rfa(
    updates: &[Vec<f64>],
    alpha: &[f64],
    iterations: usize,
    smoothing: f64,
) -> Result<AggregationOutcome> {
    let dim = check_updates(updates)?;
    check_simplex(alpha, updates.len())?;
    if iterations == 0 || !(smoothing > 0.0) {
        return Err(FedError::config("rfa needs iterations >= 1 and smoothing > 0"));
    }
    let mut z = vec![0.0; dim];
    for (u, a) in updates.iter().zip(alpha) {
        vecops::axpy(*a, u, &mut z);
    }
    let mut trace = vec![geometric_objective(&z, updates, alpha)];
    let mut beta = alpha.to_vec();
    for _ in 0..iterations {
        for ((b, u), a) in beta.iter_mut().zip(updates).zip(alpha) {
            *b = a / smoothing.max(vecops::dist(&z, u));
        }
        let total: f64 = beta.iter().sum();
        let mut next = vec![0.0; dim];
        for (u, b) in updates.iter().zip(&beta) {
            vecops::axpy(b / total, u, &mut next);
        }
        z = next;
        trace.push(geometric_objective(&z, updates, alpha));
    }
    let total: f64 = beta.iter().sum();
    let weights: Vec<f64> = beta.iter().map(|b| b / total).collect();
    let selected = (0..updates.len()).filter(|&i| weights[i] > 0.0).collect();
    Ok(AggregationOutcome {
        delta: z,
        weights,
        selected,
        scores: Vec::new(),
        trace,
        notes: Vec::new(),
    })
}

/// Trust-bootstrapped aggregation around a server reference update.
pub fn agg_fltrust(updates: &[Vec<f64>], server_update: &[f64]) -> Result<AggregationOutcome> {
    let dim = check_updates(updates)?;
    if server_update.len() != dim {
        return Err(FedError::Dimension {
            expected: dim,
            actual: server_update.len(),
            context: "server reference update",
        });
    }
    let ref_norm = vecops::norm(server_update);
    let trust: Vec<f64> = updates
        .iter()
        .map(|u| vecops::cosine(u, server_update).max(0.0))
        .collect();
    let total: f64 = trust.iter().sum();
    if total == 0.0 {
        return Ok(AggregationOutcome {
            delta: server_update.to_vec(),
            weights: vec![0.0; updates.len()],
            selected: Vec::new(),
            scores: trust,
            trace: Vec::new(),
            notes: vec!["every client distrusted; using the server update".into()],
        });
    }
    let mut delta = vec![0.0; dim];
    for (u, t) in updates.iter().zip(&trust) {
        if *t > 0.0 {
            let n = vecops::norm(u);
            vecops::axpy(t * ref_norm / n / total, u, &mut delta);
        }
    }
    let weights: Vec<f64> = trust.iter().map(|t| t / total).collect();
    let selected = (0..updates.len()).filter(|&i| trust[i] > 0.0).collect();
    Ok(AggregationOutcome {
        delta,
        weights,
        selected,
        scores: trust,
        trace: Vec::new(),
        notes: Vec::new(),
    })
}

/// Robust learning rate: coordinates without a sign majority of at least
/// `threshold` get their learning rate negated.
pub fn defense_rlr(
    updates: &[Vec<f64>],
    threshold: f64,
    server_lr: f64,
) -> Result<AggregationOutcome> {
    let dim = check_updates(updates)?;
    if !(threshold >= 0.0) {
        return Err(FedError::config("rlr threshold must be >= 0"));
    }
    let n = updates.len();
    let mut delta = vec![0.0; dim];
    let mut flipped = 0usize;
    for (d, out) in delta.iter_mut().enumerate() {
        let s: f64 = updates
            .iter()
            .map(|u| {
                if u[d] > 0.0 {
                    1.0
                } else if u[d] < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
            .sum();
        let mean = updates.iter().map(|u| u[d]).sum::<f64>() / n as f64;
        let lr = if s.abs() >= threshold {
            server_lr
        } else {
            flipped += 1;
            -server_lr
        };
        *out = lr * mean;
    }
    let mut out = AggregationOutcome::subset_mean(updates, &(0..n).collect::<Vec<_>>());
    out.delta = delta;
    out.notes
        .push(format!("{flipped} of {dim} coordinates had their learning rate flipped"));
    Ok(out)
}

/// Norm clipping to `norm_bound` followed by optional Gaussian smoothing.
pub fn defense_crfl<R: Rng + ?Sized>(
    params: &mut [f64],
    norm_bound: f64,
    noise: f64,
    add_noise: bool,
    rng: &mut R,
) -> Result<()> {
    if !(norm_bound > 0.0) || !(noise >= 0.0) {
        return Err(FedError::config("crfl needs norm bound > 0 and noise >= 0"));
    }
    let n = vecops::norm(params);
    if n > norm_bound {
        vecops::scale(norm_bound / n, params);
    }
    if add_noise && noise > 0.0 {
        let normal = Normal::new(0.0, noise).expect("noise validated");
        for p in params.iter_mut() {
            *p += normal.sample(rng);
        }
    }
    Ok(())
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// One projected ascent step on the client mixture weights.
pub fn afl_reweight(lambda: &[f64], losses: &[f64], gamma: f64) -> Result<Vec<f64>> {
    check_simplex(lambda, losses.len())?;
    let raised: Vec<f64> = lambda
        .iter()
        .zip(losses)
        .map(|(l, loss)| l + gamma * loss)
        .collect();
    Ok(project_simplex(&raised))
}

/// Server-side heavy-ball step `w <- w + lr * v`, `v <- m v + Δ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerOptimizer {
    pub lr: f64,
    pub momentum: f64,
    velocity: Option<Vec<f64>>,
}

impl ServerOptimizer {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0) || !(0.0..1.0).contains(&momentum) {
            return Err(FedError::config(
                "server optimizer needs lr > 0 and momentum in [0, 1)",
            ));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: None,
        })
    }

    /// Returns the displacement actually applied.
    pub fn step(&mut self, params: &mut [f64], delta: &[f64]) -> Result<Vec<f64>> {
        if params.len() != delta.len() {
            return Err(FedError::Dimension {
                expected: params.len(),
                actual: delta.len(),
                context: "server step",
            });
        }
        let v = match (&mut self.velocity, self.momentum) {
            (_, m) if m == 0.0 => delta.to_vec(),
            (Some(v), m) => {
                for (vi, di) in v.iter_mut().zip(delta) {
                    *vi = m * *vi + di;
                }
                v.clone()
            }
            (slot @ None, _) => {
                *slot = Some(delta.to_vec());
                delta.to_vec()
            }
        };
        let applied: Vec<f64> = v.iter().map(|x| self.lr * x).collect();
        vecops::axpy(1.0, &applied, params);
        Ok(applied)
    }
}

pub fn server_opt_step(
    params: &[f64],
    delta: &[f64],
    optimizer: &mut ServerOptimizer,
) -> Result<Vec<f64>> {
    let mut out = params.to_vec();
    optimizer.step(&mut out, delta)?;
    Ok(out)
}

fn default_trim() -> f64 {
    0.2
}
fn default_top_k() -> usize {
    5
}
fn default_fg_eps() -> f64 {
    1e-5
}
fn default_sub_dim() -> usize {
    1000
}
fn default_filter_ratio() -> f64 {
    1.0
}
fn default_one() -> usize {
    1
}
fn default_rfa_iters() -> usize {
    3
}
fn default_rfa_nu() -> f64 {
    1e-6
}
fn default_root_per_class() -> usize {
    10
}
fn default_public_epochs() -> usize {
    20
}
fn default_rlr_tau() -> f64 {
    4.0
}
fn default_lr_one() -> f64 {
    1.0
}
fn default_crfl_rho() -> f64 {
    15.0
}
fn default_crfl_sigma() -> f64 {
    0.01
}
fn default_afl_gamma() -> f64 {
    0.01
}

/// Declarative choice of server rule. `f: None` is resolved by the harness to
/// the configured attacker count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AggregatorConfig {
    WeightedMean,
    Median,
    TrimmedMean {
        #[serde(default = "default_trim")]
        trim: f64,
    },
    MultiKrum {
        #[serde(default)]
        f: Option<usize>,
        #[serde(default = "default_top_k")]
        k: usize,
    },
    Bulyan {
        #[serde(default)]
        f: Option<usize>,
    },
    Foolsgold {
        #[serde(default = "default_fg_eps")]
        epsilon: f64,
    },
    Dnc {
        #[serde(default = "default_sub_dim")]
        sub_dim: usize,
        #[serde(default = "default_filter_ratio")]
        filter_ratio: f64,
        #[serde(default = "default_one")]
        iterations: usize,
        #[serde(default)]
        f: Option<usize>,
    },
    Rfa {
        #[serde(default = "default_rfa_iters")]
        iterations: usize,
        #[serde(default = "default_rfa_nu")]
        smoothing: f64,
    },
    Fltrust {
        #[serde(default = "default_root_per_class")]
        root_per_class: usize,
        #[serde(default = "default_public_epochs")]
        public_epochs: usize,
    },
    Rlr {
        #[serde(default = "default_rlr_tau")]
        threshold: f64,
        #[serde(default = "default_lr_one")]
        server_lr: f64,
    },
    Crfl {
        #[serde(default = "default_crfl_rho")]
        norm_bound: f64,
        #[serde(default = "default_crfl_sigma")]
        noise: f64,
    },
    Afl {
        #[serde(default = "default_afl_gamma")]
        gamma: f64,
    },
}

impl AggregatorConfig {
    pub fn name(&self) -> &'static str {
        match self {
            AggregatorConfig::WeightedMean => "weighted_mean",
            AggregatorConfig::Median => "median",
            AggregatorConfig::TrimmedMean { .. } => "trimmed_mean",
            AggregatorConfig::MultiKrum { .. } => "multi_krum",
            AggregatorConfig::Bulyan { .. } => "bulyan",
            AggregatorConfig::Foolsgold { .. } => "foolsgold",
            AggregatorConfig::Dnc { .. } => "dnc",
            AggregatorConfig::Rfa { .. } => "rfa",
            AggregatorConfig::Fltrust { .. } => "fltrust",
            AggregatorConfig::Rlr { .. } => "rlr",
            AggregatorConfig::Crfl { .. } => "crfl",
            AggregatorConfig::Afl { .. } => "afl",
        }
    }

    /// Rules whose guarantees require an honest majority.
    pub fn needs_honest_majority(&self) -> bool {
        matches!(
            self,
            AggregatorConfig::Median
                | AggregatorConfig::TrimmedMean { .. }
                | AggregatorConfig::MultiKrum { .. }
                | AggregatorConfig::Bulyan { .. }
        )
    }

    /// Fills unset `f` with `attackers`.
    pub fn resolve(&mut self, attackers: usize) {
        match self {
            AggregatorConfig::MultiKrum { f, .. }
            | AggregatorConfig::Bulyan { f }
            | AggregatorConfig::Dnc { f, .. } => {
                f.get_or_insert(attackers);
            }
            _ => {}
        }
    }

    /// Range checks against the number of participating clients.
    pub fn validate(&self, clients: usize) -> Result<()> {
        let n = clients;
        match *self {
            AggregatorConfig::TrimmedMean { trim } => {
                if !(0.0..0.5).contains(&trim) {
                    return Err(FedError::config(format!(
                        "trim fraction must be in [0, 0.5), got {trim}"
                    )));
                }
            }
            AggregatorConfig::MultiKrum { f, k } => {
                let f = f.unwrap_or(0);
                if n < f + 3 {
                    return Err(FedError::config(format!(
                        "multi-krum with f = {f} needs >= {} clients, have {n}",
                        f + 3
                    )));
                }
                if k == 0 || k > n {
                    return Err(FedError::config(format!("multi-krum k must be in 1..={n}")));
                }
            }
            AggregatorConfig::Bulyan { f } => {
                let f = f.unwrap_or(0);
                if n < 4 * f + 3 {
                    return Err(FedError::config(format!(
                        "bulyan with f = {f} needs >= {} clients, have {n}",
                        4 * f + 3
                    )));
                }
            }
            AggregatorConfig::Foolsgold { epsilon } if !(epsilon > 0.0) => {
                return Err(FedError::config("foolsgold epsilon must be > 0"));
            }
            AggregatorConfig::Dnc {
                sub_dim,
                filter_ratio,
                iterations,
                ..
            } => {
                if sub_dim == 0 || iterations == 0 || !(filter_ratio >= 0.0) {
                    return Err(FedError::config(
                        "dnc needs sub_dim >= 1, iterations >= 1 and filter_ratio >= 0",
                    ));
                }
            }
            AggregatorConfig::Rfa {
                iterations,
                smoothing,
            } => {
                if iterations == 0 || !(smoothing > 0.0) {
                    return Err(FedError::config("rfa needs iterations >= 1 and smoothing > 0"));
                }
            }
            AggregatorConfig::Fltrust { root_per_class, .. } if root_per_class == 0 => {
                return Err(FedError::config("fltrust root dataset must be non-empty"));
            }
            AggregatorConfig::Rlr {
                threshold,
                server_lr,
            } => {
                if !(threshold >= 0.0) || !(server_lr > 0.0) {
                    return Err(FedError::config("rlr needs threshold >= 0 and server_lr > 0"));
                }
            }
            AggregatorConfig::Crfl { norm_bound, noise } => {
                if !(norm_bound > 0.0) || !(noise >= 0.0) {
                    return Err(FedError::config("crfl needs norm_bound > 0 and noise >= 0"));
                }
            }
            AggregatorConfig::Afl { gamma } if !(gamma >= 0.0) => {
                return Err(FedError::config("afl gamma must be >= 0"));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Inputs a rule may consult besides the deltas themselves.
#[derive(Debug, Clone, Copy)]
pub struct RoundInputs<'a> {
    pub updates: &'a [Vec<f64>],
    /// Pre-allocated aggregation weights.
    pub alpha: &'a [f64],
    /// Declared client training losses.
    pub losses: &'a [f64],
    /// Server reference update (FLTrust only).
    pub server_update: Option<&'a [f64]>,
}

/// A configured rule plus the state it carries across rounds.
#[derive(Debug, Clone)]
pub struct Aggregator {
    config: AggregatorConfig,
    history: Vec<Vec<f64>>,
    lambda: Option<Vec<f64>>,
}

impl Aggregator {
    pub fn new(config: AggregatorConfig) -> Self {
        Self {
            config,
            history: Vec::new(),
            lambda: None,
        }
    }

    pub fn config(&self) -> &AggregatorConfig {
        &self.config
    }

    /// Current AFL mixture weights, once the first round has run.
    pub fn mixture(&self) -> Option<&[f64]> {
        self.lambda.as_deref()
    }

    pub fn aggregate<R: Rng + ?Sized>(
        &mut self,
        inputs: RoundInputs<'_>,
        rng: &mut R,
    ) -> Result<AggregationOutcome> {
        let updates = inputs.updates;
        let n = updates.len();
        match self.config {
            AggregatorConfig::WeightedMean | AggregatorConfig::Crfl { .. } => {
                agg_weighted_mean(updates, inputs.alpha)
            }
            AggregatorConfig::Median => agg_coordinatewise(updates, Coordinatewise::Median),
            AggregatorConfig::TrimmedMean { trim } => {
                agg_coordinatewise(updates, Coordinatewise::TrimmedMean(trim_count(n, trim)))
            }
            AggregatorConfig::MultiKrum { f, k } => agg_multi_krum(updates, f.unwrap_or(0), k),
            AggregatorConfig::Bulyan { f } => agg_bulyan(updates, f.unwrap_or(0)),
            AggregatorConfig::Foolsgold { epsilon } => {
                if self.history.len() != n {
                    self.history = vec![vec![0.0; updates[0].len()]; n];
                }
                for (h, u) in self.history.iter_mut().zip(updates) {
                    vecops::axpy(1.0, u, h);
                }
                agg_foolsgold(updates, &self.history, epsilon)
            }
            AggregatorConfig::Dnc {
                sub_dim,
                filter_ratio,
                iterations,
                f,
            } => agg_dnc(
                updates,
                &DncParams {
                    sub_dim,
                    filter_ratio,
                    iterations,
                    f: f.unwrap_or(0),
                },
                rng,
            ),
            AggregatorConfig::Rfa {
                iterations,
                smoothing,
            } => agg_rfa(updates, inputs.alpha, iterations, smoothing),
            AggregatorConfig::Fltrust { .. } => {
                let reference = inputs.server_update.ok_or_else(|| {
                    FedError::config("fltrust needs a server reference update")
                })?;
                agg_fltrust(updates, reference)
            }
            AggregatorConfig::Rlr {
                threshold,
                server_lr,
            } => defense_rlr(updates, threshold, server_lr),
            AggregatorConfig::Afl { gamma } => {
                let lambda = self
                    .lambda
                    .take()
                    .unwrap_or_else(|| inputs.alpha.to_vec());
                let next = afl_reweight(&lambda, inputs.losses, gamma)?;
                let mut out = agg_weighted_mean(updates, &next)?;
                out.scores = next.clone();
                self.lambda = Some(next);
                Ok(out)
            }
        }
    }
}
