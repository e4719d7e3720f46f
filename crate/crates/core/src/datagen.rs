//! Synthetic data, non-IID partitioning, label-flip corruption and backdoor
//! triggers.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::numkit::{Batch, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoisonFlag {
    Clean,
    Flipped,
    Triggered,
}

impl PoisonFlag {
    fn as_str(self) -> &'static str {
        match self {
            PoisonFlag::Clean => "clean",
            PoisonFlag::Flipped => "flipped",
            PoisonFlag::Triggered => "triggered",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(PoisonFlag::Clean),
            "flipped" => Ok(PoisonFlag::Flipped),
            "triggered" => Ok(PoisonFlag::Triggered),
            other => Err(FedError::config(format!("unknown poison flag `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
    pub domain: u32,
    pub flag: PoisonFlag,
}

/// Labelled samples sharing one feature width and class range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub dim: usize,
    pub classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn empty(dim: usize, classes: usize) -> Self {
        Self {
            dim,
            classes,
            samples: Vec::new(),
        }
    }

    pub fn new(dim: usize, classes: usize, samples: Vec<Sample>) -> Result<Self> {
        for s in &samples {
            if s.features.len() != dim {
                return Err(FedError::Dimension {
                    expected: dim,
                    actual: s.features.len(),
                    context: "sample feature width",
                });
            }
            if s.label >= classes {
                return Err(FedError::config(format!(
                    "label {} outside 0..{classes}",
                    s.label
                )));
            }
        }
        Ok(Self {
            dim,
            classes,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for s in &self.samples {
            h[s.label] += 1;
        }
        h
    }

    /// Shannon entropy (nats) of the empirical label distribution.
    pub fn label_entropy(&self) -> f64 {
        let n = self.len() as f64;
        self.label_histogram()
            .into_iter()
            .filter(|&c| c > 0)
            .map(|c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.samples[i].features);
            labels.push(self.samples[i].label);
        }
        Batch {
            inputs: Matrix {
                rows: indices.len(),
                cols: self.dim,
                data,
            },
            labels,
        }
    }

    pub fn full_batch(&self) -> Batch {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    /// Repeats every sample `k` times.
    pub fn replicate(&self, k: usize) -> Self {
        let samples = (0..k).flat_map(|_| self.samples.iter().cloned()).collect();
        Self {
            dim: self.dim,
            classes: self.classes,
            samples,
        }
    }

    /// Writes one row per sample: `f0..f{d-1},label,domain,flag`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.dim).map(|i| format!("f{i}")).collect();
        header.extend(["label", "domain", "flag"].map(String::from));
        w.write_record(&header)?;
        for s in &self.samples {
            let mut row: Vec<String> = s.features.iter().map(|v| v.to_string()).collect();
            row.push(s.label.to_string());
            row.push(s.domain.to_string());
            row.push(s.flag.as_str().to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| FedError::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, classes: usize) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let width = r.headers()?.len();
        if width < 4 {
            return Err(FedError::config("dataset csv needs at least one feature column"));
        }
        let dim = width - 3;
        let mut samples = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec[i]
                    .parse::<f64>()
                    .map_err(|e| FedError::config(format!("csv column {i}: {e}")))
            };
            let features = (0..dim).map(num).collect::<Result<Vec<_>>>()?;
            let label = rec[dim]
                .parse()
                .map_err(|e| FedError::config(format!("csv label: {e}")))?;
            let domain = rec[dim + 1]
                .parse()
                .map_err(|e| FedError::config(format!("csv domain: {e}")))?;
            let flag = PoisonFlag::parse(&rec[dim + 2])?;
            samples.push(Sample {
                features,
                label,
                domain,
                flag,
            });
        }
        Dataset::new(dim, classes, samples)
    }
}

/// Gaussian blobs, one isotropic cluster per class.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    pub classes: usize,
    pub per_class: usize,
    pub centers: Vec<Vec<f64>>,
    pub sigma: f64,
    pub domain: u32,
}

/// Random class centers with entries drawn from `N(0, separation^2)`.
pub fn random_centers<R: Rng + ?Sized>(
    classes: usize,
    dim: usize,
    separation: f64,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..classes)
        .map(|_| (0..dim).map(|_| separation * normal.sample(rng)).collect())
        .collect()
}

pub fn make_blobs<R: Rng + ?Sized>(spec: &BlobSpec, rng: &mut R) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(FedError::config("blobs need at least two classes"));
    }
    if spec.centers.len() != spec.classes {
        return Err(FedError::config(format!(
            "{} centers given for {} classes",
            spec.centers.len(),
            spec.classes
        )));
    }
    if !(spec.sigma >= 0.0) {
        return Err(FedError::config("blob sigma must be non-negative"));
    }
    let dim = spec.centers[0].len();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut samples = Vec::with_capacity(spec.classes * spec.per_class);
    for (label, center) in spec.centers.iter().enumerate() {
        if center.len() != dim {
            return Err(FedError::Dimension {
                expected: dim,
                actual: center.len(),
                context: "blob center",
            });
        }
        for _ in 0..spec.per_class {
            let features = center
                .iter()
                .map(|c| c + spec.sigma * normal.sample(rng))
                .collect();
            samples.push(Sample {
                features,
                label,
                domain: spec.domain,
                flag: PoisonFlag::Clean,
            });
        }
    }
    Dataset::new(dim, spec.classes, samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub clients: usize,
    /// Dirichlet concentration.
    pub beta: f64,
}

fn subset(dataset: &Dataset, idx: &[usize]) -> Dataset {
    Dataset {
        dim: dataset.dim,
        classes: dataset.classes,
        samples: idx.iter().map(|&i| dataset.samples[i].clone()).collect(),
    }
}

fn dirichlet<R: Rng + ?Sized>(k: usize, beta: f64, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(beta, 1.0).expect("beta validated positive");
    let mut draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter_mut().for_each(|d| *d /= total);
    } else {
        // every gamma draw underflowed: put all mass on one client
        let pick = rng.random_range(0..k);
        draws = (0..k).map(|i| if i == pick { 1.0 } else { 0.0 }).collect();
    }
    draws
}

/// Moves one sample from the currently largest client into each empty one.
fn repair_empty(parts: &mut [Vec<usize>]) {
    while let Some(empty) = parts.iter().position(Vec::is_empty) {
        let largest = (0..parts.len())
            .max_by(|&a, &b| parts[a].len().cmp(&parts[b].len()).then(b.cmp(&a)))
            .expect("non-empty partition list");
        let moved = parts[largest].pop().expect("largest client has samples");
        parts[empty].push(moved);
    }
}

/// Label-skewed split: per class, proportions `~ Dir(beta)` over clients.
pub fn partition_dirichlet<R: Rng + ?Sized>(
    dataset: &Dataset,
    config: &PartitionConfig,
    rng: &mut R,
) -> Result<Vec<Dataset>> {
    if !(config.beta > 0.0) {
        return Err(FedError::config(format!(
            "dirichlet beta must be > 0, got {}",
            config.beta
        )));
    }
    if config.clients == 0 {
        return Err(FedError::config("need at least one client"));
    }
    if config.clients > dataset.len() {
        return Err(FedError::config(format!(
            "{} clients but only {} samples",
            config.clients,
            dataset.len()
        )));
    }
    let m = config.clients;
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); m];
    for class in 0..dataset.classes {
        let mut idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.samples[i].label == class)
            .collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(rng);
        let props = dirichlet(m, config.beta, rng);
        let n = idx.len();
        let mut cum = 0.0;
        let mut start = 0;
        for (client, p) in props.iter().enumerate() {
            cum += p;
            let end = if client + 1 == m {
                n
            } else {
                ((cum * n as f64).floor() as usize).clamp(start, n)
            };
            parts[client].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    repair_empty(&mut parts);
    for p in parts.iter_mut() {
        p.sort_unstable();
    }
    Ok(parts.iter().map(|p| subset(dataset, p)).collect())
}

/// Uniform random split into `clients` near-equal shards.
pub fn partition_iid<R: Rng + ?Sized>(
    dataset: &Dataset,
    clients: usize,
    rng: &mut R,
) -> Result<Vec<Dataset>> {
    if clients == 0 || clients > dataset.len() {
        return Err(FedError::config(format!(
            "cannot split {} samples across {clients} clients",
            dataset.len()
        )));
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(rng);
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for (k, i) in idx.into_iter().enumerate() {
        parts[k % clients].push(i);
    }
    for p in parts.iter_mut() {
        p.sort_unstable();
    }
    Ok(parts.iter().map(|p| subset(dataset, p)).collect())
}

/// `x' = scale * R(rotation) x + shift + N(0, noise^2)`, with the rotation
/// acting on the plane of the first two coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    #[serde(default)]
    pub rotation: f64,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub shift: Vec<f64>,
    #[serde(default)]
    pub noise: f64,
}

fn one() -> f64 {
    1.0
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self {
            rotation: 0.0,
            scale: 1.0,
            shift: Vec::new(),
            noise: 0.0,
        }
    }

    pub fn rotation(radians: f64) -> Self {
        Self {
            rotation: radians,
            ..Self::identity()
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.scale == 0.0 || !self.scale.is_finite() {
            return Err(FedError::config("domain transform scale must be non-zero"));
        }
        if !self.shift.is_empty() && self.shift.len() != dim {
            return Err(FedError::Dimension {
                expected: dim,
                actual: self.shift.len(),
                context: "domain shift vector",
            });
        }
        if self.rotation != 0.0 && dim < 2 {
            return Err(FedError::config("rotation needs at least two features"));
        }
        if !(self.noise >= 0.0) {
            return Err(FedError::config("domain noise must be non-negative"));
        }
        Ok(())
    }

    pub fn apply<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let mut out = x.to_vec();
        if self.rotation != 0.0 {
            let (s, c) = self.rotation.sin_cos();
            out[0] = c * x[0] - s * x[1];
            out[1] = s * x[0] + c * x[1];
        }
        for v in out.iter_mut() {
            *v *= self.scale;
        }
        if !self.shift.is_empty() {
            for (v, s) in out.iter_mut().zip(&self.shift) {
                *v += s;
            }
        }
        if self.noise > 0.0 {
            let normal = Normal::new(0.0, self.noise).expect("noise validated");
            for v in out.iter_mut() {
                *v += normal.sample(rng);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    #[serde(flatten)]
    pub transform: AffineTransform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSuiteConfig {
    pub classes: usize,
    pub centers: Vec<Vec<f64>>,
    pub sigma: f64,
    /// Per class, per client.
    pub train_per_class: usize,
    /// Per class, per domain test set.
    pub test_per_class: usize,
    pub clients: usize,
    pub domains: Vec<DomainSpec>,
    pub held_out: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSuite {
    pub clients: Vec<Dataset>,
    /// One test set per participating domain.
    pub tests: Vec<(String, Dataset)>,
    pub unseen: Option<(String, Dataset)>,
}

/// Samples `per_class` points per class from domain `tag`.
pub fn domain_blobs<R: Rng + ?Sized>(
    cfg: &DomainSuiteConfig,
    tag: usize,
    per_class: usize,
    rng: &mut R,
) -> Result<Dataset> {
    let mut base = make_blobs(
        &BlobSpec {
            classes: cfg.classes,
            per_class,
            centers: cfg.centers.clone(),
            sigma: cfg.sigma,
            domain: tag as u32,
        },
        rng,
    )?;
    let transform = &cfg.domains[tag].transform;
    for s in base.samples.iter_mut() {
        s.features = transform.apply(&s.features, rng);
    }
    Ok(base)
}

/// Domain-skewed federation: every client draws from a single domain with
/// the same per-class counts; an optional held-out domain only appears in
/// the unseen evaluation set.
pub fn make_domain_suite<R: Rng + ?Sized>(
    cfg: &DomainSuiteConfig,
    rng: &mut R,
) -> Result<DomainSuite> {
    if cfg.domains.len() < 2 {
        return Err(FedError::config("domain suite needs at least two domains"));
    }
    let dim = cfg.centers.first().map_or(0, Vec::len);
    for d in &cfg.domains {
        d.transform.validate(dim)?;
    }
    let held = match &cfg.held_out {
        Some(name) => Some(
            cfg.domains
                .iter()
                .position(|d| &d.name == name)
                .ok_or_else(|| FedError::config(format!("held-out domain `{name}` is unknown")))?,
        ),
        None => None,
    };
    let active: Vec<usize> = (0..cfg.domains.len()).filter(|&i| Some(i) != held).collect();
    if cfg.clients == 0 {
        return Err(FedError::config("need at least one client"));
    }
    let mut clients = Vec::with_capacity(cfg.clients);
    for c in 0..cfg.clients {
        let tag = active[c % active.len()];
        clients.push(domain_blobs(cfg, tag, cfg.train_per_class, rng)?);
    }
    let mut tests = Vec::with_capacity(active.len());
    for &tag in &active {
        tests.push((
            cfg.domains[tag].name.clone(),
            domain_blobs(cfg, tag, cfg.test_per_class, rng)?,
        ));
    }
    let unseen = match held {
        Some(tag) => Some((
            cfg.domains[tag].name.clone(),
            domain_blobs(cfg, tag, cfg.test_per_class, rng)?,
        )),
        None => None,
    };
    Ok(DomainSuite {
        clients,
        tests,
        unseen,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipMode {
    Symmetric,
    Pair,
}

/// Label transition matrix `T[from][to]` for the given corruption.
pub fn flip_matrix(mode: FlipMode, classes: usize, epsilon: f64) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|from| {
            (0..classes)
                .map(|to| match mode {
                    _ if to == from => 1.0 - epsilon,
                    FlipMode::Symmetric => epsilon / (classes - 1) as f64,
                    FlipMode::Pair if to == (from + 1) % classes => epsilon,
                    FlipMode::Pair => 0.0,
                })
                .collect()
        })
        .collect()
}

/// Corrupts labels in place of a copy; flipped samples are tagged
/// [`PoisonFlag::Flipped`].
pub fn flip_labels<R: Rng + ?Sized>(
    dataset: &Dataset,
    mode: FlipMode,
    epsilon: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(FedError::config(format!(
            "flip rate must be in [0, 1), got {epsilon}"
        )));
    }
    let classes = dataset.classes;
    let mut out = dataset.clone();
    if epsilon == 0.0 {
        return Ok(out);
    }
    for s in out.samples.iter_mut() {
        if rng.random::<f64>() >= epsilon {
            continue;
        }
        let target = match mode {
            FlipMode::Pair => (s.label + 1) % classes,
            FlipMode::Symmetric => {
                let k = rng.random_range(0..classes - 1);
                if k >= s.label {
                    k + 1
                } else {
                    k
                }
            }
        };
        s.label = target;
        s.flag = PoisonFlag::Flipped;
    }
    Ok(out)
}

/// Trigger `x~ = (1 - m) ⊙ x + m ⊙ Φ` plus the attacker's target and mixing
/// weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackdoorConfig {
    pub mask: Vec<f64>,
    pub pattern: Vec<f64>,
    pub target: usize,
    pub tradeoff: f64,
    /// Fraction of each local batch that is additionally presented triggered.
    pub poison_fraction: f64,
}

impl BackdoorConfig {
    /// Mask set on `coords`, pattern value `value` there and zero elsewhere.
    pub fn on_coords(
        dim: usize,
        coords: &[usize],
        value: f64,
        target: usize,
        tradeoff: f64,
        poison_fraction: f64,
    ) -> Result<Self> {
        let mut mask = vec![0.0; dim];
        let mut pattern = vec![0.0; dim];
        for &c in coords {
            if c >= dim {
                return Err(FedError::config(format!(
                    "trigger coordinate {c} outside feature width {dim}"
                )));
            }
            mask[c] = 1.0;
            pattern[c] = value;
        }
        Ok(Self {
            mask,
            pattern,
            target,
            tradeoff,
            poison_fraction,
        })
    }

    pub fn validate(&self, dim: usize, classes: usize) -> Result<()> {
        if self.mask.len() != dim || self.pattern.len() != dim {
            return Err(FedError::Dimension {
                expected: dim,
                actual: self.mask.len().max(self.pattern.len()),
                context: "backdoor mask/pattern",
            });
        }
        if self.mask.iter().any(|m| *m != 0.0 && *m != 1.0) {
            return Err(FedError::config("backdoor mask must be binary"));
        }
        if self.target >= classes {
            return Err(FedError::config(format!(
                "backdoor target {} outside 0..{classes}",
                self.target
            )));
        }
        if !(self.tradeoff >= 0.0) {
            return Err(FedError::config("backdoor trade-off must be >= 0"));
        }
        if !(self.poison_fraction > 0.0 && self.poison_fraction <= 1.0) {
            return Err(FedError::config("poison fraction must be in (0, 1]"));
        }
        Ok(())
    }
}

pub fn inject_trigger(x: &[f64], cfg: &BackdoorConfig) -> Vec<f64> {
    x.iter()
        .zip(cfg.mask.iter().zip(&cfg.pattern))
        .map(|(xi, (m, phi))| (1.0 - m) * xi + m * phi)
        .collect()
}

/// Triggered evaluation set: every sample whose clean label differs from the
/// target, with the trigger applied and the target as its label.
pub fn triggered_set(dataset: &Dataset, cfg: &BackdoorConfig) -> Dataset {
    let samples = dataset
        .samples
        .iter()
        .filter(|s| s.label != cfg.target)
        .map(|s| Sample {
            features: inject_trigger(&s.features, cfg),
            label: cfg.target,
            domain: s.domain,
            flag: PoisonFlag::Triggered,
        })
        .collect();
    Dataset {
        dim: dataset.dim,
        classes: dataset.classes,
        samples,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_blobs(seed: u64, per_class: usize) -> Dataset {
        make_blobs(
            &BlobSpec {
                classes: 2,
                per_class,
                centers: vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
                sigma: 0.1,
                domain: 0,
            },
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    }

    #[test]
    fn zero_sigma_collapses_to_centers() {
        let d = make_blobs(
            &BlobSpec {
                classes: 2,
                per_class: 5,
                centers: vec![vec![1.0, 2.0], vec![-3.0, 4.0]],
                sigma: 0.0,
                domain: 0,
            },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        for s in &d.samples {
            let c = if s.label == 0 { [1.0, 2.0] } else { [-3.0, 4.0] };
            assert_eq!(s.features, c);
        }
    }

    #[test]
    fn blobs_are_seed_deterministic() {
        assert_eq!(two_blobs(3, 50), two_blobs(3, 50));
        assert_ne!(two_blobs(3, 50), two_blobs(4, 50));
    }

    #[test]
    fn single_client_gets_everything() {
        let d = two_blobs(1, 20);
        let parts = partition_dirichlet(
            &d,
            &PartitionConfig {
                clients: 1,
                beta: 0.5,
            },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0], d);
    }

    #[test]
    fn dirichlet_rejects_bad_beta() {
        let d = two_blobs(1, 20);
        let bad = PartitionConfig {
            clients: 2,
            beta: 0.0,
        };
        assert!(partition_dirichlet(&d, &bad, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn dirichlet_large_beta_is_near_global() {
        for seed in 0..20 {
            let d = two_blobs(seed, 500);
            let parts = partition_dirichlet(
                &d,
                &PartitionConfig {
                    clients: 2,
                    beta: 10_000.0,
                },
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap();
            for p in &parts {
                let h = p.label_histogram();
                let frac = h[0] as f64 / p.len() as f64;
                assert!((frac - 0.5).abs() <= 0.05, "seed {seed}: {frac}");
            }
        }
    }

    #[test]
    fn empty_clients_are_repaired() {
        let d = two_blobs(2, 10);
        let parts = partition_dirichlet(
            &d,
            &PartitionConfig {
                clients: 15,
                beta: 0.01,
            },
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        assert!(parts.iter().all(|p| !p.is_empty()));
        assert_eq!(parts.iter().map(Dataset::len).sum::<usize>(), 20);
    }

    #[test]
    fn held_out_domain_never_trains() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = DomainSuiteConfig {
            classes: 3,
            centers: random_centers(3, 4, 2.0, &mut rng),
            sigma: 0.5,
            train_per_class: 10,
            test_per_class: 10,
            clients: 6,
            domains: (0..4)
                .map(|i| DomainSpec {
                    name: format!("d{i}"),
                    transform: AffineTransform::rotation(i as f64 * 0.4),
                })
                .collect(),
            held_out: Some("d3".into()),
        };
        let suite = make_domain_suite(&cfg, &mut rng).unwrap();
        assert!(suite
            .clients
            .iter()
            .flat_map(|c| &c.samples)
            .all(|s| s.domain != 3));
        let (name, unseen) = suite.unseen.unwrap();
        assert_eq!(name, "d3");
        assert!(unseen.samples.iter().all(|s| s.domain == 3));
        assert_eq!(suite.tests.len(), 3);
        for c in &suite.clients {
            assert_eq!(c.label_histogram(), vec![10, 10, 10]);
        }

        let unknown = DomainSuiteConfig {
            held_out: Some("nope".into()),
            ..cfg
        };
        assert!(make_domain_suite(&unknown, &mut rng).is_err());
    }

    #[test]
    fn identity_domains_reduce_to_iid() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = DomainSuiteConfig {
            classes: 2,
            centers: vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
            sigma: 0.0,
            train_per_class: 4,
            test_per_class: 2,
            clients: 4,
            domains: (0..2)
                .map(|i| DomainSpec {
                    name: format!("d{i}"),
                    transform: AffineTransform::identity(),
                })
                .collect(),
            held_out: None,
        };
        let suite = make_domain_suite(&cfg, &mut rng).unwrap();
        let strip = |d: &Dataset| -> Vec<(Vec<f64>, usize)> {
            d.samples
                .iter()
                .map(|s| (s.features.clone(), s.label))
                .collect()
        };
        let first = strip(&suite.clients[0]);
        for c in &suite.clients {
            assert_eq!(strip(c), first);
        }
    }

    #[test]
    fn flip_zero_is_identity() {
        let d = two_blobs(5, 30);
        let out = flip_labels(&d, FlipMode::Symmetric, 0.0, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(out, d);
        assert!(flip_labels(&d, FlipMode::Pair, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn symmetric_row_matches_closed_form() {
        let t = flip_matrix(FlipMode::Symmetric, 3, 0.5);
        assert_eq!(t[0], vec![0.5, 0.25, 0.25]);
        let p = flip_matrix(FlipMode::Pair, 4, 0.3);
        assert_eq!(p[3], vec![0.3, 0.0, 0.0, 0.7]);
    }

    #[test]
    fn trigger_edge_masks() {
        let x = vec![0.5, -1.0, 2.0];
        let zero = BackdoorConfig {
            mask: vec![0.0; 3],
            pattern: vec![9.0; 3],
            target: 0,
            tradeoff: 1.0,
            poison_fraction: 1.0,
        };
        assert_eq!(inject_trigger(&x, &zero), x);
        let full = BackdoorConfig {
            mask: vec![1.0; 3],
            ..zero.clone()
        };
        assert_eq!(inject_trigger(&x, &full), vec![9.0; 3]);
        let part = BackdoorConfig::on_coords(3, &[1], 7.0, 0, 1.0, 1.0).unwrap();
        let once = inject_trigger(&x, &part);
        assert_eq!(once, vec![0.5, 7.0, 2.0]);
        assert_eq!(inject_trigger(&once, &part), once);
        assert!(part.validate(3, 2).is_ok());
        assert!(part.validate(4, 2).is_err());
    }

    #[test]
    fn triggered_set_excludes_target_class() {
        let d = two_blobs(6, 10);
        let cfg = BackdoorConfig::on_coords(2, &[0], 5.0, 1, 1.0, 1.0).unwrap();
        let t = triggered_set(&d, &cfg);
        assert_eq!(t.len(), 10);
        assert!(t
            .samples
            .iter()
            .all(|s| s.label == 1 && s.flag == PoisonFlag::Triggered && s.features[0] == 5.0));
    }

    #[test]
    fn csv_round_trip() {
        let mut d = two_blobs(7, 3);
        d.samples[0].flag = PoisonFlag::Flipped;
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("f0,f1,label,domain,flag\n"));
        let back = Dataset::read_csv(buf.as_slice(), 2).unwrap();
        assert_eq!(back, d);
    }
}
