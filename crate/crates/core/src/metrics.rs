//! Evaluation: accuracy over a test suite, attack impact and success rate,
//! Shapley credit and the leave-one-out contribution match.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{FedError, Result};
use crate::numkit::{argmax, vecops, ModelParams};

/// Fraction of samples whose argmax prediction equals the label.
pub fn top1_accuracy(model: &ModelParams, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(FedError::Undefined("accuracy of an empty dataset".into()));
    }
    let logits = model.logits(&dataset.full_batch().inputs)?;
    let hits = dataset
        .samples
        .iter()
        .enumerate()
        .filter(|(i, s)| argmax(logits.row(*i)) == s.label)
        .count();
    Ok(hits as f64 / dataset.len() as f64)
}

/// Share of triggered samples predicted as the attacker's target.
pub fn attack_success_rate(model: &ModelParams, triggered: &Dataset, target: usize) -> Result<f64> {
    if triggered.is_empty() {
        return Err(FedError::Undefined("attack success rate of an empty trigger set".into()));
    }
    let logits = model.logits(&triggered.full_batch().inputs)?;
    let hits = (0..triggered.len())
        .filter(|&i| argmax(logits.row(i)) == target)
        .count();
    Ok(hits as f64 / triggered.len() as f64)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Standard deviation dividing by the count.
pub fn population_std(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvaluationSuite {
    pub tests: Vec<(String, Dataset)>,
    pub unseen: Option<(String, Dataset)>,
    /// Triggered samples and the label they should be pushed to.
    pub triggered: Option<(Dataset, usize)>,
}

impl EvaluationSuite {
    pub fn validate(&self) -> Result<()> {
        if self.tests.is_empty() {
            return Err(FedError::Empty("evaluation suite"));
        }
        for (name, d) in &self.tests {
            if d.is_empty() {
                return Err(FedError::config(format!("test set `{name}` is empty")));
            }
        }
        if let Some((d, target)) = &self.triggered {
            if d.samples.iter().any(|s| s.label != *target) {
                return Err(FedError::config("triggered set must be labelled with the target"));
            }
        }
        Ok(())
    }
}

/// Accuracies are fractions; `deviation` and `bias` are in percentage points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteMetrics {
    pub per_dataset: Vec<(String, f64)>,
    pub mean: f64,
    pub deviation: f64,
    pub bias: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unseen: Option<f64>,
}

pub fn suite_metrics(model: &ModelParams, suite: &EvaluationSuite) -> Result<SuiteMetrics> {
    if suite.tests.is_empty() {
        return Err(FedError::Empty("evaluation suite"));
    }
    let per_dataset = suite
        .tests
        .iter()
        .map(|(n, d)| Ok((n.clone(), top1_accuracy(model, d)?)))
        .collect::<Result<Vec<_>>>()?;
    let accs: Vec<f64> = per_dataset.iter().map(|(_, a)| *a).collect();
    if accs.len() == 1 {
        log::debug!("single-dataset suite: deviation is trivially zero");
    }
    let spread = 100.0 * population_std(&accs);
    let unseen = suite
        .unseen
        .as_ref()
        .map(|(_, d)| top1_accuracy(model, d))
        .transpose()?;
    Ok(SuiteMetrics {
        mean: mean(&accs),
        per_dataset,
        deviation: spread,
        bias: spread,
        unseen,
    })
}

/// Accuracy drop in percentage points (both inputs in points).
pub fn attack_impact(benign: f64, attacked: f64) -> f64 {
    benign - attacked
}

/// As [`attack_impact`], but refuses runs that differ in anything besides
/// the attack.
pub fn attack_impact_matched<K: PartialEq + std::fmt::Debug>(
    benign: f64,
    benign_key: &K,
    attacked: f64,
    attacked_key: &K,
) -> Result<f64> {
    if benign_key != attacked_key {
        return Err(FedError::config(format!(
            "attack impact needs matched runs: {benign_key:?} vs {attacked_key:?}"
        )));
    }
    Ok(attack_impact(benign, attacked))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapleyMode {
    /// Re-run the federation for every coalition.
    RetrainExact,
    /// Re-aggregate the final local models of the coalition.
    #[default]
    OneshotAggregate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapleyConfig {
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default)]
    pub mode: ShapleyMode,
    #[serde(default = "default_max_exact")]
    pub max_exact: usize,
}

fn default_rho() -> f64 {
    1.0
}
fn default_max_exact() -> usize {
    6
}

impl Default for ShapleyConfig {
    fn default() -> Self {
        Self {
            rho: default_rho(),
            mode: ShapleyMode::default(),
            max_exact: default_max_exact(),
        }
    }
}

/// Hard cap on enumerated players regardless of mode.
pub const MAX_SHAPLEY_PLAYERS: usize = 20;

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64)
}

/// Exact Shapley values of `players` clients. `value(mask)` returns the
/// coalition's utility, bit `i` marking client `i`; every coalition is
/// evaluated once.
pub fn shapley_values<F>(players: usize, value: F, config: &ShapleyConfig) -> Result<Vec<f64>>
where
    F: Fn(u32) -> Result<f64> + Sync,
{
    if !(config.rho > 0.0) {
        return Err(FedError::config("shapley rescale constant must be > 0"));
    }
    if players == 0 {
        return Err(FedError::Empty("shapley players"));
    }
    let limit = match config.mode {
        ShapleyMode::RetrainExact => config.max_exact.min(MAX_SHAPLEY_PLAYERS),
        ShapleyMode::OneshotAggregate => MAX_SHAPLEY_PLAYERS,
    };
    if players > limit {
        return Err(FedError::config(format!(
            "exact shapley over {players} clients exceeds the limit of {limit} for {:?}",
            config.mode
        )));
    }
    let table: Vec<f64> = (0..1u32 << players)
        .into_par_iter()
        .map(&value)
        .collect::<Result<Vec<_>>>()?;
    let weights: Vec<f64> = (0..players)
        .map(|s| 1.0 / binomial(players - 1, s))
        .collect();
    let scale = config.rho / players as f64;
    Ok((0..players)
        .map(|i| {
            let bit = 1u32 << i;
            let total: f64 = (0..1u32 << players)
                .filter(|s| s & bit == 0)
                .map(|s| (table[(s | bit) as usize] - table[s as usize]) * weights[s.count_ones() as usize])
                .sum();
            scale * total
        })
        .collect())
}

/// Per-client drop `Γ_i = Ā - mean_u A^u_{-i}`.
pub fn leave_one_out_drops(full_mean: f64, loo_means: &[f64]) -> Vec<f64> {
    loo_means.iter().map(|a| full_mean - a).collect()
}

/// Cosine between the normalised drops and the aggregation weights, or
/// `None` when the drops sum to zero or vanish.
pub fn contribution_match_degree(drops: &[f64], alpha: &[f64]) -> Result<Option<f64>> {
    if drops.len() != alpha.len() {
        return Err(FedError::Dimension {
            expected: alpha.len(),
            actual: drops.len(),
            context: "contribution drops",
        });
    }
    let total: f64 = drops.iter().sum();
    if total == 0.0 || vecops::norm(drops) == 0.0 || !total.is_finite() {
        return Ok(None);
    }
    let normalised: Vec<f64> = drops.iter().map(|g| g / total).collect();
    if vecops::norm(alpha) == 0.0 {
        return Ok(None);
    }
    Ok(Some(vecops::cosine(&normalised, alpha)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{PoisonFlag, Sample};
    use crate::numkit::ModelDims;

    fn constant_model(class: usize, classes: usize) -> ModelParams {
        let dims = ModelDims::logistic(1, classes);
        let mut p = ModelParams::zeros(dims).unwrap();
        // bias of `class` is the last block's entry
        let off = classes;
        p.as_flat_mut()[off + class] = 1.0;
        p
    }

    fn ds(labels: &[usize], classes: usize) -> Dataset {
        Dataset {
            dim: 1,
            classes,
            samples: labels
                .iter()
                .map(|&l| Sample {
                    features: vec![0.3],
                    label: l,
                    domain: 0,
                    flag: PoisonFlag::Clean,
                })
                .collect(),
        }
    }

    #[test]
    fn accuracy_examples() {
        let m = constant_model(1, 2);
        assert_eq!(top1_accuracy(&m, &ds(&[1, 1, 1], 2)).unwrap(), 1.0);
        assert_eq!(top1_accuracy(&m, &ds(&[0, 1], 2)).unwrap(), 0.5);
        assert!(top1_accuracy(&m, &ds(&[], 2)).is_err());
        let k = ds(&[0, 1, 1], 2);
        assert_eq!(
            top1_accuracy(&m, &k).unwrap(),
            top1_accuracy(&m, &k.replicate(4)).unwrap()
        );
    }

    #[test]
    fn asr_examples() {
        let hard = constant_model(2, 3);
        let t = ds(&[2; 10], 3);
        assert_eq!(attack_success_rate(&hard, &t, 2).unwrap(), 1.0);
        assert_eq!(attack_success_rate(&constant_model(0, 3), &t, 2).unwrap(), 0.0);
    }

    #[test]
    fn suite_examples() {
        let m = constant_model(0, 2);
        let suite = EvaluationSuite {
            tests: vec![
                ("a".into(), ds(&[0, 0, 0, 0, 1], 2)),
                ("b".into(), ds(&[0, 0, 0, 1, 1], 2)),
            ],
            ..Default::default()
        };
        let s = suite_metrics(&m, &suite).unwrap();
        assert!((s.mean - 0.7).abs() < 1e-12);
        assert!((s.deviation - 10.0).abs() < 1e-9);
        assert_eq!(s.deviation, s.bias);
    }

    #[test]
    fn impact_examples() {
        assert!((attack_impact(67.16, 66.31) - 0.85).abs() < 1e-9);
        assert_eq!(attack_impact(50.0, 50.0), 0.0);
        assert!(attack_impact(80.0, 80.04) < 0.0);
        assert!(attack_impact_matched(1.0, &1u64, 0.5, &2u64).is_err());
    }

    #[test]
    fn two_player_shapley() {
        let v = [0.5, 0.7, 0.6, 0.8];
        let nu = shapley_values(2, |s| Ok(v[s as usize]), &ShapleyConfig::default()).unwrap();
        assert!((nu[0] - 0.2).abs() < 1e-12);
        assert!((nu[1] - 0.1).abs() < 1e-12);
        let too_many = ShapleyConfig {
            mode: ShapleyMode::RetrainExact,
            ..Default::default()
        };
        assert!(shapley_values(7, |_| Ok(0.0), &too_many).is_err());
    }

    #[test]
    fn match_degree_examples() {
        let alpha = [0.5, 0.25, 0.25];
        let e = contribution_match_degree(&[0.02, 0.01, 0.01], &alpha).unwrap().unwrap();
        assert!((e - 1.0).abs() < 1e-12);
        let e = contribution_match_degree(&[0.0, 1.0], &[1.0, 0.0]).unwrap().unwrap();
        assert_eq!(e, 0.0);
        assert_eq!(contribution_match_degree(&[0.1, -0.1], &[0.5, 0.5]).unwrap(), None);
        assert_eq!(contribution_match_degree(&[0.0, 0.0], &[0.5, 0.5]).unwrap(), None);
    }
}
