use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{FedError, Result};
use crate::metrics::SuiteMetrics;

/// Serialises `None` as the string `"NA"` and accepts it back.
pub mod na {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_str("NA"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(x) => Ok(Some(x)),
            Raw::Text(t) if t == "NA" => Ok(None),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"NA\", got {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    /// Rounds completed, starting at 1.
    pub round: usize,
    pub mean_train_loss: f64,
    pub accuracy: SuiteMetrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack_success_rate: Option<f64>,
    pub participants: Vec<usize>,
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack_gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub accuracy: SuiteMetrics,
    /// Accuracy drop against the benign twin, in points.
    #[serde(with = "na")]
    pub attack_impact: Option<f64>,
    /// Mean suite accuracy of the benign twin (fraction).
    #[serde(with = "na")]
    pub benign_accuracy: Option<f64>,
    #[serde(with = "na")]
    pub attack_success_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loo_drops: Option<Vec<f64>>,
    #[serde(with = "na")]
    pub contribution_match: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shapley: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub config: ExperimentConfig,
    pub malicious_clients: Vec<usize>,
    pub rounds: Vec<RoundSummary>,
    pub final_metrics: FinalMetrics,
    pub notes: Vec<String>,
    pub wall_clock_secs: f64,
}

fn pct(x: f64) -> String {
    format!("{:.6}", 100.0 * x)
}

fn plain(x: f64) -> String {
    format!("{x:.6}")
}

fn opt(x: Option<f64>, f: fn(f64) -> String) -> String {
    x.map_or_else(|| "NA".to_string(), f)
}

impl RunReport {
    /// Rows of `metrics.csv`: `(name, dataset, round, value)`. Accuracies
    /// are in percentage points.
    pub fn metric_rows(&self) -> Vec<[String; 4]> {
        let mut rows = Vec::new();
        let mut push = |name: &str, dataset: &str, round: &str, value: String| {
            rows.push([name.to_string(), dataset.to_string(), round.to_string(), value]);
        };
        let suite_rows = |push: &mut dyn FnMut(&str, &str, &str, String), m: &SuiteMetrics, round: &str| {
            for (name, a) in &m.per_dataset {
                push("accuracy", name, round, pct(*a));
            }
            push("mean_accuracy", "suite", round, pct(m.mean));
            if let Some(u) = m.unseen {
                push("unseen_accuracy", "unseen", round, pct(u));
            }
        };
        for r in &self.rounds {
            let round = r.round.to_string();
            suite_rows(&mut push, &r.accuracy, &round);
            push("train_loss", "clients", &round, plain(r.mean_train_loss));
            if let Some(a) = r.attack_success_rate {
                push("attack_success_rate", "triggered", &round, pct(a));
            }
        }
        let f = &self.final_metrics;
        suite_rows(&mut push, &f.accuracy, "final");
        push("performance_deviation", "suite", "final", plain(f.accuracy.deviation));
        push("prediction_bias", "suite", "final", plain(f.accuracy.bias));
        push("attack_impact", "suite", "final", opt(f.attack_impact, plain));
        push("benign_accuracy", "suite", "final", opt(f.benign_accuracy, pct));
        push("attack_success_rate", "triggered", "final", opt(f.attack_success_rate, pct));
        if let Some(drops) = &f.loo_drops {
            for (i, g) in drops.iter().enumerate() {
                push("loo_drop", &format!("client_{i}"), "final", pct(*g));
            }
        }
        push("contribution_match", "suite", "final", opt(f.contribution_match, plain));
        if let Some(nu) = &f.shapley {
            for (i, v) in nu.iter().enumerate() {
                push("shapley", &format!("client_{i}"), "final", plain(*v));
            }
        }
        rows
    }

    pub fn metrics_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["name", "dataset", "round", "value"])?;
        for row in self.metric_rows() {
            w.write_record(&row)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| FedError::config(format!("csv buffer: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Writes `report.json` and `metrics.csv` into `out_dir` (created if needed).
pub fn emit_report(report: &RunReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| FedError::io(out_dir, e))?;
    let json_path = out_dir.join("report.json");
    fs::write(&json_path, report.to_json()?).map_err(|e| FedError::io(&json_path, e))?;
    let csv_path = out_dir.join("metrics.csv");
    fs::write(&csv_path, report.metrics_csv()?).map_err(|e| FedError::io(&csv_path, e))?;
    Ok(vec![json_path, csv_path])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Probe {
        #[serde(with = "na")]
        v: Option<f64>,
    }

    #[test]
    fn missing_values_round_trip_as_na() {
        let none = serde_json::to_string(&Probe { v: None }).unwrap();
        assert_eq!(none, r#"{"v":"NA"}"#);
        assert_eq!(serde_json::from_str::<Probe>(&none).unwrap(), Probe { v: None });
        let some: Probe = serde_json::from_str(r#"{"v":0.25}"#).unwrap();
        assert_eq!(some.v, Some(0.25));
        assert!(serde_json::from_str::<Probe>(r#"{"v":"nan"}"#).is_err());
        assert_eq!(opt(None, pct), "NA");
        assert_eq!(opt(Some(0.5), pct), "50.000000");
    }
}
