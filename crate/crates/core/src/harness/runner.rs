//! Turns an [`ExperimentConfig`] into a [`RunReport`].

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{AttackConfig, DataConfig, ExperimentConfig, PartitionSpec};
use super::report::{FinalMetrics, RoundSummary, RunReport};
use crate::adversary::ModelPoisoner;
use crate::aggregators::AggregatorConfig;
use crate::datagen::{
    domain_blobs, flip_labels, make_blobs, make_domain_suite, partition_dirichlet, partition_iid,
    random_centers, triggered_set, BackdoorConfig, BlobSpec, Dataset, DomainSuiteConfig,
    PartitionConfig,
};
use crate::error::{FedError, Result};
use crate::fedcore::{AggregationWeights, ClientState, Federation, Role, ServerSetup};
use crate::metrics::{
    attack_impact, attack_success_rate, contribution_match_degree, leave_one_out_drops,
    shapley_values, suite_metrics, EvaluationSuite, ShapleyMode,
};
use crate::numkit::{vecops, ModelDims, ModelParams};

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Worker threads for client training; `None` uses the global pool.
    pub threads: Option<usize>,
}

/// Everything derived from the data and attack seeds.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub clients: Vec<ClientState>,
    pub suite: EvaluationSuite,
    pub root: Option<Dataset>,
    pub malicious: Vec<usize>,
    pub dims: ModelDims,
}

fn concat(sets: &[(String, Dataset)]) -> Dataset {
    let first = &sets[0].1;
    Dataset {
        dim: first.dim,
        classes: first.classes,
        samples: sets.iter().flat_map(|(_, d)| d.samples.iter().cloned()).collect(),
    }
}

pub fn build_scenario(cfg: &ExperimentConfig) -> Result<Scenario> {
    let seeds = cfg.seeds();
    let mut data_rng = ChaCha8Rng::seed_from_u64(seeds.data);
    let root_per_class = match cfg.aggregator {
        AggregatorConfig::Fltrust { root_per_class, .. } => Some(root_per_class),
        _ => None,
    };
    let (parts, suite, root) = match &cfg.data {
        DataConfig::Blobs {
            classes,
            dim,
            clients,
            separation,
            sigma,
            train_per_class,
            test_per_class,
            partition,
            nuisance_dims,
            nuisance_sigma,
        } => {
            let mut centers = random_centers(*classes, *dim, *separation, &mut data_rng);
            for c in &mut centers {
                c[dim - nuisance_dims..].fill(0.0);
            }
            let spec = |per_class| BlobSpec {
                classes: *classes,
                per_class,
                centers: centers.clone(),
                sigma: *sigma,
                domain: 0,
            };
            // nuisance centers are zero, so rescaling the draw rescales the noise
            let factor = match nuisance_sigma {
                Some(ns) if *sigma > 0.0 => ns / sigma,
                _ => 1.0,
            };
            let blobs = |per_class, rng: &mut ChaCha8Rng| -> Result<Dataset> {
                let mut ds = make_blobs(&spec(per_class), rng)?;
                if factor != 1.0 {
                    for s in &mut ds.samples {
                        s.features[dim - nuisance_dims..].iter_mut().for_each(|x| *x *= factor);
                    }
                }
                Ok(ds)
            };
            let train = blobs(*train_per_class, &mut data_rng)?;
            let test = blobs(*test_per_class, &mut data_rng)?;
            let parts = match partition {
                PartitionSpec::Dirichlet { beta } => partition_dirichlet(
                    &train,
                    &PartitionConfig {
                        clients: *clients,
                        beta: *beta,
                    },
                    &mut data_rng,
                )?,
                PartitionSpec::Iid => partition_iid(&train, *clients, &mut data_rng)?,
            };
            let root = root_per_class
                .map(|k| blobs(k, &mut data_rng))
                .transpose()?;
            let suite = EvaluationSuite {
                tests: vec![("blobs".to_string(), test)],
                unseen: None,
                triggered: None,
            };
            (parts, suite, root)
        }
        DataConfig::Domains {
            classes,
            dim,
            clients,
            separation,
            sigma,
            train_per_class,
            test_per_class,
            domains,
            held_out,
        } => {
            let centers = random_centers(*classes, *dim, *separation, &mut data_rng);
            let dcfg = DomainSuiteConfig {
                classes: *classes,
                centers,
                sigma: *sigma,
                train_per_class: *train_per_class,
                test_per_class: *test_per_class,
                clients: *clients,
                domains: domains.clone(),
                held_out: held_out.clone(),
            };
            let ds = make_domain_suite(&dcfg, &mut data_rng)?;
            let first_active = (0..domains.len())
                .find(|&i| Some(&domains[i].name) != held_out.as_ref())
                .expect("validated: an active domain exists");
            let root = root_per_class
                .map(|k| domain_blobs(&dcfg, first_active, k, &mut data_rng))
                .transpose()?;
            let suite = EvaluationSuite {
                tests: ds.tests,
                unseen: ds.unseen,
                triggered: None,
            };
            (ds.clients, suite, root)
        }
    };

    let m = parts.len();
    let attackers = if cfg.adversary.is_active(m) {
        cfg.adversary.attackers(m)
    } else {
        0
    };
    let malicious: Vec<usize> = (0..attackers).collect();
    let mut flip_rng = ChaCha8Rng::seed_from_u64(seeds.attack);
    flip_rng.set_stream(1);
    let mut suite = suite;
    let mut backdoor = None;
    if let AttackConfig::Backdoor {
        coords,
        value,
        target,
        tradeoff,
        poison_fraction,
    } = &cfg.adversary.attack
    {
        let bd = BackdoorConfig::on_coords(
            cfg.data.dim(),
            coords,
            *value,
            *target,
            *tradeoff,
            *poison_fraction,
        )?;
        if cfg.metrics.attack_success_rate {
            suite.triggered = Some((triggered_set(&concat(&suite.tests), &bd), *target));
        }
        backdoor = Some(bd);
    }

    let mut clients = Vec::with_capacity(m);
    for (i, data) in parts.into_iter().enumerate() {
        let bad = i < attackers;
        let (data, role) = match (&cfg.adversary.attack, bad) {
            (_, false) | (AttackConfig::None, true) => (data, Role::Honest),
            (AttackConfig::LabelFlip { mode, rate }, true) => {
                (flip_labels(&data, *mode, *rate, &mut flip_rng)?, Role::Byzantine)
            }
            (AttackConfig::Model { .. }, true) => (data, Role::Byzantine),
            (AttackConfig::Backdoor { .. }, true) => (data, Role::Backdoor),
        };
        let mut client = ClientState::new(i, data, role, seeds.training);
        if role == Role::Backdoor {
            client = client.with_backdoor(backdoor.clone().expect("set for backdoor attacks"));
        }
        clients.push(client);
    }
    let dims = if cfg.model.hidden == 0 {
        ModelDims::logistic(cfg.data.dim(), cfg.data.classes())
    } else {
        ModelDims::mlp(cfg.data.dim(), cfg.model.hidden, cfg.data.classes())
    };
    Ok(Scenario {
        clients,
        suite,
        root,
        malicious,
        dims,
    })
}

fn initial_params(cfg: &ExperimentConfig, dims: ModelDims) -> Result<ModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds().init);
    ModelParams::init(dims, &mut rng)
}

fn evaluate_round(params: &ModelParams, suite: &EvaluationSuite) -> Result<(crate::metrics::SuiteMetrics, Option<f64>)> {
    let acc = suite_metrics(params, suite)?;
    let asr = suite
        .triggered
        .as_ref()
        .filter(|(d, _)| !d.is_empty())
        .map(|(d, target)| attack_success_rate(params, d, *target))
        .transpose()?;
    Ok((acc, asr))
}

/// Runs the federation over `clients` for the configured number of rounds.
fn train(
    cfg: &ExperimentConfig,
    scenario: &Scenario,
    clients: Vec<ClientState>,
    opts: &RunOptions,
) -> Result<(Federation, Vec<RoundSummary>)> {
    let counts: Vec<usize> = clients.iter().map(|c| c.data.len()).collect();
    let alpha = AggregationWeights::from_counts(cfg.weights, &counts)?;
    let poisoner = match &cfg.adversary.attack {
        AttackConfig::Model { attack } if !scenario.malicious.is_empty() => {
            Some(ModelPoisoner::new(attack.clone())?)
        }
        _ => None,
    };
    let seeds = cfg.seeds();
    let setup = ServerSetup {
        aggregator: cfg.aggregator.clone(),
        server_lr: cfg.server.lr,
        server_momentum: cfg.server.momentum,
        participation: cfg.server.participation,
        poisoner,
        root: scenario.root.clone(),
        training_seed: seeds.training,
        attack_seed: seeds.attack,
    };
    let init = initial_params(cfg, scenario.dims)?;
    let mut fed = Federation::new(init, clients, cfg.schedule, cfg.strategy, alpha, setup)?;
    if let Some(t) = opts.threads {
        fed = fed.with_threads(t)?;
    }
    let mut rounds = Vec::with_capacity(cfg.schedule.rounds);
    for _ in 0..cfg.schedule.rounds {
        let rec = fed.run_round()?;
        let (accuracy, asr) = evaluate_round(fed.params(), &scenario.suite)?;
        log::debug!("round {} accuracy {:.4}", rec.round + 1, accuracy.mean);
        rounds.push(RoundSummary {
            round: rec.round + 1,
            mean_train_loss: rec.mean_train_loss,
            accuracy,
            attack_success_rate: asr,
            participants: rec.participants,
            selected: rec.outcome.selected,
            weights: rec.outcome.weights,
            scores: rec.outcome.scores,
            attack_gamma: rec.attack_gamma,
            notes: rec.outcome.notes,
        });
    }
    Ok((fed, rounds))
}

/// α-weighted aggregate of the listed local models.
fn recombine(locals: &[&[f64]], alpha: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; locals[0].len()];
    for (w, a) in locals.iter().zip(alpha) {
        vecops::axpy(*a, w, &mut out);
    }
    out
}

fn mean_accuracy(flat: Vec<f64>, dims: ModelDims, suite: &EvaluationSuite) -> Result<f64> {
    Ok(suite_metrics(&ModelParams::unflatten(dims, flat)?, suite)?.mean)
}

/// Leave-one-out drops over the final round's participants.
fn contribution(fed: &Federation, scenario: &Scenario) -> Result<(Option<Vec<f64>>, Option<f64>)> {
    let locals = fed.last_local_models();
    let ids: Vec<usize> = (0..locals.len()).filter(|&i| locals[i].is_some()).collect();
    if ids.len() < 2 {
        return Ok((None, None));
    }
    let flats: Vec<&[f64]> = ids
        .iter()
        .map(|&i| locals[i].as_ref().expect("filtered").as_flat())
        .collect();
    let alpha = fed.alpha().restricted(&ids);
    let w = recombine(&flats, &alpha);
    let full = mean_accuracy(w.clone(), scenario.dims, &scenario.suite)?;
    let mut loo_means = Vec::with_capacity(ids.len());
    for (k, local) in flats.iter().enumerate() {
        let loo = crate::fedcore::leave_one_out(&w, local, alpha[k])?;
        loo_means.push(mean_accuracy(loo, scenario.dims, &scenario.suite)?);
    }
    let drops = leave_one_out_drops(full, &loo_means);
    let e = contribution_match_degree(&drops, &alpha)?;
    Ok((Some(drops), e))
}

fn shapley(
    cfg: &ExperimentConfig,
    fed: &Federation,
    scenario: &Scenario,
    opts: &RunOptions,
) -> Result<Option<Vec<f64>>> {
    let Some(sh) = cfg.metrics.shapley else {
        return Ok(None);
    };
    let m = scenario.clients.len();
    let empty_value = suite_metrics(&initial_params(cfg, scenario.dims)?, &scenario.suite)?.mean;
    let nu = match sh.mode {
        ShapleyMode::OneshotAggregate => {
            let locals = fed.last_local_models();
            if locals.iter().any(Option::is_none) {
                return Err(FedError::config(
                    "one-shot shapley needs every client in the final round",
                ));
            }
            let flats: Vec<Vec<f64>> = locals.into_iter().map(|l| l.expect("checked").into_flat()).collect();
            shapley_values(
                m,
                |mask| {
                    if mask == 0 {
                        return Ok(empty_value);
                    }
                    let ids: Vec<usize> = (0..m).filter(|i| mask >> i & 1 == 1).collect();
                    let alpha = fed.alpha().restricted(&ids);
                    let chosen: Vec<&[f64]> = ids.iter().map(|&i| flats[i].as_slice()).collect();
                    mean_accuracy(recombine(&chosen, &alpha), scenario.dims, &scenario.suite)
                },
                &sh,
            )?
        }
        ShapleyMode::RetrainExact => shapley_values(
            m,
            |mask| {
                if mask == 0 {
                    return Ok(empty_value);
                }
                let subset: Vec<ClientState> = scenario
                    .clients
                    .iter()
                    .filter(|c| mask >> c.id & 1 == 1)
                    .cloned()
                    .collect();
                let mut sub_cfg = cfg.clone();
                sub_cfg.aggregator = match sub_cfg.aggregator {
                    AggregatorConfig::MultiKrum { f, k } => AggregatorConfig::MultiKrum {
                        f,
                        k: k.min(subset.len()),
                    },
                    other => other,
                };
                let (coalition, _) = train(&sub_cfg, scenario, subset, &RunOptions { threads: opts.threads.map(|_| 1) })?;
                Ok(suite_metrics(coalition.params(), &scenario.suite)?.mean)
            },
            &sh,
        )?,
    };
    Ok(Some(nu))
}

/// The benign twin: identical seeds and settings with no attackers.
pub fn benign_twin(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut twin = cfg.clone();
    twin.adversary.ratio = 0.0;
    twin.adversary.attack = AttackConfig::None;
    twin.metrics.attack_impact = false;
    twin.metrics.contribution_match = false;
    twin.metrics.shapley = None;
    twin
}

pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport> {
    let started = Instant::now();
    cfg.validate()?;
    let scenario = build_scenario(cfg)?;
    let (fed, rounds) = train(cfg, &scenario, scenario.clients.clone(), opts)?;
    let (accuracy, asr) = evaluate_round(fed.params(), &scenario.suite)?;

    let active = cfg.adversary.is_active(cfg.data.clients());
    let benign_accuracy = if cfg.metrics.attack_impact && active {
        let twin = benign_twin(cfg);
        let twin_scenario = build_scenario(&twin)?;
        let (twin_fed, _) = train(&twin, &twin_scenario, twin_scenario.clients.clone(), opts)?;
        Some(suite_metrics(twin_fed.params(), &twin_scenario.suite)?.mean)
    } else {
        None
    };
    let impact = benign_accuracy.map(|b| attack_impact(100.0 * b, 100.0 * accuracy.mean));

    let (loo_drops, contribution_match) = if cfg.metrics.contribution_match {
        contribution(&fed, &scenario)?
    } else {
        (None, None)
    };
    let shapley = shapley(cfg, &fed, &scenario, opts)?;

    let mut notes = vec![
        "malicious clients are the lowest-index ones".to_string(),
        "leave-one-out uses the final round's local models".to_string(),
    ];
    if scenario.suite.triggered.is_some() {
        notes.push("triggered set excludes samples already labelled with the target".into());
    }
    if matches!(cfg.aggregator, AggregatorConfig::Dnc { .. }) {
        notes.push("divide-and-conquer is given the configured attacker count".into());
    }
    if impact.is_some() {
        notes.push("attack impact is measured against a benign twin with identical seeds".into());
    }

    Ok(RunReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        malicious_clients: scenario.malicious.clone(),
        rounds,
        final_metrics: FinalMetrics {
            accuracy,
            attack_impact: impact,
            benign_accuracy,
            attack_success_rate: asr,
            loo_drops,
            contribution_match,
            shapley,
        },
        notes,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}
