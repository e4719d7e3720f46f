//! The federated round loop: distribute the global model, optimise locally,
//! aggregate the returned deltas and apply the server step.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::ModelPoisoner;
use crate::aggregators::{
    defense_crfl, AggregationOutcome, Aggregator, AggregatorConfig, RoundInputs, ServerOptimizer,
};
use crate::datagen::{inject_trigger, BackdoorConfig, Dataset};
use crate::error::{FedError, Result};
use crate::numkit::{forward_loss_grad, sgd_apply, vecops, Batch, Matrix, ModelParams, MomentumBuffer, SgdConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Honest,
    Byzantine,
    Backdoor,
}

impl Role {
    pub fn is_malicious(self) -> bool {
        self != Role::Honest
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSchedule {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        Self {
            rounds: 100,
            local_epochs: 10,
            batch_size: 64,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-5,
        }
    }
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.batch_size == 0 {
            return Err(FedError::config("rounds and batch size must be >= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(FedError::config("learning rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(FedError::config(
                "momentum must be in [0, 1) and weight decay >= 0",
            ));
        }
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Strategy {
    Fedavg,
    Fedprox {
        #[serde(default = "default_mu")]
        mu: f64,
    },
    Scaffold {
        #[serde(default = "default_scaffold_lr")]
        global_lr: f64,
    },
}

fn default_mu() -> f64 {
    0.01
}
fn default_scaffold_lr() -> f64 {
    0.25
}

impl Strategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Strategy::Fedprox { mu } if !(mu >= 0.0) => {
                Err(FedError::config("proximal weight must be >= 0"))
            }
            Strategy::Scaffold { global_lr } if !(global_lr > 0.0) => {
                Err(FedError::config("scaffold global lr must be > 0"))
            }
            _ => Ok(()),
        }
    }

    /// Multiplier on the server learning rate.
    pub fn server_lr_scale(&self) -> f64 {
        match *self {
            Strategy::Scaffold { global_lr } => global_lr,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    #[default]
    BySamples,
    ByClients,
}

/// Per-client aggregation weights on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights(Vec<f64>);

impl AggregationWeights {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        crate::aggregators::check_simplex(&alpha, alpha.len())?;
        Ok(Self(alpha))
    }

    pub fn from_counts(mode: WeightMode, counts: &[usize]) -> Result<Self> {
        if counts.is_empty() {
            return Err(FedError::Empty("client sample counts"));
        }
        let alpha = match mode {
            WeightMode::ByClients => vec![1.0 / counts.len() as f64; counts.len()],
            WeightMode::BySamples => {
                let total: usize = counts.iter().sum();
                if total == 0 {
                    return Err(FedError::Empty("client samples"));
                }
                counts.iter().map(|&c| c as f64 / total as f64).collect()
            }
        };
        Ok(Self(alpha))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Weights of `subset`, renormalised to sum to one.
    pub fn restricted(&self, subset: &[usize]) -> Vec<f64> {
        let total: f64 = subset.iter().map(|&i| self.0[i]).sum();
        if total > 0.0 {
            subset.iter().map(|&i| self.0[i] / total).collect()
        } else {
            vec![1.0 / subset.len() as f64; subset.len()]
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub data: Dataset,
    pub role: Role,
    /// Trigger used by [`Role::Backdoor`] clients.
    pub backdoor: Option<BackdoorConfig>,
    /// Control variate (SCAFFOLD only).
    pub control: Option<Vec<f64>>,
    rng: ChaCha8Rng,
}

impl ClientState {
    /// Each client draws from its own stream of the training seed.
    pub fn new(id: usize, data: Dataset, role: Role, training_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(training_seed);
        rng.set_stream(id as u64);
        Self {
            id,
            data,
            role,
            backdoor: None,
            control: None,
            rng,
        }
    }

    pub fn with_backdoor(mut self, cfg: BackdoorConfig) -> Self {
        self.backdoor = Some(cfg);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client: usize,
    pub delta: Vec<f64>,
    pub samples: usize,
    /// Mean loss over the local steps.
    pub train_loss: f64,
    pub role: Role,
    /// Change in the control variate (SCAFFOLD only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_delta: Option<Vec<f64>>,
}

fn triggered_batch(data: &Dataset, idx: &[usize], cfg: &BackdoorConfig) -> Option<Batch> {
    let eligible: Vec<usize> = idx
        .iter()
        .copied()
        .filter(|&i| data.samples[i].label != cfg.target)
        .collect();
    let take = (cfg.poison_fraction * eligible.len() as f64).ceil() as usize;
    if take == 0 {
        return None;
    }
    let mut rows = Vec::with_capacity(take * data.dim);
    for &i in &eligible[..take] {
        rows.extend(inject_trigger(&data.samples[i].features, cfg));
    }
    Some(Batch {
        inputs: Matrix {
            rows: take,
            cols: data.dim,
            data: rows,
        },
        labels: vec![cfg.target; take],
    })
}

/// Runs `epochs` passes of mini-batch SGD over `data` from `start`.
///
/// `server_control` enables the SCAFFOLD correction and `backdoor` mixes a
/// triggered loss into each step.
#[allow(clippy::too_many_arguments)]
fn sgd_epochs(
    start: &ModelParams,
    data: &Dataset,
    epochs: usize,
    schedule: &TrainingSchedule,
    prox_mu: f64,
    correction: Option<&[f64]>,
    backdoor: Option<&BackdoorConfig>,
    rng: &mut ChaCha8Rng,
) -> Result<(ModelParams, f64, usize)> {
    if data.is_empty() {
        return Err(FedError::config("client dataset is empty"));
    }
    let sgd = schedule.sgd();
    let mut params = start.clone();
    let mut buffer = MomentumBuffer::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut loss_sum = 0.0;
    let mut steps = 0usize;
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(schedule.batch_size) {
            let batch = data.batch(chunk);
            let lg = forward_loss_grad(&params, &batch)?;
            let mut grad = lg.grads.into_flat();
            let mut step_loss = lg.loss;
            if let Some(cfg) = backdoor {
                if let Some(tb) = triggered_batch(data, chunk, cfg) {
                    let poisoned = forward_loss_grad(&params, &tb)?;
                    vecops::axpy(cfg.tradeoff, poisoned.grads.as_flat(), &mut grad);
                    step_loss += cfg.tradeoff * poisoned.loss;
                }
            }
            if prox_mu > 0.0 {
                let drift = vecops::sub(params.as_flat(), start.as_flat());
                vecops::axpy(prox_mu, &drift, &mut grad);
                step_loss += 0.5 * prox_mu * vecops::dot(&drift, &drift);
            }
            if let Some(c) = correction {
                vecops::axpy(1.0, c, &mut grad);
            }
            sgd_apply(params.as_flat_mut(), &grad, &sgd, &mut buffer)?;
            loss_sum += step_loss;
            steps += 1;
        }
    }
    let mean_loss = if steps > 0 { loss_sum / steps as f64 } else { 0.0 };
    Ok((params, mean_loss, steps))
}

/// Local optimisation of one client from the distributed parameters.
pub fn local_train(
    global: &ModelParams,
    client: &mut ClientState,
    schedule: &TrainingSchedule,
    strategy: &Strategy,
    server_control: Option<&[f64]>,
) -> Result<ClientUpdate> {
    if client.data.is_empty() {
        return Err(FedError::config(format!("client {} has no data", client.id)));
    }
    let n_params = global.len();
    let prox_mu = match *strategy {
        Strategy::Fedprox { mu } => mu,
        _ => 0.0,
    };
    let correction = match strategy {
        Strategy::Scaffold { .. } => {
            let c = server_control
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; n_params]);
            let ci = client.control.get_or_insert_with(|| vec![0.0; n_params]);
            Some(vecops::sub(&c, ci))
        }
        _ => None,
    };
    let backdoor = match client.role {
        Role::Backdoor => client.backdoor.as_ref(),
        _ => None,
    };
    let (local, train_loss, steps) = sgd_epochs(
        global,
        &client.data,
        schedule.local_epochs,
        schedule,
        prox_mu,
        correction.as_deref(),
        backdoor,
        &mut client.rng,
    )?;
    let delta = vecops::sub(local.as_flat(), global.as_flat());
    let control_delta = match (correction, client.control.as_mut()) {
        (Some(corr), Some(ci)) if steps > 0 => {
            // c_i+ = c_i - c + (w - w_i) / (K lr), with K the local step count
            let k_lr = steps as f64 * schedule.lr;
            let change: Vec<f64> = corr
                .iter()
                .zip(&delta)
                .map(|(neg_diff, d)| -neg_diff - d / k_lr)
                .collect();
            vecops::axpy(1.0, &change, ci);
            Some(change)
        }
        (Some(_), Some(_)) => Some(vec![0.0; n_params]),
        _ => None,
    };
    Ok(ClientUpdate {
        client: client.id,
        delta,
        samples: client.data.len(),
        train_loss,
        role: client.role,
        control_delta,
    })
}

/// Server reference update used by trust-bootstrapping: plain local training
/// on the server's root dataset.
pub fn server_reference_update(
    global: &ModelParams,
    root: &Dataset,
    epochs: usize,
    schedule: &TrainingSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let (local, _, _) = sgd_epochs(global, root, epochs, schedule, 0.0, None, None, rng)?;
    Ok(vecops::sub(local.as_flat(), global.as_flat()))
}

/// `(w - α_i w_i) / (1 - α_i)`: the aggregate with client `i` removed.
pub fn leave_one_out(w: &[f64], local_i: &[f64], alpha_i: f64) -> Result<Vec<f64>> {
    if w.len() != local_i.len() {
        return Err(FedError::Dimension {
            expected: w.len(),
            actual: local_i.len(),
            context: "leave-one-out local model",
        });
    }
    if !(0.0..1.0).contains(&alpha_i) {
        return Err(FedError::Undefined(format!(
            "leave-one-out needs a weight in [0, 1), got {alpha_i}"
        )));
    }
    let inv = 1.0 / (1.0 - alpha_i);
    Ok(w.iter()
        .zip(local_i)
        .map(|(a, b)| (a - alpha_i * b) * inv)
        .collect())
}

/// Leave-one-out model for client `i` given every client's local model.
pub fn leave_one_out_model(
    w: &ModelParams,
    locals: &[ModelParams],
    alpha: &[f64],
    i: usize,
) -> Result<ModelParams> {
    let local = locals.get(i).ok_or(FedError::Empty("local model for client"))?;
    let a = *alpha.get(i).ok_or(FedError::Empty("weight for client"))?;
    ModelParams::unflatten(w.dims(), leave_one_out(w.as_flat(), local.as_flat(), a)?)
}

/// Everything that happened in one round, for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub participants: Vec<usize>,
    /// Deltas as submitted, after any adversarial rewrite.
    pub updates: Vec<ClientUpdate>,
    pub outcome: AggregationOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack_gamma: Option<f64>,
    /// α-weighted mean of the participants' declared training losses.
    pub mean_train_loss: f64,
}

/// Server-side components of a federation.
#[derive(Debug, Clone)]
pub struct ServerSetup {
    pub aggregator: AggregatorConfig,
    pub server_lr: f64,
    pub server_momentum: f64,
    /// Fraction of clients sampled per round; 1 means everyone.
    pub participation: f64,
    pub poisoner: Option<ModelPoisoner>,
    /// Root dataset for trust bootstrapping.
    pub root: Option<Dataset>,
    pub training_seed: u64,
    pub attack_seed: u64,
}

#[derive(Debug)]
pub struct Federation {
    params: ModelParams,
    clients: Vec<ClientState>,
    schedule: TrainingSchedule,
    strategy: Strategy,
    alpha: AggregationWeights,
    aggregator: Aggregator,
    server_opt: ServerOptimizer,
    server_control: Option<Vec<f64>>,
    participation: f64,
    poisoner: Option<ModelPoisoner>,
    root: Option<Dataset>,
    attack_rng: ChaCha8Rng,
    server_rng: ChaCha8Rng,
    pool: Option<rayon::ThreadPool>,
    round: usize,
    last_locals: Vec<Vec<f64>>,
}

impl Federation {
    pub fn new(
        params: ModelParams,
        clients: Vec<ClientState>,
        schedule: TrainingSchedule,
        strategy: Strategy,
        alpha: AggregationWeights,
        server: ServerSetup,
    ) -> Result<Self> {
        if clients.is_empty() {
            return Err(FedError::Empty("clients"));
        }
        if alpha.as_slice().len() != clients.len() {
            return Err(FedError::Dimension {
                expected: clients.len(),
                actual: alpha.as_slice().len(),
                context: "aggregation weights",
            });
        }
        if !(server.participation > 0.0 && server.participation <= 1.0) {
            return Err(FedError::config("participation must be in (0, 1]"));
        }
        schedule.validate()?;
        strategy.validate()?;
        server.aggregator.validate(clients.len())?;
        if matches!(server.aggregator, AggregatorConfig::Fltrust { .. }) && server.root.is_none() {
            return Err(FedError::config("fltrust needs a root dataset"));
        }
        let server_opt = ServerOptimizer::new(
            server.server_lr * strategy.server_lr_scale(),
            server.server_momentum,
        )?;
        let server_control = matches!(strategy, Strategy::Scaffold { .. }).then(|| vec![0.0; params.len()]);
        let mut server_rng = ChaCha8Rng::seed_from_u64(server.training_seed);
        server_rng.set_stream(u64::MAX);
        Ok(Self {
            params,
            clients,
            schedule,
            strategy,
            alpha,
            aggregator: Aggregator::new(server.aggregator),
            server_opt,
            server_control,
            participation: server.participation,
            poisoner: server.poisoner,
            root: server.root,
            attack_rng: ChaCha8Rng::seed_from_u64(server.attack_seed),
            server_rng,
            pool: None,
            round: 0,
            last_locals: Vec::new(),
        })
    }

    /// Trains clients on a dedicated pool of `threads` workers.
    pub fn with_threads(mut self, threads: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| FedError::config(format!("cannot build worker pool: {e}")))?;
        self.pool = Some(pool);
        Ok(self)
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn alpha(&self) -> &AggregationWeights {
        &self.alpha
    }

    pub fn rounds_done(&self) -> usize {
        self.round
    }

    /// Local models `w + Δ_i` submitted in the most recent round, indexed by
    /// client (absent clients hold `None`).
    pub fn last_local_models(&self) -> Vec<Option<ModelParams>> {
        let mut out = vec![None; self.clients.len()];
        for (i, flat) in self.last_locals.iter().enumerate() {
            if !flat.is_empty() {
                out[i] = ModelParams::unflatten(self.params.dims(), flat.clone()).ok();
            }
        }
        out
    }

    fn sample_participants(&mut self) -> Vec<usize> {
        let m = self.clients.len();
        if self.participation >= 1.0 {
            return (0..m).collect();
        }
        let k = ((self.participation * m as f64).ceil() as usize).clamp(1, m);
        let mut chosen = index::sample(&mut self.server_rng, m, k).into_vec();
        chosen.sort_unstable();
        chosen
    }

    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let round = self.round;
        let participants = self.sample_participants();
        let global = self.params.clone();
        let schedule = self.schedule;
        let strategy = self.strategy;
        let control = self.server_control.clone();

        let mut active: Vec<&mut ClientState> = {
            let mut flags = vec![false; self.clients.len()];
            participants.iter().for_each(|&i| flags[i] = true);
            self.clients
                .iter_mut()
                .zip(flags)
                .filter_map(|(c, f)| f.then_some(c))
                .collect()
        };
        let train = |c: &mut &mut ClientState| {
            local_train(&global, c, &schedule, &strategy, control.as_deref())
        };
        let results: Vec<Result<ClientUpdate>> = match &self.pool {
            Some(pool) => pool.install(|| active.par_iter_mut().map(train).collect()),
            None => active.par_iter_mut().map(train).collect(),
        };
        let mut updates = results.into_iter().collect::<Result<Vec<_>>>()?;
        drop(active);

        if let Some(bad) = updates
            .iter()
            .find(|u| u.role == Role::Honest && !(u.train_loss.is_finite() && vecops::all_finite(&u.delta)))
        {
            return Err(FedError::NonFinite {
                round,
                detail: format!("client {} produced a non-finite local result", bad.client),
            });
        }

        let mut deltas: Vec<Vec<f64>> = updates.iter().map(|u| u.delta.clone()).collect();
        let mut attack_gamma = None;
        if let Some(poisoner) = &self.poisoner {
            let malicious: Vec<bool> = updates.iter().map(|u| u.role == Role::Byzantine).collect();
            attack_gamma = poisoner.rewrite(&mut deltas, &malicious, &mut self.attack_rng)?;
            for (u, d) in updates.iter_mut().zip(&deltas) {
                u.delta.clone_from(d);
            }
        }

        let alpha = self.alpha.restricted(&participants);
        let losses: Vec<f64> = updates.iter().map(|u| u.train_loss).collect();
        let reference = match (self.aggregator.config(), &self.root) {
            (AggregatorConfig::Fltrust { public_epochs, .. }, Some(root)) => Some(server_reference_update(
                &global,
                root,
                *public_epochs,
                &schedule,
                &mut self.server_rng,
            )?),
            _ => None,
        };
        let outcome = self.aggregator.aggregate(
            RoundInputs {
                updates: &deltas,
                alpha: &alpha,
                losses: &losses,
                server_update: reference.as_deref(),
            },
            &mut self.server_rng,
        )?;
        if !vecops::all_finite(&outcome.delta) {
            return Err(FedError::NonFinite {
                round,
                detail: format!("{} produced a non-finite aggregate", self.aggregator.config().name()),
            });
        }

        let mut next = global.to_flat();
        self.server_opt.step(&mut next, &outcome.delta)?;
        if let AggregatorConfig::Crfl { norm_bound, noise } = *self.aggregator.config() {
            let last = round + 1 == schedule.rounds;
            defense_crfl(&mut next, norm_bound, noise, !last, &mut self.server_rng)?;
        }
        if !vecops::all_finite(&next) {
            return Err(FedError::NonFinite {
                round,
                detail: "server step produced non-finite parameters".into(),
            });
        }

        if let Some(c) = self.server_control.as_mut() {
            let share = 1.0 / self.clients.len() as f64;
            for u in &updates {
                if let Some(dc) = &u.control_delta {
                    vecops::axpy(share, dc, c);
                }
            }
        }

        self.last_locals = vec![Vec::new(); self.clients.len()];
        for (&pos, u) in participants.iter().zip(&updates) {
            self.last_locals[pos] = vecops::add(global.as_flat(), &u.delta);
        }
        self.params = ModelParams::unflatten(global.dims(), next)?;
        self.round += 1;
        let mean_train_loss = alpha.iter().zip(&losses).map(|(a, l)| a * l).sum();
        Ok(RoundRecord {
            round,
            participants,
            updates,
            outcome,
            attack_gamma,
            mean_train_loss,
        })
    }
}
