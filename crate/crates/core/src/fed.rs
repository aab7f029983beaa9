//! Synchronous federated training engine: client sampling, local training
//! (clean or poisoned), data-size-weighted aggregation, and round
//! orchestration with the server-side reserve defense.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::attack::AttackSpec;
use crate::data::{ClientShard, LabeledExample};
use crate::defense::{reserve_retrain, DefenseConfig, DefenseMode};
use crate::error::{Error, Result};
use crate::model::{
    batch_tensor, evaluate_dataset, grad_params, labels_tensor, update_running_stats, Mode,
    ModelArch, ModelParams, OptimizerConfig, OptimizerState,
};
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq)]
pub struct FedConfig {
    /// Total clients N.
    pub num_clients: usize,
    /// Sampling fraction C; m = round(C * N) clients participate per round.
    pub sample_fraction: f64,
    /// Local optimizer steps per selected client per round.
    pub local_steps: usize,
    pub batch_size: usize,
    pub rounds: usize,
    /// Fraction of clients designated adversarial; |A| = ceil(rho * N).
    pub adversarial_fraction: f64,
    pub attack: AttackSpec,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl FedConfig {
    /// Clients sampled per round.
    pub fn m(&self) -> usize {
        (self.sample_fraction * self.num_clients as f64).round() as usize
    }

    pub fn adversary_count(&self) -> usize {
        (self.adversarial_fraction * self.num_clients as f64).ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "need at least one client and batch size >= 1".into(),
            ));
        }
        let m = self.m();
        if m < 1 || m > self.num_clients {
            return Err(Error::InvalidArgument(format!(
                "sample fraction {} gives m={m} outside [1, {}]",
                self.sample_fraction, self.num_clients
            )));
        }
        if !(0.0..=1.0).contains(&self.adversarial_fraction) {
            return Err(Error::InvalidArgument(
                "adversarial fraction must be in [0, 1]".into(),
            ));
        }
        self.attack.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    /// 1-based round index.
    pub round: usize,
    pub selected: Vec<usize>,
    /// Fraction of this round's participants that are adversarial.
    pub beta: f64,
    /// Test metrics of the raw aggregate, before the defense runs.
    pub aggregate_loss: f64,
    pub aggregate_accuracy: f64,
    /// Test metrics of the broadcast (post-defense) model.
    pub test_loss: f64,
    pub test_accuracy: f64,
    /// Parameter digests proving which model was broadcast.
    pub aggregate_hash: u64,
    pub broadcast_hash: u64,
}

/// FNV-1a digest over the raw parameter bytes.
pub fn params_hash(params: &ModelParams) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for (name, t) in params.iter() {
        for b in name.as_bytes() {
            h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
        }
        for v in t.data() {
            for b in v.to_le_bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100000001b3);
            }
        }
    }
    h
}

/// Fixed adversarial subset of size ceil(rho * N), uniform per seed.
pub fn designate_adversaries(num_clients: usize, rho: f64, seed: u64) -> Vec<usize> {
    let count = (rho * num_clients as f64).ceil() as usize;
    let mut ids: Vec<usize> = (0..num_clients).collect();
    let mut rng = stream(seed, &[0xad]);
    ids.shuffle(&mut rng);
    let mut chosen: Vec<usize> = ids.into_iter().take(count).collect();
    chosen.sort_unstable();
    chosen
}

/// Uniform m-subset of clients, sorted.
pub fn sample_clients(
    num_clients: usize,
    m: usize,
    rng: &mut dyn rand::RngCore,
) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..num_clients).collect();
    ids.shuffle(rng);
    let mut chosen: Vec<usize> = ids.into_iter().take(m).collect();
    chosen.sort_unstable();
    chosen
}

/// Without-replacement minibatch cursor that reshuffles on exhaustion.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    fn new(n: usize, rng: &mut dyn rand::RngCore) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, cursor: 0 }
    }

    fn next(&mut self, batch: usize, rng: &mut dyn rand::RngCore) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let end = (self.cursor + batch).min(self.order.len());
        let out = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        out
    }
}

/// Tau local optimizer steps from the broadcast model; poisons every
/// minibatch first iff the shard is adversarial. The client RNG stream is
/// keyed on (master seed, round, client id) so concurrent and sequential
/// schedules agree bitwise.
pub fn local_train(
    arch: &ModelArch,
    shard: &ClientShard,
    global: &ModelParams,
    config: &FedConfig,
    round: usize,
) -> Result<ModelParams> {
    if shard.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "client {} has no data",
            shard.client_id
        )));
    }
    let mut params = global.clone();
    let mut opt = OptimizerState::new(config.optimizer.clone());
    let mut rng = stream(config.seed, &[0xfe, round as u64, shard.client_id as u64]);
    let mut sampler = BatchSampler::new(shard.len(), &mut rng);
    for _ in 0..config.local_steps {
        let idx = sampler.next(config.batch_size, &mut rng);
        let refs: Vec<&LabeledExample> = idx.iter().map(|&i| &shard.examples[i]).collect();
        let mut x = batch_tensor(&refs)?;
        let y = labels_tensor(&refs);
        if shard.adversarial {
            x = crate::attack::poison_batch(arch, &params, &x, &y, &config.attack, &mut rng)?;
        }
        let out = grad_params(arch, &params, &x, &y, Mode::Train, config.optimizer.weight_decay, Some(&mut rng))?;
        update_running_stats(&mut params, &out.batch_stats)?;
        opt.apply(&mut params, &out.grads)?;
    }
    Ok(params)
}

/// Data-size-weighted parameter average.
pub fn fedavg(updates: &[(ModelParams, usize)]) -> Result<ModelParams> {
    if updates.is_empty() {
        return Err(Error::InvalidArgument("fedavg with no updates".into()));
    }
    let total: usize = updates.iter().map(|(_, d)| d).sum();
    if total == 0 || updates.iter().any(|(_, d)| *d == 0) {
        return Err(Error::InvalidArgument(
            "fedavg requires every client size >= 1".into(),
        ));
    }
    let mut out = updates[0].0.zeros_like();
    for (params, d) in updates {
        out.axpy(*d as f64 / total as f64, params)?;
    }
    Ok(out)
}

pub struct FedState {
    pub arch: ModelArch,
    pub params: ModelParams,
    pub shards: Vec<ClientShard>,
    pub adversaries: Vec<usize>,
    pub server_opt: OptimizerState,
    pub round: usize,
}

impl FedState {
    /// Marks the adversarial shards and prepares the server optimizer.
    pub fn new(
        arch: ModelArch,
        params: ModelParams,
        mut shards: Vec<ClientShard>,
        config: &FedConfig,
        defense: &DefenseConfig,
    ) -> Result<Self> {
        config.validate()?;
        defense.validate()?;
        if shards.len() != config.num_clients {
            return Err(Error::InvalidArgument(format!(
                "{} shards for {} clients",
                shards.len(),
                config.num_clients
            )));
        }
        let adversaries =
            designate_adversaries(config.num_clients, config.adversarial_fraction, config.seed);
        for shard in &mut shards {
            shard.adversarial = adversaries.binary_search(&shard.client_id).is_ok();
        }
        Ok(Self {
            arch,
            params,
            shards,
            adversaries,
            server_opt: OptimizerState::new(defense.optimizer.clone()),
            round: 0,
        })
    }
}

fn train_selected(
    state: &FedState,
    config: &FedConfig,
    selected: &[usize],
    parallel: bool,
) -> Result<Vec<(ModelParams, usize)>> {
    let job = |&cid: &usize| -> Result<(ModelParams, usize)> {
        let shard = &state.shards[cid];
        let trained = local_train(&state.arch, shard, &state.params, config, state.round)?;
        Ok((trained, shard.len()))
    };
    if parallel {
        selected.par_iter().map(job).collect()
    } else {
        selected.iter().map(job).collect()
    }
}

/// One protocol round: sample, locally train, aggregate, defend, evaluate.
pub fn run_round(
    state: &mut FedState,
    config: &FedConfig,
    defense: &DefenseConfig,
    reserve: &[LabeledExample],
    test: &[LabeledExample],
) -> Result<RoundRecord> {
    let mut round_rng = stream(config.seed, &[0xc1, state.round as u64]);
    let selected = sample_clients(config.num_clients, config.m(), &mut round_rng);
    let beta = selected
        .iter()
        .filter(|c| state.adversaries.binary_search(c).is_ok())
        .count() as f64
        / selected.len() as f64;

    let updates = train_selected(state, config, &selected, true)?;
    let aggregate = fedavg(&updates)?;
    let (aggregate_loss, aggregate_accuracy) =
        evaluate_dataset(&state.arch, &aggregate, test, 64)?;
    let aggregate_hash = params_hash(&aggregate);

    let mut broadcast = aggregate;
    if defense.mode != DefenseMode::Disabled {
        let mut defense_rng = stream(config.seed, &[0xd3, state.round as u64]);
        reserve_retrain(
            &state.arch,
            &mut broadcast,
            reserve,
            defense,
            &mut state.server_opt,
            &mut defense_rng,
        )?;
    }
    let (test_loss, test_accuracy) = evaluate_dataset(&state.arch, &broadcast, test, 64)?;
    let broadcast_hash = params_hash(&broadcast);
    state.params = broadcast;
    state.round += 1;

    Ok(RoundRecord {
        round: state.round,
        selected,
        beta,
        aggregate_loss,
        aggregate_accuracy,
        test_loss,
        test_accuracy,
        aggregate_hash,
        broadcast_hash,
    })
}
