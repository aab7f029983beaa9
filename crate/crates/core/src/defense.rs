//! Server-side reserve-set defense: pretraining on the trusted reserve and
//! post-aggregation retraining with optional adversarial augmentation.

use rand::seq::SliceRandom;

use crate::attack::{awgn, fgsm, pgd, AttackKind, AttackSpec};
use crate::data::LabeledExample;
use crate::error::{Error, Result};
use crate::model::{
    batch_tensor, grad_params, labels_tensor, update_running_stats, Mode, ModelArch, ModelParams,
    OptimizerConfig, OptimizerState,
};
use crate::rng::stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefenseMode {
    Disabled,
    /// Retrain on the clean reserve only.
    NoPoison,
    Fgsm,
    Pgd,
    Awgn,
    /// Each reserve example is augmented with one family from
    /// {FGSM, PGD, AWGN}, chosen uniformly.
    AllAdversarial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefenseConfig {
    pub mode: DefenseMode,
    pub reserve_fraction: f64,
    pub pretrain_epochs: usize,
    /// Reserve minibatch size B_r.
    pub reserve_batch: usize,
    pub optimizer: OptimizerConfig,
    /// Perturbation parameters used by the augmentation modes.
    pub attack: AttackSpec,
    /// Fixed per-round step count; `None` derives one epoch,
    /// ceil(|reserve| / B_r).
    pub steps_override: Option<usize>,
}

impl DefenseConfig {
    pub fn disabled() -> Self {
        Self {
            mode: DefenseMode::Disabled,
            reserve_fraction: 0.05,
            pretrain_epochs: 0,
            reserve_batch: 32,
            optimizer: OptimizerConfig::sgd(0.01),
            attack: AttackSpec::none(),
            steps_override: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reserve_batch == 0 {
            return Err(Error::InvalidArgument("reserve batch must be >= 1".into()));
        }
        self.attack.validate()
    }

    /// Retraining steps per round.
    pub fn steps(&self, reserve_len: usize) -> usize {
        self.steps_override
            .unwrap_or_else(|| reserve_len.div_ceil(self.reserve_batch))
    }
}

/// A few clean epochs over the reserve before round 0.
pub fn pretrain(
    arch: &ModelArch,
    params: &mut ModelParams,
    reserve: &[LabeledExample],
    config: &DefenseConfig,
    seed: u64,
) -> Result<()> {
    config.validate()?;
    if config.pretrain_epochs == 0 {
        return Ok(());
    }
    if reserve.is_empty() {
        return Err(Error::EmptyDataset("pretrain on empty reserve".into()));
    }
    let mut opt = OptimizerState::new(config.optimizer.clone());
    let mut rng = stream(seed, &[0xde, 0]);
    let mut order: Vec<usize> = (0..reserve.len()).collect();
    for _ in 0..config.pretrain_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.reserve_batch) {
            let refs: Vec<&LabeledExample> = chunk.iter().map(|&i| &reserve[i]).collect();
            let x = batch_tensor(&refs)?;
            let y = labels_tensor(&refs);
            let out = grad_params(arch, params, &x, &y, Mode::Train, 0.0, Some(&mut rng))?;
            update_running_stats(params, &out.batch_stats)?;
            opt.apply(params, &out.grads)?;
        }
    }
    Ok(())
}

/// Pair every clean example with a perturbed copy (labels duplicated).
/// `NoPoison` returns the batch unchanged.
pub fn augment_batch(
    arch: &ModelArch,
    params: &ModelParams,
    batch: &Tensor,
    labels: &Tensor,
    config: &DefenseConfig,
    rng: &mut dyn rand::RngCore,
) -> Result<(Tensor, Tensor)> {
    use rand::Rng;
    let adv = match config.mode {
        DefenseMode::Disabled | DefenseMode::NoPoison => {
            return Ok((batch.clone(), labels.clone()))
        }
        DefenseMode::Fgsm => fgsm(arch, params, batch, labels, &with_kind(config, AttackKind::Fgsm))?,
        DefenseMode::Pgd => pgd(
            arch,
            params,
            batch,
            labels,
            &with_kind(config, AttackKind::Pgd),
            rng,
        )?,
        DefenseMode::Awgn => awgn(batch, &with_kind(config, AttackKind::Awgn), rng)?,
        DefenseMode::AllAdversarial => {
            let b = batch.shape()[0];
            let per = batch.len() / b;
            let mut out = batch.clone();
            for i in 0..b {
                let mut shape = vec![1];
                shape.extend_from_slice(&batch.shape()[1..]);
                let x = Tensor::new(shape, batch.data()[i * per..(i + 1) * per].to_vec())?;
                let y = Tensor::from_vec(vec![labels.data()[i]]);
                let sub = match rng.gen_range(0..3u8) {
                    0 => fgsm(arch, params, &x, &y, &with_kind(config, AttackKind::Fgsm))?,
                    1 => pgd(
                        arch,
                        params,
                        &x,
                        &y,
                        &with_kind(config, AttackKind::Pgd),
                        rng,
                    )?,
                    _ => awgn(&x, &with_kind(config, AttackKind::Awgn), rng)?,
                };
                out.data_mut()[i * per..(i + 1) * per].copy_from_slice(sub.data());
            }
            out
        }
    };
    let mut data = batch.data().to_vec();
    data.extend_from_slice(adv.data());
    let mut shape = batch.shape().to_vec();
    shape[0] *= 2;
    let doubled = Tensor::new(shape, data)?;
    let mut ydata = labels.data().to_vec();
    ydata.extend_from_slice(labels.data());
    Ok((doubled, Tensor::from_vec(ydata)))
}

fn with_kind(config: &DefenseConfig, kind: AttackKind) -> AttackSpec {
    AttackSpec {
        kind,
        ..config.attack
    }
}

/// Post-aggregation reserve retraining: exactly `config.steps(|reserve|)`
/// optimizer steps on augmented reserve minibatches. `Disabled` is a bitwise
/// pass-through.
pub fn reserve_retrain(
    arch: &ModelArch,
    params: &mut ModelParams,
    reserve: &[LabeledExample],
    config: &DefenseConfig,
    opt: &mut OptimizerState,
    rng: &mut dyn rand::RngCore,
) -> Result<()> {
    config.validate()?;
    if config.mode == DefenseMode::Disabled {
        return Ok(());
    }
    if reserve.is_empty() {
        return Err(Error::EmptyDataset("retrain on empty reserve".into()));
    }
    let steps = config.steps(reserve.len());
    let mut order: Vec<usize> = (0..reserve.len()).collect();
    order.shuffle(rng);
    let mut cursor = 0usize;
    for _ in 0..steps {
        if cursor >= order.len() {
            order.shuffle(rng);
            cursor = 0;
        }
        let end = (cursor + config.reserve_batch).min(order.len());
        let refs: Vec<&LabeledExample> = order[cursor..end].iter().map(|&i| &reserve[i]).collect();
        cursor = end;
        let x = batch_tensor(&refs)?;
        let y = labels_tensor(&refs);
        let (xa, ya) = augment_batch(arch, params, &x, &y, config, rng)?;
        let out = grad_params(arch, params, &xa, &ya, Mode::Train, 0.0, Some(rng))?;
        update_running_stats(params, &out.batch_stats)?;
        opt.apply(params, &out.grads)?;
    }
    Ok(())
}
