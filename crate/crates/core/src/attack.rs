//! Feature-space perturbations (FGSM, PGD, AWGN) used for client-side
//! poisoning and server-side adversarial augmentation. All attacks respect an
//! l-inf budget and the admissible box `[-c, c]`, and are crafted against the
//! eval-mode network so they are deterministic per RNG stream.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{grad_input, ModelArch, ModelParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    None,
    Fgsm,
    Pgd,
    Awgn,
    /// Each example gets one of {FGSM, PGD, AWGN}, chosen uniformly.
    MixedAll,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// l-inf budget for FGSM/PGD.
    pub epsilon: f64,
    /// PGD iteration count; step size is epsilon / iterations.
    pub iterations: usize,
    /// AWGN standard deviation.
    pub sigma: f64,
    /// Admissible box half-width c.
    pub admissible_bound: f64,
}

impl AttackSpec {
    pub fn none() -> Self {
        Self {
            kind: AttackKind::None,
            epsilon: 0.0,
            iterations: 1,
            sigma: 0.0,
            admissible_bound: f64::INFINITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 || self.sigma < 0.0 || self.admissible_bound <= 0.0 {
            return Err(Error::InvalidArgument(
                "attack epsilon/sigma must be >= 0 and bound > 0".into(),
            ));
        }
        if self.kind == AttackKind::Pgd && self.iterations == 0 {
            return Err(Error::InvalidArgument("pgd needs iterations >= 1".into()));
        }
        Ok(())
    }
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clamp `cur` elementwise onto the l-inf ball around `origin` intersected
/// with the admissible box.
fn project(cur: &mut Tensor, origin: &Tensor, epsilon: f64, bound: f64) {
    for (v, &o) in cur.data_mut().iter_mut().zip(origin.data()) {
        *v = v.clamp(o - epsilon, o + epsilon).clamp(-bound, bound);
    }
}

/// One signed gradient-ascent step of size epsilon.
pub fn fgsm(
    arch: &ModelArch,
    params: &ModelParams,
    x: &Tensor,
    y: &Tensor,
    spec: &AttackSpec,
) -> Result<Tensor> {
    spec.validate()?;
    let g = grad_input(arch, params, x, y)?;
    let mut out = x.clone();
    for (v, &gv) in out.data_mut().iter_mut().zip(g.data()) {
        *v += spec.epsilon * sign0(gv);
    }
    project(&mut out, x, spec.epsilon, spec.admissible_bound);
    Ok(out)
}

/// Iterated signed ascent from an explicit starting offset, with projection
/// onto the budget ball and admissible box after every step.
pub fn pgd_from(
    arch: &ModelArch,
    params: &ModelParams,
    x: &Tensor,
    y: &Tensor,
    spec: &AttackSpec,
    start: &Tensor,
) -> Result<Tensor> {
    spec.validate()?;
    if start.shape() != x.shape() {
        return Err(Error::ShapeMismatch("pgd start offset shape".into()));
    }
    let step = spec.epsilon / spec.iterations as f64;
    let mut cur = x.clone();
    cur.axpy(1.0, start);
    project(&mut cur, x, spec.epsilon, spec.admissible_bound);
    for _ in 0..spec.iterations {
        let g = grad_input(arch, params, &cur, y)?;
        for (v, &gv) in cur.data_mut().iter_mut().zip(g.data()) {
            *v += step * sign0(gv);
        }
        project(&mut cur, x, spec.epsilon, spec.admissible_bound);
    }
    Ok(cur)
}

/// PGD with a uniform random start in `[-epsilon, epsilon]` per element.
pub fn pgd(
    arch: &ModelArch,
    params: &ModelParams,
    x: &Tensor,
    y: &Tensor,
    spec: &AttackSpec,
    rng: &mut (impl rand::RngCore + ?Sized),
) -> Result<Tensor> {
    use rand::Rng;
    let start = Tensor::new(
        x.shape().to_vec(),
        (0..x.len())
            .map(|_| {
                if spec.epsilon > 0.0 {
                    rng.gen_range(-spec.epsilon..=spec.epsilon)
                } else {
                    0.0
                }
            })
            .collect(),
    )?;
    pgd_from(arch, params, x, y, spec, &start)
}

/// Additive white Gaussian noise, clipped to the admissible box.
pub fn awgn(
    x: &Tensor,
    spec: &AttackSpec,
    rng: &mut (impl rand::RngCore + ?Sized),
) -> Result<Tensor> {
    spec.validate()?;
    let mut out = x.clone();
    if spec.sigma > 0.0 {
        let normal = Normal::new(0.0, spec.sigma)
            .map_err(|e| Error::InvalidArgument(format!("awgn: {e}")))?;
        for v in out.data_mut() {
            *v += normal.sample(rng);
        }
    }
    let c = spec.admissible_bound;
    for v in out.data_mut() {
        *v = v.clamp(-c, c);
    }
    Ok(out)
}

/// Extract example `i` from a `[B, ...]` batch tensor.
fn example_slice(batch: &Tensor, i: usize) -> Tensor {
    let per = batch.len() / batch.shape()[0];
    let mut shape = vec![1];
    shape.extend_from_slice(&batch.shape()[1..]);
    Tensor::new(shape, batch.data()[i * per..(i + 1) * per].to_vec()).expect("slice shape")
}

/// Perturb a training batch in place of the clean one; labels are untouched.
pub fn poison_batch(
    arch: &ModelArch,
    params: &ModelParams,
    batch: &Tensor,
    labels: &Tensor,
    spec: &AttackSpec,
    rng: &mut (impl rand::RngCore + ?Sized),
) -> Result<Tensor> {
    use rand::Rng;
    spec.validate()?;
    match spec.kind {
        AttackKind::None => Ok(batch.clone()),
        AttackKind::Fgsm => fgsm(arch, params, batch, labels, spec),
        AttackKind::Pgd => pgd(arch, params, batch, labels, spec, rng),
        AttackKind::Awgn => awgn(batch, spec, rng),
        AttackKind::MixedAll => {
            let b = batch.shape()[0];
            let per = batch.len() / b;
            let families: Vec<u8> = (0..b).map(|_| rng.gen_range(0..3u8)).collect();
            let mut out = batch.clone();
            for (i, &fam) in families.iter().enumerate() {
                let x = example_slice(batch, i);
                let y = Tensor::from_vec(vec![labels.data()[i]]);
                let sub = match fam {
                    0 => fgsm(
                        arch,
                        params,
                        &x,
                        &y,
                        &AttackSpec {
                            kind: AttackKind::Fgsm,
                            ..*spec
                        },
                    )?,
                    1 => pgd(
                        arch,
                        params,
                        &x,
                        &y,
                        &AttackSpec {
                            kind: AttackKind::Pgd,
                            ..*spec
                        },
                        rng,
                    )?,
                    _ => awgn(
                        &x,
                        &AttackSpec {
                            kind: AttackKind::Awgn,
                            ..*spec
                        },
                        rng,
                    )?,
                };
                out.data_mut()[i * per..(i + 1) * per].copy_from_slice(sub.data());
            }
            Ok(out)
        }
    }
}
