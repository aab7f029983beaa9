//! The `theory-verify` command: reads contraction-bound parameters from a
//! key=value file, runs the Monte Carlo verifier on the synthetic quadratic
//! federation, and writes a text report plus a CSV.

use std::path::Path;

use specfed_core::theory::{self, ContractionReport, QuadraticFederation, TheoryParams};

use crate::config::{CliError, KeyValues, Result};

const KNOWN_KEYS: &[&str] = &[
    "theory.l",
    "theory.mu",
    "theory.sigma_g2",
    "theory.zeta2",
    "theory.sigma_r2",
    "theory.eps_r",
    "theory.gamma",
    "theory.rho",
    "theory.clients",
    "theory.sampled",
    "theory.tau",
    "theory.eta",
    "theory.gamma_r",
    "theory.reserve_steps",
    "theory.a",
    "theory.c_s",
    "verify.dim",
    "verify.rounds",
    "verify.trials",
    "verify.seed",
];

fn num<T: std::str::FromStr>(kv: &KeyValues, key: &str, default: T) -> Result<T> {
    match kv.get(key) {
        None => Ok(default),
        Some(s) => s
            .parse()
            .map_err(|_| CliError::Config(format!("bad value for {key}: `{s}`"))),
    }
}

#[derive(Debug, Clone)]
pub struct VerifySpec {
    pub params: TheoryParams,
    pub dim: usize,
    pub rounds: usize,
    pub trials: usize,
    pub seed: u64,
}

impl VerifySpec {
    pub fn resolve(kv: &KeyValues) -> Result<Self> {
        for key in kv.keys() {
            if !KNOWN_KEYS.contains(&key) {
                return Err(CliError::Config(format!("unknown key `{key}`")));
            }
        }
        let params = TheoryParams {
            l: num(kv, "theory.l", 4.0)?,
            mu: num(kv, "theory.mu", 1.0)?,
            sigma_g2: num(kv, "theory.sigma_g2", 0.01)?,
            zeta2: num(kv, "theory.zeta2", 0.01)?,
            sigma_r2: num(kv, "theory.sigma_r2", 0.01)?,
            eps_r: num(kv, "theory.eps_r", 0.05)?,
            gamma_bias: num(kv, "theory.gamma", 0.05)?,
            rho: num(kv, "theory.rho", 0.5)?,
            n: num(kv, "theory.clients", 10)?,
            m: num(kv, "theory.sampled", 6)?,
            tau: num(kv, "theory.tau", 5)?,
            eta: num(kv, "theory.eta", 0.05)?,
            gamma_r: num(kv, "theory.gamma_r", 0.25)?,
            r: num(kv, "theory.reserve_steps", 3)?,
            a: num(kv, "theory.a", 0.5)?,
            c_s: num(kv, "theory.c_s", 1.0)?,
        };
        params
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(Self {
            params,
            dim: num(kv, "verify.dim", 8)?,
            rounds: num(kv, "verify.rounds", 50)?,
            trials: num(kv, "verify.trials", 1000)?,
            seed: num(kv, "verify.seed", 0)?,
        })
    }
}

pub fn run_verify(spec: &VerifySpec) -> Result<ContractionReport> {
    let fed = QuadraticFederation::new(spec.dim, &spec.params, spec.seed)?;
    let report =
        theory::verify_contraction(&fed, &spec.params, spec.rounds, spec.trials, spec.seed)?;
    Ok(report)
}

/// Write `report.txt` and `report.csv`; error with exit code 3 semantics
/// if any round violated the bound.
pub fn verify_to_dir(spec: &VerifySpec, out_dir: &Path) -> Result<ContractionReport> {
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::Runtime(e.to_string()))?;
    let report = run_verify(spec)?;
    let mut text = report.to_text_table();
    text.push_str(&format!(
        "steady_state_gap = {:.6e}\nfixed_point = {:.6e}\nall_pass = {}\n",
        report.steady_state_gap(),
        report.c_prime / (1.0 - report.q),
        report.all_pass
    ));
    std::fs::write(out_dir.join("report.txt"), text)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(out_dir.join("report.csv"), report.to_csv())
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(report)
}
