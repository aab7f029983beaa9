//! End-to-end experiment execution: dataset assembly, the federated training
//! loop with optional reserve retraining, deterministic metrics output, and
//! grid sweeps with resume.

use std::path::{Path, PathBuf};

use specfed_core::data::{
    self, LabeledExample, PartitionSpec, ReserveSet,
};
use specfed_core::defense::{self, DefenseMode};
use specfed_core::fed::{self, FedState, RoundRecord};
use specfed_core::model;

use crate::config::{CliError, DataSource, ExperimentConfig, KeyValues, Profile, Result};

pub const METRICS_HEADER: &str = "round,variant,attack,seed,test_accuracy,test_loss,beta_t";

/// Everything a run needs besides the global model.
pub struct Prepared {
    pub train_shards: Vec<specfed_core::data::ClientShard>,
    pub reserve: ReserveSet,
    pub test: Vec<LabeledExample>,
}

/// Build, split, partition, and carve out the reserve.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Prepared> {
    let all = match &cfg.source {
        DataSource::Synthetic => data::generate_synthetic_with(
            &data::SyntheticSpec {
                num_classes: cfg.classes,
                per_class: cfg.per_class,
                waveform_len: cfg.waveform_len,
                snr_db: cfg.snr_db,
                freq_jitter: cfg.freq_jitter,
            },
            &cfg.signal,
            cfg.seed,
        )?,
        DataSource::WavDir(dir) => data::load_wav_dir(dir, &cfg.signal)?,
    };
    let (train, test) = data::split_train_test(all, cfg.test_fraction, cfg.seed);
    let spec = PartitionSpec {
        mode: cfg.partition_mode,
        num_clients: cfg.fed.num_clients,
        seed: cfg.seed,
    };
    let shards = data::partition(&train, &spec)?;
    let (reserve, train_shards) =
        data::extract_reserve(shards, cfg.defense.reserve_fraction, cfg.seed)?;
    Ok(Prepared {
        train_shards,
        reserve,
        test,
    })
}

pub struct RunOutcome {
    pub records: Vec<RoundRecord>,
    pub final_params: model::ModelParams,
}

/// Run the full protocol in memory and return per-round records.
pub fn run_training(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let prepared = prepare_data(cfg)?;
    let arch = cfg.arch();
    let mut params = model::init_params(&arch, cfg.seed)?;
    if cfg.defense.mode != DefenseMode::Disabled {
        defense::pretrain(&arch, &mut params, &prepared.reserve.examples, &cfg.defense, cfg.seed)?;
    }
    let mut state = FedState::new(arch, params, prepared.train_shards, &cfg.fed, &cfg.defense)?;
    let mut records = Vec::with_capacity(cfg.fed.rounds);
    for _ in 0..cfg.fed.rounds {
        records.push(fed::run_round(
            &mut state,
            &cfg.fed,
            &cfg.defense,
            &prepared.reserve.examples,
            &prepared.test,
        )?);
    }
    Ok(RunOutcome {
        records,
        final_params: state.params,
    })
}

/// Render the metrics CSV: fixed column order, fixed float formatting, LF
/// line endings, no timestamps, so equal runs are byte-equal.
pub fn metrics_csv(cfg: &ExperimentConfig, records: &[RoundRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6}\n",
            r.round,
            cfg.variant(),
            cfg.attack_label(),
            cfg.seed,
            r.test_accuracy,
            r.test_loss,
            r.beta
        ));
    }
    out
}

fn manifest_text(cfg: &ExperimentConfig) -> String {
    let mut out = String::new();
    out.push_str(&format!("version={}\n", env!("CARGO_PKG_VERSION")));
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    out.push_str(&format!("completed_unix={now}\n"));
    for (k, v) in cfg.resolved_pairs() {
        out.push_str(&format!("{k}={v}\n"));
    }
    out
}

/// Execute one configured run into `out_dir`, writing `metrics.csv`, the
/// final checkpoint, and last the completion manifest.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    let outcome = run_training(cfg)?;
    let metrics_path = out_dir.join("metrics.csv");
    std::fs::write(&metrics_path, metrics_csv(cfg, &outcome.records))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    outcome.final_params.save(&out_dir.join("final.ckpt"))?;
    // written last: its presence marks the run as complete for resume
    std::fs::write(out_dir.join("manifest.txt"), manifest_text(cfg))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(metrics_path)
}

/// Dump partitioned client shards without training.
pub fn run_partition(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let prepared = prepare_data(cfg)?;
    let spec = PartitionSpec {
        mode: cfg.partition_mode,
        num_clients: cfg.fed.num_clients,
        seed: cfg.seed,
    };
    data::dump_shards(&prepared.train_shards, &spec, out_dir)?;
    Ok(())
}

/// One cell of a sweep: overrides applied on top of the base file.
#[derive(Debug, Clone)]
pub struct GridCell {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

/// The sweep axes listed in a grid config (`grid.*` keys).
pub struct GridSpec {
    pub variants: Vec<String>,
    pub attacks: Vec<String>,
    pub partitions: Vec<String>,
    pub seeds: Vec<u64>,
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect()
}

const VARIANT_MODES: &[(&str, &str)] = &[
    ("FedAvg", "disabled"),
    ("Retrain-NoPoison", "nopoison"),
    ("Retrain-FGSM", "fgsm"),
    ("Retrain-PGD", "pgd"),
    ("Retrain-AWGN", "awgn"),
    ("Retrain-All", "all"),
];

pub fn defense_mode_for_variant(variant: &str) -> Result<&'static str> {
    VARIANT_MODES
        .iter()
        .find(|(v, _)| *v == variant)
        .map(|(_, m)| *m)
        .ok_or_else(|| CliError::Config(format!("unknown variant `{variant}`")))
}

impl GridSpec {
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let variants = split_list(kv.get("grid.variants").unwrap_or("FedAvg,Retrain-All"));
        for v in &variants {
            defense_mode_for_variant(v)?;
        }
        let attacks = split_list(kv.get("grid.attacks").unwrap_or("pgd"));
        let partitions = split_list(kv.get("grid.partitions").unwrap_or("dirichlet"));
        let seeds = split_list(kv.get("grid.seeds").unwrap_or("0,1,2"))
            .iter()
            .map(|s| {
                s.parse()
                    .map_err(|_| CliError::Config(format!("bad grid seed `{s}`")))
            })
            .collect::<Result<Vec<u64>>>()?;
        if variants.is_empty() || attacks.is_empty() || partitions.is_empty() || seeds.is_empty()
        {
            return Err(CliError::Config("grid axes must be non-empty".into()));
        }
        Ok(Self {
            variants,
            attacks,
            partitions,
            seeds,
        })
    }

    /// Cartesian product in a fixed order.
    pub fn cells(&self) -> Vec<GridCell> {
        let mut cells = Vec::new();
        for variant in &self.variants {
            for attack in &self.attacks {
                for part in &self.partitions {
                    for &seed in &self.seeds {
                        let mode = defense_mode_for_variant(variant).expect("validated");
                        cells.push(GridCell {
                            name: format!("{variant}_{attack}_{part}_s{seed}"),
                            overrides: vec![
                                ("defense.mode".into(), mode.into()),
                                ("attack.kind".into(), attack.clone()),
                                ("partition.mode".into(), part.clone()),
                                ("seed".into(), seed.to_string()),
                            ],
                        });
                    }
                }
            }
        }
        cells
    }
}

pub struct GridOutcome {
    pub completed: Vec<String>,
    pub skipped: Vec<String>,
    pub failed: Vec<(String, String)>,
}

/// Run every cell under `out_dir/<cell>`, skipping cells whose manifest
/// already exists. Failures don't abort the sweep; they are reported at the
/// end.
pub fn run_grid(
    base: &KeyValues,
    profile: Profile,
    out_dir: &Path,
) -> Result<GridOutcome> {
    let spec = GridSpec::from_kv(base)?;
    // strip the grid.* axis keys before per-cell resolution
    let mut base_lines = String::new();
    for key in base.keys() {
        if !key.starts_with("grid.") {
            base_lines.push_str(&format!("{key}={}\n", base.get(key).unwrap()));
        }
    }
    let mut outcome = GridOutcome {
        completed: Vec::new(),
        skipped: Vec::new(),
        failed: Vec::new(),
    };
    for cell in spec.cells() {
        let cell_dir = out_dir.join(&cell.name);
        if cell_dir.join("manifest.txt").exists() {
            outcome.skipped.push(cell.name);
            continue;
        }
        let mut text = base_lines.clone();
        for (k, v) in &cell.overrides {
            text.push_str(&format!("{k}={v}\n"));
        }
        // overrides may repeat base keys; later assignments win here
        let kv = dedup_parse(&text)?;
        match ExperimentConfig::resolve(&kv, profile, None)
            .and_then(|cfg| run_experiment(&cfg, &cell_dir))
        {
            Ok(_) => outcome.completed.push(cell.name),
            Err(e) => outcome.failed.push((cell.name, e.to_string())),
        }
    }
    Ok(outcome)
}

/// Parse with last-assignment-wins semantics (for grid overrides).
fn dedup_parse(text: &str) -> Result<KeyValues> {
    let mut last: std::collections::BTreeMap<&str, &str> = Default::default();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            last.insert(k.trim(), v.trim());
        }
    }
    let joined: String = last
        .iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    KeyValues::parse(&joined)
}
