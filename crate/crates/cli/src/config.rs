//! Flat key=value configuration: parsing, profile defaults, and manifest
//! emission. Every key has a default; the manifest lists all resolved values
//! so no setting is hidden.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use specfed_core::attack::{AttackKind, AttackSpec};
use specfed_core::data::PartitionMode;
use specfed_core::defense::{DefenseConfig, DefenseMode};
use specfed_core::fed::FedConfig;
use specfed_core::model::{ModelArch, OptimizerConfig, OptimizerKind};
use specfed_core::signal::SignalConfig;

#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration or arguments (exit code 1).
    Config(String),
    /// Component failure during execution (exit code 2).
    Runtime(String),
    /// The contraction bound was violated (exit code 3).
    BoundViolation,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
            CliError::BoundViolation => write!(f, "contraction bound violated"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<specfed_core::Error> for CliError {
    fn from(e: specfed_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::BoundViolation => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Parsed `key=value` lines; `#` starts a comment.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    map: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1))
            })?;
            let key = key.trim().to_string();
            if map.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(CliError::Config(format!("duplicate key `{key}`")));
            }
        }
        Ok(Self { map })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(CliError::Config(format!(
                "unknown profile `{other}` (expected desk or paper)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic,
    WavDir(PathBuf),
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub profile: Profile,
    pub source: DataSource,
    pub classes: usize,
    pub per_class: usize,
    pub waveform_len: usize,
    pub snr_db: f64,
    pub freq_jitter: f64,
    pub signal: SignalConfig,
    pub partition_mode: PartitionMode,
    pub fed: FedConfig,
    pub defense: DefenseConfig,
    pub dropout: f64,
    pub test_fraction: f64,
}

/// The full key set; anything else in a config file is rejected.
const KNOWN_KEYS: &[&str] = &[
    "seed",
    "data.source",
    "data.wav_dir",
    "data.classes",
    "data.per_class",
    "data.waveform_len",
    "data.snr_db",
    "data.jitter",
    "signal.sample_rate",
    "signal.window",
    "signal.hop",
    "signal.fft",
    "signal.bound",
    "partition.mode",
    "partition.alpha",
    "fed.clients",
    "fed.sample_fraction",
    "fed.local_steps",
    "fed.batch",
    "fed.rounds",
    "fed.rho",
    "attack.kind",
    "attack.epsilon",
    "attack.iterations",
    "attack.sigma",
    "optimizer.kind",
    "optimizer.lr",
    "optimizer.decay_rate",
    "optimizer.decay_steps",
    "optimizer.weight_decay",
    "defense.mode",
    "defense.reserve_fraction",
    "defense.pretrain_epochs",
    "defense.batch",
    "defense.lr",
    "defense.steps",
    "model.dropout",
    "test.fraction",
];

/// One-line documentation per key, surfaced by `--help`.
pub fn key_docs() -> Vec<(&'static str, &'static str)> {
    vec![
        ("seed", "master seed; --seed overrides"),
        ("data.source", "synthetic | wav"),
        ("data.wav_dir", "directory of <label>_*.wav files (source=wav)"),
        ("data.classes", "synthetic class count K"),
        ("data.per_class", "synthetic examples per class"),
        ("data.waveform_len", "synthetic utterance length in samples"),
        ("data.snr_db", "synthetic signal-to-noise ratio in dB"),
        ("data.jitter", "synthetic per-example frequency jitter in [0, 1)"),
        ("signal.sample_rate", "sample rate in Hz"),
        ("signal.window", "analysis window length"),
        ("signal.hop", "frame hop"),
        ("signal.fft", "FFT size (power of two)"),
        ("signal.bound", "admissible box half-width c"),
        ("partition.mode", "iid | dirichlet"),
        ("partition.alpha", "Dirichlet concentration"),
        ("fed.clients", "client count N"),
        ("fed.sample_fraction", "per-round sampling fraction C"),
        ("fed.local_steps", "local optimizer steps tau"),
        ("fed.batch", "client minibatch size B"),
        ("fed.rounds", "communication rounds R"),
        ("fed.rho", "adversarial client fraction"),
        ("attack.kind", "none | fgsm | pgd | awgn | mixed"),
        ("attack.epsilon", "l-inf budget"),
        ("attack.iterations", "PGD iterations"),
        ("attack.sigma", "AWGN standard deviation"),
        ("optimizer.kind", "sgd | adam (clients and server)"),
        ("optimizer.lr", "initial learning rate"),
        ("optimizer.decay_rate", "exponential decay factor"),
        ("optimizer.decay_steps", "steps per decay period"),
        ("optimizer.weight_decay", "L2 coefficient on weight tensors"),
        ("defense.mode", "disabled | nopoison | fgsm | pgd | awgn | all"),
        ("defense.reserve_fraction", "reserve share per class"),
        ("defense.pretrain_epochs", "clean reserve epochs before round 0"),
        ("defense.batch", "reserve minibatch size B_r"),
        ("defense.lr", "server learning rate"),
        ("defense.steps", "retraining steps per round (default: one epoch)"),
        ("model.dropout", "dropout probability after the dense layer"),
        ("test.fraction", "global held-out test share"),
    ]
}

fn parse_num<T: std::str::FromStr>(kv: &KeyValues, key: &str, default: T) -> Result<T> {
    match kv.get(key) {
        None => Ok(default),
        Some(s) => s
            .parse()
            .map_err(|_| CliError::Config(format!("bad value for {key}: `{s}`"))),
    }
}

impl ExperimentConfig {
    /// Profile defaults overlaid with the config file, then the seed flag.
    pub fn resolve(kv: &KeyValues, profile: Profile, seed_flag: Option<u64>) -> Result<Self> {
        for key in kv.keys() {
            if !KNOWN_KEYS.contains(&key) {
                return Err(CliError::Config(format!("unknown key `{key}`")));
            }
        }
        let desk = profile == Profile::Desk;
        let seed = seed_flag.unwrap_or(parse_num(kv, "seed", 0u64)?);

        let source = match kv.get("data.source").unwrap_or("synthetic") {
            "synthetic" => DataSource::Synthetic,
            "wav" => {
                let dir = kv.get("data.wav_dir").ok_or_else(|| {
                    CliError::Config("data.source=wav requires data.wav_dir".into())
                })?;
                DataSource::WavDir(PathBuf::from(dir))
            }
            other => return Err(CliError::Config(format!("unknown data.source `{other}`"))),
        };
        let classes = parse_num(kv, "data.classes", if desk { 4 } else { 10 })?;
        let per_class = parse_num(kv, "data.per_class", if desk { 150 } else { 3000 })?;

        let window = parse_num(kv, "signal.window", if desk { 64 } else { 1024 })?;
        let hop = parse_num(kv, "signal.hop", if desk { 32 } else { 512 })?;
        let fft = parse_num(kv, "signal.fft", if desk { 64 } else { 1024 })?;
        // default utterance length gives 16 frames
        let waveform_len = parse_num(kv, "data.waveform_len", window + 15 * hop)?;
        let signal = SignalConfig::new(
            parse_num(kv, "signal.sample_rate", 8000.0)?,
            window,
            hop,
            fft,
            parse_num(kv, "signal.bound", 3.0)?,
        )?;

        let partition_mode = match kv.get("partition.mode").unwrap_or("dirichlet") {
            "iid" => PartitionMode::Iid,
            "dirichlet" => PartitionMode::Dirichlet {
                alpha: parse_num(kv, "partition.alpha", 0.5)?,
            },
            other => {
                return Err(CliError::Config(format!("unknown partition.mode `{other}`")))
            }
        };

        let attack_kind = match kv.get("attack.kind").unwrap_or("pgd") {
            "none" => AttackKind::None,
            "fgsm" => AttackKind::Fgsm,
            "pgd" => AttackKind::Pgd,
            "awgn" => AttackKind::Awgn,
            "mixed" => AttackKind::MixedAll,
            other => return Err(CliError::Config(format!("unknown attack.kind `{other}`"))),
        };
        let attack = AttackSpec {
            kind: attack_kind,
            epsilon: parse_num(kv, "attack.epsilon", if desk { 2.0 } else { 0.02 })?,
            iterations: parse_num(kv, "attack.iterations", if desk { 5 } else { 50 })?,
            sigma: parse_num(kv, "attack.sigma", 0.03)?,
            admissible_bound: signal.admissible_bound,
        };

        let opt_kind = match kv.get("optimizer.kind").unwrap_or("adam") {
            "sgd" => OptimizerKind::Sgd,
            "adam" => OptimizerKind::Adam,
            other => return Err(CliError::Config(format!("unknown optimizer.kind `{other}`"))),
        };
        let optimizer = OptimizerConfig {
            kind: opt_kind,
            initial_lr: parse_num(kv, "optimizer.lr", if desk { 1e-3 } else { 1e-4 })?,
            decay_rate: parse_num(kv, "optimizer.decay_rate", 0.9)?,
            decay_steps: parse_num(kv, "optimizer.decay_steps", 1000.0)?,
            weight_decay: parse_num(kv, "optimizer.weight_decay", 1e-4)?,
        };

        let fed = FedConfig {
            num_clients: parse_num(kv, "fed.clients", 10)?,
            sample_fraction: parse_num(kv, "fed.sample_fraction", 0.6)?,
            local_steps: parse_num(kv, "fed.local_steps", 10)?,
            batch_size: parse_num(kv, "fed.batch", 16)?,
            rounds: parse_num(kv, "fed.rounds", if desk { 20 } else { 100 })?,
            adversarial_fraction: parse_num(kv, "fed.rho", 0.5)?,
            attack,
            optimizer: optimizer.clone(),
            seed,
        };

        let defense_mode = match kv.get("defense.mode").unwrap_or("disabled") {
            "disabled" => DefenseMode::Disabled,
            "nopoison" => DefenseMode::NoPoison,
            "fgsm" => DefenseMode::Fgsm,
            "pgd" => DefenseMode::Pgd,
            "awgn" => DefenseMode::Awgn,
            "all" => DefenseMode::AllAdversarial,
            other => return Err(CliError::Config(format!("unknown defense.mode `{other}`"))),
        };
        let server_optimizer = OptimizerConfig {
            initial_lr: parse_num(kv, "defense.lr", optimizer.initial_lr)?,
            ..optimizer.clone()
        };
        let defense = DefenseConfig {
            mode: defense_mode,
            reserve_fraction: parse_num(kv, "defense.reserve_fraction", 0.05)?,
            pretrain_epochs: parse_num(kv, "defense.pretrain_epochs", if desk { 5 } else { 3 })?,
            reserve_batch: parse_num(kv, "defense.batch", 32)?,
            optimizer: server_optimizer,
            attack: AttackSpec {
                kind: AttackKind::None, // the mode decides the family
                ..attack
            },
            steps_override: match kv.get("defense.steps") {
                None => if desk { Some(5) } else { None },
                Some(s) => Some(s.parse().map_err(|_| {
                    CliError::Config(format!("bad value for defense.steps: `{s}`"))
                })?),
            },
        };

        let cfg = Self {
            seed,
            profile,
            source,
            classes,
            per_class,
            waveform_len,
            snr_db: parse_num(kv, "data.snr_db", if desk { 0.0 } else { 10.0 })?,
            freq_jitter: parse_num(kv, "data.jitter", if desk { 0.35 } else { 0.0 })?,
            signal,
            partition_mode,
            fed,
            defense,
            dropout: parse_num(kv, "model.dropout", 0.3)?,
            test_fraction: parse_num(kv, "test.fraction", 0.2)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.fed
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.defense
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if !(0.0..1.0).contains(&self.test_fraction) || self.test_fraction == 0.0 {
            return Err(CliError::Config("test.fraction must be in (0, 1)".into()));
        }
        if self.classes < 2 {
            return Err(CliError::Config("data.classes must be >= 2".into()));
        }
        Ok(())
    }

    pub fn arch(&self) -> ModelArch {
        let bins = self.signal.num_bins();
        // frames for the default synthetic utterance length
        let frames =
            (self.waveform_len - self.signal.window_length) / self.signal.hop + 1;
        let mut arch = match self.profile {
            Profile::Desk => ModelArch::desk(self.classes, bins, frames),
            Profile::Paper => ModelArch::paper(self.classes, bins, frames),
        };
        arch.dropout_p = self.dropout;
        arch
    }

    /// The standard variant label for this defense mode.
    pub fn variant(&self) -> &'static str {
        match self.defense.mode {
            DefenseMode::Disabled => "FedAvg",
            DefenseMode::NoPoison => "Retrain-NoPoison",
            DefenseMode::Fgsm => "Retrain-FGSM",
            DefenseMode::Pgd => "Retrain-PGD",
            DefenseMode::Awgn => "Retrain-AWGN",
            DefenseMode::AllAdversarial => "Retrain-All",
        }
    }

    pub fn attack_label(&self) -> &'static str {
        match self.fed.attack.kind {
            AttackKind::None => "none",
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::Awgn => "awgn",
            AttackKind::MixedAll => "mixed",
        }
    }

    /// Every resolved setting, for the run manifest.
    pub fn resolved_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        push("seed", self.seed.to_string());
        push(
            "profile",
            match self.profile {
                Profile::Desk => "desk".into(),
                Profile::Paper => "paper".into(),
            },
        );
        match &self.source {
            DataSource::Synthetic => push("data.source", "synthetic".into()),
            DataSource::WavDir(d) => {
                push("data.source", "wav".into());
                push("data.wav_dir", d.display().to_string());
            }
        }
        push("data.classes", self.classes.to_string());
        push("data.per_class", self.per_class.to_string());
        push("data.waveform_len", self.waveform_len.to_string());
        push("data.snr_db", self.snr_db.to_string());
        push("data.jitter", self.freq_jitter.to_string());
        push("signal.sample_rate", self.signal.sample_rate.to_string());
        push("signal.window", self.signal.window_length.to_string());
        push("signal.hop", self.signal.hop.to_string());
        push("signal.fft", self.signal.fft_size.to_string());
        push("signal.bound", self.signal.admissible_bound.to_string());
        match self.partition_mode {
            PartitionMode::Iid => push("partition.mode", "iid".into()),
            PartitionMode::Dirichlet { alpha } => {
                push("partition.mode", "dirichlet".into());
                push("partition.alpha", alpha.to_string());
            }
        }
        push("fed.clients", self.fed.num_clients.to_string());
        push("fed.sample_fraction", self.fed.sample_fraction.to_string());
        push("fed.local_steps", self.fed.local_steps.to_string());
        push("fed.batch", self.fed.batch_size.to_string());
        push("fed.rounds", self.fed.rounds.to_string());
        push("fed.rho", self.fed.adversarial_fraction.to_string());
        push("attack.kind", self.attack_label().to_string());
        push("attack.epsilon", self.fed.attack.epsilon.to_string());
        push("attack.iterations", self.fed.attack.iterations.to_string());
        push("attack.sigma", self.fed.attack.sigma.to_string());
        push(
            "optimizer.kind",
            match self.fed.optimizer.kind {
                OptimizerKind::Sgd => "sgd".into(),
                OptimizerKind::Adam => "adam".into(),
            },
        );
        push("optimizer.lr", self.fed.optimizer.initial_lr.to_string());
        push("optimizer.decay_rate", self.fed.optimizer.decay_rate.to_string());
        push("optimizer.decay_steps", self.fed.optimizer.decay_steps.to_string());
        push("optimizer.weight_decay", self.fed.optimizer.weight_decay.to_string());
        push(
            "defense.mode",
            match self.defense.mode {
                DefenseMode::Disabled => "disabled",
                DefenseMode::NoPoison => "nopoison",
                DefenseMode::Fgsm => "fgsm",
                DefenseMode::Pgd => "pgd",
                DefenseMode::Awgn => "awgn",
                DefenseMode::AllAdversarial => "all",
            }
            .into(),
        );
        push("defense.reserve_fraction", self.defense.reserve_fraction.to_string());
        push("defense.pretrain_epochs", self.defense.pretrain_epochs.to_string());
        push("defense.batch", self.defense.reserve_batch.to_string());
        push("defense.lr", self.defense.optimizer.initial_lr.to_string());
        if let Some(steps) = self.defense.steps_override {
            push("defense.steps", steps.to_string());
        }
        push("model.dropout", self.dropout.to_string());
        push("test.fraction", self.test_fraction.to_string());
        push("variant", self.variant().to_string());
        out
    }
}
