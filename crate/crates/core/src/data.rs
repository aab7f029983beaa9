//! Dataset production: synthetic labeled audio, WAV ingestion, client
//! partitioning (IID / Dirichlet label-skew), and server reserve extraction.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::signal::{normalize_clip, pad_or_crop, stft, SignalConfig, Spectrogram};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    /// Stable identity assigned at creation; used for disjointness checks.
    pub id: u64,
    pub features: Spectrogram,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct ClientShard {
    pub client_id: usize,
    pub examples: Vec<LabeledExample>,
    pub adversarial: bool,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionMode {
    Iid,
    Dirichlet { alpha: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub num_clients: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct ReserveSet {
    pub examples: Vec<LabeledExample>,
    pub fraction: f64,
}

const MAX_DIRICHLET_REDRAWS: usize = 100;

/// Difficulty knobs for the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub waveform_len: usize,
    /// Signal-to-noise ratio of the additive Gaussian noise, in dB.
    pub snr_db: f64,
    /// Per-example relative frequency jitter; large values make neighboring
    /// classes overlap.
    pub freq_jitter: f64,
}

/// Synthetic stand-in dataset: class `k` is a sinusoid at
/// `f_k = f_s (k+1) / (4K)` plus a chirp harmonic and noise at 10 dB SNR.
pub fn generate_synthetic(
    num_classes: usize,
    per_class: usize,
    waveform_len: usize,
    config: &SignalConfig,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    generate_synthetic_with(
        &SyntheticSpec {
            num_classes,
            per_class,
            waveform_len,
            snr_db: 10.0,
            freq_jitter: 0.0,
        },
        config,
        seed,
    )
}

/// As [`generate_synthetic`], with explicit noise level and frequency jitter.
pub fn generate_synthetic_with(
    spec: &SyntheticSpec,
    config: &SignalConfig,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    let (num_classes, per_class, waveform_len) =
        (spec.num_classes, spec.per_class, spec.waveform_len);
    if num_classes < 2 || per_class < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 classes and 2 examples per class".into(),
        ));
    }
    if spec.freq_jitter < 0.0 || spec.freq_jitter >= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "freq_jitter must be in [0, 1), got {}",
            spec.freq_jitter
        )));
    }
    let fs = config.sample_rate;
    let mut out = Vec::with_capacity(num_classes * per_class);
    let mut id = 0u64;
    for k in 0..num_classes {
        let center = fs * (k + 1) as f64 / (4.0 * num_classes as f64);
        for i in 0..per_class {
            let mut rng = stream(seed, &[0x5b, k as u64, i as u64]);
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let phase2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let base = if spec.freq_jitter > 0.0 {
                center * (1.0 + spec.freq_jitter * rng.gen_range(-1.0..1.0))
            } else {
                center
            };
            let mut wave = Vec::with_capacity(waveform_len);
            for n in 0..waveform_len {
                let t = n as f64 / fs;
                let frac = n as f64 / waveform_len as f64;
                // chirp sweeps from 2*base to 3*base across the utterance
                let chirp_freq = base * (2.0 + frac);
                let v = (std::f64::consts::TAU * base * t + phase).sin()
                    + 0.5 * (std::f64::consts::TAU * chirp_freq * t + phase2).sin();
                wave.push(v);
            }
            let power = wave.iter().map(|v| v * v).sum::<f64>() / waveform_len as f64;
            let noise_sigma = (power / 10.0_f64.powf(spec.snr_db / 10.0)).sqrt();
            let normal = Normal::new(0.0, noise_sigma).unwrap();
            for v in &mut wave {
                *v += normal.sample(&mut rng);
            }
            let spec = normalize_clip(&stft(&Tensor::from_vec(wave), config)?, config);
            out.push(LabeledExample {
                id,
                features: spec,
                label: k,
            });
            id += 1;
        }
    }
    Ok(out)
}

/// Parse a mono 16-bit PCM RIFF file into samples in `[-1, 1]`.
fn parse_wav(path: &Path) -> Result<(Vec<f64>, f64)> {
    let err = |reason: &str| Error::WavFormat {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(err("missing RIFF/WAVE header"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // tag, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let chunk_id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = pos + 8 + size;
        if body_end > bytes.len() {
            return Err(err("truncated chunk"));
        }
        let body = &bytes[pos + 8..body_end];
        match chunk_id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(err("fmt chunk too small"));
                }
                fmt = Some((
                    u16::from_le_bytes(body[0..2].try_into().unwrap()),
                    u16::from_le_bytes(body[2..4].try_into().unwrap()),
                    u32::from_le_bytes(body[4..8].try_into().unwrap()),
                    u16::from_le_bytes(body[14..16].try_into().unwrap()),
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos = body_end + (size & 1); // chunks are word-aligned
    }
    let (tag, channels, rate, bits) = fmt.ok_or_else(|| err("no fmt chunk"))?;
    if tag != 1 {
        return Err(err("only PCM (format tag 1) is supported"));
    }
    if channels != 1 {
        return Err(err("only mono is supported"));
    }
    if bits != 16 {
        return Err(err("only 16-bit samples are supported"));
    }
    let data = data.ok_or_else(|| err("no data chunk"))?;
    let samples = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
        .collect();
    Ok((samples, rate as f64))
}

/// Linear-interpolation resampling.
fn resample(samples: &[f64], from_rate: f64, to_rate: f64) -> Vec<f64> {
    if (from_rate - to_rate).abs() < 1e-9 {
        return samples.to_vec();
    }
    let out_len = ((samples.len() as f64) * to_rate / from_rate).round() as usize;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * from_rate / to_rate;
            let lo = pos.floor() as usize;
            let frac = pos - lo as f64;
            let a = samples[lo.min(samples.len() - 1)];
            let b = samples[(lo + 1).min(samples.len() - 1)];
            a + frac * (b - a)
        })
        .collect()
}

/// Load `<label>_<anything>.wav` files: resample to the configured rate,
/// transform, normalize, and pad/crop every utterance to the directory's
/// median frame count.
pub fn load_wav_dir(dir: &Path, config: &SignalConfig) -> Result<Vec<LabeledExample>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "wav").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyDataset(format!("no .wav files in {}", dir.display())));
    }
    let mut specs = Vec::new();
    for (idx, path) in paths.iter().enumerate() {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default();
        let label: usize = stem
            .split('_')
            .next()
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| Error::WavFormat {
                path: path.display().to_string(),
                reason: "filename must start with `<label>_`".into(),
            })?;
        let (samples, rate) = parse_wav(path)?;
        let samples = resample(&samples, rate, config.sample_rate);
        let spec = normalize_clip(&stft(&Tensor::from_vec(samples), config)?, config);
        specs.push((idx as u64, spec, label));
    }
    let mut frames: Vec<usize> = specs.iter().map(|(_, s, _)| s.frames()).collect();
    frames.sort_unstable();
    let median = frames[frames.len() / 2];
    specs
        .into_iter()
        .map(|(id, spec, label)| {
            Ok(LabeledExample {
                id,
                features: pad_or_crop(&spec, median)?,
                label,
            })
        })
        .collect()
}

fn num_classes(data: &[LabeledExample]) -> usize {
    data.iter().map(|e| e.label).max().map_or(0, |m| m + 1)
}

/// Largest-remainder apportionment of `total` items to `proportions`.
fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    // ties resolved by lower index for determinism
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in 0..total - assigned {
        counts[order[i % order.len()]] += 1;
    }
    counts
}

/// Split a dataset across clients.
pub fn partition(data: &[LabeledExample], spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    let n = spec.num_clients;
    if n == 0 || n > data.len() {
        return Err(Error::Partition(format!(
            "cannot split {} examples across {n} clients",
            data.len()
        )));
    }
    let shards_examples: Vec<Vec<LabeledExample>> = match spec.mode {
        PartitionMode::Iid => {
            let mut rng = stream(spec.seed, &[0x1d]);
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng);
            let base = data.len() / n;
            let rem = data.len() % n;
            let mut shards = vec![Vec::new(); n];
            let mut cursor = 0;
            for (c, shard) in shards.iter_mut().enumerate() {
                let take = base + usize::from(c < rem);
                for &i in &order[cursor..cursor + take] {
                    shard.push(data[i].clone());
                }
                cursor += take;
            }
            shards
        }
        PartitionMode::Dirichlet { alpha } => {
            if alpha <= 0.0 {
                return Err(Error::InvalidArgument("dirichlet alpha must be > 0".into()));
            }
            let k = num_classes(data);
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
            for (i, ex) in data.iter().enumerate() {
                by_class[ex.label].push(i);
            }
            let gamma = Gamma::new(alpha, 1.0)
                .map_err(|e| Error::InvalidArgument(format!("dirichlet: {e}")))?;
            let mut result = None;
            for attempt in 0..MAX_DIRICHLET_REDRAWS {
                let mut rng = stream(spec.seed, &[0xd1, attempt as u64]);
                let mut shards = vec![Vec::new(); n];
                for class_members in &by_class {
                    if class_members.is_empty() {
                        continue;
                    }
                    let mut draws: Vec<f64> =
                        (0..n).map(|_| gamma.sample(&mut rng).max(1e-300)).collect();
                    let total: f64 = draws.iter().sum();
                    for d in &mut draws {
                        *d /= total;
                    }
                    let counts = largest_remainder(&draws, class_members.len());
                    let mut members = class_members.clone();
                    members.shuffle(&mut rng);
                    let mut cursor = 0;
                    for (c, &count) in counts.iter().enumerate() {
                        for &i in &members[cursor..cursor + count] {
                            shards[c].push(data[i].clone());
                        }
                        cursor += count;
                    }
                }
                if shards.iter().all(|s| !s.is_empty()) {
                    result = Some(shards);
                    break;
                }
            }
            result.ok_or_else(|| {
                Error::Partition(format!(
                    "a client remained empty after {MAX_DIRICHLET_REDRAWS} redraws"
                ))
            })?
        }
    };
    Ok(shards_examples
        .into_iter()
        .enumerate()
        .map(|(client_id, examples)| ClientShard {
            client_id,
            examples,
            adversarial: false,
        })
        .collect())
}

/// Move a stratified sample out of the shards into the server reserve.
///
/// Per class, `ceil(fraction * class_count)` (at least 1) examples are drawn
/// uniformly across all shards and removed from them.
pub fn extract_reserve(
    shards: Vec<ClientShard>,
    fraction: f64,
    seed: u64,
) -> Result<(ReserveSet, Vec<ClientShard>)> {
    if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "reserve fraction must be in (0, 1), got {fraction}"
        )));
    }
    // class -> [(shard index, example id)]
    let mut by_class: BTreeMap<usize, Vec<(usize, u64)>> = BTreeMap::new();
    for (si, shard) in shards.iter().enumerate() {
        for ex in &shard.examples {
            by_class.entry(ex.label).or_default().push((si, ex.id));
        }
    }
    let mut selected: Vec<Vec<u64>> = vec![Vec::new(); shards.len()];
    let mut remaining: Vec<usize> = shards.iter().map(|s| s.len()).collect();
    for (&class, members) in &by_class {
        let want = ((fraction * members.len() as f64).ceil() as usize).max(1);
        let mut rng = stream(seed, &[0xe5, class as u64]);
        let mut pool = members.clone();
        pool.shuffle(&mut rng);
        let mut taken = 0;
        for &(si, id) in &pool {
            if taken == want {
                break;
            }
            // never drain a client completely
            if remaining[si] >= 2 {
                selected[si].push(id);
                remaining[si] -= 1;
                taken += 1;
            }
        }
        if taken < want {
            return Err(Error::Partition(format!(
                "cannot reserve {want} examples of class {class} without emptying a client"
            )));
        }
    }
    let mut reserve = Vec::new();
    let mut remaining = Vec::with_capacity(shards.len());
    for (shard, sel) in shards.into_iter().zip(selected) {
        let ClientShard {
            client_id,
            examples,
            adversarial,
        } = shard;
        let mut kept = Vec::with_capacity(examples.len());
        for ex in examples {
            if sel.contains(&ex.id) {
                reserve.push(ex);
            } else {
                kept.push(ex);
            }
        }
        if kept.is_empty() {
            return Err(Error::Partition(format!(
                "client {client_id} left empty by reserve extraction"
            )));
        }
        remaining.push(ClientShard {
            client_id,
            examples: kept,
            adversarial,
        });
    }
    reserve.sort_by_key(|e| e.id);
    Ok((ReserveSet { examples: reserve, fraction }, remaining))
}

/// Hold out a global test split before partitioning.
pub fn split_train_test(
    data: Vec<LabeledExample>,
    test_fraction: f64,
    seed: u64,
) -> (Vec<LabeledExample>, Vec<LabeledExample>) {
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = stream(seed, &[0x7e]);
    order.shuffle(&mut rng);
    let n_test = ((data.len() as f64) * test_fraction).round() as usize;
    let test_idx: std::collections::HashSet<usize> = order[..n_test].iter().copied().collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, ex) in data.into_iter().enumerate() {
        if test_idx.contains(&i) {
            test.push(ex);
        } else {
            train.push(ex);
        }
    }
    (train, test)
}

/// Write shards to disk: one directory per client with a binary tensor file
/// and a label index, plus a top-level manifest.
pub fn dump_shards(
    shards: &[ClientShard],
    spec: &PartitionSpec,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    manifest.push_str(&format!("num_clients={}\n", spec.num_clients));
    manifest.push_str(&format!("seed={}\n", spec.seed));
    match spec.mode {
        PartitionMode::Iid => manifest.push_str("mode=iid\n"),
        PartitionMode::Dirichlet { alpha } => {
            manifest.push_str(&format!("mode=dirichlet\nalpha={alpha}\n"))
        }
    }
    for shard in shards {
        let cdir = dir.join(format!("client_{:03}", shard.client_id));
        std::fs::create_dir_all(&cdir)?;
        let mut bin = std::io::BufWriter::new(std::fs::File::create(cdir.join("features.bin"))?);
        let mut labels = String::new();
        bin.write_all(&(shard.examples.len() as u64).to_le_bytes())?;
        for ex in &shard.examples {
            bin.write_all(&ex.id.to_le_bytes())?;
            bin.write_all(&(ex.features.bins() as u64).to_le_bytes())?;
            bin.write_all(&(ex.features.frames() as u64).to_le_bytes())?;
            for &v in ex.features.tensor().data() {
                bin.write_all(&v.to_le_bytes())?;
            }
            labels.push_str(&format!("{} {}\n", ex.id, ex.label));
        }
        std::fs::write(cdir.join("labels.idx"), labels)?;
        let ids: Vec<String> = shard.examples.iter().map(|e| e.id.to_string()).collect();
        manifest.push_str(&format!(
            "client_{:03}.size={}\nclient_{:03}.ids={}\n",
            shard.client_id,
            shard.examples.len(),
            shard.client_id,
            ids.join(",")
        ));
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SignalConfig {
        SignalConfig::new(8000.0, 64, 32, 64, 3.0).unwrap()
    }

    fn tiny_dataset(per_class: usize) -> Vec<LabeledExample> {
        generate_synthetic(4, per_class, 600, &cfg(), 99).unwrap()
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(3, 4, 600, &cfg(), 5).unwrap();
        let b = generate_synthetic(3, 4, 600, &cfg(), 5).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(3, 4, 600, &cfg(), 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_counts_and_labels() {
        let data = generate_synthetic(4, 30, 600, &cfg(), 1).unwrap();
        assert_eq!(data.len(), 120);
        for k in 0..4 {
            assert_eq!(data.iter().filter(|e| e.label == k).count(), 30);
        }
        // ids unique
        let ids: std::collections::HashSet<u64> = data.iter().map(|e| e.id).collect();
        assert_eq!(ids.len(), 120);
    }

    #[test]
    fn iid_partition_equal_sizes() {
        let data = tiny_dataset(30); // 120 examples
        let shards = partition(
            &data,
            &PartitionSpec {
                mode: PartitionMode::Iid,
                num_clients: 10,
                seed: 3,
            },
        )
        .unwrap();
        assert_eq!(shards.len(), 10);
        assert!(shards.iter().all(|s| s.len() == 12));
    }

    #[test]
    fn single_client_gets_everything() {
        let data = tiny_dataset(3);
        let shards = partition(
            &data,
            &PartitionSpec {
                mode: PartitionMode::Iid,
                num_clients: 1,
                seed: 0,
            },
        )
        .unwrap();
        assert_eq!(shards[0].len(), data.len());
    }

    #[test]
    fn partition_assigns_each_example_once() {
        let data = tiny_dataset(25);
        for mode in [
            PartitionMode::Iid,
            PartitionMode::Dirichlet { alpha: 0.3 },
        ] {
            let shards = partition(
                &data,
                &PartitionSpec {
                    mode,
                    num_clients: 7,
                    seed: 11,
                },
            )
            .unwrap();
            let mut ids: Vec<u64> = shards
                .iter()
                .flat_map(|s| s.examples.iter().map(|e| e.id))
                .collect();
            ids.sort_unstable();
            let mut expect: Vec<u64> = data.iter().map(|e| e.id).collect();
            expect.sort_unstable();
            assert_eq!(ids, expect);
            assert!(shards.iter().all(|s| !s.is_empty()));
        }
    }

    #[test]
    fn dirichlet_high_alpha_is_nearly_uniform() {
        let data = tiny_dataset(50); // 200 total, 50/class
        for seed in 0..20 {
            let shards = partition(
                &data,
                &PartitionSpec {
                    mode: PartitionMode::Dirichlet { alpha: 1e6 },
                    num_clients: 10,
                    seed,
                },
            )
            .unwrap();
            for shard in &shards {
                for k in 0..4 {
                    let frac = shard.examples.iter().filter(|e| e.label == k).count() as f64
                        / shard.len() as f64;
                    assert!(
                        (frac - 0.25).abs() < 0.05,
                        "seed {seed}: class {k} share {frac}"
                    );
                }
            }
        }
    }

    #[test]
    fn dirichlet_heterogeneity_grows_as_alpha_shrinks() {
        let data = tiny_dataset(50);
        let mean_max_share = |alpha: f64| -> f64 {
            let mut total = 0.0;
            let mut count = 0;
            for seed in 0..20 {
                let shards = partition(
                    &data,
                    &PartitionSpec {
                        mode: PartitionMode::Dirichlet { alpha },
                        num_clients: 10,
                        seed,
                    },
                )
                .unwrap();
                for shard in &shards {
                    let max_share = (0..4)
                        .map(|k| {
                            shard.examples.iter().filter(|e| e.label == k).count() as f64
                                / shard.len() as f64
                        })
                        .fold(0.0, f64::max);
                    total += max_share;
                    count += 1;
                }
            }
            total / count as f64
        };
        assert!(mean_max_share(0.1) > mean_max_share(10.0));
    }

    #[test]
    fn partition_is_deterministic() {
        let data = tiny_dataset(20);
        let spec = PartitionSpec {
            mode: PartitionMode::Dirichlet { alpha: 0.5 },
            num_clients: 5,
            seed: 42,
        };
        let a = partition(&data, &spec).unwrap();
        let b = partition(&data, &spec).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.examples, y.examples);
        }
    }

    #[test]
    fn reserve_counts_and_disjointness() {
        let data = tiny_dataset(50); // 50 per class
        let shards = partition(
            &data,
            &PartitionSpec {
                mode: PartitionMode::Iid,
                num_clients: 5,
                seed: 1,
            },
        )
        .unwrap();
        let total_before: usize = shards.iter().map(|s| s.len()).sum();
        let (reserve, shards) = extract_reserve(shards, 0.05, 7).unwrap();
        // ceil(0.05 * 50) = 3 per class
        for k in 0..4 {
            assert_eq!(reserve.examples.iter().filter(|e| e.label == k).count(), 3);
        }
        let total_after: usize = shards.iter().map(|s| s.len()).sum();
        assert_eq!(total_before, total_after + reserve.examples.len());
        let reserve_ids: std::collections::HashSet<u64> =
            reserve.examples.iter().map(|e| e.id).collect();
        for shard in &shards {
            assert!(shard.examples.iter().all(|e| !reserve_ids.contains(&e.id)));
        }
    }

    #[test]
    fn reserve_exact_five_percent_of_200() {
        // 200 of one class -> exactly 10 reserved from it
        let data = tiny_dataset(200);
        let shards = partition(
            &data,
            &PartitionSpec {
                mode: PartitionMode::Iid,
                num_clients: 4,
                seed: 2,
            },
        )
        .unwrap();
        let (reserve, _) = extract_reserve(shards, 0.05, 3).unwrap();
        assert_eq!(reserve.examples.iter().filter(|e| e.label == 3).count(), 10);
    }

    #[test]
    fn reserve_rejects_bad_fraction() {
        let data = tiny_dataset(5);
        let shards = partition(
            &data,
            &PartitionSpec {
                mode: PartitionMode::Iid,
                num_clients: 2,
                seed: 0,
            },
        )
        .unwrap();
        assert!(extract_reserve(shards.clone(), 0.0, 0).is_err());
        assert!(extract_reserve(shards, 1.0, 0).is_err());
    }

    fn write_wav(path: &Path, samples: &[i16], rate: u32) {
        let data_len = samples.len() * 2;
        let mut bytes = Vec::new();
        bytes.extend(b"RIFF");
        bytes.extend(((36 + data_len) as u32).to_le_bytes());
        bytes.extend(b"WAVE");
        bytes.extend(b"fmt ");
        bytes.extend(16u32.to_le_bytes());
        bytes.extend(1u16.to_le_bytes()); // PCM
        bytes.extend(1u16.to_le_bytes()); // mono
        bytes.extend(rate.to_le_bytes());
        bytes.extend((rate * 2).to_le_bytes());
        bytes.extend(2u16.to_le_bytes());
        bytes.extend(16u16.to_le_bytes());
        bytes.extend(b"data");
        bytes.extend((data_len as u32).to_le_bytes());
        for s in samples {
            bytes.extend(s.to_le_bytes());
        }
        std::fs::write(path, bytes).unwrap();
    }

    #[test]
    fn wav_silence_gives_zero_spectrogram() {
        let dir = tempfile::tempdir().unwrap();
        write_wav(&dir.path().join("0_silent.wav"), &[0i16; 1000], 8000);
        write_wav(&dir.path().join("1_also.wav"), &[0i16; 1000], 8000);
        let data = load_wav_dir(dir.path(), &cfg()).unwrap();
        assert_eq!(data.len(), 2);
        assert!(data[0].features.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wav_label_parsing() {
        let dir = tempfile::tempdir().unwrap();
        write_wav(&dir.path().join("7_theo_42.wav"), &[100i16; 500], 8000);
        let data = load_wav_dir(dir.path(), &cfg()).unwrap();
        assert_eq!(data[0].label, 7);
    }

    #[test]
    fn wav_bad_label_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_wav(&dir.path().join("x_bad.wav"), &[0i16; 500], 8000);
        assert!(matches!(
            load_wav_dir(dir.path(), &cfg()),
            Err(Error::WavFormat { .. })
        ));
    }

    #[test]
    fn wav_malformed_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("0_junk.wav"), b"not a riff file").unwrap();
        assert!(matches!(
            load_wav_dir(dir.path(), &cfg()),
            Err(Error::WavFormat { .. })
        ));
    }

    #[test]
    fn resample_doubles_length() {
        let samples = vec![0.5; 1000];
        let out = resample(&samples, 8000.0, 16000.0);
        assert!((out.len() as i64 - 2000).abs() <= 1);
    }

    #[test]
    fn dump_shards_writes_manifest_and_files() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_dataset(4);
        let spec = PartitionSpec {
            mode: PartitionMode::Iid,
            num_clients: 2,
            seed: 0,
        };
        let shards = partition(&data, &spec).unwrap();
        dump_shards(&shards, &spec, dir.path()).unwrap();
        let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert!(manifest.contains("num_clients=2"));
        assert!(dir.path().join("client_000/features.bin").exists());
        assert!(dir.path().join("client_001/labels.idx").exists());
    }
}
