//! Shared fixtures for the hot-path benchmarks.

use specfed_core::model::ModelArch;
use specfed_core::rng::stream;
use specfed_core::Tensor;

use rand::Rng;

/// Small CNN used across benchmarks; large enough to exercise im2col paths.
pub fn bench_arch() -> ModelArch {
    ModelArch {
        conv_channels: [8, 16, 32],
        dense_units: 64,
        dropout_p: 0.0,
        num_classes: 4,
        input_bins: 33,
        input_frames: 16,
    }
}

/// Deterministic random batch of spectrogram-shaped inputs with labels.
pub fn random_batch(arch: &ModelArch, batch: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = stream(seed, &[0xbe]);
    let x = Tensor::new(
        vec![batch, arch.input_bins, arch.input_frames, 2],
        (0..batch * arch.input_bins * arch.input_frames * 2)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    )
    .expect("batch shape");
    let y = Tensor::new(
        vec![batch],
        (0..batch)
            .map(|_| rng.gen_range(0..arch.num_classes) as f64)
            .collect(),
    )
    .expect("label shape");
    (x, y)
}

/// Deterministic random waveform for the STFT benchmark.
pub fn random_waveform(len: usize, seed: u64) -> Tensor {
    let mut rng = stream(seed, &[0xaf]);
    Tensor::new(vec![len], (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("waveform shape")
}
