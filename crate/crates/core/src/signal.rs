//! Waveform to normalized, clipped real/imag spectrogram tensors.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Variance below this is treated as zero; degenerate utterances map to
/// all-zero tensors instead of erroring.
const VAR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SignalConfig {
    pub sample_rate: f64,
    pub window_length: usize,
    pub hop: usize,
    pub fft_size: usize,
    /// Admissible set bound: every element is clipped to `[-c, c]`.
    pub admissible_bound: f64,
}

impl SignalConfig {
    pub fn new(
        sample_rate: f64,
        window_length: usize,
        hop: usize,
        fft_size: usize,
        admissible_bound: f64,
    ) -> Result<Self> {
        if !fft_size.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "fft size {fft_size} is not a power of two"
            )));
        }
        if window_length > fft_size {
            return Err(Error::InvalidArgument(format!(
                "window length {window_length} exceeds fft size {fft_size}"
            )));
        }
        if hop == 0 {
            return Err(Error::InvalidArgument("hop must be >= 1".into()));
        }
        if window_length < 2 {
            return Err(Error::InvalidArgument("window length must be >= 2".into()));
        }
        if admissible_bound <= 0.0 || sample_rate <= 0.0 {
            return Err(Error::InvalidArgument(
                "sample rate and admissible bound must be positive".into(),
            ));
        }
        Ok(Self {
            sample_rate,
            window_length,
            hop,
            fft_size,
            admissible_bound,
        })
    }

    /// Number of retained frequency bins, `F/2 + 1`.
    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }
}

/// Real/imag spectrogram tensor of shape `[n_f, T, 2]`.
///
/// Channel 0 holds the real part, channel 1 the imaginary part.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    data: Tensor,
}

impl Spectrogram {
    pub fn from_tensor(data: Tensor) -> Result<Self> {
        if data.shape().len() != 3 || data.shape()[2] != 2 {
            return Err(Error::ShapeMismatch(format!(
                "spectrogram wants [n_f, T, 2], got {:?}",
                data.shape()
            )));
        }
        Ok(Self { data })
    }

    pub fn bins(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn at(&self, bin: usize, frame: usize, channel: usize) -> f64 {
        let t = self.frames();
        self.data.data()[(bin * t + frame) * 2 + channel]
    }
}

/// Symmetric Hann window `w[n] = 0.5 (1 - cos(2 pi n / (L-1)))`.
pub fn hann_window(window_length: usize) -> Result<Tensor> {
    if window_length < 2 {
        return Err(Error::InvalidArgument("hann window needs length >= 2".into()));
    }
    let denom = (window_length - 1) as f64;
    let data = (0..window_length)
        .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / denom).cos()))
        .collect();
    Ok(Tensor::from_vec(data))
}

/// Short-time Fourier transform with non-centered frames.
///
/// Frame `t` covers samples `[t*hop, t*hop + L_w)`; each frame is windowed,
/// zero-padded to the FFT size, and transformed. Only bins `0..=F/2` are
/// kept (the rest are conjugate-redundant for real input).
pub fn stft(waveform: &Tensor, config: &SignalConfig) -> Result<Spectrogram> {
    let n = waveform.len();
    let lw = config.window_length;
    if n < lw {
        return Err(Error::InvalidArgument(format!(
            "waveform of {n} samples is shorter than one window ({lw})"
        )));
    }
    let frames = (n - lw) / config.hop + 1;
    let n_f = config.num_bins();
    let window = hann_window(lw)?;

    let fft = FftPlanner::new().plan_fft_forward(config.fft_size);
    let mut out = Tensor::zeros(vec![n_f, frames, 2]);
    let mut buf = vec![Complex64::new(0.0, 0.0); config.fft_size];
    for t in 0..frames {
        let start = t * config.hop;
        for (i, c) in buf.iter_mut().enumerate() {
            let v = if i < lw {
                waveform.data()[start + i] * window.data()[i]
            } else {
                0.0
            };
            *c = Complex64::new(v, 0.0);
        }
        fft.process(&mut buf);
        for (bin, c) in buf.iter().take(n_f).enumerate() {
            out.data_mut()[(bin * frames + t) * 2] = c.re;
            out.data_mut()[(bin * frames + t) * 2 + 1] = c.im;
        }
    }
    Spectrogram::from_tensor(out)
}

/// Standardize to zero mean and unit variance over all elements (real and
/// imaginary channels jointly), then clip to the admissible set.
pub fn normalize_clip(spec: &Spectrogram, config: &SignalConfig) -> Spectrogram {
    let c = config.admissible_bound;
    let data = spec.tensor().data();
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / n;
    let out = if var < VAR_FLOOR {
        Tensor::zeros(spec.tensor().shape().to_vec())
    } else {
        let inv = 1.0 / var.sqrt();
        spec.tensor().map(|v| ((v - mean) * inv).clamp(-c, c))
    };
    Spectrogram::from_tensor(out).expect("shape preserved")
}

/// Center-crop or symmetrically zero-pad along the frame axis.
pub fn pad_or_crop(spec: &Spectrogram, target_frames: usize) -> Result<Spectrogram> {
    if target_frames == 0 {
        return Err(Error::InvalidArgument("target frame count must be >= 1".into()));
    }
    let (n_f, t) = (spec.bins(), spec.frames());
    if t == target_frames {
        return Ok(spec.clone());
    }
    let mut out = Tensor::zeros(vec![n_f, target_frames, 2]);
    if t > target_frames {
        let start = (t - target_frames) / 2;
        for bin in 0..n_f {
            for f in 0..target_frames {
                for ch in 0..2 {
                    out.data_mut()[(bin * target_frames + f) * 2 + ch] =
                        spec.at(bin, start + f, ch);
                }
            }
        }
    } else {
        let left = (target_frames - t) / 2;
        for bin in 0..n_f {
            for f in 0..t {
                for ch in 0..2 {
                    out.data_mut()[(bin * target_frames + left + f) * 2 + ch] =
                        spec.at(bin, f, ch);
                }
            }
        }
    }
    Spectrogram::from_tensor(out)
}

#[cfg(test)]
pub(crate) mod test_support {
    //! Brute-force oracles kept independent of the fft-backed path.

    use super::*;

    /// O(F^2) DFT of one windowed, zero-padded frame.
    pub fn naive_frame_dft(
        waveform: &[f64],
        config: &SignalConfig,
        frame: usize,
    ) -> Vec<(f64, f64)> {
        let lw = config.window_length;
        let f_size = config.fft_size;
        let window = hann_window(lw).unwrap();
        let start = frame * config.hop;
        let mut padded = vec![0.0; f_size];
        for i in 0..lw {
            padded[i] = waveform[start + i] * window.data()[i];
        }
        (0..config.num_bins())
            .map(|bin| {
                let mut re = 0.0;
                let mut im = 0.0;
                for (n, &x) in padded.iter().enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * bin as f64 * n as f64 / f_size as f64;
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
                (re, im)
            })
            .collect()
    }
}
