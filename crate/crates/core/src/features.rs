//! Audio ingestion and mel time–frequency features.
//!
//! Features are linear-power mel spectrograms: a Hann-windowed short-time
//! Fourier transform with centered (zero-padded) framing, squared
//! magnitudes, and an HTK-style triangular mel filterbank. With the default
//! 16 kHz / 25 ms window / 10 ms hop configuration one second of audio
//! yields 101 frames of 128 mel bins.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array2};
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_N_MELS: usize = 128;
pub const DEFAULT_HOP: usize = 160;
pub const DEFAULT_WIN: usize = 400;
pub const DEFAULT_DOWNSAMPLE: usize = 4;

/// Mono audio with samples nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be > 0".into()));
        }
        if samples.is_empty() {
            return Err(Error::EmptyAudio);
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidSamples(format!("non-finite sample at {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * c).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Read a RIFF WAV file. Multi-channel input is averaged to mono.
    pub fn read_wav(path: &Path) -> Result<Self> {
        let reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        let channels = spec.channels as usize;
        let interleaved: Vec<f64> = match spec.sample_format {
            hound::SampleFormat::Int => {
                let full = (1i64 << (spec.bits_per_sample - 1)) as f64;
                reader
                    .into_samples::<i32>()
                    .map(|s| s.map(|v| v as f64 / full))
                    .collect::<std::result::Result<_, _>>()?
            }
            hound::SampleFormat::Float => reader
                .into_samples::<f32>()
                .map(|s| s.map(f64::from))
                .collect::<std::result::Result<_, _>>()?,
        };
        let samples = if channels > 1 {
            log::warn!("{}: {channels} channels averaged to mono", path.display());
            interleaved
                .chunks(channels)
                .map(|c| c.iter().sum::<f64>() / channels as f64)
                .collect()
        } else {
            interleaved
        };
        Self::new(samples, spec.sample_rate)
    }

    /// Write as 16-bit mono PCM, clipping to `[-1, 1]`.
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            w.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16)?;
        }
        w.finalize()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureScale {
    LinearPower,
    Log,
}

/// A `T×d` feature sequence, time on rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: Mat,
    frame_rate: f64,
    scale: FeatureScale,
}

impl FeatureMatrix {
    pub fn new(values: Mat, frame_rate: f64, scale: FeatureScale) -> Result<Self> {
        let (t, d) = values.dim();
        if t == 0 || d == 0 {
            return Err(Error::Shape(format!("empty feature matrix {t}x{d}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite feature value".into()));
        }
        if scale == FeatureScale::LinearPower && values.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("negative linear-power value".into()));
        }
        if !(frame_rate > 0.0) {
            return Err(Error::InvalidArgument("frame rate must be > 0".into()));
        }
        Ok(Self {
            values,
            frame_rate,
            scale,
        })
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.values.ncols()
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn scale(&self) -> FeatureScale {
        self.scale
    }

    /// Log-compressed copy used as model input: `log10` with a floor of
    /// `1e-10`, dynamic range clamped to 8 decades below the peak, then
    /// shifted and scaled by `(x + 4) / 4`.
    pub fn to_log(&self) -> FeatureMatrix {
        if self.scale == FeatureScale::Log {
            return self.clone();
        }
        let logged = self.values.mapv(|v| v.max(1e-10).log10());
        let peak = logged.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let values = logged.mapv(|v| (v.max(peak - 8.0) + 4.0) / 4.0);
        FeatureMatrix {
            values,
            frame_rate: self.frame_rate,
            scale: FeatureScale::Log,
        }
    }

    const CACHE_MAGIC: &'static [u8; 4] = b"EFMC";
    const CACHE_VERSION: u32 = 1;

    /// Binary cache container: magic `EFMC`, u32 version, u32 rows, u32
    /// cols, f64 frame rate, u8 scale (0 linear-power, 1 log), then row-major
    /// f64 values. Little-endian throughout.
    pub fn write_cache<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("<feature cache>", e);
        let mut buf = Vec::with_capacity(25 + self.values.len() * 8);
        buf.extend_from_slice(Self::CACHE_MAGIC);
        buf.extend_from_slice(&Self::CACHE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.values.nrows() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.values.ncols() as u32).to_le_bytes());
        buf.extend_from_slice(&self.frame_rate.to_le_bytes());
        buf.push(match self.scale {
            FeatureScale::LinearPower => 0,
            FeatureScale::Log => 1,
        });
        for v in self.values.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)
    }

    pub fn read_cache<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::io("<feature cache>", e))?;
        if bytes.len() < 25 || &bytes[..4] != Self::CACHE_MAGIC {
            return Err(Error::Container("not a feature cache".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != Self::CACHE_VERSION {
            return Err(Error::SchemaVersion {
                expected: Self::CACHE_VERSION,
                found: version,
            });
        }
        let rows = u32_at(8) as usize;
        let cols = u32_at(12) as usize;
        let frame_rate = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let scale = match bytes[24] {
            0 => FeatureScale::LinearPower,
            1 => FeatureScale::Log,
            other => return Err(Error::Container(format!("bad scale tag {other}"))),
        };
        let body = &bytes[25..];
        if body.len() != rows * cols * 8 {
            return Err(Error::Container("feature cache size mismatch".into()));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let values = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::Container(e.to_string()))?;
        Self::new(values, frame_rate, scale)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub win_length: usize,
    pub hop: usize,
    pub n_fft: usize,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self::for_rate(DEFAULT_SAMPLE_RATE, DEFAULT_N_MELS, DEFAULT_HOP)
    }
}

impl MelConfig {
    /// 25 ms window; FFT size is the next power of two.
    pub fn for_rate(sample_rate: u32, n_mels: usize, hop: usize) -> Self {
        let win_length = (sample_rate as usize * 25 / 1000).max(1);
        Self {
            sample_rate,
            n_mels,
            win_length,
            hop,
            n_fft: win_length.next_power_of_two(),
        }
    }

    pub fn n_freqs(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Centered framing: one frame per hop, plus one.
    pub fn n_frames(&self, n_samples: usize) -> usize {
        1 + n_samples / self.hop
    }

    /// Center frequency of each mel band in Hz.
    pub fn band_centers(&self) -> Vec<f64> {
        let top = hz_to_mel(self.sample_rate as f64 / 2.0);
        (1..=self.n_mels)
            .map(|m| mel_to_hz(top * m as f64 / (self.n_mels + 1) as f64))
            .collect()
    }
}

/// Reusable mel analyzer: precomputed window, filterbank and FFT plan.
pub struct MelExtractor {
    config: MelConfig,
    window: Vec<f64>,
    filters: Mat,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelExtractor")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl MelExtractor {
    pub fn new(config: MelConfig) -> Result<Self> {
        if config.n_mels == 0 {
            return Err(Error::InvalidArgument("n_mels must be ≥ 1".into()));
        }
        if config.hop == 0 || config.win_length == 0 || config.n_fft < config.win_length {
            return Err(Error::InvalidArgument(format!(
                "bad framing: win {} hop {} n_fft {}",
                config.win_length, config.hop, config.n_fft
            )));
        }
        let n = config.win_length;
        // periodic Hann
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(config.n_fft);
        Ok(Self {
            filters: mel_filterbank(&config),
            config,
            window,
            fft,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.config
    }

    pub fn filters(&self) -> &Mat {
        &self.filters
    }

    pub fn extract(&self, w: &Waveform) -> Result<FeatureMatrix> {
        let cfg = &self.config;
        if w.sample_rate() != cfg.sample_rate {
            return Err(Error::InvalidArgument(format!(
                "sample rate {} does not match extractor rate {}",
                w.sample_rate(),
                cfg.sample_rate
            )));
        }
        let x = w.samples();
        let n_frames = cfg.n_frames(x.len());
        let n_freqs = cfg.n_freqs();
        let half = cfg.win_length / 2;
        let mut power = Mat::zeros((n_frames, n_freqs));
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        for t in 0..n_frames {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            let start = (t * cfg.hop) as isize - half as isize;
            for (i, wv) in self.window.iter().enumerate() {
                let idx = start + i as isize;
                if idx >= 0 && (idx as usize) < x.len() {
                    buf[i].re = x[idx as usize] * wv;
                }
            }
            self.fft.process(&mut buf);
            for k in 0..n_freqs {
                power[[t, k]] = buf[k].norm_sqr();
            }
        }
        let mel = power.dot(&self.filters.t());
        FeatureMatrix::new(
            mel,
            cfg.sample_rate as f64 / cfg.hop as f64,
            FeatureScale::LinearPower,
        )
    }
}

/// Triangular filters on the HTK mel scale between 0 Hz and Nyquist,
/// peak height 1. Shape `n_mels × n_freqs`.
pub fn mel_filterbank(cfg: &MelConfig) -> Mat {
    let n_freqs = cfg.n_freqs();
    let top = hz_to_mel(cfg.sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    let mut fb = Mat::zeros((cfg.n_mels, n_freqs));
    for m in 0..cfg.n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_freqs {
            let f = k as f64 * bin_hz;
            let v = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb[[m, k]] = v;
        }
    }
    fb
}

/// Mel spectrogram with a 25 ms window at the waveform's own sample rate.
pub fn extract_features(w: &Waveform, n_mels: usize, frame_hop: usize) -> Result<FeatureMatrix> {
    MelExtractor::new(MelConfig::for_rate(w.sample_rate(), n_mels, frame_hop))?.extract(w)
}

/// Non-overlapping mean pooling over time; `T' = ceil(T / factor)`.
pub fn downsample_input(x: &FeatureMatrix, factor: usize) -> Result<FeatureMatrix> {
    if factor == 0 {
        return Err(Error::InvalidArgument(
            "downsample factor must be ≥ 1".into(),
        ));
    }
    let (t, d) = x.values.dim();
    let out_t = t.div_ceil(factor);
    let mut out = Mat::zeros((out_t, d));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let block = x
            .values
            .slice(s![i * factor..((i + 1) * factor).min(t), ..]);
        let n = block.nrows() as f64;
        row.assign(&(block.sum_axis(ndarray::Axis(0)) / n));
    }
    FeatureMatrix::new(out, x.frame_rate / factor as f64, x.scale)
}

/// Per-frame ℓ2 norm across mel bins, averaged over frames.
pub fn mean_energy(x: &FeatureMatrix) -> Result<f64> {
    if x.scale != FeatureScale::LinearPower {
        return Err(Error::InvalidArgument(
            "energy is defined on linear-power features".into(),
        ));
    }
    let total: f64 = x.values.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum();
    Ok(total / x.n_frames() as f64)
}
