//! WAV input, STFT analysis, band masks and log-spectral distance.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{PofError, Result};
use crate::model::{BandMask, Spectrogram, SpectrumKind};

/// Entries below this are raised to it before taking logs in
/// [`log_spectral_distance`].
pub const LSD_FLOOR: f64 = 1e-10;

/// Mono audio, samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: f64,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(PofError::Validation("audio clip is empty".into()));
        }
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(PofError::Validation(format!("sample rate {sample_rate} must be positive")));
        }
        if let Some(i) = samples.iter().position(|s| !(s.abs() <= 1.0)) {
            return Err(PofError::Validation(format!(
                "sample {i} = {} is outside [-1, 1]",
                samples[i]
            )));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Reads a 16-bit PCM mono WAV file.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    // The file opened, so read failures past this point mean malformed content.
    let parse = |e: hound::Error| match e {
        hound::Error::Unsupported => PofError::Unsupported(format!("{}: unsupported WAV encoding", path.display())),
        other => PofError::Parse {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    };
    let file = std::fs::File::open(path).map_err(|e| PofError::io(path, e))?;
    let reader = hound::WavReader::new(std::io::BufReader::new(file)).map_err(parse)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(PofError::Unsupported(format!(
            "{}: {} channels, only mono is supported",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(PofError::Unsupported(format!(
            "{}: {}-bit {:?} samples, only 16-bit PCM is supported",
            path.display(),
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(parse)?;
    if samples.is_empty() {
        return Err(PofError::Parse {
            path: path.to_path_buf(),
            message: "no samples".into(),
        });
    }
    AudioClip::new(samples, f64::from(spec.sample_rate))
}

/// Writes a 16-bit PCM mono WAV file. Samples are clipped to the 16-bit range.
pub fn save_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let err = |e: hound::Error| match e {
        hound::Error::IoError(source) => PofError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => PofError::Unsupported(other.to_string()),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate.round() as u32,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(err)?;
    for &s in &clip.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(err)?;
    }
    writer.finalize().map_err(err)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { n_fft: 1024, hop: 512 }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_fft < 2 {
            return Err(PofError::Config(format!("n_fft = {} must be at least 2", self.n_fft)));
        }
        if self.hop == 0 || self.hop > self.n_fft {
            return Err(PofError::Config(format!(
                "hop = {} must satisfy 0 < hop <= n_fft = {}",
                self.hop, self.n_fft
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }
}

/// Symmetric Hann window 0.5 (1 - cos(2 pi n / (N - 1))).
pub fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let denom = (n - 1) as f64;
    (0..n).map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / denom).cos())).collect()
}

fn stft_power_matrix(clip: &AudioClip, cfg: &StftConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    let n = cfg.n_fft;
    if clip.len() < n {
        return Err(PofError::Validation(format!(
            "clip has {} samples, fewer than n_fft = {n}",
            clip.len()
        )));
    }
    let n_frames = (clip.len() - n) / cfg.hop + 1;
    let n_bins = cfg.n_bins();
    let window = hann(n);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let columns: Vec<Vec<f64>> = (0..n_frames)
        .into_par_iter()
        .map(|t| {
            let start = t * cfg.hop;
            let mut buf: Vec<Complex<f64>> = clip.samples[start..start + n]
                .iter()
                .zip(&window)
                .map(|(&x, &w)| Complex::new(x * w, 0.0))
                .collect();
            fft.process(&mut buf);
            buf[..n_bins].iter().map(|c| c.norm_sqr()).collect()
        })
        .collect();
    let mut out = Array2::zeros((n_bins, n_frames));
    for (t, col) in columns.into_iter().enumerate() {
        out.column_mut(t).assign(&ndarray::Array1::from(col));
    }
    Ok(out)
}

/// |STFT| with a Hann window, frames fully inside the clip.
pub fn stft_magnitude(clip: &AudioClip, cfg: &StftConfig) -> Result<Spectrogram> {
    let power = stft_power_matrix(clip, cfg)?;
    Spectrogram::new(power.mapv(f64::sqrt), SpectrumKind::Magnitude, clip.sample_rate, cfg.n_fft, cfg.hop)
}

/// |STFT|^2.
pub fn stft_power(clip: &AudioClip, cfg: &StftConfig) -> Result<Spectrogram> {
    let mag = stft_magnitude(clip, cfg)?;
    let data = mag.data().mapv(|v| v * v);
    Spectrogram::new(data, SpectrumKind::Power, clip.sample_rate, cfg.n_fft, cfg.hop)
}

/// Bins whose centre frequency f * sample_rate / n_fft lies in [low, high].
pub fn band_mask(n_bins: usize, sample_rate: f64, n_fft: usize, low: f64, high: f64) -> Result<BandMask> {
    if !(low >= 0.0 && low < high && high <= sample_rate / 2.0) {
        return Err(PofError::Validation(format!(
            "band [{low}, {high}] Hz must satisfy 0 <= low < high <= {}",
            sample_rate / 2.0
        )));
    }
    if n_fft == 0 {
        return Err(PofError::Validation("n_fft must be positive".into()));
    }
    let step = sample_rate / n_fft as f64;
    let kept: Vec<usize> = (0..n_bins)
        .filter(|&f| {
            let hz = f as f64 * step;
            hz >= low && hz <= high
        })
        .collect();
    if kept.is_empty() {
        return Err(PofError::Validation(format!("no bins fall in [{low}, {high}] Hz")));
    }
    BandMask::new(kept)
}

/// Selects the masked rows. The result records the band in original bin
/// indices, so masking an already masked spectrogram composes.
pub fn apply_mask(spec: &Spectrogram, mask: &BandMask) -> Result<Spectrogram> {
    mask.check_within(spec.n_bins())?;
    let data = spec.data().select(Axis(0), mask.kept());
    let band = match &spec.band {
        Some(outer) => BandMask::new(mask.kept().iter().map(|&i| outer.kept()[i]).collect())?,
        None => mask.clone(),
    };
    let mut out = spec.with_data(data)?;
    out.band = Some(band);
    Ok(out)
}

/// RMS over the masked bins and all frames of 20 log10(a / b), in dB.
pub fn log_spectral_distance(a: &Spectrogram, b: &Spectrogram, bins: &BandMask) -> Result<f64> {
    if a.data().dim() != b.data().dim() {
        return Err(PofError::Dimension(format!(
            "spectrogram shapes differ: {:?} vs {:?}",
            a.data().dim(),
            b.data().dim()
        )));
    }
    bins.check_within(a.n_bins())?;
    if a.n_frames() == 0 {
        return Err(PofError::Validation("spectrograms have no frames".into()));
    }
    let mut acc = 0.0;
    for &f in bins.kept() {
        for (x, y) in a.data().row(f).iter().zip(b.data().row(f)) {
            let d = 20.0 * (x.max(LSD_FLOOR) / y.max(LSD_FLOOR)).log10();
            acc += d * d;
        }
    }
    Ok((acc / (bins.len() * a.n_frames()) as f64).sqrt())
}
