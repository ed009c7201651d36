//! PoFC and MFCC features, adjacent-frame deltas, median smoothing, CSV.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{concatenate, Array1, Array2, Axis};

use crate::error::{PofError, Result};
use crate::estep::infer_frames;
use crate::model::{PoFModel, Spectrogram, SpectrumKind};
use crate::optim::LbfgsConfig;

/// Floor applied to mel energies before the log.
pub const MEL_LOG_FLOOR: f64 = 1e-10;

/// D×T features with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Array2<f64>,
    labels: Vec<String>,
}

impl FeatureMatrix {
    pub fn new(data: Array2<f64>, labels: Vec<String>) -> Result<Self> {
        if labels.len() != data.nrows() {
            return Err(PofError::Dimension(format!(
                "{} labels for {} feature rows",
                labels.len(),
                data.nrows()
            )));
        }
        if let Some(((d, t), _)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(PofError::Validation(format!("feature ({d}, {t}) is not finite")));
        }
        Ok(Self { data, labels })
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn n_features(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.data.ncols()
    }
}

/// Posterior means E_q[a_t] = nu / rho for every frame.
pub fn pofc(w: &Spectrogram, model: &PoFModel, cfg: &LbfgsConfig, seed: u64) -> Result<FeatureMatrix> {
    let results = infer_frames(w, model, cfg, seed)?;
    let mut data = Array2::zeros((model.n_filters(), w.n_frames()));
    for (t, r) in results.into_iter().enumerate() {
        let inf = r.map_err(|e| PofError::Numerical(format!("inference failed on frame {t}: {e}")))?;
        data.column_mut(t).assign(&inf.posterior.mean());
    }
    let labels = (0..model.n_filters()).map(|l| format!("pofc{l}")).collect();
    FeatureMatrix::new(data, labels)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// n_mels × n_bins triangular filters, equally spaced on the HTK mel scale
/// between 0 Hz and Nyquist. Each row sums to one; a filter too narrow to
/// cover any bin takes the bin nearest its centre.
pub fn mel_filterbank(n_mels: usize, n_bins: usize, sample_rate: f64, n_fft: usize) -> Result<Array2<f64>> {
    if n_mels == 0 || n_bins == 0 {
        return Err(PofError::Config("mel filterbank needs at least one filter and one bin".into()));
    }
    let top = hz_to_mel(sample_rate / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let step = sample_rate / n_fft as f64;
    let mut fb = Array2::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let hz = k as f64 * step;
            let v = if hz > lo && hz <= mid {
                (hz - lo) / (mid - lo)
            } else if hz > mid && hz < hi {
                (hi - hz) / (hi - mid)
            } else {
                0.0
            };
            fb[[m, k]] = v;
        }
        let total: f64 = fb.row(m).sum();
        if total > 0.0 {
            fb.row_mut(m).mapv_inplace(|v| v / total);
        } else {
            let nearest = ((mid / step).round() as usize).min(n_bins - 1);
            fb[[m, nearest]] = 1.0;
        }
    }
    Ok(fb)
}

/// Orthonormal DCT-II.
pub fn dct_ortho(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    (0..x.len())
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, &v)| v * (PI * k as f64 * (2 * i + 1) as f64 / (2.0 * n)).cos())
                .sum();
            s * if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() }
        })
        .collect()
}

/// Inverse of [`dct_ortho`] (orthonormal DCT-III).
pub fn idct_ortho(c: &[f64]) -> Vec<f64> {
    let n = c.len() as f64;
    (0..c.len())
        .map(|i| {
            c.iter()
                .enumerate()
                .map(|(k, &v)| {
                    let s = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
                    s * v * (PI * k as f64 * (2 * i + 1) as f64 / (2.0 * n)).cos()
                })
                .sum()
        })
        .collect()
}

/// First `n_coeffs` DCT coefficients of the log mel spectrum.
pub fn mfcc(w: &Spectrogram, n_coeffs: usize, n_mels: usize) -> Result<FeatureMatrix> {
    if w.kind != SpectrumKind::Magnitude {
        return Err(PofError::Validation("MFCCs are computed from magnitude spectrograms".into()));
    }
    if n_coeffs == 0 || n_coeffs > n_mels {
        return Err(PofError::Config(format!(
            "n_coeffs = {n_coeffs} must be between 1 and n_mels = {n_mels}"
        )));
    }
    if w.band.is_some() || w.n_bins() != w.n_fft / 2 + 1 {
        return Err(PofError::Dimension(format!(
            "MFCCs need a full-band spectrogram ({} bins for n_fft = {}), got {}",
            w.n_fft / 2 + 1,
            w.n_fft,
            w.n_bins()
        )));
    }
    let fb = mel_filterbank(n_mels, w.n_bins(), w.sample_rate, w.n_fft)?;
    let log_mel = fb.dot(w.data()).mapv(|v| v.max(MEL_LOG_FLOOR).ln());
    let mut data = Array2::zeros((n_coeffs, w.n_frames()));
    for (t, col) in log_mel.axis_iter(Axis(1)).enumerate() {
        let c = dct_ortho(&col.to_vec());
        data.column_mut(t).assign(&Array1::from(c[..n_coeffs].to_vec()));
    }
    FeatureMatrix::new(data, (0..n_coeffs).map(|k| format!("mfcc{k}")).collect())
}

fn diff(x: &Array2<f64>) -> Array2<f64> {
    let mut d = Array2::zeros(x.dim());
    for t in 1..x.ncols() {
        let v = &x.column(t) - &x.column(t - 1);
        d.column_mut(t).assign(&v);
    }
    d
}

/// Stacks [x; Δx; ΔΔx] with Δx_t = x_t - x_{t-1} and Δx_0 = 0.
pub fn add_deltas(feat: &FeatureMatrix) -> Result<FeatureMatrix> {
    if feat.n_frames() < 3 {
        return Err(PofError::Validation(format!(
            "deltas need at least 3 frames, got {}",
            feat.n_frames()
        )));
    }
    let d1 = diff(&feat.data);
    let d2 = diff(&d1);
    let data = concatenate(Axis(0), &[feat.data.view(), d1.view(), d2.view()])
        .map_err(|e| PofError::Dimension(e.to_string()))?;
    let mut labels = feat.labels.clone();
    labels.extend(feat.labels.iter().map(|l| format!("d_{l}")));
    labels.extend(feat.labels.iter().map(|l| format!("dd_{l}")));
    FeatureMatrix::new(data, labels)
}

fn check_median_length(length: usize) -> Result<()> {
    if length % 2 == 0 {
        return Err(PofError::Config(format!("median filter length {length} must be odd")));
    }
    Ok(())
}

/// Sliding median over a window of `length` centred on each sample; windows
/// are truncated at the ends, and an even-sized truncated window takes the
/// mean of its two middle values.
pub fn median_smooth_row(x: &[f64], length: usize) -> Result<Vec<f64>> {
    check_median_length(length)?;
    let half = length / 2;
    let mut buf = Vec::with_capacity(length);
    Ok((0..x.len())
        .map(|t| {
            buf.clear();
            buf.extend_from_slice(&x[t.saturating_sub(half)..(t + half + 1).min(x.len())]);
            buf.sort_by(f64::total_cmp);
            let n = buf.len();
            if n % 2 == 1 {
                buf[n / 2]
            } else {
                0.5 * (buf[n / 2 - 1] + buf[n / 2])
            }
        })
        .collect())
}

/// [`median_smooth_row`] applied to every feature row.
pub fn median_smooth(feat: &FeatureMatrix, length: usize) -> Result<FeatureMatrix> {
    check_median_length(length)?;
    let mut data = feat.data.clone();
    for mut row in data.rows_mut() {
        let smoothed = median_smooth_row(&row.to_vec(), length)?;
        row.assign(&Array1::from(smoothed));
    }
    FeatureMatrix::new(data, feat.labels.clone())
}

/// CSV with a header row of labels and one row per frame.
pub fn save_features_csv(feat: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(source) => PofError::io(path, source),
        other => PofError::Validation(format!("{other:?}")),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(&feat.labels).map_err(csv_err)?;
    for col in feat.data.axis_iter(Axis(1)) {
        w.write_record(col.iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    w.flush().map_err(|e| PofError::io(path, e))
}

pub fn load_features_csv(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let parse = |message: String| PofError::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| parse(e.to_string()))?;
    let labels: Vec<String> = r.headers().map_err(|e| parse(e.to_string()))?.iter().map(String::from).collect();
    let mut columns: Vec<f64> = Vec::new();
    let mut n_frames = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| parse(e.to_string()))?;
        for (d, field) in rec.iter().enumerate() {
            let v = field
                .trim()
                .parse::<f64>()
                .map_err(|_| parse(format!("row {}, column {}: {field:?} is not a number", i + 2, d + 1)))?;
            columns.push(v);
        }
        n_frames += 1;
    }
    let frames = Array2::from_shape_vec((n_frames, labels.len()), columns).map_err(|e| parse(e.to_string()))?;
    FeatureMatrix::new(frames.t().to_owned(), labels)
}
