//! Core domain types: the product-of-filters model, per-frame variational
//! posteriors, spectrograms and band masks, plus generative sampling.

mod io;

pub use io::{
    load_model, load_posteriors, load_spectrogram, save_model, save_posteriors, save_spectrogram,
    PosteriorRecord,
};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PofError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub sample_rate: f64,
    pub n_fft: usize,
    pub created_by: String,
}

impl Default for ModelMeta {
    fn default() -> Self {
        Self {
            sample_rate: 16000.0,
            n_fft: 1024,
            created_by: format!("pof {}", env!("CARGO_PKG_VERSION")),
        }
    }
}

/// Product-of-filters model parameters.
///
/// `u` is F×L: column `l` is a log-filter. Activations of filter `l` have
/// prior Gamma(alpha[l], alpha[l]); bin `f` has multiplicative gamma noise
/// with shape `gamma[f]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoFModel {
    u: Array2<f64>,
    alpha: Array1<f64>,
    gamma: Array1<f64>,
    pub meta: ModelMeta,
}

impl PoFModel {
    pub fn new(u: Array2<f64>, alpha: Array1<f64>, gamma: Array1<f64>, meta: ModelMeta) -> Result<Self> {
        let model = Self {
            u,
            alpha,
            gamma,
            meta,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let (f, l) = self.u.dim();
        if f == 0 || l == 0 {
            return Err(PofError::Validation(format!("model has empty U ({f}x{l})")));
        }
        if self.alpha.len() != l {
            return Err(PofError::Validation(format!(
                "alpha has length {} but U has {l} columns",
                self.alpha.len()
            )));
        }
        if self.gamma.len() != f {
            return Err(PofError::Validation(format!(
                "gamma has length {} but U has {f} rows",
                self.gamma.len()
            )));
        }
        if let Some(((i, j), v)) = self.u.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(PofError::Validation(format!("U[{i}][{j}] = {v} is not finite")));
        }
        for (name, vec) in [("alpha", &self.alpha), ("gamma", &self.gamma)] {
            if let Some((i, v)) = vec.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
                return Err(PofError::Validation(format!("{name}[{i}] = {v} must be positive and finite")));
            }
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.u.nrows()
    }

    pub fn n_filters(&self) -> usize {
        self.u.ncols()
    }

    pub fn u(&self) -> &Array2<f64> {
        &self.u
    }

    pub fn alpha(&self) -> &Array1<f64> {
        &self.alpha
    }

    pub fn gamma(&self) -> &Array1<f64> {
        &self.gamma
    }

    /// Mutable access for the M-step. Callers re-validate before returning
    /// the model to users.
    pub(crate) fn parts_mut(&mut self) -> (&mut Array2<f64>, &mut Array1<f64>, &mut Array1<f64>) {
        (&mut self.u, &mut self.alpha, &mut self.gamma)
    }

    /// For each filter, the smallest rate a gamma posterior may take while
    /// keeping every MGF term finite: `max(0, max_f -U[f, l])`.
    pub fn min_feasible_rates(&self) -> Array1<f64> {
        self.u
            .axis_iter(Axis(1))
            .map(|col| col.iter().fold(0.0f64, |m, &v| m.max(-v)))
            .collect()
    }
}

/// Variational posterior for one frame: independent Gamma(nu[l], rho[l]).
#[derive(Debug, Clone, PartialEq)]
pub struct FramePosterior {
    nu: Array1<f64>,
    rho: Array1<f64>,
}

impl FramePosterior {
    pub fn new(nu: Array1<f64>, rho: Array1<f64>) -> Result<Self> {
        if nu.len() != rho.len() {
            return Err(PofError::Dimension(format!(
                "posterior nu has length {} but rho has length {}",
                nu.len(),
                rho.len()
            )));
        }
        for (name, v) in [("nu", &nu), ("rho", &rho)] {
            if let Some((i, x)) = v.iter().enumerate().find(|(_, x)| !(**x > 0.0 && x.is_finite())) {
                return Err(PofError::Validation(format!("{name}[{i}] = {x} must be positive and finite")));
            }
        }
        Ok(Self { nu, rho })
    }

    pub(crate) fn from_parts_unchecked(nu: Array1<f64>, rho: Array1<f64>) -> Self {
        debug_assert_eq!(nu.len(), rho.len());
        Self { nu, rho }
    }

    pub fn len(&self) -> usize {
        self.nu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nu.is_empty()
    }

    pub fn nu(&self) -> &Array1<f64> {
        &self.nu
    }

    pub fn rho(&self) -> &Array1<f64> {
        &self.rho
    }

    /// Posterior means nu / rho.
    pub fn mean(&self) -> Array1<f64> {
        &self.nu / &self.rho
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectrumKind {
    Magnitude,
    Power,
}

impl SpectrumKind {
    pub(crate) fn code(self) -> u8 {
        match self {
            SpectrumKind::Magnitude => 0,
            SpectrumKind::Power => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(SpectrumKind::Magnitude),
            1 => Some(SpectrumKind::Power),
            _ => None,
        }
    }
}

/// Sorted set of retained frequency-bin indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BandMask {
    kept: Vec<usize>,
}

impl BandMask {
    pub fn new(kept: Vec<usize>) -> Result<Self> {
        if kept.is_empty() {
            return Err(PofError::Validation("band mask is empty".into()));
        }
        if kept.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PofError::Validation(
                "band mask indices must be strictly increasing".into(),
            ));
        }
        Ok(Self { kept })
    }

    pub fn full(n_bins: usize) -> Result<Self> {
        Self::new((0..n_bins).collect())
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    pub fn contains(&self, bin: usize) -> bool {
        self.kept.binary_search(&bin).is_ok()
    }

    pub fn check_within(&self, n_bins: usize) -> Result<()> {
        match self.kept.last() {
            Some(&last) if last >= n_bins => Err(PofError::Validation(format!(
                "band mask index {last} out of range for {n_bins} bins"
            ))),
            _ => Ok(()),
        }
    }

    /// Bins in `[0, n_bins)` not covered by this mask.
    pub fn complement(&self, n_bins: usize) -> Vec<usize> {
        (0..n_bins).filter(|f| !self.contains(*f)).collect()
    }
}

/// F×T non-negative matrix with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    data: Array2<f64>,
    pub kind: SpectrumKind,
    pub sample_rate: f64,
    pub n_fft: usize,
    pub hop: usize,
    /// Set when the rows are a band-limited selection of a full spectrogram.
    pub band: Option<BandMask>,
}

impl Spectrogram {
    pub fn new(data: Array2<f64>, kind: SpectrumKind, sample_rate: f64, n_fft: usize, hop: usize) -> Result<Self> {
        if let Some(((f, t), v)) = data.indexed_iter().find(|(_, v)| !(**v >= 0.0 && v.is_finite())) {
            return Err(PofError::Validation(format!(
                "spectrogram entry ({f}, {t}) = {v} must be finite and non-negative"
            )));
        }
        Ok(Self {
            data,
            kind,
            sample_rate,
            n_fft,
            hop,
            band: None,
        })
    }

    /// Magnitude spectrogram with default metadata, mostly for synthetic data.
    pub fn from_magnitudes(data: Array2<f64>) -> Result<Self> {
        let n_fft = 2 * data.nrows().saturating_sub(1);
        Self::new(data, SpectrumKind::Magnitude, 16000.0, n_fft, n_fft / 2)
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn n_bins(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.data.ncols()
    }

    pub fn frame(&self, t: usize) -> ArrayView1<'_, f64> {
        self.data.column(t)
    }

    /// Same metadata, different data. Validates the new data.
    pub fn with_data(&self, data: Array2<f64>) -> Result<Self> {
        let mut out = Self::new(data, self.kind, self.sample_rate, self.n_fft, self.hop)?;
        out.band = self.band.clone();
        Ok(out)
    }

    /// Concatenate frames of several spectrograms with matching bins and kind.
    pub fn concat(parts: &[Spectrogram]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| PofError::Validation("no spectrograms to concatenate".into()))?;
        for p in parts {
            if p.n_bins() != first.n_bins() || p.kind != first.kind {
                return Err(PofError::Dimension(format!(
                    "cannot concatenate {}-bin {:?} with {}-bin {:?} spectrogram",
                    first.n_bins(),
                    first.kind,
                    p.n_bins(),
                    p.kind
                )));
            }
        }
        let views: Vec<_> = parts.iter().map(|p| p.data.view()).collect();
        let data = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| PofError::Dimension(e.to_string()))?;
        let mut out = first.clone();
        out.data = data;
        Ok(out)
    }
}

/// Returns Σ_l U[f, l] a[l] for every bin.
pub fn expected_log_spectrum(model: &PoFModel, a: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if a.len() != model.n_filters() {
        return Err(PofError::Dimension(format!(
            "activation vector has length {} but model has {} filters",
            a.len(),
            model.n_filters()
        )));
    }
    Ok(model.u.dot(&a))
}

/// Deterministic per-stream generator: one independent ChaCha stream per
/// `(purpose, index)` so results do not depend on scheduling.
pub(crate) fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

pub(crate) const STREAM_SAMPLE: u64 = 1;
pub(crate) const STREAM_POSTERIOR_INIT: u64 = 2;
pub(crate) const STREAM_MODEL_INIT: u64 = 3;
pub(crate) const STREAM_NMF_INIT: u64 = 4;

/// Draw `n_frames` frames from the generative model. Returns the magnitude
/// spectrogram and the L×T matrix of true activations.
pub fn sample(model: &PoFModel, n_frames: usize, seed: u64) -> Result<(Spectrogram, Array2<f64>)> {
    if n_frames == 0 {
        return Err(PofError::Validation("sample requires at least one frame".into()));
    }
    let n_filters = model.n_filters();
    let n_bins = model.n_bins();
    let act_dists: Vec<Gamma<f64>> = model
        .alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0 / a).expect("validated alpha"))
        .collect();

    let frames: Vec<(Array1<f64>, Array1<f64>)> = (0..n_frames)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream_rng(seed, STREAM_SAMPLE, t as u64);
            let a: Array1<f64> = act_dists.iter().map(|d| d.sample(&mut rng)).collect();
            let log_mean = model.u.dot(&a);
            let w: Array1<f64> = (0..n_bins)
                .map(|f| {
                    let g = model.gamma[f];
                    let scale = log_mean[f].exp() / g;
                    Gamma::new(g, scale)
                        .map(|d| d.sample(&mut rng))
                        .unwrap_or(0.0)
                })
                .collect();
            (a, w)
        })
        .collect();

    let mut acts = Array2::zeros((n_filters, n_frames));
    let mut data = Array2::zeros((n_bins, n_frames));
    for (t, (a, w)) in frames.into_iter().enumerate() {
        acts.column_mut(t).assign(&a);
        data.column_mut(t).assign(&w);
    }
    let n_fft = 2 * (n_bins - 1).max(1);
    let spec = Spectrogram::new(
        data,
        SpectrumKind::Magnitude,
        model.meta.sample_rate,
        n_fft,
        n_fft / 2,
    )?;
    Ok((spec, acts))
}
