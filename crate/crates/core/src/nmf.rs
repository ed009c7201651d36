//! KL and Itakura-Saito NMF with multiplicative updates, and NMF bandwidth
//! expansion.

use std::fs;
use std::path::Path;

use log::warn;
use ndarray::{Array2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PofError, Result};
use crate::model::{stream_rng, BandMask, Spectrogram, SpectrumKind, STREAM_NMF_INIT};

/// Floor applied inside divisions and logs.
pub const NMF_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Divergence {
    /// Generalised Kullback-Leibler, fit to magnitude spectra.
    Kl,
    /// Itakura-Saito, fit to power spectra.
    Is,
}

impl Divergence {
    pub fn expected_kind(self) -> SpectrumKind {
        match self {
            Divergence::Kl => SpectrumKind::Magnitude,
            Divergence::Is => SpectrumKind::Power,
        }
    }
}

impl std::str::FromStr for Divergence {
    type Err = PofError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kl" => Ok(Divergence::Kl),
            "is" => Ok(Divergence::Is),
            other => Err(PofError::Config(format!("unknown divergence {other:?} (expected kl or is)"))),
        }
    }
}

/// Dictionary V (F×K).
#[derive(Debug, Clone, PartialEq)]
pub struct NmfModel {
    v: Array2<f64>,
    pub divergence: Divergence,
}

impl NmfModel {
    pub fn new(v: Array2<f64>, divergence: Divergence) -> Result<Self> {
        if v.is_empty() {
            return Err(PofError::Validation("NMF dictionary is empty".into()));
        }
        if v.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
            return Err(PofError::Validation("NMF dictionary must be finite and non-negative".into()));
        }
        if let Some(k) = v.axis_iter(Axis(1)).position(|c| c.iter().all(|&x| x == 0.0)) {
            return Err(PofError::Validation(format!("NMF dictionary column {k} is all zero")));
        }
        Ok(Self { v, divergence })
    }

    pub fn v(&self) -> &Array2<f64> {
        &self.v
    }

    pub fn n_bins(&self) -> usize {
        self.v.nrows()
    }

    pub fn k(&self) -> usize {
        self.v.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmfFit {
    /// Activations H (K×T).
    pub h: Array2<f64>,
    /// Cost at initialisation and after every iteration.
    pub cost_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmfConfig {
    pub k: usize,
    pub divergence: Divergence,
    /// Stop once the cost decreases by less than this fraction.
    pub rel_tol: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for NmfConfig {
    fn default() -> Self {
        Self {
            k: 25,
            divergence: Divergence::Kl,
            rel_tol: 1e-4,
            max_iters: 1000,
            seed: 0,
        }
    }
}

impl NmfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(PofError::Config("K must be at least 1".into()));
        }
        if !(self.rel_tol >= 0.0) {
            return Err(PofError::Config("rel_tol must be non-negative".into()));
        }
        if self.max_iters == 0 {
            return Err(PofError::Config("max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// D(W | VH) summed over all entries.
pub fn nmf_cost(w: &Array2<f64>, v: &Array2<f64>, h: &Array2<f64>, divergence: Divergence) -> f64 {
    let vh = v.dot(h);
    cost_of(w, &vh, divergence)
}

fn cost_of(w: &Array2<f64>, vh: &Array2<f64>, divergence: Divergence) -> f64 {
    let mut total = 0.0;
    match divergence {
        Divergence::Kl => Zip::from(w).and(vh).for_each(|&x, &y| {
            let y = y.max(NMF_EPS);
            total += if x > 0.0 { x * (x / y).ln() - x + y } else { y };
        }),
        Divergence::Is => Zip::from(w).and(vh).for_each(|&x, &y| {
            let r = x.max(NMF_EPS) / y.max(NMF_EPS);
            total += r - r.ln() - 1.0;
        }),
    }
    total
}

/// H <- H * (V^T A) / (V^T B) where A, B depend on the divergence.
fn update_h(w: &Array2<f64>, v: &Array2<f64>, h: &mut Array2<f64>, divergence: Divergence) {
    let vh = v.dot(h).mapv(|y| y.max(NMF_EPS));
    let (num, den) = match divergence {
        Divergence::Kl => {
            let ratio = w / &vh;
            (v.t().dot(&ratio), v.t().dot(&Array2::ones(w.dim())))
        }
        Divergence::Is => {
            let wf = w.mapv(|x| x.max(NMF_EPS));
            let a = &wf / &vh.mapv(|y| y * y);
            (v.t().dot(&a), v.t().dot(&vh.mapv(f64::recip)))
        }
    };
    Zip::from(h).and(&num).and(&den).for_each(|x, &n, &d| *x *= n / d.max(NMF_EPS));
}

/// V <- V * (A H^T) / (B H^T).
fn update_v(w: &Array2<f64>, v: &mut Array2<f64>, h: &Array2<f64>, divergence: Divergence) {
    let vh = v.dot(h).mapv(|y| y.max(NMF_EPS));
    let (num, den) = match divergence {
        Divergence::Kl => {
            let ratio = w / &vh;
            (ratio.dot(&h.t()), Array2::ones(w.dim()).dot(&h.t()))
        }
        Divergence::Is => {
            let wf = w.mapv(|x| x.max(NMF_EPS));
            let a = &wf / &vh.mapv(|y| y * y);
            (a.dot(&h.t()), vh.mapv(f64::recip).dot(&h.t()))
        }
    };
    Zip::from(v).and(&num).and(&den).for_each(|x, &n, &d| *x *= n / d.max(NMF_EPS));
}

fn check_input(w: &Spectrogram, divergence: Divergence) -> Result<()> {
    if w.kind != divergence.expected_kind() {
        return Err(PofError::Validation(format!(
            "{divergence:?} NMF expects a {:?} spectrogram, got {:?}",
            divergence.expected_kind(),
            w.kind
        )));
    }
    if w.data().iter().all(|&x| x == 0.0) {
        return Err(PofError::Validation("NMF input is all zero".into()));
    }
    Ok(())
}

fn converged(trace: &[f64], rel_tol: f64) -> bool {
    match trace {
        [.., prev, cur] => *cur <= 0.0 || (prev - cur) / prev.abs() < rel_tol,
        _ => false,
    }
}

/// Joint fit from random Uniform(0.1, 1.1) initial factors.
pub fn nmf_fit(w: &Spectrogram, cfg: &NmfConfig) -> Result<(NmfModel, NmfFit)> {
    cfg.validate()?;
    let (n_bins, n_frames) = w.data().dim();
    let mut rng = stream_rng(cfg.seed, STREAM_NMF_INIT, 0);
    let v0 = Array2::from_shape_fn((n_bins, cfg.k), |_| rng.random_range(0.1..1.1));
    let h0 = Array2::from_shape_fn((cfg.k, n_frames), |_| rng.random_range(0.1..1.1));
    nmf_fit_from(w, v0, h0, cfg)
}

/// Joint fit from explicit initial factors.
pub fn nmf_fit_from(w: &Spectrogram, mut v: Array2<f64>, mut h: Array2<f64>, cfg: &NmfConfig) -> Result<(NmfModel, NmfFit)> {
    cfg.validate()?;
    check_input(w, cfg.divergence)?;
    let (n_bins, n_frames) = w.data().dim();
    if v.dim() != (n_bins, cfg.k) || h.dim() != (cfg.k, n_frames) {
        return Err(PofError::Dimension(format!(
            "initial factors {:?} and {:?} do not fit a {n_bins}x{n_frames} input with K = {}",
            v.dim(),
            h.dim(),
            cfg.k
        )));
    }
    if v.iter().chain(h.iter()).any(|x| !(*x >= 0.0 && x.is_finite())) {
        return Err(PofError::Validation("initial factors must be finite and non-negative".into()));
    }
    if cfg.k > n_bins.min(n_frames) {
        warn!("K = {} exceeds min(F, T) = {}", cfg.k, n_bins.min(n_frames));
    }
    let data = w.data();
    let mut trace = vec![nmf_cost(data, &v, &h, cfg.divergence)];
    for _ in 0..cfg.max_iters {
        update_v(data, &mut v, &h, cfg.divergence);
        update_h(data, &v, &mut h, cfg.divergence);
        trace.push(nmf_cost(data, &v, &h, cfg.divergence));
        if converged(&trace, cfg.rel_tol) {
            break;
        }
    }
    // Columns can only reach zero through underflow; keep the model valid.
    v.mapv_inplace(|x| x.max(NMF_EPS * NMF_EPS));
    let model = NmfModel::new(v, cfg.divergence)?;
    Ok((model, NmfFit { h, cost_trace: trace }))
}

/// Observed rows as a |mask|×T matrix. Accepts either a full-band
/// spectrogram or one that already holds only the masked rows.
fn observed_rows(w: &Spectrogram, n_bins: usize, mask: &BandMask) -> Result<Array2<f64>> {
    mask.check_within(n_bins)?;
    if w.n_bins() == n_bins {
        Ok(w.data().select(Axis(0), mask.kept()))
    } else if w.n_bins() == mask.len() {
        Ok(w.data().clone())
    } else {
        Err(PofError::Dimension(format!(
            "spectrogram has {} bins; expected {n_bins} (full) or {} (masked)",
            w.n_bins(),
            mask.len()
        )))
    }
}

/// Activations for band-limited input with the masked rows of V held fixed.
pub fn nmf_encode(w_bl: &Spectrogram, model: &NmfModel, mask: &BandMask, cfg: &NmfConfig) -> Result<NmfFit> {
    let obs = observed_rows(w_bl, model.n_bins(), mask)?;
    let v_bl = model.v.select(Axis(0), mask.kept());
    let h0 = Array2::ones((model.k(), obs.ncols()));
    nmf_encode_from(&obs, &v_bl, h0, model.divergence, cfg)
}

/// H-only updates for an already selected problem.
pub fn nmf_encode_from(
    obs: &Array2<f64>,
    v_bl: &Array2<f64>,
    mut h: Array2<f64>,
    divergence: Divergence,
    cfg: &NmfConfig,
) -> Result<NmfFit> {
    cfg.validate()?;
    if obs.iter().all(|&x| x == 0.0) {
        return Err(PofError::Validation("NMF input is all zero".into()));
    }
    if let Some(k) = v_bl.axis_iter(Axis(1)).position(|c| c.iter().all(|&x| x == 0.0)) {
        return Err(PofError::Validation(format!(
            "dictionary column {k} is zero on the observed band"
        )));
    }
    if v_bl.nrows() != obs.nrows() || h.dim() != (v_bl.ncols(), obs.ncols()) {
        return Err(PofError::Dimension("encode factors do not match the input".into()));
    }
    let mut trace = vec![nmf_cost(obs, v_bl, &h, divergence)];
    for _ in 0..cfg.max_iters {
        update_h(obs, v_bl, &mut h, divergence);
        trace.push(nmf_cost(obs, v_bl, &h, divergence));
        if converged(&trace, cfg.rel_tol) {
            break;
        }
    }
    Ok(NmfFit { h, cost_trace: trace })
}

/// Full-band V·H with the observed rows copied from `observed` (|mask|×T).
pub fn nmf_reconstruct(model: &NmfModel, h: &Array2<f64>, observed: &Array2<f64>, mask: &BandMask) -> Result<Array2<f64>> {
    mask.check_within(model.n_bins())?;
    if h.nrows() != model.k() || observed.dim() != (mask.len(), h.ncols()) {
        return Err(PofError::Dimension("reconstruction inputs do not match".into()));
    }
    let mut out = model.v.dot(h);
    for (i, &f) in mask.kept().iter().enumerate() {
        out.row_mut(f).assign(&observed.row(i));
    }
    Ok(out)
}

/// Encode the observed band, then synthesise the full band as V·H.
pub fn nmf_expand(w_bl: &Spectrogram, model: &NmfModel, mask: &BandMask, cfg: &NmfConfig) -> Result<Spectrogram> {
    let obs = observed_rows(w_bl, model.n_bins(), mask)?;
    let fit = nmf_encode(w_bl, model, mask, cfg)?;
    let data = nmf_reconstruct(model, &fit.h, &obs, mask)?;
    let n_fft = if w_bl.n_bins() == model.n_bins() { w_bl.n_fft } else { 2 * (model.n_bins() - 1) };
    Spectrogram::new(data, w_bl.kind, w_bl.sample_rate, n_fft, w_bl.hop)
}

const NMF_FORMAT: &str = "pof-nmf-model";
const NMF_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NmfFile {
    format: String,
    version: u32,
    #[serde(rename = "F")]
    n_bins: usize,
    #[serde(rename = "K")]
    k: usize,
    divergence: Divergence,
    /// Row-major F*K values.
    #[serde(rename = "V")]
    v: Vec<f64>,
}

/// JSON: `{"format": "pof-nmf-model", "version": 1, "F", "K", "divergence", "V"}`.
pub fn save_nmf_model(model: &NmfModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = NmfFile {
        format: NMF_FORMAT.into(),
        version: NMF_VERSION,
        n_bins: model.n_bins(),
        k: model.k(),
        divergence: model.divergence,
        v: model.v.iter().copied().collect(),
    };
    let text = serde_json::to_string_pretty(&file)
        .map_err(|e| PofError::Validation(format!("cannot serialise NMF model: {e}")))?;
    fs::write(path, text).map_err(|e| PofError::io(path, e))
}

pub fn load_nmf_model(path: impl AsRef<Path>) -> Result<NmfModel> {
    let path = path.as_ref();
    let parse = |message: String| PofError::Parse {
        path: path.to_path_buf(),
        message,
    };
    let text = fs::read_to_string(path).map_err(|e| PofError::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let file: NmfFile = serde_path_to_error::deserialize(de)
        .map_err(|e| parse(format!("field `{}`: {}", e.path(), e.inner())))?;
    if file.format != NMF_FORMAT {
        return Err(parse(format!("field `format`: expected \"{NMF_FORMAT}\", found {:?}", file.format)));
    }
    if file.version != NMF_VERSION {
        return Err(parse(format!("field `version`: unsupported version {}", file.version)));
    }
    let v = Array2::from_shape_vec((file.n_bins, file.k), file.v).map_err(|_| {
        PofError::Validation(format!("V does not hold F*K = {}*{} values", file.n_bins, file.k))
    })?;
    NmfModel::new(v, file.divergence)
}
