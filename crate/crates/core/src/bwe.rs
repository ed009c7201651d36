//! Bandwidth expansion: infer activations from the observed band, then
//! synthesise the missing bins from the full filter matrix.

use log::warn;
use ndarray::{Array1, Array2, Axis};

use crate::error::{PofError, Result};
use crate::estep::{floor_observations, infer_frames_from, initial_posterior};
use crate::model::{BandMask, FramePosterior, PoFModel, Spectrogram};
use crate::optim::LbfgsConfig;

/// How a full-band spectrum is formed from a frame posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReconMode {
    /// exp(Σ_l U_fl E_q[a_l]).
    #[default]
    LogDomain,
    /// Π_l E_q[exp(U_fl a_l)] = Π_l (1 - U_fl/ρ_l)^(-ν_l).
    Mgf,
}

impl std::str::FromStr for ReconMode {
    type Err = PofError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log" | "log-domain" | "log_domain" => Ok(ReconMode::LogDomain),
            "mgf" => Ok(ReconMode::Mgf),
            other => Err(PofError::Config(format!("unknown reconstruction mode {other:?} (expected log or mgf)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BweResult {
    /// Full-band spectrogram; rows in `mask` are the observations.
    pub reconstructed: Spectrogram,
    pub posteriors: Vec<FramePosterior>,
    /// Bound reached for each frame (NaN where inference failed).
    pub elbos: Vec<f64>,
    pub mask: BandMask,
    /// Frames whose inference failed and were filled from the prior.
    pub failed_frames: Vec<usize>,
}

/// Keeps the rows of U and gamma named by `mask`.
pub fn restrict_model(model: &PoFModel, mask: &BandMask) -> Result<PoFModel> {
    mask.check_within(model.n_bins())?;
    let u = model.u().select(Axis(0), mask.kept());
    let gamma = model.gamma().select(Axis(0), mask.kept());
    PoFModel::new(u, model.alpha().clone(), gamma, model.meta.clone())
}

/// Full-band spectrum for one posterior.
pub fn reconstruct_point(model: &PoFModel, post: &FramePosterior, mode: ReconMode) -> Result<Array1<f64>> {
    if post.len() != model.n_filters() {
        return Err(PofError::Dimension(format!(
            "posterior has {} filters, model has {}",
            post.len(),
            model.n_filters()
        )));
    }
    match mode {
        ReconMode::LogDomain => Ok(model.u().dot(&post.mean()).mapv(f64::exp)),
        ReconMode::Mgf => {
            let mut out = Array1::zeros(model.n_bins());
            for (f, row) in model.u().axis_iter(Axis(0)).enumerate() {
                let mut log_v = 0.0;
                for (l, &u) in row.iter().enumerate() {
                    let rho = post.rho()[l];
                    if u >= rho {
                        return Err(PofError::Infeasible(format!(
                            "E[exp(U a)] diverges at (f = {f}, l = {l}): U = {u} >= rho = {rho}"
                        )));
                    }
                    log_v -= post.nu()[l] * (-u / rho).ln_1p();
                }
                out[f] = log_v.exp();
            }
            Ok(out)
        }
    }
}

/// Observed rows as |mask|×T; accepts full-band or already masked input.
fn observed_band(w: &Spectrogram, n_bins: usize, mask: &BandMask) -> Result<Array2<f64>> {
    mask.check_within(n_bins)?;
    if w.n_bins() == n_bins {
        Ok(w.data().select(Axis(0), mask.kept()))
    } else if w.n_bins() == mask.len() {
        Ok(w.data().clone())
    } else {
        Err(PofError::Dimension(format!(
            "spectrogram has {} bins; expected {n_bins} (full band) or {} (masked)",
            w.n_bins(),
            mask.len()
        )))
    }
}

fn full_band_spectrogram(w: &Spectrogram, data: Array2<f64>) -> Result<Spectrogram> {
    let n_fft = 2 * (data.nrows() - 1);
    Spectrogram::new(data, w.kind, w.sample_rate, n_fft, w.hop)
}

/// Infers posteriors from the masked rows with the restricted model and
/// reconstructs all bins. Observed rows are copied through unchanged.
pub fn expand(
    w: &Spectrogram,
    model: &PoFModel,
    mask: &BandMask,
    cfg: &LbfgsConfig,
    mode: ReconMode,
    seed: u64,
) -> Result<BweResult> {
    let observed = observed_band(w, model.n_bins(), mask)?;
    let restricted = restrict_model(model, mask)?;
    let obs = floor_observations(&observed)?;
    let inits: Vec<FramePosterior> = (0..obs.ncols()).map(|t| initial_posterior(&restricted, seed, t)).collect();
    let results = infer_frames_from(&obs, &restricted, &inits, cfg)?;

    let prior_mean = FramePosterior::new(model.alpha().clone(), model.alpha().clone())?;
    let fallback = reconstruct_point(model, &prior_mean, ReconMode::LogDomain)?;
    let mut data = Array2::zeros((model.n_bins(), obs.ncols()));
    let mut posteriors = Vec::with_capacity(obs.ncols());
    let mut elbos = Vec::with_capacity(obs.ncols());
    let mut failed = Vec::new();
    for (t, r) in results.into_iter().enumerate() {
        match r {
            Ok(inf) => {
                data.column_mut(t).assign(&reconstruct_point(model, &inf.posterior, mode)?);
                posteriors.push(inf.posterior);
                elbos.push(inf.elbo);
            }
            Err(e) => {
                warn!("inference failed on frame {t} ({e}); filling it from the prior");
                data.column_mut(t).assign(&fallback);
                posteriors.push(prior_mean.clone());
                elbos.push(f64::NAN);
                failed.push(t);
            }
        }
    }
    for (i, &f) in mask.kept().iter().enumerate() {
        data.row_mut(f).assign(&observed.row(i));
    }
    Ok(BweResult {
        reconstructed: full_band_spectrogram(w, data)?,
        posteriors,
        elbos,
        mask: mask.clone(),
        failed_frames: failed,
    })
}

/// Reference expansion: every missing bin gets exp(mean_t log train[f, t]);
/// observed rows pass through.
pub fn mean_log_baseline(train: &Spectrogram, w: &Spectrogram, mask: &BandMask) -> Result<Spectrogram> {
    let n_bins = train.n_bins();
    let observed = observed_band(w, n_bins, mask)?;
    let floored = floor_observations(train.data())?;
    let mean_log = floored.mapv(f64::ln).mean_axis(Axis(1)).expect("training data has frames");
    let mut data = Array2::zeros((n_bins, observed.ncols()));
    for (f, mut row) in data.axis_iter_mut(Axis(0)).enumerate() {
        row.fill(mean_log[f].exp());
    }
    for (i, &f) in mask.kept().iter().enumerate() {
        data.row_mut(f).assign(&observed.row(i));
    }
    full_band_spectrogram(w, data)
}
