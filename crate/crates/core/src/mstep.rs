//! M-step objective, its gradients, and the variational EM driver.

use std::io::Write;
use std::time::Instant;

use log::{debug, warn};
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{PofError, Result};
use crate::estep::{floor_observations, infer_frames_from, initial_posterior};
use crate::model::{stream_rng, FramePosterior, ModelMeta, PoFModel, Spectrogram, STREAM_MODEL_INIT};
use crate::optim::{minimize, LbfgsConfig};
use crate::specfn::{digamma_unchecked, entropy_raw, ln_gamma_unchecked};

/// Posterior expectations from a completed E-step.
#[derive(Debug, Clone)]
pub struct SufficientStats {
    /// L×T matrix of E_q[a].
    pub expect_a: Array2<f64>,
    /// L×T matrix of E_q[log a].
    pub expect_log_a: Array2<f64>,
    pub posteriors: Vec<FramePosterior>,
    nu: Array2<f64>,
    rho: Array2<f64>,
}

impl SufficientStats {
    pub fn from_posteriors(posteriors: Vec<FramePosterior>) -> Result<Self> {
        let n_frames = posteriors.len();
        let n_filters = posteriors
            .first()
            .map(|p| p.len())
            .ok_or_else(|| PofError::Validation("no posteriors".into()))?;
        let mut nu = Array2::zeros((n_filters, n_frames));
        let mut rho = Array2::zeros((n_filters, n_frames));
        for (t, p) in posteriors.iter().enumerate() {
            if p.len() != n_filters {
                return Err(PofError::Dimension(format!(
                    "posterior {t} has {} filters, expected {n_filters}",
                    p.len()
                )));
            }
            nu.column_mut(t).assign(p.nu());
            rho.column_mut(t).assign(p.rho());
        }
        let expect_a = &nu / &rho;
        let expect_log_a = Array2::from_shape_fn(nu.dim(), |(l, t)| {
            digamma_unchecked(nu[[l, t]]) - rho[[l, t]].ln()
        });
        Ok(Self {
            expect_a,
            expect_log_a,
            posteriors,
            nu,
            rho,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.posteriors.len()
    }

    pub fn n_filters(&self) -> usize {
        self.nu.nrows()
    }

    /// Σ_t entropy of each frame's posterior.
    pub fn total_entropy(&self) -> f64 {
        self.nu
            .iter()
            .zip(self.rho.iter())
            .map(|(&n, &r)| entropy_raw(n, r))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    /// Number of filters L.
    pub n_filters: usize,
    /// Stop once the total bound improves by less than this fraction.
    pub rel_tol: f64,
    pub max_em_iters: usize,
    pub seed: u64,
    pub inner: LbfgsConfig,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            n_filters: 50,
            rel_tol: 1e-4,
            max_em_iters: 200,
            seed: 0,
            inner: LbfgsConfig::default(),
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_filters == 0 {
            return Err(PofError::Config("L must be at least 1".into()));
        }
        if !(self.rel_tol >= 0.0) {
            return Err(PofError::Config("rel_tol must be non-negative".into()));
        }
        self.inner.validate()
    }
}

fn check_dims(obs: &Array2<f64>, model: &PoFModel, stats: &SufficientStats) -> Result<()> {
    if obs.nrows() != model.n_bins() {
        return Err(PofError::Dimension(format!(
            "observations have {} bins, model has {}",
            obs.nrows(),
            model.n_bins()
        )));
    }
    if obs.ncols() != stats.n_frames() {
        return Err(PofError::Dimension(format!(
            "observations have {} frames, statistics have {}",
            obs.ncols(),
            stats.n_frames()
        )));
    }
    if stats.n_filters() != model.n_filters() {
        return Err(PofError::Dimension(format!(
            "statistics have {} filters, model has {}",
            stats.n_filters(),
            model.n_filters()
        )));
    }
    Ok(())
}

/// Per-bin slice of the M-step: everything Q needs for one row of U.
struct RowProblem<'a> {
    w: ArrayView1<'a, f64>,
    stats: &'a SufficientStats,
}

impl RowProblem<'_> {
    /// log Π_l E_q[exp(-u_l a_lt)] for frame t; `None` if infeasible.
    #[inline]
    fn log_mgf(&self, u: &[f64], t: usize) -> Option<f64> {
        let mut acc = 0.0;
        for (l, &ul) in u.iter().enumerate() {
            let rho = self.stats.rho[[l, t]];
            if ul <= -rho {
                return None;
            }
            acc -= self.stats.nu[[l, t]] * (ul / rho).ln_1p();
        }
        Some(acc)
    }

    /// Σ_t (-Σ_l u_l E[a_lt] - w_t Π_l E[exp(-u_l a_lt)]); this is the part
    /// of Q that depends on row u, divided by gamma_f. Optionally writes the
    /// gradient.
    fn evaluate(&self, u: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut total = 0.0;
        for t in 0..self.w.len() {
            let Some(lm) = self.log_mgf(u, t) else {
                return f64::NEG_INFINITY;
            };
            let wp = self.w[t] * lm.exp();
            let mut lin = 0.0;
            for (l, &ul) in u.iter().enumerate() {
                lin += ul * self.stats.expect_a[[l, t]];
            }
            total -= lin + wp;
            if let Some(g) = grad.as_deref_mut() {
                for (l, &ul) in u.iter().enumerate() {
                    let nu = self.stats.nu[[l, t]];
                    let rho = self.stats.rho[[l, t]];
                    g[l] += -self.stats.expect_a[[l, t]] + wp * nu / (rho + ul);
                }
            }
        }
        total
    }

    /// Σ_t (-Σ_l u_l E[a] + log w - w Π_l E[exp(-u_l a)]); the coefficient of
    /// gamma_f in Q.
    fn gamma_coefficient(&self, u: &[f64]) -> f64 {
        let base = self.evaluate(u, None);
        base + self.w.iter().map(|v| v.ln()).sum::<f64>()
    }
}

fn q_from_obs(obs: &Array2<f64>, model: &PoFModel, stats: &SufficientStats) -> f64 {
    let n_frames = obs.ncols() as f64;
    let u = model.u();
    let mut total = 0.0;
    for (f, row) in u.axis_iter(Axis(0)).enumerate() {
        let problem = RowProblem { w: obs.row(f), stats };
        let g = model.gamma()[f];
        let row = row.to_vec();
        let data_part = problem.evaluate(&row, None);
        if !data_part.is_finite() {
            return f64::NEG_INFINITY;
        }
        let log_w: f64 = obs.row(f).iter().map(|v| v.ln()).sum();
        total += n_frames * (g * g.ln() - ln_gamma_unchecked(g)) + (g - 1.0) * log_w + g * data_part;
    }
    for (l, &a) in model.alpha().iter().enumerate() {
        let s_log: f64 = stats.expect_log_a.row(l).sum();
        let s_a: f64 = stats.expect_a.row(l).sum();
        total += n_frames * (a * a.ln() - ln_gamma_unchecked(a)) + (a - 1.0) * s_log - a * s_a;
    }
    total
}

/// Q(U, alpha, gamma) = Σ_t E_q[log p(w_t, a_t)], constants included.
pub fn q_objective(spec: &Spectrogram, model: &PoFModel, stats: &SufficientStats) -> Result<f64> {
    let obs = floor_observations(spec.data())?;
    check_dims(&obs, model, stats)?;
    Ok(q_from_obs(&obs, model, stats))
}

/// dQ/dU[f, :] for one bin. Depends only on row `f` of U.
pub fn grad_u_row(f: usize, spec: &Spectrogram, model: &PoFModel, stats: &SufficientStats) -> Result<Array1<f64>> {
    let obs = floor_observations(spec.data())?;
    check_dims(&obs, model, stats)?;
    if f >= model.n_bins() {
        return Err(PofError::Dimension(format!("bin {f} out of range")));
    }
    let problem = RowProblem { w: obs.row(f), stats };
    let row = model.u().row(f).to_vec();
    let mut g = vec![0.0; row.len()];
    if !problem.evaluate(&row, Some(&mut g)).is_finite() {
        return Err(PofError::Infeasible(format!("row {f} of U violates U > -rho")));
    }
    let gamma_f = model.gamma()[f];
    Ok(g.into_iter().map(|v| gamma_f * v).collect())
}

/// dQ/dalpha.
pub fn grad_alpha(model: &PoFModel, stats: &SufficientStats) -> Result<Array1<f64>> {
    if stats.n_filters() != model.n_filters() {
        return Err(PofError::Dimension("statistics and model disagree on L".into()));
    }
    let n_frames = stats.n_frames() as f64;
    Ok(model
        .alpha()
        .iter()
        .enumerate()
        .map(|(l, &a)| {
            let s: f64 = stats.expect_log_a.row(l).sum() - stats.expect_a.row(l).sum();
            n_frames * (a.ln() + 1.0 - digamma_unchecked(a)) + s
        })
        .collect())
}

/// dQ/dgamma.
pub fn grad_gamma(spec: &Spectrogram, model: &PoFModel, stats: &SufficientStats) -> Result<Array1<f64>> {
    let obs = floor_observations(spec.data())?;
    check_dims(&obs, model, stats)?;
    let n_frames = obs.ncols() as f64;
    let mut out = Array1::zeros(model.n_bins());
    for f in 0..model.n_bins() {
        let problem = RowProblem { w: obs.row(f), stats };
        let coef = problem.gamma_coefficient(&model.u().row(f).to_vec());
        if !coef.is_finite() {
            return Err(PofError::Infeasible(format!("row {f} of U violates U > -rho")));
        }
        let g = model.gamma()[f];
        out[f] = n_frames * (g.ln() + 1.0 - digamma_unchecked(g)) + coef;
    }
    Ok(out)
}

/// Which parameter blocks an M-step updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MStepBlocks {
    pub u: bool,
    pub alpha: bool,
    pub gamma: bool,
}

impl Default for MStepBlocks {
    fn default() -> Self {
        Self {
            u: true,
            alpha: true,
            gamma: true,
        }
    }
}

/// Rows of the raw data that are identically zero. Their gamma is held at 1
/// and their U row at 0.
pub fn degenerate_rows(data: &Array2<f64>) -> Vec<bool> {
    data.axis_iter(Axis(0))
        .map(|row| row.iter().all(|&v| v == 0.0))
        .collect()
}

/// One M-step: maximise Q over U (row by row), then gamma, then alpha.
pub fn mstep(spec: &Spectrogram, model: &PoFModel, stats: &SufficientStats, cfg: &LbfgsConfig) -> Result<PoFModel> {
    mstep_with(spec, model, stats, cfg, MStepBlocks::default())
}

pub fn mstep_with(
    spec: &Spectrogram,
    model: &PoFModel,
    stats: &SufficientStats,
    cfg: &LbfgsConfig,
    blocks: MStepBlocks,
) -> Result<PoFModel> {
    let obs = floor_observations(spec.data())?;
    check_dims(&obs, model, stats)?;
    let frozen = degenerate_rows(spec.data());
    mstep_obs(&obs, &frozen, model, stats, cfg, blocks)
}

fn mstep_obs(
    obs: &Array2<f64>,
    frozen: &[bool],
    model: &PoFModel,
    stats: &SufficientStats,
    cfg: &LbfgsConfig,
    blocks: MStepBlocks,
) -> Result<PoFModel> {
    cfg.validate()?;
    let n_frames = obs.ncols() as f64;
    let mut next = model.clone();

    if blocks.u {
        let rows: Vec<Option<Vec<f64>>> = (0..model.n_bins())
            .into_par_iter()
            .map(|f| {
                if frozen[f] {
                    return None;
                }
                let problem = RowProblem { w: obs.row(f), stats };
                let x0 = model.u().row(f).to_vec();
                let objective = |u: &[f64], g: &mut [f64]| {
                    let v = problem.evaluate(u, Some(g));
                    if !v.is_finite() {
                        return f64::INFINITY;
                    }
                    g.iter_mut().for_each(|x| *x = -*x / n_frames);
                    -v / n_frames
                };
                match minimize(objective, &x0, cfg) {
                    Ok(r) => Some(r.x),
                    Err(e) => {
                        warn!("M-step for U row {f} failed ({e}); keeping previous row");
                        None
                    }
                }
            })
            .collect();
        let (u, _, _) = next.parts_mut();
        for (f, row) in rows.into_iter().enumerate() {
            if let Some(row) = row {
                u.row_mut(f).assign(&Array1::from(row));
            }
        }
    }

    if blocks.gamma {
        // Mean coefficient of gamma_f over frames under the updated U.
        let coefs: Vec<f64> = (0..next.n_bins())
            .into_par_iter()
            .map(|f| {
                let problem = RowProblem { w: obs.row(f), stats };
                problem.gamma_coefficient(&next.u().row(f).to_vec()) / n_frames
            })
            .collect();
        let active: Vec<usize> = (0..next.n_bins()).filter(|&f| !frozen[f]).collect();
        if !active.is_empty() {
            let x0: Vec<f64> = active.iter().map(|&f| next.gamma()[f].ln()).collect();
            let objective = |x: &[f64], g: &mut [f64]| {
                let mut total = 0.0;
                for (i, &f) in active.iter().enumerate() {
                    let v = x[i].exp();
                    if !(v.is_finite() && v > 0.0) {
                        return f64::INFINITY;
                    }
                    total += v * v.ln() - ln_gamma_unchecked(v) + v * coefs[f];
                    g[i] = -v * (v.ln() + 1.0 - digamma_unchecked(v) + coefs[f]);
                }
                -total
            };
            match minimize(objective, &x0, cfg) {
                Ok(r) => {
                    let (_, _, gamma) = next.parts_mut();
                    for (i, &f) in active.iter().enumerate() {
                        gamma[f] = r.x[i].exp();
                    }
                }
                Err(e) => warn!("M-step for gamma failed ({e}); keeping previous values"),
            }
        }
    }

    if blocks.alpha {
        let n_filters = next.n_filters();
        let mean_log: Vec<f64> = (0..n_filters).map(|l| stats.expect_log_a.row(l).sum() / n_frames).collect();
        let mean_a: Vec<f64> = (0..n_filters).map(|l| stats.expect_a.row(l).sum() / n_frames).collect();
        let x0: Vec<f64> = next.alpha().iter().map(|a| a.ln()).collect();
        let objective = |x: &[f64], g: &mut [f64]| {
            let mut total = 0.0;
            for l in 0..n_filters {
                let a = x[l].exp();
                if !(a.is_finite() && a > 0.0) {
                    return f64::INFINITY;
                }
                total += a * a.ln() - ln_gamma_unchecked(a) + (a - 1.0) * mean_log[l] - a * mean_a[l];
                g[l] = -a * (a.ln() + 1.0 - digamma_unchecked(a) + mean_log[l] - mean_a[l]);
            }
            -total
        };
        match minimize(objective, &x0, cfg) {
            Ok(r) => {
                let (_, alpha, _) = next.parts_mut();
                for l in 0..n_filters {
                    alpha[l] = r.x[l].exp();
                }
            }
            Err(e) => warn!("M-step for alpha failed ({e}); keeping previous values"),
        }
    }

    next.validate()?;
    Ok(next)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EmIteration {
    pub iter: usize,
    pub elbo: f64,
    /// Relative change from the previous iteration (0 for the first).
    pub delta: f64,
    pub secs: f64,
}

impl std::fmt::Display for EmIteration {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "iter={} elbo={} delta={} secs={:.3}",
            self.iter, self.elbo, self.delta, self.secs
        )
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: PoFModel,
    /// Total bound after each E-step.
    pub elbo_trace: Vec<f64>,
    /// Posteriors of the final E-step, one per frame.
    pub posteriors: Vec<FramePosterior>,
    pub converged: bool,
}

/// Initial model: U ~ N(0, 0.01^2), alpha = 1, gamma = 1; rows flagged in
/// `frozen` start (and stay) at U = 0.
pub fn initial_model(n_bins: usize, n_filters: usize, seed: u64, frozen: &[bool], meta: ModelMeta) -> Result<PoFModel> {
    let mut rng = stream_rng(seed, STREAM_MODEL_INIT, 0);
    let u = Array2::from_shape_fn((n_bins, n_filters), |(f, _)| {
        let v: f64 = rng.sample(StandardNormal);
        if frozen.get(f).copied().unwrap_or(false) {
            0.0
        } else {
            0.01 * v
        }
    });
    PoFModel::new(u, Array1::ones(n_filters), Array1::ones(n_bins), meta)
}

pub fn fit(spec: &Spectrogram, cfg: &EmConfig) -> Result<FitResult> {
    fit_with(spec, cfg, |_| {})
}

/// [`fit`], writing one `iter=.. elbo=.. delta=.. secs=..` line per EM
/// iteration to `sink`.
pub fn fit_logged(spec: &Spectrogram, cfg: &EmConfig, sink: &mut dyn Write) -> Result<FitResult> {
    let mut io_err = None;
    let res = fit_with(spec, cfg, |it| {
        if io_err.is_none() {
            if let Err(e) = writeln!(sink, "{it}") {
                io_err = Some(e);
            }
        }
    })?;
    if let Some(e) = io_err {
        warn!("training log write failed: {e}");
    }
    Ok(res)
}

pub fn fit_with(spec: &Spectrogram, cfg: &EmConfig, on_iter: impl FnMut(&EmIteration)) -> Result<FitResult> {
    cfg.validate()?;
    let meta = ModelMeta {
        sample_rate: spec.sample_rate,
        n_fft: spec.n_fft,
        ..ModelMeta::default()
    };
    let frozen = degenerate_rows(spec.data());
    let model = initial_model(spec.n_bins(), cfg.n_filters, cfg.seed, &frozen, meta)?;
    fit_from(spec, model, cfg, on_iter)
}

/// Variational EM starting from a given model.
pub fn fit_from(
    spec: &Spectrogram,
    mut model: PoFModel,
    cfg: &EmConfig,
    mut on_iter: impl FnMut(&EmIteration),
) -> Result<FitResult> {
    cfg.validate()?;
    if spec.n_frames() < 2 {
        return Err(PofError::Validation("training needs at least two frames".into()));
    }
    if spec.n_bins() != model.n_bins() || cfg.n_filters != model.n_filters() {
        return Err(PofError::Dimension(format!(
            "initial model is {}x{} but data/config need {}x{}",
            model.n_bins(),
            model.n_filters(),
            spec.n_bins(),
            cfg.n_filters
        )));
    }
    let obs = floor_observations(spec.data())?;
    let frozen = degenerate_rows(spec.data());
    let n_frozen = frozen.iter().filter(|&&z| z).count();
    if n_frozen > 0 {
        warn!("{n_frozen} frequency rows are identically zero; their gamma is fixed at 1 and U row at 0");
    }
    let first = obs[[0, 0]];
    if obs.iter().all(|&v| v == first) {
        warn!("training data is constant; the fitted model will be degenerate");
    }

    let started = Instant::now();
    let mut posteriors: Vec<FramePosterior> = (0..obs.ncols())
        .map(|t| initial_posterior(&model, cfg.seed, t))
        .collect();
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;

    for iter in 0..cfg.max_em_iters.max(1) {
        let e_start = Instant::now();
        let results = infer_frames_from(&obs, &model, &posteriors, &cfg.inner)?;
        debug!("E-step {iter}: {:.3}s", e_start.elapsed().as_secs_f64());
        let mut total = 0.0;
        for (t, r) in results.into_iter().enumerate() {
            match r {
                Ok(inf) => {
                    total += inf.elbo;
                    posteriors[t] = inf.posterior;
                }
                Err(e) => {
                    return Err(PofError::Numerical(format!(
                        "E-step failed on frame {t} at EM iteration {iter}: {e}"
                    )))
                }
            }
        }
        let delta = trace
            .last()
            .map(|&prev: &f64| (total - prev) / prev.abs().max(f64::MIN_POSITIVE))
            .unwrap_or(0.0);
        trace.push(total);
        on_iter(&EmIteration {
            iter,
            elbo: total,
            delta,
            secs: started.elapsed().as_secs_f64(),
        });
        if trace.len() >= 2 && delta < cfg.rel_tol {
            converged = true;
            break;
        }
        if iter + 1 == cfg.max_em_iters {
            break;
        }
        let stats = SufficientStats::from_posteriors(posteriors.clone())?;
        let m_start = Instant::now();
        model = mstep_obs(&obs, &frozen, &model, &stats, &cfg.inner, MStepBlocks::default())?;
        debug!("M-step {iter}: {:.3}s", m_start.elapsed().as_secs_f64());
    }
    Ok(FitResult {
        model,
        elbo_trace: trace,
        posteriors,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estep::elbo;
    use crate::model::sample;
    use crate::specfn::{digamma, ln_gamma, GammaParams, gamma_entropy, log_gamma_mgf};
    use ndarray::array;

    fn model(u: Array2<f64>, alpha: Vec<f64>, gamma: Vec<f64>) -> PoFModel {
        PoFModel::new(u, Array1::from(alpha), Array1::from(gamma), ModelMeta::default()).unwrap()
    }

    fn post(nu: Vec<f64>, rho: Vec<f64>) -> FramePosterior {
        FramePosterior::new(Array1::from(nu), Array1::from(rho)).unwrap()
    }

    fn unit_case() -> (Spectrogram, PoFModel, SufficientStats) {
        let spec = Spectrogram::from_magnitudes(array![[1.0]]).unwrap();
        let m = model(array![[0.0]], vec![1.0], vec![1.0]);
        let stats = SufficientStats::from_posteriors(vec![post(vec![1.0], vec![1.0])]).unwrap();
        (spec, m, stats)
    }

    #[test]
    fn single_cell_values() {
        let (spec, m, stats) = unit_case();
        assert!((q_objective(&spec, &m, &stats).unwrap() + 2.0).abs() < 1e-15);
        assert!(grad_u_row(0, &spec, &m, &stats).unwrap()[0].abs() < 1e-15);
        assert!(grad_alpha(&m, &stats).unwrap()[0].abs() < 1e-15);
        let euler = 0.5772156649015329;
        assert!((grad_gamma(&spec, &m, &stats).unwrap()[0] - euler).abs() < 1e-12);
    }

    /// Direct evaluation of Σ_t E_q[log p(w_t, a_t)] from the public kernels.
    fn naive_q(obs: &Array2<f64>, m: &PoFModel, posts: &[FramePosterior]) -> f64 {
        let mut q = 0.0;
        for (t, p) in posts.iter().enumerate() {
            for f in 0..m.n_bins() {
                let g = m.gamma()[f];
                let mut lin = 0.0;
                let mut log_mgf = 0.0;
                for l in 0..m.n_filters() {
                    let gp = GammaParams::new(p.nu()[l], p.rho()[l]).unwrap();
                    lin += m.u()[[f, l]] * p.nu()[l] / p.rho()[l];
                    log_mgf += log_gamma_mgf(m.u()[[f, l]], gp);
                }
                let w = obs[[f, t]];
                q += g * g.ln() - g * lin - ln_gamma(g).unwrap() + (g - 1.0) * w.ln() - w * g * log_mgf.exp();
            }
            for l in 0..m.n_filters() {
                let a = m.alpha()[l];
                let elog = digamma(p.nu()[l]).unwrap() - p.rho()[l].ln();
                q += a * a.ln() - ln_gamma(a).unwrap() + (a - 1.0) * elog - a * p.nu()[l] / p.rho()[l];
            }
        }
        q
    }

    fn random_problem(seed: u64, n_bins: usize, n_filters: usize, n_frames: usize) -> (Spectrogram, PoFModel, SufficientStats) {
        let mut rng = stream_rng(seed, 0, 0);
        let u = Array2::from_shape_fn((n_bins, n_filters), |_| 0.5 * rng.sample::<f64, _>(StandardNormal));
        let alpha = (0..n_filters).map(|_| rng.random_range(0.3..4.0)).collect();
        let gamma = (0..n_bins).map(|_| rng.random_range(0.5..8.0)).collect();
        let m = model(u, alpha, gamma);
        let min_rates = m.min_feasible_rates();
        let posts: Vec<_> = (0..n_frames)
            .map(|_| {
                post(
                    (0..n_filters).map(|_| rng.random_range(0.5..4.0)).collect(),
                    (0..n_filters).map(|l| min_rates[l] + rng.random_range(0.3..3.0)).collect(),
                )
            })
            .collect();
        let data = Array2::from_shape_fn((n_bins, n_frames), |_| rng.random_range(0.05..3.0));
        (
            Spectrogram::from_magnitudes(data).unwrap(),
            m,
            SufficientStats::from_posteriors(posts).unwrap(),
        )
    }

    #[test]
    fn q_matches_naive_summation() {
        for seed in 0..5 {
            let (spec, m, stats) = random_problem(seed, 7, 3, 5);
            let q = q_objective(&spec, &m, &stats).unwrap();
            let naive = naive_q(spec.data(), &m, &stats.posteriors);
            assert!((q - naive).abs() <= 1e-10 * naive.abs().max(1.0), "{q} vs {naive}");
        }
    }

    #[test]
    fn q_plus_entropy_is_total_elbo() {
        let (spec, m, stats) = random_problem(11, 6, 2, 4);
        let q = q_objective(&spec, &m, &stats).unwrap();
        let total: f64 = stats
            .posteriors
            .iter()
            .enumerate()
            .map(|(t, p)| elbo(spec.data().column(t), &m, p).unwrap())
            .sum();
        let ent: f64 = stats
            .posteriors
            .iter()
            .flat_map(|p| (0..p.len()).map(move |l| gamma_entropy(GammaParams::new(p.nu()[l], p.rho()[l]).unwrap())))
            .sum();
        assert!((q + ent - total).abs() <= 1e-10 * total.abs());
        assert!((stats.total_entropy() - ent).abs() <= 1e-12 * ent.abs().max(1.0));
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let s: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        d / s.max(1e-300)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = 1e-6;
        for seed in 0..10 {
            let (spec, m, stats) = random_problem(100 + seed, 6, 3, 5);
            let q_at = |mm: &PoFModel| q_objective(&spec, mm, &stats).unwrap();
            let perturbed = |which: usize, i: usize, j: usize, d: f64| {
                let mut mm = m.clone();
                let (u, a, g) = mm.parts_mut();
                match which {
                    0 => u[[i, j]] += d,
                    1 => a[i] += d,
                    _ => g[i] += d,
                }
                q_at(&mm)
            };
            for f in 0..6 {
                let ana = grad_u_row(f, &spec, &m, &stats).unwrap().to_vec();
                let num: Vec<f64> = (0..3).map(|l| (perturbed(0, f, l, h) - perturbed(0, f, l, -h)) / (2.0 * h)).collect();
                assert!(rel_err(&ana, &num) < 1e-5, "U row {f}: {ana:?} vs {num:?}");
            }
            let ana = grad_alpha(&m, &stats).unwrap().to_vec();
            let num: Vec<f64> = (0..3).map(|l| (perturbed(1, l, 0, h) - perturbed(1, l, 0, -h)) / (2.0 * h)).collect();
            assert!(rel_err(&ana, &num) < 1e-5);
            let ana = grad_gamma(&spec, &m, &stats).unwrap().to_vec();
            let num: Vec<f64> = (0..6).map(|f| (perturbed(2, f, 0, h) - perturbed(2, f, 0, -h)) / (2.0 * h)).collect();
            assert!(rel_err(&ana, &num) < 1e-5);
        }
    }

    #[test]
    fn u_row_gradient_is_separable() {
        let (spec, m, stats) = random_problem(3, 5, 2, 4);
        let before = grad_u_row(2, &spec, &m, &stats).unwrap();
        let mut other = m.clone();
        other.parts_mut().0[[4, 1]] += 0.37;
        other.parts_mut().0[[0, 0]] -= 0.11;
        let after = grad_u_row(2, &spec, &other, &stats).unwrap();
        assert!(before.iter().zip(after.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn alpha_gradient_blows_up_near_zero() {
        let stats = SufficientStats::from_posteriors(vec![post(vec![1.0], vec![1.0])]).unwrap();
        let g1 = grad_alpha(&model(array![[0.0]], vec![1e-3], vec![1.0]), &stats).unwrap()[0];
        let g2 = grad_alpha(&model(array![[0.0]], vec![1e-8], vec![1.0]), &stats).unwrap()[0];
        assert!(g1 > 100.0 && g2 > g1 * 1e3);
    }

    #[test]
    fn duplicated_frame_doubles_gamma_gradient() {
        let (spec, m, stats) = random_problem(21, 4, 2, 1);
        let g1 = grad_gamma(&spec, &m, &stats).unwrap();
        let dup = ndarray::concatenate(Axis(1), &[spec.data().view(), spec.data().view()]).unwrap();
        let spec2 = Spectrogram::from_magnitudes(dup).unwrap();
        let p = stats.posteriors[0].clone();
        let stats2 = SufficientStats::from_posteriors(vec![p.clone(), p]).unwrap();
        let g2 = grad_gamma(&spec2, &m, &stats2).unwrap();
        for f in 0..4 {
            assert!((g2[f] - 2.0 * g1[f]).abs() <= 1e-12 * g1[f].abs().max(1.0));
        }
    }

    #[test]
    fn mstep_does_not_decrease_q() {
        for seed in 0..20 {
            let (spec, m, stats) = random_problem(200 + seed, 8, 3, 10);
            let before = q_objective(&spec, &m, &stats).unwrap();
            let next = mstep(&spec, &m, &stats, &LbfgsConfig::default()).unwrap();
            let after = q_objective(&spec, &next, &stats).unwrap();
            assert!(after >= before - 1e-12 * before.abs(), "{before} -> {after}");
        }
    }

    #[test]
    fn stationary_instance_is_unchanged() {
        let (spec, m, stats) = unit_case();
        // U and alpha are stationary; gamma is not (gradient is Euler's constant).
        let blocks = MStepBlocks { gamma: false, ..Default::default() };
        let next = mstep_with(&spec, &m, &stats, &LbfgsConfig::default(), blocks).unwrap();
        assert!((next.u()[[0, 0]]).abs() < 1e-9);
        assert!((next.alpha()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn alpha_recovered_with_true_filters() {
        let mut rng = stream_rng(31, 0, 0);
        let n_bins = 40;
        let u = Array2::from_shape_fn((n_bins, 3), |_| 0.7 * rng.sample::<f64, _>(StandardNormal));
        let truth = model(u.clone(), vec![0.5, 1.5, 4.0], vec![30.0; n_bins]);
        let (spec, _) = sample(&truth, 2000, 5).unwrap();
        let mut m = model(u, vec![1.0; 3], vec![1.0; n_bins]);
        let cfg = LbfgsConfig::default();
        let obs = floor_observations(spec.data()).unwrap();
        let mut posts: Vec<_> = (0..2000).map(|t| initial_posterior(&m, 0, t)).collect();
        let blocks = MStepBlocks { u: false, ..Default::default() };
        for _ in 0..15 {
            let res = infer_frames_from(&obs, &m, &posts, &cfg).unwrap();
            posts = res.into_iter().map(|r| r.unwrap().posterior).collect();
            let stats = SufficientStats::from_posteriors(posts.clone()).unwrap();
            m = mstep_with(&spec, &m, &stats, &cfg, blocks).unwrap();
        }
        for l in 0..3 {
            let (got, want) = (m.alpha()[l], truth.alpha()[l]);
            assert!((got - want).abs() <= 0.2 * want, "alpha[{l}] = {got}, truth {want}");
        }
    }

    #[test]
    fn em_trace_is_monotone_and_deterministic() {
        let mut rng = stream_rng(41, 0, 0);
        let u = Array2::from_shape_fn((16, 3), |_| 0.6 * rng.sample::<f64, _>(StandardNormal));
        let truth = model(u, vec![1.0, 0.5, 2.0], vec![15.0; 16]);
        let (spec, _) = sample(&truth, 120, 3).unwrap();
        let cfg = EmConfig { n_filters: 3, rel_tol: 0.0, max_em_iters: 20, seed: 4, ..Default::default() };
        let mut log = Vec::new();
        let a = fit_logged(&spec, &cfg, &mut log).unwrap();
        assert_eq!(a.elbo_trace.len(), 20);
        for w in a.elbo_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "{} -> {}", w[0], w[1]);
        }
        let text = String::from_utf8(log).unwrap();
        assert_eq!(text.lines().count(), 20);
        assert!(text.lines().next().unwrap().starts_with("iter=0 elbo="));
        let b = fit(&spec, &cfg).unwrap();
        assert_eq!(a.elbo_trace, b.elbo_trace);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn zero_rows_are_frozen() {
        let mut data = Array2::from_shape_fn((4, 30), |(f, t)| 1.0 + ((f * 7 + t * 3) % 5) as f64);
        data.row_mut(2).fill(0.0);
        let spec = Spectrogram::from_magnitudes(data).unwrap();
        let cfg = EmConfig { n_filters: 2, max_em_iters: 4, ..Default::default() };
        let res = fit(&spec, &cfg).unwrap();
        assert_eq!(res.model.gamma()[2], 1.0);
        assert!(res.model.u().row(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let spec = Spectrogram::from_magnitudes(Array2::zeros((3, 5))).unwrap();
        assert!(fit(&spec, &EmConfig { n_filters: 2, ..Default::default() }).is_err());
        let spec = Spectrogram::from_magnitudes(Array2::ones((3, 1))).unwrap();
        assert!(fit(&spec, &EmConfig { n_filters: 2, ..Default::default() }).is_err());
        let spec = Spectrogram::from_magnitudes(Array2::ones((3, 5))).unwrap();
        assert!(fit(&spec, &EmConfig { n_filters: 0, ..Default::default() }).is_err());
    }
}
