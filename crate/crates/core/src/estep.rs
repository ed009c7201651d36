//! Mean-field posterior inference for single frames.
//!
//! Each frame's activations get an independent Gamma(nu, rho) factor. The
//! variational lower bound and its gradient are evaluated in closed form
//! and maximised with L-BFGS over (log nu, log rho).

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;

use crate::error::{PofError, Result};
use crate::model::{stream_rng, FramePosterior, PoFModel, Spectrogram, STREAM_POSTERIOR_INIT};
use crate::optim::{minimize, LbfgsConfig, OptimStatus};
use crate::specfn::{
    digamma_unchecked, entropy_raw, entropy_shape_part_deriv, ln_gamma_unchecked, trigamma_unchecked,
};

/// Relative observation floor: entries below `OBS_FLOOR * max(W)` are raised to it.
pub const OBS_FLOOR: f64 = 1e-10;

/// Shape and rate of the gamma distribution used to draw initial posteriors.
pub const INIT_SHAPE: f64 = 100.0;
pub const INIT_RATE: f64 = 100.0;

/// Raise every entry to at least `OBS_FLOOR * max(W)` so logs stay finite.
pub fn floor_observations(data: &Array2<f64>) -> Result<Array2<f64>> {
    let max = data.iter().fold(0.0f64, |m, &v| m.max(v));
    if !(max > 0.0) || !max.is_finite() {
        return Err(PofError::Validation(
            "observations are all zero (or not finite); nothing to model".into(),
        ));
    }
    let floor = OBS_FLOOR * max;
    Ok(data.mapv(|v| v.max(floor)))
}

/// Cached subexpressions shared by the bound and its gradient.
#[derive(Debug, Clone)]
pub struct ElboWorkspace {
    /// Σ_l log E_q[exp(-U[f, l] a_l)] per bin.
    pub log_mgf_sums: Array1<f64>,
    pub expect_a: Array1<f64>,
    pub expect_log_a: Array1<f64>,
    // log1p(U[f, l] / rho[l]), row-major F×L.
    log1p_ratio: Vec<f64>,
}

impl ElboWorkspace {
    pub fn new(n_bins: usize, n_filters: usize) -> Self {
        Self {
            log_mgf_sums: Array1::zeros(n_bins),
            expect_a: Array1::zeros(n_filters),
            expect_log_a: Array1::zeros(n_filters),
            log1p_ratio: vec![0.0; n_bins * n_filters],
        }
    }
}

/// One frame's observation together with the parts of the bound that do
/// not depend on the variational parameters.
struct FrameProblem<'a> {
    model: &'a PoFModel,
    w: ArrayView1<'a, f64>,
    constant: f64,
}

impl<'a> FrameProblem<'a> {
    fn new(model: &'a PoFModel, w: ArrayView1<'a, f64>) -> Result<Self> {
        if w.len() != model.n_bins() {
            return Err(PofError::Dimension(format!(
                "frame has {} bins but model has {}",
                w.len(),
                model.n_bins()
            )));
        }
        if let Some((f, v)) = w.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
            return Err(PofError::Validation(format!(
                "observation bin {f} = {v}; apply floor_observations first"
            )));
        }
        let mut constant = 0.0;
        for (&g, &wf) in model.gamma().iter().zip(w.iter()) {
            constant += g * g.ln() - ln_gamma_unchecked(g) + (g - 1.0) * wf.ln();
        }
        for &a in model.alpha() {
            constant += a * a.ln() - ln_gamma_unchecked(a);
        }
        Ok(Self { model, w, constant })
    }

    /// Evaluates the bound; fills the gradients when requested. Returns
    /// `-inf` when some U[f, l] <= -rho[l].
    fn evaluate(
        &self,
        nu: &[f64],
        rho: &[f64],
        ws: &mut ElboWorkspace,
        grad: Option<(&mut [f64], &mut [f64])>,
    ) -> f64 {
        let u = self.model.u();
        let gamma = self.model.gamma();
        let alpha = self.model.alpha();
        let n_filters = nu.len();

        let mut prior_and_entropy = 0.0;
        for l in 0..n_filters {
            let ea = nu[l] / rho[l];
            let elog = digamma_unchecked(nu[l]) - rho[l].ln();
            ws.expect_a[l] = ea;
            ws.expect_log_a[l] = elog;
            prior_and_entropy += (alpha[l] - 1.0) * elog - alpha[l] * ea + entropy_raw(nu[l], rho[l]);
        }

        let mut likelihood = 0.0;
        for (f, row) in u.axis_iter(Axis(0)).enumerate() {
            let mut log_mgf = 0.0;
            let mut lin = 0.0;
            let ratios = &mut ws.log1p_ratio[f * n_filters..(f + 1) * n_filters];
            for l in 0..n_filters {
                let ufl = row[l];
                if ufl <= -rho[l] {
                    return f64::NEG_INFINITY;
                }
                let r = (ufl / rho[l]).ln_1p();
                ratios[l] = r;
                log_mgf -= nu[l] * r;
                lin += ufl * ws.expect_a[l];
            }
            ws.log_mgf_sums[f] = log_mgf;
            likelihood -= gamma[f] * (lin + self.w[f] * log_mgf.exp());
        }
        let total = self.constant + likelihood + prior_and_entropy;

        if let Some((d_nu, d_rho)) = grad {
            for l in 0..n_filters {
                d_nu[l] = (alpha[l] - 1.0) * trigamma_unchecked(nu[l]) + entropy_shape_part_deriv(nu[l])
                    - alpha[l] / rho[l];
                let nr2 = nu[l] / rho[l] / rho[l];
                d_rho[l] = alpha[l] * (nr2 - 1.0 / rho[l]);
            }
            let mut acc_rho = vec![0.0; n_filters];
            for (f, row) in u.axis_iter(Axis(0)).enumerate() {
                let wp = self.w[f] * ws.log_mgf_sums[f].exp();
                let g = gamma[f];
                let ratios = &ws.log1p_ratio[f * n_filters..(f + 1) * n_filters];
                for l in 0..n_filters {
                    let ufl = row[l];
                    d_nu[l] += g * (wp * ratios[l] - ufl / rho[l]);
                    acc_rho[l] += g * (ufl - wp * ufl / (1.0 + ufl / rho[l]));
                }
            }
            for l in 0..n_filters {
                d_rho[l] += nu[l] / rho[l] / rho[l] * acc_rho[l];
            }
        }
        total
    }
}

fn check_posterior(model: &PoFModel, post: &FramePosterior) -> Result<()> {
    if post.len() != model.n_filters() {
        return Err(PofError::Dimension(format!(
            "posterior has {} filters but model has {}",
            post.len(),
            model.n_filters()
        )));
    }
    Ok(())
}

/// Full variational lower bound for one frame, constants included.
/// `w` must be strictly positive (see [`floor_observations`]).
pub fn elbo(w: ArrayView1<'_, f64>, model: &PoFModel, post: &FramePosterior) -> Result<f64> {
    check_posterior(model, post)?;
    let problem = FrameProblem::new(model, w)?;
    let mut ws = ElboWorkspace::new(model.n_bins(), model.n_filters());
    Ok(problem.evaluate(
        post.nu().as_slice().unwrap(),
        post.rho().as_slice().unwrap(),
        &mut ws,
        None,
    ))
}

/// Gradient of [`elbo`] with respect to (nu, rho).
pub fn elbo_grad(
    w: ArrayView1<'_, f64>,
    model: &PoFModel,
    post: &FramePosterior,
) -> Result<(Array1<f64>, Array1<f64>)> {
    check_posterior(model, post)?;
    let problem = FrameProblem::new(model, w)?;
    let n = model.n_filters();
    let mut ws = ElboWorkspace::new(model.n_bins(), n);
    let mut d_nu = vec![0.0; n];
    let mut d_rho = vec![0.0; n];
    let value = problem.evaluate(
        post.nu().as_slice().unwrap(),
        post.rho().as_slice().unwrap(),
        &mut ws,
        Some((&mut d_nu, &mut d_rho)),
    );
    if !value.is_finite() {
        return Err(PofError::Infeasible(
            "bound is -inf at this posterior (some U[f,l] <= -rho[l])".into(),
        ));
    }
    Ok((Array1::from(d_nu), Array1::from(d_rho)))
}

/// Result of optimising one frame's posterior.
#[derive(Debug, Clone)]
pub struct FrameInference {
    pub posterior: FramePosterior,
    pub elbo: f64,
    pub status: OptimStatus,
    pub iters: usize,
}

/// Maximise the bound for one frame starting from `init`.
pub fn infer_frame(
    w: ArrayView1<'_, f64>,
    model: &PoFModel,
    init: &FramePosterior,
    cfg: &LbfgsConfig,
) -> Result<FrameInference> {
    check_posterior(model, init)?;
    let problem = FrameProblem::new(model, w)?;
    let n = model.n_filters();
    let mut ws = ElboWorkspace::new(model.n_bins(), n);
    let start = problem.evaluate(
        init.nu().as_slice().unwrap(),
        init.rho().as_slice().unwrap(),
        &mut ws,
        None,
    );
    if !start.is_finite() {
        return Err(PofError::Infeasible(
            "initial posterior violates rho > -U for some bin".into(),
        ));
    }

    // Coordinates: log shape and log mean. The bound is much better
    // conditioned here than in (log nu, log rho), whose mean-preserving
    // direction is nearly flat.
    let x0: Vec<f64> = init
        .nu()
        .iter()
        .map(|v| v.ln())
        .chain(init.nu().iter().zip(init.rho()).map(|(a, b)| a.ln() - b.ln()))
        .collect();
    let mut nu = vec![0.0; n];
    let mut rho = vec![0.0; n];
    let mut d_nu = vec![0.0; n];
    let mut d_rho = vec![0.0; n];
    let objective = |x: &[f64], g: &mut [f64]| -> f64 {
        for l in 0..n {
            nu[l] = x[l].exp();
            rho[l] = (x[l] - x[n + l]).exp();
        }
        if nu.iter().chain(rho.iter()).any(|v| !(v.is_finite() && *v > 0.0)) {
            return f64::INFINITY;
        }
        let value = problem.evaluate(&nu, &rho, &mut ws, Some((&mut d_nu, &mut d_rho)));
        if !value.is_finite() {
            return f64::INFINITY;
        }
        for l in 0..n {
            g[l] = -(nu[l] * d_nu[l] + rho[l] * d_rho[l]);
            g[n + l] = rho[l] * d_rho[l];
        }
        -value
    };
    let res = minimize(objective, &x0, cfg)?;
    if res.iters == 0 || -res.f <= start {
        return Ok(FrameInference {
            posterior: init.clone(),
            elbo: start,
            status: res.status,
            iters: res.iters,
        });
    }
    let nu: Array1<f64> = res.x[..n].iter().map(|v| v.exp()).collect();
    let rho: Array1<f64> = (0..n).map(|l| (res.x[l] - res.x[n + l]).exp()).collect();
    Ok(FrameInference {
        posterior: FramePosterior::from_parts_unchecked(nu, rho),
        elbo: -res.f,
        status: res.status,
        iters: res.iters,
    })
}

/// Initial posterior for frame `index`: Gamma(100, 100) draws for every nu
/// and rho. Where a draw of rho would violate rho > -U[f, l], both nu and
/// rho are scaled up together (keeping the mean) until rho is twice the
/// smallest feasible rate.
pub fn initial_posterior(model: &PoFModel, seed: u64, index: usize) -> FramePosterior {
    let mut rng = stream_rng(seed, STREAM_POSTERIOR_INIT, index as u64);
    let dist = Gamma::new(INIT_SHAPE, 1.0 / INIT_RATE).expect("constant parameters");
    let min_rates = model.min_feasible_rates();
    let n = model.n_filters();
    let mut nu = Array1::zeros(n);
    let mut rho = Array1::zeros(n);
    for l in 0..n {
        let mut a: f64 = dist.sample(&mut rng);
        let mut b: f64 = dist.sample(&mut rng);
        let needed = 2.0 * min_rates[l];
        if b < needed {
            let scale = needed / b;
            a *= scale;
            b = needed;
        }
        nu[l] = a;
        rho[l] = b;
    }
    FramePosterior::from_parts_unchecked(nu, rho)
}

/// Floors the spectrogram and checks it against the model.
pub(crate) fn prepared_observations(spec: &Spectrogram, model: &PoFModel) -> Result<Array2<f64>> {
    if spec.n_bins() != model.n_bins() {
        return Err(PofError::Dimension(format!(
            "spectrogram has {} bins but model has {}",
            spec.n_bins(),
            model.n_bins()
        )));
    }
    floor_observations(spec.data())
}

/// Independent inference for every frame, each initialised with
/// [`initial_posterior`] seeded by its frame index. Per-frame failures are
/// returned in place; only dimension/validation problems with the whole
/// input are fatal.
pub fn infer_frames(
    spec: &Spectrogram,
    model: &PoFModel,
    cfg: &LbfgsConfig,
    seed: u64,
) -> Result<Vec<Result<FrameInference>>> {
    let obs = prepared_observations(spec, model)?;
    let inits: Vec<FramePosterior> = (0..spec.n_frames())
        .map(|t| initial_posterior(model, seed, t))
        .collect();
    infer_frames_from(&obs, model, &inits, cfg)
}

/// Like [`infer_frames`] but with explicit initial posteriors and
/// already-floored observations.
pub fn infer_frames_from(
    obs: &Array2<f64>,
    model: &PoFModel,
    inits: &[FramePosterior],
    cfg: &LbfgsConfig,
) -> Result<Vec<Result<FrameInference>>> {
    if inits.len() != obs.ncols() {
        return Err(PofError::Dimension(format!(
            "{} initial posteriors for {} frames",
            inits.len(),
            obs.ncols()
        )));
    }
    cfg.validate()?;
    Ok((0..obs.ncols())
        .into_par_iter()
        .map(|t| infer_frame(obs.column(t), model, &inits[t], cfg))
        .collect())
}
