//! The `pof` command line.

mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bwe::{expand, ReconMode};
use crate::dsp::{band_mask, load_wav, log_spectral_distance, stft_magnitude, stft_power};
use crate::error::{PofError, Result};
use crate::estep::infer_frames;
use crate::features::{add_deltas, median_smooth, mfcc, pofc, save_features_csv};
use crate::model::{
    load_model, load_spectrogram, sample, save_model, save_posteriors, save_spectrogram, BandMask, PosteriorRecord,
    Spectrogram, SpectrumKind,
};
use crate::mstep::fit_logged;
use crate::nmf::{load_nmf_model, nmf_expand, nmf_fit, save_nmf_model, Divergence, NmfConfig};

pub use config::{config_resolve, parse_config_text, ResolvedConfig, KEYS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "pof", version, about = "Product-of-filters models of audio spectrograms")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Random seed (default 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat key=value configuration file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct StftArgs {
    #[arg(long)]
    n_fft: Option<usize>,
    #[arg(long)]
    hop: Option<usize>,
}

#[derive(Debug, Args)]
struct BandArgs {
    /// Lower edge of the observed band in Hz (default 400).
    #[arg(long)]
    low_hz: Option<f64>,
    /// Upper edge of the observed band in Hz (default 3400).
    #[arg(long)]
    high_hz: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FeatureKind {
    Pofc,
    Mfcc,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Log,
    Mgf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DivergenceArg {
    Kl,
    Is,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// WAV to POFS spectrogram.
    Stft {
        input: PathBuf,
        #[arg(short)]
        o: PathBuf,
        /// Write |X|^2 instead of |X|.
        #[arg(long)]
        power: bool,
        #[command(flatten)]
        stft: StftArgs,
    },
    /// Fit a PoF model to one or more spectrograms (frames are pooled).
    Train {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(short)]
        o: PathBuf,
        /// Number of filters.
        #[arg(short = 'L')]
        filters: Option<usize>,
        #[arg(long)]
        rel_tol: Option<f64>,
        #[arg(long)]
        max_em_iters: Option<usize>,
        /// Write the iteration log here instead of standard error.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        stft: StftArgs,
    },
    /// Infer per-frame posteriors and write them as JSON.
    Encode {
        input: PathBuf,
        #[arg(short, long)]
        model: PathBuf,
        #[arg(short)]
        o: PathBuf,
        #[command(flatten)]
        stft: StftArgs,
    },
    /// Bandwidth expansion with a PoF model.
    Bwe {
        input: PathBuf,
        #[arg(short, long)]
        model: PathBuf,
        #[arg(short)]
        o: PathBuf,
        #[arg(long, value_enum, default_value = "log")]
        mode: ModeArg,
        /// Also write the posteriors as JSON.
        #[arg(long)]
        posteriors: Option<PathBuf>,
        #[command(flatten)]
        band: BandArgs,
        #[command(flatten)]
        stft: StftArgs,
    },
    /// Fit an NMF dictionary.
    NmfTrain {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(short)]
        o: PathBuf,
        #[arg(short = 'K')]
        k: Option<usize>,
        #[arg(long, value_enum, default_value = "kl")]
        divergence: DivergenceArg,
        #[command(flatten)]
        stft: StftArgs,
    },
    /// Bandwidth expansion with an NMF dictionary.
    NmfBwe {
        input: PathBuf,
        #[arg(short, long)]
        model: PathBuf,
        #[arg(short)]
        o: PathBuf,
        #[command(flatten)]
        band: BandArgs,
        #[command(flatten)]
        stft: StftArgs,
    },
    /// PoFC or MFCC features as CSV.
    Features {
        input: PathBuf,
        #[arg(short)]
        o: PathBuf,
        #[arg(long, value_enum)]
        kind: FeatureKind,
        /// PoF model (required for pofc).
        #[arg(short, long)]
        model: Option<PathBuf>,
        /// Append first and second differences.
        #[arg(long)]
        deltas: bool,
        /// Median-smooth every feature row.
        #[arg(long)]
        smooth: bool,
        #[arg(long)]
        median_length: Option<usize>,
        #[arg(long)]
        n_coeffs: Option<usize>,
        #[arg(long)]
        n_mels: Option<usize>,
        #[command(flatten)]
        stft: StftArgs,
    },
    /// Log-spectral distance in dB between two spectrograms.
    EvalLsd {
        a: PathBuf,
        b: PathBuf,
        /// Only score bins outside the observed band.
        #[arg(long)]
        missing: bool,
        #[command(flatten)]
        band: BandArgs,
    },
    /// Sample spectrograms from a PoF model.
    Synth {
        #[arg(short, long)]
        model: PathBuf,
        #[arg(short = 'T')]
        frames: usize,
        #[arg(short)]
        o: PathBuf,
    },
}

/// Maps a library error to the process exit code.
pub fn exit_code(err: &PofError) -> i32 {
    match err {
        PofError::Numerical(_) | PofError::Infeasible(_) | PofError::Domain { .. } => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn overrides(cli: &Cli) -> Vec<(&'static str, String)> {
    let mut out = Vec::new();
    let mut push = |key: &'static str, v: Option<String>| {
        if let Some(v) = v {
            out.push((key, v));
        }
    };
    push("seed", cli.seed.map(|v| v.to_string()));
    let stft = |s: &StftArgs| (s.n_fft.map(|v| v.to_string()), s.hop.map(|v| v.to_string()));
    let band = |b: &BandArgs| (b.low_hz.map(|v| v.to_string()), b.high_hz.map(|v| v.to_string()));
    let (mut n_fft, mut hop, mut low, mut high) = (None, None, None, None);
    match &cli.command {
        Command::Stft { stft: s, .. } | Command::Encode { stft: s, .. } => (n_fft, hop) = stft(s),
        Command::Train {
            filters,
            rel_tol,
            max_em_iters,
            stft: s,
            ..
        } => {
            push("L", filters.map(|v| v.to_string()));
            push("rel_tol", rel_tol.map(|v| v.to_string()));
            push("max_em_iters", max_em_iters.map(|v| v.to_string()));
            (n_fft, hop) = stft(s);
        }
        Command::Bwe { band: b, stft: s, .. } | Command::NmfBwe { band: b, stft: s, .. } => {
            (n_fft, hop) = stft(s);
            (low, high) = band(b);
        }
        Command::NmfTrain { k, stft: s, .. } => {
            push("K", k.map(|v| v.to_string()));
            (n_fft, hop) = stft(s);
        }
        Command::Features {
            median_length,
            n_coeffs,
            n_mels,
            stft: s,
            ..
        } => {
            push("median_length", median_length.map(|v| v.to_string()));
            push("n_coeffs", n_coeffs.map(|v| v.to_string()));
            push("n_mels", n_mels.map(|v| v.to_string()));
            (n_fft, hop) = stft(s);
        }
        Command::EvalLsd { band: b, .. } => (low, high) = band(b),
        Command::Synth { .. } => {}
    }
    push("n_fft", n_fft);
    push("hop", hop);
    push("low_hz", low);
    push("high_hz", high);
    out
}

fn resolve(cli: &Cli) -> Result<ResolvedConfig> {
    let text = match &cli.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| PofError::io(p, e))?),
        None => None,
    };
    config_resolve(text.as_deref(), &overrides(cli))
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(PofError::Config("--threads must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| PofError::Config(format!("cannot build thread pool: {e}")))?;
    pool.install(|| dispatch(cli.command, &cfg))
}

fn is_wav(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

/// WAV files go through the STFT; anything else is read as POFS.
fn load_input(path: &Path, kind: SpectrumKind, cfg: &ResolvedConfig) -> Result<Spectrogram> {
    if is_wav(path) {
        let clip = load_wav(path)?;
        match kind {
            SpectrumKind::Magnitude => stft_magnitude(&clip, &cfg.stft),
            SpectrumKind::Power => stft_power(&clip, &cfg.stft),
        }
    } else {
        let spec = load_spectrogram(path)?;
        if spec.kind != kind {
            return Err(PofError::Validation(format!(
                "{} holds a {:?} spectrogram, expected {kind:?}",
                path.display(),
                spec.kind
            )));
        }
        Ok(spec)
    }
}

fn load_many(paths: &[PathBuf], kind: SpectrumKind, cfg: &ResolvedConfig) -> Result<Spectrogram> {
    let parts = paths
        .iter()
        .map(|p| load_input(p, kind, cfg))
        .collect::<Result<Vec<_>>>()?;
    Spectrogram::concat(&parts)
}

fn telephone_mask(n_bins: usize, spec: &Spectrogram, cfg: &ResolvedConfig) -> Result<BandMask> {
    let n_fft = 2 * (n_bins - 1);
    band_mask(n_bins, spec.sample_rate, n_fft, cfg.low_hz, cfg.high_hz)
}

fn dispatch(command: Command, cfg: &ResolvedConfig) -> Result<()> {
    let seed = cfg.em.seed;
    match command {
        Command::Stft { input, o, power, .. } => {
            let kind = if power { SpectrumKind::Power } else { SpectrumKind::Magnitude };
            let clip = load_wav(&input)?;
            let spec = match kind {
                SpectrumKind::Magnitude => stft_magnitude(&clip, &cfg.stft)?,
                SpectrumKind::Power => stft_power(&clip, &cfg.stft)?,
            };
            save_spectrogram(&spec, &o)
        }
        Command::Train { inputs, o, log, .. } => {
            let spec = load_many(&inputs, SpectrumKind::Magnitude, cfg)?;
            let result = match log {
                Some(path) => {
                    let mut file = std::fs::File::create(&path).map_err(|e| PofError::io(&path, e))?;
                    let r = fit_logged(&spec, &cfg.em, &mut file)?;
                    file.flush().map_err(|e| PofError::io(&path, e))?;
                    r
                }
                None => fit_logged(&spec, &cfg.em, &mut std::io::stderr())?,
            };
            save_model(&result.model, &o)
        }
        Command::Encode { input, model, o, .. } => {
            let model = load_model(&model)?;
            let spec = load_input(&input, SpectrumKind::Magnitude, cfg)?;
            let results = infer_frames(&spec, &model, &cfg.em.inner, seed)?;
            let records = results
                .into_iter()
                .enumerate()
                .map(|(t, r)| {
                    r.map(|inf| PosteriorRecord::new(t, &inf.posterior, inf.elbo))
                        .map_err(|e| PofError::Numerical(format!("inference failed on frame {t}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            save_posteriors(&records, &o)
        }
        Command::Bwe {
            input,
            model,
            o,
            mode,
            posteriors,
            ..
        } => {
            let model = load_model(&model)?;
            let spec = load_input(&input, SpectrumKind::Magnitude, cfg)?;
            let mask = telephone_mask(model.n_bins(), &spec, cfg)?;
            let mode = match mode {
                ModeArg::Log => ReconMode::LogDomain,
                ModeArg::Mgf => ReconMode::Mgf,
            };
            let res = expand(&spec, &model, &mask, &cfg.em.inner, mode, seed)?;
            if !res.failed_frames.is_empty() {
                eprintln!(
                    "warning: inference failed on {} frame(s): {:?}",
                    res.failed_frames.len(),
                    res.failed_frames
                );
            }
            if let Some(p) = posteriors {
                let records: Vec<_> = res
                    .posteriors
                    .iter()
                    .zip(&res.elbos)
                    .enumerate()
                    .map(|(t, (post, &elbo))| PosteriorRecord::new(t, post, elbo))
                    .collect();
                save_posteriors(&records, &p)?;
            }
            save_spectrogram(&res.reconstructed, &o)
        }
        Command::NmfTrain { inputs, o, divergence, .. } => {
            let divergence = match divergence {
                DivergenceArg::Kl => Divergence::Kl,
                DivergenceArg::Is => Divergence::Is,
            };
            let spec = load_many(&inputs, divergence.expected_kind(), cfg)?;
            let nmf_cfg = NmfConfig {
                k: cfg.nmf_k,
                divergence,
                rel_tol: cfg.nmf_rel_tol,
                max_iters: cfg.nmf_max_iters,
                seed,
            };
            let (model, _) = nmf_fit(&spec, &nmf_cfg)?;
            save_nmf_model(&model, &o)
        }
        Command::NmfBwe { input, model, o, .. } => {
            let model = load_nmf_model(&model)?;
            let spec = load_input(&input, model.divergence.expected_kind(), cfg)?;
            let mask = telephone_mask(model.n_bins(), &spec, cfg)?;
            let nmf_cfg = NmfConfig {
                k: model.k(),
                divergence: model.divergence,
                rel_tol: cfg.nmf_rel_tol,
                max_iters: cfg.nmf_max_iters,
                seed,
            };
            save_spectrogram(&nmf_expand(&spec, &model, &mask, &nmf_cfg)?, &o)
        }
        Command::Features {
            input,
            o,
            kind,
            model,
            deltas,
            smooth,
            ..
        } => {
            let spec = load_input(&input, SpectrumKind::Magnitude, cfg)?;
            let mut feats = match kind {
                FeatureKind::Pofc => {
                    let path = model.ok_or_else(|| PofError::Config("pofc features need --model".into()))?;
                    pofc(&spec, &load_model(&path)?, &cfg.em.inner, seed)?
                }
                FeatureKind::Mfcc => mfcc(&spec, cfg.n_coeffs, cfg.n_mels)?,
            };
            if deltas {
                feats = add_deltas(&feats)?;
            }
            if smooth {
                feats = median_smooth(&feats, cfg.median_length)?;
            }
            save_features_csv(&feats, &o)
        }
        Command::EvalLsd { a, b, missing, .. } => {
            let sa = load_spectrogram(&a)?;
            let sb = load_spectrogram(&b)?;
            let bins = if missing {
                let band = telephone_mask(sa.n_bins(), &sa, cfg)?;
                BandMask::new(band.complement(sa.n_bins()))?
            } else {
                BandMask::full(sa.n_bins())?
            };
            let d = log_spectral_distance(&sa, &sb, &bins)?;
            println!("{d:?}");
            Ok(())
        }
        Command::Synth { model, frames, o } => {
            let model = load_model(&model)?;
            let (mut spec, _) = sample(&model, frames, seed)?;
            spec.sample_rate = model.meta.sample_rate;
            spec.n_fft = model.meta.n_fft;
            spec.hop = model.meta.n_fft / 2;
            save_spectrogram(&spec, &o)
        }
    }
}
