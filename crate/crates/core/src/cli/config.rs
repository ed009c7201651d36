//! Flat `key = value` configuration with command-line overrides.

use crate::dsp::StftConfig;
use crate::error::{PofError, Result};
use crate::mstep::EmConfig;

/// Every setting the subcommands read, with defaults applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub em: EmConfig,
    pub stft: StftConfig,
    pub low_hz: f64,
    pub high_hz: f64,
    pub nmf_k: usize,
    pub nmf_rel_tol: f64,
    pub nmf_max_iters: usize,
    pub median_length: usize,
    pub n_coeffs: usize,
    pub n_mels: usize,
}

impl Default for ResolvedConfig {
    fn default() -> Self {
        Self {
            em: EmConfig::default(),
            stft: StftConfig::default(),
            low_hz: 400.0,
            high_hz: 3400.0,
            nmf_k: 25,
            nmf_rel_tol: 1e-4,
            nmf_max_iters: 1000,
            median_length: 25,
            n_coeffs: 13,
            n_mels: 40,
        }
    }
}

pub const KEYS: &[&str] = &[
    "L",
    "rel_tol",
    "max_em_iters",
    "seed",
    "memory",
    "max_iters",
    "grad_tol",
    "wolfe_c1",
    "wolfe_c2",
    "max_line_search",
    "n_fft",
    "hop",
    "low_hz",
    "high_hz",
    "K",
    "nmf_rel_tol",
    "nmf_max_iters",
    "median_length",
    "n_coeffs",
    "n_mels",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| PofError::Config(format!("`{key}`: cannot parse {value:?}")))
}

impl ResolvedConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "L" => self.em.n_filters = parse(key, v)?,
            "rel_tol" => self.em.rel_tol = parse(key, v)?,
            "max_em_iters" => self.em.max_em_iters = parse(key, v)?,
            "seed" => self.em.seed = parse(key, v)?,
            "memory" => self.em.inner.memory = parse(key, v)?,
            "max_iters" => self.em.inner.max_iters = parse(key, v)?,
            "grad_tol" => self.em.inner.grad_tol = parse(key, v)?,
            "wolfe_c1" => self.em.inner.wolfe_c1 = parse(key, v)?,
            "wolfe_c2" => self.em.inner.wolfe_c2 = parse(key, v)?,
            "max_line_search" => self.em.inner.max_line_search = parse(key, v)?,
            "n_fft" => self.stft.n_fft = parse(key, v)?,
            "hop" => self.stft.hop = parse(key, v)?,
            "low_hz" => self.low_hz = parse(key, v)?,
            "high_hz" => self.high_hz = parse(key, v)?,
            "K" => self.nmf_k = parse(key, v)?,
            "nmf_rel_tol" => self.nmf_rel_tol = parse(key, v)?,
            "nmf_max_iters" => self.nmf_max_iters = parse(key, v)?,
            "median_length" => self.median_length = parse(key, v)?,
            "n_coeffs" => self.n_coeffs = parse(key, v)?,
            "n_mels" => self.n_mels = parse(key, v)?,
            _ => {
                return Err(PofError::Config(format!(
                    "unknown key `{key}`; valid keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.em.validate()?;
        self.stft.validate()?;
        if !(self.low_hz >= 0.0 && self.low_hz < self.high_hz) {
            return Err(PofError::Config(format!(
                "band [{}, {}] Hz needs 0 <= low_hz < high_hz",
                self.low_hz, self.high_hz
            )));
        }
        if self.nmf_k == 0 || self.nmf_max_iters == 0 || !(self.nmf_rel_tol >= 0.0) {
            return Err(PofError::Config("K and nmf_max_iters must be positive, nmf_rel_tol non-negative".into()));
        }
        if self.median_length % 2 == 0 {
            return Err(PofError::Config(format!("median_length = {} must be odd", self.median_length)));
        }
        if self.n_coeffs == 0 || self.n_coeffs > self.n_mels {
            return Err(PofError::Config(format!(
                "n_coeffs = {} must be between 1 and n_mels = {}",
                self.n_coeffs, self.n_mels
            )));
        }
        Ok(())
    }
}

/// Parses a config file's text into `(line number, key, value)` entries.
/// Blank lines and lines starting with `#` are skipped.
pub fn parse_config_text(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(PofError::Config(format!("line {}: expected key=value, got {line:?}", i + 1)));
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(PofError::Config(format!("line {}: missing key", i + 1)));
        }
        out.push((i + 1, key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// Defaults, then the file, then command-line overrides (later wins).
pub fn config_resolve(file_text: Option<&str>, overrides: &[(&str, String)]) -> Result<ResolvedConfig> {
    let mut cfg = ResolvedConfig::default();
    if let Some(text) = file_text {
        for (line, key, value) in parse_config_text(text)? {
            cfg.set(&key, &value)
                .map_err(|e| PofError::Config(format!("line {line}: {}", e.to_string().trim_start_matches("configuration error: "))))?;
        }
    }
    for (key, value) in overrides {
        cfg.set(key, value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}
