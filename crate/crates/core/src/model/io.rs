//! On-disk formats.
//!
//! Model file: JSON, `{"format": "pof-model", "version": 1, "F", "L", "U"
//! (row-major, F*L values), "alpha", "gamma", "meta"}`.
//!
//! POFS spectrogram file (all little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "POFS"
//! 4       1     version (1)
//! 5       4     u32 F
//! 9       4     u32 T
//! 13      1     u8 kind (0 = magnitude, 1 = power)
//! 14      8     f64 sample_rate
//! 22      4     u32 n_fft
//! 26      4     u32 hop
//! 30      8*F*T f64 data, column-major (frame after frame)
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{FramePosterior, ModelMeta, PoFModel, Spectrogram, SpectrumKind};
use crate::error::{PofError, Result};

const MODEL_FORMAT: &str = "pof-model";
const MODEL_VERSION: u32 = 1;

const POFS_MAGIC: &[u8; 4] = b"POFS";
const POFS_VERSION: u8 = 1;
const POFS_HEADER_LEN: usize = 30;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    #[serde(rename = "F")]
    n_bins: usize,
    #[serde(rename = "L")]
    n_filters: usize,
    #[serde(rename = "U")]
    u: Vec<f64>,
    alpha: Vec<f64>,
    gamma: Vec<f64>,
    meta: ModelMeta,
}

fn parse_err(path: &Path, message: impl Into<String>) -> PofError {
    PofError::Parse {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn save_model(model: &PoFModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = ModelFile {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        n_bins: model.n_bins(),
        n_filters: model.n_filters(),
        u: model.u().iter().copied().collect(),
        alpha: model.alpha().to_vec(),
        gamma: model.gamma().to_vec(),
        meta: model.meta.clone(),
    };
    let text = serde_json::to_string_pretty(&file)
        .map_err(|e| PofError::Validation(format!("cannot serialise model: {e}")))?;
    fs::write(path, text).map_err(|e| PofError::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<PoFModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| PofError::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let file: ModelFile = serde_path_to_error::deserialize(de)
        .map_err(|e| parse_err(path, format!("field `{}`: {}", e.path(), e.inner())))?;
    if file.format != MODEL_FORMAT {
        return Err(parse_err(path, format!("field `format`: expected \"{MODEL_FORMAT}\", found {:?}", file.format)));
    }
    if file.version != MODEL_VERSION {
        return Err(parse_err(path, format!("field `version`: unsupported version {}", file.version)));
    }
    if file.u.len() != file.n_bins * file.n_filters {
        return Err(PofError::Validation(format!(
            "U has {} values but F*L = {}*{}",
            file.u.len(),
            file.n_bins,
            file.n_filters
        )));
    }
    let u = Array2::from_shape_vec((file.n_bins, file.n_filters), file.u)
        .map_err(|e| PofError::Validation(e.to_string()))?;
    PoFModel::new(u, Array1::from(file.alpha), Array1::from(file.gamma), file.meta)
}

pub fn save_spectrogram(spec: &Spectrogram, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| PofError::Validation(format!("{what} = {v} does not fit in u32")))
    };
    let (f, t) = spec.data().dim();
    let mut buf = Vec::with_capacity(POFS_HEADER_LEN + 8 * f * t);
    buf.extend_from_slice(POFS_MAGIC);
    buf.push(POFS_VERSION);
    buf.extend_from_slice(&to_u32(f, "F")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(t, "T")?.to_le_bytes());
    buf.push(spec.kind.code());
    buf.extend_from_slice(&spec.sample_rate.to_le_bytes());
    buf.extend_from_slice(&to_u32(spec.n_fft, "n_fft")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(spec.hop, "hop")?.to_le_bytes());
    for frame in spec.data().columns() {
        for v in frame {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| PofError::io(path, e))
}

pub fn load_spectrogram(path: impl AsRef<Path>) -> Result<Spectrogram> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| PofError::io(path, e))?;
    let truncated = |expected: usize| PofError::Truncated {
        path: path.to_path_buf(),
        expected,
        found: bytes.len(),
    };
    if bytes.len() < POFS_HEADER_LEN {
        return Err(truncated(POFS_HEADER_LEN));
    }
    if &bytes[0..4] != POFS_MAGIC {
        return Err(parse_err(path, "bad magic, not a POFS file"));
    }
    if bytes[4] != POFS_VERSION {
        return Err(parse_err(path, format!("unsupported POFS version {}", bytes[4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let n_bins = u32_at(5);
    let n_frames = u32_at(9);
    let kind = SpectrumKind::from_code(bytes[13])
        .ok_or_else(|| parse_err(path, format!("unknown spectrum kind {}", bytes[13])))?;
    let sample_rate = f64::from_le_bytes(bytes[14..22].try_into().unwrap());
    let n_fft = u32_at(22);
    let hop = u32_at(26);

    let expected = n_bins
        .checked_mul(n_frames)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(POFS_HEADER_LEN))
        .ok_or_else(|| parse_err(path, "header dimensions overflow"))?;
    if bytes.len() < expected {
        return Err(truncated(expected));
    }
    if bytes.len() > expected {
        return Err(parse_err(
            path,
            format!("{} trailing bytes after data", bytes.len() - expected),
        ));
    }
    let mut data = Array2::zeros((n_bins, n_frames));
    let mut chunks = bytes[POFS_HEADER_LEN..].chunks_exact(8);
    for t in 0..n_frames {
        for f in 0..n_bins {
            data[[f, t]] = f64::from_le_bytes(chunks.next().unwrap().try_into().unwrap());
        }
    }
    Spectrogram::new(data, kind, sample_rate, n_fft, hop)
}

/// One entry of a posterior dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorRecord {
    pub frame: usize,
    pub nu: Vec<f64>,
    pub rho: Vec<f64>,
    pub elbo: f64,
}

impl PosteriorRecord {
    pub fn new(frame: usize, post: &FramePosterior, elbo: f64) -> Self {
        Self {
            frame,
            nu: post.nu().to_vec(),
            rho: post.rho().to_vec(),
            elbo,
        }
    }

    pub fn posterior(&self) -> Result<FramePosterior> {
        FramePosterior::new(Array1::from(self.nu.clone()), Array1::from(self.rho.clone()))
    }
}

pub fn save_posteriors(records: &[PosteriorRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string(records)
        .map_err(|e| PofError::Validation(format!("cannot serialise posteriors: {e}")))?;
    fs::write(path, text).map_err(|e| PofError::io(path, e))
}

pub fn load_posteriors(path: impl AsRef<Path>) -> Result<Vec<PosteriorRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| PofError::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de)
        .map_err(|e| parse_err(path, format!("field `{}`: {}", e.path(), e.inner())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::stream_rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_model(seed: u64) -> PoFModel {
        let mut rng = stream_rng(seed, 0, 0);
        let u = Array2::from_shape_fn((6, 3), |_| rng.sample::<f64, _>(StandardNormal) / 3.0);
        let alpha = (0..3).map(|_| rng.random_range(0.1..5.0)).collect();
        let gamma = (0..6).map(|_| rng.random_range(0.1..50.0)).collect();
        PoFModel::new(u, alpha, gamma, ModelMeta::default()).unwrap()
    }

    #[test]
    fn model_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let m = random_model(1);
        save_model(&m, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), m);
    }

    fn rewrite(path: &Path, f: impl FnOnce(&mut serde_json::Value)) {
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
        f(&mut v);
        fs::write(path, v.to_string()).unwrap();
    }

    #[test]
    fn model_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_model(&random_model(2), &path).unwrap();
        rewrite(&path, |v| v["alpha"][1] = (-1.0).into());
        let err = load_model(&path).unwrap_err();
        assert!(matches!(err, PofError::Validation(ref m) if m.contains("alpha[1]")), "{err}");

        save_model(&random_model(2), &path).unwrap();
        rewrite(&path, |v| {
            v["gamma"].as_array_mut().unwrap().pop();
        });
        assert!(matches!(load_model(&path).unwrap_err(), PofError::Validation(_)));

        save_model(&random_model(2), &path).unwrap();
        rewrite(&path, |v| v["gamma"][0] = "oops".into());
        let err = load_model(&path).unwrap_err();
        assert!(matches!(err, PofError::Parse { ref message, .. } if message.contains("gamma")), "{err}");

        fs::write(&path, "{\"format\": \"pof-model\"").unwrap();
        assert!(matches!(load_model(&path).unwrap_err(), PofError::Parse { .. }));
    }

    fn random_spec(seed: u64) -> Spectrogram {
        let mut rng = stream_rng(seed, 0, 0);
        let data = Array2::from_shape_fn((5, 7), |_| rng.random::<f64>() * 100.0);
        Spectrogram::new(data, SpectrumKind::Power, 8000.0, 8, 4).unwrap()
    }

    #[test]
    fn pofs_round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.pofs");
        let s = random_spec(3);
        save_spectrogram(&s, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"POFS");
        assert_eq!(bytes.len(), 30 + 8 * 35);
        // second value stored is (f=1, t=0)
        assert_eq!(f64::from_le_bytes(bytes[38..46].try_into().unwrap()), s.data()[[1, 0]]);
        assert_eq!(load_spectrogram(&path).unwrap(), s);
    }

    #[test]
    fn pofs_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.pofs");
        save_spectrogram(&random_spec(4), &path).unwrap();
        let bytes = fs::read(&path).unwrap();

        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_spectrogram(&path).unwrap_err(), PofError::Truncated { .. }));
        fs::write(&path, &bytes[..10]).unwrap();
        assert!(matches!(load_spectrogram(&path).unwrap_err(), PofError::Truncated { .. }));

        let mut neg = bytes.clone();
        neg[30..38].copy_from_slice(&(-1.0f64).to_le_bytes());
        fs::write(&path, &neg).unwrap();
        assert!(matches!(load_spectrogram(&path).unwrap_err(), PofError::Validation(_)));

        let mut magic = bytes;
        magic[0] = b'X';
        fs::write(&path, &magic).unwrap();
        assert!(matches!(load_spectrogram(&path).unwrap_err(), PofError::Parse { .. }));
    }

    #[test]
    fn posterior_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let post = FramePosterior::new(Array1::from(vec![1.5, 0.1]), Array1::from(vec![2.0, 3.3])).unwrap();
        let recs = vec![PosteriorRecord::new(0, &post, -12.5), PosteriorRecord::new(1, &post, -3.0)];
        save_posteriors(&recs, &path).unwrap();
        let back = load_posteriors(&path).unwrap();
        assert_eq!(back, recs);
        assert_eq!(back[1].posterior().unwrap(), post);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn pofs_round_trip_bit_exact(vals in proptest::collection::vec(0.0f64..1e300, 1..60), rows in 1usize..6) {
                let cols = vals.len() / rows;
                prop_assume!(cols > 0);
                let data = Array2::from_shape_vec((rows, cols), vals[..rows * cols].to_vec()).unwrap();
                let s = Spectrogram::new(data, SpectrumKind::Magnitude, 16000.0, 1024, 512).unwrap();
                let dir = tempfile::tempdir().unwrap();
                let path = dir.path().join("x.pofs");
                save_spectrogram(&s, &path).unwrap();
                let back = load_spectrogram(&path).unwrap();
                prop_assert!(back.data().iter().zip(s.data().iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
            }

            #[test]
            fn model_json_round_trip_bit_exact(u in proptest::collection::vec(-1e6f64..1e6, 6),
                                                a in proptest::collection::vec(1e-300f64..1e300, 2)) {
                let m = PoFModel::new(
                    Array2::from_shape_vec((3, 2), u).unwrap(),
                    Array1::from(a),
                    Array1::from(vec![0.5, 1e-7, 3e9]),
                    ModelMeta::default(),
                ).unwrap();
                let dir = tempfile::tempdir().unwrap();
                let path = dir.path().join("m.json");
                save_model(&m, &path).unwrap();
                prop_assert_eq!(load_model(&path).unwrap(), m);
            }
        }
    }
}
