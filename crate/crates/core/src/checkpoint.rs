//! Binary checkpoints.
//!
//! ```text
//! magic "ARGRPOCK" | u32 LE header length | JSON header | f64 LE arrays | sha256
//! ```
//!
//! The header lists every array with its shape and offset (in f64 units into
//! the data block). The trailing digest covers all preceding bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grpo::{AdamW, AdamWSettings};
use crate::policy::{PolicyConfig, PolicyParameters};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ARGRPOCK";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("checkpoint format version {found} is not supported (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Rl,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub phase: Phase,
    /// Completed optimization steps in this phase.
    pub step: u64,
    /// Root seed; every random stream is derived from `(seed, step, ...)`,
    /// so this plus `step` is the full RNG state.
    pub seed: u64,
    pub policy: PolicyParameters,
    pub optimizer: AdamW,
    /// Frozen reference policy of an RL run.
    pub reference: Option<PolicyParameters>,
    pub thresholds: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    phase: Phase,
    step: u64,
    seed: u64,
    policy_config: PolicyConfig,
    optimizer_settings: AdamWSettings,
    optimizer_step: u64,
    reference_digest: Option<String>,
    thresholds: Option<[f64; 2]>,
    arrays: Vec<ArrayEntry>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over the little-endian bytes of every parameter array in order.
pub fn parameter_digest(params: &PolicyParameters) -> String {
    let mut h = Sha256::new();
    for (_, t) in params.weights.named() {
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

impl Checkpoint {
    pub fn reference_digest(&self) -> Option<String> {
        self.reference.as_ref().map(parameter_digest)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut arrays = Vec::new();
        let mut data: Vec<f64> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, values: &[f64]| {
            arrays.push(ArrayEntry { name, shape, offset: data.len() });
            data.extend_from_slice(values);
        };
        let named = self.policy.weights.named();
        for (name, t) in &named {
            push(format!("policy.{name}"), t.shape().to_vec(), t.data());
        }
        for ((name, t), m) in named.iter().zip(&self.optimizer.m) {
            push(format!("adam_m.{name}"), t.shape().to_vec(), m);
        }
        for ((name, t), v) in named.iter().zip(&self.optimizer.v) {
            push(format!("adam_v.{name}"), t.shape().to_vec(), v);
        }
        if let Some(r) = &self.reference {
            for (name, t) in r.weights.named() {
                push(format!("reference.{name}"), t.shape().to_vec(), t.data());
            }
        }
        let header = Header {
            version: FORMAT_VERSION,
            phase: self.phase,
            step: self.step,
            seed: self.seed,
            policy_config: self.policy.config.clone(),
            optimizer_settings: self.optimizer.settings,
            optimizer_step: self.optimizer.step,
            reference_digest: self.reference_digest(),
            thresholds: self.thresholds,
            arrays,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + 8 * data.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for v in &data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Parses and verifies a checkpoint. When `expected` is given, the stored
    /// policy configuration must match it exactly.
    pub fn from_bytes(bytes: &[u8], expected: Option<&PolicyConfig>) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
            return Err(CheckpointError::Integrity(format!("file too short ({} bytes)", bytes.len())));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::Integrity("checksum mismatch (truncated or corrupt file)".into()));
        }
        if &body[..8] != MAGIC {
            return Err(CheckpointError::Integrity("not a checkpoint file (bad magic)".into()));
        }
        let header_len = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes")) as usize;
        let json = body
            .get(12..12 + header_len)
            .ok_or_else(|| CheckpointError::Integrity("header extends past end of file".into()))?;
        let probe: serde_json::Value = serde_json::from_slice(json)
            .map_err(|e| CheckpointError::Integrity(format!("unreadable header: {e}")))?;
        if let Some(found) = probe.get("version").and_then(|v| v.as_u64()) {
            if found != FORMAT_VERSION as u64 {
                return Err(CheckpointError::Version { found: found as u32 });
            }
        }
        let header: Header = serde_json::from_value(probe)
            .map_err(|e| CheckpointError::Integrity(format!("malformed header: {e}")))?;
        let raw = &body[12 + header_len..];
        if raw.len() % 8 != 0 {
            return Err(CheckpointError::Integrity("data block is not a whole number of f64 values".into()));
        }
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();

        if let Some(exp) = expected {
            if exp != &header.policy_config {
                return Err(CheckpointError::ShapeMismatch(format!(
                    "checkpoint holds a {}-layer, hidden {}, {}-head policy over {} tokens; \
                     the configuration expects {}-layer, hidden {}, {}-head over {} tokens",
                    header.policy_config.num_layers,
                    header.policy_config.hidden_size,
                    header.policy_config.num_heads,
                    header.policy_config.vocab_size,
                    exp.num_layers,
                    exp.hidden_size,
                    exp.num_heads,
                    exp.vocab_size
                )));
            }
        }

        let mut entries = header.arrays.iter();
        let mut take = |prefix: &str, name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let e = entries
                .next()
                .ok_or_else(|| CheckpointError::Integrity(format!("missing array {prefix}.{name}")))?;
            if e.name != format!("{prefix}.{name}") || e.shape != shape {
                return Err(CheckpointError::ShapeMismatch(format!(
                    "array {} has shape {:?}, expected {prefix}.{name} with shape {shape:?}",
                    e.name, e.shape
                )));
            }
            let n: usize = shape.iter().product();
            data.get(e.offset..e.offset + n)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| CheckpointError::Integrity(format!("array {} extends past data", e.name)))
        };

        let template = PolicyParameters::zeros(&header.policy_config)
            .map_err(|e| CheckpointError::ShapeMismatch(e.to_string()))?;
        let shapes: Vec<(String, Vec<usize>)> = template
            .weights
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let load_params = |take: &mut dyn FnMut(&str, &str, &[usize]) -> Result<Vec<f64>>, prefix: &str| {
            let mut p = template.clone();
            for ((name, shape), slot) in shapes.iter().zip(p.weights.entries_mut()) {
                let values = take(prefix, name, shape)?;
                *slot = Tensor::new(shape.clone(), values).expect("shape checked");
            }
            Ok::<_, CheckpointError>(p)
        };
        let policy = load_params(&mut take, "policy")?;
        let m = shapes.iter().map(|(n, s)| take("adam_m", n, s)).collect::<Result<Vec<_>>>()?;
        let v = shapes.iter().map(|(n, s)| take("adam_v", n, s)).collect::<Result<Vec<_>>>()?;
        let reference = match header.reference_digest {
            Some(ref want) => {
                let r = load_params(&mut take, "reference")?;
                if &parameter_digest(&r) != want {
                    return Err(CheckpointError::Integrity("reference policy digest mismatch".into()));
                }
                Some(r)
            }
            None => None,
        };
        if entries.next().is_some() {
            return Err(CheckpointError::Integrity("unexpected extra arrays".into()));
        }
        Ok(Self {
            phase: header.phase,
            step: header.step,
            seed: header.seed,
            policy,
            optimizer: AdamW {
                settings: header.optimizer_settings,
                step: header.optimizer_step,
                m,
                v,
            },
            reference,
            thresholds: header.thresholds,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path, expected: Option<&PolicyConfig>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes, expected)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ConditioningMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(hidden: usize) -> PolicyConfig {
        PolicyConfig {
            num_layers: 1,
            hidden_size: hidden,
            num_heads: 2,
            vocab_size: 16,
            max_seq_len: 4,
            conditioning_mode: ConditioningMode::Class,
            num_classes: 2,
            text_vocab_size: 5,
            max_text_len: 2,
        }
    }

    fn sample(reference: bool) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let policy = PolicyParameters::init(&config(8), &mut rng).unwrap();
        let mut optimizer = AdamW::new(AdamWSettings::default(), &policy.weights);
        optimizer.step = 7;
        optimizer.m[0][1] = 0.25;
        optimizer.v[2][0] = 1e-9;
        Checkpoint {
            phase: Phase::Rl,
            step: 7,
            seed: 11,
            reference: reference.then(|| PolicyParameters::init(&config(8), &mut rng).unwrap()),
            policy,
            optimizer,
            thresholds: Some([0.1 + 0.2, 1.0 / 3.0]),
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        for with_ref in [false, true] {
            let c = sample(with_ref);
            let a = dir.path().join("a.ckpt");
            c.save(&a).unwrap();
            let loaded = Checkpoint::load(&a, Some(&config(8))).unwrap();
            assert_eq!(loaded, c);
            let b = dir.path().join("b.ckpt");
            loaded.save(&b).unwrap();
            assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        }
    }

    #[test]
    fn truncation_and_corruption_are_integrity_errors() {
        let bytes = sample(true).to_bytes();
        for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut], None), Err(CheckpointError::Integrity(_))));
        }
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped, None), Err(CheckpointError::Integrity(_))));
    }

    #[test]
    fn mismatched_preset_is_a_shape_error() {
        let bytes = sample(false).to_bytes();
        let err = Checkpoint::from_bytes(&bytes, Some(&config(16))).unwrap_err();
        assert!(matches!(err, CheckpointError::ShapeMismatch(_)), "{err}");
    }

    #[test]
    fn other_versions_are_refused() {
        let bytes = sample(false).to_bytes();
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let json = String::from_utf8(bytes[12..12 + header_len].to_vec()).unwrap();
        let patched = json.replacen("\"version\":1", "\"version\":9", 1);
        assert_eq!(patched.len(), json.len());
        let mut body = bytes[..bytes.len() - DIGEST_LEN].to_vec();
        body[12..12 + header_len].copy_from_slice(patched.as_bytes());
        let digest = Sha256::digest(&body);
        body.extend_from_slice(&digest);
        assert!(matches!(Checkpoint::from_bytes(&body, None), Err(CheckpointError::Version { found: 9 })));
    }

    #[test]
    fn digest_tracks_parameters() {
        let c = sample(true);
        let mut r = c.reference.clone().unwrap();
        let before = parameter_digest(&r);
        assert_eq!(before.len(), 64);
        r.weights.output.data_mut()[0] += 1e-12;
        assert_ne!(parameter_digest(&r), before);
    }
}
