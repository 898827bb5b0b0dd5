//! Structured-text checkpoints: a JSON header line followed by named flat
//! tensors. Values are written with the shortest decimal form that parses
//! back to the same 64-bit float, so save/load round-trips bit-exactly.

use crate::grpo::OptimizerState;
use crate::policy::{PolicyConfig, PolicyParams, TENSOR_NAMES};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{BufWriter, Write as IoWrite};
use std::path::Path;
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("version mismatch: file has format_version {found}, expected {FORMAT_VERSION}")]
    VersionMismatch { found: u32 },
    #[error("shape mismatch for tensor {name}: file declares {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: PolicyConfig,
    config_hash: String,
    step: u64,
}

/// Everything reconstructed by [`load_checkpoint`].
#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub params: PolicyParams,
    pub optimizer: OptimizerState,
    pub meta: CheckpointMeta,
    /// True when the file carried no optimizer section and a fresh one was
    /// substituted.
    pub fresh_optimizer: bool,
}

/// Hash of the canonical JSON serialization of a config value.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let body = serde_json::to_string(value).expect("serializable config");
    let mut hasher = Sha256::new();
    hasher.update(body.as_bytes());
    format!("{:x}", hasher.finalize())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_tensor(
    out: &mut impl IoWrite,
    name: &str,
    shape: &[usize],
    values: &[f64],
) -> std::io::Result<()> {
    write!(out, "tensor {name}")?;
    for d in shape {
        write!(out, " {d}")?;
    }
    writeln!(out)?;
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            write!(out, " ")?;
        }
        write!(out, "{v}")?;
    }
    writeln!(out)
}

pub fn save_checkpoint(
    path: &Path,
    params: &PolicyParams,
    optimizer: Option<&OptimizerState>,
    meta: &CheckpointMeta,
) -> Result<(), CheckpointError> {
    let header = Header {
        format_version: FORMAT_VERSION,
        config: params.config.clone(),
        config_hash: meta.config_hash.clone(),
        step: meta.step,
    };
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let mut run = || -> std::io::Result<()> {
        writeln!(
            out,
            "{}",
            serde_json::to_string(&header).expect("serializable header")
        )?;
        for (name, values) in TENSOR_NAMES.iter().zip(params.tensors()) {
            write_tensor(&mut out, name, &params.tensor_shape(name), values)?;
        }
        if let Some(state) = optimizer {
            writeln!(out, "optimizer_step {}", state.step)?;
            for (prefix, moments) in [("m", &state.first_moment), ("v", &state.second_moment)] {
                for (name, values) in TENSOR_NAMES.iter().zip(moments) {
                    let full = format!("{prefix}.{name}");
                    write_tensor(&mut out, &full, &params.tensor_shape(name), values)?;
                }
            }
        }
        out.flush()
    };
    run().map_err(io_err(path))
}

struct Lines<'a> {
    inner: std::str::Lines<'a>,
    line_no: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Option<&'a str> {
        self.line_no += 1;
        self.inner.next()
    }

    fn expect(&mut self, what: &str) -> Result<&'a str, CheckpointError> {
        self.next()
            .ok_or_else(|| CheckpointError::Corrupt(format!("unexpected end of file, expected {what}")))
    }
}

fn read_tensor(
    lines: &mut Lines,
    expected_name: &str,
    expected_shape: &[usize],
) -> Result<Vec<f64>, CheckpointError> {
    let decl = lines.expect("tensor declaration")?;
    let mut parts = decl.split_whitespace();
    if parts.next() != Some("tensor") {
        return Err(CheckpointError::Corrupt(format!(
            "expected tensor declaration, got {decl:?}"
        )));
    }
    let name = parts
        .next()
        .ok_or_else(|| CheckpointError::Corrupt("tensor declaration missing name".into()))?;
    if name != expected_name {
        return Err(CheckpointError::Corrupt(format!(
            "expected tensor {expected_name}, found {name}"
        )));
    }
    let shape: Vec<usize> = parts
        .map(|p| {
            p.parse()
                .map_err(|_| CheckpointError::Corrupt(format!("bad shape entry {p:?} for {name}")))
        })
        .collect::<Result<_, _>>()?;
    if shape != expected_shape {
        return Err(CheckpointError::ShapeMismatch {
            name: name.to_string(),
            found: shape,
            expected: expected_shape.to_vec(),
        });
    }
    let count: usize = shape.iter().product();
    let body = lines.expect("tensor values")?;
    let values: Vec<f64> = body
        .split_whitespace()
        .map(|p| {
            p.parse()
                .map_err(|_| CheckpointError::Corrupt(format!("bad value {p:?} in {name}")))
        })
        .collect::<Result<_, _>>()?;
    if values.len() != count {
        return Err(CheckpointError::Corrupt(format!(
            "tensor {name} declares {count} values, found {}",
            values.len()
        )));
    }
    Ok(values)
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint, CheckpointError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = Lines {
        inner: text.lines(),
        line_no: 0,
    };

    let header_line = lines.expect("header")?;
    let header: Header = serde_json::from_str(header_line)
        .map_err(|e| CheckpointError::Corrupt(format!("unreadable header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: header.format_version,
        });
    }

    let mut params = PolicyParams::zeros(header.config.clone());
    for name in TENSOR_NAMES {
        let shape = params.tensor_shape(name);
        let values = read_tensor(&mut lines, name, &shape)?;
        for (tensor, n) in params.tensors_mut().into_iter().zip(TENSOR_NAMES) {
            if n == name {
                *tensor = values;
                break;
            }
        }
    }

    let mut optimizer = OptimizerState::fresh(&header.config);
    let mut fresh_optimizer = true;
    if let Some(line) = lines.next() {
        let step_str = line
            .strip_prefix("optimizer_step ")
            .ok_or_else(|| CheckpointError::Corrupt(format!("unexpected line {line:?}")))?;
        optimizer.step = step_str
            .parse()
            .map_err(|_| CheckpointError::Corrupt(format!("bad optimizer step {step_str:?}")))?;
        for (prefix, moments) in [
            ("m", &mut optimizer.first_moment),
            ("v", &mut optimizer.second_moment),
        ] {
            for (name, slot) in TENSOR_NAMES.iter().zip(moments) {
                let full = format!("{prefix}.{name}");
                *slot = read_tensor(&mut lines, &full, &params.tensor_shape(name))?;
            }
        }
        fresh_optimizer = false;
    }

    Ok(LoadedCheckpoint {
        params,
        optimizer,
        meta: CheckpointMeta {
            step: header.step,
            config_hash: header.config_hash,
        },
        fresh_optimizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::derive_stream;
    use crate::policy::init_params;

    fn sample() -> (PolicyParams, OptimizerState, CheckpointMeta) {
        let mut params = init_params(derive_stream(7, 0), PolicyConfig::grad_check());
        // values that stress decimal round-tripping
        params.output_bias[0] = 0.1 + 0.2;
        params.output_bias[1] = -0.0;
        params.output_bias[2] = 1e-300;
        params.output_bias[3] = f64::MIN_POSITIVE;
        let mut opt = OptimizerState::fresh(&params.config);
        opt.step = 42;
        opt.first_moment[3][1] = 1.0 / 3.0;
        opt.second_moment[5][2] = 2.5e-17;
        let meta = CheckpointMeta {
            step: 42,
            config_hash: config_hash(&params.config),
        };
        (params, opt, meta)
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let (params, opt, meta) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save_checkpoint(&path, &params, Some(&opt), &meta).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(!loaded.fresh_optimizer);
        assert_eq!(loaded.meta, meta);
        assert_eq!(loaded.optimizer, opt);
        for (a, b) in loaded.params.flatten().iter().zip(params.flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(loaded.params.content_hash(), params.content_hash());
    }

    #[test]
    fn missing_optimizer_gives_fresh_state_with_warning() {
        let (params, _, meta) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save_checkpoint(&path, &params, None, &meta).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(loaded.fresh_optimizer);
        assert_eq!(loaded.optimizer, OptimizerState::fresh(&params.config));
        assert_eq!(loaded.params, params);
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let (params, opt, meta) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save_checkpoint(&path, &params, Some(&opt), &meta).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let tampered = text.replacen("\"format_version\":1", "\"format_version\":9", 1);
        std::fs::write(&path, tampered).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::VersionMismatch { found: 9 })
        ));
    }

    #[test]
    fn tampered_shape_is_distinct() {
        let (params, opt, meta) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save_checkpoint(&path, &params, Some(&opt), &meta).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let tampered = text.replacen("tensor token_embeddings 20 4", "tensor token_embeddings 21 4", 1);
        assert_ne!(text, tampered, "expected declaration line not found");
        std::fs::write(&path, tampered).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn garbage_and_truncation_are_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        std::fs::write(&path, "not a checkpoint\n").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::Corrupt(_))
        ));

        let (params, opt, meta) = sample();
        save_checkpoint(&path, &params, Some(&opt), &meta).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let truncated = lines[..5].join("\n");
        std::fs::write(&path, truncated).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::Corrupt(_))
        ));
    }
}
