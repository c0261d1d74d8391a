//! Binary model checkpoints.
//!
//! Layout on disk: an 8-byte magic, a little-endian u32 header length, a
//! JSON header (strict — unknown fields are rejected), then the raw f64
//! little-endian payload: the flat parameter vector, followed by the Adam
//! first/second-moment vectors when present.
//!
//! The header pins the normalized run configuration and the parameter
//! block layout (plus its hash), so a checkpoint can only be loaded back
//! into exactly the model shape that produced it — resuming training from
//! a checkpoint is bit-identical to never having stopped.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::meta::MetaParams;
use crate::nets::{full_layout, mlp_layout, Layout};
use crate::optim::AdamState;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CVMCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format_version: u32,
    config: RunConfig,
    layout: Layout,
    layout_hash: u64,
    trained_steps: u64,
    has_adam: bool,
    adam_step: u64,
}

/// A loaded checkpoint: parameters, optimizer state (when the producing
/// algorithm had one), the normalized config, and the step count.
#[derive(Debug)]
pub struct Checkpoint {
    pub params: MetaParams,
    pub adam: Option<AdamState>,
    pub config: RunConfig,
    pub trained_steps: u64,
}

/// The layout `config` implies; loads verify the stored layout equals it.
fn expected_layout(config: &RunConfig) -> Layout {
    if config.algorithm.hierarchical() {
        full_layout(&config.arch)
    } else {
        mlp_layout(&config.arch, "theta0")
    }
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode(
    params: &MetaParams,
    adam: Option<&AdamState>,
    config: &RunConfig,
    trained_steps: u64,
) -> Result<Vec<u8>> {
    if params.data.len() != params.layout.total {
        return Err(Error::Checkpoint(format!(
            "parameter vector has {} values but the layout expects {}",
            params.data.len(),
            params.layout.total
        )));
    }
    if let Some(a) = adam {
        if a.m().len() != params.layout.total {
            return Err(Error::Checkpoint(format!(
                "optimizer state has {} values but the layout expects {}",
                a.m().len(),
                params.layout.total
            )));
        }
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        layout: params.layout.clone(),
        layout_hash: params.layout.hash(),
        trained_steps,
        has_adam: adam.is_some(),
        adam_step: adam.map_or(0, AdamState::step),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(
        MAGIC.len() + 4 + header_json.len() + 8 * params.data.len() * 3,
    );
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    push_f64s(&mut out, &params.data);
    if let Some(a) = adam {
        push_f64s(&mut out, a.m());
        push_f64s(&mut out, a.v());
    }
    Ok(out)
}

fn read_f64s(bytes: &[u8], at: &mut usize, n: usize) -> Vec<f64> {
    let out = bytes[*at..*at + 8 * n]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk is 8 bytes")))
        .collect();
    *at += 8 * n;
    out
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |msg: String| Error::Checkpoint(msg);
    if bytes.len() < MAGIC.len() + 4 {
        return Err(bad("file too short for a checkpoint".into()));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)".into()));
    }
    let header_len = u32::from_le_bytes(
        bytes[MAGIC.len()..MAGIC.len() + 4]
            .try_into()
            .expect("slice is 4 bytes"),
    ) as usize;
    let header_start = MAGIC.len() + 4;
    let payload_start = header_start + header_len;
    if bytes.len() < payload_start {
        return Err(bad("truncated checkpoint header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[header_start..payload_start])
        .map_err(|e| bad(format!("invalid checkpoint header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported checkpoint format version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    if header.layout.hash() != header.layout_hash {
        return Err(bad(
            "layout hash does not match the stored layout".into(),
        ));
    }
    let config = header.config.clone().normalize()?;
    let expected = expected_layout(&config);
    if expected != header.layout {
        return Err(bad(
            "stored layout does not match the layout implied by the stored config".into(),
        ));
    }
    let total = header.layout.total;
    let n_vectors = if header.has_adam { 3 } else { 1 };
    let expected_len = payload_start + 8 * total * n_vectors;
    if bytes.len() != expected_len {
        return Err(bad(format!(
            "payload is {} bytes, expected {} for {} vector(s) of {} values",
            bytes.len() - payload_start,
            expected_len - payload_start,
            n_vectors,
            total
        )));
    }
    let mut at = payload_start;
    let data = read_f64s(bytes, &mut at, total);
    let adam = if header.has_adam {
        let m = read_f64s(bytes, &mut at, total);
        let v = read_f64s(bytes, &mut at, total);
        Some(AdamState::from_parts(m, v, header.adam_step)?)
    } else {
        None
    };
    Ok(Checkpoint {
        params: MetaParams {
            arch: config.arch.clone(),
            layout: header.layout,
            hierarchical: config.algorithm.hierarchical(),
            data,
        },
        adam,
        config,
        trained_steps: header.trained_steps,
    })
}

/// Write a checkpoint atomically (temp file + rename).
pub fn save_checkpoint(
    path: &Path,
    params: &MetaParams,
    adam: Option<&AdamState>,
    config: &RunConfig,
    trained_steps: u64,
) -> Result<()> {
    let bytes = encode(params, adam, config, trained_steps)?;
    let io_err = |source: std::io::Error| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &bytes).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Algorithm;
    use crate::meta::meta_train_step;
    use crate::nets::ArchSpec;
    use crate::taskgen::{purpose, sample_task, Dependence, MetaDistribution, Variant};
    use crate::rng::{derive, Stream};

    fn miniature_config(algorithm: Algorithm) -> RunConfig {
        let mut cfg = RunConfig::new(algorithm, Variant::Sine, Dependence::Dependent);
        cfg.arch = ArchSpec::miniature();
        cfg.batch_size = 2;
        cfg.n_train_tasks = 4;
        cfg.epochs = 1;
        cfg.k = 2;
        cfg.normalize().unwrap()
    }

    /// Params + Adam state with non-trivial values: one real training step.
    fn trained_state(cfg: &RunConfig) -> (MetaParams, AdamState) {
        let md = MetaDistribution::build(cfg.variant, cfg.dependence, cfg.data_seed);
        let tasks: Vec<_> = (0..cfg.batch_size)
            .map(|i| {
                let mut s =
                    Stream::new(derive(derive(cfg.data_seed, purpose::TRAIN_TASKS), i as u64));
                sample_task(&md, &mut s, cfg.n_support, cfg.n_query)
            })
            .collect();
        let mut params = cfg.init_meta_params();
        let mut adam = AdamState::new(params.data.len());
        let outer = cfg.to_outer_config();
        meta_train_step(&mut params, &mut adam, &outer, &tasks, 0, cfg.train_seed).unwrap();
        (params, adam)
    }

    #[test]
    fn roundtrip_is_bitwise_and_rewrite_is_byte_identical() {
        let cfg = miniature_config(Algorithm::Ours);
        let (params, adam) = trained_state(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");

        save_checkpoint(&path, &params, Some(&adam), &cfg, 1).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.params.data, params.data);
        assert_eq!(loaded.params.layout, params.layout);
        assert!(loaded.params.hierarchical);
        assert_eq!(loaded.config, cfg);
        assert_eq!(loaded.trained_steps, 1);
        let ladam = loaded.adam.unwrap();
        assert_eq!(ladam.m(), adam.m());
        assert_eq!(ladam.v(), adam.v());
        assert_eq!(ladam.step(), adam.step());

        let first = std::fs::read(&path).unwrap();
        save_checkpoint(&path, &params, Some(&adam), &cfg, 1).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn plain_model_without_optimizer_state_roundtrips() {
        let cfg = miniature_config(Algorithm::Reptile);
        let params = cfg.init_meta_params();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &params, None, &cfg, 40).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(loaded.adam.is_none());
        assert!(!loaded.params.hierarchical);
        assert_eq!(loaded.params.data, params.data);
        assert_eq!(loaded.trained_steps, 40);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let cfg = miniature_config(Algorithm::Ours);
        let (params, adam) = trained_state(&cfg);
        let good = encode(&params, Some(&adam), &cfg, 1).unwrap();

        // Bad magic.
        let mut bad = good.clone();
        bad[0] ^= 0xFF;
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(_))));

        // Truncated payload.
        let bad = &good[..good.len() - 1];
        assert!(matches!(decode(bad), Err(Error::Checkpoint(_))));

        // Extended payload.
        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(_))));

        // Too short for even the magic.
        assert!(matches!(decode(b"CVM"), Err(Error::Checkpoint(_))));

        // Flipped bit inside the header JSON breaks parsing or the
        // layout-hash check.
        let mut bad = good.clone();
        bad[MAGIC.len() + 4 + 40] ^= 0x01;
        assert!(decode(&bad).is_err());
    }

    #[test]
    fn version_and_unknown_fields_are_rejected() {
        let cfg = miniature_config(Algorithm::Ours);
        let (params, adam) = trained_state(&cfg);

        let rebuild = |edit: &dyn Fn(&mut serde_json::Value)| {
            let good = encode(&params, Some(&adam), &cfg, 1).unwrap();
            let header_len =
                u32::from_le_bytes(good[8..12].try_into().unwrap()) as usize;
            let mut header: serde_json::Value =
                serde_json::from_slice(&good[12..12 + header_len]).unwrap();
            edit(&mut header);
            let header_json = serde_json::to_vec(&header).unwrap();
            let mut out = Vec::new();
            out.extend_from_slice(MAGIC);
            out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
            out.extend_from_slice(&header_json);
            out.extend_from_slice(&good[12 + header_len..]);
            out
        };

        let future = rebuild(&|h| h["format_version"] = 2.into());
        let err = decode(&future).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");

        let surprising = rebuild(&|h| {
            h["surprise"] = 1.into();
        });
        assert!(decode(&surprising).is_err());

        // A header whose config implies a different layout than stored
        // (plain maml vs the hierarchical layout) must be rejected.
        let mismatched = rebuild(&|h| h["config"]["algorithm"] = "maml".into());
        let err = decode(&mismatched).unwrap_err();
        assert!(
            err.to_string().contains("layout"),
            "expected a layout complaint, got: {err}"
        );
    }
}
