//! Dataset files.
//!
//! Layout: 8-byte magic `CVMDSET1`, little-endian u32 header length, a JSON
//! header (see [`DatasetHeader`]), then fixed-width records — one per task:
//!
//! ```text
//! support_x  n_support × f64 LE
//! support_y  n_support × f64 LE
//! query_x    n_query  × f64 LE
//! query_y    n_query  × f64 LE
//! mode       u32 LE
//! family     u8 (family tag)
//! ```
//!
//! The header pins the generator id and every seed, so the whole file is
//! reproducible from the header alone. Reading *regenerates* the tasks from
//! those seeds and verifies the stored records match bit for bit — this
//! doubles as corruption detection and recovers each task's hypothesis
//! (which records deliberately do not store).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive, Stream, GENERATOR_ID};
use crate::taskgen::{
    purpose, sample_task, Dependence, Family, MetaDistribution, ModeSpec, Task, Variant,
};

const MAGIC: &[u8; 8] = b"CVMDSET1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub generator: String,
    pub variant: Variant,
    pub dependence: Dependence,
    pub n_modes: usize,
    pub modes: Vec<ModeSpec>,
    pub weights: Vec<f64>,
    pub noise_sigma: f64,
    pub master_seed: u64,
    pub task_seed: u64,
    pub n_tasks: usize,
    pub n_support: usize,
    pub n_query: usize,
}

impl DatasetHeader {
    pub fn meta_distribution(&self) -> MetaDistribution {
        MetaDistribution {
            variant: self.variant,
            dependence: self.dependence,
            modes: self.modes.clone(),
            weights: self.weights.clone(),
            noise_sigma: self.noise_sigma,
            master_seed: self.master_seed,
        }
    }
}

/// Generate the `i`-th task of a dataset: task i owns substream `i` of the
/// task seed, so any task can be regenerated without replaying the others.
pub fn generate_task(
    md: &MetaDistribution,
    task_seed: u64,
    index: u64,
    n_support: usize,
    n_query: usize,
) -> Task {
    let mut stream = Stream::new(derive(task_seed, index));
    sample_task(md, &mut stream, n_support, n_query)
}

pub fn generate_tasks(
    md: &MetaDistribution,
    task_seed: u64,
    n_tasks: usize,
    n_support: usize,
    n_query: usize,
) -> Vec<Task> {
    (0..n_tasks)
        .map(|i| generate_task(md, task_seed, i as u64, n_support, n_query))
        .collect()
}

/// Build the meta-distribution and the complete training task list from one
/// data seed (the task seed is the seed's dataset-purpose substream).
pub fn dataset_from_seed(
    variant: Variant,
    dependence: Dependence,
    data_seed: u64,
    n_tasks: usize,
    n_support: usize,
    n_query: usize,
) -> (MetaDistribution, u64, Vec<Task>) {
    let md = MetaDistribution::build(variant, dependence, data_seed);
    let task_seed = derive(data_seed, purpose::TRAIN_TASKS);
    let tasks = generate_tasks(&md, task_seed, n_tasks, n_support, n_query);
    (md, task_seed, tasks)
}

fn record_len(n_support: usize, n_query: usize) -> usize {
    8 * (2 * n_support + 2 * n_query) + 4 + 1
}

pub fn write_dataset(
    path: &Path,
    md: &MetaDistribution,
    task_seed: u64,
    tasks: &[Task],
) -> Result<()> {
    let (n_support, n_query) = match tasks.first() {
        Some(t) => (t.support_x.len(), t.query_x.len()),
        None => return Err(Error::Dataset("refusing to write an empty dataset".into())),
    };
    for (i, t) in tasks.iter().enumerate() {
        if t.support_x.len() != n_support
            || t.support_y.len() != n_support
            || t.query_x.len() != n_query
            || t.query_y.len() != n_query
        {
            return Err(Error::Dataset(format!(
                "task {i} has inconsistent support/query sizes"
            )));
        }
    }
    let header = DatasetHeader {
        format_version: FORMAT_VERSION,
        generator: GENERATOR_ID.to_string(),
        variant: md.variant,
        dependence: md.dependence,
        n_modes: md.n_modes(),
        modes: md.modes.clone(),
        weights: md.weights.clone(),
        noise_sigma: md.noise_sigma,
        master_seed: md.master_seed,
        task_seed,
        n_tasks: tasks.len(),
        n_support,
        n_query,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Dataset(format!("header serialization failed: {e}")))?;

    let mut buf =
        Vec::with_capacity(12 + header_json.len() + tasks.len() * record_len(n_support, n_query));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for t in tasks {
        for arr in [&t.support_x, &t.support_y, &t.query_x, &t.query_y] {
            for v in arr.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf.extend_from_slice(&(t.mode as u32).to_le_bytes());
        buf.push(t.hypothesis.family.tag());
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

/// Parse and verify a dataset file. The returned tasks are the regenerated
/// ones (hypotheses included), proven identical to the stored records.
pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<Task>)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 12 || &buf[..8] != MAGIC {
        return Err(Error::Dataset(format!(
            "{} is not a dataset file (bad magic)",
            path.display()
        )));
    }
    let header_len = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    if buf.len() < 12 + header_len {
        return Err(Error::Dataset("truncated dataset header".into()));
    }
    let header: DatasetHeader = serde_json::from_slice(&buf[12..12 + header_len])
        .map_err(|e| Error::Dataset(format!("invalid dataset header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Dataset(format!(
            "unsupported dataset format version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    if header.generator != GENERATOR_ID {
        return Err(Error::Dataset(format!(
            "dataset generated by {:?}, this build implements {GENERATOR_ID:?}",
            header.generator
        )));
    }
    if header.modes.len() != header.n_modes || header.weights.len() != header.n_modes {
        return Err(Error::Dataset("mode table sizes disagree with n_modes".into()));
    }

    let rec = record_len(header.n_support, header.n_query);
    let body = &buf[12 + header_len..];
    if body.len() != rec * header.n_tasks {
        return Err(Error::Dataset(format!(
            "expected {} record bytes for {} tasks, found {}",
            rec * header.n_tasks,
            header.n_tasks,
            body.len()
        )));
    }

    // Regenerate from the declared seeds, verifying the meta-distribution
    // hyperdraws first…
    let rebuilt = MetaDistribution::build(header.variant, header.dependence, header.master_seed);
    if rebuilt.modes != header.modes || rebuilt.weights != header.weights {
        return Err(Error::Dataset(
            "stored mode table does not match its master seed".into(),
        ));
    }
    let md = header.meta_distribution();
    let tasks = generate_tasks(
        &md,
        header.task_seed,
        header.n_tasks,
        header.n_support,
        header.n_query,
    );

    // …then every stored record, bit for bit.
    let mut off = 0usize;
    let read_f64s = |buf: &[u8], off: &mut usize, n: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(f64::from_le_bytes(buf[*off..*off + 8].try_into().unwrap()));
            *off += 8;
        }
        out
    };
    for (i, task) in tasks.iter().enumerate() {
        let sx = read_f64s(body, &mut off, header.n_support);
        let sy = read_f64s(body, &mut off, header.n_support);
        let qx = read_f64s(body, &mut off, header.n_query);
        let qy = read_f64s(body, &mut off, header.n_query);
        let mode = u32::from_le_bytes(body[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
        let family = Family::from_tag(body[off])?;
        off += 1;
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        if bits(&sx) != bits(&task.support_x)
            || bits(&sy) != bits(&task.support_y)
            || bits(&qx) != bits(&task.query_x)
            || bits(&qy) != bits(&task.query_y)
            || mode != task.mode
            || family != task.hypothesis.family
        {
            return Err(Error::Dataset(format!(
                "record {i} does not match regeneration from the declared seeds"
            )));
        }
    }

    Ok((header, tasks))
}
