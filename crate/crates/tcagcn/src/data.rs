//! Datasets, derived skeleton streams, checkpoints, and metrics files.
//!
//! Datasets and checkpoints share one on-disk layout: a JSON manifest next
//! to a binary payload of TCAT tensor records addressed by byte offset. The
//! manifest names the payload file, so a pair moves as a unit as long as
//! both files travel together.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphSpec, SkeletonGraph};
use crate::layers::ParamKind;
use crate::network::{Model, NetConfig, INPUT_CHANNELS};
use crate::tensor::{fmt_shape, read_tensor, write_tensor, Tensor};

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    /// `[T, N, 3]` joint coordinates.
    pub data: Tensor,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub graph: SkeletonGraph,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Samples must be nonempty, uniformly shaped `[T, N, 3]` on this graph,
    /// with unique ids and in-range labels. One shape keeps every subset
    /// batchable.
    pub fn new(graph: SkeletonGraph, num_classes: usize, samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::validation("dataset has no samples"));
        }
        if num_classes < 2 {
            return Err(Error::validation(format!("need at least 2 classes, got {num_classes}")));
        }
        let want = samples[0].data.shape().to_vec();
        let mut seen = std::collections::HashSet::new();
        for s in &samples {
            if s.data.rank() != 3
                || s.data.shape()[1] != graph.num_joints()
                || s.data.shape()[2] != INPUT_CHANNELS
            {
                return Err(Error::validation(format!(
                    "sample {}: shape {} does not fit [T, {}, {INPUT_CHANNELS}]",
                    s.id,
                    fmt_shape(s.data.shape()),
                    graph.num_joints()
                )));
            }
            if s.data.shape() != want {
                return Err(Error::validation(format!(
                    "sample {}: shape {} differs from {} (all samples must match)",
                    s.id,
                    fmt_shape(s.data.shape()),
                    fmt_shape(&want)
                )));
            }
            if s.label >= num_classes {
                return Err(Error::validation(format!(
                    "sample {}: label {} out of range for {num_classes} classes",
                    s.id, s.label
                )));
            }
            if !seen.insert(s.id.clone()) {
                return Err(Error::validation(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(Dataset { graph, num_classes, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn frames(&self) -> usize {
        self.samples[0].data.shape()[0]
    }

    /// Stack the chosen samples into a `[B, T, N, 3]` batch plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let shape = self.samples[0].data.shape();
        let sample_len = self.samples[0].data.numel();
        let mut out_shape = vec![indices.len()];
        out_shape.extend_from_slice(shape);
        let mut x = Tensor::zeros(&out_shape);
        let mut labels = Vec::with_capacity(indices.len());
        for (slot, &i) in indices.iter().enumerate() {
            x.data_mut()[slot * sample_len..(slot + 1) * sample_len]
                .copy_from_slice(self.samples[i].data.data());
            labels.push(self.samples[i].label);
        }
        (x, labels)
    }
}

// ── dataset files ───────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    label: usize,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    /// Builtin graph name or a graph JSON path relative to the manifest.
    graph_ref: String,
    num_classes: usize,
    /// Payload file name, relative to the manifest.
    payload: String,
    samples: Vec<SampleRecord>,
    /// Free-form provenance (e.g. the synthesis settings); not interpreted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

fn sibling(manifest: &Path, name: &str) -> std::path::PathBuf {
    manifest.parent().unwrap_or_else(|| Path::new(".")).join(name)
}

fn payload_name(manifest: &Path) -> Result<String> {
    let stem = manifest
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::validation(format!("bad manifest path {}", manifest.display())))?;
    Ok(format!("{stem}.bin"))
}

/// Write `<manifest>` and its `<stem>.bin` payload. `provenance` is stored
/// verbatim for later inspection.
pub fn save_dataset(
    ds: &Dataset,
    manifest_path: &Path,
    graph_ref: &str,
    provenance: Option<serde_json::Value>,
) -> Result<()> {
    let payload = payload_name(manifest_path)?;
    let mut w = BufWriter::new(File::create(sibling(manifest_path, &payload))?);
    let mut records = Vec::with_capacity(ds.samples.len());
    let mut offset = 0u64;
    for s in &ds.samples {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &s.data)?;
        w.write_all(&buf)?;
        records.push(SampleRecord {
            id: s.id.clone(),
            label: s.label,
            shape: s.data.shape().to_vec(),
            offset,
        });
        offset += buf.len() as u64;
    }
    w.flush()?;
    let manifest = DatasetManifest {
        graph_ref: graph_ref.to_string(),
        num_classes: ds.num_classes,
        payload,
        samples: records,
        provenance,
    };
    let mut f = BufWriter::new(File::create(manifest_path)?);
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest =
        serde_json::from_reader(BufReader::new(File::open(manifest_path)?))?;
    let base = manifest_path.parent().map(Path::to_path_buf);
    let graph = SkeletonGraph::resolve(&manifest.graph_ref, base.as_deref())?;
    let mut payload = BufReader::new(File::open(sibling(manifest_path, &manifest.payload))?);
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for rec in manifest.samples {
        payload.seek(SeekFrom::Start(rec.offset))?;
        let data = read_tensor(&mut payload)?;
        if data.shape() != rec.shape {
            return Err(Error::validation(format!(
                "sample {}: payload shape {} does not match manifest {}",
                rec.id,
                fmt_shape(data.shape()),
                fmt_shape(&rec.shape)
            )));
        }
        samples.push(Sample { id: rec.id, label: rec.label, data });
    }
    Dataset::new(graph, manifest.num_classes, samples)
}

// ── derived streams ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stream {
    Joint,
    Bone,
    JointMotion,
    BoneMotion,
}

impl Stream {
    pub const ALL: [Stream; 4] = [
        Stream::Joint,
        Stream::Bone,
        Stream::JointMotion,
        Stream::BoneMotion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stream::Joint => "joint",
            Stream::Bone => "bone",
            Stream::JointMotion => "joint-motion",
            Stream::BoneMotion => "bone-motion",
        }
    }
}

impl std::str::FromStr for Stream {
    type Err = Error;

    fn from_str(s: &str) -> Result<Stream> {
        Stream::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown stream {s:?}")))
    }
}

/// Joint differences along the skeleton: bone[t, n] = x[t, n] − x[t, parent(n)].
/// The center joint has no parent and keeps a zero vector.
fn bones(x: &Tensor, graph: &SkeletonGraph) -> Tensor {
    let (t, n, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(&[t, n, c]);
    for ti in 0..t {
        for j in 0..n {
            if let Some(p) = graph.parent(j) {
                for ch in 0..c {
                    let v = x.at(&[ti, j, ch]) - x.at(&[ti, p, ch]);
                    out.set(&[ti, j, ch], v);
                }
            }
        }
    }
    out
}

/// Frame differences: motion[t] = x[t+1] − x[t], with the last frame zero.
fn motion(x: &Tensor) -> Tensor {
    let t = x.shape()[0];
    let frame = x.numel() / t;
    let mut out = Tensor::zeros(x.shape());
    for ti in 0..t.saturating_sub(1) {
        for j in 0..frame {
            out.data_mut()[ti * frame + j] = x.data()[(ti + 1) * frame + j] - x.data()[ti * frame + j];
        }
    }
    out
}

pub fn derive_sample(x: &Tensor, graph: &SkeletonGraph, stream: Stream) -> Tensor {
    match stream {
        Stream::Joint => x.clone(),
        Stream::Bone => bones(x, graph),
        Stream::JointMotion => motion(x),
        Stream::BoneMotion => motion(&bones(x, graph)),
    }
}

/// The same dataset viewed through one of the four skeleton streams; ids and
/// labels are untouched so per-sample scores stay aligned across streams.
pub fn derive_dataset(ds: &Dataset, stream: Stream) -> Dataset {
    let samples = ds
        .samples
        .iter()
        .map(|s| Sample {
            id: s.id.clone(),
            label: s.label,
            data: derive_sample(&s.data, &ds.graph, stream),
        })
        .collect();
    Dataset { graph: ds.graph.clone(), num_classes: ds.num_classes, samples }
}

// ── checkpoints ─────────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    kind: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    graph: GraphSpec,
    config: NetConfig,
    payload: String,
    params: Vec<ParamRecord>,
}

fn kind_str(kind: ParamKind) -> &'static str {
    match kind {
        ParamKind::Trainable => "trainable",
        ParamKind::State => "state",
    }
}

/// Write `<manifest>` plus `<stem>.bin` holding every parameter tensor,
/// including batch-norm running statistics.
pub fn save_checkpoint(model: &mut Model, manifest_path: &Path) -> Result<()> {
    let payload = payload_name(manifest_path)?;
    let mut snapshot: Vec<(String, ParamKind, Tensor)> = Vec::new();
    model.visit_params(&mut |name, kind, t| snapshot.push((name, kind, t.clone())));
    let mut w = BufWriter::new(File::create(sibling(manifest_path, &payload))?);
    let mut params = Vec::with_capacity(snapshot.len());
    let mut offset = 0u64;
    for (name, kind, t) in &snapshot {
        let mut buf = Vec::new();
        write_tensor(&mut buf, t)?;
        w.write_all(&buf)?;
        params.push(ParamRecord {
            name: name.clone(),
            kind: kind_str(*kind).to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += buf.len() as u64;
    }
    w.flush()?;
    let manifest = CheckpointManifest {
        graph: model.graph.spec(),
        config: model.cfg.clone(),
        payload,
        params,
    };
    let mut f = BufWriter::new(File::create(manifest_path)?);
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

/// Rebuild a model from a checkpoint. Every tensor the architecture owns
/// must be present with its exact shape; extras are rejected too, so a
/// checkpoint and a config can never silently disagree.
pub fn load_checkpoint(manifest_path: &Path) -> Result<Model> {
    let manifest: CheckpointManifest =
        serde_json::from_reader(BufReader::new(File::open(manifest_path)?))?;
    let graph = SkeletonGraph::from_spec(&manifest.graph)?;
    let mut model = Model::init(graph, manifest.config.clone(), 0)?;
    let mut payload = BufReader::new(File::open(sibling(manifest_path, &manifest.payload))?);
    let mut records: HashMap<String, (String, Vec<usize>, u64)> = manifest
        .params
        .into_iter()
        .map(|r| (r.name.clone(), (r.kind, r.shape, r.offset)))
        .collect();
    let mut failure: Option<Error> = None;
    model.visit_params(&mut |name, kind, t| {
        if failure.is_some() {
            return;
        }
        let Some((kind_s, shape, offset)) = records.remove(&name) else {
            failure = Some(Error::validation(format!("checkpoint is missing tensor {name}")));
            return;
        };
        if kind_s != kind_str(kind) {
            failure = Some(Error::validation(format!(
                "checkpoint tensor {name} is {kind_s}, expected {}",
                kind_str(kind)
            )));
            return;
        }
        let loaded = (|| -> Result<Tensor> {
            payload.seek(SeekFrom::Start(offset))?;
            read_tensor(&mut payload)
        })();
        match loaded {
            Ok(v) if v.shape() == shape && v.shape() == t.shape() => *t = v,
            Ok(v) => {
                failure = Some(Error::validation(format!(
                    "checkpoint tensor {name}: shape {} does not match {}",
                    fmt_shape(v.shape()),
                    fmt_shape(t.shape())
                )))
            }
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = records.into_keys().next() {
        return Err(Error::validation(format!(
            "checkpoint has tensor {extra} the architecture does not"
        )));
    }
    Ok(model)
}

// ── metrics ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
    /// Present only for epochs where the held-out set was scored.
    pub eval_acc: Option<f64>,
}

pub fn write_metrics(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["epoch", "lr", "loss", "train_acc", "eval_acc"])?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            format!("{}", r.lr),
            format!("{}", r.loss),
            format!("{}", r.train_acc),
            r.eval_acc.map_or_else(String::new, |a| format!("{a}")),
        ])?;
    }
    w.flush().map_err(|e| Error::validation(format!("flushing metrics CSV: {e}")))?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let header = r.headers()?;
    if header != vec!["epoch", "lr", "loss", "train_acc", "eval_acc"] {
        return Err(Error::validation(format!("unexpected metrics header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| Error::validation(format!("bad metrics field {:?}", &rec[i])))
        };
        rows.push(EpochMetrics {
            epoch: rec[0]
                .parse()
                .map_err(|_| Error::validation(format!("bad epoch {:?}", &rec[0])))?,
            lr: field(1)?,
            loss: field(2)?,
            train_acc: field(3)?,
            eval_acc: if rec[4].is_empty() { None } else { Some(field(4)?) },
        });
    }
    Ok(rows)
}
