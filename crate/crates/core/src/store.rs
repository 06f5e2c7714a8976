//! Line-oriented dataset and observation files, and canonical checkpoints.
//!
//! * Datasets: one JSON object per line with `id`, `name`, `description`,
//!   `image_ref`, `cluster`. Blank lines are skipped.
//! * Observation logs: one JSON observation per line, with an optional
//!   `batch_id` naming the HIT it came from. Append-only.
//! * Checkpoints: a single JSON document whose floats are written with 17
//!   significant digits, wrapped with a schema version and a SHA-256 of the
//!   canonical body.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{validate_dataset, Dataset, Embedding, GlobalParams, HitBatch, ModelKind, ObjectRecord, Observation, UserProfile, Verdict};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optimizer::OptimizerConfig;

fn parse_lines<T: for<'de> Deserialize<'de>>(text: &str, path: &Path) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse { path: path.to_owned(), line: i + 1, message: e.to_string() })
        })
        .collect()
}

pub fn parse_dataset(text: &str, path: &Path) -> Result<Dataset> {
    validate_dataset(parse_lines(text, path)?)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    parse_dataset(&fs::read_to_string(path)?, path)
}

pub fn write_dataset(path: impl AsRef<Path>, records: &[ObjectRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// One line of an observation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_id: Option<String>,
    #[serde(flatten)]
    pub observation: Observation,
}

pub fn read_observations(path: impl AsRef<Path>) -> Result<Vec<Observation>> {
    let path = path.as_ref();
    let records: Vec<LogRecord> = parse_lines(&fs::read_to_string(path)?, path)?;
    Ok(records.into_iter().map(|r| r.observation).collect())
}

pub fn write_observations(path: impl AsRef<Path>, observations: &[Observation]) -> Result<()> {
    let mut out = String::new();
    for o in observations {
        out.push_str(&serde_json::to_string(o)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Append-only observation log, optionally mirrored to a file.
#[derive(Debug, Default)]
pub struct ObservationLog {
    path: Option<PathBuf>,
    records: Vec<LogRecord>,
}

impl ObservationLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a log file and replays it.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let records = match fs::read_to_string(&path) {
            Ok(text) => parse_lines(&text, &path)?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        Ok(Self { path: Some(path), records })
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn observations(&self) -> Vec<Observation> {
        self.records.iter().map(|r| r.observation.clone()).collect()
    }

    /// Appends every answered question of an accepted batch, roles kept.
    pub fn append_batch(&mut self, batch: &HitBatch, timestamp: DateTime<Utc>) -> Result<usize> {
        if batch.verdict() != Verdict::Accepted {
            return Err(Error::LogAppend(format!(
                "batch `{}` is {:?}, only accepted batches are stored",
                batch.batch_id,
                batch.verdict()
            )));
        }
        let new: Vec<LogRecord> = batch
            .observations(timestamp)?
            .into_iter()
            .map(|observation| LogRecord { batch_id: Some(batch.batch_id.clone()), observation })
            .collect();
        if let Some(path) = &self.path {
            let mut buf = String::new();
            for r in &new {
                buf.push_str(&serde_json::to_string(r)?);
                buf.push('\n');
            }
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            f.write_all(buf.as_bytes())?;
            f.sync_data()?;
        }
        let added = new.len();
        self.records.extend(new);
        Ok(added)
    }
}

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// A fitted model as persisted on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model_kind: ModelKind,
    pub object_ids: Vec<String>,
    pub dim: usize,
    /// Row-major `n × dim` coordinates.
    pub coords: Vec<f64>,
    pub params: GlobalParams,
    pub profiles: Vec<UserProfile>,
    pub optimizer: OptimizerConfig,
    pub observation_count: usize,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    schema_version: u32,
    sha256: String,
    checkpoint: Checkpoint,
}

impl Checkpoint {
    pub fn from_model(model: &Model, dataset: &Dataset, optimizer: OptimizerConfig, observation_count: usize) -> Self {
        Self {
            model_kind: model.kind,
            object_ids: dataset.ids().map(str::to_owned).collect(),
            dim: model.dim(),
            coords: model.embedding.coords().to_vec(),
            params: model.params,
            profiles: model.profiles.values().cloned().collect(),
            optimizer,
            observation_count,
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        let embedding = Embedding::new(self.object_ids.len(), self.dim, self.coords.clone())?;
        let mut model = Model::new(self.model_kind, embedding, self.params);
        model.profiles = self.profiles.iter().map(|p| (p.user_id.clone(), p.clone())).collect();
        Ok(model)
    }

    /// Dataset stand-in built from the stored ids (single-object clusters
    /// are not needed for scoring, so every object gets its own label).
    pub fn object_index(&self) -> Result<Dataset> {
        validate_dataset(
            self.object_ids
                .iter()
                .enumerate()
                .map(|(i, id)| ObjectRecord {
                    id: id.clone(),
                    name: id.clone(),
                    description: String::new(),
                    image_ref: None,
                    cluster: format!("{i}"),
                })
                .collect(),
        )
    }

    fn check_shape(&self) -> Result<()> {
        let n = self.object_ids.len();
        if self.coords.len() != n * self.dim {
            return Err(Error::Integrity(format!(
                "{} coordinates for {n} objects of dim {}",
                self.coords.len(),
                self.dim
            )));
        }
        if let Some(p) = self.profiles.iter().find(|p| p.scaling.len() != self.dim) {
            return Err(Error::Integrity(format!("profile `{}` has {} scalings", p.user_id, p.scaling.len())));
        }
        if self.coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integrity("non-finite coordinate".into()));
        }
        Ok(())
    }
}

/// Compact JSON with every float as `d.dddddddddddddddde±x` (17 significant digits).
struct CanonicalFormatter;

impl serde_json::ser::Formatter for CanonicalFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, f64::from(value))
    }
}

fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, CanonicalFormatter);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

fn digest(body: &str) -> String {
    hex::encode(Sha256::digest(body.as_bytes()))
}

pub fn checkpoint_to_string(checkpoint: &Checkpoint) -> Result<String> {
    checkpoint.check_shape()?;
    let sha256 = digest(&canonical_json(checkpoint)?);
    let env = Envelope { schema_version: CHECKPOINT_SCHEMA_VERSION, sha256, checkpoint: checkpoint.clone() };
    let mut s = canonical_json(&env)?;
    s.push('\n');
    Ok(s)
}

pub fn checkpoint_from_str(text: &str) -> Result<Checkpoint> {
    let raw: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Integrity(format!("not a checkpoint document: {e}")))?;
    let version = raw
        .get("schema_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Integrity("missing schema_version".into()))?;
    if version != u64::from(CHECKPOINT_SCHEMA_VERSION) {
        return Err(Error::SchemaVersion { found: version as u32, expected: CHECKPOINT_SCHEMA_VERSION });
    }
    let env: Envelope = serde_json::from_str(text).map_err(|e| Error::Integrity(e.to_string()))?;
    env.checkpoint.check_shape()?;
    let actual = digest(&canonical_json(&env.checkpoint)?);
    if actual != env.sha256 {
        return Err(Error::Integrity(format!("sha256 mismatch: stored {}, computed {actual}", env.sha256)));
    }
    Ok(env.checkpoint)
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let text = checkpoint_to_string(checkpoint)?;
    // write-then-rename so readers never see a partial file
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(text.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut text = String::new();
    for line in BufReader::new(File::open(path)?).lines() {
        text.push_str(&line?);
        text.push('\n');
    }
    checkpoint_from_str(&text)
}
