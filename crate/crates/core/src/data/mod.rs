//! Samples, the line-delimited corpus format, vocabularies, batching and
//! the synthetic corpus generator.

mod batch;
mod generator;
mod vocab;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use batch::{make_batches, truncate, Batch};
pub use generator::{generate_corpus, Corpus, CorpusStats, GeneratorSpec, SplitStats};
pub use vocab::{Vocab, PAD, UNK};

use crate::error::{Error, Result};
use crate::labels::{parse_tags, tag_strings, validate_bio, Tag};
use crate::lattice::{ObjectAnnotation, ObjectKind};

/// A visual object attached to a sample, identified by its concept string.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleObject {
    pub concept: String,
    pub kind: ObjectKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<[usize; 2]>,
}

impl SampleObject {
    pub fn annotation(&self, object_id: usize) -> ObjectAnnotation {
        ObjectAnnotation {
            object: object_id,
            kind: self.kind,
            span: self.span.map(|[a, b]| (a, b)),
        }
    }
}

/// One sentence with gold BIO tags and its visual objects.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub tokens: Vec<String>,
    pub tags: Vec<Tag>,
    pub objects: Vec<SampleObject>,
}

impl Sample {
    pub fn new(tokens: Vec<String>, tags: Vec<Tag>, objects: Vec<SampleObject>) -> Result<Self> {
        let s = Self { tokens, tags, objects };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::Data("sample has no tokens".into()));
        }
        if self.tokens.len() != self.tags.len() {
            return Err(Error::Data(format!(
                "{} tokens but {} labels",
                self.tokens.len(),
                self.tags.len()
            )));
        }
        validate_bio(&self.tags)?;
        for o in &self.objects {
            o.annotation(0).validate(self.tokens.len())?;
        }
        Ok(())
    }

    /// The same sample without visual objects.
    pub fn without_objects(&self) -> Self {
        Self {
            objects: Vec::new(),
            ..self.clone()
        }
    }
}

/// On-disk form of a sample: one JSON object per line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub tokens: Vec<String>,
    pub labels: Vec<String>,
    pub objects: Vec<SampleObject>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pred_labels: Option<Vec<String>>,
}

impl From<&Sample> for Record {
    fn from(s: &Sample) -> Self {
        Self {
            tokens: s.tokens.clone(),
            labels: tag_strings(&s.tags),
            objects: s.objects.clone(),
            pred_labels: None,
        }
    }
}

impl TryFrom<Record> for Sample {
    type Error = Error;

    fn try_from(r: Record) -> Result<Self> {
        Sample::new(r.tokens, parse_tags(&r.labels)?, r.objects)
    }
}

pub fn write_records(path: impl AsRef<Path>, records: &[Record]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_corpus(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let records: Vec<Record> = samples.iter().map(Record::from).collect();
    write_records(path, &records)
}

/// Reads raw records; blank lines are skipped.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Reads and validates a corpus file.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Record {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        out.push(Sample::try_from(rec).map_err(|e| err(e.to_string()))?);
    }
    Ok(out)
}
