//! Hard-assignment coding and count pooling against visual dictionaries.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::{nearest, Assignment, Codebook};
use crate::error::{Error, Result};
use crate::features::{DescriptorKind, FeatureMatrix, FeatureSet};

/// Which dictionaries a histogram is built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum EncodingMode {
    Single(DescriptorKind),
    Multiple,
}

impl EncodingMode {
    /// The four single modes followed by the multiple mode.
    pub const ALL: [EncodingMode; 5] = [
        Self::Single(DescriptorKind::Dsurf),
        Self::Single(DescriptorKind::Surf),
        Self::Single(DescriptorKind::Hog),
        Self::Single(DescriptorKind::Lbp),
        Self::Multiple,
    ];

    /// Descriptor kinds consumed, in segment order.
    pub fn kinds(self) -> Vec<DescriptorKind> {
        match self {
            Self::Single(k) => vec![k],
            Self::Multiple => DescriptorKind::MULTIPLE.to_vec(),
        }
    }

    pub fn histogram_len(self, k: usize) -> usize {
        self.kinds().len() * k
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Single(k) => k.name(),
            Self::Multiple => "multiple",
        }
    }
}

impl fmt::Display for EncodingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncodingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("multiple") {
            Ok(Self::Multiple)
        } else {
            s.parse().map(Self::Single)
        }
    }
}

impl From<EncodingMode> for String {
    fn from(m: EncodingMode) -> String {
        m.name().to_string()
    }
}

impl TryFrom<String> for EncodingMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Pooled, L2-normalized visual-word histogram (one unit-norm segment per
/// dictionary).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BowHistogram {
    pub mode: EncodingMode,
    pub k: usize,
    pub values: Vec<f64>,
}

impl BowHistogram {
    pub fn segment(&self, i: usize) -> &[f64] {
        &self.values[i * self.k..(i + 1) * self.k]
    }
}

/// Nearest word for every column; ties go to the lowest word index.
pub fn assign(features: &FeatureMatrix, cb: &Codebook) -> Result<Assignment> {
    if features.kind() != cb.kind {
        return Err(Error::KindMismatch {
            expected: cb.kind,
            found: features.kind(),
        });
    }
    if features.dim() != cb.dim {
        return Err(Error::DimensionMismatch {
            expected: cb.dim,
            found: features.dim(),
        });
    }
    if features.is_empty() {
        return Err(Error::Empty("feature matrix"));
    }
    let idx = features
        .as_slice()
        .par_chunks(cb.dim)
        .with_min_len(64)
        .map(|col| nearest(col, &cb.words, cb.dim).0)
        .collect();
    Ok(Assignment(idx))
}

/// Word counts divided by their Euclidean norm.
pub fn pool(a: &Assignment, k: usize) -> Result<Vec<f64>> {
    if a.0.is_empty() {
        return Err(Error::Empty("assignment"));
    }
    let mut counts = vec![0.0; k];
    for &i in &a.0 {
        if i >= k {
            return Err(Error::InvalidParameter(format!("word index {i} out of range for K={k}")));
        }
        counts[i] += 1.0;
    }
    let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
    Ok(counts.into_iter().map(|c| c / norm).collect())
}

/// Encodes one image. `codebooks` must contain one dictionary per kind of
/// `mode`, all with the same K; they are matched by kind.
pub fn encode_image(features: &FeatureSet, codebooks: &[Codebook], mode: EncodingMode) -> Result<BowHistogram> {
    let kinds = mode.kinds();
    let k = codebooks.first().ok_or(Error::Empty("codebook list"))?.k;
    let mut values = Vec::with_capacity(kinds.len() * k);
    for kind in kinds {
        let cb = codebooks
            .iter()
            .find(|c| c.kind == kind)
            .ok_or_else(|| Error::InvalidParameter(format!("no {kind} codebook")))?;
        if cb.k != k {
            return Err(Error::InvalidParameter("codebooks of one histogram must share K".into()));
        }
        values.extend(pool(&assign(features.require(kind)?, cb)?, k)?);
    }
    Ok(BowHistogram { mode, k, values })
}

/// One cached histogram row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramRecord {
    pub image_id: String,
    pub label: String,
    pub histogram: BowHistogram,
}

const CACHE_HEADER: &str = "# retina-bow histograms v1";

/// Writes records as CSV (`image_id,label,mode,k,h0,...`) after a version line.
pub fn write_histogram_cache(mut w: impl Write, records: &[HistogramRecord]) -> Result<()> {
    writeln!(w, "{CACHE_HEADER}")?;
    let width = records.iter().map(|r| r.histogram.values.len()).max().unwrap_or(0);
    let mut out = csv::WriterBuilder::new().flexible(true).from_writer(w);
    let mut header = vec!["image_id".to_string(), "label".into(), "mode".into(), "k".into()];
    header.extend((0..width).map(|i| format!("h{i}")));
    out.write_record(&header)?;
    for r in records {
        let mut row = vec![r.image_id.clone(), r.label.clone(), r.histogram.mode.to_string(), r.histogram.k.to_string()];
        // shortest round-trip representation
        row.extend(r.histogram.values.iter().map(|v| format!("{v:?}")));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_histogram_cache(mut r: impl Read) -> Result<Vec<HistogramRecord>> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let body = text
        .strip_prefix(CACHE_HEADER)
        .ok_or_else(|| Error::Format("missing histogram cache version line".into()))?;
    let mut rd = csv::ReaderBuilder::new().flexible(true).from_reader(body.trim_start().as_bytes());
    let mut records = Vec::new();
    for row in rd.records() {
        let row = row?;
        if row.len() < 4 {
            return Err(Error::Format("short histogram row".into()));
        }
        let mode: EncodingMode = row[2].parse()?;
        let k: usize = row[3].parse().map_err(|_| Error::Format(format!("bad K {:?}", &row[3])))?;
        let values = row
            .iter()
            .skip(4)
            .map(|v| v.parse::<f64>().map_err(|_| Error::Format(format!("bad value {v:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != mode.histogram_len(k) {
            return Err(Error::Format(format!("{} values for {mode} with K={k}", values.len())));
        }
        records.push(HistogramRecord {
            image_id: row[0].to_string(),
            label: row[1].to_string(),
            histogram: BowHistogram { mode, k, values },
        });
    }
    Ok(records)
}
