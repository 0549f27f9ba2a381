//! Descriptor kinds and the column-major feature matrix shared by every
//! extractor, the codebook builder and the encoder.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptorKind {
    Surf,
    Dsurf,
    Hog,
    Lbp,
}

impl DescriptorKind {
    pub const ALL: [DescriptorKind; 4] = [Self::Dsurf, Self::Surf, Self::Hog, Self::Lbp];

    /// Kinds combined in multiple-dictionary mode, in concatenation order.
    pub const MULTIPLE: [DescriptorKind; 3] = [Self::Dsurf, Self::Hog, Self::Lbp];

    /// Rows of a feature matrix of this kind.
    pub fn dim(self) -> usize {
        match self {
            Self::Surf => 64,
            Self::Dsurf => 192,
            Self::Hog => 93,
            Self::Lbp => 174,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Surf => "surf",
            Self::Dsurf => "dsurf",
            Self::Hog => "hog",
            Self::Lbp => "lbp",
        }
    }

    fn tag(self) -> u8 {
        match self {
            Self::Surf => 1,
            Self::Dsurf => 2,
            Self::Hog => 3,
            Self::Lbp => 4,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            1 => Self::Surf,
            2 => Self::Dsurf,
            3 => Self::Hog,
            4 => Self::Lbp,
            _ => return None,
        })
    }
}

impl fmt::Display for DescriptorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DescriptorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "surf" => Ok(Self::Surf),
            "dsurf" => Ok(Self::Dsurf),
            "hog" => Ok(Self::Hog),
            "lbp" => Ok(Self::Lbp),
            other => Err(Error::InvalidParameter(format!("unknown descriptor kind {other:?}"))),
        }
    }
}

/// `dim x count` pool of descriptors, one descriptor per column.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    kind: DescriptorKind,
    count: usize,
    data: Vec<f64>,
}

const MAGIC: &[u8; 4] = b"RBFM";
const FORMAT_VERSION: u32 = 1;

impl FeatureMatrix {
    pub fn new(kind: DescriptorKind) -> Self {
        Self {
            kind,
            count: 0,
            data: Vec::new(),
        }
    }

    /// Wraps column-major `data`; its length must be a multiple of the kind's dimension.
    pub fn from_columns(kind: DescriptorKind, data: Vec<f64>) -> Result<Self> {
        let dim = kind.dim();
        if data.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: data.len() % dim,
            });
        }
        Ok(Self {
            kind,
            count: data.len() / dim,
            data,
        })
    }

    #[inline]
    pub fn kind(&self) -> DescriptorKind {
        self.kind
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.kind.dim()
    }

    #[inline]
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    #[inline]
    pub fn column(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn columns(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn push_column(&mut self, column: &[f64]) {
        assert_eq!(column.len(), self.dim(), "column length must match descriptor dimension");
        self.data.extend_from_slice(column);
        self.count += 1;
    }

    /// Appends all columns of `other` (horizontal concatenation).
    pub fn extend(&mut self, other: &FeatureMatrix) -> Result<()> {
        if other.kind != self.kind {
            return Err(Error::KindMismatch {
                expected: self.kind,
                found: other.kind,
            });
        }
        self.data.extend_from_slice(&other.data);
        self.count += other.count;
        Ok(())
    }

    /// Keeps the first `max` columns.
    pub fn truncate(&mut self, max: usize) {
        if max < self.count {
            self.count = max;
            self.data.truncate(max * self.dim());
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&[self.kind.tag()])?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        w.write_all(&(self.count as u64).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a feature matrix file".into()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("feature matrix version {version}")));
        }
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let kind = DescriptorKind::from_tag(tag[0])
            .ok_or_else(|| Error::Format(format!("descriptor tag {}", tag[0])))?;
        r.read_exact(&mut u32buf)?;
        let dim = u32::from_le_bytes(u32buf) as usize;
        if dim != kind.dim() {
            return Err(Error::DimensionMismatch {
                expected: kind.dim(),
                found: dim,
            });
        }
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let count = u64::from_le_bytes(u64buf) as usize;
        let mut data = Vec::with_capacity(count * dim);
        for _ in 0..count * dim {
            r.read_exact(&mut u64buf)?;
            data.push(f64::from_le_bytes(u64buf));
        }
        Ok(Self { kind, count, data })
    }
}

/// All descriptor matrices extracted from one image, keyed by kind.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureSet {
    matrices: BTreeMap<DescriptorKind, FeatureMatrix>,
}

impl FeatureSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, m: FeatureMatrix) {
        self.matrices.insert(m.kind(), m);
    }

    pub fn get(&self, kind: DescriptorKind) -> Option<&FeatureMatrix> {
        self.matrices.get(&kind)
    }

    pub fn require(&self, kind: DescriptorKind) -> Result<&FeatureMatrix> {
        self.get(kind).ok_or(Error::NoDescriptors(kind))
    }

    pub fn kinds(&self) -> impl Iterator<Item = DescriptorKind> + '_ {
        self.matrices.keys().copied()
    }
}
