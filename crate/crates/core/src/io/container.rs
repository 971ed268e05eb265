//! `DSHORE01` container: magic, u32 LE header length, JSON header, then the
//! f32 LE payload of every segment in header order (row-major).

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DSHORE01";
pub const DTYPE: &str = "f32le";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContainerKind {
    Dataset,
    Coeffs,
    Model,
    Report,
}

impl ContainerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Dataset => "dataset",
            Self::Coeffs => "coeffs",
            Self::Model => "model",
            Self::Report => "report",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub kind: ContainerKind,
    pub dtype: String,
    pub segments: Vec<Segment>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    header: ContainerHeader,
    data: Vec<Vec<f32>>,
}

impl Container {
    pub fn new(kind: ContainerKind, metadata: serde_json::Value) -> Self {
        Self {
            header: ContainerHeader {
                kind,
                dtype: DTYPE.to_string(),
                segments: Vec::new(),
                metadata,
            },
            data: Vec::new(),
        }
    }

    pub fn kind(&self) -> ContainerKind {
        self.header.kind
    }

    pub fn header(&self) -> &ContainerHeader {
        &self.header
    }

    pub fn metadata(&self) -> &serde_json::Value {
        &self.header.metadata
    }

    pub fn push_segment(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let seg = Segment {
            name: name.to_string(),
            shape,
        };
        if seg.len() != data.len() {
            return Err(Error::Format(format!(
                "segment {name}: shape holds {} values, got {}",
                seg.len(),
                data.len()
            )));
        }
        if self.header.segments.iter().any(|s| s.name == name) {
            return Err(Error::Format(format!("duplicate segment {name}")));
        }
        self.header.segments.push(seg);
        self.data.push(data);
        Ok(())
    }

    pub fn push_matrix(&mut self, name: &str, m: &DMatrix<f64>) -> Result<()> {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            data.extend(m.row(r).iter().map(|&v| v as f32));
        }
        self.push_segment(name, vec![m.nrows(), m.ncols()], data)
    }

    pub fn push_vector(&mut self, name: &str, v: &[f64]) -> Result<()> {
        self.push_segment(name, vec![v.len()], v.iter().map(|&x| x as f32).collect())
    }

    pub fn segment(&self, name: &str) -> Option<(&Segment, &[f32])> {
        self.header
            .segments
            .iter()
            .position(|s| s.name == name)
            .map(|i| (&self.header.segments[i], self.data[i].as_slice()))
    }

    fn require(&self, name: &str) -> Result<(&Segment, &[f32])> {
        self.segment(name)
            .ok_or_else(|| Error::Format(format!("{} container has no segment {name}", self.kind().as_str())))
    }

    pub fn matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        let (seg, data) = self.require(name)?;
        let [rows, cols] = seg.shape[..] else {
            return Err(Error::Format(format!("segment {name} is not two-dimensional")));
        };
        Ok(DMatrix::from_row_iterator(rows, cols, data.iter().map(|&v| v as f64)))
    }

    pub fn vector(&self, name: &str) -> Result<Vec<f64>> {
        let (_, data) = self.require(name)?;
        Ok(data.iter().map(|&v| v as f64).collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let header_len = u32::try_from(header.len())
            .map_err(|_| Error::Format("header longer than 4 GiB".into()))?;
        let payload: usize = self.data.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(12 + header.len() + 4 * payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for seg in &self.data {
            for v in seg {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("four bytes")) as usize;
        let body = &bytes[12..];
        if body.len() < header_len {
            return Err(Error::Format("truncated header".into()));
        }
        let header: ContainerHeader = serde_json::from_slice(&body[..header_len])
            .map_err(|e| Error::Format(format!("header: {e}")))?;
        if header.dtype != DTYPE {
            return Err(Error::Format(format!("unsupported dtype {}", header.dtype)));
        }
        let payload = &body[header_len..];
        let declared: usize = header.segments.iter().map(Segment::len).sum();
        if payload.len() != 4 * declared {
            return Err(Error::Format(format!(
                "payload has {} bytes, segments declare {}",
                payload.len(),
                4 * declared
            )));
        }
        let mut data = Vec::with_capacity(header.segments.len());
        let mut offset = 0;
        for seg in &header.segments {
            let n = seg.len();
            data.push(
                payload[offset..offset + 4 * n]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                    .collect(),
            );
            offset += 4 * n;
        }
        Ok(Self { header, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Reads and checks the kind.
    pub fn read_kind(path: &Path, kind: ContainerKind) -> Result<Self> {
        let c = Self::read(path)?;
        if c.kind() != kind {
            return Err(Error::Format(format!(
                "{} holds a {} container, expected {}",
                path.display(),
                c.kind().as_str(),
                kind.as_str()
            )));
        }
        Ok(c)
    }
}
