//! On-disk formats.
//!
//! Embeddings (`DFRE`, little-endian):
//!
//! ```text
//! magic "DFRE" | u32 version = 1 | u64 n | u32 d | u32 n_classes | u32 n_groups
//! n·d f32 features, row-major | n u32 labels | n u32 groups
//! ```
//!
//! The CSV variant has an optional `# n_classes=C n_groups=G` line followed by
//! the header `feat_0,...,feat_{d-1},label,group`. Without the metadata line,
//! class and group counts are taken as one past the largest value present.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::EmbeddingDataset;
use crate::error::{DfrError, LoadError, Position, Result};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"DFRE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingFormat {
    Csv,
    Binary,
}

impl EmbeddingFormat {
    /// `.csv` means CSV, anything else binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Self::Csv,
            _ => Self::Binary,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::Binary => "dfre",
        }
    }
}

pub fn load_embeddings(path: &Path, format: EmbeddingFormat) -> Result<EmbeddingDataset> {
    match format {
        EmbeddingFormat::Binary => decode_embeddings(&fs::read(path)?),
        EmbeddingFormat::Csv => read_csv(BufReader::new(fs::File::open(path)?)),
    }
}

pub fn save_embeddings(dataset: &EmbeddingDataset, path: &Path, format: EmbeddingFormat) -> Result<()> {
    let report = crate::data::validate(dataset);
    if !report.is_ok() {
        return Err(DfrError::InvalidDataset(report.to_string()));
    }
    let mut out = BufWriter::new(fs::File::create(path)?);
    match format {
        EmbeddingFormat::Binary => out.write_all(&encode_embeddings(dataset))?,
        EmbeddingFormat::Csv => write_csv(dataset, &mut out)?,
    }
    out.flush()?;
    Ok(())
}

pub fn encode_embeddings(dataset: &EmbeddingDataset) -> Vec<u8> {
    let (n, d) = (dataset.n_rows(), dataset.dim());
    let mut buf = Vec::with_capacity(28 + 4 * n * (d + 2));
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    for v in [d, dataset.n_classes(), dataset.n_groups()] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in dataset.features().iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &y in dataset.labels() {
        buf.extend_from_slice(&(y as u32).to_le_bytes());
    }
    for &g in dataset.groups() {
        buf.extend_from_slice(&(g as u32).to_le_bytes());
    }
    buf
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingDataset> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(EMBEDDING_MAGIC, "DFRE")?;
    r.expect_version(FORMAT_VERSION)?;
    let n = r.u64()? as usize;
    let d = r.u32()? as usize;
    let n_classes = r.u32()? as usize;
    let n_groups = r.u32()? as usize;
    let header_end = r.position();
    if n == 0 || n_classes == 0 || n_groups == 0 {
        return Err(LoadError::MalformedHeader {
            position: header_end,
            message: format!("n = {n}, n_classes = {n_classes}, n_groups = {n_groups}; all must be positive"),
        }
        .into());
    }
    let needed = n
        .checked_mul(d + 2)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| LoadError::MalformedHeader {
            position: header_end,
            message: "declared size overflows".into(),
        })?;
    if r.remaining() < needed {
        return Err(LoadError::Truncated(Position::Byte(bytes.len() as u64)).into());
    }
    let mut features = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        let at = r.position();
        let v = r.f32()?;
        if !v.is_finite() {
            return Err(LoadError::NonFinite(at).into());
        }
        features.push(v);
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.position();
        let label = r.u32()? as usize;
        if label >= n_classes {
            return Err(LoadError::LabelOutOfRange {
                position: at,
                label: label as u64,
                n_classes,
            }
            .into());
        }
        labels.push(label);
    }
    let mut groups = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.position();
        let group = r.u32()? as usize;
        if group >= n_groups {
            return Err(LoadError::GroupOutOfRange {
                position: at,
                group: group as u64,
                n_groups,
            }
            .into());
        }
        groups.push(group);
    }
    r.expect_end()?;
    let features = Array2::from_shape_vec((n, d), features).expect("length checked above");
    EmbeddingDataset::new(features, labels, groups, n_classes, n_groups)
}

fn write_csv<W: Write>(dataset: &EmbeddingDataset, out: &mut W) -> Result<()> {
    writeln!(
        out,
        "# n_classes={} n_groups={}",
        dataset.n_classes(),
        dataset.n_groups()
    )?;
    let mut header: Vec<String> = (0..dataset.dim()).map(|j| format!("feat_{j}")).collect();
    header.push("label".into());
    header.push("group".into());
    writeln!(out, "{}", header.join(","))?;
    for ((row, y), g) in dataset
        .features()
        .rows()
        .into_iter()
        .zip(dataset.labels())
        .zip(dataset.groups())
    {
        for v in row {
            // Debug formatting is the shortest representation that round-trips.
            write!(out, "{v:?},")?;
        }
        writeln!(out, "{y},{g}")?;
    }
    Ok(())
}

fn read_csv<R: BufRead>(reader: R) -> Result<EmbeddingDataset> {
    let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut declared: Option<(usize, usize)> = None;

    let (mut line_no, mut line) = match lines.next() {
        Some((no, l)) => (no, l?),
        None => {
            return Err(LoadError::MalformedHeader {
                position: Position::Line(1),
                message: "empty file".into(),
            }
            .into())
        }
    };
    if let Some(meta) = line.strip_prefix('#') {
        declared = Some(parse_meta(meta, line_no)?);
        match lines.next() {
            Some((no, l)) => {
                line_no = no;
                line = l?;
            }
            None => {
                return Err(LoadError::MalformedHeader {
                    position: Position::Line(line_no + 1),
                    message: "missing header row".into(),
                }
                .into())
            }
        }
    }

    let columns: Vec<&str> = line.trim_end().split(',').collect();
    let d = columns.len().saturating_sub(2);
    let header_ok = columns.len() >= 2
        && columns[d] == "label"
        && columns[d + 1] == "group"
        && columns[..d]
            .iter()
            .enumerate()
            .all(|(j, c)| *c == format!("feat_{j}"));
    if !header_ok {
        return Err(LoadError::MalformedHeader {
            position: Position::Line(line_no),
            message: "expected feat_0,...,feat_{d-1},label,group".into(),
        }
        .into());
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    let mut label_lines = Vec::new();
    for (no, row) in lines {
        let row = row?;
        if row.trim().is_empty() {
            continue;
        }
        let position = Position::Line(no);
        let fields: Vec<&str> = row.trim_end().split(',').collect();
        if fields.len() != d + 2 {
            return Err(LoadError::RowWidth {
                position,
                expected: d + 2,
                found: fields.len(),
            }
            .into());
        }
        for field in &fields[..d] {
            let v: f32 = field.trim().parse().map_err(|_| LoadError::Parse {
                position,
                field: field.to_string(),
            })?;
            if !v.is_finite() {
                return Err(LoadError::NonFinite(position).into());
            }
            features.push(v);
        }
        let parse_index = |field: &str| -> Result<u64> {
            field.trim().parse::<u64>().map_err(|_| {
                LoadError::Parse {
                    position,
                    field: field.to_string(),
                }
                .into()
            })
        };
        labels.push(parse_index(fields[d])?);
        groups.push(parse_index(fields[d + 1])?);
        label_lines.push(no);
    }
    if labels.is_empty() {
        return Err(LoadError::Truncated(Position::Line(line_no + 1)).into());
    }

    let (n_classes, n_groups) = declared.unwrap_or_else(|| {
        (
            labels.iter().max().map_or(0, |&m| m as usize + 1),
            groups.iter().max().map_or(0, |&m| m as usize + 1),
        )
    });
    for (i, (&y, &g)) in labels.iter().zip(&groups).enumerate() {
        let position = Position::Line(label_lines[i]);
        if y as usize >= n_classes {
            return Err(LoadError::LabelOutOfRange {
                position,
                label: y,
                n_classes,
            }
            .into());
        }
        if g as usize >= n_groups {
            return Err(LoadError::GroupOutOfRange {
                position,
                group: g,
                n_groups,
            }
            .into());
        }
    }
    let n = labels.len();
    let features = Array2::from_shape_vec((n, d), features).expect("row widths checked");
    EmbeddingDataset::new(
        features,
        labels.into_iter().map(|v| v as usize).collect(),
        groups.into_iter().map(|v| v as usize).collect(),
        n_classes,
        n_groups,
    )
}

fn parse_meta(meta: &str, line_no: usize) -> Result<(usize, usize)> {
    let mut n_classes = None;
    let mut n_groups = None;
    for token in meta.split_whitespace() {
        let (key, value) = token.split_once('=').unwrap_or((token, ""));
        let parsed = value.parse::<usize>().ok();
        match key {
            "n_classes" => n_classes = parsed,
            "n_groups" => n_groups = parsed,
            _ => {}
        }
    }
    match (n_classes, n_groups) {
        (Some(c), Some(g)) if c > 0 && g > 0 => Ok((c, g)),
        _ => Err(LoadError::MalformedHeader {
            position: Position::Line(line_no),
            message: "metadata line must be `# n_classes=C n_groups=G`".into(),
        }
        .into()),
    }
}

/// Little-endian cursor that reports byte offsets in its errors.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, offset: 0 }
    }

    pub(crate) fn position(&self) -> Position {
        Position::Byte(self.offset as u64)
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.offset
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N], LoadError> {
        let end = self.offset + N;
        if end > self.bytes.len() {
            return Err(LoadError::Truncated(Position::Byte(self.bytes.len() as u64)));
        }
        let mut out = [0u8; N];
        out.copy_from_slice(&self.bytes[self.offset..end]);
        self.offset = end;
        Ok(out)
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8; 4], name: &'static str) -> Result<(), LoadError> {
        let at = self.position();
        if self.take::<4>()? != *magic {
            return Err(LoadError::BadMagic(at, name));
        }
        Ok(())
    }

    pub(crate) fn expect_version(&mut self, version: u32) -> Result<(), LoadError> {
        let at = self.position();
        let found = self.u32()?;
        if found != version {
            return Err(LoadError::UnsupportedVersion {
                position: at,
                version: found,
            });
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<u32, LoadError> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, LoadError> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    pub(crate) fn f32(&mut self) -> Result<f32, LoadError> {
        Ok(f32::from_le_bytes(self.take()?))
    }

    pub(crate) fn f64(&mut self) -> Result<f64, LoadError> {
        Ok(f64::from_le_bytes(self.take()?))
    }

    /// `count` finite f64 values.
    pub(crate) fn finite_f64s(&mut self, count: usize) -> Result<Vec<f64>, LoadError> {
        if self.remaining() / 8 < count {
            return Err(LoadError::Truncated(Position::Byte(self.bytes.len() as u64)));
        }
        (0..count)
            .map(|_| {
                let at = self.position();
                let v = self.f64()?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(LoadError::NonFinite(at))
                }
            })
            .collect()
    }

    pub(crate) fn expect_end(&self) -> Result<(), LoadError> {
        if self.offset != self.bytes.len() {
            return Err(LoadError::TrailingData(self.position()));
        }
        Ok(())
    }
}
