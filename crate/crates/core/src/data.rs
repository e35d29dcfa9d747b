//! Dataset containers and their on-disk formats.
//!
//! Label columns use `-1` for abstain everywhere: a labeling function that
//! does not fire, or a label model with no opinion. Classes are dense
//! `0..C`. CSV files carry no header row.
//!
//! Embeddings are stored either as CSV (one example per line) or in a small
//! binary container:
//!
//! ```text
//! b"WSEMB1\0\0" | n: u32 LE | d: u32 LE | n*d f32 LE, row-major
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const ABSTAIN: i32 = -1;
pub const EMBEDDING_MAGIC: &[u8; 8] = b"WSEMB1\0\0";

/// `n x m` matrix of labeling-function votes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    values: Vec<i32>,
    n: usize,
    m: usize,
    num_classes: usize,
}

impl LabelMatrix {
    pub fn new(values: Vec<i32>, n: usize, m: usize, num_classes: usize) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::Dimension(format!(
                "label matrix must be non-empty, got {n}x{m}"
            )));
        }
        if values.len() != n * m {
            return Err(Error::Dimension(format!(
                "label matrix has {} values, expected {n}x{m}",
                values.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::Parameter(format!(
                "num_classes must be >= 2, got {num_classes}"
            )));
        }
        for (idx, &v) in values.iter().enumerate() {
            if v != ABSTAIN && (v < 0 || v as usize >= num_classes) {
                return Err(Error::Dimension(format!(
                    "row {}, column {}: label {v} out of range [0,{}]",
                    idx / m + 1,
                    idx % m + 1,
                    num_classes - 1
                )));
            }
        }
        Ok(Self {
            values,
            n,
            m,
            num_classes,
        })
    }

    pub fn from_rows(rows: &[Vec<i32>], num_classes: usize) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != m) {
            return Err(Error::Dimension(format!("ragged row {}", bad + 1)));
        }
        Self::new(rows.concat(), rows.len(), m, num_classes)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, i: usize, k: usize) -> i32 {
        self.values[i * self.m + k]
    }

    pub fn row(&self, i: usize) -> &[i32] {
        &self.values[i * self.m..(i + 1) * self.m]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[i32]> {
        self.values.chunks_exact(self.m)
    }

    pub fn values(&self) -> &[i32] {
        &self.values
    }

    /// Copy with labeling-function columns reordered; `perm[k]` is the
    /// source column of output column `k`.
    pub fn permute_columns(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.m {
            return Err(Error::Dimension(format!(
                "column permutation has length {}, matrix has {} columns",
                perm.len(),
                self.m
            )));
        }
        let values = self
            .rows()
            .flat_map(|row| perm.iter().map(move |&k| row[k]))
            .collect();
        Self::new(values, self.n, self.m, self.num_classes)
    }
}

/// Dense `n x d` matrix of representations, row `i` is the embedding of
/// example `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    values: Vec<f32>,
    n: usize,
    d: usize,
}

impl EmbeddingMatrix {
    pub fn new(values: Vec<f32>, n: usize, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::Dimension("embedding dimension must be >= 1".into()));
        }
        if values.len() != n * d {
            return Err(Error::Dimension(format!(
                "embedding matrix has {} values, expected {n}x{d}",
                values.len()
            )));
        }
        if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite value at ({},{})",
                idx / d + 1,
                idx % d + 1
            )));
        }
        Ok(Self { values, n, d })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != d) {
            return Err(Error::Dimension(format!("ragged row {}", bad + 1)));
        }
        Self::new(rows.concat(), rows.len(), d)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// New matrix holding only the listed rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut values = Vec::with_capacity(rows.len() * self.d);
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        Self {
            values,
            n: rows.len(),
            d: self.d,
        }
    }
}

/// Output of a label model: hard labels (with abstains) and, optionally, the
/// per-class posterior each hard label was derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabeling {
    pub hard: Vec<i32>,
    /// Row-major `n x C`.
    pub soft: Option<Vec<f64>>,
    pub num_classes: usize,
}

impl PseudoLabeling {
    pub fn hard_only(hard: Vec<i32>, num_classes: usize) -> Result<Self> {
        let p = Self {
            hard,
            soft: None,
            num_classes,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_soft(hard: Vec<i32>, soft: Vec<f64>, num_classes: usize) -> Result<Self> {
        let p = Self {
            hard,
            soft: Some(soft),
            num_classes,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.hard.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hard.is_empty()
    }

    pub fn soft_row(&self, i: usize) -> Option<&[f64]> {
        let c = self.num_classes;
        self.soft.as_ref().map(|s| &s[i * c..(i + 1) * c])
    }

    /// Indices with a non-abstain hard label, ascending.
    pub fn covered(&self) -> Vec<usize> {
        self.hard
            .iter()
            .enumerate()
            .filter(|(_, &h)| h != ABSTAIN)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes;
        if c < 2 {
            return Err(Error::Parameter(format!(
                "num_classes must be >= 2, got {c}"
            )));
        }
        for (i, &h) in self.hard.iter().enumerate() {
            if h != ABSTAIN && (h < 0 || h as usize >= c) {
                return Err(Error::Dimension(format!(
                    "pseudolabel {h} at row {} out of range [0,{}]",
                    i + 1,
                    c - 1
                )));
            }
        }
        let Some(soft) = &self.soft else {
            return Ok(());
        };
        if soft.len() != self.hard.len() * c {
            return Err(Error::Dimension(format!(
                "soft labels have {} values, expected {}x{c}",
                soft.len(),
                self.hard.len()
            )));
        }
        for (i, row) in soft.chunks_exact(c).enumerate() {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::Domain(format!(
                    "soft label row {} has a negative or non-finite entry",
                    i + 1
                )));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(Error::Domain(format!(
                    "soft label row {} sums to {total}, expected 1",
                    i + 1
                )));
            }
            if self.hard[i] != ABSTAIN && self.hard[i] as usize != argmax(row) {
                return Err(Error::Domain(format!(
                    "hard label {} at row {} is not the argmax of its soft label",
                    self.hard[i],
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub labels: LabelMatrix,
    pub embeddings: EmbeddingMatrix,
    pub gold: Option<Vec<u32>>,
}

/// Cross-field checks for a dataset and, when given, the pseudolabels
/// derived from it.
pub fn validate_dataset(d: &Dataset, pseudo: Option<&PseudoLabeling>) -> Result<()> {
    let n = d.labels.n();
    if d.embeddings.n() != n {
        return Err(Error::Dimension(format!(
            "labels have {n} rows but embeddings have {}",
            d.embeddings.n()
        )));
    }
    if let Some(gold) = &d.gold {
        if gold.len() != n {
            return Err(Error::Dimension(format!(
                "labels have {n} rows but gold has {}",
                gold.len()
            )));
        }
        let c = d.labels.num_classes();
        if let Some(pos) = gold.iter().position(|&g| g as usize >= c) {
            return Err(Error::Dimension(format!(
                "gold label {} at row {} out of range [0,{}]",
                gold[pos],
                pos + 1,
                c - 1
            )));
        }
    }
    if let Some(p) = pseudo {
        if p.len() != n {
            return Err(Error::Dimension(format!(
                "labels have {n} rows but pseudolabels have {}",
                p.len()
            )));
        }
        if p.num_classes != d.labels.num_classes() {
            return Err(Error::Dimension(format!(
                "labels have {} classes but pseudolabels have {}",
                d.labels.num_classes(),
                p.num_classes
            )));
        }
        p.validate()?;
    }
    Ok(())
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn csv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(r)
}

/// Reads integer CSV rows, rejecting ragged rows. Returns rows and width.
fn read_int_rows<R: Read>(r: R, path: &str) -> Result<(Vec<i32>, usize, usize)> {
    let mut values = Vec::new();
    let mut width = None;
    let mut n = 0;
    for (row, rec) in csv_reader(r).records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, format!("row {}: {e}", row + 1)))?;
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(Error::format(path, format!("ragged row {}", row + 1)));
        }
        for (col, field) in rec.iter().enumerate() {
            let v: i32 = field.parse().map_err(|_| {
                Error::format(
                    path,
                    format!(
                        "row {}, column {}: cannot parse {field:?} as an integer",
                        row + 1,
                        col + 1
                    ),
                )
            })?;
            values.push(v);
        }
        n += 1;
    }
    Ok((values, n, width.unwrap_or(0)))
}

pub fn load_label_matrix(path: &Path, num_classes: usize) -> Result<LabelMatrix> {
    let p = path.display().to_string();
    let (values, n, m) = read_int_rows(open(path)?, &p)?;
    if n == 0 {
        return Err(Error::format(&p, "empty label matrix"));
    }
    if num_classes < 2 {
        return Err(Error::Parameter(format!(
            "num_classes must be >= 2, got {num_classes}"
        )));
    }
    if let Some(idx) = values
        .iter()
        .position(|&v| v != ABSTAIN && (v < 0 || v as usize >= num_classes))
    {
        return Err(Error::format(
            &p,
            format!(
                "row {}, column {}: label {} out of range [0,{}]",
                idx / m + 1,
                idx % m + 1,
                values[idx],
                num_classes - 1
            ),
        ));
    }
    LabelMatrix::new(values, n, m, num_classes)
}

pub fn write_label_matrix(path: &Path, labels: &LabelMatrix) -> Result<()> {
    let mut w = create(path)?;
    for row in labels.rows() {
        let line: Vec<String> = row.iter().map(i32::to_string).collect();
        writeln!(w, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Gold labels, one integer per line.
pub fn load_gold(path: &Path, num_classes: usize) -> Result<Vec<u32>> {
    let p = path.display().to_string();
    let reader = BufReader::new(open(path)?);
    let mut gold = Vec::new();
    for (row, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let field = line.trim();
        if field.is_empty() {
            continue;
        }
        let v: i64 = field.parse().map_err(|_| {
            Error::format(
                &p,
                format!("row {}: cannot parse {field:?} as an integer", row + 1),
            )
        })?;
        if v < 0 || v as usize >= num_classes {
            return Err(Error::format(
                &p,
                format!(
                    "row {}: gold label {v} out of range [0,{}]",
                    row + 1,
                    num_classes - 1
                ),
            ));
        }
        gold.push(v as u32);
    }
    Ok(gold)
}

pub fn write_gold(path: &Path, gold: &[u32]) -> Result<()> {
    let mut w = create(path)?;
    for g in gold {
        writeln!(w, "{g}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads embeddings, sniffing the binary magic and falling back to CSV.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let mut bytes = Vec::new();
    open(path)?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let p = path.display().to_string();
    if bytes.starts_with(&EMBEDDING_MAGIC[..6]) {
        decode_embeddings(&bytes, &p)
    } else {
        parse_embeddings_csv(&bytes, &p)
    }
}

pub fn decode_embeddings(bytes: &[u8], path: &str) -> Result<EmbeddingMatrix> {
    if bytes.len() < 16 || &bytes[..8] != EMBEDDING_MAGIC {
        return Err(Error::format(path, "bad magic: expected \"WSEMB1\\0\\0\""));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let payload = &bytes[16..];
    let expected = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| Error::format(path, "header dimensions overflow"))?;
    if payload.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "truncated payload: header says {n}x{d} ({expected} bytes), found {} bytes",
                payload.len()
            ),
        ));
    }
    if d == 0 {
        return Err(Error::format(path, "embedding dimension must be >= 1"));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(
            path,
            format!("non-finite value at ({},{})", idx / d + 1, idx % d + 1),
        ));
    }
    EmbeddingMatrix::new(values, n, d)
}

pub fn encode_embeddings(emb: &EmbeddingMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + emb.values.len() * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&(emb.n as u32).to_le_bytes());
    out.extend_from_slice(&(emb.d as u32).to_le_bytes());
    for v in &emb.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn parse_embeddings_csv(bytes: &[u8], path: &str) -> Result<EmbeddingMatrix> {
    let mut values = Vec::new();
    let mut width = None;
    let mut n = 0;
    for (row, rec) in csv_reader(bytes).records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, format!("row {}: {e}", row + 1)))?;
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(Error::format(path, format!("ragged row {}", row + 1)));
        }
        for (col, field) in rec.iter().enumerate() {
            let v: f32 = field.parse().map_err(|_| {
                Error::format(
                    path,
                    format!(
                        "row {}, column {}: cannot parse {field:?} as a float",
                        row + 1,
                        col + 1
                    ),
                )
            })?;
            if !v.is_finite() {
                return Err(Error::format(
                    path,
                    format!("non-finite value at ({},{})", row + 1, col + 1),
                ));
            }
            values.push(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::format(path, "empty embedding file"));
    }
    EmbeddingMatrix::new(values, n, width.unwrap_or(0))
}

pub fn write_embeddings(path: &Path, emb: &EmbeddingMatrix) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(&encode_embeddings(emb))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}
