//! Embedding tables, pooled lookups and the `EMBT` binary table format.
//!
//! Layout (all integers little endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `EMBT` |
//! | 4 | version, always 1 |
//! | 4 | vocab_size |
//! | 4 | dim |
//! | 1 | frozen flag |
//! | 4·vocab_size·dim | f32 weights, row major |

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::sequences::{PaddedBatch, Vocabulary};
use crate::tensor::Tensor;

pub const EMBT_MAGIC: &[u8; 4] = b"EMBT";
pub const EMBT_VERSION: u32 = 1;
const HEADER_LEN: usize = 17;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub name: String,
    weights: Tensor,
    trainable: bool,
}

impl EmbeddingTable {
    /// Trainable table initialized i.i.d. normal(0, 1/√dim).
    pub fn trainable(
        name: impl Into<String>,
        vocab_size: usize,
        dim: usize,
        rng: &mut Stream,
    ) -> Self {
        Self {
            name: name.into(),
            weights: Tensor::randn(&[vocab_size, dim], 1.0 / (dim as f64).sqrt(), rng),
            trainable: true,
        }
    }

    pub fn frozen(name: impl Into<String>, weights: Tensor) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(Error::shape("embedding table", weights.shape(), &[0, 0]));
        }
        Ok(Self {
            name: name.into(),
            weights,
            trainable: false,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    /// Mutable weights of a trainable table; frozen tables refuse.
    pub fn weights_mut(&mut self) -> Result<&mut Tensor> {
        if self.trainable {
            Ok(&mut self.weights)
        } else {
            Err(Error::InvalidArgument(format!(
                "table `{}` is frozen",
                self.name
            )))
        }
    }

    pub fn row(&self, index: usize) -> &[f64] {
        self.weights.row(index)
    }

    /// CRC-32 of the weight bytes.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for x in self.weights.data() {
            h.update(&x.to_le_bytes());
        }
        h.finalize()
    }

    /// The first `rows` rows (a top-K' vocabulary prefix of the same table).
    pub fn truncated(&self, rows: usize) -> Result<Self> {
        if rows > self.vocab_size() {
            return Err(Error::InvalidArgument(format!(
                "cannot keep {rows} rows of a {}-row table",
                self.vocab_size()
            )));
        }
        let d = self.dim();
        let data = self.weights.data()[..rows * d].to_vec();
        Ok(Self {
            name: self.name.clone(),
            weights: Tensor::new(&[rows, d], data)?,
            trainable: self.trainable,
        })
    }

    fn check_indices(&self, batch: &PaddedBatch) -> Result<()> {
        match batch.indices().iter().find(|&&i| i >= self.vocab_size()) {
            Some(&index) => Err(Error::IndexOutOfRange {
                table: self.name.clone(),
                index,
                rows: self.vocab_size(),
            }),
            None => Ok(()),
        }
    }
}

/// Row gather of every position (padding included) into
/// `[batch, width, dim]`.
pub fn lookup(table: &EmbeddingTable, batch: &PaddedBatch) -> Result<Tensor> {
    table.check_indices(batch)?;
    let d = table.dim();
    let mut out = Vec::with_capacity(batch.indices().len() * d);
    for &i in batch.indices() {
        out.extend_from_slice(table.row(i));
    }
    Tensor::new(&[batch.batch_size(), batch.width(), d], out)
}

/// Graph version of [`lookup`] against a table already on the tape.
pub fn lookup_var(g: &mut Graph, table: Var, batch: &PaddedBatch) -> Result<Var> {
    g.gather(table, batch.indices(), &[batch.batch_size(), batch.width()])
}

/// Masked mean of looked-up rows, `[batch, dim]`; rows with nothing
/// unmasked pool to zeros.
pub fn avg_pool_sequence(table: &EmbeddingTable, batch: &PaddedBatch) -> Result<Tensor> {
    table.check_indices(batch)?;
    let d = table.dim();
    let w = batch.width();
    let mut out = Tensor::zeros(&[batch.batch_size(), d]);
    for b in 0..batch.batch_size() {
        let n = batch.lengths()[b];
        if n == 0 {
            continue;
        }
        let acc = out.row_mut(b);
        for j in 0..w {
            if !batch.mask()[b * w + j] {
                continue;
            }
            for (a, x) in acc.iter_mut().zip(table.row(batch.indices()[b * w + j])) {
                *a += x;
            }
        }
        acc.iter_mut().for_each(|a| *a /= n as f64);
    }
    Ok(out)
}

/// Kinds of pretrained listing representation, in the order they are
/// concatenated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Flavor {
    Air,
    Visual,
    Skipgram,
}

impl Flavor {
    pub const ALL: [Flavor; 3] = [Flavor::Air, Flavor::Visual, Flavor::Skipgram];

    pub fn dim(self) -> usize {
        match self {
            Flavor::Air | Flavor::Visual => 256,
            Flavor::Skipgram => 64,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Flavor::Air => "air",
            Flavor::Visual => "visual",
            Flavor::Skipgram => "skipgram",
        }
    }
}

impl fmt::Display for Flavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Flavor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Flavor::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown pretrained flavor `{s}`")))
    }
}

/// Frozen listing tables keyed by flavor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainedBundle {
    tables: BTreeMap<Flavor, EmbeddingTable>,
}

impl PretrainedBundle {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a table after checking its width against the flavor and
    /// freezing it.
    pub fn insert(&mut self, flavor: Flavor, mut table: EmbeddingTable) -> Result<()> {
        if table.dim() != flavor.dim() {
            return Err(Error::Config(format!(
                "{flavor} table has dim {}, expected {}",
                table.dim(),
                flavor.dim()
            )));
        }
        table.trainable = false;
        self.tables.insert(flavor, table);
        Ok(())
    }

    pub fn get(&self, flavor: Flavor) -> Option<&EmbeddingTable> {
        self.tables.get(&flavor)
    }

    pub fn require(&self, flavor: Flavor) -> Result<&EmbeddingTable> {
        self.get(flavor)
            .ok_or_else(|| Error::Config(format!("no pretrained table for flavor `{flavor}`")))
    }

    pub fn flavors(&self) -> impl Iterator<Item = Flavor> + '_ {
        self.tables.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Flavor, &EmbeddingTable)> {
        self.tables.iter().map(|(f, t)| (*f, t))
    }

    /// Every table cut to its first `rows` rows.
    pub fn truncated(&self, rows: usize) -> Result<Self> {
        let mut out = Self::new();
        for (f, t) in self.iter() {
            out.insert(f, t.truncated(rows)?)?;
        }
        Ok(out)
    }
}

pub fn encode_table(table: &EmbeddingTable) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * table.weights.len());
    buf.extend_from_slice(EMBT_MAGIC);
    buf.extend_from_slice(&EMBT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(table.vocab_size() as u32).to_le_bytes());
    buf.extend_from_slice(&(table.dim() as u32).to_le_bytes());
    buf.push(u8::from(!table.trainable));
    for x in table.weights.data() {
        buf.extend_from_slice(&(*x as f32).to_le_bytes());
    }
    buf
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| format_err(bytes.len(), "truncated header"))
}

/// Parses an `EMBT` image. The result is always frozen.
pub fn decode_table(name: impl Into<String>, bytes: &[u8]) -> Result<EmbeddingTable> {
    if bytes.len() < 4 || &bytes[..4] != EMBT_MAGIC {
        return Err(format_err(0, "bad magic, expected EMBT"));
    }
    let version = read_u32(bytes, 4)?;
    if version != EMBT_VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let rows = read_u32(bytes, 8)? as usize;
    let dim = read_u32(bytes, 12)? as usize;
    match bytes.get(16) {
        None => return Err(format_err(bytes.len(), "truncated header")),
        Some(0 | 1) => {}
        Some(f) => return Err(format_err(16, format!("bad frozen flag {f}"))),
    }
    let expected = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| format_err(8, "table size overflows"))?;
    if bytes.len() < expected {
        return Err(format_err(
            bytes.len(),
            format!("truncated weights, expected {expected} bytes"),
        ));
    }
    if bytes.len() > expected {
        return Err(format_err(expected, "trailing bytes after weights"));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    EmbeddingTable::frozen(name, Tensor::new(&[rows, dim], data)?)
}

pub fn save_table(table: &EmbeddingTable, path: &Path) -> Result<()> {
    fs::write(path, encode_table(table)).map_err(|e| Error::io(path, e))
}

pub fn load_table(path: &Path) -> Result<EmbeddingTable> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_table(name, &bytes)
}

/// Loads a table and checks that its width matches `flavor`.
pub fn load_flavor(path: &Path, flavor: Flavor) -> Result<EmbeddingTable> {
    let t = load_table(path)?;
    if t.dim() != flavor.dim() {
        return Err(Error::Config(format!(
            "{} holds dim {} but {flavor} tables are {}-dimensional",
            path.display(),
            t.dim(),
            flavor.dim()
        )));
    }
    Ok(t)
}

/// Text rendering `id<TAB>v1 v2 ...` of the first `rows` rows. Ids come
/// from `vocab` when given, otherwise row numbers are printed.
pub fn dump_table(table: &EmbeddingTable, vocab: Option<&Vocabulary>, rows: usize) -> String {
    let mut s = String::new();
    for r in 0..rows.min(table.vocab_size()) {
        let id = match vocab {
            Some(v) if r < v.num_oov() => format!("<oov{r}>"),
            Some(v) => v.id_at(r).unwrap_or("?").to_string(),
            None => r.to_string(),
        };
        s.push_str(&id);
        s.push('\t');
        let vals: Vec<String> = table.row(r).iter().map(|x| format!("{x:.6}")).collect();
        s.push_str(&vals.join(" "));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[Vec<f64>]) -> EmbeddingTable {
        EmbeddingTable::frozen("t", Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn identity_lookup_is_one_hot() {
        let t = EmbeddingTable::frozen("eye", Tensor::identity(3)).unwrap();
        let b = PaddedBatch::from_indices(&[vec![2]], 1);
        assert_eq!(lookup(&t, &b).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn average_pool_examples() {
        let t = table(&[vec![0.0, 0.0], vec![1.0, 3.0], vec![3.0, 5.0]]);
        let b = PaddedBatch::from_indices(&[vec![1, 2], vec![2], vec![]], 3);
        let p = avg_pool_sequence(&t, &b).unwrap();
        assert_eq!(p.row(0), &[2.0, 4.0]);
        assert_eq!(p.row(1), t.row(2));
        assert_eq!(p.row(2), &[0.0, 0.0]);
    }

    #[test]
    fn out_of_range_index_is_an_error() {
        let t = table(&[vec![1.0]]);
        let b = PaddedBatch::from_indices(&[vec![4]], 1);
        assert!(matches!(
            lookup(&t, &b),
            Err(Error::IndexOutOfRange { index: 4, .. })
        ));
    }

    #[test]
    fn lookup_gradient_counts_occurrences() {
        let mut g = Graph::new();
        let w = g.variable(Tensor::zeros(&[4, 2]));
        let b = PaddedBatch::from_indices(&[vec![1, 1, 3], vec![1]], 3);
        let x = lookup_var(&mut g, w, &b).unwrap();
        let s = g.sum(x);
        g.backward(s).unwrap();
        // Padding positions gather row 0 as well: 2 pads.
        assert_eq!(
            g.grad(w).unwrap(),
            &[2.0, 2.0, 3.0, 3.0, 0.0, 0.0, 1.0, 1.0]
        );
    }

    #[test]
    fn file_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("air.embt");
        let mut rng = Stream::new(1);
        let mut t = EmbeddingTable::trainable("air", 5, 3, &mut rng);
        for x in t.weights_mut().unwrap().data_mut() {
            *x = *x as f32 as f64;
        }
        save_table(&t, &p).unwrap();
        let back = load_table(&p).unwrap();
        assert!(!back.is_trainable());
        assert_eq!(back.weights(), t.weights());
        assert_eq!(
            encode_table(&back)[HEADER_LEN..],
            encode_table(&t)[HEADER_LEN..]
        );
    }

    #[test]
    fn truncated_file_reports_offset() {
        let t = table(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let bytes = encode_table(&t);
        match decode_table("t", &bytes[..bytes.len() - 3]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, bytes.len() - 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            decode_table("t", b"NOPE"),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(matches!(
            decode_table("t", &wrong_version),
            Err(Error::Format { offset: 4, .. })
        ));
    }

    #[test]
    fn bundle_checks_flavor_width() {
        let mut b = PretrainedBundle::new();
        let t = EmbeddingTable::frozen("s", Tensor::zeros(&[3, 64])).unwrap();
        assert!(b.insert(Flavor::Air, t.clone()).is_err());
        b.insert(Flavor::Skipgram, t).unwrap();
        assert!(b.require(Flavor::Visual).is_err());
    }
}
