use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::vocab::{is_reserved, Vocab, RESERVED};
use crate::autodiff::{cosine, l2_norm, Tensor, COSINE_EPS};
use crate::error::{Error, Result};

/// Pre-trained `V × D` embedding matrix. Row `v` is the vector of token `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    matrix: Tensor,
    frozen: bool,
}

/// Deterministic unit vectors for the reserved tokens, drawn from seed 0.
pub fn reserved_rows(dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    (0..RESERVED.len())
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = l2_norm(&v);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

impl EmbeddingTable {
    /// Wraps a `V × D` matrix, rejecting rows with norm ≤ 1e-12.
    pub fn new(matrix: Tensor, frozen: bool) -> Result<Self> {
        if matrix.rank() != 2 || matrix.cols() < 1 {
            return Err(Error::Shape(format!("embedding matrix must be V×D, got {:?}", matrix.shape())));
        }
        for r in 0..matrix.rows() {
            let n = l2_norm(matrix.row(r));
            if !(n > COSINE_EPS) {
                return Err(Error::Degenerate(format!("embedding row {r} has norm {n:e}")));
            }
        }
        Ok(Self { matrix, frozen })
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn row(&self, id: usize) -> Result<&[f64]> {
        if id >= self.vocab_size() {
            return Err(Error::Lookup(format!("token id {id} outside table of {}", self.vocab_size())));
        }
        Ok(self.matrix.row(id))
    }

    /// Same values, frozen.
    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// Mutable access for unfrozen tables only.
    pub fn matrix_mut(&mut self) -> Result<&mut Tensor> {
        if self.frozen {
            return Err(Error::Contract("embedding table is frozen".into()));
        }
        Ok(&mut self.matrix)
    }

    /// Hex SHA-256 over the shape and exact bits of every value.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.vocab_size() as u64).to_le_bytes());
        h.update((self.dim() as u64).to_le_bytes());
        for v in self.matrix.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// The `k` most cosine-similar tokens to `id`, excluding `id` itself,
/// sorted by descending cosine and then ascending id.
pub fn nearest_neighbors(table: &EmbeddingTable, id: usize, k: usize) -> Result<Vec<(usize, f64)>> {
    let query = table.row(id)?;
    if k >= table.vocab_size() {
        return Err(Error::Contract(format!("k = {k} must be below V = {}", table.vocab_size())));
    }
    let mut scored = Vec::with_capacity(table.vocab_size() - 1);
    for other in (0..table.vocab_size()).filter(|&o| o != id) {
        scored.push((other, cosine(query, table.matrix.row(other))?));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

/// Reads the text format: a `V D` header followed by `token v1 … vD` rows.
///
/// File rows are appended after the reserved tokens in file order. A
/// reserved token appearing in the file supplies its own row; otherwise it
/// gets the deterministic vector from [`reserved_rows`].
pub fn read_embeddings<R: BufRead>(reader: R) -> Result<(Vocab, EmbeddingTable)> {
    let mut lines = reader.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let header = header?;
    let mut fields = header.split_whitespace();
    let mut next_int = |what: &str| -> Result<usize> {
        fields
            .next()
            .ok_or_else(|| parse_err(1, format!("header missing {what}")))?
            .parse::<usize>()
            .map_err(|e| parse_err(1, format!("bad {what} in header: {e}")))
    };
    let rows = next_int("row count")?;
    let dim = next_int("dimension")?;
    if dim < 1 {
        return Err(parse_err(1, "dimension must be positive"));
    }

    let mut reserved: Vec<Option<Vec<f64>>> = vec![None; RESERVED.len()];
    let mut words = Vec::with_capacity(rows);
    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(rows);
    let mut seen = 0;
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        seen += 1;
        if seen > rows {
            return Err(parse_err(lineno, format!("more rows than the {rows} declared")));
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().expect("non-empty line").to_string();
        let values = parts
            .map(|p| p.parse::<f64>().map_err(|e| parse_err(lineno, format!("bad value {p:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != dim {
            return Err(parse_err(lineno, format!("expected {dim} values, found {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(lineno, "non-finite value"));
        }
        if let Some(r) = RESERVED.iter().position(|&t| t == token) {
            if reserved[r].replace(values).is_some() {
                return Err(parse_err(lineno, format!("duplicate token {token:?}")));
            }
            continue;
        }
        if words.contains(&token) {
            return Err(parse_err(lineno, format!("duplicate token {token:?}")));
        }
        words.push(token);
        vectors.push(values);
    }
    if seen != rows {
        return Err(parse_err(seen + 1, format!("header declares {rows} rows, found {seen}")));
    }

    let defaults = reserved_rows(dim);
    let mut data = Vec::with_capacity((RESERVED.len() + vectors.len()) * dim);
    for (given, default) in reserved.into_iter().zip(defaults) {
        data.extend(given.unwrap_or(default));
    }
    for v in &vectors {
        data.extend_from_slice(v);
    }
    let vocab = Vocab::from_tokens(words)?;
    let matrix = Tensor::matrix(vocab.len(), dim, data)?;
    let table = EmbeddingTable::new(matrix, true).map_err(|e| match e {
        Error::Degenerate(m) => Error::Data(format!("zero embedding vector: {m}")),
        other => other,
    })?;
    Ok((vocab, table))
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<(Vocab, EmbeddingTable)> {
    read_embeddings(BufReader::new(File::open(path)?))
}

/// Writes the text format with 17 significant digits per value. Reserved
/// rows are written only when they differ from their deterministic default.
pub fn write_embeddings<W: Write>(vocab: &Vocab, table: &EmbeddingTable, mut w: W) -> Result<()> {
    if vocab.len() != table.vocab_size() {
        return Err(Error::Shape(format!(
            "vocab has {} tokens, table has {} rows",
            vocab.len(),
            table.vocab_size()
        )));
    }
    if !table.matrix.is_finite() {
        return Err(Error::Numeric("embedding table has non-finite values".into()));
    }
    let defaults = reserved_rows(table.dim());
    let rows: Vec<usize> = (0..vocab.len())
        .filter(|&id| !is_reserved(id) || table.matrix.row(id) != defaults[id].as_slice())
        .collect();
    writeln!(w, "{} {}", rows.len(), table.dim())?;
    for id in rows {
        w.write_all(vocab.token(id).expect("id < len").as_bytes())?;
        for v in table.matrix.row(id) {
            write!(w, " {v:.16e}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_embeddings(vocab: &Vocab, table: &EmbeddingTable, path: impl AsRef<Path>) -> Result<()> {
    write_embeddings(vocab, table, BufWriter::new(File::create(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(s: &str) -> Result<(Vocab, EmbeddingTable)> {
        read_embeddings(s.as_bytes())
    }

    #[test]
    fn reads_small_file() {
        let (v, t) = read("2 3\na 1 0 0\nb 0 1 0").unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(t.dim(), 3);
        assert_eq!(t.row(v.id("a").unwrap()).unwrap(), &[1.0, 0.0, 0.0]);
        assert!(t.is_frozen());
        let n = l2_norm(t.row(0).unwrap());
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn short_row_reports_line() {
        match read("1 3\na 1 0") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_token_rejected() {
        assert!(matches!(read("2 2\na 1 0\na 0 1"), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn row_count_must_match_header() {
        assert!(matches!(read("3 2\na 1 0\nb 0 1"), Err(Error::Parse { .. })));
        assert!(matches!(read("1 2\na 1 0\nb 0 1"), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn one_token_table_is_two_lines() {
        let (v, t) = read("1 2\nz 0.5 0.25").unwrap();
        let mut out = Vec::new();
        write_embeddings(&v, &t, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("1 2\nz "));
    }

    #[test]
    fn reserved_row_in_file_overrides_default() {
        let (v, t) = read("2 2\n</s> 0 2\na 1 0").unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(t.row(2).unwrap(), &[0.0, 2.0]);
        let mut out = Vec::new();
        write_embeddings(&v, &t, &mut out).unwrap();
        let (v2, t2) = read_embeddings(out.as_slice()).unwrap();
        assert_eq!(v, v2);
        assert_eq!(t, t2);
    }

    #[test]
    fn frozen_table_refuses_mutation() {
        let (_, mut t) = read("1 2\na 1 1").unwrap();
        assert!(t.matrix_mut().is_err());
    }

    #[test]
    fn neighbors_of_duplicate_and_orthonormal() {
        let (v, t) = read("3 3\na 1 0 0\nb 1 0 0\nc 0 0 1").unwrap();
        let nn = nearest_neighbors(&t, v.id("a").unwrap(), 1).unwrap();
        assert_eq!(nn, vec![(v.id("b").unwrap(), 1.0)]);

        let eye = Tensor::matrix(4, 4, (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
        let t = EmbeddingTable::new(eye, true).unwrap();
        let nn = nearest_neighbors(&t, 2, 3).unwrap();
        assert_eq!(nn, vec![(0, 0.0), (1, 0.0), (3, 0.0)]);
        assert!(matches!(nearest_neighbors(&t, 9, 1), Err(Error::Lookup(_))));
    }
}
