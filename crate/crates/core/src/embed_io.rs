//! fastText `.vec` text files and embedding-matrix construction.

use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Vocab, PAD, UNK};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Word vectors in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Pretrained {
    pub dim: usize,
    pub vectors: IndexMap<String, Vec<f64>>,
}

impl Pretrained {
    pub fn new(dim: usize) -> Self {
        Pretrained {
            dim,
            vectors: IndexMap::new(),
        }
    }

    pub fn from_pairs(dim: usize, pairs: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self> {
        let mut p = Pretrained::new(dim);
        for (w, v) in pairs {
            if v.len() != dim {
                return Err(Error::Contract(format!("vector for `{w}` has {} components, expected {dim}", v.len())));
            }
            p.vectors.insert(w, v);
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Elementwise mean of every vector, summed in file order.
    pub fn mean(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for v in self.vectors.values() {
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x;
            }
        }
        let n = self.vectors.len().max(1) as f64;
        acc.iter().map(|a| a / n).collect()
    }
}

pub fn load_vec(path: impl AsRef<Path>) -> Result<Pretrained> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_vec(&text, &path.display().to_string())
}

pub fn parse_vec(text: &str, source: &str) -> Result<Pretrained> {
    let fail = |line: usize, msg: String| Error::Format {
        path: source.to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().map(|l| l.trim_end_matches([' ', '\r', '\t'])).enumerate();
    let header = lines.next().map(|(_, l)| l).unwrap_or("");
    let header: Vec<&str> = header.split_ascii_whitespace().collect();
    let (n, dim) = match header.as_slice() {
        [n, d] => match (n.parse::<usize>(), d.parse::<usize>()) {
            (Ok(n), Ok(d)) if d > 0 => (n, d),
            _ => return Err(fail(1, format!("bad header `{}`", header.join(" ")))),
        },
        _ => return Err(fail(1, "header must be `N D`".into())),
    };
    let mut out = Pretrained::new(dim);
    let mut rows = 0;
    for (i, line) in lines {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        let word = parts.next().unwrap_or_default();
        let values = parts
            .map(|p| match p.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(fail(lineno, format!("bad component `{p}`"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        if word.is_empty() || values.len() != dim {
            return Err(fail(lineno, format!("expected a word and {dim} components, found {}", values.len())));
        }
        rows += 1;
        if out.vectors.insert(word.to_string(), values).is_some() {
            log::warn!("{source}:{lineno}: duplicate word `{word}`, keeping the later vector");
        }
    }
    if rows != n {
        return Err(fail(1, format!("header announces {n} rows, file has {rows}")));
    }
    Ok(out)
}

/// Text layout; components use the shortest representation that parses
/// back to the same double.
pub fn format_vec(p: &Pretrained) -> String {
    let mut out = format!("{} {}\n", p.len(), p.dim);
    for (w, v) in &p.vectors {
        out.push_str(w);
        for x in v {
            let _ = write!(out, " {x}");
        }
        out.push('\n');
    }
    out
}

pub fn save_vec(p: &Pretrained, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_vec(p)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    /// [|V|, D]
    pub values: Tensor<f64>,
    pub dim: usize,
    /// Share of real vocabulary words (PAD/UNK excluded) found pretrained.
    pub coverage: f64,
}

pub const OOV_NOISE: f64 = 0.01;

/// Rows for every vocabulary index. Pretrained words are copied; other
/// words and UNK start at the mean vector plus small noise. Without
/// vectors, every row but PAD is uniform in ±1/√D.
pub fn build_matrix(vocab: &Vocab, pretrained: Option<&Pretrained>, dim: usize, seed: u64) -> Result<EmbeddingMatrix> {
    if dim == 0 {
        return Err(Error::Config("embedding dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = vocab.len();
    let mut data = vec![0.0; size * dim];
    let words = size - 2;
    let pretrained = pretrained.filter(|p| !p.is_empty() || p.dim != dim);
    let coverage = match pretrained {
        Some(p) => {
            if p.dim != dim {
                return Err(Error::Config(format!("pretrained vectors have D={}, configuration asks for D={dim}", p.dim)));
            }
            let mean = p.mean();
            let mut found = 0;
            for id in 0..size {
                if id == PAD {
                    continue;
                }
                let row = &mut data[id * dim..(id + 1) * dim];
                let hit = if id == UNK { None } else { p.vectors.get(vocab.token(id).unwrap()) };
                match hit {
                    Some(v) => {
                        found += 1;
                        row.copy_from_slice(v);
                    }
                    None => {
                        for (r, m) in row.iter_mut().zip(&mean) {
                            *r = m + rng.random_range(-OOV_NOISE..=OOV_NOISE);
                        }
                    }
                }
            }
            if words == 0 {
                0.0
            } else {
                found as f64 / words as f64
            }
        }
        None => {
            let bound = 1.0 / (dim as f64).sqrt();
            for x in data[dim..].iter_mut() {
                *x = rng.random_range(-bound..=bound);
            }
            0.0
        }
    };
    Ok(EmbeddingMatrix {
        values: Tensor::new([size, dim], data)?,
        dim,
        coverage,
    })
}
