use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::tokenize::{tokenize_with, TokenizerOptions};
use crate::error::{Error, Result};

pub const LITERAL: u8 = 0;
pub const METAPHOR: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<String>,
    pub label: u8,
}

/// Tokenized, labelled sentences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledCorpus {
    pub examples: Vec<Example>,
    pub source: PathBuf,
}

fn parse_label(raw: &str) -> Option<u8> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "0" | "literal" => Some(LITERAL),
        "1" | "metaphor" => Some(METAPHOR),
        _ => None,
    }
}

impl LabeledCorpus {
    /// Reads a `label<TAB>sentence` file.
    pub fn load(path: impl AsRef<Path>, opts: TokenizerOptions) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path, opts)
    }

    pub fn parse(text: &str, source: impl Into<PathBuf>, opts: TokenizerOptions) -> Result<Self> {
        let source = source.into();
        let shown = source.display().to_string();
        let fail = |line: usize, msg: String| Error::Format {
            path: shown.clone(),
            line,
            msg,
        };
        let mut examples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            let line = line.strip_prefix('\u{feff}').unwrap_or(line);
            if line.trim().is_empty() {
                continue;
            }
            let (label, sentence) = line
                .split_once('\t')
                .ok_or_else(|| fail(n, "expected `label<TAB>sentence`".into()))?;
            let label = parse_label(label).ok_or_else(|| fail(n, format!("unknown label `{}`", label.trim())))?;
            let tokens = tokenize_with(sentence, opts);
            if tokens.is_empty() {
                return Err(fail(n, "sentence has no tokens".into()));
            }
            examples.push(Example { tokens, label });
        }
        if examples.is_empty() {
            return Err(Error::Data(format!("{shown}: corpus has no examples")));
        }
        Ok(LabeledCorpus { examples, source })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.examples.iter().map(|e| e.label).collect()
    }

    /// (literal, metaphor) counts.
    pub fn class_counts(&self) -> (usize, usize) {
        let m = self.examples.iter().filter(|e| e.label == METAPHOR).count();
        (self.examples.len() - m, m)
    }

    pub fn max_tokens(&self) -> usize {
        self.examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0)
    }

    pub fn sentences(&self) -> impl Iterator<Item = &[String]> {
        self.examples.iter().map(|e| e.tokens.as_slice())
    }

    /// Serializes back to the TSV layout with 0/1 labels.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.examples {
            let _ = writeln!(out, "{}\t{}", e.label, e.tokens.join(" "));
        }
        out
    }
}
