//! Tokenization, vocabularies and train/valid/test splits.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LmError, Result};

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizeMode {
    Char,
    Whitespace,
}

impl TokenizeMode {
    fn split<'a>(self, text: &'a str) -> Vec<&'a str> {
        match self {
            TokenizeMode::Char => text.char_indices().map(|(i, c)| &text[i..i + c.len_utf8()]).collect(),
            TokenizeMode::Whitespace => text.split_whitespace().collect(),
        }
    }
}

/// Ordered symbol table: sorted training symbols, then `<unk>`, then `<bos>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    symbols: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(symbols: Vec<String>) -> Self {
        Vocab::from_symbols(symbols)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.symbols
    }
}

impl Vocab {
    pub fn from_symbols(symbols: Vec<String>) -> Self {
        let lookup = symbols.iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect();
        Vocab { symbols, lookup }
    }

    fn build<'a>(train: impl IntoIterator<Item = &'a str>) -> Self {
        let distinct: BTreeSet<&str> = train.into_iter().collect();
        let mut symbols: Vec<String> = distinct.into_iter().map(str::to_string).collect();
        symbols.push(UNK.to_string());
        symbols.push(BOS.to_string());
        Vocab::from_symbols(symbols)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn unk_id(&self) -> u32 {
        (self.symbols.len() - 2) as u32
    }

    pub fn bos_id(&self) -> u32 {
        (self.symbols.len() - 1) as u32
    }

    pub fn id(&self, symbol: &str) -> u32 {
        self.lookup.get(symbol).copied().unwrap_or_else(|| self.unk_id())
    }
}

/// How to cut raw text into train/valid/test.
#[derive(Debug, Clone, PartialEq)]
pub enum SplitSpec {
    /// Trailing fractions of the text for valid and test.
    Fractions { valid: f64, test: f64 },
    /// Byte offsets `[train_end, valid_end, test_end]`.
    Offsets([usize; 3]),
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Fractions { valid: 0.1, test: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedCorpus {
    pub ids: Vec<u32>,
    pub vocab: Vocab,
    pub mode: TokenizeMode,
    pub train: Range<usize>,
    pub valid: Range<usize>,
    pub test: Range<usize>,
}

impl TokenizedCorpus {
    pub fn split(&self, split: Split) -> &[u32] {
        let r = match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        };
        &self.ids[r.clone()]
    }
}

fn floor_boundary(text: &str, mut pos: usize) -> usize {
    pos = pos.min(text.len());
    while !text.is_char_boundary(pos) {
        pos -= 1;
    }
    pos
}

fn byte_offsets(text: &str, spec: &SplitSpec) -> Result<[usize; 3]> {
    let offsets = match *spec {
        SplitSpec::Offsets(o) => o,
        SplitSpec::Fractions { valid, test } => {
            if !(0.0..1.0).contains(&valid) || !(0.0..1.0).contains(&test) || valid + test >= 1.0 {
                return invalid(format!("split fractions valid={valid} test={test} leave no training text"));
            }
            let n = text.len() as f64;
            let train_end = floor_boundary(text, (n * (1.0 - valid - test)) as usize);
            let valid_end = floor_boundary(text, (n * (1.0 - test)) as usize);
            [train_end, valid_end, text.len()]
        }
    };
    let [a, b, c] = offsets;
    if !(a <= b && b <= c && c <= text.len()) {
        return invalid(format!("split offsets {offsets:?} are not ordered within {} bytes", text.len()));
    }
    if offsets.iter().any(|&o| !text.is_char_boundary(o)) {
        return invalid(format!("split offsets {offsets:?} cut through a UTF-8 character"));
    }
    if a == 0 {
        return invalid("training split is empty");
    }
    Ok(offsets)
}

/// Tokenizes `text`; the vocabulary comes from the training split only and
/// every split starts with `<bos>`.
pub fn tokenize_corpus(text: &str, mode: TokenizeMode, split: &SplitSpec) -> Result<TokenizedCorpus> {
    if text.is_empty() {
        return invalid("corpus text is empty");
    }
    let [a, b, c] = byte_offsets(text, split)?;
    let parts = [&text[..a], &text[a..b], &text[b..c]];
    let vocab = Vocab::build(mode.split(parts[0]));
    if vocab.len() == 2 {
        return invalid("training split contains no tokens");
    }
    let mut ids = Vec::with_capacity(text.len() + 3);
    let mut ranges = Vec::with_capacity(3);
    for part in parts {
        let start = ids.len();
        ids.push(vocab.bos_id());
        ids.extend(mode.split(part).into_iter().map(|s| vocab.id(s)));
        ranges.push(start..ids.len());
    }
    let test = ranges.pop().expect("three splits");
    let valid = ranges.pop().expect("three splits");
    let train = ranges.pop().expect("three splits");
    Ok(TokenizedCorpus {
        ids,
        vocab,
        mode,
        train,
        valid,
        test,
    })
}

/// Reads a corpus file, or every file of a directory in name order joined by newlines.
pub fn read_corpus_text(path: &Path) -> Result<String> {
    let io = |e| LmError::Io {
        path: path.display().to_string(),
        source: e,
    };
    if path.is_dir() {
        let mut files: Vec<_> = fs::read_dir(path)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "txt"))
            .collect();
        files.sort();
        let mut docs = Vec::with_capacity(files.len());
        for f in files {
            docs.push(fs::read_to_string(&f).map_err(|e| LmError::Io {
                path: f.display().to_string(),
                source: e,
            })?);
        }
        Ok(docs.join("\n"))
    } else {
        fs::read_to_string(path).map_err(io)
    }
}

/// Parses a split manifest: three lines of byte offsets.
pub fn parse_manifest(text: &str) -> Result<SplitSpec> {
    let values: Vec<usize> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| l.parse::<usize>().map_err(|e| LmError::InvalidArgument(format!("manifest line {l:?}: {e}"))))
        .collect::<Result<_>>()?;
    match values.as_slice() {
        &[a, b, c] => Ok(SplitSpec::Offsets([a, b, c])),
        _ => invalid(format!("manifest needs exactly three offsets, found {}", values.len())),
    }
}

pub fn format_manifest(offsets: [usize; 3]) -> String {
    format!("{}\n{}\n{}\n", offsets[0], offsets[1], offsets[2])
}

/// Random windows of `context + 1` tokens.
pub fn sample_batch(rng: &mut impl Rng, tokens: &[u32], batch: usize, context: usize) -> Result<Vec<Vec<u32>>> {
    if tokens.len() < context + 1 {
        return invalid(format!("split has {} tokens, need at least {}", tokens.len(), context + 1));
    }
    Ok((0..batch)
        .map(|_| {
            let start = rng.gen_range(0..=tokens.len() - context - 1);
            tokens[start..start + context + 1].to_vec()
        })
        .collect())
}
