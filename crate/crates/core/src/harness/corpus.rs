//! Byte-level corpora.
//!
//! Every byte is a token, so the vocabulary is 256. Files are concatenated in
//! the order given with a single `0` byte between consecutive files.
//!
//! `corpus.bin` layout, little-endian:
//!
//! ```text
//! magic   b"DFLCORP\0"
//! u64     number of documents
//! u64 × n start offset of each document
//! u64     number of tokens
//! u8 × t  tokens
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Zipf};

use crate::error::{Error, Result};
use crate::rng::RngState;

pub const SEPARATOR: u8 = 0;
pub const VOCAB_SIZE: usize = 256;
const MAGIC: &[u8; 8] = b"DFLCORP\0";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    tokens: Vec<u8>,
    doc_starts: Vec<u64>,
}

impl Corpus {
    pub fn from_documents<D: AsRef<[u8]>>(docs: &[D]) -> Result<Corpus> {
        let mut tokens = Vec::new();
        let mut doc_starts = Vec::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            if i > 0 {
                tokens.push(SEPARATOR);
            }
            doc_starts.push(tokens.len() as u64);
            tokens.extend_from_slice(d.as_ref());
        }
        if docs.iter().all(|d| d.as_ref().is_empty()) {
            return Err(Error::Validation("corpus is empty".into()));
        }
        Ok(Corpus { tokens, doc_starts })
    }

    pub fn tokens(&self) -> &[u8] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_documents(&self) -> usize {
        self.doc_starts.len()
    }

    pub fn doc_starts(&self) -> &[u64] {
        &self.doc_starts
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.doc_starts.len() as u64).to_le_bytes())?;
        for s in &self.doc_starts {
            w.write_all(&s.to_le_bytes())?;
        }
        w.write_all(&(self.tokens.len() as u64).to_le_bytes())?;
        w.write_all(&self.tokens)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Corpus> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Validation("not a corpus file".into()));
        }
        let mut word = [0u8; 8];
        let mut next = |r: &mut dyn Read| -> Result<u64> {
            r.read_exact(&mut word)?;
            Ok(u64::from_le_bytes(word))
        };
        let n_docs = next(&mut r)?;
        let mut doc_starts = Vec::new();
        for _ in 0..n_docs {
            doc_starts.push(next(&mut r)?);
        }
        let n = next(&mut r)?;
        let mut tokens = Vec::new();
        r.take(n).read_to_end(&mut tokens)?;
        if tokens.len() as u64 != n || tokens.is_empty() {
            return Err(Error::Validation("truncated corpus file".into()));
        }
        if doc_starts.windows(2).any(|w| w[0] > w[1]) || doc_starts.iter().any(|&s| s > n) {
            return Err(Error::Validation("corrupt document table".into()));
        }
        Ok(Corpus { tokens, doc_starts })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Corpus> {
        Corpus::read_from(std::io::BufReader::new(fs::File::open(path)?))
    }
}

/// Reads text files into a corpus. A directory contributes its regular files
/// in name order, recursively.
pub fn ingest<P: AsRef<Path>>(paths: &[P]) -> Result<Corpus> {
    let mut files = Vec::new();
    for p in paths {
        collect_files(p.as_ref(), &mut files)?;
    }
    let docs = files
        .iter()
        .map(|f| fs::read(f).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", f.display())))))
        .collect::<Result<Vec<_>>>()?;
    if docs.is_empty() {
        return Err(Error::Validation("no input files".into()));
    }
    Corpus::from_documents(&docs)
}

fn collect_files(p: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let meta = fs::metadata(p).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display()))))?;
    if meta.is_dir() {
        let mut entries = fs::read_dir(p)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<Vec<_>>>()?;
        entries.sort();
        for e in entries {
            collect_files(&e, out)?;
        }
    } else {
        out.push(p.to_path_buf());
    }
    Ok(())
}

/// Deterministic English-like text for experiments without a real corpus.
///
/// Words are built from syllables, drawn from a Zipf distribution and chained
/// by a sparse word-level Markov model, so the text has spelling, word
/// frequency and word order structure at several ranges.
pub fn synthetic_text(seed: u64, n_bytes: usize) -> Vec<u8> {
    const ONSETS: [&str; 20] = [
        "b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "w", "th", "st", "br", "ch", "sh",
    ];
    const VOWELS: [&str; 8] = ["a", "e", "i", "o", "u", "ea", "ou", "ai"];
    const CODAS: [&str; 8] = ["", "", "", "n", "r", "s", "t", "ng"];
    const N_WORDS: usize = 600;
    const FOLLOWERS: usize = 6;

    let root = RngState::new(seed);
    let mut rng = root.fork_named("synthetic.lexicon");
    let mut words: Vec<String> = Vec::with_capacity(N_WORDS);
    while words.len() < N_WORDS {
        // Frequent words are short.
        let max_syll = 1 + (words.len() * 3) / N_WORDS;
        let n_syll = rng.inner().random_range(1..=max_syll + 1);
        let mut w = String::new();
        for _ in 0..n_syll {
            w.push_str(ONSETS[rng.inner().random_range(0..ONSETS.len())]);
            w.push_str(VOWELS[rng.inner().random_range(0..VOWELS.len())]);
            w.push_str(CODAS[rng.inner().random_range(0..CODAS.len())]);
        }
        if !words.contains(&w) {
            words.push(w);
        }
    }
    let zipf = Zipf::new(N_WORDS as f64, 1.1).expect("valid zipf");
    let draw = |rng: &mut RngState| (zipf.sample(rng.inner()) as usize - 1).min(N_WORDS - 1);
    let followers: Vec<Vec<usize>> = (0..N_WORDS)
        .map(|_| (0..FOLLOWERS).map(|_| draw(&mut rng)).collect())
        .collect();

    let mut rng = root.fork_named("synthetic.text");
    let mut out = Vec::with_capacity(n_bytes + 64);
    let mut prev = draw(&mut rng);
    while out.len() < n_bytes {
        let len = rng.inner().random_range(4..14);
        for i in 0..len {
            let w = if rng.inner().random_bool(0.75) {
                let k = rng.inner().random_range(0..FOLLOWERS);
                let k = k.min(rng.inner().random_range(0..FOLLOWERS));
                followers[prev][k]
            } else {
                draw(&mut rng)
            };
            let word = words[w].as_bytes();
            if i == 0 {
                out.push(word[0].to_ascii_uppercase());
                out.extend_from_slice(&word[1..]);
            } else {
                out.push(b' ');
                out.extend_from_slice(word);
            }
            prev = w;
        }
        out.push(b'.');
        out.push(if rng.inner().random_bool(0.15) { b'\n' } else { b' ' });
    }
    out.truncate(n_bytes);
    out
}
