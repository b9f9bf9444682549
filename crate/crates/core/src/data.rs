//! Character tokenizer, bundled toy corpora and the weighted source
//! mixture.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const BOS: u32 = 0;
pub const UNK: u32 = 1;

const ALPHABET: &str = "\n abcdefghijklmnopqrstuvwxyz0123456789.,;:'\"()[]{}-_=+*/<>#!?%";

/// Lower-casing character tokenizer with 64 ids: BOS, unknown, then
/// newline, space, letters, digits and punctuation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CharTokenizer;

impl CharTokenizer {
    pub const VOCAB: usize = 2 + ALPHABET.len();

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.chars()
            .map(|c| {
                let c = if c == '\t' { ' ' } else { c.to_ascii_lowercase() };
                ALPHABET.find(c).map_or(UNK, |i| i as u32 + 2)
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| match i {
                BOS => '^',
                UNK => '~',
                i => ALPHABET.as_bytes().get(i as usize - 2).map_or('~', |&b| b as char),
            })
            .collect()
    }
}

/// Source names and augmented mixture weights of the pretraining data.
pub const PRETRAIN_MIXTURE: [(&str, f64); 8] = [
    ("arxiv", 0.042),
    ("books", 0.040),
    ("c4", 0.258),
    ("commoncrawl", 0.517),
    ("github", 0.048),
    ("stackexchange", 0.031),
    ("wikipedia", 0.033),
    ("python", 0.031),
];

/// Bundled text of a named source, or of `"task"` for the fine-tuning
/// task.
pub fn corpus(name: &str) -> Option<&'static str> {
    Some(match name {
        "arxiv" => include_str!("../data/arxiv.txt"),
        "books" => include_str!("../data/books.txt"),
        "c4" => include_str!("../data/c4.txt"),
        "commoncrawl" => include_str!("../data/commoncrawl.txt"),
        "github" => include_str!("../data/github.txt"),
        "stackexchange" => include_str!("../data/stackexchange.txt"),
        "wikipedia" => include_str!("../data/wikipedia.txt"),
        "python" => include_str!("../data/python.txt"),
        "task" => include_str!("../data/task.txt"),
        _ => return None,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Source {
    pub name: String,
    pub weight: f64,
    pub tokens: Vec<u32>,
}

/// Training window drawn from one source.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub source: usize,
    pub tokens: Vec<u32>,
}

/// Weighted set of token streams.
#[derive(Clone, Debug, PartialEq)]
pub struct DataMixture {
    sources: Vec<Source>,
    cumulative: Vec<f64>,
}

impl DataMixture {
    pub fn new(sources: Vec<Source>) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::invalid("sources", "mixture needs at least one source"));
        }
        if let Some(s) = sources.iter().find(|s| s.tokens.is_empty()) {
            return Err(Error::EmptySource(s.name.clone()));
        }
        if sources.iter().any(|s| !(0.0..=1.0).contains(&s.weight)) {
            return Err(Error::invalid("weights", "each weight must lie in [0, 1]"));
        }
        let total: f64 = sources.iter().map(|s| s.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("weights", alloc::format!("weights sum to {total}, expected 1")));
        }
        let mut acc = 0.0;
        let cumulative = sources
            .iter()
            .map(|s| {
                acc += s.weight;
                acc
            })
            .collect();
        Ok(DataMixture { sources, cumulative })
    }

    /// The bundled pretraining corpora with their default weights.
    pub fn pretraining() -> Self {
        let tok = CharTokenizer;
        let sources = PRETRAIN_MIXTURE
            .iter()
            .map(|&(name, weight)| Source {
                name: name.into(),
                weight,
                tokens: tok.encode(corpus(name).expect("bundled corpus")),
            })
            .collect();
        Self::new(sources).expect("bundled mixture is valid")
    }

    pub fn sources(&self) -> &[Source] {
        &self.sources
    }

    /// One source index drawn by weight.
    pub fn pick(&self, rng: &mut Rng) -> usize {
        let u = rng.uniform();
        self.cumulative.iter().position(|&c| u < c).unwrap_or(self.sources.len() - 1)
    }

    /// `n` i.i.d. source indices.
    pub fn sample_sources(&self, rng: &mut Rng, n: usize) -> Vec<usize> {
        (0..n).map(|_| self.pick(rng)).collect()
    }

    /// `n` windows of `len` tokens, each from a source drawn by weight and
    /// starting at a uniform offset; streams wrap around at the end.
    pub fn sample_batch(&self, rng: &mut Rng, n: usize, len: usize) -> Vec<Sample> {
        (0..n)
            .map(|_| {
                let source = self.pick(rng);
                Sample { source, tokens: window(&self.sources[source].tokens, rng, len) }
            })
            .collect()
    }
}

/// `len` tokens of `stream` from a random start, wrapping around.
pub fn window(stream: &[u32], rng: &mut Rng, len: usize) -> Vec<u32> {
    let start = rng.below(stream.len());
    stream.iter().cycle().skip(start).take(len).copied().collect()
}

/// Fine-tuning task split into training and held-out evaluation text at a
/// line boundary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskData {
    pub train: Vec<u32>,
    pub eval: Vec<u32>,
}

impl TaskData {
    /// Bundled question/answer task: the first `train_fraction` of the
    /// exchanges train, the rest evaluate.
    pub fn bundled(train_fraction: f64) -> Self {
        let text = corpus("task").expect("bundled task");
        let lines: Vec<&str> = text.lines().collect();
        let pairs = lines.len() / 2;
        let cut = 2 * ((pairs as f64 * train_fraction) as usize).clamp(1, pairs - 1);
        let join = |ls: &[&str]| ls.iter().flat_map(|l| [*l, "\n"]).collect::<String>();
        let (train, eval) = (join(&lines[..cut]), join(&lines[cut..]));
        let tok = CharTokenizer;
        TaskData { train: tok.encode(&train), eval: tok.encode(&eval) }
    }
}

/// Consecutive evaluation windows of `len` tokens covering `stream`.
pub fn eval_windows(stream: &[u32], len: usize) -> Vec<Vec<u32>> {
    stream.chunks(len).filter(|c| c.len() >= 2).map(|c| c.to_vec()).collect()
}
