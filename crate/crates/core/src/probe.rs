//! Nearest-neighbor inspection of learned word representations.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::model::{encode_hidden, Model};
use crate::tasks::batch_of;
use crate::tokenizer::{encode_for_model, split_words, tokenize_word, TokenId, Vocab};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// Rows of the input token-embedding table.
    Static,
    /// Final-layer states averaged over every corpus occurrence of a word.
    ContextualMean,
}

impl std::str::FromStr for ProbeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(ProbeMode::Static),
            "contextual_mean" | "contextual-mean" => Ok(ProbeMode::ContextualMean),
            other => Err(Error::Config(format!("unknown probe mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub word: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborReport {
    pub query: String,
    pub mode: ProbeMode,
    pub neighbors: Vec<Neighbor>,
}

impl NeighborReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let mode = match self.mode {
            ProbeMode::Static => "static",
            ProbeMode::ContextualMean => "contextual mean",
        };
        let width = self.neighbors.iter().map(|n| n.word.len()).max().unwrap_or(4).max(4);
        let mut out = format!("{} ({mode})\n", self.query);
        let _ = writeln!(out, "{:>4}  {:<width$}  cosine", "rank", "word");
        for (i, n) in self.neighbors.iter().enumerate() {
            let _ = writeln!(out, "{:>4}  {:<width$}  {:.4}", i + 1, n.word, n.similarity);
        }
        out
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Top `k` candidates by cosine to `query`, ties broken by word.
fn rank(query: &[f64], candidates: Vec<(String, Vec<f64>)>, k: usize) -> Vec<Neighbor> {
    let mut scored: Vec<Neighbor> = candidates
        .into_iter()
        .map(|(word, v)| Neighbor {
            similarity: cosine(query, &v),
            word,
        })
        .collect();
    scored.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then_with(|| a.word.cmp(&b.word)));
    scored.truncate(k);
    scored
}

fn single_piece(query: &str, vocab: &Vocab, lowercase: bool) -> Result<TokenId> {
    let words = split_words(query, lowercase);
    let [word] = words.as_slice() else {
        return Err(Error::Data(format!("query {query:?} is not a single word")));
    };
    match tokenize_word(word, vocab).as_slice() {
        [id] if vocab.is_whole_word(*id) => Ok(*id),
        _ => Err(Error::Data(format!("query {query:?} is not a single whole-word piece"))),
    }
}

/// Nearest neighbors of `query`. Static mode compares token-embedding rows of
/// whole-word, non-special pieces and ignores `corpus`; contextual-mean mode
/// needs `corpus` sentences and compares words of that corpus. The query is
/// never its own neighbor.
pub fn nearest_neighbors(
    model: &Model<f32>,
    vocab: &Vocab,
    query: &str,
    k: usize,
    mode: ProbeMode,
    corpus: Option<&[String]>,
    lowercase: bool,
) -> Result<NeighborReport> {
    if vocab.len() != model.config.vocab_size {
        return Err(Error::Config("vocabulary does not match the model".into()));
    }
    let neighbors = match mode {
        ProbeMode::Static => {
            let q = single_piece(query, vocab, lowercase)?;
            let table = model
                .params
                .get("embeddings.token")
                .ok_or_else(|| Error::Checkpoint("missing token embeddings".into()))?;
            let h = model.config.hidden;
            let row = |id: TokenId| -> Vec<f64> {
                table.data[id as usize * h..(id as usize + 1) * h]
                    .iter()
                    .map(|&v| v as f64)
                    .collect()
            };
            let candidates = (0..vocab.len() as TokenId)
                .filter(|&id| id != q && vocab.is_whole_word(id))
                .map(|id| (vocab.token(id).expect("id in range").to_string(), row(id)))
                .collect();
            rank(&row(q), candidates, k)
        }
        ProbeMode::ContextualMean => {
            let corpus = corpus.ok_or_else(|| Error::Config("contextual_mean mode needs a corpus".into()))?;
            let mut means = contextual_means(model, vocab, corpus, lowercase)?;
            let key = split_words(query, lowercase).join(" ");
            let q = means
                .remove(&key)
                .ok_or_else(|| Error::Data(format!("query {query:?} does not occur in the corpus")))?;
            rank(&q, means.into_iter().collect(), k)
        }
    };
    Ok(NeighborReport {
        query: query.to_string(),
        mode,
        neighbors,
    })
}

/// Mean final-layer state per corpus word. An occurrence is the mean over the
/// word's pieces; words past the model's position limit are skipped.
pub fn contextual_means(
    model: &Model<f32>,
    vocab: &Vocab,
    corpus: &[String],
    lowercase: bool,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let h = model.config.hidden;
    let max_len = model.config.max_positions;
    let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for chunk in corpus.chunks(32) {
        let mut encoded = Vec::new();
        let mut words = Vec::new();
        for sentence in chunk {
            let mut ids = Vec::new();
            let mut spans = Vec::new();
            for w in split_words(sentence, lowercase) {
                let pieces = tokenize_word(&w, vocab);
                if ids.len() + pieces.len() + 2 > max_len {
                    break;
                }
                spans.push((w, ids.len() + 1, pieces.len()));
                ids.extend(pieces);
            }
            encoded.push(encode_for_model(&ids, None, vocab, max_len)?);
            words.push(spans);
        }
        let batch = batch_of(&encoded.iter().collect::<Vec<_>>());
        let hidden = encode_hidden(model, &batch)?;
        for (b, spans) in words.into_iter().enumerate() {
            for (w, start, len) in spans {
                let entry = sums.entry(w).or_insert_with(|| (vec![0.0; h], 0));
                for p in start..start + len {
                    let row = &hidden[(b * batch.seq_len + p) * h..(b * batch.seq_len + p + 1) * h];
                    for (acc, &v) in entry.0.iter_mut().zip(row) {
                        *acc += v as f64 / len as f64;
                    }
                }
                entry.1 += 1;
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|(w, (s, n))| (w, s.into_iter().map(|v| v / n as f64).collect()))
        .collect())
}
