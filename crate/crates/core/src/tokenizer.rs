//! WordPiece vocabulary training, greedy longest-match tokenization and
//! model-input encoding.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::is_punct;
use crate::hashing::sha256_hex;
use crate::{Error, Result};

pub type TokenId = u32;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

/// Words longer than this many characters become a single `[UNK]`.
pub const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub pad: TokenId,
    pub unk: TokenId,
    pub cls: TokenId,
    pub sep: TokenId,
    pub mask: TokenId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    specials: SpecialIds,
}

impl Vocab {
    /// Builds a vocabulary from an ordered token list; line order is id order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Data(format!("empty token at id {i}")));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Data(format!("duplicate token {t:?}")));
            }
        }
        let id = |s: &str| {
            index
                .get(s)
                .copied()
                .ok_or_else(|| Error::Data(format!("vocab lacks special token {s}")))
        };
        let specials = SpecialIds {
            pad: id(PAD)?,
            unk: id(UNK)?,
            cls: id(CLS)?,
            sep: id(SEP)?,
            mask: id(MASK)?,
        };
        if specials.pad != 0 {
            return Err(Error::Data("[PAD] must have id 0".into()));
        }
        Ok(Vocab {
            tokens,
            index,
            specials,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        let s = self.specials;
        [s.pad, s.unk, s.cls, s.sep, s.mask].contains(&id)
    }

    /// Whole-word pieces: not special and not a `##` continuation.
    pub fn is_whole_word(&self, id: TokenId) -> bool {
        !self.is_special(id) && !self.tokens[id as usize].starts_with("##")
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    /// SHA-256 of the serialized vocabulary file.
    pub fn fingerprint(&self) -> String {
        sha256_hex(self.to_file_string().as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::from_tokens(s.lines().map(String::from).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
    pub pieces: Vec<String>,
}

/// Whitespace and punctuation pre-tokenization (BERT "basic" tokenizer).
pub fn split_words(text: &str, lowercase: bool) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_whitespace() || c.is_control() {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
        } else if is_punct(c) {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
            words.push(c.to_string());
        } else if lowercase {
            cur.extend(c.to_lowercase());
        } else {
            cur.push(c);
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

/// Greedy longest-prefix WordPiece split of one pre-tokenized word. Returns
/// `None` when some remainder has no matching piece.
pub fn wordpiece(word: &str, vocab: &Vocab) -> Option<Vec<TokenId>> {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > MAX_WORD_CHARS {
        return None;
    }
    let mut out = Vec::new();
    let mut start = 0;
    let mut buf = String::new();
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while start < end {
            buf.clear();
            if start > 0 {
                buf.push_str("##");
            }
            buf.extend(&chars[start..end]);
            if let Some(id) = vocab.id(&buf) {
                found = Some(id);
                break;
            }
            end -= 1;
        }
        out.push(found?);
        start = end;
    }
    Some(out)
}

/// Token ids for a single pre-tokenized word (`[UNK]` when unmatched).
pub fn tokenize_word(word: &str, vocab: &Vocab) -> Vec<TokenId> {
    wordpiece(word, vocab).unwrap_or_else(|| vec![vocab.specials().unk])
}

pub fn tokenize(text: &str, vocab: &Vocab, lowercase: bool) -> TokenSeq {
    let mut ids = Vec::new();
    for w in split_words(text, lowercase) {
        ids.extend(tokenize_word(&w, vocab));
    }
    let pieces = ids
        .iter()
        .map(|&i| vocab.token(i).unwrap_or(UNK).to_string())
        .collect();
    TokenSeq { ids, pieces }
}

pub fn detokenize<S: AsRef<str>>(pieces: &[S]) -> String {
    let mut out = String::new();
    for p in pieces {
        let p = p.as_ref();
        if let Some(rest) = p.strip_prefix("##") {
            out.push_str(rest);
        } else {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(p);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub target_size: usize,
    pub min_freq: usize,
    pub lowercase: bool,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            target_size: 8000,
            min_freq: 1,
            lowercase: false,
        }
    }
}

/// Trains a WordPiece vocabulary by iterative within-word pair merging.
///
/// Every character with at least `min_freq` occurrences gets both a
/// word-initial and a `##` continuation piece. Merges pick the most frequent
/// adjacent pair; ties go to the lexicographically smallest pair.
pub fn train_vocab<S: AsRef<str>>(sentences: &[S], config: &VocabConfig) -> Result<Vocab> {
    if sentences.is_empty() {
        return Err(Error::Data("cannot train a vocabulary on an empty corpus".into()));
    }
    let mut word_counts: BTreeMap<String, usize> = BTreeMap::new();
    for s in sentences {
        for w in split_words(s.as_ref(), config.lowercase) {
            if w.chars().count() <= MAX_WORD_CHARS {
                *word_counts.entry(w).or_default() += 1;
            }
        }
    }
    if word_counts.is_empty() {
        return Err(Error::Data("corpus contains no words".into()));
    }
    let mut char_counts: BTreeMap<char, usize> = BTreeMap::new();
    for (w, c) in &word_counts {
        for ch in w.chars() {
            *char_counts.entry(ch).or_default() += c;
        }
    }
    let alphabet: BTreeSet<char> = char_counts
        .iter()
        .filter(|(_, &c)| c >= config.min_freq)
        .map(|(&ch, _)| ch)
        .collect();

    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    let mut pieces: BTreeSet<String> = BTreeSet::new();
    for ch in &alphabet {
        pieces.insert(ch.to_string());
        pieces.insert(format!("##{ch}"));
    }
    if config.target_size < tokens.len() + pieces.len() {
        return Err(Error::Config(format!(
            "target vocab size {} cannot hold {} specials and {} alphabet pieces",
            config.target_size,
            tokens.len(),
            pieces.len()
        )));
    }
    let mut present: BTreeSet<String> = pieces.clone();
    tokens.extend(pieces);

    // words as symbol sequences; words with characters outside the alphabet are ignored
    let mut words: Vec<(Vec<String>, usize)> = word_counts
        .iter()
        .filter(|(w, _)| w.chars().all(|c| alphabet.contains(&c)))
        .map(|(w, &c)| {
            let syms = w
                .chars()
                .enumerate()
                .map(|(i, ch)| if i == 0 { ch.to_string() } else { format!("##{ch}") })
                .collect();
            (syms, c)
        })
        .collect();

    while tokens.len() < config.target_size {
        let mut pair_counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (syms, c) in &words {
            for p in syms.windows(2) {
                *pair_counts.entry((p[0].as_str(), p[1].as_str())).or_default() += c;
            }
        }
        // BTreeMap iterates pairs in lexicographic order; keep the first maximum
        let mut best: Option<((&str, &str), usize)> = None;
        for (&pair, &c) in &pair_counts {
            if best.is_none_or(|(_, bc)| c > bc) {
                best = Some((pair, c));
            }
        }
        let Some(((a, b), _)) = best else { break };
        let (a, b) = (a.to_string(), b.to_string());
        let merged = format!("{a}{}", b.trim_start_matches("##"));
        for (syms, _) in words.iter_mut() {
            let mut i = 0;
            let mut out = Vec::with_capacity(syms.len());
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            *syms = out;
        }
        if present.insert(merged.clone()) {
            tokens.push(merged);
        }
    }
    Vocab::from_tokens(tokens)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encoded {
    pub ids: Vec<TokenId>,
    pub segment_ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
}

/// Lays out `[CLS] A [SEP]` or `[CLS] A [SEP] B [SEP]`, truncating the
/// longer segment one token at a time, then pads to `max_len`.
pub fn encode_for_model(
    a: &[TokenId],
    b: Option<&[TokenId]>,
    vocab: &Vocab,
    max_len: usize,
) -> Result<Encoded> {
    let overhead = if b.is_some() { 3 } else { 2 };
    if max_len < 3 || max_len < overhead {
        return Err(Error::Config(format!("max_len {max_len} leaves no room for special tokens")));
    }
    let budget = max_len - overhead;
    let mut a = a.to_vec();
    let mut b = b.map(<[TokenId]>::to_vec);
    loop {
        let total = a.len() + b.as_ref().map_or(0, Vec::len);
        if total <= budget {
            break;
        }
        match b.as_mut() {
            Some(bv) if bv.len() >= a.len() => {
                bv.pop();
            }
            _ => {
                a.pop();
            }
        }
    }
    let sp = vocab.specials();
    let mut ids = Vec::with_capacity(max_len);
    let mut segment_ids = Vec::with_capacity(max_len);
    ids.push(sp.cls);
    ids.extend(&a);
    ids.push(sp.sep);
    segment_ids.resize(ids.len(), 0);
    if let Some(b) = b {
        ids.extend(&b);
        ids.push(sp.sep);
        segment_ids.resize(ids.len(), 1);
    }
    let real = ids.len();
    ids.resize(max_len, sp.pad);
    segment_ids.resize(max_len, 0);
    let mut attention_mask = vec![1u8; real];
    attention_mask.resize(max_len, 0);
    Ok(Encoded {
        ids,
        segment_ids,
        attention_mask,
    })
}
