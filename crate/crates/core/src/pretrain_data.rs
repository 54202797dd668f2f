//! Packing tokenized documents into sentence-pair sequences and masking them
//! into masked-LM training instances.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{parse_note, NoteCollection};
use crate::tokenizer::{tokenize, TokenId, Vocab};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub max_seq_len: usize,
    pub mlm_prob: f64,
    pub max_predictions: usize,
    pub dup_factor: usize,
    pub nsp_enabled: bool,
    pub short_seq_prob: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            max_seq_len: 128,
            mlm_prob: 0.15,
            max_predictions: 20,
            dup_factor: 5,
            nsp_enabled: true,
            short_seq_prob: 0.1,
            seed: 12345,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mlm_prob > 0.0 && self.mlm_prob < 1.0) {
            return Err(Error::Config(format!("mlm_prob {} outside (0, 1)", self.mlm_prob)));
        }
        if self.max_predictions == 0 {
            return Err(Error::Config("max_predictions must be at least 1".into()));
        }
        if self.dup_factor == 0 {
            return Err(Error::Config("dup_factor must be at least 1".into()));
        }
        if self.max_seq_len < 5 {
            return Err(Error::Config("max_seq_len must be at least 5".into()));
        }
        if !(0.0..=1.0).contains(&self.short_seq_prob) {
            return Err(Error::Config("short_seq_prob outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Seed used for the masking pass of duplicate `dup`.
pub fn seed_for_dup(seed: u64, dup: u64) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(dup)
}

/// Number of masked positions for a sequence of `len` real tokens
/// (special tokens included). Rounding is half-to-even.
pub fn num_to_predict(len: usize, mlm_prob: f64, max_predictions: usize) -> usize {
    let r = (len as f64 * mlm_prob).round_ties_even() as usize;
    max_predictions.min(r.max(1))
}

/// One note as an ordered list of tokenized sentences.
pub type Document = Vec<Vec<TokenId>>;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentSet {
    pub documents: Vec<Document>,
    pub dropped: usize,
}

pub fn build_documents(collection: &NoteCollection, vocab: &Vocab, lowercase: bool) -> DocumentSet {
    let mut out = DocumentSet::default();
    for note in &collection.notes {
        let doc: Document = parse_note(note)
            .sentences
            .iter()
            .map(|s| tokenize(&s.text, vocab, lowercase).ids)
            .filter(|ids| !ids.is_empty())
            .collect();
        if doc.is_empty() {
            out.dropped += 1;
        } else {
            out.documents.push(doc);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedSegment {
    pub a: Vec<TokenId>,
    pub b: Vec<TokenId>,
    pub is_next: bool,
}

impl PackedSegment {
    /// `[CLS] a [SEP] (b [SEP])` with segment ids.
    pub fn layout(&self, vocab: &Vocab) -> (Vec<TokenId>, Vec<u32>) {
        let sp = vocab.specials();
        let mut ids = Vec::with_capacity(self.a.len() + self.b.len() + 3);
        ids.push(sp.cls);
        ids.extend(&self.a);
        ids.push(sp.sep);
        let mut seg = vec![0u32; ids.len()];
        if !self.b.is_empty() {
            ids.extend(&self.b);
            ids.push(sp.sep);
            seg.resize(ids.len(), 1);
        }
        (ids, seg)
    }
}

/// Drops tokens from the longer segment, alternating front and back at random.
fn truncate_pair(a: &mut Vec<TokenId>, b: &mut Vec<TokenId>, max_tokens: usize, rng: &mut ChaCha8Rng) {
    while a.len() + b.len() > max_tokens {
        let t = if a.len() > b.len() { &mut *a } else { &mut *b };
        if rng.random::<f64>() < 0.5 {
            t.remove(0);
        } else {
            t.pop();
        }
    }
}

/// Greedy sentence packing with next-sentence pairs.
pub fn pack_segments(documents: &[Document], config: &PretrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<PackedSegment>> {
    config.validate()?;
    if config.nsp_enabled && documents.len() < 2 {
        return Err(Error::Data(
            "next-sentence pairs need at least 2 documents".into(),
        ));
    }
    let mut out = Vec::new();
    for (doc_idx, doc) in documents.iter().enumerate() {
        if config.nsp_enabled {
            pack_pairs(documents, doc_idx, config, rng, &mut out);
        } else {
            pack_single(doc, config, rng, &mut out);
        }
    }
    Ok(out)
}

fn pack_single(doc: &Document, config: &PretrainConfig, rng: &mut ChaCha8Rng, out: &mut Vec<PackedSegment>) {
    let max_tokens = config.max_seq_len - 2;
    let mut target = max_tokens;
    if rng.random::<f64>() < config.short_seq_prob {
        target = rng.random_range(2..=max_tokens);
    }
    let mut chunk: Vec<TokenId> = Vec::new();
    for (i, sent) in doc.iter().enumerate() {
        chunk.extend(sent);
        if i == doc.len() - 1 || chunk.len() >= target {
            let mut a = std::mem::take(&mut chunk);
            let mut b = Vec::new();
            truncate_pair(&mut a, &mut b, max_tokens, rng);
            out.push(PackedSegment { a, b, is_next: true });
            target = max_tokens;
            if rng.random::<f64>() < config.short_seq_prob {
                target = rng.random_range(2..=max_tokens);
            }
        }
    }
}

fn pack_pairs(
    documents: &[Document],
    doc_idx: usize,
    config: &PretrainConfig,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<PackedSegment>,
) {
    let doc = &documents[doc_idx];
    let max_tokens = config.max_seq_len - 3;
    let mut target = max_tokens;
    if rng.random::<f64>() < config.short_seq_prob {
        target = rng.random_range(2..=max_tokens);
    }
    let mut chunk: Vec<&Vec<TokenId>> = Vec::new();
    let mut chunk_len = 0;
    let mut i = 0;
    while i < doc.len() {
        chunk.push(&doc[i]);
        chunk_len += doc[i].len();
        if i == doc.len() - 1 || chunk_len >= target {
            let a_end = if chunk.len() >= 2 {
                rng.random_range(1..chunk.len())
            } else {
                1
            };
            let mut a: Vec<TokenId> = chunk[..a_end].iter().flat_map(|s| s.iter().copied()).collect();
            let mut b: Vec<TokenId> = Vec::new();
            let is_random_next = chunk.len() == 1 || rng.random::<f64>() < 0.5;
            if is_random_next {
                let target_b = target.saturating_sub(a.len()).max(1);
                let mut other = rng.random_range(0..documents.len() - 1);
                if other >= doc_idx {
                    other += 1;
                }
                let rdoc = &documents[other];
                let start = rng.random_range(0..rdoc.len());
                for s in &rdoc[start..] {
                    b.extend(s);
                    if b.len() >= target_b {
                        break;
                    }
                }
                // unused sentences of this chunk go back to the stream
                let unused = chunk.len() - a_end;
                i -= unused;
            } else {
                b = chunk[a_end..].iter().flat_map(|s| s.iter().copied()).collect();
            }
            truncate_pair(&mut a, &mut b, max_tokens, rng);
            if !a.is_empty() && !b.is_empty() {
                out.push(PackedSegment {
                    a,
                    b,
                    is_next: !is_random_next,
                });
            }
            chunk.clear();
            chunk_len = 0;
            target = max_tokens;
            if rng.random::<f64>() < config.short_seq_prob {
                target = rng.random_range(2..=max_tokens);
            }
        }
        i += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlmInstance {
    pub ids: Vec<TokenId>,
    pub segment_ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub masked_positions: Vec<usize>,
    pub masked_labels: Vec<TokenId>,
    pub is_next: bool,
}

impl MlmInstance {
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }
}

/// Masks a laid-out sequence with the 80/10/10 replacement rule and pads it.
pub fn mask_instance(
    tokens: &[TokenId],
    segment_ids: &[u32],
    is_next: bool,
    vocab: &Vocab,
    config: &PretrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<MlmInstance> {
    if tokens.len() != segment_ids.len() {
        return Err(Error::Shape("tokens and segment ids differ in length".into()));
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::Shape(format!(
            "sequence of {} tokens exceeds max_seq_len {}",
            tokens.len(),
            config.max_seq_len
        )));
    }
    let sp = vocab.specials();
    let mut candidates: Vec<usize> = (0..tokens.len())
        .filter(|&i| tokens[i] != sp.cls && tokens[i] != sp.sep && tokens[i] != sp.pad)
        .collect();
    if candidates.is_empty() {
        return Err(Error::Data("sequence has no maskable positions".into()));
    }
    candidates.shuffle(rng);
    let n = num_to_predict(tokens.len(), config.mlm_prob, config.max_predictions).min(candidates.len());
    let mut chosen = candidates[..n].to_vec();
    chosen.sort_unstable();

    let replaceable: Vec<TokenId> = (0..vocab.len() as TokenId).filter(|&t| !vocab.is_special(t)).collect();
    let mut ids = tokens.to_vec();
    let mut labels = Vec::with_capacity(n);
    for &p in &chosen {
        labels.push(tokens[p]);
        let r: f64 = rng.random();
        ids[p] = if r < 0.8 {
            sp.mask
        } else if r < 0.9 || replaceable.is_empty() {
            tokens[p]
        } else {
            replaceable[rng.random_range(0..replaceable.len())]
        };
    }
    let real = ids.len();
    ids.resize(config.max_seq_len, sp.pad);
    let mut seg = segment_ids.to_vec();
    seg.resize(config.max_seq_len, 0);
    let mut attention_mask = vec![1u8; real];
    attention_mask.resize(config.max_seq_len, 0);
    Ok(MlmInstance {
        ids,
        segment_ids: seg,
        attention_mask,
        masked_positions: chosen,
        masked_labels: labels,
        is_next,
    })
}

/// Packs once with `config.seed`, then masks every packed sequence
/// `dup_factor` times, duplicate `d` using [`seed_for_dup`].
pub fn create_instances(documents: &[Document], vocab: &Vocab, config: &PretrainConfig) -> Result<Vec<MlmInstance>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let packed = pack_segments(documents, config, &mut rng)?;
    let mut out = Vec::with_capacity(packed.len() * config.dup_factor);
    for d in 0..config.dup_factor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for_dup(config.seed, d as u64));
        for p in &packed {
            let (ids, seg) = p.layout(vocab);
            out.push(mask_instance(&ids, &seg, p.is_next, vocab, config, &mut rng)?);
        }
    }
    Ok(out)
}

const INSTANCE_MAGIC: &[u8; 4] = b"CLDI";
const INSTANCE_VERSION: u32 = 1;

/// Binary instance file: magic, version, max_seq_len, count, then one
/// length-prefixed little-endian record per instance.
pub fn write_instances_binary(path: &Path, instances: &[MlmInstance], max_seq_len: usize) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(INSTANCE_MAGIC);
    buf.extend_from_slice(&INSTANCE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(max_seq_len as u32).to_le_bytes());
    buf.extend_from_slice(&(instances.len() as u64).to_le_bytes());
    for inst in instances {
        let real = inst.real_len();
        let mut rec = Vec::new();
        rec.extend_from_slice(&(real as u32).to_le_bytes());
        for &t in &inst.ids[..real] {
            rec.extend_from_slice(&t.to_le_bytes());
        }
        for &s in &inst.segment_ids[..real] {
            rec.push(s as u8);
        }
        rec.extend_from_slice(&(inst.masked_positions.len() as u32).to_le_bytes());
        for (&p, &l) in inst.masked_positions.iter().zip(&inst.masked_labels) {
            rec.extend_from_slice(&(p as u32).to_le_bytes());
            rec.extend_from_slice(&l.to_le_bytes());
        }
        rec.push(inst.is_next as u8);
        buf.extend_from_slice(&(rec.len() as u32).to_le_bytes());
        buf.extend_from_slice(&rec);
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Data("instance file truncated".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_instances_binary(path: &Path) -> Result<(Vec<MlmInstance>, usize)> {
    let mut data = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { data: &data, pos: 0 };
    if c.take(4)? != INSTANCE_MAGIC {
        return Err(Error::Data("not an instance file (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != INSTANCE_VERSION {
        return Err(Error::Data(format!("unsupported instance file version {version}")));
    }
    let max_seq_len = c.u32()? as usize;
    let count = u64::from_le_bytes(c.take(8)?.try_into().expect("8 bytes")) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let _rec_len = c.u32()?;
        let real = c.u32()? as usize;
        if real > max_seq_len {
            return Err(Error::Data("instance longer than max_seq_len".into()));
        }
        let mut ids = Vec::with_capacity(max_seq_len);
        for _ in 0..real {
            ids.push(c.u32()?);
        }
        let mut seg: Vec<u32> = c.take(real)?.iter().map(|&b| b as u32).collect();
        let n = c.u32()? as usize;
        let mut positions = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            positions.push(c.u32()? as usize);
            labels.push(c.u32()?);
        }
        let is_next = c.take(1)?[0] != 0;
        ids.resize(max_seq_len, 0);
        seg.resize(max_seq_len, 0);
        let mut mask = vec![1u8; real];
        mask.resize(max_seq_len, 0);
        out.push(MlmInstance {
            ids,
            segment_ids: seg,
            attention_mask: mask,
            masked_positions: positions,
            masked_labels: labels,
            is_next,
        });
    }
    Ok((out, max_seq_len))
}

#[derive(Serialize, Deserialize)]
struct JsonInstance {
    ids: Vec<TokenId>,
    segment_ids: Vec<u32>,
    masked_positions: Vec<usize>,
    masked_labels: Vec<TokenId>,
    is_next: bool,
}

/// JSONL export: a version header line, then one unpadded instance per line.
pub fn instances_to_jsonl(instances: &[MlmInstance], max_seq_len: usize) -> Result<String> {
    let mut out = serde_json::to_string(&serde_json::json!({
        "format": "notebert-instances",
        "version": INSTANCE_VERSION,
        "max_seq_len": max_seq_len,
    }))?;
    out.push('\n');
    for inst in instances {
        let real = inst.real_len();
        out.push_str(&serde_json::to_string(&JsonInstance {
            ids: inst.ids[..real].to_vec(),
            segment_ids: inst.segment_ids[..real].to_vec(),
            masked_positions: inst.masked_positions.clone(),
            masked_labels: inst.masked_labels.clone(),
            is_next: inst.is_next,
        })?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::SPECIALS;

    fn vocab(n: usize) -> Vocab {
        let mut t: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        t.extend((0..n).map(|i| format!("w{i}")));
        Vocab::from_tokens(t).unwrap()
    }

    fn docs(n_docs: usize, sents: usize, len: usize) -> Vec<Document> {
        (0..n_docs)
            .map(|d| {
                (0..sents)
                    .map(|s| (0..len).map(|k| 5 + ((d * 7 + s * 3 + k) % 40) as TokenId).collect())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn prediction_counts() {
        assert_eq!(num_to_predict(128, 0.15, 20), 19);
        assert_eq!(num_to_predict(10, 0.15, 20), 2);
        assert_eq!(num_to_predict(4, 0.15, 20), 1);
        assert_eq!(num_to_predict(512, 0.15, 20), 20);
    }

    #[test]
    fn mask_instance_invariants() {
        let v = vocab(50);
        let cfg = PretrainConfig::default();
        let sp = v.specials();
        let mut toks = vec![sp.cls];
        toks.extend((0..126).map(|i| 5 + (i % 50) as TokenId));
        toks.push(sp.sep);
        let seg = vec![0; toks.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inst = mask_instance(&toks, &seg, true, &v, &cfg, &mut rng).unwrap();
        assert_eq!(inst.masked_positions.len(), 19);
        assert!(inst.masked_positions.windows(2).all(|w| w[0] < w[1]));
        for (&p, &l) in inst.masked_positions.iter().zip(&inst.masked_labels) {
            assert_eq!(toks[p], l);
            assert!(p != 0 && p != toks.len() - 1);
        }
        let only_specials = [sp.cls, sp.sep];
        assert!(mask_instance(&only_specials, &[0, 0], true, &v, &cfg, &mut rng).is_err());
    }

    #[test]
    fn nsp_requires_two_documents() {
        let cfg = PretrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(pack_segments(&docs(1, 5, 10), &cfg, &mut rng).is_err());
    }

    #[test]
    fn single_segment_mode() {
        let v = vocab(50);
        let cfg = PretrainConfig {
            nsp_enabled: false,
            dup_factor: 1,
            ..Default::default()
        };
        let inst = create_instances(&docs(3, 20, 12), &v, &cfg).unwrap();
        assert!(!inst.is_empty());
        assert!(inst.iter().all(|i| i.is_next && i.segment_ids.iter().all(|&s| s == 0)));
    }

    #[test]
    fn duplicates_multiply_and_differ() {
        let v = vocab(50);
        let d = docs(4, 30, 10);
        let one = create_instances(&d, &v, &PretrainConfig { dup_factor: 1, ..Default::default() }).unwrap();
        let five = create_instances(&d, &v, &PretrainConfig::default()).unwrap();
        assert_eq!(five.len(), 5 * one.len());
        let n = one.len();
        // duplicate 0 equals the dup_factor=1 run; later duplicates re-mask the same sequence
        assert_eq!(&five[..n], &one[..]);
        let mut differing = 0;
        for i in 0..n {
            assert_eq!(five[i].masked_labels.len(), five[i + n].masked_labels.len());
            if five[i].masked_positions != five[i + n].masked_positions {
                differing += 1;
            }
        }
        assert!(differing * 10 >= n * 9, "{differing} of {n} differ");
    }

    #[test]
    fn layout_invariants() {
        let v = vocab(50);
        let sp = v.specials();
        let inst = create_instances(&docs(5, 25, 9), &v, &PretrainConfig::default()).unwrap();
        for i in &inst {
            assert_eq!(i.ids[0], sp.cls);
            let real = i.real_len();
            assert!(i.attention_mask[..real].iter().all(|&m| m == 1));
            assert!(i.ids[real..].iter().all(|&t| t == sp.pad));
            let seps = i.ids[..real].iter().filter(|&&t| t == sp.sep).count()
                + i.masked_labels.iter().filter(|&&t| t == sp.sep).count();
            assert_eq!(seps, 2);
            assert!(i.masked_positions.iter().all(|&p| p < real && p > 0));
        }
    }

    #[test]
    fn binary_round_trip() {
        let v = vocab(50);
        let cfg = PretrainConfig {
            dup_factor: 2,
            ..Default::default()
        };
        let inst = create_instances(&docs(3, 10, 8), &v, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.bin");
        write_instances_binary(&p, &inst, cfg.max_seq_len).unwrap();
        let (back, len) = read_instances_binary(&p).unwrap();
        assert_eq!(len, 128);
        assert_eq!(back, inst);
        assert!(instances_to_jsonl(&inst, 128).unwrap().lines().count() == inst.len() + 1);
    }
}
