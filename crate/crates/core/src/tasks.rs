//! Span-labeling and sentence-pair tasks: IOB codec, exact-span F1, NLI
//! accuracy, CoNLL/TSV loaders and model-input encoding.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{forward, Batch, HeadKind, HeadLogits, Mode, Model, IGNORE};
use crate::tokenizer::{encode_for_model, tokenize, Encoded, TokenId, Vocab};
use crate::{Error, Result};

pub use crate::synth::synth_task_gen;

/// Inclusive token span.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

impl Span {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Self {
        Span {
            start,
            end,
            label: label.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSentence {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SpanLabeling,
    Nli,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ExactF1,
    Accuracy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub classes: Vec<String>,
}

pub const NLI_LABELS: [&str; 3] = ["entailment", "contradiction", "neutral"];

impl TaskSpec {
    pub fn span(name: &str, classes: &[&str]) -> Self {
        TaskSpec {
            name: name.into(),
            kind: TaskKind::SpanLabeling,
            classes: classes.iter().map(|c| c.to_string()).collect(),
        }
    }

    /// Problem/Test/Treatment concept extraction.
    pub fn clinical_ner() -> Self {
        Self::span("clinical_ner", &["Problem", "Test", "Treatment"])
    }

    pub fn phi() -> Self {
        Self::span("phi", &["NAME", "DATE", "HOSPITAL"])
    }

    pub fn nli() -> Self {
        TaskSpec {
            name: "nli".into(),
            kind: TaskKind::Nli,
            classes: NLI_LABELS.iter().map(|c| c.to_string()).collect(),
        }
    }

    pub fn metric(&self) -> Metric {
        match self.kind {
            TaskKind::SpanLabeling => Metric::ExactF1,
            TaskKind::Nli => Metric::Accuracy,
        }
    }

    /// `2|classes| + 1` for span tasks, `|classes|` for NLI.
    pub fn label_dim(&self) -> usize {
        match self.kind {
            TaskKind::SpanLabeling => 2 * self.classes.len() + 1,
            TaskKind::Nli => self.classes.len(),
        }
    }

    pub fn head(&self) -> HeadKind {
        match self.kind {
            TaskKind::SpanLabeling => HeadKind::TokenClassify {
                classes: self.label_dim(),
            },
            TaskKind::Nli => HeadKind::SeqClassify {
                classes: self.label_dim(),
            },
        }
    }

    /// Output labels in index order: `O`, then `B-c`, `I-c` per class.
    pub fn labels(&self) -> Vec<String> {
        match self.kind {
            TaskKind::SpanLabeling => {
                let mut out = vec!["O".to_string()];
                for c in &self.classes {
                    out.push(format!("B-{c}"));
                    out.push(format!("I-{c}"));
                }
                out
            }
            TaskKind::Nli => self.classes.clone(),
        }
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels().iter().position(|l| l == label)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config(format!("task {} declares no classes", self.name)));
        }
        let unique: BTreeSet<&String> = self.classes.iter().collect();
        if unique.len() != self.classes.len() {
            return Err(Error::Config(format!("task {} repeats a class", self.name)));
        }
        if self.classes.iter().any(|c| c.is_empty() || c == "O") {
            return Err(Error::Config(format!("task {} has an invalid class name", self.name)));
        }
        Ok(())
    }
}

pub fn iob_encode(spans: &[Span], len: usize) -> Result<Vec<String>> {
    let mut tags = vec!["O".to_string(); len];
    let mut taken = vec![false; len];
    for s in spans {
        if s.start > s.end || s.end >= len {
            return Err(Error::Data(format!("span ({}, {}) outside sentence of {len}", s.start, s.end)));
        }
        if s.label.is_empty() || s.label == "O" {
            return Err(Error::Data(format!("invalid span label {:?}", s.label)));
        }
        for i in s.start..=s.end {
            if taken[i] {
                return Err(Error::Data(format!("overlapping spans at token {i}")));
            }
            taken[i] = true;
            tags[i] = if i == s.start {
                format!("B-{}", s.label)
            } else {
                format!("I-{}", s.label)
            };
        }
    }
    Ok(tags)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Gold data: an `I-c` must continue a `B-c`/`I-c`, and every tag must be
    /// `O`, `B-c` or `I-c`.
    Strict,
    /// Predictions: an orphan `I-c` opens a span; unrecognized tags act as `O`.
    Lenient,
}

enum Tag<'a> {
    O,
    B(&'a str),
    I(&'a str),
    Bad,
}

fn parse_tag(t: &str) -> Tag<'_> {
    if t == "O" {
        return Tag::O;
    }
    match (t.strip_prefix("B-"), t.strip_prefix("I-")) {
        (Some(c), _) if !c.is_empty() => Tag::B(c),
        (_, Some(c)) if !c.is_empty() => Tag::I(c),
        _ => Tag::Bad,
    }
}

pub fn iob_decode<S: AsRef<str>>(tags: &[S], mode: DecodeMode) -> Result<Vec<Span>> {
    let mut spans = Vec::new();
    let mut open: Option<Span> = None;
    for (i, t) in tags.iter().enumerate() {
        match parse_tag(t.as_ref()) {
            Tag::O => spans.extend(open.take()),
            Tag::B(c) => {
                spans.extend(open.take());
                open = Some(Span::new(i, i, c));
            }
            Tag::I(c) => match open.as_mut() {
                Some(s) if s.label == c => s.end = i,
                _ => {
                    if mode == DecodeMode::Strict {
                        return Err(Error::Data(format!(
                            "ill-formed IOB at index {i}: {} does not continue a {c} span",
                            t.as_ref()
                        )));
                    }
                    spans.extend(open.take());
                    open = Some(Span::new(i, i, c));
                }
            },
            Tag::Bad => {
                if mode == DecodeMode::Strict {
                    return Err(Error::Data(format!("ill-formed IOB at index {i}: tag {:?}", t.as_ref())));
                }
                spans.extend(open.take());
            }
        }
    }
    spans.extend(open);
    Ok(spans)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub pred: usize,
    pub gold: usize,
}

impl Prf {
    /// Zero denominators give zero.
    pub fn from_counts(tp: usize, pred: usize, gold: usize) -> Self {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(tp, pred);
        let recall = ratio(tp, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
            tp,
            pred,
            gold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanF1Report {
    pub sentences: usize,
    pub micro: Prf,
    pub per_class: BTreeMap<String, Prf>,
}

impl SpanF1Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Micro-averaged exact-match F1. Each sentence's spans are compared as
/// sets, so a repeated span counts once.
pub fn exact_span_f1(gold: &[Vec<Span>], pred: &[Vec<Span>]) -> Result<SpanF1Report> {
    if gold.len() != pred.len() {
        return Err(Error::Shape(format!(
            "{} gold sentences but {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let mut counts: BTreeMap<String, [usize; 3]> = BTreeMap::new();
    for (g, p) in gold.iter().zip(pred) {
        let g: BTreeSet<&Span> = g.iter().collect();
        let p: BTreeSet<&Span> = p.iter().collect();
        for s in &g {
            counts.entry(s.label.clone()).or_default()[2] += 1;
        }
        for s in &p {
            let c = counts.entry(s.label.clone()).or_default();
            c[1] += 1;
            if g.contains(s) {
                c[0] += 1;
            }
        }
    }
    let per_class: BTreeMap<String, Prf> = counts
        .iter()
        .map(|(k, c)| (k.clone(), Prf::from_counts(c[0], c[1], c[2])))
        .collect();
    let total = counts.values().fold([0; 3], |a, c| [a[0] + c[0], a[1] + c[1], a[2] + c[2]]);
    Ok(SpanF1Report {
        sentences: gold.len(),
        micro: Prf::from_counts(total[0], total[1], total[2]),
        per_class,
    })
}

pub fn nli_accuracy<S: AsRef<str>>(gold: &[S], pred: &[S]) -> Result<f64> {
    if gold.len() != pred.len() {
        return Err(Error::Shape(format!("{} gold labels but {} predicted", gold.len(), pred.len())));
    }
    if gold.is_empty() {
        return Err(Error::Data("accuracy over an empty label set".into()));
    }
    let hits = gold.iter().zip(pred).filter(|(g, p)| g.as_ref() == p.as_ref()).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Parses `token<TAB>tag` lines with blank lines between sentences. The
/// token is everything before the last tab, so it may contain spaces.
pub fn parse_conll(text: &str, spec: &TaskSpec) -> Result<Vec<TaggedSentence>> {
    let labels: BTreeSet<String> = spec.labels().into_iter().collect();
    let mut out = Vec::new();
    let mut cur = TaggedSentence {
        tokens: vec![],
        tags: vec![],
    };
    let mut cur_start = 1;
    let finish = |cur: &mut TaggedSentence, out: &mut Vec<TaggedSentence>, line: usize| -> Result<()> {
        if cur.tokens.is_empty() {
            return Ok(());
        }
        iob_decode(&cur.tags, DecodeMode::Strict).map_err(|e| Error::Record {
            line,
            reason: e.to_string(),
        })?;
        out.push(std::mem::replace(
            cur,
            TaggedSentence {
                tokens: vec![],
                tags: vec![],
            },
        ));
        Ok(())
    };
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim_end_matches('\r');
        if l.trim().is_empty() {
            finish(&mut cur, &mut out, cur_start)?;
            continue;
        }
        if cur.tokens.is_empty() {
            cur_start = line;
        }
        let (tok, tag) = l.rsplit_once('\t').ok_or_else(|| Error::Record {
            line,
            reason: "expected token<TAB>tag".into(),
        })?;
        if tok.is_empty() || tag.is_empty() {
            return Err(Error::Record {
                line,
                reason: "empty token or tag".into(),
            });
        }
        if !labels.contains(tag) {
            return Err(Error::Record {
                line,
                reason: format!("unknown tag {tag:?} for task {}", spec.name),
            });
        }
        cur.tokens.push(tok.to_string());
        cur.tags.push(tag.to_string());
    }
    finish(&mut cur, &mut out, cur_start)?;
    Ok(out)
}

pub fn load_span_task(path: &Path, spec: &TaskSpec) -> Result<Vec<TaggedSentence>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_conll(&text, spec)
}

pub fn to_conll(sentences: &[TaggedSentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        for (t, g) in s.tokens.iter().zip(&s.tags) {
            out.push_str(t);
            out.push('\t');
            out.push_str(g);
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NliExample {
    pub premise: String,
    pub hypothesis: String,
    pub label: String,
}

pub fn parse_nli_tsv(text: &str, spec: &TaskSpec) -> Result<Vec<NliExample>> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .from_reader(text.as_bytes());
    let headers = rdr
        .headers()
        .map_err(|e| Error::Record {
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    let want = ["premise", "hypothesis", "label"];
    if headers.iter().collect::<Vec<_>>() != want {
        return Err(Error::Record {
            line: 1,
            reason: "header must be premise, hypothesis, label".into(),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Record {
            line: e.position().map_or(0, |p| p.line() as usize),
            reason: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != 3 {
            return Err(Error::Record {
                line,
                reason: format!("expected 3 columns, found {}", rec.len()),
            });
        }
        if spec.label_index(&rec[2]).is_none() {
            return Err(Error::Record {
                line,
                reason: format!("unknown label {:?}", &rec[2]),
            });
        }
        out.push(NliExample {
            premise: rec[0].to_string(),
            hypothesis: rec[1].to_string(),
            label: rec[2].to_string(),
        });
    }
    Ok(out)
}

pub fn load_nli_task(path: &Path, spec: &TaskSpec) -> Result<Vec<NliExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_nli_tsv(&text, spec)
}

pub fn to_nli_tsv(examples: &[NliExample]) -> String {
    let mut out = String::from("premise\thypothesis\tlabel\n");
    for e in examples {
        out.push_str(&format!("{}\t{}\t{}\n", e.premise, e.hypothesis, e.label));
    }
    out
}

/// Token-classification input. Only each word's first piece carries a label;
/// every other position is [`IGNORE`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanExample {
    pub encoded: Encoded,
    pub labels: Vec<i64>,
    /// Position of each word's first piece, `None` when truncated away.
    pub first_pieces: Vec<Option<usize>>,
    pub gold: Vec<Span>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqExample {
    pub encoded: Encoded,
    pub label: u32,
}

pub fn encode_span_sentence(
    sentence: &TaggedSentence,
    spec: &TaskSpec,
    vocab: &Vocab,
    lowercase: bool,
    max_len: usize,
) -> Result<SpanExample> {
    if sentence.tokens.len() != sentence.tags.len() {
        return Err(Error::Shape("tokens and tags differ in length".into()));
    }
    let gold = iob_decode(&sentence.tags, DecodeMode::Strict)?;
    let budget = max_len.saturating_sub(2);
    let mut ids: Vec<TokenId> = Vec::new();
    let mut first_pieces = Vec::with_capacity(sentence.tokens.len());
    let mut piece_labels = Vec::new();
    let mut truncated = false;
    for (tok, tag) in sentence.tokens.iter().zip(&sentence.tags) {
        let mut pieces = tokenize(tok, vocab, lowercase).ids;
        if pieces.is_empty() {
            pieces.push(vocab.specials().unk);
        }
        truncated |= ids.len() + pieces.len() > budget;
        if truncated {
            first_pieces.push(None);
            continue;
        }
        let label = spec
            .label_index(tag)
            .ok_or_else(|| Error::Data(format!("unknown tag {tag:?}")))? as i64;
        first_pieces.push(Some(ids.len() + 1));
        piece_labels.push(label);
        piece_labels.extend(std::iter::repeat_n(IGNORE, pieces.len() - 1));
        ids.extend(pieces);
    }
    let encoded = encode_for_model(&ids, None, vocab, max_len)?;
    let mut labels = vec![IGNORE; max_len];
    labels[1..1 + piece_labels.len()].copy_from_slice(&piece_labels);
    Ok(SpanExample {
        encoded,
        labels,
        first_pieces,
        gold,
    })
}

pub fn encode_nli(ex: &NliExample, spec: &TaskSpec, vocab: &Vocab, lowercase: bool, max_len: usize) -> Result<SeqExample> {
    let label = spec
        .label_index(&ex.label)
        .ok_or_else(|| Error::Data(format!("unknown label {:?}", ex.label)))? as u32;
    let a = tokenize(&ex.premise, vocab, lowercase).ids;
    let b = tokenize(&ex.hypothesis, vocab, lowercase).ids;
    Ok(SeqExample {
        encoded: encode_for_model(&a, Some(&b), vocab, max_len)?,
        label,
    })
}

/// Spans from per-position label indices: each word takes its first piece's
/// label, truncated words are `O`, then tags are decoded leniently.
pub fn spans_from_piece_labels(piece_labels: &[usize], first_pieces: &[Option<usize>], spec: &TaskSpec) -> Vec<Span> {
    let labels = spec.labels();
    let tags: Vec<&str> = first_pieces
        .iter()
        .map(|fp| match fp {
            Some(p) => labels.get(piece_labels[*p]).map_or("O", String::as_str),
            None => "O",
        })
        .collect();
    iob_decode(&tags, DecodeMode::Lenient).expect("lenient decoding is total")
}

pub fn batch_of(encoded: &[&Encoded]) -> Batch {
    Batch::from_rows(
        encoded
            .iter()
            .map(|e| (e.ids.as_slice(), e.segment_ids.as_slice(), e.attention_mask.as_slice())),
    )
}

fn check_head(model: &Model<f32>, spec: &TaskSpec) -> Result<()> {
    if model.head != spec.head() {
        return Err(Error::Config(format!(
            "model head {:?} does not serve task {} (needs {:?})",
            model.head,
            spec.name,
            spec.head()
        )));
    }
    Ok(())
}

pub fn predict_spans(model: &Model<f32>, examples: &[SpanExample], spec: &TaskSpec, batch_size: usize) -> Result<Vec<Vec<Span>>> {
    check_head(model, spec)?;
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch = batch_of(&chunk.iter().map(|e| &e.encoded).collect::<Vec<_>>());
        let HeadLogits::Token(logits) = forward(model, &batch, &[], Mode::Eval)?.logits else {
            unreachable!("token head yields token logits")
        };
        for (b, ex) in chunk.iter().enumerate() {
            let piece_labels: Vec<usize> = (0..batch.seq_len).map(|p| logits.argmax(b * batch.seq_len + p)).collect();
            out.push(spans_from_piece_labels(&piece_labels, &ex.first_pieces, spec));
        }
    }
    Ok(out)
}

pub fn predict_classes(model: &Model<f32>, examples: &[SeqExample], spec: &TaskSpec, batch_size: usize) -> Result<Vec<u32>> {
    check_head(model, spec)?;
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch = batch_of(&chunk.iter().map(|e| &e.encoded).collect::<Vec<_>>());
        let HeadLogits::Seq(logits) = forward(model, &batch, &[], Mode::Eval)?.logits else {
            unreachable!("sequence head yields sequence logits")
        };
        out.extend((0..chunk.len()).map(|b| logits.argmax(b) as u32));
    }
    Ok(out)
}

/// Accuracy of always predicting the most frequent training label.
pub fn majority_baseline(train: &[u32], eval: &[u32]) -> Result<f64> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &l in train {
        *counts.entry(l).or_default() += 1;
    }
    let (&majority, _) = counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .ok_or_else(|| Error::Data("empty training labels".into()))?;
    let pred = vec![majority; eval.len()];
    let g: Vec<String> = eval.iter().map(u32::to_string).collect();
    let p: Vec<String> = pred.iter().map(u32::to_string).collect();
    nli_accuracy(&g, &p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split(' ').map(String::from).collect()
    }

    #[test]
    fn appendix_example() {
        let tags = iob_encode(&[Span::new(3, 4, "Problem")], 6).unwrap();
        assert_eq!(tags, toks("O O O B-Problem I-Problem O"));
        let spans = iob_decode(&toks("O O O B-Problem I-Problem"), DecodeMode::Strict).unwrap();
        assert_eq!(spans, vec![Span::new(3, 4, "Problem")]);
    }

    #[test]
    fn encode_edge_cases() {
        assert_eq!(iob_encode(&[], 3).unwrap(), toks("O O O"));
        let t = iob_encode(&[Span::new(3, 3, "X"), Span::new(4, 5, "X")], 6).unwrap();
        assert_eq!(&t[3..], &toks("B-X B-X I-X")[..]);
        assert!(iob_encode(&[Span::new(1, 3, "X"), Span::new(3, 4, "Y")], 6).is_err());
        assert!(iob_encode(&[Span::new(4, 6, "X")], 6).is_err());
    }

    #[test]
    fn lenient_and_strict() {
        let tags = toks("O I-X O");
        assert_eq!(iob_decode(&tags, DecodeMode::Lenient).unwrap(), vec![Span::new(1, 1, "X")]);
        let err = iob_decode(&tags, DecodeMode::Strict).unwrap_err().to_string();
        assert!(err.contains("index 1"), "{err}");
        let mixed = toks("B-X I-Y I-Y ??? B-X");
        assert_eq!(
            iob_decode(&mixed, DecodeMode::Lenient).unwrap(),
            vec![Span::new(0, 0, "X"), Span::new(1, 2, "Y"), Span::new(4, 4, "X")]
        );
    }

    #[test]
    fn f1_examples() {
        let g = vec![vec![Span::new(3, 4, "Problem"), Span::new(6, 6, "Test")]];
        let p = vec![vec![Span::new(3, 4, "Problem"), Span::new(6, 7, "Test")]];
        let r = exact_span_f1(&g, &p).unwrap();
        assert_eq!((r.micro.tp, r.micro.precision, r.micro.recall, r.micro.f1), (1, 0.5, 0.5, 0.5));
        assert_eq!(r.per_class["Problem"].f1, 1.0);
        let same = exact_span_f1(&g, &g).unwrap();
        assert_eq!(same.micro.f1, 1.0);
        let empty = exact_span_f1(&g, &[vec![]]).unwrap();
        assert_eq!((empty.micro.precision, empty.micro.recall, empty.micro.f1), (0.0, 0.0, 0.0));
        assert!(exact_span_f1(&g, &[]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let a = ["entailment", "neutral", "contradiction", "neutral"];
        assert_eq!(nli_accuracy(&a, &a).unwrap(), 1.0);
        let b = ["neutral", "entailment", "neutral", "contradiction"];
        assert_eq!(nli_accuracy(&a, &b).unwrap(), 0.0);
        let c = ["entailment", "neutral", "neutral", "entailment"];
        assert_eq!(nli_accuracy(&a, &c).unwrap(), 0.5);
        assert!(nli_accuracy(&a[..2], &c).is_err());
    }

    #[test]
    fn label_dims() {
        assert_eq!(TaskSpec::clinical_ner().label_dim(), 7);
        assert_eq!(TaskSpec::nli().label_dim(), 3);
        assert_eq!(TaskSpec::clinical_ner().labels()[3], "B-Test");
    }

    #[test]
    fn conll_loading() {
        let spec = TaskSpec::clinical_ner();
        let text = "The\tO\nfever\tB-Problem\n\nA\tO\nCT scan\tB-Test\n\n";
        let s = parse_conll(text, &spec).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].tokens[1], "CT scan");
        let bogus = "The\tO\nthing\tB-Bogus\n";
        match parse_conll(bogus, &spec) {
            Err(Error::Record { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_conll("word\n", &spec), Err(Error::Record { line: 1, .. })));
        assert!(matches!(parse_conll("a\tO\nb\tI-Test\n", &spec), Err(Error::Record { line: 1, .. })));
    }

    #[test]
    fn nli_tsv_round_trip() {
        let spec = TaskSpec::nli();
        let ex = vec![NliExample {
            premise: "pt has fever .".into(),
            hypothesis: "pt is febrile .".into(),
            label: "entailment".into(),
        }];
        let tsv = to_nli_tsv(&ex);
        assert_eq!(parse_nli_tsv(&tsv, &spec).unwrap(), ex);
        assert!(parse_nli_tsv("premise\thypothesis\tlabel\na\tb\tmaybe\n", &spec).is_err());
        assert!(parse_nli_tsv("p\th\tl\n", &spec).is_err());
    }

    #[test]
    fn first_piece_rule() {
        let spec = TaskSpec::clinical_ner();
        // Word 1 covers piece positions 2..=4; only position 2 is read.
        let first = vec![Some(1), Some(2), Some(5)];
        let mut piece = vec![0; 7];
        piece[2] = 1;
        piece[3] = 0;
        piece[4] = 3;
        piece[5] = 2;
        assert_eq!(
            spans_from_piece_labels(&piece, &first, &spec),
            vec![Span::new(1, 2, "Problem")]
        );
        assert!(spans_from_piece_labels(&[0; 7], &first, &spec).is_empty());
    }

    #[test]
    fn span_encoding_labels_first_pieces() {
        let mut t: Vec<String> = crate::tokenizer::SPECIALS.iter().map(|s| s.to_string()).collect();
        t.extend(["the", "fe", "##v", "##er", "."].map(String::from));
        let vocab = Vocab::from_tokens(t).unwrap();
        let spec = TaskSpec::clinical_ner();
        let s = TaggedSentence {
            tokens: toks("the fever ."),
            tags: toks("O B-Problem O"),
        };
        let ex = encode_span_sentence(&s, &spec, &vocab, false, 10).unwrap();
        assert_eq!(ex.first_pieces, vec![Some(1), Some(2), Some(5)]);
        assert_eq!(&ex.labels[..7], &[IGNORE, 0, 1, IGNORE, IGNORE, 0, IGNORE]);
        let short = encode_span_sentence(&s, &spec, &vocab, false, 5).unwrap();
        assert_eq!(short.first_pieces, vec![Some(1), None, None]);
    }

    #[test]
    fn majority() {
        let acc = majority_baseline(&[0, 1, 1, 2], &[1, 0, 2, 1]).unwrap();
        assert_eq!(acc, 0.5);
    }
}
