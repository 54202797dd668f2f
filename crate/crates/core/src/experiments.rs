//! Synthetic end-to-end experiments.
//!
//! Each experiment generates its corpora and tasks from one seed, trains,
//! writes its artifacts into a directory and returns raw metrics. Pass/fail
//! thresholds belong to the caller. Artifacts carry no wall times, so two
//! runs with one seed produce byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{parse_note, NoteCollection};
use crate::deid::SurrogatePolicy;
use crate::hashing::stable_u64;
use crate::model::{Checkpoint, ModelConfig};
use crate::pretrain_data::{build_documents, create_instances, MlmInstance, PretrainConfig};
use crate::probe::{nearest_neighbors, ProbeMode};
use crate::synth::{
    clinical_corpus, general_corpus, memorization_corpus, ner_sentences, nli_examples, phi_sentences,
    sentinel_corpus, surrogate_sentences, synonym_corpus, EntityPool, Theme, SYNONYM_PAIRS,
};
use crate::tasks::{
    encode_nli, encode_span_sentence, exact_span_f1, majority_baseline, predict_spans, NliExample, SeqExample,
    SpanExample, TaggedSentence, TaskKind, TaskSpec,
};
use crate::tokenizer::{train_vocab, Vocab, VocabConfig};
use crate::training::{
    accuracy, continue_pretrain, dev_split, evaluate_mlm, finetune, pretrain, FinetuneData, FinetuneGrid,
    FinetuneOutcome, MetricsLog, PretrainRun,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Small full pipeline; the determinism check.
    Smoke,
    Memorization,
    DomainAdaptation,
    DeidShift,
    NliSanity,
    Synonyms,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::Smoke,
        ExperimentKind::Memorization,
        ExperimentKind::DomainAdaptation,
        ExperimentKind::DeidShift,
        ExperimentKind::NliSanity,
        ExperimentKind::Synonyms,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Smoke => "smoke",
            ExperimentKind::Memorization => "memorization",
            ExperimentKind::DomainAdaptation => "domain_adaptation",
            ExperimentKind::DeidShift => "deid_shift",
            ExperimentKind::NliSanity => "nli_sanity",
            ExperimentKind::Synonyms => "synonyms",
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| {
                let names: Vec<_> = ExperimentKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown experiment {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// Pretraining settings shared by the experiments. Seeds are derived from
/// the experiment seed; the vocabulary size comes from the trained vocab.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budget {
    pub model: ModelConfig,
    pub max_seq_len: usize,
    pub dup_factor: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub log_every: usize,
}

impl Default for Budget {
    /// Desk model and the pretraining rate used by the directional
    /// experiments.
    fn default() -> Self {
        Budget {
            model: ModelConfig::default(),
            max_seq_len: 32,
            dup_factor: 5,
            steps: 1000,
            batch_size: 32,
            lr: 1e-3,
            warmup_fraction: 0.1,
            log_every: 100,
        }
    }
}

impl Budget {
    fn data(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            max_seq_len: self.max_seq_len,
            dup_factor: self.dup_factor,
            seed,
            ..PretrainConfig::default()
        }
    }

    fn run(&self, vocab: &Vocab, steps: usize, seed: u64) -> PretrainRun {
        PretrainRun {
            model: ModelConfig {
                vocab_size: vocab.len(),
                ..self.model.clone()
            },
            data: self.data(seed),
            steps,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup_fraction: self.warmup_fraction,
            seed,
            log_every: self.log_every,
            ..PretrainRun::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmokeConfig {
    pub notes: usize,
    pub sentences_per_section: usize,
    pub pretrain: Budget,
    pub task_examples: usize,
    pub grid: FinetuneGrid,
}

impl Default for SmokeConfig {
    fn default() -> Self {
        SmokeConfig {
            notes: 8,
            sentences_per_section: 3,
            pretrain: Budget {
                model: ModelConfig {
                    layers: 2,
                    hidden: 32,
                    heads: 2,
                    ff_dim: 64,
                    max_positions: 64,
                    ..ModelConfig::default()
                },
                dup_factor: 2,
                steps: 20,
                batch_size: 8,
                log_every: 5,
                ..Budget::default()
            },
            task_examples: 80,
            grid: FinetuneGrid {
                lrs: vec![5e-5],
                batch_sizes: vec![16],
                epochs: vec![1, 2],
                max_seq_len: 64,
                ..FinetuneGrid::paper(TaskKind::SpanLabeling)
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemorizationConfig {
    pub sentences: usize,
    pub pretrain: Budget,
}

impl Default for MemorizationConfig {
    /// 64 sentences, desk model, 2,000 steps at 5e-5 with batch 32.
    fn default() -> Self {
        MemorizationConfig {
            sentences: 64,
            pretrain: Budget {
                steps: 2000,
                lr: 5e-5,
                log_every: 200,
                ..Budget::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainAdaptationConfig {
    pub general_notes: usize,
    pub clinical_notes: usize,
    pub sentences_per_section: usize,
    /// General-domain pretraining shared by both arms.
    pub pretrain: Budget,
    /// Further steps per arm: general text for the baseline, clinical text
    /// for the adapted model.
    pub continue_steps: usize,
    pub train_examples: usize,
    pub test_examples: usize,
    pub grid: FinetuneGrid,
    pub repeats: usize,
}

impl Default for DomainAdaptationConfig {
    fn default() -> Self {
        DomainAdaptationConfig {
            general_notes: 400,
            clinical_notes: 100,
            sentences_per_section: 10,
            pretrain: Budget::default(),
            continue_steps: 1000,
            train_examples: 3000,
            test_examples: 600,
            grid: FinetuneGrid::single(5e-5, 16, 4),
            repeats: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeidShiftConfig {
    pub notes: usize,
    pub sentences_per_section: usize,
    pub pretrain: Budget,
    pub train_examples: usize,
    pub test_examples: usize,
    pub grid: FinetuneGrid,
    pub repeats: usize,
}

impl Default for DeidShiftConfig {
    fn default() -> Self {
        DeidShiftConfig {
            notes: 100,
            sentences_per_section: 10,
            pretrain: Budget::default(),
            train_examples: 1500,
            test_examples: 600,
            grid: FinetuneGrid::single(5e-5, 16, 4),
            repeats: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NliSanityConfig {
    pub notes: usize,
    pub sentences_per_section: usize,
    pub pretrain: Budget,
    pub train_examples: usize,
    pub test_examples: usize,
    pub grid: FinetuneGrid,
}

impl Default for NliSanityConfig {
    fn default() -> Self {
        NliSanityConfig {
            notes: 100,
            sentences_per_section: 10,
            pretrain: Budget::default(),
            train_examples: 8000,
            test_examples: 600,
            grid: FinetuneGrid::paper(TaskKind::Nli),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynonymsConfig {
    pub notes: usize,
    pub pretrain: Budget,
    pub k: usize,
}

impl Default for SynonymsConfig {
    fn default() -> Self {
        SynonymsConfig {
            notes: 200,
            pretrain: Budget::default(),
            k: 3,
        }
    }
}

/// One experiment with its settings; serialized with a `kind` tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExperimentConfig {
    Smoke(SmokeConfig),
    Memorization(MemorizationConfig),
    DomainAdaptation(DomainAdaptationConfig),
    DeidShift(DeidShiftConfig),
    NliSanity(NliSanityConfig),
    Synonyms(SynonymsConfig),
}

impl ExperimentConfig {
    pub fn default_for(kind: ExperimentKind) -> Self {
        match kind {
            ExperimentKind::Smoke => ExperimentConfig::Smoke(SmokeConfig::default()),
            ExperimentKind::Memorization => ExperimentConfig::Memorization(MemorizationConfig::default()),
            ExperimentKind::DomainAdaptation => ExperimentConfig::DomainAdaptation(DomainAdaptationConfig::default()),
            ExperimentKind::DeidShift => ExperimentConfig::DeidShift(DeidShiftConfig::default()),
            ExperimentKind::NliSanity => ExperimentConfig::NliSanity(NliSanityConfig::default()),
            ExperimentKind::Synonyms => ExperimentConfig::Synonyms(SynonymsConfig::default()),
        }
    }

    pub fn kind(&self) -> ExperimentKind {
        match self {
            ExperimentConfig::Smoke(_) => ExperimentKind::Smoke,
            ExperimentConfig::Memorization(_) => ExperimentKind::Memorization,
            ExperimentConfig::DomainAdaptation(_) => ExperimentKind::DomainAdaptation,
            ExperimentConfig::DeidShift(_) => ExperimentKind::DeidShift,
            ExperimentConfig::NliSanity(_) => ExperimentKind::NliSanity,
            ExperimentConfig::Synonyms(_) => ExperimentKind::Synonyms,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |what: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{what} must be positive")))
            } else {
                Ok(())
            }
        };
        let budget = |b: &Budget| -> Result<()> {
            b.model.validate()?;
            positive("pretraining steps", b.steps)?;
            positive("batch_size", b.batch_size)?;
            if b.max_seq_len > b.model.max_positions {
                return Err(Error::Config("max_seq_len exceeds max_positions".into()));
            }
            Ok(())
        };
        match self {
            ExperimentConfig::Smoke(c) => {
                budget(&c.pretrain)?;
                positive("notes", c.notes)?;
                positive("task_examples", c.task_examples)?;
                c.grid.validate()
            }
            ExperimentConfig::Memorization(c) => {
                budget(&c.pretrain)?;
                positive("sentences", c.sentences)
            }
            ExperimentConfig::DomainAdaptation(c) => {
                budget(&c.pretrain)?;
                positive("general_notes", c.general_notes)?;
                positive("clinical_notes", c.clinical_notes)?;
                positive("train_examples", c.train_examples)?;
                positive("test_examples", c.test_examples)?;
                positive("repeats", c.repeats)?;
                c.grid.validate()
            }
            ExperimentConfig::DeidShift(c) => {
                budget(&c.pretrain)?;
                positive("notes", c.notes)?;
                positive("train_examples", c.train_examples)?;
                positive("test_examples", c.test_examples)?;
                positive("repeats", c.repeats)?;
                c.grid.validate()
            }
            ExperimentConfig::NliSanity(c) => {
                budget(&c.pretrain)?;
                positive("train_examples", c.train_examples)?;
                positive("test_examples", c.test_examples)?;
                c.grid.validate()
            }
            ExperimentConfig::Synonyms(c) => {
                budget(&c.pretrain)?;
                positive("notes", c.notes)?;
                positive("k", c.k)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    /// Artifact file names relative to the output directory, in write order.
    pub artifacts: Vec<String>,
}

impl ExperimentReport {
    pub fn metric(&self, name: &str) -> Result<f64> {
        self.metrics
            .get(name)
            .copied()
            .ok_or_else(|| Error::Data(format!("experiment report has no metric {name:?}")))
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("# {} (seed {})\n\n| metric | value |\n|---|---|\n", self.experiment.name(), self.seed);
        for (k, v) in &self.metrics {
            let _ = writeln!(out, "| {k} | {v:.6} |");
        }
        out
    }
}

/// Output directory that remembers what was written.
struct Artifacts {
    dir: PathBuf,
    written: Vec<String>,
}

impl Artifacts {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Artifacts {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn text(&mut self, name: &str, content: &str) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, content).map_err(|e| Error::io(&path, e))?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn checkpoint(&mut self, name: &str, ck: &Checkpoint) -> Result<()> {
        ck.save(&self.dir.join(name))?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn metrics(&mut self, name: &str, log: &MetricsLog) -> Result<()> {
        self.text(name, &log.to_csv())
    }
}

/// Seed for one named stage of an experiment.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    stable_u64(&[b"experiment", stage.as_bytes(), &seed.to_le_bytes()])
}

/// Runs `config` with `seed`, writing artifacts plus `report.json` and
/// `report.md` into `out_dir`.
pub fn run_experiment(config: &ExperimentConfig, seed: u64, out_dir: &Path) -> Result<ExperimentReport> {
    config.validate()?;
    let mut art = Artifacts::new(out_dir)?;
    let metrics = match config {
        ExperimentConfig::Smoke(c) => smoke(c, seed, &mut art)?,
        ExperimentConfig::Memorization(c) => memorization(c, seed, &mut art)?,
        ExperimentConfig::DomainAdaptation(c) => domain_adaptation(c, seed, &mut art)?,
        ExperimentConfig::DeidShift(c) => deid_shift(c, seed, &mut art)?,
        ExperimentConfig::NliSanity(c) => nli_sanity(c, seed, &mut art)?,
        ExperimentConfig::Synonyms(c) => synonyms(c, seed, &mut art)?,
    };
    let mut report = ExperimentReport {
        experiment: config.kind(),
        seed,
        metrics,
        artifacts: Vec::new(),
    };
    art.written.push("report.json".into());
    art.written.push("report.md".into());
    report.artifacts = art.written.clone();
    art.text("report.md", &report.to_markdown())?;
    art.text("report.json", &serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

fn sentences_of(collection: &NoteCollection) -> Vec<String> {
    collection
        .notes
        .iter()
        .flat_map(|n| parse_note(n).sentences)
        .map(|s| s.text)
        .collect()
}

fn vocab_for(collections: &[&NoteCollection], art: &mut Artifacts) -> Result<Vocab> {
    let sentences: Vec<String> = collections.iter().flat_map(|c| sentences_of(c)).collect();
    let vocab = train_vocab(&sentences, &VocabConfig::default())?;
    art.text("vocab.txt", &vocab.to_file_string())?;
    Ok(vocab)
}

fn instances(collection: &NoteCollection, vocab: &Vocab, data: &PretrainConfig) -> Result<Vec<MlmInstance>> {
    create_instances(&build_documents(collection, vocab, false).documents, vocab, data)
}

fn encode_spans(sentences: &[TaggedSentence], spec: &TaskSpec, vocab: &Vocab, max_len: usize) -> Result<Vec<SpanExample>> {
    sentences
        .iter()
        .map(|s| encode_span_sentence(s, spec, vocab, false, max_len))
        .collect()
}

fn encode_pairs(examples: &[NliExample], spec: &TaskSpec, vocab: &Vocab, max_len: usize) -> Result<Vec<SeqExample>> {
    examples.iter().map(|e| encode_nli(e, spec, vocab, false, max_len)).collect()
}

fn span_split(examples: Vec<SpanExample>) -> FinetuneData {
    let (train, dev) = dev_split(examples);
    FinetuneData::Span { train, dev }
}

fn test_f1(outcome: &FinetuneOutcome, spec: &TaskSpec, test: &[SpanExample]) -> Result<f64> {
    let pred = predict_spans(&outcome.best.model, test, spec, 64)?;
    let gold: Vec<_> = test.iter().map(|e| e.gold.clone()).collect();
    Ok(exact_span_f1(&gold, &pred)?.micro.f1)
}

fn write_grid(art: &mut Artifacts, stem: &str, outcome: &FinetuneOutcome) -> Result<()> {
    let report = outcome.report.without_timing();
    art.text(&format!("{stem}_grid.json"), &report.to_json()?)?;
    art.text(&format!("{stem}_grid.md"), &report.to_markdown())?;
    art.metrics(&format!("{stem}_metrics.csv"), &outcome.log)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn smoke(c: &SmokeConfig, seed: u64, art: &mut Artifacts) -> Result<BTreeMap<String, f64>> {
    let corpus = clinical_corpus(c.notes, c.sentences_per_section, stage_seed(seed, "corpus"));
    let vocab = vocab_for(&[&corpus], art)?;
    let run = c.pretrain.run(&vocab, c.pretrain.steps, stage_seed(seed, "pretrain"));
    let inst = instances(&corpus, &vocab, &run.data)?;
    let out = pretrain(&run, &vocab.fingerprint(), &inst, &inst, &mut |_| Ok(()))?;
    art.checkpoint("pretrain.ckpt", &out.checkpoint)?;
    art.metrics("pretrain_metrics.csv", &out.log)?;

    let spec = TaskSpec::clinical_ner();
    let max_len = c.grid.max_seq_len;
    let sents = ner_sentences(Theme::Clinical, c.task_examples, stage_seed(seed, "task"), EntityPool::All);
    let data = span_split(encode_spans(&sents, &spec, &vocab, max_len)?);
    let ft = finetune(&spec, &data, &out.checkpoint, &c.grid, stage_seed(seed, "finetune"))?;
    art.checkpoint("finetune.ckpt", &ft.best)?;
    write_grid(art, "finetune", &ft)?;

    let mut m = BTreeMap::new();
    m.insert("pretrain_final_loss".into(), out.log.last("train_loss").unwrap_or(f64::NAN));
    m.insert("finetune_dev_f1".into(), ft.report.rows[ft.report.best].dev_metric);
    Ok(m)
}

fn memorization(c: &MemorizationConfig, seed: u64, art: &mut Artifacts) -> Result<BTreeMap<String, f64>> {
    let corpus = memorization_corpus(c.sentences, stage_seed(seed, "corpus"));
    let vocab = vocab_for(&[&corpus], art)?;
    let run = c.pretrain.run(&vocab, c.pretrain.steps, stage_seed(seed, "pretrain"));
    let inst = instances(&corpus, &vocab, &run.data)?;
    // held-in: the logged accuracy is measured on the training instances
    let out = pretrain(&run, &vocab.fingerprint(), &inst, &inst, &mut |_| Ok(()))?;
    art.checkpoint("memorization.ckpt", &out.checkpoint)?;
    art.metrics("memorization_metrics.csv", &out.log)?;
    let held_in = evaluate_mlm(&out.checkpoint.model, &inst, c.pretrain.batch_size)?;
    let mut m = BTreeMap::new();
    m.insert("sentences".into(), c.sentences as f64);
    m.insert("instances".into(), inst.len() as f64);
    m.insert("masked_tokens".into(), held_in.masked as f64);
    m.insert("held_in_mlm_accuracy".into(), held_in.mlm_accuracy);
    m.insert("held_in_mlm_loss".into(), held_in.mlm_loss);
    Ok(m)
}

fn domain_adaptation(c: &DomainAdaptationConfig, seed: u64, art: &mut Artifacts) -> Result<BTreeMap<String, f64>> {
    let general = general_corpus(c.general_notes, c.sentences_per_section, stage_seed(seed, "general"));
    let clinical = clinical_corpus(c.clinical_notes, c.sentences_per_section, stage_seed(seed, "clinical"));
    let clinical_heldout = clinical_corpus(
        (c.clinical_notes / 10).max(1),
        c.sentences_per_section,
        stage_seed(seed, "clinical-heldout"),
    );
    let vocab = vocab_for(&[&general, &clinical], art)?;
    let fp = vocab.fingerprint();
    let b = &c.pretrain;
    let data = b.data(stage_seed(seed, "instances"));
    let general_inst = instances(&general, &vocab, &data)?;
    let clinical_inst = instances(&clinical, &vocab, &data)?;
    let heldout = instances(&clinical_heldout, &vocab, &data)?;

    let base = pretrain(&b.run(&vocab, b.steps, stage_seed(seed, "base")), &fp, &general_inst, &heldout, &mut |_| Ok(()))?;
    art.checkpoint("general_base.ckpt", &base.checkpoint)?;
    art.metrics("general_base_metrics.csv", &base.log)?;
    let cont = b.run(&vocab, c.continue_steps, stage_seed(seed, "continue"));
    let arms = [
        ("general", &general_inst),
        ("clinical", &clinical_inst),
    ];
    let mut bases = Vec::new();
    for (name, inst) in arms {
        let out = continue_pretrain(&base.checkpoint, &cont, &fp, inst, &heldout, &mut |_| Ok(()))?;
        art.checkpoint(&format!("{name}_continued.ckpt"), &out.checkpoint)?;
        art.metrics(&format!("{name}_continued_metrics.csv"), &out.log)?;
        bases.push((name, out));
    }

    let spec = TaskSpec::clinical_ner();
    let max_len = c.grid.max_seq_len;
    let train = ner_sentences(Theme::Clinical, c.train_examples, stage_seed(seed, "ner-train"), EntityPool::Seen);
    let test = ner_sentences(Theme::Clinical, c.test_examples, stage_seed(seed, "ner-test"), EntityPool::Heldout);
    let data = span_split(encode_spans(&train, &spec, &vocab, max_len)?);
    let test = encode_spans(&test, &spec, &vocab, max_len)?;

    let mut m = BTreeMap::new();
    for (name, out) in &bases {
        let mlm = evaluate_mlm(&out.checkpoint.model, &heldout, b.batch_size)?;
        m.insert(format!("{name}_clinical_heldout_mlm_loss"), mlm.mlm_loss);
        let mut f1s = Vec::new();
        for r in 0..c.repeats {
            let ft = finetune(&spec, &data, &out.checkpoint, &c.grid, stage_seed(seed, &format!("finetune-{r}")))?;
            write_grid(art, &format!("{name}_ner_{r}"), &ft)?;
            let f1 = test_f1(&ft, &spec, &test)?;
            m.insert(format!("{name}_test_f1_{r}"), f1);
            f1s.push(f1);
        }
        m.insert(format!("{name}_test_f1_mean"), mean(&f1s));
    }
    m.insert("f1_gain".into(), m["clinical_test_f1_mean"] - m["general_test_f1_mean"]);
    Ok(m)
}

fn deid_shift(c: &DeidShiftConfig, seed: u64, art: &mut Artifacts) -> Result<BTreeMap<String, f64>> {
    let corpus = sentinel_corpus(c.notes, c.sentences_per_section, stage_seed(seed, "corpus"));
    let vocab = vocab_for(&[&corpus], art)?;
    let run = c.pretrain.run(&vocab, c.pretrain.steps, stage_seed(seed, "pretrain"));
    let inst = instances(&corpus, &vocab, &run.data)?;
    let base = pretrain(&run, &vocab.fingerprint(), &inst, &[], &mut |_| Ok(()))?;
    art.checkpoint("sentinel_pretrain.ckpt", &base.checkpoint)?;
    art.metrics("sentinel_pretrain_metrics.csv", &base.log)?;

    let spec = TaskSpec::phi();
    let max_len = c.grid.max_seq_len;
    let train = phi_sentences(c.train_examples, stage_seed(seed, "phi-train"));
    let sentinel_test = phi_sentences(c.test_examples, stage_seed(seed, "phi-test"));
    let policy = SurrogatePolicy {
        seed: stage_seed(seed, "surrogates"),
        ..SurrogatePolicy::default()
    };
    let surrogate_test = surrogate_sentences(&sentinel_test, &policy)?;
    let data = span_split(encode_spans(&train, &spec, &vocab, max_len)?);
    let sentinel_test = encode_spans(&sentinel_test, &spec, &vocab, max_len)?;
    let surrogate_test = encode_spans(&surrogate_test, &spec, &vocab, max_len)?;

    let mut m = BTreeMap::new();
    let (mut s1, mut s2) = (Vec::new(), Vec::new());
    for r in 0..c.repeats {
        let ft = finetune(&spec, &data, &base.checkpoint, &c.grid, stage_seed(seed, &format!("finetune-{r}")))?;
        write_grid(art, &format!("phi_{r}"), &ft)?;
        let a = test_f1(&ft, &spec, &sentinel_test)?;
        let b = test_f1(&ft, &spec, &surrogate_test)?;
        m.insert(format!("sentinel_test_f1_{r}"), a);
        m.insert(format!("surrogate_test_f1_{r}"), b);
        s1.push(a);
        s2.push(b);
    }
    m.insert("sentinel_test_f1_mean".into(), mean(&s1));
    m.insert("surrogate_test_f1_mean".into(), mean(&s2));
    m.insert("f1_drop".into(), mean(&s1) - mean(&s2));
    Ok(m)
}

fn nli_sanity(c: &NliSanityConfig, seed: u64, art: &mut Artifacts) -> Result<BTreeMap<String, f64>> {
    let corpus = clinical_corpus(c.notes, c.sentences_per_section, stage_seed(seed, "corpus"));
    let vocab = vocab_for(&[&corpus], art)?;
    let run = c.pretrain.run(&vocab, c.pretrain.steps, stage_seed(seed, "pretrain"));
    let inst = instances(&corpus, &vocab, &run.data)?;
    let base = pretrain(&run, &vocab.fingerprint(), &inst, &[], &mut |_| Ok(()))?;
    art.checkpoint("clinical_pretrain.ckpt", &base.checkpoint)?;
    art.metrics("clinical_pretrain_metrics.csv", &base.log)?;

    let spec = TaskSpec::nli();
    let max_len = c.grid.max_seq_len;
    let train = encode_pairs(&nli_examples(Theme::Clinical, c.train_examples, stage_seed(seed, "nli-train")), &spec, &vocab, max_len)?;
    let test = encode_pairs(&nli_examples(Theme::Clinical, c.test_examples, stage_seed(seed, "nli-test")), &spec, &vocab, max_len)?;
    let (train, dev) = dev_split(train);
    let train_labels: Vec<u32> = train.iter().map(|e| e.label).collect();
    let test_labels: Vec<u32> = test.iter().map(|e| e.label).collect();
    let baseline = majority_baseline(&train_labels, &test_labels)?;
    let ft = finetune(&spec, &FinetuneData::Nli { train, dev }, &base.checkpoint, &c.grid, stage_seed(seed, "finetune"))?;
    art.checkpoint("nli_best.ckpt", &ft.best)?;
    write_grid(art, "nli", &ft)?;

    let mut m = BTreeMap::new();
    m.insert("grid_cells".into(), ft.report.rows.len() as f64);
    m.insert("best_cell".into(), ft.report.best as f64);
    m.insert("best_dev_accuracy".into(), ft.report.rows[ft.report.best].dev_metric);
    m.insert("test_accuracy".into(), accuracy(&ft.best.model, &spec, &test)?);
    m.insert("majority_baseline_accuracy".into(), baseline);
    Ok(m)
}

fn synonyms(c: &SynonymsConfig, seed: u64, art: &mut Artifacts) -> Result<BTreeMap<String, f64>> {
    let corpus = synonym_corpus(c.notes, stage_seed(seed, "corpus"));
    let vocab = vocab_for(&[&corpus], art)?;
    let run = c.pretrain.run(&vocab, c.pretrain.steps, stage_seed(seed, "pretrain"));
    let inst = instances(&corpus, &vocab, &run.data)?;
    let out = pretrain(&run, &vocab.fingerprint(), &inst, &[], &mut |_| Ok(()))?;
    art.checkpoint("synonyms.ckpt", &out.checkpoint)?;
    art.metrics("synonyms_metrics.csv", &out.log)?;
    let mut m = BTreeMap::new();
    let mut found = 0usize;
    let mut table = String::new();
    for (a, b) in SYNONYM_PAIRS {
        for (q, partner) in [(a, b), (b, a)] {
            let r = nearest_neighbors(&out.checkpoint.model, &vocab, q, c.k, ProbeMode::Static, None, false)?;
            let rank = r.neighbors.iter().position(|n| n.word == partner);
            found += usize::from(rank.is_some());
            m.insert(format!("{q}_partner_rank"), rank.map_or(0.0, |i| (i + 1) as f64));
            table.push_str(&r.to_table());
            table.push('\n');
        }
    }
    art.text("neighbors.txt", &table)?;
    m.insert("pairs_in_top_k".into(), found as f64 / (2 * SYNONYM_PAIRS.len()) as f64);
    Ok(m)
}
