//! Declarative pipeline behind the `notebert` command line.
//!
//! A [`PipelineConfig`] names every path and embeds each stage's settings.
//! Each command checks its inputs, writes its artifacts and records a
//! [`RunManifest`] holding the effective config, the seed and the hashes of
//! every file read or written. Relative paths resolve against the directory
//! of the config file.
//!
//! The global `seed` drives every stage: `seed` fields nested in stage
//! settings are replaced by values derived from it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{filter_by_note_type, ingest_notes, note_type_stats, parse_note, NoteCollection, NoteFormat};
use crate::deid::{alignment_jsonl, corpus_prevalence, surrogate_substitute, ConsistencyScope, Lexicons, SentinelPattern, SurrogatePolicy};
use crate::experiments::{run_experiment, stage_seed, ExperimentConfig, ExperimentKind};
use crate::hashing::{sha256_file, sha256_hex};
use crate::model::Checkpoint;
use crate::pretrain_data::{build_documents, create_instances, read_instances_binary, write_instances_binary, PretrainConfig};
use crate::probe::{nearest_neighbors, ProbeMode};
use crate::synth::{
    clinical_corpus, general_corpus, memorization_corpus, sentinel_corpus, synonym_corpus, synth_task_gen, Theme,
};
use crate::tasks::{
    encode_nli, encode_span_sentence, exact_span_f1, load_nli_task, load_span_task, predict_classes, predict_spans,
    TaskKind, TaskSpec,
};
use crate::tokenizer::{train_vocab, Vocab, VocabConfig};
use crate::training::{continue_pretrain, dev_split, finetune, pretrain, FinetuneData, FinetuneGrid, Init, PretrainRun};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Overrides `paths.reports` when set.
pub const REPORT_DIR_ENV: &str = "NOTEBERT_REPORT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Raw notes; CSV when the extension is `.csv`, JSON Lines otherwise.
    pub notes: PathBuf,
    /// Raw notes for continued pretraining; `None` continues on `notes`.
    pub continue_notes: Option<PathBuf>,
    /// Task files: CoNLL for span tasks, TSV for NLI. Defaults follow the
    /// task kind.
    pub task_train: Option<PathBuf>,
    /// `None` splits a dev set off the training file by index hash.
    pub task_dev: Option<PathBuf>,
    pub task_test: Option<PathBuf>,
    pub work: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            notes: "data/notes.jsonl".into(),
            continue_notes: None,
            task_train: None,
            task_dev: None,
            task_test: None,
            work: "work".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusStage {
    /// `None` picks the format from the file extension.
    pub format: Option<NoteFormat>,
    pub strict: bool,
    /// Keeps only these note types; empty keeps all.
    pub note_types: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointChoice {
    Pretrained,
    Continued,
    Finetuned,
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinueStage {
    pub base: CheckpointChoice,
    /// Other run settings come from `pretrain`.
    pub steps: usize,
}

impl Default for ContinueStage {
    fn default() -> Self {
        ContinueStage {
            base: CheckpointChoice::Pretrained,
            steps: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneStage {
    pub task: TaskSpec,
    pub base: CheckpointChoice,
    pub grid: FinetuneGrid,
}

impl Default for FinetuneStage {
    fn default() -> Self {
        FinetuneStage {
            task: TaskSpec::clinical_ner(),
            base: CheckpointChoice::Pretrained,
            grid: FinetuneGrid::paper(TaskKind::SpanLabeling),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeidStage {
    pub date_shift_days: i64,
    pub scope: ConsistencyScope,
    pub pattern: SentinelPattern,
    /// Directory of surrogate lexicon files; `None` uses the shipped lists.
    pub lexicon_dir: Option<PathBuf>,
}

impl Default for DeidStage {
    fn default() -> Self {
        DeidStage {
            date_shift_days: 30,
            scope: ConsistencyScope::PerNote,
            pattern: SentinelPattern::default(),
            lexicon_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeStage {
    pub checkpoint: CheckpointChoice,
    pub queries: Vec<String>,
    pub k: usize,
    pub mode: ProbeMode,
}

impl Default for ProbeStage {
    fn default() -> Self {
        ProbeStage {
            checkpoint: CheckpointChoice::Pretrained,
            queries: Vec::new(),
            k: 10,
            mode: ProbeMode::Static,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthCorpus {
    Clinical,
    General,
    Sentinel,
    Memorization,
    Synonyms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthStage {
    pub corpus: SynthCorpus,
    /// Written to `paths.continue_notes` when that path is set.
    pub continue_corpus: SynthCorpus,
    pub notes: usize,
    pub sentences_per_section: usize,
    pub theme: Theme,
    pub train_examples: usize,
    pub test_examples: usize,
}

impl Default for SynthStage {
    fn default() -> Self {
        SynthStage {
            corpus: SynthCorpus::Clinical,
            continue_corpus: SynthCorpus::Clinical,
            notes: 50,
            sentences_per_section: 5,
            theme: Theme::Clinical,
            train_examples: 400,
            test_examples: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub paths: Paths,
    pub corpus: CorpusStage,
    pub vocab: VocabConfig,
    /// Pretraining settings; `pretrain.data` also drives `instances`.
    /// `model.vocab_size` is taken from the vocabulary.
    pub pretrain: PretrainRun,
    pub continue_pretrain: ContinueStage,
    pub finetune: FinetuneStage,
    pub deid: DeidStage,
    pub probe: ProbeStage,
    pub synth: SynthStage,
    /// Settings for `experiment`; when absent or of another kind, the
    /// experiment runs with its defaults.
    pub experiment: Option<ExperimentConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            schema_version: SCHEMA_VERSION,
            seed: 12345,
            paths: Paths::default(),
            corpus: CorpusStage::default(),
            vocab: VocabConfig::default(),
            pretrain: PretrainRun::default(),
            continue_pretrain: ContinueStage::default(),
            finetune: FinetuneStage::default(),
            deid: DeidStage::default(),
            probe: ProbeStage::default(),
            synth: SynthStage::default(),
            experiment: None,
        }
    }
}

impl PipelineConfig {
    /// Checks every stage's settings, independent of which command runs.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.vocab.target_size == 0 {
            return Err(Error::Config("vocab.target_size must be positive".into()));
        }
        let mut run = self.pretrain.clone();
        run.model.vocab_size = run.model.vocab_size.max(1);
        run.validate()?;
        if self.continue_pretrain.steps == 0 && matches!(self.pretrain.init, Init::Scratch) {
            // zero-step continuation is a valid identity run
        }
        self.finetune.task.validate()?;
        self.finetune.grid.validate()?;
        if self.finetune.grid.max_seq_len > self.pretrain.model.max_positions {
            return Err(Error::Config("finetune.grid.max_seq_len exceeds model.max_positions".into()));
        }
        self.deid.pattern.validate()?;
        if self.probe.k == 0 {
            return Err(Error::Config("probe.k must be positive".into()));
        }
        if self.synth.notes == 0 || self.synth.train_examples == 0 || self.synth.test_examples == 0 {
            return Err(Error::Config("synth sizes must be positive".into()));
        }
        if let Some(e) = &self.experiment {
            e.validate()?;
        }
        Ok(())
    }
}

/// Parses a JSON config, applies `key.path=value` overrides and validates.
/// Override values are parsed as JSON and fall back to plain strings.
pub fn load_config(text: Option<&str>, overrides: &[String]) -> Result<PipelineConfig> {
    let mut value = match text {
        Some(t) => serde_json::from_str::<Value>(t).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?,
        None => serde_json::to_value(PipelineConfig::default())?,
    };
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let config: PipelineConfig =
        serde_json::from_value(value).map_err(|e| Error::Config(format!("config does not match the schema: {e}")))?;
    config.validate()?;
    Ok(config)
}

pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not KEY=VALUE")))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override key {path:?} has an empty segment")));
    }
    let parsed = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        let map = match node {
            Value::Object(m) => m,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().expect("just set")
            }
            _ => {
                return Err(Error::Config(format!(
                    "override {path:?}: {} is not an object",
                    keys[..i].join(".")
                )))
            }
        };
        if i + 1 == keys.len() {
            map.insert(key.to_string(), parsed);
            return Ok(());
        }
        node = map.entry(key.to_string()).or_insert(Value::Null);
    }
    unreachable!("keys is non-empty")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Ingest,
    Stats,
    Vocab,
    Instances,
    Pretrain,
    ContinuePretrain,
    Finetune,
    Eval,
    Deid,
    Probe,
    Synth,
    Experiment(ExperimentKind),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Stats => "stats",
            Command::Vocab => "vocab",
            Command::Instances => "instances",
            Command::Pretrain => "pretrain",
            Command::ContinuePretrain => "continue-pretrain",
            Command::Finetune => "finetune",
            Command::Eval => "eval",
            Command::Deid => "deid",
            Command::Probe => "probe",
            Command::Synth => "synth",
            Command::Experiment(_) => "experiment",
        }
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ingest" => Command::Ingest,
            "stats" => Command::Stats,
            "vocab" => Command::Vocab,
            "instances" => Command::Instances,
            "pretrain" => Command::Pretrain,
            "continue-pretrain" => Command::ContinuePretrain,
            "finetune" => Command::Finetune,
            "eval" => Command::Eval,
            "deid" => Command::Deid,
            "probe" => Command::Probe,
            "synth" => Command::Synth,
            other => match other.strip_prefix("experiment:") {
                Some(k) => Command::Experiment(k.parse()?),
                None => return Err(Error::Config(format!("unknown command {other:?}"))),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub schema_version: u32,
    pub config_sha256: String,
    pub seed: u64,
    pub started_at: String,
    pub wall_time_secs: f64,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub config: Value,
}

/// A file a command reads and the command that produces it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Input {
    pub path: PathBuf,
    pub producer: &'static str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub command: String,
    pub inputs: Vec<(Input, bool)>,
    pub outputs: Vec<PathBuf>,
}

impl Plan {
    pub fn render(&self) -> String {
        let mut out = format!("{}: config valid\n", self.command);
        for (i, exists) in &self.inputs {
            let state = if *exists {
                "present".to_string()
            } else {
                format!("missing, produced by `{}`", i.producer)
            };
            let _ = writeln!(out, "  reads  {} ({state})", i.path.display());
        }
        for o in &self.outputs {
            let _ = writeln!(out, "  writes {}", o.display());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    /// Human-readable result for the terminal.
    pub summary: String,
    pub manifest: RunManifest,
    pub manifest_path: PathBuf,
}

/// A loaded configuration bound to its base directory.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: PipelineConfig,
    base_dir: PathBuf,
    report_dir: PathBuf,
    config_hash: String,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, base_dir: &Path) -> Result<Self> {
        config.validate()?;
        let canonical = serde_json::to_string(&config)?;
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base_dir.join(p) };
        let report_dir = match std::env::var_os(REPORT_DIR_ENV) {
            Some(d) if !d.is_empty() => PathBuf::from(d),
            _ => resolve(&config.paths.reports),
        };
        Ok(Pipeline {
            base_dir: base_dir.to_path_buf(),
            report_dir,
            config_hash: sha256_hex(canonical.as_bytes()),
            config,
        })
    }

    /// Reads the config at `path` (or the defaults) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let (text, base) = match path {
            Some(p) => (
                Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
                p.parent().map(Path::to_path_buf).unwrap_or_default(),
            ),
            None => (None, PathBuf::from(".")),
        };
        let config = load_config(text.as_deref(), overrides)?;
        let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
        Pipeline::new(config, &base)
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn report_dir(&self) -> &Path {
        &self.report_dir
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn work(&self, name: &str) -> PathBuf {
        self.resolve(&self.config.paths.work).join(name)
    }

    fn report(&self, name: &str) -> PathBuf {
        self.report_dir.join(name)
    }

    fn task_path(&self, split: &str) -> PathBuf {
        let p = &self.config.paths;
        let set = match split {
            "train" => &p.task_train,
            "dev" => &p.task_dev,
            _ => &p.task_test,
        };
        match set {
            Some(path) => self.resolve(path),
            None => {
                let ext = match self.config.finetune.task.kind {
                    TaskKind::SpanLabeling => "conll",
                    TaskKind::Nli => "tsv",
                };
                self.resolve(Path::new(&format!("data/{split}.{ext}")))
            }
        }
    }

    fn checkpoint_path(&self, choice: &CheckpointChoice) -> Input {
        match choice {
            CheckpointChoice::Pretrained => Input {
                path: self.work("pretrain.ckpt"),
                producer: "pretrain",
            },
            CheckpointChoice::Continued => Input {
                path: self.work("continued.ckpt"),
                producer: "continue-pretrain",
            },
            CheckpointChoice::Finetuned => Input {
                path: self.work("finetuned.ckpt"),
                producer: "finetune",
            },
            CheckpointChoice::Path(p) => Input {
                path: self.resolve(p),
                producer: "pretrain",
            },
        }
    }

    fn seed(&self, stage: &str) -> u64 {
        stage_seed(self.config.seed, stage)
    }

    /// Files `command` reads and writes.
    pub fn io(&self, command: Command) -> (Vec<Input>, Vec<PathBuf>) {
        let corpus = Input {
            path: self.work("corpus.jsonl"),
            producer: "ingest",
        };
        let vocab = Input {
            path: self.work("vocab.txt"),
            producer: "vocab",
        };
        let instances = Input {
            path: self.work("instances.bin"),
            producer: "instances",
        };
        let heldout = Input {
            path: self.work("heldout.bin"),
            producer: "instances",
        };
        let task = |split: &str| Input {
            path: self.task_path(split),
            producer: "synth",
        };
        match command {
            Command::Ingest => (
                vec![Input {
                    path: self.resolve(&self.config.paths.notes),
                    producer: "synth",
                }],
                vec![corpus.path],
            ),
            Command::Stats => (vec![corpus], vec![self.report("stats.json"), self.report("stats.csv")]),
            Command::Vocab => (vec![corpus], vec![vocab.path]),
            Command::Instances => (vec![corpus, vocab], vec![instances.path, heldout.path]),
            Command::Pretrain => {
                let mut inputs = vec![vocab, instances, heldout];
                if let Init::FromCheckpoint { path } = &self.config.pretrain.init {
                    inputs.push(Input {
                        path: self.resolve(path),
                        producer: "pretrain",
                    });
                }
                (inputs, vec![self.work("pretrain.ckpt"), self.report("pretrain_metrics.csv")])
            }
            Command::ContinuePretrain => {
                let mut inputs = vec![vocab, self.checkpoint_path(&self.config.continue_pretrain.base)];
                match &self.config.paths.continue_notes {
                    Some(p) => inputs.push(Input {
                        path: self.resolve(p),
                        producer: "synth",
                    }),
                    None => inputs.extend([instances, heldout]),
                }
                (
                    inputs,
                    vec![
                        self.work("continue_instances.bin"),
                        self.work("continued.ckpt"),
                        self.report("continue_pretrain_metrics.csv"),
                    ],
                )
            }
            Command::Finetune => {
                let mut inputs = vec![vocab, self.checkpoint_path(&self.config.finetune.base), task("train")];
                if self.config.paths.task_dev.is_some() {
                    inputs.push(task("dev"));
                }
                (
                    inputs,
                    vec![
                        self.work("finetuned.ckpt"),
                        self.report("finetune_grid.json"),
                        self.report("finetune_grid.md"),
                        self.report("finetune_grid.csv"),
                        self.report("finetune_metrics.csv"),
                    ],
                )
            }
            Command::Eval => (
                vec![vocab, self.checkpoint_path(&CheckpointChoice::Finetuned), task("test")],
                vec![self.report("eval.json"), self.report("eval.csv")],
            ),
            Command::Deid => (
                vec![corpus],
                vec![
                    self.work("deid/surrogate_notes.jsonl"),
                    self.work("deid/alignment.jsonl"),
                    self.report("deid_prevalence.json"),
                    self.report("deid_prevalence.csv"),
                ],
            ),
            Command::Probe => {
                let mut inputs = vec![vocab, self.checkpoint_path(&self.config.probe.checkpoint)];
                if self.config.probe.mode == ProbeMode::ContextualMean {
                    inputs.push(corpus);
                }
                (inputs, vec![self.report("probe.json"), self.report("probe.txt")])
            }
            Command::Synth => {
                let mut outputs = vec![self.resolve(&self.config.paths.notes)];
                if let Some(p) = &self.config.paths.continue_notes {
                    outputs.push(self.resolve(p));
                }
                outputs.extend([self.task_path("train"), self.task_path("test")]);
                (vec![], outputs)
            }
            Command::Experiment(kind) => (vec![], vec![self.report(&format!("experiments/{}", kind.name()))]),
        }
    }

    /// Validates the config and lists the command's files without touching
    /// the file system beyond existence checks.
    pub fn dry_run(&self, command: Command) -> Plan {
        let (inputs, outputs) = self.io(command);
        Plan {
            command: command.name().to_string(),
            inputs: inputs.into_iter().map(|i| {
                let exists = i.path.exists();
                (i, exists)
            }).collect(),
            outputs,
        }
    }

    pub fn run(&self, command: Command) -> Result<Outcome> {
        let started = Instant::now();
        let started_at = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
        let (inputs, outputs) = self.io(command);
        for i in &inputs {
            if !i.path.exists() {
                return Err(Error::MissingArtifact {
                    path: i.path.clone(),
                    producer: i.producer.to_string(),
                });
            }
        }
        let input_records = hash_files(inputs.iter().map(|i| i.path.as_path()))?;
        for o in &outputs {
            let dir = if matches!(command, Command::Experiment(_)) { o.as_path() } else { o.parent().unwrap_or(Path::new(".")) };
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let summary = match command {
            Command::Ingest => self.ingest()?,
            Command::Stats => self.stats()?,
            Command::Vocab => self.vocab()?,
            Command::Instances => self.instances()?,
            Command::Pretrain => self.pretrain()?,
            Command::ContinuePretrain => self.continue_pretrain()?,
            Command::Finetune => self.finetune()?,
            Command::Eval => self.eval()?,
            Command::Deid => self.deid()?,
            Command::Probe => self.probe()?,
            Command::Synth => self.synth()?,
            Command::Experiment(kind) => self.experiment(kind, &outputs[0])?,
        };
        let mut written = Vec::new();
        for o in &outputs {
            if o.is_dir() {
                let mut files: Vec<PathBuf> = std::fs::read_dir(o)
                    .map_err(|e| Error::io(o, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.is_file())
                    .collect();
                files.sort();
                written.extend(files);
            } else if o.exists() {
                written.push(o.clone());
            }
        }
        let manifest = RunManifest {
            command: command.name().to_string(),
            schema_version: SCHEMA_VERSION,
            config_sha256: self.config_hash.clone(),
            seed: self.config.seed,
            started_at,
            wall_time_secs: started.elapsed().as_secs_f64(),
            inputs: input_records,
            outputs: hash_files(written.iter().map(PathBuf::as_path))?,
            config: serde_json::to_value(&self.config)?,
        };
        let manifest_path = self.report(&format!("manifests/{}.json", command.name()));
        write_text(&manifest_path, &serde_json::to_string_pretty(&manifest)?)?;
        Ok(Outcome {
            summary,
            manifest,
            manifest_path,
        })
    }

    fn load_corpus(&self) -> Result<NoteCollection> {
        ingest_notes(&self.work("corpus.jsonl"), NoteFormat::Jsonl, true)
    }

    fn load_vocab(&self) -> Result<Vocab> {
        Vocab::load(&self.work("vocab.txt"))
    }

    fn load_checkpoint(&self, choice: &CheckpointChoice, vocab: &Vocab) -> Result<Checkpoint> {
        Checkpoint::load_verified(&self.checkpoint_path(choice).path, &vocab.fingerprint())
    }

    fn save_checkpoint(&self, ck: &Checkpoint, path: &Path) -> Result<()> {
        let mut ck = ck.clone();
        ck.metadata.insert("config_sha256".into(), self.config_hash.clone());
        ck.save(path)?;
        Ok(())
    }

    fn pretrain_data(&self, stage: &str) -> PretrainConfig {
        PretrainConfig {
            seed: self.seed(stage),
            ..self.config.pretrain.data.clone()
        }
    }

    fn ingest(&self) -> Result<String> {
        let path = self.resolve(&self.config.paths.notes);
        let format = self.config.corpus.format.unwrap_or_else(|| NoteFormat::from_path(&path));
        let mut collection = ingest_notes(&path, format, self.config.corpus.strict)?;
        let before = collection.len();
        if !self.config.corpus.note_types.is_empty() {
            let skipped = collection.skipped;
            collection = filter_by_note_type(&collection, &self.config.corpus.note_types.iter().cloned().collect());
            collection.skipped = skipped;
        }
        collection.write_jsonl(&self.work("corpus.jsonl"))?;
        Ok(format!(
            "ingested {} notes ({} skipped, {} filtered by type)",
            collection.len(),
            collection.skipped,
            before - collection.len()
        ))
    }

    fn stats(&self) -> Result<String> {
        let report = note_type_stats(&self.load_corpus()?);
        write_text(&self.report("stats.json"), &serde_json::to_string_pretty(&report)?)?;
        write_text(&self.report("stats.csv"), &report.to_csv())?;
        let mut out = format!(
            "{} notes, {} sections ({} empty), {} sentences\n",
            report.notes, report.sections, report.empty_sections, report.sentences
        );
        for (t, c) in &report.type_counts {
            let _ = writeln!(out, "  {t}: {c}");
        }
        Ok(out.trim_end().to_string())
    }

    fn vocab(&self) -> Result<String> {
        let corpus = self.load_corpus()?;
        let sentences: Vec<String> = corpus
            .notes
            .iter()
            .flat_map(|n| parse_note(n).sentences)
            .map(|s| s.text)
            .collect();
        let vocab = train_vocab(&sentences, &self.config.vocab)?;
        vocab.save(&self.work("vocab.txt"))?;
        Ok(format!("vocabulary of {} tokens, fingerprint {}", vocab.len(), vocab.fingerprint()))
    }

    fn instances(&self) -> Result<String> {
        let corpus = self.load_corpus()?;
        let vocab = self.load_vocab()?;
        let docs = build_documents(&corpus, &vocab, self.config.vocab.lowercase);
        let (train, heldout) = dev_split(docs.documents);
        let data = self.pretrain_data("instances");
        let train_inst = create_instances(&train, &vocab, &data)?;
        // a held-out shard needs two documents when pairs are drawn across documents
        let heldout_inst = if heldout.len() >= 2 || (!data.nsp_enabled && !heldout.is_empty()) {
            create_instances(&heldout, &vocab, &PretrainConfig { dup_factor: 1, ..data.clone() })?
        } else {
            Vec::new()
        };
        write_instances_binary(&self.work("instances.bin"), &train_inst, data.max_seq_len)?;
        write_instances_binary(&self.work("heldout.bin"), &heldout_inst, data.max_seq_len)?;
        Ok(format!(
            "{} training instances from {} documents, {} held-out instances from {} documents, {} notes dropped as empty",
            train_inst.len(),
            train.len(),
            heldout_inst.len(),
            heldout.len(),
            docs.dropped
        ))
    }

    fn run_settings(&self, vocab: &Vocab, stage: &str) -> PretrainRun {
        let mut run = self.config.pretrain.clone();
        run.model.vocab_size = vocab.len();
        run.seed = self.seed(stage);
        run.data.seed = self.seed("instances");
        if let Init::FromCheckpoint { path } = &run.init {
            run.init = Init::FromCheckpoint {
                path: self.resolve(path),
            };
        }
        run
    }

    fn pretrain(&self) -> Result<String> {
        let vocab = self.load_vocab()?;
        let (instances, _) = read_instances_binary(&self.work("instances.bin"))?;
        let (heldout, _) = read_instances_binary(&self.work("heldout.bin"))?;
        let run = self.run_settings(&vocab, "pretrain");
        let ckpt_dir = self.work("checkpoints");
        let mut sink = |ck: &Checkpoint| -> Result<()> {
            if (ck.step as usize) < run.steps {
                std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
                self.save_checkpoint(ck, &ckpt_dir.join(format!("pretrain-step{:06}.ckpt", ck.step)))?;
            }
            Ok(())
        };
        let out = pretrain(&run, &vocab.fingerprint(), &instances, &heldout, &mut sink)?;
        self.save_checkpoint(&out.checkpoint, &self.work("pretrain.ckpt"))?;
        write_text(&self.report("pretrain_metrics.csv"), &out.log.to_csv())?;
        Ok(summarize_pretrain("pretrained", run.steps, &out.log))
    }

    fn continue_pretrain(&self) -> Result<String> {
        let vocab = self.load_vocab()?;
        let base = self.load_checkpoint(&self.config.continue_pretrain.base, &vocab)?;
        let data = self.pretrain_data("continue-instances");
        let (instances, heldout) = match &self.config.paths.continue_notes {
            Some(p) => {
                let path = self.resolve(p);
                let notes = ingest_notes(&path, self.config.corpus.format.unwrap_or_else(|| NoteFormat::from_path(&path)), self.config.corpus.strict)?;
                let docs = build_documents(&notes, &vocab, self.config.vocab.lowercase);
                let (train, held) = dev_split(docs.documents);
                let held = if held.len() >= 2 {
                    create_instances(&held, &vocab, &PretrainConfig { dup_factor: 1, ..data.clone() })?
                } else {
                    Vec::new()
                };
                (create_instances(&train, &vocab, &data)?, held)
            }
            None => (
                read_instances_binary(&self.work("instances.bin"))?.0,
                read_instances_binary(&self.work("heldout.bin"))?.0,
            ),
        };
        write_instances_binary(&self.work("continue_instances.bin"), &instances, data.max_seq_len)?;
        let run = PretrainRun {
            steps: self.config.continue_pretrain.steps,
            ..self.run_settings(&vocab, "continue-pretrain")
        };
        let out = continue_pretrain(&base, &run, &vocab.fingerprint(), &instances, &heldout, &mut |_| Ok(()))?;
        self.save_checkpoint(&out.checkpoint, &self.work("continued.ckpt"))?;
        write_text(&self.report("continue_pretrain_metrics.csv"), &out.log.to_csv())?;
        Ok(summarize_pretrain("continued", run.steps, &out.log))
    }

    fn finetune_data(&self, vocab: &Vocab) -> Result<FinetuneData> {
        let spec = &self.config.finetune.task;
        let max_len = self.config.finetune.grid.max_seq_len;
        let lower = self.config.vocab.lowercase;
        let dev_path = self.config.paths.task_dev.as_ref().map(|_| self.task_path("dev"));
        Ok(match spec.kind {
            TaskKind::SpanLabeling => {
                let enc = |p: &Path| -> Result<Vec<_>> {
                    load_span_task(p, spec)?
                        .iter()
                        .map(|s| encode_span_sentence(s, spec, vocab, lower, max_len))
                        .collect()
                };
                let train = enc(&self.task_path("train"))?;
                let (train, dev) = match &dev_path {
                    Some(p) => (train, enc(p)?),
                    None => dev_split(train),
                };
                FinetuneData::Span { train, dev }
            }
            TaskKind::Nli => {
                let enc = |p: &Path| -> Result<Vec<_>> {
                    load_nli_task(p, spec)?
                        .iter()
                        .map(|e| encode_nli(e, spec, vocab, lower, max_len))
                        .collect()
                };
                let train = enc(&self.task_path("train"))?;
                let (train, dev) = match &dev_path {
                    Some(p) => (train, enc(p)?),
                    None => dev_split(train),
                };
                FinetuneData::Nli { train, dev }
            }
        })
    }

    fn finetune(&self) -> Result<String> {
        let vocab = self.load_vocab()?;
        let base = self.load_checkpoint(&self.config.finetune.base, &vocab)?;
        let data = self.finetune_data(&vocab)?;
        let spec = &self.config.finetune.task;
        let out = finetune(spec, &data, &base, &self.config.finetune.grid, self.seed("finetune"))?;
        self.save_checkpoint(&out.best, &self.work("finetuned.ckpt"))?;
        let report = out.report.without_timing();
        // wall times are kept out of the report files and live in the manifest
        write_text(&self.report("finetune_grid.json"), &report.to_json()?)?;
        write_text(&self.report("finetune_grid.md"), &report.to_markdown())?;
        let mut csv = String::from("cell,lr,batch_size,epochs,steps,final_train_loss,dev_metric\n");
        for r in &report.rows {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                r.cell.index, r.cell.lr, r.cell.batch_size, r.cell.epochs, r.steps, r.final_train_loss, r.dev_metric
            );
        }
        write_text(&self.report("finetune_grid.csv"), &csv)?;
        write_text(&self.report("finetune_metrics.csv"), &out.log.to_csv())?;
        let best = &report.rows[report.best];
        Ok(format!(
            "{} cells trained; best cell {} (lr {}, batch {}, epochs {}) with dev {:?} {:.4}",
            report.rows.len(),
            best.cell.index,
            best.cell.lr,
            best.cell.batch_size,
            best.cell.epochs,
            report.metric,
            best.dev_metric
        ))
    }

    fn eval(&self) -> Result<String> {
        let vocab = self.load_vocab()?;
        let ck = self.load_checkpoint(&CheckpointChoice::Finetuned, &vocab)?;
        let spec = &self.config.finetune.task;
        let max_len = self.config.finetune.grid.max_seq_len;
        let lower = self.config.vocab.lowercase;
        let test = self.task_path("test");
        match spec.kind {
            TaskKind::SpanLabeling => {
                let examples = load_span_task(&test, spec)?
                    .iter()
                    .map(|s| encode_span_sentence(s, spec, &vocab, lower, max_len))
                    .collect::<Result<Vec<_>>>()?;
                let pred = predict_spans(&ck.model, &examples, spec, 64)?;
                let gold: Vec<_> = examples.iter().map(|e| e.gold.clone()).collect();
                let report = exact_span_f1(&gold, &pred)?;
                write_text(&self.report("eval.json"), &report.to_json()?)?;
                let mut csv = String::from("class,precision,recall,f1,tp,pred,gold\n");
                for (name, p) in std::iter::once(("micro", &report.micro)).chain(report.per_class.iter().map(|(k, v)| (k.as_str(), v))) {
                    let _ = writeln!(csv, "{name},{},{},{},{},{},{}", p.precision, p.recall, p.f1, p.tp, p.pred, p.gold);
                }
                write_text(&self.report("eval.csv"), &csv)?;
                Ok(format!(
                    "exact F1 {:.4} (precision {:.4}, recall {:.4}) over {} sentences",
                    report.micro.f1, report.micro.precision, report.micro.recall, report.sentences
                ))
            }
            TaskKind::Nli => {
                let examples = load_nli_task(&test, spec)?
                    .iter()
                    .map(|e| encode_nli(e, spec, &vocab, lower, max_len))
                    .collect::<Result<Vec<_>>>()?;
                if examples.is_empty() {
                    return Err(Error::Data("test file has no examples".into()));
                }
                let pred = predict_classes(&ck.model, &examples, spec, 64)?;
                let labels = spec.labels();
                let mut per_class: BTreeMap<String, [usize; 2]> = labels.iter().map(|l| (l.clone(), [0, 0])).collect();
                for (p, e) in pred.iter().zip(&examples) {
                    let c = per_class.get_mut(&labels[e.label as usize]).expect("known label");
                    c[0] += 1;
                    c[1] += usize::from(*p == e.label);
                }
                let correct: usize = per_class.values().map(|c| c[1]).sum();
                let accuracy = correct as f64 / examples.len() as f64;
                let report = serde_json::json!({
                    "examples": examples.len(),
                    "correct": correct,
                    "accuracy": accuracy,
                    "per_class": per_class.iter().map(|(k, c)| (k.clone(), serde_json::json!({"gold": c[0], "correct": c[1]}))).collect::<serde_json::Map<_, _>>(),
                });
                write_text(&self.report("eval.json"), &serde_json::to_string_pretty(&report)?)?;
                let mut csv = String::from("label,gold,correct\n");
                for (k, c) in &per_class {
                    let _ = writeln!(csv, "{k},{},{}", c[0], c[1]);
                }
                write_text(&self.report("eval.csv"), &csv)?;
                Ok(format!("accuracy {accuracy:.4} over {} examples", examples.len()))
            }
        }
    }

    fn deid(&self) -> Result<String> {
        let corpus = self.load_corpus()?;
        let d = &self.config.deid;
        let lexicons = match &d.lexicon_dir {
            Some(dir) => Lexicons::load_dir(&self.resolve(dir))?,
            None => Lexicons::default(),
        };
        let policy = SurrogatePolicy {
            lexicons,
            date_shift_days: d.date_shift_days,
            seed: self.seed("deid"),
            scope: d.scope,
            pattern: d.pattern.clone(),
        };
        let before = corpus_prevalence(&corpus, &policy.pattern);
        let mut notes = Vec::with_capacity(corpus.len());
        let mut maps = Vec::with_capacity(corpus.len());
        for n in &corpus.notes {
            let (note, map) = surrogate_substitute(n, &policy)?;
            notes.push(note);
            maps.push(map);
        }
        let out = NoteCollection::new(notes);
        let after = corpus_prevalence(&out, &policy.pattern);
        out.write_jsonl(&self.work("deid/surrogate_notes.jsonl"))?;
        write_text(&self.work("deid/alignment.jsonl"), &alignment_jsonl(&maps)?)?;
        let report = serde_json::json!({ "before": before, "after": after });
        write_text(&self.report("deid_prevalence.json"), &serde_json::to_string_pretty(&report)?)?;
        let mut csv = String::from("corpus,category,count\n");
        for (name, r) in [("sentinel", &before), ("surrogate", &after)] {
            for (c, n) in &r.category_counts {
                let _ = writeln!(csv, "{name},{},{n}", serde_json::to_value(c)?.as_str().unwrap_or("other"));
            }
        }
        write_text(&self.report("deid_prevalence.csv"), &csv)?;
        let replaced: usize = maps.iter().map(|m| m.entries.len()).sum();
        let frac = |r: &crate::deid::PrevalenceReport| r.fraction.map_or("n/a".to_string(), |f| format!("{f:.4}"));
        Ok(format!(
            "replaced {replaced} sentinels in {} notes; sentences with a sentinel: {} before, {} after",
            out.len(),
            frac(&before),
            frac(&after)
        ))
    }

    fn probe(&self) -> Result<String> {
        let p = &self.config.probe;
        if p.queries.is_empty() {
            return Err(Error::Config("probe.queries is empty".into()));
        }
        let vocab = self.load_vocab()?;
        let ck = self.load_checkpoint(&p.checkpoint, &vocab)?;
        let corpus: Option<Vec<String>> = match p.mode {
            ProbeMode::Static => None,
            ProbeMode::ContextualMean => Some(
                self.load_corpus()?
                    .notes
                    .iter()
                    .flat_map(|n| parse_note(n).sentences)
                    .map(|s| s.text)
                    .collect(),
            ),
        };
        let mut reports = Vec::new();
        let mut table = String::new();
        for q in &p.queries {
            let r = nearest_neighbors(&ck.model, &vocab, q, p.k, p.mode, corpus.as_deref(), self.config.vocab.lowercase)?;
            table.push_str(&r.to_table());
            table.push('\n');
            reports.push(r);
        }
        write_text(&self.report("probe.json"), &serde_json::to_string_pretty(&reports)?)?;
        write_text(&self.report("probe.txt"), &table)?;
        Ok(table.trim_end().to_string())
    }

    fn synth(&self) -> Result<String> {
        let s = &self.config.synth;
        let make = |kind: SynthCorpus, seed: u64| match kind {
            SynthCorpus::Clinical => clinical_corpus(s.notes, s.sentences_per_section, seed),
            SynthCorpus::General => general_corpus(s.notes, s.sentences_per_section, seed),
            SynthCorpus::Sentinel => sentinel_corpus(s.notes, s.sentences_per_section, seed),
            SynthCorpus::Memorization => memorization_corpus(s.notes, seed),
            SynthCorpus::Synonyms => synonym_corpus(s.notes, seed),
        };
        let notes_path = self.resolve(&self.config.paths.notes);
        let notes = make(s.corpus, self.seed("synth-notes"));
        write_notes(&notes, &notes_path)?;
        let mut out = format!("{} notes -> {}", notes.len(), notes_path.display());
        if let Some(p) = &self.config.paths.continue_notes {
            let path = self.resolve(p);
            let more = make(s.continue_corpus, self.seed("synth-continue-notes"));
            write_notes(&more, &path)?;
            let _ = write!(out, "\n{} notes -> {}", more.len(), path.display());
        }
        let spec = &self.config.finetune.task;
        for (split, n) in [("train", s.train_examples), ("test", s.test_examples)] {
            let path = self.task_path(split);
            let files = synth_task_gen(spec, s.theme, n, self.seed(&format!("synth-{split}")))?;
            ensure_parent(&path)?;
            files.write(&path)?;
            let _ = write!(out, "\n{n} {} examples -> {}", spec.name, path.display());
        }
        Ok(out)
    }

    fn experiment(&self, kind: ExperimentKind, dir: &Path) -> Result<String> {
        let config = match &self.config.experiment {
            Some(c) if c.kind() == kind => c.clone(),
            _ => ExperimentConfig::default_for(kind),
        };
        let report = run_experiment(&config, self.config.seed, dir)?;
        Ok(report.to_markdown().trim_end().to_string())
    }
}

fn summarize_pretrain(what: &str, steps: usize, log: &crate::training::MetricsLog) -> String {
    let mut out = format!("{what} for {steps} steps");
    if let Some(l) = log.last("train_loss") {
        let _ = write!(out, "; final train loss {l:.4}");
    }
    if let Some(a) = log.last("heldout_mlm_accuracy") {
        let _ = write!(out, "; held-out masked-token accuracy {a:.4}");
    }
    out
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_notes(notes: &NoteCollection, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    match NoteFormat::from_path(path) {
        NoteFormat::Jsonl => notes.write_jsonl(path),
        NoteFormat::Csv => {
            let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            for n in &notes.notes {
                w.serialize(n).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            }
            w.flush().map_err(|e| Error::io(path, e))
        }
    }
}

fn hash_files<'a>(paths: impl Iterator<Item = &'a Path>) -> Result<Vec<FileRecord>> {
    paths
        .map(|p| {
            Ok(FileRecord {
                path: p.to_path_buf(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}
