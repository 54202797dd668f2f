//! Pretraining, continued pretraining and grid-searched fine-tuning.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::hashing::{sha256_hex, stable_u64};
use crate::model::{
    adam_step_filtered, backward, forward, is_head_array, loss, AdamConfig, AdamState, Batch, Checkpoint, HeadKind,
    HeadLogits, Mode, Model, ModelConfig, Targets,
};
use crate::pretrain_data::{MlmInstance, PretrainConfig};
use crate::tasks::{
    batch_of, exact_span_f1, predict_classes, predict_spans, Metric, SeqExample, SpanExample, TaskKind, TaskSpec,
};
use crate::{Error, Result};

/// Step count of the full-scale schedule that desk runs are scaled from.
pub const FULL_SCALE_STEPS: usize = 150_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    Scratch,
    FromCheckpoint { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainRun {
    pub model: ModelConfig,
    pub data: PretrainConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub adam: AdamConfig,
    pub init: Init,
    pub seed: u64,
    /// Metrics are logged every `log_every` steps and at the last step.
    pub log_every: usize,
    /// Intermediate checkpoint period; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub save_optimizer: bool,
}

impl Default for PretrainRun {
    fn default() -> Self {
        PretrainRun {
            model: ModelConfig::default(),
            data: PretrainConfig::default(),
            steps: 2000,
            batch_size: 32,
            lr: 5e-5,
            warmup_fraction: 0.1,
            adam: AdamConfig::default(),
            init: Init::Scratch,
            seed: 12345,
            log_every: 100,
            checkpoint_every: 0,
            save_optimizer: false,
        }
    }
}

impl PretrainRun {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        if self.steps == 0 {
            return Err(Error::Config("pretraining needs at least one step".into()));
        }
        self.validate_schedule()
    }

    fn validate_schedule(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1)".into()));
        }
        if self.data.max_seq_len > self.model.max_positions {
            return Err(Error::Config(format!(
                "max_seq_len {} exceeds max_positions {}",
                self.data.max_seq_len, self.model.max_positions
            )));
        }
        Ok(())
    }
}

/// Linear warmup over the first `warmup_fraction` of steps, then linear decay
/// towards zero. `step` is zero-based; every step in `0..total` gets a
/// positive rate.
pub fn lr_at(step: usize, total: usize, warmup_fraction: f64, peak: f64) -> f64 {
    let warmup = (total as f64 * warmup_fraction).floor() as usize;
    if step < warmup {
        peak * (step + 1) as f64 / warmup as f64
    } else {
        peak * (total - step) as f64 / (total - warmup) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<MetricRow>,
}

impl MetricsLog {
    pub fn push(&mut self, step: usize, metric: impl Into<String>, value: f64) {
        self.rows.push(MetricRow {
            step,
            metric: metric.into(),
            value,
        });
    }

    pub fn last(&self, metric: &str) -> Option<f64> {
        self.rows.iter().rev().find(|r| r.metric == metric).map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,metric,value\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.step, r.metric, r.value);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlmMetrics {
    pub mlm_loss: f64,
    pub mlm_accuracy: f64,
    pub nsp_accuracy: Option<f64>,
    pub masked: usize,
}

pub(crate) fn dropout_seed(seed: u64, step: usize) -> u64 {
    stable_u64(&[b"dropout", &seed.to_le_bytes(), &(step as u64).to_le_bytes()])
}

struct PretrainBatch {
    batch: Batch,
    mlm_rows: Vec<usize>,
    targets: Targets,
}

fn pretrain_batch(instances: &[&MlmInstance], nsp: bool) -> PretrainBatch {
    let batch = Batch::from_rows(
        instances
            .iter()
            .map(|i| (i.ids.as_slice(), i.segment_ids.as_slice(), i.attention_mask.as_slice())),
    );
    let mut mlm_rows = Vec::new();
    let mut labels = Vec::new();
    for (b, inst) in instances.iter().enumerate() {
        for (&p, &l) in inst.masked_positions.iter().zip(&inst.masked_labels) {
            mlm_rows.push(b * batch.seq_len + p);
            labels.push(l);
        }
    }
    let nsp_labels = nsp.then(|| instances.iter().map(|i| u32::from(!i.is_next)).collect());
    PretrainBatch {
        batch,
        mlm_rows,
        targets: Targets::Pretrain {
            mlm_labels: labels,
            nsp_labels,
        },
    }
}

fn nsp_enabled(model: &Model<f32>) -> bool {
    matches!(model.head, HeadKind::Pretrain { nsp: true })
}

/// Masked-token top-1 accuracy and loss in evaluation mode.
pub fn evaluate_mlm(model: &Model<f32>, instances: &[MlmInstance], batch_size: usize) -> Result<MlmMetrics> {
    let nsp = nsp_enabled(model);
    let (mut loss_sum, mut hits, mut masked, mut nsp_hits) = (0.0, 0usize, 0usize, 0usize);
    for chunk in instances.chunks(batch_size.max(1)) {
        let refs: Vec<&MlmInstance> = chunk.iter().collect();
        let pb = pretrain_batch(&refs, nsp);
        if pb.mlm_rows.is_empty() {
            continue;
        }
        let out = forward(model, &pb.batch, &pb.mlm_rows, Mode::Eval)?;
        let l = loss(&out.logits, &pb.targets)?;
        let HeadLogits::Pretrain { mlm, nsp: nsp_logits } = &out.logits else {
            return Err(Error::Config("masked-LM evaluation needs a pretraining head".into()));
        };
        let Targets::Pretrain { mlm_labels, nsp_labels } = &pb.targets else {
            unreachable!("pretraining targets")
        };
        loss_sum += l.mlm.unwrap_or(0.0) * mlm_labels.len() as f64;
        masked += mlm_labels.len();
        hits += (0..mlm.rows).filter(|&r| mlm.argmax(r) as u32 == mlm_labels[r]).count();
        if let (Some(n), Some(labels)) = (nsp_logits, nsp_labels) {
            nsp_hits += (0..n.rows).filter(|&r| n.argmax(r) as u32 == labels[r]).count();
        }
    }
    if masked == 0 {
        return Err(Error::Data("no masked positions to evaluate".into()));
    }
    Ok(MlmMetrics {
        mlm_loss: loss_sum / masked as f64,
        mlm_accuracy: hits as f64 / masked as f64,
        nsp_accuracy: nsp.then(|| nsp_hits as f64 / instances.len() as f64),
        masked,
    })
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: MetricsLog,
}

/// Called with each intermediate and the final checkpoint.
pub type CheckpointSink<'a> = &'a mut dyn FnMut(&Checkpoint) -> Result<()>;

/// Trains a masked-LM model from `run.init`. A checkpoint init is loaded,
/// checked against `vocab_fingerprint` and continued via
/// [`continue_pretrain`].
pub fn pretrain(
    run: &PretrainRun,
    vocab_fingerprint: &str,
    instances: &[MlmInstance],
    heldout: &[MlmInstance],
    sink: CheckpointSink<'_>,
) -> Result<PretrainOutcome> {
    run.validate()?;
    match &run.init {
        Init::Scratch => {
            let cfg = run.model.clone();
            if cfg.vocab_size == 0 {
                return Err(Error::Config("vocab_size must be positive".into()));
            }
            let head = HeadKind::Pretrain {
                nsp: run.data.nsp_enabled,
            };
            let model = Model::new(cfg, head, run.seed)?;
            let mut ck = Checkpoint::new(model, vocab_fingerprint);
            ck.rng_seed = Some(run.seed);
            train_mlm(ck, run, instances, heldout, sink)
        }
        Init::FromCheckpoint { path } => {
            let base = Checkpoint::load_verified(path, vocab_fingerprint)?;
            continue_pretrain(&base, run, vocab_fingerprint, instances, heldout, sink)
        }
    }
}

/// Continues masked-LM training from `base`. The model configuration comes
/// from the base; the output's lineage is the SHA-256 of the base's bytes,
/// which equals the hash of the file it was saved to. Zero steps are
/// allowed and return the base parameters unchanged.
pub fn continue_pretrain(
    base: &Checkpoint,
    run: &PretrainRun,
    vocab_fingerprint: &str,
    instances: &[MlmInstance],
    heldout: &[MlmInstance],
    sink: CheckpointSink<'_>,
) -> Result<PretrainOutcome> {
    base.verify_fingerprint(vocab_fingerprint)?;
    let run = PretrainRun {
        model: base.model.config.clone(),
        ..run.clone()
    };
    run.data.validate()?;
    run.validate_schedule()?;
    let head = HeadKind::Pretrain {
        nsp: run.data.nsp_enabled,
    };
    let mut ck = Checkpoint::new(base.model_for(head, run.seed)?, vocab_fingerprint);
    ck.lineage = Some(sha256_hex(&base.to_bytes()?));
    ck.rng_seed = Some(run.seed);
    ck.metadata = base.metadata.clone();
    ck.metadata.insert("base_steps".into(), base.step.to_string());
    train_mlm(ck, &run, instances, heldout, sink)
}

fn train_mlm(
    mut ck: Checkpoint,
    run: &PretrainRun,
    instances: &[MlmInstance],
    heldout: &[MlmInstance],
    sink: CheckpointSink<'_>,
) -> Result<PretrainOutcome> {
    let mut log = MetricsLog::default();
    ck.metadata.insert("objective".into(), "masked_lm".into());
    ck.metadata.insert("steps".into(), run.steps.to_string());
    ck.metadata.insert("full_scale_steps".into(), FULL_SCALE_STEPS.to_string());
    ck.metadata
        .insert("step_ratio".into(), (run.steps as f64 / FULL_SCALE_STEPS as f64).to_string());
    ck.metadata.insert("batch_size".into(), run.batch_size.to_string());
    ck.metadata.insert("lr".into(), run.lr.to_string());
    ck.metadata.insert("seed".into(), run.seed.to_string());
    if run.steps > 0 && instances.is_empty() {
        return Err(Error::Data("pretraining instance stream is empty".into()));
    }
    let vocab = ck.model.config.vocab_size as u32;
    if let Some(bad) = instances
        .iter()
        .flat_map(|i| i.ids.iter().chain(&i.masked_labels))
        .find(|&&t| t >= vocab)
    {
        return Err(Error::Data(format!("token id {bad} outside vocabulary of {vocab}")));
    }
    let nsp = nsp_enabled(&ck.model);
    let mut state = AdamState::new(&ck.model.params);
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut cursor = order.len();
    let (mut window_loss, mut window_mlm, mut window_nsp, mut window) = (0.0, 0.0, 0.0, 0usize);
    let mut last_good = None;
    for step in 0..run.steps {
        let mut picked = Vec::with_capacity(run.batch_size);
        while picked.len() < run.batch_size.min(instances.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(&instances[order[cursor]]);
            cursor += 1;
        }
        let pb = pretrain_batch(&picked, nsp);
        let lr = lr_at(step, run.steps, run.warmup_fraction, run.lr);
        let out = forward(
            &ck.model,
            &pb.batch,
            &pb.mlm_rows,
            Mode::Train {
                dropout_seed: dropout_seed(run.seed, step),
            },
        )?;
        let l = loss(&out.logits, &pb.targets)?;
        if !l.value.is_finite() {
            return Err(numeric_abort(step, "loss", last_good));
        }
        let cache = out.cache.expect("training mode keeps the cache");
        let grads = backward(&ck.model, &cache, &l)?;
        adam_step_filtered(&mut ck.model.params, &grads, &mut state, lr, &run.adam, |_| true)
            .map_err(|e| numeric_abort(step, &e.to_string(), last_good))?;
        if let Some(name) = ck.model.params.first_non_finite() {
            return Err(numeric_abort(step, &format!("parameter {name}"), last_good));
        }
        window_loss += l.value;
        window_mlm += l.mlm.unwrap_or(0.0);
        window_nsp += l.nsp.unwrap_or(0.0);
        window += 1;
        let done = step + 1;
        if done % run.log_every.max(1) == 0 || done == run.steps {
            let w = window as f64;
            log.push(done, "lr", lr);
            log.push(done, "train_loss", window_loss / w);
            log.push(done, "train_mlm_loss", window_mlm / w);
            if nsp {
                log.push(done, "train_nsp_loss", window_nsp / w);
            }
            (window_loss, window_mlm, window_nsp, window) = (0.0, 0.0, 0.0, 0);
            if !heldout.is_empty() {
                let m = evaluate_mlm(&ck.model, heldout, run.batch_size)?;
                log.push(done, "heldout_mlm_loss", m.mlm_loss);
                log.push(done, "heldout_mlm_accuracy", m.mlm_accuracy);
                if let Some(a) = m.nsp_accuracy {
                    log.push(done, "heldout_nsp_accuracy", a);
                }
            }
        }
        if run.checkpoint_every > 0 && done % run.checkpoint_every == 0 && done < run.steps {
            ck.step = done as u64;
            sink(&snapshot(&ck, run, &state))?;
            last_good = Some(done);
        }
    }
    ck.step = run.steps as u64;
    let ck = snapshot(&ck, run, &state);
    sink(&ck)?;
    Ok(PretrainOutcome { checkpoint: ck, log })
}

fn snapshot(ck: &Checkpoint, run: &PretrainRun, state: &AdamState<f32>) -> Checkpoint {
    let mut out = ck.clone();
    if run.save_optimizer {
        out.optimizer = Some((run.adam, state.clone()));
    }
    out
}

fn numeric_abort(step: usize, what: &str, last_good: Option<usize>) -> Error {
    let kept = match last_good {
        Some(s) => format!("last good checkpoint is from step {s}"),
        None => "no checkpoint was written".into(),
    };
    Error::Numeric(format!("non-finite {what} at step {}; {kept}", step + 1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneGrid {
    pub lrs: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub epochs: Vec<usize>,
    pub max_seq_len: usize,
    pub warmup_fraction: f64,
    pub adam: AdamConfig,
    /// Trains only the head; for ablations.
    pub freeze_body: bool,
}

impl Default for FinetuneGrid {
    fn default() -> Self {
        FinetuneGrid::paper(TaskKind::SpanLabeling)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub index: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl FinetuneGrid {
    /// Learning rates {2e-5, 3e-5, 5e-5}, batch sizes {16, 32}, epochs
    /// {3, 4}; span tasks also try 2 epochs.
    pub fn paper(kind: TaskKind) -> Self {
        FinetuneGrid {
            lrs: vec![2e-5, 3e-5, 5e-5],
            batch_sizes: vec![16, 32],
            epochs: match kind {
                TaskKind::SpanLabeling => vec![2, 3, 4],
                TaskKind::Nli => vec![3, 4],
            },
            max_seq_len: 150,
            warmup_fraction: 0.1,
            adam: AdamConfig::default(),
            freeze_body: false,
        }
    }

    pub fn single(lr: f64, batch_size: usize, epochs: usize) -> Self {
        FinetuneGrid {
            lrs: vec![lr],
            batch_sizes: vec![batch_size],
            epochs: vec![epochs],
            ..Self::paper(TaskKind::Nli)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lrs.is_empty() || self.batch_sizes.is_empty() || self.epochs.is_empty() {
            return Err(Error::Config("fine-tuning grid is empty".into()));
        }
        if self.lrs.iter().any(|&l| !(l.is_finite() && l > 0.0))
            || self.batch_sizes.contains(&0)
            || self.epochs.contains(&0)
        {
            return Err(Error::Config("grid values must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Cells in lr-major, then batch size, then epoch order.
    pub fn cells(&self) -> Vec<GridCell> {
        let mut out = Vec::new();
        for &lr in &self.lrs {
            for &batch_size in &self.batch_sizes {
                for &epochs in &self.epochs {
                    out.push(GridCell {
                        index: out.len(),
                        lr,
                        batch_size,
                        epochs,
                    });
                }
            }
        }
        out
    }
}

pub fn cell_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(31).wrapping_add(index as u64)
}

/// Deterministic dev membership: about one index in ten, by hash.
pub fn is_dev_index(index: usize) -> bool {
    stable_u64(&[b"dev-split", &(index as u64).to_le_bytes()]).is_multiple_of(10)
}

/// Splits items into (train, dev) with [`is_dev_index`].
pub fn dev_split<T>(items: Vec<T>) -> (Vec<T>, Vec<T>) {
    let mut train = Vec::new();
    let mut dev = Vec::new();
    for (i, x) in items.into_iter().enumerate() {
        if is_dev_index(i) {
            dev.push(x);
        } else {
            train.push(x);
        }
    }
    (train, dev)
}

#[derive(Debug, Clone, PartialEq)]
pub enum FinetuneData {
    Span { train: Vec<SpanExample>, dev: Vec<SpanExample> },
    Nli { train: Vec<SeqExample>, dev: Vec<SeqExample> },
}

impl FinetuneData {
    fn sizes(&self) -> (usize, usize) {
        match self {
            FinetuneData::Span { train, dev } => (train.len(), dev.len()),
            FinetuneData::Nli { train, dev } => (train.len(), dev.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub cell: GridCell,
    pub seed: u64,
    pub steps: usize,
    pub final_train_loss: f64,
    pub dev_metric: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_secs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub task: String,
    pub metric: Metric,
    pub rows: Vec<GridRow>,
    pub best: usize,
}

impl GridReport {
    /// The report with wall times removed, for byte-stable artifacts.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.rows.iter_mut().for_each(|row| row.wall_time_secs = None);
        r
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_markdown(&self) -> String {
        let metric = match self.metric {
            Metric::ExactF1 => "dev exact F1",
            Metric::Accuracy => "dev accuracy",
        };
        let mut out = format!("| cell | lr | batch | epochs | steps | {metric} | wall time (s) |\n");
        out.push_str("|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let wall = r.wall_time_secs.map_or("-".to_string(), |t| format!("{t:.1}"));
            let mark = if r.cell.index == self.best { " *" } else { "" };
            let _ = writeln!(
                out,
                "| {}{mark} | {:e} | {} | {} | {} | {:.4} | {wall} |",
                r.cell.index, r.cell.lr, r.cell.batch_size, r.cell.epochs, r.steps, r.dev_metric
            );
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub best: Checkpoint,
    pub report: GridReport,
    pub log: MetricsLog,
}

/// `a` beats `b` on a higher metric; ties go to lower lr, then smaller
/// batch, then fewer epochs.
fn better(a: (f64, &GridCell), b: (f64, &GridCell)) -> bool {
    if a.0 != b.0 {
        return a.0 > b.0;
    }
    (a.1.lr, a.1.batch_size, a.1.epochs) < (b.1.lr, b.1.batch_size, b.1.epochs)
}

/// Trains every grid cell from `base` (fresh head, seed `seed*31 + cell`)
/// and keeps the cell with the best dev metric.
pub fn finetune(
    spec: &TaskSpec,
    data: &FinetuneData,
    base: &Checkpoint,
    grid: &FinetuneGrid,
    seed: u64,
) -> Result<FinetuneOutcome> {
    grid.validate()?;
    spec.validate()?;
    let (n_train, n_dev) = data.sizes();
    if n_dev == 0 {
        return Err(Error::Data("dev set is empty".into()));
    }
    if n_train == 0 {
        return Err(Error::Data("training set is empty".into()));
    }
    match (spec.kind, data) {
        (TaskKind::SpanLabeling, FinetuneData::Span { .. }) | (TaskKind::Nli, FinetuneData::Nli { .. }) => {}
        _ => return Err(Error::Config(format!("data does not match task {}", spec.name))),
    }
    let lineage = sha256_hex(&base.to_bytes()?);
    let mut rows = Vec::new();
    let mut log = MetricsLog::default();
    let mut best: Option<(f64, GridCell, Model<f32>)> = None;
    for cell in grid.cells() {
        let started = Instant::now();
        let seed = cell_seed(seed, cell.index);
        let mut model = base.model_for(spec.head(), seed)?;
        let (steps, final_loss) = train_cell(&mut model, data, &cell, grid, seed, &mut log)?;
        let dev_metric = dev_score(&model, spec, data)?;
        log.push(steps, format!("cell{}.dev_metric", cell.index), dev_metric);
        rows.push(GridRow {
            cell,
            seed,
            steps,
            final_train_loss: final_loss,
            dev_metric,
            wall_time_secs: Some(started.elapsed().as_secs_f64()),
        });
        if best.as_ref().is_none_or(|(m, c, _)| better((dev_metric, &cell), (*m, c))) {
            best = Some((dev_metric, cell, model));
        }
    }
    let (metric, cell, model) = best.expect("grid is non-empty");
    let mut ck = Checkpoint::new(model, base.vocab_fingerprint.clone());
    ck.lineage = Some(lineage);
    ck.rng_seed = Some(cell_seed(seed, cell.index));
    ck.metadata.insert("objective".into(), spec.name.clone());
    ck.metadata.insert("grid_cell".into(), cell.index.to_string());
    ck.metadata.insert("dev_metric".into(), metric.to_string());
    Ok(FinetuneOutcome {
        best: ck,
        report: GridReport {
            task: spec.name.clone(),
            metric: spec.metric(),
            rows,
            best: cell.index,
        },
        log,
    })
}

fn train_cell(
    model: &mut Model<f32>,
    data: &FinetuneData,
    cell: &GridCell,
    grid: &FinetuneGrid,
    seed: u64,
    log: &mut MetricsLog,
) -> Result<(usize, f64)> {
    let n = data.sizes().0;
    let per_epoch = n.div_ceil(cell.batch_size);
    let total = per_epoch * cell.epochs;
    let mut state = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    let mut last = f64::NAN;
    for epoch in 0..cell.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(cell.batch_size) {
            let (batch, targets) = match data {
                FinetuneData::Span { train, .. } => {
                    let ex: Vec<&SpanExample> = idx.iter().map(|&i| &train[i]).collect();
                    let batch = batch_of(&ex.iter().map(|e| &e.encoded).collect::<Vec<_>>());
                    let labels = ex.iter().flat_map(|e| e.labels[..batch.seq_len].iter().copied()).collect();
                    (batch, Targets::Token(labels))
                }
                FinetuneData::Nli { train, .. } => {
                    let ex: Vec<&SeqExample> = idx.iter().map(|&i| &train[i]).collect();
                    let batch = batch_of(&ex.iter().map(|e| &e.encoded).collect::<Vec<_>>());
                    (batch, Targets::Seq(ex.iter().map(|e| e.label).collect()))
                }
            };
            let mode = Mode::Train {
                dropout_seed: dropout_seed(seed, step),
            };
            let out = forward(model, &batch, &[], mode)?;
            let l = match loss(&out.logits, &targets) {
                Ok(l) => l,
                // a batch whose sentences all truncate to nothing has no labels
                Err(Error::Data(_)) => {
                    step += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            if !l.value.is_finite() {
                return Err(Error::Numeric(format!("non-finite fine-tuning loss at step {}", step + 1)));
            }
            let grads = backward(model, &out.cache.expect("training mode keeps the cache"), &l)?;
            let lr = lr_at(step, total, grid.warmup_fraction, cell.lr);
            let freeze = grid.freeze_body;
            adam_step_filtered(&mut model.params, &grads, &mut state, lr, &grid.adam, |name| {
                !freeze || is_head_array(name)
            })?;
            epoch_loss += l.value;
            last = l.value;
            step += 1;
        }
        log.push(step, format!("cell{}.epoch{}_train_loss", cell.index, epoch + 1), epoch_loss / per_epoch as f64);
    }
    Ok((step, last))
}

/// Exact F1 for span tasks, accuracy for NLI, on the dev split.
pub fn dev_score(model: &Model<f32>, spec: &TaskSpec, data: &FinetuneData) -> Result<f64> {
    match data {
        FinetuneData::Span { dev, .. } => span_f1(model, spec, dev),
        FinetuneData::Nli { dev, .. } => accuracy(model, spec, dev),
    }
}

pub fn span_f1(model: &Model<f32>, spec: &TaskSpec, examples: &[SpanExample]) -> Result<f64> {
    let pred = predict_spans(model, examples, spec, 64)?;
    let gold: Vec<_> = examples.iter().map(|e| e.gold.clone()).collect();
    Ok(exact_span_f1(&gold, &pred)?.micro.f1)
}

pub fn accuracy(model: &Model<f32>, spec: &TaskSpec, examples: &[SeqExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Data("accuracy over an empty set".into()));
    }
    let pred = predict_classes(model, examples, spec, 64)?;
    let hits = pred.iter().zip(examples).filter(|(p, e)| **p == e.label).count();
    Ok(hits as f64 / examples.len() as f64)
}
