//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs every criterion in order and prints a summary. A FAIL does not fail
//! the process unless `NOTEBERT_ACCEPTANCE_STRICT=1`; errors always do.
//! `NOTEBERT_ACCEPTANCE_ONLY=2,5` restricts the run to the listed criteria.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use notebert::experiments::{
    run_experiment, DeidShiftConfig, DomainAdaptationConfig, ExperimentConfig, MemorizationConfig, NliSanityConfig,
};
use notebert::model::gradcheck::check_gradients;
use notebert::model::{Batch, Checkpoint, HeadKind, Model, ModelConfig, Targets, IGNORE};
use notebert::pretrain_data::{build_documents, create_instances, mask_instance, PretrainConfig};
use notebert::synth::clinical_corpus;
use notebert::tasks::{exact_span_f1, iob_decode, iob_encode, DecodeMode, Span};
use notebert::tokenizer::{train_vocab, Vocab, VocabConfig, SPECIALS};
use notebert::training::{continue_pretrain, pretrain, PretrainRun};
use notebert::{Error, Result};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 20240;

const GRAD_EPS: f64 = 1e-3;
const GRAD_SAMPLES_PER_HEAD: usize = 200;
const GRAD_MAX_REL_ERROR: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(120);

const MEMORIZATION_MIN_ACCURACY: f64 = 0.90;
const MEMORIZATION_BUDGET: Duration = Duration::from_secs(15 * 60);

const DOMAIN_MIN_F1_GAIN: f64 = 0.05;
const DOMAIN_BUDGET: Duration = Duration::from_secs(60 * 60);

const DEID_MIN_F1_DROP: f64 = 0.05;

const F1_CASES: usize = 1000;
const IOB_CASES: usize = 10_000;
const MASK_LEN_RANGE: std::ops::RangeInclusive<usize> = 3..=512;

const NLI_MIN_ACCURACY: f64 = 0.90;
const NLI_BASELINE_TOLERANCE: f64 = 0.03;
const NLI_GRID_CELLS: usize = 12;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            pass,
            detail: detail.into(),
        }
    }
}

type Criterion = fn() -> Result<Verdict>;

fn main() -> ExitCode {
    let criteria: [(&str, Criterion); 10] = [
        ("gradient correctness", gradients),
        ("MLM memorization", memorization),
        ("domain adaptation", domain_adaptation),
        ("de-identification shift", deid_shift),
        ("exact-F1 oracle equivalence", f1_oracle),
        ("IOB round trip", iob_round_trip),
        ("masking count", masking_count),
        ("checkpoint round trip", checkpoint_round_trip),
        ("NLI head sanity", nli_sanity),
        ("experiment determinism", determinism),
    ];
    let only: Option<Vec<usize>> = std::env::var("NOTEBERT_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let strict = std::env::var("NOTEBERT_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");

    let (mut passed, mut failed, mut errors) = (0, 0, 0);
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let started = Instant::now();
        let result = run();
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(v) if v.pass => {
                passed += 1;
                println!("[{n:>2}] PASS {name}: {} ({secs:.1}s)", v.detail);
            }
            Ok(v) => {
                failed += 1;
                println!("[{n:>2}] FAIL {name}: {} ({secs:.1}s)", v.detail);
            }
            Err(e) => {
                errors += 1;
                println!("[{n:>2}] ERROR {name}: {e} ({secs:.1}s)");
            }
        }
    }
    println!("acceptance: {passed} passed, {failed} failed, {errors} errors");
    if errors > 0 || (strict && failed > 0) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn scratch_dir() -> Result<tempfile::TempDir> {
    tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))
}

fn gradients() -> Result<Verdict> {
    let started = Instant::now();
    let cfg = ModelConfig::tiny();
    let ids: [&[u32]; 2] = [&[2, 17, 9, 4, 31, 3, 20, 44, 3], &[2, 30, 4, 12, 48, 3, 0, 0, 0]];
    let seg: [&[u32]; 2] = [&[0, 0, 0, 0, 0, 0, 1, 1, 1], &[0; 9]];
    let mask: [&[u8]; 2] = [&[1; 9], &[1, 1, 1, 1, 1, 1, 0, 0, 0]];
    let batch = Batch::from_rows((0..2).map(|i| (ids[i], seg[i], mask[i])));
    let token_labels = vec![
        IGNORE, 1, 2, 0, 4, IGNORE, 3, 0, IGNORE, IGNORE, 6, 0, 5, 2, IGNORE, IGNORE, IGNORE, IGNORE,
    ];
    let cases: [(&str, HeadKind, Targets, Vec<usize>); 3] = [
        (
            "pretrain",
            HeadKind::Pretrain { nsp: true },
            Targets::Pretrain {
                mlm_labels: vec![9, 12, 30, 41],
                nsp_labels: Some(vec![1, 0]),
            },
            vec![2, 4, 7, 11],
        ),
        ("token", HeadKind::TokenClassify { classes: 7 }, Targets::Token(token_labels), vec![]),
        ("sequence", HeadKind::SeqClassify { classes: 3 }, Targets::Seq(vec![2, 0]), vec![]),
    ];
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (i, (name, head, targets, rows)) in cases.iter().enumerate() {
        let model = Model::<f64>::new(cfg.clone(), *head, SEED + i as u64)?;
        let r = check_gradients(&model, &batch, rows, targets, 5, GRAD_EPS, GRAD_SAMPLES_PER_HEAD, SEED)?;
        worst = worst.max(r.max_rel_error);
        parts.push(format!("{name} {:.2e}", r.max_rel_error));
    }
    let elapsed = started.elapsed();
    Ok(Verdict::new(
        worst < GRAD_MAX_REL_ERROR && elapsed < GRAD_BUDGET,
        format!(
            "max rel error {} (< {GRAD_MAX_REL_ERROR:.0e}), {} samples per head, {:.0}s of {}s",
            parts.join(", "),
            GRAD_SAMPLES_PER_HEAD,
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    ))
}

fn memorization() -> Result<Verdict> {
    let dir = scratch_dir()?;
    let started = Instant::now();
    let cfg = ExperimentConfig::Memorization(MemorizationConfig::default());
    let r = run_experiment(&cfg, SEED, dir.path())?;
    let elapsed = started.elapsed();
    let acc = r.metric("held_in_mlm_accuracy")?;
    Ok(Verdict::new(
        acc >= MEMORIZATION_MIN_ACCURACY && elapsed < MEMORIZATION_BUDGET,
        format!(
            "held-in masked-token accuracy {acc:.4} (>= {MEMORIZATION_MIN_ACCURACY}) over {} masked tokens, {:.0}s of {}s",
            r.metric("masked_tokens")?,
            elapsed.as_secs_f64(),
            MEMORIZATION_BUDGET.as_secs()
        ),
    ))
}

fn domain_adaptation() -> Result<Verdict> {
    let dir = scratch_dir()?;
    let started = Instant::now();
    let cfg = ExperimentConfig::DomainAdaptation(DomainAdaptationConfig::default());
    let r = run_experiment(&cfg, SEED, dir.path())?;
    let elapsed = started.elapsed();
    let gain = r.metric("f1_gain")?;
    Ok(Verdict::new(
        gain >= DOMAIN_MIN_F1_GAIN && elapsed < DOMAIN_BUDGET,
        format!(
            "continued-clinical F1 {:.4} vs general-only F1 {:.4}, gain {gain:.4} (>= {DOMAIN_MIN_F1_GAIN}), {:.0}s of {}s",
            r.metric("clinical_test_f1_mean")?,
            r.metric("general_test_f1_mean")?,
            elapsed.as_secs_f64(),
            DOMAIN_BUDGET.as_secs()
        ),
    ))
}

fn deid_shift() -> Result<Verdict> {
    let dir = scratch_dir()?;
    let cfg = ExperimentConfig::DeidShift(DeidShiftConfig::default());
    let r = run_experiment(&cfg, SEED, dir.path())?;
    let drop = r.metric("f1_drop")?;
    Ok(Verdict::new(
        drop >= DEID_MIN_F1_DROP,
        format!(
            "sentinel F1 {:.4} vs surrogate F1 {:.4}, drop {drop:.4} (>= {DEID_MIN_F1_DROP})",
            r.metric("sentinel_test_f1_mean")?,
            r.metric("surrogate_test_f1_mean")?
        ),
    ))
}

/// Per-label `[tp, pred, gold]` by pairwise comparison of deduplicated lists.
fn brute_force_counts(gold: &[Vec<Span>], pred: &[Vec<Span>]) -> BTreeMap<String, [usize; 3]> {
    fn dedup(spans: &[Span]) -> Vec<&Span> {
        let mut out: Vec<&Span> = Vec::new();
        for s in spans {
            if !out.iter().any(|o| o.start == s.start && o.end == s.end && o.label == s.label) {
                out.push(s);
            }
        }
        out
    }
    let mut counts: BTreeMap<String, [usize; 3]> = BTreeMap::new();
    for (g, p) in gold.iter().zip(pred) {
        let (g, p) = (dedup(g), dedup(p));
        for s in &g {
            counts.entry(s.label.clone()).or_default()[2] += 1;
        }
        for s in &p {
            let c = counts.entry(s.label.clone()).or_default();
            c[1] += 1;
            if g.iter().any(|o| o.start == s.start && o.end == s.end && o.label == s.label) {
                c[0] += 1;
            }
        }
    }
    counts
}

fn prf_oracle(tp: usize, pred: usize, gold: usize) -> [f64; 3] {
    let p = if pred == 0 { 0.0 } else { tp as f64 / pred as f64 };
    let r = if gold == 0 { 0.0 } else { tp as f64 / gold as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    [p, r, f]
}

fn random_spans(rng: &mut ChaCha8Rng, max: usize) -> Vec<Span> {
    let n = rng.random_range(0..=max);
    (0..n)
        .map(|_| {
            let start = rng.random_range(0..8);
            let end = start + rng.random_range(0..3);
            Span::new(start, end, *["A", "B", "C"].choose(rng).expect("non-empty"))
        })
        .collect()
}

fn f1_oracle() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut mismatches = 0;
    let mut degenerate = 0;
    for case in 0..F1_CASES {
        let sentences = rng.random_range(0..5);
        let (gold, pred): (Vec<Vec<Span>>, Vec<Vec<Span>>) = match case {
            0 => (vec![], vec![]),
            1 => (vec![vec![]; 3], vec![vec![]; 3]),
            2 => (vec![vec![]], vec![vec![Span::new(0, 1, "A")]]),
            3 => (vec![vec![Span::new(0, 1, "A")]], vec![vec![]]),
            _ => (0..sentences)
                .map(|_| {
                    let g = random_spans(&mut rng, 4);
                    // predictions copy some gold spans so true positives occur
                    let mut p: Vec<Span> = g.iter().filter(|_| rng.random_bool(0.5)).cloned().collect();
                    p.extend(random_spans(&mut rng, 3));
                    (g, p)
                })
                .unzip(),
        };
        let counts = brute_force_counts(&gold, &pred);
        let total = counts.values().fold([0; 3], |a, c| [a[0] + c[0], a[1] + c[1], a[2] + c[2]]);
        if total[1] == 0 || total[2] == 0 {
            degenerate += 1;
        }
        let report = exact_span_f1(&gold, &pred)?;
        let same = |prf: &notebert::tasks::Prf, c: &[usize; 3]| {
            let [p, r, f] = prf_oracle(c[0], c[1], c[2]);
            [prf.tp, prf.pred, prf.gold] == *c && prf.precision == p && prf.recall == r && prf.f1 == f
        };
        let ok = report.sentences == gold.len()
            && same(&report.micro, &total)
            && report.per_class.len() == counts.len()
            && counts
                .iter()
                .all(|(k, c)| report.per_class.get(k).is_some_and(|prf| same(prf, c)));
        if !ok {
            mismatches += 1;
        }
    }
    Ok(Verdict::new(
        mismatches == 0 && degenerate > 0,
        format!("{mismatches} mismatches over {F1_CASES} cases ({degenerate} with empty gold or prediction sets)"),
    ))
}

fn iob_round_trip() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let classes = ["Problem", "Test", "Treatment"];
    let mut round_trip_failures = 0;
    for _ in 0..IOB_CASES {
        let len = rng.random_range(0..30);
        let mut tags: Vec<String> = Vec::with_capacity(len);
        let mut open: Option<&str> = None;
        for _ in 0..len {
            let roll = rng.random_range(0..3);
            let tag = match (roll, open) {
                (0, _) => {
                    open = None;
                    "O".to_string()
                }
                (1, Some(c)) => format!("I-{c}"),
                _ => {
                    let c = *classes.choose(&mut rng).expect("non-empty");
                    open = Some(c);
                    format!("B-{c}")
                }
            };
            tags.push(tag);
        }
        let ok = iob_decode(&tags, DecodeMode::Strict)
            .and_then(|spans| iob_encode(&spans, len))
            .is_ok_and(|back| back == tags);
        if !ok {
            round_trip_failures += 1;
        }
    }

    let pool = [
        "O", "B-Problem", "I-Problem", "B-Test", "I-Test", "I-Treatment", "B-", "I-", "X", "", "b-Test", "I-Unknown",
    ];
    let mut lenient_failures = 0;
    for _ in 0..IOB_CASES {
        let len = rng.random_range(0..30);
        let tags: Vec<&str> = (0..len).map(|_| *pool.choose(&mut rng).expect("non-empty")).collect();
        let ok = iob_decode(&tags, DecodeMode::Lenient).is_ok_and(|spans| {
            let disjoint = spans.windows(2).all(|w| w[0].end < w[1].start);
            spans.iter().all(|s| s.start <= s.end && s.end < len) && disjoint && iob_encode(&spans, len).is_ok()
        });
        if !ok {
            lenient_failures += 1;
        }
    }
    Ok(Verdict::new(
        round_trip_failures == 0 && lenient_failures == 0,
        format!(
            "{round_trip_failures} round-trip failures over {IOB_CASES} well-formed sequences, \
             {lenient_failures} lenient-decode failures over {IOB_CASES} arbitrary sequences"
        ),
    ))
}

/// `min(20, max(1, round(0.15 * len)))` in exact integer arithmetic, with
/// halves rounded to even.
fn expected_masks(len: usize) -> usize {
    let (q, r) = (3 * len / 20, 3 * len % 20);
    let rounded = match (2 * r).cmp(&20) {
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => q + q % 2,
        std::cmp::Ordering::Less => q,
    };
    rounded.clamp(1, 20)
}

fn masking_count() -> Result<Verdict> {
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend((0..40).map(|i| format!("w{i}")));
    let vocab = Vocab::from_tokens(tokens)?;
    let sp = vocab.specials();
    let config = PretrainConfig {
        max_seq_len: *MASK_LEN_RANGE.end(),
        ..PretrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut wrong = Vec::new();
    for len in MASK_LEN_RANGE {
        let mut ids = vec![sp.cls];
        ids.extend((0..len - 2).map(|i| vocab.id(&format!("w{}", i % 40)).expect("in vocab")));
        ids.push(sp.sep);
        let inst = mask_instance(&ids, &vec![0; len], true, &vocab, &config, &mut rng)?;
        if inst.masked_positions.len() != expected_masks(len) {
            wrong.push(len);
        }
    }
    let at_128 = expected_masks(128);
    Ok(Verdict::new(
        wrong.is_empty() && at_128 == 19,
        format!(
            "{} of {} lengths disagree with the oracle; length 128 masks {at_128}",
            wrong.len(),
            MASK_LEN_RANGE.count()
        ),
    ))
}

fn checkpoint_round_trip() -> Result<Verdict> {
    let dir = scratch_dir()?;
    let corpus = clinical_corpus(6, 3, SEED);
    let sentences: Vec<String> = corpus
        .notes
        .iter()
        .flat_map(|n| notebert::corpus::parse_note(n).sentences)
        .map(|s| s.text)
        .collect();
    let vocab = train_vocab(
        &sentences,
        &VocabConfig {
            target_size: 300,
            ..VocabConfig::default()
        },
    )?;
    let mut run = PretrainRun {
        model: ModelConfig {
            vocab_size: vocab.len(),
            max_positions: 64,
            ..ModelConfig::tiny()
        },
        steps: 3,
        batch_size: 4,
        log_every: 1,
        save_optimizer: true,
        seed: SEED,
        ..PretrainRun::default()
    };
    run.data = PretrainConfig {
        max_seq_len: 64,
        dup_factor: 1,
        seed: SEED,
        ..run.data
    };
    let docs = build_documents(&corpus, &vocab, false);
    let inst = create_instances(&docs.documents, &vocab, &run.data)?;
    let fp = vocab.fingerprint();
    let trained = pretrain(&run, &fp, &inst, &inst, &mut |_| Ok(()))?.checkpoint;

    let path = dir.path().join("a.ckpt");
    trained.save(&path)?;
    let on_disk = read(&path)?;
    let loaded = Checkpoint::load(&path)?;
    let again = dir.path().join("b.ckpt");
    loaded.save(&again)?;
    let bytes_identical = on_disk == read(&again)? && loaded.to_bytes()? == on_disk && loaded == trained;

    let zero = PretrainRun { steps: 0, ..run.clone() };
    let cont = continue_pretrain(&loaded, &zero, &fp, &inst, &inst, &mut |_| Ok(()))?.checkpoint;
    let params_preserved = cont.model.params == loaded.model.params;

    let rejected = matches!(
        Checkpoint::load_verified(&path, "0000000000000000"),
        Err(Error::Fingerprint { .. })
    ) && continue_pretrain(&loaded, &run, "0000000000000000", &inst, &inst, &mut |_| Ok(())).is_err();

    Ok(Verdict::new(
        bytes_identical && params_preserved && rejected,
        format!(
            "byte-identical re-save {bytes_identical}, zero-step continuation preserves parameters {params_preserved}, \
             fingerprint mismatch rejected {rejected}"
        ),
    ))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn nli_sanity() -> Result<Verdict> {
    let dir = scratch_dir()?;
    let cfg = ExperimentConfig::NliSanity(NliSanityConfig::default());
    let r = run_experiment(&cfg, SEED, dir.path())?;
    let acc = r.metric("test_accuracy")?;
    let baseline = r.metric("majority_baseline_accuracy")?;
    let cells = r.metric("grid_cells")? as usize;
    Ok(Verdict::new(
        acc >= NLI_MIN_ACCURACY && (baseline - 1.0 / 3.0).abs() <= NLI_BASELINE_TOLERANCE && cells == NLI_GRID_CELLS,
        format!(
            "test accuracy {acc:.4} (>= {NLI_MIN_ACCURACY}), majority baseline {baseline:.4} (1/3 ± {NLI_BASELINE_TOLERANCE}), \
             {cells} grid cells (== {NLI_GRID_CELLS}), best dev {:.4}",
            r.metric("best_dev_accuracy")?
        ),
    ))
}

fn files_under(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
    }
    out.sort();
    Ok(out)
}

fn determinism() -> Result<Verdict> {
    let dir = scratch_dir()?;
    let mut trees = Vec::new();
    for run in ["first", "second"] {
        let reports = dir.path().join(run);
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_notebert"))
            .args(["experiment", "smoke", "--seed", &SEED.to_string()])
            .env("NOTEBERT_REPORT_DIR", &reports)
            .current_dir(dir.path())
            .output()
            .map_err(|e| Error::io(env!("CARGO_BIN_EXE_notebert"), e))?;
        if !status.status.success() {
            return Err(Error::Data(format!(
                "experiment smoke exited with {}: {}",
                status.status,
                String::from_utf8_lossy(&status.stderr)
            )));
        }
        trees.push(reports.join("experiments/smoke"));
    }
    let names = files_under(&trees[0])?;
    let same_names = names == files_under(&trees[1])?;
    let mut differing = Vec::new();
    for name in &names {
        if read(&trees[0].join(name))? != read(&trees[1].join(name)).unwrap_or_default() {
            differing.push(name.display().to_string());
        }
    }
    let count = |ext: &str| names.iter().filter(|n| n.extension().is_some_and(|e| e == ext)).count();
    Ok(Verdict::new(
        same_names && differing.is_empty() && count("ckpt") > 0 && count("csv") > 0,
        format!(
            "{} files compared ({} checkpoints, {} CSVs), {} differ{}",
            names.len(),
            count("ckpt"),
            count("csv"),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(": {}", differing.join(", ")) }
        ),
    ))
}
