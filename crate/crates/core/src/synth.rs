//! Deterministic synthetic corpora and tasks for desk-scale experiments.
//!
//! Two themes share function words but differ in content words. Clinical
//! pretraining text places each entity category in its own contexts; the
//! span-labeling templates are category-neutral, so a fine-tuned tagger can
//! only classify an unseen entity from what pretraining taught it about the
//! word itself.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Note, NoteCollection};
use crate::deid::{find_sentinels, SurrogatePolicy};
use crate::tasks::{iob_encode, to_conll, to_nli_tsv, NliExample, Span, TaggedSentence, TaskKind, TaskSpec, NLI_LABELS};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Theme {
    Clinical,
    General,
}

impl std::str::FromStr for Theme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clinical" => Ok(Theme::Clinical),
            "general" => Ok(Theme::General),
            other => Err(Error::Config(format!("unknown theme {other:?}"))),
        }
    }
}

fn lines(s: &str) -> Vec<String> {
    s.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThemeLexicon {
    pub problems: Vec<String>,
    pub tests: Vec<String>,
    pub treatments: Vec<String>,
    pub people: Vec<String>,
    pub places: Vec<String>,
    pub things: Vec<String>,
    pub events: Vec<String>,
}

impl Default for ThemeLexicon {
    fn default() -> Self {
        ThemeLexicon {
            problems: lines(include_str!("../lexicons/themes/problems.txt")),
            tests: lines(include_str!("../lexicons/themes/tests.txt")),
            treatments: lines(include_str!("../lexicons/themes/treatments.txt")),
            people: lines(include_str!("../lexicons/themes/people.txt")),
            places: lines(include_str!("../lexicons/themes/places.txt")),
            things: lines(include_str!("../lexicons/themes/things.txt")),
            events: lines(include_str!("../lexicons/themes/events.txt")),
        }
    }
}

pub const CLINICAL_CLASSES: [&str; 3] = ["Problem", "Test", "Treatment"];

/// Which part of each entity list a generator may draw from. Every third
/// entry (index mod 3 == 2) is held out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityPool {
    All,
    Seen,
    Heldout,
}

impl ThemeLexicon {
    pub fn entities(&self, class: &str) -> &[String] {
        match class {
            "Problem" => &self.problems,
            "Test" => &self.tests,
            "Treatment" => &self.treatments,
            _ => &[],
        }
    }

    pub fn pool(&self, class: &str, pool: EntityPool) -> Vec<&str> {
        self.entities(class)
            .iter()
            .enumerate()
            .filter(|(i, _)| match pool {
                EntityPool::All => true,
                EntityPool::Seen => i % 3 != 2,
                EntityPool::Heldout => i % 3 == 2,
            })
            .map(|(_, e)| e.as_str())
            .collect()
    }
}

const CLINICAL_SECTIONS: [&str; 4] = ["HISTORY OF PRESENT ILLNESS:", "HOSPITAL COURSE:", "MEDICATIONS:", "PLAN:"];
const NOTE_TYPES: [&str; 3] = ["Discharge summary", "Nursing", "Physician"];

const PROBLEM_CONTEXTS: &[&str] = &[
    "patient presented with {P} .",
    "complains of worsening {P} since yesterday .",
    "history of {P} was noted .",
    "denies {P} or {P} .",
    "{P} has improved since admission .",
    "symptoms consistent with {P} .",
];
const TEST_CONTEXTS: &[&str] = &[
    "{T} was ordered this morning .",
    "{T} showed no acute change .",
    "results of the {T} are pending .",
    "will repeat {T} tomorrow .",
    "{T} was obtained on arrival .",
];
const TREATMENT_CONTEXTS: &[&str] = &[
    "started on {R} for {P} .",
    "{R} was given twice daily .",
    "continue {R} at home .",
    "{R} was held overnight .",
    "dose of {R} was increased .",
];
const MIXED_CONTEXTS: &[&str] = &[
    "{T} was ordered to evaluate {P} .",
    "{P} was treated with {R} .",
    "{T} confirmed {P} and {R} was started .",
];
const SHARED_FILLER: &[&str] = &[
    "the patient was seen today .",
    "plan was discussed with the family .",
    "the team reviewed the notes at rounds .",
    "patient will return home tomorrow .",
];
const GENERAL_CONTEXTS: &[&str] = &[
    "the {PER} visited the {PLC} this morning .",
    "a {PER} bought a {THG} at the {PLC} .",
    "the {EVT} was held near the {PLC} .",
    "the {PER} lost a {THG} during the {EVT} .",
    "many people attended the {EVT} today .",
    "the {THG} was found at the {PLC} yesterday .",
    "the {PER} and the {PER} discussed the {EVT} .",
    "a new {THG} was given to the {PER} .",
    "the family will return home after the {EVT} .",
];

/// Category-neutral span-labeling templates; `{E}` is any clinical entity.
const NER_CLINICAL: &[&str] = &[
    "{E} was discussed with the team .",
    "the team reviewed {E} and {E} today .",
    "plan regarding {E} was updated .",
    "family asked about {E} .",
    "notes mention {E} .",
    "{E} and {E} were reviewed at rounds .",
];
const NER_GENERAL: &[&str] = &[
    "the {PER} mentioned {E} at the {PLC} .",
    "a {PER} read about {E} in a {THG} .",
    "{E} was discussed during the {EVT} .",
    "the {PER} asked about {E} and {E} .",
];
const PHI_TEMPLATES: &[&str] = &[
    "seen by dr. {NAME} at {HOSP} on {DATE} .",
    "{NAME} was transferred from {HOSP} .",
    "discharged on {DATE} to home .",
    "spoke with {NAME} regarding results .",
    "follow up at {HOSP} after {DATE} .",
    "admitted to {HOSP} on {DATE} with {p} .",
    "family of {NAME} called on {DATE} .",
];

struct Filled {
    words: Vec<String>,
    spans: Vec<Span>,
}

fn sentinel(rng: &mut ChaCha8Rng, class: &str) -> String {
    match class {
        "NAME" => {
            let n = rng.random_range(1..9999);
            let form = ["Known lastname", "Last Name (NamePattern1)", "First Name8 (NamePattern2)", "Doctor Last Name"]
                .choose(rng)
                .expect("non-empty");
            format!("[**{form} {n}**]")
        }
        "HOSPITAL" => {
            let k = rng.random_range(1..8);
            let n = rng.random_range(1..999);
            format!("[**Hospital{k} {n}**]")
        }
        _ => {
            let y = rng.random_range(2100..2190);
            let m = rng.random_range(1..=12);
            let d = rng.random_range(1..=28);
            if rng.random_bool(0.8) {
                format!("[**{y}-{m}-{d}**]")
            } else {
                format!("[**{m}-{d}**]")
            }
        }
    }
}

/// Fills one template. Labeled slots (`{E}`, `{P}`... when `labeled`, and the
/// PHI slots) add a span over the words they produce.
fn fill(template: &str, lex: &ThemeLexicon, pool: EntityPool, labeled: bool, rng: &mut ChaCha8Rng) -> Filled {
    let mut words = Vec::new();
    let mut spans = Vec::new();
    let mut used: BTreeSet<String> = BTreeSet::new();
    for tok in template.split(' ') {
        let (text, label): (String, Option<&str>) = match tok {
            "{E}" | "{P}" | "{T}" | "{R}" | "{p}" => {
                let class = match tok {
                    "{E}" => *CLINICAL_CLASSES.choose(rng).expect("non-empty"),
                    "{T}" => "Test",
                    "{R}" => "Treatment",
                    _ => "Problem",
                };
                let candidates: Vec<&str> = lex
                    .pool(class, pool)
                    .into_iter()
                    .filter(|e| !used.contains(*e))
                    .collect();
                let e = candidates.choose(rng).copied().unwrap_or("fever").to_string();
                used.insert(e.clone());
                (e, (labeled && tok != "{p}").then_some(class))
            }
            "{PER}" => (lex.people.choose(rng).expect("non-empty").clone(), None),
            "{PLC}" => (lex.places.choose(rng).expect("non-empty").clone(), None),
            "{THG}" => (lex.things.choose(rng).expect("non-empty").clone(), None),
            "{EVT}" => (lex.events.choose(rng).expect("non-empty").clone(), None),
            "{NAME}" => (sentinel(rng, "NAME"), Some("NAME")),
            "{DATE}" => (sentinel(rng, "DATE"), Some("DATE")),
            "{HOSP}" => (sentinel(rng, "HOSPITAL"), Some("HOSPITAL")),
            "{N}" => (rng.random_range(1..30).to_string(), None),
            w => (w.to_string(), None),
        };
        // sentinels stay single tokens even though they contain spaces
        let parts: Vec<String> = if text.starts_with("[**") {
            vec![text]
        } else {
            text.split(' ').map(String::from).collect()
        };
        if let Some(l) = label {
            spans.push(Span::new(words.len(), words.len() + parts.len() - 1, l));
        }
        words.extend(parts);
    }
    Filled { words, spans }
}

fn sentence(template: &str, lex: &ThemeLexicon, rng: &mut ChaCha8Rng) -> String {
    fill(template, lex, EntityPool::All, false, rng).words.join(" ")
}

fn clinical_sentence(lex: &ThemeLexicon, rng: &mut ChaCha8Rng) -> String {
    let group = match rng.random_range(0..10) {
        0..=2 => PROBLEM_CONTEXTS,
        3..=4 => TEST_CONTEXTS,
        5..=6 => TREATMENT_CONTEXTS,
        7..=8 => MIXED_CONTEXTS,
        _ => SHARED_FILLER,
    };
    sentence(group.choose(rng).expect("non-empty"), lex, rng)
}

fn notes_from(
    prefix: &str,
    n_notes: usize,
    seed: u64,
    mut body: impl FnMut(usize, &mut ChaCha8Rng) -> (String, String),
) -> NoteCollection {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let notes = (0..n_notes)
        .map(|i| {
            let (note_type, text) = body(i, &mut rng);
            Note {
                id: format!("{prefix}-{i:05}"),
                note_type,
                text,
            }
        })
        .collect();
    NoteCollection::new(notes)
}

/// Sectioned clinical notes, `sentences` sentences per section.
pub fn clinical_corpus(n_notes: usize, sentences: usize, seed: u64) -> NoteCollection {
    let lex = ThemeLexicon::default();
    notes_from("clin", n_notes, seed, |i, rng| {
        let mut text = String::new();
        for header in CLINICAL_SECTIONS {
            text.push_str(header);
            text.push('\n');
            let body: Vec<String> = (0..sentences).map(|_| clinical_sentence(&lex, rng)).collect();
            text.push_str(&body.join(" "));
            text.push_str("\n\n");
        }
        (NOTE_TYPES[i % NOTE_TYPES.len()].to_string(), text)
    })
}

/// Unsectioned general-domain documents of `sentences` sentences.
pub fn general_corpus(n_notes: usize, sentences: usize, seed: u64) -> NoteCollection {
    let lex = ThemeLexicon::default();
    notes_from("gen", n_notes, seed, |_, rng| {
        let body: Vec<String> = (0..sentences)
            .map(|_| sentence(GENERAL_CONTEXTS.choose(rng).expect("non-empty"), &lex, rng))
            .collect();
        ("General".to_string(), body.join(" "))
    })
}

/// Clinical notes where roughly half the sentences carry sentinel PHI.
pub fn sentinel_corpus(n_notes: usize, sentences: usize, seed: u64) -> NoteCollection {
    let lex = ThemeLexicon::default();
    notes_from("sent", n_notes, seed, |i, rng| {
        let mut text = String::new();
        for header in CLINICAL_SECTIONS {
            text.push_str(header);
            text.push('\n');
            let body: Vec<String> = (0..sentences)
                .map(|_| {
                    if rng.random_bool(0.5) {
                        sentence(PHI_TEMPLATES.choose(rng).expect("non-empty"), &lex, rng)
                    } else {
                        clinical_sentence(&lex, rng)
                    }
                })
                .collect();
            text.push_str(&body.join(" "));
            text.push_str("\n\n");
        }
        (NOTE_TYPES[i % NOTE_TYPES.len()].to_string(), text)
    })
}

const MEMO_TEMPLATES: &[&str] = &[
    "{P} was treated with {R} after {T} on day {N} .",
    "on day {N} the {T} showed {P} so {R} was started .",
    "{R} and {R} were given for {P} and {P} .",
    "the {PER} at the {PLC} reported {P} after the {EVT} .",
];

/// `n` distinct sentences split over notes of eight sentences each.
pub fn memorization_corpus(n: usize, seed: u64) -> NoteCollection {
    let lex = ThemeLexicon::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut sents = Vec::with_capacity(n);
    while sents.len() < n {
        let t = MEMO_TEMPLATES[sents.len() % MEMO_TEMPLATES.len()];
        let s = sentence(t, &lex, &mut rng);
        if seen.insert(s.clone()) {
            sents.push(s);
        }
    }
    let notes = sents
        .chunks(8)
        .enumerate()
        .map(|(i, c)| Note {
            id: format!("memo-{i:03}"),
            note_type: "Discharge summary".into(),
            text: c.join(" "),
        })
        .collect();
    NoteCollection::new(notes)
}

/// Planted synonym pairs: within each pair both words occur in exactly the
/// same sentences, and each pair has its own context words.
pub const SYNONYM_PAIRS: [(&str, &str); 4] = [
    ("lorvane", "teskite"),
    ("pimbrel", "quoddax"),
    ("zarnith", "welkory"),
    ("fendral", "hobsick"),
];
const SYNONYM_CONTEXTS: [[&str; 4]; 4] = [
    ["river", "boat", "fish", "shore"],
    ["mountain", "snow", "climb", "peak"],
    ["kitchen", "bread", "oven", "flour"],
    ["engine", "wheel", "road", "fuel"],
];

pub fn synonym_corpus(n_notes: usize, seed: u64) -> NoteCollection {
    notes_from("syn", n_notes, seed, |_, rng| {
        let mut body = Vec::new();
        for _ in 0..6 {
            let p = rng.random_range(0..SYNONYM_PAIRS.len());
            let ctx = &SYNONYM_CONTEXTS[p];
            let a = ctx[rng.random_range(0..4)];
            let b = ctx[rng.random_range(0..4)];
            for w in [SYNONYM_PAIRS[p].0, SYNONYM_PAIRS[p].1] {
                body.push(format!("the {a} near the {w} by the {b} ."));
            }
        }
        ("General".to_string(), body.join(" "))
    })
}

fn tagged(f: Filled) -> TaggedSentence {
    let tags = iob_encode(&f.spans, f.words.len()).expect("templates produce disjoint spans");
    TaggedSentence { tokens: f.words, tags }
}

/// Clinical concept sentences from category-neutral templates.
pub fn ner_sentences(theme: Theme, n: usize, seed: u64, pool: EntityPool) -> Vec<TaggedSentence> {
    let lex = ThemeLexicon::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates = match theme {
        Theme::Clinical => NER_CLINICAL,
        Theme::General => NER_GENERAL,
    };
    (0..n)
        .map(|_| tagged(fill(templates.choose(&mut rng).expect("non-empty"), &lex, pool, true, &mut rng)))
        .collect()
}

/// PHI sentences whose NAME/DATE/HOSPITAL mentions are single sentinel tokens.
pub fn phi_sentences(n: usize, seed: u64) -> Vec<TaggedSentence> {
    let lex = ThemeLexicon::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| tagged(fill(PHI_TEMPLATES.choose(&mut rng).expect("non-empty"), &lex, EntityPool::All, true, &mut rng)))
        .collect()
}

/// Replaces each sentinel token with its surrogate words. A labeled sentinel
/// becomes a `B-c I-c ...` run over the surrogate's words.
pub fn surrogate_sentences(sentences: &[TaggedSentence], policy: &SurrogatePolicy) -> Result<Vec<TaggedSentence>> {
    sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let id = format!("sentence-{i}");
            let mut out = TaggedSentence {
                tokens: vec![],
                tags: vec![],
            };
            for (tok, tag) in s.tokens.iter().zip(&s.tags) {
                let found = find_sentinels(tok, &policy.pattern);
                match found.as_slice() {
                    [span] if span.char_span == (0, tok.len()) => {
                        let sur = policy.surrogate_for(&id, span)?;
                        let class = tag.get(2..).filter(|_| tag != "O");
                        for (k, w) in sur.split_whitespace().enumerate() {
                            out.tokens.push(w.to_string());
                            out.tags.push(match class {
                                Some(c) if k == 0 && tag.starts_with("B-") => format!("B-{c}"),
                                Some(c) => format!("I-{c}"),
                                None => "O".into(),
                            });
                        }
                    }
                    _ => {
                        out.tokens.push(tok.clone());
                        out.tags.push(tag.clone());
                    }
                }
            }
            Ok(out)
        })
        .collect()
}

struct NliTemplates {
    items: fn(&ThemeLexicon) -> &[String],
    premise: [&'static [&'static str]; 2],
    hypothesis: [&'static [&'static str]; 2],
    unrelated: &'static [&'static str],
}

const CLINICAL_NLI: NliTemplates = NliTemplates {
    items: |l| &l.problems,
    premise: [
        &["the patient has {X} .", "{X} was noted on exam .", "exam today revealed {X} ."],
        &["the patient denies {X} .", "no evidence of {X} on exam .", "{X} was ruled out ."],
    ],
    hypothesis: [
        &["{X} is present .", "the patient has {X} ."],
        &["{X} is absent .", "the patient does not have {X} ."],
    ],
    unrelated: &["{R} was given overnight .", "{T} was ordered today .", "the patient received {R} ."],
};

const GENERAL_NLI: NliTemplates = NliTemplates {
    items: |l| &l.things,
    premise: [
        &["the {PER} has a {X} .", "a {X} was left with the {PER} ."],
        &["the {PER} lost the {X} .", "the {X} was taken from the {PER} ."],
    ],
    hypothesis: [&["the {PER} has the {X} .", "the {X} is there ."], &["the {X} is missing .", "the {X} is gone ."]],
    unrelated: &["the {EVT} was held near the {PLC} .", "many people attended the {EVT} today ."],
};

/// Three-way sentence pairs about one entity. Premise and hypothesis each
/// assert or deny it: equal polarity is entailment, opposite polarity is
/// contradiction. Neutral hypotheses state an unrelated fact. Labels are
/// exactly balanced when `n` is a multiple of three.
pub fn nli_examples(theme: Theme, n: usize, seed: u64) -> Vec<NliExample> {
    let lex = ThemeLexicon::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = match theme {
        Theme::Clinical => &CLINICAL_NLI,
        Theme::General => &GENERAL_NLI,
    };
    let mut labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    labels.shuffle(&mut rng);
    labels
        .into_iter()
        .map(|label| {
            let x = (t.items)(&lex).choose(&mut rng).expect("non-empty").clone();
            let p_pol = rng.random_range(0..2);
            let premise = t.premise[p_pol].choose(&mut rng).expect("non-empty").replace("{X}", &x);
            let h = match label {
                0 => t.hypothesis[p_pol].choose(&mut rng).expect("non-empty").replace("{X}", &x),
                1 => t.hypothesis[1 - p_pol].choose(&mut rng).expect("non-empty").replace("{X}", &x),
                _ => t.unrelated.choose(&mut rng).expect("non-empty").to_string(),
            };
            NliExample {
                premise: sentence(&premise, &lex, &mut rng),
                hypothesis: sentence(&h, &lex, &mut rng),
                label: NLI_LABELS[label].to_string(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskFiles {
    Span(Vec<TaggedSentence>),
    Nli(Vec<NliExample>),
}

impl TaskFiles {
    /// CoNLL text for span tasks, TSV for NLI.
    pub fn render(&self) -> String {
        match self {
            TaskFiles::Span(s) => to_conll(s),
            TaskFiles::Nli(e) => to_nli_tsv(e),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }
}

/// Templated task data for `spec`: clinical concepts, sentinel PHI or NLI.
pub fn synth_task_gen(spec: &TaskSpec, theme: Theme, n: usize, seed: u64) -> Result<TaskFiles> {
    if n == 0 {
        return Err(Error::Config("synthetic task size must be positive".into()));
    }
    match spec.kind {
        TaskKind::Nli => Ok(TaskFiles::Nli(nli_examples(theme, n, seed))),
        TaskKind::SpanLabeling if spec.classes == CLINICAL_CLASSES => {
            Ok(TaskFiles::Span(ner_sentences(theme, n, seed, EntityPool::All)))
        }
        TaskKind::SpanLabeling if spec.classes == TaskSpec::phi().classes => Ok(TaskFiles::Span(phi_sentences(n, seed))),
        TaskKind::SpanLabeling => Err(Error::Config(format!(
            "no synthetic generator for classes {:?}",
            spec.classes
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_note;
    use crate::tasks::{iob_decode, DecodeMode};

    #[test]
    fn deterministic_files() {
        let spec = TaskSpec::clinical_ner();
        let a = synth_task_gen(&spec, Theme::Clinical, 100, 3).unwrap().render();
        let b = synth_task_gen(&spec, Theme::Clinical, 100, 3).unwrap().render();
        assert_eq!(a, b);
        assert!(synth_task_gen(&spec, Theme::Clinical, 0, 3).is_err());
    }

    #[test]
    fn spans_round_trip() {
        for s in ner_sentences(Theme::General, 200, 1, EntityPool::All)
            .into_iter()
            .chain(phi_sentences(200, 2))
        {
            let spans = iob_decode(&s.tags, DecodeMode::Strict).unwrap();
            assert_eq!(iob_encode(&spans, s.tokens.len()).unwrap(), s.tags);
        }
    }

    #[test]
    fn pools_are_disjoint() {
        let lex = ThemeLexicon::default();
        for c in CLINICAL_CLASSES {
            let seen: BTreeSet<_> = lex.pool(c, EntityPool::Seen).into_iter().collect();
            let held: BTreeSet<_> = lex.pool(c, EntityPool::Heldout).into_iter().collect();
            assert!(seen.is_disjoint(&held) && !held.is_empty());
            assert_eq!(seen.len() + held.len(), lex.entities(c).len());
        }
    }

    #[test]
    fn sentinels_survive_sentence_splitting() {
        let c = sentinel_corpus(3, 4, 9);
        for note in &c.notes {
            for s in parse_note(note).sentences {
                assert_eq!(s.text.matches("[**").count(), s.text.matches("**]").count(), "{}", s.text);
            }
        }
    }

    #[test]
    fn surrogates_replace_every_sentinel() {
        let sents = phi_sentences(50, 4);
        let sur = surrogate_sentences(&sents, &SurrogatePolicy::default()).unwrap();
        for (a, b) in sents.iter().zip(&sur) {
            assert!(b.tokens.iter().all(|t| !t.contains("[**")));
            let ga = iob_decode(&a.tags, DecodeMode::Strict).unwrap();
            let gb = iob_decode(&b.tags, DecodeMode::Strict).unwrap();
            let la: Vec<_> = ga.iter().map(|s| &s.label).collect();
            let lb: Vec<_> = gb.iter().map(|s| &s.label).collect();
            assert_eq!(la, lb);
        }
    }

    #[test]
    fn memorization_sentences_distinct() {
        let c = memorization_corpus(64, 5);
        let sents: Vec<String> = c.notes.iter().flat_map(|n| parse_note(n).sentences).map(|s| s.text).collect();
        assert_eq!(sents.len(), 64);
        assert_eq!(sents.iter().collect::<BTreeSet<_>>().len(), 64);
    }

    #[test]
    fn nli_balanced() {
        let ex = nli_examples(Theme::Clinical, 300, 8);
        for l in NLI_LABELS {
            assert_eq!(ex.iter().filter(|e| e.label == l).count(), 100);
        }
    }
}
