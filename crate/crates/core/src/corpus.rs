//! Note ingestion, section parsing, rule-based sentence splitting and
//! corpus statistics.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Note {
    pub id: String,
    pub note_type: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoteFormat {
    Jsonl,
    Csv,
}

impl std::str::FromStr for NoteFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(NoteFormat::Jsonl),
            "csv" => Ok(NoteFormat::Csv),
            other => Err(Error::Config(format!("unknown note format {other:?}"))),
        }
    }
}

impl NoteFormat {
    pub fn from_path(path: &Path) -> NoteFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => NoteFormat::Csv,
            _ => NoteFormat::Jsonl,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NoteCollection {
    pub notes: Vec<Note>,
    /// Records rejected during lenient ingestion.
    pub skipped: usize,
}

impl NoteCollection {
    pub fn new(notes: Vec<Note>) -> Self {
        NoteCollection { notes, skipped: 0 }
    }

    pub fn len(&self) -> usize {
        self.notes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for n in &self.notes {
            out.push_str(&serde_json::to_string(n)?);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    id: Option<String>,
    note_type: Option<String>,
    text: Option<String>,
}

/// Reads notes from JSON Lines or CSV. In lenient mode malformed records,
/// empty texts and duplicate ids are counted in `skipped`; strict mode
/// turns them into errors.
pub fn ingest_notes(path: &Path, format: NoteFormat, strict: bool) -> Result<NoteCollection> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records: Vec<(usize, std::result::Result<RawRecord, String>)> = Vec::new();
    match format {
        NoteFormat::Jsonl => {
            for (i, line) in raw.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                records.push((
                    i + 1,
                    serde_json::from_str::<RawRecord>(line).map_err(|e| e.to_string()),
                ));
            }
        }
        NoteFormat::Csv => {
            let mut rdr = csv::ReaderBuilder::new()
                .has_headers(true)
                .flexible(true)
                .from_reader(raw.as_bytes());
            for (i, rec) in rdr.deserialize::<RawRecord>().enumerate() {
                records.push((i + 2, rec.map_err(|e| e.to_string())));
            }
        }
    }

    let mut seen = HashSet::new();
    let mut coll = NoteCollection::default();
    for (line, rec) in records {
        let verdict = rec.and_then(|r| match (r.id, r.note_type, r.text) {
            (Some(id), Some(note_type), Some(text)) => {
                if text.trim().is_empty() {
                    Err("empty text".to_string())
                } else if !seen.insert(id.clone()) {
                    Err(format!("duplicate id {id:?}"))
                } else {
                    Ok(Note {
                        id,
                        note_type,
                        text,
                    })
                }
            }
            _ => Err("missing id, note_type or text".to_string()),
        });
        match verdict {
            Ok(n) => coll.notes.push(n),
            Err(reason) if strict => return Err(Error::Record { line, reason }),
            Err(_) => coll.skipped += 1,
        }
    }
    Ok(coll)
}

pub fn filter_by_note_type(collection: &NoteCollection, types: &BTreeSet<String>) -> NoteCollection {
    NoteCollection {
        notes: collection
            .notes
            .iter()
            .filter(|n| types.contains(&n.note_type))
            .cloned()
            .collect(),
        skipped: 0,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub header: Option<String>,
    /// Byte span of the full header line (including any trailing colon).
    pub header_span: Option<(usize, usize)>,
    pub body: String,
    /// Byte span of `body` inside the note text.
    pub body_span: (usize, usize),
    /// Byte span from the start of the header (or body) to the end of the body.
    pub char_span: (usize, usize),
    pub empty_body: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub text: String,
    pub section_index: usize,
    /// Byte span inside the owning section's body.
    pub char_span: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeaderRule {
    pub max_tokens: usize,
}

impl Default for HeaderRule {
    fn default() -> Self {
        HeaderRule { max_tokens: 6 }
    }
}

impl HeaderRule {
    /// A line is a header when it has at most `max_tokens` whitespace tokens and
    /// either ends with a colon or is entirely uppercase letters, digits and
    /// punctuation (with at least one letter).
    pub fn is_header(&self, line: &str) -> bool {
        let t = line.trim();
        if t.is_empty() || t.split_whitespace().count() > self.max_tokens {
            return false;
        }
        if t.ends_with(':') {
            return true;
        }
        let mut has_letter = false;
        for c in t.chars() {
            if c.is_alphabetic() {
                if !c.is_uppercase() {
                    return false;
                }
                has_letter = true;
            } else if !(c.is_ascii_digit() || c.is_whitespace() || is_punct(c)) {
                return false;
            }
        }
        has_letter
    }
}

pub(crate) fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace() && !c.is_control())
}

fn trim_span(text: &str, start: usize, end: usize) -> (usize, usize) {
    let s = &text[start..end];
    let lead = s.len() - s.trim_start().len();
    let trail = s.len() - s.trim_end().len();
    if lead == s.len() {
        (start, start)
    } else {
        (start + lead, end - trail)
    }
}

pub fn sectionize(note: &Note) -> Vec<Section> {
    sectionize_with(note, &HeaderRule::default())
}

pub fn sectionize_with(note: &Note, rule: &HeaderRule) -> Vec<Section> {
    let text = note.text.as_str();
    // (line start, line end excluding newline)
    let mut lines = Vec::new();
    let mut start = 0;
    for (i, b) in text.bytes().enumerate() {
        if b == b'\n' {
            lines.push((start, i));
            start = i + 1;
        }
    }
    lines.push((start, text.len()));

    let mut sections = Vec::new();
    let mut header: Option<(String, (usize, usize))> = None;
    let mut body_start = 0;
    let flush = |sections: &mut Vec<Section>,
                 header: Option<(String, (usize, usize))>,
                 body_start: usize,
                 body_end: usize| {
        let (bs, be) = trim_span(text, body_start, body_end);
        if header.is_none() && bs == be {
            return;
        }
        let char_start = header.as_ref().map(|(_, s)| s.0).unwrap_or(bs);
        let char_end = if bs == be {
            header.as_ref().map(|(_, s)| s.1).unwrap_or(be)
        } else {
            be
        };
        let (hdr, hspan) = match header {
            Some((h, s)) => (Some(h), Some(s)),
            None => (None, None),
        };
        sections.push(Section {
            header: hdr,
            header_span: hspan,
            body: text[bs..be].to_string(),
            body_span: (bs, be),
            char_span: (char_start, char_end),
            empty_body: bs == be,
        });
    };

    for &(ls, le) in &lines {
        let line = &text[ls..le];
        if rule.is_header(line) {
            flush(&mut sections, header.take(), body_start, ls);
            let (hs, he) = trim_span(text, ls, le);
            let name = text[hs..he].trim_end_matches(':').trim().to_string();
            header = Some((name, (hs, he)));
            body_start = le.min(text.len());
        }
    }
    flush(&mut sections, header.take(), body_start, text.len());

    if sections.is_empty() {
        sections.push(Section {
            header: None,
            header_span: None,
            body: String::new(),
            body_span: (0, 0),
            char_span: (0, 0),
            empty_body: true,
        });
    }
    sections
}

/// Lowercased abbreviations (with their final period) that never end a sentence.
pub const ABBREVIATIONS: &[&str] = &[
    "dr.", "drs.", "pt.", "pts.", "mr.", "mrs.", "ms.", "vs.", "etc.", "a.m.", "p.m.", "e.g.",
    "i.e.", "no.", "st.", "approx.", "hx.", "b.i.d.", "t.i.d.", "q.i.d.", "q.d.", "p.o.", "p.r.n.",
    "prn.", "sr.", "jr.", "fig.", "mg.", "ml.", "yo.", "y.o.", "u.s.", "dept.", "inc.",
];

/// Byte ranges of `[** ... **]` sentinels; boundaries never fall inside them.
fn protected_ranges(text: &str) -> Vec<(usize, usize)> {
    crate::deid::find_sentinels(text, &crate::deid::SentinelPattern::default())
        .into_iter()
        .map(|s| s.char_span)
        .collect()
}

pub fn split_sentences(section: &Section, section_index: usize) -> Vec<Sentence> {
    split_text(&section.body)
        .into_iter()
        .map(|(s, e)| Sentence {
            text: section.body[s..e].to_string(),
            section_index,
            char_span: (s, e),
        })
        .collect()
}

/// Sentence byte spans in `text`. Boundaries fall after terminal punctuation
/// followed by whitespace, and at blank-line paragraph breaks.
pub fn split_text(text: &str) -> Vec<(usize, usize)> {
    let protected = protected_ranges(text);
    let inside = |i: usize| protected.iter().any(|&(s, e)| i >= s && i < e);
    let bytes = text.as_bytes();
    let mut cuts = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        if matches!(b, b'.' | b'!' | b'?') && !inside(i) {
            // absorb runs of terminal punctuation and closing quotes/brackets
            let mut j = i + 1;
            while j < bytes.len() && matches!(bytes[j], b'.' | b'!' | b'?' | b'"' | b'\'' | b')') {
                j += 1;
            }
            let at_break = j >= bytes.len() || bytes[j].is_ascii_whitespace();
            if at_break && !(b == b'.' && is_abbreviation(text, i)) {
                cuts.push(j);
            }
            i = j;
            continue;
        }
        if b == b'\n' && !inside(i) {
            // paragraph break: newline, optional spaces, newline
            let mut j = i + 1;
            while j < bytes.len() && matches!(bytes[j], b' ' | b'\t' | b'\r') {
                j += 1;
            }
            if j < bytes.len() && bytes[j] == b'\n' {
                cuts.push(i);
            }
        }
        i += 1;
    }
    cuts.push(text.len());

    let mut out = Vec::new();
    let mut start = 0;
    for cut in cuts {
        if cut < start {
            continue;
        }
        let (s, e) = trim_span(text, start, cut);
        if s < e {
            out.push((s, e));
        }
        start = cut;
    }
    out
}

fn is_abbreviation(text: &str, dot: usize) -> bool {
    let word_start = text[..dot]
        .rfind(|c: char| c.is_whitespace() || c == '(')
        .map(|p| p + 1)
        .unwrap_or(0);
    let word = text[word_start..=dot].to_lowercase();
    if ABBREVIATIONS.contains(&word.as_str()) {
        return true;
    }
    // single-letter initial such as "J."
    let stem = &word[..word.len() - 1];
    stem.chars().count() == 1 && stem.chars().all(|c| c.is_alphabetic())
}

/// A note with its sections and sentences resolved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedNote {
    pub id: String,
    pub note_type: String,
    pub sections: Vec<Section>,
    pub sentences: Vec<Sentence>,
}

pub fn parse_note(note: &Note) -> ParsedNote {
    let sections = sectionize(note);
    let sentences = sections
        .iter()
        .enumerate()
        .flat_map(|(i, s)| split_sentences(s, i))
        .collect();
    ParsedNote {
        id: note.id.clone(),
        note_type: note.note_type.clone(),
        sections,
        sentences,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub notes: usize,
    pub skipped: usize,
    pub type_counts: BTreeMap<String, usize>,
    pub sections: usize,
    pub empty_sections: usize,
    pub sentences: usize,
}

impl StatsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("type,count\n");
        for (t, c) in &self.type_counts {
            out.push_str(&format!("{},{}\n", csv_field(t), c));
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn note_type_stats(collection: &NoteCollection) -> StatsReport {
    let mut r = StatsReport {
        notes: collection.len(),
        skipped: collection.skipped,
        ..Default::default()
    };
    for n in &collection.notes {
        *r.type_counts.entry(n.note_type.clone()).or_default() += 1;
        let parsed = parse_note(n);
        r.sections += parsed.sections.len();
        r.empty_sections += parsed.sections.iter().filter(|s| s.empty_body).count();
        r.sentences += parsed.sentences.len();
    }
    r
}

/// Note-type counts of the full MIMIC-III release, kept as reference data.
pub const MIMIC_TYPE_COUNTS: &[(&str, usize)] = &[
    ("Nursing/other", 822_497),
    ("Radiology", 522_279),
    ("Nursing", 223_556),
    ("ECG", 209_051),
    ("Physician", 141_624),
    ("Discharge Summary", 59_652),
    ("Other", 104_521),
];

#[cfg(test)]
mod tests {
    use super::*;

    fn note(text: &str) -> Note {
        Note {
            id: "n1".into(),
            note_type: "Discharge Summary".into(),
            text: text.into(),
        }
    }

    #[test]
    fn two_headers() {
        let n = note("CHIEF COMPLAINT:\nchest pain\n\nHPI:\nworsening dyspnea");
        let s = sectionize(&n);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].header.as_deref(), Some("CHIEF COMPLAINT"));
        assert_eq!(s[0].body, "chest pain");
        assert_eq!(s[1].header.as_deref(), Some("HPI"));
        assert_eq!(s[1].body, "worsening dyspnea");
        assert_eq!(&n.text[s[1].body_span.0..s[1].body_span.1], "worsening dyspnea");
    }

    #[test]
    fn no_header() {
        let s = sectionize(&note("patient resting comfortably"));
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].header, None);
        assert!(!s[0].empty_body);
    }

    #[test]
    fn header_only_is_flagged() {
        let s = sectionize(&note("ALLERGIES:"));
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].header.as_deref(), Some("ALLERGIES"));
        assert_eq!(s[0].body, "");
        assert!(s[0].empty_body);
    }

    #[test]
    fn header_rule() {
        let r = HeaderRule::default();
        assert!(r.is_header("Discharge Medications:"));
        assert!(r.is_header("PHYSICAL EXAM"));
        assert!(!r.is_header("patient is doing well"));
        assert!(!r.is_header("one two three four five six seven:"));
        assert!(!r.is_header("12."));
    }

    #[test]
    fn sentence_rules() {
        assert_eq!(split_text("Pt is stable. Will monitor overnight.").len(), 2);
        assert_eq!(split_text("Seen by Dr. Smith at 10 a.m. today.").len(), 1);
        assert!(split_text("").is_empty());
        assert_eq!(split_text("first para\n\nsecond para").len(), 2);
        assert_eq!(split_text("one line\ncontinues here").len(), 1);
    }

    #[test]
    fn no_split_inside_sentinel() {
        let s = split_text("Seen by [**Dr. First Name. Last**] today. Stable.");
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn stats() {
        let mut notes = Vec::new();
        for i in 0..3 {
            notes.push(Note {
                id: format!("d{i}"),
                note_type: "Discharge Summary".into(),
                text: "x".into(),
            });
        }
        for i in 0..2 {
            notes.push(Note {
                id: format!("n{i}"),
                note_type: "Nursing".into(),
                text: "y".into(),
            });
        }
        let r = note_type_stats(&NoteCollection::new(notes));
        assert_eq!(r.type_counts["Discharge Summary"], 3);
        assert_eq!(r.type_counts["Nursing"], 2);
        assert_eq!(r.to_csv(), "type,count\nDischarge Summary,3\nNursing,2\n");
        let empty = note_type_stats(&NoteCollection::default());
        assert_eq!(empty.notes, 0);
        assert!(empty.type_counts.is_empty());
    }

    #[test]
    fn reference_counts_are_recorded() {
        let ds = MIMIC_TYPE_COUNTS
            .iter()
            .find(|(t, _)| *t == "Discharge Summary")
            .unwrap();
        assert_eq!(ds.1, 59_652);
    }
}
