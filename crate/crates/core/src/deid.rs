//! Sentinel PHI detection, consistent surrogate substitution and sentinel
//! prevalence measurement.
//!
//! Sentinels follow the bracket-star convention, e.g. `[**Hospital1 18**]`.
//! Matching is leftmost-maximal: a match starts at the leftmost unconsumed
//! opener and ends where the opener/closer nesting depth returns to zero, so
//! `[**a [**b**]**]` is a single sentinel. An opener that is never balanced
//! starts no match.

use std::collections::BTreeMap;

use chrono::{Datelike, Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::hashing::stable_u64;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SentinelPattern {
    pub open: String,
    pub close: String,
}

impl Default for SentinelPattern {
    fn default() -> Self {
        SentinelPattern {
            open: "[**".into(),
            close: "**]".into(),
        }
    }
}

impl SentinelPattern {
    pub fn validate(&self) -> Result<()> {
        if self.open.is_empty() || self.close.is_empty() {
            return Err(Error::Config("sentinel delimiters must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhiCategory {
    Name,
    Date,
    Hospital,
    Location,
    Id,
    Other,
}

impl PhiCategory {
    pub const ALL: [PhiCategory; 6] = [
        PhiCategory::Name,
        PhiCategory::Date,
        PhiCategory::Hospital,
        PhiCategory::Location,
        PhiCategory::Id,
        PhiCategory::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PhiCategory::Name => "name",
            PhiCategory::Date => "date",
            PhiCategory::Hospital => "hospital",
            PhiCategory::Location => "location",
            PhiCategory::Id => "id",
            PhiCategory::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentinelSpan {
    /// Byte span of the whole sentinel in the source text.
    pub char_span: (usize, usize),
    pub raw: String,
    pub category: PhiCategory,
    /// Inner content, trimmed and whitespace-collapsed.
    pub key: String,
}

pub fn find_sentinels(text: &str, pattern: &SentinelPattern) -> Vec<SentinelSpan> {
    let (open, close) = (pattern.open.as_str(), pattern.close.as_str());
    if open.is_empty() || close.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut pos = 0;
    while let Some(rel) = text[pos..].find(open) {
        let start = pos + rel;
        let mut depth = 0usize;
        let mut i = start;
        let mut end = None;
        while i < text.len() {
            if text[i..].starts_with(open) {
                depth += 1;
                i += open.len();
            } else if text[i..].starts_with(close) {
                depth -= 1;
                i += close.len();
                if depth == 0 {
                    end = Some(i);
                    break;
                }
            } else {
                i += text[i..].chars().next().map(char::len_utf8).unwrap_or(1);
            }
        }
        match end {
            Some(end) => {
                let raw = &text[start..end];
                let inner = &raw[open.len()..raw.len() - close.len()];
                let key = inner.split_whitespace().collect::<Vec<_>>().join(" ");
                out.push(SentinelSpan {
                    char_span: (start, end),
                    raw: raw.to_string(),
                    category: infer_category(&key),
                    key,
                });
                pos = end;
            }
            None => pos = start + open.len(),
        }
    }
    out
}

/// Category from sentinel content: digit-dash/slash patterns are dates,
/// keyword rules cover the rest.
pub fn infer_category(key: &str) -> PhiCategory {
    if parse_date(key).is_some() {
        return PhiCategory::Date;
    }
    let k = key.to_lowercase();
    let has = |words: &[&str]| words.iter().any(|w| k.contains(w));
    if has(&["hospital", "clinic", "ward"]) {
        PhiCategory::Hospital
    } else if has(&["name", "initials"]) {
        PhiCategory::Name
    } else if has(&["location", "address", "street", "city", "state", "country", "zip"]) {
        PhiCategory::Location
    } else if has(&[
        "number", "record", "telephone", "phone", "serial", "unit no", "identifier", "job",
    ]) || (!k.is_empty() && k.chars().all(|c| c.is_ascii_digit()))
    {
        PhiCategory::Id
    } else if has(&["year", "month", "date", "day"]) {
        PhiCategory::Date
    } else {
        PhiCategory::Other
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DateLayout {
    Ymd,
    Md,
    Mdy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ParsedDate {
    layout: DateLayout,
    sep: char,
    date: NaiveDate,
}

/// Year used for month-day dates that carry no year; it is not a leap year.
const MONTH_DAY_YEAR: i32 = 2001;

fn parse_date(s: &str) -> Option<ParsedDate> {
    let sep = if s.contains('-') {
        '-'
    } else if s.contains('/') {
        '/'
    } else {
        return None;
    };
    let parts: Vec<&str> = s.split(sep).collect();
    if parts
        .iter()
        .any(|p| p.is_empty() || p.len() > 4 || !p.chars().all(|c| c.is_ascii_digit()))
    {
        return None;
    }
    let nums: Vec<i64> = parts.iter().map(|p| p.parse().ok()).collect::<Option<_>>()?;
    let (layout, y, m, d) = match (parts.len(), parts[0].len()) {
        (3, 4) => (DateLayout::Ymd, nums[0], nums[1], nums[2]),
        (3, _) => (DateLayout::Mdy, nums[2], nums[0], nums[1]),
        (2, l) if l <= 2 => (DateLayout::Md, MONTH_DAY_YEAR as i64, nums[0], nums[1]),
        _ => return None,
    };
    let date = NaiveDate::from_ymd_opt(y as i32, m as u32, d as u32)?;
    Some(ParsedDate { layout, sep, date })
}

/// Shifts a date string by `days`, keeping its layout and separator.
pub fn shift_date(s: &str, days: i64) -> Option<String> {
    let p = parse_date(s)?;
    let d = p.date.checked_add_signed(Duration::days(days))?;
    let sep = p.sep;
    Some(match p.layout {
        DateLayout::Ymd => format!("{}{sep}{}{sep}{}", d.year(), d.month(), d.day()),
        DateLayout::Mdy => format!("{}{sep}{}{sep}{}", d.month(), d.day(), d.year()),
        DateLayout::Md => format!("{}{sep}{}", d.month(), d.day()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyScope {
    PerNote,
    PerCorpus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicons {
    pub first_names: Vec<String>,
    pub last_names: Vec<String>,
    pub hospitals: Vec<String>,
    pub locations: Vec<String>,
    pub other: Vec<String>,
}

fn lines(s: &str) -> Vec<String> {
    s.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect()
}

impl Default for Lexicons {
    fn default() -> Self {
        Lexicons {
            first_names: lines(include_str!("../lexicons/first_names.txt")),
            last_names: lines(include_str!("../lexicons/last_names.txt")),
            hospitals: lines(include_str!("../lexicons/hospitals.txt")),
            locations: lines(include_str!("../lexicons/locations.txt")),
            other: lines(include_str!("../lexicons/other_phi.txt")),
        }
    }
}

impl Lexicons {
    pub fn load_dir(dir: &std::path::Path) -> Result<Self> {
        let read = |name: &str| -> Result<Vec<String>> {
            let p = dir.join(name);
            Ok(lines(&std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?))
        };
        Ok(Lexicons {
            first_names: read("first_names.txt")?,
            last_names: read("last_names.txt")?,
            hospitals: read("hospitals.txt")?,
            locations: read("locations.txt")?,
            other: read("other_phi.txt")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogatePolicy {
    pub lexicons: Lexicons,
    pub date_shift_days: i64,
    pub seed: u64,
    pub scope: ConsistencyScope,
    pub pattern: SentinelPattern,
}

impl Default for SurrogatePolicy {
    fn default() -> Self {
        SurrogatePolicy {
            lexicons: Lexicons::default(),
            date_shift_days: 30,
            seed: 0,
            scope: ConsistencyScope::PerNote,
            pattern: SentinelPattern::default(),
        }
    }
}

impl SurrogatePolicy {
    fn pick<'a>(&self, list: &'a [String], what: &str, h: u64) -> Result<&'a str> {
        if list.is_empty() {
            return Err(Error::Config(format!("surrogate lexicon for {what} is empty")));
        }
        Ok(&list[(h % list.len() as u64) as usize])
    }

    /// Surrogate for one sentinel. The draw is a pure function of the key,
    /// the seed and (for per-note scope) the note id, which makes repeated
    /// keys within a scope map to the same string.
    pub fn surrogate_for(&self, note_id: &str, span: &SentinelSpan) -> Result<String> {
        let scope_id = match self.scope {
            ConsistencyScope::PerNote => note_id,
            ConsistencyScope::PerCorpus => "",
        };
        let seed = self.seed.to_le_bytes();
        let h = stable_u64(&[&seed, scope_id.as_bytes(), span.key.as_bytes()]);
        let lex = &self.lexicons;
        Ok(match span.category {
            PhiCategory::Date => match shift_date(&span.key, self.date_shift_days) {
                Some(s) => s,
                // keyword dates such as "Year (4 digits)" have no value to shift
                None => {
                    let base = NaiveDate::from_ymd_opt(2100, 1, 1).expect("valid date");
                    let d = base + Duration::days((h % 3650) as i64 + self.date_shift_days);
                    format!("{}-{}-{}", d.year(), d.month(), d.day())
                }
            },
            PhiCategory::Name => {
                let k = span.key.to_lowercase();
                if k.contains("first") || k.contains("known firstname") {
                    self.pick(&lex.first_names, "first names", h)?.to_string()
                } else if k.contains("last") || k.contains("lastname") {
                    self.pick(&lex.last_names, "last names", h)?.to_string()
                } else {
                    format!(
                        "{} {}",
                        self.pick(&lex.first_names, "first names", h)?,
                        self.pick(&lex.last_names, "last names", h >> 17)?
                    )
                }
            }
            PhiCategory::Hospital => self.pick(&lex.hospitals, "hospitals", h)?.to_string(),
            PhiCategory::Location => self.pick(&lex.locations, "locations", h)?.to_string(),
            PhiCategory::Id => format!("{:07}", h % 10_000_000),
            PhiCategory::Other => self.pick(&lex.other, "other", h)?.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentEntry {
    pub orig_span: (usize, usize),
    pub new_span: (usize, usize),
    pub category: PhiCategory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentMap {
    pub note_id: String,
    pub entries: Vec<AlignmentEntry>,
}

impl AlignmentMap {
    /// Maps an original byte offset outside every sentinel to its output offset.
    pub fn map_offset(&self, orig: usize) -> Option<usize> {
        let mut delta: i64 = 0;
        for e in &self.entries {
            if orig >= e.orig_span.1 {
                delta += (e.new_span.1 - e.new_span.0) as i64 - (e.orig_span.1 - e.orig_span.0) as i64;
            } else if orig >= e.orig_span.0 {
                return None;
            }
        }
        Some((orig as i64 + delta) as usize)
    }
}

/// Replaces every sentinel in `note` with its surrogate.
pub fn surrogate_substitute(
    note: &crate::corpus::Note,
    policy: &SurrogatePolicy,
) -> Result<(crate::corpus::Note, AlignmentMap)> {
    let (text, entries) = substitute_text(&note.id, &note.text, policy)?;
    Ok((
        crate::corpus::Note {
            id: note.id.clone(),
            note_type: note.note_type.clone(),
            text,
        },
        AlignmentMap {
            note_id: note.id.clone(),
            entries,
        },
    ))
}

pub fn substitute_text(
    note_id: &str,
    text: &str,
    policy: &SurrogatePolicy,
) -> Result<(String, Vec<AlignmentEntry>)> {
    policy.pattern.validate()?;
    let spans = find_sentinels(text, &policy.pattern);
    let mut out = String::with_capacity(text.len());
    let mut entries = Vec::with_capacity(spans.len());
    let mut last = 0;
    for s in &spans {
        out.push_str(&text[last..s.char_span.0]);
        let sub = policy.surrogate_for(note_id, s)?;
        let new_start = out.len();
        out.push_str(&sub);
        entries.push(AlignmentEntry {
            orig_span: s.char_span,
            new_span: (new_start, out.len()),
            category: s.category,
        });
        last = s.char_span.1;
    }
    out.push_str(&text[last..]);
    Ok((out, entries))
}

pub fn alignment_jsonl(maps: &[AlignmentMap]) -> Result<String> {
    let mut out = String::new();
    for m in maps {
        out.push_str(&serde_json::to_string(m)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrevalenceReport {
    pub sentences: usize,
    pub sentences_with_sentinel: usize,
    /// `None` when the corpus has no sentences.
    pub fraction: Option<f64>,
    pub category_counts: BTreeMap<PhiCategory, usize>,
}

pub fn sentinel_prevalence<'a>(
    sentences: impl IntoIterator<Item = &'a str>,
    pattern: &SentinelPattern,
) -> PrevalenceReport {
    let mut r = PrevalenceReport::default();
    for c in PhiCategory::ALL {
        r.category_counts.insert(c, 0);
    }
    for s in sentences {
        r.sentences += 1;
        let found = find_sentinels(s, pattern);
        if !found.is_empty() {
            r.sentences_with_sentinel += 1;
        }
        for f in found {
            *r.category_counts.entry(f.category).or_default() += 1;
        }
    }
    r.fraction = (r.sentences > 0).then(|| r.sentences_with_sentinel as f64 / r.sentences as f64);
    r
}

pub fn corpus_prevalence(collection: &crate::corpus::NoteCollection, pattern: &SentinelPattern) -> PrevalenceReport {
    let parsed: Vec<_> = collection.notes.iter().map(crate::corpus::parse_note).collect();
    sentinel_prevalence(
        parsed.iter().flat_map(|p| p.sentences.iter().map(|s| s.text.as_str())),
        pattern,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Note;

    fn pat() -> SentinelPattern {
        SentinelPattern::default()
    }

    #[test]
    fn finds_hospital_and_date() {
        let s = find_sentinels("seen at [**Hospital1**] on [**2101-4-5**]", &pat());
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].category, PhiCategory::Hospital);
        assert_eq!(s[1].category, PhiCategory::Date);
        assert_eq!(s[1].key, "2101-4-5");
        assert!(find_sentinels("nothing here", &pat()).is_empty());
    }

    #[test]
    fn nested_is_one_maximal_match() {
        let t = "x [**a [**b**]**] y";
        let s = find_sentinels(t, &pat());
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].raw, "[**a [**b**]**]");
        // unbalanced opener is skipped, later sentinel still found
        let s = find_sentinels("[**open then [**Hospital1**] end", &pat());
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].raw, "[**Hospital1**]");
    }

    #[test]
    fn categories() {
        assert_eq!(infer_category("Known firstname 123"), PhiCategory::Name);
        assert_eq!(infer_category("Last Name (NamePattern1) 45"), PhiCategory::Name);
        assert_eq!(infer_category("Location (un) 55"), PhiCategory::Location);
        assert_eq!(infer_category("Medical Record Number 4"), PhiCategory::Id);
        assert_eq!(infer_category("4-5"), PhiCategory::Date);
        assert_eq!(infer_category("Year (4 digits) 12"), PhiCategory::Date);
        assert_eq!(infer_category("Company 7"), PhiCategory::Other);
    }

    #[test]
    fn date_shift() {
        assert_eq!(shift_date("2101-4-5", 30).as_deref(), Some("2101-5-5"));
        assert_eq!(shift_date("2101-12-20", 15).as_deref(), Some("2102-1-4"));
        assert_eq!(shift_date("4/5/2101", 30).as_deref(), Some("5/5/2101"));
        assert_eq!(shift_date("2-20", 10).as_deref(), Some("3-2"));
        assert_eq!(shift_date("not-a-date", 1), None);
    }

    #[test]
    fn consistent_substitution() {
        let n = Note {
            id: "a".into(),
            note_type: "Nursing".into(),
            text: "at [**Hospital1**] then back to [**Hospital1**] on [**2101-4-5**]".into(),
        };
        let (out, map) = surrogate_substitute(&n, &SurrogatePolicy::default()).unwrap();
        assert!(find_sentinels(&out.text, &pat()).is_empty());
        let e = &map.entries;
        assert_eq!(e.len(), 3);
        let s0 = &out.text[e[0].new_span.0..e[0].new_span.1];
        let s1 = &out.text[e[1].new_span.0..e[1].new_span.1];
        assert_eq!(s0, s1);
        assert_eq!(&out.text[e[2].new_span.0..e[2].new_span.1], "2101-5-5");
        // non-sentinel characters keep their identity through the map
        for (i, ch) in n.text.char_indices() {
            if let Some(j) = map.map_offset(i) {
                assert_eq!(out.text[j..].chars().next(), Some(ch));
            }
        }
    }

    #[test]
    fn identity_without_sentinels() {
        let n = Note {
            id: "a".into(),
            note_type: "Nursing".into(),
            text: "plain text only".into(),
        };
        let (out, map) = surrogate_substitute(&n, &SurrogatePolicy::default()).unwrap();
        assert_eq!(out.text, n.text);
        assert!(map.entries.is_empty());
    }

    #[test]
    fn empty_lexicon_is_error() {
        let mut p = SurrogatePolicy::default();
        p.lexicons.hospitals.clear();
        let n = Note {
            id: "a".into(),
            note_type: "x".into(),
            text: "[**Hospital1**]".into(),
        };
        assert!(surrogate_substitute(&n, &p).is_err());
    }

    #[test]
    fn prevalence() {
        let mut sents = vec!["plain"; 6];
        sents.extend(["at [**Hospital1**]"; 4]);
        let r = sentinel_prevalence(sents.iter().copied(), &pat());
        assert_eq!(r.fraction, Some(0.4));
        assert_eq!(r.category_counts[&PhiCategory::Hospital], 4);
        let e = sentinel_prevalence(std::iter::empty(), &pat());
        assert_eq!(e.fraction, None);
        assert_eq!(e.sentences, 0);
    }
}
