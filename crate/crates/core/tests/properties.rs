use std::collections::{BTreeMap, BTreeSet};

use notebert::corpus::{parse_note, sectionize, split_text, Note};
use notebert::deid::{find_sentinels, surrogate_substitute, ConsistencyScope, SentinelPattern, SurrogatePolicy};
use notebert::pretrain_data::{mask_instance, PretrainConfig};
use notebert::tasks::{exact_span_f1, iob_decode, iob_encode, DecodeMode, Span, TaskSpec};
use notebert::tokenizer::{detokenize, encode_for_model, tokenize, Vocab, SPECIALS};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const WORDS: &[&str] = &[
    "fever", "cough", "chest", "pain", "aspirin", "given", "the", "patient", "denies", "stable", "xray", "ordered",
];

fn word_vocab() -> Vocab {
    let mut t: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    t.extend(WORDS.iter().map(|w| w.to_string()));
    t.extend([".", ",", ":", "##s", "##ed"].map(String::from));
    Vocab::from_tokens(t).unwrap()
}

fn word() -> impl Strategy<Value = String> {
    // the trailing q keeps words clear of the abbreviation list
    "[a-z]{2,7}q"
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 1..8).prop_map(|w| format!("{}.", w.join(" ")))
}

fn header() -> impl Strategy<Value = String> {
    prop_oneof!["[A-Z]{3,10}", "[A-Z][a-z]{2,8}:"]
}

fn note_text() -> impl Strategy<Value = String> {
    let section = (prop::option::of(header()), prop::collection::vec(sentence(), 0..4), "[ \n]{0,3}")
        .prop_map(|(h, body, pad)| {
            let mut s = h.map(|h| format!("{h}\n")).unwrap_or_default();
            s.push_str(&body.join(" "));
            s.push_str(&pad);
            s
        });
    prop::collection::vec(section, 0..5).prop_map(|s| s.join("\n"))
}

fn spans_strategy(len: usize) -> impl Strategy<Value = Vec<Span>> {
    // cut points split 0..len into segments, each either a span or outside
    prop::collection::vec((any::<bool>(), 0..3usize, 1..4usize), 0..len.max(1)).prop_map(move |segs| {
        let mut spans = Vec::new();
        let mut i = 0;
        for (keep, class, width) in segs {
            if i + width > len {
                break;
            }
            if keep {
                spans.push(Span::new(i, i + width - 1, ["A", "B", "C"][class]));
            }
            i += width;
        }
        spans
    })
}

fn random_spans() -> impl Strategy<Value = Vec<Vec<Span>>> {
    let span = (0..6usize, 0..3usize, 0..2usize).prop_map(|(s, w, c)| Span::new(s, s + w, ["A", "B"][c]));
    prop::collection::vec(prop::collection::vec(span, 0..5), 0..5)
}

fn sentinel_note() -> impl Strategy<Value = Note> {
    let piece = prop_oneof![
        word(),
        Just("[**First Name 12**]".to_string()),
        Just("[**Last Name (NamePattern1) 7**]".to_string()),
        Just("[**Hospital 3**]".to_string()),
        Just("[**2101-3-14**]".to_string()),
        Just("[**Location 99**]".to_string()),
        Just("[**Known firstname 4**]".to_string()),
    ];
    (prop::collection::vec(piece, 0..30), "[a-z]{1,4}").prop_map(|(p, id)| Note {
        id,
        note_type: "Nursing".into(),
        text: p.join(" "),
    })
}

proptest! {
    #[test]
    fn sections_cover_non_whitespace(text in note_text()) {
        let note = Note { id: "n".into(), note_type: "t".into(), text };
        let sections = sectionize(&note);
        let mut covered = vec![0u8; note.text.len()];
        let mut last_end = 0;
        for s in &sections {
            prop_assert!(s.char_span.0 >= last_end, "sections overlap or are out of order");
            last_end = s.char_span.1;
            for c in &mut covered[s.char_span.0..s.char_span.1] {
                *c += 1;
            }
        }
        for (i, c) in note.text.char_indices() {
            if !c.is_whitespace() {
                prop_assert_eq!(covered[i], 1, "byte {} ({:?}) not covered exactly once", i, c);
            }
        }
        prop_assert_eq!(&sections, &sectionize(&note));
    }

    #[test]
    fn split_recovers_joined_sentences(sentences in prop::collection::vec(sentence(), 1..10)) {
        let text = sentences.join(" ");
        let got: Vec<&str> = split_text(&text).into_iter().map(|(s, e)| &text[s..e]).collect();
        prop_assert_eq!(got, sentences.iter().map(String::as_str).collect::<Vec<_>>());
    }

    #[test]
    fn parsed_sentences_are_trimmed_and_ordered(text in note_text()) {
        let parsed = parse_note(&Note { id: "n".into(), note_type: "t".into(), text });
        for pair in parsed.sentences.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            prop_assert!(a.section_index < b.section_index || a.char_span.1 <= b.char_span.0);
        }
        for s in &parsed.sentences {
            prop_assert!(!s.text.trim().is_empty());
            prop_assert_eq!(s.text.trim(), s.text.as_str());
        }
    }

    #[test]
    fn detokenize_inverts_covered_text(words in prop::collection::vec(
        prop_oneof![prop::sample::select(WORDS).prop_map(String::from), Just("fevers".into()), Just(".".into())],
        0..20,
    ), spaces in prop::collection::vec("[ \t\n]{1,3}", 20)) {
        let vocab = word_vocab();
        let text: String = words.iter().zip(&spaces).map(|(w, s)| format!("{w}{s}")).collect();
        let seq = tokenize(&text, &vocab, false);
        prop_assert_eq!(detokenize(&seq.pieces), words.join(" "));
        prop_assert_eq!(seq.ids.len(), seq.pieces.len());
        let sp = vocab.specials();
        prop_assert!(seq.ids.iter().all(|&id| id != sp.cls && id != sp.sep && id != sp.mask));
    }

    #[test]
    fn tokenize_never_emits_structural_specials(text in "[a-zA-Z \\[\\]#.]{0,60}") {
        let vocab = word_vocab();
        let sp = vocab.specials();
        let seq = tokenize(&text, &vocab, false);
        prop_assert!(seq.ids.iter().all(|&id| id != sp.cls && id != sp.sep && id != sp.mask && (id as usize) < vocab.len()));
    }

    #[test]
    fn attention_mask_counts_non_pad(a in prop::collection::vec(5u32..15, 0..40), b in prop::option::of(prop::collection::vec(5u32..15, 0..40)), max_len in 3usize..48) {
        let vocab = word_vocab();
        let enc = encode_for_model(&a, b.as_deref(), &vocab, max_len.max(if b.is_some() { 3 } else { 2 })).unwrap();
        let pad = vocab.specials().pad;
        let real: usize = enc.attention_mask.iter().map(|&m| m as usize).sum();
        prop_assert_eq!(real, enc.ids.iter().filter(|&&id| id != pad).count());
        prop_assert_eq!(enc.ids.len(), enc.segment_ids.len());
    }

    #[test]
    fn masked_instance_invariants(a in 1usize..60, b in prop::option::of(1usize..60), max_predictions in 1usize..25, seed in any::<u64>()) {
        let vocab = word_vocab();
        let sp = vocab.specials();
        let config = PretrainConfig { max_seq_len: 128, max_predictions, ..PretrainConfig::default() };
        let body = |n: usize, off: usize| (0..n).map(|i| 5 + ((i + off) % WORDS.len()) as u32).collect::<Vec<_>>();
        let mut tokens = vec![sp.cls];
        tokens.extend(body(a, 0));
        tokens.push(sp.sep);
        let mut segs = vec![0; tokens.len()];
        if let Some(b) = b {
            tokens.extend(body(b, 3));
            tokens.push(sp.sep);
            segs.resize(tokens.len(), 1);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = mask_instance(&tokens, &segs, true, &vocab, &config, &mut rng).unwrap();

        prop_assert_eq!(inst.masked_positions.len(), inst.masked_labels.len());
        prop_assert!(inst.masked_positions.len() <= max_predictions);
        prop_assert!(inst.masked_positions.windows(2).all(|w| w[0] < w[1]));
        for (&p, &label) in inst.masked_positions.iter().zip(&inst.masked_labels) {
            prop_assert_eq!(label, tokens[p]);
            prop_assert!(tokens[p] != sp.cls && tokens[p] != sp.sep && tokens[p] != sp.pad);
        }
        prop_assert_eq!(inst.ids[0], sp.cls);
        prop_assert_eq!(inst.ids.iter().filter(|&&t| t == sp.sep).count(), if b.is_some() { 2 } else { 1 });
        let real = inst.real_len();
        prop_assert!(inst.ids[real..].iter().all(|&t| t == sp.pad));
        prop_assert_eq!(real, tokens.len());
        prop_assert!(inst.ids[..real].iter().all(|&t| t != sp.pad));
        for (i, (&id, &tok)) in inst.ids[..real].iter().zip(&tokens).enumerate() {
            if !inst.masked_positions.contains(&i) {
                prop_assert_eq!(id, tok);
            }
        }
    }

    #[test]
    fn iob_round_trip((len, spans) in (0usize..40).prop_flat_map(|n| (Just(n), spans_strategy(n)))) {
        let tags = iob_encode(&spans, len).unwrap();
        prop_assert_eq!(tags.len(), len);
        prop_assert_eq!(iob_decode(&tags, DecodeMode::Strict).unwrap(), spans.clone());
        prop_assert_eq!(iob_decode(&tags, DecodeMode::Lenient).unwrap(), spans);
    }

    #[test]
    fn f1_swap_exchanges_precision_and_recall(gold in random_spans(), pred_seed in random_spans()) {
        let pred: Vec<Vec<Span>> = (0..gold.len()).map(|i| pred_seed.get(i).cloned().unwrap_or_default()).collect();
        let a = exact_span_f1(&gold, &pred).unwrap();
        let b = exact_span_f1(&pred, &gold).unwrap();
        prop_assert_eq!(a.micro.precision, b.micro.recall);
        prop_assert_eq!(a.micro.recall, b.micro.precision);
        prop_assert_eq!(a.micro.tp, b.micro.tp);
        prop_assert!((a.micro.f1 - b.micro.f1).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&a.micro.f1));
    }

    #[test]
    fn f1_of_identical_sets_is_one(gold in random_spans()) {
        let r = exact_span_f1(&gold, &gold).unwrap();
        let any = gold.iter().any(|s| !s.is_empty());
        prop_assert_eq!(r.micro.f1, if any { 1.0 } else { 0.0 });
    }

    #[test]
    fn substitution_removes_every_sentinel(note in sentinel_note(), seed in any::<u64>(), corpus_scope in any::<bool>()) {
        let policy = SurrogatePolicy {
            seed,
            scope: if corpus_scope { ConsistencyScope::PerCorpus } else { ConsistencyScope::PerNote },
            ..SurrogatePolicy::default()
        };
        let pattern = SentinelPattern::default();
        let (out, map) = surrogate_substitute(&note, &policy).unwrap();
        prop_assert!(find_sentinels(&out.text, &pattern).is_empty());

        let originals = find_sentinels(&note.text, &pattern);
        prop_assert_eq!(originals.len(), map.entries.len());
        let mut by_key: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for (s, e) in originals.iter().zip(&map.entries) {
            prop_assert_eq!(s.char_span, e.orig_span);
            by_key.entry(s.key.as_str()).or_default().insert(&out.text[e.new_span.0..e.new_span.1]);
        }
        prop_assert!(by_key.values().all(|v| v.len() == 1), "a key maps to several surrogates: {:?}", by_key);

        for (i, c) in note.text.char_indices() {
            if let Some(j) = map.map_offset(i) {
                prop_assert_eq!(out.text[j..].chars().next(), Some(c));
            } else {
                prop_assert!(originals.iter().any(|s| i >= s.char_span.0 && i < s.char_span.1));
            }
        }
    }
}

#[test]
fn shipped_span_tasks_follow_label_dim_convention() {
    for spec in [TaskSpec::clinical_ner(), TaskSpec::phi()] {
        assert_eq!(spec.label_dim(), 2 * spec.classes.len() + 1, "{}", spec.name);
    }
    assert_eq!(TaskSpec::clinical_ner().label_dim(), 7);
    assert_eq!(TaskSpec::nli().label_dim(), 3);
}
