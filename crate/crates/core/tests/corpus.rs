use proptest::prelude::*;
use unlearnlab::corpus::{
    build_topic_datasets, generate_corpus, select_topic_words, Corpus, ToyLanguage,
    ToyLanguageSpec, MARKER, RESERVED,
};

fn spec(seed: u64) -> ToyLanguageSpec {
    ToyLanguageSpec {
        seed,
        ..Default::default()
    }
}

fn containing(corpus: &Corpus, word: usize) -> usize {
    corpus
        .pairs
        .iter()
        .filter(|p| p.source.contains(&word))
        .count()
}

#[test]
fn requested_bands_are_met() {
    let mut s = spec(3);
    // noun01 is the most frequent noun and must be thinned out; part07 is
    // rare and must be boosted.
    s.topic_frequency_targets.insert("noun01".into(), [40, 60]);
    s.topic_frequency_targets.insert("part07".into(), [40, 60]);
    let corpus = generate_corpus(&s, 1000).unwrap();
    for w in ["noun01", "part07"] {
        let n = containing(&corpus, corpus.vocab.id(w).unwrap());
        assert!((36..=66).contains(&n), "{w}: {n}");
    }
    let untouched = generate_corpus(&spec(3), 1000).unwrap();
    let before = containing(&untouched, untouched.vocab.id("noun01").unwrap());
    assert!(
        before > 66,
        "noun01 was expected to need lowering, has {before}"
    );
}

#[test]
fn topic_selection_band_edges() {
    let corpus = generate_corpus(&spec(1), 500).unwrap();
    let all = select_topic_words(&corpus, 0, usize::MAX);
    assert_eq!(all.len(), corpus.vocab.len() - RESERVED);
    assert!(select_topic_words(&corpus, 1_000_000_000, usize::MAX).is_empty());
    let freq = corpus.frequency_table();
    for w in select_topic_words(&corpus, 10, 30) {
        assert!((10..=30).contains(&freq[w]));
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let a = generate_corpus(&spec(7), 300).unwrap();
    assert_eq!(a, generate_corpus(&spec(7), 300).unwrap());
    assert_ne!(a.pairs, generate_corpus(&spec(8), 300).unwrap().pairs);
}

#[test]
fn topic_datasets_bookkeeping() {
    let corpus = generate_corpus(&spec(2), 2000).unwrap();
    let topic = corpus.vocab.id("noun04").unwrap();
    let ds = build_topic_datasets(&corpus, topic, 50, 2).unwrap();
    assert_eq!(ds.d_t.len(), 50);
    assert_eq!(ds.d_control.len(), ds.d_t.len());
    let occurrences: usize = ds
        .d_t
        .iter()
        .map(|s| s.pair.source.iter().filter(|&&t| t == topic).count())
        .sum();
    assert_eq!(
        ds.replacement_log.iter().map(Vec::len).sum::<usize>(),
        occurrences
    );
    let lang = ToyLanguage::new(spec(2)).unwrap();
    for (t, c) in ds.d_t.iter().zip(&ds.d_control) {
        assert_eq!(t.id, c.id);
        assert_eq!(t.pair.source.len(), c.pair.source.len());
        assert!(!c.pair.source.contains(&topic));
        assert_eq!(c.pair.target, lang.translate(&c.pair.source));
        assert!(corpus.split.train.contains(&t.id));
    }
    assert!(ds.d_t_prime.iter().all(|s| s.pair.source.contains(&topic)));
    assert!(ds.d_r.iter().all(|s| !s.pair.source.contains(&topic)));
    assert_eq!(ds.d_r.len(), ds.d_t_prime.len());
    for s in ds.d_t_prime.iter().chain(&ds.d_r) {
        assert!(!corpus.split.train.contains(&s.id));
    }
    assert_eq!(ds, build_topic_datasets(&corpus, topic, 50, 2).unwrap());
}

#[test]
fn null_control_is_the_topic_set() {
    let corpus = generate_corpus(&spec(2), 500).unwrap();
    let topic = corpus.vocab.id("noun02").unwrap();
    let ds = build_topic_datasets(&corpus, topic, 20, 2)
        .unwrap()
        .without_replacement();
    assert_eq!(ds.d_t, ds.d_control);
    assert!(ds.replacement_log.iter().all(Vec::is_empty));
}

#[test]
fn reserved_or_target_words_are_not_topics() {
    let corpus = generate_corpus(&spec(2), 200).unwrap();
    assert!(build_topic_datasets(&corpus, MARKER, 10, 0).is_err());
    let target_word = corpus.pairs[0].target[0];
    assert!(build_topic_datasets(&corpus, target_word, 10, 0).is_err());
}

#[test]
fn tsv_round_trip_keeps_pairs_and_split_sizes() {
    let corpus = generate_corpus(&spec(4), 100).unwrap();
    let mut files = Vec::new();
    for idx in [&corpus.split.train, &corpus.split.val, &corpus.split.test] {
        let mut buf = Vec::new();
        corpus.write_tsv(idx, &mut buf).unwrap();
        files.push(buf);
    }
    let back = Corpus::from_tsv(
        files[0].as_slice(),
        files[1].as_slice(),
        files[2].as_slice(),
    )
    .unwrap();
    assert_eq!(back.split.train.len(), 80);
    assert_eq!(back.split.val.len(), 10);
    assert_eq!(back.split.test.len(), 10);
    let text = |c: &Corpus, i: usize| {
        let p = &c.pairs[i];
        (c.vocab.decode(&p.source), c.vocab.decode(&p.target))
    };
    for (k, &i) in corpus.split.val.iter().enumerate() {
        assert_eq!(text(&back, back.split.val[k]), text(&corpus, i));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn targets_follow_the_translation_rule(seed in 0u64..10_000, n in 10usize..80) {
        let s = spec(seed);
        let lang = ToyLanguage::new(s.clone()).unwrap();
        let corpus = generate_corpus(&s, n).unwrap();
        let trigger: Vec<usize> = corpus
            .classes
            .iter()
            .zip(&s.classes)
            .filter(|(_, c)| c.trigger)
            .flat_map(|(words, _)| words.iter().copied())
            .collect();
        for p in &corpus.pairs {
            prop_assert!((s.min_len..=s.max_len).contains(&p.source.len()));
            prop_assert_eq!(&p.target, &lang.translate(&p.source));
            let has_trigger = p.source.iter().any(|t| trigger.contains(t));
            let markers = p.target.iter().filter(|&&t| t == MARKER).count();
            prop_assert_eq!(markers, usize::from(has_trigger));
            if has_trigger {
                prop_assert_eq!(p.target.last(), Some(&MARKER));
            }
        }
    }
}
