//! Property tests for the toolkit's structural invariants: randomized inputs
//! exercise guarantees that hold for every valid input, not just the unit
//! tests' fixtures.

use ndarray::{ArrayD, IxDyn};
use proptest::prelude::*;

use ssankit_core::autodiff::{softmax_vec, Tape};
use ssankit_core::config::LossConfig;
use ssankit_core::data::synthetic::{generate_synthetic, SyntheticSpec, ZONES};
use ssankit_core::data::{
    build_vocabulary, detokenize, identity_set, load_dataset, save_manifest, tokenize,
    DatasetRecord, ImageSource, Split, Vocabulary, PAD_ID, UNK_ID,
};
use ssankit_core::global_branch::cosine;
use ssankit_core::losses::{adaptive_margin, compound_ranking_loss, ranking_loss, PairScores};
use ssankit_core::pfl::word_attention;
use ssankit_core::rank_k;

fn finite_vec(len: usize, range: std::ops::Range<f64>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(range, len)
}

fn word_strategy() -> impl Strategy<Value = String> {
    "[a-z]{1,8}"
}

proptest! {
    // --- vocabulary and tokenization ------------------------------------

    /// Word ids are contiguous starting after the reserved ids, and neither
    /// padding nor unknown ever collides with a real word.
    #[test]
    fn vocabulary_ids_are_contiguous_and_reserved(words in prop::collection::hash_set(word_strategy(), 1..30)) {
        let words: Vec<String> = words.into_iter().collect();
        let vocab = Vocabulary::from_words(words.clone(), 1, 8);
        let mut seen = std::collections::HashSet::new();
        for w in &words {
            let id = vocab.id_of(w);
            prop_assert!(id != PAD_ID && id != UNK_ID);
            prop_assert!(id < vocab.table_size());
            prop_assert!(seen.insert(id), "duplicate id {id}");
        }
        prop_assert_eq!(vocab.table_size(), vocab.num_words() + 2);
        let mut ids: Vec<usize> = seen.into_iter().collect();
        ids.sort();
        let lo = *ids.first().unwrap();
        prop_assert_eq!(ids, (lo..lo + words.len()).collect::<Vec<_>>());
    }

    /// tokenize(detokenize(t)) = t for any in-vocabulary caption.
    #[test]
    fn tokenization_round_trips(
        words in prop::collection::hash_set(word_strategy(), 3..20),
        picks in prop::collection::vec(0usize..1000, 1..10),
    ) {
        let words: Vec<String> = words.into_iter().collect();
        let vocab = Vocabulary::from_words(words.clone(), 1, 8);
        let caption: Vec<&str> = picks.iter().map(|&p| words[p % words.len()].as_str()).collect();
        let text = caption.join(" ");
        let toks = tokenize(&text, &vocab, 32).unwrap();
        let round = tokenize(&detokenize(&toks, &vocab), &vocab, 32).unwrap();
        prop_assert_eq!(&toks.ids, &round.ids);
        prop_assert_eq!(&toks.tokens, &round.tokens);
        prop_assert!(toks.ids.iter().all(|&id| id != PAD_ID && id != UNK_ID));
    }

    /// Unknown words map to UNK_ID without shifting their neighbors.
    #[test]
    fn unknown_words_become_unk(word in word_strategy()) {
        let vocab = Vocabulary::from_words(vec!["red".into(), "shirt".into()], 1, 8);
        let text = format!("red {word} shirt");
        let toks = tokenize(&text, &vocab, 16).unwrap();
        prop_assert_eq!(toks.ids.len(), 3);
        prop_assert_eq!(toks.ids[0], vocab.id_of("red"));
        prop_assert_eq!(toks.ids[2], vocab.id_of("shirt"));
        if !vocab.contains(&word) {
            prop_assert_eq!(toks.ids[1], UNK_ID);
        }
    }

    // --- losses ----------------------------------------------------------

    /// The adaptive margin is clamped to [alpha1/2, alpha1].
    #[test]
    fn adaptive_margin_is_bounded(
        pos in -1.0..1.0f64,
        weak in -1.0..1.0f64,
        alpha1 in 0.01..0.5f64,
    ) {
        let a2 = adaptive_margin(pos, weak, alpha1, false);
        prop_assert!(a2 >= alpha1 / 2.0 - 1e-12);
        prop_assert!(a2 <= alpha1 + 1e-12);
    }

    /// Compound ranking loss is non-negative and reduces to the plain
    /// ranking loss at beta = 0.
    #[test]
    fn compound_loss_nonnegative_and_nested(
        scores in finite_vec(5, -1.0..1.0),
        alpha1 in 0.01..0.5f64,
        beta in 0.0..0.5f64,
    ) {
        let mut tape = Tape::new();
        let s = PairScores {
            pos: tape.constant(scores[0]),
            neg_text: tape.constant(scores[1]),
            neg_image: tape.constant(scores[2]),
            weak_pos: tape.constant(scores[3]),
            weak_neg_image: tape.constant(scores[4]),
        };
        let mut cfg = LossConfig::defaults(4);
        cfg.alpha1 = alpha1;
        cfg.beta = beta;
        let full = compound_ranking_loss(&mut tape, &s, &cfg);
        prop_assert!(tape.scalar(full) >= 0.0);
        cfg.beta = 0.0;
        let base = compound_ranking_loss(&mut tape, &s, &cfg);
        let plain = ranking_loss(&mut tape, s.pos, s.neg_text, s.neg_image, alpha1);
        prop_assert_eq!(tape.scalar(base), tape.scalar(plain));
    }

    // --- numerics --------------------------------------------------------

    /// Cosine similarity lies in [-1, 1] and ignores positive scaling.
    #[test]
    fn cosine_range_and_scale_invariance(
        a in finite_vec(6, -2.0..2.0),
        b in finite_vec(6, -2.0..2.0),
        alpha in 0.1..10.0f64,
    ) {
        prop_assume!(a.iter().any(|x| x.abs() > 1e-3));
        prop_assume!(b.iter().any(|x| x.abs() > 1e-3));
        let c = cosine(&a, &b).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
        let scaled: Vec<f64> = a.iter().map(|x| x * alpha).collect();
        let c2 = cosine(&scaled, &b).unwrap();
        prop_assert!((c - c2).abs() < 1e-9);
    }

    /// Softmax outputs are a probability distribution regardless of scale.
    #[test]
    fn softmax_is_a_distribution(vals in finite_vec(5, -50.0..50.0)) {
        let mut tape = Tape::new();
        let v = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[5, 1]), vals).unwrap());
        let p = softmax_vec(&mut tape, v);
        let out = tape.value(p);
        prop_assert!(out.iter().all(|&x| x > 0.0));
        prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    /// Word-attention scores always lie strictly inside (0, 1).
    #[test]
    fn wam_scores_inside_unit_interval(
        w in finite_vec(12, -5.0..5.0),
        b in finite_vec(3, -5.0..5.0),
        e in finite_vec(8, -3.0..3.0),
    ) {
        let mut tape = Tape::new();
        let w = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[3, 4]), w).unwrap());
        let b = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[3, 1]), b).unwrap());
        let e = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[4, 2]), e).unwrap());
        let s = word_attention(&mut tape, w, b, e);
        prop_assert!(tape.value(s).iter().all(|&x| x > 0.0 && x < 1.0));
    }

    /// Masked row-max pooling is monotone in the valid length: seeing more
    /// columns can only raise the per-row maximum.
    #[test]
    fn masked_pooling_is_monotone_in_valid_len(vals in finite_vec(12, -3.0..3.0)) {
        let mut tape = Tape::new();
        let m = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[3, 4]), vals).unwrap());
        let mut prev: Option<Vec<f64>> = None;
        for valid in 1..=4usize {
            let pooled = tape.masked_row_max(m, valid).unwrap();
            let cur: Vec<f64> = tape.value(pooled).iter().cloned().collect();
            if let Some(p) = &prev {
                for (new, old) in cur.iter().zip(p) {
                    prop_assert!(new >= old);
                }
            }
            prev = Some(cur);
        }
    }

    // --- retrieval -------------------------------------------------------

    /// Rank-k accuracy lies in [0, 1] and is monotone non-decreasing in k.
    #[test]
    fn rank_k_is_monotone(
        flat in finite_vec(24, -1.0..1.0),
        qids in prop::collection::vec(0u32..4, 4),
        gids in prop::collection::vec(0u32..4, 6),
    ) {
        let scores: Vec<Vec<f64>> = flat.chunks(6).map(|c| c.to_vec()).collect();
        let mut prev = 0.0;
        for k in 1..=8usize {
            let acc = rank_k(&scores, &qids, &gids, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&acc));
            prop_assert!(acc >= prev);
            prev = acc;
        }
    }

    // --- synthetic data --------------------------------------------------

    /// Generated splits never share an identity, every caption mentions only
    /// attributes the identity actually wears, and the manifest round-trips.
    #[test]
    fn synthetic_dataset_is_pure_and_round_trips(seed in 0u64..50) {
        let spec = SyntheticSpec::new(6, 2, seed);
        let (train, test) = generate_synthetic(&spec).unwrap();
        let train_ids = identity_set(&train);
        let test_ids = identity_set(&test);
        prop_assert!(train_ids.iter().all(|id| !test_ids.contains(id)));

        let color_words: Vec<&str> = spec.colors.iter().map(|(n, _)| n.as_str()).collect();
        for rec in train.iter().chain(&test) {
            let ImageSource::Synthetic(render) = &rec.image else {
                prop_assert!(false, "expected synthetic source");
                unreachable!()
            };
            let worn_colors: std::collections::HashSet<&str> =
                render.zones.iter().map(|z| z.color.as_str()).collect();
            for cap in &rec.captions {
                for word in cap.split_whitespace() {
                    if color_words.contains(&word) {
                        prop_assert!(
                            worn_colors.contains(word),
                            "caption mentions unworn color {word}"
                        );
                    }
                }
            }
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let all: Vec<DatasetRecord> = train.iter().chain(&test).cloned().collect();
        save_manifest(&all, &path).unwrap();
        let (rt_train, rt_val, rt_test) = load_dataset(&path).unwrap();
        prop_assert!(rt_val.is_empty());
        prop_assert_eq!(rt_train.len(), train.len());
        prop_assert_eq!(rt_test.len(), test.len());
        for (a, b) in rt_train.iter().zip(&train) {
            prop_assert_eq!(a.identity_id, b.identity_id);
            prop_assert_eq!(&a.image, &b.image);
            prop_assert_eq!(&a.captions, &b.captions);
            prop_assert_eq!(a.split, Split::Train);
        }
    }

    /// The same spec always generates the same dataset.
    #[test]
    fn synthetic_generation_is_deterministic(seed in 0u64..50) {
        let spec = SyntheticSpec::new(5, 2, seed);
        let (a_train, a_test) = generate_synthetic(&spec).unwrap();
        let (b_train, b_test) = generate_synthetic(&spec).unwrap();
        for (a, b) in a_train.iter().zip(&b_train).chain(a_test.iter().zip(&b_test)) {
            prop_assert_eq!(a.identity_id, b.identity_id);
            prop_assert_eq!(&a.image, &b.image);
            prop_assert_eq!(&a.captions, &b.captions);
        }
    }
}

/// The body zones tile [0, 1) top to bottom without gaps or overlap.
#[test]
fn zones_tile_the_unit_interval() {
    let mut edge = 0.0;
    for (_, lo, hi) in ZONES {
        assert_eq!(lo, edge);
        assert!(hi > lo);
        edge = hi;
    }
    assert_eq!(edge, 1.0);
}

/// A vocabulary built from records survives a save/load round trip.
#[test]
fn vocabulary_round_trips_through_disk() {
    let spec = SyntheticSpec::new(5, 2, 3);
    let (train, _) = generate_synthetic(&spec).unwrap();
    let vocab = build_vocabulary(&train, 1, 16).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.json");
    vocab.save(&path).unwrap();
    assert_eq!(Vocabulary::load(&path).unwrap(), vocab);
}

/// Partitioning a feature map and re-concatenating the bands is the identity.
#[test]
fn partition_concat_identity() {
    use ssankit_core::encoders::partition;
    let mut tape = Tape::new();
    let vals = ArrayD::from_shape_vec(
        IxDyn(&[4, 12, 3]),
        (0..144).map(|i| i as f64 * 0.1).collect(),
    )
    .unwrap();
    let f = tape.leaf(vals.clone());
    for k in [1usize, 2, 3, 4, 6] {
        let parts = partition(&mut tape, f, k);
        assert_eq!(parts.len(), k);
        let views: Vec<_> = parts
            .iter()
            .map(|p| tape.value(*p).view().into_dimensionality::<ndarray::Ix3>().unwrap())
            .collect();
        let rebuilt = ndarray::concatenate(ndarray::Axis(1), &views).unwrap();
        assert_eq!(rebuilt.into_dyn(), vals);
    }
}

/// Identity leakage across splits is rejected by the loader.
#[test]
fn split_leakage_is_rejected() {
    let mk = |split| DatasetRecord {
        identity_id: 5,
        image: ImageSource::Synthetic(ssankit_core::data::RenderSpec::example()),
        captions: vec!["red shirt".into()],
        split,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("leaky.jsonl");
    save_manifest(&[mk(Split::Train), mk(Split::Test)], &path).unwrap();
    let err = load_dataset(&path).unwrap_err();
    assert!(err.to_string().contains('5'), "error names the identity: {err}");
}
