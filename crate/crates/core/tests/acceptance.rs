//! Release acceptance checks, one test per criterion.
//!
//! Each test prints a single `[acceptance] C<n> ...: PASS/FAIL - detail`
//! line (visible with `--nocapture`) before asserting, so a red run still
//! reports every verdict it reached. The checks are property suites and
//! desk-scale directional runs; none of them require external data.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use revgen_core::corpus::{
    encode_tokens, EncodedExample, ExtendedVocabMap, RawRecord, Vocabulary, EOS_ID,
};
use revgen_core::generation::DecodeStrategy;
use revgen_core::metrics::corpus_bleu4;
use revgen_core::model::{
    decode_step, encode_sources, forward_loss, init_decoder_state, ModelDims, ModelError,
    ModelParams, SourceToggles,
};
use revgen_core::numerics::{check_all_kernel_ops, grad_check, Graph, Tensor, TensorId};
use revgen_core::pipeline::{self, PipelineConfig};
use revgen_core::qafilter::{
    cross_validate_features, median_heuristic_gamma, stratified_kfold, ConfusionMatrix,
    FilterConfig, Label, RffMap,
};
use revgen_core::retrieval::{SparseVec, TfIdfIndex};
use revgen_core::synth;
use revgen_core::training::{
    self, eval_bleu, load_checkpoint, save_checkpoint, EvalExample, TrainConfig,
};

fn verdict(criterion: &str, pass: bool, detail: &str) {
    let word = if pass { "PASS" } else { "FAIL" };
    println!("[acceptance] {criterion}: {word} - {detail}");
    assert!(pass, "{criterion}: {detail}");
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_owned).collect()
}

fn pick_ids(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(4..vocab)).collect()
}

/// An example whose target unrolls the decoder for exactly six steps and
/// whose sources include copy-only tokens from both copy sources.
fn six_token_example(dims: &ModelDims, seed: u64) -> EncodedExample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37).wrapping_add(1));
    let mut ext_map = ExtendedVocabMap::new(dims.vocab);
    let rare_desc = ext_map.get_or_insert("rare-desc");
    let rare_resp = ext_map.get_or_insert("rare-resp");
    let review_ids = pick_ids(&mut rng, 6, dims.vocab);
    let mut description_ids = pick_ids(&mut rng, 3, dims.vocab);
    description_ids.push(rare_desc);
    let mut first = pick_ids(&mut rng, 2, dims.vocab);
    first.push(rare_resp);
    let retrieved_ids = vec![first, pick_ids(&mut rng, 3, dims.vocab)];
    let response_ids = vec![
        rng.gen_range(4..dims.vocab),
        rare_desc,
        rng.gen_range(4..dims.vocab),
        rare_resp,
        rng.gen_range(4..dims.vocab),
        EOS_ID,
    ];
    EncodedExample { review_ids, response_ids, description_ids, retrieved_ids, ext_map }
}

#[test]
fn c1_gradients_match_finite_differences() {
    let started = Instant::now();
    let eps = 1e-4;
    let bound_err = 1e-3;
    let mut worst_kernel = 0.0f64;
    let mut worst_model = 0.0f64;
    for seed in 0..10u64 {
        for (name, err) in check_all_kernel_ops(seed, eps).unwrap() {
            assert!(err < bound_err, "kernel op {name} rel err {err} at seed {seed}");
            worst_kernel = worst_kernel.max(err);
        }

        let dims = ModelDims { vocab: 10, emb: 3, hidden: 2, layers: 1 };
        let params = ModelParams::<Tensor<f64>>::init(&dims, seed).unwrap();
        let example = six_token_example(&dims, seed);
        let mut points = Vec::new();
        params.for_each(&mut |_, t| points.push(t.clone()));
        let err = grad_check(
            |g, ids| {
                let mut i = 0;
                let bound = params.map(&mut |_| {
                    let id = ids[i];
                    i += 1;
                    id
                });
                let res =
                    forward_loss(g, &bound, &dims, &example, SourceToggles::FULL, 0.0, false)
                        .map_err(|e| match e {
                            ModelError::Numerics(n) => n,
                            other => panic!("unexpected model error: {other}"),
                        })?;
                Ok(res.loss)
            },
            &points,
            eps,
            seed,
        )
        .unwrap();
        assert!(err < bound_err, "forward_loss rel err {err} at seed {seed}");
        worst_model = worst_model.max(err);
    }
    verdict(
        "C1 gradient correctness",
        worst_kernel < bound_err && worst_model < bound_err,
        &format!(
            "10 seeds, 64-bit, eps {eps:.0e}: kernel ops max rel err {worst_kernel:.2e}, \
             six-token forward_loss max rel err {worst_model:.2e} ({:.1}s)",
            started.elapsed().as_secs_f64()
        ),
    );
}

fn random_example(dims: &ModelDims, rng: &mut ChaCha8Rng) -> EncodedExample {
    let mut ext_map = ExtendedVocabMap::new(dims.vocab);
    for i in 0..3 {
        ext_map.get_or_insert(&format!("oov-{i}"));
    }
    let n_ext = ext_map.len();
    let mixed = |n: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        (0..n)
            .map(|_| {
                if rng.gen_bool(0.25) {
                    dims.vocab + rng.gen_range(0..n_ext)
                } else {
                    rng.gen_range(4..dims.vocab)
                }
            })
            .collect()
    };
    EncodedExample {
        review_ids: mixed(rng.gen_range(4..8), rng),
        response_ids: vec![EOS_ID],
        description_ids: mixed(4, rng),
        retrieved_ids: vec![mixed(3, rng), mixed(4, rng)],
        ext_map,
    }
}

#[test]
fn c2_decoder_distributions_are_normalized() {
    let started = Instant::now();
    let dims = ModelDims { vocab: 12, emb: 4, hidden: 3, layers: 1 };
    let params = ModelParams::<Tensor<f64>>::init(&dims, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let tol = 1e-6;
    let mut steps = 0usize;
    let mut worst_gap = 0.0f64;
    for case in 0..10u64 {
        let example = random_example(&dims, &mut rng);
        // Half the cases run the training path so the checks also cover
        // distributions downstream of dropout masks.
        let train_mode = case % 2 == 1;
        let dropout = if train_mode { 0.2 } else { 0.0 };
        let mut g = Graph::new(1000 + case);
        let bound = params.map(&mut |t| g.leaf(t.clone()));
        let enc =
            encode_sources(&mut g, &bound, &dims, &example, SourceToggles::FULL, dropout, train_mode)
                .unwrap();
        let mut state = init_decoder_state(&mut g, &bound, &enc).unwrap();
        let width = dims.vocab + example.ext_map.len();
        for _ in 0..10 {
            let input = rng.gen_range(0..width);
            let out =
                decode_step(&mut g, &bound, &enc, &state, input, dropout, train_mode).unwrap();
            let sum_of = |id: TensorId| g.value(id).data().iter().sum::<f64>();
            let dists = [
                ("vocab", out.p_vocab),
                ("description copy", out.p_desc.unwrap()),
                ("retrieved copy", out.p_resp.unwrap()),
                ("fused copy", out.p_fuse.unwrap()),
                ("final", out.p_final),
            ];
            for (name, id) in dists {
                let gap = (sum_of(id) - 1.0).abs();
                assert!(gap <= tol, "{name} distribution sums off by {gap:.3e}");
                worst_gap = worst_gap.max(gap);
            }
            for (name, id) in [("gamma", out.gamma.unwrap()), ("theta", out.theta.unwrap())] {
                let v = g.value(id).item();
                assert!((0.0..=1.0).contains(&v), "{name} = {v} escapes [0, 1]");
            }
            steps += 1;
            state = out.state;
        }
    }
    verdict(
        "C2 distribution normalization",
        steps == 100 && worst_gap <= tol,
        &format!(
            "{steps} random decoder steps: all five distributions sum to 1 within {worst_gap:.2e}, \
             gates stayed in [0, 1] ({:.1}s)",
            started.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn c3_copy_mechanism_emits_retrieved_only_token() {
    let started = Instant::now();
    // 13 frame tokens each occur at least 12 times across reviews, responses,
    // and per-app descriptions; "glorbix" occurs 10 times, only inside
    // responses. Capping the vocabulary at 13 therefore keeps every frame
    // token and drops glorbix, so its only copyable source is retrieval.
    let frame =
        ["the", "app", "crashes", "at", "startup", "and", "i", "cannot", "use", "it", "please", "try", "now"];
    let description = frame.join(" ");
    let records: Vec<RawRecord> = (0..10)
        .map(|i| RawRecord {
            app_id: format!("app{i}"),
            review: frame[..6 + i % 5].join(" "),
            response: "please try glorbix now".to_owned(),
            description: description.clone(),
        })
        .collect();
    let vocab = Vocabulary::build(&records, 13).unwrap();
    assert!(vocab.id("glorbix").is_none(), "rare token must stay out of the vocabulary");
    for word in frame {
        assert!(vocab.id(word).is_some(), "frame token {word} missing from the vocabulary");
    }

    let desc_tokens = toks(&description);
    let probes: Vec<EncodedExample> = (0..10usize)
        .map(|i| {
            // Rotate the prefix so the copied token sits at a different
            // retrieved position in every probe.
            let mut retrieved: Vec<String> = frame[..i % 4].iter().map(|s| s.to_string()).collect();
            retrieved.extend(toks("please try glorbix now"));
            encode_tokens(
                &toks(&records[i].review),
                &toks(&records[i].response),
                &desc_tokens,
                &[retrieved],
                &vocab,
                32,
            )
            .unwrap()
        })
        .collect();

    let config = TrainConfig {
        hidden_units: 24,
        emb_dim: 16,
        k: 1,
        dropout: 0.0,
        layers: 1,
        batch_size: 10,
        vocab_cap: 13,
        max_len: 32,
        epochs: 150,
        checkpoint_every: 100_000,
        learning_rate: 5e-3,
        seed: 3,
        use_description: true,
        use_retrieved: true,
    };
    let outcome = training::train::<f64>(&config, &vocab, &probes, &[], None).unwrap();
    let dims = config.dims(vocab.len());
    let hits = probes
        .iter()
        .filter(|probe| {
            let out = DecodeStrategy::Greedy
                .decode(&outcome.params, &dims, probe, SourceToggles::FULL, 16, &vocab)
                .unwrap();
            out.tokens.iter().any(|t| t == "glorbix")
        })
        .count();
    verdict(
        "C3 copy mechanism",
        hits >= 9,
        &format!(
            "out-of-vocabulary token copied from retrieval on {hits}/10 held-in probes \
             after {} overfitting steps ({:.1}s)",
            outcome.steps,
            started.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn c4_overfit_oracle_reaches_low_loss_and_high_bleu() {
    let started = Instant::now();
    let records = synth::generate(32, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let config = PipelineConfig {
        train: TrainConfig {
            hidden_units: 32,
            emb_dim: 32,
            k: 2,
            dropout: 0.0,
            layers: 1,
            batch_size: 8,
            vocab_cap: 10_000,
            max_len: 64,
            epochs: 125,
            checkpoint_every: 1_000_000,
            learning_rate: 3e-3,
            seed: 21,
            use_description: true,
            use_retrieved: true,
        },
        eval_fraction: 0.0,
        beam: 1,
        decode_max_len: 64,
        lemmatize: false,
    };
    pipeline::preprocess(&records, &config, dir.path()).unwrap();
    let vocab = Vocabulary::load(&dir.path().join(pipeline::VOCAB_FILE)).unwrap();
    let rows = pipeline::read_split(&dir.path().join(pipeline::TRAIN_FILE)).unwrap();
    assert_eq!(rows.len(), 32);
    let encoded = pipeline::encode_rows(&rows, &vocab, config.train.max_len).unwrap();
    let outcome = training::train::<f64>(&config.train, &vocab, &encoded, &[], None).unwrap();
    assert!(outcome.steps <= 500, "took {} steps", outcome.steps);

    let dims = config.train.dims(vocab.len());
    let mean_loss = encoded
        .iter()
        .enumerate()
        .map(|(i, example)| {
            let mut g = Graph::new(i as u64);
            let bound = outcome.params.map(&mut |t| g.leaf(t.clone()));
            let fw = forward_loss(&mut g, &bound, &dims, example, SourceToggles::FULL, 0.0, false)
                .unwrap();
            g.value(fw.loss).item()
        })
        .sum::<f64>()
        / encoded.len() as f64;
    let evals = pipeline::eval_rows(&rows, &vocab, config.train.max_len).unwrap();
    let report = eval_bleu(
        &outcome.params,
        &dims,
        config.train.toggles(),
        config.train.max_len,
        &evals,
        &vocab,
    )
    .unwrap();
    verdict(
        "C4 overfit oracle",
        mean_loss < 0.1 && report.bleu4 > 90.0,
        &format!(
            "32 pairs, hidden 32, emb 32, K=2: training loss {mean_loss:.4} (< 0.1), \
             training-set BLEU-4 {:.2} (> 90) after {} steps ({:.1}s)",
            report.bleu4,
            outcome.steps,
            started.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn c5_ablations_order_by_available_sources() {
    let started = Instant::now();
    let records = synth::generate(2000, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    // The generator plants fix tokens that reach the response only through
    // description or retrieved-response copying, so the ordering below is
    // forced by construction once training converges. Six epochs and this
    // seed were checked against seeds 17 and 99 as well; the ordering held
    // for all three, with the widest worst-case margin here.
    let config = PipelineConfig {
        train: TrainConfig {
            hidden_units: 32,
            emb_dim: 32,
            k: 2,
            dropout: 0.0,
            layers: 1,
            batch_size: 32,
            vocab_cap: synth::recommended_vocab_cap(),
            max_len: 48,
            epochs: 6,
            checkpoint_every: 1_000_000,
            learning_rate: 3e-3,
            seed: 18,
            use_description: true,
            use_retrieved: true,
        },
        eval_fraction: pipeline::DEFAULT_EVAL_FRACTION,
        beam: 1,
        decode_max_len: 48,
        lemmatize: false,
    };
    pipeline::preprocess(&records, &config, dir.path()).unwrap();
    let rows = pipeline::ablate::<f64>(dir.path(), &config.train, None).unwrap();
    let bleu: BTreeMap<&str, f64> =
        rows.iter().map(|row| (row.model.as_str(), row.bleu4)).collect();
    let full = bleu["full"];
    let no_retrieval = bleu["-Retrieval"];
    let no_description = bleu["-Description"];
    let review_only = bleu["Only review (NMT)"];
    let ordered = full > no_retrieval
        && full > no_description
        && no_retrieval > review_only
        && no_description > review_only;
    verdict(
        "C5 ablation ordering",
        ordered,
        &format!(
            "validation BLEU-4 on 2,000 synthetic pairs: full {full:.2} > \
             -Retrieval {no_retrieval:.2}, -Description {no_description:.2} > \
             only-review {review_only:.2} ({:.0}s)",
            started.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn c6_bleu_matches_hand_computed_fixtures() {
    let tol = 1e-6;
    // Expected scores were hand-derived from the n-gram counts before the
    // scorer existed and are frozen here to full precision.
    let identity = vec![toks("the cat sat on the mat"), toks("thanks for the report")];
    let fixtures = [
        ("identity", identity.clone(), identity, 100.0),
        (
            "unigram clipping",
            vec![toks("the the the")],
            vec![toks("the cat")],
            1.351_200_154_807_036e-5,
        ),
        (
            "brevity penalty e^-1",
            vec![toks("a b c d")],
            vec![toks("a b c d e f g h")],
            36.787_944_117_144_235,
        ),
        (
            "mixed two-pair corpus",
            vec![toks("the cat sat on the mat"), toks("please update your app")],
            vec![toks("the cat sat on the mat"), toks("please update the app")],
            76.219_912_223_192_21,
        ),
        (
            "five-pair corpus",
            vec![
                toks("thanks for your feedback"),
                toks("please update the app to the latest version"),
                toks("we are sorry"),
                toks("restart your phone"),
                toks("the sync issue is fixed now"),
            ],
            vec![
                toks("thanks for your feedback"),
                toks("please update your app to the newest version"),
                toks("we are sorry for the trouble"),
                toks("please restart your device"),
                toks("the sync issue will be fixed in the next release"),
            ],
            26.313_607_863_651_615,
        ),
    ];
    let mut worst = 0.0f64;
    for (name, cands, refs, expected) in &fixtures {
        let report = corpus_bleu4(cands, refs).unwrap();
        let gap = (report.bleu4 - expected).abs();
        assert!(gap < tol, "fixture {name}: got {}, expected {expected}", report.bleu4);
        worst = worst.max(gap);
    }
    let clipping = corpus_bleu4(&[toks("the the the")], &[toks("the cat")]).unwrap();
    assert!((clipping.precisions[0] - 1.0 / 3.0).abs() < 1e-12, "clipped p1 must be 1/3");
    verdict(
        "C6 BLEU oracle",
        worst < tol,
        &format!("5 hand-computed fixtures matched within {worst:.2e} (tolerance 1e-6)"),
    );
}

#[test]
fn c7_top_k_matches_brute_force_ranking() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let pool: Vec<String> = (0..30).map(|i| format!("w{i:02}")).collect();
    let sample = |lo: usize, hi: usize, rng: &mut ChaCha8Rng| -> Vec<String> {
        let n = rng.gen_range(lo..=hi);
        (0..n).map(|_| pool[rng.gen_range(0..pool.len())].clone()).collect()
    };
    let mut docs: Vec<Vec<String>> = (0..170).map(|_| sample(3, 12, &mut rng)).collect();
    // Duplicated documents force exact score ties, exercising the tie rule
    // (equal scores rank by lower document index).
    for i in 0..30 {
        let copy = docs[i].clone();
        docs.push(copy);
    }
    let index = TfIdfIndex::build(&docs).unwrap();

    let brute_force = |query: &[String], k: usize| -> Vec<(usize, f64)> {
        let qvec = index.vectorize(query);
        let weights: BTreeMap<u32, f64> = qvec.entries.iter().copied().collect();
        let mut scored: Vec<(usize, f64)> = (0..docs.len())
            .map(|i| {
                // Same ascending-term-id accumulation order as the index's
                // sparse dot product, so scores agree bit for bit.
                let score = index
                    .doc_vector(i)
                    .entries
                    .iter()
                    .filter_map(|(term, w)| weights.get(term).map(|qw| qw * w))
                    .sum::<f64>();
                (i, score)
            })
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0))
        });
        scored.truncate(k);
        scored
    };

    let mut compared = 0usize;
    for _ in 0..50 {
        let query = sample(2, 8, &mut rng);
        let k = rng.gen_range(1..=15);
        let got = index.top_k(&query, k, None).unwrap();
        let expected = brute_force(&query, k);
        assert_eq!(got.len(), expected.len());
        for ((gi, gs), (ei, es)) in got.iter().zip(&expected) {
            assert_eq!(gi, ei, "ranking order diverged from brute force");
            assert_eq!(gs.to_bits(), es.to_bits(), "score diverged from brute force");
        }
        compared += 1;
    }
    verdict(
        "C7 retrieval oracle",
        compared == 50,
        "top_k matched brute-force cosine ranking (ids and scores, ties included) \
         on 200 documents x 50 queries",
    );
}

#[test]
fn c8_filter_metrics_match_hand_checked_counts() {
    // Held-out confusion counts: 73 kept-and-fine, 15 bad slipping through,
    // 5 fine-but-blocked, 7 bad caught.
    let counts = ConfusionMatrix { tn: 73, fn_bad: 15, fp: 5, tp: 7 };
    let precision = counts.not_bad_precision() * 100.0;
    let recall = counts.not_bad_recall() * 100.0;
    let reduction = counts.bad_reduction() * 100.0;
    let pass = (precision - 83.0).abs() <= 0.1
        && (recall - 93.6).abs() <= 0.1
        && (reduction - 31.8).abs() <= 0.1;
    verdict(
        "C8 filter metrics",
        pass,
        &format!(
            "counts {{73, 15, 5, 7}} give precision {precision:.2}% (83.0 +- 0.1), \
             recall {recall:.2}% (93.6 +- 0.1), bad-reduction {reduction:.2}% (31.8 +- 0.1)"
        ),
    );
}

fn two_rings(n: usize, seed: u64) -> (Vec<SparseVec>, Vec<Label>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let inner = i % 2 == 0;
        let radius = if inner { 1.0 } else { 3.0 };
        let r = radius + 0.2 * (rng.gen::<f64>() - 0.5);
        let theta = 2.0 * std::f64::consts::PI * rng.gen::<f64>();
        features.push(SparseVec { entries: vec![(0, r * theta.cos()), (1, r * theta.sin())] });
        labels.push(if inner { Label::NotBad } else { Label::Bad });
    }
    (features, labels)
}

#[test]
fn c9_kernel_features_separate_rings_where_linear_fails() {
    let started = Instant::now();
    let (sparse, labels) = two_rings(200, 13);
    let config = FilterConfig { d: 1024, ..FilterConfig::default() };

    let folds = stratified_kfold(&labels, 10, config.seed).unwrap();
    let mut bad_per_fold = [0usize; 10];
    let mut not_bad_per_fold = [0usize; 10];
    for (i, &fold) in folds.iter().enumerate() {
        match labels[i] {
            Label::Bad => bad_per_fold[fold] += 1,
            Label::NotBad => not_bad_per_fold[fold] += 1,
        }
    }
    let spread = |counts: &[usize; 10]| counts.iter().max().unwrap() - counts.iter().min().unwrap();
    let balanced = spread(&bad_per_fold) <= 1 && spread(&not_bad_per_fold) <= 1;

    let gamma = median_heuristic_gamma(&sparse, config.seed);
    let rff = RffMap::new(2, config.d, gamma, config.seed).unwrap();
    let mapped: Vec<Vec<f64>> = sparse.iter().map(|x| rff.map(x)).collect();
    let kernel_cv = cross_validate_features(&mapped, &labels, 10, &config).unwrap();
    let raw: Vec<Vec<f64>> =
        sparse.iter().map(|x| vec![x.entries[0].1, x.entries[1].1]).collect();
    let linear_cv = cross_validate_features(&raw, &labels, 10, &config).unwrap();

    let kernel_acc = kernel_cv.accuracy();
    let linear_acc = linear_cv.accuracy();
    verdict(
        "C9 filter learning sanity",
        kernel_acc > 0.95 && linear_acc < 0.70 && balanced && kernel_cv.total() == 200,
        &format!(
            "two-ring 10-fold CV: random-feature SVM {:.1}% (> 95), linear SVM {:.1}% (< 70), \
             stratified folds within 1 per class ({:.1}s)",
            kernel_acc * 100.0,
            linear_acc * 100.0,
            started.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn c10_fixed_seed_reproduces_runs_and_checkpoints() {
    let started = Instant::now();
    let records = synth::generate(60, 29).unwrap();
    let config = PipelineConfig {
        train: TrainConfig {
            hidden_units: 16,
            emb_dim: 16,
            k: 1,
            dropout: 0.1,
            layers: 1,
            batch_size: 10,
            vocab_cap: 10_000,
            max_len: 32,
            // Long enough that the shared response frame is learned and the
            // round-trip BLEU below is meaningfully nonzero.
            epochs: 12,
            checkpoint_every: 1,
            learning_rate: 5e-3,
            seed: 31,
            use_description: true,
            use_retrieved: true,
        },
        eval_fraction: 0.1,
        beam: 1,
        decode_max_len: 32,
        lemmatize: false,
    };

    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    pipeline::preprocess(&records, &config, dir_a.path()).unwrap();
    pipeline::preprocess(&records, &config, dir_b.path()).unwrap();
    let artifacts = [
        pipeline::VOCAB_FILE,
        pipeline::INDEX_FILE,
        pipeline::TRAIN_FILE,
        pipeline::VAL_FILE,
        pipeline::TEST_FILE,
    ];
    for name in artifacts {
        let a = std::fs::read(dir_a.path().join(name)).unwrap();
        let b = std::fs::read(dir_b.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identically seeded runs");
    }

    let vocab = Vocabulary::load(&dir_a.path().join(pipeline::VOCAB_FILE)).unwrap();
    let train_rows = pipeline::read_split(&dir_a.path().join(pipeline::TRAIN_FILE)).unwrap();
    let val_rows = pipeline::read_split(&dir_a.path().join(pipeline::VAL_FILE)).unwrap();
    let encoded = pipeline::encode_rows(&train_rows, &vocab, config.train.max_len).unwrap();
    let val: Vec<EvalExample> =
        pipeline::eval_rows(&val_rows, &vocab, config.train.max_len).unwrap();

    // Loss curves: checkpoint_every = 1 records one row per step; dropout is
    // on, so this also pins the seeded mask stream.
    let run = || training::train::<f64>(&config.train, &vocab, &encoded, &[], None).unwrap();
    let first = run();
    let second = run();
    assert_eq!(first.history.len(), second.history.len());
    for (a, b) in first.history.iter().zip(&second.history) {
        assert_eq!(a.step, b.step);
        assert_eq!(
            a.train_loss.to_bits(),
            b.train_loss.to_bits(),
            "loss curves diverge at step {}",
            a.step
        );
    }

    let dims = config.train.dims(vocab.len());
    let toggles = config.train.toggles();
    let before = eval_bleu(&first.params, &dims, toggles, config.train.max_len, &val, &vocab)
        .unwrap()
        .bleu4;
    let ckpt_path = dir_a.path().join("roundtrip.ckpt");
    save_checkpoint(
        &ckpt_path,
        &first.params,
        &config.train,
        &vocab.content_hash(),
        first.steps,
        None,
    )
    .unwrap();
    let loaded = load_checkpoint::<f64>(&ckpt_path).unwrap();
    loaded.ensure_vocab(&vocab).unwrap();
    let after = eval_bleu(&loaded.params, &dims, toggles, config.train.max_len, &val, &vocab)
        .unwrap()
        .bleu4;
    // A zero score would make the equality vacuous; require a model good
    // enough that the round trip has something to reproduce.
    verdict(
        "C10 determinism and persistence",
        before > 0.0 && before.to_bits() == after.to_bits(),
        &format!(
            "preprocess artifacts byte-identical across reruns, {} loss-curve steps bit-identical, \
             checkpoint round trip reproduces validation BLEU-4 {before:.4} exactly ({:.1}s)",
            first.history.len(),
            started.elapsed().as_secs_f64()
        ),
    );
}
