//! One test per acceptance criterion. Each prints a single PASS/FAIL line.
//!
//! Criteria that need the canonical chorale corpus read it from
//! `$TONICNET_CORPUS`, falling back to `data/jsb_chorales.json` at the
//! workspace root, and fail when it is missing. Training criteria that can
//! run without it use the synthetic corpus instead and say so in their line.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tonicnet::augment::{transpose_all, VoiceRanges};
use tonicnet::autodiff::{grad_check, AutodiffError, DiffFn, Element, Gradients, Graph, Var};
use tonicnet::corpus::{load_corpus, Corpus, Piece, Split, TimeStep};
use tonicnet::encoder::{decode, encode, restrict_streams, EncodedSequence, Stream, StreamSet, ZTracker};
use tonicnet::eval::evaluate;
use tonicnet::harmony::classify_pitch_classes;
use tonicnet::model::{record_sequence, sequence_nll, DropoutPlan, ModelConfig, ModelParams};
use tonicnet::sample::{generate, merge_notes, midi_bytes, MidiOptions, SampleConfig};
use tonicnet::stats::corpus_stats;
use tonicnet::synthetic::{synthetic_corpus, SyntheticConfig};
use tonicnet::train::{clip_gradients, global_norm, overfit, schedule_at, train, EpochRecord, OverfitConfig, TrainConfig};
use tonicnet::vocab::{Quality, Token, ZCount, VOCAB_SIZE};

/// Writes straight to stdout so the line survives test output capture.
fn verdict(name: &str, ok: bool, detail: impl AsRef<str>) {
    let line = format!("{} {name}: {}\n", if ok { "PASS" } else { "FAIL" }, detail.as_ref());
    std::io::stdout().lock().write_all(line.as_bytes()).unwrap();
    assert!(ok, "{name}: {}", detail.as_ref());
}

fn canonical_path() -> PathBuf {
    std::env::var_os("TONICNET_CORPUS")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/jsb_chorales.json"))
}

fn canonical() -> Result<Corpus, String> {
    let path = canonical_path();
    load_corpus(&path).map_err(|e| format!("canonical corpus unavailable ({}): {e}", path.display()))
}

/// The canonical corpus when present, otherwise the synthetic one.
fn training_corpus() -> &'static (Corpus, &'static str) {
    static CORPUS: OnceLock<(Corpus, &'static str)> = OnceLock::new();
    CORPUS.get_or_init(|| match canonical() {
        Ok(c) => (c, "canonical corpus"),
        Err(_) => (synthetic_corpus(&SyntheticConfig::default()), "synthetic corpus"),
    })
}

fn sequences(corpus: &Corpus, split: Split, streams: StreamSet) -> Vec<EncodedSequence> {
    corpus.split(split).map(|p| restrict_streams(p, streams).unwrap()).collect()
}

/// Un-augmented run with a fixed seed; warmup is one epoch.
fn short_run(streams: StreamSet, epochs: usize) -> (Vec<EpochRecord>, ModelParams) {
    let (corpus, _) = training_corpus();
    let config = TrainConfig {
        epochs,
        warmup_epochs: 1,
        seed: 1,
        streams,
        ..TrainConfig::default()
    };
    let params = ModelParams::init(config.model, streams, 1);
    let outcome = train(
        params,
        &sequences(corpus, Split::Train, streams),
        &sequences(corpus, Split::Valid, streams),
        &config,
        |r, _| eprintln!("{streams} {}", serde_json::to_string(r).unwrap()),
    )
    .unwrap();
    (outcome.log, outcome.last)
}

#[test]
fn vocabulary() {
    let all: Vec<Token> = Token::all().collect();
    let bijective = all.len() == VOCAB_SIZE
        && all.iter().enumerate().all(|(i, t)| t.index() == i && Token::from_index(i) == Ok(*t))
        && Token::from_index(VOCAB_SIZE).is_err();
    verdict("vocabulary", bijective, format!("{} classes, bijection to 0..{}", all.len(), VOCAB_SIZE - 1));
}

#[test]
fn corpus_splits_and_length() {
    match canonical() {
        Ok(corpus) => {
            let stats = corpus_stats(&corpus).unwrap();
            let counts = (
                corpus.count(Split::Train),
                corpus.count(Split::Valid),
                corpus.count(Split::Test),
            );
            let longest = corpus.pieces().iter().map(|p| encode(p).len()).max().unwrap();
            verdict(
                "corpus",
                counts == (229, 76, 77) && longest == 2881 && stats.max_encoded_len == 2881,
                format!("splits {counts:?}, max encoded length {longest}"),
            );
        }
        Err(e) => verdict("corpus", false, e),
    }
}

#[test]
fn augmentation_count() {
    match canonical() {
        Ok(corpus) => {
            let ranges = VoiceRanges::observed(corpus.split(Split::Train));
            let n = transpose_all(&corpus, &ranges).len();
            let within = (n as f64 - 1968.0).abs() <= 0.02 * 1968.0;
            verdict("augmentation", within, format!("{n} transposed pieces, target 1968 ±2%"));
        }
        Err(e) => verdict("augmentation", false, e),
    }
}

#[test]
fn harmony() {
    let mut counts = [0usize; 4];
    let mut other = 0;
    let mut agree = true;
    for set in 0u16..4096 {
        // Oracle: the set equals a rotated quality template.
        let expected = Quality::ALL.iter().find_map(|q| {
            (0..12u8)
                .find(|r| q.intervals().iter().fold(0u16, |a, i| a | 1 << ((r + i) % 12)) == set)
                .map(|_| *q)
        });
        match (classify_pitch_classes(set), expected) {
            (Token::Chord { quality, .. }, Some(q)) if quality == q => counts[q as usize] += 1,
            (Token::ChordOther, None) => other += 1,
            _ => agree = false,
        }
    }
    verdict(
        "harmony",
        agree && counts == [12, 12, 12, 4] && other == 4056,
        format!("maj/min/dim/aug {counts:?}, other {other}"),
    );
}

#[test]
fn encoder() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut roundtrips = 0;
    let mut lengths = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..60);
        let steps: Vec<TimeStep> = (0..n)
            .map(|_| TimeStep::new(std::array::from_fn(|_| rng.random_bool(0.9).then(|| rng.random_range(36..=81)))))
            .collect();
        let piece = Piece {
            id: "train-000".into(),
            split: Split::Train,
            steps,
        };
        let seq = encode(&piece);
        lengths += usize::from(seq.len() == 5 * n + 1);
        roundtrips += usize::from(decode(&seq).ok().as_ref() == Some(&piece.steps));
    }
    // 161 identical steps: runs of 161 per stream wrap 79 → 0 at the 81st.
    let held = Piece {
        id: "train-000".into(),
        split: Split::Train,
        steps: vec![TimeStep::new([Some(67), Some(64), Some(60), Some(48)]); 161],
    };
    let seq = encode(&held);
    let soprano: Vec<u8> = seq
        .stream
        .iter()
        .zip(&seq.z)
        .filter(|(s, _)| **s == Stream::Soprano)
        .map(|(_, z)| z.value())
        .collect();
    let wraps = soprano[79] == 79 && soprano[80] == 0 && soprano[159] == 79 && soprano[160] == 0;
    verdict(
        "encoder",
        roundtrips == 1000 && lengths == 1000 && wraps,
        format!("{roundtrips}/1000 roundtrips, {lengths}/1000 lengths 5N+1, wrap 79→0 {wraps}"),
    );
}

struct ToySequence {
    config: ModelConfig,
    plan: DropoutPlan,
    seq: EncodedSequence,
}

impl DiffFn for ToySequence {
    fn eval<T: Element>(&self, g: &mut Graph<'_, T>, _inputs: &[Var]) -> Result<Var, AutodiffError> {
        let (total, _, _) = record_sequence(g, &self.config, &self.seq, &self.plan).map_err(|e| match e {
            tonicnet::model::ModelError::Autodiff(e) => e,
            other => panic!("{other}"),
        })?;
        Ok(total)
    }
}

#[test]
fn autodiff_gradient_check() {
    let mut params = ModelParams::init(ModelConfig::toy(), StreamSet::FULL, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for t in params.tensors_mut() {
        for v in t.values_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    }
    let piece = Piece {
        id: "train-000".into(),
        split: Split::Train,
        steps: vec![
            TimeStep::new([Some(72), Some(67), Some(64), Some(48)]),
            TimeStep::new([Some(72), Some(65), None, Some(50)]),
        ],
    };
    let f = ToySequence {
        config: params.config,
        plan: DropoutPlan::sample(&params.config, &mut rng),
        seq: encode(&piece),
    };
    let report = grad_check(&f, params.tensors(), 1e-6).unwrap();
    verdict(
        "autodiff",
        report.max_rel_error < 1e-4 && report.checked == params.param_count(),
        format!("max relative error {:.2e} over {} entries", report.max_rel_error, report.checked),
    );
}

#[test]
fn schedule() {
    let c = TrainConfig::default();
    let spe = 1968;
    let at = |s| {
        let st = schedule_at(&c, s, spe);
        (st.lr, st.momentum)
    };
    let endpoints = at(0) == (0.008, 0.95) && at(18 * spe) == (0.2, 0.8) && at(60 * spe - 1) == (0.0002, 0.95);
    let monotone = (1..60 * spe).all(|s| {
        let ((l0, m0), (l1, m1)) = (at(s - 1), at(s));
        if s <= 18 * spe {
            l1 > l0 && m1 < m0
        } else {
            l1 < l0 && m1 > m0
        }
    });
    verdict(
        "schedule",
        endpoints && monotone,
        format!(
            "start {:?}, warmup end {:?}, final {:?}, monotone {monotone}",
            at(0),
            at(18 * spe),
            at(60 * spe - 1)
        ),
    );
}

#[test]
fn clipping() {
    let params = ModelParams::init(ModelConfig::tonicnet(), StreamSet::FULL, 0);
    let shapes: Vec<usize> = params.tensors().iter().map(|t| t.numel()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst = 0f64;
    let cases: Vec<Box<dyn Fn(usize, usize, &mut ChaCha8Rng) -> f32>> = vec![
        Box::new(|_, _, r| r.random_range(-1e30..1e30)),
        Box::new(|_, _, r| r.random_range(-1.0..1.0) * 1e3),
        Box::new(|t, i, _| if t == 0 && i == 0 { 3e38 } else { 0.0 }),
        Box::new(|_, _, _| 5.000_001 / (1_262_498f32).sqrt()),
        Box::new(|t, _, _| if t % 2 == 0 { 1e-3 } else { 1e15 }),
    ];
    for case in &cases {
        let mut grads = Gradients::from_vecs(
            shapes
                .iter()
                .enumerate()
                .map(|(t, n)| (0..*n).map(|i| case(t, i, &mut rng)).collect())
                .collect(),
        );
        clip_gradients(&mut grads, 5.0);
        worst = worst.max(global_norm(&grads));
    }
    verdict("clipping", worst <= 5.0, format!("largest post-clip norm {worst:.9}"));
}

#[test]
fn overfit_single_sequence() {
    let corpus = synthetic_corpus(&SyntheticConfig {
        train: 1,
        valid: 0,
        test: 0,
        min_steps: 32,
        max_steps: 32,
        seed: 5,
    });
    let seq = encode(&corpus.pieces()[0]);
    let mut params = ModelParams::init(ModelConfig::tonicnet(), StreamSet::FULL, 5);
    let report = overfit(&mut params, &seq, &OverfitConfig::default(), Some(0.05)).unwrap();
    verdict(
        "overfit",
        report.final_nll < 0.05 && report.steps <= 2000,
        format!("NLL {:.4} after {} steps on a {}-token sequence", report.final_nll, report.steps, seq.len()),
    );
}

#[test]
fn desk_scale_training() {
    let (_, label) = training_corpus();
    let (log, _) = short_run(StreamSet::FULL, 3);
    let nll: Vec<f64> = log.iter().map(|r| r.val_full_nll).collect();
    let decreasing = nll.windows(2).all(|w| w[1] < w[0]);
    let bound = (VOCAB_SIZE as f64).ln() - 3.5;
    verdict(
        "desk-scale",
        decreasing && nll.len() == 3 && nll[2] < bound,
        format!("{label}: validation Full NLL {nll:.3?}, bound {bound:.3}"),
    );
}

#[test]
#[ignore = "60 epochs on the transposed set; hours to days on CPU"]
fn full_reproduction() {
    let corpus = match canonical() {
        Ok(c) => c,
        Err(e) => return verdict("full reproduction", false, e),
    };
    let ranges = VoiceRanges::observed(corpus.split(Split::Train));
    let train_set: Vec<EncodedSequence> = transpose_all(&corpus, &ranges).pieces.iter().map(encode).collect();
    let config = TrainConfig::default();
    let params = ModelParams::init(config.model, StreamSet::FULL, config.seed);
    let outcome = train(params, &train_set, &sequences(&corpus, Split::Valid, StreamSet::FULL), &config, |r, _| {
        eprintln!("{}", serde_json::to_string(r).unwrap())
    })
    .unwrap();
    let valid = evaluate(&outcome.best, &corpus, Split::Valid, StreamSet::FULL).unwrap();
    let test = evaluate(&outcome.best, &corpus, Split::Test, StreamSet::FULL).unwrap();
    let close = |got: f64, want: f64| (got - want).abs() <= 0.05;
    verdict(
        "full reproduction",
        close(valid.full_nll, 0.321) && close(valid.ncl_nll, 0.224) && close(test.full_nll, 0.311) && close(test.ncl_nll, 0.214),
        format!(
            "valid Full/NCL {:.3}/{:.3} (0.321/0.224), test {:.3}/{:.3} (0.311/0.214)",
            valid.full_nll, valid.ncl_nll, test.full_nll, test.ncl_nll
        ),
    );
}

/// Teacher-forced loss of every predicted note or END position of the
/// validation split, keyed by (piece, time-step, stream).
fn note_losses(params: &ModelParams, corpus: &Corpus, streams: StreamSet) -> BTreeMap<(usize, usize, Stream), f64> {
    let mut out = BTreeMap::new();
    for (i, piece) in corpus.split(Split::Valid).enumerate() {
        let seq = restrict_streams(piece, streams).unwrap();
        let loss = sequence_nll(params, &seq, &DropoutPlan::eval()).unwrap();
        for (p, l) in loss.per_position.iter().enumerate().map(|(j, l)| (j + 1, *l as f64)) {
            if seq.stream[p] != Stream::Chord {
                out.insert((i, p / streams.len(), seq.stream[p]), l);
            }
        }
    }
    out
}

#[test]
fn representation_claim() {
    let (corpus, label) = training_corpus();
    let satb: StreamSet = "SBAT".parse().unwrap();
    let (_, with_chords) = short_run(StreamSet::FULL, 5);
    let (_, without) = short_run(satb, 5);
    let a = note_losses(&with_chords, corpus, StreamSet::FULL);
    let b = note_losses(&without, corpus, satb);
    // The four-stream model never predicts a piece's first soprano note,
    // which the five-stream model does; compare on the shared positions.
    let shared: Vec<_> = b.keys().filter(|k| a.contains_key(k)).collect();
    let mean = |m: &BTreeMap<_, f64>| shared.iter().map(|k| m[*k]).sum::<f64>() / shared.len() as f64;
    let (ncl, full) = (mean(&a), mean(&b));
    verdict(
        "representation",
        shared.len() == b.len() && ncl < full,
        format!("{label}, 5 epochs: CSATB NCL {ncl:.4} vs SATB Full {full:.4} over {} shared note positions", shared.len()),
    );
}

#[test]
fn sampler() {
    let fixture = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy.ckpt");
    let params = ModelParams::load(fixture).unwrap();
    let config = SampleConfig {
        seed: 3,
        max_tokens: 600,
        constrain_kinds: true,
        ..SampleConfig::default()
    };
    let options = MidiOptions::default();
    let a = generate(&params, &config).unwrap();
    let b = generate(&params, &config).unwrap();
    let deterministic = midi_bytes(&a, &options) == midi_bytes(&b, &options);

    let idempotent = a.notes.iter().all(|v| merge_notes(v) == *v);

    let seq = &a.sequence;
    let mut tracker = ZTracker::new();
    let retracked = seq.x.iter().zip(&seq.stream).map(|(x, s)| tracker.push(*s, *x)).eq(seq.z.iter().copied());
    let reencoded = encode(&Piece {
        id: "sample".into(),
        split: Split::Test,
        steps: a.steps.clone(),
    });
    let voices_match = (0..5 * a.steps.len())
        .filter(|i| seq.stream[*i] != Stream::Chord)
        .all(|i| reencoded.z[i] == seq.z[i] && reencoded.x[i] == seq.x[i]);
    let end_z = !a.ended || seq.z.last() == Some(&ZCount::ZERO);
    verdict(
        "sampler",
        deterministic && idempotent && retracked && voices_match && end_z,
        format!(
            "{} steps; identical MIDI {deterministic}, smoothing idempotent {idempotent}, Z retracked {retracked}, re-encoded voices match {voices_match}",
            a.steps.len()
        ),
    );
}
