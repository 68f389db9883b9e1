//! Deterministic chorale-like corpus for smoke runs when the real data is
//! not available.
//!
//! Each piece walks a diatonic progression in a random key and mode, one
//! chord every 2 to 8 sixteenths, and ends on a V–I cadence. The bass takes
//! the root; the upper voices pick the complete, non-crossing voicing that
//! moves least from the previous chord. The soprano sometimes
//! skips to another chord tone halfway through a chord.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{piece_id, Corpus, Piece, Split, TimeStep};
use crate::vocab::Quality;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticConfig {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub min_steps: usize,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    /// Split sizes of the real corpus, short pieces.
    fn default() -> Self {
        SyntheticConfig {
            train: 229,
            valid: 76,
            test: 77,
            min_steps: 32,
            max_steps: 64,
            seed: 0,
        }
    }
}

const MAJOR_DEGREES: [(u8, Quality); 7] = [
    (0, Quality::Major),
    (2, Quality::Minor),
    (4, Quality::Minor),
    (5, Quality::Major),
    (7, Quality::Major),
    (9, Quality::Minor),
    (11, Quality::Diminished),
];

const MINOR_DEGREES: [(u8, Quality); 7] = [
    (0, Quality::Minor),
    (2, Quality::Diminished),
    (3, Quality::Major),
    (5, Quality::Minor),
    (7, Quality::Major),
    (8, Quality::Major),
    (11, Quality::Diminished),
];

/// (next degree, weight) for each scale degree.
const TRANSITIONS: [&[(usize, u32)]; 7] = [
    &[(1, 2), (3, 3), (4, 3), (5, 2)],
    &[(4, 4), (6, 1)],
    &[(5, 2), (3, 2)],
    &[(4, 3), (0, 2), (1, 1)],
    &[(0, 4), (5, 1)],
    &[(1, 2), (3, 2)],
    &[(0, 1)],
];

const DURATIONS: [usize; 5] = [4, 4, 4, 8, 2];

const RANGES: [(u8, u8); 4] = [(60, 79), (55, 74), (48, 67), (36, 55)];

fn weighted(rng: &mut impl Rng, options: &[(usize, u32)]) -> usize {
    let total: u32 = options.iter().map(|(_, w)| w).sum();
    let mut pick = rng.random_range(0..total);
    for (value, w) in options {
        if pick < *w {
            return *value;
        }
        pick -= w;
    }
    unreachable!("pick below total weight")
}

/// Pitch in `[lo, hi]` with a pitch class from `pcs` nearest to `target`.
fn nearest(pcs: &[u8], lo: u8, hi: u8, target: u8) -> Option<u8> {
    (lo..=hi)
        .filter(|p| pcs.contains(&(p % 12)))
        .min_by_key(|p| (p.abs_diff(target), *p))
}

fn chord_pcs(tonic: u8, root: u8, quality: Quality) -> Vec<u8> {
    quality
        .intervals()
        .iter()
        .map(|i| (tonic + root + i) % 12)
        .collect()
}

/// Complete, non-crossing voicing that moves the upper voices least.
fn voice_chord(pcs: &[u8], previous: [u8; 4]) -> [u8; 4] {
    let (lo, hi) = RANGES[3];
    let bass = nearest(&pcs[..1], lo, hi, previous[3]).expect("root fits the bass range");
    let tones = |slot: usize| -> Vec<u8> {
        let (lo, hi) = RANGES[slot];
        (lo..=hi).filter(|p| pcs.contains(&(p % 12))).collect()
    };
    let (sop, alto, ten) = (tones(0), tones(1), tones(2));
    let mut best: Option<(u32, [u8; 4])> = None;
    for &s in &sop {
        for &a in alto.iter().filter(|a| **a <= s) {
            for &t in ten.iter().filter(|t| **t <= a && **t >= bass) {
                let v = [s, a, t, bass];
                if !pcs.iter().all(|pc| v.iter().any(|p| p % 12 == *pc)) {
                    continue;
                }
                let cost: u32 = (0..3).map(|i| v[i].abs_diff(previous[i]) as u32).sum();
                if best.is_none_or(|(c, _)| cost < c) {
                    best = Some((cost, v));
                }
            }
        }
    }
    best.expect("some complete voicing fits the ranges").1
}

fn synthetic_piece(rng: &mut impl Rng, id: String, split: Split, min: usize, max: usize) -> Piece {
    let tonic = rng.random_range(0..12u8);
    let degrees = if rng.random_bool(0.5) {
        &MAJOR_DEGREES
    } else {
        &MINOR_DEGREES
    };
    let target = rng.random_range(min..=max);

    let mut chords: Vec<(usize, usize)> = vec![(0, DURATIONS[rng.random_range(0..DURATIONS.len())])];
    let mut length = chords[0].1;
    // Leave room for the cadence: V for 4 steps, I for 8.
    while length + 12 < target {
        let next = weighted(rng, TRANSITIONS[chords.last().expect("non-empty").0]);
        let dur = DURATIONS[rng.random_range(0..DURATIONS.len())];
        chords.push((next, dur));
        length += dur;
    }
    chords.push((4, 4));
    chords.push((0, 8));

    let mut previous = [72, 64, 57, 45];
    let mut steps = Vec::new();
    let last = chords.len() - 1;
    for (n, (degree, dur)) in chords.into_iter().enumerate() {
        let (root, quality) = degrees[degree];
        let pcs = chord_pcs(tonic, root, quality);
        let voicing = voice_chord(&pcs, previous);
        // Only skip when the soprano's pitch class is doubled, so the triad survives.
        let doubled = voicing[1..].iter().any(|p| p % 12 == voicing[0] % 12);
        let skip_at = (n != last && doubled && dur >= 4 && rng.random_bool(0.35)).then_some(dur / 2);
        for i in 0..dur {
            let mut v = voicing;
            if skip_at.is_some_and(|s| i >= s) {
                let others: Vec<u8> = pcs.iter().copied().filter(|p| *p != voicing[0] % 12).collect();
                let (lo, hi) = RANGES[0];
                let lo = lo.max(voicing[1]);
                if let Some(p) = nearest(&others, lo, hi, voicing[0]) {
                    v[0] = p;
                }
            }
            steps.push(TimeStep::new(v.map(Some)));
        }
        previous = voicing;
    }
    Piece { id, split, steps }
}

/// Builds a corpus with the configured split sizes. Same config, same corpus.
pub fn synthetic_corpus(config: &SyntheticConfig) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut pieces = Vec::new();
    for (split, count) in [
        (Split::Train, config.train),
        (Split::Valid, config.valid),
        (Split::Test, config.test),
    ] {
        for i in 0..count {
            pieces.push(synthetic_piece(
                &mut rng,
                piece_id(split, i),
                split,
                config.min_steps,
                config.max_steps,
            ));
        }
    }
    Corpus::new(pieces).expect("synthetic pieces stay in range")
}
