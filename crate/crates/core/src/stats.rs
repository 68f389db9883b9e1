//! Corpus statistics: split sizes, length distribution, voice ranges and a
//! few representation-level counts (encoded length, chord label mix, long
//! repetition runs).

use std::collections::BTreeMap;

use serde::Serialize;

use crate::augment::VoiceRanges;
use crate::corpus::{Corpus, CorpusError, Piece, Split, TimeStep, Voice};
use crate::encoder::max_raw_run;
use crate::harmony::classify_chord;
use crate::vocab::{Quality, Token, Z_SIZE};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsReport {
    pub split_counts: BTreeMap<Split, usize>,
    pub total_steps: usize,
    pub min_steps: usize,
    pub max_steps: usize,
    pub mean_steps: f64,
    /// Longest piece after encoding (5·N+1).
    pub max_encoded_len: usize,
    /// Observed [min, max] pitch per voice over all splits.
    pub voice_ranges: BTreeMap<Voice, Option<(u8, u8)>>,
    /// Observed [min, max] pitch per voice over the training split only.
    pub train_voice_ranges: BTreeMap<Voice, Option<(u8, u8)>>,
    /// MIDI pitch → occurrence count over all voices and splits.
    pub pitch_histogram: BTreeMap<u8, usize>,
    pub chord_other_fraction: f64,
    pub chord_rest_steps: usize,
    /// Steps where some but not all voices rest.
    pub partial_rest_steps: usize,
    /// Pieces whose longest single-stream run exceeds the repetition-count
    /// domain, with that run length.
    pub long_runs: Vec<(String, u32)>,
    /// Pieces that open on a minor triad and close on the major triad with
    /// the same root. Mode detection reads these as major.
    pub picardy_candidates: Vec<String>,
}

pub fn corpus_stats(corpus: &Corpus) -> Result<StatsReport, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::Empty);
    }
    let pieces = corpus.pieces();
    let lens: Vec<usize> = pieces.iter().map(|p| p.len()).collect();
    let total_steps: usize = lens.iter().sum();
    let max_steps = *lens.iter().max().expect("non-empty");

    let mut histogram = BTreeMap::new();
    let mut other = 0usize;
    let mut chord_rest = 0usize;
    let mut partial = 0usize;
    for piece in pieces {
        for step in &piece.steps {
            for p in step.sounding() {
                *histogram.entry(p).or_insert(0) += 1;
            }
            match classify_chord(step) {
                Token::ChordOther => other += 1,
                Token::ChordRest => chord_rest += 1,
                _ => {}
            }
            let resting = step.voices.iter().filter(|v| v.is_none()).count();
            if resting > 0 && resting < 4 {
                partial += 1;
            }
        }
    }

    let long_runs = pieces
        .iter()
        .map(|p| (p.id.clone(), max_raw_run(p)))
        .filter(|(_, run)| *run as usize > Z_SIZE)
        .collect();

    let picardy_candidates = pieces
        .iter()
        .filter(|p| is_picardy_candidate(p))
        .map(|p| p.id.clone())
        .collect();

    let to_map = |ranges: VoiceRanges| {
        Voice::ALL
            .iter()
            .map(|v| (*v, ranges.get(*v)))
            .collect::<BTreeMap<_, _>>()
    };

    Ok(StatsReport {
        split_counts: Split::ALL.iter().map(|s| (*s, corpus.count(*s))).collect(),
        total_steps,
        min_steps: *lens.iter().min().expect("non-empty"),
        max_steps,
        mean_steps: total_steps as f64 / lens.len() as f64,
        max_encoded_len: 5 * max_steps + 1,
        voice_ranges: to_map(VoiceRanges::observed(pieces.iter())),
        train_voice_ranges: to_map(VoiceRanges::observed(corpus.split(Split::Train))),
        pitch_histogram: histogram,
        chord_other_fraction: other as f64 / total_steps as f64,
        chord_rest_steps: chord_rest,
        partial_rest_steps: partial,
        long_runs,
        picardy_candidates,
    })
}

fn is_picardy_candidate(piece: &Piece) -> bool {
    let sounding = |step: &&TimeStep| !step.is_all_rest();
    let first = piece.steps.iter().find(sounding).map(classify_chord);
    let last = piece.steps.iter().rev().find(sounding).map(classify_chord);
    matches!(
        (first, last),
        (
            Some(Token::Chord { quality: Quality::Minor, root: a }),
            Some(Token::Chord { quality: Quality::Major, root: b }),
        ) if a == b
    )
}

impl StatsReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "pieces      train={} valid={} test={}\n",
            self.split_counts[&Split::Train],
            self.split_counts[&Split::Valid],
            self.split_counts[&Split::Test]
        ));
        out.push_str(&format!(
            "steps       total={} min={} max={} mean={:.1}\n",
            self.total_steps, self.min_steps, self.max_steps, self.mean_steps
        ));
        out.push_str(&format!("max encoded length  {}\n", self.max_encoded_len));
        for (voice, range) in &self.voice_ranges {
            let train = self.train_voice_ranges[voice];
            out.push_str(&format!(
                "range {voice}     all={}  train={}\n",
                fmt_range(*range),
                fmt_range(train)
            ));
        }
        out.push_str(&format!(
            "chords      other={:.2}% all-rest steps={} partial-rest steps={}\n",
            100.0 * self.chord_other_fraction,
            self.chord_rest_steps,
            self.partial_rest_steps
        ));
        for (id, run) in &self.long_runs {
            out.push_str(&format!("long run    {id}: {run} repeats (Z wraps)\n"));
        }
        if !self.picardy_candidates.is_empty() {
            out.push_str(&format!(
                "picardy     {} pieces open minor and close major on the same root\n",
                self.picardy_candidates.len()
            ));
        }
        out
    }
}

fn fmt_range(range: Option<(u8, u8)>) -> String {
    match range {
        Some((lo, hi)) => format!("{lo}-{hi}"),
        None => "-".into(),
    }
}
