//! Teacher-forced evaluation: Full and no-chord (NCL) losses and accuracy,
//! aggregated token-weighted over a whole split.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::corpus::{Corpus, Split};
use crate::encoder::{restrict_streams, EncodeError, EncodedSequence, Stream, StreamSet};
use crate::model::{sequence_nll, DropoutPlan, ModelError, ModelParams};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("checkpoint was trained on streams {trained}, evaluation asked for {requested}")]
    StreamMismatch {
        trained: StreamSet,
        requested: StreamSet,
    },
    #[error("split {0} is empty")]
    EmptySplit(String),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StreamStats {
    pub count: usize,
    pub nll: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub split: String,
    pub streams: StreamSet,
    pub sequences: usize,
    pub positions: usize,
    pub chord_positions: usize,
    pub ncl_positions: usize,
    pub full_nll: f64,
    pub ncl_nll: f64,
    /// Percentages.
    pub full_acc: f64,
    pub ncl_acc: f64,
    /// Keyed by stream letter (C, S, B, A, T, E).
    pub per_stream: BTreeMap<char, StreamStats>,
}

#[derive(Default, Clone, Copy)]
struct Tally {
    count: usize,
    loss: f64,
    hits: usize,
}

impl Tally {
    fn add(&mut self, loss: f32, hit: bool) {
        self.count += 1;
        self.loss += loss as f64;
        self.hits += hit as usize;
    }

    fn merge(&mut self, other: &Tally) {
        self.count += other.count;
        self.loss += other.loss;
        self.hits += other.hits;
    }

    fn nll(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.loss / self.count as f64
        }
    }

    fn acc(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            100.0 * self.hits as f64 / self.count as f64
        }
    }
}

/// Per-stream tallies for one sequence, indexed by `Stream::id`.
fn tally_sequence(params: &ModelParams, seq: &EncodedSequence) -> Result<[Tally; 6], ModelError> {
    let loss = sequence_nll(params, seq, &DropoutPlan::eval())?;
    let mut tallies = [Tally::default(); 6];
    for (i, (l, pred)) in loss.per_position.iter().zip(&loss.argmax).enumerate() {
        let p = i + 1;
        tallies[seq.stream[p].id()].add(*l, *pred == seq.x[p]);
    }
    Ok(tallies)
}

/// Evaluates already-encoded sequences. Sequences run in parallel; the
/// reduction happens afterwards in input order.
pub fn evaluate_sequences(
    params: &ModelParams,
    seqs: &[EncodedSequence],
    split: &str,
) -> Result<EvalReport, EvalError> {
    if seqs.is_empty() {
        return Err(EvalError::EmptySplit(split.to_string()));
    }
    let per_seq: Vec<[Tally; 6]> = seqs
        .par_iter()
        .map(|s| tally_sequence(params, s))
        .collect::<Result<_, _>>()?;
    let mut by_stream = [Tally::default(); 6];
    for seq in &per_seq {
        for (acc, t) in by_stream.iter_mut().zip(seq) {
            acc.merge(t);
        }
    }
    let mut full = Tally::default();
    let mut ncl = Tally::default();
    for stream in Stream::ALL {
        let t = &by_stream[stream.id()];
        full.merge(t);
        if stream != Stream::Chord {
            ncl.merge(t);
        }
    }
    let per_stream = Stream::ALL
        .iter()
        .filter(|s| by_stream[s.id()].count > 0)
        .map(|s| {
            let t = &by_stream[s.id()];
            (
                s.letter(),
                StreamStats {
                    count: t.count,
                    nll: t.nll(),
                    acc: t.acc(),
                },
            )
        })
        .collect();
    Ok(EvalReport {
        split: split.to_string(),
        streams: params.streams,
        sequences: seqs.len(),
        positions: full.count,
        chord_positions: by_stream[Stream::Chord.id()].count,
        ncl_positions: ncl.count,
        full_nll: full.nll(),
        ncl_nll: ncl.nll(),
        full_acc: full.acc(),
        ncl_acc: ncl.acc(),
        per_stream,
    })
}

/// Encodes one split with `streams` and evaluates it. The streams must
/// match those the checkpoint was trained on.
pub fn evaluate(
    params: &ModelParams,
    corpus: &Corpus,
    split: Split,
    streams: StreamSet,
) -> Result<EvalReport, EvalError> {
    if params.streams != streams {
        return Err(EvalError::StreamMismatch {
            trained: params.streams,
            requested: streams,
        });
    }
    let seqs = corpus
        .split(split)
        .map(|p| restrict_streams(p, streams))
        .collect::<Result<Vec<_>, _>>()?;
    evaluate_sequences(params, &seqs, split.key())
}

impl EvalReport {
    /// Aligned table: one row per split with Full/NCL loss and accuracy,
    /// followed by the per-stream breakdown.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<8} {:>9} {:>9} {:>9} {:>9}\n",
            "split", "full nll", "ncl nll", "full acc", "ncl acc"
        );
        out.push_str(&format!(
            "{:<8} {:>9.3} {:>9.3} {:>9.3} {:>9.3}\n",
            self.split, self.full_nll, self.ncl_nll, self.full_acc, self.ncl_acc
        ));
        out.push_str(&format!(
            "\nstreams {}  sequences {}  positions {} (chord {}, ncl {})\n",
            self.streams, self.sequences, self.positions, self.chord_positions, self.ncl_positions
        ));
        out.push_str(&format!("{:<8} {:>9} {:>9} {:>9}\n", "stream", "count", "nll", "acc"));
        for (letter, s) in &self.per_stream {
            out.push_str(&format!(
                "{:<8} {:>9} {:>9.3} {:>9.3}\n",
                letter, s.count, s.nll, s.acc
            ));
        }
        out
    }
}
