//! Ancestral sampling from a trained model, rhythmic smoothing and MIDI
//! export.

use std::fs;
use std::path::Path;

use midly::num::{u15, u24, u28, u4, u7};
use midly::{Format, Header, MetaMessage, MidiMessage, Smf, Timing, TrackEvent, TrackEventKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::corpus::{TimeStep, Voice};
use crate::encoder::{EncodedSequence, Stream, StreamSet, ZTracker};
use crate::model::{step, DropoutPlan, HiddenState, ModelError, ModelParams};
use crate::vocab::{Quality, Token, VOCAB_SIZE};

pub const TICKS_PER_QUARTER: u16 = 480;
pub const TICKS_PER_STEP: u32 = 120;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("sampling needs a checkpoint trained on all five streams, this one has {0}")]
    StreamMismatch(StreamSet),
    #[error("invalid sample configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Tokens pinned at the positions of one stream, one per time-step. Steps
/// past the end of the list are sampled freely.
#[derive(Debug, Clone, PartialEq)]
pub struct ForcedTrack {
    pub stream: Stream,
    pub tokens: Vec<Token>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleConfig {
    pub seed: u64,
    pub temperature: f64,
    pub max_tokens: usize,
    pub constrain_kinds: bool,
    pub smoothing: bool,
    pub start_chord: Option<Token>,
    /// Experimental: no quality guarantees.
    pub forced: Option<ForcedTrack>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            seed: 0,
            temperature: 1.0,
            max_tokens: 3200,
            constrain_kinds: false,
            smoothing: true,
            start_chord: None,
            forced: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Note {
    pub onset: usize,
    pub duration: usize,
    pub pitch: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedScore {
    pub steps: Vec<TimeStep>,
    /// Chord token per time-step; kind violations read as OTHER.
    pub chords: Vec<Token>,
    pub sequence: EncodedSequence,
    /// Notes per voice in S, A, T, B order.
    pub notes: [Vec<Note>; 4],
    /// Positions whose sampled token does not fit the stream.
    pub violations: Vec<usize>,
    /// Whether END was produced before the token cap.
    pub ended: bool,
}

/// The 24 major and minor triads a sample may open with.
pub fn start_chords() -> Vec<Token> {
    [Quality::Major, Quality::Minor]
        .iter()
        .flat_map(|q| (0..12).map(move |root| Token::Chord { quality: *q, root }))
        .collect()
}

fn sample_index(rng: &mut impl Rng, logits: &[f32], temperature: f64, allowed: impl Fn(usize) -> bool) -> usize {
    let scaled: Vec<f64> = logits.iter().map(|l| *l as f64 / temperature).collect();
    let max = scaled
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled
        .iter()
        .enumerate()
        .map(|(i, v)| if allowed(i) { (v - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            last = i;
            if u < *w {
                return i;
            }
            u -= w;
        }
    }
    last
}

/// Generates one piece. Streams are fed in C, S, B, A, T order regardless of
/// what the model emits; Z is tracked with the encoder's own counter.
pub fn generate(params: &ModelParams, config: &SampleConfig) -> Result<GeneratedScore, SampleError> {
    if !params.streams.is_full() {
        return Err(SampleError::StreamMismatch(params.streams));
    }
    if !(config.temperature > 0.0 && config.temperature.is_finite()) {
        return Err(SampleError::BadConfig("temperature must be positive".into()));
    }
    if config.max_tokens < 6 {
        return Err(SampleError::BadConfig("max_tokens must be at least 6".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let start = match config.start_chord {
        Some(t) if t.is_chord_class() => t,
        Some(t) => return Err(SampleError::BadConfig(format!("start token {t} is not a chord"))),
        None => {
            let options = start_chords();
            options[rng.random_range(0..options.len())]
        }
    };

    let mut tracker = ZTracker::new();
    let mut seq = EncodedSequence {
        x: vec![start.index()],
        z: vec![tracker.push(Stream::Chord, start.index())],
        stream: vec![Stream::Chord],
    };
    let mut violations = Vec::new();
    let mut hidden = HiddenState::zeros(&params.config);
    let plan = DropoutPlan::eval();
    let mut ended = false;
    while seq.len() < config.max_tokens {
        let p = seq.len();
        let (logits, next) = step(params, seq.x[p - 1], seq.z[p - 1].index(), &hidden, &plan, p - 1)?;
        hidden = next;
        let stream = Stream::STEP_ORDER[p % 5];
        let forced = config
            .forced
            .as_ref()
            .filter(|f| f.stream == stream)
            .and_then(|f| f.tokens.get(p / 5));
        let x = match forced {
            Some(t) => t.index(),
            None if config.constrain_kinds => sample_index(&mut rng, &logits, config.temperature, |i| {
                let t = Token::from_index(i).expect("index below vocabulary size");
                stream.accepts(t) || (t == Token::End && stream == Stream::Chord)
            }),
            None => sample_index(&mut rng, &logits, config.temperature, |i| i < VOCAB_SIZE),
        };
        let token = Token::from_index(x).expect("sampled index in vocabulary");
        if token == Token::End {
            if stream != Stream::Chord {
                violations.push(p);
            }
            seq.x.push(x);
            seq.z.push(tracker.push(Stream::End, x));
            seq.stream.push(Stream::End);
            ended = true;
            break;
        }
        if !stream.accepts(token) {
            violations.push(p);
        }
        seq.x.push(x);
        seq.z.push(tracker.push(stream, x));
        seq.stream.push(stream);
    }

    let (steps, chords) = decode_lenient(&seq);
    let notes = voice_notes(&steps);
    let score = GeneratedScore {
        steps,
        chords,
        sequence: seq,
        notes,
        violations,
        ended,
    };
    Ok(if config.smoothing { smooth(&score) } else { score })
}

/// Decodes complete time-steps of a generated sequence. A voice position
/// holding a chord-class token reads as REST; a chord position holding a
/// voice token reads as OTHER. A trailing partial step is dropped.
pub fn decode_lenient(seq: &EncodedSequence) -> (Vec<TimeStep>, Vec<Token>) {
    let body = seq
        .stream
        .iter()
        .position(|s| *s == Stream::End)
        .unwrap_or(seq.len());
    let mut steps = Vec::with_capacity(body / 5);
    let mut chords = Vec::with_capacity(body / 5);
    for chunk in seq.x[..body - body % 5].chunks(5) {
        let mut step = TimeStep::rest();
        let mut chord = Token::ChordOther;
        for (&x, stream) in chunk.iter().zip(Stream::STEP_ORDER) {
            let token = Token::from_index(x).expect("index in vocabulary");
            match (stream.voice(), token) {
                (None, t) if t.is_chord_class() => chord = t,
                (Some(v), Token::Pitch(p)) => step.voices[v.slot()] = Some(p),
                _ => {}
            }
        }
        steps.push(step);
        chords.push(chord);
    }
    (steps, chords)
}

/// One single-step note per sounding cell, per voice in S, A, T, B order.
pub fn voice_notes(steps: &[TimeStep]) -> [Vec<Note>; 4] {
    Voice::ALL.map(|voice| {
        steps
            .iter()
            .enumerate()
            .filter_map(|(t, s)| {
                s.voice(voice).map(|pitch| Note {
                    onset: t,
                    duration: 1,
                    pitch,
                })
            })
            .collect()
    })
}

/// Ties consecutive notes of equal pitch that touch end to start.
pub fn merge_notes(notes: &[Note]) -> Vec<Note> {
    let mut out: Vec<Note> = Vec::with_capacity(notes.len());
    for n in notes {
        match out.last_mut() {
            Some(prev) if prev.pitch == n.pitch && prev.onset + prev.duration == n.onset => {
                prev.duration += n.duration;
            }
            _ => out.push(*n),
        }
    }
    out
}

pub fn smooth(score: &GeneratedScore) -> GeneratedScore {
    GeneratedScore {
        notes: score.notes.each_ref().map(|v| merge_notes(v)),
        ..score.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MidiOptions {
    pub bpm: f64,
    pub program: u8,
    pub velocity: u8,
    pub chord_markers: bool,
}

impl Default for MidiOptions {
    fn default() -> Self {
        MidiOptions {
            bpm: 80.0,
            program: 0,
            velocity: 80,
            chord_markers: false,
        }
    }
}

/// Converts absolute-tick events to delta-timed ones and appends the end of
/// track marker at `end`.
fn finish_track<'a>(mut events: Vec<(u32, u8, TrackEventKind<'a>)>, end: u32) -> Vec<TrackEvent<'a>> {
    // Stable sort by tick, then by the rank so note-offs precede note-ons.
    events.sort_by_key(|(tick, rank, _)| (*tick, *rank));
    let mut now = 0;
    let mut out: Vec<TrackEvent<'a>> = events
        .into_iter()
        .map(|(tick, _, kind)| {
            let delta = tick - now;
            now = tick;
            TrackEvent {
                delta: u28::new(delta),
                kind,
            }
        })
        .collect();
    out.push(TrackEvent {
        delta: u28::new(end.max(now) - now),
        kind: TrackEventKind::Meta(MetaMessage::EndOfTrack),
    });
    out
}

/// Standard MIDI file bytes: format 1, tempo track, then one track per
/// voice (S, A, T, B on channels 0 to 3), then the optional chord markers.
pub fn midi_bytes(score: &GeneratedScore, options: &MidiOptions) -> Vec<u8> {
    let end = score.steps.len() as u32 * TICKS_PER_STEP;
    let tempo = (60_000_000.0 / options.bpm).round() as u32;
    let names = ["Soprano", "Alto", "Tenor", "Bass"];
    let labels: Vec<String> = score.chords.iter().map(|c| c.label()).collect();

    let mut tracks = vec![finish_track(
        vec![
            (0, 0, TrackEventKind::Meta(MetaMessage::Tempo(u24::new(tempo)))),
            (0, 1, TrackEventKind::Meta(MetaMessage::TimeSignature(4, 2, 24, 8))),
        ],
        end,
    )];
    for (slot, notes) in score.notes.iter().enumerate() {
        let channel = u4::new(slot as u8);
        let mut events = vec![
            (0, 0, TrackEventKind::Meta(MetaMessage::TrackName(names[slot].as_bytes()))),
            (
                0,
                1,
                TrackEventKind::Midi {
                    channel,
                    message: MidiMessage::ProgramChange {
                        program: u7::new(options.program),
                    },
                },
            ),
        ];
        for n in notes {
            let on = n.onset as u32 * TICKS_PER_STEP;
            let off = (n.onset + n.duration) as u32 * TICKS_PER_STEP;
            let key = u7::new(n.pitch);
            events.push((
                on,
                3,
                TrackEventKind::Midi {
                    channel,
                    message: MidiMessage::NoteOn {
                        key,
                        vel: u7::new(options.velocity),
                    },
                },
            ));
            events.push((
                off,
                2,
                TrackEventKind::Midi {
                    channel,
                    message: MidiMessage::NoteOff { key, vel: u7::new(0) },
                },
            ));
        }
        tracks.push(finish_track(events, end));
    }
    if options.chord_markers {
        let mut events = vec![(0, 0, TrackEventKind::Meta(MetaMessage::TrackName(b"Chords")))];
        for (t, label) in labels.iter().enumerate() {
            events.push((
                t as u32 * TICKS_PER_STEP,
                1,
                TrackEventKind::Meta(MetaMessage::Marker(label.as_bytes())),
            ));
        }
        tracks.push(finish_track(events, end));
    }

    let smf = Smf {
        header: Header::new(Format::Parallel, Timing::Metrical(u15::new(TICKS_PER_QUARTER))),
        tracks,
    };
    let mut out = Vec::new();
    smf.write_std(&mut out).expect("writing to memory");
    out
}

pub fn write_midi(score: &GeneratedScore, path: impl AsRef<Path>, options: &MidiOptions) -> Result<(), SampleError> {
    let path = path.as_ref();
    fs::write(path, midi_bytes(score, options)).map_err(|source| SampleError::Io {
        path: path.display().to_string(),
        source,
    })
}
