//! Interleaved chord-and-voice serialization.
//!
//! Each time-step becomes five tokens in the order chord, soprano, bass,
//! alto, tenor, and a single `<END>` closes the sequence. Alongside each
//! token the encoder emits a repetition count: how many times in a row the
//! same value has appeared in that token's stream, wrapping to 0 after 79.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Piece, TimeStep, Voice};
use crate::harmony::classify_chord;
use crate::vocab::{Token, ZCount};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodeError {
    #[error("stream subset is empty")]
    EmptyStreams,
    #[error("invalid stream letter {0:?} (expected C, S, A, T or B)")]
    BadStreamLetter(char),
    #[error("sequence is empty")]
    EmptySequence,
    #[error("sequence does not end with <END>")]
    MissingEnd,
    #[error("sequence contains no time-steps")]
    EmptyPiece,
    #[error("sequence length {0} is not 5·N+1")]
    BadLength(usize),
    #[error("x, z and stream have different lengths")]
    RaggedSequence,
    #[error("position {position}: token {token} does not belong to stream {stream}")]
    KindMismatch {
        position: usize,
        stream: Stream,
        token: Token,
    },
    #[error("position {position}: expected stream {expected}, found {found}")]
    StreamMismatch {
        position: usize,
        expected: Stream,
        found: Stream,
    },
    #[error("position {0}: token index out of range")]
    BadToken(usize),
}

/// Stream ids, numbered in prediction order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stream {
    Chord = 0,
    Soprano = 1,
    Bass = 2,
    Alto = 3,
    Tenor = 4,
    End = 5,
}

impl Stream {
    /// Per-step streams in prediction order.
    pub const STEP_ORDER: [Stream; 5] = [
        Stream::Chord,
        Stream::Soprano,
        Stream::Bass,
        Stream::Alto,
        Stream::Tenor,
    ];
    pub const ALL: [Stream; 6] = [
        Stream::Chord,
        Stream::Soprano,
        Stream::Bass,
        Stream::Alto,
        Stream::Tenor,
        Stream::End,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn voice(self) -> Option<Voice> {
        match self {
            Stream::Soprano => Some(Voice::Soprano),
            Stream::Alto => Some(Voice::Alto),
            Stream::Tenor => Some(Voice::Tenor),
            Stream::Bass => Some(Voice::Bass),
            Stream::Chord | Stream::End => None,
        }
    }

    pub fn letter(self) -> char {
        match self {
            Stream::Chord => 'C',
            Stream::Soprano => 'S',
            Stream::Bass => 'B',
            Stream::Alto => 'A',
            Stream::Tenor => 'T',
            Stream::End => 'E',
        }
    }

    /// Whether `token` is a legal value for this stream.
    pub fn accepts(self, token: Token) -> bool {
        match self {
            Stream::Chord => token.is_chord_class(),
            Stream::End => token == Token::End,
            _ => token.is_voice_token(),
        }
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// A non-empty subset of the five per-step streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct StreamSet(u8);

impl StreamSet {
    pub const FULL: StreamSet = StreamSet(0b11111);

    pub fn new(streams: &[Stream]) -> Result<StreamSet, EncodeError> {
        let bits = streams
            .iter()
            .filter(|s| **s != Stream::End)
            .fold(0u8, |acc, s| acc | 1 << s.id());
        if bits == 0 {
            return Err(EncodeError::EmptyStreams);
        }
        Ok(StreamSet(bits))
    }

    pub fn contains(self, stream: Stream) -> bool {
        stream != Stream::End && self.0 & (1 << stream.id()) != 0
    }

    /// Members in prediction order.
    pub fn streams(self) -> impl Iterator<Item = Stream> {
        Stream::STEP_ORDER
            .into_iter()
            .filter(move |s| self.contains(*s))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_full(self) -> bool {
        self == StreamSet::FULL
    }
}

impl fmt::Display for StreamSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Prediction order, e.g. "CSBAT".
        for s in self.streams() {
            write!(f, "{}", s.letter())?;
        }
        Ok(())
    }
}

impl FromStr for StreamSet {
    type Err = EncodeError;

    /// Accepts the letters C, S, A, T, B in any order (`CSATB`, `SATB`, `CS`…).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let streams = s
            .chars()
            .map(|c| match c.to_ascii_uppercase() {
                'C' => Ok(Stream::Chord),
                'S' => Ok(Stream::Soprano),
                'A' => Ok(Stream::Alto),
                'T' => Ok(Stream::Tenor),
                'B' => Ok(Stream::Bass),
                other => Err(EncodeError::BadStreamLetter(other)),
            })
            .collect::<Result<Vec<_>, _>>()?;
        StreamSet::new(&streams)
    }
}

impl TryFrom<String> for StreamSet {
    type Error = EncodeError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<StreamSet> for String {
    fn from(value: StreamSet) -> Self {
        value.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedSequence {
    /// Token indices.
    pub x: Vec<usize>,
    pub z: Vec<ZCount>,
    pub stream: Vec<Stream>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn tokens(&self) -> impl Iterator<Item = Token> + '_ {
        self.x
            .iter()
            .map(|&i| Token::from_index(i).expect("encoded indices are valid"))
    }

    /// `pos,stream,x,z` lines with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pos,stream,x,z\n");
        for p in 0..self.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                p,
                self.stream[p].id(),
                self.x[p],
                self.z[p].value()
            ));
        }
        out
    }
}

/// Online per-stream repetition counter. Shared by the encoder and the
/// sampler so both produce the same Z values.
#[derive(Debug, Clone, Default)]
pub struct ZTracker {
    last: [Option<usize>; 5],
    run: [u32; 5],
}

impl ZTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records `x` in `stream` and returns its repetition count.
    pub fn push(&mut self, stream: Stream, x: usize) -> ZCount {
        if stream == Stream::End {
            return ZCount::ZERO;
        }
        let s = stream.id();
        if self.last[s] == Some(x) {
            self.run[s] += 1;
        } else {
            self.last[s] = Some(x);
            self.run[s] = 1;
        }
        ZCount::from_run_length(self.run[s])
    }
}

fn step_token(step: &TimeStep, stream: Stream) -> Token {
    match stream.voice() {
        Some(v) => step.voice(v).map_or(Token::Rest, Token::Pitch),
        None => classify_chord(step),
    }
}

fn encode_steps(steps: &[TimeStep], streams: StreamSet) -> EncodedSequence {
    let len = streams.len() * steps.len() + 1;
    let mut seq = EncodedSequence {
        x: Vec::with_capacity(len),
        z: Vec::with_capacity(len),
        stream: Vec::with_capacity(len),
    };
    let mut tracker = ZTracker::new();
    for step in steps {
        for stream in streams.streams() {
            let x = step_token(step, stream).index();
            seq.z.push(tracker.push(stream, x));
            seq.x.push(x);
            seq.stream.push(stream);
        }
    }
    seq.x.push(Token::End.index());
    seq.z.push(ZCount::ZERO);
    seq.stream.push(Stream::End);
    seq
}

pub fn encode(piece: &Piece) -> EncodedSequence {
    encode_steps(&piece.steps, StreamSet::FULL)
}

pub fn restrict_streams(piece: &Piece, streams: StreamSet) -> Result<EncodedSequence, EncodeError> {
    if streams.is_empty() {
        return Err(EncodeError::EmptyStreams);
    }
    Ok(encode_steps(&piece.steps, streams))
}

/// Reconstructs the time-steps of a full five-stream sequence. Chord tokens
/// are checked for kind and then discarded.
pub fn decode(seq: &EncodedSequence) -> Result<Vec<TimeStep>, EncodeError> {
    if seq.x.len() != seq.z.len() || seq.x.len() != seq.stream.len() {
        return Err(EncodeError::RaggedSequence);
    }
    let last = seq.x.last().ok_or(EncodeError::EmptySequence)?;
    if *last != Token::End.index() {
        return Err(EncodeError::MissingEnd);
    }
    let body = seq.len() - 1;
    if body == 0 {
        return Err(EncodeError::EmptyPiece);
    }
    if body % 5 != 0 {
        return Err(EncodeError::BadLength(seq.len()));
    }

    let mut steps = Vec::with_capacity(body / 5);
    for (t, chunk) in seq.x[..body].chunks(5).enumerate() {
        let mut step = TimeStep::rest();
        for (k, (&x, expected)) in chunk.iter().zip(Stream::STEP_ORDER).enumerate() {
            let position = 5 * t + k;
            let found = seq.stream[position];
            if found != expected {
                return Err(EncodeError::StreamMismatch {
                    position,
                    expected,
                    found,
                });
            }
            let token = Token::from_index(x).map_err(|_| EncodeError::BadToken(position))?;
            if !expected.accepts(token) {
                return Err(EncodeError::KindMismatch {
                    position,
                    stream: expected,
                    token,
                });
            }
            if let (Some(voice), Token::Pitch(p)) = (expected.voice(), token) {
                step.voices[voice.slot()] = Some(p);
            }
        }
        steps.push(step);
    }
    if seq.stream[body] != Stream::End {
        return Err(EncodeError::StreamMismatch {
            position: body,
            expected: Stream::End,
            found: seq.stream[body],
        });
    }
    Ok(steps)
}

/// True at every position that is not a chord prediction.
pub fn ncl_mask(seq: &EncodedSequence) -> Vec<bool> {
    seq.stream.iter().map(|s| *s != Stream::Chord).collect()
}

/// Longest raw (unwrapped) run of identical values in any one stream.
pub fn max_raw_run(piece: &Piece) -> u32 {
    let mut best = 0;
    for stream in Stream::STEP_ORDER {
        let mut run = 0u32;
        let mut prev = None;
        for step in &piece.steps {
            let x = step_token(step, stream);
            if prev == Some(x) {
                run += 1;
            } else {
                run = 1;
                prev = Some(x);
            }
            best = best.max(run);
        }
    }
    best
}
