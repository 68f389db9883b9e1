//! Loading the JSON interchange corpus.
//!
//! The file is an object with exactly the keys `train`, `valid` and `test`.
//! Each maps to a list of pieces, each piece is a list of time-steps and each
//! time-step is `[S, A, T, B]` where every slot is a MIDI pitch or `null` for
//! a rest.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::vocab::{MAX_PITCH, MIN_PITCH};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("schema error at {location}: {reason}")]
    Schema { location: String, reason: String },
    #[error("piece {piece_id} step {step}: pitch {pitch} in voice {voice} outside {MIN_PITCH}..={MAX_PITCH}")]
    PitchOutOfRange {
        piece_id: String,
        step: usize,
        voice: Voice,
        pitch: i64,
    },
    #[error("corpus is empty")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn key(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train, valid or test)")),
        }
    }
}

/// Voices in source order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Voice {
    Soprano,
    Alto,
    Tenor,
    Bass,
}

impl Voice {
    pub const ALL: [Voice; 4] = [Voice::Soprano, Voice::Alto, Voice::Tenor, Voice::Bass];

    /// Slot in a [`TimeStep`].
    pub fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Voice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Voice::Soprano => "S",
            Voice::Alto => "A",
            Voice::Tenor => "T",
            Voice::Bass => "B",
        };
        f.write_str(s)
    }
}

/// One 16th-note slice: a pitch or rest (`None`) per voice, ordered S, A, T, B.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TimeStep {
    pub voices: [Option<u8>; 4],
}

impl TimeStep {
    pub fn new(voices: [Option<u8>; 4]) -> Self {
        TimeStep { voices }
    }

    pub fn rest() -> Self {
        TimeStep::default()
    }

    pub fn voice(&self, voice: Voice) -> Option<u8> {
        self.voices[voice.slot()]
    }

    pub fn is_all_rest(&self) -> bool {
        self.voices.iter().all(Option::is_none)
    }

    pub fn sounding(&self) -> impl Iterator<Item = u8> + '_ {
        self.voices.iter().flatten().copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Piece {
    pub id: String,
    pub split: Split,
    pub steps: Vec<TimeStep>,
}

impl Piece {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Checks the piece invariants: non-empty, every pitch in range.
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.steps.is_empty() {
            return Err(CorpusError::Schema {
                location: format!("piece {}", self.id),
                reason: "piece has no time-steps".into(),
            });
        }
        for (t, step) in self.steps.iter().enumerate() {
            for voice in Voice::ALL {
                if let Some(p) = step.voice(voice) {
                    if !(MIN_PITCH..=MAX_PITCH).contains(&p) {
                        return Err(CorpusError::PitchOutOfRange {
                            piece_id: self.id.clone(),
                            step: t,
                            voice,
                            pitch: p as i64,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pieces: Vec<Piece>,
}

impl Corpus {
    /// Builds a corpus after validating every piece.
    pub fn new(pieces: Vec<Piece>) -> Result<Self, CorpusError> {
        for piece in &pieces {
            piece.validate()?;
        }
        Ok(Corpus { pieces })
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Piece> + '_ {
        self.pieces.iter().filter(move |p| p.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn piece(&self, id: &str) -> Option<&Piece> {
        self.pieces.iter().find(|p| p.id == id)
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    /// Serializes back to the interchange format (compact, keys in train/valid/test order).
    pub fn to_interchange_json(&self) -> String {
        #[derive(Serialize)]
        struct Interchange<'a> {
            train: Vec<Vec<&'a [Option<u8>; 4]>>,
            valid: Vec<Vec<&'a [Option<u8>; 4]>>,
            test: Vec<Vec<&'a [Option<u8>; 4]>>,
        }
        let collect = |split| {
            self.split(split)
                .map(|p| p.steps.iter().map(|s| &s.voices).collect())
                .collect()
        };
        let doc = Interchange {
            train: collect(Split::Train),
            valid: collect(Split::Valid),
            test: collect(Split::Test),
        };
        serde_json::to_string(&doc).expect("corpus serializes")
    }
}

pub fn piece_id(split: Split, index: usize) -> String {
    format!("{}-{:03}", split.key(), index)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus(&text)
}

pub fn parse_corpus(text: &str) -> Result<Corpus, CorpusError> {
    let doc: Value = serde_json::from_str(text)?;
    let top = doc.as_object().ok_or_else(|| CorpusError::Schema {
        location: "top level".into(),
        reason: "expected an object".into(),
    })?;
    if let Some(extra) = top
        .keys()
        .find(|k| !Split::ALL.iter().any(|s| s.key() == k.as_str()))
    {
        return Err(CorpusError::Schema {
            location: "top level".into(),
            reason: format!("unexpected key {extra:?}"),
        });
    }

    let mut pieces = Vec::new();
    for split in Split::ALL {
        let list = top.get(split.key()).ok_or_else(|| CorpusError::Schema {
            location: "top level".into(),
            reason: format!("missing key {:?}", split.key()),
        })?;
        let list = list.as_array().ok_or_else(|| CorpusError::Schema {
            location: split.key().into(),
            reason: "expected a list of pieces".into(),
        })?;
        for (i, raw) in list.iter().enumerate() {
            let piece = parse_piece(split, i, raw)?;
            piece.validate()?;
            pieces.push(piece);
        }
    }
    Ok(Corpus { pieces })
}

fn parse_piece(split: Split, index: usize, raw: &Value) -> Result<Piece, CorpusError> {
    let id = piece_id(split, index);
    let schema = |step: Option<usize>, reason: String| CorpusError::Schema {
        location: match step {
            Some(t) => format!("piece {id} step {t}"),
            None => format!("piece {id}"),
        },
        reason,
    };
    let raw_steps = raw
        .as_array()
        .ok_or_else(|| schema(None, "expected a list of time-steps".into()))?;
    if raw_steps.is_empty() {
        return Err(schema(None, "piece has no time-steps".into()));
    }

    let mut steps = Vec::with_capacity(raw_steps.len());
    for (t, raw_step) in raw_steps.iter().enumerate() {
        let slots = raw_step
            .as_array()
            .ok_or_else(|| schema(Some(t), "expected a 4-element list".into()))?;
        if slots.len() != 4 {
            return Err(schema(Some(t), format!("expected 4 voices, found {}", slots.len())));
        }
        let mut voices = [None; 4];
        for (v, slot) in slots.iter().enumerate() {
            voices[v] = match slot {
                Value::Null => None,
                Value::Number(n) => {
                    let pitch = n
                        .as_i64()
                        .ok_or_else(|| schema(Some(t), format!("pitch {n} is not an integer")))?;
                    if !(MIN_PITCH as i64..=MAX_PITCH as i64).contains(&pitch) {
                        return Err(CorpusError::PitchOutOfRange {
                            piece_id: id,
                            step: t,
                            voice: Voice::ALL[v],
                            pitch,
                        });
                    }
                    Some(pitch as u8)
                }
                other => {
                    return Err(schema(Some(t), format!("expected integer or null, found {other}")))
                }
            };
        }
        steps.push(TimeStep { voices });
    }
    Ok(Piece { id, split, steps })
}
