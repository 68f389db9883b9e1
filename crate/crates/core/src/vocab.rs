//! Token vocabulary: the 98 input/output classes and the repetition-count domain.
//!
//! The index layout is a wire contract shared by checkpoints, the sampler and
//! every test:
//!
//! | indices | tokens                                   |
//! |---------|------------------------------------------|
//! | 0–45    | pitches, MIDI 36–81 (`index = midi − 36`) |
//! | 46–57   | major triads by root pitch class          |
//! | 58–69   | minor triads                              |
//! | 70–81   | diminished triads                         |
//! | 82–93   | augmented triads                          |
//! | 94      | chord other                               |
//! | 95      | chord rest                                |
//! | 96      | voice rest                                |
//! | 97      | end of sequence                           |

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_PITCH: u8 = 36;
pub const MAX_PITCH: u8 = 81;
pub const NUM_PITCHES: usize = (MAX_PITCH - MIN_PITCH + 1) as usize;
pub const VOCAB_SIZE: usize = 98;
/// Number of distinct repetition counts (0..=79).
pub const Z_SIZE: usize = 80;
/// Bumped whenever the index layout above changes.
pub const LAYOUT_VERSION: u32 = 1;

const CHORD_BASE: usize = NUM_PITCHES;
const CHORD_OTHER: usize = 94;
const CHORD_REST: usize = 95;
const REST: usize = 96;
const END: usize = 97;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("token index {0} outside 0..{VOCAB_SIZE}")]
    IndexOutOfRange(usize),
    #[error("MIDI pitch {0} outside {MIN_PITCH}..={MAX_PITCH}")]
    PitchOutOfRange(u8),
    #[error("repetition count {0} outside 0..{Z_SIZE}")]
    ZOutOfRange(u32),
    #[error("unrecognised token label {0:?}")]
    BadLabel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Quality {
    Major,
    Minor,
    Diminished,
    Augmented,
}

impl Quality {
    pub const ALL: [Quality; 4] = [
        Quality::Major,
        Quality::Minor,
        Quality::Diminished,
        Quality::Augmented,
    ];

    /// Semitone intervals above the root.
    pub fn intervals(self) -> [u8; 3] {
        match self {
            Quality::Major => [0, 4, 7],
            Quality::Minor => [0, 3, 7],
            Quality::Diminished => [0, 3, 6],
            Quality::Augmented => [0, 4, 8],
        }
    }

    fn offset(self) -> usize {
        match self {
            Quality::Major => 0,
            Quality::Minor => 1,
            Quality::Diminished => 2,
            Quality::Augmented => 3,
        }
    }

    fn suffix(self) -> &'static str {
        match self {
            Quality::Major => "",
            Quality::Minor => "m",
            Quality::Diminished => "dim",
            Quality::Augmented => "aug",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Token {
    Pitch(u8),
    Chord { quality: Quality, root: u8 },
    ChordOther,
    ChordRest,
    Rest,
    End,
}

impl Token {
    pub fn pitch(midi: u8) -> Result<Token, VocabError> {
        if (MIN_PITCH..=MAX_PITCH).contains(&midi) {
            Ok(Token::Pitch(midi))
        } else {
            Err(VocabError::PitchOutOfRange(midi))
        }
    }

    pub fn chord(quality: Quality, root: u8) -> Token {
        Token::Chord {
            quality,
            root: root % 12,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Token::Pitch(midi) => (midi - MIN_PITCH) as usize,
            Token::Chord { quality, root } => CHORD_BASE + 12 * quality.offset() + root as usize,
            Token::ChordOther => CHORD_OTHER,
            Token::ChordRest => CHORD_REST,
            Token::Rest => REST,
            Token::End => END,
        }
    }

    pub fn from_index(index: usize) -> Result<Token, VocabError> {
        match index {
            i if i < NUM_PITCHES => Ok(Token::Pitch(MIN_PITCH + i as u8)),
            i if i < CHORD_OTHER => {
                let rel = i - CHORD_BASE;
                Ok(Token::Chord {
                    quality: Quality::ALL[rel / 12],
                    root: (rel % 12) as u8,
                })
            }
            CHORD_OTHER => Ok(Token::ChordOther),
            CHORD_REST => Ok(Token::ChordRest),
            REST => Ok(Token::Rest),
            END => Ok(Token::End),
            i => Err(VocabError::IndexOutOfRange(i)),
        }
    }

    /// Every token in index order.
    pub fn all() -> impl Iterator<Item = Token> {
        (0..VOCAB_SIZE).map(|i| Token::from_index(i).expect("index in range"))
    }

    /// One of the 50 chord classes.
    pub fn is_chord_class(self) -> bool {
        matches!(
            self,
            Token::Chord { .. } | Token::ChordOther | Token::ChordRest
        )
    }

    /// A pitch or a voice rest.
    pub fn is_voice_token(self) -> bool {
        matches!(self, Token::Pitch(_) | Token::Rest)
    }

    /// Human-readable label, e.g. `C4`, `F#m`, `Bdim`, `<OTHER>`.
    pub fn label(self) -> String {
        match self {
            Token::Pitch(midi) => {
                let octave = midi as i32 / 12 - 1;
                format!("{}{}", PITCH_CLASS_NAMES[(midi % 12) as usize], octave)
            }
            Token::Chord { quality, root } => {
                format!("{}{}", PITCH_CLASS_NAMES[root as usize], quality.suffix())
            }
            Token::ChordOther => "<OTHER>".into(),
            Token::ChordRest => "<CHORD_REST>".into(),
            Token::Rest => "<REST>".into(),
            Token::End => "<END>".into(),
        }
    }

    /// Parses a chord label produced by [`Token::label`] (`C`, `Am`, `F#dim`, `Ebaug`…).
    pub fn parse_chord(label: &str) -> Result<Token, VocabError> {
        let bad = || VocabError::BadLabel(label.to_string());
        let (root_len, root) = PITCH_CLASS_NAMES
            .iter()
            .enumerate()
            .chain(FLAT_NAMES.iter().enumerate())
            .filter(|(_, name)| label.starts_with(**name))
            .map(|(pc, name)| (name.len(), pc as u8))
            .max()
            .ok_or_else(bad)?;
        let quality = match &label[root_len..] {
            "" => Quality::Major,
            "m" => Quality::Minor,
            "dim" => Quality::Diminished,
            "aug" => Quality::Augmented,
            _ => return Err(bad()),
        };
        Ok(Token::chord(quality, root))
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

const PITCH_CLASS_NAMES: [&str; 12] = [
    "C", "C#", "D", "Eb", "E", "F", "F#", "G", "Ab", "A", "Bb", "B",
];
const FLAT_NAMES: [&str; 12] = [
    "C", "Db", "D", "D#", "E", "F", "Gb", "G", "G#", "A", "A#", "B",
];

/// Count of consecutive identical values in one stream, wrapped into 0..80.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct ZCount(u8);

impl ZCount {
    pub const ZERO: ZCount = ZCount(0);

    pub fn new(value: u32) -> Result<ZCount, VocabError> {
        if (value as usize) < Z_SIZE {
            Ok(ZCount(value as u8))
        } else {
            Err(VocabError::ZOutOfRange(value))
        }
    }

    /// The count for the `run_length`-th consecutive occurrence (1-based).
    pub fn from_run_length(run_length: u32) -> ZCount {
        debug_assert!(run_length >= 1);
        ZCount(((run_length - 1) % Z_SIZE as u32) as u8)
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_examples() {
        assert_eq!(Token::Pitch(36).index(), 0);
        assert_eq!(Token::End.index(), 97);
        assert_eq!(Token::chord(Quality::Minor, 9).index(), 67);
        assert_eq!(Token::from_index(0), Ok(Token::Pitch(36)));
        assert_eq!(Token::from_index(95), Ok(Token::ChordRest));
        assert_eq!(Token::from_index(98), Err(VocabError::IndexOutOfRange(98)));
    }

    #[test]
    fn bijection_over_all_indices() {
        let tokens: Vec<Token> = Token::all().collect();
        assert_eq!(tokens.len(), VOCAB_SIZE);
        for (i, t) in tokens.iter().enumerate() {
            assert_eq!(t.index(), i);
        }
        let distinct: std::collections::HashSet<_> = tokens.iter().collect();
        assert_eq!(distinct.len(), VOCAB_SIZE);
    }

    #[test]
    fn class_counts() {
        let pitches = Token::all().filter(|t| matches!(t, Token::Pitch(_))).count();
        let chords = Token::all().filter(|t| t.is_chord_class()).count();
        assert_eq!(pitches, 46);
        assert_eq!(chords, 50);
        // 37 never occurs in the chorales but stays in the vocabulary for transposition.
        assert_eq!(Token::pitch(37).unwrap().index(), 1);
    }

    #[test]
    fn z_wraps() {
        assert_eq!(ZCount::from_run_length(1).value(), 0);
        assert_eq!(ZCount::from_run_length(80).value(), 79);
        assert_eq!(ZCount::from_run_length(81).value(), 0);
        assert!(ZCount::new(80).is_err());
    }

    #[test]
    fn chord_labels_round_trip() {
        for t in Token::all().filter(|t| matches!(t, Token::Chord { .. })) {
            assert_eq!(Token::parse_chord(&t.label()), Ok(t));
        }
        assert_eq!(
            Token::parse_chord("Dbm"),
            Ok(Token::chord(Quality::Minor, 1))
        );
        assert!(Token::parse_chord("Hsus").is_err());
    }
}
