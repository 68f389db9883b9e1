//! Training-set augmentation: transposition to every key that fits the voice
//! ranges, and an optional naive major/minor swap.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Piece, Split, TimeStep, Voice};
use crate::harmony::classify_chord;
use crate::vocab::{Quality, Token, MAX_PITCH, MIN_PITCH};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AugmentError {
    #[error("piece {piece_id}: cannot determine mode, final chord is {final_chord}")]
    UndeterminableMode { piece_id: String, final_chord: Token },
    #[error("piece {piece_id}: mode swap moves step {step} voice {voice} to {pitch}, outside {MIN_PITCH}..={MAX_PITCH}")]
    OutOfRange {
        piece_id: String,
        step: usize,
        voice: Voice,
        pitch: i32,
    },
    #[error("unknown augmentation mode {0:?} (expected none, transpose or transpose+modeswap)")]
    BadMode(String),
}

/// Allowed [min, max] pitch per voice; `None` leaves only the global range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoiceRanges(pub [Option<(u8, u8)>; 4]);

impl VoiceRanges {
    pub fn new(ranges: [(u8, u8); 4]) -> Self {
        VoiceRanges(ranges.map(Some))
    }

    /// Per-voice observed min/max.
    pub fn observed<'a>(pieces: impl IntoIterator<Item = &'a Piece>) -> Self {
        let mut ranges = [None::<(u8, u8)>; 4];
        for piece in pieces {
            for step in &piece.steps {
                for (slot, pitch) in step.voices.iter().enumerate() {
                    if let Some(p) = *pitch {
                        ranges[slot] = Some(match ranges[slot] {
                            Some((lo, hi)) => (lo.min(p), hi.max(p)),
                            None => (p, p),
                        });
                    }
                }
            }
        }
        VoiceRanges(ranges)
    }

    pub fn get(&self, voice: Voice) -> Option<(u8, u8)> {
        self.0[voice.slot()]
    }

    fn bounds(&self, slot: usize) -> (i32, i32) {
        match self.0[slot] {
            Some((lo, hi)) => (lo.max(MIN_PITCH) as i32, hi.min(MAX_PITCH) as i32),
            None => (MIN_PITCH as i32, MAX_PITCH as i32),
        }
    }

    pub fn admits(&self, piece: &Piece) -> bool {
        piece.steps.iter().all(|step| {
            step.voices.iter().enumerate().all(|(slot, p)| match p {
                Some(p) => {
                    let (lo, hi) = self.bounds(slot);
                    (lo..=hi).contains(&(*p as i32))
                }
                None => true,
            })
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AugmentMode {
    None,
    #[default]
    Transpose,
    TransposeModeSwap,
}

impl fmt::Display for AugmentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AugmentMode::None => "none",
            AugmentMode::Transpose => "transpose",
            AugmentMode::TransposeModeSwap => "transpose+modeswap",
        })
    }
}

impl FromStr for AugmentMode {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(AugmentMode::None),
            "transpose" => Ok(AugmentMode::Transpose),
            "transpose+modeswap" => Ok(AugmentMode::TransposeModeSwap),
            other => Err(AugmentError::BadMode(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_id: String,
    pub shift: i32,
    pub mode_swapped: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dropped {
    pub source_id: String,
    pub shift: i32,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedSet {
    #[serde(skip)]
    pub pieces: Vec<Piece>,
    pub provenance: Vec<Provenance>,
    /// Derived pieces that were discarded (mode swap only).
    pub dropped: Vec<Dropped>,
}

impl AugmentedSet {
    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    fn push(&mut self, piece: Piece, provenance: Provenance) {
        self.pieces.push(piece);
        self.provenance.push(provenance);
    }

    /// Provenance sidecar as pretty JSON.
    pub fn provenance_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("provenance serializes")
    }
}

pub fn transpose_piece(piece: &Piece, shift: i32) -> Option<Piece> {
    let mut steps = Vec::with_capacity(piece.steps.len());
    for step in &piece.steps {
        let mut voices = [None; 4];
        for (slot, p) in step.voices.iter().enumerate() {
            if let Some(p) = p {
                let q = *p as i32 + shift;
                if !(MIN_PITCH as i32..=MAX_PITCH as i32).contains(&q) {
                    return None;
                }
                voices[slot] = Some(q as u8);
            }
        }
        steps.push(TimeStep::new(voices));
    }
    Some(Piece {
        id: shifted_id(&piece.id, shift),
        split: piece.split,
        steps,
    })
}

fn shifted_id(id: &str, shift: i32) -> String {
    match shift {
        0 => id.to_string(),
        k => format!("{id}{k:+}"),
    }
}

/// Every semitone shift (including 0) that keeps each voice inside both the
/// global range and its own range.
pub fn admissible_shifts(piece: &Piece, ranges: &VoiceRanges) -> Vec<i32> {
    let mut lo_shift = i32::MIN;
    let mut hi_shift = i32::MAX;
    let mut any = false;
    for slot in 0..4 {
        let pitches = piece.steps.iter().filter_map(|s| s.voices[slot]);
        let (min, max) = match pitches.fold(None, |acc: Option<(u8, u8)>, p| {
            Some(acc.map_or((p, p), |(lo, hi)| (lo.min(p), hi.max(p))))
        }) {
            Some(r) => r,
            None => continue,
        };
        any = true;
        let (lo, hi) = ranges.bounds(slot);
        lo_shift = lo_shift.max(lo - min as i32);
        hi_shift = hi_shift.min(hi - max as i32);
    }
    if !any {
        return vec![0];
    }
    let mut shifts: Vec<i32> = (lo_shift..=hi_shift).collect();
    if !shifts.contains(&0) {
        shifts.push(0);
        shifts.sort_unstable();
    }
    shifts
}

/// Transposes every training piece to all admissible keys. Validation and
/// test pieces are never touched.
pub fn transpose_all(corpus: &Corpus, ranges: &VoiceRanges) -> AugmentedSet {
    let mut set = AugmentedSet::default();
    for piece in corpus.split(Split::Train) {
        for shift in admissible_shifts(piece, ranges) {
            let shifted = transpose_piece(piece, shift).expect("admissible shift stays in range");
            set.push(
                shifted,
                Provenance {
                    source_id: piece.id.clone(),
                    shift,
                    mode_swapped: false,
                },
            );
        }
    }
    set
}

/// The piece's mode and tonic pitch class, read from the last step that has
/// any sounding voice.
pub fn detect_mode(piece: &Piece) -> Result<(Quality, u8), AugmentError> {
    let final_chord = piece
        .steps
        .iter()
        .rev()
        .find(|s| !s.is_all_rest())
        .map_or(Token::ChordRest, classify_chord);
    match final_chord {
        Token::Chord {
            quality: quality @ (Quality::Major | Quality::Minor),
            root,
        } => Ok((quality, root)),
        other => Err(AugmentError::UndeterminableMode {
            piece_id: piece.id.clone(),
            final_chord: other,
        }),
    }
}

/// Naive mode conversion. Minor pieces get their minor 3rd, 6th and 7th
/// raised; major pieces get their major 3rd and 6th lowered.
pub fn mode_swap(piece: &Piece) -> Result<Piece, AugmentError> {
    let (quality, tonic) = detect_mode(piece)?;
    let (intervals, delta): (&[u8], i32) = match quality {
        Quality::Minor => (&[3, 8, 10], 1),
        _ => (&[4, 9], -1),
    };
    let mut steps = Vec::with_capacity(piece.steps.len());
    for (t, step) in piece.steps.iter().enumerate() {
        let mut voices = [None; 4];
        for (slot, p) in step.voices.iter().enumerate() {
            if let Some(p) = *p {
                let interval = (p + 12 - tonic) % 12;
                let q = if intervals.contains(&interval) {
                    p as i32 + delta
                } else {
                    p as i32
                };
                if !(MIN_PITCH as i32..=MAX_PITCH as i32).contains(&q) {
                    return Err(AugmentError::OutOfRange {
                        piece_id: piece.id.clone(),
                        step: t,
                        voice: Voice::ALL[slot],
                        pitch: q,
                    });
                }
                voices[slot] = Some(q as u8);
            }
        }
        steps.push(TimeStep::new(voices));
    }
    Ok(Piece {
        id: format!("{}~swap", piece.id),
        split: piece.split,
        steps,
    })
}

pub fn augment(corpus: &Corpus, ranges: &VoiceRanges, mode: AugmentMode) -> AugmentedSet {
    match mode {
        AugmentMode::None => {
            let mut set = AugmentedSet::default();
            for piece in corpus.split(Split::Train) {
                set.push(
                    piece.clone(),
                    Provenance {
                        source_id: piece.id.clone(),
                        shift: 0,
                        mode_swapped: false,
                    },
                );
            }
            set
        }
        AugmentMode::Transpose => transpose_all(corpus, ranges),
        AugmentMode::TransposeModeSwap => {
            let transposed = transpose_all(corpus, ranges);
            let mut set = transposed.clone();
            for (piece, prov) in transposed.pieces.iter().zip(&transposed.provenance) {
                let reason = match mode_swap(piece) {
                    Ok(swapped) if ranges.admits(&swapped) => {
                        set.push(
                            swapped,
                            Provenance {
                                mode_swapped: true,
                                ..prov.clone()
                            },
                        );
                        continue;
                    }
                    Ok(_) => "mode swap leaves the voice ranges".to_string(),
                    Err(e) => e.to_string(),
                };
                set.dropped.push(Dropped {
                    source_id: prov.source_id.clone(),
                    shift: prov.shift,
                    reason,
                });
            }
            set
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn piece(id: &str, steps: Vec<[Option<u8>; 4]>) -> Piece {
        Piece {
            id: id.into(),
            split: Split::Train,
            steps: steps.into_iter().map(TimeStep::new).collect(),
        }
    }

    #[test]
    fn single_note_shift_window() {
        let p = piece("train-000", vec![[Some(60), None, None, None]]);
        let ranges = VoiceRanges([Some((55, 65)), None, None, None]);
        let shifts = admissible_shifts(&p, &ranges);
        assert_eq!(shifts, (-5..=5).collect::<Vec<_>>());
        let corpus = Corpus::new(vec![p]).unwrap();
        assert_eq!(transpose_all(&corpus, &ranges).len(), 11);
    }

    #[test]
    fn no_headroom_keeps_only_original() {
        let p = piece("train-000", vec![[Some(81), None, None, Some(36)]]);
        let ranges = VoiceRanges([None; 4]);
        assert_eq!(admissible_shifts(&p, &ranges), vec![0]);
    }

    #[test]
    fn original_kept_even_outside_custom_ranges() {
        let p = piece("train-000", vec![[Some(70), None, None, None]]);
        let ranges = VoiceRanges([Some((60, 65)), None, None, None]);
        assert_eq!(admissible_shifts(&p, &ranges), vec![-10, -9, -8, -7, -6, -5, 0]);
        let wide = piece(
            "train-001",
            vec![[Some(58), None, None, None], [Some(70), None, None, None]],
        );
        assert_eq!(admissible_shifts(&wide, &ranges), vec![0]);
    }

    #[test]
    fn valid_and_test_untouched() {
        let mut v = piece("valid-000", vec![[Some(60), None, None, None]]);
        v.split = Split::Valid;
        let corpus = Corpus::new(vec![v]).unwrap();
        assert!(transpose_all(&corpus, &VoiceRanges([None; 4])).is_empty());
    }

    #[test]
    fn major_tonic_becomes_minor() {
        let p = piece(
            "train-000",
            vec![
                [Some(79), Some(72), Some(64), Some(48)],
                [Some(72), Some(67), Some(64), Some(48)],
            ],
        );
        let swapped = mode_swap(&p).unwrap();
        let last = swapped.steps[1];
        assert_eq!(last.voices, [Some(72), Some(67), Some(63), Some(48)]);
        assert_eq!(
            classify_chord(&last),
            Token::chord(Quality::Minor, 0)
        );
    }

    #[test]
    fn minor_raises_third_sixth_seventh() {
        // A minor: tonic 9. C (3), F (8), G (10) are raised; B (2) untouched.
        let p = piece(
            "train-000",
            vec![
                [Some(72), Some(65), Some(67), Some(59)],
                [Some(69), Some(64), Some(60), Some(57)],
            ],
        );
        let swapped = mode_swap(&p).unwrap();
        assert_eq!(swapped.steps[0].voices, [Some(73), Some(66), Some(68), Some(59)]);
        assert_eq!(
            classify_chord(&swapped.steps[1]),
            Token::chord(Quality::Major, 9)
        );
    }

    #[test]
    fn other_final_chord_is_undeterminable() {
        let p = piece("train-000", vec![[Some(65), Some(64), Some(62), Some(60)]]);
        assert_eq!(
            mode_swap(&p),
            Err(AugmentError::UndeterminableMode {
                piece_id: "train-000".into(),
                final_chord: Token::ChordOther
            })
        );
    }

    #[test]
    fn out_of_range_swap_is_reported() {
        let p = piece(
            "train-000",
            vec![
                [Some(81), None, None, None],
                [Some(78), Some(73), Some(69), Some(54)],
            ],
        );
        // F# minor: tonic 6, A (interval 3) at 81 rises to 82.
        assert!(matches!(
            mode_swap(&p),
            Err(AugmentError::OutOfRange { step: 0, pitch: 82, .. })
        ));
    }

    #[test]
    fn mode_strings() {
        assert_eq!("transpose".parse::<AugmentMode>(), Ok(AugmentMode::Transpose));
        assert_eq!(
            AugmentMode::TransposeModeSwap.to_string().parse::<AugmentMode>(),
            Ok(AugmentMode::TransposeModeSwap)
        );
        assert!("bogus".parse::<AugmentMode>().is_err());
    }
}
