//! Chord classification of a single time-step.
//!
//! Classification is an exact match of the sounding pitch-class set against
//! the four triad templates. Dyads, unisons and anything with extra pitch
//! classes fall through to `ChordOther`. An augmented triad is symmetric, so
//! its root is taken as the smallest pitch class present.

use crate::corpus::TimeStep;
use crate::vocab::{Quality, Token};

/// Bit set of pitch classes (bit `pc` set when pitch class `pc` sounds).
pub type PitchClassSet = u16;

pub fn pitch_class_set(step: &TimeStep) -> PitchClassSet {
    step.sounding().fold(0, |set, p| set | 1 << (p % 12))
}

pub fn classify_chord(step: &TimeStep) -> Token {
    if step.is_all_rest() {
        return Token::ChordRest;
    }
    classify_pitch_classes(pitch_class_set(step))
}

/// Classifies a non-empty pitch-class set. The empty set has no sounding
/// voice and is reported as `ChordOther`; all-rest steps are handled by
/// [`classify_chord`].
pub fn classify_pitch_classes(set: PitchClassSet) -> Token {
    let set = set & 0x0fff;
    if set.count_ones() != 3 {
        return Token::ChordOther;
    }
    for root in 0..12u8 {
        if set & (1 << root) == 0 {
            continue;
        }
        for quality in Quality::ALL {
            if template(quality, root) == set {
                return Token::chord(quality, root);
            }
        }
    }
    Token::ChordOther
}

pub fn template(quality: Quality, root: u8) -> PitchClassSet {
    quality
        .intervals()
        .iter()
        .fold(0, |set, i| set | 1 << ((root + i) % 12))
}

/// Rotates a pitch-class set up by `k` semitones.
pub fn transpose_set(set: PitchClassSet, k: i32) -> PitchClassSet {
    let k = k.rem_euclid(12) as u32;
    let set = set as u32 & 0x0fff;
    (((set << k) | (set >> (12 - k))) & 0x0fff) as PitchClassSet
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(v: [Option<u8>; 4]) -> TimeStep {
        TimeStep::new(v)
    }

    #[test]
    fn examples() {
        assert_eq!(
            classify_chord(&step([Some(72), Some(67), Some(64), Some(60)])),
            Token::chord(Quality::Major, 0)
        );
        assert_eq!(classify_chord(&TimeStep::rest()), Token::ChordRest);
        assert_eq!(
            classify_chord(&step([Some(65), Some(64), Some(62), Some(60)])),
            Token::ChordOther
        );
        assert_eq!(
            classify_chord(&step([Some(72), Some(68), Some(64), Some(60)])),
            Token::chord(Quality::Augmented, 0)
        );
    }

    #[test]
    fn augmented_root_is_smallest_pitch_class() {
        // E aug = {4, 8, 0}; smallest pitch class is 0.
        assert_eq!(
            classify_chord(&step([Some(76), Some(68), Some(64), Some(48)])),
            Token::chord(Quality::Augmented, 0)
        );
        assert_eq!(
            classify_pitch_classes(template(Quality::Augmented, 7)),
            Token::chord(Quality::Augmented, 3)
        );
    }

    #[test]
    fn partial_rests_use_sounding_voices() {
        // A single sounding voice is never a triad.
        assert_eq!(classify_chord(&step([Some(60), None, None, None])), Token::ChordOther);
        assert_eq!(
            classify_chord(&step([Some(67), None, Some(64), Some(48)])),
            Token::chord(Quality::Major, 0)
        );
    }

    #[test]
    fn doubled_dyad_is_other() {
        assert_eq!(
            classify_chord(&step([Some(72), Some(67), Some(60), Some(48)])),
            Token::ChordOther
        );
    }

    #[test]
    fn transpose_set_rotates() {
        assert_eq!(transpose_set(0b1, 1), 0b10);
        assert_eq!(transpose_set(1 << 11, 1), 1);
        assert_eq!(transpose_set(1, -1), 1 << 11);
        assert_eq!(transpose_set(0b1011, 12), 0b1011);
    }
}
