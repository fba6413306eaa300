//! Generated corpora with a planted polarity cue near the aspect.
//!
//! The vocabulary is fixed at 50 words: 12 cue words (four per polarity),
//! 8 aspect words and 30 fillers. Every sentence has one aspect token and one
//! cue word whose polarity is the gold label.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Instance, Polarity, Split, TokenSpan};
use crate::error::Result;
use crate::span::relative_distances;

pub const POSITIVE_CUES: [&str; 4] = ["great", "tasty", "lovely", "superb"];
pub const NEGATIVE_CUES: [&str; 4] = ["awful", "bland", "rude", "dirty"];
pub const NEUTRAL_CUES: [&str; 4] = ["average", "okay", "standard", "usual"];
pub const ASPECTS: [&str; 8] = ["food", "service", "staff", "price", "menu", "wine", "decor", "pasta"];
pub const FILLERS: [&str; 30] = [
    "the", "a", "was", "is", "and", "we", "it", "our", "very", "quite", "place", "table", "night", "time", "they",
    "there", "here", "with", "for", "at", "on", "in", "of", "to", "this", "that", "so", "then", "also", "again",
];

pub fn cues(p: Polarity) -> &'static [&'static str; 4] {
    match p {
        Polarity::Positive => &POSITIVE_CUES,
        Polarity::Negative => &NEGATIVE_CUES,
        Polarity::Neutral => &NEUTRAL_CUES,
    }
}

/// Where the cue may sit, measured with the model's relative distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CuePlacement {
    /// Any non-aspect position with distance at most this.
    Within(usize),
    /// Only positions at exactly this distance.
    Exactly(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub cue: CuePlacement,
    /// When set, every sentence also carries a cue of a different polarity at
    /// distance at least this.
    pub distractor_min_distance: Option<usize>,
}

impl SyntheticSpec {
    /// Cue within distance 2, no distractor.
    pub fn near_cue(count: usize) -> Self {
        SyntheticSpec {
            count,
            min_len: 6,
            max_len: 12,
            cue: CuePlacement::Within(2),
            distractor_min_distance: None,
        }
    }

    /// Cue at distance exactly 5 and a conflicting cue at distance 7 or more.
    pub fn far_cue(count: usize) -> Self {
        SyntheticSpec {
            count,
            min_len: 12,
            max_len: 18,
            cue: CuePlacement::Exactly(5),
            distractor_min_distance: Some(7),
        }
    }
}

pub fn generate(spec: &SyntheticSpec, split: Split, seed: u64) -> Result<Vec<Instance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(spec.count);
    while out.len() < spec.count {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let aspect_pos = rng.gen_range(1..=len);
        let dv = relative_distances(len, aspect_pos, 1)?;
        let allowed = |i: usize| -> bool {
            i != aspect_pos
                && match spec.cue {
                    CuePlacement::Within(k) => dv.d[i] <= k,
                    CuePlacement::Exactly(k) => dv.d[i] == k,
                }
        };
        let cue_slots: Vec<usize> = (1..=len).filter(|&i| allowed(i)).collect();
        let Some(&cue_pos) = cue_slots.choose(&mut rng) else { continue };
        let distractor_pos = match spec.distractor_min_distance {
            Some(min) => {
                let slots: Vec<usize> = (1..=len).filter(|&i| i != aspect_pos && dv.d[i] >= min).collect();
                match slots.choose(&mut rng) {
                    Some(&p) => Some(p),
                    None => continue,
                }
            }
            None => None,
        };
        let polarity = Polarity::ALL[rng.gen_range(0..3)];
        let mut words: Vec<&str> = (0..len).map(|_| *FILLERS.choose(&mut rng).unwrap()).collect();
        words[aspect_pos - 1] = ASPECTS.choose(&mut rng).unwrap();
        words[cue_pos - 1] = cues(polarity).choose(&mut rng).unwrap();
        if let Some(dp) = distractor_pos {
            let others: Vec<Polarity> = Polarity::ALL.into_iter().filter(|&p| p != polarity).collect();
            let other = *others.choose(&mut rng).unwrap();
            words[dp - 1] = cues(other).choose(&mut rng).unwrap();
        }
        let k = out.len();
        out.push(Instance::new(
            format!("syn-{split}-{k}"),
            split,
            words.join(" "),
            words.iter().map(|w| w.to_string()).collect(),
            words[aspect_pos - 1],
            TokenSpan::new(aspect_pos, 1),
            polarity,
        )?);
    }
    Ok(out)
}
