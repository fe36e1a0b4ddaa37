use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::tokenizer::{Encoded, Specials};

/// How the task-prefix position is treated by MLM masking.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrefixPolicy {
    /// The prefix is masked like any other token.
    #[default]
    Default,
    /// The prefix is always selected; other tokens at the mask ratio.
    Must,
    /// The prefix is never selected; other tokens at the mask ratio.
    No,
    /// Only the prefix is selected, always; other tokens are left alone.
    Only,
}

impl PrefixPolicy {
    /// Selection probabilities for (prefix position, other maskable positions).
    pub fn probabilities(self, mask_ratio: f64) -> (f64, f64) {
        match self {
            PrefixPolicy::Default => (mask_ratio, mask_ratio),
            PrefixPolicy::Must => (1.0, mask_ratio),
            PrefixPolicy::No => (0.0, mask_ratio),
            PrefixPolicy::Only => (1.0, 0.0),
        }
    }
}

impl FromStr for PrefixPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "default" => Ok(Self::Default),
            "must" => Ok(Self::Must),
            "no" => Ok(Self::No),
            "only" => Ok(Self::Only),
            other => Err(Error::Config(format!("unknown prefix policy {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Replacement {
    MaskToken,
    Random,
    Unchanged,
}

/// One sequence prepared for the MLM objective.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedSequence {
    pub original: Encoded,
    pub masked: Encoded,
    /// Selected positions, ascending.
    pub positions: Vec<usize>,
    /// Action taken at each selected position.
    pub replacements: Vec<Replacement>,
}

impl MaskedSequence {
    pub fn targets(&self) -> impl Iterator<Item = usize> + '_ {
        self.positions.iter().map(|&p| self.original.ids[p])
    }
}

/// Selects positions to mask and applies the 80/10/10 replacement rule.
///
/// `[CLS]`, `[SEP]` and padding are never selected. `prefix_position` is the
/// index of the task prefix, if the sequence carries one. Random replacements
/// are drawn uniformly from `random_ids`.
pub fn apply_masking<R: Rng + ?Sized>(
    seq: &Encoded,
    prefix_position: Option<usize>,
    policy: PrefixPolicy,
    mask_ratio: f64,
    specials: Specials,
    random_ids: Range<usize>,
    rng: &mut R,
) -> MaskedSequence {
    let (p_prefix, p_other) = policy.probabilities(mask_ratio);
    let mut masked = seq.clone();
    let mut positions = Vec::new();
    let mut replacements = Vec::new();
    for (i, &id) in seq.ids.iter().enumerate() {
        if seq.attention_mask[i] == 0 || id == specials.cls || id == specials.sep || id == specials.pad {
            continue;
        }
        let p = if Some(i) == prefix_position { p_prefix } else { p_other };
        // always draw, so the stream does not depend on which branch ran
        let u: f64 = rng.gen();
        if u >= p {
            continue;
        }
        let r: f64 = rng.gen();
        let action = if r < 0.8 {
            masked.ids[i] = specials.mask;
            Replacement::MaskToken
        } else if r < 0.9 {
            masked.ids[i] = rng.gen_range(random_ids.clone());
            Replacement::Random
        } else {
            Replacement::Unchanged
        };
        positions.push(i);
        replacements.push(action);
    }
    MaskedSequence {
        original: seq.clone(),
        masked,
        positions,
        replacements,
    }
}
