use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which decoder layers merge the cross-attention memory.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeRule {
    /// Merge before every decoder layer whose 1-based index is not a multiple of `g`.
    #[default]
    #[serde(rename = "alg2")]
    SkipMultiplesOfG,
    /// Merge only before layers whose 1-based index is a multiple of `g`.
    EveryG,
}

impl std::str::FromStr for MergeRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alg2" => Ok(MergeRule::SkipMultiplesOfG),
            "every-g" => Ok(MergeRule::EveryG),
            other => Err(Error::invalid(format!(
                "unknown merge rule {other:?} (expected alg2 or every-g)"
            ))),
        }
    }
}

/// Compression ratios and where runtime merging happens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeSchedule {
    /// Offline ratio for non-stopword tokens.
    pub r_o: f64,
    /// Runtime ratio for the upper encoder and the decoder memory.
    pub r_p: f64,
    /// Decoder merge period.
    pub g: usize,
    pub rule: MergeRule,
    /// Keep query tokens out of the proposer set during intra-passage merging.
    pub protect_query: bool,
}

impl Default for MergeSchedule {
    fn default() -> Self {
        Self {
            r_o: 0.2,
            r_p: 0.2,
            g: 3,
            rule: MergeRule::SkipMultiplesOfG,
            protect_query: false,
        }
    }
}

impl MergeSchedule {
    /// No runtime merging at all.
    pub fn none() -> Self {
        Self {
            r_p: 0.0,
            ..Self::default()
        }
    }

    pub fn with_runtime_ratio(r_p: f64) -> Self {
        Self {
            r_p,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("r_o", self.r_o), ("r_p", self.r_p)] {
            if !(0.0..=0.5).contains(&r) {
                return Err(Error::invalid(format!("{name}={r} outside [0, 0.5]")));
            }
        }
        if self.g == 0 {
            return Err(Error::invalid("g must be >= 1"));
        }
        Ok(())
    }

    /// Whether the memory is merged right before decoder layer `layer` (1-based).
    pub fn merges_before_decoder_layer(&self, layer: usize) -> bool {
        if self.r_p == 0.0 {
            return false;
        }
        match self.rule {
            MergeRule::SkipMultiplesOfG => layer % self.g != 0,
            MergeRule::EveryG => layer % self.g == 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decoder_rules() {
        let skip = MergeSchedule::default();
        let merged: Vec<usize> = (1..=6).filter(|&l| skip.merges_before_decoder_layer(l)).collect();
        assert_eq!(merged, vec![1, 2, 4, 5]);
        let every = MergeSchedule { rule: MergeRule::EveryG, ..Default::default() };
        let merged: Vec<usize> = (1..=6).filter(|&l| every.merges_before_decoder_layer(l)).collect();
        assert_eq!(merged, vec![3, 6]);
        assert!(!MergeSchedule::none().merges_before_decoder_layer(1));
        assert_eq!("alg2".parse::<MergeRule>().unwrap(), MergeRule::SkipMultiplesOfG);
        assert_eq!("every-g".parse::<MergeRule>().unwrap(), MergeRule::EveryG);
        assert!("x".parse::<MergeRule>().is_err());
    }
}
