use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::DilError;
use crate::nn::Mode;

/// How the model adapts at each incremental step after the base domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Frozen trunk; only the shared classifier is retrained.
    Fe,
    /// Full fine-tuning of one shared model.
    Ft,
    /// A fresh model trained from scratch on each domain.
    Single,
    /// Joint retraining from the base model on all data seen so far; banks
    /// keep only per-domain statistics.
    Multi,
    /// Per-domain running statistics only; no gradient steps.
    BnStats,
    /// Per-domain classifier, everything else frozen.
    Clf,
    /// Per-domain batch-norm affine and statistics with the base classifier.
    Bn,
    /// Per-domain batch norm plus a per-domain classifier.
    BnClf,
    /// Per-domain batch norm plus a residual head added to the base classifier.
    Adil,
}

/// Which classifier produces a non-base bank's logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Bank head plus the base classifier's outputs on mapped classes.
    Residual,
    /// Bank head alone.
    Own,
    /// Base classifier restricted to the bank's classes.
    Base,
}

/// Routing of forward passes through the banks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub head: HeadMode,
    /// Every bank normalizes with bank 0's batch-norm layers.
    pub shared_bn: bool,
}

impl Default for Layout {
    fn default() -> Self {
        Layout {
            head: HeadMode::Residual,
            shared_bn: false,
        }
    }
}

impl Strategy {
    pub const ALL: [Strategy; 9] = [
        Strategy::Fe,
        Strategy::Ft,
        Strategy::Single,
        Strategy::Multi,
        Strategy::BnStats,
        Strategy::Clf,
        Strategy::Bn,
        Strategy::BnClf,
        Strategy::Adil,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Fe => "fe",
            Strategy::Ft => "ft",
            Strategy::Single => "single",
            Strategy::Multi => "multi",
            Strategy::BnStats => "bn_stats",
            Strategy::Clf => "clf",
            Strategy::Bn => "bn",
            Strategy::BnClf => "bn_clf",
            Strategy::Adil => "adil",
        }
    }

    pub fn layout(self) -> Layout {
        let (head, shared_bn) = match self {
            Strategy::Adil => (HeadMode::Residual, false),
            Strategy::BnClf | Strategy::Clf => (HeadMode::Own, false),
            Strategy::Bn | Strategy::BnStats | Strategy::Multi => (HeadMode::Base, false),
            Strategy::Fe | Strategy::Ft | Strategy::Single => (HeadMode::Base, true),
        };
        Layout { head, shared_bn }
    }

    /// Strategies that leave the shared trunk, the base classifier and all
    /// earlier banks untouched.
    pub fn is_frozen_family(self) -> bool {
        matches!(
            self,
            Strategy::Adil | Strategy::Bn | Strategy::BnClf | Strategy::Clf | Strategy::BnStats
        )
    }

    /// Batch-norm mode while training an incremental step. Frozen-feature
    /// strategies keep the stored statistics.
    pub fn incremental_bn_mode(self) -> Mode {
        match self {
            Strategy::Clf | Strategy::Fe => Mode::Eval,
            _ => Mode::Train,
        }
    }

    pub fn takes_gradient_steps(self) -> bool {
        self != Strategy::BnStats
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = DilError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == key)
            .ok_or_else(|| {
                let names: Vec<&str> = Strategy::ALL.iter().map(|s| s.name()).collect();
                DilError::Config(format!(
                    "unknown strategy '{s}'; valid strategies: {}",
                    names.join(", ")
                ))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_name() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert_eq!("BN-CLF".parse::<Strategy>().unwrap(), Strategy::BnClf);
    }

    #[test]
    fn unknown_strategy_lists_valid_names() {
        let err = "bogus".parse::<Strategy>().unwrap_err().to_string();
        for name in [
            "fe", "ft", "single", "multi", "bn_stats", "clf", "bn", "bn_clf", "adil",
        ] {
            assert!(err.contains(name), "{err}");
        }
    }
}
