use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{AttentionConfig, BranchActivation};
use crate::error::{invalid, Error, Result};

/// Named architecture variants used in ablation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoSkip,
    NoSkipNoBn,
    SigmoidBranch,
    TwoLayers,
    OneLayer,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoSkip,
        Variant::NoSkipNoBn,
        Variant::SigmoidBranch,
        Variant::TwoLayers,
        Variant::OneLayer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSkip => "no-skip",
            Variant::NoSkipNoBn => "no-skip-no-bn",
            Variant::SigmoidBranch => "sigmoid-branch",
            Variant::TwoLayers => "two-layers",
            Variant::OneLayer => "one-layer",
        }
    }

    pub fn config(self) -> AttentionConfig {
        let base = AttentionConfig::default();
        match self {
            Variant::Full => base,
            Variant::NoSkip => AttentionConfig { skip: false, ..base },
            Variant::NoSkipNoBn => AttentionConfig { skip: false, batch_norm: false, ..base },
            Variant::SigmoidBranch => AttentionConfig { activation: BranchActivation::Sigmoid, ..base },
            Variant::TwoLayers => AttentionConfig { layers: 2, ..base },
            Variant::OneLayer => AttentionConfig { layers: 1, ..base },
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| invalid(format!("unknown variant {s:?}")))
    }
}
