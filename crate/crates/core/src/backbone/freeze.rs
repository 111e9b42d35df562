use std::str::FromStr;

use super::BACKBONE_PREFIX;
use crate::error::{Error, Result};
use crate::tensor::{Element, ParamStore};

/// Name prefixes of the pretrained (image-side) parameters.
pub const PRETRAINED_PREFIXES: [&str; 2] = [BACKBONE_PREFIX, "image_tokenizer."];

/// Which parameters the optimizer may touch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FreezePolicy {
    /// Pretrained tensors frozen; tokenizer, task tokens and heads train.
    #[default]
    FrozenBackbone,
    /// Everything trains.
    FullFinetune,
    /// Nothing trains.
    AllFrozen,
}

impl FreezePolicy {
    pub fn is_pretrained(name: &str) -> bool {
        PRETRAINED_PREFIXES.iter().any(|p| name.starts_with(p))
    }

    pub fn apply<T: Element>(self, store: &mut ParamStore<T>) {
        for (name, t) in store.iter_mut() {
            let frozen = match self {
                Self::FrozenBackbone => Self::is_pretrained(name),
                Self::FullFinetune => false,
                Self::AllFrozen => true,
            };
            t.set_requires_grad(!frozen);
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::FrozenBackbone => "frozen-backbone",
            Self::FullFinetune => "full-finetune",
            Self::AllFrozen => "all-frozen",
        }
    }
}

impl FromStr for FreezePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen-backbone" => Ok(Self::FrozenBackbone),
            "full-finetune" => Ok(Self::FullFinetune),
            "all-frozen" => Ok(Self::AllFrozen),
            other => Err(Error::Argument(format!(
                "unknown freeze policy `{other}` (expected frozen-backbone, full-finetune or all-frozen)"
            ))),
        }
    }
}

impl std::fmt::Display for FreezePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}
