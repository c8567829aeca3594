//! Ablation variants and their toggles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::Stage3Config;
use crate::minilm::Slots;
use crate::params::{ParamGroup, TrainMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Rec,
    Wo,
    Proj,
    Warm,
    Ui,
    WUi,
    UiW,
}

/// Order of the stage-3 sub-trainings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainOrder {
    Joint,
    /// Warm-token groups first, then the user/item groups.
    WarmThenUi,
    UiThenWarm,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub name: String,
    /// Stage 2 trains with the contrastive term.
    pub alignment: bool,
    /// Stage 3 starts from the stage-2 projection instead of a random one.
    pub warm_start: bool,
    pub warm_token: bool,
    pub ui_tokens: bool,
    pub order: TrainOrder,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Rec,
        Variant::Wo,
        Variant::Proj,
        Variant::Warm,
        Variant::Ui,
        Variant::WUi,
        Variant::UiW,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Rec => "SeLLa-Rec",
            Variant::Wo => "SeLLa-w/o",
            Variant::Proj => "SeLLa-Proj",
            Variant::Warm => "SeLLa-Warm",
            Variant::Ui => "SeLLa-UI",
            Variant::WUi => "SeLLa-W-UI",
            Variant::UiW => "SeLLa-UI-W",
        }
    }

    /// File-system friendly name.
    pub fn slug(self) -> &'static str {
        match self {
            Variant::Rec => "rec",
            Variant::Wo => "wo",
            Variant::Proj => "proj",
            Variant::Warm => "warm",
            Variant::Ui => "ui",
            Variant::WUi => "w-ui",
            Variant::UiW => "ui-w",
        }
    }

    /// Accepts the display name or the slug, case-insensitively.
    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s) || v.slug().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownVariant {
                name: s.to_string(),
                valid: Self::ALL.map(Variant::name).join(", "),
            })
    }

    pub fn spec(self) -> VariantSpec {
        let mut s = VariantSpec {
            name: self.name().into(),
            alignment: true,
            warm_start: true,
            warm_token: true,
            ui_tokens: true,
            order: TrainOrder::Joint,
        };
        match self {
            Variant::Rec => {}
            Variant::Wo => {
                s.alignment = false;
                s.warm_start = false;
                s.warm_token = false;
            }
            Variant::Proj => s.warm_start = false,
            Variant::Warm => s.warm_token = false,
            Variant::Ui => s.ui_tokens = false,
            Variant::WUi => s.order = TrainOrder::WarmThenUi,
            Variant::UiW => s.order = TrainOrder::UiThenWarm,
        }
        s
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl VariantSpec {
    pub fn slots(&self) -> Slots {
        Slots {
            user: self.ui_tokens,
            item: self.ui_tokens,
            warm: self.warm_token,
        }
    }

    /// Trainable groups of each stage-3 sub-training.
    pub fn phases(&self) -> Vec<TrainMask> {
        let warm = TrainMask::of(&[ParamGroup::ProjWtoL, ParamGroup::ItemSemantic]);
        let ui = TrainMask::of(&[ParamGroup::ProjCtoL, ParamGroup::CollabEmbeddings]);
        match self.order {
            TrainOrder::Joint => vec![Stage3Config::joint_mask()],
            TrainOrder::WarmThenUi => vec![warm, ui],
            TrainOrder::UiThenWarm => vec![ui, warm],
        }
    }
}
