//! Tri-category relation modeling.
//!
//! Template tokens form one category. Each search token is assigned, per
//! layer, to either the search-only category (attends to search tokens only,
//! invisible to the template) or the cross category (attends to everything,
//! visible to the template). The assignment is predicted by a small MLP,
//! sampled with Gumbel-Softmax, and enforced by a single masked attention call.

mod attention;
mod division;
mod encoder;
mod mask;

use serde::{Deserialize, Serialize};

pub use attention::{attention, masked_mha, separate_mha_oracle, AttentionParams};
pub use division::{
    gumbel_divide, one_hot, predict_division, Division, DivisionRecord, DivisionSampler,
    FrozenDivision, GumbelConfig, GumbelMode, PredictorParams, PI_FLOOR,
};
pub use encoder::{
    encoder_layer, encoder_stack, layer_policies, one_stream_layer, EncoderConfig, LayerParams,
    LayerPolicy, LayerState, RelationMode,
};
pub use mask::{allowed, build_mask, mask_from_categories, mask_node, AttentionMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenCategory {
    Template,
    SearchOnly,
    Cross,
}

impl TokenCategory {
    pub(crate) fn index(self) -> usize {
        match self {
            TokenCategory::Template => 0,
            TokenCategory::SearchOnly => 1,
            TokenCategory::Cross => 2,
        }
    }
}

/// Aggregation of template tokens fed to the division predictor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Max,
    Avg,
}
