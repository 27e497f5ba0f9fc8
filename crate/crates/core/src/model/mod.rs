//! The hierarchical matcher and its encoders.

mod config;
mod field;
mod layers;
mod matcher;
mod scale;
mod token;

pub use config::{Ablation, ModelConfig, Variant};
pub use field::{FieldEncoder, FieldOutput};
pub use layers::{glorot, normal, LayerNorm, Linear, TransformerLayer};
pub use matcher::{joint_loss, MatchScores, Matcher, PairInputs, ScoreNodes};
pub use scale::{NumericField, ScaleEncoder, ScaleInput, ScaleStats, LEAKY_SLOPE};
pub use token::{TokenEncoder, TokenEncoding};
