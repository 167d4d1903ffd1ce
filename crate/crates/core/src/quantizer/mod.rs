//! Codebooks, multi-scale residual quantization and the hierarchical
//! tokenization that makes every target scale decodable from a prefix of
//! the token sequence.

mod codebook;
mod encoder;
mod phi;
mod rq;
mod schedule;
mod tokens;

pub use codebook::Codebook;
pub use encoder::{FeatureEncoder, ProjectionEncoder};
pub use phi::{identity_kernel, PhiFilter};
pub use rq::{
    assemble_latent, hierarchical_tokenize, hierarchical_tokenize_features, hierarchical_tokenize_with, rq_levels, scale_images, var_rq_tokenize,
    vq_quantize, RqOutput,
};
pub use schedule::ScaleSchedule;
pub use tokens::TokenSequence;
