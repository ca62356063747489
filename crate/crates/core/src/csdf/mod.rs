//! Conditional signed-distance decoder, multi-view mask encoder and the
//! shape-prior pretraining loops.

pub mod encoder;
pub mod model;
pub mod pretrain;

pub use encoder::{eca_attend, EcaConfig, EcaProjections, EncoderConfig, MaskEncoder};
pub use model::{points_tensor, CsdfConfig, CsdfModel, CsdfVars};
pub use pretrain::{infer_latent, pretrain, sdf_l1, LossTerms, PretrainConfig, Pretrained};
