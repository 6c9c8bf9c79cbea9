//! The speaker-embedding network.

pub mod blocks;
mod checkpoint;
mod config;
mod net;
mod params;

pub use blocks::{aca_sub_block, latent_sub_block, mla_aggregate, mla_block, tdnn_block, BlockVars, DropoutCtx, MlaVars, TdnnVars};
pub use checkpoint::{checkpoint_container, from_container, load_checkpoint, save_checkpoint, CHECKPOINT_KIND};
pub use config::{build_ablation, AblationVariant, LatentInitSpec, ModelConfig};
pub use net::{AcaNet, NetVars, PaddedBatch};
pub use params::{count_params, init_latent, param_breakdown, LatentState, ParamStore};
