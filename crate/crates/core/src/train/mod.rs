//! Global training, instance finetuning and the ablation drivers.

mod ablate;
mod adam;
mod eval;
mod finetune;
mod global;
mod loss;
mod select;

pub use ablate::{ablate, case_row, default_frame_grid, equispaced, temporal_ablation, AblationRow, Case, TemporalRow};
pub use adam::Adam;
pub use eval::{decode_frame, evaluate, evaluate_latents, instance_pixels, pad_frame, psnr, reconstruction_evaluation, Evaluation};
pub use finetune::{finetune, EvalRecord, FinetuneConfig, FinetuneResult, Regime, StepRecord};
pub use global::{clip_grad_norm, train_global, GlobalConfig, GlobalStep};
pub use loss::{check_delta, flatten, latent_rd_graph, rd_graph, rd_loss, rdm_loss, zero_delta, RdVars, RdTerms, RdmGrads, RdmOptions, RdmTerms};
pub use select::{select_representative_instances, InstanceLosses, Selection};
