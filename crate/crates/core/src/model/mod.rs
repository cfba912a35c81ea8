//! Mixture-of-experts saliency network, its losses and checkpoint format.

pub mod checkpoint;
pub mod config;
pub mod loss;
pub mod network;


pub use config::{Census, CensusRow, ExpertHead, GatingConv, GatingLayers, LayerKind, LayerPlan, ModelConfig, PoolSpec, Section, TrunkStage};
pub use loss::{class_loss, one_hot, saliency_loss, total_loss, LossNodes, LossValues, LossWeights, PROB_FLOOR};
pub use network::{ForwardOptions, ModelOutput, ParamGroup, Prediction, SaliencyModel};
