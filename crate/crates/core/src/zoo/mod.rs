//! Frozen backbone, LoRA adapters and checkpoint zoos.

pub mod backbone;
pub mod lora;
pub mod manifest;
pub mod train;

pub use backbone::{BackboneConfig, BackboneWeights};
pub use lora::{adapter_schema, merge, LayerSchema, LoraCheckpoint, LoraLayer};
pub use manifest::{MANIFEST_FILE, average_adapters, load_backbone, save_backbone, ZooEntry, ZooManifest};
pub use train::{
    collect_checkpoints, evaluate, evaluate_weights, pretrain_backbone, train_lora, LoraTrainer, Phase,
    PretrainConfig, ZooRecipe,
};
