//! Attentive prototype embedding, intermediate-domain mixing, step
//! scheduling, and the training loop.

pub mod ape;
pub mod checkpoint;
pub mod inference;
pub mod mixing;
pub mod model;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use ape::{final_embedding, Ape};
pub use checkpoint::{load_model, read_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, RngState};
pub use inference::{embed_modality, embed_subset, evaluate_embeddings, evaluate_model, mask_values, modality_gap, ModalityEmbeddings};
pub use mixing::{mix_prototypes, mix_with_uniforms, select_rows, swap_pattern, whole_mixup};
pub use model::{dataset_images, Encoded, Model, StepDraws};
pub use optim::Adam;
pub use schedule::{LrSchedule, StepSchedule};
pub use trainer::{resume, train, TrainOutcome, Trainer, METRICS_HEADER};
