//! Unsupervised anomaly detection by teacher-student feature distillation.
//!
//! A frozen teacher network and a trainable student share a dilated-residual
//! backbone with squeeze-excitation attention. The student is trained on
//! normal images only, aligning its feature pyramid with the teacher's under
//! a cosine loss, optionally sharpened by an adversarial discriminator.
//! At inference, per-layer cosine dissimilarity maps are refined, fused and
//! smoothed into a pixel anomaly heatmap and an image-level score.
//!
//! Everything runs on a self-contained CPU tensor engine with reverse-mode
//! automatic differentiation; no external ML runtime is involved.
//!
//! See the `examples/` directory for runnable walkthroughs of each
//! capability and the `anomaly-distill` binary for the command-line
//! pipeline (`gen-data`, `train`, `eval`, `infer`, `gradcheck`).

pub mod anomaly;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod distill;
pub mod evaluate;
pub mod gradcheck;
pub mod params;
pub mod pnm;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;
