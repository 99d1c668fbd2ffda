//! Controllable face generation and editing at desk scale.
//!
//! The pipeline runs in two stages. Text first becomes a conditioning
//! modality — a semantic segmentation map or a facial landmark set — via a
//! masked transformer over discrete image tokens ([`masked`] on top of
//! [`vq`]). A conditional diffusion model with a zero-initialized control
//! branch then renders the face ([`diffusion`]). Editing inpaints the
//! condition's token grid under an edit region and applies a single-pass
//! text edit: optimize the prompt embedding, fine-tune selected denoiser
//! blocks, sample once ([`editor`]).
//!
//! Module map:
//!
//! * [`condition`] — segmentation palettes, landmark sets, rendering,
//!   flips and training-time jitter.
//! * [`vq`] — the image tokenizer: encoder/decoder plus codebook.
//! * [`text`] — task prompts and the text-encoder backend interface.
//! * [`masked`] — masked-token training, iterative parallel decoding and
//!   constrained inpainting over token grids.
//! * [`diffusion`] — noise schedules, the UNet backbone, the control
//!   branch, training with gradient accumulation, DDPM/DDIM sampling.
//! * [`editor`] — embedding optimization, selective fine-tuning and the
//!   final edit pass.
//! * [`dataset`] — corpus construction: alignment, upscaling, captioning,
//!   translation, filtering, manifests.
//! * [`metrics`] — Fréchet distance, CLIP-style scores, consistency
//!   metrics, rater tallies and report emitters.
//! * [`pipeline`] — run configuration and the commands the CLI wraps.
//!
//! Everything is seeded, sequential f64: identical configs and seeds give
//! identical outputs.

pub mod condition;
pub mod dataset;
pub mod diffusion;
pub mod editor;
pub mod masked;
pub mod metrics;
pub mod pipeline;
pub mod pixels;
pub mod text;
pub mod vq;
