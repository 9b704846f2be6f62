//! Interleaved text + visual-latent reasoning on procedurally generated
//! mazes, built from scratch: tensor numerics with reverse-mode autodiff, a
//! maze corpus generator with an exact rasterizer/parser pair, a toy
//! multimodal transformer, an autoregressive vision head, a sketch decoder
//! for turning latents back into images, and the metric harness that scores
//! it all.

pub mod checkpoint;
pub mod graph;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
