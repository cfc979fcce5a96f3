//! Modality-aware low-rank adaptation (MoRA) for a frozen two-modality
//! transformer, trained and evaluated under missing-modality conditions.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: dense f64 tensors, a tape-based reverse-mode autodiff
//!   graph, and a finite-difference gradient oracle.
//! - [`adapters`]: LoRA and modality-aware LoRA layers with per-sample
//!   missing-pattern selection, initialization, and weight merging.
//! - [`model`]: a small ViLT-style two-modality encoder with a frozen
//!   backbone, adapter plug points, and a trainable two-layer classifier.
//! - [`data`]: synthetic two-modality multi-label datasets, missing-pattern
//!   simulation, and JSONL ingestion.
//! - [`training`]: the fine-tuning protocol (per-label BCE, AdamW with
//!   warmup + linear decay, early stopping, F1-macro evaluation).
//! - [`checkpoint`]: the flat key -> array parameter snapshot format shared
//!   by adapters, model, and training.

pub mod adapters;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};

/// Stable seed derivation for sub-components: one base seed fans out into
/// independent streams for the backbone, adapters, data, shuffling, and so
/// on, keyed by a tag string.
pub mod seed {
    pub fn derive(base: u64, tag: &str) -> u64 {
        // FNV-1a over the tag, mixed with the base via splitmix64.
        let mut h: u64 = 0xcbf29ce484222325;
        for b in tag.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        let mut z = base ^ h;
        z = z.wrapping_add(0x9e3779b97f4a7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

}
