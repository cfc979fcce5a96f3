//! LoRA and modality-aware LoRA (MoRA) adapter layers.
//!
//! A LoRA adapter augments a frozen weight `W0` with a trainable low-rank
//! product `B . A`. MoRA keeps a single shared down-projection `A` but holds
//! one up-projection per modality; per sample, only the up-projections of
//! the modalities actually present contribute to the adaptation, selected by
//! the sample's [`MissingPattern`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, NamedParam, NodeId, Param, Tensor};

const IMAGE_BIT: u8 = 0b01;
const TEXT_BIT: u8 = 0b10;

/// Per-sample bitmask over the two modalities; a set bit means the modality
/// is present. A pattern with no modality cannot be constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MissingPattern(u8);

impl MissingPattern {
    pub const COMPLETE: MissingPattern = MissingPattern(IMAGE_BIT | TEXT_BIT);
    pub const IMAGE_ONLY: MissingPattern = MissingPattern(IMAGE_BIT);
    pub const TEXT_ONLY: MissingPattern = MissingPattern(TEXT_BIT);

    pub fn new(image: bool, text: bool) -> Result<Self> {
        if !image && !text {
            return Err(Error::Contract(
                "a sample must have at least one modality present".into(),
            ));
        }
        Ok(MissingPattern(
            (image as u8) * IMAGE_BIT | (text as u8) * TEXT_BIT,
        ))
    }

    pub fn has_image(&self) -> bool {
        self.0 & IMAGE_BIT != 0
    }

    pub fn has_text(&self) -> bool {
        self.0 & TEXT_BIT != 0
    }

    pub fn is_complete(&self) -> bool {
        *self == Self::COMPLETE
    }

    pub fn label(&self) -> &'static str {
        match (self.has_image(), self.has_text()) {
            (true, true) => "complete",
            (true, false) => "image-only",
            (false, true) => "text-only",
            (false, false) => unreachable!("empty pattern is unconstructible"),
        }
    }
}

impl std::fmt::Display for MissingPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Which attention projections inside a block carry adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Query,
    Value,
}

impl Projection {
    pub fn as_str(&self) -> &'static str {
        match self {
            Projection::Query => "query",
            Projection::Value => "value",
        }
    }
}

impl std::fmt::Display for Projection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_target_blocks() -> Vec<usize> {
    vec![0]
}

fn default_target_projections() -> Vec<Projection> {
    vec![Projection::Query, Projection::Value]
}

fn default_init_std() -> f64 {
    0.02
}

/// Where adapters are plugged and how they are shaped. `rank = 0` means no
/// adapters at all (classifier-only training).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub rank: usize,
    #[serde(default = "default_target_blocks")]
    pub target_blocks: Vec<usize>,
    #[serde(default = "default_target_projections")]
    pub target_projections: Vec<Projection>,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            rank: 4,
            target_blocks: default_target_blocks(),
            target_projections: default_target_projections(),
            init_std: default_init_std(),
        }
    }
}

/// Plain LoRA: one shared `A: [r, k]` and a single `B: [d, r]`.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub a: Param,
    pub b: Param,
    pub rank: usize,
}

/// Modality-aware LoRA: shared `A: [r, k]`, one up-projection per modality,
/// both `[d, r]`. Immediately after [`init_mora`] the up-projections are
/// exactly zero, so the adaptation starts out inert.
#[derive(Debug, Clone)]
pub struct MoraAdapter {
    pub a: Param,
    pub b_img: Param,
    pub b_txt: Param,
    pub rank: usize,
}

fn validate_rank(k: usize, d: usize, rank: usize) -> Result<()> {
    if rank < 1 {
        return Err(Error::Config(format!("adapter rank must be >= 1, got {rank}")));
    }
    if rank > d.min(k) {
        return Err(Error::Config(format!(
            "adapter rank {rank} exceeds min(d, k) = {}",
            d.min(k)
        )));
    }
    Ok(())
}

/// Gaussian `A`, zero `B`s: the adaptation is zero at the start of training.
pub fn init_mora(k: usize, d: usize, rank: usize, init_std: f64, seed: u64) -> Result<MoraAdapter> {
    validate_rank(k, d, rank)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Tensor::gaussian(vec![rank, k], init_std, &mut rng)?;
    Ok(MoraAdapter {
        a: Param::trainable(a),
        b_img: Param::trainable(Tensor::zeros(vec![d, rank]).with_requires_grad(true)),
        b_txt: Param::trainable(Tensor::zeros(vec![d, rank]).with_requires_grad(true)),
        rank,
    })
}

/// Same initialization scheme as [`init_mora`]; consumes the identical RNG
/// stream for `A`, so a LoRA and a MoRA built from the same seed share `A`.
pub fn init_lora(k: usize, d: usize, rank: usize, init_std: f64, seed: u64) -> Result<LoraAdapter> {
    validate_rank(k, d, rank)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Tensor::gaussian(vec![rank, k], init_std, &mut rng)?;
    Ok(LoraAdapter {
        a: Param::trainable(a),
        b: Param::trainable(Tensor::zeros(vec![d, rank]).with_requires_grad(true)),
        rank,
    })
}

/// Either adapter flavor, as attached to one projection of one block.
#[derive(Debug, Clone)]
pub enum Adapter {
    Mora(MoraAdapter),
    Lora(LoraAdapter),
}

impl Adapter {
    pub fn rank(&self) -> usize {
        match self {
            Adapter::Mora(m) => m.rank,
            Adapter::Lora(l) => l.rank,
        }
    }

    /// Builds the adaptation of `x: [t, k]` on the graph and returns it as a
    /// `[t, d]` node. For MoRA the up-projections of the present modalities
    /// are applied separately and summed image-term-first, so the complete
    /// pattern equals the image-only term plus the text-only term bitwise.
    pub fn adaptation(&self, g: &mut Graph, x: NodeId, pattern: MissingPattern) -> Result<NodeId> {
        match self {
            Adapter::Lora(l) => {
                let a = g.leaf(&l.a)?;
                let at = g.transpose(a)?;
                let low = g.matmul(x, at)?;
                let b = g.leaf(&l.b)?;
                let bt = g.transpose(b)?;
                g.matmul(low, bt)
            }
            Adapter::Mora(m) => {
                let a = g.leaf(&m.a)?;
                let at = g.transpose(a)?;
                let low = g.matmul(x, at)?;
                let img = if pattern.has_image() {
                    let b = g.leaf(&m.b_img)?;
                    let bt = g.transpose(b)?;
                    Some(g.matmul(low, bt)?)
                } else {
                    None
                };
                let txt = if pattern.has_text() {
                    let b = g.leaf(&m.b_txt)?;
                    let bt = g.transpose(b)?;
                    Some(g.matmul(low, bt)?)
                } else {
                    None
                };
                match (img, txt) {
                    (Some(i), Some(t)) => g.add(i, t),
                    (Some(i), None) => Ok(i),
                    (None, Some(t)) => Ok(t),
                    (None, None) => unreachable!("empty pattern is unconstructible"),
                }
            }
        }
    }

    /// Checkpoint entries for this adapter under its canonical keys.
    pub fn named_params(&self, block: usize, proj: Projection) -> Vec<NamedParam> {
        match self {
            Adapter::Mora(m) => vec![
                NamedParam::new(format!("mora.{block}.{proj}.A"), m.a.clone(), true),
                NamedParam::new(format!("mora.{block}.{proj}.B_img"), m.b_img.clone(), true),
                NamedParam::new(format!("mora.{block}.{proj}.B_txt"), m.b_txt.clone(), true),
            ],
            Adapter::Lora(l) => vec![
                NamedParam::new(format!("lora.{block}.{proj}.A"), l.a.clone(), true),
                NamedParam::new(format!("lora.{block}.{proj}.B"), l.b.clone(), true),
            ],
        }
    }
}

/// Modality-aware adaptation of `x: [t, k]` for one sample: the sum of
/// `B_m . A . x` over the present modalities, applied uniformly to all `t`
/// token rows (selection is per sample, not per token).
pub fn mora_adaptation(x: &Tensor, pattern: MissingPattern, adapter: &MoraAdapter) -> Result<Tensor> {
    let mut g = Graph::new();
    let xn = g.constant(x)?;
    let out = Adapter::Mora(adapter.clone()).adaptation(&mut g, xn, pattern)?;
    Ok(g.value(out))
}

/// Adapter-augmented linear layer on the graph:
/// `x . W0^T + bias + adaptation(x)`, with gradients flowing only into the
/// adapter tensors. `W0` must be frozen.
pub fn adapted_linear_nodes(
    g: &mut Graph,
    x: NodeId,
    w0: &Param,
    bias: &Param,
    pattern: MissingPattern,
    adapter: Option<&Adapter>,
) -> Result<NodeId> {
    if w0.borrow().requires_grad() {
        return Err(Error::Contract(
            "adapted linear forward requires a frozen base weight".into(),
        ));
    }
    let w = g.leaf(w0)?;
    let wt = g.transpose(w)?;
    let prod = g.matmul(x, wt)?;
    let b = g.leaf(bias)?;
    let base = g.add_row(prod, b)?;
    match adapter {
        None => Ok(base),
        Some(ad) => {
            let delta = ad.adaptation(g, x, pattern)?;
            g.add(base, delta)
        }
    }
}

/// Tensor-level convenience wrapper over [`adapted_linear_nodes`].
pub fn adapted_linear_forward(
    x: &Tensor,
    w0: &Param,
    bias: &Param,
    pattern: MissingPattern,
    adapter: Option<&Adapter>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let xn = g.constant(x)?;
    let out = adapted_linear_nodes(&mut g, xn, w0, bias, pattern, adapter)?;
    Ok(g.value(out))
}

/// Folds the adaptation for a fixed pattern into a dense weight:
/// `W0 + sum over present modalities of B_m . A`. Inference convenience for
/// deployments where the pattern is known up front.
pub fn merge_for_pattern(
    w0: &Tensor,
    adapter: &MoraAdapter,
    pattern: MissingPattern,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let w = g.constant(w0)?;
    let a = g.constant(&adapter.a.borrow())?;
    let mut merged = w;
    if pattern.has_image() {
        let b = g.constant(&adapter.b_img.borrow())?;
        let ba = g.matmul(b, a)?;
        merged = g.add(merged, ba)?;
    }
    if pattern.has_text() {
        let b = g.constant(&adapter.b_txt.borrow())?;
        let ba = g.matmul(b, a)?;
        merged = g.add(merged, ba)?;
    }
    Ok(g.value(merged))
}
