//! A small ViLT-style two-modality transformer encoder.
//!
//! Frozen backbone: token/patch embeddings, modality-type and positional
//! embeddings, a class token, pre-norm transformer blocks, and a final layer
//! norm. Trainable: the adapters attached to the configured attention
//! projections and a two-linear-layer classifier fed by the class token.
//!
//! Missing modalities arrive as dummy contents (zero patch grid, all-pad
//! tokens), so the token sequence length is the same for every sample; only
//! the adapters see the sample's missing pattern.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{
    adapted_linear_nodes, init_lora, init_mora, Adapter, AdapterConfig, Projection,
};
use crate::checkpoint::Checkpoint;
use crate::data::{DataGeometry, Sample};
use crate::error::{Error, Result};
use crate::numerics::{Graph, NamedParam, NodeId, Param, Tensor};
use crate::seed;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Which adapter flavor a run trains; `None` leaves only the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mora,
    Lora,
    None,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Mora => "mora",
            Method::Lora => "lora",
            Method::None => "none",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mora" => Ok(Method::Mora),
            "lora" => Ok(Method::Lora),
            "none" => Ok(Method::None),
            other => Err(Error::Config(format!(
                "unknown method `{other}` (expected mora, lora, or none)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    /// Patches per image side; the token stream holds `image_grid^2` patches.
    pub image_grid: usize,
    /// Raw feature width of one patch before projection.
    pub patch_dim: usize,
    pub num_labels: usize,
    #[serde(default)]
    pub adapter: AdapterConfig,
}

impl Default for ModelConfig {
    /// Desk-scale configuration: sweeps and overfit runs finish in seconds.
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 32,
            num_blocks: 2,
            num_heads: 4,
            mlp_ratio: 2,
            vocab_size: 64,
            max_text_len: 8,
            image_grid: 4,
            patch_dim: 8,
            num_labels: 4,
            adapter: AdapterConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Smallest config that still exercises every code path; used by
    /// gradient checks and forward oracles.
    pub fn tiny() -> Self {
        ModelConfig {
            hidden_dim: 16,
            num_blocks: 1,
            num_heads: 2,
            mlp_ratio: 2,
            vocab_size: 32,
            max_text_len: 4,
            image_grid: 2,
            patch_dim: 6,
            num_labels: 3,
            adapter: AdapterConfig {
                rank: 2,
                ..AdapterConfig::default()
            },
        }
    }

    /// ViLT-scale configuration used only for parameter accounting.
    pub fn paper_scale() -> Self {
        ModelConfig {
            hidden_dim: 768,
            num_blocks: 12,
            num_heads: 12,
            mlp_ratio: 4,
            vocab_size: 30522,
            max_text_len: 40,
            image_grid: 12,
            patch_dim: 3072,
            num_labels: 20,
            adapter: AdapterConfig {
                rank: 4,
                ..AdapterConfig::default()
            },
        }
    }

    pub fn num_patches(&self) -> usize {
        self.image_grid * self.image_grid
    }

    /// Fixed token sequence length: class token + patches + text slots.
    pub fn seq_len(&self) -> usize {
        1 + self.num_patches() + self.max_text_len
    }

    pub fn geometry(&self) -> DataGeometry {
        DataGeometry {
            patches: self.num_patches(),
            patch_dim: self.patch_dim,
            text_len: self.max_text_len,
            vocab_size: self.vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.num_blocks == 0 {
            return Err(Error::Config("num_blocks must be >= 1".into()));
        }
        if self.max_text_len == 0 {
            return Err(Error::Config("max_text_len must be >= 1".into()));
        }
        if self.image_grid == 0 {
            return Err(Error::Config("image_grid must be >= 1".into()));
        }
        if self.mlp_ratio == 0 || self.patch_dim == 0 || self.vocab_size == 0 || self.num_labels == 0
        {
            return Err(Error::Config(
                "mlp_ratio, patch_dim, vocab_size, and num_labels must be >= 1".into(),
            ));
        }
        if let Some(&bad) = self
            .adapter
            .target_blocks
            .iter()
            .find(|&&b| b >= self.num_blocks)
        {
            return Err(Error::Config(format!(
                "adapter target block {bad} is out of range for {} blocks",
                self.num_blocks
            )));
        }
        if self.adapter.rank > 0 && self.adapter.rank > self.hidden_dim {
            return Err(Error::Config(format!(
                "adapter rank {} exceeds hidden_dim {}",
                self.adapter.rank, self.hidden_dim
            )));
        }
        Ok(())
    }
}

struct TransformerBlock {
    ln1_gain: Param,
    ln1_bias: Param,
    wq: Param,
    bq: Param,
    wk: Param,
    bk: Param,
    wv: Param,
    bv: Param,
    wo: Param,
    bo: Param,
    ln2_gain: Param,
    ln2_bias: Param,
    w_up: Param,
    b_up: Param,
    w_down: Param,
    b_down: Param,
}

struct ClassifierHead {
    w1: Param,
    b1: Param,
    w2: Param,
    b2: Param,
}

/// Parameter counts reported after freezing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub total: usize,
    pub trainable: usize,
    pub ratio: f64,
}

pub struct MultimodalEncoder {
    cfg: ModelConfig,
    token_embedding: Param,
    patch_weight: Param,
    patch_bias: Param,
    type_img: Param,
    type_txt: Param,
    pos_img: Param,
    pos_txt: Param,
    cls_token: Param,
    blocks: Vec<TransformerBlock>,
    final_gain: Param,
    final_bias: Param,
    classifier: ClassifierHead,
    adapters: BTreeMap<(usize, Projection), Adapter>,
}

impl MultimodalEncoder {
    /// Builds a backbone (frozen, Gaussian-initialized as a stand-in for
    /// pretrained weights) plus a trainable classifier. Adapters are
    /// attached separately via [`MultimodalEncoder::attach_adapters`].
    pub fn new(cfg: &ModelConfig, model_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden_dim;
        let hidden = cfg.mlp_ratio * d;

        // Fan-in-scaled Gaussians: the frozen backbone stands in for a
        // pretrained model, so its activations should be O(1) at any width.
        let mut backbone_rng = ChaCha8Rng::seed_from_u64(seed::derive(model_seed, "backbone"));
        let mut gauss = |shape: Vec<usize>, std: f64| -> Result<Param> {
            Ok(Param::frozen(Tensor::gaussian(shape, std, &mut backbone_rng)?))
        };
        let d_std = (d as f64).powf(-0.5);

        let token_embedding = gauss(vec![cfg.vocab_size, d], 1.0)?;
        let patch_weight = gauss(vec![d, cfg.patch_dim], (cfg.patch_dim as f64).powf(-0.5))?;
        let patch_bias = Param::frozen(Tensor::zeros(vec![d]));
        let type_img = gauss(vec![d], 1.0)?;
        let type_txt = gauss(vec![d], 1.0)?;
        let pos_img = gauss(vec![cfg.num_patches(), d], 1.0)?;
        let pos_txt = gauss(vec![cfg.max_text_len, d], 1.0)?;
        let cls_token = gauss(vec![d], 1.0)?;

        let ones = |n: usize| Param::frozen(Tensor::new(vec![1.0; n], vec![n]).expect("finite"));
        let zeros = |n: usize| Param::frozen(Tensor::zeros(vec![n]));

        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for _ in 0..cfg.num_blocks {
            blocks.push(TransformerBlock {
                ln1_gain: ones(d),
                ln1_bias: zeros(d),
                wq: gauss(vec![d, d], d_std)?,
                bq: zeros(d),
                wk: gauss(vec![d, d], d_std)?,
                bk: zeros(d),
                wv: gauss(vec![d, d], d_std)?,
                bv: zeros(d),
                wo: gauss(vec![d, d], d_std)?,
                bo: zeros(d),
                ln2_gain: ones(d),
                ln2_bias: zeros(d),
                w_up: gauss(vec![hidden, d], d_std)?,
                b_up: zeros(hidden),
                w_down: gauss(vec![d, hidden], (hidden as f64).powf(-0.5))?,
                b_down: zeros(d),
            });
        }
        let final_gain = ones(d);
        let final_bias = zeros(d);

        let mut head_rng = ChaCha8Rng::seed_from_u64(seed::derive(model_seed, "classifier"));
        let classifier = ClassifierHead {
            w1: Param::trainable(Tensor::gaussian(vec![2 * d, d], d_std, &mut head_rng)?),
            b1: Param::trainable(Tensor::zeros(vec![2 * d]).with_requires_grad(true)),
            w2: Param::trainable(Tensor::gaussian(
                vec![cfg.num_labels, 2 * d],
                (2.0 * d as f64).powf(-0.5),
                &mut head_rng,
            )?),
            b2: Param::trainable(Tensor::zeros(vec![cfg.num_labels]).with_requires_grad(true)),
        };

        Ok(MultimodalEncoder {
            cfg: cfg.clone(),
            token_embedding,
            patch_weight,
            patch_bias,
            type_img,
            type_txt,
            pos_img,
            pos_txt,
            cls_token,
            blocks,
            final_gain,
            final_bias,
            classifier,
            adapters: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Creates and plugs adapters for every configured (block, projection)
    /// slot. Adapter seeds derive from `(adapter_seed, block, projection)`,
    /// so a MoRA and a LoRA built from the same seed share the same `A`.
    pub fn attach_adapters(&mut self, method: Method, adapter_seed: u64) -> Result<()> {
        self.adapters.clear();
        if method == Method::None || self.cfg.adapter.rank == 0 {
            return Ok(());
        }
        let d = self.cfg.hidden_dim;
        let ad = &self.cfg.adapter;
        for &block in &ad.target_blocks {
            if block >= self.cfg.num_blocks {
                return Err(Error::Config(format!(
                    "adapter target block {block} is out of range for {} blocks",
                    self.cfg.num_blocks
                )));
            }
            for &proj in &ad.target_projections {
                let s = seed::derive(adapter_seed, &format!("adapter.{block}.{proj}"));
                let adapter = match method {
                    Method::Mora => Adapter::Mora(init_mora(d, d, ad.rank, ad.init_std, s)?),
                    Method::Lora => Adapter::Lora(init_lora(d, d, ad.rank, ad.init_std, s)?),
                    Method::None => unreachable!(),
                };
                self.adapters.insert((block, proj), adapter);
            }
        }
        Ok(())
    }

    // ── parameter enumeration ────────────────────────────────────────

    fn backbone_named(&self) -> Vec<NamedParam> {
        let mut out = vec![
            NamedParam::new("backbone.token_embedding", self.token_embedding.clone(), false),
            NamedParam::new("backbone.patch_weight", self.patch_weight.clone(), false),
            NamedParam::new("backbone.patch_bias", self.patch_bias.clone(), false),
            NamedParam::new("backbone.type_img", self.type_img.clone(), false),
            NamedParam::new("backbone.type_txt", self.type_txt.clone(), false),
            NamedParam::new("backbone.pos_img", self.pos_img.clone(), false),
            NamedParam::new("backbone.pos_txt", self.pos_txt.clone(), false),
            NamedParam::new("backbone.cls_token", self.cls_token.clone(), false),
            NamedParam::new("backbone.final_gain", self.final_gain.clone(), false),
            NamedParam::new("backbone.final_bias", self.final_bias.clone(), false),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let mut push = |tag: &str, p: &Param| {
                out.push(NamedParam::new(format!("backbone.block{i}.{tag}"), p.clone(), false))
            };
            push("ln1_gain", &b.ln1_gain);
            push("ln1_bias", &b.ln1_bias);
            push("wq", &b.wq);
            push("bq", &b.bq);
            push("wk", &b.wk);
            push("bk", &b.bk);
            push("wv", &b.wv);
            push("bv", &b.bv);
            push("wo", &b.wo);
            push("bo", &b.bo);
            push("ln2_gain", &b.ln2_gain);
            push("ln2_bias", &b.ln2_bias);
            push("w_up", &b.w_up);
            push("b_up", &b.b_up);
            push("w_down", &b.w_down);
            push("b_down", &b.b_down);
        }
        out
    }

    fn classifier_named(&self) -> Vec<NamedParam> {
        vec![
            NamedParam::new("classifier.w1", self.classifier.w1.clone(), true),
            NamedParam::new("classifier.b1", self.classifier.b1.clone(), false),
            NamedParam::new("classifier.w2", self.classifier.w2.clone(), true),
            NamedParam::new("classifier.b2", self.classifier.b2.clone(), false),
        ]
    }

    fn adapter_named(&self) -> Vec<NamedParam> {
        self.adapters
            .iter()
            .flat_map(|(&(block, proj), adapter)| adapter.named_params(block, proj))
            .collect()
    }

    /// The trainable set: adapters then classifier, in a fixed order that
    /// the optimizer, checkpoints, and reports all share.
    pub fn trainable_params(&self) -> Vec<NamedParam> {
        let mut out = self.adapter_named();
        out.extend(self.classifier_named());
        out
    }

    pub fn all_params(&self) -> Vec<NamedParam> {
        let mut out = self.backbone_named();
        out.extend(self.trainable_params());
        out
    }

    /// Freezes every backbone tensor and marks adapters + classifier
    /// trainable. Idempotent.
    pub fn freeze_backbone(&mut self) {
        for p in self.backbone_named() {
            p.param.borrow_mut().set_requires_grad(false);
        }
        for p in self.trainable_params() {
            p.param.borrow_mut().set_requires_grad(true);
        }
    }

    fn assert_frozen(&self) -> Result<()> {
        if let Some(p) = self
            .backbone_named()
            .iter()
            .find(|p| p.param.borrow().requires_grad())
        {
            return Err(Error::Contract(format!(
                "backbone tensor `{}` is trainable; call freeze_backbone before forward",
                p.name
            )));
        }
        Ok(())
    }

    /// Exact parameter counts and the trainable/total ratio.
    pub fn count_params(&self) -> ParamCounts {
        let total: usize = self.all_params().iter().map(|p| p.param.borrow().numel()).sum();
        let trainable: usize = self
            .all_params()
            .iter()
            .filter(|p| p.param.borrow().requires_grad())
            .map(|p| p.param.borrow().numel())
            .sum();
        ParamCounts {
            total,
            trainable,
            ratio: trainable as f64 / total as f64,
        }
    }

    /// Snapshot of the trainable parameters under their canonical keys.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(&self.trainable_params())
    }

    pub fn restore(&mut self, checkpoint: &Checkpoint) -> Result<()> {
        checkpoint.restore(&self.trainable_params())
    }

    // ── forward path ─────────────────────────────────────────────────

    /// Embeds one sample into the fixed-length token matrix
    /// `[1 + P + T, d]`: class token, patch stream, text stream, each
    /// stream with positional and modality-type embeddings added. Dummy
    /// contents flow through the same frozen pipeline as real ones.
    pub fn embed_sample(&self, sample: &Sample) -> Result<Tensor> {
        let cfg = &self.cfg;
        let d = cfg.hidden_dim;
        let p_count = cfg.num_patches();

        if sample.image.len() != p_count * cfg.patch_dim {
            return Err(Error::Ingestion(format!(
                "sample image has {} values, expected {}",
                sample.image.len(),
                p_count * cfg.patch_dim
            )));
        }
        if sample.text.len() > cfg.max_text_len {
            return Err(Error::Ingestion(format!(
                "sample text has {} tokens, max is {}",
                sample.text.len(),
                cfg.max_text_len
            )));
        }
        if let Some(&bad) = sample.text.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Ingestion(format!(
                "token id {bad} is outside the vocabulary of {}",
                cfg.vocab_size
            )));
        }

        let mut rows = vec![0.0; cfg.seq_len() * d];
        rows[..d].copy_from_slice(self.cls_token.borrow().data());

        let pw = self.patch_weight.borrow();
        let pb = self.patch_bias.borrow();
        let pos_img = self.pos_img.borrow();
        let type_img = self.type_img.borrow();
        for p in 0..p_count {
            let patch = &sample.image[p * cfg.patch_dim..(p + 1) * cfg.patch_dim];
            let row = &mut rows[(1 + p) * d..(2 + p) * d];
            for j in 0..d {
                let mut acc = pb.data()[j];
                let wrow = &pw.data()[j * cfg.patch_dim..(j + 1) * cfg.patch_dim];
                for (w, x) in wrow.iter().zip(patch) {
                    acc += w * x;
                }
                row[j] = acc + pos_img.data()[p * d + j] + type_img.data()[j];
            }
        }

        let emb = self.token_embedding.borrow();
        let pos_txt = self.pos_txt.borrow();
        let type_txt = self.type_txt.borrow();
        for t in 0..cfg.max_text_len {
            // Slots past the actual text hold the pad token id 0.
            let id = sample.text.get(t).copied().unwrap_or(0) as usize;
            let row = &mut rows[(1 + p_count + t) * d..(2 + p_count + t) * d];
            let erow = &emb.data()[id * d..(id + 1) * d];
            for j in 0..d {
                row[j] = erow[j] + pos_txt.data()[t * d + j] + type_txt.data()[j];
            }
        }

        Tensor::new(rows, vec![cfg.seq_len(), d])
    }

    fn attention(
        &self,
        g: &mut Graph,
        x: NodeId,
        block_idx: usize,
        pattern: crate::adapters::MissingPattern,
    ) -> Result<NodeId> {
        let cfg = &self.cfg;
        let block = &self.blocks[block_idx];
        let d = cfg.hidden_dim;
        let head_dim = d / cfg.num_heads;

        let q = adapted_linear_nodes(
            g,
            x,
            &block.wq,
            &block.bq,
            pattern,
            self.adapters.get(&(block_idx, Projection::Query)),
        )?;
        let k = adapted_linear_nodes(g, x, &block.wk, &block.bk, pattern, None)?;
        let v = adapted_linear_nodes(
            g,
            x,
            &block.wv,
            &block.bv,
            pattern,
            self.adapters.get(&(block_idx, Projection::Value)),
        )?;

        let mut heads = Vec::with_capacity(cfg.num_heads);
        for h in 0..cfg.num_heads {
            let qh = g.slice_cols(q, h * head_dim, head_dim)?;
            let kh = g.slice_cols(k, h * head_dim, head_dim)?;
            let vh = g.slice_cols(v, h * head_dim, head_dim)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scaled = g.scale(scores, 1.0 / (head_dim as f64).sqrt())?;
            let attn = g.softmax_rows(scaled)?;
            heads.push(g.matmul(attn, vh)?);
        }
        let joined = g.concat_cols(&heads)?;
        let wo = g.leaf(&block.wo)?;
        let wot = g.transpose(wo)?;
        let projected = g.matmul(joined, wot)?;
        let bo = g.leaf(&block.bo)?;
        g.add_row(projected, bo)
    }

    fn mlp(&self, g: &mut Graph, x: NodeId, block_idx: usize) -> Result<NodeId> {
        let block = &self.blocks[block_idx];
        let w_up = g.leaf(&block.w_up)?;
        let w_up_t = g.transpose(w_up)?;
        let up = g.matmul(x, w_up_t)?;
        let b_up = g.leaf(&block.b_up)?;
        let up = g.add_row(up, b_up)?;
        let act = g.gelu(up)?;
        let w_down = g.leaf(&block.w_down)?;
        let w_down_t = g.transpose(w_down)?;
        let down = g.matmul(act, w_down_t)?;
        let b_down = g.leaf(&block.b_down)?;
        g.add_row(down, b_down)
    }

    /// Builds the forward computation for one sample on an existing graph
    /// and returns the `[1, num_labels]` logits node.
    pub fn forward_nodes(&self, g: &mut Graph, sample: &Sample) -> Result<NodeId> {
        self.assert_frozen()?;
        let embedded = self.embed_sample(sample)?;
        let mut x = g.constant(&embedded)?;

        for (i, block) in self.blocks.iter().enumerate() {
            let g1 = g.leaf(&block.ln1_gain)?;
            let b1 = g.leaf(&block.ln1_bias)?;
            let normed = g.layer_norm(x, g1, b1, LAYER_NORM_EPS)?;
            let attn = self.attention(g, normed, i, sample.pattern)?;
            x = g.add(x, attn)?;

            let g2 = g.leaf(&block.ln2_gain)?;
            let b2 = g.leaf(&block.ln2_bias)?;
            let normed2 = g.layer_norm(x, g2, b2, LAYER_NORM_EPS)?;
            let mlp = self.mlp(g, normed2, i)?;
            x = g.add(x, mlp)?;
        }

        let gain = g.leaf(&self.final_gain)?;
        let bias = g.leaf(&self.final_bias)?;
        let normed = g.layer_norm(x, gain, bias, LAYER_NORM_EPS)?;
        let cls = g.slice_rows(normed, 0, 1)?;

        let w1 = g.leaf(&self.classifier.w1)?;
        let w1t = g.transpose(w1)?;
        let h = g.matmul(cls, w1t)?;
        let b1 = g.leaf(&self.classifier.b1)?;
        let h = g.add_row(h, b1)?;
        let h = g.gelu(h)?;
        let w2 = g.leaf(&self.classifier.w2)?;
        let w2t = g.transpose(w2)?;
        let logits = g.matmul(h, w2t)?;
        let b2 = g.leaf(&self.classifier.b2)?;
        g.add_row(logits, b2)
    }

    /// Runs one sample through a fresh graph and returns the logits as a
    /// `[num_labels]` tensor.
    pub fn forward(&self, sample: &Sample) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward_nodes(&mut g, sample)?;
        Tensor::new(g.data(out).to_vec(), vec![self.cfg.num_labels])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::MissingPattern;
    use crate::data::{generate_synthetic, SyntheticTaskSpec};
    use crate::numerics::finite_diff_params;

    fn toy_task(seed: u64) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            num_labels: 3,
            prevalence: vec![0.5, 0.4, 0.3],
            image_signal: 1.0,
            text_signal: 1.0,
            noise: 1.0,
            vocab_size: 32,
            seed,
        }
    }

    fn sample_with_pattern(cfg: &ModelConfig, pattern: MissingPattern, seed: u64) -> Sample {
        let mut task = toy_task(seed);
        task.num_labels = cfg.num_labels;
        task.prevalence = vec![0.4; cfg.num_labels];
        task.vocab_size = cfg.vocab_size.min(32);
        let geom = cfg.geometry();
        let ds = generate_synthetic(&task, &geom, 1).unwrap();
        let mut s = ds.samples[0].clone();
        s.set_pattern(pattern, &geom);
        s
    }

    #[test]
    fn embedding_is_deterministic_for_dummy_inputs() {
        let cfg = ModelConfig::tiny();
        let enc = MultimodalEncoder::new(&cfg, 7).unwrap();
        let mut a = sample_with_pattern(&cfg, MissingPattern::TEXT_ONLY, 1);
        let mut b = sample_with_pattern(&cfg, MissingPattern::TEXT_ONLY, 2);
        // Same text, both missing the image: identical embeddings.
        b.text = a.text.clone();
        a.labels = b.labels.clone();
        let ea = enc.embed_sample(&a).unwrap();
        let eb = enc.embed_sample(&b).unwrap();
        assert_eq!(ea.data(), eb.data());
    }

    #[test]
    fn embedding_has_fixed_length_for_every_pattern() {
        let cfg = ModelConfig::tiny();
        let enc = MultimodalEncoder::new(&cfg, 7).unwrap();
        for pattern in [
            MissingPattern::COMPLETE,
            MissingPattern::IMAGE_ONLY,
            MissingPattern::TEXT_ONLY,
        ] {
            let s = sample_with_pattern(&cfg, pattern, 3);
            let e = enc.embed_sample(&s).unwrap();
            assert_eq!(e.shape(), &[cfg.seq_len(), cfg.hidden_dim]);
        }
    }

    #[test]
    fn dummy_image_rows_are_position_dependent() {
        let cfg = ModelConfig::tiny();
        let enc = MultimodalEncoder::new(&cfg, 7).unwrap();
        let present = sample_with_pattern(&cfg, MissingPattern::COMPLETE, 4);
        let mut missing = present.clone();
        missing.set_pattern(MissingPattern::TEXT_ONLY, &cfg.geometry());

        let ep = enc.embed_sample(&present).unwrap();
        let em = enc.embed_sample(&missing).unwrap();
        let d = cfg.hidden_dim;
        // Patch rows differ from the present-image embedding...
        let differs = (1..=cfg.num_patches())
            .any(|r| ep.data()[r * d..(r + 1) * d] != em.data()[r * d..(r + 1) * d]);
        assert!(differs);
        // ...and zero patches still earn distinct position embeddings.
        assert_ne!(em.data()[d..2 * d], em.data()[2 * d..3 * d]);
    }

    #[test]
    fn token_out_of_vocabulary_is_an_ingestion_error() {
        let cfg = ModelConfig::tiny();
        let enc = MultimodalEncoder::new(&cfg, 7).unwrap();
        let mut s = sample_with_pattern(&cfg, MissingPattern::COMPLETE, 5);
        s.text[0] = cfg.vocab_size as u32;
        assert!(matches!(enc.embed_sample(&s), Err(Error::Ingestion(_))));
    }

    #[test]
    fn zero_init_adapters_do_not_change_logits() {
        let cfg = ModelConfig::tiny();
        let mut plain = MultimodalEncoder::new(&cfg, 11).unwrap();
        plain.freeze_backbone();
        let mut adapted = MultimodalEncoder::new(&cfg, 11).unwrap();
        adapted.attach_adapters(Method::Mora, 99).unwrap();
        adapted.freeze_backbone();

        for pattern in [
            MissingPattern::COMPLETE,
            MissingPattern::IMAGE_ONLY,
            MissingPattern::TEXT_ONLY,
        ] {
            for s in 0..5 {
                let sample = sample_with_pattern(&cfg, pattern, s);
                let a = plain.forward(&sample).unwrap();
                let b = adapted.forward(&sample).unwrap();
                assert_eq!(a.data(), b.data(), "pattern {pattern}, sample {s}");
            }
        }
    }

    #[test]
    fn permuting_classifier_rows_permutes_logits() {
        let cfg = ModelConfig::tiny();
        let mut enc = MultimodalEncoder::new(&cfg, 13).unwrap();
        enc.freeze_backbone();
        let sample = sample_with_pattern(&cfg, MissingPattern::COMPLETE, 8);
        let before = enc.forward(&sample).unwrap();

        // Rotate the output weight rows and biases by one.
        let l = cfg.num_labels;
        let w2 = enc.classifier.w2.borrow().clone();
        let b2 = enc.classifier.b2.borrow().clone();
        let cols = w2.cols();
        let mut w2_new = vec![0.0; w2.numel()];
        let mut b2_new = vec![0.0; l];
        for i in 0..l {
            let j = (i + 1) % l;
            w2_new[j * cols..(j + 1) * cols].copy_from_slice(&w2.data()[i * cols..(i + 1) * cols]);
            b2_new[j] = b2.data()[i];
        }
        enc.classifier.w2.borrow_mut().set_data(w2_new).unwrap();
        enc.classifier.b2.borrow_mut().set_data(b2_new).unwrap();

        let after = enc.forward(&sample).unwrap();
        for i in 0..l {
            assert_eq!(before.data()[i], after.data()[(i + 1) % l]);
        }
    }

    #[test]
    fn forward_is_pure() {
        let cfg = ModelConfig::tiny();
        let mut enc = MultimodalEncoder::new(&cfg, 17).unwrap();
        enc.attach_adapters(Method::Mora, 3).unwrap();
        enc.freeze_backbone();
        let sample = sample_with_pattern(&cfg, MissingPattern::IMAGE_ONLY, 9);
        let a = enc.forward(&sample).unwrap();
        let b = enc.forward(&sample).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn freeze_backbone_is_idempotent_and_names_the_trainable_set() {
        let cfg = ModelConfig::tiny();
        let mut enc = MultimodalEncoder::new(&cfg, 19).unwrap();
        enc.attach_adapters(Method::Mora, 5).unwrap();
        enc.freeze_backbone();
        let first: Vec<String> = enc
            .all_params()
            .iter()
            .filter(|p| p.param.borrow().requires_grad())
            .map(|p| p.name.clone())
            .collect();
        enc.freeze_backbone();
        let second: Vec<String> = enc
            .all_params()
            .iter()
            .filter(|p| p.param.borrow().requires_grad())
            .map(|p| p.name.clone())
            .collect();
        assert_eq!(first, second);
        assert!(first.iter().all(|n| n.starts_with("mora.") || n.starts_with("classifier.")));
        let expected: Vec<String> =
            enc.trainable_params().iter().map(|p| p.name.clone()).collect();
        assert_eq!(first, expected);
    }

    #[test]
    fn forward_before_freeze_errors_when_backbone_is_trainable() {
        let cfg = ModelConfig::tiny();
        let enc = MultimodalEncoder::new(&cfg, 23).unwrap();
        // Constructor builds frozen; flipping one flag must trip the check.
        enc.token_embedding.borrow_mut().set_requires_grad(true);
        let sample = sample_with_pattern(&cfg, MissingPattern::COMPLETE, 2);
        assert!(matches!(enc.forward(&sample), Err(Error::Contract(_))));
    }

    /// Closed-form parameter count, independent of the encoder's own
    /// bookkeeping.
    fn count_oracle(cfg: &ModelConfig, method: Method) -> (usize, usize) {
        let d = cfg.hidden_dim;
        let h = cfg.mlp_ratio * d;
        let p = cfg.num_patches();
        let embeddings = cfg.vocab_size * d   // token table
            + d * cfg.patch_dim + d           // patch projection + bias
            + 2 * d                           // modality type embeddings
            + p * d + cfg.max_text_len * d    // positional embeddings
            + d;                              // class token
        let per_block = 2 * d + 2 * d         // two layer norms
            + 4 * (d * d + d)                 // q, k, v, o projections
            + (h * d + h)                     // mlp up
            + (d * h + d);                    // mlp down
        let backbone = embeddings + cfg.num_blocks * per_block + 2 * d; // final norm
        let classifier = 2 * d * d + 2 * d + cfg.num_labels * 2 * d + cfg.num_labels;
        let slots = cfg.adapter.target_blocks.len() * cfg.adapter.target_projections.len();
        let per_adapter = match method {
            Method::Mora => cfg.adapter.rank * (d + 2 * d),
            Method::Lora => cfg.adapter.rank * (d + d),
            Method::None => 0,
        };
        let trainable = classifier + slots * per_adapter;
        (backbone + trainable, trainable)
    }

    #[test]
    fn paper_scale_parameter_budget_stays_below_1_6_percent() {
        let cfg = ModelConfig::paper_scale();
        let mut enc = MultimodalEncoder::new(&cfg, 0).unwrap();
        enc.attach_adapters(Method::Mora, 0).unwrap();
        enc.freeze_backbone();
        let counts = enc.count_params();
        let (total, trainable) = count_oracle(&cfg, Method::Mora);
        assert_eq!(counts.total, total);
        assert_eq!(counts.trainable, trainable);
        assert!(counts.ratio < 0.016, "ratio {}", counts.ratio);
    }

    #[test]
    fn rank_zero_leaves_only_the_classifier_trainable() {
        let mut cfg = ModelConfig::tiny();
        cfg.adapter.rank = 0;
        let mut enc = MultimodalEncoder::new(&cfg, 1).unwrap();
        enc.attach_adapters(Method::Mora, 1).unwrap();
        enc.freeze_backbone();
        let counts = enc.count_params();
        let d = cfg.hidden_dim;
        let classifier = 2 * d * d + 2 * d + cfg.num_labels * 2 * d + cfg.num_labels;
        assert_eq!(counts.trainable, classifier);
    }

    #[test]
    fn doubling_rank_adds_r_times_k_plus_2d_per_adapted_matrix() {
        let count_at = |rank: usize| -> usize {
            let mut cfg = ModelConfig::tiny();
            cfg.adapter.rank = rank;
            let mut enc = MultimodalEncoder::new(&cfg, 1).unwrap();
            enc.attach_adapters(Method::Mora, 1).unwrap();
            enc.freeze_backbone();
            enc.count_params().trainable
        };
        let cfg = ModelConfig::tiny();
        let d = cfg.hidden_dim;
        let slots = cfg.adapter.target_blocks.len() * cfg.adapter.target_projections.len();
        let r = 3;
        assert_eq!(count_at(2 * r) - count_at(r), slots * r * (d + 2 * d));
    }

    #[test]
    fn backbone_gets_no_gradient_and_text_projection_none_for_image_only() {
        let cfg = ModelConfig::tiny();
        let mut enc = MultimodalEncoder::new(&cfg, 29).unwrap();
        enc.attach_adapters(Method::Mora, 7).unwrap();
        enc.freeze_backbone();
        let sample = sample_with_pattern(&cfg, MissingPattern::IMAGE_ONLY, 6);

        let targets = Tensor::new(
            sample.labels.iter().map(|&l| l as f64).collect(),
            vec![1, cfg.num_labels],
        )
        .unwrap();
        let mut g = Graph::new();
        let logits = enc.forward_nodes(&mut g, &sample).unwrap();
        let loss = g.bce_with_logits(logits, &targets).unwrap();
        g.backward(loss).unwrap();

        for p in enc.backbone_named() {
            assert!(p.param.borrow().grad().is_none(), "{} has a gradient", p.name);
        }
        for p in enc.classifier_named() {
            let b = p.param.borrow();
            assert!(b.grad().is_some(), "{} lacks a gradient", p.name);
        }
        for p in enc.trainable_params() {
            if p.name.ends_with("B_txt") {
                let b = p.param.borrow();
                let zero = b.grad().map_or(true, |g| g.iter().all(|&v| v == 0.0));
                assert!(zero, "{} should hold a zero gradient", p.name);
            }
        }
    }

    #[test]
    fn full_model_gradients_pass_finite_differences() {
        let cfg = ModelConfig::tiny();
        let mut enc = MultimodalEncoder::new(&cfg, 31).unwrap();
        enc.attach_adapters(Method::Mora, 9).unwrap();
        enc.freeze_backbone();

        // Nudge the up-projections off zero so their interactions with A
        // are exercised too.
        for p in enc.trainable_params() {
            if p.name.contains(".B_") {
                let numel = p.param.borrow().numel();
                let data: Vec<f64> = (0..numel).map(|i| 0.01 * ((i % 7) as f64 - 3.0)).collect();
                p.param.borrow_mut().set_data(data).unwrap();
            }
        }

        let samples: Vec<Sample> = [
            MissingPattern::COMPLETE,
            MissingPattern::IMAGE_ONLY,
            MissingPattern::TEXT_ONLY,
        ]
        .iter()
        .enumerate()
        .map(|(i, &p)| sample_with_pattern(&cfg, p, i as u64))
        .collect();
        let targets = Tensor::new(
            samples.iter().flat_map(|s| s.labels.iter().map(|&l| l as f64)).collect(),
            vec![samples.len(), cfg.num_labels],
        )
        .unwrap();

        let params = enc.trainable_params();
        let report = finite_diff_params(
            &params,
            || {
                let mut g = Graph::new();
                let logits: Vec<NodeId> = samples
                    .iter()
                    .map(|s| enc.forward_nodes(&mut g, s))
                    .collect::<Result<_>>()?;
                let stacked = g.concat_rows(&logits)?;
                let loss = g.bce_with_logits(stacked, &targets)?;
                Ok((g, loss))
            },
            1e-5,
        )
        .unwrap();
        for (name, err) in report {
            assert!(err < 1e-4, "{name} error {err}");
        }
    }

    /// Straight-line forward reimplementation: plain nested loops, no graph,
    /// reading the same parameters. The independent oracle for `forward`.
    fn forward_oracle(enc: &MultimodalEncoder, sample: &Sample) -> Vec<f64> {
        let cfg = &enc.cfg;
        let d = cfg.hidden_dim;
        let s_len = cfg.seq_len();
        let heads = cfg.num_heads;
        let hd = d / heads;

        let get = |p: &Param| -> Vec<f64> { p.borrow().data().to_vec() };
        let layer_norm = |x: &mut Vec<f64>, gain: &[f64], bias: &[f64]| {
            for r in 0..s_len {
                let row = &mut x[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for j in 0..d {
                    row[j] = (row[j] - mean) * inv * gain[j] + bias[j];
                }
            }
        };
        // y[r] = x[r] . W^T + b  for W: [out, in]
        let linear = |x: &[f64], rows: usize, w: &[f64], b: &[f64], din: usize, dout: usize| {
            let mut y = vec![0.0; rows * dout];
            for r in 0..rows {
                for o in 0..dout {
                    let mut acc = b[o];
                    for i in 0..din {
                        acc += x[r * din + i] * w[o * din + i];
                    }
                    y[r * dout + o] = acc;
                }
            }
            y
        };
        let gelu = |x: &mut Vec<f64>| {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            for v in x.iter_mut() {
                *v = 0.5 * *v * (1.0 + (c * (*v + 0.044715 * *v * *v * *v)).tanh());
            }
        };

        // Embedding
        let mut x = vec![0.0; s_len * d];
        x[..d].copy_from_slice(&get(&enc.cls_token));
        let pw = get(&enc.patch_weight);
        let pb = get(&enc.patch_bias);
        let pi = get(&enc.pos_img);
        let ti = get(&enc.type_img);
        for p in 0..cfg.num_patches() {
            for j in 0..d {
                let mut acc = pb[j];
                for i in 0..cfg.patch_dim {
                    acc += pw[j * cfg.patch_dim + i] * sample.image[p * cfg.patch_dim + i];
                }
                x[(1 + p) * d + j] = acc + pi[p * d + j] + ti[j];
            }
        }
        let emb = get(&enc.token_embedding);
        let pt = get(&enc.pos_txt);
        let tt = get(&enc.type_txt);
        for t in 0..cfg.max_text_len {
            let id = sample.text.get(t).copied().unwrap_or(0) as usize;
            for j in 0..d {
                x[(1 + cfg.num_patches() + t) * d + j] = emb[id * d + j] + pt[t * d + j] + tt[j];
            }
        }

        for (bi, block) in enc.blocks.iter().enumerate() {
            let mut normed = x.clone();
            layer_norm(&mut normed, &get(&block.ln1_gain), &get(&block.ln1_bias));

            let mut q = linear(&normed, s_len, &get(&block.wq), &get(&block.bq), d, d);
            let k = linear(&normed, s_len, &get(&block.wk), &get(&block.bk), d, d);
            let mut v = linear(&normed, s_len, &get(&block.wv), &get(&block.bv), d, d);

            // Adapter contributions on q and v.
            let apply_adapter = |proj: Projection, target: &mut Vec<f64>| {
                if let Some(Adapter::Mora(m)) = enc.adapters.get(&(bi, proj)) {
                    let a = get(&m.a);
                    let r = m.rank;
                    let low = {
                        let mut low = vec![0.0; s_len * r];
                        for t in 0..s_len {
                            for ri in 0..r {
                                let mut acc = 0.0;
                                for j in 0..d {
                                    acc += normed[t * d + j] * a[ri * d + j];
                                }
                                low[t * r + ri] = acc;
                            }
                        }
                        low
                    };
                    let mut add_b = |b: &[f64]| {
                        for t in 0..s_len {
                            for o in 0..d {
                                let mut acc = 0.0;
                                for ri in 0..r {
                                    acc += low[t * r + ri] * b[o * r + ri];
                                }
                                target[t * d + o] += acc;
                            }
                        }
                    };
                    if sample.pattern.has_image() {
                        add_b(&get(&m.b_img));
                    }
                    if sample.pattern.has_text() {
                        add_b(&get(&m.b_txt));
                    }
                }
            };
            apply_adapter(Projection::Query, &mut q);
            apply_adapter(Projection::Value, &mut v);

            let mut attn_out = vec![0.0; s_len * d];
            for h in 0..heads {
                for r in 0..s_len {
                    let mut scores = vec![0.0; s_len];
                    for c in 0..s_len {
                        let mut acc = 0.0;
                        for j in 0..hd {
                            acc += q[r * d + h * hd + j] * k[c * d + h * hd + j];
                        }
                        scores[c] = acc / (hd as f64).sqrt();
                    }
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut exp_sum = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        exp_sum += *s;
                    }
                    for c in 0..s_len {
                        let w = scores[c] / exp_sum;
                        for j in 0..hd {
                            attn_out[r * d + h * hd + j] += w * v[c * d + h * hd + j];
                        }
                    }
                }
            }
            let projected = linear(&attn_out, s_len, &get(&block.wo), &get(&block.bo), d, d);
            for (xv, pv) in x.iter_mut().zip(&projected) {
                *xv += pv;
            }

            let mut normed2 = x.clone();
            layer_norm(&mut normed2, &get(&block.ln2_gain), &get(&block.ln2_bias));
            let hidden = cfg.mlp_ratio * d;
            let mut up = linear(&normed2, s_len, &get(&block.w_up), &get(&block.b_up), d, hidden);
            gelu(&mut up);
            let down = linear(&up, s_len, &get(&block.w_down), &get(&block.b_down), hidden, d);
            for (xv, dv) in x.iter_mut().zip(&down) {
                *xv += dv;
            }
        }

        layer_norm(&mut x, &get(&enc.final_gain), &get(&enc.final_bias));
        let cls = x[..d].to_vec();
        let mut h = linear(&cls, 1, &get(&enc.classifier.w1), &get(&enc.classifier.b1), d, 2 * d);
        gelu(&mut h);
        linear(
            &h,
            1,
            &get(&enc.classifier.w2),
            &get(&enc.classifier.b2),
            2 * d,
            cfg.num_labels,
        )
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let cfg = ModelConfig::tiny();
        let mut enc = MultimodalEncoder::new(&cfg, 37).unwrap();
        enc.attach_adapters(Method::Mora, 11).unwrap();
        enc.freeze_backbone();
        // Non-zero adapters so their path is part of the comparison.
        for p in enc.trainable_params() {
            if p.name.contains(".B_") {
                let numel = p.param.borrow().numel();
                let data: Vec<f64> = (0..numel).map(|i| 0.05 * (((i * 13) % 11) as f64 - 5.0)).collect();
                p.param.borrow_mut().set_data(data).unwrap();
            }
        }

        for (i, pattern) in [
            MissingPattern::COMPLETE,
            MissingPattern::IMAGE_ONLY,
            MissingPattern::TEXT_ONLY,
        ]
        .iter()
        .enumerate()
        {
            let sample = sample_with_pattern(&cfg, *pattern, 40 + i as u64);
            let fast = enc.forward(&sample).unwrap();
            let oracle = forward_oracle(&enc, &sample);
            for (a, b) in fast.data().iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-10, "{pattern}: {a} vs {b}");
            }
        }
    }
}
