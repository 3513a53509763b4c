//! The Transformer backbone that serves as the domain adaptation module,
//! plus sequence pooling, similarity scoring, and parameter accounting.
//!
//! Post-layer-norm residual blocks, GELU feed-forward, learned absolute
//! positions, and a weight-tied masked-LM head. All backbone parameters
//! live under the `dam.` namespace, disjoint from any `rem.` namespace.

mod forward;

pub use forward::BoundParams;
pub(crate) use forward::{encode as forward_encode, hidden_states, mlm_logits, pooled_embedding};

use serde::{Deserialize, Serialize};

use crate::error::{DdrError, Result};
use crate::numerics::rng::{normal_tensor, DdrRng};
use crate::numerics::{ParamSet, Scalar, Tensor};
use crate::rem::RemConfig;

/// Embedding-similarity function used for scoring and search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    InnerProduct,
    Cosine,
}

impl std::fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SimilarityKind::InnerProduct => write!(f, "inner_product"),
            SimilarityKind::Cosine => write!(f, "cosine"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub similarity: SimilarityKind,
    /// Average pooling normally covers every non-padding position, special
    /// tokens included; flip this to exclude [CLS]/[SEP]-style specials.
    #[serde(default = "default_true")]
    pub pool_includes_specials: bool,
}

fn default_true() -> bool {
    true
}

impl Default for EncoderConfig {
    /// Desk-scale model: CPU-minutes to train, large enough that adaptation
    /// trends are measurable.
    fn default() -> Self {
        EncoderConfig {
            num_layers: 2,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            vocab_size: 2000,
            max_len: 64,
            similarity: SimilarityKind::InnerProduct,
            pool_includes_specials: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let all_positive = self.num_layers >= 1
            && self.hidden_dim >= 1
            && self.num_heads >= 1
            && self.ffn_dim >= 1
            && self.vocab_size >= 1
            && self.max_len >= 1;
        if !all_positive {
            return Err(DdrError::Invalid(format!("all dims must be >= 1: {self:?}")));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(DdrError::Invalid(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// Token ids plus the mask separating real tokens from padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
    attention: Vec<bool>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, attention: Vec<bool>) -> Result<Self> {
        if ids.is_empty() || ids.len() != attention.len() {
            return Err(DdrError::Invalid(format!(
                "token/mask lengths {} vs {}",
                ids.len(),
                attention.len()
            )));
        }
        if !attention.iter().any(|&m| m) {
            return Err(DdrError::Invalid(
                "sequence has no non-padding token".to_string(),
            ));
        }
        Ok(TokenSequence { ids, attention })
    }

    /// All-real sequence (no padding).
    pub fn from_ids(ids: Vec<usize>) -> Result<Self> {
        let attention = vec![true; ids.len()];
        TokenSequence::new(ids, attention)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn attention(&self) -> &[bool] {
        &self.attention
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Replace the token at one position (masking); padding stays padding.
    pub fn with_id_at(&self, position: usize, id: usize) -> TokenSequence {
        let mut ids = self.ids.clone();
        ids[position] = id;
        TokenSequence {
            ids,
            attention: self.attention.clone(),
        }
    }
}

/// Parameter paths for the backbone namespace.
pub(crate) mod names {
    pub const TOKEN_EMBED: &str = "dam.embed.token";
    pub const POS_EMBED: &str = "dam.embed.pos";
    pub const EMBED_NORM_GAMMA: &str = "dam.embed.norm.gamma";
    pub const EMBED_NORM_BETA: &str = "dam.embed.norm.beta";
    pub const MLM_BIAS: &str = "dam.mlm_head.bias";

    pub fn attn(layer: usize, which: &str) -> String {
        format!("dam.layer.{layer}.attn.{which}")
    }
    pub fn ffn(layer: usize, which: &str) -> String {
        format!("dam.layer.{layer}.ffn.{which}")
    }
}

const INIT_STD: f64 = 0.02;

/// The domain adaptation module: a full encoder stack with its MLM head.
#[derive(Debug, Clone)]
pub struct EncoderBackbone<F: Scalar> {
    cfg: EncoderConfig,
    params: ParamSet<F>,
}

impl<F: Scalar> EncoderBackbone<F> {
    /// Fresh backbone with BERT-style initialization: normal(0, 0.02)
    /// weights and embeddings, identity layer norms, zero biases.
    pub fn init(cfg: EncoderConfig, rng: &mut DdrRng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden_dim;
        let mut params = ParamSet::new();
        params.insert(
            names::TOKEN_EMBED,
            normal_tensor(&[cfg.vocab_size, d], INIT_STD, rng),
            true,
        )?;
        params.insert(
            names::POS_EMBED,
            normal_tensor(&[cfg.max_len, d], INIT_STD, rng),
            true,
        )?;
        params.insert(names::EMBED_NORM_GAMMA, Tensor::filled(&[d], F::one()), true)?;
        params.insert(names::EMBED_NORM_BETA, Tensor::zeros(&[d]), true)?;
        for layer in 0..cfg.num_layers {
            for w in ["wq", "wk", "wv", "wo"] {
                params.insert(
                    &names::attn(layer, w),
                    normal_tensor(&[d, d], INIT_STD, rng),
                    true,
                )?;
            }
            for b in ["bq", "bk", "bv", "bo"] {
                params.insert(&names::attn(layer, b), Tensor::zeros(&[d]), true)?;
            }
            params.insert(
                &names::attn(layer, "norm.gamma"),
                Tensor::filled(&[d], F::one()),
                true,
            )?;
            params.insert(&names::attn(layer, "norm.beta"), Tensor::zeros(&[d]), true)?;
            params.insert(
                &names::ffn(layer, "w1"),
                normal_tensor(&[d, cfg.ffn_dim], INIT_STD, rng),
                true,
            )?;
            params.insert(&names::ffn(layer, "b1"), Tensor::zeros(&[cfg.ffn_dim]), true)?;
            params.insert(
                &names::ffn(layer, "w2"),
                normal_tensor(&[cfg.ffn_dim, d], INIT_STD, rng),
                true,
            )?;
            params.insert(&names::ffn(layer, "b2"), Tensor::zeros(&[d]), true)?;
            params.insert(
                &names::ffn(layer, "norm.gamma"),
                Tensor::filled(&[d], F::one()),
                true,
            )?;
            params.insert(&names::ffn(layer, "norm.beta"), Tensor::zeros(&[d]), true)?;
        }
        params.insert(names::MLM_BIAS, Tensor::zeros(&[cfg.vocab_size]), true)?;
        Ok(EncoderBackbone { cfg, params })
    }

    /// Rebuild from a deserialized parameter set, checking every shape.
    pub fn from_params(cfg: EncoderConfig, params: ParamSet<F>) -> Result<Self> {
        cfg.validate()?;
        let reference = EncoderBackbone::<F>::init(cfg.clone(), &mut crate::numerics::rng::seeded(0))?;
        if reference.params.len() != params.len() {
            return Err(DdrError::ConfigMismatch(format!(
                "backbone expects {} tensors, got {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, p) in reference.params.iter() {
            let got = params.tensor(name)?;
            if got.shape() != p.tensor.shape() {
                return Err(DdrError::ConfigMismatch(format!(
                    "`{name}`: shape {:?} does not match config ({:?})",
                    got.shape(),
                    p.tensor.shape()
                )));
            }
        }
        Ok(EncoderBackbone { cfg, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    pub fn cast<G: Scalar>(&self) -> EncoderBackbone<G> {
        EncoderBackbone {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
        }
    }

    pub fn encode(&self, seq: &TokenSequence) -> Result<Vec<F>> {
        forward::encode(&self.cfg, None, &self.params, seq)
    }
}

/// Similarity between two embeddings.
pub fn similarity<F: Scalar>(q: &[F], doc: &[F], kind: SimilarityKind) -> Result<F> {
    if q.len() != doc.len() {
        return Err(DdrError::Shape(format!(
            "similarity of {} vs {} dims",
            q.len(),
            doc.len()
        )));
    }
    let dot = q
        .iter()
        .zip(doc)
        .fold(F::zero(), |acc, (&a, &b)| acc + a * b);
    match kind {
        SimilarityKind::InnerProduct => Ok(dot),
        SimilarityKind::Cosine => {
            let nq = q.iter().fold(F::zero(), |acc, &v| acc + v * v).sqrt();
            let nd = doc.iter().fold(F::zero(), |acc, &v| acc + v * v).sqrt();
            if nq == F::zero() || nd == F::zero() {
                return Err(DdrError::Numeric(
                    "cosine similarity with a zero vector".to_string(),
                ));
            }
            Ok(dot / (nq * nd))
        }
    }
}

/// Parameter accounting for one backbone/REM configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParamCounts {
    /// Backbone + embeddings, task heads excluded.
    pub backbone_total: usize,
    pub rem_trainable: usize,
    /// rem_trainable / backbone_total.
    pub trainable_fraction: f64,
    /// Extra parameters still present at inference after merging the
    /// low-rank deltas (only the parallel adapters remain).
    pub inference_overhead_fraction: f64,
}

/// Count parameters arithmetically from the configs.
///
/// Fractions are over the retrieval-time backbone, so the MLM head is
/// excluded. Low-rank deltas merge into attention weights and add no
/// inference overhead; parallel adapters do.
pub fn count_parameters(cfg: &EncoderConfig, rem_cfg: Option<&RemConfig>) -> ParamCounts {
    let d = cfg.hidden_dim;
    let embeddings = cfg.vocab_size * d + cfg.max_len * d + 2 * d;
    let attn = 4 * (d * d + d) + 2 * d;
    let ffn = d * cfg.ffn_dim + cfg.ffn_dim + cfg.ffn_dim * d + d + 2 * d;
    let backbone_total = embeddings + cfg.num_layers * (attn + ffn);

    let (lora, pa) = match rem_cfg {
        None => (0, 0),
        Some(rc) => {
            let lora = cfg.num_layers * RemConfig::LORA_TARGETS * 2 * d * rc.lora_rank;
            let pa = cfg.num_layers * 2 * d * rc.pa_bottleneck;
            (lora, pa)
        }
    };
    let rem_trainable = lora + pa;
    ParamCounts {
        backbone_total,
        rem_trainable,
        trainable_fraction: rem_trainable as f64 / backbone_total as f64,
        inference_overhead_fraction: pa as f64 / backbone_total as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::seeded;

    fn bert_base() -> EncoderConfig {
        EncoderConfig {
            num_layers: 12,
            hidden_dim: 768,
            num_heads: 12,
            ffn_dim: 3072,
            vocab_size: 30522,
            max_len: 512,
            ..Default::default()
        }
    }

    fn rem(lora_rank: usize, pa_bottleneck: usize) -> RemConfig {
        RemConfig {
            lora_rank,
            lora_alpha: lora_rank.max(1) as f64,
            pa_bottleneck,
            pa_scale: 1.0,
        }
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let bad = EncoderConfig {
            num_heads: 3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn token_sequence_invariants() {
        assert!(TokenSequence::new(vec![1, 2], vec![true]).is_err());
        assert!(TokenSequence::new(vec![1, 2], vec![false, false]).is_err());
        assert!(TokenSequence::new(vec![], vec![]).is_err());
        let s = TokenSequence::new(vec![1, 2, 0], vec![true, true, false]).unwrap();
        assert_eq!(s.len(), 3);
    }

    #[test]
    fn similarity_examples() {
        // inner_product([1,2],[3,4]) = 1*3 + 2*4 = 11
        let ip = similarity(&[1.0f32, 2.0], &[3.0, 4.0], SimilarityKind::InnerProduct).unwrap();
        assert_eq!(ip, 11.0);

        let u = [0.3f32, -1.2, 0.5];
        let c = similarity(&u, &u, SimilarityKind::Cosine).unwrap();
        assert!((c - 1.0).abs() < 1e-6);

        let orth = similarity(&[1.0f32, 0.0], &[0.0, 2.0], SimilarityKind::Cosine).unwrap();
        assert_eq!(orth, 0.0);

        assert!(similarity(&[0.0f32, 0.0], &[1.0, 2.0], SimilarityKind::Cosine).is_err());
        assert!(similarity(&[1.0f32], &[1.0, 2.0], SimilarityKind::InnerProduct).is_err());
    }

    #[test]
    fn cosine_stays_in_unit_interval() {
        let mut rng = seeded(3);
        for _ in 0..200 {
            let a: Tensor<f32> = normal_tensor(&[8], 1.0, &mut rng);
            let b: Tensor<f32> = normal_tensor(&[8], 1.0, &mut rng);
            let c = similarity(a.data(), b.data(), SimilarityKind::Cosine).unwrap();
            assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&c));
        }
    }

    #[test]
    fn table_parameter_fractions_at_bert_dims() {
        let cfg = bert_base();
        let pp = |frac: f64| frac * 100.0;

        // LoRA rank 96 on Wq/Wv of every layer
        let c = count_parameters(&cfg, Some(&rem(96, 0)));
        assert_eq!(c.rem_trainable, 12 * 2 * 2 * 768 * 96);
        assert!((pp(c.trainable_fraction) - 3.20).abs() <= 0.15, "{c:?}");
        assert_eq!(c.inference_overhead_fraction, 0.0);

        // LoRA rank 192: ~6.5% trainable, zero inference overhead
        let c = count_parameters(&cfg, Some(&rem(192, 0)));
        assert!((pp(c.trainable_fraction) - 6.50).abs() <= 0.15, "{c:?}");
        assert_eq!(c.inference_overhead_fraction, 0.0);

        // Parallel adapter 192: ~3.2% trainable, ~+3.2% inference overhead
        let c = count_parameters(&cfg, Some(&rem(0, 192)));
        assert!((pp(c.trainable_fraction) - 3.20).abs() <= 0.15, "{c:?}");
        assert!((pp(c.inference_overhead_fraction) - 3.20).abs() <= 0.15, "{c:?}");

        // Combined 192 & 192: ~9.7% trainable, overhead still only the PA
        let c = count_parameters(&cfg, Some(&rem(192, 192)));
        assert!((pp(c.trainable_fraction) - 9.70).abs() <= 0.15, "{c:?}");
        assert!((pp(c.inference_overhead_fraction) - 3.20).abs() <= 0.15, "{c:?}");
    }

    #[test]
    fn backbone_shapes_follow_config() {
        let cfg = EncoderConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            vocab_size: 12,
            max_len: 10,
            ..Default::default()
        };
        let bb: EncoderBackbone<f32> = EncoderBackbone::init(cfg.clone(), &mut seeded(1)).unwrap();
        assert_eq!(bb.params().tensor(names::TOKEN_EMBED).unwrap().shape(), &[12, 8]);
        assert_eq!(
            bb.params().tensor(&names::ffn(1, "w1")).unwrap().shape(),
            &[8, 16]
        );
        assert!(bb.params().names().iter().all(|n| n.starts_with("dam.")));

        // round-trip through from_params validates shapes
        let rebuilt = EncoderBackbone::from_params(cfg, bb.params().clone()).unwrap();
        assert!(rebuilt.params().bitwise_eq_prefix(bb.params(), ""));
    }

    use crate::numerics::rng::normal_tensor;
    use crate::numerics::Tensor;
}
