//! Differentiable forward pass.
//!
//! One function builds the hidden-state graph for a token sequence; pooling,
//! the MLM head, and the losses compose on top. When a REM config is
//! present, attention runs with `W + s·(A·B)` on the targeted matrices and
//! each feed-forward sub-layer gains a parallel bottleneck branch whose
//! output is added before the residual normalization.

use std::collections::BTreeMap;

use crate::corpus::{CLS_ID, SEP_ID};
use crate::encoder::names;
use crate::encoder::{EncoderConfig, TokenSequence};
use crate::error::{DdrError, Result};
use crate::numerics::{ParamSet, Scalar, Tape, Var};
use crate::rem::{rem_names, RemConfig};

/// Tape leaves for every parameter, keyed by path.
pub struct BoundParams {
    leaves: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn bind<F: Scalar>(tape: &mut Tape<F>, params: &ParamSet<F>) -> Self {
        BoundParams {
            leaves: tape.bind(params),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.leaves
            .get(name)
            .copied()
            .ok_or_else(|| DdrError::MissingParam(name.to_string()))
    }

    pub fn leaves(&self) -> &BTreeMap<String, Var> {
        &self.leaves
    }
}

fn validate_input(cfg: &EncoderConfig, seq: &TokenSequence) -> Result<()> {
    if seq.len() > cfg.max_len {
        return Err(DdrError::Invalid(format!(
            "sequence length {} exceeds max_len {} (truncation is the caller's job)",
            seq.len(),
            cfg.max_len
        )));
    }
    if let Some(&bad) = seq.ids().iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(DdrError::Invalid(format!(
            "token id {bad} out of range for vocab of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// Attention weight with the low-rank delta applied where one is configured.
fn effective_attn_weight<F: Scalar>(
    tape: &mut Tape<F>,
    rem_cfg: Option<&RemConfig>,
    bound: &BoundParams,
    layer: usize,
    which: &str,
) -> Result<Var> {
    let w = bound.var(&names::attn(layer, which))?;
    let Some(rc) = rem_cfg else {
        return Ok(w);
    };
    if rc.lora_rank == 0 || !RemConfig::lora_targets().contains(&which) {
        return Ok(w);
    }
    let a = bound.var(&rem_names::lora(layer, which, "a"))?;
    let b = bound.var(&rem_names::lora(layer, which, "b"))?;
    let delta = tape.matmul(a, b)?;
    let scaled = tape.scale(delta, F::from_f64(rc.lora_scale()));
    tape.add(w, scaled)
}

/// Final-layer hidden states for `seq`, shape `[seq_len, hidden_dim]`.
pub(crate) fn hidden_states<F: Scalar>(
    tape: &mut Tape<F>,
    cfg: &EncoderConfig,
    rem_cfg: Option<&RemConfig>,
    bound: &BoundParams,
    seq: &TokenSequence,
) -> Result<Var> {
    validate_input(cfg, seq)?;
    let n = seq.len();
    let head_dim = cfg.head_dim();
    let attn_scale = F::from_f64(1.0 / (head_dim as f64).sqrt());
    let positions: Vec<usize> = (0..n).collect();

    let tok = tape.gather(bound.var(names::TOKEN_EMBED)?, seq.ids())?;
    let pos = tape.gather(bound.var(names::POS_EMBED)?, &positions)?;
    let summed = tape.add(tok, pos)?;
    let mut x = tape.layer_norm(
        summed,
        bound.var(names::EMBED_NORM_GAMMA)?,
        bound.var(names::EMBED_NORM_BETA)?,
    )?;

    for layer in 0..cfg.num_layers {
        // self-attention sub-layer
        let wq = effective_attn_weight(tape, rem_cfg, bound, layer, "wq")?;
        let wk = effective_attn_weight(tape, rem_cfg, bound, layer, "wk")?;
        let wv = effective_attn_weight(tape, rem_cfg, bound, layer, "wv")?;
        let q = tape.matmul(x, wq)?;
        let q = tape.add_row(q, bound.var(&names::attn(layer, "bq"))?)?;
        let k = tape.matmul(x, wk)?;
        let k = tape.add_row(k, bound.var(&names::attn(layer, "bk"))?)?;
        let v = tape.matmul(x, wv)?;
        let v = tape.add_row(v, bound.var(&names::attn(layer, "bv"))?)?;

        let mut head_outputs = Vec::with_capacity(cfg.num_heads);
        for h in 0..cfg.num_heads {
            let start = h * head_dim;
            let qh = tape.slice_cols(q, start, head_dim)?;
            let kh = tape.slice_cols(k, start, head_dim)?;
            let vh = tape.slice_cols(v, start, head_dim)?;
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, attn_scale);
            // key positions at padding get probability exactly zero
            let probs = tape.softmax_rows(scores, Some(seq.attention()))?;
            head_outputs.push(tape.matmul(probs, vh)?);
        }
        let ctx = tape.concat_cols(&head_outputs)?;
        let attn_out = tape.matmul(ctx, bound.var(&names::attn(layer, "wo"))?)?;
        let attn_out = tape.add_row(attn_out, bound.var(&names::attn(layer, "bo"))?)?;
        let res = tape.add(x, attn_out)?;
        x = tape.layer_norm(
            res,
            bound.var(&names::attn(layer, "norm.gamma"))?,
            bound.var(&names::attn(layer, "norm.beta"))?,
        )?;

        // feed-forward sub-layer, with the parallel adapter branch reading
        // the same input and writing into the same pre-norm sum
        let h1 = tape.matmul(x, bound.var(&names::ffn(layer, "w1"))?)?;
        let h1 = tape.add_row(h1, bound.var(&names::ffn(layer, "b1"))?)?;
        let h1 = tape.gelu(h1);
        let ffn_out = tape.matmul(h1, bound.var(&names::ffn(layer, "w2"))?)?;
        let mut ffn_out = tape.add_row(ffn_out, bound.var(&names::ffn(layer, "b2"))?)?;

        if let Some(rc) = rem_cfg {
            if rc.pa_bottleneck > 0 {
                let down = bound.var(&rem_names::pa(layer, "down"))?;
                let up = bound.var(&rem_names::pa(layer, "up"))?;
                let mid = tape.matmul(x, down)?;
                let mid = tape.relu(mid);
                let pa_out = tape.matmul(mid, up)?;
                let pa_out = tape.scale(pa_out, F::from_f64(rc.pa_scale));
                ffn_out = tape.add(ffn_out, pa_out)?;
            }
        }

        let res = tape.add(x, ffn_out)?;
        x = tape.layer_norm(
            res,
            bound.var(&names::ffn(layer, "norm.gamma"))?,
            bound.var(&names::ffn(layer, "norm.beta"))?,
        )?;
    }
    Ok(x)
}

/// Mean of final hidden states over the pooled positions, shape `[1, d]`.
pub(crate) fn pooled_embedding<F: Scalar>(
    tape: &mut Tape<F>,
    cfg: &EncoderConfig,
    rem_cfg: Option<&RemConfig>,
    bound: &BoundParams,
    seq: &TokenSequence,
) -> Result<Var> {
    let hidden = hidden_states(tape, cfg, rem_cfg, bound, seq)?;
    let mask = pooling_mask(cfg, seq);
    tape.mean_rows(hidden, &mask)
}

fn pooling_mask(cfg: &EncoderConfig, seq: &TokenSequence) -> Vec<bool> {
    if cfg.pool_includes_specials {
        return seq.attention().to_vec();
    }
    let mask: Vec<bool> = seq
        .ids()
        .iter()
        .zip(seq.attention())
        .map(|(&id, &real)| real && id != CLS_ID && id != SEP_ID)
        .collect();
    if mask.iter().any(|&m| m) {
        mask
    } else {
        // nothing but specials: fall back to every real position
        seq.attention().to_vec()
    }
}

/// Vocabulary logits at the given positions via the weight-tied head,
/// shape `[positions, vocab]`.
pub(crate) fn mlm_logits<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    hidden: Var,
    positions: &[usize],
) -> Result<Var> {
    let selected = tape.gather(hidden, positions)?;
    let embed_t = tape.transpose(bound.var(names::TOKEN_EMBED)?);
    let logits = tape.matmul(selected, embed_t)?;
    tape.add_row(logits, bound.var(names::MLM_BIAS)?)
}

/// Non-training entry point: pooled embedding as a plain vector.
pub(crate) fn encode<F: Scalar>(
    cfg: &EncoderConfig,
    rem_cfg: Option<&RemConfig>,
    params: &ParamSet<F>,
    seq: &TokenSequence,
) -> Result<Vec<F>> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let pooled = pooled_embedding(&mut tape, cfg, rem_cfg, &bound, seq)?;
    let out = tape.value(pooled);
    out.validate_finite("encode output")?;
    Ok(out.data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderBackbone;
    use crate::numerics::rng::seeded;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            vocab_size: 12,
            max_len: 10,
            ..Default::default()
        }
    }

    fn backbone(seed: u64) -> EncoderBackbone<f64> {
        EncoderBackbone::init(tiny_cfg(), &mut seeded(seed)).unwrap()
    }

    #[test]
    fn single_token_pooling_equals_hidden_state() {
        let bb = backbone(1);
        let seq = TokenSequence::from_ids(vec![5]).unwrap();
        let pooled = bb.encode(&seq).unwrap();

        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, bb.params());
        let hidden = hidden_states(&mut tape, bb.config(), None, &bound, &seq).unwrap();
        assert_eq!(tape.value(hidden).row(0), pooled.as_slice());
    }

    #[test]
    fn appending_padding_changes_nothing() {
        let bb = backbone(2);
        let bare = TokenSequence::from_ids(vec![3, 7, 1, 9]).unwrap();
        let padded = TokenSequence::new(
            vec![3, 7, 1, 9, 0, 0, 0],
            vec![true, true, true, true, false, false, false],
        )
        .unwrap();
        let a = bb.encode(&bare).unwrap();
        let b = bb.encode(&padded).unwrap();
        assert_eq!(a, b, "padding must be invisible to pooling and attention");
    }

    #[test]
    fn padding_content_is_irrelevant() {
        // permute / rewrite ids sitting at padding positions: bitwise equal
        let bb = backbone(3);
        let a = TokenSequence::new(vec![4, 2, 6, 11], vec![true, true, false, false]).unwrap();
        let b = TokenSequence::new(vec![4, 2, 11, 6], vec![true, true, false, false]).unwrap();
        let ea = bb.encode(&a).unwrap();
        let eb = bb.encode(&b).unwrap();
        assert!(
            ea.iter().zip(&eb).all(|(x, y)| x.to_bits() == y.to_bits()),
            "masked positions leaked into the output"
        );
    }

    #[test]
    fn output_dim_and_finiteness() {
        let bb = backbone(4);
        for len in 1..=10 {
            let ids: Vec<usize> = (0..len).map(|i| i % 12).collect();
            let emb = bb.encode(&TokenSequence::from_ids(ids).unwrap()).unwrap();
            assert_eq!(emb.len(), 8);
            assert!(emb.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn rejects_overlong_and_out_of_vocab() {
        let bb = backbone(5);
        let long = TokenSequence::from_ids((0..11).map(|i| i % 12).collect()).unwrap();
        assert!(bb.encode(&long).is_err());
        let oov = TokenSequence::from_ids(vec![12]).unwrap();
        assert!(bb.encode(&oov).is_err());
    }

    #[test]
    fn pooling_switch_excludes_specials() {
        let mut cfg = tiny_cfg();
        cfg.pool_includes_specials = false;
        let bb: EncoderBackbone<f64> = EncoderBackbone::init(cfg, &mut seeded(6)).unwrap();
        // ids 3 and 4 are the CLS/SEP reserved slots
        let with_specials = TokenSequence::from_ids(vec![3, 7, 9, 4]).unwrap();

        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, bb.params());
        let hidden =
            hidden_states(&mut tape, bb.config(), None, &bound, &with_specials).unwrap();
        let h = tape.value(hidden).clone();
        let pooled = bb.encode(&with_specials).unwrap();
        for j in 0..8 {
            let manual = (h.row(1)[j] + h.row(2)[j]) / 2.0;
            assert!((pooled[j] - manual).abs() < 1e-12);
        }

        // an all-specials sequence still pools (falls back to real positions)
        let only_specials = TokenSequence::from_ids(vec![3, 4]).unwrap();
        assert!(bb.encode(&only_specials).is_ok());
    }

    /// Independent dense-matrix evaluation of the same architecture, written
    /// directly against the parameter tensors with plain loops. Exercises a
    /// different code path than the tape ops.
    mod oracle {
        use super::*;

        type Mat = Vec<Vec<f64>>;

        fn to_mat(t: &crate::numerics::Tensor<f64>) -> Mat {
            (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
        }

        fn mat_mul(a: &Mat, b: &Mat) -> Mat {
            let (m, k, n) = (a.len(), b.len(), b[0].len());
            let mut c = vec![vec![0.0; n]; m];
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += a[i][p] * b[p][j];
                    }
                    c[i][j] = s;
                }
            }
            c
        }

        fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64]) -> Mat {
            x.iter()
                .map(|row| {
                    let n = row.len() as f64;
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let sigma = (var + 1e-12).sqrt();
                    row.iter()
                        .enumerate()
                        .map(|(j, v)| gamma[j] * (v - mean) / sigma + beta[j])
                        .collect()
                })
                .collect()
        }

        fn gelu(x: f64) -> f64 {
            0.5 * x * (1.0 + (0.7978845608028654 * (x + 0.044715 * x * x * x)).tanh())
        }

        pub(super) fn run(bb: &EncoderBackbone<f64>, ids: &[usize]) -> Vec<f64> {
            let cfg = bb.config();
            let p = bb.params();
            let d = cfg.hidden_dim;
            let heads = cfg.num_heads;
            let hd = d / heads;
            let get = |name: &str| to_mat(p.tensor(name).unwrap());
            let getv = |name: &str| p.tensor(name).unwrap().data().to_vec();

            let tok = get(names::TOKEN_EMBED);
            let pos = get(names::POS_EMBED);
            let mut x: Mat = ids
                .iter()
                .enumerate()
                .map(|(i, &id)| (0..d).map(|j| tok[id][j] + pos[i][j]).collect())
                .collect();
            x = layer_norm(&x, &getv(names::EMBED_NORM_GAMMA), &getv(names::EMBED_NORM_BETA));

            for layer in 0..cfg.num_layers {
                let add_bias = |m: &Mat, b: &[f64]| -> Mat {
                    m.iter()
                        .map(|r| r.iter().zip(b).map(|(v, bv)| v + bv).collect())
                        .collect()
                };
                let q = add_bias(
                    &mat_mul(&x, &get(&names::attn(layer, "wq"))),
                    &getv(&names::attn(layer, "bq")),
                );
                let k = add_bias(
                    &mat_mul(&x, &get(&names::attn(layer, "wk"))),
                    &getv(&names::attn(layer, "bk")),
                );
                let v = add_bias(
                    &mat_mul(&x, &get(&names::attn(layer, "wv"))),
                    &getv(&names::attn(layer, "bv")),
                );
                let n = x.len();
                let mut ctx = vec![vec![0.0; d]; n];
                for h in 0..heads {
                    let cols = h * hd..(h + 1) * hd;
                    for i in 0..n {
                        let mut scores: Vec<f64> = (0..n)
                            .map(|j| {
                                cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>()
                                    / (hd as f64).sqrt()
                            })
                            .collect();
                        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0;
                        for s in &mut scores {
                            *s = (*s - max).exp();
                            sum += *s;
                        }
                        for (j, col) in cols.clone().enumerate() {
                            let _ = j;
                            let mut acc = 0.0;
                            for jj in 0..n {
                                acc += scores[jj] / sum * v[jj][col];
                            }
                            ctx[i][col] = acc;
                        }
                    }
                }
                let attn = add_bias(
                    &mat_mul(&ctx, &get(&names::attn(layer, "wo"))),
                    &getv(&names::attn(layer, "bo")),
                );
                let sum: Mat = x
                    .iter()
                    .zip(&attn)
                    .map(|(a, b)| a.iter().zip(b).map(|(u, w)| u + w).collect())
                    .collect();
                x = layer_norm(
                    &sum,
                    &getv(&names::attn(layer, "norm.gamma")),
                    &getv(&names::attn(layer, "norm.beta")),
                );

                let h1: Mat = add_bias(
                    &mat_mul(&x, &get(&names::ffn(layer, "w1"))),
                    &getv(&names::ffn(layer, "b1")),
                )
                .iter()
                .map(|r| r.iter().map(|&v| gelu(v)).collect())
                .collect();
                let ffn = add_bias(
                    &mat_mul(&h1, &get(&names::ffn(layer, "w2"))),
                    &getv(&names::ffn(layer, "b2")),
                );
                let sum: Mat = x
                    .iter()
                    .zip(&ffn)
                    .map(|(a, b)| a.iter().zip(b).map(|(u, w)| u + w).collect())
                    .collect();
                x = layer_norm(
                    &sum,
                    &getv(&names::ffn(layer, "norm.gamma")),
                    &getv(&names::ffn(layer, "norm.beta")),
                );
            }

            let n = x.len() as f64;
            (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect()
        }
    }

    #[test]
    fn matches_independent_matrix_evaluation() {
        let bb = backbone(7);
        for ids in [vec![0, 5, 9], vec![11, 2, 3, 4, 8, 1], vec![6]] {
            let got = bb.encode(&TokenSequence::from_ids(ids.clone()).unwrap()).unwrap();
            let expected = oracle::run(&bb, &ids);
            for (g, e) in got.iter().zip(&expected) {
                assert!((g - e).abs() < 1e-9, "encode {g} vs oracle {e}");
            }
        }
    }
}
