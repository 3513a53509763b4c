//! Optimization procedures: masking and the MLM objective, supervised
//! contrastive / margin-distillation losses, the adaptation loop, and the
//! two-step disentangled finetuning recipe with sequential initialization.

mod loops;

pub use loops::{
    adapt_dam, adapt_dam_with_eval, corpus_sequences, disentangled_finetune, sequential_init,
    train_rem, AdaptOutcome, DfMode, DisentangledConfig, DisentangledOutcome, InitMode,
    SupervisedExamples,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CLS_ID, MASK_ID, PAD_ID, SEP_ID};
use crate::encoder::{BoundParams, EncoderConfig, SimilarityKind, TokenSequence};
use crate::error::{DdrError, Result};
use crate::numerics::rng::DdrRng;
use crate::numerics::{Scalar, Tape, Var};
use crate::rem::RemConfig;

/// Unscaled cosine similarities live in [-1, 1], which starves the softmax
/// of gradient; contrastive training scales them by this factor.
/// Inner-product mode uses no temperature.
pub const COSINE_LOGIT_SCALE: f64 = 20.0;

/// BERT-style masking fractions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MaskingPolicy {
    /// Probability of selecting an eligible token for prediction.
    pub select_prob: f64,
    /// Of the selected: replaced by [MASK] / by a random token / kept.
    pub mask_frac: f64,
    pub random_frac: f64,
    pub keep_frac: f64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        MaskingPolicy {
            select_prob: 0.15,
            mask_frac: 0.80,
            random_frac: 0.10,
            keep_frac: 0.10,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.select_prob) {
            return Err(DdrError::Invalid(format!(
                "select_prob {}",
                self.select_prob
            )));
        }
        let sum = self.mask_frac + self.random_frac + self.keep_frac;
        if (sum - 1.0).abs() > 1e-9
            || self.mask_frac < 0.0
            || self.random_frac < 0.0
            || self.keep_frac < 0.0
        {
            return Err(DdrError::Invalid(format!(
                "mask/random/keep fractions must be non-negative and sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

/// Which objective supervises the relevance module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Contrastive,
    MarginMse,
}

/// Knobs for one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub queries_per_batch: usize,
    pub hard_negatives_per_query: usize,
    /// Documents per masked-LM batch (adaptation phase).
    pub docs_per_batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub loss_kind: LossKind,
}

impl TrainingConfig {
    /// Learning rate of the DAM step inside disentangled finetuning.
    pub const DF_DAM_LR: f64 = 5e-5;
    /// Learning rate for target-domain adaptation (kept small so the target
    /// DAM stays compatible with the REM).
    pub const ADAPT_LR: f64 = 2e-5;
    /// Learning rate for supervised REM training.
    pub const REM_LR: f64 = 2e-5;

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(DdrError::Invalid(format!(
                "learning rate {}",
                self.learning_rate
            )));
        }
        if self.queries_per_batch == 0 || self.docs_per_batch == 0 {
            return Err(DdrError::Invalid("batch sizes must be >= 1".to_string()));
        }
        Ok(())
    }
}

impl Default for TrainingConfig {
    /// Paper-scale defaults: 128 queries with 3 hard negatives each. Desk
    /// runs shrink these through the experiment config.
    fn default() -> Self {
        TrainingConfig {
            learning_rate: Self::REM_LR,
            weight_decay: 0.01,
            queries_per_batch: 128,
            hard_negatives_per_query: 3,
            docs_per_batch: 128,
            steps: 1000,
            seed: 0,
            loss_kind: LossKind::Contrastive,
        }
    }
}

/// One aligned supervised batch: query i goes with positive i and with
/// `negatives[i]`; teacher scores are present iff the loss is Margin-MSE.
#[derive(Debug, Clone)]
pub struct TripleBatch {
    pub queries: Vec<TokenSequence>,
    pub positives: Vec<TokenSequence>,
    pub negatives: Vec<Vec<TokenSequence>>,
    pub teacher: Option<TeacherScores>,
}

/// Teacher scores aligned with a TripleBatch.
#[derive(Debug, Clone)]
pub struct TeacherScores {
    pub positive: Vec<f64>,
    pub negative: Vec<Vec<f64>>,
}

impl TripleBatch {
    pub fn validate(&self, loss_kind: LossKind) -> Result<()> {
        let n = self.queries.len();
        if n == 0 {
            return Err(DdrError::Invalid("batch of size 0".to_string()));
        }
        if self.positives.len() != n || self.negatives.len() != n {
            return Err(DdrError::Shape(format!(
                "batch misaligned: {n} queries, {} positives, {} negative groups",
                self.positives.len(),
                self.negatives.len()
            )));
        }
        match (loss_kind, &self.teacher) {
            (LossKind::MarginMse, None) => Err(DdrError::Invalid(
                "margin_mse needs teacher scores".to_string(),
            )),
            (LossKind::MarginMse, Some(t)) => {
                if t.positive.len() != n
                    || t.negative.len() != n
                    || t.negative
                        .iter()
                        .zip(&self.negatives)
                        .any(|(ts, ns)| ts.len() != ns.len())
                {
                    return Err(DdrError::Invalid(
                        "teacher scores misaligned with triples".to_string(),
                    ));
                }
                Ok(())
            }
            (LossKind::Contrastive, Some(_)) => Err(DdrError::Invalid(
                "contrastive batches carry no teacher scores".to_string(),
            )),
            (LossKind::Contrastive, None) => Ok(()),
        }
    }
}

/// Result of one masking draw.
#[derive(Debug, Clone)]
pub struct MaskedSequence {
    pub seq: TokenSequence,
    /// (position, original id) for every selected position.
    pub labels: Vec<(usize, usize)>,
}

fn is_special(id: usize) -> bool {
    id == PAD_ID || id == CLS_ID || id == SEP_ID || id == MASK_ID
}

/// BERT-style masking draw over the eligible (non-special, non-padding)
/// positions. A draw selecting nothing is valid; training loops resample.
pub fn apply_masking(
    seq: &TokenSequence,
    policy: &MaskingPolicy,
    vocab_size: usize,
    first_regular_id: usize,
    rng: &mut DdrRng,
) -> Result<MaskedSequence> {
    policy.validate()?;
    if vocab_size <= first_regular_id {
        return Err(DdrError::Invalid(
            "vocabulary has no maskable tokens".to_string(),
        ));
    }
    let mut ids = seq.ids().to_vec();
    let mut labels = Vec::new();
    for pos in 0..ids.len() {
        if !seq.attention()[pos] || is_special(ids[pos]) {
            continue;
        }
        if rng.random_range(0.0..1.0) >= policy.select_prob {
            continue;
        }
        labels.push((pos, ids[pos]));
        let r: f64 = rng.random_range(0.0..1.0);
        if r < policy.mask_frac {
            ids[pos] = MASK_ID;
        } else if r < policy.mask_frac + policy.random_frac {
            ids[pos] = rng.random_range(first_regular_id..vocab_size);
        }
        // else: kept unchanged
    }
    Ok(MaskedSequence {
        seq: TokenSequence::new(ids, seq.attention().to_vec())?,
        labels,
    })
}

// ── Losses (differentiable, built on a tape) ─────────────────────────

/// Mean masked-LM cross entropy over the labeled positions of a batch of
/// masked sequences, through the weight-tied vocabulary head.
pub fn mlm_loss<F: Scalar>(
    tape: &mut Tape<F>,
    cfg: &EncoderConfig,
    rem_cfg: Option<&RemConfig>,
    bound: &BoundParams,
    batch: &[MaskedSequence],
) -> Result<Var> {
    let mut logit_blocks = Vec::new();
    let mut targets = Vec::new();
    for masked in batch {
        if masked.labels.is_empty() {
            continue;
        }
        let hidden = crate::encoder::hidden_states(tape, cfg, rem_cfg, bound, &masked.seq)?;
        let positions: Vec<usize> = masked.labels.iter().map(|&(p, _)| p).collect();
        logit_blocks.push(crate::encoder::mlm_logits(tape, bound, hidden, &positions)?);
        targets.extend(masked.labels.iter().map(|&(_, id)| id));
    }
    if targets.is_empty() {
        return Err(DdrError::Invalid(
            "no labeled positions in batch; resample the masking draw".to_string(),
        ));
    }
    let logits = if logit_blocks.len() == 1 {
        logit_blocks[0]
    } else {
        tape.concat_rows(&logit_blocks)?
    };
    tape.cross_entropy_rows(logits, &targets)
}

/// In-batch contrastive loss.
///
/// The candidate pool for every query is all in-batch positives plus all
/// hard negatives; query i's target is positive i. Cosine mode scales the
/// similarity matrix by [`COSINE_LOGIT_SCALE`].
pub fn contrastive_loss<F: Scalar>(
    tape: &mut Tape<F>,
    query_embs: &[Var],
    positive_embs: &[Var],
    negative_embs: &[Var],
    kind: SimilarityKind,
) -> Result<Var> {
    if query_embs.is_empty() {
        return Err(DdrError::Invalid("batch of size 0".to_string()));
    }
    if query_embs.len() != positive_embs.len() {
        return Err(DdrError::Shape(format!(
            "{} queries vs {} positives",
            query_embs.len(),
            positive_embs.len()
        )));
    }
    let mut q_mat = tape.concat_rows(query_embs)?;
    let mut candidates: Vec<Var> = positive_embs.to_vec();
    candidates.extend_from_slice(negative_embs);
    let mut c_mat = tape.concat_rows(&candidates)?;
    if kind == SimilarityKind::Cosine {
        q_mat = tape.normalize_rows(q_mat)?;
        c_mat = tape.normalize_rows(c_mat)?;
    }
    let ct = tape.transpose(c_mat);
    let mut scores = tape.matmul(q_mat, ct)?;
    if kind == SimilarityKind::Cosine {
        scores = tape.scale(scores, F::from_f64(COSINE_LOGIT_SCALE));
    }
    let targets: Vec<usize> = (0..query_embs.len()).collect();
    tape.cross_entropy_rows(scores, &targets)
}

/// Margin distillation: mean over triples of
/// `((s(q,d+) - s(q,d-)) - (t(q,d+) - t(q,d-)))^2`.
pub fn margin_mse_loss<F: Scalar>(
    tape: &mut Tape<F>,
    student_pos: &[Var],
    student_neg: &[Var],
    teacher_pos: &[f64],
    teacher_neg: &[f64],
) -> Result<Var> {
    let n = student_pos.len();
    if n == 0 {
        return Err(DdrError::Invalid("no triples".to_string()));
    }
    if student_neg.len() != n || teacher_pos.len() != n || teacher_neg.len() != n {
        return Err(DdrError::Invalid(format!(
            "margin_mse misaligned: {n} positives, {} negatives, {} / {} teacher scores",
            student_neg.len(),
            teacher_pos.len(),
            teacher_neg.len()
        )));
    }
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let neg = tape.scale(student_neg[i], F::from_f64(-1.0));
        let student_margin = tape.add(student_pos[i], neg)?;
        let teacher_margin = tape.leaf(crate::numerics::Tensor::scalar(F::from_f64(
            teacher_pos[i] - teacher_neg[i],
        )));
        let neg_teacher = tape.scale(teacher_margin, F::from_f64(-1.0));
        let diff = tape.add(student_margin, neg_teacher)?;
        terms.push(tape.mul(diff, diff)?);
    }
    let sum = tape.sum_n(&terms)?;
    Ok(tape.scale(sum, F::one() / F::from_usize(n)))
}

/// Similarity score node between two `[1, d]` embeddings.
pub fn similarity_score<F: Scalar>(
    tape: &mut Tape<F>,
    q: Var,
    d: Var,
    kind: SimilarityKind,
) -> Result<Var> {
    match kind {
        SimilarityKind::InnerProduct => tape.dot(q, d),
        SimilarityKind::Cosine => {
            let qn = tape.normalize_rows(q)?;
            let dn = tape.normalize_rows(d)?;
            tape.dot(qn, dn)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{normal_tensor, seeded};
    use crate::numerics::Tensor;

    fn seq(ids: Vec<usize>) -> TokenSequence {
        TokenSequence::from_ids(ids).unwrap()
    }

    #[test]
    fn degenerate_policy_masks_every_eligible_token() {
        let policy = MaskingPolicy {
            select_prob: 1.0,
            mask_frac: 1.0,
            random_frac: 0.0,
            keep_frac: 0.0,
        };
        let s = seq(vec![CLS_ID, 10, 11, 12, SEP_ID]);
        let out = apply_masking(&s, &policy, 100, 5, &mut seeded(1)).unwrap();
        assert_eq!(out.labels, vec![(1, 10), (2, 11), (3, 12)]);
        assert_eq!(out.seq.ids(), &[CLS_ID, MASK_ID, MASK_ID, MASK_ID, SEP_ID]);
    }

    #[test]
    fn masking_statistics_match_the_fractions() {
        let policy = MaskingPolicy::default();
        let mut rng = seeded(7);
        let mut eligible = 0usize;
        let mut selected = 0usize;
        let mut masked = 0usize;
        let mut randomized = 0usize;
        let mut kept = 0usize;
        // 2000 sequences x 60 tokens > 1e5 eligible positions
        for _ in 0..2000 {
            let ids: Vec<usize> = std::iter::once(CLS_ID)
                .chain((0..60).map(|i| 5 + (i % 90)))
                .chain(std::iter::once(SEP_ID))
                .collect();
            let s = seq(ids);
            eligible += 60;
            let out = apply_masking(&s, &policy, 95, 5, &mut rng).unwrap();
            selected += out.labels.len();
            for &(pos, original) in &out.labels {
                let now = out.seq.ids()[pos];
                if now == MASK_ID {
                    masked += 1;
                } else if now == original {
                    kept += 1;
                } else {
                    randomized += 1;
                }
            }
        }
        let sel_frac = selected as f64 / eligible as f64;
        assert!(
            (sel_frac - 0.15).abs() < 0.005,
            "selection fraction {sel_frac}"
        );
        let m = masked as f64 / selected as f64;
        let r = randomized as f64 / selected as f64;
        let k = kept as f64 / selected as f64;
        assert!((m - 0.80).abs() < 0.01, "mask fraction {m}");
        // a "random" replacement can coincide with the original, counting as
        // kept; with 90 candidate ids that shifts ~0.1% between the buckets
        assert!((r - 0.10).abs() < 0.01, "random fraction {r}");
        assert!((k - 0.10).abs() < 0.01, "keep fraction {k}");
    }

    #[test]
    fn specials_and_padding_are_never_selected() {
        let policy = MaskingPolicy {
            select_prob: 1.0,
            ..Default::default()
        };
        let s = TokenSequence::new(
            vec![CLS_ID, 9, SEP_ID, PAD_ID, PAD_ID],
            vec![true, true, true, false, false],
        )
        .unwrap();
        for trial in 0..50 {
            let out = apply_masking(&s, &policy, 100, 5, &mut seeded(trial)).unwrap();
            assert_eq!(out.labels.len(), 1);
            assert_eq!(out.labels[0].0, 1);
            assert_eq!(out.seq.ids()[0], CLS_ID);
            assert_eq!(out.seq.ids()[2], SEP_ID);
            assert_eq!(out.seq.ids()[3], PAD_ID);
        }
    }

    #[test]
    fn masking_is_reproducible_and_labels_match_selection() {
        let policy = MaskingPolicy::default();
        let s = seq((0..40).map(|i| 5 + i).collect());
        let a = apply_masking(&s, &policy, 100, 5, &mut seeded(3)).unwrap();
        let b = apply_masking(&s, &policy, 100, 5, &mut seeded(3)).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.seq, b.seq);
        // every changed position is labeled
        for (pos, (&now, &orig)) in a.seq.ids().iter().zip(s.ids()).enumerate() {
            if now != orig {
                assert!(a.labels.iter().any(|&(p, o)| p == pos && o == orig));
            }
        }
    }

    fn emb_leaves(tape: &mut Tape<f64>, n: usize, d: usize, seed: u64) -> Vec<Var> {
        (0..n)
            .map(|i| tape.leaf(normal_tensor(&[1, d], 1.0, &mut seeded(seed + i as u64))))
            .collect()
    }

    #[test]
    fn contrastive_uniform_scores_give_ln_pool_size() {
        // identical embeddings: every similarity equal, pool of 4 -> ln 4
        let mut tape = Tape::<f64>::new();
        let e = Tensor::from_vec(&[1, 3], vec![0.4, -0.2, 0.9]).unwrap();
        let vars: Vec<Var> = (0..4).map(|_| tape.leaf(e.clone())).collect();
        let loss = contrastive_loss(
            &mut tape,
            &vars[..2],
            &vars[..2],
            &vars[2..],
            SimilarityKind::InnerProduct,
        )
        .unwrap();
        assert!((tape.value(loss).item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn contrastive_saturated_case_and_hand_value() {
        // 1 query, pool {pos, neg} with dot scores 2 and 0
        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(Tensor::from_vec(&[1, 2], vec![2.0, 0.0]).unwrap());
        let pos = tape.leaf(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap());
        let neg = tape.leaf(Tensor::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap());
        let loss = contrastive_loss(&mut tape, &[q], &[pos], &[neg], SimilarityKind::InnerProduct)
            .unwrap();
        let expected = -(2.0f64.exp() / (2.0f64.exp() + 1.0)).ln();
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);
        assert!((expected - 0.126928).abs() < 1e-6);

        // positive similarity far above the rest -> loss near zero
        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(Tensor::from_vec(&[1, 2], vec![30.0, 0.0]).unwrap());
        let pos = tape.leaf(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap());
        let neg = tape.leaf(Tensor::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap());
        let loss = contrastive_loss(&mut tape, &[q], &[pos], &[neg], SimilarityKind::InnerProduct)
            .unwrap();
        assert!(tape.value(loss).item() < 1e-10);
    }

    #[test]
    fn contrastive_rejects_empty_batch() {
        let mut tape = Tape::<f64>::new();
        assert!(
            contrastive_loss(&mut tape, &[], &[], &[], SimilarityKind::InnerProduct).is_err()
        );
    }

    #[test]
    fn contrastive_gradients_pass_grad_check() {
        use crate::numerics::{grad_check, ParamSet};
        for kind in [SimilarityKind::InnerProduct, SimilarityKind::Cosine] {
            let mut ps = ParamSet::new();
            let mut rng = seeded(20);
            for name in ["q0", "q1", "p0", "p1", "n0", "n1"] {
                ps.insert(name, normal_tensor::<f64>(&[1, 4], 1.0, &mut rng), true)
                    .unwrap();
            }
            let err = grad_check(&ps, 1e-6, move |tape: &mut Tape<f64>, leaves: &std::collections::BTreeMap<String, Var>| {
                contrastive_loss(
                    tape,
                    &[leaves["q0"], leaves["q1"]],
                    &[leaves["p0"], leaves["p1"]],
                    &[leaves["n0"], leaves["n1"]],
                    kind,
                )
            })
            .unwrap();
            assert!(err < 1e-6, "{kind:?} rel err {err}");
        }
    }

    #[test]
    fn margin_mse_hand_cases() {
        // student margins equal teacher margins -> exactly 0
        let mut tape = Tape::<f64>::new();
        let sp = tape.leaf(Tensor::scalar(3.0));
        let sn = tape.leaf(Tensor::scalar(1.0));
        let loss = margin_mse_loss(&mut tape, &[sp], &[sn], &[5.0], &[3.0]).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);

        // student margin 1, teacher margin 3 -> (1 - 3)^2 = 4
        let mut tape = Tape::<f64>::new();
        let sp = tape.leaf(Tensor::scalar(2.0));
        let sn = tape.leaf(Tensor::scalar(1.0));
        let loss = margin_mse_loss(&mut tape, &[sp], &[sn], &[4.0], &[1.0]).unwrap();
        assert_eq!(tape.value(loss).item(), 4.0);
    }

    #[test]
    fn margin_mse_is_shift_invariant_in_student_scores() {
        let mut tape = Tape::<f64>::new();
        let sp = tape.leaf(Tensor::scalar(1.3));
        let sn = tape.leaf(Tensor::scalar(0.4));
        let a = margin_mse_loss(&mut tape, &[sp], &[sn], &[2.0], &[0.5]).unwrap();
        let sp2 = tape.leaf(Tensor::scalar(1.3 + 7.0));
        let sn2 = tape.leaf(Tensor::scalar(0.4 + 7.0));
        let b = margin_mse_loss(&mut tape, &[sp2], &[sn2], &[2.0], &[0.5]).unwrap();
        assert!((tape.value(a).item() - tape.value(b).item()).abs() < 1e-9);
    }

    #[test]
    fn margin_mse_requires_teacher_scores() {
        let mut tape = Tape::<f64>::new();
        let sp = tape.leaf(Tensor::scalar(1.0));
        let sn = tape.leaf(Tensor::scalar(0.0));
        assert!(margin_mse_loss(&mut tape, &[sp], &[sn], &[1.0], &[]).is_err());

        let batch = TripleBatch {
            queries: vec![seq(vec![CLS_ID, 7, SEP_ID])],
            positives: vec![seq(vec![CLS_ID, 8, SEP_ID])],
            negatives: vec![vec![seq(vec![CLS_ID, 9, SEP_ID])]],
            teacher: None,
        };
        assert!(batch.validate(LossKind::MarginMse).is_err());
        assert!(batch.validate(LossKind::Contrastive).is_ok());
    }

    #[test]
    fn margin_mse_gradients_pass_grad_check() {
        use crate::numerics::{grad_check, ParamSet};
        let mut ps = ParamSet::new();
        let mut rng = seeded(21);
        for name in ["sp0", "sp1", "sn0", "sn1"] {
            ps.insert(name, normal_tensor::<f64>(&[1], 1.0, &mut rng), true)
                .unwrap();
        }
        let err = grad_check(&ps, 1e-6, |tape: &mut Tape<f64>, leaves: &std::collections::BTreeMap<String, Var>| {
            margin_mse_loss(
                tape,
                &[leaves["sp0"], leaves["sp1"]],
                &[leaves["sn0"], leaves["sn1"]],
                &[0.9, 0.1],
                &[0.2, 0.05],
            )
        })
        .unwrap();
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn losses_are_nonnegative_on_random_inputs() {
        let mut tape = Tape::<f64>::new();
        let q = emb_leaves(&mut tape, 3, 6, 100);
        let p = emb_leaves(&mut tape, 3, 6, 200);
        let n = emb_leaves(&mut tape, 3, 6, 300);
        for kind in [SimilarityKind::InnerProduct, SimilarityKind::Cosine] {
            let loss = contrastive_loss(&mut tape, &q, &p, &n, kind).unwrap();
            assert!(tape.value(loss).item() >= 0.0);
        }
        let sp = vec![tape.leaf(Tensor::scalar(0.9))];
        let sn = vec![tape.leaf(Tensor::scalar(-0.4))];
        let loss = margin_mse_loss(&mut tape, &sp, &sn, &[0.7], &[0.3]).unwrap();
        assert!(tape.value(loss).item() >= 0.0);
    }
}
