//! Training loops. All run in f32 (the 64-bit mode exists only for gradient
//! checking) and are bit-reproducible for a fixed seed.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{tokenize, SourceDomain, Vocabulary, RESERVED_TOKENS};
use crate::encoder::{BoundParams, EncoderBackbone, TokenSequence};
use crate::error::{DdrError, Result};
use crate::numerics::rng::derive;
use crate::numerics::{adamw_step, AdamWConfig, OptimizerState, Tape};
use crate::rem::{apply_phase, insert_rem, RemConfig, RemModule, TrainingPhase};
use crate::training::{
    apply_masking, contrastive_loss, margin_mse_loss, mlm_loss, similarity_score, LossKind,
    MaskedSequence, MaskingPolicy, TrainingConfig,
};

/// How a target-domain DAM is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Copy the source DAM (keeps the REM compatible).
    Sequential,
    /// Copy the pre-finetuning base backbone (the no-SI ablation).
    Base,
}

/// Whether disentangled finetuning adapts the source DAM first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DfMode {
    On,
    /// Skip step 1: the source DAM is the base backbone (the no-DF ablation).
    Off,
}

/// Adapted backbone plus the per-step loss curve.
pub struct AdaptOutcome {
    pub backbone: EncoderBackbone<f32>,
    pub loss_curve: Vec<(usize, f64)>,
    /// (step, metric) pairs when an eval hook ran.
    pub metric_curve: Vec<(usize, f64)>,
}

fn adamw_for(cfg: &TrainingConfig) -> OptimizerState<f32> {
    OptimizerState::new(AdamWConfig {
        lr: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    })
}

fn eligible_positions(seq: &TokenSequence) -> usize {
    seq.ids()
        .iter()
        .zip(seq.attention())
        .filter(|&(&id, &real)| real && id >= RESERVED_TOKENS.len())
        .count()
}

/// Masking draw that resamples until at least one position is selected,
/// keeping step counts exact.
fn masked_draw(
    seq: &TokenSequence,
    policy: &MaskingPolicy,
    vocab_size: usize,
    rng: &mut crate::numerics::rng::DdrRng,
) -> Result<MaskedSequence> {
    for _ in 0..10_000 {
        let out = apply_masking(seq, policy, vocab_size, RESERVED_TOKENS.len(), rng)?;
        if !out.labels.is_empty() {
            return Ok(out);
        }
    }
    Err(DdrError::Invalid(
        "masking kept selecting nothing; check the policy".to_string(),
    ))
}

/// Masked-LM adaptation of a bare backbone on an unlabeled corpus.
pub fn adapt_dam(
    backbone: &EncoderBackbone<f32>,
    docs: &[TokenSequence],
    policy: &MaskingPolicy,
    cfg: &TrainingConfig,
) -> Result<AdaptOutcome> {
    adapt_dam_with_eval(backbone, docs, policy, cfg, 0, |_, _| {
        Ok(f64::NAN) // never called with eval_every = 0
    })
}

/// Like [`adapt_dam`] but evaluates a metric at step 0, every `eval_every`
/// steps, and after the final step. `eval_every = 0` disables evaluation.
pub fn adapt_dam_with_eval(
    backbone: &EncoderBackbone<f32>,
    docs: &[TokenSequence],
    policy: &MaskingPolicy,
    cfg: &TrainingConfig,
    eval_every: usize,
    mut eval: impl FnMut(usize, &EncoderBackbone<f32>) -> Result<f64>,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    policy.validate()?;
    if docs.is_empty() {
        return Err(DdrError::Invalid("adaptation corpus is empty".to_string()));
    }
    let usable: Vec<&TokenSequence> = docs.iter().filter(|d| eligible_positions(d) > 0).collect();
    if usable.is_empty() {
        return Err(DdrError::Invalid(
            "no document has maskable tokens".to_string(),
        ));
    }

    let mut model = backbone.clone();
    apply_phase(model.params_mut(), TrainingPhase::DamAdaptation);
    let mut optimizer = adamw_for(cfg);
    let mut rng = derive(cfg.seed, "adapt-dam");
    let vocab_size = model.config().vocab_size;

    let mut loss_curve = Vec::with_capacity(cfg.steps);
    let mut metric_curve = Vec::new();
    if eval_every > 0 {
        metric_curve.push((0, eval(0, &model)?));
    }

    for step in 0..cfg.steps {
        let batch: Vec<MaskedSequence> = (0..cfg.docs_per_batch)
            .map(|_| {
                let doc = usable[rng.random_range(0..usable.len())];
                masked_draw(doc, policy, vocab_size, &mut rng)
            })
            .collect::<Result<_>>()?;

        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, model.params());
        let loss = mlm_loss(&mut tape, model.config(), None, &bound, &batch)?;
        loss_curve.push((step, f64::from(tape.value(loss).item())));
        let grads = tape.backward(loss)?.to_map(bound.leaves(), model.params())?;
        adamw_step(model.params_mut(), &grads, &mut optimizer)?;

        let done = step + 1;
        if eval_every > 0 && (done % eval_every == 0 || done == cfg.steps) {
            metric_curve.push((done, eval(done, &model)?));
        }
    }

    Ok(AdaptOutcome {
        backbone: model,
        loss_curve,
        metric_curve,
    })
}

/// Target-DAM initializer: copy either the source DAM or the base backbone.
pub fn sequential_init(
    source_dam: &EncoderBackbone<f32>,
    base: &EncoderBackbone<f32>,
    mode: InitMode,
) -> Result<EncoderBackbone<f32>> {
    if source_dam.config() != base.config() {
        return Err(DdrError::ConfigMismatch(
            "source DAM and base backbone configs differ".to_string(),
        ));
    }
    Ok(match mode {
        InitMode::Sequential => source_dam.clone(),
        InitMode::Base => base.clone(),
    })
}

/// Pre-tokenized supervised data: aligned queries, positives, per-query
/// hard negatives, and teacher scores.
#[derive(Debug, Clone)]
pub struct SupervisedExamples {
    pub queries: Vec<TokenSequence>,
    pub positives: Vec<TokenSequence>,
    pub negatives: Vec<Vec<TokenSequence>>,
    pub teacher_pos: Vec<f64>,
    pub teacher_neg: Vec<Vec<f64>>,
}

impl SupervisedExamples {
    /// Tokenize a labeled source domain. Every query pairs with its first
    /// relevant document and the mined hard negatives.
    pub fn from_source(
        source: &SourceDomain,
        vocab: &Vocabulary,
        max_len: usize,
    ) -> Result<Self> {
        let mut out = SupervisedExamples {
            queries: Vec::new(),
            positives: Vec::new(),
            negatives: Vec::new(),
            teacher_pos: Vec::new(),
            teacher_neg: Vec::new(),
        };
        for q in &source.train_queries {
            let relevant = source.train_qrels.relevant_docs(&q.id);
            let Some(&pos_id) = relevant.first() else {
                return Err(DdrError::Invalid(format!(
                    "train query `{}` has no relevant document",
                    q.id
                )));
            };
            let pos_doc = source
                .corpus
                .get(pos_id)
                .ok_or_else(|| DdrError::Invalid(format!("qrels doc `{pos_id}` missing")))?;
            let scores = source.teacher_scores.get(&q.id);
            out.queries.push(tokenize(&q.text, vocab, max_len)?);
            out.positives.push(tokenize(&pos_doc.text, vocab, max_len)?);
            out.teacher_pos.push(
                scores
                    .and_then(|m| m.get(pos_id).copied())
                    .unwrap_or_default(),
            );
            let mut negs = Vec::new();
            let mut tn = Vec::new();
            for neg_id in source.hard_negatives.get(&q.id).into_iter().flatten() {
                let doc = source
                    .corpus
                    .get(neg_id)
                    .ok_or_else(|| DdrError::Invalid(format!("negative `{neg_id}` missing")))?;
                negs.push(tokenize(&doc.text, vocab, max_len)?);
                tn.push(scores.and_then(|m| m.get(neg_id).copied()).unwrap_or_default());
            }
            out.negatives.push(negs);
            out.teacher_neg.push(tn);
        }
        if out.queries.is_empty() {
            return Err(DdrError::Invalid("no supervised examples".to_string()));
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// Supervised training of the relevance module against a frozen backbone.
///
/// Returns the trained REM and the loss curve. The backbone inside the
/// returned assembly is bitwise the one passed in; only `rem.` tensors move.
pub fn train_rem(
    dam: &EncoderBackbone<f32>,
    rem: &RemModule<f32>,
    examples: &SupervisedExamples,
    cfg: &TrainingConfig,
) -> Result<(RemModule<f32>, Vec<(usize, f64)>)> {
    cfg.validate()?;
    let mut assembled = insert_rem(dam, rem)?;
    apply_phase(assembled.params_mut(), TrainingPhase::RemFinetuning);
    let similarity = assembled.config().similarity;
    let mut optimizer = adamw_for(cfg);
    let mut rng = derive(cfg.seed, "train-rem");

    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut next_index = |rng: &mut crate::numerics::rng::DdrRng| {
        if cursor == order.len() {
            order.shuffle(rng);
            cursor = 0;
        }
        let i = order[cursor];
        cursor += 1;
        i
    };

    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let picked: Vec<usize> = (0..cfg.queries_per_batch.min(examples.len()))
            .map(|_| next_index(&mut rng))
            .collect();

        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, assembled.params());
        let enc_cfg = assembled.config();
        let rem_cfg = Some(assembled.rem_config());

        let mut q_embs = Vec::new();
        let mut p_embs = Vec::new();
        let mut n_embs = Vec::new();
        let mut n_owner = Vec::new();
        for &qi in &picked {
            q_embs.push(crate::encoder::pooled_embedding(
                &mut tape,
                enc_cfg,
                rem_cfg,
                &bound,
                &examples.queries[qi],
            )?);
            p_embs.push(crate::encoder::pooled_embedding(
                &mut tape,
                enc_cfg,
                rem_cfg,
                &bound,
                &examples.positives[qi],
            )?);
            for (ni, neg) in examples.negatives[qi]
                .iter()
                .take(cfg.hard_negatives_per_query)
                .enumerate()
            {
                n_embs.push(crate::encoder::pooled_embedding(
                    &mut tape, enc_cfg, rem_cfg, &bound, neg,
                )?);
                n_owner.push((q_embs.len() - 1, qi, ni));
            }
        }

        let loss = match cfg.loss_kind {
            LossKind::Contrastive => {
                contrastive_loss(&mut tape, &q_embs, &p_embs, &n_embs, similarity)?
            }
            LossKind::MarginMse => {
                let mut s_pos = Vec::new();
                let mut s_neg = Vec::new();
                let mut t_pos = Vec::new();
                let mut t_neg = Vec::new();
                for &(local_q, qi, ni) in &n_owner {
                    let sp =
                        similarity_score(&mut tape, q_embs[local_q], p_embs[local_q], similarity)?;
                    let sn = similarity_score(
                        &mut tape,
                        q_embs[local_q],
                        n_embs[s_pos.len()],
                        similarity,
                    )?;
                    s_pos.push(sp);
                    s_neg.push(sn);
                    t_pos.push(examples.teacher_pos[qi]);
                    t_neg.push(examples.teacher_neg[qi][ni]);
                }
                if s_pos.is_empty() {
                    return Err(DdrError::Invalid(
                        "margin_mse requires hard negatives".to_string(),
                    ));
                }
                margin_mse_loss(&mut tape, &s_pos, &s_neg, &t_pos, &t_neg)?
            }
        };
        curve.push((step, f64::from(tape.value(loss).item())));
        let grads = tape
            .backward(loss)?
            .to_map(bound.leaves(), assembled.params())?;
        adamw_step(assembled.params_mut(), &grads, &mut optimizer)?;
    }

    Ok((assembled.rem()?, curve))
}

/// Everything disentangled finetuning needs beyond the data.
#[derive(Debug, Clone)]
pub struct DisentangledConfig {
    pub dam: TrainingConfig,
    pub rem: TrainingConfig,
    pub rem_cfg: RemConfig,
    pub masking: MaskingPolicy,
    pub df_mode: DfMode,
}

pub struct DisentangledOutcome {
    pub source_dam: EncoderBackbone<f32>,
    pub rem: RemModule<f32>,
    pub dam_loss_curve: Vec<(usize, f64)>,
    pub rem_loss_curve: Vec<(usize, f64)>,
}

/// The two-step recipe: adapt a DAM to the training corpus, then freeze it
/// and train a fresh REM on the labeled data. With [`DfMode::Off`] step 1
/// is skipped and the base backbone doubles as the source DAM.
pub fn disentangled_finetune(
    base: &EncoderBackbone<f32>,
    corpus_docs: &[TokenSequence],
    examples: &SupervisedExamples,
    cfg: &DisentangledConfig,
) -> Result<DisentangledOutcome> {
    let (source_dam, dam_loss_curve) = match cfg.df_mode {
        DfMode::On => {
            let out = adapt_dam(base, corpus_docs, &cfg.masking, &cfg.dam)?;
            (out.backbone, out.loss_curve)
        }
        DfMode::Off => (base.clone(), Vec::new()),
    };

    let rem = crate::rem::init_rem(
        &cfg.rem_cfg,
        source_dam.config(),
        &mut derive(cfg.rem.seed, "init-rem"),
    )?;
    let (rem, rem_loss_curve) = train_rem(&source_dam, &rem, examples, &cfg.rem)?;

    Ok(DisentangledOutcome {
        source_dam,
        rem,
        dam_loss_curve,
        rem_loss_curve,
    })
}

/// Tokenize a whole corpus for adaptation.
pub fn corpus_sequences(
    corpus: &crate::corpus::Corpus,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<TokenSequence>> {
    corpus
        .docs()
        .iter()
        .map(|d| tokenize(&d.text, vocab, max_len))
        .collect()
}
