//! The relevance estimation module: insertable bottleneck networks.
//!
//! Two kinds of network, both reading hidden states through a bottleneck and
//! adding their output back into the backbone: low-rank deltas `s·(A·B)` on
//! the Wq/Wv attention projections (mergeable, zero inference overhead), and
//! parallel adapters beside each feed-forward sub-layer (small runtime
//! additions). The module owns the `rem.` parameter namespace, disjoint from
//! the backbone's `dam.`, and serializes independently of any backbone.

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderBackbone, EncoderConfig, TokenSequence};
use crate::error::{DdrError, Result};
use crate::numerics::rng::{normal_tensor, DdrRng};
use crate::numerics::{ParamSet, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemConfig {
    /// Rank of the attention deltas; 0 disables them.
    pub lora_rank: usize,
    /// Delta scale is `lora_alpha / lora_rank`.
    pub lora_alpha: f64,
    /// Bottleneck width of the parallel adapters; 0 disables them.
    pub pa_bottleneck: usize,
    pub pa_scale: f64,
}

impl Default for RemConfig {
    /// Desk-scale counterpart of the 192 & 192 bottlenecks on BERT-base:
    /// rank and bottleneck at one quarter of the default hidden dim.
    fn default() -> Self {
        RemConfig {
            lora_rank: 16,
            lora_alpha: 16.0,
            pa_bottleneck: 16,
            pa_scale: 1.0,
        }
    }
}

impl RemConfig {
    /// Attention matrices that receive a low-rank delta.
    pub const LORA_TARGETS: usize = 2;

    pub fn lora_targets() -> [&'static str; Self::LORA_TARGETS] {
        ["wq", "wv"]
    }

    pub fn lora_scale(&self) -> f64 {
        if self.lora_rank == 0 {
            0.0
        } else {
            self.lora_alpha / self.lora_rank as f64
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lora_rank == 0 && self.pa_bottleneck == 0 {
            return Err(DdrError::Invalid(
                "REM with neither low-rank deltas nor adapters".to_string(),
            ));
        }
        if self.lora_rank > 0 && (self.lora_alpha <= 0.0 || !self.lora_alpha.is_finite()) {
            return Err(DdrError::Invalid(format!("lora_alpha {}", self.lora_alpha)));
        }
        if self.pa_bottleneck > 0 && !self.pa_scale.is_finite() {
            return Err(DdrError::Invalid(format!("pa_scale {}", self.pa_scale)));
        }
        Ok(())
    }
}

/// Parameter paths for the REM namespace.
pub(crate) mod rem_names {
    pub fn lora(layer: usize, target: &str, which: &str) -> String {
        format!("rem.layer.{layer}.lora.{target}.{which}")
    }
    pub fn pa(layer: usize, which: &str) -> String {
        format!("rem.layer.{layer}.pa.{which}")
    }
}

/// A relevance module detached from any backbone.
#[derive(Debug, Clone)]
pub struct RemModule<F: Scalar> {
    cfg: RemConfig,
    num_layers: usize,
    hidden_dim: usize,
    params: ParamSet<F>,
}

impl<F: Scalar> RemModule<F> {
    pub fn config(&self) -> &RemConfig {
        &self.cfg
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn cast<G: Scalar>(&self) -> RemModule<G> {
        RemModule {
            cfg: self.cfg.clone(),
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
            params: self.params.cast(),
        }
    }

    /// Rebuild from deserialized tensors, checking shapes against the config.
    pub fn from_params(
        cfg: RemConfig,
        num_layers: usize,
        hidden_dim: usize,
        params: ParamSet<F>,
    ) -> Result<Self> {
        let reference: RemModule<F> = init_rem_with_dims(
            &cfg,
            num_layers,
            hidden_dim,
            &mut crate::numerics::rng::seeded(0),
        )?;
        if reference.params.len() != params.len() {
            return Err(DdrError::ConfigMismatch(format!(
                "REM expects {} tensors, got {}",
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
        Ok(RemModule {
            cfg,
            num_layers,
            hidden_dim,
            params,
        })
    }
}

/// Freshly initialized REM for a backbone of the given encoder config.
///
/// `A` and `down` get Kaiming-style draws (variance 2/d); `B` and `up` start
/// at zero, so inserting the module is output-preserving at step 0.
pub fn init_rem<F: Scalar>(
    cfg: &RemConfig,
    enc: &EncoderConfig,
    rng: &mut DdrRng,
) -> Result<RemModule<F>> {
    init_rem_with_dims(cfg, enc.num_layers, enc.hidden_dim, rng)
}

fn init_rem_with_dims<F: Scalar>(
    cfg: &RemConfig,
    num_layers: usize,
    hidden_dim: usize,
    rng: &mut DdrRng,
) -> Result<RemModule<F>> {
    cfg.validate()?;
    let d = hidden_dim;
    let std = (2.0 / d as f64).sqrt();
    let mut params = ParamSet::new();
    for layer in 0..num_layers {
        if cfg.lora_rank > 0 {
            for target in RemConfig::lora_targets() {
                params.insert(
                    &rem_names::lora(layer, target, "a"),
                    normal_tensor(&[d, cfg.lora_rank], std, rng),
                    true,
                )?;
                params.insert(
                    &rem_names::lora(layer, target, "b"),
                    Tensor::zeros(&[cfg.lora_rank, d]),
                    true,
                )?;
            }
        }
        if cfg.pa_bottleneck > 0 {
            params.insert(
                &rem_names::pa(layer, "down"),
                normal_tensor(&[d, cfg.pa_bottleneck], std, rng),
                true,
            )?;
            params.insert(
                &rem_names::pa(layer, "up"),
                Tensor::zeros(&[cfg.pa_bottleneck, d]),
                true,
            )?;
        }
    }
    Ok(RemModule {
        cfg: cfg.clone(),
        num_layers,
        hidden_dim,
        params,
    })
}

/// Backbone plus inserted REM. The two parameter namespaces share one set
/// so a single optimizer update can see either side of the partition.
#[derive(Debug, Clone)]
pub struct AssembledModel<F: Scalar> {
    enc_cfg: EncoderConfig,
    rem_cfg: RemConfig,
    params: ParamSet<F>,
}

/// Insert a REM into a backbone; backbone weights are copied untouched.
pub fn insert_rem<F: Scalar>(
    backbone: &EncoderBackbone<F>,
    rem: &RemModule<F>,
) -> Result<AssembledModel<F>> {
    let cfg = backbone.config();
    if rem.num_layers != cfg.num_layers || rem.hidden_dim != cfg.hidden_dim {
        return Err(DdrError::ConfigMismatch(format!(
            "REM built for {} layers x {} dims, backbone has {} x {}",
            rem.num_layers, rem.hidden_dim, cfg.num_layers, cfg.hidden_dim
        )));
    }
    let mut params = backbone.params().clone();
    params.merge(rem.params.clone())?;
    Ok(AssembledModel {
        enc_cfg: cfg.clone(),
        rem_cfg: rem.cfg.clone(),
        params,
    })
}

impl<F: Scalar> AssembledModel<F> {
    pub fn config(&self) -> &EncoderConfig {
        &self.enc_cfg
    }

    pub fn rem_config(&self) -> &RemConfig {
        &self.rem_cfg
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    pub fn encode(&self, seq: &TokenSequence) -> Result<Vec<F>> {
        crate::encoder::forward_encode(&self.enc_cfg, Some(&self.rem_cfg), &self.params, seq)
    }

    /// Copy of the backbone half.
    pub fn backbone(&self) -> Result<EncoderBackbone<F>> {
        EncoderBackbone::from_params(self.enc_cfg.clone(), self.params.subset("dam."))
    }

    /// Copy of the REM half.
    pub fn rem(&self) -> Result<RemModule<F>> {
        RemModule::from_params(
            self.rem_cfg.clone(),
            self.enc_cfg.num_layers,
            self.enc_cfg.hidden_dim,
            self.params.subset("rem."),
        )
    }

    /// Fold the low-rank deltas into the attention weights.
    ///
    /// Returns an assembly whose backbone carries `W + s·(A·B)` and whose
    /// REM keeps only runtime additions (the `B` factors are zeroed, so the
    /// folded deltas no longer contribute). Folding a delta that is already
    /// zero is skipped outright, which makes a second merge a bitwise no-op.
    pub fn merge_lora(&self) -> Result<AssembledModel<F>> {
        let mut merged = self.clone();
        let d = self.enc_cfg.hidden_dim;
        let rank = self.rem_cfg.lora_rank;
        if rank == 0 {
            return Ok(merged);
        }
        let scale = F::from_f64(self.rem_cfg.lora_scale());
        for layer in 0..self.enc_cfg.num_layers {
            for target in RemConfig::lora_targets() {
                let a = self.params.tensor(&rem_names::lora(layer, target, "a"))?;
                let b = self.params.tensor(&rem_names::lora(layer, target, "b"))?;
                if b.data().iter().all(|&v| v == F::zero()) {
                    continue;
                }
                let delta =
                    crate::numerics::matmul_for_merge(a.data(), b.data(), d, rank, d);
                let wname = crate::encoder::names::attn(layer, target);
                let w = merged
                    .params
                    .get_mut(&wname)
                    .ok_or_else(|| DdrError::MissingParam(wname.clone()))?;
                for (wv, dv) in w.tensor.data_mut().iter_mut().zip(&delta) {
                    *wv = *wv + scale * *dv;
                }
                let bname = rem_names::lora(layer, target, "b");
                let bt = merged.params.get_mut(&bname).unwrap();
                for v in bt.tensor.data_mut() {
                    *v = F::zero();
                }
            }
        }
        Ok(merged)
    }
}

/// Which half of the model a training phase updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingPhase {
    /// Unsupervised adaptation: backbone plus MLM head train, REM (if any)
    /// is frozen.
    DamAdaptation,
    /// Supervised relevance training: only the REM namespace trains.
    RemFinetuning,
}

/// Split parameter names into (trainable, frozen) for a phase.
pub fn partition_parameters<F: Scalar>(
    params: &ParamSet<F>,
    phase: TrainingPhase,
) -> (Vec<String>, Vec<String>) {
    let trainable_prefix = match phase {
        TrainingPhase::DamAdaptation => "dam.",
        TrainingPhase::RemFinetuning => "rem.",
    };
    let mut trainable = Vec::new();
    let mut frozen = Vec::new();
    for name in params.names() {
        if name.starts_with(trainable_prefix) {
            trainable.push(name);
        } else {
            frozen.push(name);
        }
    }
    (trainable, frozen)
}

/// Set the trainable flags according to the phase partition.
pub fn apply_phase<F: Scalar>(params: &mut ParamSet<F>, phase: TrainingPhase) {
    let (trainable, frozen) = partition_parameters(params, phase);
    for name in trainable {
        if let Some(p) = params.get_mut(&name) {
            p.trainable = true;
        }
    }
    for name in frozen {
        if let Some(p) = params.get_mut(&name) {
            p.trainable = false;
        }
    }
}
