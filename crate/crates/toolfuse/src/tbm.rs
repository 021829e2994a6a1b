//! Training and evaluation of the fusion model over tool stacks.
//!
//! The training loop implements knockout augmentation: for every item the
//! stored selection vector is alpha-perturbed, the complement of the sampled
//! inclusion is knocked out of the stack, and the model sees the masked
//! stack. Validation runs at alpha = 1 against each item's stored selection
//! (the deployment condition) and the best checkpoint by the configured
//! metric is retained. Everything is deterministic given the seed.

use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::knockout::{apply_knockout, KnockoutMask, PlaceholderSpec};
use crate::metrics::{accuracy, compute_auc, MetricKind};
use crate::nn::{
    class_weighted_loss, class_weighted_loss_grad, cosine_lr, sigmoid, AdamW, FusionModel,
    FusionModelConfig,
};
use crate::seed::derive_rng;
use crate::selection::{perturb_selection, SelectionVector};
use crate::toolbox::{InstanceRecord, Toolbox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    ValId,
    ValOod,
    Test,
}

/// One labeled example. Tool stacks and raw images are both optional so the
/// same dataset can feed the fusion model and the raw-pixel baseline; the
/// instance annotations allow re-rasterization (interventions).
#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub image_id: String,
    pub tool_stack: Option<Array3<f64>>,
    pub raw_image: Option<Array3<f64>>,
    pub instances: Vec<InstanceRecord>,
    pub source_size: (usize, usize),
    pub label: u8,
    pub selection: SelectionVector,
}

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub items: Vec<DatasetItem>,
    pub split: Split,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.items.iter().map(|it| it.label).collect()
    }

    /// Positive-class weight `n_neg / n_pos` from this split's labels.
    pub fn pos_weight(&self) -> Result<f64> {
        let n_pos = self.items.iter().filter(|it| it.label == 1).count();
        let n_neg = self.items.len() - n_pos;
        if n_pos == 0 || n_neg == 0 {
            return Err(Error::InvalidInput(
                "pos_weight needs both classes in the split".into(),
            ));
        }
        Ok(n_neg as f64 / n_pos as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Plain binary cross-entropy; for binary labels this is the two-class
    /// cross-entropy under a sigmoid head.
    CrossEntropy,
    ClassWeightedBce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub loss: LossKind,
    pub pos_weight: f64,
    pub alpha: f64,
    pub k: usize,
    pub seed: u64,
    pub checkpoint_metric: MetricKind,
}

impl TrainConfig {
    /// Dermatology-style defaults: cosine schedule over 20 epochs.
    pub fn cosine_defaults(seed: u64) -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 32,
            schedule: Schedule::Cosine,
            loss: LossKind::ClassWeightedBce,
            pos_weight: 1.0,
            alpha: crate::selection::DEFAULT_ALPHA,
            k: crate::selection::DEFAULT_K,
            seed,
            checkpoint_metric: MetricKind::Accuracy,
        }
    }

    /// Histopathology-style defaults: constant lr 1e-4 over 40 epochs.
    pub fn constant_defaults(seed: u64) -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 40,
            schedule: Schedule::Constant,
            ..Self::cosine_defaults(seed)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning_rate must be finite and >= 0".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.pos_weight.is_nan() || self.pos_weight <= 0.0 {
            return Err(Error::InvalidConfig("pos_weight must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig("alpha must lie in [0,1]".into()));
        }
        Ok(())
    }

    fn effective_pos_weight(&self) -> f64 {
        match self.loss {
            LossKind::CrossEntropy => 1.0,
            LossKind::ClassWeightedBce => self.pos_weight,
        }
    }
}

/// How items are turned into model inputs.
#[derive(Clone, Copy)]
pub enum InputSpace<'a> {
    /// Tool stacks with knockout support.
    ToolStack {
        toolbox: &'a Toolbox,
        placeholder: PlaceholderSpec,
    },
    /// Raw image pixels; knockout does not apply.
    RawImage,
}

impl InputSpace<'_> {
    fn item_input(&self, item: &DatasetItem, mask: Option<&KnockoutMask>) -> Result<Array3<f64>> {
        match self {
            InputSpace::ToolStack { toolbox, placeholder } => {
                let stack = item.tool_stack.as_ref().ok_or_else(|| {
                    Error::InvalidInput(format!("item {} has no tool stack", item.image_id))
                })?;
                match mask {
                    Some(m) => apply_knockout(stack, m, toolbox, *placeholder),
                    None => Ok(stack.clone()),
                }
            }
            InputSpace::RawImage => item
                .raw_image
                .clone()
                .ok_or_else(|| Error::InvalidInput(format!("item {} has no raw image", item.image_id))),
        }
    }

    fn n_tools(&self) -> Option<usize> {
        match self {
            InputSpace::ToolStack { toolbox, .. } => Some(toolbox.len()),
            InputSpace::RawImage => None,
        }
    }
}

/// Mask policy used by [`evaluate`].
#[derive(Clone, Copy)]
pub enum MaskPolicy<'a> {
    /// All tools live.
    None,
    /// One fixed mask for every item.
    Fixed(&'a KnockoutMask),
    /// Knock out the complement of each item's stored selection (alpha = 1).
    PerItemSelection,
}

fn mask_for_item(policy: MaskPolicy<'_>, item: &DatasetItem, n_tools: usize) -> KnockoutMask {
    match policy {
        MaskPolicy::None => KnockoutMask::none(n_tools),
        MaskPolicy::Fixed(m) => m.clone(),
        MaskPolicy::PerItemSelection => KnockoutMask::from_inclusion(&item.selection.bits),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    /// `None` marks an undefined AUC (single-class dataset).
    pub auc: Option<f64>,
    pub n: usize,
}

/// Sigmoid probability of the positive class after knockout.
pub fn predict(
    model: &FusionModel,
    stack: &Array3<f64>,
    mask: &KnockoutMask,
    toolbox: &Toolbox,
    placeholder: PlaceholderSpec,
) -> Result<f64> {
    let masked = apply_knockout(stack, mask, toolbox, placeholder)?;
    Ok(sigmoid(model.forward(&masked)?))
}

/// Per-item positive-class probabilities under the given mask policy.
pub fn predict_dataset(
    model: &FusionModel,
    dataset: &LabeledDataset,
    space: InputSpace<'_>,
    policy: MaskPolicy<'_>,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("dataset is empty".into()));
    }
    let mut scores = Vec::with_capacity(dataset.len());
    for item in &dataset.items {
        let input = match space.n_tools() {
            Some(n) => {
                let mask = mask_for_item(policy, item, n);
                space.item_input(item, Some(&mask))?
            }
            None => space.item_input(item, None)?,
        };
        scores.push(sigmoid(model.forward(&input)?));
    }
    Ok(scores)
}

/// Accuracy (threshold 0.5) and AUC of the model on a dataset.
pub fn evaluate(
    model: &FusionModel,
    dataset: &LabeledDataset,
    space: InputSpace<'_>,
    policy: MaskPolicy<'_>,
) -> Result<EvalMetrics> {
    let scores = predict_dataset(model, dataset, space, policy)?;
    let labels = dataset.labels();
    let acc = accuracy(&scores, &labels)?;
    let auc = match compute_auc(&scores, &labels) {
        Ok(v) => Some(v),
        Err(Error::UndefinedAuc) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalMetrics { accuracy: acc, auc, n: dataset.len() })
}

fn metric_value(metrics: &EvalMetrics, kind: MetricKind) -> Result<f64> {
    match kind {
        MetricKind::Accuracy => Ok(metrics.accuracy),
        MetricKind::Auc => metrics.auc.ok_or(Error::UndefinedAuc),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
}

pub fn write_history_jsonl(path: &Path, history: &[HistoryEntry]) -> Result<()> {
    let mut out = String::new();
    for entry in history {
        out.push_str(&serde_json::to_string(entry)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_history_jsonl(path: &Path) -> Result<Vec<HistoryEntry>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Stable hex fingerprint of any serializable config.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serialization");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// A trained model snapshot: flat parameters plus provenance metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: Vec<f64>,
    pub model_config: FusionModelConfig,
    pub config_fingerprint: String,
    pub epoch: usize,
    pub val_metric: f64,
    pub seed: u64,
    pub rng_digest: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model_config: FusionModelConfig,
    config_fingerprint: String,
    epoch: usize,
    val_metric: f64,
    seed: u64,
    rng_digest: String,
    param_count: usize,
}

impl Checkpoint {
    /// Rebuild the model with these exact parameters.
    pub fn restore(&self) -> Result<FusionModel> {
        let mut model = FusionModel::build(self.model_config.clone(), self.seed)?;
        model.set_params_flat(&self.params)?;
        Ok(model)
    }

    /// Write `<base>.bin` (little-endian f64 parameters) and `<base>.json`.
    pub fn save(&self, base: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.params.len() * 8);
        for &p in &self.params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        std::fs::write(base.with_extension("bin"), bytes)?;
        let meta = CheckpointMeta {
            model_config: self.model_config.clone(),
            config_fingerprint: self.config_fingerprint.clone(),
            epoch: self.epoch,
            val_metric: self.val_metric,
            seed: self.seed,
            rng_digest: self.rng_digest.clone(),
            param_count: self.params.len(),
        };
        std::fs::write(base.with_extension("json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(base: &Path) -> Result<Self> {
        let meta: CheckpointMeta =
            serde_json::from_str(&std::fs::read_to_string(base.with_extension("json"))?)?;
        let bytes = std::fs::read(base.with_extension("bin"))?;
        if bytes.len() != meta.param_count * 8 {
            return Err(Error::ParseError(format!(
                "checkpoint blob holds {} bytes, metadata declares {} parameters",
                bytes.len(),
                meta.param_count
            )));
        }
        let params = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            params,
            model_config: meta.model_config,
            config_fingerprint: meta.config_fingerprint,
            epoch: meta.epoch,
            val_metric: meta.val_metric,
            seed: meta.seed,
            rng_digest: meta.rng_digest,
        })
    }
}

/// Train with knockout augmentation; returns the best checkpoint by the
/// configured validation metric and the per-epoch history.
pub fn train(
    model: &mut FusionModel,
    train_set: &LabeledDataset,
    val_set: &LabeledDataset,
    space: InputSpace<'_>,
    config: &TrainConfig,
) -> Result<(Checkpoint, Vec<HistoryEntry>)> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidInput("train and val sets must be nonempty".into()));
    }
    let pos_weight = config.effective_pos_weight();
    let config_fingerprint = fingerprint(&(model.config().clone(), config.clone()));
    let val_policy = match space {
        InputSpace::ToolStack { .. } => MaskPolicy::PerItemSelection,
        InputSpace::RawImage => MaskPolicy::None,
    };

    let mut opt = AdamW::new(model.param_count(), config.weight_decay);
    let mut params = model.params_flat();
    let mut best: Option<Checkpoint> = None;
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = match config.schedule {
            Schedule::Constant => config.learning_rate,
            Schedule::Cosine => cosine_lr(config.learning_rate, epoch, config.epochs),
        };
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut derive_rng(config.seed, &format!("shuffle/{epoch}")));

        let mut loss_sum = 0.0;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let mut logits = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            let mut caches = Vec::with_capacity(batch.len());
            for &idx in batch {
                let item = &train_set.items[idx];
                let input = match space.n_tools() {
                    Some(_) => {
                        // Per-(seed, epoch, item) stream: schedule-independent.
                        let mut rng =
                            derive_rng(config.seed, &format!("perturb/{epoch}/{}", item.image_id));
                        let include = perturb_selection(&item.selection, config.alpha, &mut rng)?;
                        let mask = KnockoutMask::from_inclusion(&include);
                        space.item_input(item, Some(&mask))?
                    }
                    None => space.item_input(item, None)?,
                };
                let (logit, cache) = model.forward_cached(&input)?;
                if !logit.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: batch_idx });
                }
                logits.push(logit);
                labels.push(item.label);
                caches.push(cache);
            }
            let loss = class_weighted_loss(&logits, &labels, pos_weight)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: batch_idx });
            }
            loss_sum += loss * batch.len() as f64;
            let d_logits = class_weighted_loss_grad(&logits, &labels, pos_weight);
            let mut grads = vec![0.0; params.len()];
            for (cache, d_logit) in caches.iter().zip(&d_logits) {
                let g = model.backward(cache, *d_logit);
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    *acc += gi;
                }
            }
            opt.step(&mut params, &grads, lr);
            model.set_params_flat(&params)?;
        }
        let train_loss = loss_sum / train_set.len() as f64;

        let val_metrics = evaluate(model, val_set, space, val_policy)?;
        let val_metric = metric_value(&val_metrics, config.checkpoint_metric)?;
        history.push(HistoryEntry { epoch, train_loss, val_metric });

        if best.as_ref().is_none_or(|b| val_metric > b.val_metric) {
            let rng_digest = fingerprint(&(config.seed, epoch));
            best = Some(Checkpoint {
                params: params.clone(),
                model_config: model.config().clone(),
                config_fingerprint: config_fingerprint.clone(),
                epoch,
                val_metric,
                seed: config.seed,
                rng_digest,
            });
        }
    }
    Ok((best.expect("epochs >= 1"), history))
}
