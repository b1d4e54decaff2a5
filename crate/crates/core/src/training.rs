//! Teacher-forced training with Adam, value clipping and checkpointing.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::autodiff::{Grads, Graph, ParamStore};
use crate::decoding::{greedy_decode, StepScorer};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, FunctionInput, Model, ModelConfig, StepKind, Tasks};
use crate::typelib::UNKNOWN_ID;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Gradients are clipped elementwise to `[-clip, clip]`.
    pub clip: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Stop once training-set accuracy of every trained task reaches this.
    pub target_train_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip: 1.0,
            epochs: 15,
            seed: 0,
            target_train_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("epsilon", self.epsilon),
            ("clip", self.clip),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    Small,
    NoDataLayout,
    TypeOnly,
    NameOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::Small,
        Variant::NoDataLayout,
        Variant::TypeOnly,
        Variant::NameOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Small => "small",
            Variant::NoDataLayout => "no_data_layout",
            Variant::TypeOnly => "type_only",
            Variant::NameOnly => "name_only",
        }
    }

    /// Training epochs listed for the variant's size.
    pub fn default_epochs(self) -> usize {
        match self {
            Variant::Small => 30,
            _ => 15,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`; expected one of full, small, no_data_layout, type_only, name_only")))
    }
}

/// Adjusts `base` for an ablation. `full` and `small` set the architecture
/// sizes; the other variants change only the layout mask or task flags.
pub fn build_ablation(base: &ModelConfig, variant: Variant) -> ModelConfig {
    let mut c = base.clone();
    match variant {
        Variant::Full => {
            c.n_enc_layers = 6;
            c.n_dec_layers = 6;
            c.d_model = 512;
            c.n_heads = 8;
            c.n_layout_layers = 3;
            c.layout_d_model = 256;
            c.d_ff = 4 * c.d_model;
            c.use_layout_mask = true;
            c.tasks = Tasks::Both;
        }
        Variant::Small => {
            c.n_enc_layers = 3;
            c.n_dec_layers = 3;
            c.d_model = 256;
            c.n_heads = 4;
            c.n_layout_layers = 3;
            c.layout_d_model = 128;
            c.d_ff = 4 * c.d_model;
            c.use_layout_mask = true;
            c.tasks = Tasks::Both;
        }
        Variant::NoDataLayout => c.use_layout_mask = false,
        Variant::TypeOnly => c.tasks = Tasks::Type,
        Variant::NameOnly => c.tasks = Tasks::Name,
    }
    c
}

/// Adam moments for every parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let z = Grads::zeros(store).0;
        Adam {
            m: z.clone(),
            v: z,
            t: 0,
        }
    }

    /// Clips `grads` by value in place, then applies one update.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut Grads, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = &mut grads.0[i];
            g.mapv_inplace(|x| x.clamp(-cfg.clip, cfg.clip));
            Zip::from(store.get_mut(id))
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(&*g)
                .for_each(|p, m, v, &g| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    *p -= cfg.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + cfg.epsilon);
                });
        }
    }
}

/// Mean loss and gradients of one batch under teacher forcing.
pub fn batch_gradients(model: &Model, batch: &[FunctionInput], training: bool, seed: u64) -> Result<Option<(f64, Grads)>> {
    let mut grads = Grads::zeros(&model.params);
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, f) in batch.iter().enumerate() {
        let mut g = Graph::new(&model.params, training, seed.wrapping_add(i as u64));
        if let Some((loss, n)) = model.loss_sum(&mut g, f)? {
            total += g.scalar(loss);
            count += n;
            g.backward_into(loss, &mut grads);
        }
    }
    if count == 0 {
        return Ok(None);
    }
    grads.scale(1.0 / count as f64);
    Ok(Some((total / count as f64, grads)))
}

/// Micro accuracy of greedy predictions against gold labels for one task.
/// Unknown-sentinel gold types always count as wrong.
pub fn greedy_accuracy(model: &Model, data: &[FunctionInput], kind: StepKind) -> Result<Option<f64>> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for f in data {
        if f.vars.is_empty() {
            continue;
        }
        let session = model.session(f)?;
        let best = greedy_decode(&session)?;
        for (step, &label) in session.plan().iter().zip(&best.labels) {
            if step.kind != kind {
                continue;
            }
            let v = &f.vars[step.var];
            let gold = match kind {
                StepKind::Type => v.gold_type,
                StepKind::Name if v.component => None,
                StepKind::Name => v.gold_name,
            };
            let Some(gold) = gold else { continue };
            total += 1;
            if label == gold && !(kind == StepKind::Type && gold == UNKNOWN_ID) {
                correct += 1;
            }
        }
    }
    Ok((total > 0).then(|| correct as f64 / total as f64))
}

/// Task used to pick the best checkpoint.
pub fn selection_task(tasks: Tasks) -> StepKind {
    match tasks {
        Tasks::Name => StepKind::Name,
        Tasks::Both | Tasks::Type => StepKind::Type,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_accuracy: Option<BTreeMap<String, f64>>,
}

/// Where checkpoints and the log go, and the data they are pinned to.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub dir: PathBuf,
    pub data_hashes: BTreeMap<String, String>,
}

impl TrainOutputs {
    pub fn epoch_path(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch:03}.ckpt.json"))
    }

    pub fn best_path(&self) -> PathBuf {
        self.dir.join("best.ckpt.json")
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_valid_accuracy: Option<f64>,
}

fn append_log(path: &Path, record: &EpochRecord) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(record).map_err(|e| Error::Model(e.to_string()))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Trains `model` in place. Per-epoch and best-on-validation checkpoints are
/// written when `outputs` is given.
pub fn train(
    model: &mut Model,
    train_set: &[FunctionInput],
    valid_set: &[FunctionInput],
    cfg: &TrainConfig,
    outputs: Option<&TrainOutputs>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if let Some(o) = outputs {
        std::fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
        let log = o.log_path();
        if log.exists() {
            std::fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
        }
    }
    let mut adam = Adam::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0usize;
    let mut history = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let task = selection_task(model.config.tasks);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<FunctionInput> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let seed = cfg.seed ^ ((step as u64 + 1) << 20);
            let Some((loss, mut grads)) = batch_gradients(model, &batch, true, seed)? else {
                continue;
            };
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("loss {loss} at epoch {epoch}, step {step}")));
            }
            adam.step(&mut model.params, &mut grads, cfg);
            step += 1;
            loss_sum += loss;
            batches += 1;
        }
        let loss = if batches == 0 { 0.0 } else { loss_sum / batches as f64 };
        let valid_accuracy = if valid_set.is_empty() {
            None
        } else {
            greedy_accuracy(model, valid_set, task)?
        };
        let mut train_accuracy = None;
        let mut reached = false;
        if let Some(target) = cfg.target_train_accuracy {
            let mut accs = BTreeMap::new();
            let kinds: &[StepKind] = match model.config.tasks {
                Tasks::Both => &[StepKind::Type, StepKind::Name],
                Tasks::Type => &[StepKind::Type],
                Tasks::Name => &[StepKind::Name],
            };
            reached = true;
            for &k in kinds {
                let a = greedy_accuracy(model, train_set, k)?.unwrap_or(1.0);
                reached &= a >= target;
                accs.insert(format!("{k:?}").to_lowercase(), a);
            }
            train_accuracy = Some(accs);
        }
        let record = EpochRecord {
            epoch,
            step,
            loss,
            valid_accuracy,
            train_accuracy,
        };
        info!(epoch, step, loss, valid = ?valid_accuracy, "epoch finished");
        if let Some(o) = outputs {
            append_log(&o.log_path(), &record)?;
            let mut ck = Checkpoint::from_model(model, o.data_hashes.clone());
            ck.epoch = Some(epoch);
            ck.valid_accuracy = valid_accuracy;
            ck.save(&o.epoch_path(epoch))?;
            let improved = match (valid_accuracy, best) {
                (Some(a), Some((_, b))) => a > b,
                (Some(_), None) => true,
                (None, _) => true,
            };
            if improved {
                ck.save(&o.best_path())?;
            }
        }
        if let Some(a) = valid_accuracy {
            if best.is_none_or(|(_, b)| a > b) {
                best = Some((epoch, a));
            }
        }
        history.push(record);
        if reached {
            break;
        }
    }
    Ok(TrainSummary {
        history,
        best_epoch: best.map(|b| b.0),
        best_valid_accuracy: best.map(|b| b.1),
    })
}
