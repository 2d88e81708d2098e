//! Label mapping, splits, the epoch loop and k-fold ensemble production.

mod split;

pub use split::{stratified_kfold, stratified_split, SplitPlan};

use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{write_checkpoint_file, Model, ModelConfig, ModelError};
use crate::numerics::{adamw_step, cosine_lr, AdamWConfig, Graph, NumericsError, OptimizerState, ParamGrads, ScheduleConfig};
use crate::preprocess::{augment, augment_strength_for, CaseBundle};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("stage {0} outside 1..=4")]
    BadStage(u8),
    #[error("case {0} has no stage label")]
    MissingStage(String),
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("fold {0} has an empty training partition")]
    EmptyFold(usize),
    #[error("non-finite loss in fold {fold}, epoch {epoch}")]
    NonFiniteLoss { fold: usize, epoch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Classification target derived from the fibrosis stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// S1–S3 vs S4.
    Cirrhosis,
    /// S1 vs S2–S4.
    Substantial,
    /// S1..S4 as classes 0..3.
    FourClass,
}

impl Task {
    pub fn num_classes(self) -> usize {
        match self {
            Task::FourClass => 4,
            _ => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Cirrhosis => "cirrhosis",
            Task::Substantial => "substantial",
            Task::FourClass => "four_class",
        }
    }
}

impl FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cirrhosis" => Ok(Task::Cirrhosis),
            "substantial" => Ok(Task::Substantial),
            "four_class" => Ok(Task::FourClass),
            _ => Err(format!("unknown task {s:?}; expected cirrhosis, substantial or four_class")),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub fn remap_labels(stage: u8, task: Task) -> Result<usize, TrainingError> {
    if !(1..=4).contains(&stage) {
        return Err(TrainingError::BadStage(stage));
    }
    Ok(match task {
        Task::Cirrhosis => usize::from(stage == 4),
        Task::Substantial => usize::from(stage != 1),
        Task::FourClass => stage as usize - 1,
    })
}

/// Labels for every bundle; fails on unlabeled cases.
pub fn bundle_labels(bundles: &[CaseBundle], task: Task) -> Result<Vec<usize>, TrainingError> {
    bundles
        .iter()
        .map(|b| {
            let s = b.stage.ok_or_else(|| TrainingError::MissingStage(b.case_id.clone()))?;
            remap_labels(s, task)
        })
        .collect()
}

/// `-log softmax(logits)[label]`, max-shifted.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64, TrainingError> {
    if label >= logits.len() {
        return Err(TrainingError::BadLabel { label, classes: logits.len() });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub folds: usize,
    /// Apply seeded augmentation with the size-dependent strength policy.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-4, lr_min: 1e-6, weight_decay: 1e-3, epochs: 100, patience: 30, batch_size: 8, folds: 4, augment: true }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |m: String| Err(TrainingError::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.patience > self.epochs {
            return bad(format!("patience {} exceeds epochs {}", self.patience, self.epochs));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.folds < 2 {
            return bad(format!("folds must be >= 2, got {}", self.folds));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        self.schedule().validate()?;
        Ok(())
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig { lr_max: self.lr, lr_min: self.lr_min, total_epochs: self.epochs }
    }
}

/// Patience-based stopping on strict improvement of the validation loss.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<(usize, f64)>,
    pub since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, since_best: 0 }
    }

    /// Records an epoch; returns true when it is a new best.
    pub fn update(&mut self, epoch: usize, loss: f64) -> bool {
        match self.best {
            Some((_, b)) if loss >= b => {
                self.since_best += 1;
                false
            }
            _ => {
                self.best = Some((epoch, loss));
                self.since_best = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.patience > 0 && self.since_best >= self.patience
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

/// SplitMix64 step, used to derive independent seeds from one master seed.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Loss and gradients for one sample on a training graph.
fn sample_step(model: &Model, bundle: &CaseBundle, label: usize, dropout_seed: u64) -> Result<(f64, ParamGrads), TrainingError> {
    let mut g = Graph::training(dropout_seed);
    let logits = model.forward(&mut g, bundle)?;
    let loss = g.cross_entropy(logits, label)?;
    let value = g.value(loss).data()[0];
    let grads = g.backward(loss)?;
    Ok((value, grads))
}

/// Mean inference-mode cross-entropy.
pub fn mean_loss(model: &Model, bundles: &[&CaseBundle], labels: &[usize]) -> Result<f64, TrainingError> {
    let losses = bundles
        .par_iter()
        .zip(labels.par_iter())
        .map(|(b, &l)| cross_entropy(&model.logits(b)?, l))
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Trains one fold of `plan`. When `checkpoint` is given, the best model so
/// far is written there every time the validation loss strictly improves.
pub fn train_fold(
    bundles: &[CaseBundle],
    labels: &[usize],
    fold: usize,
    plan: &SplitPlan,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
    checkpoint: Option<&Path>,
) -> Result<FoldResult, TrainingError> {
    cfg.validate()?;
    let train_idx = plan.train_indices(fold);
    let val_idx = plan.val_indices(fold);
    if train_idx.is_empty() {
        return Err(TrainingError::EmptyFold(fold));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= model_cfg.num_classes) {
        return Err(TrainingError::BadLabel { label: l, classes: model_cfg.num_classes });
    }
    let mut model = Model::new(model_cfg.clone(), derive_seed(seed, 0))?;
    let mut opt = OptimizerState::new(&model.params, AdamWConfig { weight_decay: cfg.weight_decay, ..Default::default() });
    let schedule = cfg.schedule();
    let strength = if cfg.augment { augment_strength_for(train_idx.len()) } else { 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let (val_bundles, val_labels): (Vec<&CaseBundle>, Vec<usize>) = val_idx.iter().map(|&i| (&bundles[i], labels[i])).unzip();

    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.clone();
    let mut history = Vec::new();
    let mut order = train_idx.clone();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, &schedule)?;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let jobs: Vec<(usize, u64, u64)> = batch.iter().map(|&i| (i, rng.gen(), rng.gen())).collect();
            let results = jobs
                .par_iter()
                .map(|&(i, aug_seed, drop_seed)| {
                    let sample = augment(&bundles[i], aug_seed, strength);
                    sample_step(&model, &sample, labels[i], drop_seed)
                })
                .collect::<Result<Vec<_>, _>>()?;
            model.params.zero_grad();
            for (loss, grads) in &results {
                loss_sum += loss;
                model.params.accumulate(grads);
            }
            model.params.scale_grads(1.0 / batch.len() as f64);
            adamw_step(&mut model.params, &mut opt, lr)?;
        }
        let train_loss = loss_sum / order.len() as f64;
        let val_loss = if val_bundles.is_empty() { train_loss } else { mean_loss(&model, &val_bundles, &val_labels)? };
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(TrainingError::NonFiniteLoss { fold, epoch });
        }
        history.push(EpochRecord { epoch, train_loss, val_loss, lr });
        log::debug!("fold={fold} epoch={epoch} train_loss={train_loss:.6} val_loss={val_loss:.6} lr={lr:.3e}");
        if stopper.update(epoch, val_loss) {
            best = model.clone();
            if let Some(path) = checkpoint {
                write_checkpoint_file(path, &best)?;
            }
        }
        if stopper.should_stop() {
            break;
        }
    }
    let (best_epoch, best_val_loss) = stopper.best.expect("at least one epoch ran");
    best.params.zero_grad();
    Ok(FoldResult { fold, model: best, history, best_epoch, best_val_loss, train_indices: train_idx, val_indices: val_idx })
}

#[derive(Clone, Debug)]
pub struct CvResult {
    pub plan: SplitPlan,
    pub folds: Vec<FoldResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldManifest {
    pub fold: usize,
    pub checkpoint: String,
    pub history: String,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvManifest {
    pub task: Task,
    pub seed: u64,
    pub k: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub folds: Vec<FoldManifest>,
}

/// Stratified k-fold training, one model per fold, folds in parallel. With
/// `out_dir`, writes `fold_{k}.ckpt`, `history_fold_{k}.csv` and
/// `manifest.json`.
pub fn train_cv(
    bundles: &[CaseBundle],
    task: Task,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<CvResult, TrainingError> {
    cfg.validate()?;
    if model_cfg.num_classes != task.num_classes() {
        return Err(TrainingError::InvalidConfig(format!(
            "task {task} needs {} classes, model has {}",
            task.num_classes(),
            model_cfg.num_classes
        )));
    }
    let labels = bundle_labels(bundles, task)?;
    let plan = stratified_kfold(&labels, cfg.folds, derive_seed(seed, 0))?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let folds = (0..cfg.folds)
        .into_par_iter()
        .map(|f| {
            let ckpt = out_dir.map(|d| d.join(format!("fold_{f}.ckpt")));
            train_fold(bundles, &labels, f, &plan, model_cfg, cfg, derive_seed(seed, 1 + f as u64), ckpt.as_deref())
        })
        .collect::<Result<Vec<_>, _>>()?;
    let result = CvResult { plan, folds };
    if let Some(dir) = out_dir {
        write_cv_outputs(dir, bundles, task, model_cfg, cfg, seed, &result)?;
    }
    Ok(result)
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<(), TrainingError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_cv_outputs(
    dir: &Path,
    bundles: &[CaseBundle],
    task: Task,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
    result: &CvResult,
) -> Result<(), TrainingError> {
    let ids = |idx: &[usize]| idx.iter().map(|&i| bundles[i].case_id.clone()).collect::<Vec<_>>();
    let mut folds = Vec::new();
    for f in &result.folds {
        let ckpt = format!("fold_{}.ckpt", f.fold);
        let hist = format!("history_fold_{}.csv", f.fold);
        write_checkpoint_file(dir.join(&ckpt), &f.model)?;
        write_history_csv(&dir.join(&hist), &f.history)?;
        folds.push(FoldManifest {
            fold: f.fold,
            checkpoint: ckpt,
            history: hist,
            best_epoch: f.best_epoch,
            best_val_loss: f.best_val_loss,
            epochs_run: f.history.len(),
            train_ids: ids(&f.train_indices),
            val_ids: ids(&f.val_indices),
        });
    }
    let manifest = CvManifest { task, seed, k: cfg.folds, model: model_cfg.clone(), train: cfg.clone(), folds };
    let mut file = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut file, &manifest)?;
    file.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_maps() {
        assert_eq!(remap_labels(4, Task::Cirrhosis).unwrap(), 1);
        assert_eq!(remap_labels(3, Task::Cirrhosis).unwrap(), 0);
        assert_eq!(remap_labels(1, Task::Substantial).unwrap(), 0);
        assert_eq!(remap_labels(2, Task::Substantial).unwrap(), 1);
        assert_eq!(remap_labels(3, Task::FourClass).unwrap(), 2);
        assert!(matches!(remap_labels(0, Task::FourClass), Err(TrainingError::BadStage(0))));
        assert!(matches!(remap_labels(5, Task::Cirrhosis), Err(TrainingError::BadStage(5))));
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((cross_entropy(&[0.0, 0.0], 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(cross_entropy(&[1000.0, 0.0], 0).unwrap().abs() < 1e-12);
        assert!((cross_entropy(&[1.0, 2.0, 3.0], 2).unwrap() - 0.407_605_96).abs() < 1e-6);
        assert!(matches!(cross_entropy(&[1.0], 1), Err(TrainingError::BadLabel { .. })));
    }

    #[test]
    fn early_stopping_rule() {
        let mut s = EarlyStopping::new(30);
        let mut stopped_at = None;
        for epoch in 1..=100 {
            let loss = if epoch <= 5 { 1.0 / epoch as f64 } else { 1.0 };
            s.update(epoch, loss);
            if s.should_stop() {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(35));
        assert_eq!(s.best, Some((5, 0.2)));
    }

    #[test]
    fn ties_keep_the_earlier_best() {
        let mut s = EarlyStopping::new(3);
        assert!(s.update(0, 0.5));
        assert!(!s.update(1, 0.5));
        assert_eq!(s.best, Some((0, 0.5)));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { patience: 200, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn task_parsing() {
        for t in [Task::Cirrhosis, Task::Substantial, Task::FourClass] {
            assert_eq!(t.name().parse::<Task>().unwrap(), t);
        }
        assert!("liver".parse::<Task>().is_err());
    }
}
