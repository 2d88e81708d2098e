use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainingError;

fn by_class(labels: &[usize]) -> Result<Vec<Vec<usize>>, TrainingError> {
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    let mut classes = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        classes[l].push(i);
    }
    if let Some(c) = classes.iter().position(Vec::is_empty) {
        return Err(TrainingError::EmptyClass(c));
    }
    Ok(classes)
}

/// Splits indices `0..labels.len()` into `(train, validation)`, both sorted.
///
/// Per-class train counts are `floor(ratio * n_c)` plus one extra sample for
/// the classes with the largest fractional remainders (lowest class index
/// first on ties) until the total reaches `round(ratio * n)`.
pub fn stratified_split(labels: &[usize], ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), TrainingError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(TrainingError::InvalidConfig(format!("split ratio {ratio} outside [0, 1]")));
    }
    if labels.is_empty() {
        return Err(TrainingError::EmptyClass(0));
    }
    let mut classes = by_class(labels)?;
    let quotas: Vec<f64> = classes.iter().map(|c| ratio * c.len() as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let target = (ratio * labels.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..classes.len()).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let mut missing = target.saturating_sub(counts.iter().sum());
    for &c in order.iter().cycle().take(order.len() * 2) {
        if missing == 0 {
            break;
        }
        if counts[c] < classes[c].len() {
            counts[c] += 1;
            missing -= 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (members, &n) in classes.iter_mut().zip(&counts) {
        members.shuffle(&mut rng);
        train.extend_from_slice(&members[..n]);
        val.extend_from_slice(&members[n..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Fold assignment for every sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub k: usize,
    pub seed: u64,
    /// `folds[i]` is the fold that holds sample `i` out.
    pub folds: Vec<usize>,
}

impl SplitPlan {
    pub fn val_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] != fold).collect()
    }
}

/// Per class, a seeded shuffle followed by round-robin dealing. The dealing
/// position carries over between classes so fold sizes stay balanced too.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<SplitPlan, TrainingError> {
    if k == 0 {
        return Err(TrainingError::InvalidConfig("k must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0; labels.len()];
    let mut next = 0;
    let k_classes = labels.iter().max().map_or(0, |&m| m + 1);
    for class in 0..k_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        for i in members {
            folds[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok(SplitPlan { k, seed, folds })
}
