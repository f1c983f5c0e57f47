//! Loss, Adam and the seeded training loop with early stopping.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{param_slots, CnnDetector, ModelError, Standardizer, ARCHITECTURE, INPUT_SHAPE, NUM_PARAMS, PROB_CLAMP};
use crate::dataset::LabeledFeatureSet;

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Binary cross-entropy on the clamped probability.
pub fn bce_loss(p: f64, y: u8) -> f64 {
    let p = clamp_prob(p);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// dL/dp of the clamped loss; zero where the clamp is active.
pub fn bce_grad_p(p: f64, y: u8) -> f64 {
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
        return 0.0;
    }
    let y = f64::from(y);
    -y / p + (1.0 - y) / (1.0 - p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.learning_rate) || !pos(self.epsilon) {
            return Err(ModelError::BadConfig("learning rate and epsilon must be positive".into()));
        }
        if !(pos(self.beta1) && self.beta1 < 1.0 && pos(self.beta2) && self.beta2 < 1.0) {
            return Err(ModelError::BadConfig("betas must lie in (0, 1)".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(ModelError::BadConfig("batch size, epochs and patience must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, len: usize) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// He-uniform weights, zero biases.
pub fn he_uniform<R: Rng + ?Sized>(rng: &mut R) -> Vec<f64> {
    let mut params = vec![0.0; NUM_PARAMS];
    for slot in param_slots() {
        let bound = (6.0 / ARCHITECTURE[slot.layer].fan_in() as f64).sqrt();
        for p in &mut params[slot.weights.0..slot.weights.1] {
            *p = rng.gen_range(-bound..bound);
        }
    }
    params
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

fn standardized(set: &LabeledFeatureSet, s: &Standardizer) -> (Vec<Vec<f64>>, Vec<u8>) {
    set.items
        .iter()
        .map(|it| (s.apply(it.features.supervector()), it.label))
        .unzip()
}

fn check_inputs(set: &LabeledFeatureSet, name: &'static str) -> Result<(), ModelError> {
    if set.is_empty() {
        return Err(ModelError::EmptySet(name));
    }
    let expected = (INPUT_SHAPE.rows, INPUT_SHAPE.cols);
    for it in &set.items {
        if it.features.shape() != expected {
            return Err(ModelError::ShapeMismatch {
                expected,
                got: it.features.shape(),
            });
        }
    }
    Ok(())
}

/// Trains from a seeded He-uniform start and returns the best-validation-loss weights.
pub fn train(
    train_set: &LabeledFeatureSet,
    val_set: &LabeledFeatureSet,
    cfg: &TrainConfig,
) -> Result<(CnnDetector, TrainingHistory), ModelError> {
    cfg.validate()?;
    check_inputs(train_set, "training")?;
    check_inputs(val_set, "validation")?;
    let standardizer = Standardizer::fit(train_set.items.iter().map(|i| &i.features), INPUT_SHAPE.cols);
    let (train_x, train_y) = standardized(train_set, &standardizer);
    let (val_x, val_y) = standardized(val_set, &standardizer);
    let val_refs: Vec<&[f64]> = val_x.iter().map(Vec::as_slice).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = CnnDetector::from_params(he_uniform(&mut rng), standardizer)?;
    let mut adam = Adam::new(cfg, NUM_PARAMS);
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let mut history = TrainingHistory {
        best_val_loss: f64::INFINITY,
        ..TrainingHistory::default()
    };
    let mut best = model.params().to_vec();
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| train_x[i].as_slice()).collect();
            let ys: Vec<u8> = batch.iter().map(|&i| train_y[i]).collect();
            let (loss, grad) = model.batch_loss_and_grad(&xs, &ys);
            epoch_loss += loss * batch.len() as f64;
            adam.step(model.params_mut(), &grad);
        }
        let train_loss = epoch_loss / train_x.len() as f64;
        let val_loss = model.mean_loss(&val_refs, &val_y);
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < history.best_val_loss {
            history.best_val_loss = val_loss;
            history.best_epoch = epoch;
            best.copy_from_slice(model.params());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    model.params_mut().copy_from_slice(&best);
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio_io::{Attack, BlockRecord, Condition, Label, Part};
    use crate::dataset::LabeledItem;
    use crate::filterbanks::{FeatureKind, FeatureMatrix};
    use rand_distr::{Distribution, Normal};

    #[test]
    fn loss_values() {
        assert!((bce_loss(0.5, 0) - 2f64.ln()).abs() < 1e-15);
        assert!((bce_loss(0.5, 1) - 2f64.ln()).abs() < 1e-15);
        assert!(bce_loss(1.0, 1) < 2e-7);
        assert!(bce_loss(0.0, 0) < 2e-7);
        assert!((bce_grad_p(0.5, 1) + 2.0).abs() < 1e-15);
        assert!((bce_grad_p(0.5, 0) - 2.0).abs() < 1e-15);
        assert_eq!(bce_grad_p(1.0, 1), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            beta2: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let cfg = TrainConfig::default();
        let mut adam = Adam::new(&cfg, 2);
        let mut p = vec![1.0, 1.0];
        adam.step(&mut p, &[0.3, -4.0]);
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p[1] - (1.0 + 1e-3)).abs() < 1e-9);
    }

    pub(crate) fn toy_set(n: usize, seed: u64, sep: f64) -> LabeledFeatureSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let items = (0..n)
            .map(|i| {
                let y = (i % 2) as u8;
                let centre = if y == 1 { sep } else { -sep };
                let values = (0..620).map(|_| centre + noise.sample(&mut rng)).collect();
                LabeledItem {
                    features: FeatureMatrix::new(values, 31, 20, FeatureKind::Imfcc).unwrap(),
                    label: y,
                    record: BlockRecord::new(
                        &format!("toy{seed}_{i}"),
                        0,
                        if y == 1 { Label::Adversarial } else { Label::Benign },
                        &Condition::clean(Attack::White, Part::Full),
                    ),
                }
            })
            .collect();
        LabeledFeatureSet::new(items)
    }

    #[test]
    fn empty_sets_rejected() {
        let t = toy_set(4, 0, 1.0);
        let e = LabeledFeatureSet::default();
        assert!(matches!(train(&e, &t, &TrainConfig::default()), Err(ModelError::EmptySet(_))));
        assert!(matches!(train(&t, &e, &TrainConfig::default()), Err(ModelError::EmptySet(_))));
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let tr = toy_set(64, 1, 0.5);
        let va = toy_set(16, 2, 0.5);
        let cfg = TrainConfig {
            max_epochs: 20,
            ..TrainConfig::default()
        };
        let (m, hist) = train(&tr, &va, &cfg).unwrap();
        assert!(hist.epochs.len() <= 20);
        let correct = tr
            .items
            .iter()
            .filter(|it| (m.forward(&it.features).unwrap() >= 0.5) == (it.label == 1))
            .count();
        assert_eq!(correct, tr.len());
    }

    #[test]
    fn same_seed_same_weights() {
        let tr = toy_set(24, 3, 0.3);
        let va = toy_set(8, 4, 0.3);
        let cfg = TrainConfig {
            max_epochs: 3,
            batch_size: 8,
            seed: 11,
            ..TrainConfig::default()
        };
        let (a, ha) = train(&tr, &va, &cfg).unwrap();
        let (b, hb) = train(&tr, &va, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        let (c, _) = train(&tr, &va, &TrainConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn tiny_steps_descend() {
        let tr = toy_set(4, 9, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = Standardizer::fit(tr.items.iter().map(|i| &i.features), 20);
        let mut m = CnnDetector::from_params(he_uniform(&mut rng), s).unwrap();
        let xs: Vec<Vec<f64>> = tr.items.iter().map(|i| m.prepare(&i.features).unwrap()).collect();
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let ys: Vec<u8> = tr.labels().collect();
        let cfg = TrainConfig {
            learning_rate: 1e-5,
            ..TrainConfig::default()
        };
        let mut adam = Adam::new(&cfg, NUM_PARAMS);
        let mut prev = m.mean_loss(&refs, &ys);
        for _ in 0..8 {
            let (_, g) = m.batch_loss_and_grad(&refs, &ys);
            adam.step(m.params_mut(), &g);
            let now = m.mean_loss(&refs, &ys);
            assert!(now <= prev, "{now} > {prev}");
            prev = now;
        }
    }
}
