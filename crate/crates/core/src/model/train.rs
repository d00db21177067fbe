//! Optimizers and the two-phase training schedule.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LossBreakdown, LossWeights, ParamStore, Stage, Targets, ToyModel};
use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    /// Epochs between learning-rate halvings; 0 disables the schedule.
    pub lr_halving_period: usize,
    pub optimizer: OptimizerKind,
    pub lambda_a: f64,
    pub lambda_l: f64,
    pub seed: u64,
    pub pretrain_attribute_epochs: usize,
    pub pretrain_landmark_epochs: usize,
    /// Keep the attribute and heatmap heads fixed during joint training.
    pub freeze_heads: bool,
    /// Accepted for config compatibility; no augmentation is applied.
    pub augmentation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 8,
            max_epochs: 30,
            learning_rate: 1e-3,
            lr_halving_period: 10,
            optimizer: OptimizerKind::Adam,
            lambda_a: 1.0,
            lambda_l: 1.0,
            seed: 0,
            pretrain_attribute_epochs: 2,
            pretrain_landmark_epochs: 2,
            freeze_heads: false,
            augmentation: false,
        }
    }

    pub fn full_size() -> Self {
        TrainConfig { batch_size: 20, max_epochs: 35, learning_rate: 1e-4, lr_halving_period: 5, ..TrainConfig::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.lambda_a < 0.0 || self.lambda_l < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { attribute: self.lambda_a, landmark: self.lambda_l }
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_halving_period == 0 {
            return self.learning_rate;
        }
        self.learning_rate * 0.5f64.powi((epoch / self.lr_halving_period) as i32)
    }
}

/// One training image with its supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub image: Tensor,
    pub targets: Targets,
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Adam (β1 0.9, β2 0.999, ε 1e-8) or plain SGD over a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: Vec<Option<Moments>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, num_params: usize) -> Self {
        Optimizer { kind, beta1: 0.9, beta2: 0.999, eps: 1e-8, state: vec![None; num_params] }
    }

    /// Applies one update to every slot that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(usize, Tensor)], lr: f64) -> Result<()> {
        for (slot, g) in grads {
            let p = params.value(*slot);
            if p.shape() != g.shape() {
                return Err(Error::shape(format!("gradient shape mismatch for slot {slot}")));
            }
            let mut data = p.data().to_vec();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, gv) in data.iter_mut().zip(g.data()) {
                        *w -= lr * gv;
                    }
                }
                OptimizerKind::Adam => {
                    let st = self.state[*slot].get_or_insert_with(|| Moments {
                        m: vec![0.0; data.len()],
                        v: vec![0.0; data.len()],
                        t: 0,
                    });
                    st.t += 1;
                    let c1 = 1.0 - self.beta1.powi(st.t);
                    let c2 = 1.0 - self.beta2.powi(st.t);
                    for i in 0..data.len() {
                        let gv = g.data()[i];
                        st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * gv;
                        st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * gv * gv;
                        data[i] -= lr * (st.m[i] / c1) / ((st.v[i] / c2).sqrt() + self.eps);
                    }
                }
            }
            let updated = Tensor::new(g.shape().to_vec(), data)
                .map_err(|_| Error::Numerical(format!("parameter {} became non-finite", params.name(*slot))))?;
            *params.value_mut(*slot) = updated;
        }
        Ok(())
    }
}

/// Loss and per-slot gradient of one sample.
pub fn sample_gradients(
    model: &ToyModel,
    sample: &TrainSample,
    stage: Stage,
    weights: LossWeights,
) -> Result<(LossBreakdown, Vec<(usize, Tensor)>)> {
    let mut tape = Tape::new();
    let x = tape.constant(sample.image.clone());
    let vars = model.record(&mut tape, x, stage)?;
    let (root, br) = model.record_loss(&mut tape, &vars, &sample.targets, stage, weights)?;
    let grads = tape.backward(root)?;
    Ok((br, tape.param_grads(&grads)))
}

/// One optimizer step on the batch mean of the stage objective. Gradients
/// are summed in sample order.
pub fn train_step(
    model: &mut ToyModel,
    batch: &[&TrainSample],
    cfg: &TrainConfig,
    optimizer: &mut Optimizer,
    stage: Stage,
    lr: f64,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let mut acc: Vec<Option<Tensor>> = vec![None; model.params().len()];
    let mut mean = LossBreakdown::default();
    for sample in batch {
        let (br, grads) = sample_gradients(model, sample, stage, cfg.weights())?;
        mean.total += br.total;
        mean.id += br.id;
        mean.attribute += br.attribute;
        mean.landmark += br.landmark;
        for (slot, g) in grads {
            acc[slot] = Some(match acc[slot].take() {
                Some(prev) => prev.add(&g)?,
                None => g,
            });
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for v in [&mut mean.total, &mut mean.id, &mut mean.attribute, &mut mean.landmark] {
        *v *= inv;
    }
    let frozen = |name: &str| {
        cfg.freeze_heads && stage == Stage::Full && (name.starts_with("attr.head.") || name.starts_with("lm.head."))
    };
    let mut grads = Vec::new();
    for (slot, g) in acc.into_iter().enumerate() {
        if let Some(g) = g {
            if stage.owns(model.params().name(slot)) && !frozen(model.params().name(slot)) {
                grads.push((slot, g.scale(inv)?));
            }
        }
    }
    optimizer.step(model.params_mut(), &grads, lr)?;
    Ok(mean)
}

/// Mean losses of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: Stage,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

fn run_epochs(
    model: &mut ToyModel,
    data: &[TrainSample],
    cfg: &TrainConfig,
    stage: Stage,
    epochs: usize,
    log: &mut Vec<EpochLog>,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Argument("no training samples".into()));
    }
    let mut optimizer = Optimizer::new(cfg.optimizer, model.params().len());
    let stage_tag = match stage {
        Stage::Attribute => 1,
        Stage::Landmark => 2,
        Stage::Full => 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(31).wrapping_add(stage_tag));
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let mut sum = LossBreakdown::default();
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &data[i]).collect();
            let br = train_step(model, &batch, cfg, &mut optimizer, stage, lr)?;
            sum.total += br.total;
            sum.id += br.id;
            sum.attribute += br.attribute;
            sum.landmark += br.landmark;
            batches += 1;
        }
        let inv = 1.0 / batches as f64;
        let loss = LossBreakdown {
            total: sum.total * inv,
            id: sum.id * inv,
            attribute: sum.attribute * inv,
            landmark: sum.landmark * inv,
        };
        log.push(EpochLog { stage, epoch, lr, loss });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Attribute,
    Landmark,
}

/// Trains one branch with its auxiliary loss only; every other parameter
/// is left bit-identical.
pub fn pretrain_branch(
    model: &mut ToyModel,
    which: Branch,
    data: &[TrainSample],
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    let stage = match which {
        Branch::Attribute => Stage::Attribute,
        Branch::Landmark => {
            if !model.config().two_branch {
                return Err(Error::Config("single-branch model has no landmark branch".into()));
            }
            Stage::Landmark
        }
    };
    let mut log = Vec::new();
    run_epochs(model, data, cfg, stage, epochs, &mut log)?;
    Ok(log)
}

/// Joint training on the full objective.
pub fn train_joint(model: &mut ToyModel, data: &[TrainSample], cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    let mut log = Vec::new();
    run_epochs(model, data, cfg, Stage::Full, cfg.max_epochs, &mut log)?;
    Ok(log)
}

/// Branch pretraining followed by joint training.
pub fn train_model(model: &mut ToyModel, data: &[TrainSample], cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    let mut log = pretrain_branch(model, Branch::Attribute, data, cfg, cfg.pretrain_attribute_epochs)?;
    if model.config().two_branch {
        log.extend(pretrain_branch(model, Branch::Landmark, data, cfg, cfg.pretrain_landmark_epochs)?);
    }
    log.extend(train_joint(model, data, cfg)?);
    Ok(log)
}
