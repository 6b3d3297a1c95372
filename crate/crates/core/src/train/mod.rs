//! Optimization: SGD, the plateau scheduler, early stopping and the shared
//! fit loop used for standalone and distillation training.

mod record;
mod sweep;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::distill::{final_loss, one_hot, predict, DistillError, KDConfig};
use crate::metrics::{confusion, scores, MetricsError, MetricsReport};
use crate::nn::{Mode, Model, NnError};
use crate::preprocess::{Augmentation, Normalization, PatchSet, PreprocessError};
use crate::rng;
use crate::tensor::{no_grad, Scalar, Tensor, TensorError};

pub use record::{EpochRecord, RunRecord, RUN_CSV_HEADER};
pub use sweep::{
    median, report_rows, sweep, write_report, CellResult, ReportRow, SweepPlan, TeacherSource,
    BASELINE_ID, REPORT_HEADER,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training diverged: non-finite loss in epoch {0}")]
    Diverged(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Dropout probability written into the model specification.
    pub dropout_p: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub scheduler_factor: f64,
    pub scheduler_patience: usize,
    pub min_lr: f64,
    /// A validation loss counts as an improvement when it beats the best by
    /// more than this.
    pub min_delta: f64,
    #[serde(default = "default_true")]
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 0.001,
            momentum: 0.0,
            dropout_p: 0.2,
            max_epochs: 100,
            early_stop_patience: 20,
            scheduler_factor: 0.1,
            scheduler_patience: 5,
            min_lr: 1e-6,
            min_delta: 0.0,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive".into());
        }
        if self.early_stop_patience == 0 || self.scheduler_patience == 0 {
            return bad("patience values must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.scheduler_factor > 0.0 && self.scheduler_factor <= 1.0) {
            return bad(format!("scheduler_factor must lie in (0, 1], got {}", self.scheduler_factor));
        }
        if !(self.min_lr >= 0.0) || !(self.min_delta >= 0.0) {
            return bad("min_lr and min_delta must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p));
        }
        Ok(())
    }
}

/// Stochastic gradient descent with optional heavy-ball momentum:
/// `v <- m v + g`, `p <- p - lr v`.
pub struct Sgd<F: Scalar> {
    pub momentum: f64,
    velocity: Vec<Vec<F>>,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &[Tensor<F>], lr: f64) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![F::zero(); p.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(TrainError::Contract("parameter list changed between steps".into()));
        }
        for (i, p) in params.iter().enumerate() {
            if !p.requires_grad() {
                continue;
            }
            let g = p.grad_ref();
            let g = g.as_ref().ok_or_else(|| {
                TrainError::Contract(format!("trainable parameter {i} has no gradient"))
            })?;
            let (m, lr) = (F::from_f64(self.momentum), F::from_f64(lr));
            let v = &mut self.velocity[i];
            let mut d = p.data_mut();
            for ((x, v), &g) in d.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                *v = m * *v + g;
                *x = *x - lr * *v;
            }
        }
        Ok(())
    }
}

/// Learning-rate reduction after `patience` epochs without improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub min_delta: f64,
    best: f64,
    stall: usize,
}

impl Plateau {
    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64, min_delta: f64) -> Self {
        Plateau {
            lr,
            factor,
            patience,
            min_lr,
            min_delta,
            best: f64::INFINITY,
            stall: 0,
        }
    }

    /// Feeds one epoch's validation loss; returns the learning rate for the
    /// next epoch.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.stall = 0;
        } else {
            self.stall += 1;
            if self.stall >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.stall = 0;
            }
        }
        self.lr
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStop {
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    stall: usize,
}

impl EarlyStop {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStop {
            patience,
            min_delta,
            best: f64::INFINITY,
            stall: 0,
        }
    }

    /// True once `patience` consecutive epochs failed to improve.
    pub fn should_stop(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.stall = 0;
        } else {
            self.stall += 1;
        }
        self.stall >= self.patience
    }
}

/// A split held as normalized `[H, W, C]` samples.
#[derive(Debug, Clone)]
pub struct Prepared<F: Scalar> {
    pub size: usize,
    pub samples: Vec<Vec<F>>,
    pub labels: Vec<usize>,
}

impl<F: Scalar> Prepared<F> {
    pub fn new(set: &PatchSet, norm: &Normalization) -> Result<Self> {
        let samples = set
            .pixels
            .iter()
            .map(|p| norm.apply::<F>(p))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Prepared {
            size: set.size,
            samples,
            labels: set.labels.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn batch(&self, idx: &[usize], aug: Option<&[Augmentation]>) -> Result<(Tensor<F>, Vec<usize>)> {
        let s = self.size;
        let mut data = Vec::with_capacity(idx.len() * s * s * 3);
        for (k, &i) in idx.iter().enumerate() {
            match aug {
                Some(a) => data.extend(a[k].apply(&self.samples[i], s, 3)),
                None => data.extend_from_slice(&self.samples[i]),
            }
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::from_vec(data, &[idx.len(), s, s, 3])?, labels))
    }
}

pub struct TrainData<F: Scalar> {
    pub train: Prepared<F>,
    pub val: Prepared<F>,
    pub test: Option<Prepared<F>>,
}

impl<F: Scalar> TrainData<F> {
    pub fn new(
        train: &PatchSet,
        val: &PatchSet,
        test: Option<&PatchSet>,
        norm: &Normalization,
    ) -> Result<Self> {
        Ok(TrainData {
            train: Prepared::new(train, norm)?,
            val: Prepared::new(val, norm)?,
            test: test.map(|t| Prepared::new(t, norm)).transpose()?,
        })
    }
}

/// Eval-mode logits for every sample, flattened `[n * classes]`.
pub fn predict_logits<F: Scalar>(
    model: &mut dyn Model<F>,
    data: &Prepared<F>,
    batch_size: usize,
) -> Result<Vec<F>> {
    let previous = model.mode();
    model.set_mode(Mode::Eval);
    let idx: Vec<usize> = (0..data.len()).collect();
    let out = no_grad(|| -> Result<Vec<F>> {
        let mut out = Vec::with_capacity(data.len() * model.num_classes());
        for chunk in idx.chunks(batch_size.max(1)) {
            let (x, _) = data.batch(chunk, None)?;
            out.extend(model.forward(&x)?.to_vec());
        }
        Ok(out)
    });
    model.set_mode(previous);
    out
}

fn report_from_logits<F: Scalar>(logits: &Tensor<F>, labels: &[usize]) -> Result<MetricsReport> {
    Ok(scores(&confusion(labels, &predict(logits))?)?)
}

/// Eval-mode predictions at T = 1 scored against the labels.
pub fn evaluate<F: Scalar>(
    model: &mut dyn Model<F>,
    data: &Prepared<F>,
    batch_size: usize,
) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(TrainError::Contract("cannot evaluate an empty split".into()));
    }
    let logits = predict_logits(model, data, batch_size)?;
    let t = Tensor::from_vec(logits, &[data.len(), model.num_classes()])?;
    report_from_logits(&t, &data.labels)
}

fn snapshot<F: Scalar>(model: &dyn Model<F>) -> Vec<Vec<F>> {
    model.parameters().iter().map(|(_, p)| p.to_vec()).collect()
}

fn restore<F: Scalar>(model: &dyn Model<F>, weights: &[Vec<F>]) {
    for ((_, p), w) in model.parameters().iter().zip(weights) {
        p.data_mut().copy_from_slice(w);
    }
}

/// Plain cross-entropy training: the distillation loop with α = 1, T = 1
/// and no teacher.
pub fn fit_standalone<F: Scalar>(
    student: &mut dyn Model<F>,
    data: &TrainData<F>,
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    fit(student, None, data, cfg, &KDConfig::standalone())
}

/// Trains `student` on the mixed objective against a frozen, eval-mode
/// teacher. The student keeps the weights of its best validation epoch.
pub fn fit_distill<F: Scalar>(
    student: &mut dyn Model<F>,
    teacher: &mut dyn Model<F>,
    data: &TrainData<F>,
    cfg: &TrainConfig,
    kd: &KDConfig,
) -> Result<RunRecord> {
    if teacher.num_classes() != student.num_classes() {
        return Err(TrainError::Contract(format!(
            "teacher predicts {} classes, student {}",
            teacher.num_classes(),
            student.num_classes()
        )));
    }
    if teacher.spec().image_size() != student.spec().image_size() {
        return Err(TrainError::Contract(format!(
            "teacher expects {} px patches, student {}",
            teacher.spec().image_size(),
            student.spec().image_size()
        )));
    }
    teacher.freeze();
    teacher.set_mode(Mode::Eval);
    fit(student, Some(teacher), data, cfg, kd)
}

fn fit<F: Scalar>(
    student: &mut dyn Model<F>,
    mut teacher: Option<&mut dyn Model<F>>,
    data: &TrainData<F>,
    cfg: &TrainConfig,
    kd: &KDConfig,
) -> Result<RunRecord> {
    cfg.validate()?;
    kd.validate()?;
    for (name, split) in [("train", &data.train), ("val", &data.val)] {
        if split.is_empty() {
            return Err(TrainError::Contract(format!("{name} split is empty")));
        }
    }
    if kd.alpha < 1.0 && teacher.is_none() {
        return Err(TrainError::Contract(format!("alpha {} needs a teacher", kd.alpha)));
    }
    let classes = student.num_classes();
    let teacher_val = match teacher.as_deref_mut() {
        Some(t) if kd.alpha < 1.0 => Some(Tensor::from_vec(
            predict_logits(t, &data.val, cfg.batch_size)?,
            &[data.val.len(), classes],
        )?),
        _ => None,
    };
    let val_onehot = one_hot::<F>(&data.val.labels, classes)?;
    let params: Vec<Tensor<F>> = student.parameters().into_iter().map(|(_, p)| p).collect();
    let mut sgd = Sgd::new(cfg.momentum);
    let mut sched = Plateau::new(
        cfg.learning_rate,
        cfg.scheduler_factor,
        cfg.scheduler_patience,
        cfg.min_lr,
        cfg.min_delta,
    );
    let mut early = EarlyStop::new(cfg.early_stop_patience, cfg.min_delta);
    let mut record = RunRecord::new(*kd, cfg.seed);
    let mut best = (f64::INFINITY, snapshot(&*student));
    let n = data.train.len();

    for epoch in 1..=cfg.max_epochs {
        let lr = sched.lr;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(cfg.seed, rng::DATA, epoch as u64));
        let augs: Option<Vec<Augmentation>> = cfg.augment.then(|| {
            let mut r = rng::stream(cfg.seed, rng::AUGMENT, epoch as u64);
            (0..n).map(|_| Augmentation::sample(&mut r)).collect()
        });
        student.set_mode(Mode::Train);
        student.reseed_dropout(rng::derive_seed(cfg.seed, rng::DROPOUT, epoch as u64));

        let mut total = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let start = b * cfg.batch_size;
            let aug = augs.as_ref().map(|a| &a[start..start + idx.len()]);
            let (x, labels) = data.train.batch(idx, aug)?;
            let y = one_hot::<F>(&labels, classes)?;
            let t = match teacher.as_deref_mut() {
                Some(t) if kd.alpha < 1.0 => Some(no_grad(|| t.forward(&x))?),
                _ => None,
            };
            let s = student.forward(&x)?;
            let loss = final_loss(&y, &s, t.as_ref(), kd)?;
            let value = loss.item().as_f64();
            if !value.is_finite() {
                return Err(TrainError::Diverged(epoch));
            }
            student.zero_grad();
            loss.backward()?;
            sgd.step(&params, lr)?;
            record.step_losses.push(value);
            total += value * idx.len() as f64;
        }
        student.zero_grad();
        let train_loss = total / n as f64;

        let logits = Tensor::from_vec(
            predict_logits(student, &data.val, cfg.batch_size)?,
            &[data.val.len(), classes],
        )?;
        let val_loss = no_grad(|| final_loss(&val_onehot, &logits, teacher_val.as_ref(), kd))?
            .item()
            .as_f64();
        let val = report_from_logits(&logits, &data.val.labels)?;
        record.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            val,
        });
        if val_loss < best.0 {
            best = (val_loss, snapshot(&*student));
            record.best_epoch = epoch;
        }
        sched.step(val_loss);
        if early.should_stop(val_loss) {
            record.stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    if record.best_epoch == 0 {
        return Err(TrainError::Diverged(record.epochs.len()));
    }
    restore(&*student, &best.1);
    if let Some(test) = &data.test {
        record.test = Some(evaluate(student, test, cfg.batch_size)?);
    }
    Ok(record)
}
