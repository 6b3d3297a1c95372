//! Temperature-scaled logit distillation: soft class probabilities, the
//! student cross-entropy, the KL distillation term and their mixture.

use serde::{Deserialize, Serialize};

use crate::tensor::{argmax_rows, Scalar, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum DistillError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid labels: {0}")]
    Label(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = DistillError> = std::result::Result<T, E>;

/// Which distribution is the first argument of the KL divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// KL(student ‖ teacher).
    #[default]
    StudentToTeacher,
    /// KL(teacher ‖ student), the usual soft-target cross-entropy direction.
    TeacherToStudent,
}

impl KlDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            KlDirection::StudentToTeacher => "student_to_teacher",
            KlDirection::TeacherToStudent => "teacher_to_student",
        }
    }
}

impl std::str::FromStr for KlDirection {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "student_to_teacher" => Ok(KlDirection::StudentToTeacher),
            "teacher_to_student" => Ok(KlDirection::TeacherToStudent),
            other => Err(format!(
                "unknown kl direction {other:?}, expected student_to_teacher or teacher_to_student"
            )),
        }
    }
}

impl std::fmt::Display for KlDirection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KDConfig {
    pub temperature: f64,
    pub alpha: f64,
    #[serde(default)]
    pub kl_direction: KlDirection,
}

impl KDConfig {
    pub fn new(temperature: f64, alpha: f64) -> Self {
        KDConfig {
            temperature,
            alpha,
            kl_direction: KlDirection::default(),
        }
    }

    /// α = 1, T = 1: plain cross-entropy training without a teacher.
    pub fn standalone() -> Self {
        KDConfig::new(1.0, 1.0)
    }

    pub fn beta(&self) -> f64 {
        1.0 - self.alpha
    }

    pub fn is_standalone(&self) -> bool {
        self.alpha == 1.0 && self.temperature == 1.0
    }

    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(DistillError::Parameter(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(DistillError::Parameter(format!(
            "temperature must be positive and finite, got {t}"
        )));
    }
    Ok(())
}

fn check_logits<F: Scalar>(name: &str, t: &Tensor<F>) -> Result<(usize, usize)> {
    match *t.shape() {
        [b, c] if b > 0 && c > 0 => Ok((b, c)),
        ref s => Err(DistillError::Contract(format!(
            "{name} logits must be [batch, classes], got {s:?}"
        ))),
    }
}

fn check_pair<F: Scalar>(s: &Tensor<F>, t: &Tensor<F>) -> Result<(usize, usize)> {
    let dims = check_logits("student", s)?;
    if t.shape() != s.shape() {
        return Err(DistillError::Contract(format!(
            "student logits {:?} and teacher logits {:?} differ in shape",
            s.shape(),
            t.shape()
        )));
    }
    Ok(dims)
}

/// Student log-probabilities and teacher probabilities at one temperature.
pub struct ProbPair<F: Scalar> {
    pub student_log: Tensor<F>,
    pub teacher: Tensor<F>,
}

pub fn class_probabilities<F: Scalar>(
    s: &Tensor<F>,
    t: &Tensor<F>,
    temperature: f64,
) -> Result<ProbPair<F>> {
    check_pair(s, t)?;
    check_temperature(temperature)?;
    let temp = F::from_f64(temperature);
    Ok(ProbPair {
        student_log: s.log_softmax(1, temp)?,
        teacher: t.detach().softmax(1, temp)?,
    })
}

/// Dense one-hot matrix for class indices.
pub fn one_hot<F: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<F>> {
    let mut data = vec![F::zero(); labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(DistillError::Label(format!(
                "row {i}: class {y} outside 0..{classes}"
            )));
        }
        data[i * classes + y] = F::one();
    }
    Ok(Tensor::from_vec(data, &[labels.len(), classes])?)
}

fn check_one_hot<F: Scalar>(y: &Tensor<F>, classes: usize) -> Result<()> {
    for (i, row) in y.data().chunks(classes).enumerate() {
        let ones = row.iter().filter(|&&v| v == F::one()).count();
        let zeros = row.iter().filter(|&&v| v == F::zero()).count();
        if ones != 1 || zeros != classes - 1 {
            return Err(DistillError::Label(format!("row {i} is not one-hot")));
        }
    }
    Ok(())
}

/// Batch-mean cross-entropy at T = 1.
pub fn student_loss<F: Scalar>(y: &Tensor<F>, s: &Tensor<F>) -> Result<Tensor<F>> {
    let (b, c) = check_logits("student", s)?;
    if y.shape() != s.shape() {
        return Err(DistillError::Contract(format!(
            "labels {:?} and logits {:?} differ in shape",
            y.shape(),
            s.shape()
        )));
    }
    check_one_hot(y, c)?;
    let picked = s.log_softmax(1, F::one())?.mul(&y.detach())?.sum();
    Ok(picked.scale(F::from_f64(-1.0 / b as f64)))
}

/// `T² · KL`, averaged over the batch. The teacher logits are detached, so
/// no gradient reaches the teacher.
pub fn distillation_loss<F: Scalar>(
    s: &Tensor<F>,
    t: &Tensor<F>,
    cfg: &KDConfig,
) -> Result<Tensor<F>> {
    check_temperature(cfg.temperature)?;
    let (b, _) = check_pair(s, t)?;
    let temp = F::from_f64(cfg.temperature);
    let log_p = s.log_softmax(1, temp)?;
    let log_q = t.detach().log_softmax(1, temp)?;
    let kl = match cfg.kl_direction {
        KlDirection::StudentToTeacher => log_p.exp().mul(&log_p.sub(&log_q)?)?,
        KlDirection::TeacherToStudent => log_q.exp().mul(&log_q.sub(&log_p)?)?,
    }
    .sum();
    let t2 = cfg.temperature * cfg.temperature;
    Ok(kl.scale(F::from_f64(t2 / b as f64)))
}

/// `α · student + (1 − α) · distillation`. With α = 1 the teacher is not
/// consulted and the student loss is returned unchanged.
pub fn final_loss<F: Scalar>(
    y: &Tensor<F>,
    s: &Tensor<F>,
    t: Option<&Tensor<F>>,
    cfg: &KDConfig,
) -> Result<Tensor<F>> {
    cfg.validate()?;
    let ls = student_loss(y, s)?;
    if cfg.alpha == 1.0 {
        return Ok(ls);
    }
    let t = t.ok_or_else(|| {
        DistillError::Contract(format!("alpha {} needs teacher logits", cfg.alpha))
    })?;
    let ld = distillation_loss(s, t, cfg)?;
    Ok(ls
        .scale(F::from_f64(cfg.alpha))
        .add(&ld.scale(F::from_f64(cfg.beta())))?)
}

/// Hard predictions at T = 1; ties go to the lowest class index.
pub fn predict<F: Scalar>(s: &Tensor<F>) -> Vec<usize> {
    argmax_rows(s)
}
