//! Perturbation search over embedded inputs and the objectives built on it.
//!
//! All perturbations live in an l-infinity ball of radius epsilon around
//! the embedded tokens. The inner maximization runs a fixed number of
//! sign-gradient ascent steps with projection after every step; the outer
//! objectives never differentiate through that search (the found delta is
//! treated as a constant), and the smoothness term's reference distribution
//! is frozen before the search starts.
//!
//! Objectives:
//! * label objective: cross-entropy of the perturbed input against gold
//!   labels, maximized over delta (`adv_objective`).
//! * smoothness objective: clean cross-entropy plus alpha times the KL
//!   divergence between perturbed and clean predictions
//!   (`smart_objective`).
//! * combined: perturbed-label term plus alpha times the smoothness term,
//!   each with its own delta (`alice_objective`).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{
    embedded_input, forward_on_tape, register_params, ModelParams, ParamVars, TokenBatch,
};

/// Norm bounding the perturbation ball. Only the l-infinity ball is
/// implemented; requests for other norms fail at parse time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormOrder {
    #[default]
    Infinity,
}

impl FromStr for NormOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inf" | "infinity" | "linf" => Ok(NormOrder::Infinity),
            other => Err(Error::Config(format!(
                "unsupported norm order {other:?}; only the l-infinity ball is implemented"
            ))),
        }
    }
}

/// Starting point of the inner search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaInit {
    /// Start at the center. Deterministic; consumes no randomness. Note
    /// that the smoothness objective has an exactly zero gradient at the
    /// center, so sign steps leave a zero-initialized delta at zero.
    #[default]
    Zero,
    /// Start uniformly inside the ball.
    UniformBall,
}

impl FromStr for DeltaInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(DeltaInit::Zero),
            "uniform" | "uniform_ball" => Ok(DeltaInit::UniformBall),
            other => Err(Error::Config(format!(
                "unknown delta init {other:?}; expected zero or uniform"
            ))),
        }
    }
}

/// Dropout behavior inside the inner search. The search must be a pure
/// function of its inputs, so only the off position exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerDropout {
    #[default]
    Off,
}

/// Settings for the inner maximization and the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdvConfig {
    /// Radius of the perturbation ball. Zero disables the perturbation
    /// without changing the code path.
    pub epsilon: f64,
    /// Ascent step size.
    pub step_size: f64,
    /// Number of sign-gradient steps; zero keeps the projected init.
    pub steps: usize,
    pub norm_order: NormOrder,
    /// Weight of the smoothness term in the combined objective.
    pub alpha: f64,
    pub init: DeltaInit,
    pub inner_dropout: InnerDropout,
}

impl Default for AdvConfig {
    fn default() -> Self {
        AdvConfig {
            epsilon: 0.05,
            step_size: 0.05,
            steps: 1,
            norm_order: NormOrder::Infinity,
            alpha: 1.0,
            init: DeltaInit::Zero,
            inner_dropout: InnerDropout::Off,
        }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidValue {
                what: "AdvConfig::epsilon",
                value: self.epsilon,
            });
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidValue {
                what: "AdvConfig::step_size",
                value: self.step_size,
            });
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidValue {
                what: "AdvConfig::alpha",
                value: self.alpha,
            });
        }
        Ok(())
    }
}

/// An additive perturbation of an embedded batch, `[rows, seq, d_emb]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    tensor: Tensor,
}

impl Perturbation {
    pub fn zeros(shape: Vec<usize>) -> Self {
        Perturbation {
            tensor: Tensor::zeros(shape),
        }
    }

    /// Uniform draw from the closed l-infinity ball of radius `epsilon`,
    /// coordinate by coordinate in row-major order.
    pub fn uniform_ball<R: Rng>(shape: Vec<usize>, epsilon: f64, rng: &mut R) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidValue {
                what: "Perturbation::uniform_ball epsilon",
                value: epsilon,
            });
        }
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * epsilon)
            .collect();
        Ok(Perturbation {
            tensor: Tensor::new(shape, data)?,
        })
    }

    pub fn from_tensor(tensor: Tensor) -> Self {
        Perturbation { tensor }
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn values(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.tensor
    }

    /// Largest coordinate magnitude; zero for an all-zero perturbation.
    pub fn linf_norm(&self) -> f64 {
        self.tensor.data().iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Componentwise clamp onto the l-infinity ball of radius `epsilon`.
pub fn project_linf(mut delta: Perturbation, epsilon: f64) -> Result<Perturbation> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidValue {
            what: "project_linf epsilon",
            value: epsilon,
        });
    }
    for v in delta.tensor.data_mut() {
        *v = v.clamp(-epsilon, epsilon);
    }
    Ok(delta)
}

/// Which inner loss the search ascends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeltaObjective {
    /// Cross-entropy against gold labels.
    LabelLoss,
    /// KL divergence against the frozen clean prediction.
    VirtualLoss,
}

/// Training objective selected for the outer loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Clean cross-entropy.
    Standard,
    /// Perturbed-label cross-entropy.
    Adv,
    /// Clean cross-entropy plus weighted smoothness.
    Smart,
    /// Perturbed-label cross-entropy plus weighted smoothness.
    Alice,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 4] = [
        ObjectiveKind::Standard,
        ObjectiveKind::Adv,
        ObjectiveKind::Smart,
        ObjectiveKind::Alice,
    ];
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ObjectiveKind::Standard => "standard",
            ObjectiveKind::Adv => "adv",
            ObjectiveKind::Smart => "smart",
            ObjectiveKind::Alice => "alice",
        };
        f.write_str(name)
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(ObjectiveKind::Standard),
            "adv" => Ok(ObjectiveKind::Adv),
            "smart" => Ok(ObjectiveKind::Smart),
            "alice" => Ok(ObjectiveKind::Alice),
            other => Err(Error::Config(format!(
                "unknown objective {other:?}; expected standard, adv, smart, or alice"
            ))),
        }
    }
}

/// Term values and perturbation sizes observed while building an objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdvDiagnostics {
    /// Cross-entropy term (clean or perturbed, per the objective).
    pub label_term: f64,
    /// Smoothness term before the alpha weighting; zero when absent.
    pub smooth_term: f64,
    pub delta1_linf: f64,
    pub delta2_linf: f64,
}

/// Scalar objective value plus its diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveOutcome {
    pub loss: f64,
    pub diagnostics: AdvDiagnostics,
}

/// Mean cross-entropy of `logits` against per-row labels, on the tape.
fn ce_on_tape(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let lp = tape.log_softmax(logits)?;
    let picked = tape.pick_per_row(lp, labels)?;
    let m = tape.mean(picked);
    tape.mul_scalar(m, -1.0)
}

/// Mean per-row KL divergence of `logits` against frozen reference
/// log-probabilities, on the tape.
fn kl_mean_on_tape(tape: &mut Tape, logits: Var, ref_log_probs: &[f64]) -> Result<Var> {
    let rows = tape.kl_div_rows(logits, ref_log_probs)?;
    Ok(tape.mean(rows))
}

/// Clean prediction log-probabilities, flattened row-major. These freeze
/// the reference side of the smoothness term.
pub fn reference_log_probs(params: &ModelParams, batch: &TokenBatch) -> Result<Vec<f64>> {
    let logits = crate::model::forward(params, batch)?;
    let mut tape = Tape::new();
    let v = tape.input(&logits, false);
    let lp = tape.log_softmax(v)?;
    Ok(tape.value(lp).to_vec())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_delta_shape(params: &ModelParams, batch: &TokenBatch, delta: &Perturbation) -> Result<()> {
    let expected = batch.embedded_shape(params.d_emb());
    if delta.shape() != expected {
        return Err(Error::shape("perturbation", &expected, delta.shape()));
    }
    Ok(())
}

/// Builds the inner loss for one ascent step: parameters frozen, delta a
/// gradient leaf, dropout off. Returns the loss and the delta leaf.
fn inner_loss(
    tape: &mut Tape,
    params: &ModelParams,
    batch: &TokenBatch,
    delta: &Perturbation,
    objective: DeltaObjective,
    ref_log_probs: Option<&[f64]>,
) -> Result<(Var, Var)> {
    let pvars = register_params(tape, params, false);
    let x = embedded_input(tape, &pvars, batch)?;
    let d_leaf = tape.input(&delta.as_tensor().clone().with_requires_grad(true), true);
    let x = tape.add(x, d_leaf)?;
    let mut no_rng = crate::model::NoDraws;
    let logits = forward_on_tape(tape, &pvars, params, batch, x, false, &mut no_rng)?;
    let loss = match objective {
        DeltaObjective::LabelLoss => ce_on_tape(tape, logits, batch.labels())?,
        DeltaObjective::VirtualLoss => {
            let refs = ref_log_probs.expect("virtual inner loss needs a reference");
            kl_mean_on_tape(tape, logits, refs)?
        }
    };
    Ok((loss, d_leaf))
}

/// Inner maximization: K projected sign-gradient steps from the configured
/// init. Parameters are read-only; randomness is consumed only for the
/// uniform init. The smoothness reference is computed once, before the
/// first step, and held fixed.
pub fn estimate_delta<R: Rng>(
    params: &ModelParams,
    batch: &TokenBatch,
    cfg: &AdvConfig,
    objective: DeltaObjective,
    rng: &mut R,
) -> Result<Perturbation> {
    cfg.validate()?;
    let shape = batch.embedded_shape(params.d_emb());
    let mut delta = match cfg.init {
        DeltaInit::Zero => Perturbation::zeros(shape),
        DeltaInit::UniformBall => Perturbation::uniform_ball(shape, cfg.epsilon, rng)?,
    };
    delta = project_linf(delta, cfg.epsilon)?;
    let ref_log_probs = match objective {
        DeltaObjective::LabelLoss => None,
        DeltaObjective::VirtualLoss => Some(reference_log_probs(params, batch)?),
    };
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let (loss, d_leaf) = inner_loss(
            &mut tape,
            params,
            batch,
            &delta,
            objective,
            ref_log_probs.as_deref(),
        )?;
        tape.backward(loss)?;
        let grad = tape.grad(d_leaf);
        for (v, &g) in delta.tensor.data_mut().iter_mut().zip(grad) {
            *v += cfg.step_size * sign(g);
        }
        delta = project_linf(delta, cfg.epsilon)?;
    }
    Ok(delta)
}

/// Mean cross-entropy of the (optionally perturbed) input against gold
/// labels, in evaluation mode.
pub fn label_loss(
    params: &ModelParams,
    batch: &TokenBatch,
    delta: Option<&Perturbation>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let pvars = register_params(&mut tape, params, false);
    let mut x = embedded_input(&mut tape, &pvars, batch)?;
    if let Some(d) = delta {
        check_delta_shape(params, batch, d)?;
        let dv = tape.input(d.as_tensor(), false);
        x = tape.add(x, dv)?;
    }
    let mut no_rng = crate::model::NoDraws;
    let logits = forward_on_tape(&mut tape, &pvars, params, batch, x, false, &mut no_rng)?;
    let loss = ce_on_tape(&mut tape, logits, batch.labels())?;
    tape.scalar_value(loss)
}

/// Mean KL divergence between the perturbed prediction and the clean
/// prediction, in evaluation mode. Exactly zero when `delta` is absent or
/// all zeros.
pub fn virtual_loss(
    params: &ModelParams,
    batch: &TokenBatch,
    delta: Option<&Perturbation>,
) -> Result<f64> {
    let ref_log_probs = reference_log_probs(params, batch)?;
    virtual_loss_against(params, batch, delta, &ref_log_probs)
}

/// Mean KL divergence of the (optionally perturbed) prediction from a
/// caller-supplied log-probability reference (flattened row-major, one row
/// per logit row), in evaluation mode. The reference rows are constants —
/// no gradient flows through them — which is exactly how the training
/// objective holds its smoothness reference fixed; supplying the rows
/// explicitly lets callers reuse a cached reference across evaluations.
pub fn virtual_loss_against(
    params: &ModelParams,
    batch: &TokenBatch,
    delta: Option<&Perturbation>,
    ref_log_probs: &[f64],
) -> Result<f64> {
    let mut tape = Tape::new();
    let pvars = register_params(&mut tape, params, false);
    let mut x = embedded_input(&mut tape, &pvars, batch)?;
    if let Some(d) = delta {
        check_delta_shape(params, batch, d)?;
        let dv = tape.input(d.as_tensor(), false);
        x = tape.add(x, dv)?;
    }
    let mut no_rng = crate::model::NoDraws;
    let logits = forward_on_tape(&mut tape, &pvars, params, batch, x, false, &mut no_rng)?;
    let loss = kl_mean_on_tape(&mut tape, logits, ref_log_probs)?;
    tape.scalar_value(loss)
}

/// Perturbed-label objective: maximize cross-entropy over delta, then
/// report it. Evaluation-mode view (no dropout).
pub fn adv_objective<R: Rng>(
    params: &ModelParams,
    batch: &TokenBatch,
    cfg: &AdvConfig,
    rng: &mut R,
) -> Result<ObjectiveOutcome> {
    let delta = estimate_delta(params, batch, cfg, DeltaObjective::LabelLoss, rng)?;
    let loss = label_loss(params, batch, Some(&delta))?;
    Ok(ObjectiveOutcome {
        loss,
        diagnostics: AdvDiagnostics {
            label_term: loss,
            smooth_term: 0.0,
            delta1_linf: delta.linf_norm(),
            delta2_linf: 0.0,
        },
    })
}

/// Clean cross-entropy plus `alpha` times the smoothness term. With
/// `alpha == 0` the smoothness branch is skipped entirely, so the result
/// matches the clean objective bit for bit on matched seeds.
pub fn smart_objective<R: Rng>(
    params: &ModelParams,
    batch: &TokenBatch,
    cfg: &AdvConfig,
    rng: &mut R,
) -> Result<ObjectiveOutcome> {
    cfg.validate()?;
    let clean = label_loss(params, batch, None)?;
    if cfg.alpha == 0.0 {
        return Ok(ObjectiveOutcome {
            loss: clean,
            diagnostics: AdvDiagnostics {
                label_term: clean,
                smooth_term: 0.0,
                delta1_linf: 0.0,
                delta2_linf: 0.0,
            },
        });
    }
    let delta2 = estimate_delta(params, batch, cfg, DeltaObjective::VirtualLoss, rng)?;
    let smooth = virtual_loss(params, batch, Some(&delta2))?;
    Ok(ObjectiveOutcome {
        loss: clean + cfg.alpha * smooth,
        diagnostics: AdvDiagnostics {
            label_term: clean,
            smooth_term: smooth,
            delta1_linf: 0.0,
            delta2_linf: delta2.linf_norm(),
        },
    })
}

/// Combined objective: perturbed-label term plus `alpha` times the
/// smoothness term, each with its own independently estimated delta. With
/// `alpha == 0` it reduces to the perturbed-label objective bit for bit;
/// with `epsilon == 0` and zero init it reduces to the clean objective.
pub fn alice_objective<R: Rng>(
    params: &ModelParams,
    batch: &TokenBatch,
    cfg: &AdvConfig,
    rng: &mut R,
) -> Result<ObjectiveOutcome> {
    cfg.validate()?;
    if cfg.alpha == 0.0 {
        return adv_objective(params, batch, cfg, rng);
    }
    let delta1 = estimate_delta(params, batch, cfg, DeltaObjective::LabelLoss, rng)?;
    let delta2 = estimate_delta(params, batch, cfg, DeltaObjective::VirtualLoss, rng)?;
    let label = label_loss(params, batch, Some(&delta1))?;
    let smooth = virtual_loss(params, batch, Some(&delta2))?;
    Ok(ObjectiveOutcome {
        loss: label + cfg.alpha * smooth,
        diagnostics: AdvDiagnostics {
            label_term: label,
            smooth_term: smooth,
            delta1_linf: delta1.linf_norm(),
            delta2_linf: delta2.linf_norm(),
        },
    })
}

/// A training-step loss assembled on one tape, ready for backward.
pub(crate) struct TrainLoss {
    pub loss: Var,
    pub pvars: ParamVars,
    pub diagnostics: AdvDiagnostics,
}

/// Builds the selected objective for one batch with parameters registered
/// as trainable. Dropout applies to the label branch only (the smoothness
/// branch compares dropout-free predictions); found deltas enter as
/// constants. The rng sees, in order: delta inits (uniform init only), then
/// label-branch dropout, so reduced configurations replay byte-identical
/// draw sequences.
pub(crate) fn build_train_loss<R: Rng>(
    tape: &mut Tape,
    params: &ModelParams,
    batch: &TokenBatch,
    kind: ObjectiveKind,
    cfg: &AdvConfig,
    rng: &mut R,
) -> Result<TrainLoss> {
    cfg.validate()?;
    let effective = match kind {
        ObjectiveKind::Smart if cfg.alpha == 0.0 => ObjectiveKind::Standard,
        ObjectiveKind::Alice if cfg.alpha == 0.0 => ObjectiveKind::Adv,
        k => k,
    };
    let delta1 = match effective {
        ObjectiveKind::Adv | ObjectiveKind::Alice => Some(estimate_delta(
            params,
            batch,
            cfg,
            DeltaObjective::LabelLoss,
            rng,
        )?),
        _ => None,
    };
    let delta2 = match effective {
        ObjectiveKind::Smart | ObjectiveKind::Alice => Some(estimate_delta(
            params,
            batch,
            cfg,
            DeltaObjective::VirtualLoss,
            rng,
        )?),
        _ => None,
    };
    let ref_log_probs = match delta2 {
        Some(_) => Some(reference_log_probs(params, batch)?),
        None => None,
    };

    let pvars = register_params(tape, params, true);
    let x = embedded_input(tape, &pvars, batch)?;

    let label_input = match &delta1 {
        Some(d) => {
            let dv = tape.input(d.as_tensor(), false);
            tape.add(x, dv)?
        }
        None => x,
    };
    let label_logits = forward_on_tape(tape, &pvars, params, batch, label_input, true, rng)?;
    let label = ce_on_tape(tape, label_logits, batch.labels())?;

    let (loss, smooth_value) = match &delta2 {
        Some(d) => {
            let dv = tape.input(d.as_tensor(), false);
            let x2 = tape.add(x, dv)?;
            let mut no_rng = crate::model::NoDraws;
            let logits2 = forward_on_tape(tape, &pvars, params, batch, x2, false, &mut no_rng)?;
            let kl = kl_mean_on_tape(tape, logits2, ref_log_probs.as_ref().unwrap())?;
            let weighted = tape.mul_scalar(kl, cfg.alpha)?;
            (tape.add(label, weighted)?, tape.scalar_value(kl)?)
        }
        None => (label, 0.0),
    };

    Ok(TrainLoss {
        loss,
        pvars,
        diagnostics: AdvDiagnostics {
            label_term: tape.scalar_value(label)?,
            smooth_term: smooth_value,
            delta1_linf: delta1.as_ref().map(|d| d.linf_norm()).unwrap_or(0.0),
            delta2_linf: delta2.as_ref().map(|d| d.linf_norm()).unwrap_or(0.0),
        },
    })
}

/// One training-step objective evaluation with gradients: assembles the
/// chosen objective on a fresh tape in training mode, runs backward, and
/// leaves d(loss)/d(parameter) in every parameter's gradient slot
/// (replacing previous contents). This is exactly the quantity a single
/// optimizer step consumes. The rng is drawn in a fixed order (inner-max
/// inits, then label-branch dropout), so reseeding it identically makes
/// repeated calls reproduce the same loss bit for bit.
pub fn train_step_gradients<R: Rng>(
    params: &mut ModelParams,
    batch: &TokenBatch,
    kind: ObjectiveKind,
    cfg: &AdvConfig,
    rng: &mut R,
) -> Result<ObjectiveOutcome> {
    let mut tape = Tape::new();
    let built = build_train_loss(&mut tape, params, batch, kind, cfg, rng)?;
    let loss = tape.scalar_value(built.loss)?;
    tape.backward(built.loss)?;
    params.zero_grads();
    for (var, tensor) in built.pvars.in_order().into_iter().zip(params.tensors_mut()) {
        tape.accumulate_grad_into(var, tensor)?;
    }
    Ok(ObjectiveOutcome {
        loss,
        diagnostics: built.diagnostics,
    })
}
