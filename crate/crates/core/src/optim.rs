//! Adam with bias correction, a linear warmup/decay schedule, global-norm
//! gradient clipping, and the epoch-based training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{train_step_gradients, AdvConfig, ObjectiveKind};
use crate::autodiff::fnv1a;
use crate::data::{batch_groups, ExampleGroup};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::model::{ModelParams, TaskKind};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
/// Added to the square root of the second-moment estimate, not under it.
pub const ADAM_EPSILON: f64 = 1e-6;

/// Outer-loop settings. The model's own dropout rate lives in its
/// architecture config; everything about the optimization lives here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    pub adversarial: AdvConfig,
    /// Peak learning rate, reached at the end of warmup.
    pub learning_rate: f64,
    /// Example groups per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of total optimizer steps spent ramping the rate up.
    pub warmup_fraction: f64,
    /// Bound on the global l2 norm of all gradients jointly.
    pub clip_norm: f64,
    /// Groups per forward pass during evaluation.
    pub eval_batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: ObjectiveKind::Alice,
            adversarial: AdvConfig::default(),
            learning_rate: 5e-5,
            batch_size: 32,
            epochs: 10,
            warmup_fraction: 0.1,
            clip_norm: 1.0,
            eval_batch_size: 64,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adversarial.validate()?;
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidValue {
                what: "learning_rate must be positive and finite",
                value: self.learning_rate,
            });
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::InvalidValue {
                what: "warmup_fraction must lie in [0, 1]",
                value: self.warmup_fraction,
            });
        }
        if !self.clip_norm.is_finite() || self.clip_norm <= 0.0 {
            return Err(Error::InvalidValue {
                what: "clip_norm must be positive and finite",
                value: self.clip_norm,
            });
        }
        if self.eval_batch_size == 0 {
            return Err(Error::Config("eval_batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate for a 1-based `step` out of `total_steps`.
///
/// The first `ceil(warmup_fraction * total_steps)` steps climb linearly to
/// `peak`, which is attained exactly at the warmup boundary; the remaining
/// steps descend linearly, reaching exactly zero at the final step. With
/// zero warmup the descent starts one step below the peak.
pub fn lr_at(step: usize, total_steps: usize, peak: f64, warmup_fraction: f64) -> Result<f64> {
    if !peak.is_finite() || peak <= 0.0 {
        return Err(Error::InvalidValue {
            what: "peak learning rate must be positive and finite",
            value: peak,
        });
    }
    if !(0.0..=1.0).contains(&warmup_fraction) {
        return Err(Error::InvalidValue {
            what: "warmup_fraction must lie in [0, 1]",
            value: warmup_fraction,
        });
    }
    if total_steps == 0 || step == 0 || step > total_steps {
        return Err(Error::Config(format!(
            "schedule step {step} outside 1..={total_steps}"
        )));
    }
    let warmup = (warmup_fraction * total_steps as f64).ceil() as usize;
    // The ratio is formed first so it is exactly 1.0 at the warmup boundary
    // and exactly 0.0 at the last step; `peak * ratio` with ratio <= 1 can
    // then never overshoot the peak by a rounding error.
    if step <= warmup {
        Ok(peak * (step as f64 / warmup as f64))
    } else {
        Ok(peak * ((total_steps - step) as f64 / (total_steps - warmup) as f64))
    }
}

/// Rescales all gradients jointly so their global l2 norm is at most
/// `max_norm`; returns the norm measured before clipping. Tensors without
/// a gradient buffer count as zero.
pub fn clip_gradients(params: &mut ModelParams, max_norm: f64) -> Result<f64> {
    if !max_norm.is_finite() || max_norm <= 0.0 {
        return Err(Error::InvalidValue {
            what: "max_norm must be positive and finite",
            value: max_norm,
        });
    }
    let squared: f64 = params
        .tensors()
        .iter()
        .filter_map(|t| t.grad())
        .flat_map(|g| g.iter())
        .map(|&g| g * g)
        .sum();
    let norm = squared.sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite {
            context: "gradient norm".into(),
        });
    }
    if norm > max_norm {
        let scale = max_norm / norm;
        for tensor in params.tensors_mut() {
            if tensor.grad().is_some() {
                tensor.grad_mut().iter_mut().for_each(|g| *g *= scale);
            }
        }
    }
    Ok(norm)
}

/// One Adam update on a single value buffer. `step` is the 1-based count
/// of updates applied so far including this one; it drives the bias
/// correction. Exposed separately so the update rule can be checked
/// against hand-stepped traces.
pub fn adam_update(
    values: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: usize,
    lr: f64,
) -> Result<()> {
    if grad.len() != values.len() || m.len() != values.len() || v.len() != values.len() {
        return Err(Error::shape("adam_update", values.len(), grad.len()));
    }
    if step == 0 {
        return Err(Error::Config("adam step count starts at 1".into()));
    }
    let m_correction = 1.0 - ADAM_BETA1.powi(step as i32);
    let v_correction = 1.0 - ADAM_BETA2.powi(step as i32);
    for i in 0..values.len() {
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
        let m_hat = m[i] / m_correction;
        let v_hat = v[i] / v_correction;
        values[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
    }
    Ok(())
}

/// First- and second-moment buffers aligned with `ModelParams::tensors()`.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let sizes: Vec<usize> = params.tensors().iter().map(|t| t.numel()).collect();
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }
}

/// Applies one Adam update to every parameter tensor. Every tensor must
/// carry a gradient.
pub fn adam_step(params: &mut ModelParams, state: &mut AdamState, lr: f64) -> Result<()> {
    state.step += 1;
    let step = state.step;
    for ((tensor, m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let (values, grad) = tensor.data_and_grad();
        let grad =
            grad.ok_or_else(|| Error::Config("adam_step on a tensor with no gradient".into()))?;
        adam_update(values, grad, m, v, step, lr)?;
    }
    Ok(())
}

/// One epoch's aggregate measurements. Loss and term means weight each
/// batch by its logit rows, so they equal the mean over all predictions
/// regardless of how the epoch was chunked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// Cross-entropy term (clean or perturbed, per the objective).
    pub label_term: f64,
    /// Smoothness term before alpha weighting; zero when absent.
    pub smooth_term: f64,
    pub dev_accuracy: f64,
    /// Rate used by the epoch's final optimizer step.
    pub learning_rate: f64,
}

/// Result of a training run: the parameters from the epoch with the best
/// dev accuracy (earliest wins ties), the full epoch log, and which epoch
/// won.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

/// Runs the configured objective over `train_groups`, evaluating on
/// `dev_groups` after every epoch. All randomness (epoch shuffles, delta
/// initialization, dropout) flows from one generator seeded by
/// `cfg.seed`, so a fixed input quintuple reproduces bitwise.
pub fn train(
    init: &ModelParams,
    task_kind: TaskKind,
    train_groups: &[ExampleGroup],
    dev_groups: &[ExampleGroup],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_groups.is_empty() || dev_groups.is_empty() {
        return Err(Error::Config(
            "training requires nonempty train and dev sets".into(),
        ));
    }
    let mut params = init.clone();
    let batches_per_epoch = train_groups.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ fnv1a(b"train"));
    let mut state = AdamState::new(&params);
    let mut order: Vec<usize> = (0..train_groups.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut label_sum = 0.0;
        let mut smooth_sum = 0.0;
        let mut rows = 0usize;
        let mut last_lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch = batch_groups(task_kind, chunk.iter().map(|&i| &train_groups[i]))?;
            let outcome = train_step_gradients(
                &mut params,
                &batch,
                cfg.objective,
                &cfg.adversarial,
                &mut rng,
            )?;
            if !outcome.loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("training loss at epoch {epoch}, step {step}"),
                });
            }
            clip_gradients(&mut params, cfg.clip_norm).map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("{context} at epoch {epoch}, step {step}"),
                },
                other => other,
            })?;
            let lr = lr_at(step, total_steps, cfg.learning_rate, cfg.warmup_fraction)?;
            adam_step(&mut params, &mut state, lr)?;
            last_lr = lr;
            let weight = batch.logit_rows() as f64;
            loss_sum += outcome.loss * weight;
            label_sum += outcome.diagnostics.label_term * weight;
            smooth_sum += outcome.diagnostics.smooth_term * weight;
            rows += batch.logit_rows();
        }
        let dev = evaluate(&params, task_kind, dev_groups, None, cfg.eval_batch_size)?;
        log.push(EpochRecord {
            epoch,
            train_loss: loss_sum / rows as f64,
            label_term: label_sum / rows as f64,
            smooth_term: smooth_sum / rows as f64,
            dev_accuracy: dev.accuracy,
            learning_rate: last_lr,
        });
        let improved = match &best {
            None => true,
            Some((acc, _, _)) => dev.accuracy > *acc,
        };
        if improved {
            best = Some((dev.accuracy, epoch, params.clone()));
        }
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        params: best_params,
        log,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, split, DatasetSpec};
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_peaks_at_warmup_boundary_and_ends_at_zero() {
        let total = 100;
        let peak = 0.3;
        // ceil(0.1 * 100) = 10 warmup steps.
        assert_eq!(lr_at(10, total, peak, 0.1).unwrap(), peak);
        assert_eq!(lr_at(1, total, peak, 0.1).unwrap(), peak / 10.0);
        assert_eq!(lr_at(total, total, peak, 0.1).unwrap(), 0.0);
        // Rising before the boundary, falling after.
        for s in 1..10 {
            assert!(lr_at(s, total, peak, 0.1).unwrap() < lr_at(s + 1, total, peak, 0.1).unwrap());
        }
        for s in 10..total {
            assert!(lr_at(s, total, peak, 0.1).unwrap() > lr_at(s + 1, total, peak, 0.1).unwrap());
        }
    }

    #[test]
    fn schedule_edge_cases_and_errors() {
        // All-warmup: the final step is the peak.
        assert_eq!(lr_at(5, 5, 1.0, 1.0).unwrap(), 1.0);
        // No warmup: pure decay hitting zero at the end.
        assert_eq!(lr_at(4, 4, 1.0, 0.0).unwrap(), 0.0);
        assert_eq!(lr_at(1, 4, 1.0, 0.0).unwrap(), 0.75);
        assert!(lr_at(0, 4, 1.0, 0.1).is_err());
        assert!(lr_at(5, 4, 1.0, 0.1).is_err());
        assert!(lr_at(1, 0, 1.0, 0.1).is_err());
        assert!(lr_at(1, 4, 0.0, 0.1).is_err());
        assert!(lr_at(1, 4, 1.0, 1.5).is_err());
    }

    fn params_with_grads(grads: &[f64]) -> ModelParams {
        let cfg = ModelConfig {
            vocab_size: 2,
            d_emb: 2,
            hidden: vec![],
            dropout_rate: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ModelParams::init(&cfg, &mut rng).unwrap();
        let mut it = grads.iter();
        for t in params.tensors_mut() {
            let g: Vec<f64> = (0..t.numel()).map(|_| *it.next().unwrap_or(&0.0)).collect();
            t.accumulate_grad(&g).unwrap();
        }
        params
    }

    #[test]
    fn clipping_rescales_to_the_bound_and_reports_the_raw_norm() {
        // First four gradient entries (3, 4, 0, 0, ...): norm 5.
        let mut params = params_with_grads(&[3.0, 4.0]);
        let norm = clip_gradients(&mut params, 1.0).unwrap();
        assert_eq!(norm, 5.0);
        let squared: f64 = params
            .tensors()
            .iter()
            .filter_map(|t| t.grad())
            .flat_map(|g| g.iter())
            .map(|&g| g * g)
            .sum();
        assert!((squared.sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clipping_below_the_bound_changes_nothing() {
        let mut params = params_with_grads(&[0.3, 0.4]);
        let before: Vec<f64> = params
            .tensors()
            .iter()
            .filter_map(|t| t.grad())
            .flat_map(|g| g.iter().copied())
            .collect();
        let norm = clip_gradients(&mut params, 1.0).unwrap();
        assert_eq!(norm, 0.5);
        let after: Vec<f64> = params
            .tensors()
            .iter()
            .filter_map(|t| t.grad())
            .flat_map(|g| g.iter().copied())
            .collect();
        assert_eq!(before, after);
        assert!(clip_gradients(&mut params, 0.0).is_err());
        assert!(clip_gradients(&mut params, f64::INFINITY).is_err());
    }

    #[test]
    fn adam_matches_a_hand_stepped_scalar_trace() {
        // One parameter, ten fixed gradients, every intermediate written
        // out longhand.
        let grads = [0.3, -0.2, 0.7, 0.1, -0.5, 0.25, 0.0, -0.9, 0.4, 0.6];
        let lr = 0.01;
        let mut expected = 0.5_f64;
        let mut m = 0.0_f64;
        let mut v = 0.0_f64;
        let mut b1t = 1.0_f64;
        let mut b2t = 1.0_f64;
        let mut actual_value = [0.5_f64];
        let mut actual_m = [0.0_f64];
        let mut actual_v = [0.0_f64];
        for (i, &g) in grads.iter().enumerate() {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * (g * g);
            b1t *= 0.9;
            b2t *= 0.999;
            let m_hat = m / (1.0 - b1t);
            let v_hat = v / (1.0 - b2t);
            expected -= lr * m_hat / (v_hat.sqrt() + 1e-6);

            adam_update(
                &mut actual_value,
                &[g],
                &mut actual_m,
                &mut actual_v,
                i + 1,
                lr,
            )
            .unwrap();
            assert!(
                (actual_value[0] - expected).abs() < 1e-12,
                "step {}: {} vs {}",
                i + 1,
                actual_value[0],
                expected
            );
        }
        // The very first update must move by almost exactly lr: with zero
        // history, m_hat / sqrt(v_hat) is g / |g|.
        let mut one = [0.0_f64];
        adam_update(&mut one, &[0.3], &mut [0.0], &mut [0.0], 1, lr).unwrap();
        assert!((one[0] + lr).abs() < lr * 1e-5);
    }

    #[test]
    fn adam_update_rejects_mismatches() {
        assert!(adam_update(&mut [0.0], &[1.0, 2.0], &mut [0.0], &mut [0.0], 1, 0.1).is_err());
        assert!(adam_update(&mut [0.0], &[1.0], &mut [0.0], &mut [0.0], 0, 0.1).is_err());
    }

    #[test]
    fn adam_step_requires_gradients_everywhere() {
        let cfg = ModelConfig {
            vocab_size: 2,
            d_emb: 2,
            hidden: vec![],
            dropout_rate: 0.0,
        };
        let mut params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut state = AdamState::new(&params);
        assert!(adam_step(&mut params, &mut state, 0.1).is_err());

        let mut with_grads = params_with_grads(&[1.0, -1.0, 0.5]);
        let before = with_grads.clone();
        let mut state = AdamState::new(&with_grads);
        adam_step(&mut with_grads, &mut state, 0.1).unwrap();
        assert_eq!(state.step_count(), 1);
        // Tensors whose gradient is all zero stay put; the ones with
        // nonzero entries move.
        assert_ne!(before.embedding.data(), with_grads.embedding.data());
    }

    fn smoke_setup() -> (DatasetSpec, ModelConfig, TrainConfig) {
        let spec = DatasetSpec {
            num_examples: 300,
            vocab_size: 24,
            seq_len: 8,
            options: 3,
            key_token_count: 6,
            label_noise_rate: 0.0,
            seed: 11,
            ..DatasetSpec::default()
        };
        let model = ModelConfig {
            vocab_size: spec.vocab_size,
            d_emb: 12,
            dropout_rate: 0.0,
            ..ModelConfig::default()
        };
        let train_cfg = TrainConfig {
            objective: ObjectiveKind::Standard,
            learning_rate: 0.05,
            batch_size: 32,
            epochs: 12,
            seed: 11,
            ..TrainConfig::default()
        };
        (spec, model, train_cfg)
    }

    #[test]
    fn training_learns_the_clean_task() {
        let (spec, model, cfg) = smoke_setup();
        let data = generate(&spec).unwrap();
        let (train_set, dev_set, _) = split(&data, (0.8, 0.1, 0.1)).unwrap();
        let params = ModelParams::init(&model, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
        let out = train(&params, spec.task_kind, &train_set, &dev_set, &cfg).unwrap();
        let best = out.log.iter().map(|r| r.dev_accuracy).fold(0.0, f64::max);
        assert!(
            best >= 0.95,
            "best dev accuracy {best} after {} epochs; log: {:?}",
            cfg.epochs,
            out.log.iter().map(|r| r.dev_accuracy).collect::<Vec<_>>()
        );
        // Loss should come down substantially from the first epoch.
        assert!(out.log.last().unwrap().train_loss < 0.5 * out.log[0].train_loss);
    }

    #[test]
    fn best_epoch_points_at_the_first_maximum() {
        let (spec, model, mut cfg) = smoke_setup();
        cfg.epochs = 6;
        let data = generate(&spec).unwrap();
        let (train_set, dev_set, _) = split(&data, (0.8, 0.1, 0.1)).unwrap();
        let params = ModelParams::init(&model, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
        let out = train(&params, spec.task_kind, &train_set, &dev_set, &cfg).unwrap();
        let argmax = out
            .log
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| {
                a.dev_accuracy
                    .partial_cmp(&b.dev_accuracy)
                    .unwrap()
                    .then(ib.cmp(ia))
            })
            .map(|(i, _)| i + 1)
            .unwrap();
        assert_eq!(out.best_epoch, argmax);
    }

    #[test]
    fn same_seed_reproduces_bitwise() {
        let (spec, model, mut cfg) = smoke_setup();
        cfg.epochs = 3;
        cfg.objective = ObjectiveKind::Alice;
        cfg.adversarial.epsilon = 0.05;
        let data = generate(&spec).unwrap();
        let (train_set, dev_set, _) = split(&data, (0.8, 0.1, 0.1)).unwrap();
        let params = ModelParams::init(&model, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
        let a = train(&params, spec.task_kind, &train_set, &dev_set, &cfg).unwrap();
        let b = train(&params, spec.task_kind, &train_set, &dev_set, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.log, b.log);
        for (ra, rb) in a.log.iter().zip(&b.log) {
            assert_eq!(ra.train_loss.to_bits(), rb.train_loss.to_bits());
        }
    }

    #[test]
    fn non_finite_parameters_abort_with_the_step_named() {
        let (spec, model, mut cfg) = smoke_setup();
        cfg.epochs = 1;
        let data = generate(&spec).unwrap();
        let (train_set, dev_set, _) = split(&data, (0.8, 0.1, 0.1)).unwrap();
        let mut params = ModelParams::init(&model, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        params.embedding.data_mut()[0] = f64::NAN;
        let err = train(&params, spec.task_kind, &train_set, &dev_set, &cfg).unwrap_err();
        match err {
            Error::NonFinite { context } => {
                assert!(context.contains("epoch 1"), "context: {context}")
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let bad = [
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                warmup_fraction: 1.2,
                ..TrainConfig::default()
            },
            TrainConfig {
                clip_norm: -1.0,
                ..TrainConfig::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?} should fail validation");
        }
        assert!(TrainConfig::default().validate().is_ok());
    }
}
