//! Multi-step latent reasoning objective and the training loop.
//!
//! Each step decodes the rescaled latent state at a scheduled temperature and
//! is scored by cross-entropy on the target plus a KL pull toward a
//! rank-based teacher over the graph candidate set.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Forward, Mode, Model};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::graph::{ItemId, SwingGraph};
use crate::inference::{clip_history, context_items, summarize, trace_users, InferenceConfig};
use crate::scalar::Scalar;
use crate::seed;
use crate::simplex::{kl_divergence, rank_teacher_prior, Categorical, TeacherSchedule, STUDENT_FLOOR};
use crate::tensor::{Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemperatureSchedule {
    /// `τ_base · t^α`
    Increasing,
    /// `τ_base` at every step.
    Constant,
    /// `τ_base · (T − t + 1)^α`
    Decreasing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningConfig {
    pub train_steps: usize,
    pub reg_weight: f64,
    pub gamma_base: f64,
    pub tau_base: f64,
    pub tau_exponent: f64,
    pub temperature_schedule: TemperatureSchedule,
    pub window: usize,
    pub hops: usize,
    pub max_candidates: usize,
    pub use_context: bool,
    pub epsilon: f64,
    pub max_infer_steps: usize,
    pub exclude_history: bool,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation NDCG@10 improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
}

impl Default for ReasoningConfig {
    fn default() -> Self {
        Self {
            train_steps: 3,
            reg_weight: 1.0,
            gamma_base: 1.0,
            tau_base: 1.0,
            tau_exponent: 1.5,
            temperature_schedule: TemperatureSchedule::Increasing,
            window: 3,
            hops: 1,
            max_candidates: 20,
            use_context: true,
            epsilon: 0.01,
            max_infer_steps: 5,
            exclude_history: true,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 64,
            epochs: 50,
            patience: 5,
            seed: 42,
        }
    }
}

impl ReasoningConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.train_steps == 0 || self.max_infer_steps == 0 {
            return bad("train_steps and max_infer_steps must be >= 1".into());
        }
        if !(self.reg_weight >= 0.0) || !self.reg_weight.is_finite() {
            return bad(format!("reg_weight must be >= 0, got {}", self.reg_weight));
        }
        if !(self.gamma_base >= 1.0) || !self.gamma_base.is_finite() {
            return bad(format!("gamma_base must be >= 1, got {}", self.gamma_base));
        }
        if !(self.tau_base > 0.0) || !self.tau_base.is_finite() {
            return bad(format!("tau_base must be > 0, got {}", self.tau_base));
        }
        if !(self.tau_exponent > 1.0) || !self.tau_exponent.is_finite() {
            return bad(format!("tau_exponent must be > 1, got {}", self.tau_exponent));
        }
        if self.window == 0 || self.max_candidates == 0 {
            return bad("window and max_candidates must be >= 1".into());
        }
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return bad(format!("epsilon must be >= 0, got {}", self.epsilon));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return bad("learning_rate, batch_size and epochs must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be > 0".into());
        }
        Ok(())
    }

    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig {
            window: self.window,
            hops: self.hops,
            max_candidates: self.max_candidates,
            epsilon: self.epsilon,
            max_steps: self.max_infer_steps,
            use_context: self.use_context,
            exclude_history: self.exclude_history,
            top_k: 10,
        }
    }

    pub fn teacher_schedule(&self) -> Result<TeacherSchedule<f64>> {
        TeacherSchedule::new(self.gamma_base, self.train_steps)
    }
}

/// Prediction temperature at reasoning step `step` (1-based).
pub fn temperature_at(cfg: &ReasoningConfig, step: usize) -> Result<f64> {
    if step == 0 || step > cfg.train_steps {
        return Err(Error::StepOutOfRange { step, max: cfg.train_steps });
    }
    let t = step as f64;
    Ok(match cfg.temperature_schedule {
        TemperatureSchedule::Increasing => cfg.tau_base * t.powf(cfg.tau_exponent),
        TemperatureSchedule::Constant => cfg.tau_base,
        TemperatureSchedule::Decreasing => cfg.tau_base * ((cfg.train_steps - step + 1) as f64).powf(cfg.tau_exponent),
    })
}

/// `−ln p(target)`.
pub fn main_loss<S: Scalar>(p: &Categorical<S>, target: ItemId) -> Result<S> {
    if !p.support().contains(&target) {
        return Err(Error::UnknownItem(target));
    }
    Ok(-p.prob(target).ln())
}

/// `D_KL(q ‖ p)` with `p` restricted to the support of `q`, renormalized and floored.
pub fn reg_loss<S: Scalar>(teacher: &Categorical<S>, student: &Categorical<S>) -> Result<S> {
    let restricted = student.restrict(teacher.support())?.floored(S::of(STUDENT_FLOOR));
    kl_divergence(teacher, &restricted)
}

/// `Σ_t (main_t + λ · reg_t)`.
pub fn total_loss<S: Scalar>(main: &[S], reg: &[S], reg_weight: S) -> Result<S> {
    if main.len() != reg.len() {
        return Err(Error::Shape {
            op: "total_loss",
            detail: format!("{} main vs {} reg terms", main.len(), reg.len()),
        });
    }
    Ok(main.iter().zip(reg).map(|(&m, &r)| m + reg_weight * r).sum())
}

/// A training instance with its context and per-step teachers precomputed.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub history: Vec<ItemId>,
    pub context: Vec<ItemId>,
    pub target: ItemId,
    /// Teacher for each step, all over the same support (target first).
    pub teachers: Vec<Categorical<f64>>,
    target_row: usize,
    support_rows: Vec<usize>,
}

pub fn prepare_examples<S: Scalar>(
    model: &Model<S>,
    graph: &SwingGraph,
    examples: &[Example],
    cfg: &ReasoningConfig,
) -> Result<Vec<PreparedExample>> {
    let schedule = cfg.teacher_schedule()?;
    let vocab = model.vocab();
    examples
        .par_iter()
        .map(|ex| {
            let history = clip_history(&ex.history, model.config().max_history).to_vec();
            let (cands, context) =
                context_items(graph, &history, cfg.window, cfg.hops, cfg.max_candidates, cfg.use_context)?;
            let teachers = (1..=cfg.train_steps)
                .map(|t| rank_teacher_prior(&cands, ex.target, schedule.gamma(t)?))
                .collect::<Result<Vec<_>>>()?;
            let support_rows = vocab.rows(teachers[0].support())?;
            Ok(PreparedExample {
                history,
                context,
                target: ex.target,
                target_row: vocab.row(ex.target)?,
                support_rows,
                teachers,
            })
        })
        .collect()
}

/// Largest total-variation step between consecutive teachers of any example.
pub fn teacher_drift(prepared: &[PreparedExample]) -> f64 {
    prepared
        .iter()
        .flat_map(|ex| ex.teachers.windows(2).map(|w| crate::simplex::tv_distance(&w[1], &w[0])))
        .fold(0.0, f64::max)
}

struct SampleLoss {
    total: Var,
    main: Vec<f64>,
    reg: Vec<f64>,
}

fn sample_objective<S: Scalar>(
    fwd: &mut Forward<'_, S>,
    ex: &PreparedExample,
    cfg: &ReasoningConfig,
) -> Result<SampleLoss> {
    let hidden = fwd.encode_prefix(&ex.context, &ex.history)?;
    let mut r = fwd.initial_state(hidden)?;
    let mut terms = Vec::with_capacity(cfg.train_steps);
    let mut main = Vec::with_capacity(cfg.train_steps);
    let mut reg = Vec::with_capacity(cfg.train_steps);
    for t in 1..=cfg.train_steps {
        if t > 1 {
            r = fwd.append_state(r)?;
        }
        r = fwd.rescale(r)?;
        let tau = S::of(temperature_at(cfg, t)?);
        let z = fwd.logits(r)?;
        let tape = fwd.tape_mut();
        let lm = tape.cross_entropy(z, ex.target_row, tau)?;
        main.push(tape.scalar_value(lm).as_f64());
        if cfg.reg_weight > 0.0 {
            let q: Vec<S> = ex.teachers[t - 1].mass().iter().map(|&m| S::of(m)).collect();
            let lr = tape.kl_to_fixed_teacher(z, &ex.support_rows, &q, tau)?;
            reg.push(tape.scalar_value(lr).as_f64());
            let weighted = tape.scale(lr, S::of(cfg.reg_weight));
            terms.push(tape.add(lm, weighted)?);
        } else {
            reg.push(0.0);
            terms.push(lm);
        }
    }
    let tape = fwd.tape_mut();
    let mut total = terms[0];
    for &term in &terms[1..] {
        total = tape.add(total, term)?;
    }
    Ok(SampleLoss { total, main, reg })
}

/// Deterministic unroll: `(r_t, p_t)` for `t = 1..=train_steps` at the training temperatures.
pub fn unroll<S: Scalar>(
    model: &Model<S>,
    context: &[ItemId],
    history: &[ItemId],
    cfg: &ReasoningConfig,
) -> Result<Vec<(Vec<S>, Categorical<S>)>> {
    let mut fwd = model.forward(Mode::Eval);
    let hidden = fwd.encode_prefix(context, history)?;
    let mut r = fwd.initial_state(hidden)?;
    let mut out = Vec::with_capacity(cfg.train_steps);
    for t in 1..=cfg.train_steps {
        if t > 1 {
            r = fwd.append_state(r)?;
        }
        r = fwd.rescale(r)?;
        let z = fwd.logits(r)?;
        let tau = S::of(temperature_at(cfg, t)?);
        let p = Categorical::softmax(model.vocab().items().to_vec(), fwd.tape().value(z), tau)?;
        out.push((fwd.tape().value(r).to_vec(), p));
    }
    Ok(out)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<S: Scalar> {
    lr: S,
    beta1: S,
    beta2: S,
    eps: S,
    t: i32,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: &[Tensor<S>], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<S>> = params.iter().map(|p| vec![S::zero(); p.len()]).collect();
        Self {
            lr: S::of(lr),
            beta1: S::of(beta1),
            beta2: S::of(beta2),
            eps: S::of(eps),
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update from the accumulated `grad` of every parameter.
    pub fn step(&mut self, params: &mut [Tensor<S>]) {
        self.t += 1;
        let c1 = S::one() - self.beta1.powi(self.t);
        let c2 = S::one() - self.beta2.powi(self.t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.grad.take() else { continue };
            let data = p.data_mut();
            for k in 0..data.len() {
                m[k] = self.beta1 * m[k] + (S::one() - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (S::one() - self.beta2) * g[k] * g[k];
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                data[k] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_main: f64,
    pub mean_reg: f64,
    pub val_recall10: f64,
    pub val_ndcg10: f64,
    pub teacher_drift_max_tv: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
    pub best_val_ndcg10: f64,
    /// Mean main loss at the last step over the final epoch.
    pub final_step_main: f64,
}

impl TrainReport {
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "epoch,mean_main,mean_reg,val_recall@10,val_ndcg@10,teacher_drift_max_tv")?;
        for e in &self.epochs {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                e.epoch, e.mean_main, e.mean_reg, e.val_recall10, e.val_ndcg10, e.teacher_drift_max_tv
            )?;
        }
        Ok(())
    }
}

/// Validation Recall@10 and NDCG@10 after a fixed `train_steps` unroll.
pub fn validation_metrics<S: Scalar>(
    model: &Model<S>,
    valid: &[Example],
    graph: &SwingGraph,
    cfg: &ReasoningConfig,
) -> Result<(f64, f64)> {
    let icfg = InferenceConfig { epsilon: 0.0, max_steps: cfg.train_steps, ..cfg.inference() };
    let traces = trace_users(model, valid, graph, &icfg)?;
    let report = summarize(&traces, 0.0, cfg.train_steps)?;
    Ok((report.recall[&10], report.ndcg[&10]))
}

/// Trains `model` in place. Keeps the parameters of the best validation epoch
/// when early stopping is on.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    train_set: &[Example],
    valid: &[Example],
    graph: &SwingGraph,
    cfg: &ReasoningConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if cfg.patience > 0 && valid.is_empty() {
        return Err(Error::EmptySplit("validation"));
    }
    if cfg.train_steps > model.config().max_reason + 1 {
        return Err(Error::StepOutOfRange { step: cfg.train_steps, max: model.config().max_reason + 1 });
    }
    let prepared = prepare_examples(model, graph, train_set, cfg)?;
    let drift = teacher_drift(&prepared);
    let mut adam = Adam::new(model.params(), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut logs = Vec::new();
    let mut best = (0usize, f64::NEG_INFINITY, model.params().to_vec());
    let mut final_step_main = f64::NAN;
    let mut stale = 0;

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[0x5EED, epoch as u64]));
        order.shuffle(&mut rng);
        let (mut sum_main, mut sum_reg, mut sum_last) = (0.0, 0.0, 0.0);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let frozen: &Model<S> = model;
            let results: Vec<(Vec<Option<Vec<S>>>, SampleLoss)> = batch
                .par_iter()
                .map(|&i| {
                    let dropout_seed = seed::derive(cfg.seed, &[epoch as u64, b as u64, i as u64]);
                    let mut fwd = frozen.forward(Mode::Train { dropout_seed: Some(dropout_seed) });
                    let loss = sample_objective(&mut fwd, &prepared[i], cfg)?;
                    let grads = fwd.tape().backward(loss.total)?;
                    let owned = fwd.param_grads(&grads).into_iter().map(|g| g.map(<[S]>::to_vec)).collect();
                    Ok((owned, loss))
                })
                .collect::<Result<_>>()?;
            let scale = S::one() / S::of_usize(batch.len());
            for p in model.params_mut() {
                p.zero_grad();
            }
            for (grads, loss) in &results {
                for (p, g) in model.params_mut().iter_mut().zip(grads) {
                    if let Some(g) = g {
                        p.accumulate_grad(g);
                    }
                }
                sum_main += loss.main.iter().sum::<f64>();
                sum_reg += loss.reg.iter().sum::<f64>();
                sum_last += loss.main[cfg.train_steps - 1];
            }
            for p in model.params_mut() {
                if let Some(g) = p.grad.as_mut() {
                    g.iter_mut().for_each(|v| *v *= scale);
                }
            }
            adam.step(model.params_mut());
        }
        let n = (prepared.len() * cfg.train_steps) as f64;
        final_step_main = sum_last / prepared.len() as f64;
        let (val_recall10, val_ndcg10) =
            if valid.is_empty() { (f64::NAN, f64::NAN) } else { validation_metrics(model, valid, graph, cfg)? };
        logs.push(EpochLog {
            epoch,
            mean_main: sum_main / n,
            mean_reg: sum_reg / n,
            val_recall10,
            val_ndcg10,
            teacher_drift_max_tv: drift,
        });
        if cfg.patience == 0 {
            continue;
        }
        if val_ndcg10 > best.1 {
            best = (epoch, val_ndcg10, model.params().to_vec());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    let (best_epoch, best_val) = if cfg.patience > 0 {
        let (epoch, val, params) = best;
        for (dst, src) in model.params_mut().iter_mut().zip(params) {
            *dst = src;
        }
        (epoch, val)
    } else {
        let last = logs.last().expect("at least one epoch");
        (last.epoch, last.val_ndcg10)
    };
    for p in model.params_mut() {
        p.zero_grad();
    }
    Ok(TrainReport { epochs: logs, best_epoch, best_val_ndcg10: best_val, final_step_main })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, Vocab};
    use crate::graph::UserId;
    use crate::simplex::entropy;

    fn ids(v: &[u64]) -> Vec<ItemId> {
        v.iter().map(|&i| ItemId(i)).collect()
    }

    #[test]
    fn temperature_examples() {
        let cfg = ReasoningConfig { tau_base: 1.0, tau_exponent: 2.0, train_steps: 3, ..Default::default() };
        let taus: Vec<f64> = (1..=3).map(|t| temperature_at(&cfg, t).unwrap()).collect();
        assert_eq!(taus, vec![1.0, 4.0, 9.0]);
        let cfg = ReasoningConfig { tau_base: 0.5, tau_exponent: 1.5, train_steps: 4, ..Default::default() };
        assert!((temperature_at(&cfg, 4).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(temperature_at(&cfg, 1).unwrap(), 0.5);
        assert!(temperature_at(&cfg, 0).is_err());
        let cfg = ReasoningConfig { temperature_schedule: TemperatureSchedule::Decreasing, tau_exponent: 2.0, ..cfg };
        assert_eq!(temperature_at(&cfg, 1).unwrap(), 8.0);
        assert_eq!(temperature_at(&cfg, 4).unwrap(), 0.5);
    }

    #[test]
    fn config_validation() {
        assert!(ReasoningConfig::default().validate().is_ok());
        for bad in [
            ReasoningConfig { tau_exponent: 1.0, ..Default::default() },
            ReasoningConfig { gamma_base: 0.5, ..Default::default() },
            ReasoningConfig { train_steps: 0, ..Default::default() },
            ReasoningConfig { reg_weight: -1.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn loss_examples() {
        let p = Categorical::<f64>::point_mass(ItemId(1));
        assert_eq!(main_loss(&p, ItemId(1)).unwrap(), 0.0);
        let e = std::f64::consts::E;
        let p = Categorical::new(ids(&[1, 2]), vec![1.0 / e, 1.0 - 1.0 / e]).unwrap();
        assert!((main_loss(&p, ItemId(1)).unwrap() - 1.0).abs() < 1e-15);
        let u = Categorical::<f64>::uniform(ids(&[1, 2, 3, 4])).unwrap();
        assert!((main_loss(&u, ItemId(3)).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(matches!(main_loss(&u, ItemId(9)), Err(Error::UnknownItem(_))));

        let q = Categorical::<f64>::new(ids(&[1, 2]), vec![0.25, 0.75]).unwrap();
        let student = Categorical::new(ids(&[1, 2, 3]), vec![0.2, 0.6, 0.2]).unwrap();
        assert!(reg_loss(&q, &student).unwrap().abs() < 1e-15);
        let point = Categorical::<f64>::new(ids(&[2, 5]), vec![1.0, 0.0]).unwrap();
        let s = Categorical::new(ids(&[2, 5]), vec![0.3, 0.7]).unwrap();
        assert!((reg_loss(&point, &s).unwrap() - (1.0f64 / 0.3).ln()).abs() < 1e-12);

        assert_eq!(total_loss(&[1.0, 2.0], &[5.0, 7.0], 0.0).unwrap(), 3.0);
        assert_eq!(total_loss(&[1.5], &[2.0], 0.5).unwrap(), 2.5);
        assert_eq!(total_loss(&[1.0, 2.0], &[0.5, 0.25], 2.0).unwrap(), 1.0 + 1.0 + 2.0 + 0.5);
        assert!(total_loss(&[1.0], &[], 1.0).is_err());
    }

    #[test]
    fn schedules_are_monotone_for_every_horizon() {
        let graph = SwingGraph::from_edges(
            Default::default(),
            ids(&[1, 2, 3, 4, 5]),
            [(ItemId(1), ItemId(2), 0.9), (ItemId(1), ItemId(3), 0.5), (ItemId(1), ItemId(4), 0.1)],
        );
        let cands = crate::graph::candidate_set(&graph, &ids(&[1]), 1, 1, 10).unwrap();
        for steps in 1..=5 {
            let cfg = ReasoningConfig { train_steps: steps, ..Default::default() };
            let schedule = cfg.teacher_schedule().unwrap();
            let mut prev: Option<(f64, f64, f64)> = None;
            for t in 1..=steps {
                let tau = temperature_at(&cfg, t).unwrap();
                let gamma = schedule.gamma(t).unwrap();
                let h = entropy(&rank_teacher_prior(&cands, ItemId(5), gamma).unwrap());
                if let Some((pt, pg, ph)) = prev {
                    assert!(tau > pt && gamma < pg && h <= ph);
                }
                prev = Some((tau, gamma, h));
            }
        }
    }

    fn tiny_setup(reg_weight: f64) -> (Model<f64>, SwingGraph, Vec<Example>, ReasoningConfig) {
        let vocab = Vocab::new((1..=12).map(ItemId)).unwrap();
        let bcfg =
            BackboneConfig { d: 16, max_history: 8, max_context: 6, max_reason: 4, dropout: 0.0, ..Default::default() };
        let model = Model::new(bcfg, vocab).unwrap();
        let graph = SwingGraph::from_edges(
            Default::default(),
            (1..=12).map(ItemId),
            (1..12).map(|i| (ItemId(i), ItemId(i + 1), 1.0 / i as f64)),
        );
        let examples: Vec<Example> =
            (0..8).map(|u| Example { user: UserId(u), history: ids(&[1 + u, 2 + u]), target: ItemId(3 + u) }).collect();
        let cfg = ReasoningConfig {
            train_steps: 2,
            reg_weight,
            window: 2,
            max_candidates: 6,
            batch_size: 4,
            epochs: 3,
            patience: 0,
            learning_rate: 1e-2,
            ..Default::default()
        };
        (model, graph, examples, cfg)
    }

    #[test]
    fn sample_objective_matches_unrolled_losses() {
        let (model, graph, examples, cfg) = tiny_setup(0.7);
        let prepared = prepare_examples(&model, &graph, &examples, &cfg).unwrap();
        let ex = &prepared[2];
        let mut fwd = model.forward(Mode::Train { dropout_seed: None });
        let loss = sample_objective(&mut fwd, ex, &cfg).unwrap();
        let steps = unroll(&model, &ex.context, &ex.history, &cfg).unwrap();
        let mut main = Vec::new();
        let mut reg = Vec::new();
        for (t, (_, p)) in steps.iter().enumerate() {
            main.push(main_loss(p, ex.target).unwrap());
            reg.push(reg_loss(&ex.teachers[t], p).unwrap());
        }
        for t in 0..2 {
            assert!((main[t] - loss.main[t]).abs() < 1e-10);
            assert!((reg[t] - loss.reg[t]).abs() < 1e-10);
        }
        let total = total_loss(&main, &reg, 0.7).unwrap();
        assert!((fwd.tape().scalar_value(loss.total) - total).abs() < 1e-10);
    }

    #[test]
    fn zero_weight_total_is_sum_of_main() {
        let (model, graph, examples, cfg) = tiny_setup(0.0);
        let prepared = prepare_examples(&model, &graph, &examples, &cfg).unwrap();
        let mut fwd = model.forward(Mode::Train { dropout_seed: None });
        let loss = sample_objective(&mut fwd, &prepared[0], &cfg).unwrap();
        assert_eq!(fwd.tape().scalar_value(loss.total), loss.main[0] + loss.main[1]);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (model, graph, examples, cfg) = tiny_setup(1.0);
        let cfg = ReasoningConfig { epochs: 20, ..cfg };
        let mut a = model.clone();
        let ra = train(&mut a, &examples, &examples, &graph, &cfg).unwrap();
        let mut b = model;
        let rb = train(&mut b, &examples, &examples, &graph, &cfg).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.params(), b.params());
        assert!(ra.epochs.last().unwrap().mean_main < ra.epochs[0].mean_main);
        assert!(ra.epochs[0].teacher_drift_max_tv > 0.0);
        let mut csv = Vec::new();
        ra.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("epoch,mean_main,mean_reg,val_recall@10,val_ndcg@10,teacher_drift_max_tv\n1,"));
        assert_eq!(text.lines().count(), 21);
    }

    #[test]
    fn early_stopping_requires_validation() {
        let (mut model, graph, examples, cfg) = tiny_setup(1.0);
        let cfg = ReasoningConfig { patience: 2, ..cfg };
        assert!(matches!(train(&mut model, &examples, &[], &graph, &cfg), Err(Error::EmptySplit(_))));
        let report = train(&mut model, &examples, &examples, &graph, &ReasoningConfig { epochs: 30, ..cfg }).unwrap();
        let best = report.epochs.iter().map(|e| e.val_ndcg10).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(report.best_val_ndcg10, best);
        let (_, ndcg) =
            validation_metrics(&model, &examples, &graph, &ReasoningConfig { patience: 2, ..tiny_setup(1.0).3 })
                .unwrap();
        assert_eq!(ndcg, best);
    }
}
