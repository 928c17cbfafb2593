//! Adaptive test-time reasoning with KL halting, ranking and evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Mode, Model};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::graph::{candidate_set, CandidateSet, ItemId, SwingGraph, UserId};
use crate::scalar::Scalar;
use crate::simplex::{Categorical, STUDENT_FLOOR};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub window: usize,
    pub hops: usize,
    pub max_candidates: usize,
    /// Halting threshold on `D_KL(p_{t-1} ‖ p_t)`.
    pub epsilon: f64,
    pub max_steps: usize,
    pub use_context: bool,
    /// Drop items already in the history from the ranking.
    pub exclude_history: bool,
    pub top_k: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            window: 3,
            hops: 1,
            max_candidates: 20,
            epsilon: 0.01,
            max_steps: 5,
            use_context: true,
            exclude_history: true,
            top_k: 10,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::InvalidParameter("max inference steps must be >= 1".into()));
        }
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(Error::InvalidParameter(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.window == 0 || self.max_candidates == 0 {
            return Err(Error::InvalidParameter("window and max_candidates must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult<S: Scalar = f64> {
    pub distribution: Categorical<S>,
    pub steps_used: usize,
    pub kl_deltas: Vec<f64>,
    pub top_k: Vec<ItemId>,
}

/// Context tokens for a history: the graph candidate set, or nothing when
/// context conditioning is switched off.
pub fn context_items(
    graph: &SwingGraph,
    history: &[ItemId],
    window: usize,
    hops: usize,
    max_candidates: usize,
    use_context: bool,
) -> Result<(CandidateSet, Vec<ItemId>)> {
    let cands = candidate_set(graph, history, window, hops, max_candidates)?;
    let ctx = if use_context { cands.items().collect() } else { Vec::new() };
    Ok((cands, ctx))
}

/// Keeps the most recent `max` items.
pub fn clip_history(history: &[ItemId], max: usize) -> &[ItemId] {
    &history[history.len().saturating_sub(max)..]
}

fn softmax_f64<S: Scalar>(z: &[S]) -> Vec<f64> {
    let z: Vec<f64> = z.iter().map(|v| v.as_f64()).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    p
}

/// `D_KL(p ‖ q)` over aligned dense vectors with `q` floored.
pub fn dense_kl(p: &[f64], q: &[f64]) -> f64 {
    let kl: f64 =
        p.iter().zip(q).filter(|(&a, _)| a > 0.0).map(|(&a, &b)| a * (a.ln() - b.max(STUDENT_FLOOR).ln())).sum();
    kl.max(0.0)
}

/// Runs reasoning steps one at a time, yielding the temperature-1 logits.
struct Stepper<'m, S: Scalar> {
    fwd: crate::backbone::Forward<'m, S>,
    r: crate::tensor::Var,
    step: usize,
}

impl<'m, S: Scalar> Stepper<'m, S> {
    fn new(model: &'m Model<S>, context: &[ItemId], history: &[ItemId]) -> Result<Self> {
        let mut fwd = model.forward(Mode::Eval);
        let h = fwd.encode_prefix(context, history)?;
        let r = fwd.initial_state(h)?;
        Ok(Self { fwd, r, step: 0 })
    }

    fn next(&mut self) -> Result<Vec<f64>> {
        if self.step > 0 {
            let prev = self.r;
            self.r = self.fwd.append_state(prev)?;
        }
        self.step += 1;
        self.r = self.fwd.rescale(self.r)?;
        let z = self.fwd.logits(self.r)?;
        Ok(softmax_f64(self.fwd.tape().value(z)))
    }
}

/// First step `t ≥ 2` with `kl[t-2] < epsilon`, else `max_steps`.
pub fn halting_step(kl: &[f64], epsilon: f64, max_steps: usize) -> usize {
    (2..=max_steps).find(|&t| kl.get(t - 2).is_some_and(|&d| d < epsilon)).unwrap_or(max_steps)
}

fn rank_order(vocab: &[ItemId], p: &[f64], exclude: &BTreeSet<ItemId>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).filter(|&i| !exclude.contains(&vocab[i])).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(vocab[a].cmp(&vocab[b])));
    idx
}

/// 1-indexed rank of `target`, or `None` if it is excluded or unknown.
fn target_position(vocab: &[ItemId], p: &[f64], exclude: &BTreeSet<ItemId>, target: ItemId) -> Option<usize> {
    if exclude.contains(&target) {
        return None;
    }
    let t = vocab.binary_search(&target).ok()?;
    let pt = p[t];
    let ahead = (0..p.len())
        .filter(|&i| i != t && !exclude.contains(&vocab[i]))
        .filter(|&i| p[i] > pt || (p[i] == pt && vocab[i] < target))
        .count();
    Some(ahead + 1)
}

fn exclusion(history: &[ItemId], on: bool) -> BTreeSet<ItemId> {
    if on {
        history.iter().copied().collect()
    } else {
        BTreeSet::new()
    }
}

/// Algorithm-style adaptive inference: stop once consecutive predictive
/// distributions differ by less than `epsilon` in KL.
pub fn adaptive_infer<S: Scalar>(
    model: &Model<S>,
    history: &[ItemId],
    graph: &SwingGraph,
    cfg: &InferenceConfig,
) -> Result<InferenceResult<S>> {
    cfg.validate()?;
    let history = clip_history(history, model.config().max_history);
    let (_, ctx) = context_items(graph, history, cfg.window, cfg.hops, cfg.max_candidates, cfg.use_context)?;
    let mut stepper = Stepper::new(model, &ctx, history)?;
    let mut p = stepper.next()?;
    let mut kl_deltas = Vec::new();
    let mut steps_used = 1;
    for t in 2..=cfg.max_steps {
        let next = stepper.next()?;
        let d = dense_kl(&p, &next);
        kl_deltas.push(d);
        p = next;
        steps_used = t;
        if d < cfg.epsilon {
            break;
        }
    }
    let vocab = model.vocab().items();
    let order = rank_order(vocab, &p, &exclusion(history, cfg.exclude_history));
    let top_k = order.iter().take(cfg.top_k).map(|&i| vocab[i]).collect();
    let mass = p.iter().map(|&v| S::of(v)).collect();
    let distribution = Categorical::from_weights(vocab.to_vec(), mass)?;
    Ok(InferenceResult { distribution, steps_used, kl_deltas, top_k })
}

pub fn recall_at_k(ranked: &[ItemId], target: ItemId, k: usize) -> f64 {
    if ranked.iter().take(k).any(|&i| i == target) {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(ranked: &[ItemId], target: ItemId, k: usize) -> f64 {
    ranked.iter().take(k).position(|&i| i == target).map_or(0.0, |p| ndcg_from_position(p + 1))
}

fn ndcg_from_position(pos: usize) -> f64 {
    1.0 / ((pos + 1) as f64).log2()
}

/// Per-user record of a full `max_steps` unroll.
#[derive(Debug, Clone, PartialEq)]
pub struct UserTrace {
    pub user: UserId,
    /// Target rank after each step; `None` when it cannot be ranked.
    pub positions: Vec<Option<usize>>,
    /// `D_KL(p_{t-1} ‖ p_t)` for `t = 2..=max_steps`.
    pub kl: Vec<f64>,
}

pub fn trace_users<S: Scalar>(
    model: &Model<S>,
    examples: &[Example],
    graph: &SwingGraph,
    cfg: &InferenceConfig,
) -> Result<Vec<UserTrace>> {
    cfg.validate()?;
    let vocab = model.vocab().items();
    examples
        .par_iter()
        .map(|ex| {
            let history = clip_history(&ex.history, model.config().max_history);
            let (_, ctx) = context_items(graph, history, cfg.window, cfg.hops, cfg.max_candidates, cfg.use_context)?;
            let exclude = exclusion(history, cfg.exclude_history);
            let mut stepper = Stepper::new(model, &ctx, history)?;
            let mut positions = Vec::with_capacity(cfg.max_steps);
            let mut kl = Vec::with_capacity(cfg.max_steps.saturating_sub(1));
            let mut prev: Option<Vec<f64>> = None;
            for _ in 0..cfg.max_steps {
                let p = stepper.next()?;
                positions.push(target_position(vocab, &p, &exclude, ex.target));
                if let Some(q) = &prev {
                    kl.push(dense_kl(q, &p));
                }
                prev = Some(p);
            }
            Ok(UserTrace { user: ex.user, positions, kl })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub users: usize,
    pub epsilon: f64,
    pub max_steps: usize,
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    /// Mean halting step over all users.
    pub mean_steps: f64,
    /// Mean halting step over users that stopped before `max_steps`.
    pub mean_steps_halted: Option<f64>,
    /// NDCG@10 after running every step.
    pub ndcg_all_steps: f64,
    /// Mean and variance of the KL delta at step `t`, stored at index `t - 2`.
    pub kl_mean: Vec<f64>,
    pub kl_var: Vec<f64>,
}

pub const METRIC_KS: [usize; 2] = [5, 10];

fn hit(pos: Option<usize>, k: usize) -> (f64, f64) {
    match pos {
        Some(p) if p <= k => (1.0, ndcg_from_position(p)),
        _ => (0.0, 0.0),
    }
}

/// Metrics for a halting threshold, derived from full traces.
pub fn summarize(traces: &[UserTrace], epsilon: f64, max_steps: usize) -> Result<EvalReport> {
    if traces.is_empty() {
        return Err(Error::EmptySplit("evaluation"));
    }
    if max_steps == 0 || traces.iter().any(|t| t.positions.len() < max_steps) {
        return Err(Error::InvalidParameter(format!("traces are shorter than {max_steps} steps")));
    }
    let n = traces.len() as f64;
    let mut recall: BTreeMap<usize, f64> = METRIC_KS.iter().map(|&k| (k, 0.0)).collect();
    let mut ndcg = recall.clone();
    let (mut steps_total, mut halted_total, mut halted_users, mut all_steps) = (0.0, 0.0, 0usize, 0.0);
    for t in traces {
        let step = halting_step(&t.kl, epsilon, max_steps);
        steps_total += step as f64;
        if step < max_steps {
            halted_total += step as f64;
            halted_users += 1;
        }
        let pos = t.positions[step - 1];
        for &k in &METRIC_KS {
            let (r, g) = hit(pos, k);
            *recall.get_mut(&k).expect("metric k") += r;
            *ndcg.get_mut(&k).expect("metric k") += g;
        }
        all_steps += hit(t.positions[max_steps - 1], 10).1;
    }
    recall.values_mut().for_each(|v| *v /= n);
    ndcg.values_mut().for_each(|v| *v /= n);
    let mut kl_mean = Vec::new();
    let mut kl_var = Vec::new();
    for s in 0..max_steps.saturating_sub(1) {
        let mean = traces.iter().map(|t| t.kl[s]).sum::<f64>() / n;
        let var = traces.iter().map(|t| (t.kl[s] - mean).powi(2)).sum::<f64>() / n;
        kl_mean.push(mean);
        kl_var.push(var);
    }
    Ok(EvalReport {
        users: traces.len(),
        epsilon,
        max_steps,
        recall,
        ndcg,
        mean_steps: steps_total / n,
        mean_steps_halted: (halted_users > 0).then(|| halted_total / halted_users as f64),
        ndcg_all_steps: all_steps / n,
        kl_mean,
        kl_var,
    })
}

pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    examples: &[Example],
    graph: &SwingGraph,
    cfg: &InferenceConfig,
) -> Result<EvalReport> {
    let traces = trace_users(model, examples, graph, cfg)?;
    summarize(&traces, cfg.epsilon, cfg.max_steps)
}

impl EvalReport {
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "metric,K,value")?;
        for (k, v) in &self.recall {
            writeln!(w, "recall,{k},{v}")?;
        }
        for (k, v) in &self.ndcg {
            writeln!(w, "ndcg,{k},{v}")?;
        }
        writeln!(w, "ndcg_all_steps,10,{}", self.ndcg_all_steps)?;
        writeln!(w, "mean_infer_steps,,{}", self.mean_steps)?;
        match self.mean_steps_halted {
            Some(v) => writeln!(w, "mean_infer_steps_halted,,{v}")?,
            None => writeln!(w, "mean_infer_steps_halted,,")?,
        }
        for (i, (m, v)) in self.kl_mean.iter().zip(&self.kl_var).enumerate() {
            writeln!(w, "kl_mean,{},{m}", i + 2)?;
            writeln!(w, "kl_var,{},{v}", i + 2)?;
        }
        Ok(())
    }
}
