//! Exact checks of the variational bound, the KL gradient identity, the
//! tracking bound under contraction, Pinsker's inequality and the cost model.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::ItemId;
use crate::simplex::{barycenter, kl_divergence, tv_distance, Categorical};
use crate::tensor::{Tape, Tensor};

/// Outcome of one named check. `slack` is the worst observed margin; it is
/// nonnegative exactly when the check passes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub check: String,
    pub status: Status,
    pub slack: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
}

impl CheckOutcome {
    fn new(check: &str, slack: f64, seed: u64) -> Self {
        let status = if slack >= 0.0 { Status::Pass } else { Status::Fail };
        Self { check: check.to_string(), status, slack, seed }
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }
}

pub fn write_jsonl(outcomes: &[CheckOutcome], mut w: impl Write) -> Result<()> {
    for o in outcomes {
        serde_json::to_writer(&mut w, o)?;
        writeln!(w)?;
    }
    Ok(())
}

fn support(n: usize) -> Vec<ItemId> {
    (0..n as u64).map(ItemId).collect()
}

/// Flat Dirichlet draw; `sharpness > 1` pushes mass toward a single point.
pub fn random_distribution(rng: &mut impl Rng, n: usize, sharpness: f64) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| (-(1.0 - rng.gen::<f64>()).ln()).powf(sharpness)).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

fn categorical(mass: Vec<f64>) -> Result<Categorical<f64>> {
    Categorical::new(support(mass.len()), mass)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboReport {
    /// `ln Σ_c p(c) p(i*|c)`
    pub lhs: f64,
    /// `E_q[ln p(i*|c)] − KL(q ‖ p(c))`
    pub rhs: f64,
    pub gap: f64,
    /// `KL(q ‖ p(c | i*))`
    pub posterior_kl: f64,
}

impl ElboReport {
    pub const BOUND_TOL: f64 = 1e-12;
    pub const GAP_TOL: f64 = 1e-10;

    /// Smallest margin over the bound and the gap identity.
    pub fn slack(&self) -> f64 {
        let bound = self.lhs - self.rhs + Self::BOUND_TOL;
        let identity = Self::GAP_TOL - (self.gap - self.posterior_kl).abs();
        bound.min(identity)
    }
}

/// Exact marginal log-likelihood versus its variational lower bound.
pub fn elbo_check(prior: &Categorical<f64>, likelihood: &[f64], q: &Categorical<f64>) -> Result<ElboReport> {
    if likelihood.len() != prior.len() || q.support() != prior.support() {
        return Err(Error::Shape { op: "elbo_check", detail: "prior, likelihood and q must align".into() });
    }
    if likelihood.iter().any(|&l| !(l > 0.0 && l <= 1.0)) {
        return Err(Error::InvalidParameter("likelihoods must lie in (0, 1]".into()));
    }
    let joint: Vec<f64> = prior.mass().iter().zip(likelihood).map(|(p, l)| p * l).collect();
    let evidence: f64 = joint.iter().sum();
    let lhs = evidence.ln();
    let expected: f64 = q.mass().iter().zip(likelihood).filter(|(&w, _)| w > 0.0).map(|(w, l)| w * l.ln()).sum();
    let rhs = expected - kl_divergence(q, prior)?;
    let posterior = Categorical::from_weights(prior.support().to_vec(), joint)?;
    let posterior_kl = kl_divergence(q, &posterior)?;
    Ok(ElboReport { lhs, rhs, gap: lhs - rhs, posterior_kl })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    /// `E_P[e] − E_Q[e]`
    pub analytic: Vec<f64>,
    pub finite_difference: Vec<f64>,
    pub autodiff: Vec<f64>,
    pub fd_rel_err: f64,
    pub autodiff_rel_err: f64,
}

impl GradReport {
    pub const FD_TOL: f64 = 1e-5;
    pub const AUTODIFF_TOL: f64 = 1e-8;

    pub fn slack(&self) -> f64 {
        (Self::FD_TOL - self.fd_rel_err).min(Self::AUTODIFF_TOL - self.autodiff_rel_err)
    }
}

/// Floor for the relative-error denominator so that vanishing gradients are
/// compared absolutely.
const GRAD_SCALE_FLOOR: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(GRAD_SCALE_FLOOR)
}

fn kl_q_softmax(emb: &Tensor<f64>, r: &[f64], q: &Categorical<f64>) -> Result<f64> {
    let z = crate::backbone::decode_logits(r, emb)?;
    let p = Categorical::softmax(q.support().to_vec(), &z, 1.0)?;
    kl_divergence(q, &p)
}

/// Gradient of `KL(Q ‖ softmax(E r))` in `r`: closed form against central
/// differences and against the tape.
pub fn prop1_gradcheck(emb: &Tensor<f64>, r: &[f64], q: &Categorical<f64>) -> Result<GradReport> {
    let (n, d) = (emb.rows(), emb.cols());
    if r.len() != d || q.len() != n {
        return Err(Error::Shape { op: "prop1_gradcheck", detail: format!("E {n}x{d}, r {}, Q {}", r.len(), q.len()) });
    }
    let z = crate::backbone::decode_logits(r, emb)?;
    let p = Categorical::softmax(q.support().to_vec(), &z, 1.0)?;
    let row = |item: ItemId| Some(emb.row_slice(item.0 as usize));
    let bp = barycenter(&p, row)?;
    let bq = barycenter(q, row)?;
    let analytic: Vec<f64> = bp.iter().zip(&bq).map(|(a, b)| a - b).collect();

    let mut probe = r.to_vec();
    let mut finite_difference = Vec::with_capacity(d);
    for k in 0..d {
        let orig = probe[k];
        probe[k] = orig + FD_STEP;
        let up = kl_q_softmax(emb, &probe, q)?;
        probe[k] = orig - FD_STEP;
        let down = kl_q_softmax(emb, &probe, q)?;
        probe[k] = orig;
        finite_difference.push((up - down) / (2.0 * FD_STEP));
    }

    let mut tape = Tape::new();
    let rv = tape.param(&Tensor::row(r.to_vec()));
    let ev = tape.constant(emb);
    let logits = tape.matmul_nt(rv, ev)?;
    let cols: Vec<usize> = (0..n).collect();
    let loss = tape.kl_to_fixed_teacher(logits, &cols, q.mass(), 1.0)?;
    let grads = tape.backward(loss)?;
    let autodiff = grads.get(rv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; d]);

    Ok(GradReport {
        fd_rel_err: rel_err(&analytic, &finite_difference),
        autodiff_rel_err: rel_err(&analytic, &autodiff),
        analytic,
        finite_difference,
        autodiff,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prop2Params {
    pub d1: f64,
    pub lambda_contract: f64,
    pub delta: f64,
    pub horizon: usize,
    pub trials: usize,
    pub support: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prop2Report {
    pub violations: usize,
    /// Minimum of `bound − tv` over all steps and trials.
    pub worst_slack: f64,
    /// Largest `|tv − (1−λ)^{t−1} d₁|`; only meaningful when `δ = 0`.
    pub max_geometric_err: f64,
    /// Largest observed `tv(q_{t+1}, q_t)`.
    pub max_teacher_drift: f64,
}

pub const PROP2_TOL: f64 = 1e-12;

/// Simulates a drifting teacher `q_{t+1} = (1−η)q_t + η u` with `η ≤ δ` and a
/// student `p_{t+1} = (1−λ)p_t + λ q_t`, which contracts toward the current
/// teacher with equality in total variation.
pub fn prop2_simulate(params: &Prop2Params) -> Result<Prop2Report> {
    let Prop2Params { d1, lambda_contract: lam, delta, horizon, trials, support: n, seed } = *params;
    if !(lam > 0.0 && lam < 1.0) || !(0.0..=1.0).contains(&d1) || !(delta >= 0.0) || n < 2 || horizon == 0 {
        return Err(Error::InvalidParameter("need λ∈(0,1), d₁∈[0,1], δ≥0, support≥2, horizon≥1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report =
        Prop2Report { violations: 0, worst_slack: f64::INFINITY, max_geometric_err: 0.0, max_teacher_drift: 0.0 };
    let half = n / 2;
    for _ in 0..trials {
        // disjoint supports give TV 1; mixing toward q sets it to d₁ exactly
        let mut q = vec![0.0; n];
        let mut far = vec![0.0; n];
        q[..half].copy_from_slice(&random_distribution(&mut rng, half, 1.0));
        far[half..].copy_from_slice(&random_distribution(&mut rng, n - half, 1.0));
        let mut p: Vec<f64> = q.iter().zip(&far).map(|(a, b)| (1.0 - d1) * a + d1 * b).collect();
        for t in 1..=horizon {
            let qc = categorical(q.clone())?;
            let tv = tv_distance(&categorical(p.clone())?, &qc);
            let bound = (1.0 - lam).powi(t as i32 - 1) * d1 + delta / lam;
            let slack = bound + PROP2_TOL - tv;
            report.worst_slack = report.worst_slack.min(slack);
            if slack < 0.0 {
                report.violations += 1;
            }
            let geometric = (1.0 - lam).powi(t as i32 - 1) * d1;
            report.max_geometric_err = report.max_geometric_err.max((tv - geometric).abs());

            p = p.iter().zip(&q).map(|(a, b)| (1.0 - lam) * a + lam * b).collect();
            let eta = delta.min(1.0) * rng.gen::<f64>();
            let u = random_distribution(&mut rng, n, 1.0);
            let next: Vec<f64> = q.iter().zip(&u).map(|(a, b)| (1.0 - eta) * a + eta * b).collect();
            report.max_teacher_drift = report.max_teacher_drift.max(tv_distance(&categorical(next.clone())?, &qc));
            q = next;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinskerReport {
    pub trials: usize,
    pub violations: usize,
    /// Largest observed `tv / sqrt(KL/2)`.
    pub tightest_ratio: f64,
    /// Minimum of `sqrt(KL/2) − tv`.
    pub worst_slack: f64,
}

pub const PINSKER_TOL: f64 = 1e-12;

/// `tv ≤ sqrt(KL/2)` on random pairs; every fourth pair is drawn near a vertex.
pub fn pinsker_check(trials: usize, seed: u64) -> Result<PinskerReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = PinskerReport { trials, violations: 0, tightest_ratio: 0.0, worst_slack: f64::INFINITY };
    for k in 0..trials {
        let n = rng.gen_range(2..=12);
        let sharp = if k % 4 == 3 { 12.0 } else { 1.0 };
        let p = categorical(random_distribution(&mut rng, n, sharp))?;
        let q = categorical(random_distribution(&mut rng, n, sharp))?;
        let kl = kl_divergence(&p, &q)?;
        let tv = tv_distance(&p, &q);
        let bound = (kl / 2.0).sqrt();
        let slack = bound + PINSKER_TOL - tv;
        report.worst_slack = report.worst_slack.min(slack);
        if slack < 0.0 {
            report.violations += 1;
        }
        if bound > 0.0 {
            report.tightest_ratio = report.tightest_ratio.max(tv / bound);
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Flops {
    pub encoder: u128,
    pub reasoning: u128,
    pub total: u128,
}

/// Unit-constant cost of encoding `|C|+|H|` tokens with `L` layers and then
/// appending `T'` reasoning tokens against a key/value cache.
pub fn flops_estimate(context: u64, history: u64, d: u64, layers: u64, steps: u64) -> Flops {
    let (n, d, l) = (u128::from(context + history), u128::from(d), u128::from(layers));
    let encoder = l * (n * n * d + n * d * d);
    let reasoning: u128 = (1..=u128::from(steps)).map(|t| l * ((n + t - 1) * d + d * d)).sum();
    Flops { encoder, reasoning, total: encoder + reasoning }
}

/// The same cost for a history-only latent reasoner, written out separately.
pub fn history_only_flops(history: u64, d: u64, layers: u64, steps: u64) -> Flops {
    let (h, d, l) = (u128::from(history), u128::from(d), u128::from(layers));
    let encoder = l * (h * h * d + h * d * d);
    let mut reasoning = 0u128;
    for t in 1..=u128::from(steps) {
        reasoning += l * ((h + t - 1) * d + d * d);
    }
    Flops { encoder, reasoning, total: encoder + reasoning }
}

/// Runs every check with fixed sizes; outcomes are in a fixed order.
pub fn run_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut worst = f64::INFINITY;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=16);
        let prior = categorical(random_distribution(&mut rng, n, 1.0))?;
        let q = categorical(random_distribution(&mut rng, n, 1.0))?;
        let lik: Vec<f64> = (0..n).map(|_| rng.gen_range(1e-3..1.0)).collect();
        worst = worst.min(elbo_check(&prior, &lik, &q)?.slack());
    }
    out.push(CheckOutcome::new("elbo", worst, seed));

    let mut worst = f64::INFINITY;
    for _ in 0..500 {
        let d = rng.gen_range(1..=16);
        let n = rng.gen_range(2..=32);
        let emb = Tensor::uniform(vec![n, d], -1.0, 1.0, &mut rng);
        let r: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q = categorical(random_distribution(&mut rng, n, 1.0))?;
        worst = worst.min(prop1_gradcheck(&emb, &r, &q)?.slack());
    }
    out.push(CheckOutcome::new("prop1_gradient", worst, seed));

    let sim = prop2_simulate(&Prop2Params {
        d1: 1.0,
        lambda_contract: 0.3,
        delta: 0.05,
        horizon: 20,
        trials: 100,
        support: 8,
        seed,
    })?;
    out.push(CheckOutcome::new("prop2_tracking", sim.worst_slack, seed));
    let still = prop2_simulate(&Prop2Params {
        d1: 1.0,
        lambda_contract: 0.5,
        delta: 0.0,
        horizon: 20,
        trials: 10,
        support: 8,
        seed,
    })?;
    out.push(CheckOutcome::new("prop2_geometric", PROP2_TOL - still.max_geometric_err, seed));

    let pinsker = pinsker_check(10_000, seed)?;
    out.push(CheckOutcome::new("pinsker", pinsker.worst_slack, seed));

    let f = flops_estimate(8, 50, 256, 2, 3);
    let mut flops_ok = f.total == 9_808_384 && flops_estimate(8, 50, 256, 2, 0).reasoning == 0;
    for h in [1u64, 10, 50] {
        for t in [0u64, 1, 5] {
            flops_ok &= flops_estimate(0, h, 64, 2, t) == history_only_flops(h, 64, 2, t);
        }
    }
    out.push(CheckOutcome::new("flops", if flops_ok { 0.0 } else { -1.0 }, seed));
    Ok(out)
}
