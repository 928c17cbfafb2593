//! Finite categorical distributions over item supports and the simplex-level
//! quantities used by training, halting and verification. All logs are natural.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::{CandidateSet, ItemId};
use crate::scalar::{mass_tolerance, Scalar};

/// Elementwise floor applied to a student distribution before a finite KL is required.
pub const STUDENT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Categorical<S: Scalar = f64> {
    support: Vec<ItemId>,
    mass: Vec<S>,
}

impl<S: Scalar> Categorical<S> {
    pub fn new(support: Vec<ItemId>, mass: Vec<S>) -> Result<Self> {
        if support.len() != mass.len() {
            return Err(Error::InvalidDistribution(format!(
                "support has {} items but {} masses",
                support.len(),
                mass.len()
            )));
        }
        if support.is_empty() {
            return Err(Error::InvalidDistribution("empty support".into()));
        }
        if let Some(m) = mass.iter().find(|m| !(**m >= S::zero()) || !m.is_finite()) {
            return Err(Error::InvalidDistribution(format!("invalid mass {m}")));
        }
        let total: S = mass.iter().copied().sum();
        if (total - S::one()).abs() > mass_tolerance::<S>(mass.len()) {
            return Err(Error::InvalidDistribution(format!("masses sum to {total}")));
        }
        let mut sorted = support.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidDistribution("duplicate support item".into()));
        }
        Ok(Self { support, mass })
    }

    /// Normalizes nonnegative weights into a distribution.
    pub fn from_weights(support: Vec<ItemId>, weights: Vec<S>) -> Result<Self> {
        let total: S = weights.iter().copied().sum();
        if !(total > S::zero()) || !total.is_finite() {
            return Err(Error::InvalidDistribution(format!("weights sum to {total}")));
        }
        let mass = weights.into_iter().map(|w| w / total).collect();
        Self::new(support, mass)
    }

    /// Temperature-scaled softmax of `logits` over `support`.
    pub fn softmax(support: Vec<ItemId>, logits: &[S], temperature: S) -> Result<Self> {
        if !(temperature > S::zero()) {
            return Err(Error::InvalidParameter(format!("temperature must be > 0, got {temperature}")));
        }
        let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
        let weights: Vec<S> = logits.iter().map(|&z| ((z - max) / temperature).exp()).collect();
        Self::from_weights(support, weights)
    }

    pub fn point_mass(item: ItemId) -> Self {
        Self { support: vec![item], mass: vec![S::one()] }
    }

    pub fn uniform(support: Vec<ItemId>) -> Result<Self> {
        let n = support.len();
        Self::from_weights(support, vec![S::one(); n])
    }

    pub fn support(&self) -> &[ItemId] {
        &self.support
    }

    pub fn mass(&self) -> &[S] {
        &self.mass
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ItemId, S)> + '_ {
        self.support.iter().copied().zip(self.mass.iter().copied())
    }

    /// Probability of `item`, zero outside the support.
    pub fn prob(&self, item: ItemId) -> S {
        self.support.iter().position(|&s| s == item).map_or(S::zero(), |k| self.mass[k])
    }

    /// Restricts to `support` (zero outside the current support) and renormalizes.
    pub fn restrict(&self, support: &[ItemId]) -> Result<Self> {
        let lookup = self.lookup();
        let weights = support.iter().map(|item| lookup.get(item).copied().unwrap_or(S::zero())).collect();
        Self::from_weights(support.to_vec(), weights)
    }

    /// Clamps every mass at `floor` and renormalizes.
    pub fn floored(&self, floor: S) -> Self {
        let weights: Vec<S> = self.mass.iter().map(|&m| m.max(floor)).collect();
        let total: S = weights.iter().copied().sum();
        Self { support: self.support.clone(), mass: weights.into_iter().map(|w| w / total).collect() }
    }

    /// Support items ordered by descending mass, ties by ascending item id.
    pub fn ranked(&self) -> Vec<ItemId> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| {
            self.mass[b]
                .partial_cmp(&self.mass[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(self.support[a].cmp(&self.support[b]))
        });
        idx.into_iter().map(|k| self.support[k]).collect()
    }

    fn lookup(&self) -> HashMap<ItemId, S> {
        self.iter().collect()
    }
}

/// Teacher prior over `{target} ∪ candidates`: the target has rank 0, the remaining
/// candidates ranks 1, 2, … in candidate order, and `q(c) ∝ exp(-rank(c)/γ)`.
pub fn rank_teacher_prior<S: Scalar>(candidates: &CandidateSet, target: ItemId, gamma: S) -> Result<Categorical<S>> {
    if !(gamma > S::zero()) {
        return Err(Error::InvalidParameter(format!("gamma must be > 0, got {gamma}")));
    }
    let mut support = vec![target];
    support.extend(candidates.items().filter(|&c| c != target));
    let weights = (0..support.len()).map(|rank| (-S::of_usize(rank) / gamma).exp()).collect();
    Categorical::from_weights(support, weights)
}

/// Linear teacher-sharpness schedule `γ_t = γ_base · (T − t + 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherSchedule<S: Scalar = f64> {
    pub gamma_base: S,
    pub total_steps: usize,
}

impl<S: Scalar> TeacherSchedule<S> {
    pub fn new(gamma_base: S, total_steps: usize) -> Result<Self> {
        if !(gamma_base >= S::one()) {
            return Err(Error::InvalidParameter(format!("gamma_base must be >= 1, got {gamma_base}")));
        }
        if total_steps == 0 {
            return Err(Error::InvalidParameter("total_steps must be >= 1".into()));
        }
        Ok(Self { gamma_base, total_steps })
    }

    pub fn gamma(&self, step: usize) -> Result<S> {
        scheduled_gamma(self, step)
    }
}

pub fn scheduled_gamma<S: Scalar>(schedule: &TeacherSchedule<S>, step: usize) -> Result<S> {
    if step == 0 || step > schedule.total_steps {
        return Err(Error::StepOutOfRange { step, max: schedule.total_steps });
    }
    Ok(schedule.gamma_base * S::of_usize(schedule.total_steps - step + 1))
}

/// `D_KL(q ‖ p) = Σ_{q(c) > 0} q(c) ln(q(c)/p(c))`.
pub fn kl_divergence<S: Scalar>(q: &Categorical<S>, p: &Categorical<S>) -> Result<S> {
    let term = |item: ItemId, qc: S, pc: S| -> Result<S> {
        if qc == S::zero() {
            Ok(S::zero())
        } else if pc > S::zero() {
            Ok(qc * (qc / pc).ln())
        } else {
            Err(Error::InfiniteDivergence(item))
        }
    };
    let mut total = S::zero();
    if q.support == p.support {
        for ((&item, &qc), &pc) in q.support.iter().zip(&q.mass).zip(&p.mass) {
            total += term(item, qc, pc)?;
        }
    } else {
        let lookup = p.lookup();
        for (item, qc) in q.iter() {
            total += term(item, qc, lookup.get(&item).copied().unwrap_or(S::zero()))?;
        }
    }
    Ok(total.max(S::zero()))
}

/// Total variation distance on the zero-padded union of supports.
pub fn tv_distance<S: Scalar>(p: &Categorical<S>, q: &Categorical<S>) -> S {
    let half = S::of(0.5);
    if p.support == q.support {
        return half * p.mass.iter().zip(&q.mass).map(|(&a, &b)| (a - b).abs()).sum::<S>();
    }
    let lookup = q.lookup();
    let mut total = S::zero();
    for (item, pc) in p.iter() {
        total += (pc - lookup.get(&item).copied().unwrap_or(S::zero())).abs();
    }
    let p_items = p.lookup();
    for (item, qc) in q.iter() {
        if !p_items.contains_key(&item) {
            total += qc;
        }
    }
    half * total
}

/// Shannon entropy in nats.
pub fn entropy<S: Scalar>(p: &Categorical<S>) -> S {
    -p.mass.iter().filter(|&&m| m > S::zero()).map(|&m| m * m.ln()).sum::<S>()
}

/// Probability-weighted mean embedding `Σ_c p(c) e_c`.
pub fn barycenter<'a, S, F>(p: &Categorical<S>, embedding: F) -> Result<Vec<S>>
where
    S: Scalar,
    F: Fn(ItemId) -> Option<&'a [S]>,
{
    let mut out: Option<Vec<S>> = None;
    for (item, m) in p.iter() {
        let e = embedding(item).ok_or(Error::MissingEmbedding(item))?;
        let acc = out.get_or_insert_with(|| vec![S::zero(); e.len()]);
        if acc.len() != e.len() {
            return Err(Error::Shape {
                op: "barycenter",
                detail: format!("embedding of {item} has dim {}, expected {}", e.len(), acc.len()),
            });
        }
        for (a, &x) in acc.iter_mut().zip(e) {
            *a += m * x;
        }
    }
    Ok(out.unwrap_or_default())
}
