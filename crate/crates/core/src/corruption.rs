//! Forward corruption: type-specific keep probabilities and nested mask
//! trajectories.
//!
//! Every position draws a single `u_i ~ U[0, 1)` and is kept at step `t`
//! iff `u_i < kappa_t(type(i))`. Because `kappa_t` is non-increasing in `t`,
//! the masks for `t = S..0` are nested, and the marginal keep probability at
//! each step is exactly `kappa_t`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timecodec::Vocabulary;

/// Slot indices of one action tuple inside the response template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TupleSlots {
    pub label: usize,
    pub start: usize,
    pub end: usize,
}

/// A clean response `x_0` plus its boundary positions and tuple slots.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSequence {
    pub tokens: Vec<u32>,
    /// `boundary[i]` iff `tokens[i]` is a time token.
    pub boundary: Vec<bool>,
    /// Real (non-padding) action tuples.
    pub tuples: Vec<TupleSlots>,
    /// Positions that carry supervision.
    pub supervised: Vec<bool>,
}

impl TargetSequence {
    pub fn new(tokens: Vec<u32>, tuples: Vec<TupleSlots>, vocab: &Vocabulary) -> Result<Self> {
        let boundary: Vec<bool> = tokens.iter().map(|&t| vocab.is_time_token(t)).collect();
        for tup in &tuples {
            for slot in [tup.label, tup.start, tup.end] {
                if slot >= tokens.len() {
                    return Err(Error::Config(format!("tuple slot {slot} outside response")));
                }
            }
            if !boundary[tup.start] || !boundary[tup.end] {
                return Err(Error::Config(format!(
                    "tuple boundary slots ({}, {}) do not hold time tokens",
                    tup.start, tup.end
                )));
            }
        }
        let supervised = vec![true; tokens.len()];
        Ok(Self {
            tokens,
            boundary,
            tuples,
            supervised,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn boundary_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.boundary[i]).collect()
    }

    /// Class and description slots of the real tuples.
    pub fn semantic_positions(&self) -> Vec<usize> {
        self.tuples.iter().flat_map(|t| t.label..t.start).collect()
    }

    /// Ground-truth `(s*, e*)` bins of a tuple.
    pub fn tuple_bins(&self, tuple: &TupleSlots, vocab: &Vocabulary) -> Result<(usize, usize)> {
        Ok((
            vocab.time_index(self.tokens[tuple.start])?,
            vocab.time_index(self.tokens[tuple.end])?,
        ))
    }

    /// Copy with supervision restricted to boundary positions.
    pub fn boundary_supervised(&self) -> Self {
        let mut t = self.clone();
        t.supervised = self.boundary.clone();
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    /// Same keep probability `1 - t/S` for every position.
    Uniform,
    /// Boundary positions use the larger exponent and stay masked longer.
    Planned,
    /// Exponents swapped: boundary positions are revealed first.
    TimeFirst,
}

/// Masking policy `kappa_t = (1 - t/S)^exponent` per position type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskPolicy {
    pub kind: MaskKind,
    pub gamma: f64,
    pub eta: f64,
    pub n_steps: usize,
}

impl MaskPolicy {
    pub fn uniform(n_steps: usize) -> Self {
        Self {
            kind: MaskKind::Uniform,
            gamma: 1.0,
            eta: 1.0,
            n_steps,
        }
    }

    pub fn planned(gamma: f64, eta: f64, n_steps: usize) -> Result<Self> {
        let p = Self {
            kind: MaskKind::Planned,
            gamma,
            eta,
            n_steps,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn time_first(gamma: f64, eta: f64, n_steps: usize) -> Result<Self> {
        let p = Self {
            kind: MaskKind::TimeFirst,
            gamma,
            eta,
            n_steps,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::Config("mask policy needs n_steps >= 1".into()));
        }
        if self.kind != MaskKind::Uniform && !(self.gamma > self.eta && self.eta > 0.0) {
            return Err(Error::Config(format!(
                "planned masking requires gamma > eta > 0, got gamma={} eta={}",
                self.gamma, self.eta
            )));
        }
        Ok(())
    }

    fn exponent(&self, is_boundary: bool) -> f64 {
        match (self.kind, is_boundary) {
            (MaskKind::Uniform, _) => 1.0,
            (MaskKind::Planned, true) | (MaskKind::TimeFirst, false) => self.gamma,
            (MaskKind::Planned, false) | (MaskKind::TimeFirst, true) => self.eta,
        }
    }

    /// Keep probability of a position at step `t`.
    pub fn keep_prob(&self, t: usize, is_boundary: bool) -> Result<f64> {
        if t > self.n_steps {
            return Err(Error::StepOutOfRange {
                step: t,
                lo: 0,
                hi: self.n_steps,
            });
        }
        let base = 1.0 - t as f64 / self.n_steps as f64;
        Ok(base.powf(self.exponent(is_boundary)))
    }
}

/// Keep mask at one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepMask {
    pub keep: Vec<bool>,
}

impl StepMask {
    pub fn all_kept(len: usize) -> Self {
        Self {
            keep: vec![true; len],
        }
    }

    /// The masked set `M_t`.
    pub fn masked(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&i| !self.keep[i]).collect()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        !self.keep[i]
    }
}

/// A nested family of keep masks for `t = S..0`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTrajectory {
    pub reveal_u: Vec<f64>,
    is_boundary: Vec<bool>,
    policy: MaskPolicy,
}

impl MaskTrajectory {
    /// Build a trajectory from explicit draws (each in `[0, 1)`).
    pub fn from_draws(
        reveal_u: Vec<f64>,
        is_boundary: Vec<bool>,
        policy: MaskPolicy,
    ) -> Result<Self> {
        if reveal_u.len() != is_boundary.len() {
            return Err(Error::LengthMismatch {
                expected: is_boundary.len(),
                got: reveal_u.len(),
            });
        }
        Ok(Self {
            reveal_u,
            is_boundary,
            policy,
        })
    }

    pub fn sample(target: &TargetSequence, policy: &MaskPolicy, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::sample_with(target, policy, &mut rng)
    }

    pub fn sample_with<R: Rng + ?Sized>(
        target: &TargetSequence,
        policy: &MaskPolicy,
        rng: &mut R,
    ) -> Self {
        let reveal_u = (0..target.len()).map(|_| rng.random::<f64>()).collect();
        Self {
            reveal_u,
            is_boundary: target.boundary.clone(),
            policy: *policy,
        }
    }

    pub fn len(&self) -> usize {
        self.reveal_u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reveal_u.is_empty()
    }

    pub fn policy(&self) -> &MaskPolicy {
        &self.policy
    }

    fn kept_at(&self, i: usize, t: usize) -> bool {
        // `<` keeps nothing at t = S (kappa = 0) and everything at t = 0.
        let kappa = self
            .policy
            .keep_prob(t, self.is_boundary[i])
            .expect("step validated by caller");
        self.reveal_u[i] < kappa
    }

    pub fn mask_at_step(&self, t: usize) -> Result<StepMask> {
        if t > self.policy.n_steps {
            return Err(Error::StepOutOfRange {
                step: t,
                lo: 0,
                hi: self.policy.n_steps,
            });
        }
        Ok(StepMask {
            keep: (0..self.len()).map(|i| self.kept_at(i, t)).collect(),
        })
    }

    /// Largest step at which position `i` is kept; it stays kept for every
    /// smaller step. Reverse denoising reveals it when moving to this step.
    pub fn reveal_step(&self, i: usize) -> usize {
        (0..=self.policy.n_steps)
            .rev()
            .find(|&t| self.kept_at(i, t))
            .unwrap_or(0)
    }

    pub fn reveal_steps(&self) -> Vec<usize> {
        (0..self.len()).map(|i| self.reveal_step(i)).collect()
    }

    /// Positions in reveal order (earliest revealed first). Ties in reveal
    /// step are broken by `u`, then by position index.
    pub fn reveal_order(&self) -> Vec<usize> {
        let steps = self.reveal_steps();
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            steps[b]
                .cmp(&steps[a])
                .then(self.reveal_u[a].total_cmp(&self.reveal_u[b]))
                .then(a.cmp(&b))
        });
        order
    }
}

/// `x_t = m_t * x_0 + (1 - m_t) * [MASK]`.
pub fn corrupt(target: &TargetSequence, mask: &StepMask, vocab: &Vocabulary) -> Result<Vec<u32>> {
    if mask.keep.len() != target.len() {
        return Err(Error::LengthMismatch {
            expected: target.len(),
            got: mask.keep.len(),
        });
    }
    Ok(target
        .tokens
        .iter()
        .zip(&mask.keep)
        .map(|(&tok, &keep)| if keep { tok } else { vocab.mask_id })
        .collect())
}
