//! Training objectives.
//!
//! All losses are expressed on logits, and each one that takes part in
//! training has a `*_grad` twin returning `d loss / d logits`, which the
//! trainer feeds to [`crate::denoiser::DenoiserParams::backward`].

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::corruption::{MaskTrajectory, TargetSequence, TupleSlots};
use crate::denoiser::Logits;
use crate::error::{Error, Result};
use crate::timecodec::Vocabulary;

/// Normalized linear step weight `w_t = 2(S - t + 1) / (S(S + 1))`.
pub fn step_weight(t: usize, n_steps: usize) -> Result<f64> {
    if t == 0 || t > n_steps {
        return Err(Error::StepOutOfRange {
            step: t,
            lo: 1,
            hi: n_steps,
        });
    }
    let s = n_steps as f64;
    Ok(2.0 * (s - t as f64 + 1.0) / (s * (s + 1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepWeighting {
    /// `w_t` above; low-noise steps weigh more.
    Linear,
    /// `1 / S` at every step.
    Uniform,
}

impl StepWeighting {
    pub fn weight(&self, t: usize, n_steps: usize) -> Result<f64> {
        match self {
            StepWeighting::Linear => step_weight(t, n_steps),
            StepWeighting::Uniform => {
                step_weight(t, n_steps)?;
                Ok(1.0 / n_steps as f64)
            }
        }
    }
}

fn log_softmax(row: ArrayView1<'_, f64>) -> Array1<f64> {
    let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    row.mapv(|v| v - lse)
}

fn softmax(row: ArrayView1<'_, f64>) -> Array1<f64> {
    log_softmax(row).mapv(f64::exp)
}

fn ce_over(
    logits: &Logits,
    target: &TargetSequence,
    positions: impl Iterator<Item = usize>,
) -> f64 {
    positions
        .map(|i| -log_softmax(logits.row(i))[target.tokens[i] as usize])
        .sum()
}

fn ce_grad_over(
    logits: &Logits,
    target: &TargetSequence,
    positions: impl Iterator<Item = usize>,
) -> (f64, Array2<f64>) {
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for i in positions {
        let lp = log_softmax(logits.row(i));
        let y = target.tokens[i] as usize;
        loss -= lp[y];
        let mut g = grad.row_mut(i);
        g.assign(&lp.mapv(f64::exp));
        g[y] -= 1.0;
    }
    (loss, grad)
}

/// Summed cross-entropy over masked, supervised positions.
pub fn masked_ce(logits: &Logits, target: &TargetSequence, masked: &[usize]) -> f64 {
    ce_over(
        logits,
        target,
        masked.iter().copied().filter(|&i| target.supervised[i]),
    )
}

pub fn masked_ce_grad(
    logits: &Logits,
    target: &TargetSequence,
    masked: &[usize],
) -> (f64, Array2<f64>) {
    ce_grad_over(
        logits,
        target,
        masked.iter().copied().filter(|&i| target.supervised[i]),
    )
}

/// Summed cross-entropy over every supervised response position.
pub fn base_ce(logits: &Logits, target: &TargetSequence) -> f64 {
    ce_over(
        logits,
        target,
        (0..target.len()).filter(|&i| target.supervised[i]),
    )
}

pub fn base_ce_grad(logits: &Logits, target: &TargetSequence) -> (f64, Array2<f64>) {
    ce_grad_over(
        logits,
        target,
        (0..target.len()).filter(|&i| target.supervised[i]),
    )
}

/// `w_t * masked_ce` at the trajectory state for step `t`.
pub fn plan_loss<F>(
    traj: &MaskTrajectory,
    logit_fn: F,
    target: &TargetSequence,
    vocab: &Vocabulary,
    t: usize,
    weighting: StepWeighting,
) -> Result<f64>
where
    F: FnOnce(&[u32], usize) -> Result<Logits>,
{
    let n_steps = traj.policy().n_steps;
    let w = weighting.weight(t, n_steps)?;
    let mask = traj.mask_at_step(t)?;
    let x_t = crate::corruption::corrupt(target, &mask, vocab)?;
    let logits = logit_fn(&x_t, t)?;
    Ok(w * masked_ce(&logits, target, &mask.masked()))
}

/// Time-token distributions `(p^s, p^e)` at a tuple's boundary slots.
pub fn boundary_distributions(
    logits: &Logits,
    tuple: &TupleSlots,
    vocab: &Vocabulary,
) -> (Array1<f64>, Array1<f64>) {
    let r = vocab.time_range();
    let ps = softmax(logits.row(tuple.start).slice(ndarray::s![r.clone()]));
    let pe = softmax(logits.row(tuple.end).slice(ndarray::s![r]));
    (ps, pe)
}

/// Expected normalized bin of a distribution over `N` time tokens.
pub fn soft_boundary(p: &Array1<f64>) -> f64 {
    let n = p.len();
    p.iter()
        .enumerate()
        .map(|(k, &pk)| k as f64 * pk)
        .sum::<f64>()
        / (n - 1) as f64
}

pub fn soft_boundaries(ps: &Array1<f64>, pe: &Array1<f64>) -> (f64, f64) {
    (soft_boundary(ps), soft_boundary(pe))
}

/// Soft IoU of `[bs, be]` against `[gs, ge]`. Start and end are not swapped.
pub fn soft_iou(bs: f64, be: f64, gs: f64, ge: f64, eps: f64) -> f64 {
    soft_iou_grad(bs, be, gs, ge, eps).0
}

/// Soft IoU with its partial derivatives `(r, dr/dbs, dr/dbe)`.
pub fn soft_iou_grad(bs: f64, be: f64, gs: f64, ge: f64, eps: f64) -> (f64, f64, f64) {
    let pred = (be - bs).max(0.0);
    let raw_inter = be.min(ge) - bs.max(gs);
    let inter = raw_inter.max(0.0);
    let union = pred + (ge - gs) - inter;
    let denom = union + eps;
    let r = inter / denom;

    let dr_dinter = 1.0 / denom + inter / (denom * denom);
    let dr_dpred = -inter / (denom * denom);
    let (mut dbs, mut dbe) = (0.0, 0.0);
    if be > bs {
        dbs -= dr_dpred;
        dbe += dr_dpred;
    }
    if raw_inter > 0.0 {
        if bs > gs {
            dbs -= dr_dinter;
        }
        if be < ge {
            dbe += dr_dinter;
        }
    }
    (r, dbs, dbe)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Reward every evaluated step.
    None,
    /// At least one boundary slot revealed.
    Either,
    /// Both boundary slots revealed.
    Both,
}

/// Whether the IoU reward is active for a tuple in a step state.
pub fn gate_at_step(state: &[u32], tuple: &TupleSlots, mask_id: u32, mode: GateMode) -> bool {
    let s = state[tuple.start] != mask_id;
    let e = state[tuple.end] != mask_id;
    match mode {
        GateMode::None => true,
        GateMode::Either => s || e,
        GateMode::Both => s && e,
    }
}

/// Group-relative statistics over the active steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Advantages {
    pub mean: f64,
    pub std: f64,
    pub raw: Vec<f64>,
    pub clipped: Vec<f64>,
}

/// `eps` guards the empty-gate case and sits inside the square root of the
/// spread; with at least one active step the mean is the exact active mean,
/// so advantages sum to zero.
pub fn step_advantages(rewards: &[f64], gates: &[bool], eps: f64) -> Advantages {
    let g: Vec<f64> = gates.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let denom = g.iter().sum::<f64>().max(eps);
    let mean = rewards.iter().zip(&g).map(|(r, g)| g * r).sum::<f64>() / denom;
    let var = rewards
        .iter()
        .zip(&g)
        .map(|(r, g)| g * (r - mean) * (r - mean))
        .sum::<f64>()
        / denom;
    let std = (var + eps).sqrt();
    let raw: Vec<f64> = rewards
        .iter()
        .zip(&g)
        .map(|(r, g)| g * (r - mean) / std)
        .collect();
    let clipped = raw.iter().map(|&a| a.max(0.0)).collect();
    Advantages {
        mean,
        std,
        raw,
        clipped,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoUHyper {
    /// Weight of the monotonic refinement hinge.
    pub mu: f64,
    /// Required per-step improvement.
    pub delta: f64,
    /// Weight of the advantage-weighted boundary log-likelihood.
    pub lambda_rel: f64,
    pub epsilon: f64,
    /// Per-step reward weights `alpha_t`.
    pub alpha: StepWeighting,
}

impl Default for IoUHyper {
    fn default() -> Self {
        Self {
            mu: 0.5,
            delta: 0.01,
            lambda_rel: 0.5,
            epsilon: 1e-8,
            alpha: StepWeighting::Linear,
        }
    }
}

impl IoUHyper {
    pub fn validate(&self) -> Result<()> {
        if self.mu < 0.0 || self.delta < 0.0 || self.lambda_rel < 0.0 || self.epsilon <= 0.0 {
            return Err(Error::Config(
                "IoU hyperparameters need mu, delta, lambda_rel >= 0 and epsilon > 0".into(),
            ));
        }
        Ok(())
    }
}

/// One evaluated step of a trajectory for one tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub gate: bool,
    pub p_start: Array1<f64>,
    pub p_end: Array1<f64>,
    pub soft_start: f64,
    pub soft_end: f64,
    pub reward: f64,
    /// Tokens currently at the start and end slots.
    pub token_start: u32,
    pub token_end: u32,
}

/// Per-step rewards, gates and advantages for one tuple; steps are kept in
/// ascending `t` order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub steps: Vec<StepRecord>,
    pub gt_bins: (usize, usize),
    pub advantages: Advantages,
}

/// Raw inputs for one evaluated step.
#[derive(Debug, Clone)]
pub struct StepObservation {
    pub t: usize,
    pub gate: bool,
    pub p_start: Array1<f64>,
    pub p_end: Array1<f64>,
    pub token_start: u32,
    pub token_end: u32,
}

impl TrajectoryRecord {
    pub fn build(mut obs: Vec<StepObservation>, gt_bins: (usize, usize), eps: f64) -> Self {
        obs.sort_by_key(|o| o.t);
        let steps: Vec<StepRecord> = obs
            .into_iter()
            .map(|o| {
                let n = o.p_start.len();
                let (bs, be) = soft_boundaries(&o.p_start, &o.p_end);
                let gs = gt_bins.0 as f64 / (n - 1) as f64;
                let ge = gt_bins.1 as f64 / (n - 1) as f64;
                StepRecord {
                    t: o.t,
                    gate: o.gate,
                    reward: soft_iou(bs, be, gs, ge, eps),
                    soft_start: bs,
                    soft_end: be,
                    p_start: o.p_start,
                    p_end: o.p_end,
                    token_start: o.token_start,
                    token_end: o.token_end,
                }
            })
            .collect();
        let rewards: Vec<f64> = steps.iter().map(|s| s.reward).collect();
        let gates: Vec<bool> = steps.iter().map(|s| s.gate).collect();
        Self {
            advantages: step_advantages(&rewards, &gates, eps),
            steps,
            gt_bins,
        }
    }

    pub fn active_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.gate).count()
    }
}

/// Gradient of the IoU objective w.r.t. the time-token logits at the start
/// and end slots of every recorded step.
#[derive(Debug, Clone)]
pub struct IoUGrad {
    pub loss: f64,
    pub d_start: Vec<Array1<f64>>,
    pub d_end: Vec<Array1<f64>>,
}

/// Unified gated IoU objective for one tuple.
pub fn iou_loss(record: &TrajectoryRecord, hyper: &IoUHyper, n_steps: usize) -> Result<f64> {
    Ok(iou_loss_grad(record, hyper, n_steps)?.loss)
}

pub fn iou_loss_grad(
    record: &TrajectoryRecord,
    hyper: &IoUHyper,
    n_steps: usize,
) -> Result<IoUGrad> {
    let steps = &record.steps;
    let n = steps.len();
    let g: Vec<f64> = steps
        .iter()
        .map(|s| if s.gate { 1.0 } else { 0.0 })
        .collect();
    let z = hyper.epsilon + g.iter().sum::<f64>();
    let adv = &record.advantages.clipped;
    let (s_star, e_star) = record.gt_bins;

    let mut loss = 0.0;
    let mut d_reward = vec![0.0; n];
    for (j, st) in steps.iter().enumerate() {
        let alpha = hyper.alpha.weight(st.t, n_steps)?;
        loss += alpha * g[j] * (1.0 - st.reward);
        d_reward[j] -= alpha * g[j];
        if j >= 1 {
            let pair = g[j] * g[j - 1];
            let h = st.reward - steps[j - 1].reward + hyper.delta;
            if pair > 0.0 && h > 0.0 {
                loss += hyper.mu * h;
                d_reward[j] += hyper.mu;
                d_reward[j - 1] -= hyper.mu;
            }
        }
        if adv[j] > 0.0 {
            loss -= hyper.lambda_rel * adv[j] * (st.p_start[s_star].ln() + st.p_end[e_star].ln());
        }
    }
    loss /= z;

    let mut d_start = Vec::with_capacity(n);
    let mut d_end = Vec::with_capacity(n);
    for (j, st) in steps.iter().enumerate() {
        let m = st.p_start.len();
        let gs = s_star as f64 / (m - 1) as f64;
        let ge = e_star as f64 / (m - 1) as f64;
        let (_, dbs, dbe) = soft_iou_grad(st.soft_start, st.soft_end, gs, ge, hyper.epsilon);
        let dr = d_reward[j] / z;
        let rel = hyper.lambda_rel * adv[j] / z;
        d_start.push(slot_logit_grad(&st.p_start, dr * dbs, rel, s_star));
        d_end.push(slot_logit_grad(&st.p_end, dr * dbe, rel, e_star));
    }
    Ok(IoUGrad {
        loss,
        d_start,
        d_end,
    })
}

// d/dz of  coef * E_p[k]/(N-1)  -  rel * log p[target]
fn slot_logit_grad(p: &Array1<f64>, coef: f64, rel: f64, target: usize) -> Array1<f64> {
    let n = p.len();
    let dp: Array1<f64> = (0..n).map(|k| coef * k as f64 / (n - 1) as f64).collect();
    let mean = p.dot(&dp);
    let mut dz = p * &(dp - mean);
    if rel != 0.0 {
        dz += &(p * rel);
        dz[target] -= rel;
    }
    dz
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_plan: f64,
    pub lambda_iou: f64,
    pub lambda_ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_plan: 1.0,
            lambda_iou: 0.5,
            lambda_ce: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_plan, self.lambda_iou, self.lambda_ce];
        if all.iter().any(|&w| w < 0.0 || !w.is_finite()) || all.iter().all(|&w| w == 0.0) {
            return Err(Error::Config(
                "loss weights must be non-negative with at least one positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub plan: f64,
    pub iou: f64,
    pub total: f64,
}

/// `lambda_ce * ce + lambda_plan * plan + lambda_iou * iou`.
pub fn total_loss(ce: f64, plan: f64, iou: f64, weights: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [("ce", ce), ("plan", plan), ("iou", iou)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss")));
        }
    }
    Ok(LossBreakdown {
        ce,
        plan,
        iou,
        total: weights.lambda_ce * ce + weights.lambda_plan * plan + weights.lambda_iou * iou,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corruption::MaskPolicy;
    use crate::denoiser::oracle_forward;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::synthetic(4, 2, 100).unwrap()
    }

    fn target(v: &Vocabulary, s: usize, e: usize) -> TargetSequence {
        let tokens = vec![
            v.class_token(2).unwrap(),
            v.desc_token(2, 0).unwrap(),
            v.desc_token(2, 1).unwrap(),
            v.time_token(s).unwrap(),
            v.time_token(e).unwrap(),
            v.sep_id,
        ];
        let tuples = vec![TupleSlots {
            label: 0,
            start: 3,
            end: 4,
        }];
        TargetSequence::new(tokens, tuples, v).unwrap()
    }

    fn random_logits(rows: usize, cols: usize, seed: u64) -> Logits {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn step_weights() {
        let s = 64;
        let total: f64 = (1..=s).map(|t| step_weight(t, s).unwrap()).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(step_weight(1, 64).unwrap(), 2.0 / 65.0, epsilon = 1e-15);
        for t in 1..s {
            assert!(step_weight(t, s).unwrap() > step_weight(t + 1, s).unwrap());
        }
        assert!(step_weight(0, s).is_err());
        assert!(step_weight(65, s).is_err());
        assert_abs_diff_eq!(StepWeighting::Uniform.weight(3, 8).unwrap(), 0.125);
    }

    #[test]
    fn masked_ce_examples() {
        let v = vocab();
        let t = target(&v, 20, 60);
        let z = random_logits(6, v.len(), 1);
        assert_eq!(masked_ce(&z, &t, &[]), 0.0);
        let oracle = oracle_forward(&t, v.len(), 50.0);
        assert!(masked_ce(&oracle, &t, &[0, 1, 2, 3, 4, 5]) <= 1e-8);
        let uniform = Array2::zeros((6, v.len()));
        assert_abs_diff_eq!(
            masked_ce(&uniform, &t, &[0, 3, 5]),
            3.0 * (v.len() as f64).ln(),
            epsilon = 1e-12
        );
        let all: Vec<usize> = (0..6).collect();
        assert_abs_diff_eq!(masked_ce(&z, &t, &all), base_ce(&z, &t), epsilon = 1e-12);
        let bound = t.boundary_supervised();
        assert_abs_diff_eq!(
            base_ce(&uniform, &bound),
            2.0 * (v.len() as f64).ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn plan_loss_examples() {
        let v = vocab();
        let t = target(&v, 20, 60);
        let policy = MaskPolicy::planned(2.0, 1.0, 16).unwrap();
        let traj = MaskTrajectory::sample(&t, &policy, 3);
        let vlen = v.len();
        let uniform = |x: &[u32], _t: usize| Ok(Array2::zeros((x.len(), vlen)));
        let got = plan_loss(&traj, uniform, &t, &v, 16, StepWeighting::Linear).unwrap();
        let expect = step_weight(16, 16).unwrap() * 6.0 * (vlen as f64).ln();
        assert_abs_diff_eq!(got, expect, epsilon = 1e-12);

        for step in 1..=16 {
            let oracle = |_: &[u32], _: usize| Ok(oracle_forward(&t, vlen, 50.0));
            assert!(plan_loss(&traj, oracle, &t, &v, step, StepWeighting::Linear).unwrap() < 1e-8);
        }
    }

    #[test]
    fn plan_loss_decreases_toward_one_hot() {
        let v = vocab();
        let t = target(&v, 20, 60);
        let policy = MaskPolicy::planned(2.0, 1.0, 16).unwrap();
        let traj = MaskTrajectory::sample(&t, &policy, 5);
        let noise = random_logits(6, v.len(), 2);
        let oracle = oracle_forward(&t, v.len(), 10.0);
        let mut prev = f64::INFINITY;
        for k in 0..=10 {
            let a = k as f64 / 10.0;
            let z = &noise * (1.0 - a) + &oracle * a;
            let l = plan_loss(
                &traj,
                |_, _| Ok(z.clone()),
                &t,
                &v,
                12,
                StepWeighting::Linear,
            )
            .unwrap();
            assert!(l <= prev);
            prev = l;
        }
    }

    #[test]
    fn boundary_distribution_examples() {
        let v = vocab();
        let t = target(&v, 43, 74);
        let tup = t.tuples[0];
        let flat = Array2::zeros((6, v.len()));
        let (ps, pe) = boundary_distributions(&flat, &tup, &v);
        assert_abs_diff_eq!(ps.sum(), 1.0, epsilon = 1e-12);
        assert!(ps
            .iter()
            .chain(pe.iter())
            .all(|&p| (p - 0.01).abs() < 1e-12));

        let z = random_logits(6, v.len(), 4);
        let mut shifted = z.clone();
        for c in v.time_range() {
            shifted[[3, c]] += 10.0;
        }
        let (a, _) = boundary_distributions(&z, &tup, &v);
        let (b, _) = boundary_distributions(&shifted, &tup, &v);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }

        let o = oracle_forward(&t, v.len(), 50.0);
        let (ps, pe) = boundary_distributions(&o, &tup, &v);
        assert!(ps[43] >= 1.0 - 1e-12 && pe[74] >= 1.0 - 1e-12);
        let (bs, be) = soft_boundaries(&ps, &pe);
        assert_abs_diff_eq!(bs, 43.0 / 99.0, epsilon = 1e-6);
        assert_abs_diff_eq!(be, 74.0 / 99.0, epsilon = 1e-6);
    }

    #[test]
    fn soft_boundary_examples() {
        let mut point = Array1::zeros(100);
        point[0] = 1.0;
        assert_eq!(soft_boundary(&point), 0.0);
        let uniform = Array1::from_elem(100, 0.01);
        assert_abs_diff_eq!(soft_boundary(&uniform), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn soft_iou_examples() {
        assert_abs_diff_eq!(soft_iou(0.2, 0.6, 0.2, 0.6, 1e-8), 1.0, epsilon = 1e-7);
        assert_abs_diff_eq!(
            soft_iou(0.2, 0.6, 0.4, 0.8, 1e-8),
            1.0 / 3.0,
            epsilon = 1e-7
        );
        assert_eq!(soft_iou(0.6, 0.2, 0.1, 0.9, 1e-8), 0.0);
    }

    #[test]
    fn soft_iou_partials_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..500 {
            let v: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
            let (gs, ge) = if v[2] <= v[3] {
                (v[2], v[3])
            } else {
                (v[3], v[2])
            };
            let (bs, be) = (v[0], v[1]);
            let (_, dbs, dbe) = soft_iou_grad(bs, be, gs, ge, 1e-8);
            let h = 1e-7;
            let ns = (soft_iou(bs + h, be, gs, ge, 1e-8) - soft_iou(bs - h, be, gs, ge, 1e-8))
                / (2.0 * h);
            let ne = (soft_iou(bs, be + h, gs, ge, 1e-8) - soft_iou(bs, be - h, gs, ge, 1e-8))
                / (2.0 * h);
            assert_abs_diff_eq!(dbs, ns, epsilon = 1e-5);
            assert_abs_diff_eq!(dbe, ne, epsilon = 1e-5);
        }
    }

    #[test]
    fn gate_examples() {
        let v = vocab();
        let t = target(&v, 10, 20);
        let tup = t.tuples[0];
        let m = v.mask_id;
        let mut state = t.tokens.clone();
        assert!(gate_at_step(&state, &tup, m, GateMode::Both));
        state[4] = m;
        assert!(!gate_at_step(&state, &tup, m, GateMode::Both));
        assert!(gate_at_step(&state, &tup, m, GateMode::Either));
        let masked = vec![m; 6];
        assert!(!gate_at_step(&masked, &tup, m, GateMode::Both));
        assert!(!gate_at_step(&masked, &tup, m, GateMode::Either));
        assert!(gate_at_step(&masked, &tup, m, GateMode::None));
    }

    #[test]
    fn advantage_examples() {
        let a = step_advantages(&[0.7], &[true], 1e-8);
        assert_eq!(a.raw, vec![0.0]);
        assert_eq!(a.clipped, vec![0.0]);

        let a = step_advantages(&[0.2, 0.6], &[true, true], 1e-8);
        assert_abs_diff_eq!(a.mean, 0.4, epsilon = 1e-7);
        assert_abs_diff_eq!(a.std, 0.2, epsilon = 1e-6);
        assert_abs_diff_eq!(a.raw[0], -1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(a.raw[1], 1.0, epsilon = 1e-6);
        assert_eq!(a.clipped[0], 0.0);
        assert_abs_diff_eq!(a.clipped[1], 1.0, epsilon = 1e-6);

        let a = step_advantages(&[0.3, 0.9], &[false, false], 1e-8);
        assert_eq!(a.mean, 0.0);
        assert!(a.raw.iter().all(|&x| x == 0.0));
    }

    fn obs_from_logits(
        z: &Logits,
        tup: &TupleSlots,
        v: &Vocabulary,
        t: usize,
        gate: bool,
    ) -> StepObservation {
        let (ps, pe) = boundary_distributions(z, tup, v);
        StepObservation {
            t,
            gate,
            p_start: ps,
            p_end: pe,
            token_start: v.mask_id,
            token_end: v.mask_id,
        }
    }

    #[test]
    fn iou_loss_zero_when_no_gate() {
        let v = vocab();
        let t = target(&v, 30, 70);
        let obs: Vec<_> = (1..=4)
            .map(|s| {
                obs_from_logits(
                    &random_logits(6, v.len(), s as u64),
                    &t.tuples[0],
                    &v,
                    s,
                    false,
                )
            })
            .collect();
        let rec = TrajectoryRecord::build(obs, (30, 70), 1e-8);
        assert_eq!(iou_loss(&rec, &IoUHyper::default(), 8).unwrap(), 0.0);
    }

    #[test]
    fn iou_loss_under_oracle() {
        let v = vocab();
        let t = target(&v, 30, 70);
        let o = oracle_forward(&t, v.len(), 50.0);
        let steps = [2usize, 4, 6, 8];
        let obs: Vec<_> = steps
            .iter()
            .map(|&s| obs_from_logits(&o, &t.tuples[0], &v, s, true))
            .collect();
        let rec = TrajectoryRecord::build(obs, (30, 70), 1e-8);
        let h = IoUHyper::default();
        for s in &rec.steps {
            assert!((1.0 - s.reward) < 1e-6);
        }
        assert!(rec.advantages.clipped.iter().all(|&a| a == 0.0));
        let term1: f64 = rec
            .steps
            .iter()
            .map(|s| step_weight(s.t, 8).unwrap() * (1.0 - s.reward))
            .sum();
        let expect = (term1 + 3.0 * h.mu * h.delta) / (4.0 + 1e-8);
        assert_abs_diff_eq!(iou_loss(&rec, &h, 8).unwrap(), expect, epsilon = 1e-9);
        assert!(term1 < 1e-6);
    }

    /// Loss as a function of the raw boundary-slot logits, for finite differences.
    fn loss_of_logits(
        zs: &[Logits],
        gates: &[bool],
        t: &TargetSequence,
        v: &Vocabulary,
        h: &IoUHyper,
    ) -> f64 {
        let obs: Vec<_> = zs
            .iter()
            .enumerate()
            .map(|(j, z)| obs_from_logits(z, &t.tuples[0], v, 2 * j + 2, gates[j]))
            .collect();
        let rec = TrajectoryRecord::build(obs, t.tuple_bins(&t.tuples[0], v).unwrap(), h.epsilon);
        iou_loss(&rec, h, 8).unwrap()
    }

    #[test]
    fn iou_loss_logit_gradient_matches_finite_differences() {
        let v = vocab();
        let t = target(&v, 30, 70);
        let h = IoUHyper::default();
        let gates = [false, true, true, true];
        for seed in 0..5u64 {
            let zs: Vec<Logits> = (0..4)
                .map(|j| random_logits(6, v.len(), seed * 10 + j) * 2.0)
                .collect();
            let obs: Vec<_> = zs
                .iter()
                .enumerate()
                .map(|(j, z)| obs_from_logits(z, &t.tuples[0], &v, 2 * j + 2, gates[j]))
                .collect();
            let rec = TrajectoryRecord::build(obs, (30, 70), h.epsilon);
            let grad = iou_loss_grad(&rec, &h, 8).unwrap();
            // Advantages are held fixed in the analytic gradient; perturbing
            // logits moves them too, so compare with a frozen-advantage loss.
            let frozen = |zs: &[Logits]| {
                let obs: Vec<_> = zs
                    .iter()
                    .enumerate()
                    .map(|(j, z)| obs_from_logits(z, &t.tuples[0], &v, 2 * j + 2, gates[j]))
                    .collect();
                let mut r = TrajectoryRecord::build(obs, (30, 70), h.epsilon);
                r.advantages = rec.advantages.clone();
                iou_loss(&r, &h, 8).unwrap()
            };
            let off = v.time_token_offset() as usize;
            let eps = 1e-6;
            for j in 0..4 {
                for (slot, d) in [(3usize, &grad.d_start[j]), (4, &grad.d_end[j])] {
                    for k in [0usize, 29, 30, 31, 55, 70, 99] {
                        let mut zp = zs.clone();
                        zp[j][[slot, off + k]] += eps;
                        let mut zm = zs.clone();
                        zm[j][[slot, off + k]] -= eps;
                        let num = (frozen(&zp) - frozen(&zm)) / (2.0 * eps);
                        let ana = d[k];
                        let denom = ana.abs().max(num.abs()).max(1e-7);
                        assert!(
                            (ana - num).abs() / denom < 1e-5 || (ana - num).abs() < 1e-9,
                            "step {j} slot {slot} k {k}: analytic {ana} numeric {num}"
                        );
                    }
                }
            }
            let _ = loss_of_logits(&zs, &gates, &t, &v, &h);
        }
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!((w.lambda_plan, w.lambda_iou, w.lambda_ce), (1.0, 0.5, 0.2));
        let only_ce = LossWeights {
            lambda_plan: 0.0,
            lambda_iou: 0.0,
            lambda_ce: 1.0,
        };
        assert_eq!(total_loss(1.5, 2.0, 3.0, &only_ce).unwrap().total, 1.5);
        let a = total_loss(1.5, 2.0, 3.0, &w).unwrap().total;
        let w2 = LossWeights {
            lambda_plan: 2.0,
            lambda_iou: 1.0,
            lambda_ce: 0.4,
        };
        assert_abs_diff_eq!(
            total_loss(1.5, 2.0, 3.0, &w2).unwrap().total,
            2.0 * a,
            epsilon = 1e-12
        );
        assert!(total_loss(f64::NAN, 0.0, 0.0, &w).is_err());
        assert!(LossWeights {
            lambda_plan: 0.0,
            lambda_iou: 0.0,
            lambda_ce: 0.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn ce_gradients_match_finite_differences() {
        let v = vocab();
        let t = target(&v, 10, 50);
        let z = random_logits(6, v.len(), 12);
        let masked = [1usize, 3, 4];
        let (_, g1) = masked_ce_grad(&z, &t, &masked);
        let (_, g2) = base_ce_grad(&z, &t);
        let eps = 1e-6;
        for (i, c) in [
            (1usize, 3usize),
            (3, 10),
            (4, 40),
            (0, 0),
            (5, v.sep_id as usize),
        ] {
            let mut zp = z.clone();
            zp[[i, c]] += eps;
            let mut zm = z.clone();
            zm[[i, c]] -= eps;
            let n1 = (masked_ce(&zp, &t, &masked) - masked_ce(&zm, &t, &masked)) / (2.0 * eps);
            let n2 = (base_ce(&zp, &t) - base_ce(&zm, &t)) / (2.0 * eps);
            assert_abs_diff_eq!(g1[[i, c]], n1, epsilon = 1e-8);
            assert_abs_diff_eq!(g2[[i, c]], n2, epsilon = 1e-8);
        }
    }

    proptest! {
        #[test]
        fn soft_iou_in_unit_interval(bs in 0.0f64..=1.0, be in 0.0f64..=1.0, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (gs, ge) = if a <= b { (a, b) } else { (b, a) };
            let r = soft_iou(bs, be, gs, ge, 1e-8);
            prop_assert!((0.0..1.0).contains(&r));
        }

        #[test]
        fn advantages_are_centered(rs in proptest::collection::vec(0.0f64..1.0, 1..40), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gates: Vec<bool> = rs.iter().map(|_| rng.random_bool(0.6)).collect();
            let a = step_advantages(&rs, &gates, 1e-8);
            let active = gates.iter().filter(|&&g| g).count() as f64;
            let sum: f64 = a.raw.iter().zip(&gates).map(|(x, &g)| if g { *x } else { 0.0 }).sum();
            prop_assert!(sum.abs() <= 1e-6 * active.max(1.0));
            prop_assert!(a.clipped.iter().all(|&x| x >= 0.0));
            for (x, &g) in a.raw.iter().zip(&gates) {
                if !g { prop_assert_eq!(*x, 0.0); }
            }
        }

        #[test]
        fn hinge_zero_iff_strict_improvement(r in proptest::collection::vec(0.0f64..0.99, 2..8)) {
            // Build point-mass records with prescribed rewards is awkward; test the
            // hinge algebra through a direct record instead.
            let n = r.len();
            let steps: Vec<StepRecord> = (0..n).map(|j| StepRecord {
                t: j + 1, gate: true,
                p_start: Array1::from_elem(10, 0.1), p_end: Array1::from_elem(10, 0.1),
                soft_start: 0.5, soft_end: 0.5, reward: r[j], token_start: 0, token_end: 0,
            }).collect();
            let rec = TrajectoryRecord {
                advantages: Advantages { mean: 0.0, std: 1.0, raw: vec![0.0; n], clipped: vec![0.0; n] },
                steps, gt_bins: (0, 9),
            };
            let h = IoUHyper { alpha: StepWeighting::Uniform, lambda_rel: 0.0, ..IoUHyper::default() };
            let base: f64 = r.iter().map(|x| (1.0 - x) / n as f64).sum::<f64>() / (n as f64 + 1e-8);
            let hinge = iou_loss(&rec, &h, n).unwrap() - base;
            let improving = (1..n).all(|j| r[j - 1] >= r[j] + h.delta);
            prop_assert_eq!(hinge.abs() < 1e-12, improving);
        }
    }
}
