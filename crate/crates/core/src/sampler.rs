//! Confidence-based reverse denoising and response parsing.

use std::ops::Range;

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corruption::{TargetSequence, TupleSlots};
use crate::denoiser::{Denoise, Logits};
use crate::error::{Error, Result};
use crate::losses::{
    gate_at_step, soft_boundaries, soft_iou, GateMode, StepObservation, TrajectoryRecord,
};
use crate::timecodec::{Segment, TimeGrid, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub n_steps: usize,
    /// Positions per semi-autoregressive block; `None` means one block.
    pub block_length: Option<usize>,
    /// Logit divisor; 0 decodes greedily.
    pub temperature: f64,
    pub record_trajectory: bool,
    /// Sampling seed, unused at temperature 0.
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            n_steps: 16,
            block_length: None,
            temperature: 0.0,
            record_trajectory: false,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self, len: usize) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::Config("decoding needs at least one step".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be finite and >= 0".into()));
        }
        if let Some(b) = self.block_length {
            if b == 0 || (len > 0 && b > len) {
                return Err(Error::Config(format!(
                    "block length {b} must lie in [1, {len}]"
                )));
            }
            let n_blocks = len.div_ceil(b);
            if n_blocks > self.n_steps {
                return Err(Error::Config(format!(
                    "{n_blocks} blocks need at least as many steps, got {}",
                    self.n_steps
                )));
            }
        }
        Ok(())
    }
}

/// One reverse step: its noise level, active block and reveal count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduledStep {
    pub t: usize,
    pub block: Range<usize>,
    pub count: usize,
}

fn even_split(total: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|i| total / parts + usize::from(i < total % parts))
        .collect()
}

/// Full plan for decoding `len` masked positions, in execution order
/// (`t = S` first).
pub fn schedule(len: usize, cfg: &DecodeConfig) -> Result<Vec<ScheduledStep>> {
    cfg.validate(len)?;
    let block_len = cfg.block_length.unwrap_or(len.max(1));
    let n_blocks = len.div_ceil(block_len).max(1);
    let steps_per_block = even_split(cfg.n_steps, n_blocks);
    let mut t = cfg.n_steps;
    let mut out = Vec::with_capacity(cfg.n_steps);
    for (b, &n) in steps_per_block.iter().enumerate() {
        let lo = (b * block_len).min(len);
        let hi = ((b + 1) * block_len).min(len);
        for count in even_split(hi - lo, n) {
            out.push(ScheduledStep {
                t,
                block: lo..hi,
                count,
            });
            t -= 1;
        }
    }
    Ok(out)
}

/// Per-step reveal counts in execution order.
pub fn reveal_schedule(n_masked: usize, cfg: &DecodeConfig) -> Result<Vec<usize>> {
    Ok(schedule(n_masked, cfg)?
        .into_iter()
        .map(|s| s.count)
        .collect())
}

/// A position fixed during one reverse step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reveal {
    pub position: usize,
    pub token: u32,
    pub confidence: f64,
}

/// Reveal the `n_reveal` most confident masked positions among `candidates`.
/// Ties go to the lower position. The mask token is never proposed.
pub fn denoise_step<R: Rng + ?Sized>(
    x_t: &mut [u32],
    logits: &Logits,
    candidates: &[usize],
    n_reveal: usize,
    temperature: f64,
    mask_id: u32,
    rng: &mut R,
) -> Vec<Reveal> {
    let mut proposals: Vec<Reveal> = candidates
        .iter()
        .filter(|&&i| x_t[i] == mask_id)
        .map(|&i| {
            let row = logits.row(i);
            let scale = if temperature > 0.0 {
                1.0 / temperature
            } else {
                1.0
            };
            let mut m = f64::NEG_INFINITY;
            for (v, &z) in row.iter().enumerate() {
                if v as u32 != mask_id {
                    m = m.max(z * scale);
                }
            }
            let probs: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(v, &z)| {
                    if v as u32 == mask_id {
                        0.0
                    } else {
                        (z * scale - m).exp()
                    }
                })
                .collect();
            let total: f64 = probs.iter().sum();
            let token = if temperature > 0.0 {
                let mut u = rng.random::<f64>() * total;
                let mut pick = probs.len() - 1;
                for (v, &p) in probs.iter().enumerate() {
                    if u < p {
                        pick = v;
                        break;
                    }
                    u -= p;
                }
                while probs[pick] == 0.0 {
                    pick -= 1;
                }
                pick
            } else {
                let mut best = 0;
                for (v, &p) in probs.iter().enumerate() {
                    if p > probs[best] {
                        best = v;
                    }
                }
                best
            };
            Reveal {
                position: i,
                token: token as u32,
                confidence: probs[token] / total,
            }
        })
        .collect();
    proposals.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.position.cmp(&b.position))
    });
    proposals.truncate(n_reveal);
    for r in &proposals {
        x_t[r.position] = r.token;
    }
    proposals
}

/// Snapshot of one reverse step, kept when trajectories are recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub t: usize,
    /// State after this step's reveals.
    pub state: Vec<u32>,
    /// Time-token distribution at every position (`len x N`).
    pub time_probs: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub tokens: Vec<u32>,
    pub reveal_step: Vec<usize>,
    pub confidence: Vec<f64>,
    pub trace: Option<Vec<TraceStep>>,
}

fn time_probs(logits: &Logits, vocab: &Vocabulary) -> Array2<f64> {
    let mut p = logits.slice(s![.., vocab.time_range()]).to_owned();
    crate::denoiser::softmax_rows_inplace(&mut p);
    p
}

/// Decode a `template_len` response from the fully masked state.
pub fn generate<D: Denoise + ?Sized>(
    denoiser: &D,
    vocab: &Vocabulary,
    template_len: usize,
    cfg: &DecodeConfig,
) -> Result<GenerationResult> {
    let plan = schedule(template_len, cfg)?;
    let mut x = vec![vocab.mask_id; template_len];
    let mut reveal_step = vec![0; template_len];
    let mut confidence = vec![0.0; template_len];
    let mut trace = cfg.record_trajectory.then(Vec::new);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    if template_len == 0 {
        return Ok(GenerationResult {
            tokens: x,
            reveal_step,
            confidence,
            trace,
        });
    }
    for step in &plan {
        if step.count == 0 && trace.is_none() {
            continue;
        }
        let logits = denoiser.logits(&x, step.t)?;
        let candidates: Vec<usize> = step.block.clone().collect();
        let revealed = denoise_step(
            &mut x,
            &logits,
            &candidates,
            step.count,
            cfg.temperature,
            vocab.mask_id,
            &mut rng,
        );
        for r in revealed {
            reveal_step[r.position] = step.t;
            confidence[r.position] = r.confidence;
        }
        if let Some(tr) = trace.as_mut() {
            tr.push(TraceStep {
                t: step.t,
                state: x.clone(),
                time_probs: time_probs(&logits, vocab),
            });
        }
    }
    debug_assert!(x.iter().all(|&v| v != vocab.mask_id));
    Ok(GenerationResult {
        tokens: x,
        reveal_step,
        confidence,
        trace,
    })
}

/// Per-tuple soft-IoU curves of a recorded generation against ground truth.
pub fn trace_records(
    trace: &[TraceStep],
    target: &TargetSequence,
    vocab: &Vocabulary,
    gate: GateMode,
    eps: f64,
) -> Result<Vec<TrajectoryRecord>> {
    target
        .tuples
        .iter()
        .map(|tup| {
            let bins = target.tuple_bins(tup, vocab)?;
            let obs = trace
                .iter()
                .map(|st| StepObservation {
                    t: st.t,
                    gate: gate_at_step(&st.state, tup, vocab.mask_id, gate),
                    p_start: st.time_probs.row(tup.start).to_owned(),
                    p_end: st.time_probs.row(tup.end).to_owned(),
                    token_start: st.state[tup.start],
                    token_end: st.state[tup.end],
                })
                .collect();
            Ok(TrajectoryRecord::build(obs, bins, eps))
        })
        .collect()
}

/// One CSV row per (step, tuple): `step,tuple_id,soft_iou,gate,revealed_count`.
pub fn trajectory_csv(trace: &[TraceStep], records: &[TrajectoryRecord], mask_id: u32) -> String {
    let mut out = String::from("step,tuple_id,soft_iou,gate,revealed_count\n");
    let revealed: Vec<(usize, usize)> = trace
        .iter()
        .map(|st| (st.t, st.state.iter().filter(|&&v| v != mask_id).count()))
        .collect();
    let mut rows = Vec::new();
    for (tuple_id, rec) in records.iter().enumerate() {
        for st in &rec.steps {
            let count = revealed.iter().find(|(t, _)| *t == st.t).map_or(0, |r| r.1);
            rows.push((std::cmp::Reverse(st.t), tuple_id, st.reward, st.gate, count));
        }
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    for (t, id, r, g, c) in rows {
        out.push_str(&format!("{},{id},{r:.6},{},{c}\n", t.0, u8::from(g)));
    }
    out
}

/// Soft IoU of a recorded step against ground truth bins, for reporting.
pub fn step_soft_iou(
    p_start: &Array1<f64>,
    p_end: &Array1<f64>,
    gt_bins: (usize, usize),
    eps: f64,
) -> f64 {
    let n = (p_start.len() - 1) as f64;
    let (bs, be) = soft_boundaries(p_start, p_end);
    soft_iou(bs, be, gt_bins.0 as f64 / n, gt_bins.1 as f64 / n, eps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTuple {
    pub class: usize,
    pub segment: Segment,
    pub confidence: f64,
    pub disordered: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParsedResponse {
    pub tuples: Vec<ParsedTuple>,
    /// Tuples dropped for a malformed slot.
    pub dropped: usize,
}

/// Walk fixed-width tuples `<class> <desc x m> <t_s> <t_e> <sep>`.
///
/// `confidence` holds per-position reveal confidences; without it every
/// tuple scores 1.
pub fn parse_response(
    tokens: &[u32],
    confidence: Option<&[f64]>,
    vocab: &Vocabulary,
    grid: &TimeGrid,
    desc_width: usize,
) -> ParsedResponse {
    let width = desc_width + 4;
    let mut out = ParsedResponse::default();
    for (ti, chunk) in tokens.chunks(width).enumerate() {
        let label = chunk[0];
        if label == vocab.none_id {
            continue;
        }
        if chunk.len() < width {
            out.dropped += 1;
            continue;
        }
        let Some(class) = vocab.class_of(label) else {
            out.dropped += 1;
            continue;
        };
        let (ts, te) = (chunk[1 + desc_width], chunk[2 + desc_width]);
        let (Ok(ks), Ok(ke)) = (vocab.time_index(ts), vocab.time_index(te)) else {
            out.dropped += 1;
            continue;
        };
        let decoded = match grid.decode_segment(ks, ke) {
            Ok(d) => d,
            Err(_) => {
                out.dropped += 1;
                continue;
            }
        };
        let conf = confidence.map_or(1.0, |c| {
            let lo = ti * width;
            c[lo..lo + width].iter().sum::<f64>() / width as f64
        });
        out.tuples.push(ParsedTuple {
            class,
            segment: decoded.segment,
            confidence: conf,
            disordered: decoded.disordered,
        });
    }
    out
}

/// Slot layout of the first `n_tuples` tuples of a template.
pub fn template_slots(n_tuples: usize, desc_width: usize) -> Vec<TupleSlots> {
    let width = desc_width + 4;
    (0..n_tuples)
        .map(|i| TupleSlots {
            label: i * width,
            start: i * width + 1 + desc_width,
            end: i * width + 2 + desc_width,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::OracleDenoiser;
    use approx::assert_abs_diff_eq;

    fn cfg(n_steps: usize, block_length: Option<usize>) -> DecodeConfig {
        DecodeConfig {
            n_steps,
            block_length,
            ..DecodeConfig::default()
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::synthetic(8, 2, 100).unwrap()
    }

    fn target(v: &Vocabulary) -> TargetSequence {
        let mut tokens = vec![
            v.class_token(3).unwrap(),
            v.desc_token(3, 0).unwrap(),
            v.desc_token(3, 1).unwrap(),
            v.time_token(25).unwrap(),
            v.time_token(74).unwrap(),
            v.sep_id,
        ];
        tokens.extend([v.none_id, v.pad_id, v.pad_id, v.pad_id, v.pad_id, v.sep_id]);
        TargetSequence::new(tokens, template_slots(1, 2), v).unwrap()
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(reveal_schedule(0, &cfg(5, None)).unwrap(), vec![0; 5]);
        assert_eq!(reveal_schedule(64, &cfg(64, None)).unwrap(), vec![1; 64]);
        assert_eq!(
            reveal_schedule(10, &cfg(4, None)).unwrap(),
            vec![3, 3, 2, 2]
        );
        let plan = schedule(10, &cfg(4, Some(4))).unwrap();
        let counts: Vec<usize> = plan.iter().map(|s| s.count).collect();
        assert_eq!(counts, vec![2, 2, 4, 2]);
        assert_eq!(plan[0].block, 0..4);
        assert_eq!(plan[3].block, 8..10);
        assert_eq!(
            plan.iter().map(|s| s.t).collect::<Vec<_>>(),
            vec![4, 3, 2, 1]
        );
        assert!(schedule(10, &cfg(2, Some(3))).is_err());
        assert!(schedule(10, &cfg(4, Some(11))).is_err());
    }

    #[test]
    fn full_reveal_in_one_step() {
        let v = vocab();
        let t = target(&v);
        let z = crate::denoiser::oracle_forward(&t, v.len(), 50.0);
        let mut x = vec![v.mask_id; t.len()];
        let all: Vec<usize> = (0..t.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = denoise_step(&mut x, &z, &all, all.len(), 0.0, v.mask_id, &mut rng);
        assert_eq!(r.len(), t.len());
        assert_eq!(x, t.tokens);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let v = vocab();
        let z = Array2::zeros((4, v.len()));
        let mut x = vec![v.mask_id; 4];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = denoise_step(&mut x, &z, &[0, 1, 2, 3], 2, 0.0, v.mask_id, &mut rng);
        assert_eq!(r.iter().map(|r| r.position).collect::<Vec<_>>(), vec![0, 1]);
        assert!(x[0] != v.mask_id && x[2] == v.mask_id);
    }

    #[test]
    fn revealed_tokens_are_never_edited() {
        let v = vocab();
        let mut x = vec![v.mask_id, 7, v.mask_id];
        let mut z = Array2::zeros((3, v.len()));
        z[[1, 9]] = 100.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        denoise_step(&mut x, &z, &[0, 1, 2], 3, 0.0, v.mask_id, &mut rng);
        assert_eq!(x[1], 7);
        assert!(x.iter().all(|&t| t != v.mask_id));
    }

    #[test]
    fn oracle_generation_is_exact() {
        let v = vocab();
        let t = target(&v);
        let oracle = OracleDenoiser::new(&t, v.len());
        for (s, b) in [
            (1, None),
            (4, None),
            (12, Some(6)),
            (12, Some(5)),
            (16, Some(1)),
        ] {
            let c = cfg(s, b);
            let g = generate(&oracle, &v, t.len(), &c).unwrap();
            assert_eq!(g.tokens, t.tokens, "S={s} block={b:?}");
            assert!(g.reveal_step.iter().all(|&r| (1..=s).contains(&r)));
        }
    }

    #[test]
    fn empty_response() {
        let v = vocab();
        let t = TargetSequence::new(vec![], vec![], &v).unwrap();
        let g = generate(&OracleDenoiser::new(&t, v.len()), &v, 0, &cfg(4, None)).unwrap();
        assert!(g.tokens.is_empty());
    }

    #[test]
    fn sampling_at_temperature_is_seeded() {
        let v = vocab();
        let t = target(&v);
        let o = OracleDenoiser {
            target: &t,
            vocab_size: v.len(),
            confidence: 2.0,
        };
        let c = DecodeConfig {
            temperature: 1.0,
            seed: 3,
            ..cfg(6, None)
        };
        let a = generate(&o, &v, t.len(), &c).unwrap();
        let b = generate(&o, &v, t.len(), &c).unwrap();
        assert_eq!(a, b);
        assert!(a.tokens.iter().all(|&x| x != v.mask_id));
    }

    #[test]
    fn parse_examples() {
        let v = vocab();
        let grid = TimeGrid::new(100, 100.0).unwrap();
        let t = target(&v);
        let p = parse_response(&t.tokens, None, &v, &grid, 2);
        assert_eq!(p.tuples.len(), 1);
        assert_eq!(p.tuples[0].class, 3);
        assert_abs_diff_eq!(p.tuples[0].segment.start, 25.2525, epsilon = 1e-4);
        assert_abs_diff_eq!(p.tuples[0].segment.end, 74.7474, epsilon = 1e-4);

        let none = vec![v.none_id, v.pad_id, v.pad_id, v.pad_id, v.pad_id, v.sep_id];
        assert!(parse_response(&none, None, &v, &grid, 2).tuples.is_empty());

        let mut bad = t.tokens.clone();
        bad[3] = v.desc_token(3, 0).unwrap();
        let p = parse_response(&bad, None, &v, &grid, 2);
        assert!(p.tuples.is_empty());
        assert_eq!(p.dropped, 1);

        let mut swapped = t.tokens.clone();
        swapped.swap(3, 4);
        let p = parse_response(&swapped, None, &v, &grid, 2);
        assert!(p.tuples[0].disordered);
        assert!(p.tuples[0].segment.start <= p.tuples[0].segment.end);
    }

    #[test]
    fn trace_records_follow_generation() {
        let v = vocab();
        let t = target(&v);
        let c = DecodeConfig {
            record_trajectory: true,
            ..cfg(6, None)
        };
        let g = generate(&OracleDenoiser::new(&t, v.len()), &v, t.len(), &c).unwrap();
        let trace = g.trace.unwrap();
        assert_eq!(trace.len(), 6);
        let recs = trace_records(&trace, &t, &v, GateMode::Both, 1e-8).unwrap();
        assert_eq!(recs.len(), 1);
        assert!(recs[0].steps.iter().all(|s| s.reward > 0.99));
        assert!(recs[0].steps[0].gate);
        let csv = trajectory_csv(&trace, &recs, v.mask_id);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,tuple_id,soft_iou,gate,revealed_count");
        assert_eq!(lines.len(), 7);
        assert!(lines[1].starts_with("6,0,"));
        assert!(lines[6].ends_with(",1,12"));
    }
}
