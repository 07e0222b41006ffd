//! Optimization loop, evaluation helpers and the ablation-grid runner.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, DType, RawCheckpoint, TensorBlock};
use crate::corruption::{corrupt, MaskKind, MaskPolicy, MaskTrajectory, TargetSequence};
use crate::denoiser::{DenoiserParams, ModelConfig, ModelDenoiser, VideoContext};
use crate::error::{Error, Result};
use crate::losses::{
    base_ce_grad, boundary_distributions, gate_at_step, iou_loss_grad, masked_ce_grad, total_loss,
    Advantages, GateMode, IoUHyper, LossWeights, StepObservation, StepWeighting, TrajectoryRecord,
};
use crate::metrics::{map_suite, rtl_suite, Detection, EvalReport, Grid};
use crate::sampler::{generate, parse_response, DecodeConfig, GenerationResult};
use crate::synthgen::{build_target, Example, Profile, SynthConfig};
use crate::timecodec::{TimeGrid, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    /// Micro-batches per optimizer update.
    pub accumulation: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    pub mask: MaskPolicy,
    /// Weighting of the planned reconstruction term.
    pub step_weighting: StepWeighting,
    pub iou: IoUHyper,
    pub gate: GateMode,
    /// Evenly spaced trajectory steps at which the IoU objective is evaluated.
    pub iou_steps: usize,
    /// Mask boundary slots before reading boundary distributions.
    pub probe: bool,
    /// Restrict the base reconstruction loss to boundary positions.
    pub boundary_only_ce: bool,
    /// Evaluate every this many updates (0 disables).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 0.01,
            warmup_ratio: 0.03,
            epochs: 1,
            accumulation: 8,
            batch_size: 1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weights: LossWeights::default(),
            mask: MaskPolicy {
                kind: MaskKind::Planned,
                gamma: 2.0,
                eta: 1.0,
                n_steps: 64,
            },
            step_weighting: StepWeighting::Linear,
            iou: IoUHyper::default(),
            gate: GateMode::Both,
            iou_steps: 8,
            probe: true,
            boundary_only_ce: false,
            eval_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// CPU-sized preset: 16 diffusion steps and a shorter, hotter schedule.
    pub fn desk() -> Self {
        let mut c = Self {
            lr: 3e-3,
            epochs: 15,
            accumulation: 4,
            ..Self::default()
        };
        c.mask.n_steps = 16;
        c
    }

    pub fn n_steps(&self) -> usize {
        self.mask.n_steps
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.accumulation == 0 || self.batch_size == 0 {
            return bad("accumulation and batch_size must be >= 1");
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1)");
        }
        if self.iou_steps == 0 || self.iou_steps > self.mask.n_steps {
            return bad("iou_steps must lie in [1, n_steps]");
        }
        self.mask.validate()?;
        self.weights.validate()?;
        self.iou.validate()
    }

    /// Uniform masking, uniform step weights, no IoU reward.
    pub fn base_variant(&self) -> Self {
        let mut c = self.clone();
        c.mask.kind = MaskKind::Uniform;
        c.step_weighting = StepWeighting::Uniform;
        c.weights.lambda_iou = 0.0;
        c
    }
}

/// Everything a training or ablation run reads from its config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Dataset directory written by `gen-data`.
    pub data: Option<std::path::PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    /// mAP threshold grid for the closed-set profile.
    pub grid: Grid,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::desk();
        Self {
            data: None,
            model: ModelConfig::default(),
            decode: DecodeConfig {
                n_steps: train.n_steps(),
                ..DecodeConfig::default()
            },
            train,
            grid: Grid::Thumos,
        }
    }
}

impl RunConfig {
    /// Fill the fields determined by the task and apply `seed` to
    /// initialization, training and decoding.
    pub fn resolve(&mut self, task: &SynthConfig, seed: Option<u64>) -> Result<()> {
        let vocab = task.vocabulary()?;
        self.model.vocab_size = vocab.len();
        self.model.bos_id = vocab.bos_id;
        self.model.sep_id = vocab.sep_id;
        self.model.d_feat = task.d_feat;
        self.model.max_response = task.template_len();
        self.model.n_steps = self
            .model
            .n_steps
            .max(self.train.n_steps())
            .max(self.decode.n_steps);
        if let Some(s) = seed {
            self.model.init_seed = s;
            self.train.seed = s;
            self.decode.seed = s;
        }
        self.model.validate()?;
        self.train.validate()
    }
}

/// Linear warmup from 0 over `warmup_ratio * total`, then cosine decay to 0.
pub fn lr_at(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let step = step.min(total) as f64;
    let total = total as f64;
    let warm = cfg.warmup_ratio * total;
    if step < warm {
        cfg.lr * step / warm
    } else {
        let progress = (step - warm) / (total - warm);
        cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub step: u64,
    /// Updates skipped because of non-finite gradients.
    pub skipped: u64,
}

impl OptimizerState {
    pub fn new(params: &DenoiserParams) -> Self {
        let zeros: Vec<Array2<f64>> = params
            .params()
            .iter()
            .map(|p| Array2::zeros(p.value.raw_dim()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            skipped: 0,
        }
    }
}

/// One AdamW update from the accumulated gradients. Returns `false` (and
/// leaves everything untouched) when a gradient is non-finite.
pub fn optimizer_step(
    params: &mut DenoiserParams,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    lr: f64,
) -> bool {
    if params
        .params()
        .iter()
        .any(|p| p.grad.iter().any(|g| !g.is_finite()))
    {
        state.skipped += 1;
        return false;
    }
    state.step += 1;
    let k = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(k);
    let c2 = 1.0 - b2.powi(k);
    let frozen: Vec<bool> = params
        .params()
        .iter()
        .map(|p| params.is_frozen(p.group))
        .collect();
    for (i, p) in params.params_mut().iter_mut().enumerate() {
        if frozen[i] {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        ndarray::Zip::from(&mut p.value)
            .and(&p.grad)
            .and(m)
            .and(v)
            .for_each(|w, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
                *w -= lr * (update + cfg.weight_decay * *w);
            });
    }
    true
}

/// An example with its context and target ready for the model.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub video_id: String,
    pub context: VideoContext,
    pub target: TargetSequence,
    pub ground_truth: Vec<Detection>,
}

pub fn prepare(examples: &[Example], task: &SynthConfig, n_ctx: usize) -> Result<Vec<Prepared>> {
    let vocab = task.vocabulary()?;
    let grid = task.grid()?;
    examples
        .iter()
        .map(|ex| {
            let q = vocab.id(&ex.query).ok_or_else(|| {
                Error::Config(format!("query token `{}` not in vocabulary", ex.query))
            })?;
            Ok(Prepared {
                video_id: ex.video_id.clone(),
                context: VideoContext::from_frames(&ex.features, vec![q], n_ctx)?,
                target: build_target(ex, &vocab, &grid, task.max_instances, task.desc_width)?,
                ground_truth: ex.ground_truth(),
            })
        })
        .collect()
}

/// Unweighted loss components of one example.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub ce: f64,
    pub plan: f64,
    pub iou: f64,
}

/// Evenly spaced evaluation steps `ceil(j S / K)`, `j = 1..=K`.
pub fn iou_eval_steps(n_steps: usize, k: usize) -> Vec<usize> {
    (1..=k).map(|j| (j * n_steps).div_ceil(k)).collect()
}

/// The random part of one example's loss: a corruption trajectory and a
/// sampled step.
#[derive(Debug, Clone)]
pub struct Draw {
    pub trajectory: MaskTrajectory,
    pub t: usize,
}

impl Draw {
    pub fn sample<R: Rng + ?Sized>(
        target: &TargetSequence,
        cfg: &TrainConfig,
        rng: &mut R,
    ) -> Self {
        let trajectory = MaskTrajectory::sample_with(target, &cfg.mask, rng);
        let t = rng.random_range(1..=cfg.n_steps());
        Self { trajectory, t }
    }
}

/// Loss components of one example and the per-tuple advantages used.
#[derive(Debug, Clone)]
pub struct ExampleOutput {
    pub components: Components,
    pub advantages: Vec<Advantages>,
}

/// Forward/backward for one example; gradients scaled by `scale` are
/// accumulated into `params`.
pub fn example_gradients<R: Rng + ?Sized>(
    params: &mut DenoiserParams,
    ex: &Prepared,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    scale: f64,
    rng: &mut R,
) -> Result<Components> {
    let draw = Draw::sample(&ex.target, cfg, rng);
    Ok(example_step(params, ex, cfg, vocab, &draw, scale, None)?.components)
}

/// Loss and gradients for a fixed draw. With `frozen` set, those per-tuple
/// advantages replace the ones computed from the current rewards.
pub fn example_step(
    params: &mut DenoiserParams,
    ex: &Prepared,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    draw: &Draw,
    scale: f64,
    frozen: Option<&[Advantages]>,
) -> Result<ExampleOutput> {
    let s = cfg.n_steps();
    let target = &ex.target;
    let (traj, t) = (&draw.trajectory, draw.t);
    let mask = traj.mask_at_step(t)?;
    let x_t = corrupt(target, &mask, vocab)?;
    let (logits, cache) = params.forward_cached(&x_t, &ex.context, t)?;

    let w = cfg.step_weighting.weight(t, s)?;
    let (plan_raw, g_plan) = masked_ce_grad(&logits, target, &mask.masked());
    let (ce, g_ce) = if cfg.boundary_only_ce {
        base_ce_grad(&logits, &target.boundary_supervised())
    } else {
        base_ce_grad(&logits, target)
    };
    let dlogits = (g_plan * (cfg.weights.lambda_plan * w) + g_ce * cfg.weights.lambda_ce) * scale;
    params.backward(&cache, &dlogits)?;
    let mut out = Components {
        ce,
        plan: w * plan_raw,
        iou: 0.0,
    };

    let mut advantages = Vec::new();
    if cfg.weights.lambda_iou == 0.0 || target.tuples.is_empty() {
        return Ok(ExampleOutput {
            components: out,
            advantages,
        });
    }
    let n_time = vocab.n_time_tokens();
    let off = vocab.time_token_offset() as usize;
    let steps = iou_eval_steps(s, cfg.iou_steps);
    let mut evaluated = Vec::with_capacity(steps.len());
    for &tj in &steps {
        let state = corrupt(target, &traj.mask_at_step(tj)?, vocab)?;
        let gates: Vec<bool> = target
            .tuples
            .iter()
            .map(|tup| gate_at_step(&state, tup, vocab.mask_id, cfg.gate))
            .collect();
        if !gates.iter().any(|&g| g) {
            evaluated.push((tj, state, gates, None));
            continue;
        }
        let mut probe = state.clone();
        if cfg.probe {
            for tup in &target.tuples {
                probe[tup.start] = vocab.mask_id;
                probe[tup.end] = vocab.mask_id;
            }
        }
        let fwd = params.forward_cached(&probe, &ex.context, tj)?;
        evaluated.push((tj, state, gates, Some(fwd)));
    }

    let n_tuples = target.tuples.len() as f64;
    let coef = cfg.weights.lambda_iou * scale / n_tuples;
    let mut dlogits: Vec<Option<Array2<f64>>> = evaluated
        .iter()
        .map(|e| e.3.as_ref().map(|(z, _)| Array2::zeros(z.raw_dim())))
        .collect();
    let flat = ndarray::Array1::from_elem(n_time, 1.0 / n_time as f64);
    for (ti, tup) in target.tuples.iter().enumerate() {
        let obs: Vec<StepObservation> = evaluated
            .iter()
            .map(|(tj, state, gates, fwd)| {
                let (p_start, p_end) = match fwd {
                    Some((z, _)) => boundary_distributions(z, tup, vocab),
                    None => (flat.clone(), flat.clone()),
                };
                StepObservation {
                    t: *tj,
                    gate: gates[ti],
                    p_start,
                    p_end,
                    token_start: state[tup.start],
                    token_end: state[tup.end],
                }
            })
            .collect();
        let mut record =
            TrajectoryRecord::build(obs, target.tuple_bins(tup, vocab)?, cfg.iou.epsilon);
        if let Some(f) = frozen {
            record.advantages = f
                .get(ti)
                .cloned()
                .ok_or_else(|| Error::Config(format!("no frozen advantages for tuple {ti}")))?;
        }
        advantages.push(record.advantages.clone());
        let grad = iou_loss_grad(&record, &cfg.iou, s)?;
        out.iou += grad.loss / n_tuples;
        // record steps are ascending in t, as are `evaluated`
        for (j, d) in dlogits.iter_mut().enumerate() {
            if let Some(d) = d {
                let mut row = d.slice_mut(ndarray::s![tup.start, off..off + n_time]);
                row.scaled_add(coef, &grad.d_start[j]);
                let mut row = d.slice_mut(ndarray::s![tup.end, off..off + n_time]);
                row.scaled_add(coef, &grad.d_end[j]);
            }
        }
    }
    for (e, d) in evaluated.iter().zip(&dlogits) {
        if let (Some((_, cache)), Some(d)) = (&e.3, d) {
            params.backward(cache, d)?;
        }
    }
    Ok(ExampleOutput {
        components: out,
        advantages,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iter: usize,
    pub l_ce: f64,
    pub l_plan: f64,
    pub l_iou: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub iter: usize,
    pub report: EvalReport,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub params: DenoiserParams,
    pub opt: OptimizerState,
    pub cfg: TrainConfig,
    pub samples_done: usize,
    pub log: Vec<LogEntry>,
    pub evals: Vec<EvalEntry>,
}

/// Evaluation set and decoding settings for periodic evaluation.
pub struct EvalSpec<'a> {
    pub data: &'a [Prepared],
    pub task: &'a SynthConfig,
    pub decode: &'a DecodeConfig,
    pub grid: Grid,
}

impl Trainer {
    pub fn new(model: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if model.n_steps < cfg.n_steps() {
            return Err(Error::Config(format!(
                "model step table covers {} steps, training uses {}",
                model.n_steps,
                cfg.n_steps()
            )));
        }
        let params = DenoiserParams::new(model)?;
        Ok(Self {
            opt: OptimizerState::new(&params),
            params,
            cfg,
            samples_done: 0,
            log: Vec::new(),
            evals: Vec::new(),
        })
    }

    fn group_size(&self) -> usize {
        self.cfg.accumulation * self.cfg.batch_size
    }

    pub fn total_samples(&self, n_data: usize) -> usize {
        self.cfg.epochs * n_data
    }

    pub fn total_updates(&self, n_data: usize) -> usize {
        self.total_samples(n_data).div_ceil(self.group_size())
    }

    pub fn updates_done(&self) -> usize {
        self.samples_done.div_ceil(self.group_size())
    }

    fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(u64::MAX - epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Train until the schedule ends or `max_updates` more updates ran.
    pub fn run(
        &mut self,
        data: &[Prepared],
        vocab: &Vocabulary,
        max_updates: Option<usize>,
        eval: Option<&EvalSpec<'_>>,
    ) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let n = data.len();
        let total_samples = self.total_samples(n);
        let total_updates = self.total_updates(n);
        let g = self.group_size();
        let mut updates_run = 0;
        let mut order_epoch = usize::MAX;
        let mut order = Vec::new();
        while self.samples_done < total_samples && max_updates.is_none_or(|m| updates_run < m) {
            let group_end = (self.samples_done + g).min(total_samples);
            let group = group_end - self.samples_done;
            let update = self.samples_done / g;
            self.params.zero_grad();
            let mut sum = Components::default();
            // batch mean followed by accumulation mean is a mean over the group
            let scale = 1.0 / group as f64;
            for c in self.samples_done..group_end {
                let epoch = c / n;
                if epoch != order_epoch {
                    order = self.epoch_order(epoch, n);
                    order_epoch = epoch;
                }
                let ex = &data[order[c % n]];
                let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
                rng.set_stream(c as u64);
                let comp =
                    example_gradients(&mut self.params, ex, &self.cfg, vocab, scale, &mut rng)?;
                sum.ce += comp.ce;
                sum.plan += comp.plan;
                sum.iou += comp.iou;
            }
            let lr = lr_at(update, total_updates, &self.cfg);
            optimizer_step(&mut self.params, &mut self.opt, &self.cfg, lr);
            self.samples_done = group_end;
            let k = group as f64;
            let comps = Components {
                ce: sum.ce / k,
                plan: sum.plan / k,
                iou: sum.iou / k,
            };
            let tot = total_loss(comps.ce, comps.plan, comps.iou, &self.cfg.weights)?;
            self.log.push(LogEntry {
                iter: update + 1,
                l_ce: tot.ce,
                l_plan: tot.plan,
                l_iou: tot.iou,
                total: tot.total,
                lr,
            });
            updates_run += 1;
            if let Some(e) = eval {
                if self.cfg.eval_every > 0 && (update + 1).is_multiple_of(self.cfg.eval_every) {
                    let report = evaluate(&self.params, e.data, e.task, e.decode, e.grid)?.report;
                    self.evals.push(EvalEntry {
                        iter: update + 1,
                        report,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn is_finished(&self, n_data: usize) -> bool {
        self.samples_done >= self.total_samples(n_data)
    }

    /// f64 snapshot of parameters, moments and counters.
    pub fn state_checkpoint(&self, task: &SynthConfig) -> Result<RawCheckpoint> {
        let mut blocks = checkpoint::param_blocks(&self.params, DType::F64, "param.");
        for (prefix, moments) in [("adam.m.", &self.opt.m), ("adam.v.", &self.opt.v)] {
            for (p, a) in self.params.params().iter().zip(moments) {
                blocks.push(TensorBlock {
                    name: format!("{prefix}{}", p.name),
                    dtype: DType::F64,
                    shape: a.shape().to_vec(),
                    data: a.iter().copied().collect(),
                });
            }
        }
        let header = serde_json::json!({
            "kind": "train_state",
            "model": self.params.config,
            "train": self.cfg,
            "task": task,
            "samples_done": self.samples_done,
            "opt_step": self.opt.step,
            "opt_skipped": self.opt.skipped,
            "log": self.log,
            "evals": self.evals,
        });
        Ok(RawCheckpoint { header, blocks })
    }

    pub fn save_state(&self, path: &Path, task: &SynthConfig) -> Result<()> {
        checkpoint::write_raw(path, &self.state_checkpoint(task)?)
    }

    pub fn from_state(raw: &RawCheckpoint) -> Result<(Self, SynthConfig)> {
        let h = &raw.header;
        if h["kind"] != "train_state" {
            return Err(Error::Checkpoint("not a training-state file".into()));
        }
        let model: ModelConfig = serde_json::from_value(h["model"].clone())?;
        let cfg: TrainConfig = serde_json::from_value(h["train"].clone())?;
        let task: SynthConfig = serde_json::from_value(h["task"].clone())?;
        let mut params = DenoiserParams::zeros(model)?;
        checkpoint::load_param_blocks(&mut params, &raw.blocks, "param.")?;
        let mut opt = OptimizerState::new(&params);
        for (prefix, moments) in [("adam.m.", &mut opt.m), ("adam.v.", &mut opt.v)] {
            for (p, a) in params.params().iter().zip(moments.iter_mut()) {
                let name = format!("{prefix}{}", p.name);
                let b = raw
                    .blocks
                    .iter()
                    .find(|b| b.name == name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing block {name}")))?;
                if b.shape != a.shape() {
                    return Err(Error::ShapeMismatch {
                        what: name,
                        expected: a.shape().to_vec(),
                        got: b.shape.clone(),
                    });
                }
                a.iter_mut().zip(&b.data).for_each(|(d, &s)| *d = s);
            }
        }
        let num = |k: &str| {
            h[k].as_u64()
                .ok_or_else(|| Error::Checkpoint(format!("header field `{k}` missing")))
        };
        opt.step = num("opt_step")?;
        opt.skipped = num("opt_skipped")?;
        let samples_done = num("samples_done")? as usize;
        let log = serde_json::from_value(h["log"].clone())?;
        let evals = serde_json::from_value(h["evals"].clone())?;
        Ok((
            Self {
                params,
                opt,
                cfg,
                samples_done,
                log,
                evals,
            },
            task,
        ))
    }
}

/// Per-example reveal timing of one decoded response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RevealTiming {
    /// Mean reveal step over time-token slots of real tuples.
    pub time_mean: f64,
    /// Mean reveal step over class and description slots of real tuples.
    pub semantic_mean: f64,
}

impl RevealTiming {
    /// Time tokens were revealed later in the reverse process (smaller `t`).
    pub fn time_later(&self) -> bool {
        self.time_mean < self.semantic_mean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub predictions: Vec<Detection>,
    pub report: EvalReport,
    pub reveal: Vec<RevealTiming>,
    /// Tuples dropped by the parser.
    pub dropped: usize,
}

impl Evaluation {
    pub fn time_later_fraction(&self) -> f64 {
        if self.reveal.is_empty() {
            return 0.0;
        }
        self.reveal.iter().filter(|r| r.time_later()).count() as f64 / self.reveal.len() as f64
    }
}

/// Detections decoded from one video.
#[derive(Debug, Clone)]
pub struct DecodedVideo {
    pub detections: Vec<Detection>,
    pub generation: GenerationResult,
    /// Malformed tuples skipped by the parser.
    pub dropped: usize,
}

/// Run reverse denoising on one video and parse the response.
pub fn decode_video(
    params: &DenoiserParams,
    context: &VideoContext,
    video_id: &str,
    task: &SynthConfig,
    vocab: &Vocabulary,
    tgrid: &TimeGrid,
    decode: &DecodeConfig,
) -> Result<DecodedVideo> {
    let den = ModelDenoiser { params, context };
    let generation = generate(&den, vocab, task.template_len(), decode)?;
    let parsed = parse_response(
        &generation.tokens,
        Some(&generation.confidence),
        vocab,
        tgrid,
        task.desc_width,
    );
    let detections = parsed
        .tuples
        .into_iter()
        .map(|t| Detection {
            video: video_id.to_string(),
            class: t.class,
            start: t.segment.start,
            end: t.segment.end,
            score: t.confidence,
        })
        .collect();
    Ok(DecodedVideo {
        detections,
        generation,
        dropped: parsed.dropped,
    })
}

/// Context for raw frame features under the task's query.
pub fn video_context(
    features: &Array2<f64>,
    task: &SynthConfig,
    n_ctx: usize,
) -> Result<VideoContext> {
    let vocab = task.vocabulary()?;
    let q = vocab.id(task.query()).ok_or_else(|| {
        Error::Config(format!("query token `{}` not in vocabulary", task.query()))
    })?;
    VideoContext::from_frames(features, vec![q], n_ctx)
}

/// RTL metrics for the rtl profile, mAP over `grid` for closed-set.
pub fn score(
    predictions: &[Detection],
    gts: &[Detection],
    profile: Profile,
    grid: Grid,
) -> EvalReport {
    match profile {
        Profile::Rtl => EvalReport {
            map: None,
            rtl: Some(rtl_suite(predictions, gts)),
        },
        Profile::ClosedSet => EvalReport {
            map: Some(map_suite(predictions, gts, grid)),
            rtl: None,
        },
    }
}

/// Decode every example and score the predictions.
pub fn evaluate(
    params: &DenoiserParams,
    data: &[Prepared],
    task: &SynthConfig,
    decode: &DecodeConfig,
    grid: Grid,
) -> Result<Evaluation> {
    let vocab = task.vocabulary()?;
    let tgrid = task.grid()?;
    let mut predictions = Vec::new();
    let mut reveal = Vec::new();
    let mut dropped = 0;
    for ex in data {
        let d = decode_video(
            params,
            &ex.context,
            &ex.video_id,
            task,
            &vocab,
            &tgrid,
            decode,
        )?;
        dropped += d.dropped;
        predictions.extend(d.detections);
        let gen = d.generation;
        let time = ex.target.boundary_positions();
        let sem = ex.target.semantic_positions();
        if !time.is_empty() && !sem.is_empty() {
            let mean = |ps: &[usize]| {
                ps.iter().map(|&i| gen.reveal_step[i] as f64).sum::<f64>() / ps.len() as f64
            };
            reveal.push(RevealTiming {
                time_mean: mean(&time),
                semantic_mean: mean(&sem),
            });
        }
    }
    let gts: Vec<Detection> = data
        .iter()
        .flat_map(|e| e.ground_truth.iter().cloned())
        .collect();
    let report = score(&predictions, &gts, task.profile, grid);
    Ok(Evaluation {
        predictions,
        report,
        reveal,
        dropped,
    })
}

/// A named training configuration in an ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    pub train: TrainConfig,
}

/// Component and gating rows, built on a full configuration.
pub fn table3_grid(full: &TrainConfig) -> Vec<AblationCell> {
    let base = full.base_variant();
    let mut pt_reason = base.clone();
    pt_reason.mask.kind = MaskKind::Planned;
    pt_reason.step_weighting = full.step_weighting;
    let mut pt_time = pt_reason.clone();
    pt_time.mask.kind = MaskKind::TimeFirst;
    let with_gate = |g: GateMode| {
        let mut c = full.clone();
        c.gate = g;
        c
    };
    let mut bound_ce = full.clone();
    bound_ce.boundary_only_ce = true;
    vec![
        AblationCell {
            name: "base".into(),
            train: base,
        },
        AblationCell {
            name: "PT(reason.)".into(),
            train: pt_reason,
        },
        AblationCell {
            name: "PT(time)".into(),
            train: pt_time,
        },
        AblationCell {
            name: "IoU-R(none)".into(),
            train: with_gate(GateMode::None),
        },
        AblationCell {
            name: "IoU-R(either)".into(),
            train: with_gate(GateMode::Either),
        },
        AblationCell {
            name: "CE(bound.)".into(),
            train: bound_ce,
        },
        AblationCell {
            name: "full".into(),
            train: full.clone(),
        },
    ]
}

/// Loss-weight rows `(lambda_plan, lambda_iou, lambda_ce)`.
pub fn table4_grid(full: &TrainConfig) -> Vec<AblationCell> {
    [
        (1.0, 0.25, 0.2),
        (1.0, 0.5, 0.1),
        (1.0, 0.5, 0.2),
        (1.0, 1.0, 0.2),
        (0.5, 0.5, 0.2),
    ]
    .into_iter()
    .map(|(p, i, c)| {
        let mut t = full.clone();
        t.weights = LossWeights {
            lambda_plan: p,
            lambda_iou: i,
            lambda_ce: c,
        };
        AblationCell {
            name: format!("({p}, {i}, {c})"),
            train: t,
        }
    })
    .collect()
}

/// Scores of one trained cell and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRun {
    pub seed: u64,
    pub miou: f64,
    pub p50: f64,
    pub p75: f64,
    pub average_map: Option<f64>,
    pub time_later_fraction: f64,
    pub checkpoint_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub runs: Vec<CellRun>,
    pub errors: Vec<String>,
    pub mean_miou: f64,
    pub mean_p50: f64,
    pub mean_p75: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_markdown(&self) -> String {
        let mut s =
            String::from("| Setting | mIoU | P@0.5 | P@0.75 | runs |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {:.2} | {:.2} | {:.2} | {}{} |\n",
                r.name,
                100.0 * r.mean_miou,
                100.0 * r.mean_p50,
                100.0 * r.mean_p75,
                r.runs.len(),
                if r.errors.is_empty() {
                    String::new()
                } else {
                    format!(" ({} failed)", r.errors.len())
                }
            ));
        }
        s
    }
}

/// Inputs shared by every cell of an ablation grid.
pub struct AblationInputs<'a> {
    pub train: &'a [Prepared],
    pub eval: &'a [Prepared],
    pub task: &'a SynthConfig,
    pub model: &'a ModelConfig,
    pub decode: &'a DecodeConfig,
    pub grid: Grid,
}

/// Train and score one configuration with `seed` driving both
/// initialization and sampling.
pub fn run_cell(
    cfg: &TrainConfig,
    seed: u64,
    inputs: &AblationInputs<'_>,
) -> Result<(Trainer, Evaluation)> {
    let vocab = inputs.task.vocabulary()?;
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    let model = ModelConfig {
        init_seed: seed,
        ..inputs.model.clone()
    };
    let mut trainer = Trainer::new(model, cfg)?;
    trainer.run(inputs.train, &vocab, None, None)?;
    let ev = evaluate(
        &trainer.params,
        inputs.eval,
        inputs.task,
        inputs.decode,
        inputs.grid,
    )?;
    Ok((trainer, ev))
}

pub fn run_ablation(
    cells: &[AblationCell],
    seeds: &[u64],
    inputs: &AblationInputs<'_>,
) -> AblationReport {
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let mut runs = Vec::new();
        let mut errors = Vec::new();
        for &seed in seeds {
            match run_cell(&cell.train, seed, inputs).and_then(|(tr, ev)| {
                let bytes = checkpoint::encode(&checkpoint::model_checkpoint(
                    &tr.params,
                    inputs.task,
                    serde_json::Value::Null,
                )?)?;
                Ok(cell_run(seed, &ev, checkpoint::sha256_hex(&bytes)))
            }) {
                Ok(r) => runs.push(r),
                Err(e) => errors.push(format!("seed {seed}: {e}")),
            }
        }
        let mean = |f: fn(&CellRun) -> f64| {
            if runs.is_empty() {
                0.0
            } else {
                runs.iter().map(f).sum::<f64>() / runs.len() as f64
            }
        };
        rows.push(AblationRow {
            name: cell.name.clone(),
            mean_miou: mean(|r| r.miou),
            mean_p50: mean(|r| r.p50),
            mean_p75: mean(|r| r.p75),
            runs,
            errors,
        });
    }
    AblationReport {
        seeds: seeds.to_vec(),
        rows,
    }
}

fn cell_run(seed: u64, ev: &Evaluation, sha: String) -> CellRun {
    let (miou, p50, p75) = match &ev.report.rtl {
        Some(r) => (
            r.miou,
            r.p_at(0.5).unwrap_or(0.0),
            r.p_at(0.75).unwrap_or(0.0),
        ),
        None => (0.0, 0.0, 0.0),
    };
    CellRun {
        seed,
        miou,
        p50,
        p75,
        average_map: ev.report.map.as_ref().map(|m| m.average_map),
        time_later_fraction: ev.time_later_fraction(),
        checkpoint_sha256: sha,
    }
}
