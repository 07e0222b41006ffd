//! Synthetic feature-sequence videos with embedded class-prototype segments.
//!
//! Background frames are isotropic noise; frames inside an instance add the
//! prototype vector of its class. Prototypes depend only on the seed.

use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corruption::TargetSequence;
use crate::error::{Error, Result};
use crate::metrics::Detection;
use crate::sampler::template_slots;
use crate::timecodec::{Segment, TimeGrid, Vocabulary};

pub const RTL_QUERY: &str = "q_localize";
pub const CLOSED_SET_QUERY: &str = "q_detect_all";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// One instance per video, single-tuple template.
    Rtl,
    /// 1..=M_max instances per video.
    ClosedSet,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rtl" => Ok(Profile::Rtl),
            "closed-set" => Ok(Profile::ClosedSet),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub profile: Profile,
    pub n_classes: usize,
    pub d_feat: usize,
    pub n_frames: usize,
    pub max_instances: usize,
    pub desc_width: usize,
    pub noise: f64,
    pub duration: f64,
    pub n_time_bins: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            profile: Profile::Rtl,
            n_classes: 8,
            d_feat: 16,
            n_frames: 100,
            max_instances: 1,
            desc_width: 2,
            noise: 0.5,
            duration: 100.0,
            n_time_bins: 100,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn closed_set(max_instances: usize) -> Self {
        Self {
            profile: Profile::ClosedSet,
            max_instances,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.max_instances < 1 {
            return Err(Error::Config("max_instances must be >= 1".into()));
        }
        if self.profile == Profile::Rtl && self.max_instances != 1 {
            return Err(Error::Config(
                "the rtl profile has exactly one instance".into(),
            ));
        }
        if !(self.noise >= 0.0) || !(self.duration > 0.0) {
            return Err(Error::Config("noise must be >= 0 and duration > 0".into()));
        }
        if self.d_feat == 0 || self.n_frames == 0 || self.n_time_bins < 2 {
            return Err(Error::Config(
                "d_feat, n_frames must be >= 1 and n_time_bins >= 2".into(),
            ));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::synthetic(self.n_classes, self.desc_width, self.n_time_bins)
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.n_time_bins, self.duration)
    }

    pub fn query(&self) -> &'static str {
        match self.profile {
            Profile::Rtl => RTL_QUERY,
            Profile::ClosedSet => CLOSED_SET_QUERY,
        }
    }

    /// Response length: `max_instances` tuples of width `desc_width + 4`.
    pub fn template_len(&self) -> usize {
        self.max_instances * (self.desc_width + 4)
    }

    /// Class prototypes, one row per class.
    pub fn prototypes(&self) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX);
        Array2::from_shape_fn((self.n_classes, self.d_feat), |_| {
            StandardNormal.sample(&mut rng)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub class: usize,
    pub start: f64,
    pub end: f64,
}

impl Instance {
    pub fn segment(&self) -> Segment {
        Segment {
            start: self.start,
            end: self.end,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub video_id: String,
    pub duration: f64,
    /// `n_frames x d_feat`.
    pub features: Array2<f64>,
    /// Sorted by start, non-overlapping.
    pub instances: Vec<Instance>,
    pub query: String,
}

impl Example {
    pub fn ground_truth(&self) -> Vec<Detection> {
        self.instances
            .iter()
            .map(|i| Detection {
                video: self.video_id.clone(),
                class: i.class,
                start: i.start,
                end: i.end,
                score: 1.0,
            })
            .collect()
    }
}

/// Frame `i` covers `[i, i + 1) * D / T_v`; it belongs to an instance when
/// its centre does.
fn frame_inside(i: usize, n_frames: usize, duration: f64, inst: &Instance) -> bool {
    let c = (i as f64 + 0.5) * duration / n_frames as f64;
    c >= inst.start && c <= inst.end
}

pub fn generate_example<R: Rng + ?Sized>(
    cfg: &SynthConfig,
    prototypes: &Array2<f64>,
    video_id: String,
    rng: &mut R,
) -> Example {
    let d = cfg.duration;
    let (min_len, max_len) = (d / 20.0, d / 2.0);
    let wanted = match cfg.profile {
        Profile::Rtl => 1,
        Profile::ClosedSet => rng.random_range(1..=cfg.max_instances),
    };
    let mut instances: Vec<Instance> = Vec::with_capacity(wanted);
    let mut attempts = 0;
    while instances.len() < wanted && attempts < 200 {
        attempts += 1;
        let len = rng.random_range(min_len..=max_len);
        let start = rng.random_range(0.0..=(d - len));
        let end = start + len;
        if instances.iter().any(|o| start < o.end && o.start < end) {
            continue;
        }
        instances.push(Instance {
            class: rng.random_range(0..cfg.n_classes),
            start,
            end,
        });
    }
    instances.sort_by(|a, b| a.start.total_cmp(&b.start));

    let mut features = Array2::from_shape_fn((cfg.n_frames, cfg.d_feat), |_| {
        let z: f64 = StandardNormal.sample(rng);
        cfg.noise * z
    });
    for inst in &instances {
        for i in 0..cfg.n_frames {
            if frame_inside(i, cfg.n_frames, d, inst) {
                let mut row = features.row_mut(i);
                row += &prototypes.row(inst.class);
            }
        }
    }
    Example {
        video_id,
        duration: d,
        features,
        instances,
        query: cfg.query().to_string(),
    }
}

/// `n` examples with ids `vid{offset + i}`; example `i` draws from its own
/// ChaCha stream, so splits generated with disjoint offsets are independent.
pub fn generate_dataset(cfg: &SynthConfig, n: usize, offset: usize) -> Result<Vec<Example>> {
    cfg.validate()?;
    let protos = cfg.prototypes();
    Ok((offset..offset + n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            generate_example(cfg, &protos, format!("vid{i:05}"), &mut rng)
        })
        .collect())
}

/// Tuple-grammar response for an example, padded with none-tuples.
pub fn build_target(
    ex: &Example,
    vocab: &Vocabulary,
    grid: &TimeGrid,
    max_instances: usize,
    desc_width: usize,
) -> Result<TargetSequence> {
    if ex.instances.len() > max_instances {
        return Err(Error::Config(format!(
            "{} instances exceed the template of {max_instances}",
            ex.instances.len()
        )));
    }
    let class_tok = |c: usize| {
        vocab
            .class_token(c)
            .ok_or_else(|| Error::Config(format!("class {c} not in vocabulary")))
    };
    let mut tokens = Vec::with_capacity(max_instances * (desc_width + 4));
    for inst in &ex.instances {
        tokens.push(class_tok(inst.class)?);
        for j in 0..desc_width {
            tokens.push(vocab.desc_token(inst.class, j).ok_or_else(|| {
                Error::Config(format!("description {j} of class {} missing", inst.class))
            })?);
        }
        let (ks, ke) = grid.encode_segment(&inst.segment())?;
        tokens.push(vocab.time_token(ks)?);
        tokens.push(vocab.time_token(ke)?);
        tokens.push(vocab.sep_id);
    }
    for _ in ex.instances.len()..max_instances {
        tokens.push(vocab.none_id);
        tokens.extend(std::iter::repeat_n(vocab.pad_id, desc_width + 2));
        tokens.push(vocab.sep_id);
    }
    TargetSequence::new(
        tokens,
        template_slots(ex.instances.len(), desc_width),
        vocab,
    )
}

#[derive(Serialize, Deserialize)]
struct ExampleRecord {
    video_id: String,
    duration: f64,
    features: Vec<Vec<f64>>,
    instances: Vec<Instance>,
    query: String,
}

impl From<&Example> for ExampleRecord {
    fn from(ex: &Example) -> Self {
        Self {
            video_id: ex.video_id.clone(),
            duration: ex.duration,
            features: ex.features.rows().into_iter().map(|r| r.to_vec()).collect(),
            instances: ex.instances.clone(),
            query: ex.query.clone(),
        }
    }
}

impl ExampleRecord {
    fn into_example(self) -> std::result::Result<Example, String> {
        let rows = self.features.len();
        let cols = self.features.first().map_or(0, Vec::len);
        if rows == 0 || self.features.iter().any(|r| r.len() != cols) {
            return Err("features must be a non-empty rectangular array".into());
        }
        let flat: Vec<f64> = self.features.into_iter().flatten().collect();
        let features = Array2::from_shape_vec((rows, cols), flat).map_err(|e| e.to_string())?;
        for inst in &self.instances {
            if !(0.0 <= inst.start && inst.start <= inst.end && inst.end <= self.duration) {
                return Err(format!(
                    "instance [{}, {}] outside [0, {}]",
                    inst.start, inst.end, self.duration
                ));
            }
        }
        Ok(Example {
            video_id: self.video_id,
            duration: self.duration,
            features,
            instances: self.instances,
            query: self.query,
        })
    }
}

pub fn write_dataset(examples: &[Example], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut w, &ExampleRecord::from(ex))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Example>> {
    parse_dataset(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn parse_dataset<R: BufRead>(reader: R) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: i + 1,
            message,
        };
        let rec: ExampleRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        out.push(rec.into_example().map_err(parse_err)?);
    }
    Ok(out)
}

/// Non-learned reference localizer: nearest-prototype frame labels (with
/// the zero vector standing for background) followed by a max-subarray
/// change-point scan per class.
pub fn oracle_baseline(ex: &Example, prototypes: &Array2<f64>) -> Vec<Detection> {
    let n_frames = ex.features.nrows();
    let labels: Vec<Option<usize>> = ex
        .features
        .rows()
        .into_iter()
        .map(|f| {
            let mut best = (None, f.dot(&f));
            for (c, p) in prototypes.rows().into_iter().enumerate() {
                let diff: Array1<f64> = &f - &p;
                let d = diff.dot(&diff);
                if d < best.1 {
                    best = (Some(c), d);
                }
            }
            best.0
        })
        .collect();
    let frame_t = ex.duration / n_frames as f64;
    let mut out = Vec::new();
    let mut classes: Vec<usize> = labels.iter().flatten().copied().collect();
    classes.sort_unstable();
    classes.dedup();
    for c in classes {
        let votes: Vec<f64> = labels
            .iter()
            .map(|l| if *l == Some(c) { 1.0 } else { -1.0 })
            .collect();
        let (lo, hi, score) = max_subarray(&votes);
        if score <= 0.0 {
            continue;
        }
        out.push(Detection {
            video: ex.video_id.clone(),
            class: c,
            start: lo as f64 * frame_t,
            end: (hi + 1) as f64 * frame_t,
            score: score / n_frames as f64,
        });
    }
    out
}

/// Inclusive index range and sum of the maximum-sum contiguous run.
fn max_subarray(x: &[f64]) -> (usize, usize, f64) {
    let mut best = (0, 0, f64::NEG_INFINITY);
    let mut start = 0;
    let mut run = 0.0;
    for (i, &v) in x.iter().enumerate() {
        if run <= 0.0 {
            start = i;
            run = v;
        } else {
            run += v;
        }
        if run > best.2 {
            best = (start, i, run);
        }
    }
    best
}
