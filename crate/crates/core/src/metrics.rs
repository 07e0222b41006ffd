//! Temporal localization metrics: tIoU, greedy matching, all-point AP,
//! mAP over threshold grids, and the single-query mIoU / P@θ suite.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timecodec::Segment;

/// Temporal IoU; 0 when the union is empty.
pub fn tiou(a: &Segment, b: &Segment) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.length() + b.length() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// One line of a predictions or ground-truth JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub video: String,
    pub class: usize,
    pub start: f64,
    pub end: f64,
    #[serde(default = "one")]
    pub score: f64,
}

fn one() -> f64 {
    1.0
}

impl Detection {
    pub fn segment(&self) -> Segment {
        Segment {
            start: self.start,
            end: self.end,
        }
    }
}

pub type Prediction = Detection;
pub type GroundTruth = Detection;

/// Sort by descending score, then earlier start, then class id.
pub fn rank(preds: &mut [Prediction]) {
    preds.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.start.total_cmp(&b.start))
            .then(a.class.cmp(&b.class))
    });
}

/// TP flags for ranked predictions. Each prediction takes the unmatched
/// ground truth of its class and video with the highest tIoU, if that tIoU
/// reaches `threshold`.
pub fn match_greedy(preds: &[Prediction], gts: &[GroundTruth], threshold: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    preds
        .iter()
        .map(|p| {
            let seg = p.segment();
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] || g.class != p.class || g.video != p.video {
                    continue;
                }
                let iou = tiou(&seg, &g.segment());
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, iou)) if iou >= threshold => {
                    taken[j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// All-point interpolated average precision of ranked TP flags.
pub fn average_precision(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut prec = Vec::with_capacity(flags.len());
    let mut rec = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        tp += usize::from(f);
        prec.push(tp as f64 / (i + 1) as f64);
        rec.push(tp as f64 / n_gt as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut last_recall = 0.0;
    for (p, r) in prec.iter().zip(&rec) {
        if *r > last_recall {
            ap += (r - last_recall) * p;
            last_recall = *r;
        }
    }
    ap
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grid {
    /// 0.3:0.1:0.7
    Thumos,
    /// 0.5:0.05:0.95
    Anet,
}

impl Grid {
    pub fn thresholds(&self) -> Vec<f64> {
        match self {
            Grid::Thumos => (3..=7).map(|i| i as f64 / 10.0).collect(),
            Grid::Anet => (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
        }
    }
}

impl FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "thumos" => Ok(Grid::Thumos),
            "anet" => Ok(Grid::Anet),
            other => Err(Error::UnknownGrid(other.to_string())),
        }
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Grid::Thumos => "thumos",
            Grid::Anet => "anet",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub grid: Grid,
    pub thresholds: Vec<f64>,
    /// `per_class_ap[i][class]` at `thresholds[i]`.
    pub per_class_ap: Vec<BTreeMap<usize, f64>>,
    pub map: Vec<f64>,
    pub average_map: f64,
}

/// Class-mean AP at every threshold of `grid`, over classes present in the
/// ground truth.
pub fn map_suite(preds: &[Prediction], gts: &[GroundTruth], grid: Grid) -> MapReport {
    let thresholds = grid.thresholds();
    let classes: BTreeSet<usize> = gts.iter().map(|g| g.class).collect();
    let mut by_class: HashMap<usize, (Vec<Prediction>, Vec<GroundTruth>)> = HashMap::new();
    for &c in &classes {
        by_class.insert(c, (Vec::new(), Vec::new()));
    }
    for p in preds {
        if let Some(e) = by_class.get_mut(&p.class) {
            e.0.push(p.clone());
        }
    }
    for g in gts {
        by_class
            .get_mut(&g.class)
            .expect("class collected")
            .1
            .push(g.clone());
    }
    for (p, _) in by_class.values_mut() {
        rank(p);
    }
    let mut per_class_ap = Vec::with_capacity(thresholds.len());
    let mut map = Vec::with_capacity(thresholds.len());
    for &th in &thresholds {
        let mut row = BTreeMap::new();
        for &c in &classes {
            let (p, g) = &by_class[&c];
            row.insert(c, average_precision(&match_greedy(p, g, th), g.len()));
        }
        let m = if row.is_empty() {
            0.0
        } else {
            row.values().sum::<f64>() / row.len() as f64
        };
        map.push(m);
        per_class_ap.push(row);
    }
    let average_map = map.iter().sum::<f64>() / map.len() as f64;
    MapReport {
        grid,
        thresholds,
        per_class_ap,
        map,
        average_map,
    }
}

pub const RTL_THRESHOLDS: [f64; 3] = [0.5, 0.75, 0.95];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtlReport {
    pub n_queries: usize,
    pub miou: f64,
    /// `(theta, fraction of queries with tIoU >= theta)`.
    pub precision_at: Vec<(f64, f64)>,
}

impl RtlReport {
    pub fn p_at(&self, theta: f64) -> Option<f64> {
        self.precision_at
            .iter()
            .find(|(t, _)| (t - theta).abs() < 1e-12)
            .map(|p| p.1)
    }
}

/// Per-query tIoU of the top-scoring prediction for each ground-truth
/// video; missing predictions count as 0.
pub fn query_ious(preds: &[Prediction], gts: &[GroundTruth]) -> Vec<f64> {
    let mut best: HashMap<&str, &Prediction> = HashMap::new();
    for p in preds {
        let e = best.entry(p.video.as_str()).or_insert(p);
        if p.score > e.score {
            *e = p;
        }
    }
    gts.iter()
        .map(|g| {
            best.get(g.video.as_str())
                .map_or(0.0, |p| tiou(&p.segment(), &g.segment()))
        })
        .collect()
}

pub fn rtl_suite(preds: &[Prediction], gts: &[GroundTruth]) -> RtlReport {
    let ious = query_ious(preds, gts);
    let n = ious.len();
    let frac = |th: f64| {
        if n == 0 {
            0.0
        } else {
            ious.iter().filter(|&&v| v >= th).count() as f64 / n as f64
        }
    };
    RtlReport {
        n_queries: n,
        miou: if n == 0 {
            0.0
        } else {
            ious.iter().sum::<f64>() / n as f64
        },
        precision_at: RTL_THRESHOLDS.iter().map(|&t| (t, frac(t))).collect(),
    }
}

/// Evaluation output written by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub map: Option<MapReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rtl: Option<RtlReport>,
}

/// Greedy tIoU non-maximum suppression within each (video, class).
pub fn nms(preds: &[Prediction], threshold: f64) -> Vec<Prediction> {
    let mut sorted = preds.to_vec();
    rank(&mut sorted);
    let mut kept: Vec<Prediction> = Vec::new();
    for p in sorted {
        let clash = kept.iter().any(|k| {
            k.video == p.video && k.class == p.class && tiou(&k.segment(), &p.segment()) > threshold
        });
        if !clash {
            kept.push(p);
        }
    }
    kept
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let file = std::fs::File::open(path)?;
    parse_detections(std::io::BufReader::new(file))
}

pub fn parse_detections<R: BufRead>(reader: R) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let d: Detection = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !d.score.is_finite() || !(d.start <= d.end) {
            return Err(Error::Parse {
                line: i + 1,
                message: "score must be finite and start <= end".into(),
            });
        }
        out.push(d);
    }
    Ok(out)
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for d in dets {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
