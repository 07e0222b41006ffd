//! Time-token vocabulary and the timestamp <-> bin codec.
//!
//! The timeline of a video with duration `D` is discretized into `N` bins.
//! A timestamp `tau` maps to `round((N-1) * tau / D)` and a bin `k` decodes
//! back to `D * k / (N-1)`. Rounding is half-away-from-zero (`f64::round`).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An `n_bins`-bin discretization of a timeline of `duration` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    n_bins: usize,
    duration: f64,
}

impl TimeGrid {
    pub fn new(n_bins: usize, duration: f64) -> Result<Self> {
        if n_bins < 2 {
            return Err(Error::Config(format!(
                "time grid needs >= 2 bins, got {n_bins}"
            )));
        }
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(Error::Config(format!(
                "duration must be positive, got {duration}"
            )));
        }
        Ok(Self { n_bins, duration })
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    /// Width of one bin in seconds, `D / (N-1)`.
    pub fn bin_width(&self) -> f64 {
        self.duration / (self.n_bins - 1) as f64
    }

    /// `k = round((N-1) * tau / D)`. Out-of-range timestamps are rejected.
    pub fn encode_timestamp(&self, tau: f64) -> Result<usize> {
        if !(0.0..=self.duration).contains(&tau) {
            return Err(Error::TimestampOutOfRange {
                tau,
                duration: self.duration,
            });
        }
        let k = ((self.n_bins - 1) as f64 * tau / self.duration).round() as usize;
        Ok(k.min(self.n_bins - 1))
    }

    /// Clamp a timestamp into `[0, D]`; for sampler output, never for dataset labels.
    pub fn clamp_timestamp(&self, tau: f64) -> f64 {
        if tau.is_nan() {
            return 0.0;
        }
        tau.clamp(0.0, self.duration)
    }

    /// `tau = D * k / (N-1)`.
    pub fn decode_index(&self, k: usize) -> Result<f64> {
        if k >= self.n_bins {
            return Err(Error::BinOutOfRange {
                index: k,
                n_bins: self.n_bins,
            });
        }
        Ok(self.duration * k as f64 / (self.n_bins - 1) as f64)
    }

    pub fn encode_segment(&self, seg: &Segment) -> Result<(usize, usize)> {
        let ks = self.encode_timestamp(seg.start)?;
        let ke = self.encode_timestamp(seg.end)?;
        Ok((ks, ke))
    }

    /// Decode a boundary pair. A reversed pair is swapped and flagged.
    pub fn decode_segment(&self, ks: usize, ke: usize) -> Result<DecodedSegment> {
        let (lo, hi, disordered) = if ks > ke {
            (ke, ks, true)
        } else {
            (ks, ke, false)
        };
        Ok(DecodedSegment {
            segment: Segment {
                start: self.decode_index(lo)?,
                end: self.decode_index(hi)?,
            },
            disordered,
        })
    }

    /// Normalized position `k / (N-1)` of a bin.
    pub fn normalized(&self, k: usize) -> f64 {
        k as f64 / (self.n_bins - 1) as f64
    }
}

/// A closed time interval in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
}

impl Segment {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite()) || start < 0.0 || end < start {
            return Err(Error::Config(format!("invalid segment [{start}, {end}]")));
        }
        Ok(Self { start, end })
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedSegment {
    pub segment: Segment,
    /// The generated start bin came after the end bin.
    pub disordered: bool,
}

pub const PAD: &str = "[PAD]";
pub const MASK: &str = "[MASK]";
pub const NONE: &str = "[NONE]";
pub const SEP: &str = "[SEP]";
pub const BOS: &str = "[BOS]";

/// Output vocabulary: base (semantic and control) tokens followed by a
/// contiguous block of time tokens `<t_0> .. <t_{N-1}>`.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    base_tokens: Vec<String>,
    n_time_tokens: usize,
    index: HashMap<String, u32>,
    pub pad_id: u32,
    pub mask_id: u32,
    pub none_id: u32,
    pub sep_id: u32,
    pub bos_id: u32,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    base_tokens: Vec<String>,
    n_time_tokens: usize,
}

impl Vocabulary {
    pub fn new(base_tokens: Vec<String>, n_time_tokens: usize) -> Result<Self> {
        if n_time_tokens < 2 {
            return Err(Error::Config("vocabulary needs >= 2 time tokens".into()));
        }
        let mut index = HashMap::with_capacity(base_tokens.len());
        for (i, tok) in base_tokens.iter().enumerate() {
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate base token `{tok}`")));
            }
        }
        let lookup = |name: &str| {
            index.get(name).copied().ok_or_else(|| {
                Error::Config(format!("vocabulary is missing reserved token {name}"))
            })
        };
        Ok(Self {
            pad_id: lookup(PAD)?,
            mask_id: lookup(MASK)?,
            none_id: lookup(NONE)?,
            sep_id: lookup(SEP)?,
            bos_id: lookup(BOS)?,
            base_tokens,
            n_time_tokens,
            index,
        })
    }

    /// The vocabulary used by the synthetic datasets: reserved tokens, one
    /// query token per profile, `n_classes` class tokens and `desc_width`
    /// description tokens per class.
    pub fn synthetic(n_classes: usize, desc_width: usize, n_time_tokens: usize) -> Result<Self> {
        let mut base: Vec<String> = [PAD, MASK, NONE, SEP, BOS]
            .iter()
            .map(|s| s.to_string())
            .collect();
        base.push("q_localize".into());
        base.push("q_detect_all".into());
        for c in 0..n_classes {
            base.push(class_token_name(c));
        }
        for c in 0..n_classes {
            for j in 0..desc_width {
                base.push(desc_token_name(c, j));
            }
        }
        Self::new(base, n_time_tokens)
    }

    pub fn len(&self) -> usize {
        self.base_tokens.len() + self.n_time_tokens
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_time_tokens(&self) -> usize {
        self.n_time_tokens
    }

    pub fn time_token_offset(&self) -> u32 {
        self.base_tokens.len() as u32
    }

    pub fn base_tokens(&self) -> &[String] {
        &self.base_tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        if let Some(&id) = self.index.get(token) {
            return Some(id);
        }
        let k: usize = token.strip_prefix("<t_")?.strip_suffix('>')?.parse().ok()?;
        self.time_token(k).ok()
    }

    pub fn token(&self, id: u32) -> Option<String> {
        let off = self.time_token_offset();
        if id < off {
            Some(self.base_tokens[id as usize].clone())
        } else if ((id - off) as usize) < self.n_time_tokens {
            Some(format!("<t_{}>", id - off))
        } else {
            None
        }
    }

    pub fn is_time_token(&self, id: u32) -> bool {
        let off = self.time_token_offset();
        id >= off && ((id - off) as usize) < self.n_time_tokens
    }

    pub fn time_token(&self, k: usize) -> Result<u32> {
        if k >= self.n_time_tokens {
            return Err(Error::BinOutOfRange {
                index: k,
                n_bins: self.n_time_tokens,
            });
        }
        Ok(self.time_token_offset() + k as u32)
    }

    /// Bin index of a time-token id; any other id is rejected.
    pub fn time_index(&self, id: u32) -> Result<usize> {
        if self.is_time_token(id) {
            Ok((id - self.time_token_offset()) as usize)
        } else {
            Err(Error::NotATimeToken(id))
        }
    }

    /// Range of time-token ids as `usize` logit columns.
    pub fn time_range(&self) -> std::ops::Range<usize> {
        let off = self.time_token_offset() as usize;
        off..off + self.n_time_tokens
    }

    pub fn class_token(&self, class: usize) -> Option<u32> {
        self.index.get(&class_token_name(class)).copied()
    }

    pub fn class_of(&self, id: u32) -> Option<usize> {
        let tok = self.base_tokens.get(id as usize)?;
        tok.strip_prefix("cls_")?.parse().ok()
    }

    pub fn desc_token(&self, class: usize, j: usize) -> Option<u32> {
        self.index.get(&desc_token_name(class, j)).copied()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&VocabularyFile {
            base_tokens: self.base_tokens.clone(),
            n_time_tokens: self.n_time_tokens,
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: VocabularyFile = serde_json::from_str(s)?;
        Self::new(f.base_tokens, f.n_time_tokens)
    }
}

fn class_token_name(c: usize) -> String {
    format!("cls_{c}")
}

fn desc_token_name(c: usize, j: usize) -> String {
    format!("desc_{c}_{j}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn grid() -> TimeGrid {
        TimeGrid::new(100, 100.0).unwrap()
    }

    #[test]
    fn encode_examples() {
        let g = grid();
        assert_eq!(g.encode_timestamp(0.0).unwrap(), 0);
        assert_eq!(g.encode_timestamp(100.0).unwrap(), 99);
        // round(99 * 0.433) = round(42.867)
        assert_eq!(g.encode_timestamp(43.3).unwrap(), 43);
    }

    #[test]
    fn encode_rejects_out_of_range() {
        let g = grid();
        assert!(matches!(
            g.encode_timestamp(-0.1),
            Err(Error::TimestampOutOfRange { .. })
        ));
        assert!(g.encode_timestamp(100.0001).is_err());
        assert!(g.encode_timestamp(f64::NAN).is_err());
        assert_eq!(g.clamp_timestamp(120.0), 100.0);
        assert_eq!(g.clamp_timestamp(-3.0), 0.0);
    }

    #[test]
    fn half_bin_rounds_away_from_zero() {
        // D = N-1 makes (N-1) tau / D == tau exactly.
        let g = TimeGrid::new(100, 99.0).unwrap();
        assert_eq!(g.encode_timestamp(42.5).unwrap(), 43);
        assert_eq!(g.encode_timestamp(0.5).unwrap(), 1);
        assert_eq!(g.encode_timestamp(98.5).unwrap(), 99);
        assert_eq!(g.encode_timestamp(42.499_999).unwrap(), 42);
    }

    #[test]
    fn decode_examples() {
        let g = grid();
        assert_eq!(g.decode_index(0).unwrap(), 0.0);
        assert_eq!(g.decode_index(99).unwrap(), 100.0);
        assert_abs_diff_eq!(g.decode_index(43).unwrap(), 4300.0 / 99.0, epsilon = 1e-12);
        assert!(matches!(
            g.decode_index(100),
            Err(Error::BinOutOfRange { .. })
        ));
    }

    #[test]
    fn segment_codec() {
        let g = grid();
        let full = Segment::new(0.0, 100.0).unwrap();
        assert_eq!(g.encode_segment(&full).unwrap(), (0, 99));
        let mid = Segment::new(25.0, 75.0).unwrap();
        assert_eq!(g.encode_segment(&mid).unwrap(), (25, 74));
        let point = Segment::new(43.3, 43.3).unwrap();
        assert_eq!(g.encode_segment(&point).unwrap(), (43, 43));

        let d = g.decode_segment(0, 99).unwrap();
        assert!(!d.disordered);
        assert_eq!(d.segment, full);

        let d = g.decode_segment(74, 25).unwrap();
        assert!(d.disordered);
        assert_abs_diff_eq!(d.segment.start, 2500.0 / 99.0, epsilon = 1e-9);
        assert_abs_diff_eq!(d.segment.end, 7400.0 / 99.0, epsilon = 1e-9);

        let d = g.decode_segment(43, 43).unwrap();
        assert!(!d.disordered);
        assert_abs_diff_eq!(d.segment.start, 43.4343, epsilon = 1e-4);
        assert!(g.decode_segment(3, 100).is_err());
    }

    #[test]
    fn vocabulary_layout() {
        let v = Vocabulary::synthetic(8, 2, 100).unwrap();
        assert_eq!(v.len(), 7 + 8 + 16 + 100);
        let reserved = [v.pad_id, v.mask_id, v.none_id, v.sep_id, v.bos_id];
        for (i, a) in reserved.iter().enumerate() {
            assert!(!v.is_time_token(*a));
            for b in &reserved[i + 1..] {
                assert_ne!(a, b);
            }
        }
        let t0 = v.time_token(0).unwrap();
        assert_eq!(t0, v.time_token_offset());
        assert_eq!(v.time_index(v.time_token(57).unwrap()).unwrap(), 57);
        assert!(matches!(
            v.time_index(v.mask_id),
            Err(Error::NotATimeToken(_))
        ));
        assert_eq!(v.id("<t_12>"), Some(t0 + 12));
        assert_eq!(v.class_of(v.class_token(3).unwrap()), Some(3));
        assert_eq!(v.token(v.desc_token(3, 1).unwrap()).unwrap(), "desc_3_1");

        let json = v.to_json().unwrap();
        assert!(json.contains("\"n_time_tokens\":100"));
        let back = Vocabulary::from_json(&json).unwrap();
        assert_eq!(back.base_tokens(), v.base_tokens());
        assert_eq!(back.mask_id, v.mask_id);
    }

    #[test]
    fn vocabulary_requires_reserved_tokens() {
        let base = vec![PAD.to_string(), MASK.to_string()];
        assert!(Vocabulary::new(base, 10).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_within_half_bin(frac in 0.0f64..=1.0, n in 2usize..300, d in 1.0f64..500.0) {
            let g = TimeGrid::new(n, d).unwrap();
            let tau = frac * d;
            let k = g.encode_timestamp(tau).unwrap();
            prop_assert!(k < n);
            let back = g.decode_index(k).unwrap();
            prop_assert!((back - tau).abs() <= g.bin_width() / 2.0 + 1e-9 * d);
        }

        #[test]
        fn encode_is_monotone(a in 0.0f64..=100.0, b in 0.0f64..=100.0) {
            let g = grid();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(g.encode_timestamp(lo).unwrap() <= g.encode_timestamp(hi).unwrap());
        }

        #[test]
        fn time_ids_roundtrip(k in 0usize..100) {
            let v = Vocabulary::synthetic(4, 2, 100).unwrap();
            let id = v.time_token(k).unwrap();
            prop_assert_eq!(v.time_index(id).unwrap(), k);
        }
    }
}
