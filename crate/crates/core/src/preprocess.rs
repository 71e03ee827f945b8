//! Anchoring, windowing, the P/S indicator channel, normalization and
//! segmentation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_store::StrongMotionRecord;

/// Added to the window peak before dividing, so silent windows pass through.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Anchor {
    Pga,
    PArrival,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AnnotationSource {
    Manual,
    Auto,
}

impl AnnotationSource {
    pub fn short(self) -> &'static str {
        match self {
            AnnotationSource::Manual => "man",
            AnnotationSource::Auto => "auto",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub anchor: Anchor,
    pub duration_s: f64,
    pub segment_len_s: f64,
    pub include_ps_channel: bool,
    pub annotation_source: AnnotationSource,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self::pga(60.0)
    }
}

impl WindowSpec {
    pub fn pga(duration_s: f64) -> Self {
        Self {
            anchor: Anchor::Pga,
            duration_s,
            segment_len_s: 1.0,
            include_ps_channel: false,
            annotation_source: AnnotationSource::Manual,
        }
    }

    pub fn p_arrival(duration_s: f64) -> Self {
        Self {
            anchor: Anchor::PArrival,
            ..Self::pga(duration_s)
        }
    }

    pub fn channels(&self) -> usize {
        if self.include_ps_channel {
            4
        } else {
            3
        }
    }

    pub fn needs_picks(&self) -> bool {
        self.include_ps_channel || self.anchor == Anchor::PArrival
    }

    pub fn num_segments(&self) -> usize {
        (self.duration_s / self.segment_len_s).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0 && self.segment_len_s > 0.0) {
            return Err(Error::Config(format!(
                "window duration {} and segment length {} must be positive",
                self.duration_s, self.segment_len_s
            )));
        }
        if !(1.0..=5.0).contains(&self.segment_len_s) {
            return Err(Error::Config(format!(
                "segment length {} s outside [1, 5]",
                self.segment_len_s
            )));
        }
        let ratio = self.duration_s / self.segment_len_s;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "window duration {} s is not a multiple of segment length {} s",
                self.duration_s, self.segment_len_s
            )));
        }
        Ok(())
    }

    /// Samples per segment and per window at `sample_rate`.
    pub fn sample_counts(&self, sample_rate: f64) -> Result<(usize, usize)> {
        self.validate()?;
        let seg = self.segment_len_s * sample_rate;
        if (seg - seg.round()).abs() > 1e-9 || seg.round() < 1.0 {
            return Err(Error::Config(format!(
                "segment of {} s is not a whole number of samples at {sample_rate} Hz",
                self.segment_len_s
            )));
        }
        let seg = seg.round() as usize;
        Ok((seg, seg * self.num_segments()))
    }
}

/// Model input: `T` segments, each `[C × L]` channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSequence {
    pub record_id: String,
    pub station_id: String,
    pub channels: usize,
    pub segment_len: usize,
    pub segments: Vec<Vec<f64>>,
    pub target_vs30: Option<f64>,
    /// Factor applied by [`normalize`]; 1 before normalization.
    pub scale: f64,
}

impl SegmentSequence {
    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn with_target(mut self, vs30: Option<f64>) -> Self {
        self.target_vs30 = vs30;
        self
    }

    /// Concatenates the segments back into per-channel window traces.
    pub fn window(&self) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::with_capacity(self.segments.len() * self.segment_len); self.channels];
        for seg in &self.segments {
            for (c, ch) in out.iter_mut().enumerate() {
                ch.extend_from_slice(&seg[c * self.segment_len..(c + 1) * self.segment_len]);
            }
        }
        out
    }

    /// Flat `[T × C × L]` buffer.
    pub fn stacked(&self) -> Vec<f64> {
        self.segments.concat()
    }

    /// Same sequence with its segments reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            segments: order.iter().map(|&i| self.segments[i].clone()).collect(),
            ..self.clone()
        }
    }
}

/// Index of the largest absolute sample over all channels; ties go to the
/// earliest index.
pub fn pga_index(record: &StrongMotionRecord) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for i in 0..record.len() {
        let v = record
            .channels
            .iter()
            .map(|c| c[i].abs())
            .fold(f64::NEG_INFINITY, f64::max);
        if v > best_val {
            best_val = v;
            best = i;
        }
    }
    best
}

/// Cuts a `spec.duration_s` window centred on the anchor (anchor at window
/// sample `n/2`), zero-padding outside the record, optionally appends the
/// P/S indicator (1 on `[p, s)`), and splits it into segments.
pub fn extract_window(
    record: &StrongMotionRecord,
    spec: &WindowSpec,
    p_idx: Option<usize>,
    s_idx: Option<usize>,
) -> Result<SegmentSequence> {
    let (seg_len, n_win) = spec.sample_counts(record.sample_rate)?;
    let missing = |which| Error::MissingPick {
        record_id: record.record_id.clone(),
        which,
    };
    let anchor = match spec.anchor {
        Anchor::Pga => pga_index(record),
        Anchor::PArrival => p_idx.ok_or_else(|| missing("P"))?,
    };
    let ps = if spec.include_ps_channel {
        let p = p_idx.ok_or_else(|| missing("P"))?;
        let s = s_idx.ok_or_else(|| missing("S"))?;
        Some((p, s))
    } else {
        None
    };
    let start = anchor as isize - (n_win / 2) as isize;
    let len = record.len() as isize;
    let mut window: Vec<Vec<f64>> = Vec::with_capacity(spec.channels());
    for ch in &record.channels {
        let w = (0..n_win as isize)
            .map(|k| {
                let i = start + k;
                if (0..len).contains(&i) {
                    ch[i as usize]
                } else {
                    0.0
                }
            })
            .collect();
        window.push(w);
    }
    if let Some((p, s)) = ps {
        let lo = (p as isize).max(start);
        let hi = (s as isize).min(start + n_win as isize);
        let mut ind = vec![0.0; n_win];
        for i in lo..hi {
            ind[(i - start) as usize] = 1.0;
        }
        window.push(ind);
    }
    let channels = window.len();
    let segments = (0..n_win / seg_len)
        .map(|t| {
            let mut seg = Vec::with_capacity(channels * seg_len);
            for ch in &window {
                seg.extend_from_slice(&ch[t * seg_len..(t + 1) * seg_len]);
            }
            seg
        })
        .collect();
    Ok(SegmentSequence {
        record_id: record.record_id.clone(),
        station_id: record.station_id.clone(),
        channels,
        segment_len: seg_len,
        segments,
        target_vs30: None,
        scale: 1.0,
    })
}

/// How [`normalize`] scales inputs, recorded with every run.
pub const NORMALIZATION: &str = "per-record joint max-abs over the acceleration channels";

/// Scales the three acceleration channels jointly by `1 / (peak + ε)`,
/// leaving an indicator channel untouched.
pub fn normalize(seq: &SegmentSequence) -> SegmentSequence {
    let l = seq.segment_len;
    let accel = seq.channels.min(3);
    let peak = seq
        .segments
        .iter()
        .flat_map(|s| s[..accel * l].iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let factor = 1.0 / (peak + NORM_EPS);
    let segments = seq
        .segments
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s[..accel * l].iter_mut().for_each(|v| *v *= factor);
            s
        })
        .collect();
    SegmentSequence {
        segments,
        scale: seq.scale * factor,
        ..seq.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(ch: [Vec<f64>; 3]) -> StrongMotionRecord {
        StrongMotionRecord {
            record_id: "r".into(),
            station_id: "s".into(),
            sample_rate: 100.0,
            channels: ch,
            origin_time: None,
            magnitude: None,
            p_arrival_manual: None,
            s_arrival_manual: None,
        }
    }

    #[test]
    fn pga_unique_max() {
        let r = rec([vec![0.0, 1.0, 0.0], vec![0.0; 3], vec![0.0; 3]]);
        assert_eq!(pga_index(&r), 1);
    }

    #[test]
    fn pga_uses_absolute_value() {
        let r = rec([vec![0.0, -5.0, 0.0], vec![0.0, 0.0, 3.0], vec![0.0; 3]]);
        assert_eq!(pga_index(&r), 1);
    }

    #[test]
    fn pga_ties_go_to_earliest() {
        let mut a = vec![0.0; 10];
        a[2] = 4.0;
        a[7] = -4.0;
        let r = rec([a, vec![0.0; 10], vec![1.0; 10]]);
        assert_eq!(pga_index(&r), 2);
    }

    #[test]
    fn pga_centred_sixty_second_window() {
        let n = 9000;
        let mut e = vec![0.1; n];
        e[3000] = 50.0;
        let r = rec([e, vec![0.0; n], vec![0.0; n]]);
        let seq = extract_window(&r, &WindowSpec::pga(60.0), None, None).unwrap();
        assert_eq!(seq.num_segments(), 60);
        assert!(seq.segments.iter().all(|s| s.len() == 3 * 100));
        let w = seq.window();
        assert_eq!(w[0].len(), 6000);
        assert_eq!(w[0][3000], 50.0);
    }

    #[test]
    fn p_window_zero_pads_before_record() {
        let n = 2000;
        let e: Vec<f64> = (0..n).map(|i| i as f64 + 1.0).collect();
        let r = rec([e, vec![0.0; n], vec![0.0; n]]);
        let seq = extract_window(&r, &WindowSpec::p_arrival(15.0), Some(50), Some(300)).unwrap();
        let w = seq.window();
        assert_eq!(w[0].len(), 1500);
        assert!(w[0][..700].iter().all(|&v| v == 0.0));
        // window sample 700 is record sample 0, the last is record sample 799
        assert_eq!(w[0][700], 1.0);
        assert_eq!(w[0][1499], 800.0);
    }

    #[test]
    fn indicator_box_sum() {
        let n = 3000;
        let r = rec([vec![1.0; n], vec![0.0; n], vec![0.0; n]]);
        let spec = WindowSpec {
            include_ps_channel: true,
            ..WindowSpec::pga(10.0)
        };
        let seq = extract_window(&r, &spec, Some(100), Some(300)).unwrap();
        assert_eq!(seq.channels, 4);
        let ind = &seq.window()[3];
        assert_eq!(ind.iter().sum::<f64>(), 200.0);
    }

    #[test]
    fn missing_picks_and_bad_specs_error() {
        let r = rec([vec![1.0; 500], vec![0.0; 500], vec![0.0; 500]]);
        assert!(matches!(
            extract_window(&r, &WindowSpec::p_arrival(2.0), None, None),
            Err(Error::MissingPick { .. })
        ));
        let spec = WindowSpec {
            include_ps_channel: true,
            ..WindowSpec::pga(2.0)
        };
        assert!(extract_window(&r, &spec, Some(3), None).is_err());
        let spec = WindowSpec {
            segment_len_s: 2.0,
            ..WindowSpec::pga(5.0)
        };
        assert!(matches!(extract_window(&r, &spec, None, None), Err(Error::Config(_))));
    }

    #[test]
    fn normalize_zero_window_is_unchanged() {
        let r = rec([vec![0.0; 200], vec![0.0; 200], vec![0.0; 200]]);
        let seq = extract_window(&r, &WindowSpec::pga(2.0), None, None).unwrap();
        let n = normalize(&seq);
        assert_eq!(n.segments, seq.segments);
    }

    #[test]
    fn normalize_peak_and_indicator() {
        let mut e = vec![1.0; 400];
        e[150] = -250.0;
        let r = rec([e, vec![2.0; 400], vec![0.0; 400]]);
        let spec = WindowSpec {
            include_ps_channel: true,
            ..WindowSpec::pga(3.0)
        };
        let seq = normalize(&extract_window(&r, &spec, Some(120), Some(180)).unwrap());
        let w = seq.window();
        let peak = w[..3].iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 250.0 / (250.0 + 1e-8)).abs() < 1e-15);
        assert!(w[3].iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(w[3].iter().sum::<f64>(), 60.0);
        assert!((seq.scale - 1.0 / (250.0 + 1e-8)).abs() < 1e-18);
    }

    proptest! {
        #[test]
        fn joint_scale_preserves_channel_ratios(
            vals in prop::collection::vec(-100.0f64..100.0, 300),
        ) {
            let r = rec([vals[..100].to_vec(), vals[100..200].to_vec(), vals[200..].to_vec()]);
            let seq = extract_window(&r, &WindowSpec::pga(1.0), None, None).unwrap();
            let n = normalize(&seq);
            for (a, b) in seq.segments[0].iter().zip(&n.segments[0]) {
                prop_assert_eq!(*b, *a * n.scale);
            }
        }
    }
}
