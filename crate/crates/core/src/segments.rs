//! Complete / early / late / recovered-part views of a recovered sample.

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::datagen::{MaskSpec, TimeSeriesSample};
use crate::error::{Result, TemsrError};

/// Default extraction proportion.
pub const DEFAULT_PROPORTION: f64 = 6.0 / 8.0;

/// Extraction proportions swept by the sensitivity harness.
pub const PROPORTION_GRID: [f64; 6] = [7.0 / 8.0, 6.0 / 8.0, 5.0 / 8.0, 4.0 / 8.0, 3.0 / 8.0, 2.0 / 8.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentKind {
    Complete,
    Early,
    Late,
    Recovered,
}

impl SegmentKind {
    pub const ALL: [SegmentKind; 4] = [
        SegmentKind::Complete,
        SegmentKind::Early,
        SegmentKind::Late,
        SegmentKind::Recovered,
    ];

    pub fn index(self) -> usize {
        match self {
            SegmentKind::Complete => 0,
            SegmentKind::Early => 1,
            SegmentKind::Late => 2,
            SegmentKind::Recovered => 3,
        }
    }
}

/// Columns `[start, start + values.ncols())` of the source sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: usize,
    pub values: Array2<f64>,
}

impl Segment {
    fn cut(kind: SegmentKind, x: ArrayView2<f64>, start: usize, end: usize) -> Self {
        Segment {
            kind,
            start,
            values: x.slice(s![.., start..end]).to_owned(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    pub fn end(&self) -> usize {
        self.start + self.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSet {
    pub complete: Segment,
    pub early: Segment,
    pub late: Segment,
    /// One segment per masked block; a single entry for contiguous masks.
    pub recovered: Vec<Segment>,
}

impl SegmentSet {
    pub fn of_kind(&self, kind: SegmentKind) -> Vec<&Segment> {
        match kind {
            SegmentKind::Complete => vec![&self.complete],
            SegmentKind::Early => vec![&self.early],
            SegmentKind::Late => vec![&self.late],
            SegmentKind::Recovered => self.recovered.iter().collect(),
        }
    }
}

/// `floor(p_s * L)`, with a small tolerance so ratios like 4/6 of 6 land on 4.
pub fn segment_len(len: usize, proportion: f64) -> usize {
    (proportion * len as f64 + 1e-9).floor() as usize
}

pub fn extract_segments(x_sl: &TimeSeriesSample, mask: &MaskSpec, proportion: f64) -> Result<SegmentSet> {
    extract_from_view(x_sl.values.view(), mask, proportion)
}

pub fn extract_from_view(x: ArrayView2<f64>, mask: &MaskSpec, proportion: f64) -> Result<SegmentSet> {
    let l = x.ncols();
    if !(proportion > 0.0 && proportion <= 1.0) {
        return Err(TemsrError::Config(format!(
            "extraction proportion must lie in (0, 1], got {proportion}"
        )));
    }
    if mask.len() != l {
        return Err(TemsrError::Shape(format!(
            "mask length {} does not match sample length {l}",
            mask.len()
        )));
    }
    let blocks = mask.blocks();
    if blocks.is_empty() {
        return Err(TemsrError::Config(
            "recovered-part segment needs at least one masked point".into(),
        ));
    }
    let seg = segment_len(l, proportion);
    if seg == 0 {
        return Err(TemsrError::Config(format!(
            "proportion {proportion} leaves an empty segment for length {l}"
        )));
    }
    Ok(SegmentSet {
        complete: Segment::cut(SegmentKind::Complete, x, 0, l),
        early: Segment::cut(SegmentKind::Early, x, 0, seg),
        late: Segment::cut(SegmentKind::Late, x, l - seg, l),
        recovered: blocks
            .into_iter()
            .map(|(a, b)| Segment::cut(SegmentKind::Recovered, x, a, b))
            .collect(),
    })
}

/// Right-pads with copies of the last column up to `min_len`.
pub fn pad_edge(values: &Array2<f64>, min_len: usize) -> Array2<f64> {
    let (n, l) = values.dim();
    if l >= min_len || l == 0 {
        return values.clone();
    }
    let mut out = Array2::zeros((n, min_len));
    out.slice_mut(s![.., ..l]).assign(values);
    let last = values.column(l - 1).to_owned();
    for t in l..min_len {
        out.column_mut(t).assign(&last);
    }
    out
}

/// Adjoint of [`pad_edge`]: padded-column gradients fold into the last
/// real column.
pub fn pad_edge_backward(grad: &Array2<f64>, original_len: usize) -> Array2<f64> {
    let l = grad.ncols();
    if l <= original_len {
        return grad.clone();
    }
    let mut out = grad.slice(s![.., ..original_len]).to_owned();
    for t in original_len..l {
        let col = grad.column(t).to_owned();
        let mut last = out.column_mut(original_len - 1);
        last += &col;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Six portions A..F of two columns each; column value encodes the
    /// portion index.
    fn six_portions() -> TimeSeriesSample {
        let v = Array2::from_shape_fn((2, 12), |(c, t)| (t / 2) as f64 + 10.0 * c as f64);
        TimeSeriesSample::new(v, None)
    }

    fn portions(seg: &Segment) -> Vec<usize> {
        let mut out: Vec<usize> = seg.values.row(0).iter().map(|&v| v as usize).collect();
        out.dedup();
        out
    }

    #[test]
    fn six_portion_layout() {
        // masked B..E, p_s = 4/6
        let mask = MaskSpec::from_range(12, 2, 10);
        let set = extract_segments(&six_portions(), &mask, 4.0 / 6.0).unwrap();
        assert_eq!(portions(&set.early), vec![0, 1, 2, 3]);
        assert_eq!(portions(&set.late), vec![2, 3, 4, 5]);
        assert_eq!(set.recovered.len(), 1);
        assert_eq!(portions(&set.recovered[0]), vec![1, 2, 3, 4]);
        assert_eq!(set.complete.values, six_portions().values);
    }

    #[test]
    fn full_proportion_degenerates() {
        let mask = MaskSpec::from_range(12, 4, 6);
        let set = extract_segments(&six_portions(), &mask, 1.0).unwrap();
        assert_eq!(set.early.values, set.complete.values);
        assert_eq!(set.late.values, set.complete.values);
    }

    #[test]
    fn grid_lengths_at_128() {
        let x = TimeSeriesSample::new(Array2::zeros((1, 128)), None);
        let mask = MaskSpec::from_range(128, 10, 26);
        let set = extract_segments(&x, &mask, 6.0 / 8.0).unwrap();
        assert_eq!(set.early.len(), 96);
        assert_eq!(set.late.len(), 96);
        assert_eq!(set.recovered[0].len(), 16);
    }

    #[test]
    fn errors() {
        let x = six_portions();
        assert!(matches!(
            extract_segments(&x, &MaskSpec::empty(12), 0.5),
            Err(TemsrError::Config(_))
        ));
        let m = MaskSpec::from_range(12, 1, 2);
        assert!(matches!(extract_segments(&x, &m, 0.0), Err(TemsrError::Config(_))));
        assert!(matches!(extract_segments(&x, &m, 1.5), Err(TemsrError::Config(_))));
        assert!(matches!(
            extract_segments(&x, &MaskSpec::from_range(10, 1, 2), 0.5),
            Err(TemsrError::Shape(_))
        ));
    }

    #[test]
    fn multi_block_gives_one_recovered_segment_per_block() {
        let mut m = MaskSpec::from_range(12, 1, 3);
        m.masked[7] = true;
        m.masked[8] = true;
        let set = extract_segments(&six_portions(), &m, 0.5).unwrap();
        let spans: Vec<_> = set.recovered.iter().map(|s| (s.start, s.end())).collect();
        assert_eq!(spans, vec![(1, 3), (7, 9)]);
    }

    #[test]
    fn pad_and_adjoint() {
        let v = Array2::from_shape_vec((1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let p = pad_edge(&v, 6);
        assert_eq!(p.row(0).to_vec(), vec![1.0, 2.0, 3.0, 3.0, 3.0, 3.0]);
        let g = Array2::from_shape_vec((1, 6), vec![1.0, 1.0, 1.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(pad_edge_backward(&g, 3).row(0).to_vec(), vec![1.0, 1.0, 7.0]);
        assert_eq!(pad_edge(&p, 4), p);
    }

    proptest! {
        #[test]
        fn segment_invariants(len in 8usize..96, start_frac in 0.0f64..0.8, width in 1usize..8, ps_idx in 0usize..6) {
            let start = ((len as f64) * start_frac) as usize;
            let end = (start + width).min(len);
            prop_assume!(end > start);
            let p_s = PROPORTION_GRID[ps_idx];
            let x = TimeSeriesSample::new(
                Array2::from_shape_fn((2, len), |(c, t)| (c * len + t) as f64),
                None,
            );
            let before = x.clone();
            let mask = MaskSpec::from_range(len, start, end);
            let set = extract_segments(&x, &mask, p_s).unwrap();
            let k = segment_len(len, p_s);
            prop_assert_eq!(set.early.len(), k);
            prop_assert_eq!(set.late.len(), k);
            prop_assert_eq!(set.early.values.view(), x.values.slice(s![.., ..k]));
            prop_assert_eq!(set.late.values.view(), x.values.slice(s![.., len - k..]));
            // flooring leaves the middle column uncovered for odd L at exactly 1/2
            if p_s > 0.5 || (p_s == 0.5 && len % 2 == 0) {
                prop_assert!(set.early.end() >= set.late.start);
            }
            let (first, last) = mask.span().unwrap();
            let r = &set.recovered[0];
            prop_assert_eq!((r.start, r.end() - 1), (first, last));
            prop_assert_eq!(x, before);
        }
    }
}
