use ndarray::{Array3, Axis};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TimeSeriesSample;
use crate::error::{Result, TemsrError};

/// Time points removed from a sample; the same points are masked on every
/// channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub masked: Vec<bool>,
    pub ratio: f64,
}

impl MaskSpec {
    /// Mask with no masked points, used for pass-through checks.
    pub fn empty(len: usize) -> Self {
        MaskSpec {
            masked: vec![false; len],
            ratio: 0.0,
        }
    }

    /// Mask covering `[start, end)`.
    pub fn from_range(len: usize, start: usize, end: usize) -> Self {
        let masked: Vec<bool> = (0..len).map(|t| t >= start && t < end).collect();
        let ratio = (end.saturating_sub(start)) as f64 / len as f64;
        MaskSpec { masked, ratio }
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    /// Contiguous masked runs as half-open `[start, end)` ranges.
    pub fn blocks(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = None;
        for (t, &m) in self.masked.iter().enumerate() {
            match (m, start) {
                (true, None) => start = Some(t),
                (false, Some(s)) => {
                    out.push((s, t));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            out.push((s, self.masked.len()));
        }
        out
    }

    /// Smallest `[first, last]` interval containing every masked point.
    pub fn span(&self) -> Option<(usize, usize)> {
        let first = self.masked.iter().position(|&m| m)?;
        let last = self.masked.iter().rposition(|&m| m)?;
        Some((first, last))
    }
}

/// Number of masked points for a ratio, rounding half up.
pub fn masked_count(len: usize, ratio: f64) -> usize {
    (ratio * len as f64 + 0.5).floor() as usize
}

/// Draws `n_blocks` disjoint, non-adjacent contiguous blocks holding
/// `round(ratio * len)` points in total, placed uniformly at random.
pub fn make_mask<R: Rng + ?Sized>(
    len: usize,
    ratio: f64,
    n_blocks: usize,
    rng: &mut R,
) -> Result<MaskSpec> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(TemsrError::Config(format!(
            "masking ratio must lie in (0, 1), got {ratio}"
        )));
    }
    let count = masked_count(len, ratio);
    if count >= len {
        return Err(TemsrError::Config(format!(
            "masking ratio {ratio} leaves no unmasked context in length {len}"
        )));
    }
    if n_blocks == 0 || n_blocks > count {
        return Err(TemsrError::Config(format!(
            "need 1 <= n_blocks <= {count}, got {n_blocks}"
        )));
    }
    let free = len - count;
    if free + 1 < n_blocks {
        return Err(TemsrError::Config(format!(
            "{n_blocks} separated blocks do not fit {count} masked points in length {len}"
        )));
    }

    // Block sizes: a uniform composition of `count` into `n_blocks` parts.
    let mut cuts: Vec<usize> = sample(rng, count - 1, n_blocks - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    cuts.sort_unstable();
    let mut sizes = Vec::with_capacity(n_blocks);
    let mut prev = 0;
    for c in cuts.iter().copied().chain(std::iter::once(count)) {
        sizes.push(c - prev);
        prev = c;
    }

    // Gaps: n_blocks + 1 bins, interior ones at least 1, the rest spread
    // uniformly (stars and bars).
    let spare = free - (n_blocks - 1);
    let bins = n_blocks + 1;
    let slots = spare + bins - 1;
    let mut bars: Vec<usize> = sample(rng, slots, bins - 1).into_vec();
    bars.sort_unstable();
    let mut gaps = Vec::with_capacity(bins);
    let mut prev: Option<usize> = None;
    for &b in bars.iter().chain(std::iter::once(&slots)) {
        gaps.push(match prev {
            None => b,
            Some(p) => b - p - 1,
        });
        prev = Some(b);
    }
    for g in gaps.iter_mut().take(n_blocks).skip(1) {
        *g += 1;
    }

    let mut masked = vec![false; len];
    let mut t = 0usize;
    for b in 0..n_blocks {
        t += gaps[b];
        for m in masked.iter_mut().skip(t).take(sizes[b]) {
            *m = true;
        }
        t += sizes[b];
    }
    debug_assert_eq!(t + gaps[n_blocks], len);
    Ok(MaskSpec { masked, ratio })
}

/// Replaces masked time points with 0 on every channel.
pub fn apply_mask(x: &TimeSeriesSample, m: &MaskSpec) -> Result<TimeSeriesSample> {
    if m.len() != x.len() {
        return Err(TemsrError::Shape(format!(
            "mask length {} does not match sample length {}",
            m.len(),
            x.len()
        )));
    }
    let mut values = x.values.clone();
    for (t, &masked) in m.masked.iter().enumerate() {
        if masked {
            values.column_mut(t).fill(0.0);
        }
    }
    Ok(TimeSeriesSample::new(values, x.label))
}

/// Batched [`apply_mask`] over a `[B, N, L]` array with one mask per row.
pub fn apply_mask_batch(x: &Array3<f64>, masks: &[MaskSpec]) -> Result<Array3<f64>> {
    let (b, _, l) = x.dim();
    if masks.len() != b {
        return Err(TemsrError::Shape(format!(
            "{} masks for a batch of {b}",
            masks.len()
        )));
    }
    let mut out = x.clone();
    for (mut row, m) in out.axis_iter_mut(Axis(0)).zip(masks) {
        if m.len() != l {
            return Err(TemsrError::Shape(format!(
                "mask length {} does not match sample length {l}",
                m.len()
            )));
        }
        for (t, &masked) in m.masked.iter().enumerate() {
            if masked {
                row.column_mut(t).fill(0.0);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_ratio_masks_sixteen_of_128() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = make_mask(128, 1.0 / 8.0, 1, &mut rng).unwrap();
        assert_eq!(m.count(), 16);
        assert_eq!(m.blocks().len(), 1);
    }

    #[test]
    fn high_ratio_masks_ninety_six() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = make_mask(128, 6.0 / 8.0, 1, &mut rng).unwrap();
        assert_eq!(m.count(), 96);
    }

    #[test]
    fn minimal_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = make_mask(8, 1.0 / 8.0, 1, &mut rng).unwrap();
        assert_eq!(m.count(), 1);
    }

    #[test]
    fn full_mask_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(
            make_mask(8, 0.97, 1, &mut rng),
            Err(TemsrError::Config(_))
        ));
        assert!(matches!(make_mask(8, 0.0, 1, &mut rng), Err(TemsrError::Config(_))));
        assert!(matches!(make_mask(8, 0.5, 5, &mut rng), Err(TemsrError::Config(_))));
    }

    #[test]
    fn apply_mask_contracts() {
        let x = TimeSeriesSample::new(Array2::ones((2, 10)), None);
        let unchanged = apply_mask(&x, &MaskSpec::empty(10)).unwrap();
        assert_eq!(unchanged, x);

        let out = apply_mask(&x, &MaskSpec::from_range(10, 3, 7)).unwrap();
        for t in 0..10 {
            let expect = if (3..7).contains(&t) { 0.0 } else { 1.0 };
            assert!(out.values.column(t).iter().all(|&v| v == expect));
        }

        let single = apply_mask(&x, &MaskSpec::from_range(10, 5, 6)).unwrap();
        let diff: Vec<usize> = (0..10)
            .filter(|&t| single.values.column(t) != x.values.column(t))
            .collect();
        assert_eq!(diff, vec![5]);

        assert!(matches!(
            apply_mask(&x, &MaskSpec::empty(9)),
            Err(TemsrError::Shape(_))
        ));
    }

    #[test]
    fn blocks_and_span() {
        let mut m = MaskSpec::from_range(12, 2, 4);
        m.masked[8] = true;
        assert_eq!(m.blocks(), vec![(2, 4), (8, 9)]);
        assert_eq!(m.span(), Some((2, 8)));
        assert_eq!(MaskSpec::empty(4).span(), None);
    }

    proptest! {
        #[test]
        fn mask_geometry(len in 8usize..200, ratio in 0.01f64..0.99, blocks in 1usize..5, seed: u64) {
            let count = masked_count(len, ratio);
            prop_assume!(count >= blocks && count < len && len - count + 1 >= blocks);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = make_mask(len, ratio, blocks, &mut rng).unwrap();
            prop_assert_eq!(m.len(), len);
            prop_assert_eq!(m.count(), count);
            prop_assert!((m.count() as f64 / len as f64 - ratio).abs() <= 1.0 / len as f64);
            prop_assert_eq!(m.blocks().len(), blocks);
        }

        #[test]
        fn apply_mask_is_idempotent(seed: u64, len in 8usize..64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values = Array2::from_shape_fn((3, len), |(c, t)| (c * 31 + t) as f64 * 0.1 + 1.0);
            let x = TimeSeriesSample::new(values, None);
            let m = make_mask(len, 0.25, 1, &mut rng).unwrap();
            let once = apply_mask(&x, &m).unwrap();
            let twice = apply_mask(&once, &m).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
