//! Median-of-minimums set distance over patch bags.
//!
//! For each patch of the query set, take its minimum distance to any patch
//! of the candidate set, then take the median of those minima. This is
//! asymmetric by construction: the query's patches drive the median, and
//! k-NN consumers always evaluate `d(query, candidate)`.

use alloc::vec::Vec;

use crate::dataset::PatchSet;
use crate::embedding::{euclidean_f32, BitMatrix};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SetDistanceError {
    #[error("patch set is empty")]
    EmptySet,
    #[error("patch dimension mismatch: {a} vs {b}")]
    DimensionMismatch { a: usize, b: usize },
    #[error("hamming distance requires bit-packed rows of equal length ({a} vs {b} bits)")]
    BitLengthMismatch { a: usize, b: usize },
    #[error("hamming metric applies only to bit-packed patch sets")]
    MetricNotApplicable,
}

/// Patch-level metric for set distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchMetric {
    Euclidean,
    Hamming,
}

/// Hamming distance between two packed rows over the first `bits` bits;
/// tail bits beyond `bits` are masked out.
pub fn hamming(a: &[u64], b: &[u64], bits: usize) -> Result<u32, SetDistanceError> {
    if a.len() != b.len() {
        return Err(SetDistanceError::BitLengthMismatch {
            a: a.len() * 64,
            b: b.len() * 64,
        });
    }
    let full = bits / 64;
    let mut count = 0u32;
    for i in 0..full {
        count += (a[i] ^ b[i]).count_ones();
    }
    let tail = bits % 64;
    if tail != 0 {
        let mask = (1u64 << tail) - 1;
        count += ((a[full] ^ b[full]) & mask).count_ones();
    }
    Ok(count)
}

/// Median with the even-count convention pinned: mean of the two middle
/// order statistics.
fn median_in_place(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn median_of_min_with(
    n_query: usize,
    n_candidate: usize,
    mut dist: impl FnMut(usize, usize) -> f64,
) -> f64 {
    let mut minima = Vec::with_capacity(n_query);
    for i in 0..n_query {
        let mut best = f64::INFINITY;
        for j in 0..n_candidate {
            let d = dist(i, j);
            if d < best {
                best = d;
            }
        }
        minima.push(best);
    }
    median_in_place(&mut minima)
}

/// Median-of-minimums between real-valued patch sets under Euclidean patch
/// distance. Asymmetric: `query`'s patches drive the median.
pub fn median_of_minimums(
    query: &PatchSet,
    candidate: &PatchSet,
) -> Result<f64, SetDistanceError> {
    if query.n_patches() == 0 || candidate.n_patches() == 0 {
        return Err(SetDistanceError::EmptySet);
    }
    if query.dim() != candidate.dim() {
        return Err(SetDistanceError::DimensionMismatch {
            a: query.dim(),
            b: candidate.dim(),
        });
    }
    Ok(median_of_min_with(
        query.n_patches(),
        candidate.n_patches(),
        |i, j| euclidean_f32(query.patch(i), candidate.patch(j)),
    ))
}

/// Median-of-minimums between bit-packed patch sets under Hamming patch
/// distance.
pub fn median_of_minimums_binary(
    query: &BitMatrix,
    candidate: &BitMatrix,
) -> Result<f64, SetDistanceError> {
    if query.rows() == 0 || candidate.rows() == 0 {
        return Err(SetDistanceError::EmptySet);
    }
    if query.bits() != candidate.bits() {
        return Err(SetDistanceError::BitLengthMismatch {
            a: query.bits(),
            b: candidate.bits(),
        });
    }
    let bits = query.bits();
    Ok(median_of_min_with(
        query.rows(),
        candidate.rows(),
        |i, j| hamming(query.row(i), candidate.row(j), bits).expect("equal widths") as f64,
    ))
}

/// Full (generally asymmetric) matrix of median-of-minimums distances,
/// row index = query slide. The diagonal is exactly zero.
pub fn pairwise_set_distances(
    slides: &[PatchSet],
    metric: PatchMetric,
) -> Result<Vec<Vec<f64>>, SetDistanceError> {
    if metric == PatchMetric::Hamming {
        return Err(SetDistanceError::MetricNotApplicable);
    }
    if slides.is_empty() {
        return Err(SetDistanceError::EmptySet);
    }
    let n = slides.len();
    let row = |i: usize| -> Result<Vec<f64>, SetDistanceError> {
        let mut out = Vec::with_capacity(n);
        for j in 0..n {
            if i == j {
                out.push(0.0);
            } else {
                out.push(median_of_minimums(&slides[i], &slides[j])?);
            }
        }
        Ok(out)
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(row).collect();
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(row).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(id: &str, rows: &[&[f32]]) -> PatchSet {
        let cols = rows[0].len();
        let data: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        PatchSet::new(id, 0, rows.len(), cols, data).unwrap()
    }

    #[test]
    fn identical_sets_distance_zero() {
        let a = set("a", &[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(median_of_minimums(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn even_count_median_averages_middle() {
        // minima {1, 3} -> median 2.
        let a = set("a", &[&[0.0], &[4.0]]);
        let b = set("b", &[&[1.0]]);
        assert_eq!(median_of_minimums(&a, &b).unwrap(), 2.0);
    }

    #[test]
    fn odd_count_median_is_middle() {
        // minima {0, 2, 0} -> sorted {0, 0, 2} -> median 0.
        let a = set("a", &[&[0.0], &[2.0], &[10.0]]);
        let b = set("b", &[&[0.0], &[10.0]]);
        assert_eq!(median_of_minimums(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn asymmetry_is_possible() {
        let a = set("a", &[&[0.0], &[100.0]]);
        let b = set("b", &[&[0.0]]);
        let dab = median_of_minimums(&a, &b).unwrap();
        let dba = median_of_minimums(&b, &a).unwrap();
        assert_ne!(dab, dba);
        assert_eq!(dba, 0.0);
    }

    #[test]
    fn hamming_basics() {
        // 1010 vs 0110 differ in bits 2 and 3 (LSB-first packing of the
        // written-out bit strings): count 2 either way.
        let a = [0b1010u64];
        let b = [0b0110u64];
        assert_eq!(hamming(&a, &b, 4).unwrap(), 2);
        assert_eq!(hamming(&a, &a, 4).unwrap(), 0);
        let x = [0xFFFF_FFFF_FFFF_FFFFu64];
        let y = [0u64];
        assert_eq!(hamming(&x, &y, 64).unwrap(), 64);
    }

    #[test]
    fn hamming_masks_tail_bits() {
        let a = [0b111_1111u64];
        let b = [0u64];
        assert_eq!(hamming(&a, &b, 3).unwrap(), 3);
    }

    #[test]
    fn pairwise_matches_elementwise() {
        let slides = [
            set("a", &[&[0.0, 1.0], &[2.0, 0.5]]),
            set("b", &[&[5.0, 5.0]]),
            set("c", &[&[1.0, 1.0], &[0.0, 0.0], &[9.0, 3.0]]),
        ];
        let m = pairwise_set_distances(&slides, PatchMetric::Euclidean).unwrap();
        for i in 0..3 {
            assert_eq!(m[i][i], 0.0);
            for j in 0..3 {
                if i != j {
                    assert_eq!(m[i][j], median_of_minimums(&slides[i], &slides[j]).unwrap());
                }
            }
        }
    }

    #[test]
    fn empty_and_mismatch_errors() {
        let a = set("a", &[&[1.0, 2.0]]);
        let b = set("b", &[&[1.0]]);
        assert!(matches!(
            median_of_minimums(&a, &b),
            Err(SetDistanceError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            hamming(&[0u64], &[0u64, 1u64], 100),
            Err(SetDistanceError::BitLengthMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn hamming_matches_bit_loop(aw in any::<u64>(), bw in any::<u64>(), bits in 1usize..=64) {
            let packed = hamming(&[aw], &[bw], bits).unwrap();
            let mut naive = 0u32;
            for j in 0..bits {
                let x = (aw >> j) & 1;
                let y = (bw >> j) & 1;
                if x != y {
                    naive += 1;
                }
            }
            prop_assert_eq!(packed, naive);
        }

        #[test]
        fn median_matches_sort_oracle(values in proptest::collection::vec(-100.0f64..100.0, 1..30)) {
            let mut v = values.clone();
            let m = median_in_place(&mut v);
            let mut sorted = values.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = sorted.len();
            let expected = if n % 2 == 1 {
                sorted[n / 2]
            } else {
                0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
            };
            prop_assert_eq!(m, expected);
        }
    }
}
