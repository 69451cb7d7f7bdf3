//! Slide-level embeddings: dense, sparse, and bit-packed binary encodings.
//!
//! Binary embeddings store sign bits in little-endian `u64` words, LSB
//! first within each word; bit `j` of the vector lives at word `j / 64`,
//! bit `j % 64`. The convention for packing is `bit = 1` iff `value > 0`,
//! so a zero coordinate packs to 0.

use alloc::vec;
use alloc::vec::Vec;

use crate::mathx;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmbeddingError {
    #[error("embedding length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("operation requires {expected} embeddings, got {got}")]
    WrongEncoding {
        expected: &'static str,
        got: &'static str,
    },
}

/// Words needed to hold `bits` packed bits.
pub const fn packed_words(bits: usize) -> usize {
    bits.div_ceil(64)
}

/// A bit-packed sign embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryEmbedding {
    words: Vec<u64>,
    bits: usize,
}

impl BinaryEmbedding {
    /// Packs sign bits of `values`: bit set iff the value is strictly
    /// positive.
    pub fn from_signs(values: &[f32]) -> Self {
        let bits = values.len();
        let mut words = vec![0u64; packed_words(bits)];
        for (j, &v) in values.iter().enumerate() {
            if v > 0.0 {
                words[j / 64] |= 1u64 << (j % 64);
            }
        }
        BinaryEmbedding { words, bits }
    }

    /// Wraps raw words; tail bits beyond `bits` are cleared.
    pub fn from_words(mut words: Vec<u64>, bits: usize) -> Self {
        assert_eq!(words.len(), packed_words(bits));
        let tail = bits % 64;
        if tail != 0 {
            if let Some(last) = words.last_mut() {
                *last &= (1u64 << tail) - 1;
            }
        }
        BinaryEmbedding { words, bits }
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn get(&self, j: usize) -> bool {
        (self.words[j / 64] >> (j % 64)) & 1 == 1
    }

    /// Unpacks to ±1 values (bit set → +1).
    pub fn to_signs(&self) -> Vec<f32> {
        (0..self.bits)
            .map(|j| if self.get(j) { 1.0 } else { -1.0 })
            .collect()
    }
}

/// A bag or gallery of equal-length binary rows, packed contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct BitMatrix {
    rows: usize,
    bits: usize,
    words_per_row: usize,
    data: Vec<u64>,
}

impl BitMatrix {
    pub fn zeros(rows: usize, bits: usize) -> Self {
        let wpr = packed_words(bits);
        BitMatrix {
            rows,
            bits,
            words_per_row: wpr,
            data: vec![0; rows * wpr],
        }
    }

    pub fn from_rows(rows: &[BinaryEmbedding]) -> Result<Self, EmbeddingError> {
        let bits = rows.first().map(|r| r.bits()).unwrap_or(0);
        let wpr = packed_words(bits);
        let mut data = Vec::with_capacity(rows.len() * wpr);
        for r in rows {
            if r.bits() != bits {
                return Err(EmbeddingError::LengthMismatch {
                    a: bits,
                    b: r.bits(),
                });
            }
            data.extend_from_slice(r.words());
        }
        Ok(BitMatrix {
            rows: rows.len(),
            bits,
            words_per_row: wpr,
            data,
        })
    }

    /// Builds from raw little-endian words, one `words_per_row` stretch per
    /// row; tail bits are cleared.
    pub fn from_words(data: Vec<u64>, rows: usize, bits: usize) -> Result<Self, EmbeddingError> {
        let wpr = packed_words(bits);
        if data.len() != rows * wpr {
            return Err(EmbeddingError::LengthMismatch {
                a: data.len(),
                b: rows * wpr,
            });
        }
        let mut m = BitMatrix {
            rows,
            bits,
            words_per_row: wpr,
            data,
        };
        let tail = bits % 64;
        if tail != 0 && wpr > 0 {
            let mask = (1u64 << tail) - 1;
            for r in 0..rows {
                m.data[r * wpr + wpr - 1] &= mask;
            }
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn row(&self, r: usize) -> &[u64] {
        &self.data[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    pub fn set_bit(&mut self, r: usize, j: usize) {
        self.data[r * self.words_per_row + j / 64] |= 1u64 << (j % 64);
    }

    pub fn raw_words(&self) -> &[u64] {
        &self.data
    }
}

/// One slide-level vector in one of the three encodings.
#[derive(Debug, Clone, PartialEq)]
pub enum SlideEmbedding {
    Dense(Vec<f32>),
    Sparse {
        dim: usize,
        indices: Vec<u32>,
        values: Vec<f32>,
    },
    Binary(BinaryEmbedding),
}

impl SlideEmbedding {
    /// Stores the vector sparse when at least half its entries are zero at
    /// tolerance `zero_tol`, dense otherwise.
    pub fn from_dense_auto(values: Vec<f32>, zero_tol: f32) -> Self {
        let zeros = values.iter().filter(|v| v.abs() <= zero_tol).count();
        if zeros * 2 >= values.len() {
            let dim = values.len();
            let mut indices = Vec::new();
            let mut kept = Vec::new();
            for (i, &v) in values.iter().enumerate() {
                if v.abs() > zero_tol {
                    indices.push(i as u32);
                    kept.push(v);
                }
            }
            SlideEmbedding::Sparse {
                dim,
                indices,
                values: kept,
            }
        } else {
            SlideEmbedding::Dense(values)
        }
    }

    pub fn encoding_name(&self) -> &'static str {
        match self {
            SlideEmbedding::Dense(_) => "dense",
            SlideEmbedding::Sparse { .. } => "sparse",
            SlideEmbedding::Binary(_) => "binary",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            SlideEmbedding::Dense(v) => v.len(),
            SlideEmbedding::Sparse { dim, .. } => *dim,
            SlideEmbedding::Binary(b) => b.bits(),
        }
    }

    /// Materializes dense/sparse embeddings as a dense vector.
    pub fn to_dense(&self) -> Result<Vec<f32>, EmbeddingError> {
        match self {
            SlideEmbedding::Dense(v) => Ok(v.clone()),
            SlideEmbedding::Sparse {
                dim,
                indices,
                values,
            } => {
                let mut out = vec![0.0f32; *dim];
                for (&i, &v) in indices.iter().zip(values.iter()) {
                    out[i as usize] = v;
                }
                Ok(out)
            }
            SlideEmbedding::Binary(_) => Err(EmbeddingError::WrongEncoding {
                expected: "real-valued",
                got: "binary",
            }),
        }
    }

    pub fn as_binary(&self) -> Result<&BinaryEmbedding, EmbeddingError> {
        match self {
            SlideEmbedding::Binary(b) => Ok(b),
            other => Err(EmbeddingError::WrongEncoding {
                expected: "binary",
                got: other.encoding_name(),
            }),
        }
    }

    /// Euclidean distance between real-valued embeddings (dense or sparse in
    /// either position). Binary embeddings are compared with Hamming
    /// distance instead and are rejected here.
    pub fn euclidean(&self, other: &SlideEmbedding) -> Result<f64, EmbeddingError> {
        if self.dim() != other.dim() {
            return Err(EmbeddingError::LengthMismatch {
                a: self.dim(),
                b: other.dim(),
            });
        }
        use SlideEmbedding::*;
        let d2 = match (self, other) {
            (Dense(a), Dense(b)) => dense_dense_sq(a, b),
            (Dense(a), Sparse { indices, values, .. }) => dense_sparse_sq(a, indices, values),
            (Sparse { indices, values, .. }, Dense(b)) => dense_sparse_sq(b, indices, values),
            (
                Sparse {
                    indices: ia,
                    values: va,
                    ..
                },
                Sparse {
                    indices: ib,
                    values: vb,
                    ..
                },
            ) => sparse_sparse_sq(ia, va, ib, vb),
            (Binary(_), _) | (_, Binary(_)) => {
                return Err(EmbeddingError::WrongEncoding {
                    expected: "real-valued",
                    got: "binary",
                })
            }
        };
        Ok(mathx::sqrt(d2))
    }
}

/// Euclidean distance between two dense `f32` rows, accumulated in `f64`.
pub fn euclidean_f32(a: &[f32], b: &[f32]) -> f64 {
    mathx::sqrt(dense_dense_sq(a, b))
}

fn dense_dense_sq(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    acc
}

fn dense_sparse_sq(dense: &[f32], indices: &[u32], values: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    let mut p = 0usize;
    for (j, &x) in dense.iter().enumerate() {
        let y = if p < indices.len() && indices[p] as usize == j {
            let v = values[p];
            p += 1;
            v
        } else {
            0.0
        };
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    acc
}

fn sparse_sparse_sq(ia: &[u32], va: &[f32], ib: &[u32], vb: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    let (mut p, mut q) = (0usize, 0usize);
    while p < ia.len() || q < ib.len() {
        let (x, y) = if p < ia.len() && (q >= ib.len() || ia[p] < ib[q]) {
            let v = (va[p], 0.0);
            p += 1;
            v
        } else if q < ib.len() && (p >= ia.len() || ib[q] < ia[p]) {
            let v = (0.0, vb[q]);
            q += 1;
            v
        } else {
            let v = (va[p], vb[q]);
            p += 1;
            q += 1;
            v
        };
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pack_unpack_signs() {
        let v = [0.5f32, -0.2, 0.0, 3.0, -1.0];
        let b = BinaryEmbedding::from_signs(&v);
        assert_eq!(b.bits(), 5);
        assert!(b.get(0) && !b.get(1) && !b.get(2) && b.get(3) && !b.get(4));
    }

    #[test]
    fn sparse_auto_threshold() {
        // 3 of 4 entries zero: stored sparse.
        let e = SlideEmbedding::from_dense_auto(vec![0.0, 2.0, 0.0, 0.0], 1e-8);
        assert_eq!(e.encoding_name(), "sparse");
        assert_eq!(e.to_dense().unwrap(), vec![0.0, 2.0, 0.0, 0.0]);
        // 1 of 4 zero: stays dense.
        let e = SlideEmbedding::from_dense_auto(vec![1.0, 2.0, 0.0, 3.0], 1e-8);
        assert_eq!(e.encoding_name(), "dense");
    }

    #[test]
    fn euclidean_three_four_five() {
        let a = SlideEmbedding::Dense(vec![0.0, 0.0]);
        let b = SlideEmbedding::Dense(vec![3.0, 4.0]);
        assert_eq!(a.euclidean(&b).unwrap(), 5.0);
    }

    #[test]
    fn binary_rejected_for_euclidean() {
        let a = SlideEmbedding::Binary(BinaryEmbedding::from_signs(&[1.0, -1.0]));
        let b = SlideEmbedding::Dense(vec![0.0, 0.0]);
        assert!(a.euclidean(&b).is_err());
    }

    proptest! {
        #[test]
        fn sparse_euclidean_matches_dense(v1 in proptest::collection::vec(-5.0f32..5.0, 1..40),
                                          mask in proptest::collection::vec(any::<bool>(), 1..40)) {
            let n = v1.len().min(mask.len());
            let a: Vec<f32> = v1[..n].to_vec();
            let b: Vec<f32> = a
                .iter()
                .zip(mask.iter())
                .map(|(&v, &m)| if m { 0.0 } else { v + 1.0 })
                .collect();
            let da = SlideEmbedding::Dense(a.clone());
            let db = SlideEmbedding::Dense(b.clone());
            let sa = SlideEmbedding::from_dense_auto(a, 0.0);
            let sb = SlideEmbedding::from_dense_auto(b, 0.0);
            let reference = da.euclidean(&db).unwrap();
            for (x, y) in [(&da, &sb), (&sa, &db), (&sa, &sb)] {
                let d = x.euclidean(y).unwrap();
                prop_assert!((d - reference).abs() <= 1e-9 * (1.0 + reference));
            }
        }

        #[test]
        fn pack_roundtrip_identity(bits in proptest::collection::vec(any::<bool>(), 1..200)) {
            let vals: Vec<f32> = bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
            let packed = BinaryEmbedding::from_signs(&vals);
            let unpacked = packed.to_signs();
            let repacked = BinaryEmbedding::from_signs(&unpacked);
            prop_assert_eq!(packed, repacked);
        }
    }
}
