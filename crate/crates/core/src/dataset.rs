//! Slides as bags of patch embeddings, synthetic data, and fold splitting.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::mathx;
use crate::tensor::Tensor;

/// Cross-validation always uses five folds.
pub const NUM_FOLDS: usize = 5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DatasetError {
    #[error("slide '{slide_id}' has no patches")]
    EmptyPatchSet { slide_id: String },
    #[error("slide '{slide_id}' contains a non-finite value")]
    NonFinite { slide_id: String },
    #[error("slide '{slide_id}' patch data length {len} != {rows}x{cols}")]
    BadShape {
        slide_id: String,
        len: usize,
        rows: usize,
        cols: usize,
    },
    #[error("slide '{slide_id}' label {label} out of range for {num_classes} classes")]
    LabelOutOfRange {
        slide_id: String,
        label: usize,
        num_classes: usize,
    },
    #[error("duplicate slide id '{slide_id}'")]
    DuplicateSlideId { slide_id: String },
    #[error("dataset is empty")]
    Empty,
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(&'static str),
}

/// One slide: an N×D bag of patch embeddings plus its id and class label.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    slide_id: String,
    label: usize,
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl PatchSet {
    /// Builds a patch set from row-major `f32` data, rejecting empty bags,
    /// ragged buffers, and non-finite entries.
    pub fn new(
        slide_id: impl Into<String>,
        label: usize,
        rows: usize,
        cols: usize,
        data: Vec<f32>,
    ) -> Result<Self, DatasetError> {
        let slide_id = slide_id.into();
        if rows == 0 || cols == 0 {
            return Err(DatasetError::EmptyPatchSet { slide_id });
        }
        if data.len() != rows * cols {
            return Err(DatasetError::BadShape {
                slide_id,
                len: data.len(),
                rows,
                cols,
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(DatasetError::NonFinite { slide_id });
        }
        Ok(PatchSet {
            slide_id,
            label,
            rows,
            cols,
            data,
        })
    }

    pub fn slide_id(&self) -> &str {
        &self.slide_id
    }

    pub fn label(&self) -> usize {
        self.label
    }

    /// Patch count N.
    pub fn n_patches(&self) -> usize {
        self.rows
    }

    /// Embedding dimension D.
    pub fn dim(&self) -> usize {
        self.cols
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn patches(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn raw_data(&self) -> &[f32] {
        &self.data
    }

    /// Returns a new patch set with rows permuted by `perm` (a bijection on
    /// `0..N`). Used by permutation-invariance tests.
    pub fn permuted(&self, perm: &[usize]) -> PatchSet {
        debug_assert_eq!(perm.len(), self.rows);
        let mut data = Vec::with_capacity(self.data.len());
        for &p in perm {
            data.extend_from_slice(self.patch(p));
        }
        PatchSet {
            slide_id: self.slide_id.clone(),
            label: self.label,
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    /// Row indices in canonical (lexicographic) order. Aggregators reduce in
    /// this order so their outputs do not depend on input row order.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.rows).collect();
        idx.sort_by(|&a, &b| {
            let ra = self.patch(a);
            let rb = self.patch(b);
            for (x, y) in ra.iter().zip(rb.iter()) {
                match x.total_cmp(y) {
                    core::cmp::Ordering::Equal => continue,
                    other => return other,
                }
            }
            core::cmp::Ordering::Equal
        });
        idx
    }

    /// N×D `f64` tensor with rows taken in the given index order.
    pub fn tensor_with_order(&self, order: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(self.rows * self.cols);
        for &i in order {
            data.extend(self.patch(i).iter().map(|&v| v as f64));
        }
        Tensor::from_vec(order.len(), self.cols, data)
    }

    /// N×D `f64` tensor in stored row order.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }
}

/// Parameters of the synthetic stand-in dataset. Each class is a mixture of
/// two Gaussian components whose means sit at `class_separation` from the
/// origin, so per-class variance structure carries signal beyond the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub slides_per_class: usize,
    pub patches_min: usize,
    pub patches_max: usize,
    pub embedding_dim: usize,
    pub class_separation: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.num_classes == 0
            || self.slides_per_class == 0
            || self.patches_min == 0
            || self.embedding_dim == 0
        {
            return Err(DatasetError::InvalidSpec("all counts must be >= 1"));
        }
        if self.patches_min > self.patches_max {
            return Err(DatasetError::InvalidSpec("patches_min > patches_max"));
        }
        if !(self.class_separation >= 0.0) {
            return Err(DatasetError::InvalidSpec("class_separation must be >= 0"));
        }
        if !(self.noise_scale > 0.0) {
            return Err(DatasetError::InvalidSpec("noise_scale must be > 0"));
        }
        Ok(())
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 4,
            slides_per_class: 25,
            patches_min: 20,
            patches_max: 40,
            embedding_dim: 32,
            class_separation: 10.0,
            noise_scale: 1.0,
            seed: 42,
        }
    }
}

/// An in-memory generated dataset: class names plus one patch set per slide.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub name: String,
    pub class_names: Vec<String>,
    pub embedding_dim: usize,
    pub slides: Vec<PatchSet>,
}

/// Generates the synthetic dataset. Identical specs produce bit-identical
/// datasets: all randomness flows through one seeded stream in fixed order.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset, DatasetError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.embedding_dim;

    // Two component means per class, at distance class_separation from the
    // origin along random unit directions.
    let mut component_means: Vec<[Vec<f64>; 2]> = Vec::with_capacity(spec.num_classes);
    for _ in 0..spec.num_classes {
        let mut comps: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for comp in comps.iter_mut() {
            let mut dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = mathx::sqrt(dir.iter().map(|v| v * v).sum());
            if norm < 1e-12 {
                dir = core::iter::once(1.0).chain(core::iter::repeat(0.0)).take(d).collect();
            } else {
                for v in dir.iter_mut() {
                    *v /= norm;
                }
            }
            *comp = dir.iter().map(|v| v * spec.class_separation).collect();
        }
        component_means.push(comps);
    }

    let mut slides = Vec::with_capacity(spec.num_classes * spec.slides_per_class);
    for class in 0..spec.num_classes {
        for s in 0..spec.slides_per_class {
            let n = rng.random_range(spec.patches_min..=spec.patches_max);
            let mut data = Vec::with_capacity(n * d);
            for _ in 0..n {
                let comp = rng.random_range(0..2usize);
                let mean = &component_means[class][comp];
                for m in mean.iter() {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    data.push((m + spec.noise_scale * eps) as f32);
                }
            }
            let id = format!("syn_c{class}_s{s}");
            slides.push(PatchSet::new(id, class, n, d, data)?);
        }
    }

    Ok(SyntheticDataset {
        name: "synthetic".to_string(),
        class_names: (0..spec.num_classes).map(|c| format!("class_{c}")).collect(),
        embedding_dim: d,
        slides,
    })
}

/// Deterministic assignment of slides to the five cross-validation folds,
/// stratified by class.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldPlan {
    pub seed: u64,
    fold_of: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, slide_id: &str) -> Option<usize> {
        self.fold_of.get(slide_id).copied()
    }

    pub fn len(&self) -> usize {
        self.fold_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fold_of.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.fold_of.iter().map(|(id, &f)| (id.as_str(), f))
    }

    /// Splits slide indices into (train, test) for fold `fold`.
    pub fn split<'a>(
        &self,
        slides: &'a [PatchSet],
        fold: usize,
    ) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, s) in slides.iter().enumerate() {
            match self.fold_of(s.slide_id()) {
                Some(f) if f == fold => test.push(i),
                Some(_) => train.push(i),
                None => {}
            }
        }
        (train, test)
    }
}

/// Stratified 5-fold split. Within each class, slides are shuffled under the
/// seed and dealt round-robin, so per-class fold sizes differ by at most one.
/// Classes with fewer than five slides are still dealt round-robin (some
/// folds get none) with a warning.
pub fn make_folds<'a, I>(entries: I, seed: u64) -> Result<FoldPlan, DatasetError>
where
    I: IntoIterator<Item = (&'a str, usize)>,
{
    let mut by_class: BTreeMap<usize, Vec<&'a str>> = BTreeMap::new();
    let mut total = 0usize;
    for (id, label) in entries {
        by_class.entry(label).or_default().push(id);
        total += 1;
    }
    if total == 0 {
        return Err(DatasetError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = BTreeMap::new();
    for (&label, ids) in by_class.iter_mut() {
        if ids.len() < NUM_FOLDS {
            log::warn!(
                "class {label} has only {} slides; some folds will not contain it",
                ids.len()
            );
        }
        ids.shuffle(&mut rng);
        let offset = label % NUM_FOLDS;
        for (i, id) in ids.iter().enumerate() {
            fold_of.insert(id.to_string(), (i + offset) % NUM_FOLDS);
        }
    }
    Ok(FoldPlan { seed, fold_of })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 2,
            slides_per_class: 10,
            patches_min: 3,
            patches_max: 6,
            embedding_dim: 8,
            class_separation: 4.0,
            noise_scale: 1.0,
            seed: 7,
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(&spec()).unwrap();
        let b = generate_synthetic(&spec()).unwrap();
        assert_eq!(a.slides.len(), b.slides.len());
        for (x, y) in a.slides.iter().zip(b.slides.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn synthetic_counts_and_labels() {
        let ds = generate_synthetic(&spec()).unwrap();
        assert_eq!(ds.slides.len(), 20);
        assert_eq!(ds.class_names.len(), 2);
        for s in &ds.slides {
            assert!(s.label() < 2);
            assert!(s.n_patches() >= 3 && s.n_patches() <= 6);
            assert_eq!(s.dim(), 8);
        }
    }

    #[test]
    fn zero_separation_classes_indistinguishable() {
        // Monte-Carlo: with no separation the two classes' mean-pooled
        // embeddings agree within 3 standard errors per coordinate mean.
        let mut s = spec();
        s.class_separation = 0.0;
        s.slides_per_class = 50;
        s.seed = 3;
        let ds = generate_synthetic(&s).unwrap();
        let mean_pool = |p: &PatchSet| -> Vec<f64> {
            let mut m = alloc::vec![0.0; p.dim()];
            for row in p.patches() {
                for (acc, &v) in m.iter_mut().zip(row) {
                    *acc += v as f64;
                }
            }
            m.iter().map(|v| v / p.n_patches() as f64).collect()
        };
        // Grand mean of pooled embeddings per class, first coordinate.
        let stats = |label: usize| -> (f64, f64, usize) {
            let vals: Vec<f64> = ds
                .slides
                .iter()
                .filter(|p| p.label() == label)
                .map(|p| mean_pool(p)[0])
                .collect();
            let n = vals.len();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            (mean, var, n)
        };
        let (m0, v0, n0) = stats(0);
        let (m1, v1, n1) = stats(1);
        let se = (v0 / n0 as f64 + v1 / n1 as f64).sqrt();
        assert!((m0 - m1).abs() < 3.0 * se, "diff {} se {}", m0 - m1, se);
    }

    #[test]
    fn folds_balanced_when_divisible() {
        let ds = generate_synthetic(&spec()).unwrap();
        let plan = make_folds(
            ds.slides.iter().map(|s| (s.slide_id(), s.label())),
            1,
        )
        .unwrap();
        // 10 slides per class over 5 folds: exactly 2 per fold per class,
        // i.e. 1 per (fold, class) would need 5 per class; here 10 -> 2.
        for fold in 0..NUM_FOLDS {
            for class in 0..2 {
                let count = ds
                    .slides
                    .iter()
                    .filter(|s| s.label() == class && plan.fold_of(s.slide_id()) == Some(fold))
                    .count();
                assert_eq!(count, 2);
            }
        }
    }

    #[test]
    fn folds_deterministic() {
        let ds = generate_synthetic(&spec()).unwrap();
        let entries: Vec<(&str, usize)> =
            ds.slides.iter().map(|s| (s.slide_id(), s.label())).collect();
        let a = make_folds(entries.iter().copied(), 9).unwrap();
        let b = make_folds(entries.iter().copied(), 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seven_slides_fold_sizes() {
        let ids: Vec<String> = (0..7).map(|i| format!("s{i}")).collect();
        let plan = make_folds(ids.iter().map(|s| (s.as_str(), 0usize)), 4).unwrap();
        let mut sizes = [0usize; NUM_FOLDS];
        for (_, f) in plan.iter() {
            sizes[f] += 1;
        }
        let mut sorted = sizes;
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sorted, [2, 2, 1, 1, 1]);
    }

    #[test]
    fn empty_dataset_rejected() {
        let res = make_folds(core::iter::empty::<(&str, usize)>(), 0);
        assert_eq!(res.unwrap_err(), DatasetError::Empty);
    }

    #[test]
    fn patch_set_rejects_bad_input() {
        assert!(matches!(
            PatchSet::new("a", 0, 0, 4, alloc::vec![]),
            Err(DatasetError::EmptyPatchSet { .. })
        ));
        assert!(matches!(
            PatchSet::new("a", 0, 2, 2, alloc::vec![1.0, f32::NAN, 0.0, 0.0]),
            Err(DatasetError::NonFinite { .. })
        ));
        assert!(matches!(
            PatchSet::new("a", 0, 2, 2, alloc::vec![1.0]),
            Err(DatasetError::BadShape { .. })
        ));
    }

    proptest! {
        #[test]
        fn folds_partition_slides(n_slides in 1usize..60, n_classes in 1usize..5, seed in 0u64..100) {
            let ids: Vec<String> = (0..n_slides).map(|i| format!("s{i}")).collect();
            let entries: Vec<(&str, usize)> = ids
                .iter()
                .enumerate()
                .map(|(i, s)| (s.as_str(), i % n_classes))
                .collect();
            let plan = make_folds(entries.iter().copied(), seed).unwrap();
            // Every slide assigned exactly once, folds within range.
            prop_assert_eq!(plan.len(), n_slides);
            for (_, f) in plan.iter() {
                prop_assert!(f < NUM_FOLDS);
            }
        }
    }
}
