//! Labeled datasets, synthetic Gaussian blobs, and class-wise perturbations.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure_len, Error, Result};
use crate::nn::hex_string;
use crate::rng;

/// Row-major samples in `[0, 1]^{N x I}` with labels in `0..K`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    samples: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    classes: usize,
    domain_id: String,
    seed: u64,
}

impl LabeledDataset {
    pub fn new(
        samples: Vec<f64>,
        labels: Vec<usize>,
        dim: usize,
        classes: usize,
        domain_id: impl Into<String>,
        seed: u64,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if dim == 0 || classes < 2 {
            return Err(Error::config("datasets need dim >= 1 and at least two classes"));
        }
        if classes > u16::MAX as usize {
            return Err(Error::config("class count exceeds u16 label range"));
        }
        ensure_len("sample matrix", labels.len() * dim, samples.len())?;
        if samples.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::config("sample entries must lie in [0, 1]"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::config(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            samples,
            labels,
            dim,
            classes,
            domain_id: domain_id.into(),
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn domain_id(&self) -> &str {
        &self.domain_id
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }

    /// Copies the given rows into a contiguous batch.
    pub fn gather(&self, idx: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut x = Vec::with_capacity(idx.len() * self.dim);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(self.row(i));
            y.push(self.labels[i]);
        }
        (x, y)
    }

    pub fn subset(&self, idx: &[usize]) -> Result<LabeledDataset> {
        let (x, y) = self.gather(idx);
        LabeledDataset::new(x, y, self.dim, self.classes, self.domain_id.clone(), self.seed)
    }

    /// Deterministic stratified split; the first part holds roughly
    /// `fraction` of every class.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::config("split fraction must lie in (0, 1)"));
        }
        let mut first = Vec::new();
        let mut second = Vec::new();
        for class in 0..self.classes {
            let members: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            if members.is_empty() {
                continue;
            }
            let perm = rng::permutation(&mut rng::substream(seed, class as u64), members.len());
            let take = ((members.len() as f64 * fraction).round() as usize).clamp(1, members.len());
            for (j, &p) in perm.iter().enumerate() {
                if j < take {
                    first.push(members[p]);
                } else {
                    second.push(members[p]);
                }
            }
        }
        first.sort_unstable();
        second.sort_unstable();
        if second.is_empty() {
            return Err(Error::config("split leaves the second part empty"));
        }
        Ok((self.subset(&first)?, self.subset(&second)?))
    }

    /// Number of samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// SHA-256 over shape, samples and labels, hex encoded.
    pub fn digest_hex(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_le_bytes());
        h.update((self.dim as u64).to_le_bytes());
        h.update((self.classes as u64).to_le_bytes());
        for v in &self.samples {
            h.update(v.to_le_bytes());
        }
        for &y in &self.labels {
            h.update((y as u16).to_le_bytes());
        }
        hex_string(&h.finalize())
    }

    /// Identifies the domain and shape a perturbation table is valid for.
    pub fn domain_hash(&self) -> u64 {
        domain_hash(&self.domain_id, self.classes, self.dim)
    }
}

pub(crate) fn domain_hash(domain_id: &str, classes: usize, dim: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(domain_id.as_bytes());
    h.update((classes as u64).to_le_bytes());
    h.update((dim as u64).to_le_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

/// Isotropic Gaussian clusters around random centers.
///
/// Centers are drawn uniformly from `0.5 ± center_spread` per coordinate;
/// samples add `N(0, spread^2)` noise and are clipped to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    #[serde(default = "BlobSpec::default_test_per_class")]
    pub test_per_class: usize,
    pub spread: f64,
    #[serde(default = "BlobSpec::default_center_spread")]
    pub center_spread: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 64,
            train_per_class: 200,
            test_per_class: Self::default_test_per_class(),
            spread: 0.08,
            center_spread: Self::default_center_spread(),
            seed: 0,
        }
    }
}

impl BlobSpec {
    fn default_test_per_class() -> usize {
        100
    }

    fn default_center_spread() -> f64 {
        0.07
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim < 2 {
            return Err(Error::config("blob spec needs K >= 2 and I >= 2"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::config("blob spec needs samples in both splits"));
        }
        if !(self.spread >= 0.0 && self.spread.is_finite()) {
            return Err(Error::config("cluster spread must be a nonnegative number"));
        }
        if !(0.0..=0.5).contains(&self.center_spread) {
            return Err(Error::config("center spread must lie in [0, 0.5]"));
        }
        Ok(())
    }

    pub fn domain_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&(self.classes, self.dim, self.spread, self.center_spread, self.seed)).unwrap());
        format!("blobs-{}", &hex_string(&h.finalize())[..16])
    }
}

const CENTER_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

/// Generates disjoint train and test splits from the same blob distribution.
pub fn make_blobs(spec: &BlobSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    spec.validate()?;
    let mut crng = rng::substream(spec.seed, CENTER_STREAM);
    let centers: Vec<f64> = (0..spec.classes * spec.dim)
        .map(|_| 0.5 + spec.center_spread * (2.0 * crng.random::<f64>() - 1.0))
        .collect();
    let domain = spec.domain_id();
    let draw = |stream: u64, per_class: usize| {
        let mut r = rng::substream(spec.seed, stream);
        let mut x = Vec::with_capacity(per_class * spec.classes * spec.dim);
        let mut y = Vec::with_capacity(per_class * spec.classes);
        let mut noise = vec![0.0; spec.dim];
        for _ in 0..per_class {
            for class in 0..spec.classes {
                rng::fill_gaussian(&mut r, &mut noise, spec.spread);
                let center = &centers[class * spec.dim..(class + 1) * spec.dim];
                x.extend(center.iter().zip(&noise).map(|(c, n)| (c + n).clamp(0.0, 1.0)));
                y.push(class);
            }
        }
        LabeledDataset::new(x, y, spec.dim, spec.classes, domain.clone(), spec.seed)
    };
    Ok((draw(TRAIN_STREAM, spec.train_per_class)?, draw(TEST_STREAM, spec.test_per_class)?))
}

/// Class-wise additive noise table `delta[K][I]` bounded by `budget` in l-inf.
#[derive(Clone, Debug, PartialEq)]
pub struct ClasswisePerturbation {
    rows: Vec<f64>,
    classes: usize,
    dim: usize,
    budget: f64,
}

impl ClasswisePerturbation {
    pub fn zeros(classes: usize, dim: usize, budget: f64) -> Result<Self> {
        Self::new(vec![0.0; classes * dim], classes, dim, budget)
    }

    pub fn new(rows: Vec<f64>, classes: usize, dim: usize, budget: f64) -> Result<Self> {
        if !(budget > 0.0 && budget.is_finite()) {
            return Err(Error::config("perturbation budget must be positive"));
        }
        ensure_len("perturbation table", classes * dim, rows.len())?;
        if rows.iter().any(|v| !v.is_finite() || v.abs() > budget) {
            return Err(Error::config("perturbation entry outside the l-inf budget"));
        }
        Ok(Self {
            rows,
            classes,
            dim,
            budget,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.rows[class * self.dim..(class + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.rows
    }

    pub fn max_abs(&self) -> f64 {
        self.rows.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Moves `row(class)` by `step` and clips it back into the budget.
    pub(crate) fn step_row(&mut self, class: usize, step: impl Fn(usize) -> f64) {
        let budget = self.budget;
        for (i, v) in self.rows[class * self.dim..(class + 1) * self.dim].iter_mut().enumerate() {
            *v = (*v + step(i)).clamp(-budget, budget);
        }
    }

    /// `clip(x + delta[y])` for a gathered batch.
    pub fn apply_to_batch(&self, x: &[f64], y: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        for (sample, &label) in x.chunks(self.dim).zip(y) {
            out.extend(sample.iter().zip(self.row(label)).map(|(a, d)| (a + d).clamp(0.0, 1.0)));
        }
        out
    }
}

/// `x + delta[y]` clipped to `[0, 1]` for every sample; labels unchanged.
pub fn apply_perturbation(data: &LabeledDataset, delta: &ClasswisePerturbation) -> Result<LabeledDataset> {
    ensure_len("perturbation classes", data.classes(), delta.classes())?;
    ensure_len("perturbation width", data.dim(), delta.dim())?;
    let samples = delta.apply_to_batch(data.samples(), data.labels());
    Ok(LabeledDataset {
        samples,
        labels: data.labels.clone(),
        dim: data.dim,
        classes: data.classes,
        domain_id: data.domain_id.clone(),
        seed: data.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_spec() -> BlobSpec {
        BlobSpec {
            classes: 4,
            dim: 6,
            train_per_class: 50,
            test_per_class: 20,
            spread: 0.05,
            center_spread: 0.2,
            seed: 3,
        }
    }

    #[test]
    fn blob_shapes() {
        let (train, test) = make_blobs(&small_spec()).unwrap();
        assert_eq!(train.len(), 200);
        assert_eq!(test.len(), 80);
        assert_eq!(train.class_counts(), vec![50; 4]);
        assert!(train.samples().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(train.digest_hex(), test.digest_hex());
        assert_eq!(make_blobs(&small_spec()).unwrap().0, train);
    }

    #[test]
    fn zero_spread_collapses_to_centers() {
        let (train, _) = make_blobs(&BlobSpec { spread: 0.0, ..small_spec() }).unwrap();
        for i in 0..train.len() {
            let first = train.labels().iter().position(|&y| y == train.labels()[i]).unwrap();
            assert_eq!(train.row(i), train.row(first));
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(make_blobs(&BlobSpec { classes: 1, ..small_spec() }).is_err());
        assert!(make_blobs(&BlobSpec { dim: 1, ..small_spec() }).is_err());
    }

    #[test]
    fn zero_perturbation_is_identity_and_clip_saturates() {
        let (train, _) = make_blobs(&small_spec()).unwrap();
        let zero = ClasswisePerturbation::zeros(4, 6, 8.0 / 255.0).unwrap();
        assert_eq!(apply_perturbation(&train, &zero).unwrap(), train);

        let data = LabeledDataset::new(vec![0.99, 0.5], vec![0], 2, 2, "t", 0).unwrap();
        let delta = ClasswisePerturbation::new(vec![0.05, 0.0, 0.0, 0.0], 2, 2, 0.05).unwrap();
        let out = apply_perturbation(&data, &delta).unwrap();
        assert_eq!(out.row(0), &[1.0, 0.5]);
    }

    #[test]
    fn mismatched_class_count_is_an_error() {
        let (train, _) = make_blobs(&small_spec()).unwrap();
        let delta = ClasswisePerturbation::zeros(3, 6, 0.1).unwrap();
        assert!(matches!(apply_perturbation(&train, &delta), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn budget_violations_rejected() {
        assert!(ClasswisePerturbation::new(vec![0.2, 0.0], 1, 2, 0.1).is_err());
    }

    #[test]
    fn stratified_split_keeps_every_class() {
        let (train, _) = make_blobs(&small_spec()).unwrap();
        let (a, b) = train.split(0.2, 1).unwrap();
        assert_eq!(a.class_counts(), vec![10; 4]);
        assert_eq!(b.class_counts(), vec![40; 4]);
    }

    proptest! {
        #[test]
        fn perturbation_changes_only_by_delta_or_clip(seed in 0u64..500, budget in 0.001f64..0.2) {
            let spec = BlobSpec { seed, ..small_spec() };
            let (train, _) = make_blobs(&spec).unwrap();
            let mut r = rng::substream(seed, 77);
            let rows: Vec<f64> = (0..4 * 6).map(|_| budget * (2.0 * r.random::<f64>() - 1.0)).collect();
            let delta = ClasswisePerturbation::new(rows, 4, 6, budget).unwrap();
            let out = apply_perturbation(&train, &delta).unwrap();
            prop_assert_eq!(out.labels(), train.labels());
            prop_assert_eq!(out.len(), train.len());
            for i in 0..train.len() {
                let y = train.labels()[i];
                for ((o, x), d) in out.row(i).iter().zip(train.row(i)).zip(delta.row(y)) {
                    let raw = x + d;
                    prop_assert!((0.0..=1.0).contains(o));
                    prop_assert!((o - raw).abs() <= budget + 1e-15);
                    if (0.0..=1.0).contains(&raw) {
                        prop_assert_eq!(*o, raw);
                    } else {
                        prop_assert_eq!(*o, raw.clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
}
