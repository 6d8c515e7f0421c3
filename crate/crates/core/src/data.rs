//! Seeded two-modality Gaussian-cluster datasets and the stratified subset
//! sampler.
//!
//! Each modality has its own set of class means: `M` orthonormal directions
//! (Gram-Schmidt on a seeded Gaussian matrix) scaled so that every pair of
//! means sits `separation` apart. Samples are `mean + σ·N(0, I)`.
//!
//! Two scenarios:
//!
//! * `dominant`: both modalities follow the label; modality 0 has low noise
//!   and is learned first, modality 1 is noisier.
//! * `spurious`: modality 1 follows the label in both splits. Modality 0 sits
//!   on the label's cluster for a fraction `q` of each class and on a
//!   uniformly drawn *other* class's cluster otherwise, with `q_train` high
//!   and `q_test = 1/M` (no information at test time).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::{stream, SeededRng};
use crate::tensor::{dot, Tensor2D};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Scenario {
    #[default]
    Dominant,
    Spurious,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Dominant => "dominant",
            Scenario::Spurious => "spurious",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dominant" => Ok(Scenario::Dominant),
            "spurious" => Ok(Scenario::Spurious),
            _ => Err(Error::invalid(format!("unknown scenario `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Split {
    #[default]
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub scenario: Scenario,
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub dim0: usize,
    pub dim1: usize,
    pub sigma0: f64,
    pub sigma1: f64,
    /// Distance between any two class means of the same modality.
    pub separation: f64,
    /// Probability that modality 0 follows the label (spurious scenario).
    pub q_train: f64,
    pub q_test: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            scenario: Scenario::Dominant,
            num_classes: 6,
            train_per_class: 500,
            test_per_class: 100,
            dim0: 20,
            dim1: 20,
            sigma0: 0.3,
            sigma1: 1.5,
            separation: 4.0,
            q_train: 0.95,
            q_test: 1.0 / 6.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    /// Defaults for `scenario`. The spurious scenario gives the label-carrying
    /// modality 1 less noise (`σ₁ = 1.0`) than the dominant one.
    pub fn for_scenario(scenario: Scenario) -> Self {
        match scenario {
            Scenario::Dominant => Self::default(),
            Scenario::Spurious => Self {
                scenario,
                sigma1: 1.0,
                ..Self::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        if self.dim0 < 2 || self.dim1 < 2 {
            return Err(Error::invalid("modality dims must be at least 2"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::invalid("every class needs samples in both splits"));
        }
        for (name, v) in [
            ("sigma0", self.sigma0),
            ("sigma1", self.sigma1),
            ("separation", self.separation),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, q) in [("q_train", self.q_train), ("q_test", self.q_test)] {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1], got {q}")));
            }
        }
        Ok(())
    }
}

/// Row-aligned paired samples.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalDataset {
    pub x0: Tensor2D,
    pub x1: Tensor2D,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl MultimodalDataset {
    pub fn new(
        x0: Tensor2D,
        x1: Tensor2D,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if x0.rows() != labels.len() || x1.rows() != labels.len() {
            return Err(Error::shape(
                "MultimodalDataset",
                labels.len(),
                format!("{} / {}", x0.rows(), x1.rows()),
            ));
        }
        let ds = Self {
            x0,
            x1,
            labels,
            num_classes,
            split,
        };
        if let Some(k) = ds.class_counts()?.iter().position(|&c| c == 0) {
            return Err(Error::MissingClass(k));
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Result<Vec<usize>> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            if y >= self.num_classes {
                return Err(Error::invalid(format!(
                    "label {y} out of range for {} classes",
                    self.num_classes
                )));
            }
            counts[y] += 1;
        }
        Ok(counts)
    }

    /// Rows at `indices`, as plain tensors.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor2D, Tensor2D, Vec<usize>)> {
        let x0 = self.x0.select_rows(indices)?;
        let x1 = self.x1.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x0, x1, labels))
    }

    pub fn modality(&self, m: usize) -> &Tensor2D {
        if m == 0 {
            &self.x0
        } else {
            &self.x1
        }
    }
}

/// `M` rows, pairwise `separation` apart. Orthonormal directions when
/// `dim ≥ M`; with fewer dimensions the extra rows are random unit vectors
/// and the spacing is only approximate.
fn class_means(num_classes: usize, dim: usize, separation: f64, rng: &mut SeededRng) -> Tensor2D {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    while basis.len() < num_classes {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        if basis.len() < dim {
            for b in &basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, bx)| *x -= p * bx);
            }
        }
        let norm = libm::sqrt(dot(&v, &v));
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    let scale = separation / core::f64::consts::SQRT_2;
    let rows: Vec<Vec<f64>> = basis
        .into_iter()
        .map(|v| v.into_iter().map(|x| x * scale).collect())
        .collect();
    Tensor2D::from_rows(&rows).expect("finite means")
}

fn draw(means: &Tensor2D, clusters: &[usize], sigma: f64, rng: &mut SeededRng) -> Tensor2D {
    let mut x = Tensor2D::zeros(clusters.len(), means.cols());
    for (i, &k) in clusters.iter().enumerate() {
        for (v, &mu) in x.row_mut(i).iter_mut().zip(means.row(k)) {
            *v = mu + sigma * rng.normal();
        }
    }
    x
}

fn balanced_labels(num_classes: usize, per_class: usize) -> Vec<usize> {
    (0..num_classes)
        .flat_map(|k| core::iter::repeat(k).take(per_class))
        .collect()
}

/// Cluster index for modality 0 in the spurious scenario: the label for
/// `round(q·N_k)` rows of each class, another class otherwise.
fn spurious_clusters(
    labels: &[usize],
    num_classes: usize,
    per_class: usize,
    q: f64,
    rng: &mut SeededRng,
) -> Vec<usize> {
    let aligned = libm::round(q * per_class as f64) as usize;
    let mut out = Vec::with_capacity(labels.len());
    for k in 0..num_classes {
        let mut follow: Vec<bool> = (0..per_class).map(|j| j < aligned).collect();
        rng.shuffle(&mut follow);
        for f in follow {
            if f {
                out.push(k);
            } else {
                let other = rng.below(num_classes - 1);
                out.push(if other >= k { other + 1 } else { other });
            }
        }
    }
    debug_assert_eq!(out.len(), labels.len());
    out
}

fn generate(spec: &DatasetSpec) -> Result<(MultimodalDataset, MultimodalDataset)> {
    spec.validate()?;
    let m = spec.num_classes;
    let mut means_rng = SeededRng::with_stream(spec.seed, stream::DATA_MEANS);
    let means0 = class_means(m, spec.dim0, spec.separation, &mut means_rng);
    let means1 = class_means(m, spec.dim1, spec.separation, &mut means_rng);

    let split = |per_class: usize, q: f64, which: Split, s: u64| -> Result<MultimodalDataset> {
        let mut rng = SeededRng::with_stream(spec.seed, s);
        let labels = balanced_labels(m, per_class);
        let clusters0 = match spec.scenario {
            Scenario::Dominant => labels.clone(),
            Scenario::Spurious => spurious_clusters(&labels, m, per_class, q, &mut rng),
        };
        let x0 = draw(&means0, &clusters0, spec.sigma0, &mut rng);
        let x1 = draw(&means1, &labels, spec.sigma1, &mut rng);
        MultimodalDataset::new(x0, x1, labels, m, which)
    };
    let train = split(spec.train_per_class, spec.q_train, Split::Train, stream::DATA_TRAIN)?;
    let test = split(spec.test_per_class, spec.q_test, Split::Test, stream::DATA_TEST)?;
    Ok((train, test))
}

/// Generates `(train, test)` for the dominant scenario.
pub fn gen_dominant(spec: &DatasetSpec) -> Result<(MultimodalDataset, MultimodalDataset)> {
    if spec.scenario != Scenario::Dominant {
        return Err(Error::invalid("gen_dominant needs scenario = dominant"));
    }
    generate(spec)
}

/// Generates `(train, test)` for the spurious scenario.
pub fn gen_spurious(spec: &DatasetSpec) -> Result<(MultimodalDataset, MultimodalDataset)> {
    if spec.scenario != Scenario::Spurious {
        return Err(Error::invalid("gen_spurious needs scenario = spurious"));
    }
    generate(spec)
}

/// Dispatches on `spec.scenario`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<(MultimodalDataset, MultimodalDataset)> {
    generate(spec)
}

/// Stratified sample without replacement: `round(fraction · N_k)` indices
/// from every class, returned in ascending order.
pub fn sample_subset(dataset: &MultimodalDataset, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("subset fraction {fraction} outside (0, 1]")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, &y) in dataset.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = SeededRng::with_stream(seed, stream::SUBSET);
    let mut out = Vec::new();
    for (k, members) in by_class.iter_mut().enumerate() {
        let take = libm::round(fraction * members.len() as f64) as usize;
        if take == 0 {
            return Err(Error::invalid(format!(
                "subset fraction {fraction} leaves class {k} ({} samples) empty",
                members.len()
            )));
        }
        rng.shuffle(members);
        out.extend_from_slice(&members[..take]);
    }
    out.sort_unstable();
    Ok(out)
}
