//! Labeled image sets: ingestion, the on-disk format, preprocessing,
//! stratified splitting and a synthetic generator.

mod folder;
mod imds;
mod synth;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::resample::FeatureMatrix;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub use folder::{load_image_folder, FolderLoad, LoadOptions};
pub use imds::{read_imds, write_imds, IMDS_MAGIC, IMDS_VERSION};
pub use synth::{synth_dataset, Pattern, SynthSpec};

/// Class names of the four dementia stages, in label order.
pub const CLASS_NAMES: [&str; 4] = ["NOD", "VMD", "MD", "MOD"];

/// Images `[N,H,W,C]` with one integer label each.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl LabeledImageSet {
    pub fn new(images: Tensor, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(shape_err!("images must be [N,H,W,C], got {:?}", images.shape()));
        }
        if images.shape()[0] != labels.len() {
            return Err(shape_err!("{} images but {} labels", images.shape()[0], labels.len()));
        }
        if class_names.is_empty() {
            return Err(invalid!("a dataset needs at least one class"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {} classes",
                class_names.len()
            )));
        }
        Ok(Self {
            images,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// `[H, W, C]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Image `i` as `[H, W, C]`.
    pub fn image(&self, i: usize) -> Result<Tensor> {
        let [h, w, c] = self.image_shape();
        self.images.select_outer(&[i])?.reshape([h, w, c])
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.select_outer(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
        })
    }
}

/// Rows of `[N, n_classes]` with a single 1 at each label.
///
/// ```
/// let t = admri::data::one_hot(&[2], 4).unwrap();
/// assert_eq!(t.data(), &[0.0, 0.0, 1.0, 0.0]);
/// ```
pub fn one_hot(labels: &[usize], n_classes: usize) -> Result<Tensor> {
    if labels.is_empty() || n_classes == 0 {
        return Err(invalid!("one_hot needs labels and at least one class"));
    }
    let mut data = vec![0.0; labels.len() * n_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= n_classes {
            return Err(Error::Data(format!("label {l} out of range for {n_classes} classes")));
        }
        data[i * n_classes + l] = 1.0;
    }
    Tensor::new([labels.len(), n_classes], data)
}

/// Divide by 255 if any value exceeds 1, mapping 8-bit intensities onto
/// `[0, 1]`. Already-scaled data passes through unchanged.
pub fn rescale(images: &Tensor) -> Tensor {
    let max = images.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max > 1.0 {
        images.map(|v| v / 255.0)
    } else {
        images.clone()
    }
}

/// One row per image.
pub fn flatten(ds: &LabeledImageSet) -> FeatureMatrix {
    let cols = ds.images.numel() / ds.len().max(1);
    FeatureMatrix::new(ds.len(), cols, ds.images.data().to_vec()).expect("consistent dataset")
}

pub fn unflatten(
    x: &FeatureMatrix,
    labels: Vec<usize>,
    class_names: Vec<String>,
    image_shape: [usize; 3],
) -> Result<LabeledImageSet> {
    let [h, w, c] = image_shape;
    if h * w * c != x.cols() {
        return Err(shape_err!("{} features cannot form {h}x{w}x{c} images", x.cols()));
    }
    let images = Tensor::new([x.rows(), h, w, c], x.data().to_vec())?;
    LabeledImageSet::new(images, labels, class_names)
}

/// Split fractions. Two-way splits hold out a single test part.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitSpec {
    TwoWay { train: f64, test: f64 },
    ThreeWay { train: f64, val: f64, test: f64 },
}

impl SplitSpec {
    pub fn two_way(train: f64) -> Self {
        SplitSpec::TwoWay {
            train,
            test: 1.0 - train,
        }
    }

    pub fn three_way(train: f64, val: f64, test: f64) -> Self {
        SplitSpec::ThreeWay { train, val, test }
    }

    fn fractions(&self) -> (f64, f64, f64) {
        match *self {
            SplitSpec::TwoWay { train, test } => (train, 0.0, test),
            SplitSpec::ThreeWay { train, val, test } => (train, val, test),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (tr, va, te) = self.fractions();
        let three = matches!(self, SplitSpec::ThreeWay { .. });
        if !(tr > 0.0) || !(te > 0.0) || (three && !(va > 0.0)) {
            return Err(invalid!(
                "every split fraction must be > 0; use a two-way split for train/test only"
            ));
        }
        if ((tr + va + te) - 1.0).abs() > 1e-9 {
            return Err(invalid!("split fractions sum to {}, not 1", tr + va + te));
        }
        Ok(())
    }

    pub fn parts(&self) -> usize {
        match self {
            SplitSpec::TwoWay { .. } => 2,
            SplitSpec::ThreeWay { .. } => 3,
        }
    }
}

impl std::str::FromStr for SplitSpec {
    type Err = Error;

    /// `"0.8,0.2"` or `"0.6,0.2,0.2"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| invalid!("bad split {s:?}: {e}"))?;
        let spec = match parts[..] {
            [train, test] => SplitSpec::TwoWay { train, test },
            [train, val, test] => SplitSpec::ThreeWay { train, val, test },
            _ => return Err(invalid!("split needs 2 or 3 fractions, got {s:?}")),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Sorted index lists of a split; `val` is empty for two-way splits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-class shuffled split. Each class contributes `round(n * fraction)`
/// samples to the validation and test parts (at least one each) and the
/// rest to training.
pub fn stratified_split(labels: &[usize], n_classes: usize, spec: &SplitSpec, seed: u64) -> Result<SplitIndices> {
    spec.validate()?;
    let (_, f_val, f_test) = spec.fractions();
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let too_small: Vec<String> = (0..n_classes)
        .filter(|c| by_class.get(c).map_or(0, |v| v.len()) < spec.parts())
        .map(|c| format!("{c} ({} samples)", by_class.get(&c).map_or(0, |v| v.len())))
        .collect();
    if !too_small.is_empty() {
        return Err(Error::Data(format!(
            "classes too small for a {}-way split: {}",
            spec.parts(),
            too_small.join(", ")
        )));
    }
    let root = SeededRng::new(seed);
    let mut out = SplitIndices {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (class, mut idx) in by_class {
        let n = idx.len();
        root.fork(&format!("split/{class}")).shuffle(&mut idx);
        let mut n_test = ((n as f64 * f_test).round() as usize).max(1);
        let mut n_val = if f_val > 0.0 {
            ((n as f64 * f_val).round() as usize).max(1)
        } else {
            0
        };
        while n_test + n_val >= n {
            if n_val > 1 && n_val >= n_test {
                n_val -= 1;
            } else {
                n_test -= 1;
            }
        }
        out.test.extend_from_slice(&idx[..n_test]);
        out.val.extend_from_slice(&idx[n_test..n_test + n_val]);
        out.train.extend_from_slice(&idx[n_test + n_val..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}
