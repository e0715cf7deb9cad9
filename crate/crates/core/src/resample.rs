//! Class balancing: SMOTE oversampling followed by Tomek-link removal.
//!
//! Distances are Euclidean on flattened feature rows. Nearest-neighbour
//! ties go to the lowest index, so every result is a pure function of the
//! input and the plan's seed.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::rng::SeededRng;

/// Row-major `rows x cols` matrix of finite features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if cols == 0 || rows * cols != data.len() {
            return Err(shape_err!("{rows}x{cols} matrix cannot hold {} values", data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err!("ragged feature rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Which members of a Tomek link are dropped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LinkRemoval {
    /// Only members of majority classes (classes SMOTE did not grow).
    #[default]
    MajorityOnly,
    Both,
}

impl std::str::FromStr for LinkRemoval {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "majority_only" | "majority-only" => Ok(LinkRemoval::MajorityOnly),
            "both" => Ok(LinkRemoval::Both),
            _ => Err(invalid!("unknown link removal {s:?} (expected majority_only or both)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResamplePlan {
    pub k_neighbors: usize,
    /// Count every class is grown to; `None` means the largest class count.
    /// Classes already at or above the target are left as they are.
    pub target_count: Option<usize>,
    pub link_removal: LinkRemoval,
    pub seed: u64,
}

impl Default for ResamplePlan {
    fn default() -> Self {
        Self {
            k_neighbors: 5,
            target_count: None,
            link_removal: LinkRemoval::MajorityOnly,
            seed: 0,
        }
    }
}

fn class_members(y: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in y.iter().enumerate() {
        m.entry(l).or_default().push(i);
    }
    m
}

/// The `k` nearest rows to `x.row(i)` among `candidates` (excluding `i`),
/// nearest first, ties by lowest index.
pub fn k_nearest(x: &FeatureMatrix, i: usize, candidates: &[usize], k: usize) -> Vec<usize> {
    let xi = x.row(i);
    let mut d: Vec<(f64, usize)> = candidates
        .iter()
        .filter(|&&j| j != i)
        .map(|&j| (sq_dist(xi, x.row(j)), j))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.truncate(k);
    d.into_iter().map(|(_, j)| j).collect()
}

/// Grow every class to the plan's target with synthetic samples
/// `x_i + lambda (x_nn - x_i)`, `lambda ~ U(0,1)`, where `x_nn` is one of the
/// `k` nearest same-class neighbours of a uniformly chosen member `x_i`.
///
/// Originals come first, unchanged and in order; synthetic rows follow,
/// grouped by class.
pub fn smote(x: &FeatureMatrix, y: &[usize], plan: &ResamplePlan) -> Result<(FeatureMatrix, Vec<usize>)> {
    if x.rows() != y.len() {
        return Err(shape_err!("{} rows but {} labels", x.rows(), y.len()));
    }
    if plan.k_neighbors == 0 {
        return Err(invalid!("k_neighbors must be at least 1"));
    }
    let members = class_members(y);
    let target = match plan.target_count {
        Some(t) => t,
        None => members.values().map(Vec::len).max().unwrap_or(0),
    };
    let root = SeededRng::new(plan.seed);
    let mut data = x.data().to_vec();
    let mut labels = y.to_vec();
    for (&class, idx) in &members {
        let n_c = idx.len();
        if n_c >= target {
            continue;
        }
        if n_c == 1 {
            return Err(Error::Data(format!(
                "class {class} has a single sample; SMOTE needs at least two"
            )));
        }
        let k = plan.k_neighbors.min(n_c - 1);
        if k < plan.k_neighbors {
            log::warn!(
                "class {class} has {n_c} samples; using k = {k} instead of {}",
                plan.k_neighbors
            );
        }
        let mut rng = root.fork(&format!("smote/{class}"));
        let mut neighbours: HashMap<usize, Vec<usize>> = HashMap::new();
        for _ in 0..target - n_c {
            let base = idx[rng.index(n_c)];
            let pick = rng.index(k);
            let lambda = rng.uniform();
            let nn = neighbours.entry(base).or_insert_with(|| k_nearest(x, base, idx, k))[pick];
            let (xi, xn) = (x.row(base), x.row(nn));
            data.extend(xi.iter().zip(xn).map(|(a, b)| a + lambda * (b - a)));
            labels.push(class);
        }
    }
    let rows = labels.len();
    Ok((FeatureMatrix::new(rows, x.cols(), data)?, labels))
}

/// Nearest neighbour of every row (ties to the lowest index).
pub fn nearest_neighbours(x: &FeatureMatrix) -> Vec<usize> {
    (0..x.rows())
        .into_par_iter()
        .map(|i| {
            let xi = x.row(i);
            let mut best = (f64::INFINITY, usize::MAX);
            for j in 0..x.rows() {
                if j == i {
                    continue;
                }
                let d = sq_dist(xi, x.row(j));
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect()
}

/// Pairs `(a, b)`, `a < b`, of differently labelled rows that are each
/// other's nearest neighbour.
pub fn tomek_links(x: &FeatureMatrix, y: &[usize]) -> Result<BTreeSet<(usize, usize)>> {
    if x.rows() != y.len() {
        return Err(shape_err!("{} rows but {} labels", x.rows(), y.len()));
    }
    if x.rows() < 2 {
        return Err(invalid!("Tomek links need at least two samples"));
    }
    let nn = nearest_neighbours(x);
    Ok((0..x.rows())
        .filter(|&a| nn[a] > a && nn[nn[a]] == a && y[a] != y[nn[a]])
        .map(|a| (a, nn[a]))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResampleReport {
    pub classes: Vec<usize>,
    pub before: Vec<usize>,
    pub after_smote: Vec<usize>,
    pub after_tomek: Vec<usize>,
    pub links: BTreeSet<(usize, usize)>,
    /// Rows of the oversampled matrix dropped by link removal, ascending.
    pub removed: Vec<usize>,
}

impl ResampleReport {
    pub fn synthesized(&self) -> usize {
        self.after_smote.iter().sum::<usize>() - self.before.iter().sum::<usize>()
    }

    /// CSV with header `class,before,after_smote,after_tomek`; `names[c]`
    /// labels class `c` when given.
    pub fn write_csv(&self, names: &[String], w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["class", "before", "after_smote", "after_tomek"])
            .map_err(csv_err)?;
        for (i, &c) in self.classes.iter().enumerate() {
            let name = names.get(c).cloned().unwrap_or_else(|| c.to_string());
            out.write_record([
                name,
                self.before[i].to_string(),
                self.after_smote[i].to_string(),
                self.after_tomek[i].to_string(),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

fn counts(y: &[usize], classes: &[usize]) -> Vec<usize> {
    classes.iter().map(|c| y.iter().filter(|&&l| l == *c).count()).collect()
}

/// SMOTE, then removal of Tomek-link members according to the plan.
pub fn smote_tomek(
    x: &FeatureMatrix,
    y: &[usize],
    plan: &ResamplePlan,
) -> Result<(FeatureMatrix, Vec<usize>, ResampleReport)> {
    let (xs, ys) = smote(x, y, plan)?;
    let classes: Vec<usize> = class_members(y).into_keys().collect();
    let before = counts(y, &classes);
    let after_smote = counts(&ys, &classes);
    let majority: BTreeSet<usize> = classes
        .iter()
        .zip(before.iter().zip(&after_smote))
        .filter(|(_, (b, a))| a == b)
        .map(|(c, _)| *c)
        .collect();
    let links = if classes.len() >= 2 {
        tomek_links(&xs, &ys)?
    } else {
        BTreeSet::new()
    };
    let mut removed = BTreeSet::new();
    for &(a, b) in &links {
        for i in [a, b] {
            if plan.link_removal == LinkRemoval::Both || majority.contains(&ys[i]) {
                removed.insert(i);
            }
        }
    }
    let keep: Vec<usize> = (0..xs.rows()).filter(|i| !removed.contains(i)).collect();
    let xk = xs.select(&keep);
    let yk: Vec<usize> = keep.iter().map(|&i| ys[i]).collect();
    let report = ResampleReport {
        after_tomek: counts(&yk, &classes),
        classes,
        before,
        after_smote,
        links,
        removed: removed.into_iter().collect(),
    };
    Ok((xk, yk, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(per: &[usize], seed: u64) -> (FeatureMatrix, Vec<usize>) {
        let mut rng = SeededRng::new(seed);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for (c, &n) in per.iter().enumerate() {
            for _ in 0..n {
                rows.push(vec![c as f64 + 0.4 * rng.normal(), 0.4 * rng.normal()]);
                y.push(c);
            }
        }
        (FeatureMatrix::from_rows(&rows).unwrap(), y)
    }

    #[test]
    fn balanced_input_unchanged() {
        let (x, y) = blobs(&[10, 10], 1);
        let (xs, ys) = smote(&x, &y, &ResamplePlan::default()).unwrap();
        assert_eq!((xs, ys), (x, y));
    }

    #[test]
    fn reaches_target_and_keeps_originals() {
        let (x, y) = blobs(&[30, 7, 3], 2);
        let (xs, ys) = smote(&x, &y, &ResamplePlan::default()).unwrap();
        for c in 0..3 {
            assert_eq!(ys.iter().filter(|&&l| l == c).count(), 30);
        }
        assert_eq!(&xs.data()[..x.data().len()], x.data());
    }

    #[test]
    fn singleton_class_is_an_error() {
        let (x, y) = blobs(&[5, 1], 3);
        assert!(matches!(smote(&x, &y, &ResamplePlan::default()), Err(Error::Data(_))));
    }

    #[test]
    fn separated_clusters_have_no_links() {
        let rows = vec![vec![0.0], vec![0.1], vec![10.0], vec![10.2]];
        let x = FeatureMatrix::from_rows(&rows).unwrap();
        assert!(tomek_links(&x, &[0, 0, 0, 0]).unwrap().is_empty());
        assert!(tomek_links(&x, &[0, 0, 1, 1]).unwrap().is_empty());
    }

    #[test]
    fn crafted_link_detected_and_stable_under_far_point() {
        let mut rows = vec![vec![0.0], vec![0.5], vec![5.0], vec![5.3], vec![9.0]];
        let y = vec![0, 0, 0, 1, 1];
        let x = FeatureMatrix::from_rows(&rows).unwrap();
        let links = tomek_links(&x, &y).unwrap();
        assert_eq!(links, BTreeSet::from([(2, 3)]));
        rows.push(vec![1000.0]);
        let x2 = FeatureMatrix::from_rows(&rows).unwrap();
        assert_eq!(tomek_links(&x2, &[0, 0, 0, 1, 1, 0]).unwrap(), links);
    }

    #[test]
    fn csv_report_layout() {
        let (x, y) = blobs(&[6, 3], 5);
        let (_, _, report) = smote_tomek(&x, &y, &ResamplePlan::default()).unwrap();
        let mut buf = Vec::new();
        report.write_csv(&["A".into(), "B".into()], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("class,before,after_smote,after_tomek\nA,6,6,"));
        assert!(text.contains("\nB,3,6,6\n"));
    }
}
