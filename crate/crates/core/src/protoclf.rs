//! Prototype extraction and the growable cosine classifier.
//!
//! Each class column is the mean feature of that class's training samples.
//! Columns are appended as tasks arrive and never rewritten. Scores are
//! cosine similarities between the L2-normalised feature and each
//! normalised column.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::{Tensor, NORM_FLOOR};
use crate::weights::{self, TensorMap};

/// Class id → prototype vector.
pub type Prototypes = BTreeMap<usize, Vec<f32>>;

/// Mean feature per requested class. Sums accumulate in `f64`.
///
/// Every class in `classes` must have at least one sample.
pub fn compute_prototypes(features: &Tensor<f32>, labels: &[usize], classes: &[usize]) -> Result<Prototypes> {
    let (n, d) = features.dims2()?;
    if n != labels.len() {
        return Err(Error::dim("compute_prototypes", features.shape(), &[labels.len()]));
    }
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> =
        classes.iter().map(|&c| (c, (vec![0.0; d], 0))).collect();
    for (row, &label) in labels.iter().enumerate() {
        if let Some((sum, count)) = sums.get_mut(&label) {
            for (s, &v) in sum.iter_mut().zip(features.row(row)) {
                *s += f64::from(v);
            }
            *count += 1;
        }
    }
    sums.into_iter()
        .map(|(class, (sum, count))| {
            if count == 0 {
                return Err(Error::contract(format!("class {class} has no samples")));
            }
            let k = count as f64;
            Ok((class, sum.into_iter().map(|s| (s / k) as f32).collect()))
        })
        .collect()
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Growable cosine classifier. Column `k` (stored as row `k`) belongs to
/// `class_ids[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeClassifier {
    dim: usize,
    class_ids: Vec<usize>,
    columns: Vec<Vec<f32>>,
}

impl PrototypeClassifier {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            class_ids: Vec::new(),
            columns: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn column(&self, class: usize) -> Option<&[f32]> {
        self.class_ids
            .iter()
            .position(|&c| c == class)
            .map(|k| self.columns[k].as_slice())
    }

    /// Classifier weights `W: [D_out, classes]`.
    pub fn weights(&self) -> Result<Tensor<f32>> {
        if self.columns.is_empty() {
            return Err(Error::contract("classifier has no classes"));
        }
        let rows = Tensor::from_rows(&self.columns)?;
        rows.transpose()
    }

    /// Appends new prototypes in ascending class-id order.
    pub fn grow(&mut self, prototypes: &Prototypes) -> Result<()> {
        for (&class, p) in prototypes {
            if self.class_ids.contains(&class) {
                return Err(Error::contract(format!("class {class} already present")));
            }
            if p.len() != self.dim {
                return Err(Error::dim("grow", &[self.dim], &[p.len()]));
            }
            if norm(p) < NORM_FLOOR {
                return Err(Error::contract(format!("prototype of class {class} is zero")));
            }
        }
        for (&class, p) in prototypes {
            self.class_ids.push(class);
            self.columns.push(p.clone());
        }
        Ok(())
    }

    /// Cosine scores `[batch, classes]` and argmax class ids. Ties go to
    /// the lowest class id.
    pub fn classify(&self, features: &Tensor<f32>) -> Result<(Tensor<f32>, Vec<usize>)> {
        let (b, d) = features.dims2()?;
        if d != self.dim {
            return Err(Error::dim("classify", features.shape(), &[self.dim]));
        }
        if self.columns.is_empty() {
            return Err(Error::contract("classifier has no classes"));
        }
        let col_norms: Vec<f64> = self.columns.iter().map(|c| norm(c)).collect();
        let mut scores = Vec::with_capacity(b * self.columns.len());
        let mut preds = Vec::with_capacity(b);
        for r in 0..b {
            let f = features.row(r);
            let fnorm = norm(f);
            if fnorm < NORM_FLOOR {
                return Err(Error::contract(format!("feature row {r} has zero norm")));
            }
            let mut best: Option<(f64, usize)> = None;
            for (k, col) in self.columns.iter().enumerate() {
                let dot: f64 = f
                    .iter()
                    .zip(col)
                    .map(|(&a, &b)| f64::from(a) * f64::from(b))
                    .sum();
                let s = (dot / (fnorm * col_norms[k])).clamp(-1.0, 1.0);
                scores.push(s as f32);
                let id = self.class_ids[k];
                best = match best {
                    Some((bs, bid)) if bs > s || (bs == s && bid < id) => Some((bs, bid)),
                    _ => Some((s, id)),
                };
            }
            preds.push(best.expect("at least one class").1);
        }
        Ok((Tensor::new(&[b, self.columns.len()], scores)?, preds))
    }

    pub fn to_tensor_map(&self) -> TensorMap {
        self.class_ids
            .iter()
            .zip(&self.columns)
            .map(|(id, c)| (format!("classifier.class_{id}"), Tensor::from_vec(c.clone())))
            .collect()
    }

    /// Rebuilds from `classifier.class_{id}` records, columns in ascending id.
    pub fn from_tensor_map(map: &TensorMap) -> Result<Self> {
        let mut protos = Prototypes::new();
        for (name, t) in map {
            let Some(id) = name.strip_prefix("classifier.class_") else {
                continue;
            };
            let id: usize = id
                .parse()
                .map_err(|_| Error::format(name.clone(), "class id is not an integer"))?;
            protos.insert(id, t.data().to_vec());
        }
        let dim = protos
            .values()
            .next()
            .map(Vec::len)
            .ok_or_else(|| Error::format("classifier", "no class records"))?;
        let mut clf = Self::new(dim);
        clf.grow(&protos)?;
        Ok(clf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        weights::write_file(path, &self.to_tensor_map())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor_map(&weights::read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(rows: &[Vec<f32>]) -> Tensor<f32> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn prototype_of_equal_vectors_and_midpoint() {
        let f = feats(&[vec![1.0, 2.0], vec![1.0, 2.0]]);
        assert_eq!(compute_prototypes(&f, &[3, 3], &[3]).unwrap()[&3], vec![1.0, 2.0]);
        let f = feats(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(compute_prototypes(&f, &[0, 0], &[0]).unwrap()[&0], vec![0.5, 0.5]);
    }

    #[test]
    fn missing_class_is_contract_error() {
        let f = feats(&[vec![1.0, 0.0]]);
        assert!(matches!(
            compute_prototypes(&f, &[0], &[0, 1]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn grow_appends_and_rejects_duplicates() {
        let mut clf = PrototypeClassifier::new(2);
        let p: Prototypes = [(5, vec![1.0, 0.0]), (2, vec![0.0, 1.0])].into();
        clf.grow(&p).unwrap();
        assert_eq!(clf.class_ids(), &[2, 5]);
        assert!(clf.grow(&[(5, vec![1.0, 1.0])].into()).is_err());
        assert!(clf.grow(&[(7, vec![0.0, 0.0])].into()).is_err());
        assert_eq!(clf.num_classes(), 2);
        assert_eq!(clf.weights().unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn self_similarity_and_antipode() {
        let mut clf = PrototypeClassifier::new(3);
        clf.grow(&[(0, vec![1.0, 2.0, 3.0]), (1, vec![-1.0, 0.5, 0.0])].into())
            .unwrap();
        let (s, p) = clf.classify(&feats(&[vec![1.0, 2.0, 3.0]])).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-6);
        assert_eq!(p, vec![0]);

        let mut one = PrototypeClassifier::new(2);
        one.grow(&[(4, vec![0.3, -0.7])].into()).unwrap();
        let (s, _) = one.classify(&feats(&[vec![-0.3, 0.7]])).unwrap();
        assert!((s.data()[0] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn ties_go_to_lowest_class_id() {
        let mut clf = PrototypeClassifier::new(2);
        clf.grow(&[(9, vec![1.0, 0.0])].into()).unwrap();
        clf.grow(&[(3, vec![2.0, 0.0])].into()).unwrap();
        let (_, p) = clf.classify(&feats(&[vec![1.0, 1.0]])).unwrap();
        assert_eq!(p, vec![3]);
    }

    #[test]
    fn zero_feature_is_error() {
        let mut clf = PrototypeClassifier::new(2);
        clf.grow(&[(0, vec![1.0, 0.0])].into()).unwrap();
        assert!(clf.classify(&feats(&[vec![0.0, 0.0]])).is_err());
        assert!(clf.classify(&feats(&[vec![0.0, 0.0, 1.0]])).is_err());
    }

    #[test]
    fn tensor_map_round_trip() {
        let mut clf = PrototypeClassifier::new(2);
        clf.grow(&[(1, vec![1.0, 0.5]), (10, vec![0.25, -1.0])].into())
            .unwrap();
        let map = clf.to_tensor_map();
        assert!(map.contains_key("classifier.class_10"));
        assert_eq!(PrototypeClassifier::from_tensor_map(&map).unwrap(), clf);
    }
}
