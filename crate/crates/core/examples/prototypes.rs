//! Nearest-prototype cosine classification on hand-made features, grown
//! one class at a time.

use adaptcl::numcore::Tensor;
use adaptcl::protoclf::{compute_prototypes, PrototypeClassifier};

fn main() -> adaptcl::Result<()> {
    let feats = Tensor::from_rows(&[
        vec![1.0, 0.1, 0.0],
        vec![0.9, -0.1, 0.0],
        vec![0.0, 1.0, 0.2],
        vec![0.1, 0.8, 0.0],
        vec![0.0, 0.0, 1.0],
        vec![0.2, 0.1, 0.9],
    ])?;
    let labels = [0, 0, 1, 1, 2, 2];

    let mut clf = PrototypeClassifier::new(3);
    clf.grow(&compute_prototypes(&feats, &labels, &[0, 1])?)?;
    let query = Tensor::from_rows(&[vec![0.1, 0.0, 3.0]])?;
    println!("with classes {:?}: {:?}", clf.class_ids(), clf.classify(&query)?.1);

    clf.grow(&compute_prototypes(&feats, &labels, &[2])?)?;
    let (scores, preds) = clf.classify(&query)?;
    println!("with classes {:?}: {:?} scores {:?}", clf.class_ids(), preds, scores.data());
    Ok(())
}
