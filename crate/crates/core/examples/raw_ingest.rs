//! Writes 8-bit images as SIML files with a manifest, reads them back with
//! standardisation and checks a raw-pixel nearest-class-mean baseline.

use adaptcl::data::{export_raw, generate_synthetic, ingest_raw, Dataset, SyntheticSpec};
use adaptcl::numcore::Tensor;
use adaptcl::protoclf::{compute_prototypes, PrototypeClassifier};

fn flatten(d: &Dataset) -> adaptcl::Result<Tensor<f32>> {
    let rows: Vec<Vec<f32>> = d.images.iter().map(|t| t.data().to_vec()).collect();
    Tensor::from_rows(&rows)
}

fn to_pixels(d: &Dataset) -> Dataset {
    Dataset {
        images: d.images.iter().map(|t| t.map(|v| (128.0 + 40.0 * v).clamp(0.0, 255.0).round())).collect(),
        labels: d.labels.clone(),
    }
}

fn main() -> adaptcl::Result<()> {
    let spec = SyntheticSpec::default();
    let split = generate_synthetic(&spec, 5)?;
    let dir = tempfile::tempdir()?;
    let train_m = export_raw(&dir.path().join("train"), &to_pixels(&split.train))?;
    let test_m = export_raw(&dir.path().join("test"), &to_pixels(&split.test))?;
    let geometry = [spec.channels, spec.image_size, spec.image_size];
    let train = ingest_raw(train_m.parent().expect("dir"), &train_m, geometry)?;
    let test = ingest_raw(test_m.parent().expect("dir"), &test_m, geometry)?;
    println!("ingested {} train / {} test images", train.len(), test.len());
    let px: Vec<f32> = train.images[0].data()[..4].to_vec();
    println!("first standardised pixels {px:?}");

    let classes: Vec<usize> = train.classes().into_iter().collect();
    let mut clf = PrototypeClassifier::new(train.images[0].len());
    clf.grow(&compute_prototypes(&flatten(&train)?, &train.labels, &classes)?)?;
    let (_, preds) = clf.classify(&flatten(&test)?)?;
    let acc = adaptcl::cil::accuracy(&preds, &test.labels)?;
    println!("raw-pixel NCM accuracy {acc:.4}");
    Ok(())
}
