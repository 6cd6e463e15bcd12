//! The incremental run: finetune on task 1, freeze, then grow the
//! prototype classifier task by task and record cumulative accuracy.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::features::{build_composite, param_checksum, CompositeEncoder, FeatureExtractor, FrozenEncoder};
use super::train::{finetune_task1, CosineHead, FitReport, TrainRecipe};
use super::TaskStream;
use crate::adapters::{self, AdapterConfig, AdapterState};
use crate::config::{DataSource, RunConfig};
use crate::data::{self, Dataset, ImbalanceInfo, LabeledSplit};
use crate::encoder::EncoderState;
use crate::error::{Error, Result};
use crate::protoclf::{compute_prototypes, PrototypeClassifier};
use crate::seed::{self, tags};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolOptions {
    pub recipe: TrainRecipe,
    pub seed: u64,
    /// Concatenate frozen features to the finetuned ones.
    pub concat: bool,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        Self {
            recipe: TrainRecipe::default(),
            seed: 0,
            concat: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    /// 1-based task number.
    pub task: usize,
    pub classes: Vec<usize>,
    /// Accuracy over the test sets of tasks `1..=task`.
    pub last: f64,
    /// Mean of `last` over tasks `1..=task`.
    pub avg: f64,
    /// Encoder and adapter checksum after this task.
    pub checksum: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub rows: Vec<TaskRow>,
    /// Trainable adapter parameters.
    pub params: u64,
    pub seed: u64,
    pub fingerprint: String,
    pub feature_dim: usize,
    pub class_order: Vec<usize>,
    /// Task-1 accuracy of prototypes on the frozen encoder alone.
    pub baseline_task1: f64,
    pub finetune: FitReport,
    pub imbalance: Option<ImbalanceInfo>,
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn lasts(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.last).collect()
    }

    pub fn final_last(&self) -> Option<f64> {
        self.rows.last().map(|r| r.last)
    }

    pub fn final_avg(&self) -> Option<f64> {
        self.rows.last().map(|r| r.avg)
    }

    pub const CSV_HEADER: &'static str = "task,last,avg,params,seed";

    /// `task,last,avg,params,seed`, floats with 4 decimals.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            writeln!(
                out,
                "{},{:.4},{:.4},{},{}",
                r.task, r.last, r.avg, self.params, self.seed
            )
            .expect("write to string");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Running means: `out[t] = mean(lasts[0..=t])`.
pub fn avg_accuracy(lasts: &[f64]) -> Vec<f64> {
    let mut sum = 0.0;
    lasts
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            sum += l;
            sum / (i + 1) as f64
        })
        .collect()
}

/// Fraction of `preds` equal to `labels`.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() || labels.is_empty() {
        return Err(Error::dim("accuracy", &[preds.len()], &[labels.len()]));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Top-1 accuracy over the union of `tests`.
pub fn evaluate(
    extractor: &dyn FeatureExtractor,
    classifier: &PrototypeClassifier,
    tests: &[&Dataset],
) -> Result<f64> {
    let known: BTreeSet<usize> = classifier.class_ids().iter().copied().collect();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for d in tests {
        if let Some(l) = d.labels.iter().find(|l| !known.contains(l)) {
            return Err(Error::contract(format!(
                "test sample of class {l} unknown to the classifier"
            )));
        }
        images.extend(d.images.iter().cloned());
        labels.extend(&d.labels);
    }
    if images.is_empty() {
        return Err(Error::contract("no test samples"));
    }
    let feats = extractor.extract(&images)?;
    let (_, preds) = classifier.classify(&feats)?;
    accuracy(&preds, &labels)
}

fn prototypes_of(extractor: &dyn FeatureExtractor, data: &Dataset, classes: &[usize]) -> Result<crate::protoclf::Prototypes> {
    let feats = extractor.extract(&data.images)?;
    compute_prototypes(&feats, &data.labels, classes)
}

/// Everything a finished run produces.
#[derive(Clone, Debug)]
pub struct ProtocolOutcome {
    pub report: RunReport,
    pub composite: CompositeEncoder,
    pub classifier: PrototypeClassifier,
}

/// Runs the protocol over `stream`. `encoder` must be frozen.
pub fn run_protocol(
    stream: &TaskStream,
    encoder: &EncoderState,
    adapter_config: &AdapterConfig,
    opts: &ProtocolOptions,
) -> Result<ProtocolOutcome> {
    let start = Instant::now();
    if stream.is_empty() {
        return Err(Error::contract("task stream is empty"));
    }
    if !encoder.is_frozen() {
        return Err(Error::contract("the protocol expects a frozen encoder"));
    }
    let cfg = encoder.config();
    let mut adapters = AdapterState::init(
        adapter_config,
        cfg.embed_dim,
        cfg.num_blocks,
        seed::derive(opts.seed, &[tags::ADAPTER_INIT]),
    )?;

    // Task 1: adapter stage.
    let train1 = stream.train(0, 0)?;
    let test1 = stream.test(0, 0)?;
    let classes1 = stream.classes(0);
    let frozen = FrozenEncoder(encoder);
    let frozen_protos = prototypes_of(&frozen, train1, classes1)?;
    let mut baseline = PrototypeClassifier::new(frozen.dim());
    baseline.grow(&frozen_protos)?;
    let baseline_task1 = evaluate(&frozen, &baseline, &[test1])?;

    let before = param_checksum(encoder, None);
    let finetune = if adapter_config.is_empty() {
        log::info!("no adapters placed; skipping finetuning");
        FitReport::default()
    } else {
        let mut head = CosineHead::from_prototypes(&frozen_protos)?;
        finetune_task1(
            encoder,
            &mut adapters,
            &mut head,
            train1,
            &opts.recipe,
            seed::derive(opts.seed, &[tags::SHUFFLE]),
        )?
    };
    if param_checksum(encoder, None) != before {
        return Err(Error::contract("encoder parameters changed during finetuning"));
    }
    let composite = build_composite(encoder, encoder, &adapters, opts.concat)?;
    let frozen_sum = composite.checksum();

    let mut classifier = PrototypeClassifier::new(composite.dim());
    let mut rows: Vec<TaskRow> = Vec::with_capacity(stream.num_tasks());
    let mut lasts = Vec::with_capacity(stream.num_tasks());
    for t in 0..stream.num_tasks() {
        let train = stream.train(t, t)?;
        let protos = prototypes_of(&composite, train, stream.classes(t))?;
        classifier.grow(&protos)?;
        let tests = (0..=t)
            .map(|s| stream.test(t, s))
            .collect::<Result<Vec<_>>>()?;
        let last = evaluate(&composite, &classifier, &tests)?;
        lasts.push(last);
        let checksum = composite.checksum();
        if checksum != frozen_sum {
            return Err(Error::contract(format!(
                "frozen parameters changed during task {}",
                t + 1
            )));
        }
        rows.push(TaskRow {
            task: t + 1,
            classes: stream.classes(t).to_vec(),
            last,
            avg: *avg_accuracy(&lasts).last().expect("non-empty"),
            checksum,
        });
        log::info!("task {} last {:.4}", t + 1, last);
    }
    if let Some(v) = stream.violations().first() {
        return Err(Error::contract(format!("task isolation violated: {v:?}")));
    }
    let report = RunReport {
        rows,
        params: adapters::count_trainable(adapter_config, cfg.embed_dim, None),
        seed: opts.seed,
        fingerprint: String::new(),
        feature_dim: composite.dim(),
        class_order: stream.class_order().to_vec(),
        baseline_task1,
        finetune,
        imbalance: None,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok(ProtocolOutcome {
        report,
        composite,
        classifier,
    })
}

fn load_data(cfg: &RunConfig) -> Result<LabeledSplit> {
    let seed = cfg.protocol.seed;
    match cfg.data.source {
        DataSource::Synthetic => {
            data::generate_synthetic(&cfg.synthetic_spec(), seed::derive(seed, &[tags::DATA]))
        }
        DataSource::Raw => {
            let dir = cfg.data.raw_dir.as_deref().expect("validated");
            let geometry = cfg.encoder.image_shape();
            Ok(LabeledSplit {
                train: data::ingest_raw(dir, cfg.data.train_manifest.as_deref().expect("validated"), geometry)?,
                test: data::ingest_raw(dir, cfg.data.test_manifest.as_deref().expect("validated"), geometry)?,
            })
        }
    }
}

/// Builds the encoder, data and stream described by `cfg` and runs the
/// protocol. The report carries the config fingerprint.
pub fn run_experiment(cfg: &RunConfig) -> Result<ProtocolOutcome> {
    cfg.validate()?;
    let mut encoder = match &cfg.protocol.encoder_weights {
        Some(path) => EncoderState::load_weights(&cfg.encoder, path)?,
        None => EncoderState::init(&cfg.encoder, cfg.protocol.encoder_seed)?,
    };
    encoder.freeze();
    let seed = cfg.protocol.seed;
    let mut split = load_data(cfg)?;
    let mut imbalance = None;
    if cfg.data.imb_factor < 1.0 {
        let (train, info) = data::apply_imbalance(&split.train, cfg.data.imb_factor, seed)?;
        split.train = train;
        imbalance = Some(info);
    }
    let stream = data::split_stream(
        &split,
        &cfg.split_plan()?,
        seed::derive(seed, &[tags::CLASS_ORDER]),
    )?;
    let opts = ProtocolOptions {
        recipe: cfg.recipe.clone(),
        seed,
        concat: cfg.protocol.concat,
    };
    let mut out = run_protocol(&stream, &encoder, &cfg.adapter_config()?, &opts)?;
    out.report.fingerprint = cfg.fingerprint();
    out.report.imbalance = imbalance;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_mean() {
        assert_eq!(avg_accuracy(&[1.0, 0.5, 0.0]), vec![1.0, 0.75, 0.5]);
        assert_eq!(avg_accuracy(&[0.3]), vec![0.3]);
    }

    #[test]
    fn accuracy_counts() {
        assert_eq!(accuracy(&[0, 1, 1, 1], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn csv_format() {
        let r = RunReport {
            rows: vec![TaskRow {
                task: 1,
                classes: vec![0],
                last: 0.5,
                avg: 0.5,
                checksum: String::new(),
            }],
            params: 10,
            seed: 3,
            ..RunReport::default()
        };
        assert_eq!(r.to_csv(), "task,last,avg,params,seed\n1,0.5000,0.5000,10,3\n");
    }
}
