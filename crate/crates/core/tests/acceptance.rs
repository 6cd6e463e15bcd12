//! The nine acceptance criteria, one PASS/FAIL line each.

use std::io::Write;
use std::time::{Duration, Instant};

use adaptcl::adapters::{adaptformer_encode, count_trainable, parse_kinds, AdapterConfig, AdapterKind, AdapterState, Placement};
use adaptcl::cil::{
    accuracy, avg_accuracy, expand_grid, run_protocol, sweep, ProtocolOptions, SweepAxis,
};
use adaptcl::config::RunConfig;
use adaptcl::data::{apply_imbalance, generate_synthetic, imbalance_counts, split_stream, Dataset};
use adaptcl::encoder::{encode, EncoderConfig, EncoderState};
use adaptcl::gradsuite::{run_suite, SuiteDims};
use adaptcl::numcore::Tensor;
use adaptcl::protoclf::{compute_prototypes, PrototypeClassifier};
use adaptcl::seed::{self, tags};
use rand::seq::IndexedRandom;
use rand::Rng;

type Outcome = Result<String, String>;

fn toy() -> RunConfig {
    RunConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/toy.toml")).unwrap()
}

fn check(cond: bool, msg: String) -> Outcome {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn param_accounting() -> Outcome {
    let mut got = Vec::new();
    for (kinds, want) in [("mlp", 1.19), ("mlp+atten", 2.38), ("mlp+atten+all", 3.57)] {
        let cfg = AdapterConfig::uniform(0..12, &parse_kinds(kinds).unwrap(), 64);
        let m = count_trainable(&cfg, 768, None) as f64 / 1e6;
        if (m - want).abs() > 0.005 {
            return Err(format!("{kinds}: {m:.4}M, expected {want}M"));
        }
        got.push(format!("{m:.4}M"));
    }
    Ok(got.join(" / "))
}

fn metric_oracle() -> Outcome {
    let lasts = [91.60, 89.60, 85.30, 82.60, 80.48, 78.13, 75.17, 72.65, 71.30, 70.08];
    let avg = *avg_accuracy(&lasts).last().unwrap();
    check((avg - 79.69).abs() <= 0.005, format!("Avg {avg:.4}"))
}

fn random_encoder(rng: &mut impl Rng) -> EncoderConfig {
    let heads = *[1usize, 2].choose(rng).unwrap();
    let per_head = rng.random_range(2..=16 / heads);
    let patch = rng.random_range(1..=3);
    EncoderConfig {
        image_size: patch * rng.random_range(1..=3),
        patch_size: patch,
        channels: rng.random_range(1..=3),
        embed_dim: heads * per_head,
        num_blocks: rng.random_range(1..=4),
        num_heads: heads,
        mlp_ratio: 2.0,
        ..EncoderConfig::default()
    }
}

fn randomise_encoder(enc: &mut EncoderState, rng: &mut impl Rng) {
    for t in enc.params_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
}

fn images(cfg: &EncoderConfig, n: usize, rng: &mut impl Rng) -> Vec<Tensor<f32>> {
    let len: usize = cfg.image_shape().iter().product();
    (0..n)
        .map(|_| Tensor::new(&cfg.image_shape(), (0..len).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap())
        .collect()
}

fn embedding_invariance() -> Outcome {
    let mut rng = seed::rng(2024);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let cfg = random_encoder(&mut rng);
        let mut enc = EncoderState::init(&cfg, case).unwrap();
        randomise_encoder(&mut enc, &mut rng);
        let all: Vec<Placement> = (0..cfg.num_blocks)
            .flat_map(|b| AdapterKind::KINDS.map(|k| Placement::new(b, k)))
            .collect();
        let big: Vec<Placement> = all.iter().copied().filter(|_| rng.random_bool(0.7)).collect();
        let small: Vec<Placement> = big.iter().copied().filter(|_| rng.random_bool(0.5)).collect();
        let bottleneck = rng.random_range(1..=6);
        let small_cfg = AdapterConfig { placements: small.into_iter().collect(), bottleneck, ..AdapterConfig::default() };
        let big_cfg = AdapterConfig { placements: big.into_iter().collect(), bottleneck, ..AdapterConfig::default() };
        let mut state = AdapterState::init(&small_cfg, cfg.embed_dim, cfg.num_blocks, case).unwrap();
        for t in state.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        let grown = state.embed_into_larger(&big_cfg, cfg.num_blocks, case + 100).unwrap();
        let batch = images(&cfg, 4, &mut rng);
        let a = encode(&enc, Some(&state), &batch).unwrap();
        let b = encode(&enc, Some(&grown), &batch).unwrap();
        worst = worst.max(a.max_abs_diff(&b).unwrap());
    }
    check(worst <= 1e-6, format!("20 configs, max |diff| {worst:.2e}"))
}

fn adaptformer_equivalence() -> Outcome {
    let mut rng = seed::rng(7);
    for case in 0..10 {
        let cfg = random_encoder(&mut rng);
        let mut enc = EncoderState::init(&cfg, case).unwrap();
        randomise_encoder(&mut enc, &mut rng);
        let ad_cfg = AdapterConfig::uniform(0..cfg.num_blocks, &[AdapterKind::Mlp], rng.random_range(1..=8));
        let mut ad = AdapterState::init(&ad_cfg, cfg.embed_dim, cfg.num_blocks, case).unwrap();
        for t in ad.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        let batch = images(&cfg, 3, &mut rng);
        let ours = encode(&enc, Some(&ad), &batch).unwrap();
        let theirs = adaptformer_encode(&enc, &ad, &batch).unwrap();
        if !ours.bit_eq(&theirs) {
            return Err(format!("config {case} differs by {:.2e}", ours.max_abs_diff(&theirs).unwrap()));
        }
    }
    Ok("10 configs bit-identical".into())
}

fn gradient_suite() -> Outcome {
    let entries = run_suite(SuiteDims::default(), 1e-6, 1e-3).map_err(|e| e.to_string())?;
    let worst = |p: &str| entries.iter().filter(|e| e.precision == p).map(|e| e.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<String> = entries.iter().filter(|e| !e.passed).map(|e| format!("{} {}", e.name, e.precision)).collect();
    check(
        failed.is_empty() && entries.iter().any(|e| e.name.contains("encoder")),
        format!(
            "{} checks, worst f64 {:.2e}, worst f32 {:.2e}{}",
            entries.len(),
            worst("f64"),
            worst("f32"),
            if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(", ")) }
        ),
    )
}

fn freeze_discipline() -> Outcome {
    let mut c = toy();
    c.set("data.noise=1.5").unwrap();
    c.set("recipe.epochs=5").unwrap();
    let split = generate_synthetic(&c.synthetic_spec(), seed::derive(0, &[tags::DATA])).unwrap();
    let stream = split_stream(&split, &c.split_plan().unwrap(), seed::derive(0, &[tags::CLASS_ORDER])).unwrap();
    let mut enc = EncoderState::init(&c.encoder, 0).unwrap();
    enc.freeze();
    let opts = ProtocolOptions { recipe: c.recipe.clone(), ..ProtocolOptions::default() };
    let adapters = c.adapter_config().unwrap();
    let base = run_protocol(&stream, &enc, &adapters, &opts).map_err(|e| e.to_string())?.report;
    if base.rows.len() != 5 || base.rows.iter().any(|r| r.checksum != base.rows[0].checksum) {
        return Err("checksum changed between tasks".into());
    }
    let last5 = base.final_last().unwrap();
    let mut worst = 0.0f64;
    for tail in [[4, 3, 2, 1], [2, 4, 1, 3], [3, 1, 4, 2]] {
        let permuted = stream.permute_tail(&tail).unwrap();
        let r = run_protocol(&permuted, &enc, &adapters, &opts).map_err(|e| e.to_string())?.report;
        if r.rows[0].checksum != base.rows[0].checksum {
            return Err(format!("tail {tail:?} changed the frozen parameters"));
        }
        worst = worst.max((r.final_last().unwrap() - last5).abs());
    }
    check(worst <= 1e-9, format!("checksums equal over 5 tasks, Last_5 {last5:.4}, max shift {worst:.1e} over 3 orders"))
}

fn flatten(d: &Dataset) -> Tensor<f32> {
    let rows: Vec<Vec<f32>> = d.images.iter().map(|t| t.data().to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

fn end_to_end() -> Outcome {
    let mut c = toy();
    c.set("data.noise=0.8").unwrap();
    let split = generate_synthetic(&c.synthetic_spec(), seed::derive(0, &[tags::DATA])).unwrap();
    let classes: Vec<usize> = (0..10).collect();
    let mut ncm = PrototypeClassifier::new(split.train.images[0].len());
    ncm.grow(&compute_prototypes(&flatten(&split.train), &split.train.labels, &classes).unwrap()).unwrap();
    let raw = accuracy(&ncm.classify(&flatten(&split.test)).unwrap().1, &split.test.labels).unwrap();

    let r = adaptcl::cil::run_experiment(&c).map_err(|e| e.to_string())?.report;
    let last5 = r.final_last().unwrap();
    let task1 = r.rows[0].last;
    check(
        raw >= 0.9 && last5 >= 0.9 && task1 >= r.baseline_task1,
        format!("raw NCM {raw:.4}, Last_5 {last5:.4}, task 1 finetuned {task1:.4} vs frozen {:.4}", r.baseline_task1),
    )
}

fn imbalance_sampler() -> Outcome {
    let (max_num, n) = (500usize, 100usize);
    for f in [0.01, 0.05, 0.1, 0.5, 1.0] {
        let got = imbalance_counts(max_num, n, f).unwrap();
        let want: Vec<usize> = (0..n).map(|i| (max_num as f64 * (i as f64 / n as f64 * f64::ln(f)).exp()).round() as usize).collect();
        if got != want {
            return Err(format!("factor {f}: {got:?}"));
        }
    }
    if imbalance_counts(max_num, n, 1.0).unwrap().iter().any(|&c| c != max_num) {
        return Err("factor 1 trimmed a class".into());
    }
    // Applied to a dataset: every class ends with its ranked count.
    let mut c = toy();
    c.set("data.samples_per_class=100").unwrap();
    let split = generate_synthetic(&c.synthetic_spec(), 3).unwrap();
    let (train, info) = apply_imbalance(&split.train, 0.1, 9).unwrap();
    let counts = train.class_counts();
    for (rank, class) in info.rank_order.iter().enumerate() {
        if counts[class] != info.counts[rank] {
            return Err(format!("class {class} kept {} samples, expected {}", counts[class], info.counts[rank]));
        }
    }
    Ok(format!("5 factors exact over {n} classes; sampled counts {:?}", info.counts))
}

fn sweep_structure() -> Outcome {
    let mut kinds_base = toy();
    kinds_base.set("data.noise=1.5").unwrap();
    kinds_base.set("recipe.epochs=5").unwrap();
    kinds_base.set("recipe.lr=0.2").unwrap();
    let kinds = sweep(&kinds_base, SweepAxis::Kinds, &expand_grid(SweepAxis::Kinds, "all8").unwrap())
        .map_err(|e| e.to_string())?;

    let mut pos_base = kinds_base.clone();
    pos_base.set("encoder.num_blocks=12").unwrap();
    pos_base.set("recipe.epochs=2").unwrap();
    let positions = sweep(&pos_base, SweepAxis::AdapterPosition, &expand_grid(SweepAxis::AdapterPosition, "standard").unwrap())
        .map_err(|e| e.to_string())?;

    let mut out = std::io::stdout().lock();
    for table in [&kinds, &positions] {
        for line in table.to_csv().lines() {
            writeln!(out, "    {line}").unwrap();
        }
        for n in &table.notes {
            writeln!(out, "    note: {n}").unwrap();
        }
    }
    check(
        kinds.rows.len() == 8 && positions.rows.len() == 10,
        format!(
            "kinds {} rows, positions {} rows, {} non-monotone capacity notes",
            kinds.rows.len(),
            positions.rows.len(),
            kinds.notes.len() + positions.notes.len()
        ),
    )
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome, Duration); 9] = [
        ("parameter accounting", param_accounting, Duration::from_secs(1)),
        ("metric oracle", metric_oracle, Duration::from_secs(1)),
        ("embedding into a larger adapter set", embedding_invariance, Duration::from_secs(30)),
        ("AdaptFormer equivalence", adaptformer_equivalence, Duration::from_secs(10)),
        ("gradient suite", gradient_suite, Duration::from_secs(120)),
        ("freeze discipline", freeze_discipline, Duration::from_secs(300)),
        ("end-to-end learning", end_to_end, Duration::from_secs(600)),
        ("imbalance sampler", imbalance_sampler, Duration::from_secs(1)),
        ("sweep structure", sweep_structure, Duration::from_secs(1800)),
    ];
    let mut failures = Vec::new();
    writeln!(std::io::stdout().lock()).unwrap();
    for (i, (name, run, budget)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let result = run();
        let took = start.elapsed();
        let (ok, detail) = match result {
            Ok(d) if took <= budget => (true, d),
            Ok(d) => (false, format!("{d}; over budget {budget:?}")),
            Err(d) => (false, d),
        };
        // Bypasses the test harness capture so the lines always show.
        writeln!(
            std::io::stdout().lock(),
            "{} {}. {name}: {detail} ({:.2}s)",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            took.as_secs_f64()
        )
        .unwrap();
        if !ok {
            failures.push(name);
        }
    }
    assert!(failures.is_empty(), "failed: {failures:?}");
}
