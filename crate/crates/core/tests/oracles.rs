//! Library results against independent plain-`f64` reimplementations.

use std::collections::BTreeMap;

use adaptcl::adapters::{parse_kinds, AdapterConfig, AdapterState};
use adaptcl::cil::{accuracy, avg_accuracy};
use adaptcl::encoder::{encode, EncoderConfig, EncoderState};
use adaptcl::numcore::{gelu, layernorm, softmax, Tensor};
use adaptcl::protoclf::{compute_prototypes, PrototypeClassifier};
use adaptcl::seed;
use rand::Rng;

type Mat = Vec<Vec<f64>>;

fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f32> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale).collect::<Vec<_>>();
    Tensor::from_f64(shape, &data).unwrap()
}

fn to_mat(t: &Tensor<f32>) -> Mat {
    let (r, c) = t.dims2().unwrap();
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].iter().map(|&v| v as f64).collect()).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for l in 0..k {
                out[i][j] += a[i][l] * b[l][j];
            }
        }
    }
    out
}

fn add_row(a: &Mat, bias: &[f64]) -> Mat {
    a.iter().map(|r| r.iter().zip(bias).map(|(x, b)| x + b).collect()).collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn ln(a: &Mat, g: &[f64], b: &[f64], eps: f64) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
            r.iter().enumerate().map(|(j, x)| (x - mu) / (var + eps).sqrt() * g[j] + b[j]).collect()
        })
        .collect()
}

fn gelu64(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

struct Params(BTreeMap<String, Tensor<f32>>);

impl Params {
    fn m(&self, k: &str) -> Mat {
        to_mat(&self.0[k])
    }
    fn v(&self, k: &str) -> Vec<f64> {
        self.0[k].data().iter().map(|&x| x as f64).collect()
    }
    fn has(&self, k: &str) -> bool {
        self.0.contains_key(k)
    }
}

fn oracle_adapter(p: &Params, prefix: &str, alpha: f64, c: &Mat) -> Mat {
    let z = add_row(&mm(c, &p.m(&format!("{prefix}.w_down"))), &p.v(&format!("{prefix}.b_down")));
    let z: Mat = z.iter().map(|r| r.iter().map(|x| x.max(0.0)).collect()).collect();
    let u = add_row(&mm(&z, &p.m(&format!("{prefix}.w_up"))), &p.v(&format!("{prefix}.b_up")));
    u.iter().map(|r| r.iter().map(|x| alpha * x).collect()).collect()
}

/// Mean-pooled pre-norm ViT with parallel adapters, written from scratch.
fn oracle_encode(cfg: &EncoderConfig, p: &Params, alpha: f64, image: &Tensor<f32>) -> Vec<f64> {
    let (s, ps, c, d, h) = (cfg.image_size, cfg.patch_size, cfg.channels, cfg.embed_dim, cfg.num_heads);
    let px = image.data();
    let grid = s / ps;
    let mut patches = Mat::new();
    for gy in 0..grid {
        for gx in 0..grid {
            let mut v = Vec::new();
            for ch in 0..c {
                for dy in 0..ps {
                    for dx in 0..ps {
                        v.push(px[ch * s * s + (gy * ps + dy) * s + gx * ps + dx] as f64);
                    }
                }
            }
            patches.push(v);
        }
    }
    let mut x = add(
        &add_row(&mm(&patches, &p.m("encoder.patch_proj")), &p.v("encoder.patch_bias")),
        &p.m("encoder.pos_embed"),
    );
    let dh = d / h;
    for b in 0..cfg.num_blocks {
        let k = |f: &str| format!("encoder.block.{b}.{f}");
        let n1 = ln(&x, &p.v(&k("ln1.gamma")), &p.v(&k("ln1.beta")), cfg.ln_eps);
        let q = add_row(&mm(&n1, &p.m(&k("attn.w_q"))), &p.v(&k("attn.b_q")));
        let kk = add_row(&mm(&n1, &p.m(&k("attn.w_k"))), &p.v(&k("attn.b_k")));
        let v = add_row(&mm(&n1, &p.m(&k("attn.w_v"))), &p.v(&k("attn.b_v")));
        let t = x.len();
        let mut merged = vec![vec![0.0; d]; t];
        for head in 0..h {
            for i in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|j| (0..dh).map(|e| q[i][head * dh + e] * kk[j][head * dh + e]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = ex.iter().sum();
                for e in 0..dh {
                    merged[i][head * dh + e] = (0..t).map(|j| ex[j] / z * v[j][head * dh + e]).sum();
                }
            }
        }
        let attn = add_row(&mm(&merged, &p.m(&k("attn.w_o"))), &p.v(&k("attn.b_o")));
        let mut a = add(&x, &attn);
        let pre = |kind: &str| format!("adapter.{b}.{kind}");
        if p.has(&format!("{}.w_down", pre("atten"))) {
            a = add(&a, &oracle_adapter(p, &pre("atten"), alpha, &x));
        }
        let n2 = ln(&a, &p.v(&k("ln2.gamma")), &p.v(&k("ln2.beta")), cfg.ln_eps);
        let hid = add_row(&mm(&n2, &p.m(&k("mlp.w_fc1"))), &p.v(&k("mlp.b_fc1")));
        let hid: Mat = hid.iter().map(|r| r.iter().map(|&v| gelu64(v)).collect()).collect();
        let mut out = add(&a, &add_row(&mm(&hid, &p.m(&k("mlp.w_fc2"))), &p.v(&k("mlp.b_fc2"))));
        if p.has(&format!("{}.w_down", pre("mlp"))) {
            out = add(&out, &oracle_adapter(p, &pre("mlp"), alpha, &a));
        }
        if p.has(&format!("{}.w_down", pre("all"))) {
            out = add(&out, &oracle_adapter(p, &pre("all"), alpha, &x));
        }
        x = out;
    }
    let pooled: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / x.len() as f64).collect();
    ln(&vec![pooled], &p.v("encoder.post_norm.gamma"), &p.v("encoder.post_norm.beta"), cfg.ln_eps).remove(0)
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = seed::rng(1);
    for (n, k, m) in [(1, 1, 1), (3, 5, 2), (7, 4, 9), (16, 16, 16)] {
        let a = random_tensor(&mut rng, &[n, k], 1.0);
        let b = random_tensor(&mut rng, &[k, m], 1.0);
        let got = to_mat(&a.matmul(&b).unwrap());
        let want = mm(&to_mat(&a), &to_mat(&b));
        for (g, w) in got.iter().flatten().zip(want.iter().flatten()) {
            assert!((g - w).abs() <= 1e-5 * (1.0 + w.abs()), "{g} vs {w}");
        }
    }
}

#[test]
fn softmax_and_layernorm_match_direct_formulas() {
    let mut rng = seed::rng(2);
    let x = random_tensor(&mut rng, &[4, 6], 5.0);
    let sm = to_mat(&softmax(&x, 1).unwrap());
    for (row, want) in sm.iter().zip(to_mat(&x)) {
        let z: f64 = want.iter().map(|v| v.exp()).sum();
        for (g, w) in row.iter().zip(&want) {
            assert!((g - w.exp() / z).abs() < 1e-6);
        }
    }
    let g = random_tensor(&mut rng, &[6], 1.0);
    let b = random_tensor(&mut rng, &[6], 1.0);
    let got = to_mat(&layernorm(&x, &g, &b, 1e-5).unwrap());
    let want = ln(&to_mat(&x), &to_mat(&g.clone().reshape(&[1, 6]).unwrap())[0], &to_mat(&b.clone().reshape(&[1, 6]).unwrap())[0], 1e-5);
    for (gv, wv) in got.iter().flatten().zip(want.iter().flatten()) {
        assert!((gv - wv).abs() < 1e-5, "{gv} vs {wv}");
    }
}

#[test]
fn gelu_uses_tanh_form() {
    for x in [-3.0, -1.0, -0.2, 0.0, 0.5, 1.0, 2.5] {
        assert!((gelu(x) - gelu64(x)).abs() < 1e-15);
    }
    assert!((gelu(1.0f64) - 0.841_191_990_6).abs() < 1e-9);
}

fn randomised(cfg: &EncoderConfig, ad_cfg: &AdapterConfig, seed_: u64) -> (EncoderState, AdapterState) {
    let mut rng = seed::rng(seed_);
    let mut enc = EncoderState::init(cfg, seed_).unwrap();
    for t in enc.params_mut() {
        let r = random_tensor(&mut rng, t.shape(), 0.4);
        t.data_mut().copy_from_slice(r.data());
    }
    let mut ad = AdapterState::init(ad_cfg, cfg.embed_dim, cfg.num_blocks, seed_ + 1).unwrap();
    for t in ad.params_mut() {
        let r = random_tensor(&mut rng, t.shape(), 0.4);
        t.data_mut().copy_from_slice(r.data());
    }
    (enc, ad)
}

#[test]
fn encoder_with_adapters_matches_scalar_reimplementation() {
    let cfg = EncoderConfig {
        image_size: 6,
        patch_size: 3,
        channels: 2,
        embed_dim: 8,
        num_blocks: 3,
        num_heads: 2,
        ..EncoderConfig::default()
    };
    for (kinds, blocks) in [("mlp", vec![0, 1, 2]), ("atten+all", vec![1]), ("mlp+atten+all", vec![0, 2]), ("none", vec![])] {
        let ad_cfg = AdapterConfig::uniform(blocks, &parse_kinds(kinds).unwrap(), 3);
        let (enc, ad) = randomised(&cfg, &ad_cfg, 17);
        let mut map: BTreeMap<String, Tensor<f32>> = enc.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect();
        map.extend(ad.params().into_iter().map(|(n, t)| (n, t.clone())));
        let params = Params(map);
        let mut rng = seed::rng(99);
        let images: Vec<_> = (0..3).map(|_| random_tensor(&mut rng, &cfg.image_shape(), 1.0)).collect();
        let got = encode(&enc, Some(&ad), &images).unwrap();
        for (i, img) in images.iter().enumerate() {
            let want = oracle_encode(&cfg, &params, ad_cfg.alpha, img);
            for (g, w) in got.row(i).iter().zip(&want) {
                assert!((*g as f64 - w).abs() < 1e-4, "{kinds}: {g} vs {w}");
            }
        }
    }
}

#[test]
fn prototypes_are_class_means() {
    let mut rng = seed::rng(3);
    let feats = random_tensor(&mut rng, &[12, 5], 2.0);
    let labels: Vec<usize> = (0..12).map(|i| [4, 7, 9][i % 3]).collect();
    let protos = compute_prototypes(&feats, &labels, &[4, 7, 9]).unwrap();
    let rows = to_mat(&feats);
    for (&c, p) in &protos {
        let members: Vec<&Vec<f64>> = rows.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(r, _)| r).collect();
        for j in 0..5 {
            let mean = members.iter().map(|r| r[j]).sum::<f64>() / members.len() as f64;
            assert!((p[j] as f64 - mean).abs() < 1e-6);
        }
    }
}

#[test]
fn cosine_classifier_matches_normalised_dot_products() {
    let mut rng = seed::rng(4);
    let feats = random_tensor(&mut rng, &[20, 6], 1.0);
    let labels: Vec<usize> = (0..20).map(|i| i % 4).collect();
    let protos = compute_prototypes(&feats, &labels, &[0, 1, 2, 3]).unwrap();
    let mut clf = PrototypeClassifier::new(6);
    clf.grow(&protos).unwrap();
    let queries = random_tensor(&mut rng, &[10, 6], 1.0);
    let (scores, preds) = clf.classify(&queries).unwrap();
    let unit = |v: &[f64]| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect::<Vec<_>>()
    };
    for (qi, q) in to_mat(&queries).iter().enumerate() {
        let qn = unit(q);
        let sims: Vec<f64> = (0..4)
            .map(|c| {
                let p: Vec<f64> = protos[&c].iter().map(|&v| v as f64).collect();
                unit(&p).iter().zip(&qn).map(|(a, b)| a * b).sum()
            })
            .collect();
        for (c, s) in sims.iter().enumerate() {
            assert!((scores.row(qi)[c] as f64 - s).abs() < 1e-5);
        }
        let best = (0..4).fold(0, |b, c| if sims[c] > sims[b] { c } else { b });
        assert_eq!(preds[qi], best);
    }
}

#[test]
fn ties_go_to_the_lowest_class_id() {
    let mut clf = PrototypeClassifier::new(2);
    let protos = [(5, vec![1.0, 0.0]), (2, vec![2.0, 0.0])].into_iter().collect();
    clf.grow(&protos).unwrap();
    let (_, preds) = clf.classify(&Tensor::from_rows(&[vec![3.0, 0.0]]).unwrap()).unwrap();
    assert_eq!(preds, vec![2]);
}

#[test]
fn accuracy_is_hit_fraction() {
    let mut rng = seed::rng(5);
    let labels: Vec<usize> = (0..500).map(|_| rng.random_range(0..5)).collect();
    let preds: Vec<usize> = labels.iter().map(|&l| if rng.random::<f64>() < 0.7 { l } else { (l + 1) % 5 }).collect();
    let hits = preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
    assert_eq!(accuracy(&preds, &labels).unwrap(), hits as f64 / 500.0);
    assert!((accuracy(&preds, &labels).unwrap() - 0.7).abs() < 4.0 * (0.21f64 / 500.0).sqrt());
}

#[test]
fn average_accuracy_is_running_mean() {
    let lasts = [0.9, 0.8, 0.75, 0.6];
    let avg = avg_accuracy(&lasts);
    for t in 0..4 {
        let want = lasts[..=t].iter().sum::<f64>() / (t + 1) as f64;
        assert!((avg[t] - want).abs() < 1e-15);
    }
}
