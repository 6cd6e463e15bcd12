//! Finite-difference checks for every tape primitive and for a full
//! encoder + adapters + cosine head loss, in 64-bit and 32-bit precision.
//!
//! Each case reduces its output to a scalar through a fixed random
//! weighting, so every output element contributes a distinct gradient.

use std::str::FromStr;

use serde::Serialize;

use crate::adapters::{self, AdapterConfig, AdapterKind, AdapterState, AdapterVars};
use crate::encoder::{self, EncoderConfig, EncoderState, EncoderVars};
use crate::error::{Error, Result};
use crate::numcore::{grad_check_mixed, GradCheckOptions, Scalar, Tape, Tensor, Var};
use crate::seed;

const SUITE_SEED: u64 = 0x5eed_0f_9c;

/// Encoder geometry for the composite case, written `D,B,H`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SuiteDims {
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
}

impl Default for SuiteDims {
    fn default() -> Self {
        Self {
            embed_dim: 8,
            num_blocks: 2,
            num_heads: 2,
        }
    }
}

impl FromStr for SuiteDims {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::config("dims", format!("expected D,B,H, got `{s}`")))?;
        let [embed_dim, num_blocks, num_heads] = parts[..] else {
            return Err(Error::config("dims", format!("expected D,B,H, got `{s}`")));
        };
        Ok(Self {
            embed_dim,
            num_blocks,
            num_heads,
        })
    }
}

impl SuiteDims {
    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        let cfg = EncoderConfig {
            image_size: 4,
            patch_size: 2,
            channels: 2,
            embed_dim: self.embed_dim,
            num_blocks: self.num_blocks,
            num_heads: self.num_heads,
            mlp_ratio: 2.0,
            ..EncoderConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
enum Kind {
    Matmul,
    Add,
    Mul,
    Scale,
    AddBias,
    Relu,
    Gelu,
    Softmax,
    LayerNorm,
    Transpose,
    SliceCols,
    ConcatCols,
    ConcatRows,
    MeanRows,
    SelectRow,
    NormalizeRows,
    CrossEntropy(Vec<usize>),
    Adapter,
    Composite(Box<CompositeSpec>),
}

#[derive(Clone, Debug)]
struct CompositeSpec {
    encoder: EncoderConfig,
    adapters: AdapterConfig,
    encoder_len: usize,
    images: Vec<Tensor<f64>>,
    targets: Vec<usize>,
}

/// One named function with its inputs.
#[derive(Clone, Debug)]
pub struct Case {
    pub name: &'static str,
    kind: Kind,
    inputs: Vec<Tensor<f64>>,
}

fn weighted_sum<T: Scalar>(tape: &mut Tape<T>, out: Var) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let mut rng = seed::rng(SUITE_SEED);
    let w: Tensor<T> = seed::truncated_normal_tensor(&mut rng, &shape, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

impl Case {
    pub fn num_coords(&self) -> usize {
        self.inputs.iter().map(Tensor::len).sum()
    }

    /// The scalar function under test.
    pub fn eval<T: Scalar>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let out = match &self.kind {
            Kind::Matmul => tape.matmul(v[0], v[1])?,
            Kind::Add => tape.add(v[0], v[1])?,
            Kind::Mul => tape.mul(v[0], v[1])?,
            Kind::Scale => tape.scale(v[0], 0.1),
            Kind::AddBias => tape.add_bias(v[0], v[1])?,
            Kind::Relu => tape.relu(v[0]),
            Kind::Gelu => tape.gelu(v[0]),
            Kind::Softmax => tape.softmax_rows(v[0])?,
            Kind::LayerNorm => tape.layernorm(v[0], v[1], v[2], 1e-5)?,
            Kind::Transpose => tape.transpose(v[0])?,
            Kind::SliceCols => tape.slice_cols(v[0], 1, 2)?,
            Kind::ConcatCols => tape.concat_cols(&[v[0], v[1]])?,
            Kind::ConcatRows => tape.concat_rows(&[v[0], v[1]])?,
            Kind::MeanRows => tape.mean_rows(v[0])?,
            Kind::SelectRow => tape.select_row(v[0], 1)?,
            Kind::NormalizeRows => tape.normalize_rows(v[0])?,
            Kind::CrossEntropy(t) => return tape.cross_entropy(v[0], t),
            Kind::Adapter => {
                let p = adapters::AdapterParamVars {
                    w_down: v[1],
                    b_down: Some(v[2]),
                    w_up: v[3],
                    b_up: Some(v[4]),
                };
                adapters::adapter_forward(tape, &p, 0.1, v[0])?
            }
            Kind::Composite(spec) => return composite_loss(tape, spec, v),
        };
        weighted_sum(tape, out)
    }
}

fn composite_loss<T: Scalar>(tape: &mut Tape<T>, spec: &CompositeSpec, v: &[Var]) -> Result<Var> {
    let n = spec.encoder_len;
    let enc = EncoderVars::from_ordered(&spec.encoder, &v[..n])?;
    let ad = AdapterVars::from_ordered(&spec.adapters, &v[n..v.len() - 1])?;
    let head = v[v.len() - 1];
    let rows = spec
        .images
        .iter()
        .map(|img| encoder::encode_image(tape, &spec.encoder, &enc, Some(&ad), &img.cast()))
        .collect::<Result<Vec<_>>>()?;
    let feats = tape.concat_rows(&rows)?;
    let feats = tape.normalize_rows(feats)?;
    let w = tape.normalize_rows(head)?;
    let wt = tape.transpose(w)?;
    let logits = tape.matmul(feats, wt)?;
    let logits = tape.scale(logits, 2.0);
    tape.cross_entropy(logits, &spec.targets)
}

fn randomise<T: Scalar>(t: &mut Tensor<T>, rng: &mut rand_chacha::ChaCha8Rng, std: f64) {
    for x in t.data_mut() {
        *x = *x + T::lit(seed::normal(rng, std));
    }
}

/// Inputs drawn with `|x| >= 0.1` so ReLU kinks sit far from every probe.
fn away_from_zero(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let x = seed::normal(rng, 1.0);
            x.signum() * (x.abs() + 0.1)
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// Every case at the given geometry.
pub fn cases(dims: SuiteDims) -> Result<Vec<Case>> {
    let enc_cfg = dims.encoder_config()?;
    let mut rng = seed::rng(SUITE_SEED);
    let mut r = |shape: &[usize]| away_from_zero(&mut rng, shape).with_requires_grad(true);
    let d = dims.embed_dim;
    let mut out = vec![
        Case { name: "matmul", kind: Kind::Matmul, inputs: vec![r(&[3, d]), r(&[d, 4])] },
        Case { name: "add", kind: Kind::Add, inputs: vec![r(&[3, 4]), r(&[3, 4])] },
        Case { name: "mul", kind: Kind::Mul, inputs: vec![r(&[3, 4]), r(&[3, 4])] },
        Case { name: "scale", kind: Kind::Scale, inputs: vec![r(&[3, 4])] },
        Case { name: "add_bias", kind: Kind::AddBias, inputs: vec![r(&[3, 4]), r(&[4])] },
        Case { name: "relu", kind: Kind::Relu, inputs: vec![r(&[3, 4])] },
        Case { name: "gelu", kind: Kind::Gelu, inputs: vec![r(&[3, 4])] },
        Case { name: "softmax", kind: Kind::Softmax, inputs: vec![r(&[3, 5])] },
        Case { name: "layernorm", kind: Kind::LayerNorm, inputs: vec![r(&[3, d]), r(&[d]), r(&[d])] },
        Case { name: "transpose", kind: Kind::Transpose, inputs: vec![r(&[3, 4])] },
        Case { name: "slice_cols", kind: Kind::SliceCols, inputs: vec![r(&[3, 4])] },
        Case { name: "concat_cols", kind: Kind::ConcatCols, inputs: vec![r(&[3, 2]), r(&[3, 4])] },
        Case { name: "concat_rows", kind: Kind::ConcatRows, inputs: vec![r(&[2, 4]), r(&[1, 4])] },
        Case { name: "mean_rows", kind: Kind::MeanRows, inputs: vec![r(&[3, 4])] },
        Case { name: "select_row", kind: Kind::SelectRow, inputs: vec![r(&[3, 4])] },
        Case { name: "normalize_rows", kind: Kind::NormalizeRows, inputs: vec![r(&[3, 4])] },
        Case {
            name: "cross_entropy",
            kind: Kind::CrossEntropy(vec![0, 4, 2, 2]),
            inputs: vec![r(&[4, 5])],
        },
        Case {
            name: "adapter",
            kind: Kind::Adapter,
            inputs: vec![r(&[3, d]), r(&[d, 4]), r(&[4]), r(&[4, d]), r(&[d])],
        },
    ];

    let mut rng = seed::rng(seed::derive(SUITE_SEED, &[1]));
    let mut enc = EncoderState::<f64>::init(&enc_cfg, 1)?;
    enc.unfreeze();
    for t in enc.params_mut() {
        randomise(t, &mut rng, 0.3);
    }
    // Softmax is shift-invariant along each row, so the key bias has an
    // identically zero gradient and no meaningful relative error.
    for b in &mut enc.blocks {
        b.b_k.set_requires_grad(false);
    }
    let blocks: Vec<usize> = (0..dims.num_blocks).collect();
    let ad_cfg = AdapterConfig::uniform(blocks, &AdapterKind::KINDS, 3);
    let mut ad = AdapterState::<f64>::init(&ad_cfg, d, dims.num_blocks, 2)?;
    for t in ad.params_mut() {
        randomise(t, &mut rng, 0.3);
    }
    let images = (0..2)
        .map(|_| away_from_zero(&mut rng, &enc_cfg.image_shape()))
        .collect();
    let mut inputs: Vec<Tensor<f64>> = enc.tensors().into_iter().cloned().collect();
    let encoder_len = inputs.len();
    inputs.extend(ad.params().into_iter().map(|(_, t)| t.clone()));
    inputs.push(away_from_zero(&mut rng, &[3, d]).with_requires_grad(true));
    out.push(Case {
        name: "encoder+adapters+cosine_head",
        kind: Kind::Composite(Box::new(CompositeSpec {
            encoder: enc_cfg,
            adapters: ad_cfg,
            encoder_len,
            images,
            targets: vec![0, 2],
        })),
        inputs,
    });
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub precision: &'static str,
    pub coords: usize,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Runs one case with analytic gradients in `A` against `f64` central
/// differences.
pub fn check_case<A: Scalar>(case: &Case, opts: GradCheckOptions) -> Result<SuiteEntry> {
    let report = grad_check_mixed(
        &|t: &mut Tape<A>, v: &[Var]| case.eval(t, v),
        &|t: &mut Tape<f64>, v: &[Var]| case.eval(t, v),
        &case.inputs,
        opts,
    )?;
    Ok(SuiteEntry {
        name: case.name,
        precision: A::NAME,
        coords: report.coords.len(),
        max_rel_error: report.max_rel_error,
        tol: report.tol,
        passed: report.passed,
    })
}

/// Every case in both precisions.
pub fn run_suite(dims: SuiteDims, tol64: f64, tol32: f64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for case in cases(dims)? {
        for (tol, wide) in [(tol64, true), (tol32, false)] {
            let opts = GradCheckOptions {
                step: 1e-3,
                tol,
                fourth_order: true,
            };
            out.push(if wide {
                check_case::<f64>(&case, opts)?
            } else {
                check_case::<f32>(&case, opts)?
            });
        }
    }
    Ok(out)
}
