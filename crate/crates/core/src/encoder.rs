//! Miniature ViT-style image encoder.
//!
//! Each block is pre-norm with residual connections:
//!
//! ```text
//! a = x + Attn(LN1(x))        self-attention, parameters theta_i
//! h = a + MLP(LN2(a))         MLP with GELU, parameters phi_i
//! ```
//!
//! Both `a` and `h` are exposed so adapters can tap and merge at either
//! point. Features are pooled (token mean, or the CLS token) and passed
//! through a final layer norm.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{self, AdapterState, AdapterVars};
use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tape, Tensor, Var};
use crate::seed;
use crate::weights::{self, TensorMap};

/// Standard deviation of the truncated-normal initialisation.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    ClsToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub pooling: Pooling,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            embed_dim: 16,
            num_blocks: 2,
            num_heads: 2,
            mlp_ratio: 2.0,
            pooling: Pooling::Mean,
            ln_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("encoder.image_size", self.image_size),
            ("encoder.patch_size", self.patch_size),
            ("encoder.channels", self.channels),
            ("encoder.embed_dim", self.embed_dim),
            ("encoder.num_blocks", self.num_blocks),
            ("encoder.num_heads", self.num_heads),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(
                "encoder.patch_size",
                format!(
                    "image_size {} not divisible by patch_size {}",
                    self.image_size, self.patch_size
                ),
            ));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::config(
                "encoder.num_heads",
                format!(
                    "embed_dim {} not divisible by num_heads {}",
                    self.embed_dim, self.num_heads
                ),
            ));
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) || self.mlp_hidden() == 0 {
            return Err(Error::config("encoder.mlp_ratio", "must be positive"));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::config("encoder.ln_eps", "must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches() + usize::from(self.pooling == Pooling::ClsToken)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }
}

/// Attention (`theta_i`) and MLP (`phi_i`) parameters of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T: Scalar = f32> {
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub w_q: Tensor<T>,
    pub b_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub b_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub b_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub b_o: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    pub w_fc1: Tensor<T>,
    pub b_fc1: Tensor<T>,
    pub w_fc2: Tensor<T>,
    pub b_fc2: Tensor<T>,
}

const BLOCK_FIELDS: [&str; 16] = [
    "ln1.gamma",
    "ln1.beta",
    "attn.w_q",
    "attn.b_q",
    "attn.w_k",
    "attn.b_k",
    "attn.w_v",
    "attn.b_v",
    "attn.w_o",
    "attn.b_o",
    "ln2.gamma",
    "ln2.beta",
    "mlp.w_fc1",
    "mlp.b_fc1",
    "mlp.w_fc2",
    "mlp.b_fc2",
];

impl<T: Scalar> BlockParams<T> {
    fn init<R: rand::Rng>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        let hidden = cfg.mlp_hidden();
        let mut w = |rows, cols| seed::truncated_normal_tensor(rng, &[rows, cols], INIT_STD);
        let (w_q, w_k, w_v, w_o) = (w(d, d), w(d, d), w(d, d), w(d, d));
        let (w_fc1, w_fc2) = (w(d, hidden), w(hidden, d));
        Self {
            ln1_gamma: Tensor::ones(&[d]),
            ln1_beta: Tensor::zeros(&[d]),
            w_q,
            b_q: Tensor::zeros(&[d]),
            w_k,
            b_k: Tensor::zeros(&[d]),
            w_v,
            b_v: Tensor::zeros(&[d]),
            w_o,
            b_o: Tensor::zeros(&[d]),
            ln2_gamma: Tensor::ones(&[d]),
            ln2_beta: Tensor::zeros(&[d]),
            w_fc1,
            b_fc1: Tensor::zeros(&[hidden]),
            w_fc2,
            b_fc2: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [&Tensor<T>; 16] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.w_q,
            &self.b_q,
            &self.w_k,
            &self.b_k,
            &self.w_v,
            &self.b_v,
            &self.w_o,
            &self.b_o,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w_fc1,
            &self.b_fc1,
            &self.w_fc2,
            &self.b_fc2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 16] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.w_q,
            &mut self.b_q,
            &mut self.w_k,
            &mut self.b_k,
            &mut self.w_v,
            &mut self.b_v,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.w_fc1,
            &mut self.b_fc1,
            &mut self.w_fc2,
            &mut self.b_fc2,
        ]
    }

    /// Zeros the attention and MLP output projections, turning both
    /// sub-layers into identities through their residual paths.
    pub fn zero_output_projections(&mut self) {
        for t in [&mut self.w_o, &mut self.b_o, &mut self.w_fc2, &mut self.b_fc2] {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

}

/// Tape handles for one block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub w_fc1: Var,
    pub b_fc1: Var,
    pub w_fc2: Var,
    pub b_fc2: Var,
}

impl BlockVars {
    fn from_array(v: [Var; 16]) -> Self {
        BlockVars {
            ln1_gamma: v[0],
            ln1_beta: v[1],
            w_q: v[2],
            b_q: v[3],
            w_k: v[4],
            b_k: v[5],
            w_v: v[6],
            b_v: v[7],
            w_o: v[8],
            b_o: v[9],
            ln2_gamma: v[10],
            ln2_beta: v[11],
            w_fc1: v[12],
            b_fc1: v[13],
            w_fc2: v[14],
            b_fc2: v[15],
        }
    }

    fn to_array(self) -> [Var; 16] {
        [
            self.ln1_gamma,
            self.ln1_beta,
            self.w_q,
            self.b_q,
            self.w_k,
            self.b_k,
            self.w_v,
            self.b_v,
            self.w_o,
            self.b_o,
            self.ln2_gamma,
            self.ln2_beta,
            self.w_fc1,
            self.b_fc1,
            self.w_fc2,
            self.b_fc2,
        ]
    }
}

/// Pre-trained encoder parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState<T: Scalar = f32> {
    config: EncoderConfig,
    pub patch_proj: Tensor<T>,
    pub patch_bias: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub cls_token: Option<Tensor<T>>,
    pub blocks: Vec<BlockParams<T>>,
    pub post_gamma: Tensor<T>,
    pub post_beta: Tensor<T>,
}

/// Tape handles for a bound [`EncoderState`].
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub patch_proj: Var,
    pub patch_bias: Var,
    pub pos_embed: Var,
    pub cls_token: Option<Var>,
    pub blocks: Vec<BlockVars>,
    pub post_gamma: Var,
    pub post_beta: Var,
}

impl EncoderVars {
    /// Handles in [`EncoderState::tensors`] order.
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![
            self.patch_proj,
            self.patch_bias,
            self.pos_embed,
            self.post_gamma,
            self.post_beta,
        ];
        out.extend(self.cls_token);
        for b in &self.blocks {
            out.extend(b.to_array());
        }
        out
    }

    /// Inverse of [`EncoderVars::ordered`].
    pub fn from_ordered(config: &EncoderConfig, vars: &[Var]) -> Result<Self> {
        let head = 5 + usize::from(config.pooling == Pooling::ClsToken);
        let expected = head + 16 * config.num_blocks;
        if vars.len() != expected {
            return Err(Error::contract(format!(
                "expected {expected} encoder vars, got {}",
                vars.len()
            )));
        }
        let blocks = vars[head..]
            .chunks(16)
            .map(|c| BlockVars::from_array(c.try_into().expect("chunk of 16")))
            .collect();
        Ok(Self {
            patch_proj: vars[0],
            patch_bias: vars[1],
            pos_embed: vars[2],
            post_gamma: vars[3],
            post_beta: vars[4],
            cls_token: (head == 6).then(|| vars[5]),
            blocks,
        })
    }
}

impl<T: Scalar> EncoderState<T> {
    /// Random initialisation: truncated normal (std 0.02) for projections,
    /// positional and CLS embeddings; zeros for biases; unit LN gains.
    /// The returned state is frozen.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mut rng = seed::rng(seed);
        let patch_proj = seed::truncated_normal_tensor(&mut rng, &[config.patch_dim(), d], INIT_STD);
        let pos_embed = seed::truncated_normal_tensor(&mut rng, &[config.num_tokens(), d], INIT_STD);
        let cls_token = (config.pooling == Pooling::ClsToken)
            .then(|| seed::truncated_normal_tensor(&mut rng, &[1, d], INIT_STD));
        let blocks = (0..config.num_blocks)
            .map(|_| BlockParams::init(config, &mut rng))
            .collect();
        Ok(Self {
            config: config.clone(),
            patch_proj,
            patch_bias: Tensor::zeros(&[d]),
            pos_embed,
            cls_token,
            blocks,
            post_gamma: Tensor::ones(&[d]),
            post_beta: Tensor::zeros(&[d]),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// All parameters with their weight-file names.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("encoder.patch_proj".to_string(), &self.patch_proj),
            ("encoder.patch_bias".to_string(), &self.patch_bias),
            ("encoder.pos_embed".to_string(), &self.pos_embed),
            ("encoder.post_norm.gamma".to_string(), &self.post_gamma),
            ("encoder.post_norm.beta".to_string(), &self.post_beta),
        ];
        if let Some(cls) = &self.cls_token {
            out.push(("encoder.cls_token".to_string(), cls));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            for (field, t) in BLOCK_FIELDS.iter().zip(b.tensors()) {
                out.push((format!("encoder.block.{i}.{field}"), t));
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Every parameter in a fixed order: stem, final norm, CLS token, then
    /// blocks field by field.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![
            &self.patch_proj,
            &self.patch_bias,
            &self.pos_embed,
            &self.post_gamma,
            &self.post_beta,
        ];
        out.extend(&self.cls_token);
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out
    }

    /// Mutable counterpart of [`EncoderState::tensors`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![
            &mut self.patch_proj,
            &mut self.patch_bias,
            &mut self.pos_embed,
            &mut self.post_gamma,
            &mut self.post_beta,
        ];
        if let Some(cls) = &mut self.cls_token {
            out.push(cls);
        }
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn freeze(&mut self) {
        self.params_mut()
            .into_iter()
            .for_each(|t| t.set_requires_grad(false));
    }

    /// Marks every parameter trainable (used to pre-train a stand-in backbone).
    pub fn unfreeze(&mut self) {
        self.params_mut()
            .into_iter()
            .for_each(|t| t.set_requires_grad(true));
    }

    pub fn is_frozen(&self) -> bool {
        self.named_params().iter().all(|(_, t)| !t.requires_grad())
    }

    pub fn cast<U: Scalar>(&self) -> EncoderState<U> {
        let block = |b: &BlockParams<T>| {
            let t = b.tensors();
            BlockParams {
                ln1_gamma: t[0].cast(),
                ln1_beta: t[1].cast(),
                w_q: t[2].cast(),
                b_q: t[3].cast(),
                w_k: t[4].cast(),
                b_k: t[5].cast(),
                w_v: t[6].cast(),
                b_v: t[7].cast(),
                w_o: t[8].cast(),
                b_o: t[9].cast(),
                ln2_gamma: t[10].cast(),
                ln2_beta: t[11].cast(),
                w_fc1: t[12].cast(),
                b_fc1: t[13].cast(),
                w_fc2: t[14].cast(),
                b_fc2: t[15].cast(),
            }
        };
        EncoderState {
            config: self.config.clone(),
            patch_proj: self.patch_proj.cast(),
            patch_bias: self.patch_bias.cast(),
            pos_embed: self.pos_embed.cast(),
            cls_token: self.cls_token.as_ref().map(Tensor::cast),
            blocks: self.blocks.iter().map(block).collect(),
            post_gamma: self.post_gamma.cast(),
            post_beta: self.post_beta.cast(),
        }
    }

    /// Records every parameter on `tape`; frozen ones receive no gradient.
    pub fn bind(&self, tape: &mut Tape<T>) -> EncoderVars {
        let vars: Vec<Var> = self.tensors().into_iter().map(|t| tape.leaf(t)).collect();
        EncoderVars::from_ordered(&self.config, &vars).expect("tensor list matches config")
    }

    /// Returns `(a_i, h_i)` for block `i` without adapters.
    pub fn block_forward(&self, index: usize, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let (a, h) = block_forward(&mut tape, &self.config, &vars, index, xv)?;
        Ok((tape.value(a).clone(), tape.value(h).clone()))
    }
}

impl EncoderState<f32> {
    pub fn to_tensor_map(&self) -> TensorMap {
        self.named_params()
            .into_iter()
            .map(|(n, t)| {
                let mut t = t.clone();
                t.set_requires_grad(false);
                (n, t)
            })
            .collect()
    }

    /// Rebuilds a frozen state from named tensors, checking every shape
    /// against `config`.
    pub fn from_tensor_map(config: &EncoderConfig, map: &TensorMap) -> Result<Self> {
        config.validate()?;
        let mut map = map.clone();
        map.retain(|k, _| k.starts_with("encoder."));
        let d = config.embed_dim;
        let hidden = config.mlp_hidden();
        let proj = map
            .get("encoder.patch_proj")
            .ok_or_else(|| Error::format("encoder.patch_proj", "missing record"))?;
        if proj.shape() != [config.patch_dim(), d] {
            return Err(Error::format(
                "encoder.patch_proj",
                format!(
                    "file has shape {:?} but config expects patch_dim {} x embed_dim {d}",
                    proj.shape(),
                    config.patch_dim()
                ),
            ));
        }
        let mut take = |name: &str, shape: &[usize]| weights::take_shaped(&mut map, name, shape);
        let patch_proj = take("encoder.patch_proj", &[config.patch_dim(), d])?;
        let patch_bias = take("encoder.patch_bias", &[d])?;
        let pos_embed = take("encoder.pos_embed", &[config.num_tokens(), d])?;
        let cls_token = match config.pooling {
            Pooling::ClsToken => Some(take("encoder.cls_token", &[1, d])?),
            Pooling::Mean => None,
        };
        let post_gamma = take("encoder.post_norm.gamma", &[d])?;
        let post_beta = take("encoder.post_norm.beta", &[d])?;
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for i in 0..config.num_blocks {
            let shapes: [Vec<usize>; 16] = [
                vec![d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d],
                vec![d, hidden],
                vec![hidden],
                vec![hidden, d],
                vec![d],
            ];
            let mut ts = Vec::with_capacity(16);
            for (field, shape) in BLOCK_FIELDS.iter().zip(&shapes) {
                ts.push(take(&format!("encoder.block.{i}.{field}"), shape)?);
            }
            let mut it = ts.into_iter();
            let mut next = || it.next().expect("16 block tensors");
            blocks.push(BlockParams {
                ln1_gamma: next(),
                ln1_beta: next(),
                w_q: next(),
                b_q: next(),
                w_k: next(),
                b_k: next(),
                w_v: next(),
                b_v: next(),
                w_o: next(),
                b_o: next(),
                ln2_gamma: next(),
                ln2_beta: next(),
                w_fc1: next(),
                b_fc1: next(),
                w_fc2: next(),
                b_fc2: next(),
            });
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::format(
                extra.clone(),
                format!("unexpected record for a {}-block encoder", config.num_blocks),
            ));
        }
        Ok(Self {
            config: config.clone(),
            patch_proj,
            patch_bias,
            pos_embed,
            cls_token,
            blocks,
            post_gamma,
            post_beta,
        })
    }

    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<()> {
        weights::write_file(path, &self.to_tensor_map())
    }

    pub fn load_weights(config: &EncoderConfig, path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor_map(config, &weights::read_file(path)?)
    }
}

/// Flattens a `[C, H, W]` image into `[num_patches, C * p * p]`, patches in
/// row-major grid order, each patch ordered channel, row, column.
pub fn patchify<T: Scalar>(cfg: &EncoderConfig, image: &Tensor<T>) -> Result<Tensor<T>> {
    if image.shape() != cfg.image_shape() {
        return Err(Error::dim("patchify", image.shape(), &cfg.image_shape()));
    }
    let (p, s, grid) = (cfg.patch_size, cfg.image_size, cfg.grid());
    let px = image.data();
    let mut data = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for gy in 0..grid {
        for gx in 0..grid {
            for c in 0..cfg.channels {
                for dy in 0..p {
                    let row = (c * s + gy * p + dy) * s + gx * p;
                    data.extend_from_slice(&px[row..row + p]);
                }
            }
        }
    }
    Tensor::new(&[cfg.num_patches(), cfg.patch_dim()], data)
}

/// Token sequence `x_0`: patch embedding (plus CLS) plus positions.
pub fn embed_tokens<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &EncoderConfig,
    vars: &EncoderVars,
    image: &Tensor<T>,
) -> Result<Var> {
    let patches = tape.constant(patchify(cfg, image)?);
    let proj = tape.matmul(patches, vars.patch_proj)?;
    let proj = tape.add_bias(proj, vars.patch_bias)?;
    let tokens = match vars.cls_token {
        Some(cls) => tape.concat_rows(&[cls, proj])?,
        None => proj,
    };
    tape.add(tokens, vars.pos_embed)
}

/// `f_i`: `x + Attn(LN1(x))`.
pub fn attention<T: Scalar>(tape: &mut Tape<T>, cfg: &EncoderConfig, b: &BlockVars, x: Var) -> Result<Var> {
    let n = tape.layernorm(x, b.ln1_gamma, b.ln1_beta, cfg.ln_eps)?;
    let q = tape.matmul(n, b.w_q)?;
    let q = tape.add_bias(q, b.b_q)?;
    let k = tape.matmul(n, b.w_k)?;
    let k = tape.add_bias(k, b.b_k)?;
    let v = tape.matmul(n, b.w_v)?;
    let v = tape.add_bias(v, b.b_v)?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let probs = tape.softmax_rows(scores)?;
        heads.push(tape.matmul(probs, vh)?);
    }
    let merged = tape.concat_cols(&heads)?;
    let out = tape.matmul(merged, b.w_o)?;
    let out = tape.add_bias(out, b.b_o)?;
    tape.add(x, out)
}

/// `g_i`: `a + FC2(GELU(FC1(LN2(a))))`.
pub fn mlp<T: Scalar>(tape: &mut Tape<T>, cfg: &EncoderConfig, b: &BlockVars, a: Var) -> Result<Var> {
    let n = tape.layernorm(a, b.ln2_gamma, b.ln2_beta, cfg.ln_eps)?;
    let hidden = tape.matmul(n, b.w_fc1)?;
    let hidden = tape.add_bias(hidden, b.b_fc1)?;
    let hidden = tape.gelu(hidden);
    let out = tape.matmul(hidden, b.w_fc2)?;
    let out = tape.add_bias(out, b.b_fc2)?;
    tape.add(a, out)
}

fn block_vars<'a>(vars: &'a EncoderVars, index: usize) -> Result<&'a BlockVars> {
    vars.blocks.get(index).ok_or(Error::Range {
        what: "block",
        index,
        len: vars.blocks.len(),
    })
}

/// Plain block `i`: returns `(a_i, h_i)`.
pub fn block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &EncoderConfig,
    vars: &EncoderVars,
    index: usize,
    x: Var,
) -> Result<(Var, Var)> {
    let b = block_vars(vars, index)?;
    let d = tape.shape(x).last().copied().unwrap_or(0);
    if d != cfg.embed_dim {
        return Err(Error::dim("block_forward", tape.shape(x), &[cfg.embed_dim]));
    }
    let a = attention(tape, cfg, b, x)?;
    let h = mlp(tape, cfg, b, a)?;
    Ok((a, h))
}

pub(crate) fn block_parts<'a>(vars: &'a EncoderVars, index: usize) -> Result<&'a BlockVars> {
    block_vars(vars, index)
}

/// Pooling followed by the final layer norm; returns `[1, D]`.
pub fn pool<T: Scalar>(tape: &mut Tape<T>, cfg: &EncoderConfig, vars: &EncoderVars, h: Var) -> Result<Var> {
    let pooled = match cfg.pooling {
        Pooling::Mean => tape.mean_rows(h)?,
        Pooling::ClsToken => tape.select_row(h, 0)?,
    };
    tape.layernorm(pooled, vars.post_gamma, vars.post_beta, cfg.ln_eps)
}

/// Feature row `[1, D]` for one image, with optional adapters.
pub fn encode_image<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &EncoderConfig,
    vars: &EncoderVars,
    adapters: Option<&AdapterVars>,
    image: &Tensor<T>,
) -> Result<Var> {
    let mut x = embed_tokens(tape, cfg, vars, image)?;
    for i in 0..cfg.num_blocks {
        x = adapters::compose_block(tape, cfg, vars, adapters, i, x)?;
    }
    pool(tape, cfg, vars, x)
}

/// Encodes a batch of `[C, H, W]` images into `[batch, D]` features.
pub fn encode<T: Scalar>(
    state: &EncoderState<T>,
    adapters: Option<&AdapterState<T>>,
    images: &[Tensor<T>],
) -> Result<Tensor<T>> {
    if images.is_empty() {
        return Err(Error::contract("encode needs at least one image"));
    }
    if let Some(ad) = adapters {
        ad.check_compatible(state.config())?;
    }
    let mut tape = Tape::new();
    let vars = state.bind(&mut tape);
    let avars = adapters.map(|a| a.bind(&mut tape));
    let rows = images
        .iter()
        .map(|img| encode_image(&mut tape, state.config(), &vars, avars.as_ref(), img))
        .collect::<Result<Vec<_>>>()?;
    let out = tape.concat_rows(&rows)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            embed_dim: 8,
            num_blocks: 2,
            num_heads: 2,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn init_shapes() {
        let s = EncoderState::<f32>::init(&tiny(), 1).unwrap();
        assert_eq!(s.patch_proj.shape(), &[48, 8]);
        assert_eq!(s.pos_embed.shape(), &[4, 8]);
        assert_eq!(s.blocks.len(), 2);
        assert!(s.is_frozen());
    }

    #[test]
    fn init_deterministic() {
        let a = EncoderState::<f32>::init(&tiny(), 9).unwrap();
        let b = EncoderState::<f32>::init(&tiny(), 9).unwrap();
        assert_eq!(a, b);
        let c = EncoderState::<f32>::init(&tiny(), 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_configs() {
        let cfg = EncoderConfig {
            embed_dim: 7,
            num_heads: 2,
            ..tiny()
        };
        let err = EncoderState::<f32>::init(&cfg, 0).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
        let cfg = EncoderConfig {
            image_size: 9,
            ..tiny()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zeroed_projections_are_residual_identity() {
        let mut s = EncoderState::<f32>::init(&tiny(), 2).unwrap();
        s.blocks[1].zero_output_projections();
        let mut r = seed::rng(5);
        let x: Tensor<f32> = seed::truncated_normal_tensor(&mut r, &[5, 8], 1.0);
        let (a, h) = s.block_forward(1, &x).unwrap();
        assert_eq!(a, x);
        assert_eq!(h, a);
    }

    #[test]
    fn block_index_out_of_range() {
        let s = EncoderState::<f32>::init(&tiny(), 2).unwrap();
        let x = Tensor::<f32>::zeros(&[4, 8]);
        assert!(matches!(s.block_forward(2, &x), Err(Error::Range { .. })));
    }

    #[test]
    fn batch_shape_and_bad_image() {
        let s = EncoderState::<f32>::init(&tiny(), 2).unwrap();
        let imgs: Vec<Tensor<f32>> = (0..3)
            .map(|i| Tensor::full(&[3, 8, 8], i as f32 * 0.1 + 0.05))
            .collect();
        let out = encode(&s, None, &imgs).unwrap();
        assert_eq!(out.shape(), &[3, 8]);
        assert!(encode(&s, None, &[Tensor::zeros(&[3, 4, 4])]).is_err());
    }

    #[test]
    fn cls_pooling_runs() {
        let cfg = EncoderConfig {
            pooling: Pooling::ClsToken,
            ..tiny()
        };
        let s = EncoderState::<f32>::init(&cfg, 2).unwrap();
        assert_eq!(s.pos_embed.shape(), &[5, 8]);
        let out = encode(&s, None, &[Tensor::full(&[3, 8, 8], 0.3)]).unwrap();
        assert_eq!(out.shape(), &[1, 8]);
    }

    #[test]
    fn patchify_layout() {
        let cfg = EncoderConfig {
            image_size: 4,
            patch_size: 2,
            channels: 1,
            embed_dim: 4,
            num_heads: 1,
            ..EncoderConfig::default()
        };
        let img = Tensor::<f32>::new(&[1, 4, 4], (0..16).map(|v| v as f32).collect()).unwrap();
        let p = patchify(&cfg, &img).unwrap();
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn weight_file_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.siml");
        let s = EncoderState::<f32>::init(&tiny(), 4).unwrap();
        s.save_weights(&path).unwrap();
        let back = EncoderState::load_weights(&tiny(), &path).unwrap();
        for ((na, a), (nb, b)) in s.named_params().iter().zip(back.named_params()) {
            assert_eq!(na, &nb);
            assert!(a.bit_eq(b));
        }
        let wrong = EncoderConfig {
            embed_dim: 16,
            ..tiny()
        };
        let msg = EncoderState::load_weights(&wrong, &path).unwrap_err().to_string();
        assert!(msg.contains("embed_dim 16"), "{msg}");
        assert!(msg.contains("[48, 8]"), "{msg}");

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            EncoderState::load_weights(&tiny(), &path),
            Err(Error::Format { .. })
        ));
    }
}
