//! Multi-Adapter bottleneck modules.
//!
//! Each adapter is `alpha * (ReLU(c W_down + b_down) W_up + b_up)`, with
//! `W_down: [D, R]` and `W_up: [R, D]`. Three kinds differ only in where they
//! tap their input `c` and where their output is merged:
//!
//! | kind     | j | taps  | merges into |
//! |----------|---|-------|-------------|
//! | `Mlp`    | 1 | `a_i` | `h_i`       |
//! | `Atten`  | 2 | `x_i` | `a_i`       |
//! | `All`    | 3 | `x_i` | `h_i`       |
//!
//! A block with kinds `Z` computes
//! `a = f(x) [+ Atten(x)]`, then `h = g(a) [+ Mlp(a)] [+ All(x)]`.
//! `Mlp` alone at every block is the AdaptFormer layout; see
//! [`adaptformer_encode`] for that formulation written out separately.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderConfig, EncoderState, EncoderVars};
use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tape, Tensor, Var};
use crate::seed;
use crate::weights::{self, TensorMap};

/// Default residual scaling of the adapter branch.
pub const DEFAULT_ALPHA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Mlp,
    Atten,
    All,
}

impl AdapterKind {
    pub const KINDS: [AdapterKind; 3] = [AdapterKind::Mlp, AdapterKind::Atten, AdapterKind::All];

    /// Sub-module index `j`.
    pub fn index(self) -> u8 {
        match self {
            AdapterKind::Mlp => 1,
            AdapterKind::Atten => 2,
            AdapterKind::All => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::Mlp => "mlp",
            AdapterKind::Atten => "atten",
            AdapterKind::All => "all",
        }
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mlp" | "adaptmlp" | "1" => Ok(AdapterKind::Mlp),
            "atten" | "attn" | "adaptatten" | "2" => Ok(AdapterKind::Atten),
            "all" | "adaptall" | "3" => Ok(AdapterKind::All),
            other => Err(Error::config(
                "adapters.kinds",
                format!("unknown adapter kind `{other}` (mlp, atten, all)"),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Placement {
    /// Zero-based block index.
    pub block: usize,
    pub kind: AdapterKind,
}

impl Placement {
    pub fn new(block: usize, kind: AdapterKind) -> Self {
        Self { block, kind }
    }

    fn prefix(&self) -> String {
        format!("adapter.{}.{}", self.block, self.kind)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterConfig {
    pub placements: BTreeSet<Placement>,
    pub bottleneck: usize,
    pub alpha: f64,
    pub biases: bool,
    pub activation: Activation,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            placements: BTreeSet::new(),
            bottleneck: 64,
            alpha: DEFAULT_ALPHA,
            biases: true,
            activation: Activation::Relu,
        }
    }
}

impl AdapterConfig {
    /// Every kind in `kinds` at every block in `blocks`.
    pub fn uniform(
        blocks: impl IntoIterator<Item = usize>,
        kinds: &[AdapterKind],
        bottleneck: usize,
    ) -> Self {
        let placements = blocks
            .into_iter()
            .flat_map(|b| kinds.iter().map(move |&k| Placement::new(b, k)))
            .collect();
        Self {
            placements,
            bottleneck,
            ..Self::default()
        }
    }

    pub fn none(bottleneck: usize) -> Self {
        Self::uniform([], &[], bottleneck)
    }

    pub fn validate(&self, num_blocks: usize) -> Result<()> {
        if self.bottleneck == 0 {
            return Err(Error::config("adapters.bottleneck", "must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(
                "adapters.alpha",
                format!("must be a positive finite scale, got {}", self.alpha),
            ));
        }
        if let Some(p) = self.placements.iter().find(|p| p.block >= num_blocks) {
            return Err(Error::config(
                "adapters.blocks",
                format!("block {} outside encoder with {num_blocks} blocks", p.block + 1),
            ));
        }
        Ok(())
    }

    /// Kinds placed at `block` (the set `Z` of that block).
    pub fn kinds_at(&self, block: usize) -> Vec<AdapterKind> {
        self.placements
            .iter()
            .filter(|p| p.block == block)
            .map(|p| p.kind)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.placements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.placements.is_empty()
    }
}

/// Trainable parameters per placement, ignoring any classifier.
pub fn params_per_adapter(embed_dim: usize, bottleneck: usize, biases: bool) -> u64 {
    let (d, r) = (embed_dim as u64, bottleneck as u64);
    if biases {
        d * r + r + r * d + d
    } else {
        2 * d * r
    }
}

/// Exact trainable-parameter count of an adapter configuration, plus an
/// optional `(feature_dim, num_classes)` classifier.
pub fn count_trainable(config: &AdapterConfig, embed_dim: usize, classifier: Option<(usize, usize)>) -> u64 {
    let adapters = config.placements.len() as u64
        * params_per_adapter(embed_dim, config.bottleneck, config.biases);
    let head = classifier.map_or(0, |(d, c)| (d * c) as u64);
    adapters + head
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams<T: Scalar = f32> {
    pub w_down: Tensor<T>,
    pub b_down: Option<Tensor<T>>,
    pub w_up: Tensor<T>,
    pub b_up: Option<Tensor<T>>,
}

impl<T: Scalar> AdapterParams<T> {
    fn init<R: rand::Rng>(d: usize, r: usize, biases: bool, rng: &mut R) -> Self {
        Self {
            w_down: seed::truncated_normal_tensor(rng, &[d, r], encoder::INIT_STD),
            b_down: biases.then(|| Tensor::zeros(&[r])),
            w_up: Tensor::zeros(&[r, d]),
            b_up: biases.then(|| Tensor::zeros(&[d])),
        }
    }

    fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut v = vec![("w_down", &self.w_down)];
        if let Some(b) = &self.b_down {
            v.push(("b_down", b));
        }
        v.push(("w_up", &self.w_up));
        if let Some(b) = &self.b_up {
            v.push(("b_up", b));
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![&mut self.w_down];
        if let Some(b) = &mut self.b_down {
            v.push(b);
        }
        v.push(&mut self.w_up);
        if let Some(b) = &mut self.b_up {
            v.push(b);
        }
        v
    }

    /// Sets the up-projection (and its bias) to zero: the adapter is "off".
    pub fn switch_off(&mut self) {
        self.w_up.data_mut().iter_mut().for_each(|v| *v = T::zero());
        if let Some(b) = &mut self.b_up {
            b.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    fn cast<U: Scalar>(&self) -> AdapterParams<U> {
        AdapterParams {
            w_down: self.w_down.cast(),
            b_down: self.b_down.as_ref().map(Tensor::cast),
            w_up: self.w_up.cast(),
            b_up: self.b_up.as_ref().map(Tensor::cast),
        }
    }

    fn bind(&self, tape: &mut Tape<T>) -> AdapterParamVars {
        AdapterParamVars {
            w_down: tape.leaf(&self.w_down),
            b_down: self.b_down.as_ref().map(|t| tape.leaf(t)),
            w_up: tape.leaf(&self.w_up),
            b_up: self.b_up.as_ref().map(|t| tape.leaf(t)),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdapterParamVars {
    pub w_down: Var,
    pub b_down: Option<Var>,
    pub w_up: Var,
    pub b_up: Option<Var>,
}

/// Tape handles for every placed adapter.
#[derive(Clone, Debug)]
pub struct AdapterVars {
    pub alpha: f64,
    pub modules: BTreeMap<Placement, AdapterParamVars>,
}

impl AdapterVars {
    /// Handles in [`AdapterState::params`] order.
    pub fn ordered(&self) -> Vec<Var> {
        self.modules
            .values()
            .flat_map(|p| [Some(p.w_down), p.b_down, Some(p.w_up), p.b_up])
            .flatten()
            .collect()
    }

    /// Rebuilds handles from vars listed in [`AdapterState::params`] order.
    pub fn from_ordered(config: &AdapterConfig, vars: &[Var]) -> Result<Self> {
        let per = if config.biases { 4 } else { 2 };
        if vars.len() != per * config.placements.len() {
            return Err(Error::contract(format!(
                "expected {} adapter vars, got {}",
                per * config.placements.len(),
                vars.len()
            )));
        }
        let modules = config
            .placements
            .iter()
            .zip(vars.chunks(per))
            .map(|(&p, v)| {
                let pv = if config.biases {
                    AdapterParamVars {
                        w_down: v[0],
                        b_down: Some(v[1]),
                        w_up: v[2],
                        b_up: Some(v[3]),
                    }
                } else {
                    AdapterParamVars {
                        w_down: v[0],
                        b_down: None,
                        w_up: v[1],
                        b_up: None,
                    }
                };
                (p, pv)
            })
            .collect();
        Ok(Self {
            alpha: config.alpha,
            modules,
        })
    }

    fn get(&self, block: usize, kind: AdapterKind) -> Option<&AdapterParamVars> {
        self.modules.get(&Placement::new(block, kind))
    }
}

/// Adapter parameters for every placement in a configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterState<T: Scalar = f32> {
    config: AdapterConfig,
    embed_dim: usize,
    pub modules: BTreeMap<Placement, AdapterParams<T>>,
}

impl<T: Scalar> AdapterState<T> {
    /// `W_down` truncated normal (std 0.02), `W_up` and biases zero, so a
    /// fresh state leaves the encoder function unchanged. Parameters start
    /// trainable.
    pub fn init(config: &AdapterConfig, embed_dim: usize, num_blocks: usize, seed: u64) -> Result<Self> {
        config.validate(num_blocks)?;
        let mut rng = seed::rng(seed);
        let modules = config
            .placements
            .iter()
            .map(|&p| {
                let mut params =
                    AdapterParams::init(embed_dim, config.bottleneck, config.biases, &mut rng);
                params
                    .tensors_mut()
                    .into_iter()
                    .for_each(|t| t.set_requires_grad(true));
                (p, params)
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            embed_dim,
            modules,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn check_compatible(&self, enc: &EncoderConfig) -> Result<()> {
        if self.embed_dim != enc.embed_dim {
            return Err(Error::config(
                "adapters",
                format!(
                    "adapter width {} does not match encoder embed_dim {}",
                    self.embed_dim, enc.embed_dim
                ),
            ));
        }
        self.config.validate(enc.num_blocks)
    }

    /// Parameters in placement order, each as `w_down, b_down, w_up, b_up`.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        self.modules
            .iter()
            .flat_map(|(p, m)| {
                let prefix = p.prefix();
                m.named()
                    .into_iter()
                    .map(move |(n, t)| (format!("{prefix}.{n}"), t))
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.modules
            .values_mut()
            .flat_map(AdapterParams::tensors_mut)
            .collect()
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.params_mut()
            .into_iter()
            .for_each(|t| t.set_requires_grad(flag));
    }

    pub fn is_frozen(&self) -> bool {
        self.params().iter().all(|(_, t)| !t.requires_grad())
    }

    /// Number of scalar parameters actually held.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> AdapterState<U> {
        AdapterState {
            config: self.config.clone(),
            embed_dim: self.embed_dim,
            modules: self.modules.iter().map(|(&p, m)| (p, m.cast())).collect(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> AdapterVars {
        AdapterVars {
            alpha: self.config.alpha,
            modules: self.modules.iter().map(|(&p, m)| (p, m.bind(tape))).collect(),
        }
    }

    /// Output of the adapter at `placement` for input rows `c: [tokens, D]`.
    pub fn forward(&self, placement: Placement, c: &Tensor<T>) -> Result<Tensor<T>> {
        let module = self.modules.get(&placement).ok_or_else(|| {
            Error::config(
                "adapters.placements",
                format!("no adapter at block {} kind {}", placement.block, placement.kind),
            )
        })?;
        let mut tape = Tape::new();
        let pv = module.bind(&mut tape);
        let cv = tape.constant(c.clone());
        let out = adapter_forward(&mut tape, &pv, self.config.alpha, cv)?;
        Ok(tape.value(out).clone())
    }

    /// Copies this state into a configuration with more placements. Shared
    /// placements keep their parameters; new ones get a fresh `W_down` and a
    /// zero up-projection, so the end-to-end function is unchanged.
    pub fn embed_into_larger(&self, target: &AdapterConfig, num_blocks: usize, seed: u64) -> Result<Self> {
        target.validate(num_blocks)?;
        if !self.config.placements.is_subset(&target.placements) {
            let missing: Vec<String> = self
                .config
                .placements
                .difference(&target.placements)
                .map(|p| format!("{}:{}", p.block + 1, p.kind))
                .collect();
            return Err(Error::config(
                "adapters.placements",
                format!("target drops existing placements {}", missing.join(",")),
            ));
        }
        if target.bottleneck != self.config.bottleneck || target.biases != self.config.biases {
            return Err(Error::config(
                "adapters.bottleneck",
                "target must keep bottleneck width and bias layout",
            ));
        }
        if target.alpha.to_bits() != self.config.alpha.to_bits() {
            return Err(Error::config("adapters.alpha", "target must keep alpha"));
        }
        let mut fresh = AdapterState::<T>::init(target, self.embed_dim, num_blocks, seed)?;
        for (p, m) in fresh.modules.iter_mut() {
            match self.modules.get(p) {
                Some(existing) => *m = existing.clone(),
                None => m.switch_off(),
            }
        }
        Ok(fresh)
    }
}

impl AdapterState<f32> {
    pub fn to_tensor_map(&self) -> TensorMap {
        self.params()
            .into_iter()
            .map(|(n, t)| {
                let mut t = t.clone();
                t.set_requires_grad(false);
                (n, t)
            })
            .collect()
    }

    /// Rebuilds a frozen state from named tensors.
    pub fn from_tensor_map(config: &AdapterConfig, embed_dim: usize, num_blocks: usize, map: &TensorMap) -> Result<Self> {
        config.validate(num_blocks)?;
        let mut map: TensorMap = map
            .iter()
            .filter(|(k, _)| k.starts_with("adapter."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let (d, r) = (embed_dim, config.bottleneck);
        let mut modules = BTreeMap::new();
        for &p in &config.placements {
            let prefix = p.prefix();
            let mut take = |n: &str, shape: &[usize]| {
                weights::take_shaped(&mut map, &format!("{prefix}.{n}"), shape)
            };
            let w_down = take("w_down", &[d, r])?;
            let b_down = config.biases.then(|| take("b_down", &[r])).transpose()?;
            let w_up = take("w_up", &[r, d])?;
            let b_up = config.biases.then(|| take("b_up", &[d])).transpose()?;
            modules.insert(
                p,
                AdapterParams {
                    w_down,
                    b_down,
                    w_up,
                    b_up,
                },
            );
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::format(extra.clone(), "record not in adapter config"));
        }
        Ok(Self {
            config: config.clone(),
            embed_dim,
            modules,
        })
    }

    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<()> {
        weights::write_file(path, &self.to_tensor_map())
    }

    pub fn load_weights(config: &AdapterConfig, embed_dim: usize, num_blocks: usize, path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor_map(config, embed_dim, num_blocks, &weights::read_file(path)?)
    }
}

/// `alpha * (ReLU(c W_down + b_down) W_up + b_up)`
pub fn adapter_forward<T: Scalar>(tape: &mut Tape<T>, p: &AdapterParamVars, alpha: f64, c: Var) -> Result<Var> {
    let z = tape.matmul(c, p.w_down)?;
    let z = match p.b_down {
        Some(b) => tape.add_bias(z, b)?,
        None => z,
    };
    let z = tape.relu(z);
    let u = tape.matmul(z, p.w_up)?;
    let u = match p.b_up {
        Some(b) => tape.add_bias(u, b)?,
        None => u,
    };
    Ok(tape.scale(u, alpha))
}

/// Block `i` with the adapters placed there; returns `h_i`.
pub fn compose_block<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &EncoderConfig,
    enc: &EncoderVars,
    adapters: Option<&AdapterVars>,
    index: usize,
    x: Var,
) -> Result<Var> {
    let Some(ad) = adapters else {
        return Ok(encoder::block_forward(tape, cfg, enc, index, x)?.1);
    };
    let b = encoder::block_parts(enc, index)?;
    let mut a = encoder::attention(tape, cfg, b, x)?;
    if let Some(p) = ad.get(index, AdapterKind::Atten) {
        let s = adapter_forward(tape, p, ad.alpha, x)?;
        a = tape.add(a, s)?;
    }
    let mut h = encoder::mlp(tape, cfg, b, a)?;
    if let Some(p) = ad.get(index, AdapterKind::Mlp) {
        let s = adapter_forward(tape, p, ad.alpha, a)?;
        h = tape.add(h, s)?;
    }
    if let Some(p) = ad.get(index, AdapterKind::All) {
        let s = adapter_forward(tape, p, ad.alpha, x)?;
        h = tape.add(h, s)?;
    }
    Ok(h)
}

/// AdaptFormer block: `h = g(f(x)) + alpha * ReLU(f(x) W_down + b_down) W_up + b_up`,
/// or the plain block when no adapter sits at this block.
fn adaptformer_block<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &EncoderConfig,
    enc: &EncoderVars,
    adapter: Option<&AdapterParamVars>,
    alpha: f64,
    index: usize,
    x: Var,
) -> Result<Var> {
    let (a, h) = encoder::block_forward(tape, cfg, enc, index, x)?;
    let Some(p) = adapter else {
        return Ok(h);
    };
    let down = tape.matmul(a, p.w_down)?;
    let down = match p.b_down {
        Some(b) => tape.add_bias(down, b)?,
        None => down,
    };
    let act = tape.relu(down);
    let up = tape.matmul(act, p.w_up)?;
    let up = match p.b_up {
        Some(b) => tape.add_bias(up, b)?,
        None => up,
    };
    let branch = tape.scale(up, alpha);
    tape.add(h, branch)
}

/// Encodes images with the AdaptFormer formulation. Only `Mlp` placements
/// are accepted.
pub fn adaptformer_encode<T: Scalar>(
    state: &EncoderState<T>,
    adapters: &AdapterState<T>,
    images: &[Tensor<T>],
) -> Result<Tensor<T>> {
    adapters.check_compatible(state.config())?;
    if let Some(p) = adapters
        .config()
        .placements
        .iter()
        .find(|p| p.kind != AdapterKind::Mlp)
    {
        return Err(Error::config(
            "adapters.kinds",
            format!("AdaptFormer only places mlp adapters, found {}", p.kind),
        ));
    }
    let cfg = state.config();
    let mut tape = Tape::new();
    let enc = state.bind(&mut tape);
    let ad = adapters.bind(&mut tape);
    let mut rows = Vec::with_capacity(images.len());
    for img in images {
        let mut x = encoder::embed_tokens(&mut tape, cfg, &enc, img)?;
        for i in 0..cfg.num_blocks {
            let p = ad.get(i, AdapterKind::Mlp);
            x = adaptformer_block(&mut tape, cfg, &enc, p, ad.alpha, i, x)?;
        }
        rows.push(encoder::pool(&mut tape, cfg, &enc, x)?);
    }
    let out = tape.concat_rows(&rows)?;
    Ok(tape.value(out).clone())
}

/// Parses a 1-based block list such as `"1-3"`, `"1,4,7-9"`, `"all"` or
/// `"none"` into zero-based indices.
pub fn parse_blocks(spec: &str, num_blocks: usize) -> Result<BTreeSet<usize>> {
    let spec = spec.trim();
    match spec {
        "all" => return Ok((0..num_blocks).collect()),
        "none" | "" => return Ok(BTreeSet::new()),
        _ => {}
    }
    let bad = |msg: String| Error::config("adapters.blocks", msg);
    let mut out = BTreeSet::new();
    for part in spec.split(',') {
        let part = part.trim();
        let (lo, hi) = match part.split_once('-') {
            Some((a, b)) => (a.trim(), b.trim()),
            None => (part, part),
        };
        let lo: usize = lo.parse().map_err(|_| bad(format!("bad block `{part}`")))?;
        let hi: usize = hi.parse().map_err(|_| bad(format!("bad block `{part}`")))?;
        if lo == 0 || hi < lo || hi > num_blocks {
            return Err(bad(format!(
                "range `{part}` outside 1..={num_blocks}"
            )));
        }
        out.extend(lo - 1..hi);
    }
    Ok(out)
}

/// Parses `"mlp,atten"`, `"none"`, ... into a kind set.
pub fn parse_kinds(spec: &str) -> Result<Vec<AdapterKind>> {
    let spec = spec.trim();
    if spec == "none" || spec.is_empty() {
        return Ok(Vec::new());
    }
    let kinds: BTreeSet<AdapterKind> = spec
        .split(['+', ','])
        .map(str::parse)
        .collect::<Result<_>>()?;
    Ok(kinds.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_bottleneck() {
        let cfg = AdapterConfig {
            placements: [Placement::new(0, AdapterKind::Mlp)].into(),
            bottleneck: 1,
            alpha: 0.1,
            biases: false,
            activation: Activation::Relu,
        };
        let mut st = AdapterState::<f64>::init(&cfg, 2, 1, 0).unwrap();
        let m = st.modules.get_mut(&Placement::new(0, AdapterKind::Mlp)).unwrap();
        m.w_down = Tensor::from_f64(&[2, 1], &[1.0, 0.0]).unwrap();
        m.w_up = Tensor::from_f64(&[1, 2], &[2.0, 0.0]).unwrap();
        let c = Tensor::from_f64(&[2, 2], &[3.0, -5.0, 3.0, -5.0]).unwrap();
        let out = st.forward(Placement::new(0, AdapterKind::Mlp), &c).unwrap();
        for row in out.data().chunks(2) {
            assert!((row[0] - 0.6).abs() < 1e-12);
            assert_eq!(row[1], 0.0);
        }
    }

    #[test]
    fn zero_up_projection_annihilates() {
        let cfg = AdapterConfig::uniform([0], &[AdapterKind::All], 4);
        let st = AdapterState::<f32>::init(&cfg, 8, 1, 3).unwrap();
        let mut r = seed::rng(1);
        let c: Tensor<f32> = seed::truncated_normal_tensor(&mut r, &[5, 8], 3.0);
        let out = st.forward(Placement::new(0, AdapterKind::All), &c).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn counts_match_reference_table() {
        let one = AdapterConfig::uniform(0..12, &[AdapterKind::Mlp], 64);
        assert_eq!(count_trainable(&one, 768, None), 1_189_632);
        let no_bias = AdapterConfig {
            biases: false,
            ..one.clone()
        };
        assert_eq!(count_trainable(&no_bias, 768, None), 1_179_648);
        let two = AdapterConfig::uniform(0..12, &[AdapterKind::Mlp, AdapterKind::Atten], 64);
        assert_eq!(count_trainable(&two, 768, None), 2_379_264);
        let three = AdapterConfig::uniform(0..12, &AdapterKind::KINDS, 64);
        assert_eq!(count_trainable(&three, 768, None), 3_568_896);
        assert_eq!(count_trainable(&AdapterConfig::none(64), 768, None), 0);
        assert_eq!(count_trainable(&AdapterConfig::none(64), 8, Some((16, 3))), 48);
    }

    #[test]
    fn validation_errors_name_keys() {
        let mut cfg = AdapterConfig::uniform([0], &[AdapterKind::Mlp], 4);
        cfg.alpha = -1.0;
        assert!(cfg.validate(2).unwrap_err().to_string().contains("alpha"));
        let cfg = AdapterConfig::uniform([3], &[AdapterKind::Mlp], 4);
        assert!(cfg.validate(2).is_err());
    }

    #[test]
    fn embed_rejects_non_superset() {
        let small = AdapterConfig::uniform([0, 1], &[AdapterKind::Mlp], 4);
        let st = AdapterState::<f32>::init(&small, 8, 2, 0).unwrap();
        let other = AdapterConfig::uniform([1], &[AdapterKind::Mlp, AdapterKind::All], 4);
        assert!(st.embed_into_larger(&other, 2, 1).is_err());
    }

    #[test]
    fn parse_block_ranges() {
        let b = parse_blocks("1-3", 12).unwrap();
        assert_eq!(b.into_iter().collect::<Vec<_>>(), vec![0, 1, 2]);
        let b = parse_blocks("10-12", 12).unwrap();
        assert_eq!(b.into_iter().collect::<Vec<_>>(), vec![9, 10, 11]);
        assert_eq!(parse_blocks("all", 3).unwrap().len(), 3);
        assert!(parse_blocks("0-2", 12).is_err());
        assert!(parse_blocks("4-13", 12).is_err());
        assert_eq!(
            parse_kinds("atten+mlp").unwrap(),
            vec![AdapterKind::Mlp, AdapterKind::Atten]
        );
        assert!(parse_kinds("lora").is_err());
    }

    #[test]
    fn weight_round_trip() {
        let cfg = AdapterConfig::uniform([0, 1], &[AdapterKind::Mlp, AdapterKind::All], 3);
        let st = AdapterState::<f32>::init(&cfg, 4, 2, 8).unwrap();
        let map = st.to_tensor_map();
        assert!(map.contains_key("adapter.1.all.b_up"));
        let back = AdapterState::from_tensor_map(&cfg, 4, 2, &map).unwrap();
        for ((na, a), (nb, b)) in st.params().iter().zip(back.params()) {
            assert_eq!(na, &nb);
            assert!(a.bit_eq(b));
        }
    }
}
