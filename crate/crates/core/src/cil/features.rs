//! Feature extractors: the frozen encoder, the adapter-finetuned encoder,
//! and their concatenation.

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::adapters::AdapterState;
use crate::encoder::{self, EncoderState};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Images per parallel chunk. Each image is encoded independently, so
/// the chunking never changes the result.
const CHUNK: usize = 16;

pub trait FeatureExtractor: Sync {
    fn dim(&self) -> usize;
    /// `[batch, dim]` features for `[C, H, W]` images.
    fn extract(&self, images: &[Tensor<f32>]) -> Result<Tensor<f32>>;
}

fn encode_parallel(
    enc: &EncoderState,
    adapters: Option<&AdapterState>,
    images: &[Tensor<f32>],
) -> Result<Tensor<f32>> {
    if images.is_empty() {
        return Err(Error::contract("no images to encode"));
    }
    let parts = images
        .par_chunks(CHUNK)
        .map(|c| encoder::encode(enc, adapters, c))
        .collect::<Result<Vec<_>>>()?;
    let d = enc.config().embed_dim;
    let data = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(&[images.len(), d], data)
}

pub struct FrozenEncoder<'a>(pub &'a EncoderState);

impl FeatureExtractor for FrozenEncoder<'_> {
    fn dim(&self) -> usize {
        self.0.config().embed_dim
    }

    fn extract(&self, images: &[Tensor<f32>]) -> Result<Tensor<f32>> {
        encode_parallel(self.0, None, images)
    }
}

pub struct AdaptedEncoder<'a> {
    pub encoder: &'a EncoderState,
    pub adapters: &'a AdapterState,
}

impl FeatureExtractor for AdaptedEncoder<'_> {
    fn dim(&self) -> usize {
        self.encoder.config().embed_dim
    }

    fn extract(&self, images: &[Tensor<f32>]) -> Result<Tensor<f32>> {
        encode_parallel(self.encoder, Some(self.adapters), images)
    }
}

/// `[finetuned(x); frozen(x)]`, or the finetuned features alone when
/// concatenation is disabled. Every parameter is frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeEncoder {
    finetuned: EncoderState,
    adapters: AdapterState,
    frozen: EncoderState,
    concat: bool,
}

/// Builds the composite from the frozen encoder and the finetuned
/// encoder with its adapters; freezes all of them.
pub fn build_composite(
    frozen: &EncoderState,
    finetuned: &EncoderState,
    adapters: &AdapterState,
    concat: bool,
) -> Result<CompositeEncoder> {
    let (a, b) = (frozen.config(), finetuned.config());
    if a.image_shape() != b.image_shape() || a.embed_dim != b.embed_dim {
        return Err(Error::config(
            "encoder",
            format!(
                "composite halves disagree: image {:?} dim {} vs image {:?} dim {}",
                a.image_shape(),
                a.embed_dim,
                b.image_shape(),
                b.embed_dim
            ),
        ));
    }
    adapters.check_compatible(b)?;
    let mut out = CompositeEncoder {
        finetuned: finetuned.clone(),
        adapters: adapters.clone(),
        frozen: frozen.clone(),
        concat,
    };
    out.finetuned.freeze();
    out.frozen.freeze();
    out.adapters.set_trainable(false);
    Ok(out)
}

impl CompositeEncoder {
    pub fn finetuned(&self) -> &EncoderState {
        &self.finetuned
    }

    pub fn frozen(&self) -> &EncoderState {
        &self.frozen
    }

    pub fn adapters(&self) -> &AdapterState {
        &self.adapters
    }

    pub fn concat(&self) -> bool {
        self.concat
    }

    /// SHA-256 over every parameter of both halves and the adapters.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        hash_params(&mut h, "finetuned.", &self.finetuned, Some(&self.adapters));
        hash_params(&mut h, "frozen.", &self.frozen, None);
        hex::encode(h.finalize())
    }
}

impl FeatureExtractor for CompositeEncoder {
    fn dim(&self) -> usize {
        let d = self.finetuned.config().embed_dim;
        if self.concat {
            2 * d
        } else {
            d
        }
    }

    fn extract(&self, images: &[Tensor<f32>]) -> Result<Tensor<f32>> {
        let tuned = encode_parallel(&self.finetuned, Some(&self.adapters), images)?;
        if !self.concat {
            return Ok(tuned);
        }
        let base = encode_parallel(&self.frozen, None, images)?;
        let (n, d) = tuned.dims2()?;
        let mut data = Vec::with_capacity(n * 2 * d);
        for r in 0..n {
            data.extend_from_slice(tuned.row(r));
            data.extend_from_slice(base.row(r));
        }
        Tensor::new(&[n, 2 * d], data)
    }
}

fn hash_params(h: &mut Sha256, prefix: &str, enc: &EncoderState, adapters: Option<&AdapterState>) {
    let mut params = enc.named_params();
    if let Some(a) = adapters {
        params.extend(a.params());
    }
    for (name, t) in params {
        h.update(prefix.as_bytes());
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
}

/// SHA-256 over encoder and adapter parameters (names, shapes, bits).
pub fn param_checksum(encoder: &EncoderState, adapters: Option<&AdapterState>) -> String {
    let mut h = Sha256::new();
    hash_params(&mut h, "", encoder, adapters);
    hex::encode(h.finalize())
}
