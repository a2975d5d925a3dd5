//! Scale and magnitude embeddings for exemplars.
//!
//! Resizing every exemplar to a fixed `W_z×H_z` discards its original size and
//! aspect ratio. The scale embedding restores that as one extra input channel:
//! a column ramp spanning `[0, W_k]` plus a row ramp spanning `[0, H_k]`. The
//! magnitude embedding is the scalar patch capacity `(W_p·H_p)/(W_k·H_k)`,
//! averaged over exemplars, which rescales the (softmax-normalized) similarity.

use crate::error::{dim_err, Error, Result};
use crate::image::{patchify_data, Image};
use crate::tensor::Tensor;

/// `[out_h × out_w]` scale-embedding plane for an exemplar whose original box
/// was `orig_w × orig_h`, divided by `normalizer`.
pub fn scale_embedding(orig_w: usize, orig_h: usize, out_w: usize, out_h: usize, normalizer: f64) -> Result<Tensor> {
    if orig_w == 0 || orig_h == 0 || out_w == 0 || out_h == 0 {
        return Err(dim_err!("scale embedding needs positive sizes, got {orig_w}x{orig_h} -> {out_w}x{out_h}"));
    }
    if !(normalizer > 0.0 && normalizer.is_finite()) {
        return Err(Error::Config(format!("scale-embedding normalizer must be positive, got {normalizer}")));
    }
    let cols = linspace(orig_w as f64, out_w);
    let rows = linspace(orig_h as f64, out_h);
    let mut data = Vec::with_capacity(out_w * out_h);
    for r in &rows {
        data.extend(cols.iter().map(|c| (c + r) / normalizer));
    }
    Tensor::new(vec![out_h, out_w], data)
}

/// `n` evenly spaced points covering `[0, end]` inclusive (`[0]` when `n == 1`).
fn linspace(end: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|i| end * i as f64 / (n - 1) as f64).collect()
}

/// A resized exemplar crop with its original box size and scale-embedding plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Exemplar {
    pub orig_w: usize,
    pub orig_h: usize,
    pub pixels: Image,
    pub se_channel: Tensor,
}

impl Exemplar {
    pub fn channels(&self) -> usize {
        self.pixels.channels() + 1
    }

    /// Pixel channels with the scale-embedding plane appended as the last
    /// channel, channel-interleaved. `use_se = false` appends zeros instead.
    pub fn with_se_channel(&self, use_se: bool) -> Vec<f64> {
        let c = self.pixels.channels();
        let mut data = Vec::with_capacity(self.pixels.data().len() / c * (c + 1));
        for (px, se) in self.pixels.data().chunks_exact(c).zip(self.se_channel.data()) {
            data.extend_from_slice(px);
            data.push(if use_se { *se } else { 0.0 });
        }
        data
    }

    /// Patch tokens of the `C+1`-channel exemplar, `[M_z × patch²·(C+1)]`.
    pub fn tokens(&self, patch: usize, use_se: bool) -> Result<Tensor> {
        patchify_data(
            self.pixels.width(),
            self.pixels.height(),
            self.channels(),
            &self.with_se_channel(use_se),
            patch,
        )
    }
}

/// Attaches the scale embedding to an already-resized exemplar crop.
pub fn attach_se(ex: Image, orig_w: usize, orig_h: usize, normalizer: f64) -> Result<Exemplar> {
    let se_channel = scale_embedding(orig_w, orig_h, ex.width(), ex.height(), normalizer)?;
    Ok(Exemplar { orig_w, orig_h, pixels: ex, se_channel })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MagnitudeEmbedding {
    pub value: f64,
}

/// Mean over exemplars of `(patch_w·patch_h)/(W_k·H_k)`.
pub fn magnitude_embedding(exemplars: &[Exemplar], patch_w: usize, patch_h: usize) -> Result<MagnitudeEmbedding> {
    let sizes: Vec<(usize, usize)> = exemplars.iter().map(|e| (e.orig_w, e.orig_h)).collect();
    magnitude_from_sizes(&sizes, patch_w, patch_h)
}

pub fn magnitude_from_sizes(sizes: &[(usize, usize)], patch_w: usize, patch_h: usize) -> Result<MagnitudeEmbedding> {
    if sizes.is_empty() {
        return Err(Error::Config("magnitude embedding needs at least one exemplar".into()));
    }
    if patch_w == 0 || patch_h == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    let capacity = (patch_w * patch_h) as f64;
    let mut sum = 0.0;
    for &(w, h) in sizes {
        if w == 0 || h == 0 {
            return Err(Error::Data(format!("exemplar box {w}x{h} has zero area")));
        }
        sum += capacity / (w as f64 * h as f64);
    }
    Ok(MagnitudeEmbedding { value: sum / sizes.len() as f64 })
}

/// Scales every similarity score by the magnitude embedding.
pub fn apply_me(similarity: &Tensor, me: MagnitudeEmbedding) -> Tensor {
    let data = similarity.data().iter().map(|v| v * me.value).collect();
    Tensor::new(similarity.shape().to_vec(), data).expect("same shape")
}
