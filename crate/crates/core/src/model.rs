//! End-to-end counting model: tokenization of the query image and exemplars,
//! the shared encoder over the concatenated sequence, feature-enhancing extra
//! blocks on the query tokens, similarity concatenation and the upsampling
//! regression decoder.

use std::collections::BTreeMap;

use crate::attention::{
    match_similarity_var, stack_forward, AttentionOptions, BlockVars, DecoupledAttention, EncoderBlock, SeqVar,
    TokenSequence, LN_EPS,
};
use crate::autodiff::{Tape, Var};
use crate::embeddings::{attach_se, magnitude_embedding, Exemplar};
use crate::error::{dim_err, Error, Result};
use crate::image::{patchify, resize_bilinear, BBox, DensityMap, Image};
use crate::tensor::{ParamRng, Tensor, INIT_STD};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub exemplar_w: usize,
    pub exemplar_h: usize,
    pub exemplar_patch: usize,
    pub channels: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub extra_depth: usize,
    pub extra_dim: usize,
    pub extra_heads: usize,
    pub decoder_dim: usize,
    pub k_shots: usize,
    pub use_cls: bool,
    pub use_se: bool,
    pub use_me: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Small configuration that trains on one CPU core.
    pub fn desk() -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 8,
            exemplar_w: 16,
            exemplar_h: 16,
            exemplar_patch: 8,
            channels: 3,
            depth: 4,
            dim: 64,
            heads: 4,
            extra_depth: 2,
            extra_dim: 48,
            extra_heads: 4,
            decoder_dim: 32,
            k_shots: 3,
            use_cls: true,
            use_se: true,
            use_me: true,
            seed: 0,
        }
    }

    /// ViT-B sized reference layout (384² input, 16² patches, 64² exemplars).
    pub fn reference() -> Self {
        ModelConfig {
            image_size: 384,
            patch_size: 16,
            exemplar_w: 64,
            exemplar_h: 64,
            exemplar_patch: 16,
            channels: 3,
            depth: 12,
            dim: 768,
            heads: 12,
            extra_depth: 3,
            extra_dim: 512,
            extra_heads: 16,
            decoder_dim: 256,
            k_shots: 3,
            use_cls: true,
            use_se: true,
            use_me: true,
            seed: 0,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn query_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn exemplar_tokens_each(&self) -> usize {
        (self.exemplar_w / self.exemplar_patch) * (self.exemplar_h / self.exemplar_patch)
    }

    /// Number of ×2 upsampling stages in the decoder.
    pub fn decoder_stages(&self) -> usize {
        self.patch_size.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return err(format!("patch_size {} must divide image_size {}", self.patch_size, self.image_size));
        }
        if !self.patch_size.is_power_of_two() || self.patch_size < 2 {
            return err(format!("patch_size {} must be a power of two for the decoder", self.patch_size));
        }
        if self.exemplar_patch == 0
            || self.exemplar_w == 0
            || self.exemplar_h == 0
            || self.exemplar_w % self.exemplar_patch != 0
            || self.exemplar_h % self.exemplar_patch != 0
        {
            return err(format!(
                "exemplar_patch {} must divide exemplar size {}x{}",
                self.exemplar_patch, self.exemplar_w, self.exemplar_h
            ));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return err(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        if self.dim % 4 != 0 {
            return err(format!("dim {} must be a multiple of 4 for the 2-D positional embedding", self.dim));
        }
        if self.extra_heads == 0 || self.extra_dim % self.extra_heads != 0 {
            return err(format!("extra_dim {} is not divisible by extra_heads {}", self.extra_dim, self.extra_heads));
        }
        if self.depth == 0 {
            return err("depth must be at least 1".into());
        }
        if self.k_shots == 0 {
            return err("k_shots must be at least 1".into());
        }
        if self.channels == 0 {
            return err("channels must be at least 1".into());
        }
        if self.decoder_dim >> (self.decoder_stages() - 1) == 0 {
            return err(format!(
                "decoder_dim {} cannot be halved across {} stages",
                self.decoder_dim,
                self.decoder_stages()
            ));
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 18] = [
        "image_size",
        "patch_size",
        "exemplar_w",
        "exemplar_h",
        "exemplar_patch",
        "channels",
        "depth",
        "dim",
        "heads",
        "extra_depth",
        "extra_dim",
        "extra_heads",
        "decoder_dim",
        "shots",
        "use_cls",
        "use_se",
        "use_me",
        "seed",
    ];

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let v = [
            self.image_size.to_string(),
            self.patch_size.to_string(),
            self.exemplar_w.to_string(),
            self.exemplar_h.to_string(),
            self.exemplar_patch.to_string(),
            self.channels.to_string(),
            self.depth.to_string(),
            self.dim.to_string(),
            self.heads.to_string(),
            self.extra_depth.to_string(),
            self.extra_dim.to_string(),
            self.extra_heads.to_string(),
            self.decoder_dim.to_string(),
            self.k_shots.to_string(),
            self.use_cls.to_string(),
            self.use_se.to_string(),
            self.use_me.to_string(),
            self.seed.to_string(),
        ];
        Self::KEYS.iter().zip(v).map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Sets one key; returns `Ok(false)` when the key is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let int = |v: &str| v.parse::<usize>().map_err(|_| Error::Config(format!("{key}: expected an integer, got {v:?}")));
        let flag = |v: &str| match v {
            "true" | "1" => Ok(true),
            "false" | "0" => Ok(false),
            _ => Err(Error::Config(format!("{key}: expected true/false, got {v:?}"))),
        };
        match key {
            "image_size" => self.image_size = int(value)?,
            "patch_size" => self.patch_size = int(value)?,
            "exemplar_w" => self.exemplar_w = int(value)?,
            "exemplar_h" => self.exemplar_h = int(value)?,
            "exemplar_patch" => self.exemplar_patch = int(value)?,
            "channels" => self.channels = int(value)?,
            "depth" => self.depth = int(value)?,
            "dim" => self.dim = int(value)?,
            "heads" => self.heads = int(value)?,
            "extra_depth" => self.extra_depth = int(value)?,
            "extra_dim" => self.extra_dim = int(value)?,
            "extra_heads" => self.extra_heads = int(value)?,
            "decoder_dim" => self.decoder_dim = int(value)?,
            "shots" => self.k_shots = int(value)?,
            "use_cls" => self.use_cls = flag(value)?,
            "use_se" => self.use_se = flag(value)?,
            "use_me" => self.use_me = flag(value)?,
            "seed" => {
                self.seed = value.parse().map_err(|_| Error::Config(format!("seed: expected an integer, got {value:?}")))?
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_kv<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = ModelConfig::desk();
        for (k, v) in pairs {
            if !cfg.set(k, v)? {
                return Err(Error::Config(format!("unknown model key {k:?}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Keys whose values differ between two configurations.
    pub fn differing_keys(&self, other: &ModelConfig) -> Vec<String> {
        self.to_kv()
            .into_iter()
            .zip(other.to_kv())
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, _)| a.0)
            .collect()
    }
}

/// Fixed 2-D sine-cosine positional embedding, `[grid² × dim]`. The first half
/// of each row encodes the row index, the second half the column index.
pub fn positional_embedding(grid: usize, dim: usize) -> Tensor {
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter).map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64)).collect();
    let mut data = Vec::with_capacity(grid * grid * dim);
    for gy in 0..grid {
        for gx in 0..grid {
            for pos in [gy as f64, gx as f64] {
                data.extend(omega.iter().map(|w| (pos * w).sin()));
                data.extend(omega.iter().map(|w| (pos * w).cos()));
            }
        }
    }
    Tensor::new(vec![grid * grid, dim], data).expect("grid² rows of dim values")
}

/// Crops each box out of `img`, resizes it to the exemplar size and attaches
/// its scale embedding (normalized by the query image's width + height).
pub fn prepare_exemplars(img: &Image, boxes: &[BBox], cfg: &ModelConfig) -> Result<Vec<Exemplar>> {
    let normalizer = (img.width() + img.height()) as f64;
    boxes
        .iter()
        .map(|b| {
            if !b.fits_in(img.width(), img.height()) {
                return Err(Error::Data(format!(
                    "exemplar box {},{},{},{} outside the {}x{} image",
                    b.x,
                    b.y,
                    b.w,
                    b.h,
                    img.width(),
                    img.height()
                )));
            }
            let crop = img.crop(b.x, b.y, b.w, b.h)?;
            let resized = resize_bilinear(&crop, cfg.exemplar_w, cfg.exemplar_h)?;
            attach_se(resized, b.w, b.h, normalizer)
        })
        .collect()
}

/// Model inputs reduced to the constant tensors the forward pass consumes.
#[derive(Clone, Debug)]
pub struct PreparedInput {
    /// `[M × P²·C]`
    pub query_patches: Tensor,
    /// `[K·M_z × P_z²·(C+1)]`
    pub exemplar_patches: Tensor,
    pub k_shots: usize,
    /// Magnitude embedding, or 1 when disabled.
    pub me: f64,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub density: DensityMap,
    pub count: f64,
    pub last_attention: DecoupledAttention,
    /// Per-query-token similarity after the magnitude embedding, `[M]`.
    pub similarity: Tensor,
    /// Every encoder layer's attention, when requested.
    pub layer_attention: Vec<DecoupledAttention>,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub density: Var,
    pub similarity: Var,
    pub last_maps: crate::attention::HeadMaps,
    pub layer_maps: Vec<crate::attention::HeadMaps>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `[out × in·k·k]`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub query_w: Tensor,
    pub query_b: Tensor,
    pub exemplar_w: Tensor,
    pub exemplar_b: Tensor,
    pub blocks: Vec<EncoderBlock>,
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
    pub extra_w: Tensor,
    pub extra_b: Tensor,
    pub extra_blocks: Vec<EncoderBlock>,
    pub extra_norm_gain: Tensor,
    pub extra_norm_bias: Tensor,
    pub decoder: Vec<ConvLayer>,
    pub head: ConvLayer,
    pos_embed: Tensor,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ParamRng::new(cfg.seed);
        let (d, e) = (cfg.dim, cfg.extra_dim);
        let q_in = cfg.patch_size * cfg.patch_size * cfg.channels;
        let z_in = cfg.exemplar_patch * cfg.exemplar_patch * (cfg.channels + 1);
        let query_w = Tensor::randn(&[q_in, d], INIT_STD, &mut rng);
        let exemplar_w = Tensor::randn(&[z_in, d], INIT_STD, &mut rng);
        let blocks = (0..cfg.depth).map(|_| EncoderBlock::new(d, cfg.heads, &mut rng)).collect::<Result<Vec<_>>>()?;
        let extra_w = Tensor::randn(&[d, e], INIT_STD, &mut rng);
        let extra_blocks =
            (0..cfg.extra_depth).map(|_| EncoderBlock::new(e, cfg.extra_heads, &mut rng)).collect::<Result<Vec<_>>>()?;
        let mut decoder = Vec::new();
        let mut c_in = e + 1;
        for s in 0..cfg.decoder_stages() {
            let c_out = cfg.decoder_dim >> s;
            decoder.push(ConvLayer {
                weight: Tensor::randn(&[c_out, c_in * 9], INIT_STD, &mut rng),
                bias: Tensor::zeros(&[c_out]),
            });
            c_in = c_out;
        }
        // nonnegative head weights keep the output ReLU active on the nonnegative decoder features
        let mut head_w = Tensor::randn(&[1, c_in], INIT_STD, &mut rng);
        head_w.data_mut().iter_mut().for_each(|w| *w = w.abs());
        let head = ConvLayer { weight: head_w, bias: Tensor::zeros(&[1]) };
        let pos_embed = positional_embedding(cfg.grid(), d);
        Ok(Model {
            query_w,
            query_b: Tensor::zeros(&[d]),
            exemplar_w,
            exemplar_b: Tensor::zeros(&[d]),
            blocks,
            norm_gain: Tensor::filled(&[d], 1.0),
            norm_bias: Tensor::zeros(&[d]),
            extra_w,
            extra_b: Tensor::zeros(&[e]),
            extra_blocks,
            extra_norm_gain: Tensor::filled(&[e], 1.0),
            extra_norm_bias: Tensor::zeros(&[e]),
            decoder,
            head,
            pos_embed,
            cfg,
        })
    }

    /// Named parameters in canonical order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embed.query.w".into(), &self.query_w),
            ("embed.query.b".into(), &self.query_b),
            ("embed.exemplar.w".into(), &self.exemplar_w),
            ("embed.exemplar.b".into(), &self.exemplar_b),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.params().into_iter().map(|(n, t)| (format!("encoder.{i}.{n}"), t)));
        }
        out.push(("encoder.norm.gain".into(), &self.norm_gain));
        out.push(("encoder.norm.bias".into(), &self.norm_bias));
        out.push(("extra.proj.w".into(), &self.extra_w));
        out.push(("extra.proj.b".into(), &self.extra_b));
        for (i, b) in self.extra_blocks.iter().enumerate() {
            out.extend(b.params().into_iter().map(|(n, t)| (format!("extra.{i}.{n}"), t)));
        }
        out.push(("extra.norm.gain".into(), &self.extra_norm_gain));
        out.push(("extra.norm.bias".into(), &self.extra_norm_bias));
        for (i, c) in self.decoder.iter().enumerate() {
            out.push((format!("decoder.{i}.w"), &c.weight));
            out.push((format!("decoder.{i}.b"), &c.bias));
        }
        out.push(("decoder.head.w".into(), &self.head.weight));
        out.push(("decoder.head.b".into(), &self.head.bias));
        out
    }

    /// Mutable parameters in the same order as [`Model::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> =
            vec![&mut self.query_w, &mut self.query_b, &mut self.exemplar_w, &mut self.exemplar_b];
        for b in &mut self.blocks {
            out.extend(b.params_mut().into_iter().map(|(_, t)| t));
        }
        out.push(&mut self.norm_gain);
        out.push(&mut self.norm_bias);
        out.push(&mut self.extra_w);
        out.push(&mut self.extra_b);
        for b in &mut self.extra_blocks {
            out.extend(b.params_mut().into_iter().map(|(_, t)| t));
        }
        out.push(&mut self.extra_norm_gain);
        out.push(&mut self.extra_norm_bias);
        for c in &mut self.decoder {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every parameter on `tape`, in canonical order.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<Var>> {
        self.params().iter().map(|(_, t)| if trainable { tape.param(t) } else { tape.constant(t) }).collect()
    }

    pub fn prepare(&self, img: &Image, exemplars: &[Exemplar]) -> Result<PreparedInput> {
        let cfg = &self.cfg;
        if img.width() != cfg.image_size || img.height() != cfg.image_size || img.channels() != cfg.channels {
            return Err(Error::Config(format!(
                "query image is {}x{}x{}, model expects {}x{}x{}",
                img.width(),
                img.height(),
                img.channels(),
                cfg.image_size,
                cfg.image_size,
                cfg.channels
            )));
        }
        if exemplars.is_empty() || exemplars.len() > cfg.k_shots {
            return Err(Error::Config(format!("expected 1..={} exemplars, got {}", cfg.k_shots, exemplars.len())));
        }
        let mut rows = Vec::new();
        for ex in exemplars {
            if ex.pixels.width() != cfg.exemplar_w
                || ex.pixels.height() != cfg.exemplar_h
                || ex.pixels.channels() != cfg.channels
            {
                return Err(Error::Config(format!(
                    "exemplar is {}x{}x{}, model expects {}x{}x{}",
                    ex.pixels.width(),
                    ex.pixels.height(),
                    ex.pixels.channels(),
                    cfg.exemplar_w,
                    cfg.exemplar_h,
                    cfg.channels
                )));
            }
            rows.extend_from_slice(ex.tokens(cfg.exemplar_patch, cfg.use_se)?.data());
        }
        let z_in = cfg.exemplar_patch * cfg.exemplar_patch * (cfg.channels + 1);
        let mz = cfg.exemplar_tokens_each();
        let me = if cfg.use_me { magnitude_embedding(exemplars, cfg.patch_size, cfg.patch_size)?.value } else { 1.0 };
        Ok(PreparedInput {
            query_patches: patchify(img, cfg.patch_size)?,
            exemplar_patches: Tensor::new(vec![exemplars.len() * mz, z_in], rows)?,
            k_shots: exemplars.len(),
            me,
        })
    }

    fn embed_vars(&self, tape: &mut Tape, pv: &[Var], input: &PreparedInput) -> Result<SeqVar> {
        let q = tape.constant(&input.query_patches)?;
        let q = tape.matmul(q, pv[0])?;
        let q = tape.add_row(q, pv[1])?;
        let pos = tape.constant(&self.pos_embed)?;
        let q = tape.add(q, pos)?;
        let z = tape.constant(&input.exemplar_patches)?;
        let z = tape.matmul(z, pv[2])?;
        let z = tape.add_row(z, pv[3])?;
        let tokens = tape.concat(&[q, z], 0)?;
        Ok(SeqVar {
            tokens,
            m_query: self.cfg.query_tokens(),
            m_exemplar_each: self.cfg.exemplar_tokens_each(),
            k_shots: input.k_shots,
        })
    }

    /// Query-then-exemplar token sequence before the encoder.
    pub fn embed_inputs(&self, img: &Image, exemplars: &[Exemplar]) -> Result<TokenSequence> {
        let input = self.prepare(img, exemplars)?;
        let mut tape = Tape::new();
        let pv = self.bind(&mut tape, false)?;
        let seq = self.embed_vars(&mut tape, &pv, &input)?;
        TokenSequence::new(tape.tensor(seq.tokens), seq.m_query, seq.m_exemplar_each, seq.k_shots)
    }

    /// Records the full forward pass using parameter vars `pv` (canonical order).
    pub fn forward_vars(&self, tape: &mut Tape, pv: &[Var], input: &PreparedInput, retain_all: bool) -> Result<ForwardVars> {
        let cfg = &self.cfg;
        let expected = self.params().len();
        if pv.len() != expected {
            return Err(Error::Config(format!("forward needs {expected} parameter vars, got {}", pv.len())));
        }
        let seq = self.embed_vars(tape, pv, input)?;
        let mut at = 4;
        let blocks = (0..cfg.depth)
            .map(|_| {
                let b = BlockVars::from_vars(cfg.dim, cfg.heads, &pv[at..at + 16]);
                at += 16;
                b
            })
            .collect::<Result<Vec<_>>>()?;
        let opts = AttentionOptions { mask_class: !cfg.use_cls };
        let (enc, last_maps, layer_maps) = stack_forward(tape, &seq, &blocks, opts, retain_all)?;

        // query-segment features -> extra blocks
        let m = cfg.query_tokens();
        let feats = tape.slice(enc.tokens, &[0..m, 0..cfg.dim])?;
        let feats = tape.layer_norm(feats, pv[at], pv[at + 1], LN_EPS)?;
        let feats = tape.matmul(feats, pv[at + 2])?;
        let mut feats = tape.add_row(feats, pv[at + 3])?;
        at += 4;
        let extra = (0..cfg.extra_depth)
            .map(|_| {
                let b = BlockVars::from_vars(cfg.extra_dim, cfg.extra_heads, &pv[at..at + 16]);
                at += 16;
                b
            })
            .collect::<Result<Vec<_>>>()?;
        if !extra.is_empty() {
            let qseq = SeqVar { tokens: feats, m_query: m, m_exemplar_each: 0, k_shots: 0 };
            feats = stack_forward(tape, &qseq, &extra, AttentionOptions::default(), false)?.0.tokens;
        }
        let feats = tape.layer_norm(feats, pv[at], pv[at + 1], LN_EPS)?;
        at += 2;

        // similarity from the last encoder attention, as one extra channel
        let sim = match_similarity_var(tape, &last_maps.heads, m)?;
        let sim = if cfg.use_me { tape.scale(sim, input.me)? } else { sim };
        let fmap = tape.transpose(feats)?;
        let fmap = tape.concat(&[fmap, sim], 0)?;
        let g = cfg.grid();
        let fmap = tape.reshape(fmap, &[cfg.extra_dim + 1, g, g])?;
        let density = self.decode_vars(tape, &pv[at..], fmap)?;
        Ok(ForwardVars { density, similarity: sim, last_maps, layer_maps })
    }

    /// Decoder on a `[C, g, g]` feature map; `pv` holds the decoder parameters.
    fn decode_vars(&self, tape: &mut Tape, pv: &[Var], fmap: Var) -> Result<Var> {
        let mut x = fmap;
        let mut side = self.cfg.grid();
        for (i, layer) in self.decoder.iter().enumerate() {
            let c_out = layer.weight.shape()[0];
            side *= 2;
            let up = tape.resize_bilinear(x, side, side)?;
            let cols = tape.im2col(up, 3, 1)?;
            let y = tape.matmul(pv[2 * i], cols)?;
            let y = tape.add_col(y, pv[2 * i + 1])?;
            let y = tape.relu(y)?;
            x = tape.reshape(y, &[c_out, side, side])?;
        }
        let c = tape.shape(x)[0];
        let flat = tape.reshape(x, &[c, side * side])?;
        let n = self.decoder.len();
        let y = tape.matmul(pv[2 * n], flat)?;
        let y = tape.add_col(y, pv[2 * n + 1])?;
        tape.relu(y)
    }

    /// Density map from a `[extra_dim+1, g, g]` feature map.
    pub fn decode(&self, features: &Tensor) -> Result<DensityMap> {
        let g = self.cfg.grid();
        if features.shape() != [self.cfg.extra_dim + 1, g, g] {
            return Err(dim_err!(
                "decoder expects [{}, {g}, {g}] features, got {:?}",
                self.cfg.extra_dim + 1,
                features.shape()
            ));
        }
        let mut tape = Tape::new();
        let all = self.bind(&mut tape, false)?;
        let dec = &all[all.len() - 2 * (self.decoder.len() + 1)..];
        let f = tape.constant(features)?;
        let d = self.decode_vars(&mut tape, dec, f)?;
        let s = self.cfg.image_size;
        DensityMap::new(s, s, tape.value(d).to_vec())
    }

    pub fn forward_prepared(&self, input: &PreparedInput, retain_all: bool) -> Result<ModelOutput> {
        let mut tape = Tape::new();
        let pv = self.bind(&mut tape, false)?;
        let out = self.forward_vars(&mut tape, &pv, input, retain_all)?;
        let s = self.cfg.image_size;
        let density = DensityMap::new(s, s, tape.value(out.density).to_vec())?;
        let count = density.count();
        Ok(ModelOutput {
            count,
            density,
            last_attention: out.last_maps.decoupled(&tape)?,
            similarity: Tensor::from_vec(tape.value(out.similarity).to_vec()),
            layer_attention: out.layer_maps.iter().map(|m| m.decoupled(&tape)).collect::<Result<_>>()?,
        })
    }

    pub fn forward(&self, img: &Image, exemplars: &[Exemplar]) -> Result<ModelOutput> {
        self.forward_prepared(&self.prepare(img, exemplars)?, false)
    }

    /// Pixel-mean squared error against `gt` and its gradient for every
    /// parameter (canonical order).
    pub fn loss_and_grads(&self, input: &PreparedInput, gt: &DensityMap) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let pv = self.bind(&mut tape, true)?;
        let out = self.forward_vars(&mut tape, &pv, input, false)?;
        let loss = density_loss_var(&mut tape, out.density, gt)?;
        tape.backward(loss)?;
        let grads = pv
            .iter()
            .zip(self.params())
            .map(|(v, (_, t))| tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect();
        Ok((tape.scalar(loss), grads))
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        encode_checkpoint(&self.cfg, &self.params())
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Model> {
        let (cfg, params) = decode_checkpoint(bytes)?;
        let mut model = Model::new(cfg)?;
        let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
        if names.len() != params.len() {
            return Err(Error::Format(format!("checkpoint has {} tensors, model needs {}", params.len(), names.len())));
        }
        for ((name, slot), (pname, t)) in names.iter().zip(model.params_mut()).zip(params) {
            if *name != pname || slot.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor {pname} {:?} does not match model tensor {name} {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(model)
    }
}

/// Records the pixel-mean squared error between `pred` (any shape with the
/// same element count) and `gt`.
pub fn density_loss_var(tape: &mut Tape, pred: Var, gt: &DensityMap) -> Result<Var> {
    let n = tape.value(pred).len();
    if n != gt.data().len() {
        return Err(dim_err!("prediction has {n} pixels, ground truth {}", gt.data().len()));
    }
    let shape = tape.shape(pred).to_vec();
    let target = tape.constant_from(shape, gt.data().to_vec())?;
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq)
}

/// Pixel-mean squared error.
pub fn loss(pred: &DensityMap, gt: &DensityMap) -> Result<f64> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(dim_err!(
            "density shapes differ: {}x{} vs {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        ));
    }
    let n = pred.data().len() as f64;
    Ok(pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// `CVCK` checkpoint: magic, `u32` version, `u32` byte length of the UTF-8
/// `key=value\n` config block, the block, `u32` tensor count, then per tensor
/// `u32` name length, name, `u32` rank, `u32` dims, and `f32` LE data.
pub fn encode_checkpoint(cfg: &ModelConfig, params: &[(String, &Tensor)]) -> Vec<u8> {
    let mut buf = CHECKPOINT_MAGIC.to_vec();
    put_u32(&mut buf, CHECKPOINT_VERSION);
    let text: String = cfg.to_kv().iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    put_u32(&mut buf, text.len() as u32);
    buf.extend_from_slice(text.as_bytes());
    put_u32(&mut buf, params.len() as u32);
    for (name, t) in params {
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.rank() as u32);
        for d in t.shape() {
            put_u32(&mut buf, *d as u32);
        }
        for v in t.data() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(len)?).map_err(|_| Error::Format("checkpoint text is not UTF-8".into()))
    }
}

/// Parses the config block of a checkpoint into raw key/value pairs.
pub fn checkpoint_config_pairs(bytes: &[u8]) -> Result<BTreeMap<String, String>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("missing CVCK magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let text = r.string(len)?;
    text.lines()
        .map(|line| {
            line.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Format(format!("malformed config line {line:?}")))
        })
        .collect()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, Vec<(String, Tensor)>)> {
    let pairs = checkpoint_config_pairs(bytes)?;
    let cfg = ModelConfig::from_kv(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let mut r = Reader { bytes, pos: 0 };
    r.take(8)?;
    let len = r.u32()? as usize;
    r.take(len)?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = r.string(nlen)?.to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(4 * n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        params.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    Ok((cfg, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_arithmetic() {
        let desk = ModelConfig::desk();
        assert_eq!(desk.query_tokens(), 64);
        assert_eq!(desk.exemplar_tokens_each(), 4);
        assert_eq!(desk.query_tokens() + desk.k_shots * desk.exemplar_tokens_each(), 76);
        assert_eq!(desk.decoder_stages(), 3);
        let reference = ModelConfig::reference();
        reference.validate().unwrap();
        assert_eq!(reference.query_tokens(), 576);
        assert_eq!(reference.exemplar_tokens_each(), 16);
        assert_eq!(reference.decoder_stages(), 4);
    }

    #[test]
    fn invalid_configs() {
        let mut c = ModelConfig::desk();
        c.patch_size = 12;
        c.image_size = 48;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::desk();
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.exemplar_w = 12;
        assert!(c.validate().is_err());
        assert!(ModelConfig::from_kv([("bogus", "1")]).is_err());
    }

    #[test]
    fn kv_round_trip_and_diff() {
        let mut c = ModelConfig::desk();
        c.use_se = false;
        c.seed = 99;
        let kv = c.to_kv();
        let back = ModelConfig::from_kv(kv.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(back, c);
        assert_eq!(ModelConfig::desk().differing_keys(&c), vec!["use_se".to_string(), "seed".to_string()]);
    }

    #[test]
    fn loss_values() {
        let gt = DensityMap::new(2, 2, vec![0.0, 0.5, 1.0, 0.25]).unwrap();
        assert_eq!(loss(&gt, &gt).unwrap(), 0.0);
        let plus = DensityMap::new(2, 2, gt.data().iter().map(|v| v + 1.0).collect()).unwrap();
        assert_eq!(loss(&plus, &gt).unwrap(), 1.0);
        assert!(loss(&DensityMap::zeros(3, 1), &gt).is_err());
    }

    #[test]
    fn positional_embedding_rows_are_distinct() {
        let pe = positional_embedding(4, 8);
        assert_eq!(pe.shape(), &[16, 8]);
        // origin: sin terms 0, cos terms 1
        assert_eq!(&pe.data()[..8], &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        for a in 0..16 {
            for b in a + 1..16 {
                assert_ne!(&pe.data()[a * 8..a * 8 + 8], &pe.data()[b * 8..b * 8 + 8]);
            }
        }
    }
}
