//! Per-scale transformer encoder–decoder with quality head, and the
//! four-scale parallel composition with score averaging.
//!
//! Encoder layer: `y' = LN(MHA(y,y,y) + y)`, `y = LN(MLP(y') + y')`.
//! Decoder layer: self-attention, then cross-attention with the encoder
//! output as key/value, then MLP, each followed by a post-residual LN.
//! The head reads row 0 of the decoder output (the quality token) through
//! two FC layers with a ReLU in between. The final score is the unweighted
//! arithmetic mean over the per-scale scores.

use serde::Serialize;
use thiserror::Error;

use crate::backbone::{
    build_pyramid, diff_features, extract_features, to_canonical, BackboneError, FeatureVolume,
    ImageTensor,
};
use crate::config::{ModelConfig, Scale};
use crate::elem::Elem;
use crate::nn::{LinearLayer, MlpBlock, MultiHeadAttention, NnError, ParamStore};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Per-scale predicted quality scores; `None` for scales outside the
/// configured subset.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScaleScores {
    pub s1: Option<f64>,
    pub s2: Option<f64>,
    pub s3: Option<f64>,
    pub s05: Option<f64>,
}

impl ScaleScores {
    pub fn from_pairs(pairs: &[(Scale, f64)]) -> Self {
        let find = |s: Scale| pairs.iter().find(|(p, _)| *p == s).map(|(_, v)| *v);
        ScaleScores {
            s1: find(Scale::S1),
            s2: find(Scale::S2),
            s3: find(Scale::S3),
            s05: find(Scale::Half),
        }
    }
}

/// 1×1 reduction plus quality and positional embeddings for one stream.
struct EmbedParams<E: Elem> {
    reduce_weight: Tensor<E>, // D×C×1×1
    reduce_bias: Tensor<E>,   // D
    quality: Tensor<E>,       // 1×D
    pos: Tensor<E>,           // (1+N)×D
}

impl<E: Elem> EmbedParams<E> {
    fn from_store(store: &ParamStore<E>, prefix: &str) -> std::result::Result<Self, NnError> {
        Ok(EmbedParams {
            reduce_weight: store.get(&format!("{prefix}.reduce.weight"))?,
            reduce_bias: store.get(&format!("{prefix}.reduce.bias"))?,
            quality: store.get(&format!("{prefix}.quality"))?,
            pos: store.get(&format!("{prefix}.pos"))?,
        })
    }

    /// Canonical feature volume -> (1+N)×D token sequence: 1×1 reduction,
    /// row-major flatten (token n = grid cell y*w + x), quality token
    /// prepended at row 0, positional embedding added.
    fn embed(&self, f: &FeatureVolume<E>, cfg: &ModelConfig) -> Result<Tensor<E>> {
        let (h, w) = f.spatial();
        if (h, w) != (cfg.target_h, cfg.target_w) {
            return Err(ModelError::InvalidInput(format!(
                "expected canonical {}x{} volume, got {h}x{w}",
                cfg.target_h, cfg.target_w
            )));
        }
        let d = cfg.embed_dim;
        let n = cfg.grid_tokens();
        let reduced = f
            .tensor
            .conv2d(&self.reduce_weight, 1, 0)?
            .add_channel(&self.reduce_bias)?;
        let grid = reduced.reshape(vec![d, n])?.transpose()?; // N×D
        let tokens = Tensor::concat0(&[self.quality.clone(), grid])?;
        Ok(tokens.add(&self.pos)?)
    }
}

struct EncoderLayer<E: Elem> {
    mha: MultiHeadAttention<E>,
    ln1: (Tensor<E>, Tensor<E>),
    mlp: MlpBlock<E>,
    ln2: (Tensor<E>, Tensor<E>),
}

struct DecoderLayer<E: Elem> {
    self_mha: MultiHeadAttention<E>,
    ln1: (Tensor<E>, Tensor<E>),
    cross_mha: MultiHeadAttention<E>,
    ln2: (Tensor<E>, Tensor<E>),
    mlp: MlpBlock<E>,
    ln3: (Tensor<E>, Tensor<E>),
}

fn ln_params<E: Elem>(
    store: &ParamStore<E>,
    prefix: &str,
) -> std::result::Result<(Tensor<E>, Tensor<E>), NnError> {
    Ok((
        store.get(&format!("{prefix}.gamma"))?,
        store.get(&format!("{prefix}.beta"))?,
    ))
}

/// One scale's independent transformer stack.
struct ScaleStack<E: Elem> {
    scale: Scale,
    embed_diff: EmbedParams<E>,
    embed_ref: EmbedParams<E>,
    encoder: Vec<EncoderLayer<E>>,
    decoder: Vec<DecoderLayer<E>>,
    head_fc1: LinearLayer<E>,
    head_fc2: LinearLayer<E>,
}

const LN_EPS: f64 = 1e-5;

impl<E: Elem> ScaleStack<E> {
    fn from_store(
        store: &ParamStore<E>,
        cfg: &ModelConfig,
        scale: Scale,
    ) -> std::result::Result<Self, NnError> {
        let p = scale.prefix();
        let mut encoder = Vec::with_capacity(cfg.num_layers);
        let mut decoder = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let enc = format!("{p}.encoder.layer{l}");
            encoder.push(EncoderLayer {
                mha: MultiHeadAttention::from_store(store, &format!("{enc}.mha"), cfg.num_heads)?,
                ln1: ln_params(store, &format!("{enc}.ln1"))?,
                mlp: MlpBlock::from_store(store, &format!("{enc}.mlp"))?,
                ln2: ln_params(store, &format!("{enc}.ln2"))?,
            });
            let dec = format!("{p}.decoder.layer{l}");
            decoder.push(DecoderLayer {
                self_mha: MultiHeadAttention::from_store(
                    store,
                    &format!("{dec}.self_mha"),
                    cfg.num_heads,
                )?,
                ln1: ln_params(store, &format!("{dec}.ln1"))?,
                cross_mha: MultiHeadAttention::from_store(
                    store,
                    &format!("{dec}.cross_mha"),
                    cfg.num_heads,
                )?,
                ln2: ln_params(store, &format!("{dec}.ln2"))?,
                mlp: MlpBlock::from_store(store, &format!("{dec}.mlp"))?,
                ln3: ln_params(store, &format!("{dec}.ln3"))?,
            });
        }
        Ok(ScaleStack {
            scale,
            embed_diff: EmbedParams::from_store(store, &format!("{p}.embed.diff"))?,
            embed_ref: EmbedParams::from_store(store, &format!("{p}.embed.ref"))?,
            encoder,
            decoder,
            head_fc1: LinearLayer::from_store(store, &format!("{p}.head.fc1"))?,
            head_fc2: LinearLayer::from_store(store, &format!("{p}.head.fc2"))?,
        })
    }

    fn encode(&self, seq: &Tensor<E>) -> Result<Tensor<E>> {
        let eps = E::from_f64(LN_EPS);
        let mut y = seq.clone();
        for layer in &self.encoder {
            let att = layer.mha.forward(&y, &y, &y)?;
            let y1 = att.add(&y)?.layer_norm(&layer.ln1.0, &layer.ln1.1, eps)?;
            let mlp = layer.mlp.forward(&y1)?;
            y = mlp.add(&y1)?.layer_norm(&layer.ln2.0, &layer.ln2.1, eps)?;
        }
        Ok(y)
    }

    fn decode(&self, seq_ref: &Tensor<E>, enc_out: &Tensor<E>) -> Result<Tensor<E>> {
        if seq_ref.shape() != enc_out.shape() {
            return Err(ModelError::InvalidInput(format!(
                "decoder input {:?} vs encoder output {:?}",
                seq_ref.shape(),
                enc_out.shape()
            )));
        }
        let eps = E::from_f64(LN_EPS);
        let mut z = seq_ref.clone();
        for layer in &self.decoder {
            let att = layer.self_mha.forward(&z, &z, &z)?;
            let z1 = att.add(&z)?.layer_norm(&layer.ln1.0, &layer.ln1.1, eps)?;
            let cross = layer.cross_mha.forward(&z1, enc_out, enc_out)?;
            let z2 = cross.add(&z1)?.layer_norm(&layer.ln2.0, &layer.ln2.1, eps)?;
            let mlp = layer.mlp.forward(&z2)?;
            z = mlp.add(&z2)?.layer_norm(&layer.ln3.0, &layer.ln3.1, eps)?;
        }
        Ok(z)
    }

    /// Score = FC2(ReLU(FC1(dec_out[0]))); depends only on row 0.
    fn head_score(&self, dec_out: &Tensor<E>) -> Result<Tensor<E>> {
        let quality_row = dec_out.slice0(0, 1)?;
        let hidden = self.head_fc1.forward(&quality_row)?.relu()?;
        Ok(self.head_fc2.forward(&hidden)?.reshape(vec![1])?)
    }

    /// Full per-scale forward from canonical ref and diff volumes.
    fn score_from_canonical(
        &self,
        f_ref: &FeatureVolume<E>,
        f_diff: &FeatureVolume<E>,
        cfg: &ModelConfig,
    ) -> Result<Tensor<E>> {
        let seq_diff = self.embed_diff.embed(f_diff, cfg)?;
        let enc_out = self.encode(&seq_diff)?;
        let seq_ref = self.embed_ref.embed(f_ref, cfg)?;
        let dec_out = self.decode(&seq_ref, &enc_out)?;
        self.head_score(&dec_out)
    }
}

/// The full model: four independent per-scale stacks over a shared frozen
/// backbone. Holds shared handles into the parameter store, so optimizer
/// updates are visible without rebuilding.
pub struct MsfptModel<E: Elem> {
    cfg: ModelConfig,
    store: ParamStore<E>,
    stacks: Vec<ScaleStack<E>>,
}

impl<E: Elem> MsfptModel<E> {
    pub fn new(cfg: ModelConfig, store: &ParamStore<E>) -> std::result::Result<Self, NnError> {
        cfg.validate().map_err(NnError::InvalidConfig)?;
        let stacks = cfg
            .scales
            .iter()
            .map(|&s| ScaleStack::from_store(store, &cfg, s))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(MsfptModel {
            cfg,
            store: store.share(),
            stacks,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<E> {
        &self.store
    }

    /// Canonical ref and diff feature volumes for one image pair at one scale.
    pub fn canonical_volumes(
        &self,
        ref_img: &ImageTensor<E>,
        dist_img: &ImageTensor<E>,
        scale: Scale,
    ) -> Result<(FeatureVolume<E>, FeatureVolume<E>)> {
        if ref_img.height() != dist_img.height() || ref_img.width() != dist_img.width() {
            return Err(ModelError::InvalidInput(format!(
                "reference {}x{} and distorted {}x{} sizes differ",
                ref_img.height(),
                ref_img.width(),
                dist_img.height(),
                dist_img.width()
            )));
        }
        let scaled_ref = &build_pyramid(ref_img, &[scale])?[0];
        let scaled_dist = &build_pyramid(dist_img, &[scale])?[0];
        let f_ref = extract_features(scaled_ref, &self.store, &self.cfg, scale)?;
        let f_dist = extract_features(scaled_dist, &self.store, &self.cfg, scale)?;
        let f_diff = diff_features(&f_ref, &f_dist)?;
        let f_ref = to_canonical(&f_ref, self.cfg.target_h, self.cfg.target_w)?;
        let f_diff = to_canonical(&f_diff, self.cfg.target_h, self.cfg.target_w)?;
        Ok((f_ref, f_diff))
    }

    fn stack(&self, scale: Scale) -> Result<&ScaleStack<E>> {
        self.stacks
            .iter()
            .find(|s| s.scale == scale)
            .ok_or_else(|| ModelError::InvalidInput(format!("scale {scale} not configured")))
    }

    /// Encoder output for a canonical diff volume. Exposed for shape and
    /// property tests; `score_scale_from_canonical` is the scoring path.
    pub fn encode_diff(&self, scale: Scale, f_diff: &FeatureVolume<E>) -> Result<Tensor<E>> {
        let stack = self.stack(scale)?;
        let seq = stack.embed_diff.embed(f_diff, &self.cfg)?;
        stack.encode(&seq)
    }

    /// Decoder output for a canonical ref volume against a given encoder
    /// output. Exposed for shape and property tests.
    pub fn decode_ref(
        &self,
        scale: Scale,
        f_ref: &FeatureVolume<E>,
        enc_out: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        let stack = self.stack(scale)?;
        let seq = stack.embed_ref.embed(f_ref, &self.cfg)?;
        stack.decode(&seq, enc_out)
    }

    /// Head score from a decoder output. Exposed for property tests.
    pub fn head_from_decoded(&self, scale: Scale, dec_out: &Tensor<E>) -> Result<Tensor<E>> {
        self.stack(scale)?.head_score(dec_out)
    }

    /// Per-scale forward from canonical volumes (used when backbone features
    /// are cached or imported). Returns the score as a graph tensor.
    pub fn score_scale_from_canonical(
        &self,
        scale: Scale,
        f_ref: &FeatureVolume<E>,
        f_diff: &FeatureVolume<E>,
    ) -> Result<Tensor<E>> {
        let stack = self
            .stacks
            .iter()
            .find(|s| s.scale == scale)
            .ok_or_else(|| ModelError::InvalidInput(format!("scale {scale} not configured")))?;
        stack.score_from_canonical(f_ref, f_diff, &self.cfg)
    }

    /// Full per-scale pipeline: extract, diff, canonicalize, encode the diff
    /// stream, decode the ref stream against it, score.
    pub fn score_scale(
        &self,
        ref_img: &ImageTensor<E>,
        dist_img: &ImageTensor<E>,
        scale: Scale,
    ) -> Result<Tensor<E>> {
        let (f_ref, f_diff) = self.canonical_volumes(ref_img, dist_img, scale)?;
        self.score_scale_from_canonical(scale, &f_ref, &f_diff)
    }

    /// Score one image pair: per-scale scores in fixed configured order and
    /// their arithmetic mean.
    pub fn score_pair(
        &self,
        ref_img: &ImageTensor<E>,
        dist_img: &ImageTensor<E>,
    ) -> Result<(Tensor<E>, Vec<(Scale, Tensor<E>)>)> {
        let mut per_scale = Vec::with_capacity(self.stacks.len());
        for stack in &self.stacks {
            let (f_ref, f_diff) = self.canonical_volumes(ref_img, dist_img, stack.scale)?;
            let score = stack.score_from_canonical(&f_ref, &f_diff, &self.cfg)?;
            per_scale.push((stack.scale, score));
        }
        let final_score = average_scores(&per_scale)?;
        Ok((final_score, per_scale))
    }

    /// Convenience wrapper returning plain floats.
    pub fn score_pair_f64(
        &self,
        ref_img: &ImageTensor<E>,
        dist_img: &ImageTensor<E>,
    ) -> Result<(f64, ScaleScores)> {
        let (final_score, per_scale) = self.score_pair(ref_img, dist_img)?;
        let pairs: Vec<(Scale, f64)> = per_scale
            .iter()
            .map(|(s, t)| (*s, t.item().to_f64()))
            .collect();
        Ok((final_score.item().to_f64(), ScaleScores::from_pairs(&pairs)))
    }

    /// Average `score_pair` finals over `m` deterministic overlapping
    /// patches of size `patch`×`patch` (row-major grid, corners included;
    /// `m == 1` uses the center patch).
    pub fn ensemble_score(
        &self,
        ref_img: &ImageTensor<E>,
        dist_img: &ImageTensor<E>,
        m: usize,
        patch: usize,
    ) -> Result<f64> {
        if m == 0 {
            return Err(ModelError::InvalidInput("patch count must be >= 1".into()));
        }
        let (h, w) = (ref_img.height(), ref_img.width());
        if patch > h || patch > w {
            return Err(ModelError::InvalidInput(format!(
                "image {h}x{w} smaller than patch size {patch}"
            )));
        }
        let mut total = 0.0;
        for (y0, x0) in patch_grid(h, w, patch, m) {
            let rp = ref_img.crop(y0, x0, patch, patch)?;
            let dp = dist_img.crop(y0, x0, patch, patch)?;
            let (score, _) = self.score_pair(&rp, &dp)?;
            total += score.item().to_f64();
        }
        Ok(total / m as f64)
    }
}

/// Arithmetic mean of per-scale scores, summed in the given fixed order.
pub fn average_scores<E: Elem>(per_scale: &[(Scale, Tensor<E>)]) -> Result<Tensor<E>> {
    let scores: Vec<Tensor<E>> = per_scale.iter().map(|(_, t)| t.clone()).collect();
    Ok(Tensor::concat0(&scores)?.mean()?)
}

/// Deterministic uniform patch grid, row-major, corners included.
pub fn patch_grid(h: usize, w: usize, patch: usize, m: usize) -> Vec<(usize, usize)> {
    if m == 1 {
        return vec![((h - patch) / 2, (w - patch) / 2)];
    }
    let gw = (m as f64).sqrt().ceil() as usize;
    let gh = m.div_ceil(gw);
    let axis = |span: usize, g: usize, i: usize| -> usize {
        if g == 1 {
            span / 2
        } else {
            ((i as f64) * (span as f64) / ((g - 1) as f64)).round() as usize
        }
    };
    let mut out = Vec::with_capacity(m);
    'outer: for gy in 0..gh {
        for gx in 0..gw {
            out.push((axis(h - patch, gh, gy), axis(w - patch, gw, gx)));
            if out.len() == m {
                break 'outer;
            }
        }
    }
    out
}
