//! Per-scale feature volumes: image pyramid, frozen feature extraction,
//! difference features, and interpolation to the canonical grid.
//!
//! The pretrained backbone is replaced by a frozen, seeded stand-in: three
//! stride-2 3×3 conv+ReLU stages whose outputs are split into six
//! equal-width blocks and channel-concatenated at the final spatial size.
//! Externally computed backbone features can be consumed instead via the
//! `.fvol` import path in [`crate::data`].

use thiserror::Error;

use crate::config::{ModelConfig, Scale};
use crate::elem::Elem;
use crate::nn::{NnError, ParamStore};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("input too small: {0}")]
    InputTooSmall(String),
    #[error("feature shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Where a feature volume came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    Computed,
    Imported,
}

/// RGB image as a 3×H×W tensor with values in [0, 1].
#[derive(Clone)]
pub struct ImageTensor<E: Elem> {
    tensor: Tensor<E>,
}

impl<E: Elem> ImageTensor<E> {
    /// Validated entry point for decoded images (H, W >= 32, values in [0,1]).
    pub fn new(tensor: Tensor<E>) -> Result<Self, BackboneError> {
        let sh = tensor.shape();
        if sh.len() != 3 || sh[0] != 3 {
            return Err(BackboneError::ShapeMismatch(format!(
                "expected 3×H×W, got {sh:?}"
            )));
        }
        if sh[1] < 32 || sh[2] < 32 {
            return Err(BackboneError::InputTooSmall(format!(
                "image {}x{} below the 32-pixel minimum",
                sh[1], sh[2]
            )));
        }
        let one = E::one();
        let zero = E::zero();
        if tensor.data_ref().iter().any(|&v| v < zero || v > one) {
            return Err(BackboneError::ShapeMismatch(
                "pixel values must lie in [0, 1]".into(),
            ));
        }
        Ok(ImageTensor { tensor })
    }

    /// Internal constructor for pyramid levels and crops, which may be
    /// smaller than decoded inputs.
    pub(crate) fn derived(tensor: Tensor<E>) -> Self {
        debug_assert_eq!(tensor.shape().len(), 3);
        debug_assert_eq!(tensor.shape()[0], 3);
        ImageTensor { tensor }
    }

    pub fn tensor(&self) -> &Tensor<E> {
        &self.tensor
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    /// Crop a window; the window must fit.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self, BackboneError> {
        let (ih, iw) = (self.height(), self.width());
        if y0 + h > ih || x0 + w > iw || h == 0 || w == 0 {
            return Err(BackboneError::InputTooSmall(format!(
                "crop {h}x{w}+{y0}+{x0} exceeds image {ih}x{iw}"
            )));
        }
        let src = self.tensor.to_vec();
        let mut out = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in 0..h {
                let row = (c * ih + y0 + y) * iw + x0;
                out.extend_from_slice(&src[row..row + w]);
            }
        }
        Ok(ImageTensor::derived(Tensor::from_vec(vec![3, h, w], out)?))
    }

    pub fn flip_horizontal(&self) -> Self {
        let (h, w) = (self.height(), self.width());
        let src = self.tensor.to_vec();
        let mut out = vec![E::zero(); src.len()];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out[(c * h + y) * w + x] = src[(c * h + y) * w + (w - 1 - x)];
                }
            }
        }
        ImageTensor::derived(Tensor::from_vec(vec![3, h, w], out).unwrap())
    }

    pub fn flip_vertical(&self) -> Self {
        let (h, w) = (self.height(), self.width());
        let src = self.tensor.to_vec();
        let mut out = vec![E::zero(); src.len()];
        for c in 0..3 {
            for y in 0..h {
                let srow = (c * h + (h - 1 - y)) * w;
                out[(c * h + y) * w..(c * h + y) * w + w]
                    .copy_from_slice(&src[srow..srow + w]);
            }
        }
        ImageTensor::derived(Tensor::from_vec(vec![3, h, w], out).unwrap())
    }

    /// Rotate counter-clockwise by `k` quarter turns (square images only).
    pub fn rot90(&self, k: usize) -> Result<Self, BackboneError> {
        let (h, w) = (self.height(), self.width());
        if h != w {
            return Err(BackboneError::ShapeMismatch(format!(
                "rot90 requires a square image, got {h}x{w}"
            )));
        }
        let mut cur = self.tensor.to_vec();
        let n = h;
        for _ in 0..(k % 4) {
            let mut next = vec![E::zero(); cur.len()];
            for c in 0..3 {
                for y in 0..n {
                    for x in 0..n {
                        // (y, x) -> (n-1-x, y) is one CCW quarter turn.
                        next[(c * n + (n - 1 - x)) * n + y] = cur[(c * n + y) * n + x];
                    }
                }
            }
            cur = next;
        }
        Ok(ImageTensor::derived(Tensor::from_vec(vec![3, n, n], cur)?))
    }
}

/// C×h×w feature map extracted from one image at one scale.
#[derive(Clone)]
pub struct FeatureVolume<E: Elem> {
    pub tensor: Tensor<E>,
    pub scale: Scale,
    pub source: FeatureSource,
}

impl<E: Elem> FeatureVolume<E> {
    pub fn new(tensor: Tensor<E>, scale: Scale, source: FeatureSource) -> Result<Self, BackboneError> {
        if tensor.shape().len() != 3 {
            return Err(BackboneError::ShapeMismatch(format!(
                "feature volume must be C×h×w, got {:?}",
                tensor.shape()
            )));
        }
        Ok(FeatureVolume { tensor, scale, source })
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.tensor.shape()[1], self.tensor.shape()[2])
    }
}

/// Rescale the image to every working scale, in fixed scale order.
/// Scale 1 is returned bit-identical to the input.
pub fn build_pyramid<E: Elem>(
    img: &ImageTensor<E>,
    scales: &[Scale],
) -> Result<Vec<ImageTensor<E>>, BackboneError> {
    let (h, w) = (img.height(), img.width());
    for &s in scales {
        if s.scaled_len(h) < 9 || s.scaled_len(w) < 9 {
            return Err(BackboneError::InputTooSmall(format!(
                "image {h}x{w} shrinks below 9 pixels at scale {s}"
            )));
        }
    }
    scales
        .iter()
        .map(|&s| {
            if s == Scale::S1 {
                Ok(img.clone())
            } else {
                let t = img
                    .tensor
                    .bilinear_resize(s.scaled_len(h), s.scaled_len(w))?;
                Ok(ImageTensor::derived(t))
            }
        })
        .collect()
}

/// Run the frozen stand-in backbone on one image.
///
/// Three stride-2 conv+ReLU stages; each stage's output splits into two
/// blocks of `block_channels`, the earlier taps are resized to the final
/// spatial size, and the six blocks are channel-concatenated.
pub fn extract_features<E: Elem>(
    img: &ImageTensor<E>,
    store: &ParamStore<E>,
    cfg: &ModelConfig,
    scale: Scale,
) -> Result<FeatureVolume<E>, BackboneError> {
    if img.height() < 8 || img.width() < 8 {
        return Err(BackboneError::InputTooSmall(format!(
            "backbone needs at least 8x8 input, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    let mut taps = Vec::with_capacity(3);
    let mut x = img.tensor.clone();
    for i in 0..3 {
        let w = store.get(&format!("backbone.stage{i}.weight"))?;
        let b = store.get(&format!("backbone.stage{i}.bias"))?;
        x = x.conv2d(&w, 2, 1)?.add_channel(&b)?.relu()?;
        taps.push(x.clone());
    }
    let (fh, fw) = (taps[2].shape()[1], taps[2].shape()[2]);
    let mut blocks = Vec::with_capacity(3);
    for tap in &taps {
        let resized = tap.bilinear_resize(fh, fw)?;
        let c = resized.shape()[0];
        blocks.push(resized.reshape(vec![c, fh * fw])?);
    }
    let cat = Tensor::concat0(&blocks)?;
    let channels = cfg.feature_channels();
    let volume = cat.reshape(vec![channels, fh, fw])?;
    FeatureVolume::new(volume, scale, FeatureSource::Computed)
}

/// Difference features: `f_ref - f_dist`, elementwise.
pub fn diff_features<E: Elem>(
    f_ref: &FeatureVolume<E>,
    f_dist: &FeatureVolume<E>,
) -> Result<FeatureVolume<E>, BackboneError> {
    if f_ref.tensor.shape() != f_dist.tensor.shape() || f_ref.scale != f_dist.scale {
        return Err(BackboneError::ShapeMismatch(format!(
            "ref {:?}@{} vs dist {:?}@{}",
            f_ref.tensor.shape(),
            f_ref.scale,
            f_dist.tensor.shape(),
            f_dist.scale
        )));
    }
    Ok(FeatureVolume {
        tensor: f_ref.tensor.sub(&f_dist.tensor)?,
        scale: f_ref.scale,
        source: f_ref.source,
    })
}

/// Interpolate to the canonical grid. A no-op (bit-exact) when the volume is
/// already target-sized.
pub fn to_canonical<E: Elem>(
    f: &FeatureVolume<E>,
    target_h: usize,
    target_w: usize,
) -> Result<FeatureVolume<E>, BackboneError> {
    Ok(FeatureVolume {
        tensor: f.tensor.bilinear_resize(target_h, target_w)?,
        scale: f.scale,
        source: f.source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            mlp_dim: 16,
            target_h: 3,
            target_w: 3,
            block_channels: 2,
            scales: Scale::ALL.to_vec(),
        }
    }

    fn test_image(h: usize, w: usize, seed: u64) -> ImageTensor<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..3 * h * w).map(|_| rng.gen::<f64>()).collect();
        ImageTensor::new(Tensor::from_vec(vec![3, h, w], data).unwrap()).unwrap()
    }

    #[test]
    fn pyramid_sizes_192() {
        let img = test_image(192, 192, 0);
        let pyr = build_pyramid(&img, &Scale::ALL).unwrap();
        let sizes: Vec<usize> = pyr.iter().map(|i| i.height()).collect();
        assert_eq!(sizes, vec![192, 96, 64, 384]);
    }

    #[test]
    fn pyramid_scale1_bit_identical() {
        let img = test_image(48, 48, 1);
        let pyr = build_pyramid(&img, &Scale::ALL).unwrap();
        assert_eq!(pyr[0].tensor().to_vec(), img.tensor().to_vec());
    }

    #[test]
    fn pyramid_constant_stays_constant() {
        let t = Tensor::from_vec(vec![3, 40, 40], vec![0.25f64; 3 * 40 * 40]).unwrap();
        let img = ImageTensor::new(t).unwrap();
        for level in build_pyramid(&img, &Scale::ALL).unwrap() {
            assert!(level.tensor().to_vec().iter().all(|&v| (v - 0.25).abs() < 1e-12));
        }
    }

    #[test]
    fn pyramid_rejects_tiny_images() {
        // 3x downscale of a 20px image would be below 9.
        let img = test_image(32, 32, 2).crop(0, 0, 20, 20).unwrap();
        assert!(matches!(
            build_pyramid(&img, &Scale::ALL),
            Err(BackboneError::InputTooSmall(_))
        ));
    }

    #[test]
    fn extract_channel_count_and_spatial() {
        let cfg = tiny_cfg();
        let store = init_params::<f64>(&cfg, 0).unwrap();
        let img = test_image(192, 192, 3);
        let f = extract_features(&img, &store, &cfg, Scale::S1).unwrap();
        assert_eq!(f.channels(), cfg.feature_channels());
        assert_eq!(f.spatial(), (24, 24)); // 192 / 2^3
    }

    #[test]
    fn extract_deterministic() {
        let cfg = tiny_cfg();
        let store = init_params::<f64>(&cfg, 0).unwrap();
        let img = test_image(64, 64, 4);
        let a = extract_features(&img, &store, &cfg, Scale::S2).unwrap();
        let b = extract_features(&img, &store, &cfg, Scale::S2).unwrap();
        assert_eq!(a.tensor.to_vec(), b.tensor.to_vec());
    }

    #[test]
    fn diff_identical_is_zero_and_antisymmetric() {
        let cfg = tiny_cfg();
        let store = init_params::<f64>(&cfg, 0).unwrap();
        let a = extract_features(&test_image(64, 64, 5), &store, &cfg, Scale::S1).unwrap();
        let b = extract_features(&test_image(64, 64, 6), &store, &cfg, Scale::S1).unwrap();
        let zero = diff_features(&a, &a).unwrap();
        assert!(zero.tensor.to_vec().iter().all(|&v| v == 0.0));
        let ab = diff_features(&a, &b).unwrap();
        let ba = diff_features(&b, &a).unwrap();
        for (x, y) in ab.tensor.to_vec().iter().zip(ba.tensor.to_vec()) {
            assert_eq!(*x, -y);
        }
    }

    #[test]
    fn diff_rejects_scale_mismatch() {
        let cfg = tiny_cfg();
        let store = init_params::<f64>(&cfg, 0).unwrap();
        let img = test_image(64, 64, 7);
        let a = extract_features(&img, &store, &cfg, Scale::S1).unwrap();
        let b = extract_features(&img, &store, &cfg, Scale::S2).unwrap();
        assert!(diff_features(&a, &b).is_err());
    }

    #[test]
    fn canonical_identity_and_range() {
        let cfg = tiny_cfg();
        let store = init_params::<f64>(&cfg, 0).unwrap();
        let f = extract_features(&test_image(64, 64, 8), &store, &cfg, Scale::S3).unwrap();
        let (h, w) = f.spatial();
        let same = to_canonical(&f, h, w).unwrap();
        assert_eq!(same.tensor.to_vec(), f.tensor.to_vec());

        let resized = to_canonical(&f, 21, 21).unwrap();
        assert_eq!(resized.channels(), f.channels());
        assert_eq!(resized.spatial(), (21, 21));
        let src = f.tensor.to_vec();
        let (lo, hi) = src
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
                (l.min(v), h.max(v))
            });
        assert!(resized
            .tensor
            .to_vec()
            .iter()
            .all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn rot90_four_times_is_identity() {
        let img = test_image(32, 32, 9);
        let r = img.rot90(4).unwrap();
        assert_eq!(r.tensor().to_vec(), img.tensor().to_vec());
        let once = img.rot90(1).unwrap();
        let thrice = once.rot90(3).unwrap();
        assert_eq!(thrice.tensor().to_vec(), img.tensor().to_vec());
    }
}
