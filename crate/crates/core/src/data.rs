//! Dataset manifests, image decoding, the `.fvol` feature-volume format,
//! and batch evaluation with correlation aggregates.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{BackboneError, FeatureSource, FeatureVolume, ImageTensor};
use crate::config::{ModelConfig, Scale};
use crate::metrics::{krcc, main_score, plcc, srcc, MetricError};
use crate::model::{ModelError, MsfptModel};
use crate::nn::{load_checkpoint, CheckpointError, CheckpointMeta};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Csv(#[from] csv::Error),
    #[error("manifest row {row}: {detail}")]
    ManifestRow { row: usize, detail: String },
    #[error("manifest is empty: no image pairs")]
    EmptyManifest,
    #[error("cannot decode image '{path}': {detail}")]
    Image { path: String, detail: String },
    #[error("feature volume file: {0}")]
    Fvol(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// One manifest row: an image pair and its subjective score.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub ref_path: PathBuf,
    pub dist_path: PathBuf,
    pub mos: f64,
}

/// Parsed dataset manifest. Relative paths are resolved against the
/// manifest's own directory.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Read a CSV manifest with header `ref_path,dist_path,mos`.
    pub fn load(path: &Path) -> Result<Manifest, DataError> {
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)?;
        let headers = reader.headers()?.clone();
        let expected = ["ref_path", "dist_path", "mos"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(DataError::ManifestRow {
                row: 0,
                detail: format!(
                    "header must be 'ref_path,dist_path,mos', got '{}'",
                    headers.iter().collect::<Vec<_>>().join(",")
                ),
            });
        }
        let mut entries = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let row = i + 1;
            let record = record?;
            if record.len() != 3 {
                return Err(DataError::ManifestRow {
                    row,
                    detail: format!("expected 3 fields, got {}", record.len()),
                });
            }
            let mos: f64 = record[2].parse().map_err(|_| DataError::ManifestRow {
                row,
                detail: format!("invalid mos value '{}'", &record[2]),
            })?;
            if !mos.is_finite() {
                return Err(DataError::ManifestRow {
                    row,
                    detail: "mos must be finite".into(),
                });
            }
            let resolve = |p: &str| {
                let pb = PathBuf::from(p);
                if pb.is_absolute() {
                    pb
                } else {
                    base.join(pb)
                }
            };
            entries.push(ManifestEntry {
                ref_path: resolve(&record[0]),
                dist_path: resolve(&record[1]),
                mos,
            });
        }
        if entries.is_empty() {
            return Err(DataError::EmptyManifest);
        }
        Ok(Manifest { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Decode a PNG or BMP file to a 3×H×W tensor in [0, 1]. Grayscale inputs
/// are replicated across the three channels.
pub fn decode_image(path: &Path) -> Result<ImageTensor<f32>, DataError> {
    let img = image::open(path).map_err(|e| DataError::Image {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in rgb.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[(c * h + y) * w + x] = p.0[c] as f32 / 255.0;
        }
    }
    let t = Tensor::from_vec(vec![3, h, w], data).map_err(|e| DataError::Image {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    ImageTensor::new(t).map_err(|e| DataError::Image {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

const FVOL_MAGIC: &[u8; 4] = b"FVOL";
const FVOL_VERSION: u32 = 1;

/// Write a feature volume as `FVOL | u32 version | u32 C,H,W | f32 scale
/// code | f32 payload`, all little-endian.
pub fn save_fvol(f: &FeatureVolume<f32>, path: &Path) -> Result<(), DataError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(FVOL_MAGIC);
    buf.extend_from_slice(&FVOL_VERSION.to_le_bytes());
    let sh = f.tensor.shape();
    for &d in sh {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&f.scale.code().to_le_bytes());
    for v in f.tensor.to_vec() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Load a feature volume written by [`save_fvol`]. `expected_channels`
/// guards against volumes produced under a different backbone width.
pub fn load_fvol(path: &Path, expected_channels: Option<usize>) -> Result<FeatureVolume<f32>, DataError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 24 {
        return Err(DataError::Fvol("truncated header".into()));
    }
    if &bytes[0..4] != FVOL_MAGIC {
        return Err(DataError::Fvol("bad magic: not a feature volume file".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != FVOL_VERSION {
        return Err(DataError::Fvol(format!(
            "unsupported version {version} (expected {FVOL_VERSION})"
        )));
    }
    let (c, h, w) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
    let code = f32::from_le_bytes(bytes[20..24].try_into().unwrap());
    let scale = Scale::from_code(code)
        .ok_or_else(|| DataError::Fvol(format!("unknown scale code {code}")))?;
    if let Some(expect) = expected_channels {
        if c != expect {
            return Err(DataError::Fvol(format!(
                "channel count {c} does not match configured {expect}"
            )));
        }
    }
    let n = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| DataError::Fvol("shape overflow".into()))?;
    let payload = &bytes[24..];
    if payload.len() != 4 * n {
        return Err(DataError::Fvol(format!(
            "payload is {} bytes, shape {c}x{h}x{w} needs {}",
            payload.len(),
            4 * n
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let t = Tensor::from_vec(vec![c, h, w], data).map_err(|e| DataError::Fvol(e.to_string()))?;
    FeatureVolume::new(t, scale, FeatureSource::Imported).map_err(DataError::Backbone)
}

/// Load a checkpoint and build a ready-to-score model from it.
pub fn load_model(checkpoint: &Path) -> Result<(MsfptModel<f32>, CheckpointMeta), DataError> {
    let (store, meta, _) = load_checkpoint(checkpoint)?;
    let model = MsfptModel::new(meta.model.clone(), &store)
        .map_err(|e| DataError::Checkpoint(CheckpointError::Format(e.to_string())))?;
    Ok((model, meta))
}

/// One scored manifest row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub ref_path: String,
    pub dist_path: String,
    pub mos: f64,
    /// Model output on the normalized [0, 1] training scale.
    pub score_normalized: f64,
    /// Score mapped back to the checkpoint's MOS range.
    pub score: f64,
}

/// Correlation aggregates over a full manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalAggregates {
    pub plcc: f64,
    pub srcc: f64,
    pub krcc: f64,
    pub main_score: f64,
}

/// Full evaluation result, serializable as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub model: ModelConfig,
    pub patch_size: usize,
    pub patches_per_image: usize,
    pub num_pairs: usize,
    pub rows: Vec<EvalRow>,
    pub aggregates: EvalAggregates,
    pub elapsed_seconds: f64,
}

fn eval_thread_count() -> usize {
    match std::env::var("MSFPT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        // 0 means auto-detect.
        Some(0) => std::thread::available_parallelism().map_or(1, |n| n.get()),
        Some(n) => n,
        None => 1,
    }
}

fn score_entry(
    model: &MsfptModel<f32>,
    meta: &CheckpointMeta,
    entry: &ManifestEntry,
    patches: usize,
) -> Result<f64, DataError> {
    let ref_img = decode_image(&entry.ref_path)?;
    let dist_img = decode_image(&entry.dist_path)?;
    if ref_img.height() != dist_img.height() || ref_img.width() != dist_img.width() {
        return Err(DataError::Model(ModelError::InvalidInput(format!(
            "pair sizes differ: {}x{} vs {}x{}",
            ref_img.height(),
            ref_img.width(),
            dist_img.height(),
            dist_img.width()
        ))));
    }
    let patch = meta
        .patch_size
        .min(ref_img.height())
        .min(ref_img.width());
    Ok(model.ensemble_score(&ref_img, &dist_img, patches, patch)?)
}

/// Score one image pair with a loaded model: `patches` deterministic crops
/// of the checkpoint's patch size, averaged. Returns the normalized score.
pub fn score_pair_files(
    model: &MsfptModel<f32>,
    meta: &CheckpointMeta,
    ref_path: &Path,
    dist_path: &Path,
    patches: usize,
) -> Result<f64, DataError> {
    let entry = ManifestEntry {
        ref_path: ref_path.to_path_buf(),
        dist_path: dist_path.to_path_buf(),
        mos: 0.0,
    };
    score_entry(model, meta, &entry, patches)
}

/// Score every manifest row and compute correlation aggregates against MOS.
///
/// Rows are partitioned across `MSFPT_THREADS` worker threads (default 1);
/// each worker reloads the checkpoint privately, because model tensors are
/// not thread-safe. Output order always follows the manifest, so results
/// are identical for any thread count.
pub fn evaluate(
    checkpoint: &Path,
    manifest: &Manifest,
    patches: usize,
) -> Result<EvalReport, DataError> {
    let start = Instant::now();
    if manifest.is_empty() {
        return Err(DataError::EmptyManifest);
    }
    let threads = eval_thread_count().min(manifest.len());
    let n = manifest.len();
    let mut scores: Vec<Option<Result<f64, DataError>>> = Vec::with_capacity(n);
    scores.resize_with(n, || None);

    if threads <= 1 {
        let (model, meta) = load_model(checkpoint)?;
        for (i, entry) in manifest.entries.iter().enumerate() {
            scores[i] = Some(score_entry(&model, &meta, entry, patches));
        }
    } else {
        let results = std::thread::scope(|scope| {
            let mut handles = Vec::with_capacity(threads);
            for t in 0..threads {
                let entries = &manifest.entries;
                handles.push(scope.spawn(move || {
                    let (model, meta) = match load_model(checkpoint) {
                        Ok(v) => v,
                        Err(e) => return vec![(t, Err(e))],
                    };
                    entries
                        .iter()
                        .enumerate()
                        .skip(t)
                        .step_by(threads)
                        .map(|(i, entry)| (i, score_entry(&model, &meta, entry, patches)))
                        .collect::<Vec<_>>()
                }));
            }
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation worker panicked"))
                .collect::<Vec<_>>()
        });
        for (i, r) in results {
            scores[i] = Some(r);
        }
    }

    let (_, meta) = {
        let (store, meta, _) = load_checkpoint(checkpoint)?;
        (store, meta)
    };
    let mut rows = Vec::with_capacity(n);
    for (entry, slot) in manifest.entries.iter().zip(scores) {
        let normalized = slot.expect("every row scored")?;
        rows.push(EvalRow {
            ref_path: entry.ref_path.display().to_string(),
            dist_path: entry.dist_path.display().to_string(),
            mos: entry.mos,
            score_normalized: normalized,
            score: meta.denormalize(normalized),
        });
    }

    let preds: Vec<f64> = rows.iter().map(|r| r.score_normalized).collect();
    let mos: Vec<f64> = rows.iter().map(|r| r.mos).collect();
    let p = plcc(&preds, &mos)?;
    let s = srcc(&preds, &mos)?;
    let k = krcc(&preds, &mos)?;
    Ok(EvalReport {
        checkpoint: checkpoint.display().to_string(),
        model: meta.model.clone(),
        patch_size: meta.patch_size,
        patches_per_image: patches,
        num_pairs: n,
        rows,
        aggregates: EvalAggregates {
            plcc: p,
            srcc: s,
            krcc: k,
            main_score: main_score(p, s),
        },
        elapsed_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_manifest(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("manifest.csv");
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn manifest_parses_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(
            dir.path(),
            "ref_path,dist_path,mos\nrefs/a.png,dists/a.png,3.5\n/abs/b.png,/abs/c.png,1.0\n",
        );
        let m = Manifest::load(&p).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.entries[0].ref_path, dir.path().join("refs/a.png"));
        assert_eq!(m.entries[1].ref_path, PathBuf::from("/abs/b.png"));
        assert_eq!(m.entries[0].mos, 3.5);
    }

    #[test]
    fn manifest_rejects_bad_header_and_bad_mos() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(dir.path(), "a,b,c\nx,y,1\n");
        assert!(matches!(
            Manifest::load(&p),
            Err(DataError::ManifestRow { row: 0, .. })
        ));
        let p = write_manifest(dir.path(), "ref_path,dist_path,mos\nx,y,abc\n");
        assert!(matches!(
            Manifest::load(&p),
            Err(DataError::ManifestRow { row: 1, .. })
        ));
    }

    #[test]
    fn manifest_empty_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(dir.path(), "ref_path,dist_path,mos\n");
        assert!(matches!(Manifest::load(&p), Err(DataError::EmptyManifest)));
    }

    #[test]
    fn decode_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut img = image::RgbImage::new(40, 36);
        for (x, y, p) in img.enumerate_pixels_mut() {
            p.0 = [(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8];
        }
        img.save(&path).unwrap();
        let t = decode_image(&path).unwrap();
        assert_eq!(t.height(), 36);
        assert_eq!(t.width(), 40);
        let data = t.tensor().to_vec();
        // Channel 0, pixel (y=2, x=5) is x/255.
        assert!((data[2 * 40 + 5] - 5.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn decode_grayscale_replicates_channels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.png");
        let img = image::GrayImage::from_fn(32, 32, |x, _| image::Luma([x as u8]));
        img.save(&path).unwrap();
        let t = decode_image(&path).unwrap();
        let data = t.tensor().to_vec();
        let hw = 32 * 32;
        for i in 0..hw {
            assert_eq!(data[i], data[hw + i]);
            assert_eq!(data[i], data[2 * hw + i]);
        }
    }

    #[test]
    fn fvol_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.fvol");
        let data: Vec<f32> = (0..2 * 3 * 4).map(|i| i as f32 * 0.5).collect();
        let t = Tensor::from_vec(vec![2, 3, 4], data.clone()).unwrap();
        let f = FeatureVolume::new(t, Scale::S2, FeatureSource::Computed).unwrap();
        save_fvol(&f, &path).unwrap();
        let back = load_fvol(&path, Some(2)).unwrap();
        assert_eq!(back.tensor.to_vec(), data);
        assert_eq!(back.scale, Scale::S2);
        assert_eq!(back.source, FeatureSource::Imported);

        assert!(matches!(load_fvol(&path, Some(7)), Err(DataError::Fvol(_))));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_fvol(&path, None), Err(DataError::Fvol(_))));

        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(load_fvol(&path, None), Err(DataError::Fvol(_))));
    }
}
