//! Desk-scale stand-in corpus: grayscale PNGs where positives carry a bright
//! blob in the upper half and negatives in the lower half, over a noisy
//! background.

use std::fs;
use std::path::{Path, PathBuf};

use crate::label::Label;
use crate::manifest::{Manifest, ManifestError, SampleRecord};
use crate::rng::SplitMix64;

pub const DEFAULT_SIDE: u32 = 256;
const BACKGROUND: f64 = 0.25;
const NOISE_SD: f64 = 0.05;
const BLOB_PEAK: f64 = 0.6;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot encode image: {0}")]
    Encode(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

/// Render one synthetic radiograph. Sample `index` draws from its own
/// substream of `seed`, so images do not depend on generation order.
pub fn render(label: Label, seed: u64, index: u64, side: u32) -> image::GrayImage {
    let mut rng = SplitMix64::derived(seed, &[index]);
    let s = side as f64;
    let cx = rng.uniform(0.3, 0.7) * s;
    let cy = match label {
        Label::Positive => rng.uniform(0.18, 0.32),
        Label::Negative => rng.uniform(0.68, 0.82),
    } * s;
    let radius = rng.uniform(0.07, 0.11) * s;
    let two_r2 = 2.0 * radius * radius;
    image::GrayImage::from_fn(side, side, |x, y| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        let v = BACKGROUND + BLOB_PEAK * (-(dx * dx + dy * dy) / two_r2).exp() + NOISE_SD * rng.normal();
        image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

/// Write `n_pos + n_neg` PNGs and `manifest.csv` into `out_dir`.
pub fn make_synthetic_corpus(n_pos: usize, n_neg: usize, seed: u64, out_dir: &Path, side: u32) -> Result<Manifest, SynthError> {
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|source| SynthError::Io { path: img_dir.clone(), source })?;

    let mut samples = Vec::with_capacity(n_pos + n_neg);
    let labels = std::iter::repeat(Label::Positive).take(n_pos).chain(std::iter::repeat(Label::Negative).take(n_neg));
    for (i, label) in labels.enumerate() {
        let id = format!("{}_{i:04}", label.as_str());
        let rel = PathBuf::from("images").join(format!("{id}.png"));
        let img = render(label, seed, i as u64, side);
        let mut bytes = std::io::Cursor::new(Vec::new());
        img.write_to(&mut bytes, image::ImageFormat::Png)
            .map_err(|e| SynthError::Encode(e.to_string()))?;
        let path = out_dir.join(&rel);
        fs::write(&path, bytes.into_inner()).map_err(|source| SynthError::Io { path, source })?;
        samples.push(SampleRecord {
            id,
            image_path: rel,
            label,
            source_note: Some(format!("synthetic seed={seed}")),
        });
    }
    let manifest = Manifest::from_records(samples, out_dir)?;
    manifest.write_csv(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
