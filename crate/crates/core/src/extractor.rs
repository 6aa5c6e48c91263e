//! Frozen pretrained backbones used as feature extractors.
//!
//! A backbone is either the built-in `toypool` (mean pooling over a 16×16
//! grid, no model file) or an ONNX graph described by a JSON metadata
//! sidecar. Extracted rows can be cached on disk, keyed by model hash,
//! image hash and every preprocessing parameter.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::imageproc::{self, AugmentParams, ImageError, ImageTensor, CHANNELS};

pub const TOYPOOL: &str = "toypool";
const TOYPOOL_GRID: usize = 16;
const TOYPOOL_SIDE: usize = 224;
const FEATURE_MAGIC: &[u8; 4] = b"CXRF";

#[derive(Debug, thiserror::Error)]
pub enum ExtractError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid backbone metadata {path}: {message}")]
    Metadata { path: PathBuf, message: String },
    #[error("model file hash {actual} does not match metadata sha256 {expected}")]
    HashMismatch { expected: String, actual: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("backbone produced non-finite features for input {0}")]
    NonFinite(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("ONNX support was not compiled in (enable the `onnx` feature)")]
    OnnxDisabled,
    #[error("corrupt feature file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    pub input_side: usize,
    pub feature_dim: usize,
    pub norm_mean: [f32; 3],
    pub norm_std: [f32; 3],
    /// `None` for built-in backbones.
    pub model_path: Option<PathBuf>,
    /// Content hash of the model; identifies the backbone in caches and provenance.
    pub sha256: String,
}

/// On-disk metadata sidecar for an exported backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneMetadata {
    pub name: String,
    pub input_side: usize,
    pub feature_dim: usize,
    pub norm_mean: [f32; 3],
    pub norm_std: [f32; 3],
    pub sha256: String,
    /// Model file relative to the sidecar; defaults to the sidecar path with
    /// an `.onnx` extension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_source: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    dim: usize,
    values: Vec<f32>,
    sample_ids: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct FeatureHeader {
    rows: usize,
    dim: usize,
    sample_ids: Vec<String>,
}

impl FeatureMatrix {
    pub fn new(dim: usize, values: Vec<f32>, sample_ids: Vec<String>) -> Result<Self, ExtractError> {
        if values.len() != sample_ids.len() * dim {
            return Err(ExtractError::ShapeMismatch(format!(
                "{} values for {} rows of dim {dim}",
                values.len(),
                sample_ids.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ExtractError::NonFinite(i / dim.max(1)));
        }
        Ok(Self { rows: sample_ids.len(), dim, values, sample_ids })
    }

    pub fn from_rows(ids: Vec<String>, rows: Vec<Vec<f32>>) -> Result<Self, ExtractError> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(ExtractError::ShapeMismatch("ragged feature rows".into()));
        }
        Self::new(dim, rows.concat(), ids)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> FeatureMatrix {
        let mut values = Vec::with_capacity(indices.len() * self.dim);
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            values.extend_from_slice(self.row(i));
            ids.push(self.sample_ids[i].clone());
        }
        FeatureMatrix { rows: indices.len(), dim: self.dim, values, sample_ids: ids }
    }

    /// Stack matrices of equal dim.
    pub fn concat(parts: &[FeatureMatrix]) -> Result<FeatureMatrix, ExtractError> {
        let dim = parts.first().map_or(0, |p| p.dim);
        if parts.iter().any(|p| p.dim != dim) {
            return Err(ExtractError::ShapeMismatch("cannot stack matrices of different dim".into()));
        }
        let values = parts.iter().flat_map(|p| p.values.iter().copied()).collect();
        let ids = parts.iter().flat_map(|p| p.sample_ids.iter().cloned()).collect();
        Self::new(dim, values, ids)
    }

    /// `CXRF`, u32 LE header length, JSON header `{rows, dim, sample_ids}`,
    /// then `rows * dim` little-endian f32 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&FeatureHeader {
            rows: self.rows,
            dim: self.dim,
            sample_ids: self.sample_ids.clone(),
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(8 + header.len() + self.values.len() * 4);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ExtractError> {
        let corrupt = |m: &str| ExtractError::Corrupt(m.to_string());
        if bytes.len() < 8 || &bytes[..4] != FEATURE_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header_end = 8usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("truncated header"))?;
        let header: FeatureHeader =
            serde_json::from_slice(&bytes[8..header_end]).map_err(|e| ExtractError::Corrupt(e.to_string()))?;
        let payload = &bytes[header_end..];
        if header.rows != header.sample_ids.len() || payload.len() != header.rows * header.dim * 4 {
            return Err(corrupt("payload length does not match header"));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(header.dim, values, header.sample_ids)
    }

    pub fn write(&self, path: &Path) -> Result<(), ExtractError> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self, ExtractError> {
        let bytes = fs::read(path).map_err(|source| ExtractError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes)
    }
}

/// Write through a temp file in the destination directory, then rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ExtractError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let io = |source| ExtractError::Io { path: path.to_path_buf(), source };
    fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

enum Engine {
    ToyPool,
    #[cfg(feature = "onnx")]
    Onnx(onnx::OnnxRunner),
}

/// A loaded, immutable feature extractor.
pub struct Backbone {
    spec: BackboneSpec,
    engine: Engine,
}

impl std::fmt::Debug for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backbone").field("spec", &self.spec).finish_non_exhaustive()
    }
}

impl Backbone {
    /// Mean of each 14×14 cell of a 16×16 grid over a 224×224 input,
    /// per channel: 16·16·3 = 768 features, indexed `c·256 + gy·16 + gx`.
    pub fn toypool() -> Self {
        Self {
            spec: BackboneSpec {
                name: TOYPOOL.to_string(),
                input_side: TOYPOOL_SIDE,
                feature_dim: TOYPOOL_GRID * TOYPOOL_GRID * CHANNELS,
                norm_mean: [0.0; 3],
                norm_std: [1.0; 3],
                model_path: None,
                sha256: sha256_hex(b"builtin:toypool:grid16:side224:v1"),
            },
            engine: Engine::ToyPool,
        }
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    /// Decode, resize, optionally warp, then normalise with the backbone's statistics.
    pub fn prepare(&self, encoded: &[u8], augment: Option<&AugmentParams>) -> Result<ImageTensor, ExtractError> {
        let img = imageproc::decode_resize(encoded, self.spec.input_side)?;
        let img = match augment {
            Some(p) => imageproc::apply_augment(&img, p),
            None => img,
        };
        Ok(imageproc::normalize(&img, self.spec.norm_mean, self.spec.norm_std)?)
    }

    fn check_input(&self, img: &ImageTensor) -> Result<(), ExtractError> {
        let s = self.spec.input_side;
        if img.height() != s || img.width() != s {
            return Err(ExtractError::ShapeMismatch(format!(
                "expected {s}x{s} input, got {}x{}",
                img.height(),
                img.width()
            )));
        }
        Ok(())
    }

    /// Feature vector for one normalised image.
    pub fn extract_one(&self, img: &ImageTensor) -> Result<Vec<f32>, ExtractError> {
        self.check_input(img)?;
        let out = match &self.engine {
            Engine::ToyPool => toypool_features(img),
            #[cfg(feature = "onnx")]
            Engine::Onnx(runner) => runner.run(img)?,
        };
        if out.len() != self.spec.feature_dim {
            return Err(ExtractError::ShapeMismatch(format!(
                "backbone emitted {} features, metadata declares {}",
                out.len(),
                self.spec.feature_dim
            )));
        }
        Ok(out)
    }

    /// One row per image, in input order.
    pub fn extract(&self, ids: &[String], batch: &[ImageTensor]) -> Result<FeatureMatrix, ExtractError> {
        if batch.is_empty() {
            return Err(ExtractError::EmptyBatch);
        }
        if ids.len() != batch.len() {
            return Err(ExtractError::ShapeMismatch(format!("{} ids for {} images", ids.len(), batch.len())));
        }
        let rows = batch
            .par_iter()
            .enumerate()
            .map(|(i, img)| {
                let row = self.extract_one(img)?;
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(ExtractError::NonFinite(i));
                }
                Ok(row)
            })
            .collect::<Result<Vec<_>, _>>()?;
        FeatureMatrix::new(self.spec.feature_dim, rows.concat(), ids.to_vec())
    }
}

fn toypool_features(img: &ImageTensor) -> Vec<f32> {
    let cell = img.height() / TOYPOOL_GRID;
    let mut out = vec![0.0f32; TOYPOOL_GRID * TOYPOOL_GRID * CHANNELS];
    for c in 0..CHANNELS {
        for gy in 0..TOYPOOL_GRID {
            for gx in 0..TOYPOOL_GRID {
                let mut sum = 0.0f64;
                for y in gy * cell..(gy + 1) * cell {
                    for x in gx * cell..(gx + 1) * cell {
                        sum += img.get(y, x, c) as f64;
                    }
                }
                out[c * TOYPOOL_GRID * TOYPOOL_GRID + gy * TOYPOOL_GRID + gx] = (sum / (cell * cell) as f64) as f32;
            }
        }
    }
    out
}

fn metadata_error(path: &Path, message: impl Into<String>) -> ExtractError {
    ExtractError::Metadata { path: path.to_path_buf(), message: message.into() }
}

/// Load a backbone from a reference: the literal `toypool`, or the path of a
/// JSON metadata sidecar describing an ONNX model. The model hash and its
/// input/output shapes are validated before returning.
pub fn load_backbone(reference: impl AsRef<Path>) -> Result<Backbone, ExtractError> {
    let reference = reference.as_ref();
    if reference.as_os_str() == TOYPOOL {
        return Ok(Backbone::toypool());
    }
    let text = fs::read_to_string(reference).map_err(|source| ExtractError::Io { path: reference.to_path_buf(), source })?;
    let meta: BackboneMetadata = serde_json::from_str(&text).map_err(|e| metadata_error(reference, e.to_string()))?;
    if meta.feature_dim == 0 {
        return Err(metadata_error(reference, "feature_dim must be positive"));
    }
    if !matches!(meta.input_side, 224 | 299) {
        return Err(metadata_error(reference, format!("input_side {} not in {{224, 299}}", meta.input_side)));
    }
    if meta.norm_std.iter().any(|s| !(*s > 0.0)) {
        return Err(metadata_error(reference, "norm_std components must be positive"));
    }
    if meta.name == TOYPOOL {
        let builtin = Backbone::toypool();
        if meta.feature_dim != builtin.spec.feature_dim || meta.input_side != builtin.spec.input_side {
            return Err(ExtractError::ShapeMismatch("toypool is fixed at 224 -> 768".into()));
        }
        return Ok(builtin);
    }

    let model_path = match &meta.model_file {
        Some(f) => reference.parent().unwrap_or(Path::new(".")).join(f),
        None => reference.with_extension("onnx"),
    };
    let model_bytes = fs::read(&model_path).map_err(|source| ExtractError::Io { path: model_path.clone(), source })?;
    let actual = sha256_hex(&model_bytes);
    if !actual.eq_ignore_ascii_case(&meta.sha256) {
        return Err(ExtractError::HashMismatch { expected: meta.sha256, actual });
    }
    let spec = BackboneSpec {
        name: meta.name,
        input_side: meta.input_side,
        feature_dim: meta.feature_dim,
        norm_mean: meta.norm_mean,
        norm_std: meta.norm_std,
        model_path: Some(model_path),
        sha256: actual,
    };
    load_onnx(spec, &model_bytes)
}

#[cfg(feature = "onnx")]
fn load_onnx(spec: BackboneSpec, model_bytes: &[u8]) -> Result<Backbone, ExtractError> {
    let runner = onnx::OnnxRunner::load(model_bytes, spec.input_side, spec.feature_dim)?;
    Ok(Backbone { spec, engine: Engine::Onnx(runner) })
}

#[cfg(not(feature = "onnx"))]
fn load_onnx(_spec: BackboneSpec, _model_bytes: &[u8]) -> Result<Backbone, ExtractError> {
    Err(ExtractError::OnnxDisabled)
}

#[cfg(feature = "onnx")]
mod onnx {
    use std::sync::Arc;

    use tract_onnx::prelude::*;
    use tract_onnx::tract_hir::internal::DimLike;

    use super::ExtractError;
    use crate::imageproc::ImageTensor;

    pub(super) struct OnnxRunner {
        plan: Arc<TypedRunnableModel>,
        side: usize,
    }

    fn model_err(e: impl std::fmt::Display) -> ExtractError {
        ExtractError::Model(e.to_string())
    }

    /// The graph's own declaration of its image input must be compatible
    /// with N×3×S×S: rank 4, and every concrete dimension equal to the
    /// expected one (symbolic dimensions are accepted).
    fn check_declared_input(proto: &tract_onnx::pb::ModelProto, side: usize) -> Result<(), ExtractError> {
        use tract_onnx::pb::tensor_shape_proto::dimension::Value;
        use tract_onnx::pb::type_proto;

        let graph = proto.graph.as_ref().ok_or_else(|| model_err("model has no graph"))?;
        let initializers: Vec<&str> = graph.initializer.iter().map(|t| t.name.as_str()).collect();
        let inputs: Vec<_> = graph.input.iter().filter(|i| !initializers.contains(&i.name.as_str())).collect();
        if inputs.len() != 1 {
            return Err(ExtractError::ShapeMismatch(format!("expected one image input, graph has {}", inputs.len())));
        }
        let dims = match inputs[0].r#type.as_ref().and_then(|t| t.value.as_ref()) {
            Some(type_proto::Value::TensorType(t)) => match &t.shape {
                Some(shape) => &shape.dim,
                None => return Ok(()),
            },
            _ => return Ok(()),
        };
        let expected = [None, Some(3), Some(side as i64), Some(side as i64)];
        if dims.len() != 4 {
            return Err(ExtractError::ShapeMismatch(format!("image input has rank {}, expected 4", dims.len())));
        }
        for (axis, (d, want)) in dims.iter().zip(expected).enumerate() {
            if let (Some(Value::DimValue(got)), Some(want)) = (&d.value, want) {
                if *got != want {
                    return Err(ExtractError::ShapeMismatch(format!(
                        "image input axis {axis} is {got}, expected {want} (N×3×{side}×{side})"
                    )));
                }
            }
        }
        Ok(())
    }

    impl OnnxRunner {
        /// Fix the input to 1×3×S×S and check that the output flattens to D.
        pub(super) fn load(bytes: &[u8], side: usize, dim: usize) -> Result<Self, ExtractError> {
            let onnx = tract_onnx::onnx();
            let proto = onnx.proto_model_for_read(&mut std::io::Cursor::new(bytes)).map_err(model_err)?;
            check_declared_input(&proto, side)?;
            let model = onnx
                .model_for_proto_model(&proto)
                .map_err(model_err)?
                .with_input_fact(0, f32::fact([1, 3, side, side]).into())
                .map_err(|e| ExtractError::ShapeMismatch(format!("input does not accept 1x3x{side}x{side}: {e}")))?
                .into_typed()
                .map_err(|e| ExtractError::ShapeMismatch(format!("graph rejects 1x3x{side}x{side} input: {e}")))?;
            if model.outputs.len() != 1 {
                return Err(ExtractError::ShapeMismatch(format!("expected one output, graph has {}", model.outputs.len())));
            }
            let fact = model.output_fact(0).map_err(model_err)?;
            let shape: Vec<usize> = fact
                .shape
                .iter()
                .map(|d| d.to_usize())
                .collect::<Result<_, _>>()
                .map_err(|e| ExtractError::ShapeMismatch(format!("output shape is not concrete: {e}")))?;
            let batch = shape.first().copied().unwrap_or(0);
            let width: usize = shape.iter().skip(1).product();
            if batch != 1 || width != dim {
                return Err(ExtractError::ShapeMismatch(format!(
                    "model emits {shape:?} per image, metadata declares feature_dim {dim}"
                )));
            }
            let plan = model.into_optimized().map_err(model_err)?.into_runnable().map_err(model_err)?;
            Ok(Self { plan, side })
        }

        pub(super) fn run(&self, img: &ImageTensor) -> Result<Vec<f32>, ExtractError> {
            let s = self.side;
            let input = tract_ndarray::Array4::from_shape_fn((1, 3, s, s), |(_, c, y, x)| img.get(y, x, c));
            let out = self.plan.run(tvec!(Tensor::from(input).into())).map_err(model_err)?;
            let view = out[0].to_plain_array_view::<f32>().map_err(model_err)?;
            Ok(view.iter().copied().collect())
        }
    }
}

/// Disk cache of single-row feature matrices.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Hash of everything that determines a feature row.
    pub fn key(spec: &BackboneSpec, image_sha256: &str, augment: Option<&AugmentParams>) -> String {
        let mut h = Sha256::new();
        h.update(spec.sha256.as_bytes());
        h.update(image_sha256.as_bytes());
        h.update((spec.input_side as u64).to_le_bytes());
        for v in spec.norm_mean.iter().chain(&spec.norm_std) {
            h.update(v.to_le_bytes());
        }
        match augment {
            None => h.update(b"plain"),
            Some(p) => {
                h.update([p.flip_x as u8, p.flip_y as u8]);
                for v in [p.rotation_deg, p.shear_x, p.shear_y] {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.feat"))
    }

    pub fn get(&self, key: &str) -> Option<FeatureMatrix> {
        let path = self.path(key);
        match FeatureMatrix::read(&path) {
            Ok(m) => Some(m),
            Err(ExtractError::Io { .. }) => None,
            Err(e) => {
                log::warn!("ignoring unreadable cache entry {}: {e}", path.display());
                None
            }
        }
    }

    pub fn put(&self, key: &str, features: &FeatureMatrix) -> Result<(), ExtractError> {
        features.write(&self.path(key))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toypool_dims() {
        let b = Backbone::toypool();
        assert_eq!(b.spec().feature_dim, 768);
        assert_eq!(b.spec().input_side, 224);
    }

    #[test]
    fn toypool_on_constant_image() {
        let b = Backbone::toypool();
        let img = ImageTensor::filled(224, 224, 0.25);
        let f = b.extract(&["a".into()], &[img]).unwrap();
        assert!(f.row(0).iter().all(|&v| v == 0.25));
    }

    #[test]
    fn toypool_feature_layout() {
        // Bright only in the top-left cell of channel 1.
        let img = ImageTensor::from_fn(224, 224, |y, x, c| if c == 1 && y < 14 && x < 14 { 1.0 } else { 0.0 });
        let f = Backbone::toypool().extract_one(&img).unwrap();
        assert_eq!(f[256], 1.0);
        assert_eq!(f.iter().sum::<f32>(), 1.0);
    }

    #[test]
    fn extract_preserves_order_and_rejects_bad_input() {
        let b = Backbone::toypool();
        let imgs: Vec<_> = (0..8).map(|i| ImageTensor::filled(224, 224, i as f32 / 8.0)).collect();
        let ids: Vec<String> = (0..8).map(|i| format!("s{i}")).collect();
        let f = b.extract(&ids, &imgs).unwrap();
        assert_eq!(f.rows(), 8);
        for i in 0..8 {
            assert_eq!(f.row(i)[0], i as f32 / 8.0);
            assert_eq!(f.sample_ids()[i], ids[i]);
        }
        assert!(matches!(b.extract(&[], &[]), Err(ExtractError::EmptyBatch)));
        let wrong = ImageTensor::filled(100, 100, 0.0);
        assert!(matches!(b.extract(&["x".into()], &[wrong]), Err(ExtractError::ShapeMismatch(_))));
    }

    #[test]
    fn feature_file_round_trip() {
        let m = FeatureMatrix::from_rows(vec!["a".into(), "b".into()], vec![vec![1.0, -2.5, 3.0], vec![0.0, 1e-8, 7.0]]).unwrap();
        let back = FeatureMatrix::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back, m);
        let mut bytes = m.to_bytes();
        bytes.pop();
        assert!(matches!(FeatureMatrix::from_bytes(&bytes), Err(ExtractError::Corrupt(_))));
        assert!(FeatureMatrix::from_bytes(b"nope").is_err());
    }

    #[test]
    fn rejects_non_finite_rows() {
        assert!(matches!(
            FeatureMatrix::from_rows(vec!["a".into()], vec![vec![f32::NAN]]),
            Err(ExtractError::NonFinite(0))
        ));
    }

    #[test]
    fn cache_round_trip_and_key_sensitivity() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FeatureCache::new(dir.path());
        let spec = Backbone::toypool().spec().clone();
        let k1 = FeatureCache::key(&spec, "abc", None);
        let p = AugmentParams { flip_x: true, ..AugmentParams::IDENTITY };
        let k2 = FeatureCache::key(&spec, "abc", Some(&p));
        assert_ne!(k1, k2);
        assert_ne!(k1, FeatureCache::key(&spec, "abd", None));
        assert!(cache.get(&k1).is_none());
        let m = FeatureMatrix::from_rows(vec!["a".into()], vec![vec![0.5; 4]]).unwrap();
        cache.put(&k1, &m).unwrap();
        assert_eq!(cache.get(&k1), Some(m));
    }

    #[test]
    fn metadata_validation() {
        let dir = tempfile::tempdir().unwrap();
        let meta = |dim: usize, side: usize| BackboneMetadata {
            name: "resnet18".into(),
            input_side: side,
            feature_dim: dim,
            norm_mean: [0.485, 0.456, 0.406],
            norm_std: [0.229, 0.224, 0.225],
            sha256: "00".into(),
            model_file: None,
            weights_source: None,
        };
        let p = dir.path().join("m.json");
        fs::write(&p, serde_json::to_string(&meta(0, 224)).unwrap()).unwrap();
        assert!(matches!(load_backbone(&p), Err(ExtractError::Metadata { .. })));
        fs::write(&p, serde_json::to_string(&meta(512, 256)).unwrap()).unwrap();
        assert!(matches!(load_backbone(&p), Err(ExtractError::Metadata { .. })));
        fs::write(&p, serde_json::to_string(&meta(512, 224)).unwrap()).unwrap();
        assert!(matches!(load_backbone(&p), Err(ExtractError::Io { .. })));
        fs::write(dir.path().join("m.onnx"), b"bytes").unwrap();
        assert!(matches!(load_backbone(&p), Err(ExtractError::HashMismatch { .. })));
        assert!(matches!(load_backbone(dir.path().join("absent.json")), Err(ExtractError::Io { .. })));
    }

    #[test]
    fn builtin_reference_loads() {
        assert_eq!(load_backbone(TOYPOOL).unwrap().spec().feature_dim, 768);
    }
}
