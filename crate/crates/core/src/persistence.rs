//! Two-file checkpoints: `manifest.json` plus a raw `weights.bin`.
//!
//! The blob holds little-endian, row-major tensors in manifest order, each
//! starting on a 64-byte boundary (zero padding in between). The manifest is
//! validated completely before the blob is read.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::{init_layer_with_base, AdapterLayer, LayerConfig, Method};
use crate::error::{Error, Result};
use crate::linalg::{DType, Matrix, Real};
use crate::synthtrain::{assign_cluster, Sequence, SyntheticTask, TaskSpec};

pub const FORMAT_VERSION: u32 = 1;
pub const ALIGNMENT: u64 = 64;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "weights.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactKind {
    Layer,
    Task,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: DType,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: ArtifactKind,
    pub dtype: DType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<LayerConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskSpec>,
    pub tensors: Vec<TensorEntry>,
}

fn align(offset: u64) -> u64 {
    offset.div_ceil(ALIGNMENT) * ALIGNMENT
}

impl Manifest {
    /// Total blob length implied by the entries.
    pub fn blob_len(&self) -> u64 {
        self.tensors.last().map_or(0, |t| t.byte_offset + t.byte_length)
    }

    /// Structural checks that need nothing but the manifest itself.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Version { found: self.format_version, expected: FORMAT_VERSION });
        }
        let mut end = 0u64;
        for t in &self.tensors {
            let bad = |msg: String| Err(Error::Integrity(format!("tensor {}: {msg}", t.name)));
            if t.dtype != self.dtype {
                return bad(format!("dtype {} differs from checkpoint dtype {}", t.dtype, self.dtype));
            }
            let expected = (t.shape[0] * t.shape[1] * t.dtype.size()) as u64;
            if t.byte_length != expected {
                return bad(format!("byte_length {} but shape {:?} needs {expected}", t.byte_length, t.shape));
            }
            if t.byte_offset < end || t.byte_offset % ALIGNMENT != 0 {
                return bad(format!("offset {} overlaps or is not {ALIGNMENT}-byte aligned", t.byte_offset));
            }
            end = t.byte_offset + t.byte_length;
        }
        match self.kind {
            ArtifactKind::Layer => {
                let config = self.config.as_ref().ok_or_else(|| Error::Integrity("layer manifest has no config".into()))?;
                config.validate()?;
                if self.method != Some(config.method) {
                    return Err(Error::Integrity("method tag disagrees with config".into()));
                }
                check_names_and_shapes(&self.tensors, &layer_layout(config))
            }
            ArtifactKind::Task => {
                let spec = self.task.as_ref().ok_or_else(|| Error::Integrity("task manifest has no spec".into()))?;
                spec.validate()?;
                check_names_and_shapes(&self.tensors, &task_layout(spec))
            }
        }
    }
}

fn check_names_and_shapes(entries: &[TensorEntry], expected: &[(String, [usize; 2])]) -> Result<()> {
    if entries.len() != expected.len() {
        return Err(Error::Integrity(format!("{} tensors listed, {} expected", entries.len(), expected.len())));
    }
    for (e, (name, shape)) in entries.iter().zip(expected) {
        if &e.name != name || &e.shape != shape {
            return Err(Error::Integrity(format!(
                "found tensor {} {:?}, expected {name} {shape:?}",
                e.name, e.shape
            )));
        }
    }
    Ok(())
}

/// Tensor names and shapes of a layer checkpoint, in blob order.
fn layer_layout(c: &LayerConfig) -> Vec<(String, [usize; 2])> {
    let LayerConfig { m, n, r, num_experts, .. } = *c;
    let mut out = vec![("w".to_string(), [m, n])];
    match c.method {
        Method::Lora => {
            out.push(("b".into(), [m, r]));
            out.push(("a".into(), [r, n]));
        }
        Method::MoeSoft | Method::MoeSparse | Method::Smear => {
            out.push(("router.w_g".into(), [num_experts, n]));
            for i in 0..num_experts {
                out.push((format!("experts.{i}.b"), [m, r]));
                out.push((format!("experts.{i}.a"), [r, n]));
            }
        }
        Method::Comol | Method::ComolNoCr => {
            out.push(("u_b".into(), [m, r]));
            out.push(("v_a_t".into(), [r, n]));
            for i in 0..num_experts {
                out.push((format!("cores.{i}"), [r, r]));
            }
            out.push(("router.w_g".into(), [num_experts, c.router_input_dim()]));
        }
    }
    out
}

fn task_layout(s: &TaskSpec) -> Vec<(String, [usize; 2])> {
    let mut out = vec![("w_frozen".to_string(), [s.m, s.n]), ("cluster_directions".to_string(), [s.clusters, s.n])];
    for c in 0..s.clusters {
        out.push((format!("cluster_deltas.{c}"), [s.m, s.n]));
    }
    for i in 0..s.num_sequences {
        out.push((format!("sequences.{i}.tokens"), [s.seq_len, s.n]));
        out.push((format!("sequences.{i}.targets"), [s.seq_len, s.m]));
    }
    out
}

fn encode<T: Real>(tensors: &[(String, &Matrix<T>)]) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, m) in tensors {
        let offset = align(blob.len() as u64);
        blob.resize(offset as usize, 0);
        for &v in m.data() {
            v.write_le(&mut blob);
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: [m.rows(), m.cols()],
            dtype: T::DTYPE,
            byte_offset: offset,
            byte_length: blob.len() as u64 - offset,
        });
    }
    (entries, blob)
}

fn decode<T: Real>(entry: &TensorEntry, blob: &[u8]) -> Result<Matrix<T>> {
    let start = entry.byte_offset as usize;
    let bytes = &blob[start..start + entry.byte_length as usize];
    let data = bytes.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
    Matrix::new(entry.shape[0], entry.shape[1], data)
}

fn write_files(dir: &Path, manifest: &Manifest, blob: &[u8]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let text = serde_json::to_string_pretty(manifest).expect("serializable") + "\n";
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    let bpath = dir.join(BLOB_FILE);
    fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))
}

/// Reads and validates `manifest.json` only.
pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    // Look at the version before the strict schema so newer formats report as such.
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    if let Some(v) = raw.get("format_version").and_then(|v| v.as_u64()) {
        if v != u64::from(FORMAT_VERSION) {
            return Err(Error::Version { found: v.try_into().unwrap_or(u32::MAX), expected: FORMAT_VERSION });
        }
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    manifest.validate()?;
    Ok(manifest)
}

fn read_blob(dir: &Path, manifest: &Manifest) -> Result<Vec<u8>> {
    let path = dir.join(BLOB_FILE);
    let len = fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
    if len != manifest.blob_len() {
        return Err(Error::Integrity(format!("{BLOB_FILE} is {len} bytes, manifest implies {}", manifest.blob_len())));
    }
    fs::read(&path).map_err(|e| Error::io(&path, e))
}

pub fn save_checkpoint<T: Real>(layer: &AdapterLayer<T>, dir: &Path) -> Result<()> {
    layer.validate()?;
    let mut tensors = vec![("w".to_string(), &layer.w)];
    tensors.extend(layer.trainable());
    let (entries, blob) = encode(&tensors);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: ArtifactKind::Layer,
        dtype: T::DTYPE,
        method: Some(layer.config.method),
        config: Some(layer.config.clone()),
        task: None,
        tensors: entries,
    };
    write_files(dir, &manifest, &blob)
}

/// A layer loaded at the precision it was saved in.
#[derive(Clone, Debug, PartialEq)]
pub enum LoadedLayer {
    F32(AdapterLayer<f32>),
    F64(AdapterLayer<f64>),
}

impl LoadedLayer {
    pub fn config(&self) -> &LayerConfig {
        match self {
            LoadedLayer::F32(l) => &l.config,
            LoadedLayer::F64(l) => &l.config,
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            LoadedLayer::F32(_) => DType::F32,
            LoadedLayer::F64(_) => DType::F64,
        }
    }

    /// The layer at 64-bit precision (exact widening for f32).
    pub fn into_f64(self) -> AdapterLayer {
        match self {
            LoadedLayer::F64(l) => l,
            LoadedLayer::F32(l) => cast_layer(&l),
        }
    }

    /// `(name, shape, Frobenius norm)` for `w` and every trainable tensor.
    pub fn tensor_norms(&self) -> Vec<(String, [usize; 2], f64)> {
        fn norms<T: Real>(l: &AdapterLayer<T>) -> Vec<(String, [usize; 2], f64)> {
            std::iter::once(("w".to_string(), &l.w))
                .chain(l.trainable())
                .map(|(n, m)| (n, [m.rows(), m.cols()], m.frobenius_norm().as_f64()))
                .collect()
        }
        match self {
            LoadedLayer::F32(l) => norms(l),
            LoadedLayer::F64(l) => norms(l),
        }
    }
}

/// Same layer at another precision.
pub fn cast_layer<T: Real, U: Real>(layer: &AdapterLayer<T>) -> AdapterLayer<U> {
    let mut out: AdapterLayer<U> =
        init_layer_with_base(&layer.config, layer.w.cast(), 0).expect("source layer is valid");
    for (dst, (_, src)) in out.trainable_mut().into_iter().zip(layer.trainable()) {
        *dst = src.cast();
    }
    out
}

fn build_layer<T: Real>(config: &LayerConfig, mut tensors: Vec<Matrix<T>>) -> Result<AdapterLayer<T>> {
    let w = tensors.remove(0);
    let mut layer = init_layer_with_base(config, w, 0)?;
    for (dst, src) in layer.trainable_mut().into_iter().zip(tensors) {
        *dst = src;
    }
    layer.validate()?;
    Ok(layer)
}

pub fn load_checkpoint(dir: &Path) -> Result<LoadedLayer> {
    let manifest = read_manifest(dir)?;
    if manifest.kind != ArtifactKind::Layer {
        return Err(Error::Integrity("checkpoint holds a task, not a layer".into()));
    }
    let blob = read_blob(dir, &manifest)?;
    let config = manifest.config.as_ref().expect("validated");
    Ok(match manifest.dtype {
        DType::F32 => LoadedLayer::F32(build_layer(
            config,
            manifest.tensors.iter().map(|e| decode(e, &blob)).collect::<Result<_>>()?,
        )?),
        DType::F64 => LoadedLayer::F64(build_layer(
            config,
            manifest.tensors.iter().map(|e| decode(e, &blob)).collect::<Result<_>>()?,
        )?),
    })
}

/// Stores a task bit-exactly at 64-bit precision.
pub fn save_task(task: &SyntheticTask, dir: &Path) -> Result<()> {
    let directions = Matrix::from_rows(&task.cluster_directions)?;
    let mut tensors = vec![("w_frozen".to_string(), &task.w_frozen), ("cluster_directions".to_string(), &directions)];
    for (c, d) in task.cluster_deltas.iter().enumerate() {
        tensors.push((format!("cluster_deltas.{c}"), d));
    }
    for (i, s) in task.sequences.iter().enumerate() {
        tensors.push((format!("sequences.{i}.tokens"), &s.tokens));
        tensors.push((format!("sequences.{i}.targets"), &s.targets));
    }
    let (entries, blob) = encode(&tensors);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: ArtifactKind::Task,
        dtype: DType::F64,
        method: None,
        config: None,
        task: Some(task.spec.clone()),
        tensors: entries,
    };
    write_files(dir, &manifest, &blob)
}

pub fn load_task(dir: &Path) -> Result<SyntheticTask> {
    let manifest = read_manifest(dir)?;
    if manifest.kind != ArtifactKind::Task || manifest.dtype != DType::F64 {
        return Err(Error::Integrity("checkpoint does not hold a 64-bit task".into()));
    }
    let blob = read_blob(dir, &manifest)?;
    let spec = manifest.task.clone().expect("validated");
    let mut it = manifest.tensors.iter().map(|e| decode::<f64>(e, &blob));
    let mut next = || it.next().expect("layout validated");
    let w_frozen = next()?;
    let dirs = next()?;
    let cluster_directions: Vec<Vec<f64>> = (0..dirs.rows()).map(|i| dirs.row(i).to_vec()).collect();
    let cluster_deltas = (0..spec.clusters).map(|_| next()).collect::<Result<Vec<_>>>()?;
    let mut sequences = Vec::with_capacity(spec.num_sequences);
    let mut mixed = 0;
    for _ in 0..spec.num_sequences {
        let tokens = next()?;
        let targets = next()?;
        let clusters: Vec<usize> = (0..tokens.rows()).map(|t| assign_cluster(&cluster_directions, tokens.row(t))).collect();
        if clusters.iter().any(|&c| c != clusters[0]) {
            mixed += 1;
        }
        sequences.push(Sequence { tokens, targets, clusters });
    }
    Ok(SyntheticTask {
        mix_rate: mixed as f64 / spec.num_sequences as f64,
        spec,
        w_frozen,
        cluster_deltas,
        cluster_directions,
        sequences,
    })
}

/// The two file paths of a checkpoint directory.
pub fn checkpoint_files(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join(MANIFEST_FILE), dir.join(BLOB_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::init_layer;
    use crate::rng::SeededRng;
    use crate::synthtrain::make_task;

    fn layer<T: Real>(method: Method) -> AdapterLayer<T> {
        let mut l = init_layer(&LayerConfig::new(method, 5, 7, 3, 3), 4).unwrap();
        l.randomize(9, 0.7);
        l
    }

    #[test]
    fn roundtrip_every_method_and_dtype() {
        let dir = tempfile::tempdir().unwrap();
        for method in Method::ALL {
            let l64: AdapterLayer = layer(method);
            save_checkpoint(&l64, dir.path()).unwrap();
            let first = fs::read(dir.path().join(BLOB_FILE)).unwrap();
            let first_manifest = fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
            let back = load_checkpoint(dir.path()).unwrap();
            assert_eq!(back, LoadedLayer::F64(l64.clone()));
            save_checkpoint(&l64, dir.path()).unwrap();
            assert_eq!(fs::read(dir.path().join(BLOB_FILE)).unwrap(), first);
            assert_eq!(fs::read(dir.path().join(MANIFEST_FILE)).unwrap(), first_manifest);

            let tokens = SeededRng::new(1).uniform_matrix(4, 7, 1.0);
            let loaded = back.into_f64();
            let (a, b) = (l64.apply(&tokens).unwrap(), loaded.apply(&tokens).unwrap());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));

            let l32: AdapterLayer<f32> = layer(method);
            save_checkpoint(&l32, dir.path()).unwrap();
            assert_eq!(load_checkpoint(dir.path()).unwrap(), LoadedLayer::F32(l32));
        }
    }

    #[test]
    fn layout_is_aligned_little_endian() {
        let dir = tempfile::tempdir().unwrap();
        let l: AdapterLayer<f32> = layer(Method::Comol);
        save_checkpoint(&l, dir.path()).unwrap();
        let m = read_manifest(dir.path()).unwrap();
        assert!(m.tensors.iter().all(|t| t.byte_offset % 64 == 0));
        let blob = fs::read(dir.path().join(BLOB_FILE)).unwrap();
        assert_eq!(blob.len() as u64, m.blob_len());
        let first = f32::from_le_bytes(blob[0..4].try_into().unwrap());
        assert_eq!(first, l.w.get(0, 0));
        let v = &m.tensors[1];
        let at = v.byte_offset as usize;
        assert_eq!(f32::from_le_bytes(blob[at..at + 4].try_into().unwrap()), l.trainable()[0].1.get(0, 0));
    }

    fn tamper(dir: &Path, f: impl FnOnce(&mut serde_json::Value)) {
        let p = dir.join(MANIFEST_FILE);
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        f(&mut v);
        fs::write(&p, serde_json::to_string(&v).unwrap()).unwrap();
    }

    #[test]
    fn tampering_is_rejected() {
        let l: AdapterLayer = layer(Method::MoeSparse);
        let fresh = || {
            let d = tempfile::tempdir().unwrap();
            save_checkpoint(&l, d.path()).unwrap();
            d
        };
        let d = fresh();
        tamper(d.path(), |v| v["tensors"][1]["shape"] = serde_json::json!([3, 8]));
        assert!(matches!(load_checkpoint(d.path()), Err(Error::Integrity(_))));

        let d = fresh();
        tamper(d.path(), |v| v["tensors"][2]["byte_length"] = serde_json::json!(8));
        assert!(matches!(load_checkpoint(d.path()), Err(Error::Integrity(_))));

        let d = fresh();
        tamper(d.path(), |v| v["tensors"][2]["byte_offset"] = serde_json::json!(0));
        assert!(matches!(load_checkpoint(d.path()), Err(Error::Integrity(_))));

        let d = fresh();
        tamper(d.path(), |v| v["format_version"] = serde_json::json!(2));
        assert!(matches!(load_checkpoint(d.path()), Err(Error::Version { found: 2, expected: 1 })));

        let d = fresh();
        tamper(d.path(), |v| v["unexpected"] = serde_json::json!(1));
        assert!(matches!(load_checkpoint(d.path()), Err(Error::Json { .. })));

        let d = fresh();
        let b = d.path().join(BLOB_FILE);
        let mut bytes = fs::read(&b).unwrap();
        bytes.pop();
        fs::write(&b, bytes).unwrap();
        assert!(matches!(load_checkpoint(d.path()), Err(Error::Integrity(_))));

        let missing = tempfile::tempdir().unwrap();
        assert!(matches!(load_checkpoint(missing.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn task_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let task = make_task(&TaskSpec::new(3, 4, 6, 2, 1, 3, 5, 0.5)).unwrap();
        save_task(&task, dir.path()).unwrap();
        assert_eq!(load_task(dir.path()).unwrap(), task);
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
