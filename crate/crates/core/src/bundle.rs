//! Network bundle container.
//!
//! A bundle is a zip archive with stored (uncompressed) entries: `manifest.json`
//! first, then one `tensors/<name>` entry per tensor, sorted by name. Each tensor
//! entry uses the binary layout below (all integers little-endian):
//!
//! ```text
//! "PNT1" | dtype u8 (0=f32, 1=f64, 2=i64) | ndim u8 | 6 zero bytes | ndim × u64 dims | payload
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, DateTime, ZipArchive, ZipWriter};

pub const MAGIC: &[u8; 4] = b"PNT1";
pub const FORMAT_VERSION: u32 = 1;
const MANIFEST_ENTRY: &str = "manifest.json";
const TENSOR_DIR: &str = "tensors/";

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("bad magic {0:02x?}, expected \"PNT1\"")]
    BadMagic([u8; 4]),
    #[error("truncated tensor: {0}")]
    Truncated(String),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("tensor {name:?}: payload of {len} bytes does not match shape {shape:?} ({dtype:?})")]
    PayloadMismatch {
        name: String,
        dtype: DType,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("tensor {name:?} has dtype {found:?}, expected {expected:?}")]
    WrongDtype {
        name: String,
        found: DType,
        expected: &'static str,
    },
    #[error("missing tensor {reference:?} (referenced by {owner})")]
    MissingTensor { reference: String, owner: String },
    #[error("shape chain violation at layer {layer:?}: {detail}")]
    ShapeChain { layer: String, detail: String },
    #[error("unsupported bundle format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("archive: {0}")]
    Archive(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<zip::result::ZipError> for BundleError {
    fn from(e: zip::result::ZipError) -> Self {
        match e {
            zip::result::ZipError::Io(io) => BundleError::Io(io),
            other => BundleError::Archive(other.to_string()),
        }
    }
}

type BResult<T> = std::result::Result<T, BundleError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    I64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::I64 => 2,
        }
    }

    pub fn from_code(code: u8) -> BResult<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            2 => Ok(DType::I64),
            c => Err(BundleError::UnknownDtype(c)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::I64 => 8,
        }
    }
}

/// One named tensor: dtype, shape and raw little-endian payload.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: DType,
    /// Empty for a scalar.
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

impl TensorRecord {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn validate(&self) -> BResult<()> {
        let bad_dim = self.shape.contains(&0);
        if bad_dim || self.payload.len() != self.dtype.size() * self.numel() {
            return Err(BundleError::PayloadMismatch {
                name: self.name.clone(),
                dtype: self.dtype,
                shape: self.shape.clone(),
                len: self.payload.len(),
            });
        }
        Ok(())
    }

    pub fn from_f32(name: impl Into<String>, shape: Vec<usize>, values: &[f32]) -> Self {
        Self {
            name: name.into(),
            dtype: DType::F32,
            shape,
            payload: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn from_f64(name: impl Into<String>, shape: Vec<usize>, values: &[f64]) -> Self {
        Self {
            name: name.into(),
            dtype: DType::F64,
            shape,
            payload: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn from_i64(name: impl Into<String>, shape: Vec<usize>, values: &[i64]) -> Self {
        Self {
            name: name.into(),
            dtype: DType::I64,
            shape,
            payload: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    /// Float payload as `f64`, promoting `f32`.
    pub fn to_f64(&self) -> BResult<Vec<f64>> {
        match self.dtype {
            DType::F32 => Ok(self
                .payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect()),
            DType::F64 => Ok(self
                .payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect()),
            DType::I64 => Err(BundleError::WrongDtype {
                name: self.name.clone(),
                found: self.dtype,
                expected: "f32 or f64",
            }),
        }
    }

    pub fn to_i64(&self) -> BResult<Vec<i64>> {
        match self.dtype {
            DType::I64 => Ok(self
                .payload
                .chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect()),
            found => Err(BundleError::WrongDtype {
                name: self.name.clone(),
                found,
                expected: "i64",
            }),
        }
    }
}

pub fn write_tensor<W: Write>(rec: &TensorRecord, mut sink: W) -> BResult<()> {
    rec.validate()?;
    if rec.shape.len() > u8::MAX as usize {
        return Err(BundleError::Manifest(format!(
            "tensor {:?} has too many dimensions",
            rec.name
        )));
    }
    let mut header = [0u8; 12];
    header[..4].copy_from_slice(MAGIC);
    header[4] = rec.dtype.code();
    header[5] = rec.shape.len() as u8;
    sink.write_all(&header)?;
    for &d in &rec.shape {
        sink.write_all(&(d as u64).to_le_bytes())?;
    }
    sink.write_all(&rec.payload)?;
    Ok(())
}

fn read_exact_or_truncated<R: Read>(src: &mut R, buf: &mut [u8], what: &str) -> BResult<()> {
    src.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            BundleError::Truncated(what.to_string())
        } else {
            BundleError::Io(e)
        }
    })
}

/// Reads one tensor. The returned record has an empty name; callers attach it.
pub fn read_tensor<R: Read>(mut source: R) -> BResult<TensorRecord> {
    let mut header = [0u8; 12];
    read_exact_or_truncated(&mut source, &mut header, "header")?;
    let magic: [u8; 4] = header[..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(BundleError::BadMagic(magic));
    }
    let dtype = DType::from_code(header[4])?;
    let ndim = header[5] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut d = [0u8; 8];
        read_exact_or_truncated(&mut source, &mut d, "dims")?;
        shape.push(u64::from_le_bytes(d) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut payload = vec![0u8; numel * dtype.size()];
    read_exact_or_truncated(&mut source, &mut payload, "payload")?;
    let rec = TensorRecord {
        name: String::new(),
        dtype,
        shape,
        payload,
    };
    rec.validate()?;
    Ok(rec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Dense,
    Conv2d,
    /// Fixed 2×2, stride-2 max pooling. Never prunable, no weights.
    Maxpool2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Relu,
    #[default]
    None,
}

fn default_stride() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDescriptor {
    pub name: String,
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<String>,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    #[serde(default)]
    pub prunable: bool,
    /// Optional boolean mask over output units, stored as an i64 0/1 tensor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kept_mask: Option<String>,
    /// Captured post-nonlinearity output (`A^ℓ`, or the raw feature map for conv).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<String>,
    /// Captured patch matrix in the successor's kernel geometry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patches: Option<String>,
}

impl LayerDescriptor {
    fn refs(&self) -> impl Iterator<Item = &String> {
        [
            &self.weight,
            &self.bias,
            &self.kept_mask,
            &self.activation,
            &self.patches,
        ]
        .into_iter()
        .flatten()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataRefs {
    /// `[N, features]` or `[N, C, H, W]`.
    pub inputs: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
    /// Indices into `inputs` held out for verification; the rest form the pruning pool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verification: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub model: Vec<LayerDescriptor>,
    pub data: DataRefs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub manifest: BundleManifest,
    pub tensors: BTreeMap<String, TensorRecord>,
}

impl Bundle {
    pub fn tensor(&self, name: &str) -> BResult<&TensorRecord> {
        self.tensors.get(name).ok_or_else(|| BundleError::MissingTensor {
            reference: name.to_string(),
            owner: "caller".into(),
        })
    }

    /// Checks that refs resolve and layer shapes chain from the input tensor.
    pub fn validate(&self) -> BResult<()> {
        let m = &self.manifest;
        if m.format_version != FORMAT_VERSION {
            return Err(BundleError::VersionMismatch {
                found: m.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let resolve = |reference: &String, owner: &str| -> BResult<&TensorRecord> {
            self.tensors.get(reference).ok_or_else(|| BundleError::MissingTensor {
                reference: reference.clone(),
                owner: owner.to_string(),
            })
        };
        for layer in &m.model {
            for r in layer.refs() {
                resolve(r, &format!("layer {:?}", layer.name))?;
            }
        }
        let inputs = resolve(&m.data.inputs, "data.inputs")?;
        if let Some(l) = &m.data.labels {
            let labels = resolve(l, "data.labels")?;
            if labels.shape.first() != inputs.shape.first() {
                return Err(BundleError::Manifest(format!(
                    "labels shape {:?} does not match inputs {:?}",
                    labels.shape, inputs.shape
                )));
            }
        }
        if let Some(v) = &m.data.verification {
            resolve(v, "data.verification")?;
        }
        for t in self.tensors.values() {
            t.validate()?;
        }

        let mut feat = match inputs.shape.as_slice() {
            [_, d] => Feature::Flat(*d),
            [_, c, h, w] => Feature::Spatial(*c, *h, *w),
            other => {
                return Err(BundleError::Manifest(format!(
                    "inputs must be rank 2 or 4, got shape {other:?}"
                )))
            }
        };
        for layer in &m.model {
            let chain = |detail: String| BundleError::ShapeChain {
                layer: layer.name.clone(),
                detail,
            };
            let weight_shape = |what: &str| -> BResult<&[usize]> {
                let w = layer
                    .weight
                    .as_ref()
                    .ok_or_else(|| chain(format!("{what} layer has no weight ref")))?;
                Ok(&self.tensors[w].shape)
            };
            let out_units;
            match layer.kind {
                LayerKind::Dense => {
                    let ws = weight_shape("dense")?;
                    let [n_in, n_out] = ws else {
                        return Err(chain(format!("dense weight must be [n_in, n_out], got {ws:?}")));
                    };
                    if *n_in != feat.flat_len() {
                        return Err(chain(format!(
                            "dense weight expects {n_in} inputs, previous layer provides {}",
                            feat.flat_len()
                        )));
                    }
                    out_units = *n_out;
                    feat = Feature::Flat(*n_out);
                }
                LayerKind::Conv2d => {
                    let ws = weight_shape("conv2d")?;
                    let [oc, ic, kh, kw] = ws else {
                        return Err(chain(format!(
                            "conv weight must be [out_c, in_c, k_h, k_w], got {ws:?}"
                        )));
                    };
                    let Feature::Spatial(c, h, w) = feat else {
                        return Err(chain("conv2d after a flat feature map".into()));
                    };
                    if c != *ic {
                        return Err(chain(format!("conv expects {ic} input channels, got {c}")));
                    }
                    let oh = conv_out(h, *kh, layer.stride, layer.padding).map_err(&chain)?;
                    let ow = conv_out(w, *kw, layer.stride, layer.padding).map_err(&chain)?;
                    out_units = *oc;
                    feat = Feature::Spatial(*oc, oh, ow);
                }
                LayerKind::Maxpool2 => {
                    let Feature::Spatial(c, h, w) = feat else {
                        return Err(chain("maxpool2 after a flat feature map".into()));
                    };
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(chain(format!("maxpool2 needs even spatial dims, got {h}x{w}")));
                    }
                    if layer.prunable {
                        return Err(chain("maxpool2 cannot be prunable".into()));
                    }
                    out_units = c;
                    feat = Feature::Spatial(c, h / 2, w / 2);
                }
            }
            if let Some(b) = &layer.bias {
                if self.tensors[b].shape != [out_units] {
                    return Err(chain(format!(
                        "bias shape {:?}, expected [{out_units}]",
                        self.tensors[b].shape
                    )));
                }
            }
            if let Some(mk) = &layer.kept_mask {
                if self.tensors[mk].shape != [out_units] {
                    return Err(chain(format!(
                        "kept_mask shape {:?}, expected [{out_units}]",
                        self.tensors[mk].shape
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Feature {
    Flat(usize),
    Spatial(usize, usize, usize),
}

impl Feature {
    fn flat_len(self) -> usize {
        match self {
            Feature::Flat(d) => d,
            Feature::Spatial(c, h, w) => c * h * w,
        }
    }
}

/// Output length of a convolution along one axis; errors when not integral.
pub fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize, String> {
    let span = size + 2 * pad;
    if stride == 0 || k == 0 || span < k || !(span - k).is_multiple_of(stride) {
        return Err(format!(
            "size {size}, kernel {k}, stride {stride}, padding {pad} gives a non-integral output"
        ));
    }
    Ok((span - k) / stride + 1)
}

fn zip_options() -> SimpleFileOptions {
    SimpleFileOptions::default()
        .compression_method(CompressionMethod::Stored)
        .last_modified_time(DateTime::default())
        .unix_permissions(0o644)
}

/// Writes a bundle archive. Entry order and timestamps are fixed, so identical
/// input gives identical bytes.
pub fn save_bundle(bundle: &Bundle, path: impl AsRef<Path>) -> BResult<()> {
    let file = BufWriter::new(File::create(path)?);
    write_bundle(bundle, file)?;
    Ok(())
}

pub fn write_bundle<W: Write + Seek>(bundle: &Bundle, sink: W) -> BResult<()> {
    let mut zip = ZipWriter::new(sink);
    let manifest = serde_json::to_vec_pretty(&bundle.manifest).map_err(|e| BundleError::Manifest(e.to_string()))?;
    zip.start_file(MANIFEST_ENTRY, zip_options())?;
    zip.write_all(&manifest)?;
    // BTreeMap iteration is sorted by name.
    for (name, rec) in &bundle.tensors {
        if name != &rec.name {
            return Err(BundleError::Manifest(format!(
                "tensor table key {name:?} does not match record name {:?}",
                rec.name
            )));
        }
        zip.start_file(format!("{TENSOR_DIR}{name}"), zip_options())?;
        write_tensor(rec, &mut zip)?;
    }
    zip.finish()?;
    Ok(())
}

pub fn load_bundle(path: impl AsRef<Path>) -> BResult<Bundle> {
    let file = BufReader::new(File::open(path)?);
    read_bundle(file)
}

pub fn read_bundle<R: Read + Seek>(source: R) -> BResult<Bundle> {
    let mut zip = ZipArchive::new(source)?;
    let manifest: BundleManifest = {
        let entry = zip
            .by_name(MANIFEST_ENTRY)
            .map_err(|_| BundleError::Manifest("archive has no manifest.json".into()))?;
        serde_json::from_reader(entry).map_err(|e| BundleError::Manifest(e.to_string()))?
    };
    if manifest.format_version != FORMAT_VERSION {
        return Err(BundleError::VersionMismatch {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let mut tensors = BTreeMap::new();
    for i in 0..zip.len() {
        let entry = zip.by_index(i)?;
        let Some(name) = entry.name().strip_prefix(TENSOR_DIR).map(str::to_string) else {
            continue;
        };
        if name.is_empty() {
            continue;
        }
        let mut rec = read_tensor(entry)?;
        rec.name = name.clone();
        tensors.insert(name, rec);
    }
    let bundle = Bundle { manifest, tensors };
    bundle.validate()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor;

    fn roundtrip(rec: &TensorRecord) -> TensorRecord {
        let mut buf = Vec::new();
        write_tensor(rec, &mut buf).unwrap();
        let mut back = read_tensor(Cursor::new(buf)).unwrap();
        back.name = rec.name.clone();
        back
    }

    #[test]
    fn scalar_f64_layout() {
        let rec = TensorRecord::from_f64("s", vec![], &[3.0]);
        let mut buf = Vec::new();
        write_tensor(&rec, &mut buf).unwrap();
        assert_eq!(buf.len(), 12 + 8);
        assert_eq!(&buf[..4], b"PNT1");
        assert_eq!(buf[4], 1);
        assert_eq!(buf[5], 0);
        assert_eq!(&buf[6..12], &[0; 6]);
        assert_eq!(&buf[12..], &3.0f64.to_le_bytes());
        assert_eq!(roundtrip(&rec), rec);
    }

    #[test]
    fn matrix_f32_layout() {
        let rec = TensorRecord::from_f32("m", vec![2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let mut buf = Vec::new();
        write_tensor(&rec, &mut buf).unwrap();
        assert_eq!(buf.len(), 12 + 16 + 16);
        assert_eq!(buf[4], 0);
        assert_eq!(buf[5], 2);
        assert_eq!(&buf[12..20], &2u64.to_le_bytes());
        assert_eq!(&buf[28..32], &1.0f32.to_le_bytes());
    }

    #[test]
    fn read_errors_are_distinct() {
        let rec = TensorRecord::from_f32("m", vec![2], &[1.0, 2.0]);
        let mut buf = Vec::new();
        write_tensor(&rec, &mut buf).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_tensor(Cursor::new(bad)), Err(BundleError::BadMagic(_))));

        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(
            read_tensor(Cursor::new(bad)),
            Err(BundleError::UnknownDtype(9))
        ));

        let short = buf[..buf.len() - 1].to_vec();
        assert!(matches!(
            read_tensor(Cursor::new(short)),
            Err(BundleError::Truncated(_))
        ));
    }

    #[test]
    fn write_rejects_payload_mismatch() {
        let mut rec = TensorRecord::from_f32("m", vec![3], &[1.0, 2.0, 3.0]);
        rec.payload.pop();
        assert!(matches!(
            write_tensor(&rec, Vec::new()),
            Err(BundleError::PayloadMismatch { .. })
        ));
    }

    fn minimal_bundle() -> Bundle {
        let mut tensors = BTreeMap::new();
        for rec in [
            TensorRecord::from_f32("fc.weight", vec![3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]),
            TensorRecord::from_f32("fc.bias", vec![2], &[0.0, 0.5]),
            TensorRecord::from_f32("x", vec![4, 3], &[0.0; 12]),
            TensorRecord::from_i64("y", vec![4], &[0, 1, 0, 1]),
        ] {
            tensors.insert(rec.name.clone(), rec);
        }
        Bundle {
            manifest: BundleManifest {
                format_version: FORMAT_VERSION,
                model: vec![LayerDescriptor {
                    name: "fc".into(),
                    kind: LayerKind::Dense,
                    weight: Some("fc.weight".into()),
                    bias: Some("fc.bias".into()),
                    nonlinearity: Nonlinearity::None,
                    stride: 1,
                    padding: 0,
                    prunable: false,
                    kept_mask: None,
                    activation: None,
                    patches: None,
                }],
                data: DataRefs {
                    inputs: "x".into(),
                    labels: Some("y".into()),
                    verification: None,
                },
            },
            tensors,
        }
    }

    #[test]
    fn minimal_bundle_roundtrip() {
        let b = minimal_bundle();
        b.validate().unwrap();
        let mut buf = Cursor::new(Vec::new());
        write_bundle(&b, &mut buf).unwrap();
        let bytes = buf.into_inner();
        let back = read_bundle(Cursor::new(bytes.clone())).unwrap();
        assert_eq!(back, b);

        let mut again = Cursor::new(Vec::new());
        write_bundle(&back, &mut again).unwrap();
        assert_eq!(again.into_inner(), bytes, "archive bytes must be deterministic");
    }

    #[test]
    fn dangling_ref_names_the_ref() {
        let mut b = minimal_bundle();
        b.manifest.model[0].bias = Some("nope".into());
        match b.validate() {
            Err(BundleError::MissingTensor { reference, owner }) => {
                assert_eq!(reference, "nope");
                assert!(owner.contains("fc"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shape_chain_violation_names_layer() {
        let mut b = minimal_bundle();
        let rec = TensorRecord::from_f32("fc.weight", vec![2, 3], &[0.0; 6]);
        b.tensors.insert(rec.name.clone(), rec);
        match b.validate() {
            Err(BundleError::ShapeChain { layer, .. }) => assert_eq!(layer, "fc"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut b = minimal_bundle();
        b.manifest.format_version = 7;
        let mut buf = Cursor::new(Vec::new());
        write_bundle(&b, &mut buf).unwrap();
        assert!(matches!(
            read_bundle(Cursor::new(buf.into_inner())),
            Err(BundleError::VersionMismatch { found: 7, .. })
        ));
    }

    #[test]
    fn unknown_manifest_fields_are_ignored() {
        let json = r#"{"format_version":1,"exporter":"x","model":[],"data":{"inputs":"x","extra":3}}"#;
        let m: BundleManifest = serde_json::from_str(json).unwrap();
        assert_eq!(m.data.inputs, "x");
    }

    #[test]
    fn conv_geometry() {
        assert_eq!(conv_out(3, 2, 1, 0), Ok(2));
        assert_eq!(conv_out(5, 3, 2, 1), Ok(3));
        assert!(conv_out(4, 3, 2, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn f32_tensor_roundtrip_is_bit_exact(values in proptest::collection::vec(any::<f32>(), 60)) {
            let rec = TensorRecord::from_f32("t", vec![3, 4, 5], &values);
            let back = roundtrip(&rec);
            prop_assert_eq!(back.payload, rec.payload);
            prop_assert_eq!(back.shape, vec![3, 4, 5]);
        }
    }
}
