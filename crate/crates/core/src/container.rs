//! A minimal binary tensor format plus JSON manifests.
//!
//! Each tensor file is
//!
//! ```text
//! "NTC1"  dtype:u8  ndim:u8  shape:[u64 LE; ndim]  payload (row-major, LE)
//! ```
//!
//! with dtype codes 1 = f32, 2 = f64, 3 = complex f32 and 4 = complex f64
//! (complex values interleaved re, im). A bundle is a directory holding one
//! `manifest.json` that maps tensor names to files, echoes each header and
//! carries free-form scalar metadata.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use num_complex::Complex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::field::Grid2;
use crate::microscope::{FourDDataset, ProbeParams, ScanGrid};

pub const MAGIC: &[u8; 4] = b"NTC1";
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
    C64,
    C128,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
            Dtype::C64 => 3,
            Dtype::C128 => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            3 => Some(Dtype::C64),
            4 => Some(Dtype::C128),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::C64 => 8,
            Dtype::C128 => 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Tensor {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
    C64(ArrayD<Complex<f32>>),
    C128(ArrayD<Complex<f64>>),
}

impl Tensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            Tensor::F32(_) => Dtype::F32,
            Tensor::F64(_) => Dtype::F64,
            Tensor::C64(_) => Dtype::C64,
            Tensor::C128(_) => Dtype::C128,
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            Tensor::F32(a) => a.shape().to_vec(),
            Tensor::F64(a) => a.shape().to_vec(),
            Tensor::C64(a) => a.shape().to_vec(),
            Tensor::C128(a) => a.shape().to_vec(),
        }
    }

    pub fn into_f64(self) -> Result<ArrayD<f64>> {
        match self {
            Tensor::F64(a) => Ok(a),
            other => Err(Error::InvalidParameter(format!(
                "expected an f64 tensor, found {:?}",
                other.dtype()
            ))),
        }
    }

    pub fn into_c128(self) -> Result<ArrayD<Complex<f64>>> {
        match self {
            Tensor::C128(a) => Ok(a),
            other => Err(Error::InvalidParameter(format!(
                "expected a c128 tensor, found {:?}",
                other.dtype()
            ))),
        }
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Tensor::F32(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Tensor::F64(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Tensor::C64(a) => a.iter().for_each(|v| {
                out.extend_from_slice(&v.re.to_le_bytes());
                out.extend_from_slice(&v.im.to_le_bytes());
            }),
            Tensor::C128(a) => a.iter().for_each(|v| {
                out.extend_from_slice(&v.re.to_le_bytes());
                out.extend_from_slice(&v.im.to_le_bytes());
            }),
        }
        out
    }

    /// Serialized bytes: header followed by payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let shape = self.shape();
        let mut out = Vec::with_capacity(6 + 8 * shape.len());
        out.extend_from_slice(MAGIC);
        out.push(self.dtype().code());
        out.push(shape.len() as u8);
        for d in &shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        out.extend(self.payload());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 6 || &bytes[..4] != MAGIC {
            return Err(bad("missing NTC1 magic".into()));
        }
        let dtype = Dtype::from_code(bytes[4]).ok_or_else(|| bad(format!("unknown dtype code {}", bytes[4])))?;
        let ndim = bytes[5] as usize;
        let header = 6 + 8 * ndim;
        if bytes.len() < header {
            return Err(bad("truncated shape".into()));
        }
        let shape: Vec<usize> = (0..ndim)
            .map(|i| {
                let b: [u8; 8] = bytes[6 + 8 * i..14 + 8 * i].try_into().expect("8 bytes");
                u64::from_le_bytes(b) as usize
            })
            .collect();
        let count: usize = shape.iter().product();
        let payload = &bytes[header..];
        if payload.len() != count * dtype.size() {
            return Err(bad(format!(
                "payload is {} bytes, shape {:?} of {:?} needs {}",
                payload.len(),
                shape,
                dtype,
                count * dtype.size()
            )));
        }
        let dim = IxDyn(&shape);
        let f32s = |chunk: &[u8]| f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        let f64s = |chunk: &[u8]| f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        let tensor = match dtype {
            Dtype::F32 => Tensor::F32(ArrayD::from_shape_vec(dim, payload.chunks_exact(4).map(f32s).collect()).expect("sized")),
            Dtype::F64 => Tensor::F64(ArrayD::from_shape_vec(dim, payload.chunks_exact(8).map(f64s).collect()).expect("sized")),
            Dtype::C64 => Tensor::C64(
                ArrayD::from_shape_vec(
                    dim,
                    payload.chunks_exact(8).map(|c| Complex::new(f32s(&c[..4]), f32s(&c[4..]))).collect(),
                )
                .expect("sized"),
            ),
            Dtype::C128 => Tensor::C128(
                ArrayD::from_shape_vec(
                    dim,
                    payload.chunks_exact(16).map(|c| Complex::new(f64s(&c[..8]), f64s(&c[8..]))).collect(),
                )
                .expect("sized"),
            ),
        };
        Ok(tensor)
    }
}

impl From<ArrayD<f64>> for Tensor {
    fn from(a: ArrayD<f64>) -> Self {
        Tensor::F64(a)
    }
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&tensor.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes, path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub file: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub version: String,
    pub tensors: BTreeMap<String, TensorEntry>,
    pub meta: BTreeMap<String, Value>,
}

/// A directory of named tensors with a manifest.
#[derive(Debug)]
pub struct Bundle {
    dir: PathBuf,
    pub manifest: Manifest,
}

impl Bundle {
    pub fn create(dir: &Path, kind: &str) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Bundle {
            dir: dir.to_path_buf(),
            manifest: Manifest {
                kind: kind.to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                ..Default::default()
            },
        })
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Bundle {
            dir: dir.to_path_buf(),
            manifest: serde_json::from_str(&text)?,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn put(&mut self, name: &str, tensor: &Tensor) -> Result<()> {
        let file = format!("{name}.ntc");
        write_tensor(&self.dir.join(&file), tensor)?;
        self.manifest.tensors.insert(
            name.to_string(),
            TensorEntry {
                file,
                dtype: tensor.dtype(),
                shape: tensor.shape(),
            },
        );
        Ok(())
    }

    pub fn put_f64<D: ndarray::Dimension>(&mut self, name: &str, a: &ndarray::Array<f64, D>) -> Result<()> {
        self.put(name, &Tensor::F64(a.clone().into_dyn()))
    }

    pub fn set_meta(&mut self, key: &str, value: impl Serialize) {
        self.manifest
            .meta
            .insert(key.to_string(), serde_json::to_value(value).expect("serializable metadata"));
    }

    pub fn meta<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .manifest
            .meta
            .get(key)
            .ok_or_else(|| Error::InvalidParameter(format!("manifest has no {key:?} entry")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn has(&self, name: &str) -> bool {
        self.manifest.tensors.contains_key(name)
    }

    /// Reads a tensor and checks it against the manifest echo.
    pub fn get(&self, name: &str) -> Result<Tensor> {
        let entry = self
            .manifest
            .tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        let path = self.dir.join(&entry.file);
        let t = read_tensor(&path)?;
        if t.dtype() != entry.dtype || t.shape() != entry.shape {
            return Err(Error::Format {
                path,
                reason: format!(
                    "header {:?} {:?} disagrees with manifest {:?} {:?}",
                    t.dtype(),
                    t.shape(),
                    entry.dtype,
                    entry.shape
                ),
            });
        }
        Ok(t)
    }

    pub fn get_f64(&self, name: &str) -> Result<ArrayD<f64>> {
        self.get(name)?.into_f64()
    }

    pub fn finish(&self) -> Result<()> {
        let path = self.dir.join(MANIFEST);
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn fixed<D: ndarray::Dimension>(a: ArrayD<f64>, name: &str) -> Result<ndarray::Array<f64, D>> {
    let shape = a.shape().to_vec();
    a.into_dimensionality::<D>()
        .map_err(|_| Error::shape(format!("tensor {name}"), &[], &shape))
}

pub fn save_dataset(ds: &FourDDataset, dir: &Path) -> Result<()> {
    let mut b = Bundle::create(dir, "4d-dataset")?;
    b.put_f64("i_minus", &ds.i_minus)?;
    b.put_f64("i_zero", &ds.i_zero)?;
    b.put_f64("i_plus", &ds.i_plus)?;
    b.put_f64("phase_gt", &ds.phase_gt)?;
    b.put_f64("vfield_gt", &ds.vfield_gt)?;
    b.put_f64("proj_phase_gt", &ds.proj_phase_gt)?;
    b.set_meta("detector", ds.detector);
    b.set_meta("scan", ds.scan);
    b.set_meta("lambda", ds.lambda);
    b.set_meta("sigma", ds.sigma);
    b.set_meta("accel_kv", ds.accel_kv);
    b.set_meta("delta_z_defocus", ds.delta_z_defocus);
    b.set_meta("probe", ds.probe);
    b.set_meta("structure", &ds.structure);
    b.set_meta("thickness", ds.thickness);
    b.set_meta("n_slices", ds.n_slices);
    b.finish()
}

pub fn load_dataset(dir: &Path) -> Result<FourDDataset> {
    let b = Bundle::open(dir)?;
    let ds = FourDDataset {
        i_minus: fixed::<ndarray::Ix3>(b.get_f64("i_minus")?, "i_minus")?,
        i_zero: fixed::<ndarray::Ix3>(b.get_f64("i_zero")?, "i_zero")?,
        i_plus: fixed::<ndarray::Ix3>(b.get_f64("i_plus")?, "i_plus")?,
        phase_gt: fixed::<ndarray::Ix3>(b.get_f64("phase_gt")?, "phase_gt")?,
        vfield_gt: fixed::<ndarray::Ix4>(b.get_f64("vfield_gt")?, "vfield_gt")?,
        proj_phase_gt: fixed::<ndarray::Ix2>(b.get_f64("proj_phase_gt")?, "proj_phase_gt")?,
        detector: b.meta::<Grid2>("detector")?,
        scan: b.meta::<ScanGrid>("scan")?,
        lambda: b.meta("lambda")?,
        sigma: b.meta("sigma")?,
        accel_kv: b.meta("accel_kv")?,
        delta_z_defocus: b.meta("delta_z_defocus")?,
        probe: b.meta::<ProbeParams>("probe")?,
        structure: b.meta("structure")?,
        thickness: b.meta("thickness")?,
        n_slices: b.meta("n_slices")?,
    };
    ds.validate()?;
    Ok(ds)
}

pub(crate) fn as_array2(a: ArrayD<f64>, name: &str) -> Result<Array2<f64>> {
    fixed(a, name)
}

pub(crate) fn as_array3(a: ArrayD<f64>, name: &str) -> Result<Array3<f64>> {
    fixed(a, name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::F64(ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0; 6]).unwrap());
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..4], b"NTC1");
        assert_eq!(bytes[4], 2);
        assert_eq!(bytes[5], 2);
        assert_eq!(u64::from_le_bytes(bytes[6..14].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[14..22].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 22 + 6 * 8);
    }

    #[test]
    fn rejects_bad_payload() {
        let t = Tensor::F32(ArrayD::zeros(IxDyn(&[4])));
        let mut bytes = t.to_bytes();
        bytes.pop();
        assert!(matches!(Tensor::from_bytes(&bytes, Path::new("x")), Err(Error::Format { .. })));
        bytes[0] = b'X';
        assert!(Tensor::from_bytes(&bytes, Path::new("x")).is_err());
    }

    #[test]
    fn manifest_echo_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = Bundle::create(dir.path(), "test").unwrap();
        b.put("a", &Tensor::F64(ArrayD::zeros(IxDyn(&[3])))).unwrap();
        b.manifest.tensors.get_mut("a").unwrap().shape = vec![4];
        b.finish().unwrap();
        let b = Bundle::open(dir.path()).unwrap();
        assert!(matches!(b.get("a"), Err(Error::Format { .. })));
        assert!(matches!(b.get("missing"), Err(Error::MissingTensor(_))));
    }
}
