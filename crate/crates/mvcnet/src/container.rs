//! Little-endian binary containers for cached datasets (`MVCD`) and tensor checkpoints (`MVCK`).
//!
//! Dataset layout, all integers `u32` unless noted:
//!
//! ```text
//! "MVCD" version seed:u64 num_classes views view_dims[views] n_train n_test
//! batch*: class view rows cols labels[rows] inputs:f32[rows*cols]
//! ```
//!
//! Checkpoint layout:
//!
//! ```text
//! "MVCK" version meta_len meta:utf8 count
//! entry*: name_len:u16 name:utf8 ndim:u8 dims:u64[ndim] data:f64[prod(dims)]
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use thiserror::Error;

use crate::dataset::{SplitDataset, ViewBatch};

pub const DATASET_MAGIC: &[u8; 4] = b"MVCD";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MVCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt container: {0}")]
    Corrupt(String),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

fn read_magic(r: &mut impl Read, expected: &[u8; 4]) -> Result<(), ContainerError> {
    let mut found = [0u8; 4];
    r.read_exact(&mut found)?;
    if &found != expected {
        return Err(ContainerError::BadMagic { expected: *expected, found });
    }
    let version = r.read_u32::<LE>()?;
    if version != FORMAT_VERSION {
        return Err(ContainerError::UnsupportedVersion(version));
    }
    Ok(())
}

fn to_u32(v: usize, what: &str) -> Result<u32, ContainerError> {
    u32::try_from(v).map_err(|_| ContainerError::Corrupt(format!("{what} {v} exceeds u32")))
}

fn write_batch(w: &mut impl Write, b: &ViewBatch) -> Result<(), ContainerError> {
    w.write_u32::<LE>(to_u32(b.class_id, "class id")?)?;
    w.write_u32::<LE>(to_u32(b.view_id, "view id")?)?;
    w.write_u32::<LE>(to_u32(b.inputs.nrows(), "rows")?)?;
    w.write_u32::<LE>(to_u32(b.inputs.ncols(), "cols")?)?;
    for &l in &b.labels {
        w.write_u32::<LE>(to_u32(l, "label")?)?;
    }
    let mut buf = Vec::with_capacity(b.inputs.len() * 4);
    for &x in b.inputs.iter() {
        buf.write_f32::<LE>(x)?;
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_batch(r: &mut impl Read) -> Result<ViewBatch, ContainerError> {
    let class_id = r.read_u32::<LE>()? as usize;
    let view_id = r.read_u32::<LE>()? as usize;
    let rows = r.read_u32::<LE>()? as usize;
    let cols = r.read_u32::<LE>()? as usize;
    let mut labels = Vec::with_capacity(rows);
    for _ in 0..rows {
        labels.push(r.read_u32::<LE>()? as usize);
    }
    let mut raw = vec![0u8; rows * cols * 4];
    r.read_exact(&mut raw)?;
    let mut data = vec![0f32; rows * cols];
    (&raw[..]).read_f32_into::<LE>(&mut data)?;
    let inputs = Array2::from_shape_vec((rows, cols), data).map_err(|e| ContainerError::Corrupt(e.to_string()))?;
    Ok(ViewBatch { class_id, view_id, inputs, labels })
}

pub fn write_dataset(w: &mut impl Write, ds: &SplitDataset) -> Result<(), ContainerError> {
    w.write_all(DATASET_MAGIC)?;
    w.write_u32::<LE>(FORMAT_VERSION)?;
    w.write_u64::<LE>(ds.seed)?;
    w.write_u32::<LE>(to_u32(ds.num_classes, "classes")?)?;
    w.write_u32::<LE>(to_u32(ds.views_per_class, "views")?)?;
    for &d in &ds.view_dims {
        w.write_u32::<LE>(to_u32(d, "view dim")?)?;
    }
    w.write_u32::<LE>(to_u32(ds.train.len(), "train batches")?)?;
    w.write_u32::<LE>(to_u32(ds.test.len(), "test batches")?)?;
    for b in ds.train.iter().chain(&ds.test) {
        write_batch(w, b)?;
    }
    Ok(())
}

pub fn read_dataset(r: &mut impl Read) -> Result<SplitDataset, ContainerError> {
    read_magic(r, DATASET_MAGIC)?;
    let seed = r.read_u64::<LE>()?;
    let num_classes = r.read_u32::<LE>()? as usize;
    let views_per_class = r.read_u32::<LE>()? as usize;
    let mut view_dims = Vec::with_capacity(views_per_class);
    for _ in 0..views_per_class {
        view_dims.push(r.read_u32::<LE>()? as usize);
    }
    let n_train = r.read_u32::<LE>()? as usize;
    let n_test = r.read_u32::<LE>()? as usize;
    let train = (0..n_train).map(|_| read_batch(r)).collect::<Result<Vec<_>, _>>()?;
    let test = (0..n_test).map(|_| read_batch(r)).collect::<Result<Vec<_>, _>>()?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(ContainerError::Corrupt("trailing bytes after last batch".into()));
    }
    let ds = SplitDataset { train, test, num_classes, views_per_class, view_dims, seed };
    ds.validate().map_err(|e| ContainerError::Corrupt(e.to_string()))?;
    Ok(ds)
}

pub fn save_dataset(path: &Path, ds: &SplitDataset) -> Result<(), ContainerError> {
    let mut buf = Vec::new();
    write_dataset(&mut buf, ds)?;
    write_atomic(path, &buf)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<SplitDataset, ContainerError> {
    let mut r = io::BufReader::new(fs::File::open(path)?);
    read_dataset(&mut r)
}

/// Named `f64` tensors plus a free-form metadata string.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorArchive {
    pub meta: String,
    pub tensors: Vec<(String, ArrayD<f64>)>,
}

impl TensorArchive {
    pub fn push(&mut self, name: impl Into<String>, t: ArrayD<f64>) {
        self.tensors.push((name.into(), t));
    }

    pub fn push2(&mut self, name: impl Into<String>, t: &Array2<f64>) {
        self.push(name, t.clone().into_dyn());
    }

    pub fn push1(&mut self, name: impl Into<String>, t: &Array1<f64>) {
        self.push(name, t.clone().into_dyn());
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>, ContainerError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| ContainerError::MissingTensor(name.to_string()))
    }

    pub fn get2(&self, name: &str) -> Result<Array2<f64>, ContainerError> {
        self.get(name)?
            .clone()
            .into_dimensionality()
            .map_err(|_| ContainerError::Corrupt(format!("{name} is not 2-d")))
    }

    pub fn get1(&self, name: &str) -> Result<Array1<f64>, ContainerError> {
        self.get(name)?
            .clone()
            .into_dimensionality()
            .map_err(|_| ContainerError::Corrupt(format!("{name} is not 1-d")))
    }

    pub fn write(&self, w: &mut impl Write) -> Result<(), ContainerError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LE>(FORMAT_VERSION)?;
        w.write_u32::<LE>(to_u32(self.meta.len(), "metadata length")?)?;
        w.write_all(self.meta.as_bytes())?;
        w.write_u32::<LE>(to_u32(self.tensors.len(), "tensor count")?)?;
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| ContainerError::Corrupt(format!("name too long: {name}")))?;
            w.write_u16::<LE>(len)?;
            w.write_all(name.as_bytes())?;
            let ndim = u8::try_from(t.ndim()).map_err(|_| ContainerError::Corrupt("too many dims".into()))?;
            w.write_u8(ndim)?;
            for &d in t.shape() {
                w.write_u64::<LE>(d as u64)?;
            }
            let mut buf = Vec::with_capacity(t.len() * 8);
            for &x in t.iter() {
                buf.write_f64::<LE>(x)?;
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self, ContainerError> {
        read_magic(r, CHECKPOINT_MAGIC)?;
        let meta_len = r.read_u32::<LE>()? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let meta = String::from_utf8(meta).map_err(|e| ContainerError::Corrupt(e.to_string()))?;
        let count = r.read_u32::<LE>()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.read_u16::<LE>()? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| ContainerError::Corrupt(e.to_string()))?;
            let ndim = r.read_u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u64::<LE>()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)?;
            let mut data = vec![0f64; n];
            (&raw[..]).read_f64_into::<LE>(&mut data)?;
            let t = ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| ContainerError::Corrupt(e.to_string()))?;
            tensors.push((name, t));
        }
        Ok(TensorArchive { meta, tensors })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: &Path) -> Result<(), ContainerError> {
        write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ContainerError> {
        let mut r = io::BufReader::new(fs::File::open(path)?);
        Self::read(&mut r)
    }
}
