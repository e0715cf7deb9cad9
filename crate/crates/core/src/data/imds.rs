//! `IMDS` dataset files.
//!
//! Little-endian layout: magic `IMDS`, u32 version, u32 class count, then per
//! class a u32 byte length and UTF-8 name, u32 N/H/W/C, `N*H*W*C` f32 pixels
//! in NHWC order and N u32 labels.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::LabeledImageSet;
use crate::error::{Error, Result};
use crate::tensor::{read_u32, Tensor};

pub const IMDS_MAGIC: &[u8; 4] = b"IMDS";
pub const IMDS_VERSION: u32 = 1;

/// Pixels are stored as f32, so values are rounded to single precision.
pub fn write_imds(ds: &LabeledImageSet, w: &mut impl Write) -> Result<()> {
    w.write_all(IMDS_MAGIC)?;
    w.write_all(&IMDS_VERSION.to_le_bytes())?;
    w.write_all(&(ds.class_names.len() as u32).to_le_bytes())?;
    for name in &ds.class_names {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
    }
    for d in ds.images.shape() {
        w.write_all(&(*d as u32).to_le_bytes())?;
    }
    for &v in ds.images.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    for &l in &ds.labels {
        w.write_all(&(l as u32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_imds(r: &mut impl Read) -> Result<LabeledImageSet> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != IMDS_MAGIC {
        return Err(Error::Format("not an IMDS dataset file".into()));
    }
    let version = read_u32(r)?;
    if version != IMDS_VERSION {
        return Err(Error::Format(format!("unsupported IMDS version {version}")));
    }
    let n_classes = read_u32(r)? as usize;
    let mut class_names = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        let len = read_u32(r)? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        class_names.push(String::from_utf8(buf).map_err(|_| Error::Format("class name is not UTF-8".into()))?);
    }
    let mut shape = [0usize; 4];
    for d in shape.iter_mut() {
        *d = read_u32(r)? as usize;
    }
    let numel: usize = shape.iter().product();
    let mut buf = vec![0u8; numel * 4];
    r.read_exact(&mut buf)?;
    let pixels = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let mut lbuf = vec![0u8; shape[0] * 4];
    r.read_exact(&mut lbuf)?;
    let labels = lbuf
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let images = Tensor::new(shape.to_vec(), pixels).map_err(|e| Error::Format(e.to_string()))?;
    LabeledImageSet::new(images, labels, class_names)
}

impl LabeledImageSet {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_imds(self, &mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
        read_imds(&mut BufReader::new(f))
    }

    /// Round pixels to single precision so that a save/load cycle is exact.
    pub fn quantize(mut self) -> Self {
        for v in self.images.data_mut() {
            *v = *v as f32 as f64;
        }
        self
    }
}
