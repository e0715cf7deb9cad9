//! Ingestion of `root/<class>/<image>` folder trees.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rayon::prelude::*;

use super::LabeledImageSet;
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoadOptions {
    pub height: usize,
    pub width: usize,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FolderLoad {
    pub dataset: LabeledImageSet,
    /// Files that could not be decoded and were left out.
    pub skipped: Vec<PathBuf>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn decode(path: &Path, opts: &LoadOptions) -> Option<Vec<f64>> {
    let img = image::open(path).ok()?;
    let img = img.resize_exact(opts.width as u32, opts.height as u32, FilterType::Triangle);
    let raw: Vec<u8> = if opts.channels == 1 {
        img.to_luma8().into_raw()
    } else {
        img.to_rgb8().into_raw()
    };
    Some(raw.into_iter().map(|v| v as f64 / 255.0).collect())
}

/// Load one class per subdirectory of `root`, classes in lexicographic
/// order of directory name, files in path order. Images are resized with
/// bilinear filtering and scaled to `[0,1]`.
pub fn load_image_folder(root: impl AsRef<Path>, opts: &LoadOptions) -> Result<FolderLoad> {
    let root = root.as_ref();
    if opts.height == 0 || opts.width == 0 || !matches!(opts.channels, 1 | 3) {
        return Err(invalid!("image size must be positive and channels 1 or 3"));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", root.display())))?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!("{} has no class subdirectories", root.display())));
    }
    let mut class_names = Vec::new();
    let mut files = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        class_names.push(dir.file_name().unwrap().to_string_lossy().into_owned());
        for f in sorted_entries(dir)?.into_iter().filter(|p| p.is_file()) {
            files.push((label, f));
        }
    }
    let decoded: Vec<Option<Vec<f64>>> = files.par_iter().map(|(_, p)| decode(p, opts)).collect();

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut skipped = Vec::new();
    for ((label, path), pixels) in files.into_iter().zip(decoded) {
        match pixels {
            Some(px) => {
                data.extend(px);
                labels.push(label);
            }
            None => skipped.push(path),
        }
    }
    if !skipped.is_empty() {
        log::warn!("skipped {} undecodable files under {}", skipped.len(), root.display());
    }
    for (label, dir) in class_dirs.iter().enumerate() {
        if !labels.contains(&label) {
            return Err(Error::Data(format!(
                "class folder {} has no readable images",
                dir.display()
            )));
        }
    }
    let images = Tensor::new([labels.len(), opts.height, opts.width, opts.channels], data)?;
    Ok(FolderLoad {
        dataset: LabeledImageSet::new(images, labels, class_names)?,
        skipped,
    })
}
