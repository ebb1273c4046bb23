use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::Array3;

use super::{Domain, DomainPair, ImageSample};
use crate::error::{Error, Result};

pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn category_dirs(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            let name = entry.file_name().to_string_lossy().into_owned();
            out.push((name, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

fn decode(path: &Path, side: usize) -> Result<Array3<u8>> {
    let img = image::open(path).map_err(|e| Error::SampleDecodeError {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img
        .resize_exact(side as u32, side as u32, FilterType::Triangle)
        .to_rgb8();
    Array3::from_shape_vec((side, side, 3), rgb.into_raw()).map_err(|e| Error::SampleDecodeError {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn load_domain(dirs: &[(String, PathBuf)], domain: Domain, side: usize, root: &Path) -> Result<Vec<ImageSample>> {
    let mut samples = Vec::new();
    for (label, (_, dir)) in dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        files.sort();
        for path in files {
            let pixels = decode(&path, side)?;
            let id = path
                .strip_prefix(root)
                .unwrap_or(&path)
                .to_string_lossy()
                .replace('\\', "/");
            let id = format!("{}/{id}", domain.as_str());
            samples.push(ImageSample::new(id, pixels, domain, Some(label), None));
        }
    }
    Ok(samples)
}

/// Loads `<root>/<category>/<image>` trees for both domains.
///
/// Categories are the sorted subdirectory names and must match across roots.
/// Images are resized to `side x side`. Target labels are read from the
/// directory layout but only reachable through the eval-only accessor.
pub fn load_directory_pair(source_root: &Path, target_root: &Path, side: usize) -> Result<DomainPair> {
    let src_dirs = category_dirs(source_root)?;
    let tgt_dirs = category_dirs(target_root)?;
    let src_names: BTreeSet<&String> = src_dirs.iter().map(|(n, _)| n).collect();
    let tgt_names: BTreeSet<&String> = tgt_dirs.iter().map(|(n, _)| n).collect();
    if src_names != tgt_names {
        return Err(Error::CategoryMismatch {
            source_only: src_names.difference(&tgt_names).map(|s| s.to_string()).collect(),
            target_only: tgt_names.difference(&src_names).map(|s| s.to_string()).collect(),
        });
    }
    let categories: Vec<String> = src_dirs.iter().map(|(n, _)| n.clone()).collect();
    let source = load_domain(&src_dirs, Domain::Source, side, source_root)?;
    let target = load_domain(&tgt_dirs, Domain::Target, side, target_root)?;
    DomainPair::new(source, target, categories)
}
