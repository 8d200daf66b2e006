//! On-disk container: a directory holding `manifest.json` plus one raw
//! little-endian blob per tensor (`*.f32` row-major 32-bit floats, `*.u8`
//! bytes). Scene bundles and parameter checkpoints share this container.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, DepthMap, Image, SceneBundle};
use crate::scalar::Scalar;

pub const MANIFEST: &str = "manifest.json";
pub const BUNDLE_FORMAT: &str = "scene-bundle";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    U8,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format: String,
    pub version: u32,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub reference_index: usize,
    pub labeled: bool,
    /// Per-frame `(qw, qx, qy, qz, tx, ty, tz, fx, fy)`.
    pub cameras: Vec<[f32; 9]>,
    pub tensors: Vec<TensorEntry>,
}

pub fn write_f32(path: &Path, values: impl IntoIterator<Item = f32>) -> Result<()> {
    let bytes: Vec<u8> = values.into_iter().flat_map(f32::to_le_bytes).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::format(
            path,
            format!("expected {} bytes, found {}", expected * 4, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn write_u8(path: &Path, values: &[bool]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().map(|&b| b as u8).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_u8(path: &Path, expected: usize) -> Result<Vec<bool>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    bytes
        .into_iter()
        .map(|b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::format(
                path,
                format!("mask byte {other} is not 0 or 1"),
            )),
        })
        .collect()
}

fn to_f32<T: Scalar>(x: T) -> f32 {
    x.to_f32().unwrap_or(f32::NAN)
}

fn from_f32<T: Scalar>(x: f32) -> T {
    T::lit(x as f64)
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `bundle` into `dir` (created if missing).
pub fn save_bundle<T: Scalar>(bundle: &SceneBundle<T>, dir: &Path) -> Result<()> {
    bundle.validate()?;
    if bundle
        .cameras
        .iter()
        .any(|c| c.to_vector().iter().any(|x| !x.is_finite()))
    {
        return Err(Error::NonFinite("camera parameters".into()));
    }
    ensure_dir(dir)?;
    let (n, h, w) = (bundle.num_frames(), bundle.height(), bundle.width());
    let mut tensors = Vec::new();

    write_f32(
        &dir.join("images.f32"),
        bundle
            .images
            .iter()
            .flat_map(|i| i.data.iter().map(|&x| to_f32(x))),
    )?;
    tensors.push(TensorEntry {
        name: "images".into(),
        file: "images.f32".into(),
        dtype: DType::F32,
        shape: vec![n, 3, h, w],
    });

    for (i, d) in bundle.depths.iter().enumerate() {
        let file = format!("depth_{i}.f32");
        write_f32(&dir.join(&file), d.values.iter().map(|&x| to_f32(x)))?;
        tensors.push(TensorEntry {
            name: format!("depth_{i}"),
            file,
            dtype: DType::F32,
            shape: vec![h, w],
        });
        let file = format!("valid_{i}.u8");
        write_u8(&dir.join(&file), &d.valid)?;
        tensors.push(TensorEntry {
            name: format!("valid_{i}"),
            file,
            dtype: DType::U8,
            shape: vec![h, w],
        });
    }
    if let Some(dynamic) = &bundle.dynamic {
        for (i, m) in dynamic.iter().enumerate() {
            let file = format!("dynamic_{i}.u8");
            write_u8(&dir.join(&file), m)?;
            tensors.push(TensorEntry {
                name: format!("dynamic_{i}"),
                file,
                dtype: DType::U8,
                shape: vec![h, w],
            });
        }
    }
    if let Some(conf) = &bundle.confidence {
        for (i, c) in conf.iter().enumerate() {
            let file = format!("confidence_{i}.f32");
            write_f32(&dir.join(&file), c.iter().map(|&x| to_f32(x)))?;
            tensors.push(TensorEntry {
                name: format!("confidence_{i}"),
                file,
                dtype: DType::F32,
                shape: vec![h, w],
            });
        }
    }

    let manifest = BundleManifest {
        format: BUNDLE_FORMAT.into(),
        version: 1,
        num_frames: n,
        height: h,
        width: w,
        reference_index: 0,
        labeled: bundle.is_labeled(),
        cameras: bundle
            .cameras
            .iter()
            .map(|c| c.to_vector().map(to_f32))
            .collect(),
        tensors,
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

fn find<'a>(manifest: &'a BundleManifest, name: &str) -> Option<&'a TensorEntry> {
    manifest.tensors.iter().find(|t| t.name == name)
}

fn check_entry(dir: &Path, entry: &TensorEntry, dtype: DType, shape: &[usize]) -> Result<PathBuf> {
    if entry.dtype != dtype || entry.shape != shape {
        return Err(Error::format(
            dir.join(MANIFEST),
            format!(
                "tensor {} has dtype {:?} shape {:?}, expected {:?} {:?}",
                entry.name, entry.dtype, entry.shape, dtype, shape
            ),
        ));
    }
    Ok(dir.join(&entry.file))
}

pub fn load_bundle<T: Scalar>(dir: &Path) -> Result<SceneBundle<T>> {
    let mpath = dir.join(MANIFEST);
    let manifest: BundleManifest = read_json(&mpath)?;
    if manifest.format != BUNDLE_FORMAT {
        return Err(Error::format(
            &mpath,
            format!("format `{}` is not `{BUNDLE_FORMAT}`", manifest.format),
        ));
    }
    if manifest.reference_index != 0 {
        return Err(Error::format(&mpath, "reference_index must be 0"));
    }
    let (n, h, w) = (manifest.num_frames, manifest.height, manifest.width);
    let entry =
        find(&manifest, "images").ok_or_else(|| Error::format(&mpath, "missing images tensor"))?;
    let raw = read_f32(
        &check_entry(dir, entry, DType::F32, &[n, 3, h, w])?,
        n * 3 * h * w,
    )?;
    let images = raw
        .chunks_exact(3 * h * w)
        .map(|c| Image {
            width: w,
            height: h,
            data: c.iter().map(|&x| from_f32(x)).collect(),
        })
        .collect();

    let (mut cameras, mut depths) = (Vec::new(), Vec::new());
    if manifest.labeled {
        if manifest.cameras.len() != n {
            return Err(Error::format(
                &mpath,
                format!("{} cameras for {n} frames", manifest.cameras.len()),
            ));
        }
        cameras = manifest
            .cameras
            .iter()
            .map(|v| Camera::from_vector(v.map(from_f32), w, h))
            .collect();
        for i in 0..n {
            let e = find(&manifest, &format!("depth_{i}"))
                .ok_or_else(|| Error::format(&mpath, format!("missing depth_{i}")))?;
            let values = read_f32(&check_entry(dir, e, DType::F32, &[h, w])?, h * w)?
                .into_iter()
                .map(from_f32)
                .collect();
            let e = find(&manifest, &format!("valid_{i}"))
                .ok_or_else(|| Error::format(&mpath, format!("missing valid_{i}")))?;
            let valid = read_u8(&check_entry(dir, e, DType::U8, &[h, w])?, h * w)?;
            depths.push(DepthMap::new(w, h, values, valid)?);
        }
    }
    let mut dynamic = None;
    if find(&manifest, "dynamic_0").is_some() {
        let mut masks = Vec::with_capacity(n);
        for i in 0..n {
            let e = find(&manifest, &format!("dynamic_{i}"))
                .ok_or_else(|| Error::format(&mpath, format!("missing dynamic_{i}")))?;
            masks.push(read_u8(&check_entry(dir, e, DType::U8, &[h, w])?, h * w)?);
        }
        dynamic = Some(masks);
    }
    let mut confidence = None;
    if find(&manifest, "confidence_0").is_some() {
        let mut maps = Vec::with_capacity(n);
        for i in 0..n {
            let e = find(&manifest, &format!("confidence_{i}"))
                .ok_or_else(|| Error::format(&mpath, format!("missing confidence_{i}")))?;
            maps.push(
                read_f32(&check_entry(dir, e, DType::F32, &[h, w])?, h * w)?
                    .into_iter()
                    .map(from_f32)
                    .collect(),
            );
        }
        confidence = Some(maps);
    }
    let bundle = SceneBundle {
        images,
        cameras,
        depths,
        dynamic,
        confidence,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Bundle directories under `path`: `path` itself if it holds a manifest,
/// otherwise its immediate subdirectories that do, sorted by name.
pub fn list_bundles(path: &Path) -> Result<Vec<PathBuf>> {
    if path.join(MANIFEST).is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        let entry = entry.map_err(|e| Error::io(path, e))?;
        let p = entry.path();
        if p.join(MANIFEST).is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}
