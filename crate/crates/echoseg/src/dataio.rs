//! On-disk dataset formats: float32 rasters, 8-bit mask PNGs, and the
//! JSON manifest that records split membership.
//!
//! Raster layout: 4 magic bytes `ESF1`, then height and width as
//! little-endian `u32`, then `h*w` little-endian `f32` in row-major order.

use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const RASTER_MAGIC: &[u8; 4] = b"ESF1";
pub const MANIFEST_NAME: &str = "manifest.json";

pub fn write_raster(path: &Path, img: &Array2<f32>) -> Result<()> {
    let (h, w) = img.dim();
    let mut buf = Vec::with_capacity(12 + h * w * 4);
    buf.extend_from_slice(RASTER_MAGIC);
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for v in img.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_raster(path: &Path) -> Result<Array2<f32>> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = [0u8; 12];
    f.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    if &header[0..4] != RASTER_MAGIC {
        return Err(Error::Format(format!("{}: bad raster magic", path.display())));
    }
    let h = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut data = Vec::new();
    f.read_to_end(&mut data).map_err(|e| Error::io(path, e))?;
    if data.len() != h * w * 4 {
        return Err(Error::Format(format!(
            "{}: raster payload is {} bytes, expected {}",
            path.display(),
            data.len(),
            h * w * 4
        )));
    }
    let vals: Vec<f32> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((h, w), vals)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Binary mask as an 8-bit PNG with values 0/255.
pub fn write_mask_png(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for ((r, c), &v) in mask.indexed_iter() {
        img.put_pixel(c as u32, r as u32, image::Luma([if v > 0 { 255 } else { 0 }]));
    }
    img.save(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn read_mask_png(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::zeros((h as usize, w as usize));
    for (c, r, p) in img.enumerate_pixels() {
        out[(r as usize, c as usize)] = if p.0[0] >= 128 { 1 } else { 0 };
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Unlabeled pretraining pool.
    Mae,
    /// Adaptation pool: labeled source echo plus unlabeled target echoes.
    Adapt,
    /// Held-out labeled evaluation subjects.
    Test,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageRef {
    pub echo: usize,
    pub te_ms: f64,
    pub path: String,
    pub labeled: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SliceEntry {
    pub subject: String,
    pub slice: u32,
    pub split: Split,
    /// Relative path to the mask PNG; absent where labels are withheld.
    pub mask: Option<String>,
    pub images: Vec<ImageRef>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub te_ms: Vec<f64>,
    /// The acquisition never specifies inter-echo spacing; we assume uniform
    /// and record that assumption here.
    pub echo_spacing_note: String,
    pub noise_sigma: f64,
    pub pixel_spacing_mm: (f64, f64),
    pub source_echo: usize,
    pub target_echoes: Vec<usize>,
    pub mae_echoes: Vec<usize>,
    pub entries: Vec<SliceEntry>,
}

impl Manifest {
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_NAME);
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(e.to_string()))?;
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(json.as_bytes()).map_err(|e| Error::io(&path, e))?;
        f.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_NAME);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }

    /// Subject-level split hygiene: no subject in more than one split.
    pub fn validate(&self) -> Result<()> {
        let mut seen: std::collections::BTreeMap<&str, Split> = Default::default();
        for e in &self.entries {
            match seen.get(e.subject.as_str()) {
                Some(s) if *s != e.split => {
                    return Err(Error::SplitOverlap(format!(
                        "subject {} appears in {:?} and {:?}",
                        e.subject, s, e.split
                    )));
                }
                _ => {
                    seen.insert(&e.subject, e.split);
                }
            }
        }
        Ok(())
    }

    pub fn subjects_in(&self, split: Split) -> BTreeSet<&str> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.subject.as_str())
            .collect()
    }
}

/// A dataset directory opened for reading.
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: impl Into<PathBuf>) -> Result<Dataset> {
        let root = root.into();
        let manifest = Manifest::load(&root)?;
        Ok(Dataset { root, manifest })
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &SliceEntry> {
        self.manifest.entries.iter().filter(move |e| e.split == split)
    }

    pub fn load_image(&self, entry: &SliceEntry, echo: usize) -> Result<Array2<f32>> {
        let img = entry
            .images
            .iter()
            .find(|i| i.echo == echo)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "echo {echo} not stored for {}[{}]",
                    entry.subject, entry.slice
                ))
            })?;
        read_raster(&self.root.join(&img.path))
    }

    pub fn load_mask(&self, entry: &SliceEntry) -> Result<Array2<u8>> {
        let rel = entry.mask.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "labels are withheld for {}[{}]",
                entry.subject, entry.slice
            ))
        })?;
        read_mask_png(&self.root.join(rel))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex_string(&Sha256::digest(&bytes)))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    use sha2::Digest;
    hex_string(&sha2::Sha256::digest(bytes))
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raster_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Array2::from_shape_fn((5, 7), |(r, c)| (r * 7 + c) as f32 * 0.25 - 3.0);
        let p = dir.path().join("x.f32");
        write_raster(&p, &img).unwrap();
        assert_eq!(read_raster(&p).unwrap(), img);
    }

    #[test]
    fn raster_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.f32");
        fs::write(&p, b"XXXX\x01\x00\x00\x00\x01\x00\x00\x00aaaa").unwrap();
        assert!(matches!(read_raster(&p), Err(Error::Format(_))));
    }

    #[test]
    fn mask_png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mask = Array2::from_shape_fn((9, 4), |(r, c)| u8::from((r + c) % 3 == 0));
        let p = dir.path().join("m.png");
        write_mask_png(&p, &mask).unwrap();
        assert_eq!(read_mask_png(&p).unwrap(), mask);
    }

    #[test]
    fn manifest_rejects_subject_overlap() {
        let m = Manifest {
            format_version: 1,
            seed: 0,
            height: 64,
            width: 64,
            te_ms: vec![3.15],
            echo_spacing_note: String::new(),
            noise_sigma: 0.0,
            pixel_spacing_mm: (1.0, 1.0),
            source_echo: 0,
            target_echoes: vec![],
            mae_echoes: vec![],
            entries: vec![
                SliceEntry {
                    subject: "sub000".into(),
                    slice: 0,
                    split: Split::Mae,
                    mask: None,
                    images: vec![],
                },
                SliceEntry {
                    subject: "sub000".into(),
                    slice: 1,
                    split: Split::Test,
                    mask: None,
                    images: vec![],
                },
            ],
        };
        assert!(matches!(m.validate(), Err(Error::SplitOverlap(_))));
    }
}
