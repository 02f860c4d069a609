//! On-disk dataset layout `root/{train,test,val}/{NORMAL,PNEUMONIA}/*` and
//! image decoding.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use pneunet_core::image::ImageBuffer;
use pneunet_core::train::SampleSource;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPLITS: [&str; 3] = ["train", "test", "val"];
pub const CLASSES: [&str; 2] = ["NORMAL", "PNEUMONIA"];
pub const EXTENSIONS: [&str; 4] = ["jpeg", "jpg", "png", "pgm"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub path: PathBuf,
    /// 0 = NORMAL, 1 = PNEUMONIA.
    pub label: u8,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub splits: BTreeMap<String, Vec<Entry>>,
    /// Non-fatal findings such as empty class folders or skipped files.
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    #[serde(rename = "NORMAL")]
    pub normal: usize,
    #[serde(rename = "PNEUMONIA")]
    pub pneumonia: usize,
    pub total: usize,
}

impl DatasetIndex {
    pub fn split(&self, name: &str) -> Result<&[Entry]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Dataset(format!("no split named {name:?}")))
    }

    pub fn counts(&self) -> BTreeMap<String, SplitCounts> {
        self.splits
            .iter()
            .map(|(name, entries)| {
                let pneumonia = entries.iter().filter(|e| e.label == 1).count();
                let c = SplitCounts {
                    normal: entries.len() - pneumonia,
                    pneumonia,
                    total: entries.len(),
                };
                (name.clone(), c)
            })
            .collect()
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "root": self.root.display().to_string(),
            "splits": self.counts(),
            "warnings": self.warnings,
        })
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<fs::DirEntry>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    Ok(entries)
}

fn is_dir(e: &fs::DirEntry) -> Result<bool> {
    // Follows symlinks, unlike `DirEntry::file_type`.
    fs::metadata(e.path())
        .map(|m| m.is_dir())
        .map_err(|err| Error::io(e.path(), err))
}

fn supported(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Indexes every split present under `root`; all three must exist. Files
/// are ordered lexicographically by name within each class folder, NORMAL
/// before PNEUMONIA.
pub fn scan_dataset(root: &Path) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::NotFound(root.to_path_buf()));
    }
    let mut index = DatasetIndex {
        root: root.to_path_buf(),
        ..DatasetIndex::default()
    };
    for e in sorted_entries(root)? {
        let name = e.file_name().to_string_lossy().into_owned();
        if is_dir(&e)? && !SPLITS.contains(&name.as_str()) {
            return Err(Error::Dataset(format!(
                "unknown folder {name:?} in dataset root"
            )));
        }
    }
    for split in SPLITS {
        let dir = root.join(split);
        if !dir.is_dir() {
            return Err(Error::Dataset(format!(
                "missing split folder {}",
                dir.display()
            )));
        }
        for e in sorted_entries(&dir)? {
            let name = e.file_name().to_string_lossy().into_owned();
            if is_dir(&e)? && !CLASSES.contains(&name.as_str()) {
                return Err(Error::Dataset(format!(
                    "unknown class folder {split}/{name}"
                )));
            }
        }
        let mut entries = Vec::new();
        for (label, class) in CLASSES.iter().enumerate() {
            let class_dir = dir.join(class);
            if !class_dir.is_dir() {
                index
                    .warnings
                    .push(format!("{split}/{class} is missing; counted as 0"));
                continue;
            }
            let before = entries.len();
            for e in sorted_entries(&class_dir)? {
                let path = e.path();
                if is_dir(&e)? {
                    return Err(Error::Dataset(format!(
                        "unexpected folder {}",
                        path.display()
                    )));
                }
                if !supported(&path) {
                    index.warnings.push(format!("skipped {}", path.display()));
                    continue;
                }
                entries.push(Entry {
                    path,
                    label: label as u8,
                });
            }
            if entries.len() == before {
                index.warnings.push(format!("{split}/{class} is empty"));
            }
        }
        index.splits.insert(split.to_string(), entries);
    }
    Ok(index)
}

/// Decodes JPEG (baseline), PNG (8-bit) or binary PGM (P5). Grayscale input
/// stays single-channel; everything else becomes RGB.
pub fn decode_image(bytes: &[u8]) -> Result<ImageBuffer> {
    use image::{ColorType, ImageFormat};
    let format = image::guess_format(bytes).map_err(|e| Error::Decode(e.to_string()))?;
    if !matches!(
        format,
        ImageFormat::Jpeg | ImageFormat::Png | ImageFormat::Pnm
    ) {
        return Err(Error::Decode(format!("unsupported format {format:?}")));
    }
    let img = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| Error::Decode(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray = matches!(
        img.color(),
        ColorType::L8 | ColorType::L16 | ColorType::La8 | ColorType::La16
    );
    let buf = if gray {
        ImageBuffer::gray(w, h, img.into_luma8().into_raw())
    } else {
        ImageBuffer::new(w, h, 3, img.into_rgb8().into_raw())
    };
    Ok(buf?)
}

pub fn read_image(path: &Path) -> Result<ImageBuffer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|e| match e {
        Error::Decode(msg) => Error::Decode(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Binary PGM (P5) encoding of a single-channel image.
pub fn encode_pgm(img: &ImageBuffer) -> Result<Vec<u8>> {
    if img.channels() != 1 {
        return Err(Error::Invalid("PGM needs a single-channel image".into()));
    }
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.pixels());
    Ok(out)
}

pub fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>> {
    use image::{ExtendedColorType, ImageEncoder};
    let color = match img.channels() {
        1 => ExtendedColorType::L8,
        _ => ExtendedColorType::Rgb8,
    };
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(img.pixels(), img.width() as u32, img.height() as u32, color)
        .map_err(|e| Error::Decode(e.to_string()))?;
    Ok(out)
}

/// Split entries read from disk on demand.
#[derive(Debug, Clone)]
pub struct DiskSource {
    pub entries: Vec<Entry>,
}

impl DiskSource {
    pub fn new(entries: &[Entry]) -> Self {
        Self {
            entries: entries.to_vec(),
        }
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            entries: indices.iter().map(|&i| self.entries[i].clone()).collect(),
        }
    }
}

impl SampleSource for DiskSource {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn label(&self, index: usize) -> u8 {
        self.entries[index].label
    }

    fn image(&self, index: usize) -> pneunet_core::Result<ImageBuffer> {
        let e = &self.entries[index];
        read_image(&e.path).map_err(|err| pneunet_core::Error::Source(err.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(path: &Path, bytes: &[u8]) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, bytes).unwrap();
    }

    fn pgm(px: &[u8], w: usize, h: usize) -> Vec<u8> {
        encode_pgm(&ImageBuffer::gray(w, h, px.to_vec()).unwrap()).unwrap()
    }

    fn layout(root: &Path) {
        for split in SPLITS {
            for class in CLASSES {
                fs::create_dir_all(root.join(split).join(class)).unwrap();
            }
        }
    }

    #[test]
    fn counts_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        layout(root);
        let img = pgm(&[1, 2, 3, 4], 2, 2);
        for name in ["b.pgm", "a.pgm"] {
            touch(&root.join("train/NORMAL").join(name), &img);
        }
        for name in ["z.pgm", "c.PGM", "m.png"] {
            touch(&root.join("train/PNEUMONIA").join(name), &img);
        }
        touch(&root.join("train/PNEUMONIA/notes.txt"), b"x");
        let idx = scan_dataset(root).unwrap();
        let c = idx.counts()["train"];
        assert_eq!((c.normal, c.pneumonia, c.total), (2, 3, 5));
        let names: Vec<_> = idx
            .split("train")
            .unwrap()
            .iter()
            .map(|e| e.path.file_name().unwrap().to_owned())
            .collect();
        assert_eq!(names, ["a.pgm", "b.pgm", "c.PGM", "m.png", "z.pgm"]);
        assert!(idx.warnings.iter().any(|w| w.contains("notes.txt")));
        assert!(idx
            .warnings
            .iter()
            .any(|w| w.contains("test/NORMAL is empty")));
        assert_eq!(idx.summary_json()["splits"]["train"]["PNEUMONIA"], 3);
    }

    #[test]
    fn layout_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(scan_dataset(dir.path()).is_err(), "empty root");
        layout(dir.path());
        fs::create_dir_all(dir.path().join("train/COVID")).unwrap();
        assert!(matches!(scan_dataset(dir.path()), Err(Error::Dataset(_))));
        assert!(matches!(
            scan_dataset(&dir.path().join("nope")),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn pgm_decodes_exactly() {
        let img = decode_image(&pgm(&[0, 85, 170, 255], 2, 2)).unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (2, 2, 1));
        assert_eq!(img.pixels(), &[0, 85, 170, 255]);
    }

    #[test]
    fn truncated_files_fail() {
        let full = pgm(&[9; 16], 4, 4);
        assert!(decode_image(&full[..full.len() - 3]).is_err());
        let png = encode_png(&ImageBuffer::gray(4, 4, vec![7; 16]).unwrap()).unwrap();
        assert_eq!(decode_image(&png).unwrap().pixels(), &[7; 16]);
        assert!(decode_image(&png[..png.len() / 2]).is_err());
        assert!(decode_image(b"GIF89a....").is_err());
        assert!(decode_image(b"").is_err());
    }

    #[test]
    fn uniform_gray_jpeg_round_trip() {
        use image::ImageEncoder;
        let mut jpg = Vec::new();
        image::codecs::jpeg::JpegEncoder::new_with_quality(&mut jpg, 90)
            .write_image(&[128u8; 64], 8, 8, image::ExtendedColorType::L8)
            .unwrap();
        let img = decode_image(&jpg).unwrap();
        assert!(img.pixels().iter().all(|&v| v.abs_diff(128) <= 2));
    }
}
