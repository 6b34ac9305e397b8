//! Samples, manifests, image I/O, resizing, augmentation and the synthetic
//! scene generator.

mod augment;
mod io;
mod resize;
mod synth;

pub use augment::{augment, rotate_mask_nearest, AugmentParams};
pub use io::{load_mask, load_rgb, load_sample, save_mask, save_rgb};
pub use resize::{resize_bilinear, resize_mask};
pub use synth::{synth_generate, write_dataset};

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One RGB image with its binary shadow mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    /// `(3, H, W)`, values in `[0, 1]`.
    pub rgb: Tensor,
    /// `(1, H, W)`, values in `{0, 1}`; 1 marks shadow.
    pub mask: Tensor,
    pub original_size: (usize, usize),
    pub source_id: String,
}

impl ImageSample {
    pub fn new(rgb: Tensor, mask: Tensor, source_id: impl Into<String>) -> Result<Self> {
        let (c, h, w) = rgb.dims3()?;
        if c != 3 {
            return Err(Error::shape(format!("rgb must have 3 channels, got {c}")));
        }
        if mask.shape() != [1, h, w] {
            return Err(Error::shape(format!(
                "mask {:?} does not match image {h}x{w}",
                mask.shape()
            )));
        }
        Ok(Self {
            rgb,
            mask,
            original_size: (h, w),
            source_id: source_id.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.rgb.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.rgb.shape()[2]
    }

    /// Resizes image (bilinear) and mask (bilinear, re-binarized).
    pub fn resized(&self, h: usize, w: usize) -> Result<Self> {
        Ok(Self {
            rgb: resize_bilinear(&self.rgb, h, w)?,
            mask: resize_mask(&self.mask, h, w)?,
            original_size: self.original_size,
            source_id: self.source_id.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
}

impl ManifestEntry {
    /// File stem of the image, used to name predictions.
    pub fn stem(&self) -> String {
        self.image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

/// Reads a manifest of `image<TAB>mask` lines. The mask column may be absent.
/// Blank lines and lines starting with `#` are ignored.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path)
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let resolve = |p: &str| {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let (image, mask) = match fields[..] {
            [image] => (image, None),
            [image, mask] => (image, Some(mask)),
            _ => {
                return Err(err(format!(
                    "expected `image<TAB>mask`, found {} tab-separated fields",
                    fields.len()
                )))
            }
        };
        if image.trim().is_empty() || mask.is_some_and(|m| m.trim().is_empty()) {
            return Err(err("empty path".into()));
        }
        out.push(ManifestEntry {
            image: resolve(image.trim()),
            mask: mask.map(|m| resolve(m.trim())),
        });
    }
    Ok(out)
}

/// Writes a manifest with paths relative to the manifest's directory when
/// possible.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let rel = |p: &Path| {
        p.strip_prefix(base)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    };
    let mut text = String::new();
    for e in entries {
        text.push_str(&rel(&e.image));
        if let Some(m) = &e.mask {
            text.push('\t');
            text.push_str(&rel(m));
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads every manifest entry that has a mask.
pub fn load_dataset(manifest: &Path) -> Result<Vec<ImageSample>> {
    load_manifest(manifest)?
        .iter()
        .map(|e| {
            let mask = e.mask.as_deref().ok_or_else(|| {
                Error::InvalidArgument(format!("{} has no mask column", e.image.display()))
            })?;
            load_sample(&e.image, mask)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_parsing() {
        let p = Path::new("/data/set/list.tsv");
        let m = parse_manifest("a.png\ta.pgm\n# note\n\n/abs/b.png\tm/b.pgm\n", p).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].image, PathBuf::from("/data/set/a.png"));
        assert_eq!(m[0].mask, Some(PathBuf::from("/data/set/a.pgm")));
        assert_eq!(m[1].image, PathBuf::from("/abs/b.png"));
        assert_eq!(m[1].mask, Some(PathBuf::from("/data/set/m/b.pgm")));
        assert!(parse_manifest("", p).unwrap().is_empty());
        let m = parse_manifest("only.png\n", p).unwrap();
        assert_eq!(m[0].mask, None);
        assert_eq!(m[0].stem(), "only");
    }

    #[test]
    fn malformed_line_names_line() {
        let err = parse_manifest("a\tb\tc\n", Path::new("m.tsv")).unwrap_err();
        match err {
            Error::Manifest { line, .. } => assert_eq!(line, 1),
            e => panic!("unexpected {e}"),
        }
        let err = parse_manifest("a\tb\n\nx\ty\tz\n", Path::new("m.tsv")).unwrap_err();
        assert!(err.to_string().contains(":3:"), "{err}");
    }

    #[test]
    fn missing_manifest() {
        assert!(matches!(
            load_manifest(Path::new("/nonexistent/manifest.tsv")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn sample_shape_checks() {
        let rgb = Tensor::zeros(vec![3, 4, 5]);
        assert!(ImageSample::new(rgb.clone(), Tensor::zeros(vec![1, 4, 5]), "a").is_ok());
        assert!(ImageSample::new(rgb, Tensor::zeros(vec![1, 4, 6]), "a").is_err());
        assert!(ImageSample::new(Tensor::zeros(vec![1, 4, 5]), Tensor::zeros(vec![1, 4, 5]), "a").is_err());
    }
}
