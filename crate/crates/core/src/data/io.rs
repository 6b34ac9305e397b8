use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat, ImageReader};

use super::ImageSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_err(path: &Path, message: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Pnm) => {}
        other => {
            return Err(image_err(
                path,
                format!("unsupported format {other:?}; expected PNG or binary PPM/PGM"),
            ))
        }
    }
    reader.decode().map_err(|e| image_err(path, e))
}

/// Loads an 8-bit image as `(3, H, W)` with values `v / 255`.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = decode(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let mut data = vec![0.0f32; 3 * h * w];
    for (p, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + p] = f32::from(px[c]) / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Loads a grayscale mask as `(1, H, W)`; pixels `>= 128` become 1.
pub fn load_mask(path: &Path) -> Result<Tensor> {
    let img = decode(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| if v >= 128 { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(vec![1, h, w], data)
}

pub fn load_sample(image: &Path, mask: &Path) -> Result<ImageSample> {
    let rgb = load_rgb(image)?;
    let m = load_mask(mask)?;
    let (ih, iw) = (rgb.shape()[1], rgb.shape()[2]);
    let (mh, mw) = (m.shape()[1], m.shape()[2]);
    if (ih, iw) != (mh, mw) {
        return Err(image_err(
            mask,
            format!("mask is {mh}x{mw} but image is {ih}x{iw}"),
        ));
    }
    let id = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    ImageSample::new(rgb, m, id)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_bytes(path: &Path, bytes: &[u8], w: usize, h: usize, color: ExtendedColorType) -> Result<()> {
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let out = BufWriter::new(file);
    let (w, h) = (w as u32, h as u32);
    let res = match ext.as_str() {
        "png" => PngEncoder::new(out).write_image(bytes, w, h, color),
        "ppm" => PnmEncoder::new(out)
            .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
            .write_image(bytes, w, h, color),
        "pgm" => PnmEncoder::new(out)
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(bytes, w, h, color),
        _ => return Err(image_err(path, "unsupported extension; use .png, .ppm or .pgm")),
    };
    res.map_err(|e| image_err(path, e))
}

/// Writes a `(3, H, W)` tensor in `[0, 1]` as 8-bit RGB (PNG or PPM by extension).
pub fn save_rgb(path: &Path, rgb: &Tensor) -> Result<()> {
    let (c, h, w) = rgb.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!("save_rgb needs 3 channels, got {c}")));
    }
    let d = rgb.data();
    let mut bytes = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for ch in 0..3 {
            bytes.push(to_u8(d[ch * h * w + p]));
        }
    }
    write_bytes(path, &bytes, w, h, ExtendedColorType::Rgb8)
}

/// Writes a binary `(1, H, W)` mask as 8-bit grayscale, 255 for shadow.
pub fn save_mask(path: &Path, mask: &Tensor) -> Result<()> {
    let (c, h, w) = mask.dims3()?;
    if c != 1 {
        return Err(Error::shape(format!("save_mask needs 1 channel, got {c}")));
    }
    let bytes: Vec<u8> = mask
        .data()
        .iter()
        .map(|&v| if v >= 0.5 { 255 } else { 0 })
        .collect();
    write_bytes(path, &bytes, w, h, ExtendedColorType::L8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_all_white() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.ppm");
        let mut bytes = b"P6\n4 4\n255\n".to_vec();
        bytes.extend(std::iter::repeat_n(255u8, 48));
        std::fs::write(&p, bytes).unwrap();
        let t = load_rgb(&p).unwrap();
        assert_eq!(t.shape(), &[3, 4, 4]);
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mask_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let mut bytes = b"P5\n4 1\n255\n".to_vec();
        bytes.extend([255u8, 0, 128, 127]);
        std::fs::write(&p, bytes).unwrap();
        assert_eq!(load_mask(&p).unwrap().data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("i.png");
        let mask = dir.path().join("m.png");
        save_rgb(&img, &Tensor::zeros(vec![3, 100, 80])).unwrap();
        save_mask(&mask, &Tensor::zeros(vec![1, 100, 81])).unwrap();
        let err = load_sample(&img, &mask).unwrap_err();
        assert!(err.to_string().contains("100x81"), "{err}");
    }

    #[test]
    fn unsupported_format() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        std::fs::write(&p, b"definitely not an image").unwrap();
        assert!(matches!(load_rgb(&p), Err(Error::Image { .. })));
        assert!(save_rgb(&dir.path().join("x.bmp"), &Tensor::zeros(vec![3, 2, 2])).is_err());
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = Tensor::from_fn(vec![3, 5, 7], |i| ((i * 37) % 256) as f32 / 255.0);
        let mask = Tensor::from_fn(vec![1, 5, 7], |i| (i % 3 == 0) as u8 as f32);
        for (ie, me) in [("png", "png"), ("ppm", "pgm")] {
            let ip = dir.path().join(format!("s.{ie}"));
            let mp = dir.path().join(format!("s_gt.{me}"));
            save_rgb(&ip, &rgb).unwrap();
            save_mask(&mp, &mask).unwrap();
            let s = load_sample(&ip, &mp).unwrap();
            assert_eq!(s.rgb, rgb);
            assert_eq!(s.mask, mask);
            assert_eq!(s.source_id, "s");
        }
    }
}
