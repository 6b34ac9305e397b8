//! Synthetic shadow scenes: a smooth background, a few bright convex objects
//! and darkened polygonal shadow regions whose union is the mask.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{save_mask, save_rgb, write_manifest, ImageSample, ManifestEntry};
use crate::error::{Error, Result};
use crate::model::SIZE_MULTIPLE;
use crate::rng::rng_from;
use crate::tensor::Tensor;

const SHADOW_FRACTION: (f64, f64) = (0.02, 0.6);
const SHADOW_FACTOR: (f64, f64) = (0.3, 0.7);
const NOISE: f64 = 0.02;
const MAX_ATTEMPTS: usize = 1000;

type Polygon = Vec<(f64, f64)>;

/// Convex polygon with vertices on an axis-aligned ellipse.
fn random_polygon(rng: &mut ChaCha8Rng, h: f64, w: f64, radius: (f64, f64)) -> Polygon {
    let cy = rng.random_range(0.1..0.9) * h;
    let cx = rng.random_range(0.1..0.9) * w;
    let ry = rng.random_range(radius.0..radius.1) * h;
    let rx = rng.random_range(radius.0..radius.1) * w;
    let n = rng.random_range(3..=8);
    let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..TAU)).collect();
    angles.sort_by(f64::total_cmp);
    angles.iter().map(|a| (cy + ry * a.sin(), cx + rx * a.cos())).collect()
}

/// Point-in-polygon for counter-clockwise (in `(y, x)` with angles
/// increasing) convex vertex lists.
fn contains(poly: &Polygon, y: f64, x: f64) -> bool {
    let n = poly.len();
    let mut sign = 0.0f64;
    for i in 0..n {
        let (ay, ax) = poly[i];
        let (by, bx) = poly[(i + 1) % n];
        let cross = (bx - ax) * (y - ay) - (by - ay) * (x - ax);
        if cross != 0.0 {
            if sign == 0.0 {
                sign = cross.signum();
            } else if cross.signum() != sign {
                return false;
            }
        }
    }
    true
}

fn luminance(rgb: &[f32], plane: usize, p: usize) -> f64 {
    0.299 * f64::from(rgb[p]) + 0.587 * f64::from(rgb[plane + p]) + 0.114 * f64::from(rgb[2 * plane + p])
}

fn scene(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Vec<f32>, Vec<f32>) {
    let (hf, wf) = (h as f64, w as f64);
    let plane = h * w;
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.35..0.75));
    let amp = rng.random_range(0.05..0.2);
    let dir = rng.random_range(0.0..TAU);
    let (ds, dc) = dir.sin_cos();
    let mut rgb = vec![0.0f64; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let g = amp * ((x as f64 / wf - 0.5) * dc + (y as f64 / hf - 0.5) * ds);
            for c in 0..3 {
                rgb[c * plane + y * w + x] = base[c] + g;
            }
        }
    }
    for _ in 0..rng.random_range(1..=4) {
        let poly = random_polygon(rng, hf, wf, (0.08, 0.25));
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.6..0.95));
        fill(&poly, h, w, |p| {
            for c in 0..3 {
                rgb[c * plane + p] = color[c];
            }
        });
    }
    let mut mask = vec![0.0f32; plane];
    for _ in 0..rng.random_range(1..=3) {
        let poly = random_polygon(rng, hf, wf, (0.1, 0.3));
        let factor = rng.random_range(SHADOW_FACTOR.0..=SHADOW_FACTOR.1);
        fill(&poly, h, w, |p| {
            if mask[p] == 0.0 {
                mask[p] = 1.0;
                for c in 0..3 {
                    rgb[c * plane + p] *= factor;
                }
            }
        });
    }
    let rgb = rgb
        .into_iter()
        .map(|v| {
            // quantized to 8 bits so that written files load back exactly
            let q = ((v + rng.random_range(-NOISE..NOISE)).clamp(0.0, 1.0) * 255.0).round();
            q as f32 / 255.0
        })
        .collect();
    (rgb, mask)
}

fn fill(poly: &Polygon, h: usize, w: usize, mut f: impl FnMut(usize)) {
    for y in 0..h {
        for x in 0..w {
            if contains(poly, y as f64 + 0.5, x as f64 + 0.5) {
                f(y * w + x);
            }
        }
    }
}

fn acceptable(rgb: &[f32], mask: &[f32]) -> bool {
    let plane = mask.len();
    let shadow = mask.iter().filter(|&&m| m == 1.0).count();
    let frac = shadow as f64 / plane as f64;
    if !(frac > SHADOW_FRACTION.0 && frac < SHADOW_FRACTION.1) {
        return false;
    }
    let (mut lin, mut lout) = (0.0, 0.0);
    for (p, &m) in mask.iter().enumerate() {
        if m == 1.0 {
            lin += luminance(rgb, plane, p);
        } else {
            lout += luminance(rgb, plane, p);
        }
    }
    lin / (shadow as f64) < lout / ((plane - shadow) as f64)
}

/// Generates `count` scenes of size `h x w`. Scene `i` depends only on
/// `(seed, i)`.
pub fn synth_generate(seed: u64, count: usize, size: (usize, usize)) -> Result<Vec<ImageSample>> {
    let (h, w) = size;
    if count == 0 {
        return Err(Error::InvalidArgument("count must be at least 1".into()));
    }
    if h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
        return Err(Error::InvalidArgument(format!(
            "scene size must be divisible by 32, got {h}x{w}"
        )));
    }
    (0..count)
        .map(|i| {
            let mut rng = rng_from(&[seed, i as u64]);
            for _ in 0..MAX_ATTEMPTS {
                let (rgb, mask) = scene(&mut rng, h, w);
                if acceptable(&rgb, &mask) {
                    return ImageSample::new(
                        Tensor::new(vec![3, h, w], rgb)?,
                        Tensor::new(vec![1, h, w], mask)?,
                        format!("scene_{i:04}"),
                    );
                }
            }
            Err(Error::InvalidArgument(format!("could not generate scene {i}")))
        })
        .collect()
}

/// Writes `<id>.png` images, `<id>_gt.pgm` masks and a manifest listing them.
pub fn write_dataset(samples: &[ImageSample], dir: &Path, manifest_name: &str) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let image = dir.join(format!("{}.png", s.source_id));
        let mask = dir.join(format!("{}_gt.pgm", s.source_id));
        save_rgb(&image, &s.rgb)?;
        save_mask(&mask, &s.mask)?;
        entries.push(ManifestEntry {
            image,
            mask: Some(mask),
        });
    }
    write_manifest(&dir.join(manifest_name), &entries)?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let a = synth_generate(7, 3, (32, 64)).unwrap();
        let b = synth_generate(7, 3, (32, 64)).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(8, 3, (32, 64)).unwrap();
        assert_ne!(a[0].rgb, c[0].rgb);
        // prefix stability
        assert_eq!(synth_generate(7, 1, (32, 64)).unwrap()[0], a[0]);
    }

    #[test]
    fn scene_properties() {
        let samples = synth_generate(11, 100, (64, 64)).unwrap();
        for s in &samples {
            let m = s.mask.data();
            let frac = s.mask.sum() as f64 / m.len() as f64;
            assert!(frac > 0.02 && frac < 0.6, "fraction {frac}");
            assert!(m.iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(s.rgb.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(acceptable(s.rgb.data(), m));
        }
    }

    #[test]
    fn convex_containment() {
        let square: Polygon = vec![(0.0, 0.0), (0.0, 2.0), (2.0, 2.0), (2.0, 0.0)];
        assert!(contains(&square, 1.0, 1.0));
        assert!(!contains(&square, 3.0, 1.0));
        let rev: Polygon = square.iter().rev().copied().collect();
        assert!(contains(&rev, 1.0, 1.0));
    }

    #[test]
    fn bad_sizes() {
        assert!(synth_generate(1, 1, (30, 32)).is_err());
        assert!(synth_generate(1, 0, (32, 32)).is_err());
    }

    #[test]
    fn dataset_files() {
        let dir = tempfile::tempdir().unwrap();
        let samples = synth_generate(1, 2, (32, 32)).unwrap();
        let entries = write_dataset(&samples, dir.path(), "manifest.tsv").unwrap();
        assert_eq!(entries.len(), 2);
        let loaded = super::super::load_dataset(&dir.path().join("manifest.tsv")).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded, samples);
    }
}
