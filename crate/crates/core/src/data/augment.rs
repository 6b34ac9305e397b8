use rand::Rng;

use super::{resize_bilinear, resize_mask, ImageSample};
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::Tensor;

pub const MAX_ROTATION_DEG: f64 = 20.0;
pub const ZOOM_RANGE: (f64, f64) = (1.2, 2.5);
pub const FLIP_PROBABILITY: f64 = 0.5;
pub const ZOOM_PROBABILITY: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip_h: bool,
    /// Counter-clockwise, in `[-20, 20]`.
    pub rotation_deg: f64,
    /// Magnification in `[1.2, 2.5]`; only used when `apply_zoom`.
    pub zoom_scale: f64,
    pub apply_zoom: bool,
    /// Seed the parameters were drawn from.
    pub rng_seed: u64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            flip_h: false,
            rotation_deg: 0.0,
            zoom_scale: 1.0,
            apply_zoom: false,
            rng_seed: 0,
        }
    }

    /// Draws parameters for one sample of one epoch.
    pub fn sample(global_seed: u64, epoch: u64, index: u64) -> Self {
        let rng_seed = crate::rng::mix_seed(&[global_seed, epoch, index]);
        let mut rng = rng_from(&[rng_seed]);
        Self {
            flip_h: rng.random_bool(FLIP_PROBABILITY),
            rotation_deg: rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
            apply_zoom: rng.random_bool(ZOOM_PROBABILITY),
            zoom_scale: rng.random_range(ZOOM_RANGE.0..=ZOOM_RANGE.1),
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG).contains(&self.rotation_deg) {
            return Err(Error::InvalidArgument(format!(
                "rotation {} outside [-20, 20]",
                self.rotation_deg
            )));
        }
        if self.apply_zoom && !(ZOOM_RANGE.0..=ZOOM_RANGE.1).contains(&self.zoom_scale) {
            return Err(Error::InvalidArgument(format!(
                "zoom scale {} outside [1.2, 2.5]",
                self.zoom_scale
            )));
        }
        Ok(())
    }
}

/// Applies flip, rotation about the center and center zoom, in that order,
/// identically to image and mask.
pub fn augment(sample: &ImageSample, params: &AugmentParams) -> Result<ImageSample> {
    params.validate()?;
    let mut rgb = sample.rgb.clone();
    let mut mask = sample.mask.clone();
    if params.flip_h {
        rgb = flip_h(&rgb)?;
        mask = flip_h(&mask)?;
    }
    if params.rotation_deg != 0.0 {
        rgb = rotate_bilinear(&rgb, params.rotation_deg)?;
        mask = rotate_mask_nearest(&mask, params.rotation_deg)?;
    }
    if params.apply_zoom {
        let (_, h, w) = rgb.dims3()?;
        rgb = resize_bilinear(&center_crop(&rgb, params.zoom_scale)?, h, w)?;
        mask = resize_mask(&center_crop(&mask, params.zoom_scale)?, h, w)?;
    }
    Ok(ImageSample {
        rgb,
        mask,
        original_size: sample.original_size,
        source_id: sample.source_id.clone(),
    })
}

fn flip_h(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    let d = t.data();
    let mut out = Vec::with_capacity(d.len());
    for row in 0..c * h {
        out.extend(d[row * w..(row + 1) * w].iter().rev());
    }
    Tensor::new(vec![c, h, w], out)
}

/// Inverse mapping from an output pixel to its source location.
fn rotation_source(h: usize, w: usize, deg: f64) -> impl Fn(usize, usize) -> (f64, f64) {
    let (s, c) = deg.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    move |y, x| {
        let dy = y as f64 - cy;
        let dx = x as f64 - cx;
        (cy + s * dx + c * dy, cx + c * dx - s * dy)
    }
}

/// Bilinear rotation; samples outside the image take the nearest edge value.
fn rotate_bilinear(t: &Tensor, deg: f64) -> Result<Tensor> {
    let (ch, h, w) = t.dims3()?;
    let src = rotation_source(h, w, deg);
    let d = t.data();
    let mut out = vec![0.0f32; d.len()];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y, x);
            let sy = sy.clamp(0.0, (h - 1) as f64);
            let sx = sx.clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            for c in 0..ch {
                let p = &d[c * h * w..(c + 1) * h * w];
                let at = |yy: usize, xx: usize| f64::from(p[yy * w + xx]);
                let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * fx;
                let bottom = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * fx;
                out[c * h * w + y * w + x] = (top + (bottom - top) * fy).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::new(vec![ch, h, w], out)
}

/// Nearest-neighbour rotation; samples outside the image are 0.
pub fn rotate_mask_nearest(t: &Tensor, deg: f64) -> Result<Tensor> {
    let (ch, h, w) = t.dims3()?;
    let src = rotation_source(h, w, deg);
    let d = t.data();
    let mut out = vec![0.0f32; d.len()];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y, x);
            let (ry, rx) = (sy.round(), sx.round());
            if ry < 0.0 || rx < 0.0 || ry > (h - 1) as f64 || rx > (w - 1) as f64 {
                continue;
            }
            let (ry, rx) = (ry as usize, rx as usize);
            for c in 0..ch {
                out[c * h * w + y * w + x] = d[c * h * w + ry * w + rx];
            }
        }
    }
    Tensor::new(vec![ch, h, w], out)
}

fn center_crop(t: &Tensor, scale: f64) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    let ch = ((h as f64 / scale).round() as usize).clamp(1, h);
    let cw = ((w as f64 / scale).round() as usize).clamp(1, w);
    let (oy, ox) = ((h - ch) / 2, (w - cw) / 2);
    let d = t.data();
    let mut out = Vec::with_capacity(c * ch * cw);
    for k in 0..c {
        for y in oy..oy + ch {
            let row = k * h * w + y * w;
            out.extend_from_slice(&d[row + ox..row + ox + cw]);
        }
    }
    Tensor::new(vec![c, ch, cw], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_sample(seed: u64, h: usize, w: usize) -> ImageSample {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let rgb = Tensor::from_fn(vec![3, h, w], |_| rng.random::<f32>());
        let mask = Tensor::from_fn(vec![1, h, w], |_| rng.random_bool(0.3) as u8 as f32);
        ImageSample::new(rgb, mask, "r").unwrap()
    }

    fn disk(n: usize, r: f64) -> Tensor {
        let c = (n as f64 - 1.0) / 2.0;
        Tensor::from_fn(vec![1, n, n], |i| {
            let (y, x) = ((i / n) as f64, (i % n) as f64);
            (((y - c).powi(2) + (x - c).powi(2)).sqrt() <= r) as u8 as f32
        })
    }

    fn iou(a: &Tensor, b: &Tensor) -> f64 {
        let inter = a.data().iter().zip(b.data()).filter(|(x, y)| **x == 1.0 && **y == 1.0).count();
        let union = a.data().iter().zip(b.data()).filter(|(x, y)| **x == 1.0 || **y == 1.0).count();
        inter as f64 / union as f64
    }

    #[test]
    fn identity_params() {
        let s = random_sample(1, 12, 9);
        assert_eq!(augment(&s, &AugmentParams::identity()).unwrap(), s);
    }

    #[test]
    fn double_flip() {
        let s = random_sample(2, 8, 11);
        let p = AugmentParams {
            flip_h: true,
            ..AugmentParams::identity()
        };
        let once = augment(&s, &p).unwrap();
        assert_ne!(once.rgb, s.rgb);
        assert_eq!(augment(&once, &p).unwrap(), s);
    }

    #[test]
    fn rotated_disk_overlaps() {
        let m = disk(96, 30.0);
        let r = rotate_mask_nearest(&m, 10.0).unwrap();
        assert!(iou(&m, &r) >= 0.95, "iou {}", iou(&m, &r));
    }

    #[test]
    fn rotation_direction() {
        // A pixel right of center moves up under a counter-clockwise turn.
        let mut m = Tensor::zeros(vec![1, 5, 5]);
        m.data_mut()[2 * 5 + 4] = 1.0;
        let r = rotate_mask_nearest(&m, 20.0).unwrap();
        let idx = r.data().iter().position(|&v| v == 1.0).unwrap();
        assert!(idx / 5 < 2, "moved to row {}", idx / 5);
    }

    #[test]
    fn zoom_magnifies_center() {
        let m = disk(64, 10.0);
        let s = ImageSample::new(Tensor::zeros(vec![3, 64, 64]), m.clone(), "d").unwrap();
        let p = AugmentParams {
            apply_zoom: true,
            zoom_scale: 2.0,
            ..AugmentParams::identity()
        };
        let z = augment(&s, &p).unwrap();
        let before = m.sum();
        let after = z.mask.sum();
        assert!((after / before - 4.0).abs() < 0.3, "area ratio {}", after / before);
    }

    #[test]
    fn outputs_stay_valid() {
        for i in 0..40 {
            let s = random_sample(i, 32, 24);
            let p = AugmentParams::sample(9, 3, i);
            p.validate().unwrap();
            let a = augment(&s, &p).unwrap();
            assert_eq!(a.rgb.shape(), s.rgb.shape());
            assert_eq!(a.mask.shape(), s.mask.shape());
            assert!(a.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(a.rgb.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn sampling_is_seeded() {
        assert_eq!(AugmentParams::sample(1, 2, 3), AugmentParams::sample(1, 2, 3));
        assert_ne!(AugmentParams::sample(1, 2, 3), AugmentParams::sample(1, 2, 4));
        let draws: Vec<_> = (0..2000).map(|i| AugmentParams::sample(5, 0, i)).collect();
        let flips = draws.iter().filter(|p| p.flip_h).count() as f64 / 2000.0;
        let zooms = draws.iter().filter(|p| p.apply_zoom).count() as f64 / 2000.0;
        assert!((flips - 0.5).abs() < 0.05 && (zooms - 0.5).abs() < 0.05);
    }

    #[test]
    fn rejects_out_of_range() {
        let s = random_sample(3, 4, 4);
        let p = AugmentParams {
            rotation_deg: 25.0,
            ..AugmentParams::identity()
        };
        assert!(augment(&s, &p).is_err());
    }
}
