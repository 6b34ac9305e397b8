//! Multi-scale prediction and mask ensembling.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::{load_manifest, load_mask, load_rgb, resize_bilinear, save_mask, ManifestEntry};
use crate::error::{Error, Result};
use crate::metrics::{binarize, ConfusionCounts, EvalReport, DEFAULT_THRESHOLD};
use crate::model::{CpnetModel, SIZE_MULTIPLE};
use crate::tensor::Tensor;

pub const DEFAULT_SCALES: [usize; 4] = [192, 256, 384, 480];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnsembleMode {
    /// Binarize each scale's map, then take the pixel-wise OR.
    OrOfMasks,
    /// Average the maps, then binarize.
    ThresholdOfMean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleConfig {
    pub scales: Vec<usize>,
    pub mode: EnsembleMode,
    pub threshold: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            scales: DEFAULT_SCALES.to_vec(),
            mode: EnsembleMode::OrOfMasks,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::InvalidArgument("at least one scale is required".into()));
        }
        for &s in &self.scales {
            check_scale(s)?;
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidArgument(format!(
                "threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        Ok(())
    }
}

fn check_scale(scale: usize) -> Result<()> {
    if scale == 0 || !scale.is_multiple_of(SIZE_MULTIPLE) {
        return Err(Error::InvalidArgument(format!(
            "scale {scale} is not a positive multiple of 32"
        )));
    }
    Ok(())
}

/// Probability map `(1, H, W)` for a `(3, H, W)` image evaluated at
/// `scale x scale`.
pub fn predict_single_scale(model: &CpnetModel, rgb: &Tensor, scale: usize) -> Result<Tensor> {
    check_scale(scale)?;
    let (_, h, w) = rgb.dims3()?;
    let x = resize_bilinear(rgb, scale, scale)?.reshape(vec![1, 3, scale, scale])?;
    let y = model.predict(&x)?.reshape(vec![1, scale, scale])?;
    resize_bilinear(&y, h, w)
}

/// One probability map per scale, in the order given.
pub fn predict_scales(model: &CpnetModel, rgb: &Tensor, scales: &[usize]) -> Result<Vec<Tensor>> {
    scales.iter().map(|&s| predict_single_scale(model, rgb, s)).collect()
}

/// Combines probability maps into one binary mask.
pub fn combine_maps(maps: &[Tensor], mode: EnsembleMode, threshold: f64) -> Result<Tensor> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidArgument("no maps to combine".into()))?;
    if let Some(m) = maps.iter().find(|m| m.shape() != first.shape()) {
        return Err(Error::shape(format!(
            "cannot combine maps {:?} and {:?}",
            first.shape(),
            m.shape()
        )));
    }
    let mut out = vec![0.0f32; first.numel()];
    match mode {
        EnsembleMode::OrOfMasks => {
            for m in maps {
                let b = binarize(m, threshold);
                for (o, &v) in out.iter_mut().zip(b.data()) {
                    *o = o.max(v);
                }
            }
        }
        EnsembleMode::ThresholdOfMean => {
            let mut acc = vec![0.0f64; first.numel()];
            for m in maps {
                for (a, &v) in acc.iter_mut().zip(m.data()) {
                    *a += f64::from(v);
                }
            }
            let n = maps.len() as f64;
            for (o, a) in out.iter_mut().zip(acc) {
                *o = if a / n >= threshold { 1.0 } else { 0.0 };
            }
        }
    }
    Tensor::new(first.shape().to_vec(), out)
}

/// Binary shadow mask `(1, H, W)` from the multi-scale ensemble.
pub fn predict_ensemble(model: &CpnetModel, rgb: &Tensor, config: &EnsembleConfig) -> Result<Tensor> {
    config.validate()?;
    combine_maps(&predict_scales(model, rgb, &config.scales)?, config.mode, config.threshold)
}

/// Name of the prediction written for a manifest entry.
pub fn mask_file_name(entry: &ManifestEntry) -> String {
    format!("{}_mask.png", entry.stem())
}

#[derive(Debug)]
pub struct BatchOutcome {
    pub written: Vec<PathBuf>,
    /// Images that could not be processed, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
    /// `None` when no manifest entry has a ground-truth mask.
    pub report: Option<EvalReport>,
}

/// Predicts every manifest image, writes `<stem>_mask.png` files to `out_dir`
/// and evaluates against the ground truth where available.
pub fn predict_batch(
    model: &CpnetModel,
    manifest: &Path,
    config: &EnsembleConfig,
    out_dir: &Path,
) -> Result<BatchOutcome> {
    config.validate()?;
    let entries = load_manifest(manifest)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let results: Vec<Result<(PathBuf, Option<ConfusionCounts>)>> = entries
        .par_iter()
        .map(|e| {
            let rgb = load_rgb(&e.image)?;
            let truth = e.mask.as_deref().map(load_mask).transpose()?;
            let mask = predict_ensemble(model, &rgb, config)?;
            let path = out_dir.join(mask_file_name(e));
            save_mask(&path, &mask)?;
            let counts = truth
                .map(|t| ConfusionCounts::default().accumulate(&mask, &t))
                .transpose()?;
            Ok((path, counts))
        })
        .collect();
    let mut outcome = BatchOutcome {
        written: Vec::new(),
        skipped: Vec::new(),
        report: None,
    };
    let mut total: Option<ConfusionCounts> = None;
    for (e, r) in entries.iter().zip(results) {
        match r {
            Ok((path, counts)) => {
                outcome.written.push(path);
                if let Some(c) = counts {
                    total = Some(total.unwrap_or_default().merge(c));
                }
            }
            Err(err) => {
                eprintln!("warning: skipping {}: {err}", e.image.display());
                outcome.skipped.push((e.image.clone(), err.to_string()));
            }
        }
    }
    outcome.report = total.map(|c| c.report());
    Ok(outcome)
}

/// Recomputes the report from masks previously written by [`predict_batch`].
pub fn evaluate_predictions(pred_dir: &Path, manifest: &Path) -> Result<EvalReport> {
    let mut total = ConfusionCounts::default();
    let mut any = false;
    for e in load_manifest(manifest)? {
        let Some(truth_path) = &e.mask else { continue };
        let truth = load_mask(truth_path)?;
        let pred = load_mask(&pred_dir.join(mask_file_name(&e)))?;
        total = total.accumulate(&pred, &truth)?;
        any = true;
    }
    if !any {
        return Err(Error::InvalidArgument(format!(
            "{}: no ground truth masks to evaluate against",
            manifest.display()
        )));
    }
    Ok(total.report())
}
