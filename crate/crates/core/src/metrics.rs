//! Soft Jaccard training loss and BER / PER evaluation.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const JACCARD_EPS: f64 = 1e-7;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

const RANGE_TOLERANCE: f64 = 1e-6;

fn check_loss_inputs<T: Scalar>(truth: &Tensor<T>, pred: &Tensor<T>) -> Result<()> {
    if truth.shape() != pred.shape() {
        return Err(Error::shape(format!(
            "jaccard_loss: truth {:?} vs prediction {:?}",
            truth.shape(),
            pred.shape()
        )));
    }
    if let Some(v) = truth.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::InvalidArgument(format!(
            "jaccard_loss: ground truth must be binary, found {v:?}"
        )));
    }
    let tol = T::from_f64_lossy(RANGE_TOLERANCE);
    if let Some(v) = pred
        .data()
        .iter()
        .find(|&&v| !(v >= -tol && v <= T::one() + tol))
    {
        return Err(Error::InvalidArgument(format!(
            "jaccard_loss: prediction {v:?} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Soft Jaccard loss of a single image (all elements form one set):
/// `-(sum(t*y) + eps) / (sum(t) + sum(y) - sum(t*y) + eps)`, in `[-1, 0]`.
pub fn jaccard_loss<T: Scalar>(tape: &mut Tape<T>, truth: Var, pred: Var, eps: T) -> Result<Var> {
    check_loss_inputs(tape.value(truth)?, tape.value(pred)?)?;
    tape.jaccard(truth, pred, eps, 1)
}

/// Per-image soft Jaccard loss averaged over the leading batch axis.
pub fn batch_jaccard_loss<T: Scalar>(tape: &mut Tape<T>, truth: Var, pred: Var, eps: T) -> Result<Var> {
    let (t, y) = (tape.value(truth)?, tape.value(pred)?);
    check_loss_inputs(t, y)?;
    let groups = *t
        .shape()
        .first()
        .ok_or_else(|| Error::shape("batch_jaccard_loss needs a batch axis"))?;
    tape.jaccard(truth, pred, eps, groups)
}

/// Plain evaluation of the loss outside any graph.
pub fn jaccard_loss_value(truth: &[f64], pred: &[f64], eps: f64) -> f64 {
    let inter: f64 = truth.iter().zip(pred).map(|(t, y)| t * y).sum();
    let st: f64 = truth.iter().sum();
    let sy: f64 = pred.iter().sum();
    -(inter + eps) / (st + sy - inter + eps)
}

/// `1` where `y >= threshold`, else `0`.
pub fn binarize<T: Scalar>(y: &Tensor<T>, threshold: f64) -> Tensor<T> {
    let th = T::from_f64_lossy(threshold);
    y.map(|v| if v >= th { T::one() } else { T::zero() })
}

/// Pixel counts with shadow as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        Self { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            tp: self.tp + other.tp,
            tn: self.tn + other.tn,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
        }
    }

    /// Adds the counts of one binary prediction against its ground truth.
    pub fn accumulate<T: Scalar>(self, pred: &Tensor<T>, truth: &Tensor<T>) -> Result<Self> {
        if pred.shape() != truth.shape() {
            return Err(Error::shape(format!(
                "confusion: prediction {:?} vs truth {:?}",
                pred.shape(),
                truth.shape()
            )));
        }
        let mut acc = self;
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            let p = binary_value(p, "prediction")?;
            let t = binary_value(t, "truth")?;
            match (p, t) {
                (true, true) => acc.tp += 1,
                (false, false) => acc.tn += 1,
                (true, false) => acc.fp += 1,
                (false, true) => acc.fn_ += 1,
            }
        }
        Ok(acc)
    }

    pub fn report(&self) -> EvalReport {
        compute_ber(self)
    }
}

fn binary_value<T: Scalar>(v: T, what: &str) -> Result<bool> {
    if v == T::one() {
        Ok(true)
    } else if v == T::zero() {
        Ok(false)
    } else {
        Err(Error::InvalidArgument(format!("{what} is not binary: {v:?}")))
    }
}

pub fn accumulate_confusion<T: Scalar>(
    pred: &Tensor<T>,
    truth: &Tensor<T>,
    acc: ConfusionCounts,
) -> Result<ConfusionCounts> {
    acc.accumulate(pred, truth)
}

/// Balanced error rate and per-class error rates. A rate is `None` when its
/// class has no pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub ber: Option<f64>,
    pub per_shadow: Option<f64>,
    pub per_non_shadow: Option<f64>,
    pub counts: ConfusionCounts,
}

pub fn compute_ber(acc: &ConfusionCounts) -> EvalReport {
    let shadow = acc.tp + acc.fn_;
    let non_shadow = acc.tn + acc.fp;
    let per_shadow = (shadow > 0).then(|| acc.fn_ as f64 / shadow as f64);
    let per_non_shadow = (non_shadow > 0).then(|| acc.fp as f64 / non_shadow as f64);
    let ber = match (shadow > 0, non_shadow > 0) {
        (true, true) => Some(
            1.0 - 0.5 * (acc.tp as f64 / shadow as f64 + acc.tn as f64 / non_shadow as f64),
        ),
        _ => None,
    };
    EvalReport {
        ber,
        per_shadow,
        per_non_shadow,
        counts: *acc,
    }
}

impl EvalReport {
    /// Explains which quantities are undefined, if any.
    pub fn diagnostic(&self) -> Option<String> {
        let mut missing = Vec::new();
        if self.per_shadow.is_none() {
            missing.push("no shadow pixels in ground truth: shadow PER undefined");
        }
        if self.per_non_shadow.is_none() {
            missing.push("no non-shadow pixels in ground truth: non-shadow PER undefined");
        }
        (!missing.is_empty()).then(|| missing.join("; "))
    }

    /// Machine-readable `key=value` lines. Undefined rates print as `undefined`.
    pub fn to_key_value(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |v| format!("{v}"));
        format!(
            "ber={}\nper_shadow={}\nper_non_shadow={}\ntp={}\ntn={}\nfp={}\nfn={}\n",
            fmt(self.ber),
            fmt(self.per_shadow),
            fmt(self.per_non_shadow),
            self.counts.tp,
            self.counts.tn,
            self.counts.fp,
            self.counts.fn_
        )
    }

    pub fn from_key_value(text: &str) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("malformed report line `{line}`")))?;
            map.insert(k.trim(), v.trim());
        }
        let get = |k: &str| {
            map.get(k)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("report lacks `{k}`")))
        };
        let rate = |k: &str| -> Result<Option<f64>> {
            match get(k)? {
                "undefined" => Ok(None),
                v => v
                    .parse()
                    .map(Some)
                    .map_err(|_| Error::InvalidArgument(format!("bad value for `{k}`: {v}"))),
            }
        };
        let count = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad count for `{k}`")))
        };
        Ok(Self {
            ber: rate("ber")?,
            per_shadow: rate("per_shadow")?,
            per_non_shadow: rate("per_non_shadow")?,
            counts: ConfusionCounts::new(count("tp")?, count("tn")?, count("fp")?, count("fn")?),
        })
    }
}

/// Plain-text table with rates in percent.
impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |v| format!("{:.2}%", 100.0 * v));
        writeln!(f, "+----------------+------------+")?;
        writeln!(f, "| metric         | value      |")?;
        writeln!(f, "+----------------+------------+")?;
        writeln!(f, "| BER            | {:>10} |", pct(self.ber))?;
        writeln!(f, "| PER shadow     | {:>10} |", pct(self.per_shadow))?;
        writeln!(f, "| PER non-shadow | {:>10} |", pct(self.per_non_shadow))?;
        writeln!(f, "+----------------+------------+")?;
        write!(
            f,
            "TP={} TN={} FP={} FN={}",
            self.counts.tp, self.counts.tn, self.counts.fp, self.counts.fn_
        )?;
        if let Some(d) = self.diagnostic() {
            write!(f, "\n{d}")?;
        }
        Ok(())
    }
}

/// Per-image evaluation: BER averaged over images where both classes are
/// present, with the number of skipped images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PerImageSummary {
    pub mean_ber: Option<f64>,
    pub evaluated: usize,
    pub skipped: usize,
}

pub fn per_image_ber(per_image: &[ConfusionCounts]) -> PerImageSummary {
    let bers: Vec<f64> = per_image.iter().filter_map(|c| compute_ber(c).ber).collect();
    PerImageSummary {
        mean_ber: (!bers.is_empty()).then(|| bers.iter().sum::<f64>() / bers.len() as f64),
        evaluated: bers.len(),
        skipped: per_image.len() - bers.len(),
    }
}
