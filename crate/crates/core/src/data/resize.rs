use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Source coordinate and interpolation weight for every output index, using
/// half-pixel centers: `src = (i + 0.5) * in / out - 0.5`, clamped.
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of a `(C, H, W)` tensor. Output values stay within the
/// range of the input.
pub fn resize_bilinear<T: Scalar>(t: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = t.dims3()?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot resize {h}x{w} to {out_h}x{out_w}"
        )));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(t.clone());
    }
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let src = t.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let at = |y: usize, x: usize| plane[y * w + x].to_f64().unwrap_or(0.0);
                let (a, b, c2, d) = (at(y0, x0), at(y0, x1), at(y1, x0), at(y1, x1));
                let top = a + (b - a) * fx;
                let bottom = c2 + (d - c2) * fx;
                let v = top + (bottom - top) * fy;
                let lo = a.min(b).min(c2).min(d);
                let hi = a.max(b).max(c2).max(d);
                out.push(T::from_f64_lossy(v.clamp(lo, hi)));
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Bilinear resize followed by binarization at 0.5.
pub fn resize_mask<T: Scalar>(mask: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let half = T::from_f64_lossy(0.5);
    Ok(resize_bilinear(mask, out_h, out_w)?.map(|v| if v >= half { T::one() } else { T::zero() }))
}
