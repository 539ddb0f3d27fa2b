//! Dense tensors, the differentiable op inventory and a few value-level
//! helpers that do not need a tape.

mod kernels;
mod tape;
mod value;

pub use tape::{sigmoid, softmax_in_place, BatchStats, Tape, Var, BATCH_NORM_EPS, LAYER_NORM_EPS};
pub use value::Tensor;

use crate::error::{invalid, Result};

/// Denominator guard for min-max scaling.
pub const MINMAX_EPS: f64 = 1e-8;

/// Corner-aligned bilinear resize of the last two axes.
pub fn bilinear_resize(t: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    if height == 0 || width == 0 {
        return Err(invalid(format!("resize target {height}x{width} is empty")));
    }
    if t.ndim() < 2 {
        return Err(invalid("resize needs at least two axes"));
    }
    let r = t.ndim();
    if t.shape()[r - 2] == height && t.shape()[r - 1] == width {
        return Ok(t.clone());
    }
    let mut tape = Tape::new();
    let x = tape.constant(t.clone());
    let y = tape.resize(x, height, width);
    Ok(tape.value(y).clone())
}

/// Per-channel `(t − mean[c]) / std[c]` on `[C,H,W]` or `[N,C,H,W]`.
///
/// Computed as a product with `1 / std[c]`, bit-identical to
/// [`Tape::standardize`].
pub fn standardize(t: &Tensor, mean: &[f64], std: &[f64]) -> Result<Tensor> {
    if let Some(s) = std.iter().find(|s| !(**s > 0.0)) {
        return Err(invalid(format!("standard deviation must be positive, got {s}")));
    }
    let axis = match t.ndim() {
        3 => 0,
        4 => 1,
        n => return Err(invalid(format!("standardize expects rank 3 or 4, got {n}"))),
    };
    let c = t.shape()[axis];
    if mean.len() != c || std.len() != c {
        return Err(invalid(format!("{c} channels but {} statistics", mean.len())));
    }
    let plane: usize = t.shape()[axis + 1..].iter().product();
    let mut out = t.clone();
    for (i, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
        let ch = i % c;
        let inv = 1.0 / std[ch];
        chunk.iter_mut().for_each(|v| *v = (*v - mean[ch]) * inv);
    }
    Ok(out)
}

/// `(t − min) / (max − min + ε)`; all zeros when the range is below ε.
pub fn minmax_normalize(t: &Tensor) -> Tensor {
    let (lo, hi) = (t.min(), t.max());
    if !(hi - lo >= MINMAX_EPS) {
        return Tensor::zeros(t.shape().to_vec());
    }
    t.map(|v| ((v - lo) / (hi - lo + MINMAX_EPS)).clamp(0.0, 1.0))
}

/// Central finite-difference gradient of a scalar function.
pub fn numeric_grad(x: &Tensor, step: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Max-norm relative error `‖a − b‖∞ / max(‖b‖∞, floor)`.
pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    let scale = numeric.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(floor);
    analytic.max_abs_diff(numeric) / scale
}

#[cfg(test)]
mod tests;
