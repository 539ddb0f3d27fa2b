//! Converts raw backbone feature maps into `[C,H,W]` spatial maps.
//!
//! CNN maps pass through unchanged. A ViT token matrix `[N+1, D]` loses its
//! class token (row 0), is transposed to `[D, N]` and folded into
//! `[D, √N, √N]`, patch `k` landing at row `k / √N`, column `k % √N`. This
//! is the inverse of the row-major patch flattening the ViT applies to its
//! input.

use crate::backbone::FeatureKind;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

fn grid_side(tokens: usize) -> Result<usize> {
    let n = tokens.checked_sub(1).ok_or_else(|| Error::Shape("token matrix has no rows".into()))?;
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n || n == 0 {
        return Err(Error::Shape(format!("{n} patch tokens do not form a square grid")));
    }
    Ok(side)
}

/// Adapts one feature map of a single image.
pub fn adapt(map: &Tensor, kind: FeatureKind) -> Result<Tensor> {
    match kind {
        FeatureKind::Cnn => {
            if map.ndim() != 3 {
                return Err(Error::Shape(format!("CNN feature map must be [C,H,W], got {:?}", map.shape())));
            }
            Ok(map.clone())
        }
        FeatureKind::Vit => {
            if map.ndim() != 2 {
                return Err(Error::Shape(format!("ViT feature map must be [N+1,D], got {:?}", map.shape())));
            }
            let (t, d) = (map.shape()[0], map.shape()[1]);
            let side = grid_side(t)?;
            let src = map.data();
            let mut out = vec![0.0; d * (t - 1)];
            for k in 0..t - 1 {
                for c in 0..d {
                    out[c * (t - 1) + k] = src[(k + 1) * d + c];
                }
            }
            Tensor::new([d, side, side], out)
        }
    }
}

/// Inverse of [`adapt`] for ViT maps: flattens `[D,S,S]` into `[S²+1, D]`
/// with a zero class token in row 0.
pub fn flatten_tokens(x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 3 || x.shape()[1] != x.shape()[2] {
        return Err(Error::Shape(format!("expected a square [D,S,S] map, got {:?}", x.shape())));
    }
    let (d, n) = (x.shape()[0], x.shape()[1] * x.shape()[2]);
    let src = x.data();
    let mut out = vec![0.0; (n + 1) * d];
    for k in 0..n {
        for c in 0..d {
            out[(k + 1) * d + c] = src[c * n + k];
        }
    }
    Tensor::new([n + 1, d], out)
}

/// Batched, differentiable [`adapt`]: `[B,C,H,W]` passes through,
/// `[B,N+1,D]` becomes `[B,D,√N,√N]`.
pub fn adapt_var(tape: &mut Tape, map: Var, kind: FeatureKind) -> Result<Var> {
    let s = tape.shape(map).to_vec();
    match kind {
        FeatureKind::Cnn if s.len() == 4 => Ok(map),
        FeatureKind::Vit if s.len() == 3 => {
            let (b, t, d) = (s[0], s[1], s[2]);
            let side = grid_side(t)?;
            let patches = tape.slice(map, 1, 1, t);
            let channels_first = tape.permute(patches, &[0, 2, 1]);
            Ok(tape.reshape(channels_first, &[b, d, side, side]))
        }
        _ => Err(Error::Shape(format!("batched {kind:?} feature map has shape {s:?}"))),
    }
}
