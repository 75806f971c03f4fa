//! Temporal shift over a `[T × C × H × W]` tensor.
//!
//! The first `fold = ⌊fraction·C⌋` channels take their values from the next
//! time slice, the following `fold` channels from the previous one, the rest
//! stay in place. Vacated boundary slices are zero-filled.

use ndarray::{s, Array4, ArrayView4};

pub fn fold_size(channels: usize, shift_fraction: f64) -> usize {
    (shift_fraction * channels as f64).floor() as usize
}

fn shift_impl(x: ArrayView4<f64>, shift_fraction: f64, adjoint: bool) -> Array4<f64> {
    let (t, c, _, _) = x.dim();
    let fold = fold_size(c, shift_fraction).min(c / 2);
    let mut out = Array4::zeros(x.raw_dim());
    if t == 0 {
        return out;
    }
    // block reading from t+1 (the adjoint reads from t-1), and vice versa
    let (lead, lag) = if adjoint {
        (s![1.., ..fold, .., ..], s![..t - 1, ..fold, .., ..])
    } else {
        (s![..t - 1, ..fold, .., ..], s![1.., ..fold, .., ..])
    };
    out.slice_mut(lead).assign(&x.slice(lag));
    let (lead, lag) = if adjoint {
        (s![..t - 1, fold..2 * fold, .., ..], s![1.., fold..2 * fold, .., ..])
    } else {
        (s![1.., fold..2 * fold, .., ..], s![..t - 1, fold..2 * fold, .., ..])
    };
    out.slice_mut(lead).assign(&x.slice(lag));
    out.slice_mut(s![.., 2 * fold.., .., ..])
        .assign(&x.slice(s![.., 2 * fold.., .., ..]));
    out
}

pub fn temporal_shift(x: ArrayView4<f64>, shift_fraction: f64) -> Array4<f64> {
    shift_impl(x, shift_fraction, false)
}

/// Transpose of [`temporal_shift`]; maps output gradients to input gradients.
pub fn temporal_shift_adjoint(grad: ArrayView4<f64>, shift_fraction: f64) -> Array4<f64> {
    shift_impl(grad, shift_fraction, true)
}
