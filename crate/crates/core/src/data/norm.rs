use crate::error::Result;
use crate::tensor::Tensor;

/// Default window: 3 s at a 10 ms frame shift.
pub const DEFAULT_MEAN_NORM_WINDOW: usize = 300;

/// Frames `[lo, hi)` covered by a centred window of `window` frames around
/// `t`, clipped to the sequence. Even windows reach one frame further right.
pub fn window_bounds(t: usize, frames: usize, window: usize) -> (usize, usize) {
    let left = (window.max(1) - 1) / 2;
    let right = window.max(1) / 2;
    (t.saturating_sub(left), (t + right + 1).min(frames))
}

/// Subtracts from every frame the per-channel mean of the centred window
/// around it, clipped (not padded) at the edges.
pub fn sliding_mean_norm(x: &Tensor, window: usize) -> Result<Tensor> {
    let (channels, frames) = x.dims2()?;
    let mut out = vec![0.0; channels * frames];
    let mut prefix = vec![0.0; frames + 1];
    for c in 0..channels {
        let row = x.row(c);
        for (t, &v) in row.iter().enumerate() {
            prefix[t + 1] = prefix[t] + v;
        }
        for t in 0..frames {
            let (lo, hi) = window_bounds(t, frames, window);
            let mean = (prefix[hi] - prefix[lo]) / (hi - lo) as f64;
            out[c * frames + t] = row[t] - mean;
        }
    }
    Tensor::new(vec![channels, frames], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounds_are_centred_and_clipped() {
        assert_eq!(window_bounds(5, 10, 5), (3, 8));
        assert_eq!(window_bounds(0, 10, 5), (0, 3));
        assert_eq!(window_bounds(9, 10, 4), (8, 10));
        assert_eq!(window_bounds(4, 10, 1), (4, 5));
    }

    #[test]
    fn constant_input_becomes_zero() {
        let x = Tensor::full(&[2, 7], 3.5);
        let y = sliding_mean_norm(&x, 3).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
