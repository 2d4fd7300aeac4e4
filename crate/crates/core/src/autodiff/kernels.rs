//! Raw loops behind the graph ops. All buffers are row-major.

use crate::autodiff::Segments;

/// `out[m×n] = a[m×k] · b[k×n]`.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += s * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`.
pub(crate) fn matmul_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let bp = &b[p * n..(p + 1) * n];
            out[i * k + p] += gi.iter().zip(bp).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`.
pub(crate) fn matmul_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let gi = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            for (o, &gv) in out[p * n..(p + 1) * n].iter_mut().zip(gi) {
                *o += s * gv;
            }
        }
    }
}

pub(crate) fn transpose(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub dilation: usize,
    pub frames: usize,
}

impl ConvGeom {
    /// For tap `tap`, the output frames `lo..hi` (segment-relative) that read
    /// an in-range input frame, and the signed input offset.
    #[inline]
    fn tap_range(&self, tap: usize, len: usize) -> (usize, usize, isize) {
        let pad = ((self.k - 1) * self.dilation / 2) as isize;
        let shift = (tap * self.dilation) as isize - pad;
        let lo = (-shift).max(0) as usize;
        let hi = (len as isize - shift).clamp(0, len as isize) as usize;
        (lo, hi.max(lo), shift)
    }
}

pub(crate) fn conv1d_forward(g: &ConvGeom, segs: &Segments, x: &[f64], w: &[f64], out: &mut [f64]) {
    let t = g.frames;
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            let xrow = &x[ci * t..(ci + 1) * t];
            for tap in 0..g.k {
                let wv = w[(co * g.c_in + ci) * g.k + tap];
                if wv == 0.0 {
                    continue;
                }
                for (off, len) in segs.iter() {
                    let (lo, hi, shift) = g.tap_range(tap, len);
                    let src = (off as isize + lo as isize + shift) as usize;
                    let dst = &mut out[co * t + off + lo..co * t + off + hi];
                    for (o, &xv) in dst.iter_mut().zip(&xrow[src..src + (hi - lo)]) {
                        *o += wv * xv;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv1d_backward_input(
    g: &ConvGeom,
    segs: &Segments,
    gy: &[f64],
    w: &[f64],
    gx: &mut [f64],
) {
    let t = g.frames;
    for co in 0..g.c_out {
        let grow = &gy[co * t..(co + 1) * t];
        for ci in 0..g.c_in {
            for tap in 0..g.k {
                let wv = w[(co * g.c_in + ci) * g.k + tap];
                if wv == 0.0 {
                    continue;
                }
                for (off, len) in segs.iter() {
                    let (lo, hi, shift) = g.tap_range(tap, len);
                    let src = (off as isize + lo as isize + shift) as usize;
                    let dst = &mut gx[ci * t + src..ci * t + src + (hi - lo)];
                    for (d, &gv) in dst.iter_mut().zip(&grow[off + lo..off + hi]) {
                        *d += wv * gv;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv1d_backward_weight(
    g: &ConvGeom,
    segs: &Segments,
    gy: &[f64],
    x: &[f64],
    gw: &mut [f64],
) {
    let t = g.frames;
    for co in 0..g.c_out {
        let grow = &gy[co * t..(co + 1) * t];
        for ci in 0..g.c_in {
            let xrow = &x[ci * t..(ci + 1) * t];
            for tap in 0..g.k {
                let mut total = 0.0;
                for (off, len) in segs.iter() {
                    let (lo, hi, shift) = g.tap_range(tap, len);
                    let src = (off as isize + lo as isize + shift) as usize;
                    total += grow[off + lo..off + hi]
                        .iter()
                        .zip(&xrow[src..src + (hi - lo)])
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                }
                gw[(co * g.c_in + ci) * g.k + tap] += total;
            }
        }
    }
}
