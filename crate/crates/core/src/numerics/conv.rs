//! im2col convolution kernels shared by the tape and the codec.

use crate::numerics::linalg::{gemm, MatRef};

/// Geometry of a 2-D cross-correlation over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox·stride + kx − pad` lies inside
/// `0..w`.
fn valid_cols(g: &ConvGeom, kx: usize, ow: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride);
    let hi = if g.w + g.pad > kx {
        ((g.w + g.pad - kx - 1) / g.stride + 1).min(ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let np = oh * ow;
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * np..(row + 1) * np];
                let (lo, hi) = valid_cols(g, kx, ow);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    if lo == hi {
                        continue;
                    }
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (j, d) in line[lo..hi].iter_mut().enumerate() {
                            *d = src[first + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let np = oh * ow;
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * np..(row + 1) * np];
                let (lo, hi) = valid_cols(g, kx, ow);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    if lo == hi {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let first = lo * g.stride + kx - g.pad;
                    let s = &src[oy * ow + lo..oy * ow + hi];
                    if g.stride == 1 {
                        for (d, v) in dst[first..first + s.len()].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (j, v) in s.iter().enumerate() {
                            dst[first + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward pass over a batch. `kernel` is `[c_out, c_in, kh, kw]`, `out` is
/// `[n, c_out, oh, ow]` and is overwritten.
pub fn conv_forward(
    x: &[f64],
    n: usize,
    g: &ConvGeom,
    kernel: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    let in_per = g.c_in * g.h * g.w;
    let np = g.out_pixels();
    let out_per = g.c_out * np;
    let kmat = MatRef::row_major(kernel, g.c_out, g.col_rows());
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.col_rows() * np]
    };
    for s in 0..n {
        let xs = &x[s * in_per..(s + 1) * in_per];
        let os = &mut out[s * out_per..(s + 1) * out_per];
        let colm = if g.is_pointwise() {
            MatRef::row_major(xs, g.c_in, np)
        } else {
            im2col(xs, g, &mut cols);
            MatRef::row_major(&cols, g.col_rows(), np)
        };
        gemm(kmat, colm, os, 0.0);
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                for v in &mut os[co * np..(co + 1) * np] {
                    *v += bv;
                }
            }
        }
    }
}

/// Backward pass. Accumulates into `dkernel`, `dbias` and `dx` when given.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    x: &[f64],
    n: usize,
    g: &ConvGeom,
    kernel: &[f64],
    dout: &[f64],
    dkernel: Option<&mut [f64]>,
    dbias: Option<&mut [f64]>,
    dx: Option<&mut [f64]>,
) {
    let in_per = g.c_in * g.h * g.w;
    let np = g.out_pixels();
    let out_per = g.c_out * np;
    let rows = g.col_rows();
    if let Some(db) = dbias {
        for s in 0..n {
            let ds = &dout[s * out_per..(s + 1) * out_per];
            for (co, b) in db.iter_mut().enumerate() {
                *b += ds[co * np..(co + 1) * np].iter().sum::<f64>();
            }
        }
    }
    if let Some(dk) = dkernel {
        let mut cols = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; rows * np]
        };
        for s in 0..n {
            let xs = &x[s * in_per..(s + 1) * in_per];
            let ds = MatRef::row_major(&dout[s * out_per..(s + 1) * out_per], g.c_out, np);
            let colm = if g.is_pointwise() {
                MatRef::row_major(xs, g.c_in, np)
            } else {
                im2col(xs, g, &mut cols);
                MatRef::row_major(&cols, rows, np)
            };
            gemm(ds, colm.t(), dk, 1.0);
        }
    }
    if let Some(dx) = dx {
        let kmat = MatRef::row_major(kernel, g.c_out, rows);
        let mut dcols = vec![0.0; rows * np];
        for s in 0..n {
            let ds = MatRef::row_major(&dout[s * out_per..(s + 1) * out_per], g.c_out, np);
            let dxs = &mut dx[s * in_per..(s + 1) * in_per];
            if g.is_pointwise() {
                gemm(kmat.t(), ds, dxs, 1.0);
            } else {
                gemm(kmat.t(), ds, &mut dcols, 0.0);
                col2im(&dcols, g, dxs);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct(x: &[f64], g: &ConvGeom, k: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.c_out * oh * ow];
        for co in 0..g.c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..g.c_in {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w
                                {
                                    acc += x[(ci * g.h + iy as usize) * g.w + ix as usize]
                                        * k[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                                }
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_matches_direct_loops() {
        let g = ConvGeom {
            c_in: 2,
            c_out: 3,
            h: 5,
            w: 6,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..60).map(|v| ((v * 7) % 11) as f64 - 5.0).collect();
        let k: Vec<f64> = (0..54).map(|v| ((v * 5) % 13) as f64 * 0.1 - 0.6).collect();
        let mut out = vec![0.0; 3 * g.out_pixels()];
        conv_forward(&x, 1, &g, &k, None, &mut out);
        let want = direct(&x, &g, &k);
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        let mut seed = 1u64;
        let mut next = || {
            seed = seed
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (seed >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for (h, w, k, stride, pad) in [
            (5, 6, 3, 1, 1),
            (5, 6, 3, 2, 1),
            (4, 4, 5, 1, 2),
            (7, 3, 3, 2, 0),
            (3, 3, 5, 1, 0),
            (6, 6, 1, 2, 0),
            (2, 9, 3, 1, 2),
        ] {
            if h + 2 * pad < k || w + 2 * pad < k {
                continue;
            }
            let g = ConvGeom {
                c_in: 2,
                c_out: 1,
                h,
                w,
                kh: k,
                kw: k,
                stride,
                pad,
            };
            let x: Vec<f64> = (0..2 * h * w).map(|_| next()).collect();
            let c: Vec<f64> = (0..g.col_rows() * g.out_pixels()).map(|_| next()).collect();
            let mut cols = vec![f64::NAN; c.len()];
            im2col(&x, &g, &mut cols);
            let mut dx = vec![0.0; x.len()];
            col2im(&c, &g, &mut dx);
            let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12, "{h}x{w} k{k} s{stride} p{pad}");
            let kern: Vec<f64> = (0..g.col_rows()).map(|_| next()).collect();
            let mut out = vec![0.0; g.out_pixels()];
            conv_forward(&x, 1, &g, &kern, None, &mut out);
            for (a, b) in out.iter().zip(direct(&x, &g, &kern)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
