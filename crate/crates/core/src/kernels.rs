//! Slice-level numeric kernels shared by forward and backward passes.

/// Column tile width for the streaming GEMMs (keeps a block of `c` rows
/// resident in L1).
const TILE: usize = 256;

/// `c[m,n] += a[m,k] · b[k,n]`
///
/// Columns are tiled and rows of `c` are processed four at a time so each
/// tile of a `b` row is loaded once per block; the summation order of
/// every entry is the plain `p = 0..k` order.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let blocks = m / 4;
    for j0 in (0..n).step_by(TILE) {
        let j1 = (j0 + TILE).min(n);
        let w = j1 - j0;
        for blk in 0..blocks {
            let i = blk * 4;
            let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
            let (c1, rest) = rest.split_at_mut(n);
            let (c2, c3) = rest.split_at_mut(n);
            let (c0, c1, c2, c3) = (&mut c0[j0..j1], &mut c1[j0..j1], &mut c2[j0..j1], &mut c3[j0..j1]);
            for p in 0..k {
                let av = [a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]];
                if av == [0.0; 4] {
                    continue;
                }
                let b_row = &b[p * n + j0..p * n + j1];
                for j in 0..w {
                    let bv = b_row[j];
                    c0[j] += av[0] * bv;
                    c1[j] += av[1] * bv;
                    c2[j] += av[2] * bv;
                    c3[j] += av[3] * bv;
                }
            }
        }
        for i in blocks * 4..m {
            let c_row = &mut c[i * n + j0..i * n + j1];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let b_row = &b[p * n + j0..p * n + j1];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += av * bv;
                }
            }
        }
    }
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for j0 in (0..n).step_by(TILE) {
        let j1 = (j0 + TILE).min(n);
        for p in 0..k {
            let a_row = &a[p * m..(p + 1) * m];
            let b_row = &b[p * n + j0..p * n + j1];
            for (i, &av) in a_row.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let c_row = &mut c[i * n + j0..i * n + j1];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += av * bv;
                }
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            *cv += dot(a_row, b_row);
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorize without reassociating.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Geometry of a 2-D convolution over NCHW input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds one CHW image into columns `offset..offset + Ho·Wo` of a
/// `[C·k·k, ld]` row-major matrix.
pub fn im2col(g: &ConvGeom, img: &[f64], cols: &mut [f64], ld: usize, offset: usize) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ld + offset..row * ld + offset + ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        dst[oy * wo + ox] = if iy >= 0
                            && (iy as usize) < g.height
                            && ix >= 0
                            && (ix as usize) < g.width
                        {
                            img[(c * g.height + iy as usize) * g.width + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub fn col2im(g: &ConvGeom, cols: &[f64], ld: usize, offset: usize, img: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    for c in 0..g.channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ld + offset..row * ld + offset + ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix as usize >= g.width {
                            continue;
                        }
                        img[(c * g.height + iy as usize) * g.width + ix as usize] +=
                            src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a = [1., 2., 3., 4., 5., 6.]; // 2x3
        let b = [1., 0., 2., 1., 0., 3.]; // 3x2
        let mut c = [0.0; 4];
        gemm_nn(2, 3, 2, &a, &b, &mut c);
        assert_eq!(c, [5., 11., 14., 23.]);

        // aᵀ stored as 3x2
        let at = [1., 4., 2., 5., 3., 6.];
        let mut c2 = [0.0; 4];
        gemm_tn(2, 3, 2, &at, &b, &mut c2);
        assert_eq!(c, c2);

        // bᵀ stored as 2x3
        let bt = [1., 2., 0., 0., 1., 3.];
        let mut c3 = [0.0; 4];
        gemm_nt(2, 3, 2, &a, &bt, &mut c3);
        assert_eq!(c, c3);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom {
            channels: 2,
            height: 4,
            width: 5,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let img: Vec<f64> = (0..40).map(|v| (v as f64 * 0.37).sin()).collect();
        // image placed as the second block of a two-image column matrix
        let ld = 2 * g.col_cols();
        let cols_y: Vec<f64> = (0..g.col_rows() * ld).map(|v| (v as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; cols_y.len()];
        im2col(&g, &img, &mut cols, ld, g.col_cols());
        let mut back = vec![0.0; img.len()];
        col2im(&g, &cols_y, ld, g.col_cols(), &mut back);
        let lhs = dot(&cols, &cols_y);
        let rhs = dot(&img, &back);
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
