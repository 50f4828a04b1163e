//! Raw numeric kernels shared by the tape ops.

/// Strided view of a row-major or transposed matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> Mat<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transposed view of a row-major `[r, cols]` matrix.
    pub fn trans(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c = alpha * a·b + beta * c` with `a: [m,k]`, `b: [k,n]`, `c: [m,n]` row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: Mat, b: Mat, beta: f64, c: &mut [f64]) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let span = |mat: &Mat, r: usize, cc: usize| {
        if r == 0 || cc == 0 {
            0
        } else {
            (r - 1) * mat.rs as usize + (cc - 1) * mat.cs as usize + 1
        }
    };
    assert!(a.data.len() >= span(&a, m, k));
    assert!(b.data.len() >= span(&b, k, n));
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub ci: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn new(h: usize, w: usize, ci: usize, stride: usize) -> Self {
        Self {
            h,
            w,
            ci,
            ho: (h - 1) / stride + 1,
            wo: (w - 1) / stride + 1,
            stride,
        }
    }

    pub fn patch(&self) -> usize {
        9 * self.ci
    }
}

/// 3x3, padding 1 patches of an `[h, w, ci]` map: `[ho*wo, 9*ci]`.
pub(crate) fn im2col(x: &[f64], g: ConvGeom) -> Vec<f64> {
    let p = g.patch();
    let mut cols = vec![0.0; g.ho * g.wo * p];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut cols[(oy * g.wo + ox) * p..][..p];
            for ky in 0..3 {
                let iy = (oy * g.stride + ky) as isize - 1;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * g.stride + kx) as isize - 1;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.ci;
                    let dst = (ky * 3 + kx) * g.ci;
                    row[dst..dst + g.ci].copy_from_slice(&x[src..src + g.ci]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto the input map.
pub(crate) fn col2im_add(cols: &[f64], g: ConvGeom, dx: &mut [f64]) {
    let p = g.patch();
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &cols[(oy * g.wo + ox) * p..][..p];
            for ky in 0..3 {
                let iy = (oy * g.stride + ky) as isize - 1;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * g.stride + kx) as isize - 1;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.ci;
                    let src = (ky * 3 + kx) * g.ci;
                    for (d, s) in dx[dst..dst + g.ci].iter_mut().zip(&row[src..src + g.ci]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU, written as `x * sigmoid(2u)` with
/// `u = sqrt(2/pi) (x + 0.044715 x^3)`.
pub(crate) fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    x / (1.0 + (-2.0 * u).exp())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let s = 1.0 / (1.0 + (-2.0 * u).exp());
    s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
