//! Low-level convolution kernels: im2col / col2im and a GEMM wrapper.

/// Geometry of a 2-D sliding window over a `channels × height × width` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    #[cfg(test)]
    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// True when the window is a plain 1×1 stride-1 map and columns equal the image.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) fn im2col(src: &[f64], win: &Window, cols: &mut [f64]) {
    let (ho, wo) = (win.out_height(), win.out_width());
    let (h, w, k) = (win.height as isize, win.width as isize, win.kernel);
    let plane = ho * wo;
    debug_assert_eq!(cols.len(), win.col_rows() * plane);
    for ci in 0..win.channels {
        let src_c = &src[ci * win.height * win.width..(ci + 1) * win.height * win.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * win.stride + ki) as isize - win.pad as isize;
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src_row = &src_c[iy as usize * win.width..(iy as usize + 1) * win.width];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * win.stride + kj) as isize - win.pad as isize;
                        *d = if ix < 0 || ix >= w { 0.0 } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns back into an image; the adjoint of [`im2col`].
pub(crate) fn col2im(cols: &[f64], win: &Window, dst: &mut [f64]) {
    let (ho, wo) = (win.out_height(), win.out_width());
    let (h, w, k) = (win.height as isize, win.width as isize, win.kernel);
    let plane = ho * wo;
    for ci in 0..win.channels {
        let dst_c = &mut dst[ci * win.height * win.width..(ci + 1) * win.height * win.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * win.stride + ki) as isize - win.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst_row =
                        &mut dst_c[iy as usize * win.width..(iy as usize + 1) * win.width];
                    for ox in 0..wo {
                        let ix = (ox * win.stride + kj) as isize - win.pad as isize;
                        if ix >= 0 && ix < w {
                            dst_row[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `C = op(A) · op(B) + beta · C` with `op(A)` of shape `m × k`
/// and `op(B)` of shape `k × n`. A transposed operand is stored in its
/// untransposed layout (`k × m` for A, `n × k` for B).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds checked above; strides describe the stated layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
