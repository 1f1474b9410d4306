//! Dense numeric kernels shared by the forward and backward passes.
//!
//! Everything reduces to a single-threaded blocked GEMM, so results are
//! bit-reproducible from run to run.

/// `c = a @ b + beta * c` on row-major slices with explicit row strides.
/// `ta`/`tb` read `a`/`b` transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slice lengths cover every index touched for these strides.
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

/// `y[m, :] = b + x[m, :] @ w` with `x: [m, k]`, `w: [k, o]`.
pub(crate) fn linear_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, k: usize, o: usize) -> Vec<f64> {
    let m = x.len() / k;
    let mut y = vec![0.0; m * o];
    let beta = match b {
        Some(b) => {
            for row in y.chunks_mut(o) {
                row.copy_from_slice(b);
            }
            1.0
        }
        None => 0.0,
    };
    gemm(m, k, o, x, false, w, false, beta, &mut y);
    y
}

/// Gradients of [`linear_forward`]: `(dx, dw, db)`.
pub(crate) fn linear_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    k: usize,
    o: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = x.len() / k;
    let mut dx = vec![0.0; m * k];
    gemm(m, o, k, g, false, w, true, 0.0, &mut dx);
    let mut dw = vec![0.0; k * o];
    gemm(k, m, o, x, true, g, false, 0.0, &mut dw);
    let mut db = vec![0.0; o];
    for gr in g.chunks(o) {
        for (d, &gv) in db.iter_mut().zip(gr) {
            *d += gv;
        }
    }
    (dx, dw, db)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub co: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            self.h + 2 * self.pad + 1 - self.k,
            self.w + 2 * self.pad + 1 - self.k,
        )
    }

    /// Output rows `y` for which input row `y + ky - pad` is in range.
    fn valid(&self, kk: usize, out_len: usize, in_len: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kk);
        let hi = (in_len + self.pad).saturating_sub(kk).min(out_len);
        (lo, hi.max(lo))
    }

    /// A 1x1 unpadded convolution needs no unfolding.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0
    }
}

/// Unfolds one image `[ci, h, w]` into columns `[ci*k*k, ho*wo]`.
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let plane_out = ho * wo;
    for ci in 0..g.ci {
        let xp = &x[ci * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.k {
            let (y0, y1) = g.valid(ky, ho, g.h);
            for kx in 0..g.k {
                let (x0, x1) = g.valid(kx, wo, g.w);
                let row = &mut cols[((ci * g.k + ky) * g.k + kx) * plane_out..][..plane_out];
                row[..y0 * wo].fill(0.0);
                row[y1 * wo..].fill(0.0);
                for yy in y0..y1 {
                    let iy = yy + ky - g.pad;
                    let out = &mut row[yy * wo..(yy + 1) * wo];
                    out[..x0].fill(0.0);
                    out[x1..].fill(0.0);
                    out[x0..x1].copy_from_slice(&xp[iy * g.w + x0 + kx - g.pad..][..x1 - x0]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `[ci, h, w]`.
fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let plane_out = ho * wo;
    for ci in 0..g.ci {
        let dp = &mut dx[ci * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.k {
            let (y0, y1) = g.valid(ky, ho, g.h);
            for kx in 0..g.k {
                let (x0, x1) = g.valid(kx, wo, g.w);
                let row = &cols[((ci * g.k + ky) * g.k + kx) * plane_out..][..plane_out];
                for yy in y0..y1 {
                    let iy = yy + ky - g.pad;
                    let dr = &mut dp[iy * g.w + x0 + kx - g.pad..][..x1 - x0];
                    for (d, &c) in dr.iter_mut().zip(&row[yy * wo + x0..yy * wo + x1]) {
                        *d += c;
                    }
                }
            }
        }
    }
}

/// Stride-1 zero-padded 2-D cross-correlation, `w: [co, ci, k, k]`.
pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, g: ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let plane_in = g.ci * g.h * g.w;
    let plane_out = ho * wo;
    let depth = g.ci * g.k * g.k;
    let mut y = vec![0.0; g.n * g.co * plane_out];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; depth * plane_out] };
    for n in 0..g.n {
        let xn = &x[n * plane_in..][..plane_in];
        let yn = &mut y[n * g.co * plane_out..][..g.co * plane_out];
        let beta = match b {
            Some(b) => {
                for (yp, &bv) in yn.chunks_mut(plane_out).zip(b) {
                    yp.fill(bv);
                }
                1.0
            }
            None => 0.0,
        };
        let src = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, &g, &mut cols);
            &cols
        };
        gemm(g.co, depth, plane_out, w, false, src, false, beta, yn);
    }
    y
}

/// Gradients of [`conv2d_forward`]: `(dx, dw, db)`. `dx` is skipped (left
/// empty) when `need_dx` is false.
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    g: ConvGeom,
    need_dx: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (ho, wo) = g.out_hw();
    let plane_in = g.ci * g.h * g.w;
    let plane_out = ho * wo;
    let depth = g.ci * g.k * g.k;
    let mut dx = if need_dx { vec![0.0; g.n * plane_in] } else { Vec::new() };
    let mut dw = vec![0.0; g.co * depth];
    let mut db = vec![0.0; g.co];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; depth * plane_out] };
    for n in 0..g.n {
        let xn = &x[n * plane_in..][..plane_in];
        let gn = &gy[n * g.co * plane_out..][..g.co * plane_out];
        let src = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, &g, &mut cols);
            &cols
        };
        gemm(g.co, plane_out, depth, gn, false, src, true, 1.0, &mut dw);
        for (d, gp) in db.iter_mut().zip(gn.chunks(plane_out)) {
            *d += gp.iter().sum::<f64>();
        }
        if need_dx {
            let dxn = &mut dx[n * plane_in..][..plane_in];
            if g.is_pointwise() {
                gemm(depth, g.co, plane_out, w, true, gn, false, 0.0, dxn);
            } else {
                gemm(depth, g.co, plane_out, w, true, gn, false, 0.0, &mut cols);
                col2im(&cols, &g, dxn);
            }
        }
    }
    (dx, dw, db)
}

/// Batched `a @ b` (or `a @ b^T` when `trans_b`), `a: [batch, m, k]`.
pub(crate) fn bmm(a: &[f64], b: &[f64], batch: usize, m: usize, k: usize, n: usize, trans_b: bool) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        gemm(
            m,
            k,
            n,
            &a[bi * m * k..][..m * k],
            false,
            &b[bi * k * n..][..k * n],
            trans_b,
            0.0,
            &mut out[bi * m * n..][..m * n],
        );
    }
    out
}

/// Batched `a^T @ b` with `a: [batch, k, m]`, `b: [batch, k, n]`.
pub(crate) fn bmm_tn(a: &[f64], b: &[f64], batch: usize, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        gemm(
            m,
            k,
            n,
            &a[bi * k * m..][..k * m],
            true,
            &b[bi * k * n..][..k * n],
            false,
            0.0,
            &mut out[bi * m * n..][..m * n],
        );
    }
    out
}
