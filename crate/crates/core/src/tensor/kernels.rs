//! Numeric kernels shared by the graph ops.

use crate::error::{Error, Result};

/// `c = a·b + beta·c` with optional transposition of the stored operands.
///
/// `a` is stored `[m,k]` (or `[k,m]` when `ta`), `b` is stored `[k,n]`
/// (or `[n,k]` when `tb`), `c` is `[m,n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the strided extents described above,
    // and `c` does not alias `a` or `b` (distinct borrows).
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

/// Geometry of a 2D convolution over one sample.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Self> {
        let (sh, sw) = stride;
        let (ph, pw) = pad;
        if sh == 0 || sw == 0 {
            return Err(Error::shape("conv", "stride must be positive"));
        }
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::shape(
                "conv",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {ph},{pw})"),
            ));
        }
        Ok(Self {
            c,
            h,
            w,
            kh,
            kw,
            sh,
            sw,
            ph,
            pw,
            ho: (h + 2 * ph - kh) / sh + 1,
            wo: (w + 2 * pw - kw) / sw + 1,
        })
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output columns `oj` whose input column `oj·stride + k − pad` lies in
/// `[0, w)`.
fn valid_cols(w: usize, wo: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = if w + pad > k { ((w + pad - k - 1) / stride + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds `x: [C,H,W]` into `cols: [C·kh·kw, Ho·Wo]`.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ncol = g.col_cols();
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                let (lo, hi) = valid_cols(g.w, g.wo, g.sw, kj, g.pw);
                for oi in 0..g.ho {
                    let ii = (oi * g.sh + ki) as isize - g.ph as isize;
                    let drow = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    if ii < 0 || ii >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * g.h + ii as usize) * g.w..][..g.w];
                    drow[..lo].fill(0.0);
                    drow[hi..].fill(0.0);
                    if lo < hi {
                        let j0 = lo * g.sw + kj - g.pw;
                        if g.sw == 1 {
                            drow[lo..hi].copy_from_slice(&src[j0..j0 + hi - lo]);
                        } else {
                            for (d, s) in drow[lo..hi].iter_mut().zip(src[j0..].iter().step_by(g.sw)) {
                                *d = *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into `dx: [C,H,W]`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let ncol = g.col_cols();
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncol..(row + 1) * ncol];
                let (lo, hi) = valid_cols(g.w, g.wo, g.sw, kj, g.pw);
                if lo >= hi {
                    continue;
                }
                let j0 = lo * g.sw + kj - g.pw;
                for oi in 0..g.ho {
                    let ii = (oi * g.sh + ki) as isize - g.ph as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(ci * g.h + ii as usize) * g.w..][..g.w];
                    let srow = &src[oi * g.wo + lo..oi * g.wo + hi];
                    if g.sw == 1 {
                        for (d, s) in dst[j0..j0 + hi - lo].iter_mut().zip(srow) {
                            *d += s;
                        }
                    } else {
                        for (d, s) in dst[j0..].iter_mut().step_by(g.sw).zip(srow) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Numpy-style broadcast of two shapes (trailing alignment).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` laid against `out` with zero stride on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let n = out.len();
    let mut strides = vec![0; n];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + n - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every output element of a broadcast binary op as
/// `(out_index, a_index, b_index)`.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = out.len();
    let total: usize = out.iter().product();
    if a == out && b == out {
        (0..total).for_each(|i| f(i, i, i));
        return;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    if n == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[n - 1];
    let (ia, ib) = (sa[n - 1], sb[n - 1]);
    let mut idx = vec![0usize; n.saturating_sub(1)];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        for j in 0..inner {
            f(o + j, oa + j * ia, ob + j * ib);
        }
        o += inner;
        // odometer over the outer axes
        let mut d = n - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, &mut c, 0.0);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // transposed storage
        let at: Vec<f64> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, &at, true, &b, false, &mut c2, 0.0);
        assert_eq!(c, c2);
    }

    #[test]
    fn im2col_matches_direct_indexing() {
        for &(h, w, k, s, p) in &[(5, 4, 3, 1, 1), (6, 7, 3, 2, 1), (4, 4, 3, 2, 0), (3, 5, 3, 1, 2), (5, 5, 1, 3, 0)] {
            let g = ConvGeom::new(2, h, w, k, k, (s, s), (p, p)).unwrap();
            let x: Vec<f64> = (0..2 * h * w).map(|i| i as f64 + 1.0).collect();
            let mut cols = vec![f64::NAN; g.col_rows() * g.col_cols()];
            im2col(&x, &g, &mut cols);
            let mut back = vec![0.0; x.len()];
            col2im(&cols, &g, &mut back);
            let mut want_back = vec![0.0; x.len()];
            for c in 0..2 {
                for ki in 0..k {
                    for kj in 0..k {
                        let row = (c * k + ki) * k + kj;
                        for oi in 0..g.ho {
                            for oj in 0..g.wo {
                                let (ii, jj) = ((oi * s + ki) as isize - p as isize, (oj * s + kj) as isize - p as isize);
                                let inside = ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w;
                                let idx = if inside { Some((c * h + ii as usize) * w + jj as usize) } else { None };
                                let got = cols[row * g.col_cols() + oi * g.wo + oj];
                                assert_eq!(got, idx.map_or(0.0, |i| x[i]), "{h}x{w} k{k} s{s} p{p}");
                                if let Some(i) = idx {
                                    want_back[i] += got;
                                }
                            }
                        }
                    }
                }
            }
            assert_eq!(back, want_back);
        }
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3, 4, 4], &[2, 3, 1, 1]), Some(vec![2, 3, 4, 4]));
        assert_eq!(broadcast_shape(&[5, 7], &[7]), Some(vec![5, 7]));
        assert_eq!(broadcast_shape(&[5, 7], &[5]), None);
    }

    #[test]
    fn broadcast_visit_covers_every_pair() {
        let mut seen = vec![];
        for_each_broadcast(&[2, 3], &[2, 3], &[1, 3], |o, a, b| seen.push((o, a, b)));
        assert_eq!(seen[4], (4, 4, 1));
        let mut seen = vec![];
        for_each_broadcast(&[2, 2, 2], &[2, 2, 2], &[2, 1, 1], |o, _, b| seen.push((o, b)));
        assert_eq!(seen, vec![(0, 0), (1, 0), (2, 0), (3, 0), (4, 1), (5, 1), (6, 1), (7, 1)]);
    }
}
