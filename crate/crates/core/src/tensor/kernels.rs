//! Raw numeric kernels shared by tape operations and forward-only callers.

use super::Real;
use crate::error::{Error, Result};

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Result shape of a same-rank broadcast where each extent is equal or 1.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let mismatch = || Error::Shape(format!("cannot broadcast {a:?} with {b:?}"));
    if a.len() != b.len() {
        return Err(mismatch());
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(mismatch()),
        })
        .collect()
}

/// Walks every index of `shape` in row-major order and calls `f(flat, mapped)`,
/// where `mapped` is the dot product of the multi-index with `map_strides`.
pub(crate) fn for_each_mapped(shape: &[usize], map_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total: usize = shape.iter().product();
    if total == 0 {
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut mapped = 0usize;
    for flat in 0..total {
        f(flat, mapped);
        for d in (0..rank).rev() {
            idx[d] += 1;
            mapped += map_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            mapped -= map_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

/// Strides into a tensor of `src` shape when indexed by a multi-index of the
/// (larger) `dst` shape; broadcast axes get stride 0.
pub(crate) fn broadcast_strides(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let s = strides(src);
    src.iter()
        .zip(dst)
        .zip(s)
        .map(|((&a, &b), st)| if a == b { st } else { 0 })
        .collect()
}

/// Expands `src` (broadcastable) to `dst` shape.
pub(crate) fn expand<T: Real>(src: &[T], src_shape: &[usize], dst_shape: &[usize]) -> Vec<T> {
    if src_shape == dst_shape {
        return src.to_vec();
    }
    let total: usize = dst_shape.iter().product();
    let mut out = Vec::with_capacity(total);
    let st = broadcast_strides(src_shape, dst_shape);
    for_each_mapped(dst_shape, &st, |_, m| out.push(src[m]));
    out
}

/// Sums `grad` (of `big` shape) down to `small` shape.
pub(crate) fn reduce_to<T: Real>(grad: &[T], big: &[usize], small: &[usize]) -> Vec<T> {
    if big == small {
        return grad.to_vec();
    }
    let mut out = vec![T::zero(); small.iter().product()];
    let st = broadcast_strides(small, big);
    for_each_mapped(big, &st, |flat, m| out[m] = out[m] + grad[flat]);
    out
}

pub(crate) fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .map(|(i, &e)| if axes.contains(&i) { 1 } else { e })
        .collect()
}

pub(crate) fn sum_axes<T: Real>(x: &[T], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let out_shape = reduced_shape(shape, axes);
    (out_shape.clone(), reduce_to(x, shape, &out_shape))
}

/// Output extent of a convolution along one axis.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// 1×1, stride 1, no padding: the sample itself is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.col_cols();
    for c in 0..g.in_ch {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.in_h + iy as usize) * g.in_w..][..g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.col_cols();
    for c in 0..g.in_ch {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.in_h + iy as usize) * g.in_w..][..g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (rows, p) = (g.col_rows(), g.col_cols());
    let in_per = g.in_ch * g.in_h * g.in_w;
    let out_per = g.out_ch * p;
    let mut out = vec![T::zero(); g.batch * out_per];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * p] };
    for n in 0..g.batch {
        let xs = &x[n * in_per..(n + 1) * in_per];
        let cm: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        let o = &mut out[n * out_per..(n + 1) * out_per];
        T::gemm(
            g.out_ch, rows, p, T::one(), w, rows as isize, 1, cm, p as isize, 1, T::zero(), o,
            p as isize, 1,
        );
        if let Some(b) = bias {
            for (oc, chunk) in o.chunks_mut(p).enumerate() {
                chunk.iter_mut().for_each(|v| *v = *v + b[oc]);
            }
        }
    }
    out
}

/// `(dx, dw, dbias)`, each present only when requested.
pub(crate) type ConvGrads<T> = (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>);

/// Returns (dx, dw, dbias) for the given upstream gradient.
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dout: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let (rows, p) = (g.col_rows(), g.col_cols());
    let in_per = g.in_ch * g.in_h * g.in_w;
    let out_per = g.out_ch * p;
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let mut db = need_db.then(|| vec![T::zero(); g.out_ch]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * p] };
    let mut dcols = if need_dx && !g.is_pointwise() { vec![T::zero(); rows * p] } else { Vec::new() };
    for n in 0..g.batch {
        let go = &dout[n * out_per..(n + 1) * out_per];
        if let Some(db) = db.as_mut() {
            for (oc, chunk) in go.chunks(p).enumerate() {
                db[oc] = db[oc] + chunk.iter().copied().sum::<T>();
            }
        }
        let xs = &x[n * in_per..(n + 1) * in_per];
        if let Some(dw) = dw.as_mut() {
            let cm: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            // dw[O, rows] += go[O, P] · cmᵀ[P, rows]
            T::gemm(
                g.out_ch, p, rows, T::one(), go, p as isize, 1, cm, 1, p as isize, T::one(), dw,
                rows as isize, 1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[n * in_per..(n + 1) * in_per];
            if g.is_pointwise() {
                // dx[rows, P] = wᵀ[rows, O] · go[O, P]
                T::gemm(
                    rows, g.out_ch, p, T::one(), w, 1, rows as isize, go, p as isize, 1, T::zero(),
                    dxs, p as isize, 1,
                );
            } else {
                T::gemm(
                    rows, g.out_ch, p, T::one(), w, 1, rows as isize, go, p as isize, 1, T::zero(),
                    &mut dcols, p as isize, 1,
                );
                col2im(&dcols, g, dxs);
            }
        }
    }
    (dx, dw, db)
}

/// Per-axis sampling table for align-corners=false bilinear interpolation.
fn bilinear_axis(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of `planes` independent `in_h × in_w` maps.
pub fn bilinear_resize_values<T: Real>(
    x: &[T],
    planes: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    if in_h == out_h && in_w == out_w {
        return x.to_vec();
    }
    let ty = bilinear_axis(in_h, out_h);
    let tx = bilinear_axis(in_w, out_w);
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let src = &x[p * in_h * in_w..(p + 1) * in_h * in_w];
        for &(y0, y1, ly) in &ty {
            let ly = T::from_f64(ly);
            let hy = T::one() - ly;
            for &(x0, x1, lx) in &tx {
                let lx = T::from_f64(lx);
                let hx = T::one() - lx;
                let v = hy * (hx * src[y0 * in_w + x0] + lx * src[y0 * in_w + x1])
                    + ly * (hx * src[y1 * in_w + x0] + lx * src[y1 * in_w + x1]);
                out.push(v);
            }
        }
    }
    out
}

pub(crate) fn bilinear_resize_backward<T: Real>(
    dout: &[T],
    planes: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    if in_h == out_h && in_w == out_w {
        return dout.to_vec();
    }
    let ty = bilinear_axis(in_h, out_h);
    let tx = bilinear_axis(in_w, out_w);
    let mut dx = vec![T::zero(); planes * in_h * in_w];
    for p in 0..planes {
        let d = &mut dx[p * in_h * in_w..(p + 1) * in_h * in_w];
        let go = &dout[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::from_f64(ly);
            let hy = T::one() - ly;
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::from_f64(lx);
                let hx = T::one() - lx;
                let gv = go[oy * out_w + ox];
                d[y0 * in_w + x0] = d[y0 * in_w + x0] + gv * hy * hx;
                d[y0 * in_w + x1] = d[y0 * in_w + x1] + gv * hy * lx;
                d[y1 * in_w + x0] = d[y1 * in_w + x0] + gv * ly * hx;
                d[y1 * in_w + x1] = d[y1 * in_w + x1] + gv * ly * lx;
            }
        }
    }
    dx
}

pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    T::gemm(m, k, n, T::one(), a, k as isize, 1, b, n as isize, 1, T::zero(), &mut c, n as isize, 1);
    c
}

/// `aᵀ · b` for row-major `a[k×m]`, `b[k×n]`.
pub(crate) fn matmul_tn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    T::gemm(m, k, n, T::one(), a, 1, m as isize, b, n as isize, 1, T::zero(), &mut c, n as isize, 1);
    c
}

/// `a · bᵀ` for row-major `a[m×k]`, `b[n×k]`.
pub(crate) fn matmul_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    T::gemm(m, k, n, T::one(), a, k as isize, 1, b, 1, k as isize, T::zero(), &mut c, n as isize, 1);
    c
}
