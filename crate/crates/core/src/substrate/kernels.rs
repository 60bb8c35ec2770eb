//! Raw array kernels shared by the forward and backward passes of
//! [`Graph`](super::Graph). Everything here works on flat row-major slices.

use super::real::{gemm, Real};

/// Strides of `rhs` when broadcast against `out` (0 on broadcast axes).
pub(crate) fn broadcast_strides(out: &[usize], rhs: &[usize]) -> Option<Vec<usize>> {
    if out.len() != rhs.len() {
        return None;
    }
    let mut strides = vec![0; rhs.len()];
    let mut acc = 1;
    for i in (0..rhs.len()).rev() {
        if rhs[i] == out[i] {
            strides[i] = if rhs[i] == 1 { 0 } else { acc };
        } else if rhs[i] == 1 {
            strides[i] = 0;
        } else {
            return None;
        }
        acc *= rhs[i];
    }
    Some(strides)
}

/// Visit every innermost row of `out` together with the offset of the matching
/// element of the broadcast operand and its innermost stride.
pub(crate) fn for_each_row(
    out: &[usize],
    strides: &[usize],
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    let rank = out.len();
    let inner = out[rank - 1];
    let inner_stride = strides[rank - 1];
    let rows: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let mut off = 0usize;
    for r in 0..rows {
        f(r * inner, off, inner, inner_stride);
        // advance the multi-index over the leading axes
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_binary<R: Real>(
    a: &[R],
    shape: &[usize],
    b: &[R],
    strides: &[usize],
    op: impl Fn(R, R) -> R,
) -> Vec<R> {
    let mut out = vec![R::zero(); a.len()];
    for_each_row(shape, strides, |start, boff, n, bs| {
        let dst = &mut out[start..start + n];
        let src = &a[start..start + n];
        if bs == 0 {
            let bv = b[boff];
            for (o, &x) in dst.iter_mut().zip(src) {
                *o = op(x, bv);
            }
        } else {
            for (j, (o, &x)) in dst.iter_mut().zip(src).enumerate() {
                *o = op(x, b[boff + j * bs]);
            }
        }
    });
    out
}

/// Sum `g * w(a)` into the broadcast operand's shape.
pub(crate) fn broadcast_reduce<R: Real>(
    g: &[R],
    shape: &[usize],
    strides: &[usize],
    weight: Option<&[R]>,
    out: &mut [R],
) {
    for_each_row(shape, strides, |start, boff, n, bs| {
        let gs = &g[start..start + n];
        match (weight, bs) {
            (None, 0) => {
                let s: R = gs.iter().copied().sum();
                out[boff] += s;
            }
            (Some(w), 0) => {
                let ws = &w[start..start + n];
                let mut s = R::zero();
                for (&x, &y) in gs.iter().zip(ws) {
                    s += x * y;
                }
                out[boff] += s;
            }
            (None, _) => {
                for (j, &x) in gs.iter().enumerate() {
                    out[boff + j * bs] += x;
                }
            }
            (Some(w), _) => {
                let ws = &w[start..start + n];
                for (j, (&x, &y)) in gs.iter().zip(ws).enumerate() {
                    out[boff + j * bs] += x * y;
                }
            }
        }
    });
}

/// General axis permutation: `out.shape[i] = shape[perm[i]]`.
pub(crate) fn permute<R: Real>(x: &[R], shape: &[usize], perm: &[usize]) -> (Vec<R>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    for_each_row(&out_shape, &src_strides, |_, off, _, _| {
        if inner_stride == 1 {
            out.extend_from_slice(&x[off..off + inner]);
        } else {
            out.extend((0..inner).map(|j| x[off + j * inner_stride]));
        }
    });
    (out, out_shape)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// How the normalization denominator is formed from the row variance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NormEps {
    /// `sqrt(var + eps)` (layer/group norm).
    InsideSqrt(f64),
    /// `sqrt(var) + eps` (weight standardization).
    OnStd(f64),
}

/// Normalize each contiguous row of length `row` to zero mean and unit
/// (population) variance. Returns `(y, inv_denominator, k)` per row, where `k`
/// is the coefficient of the variance term in the backward pass.
pub(crate) fn normalize_rows<R: Real>(x: &[R], row: usize, eps: NormEps) -> (Vec<R>, Vec<R>, Vec<R>) {
    let rows = x.len() / row;
    let n = R::lit(row as f64);
    let mut y = vec![R::zero(); x.len()];
    let mut inv = Vec::with_capacity(rows);
    let mut ks = Vec::with_capacity(rows);
    for r in 0..rows {
        let xs = &x[r * row..(r + 1) * row];
        let mean = xs.iter().copied().sum::<R>() / n;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / n;
        let (denom, k) = match eps {
            NormEps::InsideSqrt(e) => ((var + R::lit(e)).sqrt(), R::one()),
            NormEps::OnStd(e) => {
                let sd = var.sqrt();
                let d = sd + R::lit(e);
                (d, if sd > R::zero() { d / sd } else { R::zero() })
            }
        };
        let iv = R::one() / denom;
        for (o, &v) in y[r * row..(r + 1) * row].iter_mut().zip(xs) {
            *o = (v - mean) * iv;
        }
        inv.push(iv);
        ks.push(k);
    }
    (y, inv, ks)
}

pub(crate) fn normalize_rows_backward<R: Real>(
    g: &[R],
    y: &[R],
    row: usize,
    inv: &[R],
    ks: &[R],
    dx: &mut [R],
) {
    let n = R::lit(row as f64);
    for (r, (&iv, &k)) in inv.iter().zip(ks).enumerate() {
        let gs = &g[r * row..(r + 1) * row];
        let ys = &y[r * row..(r + 1) * row];
        let mg = gs.iter().copied().sum::<R>() / n;
        let mut mgy = R::zero();
        for (&a, &b) in gs.iter().zip(ys) {
            mgy += a * b;
        }
        mgy = mgy / n;
        for ((o, &a), &b) in dx[r * row..(r + 1) * row].iter_mut().zip(gs).zip(ys) {
            *o += iv * (a - mg - b * k * mgy);
        }
    }
}

pub(crate) fn softmax_rows<R: Real>(x: &[R], row: usize) -> Vec<R> {
    let mut out = vec![R::zero(); x.len()];
    for (xs, os) in x.chunks(row).zip(out.chunks_mut(row)) {
        let m = xs.iter().copied().fold(R::neg_infinity(), R::max);
        let mut s = R::zero();
        for (o, &v) in os.iter_mut().zip(xs) {
            *o = (v - m).exp();
            s += *o;
        }
        for o in os.iter_mut() {
            *o = *o / s;
        }
    }
    out
}

/// Geometry of a stride-1 2-D convolution over NCHW input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }
    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }
    fn cols(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn direct(&self) -> bool {
        self.k == 1 && self.pad == 0
    }
}

fn im2col<R: Real>(x: &[R], g: &ConvGeom, col: &mut [R]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let hw = oh * ow;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let rowi = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[rowi * hw..(rowi + 1) * hw];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(R::zero());
                        continue;
                    }
                    let srow = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let shift = kx as isize - g.pad as isize;
                    // valid output columns satisfy 0 <= ox + shift < w
                    let lo = (-shift).clamp(0, ow as isize) as usize;
                    let hi = (g.w as isize - shift).clamp(lo as isize, ow as isize) as usize;
                    drow[..lo].fill(R::zero());
                    drow[hi..].fill(R::zero());
                    let s0 = (lo as isize + shift) as usize;
                    drow[lo..hi].copy_from_slice(&srow[s0..s0 + hi - lo]);
                }
            }
        }
    }
}

fn col2im<R: Real>(col: &[R], g: &ConvGeom, dx: &mut [R]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let hw = oh * ow;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let rowi = (c * g.k + ky) * g.k + kx;
                let src = &col[rowi * hw..(rowi + 1) * hw];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let shift = kx as isize - g.pad as isize;
                    let lo = (-shift).clamp(0, ow as isize) as usize;
                    let hi = (g.w as isize - shift).clamp(lo as isize, ow as isize) as usize;
                    let s0 = (lo as isize + shift) as usize;
                    let srow = &src[oy * ow + lo..oy * ow + hi];
                    for (d, &s) in drow[s0..s0 + hi - lo].iter_mut().zip(srow) {
                        *d += s;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<R: Real>(x: &[R], w: &[R], bias: Option<&[R]>, g: &ConvGeom) -> Vec<R> {
    let hw = g.out_h() * g.out_w();
    let kk = g.cols();
    let in_img = g.cin * g.h * g.w;
    let mut out = vec![R::zero(); g.batch * g.cout * hw];
    let mut col = if g.direct() { Vec::new() } else { vec![R::zero(); kk * hw] };
    for b in 0..g.batch {
        let xb = &x[b * in_img..(b + 1) * in_img];
        let ob = &mut out[b * g.cout * hw..(b + 1) * g.cout * hw];
        if let Some(bias) = bias {
            for (o, &bv) in ob.chunks_mut(hw).zip(bias) {
                o.fill(bv);
            }
        }
        let beta = if bias.is_some() { R::one() } else { R::zero() };
        let src: &[R] = if g.direct() {
            xb
        } else {
            im2col(xb, g, &mut col);
            &col
        };
        gemm(false, false, g.cout, hw, kk, w, src, beta, ob);
    }
    out
}

/// Accumulates into whichever of `dx`, `dw`, `db` are present.
pub(crate) fn conv2d_backward<R: Real>(
    gout: &[R],
    x: &[R],
    w: &[R],
    g: &ConvGeom,
    mut dx: Option<&mut [R]>,
    mut dw: Option<&mut [R]>,
    mut db: Option<&mut [R]>,
) {
    let hw = g.out_h() * g.out_w();
    let kk = g.cols();
    let in_img = g.cin * g.h * g.w;
    let mut col = if g.direct() { Vec::new() } else { vec![R::zero(); kk * hw] };
    let mut dcol = if g.direct() || dx.is_none() { Vec::new() } else { vec![R::zero(); kk * hw] };
    for b in 0..g.batch {
        let gb = &gout[b * g.cout * hw..(b + 1) * g.cout * hw];
        let xb = &x[b * in_img..(b + 1) * in_img];
        if let Some(db) = db.as_deref_mut() {
            for (d, gs) in db.iter_mut().zip(gb.chunks(hw)) {
                *d += gs.iter().copied().sum::<R>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let src: &[R] = if g.direct() {
                xb
            } else {
                im2col(xb, g, &mut col);
                &col
            };
            gemm(false, true, g.cout, kk, hw, gb, src, R::one(), dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * in_img..(b + 1) * in_img];
            if g.direct() {
                gemm(true, false, kk, hw, g.cout, w, gb, R::one(), dxb);
            } else {
                gemm(true, false, kk, hw, g.cout, w, gb, R::zero(), &mut dcol);
                col2im(&dcol, g, dxb);
            }
        }
    }
}

/// `[B,C,H,W] -> [B,4C,H/2,W/2]`, channel index `4c + 2dy + dx`.
pub(crate) fn space_to_depth<R: Real>(x: &[R], shape: &[usize]) -> (Vec<R>, Vec<usize>) {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![R::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let oc = ci * 4 + (y % 2) * 2 + (xx % 2);
                    let o = ((bi * 4 * c + oc) * h2 + y / 2) * w2 + xx / 2;
                    out[o] = x[((bi * c + ci) * h + y) * w + xx];
                }
            }
        }
    }
    (out, vec![b, 4 * c, h2, w2])
}

pub(crate) fn depth_to_space_add<R: Real>(g: &[R], in_shape: &[usize], dx: &mut [R]) {
    let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (h2, w2) = (h / 2, w / 2);
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let oc = ci * 4 + (y % 2) * 2 + (xx % 2);
                    let o = ((bi * 4 * c + oc) * h2 + y / 2) * w2 + xx / 2;
                    dx[((bi * c + ci) * h + y) * w + xx] += g[o];
                }
            }
        }
    }
}

/// Nearest-neighbour upsampling by 2 on both spatial axes.
pub(crate) fn upsample2<R: Real>(x: &[R], shape: &[usize]) -> (Vec<R>, Vec<usize>) {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![R::zero(); x.len() * 4];
    for p in 0..b * c {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
            for (xx, d) in dst[y * w2..(y + 1) * w2].iter_mut().enumerate() {
                *d = srow[xx / 2];
            }
        }
    }
    (out, vec![b, c, h2, w2])
}

pub(crate) fn upsample2_backward<R: Real>(g: &[R], in_shape: &[usize], dx: &mut [R]) {
    let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (h2, w2) = (2 * h, 2 * w);
    for p in 0..b * c {
        let src = &g[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
            }
        }
    }
}

/// Geometry of a rectangular window inside each `h×w` plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub top: usize,
    pub left: usize,
    pub oh: usize,
    pub ow: usize,
}

/// `small[p] = big[p][top.., left..]` for every plane.
pub(crate) fn gather_window<R: Real>(win: &Window, big: &[R], small: &mut [R]) {
    for p in 0..win.planes {
        for y in 0..win.oh {
            let bo = (p * win.h + win.top + y) * win.w + win.left;
            let so = (p * win.oh + y) * win.ow;
            small[so..so + win.ow].copy_from_slice(&big[bo..bo + win.ow]);
        }
    }
}

/// `big[p][top.., left..] += small[p]` for every plane.
pub(crate) fn scatter_window<R: Real>(win: &Window, small: &[R], big: &mut [R]) {
    for p in 0..win.planes {
        for y in 0..win.oh {
            let bo = (p * win.h + win.top + y) * win.w + win.left;
            let so = (p * win.oh + y) * win.ow;
            for (d, &s) in big[bo..bo + win.ow].iter_mut().zip(&small[so..so + win.ow]) {
                *d += s;
            }
        }
    }
}
