//! Raw forward/backward kernels over flat slices. The autodiff graph owns
//! shapes and bookkeeping; everything here is index arithmetic.

use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output extent of a convolution, or `None` when the window does not tile
/// the padded input exactly.
pub(crate) fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if padded < k || !(padded - k).is_multiple_of(stride) {
        return None;
    }
    Some((padded - k) / stride + 1)
}

fn im2col<T: Real>(input: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.out_pixels();
    let mut cols = vec![T::zero(); g.patch() * p];
    for c in 0..g.c_in {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.w_out + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, dinput: &mut [T]) {
    let p = g.out_pixels();
    for c in 0..g.c_in {
        let plane = &mut dinput[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let p = g.out_pixels();
    let mut out = vec![T::zero(); g.c_out * p];
    if let Some(b) = bias {
        for (co, row) in out.chunks_mut(p).enumerate() {
            row.fill(b[co]);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    if g.is_pointwise() {
        T::gemm(g.c_out, g.c_in, p, T::one(), weight, g.c_in, 1, input, p, 1, beta, &mut out, p, 1);
    } else {
        let cols = im2col(input, g);
        let kk = g.patch();
        T::gemm(g.c_out, kk, p, T::one(), weight, kk, 1, &cols, p, 1, beta, &mut out, p, 1);
    }
    out
}

/// Accumulates gradients of a convolution into whichever of the three
/// buffers are present.
pub(crate) fn conv2d_backward<T: Real>(
    input: &[T],
    weight: &[T],
    gout: &[T],
    g: &ConvGeom,
    dinput: Option<&mut [T]>,
    dweight: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let p = g.out_pixels();
    let kk = g.patch();
    if let Some(db) = dbias {
        for (co, row) in gout.chunks(p).enumerate() {
            db[co] = db[co] + row.iter().copied().sum::<T>();
        }
    }
    let pointwise = g.is_pointwise();
    let cols_storage;
    let cols: &[T] = if pointwise {
        input
    } else if dweight.is_some() {
        cols_storage = im2col(input, g);
        &cols_storage
    } else {
        &[]
    };
    if let Some(dw) = dweight {
        // dW (c_out×kk) += dY (c_out×p) · colsᵀ (p×kk)
        T::gemm(g.c_out, p, kk, T::one(), gout, p, 1, cols, 1, p, T::one(), dw, kk, 1);
    }
    if let Some(dx) = dinput {
        if pointwise {
            T::gemm(kk, g.c_out, p, T::one(), weight, 1, kk, gout, p, 1, T::one(), dx, p, 1);
        } else {
            let mut dcols = vec![T::zero(); kk * p];
            T::gemm(kk, g.c_out, p, T::one(), weight, 1, kk, gout, p, 1, T::zero(), &mut dcols, p, 1);
            col2im_add(&dcols, g, dx);
        }
    }
}

/// Per-channel `k×k` convolution, stride 1, "same" padding.
pub(crate) fn depthwise_forward<T: Real>(
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Vec<T> {
    let pad = (k / 2) as isize;
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let src = &input[ch * h * w..(ch + 1) * h * w];
        let ker = &weight[ch * k * k..(ch + 1) * k * k];
        let b = bias.map_or(T::zero(), |b| b[ch]);
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = b;
                for ki in 0..k {
                    let iy = y as isize + ki as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let ix = x as isize + kj as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            acc = acc + ker[ki * k + kj] * src[iy as usize * w + ix as usize];
                        }
                    }
                }
                dst[y * w + x] = acc;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_backward<T: Real>(
    input: &[T],
    weight: &[T],
    gout: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    mut dinput: Option<&mut [T]>,
    mut dweight: Option<&mut [T]>,
    mut dbias: Option<&mut [T]>,
) {
    let pad = (k / 2) as isize;
    for ch in 0..c {
        let plane = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                let go = gout[plane + y * w + x];
                if let Some(db) = dbias.as_deref_mut() {
                    db[ch] = db[ch] + go;
                }
                for ki in 0..k {
                    let iy = y as isize + ki as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let ix = x as isize + kj as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = plane + iy as usize * w + ix as usize;
                        let widx = ch * k * k + ki * k + kj;
                        if let Some(dw) = dweight.as_deref_mut() {
                            dw[widx] = dw[widx] + go * input[src];
                        }
                        if let Some(dx) = dinput.as_deref_mut() {
                            dx[src] = dx[src] + go * weight[widx];
                        }
                    }
                }
            }
        }
    }
}

/// The four bilinear taps of a border-clamped sample at `(x, y)` on an
/// `h×w` grid, plus the partial derivatives of each tap weight with respect
/// to the unclamped coordinates.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap<T> {
    pub idx: [usize; 4],
    pub wt: [T; 4],
    pub dx: [T; 4],
    pub dy: [T; 4],
}

fn axis<T: Real>(v: T, n: usize) -> (usize, usize, T, bool) {
    let hi = T::from_f64((n - 1) as f64);
    // Right-sided convention: a coordinate sitting exactly on the lower
    // border still moves with the input, one on the upper border does not.
    let active = n > 1 && v >= T::zero() && v < hi;
    let vc = v.max(T::zero()).min(hi);
    let mut i0 = vc.floor().as_f64() as usize;
    if n > 1 && i0 >= n - 1 {
        i0 = n - 2;
    }
    let i0 = i0.min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    let frac = if n > 1 { vc - T::from_f64(i0 as f64) } else { T::zero() };
    (i0, i1, frac, active)
}

#[inline]
pub(crate) fn tap<T: Real>(x: T, y: T, h: usize, w: usize) -> Tap<T> {
    let (x0, x1, fx, ax) = axis(x, w);
    let (y0, y1, fy, ay) = axis(y, h);
    let one = T::one();
    let zero = T::zero();
    let (gx, hx) = (one - fx, fx);
    let (gy, hy) = (one - fy, fy);
    let dx = if ax { [-gy, gy, -hy, hy] } else { [zero; 4] };
    let dy = if ay { [-gx, -hx, gx, hx] } else { [zero; 4] };
    Tap {
        idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        wt: [gx * gy, hx * gy, gx * hy, hx * hy],
        dx,
        dy,
    }
}

impl<T: Real> Tap<T> {
    #[inline]
    pub fn sample(&self, plane: &[T]) -> T {
        self.wt[0] * plane[self.idx[0]]
            + self.wt[1] * plane[self.idx[1]]
            + self.wt[2] * plane[self.idx[2]]
            + self.wt[3] * plane[self.idx[3]]
    }

    #[inline]
    pub fn grad_xy(&self, plane: &[T]) -> (T, T) {
        let mut gx = T::zero();
        let mut gy = T::zero();
        for i in 0..4 {
            let v = plane[self.idx[i]];
            gx = gx + self.dx[i] * v;
            gy = gy + self.dy[i] * v;
        }
        (gx, gy)
    }

    #[inline]
    pub fn scatter(&self, plane: &mut [T], g: T) {
        for i in 0..4 {
            plane[self.idx[i]] = plane[self.idx[i]] + self.wt[i] * g;
        }
    }
}

pub(crate) fn avg_pool2_forward<T: Real>(input: &[T], lead: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![T::zero(); lead * ho * wo];
    for l in 0..lead {
        let src = &input[l * h * w..(l + 1) * h * w];
        let dst = &mut out[l * ho * wo..(l + 1) * ho * wo];
        for oy in 0..ho {
            let ys = 2 * oy..(2 * oy + 2).min(h);
            for ox in 0..wo {
                let xs = 2 * ox..(2 * ox + 2).min(w);
                let count = T::from_f64((ys.len() * xs.len()) as f64);
                let mut acc = T::zero();
                for y in ys.clone() {
                    for x in xs.clone() {
                        acc = acc + src[y * w + x];
                    }
                }
                dst[oy * wo + ox] = acc / count;
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward<T: Real>(gout: &[T], lead: usize, h: usize, w: usize, dinput: &mut [T]) {
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    for l in 0..lead {
        let g = &gout[l * ho * wo..(l + 1) * ho * wo];
        let dst = &mut dinput[l * h * w..(l + 1) * h * w];
        for oy in 0..ho {
            let ys = 2 * oy..(2 * oy + 2).min(h);
            for ox in 0..wo {
                let xs = 2 * ox..(2 * ox + 2).min(w);
                let share = g[oy * wo + ox] / T::from_f64((ys.len() * xs.len()) as f64);
                for y in ys.clone() {
                    for x in xs.clone() {
                        dst[y * w + x] = dst[y * w + x] + share;
                    }
                }
            }
        }
    }
}

/// Geometry of a windowed lookup into one pyramid level of a correlation
/// volume laid out as `[H, W, Hl, Wl]` (source pixel major).
#[derive(Clone, Copy, Debug)]
pub(crate) struct LookupGeom {
    pub h: usize,
    pub w: usize,
    pub hl: usize,
    pub wl: usize,
    pub radius: usize,
    /// `1 / 2^level`
    pub inv_scale: f64,
}

impl LookupGeom {
    pub fn window(&self) -> usize {
        let side = 2 * self.radius + 1;
        side * side
    }

    /// Taps for every (offset, source pixel), offset-major.
    fn for_each_tap<T: Real>(&self, flow: &[T], mut f: impl FnMut(usize, usize, &Tap<T>)) {
        let hw = self.h * self.w;
        let inv = T::from_f64(self.inv_scale);
        let r = self.radius as isize;
        let side = 2 * self.radius + 1;
        for i in 0..self.h {
            for j in 0..self.w {
                let s = i * self.w + j;
                let cx = (T::from_f64(j as f64) + flow[s]) * inv;
                let cy = (T::from_f64(i as f64) + flow[hw + s]) * inv;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let o = (dy + r) as usize * side + (dx + r) as usize;
                        let t = tap(
                            cx + T::from_f64(dx as f64),
                            cy + T::from_f64(dy as f64),
                            self.hl,
                            self.wl,
                        );
                        f(o, s, &t);
                    }
                }
            }
        }
    }
}

pub(crate) fn lookup_forward<T: Real>(volume: &[T], flow: &[T], g: &LookupGeom) -> Vec<T> {
    let hw = g.h * g.w;
    let plane = g.hl * g.wl;
    let mut out = vec![T::zero(); g.window() * hw];
    g.for_each_tap(flow, |o, s, t| {
        out[o * hw + s] = t.sample(&volume[s * plane..(s + 1) * plane]);
    });
    out
}

pub(crate) fn lookup_backward<T: Real>(
    volume: &[T],
    flow: &[T],
    gout: &[T],
    g: &LookupGeom,
    mut dvolume: Option<&mut [T]>,
    mut dflow: Option<&mut [T]>,
) {
    let hw = g.h * g.w;
    let plane = g.hl * g.wl;
    let inv = T::from_f64(g.inv_scale);
    g.for_each_tap(flow, |o, s, t| {
        let go = gout[o * hw + s];
        if let Some(dv) = dvolume.as_deref_mut() {
            t.scatter(&mut dv[s * plane..(s + 1) * plane], go);
        }
        if let Some(df) = dflow.as_deref_mut() {
            let (gx, gy) = t.grad_xy(&volume[s * plane..(s + 1) * plane]);
            df[s] = df[s] + go * gx * inv;
            df[hw + s] = df[hw + s] + go * gy * inv;
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_out_dim_rejects_fractional_tiling() {
        assert_eq!(conv_out_dim(5, 3, 1, 1), Some(5));
        assert_eq!(conv_out_dim(5, 3, 2, 1), Some(3));
        assert_eq!(conv_out_dim(4, 3, 2, 1), None);
        assert_eq!(conv_out_dim(1, 3, 1, 0), None);
    }

    #[test]
    fn tap_at_integer_coordinate_is_exact() {
        let plane: Vec<f64> = (0..12).map(|v| v as f64 * 1.37).collect();
        for y in 0..3 {
            for x in 0..4 {
                let t = tap(x as f64, y as f64, 3, 4);
                assert_eq!(t.sample(&plane), plane[y * 4 + x]);
            }
        }
    }

    #[test]
    fn tap_on_single_column_grid() {
        let plane = [2.0f64, 4.0];
        let t = tap(0.7, 0.5, 2, 1);
        assert!((t.sample(&plane) - 3.0).abs() < 1e-12);
        assert_eq!(t.dx, [0.0; 4]);
    }

    #[test]
    fn im2col_roundtrip_counts_overlaps() {
        // col2im(im2col(ones)) counts how many windows cover each pixel.
        let g = ConvGeom { c_in: 1, h: 3, w: 3, c_out: 1, k: 3, stride: 1, pad: 1, h_out: 3, w_out: 3 };
        let cols = im2col(&[1.0f64; 9], &g);
        let mut back = vec![0.0; 9];
        col2im_add(&cols, &g, &mut back);
        assert_eq!(back, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }
}
