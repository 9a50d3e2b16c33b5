//! Slice-level compute kernels shared by the eager tensor API and the
//! gradient tape.  All reductions use a fixed association order so results
//! are bit-reproducible.

use super::Real;

const LANES: usize = 8;

pub fn sum<T: Real>(xs: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = xs.chunks_exact(LANES);
    let rem = chunks.remainder();
    for c in chunks {
        for l in 0..LANES {
            acc[l] += c[l];
        }
    }
    let mut s = acc.iter().fold(T::zero(), |a, &b| a + b);
    for &r in rem {
        s += r;
    }
    s
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = acc.iter().fold(T::zero(), |a, &b| a + b);
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
pub fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn add_into<T: Real>(y: &mut [T], x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += xi;
    }
}

/// `c[m,n] = a[m,k] · b[k,n]`.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            axpy(crow, av, &b[kk * n..(kk + 1) * n]);
        }
    }
    c
}

/// Gradients of `matmul`: `da += dc·bᵀ`, `db += aᵀ·dc`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_backward<T: Real>(
    a: &[T],
    b: &[T],
    dc: &[T],
    m: usize,
    k: usize,
    n: usize,
    da: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    if let Some(da) = da {
        for i in 0..m {
            let dcrow = &dc[i * n..(i + 1) * n];
            for kk in 0..k {
                da[i * k + kk] += dot(dcrow, &b[kk * n..(kk + 1) * n]);
            }
        }
    }
    if let Some(db) = db {
        for i in 0..m {
            let dcrow = &dc[i * n..(i + 1) * n];
            for kk in 0..k {
                axpy(&mut db[kk * n..(kk + 1) * n], a[i * k + kk], dcrow);
            }
        }
    }
}

/// Geometry of a per-frame 3x3 convolution with one pixel of zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub frames: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h - 1) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w - 1) / self.stride + 1
    }

    /// Calls `f(out_pixel, in_pixel, tap)` for each valid kernel tap, where
    /// pixels are flat `(frame, y, x)` indices and `tap = ky*3 + kx`.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = (self.out_h(), self.out_w());
        for fr in 0..self.frames {
            for oy in 0..ho {
                for ox in 0..wo {
                    let op = (fr * ho + oy) * wo + ox;
                    for ky in 0..3 {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let ip = (fr * self.h + iy as usize) * self.w + ix as usize;
                            f(op, ip, ky * 3 + kx);
                        }
                    }
                }
            }
        }
    }
}

/// Kernel layout `[3, 3, cin, cout]`; frames are never mixed.
pub fn conv3x3<T: Real>(input: &[T], kernel: &[T], bias: &[T], g: ConvGeom) -> Vec<T> {
    let (cin, cout) = (g.cin, g.cout);
    let npix = g.frames * g.out_h() * g.out_w();
    let mut out = Vec::with_capacity(npix * cout);
    for _ in 0..npix {
        out.extend_from_slice(bias);
    }
    g.for_each_tap(|op, ip, tap| {
        let o = &mut out[op * cout..(op + 1) * cout];
        let x = &input[ip * cin..(ip + 1) * cin];
        let k = &kernel[tap * cin * cout..(tap + 1) * cin * cout];
        for (ci, &xv) in x.iter().enumerate() {
            axpy(o, xv, &k[ci * cout..(ci + 1) * cout]);
        }
    });
    out
}

pub fn conv3x3_backward<T: Real>(
    input: &[T],
    kernel: &[T],
    dout: &[T],
    g: ConvGeom,
    dinput: Option<&mut [T]>,
    dkernel: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let (cin, cout) = (g.cin, g.cout);
    if let Some(db) = dbias {
        for px in dout.chunks_exact(cout) {
            add_into(db, px);
        }
    }
    if let Some(di) = dinput {
        g.for_each_tap(|op, ip, tap| {
            let go = &dout[op * cout..(op + 1) * cout];
            let k = &kernel[tap * cin * cout..(tap + 1) * cin * cout];
            let d = &mut di[ip * cin..(ip + 1) * cin];
            for (ci, dv) in d.iter_mut().enumerate() {
                *dv += dot(go, &k[ci * cout..(ci + 1) * cout]);
            }
        });
    }
    if let Some(dk) = dkernel {
        g.for_each_tap(|op, ip, tap| {
            let go = &dout[op * cout..(op + 1) * cout];
            let x = &input[ip * cin..(ip + 1) * cin];
            let d = &mut dk[tap * cin * cout..(tap + 1) * cin * cout];
            for (ci, &xv) in x.iter().enumerate() {
                axpy(&mut d[ci * cout..(ci + 1) * cout], xv, go);
            }
        });
    }
}

/// Output of the group-norm forward pass, with what backward needs.
pub struct GroupNormOut<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub const NORM_EPS: f64 = 1e-5;

/// Per-frame group normalization: statistics over `(pixels, channels in
/// group)` of each frame.  Layout `[frames, pixels, c]`.
pub fn group_norm<T: Real>(
    x: &[T],
    frames: usize,
    pixels: usize,
    c: usize,
    groups: usize,
    scale: &[T],
    shift: &[T],
) -> GroupNormOut<T> {
    let cg = c / groups;
    let count = T::of((pixels * cg) as f64);
    let eps = T::of(NORM_EPS);
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); frames * groups];
    for f in 0..frames {
        let base = f * pixels * c;
        for g in 0..groups {
            let mut s = T::zero();
            for p in 0..pixels {
                let o = base + p * c + g * cg;
                s += sum(&x[o..o + cg]);
            }
            let mean = s / count;
            let mut v = T::zero();
            for p in 0..pixels {
                let o = base + p * c + g * cg;
                for &xv in &x[o..o + cg] {
                    let d = xv - mean;
                    v += d * d;
                }
            }
            let r = T::one() / (v / count + eps).sqrt();
            rstd[f * groups + g] = r;
            for p in 0..pixels {
                let o = base + p * c + g * cg;
                for j in 0..cg {
                    let xh = (x[o + j] - mean) * r;
                    xhat[o + j] = xh;
                    y[o + j] = xh * scale[g * cg + j] + shift[g * cg + j];
                }
            }
        }
    }
    GroupNormOut { y, xhat, rstd }
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    scale: &[T],
    frames: usize,
    pixels: usize,
    c: usize,
    groups: usize,
    dx: Option<&mut [T]>,
    dscale: Option<&mut [T]>,
    dshift: Option<&mut [T]>,
) {
    if let Some(ds) = dscale {
        for (i, (&g, &xh)) in dy.iter().zip(xhat).enumerate() {
            ds[i % c] += g * xh;
        }
    }
    if let Some(db) = dshift {
        for px in dy.chunks_exact(c) {
            add_into(db, px);
        }
    }
    let Some(dx) = dx else { return };
    let cg = c / groups;
    let count = T::of((pixels * cg) as f64);
    for f in 0..frames {
        let base = f * pixels * c;
        for g in 0..groups {
            let mut m1 = T::zero();
            let mut m2 = T::zero();
            for p in 0..pixels {
                let o = base + p * c + g * cg;
                for j in 0..cg {
                    let d = dy[o + j] * scale[g * cg + j];
                    m1 += d;
                    m2 += d * xhat[o + j];
                }
            }
            m1 = m1 / count;
            m2 = m2 / count;
            let r = rstd[f * groups + g];
            for p in 0..pixels {
                let o = base + p * c + g * cg;
                for j in 0..cg {
                    let d = dy[o + j] * scale[g * cg + j];
                    dx[o + j] += r * (d - m1 - xhat[o + j] * m2);
                }
            }
        }
    }
}

/// Which key positions each query may attend to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AttnMask {
    /// Full attention.
    None,
    /// Attention matrix fixed to the identity: output equals the values.
    Identity,
    /// Positions flagged `true` are independent items: they attend only to
    /// themselves and nobody else attends to them.
    Independent(Vec<bool>),
}

impl AttnMask {
    #[inline]
    fn allowed(&self, i: usize, j: usize) -> bool {
        match self {
            AttnMask::None => true,
            AttnMask::Identity => i == j,
            AttnMask::Independent(m) => i == j || (!m[i] && !m[j]),
        }
    }

    #[inline]
    fn self_only(&self, i: usize) -> bool {
        match self {
            AttnMask::None => false,
            AttnMask::Identity => true,
            AttnMask::Independent(m) => m[i],
        }
    }

    pub fn is_active(&self) -> bool {
        !matches!(self, AttnMask::None)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttnGeom {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub heads: usize,
}

/// Multi-head attention over `[batch, len, channels]` inputs; head `h` uses
/// the channel slice `h*d..(h+1)*d`.  `bias` is `[heads, len, len]`.
/// Returns the output and the attention probabilities `[batch, heads, len, len]`.
pub fn attention<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    bias: Option<&[T]>,
    mask: &AttnMask,
    g: AttnGeom,
) -> (Vec<T>, Vec<T>) {
    let AttnGeom {
        batch,
        len,
        channels: c,
        heads,
    } = g;
    let d = c / heads;
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut out = vec![T::zero(); batch * len * c];
    let mut probs = vec![T::zero(); batch * heads * len * len];
    let mut logits = vec![T::zero(); len];
    for b in 0..batch {
        let row = |i: usize, h: usize| (b * len + i) * c + h * d;
        for h in 0..heads {
            for i in 0..len {
                let p = &mut probs[((b * heads + h) * len + i) * len..][..len];
                let o = row(i, h);
                if mask.self_only(i) {
                    p[i] = T::one();
                    out[o..o + d].copy_from_slice(&v[o..o + d]);
                    continue;
                }
                let qi = &q[o..o + d];
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    if !mask.allowed(i, j) {
                        continue;
                    }
                    let mut s = dot(qi, &k[row(j, h)..row(j, h) + d]) * scale;
                    if let Some(bias) = bias {
                        s += bias[(h * len + i) * len + j];
                    }
                    logits[j] = s;
                    mx = mx.max(s);
                }
                let mut z = T::zero();
                for j in 0..len {
                    if mask.allowed(i, j) {
                        let e = (logits[j] - mx).exp();
                        p[j] = e;
                        z += e;
                    }
                }
                let inv = T::one() / z;
                let oi = &mut out[o..o + d];
                for j in 0..len {
                    if mask.allowed(i, j) {
                        p[j] *= inv;
                        axpy(oi, p[j], &v[row(j, h)..row(j, h) + d]);
                    }
                }
            }
        }
    }
    (out, probs)
}

pub struct AttnGrads<'a, T> {
    pub dq: Option<&'a mut [T]>,
    pub dk: Option<&'a mut [T]>,
    pub dv: Option<&'a mut [T]>,
    pub dbias: Option<&'a mut [T]>,
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    mask: &AttnMask,
    g: AttnGeom,
    mut grads: AttnGrads<'_, T>,
) {
    let AttnGeom {
        batch,
        len,
        channels: c,
        heads,
    } = g;
    let d = c / heads;
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut ds = vec![T::zero(); len];
    let need_scores = grads.dq.is_some() || grads.dk.is_some() || grads.dbias.is_some();
    for b in 0..batch {
        let row = |i: usize, h: usize| (b * len + i) * c + h * d;
        for h in 0..heads {
            for i in 0..len {
                let p = &probs[((b * heads + h) * len + i) * len..][..len];
                let o = row(i, h);
                let goi = &dout[o..o + d];
                if mask.self_only(i) {
                    if let Some(dv) = grads.dv.as_deref_mut() {
                        add_into(&mut dv[o..o + d], goi);
                    }
                    continue;
                }
                let mut cdot = T::zero();
                for j in 0..len {
                    if !mask.allowed(i, j) {
                        continue;
                    }
                    let rj = row(j, h);
                    if let Some(dv) = grads.dv.as_deref_mut() {
                        axpy(&mut dv[rj..rj + d], p[j], goi);
                    }
                    if need_scores {
                        let dp = dot(goi, &v[rj..rj + d]);
                        ds[j] = dp;
                        cdot += p[j] * dp;
                    }
                }
                if !need_scores {
                    continue;
                }
                for j in 0..len {
                    if !mask.allowed(i, j) {
                        continue;
                    }
                    let sj = p[j] * (ds[j] - cdot);
                    if let Some(db) = grads.dbias.as_deref_mut() {
                        db[(h * len + i) * len + j] += sj;
                    }
                    let rj = row(j, h);
                    if let Some(dq) = grads.dq.as_deref_mut() {
                        axpy(&mut dq[o..o + d], sj * scale, &k[rj..rj + d]);
                    }
                    if let Some(dk) = grads.dk.as_deref_mut() {
                        axpy(&mut dk[rj..rj + d], sj * scale, &q[o..o + d]);
                    }
                }
            }
        }
    }
}

/// Nearest-neighbour x2 spatial upsampling of `[frames, h, w, c]`.
pub fn upsample2<T: Real>(x: &[T], frames: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); frames * h2 * w2 * c];
    for f in 0..frames {
        for y in 0..h2 {
            for xx in 0..w2 {
                let src = ((f * h + y / 2) * w + xx / 2) * c;
                let dst = ((f * h2 + y) * w2 + xx) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(
    dout: &[T],
    frames: usize,
    h: usize,
    w: usize,
    c: usize,
    dx: &mut [T],
) {
    let (h2, w2) = (2 * h, 2 * w);
    for f in 0..frames {
        for y in 0..h2 {
            for xx in 0..w2 {
                let dst = ((f * h + y / 2) * w + xx / 2) * c;
                let src = ((f * h2 + y) * w2 + xx) * c;
                add_into(&mut dx[dst..dst + c], &dout[src..src + c]);
            }
        }
    }
}

/// Swap the two leading axes of `[a, b, rest]`.
pub fn swap_leading<T: Real>(x: &[T], a: usize, b: usize, rest: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..a {
        for j in 0..b {
            let src = (i * b + j) * rest;
            let dst = (j * a + i) * rest;
            out[dst..dst + rest].copy_from_slice(&x[src..src + rest]);
        }
    }
    out
}
