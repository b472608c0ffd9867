//! Layer primitives with hand-written reverse-mode gradients.
//!
//! Feature maps use a channel-major batch layout `[C, N, H, W]` ("CNHW"):
//! a 3×3 convolution is then a single GEMM of the `[C_out, C_in·9]` kernel
//! against the `[C_in·9, N·H·W]` im2col matrix, and channel concatenation is
//! plain buffer concatenation. Dense layers use row-major `[N, D]`.

use std::fmt::Debug;

use num_traits::Float;

/// Scalar type of the network: f32 for training, f64 for gradient checks.
pub trait Real: Float + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    /// `c = alpha * a·b + beta * c` with arbitrary strides.
    ///
    /// # Safety
    /// Strides and dimensions must address memory inside the given slices;
    /// callers go through [`matmul`], which checks the bounds.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite cast")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Matrix view: `(rows, cols, row_stride, col_stride)`.
#[derive(Clone, Copy, Debug)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Mat {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn extent(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// `c = a·b + beta·c`.
pub fn matmul<T: Real>(a: &[T], am: Mat, b: &[T], bm: Mat, beta: T, c: &mut [T], cm: Mat) {
    assert_eq!(am.cols, bm.rows, "inner dimensions");
    assert_eq!((am.rows, bm.cols), (cm.rows, cm.cols), "output dimensions");
    assert!(am.extent() <= a.len() && bm.extent() <= b.len() && cm.extent() <= c.len());
    if cm.rows == 0 || cm.cols == 0 {
        return;
    }
    // SAFETY: extents checked above.
    unsafe {
        T::gemm_raw(
            am.rows,
            am.cols,
            bm.cols,
            T::one(),
            a.as_ptr(),
            am.rs as isize,
            am.cs as isize,
            b.as_ptr(),
            bm.rs as isize,
            bm.cs as isize,
            beta,
            c.as_mut_ptr(),
            cm.rs as isize,
            cm.cs as isize,
        )
    }
}

/// Spatial geometry of a CNHW feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl Geom {
    pub fn plane(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn half(&self) -> Self {
        Self {
            n: self.n,
            h: self.h / 2,
            w: self.w / 2,
        }
    }
}

fn im2col_into<T: Real>(x: &[T], cin: usize, g: Geom, cols: &mut [T]) {
    let p = g.plane();
    let hw = g.h * g.w;
    debug_assert_eq!(cols.len(), cin * 9 * p);
    for ci in 0..cin {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * p..][..p];
                for n in 0..g.n {
                    let src = &x[ci * p + n * hw..][..hw];
                    let dst = &mut row[n * hw..][..hw];
                    for y in 0..g.h {
                        let sy = y + ky;
                        let d = &mut dst[y * g.w..][..g.w];
                        if sy < 1 || sy > g.h {
                            d.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let s = &src[(sy - 1) * g.w..][..g.w];
                        match kx {
                            0 => {
                                d[0] = T::zero();
                                d[1..].copy_from_slice(&s[..g.w - 1]);
                            }
                            1 => d.copy_from_slice(s),
                            _ => {
                                d[..g.w - 1].copy_from_slice(&s[1..]);
                                d[g.w - 1] = T::zero();
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], cin: usize, g: Geom, dx: &mut [T]) {
    let p = g.plane();
    let hw = g.h * g.w;
    for ci in 0..cin {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = &cols[(ci * 9 + ky * 3 + kx) * p..][..p];
                for n in 0..g.n {
                    let dst = &mut dx[ci * p + n * hw..][..hw];
                    let src = &row[n * hw..][..hw];
                    for y in 0..g.h {
                        let sy = y + ky;
                        if sy < 1 || sy > g.h {
                            continue;
                        }
                        let s = &src[y * g.w..][..g.w];
                        let d = &mut dst[(sy - 1) * g.w..][..g.w];
                        match kx {
                            0 => {
                                for x in 1..g.w {
                                    d[x - 1] = d[x - 1] + s[x];
                                }
                            }
                            1 => {
                                for x in 0..g.w {
                                    d[x] = d[x] + s[x];
                                }
                            }
                            _ => {
                                for x in 0..g.w - 1 {
                                    d[x + 1] = d[x + 1] + s[x];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 3×3 convolution, zero padding 1, stride 1. `weight` is `[cout, cin, 3, 3]`.
pub fn conv3x3<T: Real>(x: &[T], cin: usize, g: Geom, weight: &[T], bias: &[T], cout: usize) -> Vec<T> {
    let p = g.plane();
    assert_eq!(x.len(), cin * p);
    assert_eq!(weight.len(), cout * cin * 9);
    assert_eq!(bias.len(), cout);
    let mut cols = vec![T::zero(); cin * 9 * p];
    im2col_into(x, cin, g, &mut cols);
    let mut y = vec![T::zero(); cout * p];
    for (c, row) in y.chunks_exact_mut(p).enumerate() {
        row.iter_mut().for_each(|v| *v = bias[c]);
    }
    matmul(
        weight,
        Mat::row_major(cout, cin * 9),
        &cols,
        Mat::row_major(cin * 9, p),
        T::one(),
        &mut y,
        Mat::row_major(cout, p),
    );
    y
}

/// Accumulates kernel and bias gradients; returns the input gradient when
/// `want_dx` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward<T: Real>(
    x: &[T],
    cin: usize,
    g: Geom,
    weight: &[T],
    cout: usize,
    dy: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    want_dx: bool,
) -> Option<Vec<T>> {
    let p = g.plane();
    assert_eq!(dy.len(), cout * p);
    let mut cols = vec![T::zero(); cin * 9 * p];
    im2col_into(x, cin, g, &mut cols);
    // dW += dY · colsᵀ
    matmul(
        dy,
        Mat::row_major(cout, p),
        &cols,
        Mat::row_major(cin * 9, p).t(),
        T::one(),
        dweight,
        Mat::row_major(cout, cin * 9),
    );
    for (c, row) in dy.chunks_exact(p).enumerate() {
        dbias[c] = dbias[c] + row.iter().copied().sum::<T>();
    }
    if !want_dx {
        return None;
    }
    // dcols = Wᵀ · dY, reusing the im2col buffer.
    matmul(
        weight,
        Mat::row_major(cout, cin * 9).t(),
        dy,
        Mat::row_major(cout, p),
        T::zero(),
        &mut cols,
        Mat::row_major(cin * 9, p),
    );
    let mut dx = vec![T::zero(); cin * p];
    col2im_add(&cols, cin, g, &mut dx);
    Some(dx)
}

/// `y = x·Wᵀ + b` with `x: [n, din]`, `W: [dout, din]`.
pub fn linear<T: Real>(x: &[T], n: usize, din: usize, weight: &[T], bias: &[T], dout: usize) -> Vec<T> {
    assert_eq!(x.len(), n * din);
    let mut y: Vec<T> = (0..n).flat_map(|_| bias.iter().copied()).collect();
    matmul(
        x,
        Mat::row_major(n, din),
        weight,
        Mat::row_major(dout, din).t(),
        T::one(),
        &mut y,
        Mat::row_major(n, dout),
    );
    y
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    x: &[T],
    n: usize,
    din: usize,
    weight: &[T],
    dout: usize,
    dy: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    want_dx: bool,
) -> Option<Vec<T>> {
    // dW += dYᵀ · X
    matmul(
        dy,
        Mat::row_major(n, dout).t(),
        x,
        Mat::row_major(n, din),
        T::one(),
        dweight,
        Mat::row_major(dout, din),
    );
    for row in dy.chunks_exact(dout) {
        for (b, &d) in dbias.iter_mut().zip(row) {
            *b = *b + d;
        }
    }
    if !want_dx {
        return None;
    }
    let mut dx = vec![T::zero(); n * din];
    matmul(
        dy,
        Mat::row_major(n, dout),
        weight,
        Mat::row_major(dout, din),
        T::zero(),
        &mut dx,
        Mat::row_major(n, din),
    );
    Some(dx)
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// `dx = dy · silu'(x)`.
pub fn silu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = sigmoid(v);
            d * (s + v * s * (T::one() - s))
        })
        .collect()
}

/// 2×2 average pooling over even-sized maps.
pub fn avg_pool2<T: Real>(x: &[T], c: usize, g: Geom) -> Vec<T> {
    let o = g.half();
    let q = T::of(0.25);
    let mut y = vec![T::zero(); c * o.plane()];
    for plane in 0..c * g.n {
        let src = &x[plane * g.h * g.w..][..g.h * g.w];
        let dst = &mut y[plane * o.h * o.w..][..o.h * o.w];
        for yy in 0..o.h {
            for xx in 0..o.w {
                let a = src[2 * yy * g.w + 2 * xx];
                let b = src[2 * yy * g.w + 2 * xx + 1];
                let cc = src[(2 * yy + 1) * g.w + 2 * xx];
                let d = src[(2 * yy + 1) * g.w + 2 * xx + 1];
                dst[yy * o.w + xx] = (a + b + cc + d) * q;
            }
        }
    }
    y
}

pub fn avg_pool2_backward<T: Real>(dy: &[T], c: usize, g: Geom) -> Vec<T> {
    let o = g.half();
    let q = T::of(0.25);
    let mut dx = vec![T::zero(); c * g.plane()];
    for plane in 0..c * g.n {
        let src = &dy[plane * o.h * o.w..][..o.h * o.w];
        let dst = &mut dx[plane * g.h * g.w..][..g.h * g.w];
        for y in 0..g.h {
            for x in 0..g.w {
                dst[y * g.w + x] = src[(y / 2) * o.w + x / 2] * q;
            }
        }
    }
    dx
}

/// Nearest-neighbour 2× upsampling; `g` is the output geometry.
pub fn upsample2<T: Real>(x: &[T], c: usize, g: Geom) -> Vec<T> {
    let i = g.half();
    let mut y = vec![T::zero(); c * g.plane()];
    for plane in 0..c * g.n {
        let src = &x[plane * i.h * i.w..][..i.h * i.w];
        let dst = &mut y[plane * g.h * g.w..][..g.h * g.w];
        for yy in 0..g.h {
            for xx in 0..g.w {
                dst[yy * g.w + xx] = src[(yy / 2) * i.w + xx / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Real>(dy: &[T], c: usize, g: Geom) -> Vec<T> {
    let i = g.half();
    let mut dx = vec![T::zero(); c * i.plane()];
    for plane in 0..c * g.n {
        let src = &dy[plane * g.h * g.w..][..g.h * g.w];
        let dst = &mut dx[plane * i.h * i.w..][..i.h * i.w];
        for yy in 0..g.h {
            for xx in 0..g.w {
                let k = (yy / 2) * i.w + xx / 2;
                dst[k] = dst[k] + src[yy * g.w + xx];
            }
        }
    }
    dx
}

/// Adds `e[n, c]` to every pixel of channel `c` of sample `n`.
pub fn add_channel_bias<T: Real>(x: &mut [T], c: usize, g: Geom, e: &[T]) {
    let hw = g.h * g.w;
    for ch in 0..c {
        for n in 0..g.n {
            let v = e[n * c + ch];
            for p in &mut x[(ch * g.n + n) * hw..][..hw] {
                *p = *p + v;
            }
        }
    }
}

/// Gradient of [`add_channel_bias`] with respect to `e`.
pub fn add_channel_bias_backward<T: Real>(dy: &[T], c: usize, g: Geom) -> Vec<T> {
    let hw = g.h * g.w;
    let mut de = vec![T::zero(); g.n * c];
    for ch in 0..c {
        for n in 0..g.n {
            de[n * c + ch] = dy[(ch * g.n + n) * hw..][..hw].iter().copied().sum();
        }
    }
    de
}

/// Rows of `table` (`[rows, dim]`) selected by `ids`.
pub fn embedding<T: Real>(table: &[T], dim: usize, ids: &[usize]) -> Vec<T> {
    ids.iter()
        .flat_map(|&i| table[i * dim..(i + 1) * dim].iter().copied())
        .collect()
}

pub fn embedding_backward<T: Real>(dy: &[T], dim: usize, ids: &[usize], dtable: &mut [T]) {
    for (row, &i) in dy.chunks_exact(dim).zip(ids) {
        for (t, &d) in dtable[i * dim..(i + 1) * dim].iter_mut().zip(row) {
            *t = *t + d;
        }
    }
}

/// Channel concatenation in CNHW is buffer concatenation.
pub fn concat_channels<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out
}

pub fn split_channels<T: Real>(d: &[T], first_len: usize) -> (Vec<T>, Vec<T>) {
    (d[..first_len].to_vec(), d[first_len..].to_vec())
}

/// Interleaved sinusoidal embedding: `[sin(t·f0), cos(t·f0), sin(t·f1), ...]`
/// with `f_i = 10000^(-2i/dim)`.
pub fn sinusoidal<T: Real>(steps: &[usize], dim: usize) -> Vec<T> {
    assert!(dim % 2 == 0, "embedding dimension must be even");
    let half = dim / 2;
    let mut out = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        for i in 0..half {
            let freq = 10000f64.powf(-(2.0 * i as f64) / dim as f64);
            let a = t as f64 * freq;
            out.push(T::of(a.sin()));
            out.push(T::of(a.cos()));
        }
    }
    out
}

pub fn add_assign<T: Real>(a: &mut [T], b: &[T]) {
    for (x, &y) in a.iter_mut().zip(b) {
        *x = *x + y;
    }
}
