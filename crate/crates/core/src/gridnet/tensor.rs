use crate::error::{Error, Result};

/// Dense `(batch, height, width, channels)` tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(n: usize, h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || h == 0 || w == 0 || c == 0 {
            return Err(Error::Shape(format!("tensor dims must be >= 1, got {n}x{h}x{w}x{c}")));
        }
        if data.len() != n * h * w * c {
            return Err(Error::Shape(format!("{} values for dims {n}x{h}x{w}x{c}", data.len())));
        }
        Ok(Tensor4 { n, h, w, c, data })
    }

    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Tensor4 {
            n,
            h,
            w,
            c,
            data: vec![0.0; n * h * w * c],
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.h, self.w, self.c]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, b: usize, i: usize, j: usize, ch: usize) -> usize {
        ((b * self.h + i) * self.w + j) * self.c + ch
    }

    #[inline]
    pub fn at(&self, b: usize, i: usize, j: usize, ch: usize) -> f64 {
        self.data[self.idx(b, i, j, ch)]
    }

    /// Number of pixels, `n·h·w`.
    pub fn pixels(&self) -> usize {
        self.n * self.h * self.w
    }

    fn same_shape(&self, c: usize) -> Tensor4 {
        Tensor4::zeros(self.n, self.h, self.w, c)
    }
}

/// Depthwise 3×3 convolution with zero "same" padding; `k` is `[3, 3, C]`.
pub fn depthwise3(x: &Tensor4, k: &[f64]) -> Tensor4 {
    let c = x.c;
    let mut y = x.same_shape(c);
    for b in 0..x.n {
        for i in 0..x.h {
            for j in 0..x.w {
                let out = y.idx(b, i, j, 0);
                for di in 0..3 {
                    let ii = i + di;
                    if ii < 1 || ii > x.h {
                        continue;
                    }
                    for dj in 0..3 {
                        let jj = j + dj;
                        if jj < 1 || jj > x.w {
                            continue;
                        }
                        let src = x.idx(b, ii - 1, jj - 1, 0);
                        let kk = (di * 3 + dj) * c;
                        for ch in 0..c {
                            y.data[out + ch] += x.data[src + ch] * k[kk + ch];
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn depthwise3_backward(x: &Tensor4, k: &[f64], dy: &[f64], dx: &mut [f64], dk: &mut [f64]) {
    let c = x.c;
    for b in 0..x.n {
        for i in 0..x.h {
            for j in 0..x.w {
                let out = x.idx(b, i, j, 0);
                for di in 0..3 {
                    let ii = i + di;
                    if ii < 1 || ii > x.h {
                        continue;
                    }
                    for dj in 0..3 {
                        let jj = j + dj;
                        if jj < 1 || jj > x.w {
                            continue;
                        }
                        let src = x.idx(b, ii - 1, jj - 1, 0);
                        let kk = (di * 3 + dj) * c;
                        for ch in 0..c {
                            let g = dy[out + ch];
                            dx[src + ch] += g * k[kk + ch];
                            dk[kk + ch] += g * x.data[src + ch];
                        }
                    }
                }
            }
        }
    }
}

/// Standard 3×3 convolution with zero "same" padding; `k` is
/// `[3, 3, C_in, C_out]`.
pub fn conv3(x: &Tensor4, k: &[f64], c_out: usize) -> Tensor4 {
    let c_in = x.c;
    let mut y = x.same_shape(c_out);
    for b in 0..x.n {
        for i in 0..x.h {
            for j in 0..x.w {
                let out = y.idx(b, i, j, 0);
                for di in 0..3 {
                    let ii = i + di;
                    if ii < 1 || ii > x.h {
                        continue;
                    }
                    for dj in 0..3 {
                        let jj = j + dj;
                        if jj < 1 || jj > x.w {
                            continue;
                        }
                        let src = x.idx(b, ii - 1, jj - 1, 0);
                        let kk = (di * 3 + dj) * c_in * c_out;
                        for ci in 0..c_in {
                            let xv = x.data[src + ci];
                            let row = &k[kk + ci * c_out..kk + (ci + 1) * c_out];
                            for (yo, kv) in y.data[out..out + c_out].iter_mut().zip(row) {
                                *yo += xv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn conv3_backward(x: &Tensor4, k: &[f64], c_out: usize, dy: &[f64], dx: &mut [f64], dk: &mut [f64]) {
    let c_in = x.c;
    for b in 0..x.n {
        for i in 0..x.h {
            for j in 0..x.w {
                let out = ((b * x.h + i) * x.w + j) * c_out;
                let g = &dy[out..out + c_out];
                for di in 0..3 {
                    let ii = i + di;
                    if ii < 1 || ii > x.h {
                        continue;
                    }
                    for dj in 0..3 {
                        let jj = j + dj;
                        if jj < 1 || jj > x.w {
                            continue;
                        }
                        let src = x.idx(b, ii - 1, jj - 1, 0);
                        let kk = (di * 3 + dj) * c_in * c_out;
                        for ci in 0..c_in {
                            let xv = x.data[src + ci];
                            let base = kk + ci * c_out;
                            let mut acc = 0.0;
                            for o in 0..c_out {
                                acc += g[o] * k[base + o];
                                dk[base + o] += g[o] * xv;
                            }
                            dx[src + ci] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// 1×1 convolution; `k` is `[C_in, C_out]`, optional bias `[C_out]`.
pub fn pointwise(x: &Tensor4, k: &[f64], bias: Option<&[f64]>, c_out: usize) -> Tensor4 {
    let c_in = x.c;
    let mut y = x.same_shape(c_out);
    for p in 0..x.pixels() {
        let xin = &x.data[p * c_in..(p + 1) * c_in];
        let yo = &mut y.data[p * c_out..(p + 1) * c_out];
        if let Some(b) = bias {
            yo.copy_from_slice(b);
        }
        for (ci, &xv) in xin.iter().enumerate() {
            for (o, kv) in yo.iter_mut().zip(&k[ci * c_out..(ci + 1) * c_out]) {
                *o += xv * kv;
            }
        }
    }
    y
}

pub fn pointwise_backward(
    x: &Tensor4,
    k: &[f64],
    c_out: usize,
    dy: &[f64],
    dx: &mut [f64],
    dk: &mut [f64],
    db: Option<&mut [f64]>,
) {
    let c_in = x.c;
    for p in 0..x.pixels() {
        let g = &dy[p * c_out..(p + 1) * c_out];
        let xin = &x.data[p * c_in..(p + 1) * c_in];
        for ci in 0..c_in {
            let row = &k[ci * c_out..(ci + 1) * c_out];
            let mut acc = 0.0;
            for o in 0..c_out {
                acc += g[o] * row[o];
            }
            dx[p * c_in + ci] += acc;
            let xv = xin[ci];
            for (d, go) in dk[ci * c_out..(ci + 1) * c_out].iter_mut().zip(g) {
                *d += go * xv;
            }
        }
    }
    if let Some(db) = db {
        for p in 0..x.pixels() {
            for (d, go) in db.iter_mut().zip(&dy[p * c_out..(p + 1) * c_out]) {
                *d += go;
            }
        }
    }
}

pub fn relu(x: &Tensor4) -> Tensor4 {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// 2×2 max pooling with stride 2; returns the flat argmax of each output.
/// Ties keep the first element in row-major window order.
pub fn max_pool2(x: &Tensor4) -> Result<(Tensor4, Vec<usize>)> {
    if x.h % 2 != 0 || x.w % 2 != 0 {
        return Err(Error::Shape(format!(
            "max pooling needs even dims, got {}x{}",
            x.h, x.w
        )));
    }
    let (h, w) = (x.h / 2, x.w / 2);
    let mut y = Tensor4::zeros(x.n, h, w, x.c);
    let mut arg = vec![0usize; y.len()];
    for b in 0..x.n {
        for i in 0..h {
            for j in 0..w {
                for ch in 0..x.c {
                    let mut best = x.idx(b, 2 * i, 2 * j, ch);
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let ix = x.idx(b, 2 * i + di, 2 * j + dj, ch);
                        if x.data[ix] > x.data[best] {
                            best = ix;
                        }
                    }
                    let o = y.idx(b, i, j, ch);
                    y.data[o] = x.data[best];
                    arg[o] = best;
                }
            }
        }
    }
    Ok((y, arg))
}

/// Source taps `(i0, i1, w1)` of a ×2 bilinear upsample along one axis:
/// half-pixel centres, clamped at the edges.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let s = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// ×2 bilinear upsampling (half-pixel centres, edge clamping).
pub fn upsample2(x: &Tensor4) -> Tensor4 {
    let rows = upsample_taps(x.h);
    let cols = upsample_taps(x.w);
    let mut y = Tensor4::zeros(x.n, 2 * x.h, 2 * x.w, x.c);
    for b in 0..x.n {
        for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
            for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
                let o = y.idx(b, i, j, 0);
                let taps = [
                    (x.idx(b, r0, c0, 0), (1.0 - fr) * (1.0 - fc)),
                    (x.idx(b, r0, c1, 0), (1.0 - fr) * fc),
                    (x.idx(b, r1, c0, 0), fr * (1.0 - fc)),
                    (x.idx(b, r1, c1, 0), fr * fc),
                ];
                for (src, wt) in taps {
                    if wt == 0.0 {
                        continue;
                    }
                    for ch in 0..x.c {
                        y.data[o + ch] += wt * x.data[src + ch];
                    }
                }
            }
        }
    }
    y
}

pub fn upsample2_backward(x: &Tensor4, dy: &[f64], dx: &mut [f64]) {
    let rows = upsample_taps(x.h);
    let cols = upsample_taps(x.w);
    let (h2, w2) = (2 * x.h, 2 * x.w);
    for b in 0..x.n {
        for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
            for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
                let o = ((b * h2 + i) * w2 + j) * x.c;
                let taps = [
                    (x.idx(b, r0, c0, 0), (1.0 - fr) * (1.0 - fc)),
                    (x.idx(b, r0, c1, 0), (1.0 - fr) * fc),
                    (x.idx(b, r1, c0, 0), fr * (1.0 - fc)),
                    (x.idx(b, r1, c1, 0), fr * fc),
                ];
                for (src, wt) in taps {
                    if wt == 0.0 {
                        continue;
                    }
                    for ch in 0..x.c {
                        dx[src + ch] += wt * dy[o + ch];
                    }
                }
            }
        }
    }
}

/// Stacks channels of `a` then `b`.
pub fn concat(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    if (a.n, a.h, a.w) != (b.n, b.h, b.w) {
        return Err(Error::Shape(format!("cannot concat {:?} and {:?}", a.dims(), b.dims())));
    }
    let c = a.c + b.c;
    let mut y = Tensor4::zeros(a.n, a.h, a.w, c);
    for p in 0..a.pixels() {
        y.data[p * c..p * c + a.c].copy_from_slice(&a.data[p * a.c..(p + 1) * a.c]);
        y.data[p * c + a.c..(p + 1) * c].copy_from_slice(&b.data[p * b.c..(p + 1) * b.c]);
    }
    Ok(y)
}

/// Zero-pads bottom and right to `(h, w)`.
pub fn pad_to(x: &Tensor4, h: usize, w: usize) -> Tensor4 {
    let mut y = Tensor4::zeros(x.n, h, w, x.c);
    for b in 0..x.n {
        for i in 0..x.h {
            let src = x.idx(b, i, 0, 0);
            let dst = y.idx(b, i, 0, 0);
            y.data[dst..dst + x.w * x.c].copy_from_slice(&x.data[src..src + x.w * x.c]);
        }
    }
    y
}

/// Keeps the top-left `(h, w)` window.
pub fn crop_to(x: &Tensor4, h: usize, w: usize) -> Tensor4 {
    let mut y = Tensor4::zeros(x.n, h, w, x.c);
    for b in 0..x.n {
        for i in 0..h {
            let src = x.idx(b, i, 0, 0);
            let dst = y.idx(b, i, 0, 0);
            y.data[dst..dst + w * x.c].copy_from_slice(&x.data[src..src + w * x.c]);
        }
    }
    y
}
