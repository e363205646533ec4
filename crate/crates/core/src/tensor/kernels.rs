//! Slice-level compute kernels. No autodiff here; [`super::Tape`] wraps these.

use nalgebra::DMatrix;

use crate::error::{shape_err, Error, Result};

/// Per-axis strides into `small` when it is broadcast (numpy rules,
/// right-aligned) up to `big`. Broadcast axes get stride 0.
pub fn broadcast_strides(small: &[usize], big: &[usize]) -> Result<Vec<usize>> {
    let rank = big.len();
    if small.len() > rank {
        return Err(shape_err!("cannot broadcast {:?} to {:?}", small, big));
    }
    let pad = rank - small.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        let s = if d >= pad { small[d - pad] } else { 1 };
        if s == big[d] {
            strides[d] = acc;
        } else if s == 1 {
            strides[d] = 0;
        } else {
            return Err(shape_err!("cannot broadcast {:?} to {:?}", small, big));
        }
        acc *= s;
    }
    Ok(strides)
}

/// Visit every flat index of `big` in row-major order together with the
/// matching flat index in the broadcast source.
fn for_each_broadcast(big: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = big.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    if big.contains(&0) {
        return;
    }
    let inner = big[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut counter = vec![0usize; rank];
    let mut out = 0;
    loop {
        let base: usize = counter.iter().zip(strides).map(|(c, s)| c * s).sum();
        for i in 0..inner {
            f(out + i, base + i * inner_stride);
        }
        out += inner;
        // advance the outer odometer
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            counter[d] += 1;
            if counter[d] < big[d] {
                break;
            }
            counter[d] = 0;
        }
    }
}

pub fn expand(src: &[f32], small: &[usize], big: &[usize]) -> Result<Vec<f32>> {
    let strides = broadcast_strides(small, big)?;
    let mut out = vec![0.0; big.iter().product()];
    for_each_broadcast(big, &strides, |o, s| out[o] = src[s]);
    Ok(out)
}

pub fn sum_to(src: &[f32], big: &[usize], small: &[usize]) -> Result<Vec<f32>> {
    let strides = broadcast_strides(small, big)?;
    let mut out = vec![0.0; small.iter().product()];
    for_each_broadcast(big, &strides, |o, s| out[s] += src[o]);
    Ok(out)
}

/// `c = alpha * op(a) * op(b) + beta * c` with `op(a)` m×k and `op(b)` k×n,
/// all row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: bounds asserted above; strides describe row-major layouts of
    // exactly those extents.
    unsafe {
        matrixmultiply::sgemm(
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

pub fn transpose(src: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Geometry of a square-kernel 2-d convolution over a BCHW batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(shape_err!(
                "conv2d wants BCHW input and OIKK weight, got {:?} and {:?}",
                input,
                weight
            ));
        }
        if input[1] != weight[1] {
            return Err(shape_err!(
                "conv2d: input has {} channels, weight expects {}",
                input[1],
                weight[1]
            ));
        }
        if weight[2] != weight[3] {
            return Err(shape_err!("conv2d: non-square kernel {:?}", weight));
        }
        if stride == 0 {
            return Err(shape_err!("conv2d: stride must be >= 1"));
        }
        let geom = ConvGeom {
            batch: input[0],
            in_ch: input[1],
            height: input[2],
            width: input[3],
            out_ch: weight[0],
            kernel: weight[2],
            stride,
            pad,
        };
        if input[2] + 2 * pad < geom.kernel || input[3] + 2 * pad < geom.kernel {
            return Err(shape_err!(
                "conv2d: kernel {} larger than padded input {:?}",
                geom.kernel,
                input
            ));
        }
        Ok(geom)
    }

    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.in_ch, self.height, self.width]
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.kernel, self.kernel]
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_ch, self.out_h(), self.out_w()]
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    for c in 0..g.in_ch {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * ow + ox] = if iy >= 0
                            && (iy as usize) < g.height
                            && ix >= 0
                            && (ix as usize) < g.width
                        {
                            plane[iy as usize * g.width + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f32], g: &ConvGeom, x: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    for c in 0..g.in_ch {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            plane[iy as usize * g.width + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d(x: &[f32], w: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let in_size = g.in_ch * g.height * g.width;
    let out_size = g.out_ch * cols;
    let mut out = vec![0.0; g.batch * out_size];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; rows * cols]
    };
    for b in 0..g.batch {
        let xb = &x[b * in_size..(b + 1) * in_size];
        let src = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut col);
            &col
        };
        gemm(
            g.out_ch,
            rows,
            cols,
            w,
            false,
            src,
            false,
            &mut out[b * out_size..(b + 1) * out_size],
            0.0,
        );
    }
    out
}

/// Gradient of `<gy, conv2d(x, w)>` with respect to `x`.
pub fn conv2d_back_input(gy: &[f32], w: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let in_size = g.in_ch * g.height * g.width;
    let out_size = g.out_ch * cols;
    let mut gx = vec![0.0; g.batch * in_size];
    let mut col = vec![0.0; rows * cols];
    for b in 0..g.batch {
        let gyb = &gy[b * out_size..(b + 1) * out_size];
        let gxb = &mut gx[b * in_size..(b + 1) * in_size];
        if g.is_pointwise() {
            gemm(rows, g.out_ch, cols, w, true, gyb, false, gxb, 0.0);
        } else {
            gemm(rows, g.out_ch, cols, w, true, gyb, false, &mut col, 0.0);
            col2im(&col, g, gxb);
        }
    }
    gx
}

/// Gradient of `<gy, conv2d(x, w)>` with respect to `w`.
pub fn conv2d_back_weight(x: &[f32], gy: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let in_size = g.in_ch * g.height * g.width;
    let out_size = g.out_ch * cols;
    let mut gw = vec![0.0; g.out_ch * rows];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; rows * cols]
    };
    for b in 0..g.batch {
        let xb = &x[b * in_size..(b + 1) * in_size];
        let src = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut col);
            &col
        };
        gemm(
            g.out_ch,
            cols,
            rows,
            &gy[b * out_size..(b + 1) * out_size],
            false,
            src,
            true,
            &mut gw,
            1.0,
        );
    }
    gw
}

/// Geometry of a square pooling window over a BCHW batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolGeom {
    pub fn new(input: &[usize], kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 {
            return Err(shape_err!("pool2d wants BCHW input, got {:?}", input));
        }
        if stride == 0 || kernel == 0 || input[2] == 0 || input[3] == 0 {
            return Err(shape_err!(
                "pool2d: degenerate geometry {:?} k={} s={}",
                input,
                kernel,
                stride
            ));
        }
        if input[2] + 2 * pad < kernel || input[3] + 2 * pad < kernel || pad >= kernel {
            return Err(shape_err!(
                "pool2d: kernel {} pad {} incompatible with {:?}",
                kernel,
                pad,
                input
            ));
        }
        Ok(PoolGeom {
            planes: input[0] * input[1],
            height: input[2],
            width: input[3],
            kernel,
            stride,
            pad,
        })
    }

    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// In-bounds window rows/cols for output cell (oy, ox).
    fn window(&self, oy: usize, ox: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let y0 = (oy * self.stride) as isize - self.pad as isize;
        let x0 = (ox * self.stride) as isize - self.pad as isize;
        let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize) as usize;
        let ys = clamp(y0, self.height)..clamp(y0 + self.kernel as isize, self.height);
        let xs = clamp(x0, self.width)..clamp(x0 + self.kernel as isize, self.width);
        (ys, xs)
    }
}

/// Average pooling whose divisor is the number of in-bounds cells.
pub fn avg_pool(x: &[f32], g: &PoolGeom) -> Vec<f32> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; g.planes * oh * ow];
    for p in 0..g.planes {
        let plane = &x[p * g.height * g.width..(p + 1) * g.height * g.width];
        for oy in 0..oh {
            for ox in 0..ow {
                let (ys, xs) = g.window(oy, ox);
                let count = (ys.len() * xs.len()) as f32;
                let mut acc = 0.0;
                for y in ys {
                    for xi in xs.clone() {
                        acc += plane[y * g.width + xi];
                    }
                }
                out[(p * oh + oy) * ow + ox] = acc / count;
            }
        }
    }
    out
}

/// Adjoint of [`avg_pool`]: spreads each output gradient over its window.
pub fn avg_pool_adjoint(gy: &[f32], g: &PoolGeom) -> Vec<f32> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut gx = vec![0.0; g.planes * g.height * g.width];
    for p in 0..g.planes {
        let plane = &mut gx[p * g.height * g.width..(p + 1) * g.height * g.width];
        for oy in 0..oh {
            for ox in 0..ow {
                let (ys, xs) = g.window(oy, ox);
                let share = gy[(p * oh + oy) * ow + ox] / (ys.len() * xs.len()) as f32;
                for y in ys {
                    for xi in xs.clone() {
                        plane[y * g.width + xi] += share;
                    }
                }
            }
        }
    }
    gx
}

/// Flat input index of each window maximum (lowest index on ties).
pub fn max_pool_argmax(x: &[f32], g: &PoolGeom) -> Vec<usize> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut idx = Vec::with_capacity(g.planes * oh * ow);
    for p in 0..g.planes {
        let base = p * g.height * g.width;
        for oy in 0..oh {
            for ox in 0..ow {
                let (ys, xs) = g.window(oy, ox);
                let mut best = usize::MAX;
                let mut best_val = f32::NEG_INFINITY;
                for y in ys {
                    for xi in xs.clone() {
                        let i = base + y * g.width + xi;
                        if best == usize::MAX || x[i] > best_val {
                            best = i;
                            best_val = x[i];
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}

pub fn gather(src: &[f32], idx: &[usize]) -> Vec<f32> {
    idx.iter().map(|&i| src[i]).collect()
}

pub fn scatter_add(src: &[f32], idx: &[usize], len: usize) -> Vec<f32> {
    let mut out = vec![0.0; len];
    for (&i, &v) in idx.iter().zip(src) {
        out[i] += v;
    }
    out
}

/// Solve `a x = b` for square `a` (n×n) and `b` (n×m). Computed in f64.
pub fn solve(a: &[f32], b: &[f32], n: usize, m: usize) -> Result<Vec<f32>> {
    let am = DMatrix::<f64>::from_row_iterator(n, n, a.iter().map(|&v| v as f64));
    let bm = DMatrix::<f64>::from_row_iterator(n, m, b.iter().map(|&v| v as f64));
    let x = am
        .lu()
        .solve(&bm)
        .ok_or_else(|| Error::Numeric("singular system in linear solve".into()))?;
    let mut out = Vec::with_capacity(n * m);
    for r in 0..n {
        for c in 0..m {
            out.push(x[(r, c)] as f32);
        }
    }
    Ok(out)
}

/// Mirror a CHW image left-to-right.
pub fn hflip(image: &[f32], channels: usize, height: usize, width: usize) -> Vec<f32> {
    let mut out = vec![0.0; image.len()];
    for c in 0..channels {
        for y in 0..height {
            let row = (c * height + y) * width;
            for x in 0..width {
                out[row + x] = image[row + width - 1 - x];
            }
        }
    }
    out
}
