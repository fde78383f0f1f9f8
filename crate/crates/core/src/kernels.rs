//! Raw numeric kernels behind the differentiable ops.
//!
//! Every reduction runs in a fixed order and no kernel depends on the thread
//! count, so results are bitwise reproducible.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Output spatial size of a strided "same" convolution.
#[inline]
pub fn conv_out_dim(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn pad(&self) -> usize {
        self.k / 2
    }
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.ho * self.wo
    }
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }
}

fn conv_geom(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize) -> Result<ConvGeom> {
    if input.shape().len() != 3 || kernel.shape().len() != 4 {
        return Err(Error::shape("conv2d", input.shape(), kernel.shape()));
    }
    let (cin, h, w) = input.dims3();
    let ks = kernel.shape();
    let (cout, kin, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    if kin != cin || kh != kw || kh % 2 == 0 {
        return Err(Error::shape("conv2d", input.shape(), kernel.shape()));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape("conv2d bias", kernel.shape(), bias.shape()));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
    }
    Ok(ConvGeom {
        cin,
        h,
        w,
        cout,
        k: kh,
        stride,
        ho: conv_out_dim(h, stride),
        wo: conv_out_dim(w, stride),
    })
}

fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (k, s, p) = (g.k, g.stride, g.pad() as isize);
    let n = g.cols();
    let mut cols = vec![0.0; g.rows() * n];
    for c in 0..g.cin {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..k {
            for j in 0..k {
                let row = &mut cols[((c * k + i) * k + j) * n..][..n];
                for yo in 0..g.ho {
                    let yi = (yo * s) as isize + i as isize - p;
                    if yi < 0 || yi >= g.h as isize {
                        continue;
                    }
                    let src = &plane[yi as usize * g.w..][..g.w];
                    let dst = &mut row[yo * g.wo..][..g.wo];
                    for (xo, d) in dst.iter_mut().enumerate() {
                        let xi = (xo * s) as isize + j as isize - p;
                        if xi >= 0 && xi < g.w as isize {
                            *d = src[xi as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (k, s, p) = (g.k, g.stride, g.pad() as isize);
    let n = g.cols();
    let mut out = vec![0.0; g.cin * g.h * g.w];
    for c in 0..g.cin {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..k {
            for j in 0..k {
                let row = &cols[((c * k + i) * k + j) * n..][..n];
                for yo in 0..g.ho {
                    let yi = (yo * s) as isize + i as isize - p;
                    if yi < 0 || yi >= g.h as isize {
                        continue;
                    }
                    let src = &row[yo * g.wo..][..g.wo];
                    let dst = &mut plane[yi as usize * g.w..][..g.w];
                    for (xo, v) in src.iter().enumerate() {
                        let xi = (xo * s) as isize + j as isize - p;
                        if xi >= 0 && xi < g.w as isize {
                            dst[xi as usize] += v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// `out (m x n) += a (m x k) * b (k x n)`, row-major.
///
/// Every output element accumulates its `k` products in ascending order, so
/// the result does not depend on the tiling.
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    const T: usize = 4;
    let b = &b[..k * n];
    let mut i = 0;
    while i + T <= m {
        let ar: [&[f64]; T] = std::array::from_fn(|ii| &a[(i + ii) * k..(i + ii + 1) * k]);
        let mut j = 0;
        while j + T <= n {
            let mut acc = [[0.0; T]; T];
            for (ii, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(i + ii) * n + j..(i + ii) * n + j + T]);
            }
            for (kk, brow) in b.chunks_exact(n).enumerate() {
                let bv: [f64; T] = brow[j..j + T].try_into().unwrap();
                for ii in 0..T {
                    let av = ar[ii][kk];
                    for jj in 0..T {
                        acc[ii][jj] += av * bv[jj];
                    }
                }
            }
            for (ii, row) in acc.iter().enumerate() {
                out[(i + ii) * n + j..(i + ii) * n + j + T].copy_from_slice(row);
            }
            j += T;
        }
        for ii in i..i + T {
            matmul_row_tail(a, b, out, ii, k, n, j);
        }
        i += T;
    }
    for ii in i..m {
        matmul_row_tail(a, b, out, ii, k, n, 0);
    }
}

fn matmul_row_tail(a: &[f64], b: &[f64], out: &mut [f64], row: usize, k: usize, n: usize, from: usize) {
    let orow = &mut out[row * n + from..(row + 1) * n];
    for kk in 0..k {
        let av = a[row * k + kk];
        for (o, bv) in orow.iter_mut().zip(&b[kk * n + from..(kk + 1) * n]) {
            *o += av * bv;
        }
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

/// 2-D convolution with symmetric zero padding `k / 2`.
///
/// `kernel` is `(out, in, k, k)`, `bias` is `(out)`. Output spatial dims are
/// `ceil(input / stride)`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let g = conv_geom(input, kernel, bias, stride)?;
    let owned;
    let cols: &[f64] = if g.is_pointwise() {
        input.data()
    } else {
        owned = im2col(input.data(), &g);
        &owned
    };
    let (kr, n) = (g.rows(), g.cols());
    let mut out = vec![0.0; g.cout * n];
    for (o, row) in out.chunks_mut(n).enumerate() {
        row.fill(bias.data()[o]);
    }
    matmul_acc(kernel.data(), cols, &mut out, g.cout, kr, n);
    Ok(Tensor::from_parts(vec![g.cout, g.ho, g.wo], out))
}

/// Gradients of [`conv2d`]: `(d_input, d_kernel, d_bias)`.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let g = conv_geom(input, kernel, bias, stride)?;
    let (kr, n) = (g.rows(), g.cols());
    if grad_out.shape() != [g.cout, g.ho, g.wo] {
        return Err(Error::shape("conv2d_backward", grad_out.shape(), &[g.cout, g.ho, g.wo]));
    }
    let owned;
    let cols: &[f64] = if g.is_pointwise() {
        input.data()
    } else {
        owned = im2col(input.data(), &g);
        &owned
    };
    let go = grad_out.data();
    let gb: Vec<f64> = go.chunks(n).map(|r| r.iter().sum()).collect();

    let cols_t = transpose(cols, kr, n);
    let mut gk = vec![0.0; g.cout * kr];
    matmul_acc(go, &cols_t, &mut gk, g.cout, n, kr);

    let gin = if need_input {
        let wt = transpose(kernel.data(), g.cout, kr);
        let mut dcols = vec![0.0; kr * n];
        matmul_acc(&wt, go, &mut dcols, kr, g.cout, n);
        let data = if g.is_pointwise() { dcols } else { col2im(&dcols, &g) };
        Some(Tensor::from_parts(vec![g.cin, g.h, g.w], data))
    } else {
        None
    };
    Ok((
        gin,
        Tensor::from_parts(kernel.shape().to_vec(), gk),
        Tensor::from_parts(vec![g.cout], gb),
    ))
}

/// Rearranges `f x f` pixel blocks into channels: `C x H x W -> C*f*f x H/f x W/f`.
pub fn space_to_depth(input: &Tensor, f: usize) -> Result<Tensor> {
    let (c, h, w) = input.dims3();
    if h % f != 0 || w % f != 0 {
        return Err(Error::InvalidArgument(format!(
            "space_to_depth: {h}x{w} not divisible by {f}"
        )));
    }
    let (ho, wo) = (h / f, w / f);
    let src = input.data();
    let mut out = vec![0.0; src.len()];
    for ci in 0..c {
        for dy in 0..f {
            for dx in 0..f {
                let oc = ci * f * f + dy * f + dx;
                for y in 0..ho {
                    for x in 0..wo {
                        out[(oc * ho + y) * wo + x] = src[(ci * h + y * f + dy) * w + x * f + dx];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![c * f * f, ho, wo], out))
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space(input: &Tensor, f: usize) -> Result<Tensor> {
    let (cf, ho, wo) = input.dims3();
    if cf % (f * f) != 0 {
        return Err(Error::InvalidArgument(format!(
            "depth_to_space: {cf} channels not divisible by {}",
            f * f
        )));
    }
    let c = cf / (f * f);
    let (h, w) = (ho * f, wo * f);
    let src = input.data();
    let mut out = vec![0.0; src.len()];
    for ci in 0..c {
        for dy in 0..f {
            for dx in 0..f {
                let ic = ci * f * f + dy * f + dx;
                for y in 0..ho {
                    for x in 0..wo {
                        out[(ci * h + y * f + dy) * w + x * f + dx] = src[(ic * ho + y) * wo + x];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

/// Nearest-neighbour 2x upsampling cropped to `(th, tw)` (each at most twice the input).
pub fn upsample2_nearest(input: &Tensor, th: usize, tw: usize) -> Tensor {
    let (c, h, w) = input.dims3();
    assert!(th <= 2 * h && tw <= 2 * w, "upsample target too large");
    Tensor::from_fn3(c, th, tw, |ci, y, x| input.data()[(ci * h + y / 2) * w + x / 2])
}

pub fn upsample2_nearest_backward(grad_out: &Tensor, h: usize, w: usize) -> Tensor {
    let (c, th, tw) = grad_out.dims3();
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        for y in 0..th {
            for x in 0..tw {
                out[(ci * h + y / 2) * w + x / 2] += grad_out.data()[(ci * th + y) * tw + x];
            }
        }
    }
    Tensor::from_parts(vec![c, h, w], out)
}

/// Normalized, truncated (radius `ceil(3 sigma)`) 1-D Gaussian taps.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| libm::exp(-((i * i) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let s: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= s;
    }
    taps
}

#[inline]
fn clampi(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur(input: &Tensor, sigma: f64) -> Tensor {
    let taps = gaussian_taps(sigma);
    if taps.len() == 1 {
        return input.clone();
    }
    let r = (taps.len() / 2) as isize;
    let (c, h, w) = input.dims3();
    let src = input.data();
    let mut tmp = vec![0.0; src.len()];
    for ci in 0..c {
        for y in 0..h {
            let row = &src[(ci * h + y) * w..][..w];
            let dst = &mut tmp[(ci * h + y) * w..][..w];
            for (x, d) in dst.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (t, &tv) in taps.iter().enumerate() {
                    acc += tv * row[clampi(x as isize + t as isize - r, w)];
                }
                *d = acc;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for ci in 0..c {
        let plane = &tmp[ci * h * w..][..h * w];
        for y in 0..h {
            let dst = &mut out[(ci * h + y) * w..][..w];
            for (t, &tv) in taps.iter().enumerate() {
                let sy = clampi(y as isize + t as isize - r, h);
                axpy(dst, tv, &plane[sy * w..][..w]);
            }
        }
    }
    Tensor::from_parts(vec![c, h, w], out)
}

/// Adjoint of [`gaussian_blur`] (the blur is linear in its input).
pub fn gaussian_blur_adjoint(grad_out: &Tensor, sigma: f64) -> Tensor {
    let taps = gaussian_taps(sigma);
    if taps.len() == 1 {
        return grad_out.clone();
    }
    let r = (taps.len() / 2) as isize;
    let (c, h, w) = grad_out.dims3();
    let g = grad_out.data();
    let mut tmp = vec![0.0; g.len()];
    for ci in 0..c {
        let plane = &mut tmp[ci * h * w..][..h * w];
        for y in 0..h {
            let src = &g[(ci * h + y) * w..][..w];
            for (t, &tv) in taps.iter().enumerate() {
                let sy = clampi(y as isize + t as isize - r, h);
                axpy(&mut plane[sy * w..][..w], tv, src);
            }
        }
    }
    let mut out = vec![0.0; g.len()];
    for ci in 0..c {
        for y in 0..h {
            let src = &tmp[(ci * h + y) * w..][..w];
            let dst = &mut out[(ci * h + y) * w..][..w];
            for (x, &v) in src.iter().enumerate() {
                for (t, &tv) in taps.iter().enumerate() {
                    dst[clampi(x as isize + t as isize - r, w)] += tv * v;
                }
            }
        }
    }
    Tensor::from_parts(vec![c, h, w], out)
}
