//! Scale-space warping: trilinear sampling of a Gaussian blur stack.

use crate::error::{Error, Result};
use crate::kernels::{gaussian_blur, gaussian_blur_adjoint};
use crate::tensor::Tensor;

/// Blur standard deviations `[0, s0, 2 s0, 4 s0, ...]` for a `levels`-deep stack.
pub fn pyramid_sigmas(levels: usize, base_sigma: f64) -> Vec<f64> {
    (0..levels)
        .map(|i| if i == 0 { 0.0 } else { base_sigma * (1u64 << (i - 1)) as f64 })
        .collect()
}

pub fn build_pyramid(frame: &Tensor, sigmas: &[f64]) -> Vec<Tensor> {
    sigmas.iter().map(|&s| gaussian_blur(frame, s)).collect()
}

struct Tap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    z0: usize,
    z1: usize,
    fx: f64,
    fy: f64,
    fz: f64,
    // whether each coordinate was inside its valid range (clamped coordinates get no gradient)
    gx: bool,
    gy: bool,
    gz: bool,
}

#[inline]
fn axis(v: f64, n: usize) -> (usize, usize, f64, bool) {
    let hi = (n - 1) as f64;
    let inside = (0.0..=hi).contains(&v);
    let c = v.clamp(0.0, hi);
    let i0 = (c.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, c - i0 as f64, inside)
}

#[inline]
fn tap(x: usize, y: usize, dx: f64, dy: f64, s: f64, w: usize, h: usize, m: usize) -> Tap {
    let (x0, x1, fx, gx) = axis(x as f64 + dx, w);
    let (y0, y1, fy, gy) = axis(y as f64 + dy, h);
    let (z0, z1, fz, gz) = axis(s, m);
    Tap {
        x0,
        x1,
        y0,
        y1,
        z0,
        z1,
        fx,
        fy,
        fz,
        gx,
        gy,
        gz,
    }
}

fn check(pyramid: &[Tensor], flow: &Tensor) -> Result<(usize, usize, usize)> {
    let (c, h, w) = pyramid[0].dims3();
    if flow.shape() != [3, h, w] {
        return Err(Error::shape("scale_space_warp", pyramid[0].shape(), flow.shape()));
    }
    Ok((c, h, w))
}

/// Samples `pyramid` at `(x + dx, y + dy, sigma_index)` for every pixel.
pub fn sample(pyramid: &[Tensor], flow: &Tensor) -> Result<Tensor> {
    let (c, h, w) = check(pyramid, flow)?;
    let m = pyramid.len();
    let plane = h * w;
    let fd = flow.data();
    let mut out = vec![0.0; c * plane];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let t = tap(x, y, fd[p], fd[plane + p], fd[2 * plane + p], w, h, m);
            for ci in 0..c {
                let bil = |lvl: usize| {
                    let d = &pyramid[lvl].data()[ci * plane..];
                    let top = (1.0 - t.fx) * d[t.y0 * w + t.x0] + t.fx * d[t.y0 * w + t.x1];
                    let bot = (1.0 - t.fx) * d[t.y1 * w + t.x0] + t.fx * d[t.y1 * w + t.x1];
                    (1.0 - t.fy) * top + t.fy * bot
                };
                out[ci * plane + p] = (1.0 - t.fz) * bil(t.z0) + t.fz * bil(t.z1);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

/// Gradients of [`sample`] w.r.t. the source frame (through the blur stack) and the flow.
pub fn sample_backward(
    pyramid: &[Tensor],
    sigmas: &[f64],
    flow: &Tensor,
    grad_out: &Tensor,
    need_frame: bool,
) -> Result<(Option<Tensor>, Tensor)> {
    let (c, h, w) = check(pyramid, flow)?;
    let m = pyramid.len();
    let plane = h * w;
    let fd = flow.data();
    let go = grad_out.data();
    let mut gflow = vec![0.0; 3 * plane];
    let mut glev = if need_frame { vec![vec![0.0; c * plane]; m] } else { Vec::new() };
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let t = tap(x, y, fd[p], fd[plane + p], fd[2 * plane + p], w, h, m);
            let (mut gdx, mut gdy, mut gdz) = (0.0, 0.0, 0.0);
            for ci in 0..c {
                let g = go[ci * plane + p];
                if g == 0.0 {
                    continue;
                }
                let corners = |lvl: usize| {
                    let d = &pyramid[lvl].data()[ci * plane..];
                    (
                        d[t.y0 * w + t.x0],
                        d[t.y0 * w + t.x1],
                        d[t.y1 * w + t.x0],
                        d[t.y1 * w + t.x1],
                    )
                };
                let mut bil = [0.0; 2];
                for (k, (lvl, wz)) in [(t.z0, 1.0 - t.fz), (t.z1, t.fz)].into_iter().enumerate() {
                    let (a, b, cc, d) = corners(lvl);
                    let top = (1.0 - t.fx) * a + t.fx * b;
                    let bot = (1.0 - t.fx) * cc + t.fx * d;
                    bil[k] = (1.0 - t.fy) * top + t.fy * bot;
                    gdx += g * wz * ((1.0 - t.fy) * (b - a) + t.fy * (d - cc));
                    gdy += g * wz * (bot - top);
                    if need_frame {
                        let gl = &mut glev[lvl][ci * plane..];
                        let s = g * wz;
                        gl[t.y0 * w + t.x0] += s * (1.0 - t.fy) * (1.0 - t.fx);
                        gl[t.y0 * w + t.x1] += s * (1.0 - t.fy) * t.fx;
                        gl[t.y1 * w + t.x0] += s * t.fy * (1.0 - t.fx);
                        gl[t.y1 * w + t.x1] += s * t.fy * t.fx;
                    }
                }
                gdz += g * (bil[1] - bil[0]);
            }
            if t.gx {
                gflow[p] = gdx;
            }
            if t.gy {
                gflow[plane + p] = gdy;
            }
            if t.gz && t.z1 != t.z0 {
                gflow[2 * plane + p] = gdz;
            }
        }
    }
    let gframe = if need_frame {
        let mut acc = Tensor::zeros(&[c, h, w]);
        for (lvl, g) in glev.into_iter().enumerate() {
            let g = Tensor::from_parts(vec![c, h, w], g);
            acc.add_assign(&gaussian_blur_adjoint(&g, sigmas[lvl]));
        }
        Some(acc)
    } else {
        None
    };
    Ok((gframe, Tensor::from_parts(vec![3, h, w], gflow)))
}

