//! Rate-distortion points, CSV tables, hull consolidation and BD-rate.

use crate::error::{Error, Result};
use std::fmt::Write as _;

#[derive(Clone, Debug, PartialEq)]
pub struct RDPoint {
    pub tag: String,
    pub level: f64,
    pub bpp: f64,
    /// PSNR in dB; `+inf` marks a lossless point.
    pub psnr: f64,
}

impl RDPoint {
    pub fn new(tag: impl Into<String>, level: f64, bpp: f64, psnr: f64) -> Self {
        Self {
            tag: tag.into(),
            level,
            bpp,
            psnr,
        }
    }
}

pub const CSV_HEADER: &str = "tag,level,bpp,psnr_db";

pub fn write_csv(points: &[RDPoint]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for p in points {
        let q = if p.psnr.is_infinite() { "inf".to_string() } else { format!("{}", p.psnr) };
        writeln!(s, "{},{},{},{}", p.tag, p.level, p.bpp, q).unwrap();
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Vec<RDPoint>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        _ => return Err(Error::Format(format!("RD table must start with `{CSV_HEADER}`"))),
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || Error::Format(format!("RD table row {}: {line:?}", i + 2));
            if f.len() != 4 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            let p = RDPoint::new(f[0], num(f[1])?, num(f[2])?, num(f[3])?);
            if !(p.bpp > 0.0) || p.bpp.is_infinite() || p.psnr.is_nan() || p.psnr == f64::NEG_INFINITY {
                return Err(bad());
            }
            Ok(p)
        })
        .collect()
}

/// Upper convex hull of quality against log-bpp, sorted by bpp, keeping only
/// points that improve quality. Lossless points are kept only if they are the
/// cheapest lossless point.
pub fn consolidate_rd(points: &[RDPoint]) -> Vec<RDPoint> {
    let mut finite: Vec<&RDPoint> = points.iter().filter(|p| p.psnr.is_finite()).collect();
    finite.sort_by(|a, b| a.bpp.total_cmp(&b.bpp).then(b.psnr.total_cmp(&a.psnr)));
    let mut hull: Vec<&RDPoint> = Vec::new();
    for p in finite {
        if hull.last().is_some_and(|q| q.bpp == p.bpp) {
            continue;
        }
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            let (ax, bx, px) = (a.bpp.ln(), b.bpp.ln(), p.bpp.ln());
            // b is kept only if it lies strictly above the chord a-p
            let cross = (bx - ax) * (p.psnr - a.psnr) - (b.psnr - a.psnr) * (px - ax);
            if cross >= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    let mut out: Vec<RDPoint> = Vec::new();
    for p in hull {
        if out.last().is_none_or(|q| p.psnr > q.psnr) {
            out.push(p.clone());
        }
    }
    if let Some(l) = points
        .iter()
        .filter(|p| p.psnr == f64::INFINITY)
        .min_by(|a, b| a.bpp.total_cmp(&b.bpp))
    {
        if out.last().is_none_or(|q| l.bpp > q.bpp) {
            out.push(l.clone());
        }
    }
    out
}

/// Monotone piecewise-cubic (Fritsch-Carlson) interpolant through sorted knots.
struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        let n = x.len();
        let h: Vec<f64> = (0..n - 1).map(|i| x[i + 1] - x[i]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d = vec![delta[0]; 2];
        } else {
            for k in 1..n - 1 {
                if delta[k - 1] * delta[k] > 0.0 {
                    let w1 = 2.0 * h[k] + h[k - 1];
                    let w2 = h[k] + 2.0 * h[k - 1];
                    d[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
                }
            }
            d[0] = end_slope(h[0], h[1], delta[0], delta[1]);
            d[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        Self { x, y, d }
    }

    /// Integral of the interpolant over `[a, b]` within the knot range.
    fn integrate(&self, a: f64, b: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..self.x.len() - 1 {
            let (x0, x1) = (self.x[i], self.x[i + 1]);
            let (lo, hi) = (a.max(x0), b.min(x1));
            if hi <= lo {
                continue;
            }
            let h = x1 - x0;
            // antiderivative of the cubic Hermite segment in t = (x - x0) / h
            let prim = |t: f64| {
                let t2 = t * t;
                let t3 = t2 * t;
                let t4 = t3 * t;
                let h00 = t4 / 2.0 - t3 + t;
                let h10 = t4 / 4.0 - 2.0 * t3 / 3.0 + t2 / 2.0;
                let h01 = -t4 / 2.0 + t3;
                let h11 = t4 / 4.0 - t3 / 3.0;
                h * (h00 * self.y[i] + h10 * h * self.d[i] + h01 * self.y[i + 1] + h11 * h * self.d[i + 1])
            };
            total += prim((hi - x0) / h) - prim((lo - x0) / h);
        }
        total
    }
}

fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if d.signum() != d0.signum() {
        0.0
    } else if d0.signum() != d1.signum() && d.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        d
    }
}

fn log_rate_curve(points: &[RDPoint], which: &str) -> Result<Pchip> {
    let mut pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.psnr.is_finite())
        .map(|p| (p.psnr, p.bpp.ln()))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts.dedup_by(|a, b| a.0 == b.0);
    if pts.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "{which} curve needs at least 4 distinct finite points, has {}",
            pts.len()
        )));
    }
    let (x, y) = pts.into_iter().unzip();
    Ok(Pchip::new(x, y))
}

/// Bjontegaard rate difference of `test` against `reference`, in percent.
pub fn bd_rate(reference: &[RDPoint], test: &[RDPoint]) -> Result<f64> {
    let r = log_rate_curve(reference, "reference")?;
    let t = log_rate_curve(test, "test")?;
    let lo = r.x[0].max(t.x[0]);
    let hi = r.x[r.x.len() - 1].min(t.x[t.x.len() - 1]);
    if hi <= lo {
        return Err(Error::InvalidArgument("RD curves do not overlap in quality".into()));
    }
    let avg = (t.integrate(lo, hi) - r.integrate(lo, hi)) / (hi - lo);
    Ok((avg.exp() - 1.0) * 100.0)
}
