use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Returned by [`psnr`] for identical frames.
pub const LOSSLESS_PSNR: f64 = f64::INFINITY;

/// Peak-1.0 PSNR in dB over all channels.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", a.shape(), b.shape()));
    }
    let mse = a.mse(b)?;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        LOSSLESS_PSNR
    } else {
        -10.0 * mse.log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_values() {
        let a = Tensor::zeros(&[3, 2, 2]);
        assert_eq!(psnr(&a, &a).unwrap(), LOSSLESS_PSNR);
        assert!((psnr(&a, &Tensor::full(&[3, 2, 2], 0.1)).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&a, &Tensor::ones(&[3, 2, 2])).unwrap(), 0.0);
        assert!(psnr(&a, &Tensor::zeros(&[3, 2, 3])).is_err());
    }
}
