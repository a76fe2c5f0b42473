//! PSNR and SSIM on `[0, 1]`-range frames.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::net::VideoTensor;
use crate::tensor::{Real, Tensor};

/// PSNR returned for identical inputs.
pub const PSNR_CAP: f64 = 100.0;

/// `10·log10(peak² / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("psnr", format!("{} vs {} samples", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Empty("psnr"));
    }
    if peak <= 0.0 {
        return Err(Error::Config(format!("psnr peak must be positive, got {peak}")));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the samples.
    pub range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            range: 1.0,
        }
    }
}

fn gaussian(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..window)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM of one `H × W` plane over every position where the window fits.
pub fn ssim_plane(a: &[f64], b: &[f64], height: usize, width: usize, p: &SsimParams) -> Result<f64> {
    if a.len() != height * width || b.len() != a.len() {
        return Err(Error::shape("ssim", format!("{}/{} samples for {height}×{width}", a.len(), b.len())));
    }
    let k = p.window;
    if k == 0 || height < k || width < k {
        return Err(Error::shape("ssim", format!("{height}×{width} frame smaller than {k}×{k} window")));
    }
    let g = gaussian(k, p.sigma);
    let c1 = (p.k1 * p.range).powi(2);
    let c2 = (p.k2 * p.range).powi(2);
    let mut total = 0.0;
    for y in 0..=height - k {
        for x in 0..=width - k {
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (dy, gy) in g.iter().enumerate() {
                let row = (y + dy) * width + x;
                for (dx, gx) in g.iter().enumerate() {
                    let wgt = gy * gx;
                    let (va, vb) = (a[row + dx], b[row + dx]);
                    ma += wgt * va;
                    mb += wgt * vb;
                    aa += wgt * va * va;
                    bb += wgt * vb * vb;
                    ab += wgt * va * vb;
                }
            }
            let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / ((height - k + 1) * (width - k + 1)) as f64)
}

/// SSIM of two `[C, H, W]` (or `[H, W]`) frames, averaged over channels.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    ssim_with(a, b, &SsimParams::default())
}

pub fn ssim_with(a: &Tensor<f64>, b: &Tensor<f64>, p: &SsimParams) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ssim", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (c, h, w) = match *a.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::shape("ssim", format!("expected [C, H, W], got {s:?}"))),
    };
    let n = h * w;
    let mut sum = 0.0;
    for ch in 0..c {
        sum += ssim_plane(&a.data()[ch * n..][..n], &b.data()[ch * n..][..n], h, w, p)?;
    }
    Ok(sum / c as f64)
}

/// Maps `[-1, 1]` samples to `[0, 1]`.
pub fn to_unit_range<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| (x.f64() + 1.0) / 2.0).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameMetrics {
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub frames: Vec<FrameMetrics>,
    pub psnr: f64,
    pub ssim: f64,
    pub utilization: Option<f64>,
    /// Free-form description of what was evaluated.
    pub config: Option<String>,
}

impl MetricReport {
    /// Per-frame PSNR / SSIM between two `[-1, 1]` clips, after rescaling to
    /// `[0, 1]`.
    pub fn evaluate<T: Real>(reference: &VideoTensor<T>, test: &VideoTensor<T>) -> Result<Self> {
        if reference.shape() != test.shape() {
            return Err(Error::shape(
                "evaluate",
                format!("{:?} vs {:?}", reference.shape(), test.shape()),
            ));
        }
        let [f, c, h, w] = reference.shape();
        let mut frames = Vec::with_capacity(f);
        for i in 0..f {
            let a = to_unit_range(reference.frame(i));
            let b = to_unit_range(test.frame(i));
            let p = psnr(&a, &b, 1.0)?;
            let s = ssim(&Tensor::new(vec![c, h, w], a)?, &Tensor::new(vec![c, h, w], b)?)?;
            frames.push(FrameMetrics { psnr: p, ssim: s });
        }
        let n = f as f64;
        Ok(Self {
            psnr: frames.iter().map(|m| m.psnr).sum::<f64>() / n,
            ssim: frames.iter().map(|m| m.ssim).sum::<f64>() / n,
            frames,
            utilization: None,
            config: None,
        })
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        if let Some(c) = &self.config {
            let _ = writeln!(s, "# {c}");
        }
        let _ = writeln!(s, "{:>6}  {:>9}  {:>7}", "frame", "PSNR(dB)", "SSIM");
        for (i, m) in self.frames.iter().enumerate() {
            let _ = writeln!(s, "{i:>6}  {:>9.3}  {:>7.4}", m.psnr, m.ssim);
        }
        let _ = writeln!(s, "{:>6}  {:>9.3}  {:>7.4}", "mean", self.psnr, self.ssim);
        if let Some(u) = self.utilization {
            let _ = writeln!(s, "utilization {:.1}%", 100.0 * u);
        }
        s
    }

    /// `frame,psnr,ssim` rows, then a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,psnr,ssim\n");
        for (i, m) in self.frames.iter().enumerate() {
            let _ = writeln!(s, "{i},{},{}", m.psnr, m.ssim);
        }
        let _ = writeln!(s, "mean,{},{}", self.psnr, self.ssim);
        if let Some(u) = self.utilization {
            let _ = writeln!(s, "utilization,{u},");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(n: usize) -> Vec<f64> {
        (0..n * n).map(|i| ((i / n + i % n) % 2) as f64).collect()
    }

    #[test]
    fn psnr_cases() {
        let a = vec![0.3; 64];
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 100.0);
        let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-6);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        assert!(psnr(&a, &b[..10], 1.0).is_err());
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let a = Tensor::new(vec![16, 16], checker(16)).unwrap();
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let inv = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &inv).unwrap() < 0.1);
        assert_eq!(ssim(&a, &inv).unwrap(), ssim(&inv, &a).unwrap());
    }

    #[test]
    fn ssim_window_too_large() {
        let a = Tensor::new(vec![8, 8], vec![0.0; 64]).unwrap();
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn gaussian_normalized() {
        let g = gaussian(11, 1.5);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(g[0], g[10]);
    }
}
