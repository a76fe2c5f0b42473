mod common;

use vtok::metrics::{psnr, ssim, ssim_with, MetricReport, SsimParams, PSNR_CAP};
use vtok::net::VideoTensor;
use vtok::tensor::Tensor;

#[test]
fn unit_cases() {
    let [p_same, s_same, p_off, _] = common::metric_unit_cases().unwrap();
    assert_eq!(p_same, PSNR_CAP);
    assert!((s_same - 1.0).abs() < 1e-6);
    assert!((p_off - 20.0).abs() < 1e-6, "{p_off}");
}

#[test]
fn psnr_by_hand() {
    // mse 0.25 → 10·log10(4)
    let p = psnr(&[0.0, 1.0], &[0.5, 0.5], 1.0).unwrap();
    assert!((p - 10.0 * 4f64.log10()).abs() < 1e-12);
    assert!((psnr(&[0.0], &[2.0], 255.0).unwrap() - 10.0 * (255.0f64 * 255.0 / 4.0).log10()).abs() < 1e-9);
    assert!(psnr(&[0.0], &[0.0, 1.0], 1.0).is_err());
    assert!(psnr(&[], &[], 1.0).is_err());
}

#[test]
fn ssim_of_constant_frames_is_the_luminance_term() {
    let (x, y) = (0.3, 0.7);
    let a = Tensor::full(&[16, 16], x);
    let b = Tensor::full(&[16, 16], y);
    let c1 = 0.01f64.powi(2);
    let expected = (2.0 * x * y + c1) / (x * x + y * y + c1);
    assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn ssim_is_symmetric_and_decreases_with_noise() {
    let a = common::uniform(&[3, 24, 24], 0.0, 1.0, 1);
    let noise = common::normal(&[3, 24, 24], 2);
    let mut last = 1.0;
    for sigma in [0.01, 0.05, 0.2] {
        let b = Tensor::new(
            a.shape().to_vec(),
            a.data().iter().zip(noise.data()).map(|(x, n)| x + sigma * n).collect(),
        )
        .unwrap();
        let s = ssim(&a, &b).unwrap();
        assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert!(s < last, "sigma {sigma}: {s} >= {last}");
        last = s;
    }
}

#[test]
fn ssim_window_must_fit() {
    let a = Tensor::full(&[3, 8, 8], 0.5);
    assert!(ssim(&a, &a).is_err());
    let small = SsimParams {
        window: 7,
        ..SsimParams::default()
    };
    assert!((ssim_with(&a, &a, &small).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn report_rescales_from_signed_range() {
    // 0.2 in [-1, 1] is 0.1 in [0, 1]
    let a = common::uniform(&[2, 3, 16, 16], -1.0, 0.8, 4);
    let b = a.map(|v| v + 0.2);
    let r = MetricReport::evaluate(&VideoTensor::new(a.clone()).unwrap(), &VideoTensor::new(b).unwrap()).unwrap();
    assert_eq!(r.frames.len(), 2);
    assert!((r.psnr - 20.0).abs() < 1e-6);
    let same = MetricReport::evaluate(&VideoTensor::new(a.clone()).unwrap(), &VideoTensor::new(a).unwrap()).unwrap();
    assert_eq!(same.psnr, PSNR_CAP);
    assert!(same.to_csv().starts_with("frame,psnr,ssim\n0,100,1"));
    assert!(same.to_table().contains("mean"));
}
