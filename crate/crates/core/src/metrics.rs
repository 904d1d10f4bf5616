//! Image quality metrics: PSNR and single-scale SSIM on the luma channel,
//! plus binary parsing-map accuracy. All metrics are pure functions
//! computed in double precision.
//!
//! Evaluation convention used throughout the crate: images in [0, 1] are
//! converted to the BT.601 studio-swing Y channel, scaled to [0, 255],
//! and compared with `peak = 255`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// 10 * log10(peak^2 / MSE); +inf when the images are identical.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "psnr shapes differ: {} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    let mut se = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x.to_f64() - y.to_f64();
        se += d * d;
    }
    let mse = se / a.shape().numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let d2 = (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Mean single-scale SSIM over an 11x11 Gaussian window (sigma 1.5),
/// valid-mode: windows lie fully inside the image, no padding. Inputs are
/// single-channel planes; batches are averaged over all windows of all
/// planes.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "ssim shapes differ: {} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    let s = a.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {}x{}",
            s.h, s.w
        )));
    }
    let window = gaussian_window();
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let plane = s.h * s.w;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for p in 0..s.n * s.c {
        let pa = &a.data()[p * plane..(p + 1) * plane];
        let pb = &b.data()[p * plane..(p + 1) * plane];
        for wy in 0..=(s.h - SSIM_WINDOW) {
            for wx in 0..=(s.w - SSIM_WINDOW) {
                let mut ma = 0.0;
                let mut mb = 0.0;
                let mut saa = 0.0;
                let mut sbb = 0.0;
                let mut sab = 0.0;
                for ky in 0..SSIM_WINDOW {
                    for kx in 0..SSIM_WINDOW {
                        let w = window[ky * SSIM_WINDOW + kx];
                        let va = pa[(wy + ky) * s.w + wx + kx].to_f64();
                        let vb = pb[(wy + ky) * s.w + wx + kx].to_f64();
                        ma += w * va;
                        mb += w * vb;
                        saa += w * va * va;
                        sbb += w * vb * vb;
                        sab += w * va * vb;
                    }
                }
                let var_a = saa - ma * ma;
                let var_b = sbb - mb * mb;
                let cov = sab - ma * mb;
                let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
                let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Fraction of pixels whose thresholded prediction (>= 0.5 maps to 1)
/// equals the binary ground truth.
pub fn parsing_accuracy<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::contract(format!(
            "parsing_accuracy shapes differ: {} vs {}",
            pred.shape(),
            gt.shape()
        )));
    }
    let mut correct = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let bin = if p.to_f64() >= 0.5 { 1.0 } else { 0.0 };
        if bin == g.to_f64() {
            correct += 1;
        }
    }
    Ok(correct as f64 / pred.shape().numel() as f64)
}

/// BT.601 studio-swing luma from RGB in [0, 1]:
/// Y = (65.481 R + 128.553 G + 24.966 B + 16) / 255, so Y spans
/// [16/255, 235/255].
pub fn rgb_to_y<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let s = img.shape();
    if s.c != 3 {
        return Err(Error::contract(format!("rgb_to_y expects 3 channels, got {}", s.c)));
    }
    let plane = s.h * s.w;
    let mut out = Tensor::zeros(Shape::new(s.n, 1, s.h, s.w));
    for n in 0..s.n {
        for i in 0..plane {
            let r = img.data()[(n * 3) * plane + i].to_f64();
            let g = img.data()[(n * 3 + 1) * plane + i].to_f64();
            let b = img.data()[(n * 3 + 2) * plane + i].to_f64();
            let y = (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0;
            out.data_mut()[n * plane + i] = T::from_f64(y);
        }
    }
    Ok(out)
}

/// Per-sample metric values; `psnr` may be the +inf sentinel.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub parsing_acc: f64,
}

/// Per-sample rows plus aggregate means. Infinite PSNR values are
/// excluded from the PSNR mean and counted separately.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_parsing_acc: f64,
    pub psnr_infinite_count: usize,
}

impl MetricReport {
    pub fn from_rows(rows: Vec<MetricRow>) -> Self {
        let finite: Vec<f64> = rows.iter().map(|r| r.psnr).filter(|p| p.is_finite()).collect();
        let psnr_infinite_count = rows.len() - finite.len();
        let mean_psnr = if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        let mean = |f: fn(&MetricRow) -> f64, rows: &[MetricRow]| {
            rows.iter().map(f).sum::<f64>() / rows.len().max(1) as f64
        };
        MetricReport {
            mean_psnr,
            mean_ssim: mean(|r| r.ssim, &rows),
            mean_parsing_acc: mean(|r| r.parsing_acc, &rows),
            psnr_infinite_count,
            rows,
        }
    }

    /// CSV with one row per sample and a trailing mean row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,psnr,ssim,parsing_acc\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.id, r.psnr, r.ssim, r.parsing_acc));
        }
        out.push_str(&format!(
            "mean,{},{},{}\n",
            self.mean_psnr, self.mean_ssim, self.mean_parsing_acc
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn plane(h: usize, w: usize, v: f64) -> Tensor<f64> {
        Tensor::filled(Shape::new(1, 1, h, w), v)
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let a = plane(8, 8, 123.0);
        assert_eq!(psnr(&a, &a, 255.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_uniform_difference_16_levels() {
        // MSE = 256 -> 10 log10(255^2 / 256) = 24.0480...
        let a = plane(16, 16, 100.0);
        let b = plane(16, 16, 116.0);
        let p = psnr(&a, &b, 255.0).unwrap();
        assert!((p - 24.048).abs() < 1e-3, "psnr {p}");
        assert_eq!(psnr(&a, &b, 255.0).unwrap(), psnr(&b, &a, 255.0).unwrap());
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let mut rng = SplitMix64::new(5);
        let base = Tensor::<f64>::uniform(Shape::new(1, 1, 16, 16), 0.0, 255.0, &mut rng);
        let noise: Vec<f64> = (0..256).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut last = f64::INFINITY;
        for amp in [1.0, 2.0, 4.0, 8.0, 16.0] {
            let noisy = Tensor::from_vec(
                base.shape(),
                base.data().iter().zip(&noise).map(|(&v, &n)| v + amp * n).collect(),
            )
            .unwrap();
            let p = psnr(&base, &noisy, 255.0).unwrap();
            assert!(p < last, "psnr must fall as noise grows");
            last = p;
        }
    }

    #[test]
    fn psnr_shape_mismatch_rejected() {
        let a = plane(8, 8, 1.0);
        let b = plane(8, 9, 1.0);
        assert!(psnr(&a, &b, 255.0).is_err());
    }

    #[test]
    fn ssim_self_is_exactly_one() {
        let mut rng = SplitMix64::new(7);
        let a = Tensor::<f64>::uniform(Shape::new(1, 1, 16, 16), 0.0, 255.0, &mut rng);
        assert_eq!(ssim(&a, &a, 255.0).unwrap(), 1.0);
    }

    #[test]
    fn ssim_constant_images_match_closed_form() {
        // zero variance on both sides: ssim = C1 / (255^2 + C1)
        let a = plane(16, 16, 0.0);
        let b = plane(16, 16, 255.0);
        let c1 = (0.01 * 255.0_f64).powi(2);
        let expect = c1 / (255.0 * 255.0 + c1);
        let got = ssim(&a, &b, 255.0).unwrap();
        assert!((got - expect).abs() < 1e-6, "got {got}, expected {expect}");
    }

    #[test]
    fn ssim_symmetric_and_bounded_on_random_pairs() {
        let mut rng = SplitMix64::new(11);
        for _ in 0..5 {
            let a = Tensor::<f64>::uniform(Shape::new(1, 1, 12, 12), 0.0, 255.0, &mut rng);
            let b = Tensor::<f64>::uniform(Shape::new(1, 1, 12, 12), 0.0, 255.0, &mut rng);
            let ab = ssim(&a, &b, 255.0).unwrap();
            let ba = ssim(&b, &a, 255.0).unwrap();
            assert!((ab - ba).abs() < 1e-9);
            assert!((-1.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn ssim_rejects_tiny_images() {
        let a = plane(8, 8, 1.0);
        assert!(ssim(&a, &a, 255.0).is_err());
    }

    #[test]
    fn parsing_accuracy_basics() {
        let gt =
            Tensor::<f64>::from_f64_slice(Shape::new(1, 1, 2, 2), &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(parsing_accuracy(&gt, &gt).unwrap(), 1.0);
        let inverted = gt.map(|v| 1.0 - v);
        assert_eq!(parsing_accuracy(&inverted, &gt).unwrap(), 0.0);
    }

    #[test]
    fn parsing_accuracy_binarizes_half_up() {
        // an all-0.5 prediction binarizes to all ones, so accuracy equals
        // the fraction of ones in the ground truth
        let mut rng = SplitMix64::new(13);
        let gt = Tensor::<f64>::from_vec(
            Shape::new(1, 1, 8, 8),
            (0..64).map(|_| if rng.next_f64() < 0.3 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let ones = gt.data().iter().filter(|&&v| v == 1.0).count();
        let pred = plane(8, 8, 0.5);
        let acc = parsing_accuracy(&pred, &gt).unwrap();
        assert!((acc - ones as f64 / 64.0).abs() < 1e-12);
    }

    #[test]
    fn parsing_accuracy_complement() {
        let mut rng = SplitMix64::new(17);
        let gt = Tensor::<f64>::from_vec(
            Shape::new(1, 1, 8, 8),
            (0..64).map(|_| if rng.next_f64() < 0.5 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let pred = Tensor::<f64>::from_vec(
            Shape::new(1, 1, 8, 8),
            (0..64).map(|_| rng.uniform(0.0, 1.0)).map(|v| if v == 0.5 { 0.4 } else { v }).collect(),
        )
        .unwrap();
        let flipped = pred.map(|v| 1.0 - v);
        let a = parsing_accuracy(&pred, &gt).unwrap();
        let b = parsing_accuracy(&flipped, &gt).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn luma_reference_values() {
        let black = Tensor::<f64>::zeros(Shape::new(1, 3, 1, 1));
        let white = Tensor::<f64>::filled(Shape::new(1, 3, 1, 1), 1.0);
        let yb = rgb_to_y(&black).unwrap().data()[0];
        let yw = rgb_to_y(&white).unwrap().data()[0];
        assert!((yb - 16.0 / 255.0).abs() < 1e-12);
        assert!((yw - 235.0 / 255.0).abs() < 1e-12);
        let green =
            Tensor::<f64>::from_f64_slice(Shape::new(1, 3, 1, 1), &[0.0, 1.0, 0.0]).unwrap();
        let blue =
            Tensor::<f64>::from_f64_slice(Shape::new(1, 3, 1, 1), &[0.0, 0.0, 1.0]).unwrap();
        assert!(rgb_to_y(&green).unwrap().data()[0] > rgb_to_y(&blue).unwrap().data()[0]);
    }

    #[test]
    fn report_means_and_csv() {
        let rows = vec![
            MetricRow { id: "a".into(), psnr: 30.0, ssim: 0.9, parsing_acc: 1.0 },
            MetricRow { id: "b".into(), psnr: f64::INFINITY, ssim: 1.0, parsing_acc: 0.5 },
            MetricRow { id: "c".into(), psnr: 20.0, ssim: 0.8, parsing_acc: 0.75 },
        ];
        let report = MetricReport::from_rows(rows);
        assert_eq!(report.mean_psnr, 25.0);
        assert_eq!(report.psnr_infinite_count, 1);
        assert!((report.mean_ssim - 0.9).abs() < 1e-12);
        let csv = report.to_csv();
        assert!(csv.starts_with("id,psnr,ssim,parsing_acc\n"));
        assert!(csv.trim_end().ends_with(&format!("mean,25,{},0.75", report.mean_ssim)));
        assert_eq!(csv.lines().count(), 5);
    }
}
