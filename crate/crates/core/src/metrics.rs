//! Full-reference and no-reference quality indexes.

use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::{conv2d_direct_unchecked, Image, Kernel};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Returned by [`psnr`] when the images are identical.
pub const PSNR_IDENTICAL: f64 = f64::INFINITY;

/// `10 log10(peak² / MSE)`.
pub fn psnr(test: &Image, reference: &Image, peak: f64) -> Result<f64> {
    test.check_same_dims(reference)?;
    if !(peak > 0.0) {
        return Err(Error::Parameter(format!("peak must be positive, got {peak}")));
    }
    let mse = test
        .as_slice()
        .iter()
        .zip(reference.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / test.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_IDENTICAL);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let mut w: Vec<f64> = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Mean of local SSIM over all fully contained 11×11 Gaussian windows.
pub fn mssim(test: &Image, reference: &Image, peak: f64) -> Result<f64> {
    test.check_same_dims(reference)?;
    let (w, h) = test.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidImage(format!(
            "{w}x{h} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    if !(peak > 0.0) {
        return Err(Error::Parameter(format!("peak must be positive, got {peak}")));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let (a, b) = (test.as_slice(), reference.as_slice());
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                let row = (y0 + dy) * w + x0;
                for dx in 0..SSIM_WINDOW {
                    let g = win[dy * SSIM_WINDOW + dx];
                    let (p, q) = (a[row + dx], b[row + dx]);
                    ma += g * p;
                    mb += g * q;
                    saa += g * p * p;
                    sbb += g * q * q;
                    sab += g * p * q;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn laplacian(img: &Image) -> Image {
    let k = Kernel::from_raw(3, vec![0.0, -1.0, 0.0, -1.0, 4.0, -1.0, 0.0, -1.0, 0.0]);
    conv2d_direct_unchecked(img, &k)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (p, q) = (x - ma, y - mb);
        sab += p * q;
        saa += p * p;
        sbb += q * q;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Pearson correlation of the Laplacian-filtered images; 0 if either is flat.
pub fn edge_correlation(test: &Image, reference: &Image) -> Result<f64> {
    test.check_same_dims(reference)?;
    if test.width().min(test.height()) < 1 {
        return Err(Error::InvalidImage("empty image".into()));
    }
    let ht = laplacian(test);
    let hr = laplacian(reference);
    if ht == hr {
        return Ok(if ht.as_slice().iter().all(|&v| v == ht.as_slice()[0]) { 0.0 } else { 1.0 });
    }
    Ok(pearson(ht.as_slice(), hr.as_slice()))
}

/// Mean and population variance of the ratio image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioStats {
    pub mean: f64,
    pub variance: f64,
    /// `(4/π − 1)/L`
    pub ideal_variance: f64,
}

pub fn ideal_ratio_variance(looks: u32) -> f64 {
    (4.0 / PI - 1.0) / looks as f64
}

fn mean_var(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let m = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var)
}

/// Statistics of `noisy / despeckled`.
pub fn ratio_image_stats(noisy: &Image, despeckled: &Image, looks: u32) -> Result<RatioStats> {
    noisy.check_same_dims(despeckled)?;
    if looks == 0 {
        return Err(Error::Parameter("looks must be at least 1".into()));
    }
    if let Some(p) = despeckled.as_slice().iter().position(|&v| !(v > 0.0)) {
        return Err(Error::Domain(format!(
            "despeckled pixel {p} is {}, ratio image needs positive values",
            despeckled.as_slice()[p]
        )));
    }
    let ratio = noisy
        .as_slice()
        .iter()
        .zip(despeckled.as_slice())
        .map(|(n, d)| n / d);
    let (mean, variance) = mean_var(ratio);
    Ok(RatioStats {
        mean,
        variance,
        ideal_variance: ideal_ratio_variance(looks),
    })
}

/// Population standard deviation over mean, over the whole image.
pub fn coeff_variation(img: &Image) -> Result<f64> {
    let (m, var) = mean_var(img.as_slice().iter().copied());
    if m == 0.0 || !m.is_finite() {
        return Err(Error::Domain(format!("coefficient of variation needs a nonzero mean, got {m}")));
    }
    Ok(var.sqrt() / m)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub psnr: f64,
    pub mssim: f64,
    pub ec: f64,
    pub ri_m: f64,
    pub ri_v: f64,
    /// Coefficient of variation of the despeckled image.
    pub c_hat: f64,
    /// Coefficient of variation of the clean reference.
    pub c_u_ideal: f64,
    pub ri_v_ideal: f64,
}

/// All indexes for one despeckled image against its clean reference and noisy input.
pub fn evaluate(
    despeckled: &Image,
    reference: &Image,
    noisy: &Image,
    looks: u32,
    peak: f64,
) -> Result<MetricsReport> {
    let ri = ratio_image_stats(noisy, despeckled, looks)?;
    Ok(MetricsReport {
        psnr: psnr(despeckled, reference, peak)?,
        mssim: mssim(despeckled, reference, peak)?,
        ec: edge_correlation(despeckled, reference)?,
        ri_m: ri.mean,
        ri_v: ri.variance,
        c_hat: coeff_variation(despeckled)?,
        c_u_ideal: coeff_variation(reference)?,
        ri_v_ideal: ri.ideal_variance,
    })
}

pub const TABLE_HEADER: &str = "image,looks,psnr,mssim,ec,ri_m,ri_v,c_hat";

/// `v` with six significant digits; infinities print as `inf`/`-inf`.
pub fn sig6(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{v:.5e}")
    }
}

pub fn table_row(name: &str, looks: u32, r: &MetricsReport) -> String {
    format!(
        "{name},{looks},{},{},{},{},{},{}",
        sig6(r.psnr),
        sig6(r.mssim),
        sig6(r.ec),
        sig6(r.ri_m),
        sig6(r.ri_v),
        sig6(r.c_hat)
    )
}

/// Header plus one row per report.
pub fn metrics_table(rows: &[(String, u32, MetricsReport)]) -> String {
    let mut out = String::from(TABLE_HEADER);
    out.push('\n');
    for (name, looks, r) in rows {
        let _ = writeln!(out, "{}", table_row(name, *looks, r));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::speckle::{speckle_field, SpeckleConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, w: usize, h: usize, lo: f64, hi: f64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, |_, _| rng.random_range(lo..hi))
    }

    #[test]
    fn psnr_cases() {
        let a = random(1, 9, 7, 0.0, 255.0);
        assert_eq!(psnr(&a, &a, 255.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 10.0);
        let expect = 20.0 * 25.5f64.log10();
        assert!((psnr(&b, &a, 255.0).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 28.13).abs() < 0.01);

        let c = random(2, 9, 7, 0.0, 255.0);
        let mut se = 0.0;
        for y in 0..7 {
            for x in 0..9 {
                se += (a.get(x, y) - c.get(x, y)).powi(2);
            }
        }
        let oracle = 10.0 * (255.0f64 * 255.0 / (se / 63.0)).log10();
        assert!((psnr(&a, &c, 255.0).unwrap() - oracle).abs() < 1e-10);
        assert_eq!(psnr(&a, &c, 255.0).unwrap(), psnr(&c, &a, 255.0).unwrap());
        assert!(psnr(&a, &Image::zeros(3, 3), 255.0).is_err());
        assert!(psnr(&a, &c, 0.0).is_err());
    }

    #[test]
    fn mssim_identity_and_constants() {
        let a = random(3, 20, 16, 0.0, 255.0);
        assert_eq!(mssim(&a, &a, 255.0).unwrap(), 1.0);
        let (p, q) = (80.0, 120.0);
        let c1 = (0.01f64 * 255.0).powi(2);
        let got = mssim(&Image::filled(12, 12, p), &Image::filled(12, 12, q), 255.0).unwrap();
        assert!((got - (2.0 * p * q + c1) / (p * p + q * q + c1)).abs() < 1e-12);
        assert!(mssim(&Image::zeros(10, 20), &Image::zeros(10, 20), 255.0).is_err());
    }

    #[test]
    fn mssim_decreases_with_noise() {
        let a = Image::from_fn(32, 32, |x, y| 128.0 + 60.0 * ((x as f64) * 0.3).sin() * ((y as f64) * 0.2).cos());
        let noise = random(4, 32, 32, -1.0, 1.0);
        let values: Vec<f64> = [10.0, 40.0, 120.0]
            .iter()
            .map(|amp| {
                let n = a.zip_map(&noise, |v, e| v + amp * e).unwrap();
                mssim(&n, &a, 255.0).unwrap()
            })
            .collect();
        assert!(values[0] < 1.0);
        assert!(values.windows(2).all(|w| w[1] < w[0]), "{values:?}");
    }

    #[test]
    fn edge_correlation_cases() {
        let a = random(5, 12, 10, 0.0, 1.0);
        assert_eq!(edge_correlation(&a, &a).unwrap(), 1.0);
        let shifted = a.map(|v| v + 7.0);
        assert!((edge_correlation(&shifted, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(edge_correlation(&Image::filled(12, 10, 3.0), &a).unwrap(), 0.0);
        assert!(edge_correlation(&a, &Image::zeros(4, 4)).is_err());
    }

    #[test]
    fn ratio_cases() {
        let n = random(6, 10, 10, 0.1, 3.0);
        let same = ratio_image_stats(&n, &n, 1).unwrap();
        assert_eq!((same.mean, same.variance), (1.0, 0.0));
        let half = ratio_image_stats(&n, &n.scale(2.0), 1).unwrap();
        assert_eq!((half.mean, half.variance), (0.5, 0.0));
        assert!(ratio_image_stats(&n, &Image::zeros(10, 10), 1).is_err());
        for l in [1, 3, 5, 8] {
            assert_eq!(ideal_ratio_variance(l), (4.0 / PI - 1.0) / l as f64);
        }
    }

    #[test]
    fn perfect_despeckler_ratio_at_one_look() {
        let clean = Image::filled(500, 500, 3.0);
        let n = speckle_field(500, 500, &SpeckleConfig::new(1, 11).unwrap()).unwrap();
        let noisy = clean.zip_map(&n, |a, b| a * b).unwrap();
        let s = ratio_image_stats(&noisy, &clean, 1).unwrap();
        let mean = PI.sqrt() / 2.0;
        assert!((s.mean / mean - 1.0).abs() < 0.02);
        // the normalized variance reaches 4/π − 1 at one look
        assert!((s.variance / (s.mean * s.mean) / s.ideal_variance - 1.0).abs() < 0.02);
    }

    #[test]
    fn coeff_variation_cases() {
        assert_eq!(coeff_variation(&Image::filled(5, 5, 2.0)).unwrap(), 0.0);
        let two = Image::from_fn(4, 4, |x, _| if x < 2 { 0.0 } else { 6.0 });
        assert_eq!(coeff_variation(&two).unwrap(), 1.0);
        let r = random(7, 9, 9, 1.0, 5.0);
        let v = r.as_slice();
        let m = v.iter().sum::<f64>() / 81.0;
        let mut s = 0.0;
        for x in v {
            s += (x - m) * (x - m);
        }
        assert!((coeff_variation(&r).unwrap() - (s / 81.0).sqrt() / m).abs() < 1e-14);
        assert!(coeff_variation(&Image::zeros(3, 3)).is_err());
    }

    #[test]
    fn table_formatting() {
        assert_eq!(sig6(28.130803608679), "28.1308");
        assert_eq!(sig6(1.0), "1");
        assert_eq!(sig6(0.27323954), "0.27324");
        assert_eq!(sig6(f64::INFINITY), "inf");
        assert_eq!(sig6(123456789.0), "1.23457e8");
        let a = random(8, 16, 16, 1.0, 200.0);
        let r = evaluate(&a, &a, &a, 4, 255.0).unwrap();
        let t = metrics_table(&[("x".into(), 4, r)]);
        assert_eq!(t, "image,looks,psnr,mssim,ec,ri_m,ri_v,c_hat\nx,4,inf,1,1,1,0,".to_string() + &sig6(r.c_hat) + "\n");
    }

    proptest! {
        #[test]
        fn ratio_scaling_law(seed in 0u64..1000, s in 0.1f64..10.0) {
            let n = random(seed, 8, 8, 0.1, 4.0);
            let d = random(seed + 1, 8, 8, 0.5, 4.0);
            let base = ratio_image_stats(&n, &d, 2).unwrap();
            let scaled = ratio_image_stats(&n, &d.scale(s), 2).unwrap();
            prop_assert!((scaled.mean * s / base.mean - 1.0).abs() < 1e-12);
            prop_assert!((scaled.variance * s * s / base.variance - 1.0).abs() < 1e-10);
        }

        #[test]
        fn psnr_is_symmetric(seed in 0u64..1000) {
            let a = random(seed, 6, 5, 0.0, 1.0);
            let b = random(seed + 7, 6, 5, 0.0, 1.0);
            prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        }

        #[test]
        fn ec_ignores_offsets(seed in 0u64..1000, c in -50.0f64..50.0) {
            let a = random(seed, 8, 8, 0.0, 1.0);
            let b = random(seed + 3, 8, 8, 0.0, 1.0);
            let e0 = edge_correlation(&a, &b).unwrap();
            let e1 = edge_correlation(&a.map(|v| v + c), &b).unwrap();
            prop_assert!((e0 - e1).abs() < 1e-9);
            prop_assert!(e0.abs() <= 1.0 + 1e-12);
        }
    }
}
