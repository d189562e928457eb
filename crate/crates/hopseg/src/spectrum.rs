//! Frequency-domain corpus statistics.
//!
//! A domain's appearance gap from the source corpus is measured entirely
//! in amplitude space: transform each image with a 2-D DFT, center the
//! spectrum, keep a small window around DC, and compare that window
//! against the mean window of the source corpus. The window fraction
//! `beta` controls how much of the low-frequency band participates.
//!
//! Transforms are unnormalized (`sum |F|^2 = H*W * sum |x|^2`), computed
//! per channel, and support arbitrary rectangular sizes.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::raster::Image;

/// Center-shifted 2-D spectrum, one plane per channel.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Row-major `[y][x][c]`, DC bin at `(H/2, W/2)`.
    pub bins: Vec<Complex<f64>>,
}

/// Magnitudes of the centered low-frequency window.
#[derive(Debug, Clone)]
pub struct AmplitudeCrop {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub beta: f64,
    /// Row-major `[y][x][c]`.
    pub values: Vec<f64>,
}

/// Mean amplitude crop of a source corpus.
#[derive(Debug, Clone)]
pub struct SourceProfile {
    pub mean: AmplitudeCrop,
    pub source_height: usize,
    pub source_width: usize,
    pub n_images: usize,
}

fn transform_rows(
    data: &mut [Complex<f64>],
    rows: usize,
    cols: usize,
    planner: &mut FftPlanner<f64>,
    forward: bool,
) {
    let fft = if forward {
        planner.plan_fft_forward(cols)
    } else {
        planner.plan_fft_inverse(cols)
    };
    for r in 0..rows {
        fft.process(&mut data[r * cols..(r + 1) * cols]);
    }
}

fn transpose(data: &[Complex<f64>], rows: usize, cols: usize) -> Vec<Complex<f64>> {
    let mut out = vec![Complex::new(0.0, 0.0); data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// Unnormalized 2-D DFT of one channel plane, DC at index (0, 0).
fn fft2_plane(plane: &[f64], h: usize, w: usize, planner: &mut FftPlanner<f64>) -> Vec<Complex<f64>> {
    let mut data: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
    transform_rows(&mut data, h, w, planner, true);
    let mut data = transpose(&data, h, w);
    transform_rows(&mut data, w, h, planner, true);
    transpose(&data, w, h)
}

#[inline]
fn shifted_index(r: usize, n: usize) -> usize {
    // Bin k of the raw transform lands at (k + n/2) mod n, putting DC at n/2.
    (r + n - n / 2) % n
}

/// Forward transform with the DC bin moved to the center.
pub fn fft2(img: &Image) -> Result<Spectrum> {
    if img.pixels.iter().any(|p| !p.is_finite()) {
        return Err(Error::InvalidInput("non-finite pixels in transform input".into()));
    }
    let (h, w, ch) = (img.height, img.width, img.channels);
    let mut planner = FftPlanner::new();
    let mut bins = vec![Complex::new(0.0, 0.0); h * w * ch];
    for c in 0..ch {
        let plane: Vec<f64> = (0..h * w).map(|i| img.pixels[i * ch + c]).collect();
        let raw = fft2_plane(&plane, h, w, &mut planner);
        for y in 0..h {
            let sy = shifted_index(y, h);
            for x in 0..w {
                let sx = shifted_index(x, w);
                bins[(y * w + x) * ch + c] = raw[sy * w + sx];
            }
        }
    }
    Ok(Spectrum {
        height: h,
        width: w,
        channels: ch,
        bins,
    })
}

/// Inverse of [`fft2`]: unshift, inverse transform, rescale by `1/(H*W)`.
/// Returns pixel values only; labels do not survive a spectral roundtrip.
pub fn ifft2(spec: &Spectrum) -> Result<Image> {
    let (h, w, ch) = (spec.height, spec.width, spec.channels);
    let mut planner = FftPlanner::new();
    let mut pixels = vec![0.0; h * w * ch];
    let norm = 1.0 / (h * w) as f64;
    for c in 0..ch {
        let mut raw = vec![Complex::new(0.0, 0.0); h * w];
        for y in 0..h {
            let sy = shifted_index(y, h);
            for x in 0..w {
                let sx = shifted_index(x, w);
                raw[sy * w + sx] = spec.bins[(y * w + x) * ch + c];
            }
        }
        transform_rows(&mut raw, h, w, &mut planner, false);
        let mut data = transpose(&raw, h, w);
        transform_rows(&mut data, w, h, &mut planner, false);
        let data = transpose(&data, w, h);
        for i in 0..h * w {
            pixels[i * ch + c] = data[i].re * norm;
        }
    }
    Image::new(h, w, ch, pixels)
}

/// Window extent for a fraction `beta` of an axis of length `n`.
fn crop_extent(beta: f64, n: usize) -> usize {
    ((beta * n as f64).floor() as usize).max(1)
}

/// Keep the centered `beta`-window of amplitudes around DC.
///
/// The window is `max(1, floor(beta*H)) x max(1, floor(beta*W))`, centered
/// on the DC bin at `(H/2, W/2)`; on parity mismatch it extends one bin
/// further toward lower indices.
pub fn amplitude_crop(spec: &Spectrum, beta: f64) -> Result<AmplitudeCrop> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::Parameter(format!("beta must be in (0, 1], got {beta}")));
    }
    let ch = spec.channels;
    let hc = crop_extent(beta, spec.height);
    let wc = crop_extent(beta, spec.width);
    let y0 = spec.height / 2 - hc / 2;
    let x0 = spec.width / 2 - wc / 2;
    let mut values = Vec::with_capacity(hc * wc * ch);
    for y in 0..hc {
        for x in 0..wc {
            for c in 0..ch {
                values.push(spec.bins[((y0 + y) * spec.width + (x0 + x)) * ch + c].norm());
            }
        }
    }
    Ok(AmplitudeCrop {
        height: hc,
        width: wc,
        channels: ch,
        beta,
        values,
    })
}

/// Mean amplitude crop over a source corpus of identically shaped images.
pub fn source_profile(images: &[Image], beta: f64) -> Result<SourceProfile> {
    let first = images
        .first()
        .ok_or_else(|| Error::Parameter("source profile needs at least one image".into()))?;
    let (h, w, ch) = (first.height, first.width, first.channels);
    for img in images {
        if img.height != h || img.width != w || img.channels != ch {
            return Err(Error::InvalidInput(format!(
                "source images disagree on shape: {h}x{w}x{ch} vs {}x{}x{}",
                img.height, img.width, img.channels
            )));
        }
    }
    let mut mean: Option<AmplitudeCrop> = None;
    for img in images {
        let crop = amplitude_crop(&fft2(img)?, beta)?;
        match &mut mean {
            None => mean = Some(crop),
            Some(acc) => {
                for (a, v) in acc.values.iter_mut().zip(crop.values.iter()) {
                    *a += v;
                }
            }
        }
    }
    let mut mean = mean.expect("non-empty checked above");
    let n = images.len();
    for v in &mut mean.values {
        *v /= n as f64;
    }
    Ok(SourceProfile {
        mean,
        source_height: h,
        source_width: w,
        n_images: n,
    })
}

/// Mean squared difference between two identically shaped crops.
pub fn crop_distance(a: &AmplitudeCrop, b: &AmplitudeCrop) -> Result<f64> {
    if a.height != b.height || a.width != b.width || a.channels != b.channels {
        return Err(Error::InvalidInput(format!(
            "crop shapes differ: {}x{}x{} vs {}x{}x{}",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        )));
    }
    let sum: f64 = a
        .values
        .iter()
        .zip(b.values.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.values.len() as f64)
}

/// Distance of one image from the source profile: mean squared difference
/// of amplitude-crop entries. Zero iff the crops agree exactly.
pub fn domain_distance(img: &Image, profile: &SourceProfile) -> Result<f64> {
    if img.height != profile.source_height || img.width != profile.source_width {
        return Err(Error::InvalidInput(format!(
            "image is {}x{}, profile was built at {}x{}; resize before ranking",
            img.height, img.width, profile.source_height, profile.source_width
        )));
    }
    let crop = amplitude_crop(&fft2(img)?, profile.mean.beta)?;
    crop_distance(&crop, &profile.mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;

    /// Independent O(N^2) evaluation of the DFT definition, center-shifted.
    /// Twiddles are looked up from 1-D tables; the double sum itself is direct.
    fn naive_dft2_shifted(img: &Image) -> Vec<Complex<f64>> {
        let (h, w, ch) = (img.height, img.width, img.channels);
        let tw = |n: usize| -> Vec<Complex<f64>> {
            (0..n)
                .map(|k| {
                    let ang = -2.0 * std::f64::consts::PI * k as f64 / n as f64;
                    Complex::new(ang.cos(), ang.sin())
                })
                .collect()
        };
        let th = tw(h);
        let tww = tw(w);
        let mut out = vec![Complex::new(0.0, 0.0); h * w * ch];
        for c in 0..ch {
            for ky in 0..h {
                for kx in 0..w {
                    let mut acc = Complex::new(0.0, 0.0);
                    for y in 0..h {
                        let wy = th[(ky * y) % h];
                        for x in 0..w {
                            let wx = tww[(kx * x) % w];
                            acc += wy * wx * img.pixel(y, x, c);
                        }
                    }
                    let sy = (ky + h / 2) % h;
                    let sx = (kx + w / 2) % w;
                    out[(sy * w + sx) * ch + c] = acc;
                }
            }
        }
        out
    }

    fn random_image(h: usize, w: usize, ch: usize, seed: u64) -> Image {
        let mut rng = seeded_rng(seed, "spectrum-test");
        let pixels = (0..h * w * ch).map(|_| rng.gen::<f64>()).collect();
        Image::new(h, w, ch, pixels).unwrap()
    }

    #[test]
    fn constant_image_is_dc_only() {
        let img = Image::new(4, 4, 1, vec![0.3; 16]).unwrap();
        let spec = fft2(&img).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let mag = spec.bins[y * 4 + x].norm();
                if (y, x) == (2, 2) {
                    assert!((mag - 16.0 * 0.3).abs() < 1e-12, "DC magnitude {mag}");
                } else {
                    assert!(mag < 1e-12, "off-DC bin ({y},{x}) has magnitude {mag}");
                }
            }
        }
    }

    #[test]
    fn matches_naive_dft_on_assorted_sizes() {
        for (i, (h, w)) in [(4, 4), (5, 7), (8, 8), (9, 4), (16, 12), (13, 13)]
            .iter()
            .enumerate()
        {
            let img = random_image(*h, *w, 3, 90 + i as u64);
            let spec = fft2(&img).unwrap();
            let oracle = naive_dft2_shifted(&img);
            let mut worst = 0.0f64;
            for (a, b) in spec.bins.iter().zip(oracle.iter()) {
                worst = worst.max((a - b).norm());
            }
            assert!(worst < 1e-9, "{h}x{w}: max deviation {worst}");
        }
    }

    #[test]
    fn parseval_holds() {
        let img = random_image(11, 17, 3, 4);
        let spec = fft2(&img).unwrap();
        let pix: f64 = img.pixels.iter().map(|p| p * p).sum();
        let freq: f64 = spec.bins.iter().map(|b| b.norm_sqr()).sum::<f64>() / (11.0 * 17.0);
        assert!((pix - freq).abs() / pix < 1e-9, "pixel {pix} vs freq {freq}");
    }

    #[test]
    fn inverse_transform_reconstructs_pixels() {
        let img = random_image(10, 6, 3, 5);
        let back = ifft2(&fft2(&img).unwrap()).unwrap();
        let worst = img
            .pixels
            .iter()
            .zip(back.pixels.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(worst < 1e-9, "roundtrip deviation {worst}");
    }

    #[test]
    fn transform_is_pure() {
        let img = random_image(7, 9, 3, 6);
        let a = fft2(&img).unwrap();
        let b = fft2(&img).unwrap();
        for (x, y) in a.bins.iter().zip(b.bins.iter()) {
            assert_eq!(x.re.to_bits(), y.re.to_bits());
            assert_eq!(x.im.to_bits(), y.im.to_bits());
        }
    }

    #[test]
    fn beta_one_keeps_everything() {
        let img = random_image(6, 7, 2, 7);
        let spec = fft2(&img).unwrap();
        let crop = amplitude_crop(&spec, 1.0).unwrap();
        assert_eq!((crop.height, crop.width), (6, 7));
        for (v, b) in crop.values.iter().zip(spec.bins.iter()) {
            assert_eq!(v.to_bits(), b.norm().to_bits());
        }
    }

    #[test]
    fn beta_point_zero_nine_of_100_is_9x9() {
        let img = random_image(100, 100, 1, 8);
        let crop = amplitude_crop(&fft2(&img).unwrap(), 0.09).unwrap();
        assert_eq!((crop.height, crop.width), (9, 9));
    }

    #[test]
    fn tiny_beta_reduces_to_dc() {
        let img = random_image(8, 8, 1, 9);
        let spec = fft2(&img).unwrap();
        let crop = amplitude_crop(&spec, 0.01).unwrap();
        assert_eq!((crop.height, crop.width), (1, 1));
        assert_eq!(crop.values[0].to_bits(), spec.bins[4 * 8 + 4].norm().to_bits());
    }

    #[test]
    fn beta_out_of_range_is_rejected() {
        let spec = fft2(&random_image(4, 4, 1, 10)).unwrap();
        assert!(amplitude_crop(&spec, 0.0).is_err());
        assert!(amplitude_crop(&spec, -0.2).is_err());
        assert!(amplitude_crop(&spec, 1.01).is_err());
        assert!(amplitude_crop(&spec, f64::NAN).is_err());
    }

    #[test]
    fn profile_of_single_image_is_its_crop() {
        let img = random_image(8, 8, 3, 11);
        let profile = source_profile(std::slice::from_ref(&img), 0.5).unwrap();
        let crop = amplitude_crop(&fft2(&img).unwrap(), 0.5).unwrap();
        for (a, b) in profile.mean.values.iter().zip(crop.values.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn profile_averages_two_images() {
        let a = random_image(8, 8, 1, 12);
        let b = random_image(8, 8, 1, 13);
        let profile = source_profile(&[a.clone(), b.clone()], 0.4).unwrap();
        let ca = amplitude_crop(&fft2(&a).unwrap(), 0.4).unwrap();
        let cb = amplitude_crop(&fft2(&b).unwrap(), 0.4).unwrap();
        for i in 0..profile.mean.values.len() {
            let expect = 0.5 * (ca.values[i] + cb.values[i]);
            assert!((profile.mean.values[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn profile_of_copies_equals_single_crop() {
        let img = random_image(8, 8, 3, 14);
        let copies = vec![img.clone(); 5];
        let profile = source_profile(&copies, 0.3).unwrap();
        let crop = amplitude_crop(&fft2(&img).unwrap(), 0.3).unwrap();
        for (a, b) in profile.mean.values.iter().zip(crop.values.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn profile_rejects_empty_and_mixed_shape_corpora() {
        assert!(source_profile(&[], 0.5).is_err());
        let a = random_image(8, 8, 3, 15);
        let b = random_image(8, 6, 3, 16);
        assert!(source_profile(&[a, b], 0.5).is_err());
    }

    #[test]
    fn distance_to_own_profile_is_zero() {
        let img = random_image(16, 16, 3, 17);
        let profile = source_profile(std::slice::from_ref(&img), 0.25).unwrap();
        let d = domain_distance(&img, &profile).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn distance_matches_hand_computed_crops() {
        // 4x4 single-channel fixtures; crop at beta=0.5 is the centered 2x2
        // window. The oracle recomputes both crops from the DFT definition
        // and reduces by mean of squared differences.
        let a = random_image(4, 4, 1, 18);
        let b = random_image(4, 4, 1, 19);
        let profile = source_profile(std::slice::from_ref(&a), 0.5).unwrap();
        let d = domain_distance(&b, &profile).unwrap();

        let oa = naive_dft2_shifted(&a);
        let ob = naive_dft2_shifted(&b);
        let mut sum = 0.0;
        let mut count = 0;
        for y in 1..3 {
            for x in 1..3 {
                let ma = oa[y * 4 + x].norm();
                let mb = ob[y * 4 + x].norm();
                sum += (ma - mb) * (ma - mb);
                count += 1;
            }
        }
        let expect = sum / count as f64;
        assert!((d - expect).abs() < 1e-9 * expect.max(1.0), "{d} vs {expect}");
    }

    /// Distance from a clean image's own profile starts at zero and grows
    /// with the noise level applied to copies of that image.
    #[test]
    fn distance_grows_with_noise_level() {
        use crate::synthdata::{apply_shift, DomainShift, ShiftKind};
        for i in 0..3 {
            // Mid-range pixels keep additive noise essentially clip-free.
            let mut img = random_image(16, 16, 3, 20 + i);
            for p in &mut img.pixels {
                *p = 0.3 + 0.4 * *p;
            }
            let profile = source_profile(std::slice::from_ref(&img), 0.25).unwrap();
            let mut last = domain_distance(&img, &profile).unwrap();
            assert_eq!(last, 0.0);
            for (j, sigma) in [0.02, 0.05, 0.1].iter().enumerate() {
                let shift = DomainShift {
                    kind: ShiftKind::GaussianNoise,
                    magnitude: *sigma,
                    seed: 100 + i * 3 + j as u64,
                };
                let noisy = apply_shift(&img, &shift).unwrap();
                let d = domain_distance(&noisy, &profile).unwrap();
                assert!(d > last, "sigma {sigma}: distance {d} not above {last}");
                last = d;
            }
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut img = random_image(4, 4, 1, 23);
        img.pixels[3] = f64::INFINITY;
        assert!(fft2(&img).is_err());
    }

    #[test]
    fn mismatched_shape_against_profile_is_rejected() {
        let profile = source_profile(&[random_image(8, 8, 3, 24)], 0.5).unwrap();
        let other = random_image(8, 10, 3, 25);
        assert!(domain_distance(&other, &profile).is_err());
    }

    proptest! {
        #[test]
        fn crop_window_always_contains_dc(h in 2usize..24, w in 2usize..24, beta in 0.01f64..1.0) {
            let img = random_image(h, w, 1, 31);
            let spec = fft2(&img).unwrap();
            let crop = amplitude_crop(&spec, beta).unwrap();
            let hc = crop.height;
            let wc = crop.width;
            let y0 = h / 2 - hc / 2;
            let x0 = w / 2 - wc / 2;
            prop_assert!(y0 <= h / 2 && h / 2 < y0 + hc);
            prop_assert!(x0 <= w / 2 && w / 2 < x0 + wc);
            prop_assert!(y0 + hc <= h && x0 + wc <= w);
            prop_assert!(crop.values.iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn crop_distance_is_permutation_invariant(seed in 0u64..1000) {
            let a = amplitude_crop(&fft2(&random_image(6, 6, 1, seed)).unwrap(), 0.5).unwrap();
            let b = amplitude_crop(&fft2(&random_image(6, 6, 1, seed + 5000)).unwrap(), 0.5).unwrap();
            let d = crop_distance(&a, &b).unwrap();
            let mut order: Vec<usize> = (0..a.values.len()).collect();
            order.reverse();
            order.swap(0, a.values.len() / 2);
            let mut pa = a.clone();
            let mut pb = b.clone();
            for (i, &j) in order.iter().enumerate() {
                pa.values[i] = a.values[j];
                pb.values[i] = b.values[j];
            }
            let dp = crop_distance(&pa, &pb).unwrap();
            prop_assert!((d - dp).abs() <= 1e-12 * d.abs().max(1.0));
        }

        #[test]
        fn distance_positive_when_any_entry_differs(idx in 0usize..9, bump in 0.5f64..2.0) {
            let img = random_image(6, 6, 1, 77);
            let crop = amplitude_crop(&fft2(&img).unwrap(), 0.5).unwrap();
            let mut other = crop.clone();
            other.values[idx] += bump;
            prop_assert!(crop_distance(&crop, &other).unwrap() > 0.0);
        }
    }
}
