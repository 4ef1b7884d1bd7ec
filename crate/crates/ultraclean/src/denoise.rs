//! Baseline-variant generators: pixel-wise non-local mean and local median
//! filters, plus a centered log-magnitude DFT view for visual diagnostics.
//!
//! Both filters clamp coordinates at the image border (replicate padding), so
//! window sizes are constant and outputs are deterministic. Patch distances
//! are computed in 0–255 pixel units so the conventional magnitudes of the
//! `sigma` and `h` parameters apply directly.

use crate::dataio::Image;
use crate::error::{Error, Result};

/// Parameters of the pixel-wise non-local mean filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NlmParams {
    /// Patch half-width; patches are (2r+1)².
    pub patch_radius: usize,
    /// Search-window half-width around each pixel.
    pub search_radius: usize,
    /// Noise standard deviation in 0–255 units.
    pub sigma: f64,
    /// Filtering strength in 0–255 units.
    pub h: f64,
}

impl NlmParams {
    pub fn new(patch_radius: usize, search_radius: usize, sigma: f64, h: f64) -> Result<Self> {
        if patch_radius < 1 {
            return Err(Error::Config("patch_radius must be >= 1".into()));
        }
        if search_radius < patch_radius {
            return Err(Error::Config(format!(
                "search_radius {search_radius} must be >= patch_radius {patch_radius}"
            )));
        }
        if !(sigma >= 0.0) {
            return Err(Error::Config("sigma must be >= 0".into()));
        }
        if !(h > 0.0) {
            return Err(Error::Config("h must be > 0".into()));
        }
        Ok(Self { patch_radius, search_radius, sigma, h })
    }
}

impl Default for NlmParams {
    /// 7×7 patches, 21×21 search window, sigma = h = 10: the de-facto
    /// defaults of the common fast NLM implementations.
    fn default() -> Self {
        Self { patch_radius: 3, search_radius: 10, sigma: 10.0, h: 10.0 }
    }
}

/// Parameters of the local median filter; the window is (2·radius+1)².
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MedianParams {
    pub kernel_radius: usize,
}

impl MedianParams {
    pub fn new(kernel_radius: usize) -> Result<Self> {
        if kernel_radius < 1 {
            return Err(Error::Config("kernel_radius must be >= 1".into()));
        }
        Ok(Self { kernel_radius })
    }
}

impl Default for MedianParams {
    fn default() -> Self {
        Self { kernel_radius: 1 }
    }
}

#[inline]
fn weight(d2: f64, sigma: f64, h: f64) -> f64 {
    (-(d2 - 2.0 * sigma * sigma).max(0.0) / (h * h)).exp()
}

/// Pixel-wise non-local mean.
///
/// For every pixel p and channel i the output is
/// `sum_q c_i(q) w(p,q) / sum_q w(p,q)` over the clipped search window, where
/// `w(p,q) = exp(-max(d^2 - 2 sigma^2, 0) / h^2)` and `d^2` is the squared
/// patch difference averaged over all channels and patch offsets.
pub fn nlm_denoise(img: &Image, params: &NlmParams) -> Image {
    let (height, width, channels) = img.shape();
    let r = params.patch_radius as isize;
    let s = params.search_radius as isize;
    let patch_norm = (channels * (2 * params.patch_radius + 1).pow(2)) as f64;

    // 0-255 scaled copy; all arithmetic in f64.
    let scaled: Vec<f64> = img.data().iter().map(|&v| v as f64 * 255.0).collect();
    let at = |y: isize, x: isize, c: usize| -> f64 {
        let yy = y.clamp(0, height as isize - 1) as usize;
        let xx = x.clamp(0, width as isize - 1) as usize;
        scaled[(yy * width + xx) * channels + c]
    };

    let mut out = vec![0.0f64; height * width * channels];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let y0 = (y - s).max(0);
            let y1 = (y + s).min(height as isize - 1);
            let x0 = (x - s).max(0);
            let x1 = (x + s).min(width as isize - 1);
            let mut weight_sum = 0.0f64;
            let mut value_sum = vec![0.0f64; channels];
            for qy in y0..=y1 {
                for qx in x0..=x1 {
                    let mut d2 = 0.0f64;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            for c in 0..channels {
                                let diff = at(y + dy, x + dx, c) - at(qy + dy, qx + dx, c);
                                d2 += diff * diff;
                            }
                        }
                    }
                    d2 /= patch_norm;
                    let w = weight(d2, params.sigma, params.h);
                    weight_sum += w;
                    let base = (qy as usize * width + qx as usize) * channels;
                    for (c, acc) in value_sum.iter_mut().enumerate() {
                        *acc += w * scaled[base + c];
                    }
                }
            }
            let base = (y as usize * width + x as usize) * channels;
            for (c, acc) in value_sum.iter().enumerate() {
                out[base + c] = acc / weight_sum / 255.0;
            }
        }
    }
    Image::from_clamped(height, width, channels, &out)
}

/// Local median: each pixel is replaced per channel by the median of its
/// (2·radius+1)² window. The clamped window always holds an odd count, so
/// the median is an element of the window.
pub fn median_denoise(img: &Image, params: &MedianParams) -> Image {
    let (height, width, channels) = img.shape();
    let r = params.kernel_radius as isize;
    let side = 2 * params.kernel_radius + 1;
    let mut out = vec![0.0f32; height * width * channels];
    let mut window = Vec::with_capacity(side * side);
    for y in 0..height as isize {
        for x in 0..width as isize {
            for c in 0..channels {
                window.clear();
                for dy in -r..=r {
                    for dx in -r..=r {
                        let yy = (y + dy).clamp(0, height as isize - 1) as usize;
                        let xx = (x + dx).clamp(0, width as isize - 1) as usize;
                        window.push(img.get(yy, xx, c));
                    }
                }
                let mid = window.len() / 2;
                window.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
                out[(y as usize * width + x as usize) * channels + c] = window[mid];
            }
        }
    }
    // Medians of in-range values are in range; no clamping needed.
    Image::new(height, width, channels, out).expect("median preserves range")
}

/// Unshifted 2-D DFT magnitudes of the channel-mean grid, row-major.
/// Forward transform without normalization, so Parseval reads
/// `sum |X|^2 = N * sum |x|^2` with `N = H*W`.
pub fn dft2_magnitude(img: &Image) -> Vec<f64> {
    let (height, width, channels) = img.shape();
    let mut grid = vec![0.0f64; height * width];
    for y in 0..height {
        for x in 0..width {
            let mut sum = 0.0;
            for c in 0..channels {
                sum += img.get(y, x, c) as f64;
            }
            grid[y * width + x] = sum / channels as f64;
        }
    }
    // Row-column decomposition with naive O(N^2) 1-D transforms; image sides
    // are small enough that this is instant and exactly checkable.
    let mut re = grid;
    let mut im = vec![0.0f64; height * width];
    dft_rows(&mut re, &mut im, height, width);
    transpose(&mut re, height, width);
    transpose(&mut im, height, width);
    dft_rows(&mut re, &mut im, width, height);
    transpose(&mut re, width, height);
    transpose(&mut im, width, height);
    re.iter().zip(&im).map(|(a, b)| (a * a + b * b).sqrt()).collect()
}

fn dft_rows(re: &mut [f64], im: &mut [f64], rows: usize, cols: usize) {
    let mut out_re = vec![0.0f64; cols];
    let mut out_im = vec![0.0f64; cols];
    for row in 0..rows {
        let base = row * cols;
        for (k, (or, oi)) in out_re.iter_mut().zip(out_im.iter_mut()).enumerate() {
            let mut acc_re = 0.0;
            let mut acc_im = 0.0;
            for n in 0..cols {
                let angle = -2.0 * std::f64::consts::PI * (k * n) as f64 / cols as f64;
                let (sin, cos) = angle.sin_cos();
                let (vr, vi) = (re[base + n], im[base + n]);
                acc_re += vr * cos - vi * sin;
                acc_im += vr * sin + vi * cos;
            }
            *or = acc_re;
            *oi = acc_im;
        }
        re[base..base + cols].copy_from_slice(&out_re);
        im[base..base + cols].copy_from_slice(&out_im);
    }
}

fn transpose(data: &mut Vec<f64>, rows: usize, cols: usize) {
    let mut out = vec![0.0f64; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    *data = out;
}

/// Centered log-magnitude spectrum of the channel mean, rescaled to [0,1].
/// The DC bin lands at the spatial center (H/2, W/2).
pub fn dft_log_magnitude(img: &Image) -> Image {
    let (height, width, _) = img.shape();
    let mag = dft2_magnitude(img);
    let mut shifted = vec![0.0f64; height * width];
    for ky in 0..height {
        for kx in 0..width {
            let sy = (ky + height / 2) % height;
            let sx = (kx + width / 2) % width;
            shifted[sy * width + sx] = (1.0 + mag[ky * width + kx]).ln();
        }
    }
    let max = shifted.iter().cloned().fold(0.0f64, f64::max);
    let min = shifted.iter().cloned().fold(f64::INFINITY, f64::min);
    let span = max - min;
    let rescaled: Vec<f64> = if span > 0.0 {
        shifted.iter().map(|&v| (v - min) / span).collect()
    } else {
        vec![0.0; height * width]
    };
    Image::from_clamped(height, width, 1, &rescaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize, c: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * c).map(|_| rng.gen_range(0.0..=1.0)).collect();
        Image::new(h, w, c, data).unwrap()
    }

    /// Independent brute-force NLM: materializes a replicate-padded buffer
    /// and walks pixel/window/patch loops in a different decomposition than
    /// the implementation.
    fn nlm_brute_force(img: &Image, p: &NlmParams) -> Vec<f64> {
        let (h, w, ch) = img.shape();
        let r = p.patch_radius;
        let pad = r;
        let ph = h + 2 * pad;
        let pw = w + 2 * pad;
        let mut padded = vec![0.0f64; ph * pw * ch];
        for y in 0..ph {
            for x in 0..pw {
                let sy = (y as isize - pad as isize).clamp(0, h as isize - 1) as usize;
                let sx = (x as isize - pad as isize).clamp(0, w as isize - 1) as usize;
                for c in 0..ch {
                    padded[(y * pw + x) * ch + c] = img.get(sy, sx, c) as f64 * 255.0;
                }
            }
        }
        let patch_d2 = |py: usize, px: usize, qy: usize, qx: usize| -> f64 {
            let mut sum = 0.0;
            for dy in 0..2 * r + 1 {
                for dx in 0..2 * r + 1 {
                    for c in 0..ch {
                        let a = padded[((py + dy) * pw + px + dx) * ch + c];
                        let b = padded[((qy + dy) * pw + qx + dx) * ch + c];
                        sum += (a - b) * (a - b);
                    }
                }
            }
            sum / (ch * (2 * r + 1) * (2 * r + 1)) as f64
        };
        let mut out = vec![0.0f64; h * w * ch];
        for y in 0..h {
            for x in 0..w {
                let mut wsum = 0.0;
                let mut vsum = vec![0.0f64; ch];
                for qy in y.saturating_sub(p.search_radius)..=(y + p.search_radius).min(h - 1) {
                    for qx in x.saturating_sub(p.search_radius)..=(x + p.search_radius).min(w - 1)
                    {
                        let d2 = patch_d2(y, x, qy, qx);
                        let wgt =
                            (-(d2 - 2.0 * p.sigma * p.sigma).max(0.0) / (p.h * p.h)).exp();
                        wsum += wgt;
                        for c in 0..ch {
                            vsum[c] += wgt * img.get(qy, qx, c) as f64;
                        }
                    }
                }
                for c in 0..ch {
                    out[(y * w + x) * ch + c] = vsum[c] / wsum;
                }
            }
        }
        out
    }

    #[test]
    fn nlm_constant_image_is_fixed_point() {
        let img = Image::constant(12, 12, 3, 0.42);
        let out = nlm_denoise(&img, &NlmParams::default());
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn weight_is_one_below_noise_floor() {
        let sigma = 10.0;
        for d2 in [0.0, 50.0, 199.9, 200.0] {
            assert_eq!(weight(d2, sigma, 10.0), 1.0, "d2 = {d2}");
        }
        assert!(weight(200.1, sigma, 10.0) < 1.0);
    }

    #[test]
    fn nlm_matches_brute_force_oracle() {
        let params = NlmParams::new(1, 2, 10.0, 10.0).unwrap();
        for seed in 0..3 {
            let img = random_image(seed, 16, 16, 3);
            let fast = nlm_denoise(&img, &params);
            let oracle = nlm_brute_force(&img, &params);
            for (a, &b) in fast.data().iter().zip(&oracle) {
                assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn nlm_grayscale_supported() {
        let params = NlmParams::new(1, 2, 10.0, 10.0).unwrap();
        let img = random_image(9, 16, 16, 1);
        let fast = nlm_denoise(&img, &params);
        let oracle = nlm_brute_force(&img, &params);
        for (a, &b) in fast.data().iter().zip(&oracle) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn nlm_output_in_range() {
        let img = random_image(4, 16, 16, 3);
        let out = nlm_denoise(&img, &NlmParams::default());
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn nlm_params_validation() {
        assert!(NlmParams::new(0, 2, 10.0, 10.0).is_err());
        assert!(NlmParams::new(3, 2, 10.0, 10.0).is_err());
        assert!(NlmParams::new(1, 2, -1.0, 10.0).is_err());
        assert!(NlmParams::new(1, 2, 10.0, 0.0).is_err());
    }

    #[test]
    fn median_of_listed_window() {
        // 3x3 image holding the spec's nine window values.
        let values = [0.3, 0.1, 0.4, 0.9, 0.4, 0.0, 0.5, 0.7, 0.8];
        let mut sorted = values;
        sorted.sort_by(f32::total_cmp);
        assert_eq!(sorted[4], 0.4);
        let img = Image::new(3, 3, 1, values.to_vec()).unwrap();
        let out = median_denoise(&img, &MedianParams::default());
        assert_eq!(out.get(1, 1, 0), 0.4);
    }

    #[test]
    fn median_removes_salt_pixel() {
        let mut img = Image::zeros(8, 8, 1);
        img.set(3, 3, 0, 1.0);
        let out = median_denoise(&img, &MedianParams::default());
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn median_matches_sort_oracle_bitwise() {
        let img = random_image(11, 16, 16, 3);
        let params = MedianParams::new(2).unwrap();
        let out = median_denoise(&img, &params);
        let (h, w, ch) = img.shape();
        let r = params.kernel_radius as isize;
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    let mut window = Vec::new();
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                            let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                            window.push(img.get(yy, xx, c));
                        }
                    }
                    window.sort_by(f32::total_cmp);
                    let expected = window[window.len() / 2];
                    assert_eq!(out.get(y, x, c).to_bits(), expected.to_bits());
                }
            }
        }
    }

    #[test]
    fn median_constant_image_unchanged() {
        let img = Image::constant(10, 10, 3, 0.77);
        let out = median_denoise(&img, &MedianParams::default());
        assert_eq!(img.data(), out.data());
    }

    #[test]
    fn dft_constant_image_is_dc_only() {
        let img = Image::constant(16, 16, 3, 0.5);
        let mag = dft2_magnitude(&img);
        assert!((mag[0] - 0.5 * 256.0).abs() < 1e-9);
        for (i, &m) in mag.iter().enumerate().skip(1) {
            assert!(m.abs() < 1e-9, "bin {i} = {m}");
        }
        let view = dft_log_magnitude(&img);
        // DC relocated to the spatial center and rescaled to 1.
        assert_eq!(view.get(8, 8, 0), 1.0);
        let bright: usize = view.data().iter().filter(|&&v| v > 0.5).count();
        assert_eq!(bright, 1);
    }

    #[test]
    fn dft_column_sinusoid_has_two_bins() {
        let (h, w) = (16usize, 16usize);
        let f = 3usize;
        let mut data = Vec::with_capacity(h * w);
        for _y in 0..h {
            for x in 0..w {
                let v = 0.5 + 0.25 * (2.0 * std::f64::consts::PI * (f * x) as f64 / w as f64).sin();
                data.push(v as f32);
            }
        }
        let img = Image::new(h, w, 1, data).unwrap();
        let mag = dft2_magnitude(&img);
        // f32 pixel quantization leaves a ~1e-5 noise floor; the two signal
        // bins sit at 0.25 * N / 2 = 32.
        let mut off_dc: Vec<usize> = (1..h * w).filter(|&i| mag[i] > 1e-3).collect();
        off_dc.sort_unstable();
        assert_eq!(off_dc, vec![f, w - f]);
        assert!(mag[f] > 10.0);
    }

    #[test]
    fn dft_parseval_identity() {
        let img = random_image(21, 12, 12, 3);
        let (h, w, ch) = img.shape();
        let mut grid = vec![0.0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for c in 0..ch {
                    s += img.get(y, x, c) as f64;
                }
                grid[y * w + x] = s / ch as f64;
            }
        }
        let spatial: f64 = grid.iter().map(|v| v * v).sum();
        let mag = dft2_magnitude(&img);
        let spectral: f64 = mag.iter().map(|m| m * m).sum();
        let n = (h * w) as f64;
        assert!(
            (spectral - n * spatial).abs() < 1e-6 * n * spatial.max(1.0),
            "{spectral} vs {}",
            n * spatial
        );
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn small_image() -> impl Strategy<Value = Image> {
        prop::collection::vec(0.0f32..=0.8, 64..=64)
            .prop_map(|data| Image::new(8, 8, 1, data).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn denoisers_stay_in_range(img in small_image()) {
            let nlm = nlm_denoise(&img, &NlmParams::new(1, 2, 10.0, 10.0).unwrap());
            let med = median_denoise(&img, &MedianParams::default());
            prop_assert!(nlm.data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(med.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn median_shift_equivariance(img in small_image(), shift in 0.01f32..0.2) {
            let base = median_denoise(&img, &MedianParams::default());
            let shifted_data: Vec<f32> = img.data().iter().map(|&v| v + shift).collect();
            let shifted = Image::new(8, 8, 1, shifted_data).unwrap();
            let out = median_denoise(&shifted, &MedianParams::default());
            for (a, b) in base.data().iter().zip(out.data()) {
                prop_assert!((a + shift - b).abs() < 1e-6);
            }
        }
    }
}
