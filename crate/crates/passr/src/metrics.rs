//! Image-quality scoring: PSNR and single-scale SSIM over a border-cropped
//! region, computed on [0,1] images (optionally after 8-bit quantization
//! for parity with file-based evaluation).

use crate::error::TensorError;
use crate::tensor::Tensor;

/// PSNR reported for an exact match, in dB.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Copy, Debug)]
pub struct EvalConfig {
    /// Pixels removed from each side before scoring.
    pub border_crop: usize,
    /// Quantize both images to 8-bit levels first.
    pub quantized: bool,
}

impl EvalConfig {
    /// Border crop defaults to the upscale factor.
    pub fn for_scale(scale: usize) -> Self {
        EvalConfig { border_crop: scale, quantized: false }
    }
}

fn check_pair(op: &'static str, a: &Tensor<f64>, b: &Tensor<f64>, cfg: &EvalConfig) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if a.shape().len() != 3 {
        return Err(TensorError::BadShape { op, expected: "H,W,C".into(), got: a.shape().to_vec() });
    }
    let (h, w) = (a.shape()[0], a.shape()[1]);
    if 2 * cfg.border_crop >= h || 2 * cfg.border_crop >= w {
        return Err(TensorError::InvalidArg {
            op,
            msg: format!("border crop {} swallows a {h}x{w} image", cfg.border_crop),
        });
    }
    Ok(())
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn cropped_region(a: &Tensor<f64>, crop: usize) -> (usize, usize, usize, usize, usize) {
    let (h, w, c) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    (crop, h - crop, crop, w - crop, c)
}

/// 10·log10(1/MSE) over the cropped region; identical images report the cap.
pub fn psnr(a: &Tensor<f64>, b: &Tensor<f64>, cfg: &EvalConfig) -> Result<f64, TensorError> {
    check_pair("psnr", a, b, cfg)?;
    let (i0, i1, j0, j1, c) = cropped_region(a, cfg.border_crop);
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in i0..i1 {
        for j in j0..j1 {
            for ch in 0..c {
                let (mut x, mut y) = (a.at(&[i, j, ch]), b.at(&[i, j, ch]));
                if cfg.quantized {
                    x = quantize(x);
                    y = quantize(y);
                }
                let d = x - y;
                sum += d * d;
                n += 1;
            }
        }
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// BT.601 luma from an RGB (or already single-channel) image.
fn luma(img: &Tensor<f64>, quantized: bool) -> Tensor<f64> {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    Tensor::from_fn(&[h, w], |idx| {
        let px = |ch: usize| {
            let v = img.at(&[idx[0], idx[1], ch]);
            if quantized {
                quantize(v)
            } else {
                v
            }
        };
        if c >= 3 {
            0.299 * px(0) + 0.587 * px(1) + 0.114 * px(2)
        } else {
            px(0)
        }
    })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    let mut total = 0.0;
    for i in -r..=r {
        for j in -r..=r {
            let g = (-((i * i + j * j) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w.push(g);
            total += g;
        }
    }
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Mean local SSIM on luma: 11×11 Gaussian window (σ = 1.5), stabilizers
/// C1 = 0.01², C2 = 0.03² for unit dynamic range, valid windows only.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>, cfg: &EvalConfig) -> Result<f64, TensorError> {
    check_pair("ssim", a, b, cfg)?;
    let (i0, i1, j0, j1, _) = cropped_region(a, cfg.border_crop);
    let (ch, cw) = (i1 - i0, j1 - j0);
    if ch < SSIM_WINDOW || cw < SSIM_WINDOW {
        return Err(TensorError::InvalidArg {
            op: "ssim",
            msg: format!("cropped {ch}x{cw} region smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        });
    }
    let la = luma(a, cfg.quantized);
    let lb = luma(b, cfg.quantized);
    let win = gaussian_window();
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);

    let mut total = 0.0;
    let mut count = 0usize;
    for i in i0..=(i1 - SSIM_WINDOW) {
        for j in j0..=(j1 - SSIM_WINDOW) {
            let (mut ma, mut mb) = (0.0, 0.0);
            for wi in 0..SSIM_WINDOW {
                for wj in 0..SSIM_WINDOW {
                    let g = win[wi * SSIM_WINDOW + wj];
                    ma += g * la.at(&[i + wi, j + wj]);
                    mb += g * lb.at(&[i + wi, j + wj]);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for wi in 0..SSIM_WINDOW {
                for wj in 0..SSIM_WINDOW {
                    let g = win[wi * SSIM_WINDOW + wj];
                    let da = la.at(&[i + wi, j + wj]) - ma;
                    let db = lb.at(&[i + wi, j + wj]) - mb;
                    va += g * da * da;
                    vb += g * db * db;
                    cov += g * da * db;
                }
            }
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg0() -> EvalConfig {
        EvalConfig { border_crop: 0, quantized: false }
    }

    #[test]
    fn psnr_examples() {
        let mut r = ChaCha8Rng::seed_from_u64(30);
        let a = Tensor::rand_uniform(&[8, 8, 3], 0.0, 1.0, &mut r);
        assert_eq!(psnr(&a, &a, &cfg0()).unwrap(), PSNR_CAP);

        // uniform difference 0.5 -> MSE 0.25 -> 10*log10(4)
        let base = Tensor::full(&[8, 8, 3], 0.25);
        let off = Tensor::full(&[8, 8, 3], 0.75);
        let got = psnr(&base, &off, &cfg0()).unwrap();
        assert!((got - 6.0206).abs() < 1e-3, "got {got}");

        // MSE 0.01 -> 20 dB
        let off01 = Tensor::full(&[8, 8, 3], 0.35);
        let got = psnr(&base, &off01, &cfg0()).unwrap();
        assert!((got - 20.0).abs() < 1e-9, "got {got}");
    }

    #[test]
    fn psnr_symmetric_and_monotone() {
        let mut r = ChaCha8Rng::seed_from_u64(31);
        let a = Tensor::rand_uniform(&[10, 12, 3], 0.2, 0.8, &mut r);
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1] {
            let b = a.map(|v| v + amp);
            let p1 = psnr(&a, &b, &cfg0()).unwrap();
            let p2 = psnr(&b, &a, &cfg0()).unwrap();
            assert_eq!(p1, p2);
            assert!(p1 < last, "amp {amp}: {p1} !< {last}");
            last = p1;
        }
    }

    #[test]
    fn psnr_matches_direct_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(32);
        let a = Tensor::rand_uniform(&[6, 9, 3], 0.0, 1.0, &mut r);
        let b = Tensor::rand_uniform(&[6, 9, 3], 0.0, 1.0, &mut r);
        let mse: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / a.numel() as f64;
        let expect = 10.0 * (1.0 / mse).log10();
        assert!((psnr(&a, &b, &cfg0()).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn border_crop_ignores_frame_content() {
        let mut r = ChaCha8Rng::seed_from_u64(33);
        let a = Tensor::rand_uniform(&[20, 24, 3], 0.0, 1.0, &mut r);
        let b = Tensor::rand_uniform(&[20, 24, 3], 0.0, 1.0, &mut r);
        let cfg = EvalConfig { border_crop: 4, quantized: false };
        let p0 = psnr(&a, &b, &cfg).unwrap();
        let s0 = ssim(&a, &b, &cfg).unwrap();
        // clobber the frame of both images
        let clobber = |img: &Tensor<f64>| {
            Tensor::from_fn(img.shape(), |idx| {
                let (h, w) = (img.shape()[0], img.shape()[1]);
                if idx[0] < 4 || idx[0] >= h - 4 || idx[1] < 4 || idx[1] >= w - 4 {
                    0.123
                } else {
                    img.at(idx)
                }
            })
        };
        assert_eq!(psnr(&clobber(&a), &clobber(&b), &cfg).unwrap(), p0);
        assert_eq!(ssim(&clobber(&a), &clobber(&b), &cfg).unwrap(), s0);
    }

    #[test]
    fn psnr_errors() {
        let a = Tensor::<f64>::zeros(&[8, 8, 3]);
        let b = Tensor::<f64>::zeros(&[8, 9, 3]);
        assert!(psnr(&a, &b, &cfg0()).is_err());
        let cfg = EvalConfig { border_crop: 4, quantized: false };
        assert!(psnr(&a, &a, &cfg).is_err());
    }

    #[test]
    fn ssim_identical_is_one() {
        let mut r = ChaCha8Rng::seed_from_u64(34);
        let a = Tensor::rand_uniform(&[14, 16, 3], 0.0, 1.0, &mut r);
        let s = ssim(&a, &a, &cfg0()).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "got {s}");
    }

    #[test]
    fn ssim_negative_on_inverted_texture() {
        // mean-0.5 texture against its negative: covariance flips sign
        let mut r = ChaCha8Rng::seed_from_u64(35);
        let a = Tensor::from_fn(&[16, 16, 3], |_| {
            use rand::Rng;
            0.5 + r.gen_range(-0.4..0.4)
        });
        let b = a.map(|v| 1.0 - v);
        let s = ssim(&a, &b, &cfg0()).unwrap();
        assert!(s < 0.0, "got {s}");
    }

    #[test]
    fn ssim_symmetric_and_window_errors() {
        let mut r = ChaCha8Rng::seed_from_u64(36);
        let a = Tensor::rand_uniform(&[13, 15, 3], 0.0, 1.0, &mut r);
        let b = Tensor::rand_uniform(&[13, 15, 3], 0.0, 1.0, &mut r);
        let s1 = ssim(&a, &b, &cfg0()).unwrap();
        let s2 = ssim(&b, &a, &cfg0()).unwrap();
        assert!((s1 - s2).abs() < 1e-12);
        assert!(s1 > -1.0 && s1 < 1.0);

        let tiny = Tensor::<f64>::zeros(&[8, 8, 3]);
        assert!(ssim(&tiny, &tiny, &cfg0()).is_err());
    }

    #[test]
    fn ssim_matches_sliding_window_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(37);
        let a = Tensor::rand_uniform(&[13, 14, 3], 0.0, 1.0, &mut r);
        let b = Tensor::rand_uniform(&[13, 14, 3], 0.0, 1.0, &mut r);

        // independent re-implementation with explicit index arithmetic
        let la = luma(&a, false);
        let lb = luma(&b, false);
        let win = gaussian_window();
        let (c1, c2) = (0.0001, 0.0009);
        let mut vals = Vec::new();
        for i in 0..=(13 - SSIM_WINDOW) {
            for j in 0..=(14 - SSIM_WINDOW) {
                let mut stats = [0.0f64; 5];
                for wi in 0..SSIM_WINDOW {
                    for wj in 0..SSIM_WINDOW {
                        let g = win[wi * SSIM_WINDOW + wj];
                        let x = la.at(&[i + wi, j + wj]);
                        let y = lb.at(&[i + wi, j + wj]);
                        stats[0] += g * x;
                        stats[1] += g * y;
                        stats[2] += g * x * x;
                        stats[3] += g * y * y;
                        stats[4] += g * x * y;
                    }
                }
                let (mx, my) = (stats[0], stats[1]);
                let vx = stats[2] - mx * mx;
                let vy = stats[3] - my * my;
                let cov = stats[4] - mx * my;
                vals.push(((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)));
            }
        }
        let oracle: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        let got = ssim(&a, &b, &cfg0()).unwrap();
        assert!((got - oracle).abs() < 1e-6, "got {got}, oracle {oracle}");
    }

    #[test]
    fn quantized_mode_changes_scores() {
        let mut r = ChaCha8Rng::seed_from_u64(38);
        let a = Tensor::rand_uniform(&[12, 12, 3], 0.0, 1.0, &mut r);
        let b = a.map(|v| v + 0.0007); // below one quantization level for most pixels
        let exact = psnr(&a, &b, &cfg0()).unwrap();
        let q = psnr(&a, &b, &EvalConfig { border_crop: 0, quantized: true }).unwrap();
        assert_ne!(exact, q);
    }
}
