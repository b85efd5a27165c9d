//! Numerical kernels against slow, independent reference computations.

#![allow(clippy::needless_range_loop)]

use cfdprop::data::{cubic, downscale_bd, gaussian_kernel, resize_bicubic, BD_SIGMA};
use cfdprop::loss::{dft2, fft_loss};
use cfdprop::metrics::{rgb_to_y, ssim, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};
use cfdprop::optim::cosine_lr;
use cfdprop::seed::rng_for;
use cfdprop::tensor::kernels::{self, Activation};
use cfdprop::tensor::{GradTape, Tensor};
use rustfft::num_complex::Complex64;

fn random(shape: (usize, usize, usize, usize), label: &str) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng_for(1, label))
}

/// Maclaurin series of erf, summed until the terms vanish.
fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    while term.abs() > 1e-18 * sum.abs().max(1e-300) {
        n += 1.0;
        term *= -x * x / n;
        sum += term / (2.0 * n + 1.0);
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

#[test]
fn gelu_matches_erf_series() {
    for i in -400..=400 {
        let x = i as f64 / 100.0;
        let oracle = 0.5 * x * (1.0 + erf_series(x / std::f64::consts::SQRT_2));
        let got = Activation::Gelu.apply(x);
        assert!((got - oracle).abs() < 1e-12, "gelu({x}) = {got}, series {oracle}");
    }
}

#[test]
fn activation_derivatives_match_differences() {
    let h = 1e-6;
    for kind in [Activation::Sigmoid, Activation::Tanh, Activation::Gelu] {
        for i in -30..=30 {
            let x = i as f64 / 7.0;
            let fd = (kind.apply(x + h) - kind.apply(x - h)) / (2.0 * h);
            let an = kind.derivative(x, kind.apply(x));
            assert!((fd - an).abs() < 1e-8, "{kind:?}'({x}): {an} vs {fd}");
        }
    }
}

fn naive_conv(input: &Tensor, weight: &Tensor, bias: &Tensor, pad: usize) -> Tensor {
    let (s, k) = (input.shape(), weight.shape());
    let (oh, ow) = (s.h + 2 * pad + 1 - k.h, s.w + 2 * pad + 1 - k.w);
    Tensor::from_fn((s.n, k.n, oh, ow), |n, o, y, x| {
        let mut acc = bias.data()[o];
        for i in 0..s.c {
            for ky in 0..k.h {
                for kx in 0..k.w {
                    let (iy, ix) = ((y + ky) as isize - pad as isize, (x + kx) as isize - pad as isize);
                    if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                        acc += weight.at(o, i, ky, kx) * input.at(n, i, iy as usize, ix as usize);
                    }
                }
            }
        }
        acc
    })
}

#[test]
fn conv2d_matches_direct_sum() {
    for (pad, k) in [(1, 3), (0, 3), (0, 1), (2, 5)] {
        let x = random((2, 3, 7, 6), "oracle/conv/x");
        let w = random((4, 3, k, k), "oracle/conv/w");
        let b = random((4, 1, 1, 1), "oracle/conv/b");
        let fast = kernels::conv2d_forward(&x, &w, Some(&b), pad).unwrap();
        let slow = naive_conv(&x, &w, &b, pad);
        assert_eq!(fast.shape(), slow.shape());
        assert!(fast.max_abs_diff(&slow) < 1e-13, "pad {pad} k {k}");
    }
}

#[test]
fn depthwise_matches_direct_sum() {
    let x = random((1, 5, 6, 8), "oracle/dw/x");
    let w = random((5, 1, 3, 3), "oracle/dw/w");
    let b = random((5, 1, 1, 1), "oracle/dw/b");
    let fast = kernels::depthwise_forward(&x, &w, Some(&b), 1).unwrap();
    for c in 0..5 {
        let xc = x.narrow_channels(c, 1).unwrap();
        let wc = w.crop(0, 0, 3, 3).unwrap();
        let wc = Tensor::from_fn((1, 1, 3, 3), |_, _, y, xx| wc.at(c, 0, y, xx));
        let bc = Tensor::full((1, 1, 1, 1), b.data()[c]);
        let slow = naive_conv(&xc, &wc, &bc, 1);
        assert!(
            fast.narrow_channels(c, 1).unwrap().max_abs_diff(&slow) < 1e-13,
            "channel {c}"
        );
    }
}

#[test]
fn layer_norm_statistics() {
    let x = random((2, 6, 5, 4), "oracle/ln");
    let (y, _) =
        kernels::layer_norm_forward(&x, &Tensor::full((6, 1, 1, 1), 1.0), &Tensor::zeros((6, 1, 1, 1)), 1e-6).unwrap();
    // each sample is normalized over all of (c, h, w)
    let per = 6 * 5 * 4;
    for n in 0..2 {
        let v = &y.data()[n * per..(n + 1) * per];
        let mean = v.iter().sum::<f64>() / per as f64;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / per as f64;
        assert!(mean.abs() < 1e-9, "mean {mean}");
        assert!((var - 1.0).abs() < 10.0 * 1e-6, "var {var}");
    }
}

fn naive_dft(plane: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    let tau = 2.0 * std::f64::consts::PI;
    (0..h * w)
        .map(|k| {
            let (u, v) = (k / w, k % w);
            let mut acc = Complex64::default();
            for y in 0..h {
                for x in 0..w {
                    let phase = -tau * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    acc += plane[y * w + x] * Complex64::from_polar(1.0, phase);
                }
            }
            acc
        })
        .collect()
}

#[test]
fn dft_and_fft_loss_match_direct_sums() {
    for (h, w) in [(1, 1), (1, 7), (3, 3), (4, 6), (9, 5), (16, 16)] {
        let a = random((1, 2, h, w), &format!("oracle/dft/a/{h}x{w}"));
        let b = random((1, 2, h, w), &format!("oracle/dft/b/{h}x{w}"));
        let spectra = dft2(&a);
        let mut modulus = 0.0;
        for c in 0..2 {
            let slow = naive_dft(a.plane(0, c), h, w);
            let scale = slow.iter().map(|z| z.norm()).fold(0.0, f64::max);
            for (f, s) in spectra[c].iter().zip(&slow) {
                assert!((f - s).norm() <= 1e-10 * scale, "{h}x{w}");
            }
            let diff: Vec<f64> = a.plane(0, c).iter().zip(b.plane(0, c)).map(|(p, q)| p - q).collect();
            modulus += naive_dft(&diff, h, w).iter().map(|z| z.norm()).sum::<f64>();
        }
        let oracle = modulus / a.numel() as f64;
        let got = fft_loss(&a, &b).unwrap();
        assert!((got - oracle).abs() <= 1e-12 * oracle, "{h}x{w}: {got} vs {oracle}");
    }
}

#[test]
fn fft_loss_gradient_matches_differences() {
    let x = random((1, 2, 5, 6), "oracle/fftgrad/x");
    let gt = random((1, 2, 5, 6), "oracle/fftgrad/gt");
    let mut tape = GradTape::new();
    let v = tape.leaf(x.clone());
    let l = tape.fft_l1(v, &gt).unwrap();
    let g = tape.backward(l).unwrap();
    let g = g.get(v).unwrap();
    let h = 1e-6;
    for i in 0..x.numel() {
        let mut p = x.clone();
        p.data_mut()[i] += h;
        let mut m = x.clone();
        m.data_mut()[i] -= h;
        let fd = (fft_loss(&p, &gt).unwrap() - fft_loss(&m, &gt).unwrap()) / (2.0 * h);
        assert!((fd - g.data()[i]).abs() < 1e-7, "element {i}: {} vs {fd}", g.data()[i]);
    }
}

#[test]
fn bicubic_reproduces_linear_ramps() {
    // the cubic kernel with a = -0.5 reproduces polynomials up to degree 2
    let ramp = Tensor::from_fn((1, 1, 8, 8), |_, _, y, x| 0.1 * x as f64 - 0.05 * y as f64 + 0.3);
    let up = resize_bicubic(&ramp, 32, 32).unwrap();
    for y in 8..24 {
        for x in 8..24 {
            let (sx, sy) = ((x as f64 + 0.5) / 4.0 - 0.5, (y as f64 + 0.5) / 4.0 - 0.5);
            let expect = 0.1 * sx - 0.05 * sy + 0.3;
            assert!((up.at(0, 0, y, x) - expect).abs() < 1e-12);
        }
    }
    let mut partition = 0.0;
    for k in -2..=2 {
        partition += cubic(0.3 + k as f64);
    }
    assert!((partition - 1.0).abs() < 1e-15);
}

#[test]
fn gaussian_kernel_is_normalized_and_symmetric() {
    let k = gaussian_kernel(BD_SIGMA, 13);
    assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    for i in 0..13 {
        assert_eq!(k[i], k[12 - i]);
    }
    let raw: Vec<f64> = (0..13)
        .map(|i| (-((i as f64 - 6.0).powi(2)) / (2.0 * BD_SIGMA * BD_SIGMA)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    for (a, b) in k.iter().zip(&raw) {
        assert!((a - b / total).abs() < 1e-16);
    }
}

#[test]
fn bd_samples_the_blurred_image_at_offset_one() {
    let img = random((1, 3, 24, 20), "oracle/bd");
    let lr = downscale_bd(&img, BD_SIGMA, 4).unwrap();
    let k = gaussian_kernel(BD_SIGMA, 13);
    // away from the border the reflect padding never engages
    for c in 0..3 {
        for (ly, lx) in [(2usize, 2usize), (3, 2), (2, 3)] {
            let (cy, cx) = (4 * ly + 1, 4 * lx + 1);
            let mut acc = 0.0;
            for (i, ky) in k.iter().enumerate() {
                for (j, kx) in k.iter().enumerate() {
                    acc += ky * kx * img.at(0, c, cy + i - 6, cx + j - 6);
                }
            }
            assert!((lr.at(0, c, ly, lx) - acc).abs() < 1e-13);
        }
    }
}

#[test]
fn luma_matches_studio_range_formula() {
    let img = random((1, 3, 3, 4), "oracle/y").map(|v| 0.5 + 0.5 * v);
    let y = rgb_to_y(&img).unwrap();
    for py in 0..3 {
        for px in 0..4 {
            let (r, g, b) = (img.at(0, 0, py, px), img.at(0, 1, py, px), img.at(0, 2, py, px));
            let expect = (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0;
            assert!((y.at(0, 0, py, px) - expect).abs() < 1e-14);
        }
    }
}

/// Windowed SSIM written out directly, one window at a time.
fn naive_ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let m = SSIM_WINDOW;
    let half = (m / 2) as f64;
    let raw: Vec<f64> = (0..m)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    let g: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let mut sum = 0.0;
    let mut count = 0.0;
    for y in 0..=h - m {
        for x in 0..=w - m {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..m {
                for j in 0..m {
                    let wt = g[i] * g[j];
                    let (p, q) = (a[(y + i) * w + x + j], b[(y + i) * w + x + j]);
                    ma += wt * p;
                    mb += wt * q;
                    saa += wt * p * p;
                    sbb += wt * q * q;
                    sab += wt * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            sum += (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1.0;
        }
    }
    sum / count
}

#[test]
fn ssim_matches_direct_windows() {
    let a = random((1, 1, 19, 23), "oracle/ssim/a").map(|v| 0.5 + 0.4 * v);
    let b = random((1, 1, 19, 23), "oracle/ssim/b").map(|v| 0.1 * v);
    let b = a.zip_map(&b, |p, q| p + q).unwrap();
    let got = ssim(&a, &b).unwrap();
    let oracle = naive_ssim(a.data(), b.data(), 19, 23);
    assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");

    let rgb = random((1, 3, 16, 16), "oracle/ssim/rgb").map(|v| 0.5 + 0.4 * v);
    let rgb2 = rgb.map(|v| (v * 0.9 + 0.03).clamp(0.0, 1.0));
    let (ya, yb) = (rgb_to_y(&rgb).unwrap(), rgb_to_y(&rgb2).unwrap());
    let got = ssim(&rgb, &rgb2).unwrap();
    assert!((got - naive_ssim(ya.data(), yb.data(), 16, 16)).abs() < 1e-12);
}

#[test]
fn cosine_schedule_closed_form() {
    let (max, min) = (1e-3, 1e-7);
    for total in [1usize, 7, 100] {
        for step in 0..=total {
            let expect = min + 0.5 * (max - min) * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos());
            assert!((cosine_lr(step, total, max, min) - expect).abs() < 1e-18);
        }
    }
}

#[test]
fn bicubic_matches_golden_values() {
    let golden: serde_json::Value = serde_json::from_str(include_str!("golden/bicubic.json")).unwrap();
    for case in golden["cases"].as_array().unwrap() {
        let dim = |k: &str, i: usize| case[k][i].as_u64().unwrap() as usize;
        let (h, w, oh, ow) = (dim("in", 0), dim("in", 1), dim("out", 0), dim("out", 1));
        let img = Tensor::from_fn((1, 1, h, w), |_, _, y, x| ((7 * y + 3 * x) % 11) as f64 / 10.0);
        let out = resize_bicubic(&img, oh, ow).unwrap();
        for (i, want) in case["values"].as_array().unwrap().iter().enumerate() {
            let got = out.data()[i];
            assert!((got - want.as_f64().unwrap()).abs() < 1e-12, "{h}x{w} -> {oh}x{ow} at {i}: {got}");
        }
    }
}
