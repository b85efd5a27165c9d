//! Bicubic resizing and the two degradation kernels.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    let t = x.abs();
    if t <= 1.0 {
        (1.5 * t - 2.5) * t * t + 1.0
    } else if t < 2.0 {
        ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    } else {
        0.0
    }
}

/// Per output index: the clamped source indices and their weights.
struct AxisWeights {
    taps: Vec<Vec<(usize, f64)>>,
}

impl AxisWeights {
    fn new(len_in: usize, len_out: usize) -> Self {
        let scale = len_out as f64 / len_in as f64;
        // shrink the kernel's argument (widen its support) when downscaling
        let k = scale.min(1.0);
        let half = 2.0 / k;
        let taps = (0..len_out)
            .map(|i| {
                let u = (i as f64 + 0.5) / scale - 0.5;
                let lo = (u - half).floor() as i64;
                let hi = (u + half).ceil() as i64;
                let mut row: Vec<(usize, f64)> = Vec::new();
                for j in lo..=hi {
                    let wgt = cubic((u - j as f64) * k);
                    if wgt == 0.0 {
                        continue;
                    }
                    let src = j.clamp(0, len_in as i64 - 1) as usize;
                    match row.iter_mut().find(|(s, _)| *s == src) {
                        Some(e) => e.1 += wgt,
                        None => row.push((src, wgt)),
                    }
                }
                let total: f64 = row.iter().map(|e| e.1).sum();
                for e in &mut row {
                    e.1 /= total;
                }
                row
            })
            .collect();
        AxisWeights { taps }
    }
}

/// Bicubic resize of every plane to `out_h x out_w`, antialiased when
/// shrinking, clamped at the border.
pub fn resize_bicubic(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = img.shape();
    if out_h == 0 || out_w == 0 || s.h == 0 || s.w == 0 {
        return Err(Error::invalid(format!("cannot resize {s} to {out_h}x{out_w}")));
    }
    let wx = AxisWeights::new(s.w, out_w);
    let wy = AxisWeights::new(s.h, out_h);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, out_h, out_w));
    let mut tmp = vec![0.0; s.h * out_w];
    for n in 0..s.n {
        for c in 0..s.c {
            let src = img.plane(n, c);
            for y in 0..s.h {
                let row = &src[y * s.w..(y + 1) * s.w];
                for (x, taps) in wx.taps.iter().enumerate() {
                    tmp[y * out_w + x] = taps.iter().map(|&(j, wgt)| row[j] * wgt).sum();
                }
            }
            let dst = out.plane_mut(n, c);
            for (y, taps) in wy.taps.iter().enumerate() {
                let d = &mut dst[y * out_w..(y + 1) * out_w];
                for &(j, wgt) in taps {
                    let r = &tmp[j * out_w..(j + 1) * out_w];
                    for (o, v) in d.iter_mut().zip(r) {
                        *o += wgt * v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Normalized 1-D Gaussian of odd length `size`.
pub fn gaussian_kernel(sigma: f64, size: usize) -> Vec<f64> {
    let r = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Side of the blur kernel used by the BD degradation.
pub const BD_KERNEL_SIZE: usize = 13;

/// Mirror an out-of-range index back into `0..len` (`d c b | a b c d`),
/// falling back to clamping for images smaller than the kernel radius.
fn reflect(i: i64, len: usize) -> usize {
    let n = len as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

/// Separable Gaussian blur with a `BD_KERNEL_SIZE` kernel and reflective
/// borders.
pub fn gaussian_blur(img: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("blur sigma must be positive, got {sigma}")));
    }
    let k = gaussian_kernel(sigma, BD_KERNEL_SIZE);
    let r = (BD_KERNEL_SIZE / 2) as i64;
    let s = img.shape();
    let mut out = Tensor::zeros(s);
    let mut tmp = vec![0.0; s.plane()];
    for n in 0..s.n {
        for c in 0..s.c {
            let src = img.plane(n, c);
            for y in 0..s.h {
                for x in 0..s.w {
                    tmp[y * s.w + x] = k
                        .iter()
                        .enumerate()
                        .map(|(i, kv)| kv * src[y * s.w + reflect(x as i64 + i as i64 - r, s.w)])
                        .sum();
                }
            }
            let dst = out.plane_mut(n, c);
            for y in 0..s.h {
                for x in 0..s.w {
                    dst[y * s.w + x] = k
                        .iter()
                        .enumerate()
                        .map(|(i, kv)| kv * tmp[reflect(y as i64 + i as i64 - r, s.h) * s.w + x])
                        .sum();
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn check_divisible(s: Shape, scale: usize) -> Result<()> {
    if scale == 0 || !s.h.is_multiple_of(scale) || !s.w.is_multiple_of(scale) || s.h == 0 || s.w == 0 {
        return Err(Error::shape(format!(
            "HR size {}x{} is not divisible by scale {scale}",
            s.h, s.w
        )));
    }
    Ok(())
}

/// Antialiased bicubic downscale of one frame by `scale`.
pub fn downscale_bi(hr: &Tensor, scale: usize) -> Result<Tensor> {
    check_divisible(hr.shape(), scale)?;
    let s = hr.shape();
    resize_bicubic(hr, s.h / scale, s.w / scale)
}

/// Gaussian blur then point sampling at `scale * i + (scale - 1) / 2`.
pub fn downscale_bd(hr: &Tensor, sigma: f64, scale: usize) -> Result<Tensor> {
    check_divisible(hr.shape(), scale)?;
    let blurred = gaussian_blur(hr, sigma)?;
    let s = hr.shape();
    let off = (scale - 1) / 2;
    Ok(Tensor::from_fn(
        Shape::new(s.n, s.c, s.h / scale, s.w / scale),
        |n, c, y, x| blurred.at(n, c, scale * y + off, scale * x + off),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_knots() {
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
        assert_eq!(cubic(-1.0), 0.0);
        assert_eq!(cubic(2.0), 0.0);
        // a = -0.5 at the half-pixel point
        assert!((cubic(0.5) - 0.5625).abs() < 1e-15);
        assert!((cubic(1.5) + 0.0625).abs() < 1e-15);
    }

    #[test]
    fn constant_stays_constant() {
        let img = Tensor::full((1, 3, 20, 12), 0.37);
        for (h, w) in [(5, 3), (20, 12), (41, 7), (1, 1)] {
            let out = resize_bicubic(&img, h, w).unwrap();
            assert_eq!(out.shape(), Shape::new(1, 3, h, w));
            assert!(out.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
        }
    }

    #[test]
    fn identity_resize() {
        let img = Tensor::from_fn((1, 2, 7, 9), |_, c, y, x| ((c * 31 + y * 7 + x * 3) % 11) as f64 / 10.0);
        assert_eq!(resize_bicubic(&img, 7, 9).unwrap(), img);
    }

    #[test]
    fn gaussian_kernel_and_impulse() {
        let k = gaussian_kernel(1.6, BD_KERNEL_SIZE);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut img = Tensor::zeros((1, 1, 21, 21));
        img.set(0, 0, 10, 10, 1.0);
        let b = gaussian_blur(&img, 1.6).unwrap();
        for dy in 0..13 {
            for dx in 0..13 {
                let v = b.at(0, 0, 4 + dy, 4 + dx);
                assert!((v - k[dy] * k[dx]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(-7, 3), 1);
        assert_eq!(reflect(3, 1), 0);
    }

    #[test]
    fn indivisible_rejected() {
        let img = Tensor::zeros((1, 3, 10, 12));
        assert!(matches!(downscale_bi(&img, 4), Err(Error::Shape(_))));
        assert!(downscale_bd(&img, 1.6, 4).is_err());
    }
}
