//! Invariants over random inputs.

use cfdprop::data::{
    degrade, downscale_bd, downscale_bi, read_png, resize_bicubic, synth_sequence, write_png, Degradation, Motion,
    SynthSpec, VideoSequence, BD_SIGMA,
};
use cfdprop::flow::{read_flo_from, warp_image, write_flo_to, FlowField};
use cfdprop::loss::{charbonnier, fft_loss};
use cfdprop::metrics::{profile_image, psnr, ssim, temporal_profile, ChannelMode};
use cfdprop::model::{read_checkpoint_from, write_checkpoint_to, CfdModel, ModelConfig};
use cfdprop::optim::cosine_lr;
use cfdprop::seed::rng_for;
use cfdprop::tensor::kernels::{self, concat_channels, pixel_shuffle, pixel_unshuffle, split_channels};
use cfdprop::tensor::{read_raw_from, write_raw_to, Tensor};
use proptest::prelude::*;

fn tensor(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    Tensor::uniform((n, c, h, w), -1.0, 1.0, &mut rng_for(seed, "properties"))
}

fn sorted(t: &Tensor) -> Vec<u64> {
    let mut v: Vec<u64> = t.data().iter().map(|x| x.to_bits()).collect();
    v.sort_unstable();
    v
}

fn roll(t: &Tensor, dy: usize, dx: usize) -> Tensor {
    let s = t.shape();
    Tensor::from_fn(s, |n, c, y, x| t.at(n, c, (y + dy) % s.h, (x + dx) % s.w))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dac_selects_the_larger_magnitude(c in 1usize..4, h in 1usize..6, w in 1usize..6, seed: u64) {
        let a = tensor(1, c, h, w, seed);
        let b = tensor(1, c, h, w, seed ^ 1);
        let d = kernels::dac_forward(&a, &b).unwrap();
        for i in 0..d.numel() {
            prop_assert_eq!(d.data()[i].abs(), a.data()[i].abs().max(b.data()[i].abs()));
        }
        let mean_abs = |t: &Tensor| t.data().iter().map(|v| v.abs()).sum::<f64>() / t.numel() as f64;
        prop_assert!(mean_abs(&d) >= mean_abs(&a).max(mean_abs(&b)));
        let again = kernels::dac_forward(&d, &b).unwrap();
        prop_assert_eq!(again.data(), d.data());
        // ties go to the warped input, including opposite signs
        let neg = a.map(|v| -v);
        let tie = kernels::dac_forward(&a, &neg).unwrap();
        prop_assert_eq!(tie.data(), a.data());
    }

    #[test]
    fn pixel_shuffle_is_a_permutation(c in 1usize..3, r in 1usize..4, h in 1usize..5, w in 1usize..5, seed: u64) {
        let x = tensor(2, c * r * r, h, w, seed);
        let up = pixel_shuffle(&x, r).unwrap();
        prop_assert_eq!(up.shape().c, c);
        prop_assert_eq!((up.shape().h, up.shape().w), (h * r, w * r));
        prop_assert_eq!(sorted(&up), sorted(&x));
        let back = pixel_unshuffle(&up, r).unwrap();
        prop_assert_eq!(back.data(), x.data());
    }

    #[test]
    fn concat_split_roundtrip(a in 1usize..4, b in 1usize..4, seed: u64) {
        let x = tensor(1, a, 3, 4, seed);
        let y = tensor(1, b, 3, 4, seed ^ 7);
        let joined = concat_channels(&[&x, &y]).unwrap();
        prop_assert!((joined.sum() - (x.sum() + y.sum())).abs() < 1e-12);
        let mut both = sorted(&x);
        both.extend(sorted(&y));
        both.sort_unstable();
        prop_assert_eq!(sorted(&joined), both);
        let parts = split_channels(&joined, &[a, b]).unwrap();
        prop_assert_eq!(parts[0].data(), x.data());
        prop_assert_eq!(parts[1].data(), y.data());
    }

    #[test]
    fn delta_kernel_conv_is_identity(c in 1usize..4, h in 1usize..7, w in 1usize..7, seed: u64) {
        let x = tensor(1, c, h, w, seed);
        let k = Tensor::from_fn((c, c, 3, 3), |o, i, y, xx| if o == i && y == 1 && xx == 1 { 1.0 } else { 0.0 });
        let y = kernels::conv2d_forward(&x, &k, None, 1).unwrap();
        prop_assert_eq!(y.data(), x.data());
    }

    #[test]
    fn flo_roundtrip_is_exact_at_32_bit(h in 0usize..6, w in 0usize..6, seed: u64) {
        let t = tensor(1, 2, h.max(1), w.max(1), seed);
        let (h, w) = (if h == 0 || w == 0 { 0 } else { h }, if h == 0 || w == 0 { 0 } else { w });
        let u: Vec<f64> = t.plane(0, 0).iter().take(h * w).map(|&v| (v * 10.0) as f32 as f64).collect();
        let v: Vec<f64> = t.plane(0, 1).iter().take(h * w).map(|&v| (v * 10.0) as f32 as f64).collect();
        let field = FlowField::from_components(h, w, u, v).unwrap();
        let mut buf = Vec::new();
        write_flo_to(&field, &mut buf).unwrap();
        prop_assert_eq!(buf.len(), 12 + 8 * h * w);
        prop_assert_eq!(read_flo_from(&mut buf.as_slice()).unwrap(), field);
    }

    #[test]
    fn raw_tensor_roundtrip(n in 1usize..3, c in 1usize..4, h in 0usize..5, w in 0usize..5, seed: u64) {
        let t = Tensor::from_fn((n, c, h, w), |a, b, y, x| (seed as f64).sin() * (a + b + y * x) as f64 / 7.0);
        let mut buf = Vec::new();
        write_raw_to(&t, &mut buf).unwrap();
        let (back, end) = read_raw_from(&mut buf.as_slice(), 0).unwrap();
        prop_assert_eq!(end, buf.len() as u64);
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert_eq!(back.data(), t.data());
    }

    #[test]
    fn losses_bound_below(seed: u64, eps in 1e-4f64..1e-2) {
        let a = tensor(1, 2, 5, 6, seed);
        let b = tensor(1, 2, 5, 6, seed ^ 3);
        prop_assert!(charbonnier(&a, &b, eps).unwrap() > eps);
        prop_assert_eq!(charbonnier(&a, &a, eps).unwrap(), eps);
        prop_assert_eq!(charbonnier(&a, &b, eps).unwrap(), charbonnier(&b, &a, eps).unwrap());
        prop_assert!(fft_loss(&a, &b).unwrap() > 0.0);
        prop_assert_eq!(fft_loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn fft_loss_ignores_common_circular_shifts(dy in 0usize..5, dx in 0usize..6, seed: u64) {
        let a = tensor(1, 2, 5, 6, seed);
        let b = tensor(1, 2, 5, 6, seed ^ 5);
        let base = fft_loss(&a, &b).unwrap();
        let moved = fft_loss(&roll(&a, dy, dx), &roll(&b, dy, dx)).unwrap();
        prop_assert!((base - moved).abs() <= 1e-12 * base);
    }

    #[test]
    fn cosine_schedule_never_rises(total in 1usize..300) {
        for step in 0..total {
            prop_assert!(cosine_lr(step + 1, total, 1e-3, 1e-7) <= cosine_lr(step, total, 1e-3, 1e-7));
        }
    }

    #[test]
    fn zero_flow_warp_is_identity(c in 1usize..4, h in 1usize..7, w in 1usize..7, seed: u64) {
        let x = tensor(1, c, h, w, seed);
        let warped = warp_image(&x, &FlowField::zeros(h, w)).unwrap();
        prop_assert_eq!(warped.data(), x.data());
    }
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let model = CfdModel::new(ModelConfig {
        seed: 9,
        ..ModelConfig::tiny(3)
    })
    .unwrap();
    let mut buf = Vec::new();
    write_checkpoint_to(&model, &mut buf).unwrap();
    let back = read_checkpoint_from(&mut buf.as_slice()).unwrap();
    assert_eq!(back.config(), model.config());
    for (name, t) in model.params() {
        assert_eq!(back.params()[name].data(), t.data(), "{name}");
    }
}

#[test]
fn png_roundtrip_on_8_bit_values() {
    let dir = tempfile::tempdir().unwrap();
    let img = Tensor::from_fn((1, 3, 5, 7), |_, c, y, x| {
        ((c * 37 + y * 11 + x * 5) % 256) as f64 / 255.0
    });
    let p = dir.path().join("a.png");
    write_png(&img, &p).unwrap();
    assert_eq!(read_png(&p).unwrap().data(), img.data());
}

fn hr_pattern(h: usize, w: usize, ox: usize, oy: usize) -> Tensor {
    Tensor::from_fn((1, 3, h, w), |_, c, y, x| {
        let (x, y) = ((x + ox) as f64, (y + oy) as f64);
        0.5 + 0.2 * (0.31 * x + c as f64).sin() * (0.17 * y).cos() + 0.1 * (0.05 * x * y).sin()
    })
}

#[test]
fn degradations_commute_with_whole_lr_pixel_shifts() {
    // content moved by 4 HR pixels equals the LR output moved by 1 pixel
    let (h, w) = (64, 64);
    let a = hr_pattern(h, w, 0, 0);
    let b = hr_pattern(h, w, 4, 4);
    let m = 4;
    for (name, la, lb) in [
        ("bi", downscale_bi(&a, 4).unwrap(), downscale_bi(&b, 4).unwrap()),
        (
            "bd",
            downscale_bd(&a, BD_SIGMA, 4).unwrap(),
            downscale_bd(&b, BD_SIGMA, 4).unwrap(),
        ),
    ] {
        for y in m..16 - m {
            for x in m..16 - m {
                for c in 0..3 {
                    let d = (lb.at(0, c, y, x) - la.at(0, c, y + 1, x + 1)).abs();
                    assert!(d < 1e-10, "{name} at ({y}, {x}): {d:e}");
                }
            }
        }
    }
}

#[test]
fn degraded_values_stay_in_range() {
    let mut rng = rng_for(4, "properties/range");
    let hr = Tensor::uniform((1, 3, 32, 32), 0.0, 1.0, &mut rng);
    let (lo, hi) = (hr.min(), hr.max());
    let bd = downscale_bd(&hr, BD_SIGMA, 4).unwrap();
    assert!(bd.min() >= lo && bd.max() <= hi);
    let bi = downscale_bi(&hr, 4).unwrap();
    let ring = 0.12 * (hi - lo);
    assert!(
        bi.min() >= lo - ring && bi.max() <= hi + ring,
        "{} {}",
        bi.min(),
        bi.max()
    );
}

#[test]
fn antialiasing_attenuates_a_period_8_cosine() {
    let hr = Tensor::from_fn((1, 1, 8, 64), |_, _, _, x| {
        0.5 + 0.4 * (std::f64::consts::TAU * x as f64 / 8.0).cos()
    });
    let amplitude = |t: &Tensor| (t.max() - t.min()) / 2.0;
    let point = Tensor::from_fn((1, 1, 2, 16), |_, _, y, x| hr.at(0, 0, 4 * y, 4 * x));
    let lr = resize_bicubic(&hr, 2, 16).unwrap();
    assert!(
        amplitude(&lr) < amplitude(&point),
        "{} vs {}",
        amplitude(&lr),
        amplitude(&point)
    );
}

#[test]
fn synthetic_pairs_align_under_ground_truth_flow() {
    for motion in [Motion::Translate { dx: 2.0, dy: 0.0 }, Motion::default()] {
        let spec = SynthSpec {
            motion,
            frames: 3,
            height: 40,
            width: 40,
            ..SynthSpec::default()
        };
        let seq = synth_sequence(&spec).unwrap();
        let flows = seq.flows.as_ref().unwrap();
        for t in 0..2 {
            let back = warp_image(&seq.frames[t + 1], &flows.forward[t]).unwrap();
            let crop = |x: &Tensor| x.crop(4, 4, 32, 32).unwrap();
            let p = psnr(&crop(&back), &crop(&seq.frames[t]), ChannelMode::Rgb).unwrap();
            assert!(p > 40.0, "{motion:?} pair {t}: {p:.2} dB");
        }
    }
}

#[test]
fn degrade_attaches_targets() {
    let frames: Vec<Tensor> = (0..3).map(|t| Tensor::full((1, 3, 16, 12), 0.1 * t as f64)).collect();
    let hr = VideoSequence::new("flat", frames).unwrap();
    for kind in [Degradation::Bi, Degradation::Bd] {
        let lr = degrade(&hr, kind, 4).unwrap();
        assert_eq!(lr.size(), (4, 3));
        for (t, f) in lr.frames.iter().enumerate() {
            assert!(f.data().iter().all(|v| (v - 0.1 * t as f64).abs() < 1e-12));
        }
        assert_eq!(lr.hr.as_ref().unwrap().len(), 3);
    }
}

#[test]
fn psnr_falls_as_noise_grows() {
    let img = tensor(1, 3, 16, 16, 2).map(|v| 0.5 + 0.3 * v);
    let noise = tensor(1, 3, 16, 16, 3);
    let scores: Vec<f64> = [0.01, 0.02, 0.05, 0.1, 0.2]
        .iter()
        .map(|a| psnr(&img, &img.zip_map(&noise, |p, q| p + a * q).unwrap(), ChannelMode::Y).unwrap())
        .collect();
    assert!(scores.windows(2).all(|w| w[1] < w[0]), "{scores:?}");
}

#[test]
fn ssim_approaches_one_as_offset_shrinks() {
    let img = tensor(1, 1, 16, 16, 6).map(|v| 0.5 + 0.3 * v);
    let scores: Vec<f64> = [0.1, 0.05, 0.01]
        .iter()
        .map(|d| ssim(&img, &img.map(|v| v + d)).unwrap())
        .collect();
    assert!(scores.windows(2).all(|w| w[1] > w[0]) && scores[2] < 1.0, "{scores:?}");
}

#[test]
fn reversed_clip_flips_the_profile() {
    let frames: Vec<Tensor> = (0..5).map(|t| tensor(1, 3, 6, 9, t)).collect();
    let rev: Vec<Tensor> = frames.iter().rev().cloned().collect();
    let p = profile_image(&temporal_profile(&frames, 2).unwrap());
    let q = profile_image(&temporal_profile(&rev, 2).unwrap());
    let s = p.shape();
    assert_eq!((s.h, s.w), (5, 9));
    for c in 0..3 {
        for t in 0..5 {
            for x in 0..9 {
                assert_eq!(q.at(0, c, t, x), p.at(0, c, 4 - t, x));
            }
        }
    }
}

#[test]
fn translation_profile_shows_shifted_rows() {
    let spec = SynthSpec {
        motion: Motion::Translate { dx: 1.0, dy: 0.0 },
        frames: 5,
        width: 32,
        ..SynthSpec::default()
    };
    let seq = synth_sequence(&spec).unwrap();
    let p = profile_image(&temporal_profile(&seq.frames, 16).unwrap());
    assert_eq!((p.shape().h, p.shape().w), (5, 32));
    // row t+1 is row t moved right by one pixel, away from the borders
    for t in 0..4 {
        for x in 4..28 {
            assert!((p.at(0, 0, t + 1, x + 1) - p.at(0, 0, t, x)).abs() < 1e-9);
        }
    }
}
