//! Forward operators checked against direct-sum evaluations that share no
//! code with the library: naive DFTs, an explicitly built pupil and
//! brute-force cyclic convolution.

use std::f64::consts::PI;

use ndarray::Array2;
use ptychonet::field::{circular_convolve, dft2, dft2_array, idft2, idft2_array, make_ctf_n, make_psf_n};
use ptychonet::models::{
    fp_exitwave_forward, fp_intensity_forward, fp_intensity_forward_complex, incoherent_psf, sim_forward, spi_forward,
    FpObject, FpSpectrumObject, SimScene,
};
use ptychonet::simdata::{band_limit, gen_illumination_grid, generate_dataset, FormationMode};
use ptychonet::{ComplexField, OpticsConfig, Spectrum, C64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_complex(side: usize, rng: &mut ChaCha8Rng) -> Array2<C64> {
    Array2::from_shape_fn((side, side), |_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
}

/// Centered unitary inverse DFT by direct summation.
fn naive_idft(spec: &Array2<C64>) -> Array2<C64> {
    let n = spec.nrows();
    let c = (n / 2) as f64;
    let mut out = Array2::zeros((n, n));
    for r in 0..n {
        for col in 0..n {
            let mut acc = C64::new(0.0, 0.0);
            for kr in 0..n {
                for kc in 0..n {
                    let ph = 2.0 * PI * ((kr as f64 - c) * r as f64 + (kc as f64 - c) * col as f64) / n as f64;
                    acc += spec[[kr, kc]] * C64::from_polar(1.0, ph);
                }
            }
            out[[r, col]] = acc / n as f64;
        }
    }
    out
}

/// Centered unitary forward DFT, kernel `e^{−i2πkx/N}`.
fn naive_forward(x: &Array2<C64>) -> Array2<C64> {
    let n = x.nrows();
    let c = (n / 2) as f64;
    let mut out = Array2::zeros((n, n));
    for kr in 0..n {
        for kc in 0..n {
            let mut acc = C64::new(0.0, 0.0);
            for r in 0..n {
                for col in 0..n {
                    let ph = -2.0 * PI * ((kr as f64 - c) * r as f64 + (kc as f64 - c) * col as f64) / n as f64;
                    acc += x[[r, col]] * C64::from_polar(1.0, ph);
                }
            }
            out[[kr, kc]] = acc / n as f64;
        }
    }
    out
}

fn naive_conv(a: &Array2<C64>, b: &Array2<C64>) -> Array2<C64> {
    let n = a.nrows();
    Array2::from_shape_fn((n, n), |(y, x)| {
        let mut acc = C64::new(0.0, 0.0);
        for yy in 0..n {
            for xx in 0..n {
                acc += a[[yy, xx]] * b[[(y + n - yy) % n, (x + n - xx) % n]];
            }
        }
        acc
    })
}

fn max_abs_diff(a: &Array2<C64>, b: &Array2<C64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

/// Pupil mask on an `n`-grid centered at `n/2 + shift`, straight from the
/// circle condition `√(u²+v²)·dk < NA/λ`.
fn explicit_pupil(n: usize, px: f64, lambda: f64, na: f64, shift: (i64, i64)) -> Array2<f64> {
    let dk = 1.0 / (n as f64 * px);
    let c = (n / 2) as i64;
    Array2::from_shape_fn((n, n), |(row, col)| {
        let u = col as i64 - c - shift.0;
        let v = row as i64 - c - shift.1;
        if ((u * u + v * v) as f64).sqrt() * dk < na / lambda {
            1.0
        } else {
            0.0
        }
    })
}

fn explicit_shift(k: (f64, f64), n: usize, px: f64, lambda: f64) -> (i64, i64) {
    let s = n as f64 * px / lambda;
    ((k.0 * s).round() as i64, (k.1 * s).round() as i64)
}

fn oracle_cfg() -> OpticsConfig {
    OpticsConfig::new(0.532, 0.25, 16, 2, 0.43125).with_wavevectors(vec![(0.0, 0.0), (0.1, -0.05), (0.2, 0.15), (-0.15, 0.0)])
}

#[test]
fn dft_matches_direct_sum_for_small_sides() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for side in 1..=8 {
        let x = random_complex(side, &mut rng);
        let fast = dft2_array(&x);
        let slow = naive_forward(&x);
        assert!(max_abs_diff(&fast, &slow) < 1e-12, "side {side}");
        let back = idft2_array(&slow);
        assert!(max_abs_diff(&back, &x) < 1e-12, "side {side}");
        assert!(max_abs_diff(&naive_idft(&slow), &x) < 1e-12);
    }
}

#[test]
fn typed_transforms_carry_metadata() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = ComplexField::new(random_complex(6, &mut rng), 0.5).unwrap();
    let s = dft2(&f).unwrap();
    assert!(s.centered);
    assert!((s.dk - 1.0 / 3.0).abs() < 1e-15);
    let back = idft2(&s).unwrap();
    assert!((back.px - 0.5).abs() < 1e-15);
    assert!(max_abs_diff(&back.data, &f.data) < 1e-12);
}

#[test]
fn convolution_matches_direct_sum_exhaustively() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for side in 1..=8 {
        for _ in 0..3 {
            let a = random_complex(side, &mut rng);
            let b = random_complex(side, &mut rng);
            let fast = circular_convolve(&ComplexField { data: a.clone(), px: 1.0 }, &ComplexField { data: b.clone(), px: 1.0 }).unwrap();
            assert!(max_abs_diff(&fast.data, &naive_conv(&a, &b)) < 1e-12, "side {side}");
        }
    }
}

#[test]
fn parseval() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for side in [3, 8, 17, 32] {
        let x = random_complex(side, &mut rng);
        let e0: f64 = x.iter().map(|z| z.norm_sqr()).sum();
        let e1: f64 = dft2_array(&x).iter().map(|z| z.norm_sqr()).sum();
        assert!((e0 - e1).abs() <= 1e-12 * e0);
    }
}

#[test]
fn ctf_matches_explicit_pupil() {
    let cfg = oracle_cfg();
    for n in 0..cfg.n_illuminations() {
        let shift = explicit_shift(cfg.wavevectors[n], 16, cfg.px_high_um, cfg.lambda_um);
        let want = explicit_pupil(16, cfg.px_high_um, cfg.lambda_um, cfg.na, shift);
        let got = make_ctf_n(&cfg, n).unwrap();
        assert_eq!(got.data.mapv(|z| z.re), want, "illumination {n}");
        assert!(got.data.iter().all(|z| z.im == 0.0));
    }
}

#[test]
fn shifted_psf_is_a_phase_ramp() {
    // Translating the CTF by +s bins multiplies the PSF by e^{+i2π s·x/N}.
    let cfg = oracle_cfg();
    let psf0 = make_psf_n(&cfg, 0).unwrap().data;
    for n in 1..cfg.n_illuminations() {
        let (sx, sy) = cfg.shift_bins(n).unwrap();
        let psf = make_psf_n(&cfg, n).unwrap().data;
        let ramp = Array2::from_shape_fn((16, 16), |(y, x)| {
            C64::from_polar(1.0, 2.0 * PI * (sx as f64 * x as f64 + sy as f64 * y as f64) / 16.0)
        });
        assert!(max_abs_diff(&psf, &(&psf0 * &ramp)) < 1e-12, "illumination {n}");
    }
}

#[test]
fn intensity_model_matches_direct_sum() {
    let cfg = oracle_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let o = random_complex(16, &mut rng);
    let obj = FpObject::from_complex(&o);
    for n in 0..cfg.n_illuminations() {
        let shift = explicit_shift(cfg.wavevectors[n], 16, cfg.px_high_um, cfg.lambda_um);
        let pupil = explicit_pupil(16, cfg.px_high_um, cfg.lambda_um, cfg.na, shift).mapv(|m| C64::new(m, 0.0));
        let psf = naive_idft(&pupil);
        let psi = naive_conv(&o, &psf);
        let want = Array2::from_shape_fn((8, 8), |(r, c)| psi[[2 * r, 2 * c]].norm_sqr());
        let two_channel = fp_intensity_forward(&obj, &cfg, n).unwrap();
        let complex = fp_intensity_forward_complex(&obj, &cfg, n).unwrap();
        for (got, name) in [(&two_channel, "two-channel"), (&complex, "complex")] {
            let err = got.data.iter().zip(want.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "{name} illumination {n}: {err}");
        }
        assert!((two_channel.px - 0.8625).abs() < 1e-15);
    }
}

#[test]
fn exit_wave_matches_direct_sum() {
    let cfg = OpticsConfig::new(0.532, 0.2, 16, 2, 0.43125).with_wavevectors(vec![(0.0, 0.0), (0.1, -0.05), (0.2, 0.15)]);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let o = random_complex(16, &mut rng);
    let spec = naive_forward(&o);
    let sobj = FpSpectrumObject::from_complex(&spec);
    let m = 8usize;
    for n in 0..cfg.n_illuminations() {
        let (sx, sy) = explicit_shift(cfg.wavevectors[n], 16, cfg.px_high_um, cfg.lambda_um);
        let pupil = explicit_pupil(m, cfg.px_high_um * 2.0, cfg.lambda_um, cfg.na, (0, 0));
        // The low-res grid has the same bin spacing as the high-res spectrum.
        assert!((1.0f64 / (8.0 * 0.8625) - 1.0 / (16.0 * 0.43125)).abs() < 1e-15);
        let window = Array2::from_shape_fn((m, m), |(q, p)| {
            let row = 8 + sy + q as i64 - 4;
            let col = 8 + sx + p as i64 - 4;
            spec[[row as usize, col as usize]] * pupil[[q, p]]
        });
        let want = naive_idft(&window);
        let got = fp_exitwave_forward(&sobj, &cfg, n).unwrap();
        assert!(max_abs_diff(&got.data, &want) < 1e-12, "illumination {n}");
    }
}

#[test]
fn stride_and_crop_data_agree_up_to_window_area() {
    // The coherent image is band-limited to the pupil, so sampling it every
    // `stride` pixels loses nothing: stride-mode intensities are m² times
    // crop-mode intensities whenever the pupil fits inside the crop window.
    let cfg = OpticsConfig::new(0.532, 0.1, 64, 4, 0.43125).with_wavevectors(gen_illumination_grid(3, 3, 0.1).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let obj = FpObject::from_complex(&random_complex(64, &mut rng));
    let stride = generate_dataset(&cfg, &obj, FormationMode::Stride, None).unwrap();
    let crop = generate_dataset(&cfg, &obj, FormationMode::Crop, None).unwrap();
    for (s, c) in stride.measurements.iter().zip(&crop.measurements) {
        let scale = s.data.iter().cloned().fold(0.0, f64::max);
        let err = s.data.iter().zip(c.data.iter()).map(|(a, b)| (a - 256.0 * b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-10 * scale, "{err} vs {scale}");
    }
    let rescaled = crop.measurements_as(FormationMode::Stride);
    assert_eq!(rescaled.len(), stride.measurements.len());
    // band-limiting the object changes neither
    let op = ptychonet::models::FpOperator::new(&cfg).unwrap();
    let bl = generate_dataset(&cfg, &band_limit(&obj, &op), FormationMode::Stride, None).unwrap();
    for (a, b) in bl.measurements.iter().zip(&stride.measurements) {
        let err = a.data.iter().zip(b.data.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10);
    }
}

#[test]
fn sim_and_spi_match_direct_sums() {
    let cfg = OpticsConfig::new(0.532, 0.3, 12, 1, 0.43125);
    let psf = incoherent_psf(&cfg).unwrap();
    assert!((psf.sum() - 1.0).abs() < 1e-12);
    // |idft(pupil)|², normalized
    let pupil = explicit_pupil(12, 0.43125, 0.532, 0.3, (0, 0)).mapv(|m| C64::new(m, 0.0));
    let coh = naive_idft(&pupil).mapv(|z| z.norm_sqr());
    let want = &coh / coh.sum();
    assert!(psf.iter().zip(want.iter()).all(|(a, b)| (a - b).abs() < 1e-14));

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let object = Array2::from_shape_fn((12, 12), |_| rng.random::<f64>());
    let patterns: Vec<_> = (0..3).map(|_| Array2::from_shape_fn((12, 12), |_| rng.random::<f64>())).collect();
    let scene = SimScene::new(object.clone(), patterns.clone(), psf.clone()).unwrap();
    for (n, p) in patterns.iter().enumerate() {
        let lit = (&object * p).mapv(|v| C64::new(v, 0.0));
        let want = naive_conv(&lit, &psf.mapv(|v| C64::new(v, 0.0))).mapv(|z| z.re);
        let got = sim_forward(&scene, n).unwrap();
        assert!(got.data.iter().zip(want.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(got.data.iter().all(|&v| v >= -1e-12));

        let mut direct = 0.0;
        for r in 0..12 {
            for c in 0..12 {
                direct += object[[r, c]] * p[[r, c]];
            }
        }
        assert!((spi_forward(&object, p).unwrap() - direct).abs() < 1e-12);
    }
}

#[test]
fn spectrum_type_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_complex(10, &mut rng);
    let s = Spectrum { data: naive_forward(&x), centered: true, dk: 0.1 };
    let back = idft2(&s).unwrap();
    assert!(max_abs_diff(&back.data, &x) < 1e-12);
}
