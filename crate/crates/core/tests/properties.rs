use ndarray::Array2;
use proptest::prelude::*;
use ptychonet::engine::relative_error;
use ptychonet::field::{decimate, dft2_array, idft2_array, inner, zero_upsample};
use ptychonet::models::{sim_forward, spi_forward, SimScene};
use ptychonet::optim::{batches, step, update_count, BatchOrder, BatchSchedule, OptState, OptimizerConfig, OptimizerKind};
use ptychonet::simdata::gen_illumination_grid_any;
use ptychonet::C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn complex(side: usize, seed: u64) -> Array2<C64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((side, side), |_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
}

fn real(side: usize, seed: u64, lo: f64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((side, side), |_| lo + rng.random::<f64>())
}

fn norm(a: &Array2<C64>) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn transforms_are_unitary_inverses(half in 1usize..12, seed in any::<u64>()) {
        let x = complex(2 * half, seed);
        let spec = dft2_array(&x);
        let back = idft2_array(&spec);
        let err = x.iter().zip(back.iter()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        prop_assert!(err < 1e-12);
        prop_assert!((norm(&spec) - norm(&x)).abs() < 1e-12 * norm(&x).max(1.0));
    }

    #[test]
    fn decimation_and_zero_upsampling_are_adjoint(m in 1usize..9, s in 1usize..5, seed in any::<u64>()) {
        let a = complex(m * s, seed);
        let b = complex(m, seed ^ 1);
        let lhs = inner(&decimate(&a, s).unwrap(), &b);
        let rhs = inner(&a, &zero_upsample(&b, s).unwrap());
        prop_assert!((lhs - rhs).norm() < 1e-12);
    }

    #[test]
    fn relative_error_quotients_out_complex_scale(seed in any::<u64>(), re in -3.0f64..3.0, im in -3.0f64..3.0) {
        prop_assume!(re.hypot(im) > 1e-3);
        let t = complex(8, seed);
        let scaled = t.mapv(|z| z * C64::new(re, im));
        prop_assert!(relative_error(&scaled, &t).unwrap() < 1e-12);
        let r = complex(8, seed ^ 7);
        let e = relative_error(&r, &t).unwrap();
        prop_assert!(e >= 0.0 && e <= norm(&r) / norm(&t) + 1.0);
    }

    #[test]
    fn epochs_partition_the_measurements(n in 1usize..60, b in 1usize..60, epochs in 0usize..4, seed in any::<u64>(), shuffled in any::<bool>()) {
        let b = b.min(n);
        let mut sched = BatchSchedule::new(n, b, epochs);
        if shuffled {
            sched.order = BatchOrder::Shuffled { seed };
        }
        let all = batches(&sched);
        prop_assert_eq!(all.len(), update_count(epochs, n, b));
        for e in 0..epochs {
            let epoch = sched.epoch_batches(e);
            prop_assert_eq!(epoch.len(), n.div_ceil(b));
            prop_assert!(epoch.iter().all(|batch| !batch.is_empty() && batch.len() <= b));
            let mut seen: Vec<usize> = epoch.into_iter().flatten().collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn sgd_is_a_plain_gradient_step(lr in 1e-4f64..1.0, seed in any::<u64>(), steps in 1usize..5) {
        let mut params = vec![real(4, seed, -0.5)];
        let grads = vec![real(4, seed ^ 3, -0.5)];
        let start = params[0].clone();
        let mut state = OptState::new(&params);
        for k in 0..steps {
            step(&OptimizerConfig::new(OptimizerKind::Sgd, lr), &mut state, &mut params, &grads).unwrap();
            prop_assert_eq!(state.step_count, k as u64 + 1);
        }
        let want = &start - &(grads[0].mapv(|g| g * lr * steps as f64));
        let err = params[0].iter().zip(want.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-12);
    }

    #[test]
    fn adaptive_steps_never_exceed_their_bound(lr in 1e-4f64..0.1, seed in any::<u64>()) {
        // with bias correction, Adam's first step moves every entry by at most lr
        let mut params = vec![real(5, seed, -0.5)];
        let grads = vec![real(5, seed ^ 5, -0.5).mapv(|g| g * 1e3)];
        let start = params[0].clone();
        let mut state = OptState::new(&params);
        step(&OptimizerConfig::adam(lr), &mut state, &mut params, &grads).unwrap();
        let moved = params[0].iter().zip(start.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(moved <= lr * (1.0 + 1e-9));
    }

    #[test]
    fn single_pixel_measurement_is_bilinear(seed in any::<u64>(), a in -2.0f64..2.0) {
        let (o1, o2, p) = (real(6, seed, 0.0), real(6, seed ^ 1, 0.0), real(6, seed ^ 2, 0.0));
        let combo = &o1 + &o2.mapv(|v| v * a);
        let lhs = spi_forward(&combo, &p).unwrap();
        let rhs = spi_forward(&o1, &p).unwrap() + a * spi_forward(&o2, &p).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn sim_images_of_non_negative_scenes_are_non_negative(seed in any::<u64>()) {
        let mut psf = real(8, seed ^ 9, 0.0);
        let total = psf.sum();
        psf.mapv_inplace(|v| v / total);
        let scene = SimScene::new(real(8, seed, 0.0), vec![real(8, seed ^ 4, 0.0)], psf).unwrap();
        let img = sim_forward(&scene, 0).unwrap();
        prop_assert!(img.data.iter().all(|&v| v >= -1e-12));
        // total intensity is preserved by a unit-sum kernel
        let want: f64 = scene.object.iter().zip(scene.patterns[0].iter()).map(|(o, p)| o * p).sum();
        prop_assert!((img.data.sum() - want).abs() < 1e-9 * want.max(1.0));
    }

    #[test]
    fn illumination_grids_are_centred(rows in 1usize..12, cols in 1usize..12, step in 0.001f64..0.2) {
        let k = gen_illumination_grid_any(rows, cols, step);
        prop_assert_eq!(k.len(), rows * cols);
        let (mx, my) = k.iter().fold((0.0, 0.0), |(a, b), &(x, y)| (a + x, b + y));
        prop_assert!(mx.abs() < 1e-12 && my.abs() < 1e-12);
    }
}
