use brlhf_core::acquisition::mixed_rival;
use brlhf_core::gp::{gp_laplace_fit, GpHyper};
use brlhf_core::harness::{parse_csv, write_csv, TrajectoryRow};
use brlhf_core::laplace::{add_pair_curvature, build_posterior};
use brlhf_core::nn::{Activation, DenseNet};
use brlhf_core::oracle::probit_first_prob;
use nalgebra::DMatrix;
use proptest::collection::vec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn smooth_activation() -> impl Strategy<Value = Activation> {
    prop_oneof![Just(Activation::Tanh), Just(Activation::Identity)]
}

/// Score tables with a designated best index and at least two challengers.
fn score_table() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, usize)> {
    (3usize..12).prop_flat_map(|n| (vec(-5.0f64..5.0, n), vec(0.0f64..3.0, n), 0..n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_matches_central_differences(
        widths in vec(1usize..6, 2..5),
        acts in vec(smooth_activation(), 4),
        seed in any::<u64>(),
        x in vec(-1.0f64..1.0, 5),
    ) {
        let acts = &acts[..widths.len() - 1];
        let net = DenseNet::init(&widths, acts, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let x = &x[..widths[0]];
        let up = vec![1.0; *widths.last().unwrap()];
        let g = net.backward(&net.trace(x).unwrap(), &up).unwrap();
        let loss = |n: &DenseNet| n.forward(x).unwrap().output.iter().sum::<f64>();
        let h = 1e-6;
        for j in 0..net.param_count() {
            let mut p = net.clone();
            p.params_mut()[j] += h;
            let plus = loss(&p);
            p.params_mut()[j] -= 2.0 * h;
            let fd = (plus - loss(&p)) / (2.0 * h);
            prop_assert!((fd - g.params[j]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {}: {} vs {}", j, fd, g.params[j]);
        }
    }

    #[test]
    fn mixed_rival_is_invariant_to_affine_rescaling(
        (spar, var, best) in score_table(),
        alpha in 0.0f64..=1.0,
        a in 0.1f64..10.0,
        b in -10.0f64..10.0,
        c in 0.1f64..10.0,
        d in -10.0f64..10.0,
    ) {
        let (rival, _) = mixed_rival(&spar, &var, alpha, best).unwrap();
        prop_assert_ne!(rival, best);
        let spar2: Vec<f64> = spar.iter().map(|s| a * s + b).collect();
        let var2: Vec<f64> = var.iter().map(|v| c * v + d).collect();
        let (_, j1) = mixed_rival(&spar, &var, alpha, best).unwrap();
        let (_, j2) = mixed_rival(&spar2, &var2, alpha, best).unwrap();
        for (i, (u, v)) in j1.iter().zip(&j2).enumerate() {
            if i != best {
                prop_assert!((u - v).abs() < 1e-8, "J changed at {}: {} vs {}", i, u, v);
            }
        }
    }

    #[test]
    fn more_data_never_increases_predictive_variance(
        head in vec(-2.0f64..2.0, 4),
        deltas in vec(vec(-2.0f64..2.0, 4), 1..6),
        phi in vec(-2.0f64..2.0, 4),
        lambda in 0.01f64..1.0,
    ) {
        let mut h = DMatrix::identity(4, 4) * lambda;
        let mut prev = build_posterior(&head, h.clone()).unwrap().predictive(&phi).unwrap().1;
        for delta in &deltas {
            add_pair_curvature(&mut h, &head, delta);
            let v = build_posterior(&head, h.clone()).unwrap().predictive(&phi).unwrap().1;
            prop_assert!(v <= prev * (1.0 + 1e-10) + 1e-14, "{} > {}", v, prev);
            prev = v;
        }
    }

    #[test]
    fn probit_is_symmetric_and_monotone(u1 in -20.0f64..20.0, u2 in -20.0f64..20.0, gap in 0.0f64..5.0, noise in 0.01f64..5.0) {
        let p = probit_first_prob(u1, u2, noise);
        prop_assert!((p + probit_first_prob(u2, u1, noise) - 1.0).abs() < 1e-12);
        prop_assert!(probit_first_prob(u1 + gap, u2, noise) >= p);
    }

    #[test]
    fn gp_mode_is_stationary(
        xs in vec(-2.0f64..2.0, 2..8),
        pairs in vec((0usize..8, 0usize..8), 1..8),
        noise in 0.05f64..1.0,
    ) {
        let points: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        let n = points.len();
        let pairs: Vec<(usize, usize)> = pairs.into_iter().map(|(a, b)| (a % n, b % n)).filter(|(a, b)| a != b).collect();
        let hyper = GpHyper { length_scale: 1.0, signal_var: 1.0, noise };
        let fit = gp_laplace_fit(&points, &pairs, hyper).unwrap();
        prop_assert!(fit.residual < 1e-6, "residual {}", fit.residual);
    }

    #[test]
    fn csv_round_trip_keeps_nine_digits(raw in vec((-1e6f64..1e6, 0.0f64..1e9, 0.0f64..1e7, 0.0f64..1e4), 0..20)) {
        let rows: Vec<TrajectoryRow> = raw
            .iter()
            .enumerate()
            .map(|(i, &(best, err, wall, refit))| TrajectoryRow {
                iter: i as u64 + 1,
                queries: i as u64 + 1,
                best_latent: best,
                abs_error: err,
                wall_ms: wall,
                refit_ms: refit,
            })
            .collect();
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        prop_assert!(!text.contains('\r'));
        let back = parse_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), rows.len());
        let close = |a: f64, b: f64| (a - b).abs() <= 5e-9 * b.abs().max(f64::MIN_POSITIVE);
        for (a, b) in back.iter().zip(&rows) {
            prop_assert_eq!((a.iter, a.queries), (b.iter, b.queries));
            prop_assert!(close(a.best_latent, b.best_latent) && close(a.abs_error, b.abs_error));
            prop_assert!(close(a.wall_ms, b.wall_ms) && close(a.refit_ms, b.refit_ms));
        }
        let mut again = Vec::new();
        write_csv(&back, &mut again).unwrap();
        prop_assert_eq!(again, buf);
    }
}
