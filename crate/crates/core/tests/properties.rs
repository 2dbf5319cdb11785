use proptest::prelude::*;

use sdi_core::attacks::{project_linf, run_attack, AttackConfig, AttackLoss};
use sdi_core::data::{batches, encode_idx, parse_idx, Dataset};
use sdi_core::model::{init_params, ModelSpec};
use sdi_core::numerics::{softmax, ProbVector, Tensor};
use sdi_core::objectives::{kl_divergence, l_sdi, m_sdi, margin_dm};
use std::path::Path;

fn simplex(max_c: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..1.0, 2..=max_c).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.iter().map(|x| x / s).collect()
    })
}

fn fixed_simplex(c: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..1.0, c).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.iter().map(|x| x / s).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn softmax_on_simplex(z in prop::collection::vec(-50.0f64..50.0, 2..16)) {
        let p = softmax(&z).unwrap();
        let s: f64 = p.as_slice().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        // a logit gap near 100 rounds the top probability to exactly 1.0
        prop_assert!(p.as_slice().iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn softmax_shift_invariant(z in prop::collection::vec(-50.0f64..50.0, 2..12), c in -100.0f64..100.0) {
        let a = softmax(&z).unwrap();
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let b = softmax(&shifted).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn msdi_in_unit_interval(p in simplex(10), pick in any::<prop::sample::Index>()) {
        let y = pick.index(p.len());
        let pv = ProbVector::new(p).unwrap();
        let v = m_sdi(&pv, y);
        prop_assert!((0.0..=1.0).contains(&v));
        let gated = if margin_dm(&pv, y) >= 0.0 { v } else { 0.0 };
        prop_assert_eq!(l_sdi(&pv, y), gated);
    }

    #[test]
    fn msdi_ignores_order_of_other_classes(p in simplex(8), seed in any::<u64>()) {
        let y = (seed % p.len() as u64) as usize;
        let mut q = p.clone();
        let mut others: Vec<f64> = (0..p.len()).filter(|&k| k != y).map(|k| p[k]).collect();
        others.reverse();
        let mut it = others.into_iter();
        for (k, slot) in q.iter_mut().enumerate() {
            if k != y {
                *slot = it.next().unwrap();
            }
        }
        let a = m_sdi(&ProbVector::new(p).unwrap(), y);
        let b = m_sdi(&ProbVector::new(q).unwrap(), y);
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn kl_non_negative((p, q) in (2usize..7).prop_flat_map(|c| (fixed_simplex(c), fixed_simplex(c)))) {
        let v = kl_divergence(&ProbVector::new(p).unwrap(), &ProbVector::new(q).unwrap());
        prop_assert!(v >= -1e-15);
    }

    #[test]
    fn projection_is_feasible(
        pairs in prop::collection::vec((-1.0f64..2.0, -1.0f64..2.0), 1..20),
        eps in 0.0f64..0.5,
    ) {
        let x = Tensor::vector(pairs.iter().map(|p| p.0.clamp(0.0, 1.0)).collect());
        let adv = Tensor::vector(pairs.iter().map(|p| p.1).collect());
        let out = project_linf(&adv, &x, eps, 0.0, 1.0).unwrap();
        for (o, xv) in out.data().iter().zip(x.data()) {
            prop_assert!((o - xv).abs() <= eps + 1e-12);
            prop_assert!((0.0..=1.0).contains(o));
        }
        let again = project_linf(&out, &x, eps, 0.0, 1.0).unwrap();
        prop_assert_eq!(again, out);
    }

    #[test]
    fn attacks_stay_in_ball(seed in any::<u64>(), eps in 0.0f64..0.3, steps in 1usize..4) {
        let spec = ModelSpec::new(3, vec![5], 3).unwrap();
        let params = init_params(&spec, seed);
        let x = Tensor::matrix(2, 3, vec![0.1, 0.5, 0.9, 0.0, 1.0, 0.3]).unwrap();
        for loss in AttackLoss::ALL {
            let cfg = AttackConfig {
                epsilon: eps,
                step_size: if eps > 0.0 { eps / 2.0 } else { 0.01 },
                steps,
                loss,
                seed,
                ..AttackConfig::default()
            };
            let res = run_attack(&params, &x, &[0, 2], &cfg).unwrap();
            prop_assert!(res.x_adv.max_abs_diff(&x).unwrap() <= eps + 1e-12);
            prop_assert_eq!(res.loss_trace.len(), steps + 1);
        }
    }

    #[test]
    fn batches_cover_each_index_once(n in 0usize..300, bs in 1usize..64, seed in any::<u64>(), epoch in 0u64..50) {
        let plan = batches(n, bs, seed, epoch).unwrap();
        let mut seen: Vec<usize> = plan.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        prop_assert!(plan.iter().all(|b| !b.is_empty() && b.len() <= bs));
    }

    #[test]
    fn idx_round_trip(pixels in prop::collection::vec(any::<u8>(), 12..=12 * 5), labels_seed in any::<u64>()) {
        let n = pixels.len() / 12;
        let inputs = Tensor::matrix(n, 12, pixels[..n * 12].iter().map(|&b| b as f64 / 255.0).collect()).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| ((labels_seed >> (i % 60)) % 10) as usize).collect();
        let ds = Dataset::new(inputs, labels, 10).unwrap();
        let (img, lab) = encode_idx(&ds, 3, 4).unwrap();
        let back = parse_idx(&img, Path::new("img"), &lab, Path::new("lab"), None).unwrap();
        prop_assert_eq!(back, ds);
    }
}
