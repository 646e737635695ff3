mod support;

use bmdg::bmdg::{select_rows, swap_pattern, whole_mixup, LrSchedule, StepSchedule};
use bmdg::config::OptimConfig;
use bmdg::eval::{evaluate_similarities, mmd_gap, project_2d, Direction};
use bmdg::losses::{cross_entropy, l2_normalize, loss_diverse};
use bmdg::miverify::{entropy, mutual_info, DiscreteJoint};
use bmdg::protodisc::RigidTransform;
use candle_core::{Device, Tensor};
use proptest::prelude::*;
use support::{rng, uniform};

fn seed() -> impl Strategy<Value = u64> {
    any::<u64>()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn swaps_only_grow_with_the_step(u in prop::collection::vec(0.0f64..1.0, 1..40), total in 1usize..8) {
        let mut prev = vec![false; u.len()];
        for t in 0..=total {
            let now = swap_pattern(&u, t, total).unwrap();
            prop_assert!(prev.iter().zip(&now).all(|(a, b)| !a || *b));
            prev = now;
        }
        prop_assert!(prev.iter().all(|&s| s));
    }

    #[test]
    fn selected_rows_come_from_one_source(s in seed(), b in 1usize..4, k in 1usize..5, d in 1usize..6) {
        let mut r = rng(s);
        let own = uniform(&[b, k, d], -1.0, 1.0, &mut r);
        let other = uniform(&[b, k, d], 2.0, 3.0, &mut r);
        let swap: Vec<bool> = (0..b * k).map(|i| (s >> (i % 64)) & 1 == 1).collect();
        let out = select_rows(&own, &other, &swap).unwrap().to_vec3::<f64>().unwrap();
        let a = own.to_vec3::<f64>().unwrap();
        let o = other.to_vec3::<f64>().unwrap();
        for bi in 0..b {
            for ki in 0..k {
                let expect = if swap[bi * k + ki] { &o[bi][ki] } else { &a[bi][ki] };
                prop_assert_eq!(&out[bi][ki], expect);
            }
        }
    }

    #[test]
    fn whole_mixup_interpolates(s in seed(), total in 1usize..6) {
        let mut r = rng(s);
        let own = uniform(&[2, 3, 4], -1.0, 1.0, &mut r);
        let other = uniform(&[2, 3, 4], -1.0, 1.0, &mut r);
        let start = whole_mixup(&own, &other, 0, total).unwrap();
        let end = whole_mixup(&own, &other, total, total).unwrap();
        let gap = |a: &Tensor, b: &Tensor| (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        prop_assert!(gap(&start, &own) < 1e-15);
        prop_assert!(gap(&end, &other) < 1e-15);
    }

    #[test]
    fn step_schedule_is_monotone(epochs in 1usize..300, steps in 0usize..8) {
        prop_assume!(steps <= epochs);
        let s = StepSchedule::uniform(epochs, steps);
        let mut prev = 0;
        for e in 0..epochs {
            let t = s.step_for_epoch(e);
            prop_assert!(t >= prev && t <= steps);
            prev = t;
        }
        prop_assert_eq!(s.step_for_epoch(epochs - 1), steps);
    }

    #[test]
    fn learning_rate_stays_bounded(lr in 1e-5f64..1e-1, warm in 0usize..20, m1 in 1usize..100, m2 in 0usize..100) {
        let cfg = OptimConfig {
            lr,
            warmup_epochs: Some(warm),
            milestones: Some(vec![m1, m1 + m2]),
            ..OptimConfig::default()
        };
        let sched = LrSchedule::from_config(&cfg).unwrap();
        for e in 0..250 {
            let v = sched.lr(e);
            prop_assert!(v > 0.0 && v <= lr * (1.0 + 1e-12));
        }
    }

    #[test]
    fn normalized_rows_have_unit_length(s in seed(), n in 1usize..6, d in 1usize..8) {
        let x = uniform(&[n, d], -3.0, 3.0, &mut rng(s));
        let y = l2_normalize(&x).unwrap().to_vec2::<f64>().unwrap();
        for (row, src) in y.iter().zip(x.to_vec2::<f64>().unwrap()) {
            let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            let r2 = src.iter().map(|a| a * a).sum::<f64>();
            let expected = (r2 / (r2 + 1e-12)).sqrt();
            prop_assert!((norm - expected).abs() < 1e-12, "{norm} vs {expected}");
        }
    }

    #[test]
    fn cross_entropy_is_nonnegative(s in seed(), n in 1usize..6, c in 2usize..6) {
        let z = uniform(&[n, c], -10.0, 10.0, &mut rng(s));
        let labels: Vec<u32> = (0..n).map(|i| ((s as usize + i) % c) as u32).collect();
        let v = cross_entropy(&z, &labels).unwrap().to_scalar::<f64>().unwrap();
        prop_assert!(v >= 0.0 && v.is_finite());
    }

    #[test]
    fn disjoint_masks_do_not_overlap(hw in 1usize..20, k in 2usize..6, s in seed()) {
        let v: Vec<f64> = (0..hw).flat_map(|u| {
            let hot = (u + s as usize) % k;
            (0..k).map(move |j| if j == hot { 1.0 } else { 0.0 })
        }).collect();
        let m = Tensor::from_vec(v, (1, hw, k), &Device::Cpu).unwrap();
        prop_assert_eq!(loss_diverse(&m).unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn cmc_is_monotone(s in seed(), nq in 1usize..8, ng in 1usize..30) {
        let mut r = rng(s);
        let sims: Vec<Vec<f64>> = (0..nq).map(|_| (0..ng).map(|_| rand::Rng::random::<f64>(&mut r)).collect()).collect();
        let ql: Vec<u32> = (0..nq as u32).map(|i| i % 4).collect();
        let gl: Vec<u32> = (0..ng as u32).map(|i| i % 5).collect();
        let res = evaluate_similarities(&sims, &ql, &gl, Direction::VisibleToInfrared).unwrap();
        prop_assert!(res.cmc.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(res.cmc.iter().all(|&c| (0.0..=100.0).contains(&c)));
        prop_assert!((0.0..=100.0 + 1e-9).contains(&res.map));
    }

    #[test]
    fn mutual_information_is_bounded(s in seed(), nx in 2usize..5, ny in 2usize..5) {
        let mut r = rng(s);
        let w: Vec<f64> = (0..nx * ny).map(|_| rand::Rng::random::<f64>(&mut r) + 1e-3).collect();
        let total: f64 = w.iter().sum();
        let p: Vec<f64> = w.iter().map(|x| x / total).collect();
        let mi = mutual_info(&p, nx, ny).unwrap();
        let j = DiscreteJoint::new(vec![nx, ny], p).unwrap();
        let bound = entropy(&j.marginal(&[0])).min(entropy(&j.marginal(&[1])));
        prop_assert!(mi >= -1e-12 && mi <= bound + 1e-12);
    }

    #[test]
    fn modality_gap_is_a_distance(s in seed(), n in 1usize..6, d in 1usize..5) {
        let mut r = rng(s);
        let a = uniform(&[n, d], -1.0, 1.0, &mut r).to_vec2::<f64>().unwrap();
        let b = uniform(&[n, d], -1.0, 1.0, &mut r).to_vec2::<f64>().unwrap();
        prop_assert!(mmd_gap(&a, &a).unwrap().abs() < 1e-15);
        prop_assert!((mmd_gap(&a, &b).unwrap() - mmd_gap(&b, &a).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn projection_is_centered_and_ordered(s in seed(), n in 3usize..20, d in 2usize..6) {
        let x = uniform(&[n, d], -1.0, 1.0, &mut rng(s)).to_vec2::<f64>().unwrap();
        let p = project_2d(&x).unwrap();
        for axis in 0..2 {
            let m: f64 = p.coords.iter().map(|c| c[axis]).sum::<f64>() / n as f64;
            prop_assert!(m.abs() < 1e-9);
        }
        prop_assert!(p.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn lossless_transforms_round_trip(s in seed(), h in 2usize..7, w in 2usize..7, q in 0u8..4) {
        let x = uniform(&[1, 2, h, w], -1.0, 1.0, &mut rng(s));
        let mut ts = vec![RigidTransform::HFlip, RigidTransform::Identity];
        if h == w || q % 2 == 0 {
            ts.push(RigidTransform::Rotate90 { quarters: q });
        }
        for t in ts {
            let back = t.inverse().apply(&t.apply(&x).unwrap()).unwrap();
            let a = back.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let b = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
