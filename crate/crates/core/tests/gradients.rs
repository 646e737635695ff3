mod support;

use bmdg::losses::{
    cross_entropy, loss_center_cluster, loss_compact, loss_diverse, loss_equivariance, loss_hc, loss_lc,
    loss_part_id, loss_reid, PartClassifierBank,
};
use candle_core::Tensor;
use candle_nn::Linear;
use rand::Rng;
use support::{gradient_error, rng, stochastic, uniform};

const TOL: f64 = 1e-4;
const TRIALS: u64 = 5;

fn check(name: &str, err: f64) {
    assert!(err < TOL, "{name}: relative gradient error {err:e}");
}

#[test]
fn low_level_contrast() {
    for seed in 0..TRIALS {
        let x = uniform(&[3, 4, 5], -1.0, 1.0, &mut rng(seed));
        check("lc", gradient_error(&x, |p| loss_lc(p, 0.5).unwrap()));
    }
}

#[test]
fn high_level_contrast() {
    let ids = [0, 1, 0, 1, 2];
    for seed in 0..TRIALS {
        let x = uniform(&[5, 3, 4], -1.0, 1.0, &mut rng(seed));
        check("hc", gradient_error(&x, |p| loss_hc(p, &ids, 0.3).unwrap()));
    }
}

#[test]
fn compactness_in_every_argument() {
    for seed in 0..TRIALS {
        let mut r = rng(seed);
        let f = uniform(&[2, 6, 3], -1.0, 1.0, &mut r);
        let m = stochastic(&[2, 6, 3], &mut r);
        let p = uniform(&[2, 3, 3], -1.0, 1.0, &mut r);
        check("c/features", gradient_error(&f, |x| loss_compact(x, &m, &p).unwrap()));
        check("c/masks", gradient_error(&m, |x| loss_compact(&f, x, &p).unwrap()));
        check("c/prototypes", gradient_error(&p, |x| loss_compact(&f, &m, x).unwrap()));
    }
}

#[test]
fn mask_overlap() {
    for seed in 0..TRIALS {
        let m = stochastic(&[2, 6, 4], &mut rng(seed));
        check("vc", gradient_error(&m, |x| loss_diverse(x).unwrap()));
    }
}

#[test]
fn equivariance_away_from_kinks() {
    for seed in 0..TRIALS {
        let mut r = rng(seed);
        let a = stochastic(&[2, 6, 3], &mut r);
        let offsets: Vec<f64> = (0..36)
            .map(|_| {
                let mag = 0.05 + 0.3 * r.random::<f64>();
                if r.random::<bool>() {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        let b = (&a + Tensor::from_vec(offsets, (2, 6, 3), a.device()).unwrap()).unwrap();
        let valid: Vec<f64> = (0..6).map(|i| if i % 4 == 0 { 0.0 } else { 1.0 }).collect();
        check("eq", gradient_error(&a, |x| loss_equivariance(x, &b, None).unwrap()));
        check("eq/masked", gradient_error(&a, |x| loss_equivariance(x, &b, Some(&valid)).unwrap()));
    }
}

fn bank(k: usize, d: usize, classes: usize, seed: u64) -> PartClassifierBank {
    let mut r = rng(seed);
    let layers = (0..k)
        .map(|_| {
            Linear::new(
                uniform(&[classes, d], -0.5, 0.5, &mut r),
                Some(uniform(&[classes], -0.1, 0.1, &mut r)),
            )
        })
        .collect();
    PartClassifierBank::from_layers(layers, 0.2)
}

#[test]
fn part_identity() {
    let labels = [0, 2, 1, 2];
    for seed in 0..TRIALS {
        let p = uniform(&[4, 3, 5], -1.0, 1.0, &mut rng(seed));
        let b = bank(3, 5, 3, seed + 100);
        check("p", gradient_error(&p, |x| loss_part_id(x, &labels, &b, None).unwrap()));
        let keep = [true, false, true];
        check("p/dropout", gradient_error(&p, |x| loss_part_id(x, &labels, &b, Some(&keep)).unwrap()));
    }
}

#[test]
fn center_cluster_with_active_and_inactive_hinge() {
    let labels = [0, 1, 1, 2];
    for seed in 0..TRIALS {
        let mut r = rng(seed);
        let x = uniform(&[4, 4], -1.0, 1.0, &mut r);
        let y = uniform(&[4, 4], -1.0, 1.0, &mut r);
        for margin in [10.0, 0.0] {
            check("cc/x", gradient_error(&x, |v| loss_center_cluster(v, &y, &labels, margin).unwrap()));
            check("cc/x'", gradient_error(&y, |v| loss_center_cluster(&x, v, &labels, margin).unwrap()));
        }
    }
}

#[test]
fn identity_cross_entropy() {
    let labels = [1, 0, 3, 3, 2];
    for seed in 0..TRIALS {
        let z = uniform(&[5, 4], -3.0, 3.0, &mut rng(seed));
        check("ce", gradient_error(&z, |x| cross_entropy(x, &labels).unwrap()));
    }
}

#[test]
fn combined_reid_terms_through_classifier() {
    let labels = [0, 1, 0, 1];
    for seed in 0..TRIALS {
        let mut r = rng(seed);
        let cls = Linear::new(uniform(&[2, 6], -0.5, 0.5, &mut r), Some(uniform(&[2], -0.1, 0.1, &mut r)));
        let fv = uniform(&[4, 6], -1.0, 1.0, &mut r);
        let fi = uniform(&[4, 6], -1.0, 1.0, &mut r);
        let fvt = uniform(&[4, 6], -1.0, 1.0, &mut r);
        let fit = uniform(&[4, 6], -1.0, 1.0, &mut r);
        let total = |a: &Tensor, b: &Tensor| {
            let t = loss_reid(a, &fi, b, &fit, &labels, &cls, 0.3).unwrap();
            (t.ce + t.cc).unwrap()
        };
        check("ce+cc/f", gradient_error(&fv, |x| total(x, &fvt)));
        check("ce+cc/f_t", gradient_error(&fvt, |x| total(&fv, x)));
    }
}
