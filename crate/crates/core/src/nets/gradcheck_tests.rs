//! Analytic gradients of every network against central finite differences
//! of a random linear probe loss.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::datagen::MaskSpec;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + H;
            let up = f(&p);
            p[i] = orig - H;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

/// Relative error with a 1e-6 floor: exactly-zero analytic gradients (e.g. a
/// conv bias feeding training-mode batch-norm) meet ~1e-11 difference noise.
fn max_rel_err(a: &[f64], n: &[f64]) -> f64 {
    a.iter()
        .zip(n)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

fn rand3(rng: &mut ChaCha8Rng, d: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0))
}

fn rand2(rng: &mut ChaCha8Rng, d: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0))
}

fn tiny_encoder(rng: &mut ChaCha8Rng) -> Encoder {
    let mut enc = Encoder::new(
        EncoderSpec {
            in_channels: 1,
            widths: [3, 4, 3],
            kernels: [3, 3, 3],
            strides: [1, 1, 1],
        },
        rng,
    );
    for bn in &mut enc.norms {
        bn.gamma.mapv_inplace(|_| rng.gen_range(0.5..1.5));
        bn.beta.mapv_inplace(|_| rng.gen_range(-0.2..0.2));
        bn.running_mean.mapv_inplace(|_| rng.gen_range(-0.1..0.1));
        bn.running_var.mapv_inplace(|_| rng.gen_range(0.5..1.5));
    }
    enc
}

#[test]
fn encoder_gradients_both_modes() {
    for mode in [Mode::Train, Mode::Eval] {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let enc = tiny_encoder(&mut rng);
        let x = rand3(&mut rng, (2, 1, 8));
        let probe = rand2(&mut rng, (2, 3));

        let (feat, cache) = enc.forward(&x, mode).unwrap();
        assert_eq!(feat.dim(), (2, 3));
        let mut grad = enc.zeros_like();
        let dx = enc.backward(&cache, &probe, Some(&mut grad));

        let loss_p = |p: &[f64]| {
            let mut e = enc.clone();
            e.set_flat_params(p);
            (&e.features(&x, mode).unwrap() * &probe).sum()
        };
        let num = central_diff(&loss_p, &enc.flat_params());
        let err = max_rel_err(&grad.flat_params(), &num);
        assert!(err < TOL, "{mode:?} param rel err {err}");

        let loss_x = |v: &[f64]| {
            let xx = Array3::from_shape_vec(x.dim(), v.to_vec()).unwrap();
            (&enc.features(&xx, mode).unwrap() * &probe).sum()
        };
        let num = central_diff(&loss_x, x.as_slice().unwrap());
        let err = max_rel_err(dx.as_slice().unwrap(), &num);
        assert!(err < TOL, "{mode:?} input rel err {err}");
    }
}

#[test]
fn classifier_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let clf = Classifier::new(ClassifierSpec { input_dim: 4, classes: 3 }, &mut rng);
    let z = rand2(&mut rng, (2, 4));
    let probe = rand2(&mut rng, (2, 3));
    let cache = clf.forward(&z).unwrap();
    let mut grad = clf.zeros_like();
    let dz = clf.backward_probs(&cache, &probe, Some(&mut grad));

    let loss_p = |p: &[f64]| {
        let mut c = clf.clone();
        c.set_flat_params(p);
        (&c.probs(&z).unwrap() * &probe).sum()
    };
    let err = max_rel_err(&grad.flat_params(), &central_diff(&loss_p, &clf.flat_params()));
    assert!(err < TOL, "param rel err {err}");

    let loss_z = |v: &[f64]| {
        let zz = Array2::from_shape_vec(z.dim(), v.to_vec()).unwrap();
        (&clf.probs(&zz).unwrap() * &probe).sum()
    };
    let err = max_rel_err(dz.as_slice().unwrap(), &central_diff(&loss_z, z.as_slice().unwrap()));
    assert!(err < TOL, "input rel err {err}");
}

#[test]
fn recovery_gradients() {
    for full in [false, true] {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let rec = Recovery::new(
            RecoverySpec {
                channels: 1,
                hidden: 3,
                layers: 2,
                full_regeneration: full,
            },
            &mut rng,
        );
        let x = rand3(&mut rng, (2, 1, 8));
        let masks = vec![MaskSpec::from_range(8, 2, 5), MaskSpec::from_range(8, 5, 7)];
        let probe = rand3(&mut rng, (2, 1, 8));
        let (_, cache) = rec.forward(&x, &masks).unwrap();
        let mut grad = rec.zeros_like();
        rec.backward(&cache, &probe, &mut grad);

        let loss_p = |p: &[f64]| {
            let mut r = rec.clone();
            r.set_flat_params(p);
            (&r.recover(&x, &masks).unwrap() * &probe).sum()
        };
        let err = max_rel_err(&grad.flat_params(), &central_diff(&loss_p, &rec.flat_params()));
        assert!(err < TOL, "full={full} rel err {err}");
    }
}
