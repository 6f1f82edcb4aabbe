use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::Error;

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

fn all_kinds() -> Vec<LayerSpec> {
    vec![
        LayerSpec::frame_stack("fs", 4, 2),
        LayerSpec::frame_stack("fs3", 4, 3),
        LayerSpec::affine("aff", 4, 3),
        LayerSpec::tanh("act", 4),
        LayerSpec::recurrent_bidi("rnn", 4, 6),
    ]
}

#[test]
fn tanh_of_zero_is_zero() {
    let spec = LayerSpec::tanh("act", 3);
    let (out, _) = forward_layer(&spec, &NamedParams::new(), &Matrix::zeros(4, 3)).unwrap();
    assert_eq!(out, Matrix::zeros(4, 3));
}

#[test]
fn frame_stack_pads_tail() {
    let spec = LayerSpec::frame_stack("fs", 3, 2);
    let input = Matrix::new(5, 3, (1..=15).map(f64::from).collect()).unwrap();
    let (out, _) = forward_layer(&spec, &NamedParams::new(), &input).unwrap();
    assert_eq!(out.shape(), (3, 6));
    assert_eq!(out.row(0), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    assert_eq!(out.row(2), &[13.0, 14.0, 15.0, 0.0, 0.0, 0.0]);
}

#[test]
fn identity_affine_is_identity() {
    let spec = LayerSpec::affine("aff", 3, 3);
    let mut p = NamedParams::new();
    p.insert("aff.w", Matrix::identity(3));
    p.insert("aff.b", Matrix::zeros(1, 3));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_matrix(&mut rng, 4, 3);
    let (out, _) = forward_layer(&spec, &p, &x).unwrap();
    assert_eq!(out, x);
}

#[test]
fn recurrent_keeps_row_count() {
    let spec = LayerSpec::recurrent_bidi("rnn", 4, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = spec.init_params(&mut rng);
    let (out, _) = forward_layer(&spec, &p, &random_matrix(&mut rng, 7, 4)).unwrap();
    assert_eq!(out.shape(), (7, 6));
}

#[test]
fn shape_errors_name_the_layer() {
    let spec = LayerSpec::affine("enc.proj", 3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = spec.init_params(&mut rng);
    let err = forward_layer(&spec, &p, &Matrix::zeros(2, 4)).unwrap_err();
    assert!(matches!(&err, Error::Dimension(m) if m.contains("enc.proj") && m.contains("2x4")));
    let err = forward_layer(&spec, &NamedParams::new(), &Matrix::zeros(2, 3)).unwrap_err();
    assert!(matches!(&err, Error::Dimension(m) if m.contains("enc.proj.w")));
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for spec in all_kinds() {
        let p = spec.init_params(&mut rng);
        let x = random_matrix(&mut rng, 5, 4);
        let (out, cache) = forward_layer(&spec, &p, &x).unwrap();
        let (gi, gp) =
            backward_layer(&spec, &p, &cache, &Matrix::zeros(out.rows(), out.cols())).unwrap();
        assert_eq!(gi, Matrix::zeros(5, 4), "{}", spec.name);
        assert_eq!(gp.max_abs(), 0.0);
        assert_eq!(
            gp.names().collect::<Vec<_>>(),
            p.names().collect::<Vec<_>>()
        );
    }
}

#[test]
fn affine_bias_gradient_is_column_sum() {
    let spec = LayerSpec::affine("aff", 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = spec.init_params(&mut rng);
    let (_, cache) = forward_layer(&spec, &p, &random_matrix(&mut rng, 5, 4)).unwrap();
    let g = random_matrix(&mut rng, 5, 3);
    let (_, gp) = backward_layer(&spec, &p, &cache, &g).unwrap();
    assert_eq!(gp.get("aff.b").unwrap(), &g.column_sums());
}

#[test]
fn stale_or_foreign_cache_is_rejected() {
    let spec = LayerSpec::affine("aff", 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = spec.init_params(&mut rng);
    let (out, cache) = forward_layer(&spec, &p, &random_matrix(&mut rng, 5, 4)).unwrap();
    let g = Matrix::zeros(out.rows(), out.cols());

    let moved = sgd_step(&p, &p, 0.1).unwrap();
    assert!(matches!(
        backward_layer(&spec, &moved, &cache, &g),
        Err(Error::Cache(_))
    ));

    let other = LayerSpec::affine("other", 4, 3);
    let q = other.init_params(&mut rng);
    assert!(matches!(
        backward_layer(&other, &q, &cache, &g),
        Err(Error::Cache(_))
    ));

    assert!(matches!(
        backward_layer(&spec, &p, &cache, &Matrix::zeros(4, 3)),
        Err(Error::Cache(_))
    ));
}

#[test]
fn forward_is_bit_reproducible() {
    let spec = LayerSpec::recurrent_bidi("rnn", 4, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = spec.init_params(&mut rng);
    let x = random_matrix(&mut rng, 6, 4);
    let a = forward_layer(&spec, &p, &x).unwrap().0;
    let b = forward_layer(&spec, &p, &x).unwrap().0;
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

/// Loss `Σ output ⊙ weights` so that `grad_out = weights`.
fn probe_loss(spec: &LayerSpec, p: &NamedParams, x: &Matrix, w: &Matrix) -> crate::Result<f64> {
    let (out, _) = forward_layer(spec, p, x)?;
    Ok(out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum())
}

#[test]
fn every_layer_matches_finite_differences() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        for spec in all_kinds() {
            let p = spec.init_params(&mut rng);
            let x = random_matrix(&mut rng, 5, 4);
            let (out, cache) = forward_layer(&spec, &p, &x).unwrap();
            let w = random_matrix(&mut rng, out.rows(), out.cols());
            let (gi, gp) = backward_layer(&spec, &p, &cache, &w).unwrap();

            if !p.is_empty() {
                let fd = finite_diff_grad(|q| probe_loss(&spec, q, &x, &w), &p, 1e-5).unwrap();
                let m = compare_grads(&gp, &fd).unwrap();
                assert!(m.max_rel_err < 1e-6, "{} params: {m:?}", spec.name);
            }

            let mut xin = NamedParams::new();
            xin.insert("x", x.clone());
            let fd = finite_diff_grad(
                |q| probe_loss(&spec, &p, q.get("x").unwrap(), &w),
                &xin,
                1e-5,
            )
            .unwrap();
            let mut an = NamedParams::new();
            an.insert("x", gi);
            let m = compare_grads(&an, &fd).unwrap();
            assert!(m.max_rel_err < 1e-6, "{} input: {m:?}", spec.name);
        }
    }
}

#[test]
fn finite_diff_of_sum_of_squares() {
    let mut p = NamedParams::new();
    p.insert("v", Matrix::new(2, 1, vec![3.0, -1.0]).unwrap());
    let g = finite_diff_grad(|q| Ok(q.get("v").unwrap().sum_sq()), &p, 1e-5).unwrap();
    let g = g.get("v").unwrap().data();
    assert!(
        (g[0] - 6.0).abs() < 1e-8 && (g[1] + 2.0).abs() < 1e-8,
        "{g:?}"
    );
}

#[test]
fn finite_diff_of_constant_is_zero() {
    let mut p = NamedParams::new();
    p.insert("v", Matrix::new(1, 3, vec![0.3, 1.0, -2.0]).unwrap());
    let g = finite_diff_grad(|_| Ok(4.2), &p, 1e-5).unwrap();
    assert_eq!(g.max_abs(), 0.0);
}

#[test]
fn finite_diff_step_insensitive_on_quadratic() {
    let mut p = NamedParams::new();
    p.insert("v", Matrix::new(1, 3, vec![0.7, -1.3, 2.1]).unwrap());
    let f = |q: &NamedParams| {
        let v = q.get("v").unwrap().data();
        Ok(2.0 * v[0] * v[0] + v[0] * v[1] - 0.5 * v[2] * v[2] + 3.0 * v[1])
    };
    let a = finite_diff_grad(f, &p, 1e-4).unwrap().flatten();
    let b = finite_diff_grad(f, &p, 1e-5).unwrap().flatten();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-7, "{a:?} vs {b:?}");
    }
}

#[test]
fn finite_diff_rejects_non_finite_loss() {
    let mut p = NamedParams::new();
    p.insert("v", Matrix::new(1, 1, vec![0.0]).unwrap());
    let err = finite_diff_grad(
        |q| Ok(1.0 / q.get("v").unwrap().get(0, 0).abs().min(0.0)),
        &p,
        1e-5,
    );
    assert!(matches!(err, Err(Error::Numeric(_))));
}

#[test]
fn sgd_examples() {
    let mut p = NamedParams::new();
    p.insert("w", Matrix::new(1, 2, vec![1.0, 2.0]).unwrap());
    let mut g = NamedParams::new();
    g.insert("w", Matrix::new(1, 2, vec![0.5, -1.0]).unwrap());
    assert_eq!(sgd_step(&p, &g, 0.0).unwrap(), p);
    let out = sgd_step(&p, &g, 0.1).unwrap();
    let w = out.get("w").unwrap().data();
    assert!((w[0] - 0.95).abs() < 1e-15 && (w[1] - 2.1).abs() < 1e-15);
    assert_eq!(p.get("w").unwrap().data(), &[1.0, 2.0]);

    let mut bad = NamedParams::new();
    bad.insert("u", Matrix::zeros(1, 2));
    assert!(matches!(sgd_step(&p, &bad, 0.1), Err(Error::Dimension(_))));
}

#[test]
fn two_steps_differ_from_one_doubled_step_on_nonlinear_loss() {
    // loss = Σ v⁴ / 4, gradient v³.
    let grad = |q: &NamedParams| {
        let mut g = q.clone();
        for (_, m) in g.iter_mut() {
            for v in m.data_mut() {
                *v = v.powi(3);
            }
        }
        g
    };
    let mut p = NamedParams::new();
    p.insert("v", Matrix::new(1, 2, vec![1.0, -0.5]).unwrap());
    let once = sgd_step(&p, &grad(&p), 0.1).unwrap();
    let twice = sgd_step(&once, &grad(&once), 0.1).unwrap();
    let doubled = sgd_step(&p, &grad(&p).scale(2.0), 0.1).unwrap();
    assert_ne!(twice, doubled);
    assert!((twice.get("v").unwrap().get(0, 0) - doubled.get("v").unwrap().get(0, 0)).abs() > 1e-3);
}
