use lorarank::model::{generate_model, mlp_forward_row, softmax_rows, Activation, ModelConfig, NormMode};
use lorarank::numerics::{
    cosine, finite_diff_gradient, invert_permutation, is_permutation, max_relative_error, norm, random_matrix,
    random_permutation, singular_values, Matrix, SeededRng,
};
use lorarank::reconstruct::{invert_mlp, mlp_loss, mlp_loss_and_grad, ReconstructionConfig};
use proptest::prelude::*;

fn gaussian(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.standard_normal()).collect()
}

#[test]
fn softmax_ignores_per_row_shifts() {
    let mut rng = SeededRng::new(2, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (n, m) = (1 + rng.below(8), 1 + rng.below(8));
        let a = random_matrix(&mut rng, n, m, 3.0).unwrap();
        let mut shifted = a.clone();
        for i in 0..n {
            let alpha = 100.0 * (rng.uniform() - 0.5);
            shifted.row_mut(i).iter_mut().for_each(|v| *v += alpha);
        }
        worst = worst.max(softmax_rows(&a).max_abs_diff(&softmax_rows(&shifted)));
    }
    assert!(worst <= 1e-12, "{worst}");
}

#[test]
fn mlp_separates_non_parallel_inputs() {
    let m = generate_model(&ModelConfig::new(16, 40, 1, 16), 8).unwrap();
    let mut rng = SeededRng::new(8, 1);
    let mut min_dist = f64::INFINITY;
    let mut pairs = 0;
    while pairs < 1000 {
        let (a, b) = (gaussian(&mut rng, 16), gaussian(&mut rng, 16));
        if cosine(&a, &b).abs() >= 1.0 - 1e-8 {
            continue;
        }
        pairs += 1;
        let (za, zb) = (mlp_forward_row(&a, &m.layers[0], &m.config), mlp_forward_row(&b, &m.layers[0], &m.config));
        min_dist = min_dist.min(norm(&za.iter().zip(&zb).map(|(x, y)| x - y).collect::<Vec<_>>()));
    }
    assert!(min_dist > 1e-6, "{min_dist}");
}

#[test]
fn distinct_outputs_reconstruct_to_distinct_states() {
    let m = generate_model(&ModelConfig::new(16, 40, 1, 64), 4).unwrap();
    let rcfg = ReconstructionConfig::for_hidden_size(16);
    let ys: Vec<Vec<f64>> = (0..32)
        .filter_map(|t| {
            let z = mlp_forward_row(m.embedding.row(t), &m.layers[0], &m.config);
            let r = invert_mlp(&m.layers[0], &m.config, &z, &rcfg).unwrap();
            r.converged.then_some(r.y_star)
        })
        .collect();
    assert!(ys.len() >= 31);
    for i in 0..ys.len() {
        for j in 0..i {
            assert!(ys[i] != ys[j]);
        }
    }
}

#[test]
fn analytic_gradient_matches_finite_differences_across_variants() {
    for (act, mode) in [
        (Activation::Silu, NormMode::SumSquares),
        (Activation::Gelu, NormMode::SumSquares),
        (Activation::Silu, NormMode::MeanSquares),
    ] {
        let cfg = ModelConfig { activation: act, norm_mode: mode, ..ModelConfig::new(16, 40, 1, 16) };
        let m = generate_model(&cfg, 6).unwrap();
        let w = &m.layers[0];
        let mut rng = SeededRng::new(6, 2);
        for _ in 0..20 {
            let (y, z) = (gaussian(&mut rng, 16), gaussian(&mut rng, 16));
            let (_, g) = mlp_loss_and_grad(w, &cfg, &y, &z);
            let fd = finite_diff_gradient(|v| mlp_loss(w, &cfg, v, &z), &y, 1e-5).unwrap();
            assert!(max_relative_error(&g, &fd, 1e-6) < 1e-4, "{act:?} {mode:?}");
        }
    }
}

/// Singular values as square roots of the eigenvalues of `AᵀA`, via nalgebra.
fn eigen_oracle(m: &Matrix) -> Vec<f64> {
    let a = nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    let mut ev: Vec<f64> = (a.transpose() * &a).symmetric_eigen().eigenvalues.iter().map(|v| v.max(0.0).sqrt()).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

#[test]
fn svd_matches_eigen_oracle() {
    let mut rng = SeededRng::new(5, 5);
    for _ in 0..50 {
        let m = random_matrix(&mut rng, 8, 6, 1.0).unwrap();
        let ours = singular_values(&m).unwrap();
        for (a, b) in ours.values().iter().zip(eigen_oracle(&m)) {
            assert!((a - b).abs() / b < 1e-9, "{a} vs {b}");
        }
        let svd = nalgebra::DMatrix::from_row_slice(8, 6, m.as_slice()).singular_values();
        let mut sv: Vec<f64> = svd.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in ours.values().iter().zip(sv) {
            assert!((a - b).abs() / b < 1e-12);
        }
    }
}

fn matrix_strategy() -> impl Strategy<Value = (usize, usize, u64)> {
    (1usize..10, 1usize..10, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spectrum_invariants((r, c, seed) in matrix_strategy(), s in 0.1f64..10.0) {
        let mut rng = SeededRng::new(seed, 0);
        let m = random_matrix(&mut rng, r, c, 1.0).unwrap();
        let base = singular_values(&m).unwrap();
        prop_assert_eq!(base.len(), r.min(c));
        let fro2: f64 = base.values().iter().map(|v| v * v).sum();
        prop_assert!((fro2 - m.frobenius_norm().powi(2)).abs() <= 1e-10 * fro2.max(1.0));

        let pr = random_permutation(&mut rng, r).unwrap();
        let pc = random_permutation(&mut rng, c).unwrap();
        for other in [m.transpose(), m.permute_rows(&pr).permute_cols(&pc)] {
            let o = singular_values(&other).unwrap();
            for (a, b) in base.values().iter().zip(o.values()) {
                prop_assert!((a - b).abs() <= 1e-10 * base.largest());
            }
        }
        let scaled = singular_values(&m.scale(s)).unwrap();
        for (a, b) in base.values().iter().zip(scaled.values()) {
            prop_assert!((a * s - b).abs() <= 1e-10 * scaled.largest());
        }
    }

    #[test]
    fn permutations_invert((n, seed) in (1usize..200, any::<u64>())) {
        let mut rng = SeededRng::new(seed, 1);
        let p = random_permutation(&mut rng, n).unwrap();
        prop_assert!(is_permutation(&p));
        let inv = invert_permutation(&p);
        for (i, &j) in p.iter().enumerate() {
            prop_assert_eq!(inv[j], i);
        }
    }

    #[test]
    fn softmax_rows_are_distributions((r, c, seed) in matrix_strategy()) {
        let mut rng = SeededRng::new(seed, 2);
        let s = softmax_rows(&random_matrix(&mut rng, r, c, 20.0).unwrap());
        for i in 0..r {
            let sum: f64 = s.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(s.row(i).iter().all(|v| *v >= 0.0));
        }
    }
}
