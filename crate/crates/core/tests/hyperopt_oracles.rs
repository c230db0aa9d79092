use nalgebra::{DMatrix, DVector};
use seal_core::hyperopt::*;

/// Dense GP posterior with the same standardization, via LU solves.
fn dense_posterior(x: &[Vec<f64>], y: &[f64], h: &GpHyper, q: &[f64]) -> (f64, f64) {
    let n = x.len();
    let mean = y.iter().sum::<f64>() / n as f64;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    let k = |a: &[f64], b: &[f64]| {
        let r2: f64 = a.iter().zip(b).zip(&h.length_scales).map(|((p, q), l)| ((p - q) / l).powi(2)).sum();
        (-0.5 * r2).exp()
    };
    let kmat = DMatrix::from_fn(n, n, |i, j| k(&x[i], &x[j]) + if i == j { h.noise } else { 0.0 });
    let ys = DVector::from_iterator(n, y.iter().map(|v| (v - mean) / sd));
    let kq = DVector::from_iterator(n, x.iter().map(|p| k(p, q)));
    let lu = kmat.lu();
    let alpha = lu.solve(&ys).unwrap();
    let w = lu.solve(&kq).unwrap();
    (mean + sd * kq.dot(&alpha), sd * sd * (1.0 - kq.dot(&w)))
}

#[test]
fn posterior_matches_dense_solve_on_three_points() {
    let x = vec![vec![0.0], vec![0.5], vec![1.0]];
    let y: Vec<f64> = x.iter().map(|p| p[0] * p[0]).collect();
    let h = GpHyper { length_scales: vec![0.4], noise: 1e-6 };
    let gp = GpModel::fit_with(x.clone(), &y, h.clone()).unwrap();
    for q in [0.25, 0.6, 0.75, 0.9] {
        let (m, v) = gp_posterior(&gp, &[q]);
        let (om, ov) = dense_posterior(&x, &y, &h, &[q]);
        assert!((m - om).abs() < 1e-8 && (v - ov).abs() < 1e-8, "{q}: {m} {v} vs {om} {ov}");
    }
}

#[test]
fn posterior_matches_dense_solve_on_five_points_in_3d() {
    let x = vec![
        vec![0.1, 0.2, 0.3],
        vec![0.9, 0.1, 0.5],
        vec![0.4, 0.8, 0.2],
        vec![0.6, 0.5, 0.9],
        vec![0.2, 0.7, 0.6],
    ];
    let y = [1.3, -0.2, 0.7, 2.1, 0.4];
    let fitted = GpModel::fit(x.clone(), &y).unwrap();
    let h = fitted.hyper().clone();
    for q in [[0.5, 0.5, 0.5], [0.0, 1.0, 0.0], [0.3, 0.3, 0.8]] {
        let (m, v) = fitted.posterior(&q);
        let (om, ov) = dense_posterior(&x, &y, &h, &q);
        assert!((m - om).abs() < 1e-8 && (v - ov).abs() < 1e-8);
        assert!(v >= 0.0);
    }
}

#[test]
fn equal_observations_reduce_to_variance_ordering() {
    let space = SearchSpace::new(vec![Dimension::new("a", 0.0, 1.0, Scale::Linear), Dimension::new("b", -2.0, 2.0, Scale::Linear)]).unwrap();
    let history: Vec<Trial> = (0..6).map(|i| Trial::completed(i, space.decode(&halton_point(i, 2, 11)), 0.7)).collect();
    let seed = 11;
    let chosen = suggest(&space, &history, seed).unwrap();
    let (gp, _) = fit_surrogate(&space, &history).unwrap().unwrap();
    let best = acquisition_candidates(&space, &history, seed)
        .into_iter()
        .max_by(|a, b| gp.posterior(a).1.total_cmp(&gp.posterior(b).1))
        .unwrap();
    let expected = space.decode(&best);
    for (c, e) in chosen.iter().zip(&expected) {
        assert!((c - e).abs() < 1e-12, "{chosen:?} vs {expected:?}");
    }
}

#[test]
fn suggestion_is_deterministic_given_history() {
    let space = SearchSpace::default();
    let r = optimize(&space, |v: &[f64]| Ok((v[0].log10() + 4.0).powi(2) + v[5]), 7, 3).unwrap();
    assert_eq!(suggest(&space, &r.history, 3).unwrap(), suggest(&space, &r.history, 3).unwrap());
}

#[test]
fn beats_paired_random_search_on_quadratic() {
    let space = SearchSpace::new(vec![Dimension::new("x", 0.0, 1.0, Scale::Linear)]).unwrap();
    let f = |v: &[f64]| Ok((v[0] - 0.3).powi(2));
    let mut bo = vec![];
    let mut rs = vec![];
    for seed in 0..10 {
        bo.push(optimize(&space, f, 20, seed).unwrap().best.objective.unwrap());
        rs.push(random_search(&space, f, 20, seed).unwrap().best.objective.unwrap());
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        0.5 * (v[4] + v[5])
    };
    assert!(median(&mut bo) <= median(&mut rs));
}
