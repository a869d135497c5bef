use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::family::{Family, FamilySpec};
use crate::model::{mixture_probs, LABELS};

struct Instance {
    data: Dataset<f64>,
    working: WorkingData<f64>,
    gamma: MixtureAssignment,
    theta: Theta<f64>,
}

fn random_instance(seed: u64, n: usize, k: usize, l: usize, j: usize, unit_weights: bool) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((n, j), |(_, c)| if c == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
    let z = Array2::from_shape_fn((n, k), |_| rng.random_range(-1.0..1.0));
    let y = Array1::from_shape_fn(n, |_| rng.random_range(-2.0..2.0));
    let spec = FamilySpec::unit_weights(Family::Normal, n);
    let data = Dataset::unnamed(y.clone(), x, z, spec).unwrap();
    let w = if unit_weights {
        Array1::ones(n)
    } else {
        Array1::from_shape_fn(n, |_| rng.random_range(0.3..3.0))
    };
    let working = WorkingData {
        y_tilde: y,
        w_tilde: w,
        clamped: false,
    };
    let mut labels = vec![0i8; k];
    let mut placed = 0;
    while placed < l {
        let idx = rng.random_range(0..k);
        if labels[idx] == 0 {
            labels[idx] = if rng.random_bool(0.5) { 1 } else { -1 };
            placed += 1;
        }
    }
    let gamma = MixtureAssignment::new(labels).unwrap();
    let theta = Theta {
        beta: (0..j).map(|_| rng.random_range(-1.0..1.0)).collect(),
        mu: if l > 0 { rng.random_range(0.2..2.0) } else { 0.0 },
        sigma2: if l > 0 { rng.random_range(0.05..1.5) } else { 0.0 },
        phi: rng.random_range(0.2..2.0),
        p: mixture_probs(&gamma),
    };
    Instance {
        data,
        working,
        gamma,
        theta,
    }
}

/// Dense Σ = φW⁻¹ + σ² ZΓ²Z'.
fn dense_sigma(inst: &Instance) -> DMatrix<f64> {
    let n = inst.data.n();
    let mut s = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        s[(i, i)] = inst.theta.phi / inst.working.w_tilde[i];
    }
    for &k in inst.gamma.active() {
        let zk = DVector::from_iterator(n, inst.data.z.column(k).iter().copied());
        s += &zk * zk.transpose() * inst.theta.sigma2;
    }
    s
}

fn dense_mean(inst: &Instance) -> DVector<f64> {
    let n = inst.data.n();
    DVector::from_iterator(
        n,
        (0..n).map(|i| {
            let xb: f64 = (0..inst.data.j()).map(|c| inst.data.x[[i, c]] * inst.theta.beta[c]).sum();
            let zg: f64 = inst
                .gamma
                .active()
                .iter()
                .map(|&k| inst.data.z[[i, k]] * f64::from(inst.gamma.label(k)))
                .sum();
            xb + inst.theta.mu * zg
        }),
    )
}

/// Direct multivariate-normal log-density plus the multinomial term.
fn dense_loglik(inst: &Instance) -> f64 {
    let sigma = dense_sigma(inst);
    let n = inst.data.n();
    let chol = sigma.clone().cholesky().expect("Σ positive definite");
    let y = DVector::from_iterator(n, inst.working.y_tilde.iter().copied());
    let r = y - dense_mean(inst);
    let quad = r.dot(&chol.solve(&r));
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let c = inst.gamma.counts();
    let mut mult = 0.0;
    for j in 0..3 {
        if c[j] > 0 {
            mult += c[j] as f64 * inst.theta.p[j].ln();
        }
    }
    -0.5 * quad - 0.5 * logdet + mult - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

#[test]
fn empty_active_set_is_diagonal() {
    let inst = random_instance(1, 7, 5, 0, 1, false);
    let cache = PrecisionCache::build(&inst.data, &inst.working, &inst.gamma, 2.0, 0.0).unwrap();
    let v = Array1::from_shape_fn(7, |i| i as f64 - 3.0);
    let out = sigma_apply_inverse(&cache, &v);
    for i in 0..7 {
        assert_relative_eq!(out[i], inst.working.w_tilde[i] * v[i] / 2.0, epsilon = 1e-14);
    }
}

#[test]
fn log_det_with_empty_active_set() {
    let mut inst = random_instance(2, 3, 4, 0, 1, true);
    inst.theta.phi = 2.0;
    let cache = PrecisionCache::build(&inst.data, &inst.working, &inst.gamma, 2.0, 0.0).unwrap();
    assert_relative_eq!(log_det_sigma(&cache), 3.0 * 2.0_f64.ln(), epsilon = 1e-14);
}

#[test]
fn sherman_morrison_single_unit_column() {
    let n = 5;
    let mut z = Array2::<f64>::zeros((n, 2));
    let raw = [0.3, -0.5, 0.1, 0.7, 0.2];
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    for i in 0..n {
        z[[i, 0]] = raw[i] / norm;
        z[[i, 1]] = i as f64;
    }
    let spec = FamilySpec::unit_weights(Family::Normal, n);
    let data = Dataset::unnamed(Array1::zeros(n), Array2::zeros((n, 0)), z.clone(), spec).unwrap();
    let working = WorkingData::identity(&[0.0; 5], &[1.0; 5]);
    let gamma = MixtureAssignment::new(vec![1, 0]).unwrap();
    let (phi, s2) = (0.7, 1.9);
    let cache = PrecisionCache::build(&data, &working, &gamma, phi, s2).unwrap();
    let zc = z.column(0).to_owned();
    let out = cache.apply_inverse(&zc);
    let factor = 1.0 / phi - s2 / (phi * (phi + s2));
    for i in 0..n {
        assert_relative_eq!(out[i], factor * zc[i], epsilon = 1e-13);
    }
}

#[test]
fn woodbury_matches_dense_small_instance() {
    let inst = random_instance(3, 6, 4, 2, 1, false);
    let cache = PrecisionCache::build(&inst.data, &inst.working, &inst.gamma, inst.theta.phi, inst.theta.sigma2).unwrap();
    let sigma = dense_sigma(&inst);
    let inv = sigma.clone().try_inverse().unwrap();
    let v = Array1::from_shape_fn(6, |i| (i as f64).sin());
    let dense = &inv * DVector::from_iterator(6, v.iter().copied());
    let ours = cache.apply_inverse(&v);
    for i in 0..6 {
        assert!(rel_err(ours[i], dense[i]) < 1e-10);
    }
    assert!(rel_err(cache.log_det(), sigma.determinant().ln()) < 1e-10);
}

#[test]
fn complete_loglik_matches_dense_mvn() {
    let inst = random_instance(4, 8, 5, 2, 2, false);
    let ours = complete_loglik(&inst.data, &inst.working, &inst.gamma, &inst.theta).unwrap();
    assert!(rel_err(ours, dense_loglik(&inst)) < 1e-9);
}

#[test]
fn null_assignment_is_normal_density_plus_k_log_p0() {
    let n = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..3.0)).collect();
    let ybar = y.iter().sum::<f64>() / n as f64;
    let spec = FamilySpec::unit_weights(Family::Normal, n);
    let z = Array2::from_shape_fn((n, 4), |_| rng.random_range(-1.0..1.0));
    let data = Dataset::unnamed(Array1::from(y.clone()), Array2::ones((n, 1)), z, spec).unwrap();
    let working = WorkingData::identity(&y, &vec![1.0; n]);
    let gamma = MixtureAssignment::null(4);
    let mut theta = Theta::initial(1, &gamma);
    theta.beta = vec![ybar];
    theta.p = [0.1, 0.8, 0.1];
    let ll = complete_loglik(&data, &working, &gamma, &theta).unwrap();
    let normal: f64 = y
        .iter()
        .map(|v| -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * (v - ybar).powi(2))
        .sum();
    assert_relative_eq!(ll, normal + 4.0 * 0.8_f64.ln(), epsilon = 1e-12);
}

#[test]
fn empty_component_with_members_gives_neg_infinity() {
    let mut inst = random_instance(5, 6, 4, 1, 1, true);
    inst.theta.p = [0.0, 1.0, 0.0];
    let ll = complete_loglik(&inst.data, &inst.working, &inst.gamma, &inst.theta).unwrap();
    assert_eq!(ll, f64::NEG_INFINITY);
}

#[test]
fn log_det_invariant_to_label_sign() {
    let inst = random_instance(6, 9, 6, 3, 1, false);
    let k = inst.gamma.active()[1];
    let flipped = inst.gamma.with(k, -inst.gamma.label(k));
    let a = PrecisionCache::build(&inst.data, &inst.working, &inst.gamma, 0.8, 0.6).unwrap();
    let b = PrecisionCache::build(&inst.data, &inst.working, &flipped, 0.8, 0.6).unwrap();
    assert_relative_eq!(a.log_det(), b.log_det(), epsilon = 1e-12);
}

#[test]
fn column_and_label_sign_flip_leaves_loglik_unchanged() {
    for seed in 0..20 {
        let mut inst = random_instance(100 + seed, 10, 6, 3, 2, false);
        // Symmetric p so the relabeling leaves the multinomial term alone.
        inst.theta.p = [0.25, 0.5, 0.25];
        let base = complete_loglik(&inst.data, &inst.working, &inst.gamma, &inst.theta).unwrap();
        for &k in inst.gamma.active() {
            let mut data = inst.data.clone();
            data.z.column_mut(k).mapv_inplace(|v| -v);
            let gamma = inst.gamma.with(k, -inst.gamma.label(k));
            let other = complete_loglik(&data, &inst.working, &gamma, &inst.theta).unwrap();
            assert!(rel_err(other, base) < 1e-12);
        }
    }
}

#[test]
fn delta_is_zero_for_current_label() {
    let inst = random_instance(7, 8, 5, 2, 1, true);
    for k in 0..5 {
        let d = delta_loglik(&inst.data, &inst.working, &inst.gamma, &inst.theta, k, inst.gamma.label(k)).unwrap();
        assert_eq!(d, 0.0);
    }
}

#[test]
fn every_delta_matches_full_recomputation() {
    for seed in 0..25 {
        let mut inst = random_instance(200 + seed, 8, 5, 2, 1, seed % 2 == 0);
        inst.theta.p = [0.2, 0.6, 0.2];
        let base = complete_loglik(&inst.data, &inst.working, &inst.gamma, &inst.theta).unwrap();
        let cache = PrecisionCache::build(&inst.data, &inst.working, &inst.gamma, inst.theta.phi, inst.theta.sigma2).unwrap();
        let scorer = CandidateScorer::new(&inst.data, &inst.working, &inst.gamma, &inst.theta, &cache).unwrap();
        for k in 0..5 {
            for label in LABELS {
                let gamma = inst.gamma.with(k, label);
                let full = complete_loglik(&inst.data, &inst.working, &gamma, &inst.theta).unwrap() - base;
                let fast = scorer.delta(k, label);
                assert!((full - fast).abs() < 1e-8, "seed {seed} k {k} label {label}: {full} vs {fast}");
            }
        }
    }
}

#[test]
fn activating_duplicate_column_is_rejected() {
    let mut inst = random_instance(8, 8, 5, 1, 1, true);
    let active = inst.gamma.active()[0];
    let dup = (0..5).find(|&k| k != active).unwrap();
    let col = inst.data.z.column(active).to_owned();
    inst.data.z.column_mut(dup).assign(&col);
    inst.theta.p = [0.2, 0.6, 0.2];
    for label in [-1, 1] {
        let d = delta_loglik(&inst.data, &inst.working, &inst.gamma, &inst.theta, dup, label).unwrap();
        assert_eq!(d, f64::NEG_INFINITY);
    }
}

#[test]
fn gls_with_empty_active_set_is_ols() {
    let inst = random_instance(10, 12, 4, 0, 3, true);
    let (beta, mu) = update_beta_mu(&inst.data, &inst.working, &inst.gamma, &inst.theta).unwrap();
    assert_eq!(mu, 0.0);
    let x = DMatrix::from_fn(12, 3, |i, j| inst.data.x[[i, j]]);
    let y = DVector::from_iterator(12, inst.data.y.iter().copied());
    let ols = (x.transpose() * &x).cholesky().unwrap().solve(&(x.transpose() * y));
    for j in 0..3 {
        assert_relative_eq!(beta[j], ols[j], epsilon = 1e-10);
    }
}

#[test]
fn gls_matches_dense_oracle() {
    let inst = random_instance(11, 10, 6, 3, 2, false);
    let (beta, mu) = update_beta_mu(&inst.data, &inst.working, &inst.gamma, &inst.theta).unwrap();
    let n = 10;
    let sigma_inv = dense_sigma(&inst).try_inverse().unwrap();
    let h = DMatrix::from_fn(n, 3, |i, c| {
        if c < 2 {
            inst.data.x[[i, c]]
        } else {
            inst.gamma
                .active()
                .iter()
                .map(|&k| inst.data.z[[i, k]] * f64::from(inst.gamma.label(k)))
                .sum()
        }
    });
    let y = DVector::from_iterator(n, inst.working.y_tilde.iter().copied());
    let a = h.transpose() * &sigma_inv * &h;
    let sol = a.try_inverse().unwrap() * h.transpose() * &sigma_inv * y;
    assert!(rel_err(beta[0], sol[0]) < 1e-9);
    assert!(rel_err(beta[1], sol[1]) < 1e-9);
    assert!(rel_err(mu, sol[2]) < 1e-9);
}

#[test]
fn duplicate_locked_in_columns_are_rank_deficient() {
    let mut inst = random_instance(12, 10, 4, 1, 3, true);
    let c = inst.data.x.column(1).to_owned();
    inst.data.x.column_mut(2).assign(&c);
    match update_beta_mu(&inst.data, &inst.working, &inst.gamma, &inst.theta) {
        Err(Error::RankDeficiency { columns }) => assert_eq!(columns, vec!["X3".to_string()]),
        other => panic!("expected rank deficiency, got {other:?}"),
    }
}

#[test]
fn variance_update_matches_dense_traces() {
    // Unit weights, where the W⁻¹ factors vanish and the expressions are the textbook ones.
    for (seed, unit) in [(13, true), (14, false)] {
        let inst = random_instance(seed, 10, 6, 2, 1, unit);
        let (phi, s2) = update_variance_components(&inst.data, &inst.working, &inst.gamma, &inst.theta).unwrap();
        let n = 10;
        let sigma_inv = dense_sigma(&inst).try_inverse().unwrap();
        let winv = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 / inst.working.w_tilde[i] } else { 0.0 });
        let y = DVector::from_iterator(n, inst.working.y_tilde.iter().copied());
        let e = y - dense_mean(&inst);
        let (ph, sg) = (inst.theta.phi, inst.theta.sigma2);
        let tau_e = (DMatrix::identity(n, n) * ph - &sigma_inv * &winv * (ph * ph)).trace()
            + ph * ph * (e.transpose() * &sigma_inv * &winv * &sigma_inv * &e)[(0, 0)];
        let zg = DMatrix::from_fn(n, 2, |i, c| {
            let k = inst.gamma.active()[c];
            inst.data.z[[i, k]] * f64::from(inst.gamma.label(k))
        });
        let tau_r = (DMatrix::identity(2, 2) * sg - zg.transpose() * &sigma_inv * &zg * (sg * sg)).trace()
            + sg * sg * (e.transpose() * &sigma_inv * &zg * zg.transpose() * &sigma_inv * &e)[(0, 0)];
        assert!(rel_err(phi, tau_e / n as f64) < 1e-9);
        assert!(rel_err(s2, tau_r / 2.0) < 1e-9);
    }
}

#[test]
fn variance_update_with_empty_active_set() {
    let inst = random_instance(15, 12, 4, 0, 2, false);
    let (beta, _) = update_beta_mu(&inst.data, &inst.working, &inst.gamma, &inst.theta).unwrap();
    let mut theta = inst.theta.clone();
    theta.beta = beta.clone();
    let (phi, s2) = update_variance_components(&inst.data, &inst.working, &inst.gamma, &theta).unwrap();
    assert_eq!(s2, 0.0);
    let fitted = inst.data.x.dot(&Array1::from(beta));
    let rss: f64 = (0..12)
        .map(|i| inst.working.w_tilde[i] * (inst.working.y_tilde[i] - fitted[i]).powi(2))
        .sum();
    assert_relative_eq!(phi, rss / 12.0, epsilon = 1e-12);
}

#[test]
fn known_dispersion_keeps_phi_at_one() {
    let mut inst = random_instance(16, 12, 4, 2, 1, false);
    inst.data.spec = FamilySpec::unit_weights(Family::Binomial, 12);
    let (phi, _) = update_variance_components(&inst.data, &inst.working, &inst.gamma, &inst.theta).unwrap();
    assert_eq!(phi, 1.0);
}

#[test]
fn m_step_null_normal_is_single_iteration_ols() {
    let inst = random_instance(17, 15, 5, 0, 2, true);
    let out = m_step(&inst.data, &inst.working, &inst.gamma, &Theta::initial(2, &inst.gamma)).unwrap();
    assert_eq!(out.iterations, 1);
    assert!(out.converged);
    assert_eq!(out.theta.sigma2, 0.0);
    assert_eq!(out.theta.mu, 0.0);
}

#[test]
fn m_step_is_monotone_and_never_worse_than_start() {
    for seed in 0..15 {
        let inst = random_instance(300 + seed, 20, 10, 3, 1, seed % 3 == 0);
        let out = m_step(&inst.data, &inst.working, &inst.gamma, &inst.theta).unwrap();
        let start = complete_loglik(&inst.data, &inst.working, &inst.gamma, &inst.theta).unwrap();
        assert!(out.monotone, "seed {seed}: trace {:?}", out.trace);
        for pair in out.trace.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-9 * (1.0 + pair[0].abs()));
        }
        assert!(out.loglik >= start - 1e-9);
    }
}

#[test]
fn m_step_with_near_zero_active_columns_stays_finite() {
    let mut inst = random_instance(18, 20, 6, 2, 1, true);
    for &k in inst.gamma.active().to_vec().iter() {
        inst.data.z.column_mut(k).mapv_inplace(|v| v * 1e-9);
    }
    let out = m_step(&inst.data, &inst.working, &inst.gamma, &inst.theta).unwrap();
    assert!(out.loglik.is_finite());
    assert!(out.theta.sigma2.is_finite() && out.theta.mu.is_finite() && out.theta.phi.is_finite());
}

#[test]
fn stale_cache_is_detected() {
    let inst = random_instance(19, 8, 5, 1, 1, true);
    let mut state = ModelState::new(inst.working.clone(), inst.gamma.clone(), inst.theta.clone());
    let cache = PrecisionCache::for_state(&inst.data, &state).unwrap();
    assert!(cache.ensure_current(&state).is_ok());
    state.set_label(0, 1);
    assert!(matches!(cache.ensure_current(&state), Err(Error::StaleCache { .. })));
}

#[test]
fn f32_engine_agrees_with_f64() {
    let inst = random_instance(20, 10, 5, 2, 1, true);
    let data32 = Dataset::<f32>::unnamed(
        inst.data.y.mapv(|v| v as f32),
        inst.data.x.mapv(|v| v as f32),
        inst.data.z.mapv(|v| v as f32),
        FamilySpec::unit_weights(Family::Normal, 10),
    )
    .unwrap();
    let working32 = WorkingData::identity(data32.y_slice(), &[1.0f32; 10]);
    let theta32 = Theta {
        beta: inst.theta.beta.iter().map(|&b| b as f32).collect(),
        mu: inst.theta.mu as f32,
        sigma2: inst.theta.sigma2 as f32,
        phi: inst.theta.phi as f32,
        p: inst.theta.p.map(|v| v as f32),
    };
    let a = complete_loglik(&inst.data, &inst.working, &inst.gamma, &inst.theta).unwrap();
    let b = complete_loglik(&data32, &working32, &inst.gamma, &theta32).unwrap();
    assert!(((a - f64::from(b)) / a).abs() < 1e-4);
}
