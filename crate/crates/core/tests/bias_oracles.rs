use nalgebra::DMatrix;
use proptest::prelude::*;
use spatial_bias::bias::*;
use spatial_bias::estimate::{gls_fit, ols_fit};
use spatial_bias::geo::*;
use spatial_bias::weights::{knn_weights, WeightConfig, WeightMatrix};
use spatial_bias::Seed;

fn design(a: &[f64], intercept: bool) -> DMatrix<f64> {
    if intercept {
        DMatrix::from_fn(a.len(), 2, |i, j| if j == 0 { 1.0 } else { a[i] })
    } else {
        DMatrix::from_column_slice(a.len(), 1, a)
    }
}

fn mean_and_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

struct Layout {
    d: DistanceMatrix,
    psi: WeightMatrix,
    omega: DMatrix<f64>,
}

fn layout(n: usize, seed: u64) -> Layout {
    let loc = sample_locations(n, Bounds::square(0.0, 10.0).unwrap(), Seed(seed)).unwrap();
    let d = distance_matrix(&loc).unwrap();
    let psi = WeightConfig::knn(4).build(&d).unwrap();
    let omega = CovarianceSpec::exponential(2.0, 1.0).matrix(&d).unwrap();
    Layout { d, psi, omega }
}

fn binary_treatment(l: &Layout, seed: u64) -> Vec<f64> {
    let latent =
        LatentField { mean: 0.0, covariance: CovarianceSpec::exponential(1.0, 1.0), links: LinkConstants::default() };
    sample_field(FieldKind::Binary, &latent, &l.d, Seed(seed)).unwrap().values
}

#[test]
fn noiseless_interference_fits_match_closed_forms() {
    let l = layout(60, 3);
    let a = binary_treatment(&l, 8);
    let pa = l.psi.apply(&a).unwrap();
    let (ba, bt) = (8.0, 2.0);
    let y: Vec<f64> = a.iter().zip(&pa).map(|(a, p)| ba * a + bt * p).collect();

    let plain = ols_fit(&design(&a, false), &y, 0.95).unwrap();
    assert!((plain.coef[0] - ba - si_bias_nonspatial(&a, &l.psi, bt).unwrap()).abs() < 1e-10);

    let with_intercept = ols_fit(&design(&a, true), &y, 0.95).unwrap();
    let expected = si_bias_with_intercept(&a, &l.psi, bt, &Metric::Identity).unwrap();
    assert!((with_intercept.coef[1] - ba - expected).abs() < 1e-10);

    let gls = gls_fit(&design(&a, false), &y, &l.omega, 0.95).unwrap();
    assert!((gls.coef[0] - ba - si_bias_spatial(&a, &l.psi, &l.omega, bt).unwrap()).abs() < 1e-10);

    let metric = Metric::from_covariance(Some(&l.omega)).unwrap();
    let gls1 = gls_fit(&design(&a, true), &y, &l.omega, 0.95).unwrap();
    let corrected = correct_for_interference(gls1.coef[1], bt, &a, &l.psi, &metric, true).unwrap();
    assert!((corrected - ba).abs() < 1e-10);
}

#[test]
fn centred_literal_form_equals_intercept_form_for_standardized_weights() {
    let l = layout(40, 5);
    let a = binary_treatment(&l, 2);
    let mean = a.iter().sum::<f64>() / a.len() as f64;
    let centred: Vec<f64> = a.iter().map(|v| v - mean).collect();
    let literal = si_bias_nonspatial(&centred, &l.psi, 9.0).unwrap();
    let exact = si_bias_with_intercept(&a, &l.psi, 9.0, &Metric::Identity).unwrap();
    assert!((literal - exact).abs() < 1e-12);
}

fn pair(rho: f64) -> GaussianPairSpec {
    GaussianPairSpec {
        rho,
        sigma_a: 1.2,
        sigma_u: 0.8,
        mu_a: 0.5,
        mu_u: 0.0,
        treatment_kernel: Kernel::exponential(1.5),
        confounder_kernel: Kernel::exponential(2.5),
    }
}

/// Fix `A`, redraw `U | A` and the error, refit, and compare the mean slope bias to the closed form.
fn conditional_oracle(spatial_error: bool, intercept: bool, beta_u: f64, beta_ut: f64) -> (f64, f64, f64) {
    let l = layout(40, 13);
    let spec = pair(0.7);
    let (a, _) = sample_gaussian_pair(&spec, &l.d, Seed(99)).unwrap();
    let a = a.values;
    let phi = knn_weights(&l.d, 4).unwrap();
    let conditional = spec.conditional_confounder(&l.d, &a).unwrap();
    let error = if spatial_error { l.omega.clone() } else { DMatrix::identity(40, 40) };
    let noise = GaussianSampler::new(nalgebra::DVector::zeros(40), &error).unwrap();
    let x = design(&a, intercept);
    let ba = 2.0;
    let mut rng = Seed(4).rng();
    let slopes: Vec<f64> = (0..10_000)
        .map(|_| {
            let u = conditional.draw(&mut rng);
            let ut = phi.apply(u.as_slice()).unwrap();
            let e = noise.draw(&mut rng);
            let y: Vec<f64> = (0..40).map(|i| ba * a[i] + beta_u * u[i] + beta_ut * ut[i] + e[i]).collect();
            let fit = if spatial_error { gls_fit(&x, &y, &error, 0.95) } else { ols_fit(&x, &y, 0.95) }.unwrap();
            fit.coef[x.ncols() - 1] - ba
        })
        .collect();
    let omega = spatial_error.then_some(&error);
    let analytic = if intercept {
        let direct = DirectScParams::from_gaussian_pair(&spec, &l.d, beta_u).unwrap();
        let indirect = IndirectScParams::from_gaussian_pair(&spec, &l.d, beta_ut, phi.clone()).unwrap();
        combined_bias(&a, &WeightMatrix::zeros(40), 0.0, &direct, &indirect, omega).unwrap()
    } else {
        assert_eq!(beta_u, 0.0);
        let indirect = IndirectScParams::from_gaussian_pair(&spec, &l.d, beta_ut, phi.clone()).unwrap();
        indirect_sc_bias(&a, &indirect, omega).unwrap()
    };
    let (mean, se) = mean_and_se(&slopes);
    (mean, se, analytic)
}

#[test]
fn direct_and_indirect_confounding_oracle() {
    for spatial in [false, true] {
        let (mean, se, analytic) = conditional_oracle(spatial, true, 1.5, 2.0);
        assert!((mean - analytic).abs() <= 3.0 * se, "spatial={spatial}: {mean} vs {analytic} (se {se})");
        assert!(analytic.abs() > 10.0 * se, "oracle should test a non-trivial bias");
    }
}

#[test]
fn direct_confounding_alone_oracle() {
    let (mean, se, analytic) = conditional_oracle(false, true, 1.5, 0.0);
    assert!((mean - analytic).abs() <= 3.0 * se, "{mean} vs {analytic} (se {se})");
    let l = layout(40, 13);
    let a = sample_gaussian_pair(&pair(0.7), &l.d, Seed(99)).unwrap().0.values;
    let direct = DirectScParams::from_gaussian_pair(&pair(0.7), &l.d, 1.5).unwrap();
    assert!((direct_sc_bias(&a, &direct, None).unwrap() - analytic).abs() < 1e-10);
}

#[test]
fn indirect_literal_form_oracle_without_intercept() {
    for spatial in [false, true] {
        let (mean, se, analytic) = conditional_oracle(spatial, false, 0.0, 2.0);
        assert!((mean - analytic).abs() <= 3.0 * se, "spatial={spatial}: {mean} vs {analytic} (se {se})");
    }
}

#[test]
fn poisson_bias_ignores_error_covariance() {
    let l = layout(50, 21);
    let spec = PoissonPairSpec::new(2.0, 6.0).unwrap();
    let noise = GaussianSampler::new(nalgebra::DVector::zeros(50), &l.omega).unwrap();
    let mut rng = Seed(8).rng();
    let (mut ols, mut gls) = (Vec::new(), Vec::new());
    for _ in 0..2000 {
        let (a, u) = spec.draw(50, &mut rng).unwrap();
        let e = noise.draw(&mut rng);
        let y: Vec<f64> = (0..50).map(|i| 2.0 * a[i] + 1.5 * u[i] + e[i]).collect();
        let x = design(&a, true);
        ols.push(ols_fit(&x, &y, 0.95).unwrap().coef[1] - 2.0);
        gls.push(gls_fit(&x, &y, &l.omega, 0.95).unwrap().coef[1] - 2.0);
    }
    let expected = poisson_confounding_bias(1.5, &spec).unwrap();
    assert_eq!(expected, 1.125);
    let (mo, so) = mean_and_se(&ols);
    let (mg, sg) = mean_and_se(&gls);
    assert!((mo - expected).abs() < 4.0 * so, "OLS {mo} (se {so})");
    assert!((mg - expected).abs() < 4.0 * sg, "GLS {mg} (se {sg})");
}

fn inputs() -> impl Strategy<Value = (Vec<(f64, f64)>, Vec<f64>)> {
    (6usize..20).prop_flat_map(|n| {
        (prop::collection::vec((0.0..10.0f64, 0.0..10.0f64), n), prop::collection::vec(-3.0..3.0f64, n))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn formula_invariants((coords, a) in inputs(), beta in -10.0..10.0f64, c in 0.1..50.0f64) {
        let Ok(loc) = LocationSet::from_points(coords.iter().map(|&(x, y)| Point::new(x, y)).collect()) else {
            return Ok(());
        };
        let Ok(d) = distance_matrix(&loc) else { return Ok(()) };
        prop_assume!(a.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        let n = a.len();
        let psi = knn_weights(&d, 2).unwrap();
        let identity = DMatrix::<f64>::identity(n, n);
        let omega = CovarianceSpec::exponential(1.5, 1.0).matrix(&d).unwrap() + DMatrix::identity(n, n) * 0.1;

        let ns = si_bias_nonspatial(&a, &psi, beta).unwrap();
        let at_identity = si_bias_spatial(&a, &psi, &identity, beta).unwrap();
        prop_assert!((ns - at_identity).abs() <= 1e-10 * (1.0 + ns.abs()));

        let one = si_bias_spatial(&a, &psi, &omega, 1.0).unwrap();
        let scaled = si_bias_spatial(&a, &psi, &(omega.clone() * c), beta).unwrap();
        prop_assert!((scaled - beta * one).abs() <= 1e-8 * (1.0 + scaled.abs()));
        prop_assert_eq!(si_bias_nonspatial(&a, &psi, 0.0).unwrap(), 0.0);

        let spec = GaussianPairSpec { rho: 0.5, ..pair(0.5) };
        let direct1 = DirectScParams::from_gaussian_pair(&spec, &d, 1.0).unwrap();
        let direct = DirectScParams::from_gaussian_pair(&spec, &d, beta).unwrap();
        let ind1 = IndirectScParams::from_gaussian_pair(&spec, &d, 1.0, psi.clone()).unwrap();
        let ind = IndirectScParams::from_gaussian_pair(&spec, &d, beta, psi.clone()).unwrap();
        for omega in [None, Some(&omega)] {
            if let (Ok(x1), Ok(xb)) = (direct_sc_bias(&a, &direct1, omega), direct_sc_bias(&a, &direct, omega)) {
                prop_assert!((xb - beta * x1).abs() <= 1e-8 * (1.0 + xb.abs()));
            }
            let i1 = indirect_sc_bias(&a, &ind1, omega).unwrap();
            let ib = indirect_sc_bias(&a, &ind, omega).unwrap();
            prop_assert!((ib - beta * i1).abs() <= 1e-8 * (1.0 + ib.abs()));
        }
        let ns_direct = direct_sc_bias(&a, &direct, None);
        let id_direct = direct_sc_bias(&a, &direct, Some(&identity));
        if let (Ok(x), Ok(y)) = (ns_direct, id_direct) {
            prop_assert!((x - y).abs() <= 1e-10 * (1.0 + x.abs()));
        }
        let ni = indirect_sc_bias(&a, &ind, None).unwrap();
        let ii = indirect_sc_bias(&a, &ind, Some(&identity)).unwrap();
        prop_assert!((ni - ii).abs() <= 1e-10 * (1.0 + ni.abs()));

        let zero_direct = DirectScParams::from_gaussian_pair(&spec, &d, 0.0).unwrap();
        let zero_ind = IndirectScParams::from_gaussian_pair(&spec, &d, 0.0, psi.clone()).unwrap();
        if let Ok(z) = combined_bias(&a, &psi, 0.0, &zero_direct, &zero_ind, Some(&omega)) {
            prop_assert_eq!(z, 0.0);
        }
    }
}
