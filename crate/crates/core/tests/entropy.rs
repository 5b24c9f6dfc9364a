#[macro_use]
mod common;

use common::rng;
use lic_autodiff::{Graph, Tensor};
use lic_core::entropy::{estimate_rate, likelihood, DiscretizedGaussian, FactorizedPrior, PMF_FLOOR};
use lic_core::params::{Bound, ParamStore};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn phi(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn symmetric_and_normalised(mu in -20.0f64..20.0, sigma in 0.11f64..30.0, k in 0i32..60) {
        let a = likelihood(mu + k as f64, mu, sigma);
        let b = likelihood(mu - k as f64, mu, sigma);
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&a));
        // positive until the tail underflows
        if (k as f64) < 8.0 * sigma {
            prop_assert!(a > 0.0);
        }
        let r = (40.0 * sigma).ceil() as i64;
        let total: f64 = (-r..=r).map(|v| likelihood(mu + v as f64, mu, sigma)).sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn folded_pmf_sums_to_one(mu in -5.0f64..5.0, sigma in 0.11f64..10.0, t in 1u32..40) {
        let d = DiscretizedGaussian::new(mu, sigma, t);
        let p = d.pmf();
        prop_assert_eq!(p.len(), 2 * t as usize + 1);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let f = d.floored_pmf(PMF_FLOOR);
        prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(f.iter().all(|&v| v >= PMF_FLOOR * 0.99));
    }
}

suite! {
    fn likelihood_at_the_mean() {
        let oracle = phi(0.5) - phi(-0.5);
        assert!((oracle - 0.3829).abs() < 1e-4);
        assert!((likelihood(0.0, 0.0, 1.0) - oracle).abs() < 1e-12);
        assert!((likelihood(3.0, 3.0, 1.0) - oracle).abs() < 1e-12);
        assert!((likelihood(2.0, 0.5, 2.0) - (phi(1.0) - phi(0.5))).abs() < 1e-12);
    }

    fn sigma_below_floor_is_clamped() {
        assert_eq!(likelihood(1.0, 0.2, 0.01), likelihood(1.0, 0.2, lic_core::config::SIGMA_MIN));
    }

    fn integral_mean_pmf_is_symmetric() {
        let p = DiscretizedGaussian::new(4.0, 1.7, 9).pmf();
        for k in 0..9 {
            assert!((p[k] - p[18 - k]).abs() < 1e-12);
        }
    }

    fn rate_examples() {
        assert_eq!(estimate_rate(&[1.0 / 256.0; 10]), 80.0);
        assert_eq!(estimate_rate(&[1.0; 7]), 0.0);
        assert!(estimate_rate(&[0.0]).is_finite());
        assert!(estimate_rate(&[0.3, 0.9, 1e-20]) >= 0.0);
    }

    /// Monte-Carlo comparison: the noisy training proxy bounds the rate of
    /// rounded values from above on a toy Gaussian source.
    fn additive_noise_rate_bounds_rounded_rate() {
        let mut r = rng(3);
        let src = Normal::new(0.0, 1.5).unwrap();
        let (n, sigma) = (100_000, 1.5);
        let (mut aun, mut round) = (0.0, 0.0);
        for _ in 0..n {
            let y: f64 = src.sample(&mut r);
            let u: f64 = r.random_range(-0.5..0.5);
            aun += -likelihood(y + u, 0.0, sigma).log2();
            round += -likelihood(y.round(), 0.0, sigma).log2();
        }
        let (aun, round) = (aun / n as f64, round / n as f64);
        assert!(aun >= round, "noisy {aun} vs rounded {round}");
    }

    fn factorized_prior_cdf_is_monotone_with_limits() {
        let mut store = ParamStore::new(5);
        let prior = FactorizedPrior::new(&mut store.scope("prior"), 3);
        common::perturb_params(&mut store, &mut rng(6), 0.5);
        let g = Graph::inference();
        let p = Bound::new(&g, &store);
        let mut pts: Vec<f64> = (-200..=200).map(|k| k as f64 * 0.5).collect();
        pts.insert(0, -1e5);
        pts.push(1e5);
        for row in prior.cdf(&p, &pts) {
            assert!(row.windows(2).all(|w| w[1] >= w[0]));
            assert!(row[0] < 1e-6 && row[row.len() - 1] > 1.0 - 1e-6, "{} {}", row[0], row[row.len() - 1]);
        }
        let z = g.constant(Tensor::from_vec(&[1, 3, 1, 2], vec![0.0, 1.0, -2.0, 3.0, 0.0, -1.0]));
        let lik = prior.likelihood(&p, z).unwrap().value();
        assert!(lik.data().iter().all(|&v| v > 0.0 && v <= 1.0));
    }
}
