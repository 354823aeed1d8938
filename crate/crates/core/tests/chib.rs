mod common;

use common::*;
use nalgebra::DVector;

use staggered_did::design::{DesignSet, ParamLayout, Variant};
use staggered_did::gibbs::{FixedBlocks, GibbsConfig, Init};
use staggered_did::mlik::{chib_log_marglik, posterior_model_probs, ChibConfig};
use staggered_did::priors::{default_prior, student_t_prior};
use staggered_did::sim::{generate_dataset, table1_dgp};

fn known_variance_config(variant: Variant, data: &staggered_did::panel::PanelDataset, seed: u64) -> (ChibConfig, f64) {
    let layout = ParamLayout::for_panel(variant, data);
    let prior = default_prior(data.n_periods(), data.d_w(), data.cohorts());
    let mut th = random_theta(&layout, data, 31);
    th.alpha = None;
    for g in 0..layout.n_groups() {
        th.d[g] = 0.4 + 0.1 * g as f64;
        th.sigma2[g] = DVector::from_fn(layout.n_periods, |k, _| 0.6 + 0.05 * (g + k) as f64);
    }
    let exact = closed_form_log_evidence(data, &layout, &prior, &th);
    let main = GibbsConfig {
        init: Init::Custom(th),
        fixed: FixedBlocks {
            sigma2: true,
            d: true,
            ..FixedBlocks::default()
        },
        ..gibbs_cfg(variant, 5000, 500, seed)
    };
    (ChibConfig::new(main), exact)
}

#[test]
fn matches_closed_form_evidence_with_known_variances() {
    let data = toy_panel(3, &[2, 3], 4, 41);
    let design = DesignSet::for_panel(&data).unwrap();
    let prior = default_prior(3, 1, &[2, 3]);
    for variant in [Variant::Full, Variant::PrePt] {
        let (cfg, exact) = known_variance_config(variant, &data, 3);
        let got = chib_log_marglik(&data, &design, &prior, &cfg).unwrap();
        assert!(
            (got.log_marglik - exact).abs() < 0.05,
            "{variant:?}: chib {} exact {exact}",
            got.log_marglik
        );
        assert_eq!(got.log_ordinate_variances, 0.0);
    }
}

#[test]
fn stable_when_reduced_runs_double() {
    let data = generate_dataset(&table1_dgp(200, 5)).unwrap();
    let design = DesignSet::for_panel(&data).unwrap();
    let prior = default_prior(data.n_periods(), data.d_w(), data.cohorts());
    let base = ChibConfig::new(gibbs_cfg(Variant::Full, 2000, 500, 17));
    let doubled = ChibConfig {
        reduced_draws: 2 * base.reduced_draws,
        reduced_burnin: 2 * base.reduced_burnin,
        ..base.clone()
    };
    let a = chib_log_marglik(&data, &design, &prior, &base).unwrap();
    let b = chib_log_marglik(&data, &design, &prior, &doubled).unwrap();
    assert!((a.log_marglik - b.log_marglik).abs() < 0.1, "{} vs {}", a.log_marglik, b.log_marglik);
}

#[test]
fn deterministic_given_seed() {
    let data = toy_panel(3, &[2, 3], 5, 42);
    let design = DesignSet::for_panel(&data).unwrap();
    let prior = default_prior(3, 1, &[2, 3]);
    let cfg = ChibConfig::new(gibbs_cfg(Variant::PrePt, 300, 100, 4));
    let a = chib_log_marglik(&data, &design, &prior, &cfg).unwrap();
    let b = chib_log_marglik(&data, &design, &prior, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn student_t_regime_is_rejected() {
    let data = toy_panel(3, &[2, 3], 5, 43);
    let design = DesignSet::for_panel(&data).unwrap();
    let prior = student_t_prior(3, 1, &[2, 3], 1.0, 1.0).unwrap();
    let cfg = ChibConfig::new(gibbs_cfg(Variant::Full, 100, 10, 4));
    assert!(chib_log_marglik(&data, &design, &prior, &cfg).is_err());
}

#[test]
fn posterior_model_probabilities_follow_log_ml_gap() {
    let p = posterior_model_probs(&[-10.0, -10.0 - 2f64.ln()], None).unwrap();
    assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);
    let p = posterior_model_probs(&[0.0, 0.0], Some(&[0.25, 0.75])).unwrap();
    assert!((p[1] - 0.75).abs() < 1e-12);
}
