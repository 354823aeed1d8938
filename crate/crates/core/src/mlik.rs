//! Chib's marginal likelihood from the Gibbs output, and posterior model
//! probabilities across variants.
//!
//! The posterior ordinate at θ* (posterior means) is factored as
//! π(Σ*, D* | y) · π(γ* | y, Σ*, D*) · π(δ* | y, Σ*, D*, γ*) · π(β₁* | y, rest*).
//! The first factor is Rao-Blackwellized over the main run, the next two over
//! reduced runs, and the last one is exact.

use rayon::join;
use serde::{Deserialize, Serialize};

use crate::design::{DesignSet, ParamLayout};
use crate::error::{Error, Result};
use crate::gibbs::{run_chain, FixedBlocks, GibbsConfig, Init, PosteriorDraws, Sampler};
use crate::linalg::log_mean_exp;
use crate::model::{marginal_loglik, ModelParams};
use crate::panel::PanelDataset;
use crate::priors::{PriorSpec, Regime};
use crate::rng::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChibConfig {
    /// Main run. Blocks it fixes are treated as known: they enter neither
    /// the prior nor the ordinate.
    pub main: GibbsConfig,
    pub reduced_draws: usize,
    pub reduced_burnin: usize,
}

impl ChibConfig {
    pub fn new(main: GibbsConfig) -> Self {
        ChibConfig {
            reduced_draws: main.draws,
            reduced_burnin: main.burnin.min(200),
            main,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarglikResult {
    pub log_marglik: f64,
    pub log_lik: f64,
    pub log_prior: f64,
    pub log_ordinate_variances: f64,
    pub log_ordinate_gamma: f64,
    pub log_ordinate_delta: f64,
    pub log_ordinate_beta1: f64,
    pub theta_star: ModelParams,
}

impl MarglikResult {
    pub fn log_ordinate(&self) -> f64 {
        self.log_ordinate_variances
            + self.log_ordinate_gamma
            + self.log_ordinate_delta
            + self.log_ordinate_beta1
    }
}

fn log_prior_free(prior: &PriorSpec, th: &ModelParams, layout: &ParamLayout, fixed: &FixedBlocks) -> Result<f64> {
    let t = prior.n_periods;
    let mut lp = 0.0;
    if !fixed.beta1 {
        lp += prior.beta1.ln_pdf_at(&th.beta1, 0..t);
    }
    if !fixed.delta {
        for g in 1..prior.n_groups() {
            let block = crate::priors::NormalBlock {
                mean: prior.delta_block(g).mean.clone(),
                var: prior.delta_variance(g)?.clone(),
            };
            lp += block.ln_pdf_at(&th.delta[g], layout.free(g).iter().copied());
        }
    }
    for g in 0..prior.n_groups() {
        if !fixed.gamma {
            lp += prior.gamma[g].ln_pdf_at(&th.gamma[g], 0..prior.d_w);
        }
        if !fixed.d {
            lp += prior.d[g].dist()?.ln_pdf(th.d[g]);
        }
        if !fixed.sigma2 {
            for k in 0..t {
                lp += prior.sigma2[g][k].dist()?.ln_pdf(th.sigma2[g][k]);
            }
        }
    }
    Ok(lp)
}

/// Runs the main chain and returns Chib's log marginal likelihood.
pub fn chib_log_marglik(
    data: &PanelDataset,
    design: &DesignSet,
    prior: &PriorSpec,
    cfg: &ChibConfig,
) -> Result<MarglikResult> {
    let main = run_chain(data, design, prior, &cfg.main)?;
    chib_from_draws(data, design, prior, cfg, &main)
}

/// Chib's estimate reusing an existing main run (which must have been
/// produced with `cfg.main`).
pub fn chib_from_draws(
    data: &PanelDataset,
    design: &DesignSet,
    prior: &PriorSpec,
    cfg: &ChibConfig,
    main: &PosteriorDraws,
) -> Result<MarglikResult> {
    if prior.regime == Regime::StudentT {
        return Err(Error::Config(
            "the marginal likelihood is not available under the Student-t prior".into(),
        ));
    }
    let fixed = cfg.main.fixed;
    if fixed.alpha {
        return Err(Error::Config("the random intercepts cannot be held fixed".into()));
    }
    if cfg.reduced_draws < 1 {
        return Err(Error::Config("reduced runs need at least one draw".into()));
    }
    let layout = main.layout.clone();
    let groups = data.n_groups();
    let t = data.n_periods();

    let mut star = main.posterior_mean();
    // known blocks exactly, not as an average of identical values
    let first = &main.draws[0];
    if fixed.beta1 {
        star.beta1 = first.beta1.clone();
    }
    if fixed.delta {
        star.delta = first.delta.clone();
    }
    if fixed.gamma {
        star.gamma = first.gamma.clone();
    }
    if fixed.sigma2 {
        star.sigma2 = first.sigma2.clone();
    }
    if fixed.d {
        star.d = first.d.clone();
    }
    star.check(&layout, data.d_w())?;

    // Evaluation sampler: only its conditional formulas are used.
    let eval_cfg = GibbsConfig {
        draws: 1,
        burnin: 0,
        init: Init::Custom(star.clone()),
        ..cfg.main.clone()
    };
    let eval = Sampler::new(data, design, prior, &eval_cfg)?;

    // π(Σ*, D* | y)
    let mut terms = Vec::with_capacity(main.draws.len());
    for th in &main.draws {
        let mut lp = 0.0;
        for g in 0..groups {
            if !fixed.sigma2 {
                for k in 0..t {
                    lp += eval.sigma2_conditional(th, g, k)?.ln_pdf(star.sigma2[g][k]);
                }
            }
            if !fixed.d {
                lp += eval.d_conditional(th, g)?.ln_pdf(star.d[g]);
            }
        }
        terms.push(lp);
    }
    let log_ord_var = if fixed.sigma2 && fixed.d { 0.0 } else { log_mean_exp(&terms) };

    let reduced = |index: u64, extra: FixedBlocks| GibbsConfig {
        draws: cfg.reduced_draws,
        burnin: cfg.reduced_burnin,
        thin: 1,
        seed: derive_seed(cfg.main.seed, index),
        variant: cfg.main.variant,
        init: Init::Custom(star.clone()),
        fixed: FixedBlocks {
            sigma2: true,
            d: true,
            ..extra
        },
    };
    let gamma_free = !fixed.gamma && data.d_w() > 0;
    let gamma_cfg = reduced(1, fixed);
    let delta_cfg = reduced(
        2,
        FixedBlocks {
            gamma: true,
            alpha: true,
            ..fixed
        },
    );

    let (gamma_run, delta_run) = join(
        || -> Result<Option<PosteriorDraws>> {
            if gamma_free {
                run_chain(data, design, prior, &gamma_cfg).map(Some)
            } else {
                Ok(None)
            }
        },
        || -> Result<Option<PosteriorDraws>> {
            if fixed.delta {
                Ok(None)
            } else {
                run_chain(data, design, prior, &delta_cfg).map(Some)
            }
        },
    );

    // π(γ* | y, Σ*, D*)
    let log_ord_gamma = match gamma_run? {
        None => 0.0,
        Some(run) => {
            let mut terms = Vec::with_capacity(run.draws.len());
            for th in &run.draws {
                let mut lp = 0.0;
                for g in 0..groups {
                    let c = eval.gamma_conditional(th, g)?.expect("covariates present");
                    lp += c.log_density(&star.gamma[g]);
                }
                terms.push(lp);
            }
            log_mean_exp(&terms)
        }
    };

    // π(δ* | y, Σ*, D*, γ*)
    let log_ord_delta = match delta_run? {
        None => 0.0,
        Some(run) => {
            let mut terms = Vec::with_capacity(run.draws.len());
            for th in &run.draws {
                let mut lp = 0.0;
                for g in 1..groups {
                    if let Some(c) = eval.delta_conditional(th, g)? {
                        let x = nalgebra::DVector::from_iterator(
                            layout.free(g).len(),
                            layout.free(g).iter().map(|&k| star.delta[g][k]),
                        );
                        lp += c.log_density(&x);
                    }
                }
                terms.push(lp);
            }
            log_mean_exp(&terms)
        }
    };

    // π(β₁* | y, δ*, γ*, Σ*, D*), exact
    let log_ord_beta = if fixed.beta1 {
        0.0
    } else {
        eval.beta1_conditional(&star)?.log_density(&star.beta1)
    };

    let log_lik = marginal_loglik(&star, data, design)?;
    let log_prior = log_prior_free(prior, &star, &layout, &fixed)?;
    let mut out = MarglikResult {
        log_marglik: 0.0,
        log_lik,
        log_prior,
        log_ordinate_variances: log_ord_var,
        log_ordinate_gamma: log_ord_gamma,
        log_ordinate_delta: log_ord_delta,
        log_ordinate_beta1: log_ord_beta,
        theta_star: star,
    };
    out.log_marglik = log_lik + log_prior - out.log_ordinate();
    if !out.log_marglik.is_finite() {
        return Err(Error::Estimation("log marginal likelihood is not finite".into()));
    }
    Ok(out)
}

/// Posterior model probabilities from log marginal likelihoods; equal prior
/// model probabilities unless `prior_probs` is given.
pub fn posterior_model_probs(log_ml: &[f64], prior_probs: Option<&[f64]>) -> Result<Vec<f64>> {
    if log_ml.is_empty() {
        return Err(Error::Config("no models to compare".into()));
    }
    let log_prior: Vec<f64> = match prior_probs {
        None => vec![0.0; log_ml.len()],
        Some(p) => {
            if p.len() != log_ml.len() || p.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::Domain("prior model probabilities must be positive, one per model".into()));
            }
            p.iter().map(|v| v.ln()).collect()
        }
    };
    let z: Vec<f64> = log_ml.iter().zip(&log_prior).map(|(a, b)| a + b).collect();
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("log marginal likelihoods must be finite".into()));
    }
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}
