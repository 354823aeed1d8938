//! Shared fixtures and dense reference computations for integration tests
//! and the acceptance runner.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use staggered_did::design::{DesignSet, ParamLayout, Variant};
use staggered_did::gibbs::{FixedBlocks, GibbsConfig, Init, Sampler};
use staggered_did::model::ModelParams;
use staggered_did::panel::PanelDataset;
use staggered_did::priors::{HalfInvGamma, NormalBlock, PriorSpec};
use staggered_did::rng::derive_seed;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

/// `per_group` units in every group, random outcomes and one covariate.
pub fn toy_panel(n_periods: usize, cohorts: &[usize], per_group: usize, seed: u64) -> PanelDataset {
    let mut r = rng(seed);
    let mut labels = Vec::new();
    for &s in std::iter::once(&1).chain(cohorts) {
        labels.extend(std::iter::repeat(s).take(per_group));
    }
    let n = labels.len();
    let w = DMatrix::from_fn(n, 1, |_, _| 1.0 + normal(&mut r));
    let y = DMatrix::from_fn(n, n_periods, |i, t| {
        0.5 * w[(i, 0)] + 0.1 * t as f64 + if labels[i] > 1 && t + 1 >= labels[i] { 0.3 } else { 0.0 } + normal(&mut r)
    });
    PanelDataset::new(y, w, labels, cohorts.to_vec()).unwrap()
}

/// A random parameter point (with α) valid for `layout`.
pub fn random_theta(layout: &ParamLayout, data: &PanelDataset, seed: u64) -> ModelParams {
    let mut r = rng(seed);
    let mut th = ModelParams::zeros(layout, data.d_w());
    for k in 0..layout.n_periods {
        th.beta1[k] = normal(&mut r);
    }
    for g in 0..layout.n_groups() {
        if g > 0 {
            for &k in layout.free(g) {
                th.delta[g][k] = 0.5 * normal(&mut r);
            }
        }
        for j in 0..data.d_w() {
            th.gamma[g][j] = normal(&mut r);
        }
        th.d[g] = 0.2 + r.random::<f64>();
        for k in 0..layout.n_periods {
            th.sigma2[g][k] = 0.3 + r.random::<f64>();
        }
    }
    th.alpha = Some(DVector::from_fn(data.n(), |_, _| normal(&mut r)));
    th
}

pub fn gibbs_cfg(variant: Variant, draws: usize, burnin: usize, seed: u64) -> GibbsConfig {
    GibbsConfig {
        draws,
        burnin,
        thin: 1,
        seed,
        variant,
        init: Init::PriorMean,
        fixed: FixedBlocks::default(),
    }
}

/// Λ = diag(σ²) + D 𝟙𝟙ᵀ as a dense matrix.
pub fn dense_lambda(sigma2: &DVector<f64>, d: f64) -> DMatrix<f64> {
    let t = sigma2.len();
    DMatrix::from_fn(t, t, |r, c| d + if r == c { sigma2[r] } else { 0.0 })
}

/// Dense Gaussian posterior (mean, covariance) of a coefficient block b in
/// y_i = X_i b + offset_i + e_i, e_i ~ N(0, Λ_i), b ~ N(m0, diag(v0)).
pub fn dense_gaussian_posterior(
    blocks: &[(DMatrix<f64>, DVector<f64>, DMatrix<f64>)],
    m0: &DVector<f64>,
    v0: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let k = m0.len();
    let mut prec = DMatrix::from_diagonal(&v0.map(|v| 1.0 / v));
    let mut rhs = m0.component_div(v0);
    for (x, resid, lambda) in blocks {
        let li = lambda.clone().try_inverse().unwrap();
        prec += x.transpose() * &li * x;
        rhs += x.transpose() * &li * resid;
    }
    let cov = prec.try_inverse().unwrap();
    assert_eq!(cov.nrows(), k);
    let mean = &cov * rhs;
    (mean, cov)
}

pub fn lt_matrix(t: usize) -> DMatrix<f64> {
    DMatrix::from_fn(t, t, |r, c| if c <= r { 1.0 } else { 0.0 })
}

pub fn columns(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |r, c| m[(r, cols[c])])
}

/// Stacked coefficient vector (β₁, γ per group, free δ) and its design,
/// matching the mixed model with α integrated out.
pub fn stacked_design(data: &PanelDataset, layout: &ParamLayout, unit: usize) -> DMatrix<f64> {
    let t = layout.n_periods;
    let d_w = data.d_w();
    let groups = layout.n_groups();
    let dim = t + groups * d_w + layout.n_free_delta();
    let g = data.group_of_unit(unit);
    let lt = lt_matrix(t);
    let mut x = DMatrix::zeros(t, dim);
    x.view_mut((0, 0), (t, t)).copy_from(&lt);
    for j in 0..d_w {
        for r in 0..t {
            x[(r, t + g * d_w + j)] = data.w()[(unit, j)];
        }
    }
    let mut off = t + groups * d_w;
    for h in 1..groups {
        let free = layout.free(h);
        if h == g {
            x.view_mut((0, off), (t, free.len())).copy_from(&columns(&lt, free));
        }
        off += free.len();
    }
    x
}

pub fn stacked_prior(prior: &PriorSpec, layout: &ParamLayout) -> (DVector<f64>, DVector<f64>) {
    let mut m = Vec::new();
    let mut v = Vec::new();
    m.extend(prior.beta1.mean.iter());
    v.extend(prior.beta1.var.iter());
    for b in &prior.gamma {
        m.extend(b.mean.iter());
        v.extend(b.var.iter());
    }
    for g in 1..layout.n_groups() {
        for &k in layout.free(g) {
            m.push(prior.delta_block(g).mean[k]);
            v.push(prior.delta_block(g).var[k]);
        }
    }
    (DVector::from_vec(m), DVector::from_vec(v))
}

/// Closed-form log evidence when Σ and D are known: y is Gaussian with
/// mean X m0 and covariance X V0 Xᵀ + blockdiag(Λ).
pub fn closed_form_log_evidence(data: &PanelDataset, layout: &ParamLayout, prior: &PriorSpec, th: &ModelParams) -> f64 {
    let t = layout.n_periods;
    let n = data.n();
    let (m0, v0) = stacked_prior(prior, layout);
    let mut x = DMatrix::zeros(n * t, m0.len());
    let mut cov = DMatrix::zeros(n * t, n * t);
    let mut y = DVector::zeros(n * t);
    for i in 0..n {
        let g = data.group_of_unit(i);
        x.view_mut((i * t, 0), (t, m0.len())).copy_from(&stacked_design(data, layout, i));
        cov.view_mut((i * t, i * t), (t, t)).copy_from(&dense_lambda(&th.sigma2[g], th.d[g]));
        for k in 0..t {
            y[i * t + k] = data.y()[(i, k)];
        }
    }
    cov += &x * DMatrix::from_diagonal(&v0) * x.transpose();
    let resid = y - &x * m0;
    let chol = cov.cholesky().unwrap();
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let quad = resid.dot(&chol.solve(&resid));
    -0.5 * ((n * t) as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad)
}

/// Proper prior with finite moments everywhere, for simulation-based checks.
pub fn proper_prior(base: PriorSpec, loc_var: f64, a: f64, b: f64) -> PriorSpec {
    let mut p = base;
    let t = p.n_periods;
    p.beta1 = NormalBlock::iid(t, 0.0, loc_var);
    if p.student_t.is_none() {
        p.delta = vec![NormalBlock::iid(t, 0.0, loc_var); p.cohorts.len()];
    }
    p.gamma = vec![NormalBlock::iid(p.d_w, 0.0, loc_var); p.n_groups()];
    p.d = vec![HalfInvGamma::new(a, b); p.n_groups()];
    p.sigma2 = vec![vec![HalfInvGamma::new(a, b); t]; p.n_groups()];
    p
}

/// Scalar functions of θ compared by the Geweke test.
pub fn geweke_stats(th: &ModelParams, layout: &ParamLayout) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (k, v) in th.beta1.iter().enumerate() {
        out.push((format!("beta1[{k}]"), *v));
        out.push((format!("beta1[{k}]^2"), v * v));
    }
    for g in 1..layout.n_groups() {
        for &k in layout.free(g) {
            let v = th.delta[g][k];
            out.push((format!("delta[{g}][{k}]"), v));
            out.push((format!("delta[{g}][{k}]^2"), v * v));
            if let Some(vd) = &th.v_delta {
                out.push((format!("ln v_delta[{g}][{k}]"), vd[g][k].ln()));
            }
        }
    }
    for g in 0..layout.n_groups() {
        for (j, v) in th.gamma[g].iter().enumerate() {
            out.push((format!("gamma[{g}][{j}]"), *v));
            out.push((format!("gamma[{g}][{j}]^2"), v * v));
        }
        out.push((format!("ln D[{g}]"), th.d[g].ln()));
        for (k, v) in th.sigma2[g].iter().enumerate() {
            out.push((format!("ln sigma2[{g}][{k}]"), v.ln()));
        }
    }
    out
}

/// Outcomes drawn from the augmented likelihood y_i = α_i 𝟙 + L(β₁+δ_g) + e.
pub fn draw_outcomes(base: &PanelDataset, design: &DesignSet, th: &ModelParams, r: &mut ChaCha8Rng) -> DMatrix<f64> {
    let alpha = th.alpha.as_ref().expect("alpha");
    DMatrix::from_fn(base.n(), base.n_periods(), |i, k| {
        let g = base.group_of_unit(i);
        let path = design.lt() * (&th.beta1 + &th.delta[g]);
        alpha[i] + path[k] + th.sigma2[g][k].sqrt() * normal(r)
    })
}

pub fn draw_alpha(base: &PanelDataset, th: &ModelParams, r: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(base.n(), |i, _| {
        let g = base.group_of_unit(i);
        base.w().row(i).dot(&th.gamma[g].transpose()) + th.d[g].sqrt() * normal(r)
    })
}

pub struct GewekeResult {
    pub max_abs_z: f64,
    pub worst: String,
    pub n_stats: usize,
}

/// Marginal-conditional vs successive-conditional simulator comparison.
/// Means of the successive chain use batch-means standard errors.
pub fn geweke(base: &PanelDataset, prior: &PriorSpec, variant: Variant, sweeps: usize, seed: u64) -> GewekeResult {
    geweke_with(base, prior, prior, variant, sweeps, seed)
}

/// As [`geweke`], with the sampler run under `fit_prior`; a mismatch must
/// be detected.
pub fn geweke_with(
    base: &PanelDataset,
    prior: &PriorSpec,
    fit_prior: &PriorSpec,
    variant: Variant,
    sweeps: usize,
    seed: u64,
) -> GewekeResult {
    let design = DesignSet::for_panel(base).unwrap();
    let layout = ParamLayout::for_panel(variant, base);
    let mut r = rng(seed);

    let mut mc: Vec<Vec<f64>> = Vec::with_capacity(sweeps);
    let mut names = Vec::new();
    for _ in 0..sweeps {
        let th = prior.sample(&layout, &mut r).unwrap();
        let s = geweke_stats(&th, &layout);
        if names.is_empty() {
            names = s.iter().map(|(n, _)| n.clone()).collect();
        }
        mc.push(s.into_iter().map(|(_, v)| v).collect());
    }

    let mut th = prior.sample(&layout, &mut r).unwrap();
    th.alpha = Some(draw_alpha(base, &th, &mut r));
    let mut sc: Vec<Vec<f64>> = Vec::with_capacity(sweeps);
    for it in 0..sweeps {
        let y = draw_outcomes(base, &design, &th, &mut r);
        let data = base.with_outcomes(y).unwrap();
        let cfg = GibbsConfig {
            init: Init::Custom(th.clone()),
            ..gibbs_cfg(variant, 1, 0, derive_seed(seed, it as u64))
        };
        let mut s = Sampler::new(&data, &design, fit_prior, &cfg).unwrap();
        s.sweep().unwrap();
        th = s.state.clone();
        sc.push(geweke_stats(&th, &layout).into_iter().map(|(_, v)| v).collect());
    }

    let batches = 50;
    let bsize = sweeps / batches;
    let mut max_abs_z: f64 = 0.0;
    let mut worst = String::new();
    for (j, name) in names.iter().enumerate() {
        let m = sweeps as f64;
        let mc_mean = mc.iter().map(|v| v[j]).sum::<f64>() / m;
        let mc_var = mc.iter().map(|v| (v[j] - mc_mean).powi(2)).sum::<f64>() / (m - 1.0);
        let sc_mean = sc.iter().map(|v| v[j]).sum::<f64>() / m;
        let bm: Vec<f64> = (0..batches)
            .map(|b| sc[b * bsize..(b + 1) * bsize].iter().map(|v| v[j]).sum::<f64>() / bsize as f64)
            .collect();
        let bm_mean = bm.iter().sum::<f64>() / batches as f64;
        let bm_var = bm.iter().map(|v| (v - bm_mean).powi(2)).sum::<f64>() / (batches as f64 - 1.0);
        let se = (mc_var / m + bm_var / batches as f64).sqrt();
        let z = (mc_mean - sc_mean) / se;
        if z.abs() > max_abs_z {
            max_abs_z = z.abs();
            worst = name.clone();
        }
    }
    GewekeResult {
        max_abs_z,
        worst,
        n_stats: names.len(),
    }
}

/// Informative, non-uniform prior so prior terms enter the oracles.
pub fn informative_prior(data: &PanelDataset) -> PriorSpec {
    let mut p = staggered_did::priors::default_prior(data.n_periods(), data.d_w(), data.cohorts());
    for k in 0..p.n_periods {
        p.beta1.mean[k] = 0.1 * k as f64;
        p.beta1.var[k] = 0.5 + k as f64;
        for b in &mut p.delta {
            b.mean[k] = -0.2;
            b.var[k] = 2.0;
        }
    }
    for b in &mut p.gamma {
        b.mean[0] = 0.3;
        b.var[0] = 3.0;
    }
    p
}

fn gauss_err(got: &staggered_did::linalg::GaussianPrecision, m: &DVector<f64>, c: &DMatrix<f64>) -> f64 {
    (&got.mean - m).abs().max().max((got.covariance() - c).abs().max())
}

/// Largest deviation of the sampler's β₁, δ, γ and α conditionals (mean and
/// covariance) from dense conjugate posteriors, per block.
pub fn conjugate_errors(data: &PanelDataset, variant: Variant, seed: u64) -> Vec<(String, f64)> {
    let design = DesignSet::for_panel(data).unwrap();
    let layout = ParamLayout::for_panel(variant, data);
    let prior = informative_prior(data);
    let cfg = GibbsConfig {
        init: Init::Custom(random_theta(&layout, data, seed)),
        ..gibbs_cfg(variant, 1, 0, seed)
    };
    let s = Sampler::new(data, &design, &prior, &cfg).unwrap();
    let th = s.state.clone();
    let t = data.n_periods();
    let lt = lt_matrix(t);
    let offset = |i: usize, g: usize| DVector::from_element(t, data.w().row(i).dot(&th.gamma[g].transpose()));
    let mut out = Vec::new();

    let blocks: Vec<_> = (0..data.n())
        .map(|i| {
            let g = data.group_of_unit(i);
            let resid = data.y().row(i).transpose() - offset(i, g) - &lt * &th.delta[g];
            (lt.clone(), resid, dense_lambda(&th.sigma2[g], th.d[g]))
        })
        .collect();
    let (m, c) = dense_gaussian_posterior(&blocks, &prior.beta1.mean, &prior.beta1.var);
    out.push(("beta1".to_string(), gauss_err(&s.beta1_conditional(&th).unwrap(), &m, &c)));

    for g in 1..data.n_groups() {
        let free = layout.free(g);
        let x = columns(&lt, free);
        let blocks: Vec<_> = data
            .group_units(g)
            .iter()
            .map(|&i| {
                let resid = data.y().row(i).transpose() - offset(i, g) - &lt * &th.beta1;
                (x.clone(), resid, dense_lambda(&th.sigma2[g], th.d[g]))
            })
            .collect();
        let m0 = DVector::from_fn(free.len(), |r, _| prior.delta_block(g).mean[free[r]]);
        let v0 = DVector::from_fn(free.len(), |r, _| prior.delta_block(g).var[free[r]]);
        let (m, c) = dense_gaussian_posterior(&blocks, &m0, &v0);
        let got = s.delta_conditional(&th, g).unwrap().unwrap();
        out.push((format!("delta[{g}]"), gauss_err(&got, &m, &c)));
    }

    let alpha = th.alpha.as_ref().unwrap();
    for g in 0..data.n_groups() {
        let blocks: Vec<_> = data
            .group_units(g)
            .iter()
            .map(|&i| {
                let x = DMatrix::from_fn(1, data.d_w(), |_, j| data.w()[(i, j)]);
                (x, DVector::from_element(1, alpha[i]), DMatrix::from_element(1, 1, th.d[g]))
            })
            .collect();
        let (m, c) = dense_gaussian_posterior(&blocks, &prior.gamma[g].mean, &prior.gamma[g].var);
        let got = s.gamma_conditional(&th, g).unwrap().unwrap();
        out.push((format!("gamma[{g}]"), gauss_err(&got, &m, &c)));
    }

    let mut worst: f64 = 0.0;
    for i in 0..data.n() {
        let g = data.group_of_unit(i);
        let resid = data.y().row(i).transpose() - &lt * (&th.beta1 + &th.delta[g]);
        let blocks = vec![(DMatrix::from_element(t, 1, 1.0), resid, DMatrix::from_diagonal(&th.sigma2[g]))];
        let m0 = DVector::from_element(1, offset(i, g)[0]);
        let (m, c) = dense_gaussian_posterior(&blocks, &m0, &DVector::from_element(1, th.d[g]));
        let (gm, gv) = s.alpha_conditional(&th, i);
        worst = worst.max((gm - m[0]).abs()).max((gv - c[(0, 0)]).abs());
    }
    out.push(("alpha".to_string(), worst));
    out
}

/// Largest deviation of `lambda_inverse` (inverse and log-determinant) from
/// dense computations over `draws` random (σ², D).
pub fn lambda_inverse_error(draws: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let t = r.random_range(1..9);
        let sigma2 = DVector::from_fn(t, |_, _| 0.05 + 3.0 * r.random::<f64>());
        let d = if r.random::<f64>() < 0.1 { 0.0 } else { 5.0 * r.random::<f64>() };
        let (inv, logdet) = staggered_did::model::lambda_inverse(&sigma2, d).unwrap();
        let dense = dense_lambda(&sigma2, d);
        let reference = dense.clone().try_inverse().unwrap();
        worst = worst.max((inv - reference).abs().max()).max((logdet - dense.determinant().ln()).abs());
    }
    worst
}

pub fn toys() -> Vec<(&'static str, PanelDataset)> {
    vec![
        ("scalar", toy_panel(2, &[2], 3, 11)),
        ("two-cohort", toy_panel(3, &[2, 3], 4, 12)),
    ]
}
