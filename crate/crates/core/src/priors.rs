//! Prior hyperparameters under the default, trained and Student-t regimes.
//!
//! Every variance prior is written InvGam(a/2, b/2) with density
//! ∝ x^{-(a/2+1)} exp(-(b/2)/x); [`HalfInvGamma`] stores (a, b).

use std::path::Path;

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::design::{ParamLayout, Variant};
use crate::error::{Error, Result};
use crate::gibbs::{run_chain, GibbsConfig};
use crate::design::DesignSet;
use crate::linalg::{normal_ln_pdf, std_normal, InvGamma};
use crate::model::ModelParams;
use crate::panel::PanelDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Default,
    Trained,
    StudentT,
}

/// Independent normals: mean and variance per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalBlock {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
}

impl NormalBlock {
    pub fn iid(dim: usize, mean: f64, var: f64) -> Self {
        NormalBlock {
            mean: DVector::from_element(dim, mean),
            var: DVector::from_element(dim, var),
        }
    }

    pub(crate) fn ln_pdf_at(&self, x: &DVector<f64>, coords: impl Iterator<Item = usize>) -> f64 {
        coords
            .map(|k| normal_ln_pdf(x[k], self.mean[k], self.var[k]))
            .sum()
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_fn(self.mean.len(), |k, _| {
            self.mean[k] + self.var[k].sqrt() * std_normal(rng)
        })
    }
}

/// InvGam(a/2, b/2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfInvGamma {
    pub a: f64,
    pub b: f64,
}

impl HalfInvGamma {
    pub fn new(a: f64, b: f64) -> Self {
        HalfInvGamma { a, b }
    }

    pub fn dist(&self) -> Result<InvGamma> {
        InvGamma::from_half(self.a, self.b)
    }

    /// Moment-matched InvGam with the given mean and variance, shape capped.
    pub fn moment_matched(mean: f64, var: f64, max_shape: f64) -> Self {
        let shape = (mean * mean / var + 2.0).min(max_shape);
        let rate = mean * (shape - 1.0);
        HalfInvGamma {
            a: 2.0 * shape,
            b: 2.0 * rate,
        }
    }
}

/// Student-t hyperparameters: V_δst ~ InvGam(ρ/2, ξ/2), so δ_st is
/// marginally t with ρ degrees of freedom and scale √(ξ/ρ).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudentTHyper {
    pub rho: f64,
    pub xi: f64,
}

impl StudentTHyper {
    pub fn local_variance_prior(&self) -> InvGamma {
        InvGamma {
            shape: 0.5 * self.rho,
            rate: 0.5 * self.xi,
        }
    }

    /// Prior mean of V_δst when it exists, the prior mode otherwise.
    pub fn initial_variance(&self) -> f64 {
        let ig = self.local_variance_prior();
        ig.mean().unwrap_or_else(|| ig.mode())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub regime: Regime,
    pub n_periods: usize,
    pub cohorts: Vec<usize>,
    pub d_w: usize,
    pub beta1: NormalBlock,
    /// One block per treated cohort, in cohort order. Under the Student-t
    /// regime only the means are used.
    pub delta: Vec<NormalBlock>,
    /// One block per group (never treated first).
    pub gamma: Vec<NormalBlock>,
    pub d: Vec<HalfInvGamma>,
    pub sigma2: Vec<Vec<HalfInvGamma>>,
    pub student_t: Option<StudentTHyper>,
}

pub const DEFAULT_NORMAL_VAR: f64 = 10.0;

/// β₁t, δ_st, γ ~ N(0, 10); σ²_st, D_s ~ InvGam(1/2, 1/2).
pub fn default_prior(n_periods: usize, d_w: usize, cohorts: &[usize]) -> PriorSpec {
    let groups = cohorts.len() + 1;
    PriorSpec {
        regime: Regime::Default,
        n_periods,
        cohorts: cohorts.to_vec(),
        d_w,
        beta1: NormalBlock::iid(n_periods, 0.0, DEFAULT_NORMAL_VAR),
        delta: vec![NormalBlock::iid(n_periods, 0.0, DEFAULT_NORMAL_VAR); cohorts.len()],
        gamma: vec![NormalBlock::iid(d_w, 0.0, DEFAULT_NORMAL_VAR); groups],
        d: vec![HalfInvGamma::new(1.0, 1.0); groups],
        sigma2: vec![vec![HalfInvGamma::new(1.0, 1.0); n_periods]; groups],
        student_t: None,
    }
}

/// Default blocks with δ_st ~ N(0, V_δst), V_δst ~ InvGam(ρ/2, ξ/2).
pub fn student_t_prior(
    n_periods: usize,
    d_w: usize,
    cohorts: &[usize],
    rho: f64,
    xi: f64,
) -> Result<PriorSpec> {
    if !(rho > 0.0 && xi > 0.0 && rho.is_finite() && xi.is_finite()) {
        return Err(Error::Domain(format!(
            "Student-t hyperparameters must be positive, got ρ={rho}, ξ={xi}"
        )));
    }
    let hyper = StudentTHyper { rho, xi };
    let mut p = default_prior(n_periods, d_w, cohorts);
    p.regime = Regime::StudentT;
    p.delta = vec![NormalBlock::iid(n_periods, 0.0, hyper.initial_variance()); cohorts.len()];
    p.student_t = Some(hyper);
    Ok(p)
}

impl PriorSpec {
    pub fn n_groups(&self) -> usize {
        self.cohorts.len() + 1
    }

    /// δ prior of group `g ≥ 1`.
    pub fn delta_block(&self, g: usize) -> &NormalBlock {
        &self.delta[g - 1]
    }

    /// Fixed prior variances of δ_g; an error under the Student-t regime,
    /// where they are latent.
    pub fn delta_variance(&self, g: usize) -> Result<&DVector<f64>> {
        if self.regime == Regime::StudentT {
            return Err(Error::Config(
                "δ prior variances are latent under the Student-t regime".into(),
            ));
        }
        Ok(&self.delta[g - 1].var)
    }

    pub fn check(&self) -> Result<()> {
        let t = self.n_periods;
        let g = self.n_groups();
        let dims_ok = self.beta1.mean.len() == t
            && self.beta1.var.len() == t
            && self.delta.len() == self.cohorts.len()
            && self.delta.iter().all(|b| b.mean.len() == t && b.var.len() == t)
            && self.gamma.len() == g
            && self
                .gamma
                .iter()
                .all(|b| b.mean.len() == self.d_w && b.var.len() == self.d_w)
            && self.d.len() == g
            && self.sigma2.len() == g
            && self.sigma2.iter().all(|v| v.len() == t);
        if !dims_ok {
            return Err(Error::Dimension("prior blocks do not match (T, d_w, cohorts)".into()));
        }
        let normal_vars = self
            .beta1
            .var
            .iter()
            .chain(self.delta.iter().flat_map(|b| b.var.iter()))
            .chain(self.gamma.iter().flat_map(|b| b.var.iter()));
        if normal_vars.into_iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Domain("normal prior variances must be positive".into()));
        }
        for ig in self.d.iter().chain(self.sigma2.iter().flatten()) {
            ig.dist()?;
        }
        match (self.regime, &self.student_t) {
            (Regime::StudentT, Some(h)) => {
                student_t_prior(t, self.d_w, &self.cohorts, h.rho, h.xi)?;
            }
            (Regime::StudentT, None) => {
                return Err(Error::Config("Student-t regime needs (ρ, ξ)".into()))
            }
            (_, Some(_)) => {
                return Err(Error::Config("(ρ, ξ) given outside the Student-t regime".into()))
            }
            _ => {}
        }
        Ok(())
    }

    /// Checks that the prior was built for this panel's shape.
    pub fn check_against(&self, data: &PanelDataset) -> Result<()> {
        self.check()?;
        if self.n_periods != data.n_periods()
            || self.cohorts != data.cohorts()
            || self.d_w != data.d_w()
        {
            return Err(Error::Dimension(format!(
                "prior is for T={}, cohorts {:?}, d_w={} but the panel has T={}, cohorts {:?}, d_w={}",
                self.n_periods,
                self.cohorts,
                self.d_w,
                data.n_periods(),
                data.cohorts(),
                data.d_w()
            )));
        }
        Ok(())
    }

    /// log π(θ) over the blocks that are free under `layout` (latent V_δ
    /// excluded; only meaningful for fixed-variance regimes).
    pub fn log_density(&self, theta: &ModelParams, layout: &ParamLayout) -> Result<f64> {
        let mut lp = self.beta1.ln_pdf_at(&theta.beta1, 0..self.n_periods);
        for g in 1..self.n_groups() {
            let var = self.delta_variance(g)?;
            let block = NormalBlock {
                mean: self.delta_block(g).mean.clone(),
                var: var.clone(),
            };
            lp += block.ln_pdf_at(&theta.delta[g], layout.free(g).iter().copied());
        }
        for g in 0..self.n_groups() {
            lp += self.gamma[g].ln_pdf_at(&theta.gamma[g], 0..self.d_w);
            lp += self.d[g].dist()?.ln_pdf(theta.d[g]);
            for t in 0..self.n_periods {
                lp += self.sigma2[g][t].dist()?.ln_pdf(theta.sigma2[g][t]);
            }
        }
        Ok(lp)
    }

    /// One joint prior draw of θ (without α).
    pub fn sample<R: Rng + ?Sized>(&self, layout: &ParamLayout, rng: &mut R) -> Result<ModelParams> {
        let t = self.n_periods;
        let mut theta = ModelParams::zeros(layout, self.d_w);
        theta.beta1 = self.beta1.sample(rng);
        if let Some(h) = &self.student_t {
            let ig = h.local_variance_prior();
            let mut v = vec![DVector::from_element(t, 1.0)];
            for _ in 1..self.n_groups() {
                v.push(DVector::from_fn(t, |_, _| ig.sample(rng)));
            }
            theta.v_delta = Some(v);
        }
        for g in 1..self.n_groups() {
            let block = self.delta_block(g);
            let mut dl = DVector::zeros(t);
            for &k in layout.free(g) {
                let var = match &theta.v_delta {
                    Some(v) => v[g][k],
                    None => block.var[k],
                };
                dl[k] = block.mean[k] + var.sqrt() * std_normal(rng);
            }
            theta.delta[g] = dl;
        }
        for g in 0..self.n_groups() {
            theta.gamma[g] = self.gamma[g].sample(rng);
            theta.d[g] = self.d[g].dist()?.sample(rng);
            theta.sigma2[g] = DVector::from_fn(t, |k, _| {
                self.sigma2[g][k].dist().expect("checked").sample(rng)
            });
        }
        Ok(theta)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: PriorSpec = serde_json::from_str(&s)?;
        p.check()?;
        Ok(p)
    }
}

/// Settings of the training-sample prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    /// Posterior variances are multiplied by this factor (≥ 1).
    pub inflation: f64,
    /// Upper bound on the moment-matched inverse-gamma shape.
    pub max_shape: f64,
    pub gibbs: GibbsConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            inflation: 10.0,
            max_shape: 50.0,
            gibbs: GibbsConfig::default(),
        }
    }
}

fn mean_var(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let m = xs.clone().sum::<f64>() / n;
    let v = xs.map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, v)
}

/// Prior whose hyperparameters are estimated from a training panel: normal
/// blocks take the training posterior means and inflated variances, variance
/// blocks are moment-matched inverse gammas.
pub fn training_prior(
    train: &PanelDataset,
    base: &PriorSpec,
    cfg: &TrainingConfig,
) -> Result<PriorSpec> {
    if base.regime != Regime::Default {
        return Err(Error::Config("the training prior starts from the default regime".into()));
    }
    if !(cfg.inflation >= 1.0) {
        return Err(Error::Config(format!("inflation must be ≥ 1, got {}", cfg.inflation)));
    }
    if cfg.gibbs.draws < 2 {
        return Err(Error::Config("training needs at least 2 retained draws".into()));
    }
    base.check_against(train)?;
    let design = DesignSet::for_panel(train)?;
    let mut gcfg = cfg.gibbs.clone();
    gcfg.variant = Variant::Full;
    let draws = run_chain(train, &design, base, &gcfg)?;
    let layout = ParamLayout::for_panel(Variant::Full, train);
    let th = &draws.draws;
    let infl = cfg.inflation;
    let normal = |get: &dyn Fn(&ModelParams) -> f64, floor: f64| -> (f64, f64) {
        let (m, v) = mean_var(th.iter().map(get));
        (m, (v * infl).max(floor))
    };

    let mut out = base.clone();
    out.regime = Regime::Trained;
    for k in 0..base.n_periods {
        let (m, v) = normal(&|p| p.beta1[k], 1e-12);
        out.beta1.mean[k] = m;
        out.beta1.var[k] = v;
    }
    for g in 1..base.n_groups() {
        for &k in layout.free(g) {
            let (m, v) = normal(&|p| p.delta[g][k], 1e-12);
            out.delta[g - 1].mean[k] = m;
            out.delta[g - 1].var[k] = v;
        }
    }
    for g in 0..base.n_groups() {
        for k in 0..base.d_w {
            let (m, v) = normal(&|p| p.gamma[g][k], 1e-12);
            out.gamma[g].mean[k] = m;
            out.gamma[g].var[k] = v;
        }
        let (m, v) = mean_var(th.iter().map(|p| p.d[g]));
        out.d[g] = HalfInvGamma::moment_matched(m, (v * infl).max(1e-300), cfg.max_shape);
        for k in 0..base.n_periods {
            let (m, v) = mean_var(th.iter().map(|p| p.sigma2[g][k]));
            out.sigma2[g][k] =
                HalfInvGamma::moment_matched(m, (v * infl).max(1e-300), cfg.max_shape);
        }
    }
    out.check()?;
    Ok(out)
}
