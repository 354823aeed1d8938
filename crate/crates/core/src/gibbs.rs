//! Blocked Gibbs sampler for the random-intercept potential-outcomes model.
//!
//! β₁ and δ are drawn with the random intercepts integrated out (precision
//! built from Λ_s⁻¹); α is refreshed right after them so that σ², γ and D
//! condition on an α consistent with the current mean parameters. Every
//! step is an exact conjugate draw.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{DesignSet, ParamLayout, Variant};
use crate::error::{Error, Result};
use crate::linalg::{select_columns, std_normal, GaussianPrecision, InvGamma};
use crate::model::{effect_keys, effect_values, AttTable, ModelParams, RandomInterceptPrecision};
use crate::panel::PanelDataset;
use crate::priors::{PriorSpec, Regime};
use crate::rng::BlockRngs;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Prior means for location blocks, prior modes for variances.
    PriorMean,
    Custom(ModelParams),
}

/// Blocks held at their initial values instead of being sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FixedBlocks {
    pub beta1: bool,
    pub delta: bool,
    pub alpha: bool,
    pub sigma2: bool,
    pub gamma: bool,
    pub d: bool,
    pub v_delta: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GibbsConfig {
    /// Retained draws G.
    pub draws: usize,
    pub burnin: usize,
    pub thin: usize,
    pub seed: u64,
    pub variant: Variant,
    pub init: Init,
    #[serde(default)]
    pub fixed: FixedBlocks,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        GibbsConfig {
            draws: 2000,
            burnin: 500,
            thin: 1,
            seed: 0,
            variant: Variant::Full,
            init: Init::PriorMean,
            fixed: FixedBlocks::default(),
        }
    }
}

impl GibbsConfig {
    pub fn check(&self) -> Result<()> {
        if self.draws < 1 {
            return Err(Error::Config("at least one retained draw is required".into()));
        }
        if self.thin < 1 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub draws: Vec<ModelParams>,
    pub config: GibbsConfig,
    pub layout: ParamLayout,
    /// Word positions of the block streams at each retained draw. Every move
    /// is an exact conditional draw, so there is no acceptance record.
    pub rng_positions: Vec<[u128; 7]>,
}

/// Per-group sufficient statistics that do not change during sampling.
#[derive(Debug, Clone)]
struct GroupStats {
    n: usize,
    y_sum: DVector<f64>,
    w_sum: DVector<f64>,
    wtw: DMatrix<f64>,
}

pub struct Sampler<'a> {
    data: &'a PanelDataset,
    design: &'a DesignSet,
    prior: &'a PriorSpec,
    layout: ParamLayout,
    fixed: FixedBlocks,
    stats: Vec<GroupStats>,
    lt_free: Vec<DMatrix<f64>>,
    pub state: ModelParams,
    rngs: BlockRngs,
}

impl<'a> Sampler<'a> {
    pub fn new(
        data: &'a PanelDataset,
        design: &'a DesignSet,
        prior: &'a PriorSpec,
        cfg: &GibbsConfig,
    ) -> Result<Self> {
        cfg.check()?;
        prior.check_against(data)?;
        if design.n_periods() != data.n_periods() || design.cohorts() != data.cohorts() {
            return Err(Error::Dimension("design does not match the panel".into()));
        }
        let layout = ParamLayout::for_panel(cfg.variant, data);
        let d_w = data.d_w();
        let stats = (0..data.n_groups())
            .map(|g| {
                let units = data.group_units(g);
                let mut y_sum = DVector::zeros(data.n_periods());
                let mut w_sum = DVector::zeros(d_w);
                let mut wtw = DMatrix::zeros(d_w, d_w);
                for &i in units {
                    y_sum += data.y().row(i).transpose();
                    let w = data.w().row(i).transpose();
                    wtw += &w * w.transpose();
                    w_sum += w;
                }
                GroupStats {
                    n: units.len(),
                    y_sum,
                    w_sum,
                    wtw,
                }
            })
            .collect();
        let lt_free = (0..data.n_groups())
            .map(|g| select_columns(design.lt(), layout.free(g)))
            .collect();
        let mut sampler = Sampler {
            data,
            design,
            prior,
            layout,
            fixed: cfg.fixed,
            stats,
            lt_free,
            state: ModelParams::zeros(&ParamLayout::for_panel(cfg.variant, data), d_w),
            rngs: BlockRngs::new(cfg.seed),
        };
        sampler.state = sampler.initial_state(&cfg.init)?;
        Ok(sampler)
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn rng_positions(&self) -> [u128; 7] {
        self.rngs.positions()
    }

    fn is_student_t(&self) -> bool {
        self.prior.regime == Regime::StudentT
    }

    fn initial_state(&self, init: &Init) -> Result<ModelParams> {
        let d_w = self.data.d_w();
        let mut th = match init {
            Init::Custom(theta) => {
                let mut th = theta.clone();
                for g in 0..th.n_groups() {
                    for k in 0..self.layout.n_periods {
                        if !self.layout.free(g).contains(&k) {
                            th.delta[g][k] = 0.0;
                        }
                    }
                }
                th
            }
            Init::PriorMean => {
                let p = self.prior;
                let mut th = ModelParams::zeros(&self.layout, d_w);
                th.beta1 = p.beta1.mean.clone();
                for g in 1..self.layout.n_groups() {
                    for &k in self.layout.free(g) {
                        th.delta[g][k] = p.delta_block(g).mean[k];
                    }
                }
                for g in 0..self.layout.n_groups() {
                    th.gamma[g] = p.gamma[g].mean.clone();
                    th.d[g] = p.d[g].dist()?.mode();
                    th.sigma2[g] = DVector::from_fn(self.layout.n_periods, |k, _| {
                        p.sigma2[g][k].dist().expect("checked").mode()
                    });
                }
                th
            }
        };
        if th.alpha.as_ref().map(|a| a.len()) != Some(self.data.n()) {
            th.alpha = Some(DVector::from_fn(self.data.n(), |i, _| {
                self.intercept_mean(&th, i)
            }));
        }
        if self.is_student_t() {
            if th.v_delta.is_none() {
                let v0 = self.prior.student_t.expect("checked").initial_variance();
                th.v_delta = Some(vec![
                    DVector::from_element(self.layout.n_periods, v0);
                    self.layout.n_groups()
                ]);
            }
        } else {
            th.v_delta = None;
        }
        th.check(&self.layout, d_w)?;
        Ok(th)
    }

    /// w_i'γ_s for unit i.
    fn intercept_mean(&self, th: &ModelParams, i: usize) -> f64 {
        let g = self.data.group_of_unit(i);
        self.data.w().row(i).dot(&th.gamma[g].transpose())
    }

    /// Σ_i (y_i − 𝟙 w_i'γ_g) − n_g L_T(part) for group g.
    fn collapsed_residual_sum(&self, th: &ModelParams, g: usize, part: &DVector<f64>) -> DVector<f64> {
        let st = &self.stats[g];
        let wg = st.w_sum.dot(&th.gamma[g]);
        let lt_part = self.design.lt() * part;
        DVector::from_fn(self.layout.n_periods, |k, _| {
            st.y_sum[k] - wg - st.n as f64 * lt_part[k]
        })
    }

    /// β₁ | δ, γ, Σ, D with α integrated out.
    pub fn beta1_conditional(&self, th: &ModelParams) -> Result<GaussianPrecision> {
        let pb = &self.prior.beta1;
        let mut prec = DMatrix::from_diagonal(&pb.var.map(|v| 1.0 / v));
        let mut rhs = pb.mean.component_div(&pb.var);
        let lt = self.design.lt();
        for g in 0..self.data.n_groups() {
            let n = self.stats[g].n;
            if n == 0 {
                continue;
            }
            let lam = RandomInterceptPrecision::new(&th.sigma2[g], th.d[g])?;
            prec += lam.sandwich(lt) * n as f64;
            let e = self.collapsed_residual_sum(th, g, &th.delta[g]);
            rhs += lt.transpose() * lam.apply(&e);
        }
        GaussianPrecision::new(prec, &rhs, "beta1")
    }

    fn delta_prior_var(&self, th: &ModelParams, g: usize) -> Result<DVector<f64>> {
        Ok(match &th.v_delta {
            Some(v) if self.is_student_t() => v[g].clone(),
            _ => self.prior.delta_variance(g)?.clone(),
        })
    }

    /// Free coordinates of δ_g | β₁, γ_g, Σ_g, D_g with α integrated out;
    /// `None` when the group has no free coordinates.
    pub fn delta_conditional(&self, th: &ModelParams, g: usize) -> Result<Option<GaussianPrecision>> {
        let free = self.layout.free(g);
        if free.is_empty() {
            return Ok(None);
        }
        let var = self.delta_prior_var(th, g)?;
        let mean = &self.prior.delta_block(g).mean;
        let mut prec = DMatrix::from_fn(free.len(), free.len(), |r, c| {
            if r == c {
                1.0 / var[free[r]]
            } else {
                0.0
            }
        });
        let mut rhs = DVector::from_fn(free.len(), |r, _| mean[free[r]] / var[free[r]]);
        let st = &self.stats[g];
        if st.n > 0 {
            let x = &self.lt_free[g];
            let lam = RandomInterceptPrecision::new(&th.sigma2[g], th.d[g])?;
            prec += lam.sandwich(x) * st.n as f64;
            let e = self.collapsed_residual_sum(th, g, &th.beta1);
            rhs += x.transpose() * lam.apply(&e);
        }
        GaussianPrecision::new(prec, &rhs, &format!("delta[{}]", self.data.group_label(g))).map(Some)
    }

    /// γ_g | α, D_g; `None` without covariates.
    pub fn gamma_conditional(&self, th: &ModelParams, g: usize) -> Result<Option<GaussianPrecision>> {
        let d_w = self.data.d_w();
        if d_w == 0 {
            return Ok(None);
        }
        let pg = &self.prior.gamma[g];
        let mut prec = DMatrix::from_diagonal(&pg.var.map(|v| 1.0 / v));
        let mut rhs = pg.mean.component_div(&pg.var);
        let st = &self.stats[g];
        if st.n > 0 {
            let dg = th.d[g];
            if !(dg > 0.0) {
                return Err(Error::Domain("γ update needs D > 0".into()));
            }
            let alpha = th.alpha.as_ref().expect("augmented state");
            let mut wa = DVector::zeros(d_w);
            for &i in self.data.group_units(g) {
                wa += self.data.w().row(i).transpose() * alpha[i];
            }
            prec += &st.wtw / dg;
            rhs += wa / dg;
        }
        GaussianPrecision::new(prec, &rhs, &format!("gamma[{}]", self.data.group_label(g))).map(Some)
    }

    /// Mean and variance of α_i | β₁, δ, γ, Σ, D. D = 0 pins α_i at w_i'γ.
    pub fn alpha_conditional(&self, th: &ModelParams, i: usize) -> (f64, f64) {
        let g = self.data.group_of_unit(i);
        let path = crate::model::group_mean_path(th, self.design, g);
        self.alpha_conditional_on_path(th, i, &path)
    }

    fn alpha_conditional_on_path(&self, th: &ModelParams, i: usize, path: &DVector<f64>) -> (f64, f64) {
        let g = self.data.group_of_unit(i);
        let m = self.intercept_mean(th, i);
        let dg = th.d[g];
        if dg == 0.0 {
            return (m, 0.0);
        }
        let mut b = 1.0 / dg;
        let mut num = m / dg;
        for k in 0..self.layout.n_periods {
            let inv = 1.0 / th.sigma2[g][k];
            b += inv;
            num += inv * (self.data.y()[(i, k)] - path[k]);
        }
        (num / b, 1.0 / b)
    }

    /// D_g | α, γ_g.
    pub fn d_conditional(&self, th: &ModelParams, g: usize) -> Result<InvGamma> {
        let alpha = th.alpha.as_ref().expect("augmented state");
        let ss: f64 = self
            .data
            .group_units(g)
            .iter()
            .map(|&i| (alpha[i] - self.intercept_mean(th, i)).powi(2))
            .sum();
        let p = self.prior.d[g];
        InvGamma::from_half(p.a + self.stats[g].n as f64, p.b + ss)
    }

    /// σ²_gt | α, β₁, δ_g.
    pub fn sigma2_conditional(&self, th: &ModelParams, g: usize, t: usize) -> Result<InvGamma> {
        let alpha = th.alpha.as_ref().expect("augmented state");
        let path = crate::model::group_mean_path(th, self.design, g);
        let ss: f64 = self
            .data
            .group_units(g)
            .iter()
            .map(|&i| (self.data.y()[(i, t)] - alpha[i] - path[t]).powi(2))
            .sum();
        let p = self.prior.sigma2[g][t];
        InvGamma::from_half(p.a + self.stats[g].n as f64, p.b + ss)
    }

    /// V_δgt | δ_gt under the Student-t prior.
    pub fn v_delta_conditional(&self, th: &ModelParams, g: usize, t: usize) -> Result<InvGamma> {
        let h = self
            .prior
            .student_t
            .ok_or_else(|| Error::Config("V_δ is only sampled under the Student-t prior".into()))?;
        InvGamma::from_half(h.rho + 1.0, h.xi + th.delta[g][t].powi(2))
    }

    pub fn step_beta1(&mut self) -> Result<()> {
        let c = self.beta1_conditional(&self.state)?;
        self.state.beta1 = c.sample(&mut self.rngs.beta1);
        Ok(())
    }

    pub fn step_delta(&mut self, g: usize) -> Result<()> {
        if let Some(c) = self.delta_conditional(&self.state, g)? {
            let x = c.sample(&mut self.rngs.delta);
            for (r, &k) in self.layout.free(g).iter().enumerate() {
                self.state.delta[g][k] = x[r];
            }
        }
        Ok(())
    }

    pub fn step_alpha(&mut self, i: usize) {
        let (m, v) = self.alpha_conditional(&self.state, i);
        let z = std_normal(&mut self.rngs.alpha);
        self.state.alpha.as_mut().expect("augmented state")[i] = m + v.sqrt() * z;
    }

    /// All intercepts in unit order; same draws as calling `step_alpha` per unit.
    pub fn step_alpha_all(&mut self) {
        let paths: Vec<DVector<f64>> = (0..self.data.n_groups())
            .map(|g| crate::model::group_mean_path(&self.state, self.design, g))
            .collect();
        for i in 0..self.data.n() {
            let g = self.data.group_of_unit(i);
            let (m, v) = self.alpha_conditional_on_path(&self.state, i, &paths[g]);
            let z = std_normal(&mut self.rngs.alpha);
            self.state.alpha.as_mut().expect("augmented state")[i] = m + v.sqrt() * z;
        }
    }

    pub fn step_sigma2(&mut self, g: usize, t: usize) -> Result<()> {
        let c = self.sigma2_conditional(&self.state, g, t)?;
        self.state.sigma2[g][t] = c.sample(&mut self.rngs.sigma2);
        Ok(())
    }

    pub fn step_gamma(&mut self, g: usize) -> Result<()> {
        if let Some(c) = self.gamma_conditional(&self.state, g)? {
            self.state.gamma[g] = c.sample(&mut self.rngs.gamma);
        }
        Ok(())
    }

    pub fn step_d(&mut self, g: usize) -> Result<()> {
        let c = self.d_conditional(&self.state, g)?;
        self.state.d[g] = c.sample(&mut self.rngs.d);
        Ok(())
    }

    pub fn step_v_delta(&mut self, g: usize, t: usize) -> Result<()> {
        let c = self.v_delta_conditional(&self.state, g, t)?;
        let v = c.sample(&mut self.rngs.v_delta);
        self.state.v_delta.as_mut().expect("student-t state")[g][t] = v;
        Ok(())
    }

    /// One full sweep: β₁, δ, α, σ², γ, D, then V_δ under the Student-t prior.
    pub fn sweep(&mut self) -> Result<()> {
        let groups = self.data.n_groups();
        let t = self.layout.n_periods;
        if !self.fixed.beta1 {
            self.step_beta1()?;
        }
        if !self.fixed.delta {
            for g in 1..groups {
                self.step_delta(g)?;
            }
        }
        if !self.fixed.alpha {
            self.step_alpha_all();
        }
        if !self.fixed.sigma2 {
            for g in 0..groups {
                for k in 0..t {
                    self.step_sigma2(g, k)?;
                }
            }
        }
        if !self.fixed.gamma {
            for g in 0..groups {
                self.step_gamma(g)?;
            }
        }
        if !self.fixed.d {
            for g in 0..groups {
                self.step_d(g)?;
            }
        }
        if self.is_student_t() && !self.fixed.v_delta {
            for g in 1..groups {
                for k in self.layout.free(g).to_vec() {
                    self.step_v_delta(g, k)?;
                }
            }
        }
        Ok(())
    }
}

/// Runs burn-in plus `draws · thin` sweeps and keeps every `thin`-th state.
pub fn run_chain(
    data: &PanelDataset,
    design: &DesignSet,
    prior: &PriorSpec,
    cfg: &GibbsConfig,
) -> Result<PosteriorDraws> {
    let mut sampler = Sampler::new(data, design, prior, cfg)?;
    let mut draws = Vec::with_capacity(cfg.draws);
    let mut positions = Vec::with_capacity(cfg.draws);
    let total = cfg.burnin + cfg.draws * cfg.thin;
    for sweep in 0..total {
        sampler.sweep().map_err(|e| {
            Error::Estimation(format!(
                "sweep {sweep} of {total} (seed {}, variant {}): {e}",
                cfg.seed,
                cfg.variant.name()
            ))
        })?;
        if sweep >= cfg.burnin && (sweep - cfg.burnin + 1) % cfg.thin == 0 {
            draws.push(sampler.state.clone());
            positions.push(sampler.rng_positions());
        }
    }
    Ok(PosteriorDraws {
        draws,
        config: cfg.clone(),
        layout: sampler.layout.clone(),
        rng_positions: positions,
    })
}

/// Posterior mean, SD and equal-tailed 95% interval of every ATT and PreDiD.
pub fn summarize(draws: &PosteriorDraws, design: &DesignSet) -> AttTable {
    let keys = effect_keys(design);
    let mut samples = vec![Vec::with_capacity(draws.draws.len()); keys.len()];
    for th in &draws.draws {
        for (j, v) in effect_values(&th.delta, design).into_iter().enumerate() {
            samples[j].push(v);
        }
    }
    AttTable::from_samples(&keys, &samples)
}

impl PosteriorDraws {
    /// Column names of the draw archive.
    pub fn columns(&self, data: &PanelDataset) -> Vec<String> {
        let t = self.layout.n_periods;
        let label = |g: usize| data.group_label(g);
        let mut cols: Vec<String> = (1..=t).map(|k| format!("beta1_t{k}")).collect();
        for g in 1..self.layout.n_groups() {
            cols.extend(self.layout.free(g).iter().map(|k| format!("delta_s{}_t{}", label(g), k + 1)));
        }
        for g in 0..self.layout.n_groups() {
            cols.extend((1..=data.d_w()).map(|k| format!("gamma_s{}_k{k}", label(g))));
        }
        for g in 0..self.layout.n_groups() {
            cols.extend((1..=t).map(|k| format!("sigma2_s{}_t{k}", label(g))));
        }
        for g in 0..self.layout.n_groups() {
            cols.push(format!("D_s{}", label(g)));
        }
        if self.draws.first().is_some_and(|d| d.v_delta.is_some()) {
            for g in 1..self.layout.n_groups() {
                cols.extend(
                    self.layout
                        .free(g)
                        .iter()
                        .map(|k| format!("vdelta_s{}_t{}", label(g), k + 1)),
                );
            }
        }
        cols
    }

    fn row(&self, th: &ModelParams) -> Vec<f64> {
        let mut r: Vec<f64> = th.beta1.iter().copied().collect();
        for g in 1..self.layout.n_groups() {
            r.extend(self.layout.free(g).iter().map(|&k| th.delta[g][k]));
        }
        for g in &th.gamma {
            r.extend(g.iter());
        }
        for s in &th.sigma2 {
            r.extend(s.iter());
        }
        r.extend(th.d.iter());
        if let Some(v) = &th.v_delta {
            for g in 1..self.layout.n_groups() {
                r.extend(self.layout.free(g).iter().map(|&k| v[g][k]));
            }
        }
        r
    }

    /// Columnar CSV (one row per retained draw) plus a JSON manifest.
    /// Latent intercepts are not archived.
    pub fn save(&self, data: &PanelDataset, csv_path: &Path, manifest_path: &Path) -> Result<()> {
        let f = std::fs::File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
        let mut wtr = csv::Writer::from_writer(f);
        let cols = self.columns(data);
        wtr.write_record(&cols)?;
        for th in &self.draws {
            wtr.write_record(self.row(th).iter().map(|v| format!("{v}")))?;
        }
        wtr.flush().map_err(|e| Error::io(csv_path, e))?;
        let manifest = serde_json::json!({
            "config": self.config,
            "seed": self.config.seed,
            "layout": self.layout,
            "columns": cols,
            "retained_draws": self.draws.len(),
            "includes_alpha": false,
        });
        std::fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::io(manifest_path, e))
    }

    /// Posterior mean of the non-latent blocks.
    pub fn posterior_mean(&self) -> ModelParams {
        let n = self.draws.len() as f64;
        let mut m = self.draws[0].clone();
        m.alpha = None;
        m.v_delta = None;
        m.beta1.fill(0.0);
        m.delta.iter_mut().for_each(|v| v.fill(0.0));
        m.gamma.iter_mut().for_each(|v| v.fill(0.0));
        m.sigma2.iter_mut().for_each(|v| v.fill(0.0));
        m.d.iter_mut().for_each(|v| *v = 0.0);
        for th in &self.draws {
            m.beta1 += &th.beta1 / n;
            for g in 0..m.delta.len() {
                m.delta[g] += &th.delta[g] / n;
                m.gamma[g] += &th.gamma[g] / n;
                m.sigma2[g] += &th.sigma2[g] / n;
                m.d[g] += th.d[g] / n;
            }
        }
        m
    }
}
