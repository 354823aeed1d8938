//! Iterated feasible GLS: joint GLS for (β₁, γ, δ), BLUP random intercepts,
//! closed-form variance components, delta-method inference on the ATTs.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{DesignSet, ParamLayout, Variant};
use crate::error::{Error, Result};
use crate::model::{effect_keys, effect_values, AttRow, AttTable, ModelParams, RandomInterceptPrecision};
use crate::panel::PanelDataset;

pub const Z95: f64 = 1.959_963_984_540_054;

/// How the variance components are refreshed from the BLUPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceStep {
    /// Adds the conditional variance of α to both moments (EM fixed point,
    /// i.e. the ML variance components).
    Em,
    /// Plugs in the BLUPs alone. Biased toward small σ² and can collapse a
    /// σ²_t onto its floor.
    Plugin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IfglsConfig {
    pub variant: Variant,
    pub variance_step: VarianceStep,
    pub max_iter: usize,
    /// Max-norm change in (β̂, σ̂², D̂) below which iteration stops.
    /// `f64::INFINITY` gives a single feasible-GLS pass.
    pub tol: f64,
    pub sigma2_floor: f64,
    pub d_floor: f64,
    /// Squared extrapolation of the variance-component map between passes.
    /// Same fixed point; far fewer passes when a component sits on its floor.
    #[serde(default = "yes")]
    pub accelerate: bool,
}

fn yes() -> bool {
    true
}

impl Default for IfglsConfig {
    fn default() -> Self {
        IfglsConfig {
            variant: Variant::Full,
            variance_step: VarianceStep::Em,
            max_iter: 200,
            tol: 1e-8,
            sigma2_floor: 1e-8,
            d_floor: 0.0,
            accelerate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IfglsEstimate {
    /// Stacked (β₁, γ per group, free δ per treated cohort).
    pub beta: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub sigma2: Vec<DVector<f64>>,
    pub d: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Max-norm change at each iteration.
    pub trace: Vec<f64>,
    pub layout: ParamLayout,
    pub d_w: usize,
    pub att: AttTable,
}

/// Offsets of the stacked blocks.
#[derive(Debug, Clone)]
struct Stack {
    t: usize,
    d_w: usize,
    groups: usize,
    delta_start: Vec<usize>,
    dim: usize,
}

impl Stack {
    fn new(layout: &ParamLayout, d_w: usize) -> Self {
        let t = layout.n_periods;
        let groups = layout.n_groups();
        let mut delta_start = vec![0; groups];
        let mut pos = t + groups * d_w;
        for (g, start) in delta_start.iter_mut().enumerate().skip(1) {
            *start = pos;
            pos += layout.free(g).len();
        }
        Stack {
            t,
            d_w,
            groups,
            delta_start,
            dim: pos,
        }
    }

    fn gamma_start(&self, g: usize) -> usize {
        self.t + g * self.d_w
    }

    /// (name, end) of each block in stacking order.
    fn blocks(&self, layout: &ParamLayout, data: &PanelDataset) -> Vec<(String, usize)> {
        let mut out = vec![("beta1".to_string(), self.t)];
        for g in 0..self.groups {
            if self.d_w > 0 {
                out.push((format!("gamma[{}]", data.group_label(g)), self.gamma_start(g) + self.d_w));
            }
        }
        for g in 1..self.groups {
            if !layout.free(g).is_empty() {
                out.push((
                    format!("delta[{}]", data.group_label(g)),
                    self.delta_start[g] + layout.free(g).len(),
                ));
            }
        }
        out
    }
}

/// T × p design of unit i.
fn unit_design(data: &PanelDataset, design: &DesignSet, layout: &ParamLayout, st: &Stack, i: usize) -> DMatrix<f64> {
    let g = data.group_of_unit(i);
    let t = st.t;
    let mut x = DMatrix::zeros(t, st.dim);
    x.view_mut((0, 0), (t, t)).copy_from(design.lt());
    let gs = st.gamma_start(g);
    for k in 0..st.d_w {
        let wk = data.w()[(i, k)];
        x.view_mut((0, gs + k), (t, 1)).fill(wk);
    }
    for (r, &k) in layout.free(g).iter().enumerate() {
        for row in k..t {
            x[(row, st.delta_start[g] + r)] = 1.0;
        }
    }
    x
}

fn is_numerically_pd(a: &DMatrix<f64>) -> bool {
    let scale = a.diagonal().amax().max(f64::MIN_POSITIVE);
    match Cholesky::new(a.clone()) {
        None => false,
        Some(c) => c.l_dirty().diagonal().iter().all(|&v| v * v > 1e-11 * scale),
    }
}

/// Solves the stacked normal equations A β = b under the given Λ⁻¹ per group.
pub fn gls_update(
    data: &PanelDataset,
    design: &DesignSet,
    layout: &ParamLayout,
    lambda: &[RandomInterceptPrecision],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if lambda.len() != data.n_groups() {
        return Err(Error::Dimension("one Λ⁻¹ per group is required".into()));
    }
    let st = Stack::new(layout, data.d_w());
    let mut a = DMatrix::zeros(st.dim, st.dim);
    let mut b = DVector::zeros(st.dim);
    for i in 0..data.n() {
        let lam = &lambda[data.group_of_unit(i)];
        let x = unit_design(data, design, layout, &st, i);
        a += lam.sandwich(&x);
        let y = data.y().row(i).transpose();
        b += x.transpose() * lam.apply(&y);
    }
    a = (&a + a.transpose()) * 0.5;
    if !is_numerically_pd(&a) {
        let blocks = st.blocks(layout, data);
        let culprit = blocks
            .iter()
            .find(|(_, end)| !is_numerically_pd(&a.view((0, 0), (*end, *end)).into_owned()))
            .map(|(name, _)| name.clone())
            .unwrap_or_else(|| "stacked mean".into());
        return Err(Error::RankDeficient { block: culprit });
    }
    let chol = Cholesky::new(a).expect("checked above");
    let beta = chol.solve(&b);
    let cov = chol.inverse();
    Ok((beta, (&cov + cov.transpose()) * 0.5))
}

/// α̂ = D 𝟙'Σ⁻¹e / (1 + D 𝟙'Σ⁻¹𝟙).
pub fn blup_alpha(e: &[f64], sigma2: &DVector<f64>, d: f64) -> f64 {
    if d == 0.0 {
        return 0.0;
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (k, &ek) in e.iter().enumerate() {
        num += ek / sigma2[k];
        den += 1.0 / sigma2[k];
    }
    d * num / (1.0 + d * den)
}

/// Var(α_i | e_i) = D / (1 + D 𝟙'Σ⁻¹𝟙).
pub fn blup_variance(sigma2: &DVector<f64>, d: f64) -> f64 {
    d / (1.0 + d * sigma2.iter().map(|s| 1.0 / s).sum::<f64>())
}

/// σ̂²_t = n⁻¹ Σ [(e_it − α̂_i)² + v], D̂ = n⁻¹ Σ [α̂_i² + v], floored, where
/// `v` is the conditional variance of α (0 for the plug-in form).
/// `resid` is n × T.
pub fn variance_update(
    resid: &DMatrix<f64>,
    alpha: &[f64],
    v: f64,
    sigma2_floor: f64,
    d_floor: f64,
) -> (DVector<f64>, f64) {
    let n = resid.nrows();
    let t = resid.ncols();
    if n == 0 {
        return (DVector::from_element(t, sigma2_floor), d_floor);
    }
    let nf = n as f64;
    let sigma2 = DVector::from_fn(t, |k, _| {
        let ss: f64 = (0..n).map(|i| (resid[(i, k)] - alpha[i]).powi(2)).sum();
        (ss / nf + v).max(sigma2_floor)
    });
    let d = (alpha.iter().map(|a| a * a).sum::<f64>() / nf + v).max(d_floor);
    (sigma2, d)
}

fn residuals(
    data: &PanelDataset,
    design: &DesignSet,
    layout: &ParamLayout,
    beta: &DVector<f64>,
    g: usize,
) -> DMatrix<f64> {
    let st = Stack::new(layout, data.d_w());
    let units = data.group_units(g);
    let mut r = DMatrix::zeros(units.len(), st.t);
    for (row, &i) in units.iter().enumerate() {
        let fit = unit_design(data, design, layout, &st, i) * beta;
        for k in 0..st.t {
            r[(row, k)] = data.y()[(i, k)] - fit[k];
        }
    }
    r
}

/// Per-group (σ²₀, D₀) from residual moments: D₀ is the average
/// within-unit off-diagonal covariance, σ²₀ the remaining per-period variance.
fn moment_start(resid: &DMatrix<f64>, sigma2_floor: f64, d_floor: f64) -> (DVector<f64>, f64) {
    let (n, t) = resid.shape();
    if n == 0 {
        return (DVector::from_element(t, 1.0), d_floor);
    }
    let mut off = 0.0;
    for i in 0..n {
        let s: f64 = resid.row(i).sum();
        let sq: f64 = resid.row(i).iter().map(|v| v * v).sum();
        off += s * s - sq;
    }
    let d0 = (off / (n * t * (t - 1)) as f64).max(d_floor);
    let sigma2 = DVector::from_fn(t, |k, _| {
        let v = resid.column(k).iter().map(|e| e * e).sum::<f64>() / n as f64;
        (v - d0).max(sigma2_floor)
    });
    (sigma2, d0)
}

struct Pass {
    beta: DVector<f64>,
    cov: DMatrix<f64>,
    sigma2: Vec<DVector<f64>>,
    d: Vec<f64>,
}

/// Variance components as one vector: σ² per group, then D per group.
fn pack(sigma2: &[DVector<f64>], d: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = sigma2.iter().flat_map(|s| s.iter().copied()).collect();
    v.extend_from_slice(d);
    v
}

fn unpack(v: &[f64], t: usize) -> (Vec<DVector<f64>>, Vec<f64>) {
    let groups = v.len() / (t + 1);
    let sigma2 = (0..groups).map(|g| DVector::from_column_slice(&v[g * t..(g + 1) * t])).collect();
    (sigma2, v[groups * t..].to_vec())
}

pub fn ifgls_fit(data: &PanelDataset, design: &DesignSet, cfg: &IfglsConfig) -> Result<IfglsEstimate> {
    if cfg.max_iter < 1 {
        return Err(Error::Config("max_iter must be at least 1".into()));
    }
    if !(cfg.tol > 0.0) || !(cfg.sigma2_floor > 0.0) || !(cfg.d_floor >= 0.0) {
        return Err(Error::Config("tolerance and σ² floor must be positive, D floor non-negative".into()));
    }
    if design.n_periods() != data.n_periods() || design.cohorts() != data.cohorts() {
        return Err(Error::Dimension("design does not match the panel".into()));
    }
    let layout = ParamLayout::for_panel(cfg.variant, data);
    let groups = data.n_groups();
    let t = data.n_periods();

    // Start from an unweighted pass.
    let unit = vec![RandomInterceptPrecision::new(&DVector::from_element(t, 1.0), 0.0)?; groups];
    let (beta0, _) = gls_update(data, design, &layout, &unit)?;
    let (mut sigma2, mut d): (Vec<_>, Vec<_>) = (0..groups)
        .map(|g| moment_start(&residuals(data, design, &layout, &beta0, g), cfg.sigma2_floor, cfg.d_floor))
        .unzip();

    let pass = |sigma2: &[DVector<f64>], d: &[f64]| -> Result<Pass> {
        let lam = (0..groups)
            .map(|g| RandomInterceptPrecision::new(&sigma2[g], d[g]))
            .collect::<Result<Vec<_>>>()?;
        let (beta, cov) = gls_update(data, design, &layout, &lam)?;
        let mut next_s = Vec::with_capacity(groups);
        let mut next_d = Vec::with_capacity(groups);
        for g in 0..groups {
            let r = residuals(data, design, &layout, &beta, g);
            let alpha: Vec<f64> = (0..r.nrows())
                .map(|i| blup_alpha(r.row(i).transpose().as_slice(), &sigma2[g], d[g]))
                .collect();
            let v = match cfg.variance_step {
                VarianceStep::Em => blup_variance(&sigma2[g], d[g]),
                VarianceStep::Plugin => 0.0,
            };
            let (s2, dg) = variance_update(&r, &alpha, v, cfg.sigma2_floor, cfg.d_floor);
            next_s.push(s2);
            next_d.push(dg);
        }
        Ok(Pass {
            beta,
            cov,
            sigma2: next_s,
            d: next_d,
        })
    };

    let mut prev_beta: Option<DVector<f64>> = None;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut last: Option<(DVector<f64>, DMatrix<f64>)> = None;
    // One GLS pass from `theta`; records the change and returns the mapped components.
    let mut advance = |sigma2: &[DVector<f64>], d: &[f64], trace: &mut Vec<f64>| -> Result<(Vec<f64>, bool)> {
        let p = pass(sigma2, d)?;
        let mut change: f64 = match &prev_beta {
            Some(b) => (&p.beta - b).amax(),
            None => f64::INFINITY,
        };
        for g in 0..groups {
            change = change.max((&p.sigma2[g] - &sigma2[g]).amax()).max((p.d[g] - d[g]).abs());
        }
        trace.push(change);
        prev_beta = Some(p.beta.clone());
        last = Some((p.beta, p.cov));
        // the first pass has no previous β̂; only an infinite tolerance stops there
        let done = change < cfg.tol || cfg.tol == f64::INFINITY;
        Ok((pack(&p.sigma2, &p.d), done))
    };

    let mut theta0 = pack(&sigma2, &d);
    while trace.len() < cfg.max_iter {
        let (theta1, done) = advance(&sigma2, &d, &mut trace)?;
        (sigma2, d) = unpack(&theta1, t);
        if done {
            converged = true;
            break;
        }
        if !cfg.accelerate || trace.len() >= cfg.max_iter {
            theta0 = theta1;
            continue;
        }
        let (theta2, done) = advance(&sigma2, &d, &mut trace)?;
        (sigma2, d) = unpack(&theta2, t);
        if done {
            converged = true;
            break;
        }
        // Squared extrapolation: θ₀ − 2αr + α²v with α ≤ −1.
        let r: Vec<f64> = theta1.iter().zip(&theta0).map(|(a, b)| a - b).collect();
        let v: Vec<f64> = (0..r.len()).map(|k| theta2[k] - theta1[k] - r[k]).collect();
        let nr = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nv > 0.0 && nr.is_finite() {
            let alpha = (-nr / nv).min(-1.0);
            let jump: Vec<f64> = (0..r.len())
                .map(|k| theta0[k] - 2.0 * alpha * r[k] + alpha * alpha * v[k])
                .collect();
            if jump.iter().all(|x| x.is_finite()) {
                let (mut s_j, mut d_j) = unpack(&jump, t);
                for g in 0..groups {
                    s_j[g].apply(|x| *x = x.max(cfg.sigma2_floor));
                    d_j[g] = d_j[g].max(cfg.d_floor);
                }
                (sigma2, d) = (s_j, d_j);
            }
        }
        theta0 = pack(&sigma2, &d);
    }
    let (beta, cov) = last.expect("at least one iteration");
    let mut est = IfglsEstimate {
        beta,
        cov,
        sigma2,
        d,
        iterations: trace.len(),
        converged,
        trace,
        layout,
        d_w: data.d_w(),
        att: AttTable::default(),
    };
    est.att = delta_method_att(&est, design)?;
    Ok(est)
}

impl IfglsEstimate {
    /// Unpacks the stacked vector into model parameters.
    pub fn params(&self) -> ModelParams {
        let st = Stack::new(&self.layout, self.d_w);
        let mut th = ModelParams::zeros(&self.layout, self.d_w);
        th.beta1 = self.beta.rows(0, st.t).into_owned();
        for g in 0..st.groups {
            th.gamma[g] = self.beta.rows(st.gamma_start(g), st.d_w).into_owned();
            for (r, &k) in self.layout.free(g).iter().enumerate() {
                th.delta[g][k] = self.beta[st.delta_start[g] + r];
            }
        }
        th.sigma2 = self.sigma2.clone();
        th.d = self.d.clone();
        th
    }
}

/// Point estimates, delta-method SEs and Wald 95% intervals of every table
/// entry. Each entry is linear in β̂, so SE = sqrt(g' V g) exactly.
pub fn delta_method_att(est: &IfglsEstimate, design: &DesignSet) -> Result<AttTable> {
    let st = Stack::new(&est.layout, est.d_w);
    if est.beta.len() != st.dim || est.cov.shape() != (st.dim, st.dim) {
        return Err(Error::Dimension("stacked estimate does not match its layout".into()));
    }
    let keys = effect_keys(design);
    // selector matrix: column j is the effect of a unit step in stacked coordinate j
    let mut sel = DMatrix::zeros(keys.len(), st.dim);
    let zero = vec![DVector::zeros(st.t); st.groups];
    for g in 1..st.groups {
        for (r, &k) in est.layout.free(g).iter().enumerate() {
            let mut dl = zero.clone();
            dl[g][k] = 1.0;
            let col = effect_values(&dl, design);
            sel.set_column(st.delta_start[g] + r, &DVector::from_vec(col));
        }
    }
    let point = &sel * &est.beta;
    let var = (&sel * &est.cov * sel.transpose()).diagonal();
    let rows = keys
        .iter()
        .enumerate()
        .map(|(j, &(cohort, period, kind))| {
            let se = var[j].max(0.0).sqrt();
            AttRow {
                cohort,
                period,
                kind,
                estimate: point[j],
                spread: se,
                lo95: point[j] - Z95 * se,
                hi95: point[j] + Z95 * se,
            }
        })
        .collect();
    Ok(AttTable { rows })
}
