//! Random-intercept likelihood and the map from increment differences to
//! causal effects.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{DesignSet, ParamLayout};
use crate::error::{Error, Result};
use crate::linalg::{quantile_sorted, LN_2PI};
use crate::panel::PanelDataset;

/// Parameters of the random-intercept model. Per-group vectors are indexed
/// by group (0 = never treated, g ≥ 1 = g-th treated cohort); `delta[0]` is
/// identically zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub beta1: DVector<f64>,
    pub delta: Vec<DVector<f64>>,
    pub gamma: Vec<DVector<f64>>,
    pub sigma2: Vec<DVector<f64>>,
    pub d: Vec<f64>,
    /// Latent intercepts α_si in unit order; only in the augmented state.
    pub alpha: Option<DVector<f64>>,
    /// Local prior variances of δ under the Student-t prior.
    pub v_delta: Option<Vec<DVector<f64>>>,
}

impl ModelParams {
    pub fn zeros(layout: &ParamLayout, d_w: usize) -> Self {
        let t = layout.n_periods;
        let g = layout.n_groups();
        ModelParams {
            beta1: DVector::zeros(t),
            delta: vec![DVector::zeros(t); g],
            gamma: vec![DVector::zeros(d_w); g],
            sigma2: vec![DVector::from_element(t, 1.0); g],
            d: vec![1.0; g],
            alpha: None,
            v_delta: None,
        }
    }

    pub fn n_groups(&self) -> usize {
        self.delta.len()
    }

    /// Checks positivity and the zero pattern of δ.
    pub fn check(&self, layout: &ParamLayout, d_w: usize) -> Result<()> {
        let t = layout.n_periods;
        let g = layout.n_groups();
        if self.beta1.len() != t
            || self.delta.len() != g
            || self.gamma.len() != g
            || self.sigma2.len() != g
            || self.d.len() != g
        {
            return Err(Error::Dimension("parameter blocks do not match the layout".into()));
        }
        for k in 0..g {
            if self.delta[k].len() != t || self.sigma2[k].len() != t || self.gamma[k].len() != d_w {
                return Err(Error::Dimension(format!("group {k} block has the wrong length")));
            }
            if self.sigma2[k].iter().any(|&v| !(v > 0.0)) {
                return Err(Error::Domain(format!("σ² of group {k} must be positive")));
            }
            if !(self.d[k] >= 0.0) {
                return Err(Error::Domain(format!("D of group {k} must be non-negative")));
            }
            let free = layout.free(k);
            if (0..t).any(|j| !free.contains(&j) && self.delta[k][j] != 0.0) {
                return Err(Error::Domain(format!("group {k} has a nonzero restricted δ")));
            }
        }
        if let Some(v) = &self.v_delta {
            if v.iter().flat_map(|x| x.iter()).any(|&x| !(x > 0.0)) {
                return Err(Error::Domain("V_δ must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Λ⁻¹ for Λ = diag(σ²) + D·𝟙𝟙ᵀ by Sherman–Morrison, with log|Λ| from the
/// matrix determinant lemma. `D = 0` gives Λ⁻¹ = Σ⁻¹.
pub fn lambda_inverse(sigma2: &DVector<f64>, d: f64) -> Result<(DMatrix<f64>, f64)> {
    let prec = RandomInterceptPrecision::new(sigma2, d)?;
    let t = sigma2.len();
    let mut m = DMatrix::from_diagonal(&prec.inv_sigma2);
    for r in 0..t {
        for c in 0..t {
            m[(r, c)] -= prec.shrink * prec.inv_sigma2[r] * prec.inv_sigma2[c];
        }
    }
    Ok((m, prec.log_det))
}

/// Structured form of Λ⁻¹ used in inner loops.
#[derive(Debug, Clone)]
pub struct RandomInterceptPrecision {
    pub inv_sigma2: DVector<f64>,
    /// 𝟙ᵀΣ⁻¹𝟙
    pub sum_inv: f64,
    /// D / (1 + D·𝟙ᵀΣ⁻¹𝟙)
    pub shrink: f64,
    pub log_det: f64,
}

impl RandomInterceptPrecision {
    pub fn new(sigma2: &DVector<f64>, d: f64) -> Result<Self> {
        if sigma2.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Domain("σ² entries must be positive and finite".into()));
        }
        if !(d >= 0.0) || !d.is_finite() {
            return Err(Error::Domain(format!("D must be non-negative, got {d}")));
        }
        let inv_sigma2 = sigma2.map(|v| 1.0 / v);
        let sum_inv = inv_sigma2.sum();
        let shrink = d / (1.0 + d * sum_inv);
        let log_det = sigma2.iter().map(|v| v.ln()).sum::<f64>() + (d * sum_inv).ln_1p();
        Ok(RandomInterceptPrecision {
            inv_sigma2,
            sum_inv,
            shrink,
            log_det,
        })
    }

    /// rᵀΛ⁻¹r
    pub fn quad_form(&self, r: &[f64]) -> f64 {
        let mut q = 0.0;
        let mut u = 0.0;
        for (k, &x) in r.iter().enumerate() {
            q += x * x * self.inv_sigma2[k];
            u += x * self.inv_sigma2[k];
        }
        q - self.shrink * u * u
    }

    /// Λ⁻¹r
    pub fn apply(&self, r: &DVector<f64>) -> DVector<f64> {
        let u: f64 = r.iter().zip(self.inv_sigma2.iter()).map(|(a, b)| a * b).sum();
        DVector::from_fn(r.len(), |k, _| {
            self.inv_sigma2[k] * r[k] - self.shrink * self.inv_sigma2[k] * u
        })
    }

    /// Aᵀ Λ⁻¹ A for a T×k matrix A.
    pub fn sandwich(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| a[(r, c)] * self.inv_sigma2[r]);
        let v = a.transpose() * &self.inv_sigma2; // Aᵀ Σ⁻¹ 𝟙
        a.transpose() * scaled - (&v * v.transpose()) * self.shrink
    }
}

/// Mean path L_T(β₁ + δ_g) shared by every unit of group g.
pub fn group_mean_path(theta: &ModelParams, design: &DesignSet, g: usize) -> DVector<f64> {
    design.lt() * (&theta.beta1 + &theta.delta[g])
}

/// log p(Y | θ) with the random intercepts integrated out.
pub fn marginal_loglik(theta: &ModelParams, d: &PanelDataset, design: &DesignSet) -> Result<f64> {
    let t = d.n_periods();
    if design.n_periods() != t || theta.beta1.len() != t || theta.n_groups() != d.n_groups() {
        return Err(Error::Dimension("parameters, data and design disagree".into()));
    }
    if theta.gamma.iter().any(|g| g.len() != d.d_w()) {
        return Err(Error::Dimension("γ length differs from the covariate count".into()));
    }
    let mut total = 0.0;
    let mut r = vec![0.0; t];
    for g in 0..d.n_groups() {
        let units = d.group_units(g);
        if units.is_empty() {
            continue;
        }
        let prec = RandomInterceptPrecision::new(&theta.sigma2[g], theta.d[g])?;
        let path = group_mean_path(theta, design, g);
        let norm = -0.5 * (t as f64 * LN_2PI + prec.log_det);
        for &i in units {
            let wg = d.w().row(i).dot(&theta.gamma[g].transpose());
            for k in 0..t {
                r[k] = d.y()[(i, k)] - path[k] - wg;
            }
            total += norm - 0.5 * prec.quad_form(&r);
        }
    }
    if !total.is_finite() {
        return Err(Error::Domain("log-likelihood is not finite".into()));
    }
    Ok(total)
}

/// τ_ATT(s, ·) = L_post[s] δ_s: entry t is Σ_{k=s}^t δ_sk, zero before s.
pub fn att_from_delta(delta: &DVector<f64>, s: usize, design: &DesignSet) -> Result<DVector<f64>> {
    if delta.len() != design.n_periods() {
        return Err(Error::Dimension("δ length differs from T".into()));
    }
    Ok(design.post(s)? * delta)
}

/// PreDiD(s, t) = Σ_{k=2}^t δ_sk for t = 2..s−1 (empty when s = 2).
pub fn predid_from_delta(delta: &DVector<f64>, s: usize) -> Vec<f64> {
    let mut acc = 0.0;
    (2..s)
        .map(|t| {
            acc += delta[t - 1];
            acc
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EffectKind {
    #[serde(rename = "ATT")]
    Att,
    #[serde(rename = "PreDiD")]
    PreDid,
}

impl EffectKind {
    pub fn label(self) -> &'static str {
        match self {
            EffectKind::Att => "ATT",
            EffectKind::PreDid => "PreDiD",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttRow {
    pub cohort: usize,
    pub period: usize,
    pub kind: EffectKind,
    pub estimate: f64,
    /// Posterior SD or standard error.
    pub spread: f64,
    pub lo95: f64,
    pub hi95: f64,
}

/// Rows ordered by (cohort, period): PreDiD for 2 ≤ t < s, ATT for t ≥ s.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AttTable {
    pub rows: Vec<AttRow>,
}

/// (cohort, period, kind) keys in table order.
pub fn effect_keys(design: &DesignSet) -> Vec<(usize, usize, EffectKind)> {
    let mut keys = Vec::new();
    for &s in design.cohorts() {
        for t in 2..=design.n_periods() {
            let kind = if t < s { EffectKind::PreDid } else { EffectKind::Att };
            keys.push((s, t, kind));
        }
    }
    keys
}

/// Value of every table entry for one δ configuration (groups indexed as
/// in [`ModelParams`]).
pub fn effect_values(delta: &[DVector<f64>], design: &DesignSet) -> Vec<f64> {
    let mut out = Vec::new();
    for (k, &s) in design.cohorts().iter().enumerate() {
        let dl = &delta[k + 1];
        out.extend(predid_from_delta(dl, s));
        let mut acc = 0.0;
        for t in s..=design.n_periods() {
            acc += dl[t - 1];
            out.push(acc);
        }
    }
    out
}

pub const CSV_HEADER: [&str; 7] = ["cohort", "period", "kind", "estimate", "spread", "lo95", "hi95"];

impl AttTable {
    /// Posterior summaries: mean, SD and equal-tailed 95% interval from
    /// type-7 empirical quantiles. `samples[j]` holds the draws of row j.
    pub fn from_samples(keys: &[(usize, usize, EffectKind)], samples: &[Vec<f64>]) -> Self {
        let rows = keys
            .iter()
            .zip(samples)
            .map(|(&(cohort, period, kind), xs)| {
                let n = xs.len() as f64;
                let mut sorted = xs.clone();
                sorted.sort_by(f64::total_cmp);
                let constant = !sorted.is_empty() && sorted.first() == sorted.last();
                let mean = if constant { sorted[0] } else { xs.iter().sum::<f64>() / n };
                let var = if xs.len() > 1 && !constant {
                    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
                } else {
                    0.0
                };
                AttRow {
                    cohort,
                    period,
                    kind,
                    estimate: mean,
                    spread: var.sqrt(),
                    lo95: quantile_sorted(&sorted, 0.025),
                    hi95: quantile_sorted(&sorted, 0.975),
                }
            })
            .collect();
        AttTable { rows }
    }

    pub fn get(&self, cohort: usize, period: usize) -> Option<&AttRow> {
        self.rows
            .iter()
            .find(|r| r.cohort == cohort && r.period == period)
    }

    pub fn att_rows(&self) -> impl Iterator<Item = &AttRow> {
        self.rows.iter().filter(|r| r.kind == EffectKind::Att)
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(CSV_HEADER)?;
        for r in &self.rows {
            wtr.write_record([
                r.cohort.to_string(),
                r.period.to_string(),
                r.kind.label().to_string(),
                format!("{}", r.estimate),
                format!("{}", r.spread),
                format!("{}", r.lo95),
                format!("{}", r.hi95),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io("<att table>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(f)
    }

    /// Tidy interval endpoints for plotting, one row per (cohort, period, kind).
    pub fn write_plot_data<W: std::io::Write>(&self, writer: W, estimator: &str) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["estimator", "cohort", "period", "kind", "point", "lo95", "hi95"])?;
        for r in &self.rows {
            wtr.write_record([
                estimator.to_string(),
                r.cohort.to_string(),
                r.period.to_string(),
                r.kind.label().to_string(),
                format!("{}", r.estimate),
                format!("{}", r.lo95),
                format!("{}", r.hi95),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io("<plot data>", e))?;
        Ok(())
    }

    /// Plain-text table for terminals.
    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<14} {:>9} {:>9} {:>9} {:>9}\n",
            "effect", "estimate", "spread", "lo95", "hi95"
        );
        for r in &self.rows {
            let name = format!("{}({},{})", r.kind.label(), r.cohort, r.period);
            s.push_str(&format!(
                "{:<14} {:>9.4} {:>9.4} {:>9.4} {:>9.4}\n",
                name, r.estimate, r.spread, r.lo95, r.hi95
            ));
        }
        s
    }
}
