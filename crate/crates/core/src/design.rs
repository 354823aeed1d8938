//! Cumulative-increment design matrices and the free-parameter layout.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::PanelDataset;

/// Which increment differences δ_st are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// δ_st free for t = 2..T (pre-treatment trends unrestricted).
    Full,
    /// Parallel trends imposed before treatment: δ_st free for t = s..T.
    PrePt,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::PrePt => "pre_pt",
        }
    }
}

/// (L_T)_{tk} = 1{k ≤ t}.
pub fn lower_triangular_ones(t: usize) -> Result<DMatrix<f64>> {
    if t < 2 {
        return Err(Error::Dimension(format!("T must be at least 2, got {t}")));
    }
    Ok(DMatrix::from_fn(t, t, |r, c| if c <= r { 1.0 } else { 0.0 }))
}

/// `L_pre` keeps columns 1..s−1 of L_T, `L_post` keeps columns s..T.
pub fn pre_post_matrices(t: usize, s: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let lt = lower_triangular_ones(t)?;
    if s < 2 || s > t {
        return Err(Error::Dimension(format!("cohort {s} outside 2..={t}")));
    }
    let mut pre = lt.clone();
    let mut post = lt;
    for c in 0..t {
        // column c is period c + 1
        if c + 1 >= s {
            pre.column_mut(c).fill(0.0);
        } else {
            post.column_mut(c).fill(0.0);
        }
    }
    Ok((pre, post))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignSet {
    lt: DMatrix<f64>,
    cohorts: Vec<usize>,
    pre: Vec<DMatrix<f64>>,
    post: Vec<DMatrix<f64>>,
}

impl DesignSet {
    pub fn new(t: usize, cohorts: &[usize]) -> Result<Self> {
        let lt = lower_triangular_ones(t)?;
        let (pre, post) = cohorts
            .iter()
            .map(|&s| pre_post_matrices(t, s))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        Ok(DesignSet {
            lt,
            cohorts: cohorts.to_vec(),
            pre,
            post,
        })
    }

    pub fn for_panel(d: &PanelDataset) -> Result<Self> {
        Self::new(d.n_periods(), d.cohorts())
    }

    pub fn n_periods(&self) -> usize {
        self.lt.nrows()
    }

    pub fn lt(&self) -> &DMatrix<f64> {
        &self.lt
    }

    pub fn cohorts(&self) -> &[usize] {
        &self.cohorts
    }

    fn position(&self, s: usize) -> Result<usize> {
        self.cohorts
            .iter()
            .position(|&c| c == s)
            .ok_or_else(|| Error::Dimension(format!("cohort {s} not in design")))
    }

    pub fn pre(&self, s: usize) -> Result<&DMatrix<f64>> {
        Ok(&self.pre[self.position(s)?])
    }

    pub fn post(&self, s: usize) -> Result<&DMatrix<f64>> {
        Ok(&self.post[self.position(s)?])
    }
}

/// Untreated and treated mean paths of cohort `s` (`s = 1` for never treated):
/// μ⁰ = L_T β₁ + L_pre δ_s and μ¹ = L_T β₁ + L_T δ_s.
pub fn mean_paths(
    beta1: &DVector<f64>,
    delta: &DVector<f64>,
    design: &DesignSet,
    s: usize,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let t = design.n_periods();
    if beta1.len() != t || delta.len() != t {
        return Err(Error::Dimension(format!(
            "β₁ has {} and δ has {} entries, expected {t}",
            beta1.len(),
            delta.len()
        )));
    }
    let base = design.lt() * beta1;
    if s == crate::panel::NEVER_TREATED {
        return Ok((base.clone(), base));
    }
    let mu0 = &base + design.pre(s)? * delta;
    let mu1 = base + design.lt() * delta;
    Ok((mu0, mu1))
}

/// Free δ coordinates (0-based period indices) for each group; group 0
/// (never treated) has none.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub variant: Variant,
    pub n_periods: usize,
    pub cohorts: Vec<usize>,
    pub free_delta_idx: Vec<Vec<usize>>,
}

impl ParamLayout {
    pub fn new(variant: Variant, n_periods: usize, cohorts: &[usize]) -> Self {
        let mut free = vec![Vec::new()];
        for &s in cohorts {
            let first = match variant {
                // δ_{s1} is absorbed by the cohort-specific random-intercept mean.
                Variant::Full => 1,
                Variant::PrePt => s - 1,
            };
            free.push((first..n_periods).collect());
        }
        ParamLayout {
            variant,
            n_periods,
            cohorts: cohorts.to_vec(),
            free_delta_idx: free,
        }
    }

    pub fn for_panel(variant: Variant, d: &PanelDataset) -> Self {
        Self::new(variant, d.n_periods(), d.cohorts())
    }

    pub fn n_groups(&self) -> usize {
        self.free_delta_idx.len()
    }

    pub fn free(&self, g: usize) -> &[usize] {
        &self.free_delta_idx[g]
    }

    pub fn n_free_delta(&self) -> usize {
        self.free_delta_idx.iter().map(Vec::len).sum()
    }

    /// Number of mean parameters (β₁, γ per group, free δ).
    pub fn total_dim(&self, d_w: usize) -> usize {
        self.n_periods + self.n_groups() * d_w + self.n_free_delta()
    }
}
