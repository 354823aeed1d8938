//! Balanced panels with absorbing staggered treatment.
//!
//! Units carry a cohort label: `1` for never treated, otherwise the period
//! index (1-based, after mapping calendar periods by rank) in which the unit
//! is first treated.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

pub const NEVER_TREATED: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    y: DMatrix<f64>,
    w: DMatrix<f64>,
    cohort: Vec<usize>,
    cohorts: Vec<usize>,
    unit_ids: Vec<String>,
    period_labels: Vec<i64>,
    covariate_names: Vec<String>,
    groups: Vec<Vec<usize>>,
}

impl PanelDataset {
    /// Builds a panel from arrays. `cohorts` lists the treated cohorts
    /// (sorted, within `2..=T`); every label in `cohort` must be `1` or one
    /// of them. Identification rules are checked by [`validate`], not here.
    pub fn new(
        y: DMatrix<f64>,
        w: DMatrix<f64>,
        cohort: Vec<usize>,
        cohorts: Vec<usize>,
    ) -> Result<Self> {
        let n = y.nrows();
        let t = y.ncols();
        if t < 2 {
            return Err(Error::Dimension(format!("need at least 2 periods, got {t}")));
        }
        if w.nrows() != n || cohort.len() != n {
            return Err(Error::Dimension(format!(
                "outcomes have {n} units but covariates have {} and labels {}",
                w.nrows(),
                cohort.len()
            )));
        }
        if cohorts.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Malformed("treated cohorts must be sorted and distinct".into()));
        }
        if let Some(&s) = cohorts.iter().find(|&&s| s < 2 || s > t) {
            return Err(Error::Identification(format!(
                "cohort {s} outside 2..={t}: units must be untreated in period 1"
            )));
        }
        if let Some(i) = cohort
            .iter()
            .position(|&s| s != NEVER_TREATED && !cohorts.contains(&s))
        {
            return Err(Error::Malformed(format!(
                "unit {i} has undeclared cohort label {}",
                cohort[i]
            )));
        }
        if y.iter().chain(w.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("outcomes and covariates must be finite".into()));
        }
        let d_w = w.ncols();
        let mut d = PanelDataset {
            y,
            w,
            cohort,
            cohorts,
            unit_ids: (0..n).map(|i| i.to_string()).collect(),
            period_labels: (1..=t as i64).collect(),
            covariate_names: (0..d_w).map(|k| format!("w{}", k + 1)).collect(),
            groups: Vec::new(),
        };
        d.rebuild_groups();
        Ok(d)
    }

    pub fn with_labels(
        mut self,
        unit_ids: Vec<String>,
        period_labels: Vec<i64>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        if unit_ids.len() != self.n()
            || period_labels.len() != self.n_periods()
            || covariate_names.len() != self.d_w()
        {
            return Err(Error::Dimension("label lengths do not match the panel".into()));
        }
        self.unit_ids = unit_ids;
        self.period_labels = period_labels;
        self.covariate_names = covariate_names;
        Ok(self)
    }

    fn rebuild_groups(&mut self) {
        let mut groups = vec![Vec::new(); self.cohorts.len() + 1];
        for (i, &s) in self.cohort.iter().enumerate() {
            groups[self.group_index(s).expect("label checked at construction")].push(i);
        }
        self.groups = groups;
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_periods(&self) -> usize {
        self.y.ncols()
    }

    pub fn d_w(&self) -> usize {
        self.w.ncols()
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn cohort_of(&self, i: usize) -> usize {
        self.cohort[i]
    }

    pub fn cohort_labels(&self) -> &[usize] {
        &self.cohort
    }

    /// Treated cohorts 𝒮, sorted.
    pub fn cohorts(&self) -> &[usize] {
        &self.cohorts
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn period_labels(&self) -> &[i64] {
        &self.period_labels
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Number of groups `{1} ∪ 𝒮`. Group 0 is the never-treated group,
    /// group `g ≥ 1` is cohort `cohorts()[g - 1]`.
    pub fn n_groups(&self) -> usize {
        self.cohorts.len() + 1
    }

    pub fn group_label(&self, g: usize) -> usize {
        if g == 0 {
            NEVER_TREATED
        } else {
            self.cohorts[g - 1]
        }
    }

    pub fn group_index(&self, label: usize) -> Option<usize> {
        if label == NEVER_TREATED {
            Some(0)
        } else {
            self.cohorts.iter().position(|&s| s == label).map(|p| p + 1)
        }
    }

    pub fn group_units(&self, g: usize) -> &[usize] {
        &self.groups[g]
    }

    pub fn group_of_unit(&self, i: usize) -> usize {
        self.group_index(self.cohort[i]).expect("label checked at construction")
    }

    pub fn group_size(&self, g: usize) -> usize {
        self.groups[g].len()
    }

    /// Treatment indicator X_it = 1{t ≥ S_i} for treated units.
    pub fn treatment_path(&self, i: usize) -> Vec<u8> {
        let s = self.cohort[i];
        (1..=self.n_periods())
            .map(|t| u8::from(s != NEVER_TREATED && t >= s))
            .collect()
    }

    /// Sub-panel with the given units (kept in the given order). The cohort
    /// set is preserved even if some cohorts end up empty.
    pub fn subset(&self, units: &[usize]) -> PanelDataset {
        let y = DMatrix::from_fn(units.len(), self.n_periods(), |r, c| self.y[(units[r], c)]);
        let w = DMatrix::from_fn(units.len(), self.d_w(), |r, c| self.w[(units[r], c)]);
        let mut d = PanelDataset {
            y,
            w,
            cohort: units.iter().map(|&i| self.cohort[i]).collect(),
            cohorts: self.cohorts.clone(),
            unit_ids: units.iter().map(|&i| self.unit_ids[i].clone()).collect(),
            period_labels: self.period_labels.clone(),
            covariate_names: self.covariate_names.clone(),
            groups: Vec::new(),
        };
        d.rebuild_groups();
        d
    }

    /// Same units with outcomes replaced; used by simulation code.
    pub fn with_outcomes(&self, y: DMatrix<f64>) -> Result<PanelDataset> {
        if y.shape() != self.y.shape() {
            return Err(Error::Dimension("replacement outcomes have the wrong shape".into()));
        }
        let mut d = self.clone();
        d.y = y;
        Ok(d)
    }
}

/// Column names of the long CSV format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelSchema {
    pub unit: String,
    pub period: String,
    pub outcome: String,
    pub first_treat: String,
    /// Explicit covariate columns; when `None` every column starting with
    /// `covariate_prefix` is used.
    pub covariates: Option<Vec<String>>,
    pub covariate_prefix: String,
    /// Optional per-row 0/1 treatment column, checked for consistency.
    pub treated: Option<String>,
}

impl Default for PanelSchema {
    fn default() -> Self {
        PanelSchema {
            unit: "unit".into(),
            period: "period".into(),
            outcome: "outcome".into(),
            first_treat: "first_treat".into(),
            covariates: None,
            covariate_prefix: "cov_".into(),
            treated: None,
        }
    }
}

struct Row {
    period: i64,
    outcome: Option<f64>,
    first_treat: i64,
    covs: Vec<f64>,
    treated: Option<u8>,
}

fn parse_f64(field: &str, what: &str, line: usize) -> Result<Option<f64>> {
    let s = field.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Malformed(format!("line {line}: cannot parse {what} `{s}`")))
}

fn parse_i64(field: &str, what: &str, line: usize) -> Result<i64> {
    let s = field.trim();
    s.parse::<i64>()
        .or_else(|_| s.parse::<f64>().map(|v| v as i64).map_err(|_| ()))
        .map_err(|_| Error::Malformed(format!("line {line}: cannot parse {what} `{s}`")))
}

/// Reads a long-format CSV panel.
pub fn load_panel(path: &Path, schema: &PanelSchema) -> Result<PanelDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_panel(file, schema)
}

pub fn read_panel<R: std::io::Read>(reader: R, schema: &PanelSchema) -> Result<PanelDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Malformed(format!("missing column `{name}`")))
    };
    let unit_c = col(&schema.unit)?;
    let period_c = col(&schema.period)?;
    let outcome_c = col(&schema.outcome)?;
    let first_c = col(&schema.first_treat)?;
    let treated_c = schema.treated.as_deref().map(col).transpose()?;
    let cov_names: Vec<String> = match &schema.covariates {
        Some(list) => list.clone(),
        None => headers
            .iter()
            .filter(|h| h.starts_with(&schema.covariate_prefix))
            .map(str::to_string)
            .collect(),
    };
    let cov_c = cov_names.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;

    let mut rows: HashMap<String, Vec<Row>> = HashMap::new();
    let mut unit_order: Vec<String> = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let unit = field(unit_c).to_string();
        let covs = cov_c
            .iter()
            .zip(&cov_names)
            .map(|(&c, name)| {
                parse_f64(field(c), name, line)?.ok_or_else(|| {
                    Error::UnbalancedPanel(format!("line {line}: missing covariate `{name}`"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let treated = match treated_c {
            Some(c) => Some(parse_i64(field(c), "treated", line)? as u8),
            None => None,
        };
        let row = Row {
            period: parse_i64(field(period_c), "period", line)?,
            outcome: parse_f64(field(outcome_c), "outcome", line)?,
            first_treat: parse_i64(field(first_c), "first_treat", line)?,
            covs,
            treated,
        };
        if !rows.contains_key(&unit) {
            unit_order.push(unit.clone());
        }
        rows.entry(unit).or_default().push(row);
    }
    if rows.is_empty() {
        return Err(Error::Malformed("panel has no rows".into()));
    }

    let periods: BTreeSet<i64> = rows.values().flatten().map(|r| r.period).collect();
    let period_labels: Vec<i64> = periods.into_iter().collect();
    let t = period_labels.len();
    if t < 2 {
        return Err(Error::Dimension("panel needs at least 2 periods".into()));
    }
    let rank: HashMap<i64, usize> = period_labels
        .iter()
        .enumerate()
        .map(|(k, &p)| (p, k + 1))
        .collect();

    struct Unit {
        id: String,
        cohort: usize,
        y: Vec<f64>,
        w: Vec<f64>,
    }
    let mut units = Vec::with_capacity(unit_order.len());
    for id in unit_order {
        let mut urows = rows.remove(&id).expect("unit recorded");
        urows.sort_by_key(|r| r.period);
        if urows.len() != t || urows.windows(2).any(|p| p[0].period == p[1].period) {
            return Err(Error::UnbalancedPanel(format!(
                "unit `{id}` has {} rows for {t} periods",
                urows.len()
            )));
        }
        let y = urows
            .iter()
            .map(|r| {
                r.outcome.ok_or_else(|| {
                    Error::UnbalancedPanel(format!("unit `{id}` period {}: missing outcome", r.period))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let first = urows[0].first_treat;
        if urows.iter().any(|r| r.first_treat != first) {
            return Err(Error::AbsorbingViolation(format!(
                "unit `{id}` has more than one first-treatment period"
            )));
        }
        let cohort = if first == 0 {
            NEVER_TREATED
        } else {
            let s = *rank.get(&first).ok_or_else(|| {
                Error::Malformed(format!(
                    "unit `{id}`: first_treat {first} is not an observed period"
                ))
            })?;
            if s == 1 {
                return Err(Error::Identification(format!(
                    "unit `{id}` is treated in the first period"
                )));
            }
            s
        };
        if urows.iter().any(|r| r.treated.is_some()) {
            let path: Vec<u8> = urows.iter().map(|r| r.treated.unwrap_or(0)).collect();
            if path.windows(2).any(|p| p[0] > p[1]) {
                return Err(Error::AbsorbingViolation(format!(
                    "unit `{id}` is treated and later untreated"
                )));
            }
            let expected = (1..=t).map(|k| u8::from(cohort != NEVER_TREATED && k >= cohort));
            if !path.iter().copied().eq(expected) {
                return Err(Error::AbsorbingViolation(format!(
                    "unit `{id}`: treatment column disagrees with first_treat"
                )));
            }
        }
        let w = urows[0].covs.clone();
        if urows.iter().any(|r| r.covs != w) {
            return Err(Error::Malformed(format!(
                "unit `{id}`: covariates must be time-invariant"
            )));
        }
        units.push(Unit { id, cohort, y, w });
    }

    let numeric_ids = units.iter().all(|u| u.id.parse::<i64>().is_ok());
    units.sort_by(|a, b| {
        a.cohort.cmp(&b.cohort).then_with(|| {
            if numeric_ids {
                a.id.parse::<i64>().unwrap().cmp(&b.id.parse::<i64>().unwrap())
            } else {
                a.id.cmp(&b.id)
            }
        })
    });

    let n = units.len();
    let d_w = cov_names.len();
    let y = DMatrix::from_fn(n, t, |i, k| units[i].y[k]);
    let w = DMatrix::from_fn(n, d_w, |i, k| units[i].w[k]);
    let cohort: Vec<usize> = units.iter().map(|u| u.cohort).collect();
    let cohorts: Vec<usize> = cohort
        .iter()
        .copied()
        .filter(|&s| s != NEVER_TREATED)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if !cohort.contains(&NEVER_TREATED) {
        return Err(Error::Identification("no never-treated units".into()));
    }
    let d = PanelDataset::new(y, w, cohort, cohorts)?.with_labels(
        units.into_iter().map(|u| u.id).collect(),
        period_labels,
        cov_names
            .iter()
            .map(|c| c.strip_prefix(&schema.covariate_prefix).unwrap_or(c).to_string())
            .collect(),
    )?;
    if let Some(k) = constant_covariate(&d) {
        return Err(Error::Identification(format!(
            "covariate `{}` is constant; covariates must exclude a constant column",
            d.covariate_names[k]
        )));
    }
    Ok(d)
}

/// Writes the panel in the long format read by [`load_panel`].
pub fn write_panel(d: &PanelDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_panel_to(d, file)
}

pub fn write_panel_to<W: std::io::Write>(d: &PanelDataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec![
        "unit".to_string(),
        "period".into(),
        "outcome".into(),
        "first_treat".into(),
    ];
    header.extend(d.covariate_names.iter().map(|c| {
        if c.starts_with("cov_") {
            c.clone()
        } else {
            format!("cov_{c}")
        }
    }));
    wtr.write_record(&header)?;
    for i in 0..d.n() {
        let s = d.cohort[i];
        let first = if s == NEVER_TREATED {
            0
        } else {
            d.period_labels[s - 1]
        };
        for k in 0..d.n_periods() {
            let mut rec = vec![
                d.unit_ids[i].clone(),
                d.period_labels[k].to_string(),
                format!("{}", d.y[(i, k)]),
                first.to_string(),
            ];
            rec.extend((0..d.d_w()).map(|c| format!("{}", d.w[(i, c)])));
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush().map_err(|e| Error::io("<panel output>", e))?;
    Ok(())
}

fn constant_covariate(d: &PanelDataset) -> Option<usize> {
    if d.n() < 2 {
        return None;
    }
    (0..d.d_w()).find(|&k| {
        let c = d.w.column(k);
        c.iter().all(|&v| v == c[0])
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Issue {
    pub severity: Severity,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub issues: Vec<Issue>,
    /// Cohort label → n_s, including the never-treated label 1.
    pub cohort_sizes: BTreeMap<usize, usize>,
}

impl ValidationReport {
    pub fn warnings(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.severity == Severity::Warning)
    }

    pub fn errors(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.severity == Severity::Error)
    }
}

pub const DEFAULT_MIN_COHORT: usize = 5;

/// Checks identification rules and flags small cohorts (`n_s ≤ min_cohort`).
pub fn validate(d: &PanelDataset, min_cohort: usize) -> ValidationReport {
    let mut issues = Vec::new();
    let mut push = |severity, code: &str, message: String| {
        issues.push(Issue {
            severity,
            code: code.to_string(),
            message,
        })
    };
    let cohort_sizes: BTreeMap<usize, usize> = (0..d.n_groups())
        .map(|g| (d.group_label(g), d.group_size(g)))
        .collect();
    if d.group_size(0) == 0 {
        push(
            Severity::Error,
            "no-never-treated",
            "at least one never-treated unit is required".into(),
        );
    }
    for (&s, &n_s) in &cohort_sizes {
        if s != NEVER_TREATED && n_s == 0 {
            push(Severity::Error, "empty-cohort", format!("cohort {s} has no units"));
        } else if n_s <= min_cohort && n_s > 0 {
            push(
                Severity::Warning,
                "small-cohort",
                format!("cohort {s} has {n_s} units (≤ {min_cohort})"),
            );
        }
    }
    if let Some(k) = constant_covariate(d) {
        push(
            Severity::Error,
            "constant-covariate",
            format!("covariate `{}` is constant", d.covariate_names[k]),
        );
    }
    let ok = !issues.iter().any(|i| i.severity == Severity::Error);
    ValidationReport {
        ok,
        issues,
        cohort_sizes,
    }
}

/// Number of training units drawn from a group of size `n_s`.
pub fn training_count(n_s: usize, fraction: f64) -> usize {
    // 1e-9 guards against 0.15 * 20 = 3.0000000000000004 rounding up.
    let k = (fraction * n_s as f64 - 1e-9).ceil().max(1.0) as usize;
    k.min(n_s - 1)
}

/// Stratified random split: within every group ⌈fraction·n_s⌉ units
/// (at least one, at most n_s − 1) go to the training panel.
pub fn split_training(
    d: &PanelDataset,
    fraction: f64,
    seed: u64,
) -> Result<(PanelDataset, PanelDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Split(format!("fraction {fraction} not in (0, 1)")));
    }
    let mut rng = stream(seed, Stream::Split);
    let mut train = Vec::new();
    let mut estimate = Vec::new();
    for g in 0..d.n_groups() {
        let units = d.group_units(g);
        if units.len() < 2 {
            return Err(Error::Split(format!(
                "cohort {} has {} unit(s); at least 2 are needed",
                d.group_label(g),
                units.len()
            )));
        }
        let mut shuffled = units.to_vec();
        shuffled.shuffle(&mut rng);
        let k = training_count(units.len(), fraction);
        let (a, b) = shuffled.split_at(k);
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_unstable();
        b.sort_unstable();
        train.extend(a);
        estimate.extend(b);
    }
    Ok((d.subset(&train), d.subset(&estimate)))
}
