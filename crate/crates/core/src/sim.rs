//! Data-generating processes and the replication harness.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{DesignSet, ParamLayout, Variant};
use crate::error::{Error, Result};
use crate::gibbs::{run_chain, summarize, GibbsConfig, PosteriorDraws};
use crate::ifgls::{ifgls_fit, IfglsConfig};
use crate::linalg::std_normal;
use crate::mlik::{chib_from_draws, ChibConfig};
use crate::model::{effect_keys, effect_values, AttTable, EffectKind, ModelParams};
use crate::panel::{PanelDataset, NEVER_TREATED};
use crate::priors::{default_prior, student_t_prior};
use crate::rng::{derive_seed, stream, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n: usize,
    pub n_periods: usize,
    pub cohorts: Vec<usize>,
    /// Over (never treated, cohorts...).
    pub cohort_probs: Vec<f64>,
    /// Exact group sizes instead of multinomial allocation.
    #[serde(default)]
    pub fixed_sizes: Option<Vec<usize>>,
    pub covariate_mean: f64,
    pub covariate_sd: f64,
    pub theta: ModelParams,
    pub seed: u64,
}

fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

/// Parameters of the baseline simulation design: T = 5, cohorts {2, 4, 5},
/// one covariate, magnitudes taken from the application's estimates.
/// Cohorts 4 and 5 carry pre-treatment trend differences unless `prept`.
pub fn table1_theta(prept: bool) -> ModelParams {
    let pre = if prept { [0.0; 5] } else { [0.0, -0.05, 0.05, 0.07, -0.03] };
    ModelParams {
        beta1: v(&[2.0, 0.01, -0.02, -0.03, 0.01]),
        delta: vec![
            DVector::zeros(5),
            v(&[0.0, -0.019, -0.052, -0.055, 0.024]),
            v(&[0.0, pre[1], pre[2], -0.006, -0.042]),
            v(&[0.0, pre[3], pre[4], if prept { 0.0 } else { -0.06 }, -0.028]),
        ],
        gamma: vec![v(&[1.0]); 4],
        sigma2: vec![
            v(&[0.020, 0.019, 0.021, 0.020, 0.022]),
            v(&[0.018, 0.020, 0.019, 0.021, 0.020]),
            v(&[0.021, 0.020, 0.022, 0.019, 0.020]),
            v(&[0.019, 0.021, 0.020, 0.022, 0.021]),
        ],
        d: vec![0.15, 0.12, 0.15, 0.10],
        alpha: None,
        v_delta: None,
    }
}

fn table1_base(n: usize, seed: u64, theta: ModelParams) -> DgpConfig {
    DgpConfig {
        n,
        n_periods: 5,
        cohorts: vec![2, 4, 5],
        cohort_probs: vec![0.4, 0.2, 0.2, 0.2],
        fixed_sizes: None,
        covariate_mean: 3.3,
        covariate_sd: 1.0,
        theta,
        seed,
    }
}

/// Baseline design ("table1_dgp"): pre-treatment parallel trends fail.
pub fn table1_dgp(n: usize, seed: u64) -> DgpConfig {
    table1_base(n, seed, table1_theta(false))
}

/// Same design with pre-treatment parallel trends imposed.
pub fn table1_prept_dgp(n: usize, seed: u64) -> DgpConfig {
    table1_base(n, seed, table1_theta(true))
}

/// Baseline design with exactly `per_group` units in every group.
pub fn small_sample_dgp(per_group: usize, seed: u64) -> DgpConfig {
    let mut c = table1_dgp(4 * per_group, seed);
    c.fixed_sizes = Some(vec![per_group; 4]);
    c
}

/// Baseline parameters with the application's cohort sizes (309/20/40/131).
pub fn application_dgp(seed: u64) -> DgpConfig {
    let mut c = table1_dgp(500, seed);
    c.fixed_sizes = Some(vec![309, 20, 40, 131]);
    c
}

impl DgpConfig {
    pub fn check(&self) -> Result<()> {
        let groups = self.cohorts.len() + 1;
        if self.cohort_probs.len() != groups
            || self.cohort_probs.iter().any(|&p| !(p > 0.0))
            || (self.cohort_probs.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config("cohort probabilities must be positive and sum to 1".into()));
        }
        if let Some(sizes) = &self.fixed_sizes {
            if sizes.len() != groups || sizes.iter().sum::<usize>() != self.n {
                return Err(Error::Config("fixed group sizes must cover every group and sum to n".into()));
            }
        }
        if !(self.covariate_sd >= 0.0) || !self.covariate_mean.is_finite() {
            return Err(Error::Config("covariate law needs a finite mean and non-negative SD".into()));
        }
        let th = &self.theta;
        let t = self.n_periods;
        let shapes_ok = th.beta1.len() == t
            && th.delta.len() == groups
            && th.delta.iter().all(|d| d.len() == t && d[0] == 0.0)
            && th.delta[0].iter().all(|&x| x == 0.0)
            && th.gamma.len() == groups
            && th.gamma.iter().all(|g| g.len() == th.gamma[0].len())
            && th.sigma2.len() == groups
            && th.sigma2.iter().all(|s| s.len() == t)
            && th.d.len() == groups;
        if !shapes_ok {
            return Err(Error::Dimension("true parameters do not match (T, cohorts)".into()));
        }
        let variances_ok = th
            .sigma2
            .iter()
            .flat_map(|s| s.iter())
            .chain(th.d.iter())
            .all(|&x| x >= 0.0 && x.is_finite());
        if !variances_ok {
            return Err(Error::Domain("true variances must be finite and non-negative".into()));
        }
        DesignSet::new(t, &self.cohorts)?;
        Ok(())
    }

    /// True ATT(s, t) for t ≥ s, in table order.
    pub fn true_att(&self) -> Result<Vec<f64>> {
        let design = DesignSet::new(self.n_periods, &self.cohorts)?;
        Ok(att_only(&design, &effect_values(&self.theta.delta, &design)))
    }
}

fn att_only(design: &DesignSet, values: &[f64]) -> Vec<f64> {
    effect_keys(design)
        .iter()
        .zip(values)
        .filter(|((_, _, k), _)| *k == EffectKind::Att)
        .map(|(_, &x)| x)
        .collect()
}

/// Draws one panel: cohort labels, w ~ N(mean, SD²), α ~ N(w'γ_s, D_s),
/// y_i = 𝟙α_i + L_T β₁ + L_T δ_s + ε with ε_t ~ N(0, σ²_st).
pub fn generate_dataset(cfg: &DgpConfig) -> Result<PanelDataset> {
    cfg.check()?;
    let mut rng = stream(cfg.seed, Stream::Data);
    let t = cfg.n_periods;
    let groups = cfg.cohorts.len() + 1;
    let d_w = cfg.theta.gamma[0].len();
    let labels_of = |g: usize| if g == 0 { NEVER_TREATED } else { cfg.cohorts[g - 1] };
    let group_of: Vec<usize> = match &cfg.fixed_sizes {
        Some(sizes) => sizes.iter().enumerate().flat_map(|(g, &m)| std::iter::repeat_n(g, m)).collect(),
        None => (0..cfg.n)
            .map(|_| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (g, &p) in cfg.cohort_probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return g;
                    }
                }
                groups - 1
            })
            .collect(),
    };
    let design = DesignSet::new(t, &cfg.cohorts)?;
    let paths: Vec<DVector<f64>> = (0..groups)
        .map(|g| design.lt() * (&cfg.theta.beta1 + &cfg.theta.delta[g]))
        .collect();
    let mut y = DMatrix::zeros(cfg.n, t);
    let mut w = DMatrix::zeros(cfg.n, d_w);
    for (i, &g) in group_of.iter().enumerate() {
        let mut wg = 0.0;
        for k in 0..d_w {
            w[(i, k)] = cfg.covariate_mean + cfg.covariate_sd * std_normal(&mut rng);
            wg += w[(i, k)] * cfg.theta.gamma[g][k];
        }
        let alpha = wg + cfg.theta.d[g].sqrt() * std_normal(&mut rng);
        for k in 0..t {
            y[(i, k)] = alpha + paths[g][k] + cfg.theta.sigma2[g][k].sqrt() * std_normal(&mut rng);
        }
    }
    let labels = group_of.iter().map(|&g| labels_of(g)).collect();
    let ids = (0..cfg.n).map(|i| format!("u{:04}", i + 1)).collect();
    PanelDataset::new(y, w, labels, cfg.cohorts.clone())?.with_labels(
        ids,
        (1..=t as i64).collect(),
        (1..=d_w).map(|k| format!("w{k}")).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Bayes,
    BayesPrePt,
    /// Full or pre_pt, whichever has the larger marginal likelihood.
    BayesMl,
    BayesT { rho: f64, xi: f64 },
    Ifgls,
}

impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Bayes => "Bayes",
            Estimator::BayesPrePt => "Bayes-PrePT",
            Estimator::BayesMl => "Bayes-ML",
            Estimator::BayesT { .. } => "Bayes-t",
            Estimator::Ifgls => "IFGLS",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dgp: DgpConfig,
    pub estimators: Vec<Estimator>,
    pub replications: usize,
    /// Replication r uses dataset seed `base_seed + r`.
    pub base_seed: u64,
    /// Chain lengths; seed and variant are set per replication.
    pub gibbs: GibbsConfig,
    pub ifgls: IfglsConfig,
    /// Worker threads; 0 lets the runtime decide.
    pub jobs: usize,
}

/// Point estimate and 95% interval of one effect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub cohort: usize,
    pub period: usize,
    pub truth: f64,
    pub bias: f64,
    pub mae: f64,
    pub rmse: f64,
    pub coverage: f64,
    pub interval_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorMetrics {
    pub estimator: String,
    pub rows: Vec<Metric>,
    pub successes: usize,
    pub failures: usize,
    pub failure_messages: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub replications: usize,
    pub metrics: Vec<EstimatorMetrics>,
    /// Wins per variant when the marginal-likelihood selector ran.
    pub ml_selection: Option<BTreeMap<String, usize>>,
    /// Wall-clock seconds; not serialized so reruns produce identical files.
    #[serde(skip)]
    pub runtime_secs: f64,
}

struct RepOutcome {
    per_estimator: Vec<std::result::Result<Vec<Interval>, String>>,
    selected: Option<Variant>,
}

fn intervals(table: &AttTable) -> Vec<Interval> {
    table
        .att_rows()
        .map(|r| Interval {
            estimate: r.estimate,
            lo: r.lo95,
            hi: r.hi95,
        })
        .collect()
}

fn run_one(cfg: &SimConfig, r: usize) -> Result<RepOutcome> {
    let data_seed = cfg.base_seed.wrapping_add(r as u64);
    let dgp = DgpConfig {
        seed: data_seed,
        ..cfg.dgp.clone()
    };
    let data = generate_dataset(&dgp)?;
    let design = DesignSet::for_panel(&data)?;
    let prior = default_prior(data.n_periods(), data.d_w(), data.cohorts());
    let chain = |variant: Variant, k: u64| GibbsConfig {
        seed: derive_seed(data_seed, k),
        variant,
        ..cfg.gibbs.clone()
    };

    let mut full: Option<Result<PosteriorDraws>> = None;
    let mut prept: Option<Result<PosteriorDraws>> = None;
    let mut draws = |variant: Variant| -> std::result::Result<PosteriorDraws, String> {
        let (slot, k) = match variant {
            Variant::Full => (&mut full, 1),
            Variant::PrePt => (&mut prept, 2),
        };
        slot.get_or_insert_with(|| run_chain(&data, &design, &prior, &chain(variant, k)))
            .as_ref()
            .map(|d| d.clone())
            .map_err(|e| e.to_string())
    };

    let mut selected = None;
    let mut per_estimator = Vec::with_capacity(cfg.estimators.len());
    for est in &cfg.estimators {
        let out = match *est {
            Estimator::Bayes => draws(Variant::Full).map(|d| intervals(&summarize(&d, &design))),
            Estimator::BayesPrePt => draws(Variant::PrePt).map(|d| intervals(&summarize(&d, &design))),
            Estimator::BayesMl => (|| {
                let mut best: Option<(f64, Variant, PosteriorDraws)> = None;
                for variant in [Variant::Full, Variant::PrePt] {
                    let d = draws(variant)?;
                    let chib = ChibConfig::new(d.config.clone());
                    let ml = chib_from_draws(&data, &design, &prior, &chib, &d)
                        .map_err(|e| e.to_string())?
                        .log_marglik;
                    if best.as_ref().is_none_or(|b| ml > b.0) {
                        best = Some((ml, variant, d));
                    }
                }
                let (_, variant, d) = best.expect("two candidates");
                selected = Some(variant);
                Ok(intervals(&summarize(&d, &design)))
            })(),
            Estimator::BayesT { rho, xi } => (|| {
                let p = student_t_prior(data.n_periods(), data.d_w(), data.cohorts(), rho, xi)
                    .map_err(|e| e.to_string())?;
                let d = run_chain(&data, &design, &p, &chain(Variant::Full, 3)).map_err(|e| e.to_string())?;
                Ok(intervals(&summarize(&d, &design)))
            })(),
            Estimator::Ifgls => match ifgls_fit(&data, &design, &cfg.ifgls) {
                Ok(fit) if fit.converged => Ok(intervals(&fit.att)),
                Ok(fit) => Err(format!("no convergence after {} iterations", fit.iterations)),
                Err(e) => Err(e.to_string()),
            },
        };
        per_estimator.push(out);
    }
    Ok(RepOutcome {
        per_estimator,
        selected,
    })
}

/// Bias, MAE, RMSE, coverage and mean interval length of each effect over
/// the successful replications (`None` marks a failure).
pub fn aggregate(keys: &[(usize, usize)], truth: &[f64], results: &[Option<Vec<Interval>>]) -> Vec<Metric> {
    let ok: Vec<&Vec<Interval>> = results.iter().flatten().collect();
    let m = ok.len() as f64;
    keys.iter()
        .enumerate()
        .map(|(j, &(cohort, period))| {
            let tau = truth[j];
            let (mut b, mut a, mut sq, mut cov, mut il) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for rep in &ok {
                let x = rep[j];
                let e = x.estimate - tau;
                b += e;
                a += e.abs();
                sq += e * e;
                if x.lo <= tau && tau <= x.hi {
                    cov += 1.0;
                }
                il += x.hi - x.lo;
            }
            Metric {
                cohort,
                period,
                truth: tau,
                bias: b / m,
                mae: a / m,
                rmse: (sq / m).sqrt(),
                coverage: cov / m,
                interval_length: il / m,
            }
        })
        .collect()
}

pub fn run_replications(cfg: &SimConfig) -> Result<SimulationReport> {
    if cfg.replications < 1 {
        return Err(Error::Config("at least one replication is required".into()));
    }
    if cfg.estimators.is_empty() {
        return Err(Error::Config("no estimators selected".into()));
    }
    cfg.dgp.check()?;
    let started = std::time::Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let outcomes: Vec<Result<RepOutcome>> =
        pool.install(|| (0..cfg.replications).into_par_iter().map(|r| run_one(cfg, r)).collect());
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;

    let design = DesignSet::new(cfg.dgp.n_periods, &cfg.dgp.cohorts)?;
    let keys: Vec<(usize, usize)> = effect_keys(&design)
        .into_iter()
        .filter(|k| k.2 == EffectKind::Att)
        .map(|(s, t, _)| (s, t))
        .collect();
    let truth = cfg.dgp.true_att()?;
    let metrics = cfg
        .estimators
        .iter()
        .enumerate()
        .map(|(e, est)| {
            let results: Vec<Option<Vec<Interval>>> =
                outcomes.iter().map(|o| o.per_estimator[e].as_ref().ok().cloned()).collect();
            let failure_messages: Vec<String> = outcomes
                .iter()
                .enumerate()
                .filter_map(|(r, o)| o.per_estimator[e].as_ref().err().map(|m| format!("replication {r}: {m}")))
                .collect();
            EstimatorMetrics {
                estimator: est.name().to_string(),
                rows: aggregate(&keys, &truth, &results),
                successes: results.iter().flatten().count(),
                failures: failure_messages.len(),
                failure_messages,
            }
        })
        .collect();
    let ml_selection = cfg.estimators.contains(&Estimator::BayesMl).then(|| {
        let mut counts = BTreeMap::from([(Variant::Full.name().to_string(), 0), (Variant::PrePt.name().to_string(), 0)]);
        for o in &outcomes {
            if let Some(v) = o.selected {
                *counts.get_mut(v.name()).expect("both keys present") += 1;
            }
        }
        counts
    });
    Ok(SimulationReport {
        replications: cfg.replications,
        metrics,
        ml_selection,
        runtime_secs: started.elapsed().as_secs_f64(),
    })
}

impl SimulationReport {
    pub fn metrics_for(&self, name: &str) -> Option<&EstimatorMetrics> {
        self.metrics.iter().find(|m| m.estimator == name)
    }

    /// One row per ATT(s, t); Bias/RMSE/Cov/IL columns per estimator.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["effect".to_string()];
        for m in &self.metrics {
            for col in ["bias", "rmse", "cov", "il"] {
                header.push(format!("{}_{col}", m.estimator));
            }
        }
        wtr.write_record(&header)?;
        let rows = self.metrics.first().map_or(0, |m| m.rows.len());
        for j in 0..rows {
            let r0 = &self.metrics[0].rows[j];
            let mut rec = vec![format!("ATT({},{})", r0.cohort, r0.period)];
            for m in &self.metrics {
                let r = &m.rows[j];
                rec.extend([r.bias, r.rmse, r.coverage, r.interval_length].iter().map(|v| format!("{v}")));
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(|e| Error::io(Path::new("<simulation csv>"), e))?;
        Ok(())
    }

    /// CSV table plus a JSON sidecar with selection counts and failures.
    pub fn save(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        let f = std::fs::File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
        self.write_csv(f)?;
        let mut sidecar = serde_json::to_value(self)?;
        // the pre-trend test p-value of the frequentist comparison is not computed
        sidecar["pretrend_p_value"] = serde_json::Value::String("NA".into());
        std::fs::write(json_path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(json_path, e))
    }
}

/// Layout of a table1-style dataset.
pub fn table1_layout(variant: Variant) -> ParamLayout {
    ParamLayout::new(variant, 5, &[2, 4, 5])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_three_replications() {
        let keys = [(2, 2)];
        let truth = [1.0];
        let iv = |e: f64, lo: f64, hi: f64| Some(vec![Interval { estimate: e, lo, hi }]);
        let res = vec![iv(1.5, 0.9, 2.0), iv(0.5, 0.6, 0.8), None, iv(1.0, 0.0, 2.0)];
        let m = &aggregate(&keys, &truth, &res)[0];
        assert!((m.bias - 0.0).abs() < 1e-15);
        assert!((m.mae - 1.0 / 3.0).abs() < 1e-15);
        assert!((m.rmse - (0.5f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((m.coverage - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.interval_length - (1.1 + 0.2 + 2.0) / 3.0).abs() < 1e-12);
        assert!(m.rmse >= m.bias.abs());
    }

    #[test]
    fn zero_variance_outcomes_equal_mean_path() {
        let mut cfg = table1_dgp(40, 3);
        cfg.theta.sigma2.iter_mut().for_each(|s| s.fill(0.0));
        cfg.theta.d.iter_mut().for_each(|d| *d = 0.0);
        let data = generate_dataset(&cfg).unwrap();
        let design = DesignSet::for_panel(&data).unwrap();
        for i in 0..data.n() {
            let g = data.group_of_unit(i);
            let path = design.lt() * (&cfg.theta.beta1 + &cfg.theta.delta[g]);
            for k in 0..5 {
                let expect = data.w()[(i, 0)] * cfg.theta.gamma[g][0] + path[k];
                assert!((data.y()[(i, k)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn allocation_and_covariate_law() {
        let data = generate_dataset(&table1_dgp(100_000, 11)).unwrap();
        let shares: Vec<f64> = (0..4).map(|g| data.group_size(g) as f64 / 1e5).collect();
        for (s, p) in shares.iter().zip([0.4, 0.2, 0.2, 0.2]) {
            assert!((s - p).abs() < 3.0 * (p * (1.0 - p) / 1e5).sqrt() + 1e-3, "{shares:?}");
        }
        let w = data.w().column(0);
        let mean = w.mean();
        let sd = w.variance().sqrt();
        assert!((mean - 3.3).abs() < 3.0 / (1e5f64).sqrt());
        assert!((sd - 1.0).abs() < 0.01);
        let small = generate_dataset(&small_sample_dgp(6, 1)).unwrap();
        assert_eq!((0..4).map(|g| small.group_size(g)).collect::<Vec<_>>(), vec![6; 4]);
    }

    #[test]
    fn dataset_is_deterministic_and_truth_has_seven_atts() {
        let a = generate_dataset(&table1_dgp(50, 9)).unwrap();
        let b = generate_dataset(&table1_dgp(50, 9)).unwrap();
        assert_eq!(a, b);
        let truth = table1_dgp(50, 9).true_att().unwrap();
        assert_eq!(truth.len(), 7);
        assert!((truth[0] - -0.019).abs() < 1e-12);
        assert!((truth[2] - (-0.019 - 0.052 - 0.055)).abs() < 1e-12);
        assert!(table1_theta(true).check(&table1_layout(Variant::PrePt), 1).is_ok());
    }

    #[test]
    fn bad_probabilities_rejected() {
        let mut c = table1_dgp(10, 0);
        c.cohort_probs = vec![0.5, 0.5, 0.0, 0.0];
        assert!(generate_dataset(&c).is_err());
    }
}
