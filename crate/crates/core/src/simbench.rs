//! Synthetic scenario generators, selection metrics, and the replicated
//! benchmark harness.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PredictorType};
use crate::error::{BartError, Result};
use crate::math::phi;
use crate::rng::{derive_seed, rng_for};
use crate::sampler::SamplerConfig;
use crate::selection::{
    abc_forest_select, backward_select, dart_select, permutation_select_multi, AbcConfig,
    PermImportance, SelectionReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioId {
    /// Continuous response, independent uniform predictors.
    CC1,
    /// Continuous response, AR(1)-correlated normal predictors.
    CC2,
    /// Continuous response, independent mixed-type predictors.
    CM1,
    /// Continuous response, correlated mixed-type predictors (p fixed at 84).
    CM2,
    /// Binary response versions of the above.
    BC1,
    BC2,
    BM1,
    BM2,
    /// The two worked mixed-type examples (p fixed at 20, binary x1..x10).
    EX1,
    EX2,
}

impl ScenarioId {
    pub fn parse(s: &str) -> Result<ScenarioId> {
        let cleaned: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_uppercase();
        Ok(match cleaned.as_str() {
            "CC1" => ScenarioId::CC1,
            "CC2" => ScenarioId::CC2,
            "CM1" => ScenarioId::CM1,
            "CM2" => ScenarioId::CM2,
            "BC1" => ScenarioId::BC1,
            "BC2" => ScenarioId::BC2,
            "BM1" => ScenarioId::BM1,
            "BM2" => ScenarioId::BM2,
            "EX1" => ScenarioId::EX1,
            "EX2" => ScenarioId::EX2,
            _ => {
                return Err(BartError::InvalidConfig(format!("unknown scenario id {s}")))
            }
        })
    }

    pub fn label(&self) -> &'static str {
        match self {
            ScenarioId::CC1 => "CC1",
            ScenarioId::CC2 => "CC2",
            ScenarioId::CM1 => "CM1",
            ScenarioId::CM2 => "CM2",
            ScenarioId::BC1 => "BC1",
            ScenarioId::BC2 => "BC2",
            ScenarioId::BM1 => "BM1",
            ScenarioId::BM2 => "BM2",
            ScenarioId::EX1 => "EX1",
            ScenarioId::EX2 => "EX2",
        }
    }

    pub fn binary_response(&self) -> bool {
        matches!(
            self,
            ScenarioId::BC1 | ScenarioId::BC2 | ScenarioId::BM1 | ScenarioId::BM2
        )
    }

    /// Fixed dimension, when the scenario pins one.
    pub fn fixed_p(&self) -> Option<usize> {
        match self {
            ScenarioId::CM2 | ScenarioId::BM2 => Some(84),
            ScenarioId::EX1 | ScenarioId::EX2 => Some(20),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: ScenarioId,
    pub n: usize,
    pub p: usize,
    /// Error variance; ignored by binary-response scenarios.
    pub sigma2: f64,
}

impl ScenarioSpec {
    pub fn new(id: ScenarioId, n: usize, p: usize, sigma2: f64) -> Result<ScenarioSpec> {
        if let Some(fixed) = id.fixed_p() {
            if p != fixed {
                return Err(BartError::InvalidConfig(format!(
                    "scenario {} fixes p = {fixed}, got {p}",
                    id.label()
                )));
            }
        }
        let min_p = match id {
            ScenarioId::CC1 | ScenarioId::BC1 => 5,
            ScenarioId::CC2 | ScenarioId::BC2 => 10,
            ScenarioId::CM1 | ScenarioId::BM1 => 6,
            _ => 0,
        };
        if p < min_p {
            return Err(BartError::InvalidConfig(format!(
                "scenario {} needs p >= {min_p}, got {p}",
                id.label()
            )));
        }
        if n < 2 {
            return Err(BartError::InvalidConfig("n must be >= 2".into()));
        }
        if sigma2 < 0.0 {
            return Err(BartError::InvalidConfig("sigma2 must be >= 0".into()));
        }
        Ok(ScenarioSpec { id, n, p, sigma2 })
    }
}

/// Generate one dataset for a scenario; the relevant predictor set rides
/// along as ground truth.
pub fn gen_scenario(spec: &ScenarioSpec, seed: u64) -> Result<Dataset> {
    let mut rng = rng_for(seed, 0);
    let (n, p) = (spec.n, spec.p);
    let half = p.div_ceil(2);
    let (columns, types, f0, relevant): (
        Vec<Vec<f64>>,
        Vec<PredictorType>,
        Box<dyn Fn(&dyn Fn(usize, usize) -> f64, usize) -> f64>,
        Vec<usize>,
    ) = match spec.id {
        ScenarioId::CC1 | ScenarioId::BC1 => {
            let columns = uniform_columns(&mut rng, n, p);
            let f = |x: &dyn Fn(usize, usize) -> f64, i: usize| {
                10.0 * (std::f64::consts::PI * x(0, i) * x(1, i)).sin()
                    + 20.0 * (x(2, i) - 0.5) * (x(2, i) - 0.5)
                    + 10.0 * x(3, i)
                    + 5.0 * x(4, i)
            };
            (
                columns,
                vec![PredictorType::Continuous; p],
                Box::new(f),
                vec![0, 1, 2, 3, 4],
            )
        }
        ScenarioId::CC2 | ScenarioId::BC2 => {
            let columns = ar1_normal_columns(&mut rng, n, p, 0.3);
            let f = |x: &dyn Fn(usize, usize) -> f64, i: usize| {
                2.0 * x(0, i) * x(3, i) + 2.0 * x(6, i) * x(9, i)
            };
            (
                columns,
                vec![PredictorType::Continuous; p],
                Box::new(f),
                vec![0, 3, 6, 9],
            )
        }
        ScenarioId::CM1 | ScenarioId::BM1 => {
            let mut columns = bernoulli_columns(&mut rng, n, half, 0.5);
            columns.extend(uniform_columns(&mut rng, n, p - half));
            let mut types = vec![PredictorType::Binary; half];
            types.extend(vec![PredictorType::Continuous; p - half]);
            let f = move |x: &dyn Fn(usize, usize) -> f64, i: usize| {
                10.0 * (std::f64::consts::PI * x(half, i) * x(half + 1, i)).sin()
                    + 20.0 * (x(half + 2, i) - 0.5) * (x(half + 2, i) - 0.5)
                    + 10.0 * x(0, i)
                    + 5.0 * x(1, i)
            };
            (
                columns,
                types,
                Box::new(f),
                vec![0, 1, half, half + 1, half + 2],
            )
        }
        ScenarioId::CM2 | ScenarioId::BM2 => {
            let mut columns = bernoulli_columns(&mut rng, n, 20, 0.2);
            columns.extend(bernoulli_columns(&mut rng, n, 20, 0.5));
            columns.extend(equicorrelated_normal_columns(&mut rng, n, 44, 0.3));
            let mut types = vec![PredictorType::Binary; 40];
            types.extend(vec![PredictorType::Continuous; 44]);
            let f = |x: &dyn Fn(usize, usize) -> f64, i: usize| {
                -4.0 + x(0, i) + (std::f64::consts::PI * x(0, i) * x(43, i)).sin() - x(20, i)
                    + 0.6 * x(40, i) * x(41, i)
                    - (-2.0 * (x(41, i) + 1.0) * (x(41, i) + 1.0)).exp()
                    - x(42, i) * x(42, i)
                    + 0.5 * x(43, i)
            };
            (
                columns,
                types,
                Box::new(f),
                vec![0, 20, 40, 41, 42, 43],
            )
        }
        ScenarioId::EX1 | ScenarioId::EX2 => {
            let mut columns = bernoulli_columns(&mut rng, n, 10, 0.5);
            columns.extend(uniform_columns(&mut rng, n, 10));
            let mut types = vec![PredictorType::Binary; 10];
            types.extend(vec![PredictorType::Continuous; 10]);
            let f: Box<dyn Fn(&dyn Fn(usize, usize) -> f64, usize) -> f64> =
                if spec.id == ScenarioId::EX1 {
                    Box::new(|x: &dyn Fn(usize, usize) -> f64, i: usize| {
                        10.0 * (std::f64::consts::PI * x(0, i) * x(10, i)).sin()
                            + 20.0 * (x(12, i) - 0.5) * (x(12, i) - 0.5)
                            + 10.0 * x(1, i)
                            + 5.0 * x(11, i)
                    })
                } else {
                    Box::new(|x: &dyn Fn(usize, usize) -> f64, i: usize| {
                        10.0 * (std::f64::consts::PI * x(10, i) * x(11, i)).sin()
                            + 20.0 * (x(12, i) - 0.5) * (x(12, i) - 0.5)
                            + 10.0 * x(0, i)
                            + 5.0 * x(1, i)
                    })
                };
            (columns, types, f, vec![0, 1, 10, 11, 12])
        }
    };

    let getter = |j: usize, i: usize| columns[j][i];
    let signal: Vec<f64> = (0..n).map(|i| f0(&getter, i)).collect();
    let y: Vec<f64> = if spec.id.binary_response() {
        signal
            .iter()
            .map(|&s| {
                if rng.random::<f64>() < phi(s) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    } else {
        let sd = spec.sigma2.sqrt();
        signal
            .iter()
            .map(|&s| {
                let z: f64 = StandardNormal.sample(&mut rng);
                s + sd * z
            })
            .collect()
    };
    let mut data = Dataset::new(columns, y, types)?;
    data.relevant = Some(relevant);
    Ok(data)
}

fn uniform_columns(rng: &mut impl Rng, n: usize, p: usize) -> Vec<Vec<f64>> {
    (0..p)
        .map(|_| (0..n).map(|_| rng.random::<f64>()).collect())
        .collect()
}

fn bernoulli_columns(rng: &mut impl Rng, n: usize, p: usize, prob: f64) -> Vec<Vec<f64>> {
    (0..p)
        .map(|_| {
            (0..n)
                .map(|_| if rng.random::<f64>() < prob { 1.0 } else { 0.0 })
                .collect()
        })
        .collect()
}

/// Standard normals with corr(x_j, x_k) = rho^|j-k|, drawn by the AR(1)
/// recursion row by row.
fn ar1_normal_columns(rng: &mut impl Rng, n: usize, p: usize, rho: f64) -> Vec<Vec<f64>> {
    let innov = (1.0 - rho * rho).sqrt();
    let mut columns = vec![Vec::with_capacity(n); p];
    for _ in 0..n {
        let mut prev: f64 = StandardNormal.sample(rng);
        columns[0].push(prev);
        for col in columns.iter_mut().skip(1) {
            let z: f64 = StandardNormal.sample(rng);
            prev = rho * prev + innov * z;
            col.push(prev);
        }
    }
    columns
}

/// Standard normals with constant pairwise correlation rho, via a shared
/// factor per observation.
fn equicorrelated_normal_columns(
    rng: &mut impl Rng,
    n: usize,
    p: usize,
    rho: f64,
) -> Vec<Vec<f64>> {
    let shared = rho.sqrt();
    let own = (1.0 - rho).sqrt();
    let mut columns = vec![Vec::with_capacity(n); p];
    for _ in 0..n {
        let z0: f64 = StandardNormal.sample(rng);
        for col in columns.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            col.push(shared * z0 + own * z);
        }
    }
    columns
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub missed: bool,
}

/// Precision/recall/F1 of a selected set against the relevant set; empty
/// selections score zero precision and raise the missed flag.
pub fn metrics(selected: &[usize], relevant: &[usize], p: usize) -> Result<Metrics> {
    if selected.iter().chain(relevant).any(|&j| j >= p) {
        return Err(BartError::InvalidData(
            "index outside the predictor range".into(),
        ));
    }
    let sel: std::collections::HashSet<usize> = selected.iter().copied().collect();
    let rel: std::collections::HashSet<usize> = relevant.iter().copied().collect();
    let tp = sel.intersection(&rel).count() as f64;
    let fp = sel.len() as f64 - tp;
    let fn_ = rel.len() as f64 - tp;
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(Metrics {
        precision,
        recall,
        f1,
        missed: fn_ > 0.0,
    })
}

/// A selection method with its full configuration, as used by the harness.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Method {
    Permute {
        kind: PermImportance,
        n_null: usize,
        n_rep: usize,
        alpha: f64,
        sampler: SamplerConfig,
    },
    Backward {
        train_frac: f64,
        sampler: SamplerConfig,
    },
    Dart {
        threshold: f64,
        sampler: SamplerConfig,
    },
    Abc(AbcConfig),
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::Permute { kind, .. } => kind.label().to_string(),
            Method::Backward { .. } => "backward".into(),
            Method::Dart { sampler, .. } => format!("dart-{}", sampler.n_trees),
            Method::Abc(cfg) => format!("abc-{}-{:.2}", cfg.sampler.n_trees, cfg.threshold),
        }
    }

    pub fn run(&self, data: &Dataset, seed: u64) -> Result<SelectionReport> {
        match self {
            Method::Permute {
                kind,
                n_null,
                n_rep,
                alpha,
                sampler,
            } => crate::selection::permutation_select(
                data, *kind, *n_null, *n_rep, *alpha, sampler, seed,
            ),
            Method::Backward {
                train_frac,
                sampler,
            } => backward_select(data, *train_frac, sampler, seed),
            Method::Dart { threshold, sampler } => dart_select(data, *threshold, sampler, seed),
            Method::Abc(cfg) => abc_forest_select(data, cfg, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub r_miss: f64,
    pub recall: f64,
    pub recall_se: f64,
    /// Mean precision over replications with a nonempty selection.
    pub precision: f64,
    pub precision_se: f64,
    pub f1: f64,
    pub f1_se: f64,
    pub n_replications: usize,
    pub n_empty: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationDetail {
    pub replication: usize,
    pub method: String,
    pub selected: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub metrics: Option<Metrics>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub scenario: ScenarioSpec,
    pub n_replications: usize,
    pub seed: u64,
    pub summaries: Vec<MethodSummary>,
    pub details: Vec<ReplicationDetail>,
}

/// Run every method against the same R generated datasets and aggregate
/// metrics with Monte Carlo standard errors. Deterministic given the seed;
/// failures are recorded per cell rather than dropped.
pub fn run_benchmark(
    spec: &ScenarioSpec,
    methods: &[Method],
    reps: usize,
    seed: u64,
) -> Result<BenchResult> {
    if reps == 0 {
        return Err(BartError::InvalidConfig("need at least 1 replication".into()));
    }
    if methods.is_empty() {
        return Err(BartError::InvalidConfig("no methods given".into()));
    }
    let datasets: Vec<Dataset> = (0..reps)
        .map(|r| gen_scenario(spec, derive_seed(seed, 1_000_000 + r as u64)))
        .collect::<Result<_>>()?;

    // Group adjacent permutation methods that share fit settings so the
    // chains are fitted once per replication for the whole group.
    #[derive(Clone)]
    enum Job {
        PermGroup {
            idxs: Vec<usize>,
            kinds: Vec<PermImportance>,
            n_null: usize,
            n_rep: usize,
            alpha: f64,
            sampler: SamplerConfig,
        },
        Single(usize),
    }
    let mut jobs: Vec<Job> = Vec::new();
    for (idx, method) in methods.iter().enumerate() {
        if let Method::Permute {
            kind,
            n_null,
            n_rep,
            alpha,
            sampler,
        } = method
        {
            if let Some(Job::PermGroup {
                idxs,
                kinds,
                n_null: gn,
                n_rep: gr,
                alpha: ga,
                sampler: gs,
            }) = jobs.last_mut()
            {
                if gn == n_null && gr == n_rep && ga == alpha && gs == sampler {
                    idxs.push(idx);
                    kinds.push(*kind);
                    continue;
                }
            }
            jobs.push(Job::PermGroup {
                idxs: vec![idx],
                kinds: vec![*kind],
                n_null: *n_null,
                n_rep: *n_rep,
                alpha: *alpha,
                sampler: sampler.clone(),
            });
        } else {
            jobs.push(Job::Single(idx));
        }
    }

    let cells: Vec<(usize, usize, std::result::Result<SelectionReport, String>)> = (0..reps)
        .flat_map(|r| jobs.iter().enumerate().map(move |(ji, _)| (r, ji)))
        .collect::<Vec<_>>()
        .into_par_iter()
        .flat_map_iter(|(r, ji)| {
            let data = &datasets[r];
            let job = &jobs[ji];
            let run_seed = |idx: usize| derive_seed(seed, 2_000_000 + (r as u64) * 4096 + idx as u64);
            match job {
                Job::Single(idx) => {
                    let out = methods[*idx]
                        .run(data, run_seed(*idx))
                        .map_err(|e| e.to_string());
                    vec![(r, *idx, out)]
                }
                Job::PermGroup {
                    idxs,
                    kinds,
                    n_null,
                    n_rep,
                    alpha,
                    sampler,
                } => {
                    match permutation_select_multi(
                        data,
                        kinds,
                        *n_null,
                        *n_rep,
                        *alpha,
                        sampler,
                        run_seed(idxs[0]),
                    ) {
                        Ok(reports) => idxs
                            .iter()
                            .zip(reports)
                            .map(|(&idx, rep)| (r, idx, Ok(rep)))
                            .collect(),
                        Err(e) => idxs
                            .iter()
                            .map(|&idx| (r, idx, Err(e.to_string())))
                            .collect(),
                    }
                }
            }
        })
        .collect();

    let mut details = Vec::with_capacity(reps * methods.len());
    let mut per_method: Vec<Vec<&SelectionReport>> = vec![Vec::new(); methods.len()];
    let mut ordered: Vec<Vec<Option<&std::result::Result<SelectionReport, String>>>> =
        vec![vec![None; methods.len()]; reps];
    for (r, idx, res) in &cells {
        ordered[*r][*idx] = Some(res);
    }
    for (r, dataset) in datasets.iter().enumerate() {
        let relevant = dataset.relevant.as_deref().unwrap_or(&[]);
        for (idx, method) in methods.iter().enumerate() {
            let res = ordered[r][idx].expect("cell computed");
            match res {
                Ok(report) => {
                    let selected = report.selected_indices();
                    let m = metrics(&selected, relevant, dataset.p())?;
                    details.push(ReplicationDetail {
                        replication: r,
                        method: method.label(),
                        selected,
                        metrics: Some(m),
                        error: None,
                    });
                    per_method[idx].push(report);
                }
                Err(e) => details.push(ReplicationDetail {
                    replication: r,
                    method: method.label(),
                    selected: Vec::new(),
                    metrics: None,
                    error: Some(e.clone()),
                }),
            }
        }
    }

    let mut summaries = Vec::with_capacity(methods.len());
    for (idx, method) in methods.iter().enumerate() {
        let label = method.label();
        let rows: Vec<&ReplicationDetail> = details
            .iter()
            .filter(|d| d.method == label && d.metrics.is_some())
            .collect();
        let n_failed = reps - rows.len();
        let recalls: Vec<f64> = rows.iter().map(|d| d.metrics.unwrap().recall).collect();
        let f1s: Vec<f64> = rows.iter().map(|d| d.metrics.unwrap().f1).collect();
        let misses = rows.iter().filter(|d| d.metrics.unwrap().missed).count();
        let nonempty: Vec<f64> = rows
            .iter()
            .filter(|d| !d.selected.is_empty())
            .map(|d| d.metrics.unwrap().precision)
            .collect();
        let n_empty = rows.iter().filter(|d| d.selected.is_empty()).count();
        let se = |xs: &[f64]| {
            if xs.len() < 2 {
                0.0
            } else {
                crate::math::sample_sd(xs) / (xs.len() as f64).sqrt()
            }
        };
        let mean_of = |xs: &[f64]| {
            if xs.is_empty() {
                0.0
            } else {
                xs.iter().sum::<f64>() / xs.len() as f64
            }
        };
        summaries.push(MethodSummary {
            method: label,
            r_miss: if rows.is_empty() {
                0.0
            } else {
                misses as f64 / rows.len() as f64
            },
            recall: mean_of(&recalls),
            recall_se: se(&recalls),
            precision: mean_of(&nonempty),
            precision_se: se(&nonempty),
            f1: mean_of(&f1s),
            f1_se: se(&f1s),
            n_replications: rows.len(),
            n_empty,
            n_failed,
        });
        let _ = idx;
    }
    Ok(BenchResult {
        scenario: *spec,
        n_replications: reps,
        seed,
        summaries,
        details,
    })
}
