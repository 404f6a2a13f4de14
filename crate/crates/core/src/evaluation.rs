//! Metrics, cross-validation, baseline comparison, timing and report series.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{kfold_split, sample_scenario_with, scenario_seed, Dataset, GeneratorConfig, Record, Sp1Labels, Sp2Labels};
use crate::model::{check_feasibility, system_cost, Decision, DecisionVector, NodeKind, Scenario, Topology};
use crate::neuralset::{infer, predict_allocations, train, Checkpoint, NeuralError, TrainConfig};
use crate::solver::{baseline_solve, sp3_solve, MethodTag, SearchMode, SolverError, SolverSettings};

/// Acc@k thresholds in percentage points.
pub const ACC_THRESHOLDS_PCT: [f64; 3] = [0.5, 1.0, 2.0];

pub const MODEL_METHOD: &str = "deepsets_s";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to evaluate: {0}")]
    Empty(&'static str),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("at least two repeats are needed for a spread")]
    Repeats,
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub fn median(values: &[f64]) -> Option<f64> {
    quantile(values, 0.5)
}

/// Linear-interpolated quantile; infinities sort last.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi || v[lo] == v[hi] {
        return Some(v[lo]);
    }
    Some(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub count: usize,
    pub mae_pct: f64,
    /// Share of entries within 0.5, 1 and 2 percentage points.
    pub acc_at: [f64; 3],
    /// None when the labels have no variance.
    pub r2: Option<f64>,
}

/// Error metrics over masked-in entries of coefficients stored in [0, 1], in percentage points.
pub fn regression_metrics(pred: &[f64], label: &[f64], mask: &[bool]) -> Result<RegressionMetrics, EvalError> {
    if pred.len() != label.len() {
        return Err(EvalError::Length(pred.len(), label.len()));
    }
    if mask.len() != pred.len() {
        return Err(EvalError::Length(mask.len(), pred.len()));
    }
    let pairs: Vec<(f64, f64)> =
        pred.iter().zip(label).zip(mask).filter(|(_, &m)| m).map(|((&p, &y), _)| (100.0 * p, 100.0 * y)).collect();
    if pairs.is_empty() {
        return Err(EvalError::Empty("no masked-in entries"));
    }
    let n = pairs.len() as f64;
    let err: Vec<f64> = pairs.iter().map(|(p, y)| (p - y).abs()).collect();
    let mut acc_at = [0.0; 3];
    for (acc, k) in acc_at.iter_mut().zip(ACC_THRESHOLDS_PCT) {
        *acc = err.iter().filter(|&&e| e <= k).count() as f64 / n;
    }
    let label_mean = pairs.iter().map(|(_, y)| y).sum::<f64>() / n;
    let ss_tot: f64 = pairs.iter().map(|(_, y)| (y - label_mean).powi(2)).sum();
    let ss_res: f64 = pairs.iter().map(|(p, y)| (p - y).powi(2)).sum();
    let r2 = (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot);
    Ok(RegressionMetrics { count: pairs.len(), mae_pct: err.iter().sum::<f64>() / n, acc_at, r2 })
}

/// Appends the SP1 entries not pinned by the decision mask: each used
/// (device, column) share plus the slack of every used column.
pub fn sp1_entries(pred: &Sp1Labels, label: &Sp1Labels, decision: &DecisionVector, topo: &Topology, out: &mut (Vec<f64>, Vec<f64>)) {
    let mut used = vec![false; topo.num_resource_columns()];
    for (i, d) in decision.0.iter().enumerate() {
        if let Decision::Offload { ap, node, slice } = *d {
            for e in [topo.radio_column(ap, slice), topo.compute_column(node, slice)] {
                used[e] = true;
                out.0.push(pred.users[i][e]);
                out.1.push(label.users[i][e]);
            }
        }
    }
    for (e, _) in used.iter().enumerate().filter(|(_, &u)| u) {
        out.0.push(pred.slack[e]);
        out.1.push(label.slack[e]);
    }
}

/// Appends the SP2 entries not pinned by the mask: occupied slices and slack of every used AP.
pub fn sp2_entries(pred: &Sp2Labels, label: &Sp2Labels, decision: &DecisionVector, topo: &Topology, out: &mut (Vec<f64>, Vec<f64>)) {
    let mut occupied = vec![vec![false; topo.slices]; topo.aps];
    for d in &decision.0 {
        if let Decision::Offload { ap, slice, .. } = *d {
            occupied[ap][slice] = true;
        }
    }
    for (a, row) in occupied.iter().enumerate() {
        if !row.iter().any(|&o| o) {
            continue;
        }
        out.0.push(pred.slack[a]);
        out.1.push(label.slack[a]);
        for (n, _) in row.iter().enumerate().filter(|(_, &o)| o) {
            out.0.push(pred.shares[a][n]);
            out.1.push(label.shares[a][n]);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sp3Metrics {
    pub count: usize,
    pub acc: f64,
    pub acc_bin: f64,
}

/// Exact joint-class and local-vs-offload match rates over real devices.
pub fn sp3_metrics(pred: &[Decision], label: &[Decision]) -> Result<Sp3Metrics, EvalError> {
    if pred.len() != label.len() {
        return Err(EvalError::Length(pred.len(), label.len()));
    }
    if pred.is_empty() {
        return Err(EvalError::Empty("no devices"));
    }
    let n = pred.len() as f64;
    let exact = pred.iter().zip(label).filter(|(p, y)| p == y).count();
    let binary = pred.iter().zip(label).filter(|(p, y)| p.is_local() == y.is_local()).count();
    Ok(Sp3Metrics { count: pred.len(), acc: exact as f64 / n, acc_bin: binary as f64 / n })
}

/// Share of devices where two decision rules disagree.
pub fn disagreement_rate(a: &[Decision], b: &[Decision]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Length(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(EvalError::Empty("no devices"));
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x != y).count() as f64 / a.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRatio {
    pub value: f64,
    pub infeasible: bool,
}

/// Exact cost over method cost; an infeasible method output scores 0 and is flagged.
pub fn cost_ratio(method_cost: Option<f64>, exact_cost: f64) -> CostRatio {
    match method_cost {
        Some(c) if c.is_finite() && c > 0.0 => CostRatio { value: exact_cost / c, infeasible: false },
        Some(c) if c == 0.0 && exact_cost == 0.0 => CostRatio { value: 1.0, infeasible: false },
        _ => CostRatio { value: 0.0, infeasible: true },
    }
}

/// System cost of an output after the full constraint check; None when infeasible.
pub fn checked_cost(scenario: &Scenario, decision: &DecisionVector, policy: &crate::model::AllocationPolicy) -> Result<(Option<f64>, Vec<String>), EvalError> {
    let verdict = check_feasibility(scenario, decision, policy)?;
    let labels: Vec<String> = verdict.labels().into_iter().map(String::from).collect();
    if !verdict.is_feasible() {
        return Ok((None, labels));
    }
    Ok((system_cost(scenario, decision, policy).value(), labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOutcome {
    pub id: usize,
    pub devices: usize,
    pub exact_cost_s: f64,
    pub exact: bool,
    /// Cost per method; None marks an infeasible output.
    pub costs: BTreeMap<String, Option<f64>>,
    pub model_violations: Vec<String>,
    pub model_time_s: f64,
}

impl ScenarioOutcome {
    /// Relative model cost gap; infeasible outputs count as an infinite gap.
    pub fn model_gap(&self) -> f64 {
        match self.costs.get(MODEL_METHOD).copied().flatten() {
            Some(c) => c / self.exact_cost_s - 1.0,
            None => f64::INFINITY,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrSummary {
    pub mean: f64,
    pub median: f64,
    pub infeasible: usize,
    pub count: usize,
}

/// Per-fold metrics of a trained model on its held-out scenarios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fold: Option<usize>,
    pub config_hash: String,
    pub train_size: usize,
    pub test_size: usize,
    pub sp1: RegressionMetrics,
    pub sp2: RegressionMetrics,
    pub sp3: Sp3Metrics,
    pub hierarchical_disagreement: f64,
    pub cost_ratio: BTreeMap<String, CrSummary>,
    pub median_cost_gap: f64,
    pub train_wall_time_s: f64,
    pub best_epoch: usize,
    pub scenarios: Vec<ScenarioOutcome>,
}

/// Scores a checkpoint on labelled scenarios. Allocation metrics condition the
/// heads on the labelled decision; costs use the model's own decision.
pub fn evaluate_records(records: &[&Record], ck: &Checkpoint) -> Result<MetricsReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty("no held-out records"));
    }
    struct Item {
        sp1: (Vec<f64>, Vec<f64>),
        sp2: (Vec<f64>, Vec<f64>),
        pred: Vec<Decision>,
        hier: Vec<Decision>,
        outcome: ScenarioOutcome,
    }
    let items = records
        .par_iter()
        .map(|r| -> Result<Item, EvalError> {
            let topo = r.scenario.topology();
            let (p1, p2) = predict_allocations(&r.features, &r.solve.decision, ck)?;
            let mut sp1 = (Vec::new(), Vec::new());
            sp1_entries(&p1, &r.sp1, &r.solve.decision, &topo, &mut sp1);
            let mut sp2 = (Vec::new(), Vec::new());
            sp2_entries(&p2, &r.sp2, &r.solve.decision, &topo, &mut sp2);
            let inf = infer(&r.scenario, ck)?;
            let (model_cost, violations) = checked_cost(&r.scenario, &inf.decision, &inf.policy)?;
            let mut costs = BTreeMap::new();
            costs.insert(MODEL_METHOD.to_string(), model_cost);
            for m in [MethodTag::Erap, MethodTag::Prap] {
                let b = baseline_solve(&r.scenario, m)?;
                costs.insert(m.as_str().to_string(), checked_cost(&r.scenario, &b.decision, &b.policy)?.0);
            }
            Ok(Item {
                sp1,
                sp2,
                pred: inf.decision.0.clone(),
                hier: inf.hierarchical.0,
                outcome: ScenarioOutcome {
                    id: r.id,
                    devices: r.devices(),
                    exact_cost_s: r.solve.cost_s,
                    exact: r.solve.exact,
                    costs,
                    model_violations: violations,
                    model_time_s: inf.wall_time_s,
                },
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut sp1 = (Vec::new(), Vec::new());
    let mut sp2 = (Vec::new(), Vec::new());
    let (mut pred, mut hier, mut label) = (Vec::new(), Vec::new(), Vec::new());
    for (it, r) in items.iter().zip(records) {
        sp1.0.extend(&it.sp1.0);
        sp1.1.extend(&it.sp1.1);
        sp2.0.extend(&it.sp2.0);
        sp2.1.extend(&it.sp2.1);
        pred.extend(&it.pred);
        hier.extend(&it.hier);
        label.extend(&r.solve.decision.0);
    }
    let all = |v: &(Vec<f64>, Vec<f64>)| vec![true; v.0.len()];
    let scenarios: Vec<ScenarioOutcome> = items.into_iter().map(|i| i.outcome).collect();
    let gaps: Vec<f64> = scenarios.iter().map(ScenarioOutcome::model_gap).collect();
    Ok(MetricsReport {
        fold: None,
        config_hash: String::new(),
        train_size: 0,
        test_size: records.len(),
        sp1: regression_metrics(&sp1.0, &sp1.1, &all(&sp1))?,
        sp2: regression_metrics(&sp2.0, &sp2.1, &all(&sp2))?,
        sp3: sp3_metrics(&pred, &label)?,
        hierarchical_disagreement: disagreement_rate(&pred, &hier)?,
        cost_ratio: summarize_cost_ratios(&scenarios),
        median_cost_gap: median(&gaps).unwrap_or(f64::INFINITY),
        train_wall_time_s: 0.0,
        best_epoch: 0,
        scenarios,
    })
}

pub fn summarize_cost_ratios(scenarios: &[ScenarioOutcome]) -> BTreeMap<String, CrSummary> {
    let mut by_method: BTreeMap<String, Vec<CostRatio>> = BTreeMap::new();
    for s in scenarios {
        for (m, c) in &s.costs {
            by_method.entry(m.clone()).or_default().push(cost_ratio(*c, s.exact_cost_s));
        }
    }
    by_method
        .into_iter()
        .map(|(m, crs)| {
            let values: Vec<f64> = crs.iter().map(|c| c.value).collect();
            let summary = CrSummary {
                mean: mean(&values),
                median: median(&values).unwrap_or(0.0),
                infeasible: crs.iter().filter(|c| c.infeasible).count(),
                count: crs.len(),
            };
            (m, summary)
        })
        .collect()
}

/// Fold-level summary of a cross-validation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub folds: usize,
    pub sp1_acc_at_1_median: f64,
    pub sp2_acc_at_1_median: f64,
    pub sp3_acc_median: f64,
    pub sp3_acc_bin_median: f64,
    /// Median over folds of each method's mean held-out cost ratio.
    pub cost_ratio_fold_median: BTreeMap<String, f64>,
    /// Median relative model cost gap over all held-out scenarios.
    pub median_cost_gap: f64,
    pub total_train_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub config_hash: String,
    pub folds: Vec<MetricsReport>,
    pub summary: CvSummary,
}

/// k-fold cross-validation: train on k−1 folds, score on the held-out one.
pub fn cross_validate(
    dataset: &Dataset,
    k: usize,
    seed: u64,
    train_cfg: &TrainConfig,
    config_hash: &str,
    mut progress: impl FnMut(&MetricsReport),
) -> Result<CvReport, EvalError> {
    let folds = kfold_split(dataset.records.len(), k, seed)?;
    let mut reports = Vec::with_capacity(k);
    for (f, fold) in folds.iter().enumerate() {
        let train_set = dataset.subset(&fold.train);
        let cfg = TrainConfig { seed: train_cfg.seed.wrapping_add(f as u64), ..train_cfg.clone() };
        let trained = train(&train_set, &cfg)?;
        let mut report = evaluate_records(&dataset.subset(&fold.test), &trained.checkpoint)?;
        report.fold = Some(f);
        report.config_hash = config_hash.to_string();
        report.train_size = fold.train.len();
        report.train_wall_time_s = trained.wall_time_s;
        report.best_epoch = trained.best_epoch;
        progress(&report);
        reports.push(report);
    }
    let summary = summarize_folds(&reports)?;
    Ok(CvReport { config_hash: config_hash.to_string(), folds: reports, summary })
}

pub fn summarize_folds(reports: &[MetricsReport]) -> Result<CvSummary, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::Empty("no folds"));
    }
    let med = |f: &dyn Fn(&MetricsReport) -> f64| median(&reports.iter().map(f).collect::<Vec<_>>()).unwrap_or(0.0);
    let mut methods: Vec<String> = reports.iter().flat_map(|r| r.cost_ratio.keys().cloned()).collect();
    methods.sort();
    methods.dedup();
    let cost_ratio_fold_median = methods
        .into_iter()
        .map(|m| {
            let v = med(&|r: &MetricsReport| r.cost_ratio.get(&m).map_or(0.0, |c| c.mean));
            (m, v)
        })
        .collect();
    let gaps: Vec<f64> = reports.iter().flat_map(|r| r.scenarios.iter().map(ScenarioOutcome::model_gap)).collect();
    Ok(CvSummary {
        folds: reports.len(),
        sp1_acc_at_1_median: med(&|r| r.sp1.acc_at[1]),
        sp2_acc_at_1_median: med(&|r| r.sp2.acc_at[1]),
        sp3_acc_median: med(&|r| r.sp3.acc),
        sp3_acc_bin_median: med(&|r| r.sp3.acc_bin),
        cost_ratio_fold_median,
        median_cost_gap: median(&gaps).unwrap_or(f64::INFINITY),
        total_train_time_s: reports.iter().map(|r| r.train_wall_time_s).sum(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMethod {
    Exhaustive,
    SubsetDp,
    Greedy,
    Erap,
    Prap,
    Model,
}

impl BenchMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            BenchMethod::Exhaustive => "exhaustive",
            BenchMethod::SubsetDp => "subset_dp",
            BenchMethod::Greedy => "greedy",
            BenchMethod::Erap => "erap",
            BenchMethod::Prap => "prap",
            BenchMethod::Model => MODEL_METHOD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    /// Number of task requests (devices) in the scenario.
    pub devices: usize,
    pub method: String,
    pub samples: usize,
    pub median_s: f64,
    /// Interquartile range; None with fewer than two samples.
    pub iqr_s: Option<f64>,
}

fn time_one(method: BenchMethod, s: &Scenario, model: Option<&Checkpoint>, settings: &SolverSettings) -> Result<f64, EvalError> {
    let start = Instant::now();
    match method {
        BenchMethod::Exhaustive => drop(sp3_solve(s, SearchMode::Exhaustive, settings)?),
        BenchMethod::SubsetDp => drop(sp3_solve(s, SearchMode::SubsetDp, settings)?),
        BenchMethod::Greedy => drop(sp3_solve(s, SearchMode::Greedy, settings)?),
        BenchMethod::Erap => drop(baseline_solve(s, MethodTag::Erap)?),
        BenchMethod::Prap => drop(baseline_solve(s, MethodTag::Prap)?),
        BenchMethod::Model => {
            let ck = model.ok_or(EvalError::Empty("model timing needs a checkpoint"))?;
            drop(infer(s, ck)?)
        }
    }
    Ok(start.elapsed().as_secs_f64())
}

/// Wall time per method and device count; timed sequentially so samples do not share cores.
pub fn timing_bench(
    scenarios: &[Scenario],
    methods: &[BenchMethod],
    model: Option<&Checkpoint>,
    repeats: usize,
    settings: &SolverSettings,
) -> Result<Vec<TimingRow>, EvalError> {
    if methods.is_empty() {
        return Err(EvalError::Empty("no methods"));
    }
    if scenarios.is_empty() {
        return Err(EvalError::Empty("no scenarios"));
    }
    if repeats == 0 {
        return Err(EvalError::Repeats);
    }
    let mut buckets: BTreeMap<usize, Vec<&Scenario>> = BTreeMap::new();
    for s in scenarios {
        buckets.entry(s.num_devices()).or_default().push(s);
    }
    let mut rows = Vec::new();
    for (&devices, group) in &buckets {
        for &m in methods {
            let mut samples = Vec::with_capacity(group.len() * repeats);
            for s in group {
                for _ in 0..repeats {
                    samples.push(time_one(m, s, model, settings)?);
                }
            }
            let iqr = (samples.len() >= 2).then(|| quantile(&samples, 0.75).unwrap() - quantile(&samples, 0.25).unwrap());
            rows.push(TimingRow {
                devices,
                method: m.as_str().to_string(),
                samples: samples.len(),
                median_s: median(&samples).unwrap(),
                iqr_s: iqr,
            });
        }
    }
    Ok(rows)
}

/// One method's result on one sweep scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    /// Which axis the sweep varies: "aps", "coins" or "slices".
    pub family: String,
    pub aps: usize,
    pub coins: usize,
    pub mecs: usize,
    pub slices: usize,
    pub devices: usize,
    pub seed: u64,
    pub method: String,
    pub cost_s: Option<f64>,
    pub exact_cost_s: f64,
    pub offloads: usize,
    pub mec_offloads: usize,
    /// Model only: mean absolute SP1 error in percentage points under the exact decision.
    pub abs_error_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub base: GeneratorConfig,
    pub aps: Vec<usize>,
    pub coins: Vec<usize>,
    pub slices: Vec<usize>,
    pub devices: Vec<usize>,
    pub scenarios_per_point: usize,
    pub seed: u64,
}

fn offload_counts(s: &Scenario, d: &DecisionVector) -> (usize, usize) {
    let mut offloads = 0;
    let mut mec = 0;
    for x in &d.0 {
        if let Decision::Offload { node, .. } = *x {
            offloads += 1;
            if s.nodes[node].kind == NodeKind::Mec {
                mec += 1;
            }
        }
    }
    (offloads, mec)
}

/// Exact solve plus baselines (and the model where its topology matches) on one scenario.
fn sweep_point(
    family: &str,
    cfg: &GeneratorConfig,
    scenario: &Scenario,
    model: Option<&Checkpoint>,
    settings: &SolverSettings,
) -> Result<Vec<SweepRecord>, EvalError> {
    let exact = sp3_solve(scenario, SearchMode::Auto, settings)?;
    let coins = scenario.count_nodes(NodeKind::Coin);
    let rec = |method: &str, d: &DecisionVector, cost: Option<f64>, abs: Option<f64>| {
        let (offloads, mec_offloads) = offload_counts(scenario, d);
        SweepRecord {
            family: family.to_string(),
            aps: cfg.access_points,
            coins,
            mecs: scenario.nodes.len() - coins,
            slices: scenario.slices,
            devices: scenario.num_devices(),
            seed: scenario.seed,
            method: method.to_string(),
            cost_s: cost,
            exact_cost_s: exact.cost_s,
            offloads,
            mec_offloads,
            abs_error_pct: abs,
        }
    };
    let mut out = vec![rec("exact", &exact.decision, Some(exact.cost_s), None)];
    let greedy = sp3_solve(scenario, SearchMode::Greedy, settings)?;
    out.push(rec("greedy", &greedy.decision, Some(greedy.cost_s), None));
    for m in [MethodTag::Erap, MethodTag::Prap] {
        let b = baseline_solve(scenario, m)?;
        out.push(rec(m.as_str(), &b.decision, checked_cost(scenario, &b.decision, &b.policy)?.0, None));
    }
    if let Some(ck) = model.filter(|ck| ck.params.hyper.topology == scenario.topology()) {
        let inf = infer(scenario, ck)?;
        let cost = checked_cost(scenario, &inf.decision, &inf.policy)?.0;
        let features = crate::dataset::build_features(scenario)?;
        let (p1, _) = predict_allocations(&features, &exact.decision, ck)?;
        let label = crate::dataset::make_sp1_labels(&exact, &scenario.topology())?;
        let mut e = (Vec::new(), Vec::new());
        sp1_entries(&p1, &label, &exact.decision, &scenario.topology(), &mut e);
        let abs = (!e.0.is_empty()).then(|| mean(&e.0.iter().zip(&e.1).map(|(p, y)| 100.0 * (p - y).abs()).collect::<Vec<_>>()));
        out.push(rec(MODEL_METHOD, &inf.decision, cost, abs));
    }
    Ok(out)
}

/// Runs the three one-axis sweeps. Device counts are nested (the first devices of
/// one draw), and COIN counts keep the first COINs of the largest draw, so every
/// point of a sweep differs from its neighbour in that one quantity only.
pub fn run_sweep(spec: &SweepSpec, model: Option<&Checkpoint>, settings: &SolverSettings) -> Result<Vec<SweepRecord>, EvalError> {
    if spec.devices.is_empty() || spec.scenarios_per_point == 0 {
        return Err(EvalError::Empty("sweep has no points"));
    }
    let max_devices = *spec.devices.iter().max().unwrap();
    let mut jobs: Vec<(String, GeneratorConfig, Scenario)> = Vec::new();
    for k in 0..spec.scenarios_per_point {
        let seed = scenario_seed(spec.seed, k);
        let mut push_family = |family: &str, cfg: GeneratorConfig, nodes: Option<Vec<usize>>, base: &Scenario| {
            let scenario = match nodes {
                Some(keep) => base.with_nodes(&keep),
                None => base.clone(),
            };
            for &d in &spec.devices {
                jobs.push((family.to_string(), cfg.clone(), scenario.truncated_devices(d)));
            }
        };
        for &a in &spec.aps {
            let cfg = GeneratorConfig { access_points: a, max_devices: max_devices.max(spec.base.max_devices), ..spec.base.clone() };
            let base = sample_scenario_with(&cfg, seed, max_devices)?;
            push_family("aps", cfg, None, &base);
        }
        if let Some(&max_coins) = spec.coins.iter().max() {
            let cfg = GeneratorConfig { coins: max_coins, max_devices: max_devices.max(spec.base.max_devices), ..spec.base.clone() };
            let base = sample_scenario_with(&cfg, seed, max_devices)?;
            for &c in &spec.coins {
                let keep: Vec<usize> = (0..c).chain(max_coins..max_coins + cfg.mecs).collect();
                push_family("coins", GeneratorConfig { coins: c, ..cfg.clone() }, Some(keep), &base);
            }
        }
        for &n in &spec.slices {
            let cfg = GeneratorConfig { slices: n, max_devices: max_devices.max(spec.base.max_devices), ..spec.base.clone() };
            let base = sample_scenario_with(&cfg, seed, max_devices)?;
            push_family("slices", cfg, None, &base);
        }
    }
    let nested = jobs
        .par_iter()
        .map(|(family, cfg, s)| sweep_point(family, cfg, s, model, settings))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(nested.into_iter().flatten().collect())
}

/// A plain CSV table; the header names units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesTable {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl SeriesTable {
    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }
}

fn fmt(x: f64) -> String {
    format!("{x:.6e}")
}

fn grouped<'a, K: Ord>(records: impl Iterator<Item = &'a SweepRecord>, key: impl Fn(&SweepRecord) -> K) -> BTreeMap<K, Vec<&'a SweepRecord>> {
    let mut map: BTreeMap<K, Vec<&SweepRecord>> = BTreeMap::new();
    for r in records {
        map.entry(key(r)).or_default().push(r);
    }
    map
}

/// Builds the report tables from sweep records.
pub fn figure_series(records: &[SweepRecord]) -> Result<Vec<SeriesTable>, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty("no sweep records"));
    }
    let mut tables = Vec::new();

    let mut rows = Vec::new();
    for ((aps, devices, method), group) in grouped(records.iter().filter(|r| r.family == "aps"), |r| (r.aps, r.devices, r.method.clone())) {
        let crs: Vec<CostRatio> = group.iter().map(|r| cost_ratio(r.cost_s, r.exact_cost_s)).collect();
        let values: Vec<f64> = crs.iter().map(|c| c.value).collect();
        let infeasible = crs.iter().filter(|c| c.infeasible).count();
        rows.push(vec![aps.to_string(), devices.to_string(), method, fmt(mean(&values)), infeasible.to_string(), group.len().to_string()]);
    }
    tables.push(SeriesTable {
        name: "cost_ratio_vs_aps".into(),
        header: ["aps", "devices", "method", "mean_cost_ratio", "infeasible", "scenarios"].map(String::from).to_vec(),
        rows,
    });

    for (family, name) in [("coins", "cost_vs_devices_by_coins"), ("slices", "cost_vs_devices_by_slices")] {
        let mut rows = Vec::new();
        let fam = records.iter().filter(|r| r.family == family);
        for ((level, devices, method), group) in grouped(fam, |r| (if family == "coins" { r.coins } else { r.slices }, r.devices, r.method.clone())) {
            let costs: Vec<f64> = group.iter().map(|r| r.cost_s.unwrap_or(f64::INFINITY)).collect();
            rows.push(vec![level.to_string(), devices.to_string(), method, fmt(median(&costs).unwrap()), group.len().to_string()]);
        }
        tables.push(SeriesTable {
            name: name.into(),
            header: [family, "devices", "method", "median_system_cost_s", "scenarios"].map(String::from).to_vec(),
            rows,
        });
    }

    let mut rows = Vec::new();
    for ((devices, method), group) in grouped(records.iter().filter(|r| r.family == "coins"), |r| (r.devices, r.method.clone())) {
        let offloads: usize = group.iter().map(|r| r.offloads).sum();
        let mec: usize = group.iter().map(|r| r.mec_offloads).sum();
        let pct = if offloads == 0 { 0.0 } else { 100.0 * mec as f64 / offloads as f64 };
        rows.push(vec![devices.to_string(), method, fmt(pct), offloads.to_string()]);
    }
    tables.push(SeriesTable {
        name: "mec_offload_pct_vs_devices".into(),
        header: ["devices", "method", "mec_share_of_offloads_pct", "offloads"].map(String::from).to_vec(),
        rows,
    });

    let mut rows = Vec::new();
    for (devices, group) in grouped(records.iter().filter(|r| r.abs_error_pct.is_some()), |r| r.devices) {
        let errs: Vec<f64> = group.iter().filter_map(|r| r.abs_error_pct).collect();
        rows.push(vec![devices.to_string(), fmt(mean(&errs)), errs.len().to_string()]);
    }
    tables.push(SeriesTable {
        name: "abs_error_vs_devices".into(),
        header: ["devices", "mean_abs_error_pct", "scenarios"].map(String::from).to_vec(),
        rows,
    });
    Ok(tables)
}

pub fn write_series(tables: &[SeriesTable], dir: &Path) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir)?;
    for t in tables {
        std::fs::write(dir.join(format!("{}.csv", t.name)), t.to_csv())?;
    }
    Ok(())
}
