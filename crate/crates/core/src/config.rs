//! Declarative run configuration, read from TOML.
//!
//! Every table is optional and falls back to its defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::GeneratorConfig;
use crate::evaluation::{BenchMethod, CvSummary, MetricsReport, SweepSpec, TimingRow, MODEL_METHOD};
use crate::neuralset::TrainConfig;
use crate::solver::{SearchMode, SolverSettings};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("malformed config")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub scenarios: usize,
    /// Padding capacity I_max; every scenario must fit.
    pub capacity: usize,
    pub mode: SearchMode,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { scenarios: 500, capacity: 16, mode: SearchMode::Auto }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub folds: usize,
    /// Methods timed by `bench`.
    pub methods: Vec<BenchMethod>,
    /// Device counts timed by `bench`, one bucket each.
    pub bench_devices: Vec<usize>,
    pub bench_scenarios: usize,
    pub bench_repeats: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            folds: 10,
            methods: vec![BenchMethod::Exhaustive, BenchMethod::SubsetDp, BenchMethod::Greedy, BenchMethod::Model],
            bench_devices: vec![2, 3, 4],
            bench_scenarios: 3,
            bench_repeats: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub aps: Vec<usize>,
    pub coins: Vec<usize>,
    pub slices: Vec<usize>,
    pub devices: Vec<usize>,
    pub scenarios_per_point: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { aps: vec![1, 2, 3], coins: vec![2, 4, 8], slices: vec![1, 2, 3], devices: vec![4, 6, 8], scenarios_per_point: 5 }
    }
}

/// Checks applied by `eval` and `bench`; each unset entry is skipped.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssertionConfig {
    pub min_sp1_acc_at_1: Option<f64>,
    pub min_sp2_acc_at_1: Option<f64>,
    pub min_sp3_acc_bin: Option<f64>,
    /// Model cost ratio must exceed every baseline's in the fold median.
    pub beat_baselines: bool,
    pub max_median_cost_gap: Option<f64>,
    pub max_train_time_s: Option<f64>,
    /// Exhaustive median time over model median time at the largest benched size.
    pub min_speedup: Option<f64>,
}

/// Outcome of one enabled assertion.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Check { name: name.to_string(), passed, detail }
    }
}

fn at_least(name: &str, limit: Option<f64>, value: f64) -> Option<Check> {
    limit.map(|l| Check::new(name, value >= l, format!("{value:.4} >= {l}")))
}

impl AssertionConfig {
    fn accuracy_checks(&self, sp1: f64, sp2: f64, bin: f64) -> Vec<Check> {
        [
            at_least("sp1_acc_at_1", self.min_sp1_acc_at_1, sp1),
            at_least("sp2_acc_at_1", self.min_sp2_acc_at_1, sp2),
            at_least("sp3_acc_bin", self.min_sp3_acc_bin, bin),
        ]
        .into_iter()
        .flatten()
        .collect()
    }

    fn cost_checks(&self, ratios: &std::collections::BTreeMap<String, f64>, gap: f64) -> Vec<Check> {
        let mut out = Vec::new();
        if self.beat_baselines {
            let model = ratios.get(MODEL_METHOD).copied().unwrap_or(0.0);
            for b in ["erap", "prap"] {
                let base = ratios.get(b).copied().unwrap_or(f64::INFINITY);
                out.push(Check::new(&format!("cost_ratio_beats_{b}"), model > base, format!("{model:.4} > {base:.4}")));
            }
        }
        if let Some(l) = self.max_median_cost_gap {
            out.push(Check::new("median_cost_gap", gap <= l, format!("{gap:.4} <= {l}")));
        }
        out
    }

    /// Checks against a cross-validation summary.
    pub fn check_cv(&self, s: &CvSummary) -> Vec<Check> {
        let mut out = self.accuracy_checks(s.sp1_acc_at_1_median, s.sp2_acc_at_1_median, s.sp3_acc_bin_median);
        out.extend(self.cost_checks(&s.cost_ratio_fold_median, s.median_cost_gap));
        if let Some(l) = self.max_train_time_s {
            out.push(Check::new("train_time_s", s.total_train_time_s <= l, format!("{:.1} <= {l}", s.total_train_time_s)));
        }
        out
    }

    /// Checks against a single evaluation of a fixed checkpoint.
    pub fn check_report(&self, r: &MetricsReport) -> Vec<Check> {
        let mut out = self.accuracy_checks(r.sp1.acc_at[1], r.sp2.acc_at[1], r.sp3.acc_bin);
        let means = r.cost_ratio.iter().map(|(k, v)| (k.clone(), v.mean)).collect();
        out.extend(self.cost_checks(&means, r.median_cost_gap));
        out
    }

    /// Exhaustive-over-model median time at the largest device count timed for both.
    pub fn check_timing(&self, rows: &[TimingRow]) -> Vec<Check> {
        let Some(limit) = self.min_speedup else { return Vec::new() };
        let find = |m: &str, d: usize| rows.iter().find(|r| r.method == m && r.devices == d).map(|r| r.median_s);
        let size = rows
            .iter()
            .map(|r| r.devices)
            .filter(|&d| find("exhaustive", d).is_some() && find(MODEL_METHOD, d).is_some())
            .max();
        let check = match size {
            Some(d) => {
                let speedup = find("exhaustive", d).unwrap() / find(MODEL_METHOD, d).unwrap();
                Check::new("speedup", speedup >= limit, format!("{speedup:.1}x >= {limit}x at {d} devices"))
            }
            None => Check::new("speedup", false, "bench lacks exhaustive and model rows at a common size".into()),
        };
        vec![check]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Run directory; not part of the config hash.
    pub out_dir: PathBuf,
    /// Seeds scenario sampling, fold assignment and sweeps.
    pub seed: u64,
    /// Worker threads, 0 for one per core; not part of the config hash.
    pub workers: usize,
    pub generator: GeneratorConfig,
    pub dataset: DatasetConfig,
    pub solver: SolverSettings,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub assertions: AssertionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("runs"),
            seed: 42,
            workers: 0,
            generator: GeneratorConfig::default(),
            dataset: DatasetConfig::default(),
            solver: SolverSettings::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            assertions: AssertionConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        self.generator.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.dataset.scenarios == 0 {
            return bad("dataset.scenarios must be positive");
        }
        if self.dataset.capacity < self.generator.max_devices {
            return bad("dataset.capacity must be at least generator.max_devices");
        }
        let t = &self.train;
        if t.hidden == 0 || t.embed == 0 || t.epochs == 0 || t.batch_size == 0 {
            return bad("train widths, epochs and batch size must be positive");
        }
        if !(t.lr.is_finite() && t.lr >= 0.0 && t.lr_final.is_finite() && t.lr_final >= 0.0) {
            return bad("learning rates must be finite and nonnegative");
        }
        if !(0.0..=0.5).contains(&t.val_fraction) {
            return bad("train.val_fraction must lie in [0, 0.5]");
        }
        if self.eval.folds < 2 || self.eval.folds > self.dataset.scenarios {
            return bad("eval.folds must lie in [2, dataset.scenarios]");
        }
        if self.eval.methods.is_empty() || self.eval.bench_repeats == 0 || self.eval.bench_scenarios == 0 {
            return bad("bench needs methods, scenarios and at least one repeat");
        }
        if self.eval.bench_devices.contains(&0) || self.sweep.devices.contains(&0) {
            return bad("device counts must be positive");
        }
        if self.sweep.scenarios_per_point == 0 || self.sweep.devices.is_empty() {
            return bad("sweep needs device counts and scenarios per point");
        }
        let a = &self.assertions;
        for v in [a.min_sp1_acc_at_1, a.min_sp2_acc_at_1, a.min_sp3_acc_bin].into_iter().flatten() {
            if !(0.0..=1.0).contains(&v) {
                return bad("accuracy thresholds must lie in [0, 1]");
            }
        }
        for v in [a.max_median_cost_gap, a.max_train_time_s, a.min_speedup].into_iter().flatten() {
            if !(v.is_finite() && v >= 0.0) {
                return bad("assertion limits must be finite and nonnegative");
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical (sorted-key) JSON form of every result-affecting field.
    pub fn config_hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("out_dir");
            map.remove("workers");
        }
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    pub fn sweep_spec(&self) -> SweepSpec {
        SweepSpec {
            base: self.generator.clone(),
            aps: self.sweep.aps.clone(),
            coins: self.sweep.coins.clone(),
            slices: self.sweep.slices.clone(),
            devices: self.sweep.devices.clone(),
            scenarios_per_point: self.sweep.scenarios_per_point,
            seed: self.seed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml_str("sed = 3"), Err(ConfigError::Parse(_))));
        assert!(matches!(RunConfig::from_toml_str("[train]\nlearning_rate = 0.1"), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn hash_ignores_key_order_and_run_location() {
        let a = "seed = 7\n[train]\nepochs = 3\nlr = 0.5\n[generator]\ncoins = 2\n";
        let b = "out_dir = \"elsewhere\"\nworkers = 4\nseed = 7\n[generator]\ncoins = 2\n[train]\nlr = 0.5\nepochs = 3\n";
        let x = RunConfig::from_toml_str(a).unwrap();
        let y = RunConfig::from_toml_str(b).unwrap();
        assert_eq!(x.config_hash(), y.config_hash());
        assert_eq!(x.config_hash().len(), 64);
        let z = RunConfig { seed: 8, ..x.clone() };
        assert_ne!(x.config_hash(), z.config_hash());
    }

    #[test]
    fn semantic_errors_are_reported() {
        for bad in [
            "[dataset]\nscenarios = 0",
            "[dataset]\ncapacity = 4",
            "[eval]\nfolds = 1",
            "[train]\nval_fraction = 0.9",
            "[assertions]\nmin_sp1_acc_at_1 = 1.5",
            "[generator]\nmin_devices = 0",
        ] {
            assert!(matches!(RunConfig::from_toml_str(bad), Err(ConfigError::Invalid(_))), "{bad}");
        }
    }

    #[test]
    fn assertions_compare_against_limits() {
        let a = AssertionConfig { min_sp1_acc_at_1: Some(0.85), beat_baselines: true, min_speedup: Some(10.0), ..Default::default() };
        let summary = CvSummary {
            folds: 2,
            sp1_acc_at_1_median: 0.9,
            sp2_acc_at_1_median: 0.1,
            sp3_acc_median: 0.5,
            sp3_acc_bin_median: 0.5,
            cost_ratio_fold_median: [("erap".to_string(), 0.7), ("prap".to_string(), 0.95), (MODEL_METHOD.to_string(), 0.9)].into(),
            median_cost_gap: 0.1,
            total_train_time_s: 1.0,
        };
        let checks = a.check_cv(&summary);
        let passed: Vec<(&str, bool)> = checks.iter().map(|c| (c.name.as_str(), c.passed)).collect();
        assert_eq!(passed, [("sp1_acc_at_1", true), ("cost_ratio_beats_erap", true), ("cost_ratio_beats_prap", false)]);
        let row = |m: &str, d: usize, t: f64| TimingRow { devices: d, method: m.into(), samples: 1, median_s: t, iqr_s: None };
        let rows = [row("exhaustive", 4, 1.0), row(MODEL_METHOD, 4, 0.2), row("exhaustive", 10, 5.0), row(MODEL_METHOD, 10, 0.01)];
        assert!(a.check_timing(&rows)[0].passed);
        assert!(!a.check_timing(&rows[..2])[0].passed);
        assert!(!a.check_timing(&rows[2..3])[0].passed);
        assert!(AssertionConfig::default().check_cv(&summary).is_empty());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig { seed: 9, ..Default::default() };
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
    }
}
