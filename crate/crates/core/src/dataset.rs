//! Scenario sampling, solver labelling and the padded/masked set datasets.
//!
//! Feature row layout for a topology with N slices, A APs and J nodes, all
//! entries base-10 logarithms of the physical quantity:
//!
//! ```text
//! [ S_i, L_i, L_{i,1..N}, α_i, F^l_i, R_{i,1..A} | F_j^n (j-major, J·N) | λ̃_j (J) ]
//! ```
//!
//! The part after the bar is identical on every row. λ̃_j is the arrival rate
//! node j would see if every device took its best stand-alone path, entered as
//! log10(1 + λ̃). SP1 label columns are ordered (APs then nodes) × slices.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{
    derive_rates, AccessPoint, Decision, DecisionVector, Device, EdgeNode, ModelError, NodeKind, Scenario,
    Topology,
};
use crate::solver::{self, Instance, MethodTag, SearchMode, SolveResult, SolverError, SolverSettings};

pub const FORMAT_NAME: &str = "edgeslice-dataset";
pub const GENERATOR_VERSION: u32 = 1;
pub const STD_FLOOR: f64 = 1e-12;
const LABEL_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("scenario has {devices} devices but the padded capacity is {capacity}")]
    Capacity { devices: usize, capacity: usize },
    #[error("a batch needs at least one device")]
    Empty,
    #[error("k-fold split needs 2 <= k <= {n}, got k = {k}")]
    BadFolds { k: usize, n: usize },
    #[error("label block fails its sum check: {0}")]
    LabelSum(String),
    #[error("feature width mismatch: expected {expected}, got {got}")]
    Width { expected: usize, got: usize },
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("malformed dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Sampling ranges and counts for synthetic scenarios. `[lo, hi]` pairs are uniform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub slices: usize,
    pub access_points: usize,
    pub coins: usize,
    pub mecs: usize,
    pub min_devices: usize,
    pub max_devices: usize,
    pub area_side_m: f64,
    pub bandwidth_hz: f64,
    pub coin_capacity_cycles_per_s: [f64; 2],
    pub mec_capacity_cycles_per_s: f64,
    pub local_capacity_cycles_per_s: f64,
    pub input_size_mb: [f64; 2],
    pub transmit_power_w: [f64; 2],
    pub local_instructions_cycles: [f64; 2],
    /// Slice instructions are the local count times a factor drawn per slice.
    pub slice_instruction_factor: [f64; 2],
    pub arrival_rate_per_s: [f64; 2],
    pub path_loss_exponent: f64,
    pub noise_psd_dbm_per_hz: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            slices: 3,
            access_points: 3,
            coins: 8,
            mecs: 1,
            min_devices: 2,
            max_devices: 12,
            area_side_m: 500.0,
            bandwidth_hz: 18e6,
            coin_capacity_cycles_per_s: [5e8, 1e9],
            mec_capacity_cycles_per_s: 1e10,
            local_capacity_cycles_per_s: 2e7,
            input_size_mb: [1.0, 10.0],
            transmit_power_w: [1e-6, 0.1],
            local_instructions_cycles: [2e7, 2e8],
            slice_instruction_factor: [0.5, 1.5],
            arrival_rate_per_s: [0.1, 1.0],
            path_loss_exponent: 4.0,
            noise_psd_dbm_per_hz: -174.0,
        }
    }
}

fn range_ok(r: [f64; 2]) -> bool {
    r[0].is_finite() && r[1].is_finite() && r[0] > 0.0 && r[0] <= r[1]
}

impl GeneratorConfig {
    pub fn topology(&self) -> Topology {
        Topology {
            slices: self.slices,
            aps: self.access_points,
            nodes: self.coins + self.mecs,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let fail = |m: &str| Err(DatasetError::Config(m.to_string()));
        if self.slices == 0 || self.access_points == 0 || self.coins + self.mecs == 0 {
            return fail("slices, access points and nodes must be positive");
        }
        if self.min_devices == 0 || self.min_devices > self.max_devices {
            return fail("device range must satisfy 1 <= min <= max");
        }
        let ranges = [
            self.coin_capacity_cycles_per_s,
            self.input_size_mb,
            self.transmit_power_w,
            self.local_instructions_cycles,
            self.slice_instruction_factor,
            self.arrival_rate_per_s,
        ];
        if !ranges.iter().all(|&r| range_ok(r)) {
            return fail("every sampling range must be positive with lo <= hi");
        }
        let scalars = [
            self.area_side_m,
            self.bandwidth_hz,
            self.mec_capacity_cycles_per_s,
            self.local_capacity_cycles_per_s,
            self.path_loss_exponent,
        ];
        if !scalars.iter().all(|&x| x.is_finite() && x > 0.0) {
            return fail("scalar parameters must be positive");
        }
        if !self.noise_psd_dbm_per_hz.is_finite() {
            return fail("noise PSD must be finite");
        }
        Ok(())
    }

    fn noise_w_per_hz(&self) -> f64 {
        10f64.powf(self.noise_psd_dbm_per_hz / 10.0) * 1e-3
    }
}

fn draw(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

/// Samples one scenario with `devices` devices and derived rates.
pub fn sample_scenario_with(cfg: &GeneratorConfig, seed: u64, devices: usize) -> Result<Scenario, DatasetError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = cfg.area_side_m;
    let point = |rng: &mut ChaCha8Rng| [rng.gen_range(0.0..side), rng.gen_range(0.0..side)];
    let access_points = (0..cfg.access_points)
        .map(|_| AccessPoint { bandwidth_hz: cfg.bandwidth_hz, position_m: point(&mut rng) })
        .collect();
    let mut nodes = Vec::new();
    for _ in 0..cfg.coins {
        nodes.push(EdgeNode {
            kind: NodeKind::Coin,
            capacity_cycles_per_s: (0..cfg.slices).map(|_| draw(&mut rng, cfg.coin_capacity_cycles_per_s)).collect(),
        });
    }
    for _ in 0..cfg.mecs {
        nodes.push(EdgeNode {
            kind: NodeKind::Mec,
            capacity_cycles_per_s: vec![cfg.mec_capacity_cycles_per_s; cfg.slices],
        });
    }
    let devices = (0..devices)
        .map(|_| {
            let local = draw(&mut rng, cfg.local_instructions_cycles);
            Device {
                input_size_bits: draw(&mut rng, cfg.input_size_mb) * 8e6,
                local_instructions_cycles: local,
                slice_instructions_cycles: (0..cfg.slices)
                    .map(|_| local * draw(&mut rng, cfg.slice_instruction_factor))
                    .collect(),
                arrival_rate_per_s: draw(&mut rng, cfg.arrival_rate_per_s),
                local_capacity_cycles_per_s: cfg.local_capacity_cycles_per_s,
                transmit_power_w: draw(&mut rng, cfg.transmit_power_w),
                position_m: point(&mut rng),
                physical_rate_bps: Vec::new(),
            }
        })
        .collect();
    let scenario = Scenario {
        slices: cfg.slices,
        access_points,
        nodes,
        devices,
        noise_psd_w_per_hz: cfg.noise_w_per_hz(),
        path_loss_exponent: cfg.path_loss_exponent,
        seed,
    };
    Ok(derive_rates(&scenario)?)
}

/// Samples a scenario; the device count is itself drawn from the configured range.
pub fn sample_scenario(cfg: &GeneratorConfig, seed: u64) -> Result<Scenario, DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_de71ce5);
    let devices = rng.gen_range(cfg.min_devices..=cfg.max_devices);
    sample_scenario_with(cfg, seed, devices)
}

/// Seed of the `index`-th scenario of a dataset drawn from `base`.
pub fn scenario_seed(base: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(index as u64);
    rng.gen()
}

/// Width of a feature row for a topology.
pub fn feature_width(topo: &Topology) -> usize {
    2 + topo.slices + 2 + topo.aps + topo.nodes * topo.slices + topo.nodes
}

pub fn feature_names(topo: &Topology) -> Vec<String> {
    let mut names = vec!["log10_input_bits".to_string(), "log10_local_cycles".to_string()];
    names.extend((0..topo.slices).map(|n| format!("log10_slice{n}_cycles")));
    names.push("log10_arrival_rate".into());
    names.push("log10_local_capacity".into());
    names.extend((0..topo.aps).map(|a| format!("log10_rate_ap{a}")));
    for j in 0..topo.nodes {
        names.extend((0..topo.slices).map(|n| format!("log10_capacity_node{j}_slice{n}")));
    }
    names.extend((0..topo.nodes).map(|j| format!("log10_1p_standalone_arrivals_node{j}")));
    names
}

/// Arrival rate per node if each device took its cheapest stand-alone option.
pub fn standalone_arrivals(scenario: &Scenario) -> Result<Vec<f64>, DatasetError> {
    let inst = Instance::new(scenario)?;
    let topo = inst.topo;
    let mut lambda = vec![0.0; topo.nodes];
    let mut classes = vec![0; inst.devices()];
    for i in 0..inst.devices() {
        let mut best = (inst.evaluate(&classes).unwrap_or(f64::INFINITY), 0);
        for c in 1..topo.num_classes() {
            classes[i] = c;
            if let Some(cost) = inst.evaluate(&classes) {
                if cost < best.0 {
                    best = (cost, c);
                }
            }
        }
        classes[i] = 0;
        if let Some(Decision::Offload { node, .. }) = Decision::from_class(best.1, &topo) {
            lambda[node] += inst.alpha[i];
        }
    }
    Ok(lambda)
}

/// Raw (unstandardized) feature rows, one per device in device order.
pub fn build_features(scenario: &Scenario) -> Result<Vec<Vec<f64>>, DatasetError> {
    let topo = scenario.topology();
    let mut shared = Vec::with_capacity(topo.nodes * (topo.slices + 1));
    for node in &scenario.nodes {
        shared.extend(node.capacity_cycles_per_s.iter().map(|f| f.log10()));
    }
    shared.extend(standalone_arrivals(scenario)?.iter().map(|l| l.ln_1p() / std::f64::consts::LN_10));
    let rows = scenario
        .devices
        .iter()
        .map(|d| {
            let mut row = Vec::with_capacity(feature_width(&topo));
            row.push(d.input_size_bits.log10());
            row.push(d.local_instructions_cycles.log10());
            row.extend(d.slice_instructions_cycles.iter().map(|l| l.log10()));
            row.push(d.arrival_rate_per_s.log10());
            row.push(d.local_capacity_cycles_per_s.log10());
            row.extend(d.physical_rate_bps.iter().map(|r| r.log10()));
            row.extend_from_slice(&shared);
            row
        })
        .collect();
    Ok(rows)
}

/// Per-feature mean and standard deviation over real rows of the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(width: usize) -> Self {
        Standardizer { mean: vec![0.0; width], std: vec![1.0; width] }
    }

    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a Vec<f64>>, width: usize) -> Self {
        let mut count = 0usize;
        let mut sum = vec![0.0; width];
        let mut sq = vec![0.0; width];
        let collected: Vec<&Vec<f64>> = rows.into_iter().collect();
        for row in &collected {
            count += 1;
            for (s, x) in sum.iter_mut().zip(row.iter()) {
                *s += x;
            }
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        for row in &collected {
            for ((q, x), m) in sq.iter_mut().zip(row.iter()).zip(&mean) {
                *q += (x - m) * (x - m);
            }
        }
        let std = sq.iter().map(|q| (q / n).sqrt().max(STD_FLOOR)).collect();
        Standardizer { mean, std }
    }

    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s.max(STD_FLOOR))
            .collect()
    }
}

/// Zero-padded feature matrix and its validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    pub xbar: Array2<f64>,
    pub mask: Vec<f64>,
}

impl PaddedBatch {
    pub fn devices(&self) -> usize {
        self.mask.iter().filter(|&&m| m > 0.0).count()
    }

    pub fn capacity(&self) -> usize {
        self.mask.len()
    }
}

pub fn pad_and_mask(rows: &[Vec<f64>], capacity: usize) -> Result<PaddedBatch, DatasetError> {
    if rows.is_empty() {
        return Err(DatasetError::Empty);
    }
    if rows.len() > capacity {
        return Err(DatasetError::Capacity { devices: rows.len(), capacity });
    }
    let width = rows[0].len();
    let mut xbar = Array2::zeros((capacity, width));
    for (i, row) in rows.iter().enumerate() {
        if row.len() != width {
            return Err(DatasetError::Width { expected: width, got: row.len() });
        }
        for (f, &x) in row.iter().enumerate() {
            xbar[[i, f]] = x;
        }
    }
    let mask = (0..capacity).map(|i| if i < rows.len() { 1.0 } else { 0.0 }).collect();
    Ok(PaddedBatch { xbar, mask })
}

/// Standardizes real rows; padded rows stay zero.
pub fn standardize(batch: &PaddedBatch, stats: &Standardizer) -> Result<PaddedBatch, DatasetError> {
    let width = batch.xbar.ncols();
    if stats.mean.len() != width || stats.std.len() != width {
        return Err(DatasetError::Width { expected: width, got: stats.mean.len() });
    }
    let mut out = batch.clone();
    for (i, &m) in batch.mask.iter().enumerate() {
        if m > 0.0 {
            for f in 0..width {
                out.xbar[[i, f]] = (batch.xbar[[i, f]] - stats.mean[f]) / stats.std[f].max(STD_FLOOR);
            }
        } else {
            out.xbar.row_mut(i).fill(0.0);
        }
    }
    Ok(out)
}

/// Intra-slice labels: per device and column the share, plus a slack per column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sp1Labels {
    pub users: Vec<Vec<f64>>,
    pub slack: Vec<f64>,
}

/// Inter-slice labels: per AP the slice shares plus a slack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sp2Labels {
    pub shares: Vec<Vec<f64>>,
    pub slack: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactoredLabel {
    pub slice: usize,
    pub ap: usize,
    pub node: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sp3Labels {
    pub joint: Vec<usize>,
    pub offload: Vec<bool>,
    pub factored: Vec<Option<FactoredLabel>>,
}

/// Slack-augmented shares: user entries as given, slack = max(0, 1 − Σ).
pub fn augment_with_slack(shares: &[f64]) -> Result<f64, DatasetError> {
    let total: f64 = shares.iter().sum();
    if total > 1.0 + LABEL_TOL || shares.iter().any(|&s| !(s >= 0.0)) {
        return Err(DatasetError::LabelSum(format!("shares sum to {total}")));
    }
    Ok((1.0 - total).max(0.0))
}

/// Per-device mask of the resource columns a decision uses.
pub fn column_mask(decisions: &DecisionVector, topo: &Topology) -> Vec<Vec<bool>> {
    decisions
        .0
        .iter()
        .map(|d| {
            let mut m = vec![false; topo.num_resource_columns()];
            if let Decision::Offload { ap, node, slice } = *d {
                m[topo.radio_column(ap, slice)] = true;
                m[topo.compute_column(node, slice)] = true;
            }
            m
        })
        .collect()
}

pub fn make_sp1_labels(solve: &SolveResult, topo: &Topology) -> Result<Sp1Labels, DatasetError> {
    let devices = solve.decision.len();
    let mut users = vec![vec![0.0; topo.num_resource_columns()]; devices];
    for (i, d) in solve.decision.0.iter().enumerate() {
        if let Decision::Offload { ap, node, slice } = *d {
            users[i][topo.radio_column(ap, slice)] = solve.policy.phi_radio[i][ap][slice];
            users[i][topo.compute_column(node, slice)] = solve.policy.phi_compute[i][node][slice];
        }
    }
    let slack = (0..topo.num_resource_columns())
        .map(|e| augment_with_slack(&users.iter().map(|u| u[e]).collect::<Vec<_>>()))
        .collect::<Result<_, _>>()?;
    Ok(Sp1Labels { users, slack })
}

pub fn make_sp2_labels(solve: &SolveResult) -> Result<Sp2Labels, DatasetError> {
    let shares = solve.policy.omega.clone();
    let slack = shares.iter().map(|row| augment_with_slack(row)).collect::<Result<_, _>>()?;
    Ok(Sp2Labels { shares, slack })
}

pub fn make_sp3_labels(solve: &SolveResult, topo: &Topology) -> Sp3Labels {
    let d = &solve.decision.0;
    Sp3Labels {
        joint: d.iter().map(|x| x.class_index(topo)).collect(),
        offload: d.iter().map(|x| !x.is_local()).collect(),
        factored: d
            .iter()
            .map(|x| match *x {
                Decision::Local => None,
                Decision::Offload { ap, node, slice } => Some(FactoredLabel { slice, ap, node }),
            })
            .collect(),
    }
}

/// One labelled scenario: the unified record behind all three datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: usize,
    pub seed: u64,
    pub scenario: Scenario,
    pub features: Vec<Vec<f64>>,
    pub solve: SolveResult,
    pub sp1: Sp1Labels,
    pub sp2: Sp2Labels,
    pub sp3: Sp3Labels,
}

impl Record {
    pub fn devices(&self) -> usize {
        self.features.len()
    }

    pub fn column_mask(&self) -> Vec<Vec<bool>> {
        column_mask(&self.solve.decision, &self.scenario.topology())
    }

    /// Intra-slice example: features and the fixed decision in, shares out.
    pub fn sp1_example(&self) -> Sp1Example<'_> {
        Sp1Example { features: &self.features, decision: &self.solve.decision, labels: &self.sp1 }
    }

    /// Inter-slice example: the intra-slice example plus its solution in, ω out.
    pub fn sp2_example(&self) -> Sp2Example<'_> {
        Sp2Example { sp1: self.sp1_example(), labels: &self.sp2 }
    }

    /// Offloading example: the inter-slice example plus its solution in, δ out.
    pub fn sp3_example(&self) -> Sp3Example<'_> {
        Sp3Example { sp2: self.sp2_example(), labels: &self.sp3 }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Sp1Example<'a> {
    pub features: &'a [Vec<f64>],
    pub decision: &'a DecisionVector,
    pub labels: &'a Sp1Labels,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Sp2Example<'a> {
    pub sp1: Sp1Example<'a>,
    pub labels: &'a Sp2Labels,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Sp3Example<'a> {
    pub sp2: Sp2Example<'a>,
    pub labels: &'a Sp3Labels,
}

/// Labels one scenario with the configured search mode.
pub fn label_scenario(
    id: usize,
    scenario: Scenario,
    mode: SearchMode,
    settings: &SolverSettings,
) -> Result<Record, DatasetError> {
    let topo = scenario.topology();
    let solve = solver::sp3_solve(&scenario, mode, settings)?;
    let features = build_features(&scenario)?;
    Ok(Record {
        id,
        seed: scenario.seed,
        sp1: make_sp1_labels(&solve, &topo)?,
        sp2: make_sp2_labels(&solve)?,
        sp3: make_sp3_labels(&solve, &topo),
        features,
        solve,
        scenario,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub generator_version: u32,
    pub topology: Topology,
    pub feature_layout: Vec<String>,
    pub capacity: usize,
    pub base_seed: u64,
    pub generator: GeneratorConfig,
    pub records: usize,
    /// Present once a training split has been fixed.
    pub standardizer: Option<Standardizer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<Record>,
}

/// Samples and labels `count` scenarios; output order is index order for any worker count.
pub fn generate_dataset(
    cfg: &GeneratorConfig,
    base_seed: u64,
    count: usize,
    capacity: usize,
    mode: SearchMode,
    settings: &SolverSettings,
) -> Result<Dataset, DatasetError> {
    cfg.validate()?;
    if cfg.max_devices > capacity {
        return Err(DatasetError::Capacity { devices: cfg.max_devices, capacity });
    }
    let records = (0..count)
        .into_par_iter()
        .map(|id| {
            let scenario = sample_scenario(cfg, scenario_seed(base_seed, id))?;
            label_scenario(id, scenario, mode, settings)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let topo = cfg.topology();
    Ok(Dataset {
        header: DatasetHeader {
            format: FORMAT_NAME.into(),
            generator_version: GENERATOR_VERSION,
            topology: topo,
            feature_layout: feature_names(&topo),
            capacity,
            base_seed,
            generator: cfg.clone(),
            records: records.len(),
            standardizer: None,
        },
        records,
    })
}

impl Dataset {
    pub fn write_jsonl(&self, path: &Path) -> Result<(), DatasetError> {
        let mut out = BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut out, &self.header)?;
        out.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Dataset, DatasetError> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = file.lines();
        let header: DatasetHeader = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(DatasetError::Format("empty file".into())),
        };
        if header.format != FORMAT_NAME {
            return Err(DatasetError::Format(format!("unknown format {}", header.format)));
        }
        let mut records = Vec::with_capacity(header.records);
        for line in lines {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        if records.len() != header.records {
            return Err(DatasetError::Format(format!(
                "header announces {} records, found {}",
                header.records,
                records.len()
            )));
        }
        Ok(Dataset { header, records })
    }

    /// SHA-256 over the header and records with solver wall times zeroed, so
    /// regenerating with the same configuration and seed reproduces it.
    pub fn content_digest(&self) -> Result<String, DatasetError> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.header)?);
        for r in &self.records {
            let mut r = r.clone();
            r.solve.solver_wall_time_s = 0.0;
            h.update(b"\n");
            h.update(serde_json::to_vec(&r)?);
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn subset(&self, ids: &[usize]) -> Vec<&Record> {
        ids.iter().map(|&i| &self.records[i]).collect()
    }

    /// Standardizer fitted on the real rows of the given records only.
    pub fn fit_standardizer(&self, train: &[usize]) -> Standardizer {
        let width = feature_width(&self.header.topology);
        Standardizer::fit(train.iter().flat_map(|&i| self.records[i].features.iter()), width)
    }

    /// Counts of records per search method.
    pub fn method_counts(&self) -> Vec<(MethodTag, usize)> {
        let mut out: Vec<(MethodTag, usize)> = Vec::new();
        for r in &self.records {
            match out.iter_mut().find(|(m, _)| *m == r.solve.method) {
                Some(e) => e.1 += 1,
                None => out.push((r.solve.method, 1)),
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded scenario-level k-fold partition; fold sizes differ by at most one.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>, DatasetError> {
    if k < 2 || k > n {
        return Err(DatasetError::BadFolds { k, n });
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let lo = f * n / k;
        let hi = (f + 1) * n / k;
        let mut test: Vec<usize> = ids[lo..hi].to_vec();
        test.sort_unstable();
        let mut train: Vec<usize> = ids[..lo].iter().chain(&ids[hi..]).copied().collect();
        train.sort_unstable();
        folds.push(Fold { train, test });
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::check_feasibility;

    fn small_cfg() -> GeneratorConfig {
        GeneratorConfig { slices: 2, access_points: 2, coins: 2, mecs: 1, max_devices: 4, ..Default::default() }
    }

    #[test]
    fn default_config_matches_reference_environment() {
        let s = sample_scenario(&GeneratorConfig::default(), 1).unwrap();
        assert_eq!(s.count_nodes(NodeKind::Coin), 8);
        assert_eq!(s.count_nodes(NodeKind::Mec), 1);
        assert_eq!(s.access_points.len(), 3);
        assert_eq!(s.topology().num_classes(), 82);
        for node in &s.nodes {
            for &f in &node.capacity_cycles_per_s {
                match node.kind {
                    NodeKind::Coin => assert!((5e8..=1e9).contains(&f)),
                    NodeKind::Mec => assert_eq!(f, 1e10),
                }
            }
        }
        for d in &s.devices {
            assert!((8e6..=8e7).contains(&d.input_size_bits));
            assert!((1e-6..=0.1).contains(&d.transmit_power_w));
            assert_eq!(d.local_capacity_cycles_per_s, 2e7);
            assert!(d.position_m.iter().all(|&x| (0.0..500.0).contains(&x)));
        }
    }

    #[test]
    fn sampling_is_deterministic_and_minimal_scenario_is_valid() {
        let cfg = GeneratorConfig::default();
        assert_eq!(sample_scenario(&cfg, 42).unwrap(), sample_scenario(&cfg, 42).unwrap());
        assert_ne!(sample_scenario(&cfg, 42).unwrap(), sample_scenario(&cfg, 43).unwrap());
        let one = sample_scenario_with(&cfg, 3, 1).unwrap();
        assert!(one.validate().is_ok());
        assert_eq!(one.num_devices(), 1);
    }

    #[test]
    fn feature_layout_width_and_sharing() {
        let cfg = GeneratorConfig::default();
        let s = sample_scenario_with(&cfg, 9, 5).unwrap();
        let rows = build_features(&s).unwrap();
        let topo = s.topology();
        assert_eq!(feature_width(&topo), 46);
        assert_eq!(feature_names(&topo).len(), 46);
        assert!(rows.iter().all(|r| r.len() == 46 && r.iter().all(|x| x.is_finite())));
        let shared = 2 + topo.slices + 2 + topo.aps;
        assert!(rows.iter().all(|r| r[shared..] == rows[0][shared..]));
        assert!((rows[2][0] - s.devices[2].input_size_bits.log10()).abs() < 1e-15);
        assert!((rows[1][shared] - s.nodes[0].capacity_cycles_per_s[0].log10()).abs() < 1e-15);
    }

    #[test]
    fn pad_and_mask_examples() {
        let rows = vec![vec![1.0, 2.0]; 3];
        let b = pad_and_mask(&rows, 5).unwrap();
        assert_eq!(b.mask, vec![1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(b.devices(), 3);
        assert!(b.xbar.row(4).iter().all(|&x| x == 0.0));
        assert_eq!(pad_and_mask(&rows, 3).unwrap().mask, vec![1.0; 3]);
        assert!(matches!(pad_and_mask(&[], 3), Err(DatasetError::Empty)));
        assert!(matches!(pad_and_mask(&rows, 2), Err(DatasetError::Capacity { .. })));
    }

    #[test]
    fn standardize_examples() {
        let rows = vec![vec![1.0, 5.0], vec![3.0, 5.0]];
        let stats = Standardizer::fit(rows.iter(), 2);
        assert_eq!(stats.mean, vec![2.0, 5.0]);
        assert_eq!(stats.std, vec![1.0, STD_FLOOR]);
        let b = standardize(&pad_and_mask(&rows, 3).unwrap(), &stats).unwrap();
        assert_eq!(b.xbar.row(0).to_vec(), vec![-1.0, 0.0]);
        assert_eq!(b.xbar.row(1).to_vec(), vec![1.0, 0.0]);
        assert_eq!(b.xbar.row(2).to_vec(), vec![0.0, 0.0]);
        let id = standardize(&pad_and_mask(&rows, 2).unwrap(), &Standardizer::identity(2)).unwrap();
        assert_eq!(id.xbar, pad_and_mask(&rows, 2).unwrap().xbar);
        let mean_row = standardize(&pad_and_mask(&[vec![2.0, 5.0]], 1).unwrap(), &stats).unwrap();
        assert_eq!(mean_row.xbar.row(0).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn slack_augmentation_examples() {
        assert!((augment_with_slack(&[0.5, 0.4]).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(augment_with_slack(&[0.25, 0.75]).unwrap(), 0.0);
        assert_eq!(augment_with_slack(&[]).unwrap(), 1.0);
        assert!(augment_with_slack(&[0.7, 0.7]).is_err());
    }

    #[test]
    fn labels_sum_to_one_and_follow_class_order() {
        let cfg = small_cfg();
        let ds = generate_dataset(&cfg, 5, 12, 6, SearchMode::Auto, &SolverSettings::default()).unwrap();
        for r in &ds.records {
            let topo = r.scenario.topology();
            for e in 0..topo.num_resource_columns() {
                let total: f64 = r.sp1.users.iter().map(|u| u[e]).sum::<f64>() + r.sp1.slack[e];
                assert!((total - 1.0).abs() < 1e-9);
            }
            for (a, row) in r.sp2.shares.iter().enumerate() {
                assert!((row.iter().sum::<f64>() + r.sp2.slack[a] - 1.0).abs() < 1e-9);
            }
            for (i, &c) in r.sp3.joint.iter().enumerate() {
                assert_eq!(r.sp3.offload[i], c != 0);
                assert_eq!(r.sp3.factored[i].is_some(), c != 0);
                if let Some(f) = r.sp3.factored[i] {
                    let d = Decision::Offload { ap: f.ap, node: f.node, slice: f.slice };
                    assert_eq!(d.class_index(&topo), c);
                }
            }
            assert!(check_feasibility(&r.scenario, &r.solve.decision, &r.solve.policy).unwrap().is_feasible());
            assert!(r.solve.exact);
        }
        let topo = Topology { slices: 3, aps: 3, nodes: 9 };
        assert_eq!(Decision::Offload { ap: 1, node: 2, slice: 1 }.class_index(&topo), 1 + 27 + 9 + 2);
    }

    #[test]
    fn dataset_round_trips_through_jsonl() {
        let cfg = small_cfg();
        let ds = generate_dataset(&cfg, 8, 6, 6, SearchMode::Auto, &SolverSettings::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        ds.write_jsonl(&path).unwrap();
        let back = Dataset::read_jsonl(&path).unwrap();
        assert_eq!(back, ds);
        let again = dir.path().join("e.jsonl");
        back.write_jsonl(&again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn generation_ignores_worker_count() {
        let cfg = small_cfg();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| generate_dataset(&cfg, 3, 8, 6, SearchMode::Auto, &SolverSettings::default()).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.records.len(), b.records.len());
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.scenario, y.scenario);
            assert_eq!(x.features, y.features);
            assert_eq!(x.sp1, y.sp1);
            assert_eq!(x.sp3, y.sp3);
        }
    }

    #[test]
    fn kfold_examples() {
        let folds = kfold_split(100, 10, 1).unwrap();
        assert_eq!(folds.len(), 10);
        let mut all: Vec<usize> = folds.iter().flat_map(|f| f.test.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        for f in &folds {
            assert_eq!(f.test.len(), 10);
            assert_eq!(f.train.len(), 90);
            assert!(f.test.iter().all(|t| !f.train.contains(t)));
        }
        assert_eq!(folds, kfold_split(100, 10, 1).unwrap());
        assert!(kfold_split(100, 1, 1).is_err());
    }

    #[test]
    fn chained_examples_embed_previous_stage() {
        let ds = generate_dataset(&small_cfg(), 2, 2, 6, SearchMode::Auto, &SolverSettings::default()).unwrap();
        let r = &ds.records[0];
        let sp3 = r.sp3_example();
        assert_eq!(sp3.sp2.labels, &r.sp2);
        assert_eq!(sp3.sp2.sp1.labels, &r.sp1);
        assert_eq!(sp3.sp2.sp1.features, &r.features[..]);
    }
}
