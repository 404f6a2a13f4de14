//! Slice-enabled COIN/MEC system model.
//!
//! Rates, queueing delays, per-device and per-slice costs, and the feasibility
//! check of the joint allocation problem. Everything here is a pure function of
//! an immutable [`Scenario`]; units are seconds, bits/s and cycles/s throughout.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Add;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum service-rate headroom (tasks/s) required for a queue to count as stable.
pub const QUEUE_MARGIN: f64 = 1e-6;

/// Relative/absolute slack allowed on the sum and latency constraints.
pub const FEASIBILITY_TOL: f64 = 1e-9;

/// -174 dBm/Hz expressed in W/Hz.
pub const THERMAL_NOISE_W_PER_HZ: f64 = 3.981_071_705_534_969e-21;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("device {device} sits exactly on access point {ap}")]
    DegeneratePlacement { device: usize, ap: usize },
    #[error("physical rate of device {device} at access point {ap} is not positive ({rate})")]
    NonPositiveRate { device: usize, ap: usize, rate: f64 },
    #[error("decision vector has {got} entries, scenario has {expected} devices")]
    DecisionLength { expected: usize, got: usize },
    #[error("decision for device {device} references a resource outside the topology")]
    DecisionOutOfRange { device: usize },
    #[error("allocation policy shape does not match the scenario: {0}")]
    PolicyShape(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Coin,
    Mec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccessPoint {
    pub bandwidth_hz: f64,
    pub position_m: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeNode {
    pub kind: NodeKind,
    /// Capacity F_j^n granted to each slice, indexed by slice.
    pub capacity_cycles_per_s: Vec<f64>,
}

/// A wireless device and the task it generates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Device {
    pub input_size_bits: f64,
    pub local_instructions_cycles: f64,
    /// Instructions needed when executed inside each slice.
    pub slice_instructions_cycles: Vec<f64>,
    pub arrival_rate_per_s: f64,
    pub local_capacity_cycles_per_s: f64,
    pub transmit_power_w: f64,
    pub position_m: [f64; 2],
    /// Achievable physical rate towards each access point; filled by [`derive_rates`].
    #[serde(default)]
    pub physical_rate_bps: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub slices: usize,
    pub access_points: Vec<AccessPoint>,
    pub nodes: Vec<EdgeNode>,
    pub devices: Vec<Device>,
    pub noise_psd_w_per_hz: f64,
    pub path_loss_exponent: f64,
    pub seed: u64,
}

/// Shape of the decision space: slices, access points and edge nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Topology {
    pub slices: usize,
    pub aps: usize,
    pub nodes: usize,
}

impl Topology {
    /// |Δ_i| = 1 + A·|N̄|·N.
    pub fn num_classes(&self) -> usize {
        1 + self.aps * self.nodes * self.slices
    }

    /// Number of (resource, slice) columns, radio resources first.
    pub fn num_resource_columns(&self) -> usize {
        (self.aps + self.nodes) * self.slices
    }

    pub fn radio_column(&self, ap: usize, slice: usize) -> usize {
        ap * self.slices + slice
    }

    pub fn compute_column(&self, node: usize, slice: usize) -> usize {
        (self.aps + node) * self.slices + slice
    }
}

impl Scenario {
    pub fn topology(&self) -> Topology {
        Topology {
            slices: self.slices,
            aps: self.access_points.len(),
            nodes: self.nodes.len(),
        }
    }

    pub fn num_devices(&self) -> usize {
        self.devices.len()
    }

    pub fn count_nodes(&self, kind: NodeKind) -> usize {
        self.nodes.iter().filter(|n| n.kind == kind).count()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidScenario(msg));
        if self.slices == 0 {
            return bad("at least one slice is required".into());
        }
        if self.access_points.is_empty() {
            return bad("at least one access point is required".into());
        }
        if self.nodes.is_empty() {
            return bad("at least one edge node is required".into());
        }
        if self.devices.is_empty() {
            return bad("at least one device is required".into());
        }
        if !(self.noise_psd_w_per_hz > 0.0 && self.noise_psd_w_per_hz.is_finite()) {
            return bad("noise PSD must be positive".into());
        }
        if !(self.path_loss_exponent.is_finite() && self.path_loss_exponent > 0.0) {
            return bad("path loss exponent must be positive".into());
        }
        for (a, ap) in self.access_points.iter().enumerate() {
            if !positive(ap.bandwidth_hz) {
                return bad(format!("access point {a} bandwidth must be positive"));
            }
        }
        for (j, node) in self.nodes.iter().enumerate() {
            if node.capacity_cycles_per_s.len() != self.slices {
                return bad(format!("node {j} must carry one capacity per slice"));
            }
            if !node.capacity_cycles_per_s.iter().all(|&f| positive(f)) {
                return bad(format!("node {j} capacities must be positive"));
            }
        }
        for (i, wd) in self.devices.iter().enumerate() {
            let ok = positive(wd.input_size_bits)
                && positive(wd.local_instructions_cycles)
                && positive(wd.arrival_rate_per_s)
                && positive(wd.local_capacity_cycles_per_s)
                && wd.transmit_power_w.is_finite()
                && wd.transmit_power_w >= 0.0
                && wd.slice_instructions_cycles.len() == self.slices
                && wd.slice_instructions_cycles.iter().all(|&l| positive(l));
            if !ok {
                return bad(format!("device {i} has a non-positive or missing task parameter"));
            }
            if !wd.physical_rate_bps.is_empty() {
                if wd.physical_rate_bps.len() != self.access_points.len() {
                    return bad(format!("device {i} must carry one rate per access point"));
                }
                for (a, &rate) in wd.physical_rate_bps.iter().enumerate() {
                    if !positive(rate) {
                        return Err(ModelError::NonPositiveRate { device: i, ap: a, rate });
                    }
                }
            }
        }
        Ok(())
    }

    /// True once every device carries a positive rate towards every AP.
    pub fn has_rates(&self) -> bool {
        self.devices
            .iter()
            .all(|d| d.physical_rate_bps.len() == self.access_points.len())
    }

    pub fn rate(&self, device: usize, ap: usize) -> f64 {
        self.devices[device].physical_rate_bps[ap]
    }

    /// Keeps the first `n` devices (used for nested size sweeps).
    pub fn truncated_devices(&self, n: usize) -> Scenario {
        let mut s = self.clone();
        s.devices.truncate(n);
        s
    }

    /// Keeps the listed nodes, in the given order.
    pub fn with_nodes(&self, keep: &[usize]) -> Scenario {
        let mut s = self.clone();
        s.nodes = keep.iter().map(|&j| self.nodes[j].clone()).collect();
        s
    }
}

fn positive(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

/// Fills R_{i,a} = B_a log2(1 + P d^{-γ} / (N0 B_a)) for every device/AP pair.
pub fn derive_rates(scenario: &Scenario) -> Result<Scenario, ModelError> {
    let mut out = scenario.clone();
    for (i, wd) in out.devices.iter_mut().enumerate() {
        let mut rates = Vec::with_capacity(scenario.access_points.len());
        for (a, ap) in scenario.access_points.iter().enumerate() {
            let dx = wd.position_m[0] - ap.position_m[0];
            let dy = wd.position_m[1] - ap.position_m[1];
            let distance = (dx * dx + dy * dy).sqrt();
            if distance == 0.0 {
                return Err(ModelError::DegeneratePlacement { device: i, ap: a });
            }
            let rate = physical_rate(
                ap.bandwidth_hz,
                wd.transmit_power_w,
                distance,
                scenario.path_loss_exponent,
                scenario.noise_psd_w_per_hz,
            );
            if !positive(rate) {
                return Err(ModelError::NonPositiveRate { device: i, ap: a, rate });
            }
            rates.push(rate);
        }
        wd.physical_rate_bps = rates;
    }
    out.validate()?;
    Ok(out)
}

/// Received SNR of a link: P d^{-γ} / (N0 B).
pub fn snr(bandwidth_hz: f64, power_w: f64, distance_m: f64, exponent: f64, noise_psd: f64) -> f64 {
    power_w * distance_m.powf(-exponent) / (noise_psd * bandwidth_hz)
}

pub fn physical_rate(bandwidth_hz: f64, power_w: f64, distance_m: f64, exponent: f64, noise_psd: f64) -> f64 {
    bandwidth_hz * (1.0 + snr(bandwidth_hz, power_w, distance_m, exponent, noise_psd)).log2()
}

/// A latency that is either finite or marks an infeasible path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delay {
    Finite(f64),
    Infeasible,
}

impl Delay {
    pub fn is_finite(&self) -> bool {
        matches!(self, Delay::Finite(_))
    }

    pub fn value(&self) -> Option<f64> {
        match *self {
            Delay::Finite(v) => Some(v),
            Delay::Infeasible => None,
        }
    }

    /// Infeasible maps to +∞, convenient for ranking.
    pub fn as_f64(&self) -> f64 {
        self.value().unwrap_or(f64::INFINITY)
    }

    /// Scales the delay by 1/share; a zero or negative share is infeasible.
    pub fn over_share(self, share: f64) -> Delay {
        match self {
            Delay::Finite(v) if share > 0.0 && share.is_finite() => Delay::Finite(v / share),
            _ => Delay::Infeasible,
        }
    }
}

impl Add for Delay {
    type Output = Delay;
    fn add(self, rhs: Delay) -> Delay {
        match (self, rhs) {
            (Delay::Finite(a), Delay::Finite(b)) => Delay::Finite(a + b),
            _ => Delay::Infeasible,
        }
    }
}

impl std::iter::Sum for Delay {
    fn sum<I: Iterator<Item = Delay>>(iter: I) -> Delay {
        iter.fold(Delay::Finite(0.0), |acc, d| acc + d)
    }
}

impl fmt::Display for Delay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Delay::Finite(v) => write!(f, "{v:.6} s"),
            Delay::Infeasible => f.write_str("infeasible"),
        }
    }
}

/// Per-device choice δ_i.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decision {
    Local,
    Offload { ap: usize, node: usize, slice: usize },
}

impl Decision {
    /// Class 0 is Local; offload classes follow lexicographic (slice, ap, node) order.
    pub fn class_index(&self, topo: &Topology) -> usize {
        match *self {
            Decision::Local => 0,
            Decision::Offload { ap, node, slice } => {
                1 + slice * topo.aps * topo.nodes + ap * topo.nodes + node
            }
        }
    }

    pub fn from_class(class: usize, topo: &Topology) -> Option<Decision> {
        if class == 0 {
            return Some(Decision::Local);
        }
        if class >= topo.num_classes() {
            return None;
        }
        let c = class - 1;
        let per_slice = topo.aps * topo.nodes;
        Some(Decision::Offload {
            slice: c / per_slice,
            ap: (c % per_slice) / topo.nodes,
            node: c % topo.nodes,
        })
    }

    pub fn is_local(&self) -> bool {
        matches!(self, Decision::Local)
    }

    fn in_range(&self, topo: &Topology) -> bool {
        match *self {
            Decision::Local => true,
            Decision::Offload { ap, node, slice } => {
                ap < topo.aps && node < topo.nodes && slice < topo.slices
            }
        }
    }
}

/// The decision vector δ, one entry per device.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DecisionVector(pub Vec<Decision>);

impl DecisionVector {
    pub fn all_local(devices: usize) -> Self {
        DecisionVector(vec![Decision::Local; devices])
    }

    pub fn from_classes(classes: &[usize], topo: &Topology) -> Option<Self> {
        classes
            .iter()
            .map(|&c| Decision::from_class(c, topo))
            .collect::<Option<Vec<_>>>()
            .map(DecisionVector)
    }

    pub fn classes(&self, topo: &Topology) -> Vec<usize> {
        self.0.iter().map(|d| d.class_index(topo)).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self, scenario: &Scenario) -> Result<(), ModelError> {
        if self.0.len() != scenario.num_devices() {
            return Err(ModelError::DecisionLength {
                expected: scenario.num_devices(),
                got: self.0.len(),
            });
        }
        let topo = scenario.topology();
        match self.0.iter().position(|d| !d.in_range(&topo)) {
            Some(device) => Err(ModelError::DecisionOutOfRange { device }),
            None => Ok(()),
        }
    }
}

/// Derived index sets O_{a,n}, O_{j,n}, O_a, O_j and O_l of a decision vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssignmentSets {
    pub ap_slice: Vec<Vec<Vec<usize>>>,
    pub node_slice: Vec<Vec<Vec<usize>>>,
    pub local: Vec<usize>,
}

impl AssignmentSets {
    pub fn ap(&self, a: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self.ap_slice[a].iter().flatten().copied().collect();
        v.sort_unstable();
        v
    }

    pub fn node(&self, j: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self.node_slice[j].iter().flatten().copied().collect();
        v.sort_unstable();
        v
    }
}

pub fn assignment_sets(decisions: &DecisionVector, topo: &Topology) -> AssignmentSets {
    let mut ap_slice = vec![vec![Vec::new(); topo.slices]; topo.aps];
    let mut node_slice = vec![vec![Vec::new(); topo.slices]; topo.nodes];
    let mut local = Vec::new();
    for (i, d) in decisions.0.iter().enumerate() {
        match *d {
            Decision::Local => local.push(i),
            Decision::Offload { ap, node, slice } => {
                ap_slice[ap][slice].push(i);
                node_slice[node][slice].push(i);
            }
        }
    }
    AssignmentSets { ap_slice, node_slice, local }
}

/// Inter-slice (ω) and intra-slice (φ) provisioning coefficients.
///
/// `omega[a][n]`, `phi_radio[i][a][n]`, `phi_compute[i][j][n]`. Entries of φ are
/// only meaningful on the path a device actually uses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocationPolicy {
    pub omega: Vec<Vec<f64>>,
    pub phi_radio: Vec<Vec<Vec<f64>>>,
    pub phi_compute: Vec<Vec<Vec<f64>>>,
}

impl AllocationPolicy {
    pub fn zeros(devices: usize, topo: &Topology) -> Self {
        AllocationPolicy {
            omega: vec![vec![0.0; topo.slices]; topo.aps],
            phi_radio: vec![vec![vec![0.0; topo.slices]; topo.aps]; devices],
            phi_compute: vec![vec![vec![0.0; topo.slices]; topo.nodes]; devices],
        }
    }

    pub fn check_shape(&self, devices: usize, topo: &Topology) -> Result<(), ModelError> {
        let err = |m: &str| Err(ModelError::PolicyShape(m.to_string()));
        if self.omega.len() != topo.aps || self.omega.iter().any(|r| r.len() != topo.slices) {
            return err("omega must be APs x slices");
        }
        if self.phi_radio.len() != devices
            || self.phi_radio.iter().any(|m| {
                m.len() != topo.aps || m.iter().any(|r| r.len() != topo.slices)
            })
        {
            return err("phi_radio must be devices x APs x slices");
        }
        if self.phi_compute.len() != devices
            || self.phi_compute.iter().any(|m| {
                m.len() != topo.nodes || m.iter().any(|r| r.len() != topo.slices)
            })
        {
            return err("phi_compute must be devices x nodes x slices");
        }
        Ok(())
    }
}

/// ω φ R.
pub fn uplink_rate(omega: f64, phi: f64, physical_rate: f64) -> f64 {
    omega * phi * physical_rate
}

/// S / U; a zero uplink is infeasible.
pub fn transmission_time(size_bits: f64, uplink_bps: f64) -> Delay {
    if uplink_bps > 0.0 && uplink_bps.is_finite() {
        Delay::Finite(size_bits / uplink_bps)
    } else {
        Delay::Infeasible
    }
}

/// M/M/1 sojourn time 1/(F/L − λ); infeasible unless F/L − λ ≥ [`QUEUE_MARGIN`].
pub fn execution_time(capacity: f64, instructions: f64, total_arrivals: f64) -> Delay {
    let headroom = capacity / instructions - total_arrivals;
    if headroom >= QUEUE_MARGIN && headroom.is_finite() {
        Delay::Finite(1.0 / headroom)
    } else {
        Delay::Infeasible
    }
}

/// L / F^l.
pub fn local_latency(instructions: f64, local_capacity: f64) -> f64 {
    instructions / local_capacity
}

pub fn device_local_latency(scenario: &Scenario, i: usize) -> f64 {
    let d = &scenario.devices[i];
    local_latency(d.local_instructions_cycles, d.local_capacity_cycles_per_s)
}

/// total arrival rate at each node, Σ_i δ_ij α_i, summed in device order.
pub fn node_arrivals(scenario: &Scenario, decisions: &DecisionVector) -> Vec<f64> {
    let mut lambda = vec![0.0; scenario.nodes.len()];
    for (i, d) in decisions.0.iter().enumerate() {
        if let Decision::Offload { node, .. } = *d {
            lambda[node] += scenario.devices[i].arrival_rate_per_s;
        }
    }
    lambda
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Resource {
    Ap(usize),
    Node(usize),
}

/// the time device `i` would need on `resource` in `slice` if it had
/// the whole resource to itself.
pub fn minimal_time(
    scenario: &Scenario,
    decisions: &DecisionVector,
    i: usize,
    resource: Resource,
    slice: usize,
) -> Delay {
    let wd = &scenario.devices[i];
    match resource {
        Resource::Ap(a) => transmission_time(wd.input_size_bits, scenario.rate(i, a)),
        Resource::Node(j) => {
            let lambda = node_arrivals(scenario, decisions)[j];
            execution_time(
                scenario.nodes[j].capacity_cycles_per_s[slice],
                wd.slice_instructions_cycles[slice],
                lambda,
            )
        }
    }
}

fn minimal_exec(scenario: &Scenario, i: usize, j: usize, slice: usize, lambda: &[f64]) -> Delay {
    execution_time(
        scenario.nodes[j].capacity_cycles_per_s[slice],
        scenario.devices[i].slice_instructions_cycles[slice],
        lambda[j],
    )
}

fn minimal_tx(scenario: &Scenario, i: usize, a: usize) -> Delay {
    transmission_time(scenario.devices[i].input_size_bits, scenario.rate(i, a))
}

fn offload_completion(
    scenario: &Scenario,
    policy: &AllocationPolicy,
    lambda: &[f64],
    i: usize,
    ap: usize,
    node: usize,
    slice: usize,
) -> Delay {
    let tx = minimal_tx(scenario, i, ap).over_share(policy.omega[ap][slice] * policy.phi_radio[i][ap][slice]);
    let ex = minimal_exec(scenario, i, node, slice, lambda).over_share(policy.phi_compute[i][node][slice]);
    tx + ex
}

/// completion time of device `i`.
pub fn wd_cost(scenario: &Scenario, decisions: &DecisionVector, policy: &AllocationPolicy, i: usize) -> Delay {
    let lambda = node_arrivals(scenario, decisions);
    wd_cost_with(scenario, decisions, policy, &lambda, i)
}

fn wd_cost_with(
    scenario: &Scenario,
    decisions: &DecisionVector,
    policy: &AllocationPolicy,
    lambda: &[f64],
    i: usize,
) -> Delay {
    match decisions.0[i] {
        Decision::Local => Delay::Finite(device_local_latency(scenario, i)),
        Decision::Offload { ap, node, slice } => {
            offload_completion(scenario, policy, lambda, i, ap, node, slice)
        }
    }
}

/// transmission plus execution time of every device offloading in `slice`.
pub fn slice_cost(scenario: &Scenario, decisions: &DecisionVector, policy: &AllocationPolicy, slice: usize) -> Delay {
    let lambda = node_arrivals(scenario, decisions);
    slice_cost_with(scenario, decisions, policy, &lambda, slice)
}

fn slice_cost_with(
    scenario: &Scenario,
    decisions: &DecisionVector,
    policy: &AllocationPolicy,
    lambda: &[f64],
    slice: usize,
) -> Delay {
    let sets = assignment_sets(decisions, &scenario.topology());
    let radio: Delay = (0..scenario.access_points.len())
        .flat_map(|a| sets.ap_slice[a][slice].iter().map(move |&i| (a, i)))
        .map(|(a, i)| minimal_tx(scenario, i, a).over_share(policy.omega[a][slice] * policy.phi_radio[i][a][slice]))
        .sum();
    let compute: Delay = (0..scenario.nodes.len())
        .flat_map(|j| sets.node_slice[j][slice].iter().map(move |&i| (j, i)))
        .map(|(j, i)| minimal_exec(scenario, i, j, slice, lambda).over_share(policy.phi_compute[i][j][slice]))
        .sum();
    radio + compute
}

/// Σ_i C_i + Σ_n C_(n). Offloaded devices appear in both sums.
pub fn system_cost(scenario: &Scenario, decisions: &DecisionVector, policy: &AllocationPolicy) -> Delay {
    let lambda = node_arrivals(scenario, decisions);
    let devices: Delay = (0..decisions.len())
        .map(|i| wd_cost_with(scenario, decisions, policy, &lambda, i))
        .sum();
    let slices: Delay = (0..scenario.slices)
        .map(|n| slice_cost_with(scenario, decisions, policy, &lambda, n))
        .sum();
    devices + slices
}

/// Constraint labels of the joint problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Constraint {
    /// one decision per device
    SingleDecision,
    /// offloading is not slower than local execution
    NoSlowerThanLocal,
    /// queue stability at every used node
    QueueStability,
    /// Σ_n ω ≤ 1 per AP
    SliceShareBudget,
    /// Σ_i φ ≤ 1 per (resource, slice)
    UserShareBudget,
    /// ω ≥ 0
    SliceShareNonNegative,
    /// φ ≥ 0
    UserShareNonNegative,
}

impl Constraint {
    pub fn label(&self) -> &'static str {
        match self {
            Constraint::SingleDecision => "single_decision",
            Constraint::NoSlowerThanLocal => "not_slower_than_local",
            Constraint::QueueStability => "queue_stability",
            Constraint::SliceShareBudget => "slice_share_budget",
            Constraint::UserShareBudget => "user_share_budget",
            Constraint::SliceShareNonNegative => "slice_share_nonnegative",
            Constraint::UserShareNonNegative => "user_share_nonnegative",
        }
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Feasibility {
    pub violations: BTreeSet<Constraint>,
}

impl Feasibility {
    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn labels(&self) -> Vec<&'static str> {
        self.violations.iter().map(|c| c.label()).collect()
    }
}

/// Returns the exact set of violated constraints; empty means feasible.
pub fn check_feasibility(
    scenario: &Scenario,
    decisions: &DecisionVector,
    policy: &AllocationPolicy,
) -> Result<Feasibility, ModelError> {
    let mut out = Feasibility::default();
    if decisions.validate(scenario).is_err() {
        out.violations.insert(Constraint::SingleDecision);
        return Ok(out);
    }
    let topo = scenario.topology();
    policy.check_shape(scenario.num_devices(), &topo)?;
    let lambda = node_arrivals(scenario, decisions);
    let sets = assignment_sets(decisions, &topo);

    for (i, d) in decisions.0.iter().enumerate() {
        if let Decision::Offload { ap, node, slice } = *d {
            let exec = minimal_exec(scenario, i, node, slice, &lambda);
            if !exec.is_finite() {
                out.violations.insert(Constraint::QueueStability);
                continue;
            }
            let completion = offload_completion(scenario, policy, &lambda, i, ap, node, slice);
            let local = device_local_latency(scenario, i);
            match completion {
                Delay::Finite(t) if t <= local * (1.0 + FEASIBILITY_TOL) => {}
                _ => {
                    out.violations.insert(Constraint::NoSlowerThanLocal);
                }
            }
        }
    }

    for row in &policy.omega {
        if row.iter().any(|&w| !(w >= 0.0)) {
            out.violations.insert(Constraint::SliceShareNonNegative);
        }
        if row.iter().sum::<f64>() > 1.0 + FEASIBILITY_TOL {
            out.violations.insert(Constraint::SliceShareBudget);
        }
    }
    let phi_negative = policy
        .phi_radio
        .iter()
        .chain(policy.phi_compute.iter())
        .flatten()
        .flatten()
        .any(|&p| !(p >= 0.0));
    if phi_negative {
        out.violations.insert(Constraint::UserShareNonNegative);
    }
    for n in 0..topo.slices {
        for a in 0..topo.aps {
            let total: f64 = sets.ap_slice[a][n].iter().map(|&i| policy.phi_radio[i][a][n]).sum();
            if total > 1.0 + FEASIBILITY_TOL {
                out.violations.insert(Constraint::UserShareBudget);
            }
        }
        for j in 0..topo.nodes {
            let total: f64 = sets.node_slice[j][n].iter().map(|&i| policy.phi_compute[i][j][n]).sum();
            if total > 1.0 + FEASIBILITY_TOL {
                out.violations.insert(Constraint::UserShareBudget);
            }
        }
    }
    Ok(out)
}
