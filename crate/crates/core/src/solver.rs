//! Exact and heuristic solvers for the decomposed allocation problem.
//!
//! For a fixed decision vector the intra-slice shares (square-root rule per
//! resource/slice) and the inter-slice shares (square-root rule per AP) are
//! optimal in closed form, so the whole problem reduces to a search over the
//! decision vector. Under that optimal policy the system cost is
//!
//! ```text
//! C(δ) = Σ_{local} t_i + 2 [ Σ_a (Σ_{i∈O_a} √r_ia)² + Σ_{j,n} (Σ_{i∈O_jn} √T_ijn)² ]
//! ```
//!
//! and an offloaded device finishes in `√r_ia·Σ_{O_a}√r + √T_ijn·Σ_{O_jn}√T`.

use std::cmp::Ordering;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    self, assignment_sets, check_feasibility, AllocationPolicy, Decision, DecisionVector, Delay,
    ModelError, Scenario, Topology, QUEUE_MARGIN,
};

/// Default cap on the number of decision vectors the exhaustive search may visit.
pub const DEFAULT_EXHAUSTIVE_BUDGET: u64 = 2_000_000;

/// Default cap on branch-and-bound search nodes before giving up exactness.
pub const DEFAULT_NODE_BUDGET: u64 = 20_000_000;

/// Default largest device count handed to the subset program (work grows as 4^I).
pub const DEFAULT_DP_MAX_DEVICES: usize = 13;

/// Relative slack granted when the solver tests "offload no slower than local".
const SOLVER_LATENCY_TOL: f64 = 1e-12;

/// Relative slack on bound pruning; keeps equal-cost candidates alive for tie-breaking.
const PRUNE_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("exhaustive search needs {needed} evaluations, budget is {budget}")]
    BudgetExceeded { needed: f64, budget: u64 },
    #[error("scenario has no per-AP rates; derive them first")]
    MissingRates,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodTag {
    Exhaustive,
    BranchAndBound,
    SubsetDp,
    Greedy,
    Erap,
    Prap,
}

impl MethodTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            MethodTag::Exhaustive => "exhaustive",
            MethodTag::BranchAndBound => "branch_and_bound",
            MethodTag::SubsetDp => "subset_dp",
            MethodTag::Greedy => "greedy",
            MethodTag::Erap => "erap",
            MethodTag::Prap => "prap",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    Exhaustive,
    BranchAndBound,
    SubsetDp,
    Greedy,
    /// Exhaustive when it fits the budget, otherwise the subset program when the
    /// device count allows it, otherwise greedy.
    Auto,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    pub exhaustive_budget: u64,
    pub node_budget: u64,
    pub dp_max_devices: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            exhaustive_budget: DEFAULT_EXHAUSTIVE_BUDGET,
            node_budget: DEFAULT_NODE_BUDGET,
            dp_max_devices: DEFAULT_DP_MAX_DEVICES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub decision: DecisionVector,
    pub policy: AllocationPolicy,
    pub cost_s: f64,
    pub solver_wall_time_s: f64,
    pub method: MethodTag,
    /// True when the decision is a proven optimum of the search space.
    pub exact: bool,
    /// True when no device can offload at all and the all-local vector was returned.
    pub all_local_fallback: bool,
}

/// Flattened per-device constants used by the search.
#[derive(Clone, Debug)]
pub struct Instance {
    pub topo: Topology,
    pub local: Vec<f64>,
    pub r: Vec<Vec<f64>>,
    pub sqrt_r: Vec<Vec<f64>>,
    /// Service rate F_j^n / L_{i,n}, indexed [i][j][n].
    pub mu: Vec<Vec<Vec<f64>>>,
    pub alpha: Vec<f64>,
}

impl Instance {
    pub fn new(scenario: &Scenario) -> Result<Self, SolverError> {
        scenario.validate()?;
        if !scenario.has_rates() {
            return Err(SolverError::MissingRates);
        }
        let topo = scenario.topology();
        let mut r = Vec::new();
        let mut sqrt_r = Vec::new();
        let mut mu = Vec::new();
        for (i, d) in scenario.devices.iter().enumerate() {
            let ri: Vec<f64> = (0..topo.aps).map(|a| d.input_size_bits / scenario.rate(i, a)).collect();
            sqrt_r.push(ri.iter().map(|x| x.sqrt()).collect());
            r.push(ri);
            mu.push(
                scenario
                    .nodes
                    .iter()
                    .map(|node| {
                        (0..topo.slices)
                            .map(|n| node.capacity_cycles_per_s[n] / d.slice_instructions_cycles[n])
                            .collect()
                    })
                    .collect(),
            );
        }
        Ok(Instance {
            topo,
            local: (0..scenario.num_devices()).map(|i| model::device_local_latency(scenario, i)).collect(),
            r,
            sqrt_r,
            mu,
            alpha: scenario.devices.iter().map(|d| d.arrival_rate_per_s).collect(),
        })
    }

    pub fn devices(&self) -> usize {
        self.local.len()
    }

    /// Minimal execution time at node j in slice n under total arrivals λ.
    #[inline]
    fn exec(&self, i: usize, j: usize, n: usize, lambda: f64) -> Option<f64> {
        let headroom = self.mu[i][j][n] - lambda;
        (headroom >= QUEUE_MARGIN && headroom.is_finite()).then(|| 1.0 / headroom)
    }

    /// Cost of `classes` under the optimal policy, or None when infeasible.
    pub fn evaluate(&self, classes: &[usize]) -> Option<f64> {
        let t = &self.topo;
        let mut lambda = vec![0.0; t.nodes];
        let mut decoded = Vec::with_capacity(classes.len());
        for (i, &c) in classes.iter().enumerate() {
            let d = Decision::from_class(c, t)?;
            if let Decision::Offload { node, .. } = d {
                lambda[node] += self.alpha[i];
            }
            decoded.push(d);
        }
        let mut ap_sum = vec![0.0; t.aps];
        let mut node_sum = vec![0.0; t.nodes * t.slices];
        let mut sqrt_exec = vec![0.0; classes.len()];
        let mut local_total = 0.0;
        for (i, d) in decoded.iter().enumerate() {
            match *d {
                Decision::Local => local_total += self.local[i],
                Decision::Offload { ap, node, slice } => {
                    let ex = self.exec(i, node, slice, lambda[node])?;
                    sqrt_exec[i] = ex.sqrt();
                    ap_sum[ap] += self.sqrt_r[i][ap];
                    node_sum[node * t.slices + slice] += sqrt_exec[i];
                }
            }
        }
        for (i, d) in decoded.iter().enumerate() {
            if let Decision::Offload { ap, node, slice } = *d {
                let completion = self.sqrt_r[i][ap] * ap_sum[ap] + sqrt_exec[i] * node_sum[node * t.slices + slice];
                if completion > self.local[i] * (1.0 + SOLVER_LATENCY_TOL) {
                    return None;
                }
            }
        }
        let squares: f64 = ap_sum.iter().chain(node_sum.iter()).map(|s| s * s).sum();
        Some(local_total + 2.0 * squares)
    }

    /// Whether device `i` could offload somewhere if it were the only offloader.
    pub fn can_offload_alone(&self, i: usize) -> bool {
        let t = &self.topo;
        (1..t.num_classes()).any(|c| {
            let mut classes = vec![0; self.devices()];
            classes[i] = c;
            self.evaluate(&classes).is_some()
        })
    }
}

/// Total order used to pick among candidates: lower cost, then lexicographically smaller classes.
fn better(a: (f64, &[usize]), b: (f64, &[usize])) -> bool {
    match a.0.partial_cmp(&b.0) {
        Some(Ordering::Less) => true,
        Some(Ordering::Equal) => a.1 < b.1,
        _ => false,
    }
}

#[derive(Clone, Debug)]
struct Best {
    cost: f64,
    classes: Vec<usize>,
}

impl Best {
    fn offer(&mut self, cost: f64, classes: &[usize]) {
        if better((cost, classes), (self.cost, &self.classes)) {
            self.cost = cost;
            self.classes.clear();
            self.classes.extend_from_slice(classes);
        }
    }

    fn merge(self, other: Best) -> Best {
        if better((other.cost, &other.classes), (self.cost, &self.classes)) {
            other
        } else {
            self
        }
    }
}

/// Intra-slice shares for a fixed decision vector.
#[derive(Clone, Debug, PartialEq)]
pub struct IntraSlice {
    pub phi_radio: Vec<Vec<Vec<f64>>>,
    pub phi_compute: Vec<Vec<Vec<f64>>>,
    /// Per (resource column) optimal value (Σ√T)², radio columns first; 0 for empty columns.
    pub objective: Vec<f64>,
    /// Offloaded devices whose completion under (ω, φ) exceeds their local latency.
    pub slower_than_local: Vec<usize>,
}

/// Square-root share over one assigned set.
pub fn sqrt_shares(times: &[f64]) -> (Vec<f64>, f64) {
    let roots: Vec<f64> = times.iter().map(|t| t.sqrt()).collect();
    let total: f64 = roots.iter().sum();
    (roots.iter().map(|s| s / total).collect(), total * total)
}

/// Optimal intra-slice shares φ for fixed δ. ω only enters the latency check.
pub fn sp1_solve(scenario: &Scenario, decisions: &DecisionVector, omega: &[Vec<f64>]) -> Result<IntraSlice, ModelError> {
    decisions.validate(scenario)?;
    let topo = scenario.topology();
    let sets = assignment_sets(decisions, &topo);
    let lambda = model::node_arrivals(scenario, decisions);
    let mut policy = AllocationPolicy::zeros(scenario.num_devices(), &topo);
    let mut objective = vec![0.0; topo.num_resource_columns()];
    for n in 0..topo.slices {
        for a in 0..topo.aps {
            let members = &sets.ap_slice[a][n];
            if members.is_empty() {
                continue;
            }
            let times: Vec<f64> = members
                .iter()
                .map(|&i| scenario.devices[i].input_size_bits / scenario.rate(i, a))
                .collect();
            let (shares, value) = sqrt_shares(&times);
            for (&i, s) in members.iter().zip(shares) {
                policy.phi_radio[i][a][n] = s;
            }
            objective[topo.radio_column(a, n)] = value;
        }
        for j in 0..topo.nodes {
            let members = &sets.node_slice[j][n];
            if members.is_empty() {
                continue;
            }
            let times: Vec<Delay> = members
                .iter()
                .map(|&i| {
                    model::execution_time(
                        scenario.nodes[j].capacity_cycles_per_s[n],
                        scenario.devices[i].slice_instructions_cycles[n],
                        lambda[j],
                    )
                })
                .collect();
            // Unstable queues get no share; the feasibility check reports them.
            if times.iter().all(Delay::is_finite) {
                let finite: Vec<f64> = times.iter().map(Delay::as_f64).collect();
                let (shares, value) = sqrt_shares(&finite);
                for (&i, s) in members.iter().zip(shares) {
                    policy.phi_compute[i][j][n] = s;
                }
                objective[topo.compute_column(j, n)] = value;
            } else {
                objective[topo.compute_column(j, n)] = f64::INFINITY;
            }
        }
    }
    let mut slower_than_local = Vec::new();
    if omega.len() == topo.aps && omega.iter().all(|r| r.len() == topo.slices) {
        policy.omega = omega.to_vec();
        for i in 0..decisions.len() {
            if decisions.0[i].is_local() {
                continue;
            }
            let t = model::wd_cost(scenario, decisions, &policy, i).as_f64();
            if t > model::device_local_latency(scenario, i) * (1.0 + model::FEASIBILITY_TOL) {
                slower_than_local.push(i);
            }
        }
    }
    Ok(IntraSlice {
        phi_radio: policy.phi_radio,
        phi_compute: policy.phi_compute,
        objective,
        slower_than_local,
    })
}

/// Optimal inter-slice shares ω for fixed δ and φ: ω_a^n ∝ √c_n with c_n = Σ_{O_an} T/φ.
pub fn sp2_solve(scenario: &Scenario, decisions: &DecisionVector, intra: &IntraSlice) -> Result<Vec<Vec<f64>>, ModelError> {
    decisions.validate(scenario)?;
    let topo = scenario.topology();
    let sets = assignment_sets(decisions, &topo);
    let mut omega = vec![vec![0.0; topo.slices]; topo.aps];
    for (a, row) in omega.iter_mut().enumerate() {
        let c: Vec<f64> = (0..topo.slices)
            .map(|n| {
                sets.ap_slice[a][n]
                    .iter()
                    .map(|&i| {
                        let t = scenario.devices[i].input_size_bits / scenario.rate(i, a);
                        t / intra.phi_radio[i][a][n]
                    })
                    .sum()
            })
            .collect();
        let roots: Vec<f64> = c.iter().map(|x: &f64| x.sqrt()).collect();
        let total: f64 = roots.iter().sum();
        if total > 0.0 && total.is_finite() {
            for (w, s) in row.iter_mut().zip(roots) {
                *w = s / total;
            }
        }
    }
    Ok(omega)
}

/// One SP1 pass followed by SP2; the SP1 argmin does not depend on ω, so this is a fixed point.
pub fn optimal_policy(scenario: &Scenario, decisions: &DecisionVector) -> Result<AllocationPolicy, ModelError> {
    let intra = sp1_solve(scenario, decisions, &[])?;
    let omega = sp2_solve(scenario, decisions, &intra)?;
    Ok(AllocationPolicy {
        omega,
        phi_radio: intra.phi_radio,
        phi_compute: intra.phi_compute,
    })
}

/// Equal shares: ω = 1/N everywhere, φ = 1/|O_{e,n}| over each assigned set.
pub fn erap_policy(scenario: &Scenario, decisions: &DecisionVector) -> Result<AllocationPolicy, ModelError> {
    proportional_policy(scenario, decisions, |_, _| 1.0, |_, _| 1.0, true)
}

/// Demand-proportional shares: input size for radio, slice instructions for compute.
pub fn prap_policy(scenario: &Scenario, decisions: &DecisionVector) -> Result<AllocationPolicy, ModelError> {
    proportional_policy(
        scenario,
        decisions,
        |s, i| s.devices[i].input_size_bits,
        |s, (i, n)| s.devices[i].slice_instructions_cycles[n],
        false,
    )
}

fn normalize(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| w / total).collect()
}

fn proportional_policy(
    scenario: &Scenario,
    decisions: &DecisionVector,
    radio_weight: impl Fn(&Scenario, usize) -> f64,
    compute_weight: impl Fn(&Scenario, (usize, usize)) -> f64,
    uniform_omega: bool,
) -> Result<AllocationPolicy, ModelError> {
    decisions.validate(scenario)?;
    let topo = scenario.topology();
    let sets = assignment_sets(decisions, &topo);
    let mut p = AllocationPolicy::zeros(scenario.num_devices(), &topo);
    for a in 0..topo.aps {
        if uniform_omega {
            p.omega[a] = vec![1.0 / topo.slices as f64; topo.slices];
        } else {
            let demand: Vec<f64> = (0..topo.slices)
                .map(|n| sets.ap_slice[a][n].iter().map(|&i| radio_weight(scenario, i)).sum())
                .collect();
            if demand.iter().sum::<f64>() > 0.0 {
                p.omega[a] = normalize(&demand);
            }
        }
        for n in 0..topo.slices {
            let members = &sets.ap_slice[a][n];
            let w: Vec<f64> = members.iter().map(|&i| radio_weight(scenario, i)).collect();
            for (&i, s) in members.iter().zip(normalize(&w)) {
                p.phi_radio[i][a][n] = s;
            }
        }
    }
    for j in 0..topo.nodes {
        for n in 0..topo.slices {
            let members = &sets.node_slice[j][n];
            let w: Vec<f64> = members.iter().map(|&i| compute_weight(scenario, (i, n))).collect();
            for (&i, s) in members.iter().zip(normalize(&w)) {
                p.phi_compute[i][j][n] = s;
            }
        }
    }
    Ok(p)
}

/// System cost of δ under a given policy, or None when any constraint is violated.
pub fn policy_cost(scenario: &Scenario, decisions: &DecisionVector, policy: &AllocationPolicy) -> Option<f64> {
    let verdict = check_feasibility(scenario, decisions, policy).ok()?;
    if !verdict.is_feasible() {
        return None;
    }
    model::system_cost(scenario, decisions, policy).value()
}

/// Number of decision vectors an exhaustive search visits, as a float to survive overflow.
pub fn search_space_size(topo: &Topology, devices: usize) -> f64 {
    (topo.num_classes() as f64).powi(devices as i32)
}

/// Literal enumeration of every decision vector.
pub fn exhaustive_search(inst: &Instance, budget: u64) -> Result<Vec<usize>, SolverError> {
    let k = inst.topo.num_classes();
    let devices = inst.devices();
    let needed = search_space_size(&inst.topo, devices);
    if needed > budget as f64 {
        return Err(SolverError::BudgetExceeded { needed, budget });
    }
    let all_local = vec![0; devices];
    let seed = Best {
        cost: inst.evaluate(&all_local).expect("all-local is always feasible"),
        classes: all_local,
    };
    if devices == 0 {
        return Ok(seed.classes);
    }
    // Partition on the first device's class; each part walks the rest as an odometer.
    let best = (0..k)
        .into_par_iter()
        .map(|first| {
            let mut best = seed.clone();
            let mut classes = vec![0; devices];
            classes[0] = first;
            loop {
                if let Some(cost) = inst.evaluate(&classes) {
                    best.offer(cost, &classes);
                }
                let mut pos = devices - 1;
                loop {
                    if pos == 0 {
                        return best;
                    }
                    classes[pos] += 1;
                    if classes[pos] < k {
                        break;
                    }
                    classes[pos] = 0;
                    pos -= 1;
                }
            }
        })
        .reduce(|| seed.clone(), Best::merge);
    Ok(best.classes)
}

/// Best-response descent from all-local under an arbitrary evaluator.
///
/// Each round moves the single device whose best alternative gives the
/// largest decrease; ties go to the lowest (device, class).
pub fn greedy_search<F>(devices: usize, classes_per_device: usize, evaluate: F) -> Vec<usize>
where
    F: Fn(&[usize]) -> Option<f64> + Sync,
{
    let mut current = vec![0; devices];
    let mut current_cost = evaluate(&current).unwrap_or(f64::INFINITY);
    loop {
        let step = (0..devices)
            .into_par_iter()
            .filter_map(|i| {
                let mut trial = current.clone();
                let mut best: Option<(f64, usize, usize)> = None;
                for c in 0..classes_per_device {
                    if c == current[i] {
                        continue;
                    }
                    trial[i] = c;
                    if let Some(cost) = evaluate(&trial) {
                        if cost < current_cost && best.is_none_or(|b| cost < b.0) {
                            best = Some((cost, i, c));
                        }
                    }
                }
                best
            })
            .reduce_with(|a, b| match a.0.partial_cmp(&b.0) {
                Some(Ordering::Less) => a,
                Some(Ordering::Greater) => b,
                _ => {
                    if (a.1, a.2) <= (b.1, b.2) {
                        a
                    } else {
                        b
                    }
                }
            });
        match step {
            Some((cost, i, c)) => {
                current[i] = c;
                current_cost = cost;
            }
            None => return current,
        }
    }
}

/// Incremental search state: per-AP and per-(node, slice) square-root sums.
struct PartialState<'a> {
    inst: &'a Instance,
    classes: Vec<usize>,
    lambda: Vec<f64>,
}

impl<'a> PartialState<'a> {
    /// Cost of the assigned prefix plus per-AP / per-(node, slice) sums; None if already infeasible.
    fn summarize(&self, assigned: &[usize]) -> Option<(f64, Vec<f64>, Vec<f64>)> {
        let inst = self.inst;
        let t = &inst.topo;
        let mut ap_sum = vec![0.0; t.aps];
        let mut node_sum = vec![0.0; t.nodes * t.slices];
        let mut sqrt_exec = vec![0.0; inst.devices()];
        let mut local_total = 0.0;
        for &i in assigned {
            match Decision::from_class(self.classes[i], t)? {
                Decision::Local => local_total += inst.local[i],
                Decision::Offload { ap, node, slice } => {
                    let ex = inst.exec(i, node, slice, self.lambda[node])?;
                    sqrt_exec[i] = ex.sqrt();
                    ap_sum[ap] += inst.sqrt_r[i][ap];
                    node_sum[node * t.slices + slice] += sqrt_exec[i];
                }
            }
        }
        for &i in assigned {
            if let Some(Decision::Offload { ap, node, slice }) = Decision::from_class(self.classes[i], t) {
                let completion = inst.sqrt_r[i][ap] * ap_sum[ap] + sqrt_exec[i] * node_sum[node * t.slices + slice];
                if completion > inst.local[i] * (1.0 + SOLVER_LATENCY_TOL) {
                    return None;
                }
            }
        }
        let squares: f64 = ap_sum.iter().chain(node_sum.iter()).map(|s| s * s).sum();
        Some((local_total + 2.0 * squares, ap_sum, node_sum))
    }

    /// Lower bound on the cost device `u` adds for each of its classes, given current sums.
    fn marginals(&self, u: usize, ap_sum: &[f64], node_sum: &[f64], out: &mut Vec<f64>) {
        let inst = self.inst;
        let t = &inst.topo;
        out.clear();
        out.push(inst.local[u]);
        for n in 0..t.slices {
            for a in 0..t.aps {
                let radio = 2.0 * ap_sum[a] * inst.sqrt_r[u][a] + inst.r[u][a];
                for j in 0..t.nodes {
                    let m = match inst.exec(u, j, n, self.lambda[j] + inst.alpha[u]) {
                        Some(ex) => {
                            let s = node_sum[j * t.slices + n];
                            // Its own completion is already a lower bound on the final one.
                            if inst.sqrt_r[u][a] * (ap_sum[a] + inst.sqrt_r[u][a]) + ex + ex.sqrt() * s
                                > inst.local[u] * (1.0 + SOLVER_LATENCY_TOL)
                            {
                                f64::INFINITY
                            } else {
                                2.0 * (radio + 2.0 * s * ex.sqrt() + ex)
                            }
                        }
                        None => f64::INFINITY,
                    };
                    out.push(m);
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct BranchAndBoundOutcome {
    pub classes: Vec<usize>,
    pub nodes_visited: u64,
    /// False when the node budget ran out before the search space was closed.
    pub proven: bool,
}

/// Depth-first branch-and-bound over devices with a supermodular lower bound.
///
/// Adding a device never lowers any existing sum or queue delay, so the
/// marginal cost of a device only grows as others are placed; the sum over
/// unplaced devices of their cheapest current marginal is a valid bound.
/// Latency and stability violations are monotone as well and prune at once.
pub fn branch_and_bound(inst: &Instance, incumbent: &[usize], node_budget: u64) -> BranchAndBoundOutcome {
    let devices = inst.devices();
    let mut best = Best {
        cost: inst.evaluate(&vec![0; devices]).expect("all-local is always feasible"),
        classes: vec![0; devices],
    };
    if let Some(c) = inst.evaluate(incumbent) {
        best.offer(c, incumbent);
    }
    // Devices with the most to lose from staying local are branched first.
    let mut order: Vec<usize> = (0..devices).collect();
    order.sort_by(|&x, &y| inst.local[y].total_cmp(&inst.local[x]).then(x.cmp(&y)));
    let mut state = PartialState {
        inst,
        classes: vec![0; devices],
        lambda: vec![0.0; inst.topo.nodes],
    };
    let mut visited = 0u64;
    let mut exhausted = false;
    let mut scratch = Vec::new();
    bnb_visit(&mut state, &order, 0, &mut best, &mut visited, node_budget, &mut exhausted, &mut scratch);
    BranchAndBoundOutcome {
        classes: best.classes,
        nodes_visited: visited,
        proven: !exhausted,
    }
}

#[allow(clippy::too_many_arguments)]
fn bnb_visit(
    state: &mut PartialState<'_>,
    order: &[usize],
    depth: usize,
    best: &mut Best,
    visited: &mut u64,
    budget: u64,
    exhausted: &mut bool,
    scratch: &mut Vec<Vec<f64>>,
) {
    *visited += 1;
    if *visited > budget {
        *exhausted = true;
        return;
    }
    if depth == order.len() {
        if let Some(cost) = state.inst.evaluate(&state.classes) {
            best.offer(cost, &state.classes);
        }
        return;
    }
    let Some((partial, ap_sum, node_sum)) = state.summarize(&order[..depth]) else {
        return;
    };
    let rest = &order[depth..];
    if scratch.len() < rest.len() {
        scratch.resize(rest.len(), Vec::new());
    }
    let mut bound = partial;
    for (slot, &u) in rest.iter().enumerate() {
        state.marginals(u, &ap_sum, &node_sum, &mut scratch[slot]);
        bound += scratch[slot].iter().copied().fold(f64::INFINITY, f64::min);
    }
    if bound > best.cost * (1.0 + PRUNE_TOL) {
        return;
    }
    let u = rest[0];
    let own = std::mem::take(&mut scratch[0]);
    let own_min = own.iter().copied().fold(f64::INFINITY, f64::min);
    let mut children: Vec<(f64, usize)> = own
        .iter()
        .enumerate()
        .filter(|(_, m)| m.is_finite())
        .map(|(c, &m)| (bound - own_min + m, c))
        .collect();
    children.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    let topo = state.inst.topo;
    let mut child_scratch = Vec::new();
    for (child_bound, c) in children {
        if *exhausted {
            return;
        }
        if child_bound > best.cost * (1.0 + PRUNE_TOL) {
            break;
        }
        state.classes[u] = c;
        let node = match Decision::from_class(c, &topo) {
            Some(Decision::Offload { node, .. }) => Some(node),
            _ => None,
        };
        if let Some(j) = node {
            state.lambda[j] += state.inst.alpha[u];
        }
        bnb_visit(state, order, depth + 1, best, visited, budget, exhausted, &mut child_scratch);
        if let Some(j) = node {
            state.lambda[j] -= state.inst.alpha[u];
        }
        state.classes[u] = 0;
    }
}

/// For every mask, min over G ⊆ mask of `a[G] + b[mask ^ G]`, with the chosen G.
fn subset_min_plus(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<u32>) {
    let at = |mask: usize| {
        let mut best = (f64::INFINITY, 0u32);
        let mut g = mask;
        loop {
            let v = a[g] + b[mask ^ g];
            if v < best.0 {
                best = (v, g as u32);
            }
            if g == 0 {
                return best;
            }
            g = (g - 1) & mask;
        }
    };
    if a.len() >= 1 << 10 {
        (0..a.len()).into_par_iter().map(at).unzip()
    } else {
        (0..a.len()).map(at).unzip()
    }
}

/// Members of a bit mask, lowest first.
fn members(mask: usize) -> Vec<usize> {
    (0..usize::BITS as usize).filter(|&b| mask >> b & 1 == 1).collect()
}

/// Square of the per-subset sum of `w`, for every subset of `w`'s index range.
fn squared_subset_sums(w: &[f64]) -> Vec<f64> {
    let mut sums = vec![0.0; 1 << w.len()];
    for h in 1..sums.len() {
        let low = h.trailing_zeros() as usize;
        sums[h] = sums[h & (h - 1)] + w[low];
    }
    sums.iter().map(|s| s * s).collect()
}

/// Best split of the devices in `group` over the slices of node `j`.
///
/// Returns the compute cost Σ_n (Σ √T)² under the group's own arrival rate and,
/// on request, the slice chosen for each member.
fn node_split(inst: &Instance, j: usize, group: usize, with_choice: bool) -> (f64, Vec<(usize, usize)>) {
    if group == 0 {
        return (0.0, Vec::new());
    }
    let who = members(group);
    let lambda: f64 = who.iter().map(|&i| inst.alpha[i]).sum();
    let slices = inst.topo.slices;
    let per_slice: Vec<Vec<f64>> = (0..slices)
        .map(|n| {
            let w: Vec<f64> = who
                .iter()
                .map(|&i| inst.exec(i, j, n, lambda).map_or(f64::INFINITY, f64::sqrt))
                .collect();
            squared_subset_sums(&w)
        })
        .collect();
    let full = (1usize << who.len()) - 1;
    let mut value = per_slice[0].clone();
    let mut choices = Vec::new();
    for table in &per_slice[1..] {
        let (v, c) = subset_min_plus(table, &value);
        value = v;
        if with_choice {
            choices.push(c);
        }
    }
    let mut assignment = Vec::new();
    if with_choice && value[full].is_finite() {
        let mut rest = full;
        for n in (1..slices).rev() {
            let g = choices[n - 1][rest] as usize;
            assignment.extend(members(g).into_iter().map(|t| (who[t], n)));
            rest ^= g;
        }
        assignment.extend(members(rest).into_iter().map(|t| (who[t], 0)));
        assignment.sort_unstable();
    }
    (value[full], assignment)
}

/// Exact minimum of the system cost by dynamic programming over device subsets.
///
/// For a fixed set O of offloading devices the optimal-policy cost splits into
/// an AP partition problem and a node/slice partition problem, each solved by
/// min-plus convolution over subsets. The "no slower than local" condition is
/// left out of the program: at any optimum, moving an offloaded device back to
/// local saves at least twice its completion time, so every offloaded device
/// finishes within half its local latency anyway. Returns None only if the
/// reconstructed vector fails evaluation, which would indicate a bug.
pub fn subset_dp(inst: &Instance) -> Option<Vec<usize>> {
    let n = inst.devices();
    let t = inst.topo;
    let size = 1usize << n;
    let full = size - 1;

    let radio: Vec<Vec<f64>> = (0..t.aps)
        .map(|a| squared_subset_sums(&(0..n).map(|i| inst.sqrt_r[i][a]).collect::<Vec<_>>()))
        .collect();
    let mut radio_best = radio[0].clone();
    let mut radio_choice = Vec::new();
    for table in &radio[1..] {
        let (v, c) = subset_min_plus(table, &radio_best);
        radio_best = v;
        radio_choice.push(c);
    }

    let node_tables: Vec<Vec<f64>> = (0..t.nodes)
        .map(|j| (0..size).into_par_iter().map(|g| node_split(inst, j, g, false).0).collect())
        .collect();
    let mut compute_best = node_tables[0].clone();
    let mut compute_choice = Vec::new();
    for table in &node_tables[1..] {
        let (v, c) = subset_min_plus(table, &compute_best);
        compute_best = v;
        compute_choice.push(c);
    }

    let local_total: f64 = inst.local.iter().sum();
    let mut offloaded_local = vec![0.0; size];
    for o in 1..size {
        let low = o.trailing_zeros() as usize;
        offloaded_local[o] = offloaded_local[o & (o - 1)] + inst.local[low];
    }
    let mut best = (f64::INFINITY, 0usize);
    for o in 0..size {
        let v = local_total - offloaded_local[o] + 2.0 * (radio_best[o] + compute_best[o]);
        if v < best.0 {
            best = (v, o);
        }
    }
    let offload = best.1;

    let mut ap_of = vec![0usize; n];
    let mut rest = offload;
    for a in (1..t.aps).rev() {
        let g = radio_choice[a - 1][rest] as usize;
        for i in members(g) {
            ap_of[i] = a;
        }
        rest ^= g;
    }
    let mut classes = vec![0usize; n];
    let mut rest = offload;
    for j in (0..t.nodes).rev() {
        let g = if j == 0 { rest } else { compute_choice[j - 1][rest] as usize };
        for (i, slice) in node_split(inst, j, g, true).1 {
            classes[i] = Decision::Offload { ap: ap_of[i], node: j, slice }.class_index(&t);
        }
        rest ^= g;
    }
    debug_assert_eq!(full & offload, offload);
    inst.evaluate(&classes).map(|_| classes)
}

fn finish(
    scenario: &Scenario,
    inst: &Instance,
    classes: &[usize],
    method: MethodTag,
    exact: bool,
    started: Instant,
) -> Result<SolveResult, SolverError> {
    let decision = DecisionVector::from_classes(classes, &inst.topo).expect("classes come from the topology");
    let policy = optimal_policy(scenario, &decision)?;
    Ok(package(scenario, inst, decision, policy, method, exact, started))
}

fn package(
    scenario: &Scenario,
    inst: &Instance,
    decision: DecisionVector,
    policy: AllocationPolicy,
    method: MethodTag,
    exact: bool,
    started: Instant,
) -> SolveResult {
    let cost_s = model::system_cost(scenario, &decision, &policy).as_f64();
    SolveResult {
        all_local_fallback: !(0..inst.devices()).any(|i| inst.can_offload_alone(i)),
        decision,
        policy,
        cost_s,
        solver_wall_time_s: started.elapsed().as_secs_f64(),
        method,
        exact,
    }
}

/// Solves the joint problem for one scenario under the optimal allocation policy.
pub fn sp3_solve(scenario: &Scenario, mode: SearchMode, settings: &SolverSettings) -> Result<SolveResult, SolverError> {
    let started = Instant::now();
    let inst = Instance::new(scenario)?;
    let k = inst.topo.num_classes();
    let fits = search_space_size(&inst.topo, inst.devices()) <= settings.exhaustive_budget as f64;
    let greedy = || greedy_search(inst.devices(), k, |c| inst.evaluate(c));
    match mode {
        SearchMode::Exhaustive => {
            let classes = exhaustive_search(&inst, settings.exhaustive_budget)?;
            finish(scenario, &inst, &classes, MethodTag::Exhaustive, true, started)
        }
        SearchMode::Greedy => finish(scenario, &inst, &greedy(), MethodTag::Greedy, false, started),
        SearchMode::Auto if fits => {
            let classes = exhaustive_search(&inst, settings.exhaustive_budget)?;
            finish(scenario, &inst, &classes, MethodTag::Exhaustive, true, started)
        }
        SearchMode::SubsetDp | SearchMode::Auto if inst.devices() <= settings.dp_max_devices => {
            match subset_dp(&inst) {
                Some(classes) => finish(scenario, &inst, &classes, MethodTag::SubsetDp, true, started),
                None => finish(scenario, &inst, &greedy(), MethodTag::Greedy, false, started),
            }
        }
        SearchMode::SubsetDp | SearchMode::Auto => {
            finish(scenario, &inst, &greedy(), MethodTag::Greedy, false, started)
        }
        SearchMode::BranchAndBound => {
            let seed = greedy();
            let out = branch_and_bound(&inst, &seed, settings.node_budget);
            finish(scenario, &inst, &out.classes, MethodTag::BranchAndBound, out.proven, started)
        }
    }
}

/// Fixed-rule baseline: greedy descent over δ with the policy dictated by the rule.
pub fn baseline_solve(scenario: &Scenario, method: MethodTag) -> Result<SolveResult, SolverError> {
    let started = Instant::now();
    let inst = Instance::new(scenario)?;
    let rule = match method {
        MethodTag::Erap => erap_policy,
        MethodTag::Prap => prap_policy,
        _ => panic!("baseline_solve expects erap or prap"),
    };
    let topo = inst.topo;
    let evaluate = |classes: &[usize]| {
        let d = DecisionVector::from_classes(classes, &topo)?;
        let p = rule(scenario, &d).ok()?;
        policy_cost(scenario, &d, &p)
    };
    let classes = greedy_search(inst.devices(), topo.num_classes(), evaluate);
    let decision = DecisionVector::from_classes(&classes, &topo).expect("classes come from the topology");
    let policy = rule(scenario, &decision)?;
    Ok(package(scenario, &inst, decision, policy, method, false, started))
}
