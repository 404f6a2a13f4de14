//! Scenario-level inference: features in, decision and shares out.

use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;

use super::net::{forward, hierarchical_decision, Example};
use super::{Checkpoint, NeuralError};
use crate::dataset::{build_features, Sp1Labels, Sp2Labels};
use crate::model::{AllocationPolicy, Decision, DecisionVector, Scenario};

#[derive(Clone, Debug)]
pub struct Inference {
    /// Joint-head argmax, the decision used downstream.
    pub decision: DecisionVector,
    /// Binary-gated factored decision, kept for agreement diagnostics.
    pub hierarchical: DecisionVector,
    pub offload_probability: Vec<f64>,
    /// Shares decoded with the allocation heads conditioned on `decision`.
    pub policy: AllocationPolicy,
    pub wall_time_s: f64,
}

/// Decides offloading, then decodes shares conditioned on that decision.
pub fn infer(scenario: &Scenario, ck: &Checkpoint) -> Result<Inference, NeuralError> {
    let start = Instant::now();
    let p = &ck.params;
    let topo = scenario.topology();
    if topo != p.hyper.topology {
        return Err(NeuralError::Shape(format!("checkpoint topology {:?}, scenario {:?}", p.hyper.topology, topo)));
    }
    let rows = build_features(scenario)?;
    let width = p.hyper.features;
    let flat: Vec<f64> = rows.iter().flat_map(|r| ck.standardizer.apply_row(r)).collect();
    let x = Array2::from_shape_vec((rows.len(), width), flat).map_err(|e| NeuralError::Shape(e.to_string()))?;

    let first = forward(p, &[Example { x: x.view(), decisions: None, targets: None }]);
    let classes = first.sp3.joint_argmax();
    let decision = DecisionVector::from_classes(&classes, &topo).ok_or_else(|| NeuralError::Shape("class index out of range".into()))?;
    let hierarchical = DecisionVector((0..rows.len()).map(|i| hierarchical_decision(&first.sp3, i)).collect());
    let offload_probability = first.sp3.offload.to_vec();

    let second = forward(p, &[Example { x: x.view(), decisions: Some(&decision.0), targets: None }]);
    let mut policy = AllocationPolicy::zeros(rows.len(), &topo);
    for (i, d) in decision.0.iter().enumerate() {
        if let Decision::Offload { ap, node, slice } = *d {
            policy.phi_radio[i][ap][slice] = second.sp1_users[[i, topo.radio_column(ap, slice)]];
            policy.phi_compute[i][node][slice] = second.sp1_users[[i, topo.compute_column(node, slice)]];
        }
    }
    for a in 0..topo.aps {
        for n in 0..topo.slices {
            policy.omega[a][n] = second.sp2[0][[a, 1 + n]];
        }
    }
    Ok(Inference { decision, hierarchical, offload_probability, policy, wall_time_s: start.elapsed().as_secs_f64() })
}

/// Allocation heads conditioned on a given decision, laid out like the labels.
pub fn predict_allocations(
    features: &[Vec<f64>],
    decision: &DecisionVector,
    ck: &Checkpoint,
) -> Result<(Sp1Labels, Sp2Labels), NeuralError> {
    let p = &ck.params;
    let width = p.hyper.features;
    if features.iter().any(|r| r.len() != width) || decision.0.len() != features.len() {
        return Err(NeuralError::Shape("features and decision disagree with the checkpoint".into()));
    }
    let flat: Vec<f64> = features.iter().flat_map(|r| ck.standardizer.apply_row(r)).collect();
    let x = Array2::from_shape_vec((features.len(), width), flat).map_err(|e| NeuralError::Shape(e.to_string()))?;
    let t = forward(p, &[Example { x: x.view(), decisions: Some(&decision.0), targets: None }]);
    let sp1 = Sp1Labels {
        users: t.sp1_users.rows().into_iter().map(|r| r.to_vec()).collect(),
        slack: t.sp1_slack.row(0).to_vec(),
    };
    let dist = &t.sp2[0];
    let sp2 = Sp2Labels {
        shares: dist.rows().into_iter().map(|r| r.iter().skip(1).copied().collect()).collect(),
        slack: dist.column(0).to_vec(),
    };
    Ok((sp1, sp2))
}

/// Independent per-scenario inference; results keep input order.
pub fn infer_batch(scenarios: &[Scenario], ck: &Checkpoint) -> Result<Vec<Inference>, NeuralError> {
    scenarios.par_iter().map(|s| infer(s, ck)).collect()
}
