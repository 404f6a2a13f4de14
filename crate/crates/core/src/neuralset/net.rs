//! Forward pass, losses and analytic gradients.
//!
//! Internally every batch is a stack of the real rows of several scenarios;
//! padded rows never enter the arithmetic, so they contribute nothing to any
//! pooled quantity or gradient. The public `encode`/`decode_*` functions take
//! padded matrices and scatter results back to the padded layout.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};

use super::{ModelParams, NeuralError};
use crate::dataset::{PaddedBatch, Sp1Labels, Sp2Labels, Sp3Labels};
use crate::model::{Decision, Topology};

/// Stand-in for −∞ on masked logits; exp underflows to exactly zero.
pub const MASKED_LOGIT: f64 = -1e9;

/// Smooth ramp ln(1 + eˣ), evaluated without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of `logits` in place; returns log-sum-exp.
fn softmax_in_place(logits: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        total += *l;
    }
    for l in logits.iter_mut() {
        *l /= total;
    }
    max + total.ln()
}

fn argmax_first(v: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in v.into_iter().enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

/// Supervision for one scenario.
#[derive(Clone, Copy, Debug)]
pub struct Targets<'a> {
    pub sp1: &'a Sp1Labels,
    pub sp2: &'a Sp2Labels,
    pub sp3: &'a Sp3Labels,
}

/// One scenario: standardized real rows, the decision the allocation heads
/// condition on (None: every row is eligible everywhere) and optional targets.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub x: ArrayView2<'a, f64>,
    pub decisions: Option<&'a [Decision]>,
    pub targets: Option<Targets<'a>>,
}

impl Example<'_> {
    fn rows(&self) -> usize {
        self.x.nrows()
    }
}

/// Encoder intermediates over the stacked rows of a batch.
#[derive(Clone, Debug)]
struct EncoderCache {
    x: Array2<f64>,
    a1: Array2<f64>,
    h1: Array2<f64>,
    a2: Array2<f64>,
    context: Array2<f64>,
    u: Array2<f64>,
    b1: Array2<f64>,
    g1: Array2<f64>,
    z: Array2<f64>,
}

/// Offloading head outputs for the stacked rows.
#[derive(Clone, Debug)]
pub struct Sp3Output {
    pub joint: Array2<f64>,
    pub offload: Array1<f64>,
    pub slice: Array2<f64>,
    pub ap: Array2<f64>,
    pub node: Array2<f64>,
}

impl Sp3Output {
    /// Joint argmax, lowest class on ties.
    pub fn joint_argmax(&self) -> Vec<usize> {
        self.joint.rows().into_iter().map(|r| argmax_first(r.iter().copied())).collect()
    }
}

/// Offload when the binary head says so, along the factored argmaxes; else local.
pub fn hierarchical_decision(out: &Sp3Output, row: usize) -> Decision {
    if out.offload[row] >= 0.5 {
        Decision::Offload {
            slice: argmax_first(out.slice.row(row).iter().copied()),
            ap: argmax_first(out.ap.row(row).iter().copied()),
            node: argmax_first(out.node.row(row).iter().copied()),
        }
    } else {
        Decision::Local
    }
}

/// Everything the backward pass needs.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    segments: Vec<(usize, usize)>,
    enc: EncoderCache,
    /// Per-row user probabilities for every resource column.
    pub sp1_users: Array2<f64>,
    /// Per-example slack probability of every resource column.
    pub sp1_slack: Array2<f64>,
    sp2_logits: Array2<f64>,
    /// Per-example [A × (1 + N)] distribution, slack first.
    pub sp2: Vec<Array2<f64>>,
    pub sp3: Sp3Output,
}

impl ForwardTrace {
    pub fn z(&self) -> &Array2<f64> {
        &self.enc.z
    }

    pub fn segments(&self) -> &[(usize, usize)] {
        &self.segments
    }
}

fn stack(batch: &[Example<'_>]) -> (Array2<f64>, Vec<(usize, usize)>) {
    let mut segments = Vec::with_capacity(batch.len());
    let mut start = 0;
    for ex in batch {
        segments.push((start, ex.rows()));
        start += ex.rows();
    }
    let views: Vec<ArrayView2<f64>> = batch.iter().map(|e| e.x).collect();
    let width = batch.first().map_or(0, |e| e.x.ncols());
    let x = if views.is_empty() {
        Array2::zeros((0, width))
    } else {
        concatenate(Axis(0), &views).expect("equal widths")
    };
    (x, segments)
}

fn add_bias(mut m: Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    m += b;
    m
}

fn encode_rows(p: &ModelParams, x: Array2<f64>, segments: &[(usize, usize)]) -> EncoderCache {
    let a1 = add_bias(x.dot(&p.phi1_w), &p.phi1_b);
    let h1 = a1.mapv(softplus);
    let a2 = add_bias(h1.dot(&p.phi2_w), &p.phi2_b);
    let h = a2.mapv(softplus);
    let hidden = h.ncols();
    let mut context = Array2::zeros((segments.len(), hidden));
    let mut broadcast = Array2::zeros((h.nrows(), hidden));
    for (s, &(start, len)) in segments.iter().enumerate() {
        let mut c = h.slice(s![start..start + len, ..]).sum_axis(Axis(0));
        c /= len as f64 + p.hyper.eps;
        broadcast.slice_mut(s![start..start + len, ..]).assign(&c.broadcast((len, hidden)).expect("row"));
        context.row_mut(s).assign(&c);
    }
    let u = concatenate(Axis(1), &[h.view(), broadcast.view()]).expect("equal heights");
    let b1 = add_bias(u.dot(&p.rho1_w), &p.rho1_b);
    let g1 = b1.mapv(softplus);
    let z = add_bias(g1.dot(&p.rho2_w), &p.rho2_b) + x.dot(&p.skip_w);
    EncoderCache { x, a1, h1, a2, context, u, b1, g1, z }
}

fn column_eligible(decisions: Option<&[Decision]>, row: usize, column: usize, topo: &Topology) -> bool {
    match decisions {
        None => true,
        Some(d) => match d[row] {
            Decision::Local => false,
            Decision::Offload { ap, node, slice } => {
                column == topo.radio_column(ap, slice) || column == topo.compute_column(node, slice)
            }
        },
    }
}

fn slice_member(decisions: Option<&[Decision]>, row: usize, ap: usize, slice: usize) -> bool {
    match decisions {
        None => true,
        Some(d) => d[row] == Decision::Offload { ap, node: node_of(d[row]), slice },
    }
}

fn node_of(d: Decision) -> usize {
    match d {
        Decision::Offload { node, .. } => node,
        Decision::Local => usize::MAX,
    }
}

fn sp1_forward(p: &ModelParams, z: &Array2<f64>, batch: &[Example<'_>], segments: &[(usize, usize)]) -> (Array2<f64>, Array2<f64>) {
    let topo = p.hyper.topology;
    let cols = p.hyper.resource_columns();
    let logits = add_bias(z.dot(&p.sp1_w), &p.sp1_b);
    let mut users = Array2::zeros(logits.raw_dim());
    let mut slack = Array2::zeros((batch.len(), cols));
    let mut buf = Vec::new();
    for (s, (ex, &(start, len))) in batch.iter().zip(segments).enumerate() {
        for e in 0..cols {
            buf.clear();
            buf.push(p.sp1_s[e]);
            for i in 0..len {
                buf.push(if column_eligible(ex.decisions, i, e, &topo) { logits[[start + i, e]] } else { MASKED_LOGIT });
            }
            softmax_in_place(&mut buf);
            slack[[s, e]] = buf[0];
            for i in 0..len {
                users[[start + i, e]] = buf[1 + i];
            }
        }
    }
    (users, slack)
}

fn sp2_forward(p: &ModelParams, z: &Array2<f64>, batch: &[Example<'_>], segments: &[(usize, usize)]) -> (Array2<f64>, Vec<Array2<f64>>) {
    let topo = p.hyper.topology;
    let logits = add_bias(z.dot(&p.sp2_w), &p.sp2_b);
    let mut out = Vec::with_capacity(batch.len());
    let mut buf = Vec::new();
    for (ex, &(start, len)) in batch.iter().zip(segments) {
        let mut dist = Array2::zeros((topo.aps, topo.slices + 1));
        for a in 0..topo.aps {
            let mut block = vec![p.sp2_s[a]];
            for n in 0..topo.slices {
                buf.clear();
                buf.extend((0..len).filter(|&i| slice_member(ex.decisions, i, a, n)).map(|i| logits[[start + i, a]]));
                block.push(if buf.is_empty() { MASKED_LOGIT } else { softmax_in_place(&mut buf) });
            }
            softmax_in_place(&mut block);
            dist.row_mut(a).assign(&Array1::from(block));
        }
        out.push(dist);
    }
    (logits, out)
}

fn row_softmax(mut m: Array2<f64>) -> Array2<f64> {
    for mut row in m.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("contiguous row"));
    }
    m
}

fn sp3_forward(p: &ModelParams, z: &Array2<f64>) -> Sp3Output {
    Sp3Output {
        joint: row_softmax(add_bias(z.dot(&p.joint_w), &p.joint_b)),
        offload: (z.dot(&p.bin_w) + p.bin_b[0]).mapv(sigmoid),
        slice: row_softmax(add_bias(z.dot(&p.slice_w), &p.slice_b)),
        ap: row_softmax(add_bias(z.dot(&p.ap_w), &p.ap_b)),
        node: row_softmax(add_bias(z.dot(&p.node_w), &p.node_b)),
    }
}

/// Full forward pass over a batch of scenarios.
pub fn forward(p: &ModelParams, batch: &[Example<'_>]) -> ForwardTrace {
    let (x, segments) = stack(batch);
    let enc = encode_rows(p, x, &segments);
    let (sp1_users, sp1_slack) = sp1_forward(p, &enc.z, batch, &segments);
    let (sp2_logits, sp2) = sp2_forward(p, &enc.z, batch, &segments);
    let sp3 = sp3_forward(p, &enc.z);
    ForwardTrace { segments, enc, sp1_users, sp1_slack, sp2_logits, sp2, sp3 }
}

/// Per-head losses, averaged over the scenarios of the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub sp1: f64,
    pub sp2: f64,
    pub joint: f64,
    pub binary: f64,
    pub factored: f64,
}

impl LossParts {
    pub fn sp3(&self, lambda_bin: f64, lambda_fac: f64) -> f64 {
        self.joint + lambda_bin * self.binary + lambda_fac * self.factored
    }

    pub fn total(&self, lambda_bin: f64, lambda_fac: f64) -> f64 {
        self.sp1 + self.sp2 + self.sp3(lambda_bin, lambda_fac)
    }
}

fn xent(y: f64, p: f64) -> f64 {
    if y > 0.0 {
        -y * p.ln()
    } else {
        0.0
    }
}

/// Cross-entropy losses of a traced batch; examples without targets contribute zero.
pub fn loss(trace: &ForwardTrace, batch: &[Example<'_>]) -> LossParts {
    let mut parts = LossParts::default();
    let scale = 1.0 / batch.len().max(1) as f64;
    for (s, (ex, &(start, len))) in batch.iter().zip(&trace.segments).enumerate() {
        let Some(t) = ex.targets else { continue };
        for e in 0..trace.sp1_slack.ncols() {
            parts.sp1 += scale * xent(t.sp1.slack[e], trace.sp1_slack[[s, e]]);
            for i in 0..len {
                parts.sp1 += scale * xent(t.sp1.users[i][e], trace.sp1_users[[start + i, e]]);
            }
        }
        let dist = &trace.sp2[s];
        for (a, row) in t.sp2.shares.iter().enumerate() {
            parts.sp2 += scale * xent(t.sp2.slack[a], dist[[a, 0]]);
            for (n, &y) in row.iter().enumerate() {
                parts.sp2 += scale * xent(y, dist[[a, 1 + n]]);
            }
        }
        let out = &trace.sp3;
        for i in 0..len {
            let r = start + i;
            parts.joint -= scale * out.joint[[r, t.sp3.joint[i]]].ln();
            let q = out.offload[r];
            parts.binary -= scale * if t.sp3.offload[i] { q.ln() } else { (1.0 - q).ln() };
            if let Some(f) = t.sp3.factored[i] {
                parts.factored -= scale
                    * (out.slice[[r, f.slice]].ln() + out.ap[[r, f.ap]].ln() + out.node[[r, f.node]].ln());
            }
        }
    }
    parts
}

fn outer_accumulate(grad: &mut Array2<f64>, input: &Array2<f64>, delta: &Array2<f64>) {
    *grad += &input.t().dot(delta);
}

/// Analytic gradient of the total loss with respect to every parameter block.
pub fn backward(p: &ModelParams, trace: &ForwardTrace, batch: &[Example<'_>]) -> Result<ModelParams, NeuralError> {
    let hyper = p.hyper;
    let topo = hyper.topology;
    let mut g = p.zeros_like();
    let scale = 1.0 / batch.len().max(1) as f64;
    let z = &trace.enc.z;
    let rows = z.nrows();

    let cols = hyper.resource_columns();
    let mut d_sp1 = Array2::zeros((rows, cols));
    let mut d_sp2 = Array2::zeros((rows, topo.aps));
    let mut d_joint = Array2::zeros((rows, hyper.classes()));
    let mut d_bin = Array1::zeros(rows);
    let mut d_slice = Array2::zeros((rows, topo.slices));
    let mut d_ap = Array2::zeros((rows, topo.aps));
    let mut d_node = Array2::zeros((rows, topo.nodes));
    let mut buf = Vec::new();

    for (s, (ex, &(start, len))) in batch.iter().zip(&trace.segments).enumerate() {
        let Some(t) = ex.targets else { continue };
        for e in 0..cols {
            let label_mass: f64 = t.sp1.slack[e] + (0..len).map(|i| t.sp1.users[i][e]).sum::<f64>();
            g.sp1_s[e] += scale * (trace.sp1_slack[[s, e]] * label_mass - t.sp1.slack[e]);
            for i in 0..len {
                if column_eligible(ex.decisions, i, e, &topo) {
                    d_sp1[[start + i, e]] = scale * (trace.sp1_users[[start + i, e]] * label_mass - t.sp1.users[i][e]);
                }
            }
        }
        let dist = &trace.sp2[s];
        for a in 0..topo.aps {
            let label_mass = t.sp2.slack[a] + t.sp2.shares[a].iter().sum::<f64>();
            g.sp2_s[a] += scale * (dist[[a, 0]] * label_mass - t.sp2.slack[a]);
            for n in 0..topo.slices {
                let d_slice_logit = scale * (dist[[a, 1 + n]] * label_mass - t.sp2.shares[a][n]);
                let members: Vec<usize> = (0..len).filter(|&i| slice_member(ex.decisions, i, a, n)).collect();
                buf.clear();
                buf.extend(members.iter().map(|&i| trace.sp2_logits[[start + i, a]]));
                if buf.is_empty() {
                    continue;
                }
                softmax_in_place(&mut buf);
                for (&i, w) in members.iter().zip(&buf) {
                    d_sp2[[start + i, a]] += d_slice_logit * w;
                }
            }
        }
        let out = &trace.sp3;
        for i in 0..len {
            let r = start + i;
            for k in 0..hyper.classes() {
                d_joint[[r, k]] = scale * out.joint[[r, k]];
            }
            d_joint[[r, t.sp3.joint[i]]] -= scale;
            let y = if t.sp3.offload[i] { 1.0 } else { 0.0 };
            d_bin[r] = scale * hyper.lambda_bin * (out.offload[r] - y);
            if let Some(f) = t.sp3.factored[i] {
                let w = scale * hyper.lambda_fac;
                for (dst, src, label) in [
                    (&mut d_slice, &out.slice, f.slice),
                    (&mut d_ap, &out.ap, f.ap),
                    (&mut d_node, &out.node, f.node),
                ] {
                    for k in 0..src.ncols() {
                        dst[[r, k]] = w * src[[r, k]];
                    }
                    dst[[r, label]] -= w;
                }
            }
        }
    }

    let mut dz = d_sp1.dot(&p.sp1_w.t());
    outer_accumulate(&mut g.sp1_w, z, &d_sp1);
    g.sp1_b += &d_sp1.sum_axis(Axis(0));
    dz += &d_sp2.dot(&p.sp2_w.t());
    outer_accumulate(&mut g.sp2_w, z, &d_sp2);
    g.sp2_b += &d_sp2.sum_axis(Axis(0));
    dz += &d_joint.dot(&p.joint_w.t());
    outer_accumulate(&mut g.joint_w, z, &d_joint);
    g.joint_b += &d_joint.sum_axis(Axis(0));
    for r in 0..rows {
        dz.row_mut(r).scaled_add(d_bin[r], &p.bin_w);
    }
    g.bin_w += &z.t().dot(&d_bin);
    g.bin_b[0] += d_bin.sum();
    for (dw, db, w, d) in [
        (&mut g.slice_w, &mut g.slice_b, &p.slice_w, &d_slice),
        (&mut g.ap_w, &mut g.ap_b, &p.ap_w, &d_ap),
        (&mut g.node_w, &mut g.node_b, &p.node_w, &d_node),
    ] {
        dz += &d.dot(&w.t());
        outer_accumulate(dw, z, d);
        *db += &d.sum_axis(Axis(0));
    }

    encoder_backward(p, &trace.enc, &trace.segments, &dz, &mut g);
    for (name, block) in g.blocks() {
        if !block.iter().all(|x| x.is_finite()) {
            return Err(NeuralError::NonFiniteGradient(name.to_string()));
        }
    }
    Ok(g)
}

fn encoder_backward(p: &ModelParams, c: &EncoderCache, segments: &[(usize, usize)], dz: &Array2<f64>, g: &mut ModelParams) {
    let hidden = p.hyper.hidden;
    outer_accumulate(&mut g.skip_w, &c.x, dz);
    outer_accumulate(&mut g.rho2_w, &c.g1, dz);
    g.rho2_b += &dz.sum_axis(Axis(0));
    let d_b1 = dz.dot(&p.rho2_w.t()) * c.b1.mapv(sigmoid);
    outer_accumulate(&mut g.rho1_w, &c.u, &d_b1);
    g.rho1_b += &d_b1.sum_axis(Axis(0));
    let d_u = d_b1.dot(&p.rho1_w.t());
    let mut d_h = d_u.slice(s![.., ..hidden]).to_owned();
    for &(start, len) in segments {
        let mut d_c = d_u.slice(s![start..start + len, hidden..]).sum_axis(Axis(0));
        d_c /= len as f64 + p.hyper.eps;
        d_h.slice_mut(s![start..start + len, ..]).zip_mut_with(&d_c.broadcast((len, hidden)).expect("row"), |a, b| *a += b);
    }
    let d_a2 = d_h * c.a2.mapv(sigmoid);
    outer_accumulate(&mut g.phi2_w, &c.h1, &d_a2);
    g.phi2_b += &d_a2.sum_axis(Axis(0));
    let d_a1 = d_a2.dot(&p.phi2_w.t()) * c.a1.mapv(sigmoid);
    outer_accumulate(&mut g.phi1_w, &c.x, &d_a1);
    g.phi1_b += &d_a1.sum_axis(Axis(0));
}

fn real_rows(mask: &[f64]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &m)| m > 0.0).map(|(i, _)| i).collect()
}

fn gather(m: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    m.select(Axis(0), rows)
}

/// Encoder output on the padded layout; padded rows of Z are zero.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub z: Array2<f64>,
    pub context: Array1<f64>,
    /// The mask selected no rows; the context is the zero vector.
    pub degenerate: bool,
}

pub fn encode(batch: &PaddedBatch, p: &ModelParams) -> Encoded {
    let rows = real_rows(&batch.mask);
    let x = gather(&batch.xbar, &rows);
    let cache = encode_rows(p, x, &[(0, rows.len())]);
    let mut z = Array2::zeros((batch.capacity(), p.hyper.embed));
    for (k, &r) in rows.iter().enumerate() {
        z.row_mut(r).assign(&cache.z.row(k));
    }
    Encoded { z, context: cache.context.row(0).to_owned(), degenerate: rows.is_empty() }
}

fn real_decisions(decisions: Option<&[Decision]>, rows: &[usize]) -> Option<Vec<Decision>> {
    decisions.map(|d| rows.iter().map(|&r| d[r]).collect())
}

/// SP1 distribution on the padded layout: row 0 is slack, row 1 + i is device i.
pub fn decode_sp1(z: &Array2<f64>, mask: &[f64], decisions: Option<&[Decision]>, p: &ModelParams) -> Array2<f64> {
    let rows = real_rows(mask);
    let zr = gather(z, &rows);
    let d = real_decisions(decisions, &rows);
    let ex = Example { x: zr.view(), decisions: d.as_deref(), targets: None };
    let (users, slack) = sp1_forward(p, &zr, &[ex], &[(0, rows.len())]);
    let mut out = Array2::zeros((mask.len() + 1, p.hyper.resource_columns()));
    out.row_mut(0).assign(&slack.row(0));
    for (k, &r) in rows.iter().enumerate() {
        out.row_mut(1 + r).assign(&users.row(k));
    }
    out
}

/// SP2 distribution per AP: column 0 is slack, column 1 + n is slice n.
pub fn decode_sp2(z: &Array2<f64>, mask: &[f64], decisions: Option<&[Decision]>, p: &ModelParams) -> Array2<f64> {
    let rows = real_rows(mask);
    let zr = gather(z, &rows);
    let d = real_decisions(decisions, &rows);
    let ex = Example { x: zr.view(), decisions: d.as_deref(), targets: None };
    sp2_forward(p, &zr, &[ex], &[(0, rows.len())]).1.remove(0)
}

/// SP3 heads on the padded layout; padded rows are left at zero.
pub fn decode_sp3(z: &Array2<f64>, mask: &[f64], p: &ModelParams) -> Sp3Output {
    let rows = real_rows(mask);
    let real = sp3_forward(p, &gather(z, &rows));
    let cap = mask.len();
    let t = p.hyper.topology;
    let mut out = Sp3Output {
        joint: Array2::zeros((cap, p.hyper.classes())),
        offload: Array1::zeros(cap),
        slice: Array2::zeros((cap, t.slices)),
        ap: Array2::zeros((cap, t.aps)),
        node: Array2::zeros((cap, t.nodes)),
    };
    for (k, &r) in rows.iter().enumerate() {
        out.joint.row_mut(r).assign(&real.joint.row(k));
        out.offload[r] = real.offload[k];
        out.slice.row_mut(r).assign(&real.slice.row(k));
        out.ap.row_mut(r).assign(&real.ap.row(k));
        out.node.row_mut(r).assign(&real.node.row(k));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{pad_and_mask, FactoredLabel};
    use crate::neuralset::Hyper;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelParams {
        ModelParams::init(Hyper::for_topology(Topology { slices: 2, aps: 2, nodes: 2 }, 5, 4), 1)
    }

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, f: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..f).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect()
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) == 1.0);
    }

    #[test]
    fn single_device_context_is_its_hidden_vector() {
        let p = tiny();
        let x = Array2::from_shape_vec((1, p.hyper.features), vec![0.3; p.hyper.features]).unwrap();
        let c = encode_rows(&p, x, &[(0, 1)]);
        for (a, b) in c.context.row(0).iter().zip(c.u.slice(s![0, ..p.hyper.hidden])) {
            assert!((a - b).abs() <= 1e-7 * b.abs());
        }
    }

    #[test]
    fn identical_devices_get_identical_embeddings() {
        let p = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rows = random_rows(&mut rng, 3, p.hyper.features);
        rows[2] = rows[0].clone();
        let enc = encode(&pad_and_mask(&rows, 5).unwrap(), &p);
        assert_eq!(enc.z.row(0), enc.z.row(2));
        assert!(enc.z.row(4).iter().all(|&v| v == 0.0));
        assert!(!enc.degenerate);
    }

    #[test]
    fn sp1_symmetric_logits_split_evenly_with_slack() {
        let mut p = tiny();
        p.sp1_w.fill(0.0);
        p.sp1_b.fill(0.0);
        p.sp1_s.fill(0.0);
        let z = Array2::zeros((4, p.hyper.embed));
        let out = decode_sp1(&z, &[1.0, 1.0, 0.0, 0.0], None, &p);
        for e in 0..out.ncols() {
            for r in 0..3 {
                assert!((out[[r, e]] - 1.0 / 3.0).abs() < 1e-15);
            }
            assert_eq!(out[[3, e]], 0.0);
            assert_eq!(out[[4, e]], 0.0);
        }
        let one = decode_sp1(&z, &[0.0, 1.0, 0.0, 0.0], None, &p);
        assert!((one[[0, 0]] - 0.5).abs() < 1e-15 && (one[[2, 0]] - 0.5).abs() < 1e-15);
        p.sp1_s.fill(20.0);
        let out = decode_sp1(&z, &[1.0, 1.0, 0.0, 0.0], None, &p);
        for e in 0..out.ncols() {
            assert!(1.0 - out[[0, e]] < 1e-8);
        }
    }

    #[test]
    fn sp2_symmetric_logits_give_quarter_shares() {
        let mut p = ModelParams::init(Hyper::for_topology(Topology { slices: 3, aps: 1, nodes: 1 }, 4, 3), 0);
        p.sp2_w.fill(0.0);
        p.sp2_b.fill(0.0);
        p.sp2_s.fill(0.0);
        let z = Array2::zeros((2, 3));
        let d = [
            Decision::Offload { ap: 0, node: 0, slice: 0 },
            Decision::Offload { ap: 0, node: 0, slice: 1 },
        ];
        let none = decode_sp2(&z, &[1.0, 0.0], None, &p);
        assert!(none.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let two = decode_sp2(&z, &[1.0, 1.0], Some(&d), &p);
        assert!((two[[0, 0]] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(two[[0, 3]], 0.0);
    }

    #[test]
    fn uniform_joint_logits_pick_local() {
        let mut p = tiny();
        p.joint_w.fill(0.0);
        p.joint_b.fill(0.0);
        let z = Array2::zeros((2, p.hyper.embed));
        let out = decode_sp3(&z, &[1.0, 1.0], &p);
        assert_eq!(out.joint_argmax(), vec![0, 0]);
    }

    #[test]
    fn hierarchical_rule_follows_factored_heads() {
        let out = Sp3Output {
            joint: Array2::zeros((1, 9)),
            offload: Array1::from(vec![0.99]),
            slice: Array2::from_shape_vec((1, 2), vec![0.1, 0.9]).unwrap(),
            ap: Array2::from_shape_vec((1, 2), vec![0.8, 0.2]).unwrap(),
            node: Array2::from_shape_vec((1, 2), vec![0.3, 0.7]).unwrap(),
        };
        assert_eq!(hierarchical_decision(&out, 0), Decision::Offload { slice: 1, ap: 0, node: 1 });
    }

    fn labelled_batch(p: &ModelParams, seed: u64) -> (Vec<Array2<f64>>, Vec<Vec<Decision>>, Vec<(Sp1Labels, Sp2Labels, Sp3Labels)>) {
        let t = p.hyper.topology;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut ds = Vec::new();
        let mut ls = Vec::new();
        for _ in 0..3 {
            let n = rng.gen_range(1..5);
            xs.push(Array2::from_shape_fn((n, p.hyper.features), |_| rng.gen_range(-1.5..1.5)));
            let d: Vec<Decision> = (0..n).map(|_| Decision::from_class(rng.gen_range(0..t.num_classes()), &t).unwrap()).collect();
            let cols = t.num_resource_columns();
            let mut users = vec![vec![0.0; cols]; n];
            let mut slack = vec![1.0; cols];
            let mut shares = vec![vec![0.0; t.slices]; t.aps];
            for (i, di) in d.iter().enumerate() {
                if let Decision::Offload { ap, node, slice } = *di {
                    for c in [t.radio_column(ap, slice), t.compute_column(node, slice)] {
                        users[i][c] = rng.gen_range(0.05..0.3);
                        slack[c] -= users[i][c];
                    }
                    shares[ap][slice] = rng.gen_range(0.1..0.4);
                }
            }
            let sp2_slack = shares.iter().map(|r| 1.0 - r.iter().sum::<f64>()).collect();
            let sp3 = Sp3Labels {
                joint: d.iter().map(|x| x.class_index(&t)).collect(),
                offload: d.iter().map(|x| !x.is_local()).collect(),
                factored: d
                    .iter()
                    .map(|x| match *x {
                        Decision::Offload { ap, node, slice } => Some(FactoredLabel { slice, ap, node }),
                        Decision::Local => None,
                    })
                    .collect(),
            };
            ds.push(d);
            ls.push((Sp1Labels { users, slack }, Sp2Labels { shares, slack: sp2_slack }, sp3));
        }
        (xs, ds, ls)
    }

    fn examples<'a>(
        xs: &'a [Array2<f64>],
        ds: &'a [Vec<Decision>],
        ls: &'a [(Sp1Labels, Sp2Labels, Sp3Labels)],
    ) -> Vec<Example<'a>> {
        xs.iter()
            .zip(ds)
            .zip(ls)
            .map(|((x, d), l)| Example {
                x: x.view(),
                decisions: Some(d),
                targets: Some(Targets { sp1: &l.0, sp2: &l.1, sp3: &l.2 }),
            })
            .collect()
    }

    fn total_loss(p: &ModelParams, batch: &[Example<'_>]) -> f64 {
        loss(&forward(p, batch), batch).total(p.hyper.lambda_bin, p.hyper.lambda_fac)
    }

    #[test]
    fn gradients_match_central_differences() {
        for seed in 0..3 {
            let mut p = ModelParams::init(Hyper::for_topology(Topology { slices: 2, aps: 2, nodes: 2 }, 5, 4), seed);
            // Move slack and biases off zero so every term is exercised.
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            for (_, b) in p.blocks_mut() {
                for v in b.iter_mut() {
                    *v += rng.gen_range(-0.3..0.3);
                }
            }
            let (xs, ds, ls) = labelled_batch(&p, seed);
            let batch = examples(&xs, &ds, &ls);
            let grad = backward(&p, &forward(&p, &batch), &batch).unwrap();
            let h = 1e-5;
            let names: Vec<&str> = p.blocks().iter().map(|(n, _)| *n).collect();
            for (bi, name) in names.iter().enumerate() {
                let len = p.blocks()[bi].1.len();
                let mut num = vec![0.0; len];
                for k in 0..len {
                    let mut plus = p.clone();
                    plus.blocks_mut()[bi].1[k] += h;
                    let mut minus = p.clone();
                    minus.blocks_mut()[bi].1[k] -= h;
                    num[k] = (total_loss(&plus, &batch) - total_loss(&minus, &batch)) / (2.0 * h);
                }
                let ana = grad.blocks()[bi].1;
                let diff: f64 = ana.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let norm: f64 = ana.iter().map(|a| a * a).sum::<f64>().sqrt() + num.iter().map(|a| a * a).sum::<f64>().sqrt();
                assert!(diff <= 1e-4 * norm.max(1e-8), "{name}: {diff} vs {norm}");
            }
        }
    }

    #[test]
    fn loss_at_label_distribution_is_label_entropy() {
        // One scenario, one device on one column: choose logits so p equals y exactly.
        let mut p = tiny();
        for (_, b) in p.blocks_mut() {
            b.fill(0.0);
        }
        let t = p.hyper.topology;
        let x = Array2::zeros((2, p.hyper.features));
        let d = vec![Decision::Local, Decision::Local];
        let cols = t.num_resource_columns();
        let sp1 = Sp1Labels { users: vec![vec![0.0; cols]; 2], slack: vec![1.0; cols] };
        let sp2 = Sp2Labels { shares: vec![vec![0.0; 2]; 2], slack: vec![1.0; 2] };
        let sp3 = Sp3Labels { joint: vec![0, 0], offload: vec![false, false], factored: vec![None, None] };
        let batch = [Example { x: x.view(), decisions: Some(&d), targets: Some(Targets { sp1: &sp1, sp2: &sp2, sp3: &sp3 }) }];
        let parts = loss(&forward(&p, &batch), &batch);
        assert_eq!(parts.sp1, 0.0);
        assert_eq!(parts.sp2, 0.0);
        assert_eq!(parts.factored, 0.0);
        // uniform joint over 9 classes and q = 1/2 on two rows
        assert!((parts.joint - 2.0 * 9f64.ln()).abs() < 1e-12);
        assert!((parts.binary - 2.0 * 2f64.ln()).abs() < 1e-12);
        let mut q = p.clone();
        q.hyper.lambda_bin = 0.0;
        q.hyper.lambda_fac = 0.0;
        assert_eq!(parts.sp3(0.0, 0.0), parts.joint);
    }

    #[test]
    fn padded_rows_do_not_influence_outputs() {
        let p = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows = random_rows(&mut rng, 3, p.hyper.features);
        let mut b = pad_and_mask(&rows, 6).unwrap();
        let before = encode(&b, &p).z;
        b.xbar.row_mut(5).fill(7.0);
        let after = encode(&b, &p).z;
        assert_eq!(before, after);
    }
}

