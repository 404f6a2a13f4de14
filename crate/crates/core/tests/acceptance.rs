//! End-to-end acceptance checks. Runs without the libtest harness so each
//! criterion prints one PASS/FAIL line even when everything passes.

use std::time::Instant;

use edgeslice::dataset::{
    generate_dataset, pad_and_mask, sample_scenario_with, GeneratorConfig, PaddedBatch, Record, Standardizer,
};
use edgeslice::evaluation::{
    cross_validate, median, run_sweep, timing_bench, BenchMethod, SweepSpec, MODEL_METHOD,
};
use edgeslice::model::{system_cost, AllocationPolicy, Decision, DecisionVector, Scenario, Topology};
use edgeslice::neuralset::{
    backward, decode_sp1, decode_sp2, decode_sp3, encode, forward, hierarchical_decision, loss, train, Example, Hyper,
    ModelParams, Targets, TrainConfig,
};
use edgeslice::solver::{optimal_policy, sp3_solve, SearchMode, SolverSettings};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

/// Shares for `n` users plus a slack entry, uniform over the simplex.
fn simplex_with_slack(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..=n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let total: f64 = e.iter().sum();
    e[..n].iter().map(|x| x / total).collect()
}

/// A multiplicative jitter of `shares`, renormalised only when it would overallocate.
fn jitter(rng: &mut ChaCha8Rng, shares: &[f64]) -> Vec<f64> {
    let scale = 10f64.powf(rng.gen_range(-4.0..-0.5));
    let mut v: Vec<f64> = shares.iter().map(|s| s * (scale * rng.gen_range(-1.0..1.0f64)).exp()).collect();
    let total: f64 = v.iter().sum();
    if total > 1.0 {
        v.iter_mut().for_each(|x| *x /= total);
    }
    v
}

fn random_offloads(rng: &mut ChaCha8Rng, topo: &Topology, devices: usize) -> DecisionVector {
    DecisionVector(
        (0..devices)
            .map(|_| {
                if rng.gen_bool(0.15) {
                    Decision::Local
                } else {
                    Decision::Offload {
                        ap: rng.gen_range(0..topo.aps),
                        node: rng.gen_range(0..topo.nodes),
                        slice: rng.gen_range(0..topo.slices),
                    }
                }
            })
            .collect(),
    )
}

/// Groups of devices sharing a radio column and a compute column.
fn columns(d: &DecisionVector) -> (Vec<((usize, usize), Vec<usize>)>, Vec<((usize, usize), Vec<usize>)>) {
    let mut radio: Vec<((usize, usize), Vec<usize>)> = Vec::new();
    let mut compute: Vec<((usize, usize), Vec<usize>)> = Vec::new();
    let push = |groups: &mut Vec<((usize, usize), Vec<usize>)>, key, i| match groups.iter_mut().find(|(k, _)| *k == key) {
        Some((_, v)) => v.push(i),
        None => groups.push((key, vec![i])),
    };
    for (i, x) in d.0.iter().enumerate() {
        if let Decision::Offload { ap, node, slice } = *x {
            push(&mut radio, (ap, slice), i);
            push(&mut compute, (node, slice), i);
        }
    }
    (radio, compute)
}

/// Closed-form shares against sampled feasible alternatives, all scored by the system cost.
fn criterion_allocations() -> Outcome {
    let start = Instant::now();
    let cfg = GeneratorConfig::default();
    let mut worst = f64::NEG_INFINITY;
    let mut violations = 0usize;
    let mut instances = 0usize;
    for k in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + k);
        let devices = rng.gen_range(1..=6);
        let s = sample_scenario_with(&cfg, 500 + k, devices).unwrap();
        let topo = s.topology();
        let (d, opt, c_opt) = loop {
            let d = random_offloads(&mut rng, &topo, devices);
            let p = optimal_policy(&s, &d).unwrap();
            let c = system_cost(&s, &d, &p).as_f64();
            if c.is_finite() && !d.0.iter().all(Decision::is_local) {
                break (d, p, c);
            }
        };
        instances += 1;
        let (radio, compute) = columns(&d);
        let mut check = |q: &AllocationPolicy| {
            let c = system_cost(&s, &d, q).as_f64();
            let excess = (c_opt - c) / c.abs().max(1.0);
            worst = worst.max(excess);
            if c_opt > c + 1e-9 * c.abs().max(1.0) {
                violations += 1;
            }
        };
        for t in 0..10_000 {
            let mut q = opt.clone();
            for ((ap, slice), users) in &radio {
                let old: Vec<f64> = users.iter().map(|&i| opt.phi_radio[i][*ap][*slice]).collect();
                let new = if t % 2 == 0 { simplex_with_slack(&mut rng, users.len()) } else { jitter(&mut rng, &old) };
                for (&i, v) in users.iter().zip(new) {
                    q.phi_radio[i][*ap][*slice] = v;
                }
            }
            for ((node, slice), users) in &compute {
                let old: Vec<f64> = users.iter().map(|&i| opt.phi_compute[i][*node][*slice]).collect();
                let new = if t % 2 == 0 { simplex_with_slack(&mut rng, users.len()) } else { jitter(&mut rng, &old) };
                for (&i, v) in users.iter().zip(new) {
                    q.phi_compute[i][*node][*slice] = v;
                }
            }
            check(&q);
        }
        for t in 0..10_000 {
            let mut q = opt.clone();
            for a in 0..topo.aps {
                q.omega[a] = if t % 2 == 0 { simplex_with_slack(&mut rng, topo.slices) } else { jitter(&mut rng, &opt.omega[a]) };
            }
            check(&q);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        violations == 0 && secs <= 60.0,
        format!("{instances} instances, 4.0e6 samples, {violations} beat the closed form, worst relative excess {worst:.2e}, {secs:.1} s"),
    )
}

fn criterion_greedy_vs_exhaustive() -> Outcome {
    let start = Instant::now();
    let cfg = GeneratorConfig { slices: 3, access_points: 3, coins: 2, mecs: 1, ..Default::default() };
    let settings = SolverSettings::default();
    let mut ratios = Vec::new();
    let mut bad = 0usize;
    let mut classes = 0;
    for k in 0..100u64 {
        let devices = 1 + (k as usize % 4);
        let s = sample_scenario_with(&cfg, 2_000 + k, devices).unwrap();
        classes = s.topology().num_classes();
        let exact = sp3_solve(&s, SearchMode::Exhaustive, &settings).unwrap();
        let greedy = sp3_solve(&s, SearchMode::Greedy, &settings).unwrap();
        if !exact.exact || exact.cost_s > greedy.cost_s * (1.0 + 1e-12) {
            bad += 1;
        }
        ratios.push(greedy.cost_s / exact.cost_s);
    }
    let secs = start.elapsed().as_secs_f64();
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let worst = ratios.iter().copied().fold(1.0, f64::max);
    outcome(
        bad == 0 && classes <= 30 && secs <= 300.0,
        format!("100 instances, K = {classes}, {bad} violations, greedy/exact mean {mean:.4} max {worst:.4}, {secs:.1} s"),
    )
}

fn perturbed_params(topo: Topology, hidden: usize, embed: usize, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(Hyper::for_topology(topo, hidden, embed), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (_, b) in p.blocks_mut() {
        for v in b.iter_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
    p
}

fn random_decisions(rng: &mut ChaCha8Rng, topo: &Topology, n: usize) -> Vec<Decision> {
    (0..n).map(|_| Decision::from_class(rng.gen_range(0..topo.num_classes()), topo).unwrap()).collect()
}

fn criterion_slack_heads() -> Outcome {
    let topo = GeneratorConfig::default().topology();
    let mut failures = Vec::new();
    let mut worst_sp1 = 0.0f64;
    let mut worst_sp2 = 0.0f64;
    for k in 0..1_000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(k);
        let p = perturbed_params(topo, 12, 10, k);
        let devices = rng.gen_range(1..=12);
        let cap = devices + rng.gen_range(0..4);
        let rows: Vec<Vec<f64>> = (0..devices).map(|_| (0..p.hyper.features).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        let batch = pad_and_mask(&rows, cap).unwrap();
        let dec = random_decisions(&mut rng, &topo, cap);
        let decided = if k % 2 == 0 { None } else { Some(dec.as_slice()) };
        let enc = encode(&batch, &p);
        let sp1 = decode_sp1(&enc.z, &batch.mask, decided, &p);
        for col in sp1.columns() {
            let users: f64 = col.iter().skip(1).sum();
            worst_sp1 = worst_sp1.max(users - 1.0);
            if users > 1.0 + 1e-9 || (col.sum() - 1.0).abs() > 1e-9 || col.iter().any(|&v| v < 0.0) {
                failures.push(format!("sp1 pair {k}"));
            }
        }
        let sp2 = decode_sp2(&enc.z, &batch.mask, decided, &p);
        for row in sp2.rows() {
            let shares: f64 = row.iter().skip(1).sum();
            worst_sp2 = worst_sp2.max(shares - 1.0);
            if shares > 1.0 + 1e-9 || row.iter().any(|&v| v < 0.0) {
                failures.push(format!("sp2 pair {k}"));
            }
        }
        let sp3 = decode_sp3(&enc.z, &batch.mask, &p);
        for (i, cls) in sp3.joint_argmax().into_iter().enumerate().take(devices) {
            let row = sp3.joint.row(i);
            let top = row.iter().filter(|&&q| q == row[cls]).count();
            let onehot: usize = (0..topo.num_classes()).map(|c| usize::from(c == cls)).sum();
            if onehot != 1 || top == 0 || row.iter().any(|&q| q > row[cls]) || Decision::from_class(cls, &topo).is_none() {
                failures.push(format!("sp3 pair {k} row {i}"));
            }
            if let Decision::Offload { ap, node, slice } = hierarchical_decision(&sp3, i) {
                if ap >= topo.aps || node >= topo.nodes || slice >= topo.slices {
                    failures.push(format!("factored pair {k} row {i}"));
                }
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "1000 pairs, {} violations, max SP1 column excess {worst_sp1:.1e}, max SP2 row excess {worst_sp2:.1e}",
            failures.len()
        ),
    )
}

fn permuted(batch: &PaddedBatch, perm: &[usize]) -> PaddedBatch {
    let mut xbar = batch.xbar.clone();
    for (k, &i) in perm.iter().enumerate() {
        xbar.row_mut(k).assign(&batch.xbar.row(i));
    }
    PaddedBatch { xbar, mask: perm.iter().map(|&i| batch.mask[i]).collect() }
}

fn criterion_symmetry() -> Outcome {
    let topo = GeneratorConfig::default().topology();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let p = perturbed_params(topo, 24, 16, 77);
    let devices = 9;
    let cap = 12;
    let rows: Vec<Vec<f64>> = (0..devices).map(|_| (0..p.hyper.features).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    let batch = pad_and_mask(&rows, cap).unwrap();
    let dec = random_decisions(&mut rng, &topo, cap);
    let enc = encode(&batch, &p);
    let sp1 = decode_sp1(&enc.z, &batch.mask, Some(&dec), &p);
    let sp2 = decode_sp2(&enc.z, &batch.mask, Some(&dec), &p);
    let mut max_equi = 0.0f64;
    let mut max_inv = 0.0f64;
    for _ in 0..100 {
        let mut perm: Vec<usize> = (0..cap).collect();
        perm.shuffle(&mut rng);
        let pb = permuted(&batch, &perm);
        let pdec: Vec<Decision> = perm.iter().map(|&i| dec[i]).collect();
        let penc = encode(&pb, &p);
        for (k, &i) in perm.iter().enumerate() {
            if batch.mask[i] == 0.0 {
                continue;
            }
            for (x, y) in penc.z.row(k).iter().zip(enc.z.row(i)) {
                max_equi = max_equi.max((x - y).abs());
            }
        }
        let psp1 = decode_sp1(&penc.z, &pb.mask, Some(&pdec), &p);
        for (k, &i) in perm.iter().enumerate() {
            if batch.mask[i] == 0.0 {
                continue;
            }
            for (x, y) in psp1.row(1 + k).iter().zip(sp1.row(1 + i)) {
                max_equi = max_equi.max((x - y).abs());
            }
        }
        let psp2 = decode_sp2(&penc.z, &pb.mask, Some(&pdec), &p);
        for (x, y) in psp2.iter().zip(sp2.iter()) {
            max_inv = max_inv.max((x - y).abs());
        }
    }
    outcome(
        max_equi <= 1e-6 && max_inv <= 1e-6,
        format!("100 permutations, max equivariance deviation {max_equi:.2e}, max SP2 invariance deviation {max_inv:.2e}"),
    )
}

fn criterion_gradients() -> Outcome {
    let cfg = GeneratorConfig { slices: 2, access_points: 2, coins: 1, mecs: 1, min_devices: 1, max_devices: 4, ..Default::default() };
    let data = generate_dataset(&cfg, 9, 15, 4, SearchMode::Exhaustive, &SolverSettings::default()).unwrap();
    let width = data.records[0].features[0].len();
    let stats = Standardizer::fit(data.records.iter().flat_map(|r| r.features.iter()), width);
    let xs: Vec<Array2<f64>> = data
        .records
        .iter()
        .map(|r| {
            let rows: Vec<f64> = r.features.iter().flat_map(|row| stats.apply_row(row)).collect();
            Array2::from_shape_vec((r.devices(), width), rows).unwrap()
        })
        .collect();
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    let mut blocks = 0;
    for b in 0..5 {
        let p = perturbed_params(data.header.topology, 5, 4, 300 + b as u64);
        let recs: Vec<(&Record, &Array2<f64>)> = data.records.iter().zip(&xs).skip(3 * b).take(3).collect();
        let batch: Vec<Example> = recs
            .iter()
            .map(|(r, x)| Example {
                x: x.view(),
                decisions: Some(&r.solve.decision.0),
                targets: Some(Targets { sp1: &r.sp1, sp2: &r.sp2, sp3: &r.sp3 }),
            })
            .collect();
        let total = |q: &ModelParams| loss(&forward(q, &batch), &batch).total(q.hyper.lambda_bin, q.hyper.lambda_fac);
        let grad = backward(&p, &forward(&p, &batch), &batch).unwrap();
        let h = 1e-5;
        let names: Vec<&str> = p.blocks().iter().map(|(n, _)| *n).collect();
        blocks = names.len();
        for (bi, name) in names.iter().enumerate() {
            let len = p.blocks()[bi].1.len();
            let mut num = vec![0.0; len];
            for (k, slot) in num.iter_mut().enumerate() {
                let mut plus = p.clone();
                plus.blocks_mut()[bi].1[k] += h;
                let mut minus = p.clone();
                minus.blocks_mut()[bi].1[k] -= h;
                *slot = (total(&plus) - total(&minus)) / (2.0 * h);
            }
            let ana = grad.blocks()[bi].1;
            let diff: f64 = ana.iter().zip(&num).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
            let norm = ana.iter().map(|a| a * a).sum::<f64>().sqrt() + num.iter().map(|a| a * a).sum::<f64>().sqrt();
            let rel = diff / norm.max(1e-8);
            worst = worst.max(rel);
            if rel > 1e-4 {
                failed.push(format!("batch {b} {name}"));
            }
        }
    }
    outcome(
        failed.is_empty(),
        format!("5 batches x {blocks} blocks, worst relative error {worst:.2e}{}", if failed.is_empty() { String::new() } else { format!(", failing {failed:?}") }),
    )
}

fn criterion_cross_validation() -> (Outcome, Outcome) {
    let start = Instant::now();
    let data =
        generate_dataset(&GeneratorConfig::default(), 42, 500, 16, SearchMode::Auto, &SolverSettings::default()).unwrap();
    let generated = start.elapsed().as_secs_f64();
    let cfg = TrainConfig { seed: 42, ..Default::default() };
    let report = cross_validate(&data, 10, 42, &cfg, "acceptance", |r| {
        eprintln!(
            "  fold {:>2}: sp1 {:.3} sp2 {:.3} bin {:.3} cr {:.3} train {:.1} s",
            r.fold.unwrap_or(0) + 1,
            r.sp1.acc_at[1],
            r.sp2.acc_at[1],
            r.sp3.acc_bin,
            r.cost_ratio.get(MODEL_METHOD).map_or(f64::NAN, |c| c.mean),
            r.train_wall_time_s
        )
    })
    .unwrap();
    let s = &report.summary;
    let cr = |m: &str| s.cost_ratio_fold_median.get(m).copied().unwrap_or(f64::NAN);
    let (model, erap, prap) = (cr(MODEL_METHOD), cr("erap"), cr("prap"));
    let max_devices = data.records.iter().map(Record::devices).max().unwrap_or(0);
    let quality = outcome(
        s.sp1_acc_at_1_median >= 0.85
            && s.sp2_acc_at_1_median >= 0.85
            && s.sp3_acc_bin_median >= 0.75
            && model > erap
            && model > prap
            && s.total_train_time_s <= 1800.0,
        format!(
            "SP1 Acc@1 {:.3}, SP2 Acc@1 {:.3}, Acc_bin {:.3}, CR model {model:.3} vs ERAP {erap:.3} / PRAP {prap:.3}, train {:.0} s (data {generated:.0} s)",
            s.sp1_acc_at_1_median, s.sp2_acc_at_1_median, s.sp3_acc_bin_median, s.total_train_time_s
        ),
    );
    let gap = outcome(
        s.median_cost_gap <= 0.15 && max_devices <= 12,
        format!("median held-out cost gap {:.4} over scenarios with up to {max_devices} devices", s.median_cost_gap),
    );
    (quality, gap)
}

fn criterion_speedup() -> Outcome {
    let cfg = GeneratorConfig { slices: 1, access_points: 1, coins: 2, mecs: 1, min_devices: 2, max_devices: 10, ..Default::default() };
    let settings = SolverSettings::default();
    let data = generate_dataset(&cfg, 8, 60, 10, SearchMode::SubsetDp, &settings).unwrap();
    let refs: Vec<&Record> = data.records.iter().collect();
    let tc = TrainConfig { hidden: 16, embed: 16, epochs: 40, batch_size: 8, ..Default::default() };
    let ck = train(&refs, &tc).unwrap().checkpoint;
    let scenarios: Vec<Scenario> = (0..5).map(|k| sample_scenario_with(&cfg, 900 + k, 10).unwrap()).collect();
    let classes = scenarios[0].topology().num_classes();
    let rows = timing_bench(&scenarios, &[BenchMethod::Exhaustive, BenchMethod::Model], Some(&ck), 3, &settings).unwrap();
    let get = |m: &str| rows.iter().find(|r| r.method == m).map(|r| r.median_s).unwrap();
    let (exact, model) = (get("exhaustive"), get(MODEL_METHOD));
    let speedup = exact / model;
    outcome(
        speedup >= 10.0,
        format!("I = 10, K = {classes}: exhaustive {exact:.3e} s, model {model:.3e} s, speedup {speedup:.0}x"),
    )
}

fn criterion_monotone_sweeps() -> Outcome {
    let coins = vec![2, 4, 8];
    let devices = vec![4, 6, 8];
    let spec = SweepSpec {
        base: GeneratorConfig::default(),
        aps: vec![],
        coins: coins.clone(),
        slices: vec![],
        devices: devices.clone(),
        scenarios_per_point: 8,
        seed: 42,
    };
    let records = run_sweep(&spec, None, &SolverSettings::default()).unwrap();
    let med = |c: usize, d: usize| {
        let v: Vec<f64> = records
            .iter()
            .filter(|r| r.family == "coins" && r.method == "exact" && r.coins == c && r.devices == d)
            .map(|r| r.exact_cost_s)
            .collect();
        median(&v).unwrap()
    };
    let tol = |x: f64| 1e-9 * x.abs().max(1.0);
    let mut broken = Vec::new();
    let mut table = Vec::new();
    for &d in &devices {
        let row: Vec<f64> = coins.iter().map(|&c| med(c, d)).collect();
        for w in row.windows(2) {
            if w[1] > w[0] + tol(w[0]) {
                broken.push(format!("coins at {d} devices"));
            }
        }
        table.push(format!("{d}: {}", row.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/")));
    }
    for &c in &coins {
        let col: Vec<f64> = devices.iter().map(|&d| med(c, d)).collect();
        for w in col.windows(2) {
            if w[1] + tol(w[1]) < w[0] {
                broken.push(format!("devices at {c} COINs"));
            }
        }
    }
    outcome(
        broken.is_empty(),
        format!("median exact cost by devices (coins 2/4/8) {}{}", table.join(", "), if broken.is_empty() { String::new() } else { format!(", broken {broken:?}") }),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 5] = [
        ("closed-form allocations beat sampled feasible points", criterion_allocations),
        ("exhaustive never loses to greedy", criterion_greedy_vs_exhaustive),
        ("slack heads and one-hot decoding on random inputs", criterion_slack_heads),
        ("encoder equivariance and SP2 invariance", criterion_symmetry),
        ("analytic gradients match central differences", criterion_gradients),
    ];
    let mut results: Vec<(String, Outcome)> = Vec::new();
    let mut report = |name: &str, o: Outcome| {
        println!("{} [{}] {name}: {}", if o.passed { "PASS" } else { "FAIL" }, results.len() + 1, o.detail);
        results.push((name.to_string(), o));
    };
    for (name, run) in criteria {
        report(name, run());
    }
    let (quality, gap) = criterion_cross_validation();
    report("10-fold cross-validation quality", quality);
    report("held-out median cost gap", gap);
    report("inference speedup over exhaustive search", criterion_speedup());
    report("exact cost monotone in COINs and devices", criterion_monotone_sweeps());

    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.passed).map(|(n, _)| n.as_str()).collect();
    println!("acceptance: {}/{} passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
