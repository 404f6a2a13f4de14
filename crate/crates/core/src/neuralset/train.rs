//! Minibatch Adam training with validation-based early stopping.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{backward, forward, loss, Example, LossParts, Targets};
use super::{load_blocks, store_blocks, Checkpoint, Hyper, ModelParams, NeuralError, StoredBlock, CHECKPOINT_VERSION};
use crate::dataset::{feature_width, Record, Standardizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub hidden: usize,
    pub embed: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate reached at the last epoch along a cosine schedule; equal to `lr` for a constant rate.
    pub lr_final: f64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    /// Share of the training records held out for model selection.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: 64,
            embed: 64,
            epochs: 300,
            batch_size: 16,
            lr: 1e-2,
            lr_final: 1e-5,
            patience: 0,
            val_fraction: 0.0,
            seed: 0,
        }
    }
}

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: ModelParams,
    v: ModelParams,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    pub fn step(&mut self, params: &mut ModelParams, grad: &ModelParams) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let blocks = params.blocks_mut().into_iter().zip(self.m.blocks_mut()).zip(self.v.blocks_mut()).zip(grad.blocks());
        for ((((_, p), (_, m)), (_, v)), (_, g)) in blocks {
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                p[k] -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Parameters of the best validation epoch (the last epoch without validation data).
    pub checkpoint: Checkpoint,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    pub wall_time_s: f64,
}

/// Snapshot between epochs: enough to continue a run exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub next_epoch: usize,
    pub finished: bool,
    pub params: ModelParams,
    adam_step: i32,
    adam_m: ModelParams,
    adam_v: ModelParams,
    best_score: f64,
    best_epoch: usize,
    best_params: ModelParams,
    pub log: Vec<EpochLog>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredState {
    format: String,
    version: u32,
    config: TrainConfig,
    next_epoch: usize,
    finished: bool,
    hyper: Hyper,
    adam_step: i32,
    best_score: Option<f64>,
    best_epoch: usize,
    params: Vec<StoredBlock>,
    adam_m: Vec<StoredBlock>,
    adam_v: Vec<StoredBlock>,
    best_params: Vec<StoredBlock>,
    log: Vec<EpochLog>,
}

const STATE_FORMAT: &str = "edgeslice-train-state";

impl TrainState {
    pub fn to_json(&self) -> Result<String, NeuralError> {
        let stored = StoredState {
            format: STATE_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            next_epoch: self.next_epoch,
            finished: self.finished,
            hyper: self.params.hyper,
            adam_step: self.adam_step,
            best_score: self.best_score.is_finite().then_some(self.best_score),
            best_epoch: self.best_epoch,
            params: store_blocks(&self.params),
            adam_m: store_blocks(&self.adam_m),
            adam_v: store_blocks(&self.adam_v),
            best_params: store_blocks(&self.best_params),
            log: self.log.clone(),
        };
        Ok(serde_json::to_string(&stored)?)
    }

    pub fn from_json(text: &str) -> Result<Self, NeuralError> {
        let s: StoredState = serde_json::from_str(text)?;
        if s.format != STATE_FORMAT || s.version != CHECKPOINT_VERSION {
            return Err(NeuralError::Checkpoint(format!("unsupported container {} v{}", s.format, s.version)));
        }
        let no_val = s.log.first().is_some_and(|l| l.val_loss.is_none());
        Ok(TrainState {
            config: s.config,
            next_epoch: s.next_epoch,
            finished: s.finished,
            params: load_blocks(s.hyper, &s.params)?,
            adam_step: s.adam_step,
            adam_m: load_blocks(s.hyper, &s.adam_m)?,
            adam_v: load_blocks(s.hyper, &s.adam_v)?,
            best_score: s.best_score.unwrap_or(if no_val { f64::NEG_INFINITY } else { f64::INFINITY }),
            best_epoch: s.best_epoch,
            best_params: load_blocks(s.hyper, &s.best_params)?,
            log: s.log,
        })
    }
}

struct Prepared<'a> {
    x: Array2<f64>,
    record: &'a Record,
}

fn prepare<'a>(records: &[&'a Record], stats: &Standardizer) -> Vec<Prepared<'a>> {
    records
        .iter()
        .map(|r| {
            let width = stats.mean.len();
            let flat: Vec<f64> = r.features.iter().flat_map(|row| stats.apply_row(row)).collect();
            Prepared { x: Array2::from_shape_vec((r.devices(), width), flat).expect("feature width"), record: r }
        })
        .collect()
}

fn as_example<'a>(p: &'a Prepared<'_>) -> Example<'a> {
    let r = p.record;
    Example {
        x: p.x.view(),
        decisions: Some(&r.solve.decision.0),
        targets: Some(Targets { sp1: &r.sp1, sp2: &r.sp2, sp3: &r.sp3 }),
    }
}

fn mean_loss(params: &ModelParams, data: &[Prepared<'_>], batch_size: usize) -> f64 {
    let mut total = 0.0;
    for chunk in data.chunks(batch_size.max(1)) {
        let batch: Vec<Example> = chunk.iter().map(as_example).collect();
        let parts: LossParts = loss(&forward(params, &batch), &batch);
        total += parts.total(params.hyper.lambda_bin, params.hyper.lambda_fac) * chunk.len() as f64;
    }
    total / data.len().max(1) as f64
}

/// Cosine interpolation from `lr` at the first epoch to `lr_final` at the last.
pub fn scheduled_lr(cfg: &TrainConfig, epoch: usize) -> f64 {
    if cfg.epochs <= 1 || cfg.lr_final == cfg.lr {
        return cfg.lr;
    }
    let progress = epoch as f64 / (cfg.epochs - 1) as f64;
    cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Trains on `records`; the standardizer is fitted on the non-validation part only.
pub fn train(records: &[&Record], cfg: &TrainConfig) -> Result<TrainReport, NeuralError> {
    train_resumable(records, cfg, None, None).map(|(report, _)| report)
}

/// Like [`train`], optionally continuing from `resume` and pausing once `stop_after` epochs are done.
///
/// A resumed run must use the configuration it was started with; the split and the
/// standardizer are recomputed from the same records and seed.
pub fn train_resumable(
    records: &[&Record],
    cfg: &TrainConfig,
    resume: Option<TrainState>,
    stop_after: Option<usize>,
) -> Result<(TrainReport, TrainState), NeuralError> {
    let start = Instant::now();
    let first = records.first().ok_or(NeuralError::Dataset(crate::dataset::DatasetError::Empty))?;
    let topo = first.scenario.topology();
    if records.iter().any(|r| r.scenario.topology() != topo) {
        return Err(NeuralError::Shape("records mix topologies".into()));
    }
    if cfg.batch_size == 0 || cfg.hidden == 0 || cfg.embed == 0 {
        return Err(NeuralError::Shape("batch size and layer widths must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rng);
    let n_val = if records.len() > 1 {
        ((records.len() as f64 * cfg.val_fraction.clamp(0.0, 0.5)).round() as usize).min(records.len() - 1)
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let train_records: Vec<&Record> = train_idx.iter().map(|&i| records[i]).collect();
    let val_records: Vec<&Record> = val_idx.iter().map(|&i| records[i]).collect();

    let width = feature_width(&topo);
    let stats = Standardizer::fit(train_records.iter().flat_map(|r| r.features.iter()), width);
    let train_data = prepare(&train_records, &stats);
    let val_data = prepare(&val_records, &stats);

    let hyper = Hyper::for_topology(topo, cfg.hidden, cfg.embed);
    let mut state = match resume {
        Some(st) => {
            if st.config != *cfg || st.params.hyper != hyper {
                return Err(NeuralError::Checkpoint("resume state was produced by a different configuration".into()));
            }
            st
        }
        None => {
            let params = ModelParams::init(hyper, cfg.seed);
            TrainState {
                config: cfg.clone(),
                next_epoch: 0,
                finished: false,
                adam_step: 0,
                adam_m: params.zeros_like(),
                adam_v: params.zeros_like(),
                best_score: if val_data.is_empty() { f64::NEG_INFINITY } else { f64::INFINITY },
                best_epoch: 0,
                best_params: params.clone(),
                params,
                log: Vec::with_capacity(cfg.epochs),
            }
        }
    };
    let mut adam = Adam::new(&state.params, cfg.lr);
    adam.step = state.adam_step;
    adam.m = std::mem::replace(&mut state.adam_m, state.params.zeros_like());
    adam.v = std::mem::replace(&mut state.adam_v, state.params.zeros_like());
    let elapsed_before = state.log.last().map_or(0.0, |l| l.wall_time_s);
    let mut perm: Vec<usize> = (0..train_data.len()).collect();
    let last_epoch = stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));

    while !state.finished && state.next_epoch < last_epoch {
        let epoch = state.next_epoch;
        perm.sort_unstable();
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        perm.shuffle(&mut epoch_rng);
        adam.lr = scheduled_lr(cfg, epoch);
        let mut seen = 0.0;
        let mut running = 0.0;
        for chunk in perm.chunks(cfg.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| as_example(&train_data[i])).collect();
            let trace = forward(&state.params, &batch);
            let parts = loss(&trace, &batch);
            running += parts.total(hyper.lambda_bin, hyper.lambda_fac) * chunk.len() as f64;
            seen += chunk.len() as f64;
            let grad = backward(&state.params, &trace, &batch)?;
            adam.step(&mut state.params, &grad);
        }
        let train_loss = running / seen.max(1.0);
        let val_loss = (!val_data.is_empty()).then(|| mean_loss(&state.params, &val_data, cfg.batch_size));
        state.log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            wall_time_s: elapsed_before + start.elapsed().as_secs_f64(),
        });
        state.next_epoch += 1;
        let score = val_loss.unwrap_or(f64::NEG_INFINITY);
        if score < state.best_score || val_loss.is_none() {
            state.best_score = score;
            state.best_epoch = epoch;
            state.best_params = state.params.clone();
        } else if cfg.patience > 0 && epoch - state.best_epoch >= cfg.patience {
            state.finished = true;
        }
    }
    if state.next_epoch >= cfg.epochs {
        state.finished = true;
    }
    state.adam_step = adam.step;
    state.adam_m = adam.m;
    state.adam_v = adam.v;
    state.best_params.all_finite()?;
    let report = TrainReport {
        checkpoint: Checkpoint { params: state.best_params.clone(), standardizer: stats },
        best_epoch: state.best_epoch,
        log: state.log.clone(),
        wall_time_s: elapsed_before + start.elapsed().as_secs_f64(),
    };
    Ok((report, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, GeneratorConfig};
    use crate::solver::{SearchMode, SolverSettings};

    fn small_data() -> crate::dataset::Dataset {
        let cfg = GeneratorConfig { slices: 2, access_points: 1, coins: 1, mecs: 1, min_devices: 2, max_devices: 4, ..Default::default() };
        generate_dataset(&cfg, 5, 12, 4, SearchMode::Exhaustive, &SolverSettings::default()).unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig { hidden: 8, embed: 6, epochs: 25, batch_size: 4, lr: 1e-2, lr_final: 1e-2, patience: 0, val_fraction: 0.0, seed: 1 }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let data = small_data();
        let refs: Vec<&Record> = data.records.iter().collect();
        let cfg = TrainConfig { lr: 0.0, lr_final: 0.0, epochs: 2, ..quick() };
        let report = train(&refs, &cfg).unwrap();
        let init = ModelParams::init(report.checkpoint.params.hyper, cfg.seed);
        assert_eq!(report.checkpoint.params, init);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let data = small_data();
        let refs: Vec<&Record> = data.records.iter().collect();
        let a = train(&refs, &quick()).unwrap();
        let b = train(&refs, &quick()).unwrap();
        assert_eq!(a.checkpoint.params.digest(), b.checkpoint.params.digest());
        let first = a.log.first().unwrap().train_loss;
        let last = a.log.last().unwrap().train_loss;
        assert!(last < 0.8 * first, "{first} -> {last}");
    }

    #[test]
    fn early_stopping_keeps_best_validation_epoch() {
        let data = small_data();
        let refs: Vec<&Record> = data.records.iter().collect();
        let cfg = TrainConfig { val_fraction: 0.25, patience: 3, epochs: 40, ..quick() };
        let r = train(&refs, &cfg).unwrap();
        let best = r.log.iter().filter_map(|l| l.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(r.log[r.best_epoch].val_loss, Some(best));
        assert!(r.log.len() <= cfg.epochs);
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let data = small_data();
        let refs: Vec<&Record> = data.records.iter().collect();
        let cfg = TrainConfig { epochs: 6, lr_final: 1e-4, val_fraction: 0.25, ..quick() };
        let (full, _) = train_resumable(&refs, &cfg, None, None).unwrap();
        let (_, paused) = train_resumable(&refs, &cfg, None, Some(3)).unwrap();
        assert_eq!(paused.next_epoch, 3);
        assert!(!paused.finished);
        let restored = TrainState::from_json(&paused.to_json().unwrap()).unwrap();
        let (resumed, state) = train_resumable(&refs, &cfg, Some(restored), None).unwrap();
        assert!(state.finished);
        let losses = |r: &TrainReport| r.log.iter().map(|l| (l.train_loss, l.val_loss)).collect::<Vec<_>>();
        assert_eq!(losses(&resumed), losses(&full));
        assert_eq!(resumed.checkpoint.params.digest(), full.checkpoint.params.digest());
        let other = TrainConfig { seed: 2, ..cfg };
        assert!(train_resumable(&refs, &other, Some(paused), None).is_err());
    }

    #[test]
    fn adam_first_step_moves_each_weight_by_lr() {
        let p0 = ModelParams::init(Hyper::for_topology(crate::model::Topology { slices: 1, aps: 1, nodes: 1 }, 2, 2), 0);
        let mut p = p0.clone();
        let mut g = p.zeros_like();
        g.phi1_w.fill(3.0);
        g.phi1_b.fill(-0.5);
        let mut adam = Adam::new(&p, 0.01);
        adam.step(&mut p, &g);
        for (a, b) in p.phi1_w.iter().zip(p0.phi1_w.iter()) {
            assert!((b - a - 0.01).abs() < 1e-9);
        }
        assert!(p.phi1_b.iter().all(|&x| (x - 0.01).abs() < 1e-9));
        assert_eq!(p.rho1_w, p0.rho1_w);
    }
}
