//! DeepSets-S: a permutation-equivariant set encoder with slack-augmented
//! allocation decoders and a multi-head offloading decoder.
//!
//! All arithmetic is f64 with explicit forward and backward passes.

mod infer;
mod net;
mod train;

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{feature_width, Standardizer};
use crate::model::Topology;

pub use infer::{infer, infer_batch, predict_allocations, Inference};
pub use net::{
    backward, decode_sp1, decode_sp2, decode_sp3, encode, forward, hierarchical_decision, loss, softplus,
    Encoded, Example, ForwardTrace, LossParts, Sp3Output, Targets, MASKED_LOGIT,
};
pub use train::{scheduled_lr, train, train_resumable, Adam, EpochLog, TrainConfig, TrainReport, TrainState};

pub const CHECKPOINT_FORMAT: &str = "edgeslice-deepsets-s";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("non-finite gradient in parameter block {0}")]
    NonFiniteGradient(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyper {
    pub features: usize,
    pub hidden: usize,
    pub embed: usize,
    pub topology: Topology,
    pub eps: f64,
    pub lambda_bin: f64,
    pub lambda_fac: f64,
}

impl Hyper {
    pub fn for_topology(topology: Topology, hidden: usize, embed: usize) -> Self {
        Hyper {
            features: feature_width(&topology),
            hidden,
            embed,
            topology,
            eps: 1e-8,
            lambda_bin: 1.0,
            lambda_fac: 1.0,
        }
    }

    pub fn resource_columns(&self) -> usize {
        self.topology.num_resource_columns()
    }

    pub fn classes(&self) -> usize {
        self.topology.num_classes()
    }
}

/// Every learned block. φ-net: F→H→H, ρ-net: 2H→D→D plus a linear F→D skip, then the decoder heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub hyper: Hyper,
    pub phi1_w: Array2<f64>,
    pub phi1_b: Array1<f64>,
    pub phi2_w: Array2<f64>,
    pub phi2_b: Array1<f64>,
    pub rho1_w: Array2<f64>,
    pub rho1_b: Array1<f64>,
    pub rho2_w: Array2<f64>,
    pub rho2_b: Array1<f64>,
    /// Linear path from the standardized row straight to the embedding.
    pub skip_w: Array2<f64>,
    /// SP1: one (w_e, b_e, s_e) per resource column.
    pub sp1_w: Array2<f64>,
    pub sp1_b: Array1<f64>,
    pub sp1_s: Array1<f64>,
    /// SP2: one (w_a, b_a, s_a) per AP.
    pub sp2_w: Array2<f64>,
    pub sp2_b: Array1<f64>,
    pub sp2_s: Array1<f64>,
    pub joint_w: Array2<f64>,
    pub joint_b: Array1<f64>,
    pub bin_w: Array1<f64>,
    pub bin_b: Array1<f64>,
    pub slice_w: Array2<f64>,
    pub slice_b: Array1<f64>,
    pub ap_w: Array2<f64>,
    pub ap_b: Array1<f64>,
    pub node_w: Array2<f64>,
    pub node_b: Array1<f64>,
}

macro_rules! for_each_block {
    ($mac:ident) => {
        $mac! {
            phi1_w, phi1_b, phi2_w, phi2_b, rho1_w, rho1_b, rho2_w, rho2_b, skip_w, sp1_w, sp1_b, sp1_s, sp2_w, sp2_b,
            sp2_s, joint_w, joint_b, bin_w, bin_b, slice_w, slice_b, ap_w, ap_b, node_w, node_b
        }
    };
}

macro_rules! blocks_ref {
    ($($f:ident),*) => {
        pub fn blocks(&self) -> Vec<(&'static str, &[f64])> {
            vec![$((stringify!($f), self.$f.as_slice().expect("standard layout"))),*]
        }

        pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
            vec![$((stringify!($f), self.$f.as_slice_mut().expect("standard layout"))),*]
        }

        pub fn shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
            vec![$((stringify!($f), self.$f.shape().to_vec())),*]
        }
    };
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

impl ModelParams {
    for_each_block!(blocks_ref);

    /// Glorot-uniform weights and zero biases from a seeded stream; the skip path starts at zero.
    pub fn init(hyper: Hyper, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, h, d) = (hyper.features, hyper.hidden, hyper.embed);
        let t = hyper.topology;
        let e = hyper.resource_columns();
        let k = hyper.classes();
        let zeros = Array1::zeros;
        ModelParams {
            hyper,
            phi1_w: glorot(&mut rng, f, h),
            phi1_b: zeros(h),
            phi2_w: glorot(&mut rng, h, h),
            phi2_b: zeros(h),
            rho1_w: glorot(&mut rng, 2 * h, d),
            rho1_b: zeros(d),
            rho2_w: glorot(&mut rng, d, d),
            rho2_b: zeros(d),
            skip_w: Array2::zeros((f, d)),
            sp1_w: glorot(&mut rng, d, e),
            sp1_b: zeros(e),
            sp1_s: zeros(e),
            sp2_w: glorot(&mut rng, d, t.aps),
            sp2_b: zeros(t.aps),
            sp2_s: zeros(t.aps),
            joint_w: glorot(&mut rng, d, k),
            joint_b: zeros(k),
            bin_w: glorot(&mut rng, d, 1).column(0).to_owned(),
            bin_b: zeros(1),
            slice_w: glorot(&mut rng, d, t.slices),
            slice_b: zeros(t.slices),
            ap_w: glorot(&mut rng, d, t.aps),
            ap_b: zeros(t.aps),
            node_w: glorot(&mut rng, d, t.nodes),
            node_b: zeros(t.nodes),
        }
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, b) in out.blocks_mut() {
            b.fill(0.0);
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn all_finite(&self) -> Result<(), NeuralError> {
        for (name, b) in self.blocks() {
            if !b.iter().all(|x| x.is_finite()) {
                return Err(NeuralError::NonFiniteGradient(name.to_string()));
            }
        }
        Ok(())
    }

    /// `self += scale * other`, block by block.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for ((_, dst), (_, src)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, b) in self.blocks() {
            h.update(name.as_bytes());
            for x in b {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredBlock {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn store_blocks(p: &ModelParams) -> Vec<StoredBlock> {
    p.blocks()
        .into_iter()
        .zip(p.shapes())
        .map(|((name, data), (_, shape))| StoredBlock { name: name.into(), shape, data: data.to_vec() })
        .collect()
}

fn load_blocks(hyper: Hyper, stored: &[StoredBlock]) -> Result<ModelParams, NeuralError> {
    let mut params = ModelParams::init(hyper, 0);
    let shapes = params.shapes();
    if stored.len() != shapes.len() {
        return Err(NeuralError::Checkpoint("wrong number of parameter blocks".into()));
    }
    for (((name, dst), (_, shape)), src) in params.blocks_mut().into_iter().zip(shapes).zip(stored) {
        if src.name != name || src.shape != shape || src.data.len() != dst.len() {
            return Err(NeuralError::Checkpoint(format!("block {name} does not match the hyperparameters")));
        }
        dst.copy_from_slice(&src.data);
    }
    Ok(params)
}

/// Everything needed to run inference: parameters plus the feature standardizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub standardizer: Standardizer,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredCheckpoint {
    format: String,
    version: u32,
    hyper: Hyper,
    standardizer: Standardizer,
    blocks: Vec<StoredBlock>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String, NeuralError> {
        let stored = StoredCheckpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            hyper: self.params.hyper,
            standardizer: self.standardizer.clone(),
            blocks: store_blocks(&self.params),
        };
        Ok(serde_json::to_string(&stored)?)
    }

    pub fn from_json(text: &str) -> Result<Self, NeuralError> {
        let stored: StoredCheckpoint = serde_json::from_str(text)?;
        if stored.format != CHECKPOINT_FORMAT || stored.version != CHECKPOINT_VERSION {
            return Err(NeuralError::Checkpoint(format!(
                "unsupported container {} v{}",
                stored.format, stored.version
            )));
        }
        let params = load_blocks(stored.hyper, &stored.blocks)?;
        if stored.standardizer.mean.len() != stored.hyper.features {
            return Err(NeuralError::Checkpoint("standardizer width mismatch".into()));
        }
        Ok(Checkpoint { params, standardizer: stored.standardizer })
    }

    pub fn save(&self, path: &Path) -> Result<(), NeuralError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NeuralError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
