//! JSON checkpoints of the trained networks plus the run that produced them.
//! Floats are written in shortest round-trip form, so weights reload bit for
//! bit.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Dense, FeedForwardNet, GruNet, GruShape, Parameterized};
use crate::error::{Error, Result};
use crate::orchestrator::{s_shape, v_shape, RunConfig, TrainedNetworks, U_SIZES};

pub const CHECKPOINT_FORMAT: &str = "mvfbsde-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl TensorRecord {
    fn from_array(a: &Array2<f64>) -> Self {
        TensorRecord {
            rows: a.nrows(),
            cols: a.ncols(),
            data: a.iter().copied().collect(),
        }
    }

    fn to_array(&self, what: &str) -> Result<Array2<f64>> {
        Array2::from_shape_vec((self.rows, self.cols), self.data.clone()).map_err(|_| {
            Error::Checkpoint(format!(
                "{what}: {} values do not fill a {} x {} tensor",
                self.data.len(),
                self.rows,
                self.cols
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkRecords {
    pub activation: Activation,
    pub u_sizes: Vec<usize>,
    /// Weight then bias, layer by layer.
    pub u: Vec<TensorRecord>,
    pub s_shape: GruShape,
    pub s: Vec<TensorRecord>,
    pub v_shape: GruShape,
    pub v: Vec<TensorRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub model: String,
    /// Outer iterations completed when the checkpoint was taken.
    pub iteration: usize,
    pub seed: u64,
    pub config: RunConfig,
    pub networks: NetworkRecords,
}

fn records(p: &impl Parameterized) -> Vec<TensorRecord> {
    p.parameters().into_iter().map(TensorRecord::from_array).collect()
}

impl Checkpoint {
    pub fn new(config: &RunConfig, iteration: usize, networks: &TrainedNetworks) -> Self {
        let u_sizes = std::iter::once(networks.u.input_dim())
            .chain(networks.u.layers().iter().map(Dense::output_dim))
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            model: config.model.name().into(),
            iteration,
            seed: config.seed,
            config: config.clone(),
            networks: NetworkRecords {
                activation: networks.u.activation(),
                u_sizes,
                u: records(&networks.u),
                s_shape: networks.s.shape(),
                s: records(&networks.s),
                v_shape: networks.v.shape(),
                v: records(&networks.v),
            },
        }
    }

    /// Rebuilds the networks, checking every shape against the solver layout.
    pub fn networks(&self) -> Result<TrainedNetworks> {
        let n = &self.networks;
        if n.u_sizes != U_SIZES || n.s_shape != s_shape() || n.v_shape != v_shape() {
            return Err(Error::Checkpoint(format!(
                "network shapes U {:?}, S {:?}, v {:?} do not match the solver layout",
                n.u_sizes, n.s_shape, n.v_shape
            )));
        }
        if n.u.len() != 2 * (n.u_sizes.len() - 1) {
            return Err(Error::Checkpoint(format!("U has {} tensors, expected {}", n.u.len(), 2 * (n.u_sizes.len() - 1))));
        }
        let mut layers = Vec::with_capacity(n.u_sizes.len() - 1);
        for (k, w) in n.u_sizes.windows(2).enumerate() {
            let weight = n.u[2 * k].to_array("U weight")?;
            let bias = n.u[2 * k + 1].to_array("U bias")?;
            if weight.dim() != (w[0], w[1]) || bias.dim() != (1, w[1]) {
                return Err(Error::Checkpoint(format!("U layer {k} has the wrong shape")));
            }
            layers.push(Dense { weight, bias });
        }
        let u = FeedForwardNet::from_layers(layers, n.activation)?;
        let gru = |shape: GruShape, recs: &[TensorRecord], what: &str| -> Result<GruNet> {
            let tensors = recs.iter().map(|r| r.to_array(what)).collect::<Result<Vec<_>>>()?;
            GruNet::from_vec(shape, tensors).map_err(|e| Error::Checkpoint(format!("{what}: {e}")))
        };
        let nets = TrainedNetworks {
            u,
            s: gru(n.s_shape, &n.s, "S network")?,
            v: gru(n.v_shape, &n.v, "v network")?,
        };
        if all_weights(&nets).iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint("non-finite weight".into()));
        }
        Ok(nets)
    }
}

fn all_weights(n: &TrainedNetworks) -> Vec<f64> {
    let mut out = Vec::new();
    for p in n.u.parameters().into_iter().chain(n.s.parameters()).chain(n.v.parameters()) {
        out.extend(p.iter().copied());
    }
    out
}

pub fn checkpoint_to_json(ck: &Checkpoint) -> Result<String> {
    if ck.networks.u.iter().chain(&ck.networks.s).chain(&ck.networks.v).any(|t| t.data.iter().any(|v| !v.is_finite())) {
        return Err(Error::Checkpoint("refusing to save non-finite weights".into()));
    }
    serde_json::to_string_pretty(ck).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Parses a checkpoint document and rebuilds its networks. Nothing is
/// returned unless the whole document is valid; `expected_model`, when
/// given, must match the recorded model name.
pub fn parse_checkpoint(bytes: &[u8], expected_model: Option<&str>) -> Result<(Checkpoint, TrainedNetworks)> {
    let ck: Checkpoint = serde_json::from_slice(bytes).map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
    if ck.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format `{}`", ck.format)));
    }
    if ck.model != ck.config.model.name() {
        return Err(Error::Checkpoint(format!(
            "model `{}` disagrees with the embedded configuration (`{}`)",
            ck.model,
            ck.config.model.name()
        )));
    }
    if let Some(want) = expected_model {
        if ck.model != want {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained for model `{}`, not `{want}`",
                ck.model
            )));
        }
    }
    ck.config.validate()?;
    let nets = ck.networks()?;
    Ok((ck, nets))
}

/// Writes to a sibling temporary file first, so a crash never leaves a
/// half-written checkpoint under `path`.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let text = checkpoint_to_json(ck)?;
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, expected_model: Option<&str>) -> Result<(Checkpoint, TrainedNetworks)> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    parse_checkpoint(&bytes, expected_model)
}
