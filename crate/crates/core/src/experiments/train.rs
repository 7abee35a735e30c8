use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::plateau::{detect_plateau, PlateauEvent, DEFAULT_REL_TOL, DEFAULT_WINDOW};
use super::{ExperimentError, Result};
use crate::diagnostics::{mpc_from_trace, DEFAULT_MPC_THRESHOLD};
use crate::network::{backprop, forward_batch, risk, Dataset, NetworkParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Mini-batch size; full batch when absent or not smaller than the set.
    #[serde(default)]
    pub batch_size: Option<usize>,
    /// Seed of the mini-batch shuffles.
    #[serde(default)]
    pub shuffle_seed: u64,
    /// Record per-layer MPC every this many epochs.
    #[serde(default)]
    pub mpc_every: Option<usize>,
    /// Stop once the training loss is at or below this value.
    #[serde(default)]
    pub target_loss: Option<f64>,
    /// Stop once the full-batch gradient L1 norm drops below this value.
    #[serde(default)]
    pub target_grad_l1: Option<f64>,
}

impl TrainConfig {
    pub fn full_batch(learning_rate: f64, epochs: usize) -> Self {
        TrainConfig {
            learning_rate,
            epochs,
            batch_size: None,
            shuffle_seed: 0,
            mpc_every: None,
            target_loss: None,
            target_grad_l1: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Full-batch loss at the start of the epoch.
    pub loss: f64,
    /// Training accuracy for one-hot labelled sets.
    pub accuracy: Option<f64>,
    /// Full-batch gradient L1 norm; absent for mini-batch epochs.
    pub grad_l1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpcSample {
    pub epoch: usize,
    pub values: Vec<Option<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub mpc: Vec<MpcSample>,
    pub plateaus: Vec<PlateauEvent>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    /// Recomputes plateau events with the given detector settings.
    pub fn detect_plateaus(&mut self, window: usize, rel_tol: f64) {
        self.plateaus = detect_plateau(&self.losses(), window, rel_tol);
    }

    /// `epoch,loss,accuracy,grad_l1` rows; missing values are left empty.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "loss", "accuracy", "grad_l1"])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                format!("{:?}", r.loss),
                opt(r.accuracy),
                opt(r.grad_l1),
            ])?;
        }
        w.flush()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Called once per epoch with the parameters the record was measured at,
/// before they are updated.
pub trait Observer {
    fn observe(&mut self, params: &NetworkParams, record: &EpochRecord) -> Control;
}

impl<F: FnMut(&NetworkParams, &EpochRecord) -> Control> Observer for F {
    fn observe(&mut self, params: &NetworkParams, record: &EpochRecord) -> Control {
        self(params, record)
    }
}

struct NoObserver;

impl Observer for NoObserver {
    fn observe(&mut self, _: &NetworkParams, _: &EpochRecord) -> Control {
        Control::Continue
    }
}

fn accuracy(classify: bool, out: &crate::linalg::Matrix, data: &Dataset) -> Option<f64> {
    if !classify {
        return None;
    }
    let labels = data.labels();
    let hits = (0..out.rows())
        .filter(|&i| crate::network::argmax(out.row(i)) == labels[i])
        .count();
    Some(hits as f64 / out.rows() as f64)
}

/// Plain gradient descent `θ ← θ − η ∇R(θ)`.
pub fn train_gd(
    params: &NetworkParams,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(NetworkParams, TrainLog)> {
    train_gd_observed(params, data, config, &mut NoObserver)
}

/// [`train_gd`] with a per-epoch callback that may stop training early.
///
/// The log holds one record per completed epoch plus a final record for the
/// returned parameters, so `records.len()` is the number of updates plus one.
pub fn train_gd_observed(
    params: &NetworkParams,
    data: &Dataset,
    config: &TrainConfig,
    observer: &mut dyn Observer,
) -> Result<(NetworkParams, TrainLog)> {
    if !(config.learning_rate >= 0.0 && config.learning_rate.is_finite()) {
        return Err(ExperimentError::Config(format!(
            "learning rate must be a finite non-negative number, got {}",
            config.learning_rate
        )));
    }
    let n = data.len();
    let minibatch = config.batch_size.filter(|&b| b < n);
    if minibatch == Some(0) {
        return Err(ExperimentError::Config(
            "batch size must be positive".into(),
        ));
    }
    let kind = data.loss_kind();
    let classify = data.is_one_hot();
    let mut rng = ChaCha8Rng::seed_from_u64(config.shuffle_seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut theta = params.clone();
    let mut log = TrainLog::default();

    for epoch in 0..=config.epochs {
        let trace = forward_batch(&theta, data.inputs())?;
        let loss = risk(kind, trace.output(), data.targets())?;
        if !loss.is_finite() {
            return Err(ExperimentError::Diverged {
                epoch,
                state: Box::new((theta, log)),
            });
        }
        let full_grad = if minibatch.is_none() {
            Some(backprop(&theta, &trace, data.targets(), kind)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            loss,
            accuracy: accuracy(classify, trace.output(), data),
            grad_l1: full_grad.as_ref().map(|g| g.l1_norm()),
        };
        if let Some(k) = config.mpc_every {
            if k > 0 && epoch % k == 0 && theta.hidden_layers() > 0 {
                let report = mpc_from_trace(&theta, &trace, DEFAULT_MPC_THRESHOLD)?;
                log.mpc.push(MpcSample {
                    epoch,
                    values: report.values(),
                });
            }
        }
        log.records.push(record);
        let reached = config.target_loss.is_some_and(|t| loss <= t)
            || config
                .target_grad_l1
                .is_some_and(|t| record.grad_l1.is_some_and(|g| g < t));
        if epoch == config.epochs || reached || observer.observe(&theta, &record) == Control::Stop {
            break;
        }
        match (full_grad, minibatch) {
            (Some(g), _) => theta.axpy_flat(-config.learning_rate, &g.flatten()),
            (None, Some(b)) => {
                order.shuffle(&mut rng);
                for chunk in order.chunks(b) {
                    let batch = data.subset(chunk)?;
                    let t = forward_batch(&theta, batch.inputs())?;
                    let g = backprop(&theta, &t, batch.targets(), kind)?;
                    theta.axpy_flat(-config.learning_rate, &g.flatten());
                }
            }
            (None, None) => unreachable!("full batch always has a gradient"),
        }
    }
    log.detect_plateaus(DEFAULT_WINDOW, DEFAULT_REL_TOL);
    Ok((theta, log))
}
