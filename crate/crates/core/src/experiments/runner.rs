//! JSON-configured experiment pipeline: load data, initialise, train, run
//! one procedure, and write a result bundle.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{gen_synthetic_1d, load_iris, load_mnist_subset, SyntheticSpec, Target};
use super::plateau::PlateauEvent;
use super::train::{train_gd, train_gd_observed, Control, EpochRecord, TrainConfig, TrainLog};
use super::{ExperimentError, Result};
use crate::diagnostics::{
    self, criticality, prediction_agreement, spectrum, AgreementReport, SpectrumClass,
    SpectrumReport, DEFAULT_MPC_THRESHOLD,
};
use crate::lifting::{multi_layer_lift, verify_membership, LiftPlan, MergeReport};
use crate::network::{
    argmax, loss, predict, save_weights, ActivationSpec, Dataset, InitConfig, LossKind,
    NetworkParams, DEFAULT_HESSIAN_CAP,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// `m_0, …, m_L`, input and output included.
    pub widths: Vec<usize>,
    pub activation: ActivationSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    #[serde(rename = "synthetic_1d")]
    Synthetic1d(SyntheticSpec),
    Iris {
        path: PathBuf,
    },
    MnistSubset {
        dir: PathBuf,
        n_train: usize,
        n_test: usize,
    },
    /// A 1-D grid labelled by a stored network.
    Teacher {
        weights: PathBuf,
        n: usize,
        #[serde(default = "default_interval")]
        interval: [f64; 2],
    },
}

fn default_interval() -> [f64; 2] {
    [-1.0, 1.0]
}

fn default_threshold() -> f64 {
    DEFAULT_MPC_THRESHOLD
}

fn default_snapshot_every() -> usize {
    500
}

fn default_tau() -> f64 {
    1e-12
}

fn default_cap() -> usize {
    DEFAULT_HESSIAN_CAP
}

fn default_escape_factor() -> f64 {
    0.5
}

fn default_check_every() -> usize {
    50
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Procedure {
    /// Train and write the log.
    #[default]
    Train,
    /// For every plateau, merge the effectively linear layers of the snapshot
    /// nearest its midpoint and compare the merged loss with the plateau
    /// level.
    PlateauMerge {
        #[serde(default = "default_threshold")]
        threshold: f64,
        #[serde(default = "default_snapshot_every")]
        snapshot_every: usize,
        /// Width of a single-hidden-layer reference trained on the same data
        /// from seed `seed + 1000`.
        #[serde(default)]
        reference_width: Option<usize>,
    },
    /// Hessian spectra of the trained network and of its lifts, applied one
    /// after another.
    SpectrumLifts {
        lifts: Vec<LiftPlan>,
        #[serde(default = "default_tau")]
        tau: f64,
        #[serde(default = "default_cap")]
        cap: usize,
    },
    /// One run per batch-norm `γ` init from the same seed; `null` runs
    /// without batch-norm.
    BnSweep { gammas: Vec<Option<f64>> },
    /// Train on the configured grid for `optimizer.epochs`, then continue on
    /// grids of each size with the same spacing until the loss escapes or
    /// `after_epochs` pass.
    DataSwitch {
        sizes: Vec<usize>,
        after_epochs: usize,
        #[serde(default = "default_escape_factor")]
        escape_factor: f64,
    },
    /// Merge the effectively linear layers at the last MPC check that still
    /// flags any, then compare predictions on the test set.
    Prune {
        #[serde(default = "default_threshold")]
        threshold: f64,
        #[serde(default = "default_check_every")]
        check_every: usize,
        #[serde(default)]
        retrain: Option<RetrainSpec>,
    },
}

impl Procedure {
    pub fn name(&self) -> &'static str {
        match self {
            Procedure::Train => "train",
            Procedure::PlateauMerge { .. } => "plateau_merge",
            Procedure::SpectrumLifts { .. } => "spectrum_lifts",
            Procedure::BnSweep { .. } => "bn_sweep",
            Procedure::DataSwitch { .. } => "data_switch",
            Procedure::Prune { .. } => "prune",
        }
    }
}

/// Retrains the pruned network until it reaches the loss of the original at
/// the pruning epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainSpec {
    pub learning_rate: f64,
    pub max_epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub architecture: Architecture,
    pub init: InitConfig,
    pub dataset: DatasetSpec,
    /// Overrides the loss the dataset comes with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossKind>,
    pub optimizer: TrainConfig,
    #[serde(default)]
    pub procedure: Procedure,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn must_exist(p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(ExperimentError::Config(format!(
            "{} does not exist",
            p.display()
        )))
    }
}

impl ExperimentConfig {
    /// Reads a config file; relative data paths are taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        match &mut self.dataset {
            DatasetSpec::Synthetic1d(spec) => {
                if let Target::Teacher { weights } = &mut spec.target {
                    resolve(base, weights);
                }
            }
            DatasetSpec::Iris { path } => resolve(base, path),
            DatasetSpec::MnistSubset { dir, .. } => resolve(base, dir),
            DatasetSpec::Teacher { weights, .. } => resolve(base, weights),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.architecture.widths.len() < 2 || self.architecture.widths.contains(&0) {
            return bad(format!(
                "widths must list at least input and output, all positive: {:?}",
                self.architecture.widths
            ));
        }
        if !(self.init.variance.is_finite() && self.init.variance >= 0.0) {
            return bad(format!("init variance {}", self.init.variance));
        }
        let lr = self.optimizer.learning_rate;
        if !(lr.is_finite() && lr > 0.0) {
            return bad(format!("learning rate must be positive, got {lr}"));
        }
        match &self.dataset {
            DatasetSpec::Synthetic1d(spec) => {
                if let Target::Teacher { weights } = &spec.target {
                    must_exist(weights)?;
                }
            }
            DatasetSpec::Iris { path } => must_exist(path)?,
            DatasetSpec::MnistSubset { dir, .. } => must_exist(dir)?,
            DatasetSpec::Teacher { weights, .. } => must_exist(weights)?,
        }
        match &self.procedure {
            Procedure::PlateauMerge { snapshot_every, .. } if *snapshot_every == 0 => {
                bad("snapshot_every must be positive".into())
            }
            Procedure::Prune { check_every, .. } if *check_every == 0 => {
                bad("check_every must be positive".into())
            }
            Procedure::DataSwitch { .. } if !matches!(&self.dataset, DatasetSpec::Synthetic1d(s) if s.spacing.is_some()) => {
                bad("data_switch needs a synthetic_1d dataset with a fixed spacing".into())
            }
            Procedure::BnSweep { gammas } if gammas.is_empty() => {
                bad("bn_sweep needs at least one gamma".into())
            }
            _ => Ok(()),
        }
    }
}

/// Training set plus an optional held-out set.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub train: Dataset,
    pub test: Option<Dataset>,
}

pub fn load_dataset(spec: &DatasetSpec, loss: Option<LossKind>) -> Result<LoadedData> {
    let (train, test) = match spec {
        DatasetSpec::Synthetic1d(s) => (gen_synthetic_1d(s)?, None),
        DatasetSpec::Iris { path } => (load_iris(path)?, None),
        DatasetSpec::MnistSubset {
            dir,
            n_train,
            n_test,
        } => {
            let (a, b) = load_mnist_subset(dir, *n_train, *n_test)?;
            (a, Some(b))
        }
        DatasetSpec::Teacher {
            weights,
            n,
            interval,
        } => (
            gen_synthetic_1d(&SyntheticSpec {
                n: *n,
                interval: *interval,
                spacing: None,
                target: Target::Teacher {
                    weights: weights.clone(),
                },
            })?,
            None,
        ),
    };
    Ok(match loss {
        Some(k) => LoadedData {
            train: train.with_loss(k),
            test: test.map(|t| t.with_loss(k)),
        },
        None => LoadedData { train, test },
    })
}

/// Fraction of correctly classified samples.
pub fn accuracy(params: &NetworkParams, data: &Dataset) -> Result<f64> {
    let out = predict(params, data.inputs())?;
    let labels = data.labels();
    let hits = (0..out.rows())
        .filter(|&i| argmax(out.row(i)) == labels[i])
        .count();
    Ok(hits as f64 / out.rows().max(1) as f64)
}

/// Mean over MPC samples taken before `before` of the mean over layers.
pub fn mean_mpc(log: &TrainLog, before: usize) -> Option<f64> {
    let per_sample: Vec<f64> = log
        .mpc
        .iter()
        .filter(|s| s.epoch < before)
        .filter_map(|s| {
            let v: Vec<f64> = s.values.iter().flatten().copied().collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    (!per_sample.is_empty()).then(|| per_sample.iter().sum::<f64>() / per_sample.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauMerge {
    pub plateau: PlateauEvent,
    pub snapshot_epoch: usize,
    pub mpc: Vec<Option<f64>>,
    pub flagged: Vec<usize>,
    pub merge: MergeReport,
    pub merged_loss: f64,
    /// `|merged_loss − level| / level`.
    pub rel_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumStep {
    pub lifts: usize,
    pub widths: Vec<usize>,
    pub loss: f64,
    pub grad_l1: f64,
    /// Membership verdict of the lift that produced this network.
    pub lift_verified: Option<bool>,
    pub negative: usize,
    pub zero: usize,
    pub positive: usize,
    pub classification: SpectrumClass,
    pub asymmetry_rel: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub gamma: Option<f64>,
    pub epochs: usize,
    pub final_loss: f64,
    pub plateaus: Vec<PlateauEvent>,
    pub plateau_duration: usize,
    /// Mean MPC over the epochs every run of the sweep completed.
    pub mean_mpc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchRun {
    pub n: usize,
    /// Loss of the switched-in network on the new dataset.
    pub level: f64,
    /// Epochs after the switch until the loss fell below
    /// `escape_factor · level`.
    pub escape_epoch: Option<usize>,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retrained {
    pub epochs: usize,
    pub final_loss: f64,
    pub agreement: f64,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneResult {
    pub prune_epoch: usize,
    pub loss_at_prune: f64,
    pub mpc: Vec<Option<f64>>,
    pub flagged: Vec<usize>,
    pub merge: MergeReport,
    pub merged_loss: f64,
    /// Computed on the test set when there is one.
    pub agreement: AgreementReport,
    pub accuracy_original: Option<f64>,
    pub accuracy_pruned: Option<f64>,
    pub retrained: Option<Retrained>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProcedureOutcome {
    Train,
    PlateauMerge {
        events: Vec<PlateauMerge>,
        reference_final_loss: Option<f64>,
    },
    SpectrumLifts {
        steps: Vec<SpectrumStep>,
    },
    BnSweep {
        common_epochs: usize,
        runs: Vec<SweepRun>,
    },
    DataSwitch {
        switch_loss: f64,
        runs: Vec<SwitchRun>,
    },
    /// `result` is absent when no check ever flagged a layer.
    Prune {
        result: Option<PruneResult>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub seed: u64,
    pub widths: Vec<usize>,
    pub epochs: usize,
    pub final_loss: f64,
    pub final_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub plateaus: Vec<PlateauEvent>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub summary: Summary,
    pub params: NetworkParams,
    pub log: TrainLog,
    pub procedure: ProcedureOutcome,
    /// Hessian spectra in lift order (spectrum_lifts only).
    pub spectra: Vec<SpectrumReport>,
}

struct Bundle<'a> {
    dir: Option<&'a Path>,
}

impl Bundle<'_> {
    fn io(path: &Path, source: std::io::Error) -> ExperimentError {
        ExperimentError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    fn create(&self, rel: &str) -> Result<Option<PathBuf>> {
        let Some(dir) = self.dir else { return Ok(None) };
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Self::io(parent, e))?;
        }
        Ok(Some(path))
    }

    fn json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        if let Some(path) = self.create(rel)? {
            let text = serde_json::to_string_pretty(value).expect("report serialises");
            fs::write(&path, text + "\n").map_err(|e| Self::io(&path, e))?;
        }
        Ok(())
    }

    fn weights(&self, rel: &str, params: &NetworkParams) -> Result<()> {
        if let Some(path) = self.create(rel)? {
            save_weights(params, &path)?;
        }
        Ok(())
    }

    fn csv(&self, rel: &str, write: impl FnOnce(fs::File) -> std::io::Result<()>) -> Result<()> {
        if let Some(path) = self.create(rel)? {
            let file = fs::File::create(&path).map_err(|e| Self::io(&path, e))?;
            write(file).map_err(|e| Self::io(&path, e))?;
        }
        Ok(())
    }

    fn run(&self, prefix: &str, params: &NetworkParams, log: &TrainLog) -> Result<()> {
        self.weights(&format!("{prefix}weights.json"), params)?;
        self.csv(&format!("{prefix}trainlog.csv"), |f| log.write_csv(f))?;
        if !log.mpc.is_empty() {
            self.csv(&format!("{prefix}mpc.csv"), |f| write_mpc_csv(log, f))?;
        }
        Ok(())
    }
}

/// `epoch,layer,mpc` rows; layers without a value are skipped.
fn write_mpc_csv(log: &TrainLog, out: fs::File) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "layer", "mpc"])?;
    for s in &log.mpc {
        for (l, v) in s.values.iter().enumerate() {
            if let Some(v) = v {
                w.write_record([s.epoch.to_string(), (l + 1).to_string(), format!("{v:?}")])?;
            }
        }
    }
    w.flush()
}

fn staged<T>(stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        ExperimentError::Stage { .. } => e,
        other => ExperimentError::Stage {
            stage: stage.to_string(),
            source: Box::new(other),
        },
    })
}

fn init_params(cfg: &ExperimentConfig, init: &InitConfig, seed: u64) -> Result<NetworkParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(NetworkParams::init_gaussian(
        &cfg.architecture.widths,
        cfg.architecture.activation,
        init,
        &mut rng,
    )?)
}

fn check_dims(cfg: &ExperimentConfig, data: &Dataset) -> Result<()> {
    let w = &cfg.architecture.widths;
    if w[0] != data.input_dim() || w[w.len() - 1] != data.output_dim() {
        return Err(ExperimentError::Config(format!(
            "widths {w:?} do not fit data with {} inputs and {} outputs",
            data.input_dim(),
            data.output_dim()
        )));
    }
    Ok(())
}

/// Runs the configured pipeline. With `out` set, the bundle is written as
/// stages complete; a failing stage leaves `reports/error.json` behind.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentOutcome> {
    let bundle = Bundle { dir: out };
    let result = run_stages(cfg, &bundle);
    if let Err(ExperimentError::Stage { stage, source }) = &result {
        #[derive(Serialize)]
        struct ErrorReport<'a> {
            stage: &'a str,
            error: String,
        }
        // the original error matters more than a failure to record it
        let _ = bundle.json(
            "reports/error.json",
            &ErrorReport {
                stage,
                error: source.to_string(),
            },
        );
    }
    result
}

fn run_stages(cfg: &ExperimentConfig, bundle: &Bundle) -> Result<ExperimentOutcome> {
    staged("config", cfg.validate())?;
    bundle.json("config.json", cfg)?;
    let data = staged("data", load_dataset(&cfg.dataset, cfg.loss))?;
    staged("data", check_dims(cfg, &data.train))?;
    let p0 = staged("init", init_params(cfg, &cfg.init, cfg.seed))?;
    let stage = cfg.procedure.name();

    let (params, log, procedure, spectra) = match &cfg.procedure {
        Procedure::Train => {
            let (p, log) = staged("train", train_gd(&p0, &data.train, &cfg.optimizer))?;
            (p, log, ProcedureOutcome::Train, Vec::new())
        }
        Procedure::PlateauMerge {
            threshold,
            snapshot_every,
            reference_width,
        } => {
            let mut snaps: Vec<(usize, NetworkParams)> = Vec::new();
            let mut obs = |p: &NetworkParams, r: &EpochRecord| {
                if r.epoch.is_multiple_of(*snapshot_every) {
                    snaps.push((r.epoch, p.clone()));
                }
                Control::Continue
            };
            let (p, log) = staged(
                "train",
                train_gd_observed(&p0, &data.train, &cfg.optimizer, &mut obs),
            )?;
            bundle.run("", &p, &log)?;
            let events = staged(stage, plateau_merges(&log, &snaps, &data.train, *threshold))?;
            let reference_final_loss = match reference_width {
                Some(w) => Some(staged("reference", train_reference(cfg, *w, &data.train))?),
                None => None,
            };
            let events = events
                .into_iter()
                .enumerate()
                .map(|(i, (e, merged))| {
                    bundle.weights(&format!("merged/plateau-{i}.json"), &merged)?;
                    Ok(e)
                })
                .collect::<Result<Vec<_>>>()?;
            let outcome = ProcedureOutcome::PlateauMerge {
                events,
                reference_final_loss,
            };
            (p, log, outcome, Vec::new())
        }
        Procedure::SpectrumLifts { lifts, tau, cap } => {
            let (p, log) = staged("train", train_gd(&p0, &data.train, &cfg.optimizer))?;
            bundle.run("", &p, &log)?;
            let (steps, spectra) = staged(
                stage,
                spectrum_steps(&p, &data.train, lifts, *tau, *cap, bundle),
            )?;
            (p, log, ProcedureOutcome::SpectrumLifts { steps }, spectra)
        }
        Procedure::BnSweep { gammas } => {
            let mut runs = Vec::new();
            for g in gammas {
                let init = InitConfig {
                    batch_norm_gamma: *g,
                    ..cfg.init.clone()
                };
                let p = staged("init", init_params(cfg, &init, cfg.seed))?;
                let (p, log) = staged(stage, train_gd(&p, &data.train, &cfg.optimizer))?;
                bundle.run(&format!("runs/{}/", gamma_label(*g)), &p, &log)?;
                runs.push((*g, p, log));
            }
            let common = runs.iter().map(|r| r.2.records.len()).min().unwrap_or(0);
            let sweep = runs
                .iter()
                .map(|(g, _, log)| SweepRun {
                    gamma: *g,
                    epochs: log.records.len() - 1,
                    final_loss: log.final_loss().unwrap_or(f64::NAN),
                    plateaus: log.plateaus.clone(),
                    plateau_duration: log.plateaus.iter().map(|e| e.duration()).sum(),
                    mean_mpc: mean_mpc(log, common),
                })
                .collect();
            let (_, p, log) = runs.swap_remove(0);
            bundle.run("", &p, &log)?;
            let outcome = ProcedureOutcome::BnSweep {
                common_epochs: common,
                runs: sweep,
            };
            (p, log, outcome, Vec::new())
        }
        Procedure::DataSwitch {
            sizes,
            after_epochs,
            escape_factor,
        } => {
            let (p, log) = staged("train", train_gd(&p0, &data.train, &cfg.optimizer))?;
            bundle.run("", &p, &log)?;
            let DatasetSpec::Synthetic1d(base) = &cfg.dataset else {
                unreachable!("validated")
            };
            let mut runs = Vec::new();
            for &n in sizes {
                let spec = SyntheticSpec { n, ..base.clone() };
                let run = staged(
                    stage,
                    switch_run(&p, &spec, cfg, *after_epochs, *escape_factor, bundle),
                )?;
                runs.push(run);
            }
            let outcome = ProcedureOutcome::DataSwitch {
                switch_loss: log.final_loss().unwrap_or(f64::NAN),
                runs,
            };
            (p, log, outcome, Vec::new())
        }
        Procedure::Prune {
            threshold,
            check_every,
            retrain,
        } => {
            let mut last: Option<(usize, f64, diagnostics::MpcReport, NetworkParams)> = None;
            let mut failure = None;
            let mut obs = |p: &NetworkParams, r: &EpochRecord| {
                if !r.epoch.is_multiple_of(*check_every) {
                    return Control::Continue;
                }
                match diagnostics::mpc(p, &data.train, *threshold) {
                    Ok(m) => {
                        if !m.flagged.is_empty() {
                            last = Some((r.epoch, r.loss, m, p.clone()));
                        }
                        Control::Continue
                    }
                    Err(e) => {
                        failure = Some(e);
                        Control::Stop
                    }
                }
            };
            let (p, log) = staged(
                "train",
                train_gd_observed(&p0, &data.train, &cfg.optimizer, &mut obs),
            )?;
            if let Some(e) = failure {
                return staged("train", Err(e.into()));
            }
            bundle.run("", &p, &log)?;
            let result = match last {
                Some(found) => Some(staged(
                    stage,
                    prune_at(found, &data, cfg, *threshold, retrain.as_ref(), bundle),
                )?),
                None => None,
            };
            (p, log, ProcedureOutcome::Prune { result }, Vec::new())
        }
    };

    let test_accuracy = match &data.test {
        Some(t) if t.is_one_hot() => Some(staged("evaluate", accuracy(&params, t))?),
        _ => None,
    };
    let summary = Summary {
        name: cfg.name.clone(),
        seed: cfg.seed,
        widths: params.widths().to_vec(),
        epochs: log.records.len().saturating_sub(1),
        final_loss: log.final_loss().unwrap_or(f64::NAN),
        final_accuracy: log.records.last().and_then(|r| r.accuracy),
        test_accuracy,
        plateaus: log.plateaus.clone(),
    };
    if matches!(cfg.procedure, Procedure::Train) {
        bundle.run("", &params, &log)?;
    }
    bundle.json("reports/summary.json", &summary)?;
    bundle.json(&format!("reports/{stage}.json"), &procedure)?;
    Ok(ExperimentOutcome {
        summary,
        params,
        log,
        procedure,
        spectra,
    })
}

fn gamma_label(g: Option<f64>) -> String {
    match g {
        Some(g) => format!("gamma-{g}"),
        None => "no-bn".into(),
    }
}

fn plateau_merges(
    log: &TrainLog,
    snaps: &[(usize, NetworkParams)],
    data: &Dataset,
    threshold: f64,
) -> Result<Vec<(PlateauMerge, NetworkParams)>> {
    let mut out = Vec::new();
    for ev in &log.plateaus {
        let mid = (ev.start + ev.end) / 2;
        let Some((epoch, snap)) = snaps.iter().min_by_key(|(e, _)| e.abs_diff(mid)) else {
            break;
        };
        let report = diagnostics::mpc(snap, data, threshold)?;
        let (merged, merge) = crate::lifting::merge_linear_layers(snap, data, threshold)?;
        let merged_loss = loss(&merged, data)?;
        out.push((
            PlateauMerge {
                plateau: *ev,
                snapshot_epoch: *epoch,
                mpc: report.values(),
                flagged: report.flagged,
                merge,
                merged_loss,
                rel_gap: (merged_loss - ev.level).abs() / ev.level,
            },
            merged,
        ));
    }
    Ok(out)
}

fn train_reference(cfg: &ExperimentConfig, width: usize, data: &Dataset) -> Result<f64> {
    let w = &cfg.architecture.widths;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1000));
    let p = NetworkParams::init_gaussian(
        &[w[0], width, w[w.len() - 1]],
        cfg.architecture.activation,
        &cfg.init,
        &mut rng,
    )?;
    let (_, log) = train_gd(&p, data, &cfg.optimizer)?;
    Ok(log.final_loss().unwrap_or(f64::NAN))
}

fn spectrum_steps(
    base: &NetworkParams,
    data: &Dataset,
    lifts: &[LiftPlan],
    tau: f64,
    cap: usize,
    bundle: &Bundle,
) -> Result<(Vec<SpectrumStep>, Vec<SpectrumReport>)> {
    let mut steps = Vec::new();
    let mut spectra = Vec::new();
    let mut current = base.clone();
    for k in 0..=lifts.len() {
        let mut verified = None;
        if k > 0 {
            let plan = &lifts[k - 1];
            let (next, records) = multi_layer_lift(&current, data, std::slice::from_ref(plan))?;
            let report = verify_membership(&current, &next, data, &records[0].plan)?;
            verified = Some(report.overall);
            bundle.json(&format!("reports/lift-{k}.json"), &records[0].sidecar())?;
            current = next;
            bundle.weights(&format!("lifted/lift-{k}.json"), &current)?;
        }
        let s = spectrum(&current, data, tau, cap)?;
        steps.push(SpectrumStep {
            lifts: k,
            widths: current.widths().to_vec(),
            loss: loss(&current, data)?,
            grad_l1: criticality(&current, data, 0.0)?.grad_l1,
            lift_verified: verified,
            negative: s.negative,
            zero: s.zero,
            positive: s.positive,
            classification: s.classification,
            asymmetry_rel: s.asymmetry_rel,
        });
        spectra.push(s);
    }
    bundle.csv("eigenvalues.csv", |f| {
        let mut w = csv::Writer::from_writer(f);
        w.write_record(["lifts", "index", "eigenvalue"])?;
        for (k, s) in spectra.iter().enumerate() {
            for (i, v) in s.eigenvalues.iter().enumerate() {
                w.write_record([k.to_string(), i.to_string(), format!("{v:?}")])?;
            }
        }
        w.flush()
    })?;
    Ok((steps, spectra))
}

fn switch_run(
    params: &NetworkParams,
    spec: &SyntheticSpec,
    cfg: &ExperimentConfig,
    after_epochs: usize,
    escape_factor: f64,
    bundle: &Bundle,
) -> Result<SwitchRun> {
    let data = gen_synthetic_1d(spec)?;
    let level = loss(params, &data)?;
    let mut escape = None;
    let mut obs = |_: &NetworkParams, r: &EpochRecord| {
        if r.loss < escape_factor * level {
            escape = Some(r.epoch);
            return Control::Stop;
        }
        Control::Continue
    };
    let tc = TrainConfig {
        epochs: after_epochs,
        target_loss: None,
        target_grad_l1: None,
        ..cfg.optimizer.clone()
    };
    let (p, log) = train_gd_observed(params, &data, &tc, &mut obs)?;
    bundle.run(&format!("runs/n-{}/", spec.n), &p, &log)?;
    Ok(SwitchRun {
        n: spec.n,
        level,
        escape_epoch: escape,
        final_loss: log.final_loss().unwrap_or(f64::NAN),
    })
}

fn prune_at(
    (epoch, loss_at_prune, report, original): (usize, f64, diagnostics::MpcReport, NetworkParams),
    data: &LoadedData,
    cfg: &ExperimentConfig,
    threshold: f64,
    retrain: Option<&RetrainSpec>,
    bundle: &Bundle,
) -> Result<PruneResult> {
    let (merged, merge) = crate::lifting::merge_linear_layers(&original, &data.train, threshold)?;
    let merged_loss = loss(&merged, &data.train)?;
    let eval = data.test.as_ref().unwrap_or(&data.train);
    let agreement = prediction_agreement(&original, &merged, eval.inputs())?;
    let classify = eval.is_one_hot();
    let acc = |p: &NetworkParams| -> Result<Option<f64>> {
        Ok(if classify {
            Some(accuracy(p, eval)?)
        } else {
            None
        })
    };
    bundle.weights("prune/original.json", &original)?;
    bundle.weights("prune/pruned.json", &merged)?;
    let retrained = match retrain {
        Some(spec) => {
            let tc = TrainConfig {
                learning_rate: spec.learning_rate,
                epochs: spec.max_epochs,
                target_loss: Some(loss_at_prune),
                target_grad_l1: None,
                mpc_every: None,
                ..cfg.optimizer.clone()
            };
            let (p, log) = train_gd(&merged, &data.train, &tc)?;
            bundle.run("prune/retrained-", &p, &log)?;
            Some(Retrained {
                epochs: log.records.len() - 1,
                final_loss: log.final_loss().unwrap_or(f64::NAN),
                agreement: prediction_agreement(&original, &p, eval.inputs())?.agreement,
                accuracy: acc(&p)?,
            })
        }
        None => None,
    };
    Ok(PruneResult {
        prune_epoch: epoch,
        loss_at_prune,
        mpc: report.values(),
        flagged: report.flagged,
        merge,
        merged_loss,
        agreement,
        accuracy_original: acc(&original)?,
        accuracy_pruned: acc(&merged)?,
        retrained,
    })
}
