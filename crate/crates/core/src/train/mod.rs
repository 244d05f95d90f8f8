//! Training (two-stage baselines and end-to-end through the robust
//! decision), inference and evaluation.

mod e2e;
mod eto;
pub mod eval;
pub mod losses;
pub mod mala;
mod pool;

use std::fmt;
use std::str::FromStr;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conformal::{self, CalibrationRecord, QMIN_SLACK};
use crate::error::{CroError, Result};
use crate::models::{PicnnConfig, Representation, ScoreModel, SetGeometry};
use crate::optim::{ParamId, ParamStore};
use crate::problems::{Dataset, FeatureScaler, TaskSpec};
use crate::reform::Standardizer;
use crate::solver::SolverOptions;
use crate::tensor::Tensor;

pub use e2e::{e2e_objective, train_e2e};
pub use eto::{train_eto, train_eto_jc, train_eto_sll};
pub use eval::{
    bound_violations_total, decide, evaluate, infer, read_metrics_csv, write_metrics_csv, Decision,
    EvalReport, MetricsRow,
};
pub use mala::{Mala, MalaConfig};
pub use pool::{par_map, resolve_threads};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "E2E")]
    E2e,
    #[serde(rename = "ETO")]
    Eto,
    #[serde(rename = "ETO_SLL")]
    EtoSll,
    #[serde(rename = "ETO_JC")]
    EtoJc,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::E2e => "E2E",
            Method::Eto => "ETO",
            Method::EtoSll => "ETO_SLL",
            Method::EtoJc => "ETO_JC",
        })
    }
}

impl FromStr for Method {
    type Err = CroError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "E2E" => Ok(Self::E2e),
            "ETO" => Ok(Self::Eto),
            "ETO_SLL" => Ok(Self::EtoSll),
            "ETO_JC" => Ok(Self::EtoJc),
            other => Err(CroError::InvalidArgument(format!(
                "unknown method `{other}` (expected E2E, ETO, ETO_SLL or ETO_JC)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub representation: Representation,
    pub alpha: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Weight on the task loss in the end-to-end objective (box, ellipsoid).
    pub w_task: f64,
    /// Squared-score regularizer of the PICNN baseline.
    pub w_zero: f64,
    /// `q²` regularizer of end-to-end PICNN training.
    pub w_q: f64,
    /// Share of each minibatch used to compute `q` during end-to-end training.
    pub cal_fraction: f64,
    /// Share of the training rows held out for early stopping.
    pub val_fraction: f64,
    /// Hidden widths of MLP backbones.
    pub hidden: Vec<usize>,
    pub picnn: PicnnConfig,
    pub mala: MalaConfig,
    /// Solver options for training solves (`rho` smooths LP decisions).
    pub solver: SolverOptions,
    /// Two-stage epochs run before end-to-end training from scratch.
    pub pretrain_epochs: usize,
    /// Abort an epoch when more than this share of decision solves fail.
    pub max_skip_rate: f64,
    /// Worker threads for decision solves; 0 uses every core.
    pub threads: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::E2e,
            representation: Representation::Ellipsoid,
            alpha: 0.1,
            batch_size: 256,
            epochs: 100,
            patience: 10,
            lr: 1e-3,
            weight_decay: 0.0,
            w_task: 0.9,
            w_zero: 1.0,
            w_q: 0.01,
            cal_fraction: 0.5,
            val_fraction: 0.2,
            hidden: vec![64, 64],
            picnn: PicnnConfig::default(),
            mala: MalaConfig::default(),
            solver: SolverOptions::default(),
            pretrain_epochs: 100,
            max_skip_rate: 0.05,
            threads: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CroError::InvalidArgument(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.w_task) {
            return bad("w_task must lie in [0, 1]");
        }
        if self.batch_size < 4 {
            return bad("batch_size must be at least 4");
        }
        if !(self.cal_fraction > 0.0 && self.cal_fraction < 1.0) {
            return bad("cal_fraction must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.w_q < 0.0 || self.w_zero < 0.0 {
            return bad("lr must be positive and regularizer weights nonnegative");
        }
        if self.mala.chains == 0 || !(self.mala.step > 0.0) {
            return bad("MALA needs at least one chain and a positive step");
        }
        Ok(())
    }
}

/// A score model with the preprocessing it was trained under and, once
/// calibrated, its conformal threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Predictor {
    pub model: ScoreModel,
    pub x_scaler: FeatureScaler,
    pub y_std: Standardizer,
    pub method: Method,
    pub calibration: Option<CalibrationRecord>,
}

impl Predictor {
    /// Fits the feature and target standardizations on `data`.
    pub fn new(model: ScoreModel, data: &Dataset, method: Method) -> Result<Self> {
        if data.x_dim() != model.x_dim() || data.y_dim() != model.y_dim() {
            return Err(CroError::Shape(format!(
                "model expects x{} / y{}, data has x{} / y{}",
                model.x_dim(),
                model.y_dim(),
                data.x_dim(),
                data.y_dim()
            )));
        }
        Ok(Self {
            model,
            x_scaler: FeatureScaler::fit(&data.x),
            y_std: Standardizer::fit(&data.y),
            method,
            calibration: None,
        })
    }

    pub fn std_x(&self, x: &Tensor) -> Tensor {
        self.x_scaler.transform(x)
    }

    pub fn std_y(&self, y: &Tensor) -> Tensor {
        self.y_std.to_std(y)
    }

    /// Task in the model's standardized target coordinates.
    pub fn task(&self, task: &TaskSpec) -> TaskSpec {
        self.y_std.wrap_task(task)
    }

    /// Scores of raw `(x, y)` pairs.
    pub fn scores(&self, data: &Dataset) -> Result<Vec<f64>> {
        self.model
            .scores(&self.std_x(&data.x), &self.std_y(&data.y))
    }

    /// Calibrates on raw data and stores the record.
    pub fn calibrate(&mut self, cal: &Dataset, alpha: f64) -> Result<CalibrationRecord> {
        let rec = conformal::calibrate_scores(&self.scores(cal)?, alpha)?;
        info!(
            "calibrated on {} points at alpha {alpha}: rank {} q {:.6}",
            rec.m, rec.k, rec.q
        );
        self.calibration = Some(rec.clone());
        Ok(rec)
    }

    pub fn record(&self) -> Result<&CalibrationRecord> {
        self.calibration.as_ref().ok_or_else(|| {
            CroError::Uncalibrated(
                "run calibration on held-out data before solving or evaluating".into(),
            )
        })
    }
}

/// Standardized training rows with an early-stopping holdout.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub x: Tensor,
    pub y: Tensor,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl TrainData {
    pub fn prepare(pred: &Predictor, data: &Dataset, val_fraction: f64, seed: u64) -> Result<Self> {
        if data.len() < 2 {
            return Err(CroError::Data("need at least two training rows".into()));
        }
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
        let n_val = ((data.len() as f64) * val_fraction).round() as usize;
        let n_val = n_val.min(data.len() - 1);
        let val = idx.split_off(data.len() - n_val);
        Ok(Self {
            x: pred.std_x(&data.x),
            y: pred.std_y(&data.y),
            train: idx,
            val,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub stage: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Largest `|q|` seen in the epoch (end-to-end only).
    pub q_abs_max: Option<f64>,
    pub skipped: usize,
    pub attempted: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    /// Per stage: epoch whose parameters were kept (0 = initial).
    pub best_epochs: Vec<(String, usize)>,
}

impl TrainReport {
    pub fn epochs_run(&self) -> usize {
        self.history.len()
    }
}

pub(crate) struct BatchOut {
    pub grads: Vec<(ParamId, Tensor)>,
    pub loss: f64,
    pub skipped: usize,
    pub attempted: usize,
    pub q: Option<f64>,
}

impl BatchOut {
    pub fn plain(grads: Vec<(ParamId, Tensor)>, loss: f64) -> Self {
        Self {
            grads,
            loss,
            skipped: 0,
            attempted: 0,
            q: None,
        }
    }
}

/// Minibatch Adam with validation early stopping; the best parameters
/// (including the untrained ones, "epoch 0") are restored at the end.
pub(crate) fn fit(
    model: &mut ScoreModel,
    stage: &str,
    rows: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    report: &mut TrainReport,
    mut step: impl FnMut(&ScoreModel, &[usize], &mut ChaCha8Rng) -> Result<BatchOut>,
    mut val: impl FnMut(&ScoreModel) -> Result<Option<f64>>,
) -> Result<()> {
    if cfg.epochs == 0 || rows.is_empty() {
        return Ok(());
    }
    model.params.adam.lr = cfg.lr;
    model.params.adam.weight_decay = cfg.weight_decay;
    model.params.reset_moments();
    let mut best = val(model)?
        .filter(|v| v.is_finite())
        .unwrap_or(f64::INFINITY);
    let mut best_params: ParamStore = model.params.clone();
    let mut best_epoch = 0;
    let mut wait = 0;
    let mut order = rows.to_vec();
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        let (mut loss_sum, mut batches, mut skipped, mut attempted) = (0.0, 0usize, 0usize, 0usize);
        let mut q_abs_max: Option<f64> = None;
        for batch in order.chunks(cfg.batch_size) {
            let out = step(model, batch, rng)?;
            if !out.grads.is_empty() && model.params.adam_step(&out.grads) {
                model.project();
            }
            loss_sum += out.loss;
            batches += 1;
            skipped += out.skipped;
            attempted += out.attempted;
            if let Some(q) = out.q {
                q_abs_max = Some(q_abs_max.unwrap_or(0.0).max(q.abs()));
            }
        }
        if attempted > 0 && skipped as f64 > cfg.max_skip_rate * attempted as f64 {
            return Err(CroError::Training(format!(
                "{skipped} of {attempted} decision solves failed in epoch {epoch} of {stage}"
            )));
        }
        let train_loss = loss_sum / batches.max(1) as f64;
        let val_loss = val(model)?.unwrap_or(train_loss);
        info!("{stage} epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        report.history.push(EpochStats {
            stage: stage.to_string(),
            epoch,
            train_loss,
            val_loss,
            q_abs_max,
            skipped,
            attempted,
        });
        if val_loss < best {
            best = val_loss;
            best_params = model.params.clone();
            best_epoch = epoch;
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.patience {
                info!("{stage}: no improvement for {wait} epochs, stopping at epoch {epoch}");
                break;
            }
        }
    }
    model.params = best_params;
    report.best_epochs.push((stage.to_string(), best_epoch));
    Ok(())
}

/// Untrained model for a method and representation.
pub fn build_model(cfg: &TrainConfig, x_dim: usize, y_dim: usize) -> Result<ScoreModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h = &cfg.hidden;
    let unsupported = || {
        Err(CroError::InvalidArgument(format!(
            "{} does not support the {} representation",
            cfg.method, cfg.representation
        )))
    };
    match (cfg.method, cfg.representation) {
        (Method::Eto | Method::E2e, Representation::Box) => {
            Ok(ScoreModel::new_box(x_dim, y_dim, h, &mut rng))
        }
        (Method::Eto | Method::E2e, Representation::Ellipsoid) => {
            Ok(ScoreModel::new_ellipsoid(x_dim, y_dim, h, &mut rng))
        }
        (Method::Eto | Method::E2e, Representation::Picnn) => {
            ScoreModel::new_picnn(x_dim, y_dim, cfg.picnn.clone(), &mut rng)
        }
        (Method::EtoSll, Representation::Box) => {
            Ok(ScoreModel::new_residual_box(x_dim, y_dim, h, &mut rng))
        }
        (Method::EtoSll, Representation::Ellipsoid) => Ok(ScoreModel::new_residual_ellipsoid(
            x_dim, y_dim, h, true, &mut rng,
        )),
        (Method::EtoJc, Representation::Ellipsoid) => Ok(ScoreModel::new_residual_ellipsoid(
            x_dim, y_dim, h, false, &mut rng,
        )),
        _ => unsupported(),
    }
}

/// Builds, trains and returns an (uncalibrated) predictor. End-to-end
/// training starts from a freshly trained two-stage model.
pub fn train(
    cfg: &TrainConfig,
    data: &Dataset,
    task: &TaskSpec,
) -> Result<(Predictor, TrainReport)> {
    cfg.validate()?;
    if task.n() != data.y_dim() {
        return Err(CroError::Shape(format!(
            "task `{}` expects {} targets, data has {}",
            task.name,
            task.n(),
            data.y_dim()
        )));
    }
    let model = build_model(cfg, data.x_dim(), data.y_dim())?;
    let mut pred = Predictor::new(model, data, cfg.method)?;
    let td = TrainData::prepare(&pred, data, cfg.val_fraction, cfg.seed)?;
    let mut report = TrainReport::default();
    match cfg.method {
        Method::Eto => train_eto(cfg, &mut pred, &td, &mut report)?,
        Method::EtoSll => train_eto_sll(cfg, &mut pred, &td, &mut report)?,
        Method::EtoJc => train_eto_jc(cfg, &mut pred, &td, &mut report)?,
        Method::E2e => {
            let pre = TrainConfig {
                method: Method::Eto,
                epochs: cfg.pretrain_epochs,
                ..cfg.clone()
            };
            train_eto(&pre, &mut pred, &td, &mut report)?;
            train_e2e(cfg, &mut pred, &td, task, &mut report)?;
        }
    }
    pred.method = cfg.method;
    Ok((pred, report))
}

/// Threshold actually used for a set: raised to the smallest attainable
/// score (plus slack) when the calibrated one would leave the set empty.
/// The flag says whether it was raised.
pub fn effective_q(geometry: &SetGeometry, q: f64, seed: u64) -> (f64, bool) {
    match geometry {
        SetGeometry::Box { lo, hi } => {
            let q_min = -lo
                .iter()
                .zip(hi)
                .map(|(l, h)| (h - l) / 2.0)
                .fold(f64::INFINITY, f64::min);
            if q < q_min + QMIN_SLACK {
                (q_min + QMIN_SLACK, true)
            } else {
                (q, false)
            }
        }
        SetGeometry::Ellipsoid { .. } => {
            if q < QMIN_SLACK {
                (QMIN_SLACK, true)
            } else {
                (q, false)
            }
        }
        SetGeometry::Picnn(g) => {
            let out = conformal::ensure_nonempty(g, q, seed);
            (out.q, out.raised)
        }
    }
}

/// Random split of a minibatch into `(calibration, prediction)` parts; both
/// are nonempty.
pub(crate) fn split_batch(
    idx: &[usize],
    cal_fraction: f64,
    rng: &mut impl Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut v = idx.to_vec();
    v.shuffle(rng);
    let n_cal = ((v.len() as f64) * cal_fraction).round() as usize;
    let n_cal = n_cal.clamp(1, v.len() - 1);
    let pred = v.split_off(n_cal);
    (v, pred)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in [Method::E2e, Method::Eto, Method::EtoSll, Method::EtoJc] {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert_eq!("eto-sll".parse::<Method>().unwrap(), Method::EtoSll);
        assert!("bogus".parse::<Method>().is_err());
    }

    #[test]
    fn batch_split_is_disjoint_and_exhaustive() {
        let idx: Vec<usize> = (10..30).collect();
        let (cal, pred) = split_batch(&idx, 0.5, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!((cal.len(), pred.len()), (10, 10));
        let mut all: Vec<usize> = cal.iter().chain(&pred).copied().collect();
        all.sort_unstable();
        assert_eq!(all, idx);
    }

    #[test]
    fn box_threshold_guard() {
        let g = SetGeometry::Box {
            lo: vec![0.0, 0.0],
            hi: vec![1.0, 4.0],
        };
        assert_eq!(effective_q(&g, 0.1, 0), (0.1, false));
        let (q, raised) = effective_q(&g, -0.7, 0);
        assert!(raised && (q + 0.5).abs() < 1e-8);
    }
}
