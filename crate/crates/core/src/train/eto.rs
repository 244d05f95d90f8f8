//! Two-stage baselines: the set model is fit with a task-agnostic loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::losses::{gaussian_nll_tape, interval_pinball_tape, mse_tape, pinball_tape};
use super::mala::Mala;
use super::{fit, BatchOut, Predictor, TrainConfig, TrainData, TrainReport};
use crate::autodiff::{forward_subst, Tape, Var};
use crate::error::{CroError, Result};
use crate::models::{cholesky_packed, Head, HeadVars, Mlp, ScoreModel};
use crate::tensor::Tensor;

/// Pinball (box), Gaussian NLL (ellipsoid) or contrastive-divergence NLL (PICNN).
pub fn train_eto(
    cfg: &TrainConfig,
    pred: &mut Predictor,
    data: &TrainData,
    report: &mut TrainReport,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    if pred.model.picnn().is_some() {
        let mut sampler = Mala::new(cfg.mala.step);
        let val_step = std::cell::Cell::new(cfg.mala.step);
        return fit(
            &mut pred.model,
            "eto",
            &data.train,
            cfg,
            &mut rng,
            report,
            |m, rows, rng| {
                let (tape, loss) = cd_loss(m, data, rows, cfg, &mut sampler, rng)?;
                sampler.adapt();
                val_step.set(sampler.step);
                let grads = tape.backward(loss)?.params(&m.params);
                Ok(BatchOut::plain(grads, tape.value(loss).item()))
            },
            |m| {
                if data.val.is_empty() {
                    return Ok(None);
                }
                let mut s = Mala::new(val_step.get());
                let mut r = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa11ce);
                let (tape, loss) = cd_loss(m, data, &data.val, cfg, &mut s, &mut r)?;
                Ok(Some(tape.value(loss).item()))
            },
        );
    }
    fit(
        &mut pred.model,
        "eto",
        &data.train,
        cfg,
        &mut rng,
        report,
        |m, rows, _| {
            let mut tape = Tape::new();
            let loss = likelihood_loss(&mut tape, m, data, rows, cfg.alpha)?;
            let grads = tape.backward(loss)?.params(&m.params);
            Ok(BatchOut::plain(grads, tape.value(loss).item()))
        },
        |m| {
            if data.val.is_empty() {
                return Ok(None);
            }
            let mut tape = Tape::new();
            let loss = likelihood_loss(&mut tape, m, data, &data.val, cfg.alpha)?;
            Ok(Some(tape.value(loss).item()))
        },
    )
}

fn likelihood_loss(
    tape: &mut Tape,
    m: &ScoreModel,
    data: &TrainData,
    rows: &[usize],
    alpha: f64,
) -> Result<Var> {
    let xv = tape.leaf(data.x.select_rows(rows));
    let yv = tape.leaf(data.y.select_rows(rows));
    match m.head_vars(tape, xv)? {
        HeadVars::Bounds { lo, hi } => interval_pinball_tape(tape, lo, hi, yv, alpha),
        HeadVars::Gaussian { mu, chol } => gaussian_nll_tape(tape, mu, chol, yv, m.y_dim()),
        HeadVars::Picnn(_) => unreachable!("PICNN heads use the sampling loss"),
    }
}

/// `mean s(x, y_data) - mean s(x, y_model) + w_zero mean s(x, y_data)²`, with
/// model samples drawn by MALA chains started at the data.
fn cd_loss(
    m: &ScoreModel,
    data: &TrainData,
    rows: &[usize],
    cfg: &TrainConfig,
    sampler: &mut Mala,
    rng: &mut ChaCha8Rng,
) -> Result<(Tape, Var)> {
    let picnn = m.picnn().expect("PICNN head");
    let xb = data.x.select_rows(rows);
    let yb = data.y.select_rows(rows);
    let gated = picnn.gated(&m.params, &xb)?;
    let k = cfg.mala.chains;
    let mut xs = Vec::with_capacity(rows.len() * k);
    let mut ys = Vec::with_capacity(rows.len() * k);
    for (i, g) in gated.iter().enumerate() {
        let energy = |y: &[f64]| g.score_grad(y);
        for _ in 0..k {
            ys.push(sampler.run(&energy, yb.row_slice(i), cfg.mala.burn_in, rng));
            xs.push(xb.row_slice(i).to_vec());
        }
    }
    let mut tape = Tape::new();
    let xd = tape.leaf(xb);
    let yd = tape.leaf(yb);
    let sd = m.scores_tape(&mut tape, xd, yd)?;
    let xm = tape.leaf(Tensor::from_rows(&xs)?);
    let ym = tape.leaf(Tensor::from_rows(&ys)?);
    let sm = m.scores_tape(&mut tape, xm, ym)?;
    let data_term = tape.mean(sd);
    let model_term = tape.mean(sm);
    let sd2 = tape.square(sd);
    let reg = tape.mean(sd2);
    let reg = tape.scale(reg, cfg.w_zero);
    let diff = tape.sub(data_term, model_term)?;
    let loss = tape.add(diff, reg)?;
    Ok((tape, loss))
}

fn point_net(m: &ScoreModel) -> Result<Mlp> {
    match &m.head {
        Head::ResidualBox { point, .. } | Head::ResidualEllipsoid { point, .. } => {
            Ok(point.clone())
        }
        _ => Err(CroError::InvalidArgument(
            "residual baselines need a point-prediction head".into(),
        )),
    }
}

fn fit_point(
    cfg: &TrainConfig,
    pred: &mut Predictor,
    data: &TrainData,
    report: &mut TrainReport,
) -> Result<Tensor> {
    let point = point_net(&pred.model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let loss_on = |m: &ScoreModel, tape: &mut Tape, rows: &[usize]| -> Result<Var> {
        let xv = tape.leaf(data.x.select_rows(rows));
        let yv = tape.leaf(data.y.select_rows(rows));
        let mu = point.forward(tape, &m.params, xv)?;
        mse_tape(tape, mu, yv)
    };
    fit(
        &mut pred.model,
        "point",
        &data.train,
        cfg,
        &mut rng,
        report,
        |m, rows, _| {
            let mut tape = Tape::new();
            let loss = loss_on(m, &mut tape, rows)?;
            let grads = tape.backward(loss)?.params(&m.params);
            Ok(BatchOut::plain(grads, tape.value(loss).item()))
        },
        |m| {
            if data.val.is_empty() {
                return Ok(None);
            }
            let mut tape = Tape::new();
            let loss = loss_on(m, &mut tape, &data.val)?;
            Ok(Some(tape.value(loss).item()))
        },
    )?;
    // residuals on every row
    let mut tape = Tape::new();
    let xv = tape.leaf(data.x.clone());
    let mu = point.forward(&mut tape, &pred.model.params, xv)?;
    Ok(data.y.zip_map(tape.value(mu), |a, b| a - b))
}

/// Packed Cholesky factor of the empirical residual covariance over `rows`.
fn residual_chol(res: &Tensor, rows: &[usize]) -> Result<Vec<f64>> {
    let n = res.cols();
    let mut cov = vec![0.0; n * n];
    for &r in rows {
        let v = res.row_slice(r);
        for i in 0..n {
            for j in 0..n {
                cov[i * n + j] += v[i] * v[j] / rows.len() as f64;
            }
        }
    }
    let jitter = 1e-9 * (0..n).map(|i| cov[i * n + i]).sum::<f64>().max(1e-12) / n as f64;
    for i in 0..n {
        cov[i * n + i] += jitter;
    }
    cholesky_packed(&cov, n)
}

fn set_shared_chol(m: &mut ScoreModel, l: Vec<f64>) {
    if let Head::ResidualEllipsoid { chol, .. } = &mut m.head {
        *chol = l;
    }
}

/// Point model on squared error, then a per-input radius fit by quantile
/// regression at level `1 - α` on residual magnitudes: per-dimension absolute
/// residuals (box) or the whitened residual norm (ellipsoid).
pub fn train_eto_sll(
    cfg: &TrainConfig,
    pred: &mut Predictor,
    data: &TrainData,
    report: &mut TrainReport,
) -> Result<()> {
    let res = fit_point(cfg, pred, data, report)?;
    let (radius, target) = match &pred.model.head {
        Head::ResidualBox { radius, .. } => (radius.clone(), res.map(f64::abs)),
        Head::ResidualEllipsoid {
            radius: Some(radius),
            ..
        } => {
            let radius = radius.clone();
            let l = residual_chol(&res, &data.train)?;
            let n = res.cols();
            let norms: Vec<f64> = (0..res.rows())
                .map(|r| {
                    let w = forward_subst(&l, res.row_slice(r), n);
                    w.iter().map(|v| v * v).sum::<f64>().sqrt()
                })
                .collect();
            set_shared_chol(&mut pred.model, l);
            (radius, Tensor::column(&norms))
        }
        _ => {
            return Err(CroError::InvalidArgument(
                "ETO_SLL needs a residual box or scaled residual ellipsoid head".into(),
            ))
        }
    };
    let beta = 1.0 - cfg.alpha;
    let loss_on = |m: &ScoreModel, tape: &mut Tape, rows: &[usize]| -> Result<Var> {
        let xv = tape.leaf(data.x.select_rows(rows));
        let tv = tape.leaf(target.select_rows(rows));
        let r = radius.forward(tape, &m.params, xv)?;
        let r = tape.softplus(r);
        let p = pinball_tape(tape, beta, r, tv)?;
        Ok(tape.mean(p))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    fit(
        &mut pred.model,
        "radius",
        &data.train,
        cfg,
        &mut rng,
        report,
        |m, rows, _| {
            let mut tape = Tape::new();
            let loss = loss_on(m, &mut tape, rows)?;
            let grads = tape.backward(loss)?.params(&m.params);
            Ok(BatchOut::plain(grads, tape.value(loss).item()))
        },
        |m| {
            if data.val.is_empty() {
                return Ok(None);
            }
            let mut tape = Tape::new();
            let loss = loss_on(m, &mut tape, &data.val)?;
            Ok(Some(tape.value(loss).item()))
        },
    )
}

/// Point model on squared error with one global residual covariance; the
/// set shape is identical for every input.
pub fn train_eto_jc(
    cfg: &TrainConfig,
    pred: &mut Predictor,
    data: &TrainData,
    report: &mut TrainReport,
) -> Result<()> {
    if !matches!(
        pred.model.head,
        Head::ResidualEllipsoid { radius: None, .. }
    ) {
        return Err(CroError::InvalidArgument(
            "ETO_JC needs an unscaled residual ellipsoid head".into(),
        ));
    }
    let res = fit_point(cfg, pred, data, report)?;
    let l = residual_chol(&res, &data.train)?;
    set_shared_chol(&mut pred.model, l);
    Ok(())
}
