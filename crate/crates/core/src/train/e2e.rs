//! End-to-end training through the conformal threshold and the robust decision.

use log::debug;
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::losses::{gaussian_nll_tape, interval_pinball_tape};
use super::{
    effective_q, fit, par_map, split_batch, BatchOut, Predictor, TrainConfig, TrainData,
    TrainReport,
};
use crate::autodiff::{Tape, Var};
use crate::conformal::calibrate_scores;
use crate::error::Result;
use crate::models::{HeadVars, ScoreModel, SetGeometry};
use crate::optim::ParamId;
use crate::problems::TaskSpec;
use crate::reform::{reform, GeometryGrad};
use crate::solver::SolverOptions;
use crate::tensor::Tensor;

/// Per minibatch: split into calibration and prediction halves, take `q`
/// from the calibration scores only, solve the robust problem for every
/// prediction row and backpropagate the realized task loss through the
/// decision, the set parameters and `q`.
pub fn train_e2e(
    cfg: &TrainConfig,
    pred: &mut Predictor,
    data: &TrainData,
    task: &TaskSpec,
    report: &mut TrainReport,
) -> Result<()> {
    cfg.validate()?;
    let task = pred.task(task);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(4));
    fit(
        &mut pred.model,
        "e2e",
        &data.train,
        cfg,
        &mut rng,
        report,
        |m, rows, rng| {
            let (cal, prd) = split_batch(rows, cfg.cal_fraction, rng);
            e2e_batch(m, &task, data, &cal, &prd, cfg)
        },
        |m| {
            if data.val.len() < 4 {
                return Ok(None);
            }
            let half = data.val.len() / 2;
            validation_loss(m, &task, data, &data.val[..half], &data.val[half..], cfg).map(Some)
        },
    )
}

struct SampleOut {
    loss: f64,
    grad: GeometryGrad,
    raised: bool,
}

fn sample_grad(
    geom: &SetGeometry,
    q: f64,
    task: &TaskSpec,
    y: &[f64],
    opts: &SolverOptions,
    seed: u64,
) -> Result<SampleOut> {
    let (q_eff, raised) = effective_q(geom, q, seed);
    let r = reform(geom, q_eff, task)?;
    let res = r.solve(opts)?;
    let z = r.decision(&res);
    let loss = task.loss(y, &z);
    let gz = task.loss_grad_z(y, &z);
    let mut dl = DVector::zeros(r.program.num_vars());
    dl.rows_mut(0, gz.len()).copy_from(&gz);
    let adj = res.differentiate_solution(&r.program, &dl)?;
    Ok(SampleOut {
        loss,
        grad: r.pullback(&adj, geom),
        raised,
    })
}

fn geometries(
    m: &ScoreModel,
    tape: &Tape,
    head: &HeadVars,
    x: &Tensor,
) -> Result<Vec<SetGeometry>> {
    Ok(match head {
        HeadVars::Bounds { lo, hi } => (0..x.rows())
            .map(|i| SetGeometry::Box {
                lo: tape.value(*lo).row_slice(i).to_vec(),
                hi: tape.value(*hi).row_slice(i).to_vec(),
            })
            .collect(),
        HeadVars::Gaussian { mu, chol } => (0..x.rows())
            .map(|i| SetGeometry::Ellipsoid {
                mu: tape.value(*mu).row_slice(i).to_vec(),
                chol: tape.value(*chol).row_slice(i).to_vec(),
            })
            .collect(),
        HeadVars::Picnn(_) => m.geometries(x)?,
    })
}

/// Minibatch objective and its parameter gradient, with `q` calibrated on
/// the `cal` rows and the robust decision solved for the `prd` rows. `task`
/// must already be in standardized target coordinates.
pub fn e2e_objective(
    m: &ScoreModel,
    task: &TaskSpec,
    data: &TrainData,
    cal: &[usize],
    prd: &[usize],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<(ParamId, Tensor)>)> {
    let out = e2e_batch(m, task, data, cal, prd, cfg)?;
    Ok((out.loss, out.grads))
}

fn e2e_batch(
    m: &ScoreModel,
    task: &TaskSpec,
    data: &TrainData,
    cal: &[usize],
    prd: &[usize],
    cfg: &TrainConfig,
) -> Result<BatchOut> {
    let mut tape = Tape::new();
    let xc = tape.leaf(data.x.select_rows(cal));
    let yc = tape.leaf(data.y.select_rows(cal));
    let sc = m.scores_tape(&mut tape, xc, yc)?;
    let rec = calibrate_scores(tape.value(sc).data(), cfg.alpha)?;
    let q = rec.finite_q()?;

    let xp_t = data.x.select_rows(prd);
    let yp_t = data.y.select_rows(prd);
    let xp = tape.leaf(xp_t.clone());
    let head = m.head_vars(&mut tape, xp)?;
    let geoms = geometries(m, &tape, &head, &xp_t)?;
    let opts = &cfg.solver;
    let outs = par_map(&geoms, cfg.threads, |i, g| {
        sample_grad(
            g,
            q,
            task,
            yp_t.row_slice(i),
            opts,
            cfg.seed ^ prd[i] as u64,
        )
    });

    let is_picnn = matches!(head, HeadVars::Picnn(_));
    let ok = outs.iter().filter(|o| o.is_ok()).count();
    let skipped = outs.len() - ok;
    for e in outs.iter().filter_map(|o| o.as_ref().err()) {
        debug!("skipping sample: {e}");
    }
    let task_weight = if is_picnn { 1.0 } else { cfg.w_task };
    let w = if ok > 0 { task_weight / ok as f64 } else { 0.0 };

    let p = prd.len();
    let mut seeds: Vec<(Var, Tensor)> = Vec::new();
    let mut dq_total = 0.0;
    let mut loss_sum = 0.0;
    match &head {
        HeadVars::Bounds { lo, hi } => {
            let n = m.y_dim();
            let (mut slo, mut shi) = (Tensor::zeros(p, n), Tensor::zeros(p, n));
            for (i, o) in outs.iter().enumerate() {
                let Ok(o) = o else { continue };
                loss_sum += o.loss;
                if let GeometryGrad::Box { dlo, dhi, dq } = &o.grad {
                    for j in 0..n {
                        slo.set(i, j, w * dlo[j]);
                        shi.set(i, j, w * dhi[j]);
                    }
                    if !o.raised {
                        dq_total += w * dq;
                    }
                }
            }
            seeds.push((*lo, slo));
            seeds.push((*hi, shi));
        }
        HeadVars::Gaussian { mu, chol } => {
            let n = m.y_dim();
            let t = n * (n + 1) / 2;
            let (mut smu, mut sch) = (Tensor::zeros(p, n), Tensor::zeros(p, t));
            for (i, o) in outs.iter().enumerate() {
                let Ok(o) = o else { continue };
                loss_sum += o.loss;
                if let GeometryGrad::Ellipsoid { dmu, dchol, dq } = &o.grad {
                    for j in 0..n {
                        smu.set(i, j, w * dmu[j]);
                    }
                    for j in 0..t {
                        sch.set(i, j, w * dchol[j]);
                    }
                    if !o.raised {
                        dq_total += w * dq;
                    }
                }
            }
            seeds.push((*mu, smu));
            seeds.push((*chol, sch));
        }
        HeadVars::Picnn(ctx) => {
            let picnn = m.picnn().expect("PICNN head");
            let (d, n, depth) = (picnn.config.hidden, m.y_dim(), picnn.config.layers);
            for l in 0..=depth {
                let rows = if l == depth { 1 } else { d };
                let mut sb = Tensor::zeros(p, rows);
                let mut w_parts = ctx.w_gates[l]
                    .zip(ctx.w_bars[l])
                    .map(|(g, b)| (g, b, Tensor::zeros(p, d), Tensor::zeros(rows, d)));
                let mut v_parts = ctx.v_gates[l]
                    .zip(ctx.v_bars[l])
                    .map(|(g, b)| (g, b, Tensor::zeros(p, n), Tensor::zeros(rows, n)));
                for (i, o) in outs.iter().enumerate() {
                    let Ok(o) = o else { continue };
                    let GeometryGrad::Picnn { dw, dv, db, .. } = &o.grad else {
                        continue;
                    };
                    for r in 0..rows {
                        sb.set(i, r, w * db[l][r]);
                    }
                    if let Some((gv, bv, sg, sbar)) = w_parts.as_mut() {
                        pull_gated(&tape, *gv, *bv, &dw[l], i, rows, d, w, sg, sbar);
                    }
                    if let Some((gv, bv, sg, sbar)) = v_parts.as_mut() {
                        pull_gated(&tape, *gv, *bv, &dv[l], i, rows, n, w, sg, sbar);
                    }
                }
                seeds.push((ctx.biases[l], sb));
                for (g, b, sg, sbar) in w_parts.into_iter().chain(v_parts) {
                    seeds.push((g, sg));
                    seeds.push((b, sbar));
                }
            }
            for o in outs.iter().flatten() {
                loss_sum += o.loss;
                if !o.raised {
                    dq_total += w * o.grad.dq();
                }
            }
            dq_total += 2.0 * cfg.w_q * q;
        }
    }
    if let Some(k) = rec.grad_index {
        let mut s = Tensor::zeros(cal.len(), 1);
        s.set(k, 0, dq_total);
        seeds.push((sc, s));
    }
    let task_loss = if ok > 0 { loss_sum / ok as f64 } else { 0.0 };
    let mut loss = task_weight * task_loss;
    if !is_picnn && cfg.w_task < 1.0 {
        let yp = tape.leaf(yp_t);
        let aux = match &head {
            HeadVars::Bounds { lo, hi } => {
                interval_pinball_tape(&mut tape, *lo, *hi, yp, cfg.alpha)?
            }
            HeadVars::Gaussian { mu, chol } => {
                gaussian_nll_tape(&mut tape, *mu, *chol, yp, m.y_dim())?
            }
            HeadVars::Picnn(_) => unreachable!(),
        };
        loss += (1.0 - cfg.w_task) * tape.value(aux).item();
        seeds.push((aux, Tensor::scalar(1.0 - cfg.w_task)));
    } else if is_picnn {
        loss += cfg.w_q * q * q;
    }
    let grads = tape.backward_seeded(&seeds)?.params(&m.params);
    Ok(BatchOut {
        grads,
        loss,
        skipped,
        attempted: outs.len(),
        q: Some(q),
    })
}

/// Gated matrix `M = M̄ diag(g)`: `∂M̄[r, c] += dM[r, c] g[c]`,
/// `∂g[c] = Σ_r dM[r, c] M̄[r, c]`.
#[allow(clippy::too_many_arguments)]
fn pull_gated(
    tape: &Tape,
    gate: Var,
    bar: Var,
    dm: &[f64],
    i: usize,
    rows: usize,
    cols: usize,
    w: f64,
    seed_gate: &mut Tensor,
    seed_bar: &mut Tensor,
) {
    let g = tape.value(gate).row_slice(i);
    let mbar = tape.value(bar).data();
    for c in 0..cols {
        let mut acc = 0.0;
        for r in 0..rows {
            let d = w * dm[r * cols + c];
            acc += d * mbar[r * cols + c];
            seed_bar.data_mut()[r * cols + c] += d * g[c];
        }
        seed_gate.set(i, c, acc);
    }
}

/// Mean realized task loss on `eval` rows with `q` calibrated on `cal` rows.
fn validation_loss(
    m: &ScoreModel,
    task: &TaskSpec,
    data: &TrainData,
    cal: &[usize],
    eval: &[usize],
    cfg: &TrainConfig,
) -> Result<f64> {
    let scores = m.scores(&data.x.select_rows(cal), &data.y.select_rows(cal))?;
    let q = calibrate_scores(&scores, cfg.alpha)?.finite_q()?;
    let xe = data.x.select_rows(eval);
    let geoms = m.geometries(&xe)?;
    let opts = cfg.solver.evaluation();
    let losses = par_map(&geoms, cfg.threads, |i, g| -> Result<f64> {
        let (q_eff, _) = effective_q(g, q, cfg.seed ^ eval[i] as u64);
        let r = reform(g, q_eff, task)?;
        let res = r.solve(&opts)?;
        Ok(task.loss(data.y.row_slice(eval[i]), &r.decision(&res)))
    });
    let ok: Vec<f64> = losses.into_iter().filter_map(|l| l.ok()).collect();
    if ok.is_empty() {
        return Ok(f64::INFINITY);
    }
    Ok(ok.iter().sum::<f64>() / ok.len() as f64)
}
