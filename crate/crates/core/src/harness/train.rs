use std::collections::BTreeMap;

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{EvalConfig, TrainConfig};
use super::eval::{inlier_ratio, scene_matches};
use super::model::{forward, prepare, sample_eps, scene_losses, total_entropy, PreparedScene};
use super::params::{init_params, Adam, ParamStore};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::losses::total_loss;
use crate::scenegen::SceneSample;

/// Loss values of one optimizer step, averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub total: f64,
    pub coarse: f64,
    pub fine: f64,
    pub sig: f64,
    pub domain: Option<f64>,
}

/// Validation snapshot after `step` optimizer steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValPoint {
    pub step: usize,
    pub ir: f64,
    pub mmd: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub gamma_sig: f64,
    pub loss_curve: Vec<StepLog>,
    pub validation: Vec<ValPoint>,
}

/// Outcome of a training run. On a numerical abort `checkpoint` holds the
/// last finite state and `aborted` the error.
#[derive(Debug)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
    pub aborted: Option<Error>,
}

/// The entropy budget: the configured value, or `gamma_sig_ratio` times the
/// summed entropy of `params` on `scene`. Zero when uncertainty is off.
pub fn resolve_gamma(params: &ParamStore, cfg: &TrainConfig, scene: &PreparedScene) -> Result<f64> {
    if !cfg.flags.enable_uncertainty {
        return Ok(0.0);
    }
    if let Some(g) = cfg.gamma_sig {
        return Ok(g);
    }
    let mut t = Tape::new();
    let p = params.bind(&mut t);
    let fwd = forward(&mut t, &p, scene, cfg, None)?;
    Ok(cfg.gamma_sig_ratio * total_entropy(&t, &fwd).unwrap_or(0.0))
}

/// Gradient of the total loss of one scene and its term values.
fn scene_gradient(
    params: &ParamStore,
    cfg: &TrainConfig,
    gamma: f64,
    scene: &PreparedScene,
    seed: u64,
    step: usize,
) -> Result<(BTreeMap<String, Tensor>, StepLog)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tape::new();
    let p = params.bind(&mut t);
    let eps = cfg.flags.enable_uncertainty.then(|| sample_eps(&mut rng, scene, cfg.feature_dim));
    let fwd = forward(&mut t, &p, scene, cfg, eps.as_ref())?;
    let terms = scene_losses(&mut t, &p, scene, &fwd, cfg, gamma, &mut rng)?;
    let total = total_loss(&mut t, &terms, &cfg.weights, step)?;
    t.backward(total)?;
    let mut grads = BTreeMap::new();
    for (name, &v) in &p.vars {
        if let Some(g) = t.grad(v) {
            grads.insert(name.clone(), g.clone());
        }
    }
    let val = |v| t.value(v).item();
    let log = StepLog {
        step,
        total: val(total),
        coarse: val(terms.coarse),
        fine: val(terms.fine),
        sig: val(terms.sig),
        domain: terms.domain.map(val),
    };
    Ok((grads, log))
}

fn average(parts: Vec<(BTreeMap<String, Tensor>, StepLog)>, step: usize) -> Result<(BTreeMap<String, Tensor>, StepLog)> {
    let n = parts.len() as f64;
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut log = StepLog { step, total: 0.0, coarse: 0.0, fine: 0.0, sig: 0.0, domain: None };
    for (g, l) in parts {
        for (name, t) in g {
            match grads.get_mut(&name) {
                Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
                None => {
                    grads.insert(name, t);
                }
            }
        }
        log.total += l.total / n;
        log.coarse += l.coarse / n;
        log.fine += l.fine / n;
        log.sig += l.sig / n;
        log.domain = l.domain.map(|d| log.domain.unwrap_or(0.0) + d / n);
    }
    for (name, g) in grads.iter_mut() {
        *g = g.map(|x| x / n);
        if !g.all_finite() {
            return Err(Error::NumericalAbort { step, term: format!("gradient of {name}") });
        }
    }
    Ok((grads, log))
}

/// Mean inlier ratio and MMD over validation scenes.
pub fn validate(params: &ParamStore, cfg: &TrainConfig, eval: &EvalConfig, val: &[SceneSample], step: usize) -> Result<ValPoint> {
    let rows = val
        .par_iter()
        .map(|s| {
            let (m, gap) = scene_matches(params, cfg, s)?;
            Ok((inlier_ratio(s, &m, eval.ir_thresh), gap))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len().max(1) as f64;
    let gaps: Vec<f64> = rows.iter().filter_map(|r| r.1).collect();
    Ok(ValPoint {
        step,
        ir: rows.iter().map(|r| r.0).sum::<f64>() / n,
        mmd: (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64),
    })
}

/// Adam over all parameters for `cfg.steps` total steps, optionally
/// continuing a checkpoint written with the same configuration hash.
///
/// Step `s` draws its batch and all noise from a generator seeded with
/// `cfg.seed` on stream `s`, so a resumed run matches an uninterrupted one.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[SceneSample],
    val_set: &[SceneSample],
    eval: &EvalConfig,
    resume: Option<Checkpoint>,
) -> Result<TrainRun> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Usage("training needs at least one scene".into()));
    }
    let channels = train_set[0].channels();
    if train_set.iter().chain(val_set).any(|s| s.channels() != channels) {
        return Err(Error::Usage("all scenes must share one channel count".into()));
    }
    let scenes = train_set.par_iter().map(|s| prepare(s, cfg)).collect::<Result<Vec<_>>>()?;
    let mut ck = match resume {
        Some(ck) => {
            if ck.config.hash() != cfg.hash() {
                return Err(Error::Config("checkpoint was written with a different training configuration".into()));
            }
            Checkpoint { config: cfg.clone(), ..ck }
        }
        None => {
            let params = init_params(cfg, channels);
            let gamma_sig = resolve_gamma(&params, cfg, &scenes[0])?;
            let adam = Adam::new(&params);
            Checkpoint { config: cfg.clone(), step: 0, gamma_sig, params, adam }
        }
    };
    if ck.params.get("enc_i.w1")?.rows() != channels {
        return Err(Error::Usage(format!("checkpoint expects a different channel count than {channels}")));
    }
    info!("training {} steps from step {}, γ_sig = {:.4}", cfg.steps, ck.step, ck.gamma_sig);
    let mut report = TrainReport { gamma_sig: ck.gamma_sig, ..TrainReport::default() };
    while ck.step < cfg.steps {
        let step = ck.step;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(step as u64);
        let batch: Vec<(usize, u64)> =
            (0..cfg.batch_size).map(|_| (rng.random_range(0..scenes.len()), rng.random())).collect();
        let result = batch
            .par_iter()
            .map(|&(i, seed)| scene_gradient(&ck.params, cfg, ck.gamma_sig, &scenes[i], seed, step))
            .collect::<Result<Vec<_>>>()
            .and_then(|parts| average(parts, step));
        // inputs were validated above, so a domain error here comes from
        // non-finite activations
        let result = result.map_err(|e| match e {
            Error::Domain(term) => Error::NumericalAbort { step, term },
            e => e,
        });
        let (grads, log) = match result {
            Ok(r) => r,
            Err(e @ Error::NumericalAbort { .. }) => {
                warn!("{e}");
                return Ok(TrainRun { checkpoint: ck, report, aborted: Some(e) });
            }
            Err(e) => return Err(e),
        };
        let mut params = ck.params.clone();
        let mut adam = ck.adam.clone();
        adam.step(&mut params, &grads, cfg);
        if params.blocks.values().any(|t| !t.all_finite()) {
            let e = Error::NumericalAbort { step, term: "parameters".into() };
            warn!("{e}");
            return Ok(TrainRun { checkpoint: ck, report, aborted: Some(e) });
        }
        ck.params = params;
        ck.adam = adam;
        ck.step += 1;
        debug!("step {step}: loss {:.5}", log.total);
        report.loss_curve.push(log);
        let due = (cfg.val_every > 0 && ck.step % cfg.val_every == 0) || ck.step == cfg.steps;
        if due && !val_set.is_empty() {
            let v = validate(&ck.params, cfg, eval, val_set, ck.step)?;
            info!("step {}: val IR {:.4}", ck.step, v.ir);
            report.validation.push(v);
        }
    }
    Ok(TrainRun { checkpoint: ck, report, aborted: None })
}
