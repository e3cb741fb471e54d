use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attacks::{check_containment, pretrain_attack, supervised_attack, PretrainViews};
use crate::data::{make_views, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    attack_objective, global_divergence_term, info_nce, tau_cross_entropy, BatchLatents,
    SaturationCounter,
};
use crate::models::{
    classify, Discriminator, Encoder, FeatureExtractor, LinearClassifier, Parameters,
};
use crate::sam::{combined_step, SamStats};
use crate::tensor::{Tape, Tensor, Var};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::metrics::MetricsRow;

#[derive(Clone, Copy)]
enum Stage {
    Init = 0,
    Pretrain = 1,
    LinearEval = 2,
    AdvLinearEval = 3,
    Evaluate = 4,
}

/// Deterministic generator for `(seed, stage, index)`. Each epoch draws
/// from its own stream, so resuming at an epoch boundary replays exactly.
fn stage_rng(seed: u64, stage: Stage, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64) << 40) | index);
    rng
}

/// Counters accumulated over a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunStats {
    /// Adversarial batches whose ε-ball and clamp containment was checked.
    pub attacks_checked: u64,
    pub saturations: u64,
    pub sam: SamStats,
}

fn contained(
    x0: &Tensor,
    x: &Tensor,
    cfg: &crate::attacks::AttackConfig,
    stats: &mut RunStats,
) -> Result<()> {
    check_containment(x0, x, cfg)?;
    stats.attacks_checked += 1;
    Ok(())
}

/// Encoder and discriminator between pretraining epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainState {
    pub encoder: Encoder,
    pub discriminator: Option<Discriminator>,
    pub epochs_done: usize,
}

impl PretrainState {
    pub fn init(cfg: &RunConfig, d_in: usize) -> Self {
        let mut rng = stage_rng(cfg.seed, Stage::Init, 0);
        let encoder = Encoder::init(&mut rng, d_in, cfg.init);
        // Drawn unconditionally so the encoder and classifier streams do not
        // depend on whether a discriminator is used.
        let disc = Discriminator::init(&mut rng, encoder.head.d_proj(), cfg.init);
        PretrainState {
            encoder,
            discriminator: cfg.use_discriminator.then_some(disc),
            epochs_done: 0,
        }
    }

    pub fn checkpoint(&self, cfg: &RunConfig, classes: usize) -> Checkpoint {
        Checkpoint::from_models(
            &self.encoder,
            self.discriminator.as_ref(),
            classes,
            cfg.seed,
            self.epochs_done,
        )
        .with_config(cfg)
    }

    pub fn from_checkpoint(ck: &Checkpoint, cfg: &RunConfig) -> Result<Self> {
        let mut state = PretrainState::init(cfg, ck.d_in);
        ck.load_encoder(&mut state.encoder)?;
        if let Some(d) = state.discriminator.as_mut() {
            if !ck.load_discriminator(d)? {
                return Err(Error::Checkpoint(
                    "configuration uses a discriminator the checkpoint lacks".into(),
                ));
            }
        }
        state.epochs_done = ck.epoch;
        Ok(state)
    }
}

fn grads_of(tape: &Tape, vars: &[Var]) -> Vec<f64> {
    let mut out = Vec::new();
    for &v in vars {
        out.extend_from_slice(tape.grad(v).data());
    }
    out
}

struct BatchLog {
    benign: f64,
    adv: Option<f64>,
    global: Option<f64>,
}

/// One ascent step on the mean discriminator log-likelihood. Returns the
/// binary cross-entropy before the step.
fn discriminator_step(
    disc: &mut Discriminator,
    encoder: &Encoder,
    positives: &Tensor,
    adversarial: &Tensor,
    lr: f64,
    saturations: &SaturationCounter,
) -> Result<f64> {
    let z_pos = encoder.project(positives)?;
    let z_adv = encoder.project(adversarial)?;
    let tape = Tape::new();
    let d = disc.bind(&tape, true);
    let pb = d.discriminate(&tape, tape.constant(z_pos))?;
    let pa = d.discriminate(&tape, tape.constant(z_adv))?;
    let ll = global_divergence_term(&tape, pb, pa, saturations)?;
    let n = 2.0 * positives.shape()[0] as f64;
    let mean_ll = tape.scale(ll, 1.0 / n);
    tape.backward(mean_ll)?;
    let g = grads_of(&tape, &d.vars());
    let theta: Vec<f64> = disc
        .flatten()
        .iter()
        .zip(&g)
        .map(|(t, gi)| t + lr * gi)
        .collect();
    disc.assign_flat(&theta)?;
    Ok(-tape.item(mean_ll))
}

/// Benign-loss weight and whether the adversarial terms are present.
fn objective_shape(cfg: &RunConfig) -> (f64, bool) {
    if cfg.benign_only {
        (1.0, false)
    } else {
        (cfg.loss.lambda_benign, true)
    }
}

fn benign_gradient(
    encoder: &Encoder,
    views: &PretrainViews,
    weight: f64,
    cfg: &RunConfig,
) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let enc = encoder.bind(&tape, true);
    let za = enc.forward(&tape, tape.constant(views.anchors.clone()))?;
    let zp = enc.forward(&tape, tape.constant(views.positives.clone()))?;
    let loss = info_nce(&tape, za, zp, &cfg.loss)?;
    tape.backward(tape.scale(loss, weight))?;
    Ok(grads_of(&tape, &enc.vars()))
}

fn extractor_step(
    state: &mut PretrainState,
    cfg: &RunConfig,
    views: &PretrainViews,
    adversarial: Option<&Tensor>,
    saturations: &SaturationCounter,
    stats: &mut RunStats,
) -> Result<BatchLog> {
    let (w_benign, with_adv) = objective_shape(cfg);
    let tape = Tape::new();
    let enc = state.encoder.bind(&tape, true);
    let params = enc.vars();
    let za = enc.forward(&tape, tape.constant(views.anchors.clone()))?;
    let zp = enc.forward(&tape, tape.constant(views.positives.clone()))?;
    let benign = info_nce(&tape, za, zp, &cfg.loss)?;
    let weighted_benign = tape.scale(benign, w_benign);

    let mut other = None;
    let mut log = BatchLog {
        benign: tape.item(benign),
        adv: None,
        global: None,
    };
    if let (true, Some(adv)) = (with_adv, adversarial) {
        let zadv = enc.forward(&tape, tape.constant(adv.clone()))?;
        let disc = match &state.discriminator {
            Some(d) => {
                let bd = d.bind(&tape, false);
                Some((bd.discriminate(&tape, zp)?, bd.discriminate(&tape, zadv)?))
            }
            None => None,
        };
        let z = BatchLatents {
            anchors: za,
            positives: zp,
            adv_positives: zadv,
            disc,
        };
        let parts = attack_objective(&tape, &z, &cfg.loss, saturations)?;
        log.adv = Some(tape.item(parts.info_nce_adv));
        log.global = parts.global.map(|g| tape.item(g));
        other = Some(parts.total);
    }

    let theta = state.encoder.flatten();
    let next = match &cfg.sam {
        None => {
            let total = match other {
                Some(o) => tape.add(o, weighted_benign)?,
                None => weighted_benign,
            };
            if !tape.item(total).is_finite() {
                return Err(Error::domain("extractor_step", "non-finite objective"));
            }
            tape.backward(total)?;
            let g = grads_of(&tape, &params);
            let lr = cfg.effective_lr_extractor();
            theta
                .iter()
                .zip(&g)
                .map(|(t, gi)| t - lr * gi)
                .collect::<Vec<f64>>()
        }
        Some(sam) => {
            let g_other = match other {
                Some(o) => {
                    tape.backward(o)?;
                    let g = grads_of(&tape, &params);
                    tape.zero_grad();
                    g
                }
                None => vec![0.0; theta.len()],
            };
            let g_benign = if w_benign > 0.0 {
                tape.backward(weighted_benign)?;
                grads_of(&tape, &params)
            } else {
                vec![0.0; theta.len()]
            };
            let template = state.encoder.clone();
            let at = |theta_p: &[f64]| -> Result<Vec<f64>> {
                let mut e = template.clone();
                e.assign_flat(theta_p)?;
                benign_gradient(&e, views, w_benign, cfg)
            };
            combined_step(
                &theta,
                &g_other,
                &g_benign,
                at,
                Some(sam),
                cfg.effective_lr_extractor(),
                &mut stats.sam,
            )?
        }
    };
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("extractor_step", "non-finite parameters"));
    }
    state.encoder.assign_flat(&next)?;
    Ok(log)
}

fn batches(n: usize, b: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(b)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

fn mean_of(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Runs pretraining epoch `state.epochs_done` and advances the state.
pub fn pretrain_epoch(
    state: &mut PretrainState,
    cfg: &RunConfig,
    data: &Dataset,
    stats: &mut RunStats,
) -> Result<MetricsRow> {
    let epoch = state.epochs_done;
    let mut rng = stage_rng(cfg.seed, Stage::Pretrain, epoch as u64);
    let saturations = SaturationCounter::new();
    let (mut benign, mut adv, mut global, mut disc) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (bi, idx) in batches(data.len(), cfg.batch_size, &mut rng)
        .into_iter()
        .enumerate()
    {
        let abort = |e: Error| match e {
            Error::Domain { .. } | Error::NonFiniteGradient { .. } => {
                Error::NumericalAbort { epoch, batch: bi }
            }
            other => other,
        };
        let x = data.x.select_rows(&idx);
        let (anchors, positives) = make_views(&x, &cfg.augment, &mut rng);
        let views = PretrainViews { anchors, positives };
        let attack = |enc: &Encoder, d: Option<&Discriminator>, rng: &mut ChaCha8Rng| {
            pretrain_attack(
                &views,
                enc,
                d,
                &cfg.pretrain_attack,
                &cfg.loss,
                &saturations,
                rng,
            )
        };
        let x_adv = if cfg.benign_only {
            None
        } else {
            let out =
                attack(&state.encoder, state.discriminator.as_ref(), &mut rng).map_err(abort)?;
            contained(&views.positives, &out.x_adv, &cfg.pretrain_attack, stats)?;
            Some(out.x_adv)
        };
        if let (Some(xa), Some(_)) = (&x_adv, &state.discriminator) {
            let fresh;
            let for_disc = if cfg.regenerate_for_discriminator {
                let out = attack(&state.encoder, state.discriminator.as_ref(), &mut rng)
                    .map_err(abort)?;
                contained(&views.positives, &out.x_adv, &cfg.pretrain_attack, stats)?;
                fresh = out.x_adv;
                &fresh
            } else {
                xa
            };
            let d = state.discriminator.as_mut().expect("checked");
            let loss = discriminator_step(
                d,
                &state.encoder,
                &views.positives,
                for_disc,
                cfg.lr_discriminator,
                &saturations,
            )
            .map_err(abort)?;
            if !loss.is_finite() {
                return Err(Error::NumericalAbort { epoch, batch: bi });
            }
            disc.push(loss);
        }
        let log = extractor_step(state, cfg, &views, x_adv.as_ref(), &saturations, stats)
            .map_err(abort)?;
        let finite = log.benign.is_finite()
            && log.adv.map_or(true, f64::is_finite)
            && log.global.map_or(true, f64::is_finite);
        if !finite {
            return Err(Error::NumericalAbort { epoch, batch: bi });
        }
        benign.push(log.benign);
        adv.extend(log.adv);
        global.extend(log.global);
    }
    state.epochs_done += 1;
    stats.saturations += saturations.get();
    let mut row = MetricsRow::new(&cfg.config_hash(), cfg.seed, "pretrain", epoch);
    row.info_nce_benign = mean_of(&benign);
    row.info_nce_adv = mean_of(&adv);
    row.global_term = mean_of(&global);
    row.disc_loss = mean_of(&disc);
    row.saturations = saturations.get();
    Ok(row)
}

/// Trains until `cfg.epochs_pretrain` epochs are done, calling `on_epoch`
/// after each one (for checkpointing).
pub fn pretrain(
    cfg: &RunConfig,
    data: &Dataset,
    mut state: PretrainState,
    stats: &mut RunStats,
    mut on_epoch: impl FnMut(&PretrainState, &MetricsRow) -> Result<()>,
) -> Result<(PretrainState, Vec<MetricsRow>)> {
    let start = Instant::now();
    let mut rows = Vec::new();
    while state.epochs_done < cfg.epochs_pretrain {
        let mut row = pretrain_epoch(&mut state, cfg, data, stats)?;
        if cfg.record_wall_time {
            row.wall_time = start.elapsed().as_secs_f64();
        }
        on_epoch(&state, &row)?;
        rows.push(row);
    }
    Ok((state, rows))
}

fn predict(weight: &Tensor, z: &Tensor) -> Vec<usize> {
    z.rows()
        .map(|r| {
            let scores = weight
                .rows()
                .map(|w| w.iter().zip(r).map(|(a, b)| a * b).sum::<f64>());
            scores
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (c, s)| {
                    if s > best.1 {
                        (c, s)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

fn accuracy(pred: &[usize], y: &[usize]) -> f64 {
    pred.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64
}

/// Trains a linear classifier on the frozen extractor, on clean inputs or
/// on PGD examples generated against the current classifier.
pub fn linear_eval(
    extractor: &FeatureExtractor,
    train: &Dataset,
    test: &Dataset,
    adversarial: bool,
    cfg: &RunConfig,
    stats: &mut RunStats,
) -> Result<(LinearClassifier, Vec<MetricsRow>)> {
    let stage = if adversarial {
        Stage::AdvLinearEval
    } else {
        Stage::LinearEval
    };
    let phase = if adversarial { "at-le" } else { "le" };
    let mut init_rng = stage_rng(cfg.seed, stage, u64::MAX >> 24);
    let mut clf =
        LinearClassifier::init(&mut init_rng, train.classes, extractor.d_repr(), cfg.init);
    let z_train = extractor.extract(&train.x)?;
    let z_test = extractor.extract(&test.x)?;
    let hash = cfg.config_hash();
    let start = Instant::now();
    let mut rows = Vec::new();
    for epoch in 0..cfg.epochs_le {
        let mut rng = stage_rng(cfg.seed, stage, epoch as u64);
        for idx in batches(train.len(), cfg.batch_size, &mut rng) {
            let y: Vec<usize> = idx.iter().map(|&i| train.y[i]).collect();
            let z = if adversarial {
                let x = train.x.select_rows(&idx);
                let out = supervised_attack(
                    &x,
                    &y,
                    extractor,
                    &clf,
                    &cfg.le_attack,
                    cfg.loss.tau,
                    &mut rng,
                )?;
                contained(&x, &out.x_adv, &cfg.le_attack, stats)?;
                extractor.extract(&out.x_adv)?
            } else {
                z_train.select_rows(&idx)
            };
            let tape = Tape::new();
            let w = clf.bind(&tape, true);
            let logits = classify(&tape, tape.constant(z), w)?;
            let loss = tau_cross_entropy(&tape, logits, &y, cfg.loss.tau)?;
            if !tape.item(loss).is_finite() {
                return Err(Error::NumericalAbort { epoch, batch: 0 });
            }
            tape.backward(loss)?;
            let g = tape.grad(w);
            for (p, gi) in clf.weight.data_mut().iter_mut().zip(g.data()) {
                *p -= cfg.lr_classifier * gi;
            }
        }
        let mut row = MetricsRow::new(&hash, cfg.seed, phase, epoch);
        row.clean_acc = Some(accuracy(&predict(&clf.weight, &z_test), &test.y));
        if cfg.record_wall_time {
            row.wall_time = start.elapsed().as_secs_f64();
        }
        rows.push(row);
    }
    Ok((clf, rows))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub clean_acc: f64,
    /// Fraction classified correctly both clean and under attack.
    pub robust_acc: f64,
}

/// Clean and PGD accuracy on `test`. `index` separates the random streams
/// of different classifiers evaluated in one run.
pub fn evaluate(
    extractor: &FeatureExtractor,
    classifier: &LinearClassifier,
    test: &Dataset,
    cfg: &RunConfig,
    index: u64,
    stats: &mut RunStats,
) -> Result<EvalResult> {
    let mut rng = stage_rng(cfg.seed, Stage::Evaluate, index);
    let (mut clean, mut robust) = (0usize, 0usize);
    let all: Vec<usize> = (0..test.len()).collect();
    for idx in all.chunks(cfg.batch_size) {
        let x = test.x.select_rows(idx);
        let y: Vec<usize> = idx.iter().map(|&i| test.y[i]).collect();
        let p_clean = predict(&classifier.weight, &extractor.extract(&x)?);
        let out = supervised_attack(
            &x,
            &y,
            extractor,
            classifier,
            &cfg.eval_attack,
            cfg.loss.tau,
            &mut rng,
        )?;
        contained(&x, &out.x_adv, &cfg.eval_attack, stats)?;
        let p_adv = predict(&classifier.weight, &extractor.extract(&out.x_adv)?);
        for i in 0..y.len() {
            let ok = p_clean[i] == y[i];
            clean += usize::from(ok);
            robust += usize::from(ok && p_adv[i] == y[i]);
        }
    }
    let n = test.len() as f64;
    Ok(EvalResult {
        clean_acc: clean as f64 / n,
        robust_acc: robust as f64 / n,
    })
}

/// Everything a full two-phase run produces.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub rows: Vec<MetricsRow>,
    pub state: PretrainState,
    pub le: EvalResult,
    pub at_le: EvalResult,
    pub le_classifier: LinearClassifier,
    pub at_le_classifier: LinearClassifier,
    pub stats: RunStats,
}

/// Pretraining, then LE and AT-LE, each followed by clean and robust
/// evaluation.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let (train, test) = cfg.data.load()?;
    let mut stats = RunStats::default();
    let state = PretrainState::init(cfg, train.d_in());
    let (state, mut rows) = pretrain(cfg, &train, state, &mut stats, |_, _| Ok(()))?;
    let extractor = &state.encoder.extractor;
    let hash = cfg.config_hash();
    let mut results = Vec::new();
    let mut classifiers = Vec::new();
    for (i, adversarial) in [false, true].into_iter().enumerate() {
        let (clf, le_rows) = linear_eval(extractor, &train, &test, adversarial, cfg, &mut stats)?;
        rows.extend(le_rows);
        let r = evaluate(extractor, &clf, &test, cfg, i as u64, &mut stats)?;
        let phase = if adversarial { "eval-at-le" } else { "eval-le" };
        let mut row = MetricsRow::new(&hash, cfg.seed, phase, cfg.epochs_le);
        row.clean_acc = Some(r.clean_acc);
        row.robust_acc = Some(r.robust_acc);
        rows.push(row);
        results.push(r);
        classifiers.push(clf);
    }
    let at_le_classifier = classifiers.pop().expect("two classifiers");
    let le_classifier = classifiers.pop().expect("two classifiers");
    Ok(RunReport {
        rows,
        le: results[0],
        at_le: results[1],
        le_classifier,
        at_le_classifier,
        state,
        stats,
    })
}
