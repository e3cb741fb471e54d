//! ℓ∞ projected gradient ascent on inputs, with model parameters frozen.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    attack_objective, tau_cross_entropy, BatchLatents, LossConfig, SaturationCounter,
};
use crate::models::{classify, Discriminator, Encoder, FeatureExtractor, LinearClassifier};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    #[serde(default = "default_true")]
    pub random_start: bool,
    #[serde(default)]
    pub clamp: Option<(f64, f64)>,
}

fn default_true() -> bool {
    true
}

/// Budget used for the unit-variance synthetic data.
pub const SYNTHETIC_EPSILON: f64 = 0.25;

impl AttackConfig {
    /// PGD-7, step ε/4.
    pub fn pretrain(epsilon: f64) -> Self {
        Self::with_ratio(epsilon, 7, 0.25)
    }

    /// PGD-10, step ε/4.
    pub fn linear_eval(epsilon: f64) -> Self {
        Self::with_ratio(epsilon, 10, 0.25)
    }

    /// PGD-20, step ε/10.
    pub fn evaluation(epsilon: f64) -> Self {
        Self::with_ratio(epsilon, 20, 0.1)
    }

    fn with_ratio(epsilon: f64, steps: usize, ratio: f64) -> Self {
        AttackConfig {
            epsilon,
            steps,
            step_size: epsilon * ratio,
            random_start: true,
            clamp: None,
        }
    }

    /// Image-scaled settings: `ε = 8/255` and clamping to `[0, 1]`.
    pub fn image(mut self) -> Self {
        let scale = (8.0 / 255.0) / self.epsilon;
        self.epsilon = 8.0 / 255.0;
        self.step_size *= scale;
        self.clamp = Some((0.0, 1.0));
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("attack steps must be >= 1".into()));
        }
        if !(self.step_size >= 0.0) || (self.epsilon > 0.0 && self.step_size > 2.0 * self.epsilon) {
            return Err(Error::Config(format!(
                "step size {} outside [0, 2ε] for ε = {}",
                self.step_size, self.epsilon
            )));
        }
        if let Some((lo, hi)) = self.clamp {
            if !(lo < hi) {
                return Err(Error::Config(format!("empty clamp range ({lo}, {hi})")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PgdOutcome {
    pub x_adv: Tensor,
    /// Objective at `x0`.
    pub initial: f64,
    /// Objective at the returned iterate (`>= initial`).
    pub best: f64,
}

fn project(x: &mut [f64], x0: &[f64], cfg: &AttackConfig) {
    for (v, &o) in x.iter_mut().zip(x0) {
        *v = o + (*v - o).clamp(-cfg.epsilon, cfg.epsilon);
        if let Some((lo, hi)) = cfg.clamp {
            *v = v.clamp(lo, hi);
        }
    }
}

fn evaluate<F>(objective: &F, x: &Tensor, with_grad: bool) -> Result<(f64, Option<Tensor>)>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone(), with_grad);
    let out = objective(&tape, xv)?;
    let value = tape.item(out);
    if !with_grad {
        return Ok((value, None));
    }
    tape.backward(out)?;
    Ok((value, Some(tape.grad(xv))))
}

/// Maximizes `objective` over the ℓ∞ ball around `x0` by signed-gradient
/// steps, projecting after each one. The best iterate seen, `x0` included,
/// is returned.
pub fn pgd<F, R>(x0: &Tensor, objective: F, cfg: &AttackConfig, rng: &mut R) -> Result<PgdOutcome>
where
    F: Fn(&Tape, Var) -> Result<Var>,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let (initial, _) = evaluate(&objective, x0, false)?;
    if cfg.epsilon == 0.0 {
        return Ok(PgdOutcome {
            x_adv: x0.clone(),
            initial,
            best: initial,
        });
    }
    let mut x = x0.clone();
    if cfg.random_start {
        for v in x.data_mut() {
            *v += rng.gen_range(-cfg.epsilon..=cfg.epsilon);
        }
        project(x.data_mut(), x0.data(), cfg);
    }
    let mut best = (initial, x0.clone());
    for step in 0..=cfg.steps {
        let last = step == cfg.steps;
        let (value, grad) = evaluate(&objective, &x, !last)?;
        if value > best.0 {
            best = (value, x.clone());
        }
        let Some(grad) = grad else { break };
        if !grad.all_finite() {
            return Err(Error::NonFiniteGradient { step });
        }
        for (v, g) in x.data_mut().iter_mut().zip(grad.data()) {
            if *g != 0.0 {
                *v += cfg.step_size * g.signum();
            }
        }
        project(x.data_mut(), x0.data(), cfg);
    }
    Ok(PgdOutcome {
        x_adv: best.1,
        initial,
        best: best.0,
    })
}

/// Fails if `x_adv` left the ε-ball around `x0` or the clamp range.
pub fn check_containment(x0: &Tensor, x_adv: &Tensor, cfg: &AttackConfig) -> Result<()> {
    if x0.shape() != x_adv.shape() {
        return Err(Error::shape("containment", x0.shape(), x_adv.shape()));
    }
    let dev = x0.max_abs_diff(x_adv);
    if dev > cfg.epsilon + 1e-12 {
        return Err(Error::Containment(format!(
            "ℓ∞ distance {dev} > ε = {}",
            cfg.epsilon
        )));
    }
    if let Some((lo, hi)) = cfg.clamp {
        if let Some(v) = x_adv.data().iter().find(|v| **v < lo || **v > hi) {
            return Err(Error::Containment(format!(
                "value {v} outside [{lo}, {hi}]"
            )));
        }
    }
    Ok(())
}

/// Views of one pretraining batch.
#[derive(Clone, Debug)]
pub struct PretrainViews {
    pub anchors: Tensor,
    pub positives: Tensor,
}

/// Perturbs the positive views to maximize the attack objective, holding
/// the encoder and discriminator fixed.
pub fn pretrain_attack<R: Rng + ?Sized>(
    views: &PretrainViews,
    encoder: &Encoder,
    discriminator: Option<&Discriminator>,
    cfg: &AttackConfig,
    loss: &LossConfig,
    saturations: &SaturationCounter,
    rng: &mut R,
) -> Result<PgdOutcome> {
    let z_anchor = encoder.project(&views.anchors)?;
    let z_pos = encoder.project(&views.positives)?;
    let d_pos = match discriminator {
        Some(d) if loss.lambda_global > 0.0 => Some(d.probs(&z_pos)?),
        _ => None,
    };
    let objective = |tape: &Tape, x: Var| -> Result<Var> {
        let enc = encoder.bind(tape, false);
        let anchors = tape.constant(z_anchor.clone());
        let positives = tape.constant(z_pos.clone());
        let adv = enc.forward(tape, x)?;
        let disc = match (discriminator, &d_pos) {
            (Some(d), Some(pb)) => {
                let pa = d.bind(tape, false).discriminate(tape, adv)?;
                Some((tape.constant(pb.clone()), pa))
            }
            _ => None,
        };
        let z = BatchLatents {
            anchors,
            positives,
            adv_positives: adv,
            disc,
        };
        Ok(attack_objective(tape, &z, loss, saturations)?.total)
    };
    pgd(&views.positives, objective, cfg, rng)
}

/// PGD against the temperature-scaled cross-entropy of `classifier ∘ extractor`.
pub fn supervised_attack<R: Rng + ?Sized>(
    x: &Tensor,
    labels: &[usize],
    extractor: &FeatureExtractor,
    classifier: &LinearClassifier,
    cfg: &AttackConfig,
    tau: f64,
    rng: &mut R,
) -> Result<PgdOutcome> {
    let objective = |tape: &Tape, xv: Var| -> Result<Var> {
        let f = extractor.bind(tape, false);
        let w = classifier.bind(tape, false);
        let z = f.forward(tape, xv)?;
        let logits = classify(tape, z, w)?;
        tau_cross_entropy(tape, logits, labels, tau)
    };
    pgd(x, objective, cfg, rng)
}
