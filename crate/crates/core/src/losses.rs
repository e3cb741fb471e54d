//! Scalar objectives: InfoNCE (benign and adversarial), temperature-scaled
//! cross-entropy, the discriminator log-likelihood and the composed attack
//! and extractor objectives.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Probabilities are clamped to `[P_FLOOR, 1 - P_FLOOR]` inside logs.
pub const P_FLOOR: f64 = 1e-7;
const UNIT_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Negative weight. `None` means `K = b - 1`, the standard form.
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default = "default_lambda_global")]
    pub lambda_global: f64,
    #[serde(default = "default_lambda_benign")]
    pub lambda_benign: f64,
}

fn default_tau() -> f64 {
    0.5
}
fn default_lambda_global() -> f64 {
    0.5
}
fn default_lambda_benign() -> f64 {
    1.0
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: default_tau(),
            beta: None,
            lambda_global: default_lambda_global(),
            lambda_benign: default_lambda_benign(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if let Some(b) = self.beta {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(Error::Config(format!("beta must be non-negative, got {b}")));
            }
        }
        if !(self.lambda_global >= 0.0) || !(self.lambda_benign >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Resolved negative weight for `k` in-batch negatives.
    pub fn beta_for(&self, k: usize) -> f64 {
        self.beta.unwrap_or(k as f64)
    }
}

fn check_unit_rows(tape: &Tape, v: Var, what: &str) -> Result<()> {
    let t = tape.value(v);
    for (i, row) in t.rows().enumerate() {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::domain(
                "info_nce",
                format!("{what} row {i} has norm {n}, expected 1"),
            ));
        }
    }
    Ok(())
}

/// Mean over anchors of
/// `-log exp(s_ii+/τ) / (exp(s_ii+/τ) + β/K Σ_{k≠i} exp(s_ik/τ))`
/// where the negatives are the other anchors and `K = b - 1`.
pub fn info_nce(tape: &Tape, anchors: Var, positives: Var, cfg: &LossConfig) -> Result<Var> {
    let (sa, sp) = (tape.shape(anchors), tape.shape(positives));
    if sa.len() != 2 || sa != sp {
        return Err(Error::shape("info_nce", &sa, &sp));
    }
    let b = sa[0];
    if b < 2 {
        return Err(Error::domain(
            "info_nce",
            format!("need at least 2 rows, got {b}"),
        ));
    }
    check_unit_rows(tape, anchors, "anchor")?;
    check_unit_rows(tape, positives, "positive")?;

    let k = b - 1;
    let beta = cfg.beta_for(k);
    let inv_tau = 1.0 / cfg.tau;

    let pos = tape.dot(anchors, positives)?;
    let pos = tape.scale(pos, inv_tau);
    let pos_col = tape.reshape(pos, vec![b, 1])?;

    let at = tape.transpose(anchors)?;
    let sim = tape.matmul(anchors, at)?;
    let sim = tape.scale(sim, inv_tau);
    let log_w = if beta > 0.0 {
        (beta / k as f64).ln()
    } else {
        0.0
    };
    let neg = tape.add_scalar(sim, log_w);

    let row = tape.concat(&[pos_col, neg], 1)?;
    let mut mask = vec![false; b * (b + 1)];
    for i in 0..b {
        mask[i * (b + 1)] = true;
        if beta > 0.0 {
            for j in 0..b {
                mask[i * (b + 1) + 1 + j] = j != i;
            }
        }
    }
    let lse = tape.logsumexp_masked(row, mask)?;
    let per = tape.sub(lse, pos)?;
    Ok(tape.mean(per))
}

/// InfoNCE with the attacked positives in both numerator and denominator.
pub fn info_nce_adv(
    tape: &Tape,
    anchors: Var,
    adv_positives: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    info_nce(tape, anchors, adv_positives, cfg)
}

/// Mean of `-log softmax(logits / τ)[label]`.
pub fn tau_cross_entropy(tape: &Tape, logits: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let s = tape.shape(logits);
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape("tau_cross_entropy", &s, &[labels.len()]));
    }
    if !(tau > 0.0) {
        return Err(Error::domain("tau_cross_entropy", format!("tau = {tau}")));
    }
    let (b, m) = (s[0], s[1]);
    let mut onehot = vec![0.0; b * m];
    for (i, &y) in labels.iter().enumerate() {
        if y >= m {
            return Err(Error::domain(
                "tau_cross_entropy",
                format!("label {y} at row {i} outside 0..{m}"),
            ));
        }
        onehot[i * m + y] = 1.0;
    }
    let scaled = tape.scale(logits, 1.0 / tau);
    let lse = tape.logsumexp(scaled)?;
    let mask = tape.constant(crate::Tensor::new(vec![b, m], onehot)?);
    let picked = tape.dot(scaled, mask)?;
    let per = tape.sub(lse, picked)?;
    Ok(tape.mean(per))
}

/// Counts probabilities that hit the clamp inside the log-likelihood.
#[derive(Debug, Default)]
pub struct SaturationCounter(Cell<u64>);

impl SaturationCounter {
    pub fn new() -> Self {
        Self::default()
    }
    pub fn get(&self) -> u64 {
        self.0.get()
    }
    fn add(&self, n: u64) {
        self.0.set(self.0.get() + n);
    }
}

fn count_saturated(tape: &Tape, p: Var) -> u64 {
    tape.value(p)
        .data()
        .iter()
        .filter(|&&v| !(P_FLOOR..=1.0 - P_FLOOR).contains(&v))
        .count() as u64
}

/// `Σ log D(benign) + Σ log(1 - D(adv))`, summed rather than averaged.
pub fn global_divergence_term(
    tape: &Tape,
    probs_benign: Var,
    probs_adv: Var,
    saturations: &SaturationCounter,
) -> Result<Var> {
    let (sb, sa) = (tape.shape(probs_benign), tape.shape(probs_adv));
    if sb.len() != 1 || sa.len() != 1 {
        return Err(Error::shape("global_divergence_term", &sb, &sa));
    }
    saturations.add(count_saturated(tape, probs_benign) + count_saturated(tape, probs_adv));
    let pb = tape.clamp(probs_benign, P_FLOOR, 1.0 - P_FLOOR);
    let pa = tape.clamp(probs_adv, P_FLOOR, 1.0 - P_FLOOR);
    let log_b = tape.log(pb)?;
    let one_minus = tape.add_scalar(tape.scale(pa, -1.0), 1.0);
    let log_a = tape.log(one_minus)?;
    tape.add(tape.sum(log_b), tape.sum(log_a))
}

/// Latents of one batch as seen by the objectives.
#[derive(Clone, Copy, Debug)]
pub struct BatchLatents {
    /// `f(x̃)` through the head, `[b, d_proj]`.
    pub anchors: Var,
    /// `f(x̃⁺)`.
    pub positives: Var,
    /// `f(x̃⁺ + δ)`.
    pub adv_positives: Var,
    /// Discriminator outputs on `positives` and `adv_positives`, when one is
    /// in use.
    pub disc: Option<(Var, Var)>,
}

/// Components of a composed objective, kept for logging.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveParts {
    pub total: Var,
    pub info_nce_adv: Var,
    pub global: Option<Var>,
    pub info_nce_benign: Option<Var>,
}

/// `info_nce_adv + λ_global · global`, maximized by the attacker.
pub fn attack_objective(
    tape: &Tape,
    z: &BatchLatents,
    cfg: &LossConfig,
    saturations: &SaturationCounter,
) -> Result<ObjectiveParts> {
    let adv = info_nce_adv(tape, z.anchors, z.adv_positives, cfg)?;
    let mut total = adv;
    let mut global = None;
    if let Some((pb, pa)) = z.disc {
        if cfg.lambda_global > 0.0 {
            let g = global_divergence_term(tape, pb, pa, saturations)?;
            total = tape.add(total, tape.scale(g, cfg.lambda_global))?;
            global = Some(g);
        }
    }
    Ok(ObjectiveParts {
        total,
        info_nce_adv: adv,
        global,
        info_nce_benign: None,
    })
}

/// `attack_objective + λ_benign · info_nce(benign)`, minimized over θ.
pub fn extractor_objective(
    tape: &Tape,
    z: &BatchLatents,
    cfg: &LossConfig,
    saturations: &SaturationCounter,
) -> Result<ObjectiveParts> {
    let mut parts = attack_objective(tape, z, cfg, saturations)?;
    let benign = info_nce(tape, z.anchors, z.positives, cfg)?;
    parts.total = tape.add(parts.total, tape.scale(benign, cfg.lambda_benign))?;
    parts.info_nce_benign = Some(benign);
    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn unit_rows(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Tensor {
        let mut data: Vec<f64> = (0..b * d).map(|_| StandardNormal.sample(rng)).collect();
        for row in data.chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        Tensor::new(vec![b, d], data).unwrap()
    }

    fn cfg(tau: f64, beta: Option<f64>) -> LossConfig {
        LossConfig {
            tau,
            beta,
            ..LossConfig::default()
        }
    }

    fn eval_nce(a: &Tensor, p: &Tensor, c: &LossConfig) -> f64 {
        let t = Tape::new();
        let (av, pv) = (t.constant(a.clone()), t.constant(p.clone()));
        let l = info_nce(&t, av, pv, c).unwrap();
        t.item(l)
    }

    /// Per-anchor loop, written without the tape.
    fn naive_nce(a: &Tensor, p: &Tensor, c: &LossConfig) -> f64 {
        let b = a.shape()[0];
        let k = (b - 1) as f64;
        let beta = c.beta_for(b - 1);
        let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
        let mut total = 0.0;
        for i in 0..b {
            let num = (dot(a.row(i), p.row(i)) / c.tau).exp();
            let neg: f64 = (0..b)
                .filter(|&j| j != i)
                .map(|j| (dot(a.row(i), a.row(j)) / c.tau).exp())
                .sum();
            total += -(num / (num + beta / k * neg)).ln();
        }
        total / b as f64
    }

    #[test]
    fn identical_vectors_give_log_two() {
        let e = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let v = eval_nce(&e, &e, &cfg(1.0, Some(1.0)));
        assert!((v - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_negative_matches_closed_form() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = eval_nce(&a, &a, &cfg(1.0, Some(1.0)));
        assert!((v - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((v - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn orthogonal_adversarial_positive_raises_loss() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let p = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let t = Tape::new();
        let (av, pv) = (t.constant(a), t.constant(p));
        let v = t.item(info_nce_adv(&t, av, pv, &cfg(1.0, Some(1.0))).unwrap());
        assert!((v - (1.0 + 1f64.exp()).ln()).abs() < 1e-12);
        assert!(v > 2f64.ln());
    }

    #[test]
    fn degenerate_batch_gives_log_one_plus_beta() {
        for b in [2, 3, 8] {
            for beta in [0.0, 0.5, 1.0, 4.0, 7.0] {
                let z = Tensor::new(vec![b, 3], [0.0, 0.6, 0.8].repeat(b)).unwrap();
                let v = eval_nce(&z, &z, &cfg(0.5, Some(beta)));
                assert!((v - (1.0 + beta).ln()).abs() < 1e-10, "b={b} beta={beta}");
            }
        }
    }

    #[test]
    fn matches_naive_loop_and_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..50 {
            let b = 2 + seed % 7;
            let a = unit_rows(&mut rng, b, 5);
            let p = unit_rows(&mut rng, b, 5);
            for c in [cfg(0.5, None), cfg(0.5, Some(1.0)), cfg(0.2, Some(3.0))] {
                let v = eval_nce(&a, &p, &c);
                assert!((v - naive_nce(&a, &p, &c)).abs() < 1e-12);
                let beta = c.beta_for(b - 1);
                assert!(v > 0.0 && v <= 2.0 / c.tau + (1.0 + beta).ln() + 1e-12);
            }
        }
    }

    #[test]
    fn permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = unit_rows(&mut rng, 6, 4);
        let p = unit_rows(&mut rng, 6, 4);
        let perm = [3, 0, 5, 1, 4, 2];
        let c = cfg(0.5, None);
        let v0 = eval_nce(&a, &p, &c);
        let v1 = eval_nce(&a.select_rows(&perm), &p.select_rows(&perm), &c);
        assert!((v0 - v1).abs() < 1e-12);
    }

    #[test]
    fn adversarial_form_is_bit_identical_on_same_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = unit_rows(&mut rng, 5, 4);
        let p = unit_rows(&mut rng, 5, 4);
        let t = Tape::new();
        let (av, pv) = (t.constant(a), t.constant(p));
        let c = cfg(0.5, None);
        let x = t.item(info_nce(&t, av, pv, &c).unwrap());
        let y = t.item(info_nce_adv(&t, av, pv, &c).unwrap());
        assert_eq!(x.to_bits(), y.to_bits());
    }

    #[test]
    fn input_validation() {
        let t = Tape::new();
        let one = t.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        assert!(info_nce(&t, one, one, &cfg(0.5, None)).is_err());
        let long = t.constant(Tensor::new(vec![2, 2], vec![2.0, 0.0, 1.0, 0.0]).unwrap());
        assert!(matches!(
            info_nce(&t, long, long, &cfg(0.5, None)),
            Err(Error::Domain { .. })
        ));
        let logits = t.constant(Tensor::zeros(&[2, 3]));
        assert!(tau_cross_entropy(&t, logits, &[0, 3], 1.0).is_err());
    }

    fn ce(logits: &Tensor, labels: &[usize], tau: f64) -> f64 {
        let t = Tape::new();
        let l = t.constant(logits.clone());
        t.item(tau_cross_entropy(&t, l, labels, tau).unwrap())
    }

    #[test]
    fn cross_entropy_values() {
        for tau in [0.1, 0.5, 2.0] {
            assert!((ce(&Tensor::filled(&[3, 4], 1.7), &[0, 1, 3], tau) - 4f64.ln()).abs() < 1e-12);
        }
        let sharp = Tensor::new(vec![1, 2], vec![10.0, 0.0]).unwrap();
        assert!(ce(&sharp, &[0], 0.1) < 1e-4);

        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let logits = Tensor::new(
            vec![6, 3],
            (0..18).map(|_| StandardNormal.sample(&mut rng)).collect(),
        )
        .unwrap();
        let labels = [0, 2, 1, 1, 0, 2];
        let tau = 0.7;
        let naive: f64 = (0..6)
            .map(|i| {
                let r = logits.row(i);
                let z: f64 = r.iter().map(|v| (v / tau).exp()).sum();
                -((r[labels[i]] / tau).exp() / z).ln()
            })
            .sum::<f64>()
            / 6.0;
        assert!((ce(&logits, &labels, tau) - naive).abs() < 1e-12);
        let rescaled =
            Tensor::new(vec![6, 3], logits.data().iter().map(|v| v / tau).collect()).unwrap();
        assert!((ce(&logits, &labels, tau) - ce(&rescaled, &labels, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn global_term_values_and_saturation() {
        let t = Tape::new();
        let half = t.constant(Tensor::vector(vec![0.5, 0.5]));
        let sat = SaturationCounter::new();
        let g = global_divergence_term(&t, half, half, &sat).unwrap();
        assert!((t.item(g) + 4.0 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(sat.get(), 0);

        let good = t.constant(Tensor::vector(vec![1.0 - 1e-7, 1.0 - 1e-7]));
        let bad = t.constant(Tensor::vector(vec![1e-7, 1e-7]));
        let g = global_divergence_term(&t, good, bad, &sat).unwrap();
        assert!(t.item(g).abs() < 1e-6 && t.item(g) <= 0.0);

        let exact = t.constant(Tensor::vector(vec![1.0, 0.0]));
        let g = global_divergence_term(&t, exact, exact, &sat).unwrap();
        assert!(t.item(g).is_finite());
        assert_eq!(sat.get(), 4);
    }

    #[test]
    fn composed_objectives_reduce_correctly() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let t = Tape::new();
        let a = t.constant(unit_rows(&mut rng, 4, 3));
        let p = t.constant(unit_rows(&mut rng, 4, 3));
        let q = t.constant(unit_rows(&mut rng, 4, 3));
        let pb = t.constant(Tensor::vector(vec![0.3, 0.6, 0.7, 0.2]));
        let pa = t.constant(Tensor::vector(vec![0.4, 0.5, 0.1, 0.9]));
        let z = BatchLatents {
            anchors: a,
            positives: p,
            adv_positives: q,
            disc: Some((pb, pa)),
        };
        let sat = SaturationCounter::new();
        let mut c = cfg(0.5, None);
        c.lambda_global = 0.0;
        let obj = attack_objective(&t, &z, &c, &sat).unwrap();
        let adv = info_nce_adv(&t, a, q, &c).unwrap();
        assert_eq!(t.item(obj.total), t.item(adv));

        c.lambda_global = 0.5;
        c.lambda_benign = 2.0;
        let obj = extractor_objective(&t, &z, &c, &sat).unwrap();
        let g = global_divergence_term(&t, pb, pa, &sat).unwrap();
        let b = info_nce(&t, a, p, &c).unwrap();
        let expect = t.item(adv) + 0.5 * t.item(g) + 2.0 * t.item(b);
        assert!((t.item(obj.total) - expect).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let p = unit_rows(&mut rng, 4, 3);
            let a0 = unit_rows(&mut rng, 4, 3);
            let c = cfg(0.5, None);
            let f = |t: &Tape, x: Var| {
                let a = t.l2_normalize(x)?;
                let pv = t.constant(p.clone());
                info_nce(t, a, pv, &c)
            };
            let r = grad_check(f, &a0, 1e-5, 1e-5).unwrap();
            assert!(r.pass, "{r:?}");
        }
    }
}
