use rand::Rng;
use rand_distr::{Distribution, WeightedIndex};

use crate::error::{Error, Result};
use crate::tensor::{logsumexp, Tensor};

use super::divergence::{classwise, d_v, pushed};
use super::world::{Attack, DiscreteWorld};

/// Slack below which an inequality check fails.
pub const SLACK_TOL: f64 = -1e-10;

/// Largest number of negative multisets `info_nce_exact` will enumerate.
pub const ENUMERATION_BUDGET: u128 = 1_000_000;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `τ-CE(W z, c) = lse(Wz/τ) - (Wz)_c/τ`.
pub fn tau_ce(w: &Tensor, z: &[f64], class: usize, tau: f64) -> f64 {
    let logits: Vec<f64> = w.rows().map(|row| dot(row, z) / tau).collect();
    logsumexp(&logits) - logits[class]
}

/// `Σ_c π_c Σ_x p_c(x) τ-CE(W f(x), c)`.
pub fn sup_loss_exact(world: &DiscreteWorld, w: &Tensor, tau: f64) -> f64 {
    let mut total = 0.0;
    for (c, &pc) in world.pi.iter().enumerate() {
        for (x, &px) in world.p.row(c).iter().enumerate() {
            if px > 0.0 {
                total += pc * px * tau_ce(w, world.f.row(x), c, tau);
            }
        }
    }
    total
}

/// Square-rooted loss at the attacked point with the original label:
/// `Σ_c π_c Σ_x p_c(x) E_{x'~a(x)} τ-CE(W f(x'), c)^{1/2}`.
pub fn adv_loss_exact(world: &DiscreteWorld, w: &Tensor, tau: f64) -> f64 {
    let n = world.n();
    let mut total = 0.0;
    for (c, &pc) in world.pi.iter().enumerate() {
        let root: Vec<f64> = (0..n)
            .map(|t| tau_ce(w, world.f.row(t), c, tau).sqrt())
            .collect();
        for (x, &px) in world.p.row(c).iter().enumerate() {
            let inner = match &world.attack {
                Attack::Map(m) => root[m[x]],
                Attack::Kernel(k) => dot(k.row(x), &root),
            };
            total += pc * px * inner;
        }
    }
    total
}

/// Square-rooted loss under the joint `p(y | x') p_adv(x')`, in which the
/// label is re-drawn from the posterior at the attacked point.
pub fn adv_loss_relabeled(world: &DiscreteWorld, w: &Tensor, tau: f64) -> f64 {
    let d = pushed(world);
    let mut total = 0.0;
    for (x, &pa) in d.p_adv.iter().enumerate() {
        if pa == 0.0 {
            continue;
        }
        for (c, &pc) in world.pi.iter().enumerate() {
            let post = pc * world.p.row(c)[x] / d.p_data[x];
            total += pa * post * tau_ce(w, world.f.row(x), c, tau).sqrt();
        }
    }
    total
}

/// For each atom, the neighbor maximizing its square-rooted loss
/// contribution. Exhaustive over the neighborhood.
pub fn worst_case_attack(world: &DiscreteWorld, w: &Tensor, tau: f64) -> Vec<usize> {
    let n = world.n();
    (0..n)
        .map(|x| {
            let score = |t: usize| -> f64 {
                world
                    .pi
                    .iter()
                    .enumerate()
                    .map(|(c, &pc)| {
                        pc * world.p.row(c)[x] * tau_ce(w, world.f.row(t), c, tau).sqrt()
                    })
                    .sum()
            };
            let mut best = (f64::NEG_INFINITY, x);
            for &t in &world.neighborhoods[x] {
                let s = score(t);
                if s > best.0 {
                    best = (s, t);
                }
            }
            best.1
        })
        .collect()
}

/// Rows `W̄_c = Σ_x p_c(x) f(x)`.
pub fn mean_classifier(world: &DiscreteWorld) -> Tensor {
    let (m, d) = (world.classes(), world.dim());
    let mut out = vec![0.0; m * d];
    for c in 0..m {
        for (x, &px) in world.p.row(c).iter().enumerate() {
            for (o, &v) in out[c * d..(c + 1) * d].iter_mut().zip(world.f.row(x)) {
                *o += px * v;
            }
        }
    }
    Tensor::new(vec![m, d], out).expect("shape")
}

#[derive(Clone, Debug)]
pub struct Theorem1Report {
    pub lhs: f64,
    pub sup_loss: f64,
    pub dv_data: f64,
    pub dv_latent: f64,
    /// `√L + √(L · D_v(p_adv, p_data))`
    pub rhs_data: f64,
    /// `√L + √(L · D_v(q_adv, q_data))`
    pub rhs_latent: f64,
    /// `Σ_c π_c D_v(a # p_c, p_c)`, infinite when some class loses
    /// absolute continuity.
    pub dv_class_data: f64,
    pub dv_class_latent: f64,
    pub rhs_class_data: f64,
    pub rhs_class_latent: f64,
    /// Both mixture-form bounds hold.
    pub pass: bool,
}

impl Theorem1Report {
    pub fn slack_data(&self) -> f64 {
        self.rhs_data - self.lhs
    }
    pub fn slack_latent(&self) -> f64 {
        self.rhs_latent - self.lhs
    }
}

fn theorem1_with(world: &DiscreteWorld, w: &Tensor, tau: f64, lhs: f64) -> Result<Theorem1Report> {
    let d = pushed(world);
    let l = sup_loss_exact(world, w, tau);
    let dv_data = d_v(&d.p_adv, &d.p_data)?.value;
    let dv_latent = d_v(&d.q_adv, &d.q_data)?.value;
    let rhs_data = l.sqrt() + (l * dv_data).sqrt();
    let rhs_latent = l.sqrt() + (l * dv_latent).sqrt();
    let per_class = |adv: &[Vec<f64>], base: &[Vec<f64>]| match classwise(&world.pi, adv, base, d_v)
    {
        Err(Error::AbsoluteContinuity { .. }) => Ok(f64::INFINITY),
        other => other,
    };
    let dv_class_data = per_class(&d.p_class_adv, &d.p_class)?;
    let dv_class_latent = per_class(&d.q_class_adv, &d.q_class)?;
    let pass = rhs_data - lhs >= SLACK_TOL && rhs_latent - lhs >= SLACK_TOL;
    Ok(Theorem1Report {
        lhs,
        sup_loss: l,
        dv_data,
        dv_latent,
        rhs_data,
        rhs_latent,
        dv_class_data,
        dv_class_latent,
        rhs_class_data: l.sqrt() + (l * dv_class_data).sqrt(),
        rhs_class_latent: l.sqrt() + (l * dv_class_latent).sqrt(),
        pass,
    })
}

/// Checks the adversarial loss against its data-space and latent-space
/// upper bounds for a fixed `W`.
pub fn verify_theorem1(world: &DiscreteWorld, w: &Tensor, tau: f64) -> Result<Theorem1Report> {
    theorem1_with(world, w, tau, adv_loss_exact(world, w, tau))
}

/// As [`verify_theorem1`], with the relabeled left-hand side
/// [`adv_loss_relabeled`].
pub fn verify_theorem1_relabeled(
    world: &DiscreteWorld,
    w: &Tensor,
    tau: f64,
) -> Result<Theorem1Report> {
    theorem1_with(world, w, tau, adv_loss_relabeled(world, w, tau))
}

/// `|E_{q_data}[τ-CE(Wz, y)] - E_{p_data}[τ-CE(Wf(x), y)]|`, the latent side
/// computed over grouped atoms.
pub fn verify_pushforward_identity(world: &DiscreteWorld, w: &Tensor, tau: f64) -> f64 {
    let d = pushed(world);
    let mut latent = 0.0;
    for (c, qc) in d.q_class.iter().enumerate() {
        for (g, &mass) in qc.iter().enumerate() {
            let z = world.f.row(d.latent.representatives[g]);
            latent += world.pi[c] * mass * tau_ce(w, z, c, tau);
        }
    }
    (latent - sup_loss_exact(world, w, tau)).abs()
}

/// `E_pos[-f(x)·f(x⁺)/τ] + E_x log E_{x⁻} exp(f(x)·f(x⁻)/τ)`.
pub fn asymptotic_un_loss(world: &DiscreteWorld, tau: f64) -> f64 {
    let n = world.n();
    let g = world.gram();
    let pos = world.p_pos();
    let pd = world.p_data();
    let align: f64 = (0..n * n).map(|i| pos[i] * g[i]).sum::<f64>() / tau;
    let uniform: f64 = (0..n)
        .map(|x| {
            let terms: Vec<f64> = (0..n).map(|y| pd[y].ln() + g[x * n + y] / tau).collect();
            pd[x] * logsumexp(&terms)
        })
        .sum();
    uniform - align
}

/// The `K -> ∞` value of the InfoNCE integrand at fixed `β > 0`:
/// `L̄_un + log β + E_pos log(1 + exp(f·f⁺/τ) / (β α_x))` with
/// `α_x = E_{x⁻} exp(f(x)·f(x⁻)/τ)`.
pub fn info_nce_limit(world: &DiscreteWorld, beta: f64, tau: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::domain("info_nce_limit", "beta must be positive"));
    }
    let n = world.n();
    let g = world.gram();
    let pos = world.p_pos();
    let pd = world.p_data();
    let alpha: Vec<f64> = (0..n)
        .map(|x| (0..n).map(|y| pd[y] * (g[x * n + y] / tau).exp()).sum())
        .collect();
    let mut corr = 0.0;
    for x in 0..n {
        for y in 0..n {
            let e = (g[x * n + y] / tau).exp();
            corr += pos[x * n + y] * (e / (beta * alpha[x])).ln_1p();
        }
    }
    Ok(asymptotic_un_loss(world, tau) + beta.ln() + corr)
}

fn binomial(n: u128, k: u128) -> u128 {
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for i in 0..k {
        r = r.saturating_mul(n - i) / (i + 1);
    }
    r
}

/// Number of size-`k` multisets over `n` atoms.
pub fn multiset_count(n: usize, k: usize) -> u128 {
    binomial((n + k - 1) as u128, k as u128)
}

/// Visits every multiset of `k` atoms from `0..n` as a count vector.
fn for_each_multiset(n: usize, k: usize, mut visit: impl FnMut(&[usize])) {
    fn rec(atom: usize, left: usize, counts: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
        let n = counts.len();
        if atom == n - 1 {
            counts[atom] = left;
            visit(counts);
            counts[atom] = 0;
            return;
        }
        for c in (0..=left).rev() {
            counts[atom] = c;
            rec(atom + 1, left - c, counts, visit);
        }
        counts[atom] = 0;
    }
    let mut counts = vec![0; n];
    rec(0, k, &mut counts, &mut visit);
}

fn ln_factorial(k: usize) -> f64 {
    (1..=k).map(|i| (i as f64).ln()).sum()
}

fn nce_integrand(e_pos: f64, neg_sum: f64, beta: f64, k: usize) -> f64 {
    // -log(e / (e + β/K Σ)) = log(1 + β Σ / (K e))
    (beta * neg_sum / (k as f64 * e_pos)).ln_1p()
}

/// Exact expectation of the InfoNCE integrand over `(x, x⁺) ~ p_pos` and
/// `K` i.i.d. negatives from `p_data`. Negatives are enumerated as
/// multisets weighted by their multinomial probability.
pub fn info_nce_exact(world: &DiscreteWorld, k: usize, beta: f64, tau: f64) -> Result<f64> {
    if k == 0 {
        return Err(Error::domain("info_nce_exact", "K must be positive"));
    }
    let n = world.n();
    let needed = multiset_count(n, k);
    if needed > ENUMERATION_BUDGET {
        return Err(Error::Budget {
            needed,
            budget: ENUMERATION_BUDGET,
        });
    }
    let g = world.gram();
    let e: Vec<f64> = g.iter().map(|v| (v / tau).exp()).collect();
    let pos = world.p_pos();
    let pd = world.p_data();
    let ln_k_fact = ln_factorial(k);
    let mut total = 0.0;
    for_each_multiset(n, k, |counts| {
        let mut ln_w = ln_k_fact;
        for (x, &c) in counts.iter().enumerate() {
            if c > 0 {
                ln_w += c as f64 * pd[x].ln() - ln_factorial(c);
            }
        }
        let weight = ln_w.exp();
        let mut inner = 0.0;
        for x in 0..n {
            let neg: f64 = counts
                .iter()
                .enumerate()
                .map(|(t, &c)| c as f64 * e[x * n + t])
                .sum();
            for y in 0..n {
                let p = pos[x * n + y];
                if p > 0.0 {
                    inner += p * nce_integrand(e[x * n + y], neg, beta, k);
                }
            }
        }
        total += weight * inner;
    });
    Ok(total)
}

#[derive(Clone, Copy, Debug)]
pub struct Estimate {
    pub value: f64,
    /// `None` for exact values.
    pub std_error: Option<f64>,
}

impl Estimate {
    /// `value ± 1.96 · std_error`.
    pub fn ci95(&self) -> (f64, f64) {
        let h = 1.96 * self.std_error.unwrap_or(0.0);
        (self.value - h, self.value + h)
    }
}

/// Monte Carlo estimate of the same expectation as [`info_nce_exact`].
pub fn info_nce_monte_carlo<R: Rng + ?Sized>(
    world: &DiscreteWorld,
    k: usize,
    beta: f64,
    tau: f64,
    samples: usize,
    rng: &mut R,
) -> Result<Estimate> {
    if k == 0 || samples < 2 {
        return Err(Error::domain(
            "info_nce_monte_carlo",
            "need K >= 1 and >= 2 samples",
        ));
    }
    let n = world.n();
    let g = world.gram();
    let classes = WeightedIndex::new(&world.pi).map_err(|e| Error::World(e.to_string()))?;
    let per_class: Vec<WeightedIndex<f64>> = (0..world.classes())
        .map(|c| WeightedIndex::new(world.p.row(c)).map_err(|e| Error::World(e.to_string())))
        .collect::<Result<_>>()?;
    let data = WeightedIndex::new(world.p_data()).map_err(|e| Error::World(e.to_string()))?;
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..samples {
        let c = classes.sample(rng);
        let x = per_class[c].sample(rng);
        let y = per_class[c].sample(rng);
        let neg: f64 = (0..k)
            .map(|_| (g[x * n + data.sample(rng)] / tau).exp())
            .sum();
        let v = nce_integrand((g[x * n + y] / tau).exp(), neg, beta, k);
        sum += v;
        sq += v * v;
    }
    let m = samples as f64;
    let mean = sum / m;
    let var = (sq / m - mean * mean).max(0.0) * m / (m - 1.0);
    Ok(Estimate {
        value: mean,
        std_error: Some((var / m).sqrt()),
    })
}

/// Exact when the multiset count fits the budget, otherwise Monte Carlo
/// with `samples` draws.
pub fn info_nce_estimate<R: Rng + ?Sized>(
    world: &DiscreteWorld,
    k: usize,
    beta: f64,
    tau: f64,
    samples: usize,
    rng: &mut R,
) -> Result<Estimate> {
    match info_nce_exact(world, k, beta, tau) {
        Ok(value) => Ok(Estimate {
            value,
            std_error: None,
        }),
        Err(Error::Budget { .. }) => info_nce_monte_carlo(world, k, beta, tau, samples, rng),
        Err(e) => Err(e),
    }
}
