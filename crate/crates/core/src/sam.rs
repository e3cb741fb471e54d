//! Sharpness-aware perturbation of the benign-loss gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamConfig {
    pub rho: f64,
    #[serde(default = "default_adaptive")]
    pub adaptive: bool,
}

fn default_adaptive() -> bool {
    true
}

impl SamConfig {
    /// ASAM with `ρ = 1.0`.
    pub fn adaptive() -> Self {
        SamConfig {
            rho: 1.0,
            adaptive: true,
        }
    }

    /// Plain SAM with `ρ = 0.05`.
    pub fn plain() -> Self {
        SamConfig {
            rho: 0.05,
            adaptive: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Config(format!(
                "SAM rho must be positive, got {}",
                self.rho
            )));
        }
        Ok(())
    }
}

impl Default for SamConfig {
    fn default() -> Self {
        Self::adaptive()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SamStats {
    pub steps: u64,
    /// Steps where the ascent direction vanished and θ was left unchanged.
    pub degenerate: u64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// First-order worst-case parameters within radius `ρ`.
///
/// Plain: `θ + ρ g/‖g‖`. Adaptive: `θ + ρ |θ|⊙(|θ|⊙g) / ‖|θ|⊙g‖`.
pub fn sam_perturb(
    theta: &[f64],
    g: &[f64],
    cfg: &SamConfig,
    stats: &mut SamStats,
) -> Result<Vec<f64>> {
    if theta.len() != g.len() {
        return Err(Error::shape("sam_perturb", &[theta.len()], &[g.len()]));
    }
    stats.steps += 1;
    let scaled: Vec<f64> = if cfg.adaptive {
        theta.iter().zip(g).map(|(t, gi)| t.abs() * gi).collect()
    } else {
        g.to_vec()
    };
    let n = norm(&scaled);
    if n == 0.0 || cfg.rho == 0.0 {
        stats.degenerate += u64::from(n == 0.0);
        return Ok(theta.to_vec());
    }
    let k = cfg.rho / n;
    Ok(theta
        .iter()
        .zip(&scaled)
        .map(|(t, s)| {
            let dir = if cfg.adaptive { t.abs() * s } else { *s };
            t + k * dir
        })
        .collect())
}

/// One update that averages the plain gradient of the non-benign terms
/// with the benign-loss gradient taken at the perturbed parameters:
/// `θ - lr (g_other + ∇benign(θ')) / 2`.
///
/// `g_benign` is the benign gradient at `theta`; `benign_grad_at` evaluates
/// it elsewhere. With `sam = None`, `θ' = θ` and no re-evaluation happens.
pub fn combined_step<F>(
    theta: &[f64],
    g_other: &[f64],
    g_benign: &[f64],
    benign_grad_at: F,
    sam: Option<&SamConfig>,
    lr: f64,
    stats: &mut SamStats,
) -> Result<Vec<f64>>
where
    F: FnOnce(&[f64]) -> Result<Vec<f64>>,
{
    if g_other.len() != theta.len() || g_benign.len() != theta.len() {
        return Err(Error::shape(
            "combined_step",
            &[theta.len()],
            &[g_other.len(), g_benign.len()],
        ));
    }
    let perturbed_grad;
    let gb: &[f64] = match sam {
        Some(cfg) if g_benign.iter().any(|&v| v != 0.0) => {
            let before = stats.degenerate;
            let theta_p = sam_perturb(theta, g_benign, cfg, stats)?;
            if stats.degenerate > before {
                g_benign
            } else {
                perturbed_grad = benign_grad_at(&theta_p)?;
                if perturbed_grad.len() != theta.len() {
                    return Err(Error::shape(
                        "combined_step",
                        &[theta.len()],
                        &[perturbed_grad.len()],
                    ));
                }
                &perturbed_grad
            }
        }
        _ => g_benign,
    };
    Ok(theta
        .iter()
        .zip(g_other)
        .zip(gb)
        .map(|((t, a), b)| t - lr * (a + b) / 2.0)
        .collect())
}
