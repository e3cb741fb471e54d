use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::world::{Attack, DiscreteWorld};

/// Atoms with identical feature rows (to this tolerance) share a latent atom.
pub const LATENT_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct DivergenceResult {
    pub value: f64,
    /// Per-atom contribution; sums to `value`.
    pub integrand: Vec<f64>,
}

fn f_divergence(p: &[f64], q: &[f64], gen: impl Fn(f64) -> f64) -> Result<DivergenceResult> {
    if p.len() != q.len() {
        return Err(Error::shape("divergence", &[p.len()], &[q.len()]));
    }
    let mut integrand = Vec::with_capacity(p.len());
    for (atom, (&pa, &qa)) in p.iter().zip(q).enumerate() {
        if qa <= 0.0 {
            if pa > 0.0 {
                return Err(Error::AbsoluteContinuity { atom, p: pa, q: qa });
            }
            integrand.push(0.0);
            continue;
        }
        integrand.push(gen(pa / qa) * qa);
    }
    Ok(DivergenceResult {
        value: integrand.iter().sum(),
        integrand,
    })
}

/// `Σ (p/q - 1)² q`.
pub fn d_v(p: &[f64], q: &[f64]) -> Result<DivergenceResult> {
    f_divergence(p, q, |t| (t - 1.0) * (t - 1.0))
}

/// `Σ |p/q - 1| q = Σ |p - q|`.
pub fn d_u(p: &[f64], q: &[f64]) -> Result<DivergenceResult> {
    f_divergence(p, q, |t| (t - 1.0).abs())
}

/// `Σ_c π_c D(p_c^a, p_c)`.
pub fn classwise<D>(pi: &[f64], adv: &[Vec<f64>], base: &[Vec<f64>], div: D) -> Result<f64>
where
    D: Fn(&[f64], &[f64]) -> Result<DivergenceResult>,
{
    let mut total = 0.0;
    for ((w, a), b) in pi.iter().zip(adv).zip(base) {
        total += w * div(a, b)?.value;
    }
    Ok(total)
}

/// Mass moved by a deterministic map.
pub fn push_map(map: &[usize], dist: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; dist.len()];
    for (&t, &m) in map.iter().zip(dist) {
        out[t] += m;
    }
    out
}

/// `qᵀ = pᵀ K`.
pub fn push_kernel(kernel: &Tensor, dist: &[f64]) -> Vec<f64> {
    let n = dist.len();
    let mut out = vec![0.0; n];
    for (x, &m) in dist.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for (o, &k) in out.iter_mut().zip(kernel.row(x)) {
            *o += m * k;
        }
    }
    out
}

pub fn push_attack(attack: &Attack, dist: &[f64]) -> Vec<f64> {
    match attack {
        Attack::Map(m) => push_map(m, dist),
        Attack::Kernel(k) => push_kernel(k, dist),
    }
}

/// Groups atoms by feature row. Returns one representative atom per group
/// and each atom's group index.
#[derive(Clone, Debug)]
pub struct LatentAtoms {
    pub representatives: Vec<usize>,
    pub group_of: Vec<usize>,
}

impl LatentAtoms {
    pub fn from_features(f: &Tensor) -> Self {
        let mut representatives: Vec<usize> = Vec::new();
        let mut group_of = Vec::with_capacity(f.outer_len());
        for x in 0..f.outer_len() {
            let row = f.row(x);
            let found = representatives.iter().position(|&r| {
                f.row(r)
                    .iter()
                    .zip(row)
                    .all(|(a, b)| (a - b).abs() <= LATENT_TOL)
            });
            match found {
                Some(g) => group_of.push(g),
                None => {
                    group_of.push(representatives.len());
                    representatives.push(x);
                }
            }
        }
        LatentAtoms {
            representatives,
            group_of,
        }
    }

    pub fn len(&self) -> usize {
        self.representatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.representatives.is_empty()
    }

    /// `f # dist`.
    pub fn push(&self, dist: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for (&g, &m) in self.group_of.iter().zip(dist) {
            out[g] += m;
        }
        out
    }
}

/// Adversarial and benign data distributions with their latent images.
#[derive(Clone, Debug)]
pub struct PushedDistributions {
    pub p_data: Vec<f64>,
    pub p_adv: Vec<f64>,
    pub q_data: Vec<f64>,
    pub q_adv: Vec<f64>,
    /// Per-class `p_c` and `a # p_c`.
    pub p_class: Vec<Vec<f64>>,
    pub p_class_adv: Vec<Vec<f64>>,
    pub q_class: Vec<Vec<f64>>,
    pub q_class_adv: Vec<Vec<f64>>,
    pub latent: LatentAtoms,
}

pub fn pushed(world: &DiscreteWorld) -> PushedDistributions {
    let latent = LatentAtoms::from_features(&world.f);
    let p_data = world.p_data();
    let p_adv = push_attack(&world.attack, &p_data);
    let p_class: Vec<Vec<f64>> = (0..world.classes())
        .map(|c| world.p.row(c).to_vec())
        .collect();
    let p_class_adv: Vec<Vec<f64>> = p_class
        .iter()
        .map(|p| push_attack(&world.attack, p))
        .collect();
    PushedDistributions {
        q_data: latent.push(&p_data),
        q_adv: latent.push(&p_adv),
        q_class: p_class.iter().map(|p| latent.push(p)).collect(),
        q_class_adv: p_class_adv.iter().map(|p| latent.push(p)).collect(),
        p_data,
        p_adv,
        p_class,
        p_class_adv,
        latent,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_atom_values() {
        let p = [0.5, 0.5];
        let q = [0.25, 0.75];
        assert!((d_v(&p, &q).unwrap().value - 1.0 / 3.0).abs() < 1e-15);
        assert!((d_u(&p, &q).unwrap().value - 0.5).abs() < 1e-15);
        assert_eq!(d_v(&q, &q).unwrap().value, 0.0);
        assert_eq!(d_u(&q, &q).unwrap().value, 0.0);
        let r = d_v(&p, &q).unwrap();
        assert!((r.integrand.iter().sum::<f64>() - r.value).abs() < 1e-15);
    }

    #[test]
    fn absolute_continuity_names_atom() {
        let err = d_v(&[0.5, 0.5], &[1.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::AbsoluteContinuity { atom: 1, .. }));
        assert!(d_u(&[1.0, 0.0], &[1.0, 0.0]).is_ok());
    }

    #[test]
    fn maps_and_kernels() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(push_map(&[0, 1, 2], &p), p.to_vec());
        assert_eq!(push_map(&[0, 0, 0], &p), vec![1.0, 0.0, 0.0]);
        let k = Tensor::new(
            vec![3, 3],
            vec![0.5, 0.5, 0.0, 0.0, 1.0, 0.0, 0.2, 0.3, 0.5],
        )
        .unwrap();
        let q = push_kernel(&k, &p);
        let dense = crate::tensor::matmul_raw(&p, k.data(), 1, 3, 3);
        for (a, b) in q.iter().zip(&dense) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn latent_grouping_merges_identical_rows() {
        let f = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let l = LatentAtoms::from_features(&f);
        assert_eq!(l.representatives, vec![0, 1]);
        assert_eq!(l.group_of, vec![0, 1, 0]);
        assert_eq!(l.push(&[0.2, 0.3, 0.5]), vec![0.7, 0.3]);
    }

    #[test]
    fn classwise_is_prior_weighted_sum() {
        let pi = [0.25, 0.75];
        let adv = vec![vec![0.5, 0.5], vec![0.1, 0.9]];
        let base = vec![vec![0.25, 0.75], vec![0.1, 0.9]];
        let v = classwise(&pi, &adv, &base, d_v).unwrap();
        assert!((v - 0.25 / 3.0).abs() < 1e-15);
    }
}
