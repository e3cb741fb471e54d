use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Dirichlet, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SUM_TOL: f64 = 1e-12;

/// How an attacker moves atoms.
#[derive(Clone, Debug, PartialEq)]
pub enum Attack {
    /// `x -> map[x]`.
    Map(Vec<usize>),
    /// Row-stochastic `[n, n]` transition matrix.
    Kernel(Tensor),
}

/// Finite sample space `{0..n}` with class priors, class-conditionals, a
/// unit-norm feature table and an attack restricted to neighborhoods.
#[derive(Clone, Debug)]
pub struct DiscreteWorld {
    /// `[M]`
    pub pi: Vec<f64>,
    /// `[M, n]`, row `c` is `p_c`.
    pub p: Tensor,
    /// `[n, d]`
    pub f: Tensor,
    pub attack: Attack,
    /// Atoms each atom may be moved to. Always contains the atom itself.
    pub neighborhoods: Vec<Vec<usize>>,
}

fn simplex(what: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|&x| !(x >= 0.0)) {
        return Err(Error::World(format!("{what} has a negative entry")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(Error::World(format!("{what} sums to {s}")));
    }
    Ok(())
}

impl DiscreteWorld {
    pub fn new(
        pi: Vec<f64>,
        p: Tensor,
        f: Tensor,
        attack: Attack,
        neighborhoods: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let w = DiscreteWorld {
            pi,
            p,
            f,
            attack,
            neighborhoods,
        };
        w.validate()?;
        Ok(w)
    }

    /// Every atom may move anywhere.
    pub fn full_neighborhoods(n: usize) -> Vec<Vec<usize>> {
        vec![(0..n).collect(); n]
    }

    pub fn n(&self) -> usize {
        self.f.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.pi.len()
    }

    pub fn dim(&self) -> usize {
        self.f.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n) = (self.pi.len(), self.f.shape()[0]);
        if self.p.shape() != [m, n] {
            return Err(Error::World(format!(
                "class-conditional table has shape {:?}, expected [{m}, {n}]",
                self.p.shape()
            )));
        }
        simplex("pi", &self.pi)?;
        for c in 0..m {
            simplex(&format!("p_{c}"), self.p.row(c))?;
        }
        for (x, row) in self.f.rows().enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > SUM_TOL {
                return Err(Error::World(format!("feature row {x} has norm {norm}")));
            }
        }
        if self.neighborhoods.len() != n {
            return Err(Error::World("one neighborhood per atom required".into()));
        }
        for (x, nb) in self.neighborhoods.iter().enumerate() {
            if !nb.contains(&x) || nb.iter().any(|&t| t >= n) {
                return Err(Error::World(format!("bad neighborhood for atom {x}")));
            }
        }
        match &self.attack {
            Attack::Map(map) => {
                if map.len() != n {
                    return Err(Error::World("attack map length differs from n".into()));
                }
                for (x, &t) in map.iter().enumerate() {
                    if !self.neighborhoods[x].contains(&t) {
                        return Err(Error::World(format!(
                            "attack moves {x} outside its neighborhood"
                        )));
                    }
                }
            }
            Attack::Kernel(k) => {
                if k.shape() != [n, n] {
                    return Err(Error::World("attack kernel must be [n, n]".into()));
                }
                for x in 0..n {
                    simplex(&format!("kernel row {x}"), k.row(x))?;
                    for (t, &mass) in k.row(x).iter().enumerate() {
                        if mass > 0.0 && !self.neighborhoods[x].contains(&t) {
                            return Err(Error::World(format!(
                                "kernel puts mass on {t} outside the neighborhood of {x}"
                            )));
                        }
                    }
                }
            }
        }
        let pd = self.p_data();
        if let Some(x) = pd.iter().position(|&v| v <= 0.0) {
            return Err(Error::World(format!("atom {x} has zero data mass")));
        }
        Ok(())
    }

    /// `Σ_c π_c p_c(x)`.
    pub fn p_data(&self) -> Vec<f64> {
        let n = self.n();
        let mut out = vec![0.0; n];
        for (c, &w) in self.pi.iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(self.p.row(c)) {
                *o += w * v;
            }
        }
        out
    }

    /// `p_pos(x, x⁺) = Σ_c π_c p_c(x) p_c(x⁺)`, row-major `[n, n]`.
    pub fn p_pos(&self) -> Vec<f64> {
        let n = self.n();
        let mut out = vec![0.0; n * n];
        for (c, &w) in self.pi.iter().enumerate() {
            let pc = self.p.row(c);
            for x in 0..n {
                for y in 0..n {
                    out[x * n + y] += w * pc[x] * pc[y];
                }
            }
        }
        out
    }

    /// Gram matrix `f(x)·f(y)`, row-major `[n, n]`.
    pub fn gram(&self) -> Vec<f64> {
        let n = self.n();
        let mut g = vec![0.0; n * n];
        for x in 0..n {
            for y in 0..n {
                g[x * n + y] = self
                    .f
                    .row(x)
                    .iter()
                    .zip(self.f.row(y))
                    .map(|(a, b)| a * b)
                    .sum();
            }
        }
        g
    }

    /// The same world with a different attack.
    pub fn with_attack(&self, attack: Attack) -> Result<Self> {
        let mut w = self.clone();
        w.attack = attack;
        w.validate()?;
        Ok(w)
    }
}

/// Ranges for randomized worlds.
#[derive(Clone, Debug)]
pub struct WorldSpec {
    pub min_atoms: usize,
    pub max_atoms: usize,
    pub max_classes: usize,
    pub max_dim: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            min_atoms: 2,
            max_atoms: 8,
            max_classes: 3,
            max_dim: 4,
        }
    }
}

fn dirichlet<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<f64> {
    let v: Vec<f64> = Dirichlet::new_with_size(1.0, k)
        .expect("k >= 2")
        .sample(rng);
    // Renormalize so the sum is 1 to rounding, not just approximately.
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

pub(crate) fn random_unit<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Draws a world: uniform Dirichlet priors and class-conditionals, Gaussian
/// directions for features, random neighborhoods containing each atom, and a
/// deterministic attack chosen uniformly within each neighborhood.
pub fn random_world<R: Rng + ?Sized>(rng: &mut R, spec: &WorldSpec) -> DiscreteWorld {
    let n = rng.gen_range(spec.min_atoms.max(2)..=spec.max_atoms.max(2));
    let m = rng.gen_range(2..=spec.max_classes.max(2));
    let d = rng.gen_range(2..=spec.max_dim.max(2));
    let pi = dirichlet(rng, m);
    let p: Vec<f64> = (0..m).flat_map(|_| dirichlet(rng, n)).collect();
    let f: Vec<f64> = (0..n).flat_map(|_| random_unit(rng, d)).collect();
    let neighborhoods: Vec<Vec<usize>> = (0..n)
        .map(|x| {
            let extra = rng.gen_range(0..n);
            let mut nb: Vec<usize> = std::iter::once(x)
                .chain((0..extra).map(|_| rng.gen_range(0..n)))
                .collect();
            nb.sort_unstable();
            nb.dedup();
            nb
        })
        .collect();
    let map = neighborhoods
        .iter()
        .map(|nb| *nb.choose(rng).expect("non-empty"))
        .collect();
    DiscreteWorld::new(
        pi,
        Tensor::new(vec![m, n], p).expect("shape"),
        Tensor::new(vec![n, d], f).expect("shape"),
        Attack::Map(map),
        neighborhoods,
    )
    .expect("generated world is valid")
}

/// Random row-stochastic kernel supported on the world's neighborhoods.
pub fn random_kernel<R: Rng + ?Sized>(rng: &mut R, world: &DiscreteWorld) -> Tensor {
    let n = world.n();
    let mut k = vec![0.0; n * n];
    for (x, nb) in world.neighborhoods.iter().enumerate() {
        let w = if nb.len() >= 2 {
            dirichlet(rng, nb.len())
        } else {
            vec![1.0]
        };
        for (&t, v) in nb.iter().zip(w) {
            k[x * n + t] = v;
        }
    }
    Tensor::new(vec![n, n], k).expect("shape")
}

/// `W` with standard normal entries, `[M, d]`.
pub fn random_classifier<R: Rng + ?Sized>(rng: &mut R, world: &DiscreteWorld) -> Tensor {
    let (m, d) = (world.classes(), world.dim());
    Tensor::new(
        vec![m, d],
        (0..m * d).map(|_| StandardNormal.sample(rng)).collect(),
    )
    .expect("shape")
}
