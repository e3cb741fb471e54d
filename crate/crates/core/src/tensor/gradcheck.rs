use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinate where `max_rel_err` was attained.
    pub worst_coordinate: usize,
    pub pass: bool,
}

/// Magnitude below which the comparison falls back to absolute error.
const ABS_FALLBACK: f64 = 1e-8;

/// Checks the autodiff gradient of `f` at `theta`.
///
/// `f` builds its graph on the supplied tape from the leaf it is handed and
/// returns the scalar output.
pub fn grad_check<F>(f: F, theta: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let tape = Tape::new();
    let leaf = tape.leaf(theta.clone(), true);
    let out = f(&tape, leaf)?;
    tape.backward(out)?;
    let analytic = tape.grad(leaf);
    let value = |t: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let leaf = tape.leaf(t.clone(), false);
        let out = f(&tape, leaf)?;
        Ok(tape.item(out))
    };
    grad_check_against(value, theta, &analytic, h, tol)
}

/// Compares a supplied gradient against central differences of `value`.
pub fn grad_check_against<F>(
    value: F,
    theta: &Tensor,
    gradient: &Tensor,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Config(format!(
            "finite-difference step {h} outside [1e-7, 1e-3]"
        )));
    }
    if gradient.shape() != theta.shape() {
        return Err(Error::shape("grad_check", gradient.shape(), theta.shape()));
    }
    let mut probe = theta.clone();
    let mut worst = (0.0_f64, 0_usize);
    for i in 0..theta.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = value(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = value(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteProbe { coordinate: i });
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = gradient.data()[i];
        let scale = a.abs().max(numeric.abs());
        let err = if scale < ABS_FALLBACK {
            (a - numeric).abs()
        } else {
            (a - numeric).abs() / scale
        };
        if err > worst.0 || err.is_nan() {
            worst = (err, i);
        }
    }
    Ok(GradCheckReport {
        max_rel_err: worst.0,
        worst_coordinate: worst.1,
        pass: worst.0 < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn squared_norm(t: &Tape, x: Var) -> Result<Var> {
        let sq = t.mul(x, x)?;
        Ok(t.sum(sq))
    }

    #[test]
    fn squared_norm_passes_tightly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let theta = Tensor::vector((0..10).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let report = grad_check(squared_norm, &theta, 1e-5, 1e-8).unwrap();
        assert!(report.pass, "{report:?}");
        assert!(report.max_rel_err < 1e-8);
    }

    #[test]
    fn injected_error_is_caught() {
        let theta = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let mut wrong = Tensor::vector(theta.data().iter().map(|v| 2.0 * v).collect());
        wrong.data_mut()[1] += 1.0;
        let value = |t: &Tensor| Ok(t.data().iter().map(|v| v * v).sum::<f64>());
        let report = grad_check_against(value, &theta, &wrong, 1e-5, 1e-5).unwrap();
        assert!(!report.pass);
        assert_eq!(report.worst_coordinate, 1);
    }

    #[test]
    fn non_finite_probe_names_coordinate() {
        let theta = Tensor::vector(vec![1.0, 1e-6]);
        let grad = Tensor::vector(vec![1.0, 1e6]);
        let value = |t: &Tensor| Ok(t.data()[0] + t.data()[1].ln());
        // The probe at 1e-6 - 1e-5 leaves the log domain.
        let err = grad_check_against(value, &theta, &grad, 1e-5, 1e-5).unwrap_err();
        assert!(matches!(err, Error::NonFiniteProbe { coordinate: 1 }));
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let theta = Tensor::vector(vec![1.0]);
        assert!(grad_check(squared_norm, &theta, 1e-2, 1e-5).is_err());
    }

    #[test]
    fn primitive_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let theta = Tensor::new(
            vec![3, 4],
            (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let w = Tensor::new(
            vec![4, 2],
            (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let f = move |t: &Tape, x: Var| -> Result<Var> {
            let wv = t.constant(w.clone());
            let h = t.matmul(x, wv)?;
            let h = t.tanh(h);
            let s = t.sigmoid(h);
            let n = t.l2_normalize(x)?;
            let d = t.dot(n, n)?;
            let lse = t.logsumexp(h)?;
            let e = t.exp(s);
            let part = t.slice(e, 1, 3)?;
            let tr = t.transpose(part)?;
            let c = t.clamp(tr, -10.0, 10.0);
            let a = t.add(t.sum(c), t.mean(lse))?;
            let b = t.sub(a, t.sum(d))?;
            Ok(t.add_scalar(t.scale(b, 0.7), 1.0))
        };
        let report = grad_check(f, &theta, 1e-5, 1e-6).unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn extra_primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let theta = Tensor::new(
            vec![2, 3],
            (0..6).map(|_| rng.gen_range(0.2..1.0)).collect(),
        )
        .unwrap();
        let f = |t: &Tape, x: Var| -> Result<Var> {
            let bias = t.slice(t.reshape(x, vec![6])?, 0, 3)?;
            let h = t.add_row(x, bias)?;
            let r = t.relu(t.add_scalar(h, -0.3));
            let both = t.concat(&[t.log(x)?, t.mul(r, x)?], 1)?;
            let mask = [true, false, true, true, true, false].repeat(2);
            let m = t.logsumexp_masked(both, mask)?;
            Ok(t.sum(m))
        };
        let report = grad_check(f, &theta, 1e-5, 1e-6).unwrap();
        assert!(report.pass, "{report:?}");
    }
}
