//! Central-difference gradient checking.
//!
//! The checker rebuilds the loss from scratch for every probe, so the loss
//! closure must be deterministic: same parameters in, same scalar out.
//! Errors are measured as `|fd - analytic| / max(1, |analytic|)`, which keeps
//! the test meaningful both for O(1) gradients and for the near-zero ones
//! that saturating gates produce.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EngineError, ParamSet, Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum admissible normalized error.
    pub tolerance: f64,
    /// Cap on probed coordinates per parameter tensor; the rest are sampled.
    pub max_coords_per_param: usize,
    /// Seed for coordinate sampling.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords_per_param: 24,
            seed: 0x9e3779b9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Coordinates probed across all parameters.
    pub checked: usize,
    /// Largest normalized error seen.
    pub max_rel_err: f64,
    /// Parameter name and coordinate of that error.
    pub worst: Option<(String, usize, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tolerance
    }
}

/// Compare analytic gradients of `loss_fn` against central differences over
/// every parameter in `params`.
///
/// `loss_fn` receives the current parameters and a fresh tape and must return
/// a `1x1` loss.  Every parameter must end up bound (a parameter with no
/// gradient after the analytic pass is reported as an error, not skipped:
/// that is how wiring bugs surface).
pub fn gradcheck<F>(
    params: &mut ParamSet<f64>,
    mut loss_fn: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, EngineError>
where
    F: FnMut(&ParamSet<f64>, &mut Tape<f64>) -> Result<Var, EngineError>,
{
    params.zero_grads();
    let mut tape = Tape::new();
    let loss = loss_fn(params, &mut tape)?;
    tape.backward(loss)?;
    tape.harvest(params)?;
    drop(tape);

    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };

    for name in names {
        let (dim, analytic) = {
            let p = params.get(&name)?;
            let g = p
                .grad
                .as_ref()
                .ok_or_else(|| EngineError::MissingGrad(name.clone()))?;
            (p.value.dim(), g.clone())
        };
        let total = dim.0 * dim.1;
        let coords: Vec<usize> = if total <= cfg.max_coords_per_param {
            (0..total).collect()
        } else {
            rand::seq::index::sample(&mut rng, total, cfg.max_coords_per_param).into_vec()
        };
        for flat in coords {
            let (r, c) = (flat / dim.1, flat % dim.1);
            let orig = params.get(&name)?.value[(r, c)];

            params.get_mut(&name)?.value[(r, c)] = orig + cfg.step;
            let up = eval_loss(params, &mut loss_fn)?;
            params.get_mut(&name)?.value[(r, c)] = orig - cfg.step;
            let down = eval_loss(params, &mut loss_fn)?;
            params.get_mut(&name)?.value[(r, c)] = orig;

            let fd = (up - down) / (2.0 * cfg.step);
            let an = analytic[(r, c)];
            let rel = (fd - an).abs() / an.abs().max(1.0);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), r, c));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

fn eval_loss<F>(params: &ParamSet<f64>, loss_fn: &mut F) -> Result<f64, EngineError>
where
    F: FnMut(&ParamSet<f64>, &mut Tape<f64>) -> Result<Var, EngineError>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(params, &mut tape)?;
    let v = tape.value(loss);
    if v.dim() != (1, 1) {
        return Err(EngineError::NotScalar {
            op: "gradcheck",
            shape: v.dim(),
        });
    }
    Ok(v[(0, 0)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;

    fn filled(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn quadratic_gradient_checks_out() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        params.insert("w", filled(&mut rng, 4, 3)).unwrap();
        let x = filled(&mut rng, 3, 2);
        let report = gradcheck(
            &mut params,
            |ps, tape| {
                let w = tape.bind(ps, "w")?;
                let xv = tape.constant(x.clone());
                let y = tape.matmul(w, xv)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(1e-4), "max err {}", report.max_rel_err);
        assert_eq!(report.checked, 12);
    }

    #[test]
    fn checker_flags_a_wrong_gradient() {
        // The analytic pass sees loss 2*sum(w); the finite-difference probes
        // see sum(w).  A checker that cannot catch a factor-of-two error is
        // not a checker.
        let mut params = ParamSet::new();
        params.insert("w", Array2::from_elem((2, 2), 0.3)).unwrap();
        let mut first = true;
        let report = gradcheck(
            &mut params,
            move |ps, tape| {
                let w = tape.bind(ps, "w")?;
                let scaled = if first {
                    first = false;
                    tape.scale(w, 2.0)
                } else {
                    w
                };
                Ok(tape.sum_all(scaled))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(
            report.max_rel_err > 0.4,
            "sabotaged gradient must be flagged, saw {}",
            report.max_rel_err
        );
    }

    #[test]
    fn unbound_parameter_is_an_error_not_a_pass() {
        let mut params = ParamSet::new();
        params.insert("used", Array2::from_elem((1, 1), 1.0)).unwrap();
        params.insert("forgotten", Array2::from_elem((1, 1), 1.0)).unwrap();
        let err = gradcheck(
            &mut params,
            |ps, tape| {
                let w = tape.bind(ps, "used")?;
                Ok(tape.sum_all(w))
            },
            &GradCheckConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, EngineError::MissingGrad(name) if name == "forgotten"));
    }
}
