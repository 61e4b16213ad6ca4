//! Central-difference validation of tape gradients.

use super::tape::{backward, NodeId, Tape};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
// Resolves f64 math in no_std builds; shadowed by std's inherent methods
// whenever the build graph links std (e.g. under dev-dependencies).
#[allow(unused_imports)]
use num_traits::Float;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

/// Above this many total coordinates the sweep switches to random
/// directional probes.
pub const GRAD_CHECK_COORD_LIMIT: usize = 10_000;

const PROBES_PER_PARAM: usize = 8;

/// Worst observed disagreement between analytic and numeric derivatives.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// Human-readable location of the worst coordinate or probe.
    pub worst: String,
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Checks every parameter in the store. See [`grad_check_targets`].
pub fn grad_check<F>(store: &mut ParamStore<f64>, h: f64, f: &F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<NodeId>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    grad_check_targets(store, &ids, h, f)
}

/// Compares the tape gradient of the scalar-valued graph built by `f`
/// against central finite differences over the target parameters.
///
/// Small target sets (at most [`GRAD_CHECK_COORD_LIMIT`] total coordinates)
/// are swept coordinate by coordinate; larger ones are probed along random
/// unit directions per parameter. The step must satisfy 1e-7 ≤ h ≤ 1e-4.
pub fn grad_check_targets<F>(
    store: &mut ParamStore<f64>,
    targets: &[ParamId],
    h: f64,
    f: &F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<NodeId>,
{
    if !(1e-7..=1e-4).contains(&h) {
        return Err(domain_err!("grad_check step h={h:e} outside [1e-7, 1e-4]"));
    }

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let root = f(store, &mut tape)?;
        let value = tape.value(root)?;
        if value.numel() != 1 {
            return Err(domain_err!(
                "grad_check objective must be scalar, got shape {:?}",
                value.shape()
            ));
        }
        let v = value.item()?;
        if !v.is_finite() {
            return Err(Error::Numeric("grad_check objective is non-finite".into()));
        }
        Ok(v)
    };

    // Analytic gradient from one taped forward/backward.
    let grads = {
        let mut tape = Tape::new();
        let root = f(store, &mut tape)?;
        if tape.value(root)?.numel() != 1 {
            return Err(domain_err!("grad_check objective must be scalar"));
        }
        let (grads, _) = backward(&mut tape, root, Tensor::scalar(1.0), store)?;
        grads
    };

    let total_coords: usize = targets.iter().map(|&id| store.get(id).numel()).sum();
    let sweep = total_coords <= GRAD_CHECK_COORD_LIMIT;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst: String::from("(none)"),
    };
    let note = |rel: f64, label: String, report: &mut GradCheckReport| {
        report.coords_checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = label;
        }
    };

    for &id in targets {
        let n = store.get(id).numel();
        let zero_grad = Tensor::zeros(store.get(id).shape());
        let analytic = grads.get(id).unwrap_or(&zero_grad).as_slice().to_vec();
        if sweep {
            for i in 0..n {
                let old = store.get(id).as_slice()[i];
                store.set_coord(id, i, old + h)?;
                let plus = eval(store)?;
                store.set_coord(id, i, old - h)?;
                let minus = eval(store)?;
                store.set_coord(id, i, old)?;
                let numeric = (plus - minus) / (2.0 * h);
                let rel = relative_error(analytic[i], numeric);
                note(
                    rel,
                    format!(
                        "{}[{i}]: analytic {:+.6e}, numeric {numeric:+.6e}",
                        store.name(id),
                        analytic[i]
                    ),
                    &mut report,
                );
            }
        } else {
            // Probes aggregate many coordinates, and a random-sign
            // direction can land arbitrarily close to derivative zero,
            // where the comparison drowns in finite-difference roundoff.
            // Every direction is therefore sign-aligned with the analytic
            // gradient — probe 0 follows the gradient itself, the rest
            // take random coordinate masks — so the directional
            // derivative keeps the natural scale of the coordinates it
            // sums while the numeric side stays an independent oracle.
            let mut rng = SplitMix64::new(0x9d5c_0000 ^ id.index() as u64);
            let grad_norm = analytic.iter().map(|g| g * g).sum::<f64>().sqrt();
            let base = store.get(id).as_slice().to_vec();
            for probe in 0..PROBES_PER_PARAM {
                let mut dir: Vec<f64> = if probe == 0 && grad_norm > 0.0 {
                    analytic.clone()
                } else {
                    (0..n)
                        .map(|i| {
                            if rng.next_f64() < 0.5 {
                                if analytic[i] < 0.0 {
                                    -1.0
                                } else {
                                    1.0
                                }
                            } else {
                                0.0
                            }
                        })
                        .collect()
                };
                let len = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
                if len == 0.0 {
                    // An empty mask (possible on tiny tensors): fall back
                    // to the uniform direction.
                    let scale = 1.0 / (n as f64).sqrt();
                    dir = (0..n).map(|_| scale).collect();
                } else {
                    for d in &mut dir {
                        *d /= len;
                    }
                }
                let shifted = |sign: f64, store: &mut ParamStore<f64>| -> Result<()> {
                    let data: Vec<f64> = base
                        .iter()
                        .zip(&dir)
                        .map(|(&x, &d)| x + sign * h * d)
                        .collect();
                    store.set(id, Tensor::new(store.get(id).shape(), data)?)
                };
                shifted(1.0, store)?;
                let plus = eval(store)?;
                shifted(-1.0, store)?;
                let minus = eval(store)?;
                store.set(id, Tensor::new(store.get(id).shape(), base.clone())?)?;
                let numeric = (plus - minus) / (2.0 * h);
                let directional: f64 = analytic.iter().zip(&dir).map(|(&g, &d)| g * d).sum();
                let rel = relative_error(directional, numeric);
                note(
                    rel,
                    format!(
                        "{} probe {probe}: analytic {directional:+.6e}, numeric {numeric:+.6e}",
                        store.name(id)
                    ),
                    &mut report,
                );
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::ops;

    #[test]
    fn quadratic_objective_checks_to_below_1e9() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SplitMix64::new(31);
        let x = store
            .register(
                "x",
                Tensor::from_fn(&[6], |_| rng.next_f64() * 2.0 - 1.0),
            )
            .unwrap();
        let report = grad_check(&mut store, 1e-5, &|store, tape| {
            let xn = tape.leaf_param(store, x)?;
            let sq = ops::mul(tape, xn, xn)?;
            ops::sum_all(tape, sq)
        })
        .unwrap();
        assert_eq!(report.coords_checked, 6);
        assert!(
            report.max_rel_err < 1e-9,
            "quadratic: {} at {}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn untouched_parameter_has_zero_analytic_and_numeric_gradient() {
        let mut store = ParamStore::<f64>::new();
        let x = store.register("x", Tensor::scalar(2.0)).unwrap();
        let dead = store.register("dead", Tensor::scalar(7.0)).unwrap();
        let report = grad_check_targets(&mut store, &[x, dead], 1e-5, &|store, tape| {
            let xn = tape.leaf_param(store, x)?;
            ops::mul(tape, xn, xn)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "{}", report.worst);
    }

    #[test]
    fn oversized_parameters_fall_back_to_directional_probes() {
        let mut store = ParamStore::<f64>::new();
        let n = GRAD_CHECK_COORD_LIMIT + 100;
        let mut rng = SplitMix64::new(32);
        let x = store
            .register("big", Tensor::from_fn(&[n], |_| rng.next_f64() - 0.5))
            .unwrap();
        let report = grad_check(&mut store, 1e-4, &|store, tape| {
            let xn = tape.leaf_param(store, x)?;
            let sq = ops::mul(tape, xn, xn)?;
            ops::sum_all(tape, sq)
        })
        .unwrap();
        assert_eq!(report.coords_checked, 8, "probes, not a full sweep");
        // Directional probes difference ~1e4 accumulated terms; correlated
        // rounding keeps the error small but not at single-coordinate levels.
        assert!(report.max_rel_err < 1e-5, "{}", report.worst);
    }

    #[test]
    fn step_size_outside_the_contract_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.register("x", Tensor::scalar(1.0)).unwrap();
        let err = grad_check(&mut store, 1e-2, &|_, tape| {
            tape.constant(Tensor::scalar(0.0))
        });
        assert!(matches!(err, Err(Error::Domain(_))));
    }

    #[test]
    fn non_scalar_objective_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        let x = store.register("x", Tensor::zeros(&[3])).unwrap();
        let err = grad_check(&mut store, 1e-5, &|store, tape| {
            tape.leaf_param(store, x)
        });
        assert!(matches!(err, Err(Error::Domain(_))));
    }
}
