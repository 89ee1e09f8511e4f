//! Central finite-difference checks for analytic gradients.

use crate::error::Result;
use crate::fusion::FusionOperator;
use crate::model::{Visual, VqaModel};
use crate::tensor::dot;

/// Entries below this magnitude are compared absolutely rather than
/// relatively; central differences at step 1e-5 carry ~1e-10 absolute error.
pub const RELATIVE_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// `(f(x + h eᵢ) − f(x − h eᵢ)) / 2h` for every coordinate `i`.
pub fn central_differences(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&probe)?;
        probe[i] = orig - step;
        let minus = f(&probe)?;
        probe[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// Name of the coordinate with the largest error (`param[i]`, `q[i]`, `v[i]`).
    pub worst: String,
    pub checked: usize,
}

impl GradReport {
    fn update(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if self.worst.is_empty() || e > self.max_rel_error {
            self.max_rel_error = e;
            self.worst = label();
        }
    }
}

fn report(
    names: impl Fn(usize) -> String,
    analytic: &[f64],
    numeric: &[f64],
    rep: &mut GradReport,
) {
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        rep.update(|| names(i), a, n);
    }
}

/// Checks every parameter and input gradient of `op` for the scalar loss
/// `L = ⟨d_y, y(q, v)⟩`.
pub fn check_fusion(op: &FusionOperator, q: &[f64], v: &[f64], d_y: &[f64], step: f64) -> Result<GradReport> {
    let (_, cache) = op.forward(q, v)?;
    let grads = op.backward(&cache, d_y)?;
    let mut rep = GradReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };

    let manifest = op.manifest();
    let packed = op.pack();
    let mut probe = op.clone();
    let numeric = central_differences(packed.values(), step, |p| {
        probe.unpack_values(p)?;
        Ok(dot(d_y, &probe.forward(q, v)?.0))
    })?;
    let names = |i: usize| {
        manifest
            .entries()
            .iter()
            .find(|e| e.range().contains(&i))
            .map(|e| format!("{}[{}]", e.name, i - e.offset))
            .unwrap_or_default()
    };
    report(names, grads.params.values(), &numeric, &mut rep);

    let numeric_q = central_differences(q, step, |x| Ok(dot(d_y, &op.forward(x, v)?.0)))?;
    report(|i| format!("q[{i}]"), &grads.d_q, &numeric_q, &mut rep);
    let numeric_v = central_differences(v, step, |x| Ok(dot(d_y, &op.forward(q, x)?.0)))?;
    report(|i| format!("v[{i}]"), &grads.d_v, &numeric_v, &mut rep);
    Ok(rep)
}

/// Same check for a whole model (attention stage included) and its `q` input.
pub fn check_model(model: &VqaModel, q: &[f64], visual: &Visual, d_y: &[f64], step: f64) -> Result<GradReport> {
    let (_, cache) = model.forward_train(q, visual)?;
    let mut grads = model.zero_grads();
    let d_q = model.backward_into(visual, &cache, d_y, &mut grads)?;
    let mut analytic = vec![0.0; model.param_count()];
    grads.pack_into(&mut analytic);
    let mut rep = GradReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };

    let packed = model.pack();
    let manifest = packed.manifest().clone();
    let mut probe = model.clone();
    let numeric = central_differences(packed.values(), step, |p| {
        probe.unpack_values(p)?;
        Ok(dot(d_y, &probe.logits(q, visual)?))
    })?;
    let names = |i: usize| {
        manifest
            .entries()
            .iter()
            .find(|e| e.range().contains(&i))
            .map(|e| format!("{}[{}]", e.name, i - e.offset))
            .unwrap_or_default()
    };
    report(names, &analytic, &numeric, &mut rep);
    let numeric_q = central_differences(q, step, |x| Ok(dot(d_y, &model.logits(x, visual)?)))?;
    report(|i| format!("q[{i}]"), &d_q, &numeric_q, &mut rep);
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_differences_of_quadratic_are_exact() {
        let g = central_differences(&[1.0, -2.0, 0.5], 1e-3, |x| {
            Ok(x.iter().map(|v| v * v).sum())
        })
        .unwrap();
        for (a, b) in g.iter().zip([2.0, -4.0, 1.0]) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-12, 2e-12) < 1e-7);
    }
}
