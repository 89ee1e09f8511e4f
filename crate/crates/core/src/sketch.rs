//! Count-sketch projection and circular convolution.
//!
//! With per-input plans `(h_q, s_q)` and `(h_v, s_v)` over the same output
//! size `d`, the sketch of the outer product `q ⊗ v` under the joint plan
//! `h(i, j) = (h_q[i] + h_v[j]) mod d`, `s(i, j) = s_q[i] · s_v[j]` equals
//! the circular convolution of the two per-input sketches, so the outer
//! product never needs to be formed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Error, Result};
use crate::tensor::{Matrix, Tensor3};

/// Fixed random hash and sign arrays for one count-sketch projection.
#[derive(Clone, Debug, PartialEq)]
pub struct CountSketchPlan {
    input_dim: usize,
    output_dim: usize,
    hash: Vec<usize>,
    signs: Vec<f64>,
    seed: u64,
}

impl CountSketchPlan {
    /// Samples a plan. The arrays are a pure function of `(input_dim, output_dim, seed)`.
    pub fn new(input_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::ZeroDimension(format!(
                "count sketch {input_dim} -> {output_dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hash = Vec::with_capacity(input_dim);
        let mut signs = Vec::with_capacity(input_dim);
        for _ in 0..input_dim {
            hash.push(rng.random_range(0..output_dim));
            signs.push(if rng.random::<bool>() { 1.0 } else { -1.0 });
        }
        Ok(CountSketchPlan {
            input_dim,
            output_dim,
            hash,
            signs,
            seed,
        })
    }

    /// Builds a plan from explicit arrays. Such a plan has no seed that
    /// regenerates it; `seed` is recorded as given.
    pub fn from_parts(output_dim: usize, hash: Vec<usize>, signs: Vec<f64>, seed: u64) -> Result<Self> {
        check_dim("count sketch sign array", hash.len(), signs.len())?;
        if hash.is_empty() || output_dim == 0 {
            return Err(Error::ZeroDimension("count sketch".into()));
        }
        if let Some(&bad) = hash.iter().find(|&&h| h >= output_dim) {
            return Err(Error::InvalidConfig(format!(
                "hash value {bad} out of range for output dim {output_dim}"
            )));
        }
        if signs.iter().any(|&s| s != 1.0 && s != -1.0) {
            return Err(Error::InvalidConfig("signs must be +1 or -1".into()));
        }
        Ok(CountSketchPlan {
            input_dim: hash.len(),
            output_dim,
            hash,
            signs,
            seed,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn hash(&self) -> &[usize] {
        &self.hash
    }

    pub fn signs(&self) -> &[f64] {
        &self.signs
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `Ψ(x)[k] = Σ_{i : h[i] = k} s[i] · x[i]`.
    pub fn sketch(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("count sketch input", self.input_dim, x.len())?;
        let mut out = vec![0.0; self.output_dim];
        for ((&h, &s), &xi) in self.hash.iter().zip(&self.signs).zip(x) {
            out[h] += s * xi;
        }
        Ok(out)
    }

    /// Adjoint of [`CountSketchPlan::sketch`]: `out[i] = s[i] · g[h[i]]`.
    pub fn sketch_adjoint(&self, g: &[f64]) -> Result<Vec<f64>> {
        check_dim("count sketch adjoint input", self.output_dim, g.len())?;
        Ok(self
            .hash
            .iter()
            .zip(&self.signs)
            .map(|(&h, &s)| s * g[h])
            .collect())
    }
}

/// `out[k] = Σⱼ a[j] · b[(k − j) mod d]`, computed directly in O(d²).
pub fn circular_convolution(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    check_dim("circular convolution", a.len(), b.len())?;
    let d = a.len();
    let mut out = vec![0.0; d];
    for (j, &aj) in a.iter().enumerate() {
        for (m, &bm) in b.iter().enumerate() {
            out[(j + m) % d] += aj * bm;
        }
    }
    Ok(out)
}

/// `out[j] = Σₖ g[k] · x[(k − j) mod d]`; the adjoint of convolving with `x`.
pub fn circular_correlation(g: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    check_dim("circular correlation", g.len(), x.len())?;
    let d = g.len();
    let mut out = vec![0.0; d];
    for (j, o) in out.iter_mut().enumerate() {
        *o = (0..d).map(|k| g[k] * x[(k + d - j) % d]).sum();
    }
    Ok(out)
}

fn check_joint(plan_q: &CountSketchPlan, plan_v: &CountSketchPlan) -> Result<()> {
    check_dim(
        "joint sketch output dims",
        plan_q.output_dim(),
        plan_v.output_dim(),
    )
}

/// Sketches `q ⊗ v` by materializing every product `q[i]·v[j]` and hashing it
/// with the joint plan. Reference route for the convolution identity.
pub fn sketch_outer_direct(
    plan_q: &CountSketchPlan,
    plan_v: &CountSketchPlan,
    q: &[f64],
    v: &[f64],
) -> Result<Vec<f64>> {
    check_joint(plan_q, plan_v)?;
    check_dim("joint sketch q", plan_q.input_dim(), q.len())?;
    check_dim("joint sketch v", plan_v.input_dim(), v.len())?;
    let d = plan_q.output_dim();
    let mut out = vec![0.0; d];
    for (i, &qi) in q.iter().enumerate() {
        for (j, &vj) in v.iter().enumerate() {
            let k = (plan_q.hash[i] + plan_v.hash[j]) % d;
            out[k] += plan_q.signs[i] * plan_v.signs[j] * qi * vj;
        }
    }
    Ok(out)
}

/// Sketches `q ⊗ v` as `Ψ_q(q) ⊛ Ψ_v(v)`.
pub fn sketch_outer(
    plan_q: &CountSketchPlan,
    plan_v: &CountSketchPlan,
    q: &[f64],
    v: &[f64],
) -> Result<Vec<f64>> {
    check_joint(plan_q, plan_v)?;
    circular_convolution(&plan_q.sketch(q)?, &plan_v.sketch(v)?)
}

/// The sparse hashing core of the Tucker form: `Tc[i, j, k] = 1` iff
/// `(h_q[i] + h_v[j]) mod d = k`.
pub fn hash_core(plan_q: &CountSketchPlan, plan_v: &CountSketchPlan) -> Result<Tensor3> {
    check_joint(plan_q, plan_v)?;
    let d = plan_q.output_dim();
    let mut core = Tensor3::zeros([plan_q.input_dim(), plan_v.input_dim(), d]);
    for (i, &hq) in plan_q.hash.iter().enumerate() {
        for (j, &hv) in plan_v.hash.iter().enumerate() {
            core.set(i, j, (hq + hv) % d, 1.0);
        }
    }
    Ok(core)
}

/// `Diag(s)`, the fixed input factor of the Tucker form.
pub fn sign_factor(plan: &CountSketchPlan) -> Matrix {
    Matrix::diag(&plan.signs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_plan_is_identity() {
        let plan = CountSketchPlan::from_parts(4, vec![0, 1, 2, 3], vec![1.0; 4], 0).unwrap();
        let x = [0.5, -1.0, 2.0, 3.25];
        assert_eq!(plan.sketch(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn hand_accumulated_sketch() {
        let plan = CountSketchPlan::from_parts(2, vec![0, 0, 1], vec![1.0, -1.0, 1.0], 0).unwrap();
        assert_eq!(plan.sketch(&[5.0, 2.0, 7.0]).unwrap(), vec![3.0, 7.0]);
        assert_eq!(plan.sketch(&[0.0; 3]).unwrap(), vec![0.0, 0.0]);
        assert!(plan.sketch(&[1.0; 2]).is_err());
    }

    #[test]
    fn plan_regenerates_from_seed() {
        let a = CountSketchPlan::new(17, 5, 99).unwrap();
        let b = CountSketchPlan::new(17, 5, 99).unwrap();
        assert_eq!(a, b);
        assert!(a.hash().iter().all(|&h| h < 5));
        assert!(a.signs().iter().all(|&s| s == 1.0 || s == -1.0));
        assert_ne!(a, CountSketchPlan::new(17, 5, 100).unwrap());
    }

    #[test]
    fn from_parts_validates() {
        assert!(CountSketchPlan::from_parts(2, vec![0, 2], vec![1.0, 1.0], 0).is_err());
        assert!(CountSketchPlan::from_parts(2, vec![0, 1], vec![1.0, 0.5], 0).is_err());
        assert!(CountSketchPlan::new(0, 2, 0).is_err());
    }

    #[test]
    fn convolution_cases() {
        assert_eq!(
            circular_convolution(&[1.0, 2.0], &[3.0, 4.0]).unwrap(),
            vec![11.0, 10.0]
        );
        let a = [0.3, -1.2, 4.0, 2.5];
        assert_eq!(
            circular_convolution(&a, &[1.0, 0.0, 0.0, 0.0]).unwrap(),
            a.to_vec()
        );
        assert!(circular_convolution(&a, &[1.0]).is_err());
    }

    #[test]
    fn correlation_is_adjoint_of_convolution() {
        // <conv(a, b), g> == <a, corr(g, b)>
        let a = [0.3, -1.2, 4.0, 2.5, 0.1];
        let b = [1.5, 0.25, -2.0, 0.0, 3.0];
        let g = [0.7, -0.1, 0.2, 1.1, -0.9];
        let lhs: f64 = circular_convolution(&a, &b)
            .unwrap()
            .iter()
            .zip(&g)
            .map(|(x, y)| x * y)
            .sum();
        let rhs: f64 = circular_correlation(&g, &b)
            .unwrap()
            .iter()
            .zip(&a)
            .map(|(x, y)| x * y)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn hash_core_has_one_entry_per_pair() {
        let pq = CountSketchPlan::new(3, 4, 1).unwrap();
        let pv = CountSketchPlan::new(5, 4, 2).unwrap();
        let core = hash_core(&pq, &pv).unwrap();
        assert_eq!(core.dims(), [3, 5, 4]);
        assert_eq!(core.data().iter().sum::<f64>(), 15.0);
        let mismatched = CountSketchPlan::new(5, 3, 2).unwrap();
        assert!(hash_core(&pq, &mismatched).is_err());
    }
}
