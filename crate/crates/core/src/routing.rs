//! Token-level soft, token-level sparse top-k, instance-level and core-space routing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::{self, Category};
use crate::linalg::{softmax, Matrix, Real};

/// Router projection `W_g` of shape `N × d`, where `d` is the routing-input dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterParams<T: Real = f64> {
    pub w_g: Matrix<T>,
}

impl<T: Real> RouterParams<T> {
    pub fn new(w_g: Matrix<T>) -> Self {
        Self { w_g }
    }

    pub fn num_experts(&self) -> usize {
        self.w_g.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_g.cols()
    }

    pub fn num_params(&self) -> usize {
        self.w_g.rows() * self.w_g.cols()
    }

    fn logits(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(
                "route",
                format!("router is {}x{}, input has length {}", self.num_experts(), self.input_dim(), x.len()),
            ));
        }
        flops::in_category(Category::Routing, || self.w_g.matvec(x))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingKind {
    Soft,
    Sparse { k: usize },
    Instance,
    Core,
}

/// Expert weights `G(x)` and the activated index set `T(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingWeights<T: Real = f64> {
    /// Zero outside `active`.
    pub weights: Vec<T>,
    /// Activated expert indices in ascending order.
    pub active: Vec<usize>,
    /// Pre-softmax router outputs.
    pub logits: Vec<T>,
    /// Full softmax distribution before any top-k masking.
    pub probs: Vec<T>,
}

impl<T: Real> RoutingWeights<T> {
    fn dense(logits: Vec<T>) -> Result<Self> {
        let probs = softmax(&logits)?;
        Ok(Self { weights: probs.clone(), active: (0..probs.len()).collect(), logits, probs })
    }

    pub fn num_experts(&self) -> usize {
        self.weights.len()
    }

    pub fn total(&self) -> T {
        self.weights.iter().copied().sum()
    }

    /// Back-propagates `∂L/∂weights` to `∂L/∂logits` through the (masked) softmax.
    ///
    /// Inactive experts receive no direct gradient, but their logits still
    /// move the active weights through the normalizer. The selection itself is
    /// treated as constant.
    pub fn logits_grad(&self, d_weights: &[T]) -> Vec<T> {
        let inner: T = self.active.iter().map(|&i| d_weights[i] * self.probs[i]).sum();
        let mut active_mask = vec![false; self.probs.len()];
        for &i in &self.active {
            active_mask[i] = true;
        }
        self.probs
            .iter()
            .enumerate()
            .map(|(j, &p)| {
                let direct = if active_mask[j] { d_weights[j] } else { T::zero() };
                p * (direct - inner)
            })
            .collect()
    }
}

/// `softmax(W_g x)` over all experts.
pub fn soft_route<T: Real>(router: &RouterParams<T>, x: &[T]) -> Result<RoutingWeights<T>> {
    RoutingWeights::dense(router.logits(x)?)
}

/// `top-k(softmax(W_g x))` without renormalization; ties go to the lowest index.
pub fn sparse_route<T: Real>(router: &RouterParams<T>, x: &[T], k: usize) -> Result<RoutingWeights<T>> {
    let n = router.num_experts();
    if k == 0 || k > n {
        return Err(Error::Parameter(format!("top-k must satisfy 1 <= k <= {n}, got {k}")));
    }
    let logits = router.logits(x)?;
    let probs = softmax(&logits)?;
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps lower indices first among equal probabilities.
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).expect("finite probabilities"));
    let mut active = order[..k].to_vec();
    active.sort_unstable();
    let mut weights = vec![T::zero(); n];
    for &i in &active {
        weights[i] = probs[i];
    }
    Ok(RoutingWeights { weights, active, logits, probs })
}

/// Arithmetic mean of the token rows.
pub fn instance_mean<T: Real>(tokens: &Matrix<T>) -> Vec<T> {
    let (l, n) = tokens.shape();
    flops::charge_to(Category::Routing, (l * n) as u64);
    let mut mean = vec![T::zero(); n];
    for t in 0..l {
        for (m, &v) in mean.iter_mut().zip(tokens.row(t)) {
            *m += v;
        }
    }
    let inv = T::one() / T::from_f64(l as f64);
    mean.iter_mut().for_each(|m| *m *= inv);
    mean
}

/// One routing decision for a whole sequence, taken on the mean token.
pub fn instance_route<T: Real>(router: &RouterParams<T>, tokens: &Matrix<T>) -> Result<RoutingWeights<T>> {
    if tokens.cols() != router.input_dim() {
        return Err(Error::shape(
            "instance_route",
            format!("router expects width {}, tokens are {}x{}", router.input_dim(), tokens.rows(), tokens.cols()),
        ));
    }
    soft_route(router, &instance_mean(tokens))
}

/// Routing on the core-space projection `x̂ = V_Aᵀ x`, supplied by the caller.
pub fn core_route<T: Real>(router: &RouterParams<T>, x_hat: &[T]) -> Result<RoutingWeights<T>> {
    soft_route(router, x_hat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::matmul;
    use crate::rng::SeededRng;

    fn router(rows: &[&[f64]]) -> RouterParams {
        RouterParams::new(Matrix::from_rows(rows).unwrap())
    }

    #[test]
    fn zero_router_is_uniform() {
        let r = RouterParams::new(Matrix::<f64>::zeros(4, 3));
        let g = soft_route(&r, &[1.0, -2.0, 0.5]).unwrap();
        assert!(g.weights.iter().all(|&w| w == 0.25));
        let g = core_route(&r, &[0.3, 0.1, 0.0]).unwrap();
        assert!(g.weights.iter().all(|&w| w == 0.25));
        let r1 = RouterParams::new(Matrix::<f64>::zeros(1, 3));
        assert_eq!(soft_route(&r1, &[1.0, 2.0, 3.0]).unwrap().weights, vec![1.0]);
    }

    #[test]
    fn soft_route_is_matmul_then_softmax() {
        let mut rng = SeededRng::new(1);
        let w = rng.uniform_matrix::<f64>(3, 5, 1.0);
        let x = rng.uniform_matrix::<f64>(5, 1, 1.0);
        let logits = matmul(&w, &x).unwrap();
        let expect = softmax(logits.data()).unwrap();
        let got = soft_route(&RouterParams::new(w), x.data()).unwrap();
        assert_eq!(got.weights, expect);
        assert!(soft_route(&RouterParams::new(Matrix::<f64>::zeros(3, 4)), &[0.0; 5]).is_err());
    }

    #[test]
    fn sparse_top1_and_tie_break() {
        // Identity router turns x into the logits directly.
        let r = router(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let g = sparse_route(&r, &[2.0, 1.0, 0.0], 1).unwrap();
        let e = std::f64::consts::E;
        assert_eq!(g.active, vec![0]);
        assert!((g.weights[0] - e * e / (e * e + e + 1.0)).abs() < 1e-15);
        assert_eq!(&g.weights[1..], &[0.0, 0.0]);

        let g = sparse_route(&r, &[1.0, 1.0, 0.0], 1).unwrap();
        assert_eq!(g.active, vec![0]);
        assert!(sparse_route(&r, &[1.0, 1.0, 0.0], 0).is_err());
        assert!(sparse_route(&r, &[1.0, 1.0, 0.0], 4).is_err());
    }

    #[test]
    fn sparse_with_full_k_equals_soft() {
        let mut rng = SeededRng::new(2);
        let r = RouterParams::new(rng.uniform_matrix::<f64>(5, 4, 1.0));
        let x = [0.3, -0.2, 0.9, 0.1];
        assert_eq!(sparse_route(&r, &x, 5).unwrap(), soft_route(&r, &x).unwrap());
    }

    #[test]
    fn instance_route_examples() {
        let mut rng = SeededRng::new(4);
        let r = RouterParams::new(rng.uniform_matrix::<f64>(3, 4, 1.0));
        let one = rng.uniform_matrix::<f64>(1, 4, 1.0);
        assert_eq!(instance_route(&r, &one).unwrap(), soft_route(&r, one.row(0)).unwrap());

        let same = Matrix::from_rows(&[[0.5, 0.5, 0.5, 0.5]; 3]).unwrap();
        assert_eq!(instance_route(&r, &same).unwrap(), soft_route(&r, same.row(0)).unwrap());

        let toks = rng.uniform_matrix::<f64>(3, 4, 1.0);
        let mut mean = vec![0.0; 4];
        for t in 0..3 {
            for j in 0..4 {
                mean[j] += toks.get(t, j);
            }
        }
        let mean: Vec<f64> = mean.iter().map(|v| v * (1.0 / 3.0)).collect();
        assert_eq!(instance_route(&r, &toks).unwrap(), soft_route(&r, &mean).unwrap());

        assert!(instance_route(&r, &Matrix::<f64>::zeros(2, 3)).is_err());
    }

    #[test]
    fn core_router_size_reduction() {
        let (n_exp, r, n) = (8, 8, 4096);
        let core = RouterParams::new(Matrix::<f64>::zeros(n_exp, r));
        let full = RouterParams::new(Matrix::<f64>::zeros(n_exp, n));
        assert_eq!(core.num_params(), 64);
        assert_eq!(full.num_params(), 32768);
        assert_eq!(full.num_params() / core.num_params(), 512);
    }

    #[test]
    fn logits_grad_matches_finite_difference() {
        let logits = vec![0.3, -1.2, 0.8, 0.1];
        let dw = [0.7, -0.4, 1.1, 0.25];
        for active in [vec![0, 1, 2, 3], vec![0, 2]] {
            let weigh = |z: &[f64]| -> f64 {
                let p = softmax(z).unwrap();
                active.iter().map(|&i| dw[i] * p[i]).sum()
            };
            let probs = softmax(&logits).unwrap();
            let mut weights = vec![0.0; 4];
            for &i in &active {
                weights[i] = probs[i];
            }
            let g = RoutingWeights { weights, active: active.clone(), logits: logits.clone(), probs };
            let analytic = g.logits_grad(&dw);
            for j in 0..4 {
                let h = 1e-6;
                let mut zp = logits.clone();
                zp[j] += h;
                let mut zm = logits.clone();
                zm[j] -= h;
                let fd = (weigh(&zp) - weigh(&zm)) / (2.0 * h);
                assert!((fd - analytic[j]).abs() < 1e-9, "{j}: {fd} vs {}", analytic[j]);
            }
        }
    }
}
