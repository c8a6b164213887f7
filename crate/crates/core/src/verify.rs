//! Verification suites shared by the CLI and the acceptance tests.
//!
//! - the fused/unfused CoMoL equivalence sweep;
//! - central finite-difference checks of [`layer_backward`], which only ever
//!   call the forward pass and are therefore independent of the analytic path.

use serde::Serialize;

use crate::adapters::{
    comol_forward, comol_forward_reference, init_layer, layer_backward_with, AdapterLayer, ComolParams, LayerConfig,
    Method, TraceData, VatGradient,
};
use crate::error::Result;
use crate::linalg::{dot, Matrix};
use crate::rng::SeededRng;
use crate::routing::RouterParams;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor in the relative error `|a − f| / max(|a|, |f|, floor)`.
pub const REL_ERR_FLOOR: f64 = 1e-3;
/// Threshold for the equivalence sweep.
pub const EQUIV_TOLERANCE: f64 = 1e-10;
/// Threshold for the gradient suite.
pub const GRAD_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Shape {
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub num_experts: usize,
    pub tokens: usize,
}

impl Shape {
    /// Cartesian product of the given axes.
    pub fn grid(ms: &[usize], ns: &[usize], rs: &[usize], experts: &[usize], tokens: &[usize]) -> Vec<Shape> {
        let mut out = Vec::new();
        for &m in ms {
            for &n in ns {
                for &r in rs {
                    for &num_experts in experts {
                        for &l in tokens {
                            out.push(Shape { m, n, r, num_experts, tokens: l });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EquivalenceCase {
    pub seed: u64,
    pub shape: Shape,
    pub core_routing: bool,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EquivalenceReport {
    pub cases: usize,
    pub max_abs_err: f64,
    pub worst: Option<EquivalenceCase>,
    pub passed: bool,
}

/// Random CoMoL parameters and tokens for one (seed, shape) case.
pub fn random_comol_case(seed: u64, shape: &Shape, core_routing: bool) -> (Matrix, ComolParams, Matrix) {
    let Shape { m, n, r, num_experts, tokens } = *shape;
    let mut rng = SeededRng::new(seed);
    let w = rng.uniform_matrix(m, n, 1.0 / (n as f64).sqrt());
    let p = ComolParams {
        u_b: rng.uniform_matrix(m, r, 1.0 / (r as f64).sqrt()),
        v_a_t: rng.uniform_matrix(r, n, 1.0 / (n as f64).sqrt()),
        cores: (0..num_experts).map(|_| rng.uniform_matrix(r, r, 1.0)).collect(),
        router: RouterParams::new(rng.uniform_matrix(num_experts, if core_routing { r } else { n }, 1.0)),
    };
    let x = rng.uniform_matrix(tokens, n, 1.0);
    (w, p, x)
}

/// Max elementwise difference between the fused and reference CoMoL forwards.
pub fn equivalence_case(seed: u64, shape: &Shape, core_routing: bool) -> Result<EquivalenceCase> {
    let (w, p, x) = random_comol_case(seed, shape, core_routing);
    let (fused, _) = comol_forward(&w, &p, &x, 1.0, core_routing)?;
    let reference = comol_forward_reference(&w, &p, &x, 1.0, core_routing)?;
    let max_abs_err = fused.data().iter().zip(reference.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(EquivalenceCase { seed, shape: *shape, core_routing, max_abs_err })
}

pub fn equivalence_suite(seeds: impl IntoIterator<Item = u64>, shapes: &[Shape]) -> Result<EquivalenceReport> {
    let mut cases = 0;
    let mut worst: Option<EquivalenceCase> = None;
    for seed in seeds {
        for shape in shapes {
            for core_routing in [true, false] {
                let case = equivalence_case(seed, shape, core_routing)?;
                cases += 1;
                if worst.as_ref().is_none_or(|w| case.max_abs_err > w.max_abs_err) {
                    worst = Some(case);
                }
            }
        }
    }
    let max_abs_err = worst.as_ref().map_or(0.0, |w| w.max_abs_err);
    Ok(EquivalenceReport { cases, max_abs_err, worst, passed: max_abs_err < EQUIV_TOLERANCE })
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub method: Method,
    pub shape: Shape,
    pub seed: u64,
    pub max_rel_err: f64,
    /// Name of the tensor (or `tokens`) holding the worst entry.
    pub worst: String,
    pub entries: usize,
}

/// `|a − f| / max(|a|, |f|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Scalar probe loss `Σ c ⊙ h`, so `∂L/∂h = c`.
fn probe_loss(layer: &AdapterLayer, tokens: &Matrix, probe: &Matrix) -> Result<f64> {
    Ok(dot(layer.apply(tokens)?.data(), probe.data()))
}

/// Compares every analytic gradient entry (parameters and tokens) against
/// central finite differences of the forward pass.
pub fn gradient_check(
    layer: &AdapterLayer,
    tokens: &Matrix,
    probe: &Matrix,
    vat: VatGradient,
) -> Result<(f64, String, usize)> {
    let (_, trace) = layer.forward(tokens)?;
    let (grad_x, grads) = layer_backward_with(layer, tokens, probe, &trace, vat)?;
    let mut worst = (0.0_f64, String::new());
    let mut entries = 0;
    let mut note = |err: f64, name: &str| {
        entries += 1;
        if err > worst.0 || worst.1.is_empty() {
            worst = (err.max(worst.0), name.to_string());
        }
    };

    let names: Vec<String> = layer.trainable().into_iter().map(|(n, _)| n).collect();
    let mut probe_layer = layer.clone();
    for (idx, name) in names.iter().enumerate() {
        let len = grads.entries[idx].1.data().len();
        for e in 0..len {
            let orig = probe_layer.trainable_mut()[idx].data()[e];
            probe_layer.trainable_mut()[idx].data_mut()[e] = orig + FD_STEP;
            let plus = probe_loss(&probe_layer, tokens, probe)?;
            probe_layer.trainable_mut()[idx].data_mut()[e] = orig - FD_STEP;
            let minus = probe_loss(&probe_layer, tokens, probe)?;
            probe_layer.trainable_mut()[idx].data_mut()[e] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            note(relative_error(grads.entries[idx].1.data()[e], fd), name);
        }
    }

    let mut x = tokens.clone();
    for e in 0..x.data().len() {
        let orig = x.data()[e];
        x.data_mut()[e] = orig + FD_STEP;
        let plus = probe_loss(layer, &x, probe)?;
        x.data_mut()[e] = orig - FD_STEP;
        let minus = probe_loss(layer, &x, probe)?;
        x.data_mut()[e] = orig;
        let fd = (plus - minus) / (2.0 * FD_STEP);
        note(relative_error(grad_x.data()[e], fd), "tokens");
    }
    Ok((worst.0, worst.1, entries))
}

/// Smallest gap, over tokens, between the k-th and (k+1)-th router logits of a
/// sparse layer; `f64::INFINITY` for other methods or `k = N`.
pub fn selection_margin(layer: &AdapterLayer, tokens: &Matrix) -> Result<f64> {
    let (_, trace) = layer.forward(tokens)?;
    let TraceData::Mixture { routes, .. } = &trace.data else { return Ok(f64::INFINITY) };
    let mut margin = f64::INFINITY;
    for g in routes {
        if g.active.len() == g.logits.len() {
            continue;
        }
        let lowest_active = g.active.iter().map(|&i| g.logits[i]).fold(f64::INFINITY, f64::min);
        let highest_inactive = (0..g.logits.len())
            .filter(|i| !g.active.contains(i))
            .map(|i| g.logits[i])
            .fold(f64::NEG_INFINITY, f64::max);
        margin = margin.min(lowest_active - highest_inactive);
    }
    Ok(margin)
}

/// Minimum logit gap required before finite differences are trusted on a sparse layer.
const MIN_SELECTION_MARGIN: f64 = 1e-3;

/// A randomized layer, tokens and probe for one gradient case. Sparse layers
/// are re-drawn (deterministically) until top-k selection is far from a tie.
pub fn random_grad_case(method: Method, shape: &Shape, seed: u64) -> Result<(AdapterLayer, Matrix, Matrix, u64)> {
    let mut cfg = LayerConfig::new(method, shape.m, shape.n, shape.r, shape.num_experts);
    cfg.alpha = 2.0 * shape.r as f64;
    for attempt in 0..64u64 {
        let draw = seed.wrapping_mul(1_000_003).wrapping_add(attempt);
        let mut layer = init_layer(&cfg, draw)?;
        layer.randomize(draw, 0.5);
        let mut rng = SeededRng::stream(draw, 11);
        let tokens = rng.uniform_matrix(shape.tokens, shape.n, 1.0);
        let probe = rng.uniform_matrix(shape.tokens, shape.m, 1.0);
        if selection_margin(&layer, &tokens)? >= MIN_SELECTION_MARGIN {
            return Ok((layer, tokens, probe, draw));
        }
    }
    Err(crate::Error::Numerical { op: "random_grad_case", residual: 0.0 })
}

pub fn gradient_case(method: Method, shape: &Shape, seed: u64, vat: VatGradient) -> Result<GradCheck> {
    let (layer, tokens, probe, draw) = random_grad_case(method, shape, seed)?;
    let (max_rel_err, worst, entries) = gradient_check(&layer, &tokens, &probe, vat)?;
    Ok(GradCheck { method, shape: *shape, seed: draw, max_rel_err, worst, entries })
}

/// Shape grid of the default equivalence sweep.
pub fn equivalence_grid() -> Vec<Shape> {
    Shape::grid(&[4, 16, 64], &[4, 16, 64], &[2, 8], &[2, 8], &[1, 16])
}

/// Small-config grid used by the gradient suite.
pub fn small_grid() -> Vec<Shape> {
    Shape::grid(&[4, 6, 8], &[4, 6, 8], &[1, 2, 4], &[1, 2, 4], &[1, 3])
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub cases: usize,
    pub max_rel_err: f64,
    pub worst: Option<GradCheck>,
    pub passed: bool,
}

pub fn gradient_suite(methods: &[Method], shapes: &[Shape], seeds: impl IntoIterator<Item = u64> + Clone) -> Result<GradReport> {
    let mut cases = 0;
    let mut worst: Option<GradCheck> = None;
    for &method in methods {
        for shape in shapes {
            if method == Method::Lora && shape.num_experts != 1 {
                continue;
            }
            for seed in seeds.clone() {
                let case = gradient_case(method, shape, seed, VatGradient::Full)?;
                cases += 1;
                if worst.as_ref().is_none_or(|w| case.max_rel_err > w.max_rel_err) {
                    worst = Some(case);
                }
            }
        }
    }
    let max_rel_err = worst.as_ref().map_or(0.0, |w| w.max_rel_err);
    Ok(GradReport { cases, max_rel_err, worst, passed: max_rel_err < GRAD_TOLERANCE })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comol_core_routing_gradient_and_mutation() {
        let shape = Shape { m: 6, n: 6, r: 2, num_experts: 3, tokens: 2 };
        let ok = gradient_case(Method::Comol, &shape, 0, VatGradient::Full).unwrap();
        assert!(ok.max_rel_err < 1e-5, "{ok:?}");
        let broken = gradient_case(Method::Comol, &shape, 0, VatGradient::TransformOnly).unwrap();
        assert!(broken.max_rel_err > 1e-3, "{broken:?}");
        assert!(broken.worst == "v_a_t" || broken.worst == "tokens", "{broken:?}");
    }

    #[test]
    fn every_method_on_one_shape() {
        let shape = Shape { m: 5, n: 4, r: 2, num_experts: 4, tokens: 3 };
        for method in Method::ALL {
            let s = if method == Method::Lora { Shape { num_experts: 1, ..shape } } else { shape };
            let c = gradient_case(method, &s, 1, VatGradient::Full).unwrap();
            assert!(c.max_rel_err < 1e-5, "{c:?}");
        }
    }

    #[test]
    fn equivalence_small_sweep() {
        let shapes = Shape::grid(&[4, 7], &[5], &[2], &[3], &[1, 4]);
        let rep = equivalence_suite(0..5, &shapes).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert_eq!(rep.cases, 5 * 4 * 2);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-6).abs() < 1e-18);
    }
}
