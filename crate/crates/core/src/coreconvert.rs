//! Re-parameterizing LoRA pairs into core-space form and back.
//!
//! For `B = U_B Σ_B V_Bᵀ` and `A = U_A Σ_A V_Aᵀ`, the update `BA` equals
//! `U_B M V_Aᵀ` with core `M = Σ_B V_Bᵀ U_A Σ_A` (`r × r`).

use serde::Serialize;

use crate::adapters::{init_router, ComolParams, LoraParams};
use crate::error::{Error, Result};
use crate::flops::{self, Category};
use crate::linalg::{frobenius_distance, matmul, reduced_svd, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct CoreDecomposition {
    /// `m × r`, orthonormal columns when produced by [`lora_to_core`].
    pub u_b: Matrix,
    /// `r × r`
    pub core: Matrix,
    /// `r × n`, orthonormal rows when produced by [`lora_to_core`].
    pub v_a_t: Matrix,
}

fn product(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    flops::in_category(Category::Other, || matmul(a, b))
}

fn diag_scale_rows(sigma: &[f64], m: &Matrix) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| sigma[i] * m.get(i, j))
}

fn scale_cols(m: &Matrix, sigma: &[f64]) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) * sigma[j])
}

pub fn lora_to_core(b: &Matrix, a: &Matrix) -> Result<CoreDecomposition> {
    let (m, r) = b.shape();
    if a.rows() != r {
        return Err(Error::shape("lora_to_core", format!("B is {m}x{r}, A is {}x{}", a.rows(), a.cols())));
    }
    let n = a.cols();
    if r > m.min(n) {
        return Err(Error::Parameter(format!("rank {r} exceeds min(m, n) = {}", m.min(n))));
    }
    let sb = reduced_svd(b)?; // U_B m×r, Σ_B, V_Bᵀ r×r
    let sa = reduced_svd(a)?; // U_A r×r, Σ_A, V_Aᵀ r×n
    // M = Σ_B V_Bᵀ U_A Σ_A
    let left = diag_scale_rows(&sb.sigma, &sb.vt);
    let right = scale_cols(&sa.u, &sa.sigma);
    let core = product(&left, &right)?;
    Ok(CoreDecomposition { u_b: sb.u, core, v_a_t: sa.vt })
}

/// `ΔW = U_B M V_Aᵀ`.
pub fn core_to_delta(d: &CoreDecomposition) -> Result<Matrix> {
    product(&product(&d.u_b, &d.core)?, &d.v_a_t)
}

/// `‖x − y‖_F / ‖y‖_F`, or the absolute distance when `y = 0`.
pub fn relative_frobenius(x: &Matrix, y: &Matrix) -> Result<f64> {
    let dist = frobenius_distance(x, y)?;
    let norm = y.frobenius_norm();
    Ok(if norm == 0.0 { dist } else { dist / norm })
}

#[derive(Clone, Debug, Serialize)]
pub struct ExpertResidual {
    pub expert: usize,
    /// `‖ΔW_i − U_B M_i V_Aᵀ‖_F`
    pub residual: f64,
    /// `residual / ‖ΔW_i‖_F` (absolute when `ΔW_i = 0`).
    pub relative: f64,
}

#[derive(Clone, Debug)]
pub struct ComolConversion {
    pub params: ComolParams,
    pub residuals: Vec<ExpertResidual>,
}

/// Projects N LoRA experts onto the singular subspaces of one anchor expert:
/// `M_i = U_Bᵀ (B_i A_i) V_A`. The projection residual of every expert is
/// reported. The router is a fresh core-space router (`N × r`).
pub fn experts_to_comol(experts: &[LoraParams], anchor: usize, seed: u64) -> Result<ComolConversion> {
    if experts.is_empty() {
        return Err(Error::Parameter("need at least one expert".into()));
    }
    if anchor >= experts.len() {
        return Err(Error::Parameter(format!("anchor {anchor} out of range for {} experts", experts.len())));
    }
    let (m, r) = experts[anchor].b.shape();
    let n = experts[anchor].a.cols();
    for (i, e) in experts.iter().enumerate() {
        if e.b.shape() != (m, r) || e.a.shape() != (r, n) {
            return Err(Error::shape("experts_to_comol", format!("expert {i} does not share (m, n, r) = ({m}, {n}, {r})")));
        }
    }
    let anchor_dec = lora_to_core(&experts[anchor].b, &experts[anchor].a)?;
    let u_t = anchor_dec.u_b.transpose();
    let v_a = anchor_dec.v_a_t.transpose();
    let mut cores = Vec::with_capacity(experts.len());
    let mut residuals = Vec::with_capacity(experts.len());
    for (i, e) in experts.iter().enumerate() {
        let delta = product(&e.b, &e.a)?;
        let core = product(&product(&u_t, &delta)?, &v_a)?;
        let approx = core_to_delta(&CoreDecomposition {
            u_b: anchor_dec.u_b.clone(),
            core: core.clone(),
            v_a_t: anchor_dec.v_a_t.clone(),
        })?;
        let residual = frobenius_distance(&delta, &approx)?;
        let relative = relative_frobenius(&approx, &delta)?;
        residuals.push(ExpertResidual { expert: i, residual, relative });
        cores.push(core);
    }
    let router = init_router(experts.len(), r, seed);
    Ok(ComolConversion {
        params: ComolParams { u_b: anchor_dec.u_b, v_a_t: anchor_dec.v_a_t, cores, router },
        residuals,
    })
}
