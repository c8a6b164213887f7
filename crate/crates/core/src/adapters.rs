//! Adapter layers: a frozen projection `W` plus one of LoRA, soft or sparse
//! MoE-LoRA, SMEAR, or CoMoL (with or without core-space routing).
//!
//! Forward passes are token-wise except for SMEAR, whose routing decision is
//! shared by the whole sequence. Every forward returns a [`ForwardTrace`]
//! holding the intermediates the matching [`layer_backward`] needs.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::{self, Category};
use crate::linalg::{accumulate_weighted, scaled, Matrix, Real};
use crate::rng::SeededRng;
use crate::routing::{core_route, instance_mean, soft_route, sparse_route, RouterParams, RoutingWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lora,
    MoeSoft,
    MoeSparse,
    Smear,
    Comol,
    ComolNoCr,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::Lora, Method::MoeSoft, Method::MoeSparse, Method::Smear, Method::Comol, Method::ComolNoCr];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Lora => "lora",
            Method::MoeSoft => "moe_soft",
            Method::MoeSparse => "moe_sparse",
            Method::Smear => "smear",
            Method::Comol => "comol",
            Method::ComolNoCr => "comol_no_cr",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Method::Lora => "LoRA",
            Method::MoeSoft => "Soft-weighted MoE-LoRA",
            Method::MoeSparse => "Sparse MoE-LoRA",
            Method::Smear => "Soft-merging MoE-LoRA",
            Method::Comol => "CoMoL",
            Method::ComolNoCr => "CoMoL w/o CR",
        }
    }

    pub fn is_mixture(self) -> bool {
        matches!(self, Method::MoeSoft | Method::MoeSparse | Method::Smear)
    }

    pub fn is_comol(self) -> bool {
        matches!(self, Method::Comol | Method::ComolNoCr)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| Error::Parameter(format!("unknown method '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub method: Method,
    /// Output dimension.
    pub m: usize,
    /// Input dimension.
    pub n: usize,
    /// Adapter rank.
    pub r: usize,
    pub num_experts: usize,
    /// Activated experts per token; only read by the sparse variant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    /// Scale numerator; the adapter delta is multiplied by `alpha / r`.
    pub alpha: f64,
}

impl LayerConfig {
    /// Config with `alpha = r` (unit scale). Plain LoRA always has one expert.
    pub fn new(method: Method, m: usize, n: usize, r: usize, num_experts: usize) -> Self {
        let num_experts = if method == Method::Lora { 1 } else { num_experts };
        let top_k = (method == Method::MoeSparse).then(|| num_experts.div_ceil(2));
        Self { method, m, n, r, num_experts, top_k, alpha: r as f64 }
    }

    pub fn with_top_k(mut self, k: usize) -> Self {
        self.top_k = Some(k);
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.r as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.r == 0 || self.num_experts == 0 {
            return Err(Error::Parameter(format!(
                "dimensions must be positive (m={}, n={}, r={}, N={})",
                self.m, self.n, self.r, self.num_experts
            )));
        }
        if self.method == Method::Lora && self.num_experts != 1 {
            return Err(Error::Parameter("plain LoRA has exactly one expert".into()));
        }
        if self.method == Method::MoeSparse {
            match self.top_k {
                Some(k) if (1..=self.num_experts).contains(&k) => {}
                Some(k) => {
                    return Err(Error::Parameter(format!(
                        "top-k must satisfy 1 <= k <= {}, got {k}",
                        self.num_experts
                    )))
                }
                None => return Err(Error::Parameter("sparse routing needs top_k".into())),
            }
        }
        if !self.alpha.is_finite() {
            return Err(Error::Parameter("alpha must be finite".into()));
        }
        Ok(())
    }

    /// Width of the routing input: `r` for core-space routing, `n` otherwise.
    pub fn router_input_dim(&self) -> usize {
        if self.method == Method::Comol {
            self.r
        } else {
            self.n
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraParams<T: Real = f64> {
    /// `m × r`
    pub b: Matrix<T>,
    /// `r × n`
    pub a: Matrix<T>,
}

impl<T: Real> LoraParams<T> {
    fn check(&self, m: usize, n: usize) -> Result<()> {
        let r = self.b.cols();
        if self.b.rows() != m || self.a.shape() != (r, n) {
            return Err(Error::shape(
                "lora",
                format!(
                    "B is {}x{}, A is {}x{}, W is {m}x{n}",
                    self.b.rows(),
                    self.b.cols(),
                    self.a.rows(),
                    self.a.cols()
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComolParams<T: Real = f64> {
    /// Shared output basis, `m × r`.
    pub u_b: Matrix<T>,
    /// Shared input basis, `r × n`.
    pub v_a_t: Matrix<T>,
    /// One `r × r` core per expert.
    pub cores: Vec<Matrix<T>>,
    /// `N × r` with core-space routing, `N × n` without.
    pub router: RouterParams<T>,
}

impl<T: Real> ComolParams<T> {
    fn check(&self, m: usize, n: usize, use_core_routing: bool) -> Result<()> {
        let r = self.u_b.cols();
        if self.u_b.rows() != m || self.v_a_t.shape() != (r, n) {
            return Err(Error::shape(
                "comol",
                format!(
                    "U_B is {}x{}, V_Aᵀ is {}x{}, W is {m}x{n}",
                    self.u_b.rows(),
                    r,
                    self.v_a_t.rows(),
                    self.v_a_t.cols()
                ),
            ));
        }
        if self.cores.is_empty() || self.cores.iter().any(|c| c.shape() != (r, r)) {
            return Err(Error::shape("comol", format!("expected N >= 1 cores of shape {r}x{r}")));
        }
        if self.router.num_experts() != self.cores.len() {
            return Err(Error::Config(format!(
                "router has {} rows for {} cores",
                self.router.num_experts(),
                self.cores.len()
            )));
        }
        let want = if use_core_routing { r } else { n };
        if self.router.input_dim() != want {
            return Err(Error::Config(format!(
                "router input width {} does not match {} routing (expected {want})",
                self.router.input_dim(),
                if use_core_routing { "core-space" } else { "full-dimension" }
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AdapterParams<T: Real = f64> {
    Lora(LoraParams<T>),
    /// Soft, sparse and SMEAR share the same parameter layout.
    Mixture { experts: Vec<LoraParams<T>>, router: RouterParams<T> },
    Comol(ComolParams<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterLayer<T: Real = f64> {
    pub config: LayerConfig,
    /// Frozen base projection, `m × n`.
    pub w: Matrix<T>,
    pub params: AdapterParams<T>,
}

/// Named trainable gradients, in the same order as [`AdapterLayer::trainable`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<T: Real = f64> {
    pub entries: Vec<(String, Matrix<T>)>,
}

impl<T: Real> ParamGrads<T> {
    pub fn get(&self, name: &str) -> Option<&Matrix<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|(_, m)| m.data().iter().all(|v| *v == T::zero()))
    }

    /// `self += other`, entry by entry.
    pub fn accumulate(&mut self, other: &ParamGrads<T>) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Contract("gradient sets have different layouts".into()));
        }
        for ((na, a), (nb, b)) in self.entries.iter_mut().zip(&other.entries) {
            if na != nb {
                return Err(Error::Contract(format!("gradient name mismatch: {na} vs {nb}")));
            }
            a.add_scaled(T::one(), b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for (_, m) in &mut self.entries {
            m.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Intermediates cached by a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T: Real = f64> {
    pub method: Method,
    pub tokens: usize,
    fingerprint: u64,
    pub data: TraceData<T>,
}

#[derive(Clone, Debug)]
pub enum TraceData<T: Real> {
    Lora {
        /// `A x` per token.
        z: Vec<Vec<T>>,
    },
    Mixture {
        routes: Vec<RoutingWeights<T>>,
        /// Per token, per expert: `A_i x` (only for active experts).
        z: Vec<Vec<Option<Vec<T>>>>,
        /// Per token, per expert: `B_i A_i x` (only for active experts).
        y: Vec<Vec<Option<Vec<T>>>>,
    },
    Smear {
        route: RoutingWeights<T>,
        mean: Vec<T>,
        b_ins: Matrix<T>,
        a_ins: Matrix<T>,
        z: Vec<Vec<T>>,
    },
    Comol {
        x_hat: Vec<Vec<T>>,
        routes: Vec<RoutingWeights<T>>,
        merged: Vec<Matrix<T>>,
        /// `M_merged x̂` per token.
        u: Vec<Vec<T>>,
        use_core_routing: bool,
    },
}

fn check_vec(op: &'static str, x: &[impl Sized], n: usize) -> Result<()> {
    if x.len() != n {
        return Err(Error::shape(op, format!("expected input of length {n}, got {}", x.len())));
    }
    Ok(())
}

/// `Wx` charged to the base category.
fn base_product<T: Real>(w: &Matrix<T>, x: &[T]) -> Result<Vec<T>> {
    flops::in_category(Category::Base, || w.matvec(x))
}

/// `base + s·delta`, or `s·delta` alone when `base` is absent.
fn finish<T: Real>(base: Option<Vec<T>>, delta: &[T], s: T) -> Vec<T> {
    let scaled_delta = scaled(s, delta);
    match base {
        Some(mut h) => {
            flops::charge_to(Category::FinalAdd, h.len() as u64);
            for (hi, d) in h.iter_mut().zip(scaled_delta) {
                *hi += d;
            }
            h
        }
        None => scaled_delta,
    }
}

/// Unscaled `B(Ax)` and the intermediate `Ax`.
fn lora_delta<T: Real>(p: &LoraParams<T>, x: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    flops::in_category(Category::Expert, || {
        let z = p.a.matvec(x)?;
        let y = p.b.matvec(&z)?;
        Ok((y, z))
    })
}

type MixtureTokenTrace<T> = (Vec<Option<Vec<T>>>, Vec<Option<Vec<T>>>);

/// `Σ_{i∈T(x)} G_i B_i A_i x` with per-expert intermediates.
fn mixture_delta<T: Real>(
    experts: &[LoraParams<T>],
    g: &RoutingWeights<T>,
    x: &[T],
    m: usize,
) -> Result<(Vec<T>, MixtureTokenTrace<T>)> {
    let mut zs = vec![None; experts.len()];
    let mut ys = vec![None; experts.len()];
    let mut acc: Option<Vec<T>> = None;
    for &i in &g.active {
        let (y, z) = lora_delta(&experts[i], x)?;
        match acc.as_mut() {
            None => acc = Some(scaled(g.weights[i], &y)),
            Some(a) => accumulate_weighted(a, g.weights[i], &y),
        }
        zs[i] = Some(z);
        ys[i] = Some(y);
    }
    Ok((acc.unwrap_or_else(|| vec![T::zero(); m]), (zs, ys)))
}

/// `Σ G_i M_i` (or any same-shape matrices), charged as aggregation.
fn merge_matrices<T: Real>(mats: &[&Matrix<T>], weights: &[T]) -> Matrix<T> {
    let mut merged = Matrix::new(mats[0].rows(), mats[0].cols(), scaled(weights[0], mats[0].data()))
        .expect("non-empty by construction");
    for (mat, &g) in mats.iter().zip(weights).skip(1) {
        accumulate_weighted(merged.data_mut(), g, mat.data());
    }
    merged
}

/// `h = Wx + s·B(Ax)` without materializing `BA`.
pub fn lora_forward<T: Real>(w: &Matrix<T>, p: &LoraParams<T>, x: &[T], s: T) -> Result<Vec<T>> {
    p.check(w.rows(), w.cols())?;
    check_vec("lora_forward", x, w.cols())?;
    let base = base_product(w, x)?;
    let (delta, _) = lora_delta(p, x)?;
    Ok(finish(Some(base), &delta, s))
}

/// Output-level MoE-LoRA: soft routing when `top_k` is `None`, top-k sparse otherwise.
pub fn moe_forward<T: Real>(
    w: &Matrix<T>,
    experts: &[LoraParams<T>],
    router: &RouterParams<T>,
    x: &[T],
    top_k: Option<usize>,
    s: T,
) -> Result<Vec<T>> {
    check_mixture(w, experts, router)?;
    check_vec("moe_forward", x, w.cols())?;
    let g = match top_k {
        None => soft_route(router, x)?,
        Some(k) => sparse_route(router, x, k)?,
    };
    let base = base_product(w, x)?;
    let (delta, _) = mixture_delta(experts, &g, x, w.rows())?;
    Ok(finish(Some(base), &delta, s))
}

fn check_mixture<T: Real>(w: &Matrix<T>, experts: &[LoraParams<T>], router: &RouterParams<T>) -> Result<()> {
    if experts.is_empty() {
        return Err(Error::Parameter("mixture needs at least one expert".into()));
    }
    let r = experts[0].b.cols();
    for e in experts {
        e.check(w.rows(), w.cols())?;
        if e.b.cols() != r {
            return Err(Error::shape("mixture", "experts disagree on rank"));
        }
    }
    if router.num_experts() != experts.len() || router.input_dim() != w.cols() {
        return Err(Error::shape(
            "mixture",
            format!(
                "router is {}x{} for {} experts of input width {}",
                router.num_experts(),
                router.input_dim(),
                experts.len(),
                w.cols()
            ),
        ));
    }
    Ok(())
}

fn check_tokens<T: Real>(op: &'static str, tokens: &Matrix<T>, n: usize) -> Result<()> {
    if tokens.cols() != n {
        return Err(Error::shape(op, format!("tokens are {}x{}, expected width {n}", tokens.rows(), tokens.cols())));
    }
    Ok(())
}

/// Instance-level soft merging: one routing decision on the mean token, one
/// merged expert `(B_ins, A_ins)` applied to every token.
pub fn smear_forward<T: Real>(
    w: &Matrix<T>,
    experts: &[LoraParams<T>],
    router: &RouterParams<T>,
    tokens: &Matrix<T>,
    s: T,
) -> Result<Matrix<T>> {
    Ok(smear_impl(w, experts, router, tokens, s, true)?.0)
}

#[allow(clippy::type_complexity)]
fn smear_impl<T: Real>(
    w: &Matrix<T>,
    experts: &[LoraParams<T>],
    router: &RouterParams<T>,
    tokens: &Matrix<T>,
    s: T,
    with_base: bool,
) -> Result<(Matrix<T>, TraceData<T>)> {
    check_mixture(w, experts, router)?;
    check_tokens("smear_forward", tokens, w.cols())?;
    let mean = instance_mean(tokens);
    let route = soft_route(router, &mean)?;
    let bs: Vec<&Matrix<T>> = experts.iter().map(|e| &e.b).collect();
    let as_: Vec<&Matrix<T>> = experts.iter().map(|e| &e.a).collect();
    let b_ins = merge_matrices(&bs, &route.weights);
    let a_ins = merge_matrices(&as_, &route.weights);
    let merged = LoraParams { b: b_ins, a: a_ins };
    let mut out = Matrix::zeros(tokens.rows(), w.rows());
    let mut zs = Vec::with_capacity(tokens.rows());
    for t in 0..tokens.rows() {
        let x = tokens.row(t);
        let base = if with_base { Some(base_product(w, x)?) } else { None };
        let (delta, z) = lora_delta(&merged, x)?;
        out.row_mut(t).copy_from_slice(&finish(base, &delta, s));
        zs.push(z);
    }
    let LoraParams { b: b_ins, a: a_ins } = merged;
    Ok((out, TraceData::Smear { route, mean, b_ins, a_ins, z: zs }))
}

/// Per-token CoMoL: `x̂ = V_Aᵀx` once, route on `x̂` (or on `x` without core
/// routing), merge cores `M = Σ G_i M_i`, then `h = Wx + s·U_B(M x̂)`.
pub fn comol_forward<T: Real>(
    w: &Matrix<T>,
    p: &ComolParams<T>,
    tokens: &Matrix<T>,
    s: T,
    use_core_routing: bool,
) -> Result<(Matrix<T>, ForwardTrace<T>)> {
    let (out, data) = comol_impl(w, p, tokens, s, use_core_routing, true, true)?;
    let method = if use_core_routing { Method::Comol } else { Method::ComolNoCr };
    let fingerprint = fingerprint_comol(method, w, p, tokens);
    Ok((out, ForwardTrace { method, tokens: tokens.rows(), fingerprint, data }))
}

fn comol_impl<T: Real>(
    w: &Matrix<T>,
    p: &ComolParams<T>,
    tokens: &Matrix<T>,
    s: T,
    use_core_routing: bool,
    with_base: bool,
    keep_trace: bool,
) -> Result<(Matrix<T>, TraceData<T>)> {
    p.check(w.rows(), w.cols(), use_core_routing)?;
    check_tokens("comol_forward", tokens, w.cols())?;
    let l = tokens.rows();
    let mut out = Matrix::zeros(l, w.rows());
    let (mut xs, mut routes, mut merged_all, mut us) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let cores: Vec<&Matrix<T>> = p.cores.iter().collect();
    for t in 0..l {
        let x = tokens.row(t);
        let base = if with_base { Some(base_product(w, x)?) } else { None };
        let x_hat = flops::in_category(Category::Expert, || p.v_a_t.matvec(x))?;
        let route = if use_core_routing { core_route(&p.router, &x_hat)? } else { soft_route(&p.router, x)? };
        let merged = merge_matrices(&cores, &route.weights);
        let (delta, u) = flops::in_category(Category::Expert, || -> Result<_> {
            let u = merged.matvec(&x_hat)?;
            Ok((p.u_b.matvec(&u)?, u))
        })?;
        out.row_mut(t).copy_from_slice(&finish(base, &delta, s));
        if keep_trace {
            xs.push(x_hat);
            routes.push(route);
            merged_all.push(merged);
            us.push(u);
        }
    }
    Ok((out, TraceData::Comol { x_hat: xs, routes, merged: merged_all, u: us, use_core_routing }))
}

/// Unfused reference: `h = Wx + s·Σ_i G_i (U_B M_i V_Aᵀ) x`, computing every
/// expert's full output separately. A test oracle for [`comol_forward`].
pub fn comol_forward_reference<T: Real>(
    w: &Matrix<T>,
    p: &ComolParams<T>,
    tokens: &Matrix<T>,
    s: T,
    use_core_routing: bool,
) -> Result<Matrix<T>> {
    p.check(w.rows(), w.cols(), use_core_routing)?;
    check_tokens("comol_forward_reference", tokens, w.cols())?;
    let mut out = Matrix::zeros(tokens.rows(), w.rows());
    for t in 0..tokens.rows() {
        let x = tokens.row(t);
        let base = base_product(w, x)?;
        let route = if use_core_routing {
            let x_hat = flops::in_category(Category::Routing, || p.v_a_t.matvec(x))?;
            core_route(&p.router, &x_hat)?
        } else {
            soft_route(&p.router, x)?
        };
        let mut acc: Option<Vec<T>> = None;
        for (i, core) in p.cores.iter().enumerate() {
            let y = flops::in_category(Category::Expert, || -> Result<_> {
                let x_hat = p.v_a_t.matvec(x)?;
                let mid = core.matvec(&x_hat)?;
                p.u_b.matvec(&mid)
            })?;
            match acc.as_mut() {
                None => acc = Some(scaled(route.weights[i], &y)),
                Some(a) => accumulate_weighted(a, route.weights[i], &y),
            }
        }
        let delta = acc.expect("at least one core");
        out.row_mut(t).copy_from_slice(&finish(Some(base), &delta, s));
    }
    Ok(out)
}

fn hash_matrix<T: Real>(h: &mut DefaultHasher, m: &Matrix<T>) {
    m.shape().hash(h);
    for v in m.data() {
        v.as_f64().to_bits().hash(h);
    }
}

fn fingerprint<'a, T: Real>(
    method: Method,
    w: &Matrix<T>,
    trainable: impl IntoIterator<Item = &'a Matrix<T>>,
    tokens: &Matrix<T>,
) -> u64 {
    let mut h = DefaultHasher::new();
    method.hash(&mut h);
    hash_matrix(&mut h, w);
    for m in trainable {
        hash_matrix(&mut h, m);
    }
    hash_matrix(&mut h, tokens);
    h.finish()
}

fn fingerprint_comol<T: Real>(method: Method, w: &Matrix<T>, p: &ComolParams<T>, tokens: &Matrix<T>) -> u64 {
    let trainable = [&p.u_b, &p.v_a_t].into_iter().chain(&p.cores).chain([&p.router.w_g]);
    fingerprint(method, w, trainable, tokens)
}

impl<T: Real> AdapterLayer<T> {
    /// Checks that parameter shapes agree with the config.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        if self.w.shape() != (c.m, c.n) {
            return Err(Error::shape("layer", format!("W is {:?}, config says {}x{}", self.w.shape(), c.m, c.n)));
        }
        let rank_ok = |b: &Matrix<T>| b.cols() == c.r;
        match (&self.params, c.method) {
            (AdapterParams::Lora(p), Method::Lora) => {
                p.check(c.m, c.n)?;
                if !rank_ok(&p.b) {
                    return Err(Error::shape("layer", "rank disagrees with config"));
                }
            }
            (AdapterParams::Mixture { experts, router }, m) if m.is_mixture() => {
                check_mixture(&self.w, experts, router)?;
                if experts.len() != c.num_experts || !rank_ok(&experts[0].b) {
                    return Err(Error::shape("layer", "expert count or rank disagrees with config"));
                }
            }
            (AdapterParams::Comol(p), m) if m.is_comol() => {
                p.check(c.m, c.n, m == Method::Comol)?;
                if p.cores.len() != c.num_experts || !rank_ok(&p.u_b) {
                    return Err(Error::shape("layer", "core count or rank disagrees with config"));
                }
            }
            (_, m) => return Err(Error::Config(format!("parameters do not match method {m}"))),
        }
        Ok(())
    }

    pub fn scale(&self) -> T {
        T::from_f64(self.config.scale())
    }

    /// Trainable tensors with stable names, in a fixed order.
    pub fn trainable(&self) -> Vec<(String, &Matrix<T>)> {
        match &self.params {
            AdapterParams::Lora(p) => vec![("b".into(), &p.b), ("a".into(), &p.a)],
            AdapterParams::Mixture { experts, router } => {
                let mut out = vec![("router.w_g".to_string(), &router.w_g)];
                for (i, e) in experts.iter().enumerate() {
                    out.push((format!("experts.{i}.b"), &e.b));
                    out.push((format!("experts.{i}.a"), &e.a));
                }
                out
            }
            AdapterParams::Comol(p) => {
                let mut out = vec![("u_b".to_string(), &p.u_b), ("v_a_t".to_string(), &p.v_a_t)];
                for (i, c) in p.cores.iter().enumerate() {
                    out.push((format!("cores.{i}"), c));
                }
                out.push(("router.w_g".into(), &p.router.w_g));
                out
            }
        }
    }

    /// Mutable view of [`AdapterLayer::trainable`], same order.
    pub fn trainable_mut(&mut self) -> Vec<&mut Matrix<T>> {
        match &mut self.params {
            AdapterParams::Lora(p) => vec![&mut p.b, &mut p.a],
            AdapterParams::Mixture { experts, router } => {
                let mut out = vec![&mut router.w_g];
                for e in experts.iter_mut() {
                    out.push(&mut e.b);
                    out.push(&mut e.a);
                }
                out
            }
            AdapterParams::Comol(p) => {
                let mut out = vec![&mut p.u_b, &mut p.v_a_t];
                out.extend(p.cores.iter_mut());
                out.push(&mut p.router.w_g);
                out
            }
        }
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().iter().map(|(_, m)| m.rows() * m.cols()).sum()
    }

    pub fn zero_grads(&self) -> ParamGrads<T> {
        ParamGrads {
            entries: self.trainable().into_iter().map(|(n, m)| (n, Matrix::zeros(m.rows(), m.cols()))).collect(),
        }
    }

    /// Overwrites every trainable tensor with `uniform(-bound, bound)` draws.
    /// Used by verification suites that need a generic (non-init) point.
    pub fn randomize(&mut self, seed: u64, bound: f64) {
        let mut rng = SeededRng::stream(seed, 7);
        for m in self.trainable_mut() {
            for v in m.data_mut() {
                *v = T::from_f64(rng.uniform(-bound, bound));
            }
        }
    }

    fn fingerprint(&self, tokens: &Matrix<T>) -> u64 {
        fingerprint(self.config.method, &self.w, self.trainable().into_iter().map(|(_, m)| m), tokens)
    }

    /// Forward over `L` tokens (`L × n`), returning `L × m` outputs and a trace.
    pub fn forward(&self, tokens: &Matrix<T>) -> Result<(Matrix<T>, ForwardTrace<T>)> {
        let (out, data) = self.forward_impl(tokens, true, true)?;
        let trace =
            ForwardTrace { method: self.config.method, tokens: tokens.rows(), fingerprint: self.fingerprint(tokens), data };
        Ok((out, trace))
    }

    /// Forward without building a trace.
    pub fn apply(&self, tokens: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.forward_impl(tokens, true, false)?.0)
    }

    /// The scaled adapter delta `h − Wx` alone, without a trace.
    pub fn adapter_delta(&self, tokens: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.forward_impl(tokens, false, false)?.0)
    }

    fn forward_impl(&self, tokens: &Matrix<T>, with_base: bool, keep_trace: bool) -> Result<(Matrix<T>, TraceData<T>)> {
        let c = &self.config;
        let s = self.scale();
        check_tokens("forward", tokens, c.n)?;
        let l = tokens.rows();
        match (&self.params, c.method) {
            (AdapterParams::Lora(p), _) => {
                p.check(c.m, c.n)?;
                let mut out = Matrix::zeros(l, c.m);
                let mut zs = Vec::new();
                for t in 0..l {
                    let x = tokens.row(t);
                    let base = if with_base { Some(base_product(&self.w, x)?) } else { None };
                    let (delta, z) = lora_delta(p, x)?;
                    out.row_mut(t).copy_from_slice(&finish(base, &delta, s));
                    if keep_trace {
                        zs.push(z);
                    }
                }
                Ok((out, TraceData::Lora { z: zs }))
            }
            (AdapterParams::Mixture { experts, router }, Method::Smear) => {
                smear_impl(&self.w, experts, router, tokens, s, with_base)
            }
            (AdapterParams::Mixture { experts, router }, method) => {
                check_mixture(&self.w, experts, router)?;
                let top_k = if method == Method::MoeSparse { c.top_k } else { None };
                let mut out = Matrix::zeros(l, c.m);
                let (mut routes, mut zs, mut ys) = (Vec::new(), Vec::new(), Vec::new());
                for t in 0..l {
                    let x = tokens.row(t);
                    let g = match top_k {
                        None => soft_route(router, x)?,
                        Some(k) => sparse_route(router, x, k)?,
                    };
                    let base = if with_base { Some(base_product(&self.w, x)?) } else { None };
                    let (delta, (z, y)) = mixture_delta(experts, &g, x, c.m)?;
                    out.row_mut(t).copy_from_slice(&finish(base, &delta, s));
                    if keep_trace {
                        routes.push(g);
                        zs.push(z);
                        ys.push(y);
                    }
                }
                Ok((out, TraceData::Mixture { routes, z: zs, y: ys }))
            }
            (AdapterParams::Comol(p), method) => {
                comol_impl(&self.w, p, tokens, s, method == Method::Comol, with_base, keep_trace)
            }
        }
    }

    /// Per-token routing weights over experts (rows sum to 1 for soft and
    /// core routing). SMEAR repeats its single instance-level row; plain LoRA
    /// returns a single column of ones.
    pub fn routing_weights(&self, tokens: &Matrix<T>) -> Result<Matrix<T>> {
        let (_, trace) = self.forward(tokens)?;
        Ok(trace.routing_weights(self.config.num_experts))
    }
}

impl<T: Real> ForwardTrace<T> {
    /// Routing weights recorded by the forward (`L × N`), laid out as in
    /// [`AdapterLayer::routing_weights`].
    pub fn routing_weights(&self, n_exp: usize) -> Matrix<T> {
        let l = self.tokens;
        let mut out = Matrix::zeros(l, n_exp);
        match &self.data {
            TraceData::Lora { .. } => out.fill(T::one()),
            TraceData::Mixture { routes, .. } | TraceData::Comol { routes, .. } => {
                for (t, g) in routes.iter().enumerate() {
                    out.row_mut(t).copy_from_slice(&g.weights);
                }
            }
            TraceData::Smear { route, .. } => {
                for t in 0..l {
                    out.row_mut(t).copy_from_slice(&route.weights);
                }
            }
        }
        out
    }
}

/// Which contributions to include in the `v_a_t` gradient of core-routed CoMoL.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VatGradient {
    /// Transform path and router path (the correct gradient).
    Full,
    /// Transform path only. Exists so gradient checks can prove they detect the omission.
    TransformOnly,
}

/// Exact gradients of a scalar loss given `∂L/∂h = grad_out`.
pub fn layer_backward<T: Real>(
    layer: &AdapterLayer<T>,
    tokens: &Matrix<T>,
    grad_out: &Matrix<T>,
    trace: &ForwardTrace<T>,
) -> Result<(Matrix<T>, ParamGrads<T>)> {
    layer_backward_with(layer, tokens, grad_out, trace, VatGradient::Full)
}

#[doc(hidden)]
pub fn layer_backward_with<T: Real>(
    layer: &AdapterLayer<T>,
    tokens: &Matrix<T>,
    grad_out: &Matrix<T>,
    trace: &ForwardTrace<T>,
    vat: VatGradient,
) -> Result<(Matrix<T>, ParamGrads<T>)> {
    backward_impl(layer, tokens, grad_out, None, trace, vat)
}

/// Like [`layer_backward`], with an extra loss term that depends on the
/// routing weights: `route_grad` is `∂L/∂G` (`L × N`, one row per token;
/// for SMEAR the rows are summed into the single instance decision).
/// Entries for experts a sparse router left inactive are ignored.
pub fn layer_backward_with_routing<T: Real>(
    layer: &AdapterLayer<T>,
    tokens: &Matrix<T>,
    grad_out: &Matrix<T>,
    route_grad: &Matrix<T>,
    trace: &ForwardTrace<T>,
) -> Result<(Matrix<T>, ParamGrads<T>)> {
    if route_grad.shape() != (tokens.rows(), layer.config.num_experts) {
        return Err(Error::shape(
            "layer_backward_with_routing",
            format!("route_grad is {:?}, expected {}x{}", route_grad.shape(), tokens.rows(), layer.config.num_experts),
        ));
    }
    backward_impl(layer, tokens, grad_out, Some(route_grad), trace, VatGradient::Full)
}

fn backward_impl<T: Real>(
    layer: &AdapterLayer<T>,
    tokens: &Matrix<T>,
    grad_out: &Matrix<T>,
    route_grad: Option<&Matrix<T>>,
    trace: &ForwardTrace<T>,
    vat: VatGradient,
) -> Result<(Matrix<T>, ParamGrads<T>)> {
    let c = &layer.config;
    if trace.method != c.method || trace.tokens != tokens.rows() || trace.fingerprint != layer.fingerprint(tokens) {
        return Err(Error::Contract("trace does not come from a forward of this layer on these tokens".into()));
    }
    if grad_out.shape() != (tokens.rows(), c.m) {
        return Err(Error::shape(
            "layer_backward",
            format!("grad_out is {:?}, expected {}x{}", grad_out.shape(), tokens.rows(), c.m),
        ));
    }
    let s = layer.scale();
    let l = tokens.rows();
    let mut grads = layer.zero_grads();
    let mut grad_x = Matrix::zeros(l, c.n);
    // Base path: Wᵀ g.
    for t in 0..l {
        let gx = layer.w.matvec_t(grad_out.row(t))?;
        grad_x.row_mut(t).copy_from_slice(&gx);
    }

    match (&layer.params, &trace.data) {
        (AdapterParams::Lora(p), TraceData::Lora { z }) => {
            let (gb, ga) = split2(&mut grads.entries);
            for t in 0..l {
                let (x, g) = (tokens.row(t), grad_out.row(t));
                gb.add_outer(s, g, &z[t]);
                let gz: Vec<T> = p.b.matvec_t(g)?.into_iter().map(|v| v * s).collect();
                ga.add_outer(T::one(), &gz, x);
                add_into(grad_x.row_mut(t), &p.a.matvec_t(&gz)?);
            }
        }
        (AdapterParams::Mixture { experts, router }, TraceData::Mixture { routes, z, y }) => {
            for t in 0..l {
                let (x, g, route) = (tokens.row(t), grad_out.row(t), &routes[t]);
                let mut d_weights = vec![T::zero(); experts.len()];
                for &i in &route.active {
                    let (zi, yi) = (z[t][i].as_ref().expect("active"), y[t][i].as_ref().expect("active"));
                    let gi = route.weights[i];
                    d_weights[i] = s * crate::linalg::dot(g, yi);
                    grads.entries[1 + 2 * i].1.add_outer(s * gi, g, zi);
                    let gz: Vec<T> = experts[i].b.matvec_t(g)?.into_iter().map(|v| v * s * gi).collect();
                    grads.entries[2 + 2 * i].1.add_outer(T::one(), &gz, x);
                    add_into(grad_x.row_mut(t), &experts[i].a.matvec_t(&gz)?);
                    if let Some(rg) = route_grad {
                        d_weights[i] += rg.get(t, i);
                    }
                }
                let d_logits = route.logits_grad(&d_weights);
                grads.entries[0].1.add_outer(T::one(), &d_logits, x);
                add_into(grad_x.row_mut(t), &router.w_g.matvec_t(&d_logits)?);
            }
        }
        (AdapterParams::Mixture { experts, router }, TraceData::Smear { route, mean, b_ins, a_ins, z }) => {
            let mut g_b = Matrix::zeros(c.m, c.r);
            let mut g_a = Matrix::zeros(c.r, c.n);
            for t in 0..l {
                let (x, g) = (tokens.row(t), grad_out.row(t));
                g_b.add_outer(s, g, &z[t]);
                let gz: Vec<T> = b_ins.matvec_t(g)?.into_iter().map(|v| v * s).collect();
                g_a.add_outer(T::one(), &gz, x);
                add_into(grad_x.row_mut(t), &a_ins.matvec_t(&gz)?);
            }
            let mut d_weights = vec![T::zero(); experts.len()];
            for (i, e) in experts.iter().enumerate() {
                let gi = route.weights[i];
                grads.entries[1 + 2 * i].1.add_scaled(gi, &g_b)?;
                grads.entries[2 + 2 * i].1.add_scaled(gi, &g_a)?;
                d_weights[i] = g_b.dot(&e.b) + g_a.dot(&e.a);
                if let Some(rg) = route_grad {
                    d_weights[i] += (0..l).map(|t| rg.get(t, i)).sum::<T>();
                }
            }
            let d_logits = route.logits_grad(&d_weights);
            grads.entries[0].1.add_outer(T::one(), &d_logits, mean);
            let d_mean = router.w_g.matvec_t(&d_logits)?;
            let inv_l = T::one() / T::from_f64(l as f64);
            for t in 0..l {
                for (gx, &dm) in grad_x.row_mut(t).iter_mut().zip(&d_mean) {
                    *gx += dm * inv_l;
                }
            }
        }
        (AdapterParams::Comol(p), TraceData::Comol { x_hat, routes, merged, u, use_core_routing }) => {
            let n_exp = p.cores.len();
            let router_idx = 2 + n_exp;
            for t in 0..l {
                let (x, g, route) = (tokens.row(t), grad_out.row(t), &routes[t]);
                grads.entries[0].1.add_outer(s, g, &u[t]);
                let gu: Vec<T> = p.u_b.matvec_t(g)?.into_iter().map(|v| v * s).collect();
                // ∂L/∂M_merged = gu x̂ᵀ
                let mut d_weights = vec![T::zero(); n_exp];
                for (i, core) in p.cores.iter().enumerate() {
                    grads.entries[2 + i].1.add_outer(route.weights[i], &gu, &x_hat[t]);
                    d_weights[i] = bilinear(core, &gu, &x_hat[t]);
                    if let Some(rg) = route_grad {
                        d_weights[i] += rg.get(t, i);
                    }
                }
                let mut g_xhat = merged[t].matvec_t(&gu)?;
                let d_logits = route.logits_grad(&d_weights);
                if *use_core_routing {
                    grads.entries[router_idx].1.add_outer(T::one(), &d_logits, &x_hat[t]);
                    if vat == VatGradient::Full {
                        add_into(&mut g_xhat, &p.router.w_g.matvec_t(&d_logits)?);
                    }
                } else {
                    grads.entries[router_idx].1.add_outer(T::one(), &d_logits, x);
                    add_into(grad_x.row_mut(t), &p.router.w_g.matvec_t(&d_logits)?);
                }
                grads.entries[1].1.add_outer(T::one(), &g_xhat, x);
                add_into(grad_x.row_mut(t), &p.v_a_t.matvec_t(&g_xhat)?);
            }
        }
        _ => return Err(Error::Contract("trace kind does not match layer parameters".into())),
    }
    Ok((grad_x, grads))
}

/// `uᵀ M v`.
fn bilinear<T: Real>(m: &Matrix<T>, u: &[T], v: &[T]) -> T {
    let mut acc = T::zero();
    for (i, &ui) in u.iter().enumerate() {
        acc += ui * crate::linalg::dot(m.row(i), v);
    }
    acc
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &v) in dst.iter_mut().zip(src) {
        *d += v;
    }
}

fn split2<T: Real>(entries: &mut [(String, Matrix<T>)]) -> (&mut Matrix<T>, &mut Matrix<T>) {
    let (first, rest) = entries.split_at_mut(1);
    (&mut first[0].1, &mut rest[0].1)
}

const ROUTER_INIT_BOUND: f64 = 0.01;

/// Fresh layer with a random frozen `W ~ uniform(±1/√n)`.
pub fn init_layer<T: Real>(config: &LayerConfig, seed: u64) -> Result<AdapterLayer<T>> {
    config.validate()?;
    let mut rng = SeededRng::stream(seed, 0);
    let w = rng.uniform_matrix(config.m, config.n, 1.0 / (config.n as f64).sqrt());
    init_layer_with_base(config, w, seed)
}

/// Fresh layer around a given frozen `W`. The adapter delta is zero at init:
/// `B = 0` for LoRA-family experts and all cores are zero for CoMoL.
pub fn init_layer_with_base<T: Real>(config: &LayerConfig, w: Matrix<T>, seed: u64) -> Result<AdapterLayer<T>> {
    config.validate()?;
    let LayerConfig { m, n, r, num_experts, .. } = *config;
    let mut rng = SeededRng::stream(seed, 1);
    let a_bound = 1.0 / (n as f64).sqrt();
    let params = match config.method {
        Method::Lora => AdapterParams::Lora(LoraParams { b: Matrix::zeros(m, r), a: rng.uniform_matrix(r, n, a_bound) }),
        Method::MoeSoft | Method::MoeSparse | Method::Smear => {
            let experts = (0..num_experts)
                .map(|_| LoraParams { b: Matrix::zeros(m, r), a: rng.uniform_matrix(r, n, a_bound) })
                .collect();
            let router = RouterParams::new(rng.uniform_matrix(num_experts, n, ROUTER_INIT_BOUND));
            AdapterParams::Mixture { experts, router }
        }
        Method::Comol | Method::ComolNoCr => {
            let u_b = rng.uniform_matrix(m, r, 1.0 / (r as f64).sqrt());
            let v_a_t = rng.uniform_matrix(r, n, a_bound);
            let cores = (0..num_experts).map(|_| Matrix::zeros(r, r)).collect();
            let router = RouterParams::new(rng.uniform_matrix(num_experts, config.router_input_dim(), ROUTER_INIT_BOUND));
            AdapterParams::Comol(ComolParams { u_b, v_a_t, cores, router })
        }
    };
    let layer = AdapterLayer { config: config.clone(), w, params };
    layer.validate()?;
    Ok(layer)
}

/// Small uniform router for `num_experts` experts over inputs of width `dim`.
pub fn init_router<T: Real>(num_experts: usize, dim: usize, seed: u64) -> RouterParams<T> {
    let mut rng = SeededRng::stream(seed, 2);
    RouterParams::new(rng.uniform_matrix(num_experts, dim, ROUTER_INIT_BOUND))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{frobenius_distance, matmul};

    fn rand_lora(rng: &mut SeededRng, m: usize, n: usize, r: usize) -> LoraParams {
        LoraParams { b: rng.uniform_matrix(m, r, 1.0), a: rng.uniform_matrix(r, n, 1.0) }
    }

    /// `Wx + s·(BA)x` with `BA` materialized.
    fn materialized(w: &Matrix, b: &Matrix, a: &Matrix, x: &[f64], s: f64) -> Vec<f64> {
        let delta = matmul(b, a).unwrap();
        let xm = Matrix::column(x).unwrap();
        let wx = matmul(w, &xm).unwrap();
        let dx = matmul(&delta, &xm).unwrap();
        wx.data().iter().zip(dx.data()).map(|(a, b)| a + s * b).collect()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn method_parse_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert_eq!("moe-sparse".parse::<Method>().unwrap(), Method::MoeSparse);
        assert!("hydra".parse::<Method>().is_err());
    }

    #[test]
    fn lora_forward_examples() {
        let mut rng = SeededRng::new(1);
        let w = rng.uniform_matrix(3, 4, 1.0);
        let x = [0.1, 0.2, -0.3, 0.4];
        let p = LoraParams { b: Matrix::zeros(3, 2), a: rng.uniform_matrix(2, 4, 1.0) };
        assert_eq!(lora_forward(&w, &p, &x, 1.0).unwrap(), w.matvec(&x).unwrap());

        let w0 = Matrix::zeros(2, 2);
        let p = LoraParams {
            b: Matrix::from_rows(&[[1.0], [0.0]]).unwrap(),
            a: Matrix::from_rows(&[[0.0, 1.0]]).unwrap(),
        };
        assert_eq!(lora_forward(&w0, &p, &[5.0, 7.0], 1.0).unwrap(), vec![7.0, 0.0]);

        let p = rand_lora(&mut rng, 3, 4, 2);
        let h = lora_forward(&w, &p, &x, 0.5).unwrap();
        assert!(max_abs_diff(&h, &materialized(&w, &p.b, &p.a, &x, 0.5)) < 1e-12);
        assert!(lora_forward(&w, &p, &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn moe_forward_examples() {
        let mut rng = SeededRng::new(2);
        let (m, n) = (3, 4);
        let w = rng.uniform_matrix(m, n, 1.0);
        let x = [0.3, -0.1, 0.2, 0.5];
        let e = rand_lora(&mut rng, m, n, 2);
        let single = moe_forward(&w, &[e.clone()], &RouterParams::new(rng.uniform_matrix(1, n, 1.0)), &x, None, 1.0)
            .unwrap();
        assert!(max_abs_diff(&single, &lora_forward(&w, &e, &x, 1.0).unwrap()) < 1e-15);

        let router = RouterParams::new(rng.uniform_matrix(3, n, 1.0));
        let same = moe_forward(&w, &[e.clone(), e.clone(), e.clone()], &router, &x, None, 1.0).unwrap();
        assert!(max_abs_diff(&same, &lora_forward(&w, &e, &x, 1.0).unwrap()) < 1e-12);

        // Sparse N=3, k=2 against a brute-force sum over the selected experts.
        let experts: Vec<_> = (0..3).map(|_| rand_lora(&mut rng, m, n, 2)).collect();
        let h = moe_forward(&w, &experts, &router, &x, Some(2), 1.0).unwrap();
        let logits = router.w_g.matvec(&x).unwrap();
        let probs = crate::linalg::softmax(&logits).unwrap();
        let mut idx = [0usize, 1, 2];
        idx.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap());
        let mut expect = w.matvec(&x).unwrap();
        for &i in &idx[..2] {
            let d = materialized(&Matrix::zeros(m, n), &experts[i].b, &experts[i].a, &x, 1.0);
            for (e, v) in expect.iter_mut().zip(d) {
                *e += probs[i] * v;
            }
        }
        assert!(max_abs_diff(&h, &expect) < 1e-12);
        assert!(moe_forward(&w, &experts, &router, &x, Some(4), 1.0).is_err());
    }

    #[test]
    fn smear_forward_examples() {
        let mut rng = SeededRng::new(3);
        let (m, n, l) = (3, 4, 4);
        let w = rng.uniform_matrix(m, n, 1.0);
        let experts: Vec<_> = (0..3).map(|_| rand_lora(&mut rng, m, n, 2)).collect();
        let router = RouterParams::new(rng.uniform_matrix(3, n, 1.0));
        let tokens = rng.uniform_matrix(l, n, 1.0);

        // Explicit-merge oracle.
        let g = crate::routing::instance_route(&router, &tokens).unwrap();
        let mut b_ins = Matrix::zeros(m, 2);
        let mut a_ins = Matrix::zeros(2, n);
        for (i, e) in experts.iter().enumerate() {
            b_ins.add_scaled(g.weights[i], &e.b).unwrap();
            a_ins.add_scaled(g.weights[i], &e.a).unwrap();
        }
        let h = smear_forward(&w, &experts, &router, &tokens, 1.0).unwrap();
        for t in 0..l {
            let expect = materialized(&w, &b_ins, &a_ins, tokens.row(t), 1.0);
            assert!(max_abs_diff(h.row(t), &expect) < 1e-12);
        }

        let same = vec![experts[0].clone(); 3];
        let h = smear_forward(&w, &same, &router, &tokens, 1.0).unwrap();
        for t in 0..l {
            let expect = lora_forward(&w, &experts[0], tokens.row(t), 1.0).unwrap();
            assert!(max_abs_diff(h.row(t), &expect) < 1e-12);
        }
    }

    fn rand_comol(rng: &mut SeededRng, m: usize, n: usize, r: usize, n_exp: usize, core_routing: bool) -> ComolParams {
        ComolParams {
            u_b: rng.uniform_matrix(m, r, 1.0),
            v_a_t: rng.uniform_matrix(r, n, 1.0),
            cores: (0..n_exp).map(|_| rng.uniform_matrix(r, r, 1.0)).collect(),
            router: RouterParams::new(rng.uniform_matrix(n_exp, if core_routing { r } else { n }, 1.0)),
        }
    }

    #[test]
    fn comol_matches_reference() {
        let mut rng = SeededRng::new(4);
        for cr in [true, false] {
            let w = rng.uniform_matrix(5, 6, 1.0);
            let p = rand_comol(&mut rng, 5, 6, 2, 3, cr);
            let tokens = rng.uniform_matrix(3, 6, 1.0);
            let (fused, _) = comol_forward(&w, &p, &tokens, 1.0, cr).unwrap();
            let reference = comol_forward_reference(&w, &p, &tokens, 1.0, cr).unwrap();
            assert!(max_abs_diff(fused.data(), reference.data()) < 1e-10);
        }
    }

    #[test]
    fn comol_degenerate_cases() {
        let mut rng = SeededRng::new(5);
        let w = rng.uniform_matrix(4, 4, 1.0);
        let tokens = rng.uniform_matrix(2, 4, 1.0);
        let mut p = rand_comol(&mut rng, 4, 4, 2, 3, true);
        p.cores.iter_mut().for_each(|c| c.fill(0.0));
        let (h, _) = comol_forward(&w, &p, &tokens, 1.0, true).unwrap();
        for t in 0..2 {
            assert_eq!(h.row(t), w.matvec(tokens.row(t)).unwrap().as_slice());
        }

        let p1 = rand_comol(&mut rng, 4, 4, 2, 1, true);
        let delta = matmul(&matmul(&p1.u_b, &p1.cores[0]).unwrap(), &p1.v_a_t).unwrap();
        let (h, _) = comol_forward(&w, &p1, &tokens, 1.0, true).unwrap();
        for t in 0..2 {
            let expect = materialized(&w, &delta, &Matrix::identity(4), tokens.row(t), 1.0);
            assert!(max_abs_diff(h.row(t), &expect) < 1e-12);
        }

        // Scalar cores M_i = c_i I.
        let mut p = rand_comol(&mut rng, 4, 4, 2, 3, false);
        let cs = [0.5, -1.0, 2.0];
        for (core, c) in p.cores.iter_mut().zip(cs) {
            *core = Matrix::<f64>::identity(2).scale(c);
        }
        let uv = matmul(&p.u_b, &p.v_a_t).unwrap();
        let h = comol_forward_reference(&w, &p, &tokens, 1.0, false).unwrap();
        for t in 0..2 {
            let g = soft_route(&p.router, tokens.row(t)).unwrap();
            let mix: f64 = g.weights.iter().zip(cs).map(|(a, b)| a * b).sum();
            let expect = materialized(&w, &uv, &Matrix::identity(4), tokens.row(t), mix);
            assert!(max_abs_diff(h.row(t), &expect) < 1e-12);
        }
    }

    #[test]
    fn comol_saturated_router_picks_one_core() {
        let mut rng = SeededRng::new(6);
        let w = rng.uniform_matrix(3, 3, 1.0);
        let mut p = rand_comol(&mut rng, 3, 3, 2, 2, false);
        // Logits (-1000·x₀, +1000·x₀) with x₀ = 1 force G = [0, 1].
        p.router.w_g = Matrix::from_rows(&[[-1000.0, 0.0, 0.0], [1000.0, 0.0, 0.0]]).unwrap();
        let tokens = Matrix::from_rows(&[[1.0, 0.3, -0.2]]).unwrap();
        let h = comol_forward_reference(&w, &p, &tokens, 1.0, false).unwrap();
        let delta = matmul(&matmul(&p.u_b, &p.cores[1]).unwrap(), &p.v_a_t).unwrap();
        let expect = materialized(&w, &delta, &Matrix::identity(3), tokens.row(0), 1.0);
        assert!(max_abs_diff(h.row(0), &expect) < 1e-9);
    }

    #[test]
    fn comol_router_width_is_checked() {
        let mut rng = SeededRng::new(7);
        let w = rng.uniform_matrix(4, 6, 1.0);
        let p = rand_comol(&mut rng, 4, 6, 2, 3, false);
        let tokens = rng.uniform_matrix(1, 6, 1.0);
        assert!(matches!(comol_forward(&w, &p, &tokens, 1.0, true), Err(Error::Config(_))));
    }

    #[test]
    fn init_is_zero_delta_and_deterministic() {
        for method in Method::ALL {
            let cfg = LayerConfig::new(method, 5, 6, 2, 3);
            let layer: AdapterLayer = init_layer(&cfg, 42).unwrap();
            let tokens = SeededRng::new(1).uniform_matrix(3, 6, 1.0);
            let h = layer.apply(&tokens).unwrap();
            for t in 0..3 {
                assert_eq!(h.row(t), layer.w.matvec(tokens.row(t)).unwrap().as_slice(), "{method}");
            }
            let again: AdapterLayer = init_layer(&cfg, 42).unwrap();
            assert_eq!(layer, again);
            let other: AdapterLayer = init_layer(&cfg, 43).unwrap();
            assert_ne!(layer.trainable(), other.trainable());
        }
    }

    #[test]
    fn backward_zero_grad_out() {
        for method in Method::ALL {
            let mut layer: AdapterLayer = init_layer(&LayerConfig::new(method, 4, 5, 2, 3), 1).unwrap();
            layer.randomize(3, 0.5);
            let tokens = SeededRng::new(2).uniform_matrix(2, 5, 1.0);
            let (_, trace) = layer.forward(&tokens).unwrap();
            let (gx, gp) = layer_backward(&layer, &tokens, &Matrix::zeros(2, 4), &trace).unwrap();
            assert!(gp.is_zero(), "{method}");
            assert!(gx.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn lora_single_token_gradient_closed_form() {
        let mut layer: AdapterLayer = init_layer(&LayerConfig::new(Method::Lora, 3, 4, 2, 1).with_alpha(4.0), 1).unwrap();
        layer.randomize(9, 1.0);
        let tokens = Matrix::from_rows(&[[0.2, -0.5, 0.1, 0.7]]).unwrap();
        let g = Matrix::from_rows(&[[1.0, -2.0, 0.5]]).unwrap();
        let (_, trace) = layer.forward(&tokens).unwrap();
        let (_, grads) = layer_backward(&layer, &tokens, &g, &trace).unwrap();
        let AdapterParams::Lora(p) = &layer.params else { unreachable!() };
        let s = 2.0;
        let ax = p.a.matvec(tokens.row(0)).unwrap();
        let btg = p.b.matvec_t(g.row(0)).unwrap();
        let mut gb = Matrix::zeros(3, 2);
        gb.add_outer(s, g.row(0), &ax);
        let mut ga = Matrix::zeros(2, 4);
        ga.add_outer(s, &btg, tokens.row(0));
        assert!(frobenius_distance(grads.get("b").unwrap(), &gb).unwrap() < 1e-14);
        assert!(frobenius_distance(grads.get("a").unwrap(), &ga).unwrap() < 1e-14);
    }

    #[test]
    fn stale_trace_rejected() {
        let mut layer: AdapterLayer = init_layer(&LayerConfig::new(Method::Comol, 4, 4, 2, 2), 1).unwrap();
        layer.randomize(1, 0.5);
        let tokens = SeededRng::new(2).uniform_matrix(2, 4, 1.0);
        let (_, trace) = layer.forward(&tokens).unwrap();
        let other = SeededRng::new(3).uniform_matrix(2, 4, 1.0);
        let g = Matrix::zeros(2, 4);
        assert!(matches!(layer_backward(&layer, &other, &g, &trace), Err(Error::Contract(_))));
        let mut changed = layer.clone();
        changed.randomize(5, 0.5);
        assert!(matches!(layer_backward(&changed, &tokens, &g, &trace), Err(Error::Contract(_))));
    }

    #[test]
    fn config_validation() {
        assert!(LayerConfig::new(Method::MoeSparse, 4, 4, 2, 4).with_top_k(5).validate().is_err());
        assert!(LayerConfig::new(Method::Comol, 4, 0, 2, 4).validate().is_err());
        assert_eq!(LayerConfig::new(Method::Lora, 4, 4, 2, 8).num_experts, 1);
        assert_eq!(LayerConfig::new(Method::Comol, 4, 4, 8, 2).scale(), 1.0);
    }

    #[test]
    fn routing_loss_gradient_matches_differences() {
        for method in [Method::MoeSoft, Method::Smear, Method::Comol, Method::ComolNoCr] {
            let mut layer: AdapterLayer = init_layer(&LayerConfig::new(method, 4, 5, 2, 3), 2).unwrap();
            layer.randomize(3, 0.8);
            let mut rng = SeededRng::new(9);
            let tokens = rng.uniform_matrix(3, 5, 1.0);
            let probe = rng.uniform_matrix(3, 4, 1.0);
            let rg = rng.uniform_matrix(3, 3, 1.0);
            let loss = |l: &AdapterLayer| {
                let (h, trace) = l.forward(&tokens).unwrap();
                h.dot(&probe) + trace.routing_weights(3).dot(&rg)
            };
            let (h, trace) = layer.forward(&tokens).unwrap();
            assert_eq!(h.shape(), (3, 4));
            let (_, grads) = layer_backward_with_routing(&layer, &tokens, &probe, &rg, &trace).unwrap();
            let names: Vec<String> = layer.trainable().into_iter().map(|(n, _)| n).collect();
            for (k, name) in names.iter().enumerate() {
                for idx in 0..2 {
                    let mut plus = layer.clone();
                    plus.trainable_mut()[k].data_mut()[idx] += 1e-6;
                    let mut minus = layer.clone();
                    minus.trainable_mut()[k].data_mut()[idx] -= 1e-6;
                    let fd = (loss(&plus) - loss(&minus)) / 2e-6;
                    let an = grads.get(name).unwrap().data()[idx];
                    assert!((fd - an).abs() < 1e-7, "{method} {name}[{idx}]: {an} vs {fd}");
                }
            }
        }
    }
}
