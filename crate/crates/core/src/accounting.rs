//! Closed-form trainable-parameter and FLOP counts for every method.
//!
//! FLOPs follow the multiply-add = 2 convention of [`crate::flops`]. Each
//! report carries the general (`m ≠ n`) counts, which match the instrumented
//! tally of the real forward exactly, plus the square-projection expressions
//! (`m = n`, written in terms of `n`) used in the analysis of core-space
//! merging. Router cost is kept in its own column and is not part of the
//! `Params(×)` / `FLOPs(×)` ratios.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adapters::{LayerConfig, Method};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub method: Method,
    pub m: u64,
    pub n: u64,
    pub r: u64,
    pub num_experts: u64,
    /// Only used by the sparse variant; defaults to `num_experts`.
    #[serde(default)]
    pub top_k: Option<u64>,
    /// Tokens per batch (`L`).
    pub seq_len: u64,
}

impl CostConfig {
    pub fn new(method: Method, m: u64, n: u64, r: u64, num_experts: u64, seq_len: u64) -> Self {
        let num_experts = if method == Method::Lora { 1 } else { num_experts };
        Self { method, m, n, r, num_experts, top_k: None, seq_len }
    }

    pub fn with_top_k(mut self, k: u64) -> Self {
        self.top_k = Some(k);
        self
    }

    pub fn from_layer(c: &LayerConfig, seq_len: usize) -> Self {
        Self {
            method: c.method,
            m: c.m as u64,
            n: c.n as u64,
            r: c.r as u64,
            num_experts: c.num_experts as u64,
            top_k: c.top_k.map(|k| k as u64),
            seq_len: seq_len as u64,
        }
    }

    pub fn k(&self) -> u64 {
        self.top_k.unwrap_or(self.num_experts)
    }

    pub fn validate(&self) -> Result<()> {
        let CostConfig { m, n, r, num_experts, seq_len, .. } = *self;
        if [m, n, r, num_experts, seq_len].contains(&0) {
            return Err(Error::Parameter(format!(
                "cost config needs positive m, n, r, N, L (got {m}, {n}, {r}, {num_experts}, {seq_len})"
            )));
        }
        if self.method == Method::Lora && num_experts != 1 {
            return Err(Error::Parameter("plain LoRA has exactly one expert".into()));
        }
        let k = self.k();
        if k == 0 || k > num_experts {
            return Err(Error::Parameter(format!("top-k must satisfy 1 <= k <= {num_experts}, got {k}")));
        }
        Ok(())
    }

    /// Same config with `m` replaced by `n`.
    pub fn square(&self) -> Self {
        Self { m: self.n, ..self.clone() }
    }

    fn lora_baseline(&self) -> Self {
        Self { method: Method::Lora, num_experts: 1, top_k: None, ..self.clone() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    /// Per-expert parameters: full `(B_i, A_i)` pairs, or the `r × r` cores.
    pub expert: u64,
    /// Parameters shared by all experts (`U_B`, `V_Aᵀ`; LoRA's own pair is counted as expert).
    pub shared: u64,
    pub router: u64,
    pub total: u64,
}

impl ParamCount {
    fn new(expert: u64, shared: u64, router: u64) -> Self {
        Self { expert, shared, router, total: expert + shared + router }
    }

    /// Adapter parameters excluding the router.
    pub fn adapter(&self) -> u64 {
        self.expert + self.shared
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    pub expert: u64,
    /// Output aggregation, parameter merging or core merging.
    pub aggregation: u64,
    pub routing: u64,
    /// Adding the delta into `Wx` (`L·m`); outside the headline number.
    pub final_add: u64,
}

impl FlopCount {
    pub fn adapter(&self) -> u64 {
        self.expert + self.aggregation
    }
}

/// Exact rational.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub config: CostConfig,
    pub params: ParamCount,
    pub flops: FlopCount,
    /// Square-projection form (`m = n`).
    pub flops_square: FlopCount,
    /// Output-level (unfused) evaluation of the same CoMoL layer, when applicable.
    pub output_level: Option<FlopCount>,
    pub output_level_square: Option<FlopCount>,
    /// Adapter params (router excluded) over LoRA's at the same `(m, n, r)`.
    pub params_vs_lora: Ratio,
    /// Expert FLOPs over LoRA's at the same `(m, n, r, L)`.
    pub flops_vs_lora: Ratio,
}

pub fn count_params(c: &CostConfig) -> ParamCount {
    let CostConfig { m, n, r, num_experts: e, .. } = *c;
    match c.method {
        Method::Lora => ParamCount::new((m + n) * r, 0, 0),
        Method::MoeSoft | Method::MoeSparse | Method::Smear => ParamCount::new(e * (m + n) * r, 0, e * n),
        Method::Comol => ParamCount::new(e * r * r, (m + n) * r, e * r),
        Method::ComolNoCr => ParamCount::new(e * r * r, (m + n) * r, e * n),
    }
}

pub fn count_flops(c: &CostConfig) -> FlopCount {
    let CostConfig { m, n, r, num_experts: e, seq_len: l, .. } = *c;
    let k = c.k();
    let lora_expert = 2 * l * r * (m + n);
    let (expert, aggregation, routing) = match c.method {
        Method::Lora => (lora_expert, 0, 0),
        Method::MoeSoft => (e * lora_expert, l * m * (e - 1), 2 * l * e * n),
        Method::MoeSparse => (k * lora_expert, l * m * (k - 1), 2 * l * e * n),
        // One merge and one routing decision per instance; the mean costs L·n.
        Method::Smear => (lora_expert, (e - 1) * (m + n) * r, 2 * e * n + l * n),
        Method::Comol => (2 * l * r * (m + n + r), l * r * r * (e - 1), 2 * l * e * r),
        Method::ComolNoCr => (2 * l * r * (m + n + r), l * r * r * (e - 1), 2 * l * e * n),
    };
    FlopCount { expert, aggregation, routing, final_add: l * m }
}

/// FLOPs of the output-level CoMoL evaluation (every expert's
/// `U_B M_i V_Aᵀ x` computed separately, then summed).
pub fn count_output_level_flops(c: &CostConfig) -> Option<FlopCount> {
    if !c.method.is_comol() {
        return None;
    }
    let CostConfig { m, n, r, num_experts: e, seq_len: l, .. } = *c;
    let routing = match c.method {
        // The reference path projects x̂ once for the router.
        Method::Comol => 2 * l * r * n + 2 * l * e * r,
        _ => 2 * l * e * n,
    };
    Some(FlopCount { expert: 2 * l * r * (m + n + r) * e, aggregation: l * m * (e - 1), routing, final_add: l * m })
}

pub fn cost_report(c: &CostConfig) -> Result<CostReport> {
    c.validate()?;
    let params = count_params(c);
    let flops = count_flops(c);
    let base = c.lora_baseline();
    Ok(CostReport {
        config: c.clone(),
        params,
        flops,
        flops_square: count_flops(&c.square()),
        output_level: count_output_level_flops(c),
        output_level_square: count_output_level_flops(&c.square()),
        params_vs_lora: Ratio { num: params.adapter(), den: count_params(&base).adapter() },
        flops_vs_lora: Ratio { num: flops.expert, den: count_flops(&base).expert },
    })
}

/// Largest rank whose total parameter count does not exceed `target`
/// (closest from below), or `None` if even `r = 1` is over budget.
pub fn rank_for_budget(method: Method, m: u64, n: u64, num_experts: u64, target: u64) -> Option<u64> {
    let total = |r| count_params(&CostConfig::new(method, m, n, r, num_experts, 1)).total;
    if total(1) > target {
        return None;
    }
    let mut r = 1;
    while total(r + 1) <= target {
        r += 1;
    }
    Some(r)
}

/// `(num_experts, rank)` for `method` whose total is within `tolerance`
/// (relative) of `target`, preferring the most experts up to `max_experts`.
pub fn match_budget(method: Method, m: u64, n: u64, max_experts: u64, target: u64, tolerance: f64) -> Option<(u64, u64)> {
    let max_experts = if method == Method::Lora { 1 } else { max_experts };
    (1..=max_experts).rev().find_map(|e| {
        let r = rank_for_budget(method, m, n, e, target)?;
        let total = count_params(&CostConfig::new(method, m, n, r, e, 1)).total;
        ((total as f64 - target as f64).abs() / target as f64 <= tolerance).then_some((e, r))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub method: Method,
    pub label: String,
    pub params_ratio: f64,
    pub flops_ratio: f64,
    pub routing_level: String,
    pub router_input_dim: u64,
    pub report: CostReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1 {
    pub rows: Vec<Table1Row>,
}

fn routing_level(method: Method) -> &'static str {
    match method {
        Method::Lora => "-",
        Method::Smear => "instance",
        _ => "token",
    }
}

fn router_input_dim(c: &CostConfig) -> u64 {
    match c.method {
        Method::Lora => 0,
        Method::Comol => c.r,
        _ => c.n,
    }
}

/// One row per config, ratios normalized to LoRA at the shared `(m, n, r, L)`.
pub fn table1_report(configs: &[CostConfig]) -> Result<Table1> {
    let first = configs.first().ok_or_else(|| Error::Parameter("table needs at least one row".into()))?;
    let key = |c: &CostConfig| (c.m, c.n, c.r, c.seq_len);
    let mut rows = Vec::with_capacity(configs.len());
    for c in configs {
        if key(c) != key(first) {
            return Err(Error::Parameter(format!(
                "rows disagree on (m, n, r, L): {:?} vs {:?}",
                key(c),
                key(first)
            )));
        }
        let report = cost_report(c)?;
        rows.push(Table1Row {
            method: c.method,
            label: c.method.display_name().to_string(),
            params_ratio: report.params_vs_lora.value(),
            flops_ratio: report.flops_vs_lora.value(),
            routing_level: routing_level(c.method).to_string(),
            router_input_dim: router_input_dim(c),
            report,
        });
    }
    Ok(Table1 { rows })
}

/// The five canonical rows plus CoMoL w/o CR for one shared configuration.
pub fn standard_configs(m: u64, n: u64, r: u64, num_experts: u64, top_k: u64, seq_len: u64) -> Vec<CostConfig> {
    Method::ALL
        .into_iter()
        .map(|method| {
            let c = CostConfig::new(method, m, n, r, num_experts, seq_len);
            if method == Method::MoeSparse {
                c.with_top_k(top_k)
            } else {
                c
            }
        })
        .collect()
}

impl Table1 {
    pub fn render_text(&self) -> String {
        let header = ["Method", "Params(x)", "FLOPs(x)", "Routing Level", "Router In", "Trainable", "Expert FLOPs"];
        let body: Vec<[String; 7]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.label.clone(),
                    format!("{:.3}x", r.params_ratio),
                    format!("{:.3}x", r.flops_ratio),
                    r.routing_level.clone(),
                    if r.router_input_dim == 0 { "-".into() } else { r.router_input_dim.to_string() },
                    r.report.params.total.to_string(),
                    r.report.flops.expert.to_string(),
                ]
            })
            .collect();
        render_aligned(&header, &body)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

impl CostReport {
    pub fn render_text(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "method={} m={} n={} r={} N={} k={} L={}",
            c.method,
            c.m,
            c.n,
            c.r,
            c.num_experts,
            c.k(),
            c.seq_len
        );
        let p = &self.params;
        let _ = writeln!(out, "trainable_params {}", p.total);
        let _ = writeln!(out, "  expert          {}", p.expert);
        let _ = writeln!(out, "  shared          {}", p.shared);
        let _ = writeln!(out, "  router          {}", p.router);
        let mut flops = |label: &str, f: &FlopCount| {
            let _ = writeln!(
                out,
                "{label:<28} expert={} aggregation={} routing={} final_add={}",
                f.expert, f.aggregation, f.routing, f.final_add
            );
        };
        flops("flops (general m,n)", &self.flops);
        flops("flops (square, m=n)", &self.flops_square);
        if let Some(o) = &self.output_level {
            flops("output-level (general m,n)", o);
        }
        if let Some(o) = &self.output_level_square {
            flops("output-level (square, m=n)", o);
        }
        let _ = writeln!(
            out,
            "params_vs_lora {}/{} = {:.4}x  flops_vs_lora {}/{} = {:.4}x",
            self.params_vs_lora.num,
            self.params_vs_lora.den,
            self.params_vs_lora.value(),
            self.flops_vs_lora.num,
            self.flops_vs_lora.den,
            self.flops_vs_lora.value()
        );
        out
    }
}

/// Left-aligned plain-text table.
pub fn render_aligned<const W: usize>(header: &[&str; W], rows: &[[String; W]]) -> String {
    let mut widths = header.map(str::len);
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cells.iter().zip(widths).map(|(c, w)| format!("{c:<w$}")).collect();
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
    };
    line(header.to_vec(), &mut out);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    line(rule.iter().map(String::as_str).collect(), &mut out);
    for row in rows {
        line(row.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

/// Per-module projection shapes of a model, for whole-model parameter totals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub name: String,
    pub modules: Vec<ModuleDims>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleDims {
    pub name: String,
    pub m: u64,
    pub n: u64,
    /// How many times this projection occurs (e.g. number of layers).
    pub count: u64,
}

/// Total trainable parameters when every module in `model` is adapted.
pub fn count_model_params(model: &ModelDims, method: Method, r: u64, num_experts: u64) -> u64 {
    model
        .modules
        .iter()
        .map(|d| d.count * count_params(&CostConfig::new(method, d.m, d.n, r, num_experts, 1)).total)
        .sum()
}
