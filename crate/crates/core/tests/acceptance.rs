//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use comol_core::accounting::{
    count_flops, count_output_level_flops, count_params, standard_configs, table1_report, CostConfig,
};
use comol_core::adapters::{init_layer, VatGradient};
use comol_core::bench::{run_bench, standard_cases};
use comol_core::coreconvert::{core_to_delta, lora_to_core, relative_frobenius};
use comol_core::flops;
use comol_core::linalg::matmul;
use comol_core::persistence::{load_checkpoint, save_checkpoint, LoadedLayer, BLOB_FILE, MANIFEST_FILE};
use comol_core::rng::SeededRng;
use comol_core::synthtrain::{adaptation_gap_run, learnability_run, matched_smear, GoldenConfig};
use comol_core::verify::{equivalence_grid, equivalence_suite, gradient_case, gradient_suite, small_grid, EQUIV_TOLERANCE, GRAD_TOLERANCE};
use comol_core::{AdapterLayer, Error, LayerConfig, Matrix, Method};

type Outcome = Result<(bool, String), Error>;

fn distributivity() -> Outcome {
    let shapes = equivalence_grid();
    let report = equivalence_suite(0..100, &shapes)?;
    Ok((
        report.passed && report.max_abs_err < EQUIV_TOLERANCE,
        format!("{} cases, max |fused - reference| = {:.3e}", report.cases, report.max_abs_err),
    ))
}

fn gradients() -> Outcome {
    let report = gradient_suite(&Method::ALL, &small_grid(), 0..2)?;
    let mut mutation_max = 0.0f64;
    for shape in small_grid().iter().filter(|s| s.num_experts > 1) {
        for seed in 0..2 {
            mutation_max = mutation_max.max(gradient_case(Method::Comol, shape, seed, VatGradient::TransformOnly)?.max_rel_err);
        }
    }
    let caught = mutation_max > GRAD_TOLERANCE;
    Ok((
        report.passed && report.max_rel_err < GRAD_TOLERANCE && caught,
        format!(
            "{} cases, max rel err {:.3e}; router-path omission gives {:.3e} ({})",
            report.cases,
            report.max_rel_err,
            mutation_max,
            if caught { "caught" } else { "NOT caught" }
        ),
    ))
}

fn reconstruction() -> Outcome {
    let mut rng = SeededRng::new(2024);
    let mut worst = 0.0f64;
    let mut deficient = 0;
    for draw in 0..120 {
        let m = 2 + rng.index(11);
        let n = 2 + rng.index(11);
        let r = 1 + rng.index(m.min(n).min(6));
        let a = rng.uniform_matrix(r, n, 1.0);
        let b = if draw % 4 == 0 {
            deficient += 1;
            // rank(B) < r: a product through a narrower inner dimension, or zero.
            let inner = rng.index(r);
            if inner == 0 {
                Matrix::zeros(m, r)
            } else {
                matmul(&rng.uniform_matrix(m, inner, 1.0), &rng.uniform_matrix(inner, r, 1.0))?
            }
        } else {
            rng.uniform_matrix(m, r, 1.0)
        };
        let d = lora_to_core(&b, &a)?;
        let err = relative_frobenius(&core_to_delta(&d)?, &matmul(&b, &a)?)?;
        worst = worst.max(err);
    }
    Ok((worst < 1e-9, format!("120 draws ({deficient} rank-deficient B), max relative Frobenius error {worst:.3e}")))
}

fn parameter_footprint() -> Outcome {
    let total = |method, e| count_params(&CostConfig::new(method, 4096, 4096, 8, e, 1)).total;
    let (c2, c64) = (total(Method::Comol, 2), total(Method::Comol, 64));
    let exact = c64 - c2 == (64 - 2) * (8 * 8 + 8);
    let growth = (c64 - c2) as f64 / c2 as f64;
    let (s2, s64) = (total(Method::MoeSoft, 2), total(Method::MoeSoft, 64));
    let soft = s64 as f64 / s2 as f64;
    Ok((
        exact && growth <= 0.07 && (soft - 32.0).abs() < 0.5,
        format!("CoMoL {c2} -> {c64} (+{:.2}%), soft MoE-LoRA {s2} -> {s64} ({soft:.2}x)", growth * 100.0),
    ))
}

fn flop_claims() -> Outcome {
    let mut checked = 0;
    let mut failures = Vec::new();
    for &(m, n, r, e, l) in &[(4, 4, 2, 3, 2), (16, 8, 4, 8, 5), (9, 13, 3, 1, 1), (32, 32, 8, 4, 16), (7, 5, 2, 6, 3)] {
        for method in Method::ALL {
            let config = LayerConfig::new(method, m, n, r, e);
            let config = if method == Method::MoeSparse { config.with_top_k(e.div_ceil(2)) } else { config };
            let cost_cfg = CostConfig::from_layer(&config, l);
            let cost = count_flops(&cost_cfg);
            if method.is_comol() {
                let ol = count_output_level_flops(&cost_cfg).expect("comol");
                if ol.expert != e as u64 * cost.expert {
                    failures.push(format!("{method} ratio at {m},{n},{r},{e},{l}"));
                }
                let sq = count_output_level_flops(&cost_cfg.square()).expect("comol");
                if sq.expert != e as u64 * count_flops(&cost_cfg.square()).expert {
                    failures.push(format!("{method} square ratio at {m},{n},{r},{e},{l}"));
                }
            }
            let mut layer: AdapterLayer = init_layer(&config, 7)?;
            layer.randomize(7, 0.5);
            let tokens = SeededRng::new(8).uniform_matrix(l, n, 1.0);
            let (out, tally) = flops::measure(|| layer.apply(&tokens));
            out?;
            let ok = tally.expert == cost.expert
                && tally.aggregation == cost.aggregation
                && tally.routing == cost.routing
                && tally.final_add == (l * m) as u64
                && tally.base == 2 * (l * m * n) as u64;
            if !ok {
                failures.push(format!("{method} counter at {m},{n},{r},{e},{l}: {tally:?} vs {cost:?}"));
            }
            checked += 1;
        }
    }
    Ok((
        failures.is_empty(),
        if failures.is_empty() {
            format!("{checked} forwards: output-level/core-space = N exactly, counter = closed form (final add L*m kept apart)")
        } else {
            failures.join("; ")
        },
    ))
}

fn router_reduction() -> Outcome {
    let p = |method| count_params(&CostConfig::new(method, 4096, 4096, 8, 8, 1)).router;
    let (cr, full) = (p(Method::Comol), p(Method::ComolNoCr));
    Ok((cr == 8 * 8 && full == 8 * 4096 && full / cr == 512, format!("router {cr} (N*r) vs {full} (N*n): {}x", full / cr)))
}

fn table1_pattern() -> Outcome {
    let t = table1_report(&standard_configs(4096, 4096, 8, 8, 2, 1))?;
    let expect = [(1.0, 1.0, true), (8.0, 8.0, true), (8.0, 2.0, true), (8.0, 1.0, true), (1.0, 1.0, false)];
    let mut ok = true;
    let mut cells = Vec::new();
    for (row, (p, f, exact)) in t.rows.iter().zip(expect) {
        let good = if exact {
            row.params_ratio == p && row.flops_ratio == f
        } else {
            (row.params_ratio - p).abs() / p <= 0.05 && (row.flops_ratio - f).abs() / f <= 0.05
        };
        ok &= good;
        cells.push(format!("{} {:.3},{:.3}", row.method, row.params_ratio, row.flops_ratio));
    }
    Ok((ok, cells.join(" / ")))
}

fn adaptation_gap() -> Outcome {
    let golden = GoldenConfig::bundled();
    let preset = &golden.adaptation_gap;
    let (comol, smear) = matched_smear(preset)?;
    let mut wins = 0;
    let mut cells = Vec::new();
    let mut budget_ok = true;
    for &seed in &preset.seeds {
        let o = adaptation_gap_run(preset, seed, &golden.train)?;
        budget_ok &= (o.smear_params as f64 - o.comol_params as f64).abs() / o.comol_params as f64 <= preset.budget_tolerance;
        wins += o.comol_wins() as usize;
        cells.push(format!("{:.3e}<{:.3e}", o.comol_heldout, o.smear_heldout));
    }
    Ok((
        budget_ok && wins >= preset.min_wins,
        format!(
            "CoMoL N={} r={} vs SMEAR N={} r={}: {wins}/{} wins [{}]",
            comol.num_experts,
            comol.r,
            smear.num_experts,
            smear.r,
            preset.seeds.len(),
            cells.join(", ")
        ),
    ))
}

fn learnability() -> Outcome {
    let golden = GoldenConfig::bundled();
    let preset = &golden.learnability;
    let mut ok = true;
    let mut cells = Vec::new();
    for method in Method::ALL {
        let curve = learnability_run(preset, method, &golden.train)?;
        let ratio = curve.final_heldout / curve.initial_heldout;
        ok &= ratio < preset.max_ratio;
        cells.push(format!("{method} {ratio:.2e}"));
    }
    Ok((ok, format!("final/initial held-out MSE: {}", cells.join(", "))))
}

fn latency_ordering() -> Outcome {
    let report = run_bench(&standard_cases(1024, 1024, 8, 8, 2, 256), 30, 3, 0)?;
    let med = |m| report.get(m).expect("case present").median_ns;
    let (lora, comol, sparse) = (med(Method::Lora), med(Method::Comol), med(Method::MoeSparse));
    Ok((
        comol <= 1.5 * lora && sparse > comol,
        format!(
            "median us: lora {:.0}, comol {:.0} ({:.2}x), moe_sparse {:.0}; pinned={}",
            lora / 1e3,
            comol / 1e3,
            comol / lora,
            sparse / 1e3,
            report.pinned
        ),
    ))
}

fn persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| Error::Config(e.to_string()))?;
    let mut roundtrips = 0;
    for method in Method::ALL {
        let config = LayerConfig::new(method, 6, 9, 3, 4);
        let mut l64: AdapterLayer = init_layer(&config, 1)?;
        l64.randomize(2, 0.5);
        save_checkpoint(&l64, dir.path())?;
        let bytes = std::fs::read(dir.path().join(BLOB_FILE)).map_err(|e| Error::Config(e.to_string()))?;
        if load_checkpoint(dir.path())? != LoadedLayer::F64(l64.clone()) {
            return Ok((false, format!("{method} f64 roundtrip differs")));
        }
        save_checkpoint(&l64, dir.path())?;
        if std::fs::read(dir.path().join(BLOB_FILE)).map_err(|e| Error::Config(e.to_string()))? != bytes {
            return Ok((false, format!("{method} rewrite not byte-identical")));
        }
        let mut l32: AdapterLayer<f32> = init_layer(&config, 1)?;
        l32.randomize(2, 0.5);
        save_checkpoint(&l32, dir.path())?;
        if load_checkpoint(dir.path())? != LoadedLayer::F32(l32) {
            return Ok((false, format!("{method} f32 roundtrip differs")));
        }
        roundtrips += 2;
    }
    let manifest = dir.path().join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    let mut v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    v["tensors"][1]["shape"] = serde_json::json!([99, 3]);
    std::fs::write(&manifest, v.to_string()).map_err(|e| Error::Config(e.to_string()))?;
    let rejected = matches!(load_checkpoint(dir.path()), Err(Error::Integrity(_)));
    Ok((rejected, format!("{roundtrips} bit-identical roundtrips; tampered shape rejected: {rejected}")))
}

type Criterion = (u32, &'static str, Duration, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        (1, "distributivity identity", Duration::from_secs(10), distributivity),
        (2, "gradient exactness", Duration::from_secs(60), gradients),
        (3, "core-space reconstruction", Duration::from_secs(10), reconstruction),
        (4, "parameter footprint vs N", Duration::from_secs(1), parameter_footprint),
        (5, "FLOP claims and counter", Duration::from_secs(5), flop_claims),
        (6, "router reduction", Duration::from_secs(1), router_reduction),
        (7, "Table 1 pattern", Duration::from_secs(1), table1_pattern),
        (8, "token vs instance adaptation", Duration::from_secs(300), adaptation_gap),
        (9, "learnability sanity", Duration::from_secs(120), learnability),
        (10, "latency ordering", Duration::from_secs(60), latency_ordering),
        (11, "checkpoint persistence", Duration::from_secs(5), persistence),
    ];
    let mut failed = 0;
    for (id, name, budget, run) in criteria {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let (pass, detail) = match outcome {
            Ok((ok, detail)) => (ok && elapsed <= budget, detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let timing = if elapsed <= budget { String::new() } else { " OVER BUDGET".to_string() };
        println!(
            "criterion {id:>2} {}: {name}: {detail} [{:.2}s / {}s{timing}]",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
        failed += (!pass) as u32;
    }
    println!("{} of 11 criteria passed", 11 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
