use std::fs;
use std::path::Path;
use std::thread;

use comol_core::accounting::{
    cost_report, count_model_params, count_params, render_aligned, standard_configs, table1_report, CostConfig,
    ModelDims,
};
use comol_core::adapters::{AdapterParams, VatGradient};
use comol_core::bench::{run_bench, standard_cases, BenchCase};
use comol_core::coreconvert::experts_to_comol;
use comol_core::persistence::{cast_layer, load_checkpoint, read_manifest, save_checkpoint, LoadedLayer};
use comol_core::synthtrain::{make_task, train};
use comol_core::verify::{
    equivalence_grid, equivalence_suite, gradient_case, EquivalenceCase, small_grid, EquivalenceReport, GradCheck, Shape,
    EQUIV_TOLERANCE, GRAD_TOLERANCE,
};
use comol_core::{AdapterLayer, DType, Error, LayerConfig, Method, Real, Result};
use serde::Serialize;
use serde_json::json;

use crate::args::{
    parse_seeds, BenchArgs, CheckArgs, Command, ConfigArgs, ConvertArgs, CountArgs, InspectArgs, ShapeFlags, TrainArgs,
};
use crate::config::RunConfig;

/// `Ok(false)` means a check ran and failed.
pub fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Count(a) => count(&a),
        Command::Flops(a) => flops(&a),
        Command::Table1(a) => table1(&a),
        Command::EquivCheck(a) => equiv_check(&a),
        Command::GradCheck(a) => grad_check(&a),
        Command::SvdConvert(a) => svd_convert(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Bench(a) => bench(&a),
        Command::Inspect(a) => inspect(&a),
    }
}

fn resolve(config: Option<&Path>, shape: &ShapeFlags) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    shape.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn write_out(dir: Option<&Path>, name: &str, contents: &str) -> Result<()> {
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(name);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report types serialize")
}

fn cost_config(cfg: &RunConfig) -> CostConfig {
    CostConfig::from_layer(&cfg.layer.config(), cfg.layer.seq_len)
}

fn count(a: &CountArgs) -> Result<bool> {
    let cfg = resolve(a.common.config.as_deref(), &a.common.shape)?;
    let l = &cfg.layer;
    let report = match &a.model {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let model: ModelDims = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.clone(), source: e })?;
            let total = count_model_params(&model, l.method, l.r as u64, l.num_experts as u64);
            json!({ "model": model.name, "method": l.method, "trainable_params": total })
        }
        None => {
            let p = count_params(&cost_config(&cfg));
            json!({ "method": l.method, "trainable_params": p.total, "breakdown": p })
        }
    };
    let text = to_json(&report);
    write_out(a.common.out.as_deref(), "count.json", &text)?;
    if a.common.json {
        println!("{text}");
    } else {
        println!("trainable_params {}", report["trainable_params"]);
        if let Some(b) = report.get("breakdown") {
            println!("  expert {}  shared {}  router {}", b["expert"], b["shared"], b["router"]);
        }
    }
    Ok(true)
}

fn flops(a: &ConfigArgs) -> Result<bool> {
    let cfg = resolve(a.config.as_deref(), &a.shape)?;
    let report = cost_report(&cost_config(&cfg))?;
    let text = to_json(&report);
    write_out(a.out.as_deref(), "flops.json", &text)?;
    if a.json {
        println!("{text}");
    } else {
        print!("{}", report.render_text());
    }
    Ok(true)
}

fn table1(a: &ConfigArgs) -> Result<bool> {
    let cfg = resolve(a.config.as_deref(), &a.shape)?;
    let l = &cfg.layer;
    let k = l.top_k.unwrap_or(l.num_experts.div_ceil(2));
    let configs = standard_configs(l.m as u64, l.n as u64, l.r as u64, l.num_experts as u64, k as u64, l.seq_len as u64);
    let table = table1_report(&configs)?;
    write_out(a.out.as_deref(), "table1.json", &table.to_json())?;
    write_out(a.out.as_deref(), "table1.txt", &table.render_text())?;
    if a.json {
        println!("{}", table.to_json());
    } else {
        print!("{}", table.render_text());
    }
    Ok(true)
}

fn worker_count() -> Result<usize> {
    match std::env::var("COMOL_LAB_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("COMOL_LAB_THREADS must be a positive integer, got '{v}'"))),
        },
    }
}

/// Maps `f` over seeds on up to `COMOL_LAB_THREADS` workers; results keep seed order.
fn per_seed<T: Send>(seeds: &[u64], f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    let workers = worker_count()?.min(seeds.len()).max(1);
    if workers == 1 {
        return seeds.iter().map(|&s| f(s)).collect();
    }
    let chunk = seeds.len().div_ceil(workers);
    let f = &f;
    thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|&s| f(s)).collect::<Result<Vec<T>>>()))
            .collect();
        let mut out = Vec::with_capacity(seeds.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

fn seed_list(spec: Option<&str>, default: &str) -> Result<Vec<u64>> {
    parse_seeds(spec.unwrap_or(default)).map(|r| r.collect()).map_err(Error::Config)
}

/// The single shape named by flags, or `None` when no shape flag was given.
fn flag_shape(f: &ShapeFlags, tokens: usize) -> Option<Shape> {
    if f.m.is_none() && f.n.is_none() && f.r.is_none() && f.num_experts.is_none() && f.seq_len.is_none() {
        return None;
    }
    let d = crate::config::LayerSection::default();
    Some(Shape {
        m: f.m.unwrap_or(d.m),
        n: f.n.unwrap_or(d.n),
        r: f.r.unwrap_or(d.r),
        num_experts: f.num_experts.unwrap_or(d.num_experts),
        tokens: f.seq_len.unwrap_or(tokens),
    })
}

fn check_shapes(shapes: &[Shape]) -> Result<()> {
    for s in shapes {
        if s.m == 0 || s.n == 0 || s.r == 0 || s.num_experts == 0 || s.tokens == 0 {
            return Err(Error::Parameter(format!("dimensions must be positive: {s:?}")));
        }
    }
    Ok(())
}

fn equiv_check(a: &CheckArgs) -> Result<bool> {
    let seeds = seed_list(a.seeds.as_deref(), "0..99")?;
    let shapes = flag_shape(&a.shape, 16).map_or_else(equivalence_grid, |s| vec![s]);
    check_shapes(&shapes)?;
    let reports: Vec<EquivalenceReport> = per_seed(&seeds, |s| equivalence_suite([s], &shapes))?;
    let cases: usize = reports.iter().map(|r| r.cases).sum();
    let worst = reports.iter().filter_map(|r| r.worst.clone()).fold(None::<EquivalenceCase>, |acc, c| match acc {
        Some(w) if w.max_abs_err >= c.max_abs_err => Some(w),
        _ => Some(c),
    });
    let max_err = worst.as_ref().map_or(0.0, |w| w.max_abs_err);
    let first_failure = reports.iter().find(|r| !r.passed).and_then(|r| r.worst.clone());
    let passed = first_failure.is_none();
    let doc = json!({
        "passed": passed,
        "tolerance": EQUIV_TOLERANCE,
        "cases": cases,
        "max_abs_err": max_err,
        "worst": worst,
        "first_failure": first_failure,
    });
    write_out(a.out.as_deref(), "equiv.json", &to_json(&doc))?;
    println!(
        "equivalence: {} cases over seeds {}..{}, max |fused - reference| = {max_err:.3e} (tolerance {EQUIV_TOLERANCE:e})",
        cases,
        seeds[0],
        seeds[seeds.len() - 1]
    );
    match first_failure {
        None => println!("PASS"),
        Some(c) => println!("FAIL: first failing case {}", serde_json::to_string(&c).expect("serializable")),
    }
    Ok(passed)
}

fn grad_check(a: &CheckArgs) -> Result<bool> {
    let seeds = seed_list(a.seeds.as_deref(), "0..1")?;
    let methods: Vec<Method> = a.shape.method.map_or_else(|| Method::ALL.to_vec(), |m| vec![m]);
    let shapes = flag_shape(&a.shape, 3).map_or_else(small_grid, |s| vec![s]);
    check_shapes(&shapes)?;
    let per: Vec<Vec<GradCheck>> = per_seed(&seeds, |seed| {
        let mut out = Vec::new();
        for &method in &methods {
            for shape in &shapes {
                if method == Method::Lora && shape.num_experts != 1 {
                    continue;
                }
                out.push(gradient_case(method, shape, seed, VatGradient::Full)?);
            }
        }
        Ok(out)
    })?;
    let all: Vec<&GradCheck> = per.iter().flatten().collect();
    let worst = all.iter().copied().fold(None::<&GradCheck>, |acc, c| match acc {
        Some(w) if w.max_rel_err >= c.max_rel_err => Some(w),
        _ => Some(c),
    });
    let max_err = worst.map_or(0.0, |w| w.max_rel_err);
    let first_failure = all.iter().find(|c| c.max_rel_err >= GRAD_TOLERANCE).copied();
    let passed = first_failure.is_none() && !all.is_empty();
    let doc = json!({
        "passed": passed,
        "tolerance": GRAD_TOLERANCE,
        "cases": all.len(),
        "max_rel_err": max_err,
        "worst": worst,
        "first_failure": first_failure,
    });
    write_out(a.out.as_deref(), "grad.json", &to_json(&doc))?;
    println!("gradients: {} cases, max relative error = {max_err:.3e} (tolerance {GRAD_TOLERANCE:e})", all.len());
    match first_failure {
        None if passed => println!("PASS"),
        None => println!("FAIL: no cases matched the requested method and shapes"),
        Some(c) => println!("FAIL: first failing case {}", serde_json::to_string(c).expect("serializable")),
    }
    Ok(passed)
}

fn relative_delta_error(before: &AdapterLayer, after: &AdapterLayer) -> Result<f64> {
    // Compare effective updates on the identity: delta(I) rows are ΔWᵀ.
    let eye = comol_core::Matrix::identity(before.config.n);
    let want = before.adapter_delta(&eye)?;
    let got = after.adapter_delta(&eye)?;
    comol_core::coreconvert::relative_frobenius(&got, &want)
}

fn svd_convert(a: &ConvertArgs) -> Result<bool> {
    let loaded = load_checkpoint(&a.input)?;
    let dtype = loaded.dtype();
    let src = loaded.into_f64();
    let experts = match &src.params {
        AdapterParams::Lora(p) => vec![p.clone()],
        AdapterParams::Mixture { experts, .. } => experts.clone(),
        AdapterParams::Comol(_) => {
            return Err(Error::Config(format!("{} is already in core-space form", a.input.display())));
        }
    };
    let conv = experts_to_comol(&experts, a.anchor, a.seed)?;
    let c = &src.config;
    let config = LayerConfig::new(Method::Comol, c.m, c.n, c.r, experts.len()).with_alpha(c.alpha);
    let out = AdapterLayer { config, w: src.w.clone(), params: AdapterParams::Comol(conv.params) };
    out.validate()?;
    match dtype {
        DType::F64 => save_checkpoint(&out, &a.output)?,
        DType::F32 => save_checkpoint(&cast_layer::<f64, f32>(&out), &a.output)?,
    }
    let rows: Vec<[String; 3]> = conv
        .residuals
        .iter()
        .map(|r| [r.expert.to_string(), format!("{:.3e}", r.residual), format!("{:.3e}", r.relative)])
        .collect();
    println!("converted {} ({} expert(s), anchor {}) -> comol", c.method, experts.len(), a.anchor);
    print!("{}", render_aligned(&["expert", "residual", "relative"], &rows));
    let max_rel = conv.residuals.iter().map(|r| r.relative).fold(0.0, f64::max);
    println!("max relative reconstruction error {max_rel:.3e}");
    if src.config.method == Method::Lora {
        println!("layer output relative error {:.3e}", relative_delta_error(&src, &out)?);
    }
    println!("wrote {}", a.output.display());
    Ok(true)
}

fn train_cmd(a: &TrainArgs) -> Result<bool> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    a.apply(&mut cfg);
    cfg.validate()?;
    let out = cfg
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config("no output directory: pass --out or set out_dir".into()))?;
    let task = make_task(&cfg.task_spec())?;
    write_out(Some(&out), "config.json", &to_json(&cfg))?;
    match cfg.dtype {
        DType::F64 => train_typed::<f64>(&cfg, &task, &out),
        DType::F32 => train_typed::<f32>(&cfg, &task, &out),
    }
}

fn train_typed<T: Real>(cfg: &RunConfig, task: &comol_core::synthtrain::SyntheticTask, out: &Path) -> Result<bool> {
    let layer_cfg = cfg.layer.config();
    let mut layer = task.init_layer::<T>(&layer_cfg, cfg.seed)?;
    let params = layer.num_trainable();
    match train(&mut layer, task, &cfg.train_config()) {
        Ok(curve) => {
            curve.write_jsonl(&out.join("loss.jsonl"))?;
            save_checkpoint(&layer, &out.join("checkpoint"))?;
            let summary = json!({
                "status": "ok",
                "method": layer_cfg.method,
                "trainable_params": params,
                "steps": cfg.train.steps,
                "initial_heldout": curve.initial_heldout,
                "final_heldout": curve.final_heldout,
                "routing_histogram": curve.routing_histogram,
            });
            write_out(Some(out), "summary.json", &to_json(&summary))?;
            println!(
                "{}: {} params, held-out mse {:.4e} -> {:.4e} after {} steps",
                layer_cfg.method, params, curve.initial_heldout, curve.final_heldout, cfg.train.steps
            );
            println!("wrote {}", out.display());
            Ok(true)
        }
        Err(e @ Error::Training { .. }) => {
            let summary = json!({ "status": "diverged", "method": layer_cfg.method, "error": e.to_string() });
            write_out(Some(out), "summary.json", &to_json(&summary))?;
            Err(e)
        }
        Err(e) => Err(e),
    }
}

fn bench(a: &BenchArgs) -> Result<bool> {
    let f = &a.shape;
    let (m, n, r, e, l) = (
        f.m.unwrap_or(1024),
        f.n.unwrap_or(1024),
        f.r.unwrap_or(8),
        f.num_experts.unwrap_or(8),
        f.seq_len.unwrap_or(256),
    );
    let k = f.top_k.unwrap_or(2);
    let mut cases: Vec<BenchCase> = standard_cases(m, n, r, e, k, l);
    if let Some(method) = f.method {
        cases.retain(|c| c.layer.method == method || c.layer.method == Method::Lora);
    }
    if let Some(alpha) = f.alpha {
        for c in &mut cases {
            c.layer.alpha = alpha;
        }
    }
    if a.reference {
        cases.push(BenchCase::reference(LayerConfig::new(Method::Comol, m, n, r, e), l));
    }
    for c in &cases {
        c.layer.validate()?;
    }
    let report = run_bench(&cases, a.reps, a.warmup, a.seed)?;
    write_out(a.out.as_deref(), "bench.json", &report.to_json())?;
    write_out(a.out.as_deref(), "bench.txt", &report.render_text())?;
    print!("{}", report.render_text());
    Ok(true)
}

fn inspect(a: &InspectArgs) -> Result<bool> {
    let manifest = read_manifest(&a.path)?;
    println!("{}", to_json(&manifest));
    let rows: Vec<[String; 3]> = match load_checkpoint(&a.path) {
        Ok(layer) => norms_rows(&layer),
        // Task artifacts have no layer; the manifest alone is the report.
        Err(Error::Integrity(msg)) if msg.contains("task") => return Ok(true),
        Err(e) => return Err(e),
    };
    print!("{}", render_aligned(&["tensor", "shape", "frobenius"], &rows));
    Ok(true)
}

fn norms_rows(layer: &LoadedLayer) -> Vec<[String; 3]> {
    layer
        .tensor_norms()
        .into_iter()
        .map(|(name, [r, c], norm)| [name, format!("{r}x{c}"), format!("{norm:.6e}")])
        .collect()
}
