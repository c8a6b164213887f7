//! Wall-clock microbenchmarks of the adapter forwards.
//!
//! Only orderings of medians are meaningful across machines. Each case also
//! records the instrumented FLOP tally of one forward, which is exact and
//! input-independent.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::accounting::render_aligned;
use crate::adapters::{comol_forward_reference, init_layer, AdapterLayer, AdapterParams, LayerConfig, Method};
use crate::error::{Error, Result};
use crate::flops::{self, FlopTally};
use crate::linalg::Matrix;
use crate::rng::SeededRng;

pub const MIN_REPS: usize = 30;
/// Timed samples shorter than this are grouped so each sample covers at least this long.
pub const MIN_SAMPLE: Duration = Duration::from_micros(100);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchTarget {
    /// The layer's adapter path (`h − Wx`), fused where the method allows it.
    Adapter,
    /// CoMoL evaluated output-level, every expert separately (includes `Wx`).
    ComolReference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchCase {
    pub layer: LayerConfig,
    pub seq_len: usize,
    #[serde(default = "default_target")]
    pub target: BenchTarget,
}

fn default_target() -> BenchTarget {
    BenchTarget::Adapter
}

impl BenchCase {
    pub fn new(layer: LayerConfig, seq_len: usize) -> Self {
        Self { layer, seq_len, target: BenchTarget::Adapter }
    }

    pub fn reference(layer: LayerConfig, seq_len: usize) -> Self {
        Self { layer, seq_len, target: BenchTarget::ComolReference }
    }

    fn label(&self) -> String {
        match self.target {
            BenchTarget::Adapter => self.layer.method.as_str().to_string(),
            BenchTarget::ComolReference => format!("{} (output-level)", self.layer.method.as_str()),
        }
    }

    fn sort_key(&self) -> (usize, u8) {
        let pos = Method::ALL.iter().position(|m| *m == self.layer.method).unwrap_or(usize::MAX);
        (pos, matches!(self.target, BenchTarget::ComolReference) as u8)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub method: Method,
    pub label: String,
    pub case: BenchCase,
    pub repetitions: usize,
    pub warmup: usize,
    /// Forwards per timed sample; timings below are per single forward.
    pub inner: usize,
    pub median_ns: f64,
    pub mean_ns: f64,
    pub p95_ns: f64,
    /// FLOPs of one forward over `seq_len` tokens.
    pub flops: FlopTally,
    pub timer_resolution_ns: f64,
    pub warning: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    /// Whether the timed region ran pinned to one logical CPU.
    pub pinned: bool,
    pub results: Vec<BenchResult>,
}

/// Smallest observable non-zero step of the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..200 {
        let t0 = Instant::now();
        let mut t1 = Instant::now();
        while t1 == t0 {
            t1 = Instant::now();
        }
        best = best.min(t1 - t0);
    }
    best
}

#[cfg(target_os = "linux")]
mod pin {
    /// Pins the calling thread to the CPU it is running on; restores the old mask on drop.
    pub struct Pin(Option<libc::cpu_set_t>);

    impl Pin {
        pub fn acquire() -> Self {
            // SAFETY: cpu_set_t is plain data; the calls only read/write the sets passed in.
            unsafe {
                let mut old: libc::cpu_set_t = std::mem::zeroed();
                let size = std::mem::size_of::<libc::cpu_set_t>();
                if libc::sched_getaffinity(0, size, &mut old) != 0 {
                    return Pin(None);
                }
                let cpu = libc::sched_getcpu();
                if cpu < 0 {
                    return Pin(None);
                }
                let mut one: libc::cpu_set_t = std::mem::zeroed();
                libc::CPU_SET(cpu as usize, &mut one);
                if libc::sched_setaffinity(0, size, &one) != 0 {
                    return Pin(None);
                }
                Pin(Some(old))
            }
        }

        pub fn pinned(&self) -> bool {
            self.0.is_some()
        }
    }

    impl Drop for Pin {
        fn drop(&mut self) {
            if let Some(old) = &self.0 {
                // SAFETY: restores the mask read in `acquire`.
                unsafe {
                    libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), old);
                }
            }
        }
    }
}

#[cfg(not(target_os = "linux"))]
mod pin {
    pub struct Pin;

    impl Pin {
        pub fn acquire() -> Self {
            Pin
        }

        pub fn pinned(&self) -> bool {
            false
        }
    }
}

struct Prepared {
    layer: AdapterLayer,
    tokens: Matrix,
    target: BenchTarget,
}

impl Prepared {
    fn new(case: &BenchCase, seed: u64) -> Result<Self> {
        if case.seq_len == 0 {
            return Err(Error::Parameter("bench needs at least one token".into()));
        }
        if case.target == BenchTarget::ComolReference && !case.layer.method.is_comol() {
            return Err(Error::Config(format!("output-level reference needs a CoMoL method, got {}", case.layer.method)));
        }
        let mut layer: AdapterLayer = init_layer(&case.layer, seed)?;
        // Non-zero adapters so the outputs exercise every path; cost is value-independent.
        layer.randomize(seed, 0.1);
        let tokens = SeededRng::stream(seed, 30).uniform_matrix(case.seq_len, case.layer.n, 1.0);
        Ok(Self { layer, tokens, target: case.target })
    }

    fn run(&self) -> Result<Matrix> {
        match (self.target, &self.layer.params) {
            (BenchTarget::ComolReference, AdapterParams::Comol(p)) => comol_forward_reference(
                &self.layer.w,
                p,
                &self.tokens,
                self.layer.scale(),
                self.layer.config.method == Method::Comol,
            ),
            _ => self.layer.adapter_delta(&self.tokens),
        }
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).ceil() as usize;
    sorted[idx]
}

/// Times every case with identical inputs for a given seed. Results are
/// sorted stably by method, output-level reference after the fused path.
pub fn run_bench(cases: &[BenchCase], reps: usize, warmup: usize, seed: u64) -> Result<BenchReport> {
    if reps < MIN_REPS {
        return Err(Error::Parameter(format!("need at least {MIN_REPS} repetitions, got {reps}")));
    }
    let resolution = timer_resolution().as_nanos() as f64;
    let prepared = cases.iter().map(|c| Prepared::new(c, seed)).collect::<Result<Vec<_>>>()?;
    let pin = pin::Pin::acquire();
    let mut setup = Vec::with_capacity(cases.len());
    for prep in &prepared {
        let (out, tally) = flops::measure(|| prep.run());
        if !out?.is_finite() {
            return Err(Error::Numerical { op: "bench", residual: f64::NAN });
        }
        for _ in 0..warmup {
            std::hint::black_box(prep.run()?);
        }
        // Group forwards so each sample is long enough to dwarf timer noise.
        let t0 = Instant::now();
        std::hint::black_box(prep.run()?);
        let single = t0.elapsed().max(Duration::from_nanos(1));
        let inner = (MIN_SAMPLE.as_nanos() / single.as_nanos()).max(1) as usize;
        setup.push((tally, inner));
    }
    // Round-robin over cases so clock-frequency drift hits every method alike.
    let mut samples = vec![Vec::with_capacity(reps); cases.len()];
    for _ in 0..reps {
        for ((prep, &(_, inner)), out) in prepared.iter().zip(&setup).zip(&mut samples) {
            let t = Instant::now();
            for _ in 0..inner {
                std::hint::black_box(prep.run()?);
            }
            out.push(t.elapsed().as_nanos() as f64 / inner as f64);
        }
    }
    let mut results = Vec::with_capacity(cases.len());
    for ((case, (tally, inner)), mut samples) in cases.iter().zip(setup).zip(samples) {
        let mean = samples.iter().sum::<f64>() / reps as f64;
        samples.sort_by(f64::total_cmp);
        let median = percentile(&samples, 0.5);
        let p95 = percentile(&samples, 0.95);
        let sample_median = median * inner as f64;
        let warning = (resolution > 0.01 * sample_median).then(|| {
            format!("timer resolution {resolution:.0} ns exceeds 1% of the {sample_median:.0} ns median sample")
        });
        results.push(BenchResult {
            method: case.layer.method,
            label: case.label(),
            case: case.clone(),
            repetitions: reps,
            warmup,
            inner,
            median_ns: median,
            mean_ns: mean,
            p95_ns: p95,
            flops: tally,
            timer_resolution_ns: resolution,
            warning,
        });
    }
    let pinned = pin.pinned();
    drop(pin);
    results.sort_by_key(|r| r.case.sort_key());
    Ok(BenchReport { pinned, results })
}

/// The five methods (plus CoMoL w/o CR) at one shape.
pub fn standard_cases(m: usize, n: usize, r: usize, num_experts: usize, top_k: usize, seq_len: usize) -> Vec<BenchCase> {
    Method::ALL
        .into_iter()
        .map(|method| {
            let c = LayerConfig::new(method, m, n, r, num_experts);
            let c = if method == Method::MoeSparse { c.with_top_k(top_k) } else { c };
            BenchCase::new(c, seq_len)
        })
        .collect()
}

fn routing_label(method: Method) -> &'static str {
    match method {
        Method::Lora => "-",
        Method::Smear => "instance",
        Method::MoeSparse => "token (top-k)",
        _ => "token",
    }
}

impl BenchReport {
    pub fn get(&self, method: Method) -> Option<&BenchResult> {
        self.results.iter().find(|r| r.method == method && r.case.target == BenchTarget::Adapter)
    }

    pub fn render_text(&self) -> String {
        let lora = self.get(Method::Lora).map(|r| r.median_ns);
        let header =
            ["Method", "Routing", "m,n,r,N,k,L", "Median us", "Mean us", "p95 us", "vs LoRA", "Adapter FLOPs", "Routing FLOPs"];
        let rows: Vec<[String; 9]> = self
            .results
            .iter()
            .map(|r| {
                let c = &r.case.layer;
                [
                    r.label.clone(),
                    routing_label(r.method).to_string(),
                    format!("{},{},{},{},{},{}", c.m, c.n, c.r, c.num_experts, c.top_k.unwrap_or(c.num_experts), r.case.seq_len),
                    format!("{:.1}", r.median_ns / 1e3),
                    format!("{:.1}", r.mean_ns / 1e3),
                    format!("{:.1}", r.p95_ns / 1e3),
                    lora.map_or("-".into(), |l| format!("{:.2}x", r.median_ns / l)),
                    r.flops.adapter().to_string(),
                    r.flops.routing.to_string(),
                ]
            })
            .collect();
        let mut out = render_aligned(&header, &rows);
        out.push_str(&format!("pinned: {}\n", self.pinned));
        for r in &self.results {
            if let Some(w) = &r.warning {
                out.push_str(&format!("warning ({}): {w}\n", r.label));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}
