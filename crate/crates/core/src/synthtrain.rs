//! A token-clustered linear regression task and a small training loop.
//!
//! Every token belongs to the cluster whose direction it is most aligned
//! with, and its target is `W x + Δ_c x` for that cluster's low-rank `Δ_c`.
//! Sequences can mix clusters, which is what separates token-level routing
//! from one merge per sequence.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::accounting::match_budget;
use crate::adapters::{init_layer_with_base, layer_backward, layer_backward_with_routing, AdapterLayer, LayerConfig, Method};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Real};
use crate::rng::SeededRng;

/// Fraction of sequences held out from training.
pub const HELDOUT_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub seed: u64,
    pub m: usize,
    pub n: usize,
    pub clusters: usize,
    pub r_true: usize,
    pub seq_len: usize,
    pub num_sequences: usize,
    /// Probability that a sequence draws tokens from two clusters.
    pub mix_rate: f64,
    /// Norm of the isotropic perturbation added to a cluster direction before normalizing.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_noise() -> f64 {
    0.3
}

impl TaskSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        seed: u64,
        m: usize,
        n: usize,
        clusters: usize,
        r_true: usize,
        seq_len: usize,
        num_sequences: usize,
        mix_rate: f64,
    ) -> Self {
        Self { seed, m, n, clusters, r_true, seq_len, num_sequences, mix_rate, noise: default_noise() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Parameter(msg));
        if self.m == 0 || self.n == 0 || self.seq_len == 0 {
            return bad(format!("task needs positive m, n, L (got {}, {}, {})", self.m, self.n, self.seq_len));
        }
        if self.clusters == 0 || self.clusters > self.n {
            return bad(format!("cluster count must be in 1..={}, got {}", self.n, self.clusters));
        }
        if self.r_true == 0 || self.r_true > self.m.min(self.n) {
            return bad(format!("r_true must be in 1..={}, got {}", self.m.min(self.n), self.r_true));
        }
        if self.num_sequences < 2 {
            return bad("need at least 2 sequences (train and held-out)".into());
        }
        if !(0.0..=1.0).contains(&self.mix_rate) {
            return bad(format!("mix_rate must be in [0, 1], got {}", self.mix_rate));
        }
        if self.mix_rate > 0.0 && (self.clusters < 2 || self.seq_len < 2) {
            return bad("mixed sequences need at least 2 clusters and 2 tokens".into());
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return bad(format!("noise must be finite and non-negative, got {}", self.noise));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    /// `L × n`, unit-norm rows.
    pub tokens: Matrix,
    /// `L × m`
    pub targets: Matrix,
    /// Cluster of every token.
    pub clusters: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    pub w_frozen: Matrix,
    /// `Δ_c = P_c Q_c`, each of rank `r_true`.
    pub cluster_deltas: Vec<Matrix>,
    /// Orthonormal directions, one per cluster.
    pub cluster_directions: Vec<Vec<f64>>,
    pub sequences: Vec<Sequence>,
    /// Measured fraction of sequences whose tokens span two or more clusters.
    pub mix_rate: f64,
}

/// Index of the direction with the largest `|dᵀx|`, ties to the lowest index.
pub fn assign_cluster(directions: &[Vec<f64>], x: &[f64]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (c, d) in directions.iter().enumerate() {
        let v = crate::linalg::dot(d, x).abs();
        if v > best.1 {
            best = (c, v);
        }
    }
    best.0
}

fn orthonormal_directions(rng: &mut SeededRng, count: usize, n: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        for q in &out {
            let p = crate::linalg::dot(q, &v);
            v.iter_mut().zip(q).for_each(|(vi, qi)| *vi -= p * qi);
        }
        let norm = crate::linalg::dot(&v, &v).sqrt();
        if norm > 1e-6 {
            out.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    out
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let norm = crate::linalg::dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

pub fn make_task(spec: &TaskSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let TaskSpec { m, n, clusters, r_true, seq_len, .. } = *spec;
    let mut rng = SeededRng::stream(spec.seed, 20);
    let w_frozen: Matrix = rng.uniform_matrix(m, n, 1.0 / (n as f64).sqrt());
    let directions = orthonormal_directions(&mut rng, clusters, n);
    let mut deltas = Vec::with_capacity(clusters);
    for _ in 0..clusters {
        let p: Matrix = rng.normal_matrix(m, r_true, 1.0 / (r_true as f64).sqrt());
        let q: Matrix = rng.normal_matrix(r_true, n, 1.0);
        deltas.push(crate::linalg::matmul(&p, &q)?);
    }

    let noise_std = spec.noise / (n as f64).sqrt();
    let mut sequences = Vec::with_capacity(spec.num_sequences);
    let mut mixed = 0;
    for _ in 0..spec.num_sequences {
        let mut draw: Vec<usize> = if rng.bernoulli(spec.mix_rate) {
            let c1 = rng.index(clusters);
            let c2 = (c1 + 1 + rng.index(clusters - 1)) % clusters;
            let mut v: Vec<usize> = (0..seq_len).map(|t| if t % 2 == 0 { c1 } else { c2 }).collect();
            rng.shuffle(&mut v);
            v
        } else {
            vec![rng.index(clusters); seq_len]
        };
        let mut tokens = Matrix::zeros(seq_len, n);
        let mut targets = Matrix::zeros(seq_len, m);
        for (t, c) in draw.iter_mut().enumerate() {
            let x = unit(directions[*c].iter().map(|d| d + noise_std * rng.normal()).collect());
            *c = assign_cluster(&directions, &x);
            let y: Vec<f64> =
                w_frozen.matvec(&x)?.into_iter().zip(deltas[*c].matvec(&x)?).map(|(a, b)| a + b).collect();
            tokens.row_mut(t).copy_from_slice(&x);
            targets.row_mut(t).copy_from_slice(&y);
        }
        if draw.iter().any(|&c| c != draw[0]) {
            mixed += 1;
        }
        sequences.push(Sequence { tokens, targets, clusters: draw });
    }
    Ok(SyntheticTask {
        spec: spec.clone(),
        w_frozen,
        cluster_deltas: deltas,
        cluster_directions: directions,
        mix_rate: mixed as f64 / spec.num_sequences as f64,
        sequences,
    })
}

impl SyntheticTask {
    pub fn num_heldout(&self) -> usize {
        ((self.sequences.len() as f64 * HELDOUT_FRACTION).round() as usize).clamp(1, self.sequences.len() - 1)
    }

    /// Sequences used for training (the first 80%).
    pub fn train_split(&self) -> &[Sequence] {
        &self.sequences[..self.sequences.len() - self.num_heldout()]
    }

    /// Sequences never trained on (the last 20%).
    pub fn heldout_split(&self) -> &[Sequence] {
        &self.sequences[self.sequences.len() - self.num_heldout()..]
    }

    /// A fresh layer of the given shape around this task's frozen `W`.
    pub fn init_layer<T: Real>(&self, config: &LayerConfig, seed: u64) -> Result<AdapterLayer<T>> {
        if (config.m, config.n) != (self.spec.m, self.spec.n) {
            return Err(Error::shape(
                "init_layer",
                format!("layer is {}x{}, task is {}x{}", config.m, config.n, self.spec.m, self.spec.n),
            ));
        }
        init_layer_with_base(config, self.w_frozen.cast(), seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub steps: usize,
    /// Sequences per step.
    pub batch_size: usize,
    pub seed: u64,
    /// Weight of the load-balancing term `N·Σ_i f_i²`, `f_i` the mean routing weight of expert `i`.
    pub aux_loss_coef: f64,
    /// Held-out evaluation interval in steps.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Adam,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            steps: 2000,
            batch_size: 8,
            seed: 0,
            aux_loss_coef: 0.0,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning rate must be finite and non-negative, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive".into());
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch_size and eval_every must be positive".into());
        }
        if !(self.aux_loss_coef.is_finite() && self.aux_loss_coef >= 0.0) {
            return bad("aux_loss_coef must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// First and second moment estimates, one pair per trainable tensor.
#[derive(Clone, Debug)]
pub struct AdamState<T: Real = f64> {
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Matrix<T>>) -> Self {
        let m: Vec<Matrix<T>> = params.into_iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self { v: m.clone(), m, t: 0 }
    }
}

fn check_step_shapes<T: Real>(params: &[&mut Matrix<T>], grads: &[Matrix<T>]) -> Result<()> {
    if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.shape() != g.shape()) {
        return Err(Error::Contract("gradients do not match the parameter list".into()));
    }
    Ok(())
}

/// Adam with bias correction.
pub fn adam_step<T: Real>(
    params: &mut [&mut Matrix<T>],
    grads: &[Matrix<T>],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    check_step_shapes(params, grads)?;
    if state.m.len() != params.len()
        || params.iter().zip(&state.m).zip(&state.v).any(|((p, m), v)| p.shape() != m.shape() || p.shape() != v.shape())
    {
        return Err(Error::Contract("optimizer state does not match the parameter list".into()));
    }
    state.t += 1;
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let c1 = T::one() - T::from_f64(cfg.beta1.powi(state.t as i32));
    let c2 = T::one() - T::from_f64(cfg.beta2.powi(state.t as i32));
    let (lr, eps) = (T::from_f64(cfg.learning_rate), T::from_f64(cfg.epsilon));
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
        for (((pi, &gi), mi), vi) in it {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *pi -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Plain gradient descent.
pub fn sgd_step<T: Real>(params: &mut [&mut Matrix<T>], grads: &[Matrix<T>], cfg: &TrainConfig) -> Result<()> {
    check_step_shapes(params, grads)?;
    let lr = T::from_f64(cfg.learning_rate);
    for (p, g) in params.iter_mut().zip(grads) {
        p.add_scaled(-lr, g)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldoutPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub method: Method,
    /// Training MSE of the batch at each step, before that step's update.
    pub train_loss: Vec<f64>,
    /// Held-out MSE at step 0, every `eval_every` steps, and at the end.
    pub heldout: Vec<HeldoutPoint>,
    pub initial_heldout: f64,
    pub final_heldout: f64,
    /// Mean routing weight per expert over held-out tokens after training.
    pub routing_histogram: Vec<f64>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Record<'a> {
    Train { step: usize, loss: f64 },
    Heldout { step: usize, loss: f64 },
    Summary { method: Method, initial_heldout: f64, final_heldout: f64, routing_histogram: &'a [f64] },
}

impl LossCurve {
    /// One JSON object per line: train steps, held-out evaluations, then a summary.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |r: Record| {
            let _ = writeln!(out, "{}", serde_json::to_string(&r).expect("serializable"));
        };
        for (step, &loss) in self.train_loss.iter().enumerate() {
            push(Record::Train { step, loss });
        }
        for h in &self.heldout {
            push(Record::Heldout { step: h.step, loss: h.loss });
        }
        push(Record::Summary {
            method: self.method,
            initial_heldout: self.initial_heldout,
            final_heldout: self.final_heldout,
            routing_histogram: &self.routing_histogram,
        });
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

fn cast_split<T: Real>(seqs: &[Sequence]) -> Vec<(Matrix<T>, Matrix<T>)> {
    seqs.iter().map(|s| (s.tokens.cast(), s.targets.cast())).collect()
}

fn squared_error<T: Real>(h: &Matrix<T>, y: &Matrix<T>) -> f64 {
    h.data().iter().zip(y.data()).map(|(a, b)| (*a - *b).as_f64().powi(2)).sum()
}

/// Mean squared error of the layer over `seqs`.
pub fn mse<T: Real>(layer: &AdapterLayer<T>, seqs: &[Sequence]) -> Result<f64> {
    mse_cast(layer, &cast_split(seqs))
}

fn mse_cast<T: Real>(layer: &AdapterLayer<T>, seqs: &[(Matrix<T>, Matrix<T>)]) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for (x, y) in seqs {
        total += squared_error(&layer.apply(x)?, y);
        count += y.rows() * y.cols();
    }
    Ok(total / count as f64)
}

/// Mean routing weight per expert over all tokens of `seqs`.
pub fn routing_histogram<T: Real>(layer: &AdapterLayer<T>, seqs: &[Sequence]) -> Result<Vec<f64>> {
    let n_exp = layer.config.num_experts;
    let mut acc = vec![0.0; n_exp];
    let mut count = 0usize;
    for s in seqs {
        let g = layer.routing_weights(&s.tokens.cast())?;
        for t in 0..g.rows() {
            acc.iter_mut().zip(g.row(t)).for_each(|(a, v)| *a += v.as_f64());
        }
        count += g.rows();
    }
    Ok(acc.into_iter().map(|a| a / count as f64).collect())
}

/// Fraction of sequences whose tokens all share the same argmax expert
/// (ties to the lowest index).
pub fn dominant_expert_consistency<T: Real>(layer: &AdapterLayer<T>, seqs: &[Sequence]) -> Result<f64> {
    let mut consistent = 0;
    for s in seqs {
        let g = layer.routing_weights(&s.tokens.cast())?;
        let argmax = |t: usize| {
            let row = g.row(t);
            (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best })
        };
        let first = argmax(0);
        if (1..g.rows()).all(|t| argmax(t) == first) {
            consistent += 1;
        }
    }
    Ok(consistent as f64 / seqs.len() as f64)
}

/// Trains `layer` in place on the task's training split.
pub fn train<T: Real>(layer: &mut AdapterLayer<T>, task: &SyntheticTask, cfg: &TrainConfig) -> Result<LossCurve> {
    cfg.validate()?;
    layer.validate()?;
    if (layer.config.m, layer.config.n) != (task.spec.m, task.spec.n) {
        return Err(Error::shape(
            "train",
            format!("layer is {}x{}, task is {}x{}", layer.config.m, layer.config.n, task.spec.m, task.spec.n),
        ));
    }
    let train_set = cast_split::<T>(task.train_split());
    let heldout_set = cast_split::<T>(task.heldout_split());
    let n_exp = layer.config.num_experts;
    let use_aux = cfg.aux_loss_coef > 0.0 && layer.config.method != Method::Lora;

    let mut rng = SeededRng::stream(cfg.seed, 11);
    let mut order: Vec<usize> = Vec::new();
    let mut adam = AdamState::new(layer.trainable().into_iter().map(|(_, m)| m));

    let initial_heldout = mse_cast(layer, &heldout_set)?;
    let mut heldout = vec![HeldoutPoint { step: 0, loss: initial_heldout }];
    let mut train_loss = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| {
                if order.is_empty() {
                    order = (0..train_set.len()).collect();
                    rng.shuffle(&mut order);
                }
                order.pop().expect("non-empty")
            })
            .collect();
        let count: usize = batch.iter().map(|&i| train_set[i].1.rows() * task.spec.m).sum();
        let norm = T::from_f64(2.0 / count as f64);

        let mut passes = Vec::with_capacity(batch.len());
        let mut sq = 0.0;
        for &i in &batch {
            let (x, y) = &train_set[i];
            let (h, trace) = layer.forward(x)?;
            sq += squared_error(&h, y);
            passes.push((h, trace));
        }
        let loss = sq / count as f64;
        if !loss.is_finite() {
            return Err(Error::Training { step, loss });
        }
        train_loss.push(loss);

        // Load balancing: ∂/∂G_i(t) of coef·N·Σ f_i² is 2·coef·N·f_i / tokens.
        let route_grad_row = if use_aux {
            let tokens: usize = batch.iter().map(|&i| train_set[i].0.rows()).sum();
            let mut f = vec![0.0; n_exp];
            for (_, trace) in &passes {
                let g = trace.routing_weights(n_exp);
                for t in 0..g.rows() {
                    f.iter_mut().zip(g.row(t)).for_each(|(a, v)| *a += v.as_f64() / tokens as f64);
                }
            }
            let k = 2.0 * cfg.aux_loss_coef * n_exp as f64 / tokens as f64;
            Some(f.into_iter().map(|fi| T::from_f64(k * fi)).collect::<Vec<T>>())
        } else {
            None
        };

        let mut grads = layer.zero_grads();
        for (&i, (h, trace)) in batch.iter().zip(&passes) {
            let (x, y) = &train_set[i];
            let mut g = h.clone();
            g.data_mut().iter_mut().zip(y.data()).for_each(|(gi, yi)| *gi = (*gi - *yi) * norm);
            let (_, pg) = match &route_grad_row {
                Some(row) => {
                    let rg = Matrix::from_fn(x.rows(), n_exp, |_, j| row[j]);
                    layer_backward_with_routing(layer, x, &g, &rg, trace)?
                }
                None => layer_backward(layer, x, &g, trace)?,
            };
            grads.accumulate(&pg)?;
        }
        let grads: Vec<Matrix<T>> = grads.entries.into_iter().map(|(_, m)| m).collect();
        let mut params = layer.trainable_mut();
        match cfg.optimizer {
            Optimizer::Adam => adam_step(&mut params, &grads, &mut adam, cfg)?,
            Optimizer::Sgd => sgd_step(&mut params, &grads, cfg)?,
        }

        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            let loss = mse_cast(layer, &heldout_set)?;
            if !loss.is_finite() {
                return Err(Error::Training { step: done, loss });
            }
            heldout.push(HeldoutPoint { step: done, loss });
        }
    }

    Ok(LossCurve {
        method: layer.config.method,
        train_loss,
        final_heldout: heldout.last().expect("initial point").loss,
        initial_heldout,
        heldout,
        routing_histogram: routing_histogram(layer, task.heldout_split())?,
    })
}

/// Layer shape used by an experiment preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerShape {
    pub r: usize,
    pub num_experts: usize,
    #[serde(default)]
    pub top_k: Option<usize>,
}

impl LayerShape {
    pub fn config(&self, method: Method, m: usize, n: usize) -> LayerConfig {
        let c = LayerConfig::new(method, m, n, self.r, self.num_experts);
        match self.top_k {
            Some(k) if method == Method::MoeSparse => c.with_top_k(k),
            _ => c,
        }
    }
}

/// Every method should fit a single-cluster task almost exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnabilityPreset {
    pub task: TaskSpec,
    pub layer: LayerShape,
    /// Pass when `final_heldout < max_ratio · initial_heldout`.
    pub max_ratio: f64,
    /// `final / initial` held-out ratios from the reference run, per method.
    pub oracle_ratios: Vec<(Method, f64)>,
}

/// Token-level CoMoL against instance-level SMEAR at a matched budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationGapPreset {
    pub task: TaskSpec,
    pub comol: LayerShape,
    /// Most experts SMEAR may use while matching CoMoL's budget.
    pub smear_max_experts: usize,
    pub budget_tolerance: f64,
    pub seeds: Vec<u64>,
    pub min_wins: usize,
    /// `(seed, comol, smear)` final held-out losses from the reference run.
    pub oracle_losses: Vec<(u64, f64, f64)>,
}

/// Training defaults and experiment presets frozen after the reference run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldenConfig {
    pub train: TrainConfig,
    pub learnability: LearnabilityPreset,
    pub adaptation_gap: AdaptationGapPreset,
}

impl GoldenConfig {
    pub fn bundled() -> Self {
        serde_json::from_str(include_str!("../golden/synthtrain.json")).expect("bundled golden config parses")
    }
}

/// Trains one method on the learnability task; returns the curve.
pub fn learnability_run(preset: &LearnabilityPreset, method: Method, cfg: &TrainConfig) -> Result<LossCurve> {
    let task = make_task(&preset.task)?;
    let config = preset.layer.config(method, preset.task.m, preset.task.n);
    let mut layer: AdapterLayer = task.init_layer(&config, cfg.seed)?;
    train(&mut layer, &task, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapOutcome {
    pub seed: u64,
    pub comol_config: LayerConfig,
    pub smear_config: LayerConfig,
    pub comol_params: usize,
    pub smear_params: usize,
    pub comol_heldout: f64,
    pub smear_heldout: f64,
}

impl GapOutcome {
    pub fn comol_wins(&self) -> bool {
        self.comol_heldout < self.smear_heldout
    }
}

/// The SMEAR shape whose budget matches the preset's CoMoL layer.
pub fn matched_smear(preset: &AdaptationGapPreset) -> Result<(LayerConfig, LayerConfig)> {
    let (m, n) = (preset.task.m, preset.task.n);
    let comol = preset.comol.config(Method::Comol, m, n);
    let budget = crate::accounting::count_params(&crate::accounting::CostConfig::from_layer(&comol, 1)).total;
    let (e, r) = match_budget(Method::Smear, m as u64, n as u64, preset.smear_max_experts as u64, budget, preset.budget_tolerance)
        .ok_or_else(|| Error::Config(format!("no SMEAR shape within {} of {budget} parameters", preset.budget_tolerance)))?;
    Ok((comol, LayerConfig::new(Method::Smear, m, n, r as usize, e as usize)))
}

/// One paired seed: same task and init seed for both methods.
pub fn adaptation_gap_run(preset: &AdaptationGapPreset, seed: u64, cfg: &TrainConfig) -> Result<GapOutcome> {
    let (comol_config, smear_config) = matched_smear(preset)?;
    let task = make_task(&TaskSpec { seed, ..preset.task.clone() })?;
    let cfg = TrainConfig { seed, ..cfg.clone() };
    let mut comol: AdapterLayer = task.init_layer(&comol_config, seed)?;
    let mut smear: AdapterLayer = task.init_layer(&smear_config, seed)?;
    let comol_heldout = train(&mut comol, &task, &cfg)?.final_heldout;
    let smear_heldout = train(&mut smear, &task, &cfg)?.final_heldout;
    Ok(GapOutcome {
        seed,
        comol_params: comol.num_trainable(),
        smear_params: smear.num_trainable(),
        comol_config,
        smear_config,
        comol_heldout,
        smear_heldout,
    })
}
