//! Federated multi-area mapping.
//!
//! Each global round broadcasts the current parameters, lets every area run
//! `β` local gradient steps on its own shard, uploads the results and
//! aggregates them, either by plain averaging of the local models or by the
//! gated adaptive rule
//!
//! ```text
//! ω_t(m) = ε ω_{t−1}(m) + (1 − ε) Δ_t(m)²
//! θ_{t+1} = θ_t + η Σ_m α_m Δ_t(m) / (√ω_t(m) + μ)
//! ```
//!
//! where `Δ_t(m)` is the area-averaged contribution of loss term `m` to the
//! local updates. Transport is simulated; the [`CostLedger`] counts 8 bytes
//! per parameter plus a fixed header per message.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::nn::ParamVector;
use crate::numerics::{norm_sq, RngStream};

/// Per-message framing overhead in bytes.
pub const HEADER_BYTES: u64 = 64;
/// Bytes per transmitted parameter.
pub const BYTES_PER_PARAM: u64 = 8;

/// A federated training problem: `areas()` local objectives over a shared
/// parameter vector, each a sum of `terms()` loss terms.
pub trait Objective: Sync {
    fn dim(&self) -> usize;

    fn areas(&self) -> usize;

    fn terms(&self) -> usize {
        1
    }

    /// Loss and gradient on one stochastic batch of `area`.
    fn local_grad(&self, area: usize, params: &[f64], rng: &mut RngStream) -> Result<(f64, Vec<f64>)>;

    /// Per-term losses and gradients on one stochastic batch. Must draw the
    /// same batch as [`Objective::local_grad`] for the same `rng` state.
    fn local_term_grads(&self, area: usize, params: &[f64], rng: &mut RngStream) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let (l, g) = self.local_grad(area, params, rng)?;
        Ok((vec![l], vec![g]))
    }

    /// Deterministic full-shard loss and gradient of `area`.
    fn area_grad(&self, area: usize, params: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Loss and gradient on the fixed held-out probe set.
    fn probe_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Gated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedConfig {
    pub rounds: usize,
    pub local_steps: usize,
    pub local_lr: f64,
    pub global_lr: f64,
    pub epsilon: f64,
    pub mu: f64,
    /// Mixture weights over loss terms; uniform when absent.
    pub alpha: Option<Vec<f64>>,
    pub aggregation: Aggregation,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            rounds: 60,
            local_steps: 5,
            local_lr: 0.05,
            global_lr: 0.01,
            epsilon: 0.9,
            mu: 0.1,
            alpha: None,
            aggregation: Aggregation::Mean,
        }
    }
}

impl FedConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.local_lr > 0.0 && self.local_lr.is_finite()) {
            out.push("fed.local_lr must be positive".to_string());
        }
        if !(self.global_lr > 0.0 && self.global_lr.is_finite()) {
            out.push("fed.global_lr must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            out.push("fed.epsilon must lie in [0, 1]".to_string());
        }
        if !(self.mu > 0.0) {
            out.push("fed.mu must be positive".to_string());
        }
        if let Some(alpha) = &self.alpha {
            if alpha.iter().any(|&a| !(a >= 0.0)) {
                out.push("fed.alpha entries must be non-negative".to_string());
            }
            let total: f64 = alpha.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                out.push(format!("fed.alpha must sum to 1 (sums to {total})"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    pub fn mixture(&self, terms: usize) -> Result<Vec<f64>> {
        match &self.alpha {
            Some(a) if a.len() != terms => Err(Error::Config(format!(
                "fed.alpha has {} weights for {terms} loss terms",
                a.len()
            ))),
            Some(a) => Ok(a.clone()),
            None => Ok(vec![1.0 / terms as f64; terms]),
        }
    }
}

/// Result of one area's local training.
#[derive(Debug, Clone)]
pub struct LocalOutcome {
    /// Local model after training (`θ_i`).
    pub params: ParamVector,
    /// `θ_after − θ_before`.
    pub delta: ParamVector,
    /// Per-term contributions `−η_l Σ_k g_k(m)`, when requested.
    pub term_deltas: Option<Vec<ParamVector>>,
    /// Batch loss before each step.
    pub losses: Vec<f64>,
}

/// Runs `steps` gradient steps on `area` starting from `global`.
pub fn local_train(
    obj: &dyn Objective,
    area: usize,
    global: &ParamVector,
    steps: usize,
    lr: f64,
    rng: &mut RngStream,
    track_terms: bool,
    round: usize,
) -> Result<LocalOutcome> {
    if global.len() != obj.dim() {
        return Err(Error::shape("global parameters", obj.dim(), global.len()));
    }
    let mut theta = global.as_slice().to_vec();
    let mut losses = Vec::with_capacity(steps);
    let mut term_deltas = track_terms.then(|| vec![vec![0.0; theta.len()]; obj.terms()]);
    for step in 0..steps {
        let diverged = |loss: f64| Error::Divergence {
            round,
            area,
            step,
            loss,
        };
        let (loss, grad) = match term_deltas.as_mut() {
            None => obj.local_grad(area, &theta, rng)?,
            Some(acc) => {
                let (ls, gs) = obj.local_term_grads(area, &theta, rng)?;
                let mut total = vec![0.0; theta.len()];
                for (a, g) in acc.iter_mut().zip(&gs) {
                    for ((ai, ti), &gi) in a.iter_mut().zip(total.iter_mut()).zip(g) {
                        *ai -= lr * gi;
                        *ti += gi;
                    }
                }
                (ls.iter().sum(), total)
            }
        };
        if !loss.is_finite() {
            return Err(diverged(loss));
        }
        for (t, g) in theta.iter_mut().zip(&grad) {
            *t -= lr * g;
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(diverged(loss));
        }
        losses.push(loss);
    }
    let delta = theta.iter().zip(global.as_slice()).map(|(a, b)| a - b).collect();
    Ok(LocalOutcome {
        params: ParamVector::new(theta),
        delta: ParamVector::new(delta),
        term_deltas: term_deltas.map(|v| v.into_iter().map(ParamVector::new).collect()),
        losses,
    })
}

/// Coordinate-wise mean in fixed order, computed as a running mean so that
/// identical inputs reproduce themselves exactly.
pub fn aggregate_mean(models: &[ParamVector]) -> Result<ParamVector> {
    let Some(first) = models.first() else {
        return Err(Error::InvalidInput("aggregation needs at least one model".into()));
    };
    let mut mean = first.as_slice().to_vec();
    for (k, m) in models.iter().enumerate().skip(1) {
        if m.len() != mean.len() {
            return Err(Error::shape("aggregated model", mean.len(), m.len()));
        }
        let n = (k + 1) as f64;
        for (acc, &v) in mean.iter_mut().zip(m.as_slice()) {
            *acc += (v - *acc) / n;
        }
    }
    Ok(ParamVector::new(mean))
}

/// Per-term second-moment accumulators of the gated rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatorState {
    pub omega: Vec<ParamVector>,
    pub round: usize,
}

impl AggregatorState {
    /// Zero history.
    pub fn new(terms: usize, dim: usize) -> Self {
        Self {
            omega: vec![ParamVector::zeros(dim); terms],
            round: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatedParams {
    pub global_lr: f64,
    pub epsilon: f64,
    pub mu: f64,
    pub alpha: Vec<f64>,
}

impl GatedParams {
    pub fn from_config(cfg: &FedConfig, terms: usize) -> Result<Self> {
        Ok(Self {
            global_lr: cfg.global_lr,
            epsilon: cfg.epsilon,
            mu: cfg.mu,
            alpha: cfg.mixture(terms)?,
        })
    }
}

/// One gated server update; returns the parameter delta and the new state.
pub fn gated_adaptive_step(
    state: &AggregatorState,
    deltas: &[ParamVector],
    p: &GatedParams,
) -> Result<(ParamVector, AggregatorState)> {
    if !(p.mu > 0.0) {
        return Err(Error::Config(format!("mu must be positive, got {}", p.mu)));
    }
    if !(0.0..=1.0).contains(&p.epsilon) {
        return Err(Error::Config(format!("epsilon must lie in [0, 1], got {}", p.epsilon)));
    }
    if deltas.len() != state.omega.len() || p.alpha.len() != deltas.len() {
        return Err(Error::shape("gated terms", state.omega.len(), deltas.len()));
    }
    let dim = state.omega.first().map_or(0, ParamVector::len);
    let mut step = vec![0.0; dim];
    let mut omega = Vec::with_capacity(deltas.len());
    for ((prev, delta), &alpha) in state.omega.iter().zip(deltas).zip(&p.alpha) {
        if delta.len() != dim || prev.len() != dim {
            return Err(Error::shape("gated delta", dim, delta.len()));
        }
        let mut next = Vec::with_capacity(dim);
        for ((s, &w), &d) in step.iter_mut().zip(prev.as_slice()).zip(delta.as_slice()) {
            let w_t = p.epsilon * w + (1.0 - p.epsilon) * d * d;
            *s += alpha * d / (w_t.sqrt() + p.mu);
            next.push(w_t);
        }
        omega.push(ParamVector::new(next));
    }
    step.iter_mut().for_each(|s| *s *= p.global_lr);
    Ok((
        ParamVector::new(step),
        AggregatorState {
            omega,
            round: state.round + 1,
        },
    ))
}

/// Admissible local learning rate for the gated scheme:
/// `η_l ≤ 1/(16β) · min{(μ/(120 G L²))^{1/3}, μ/(4G + 2ηL)}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSizeBound {
    pub bound: f64,
    pub cubic_term: f64,
    pub linear_term: f64,
}

impl StepSizeBound {
    pub fn admits(&self, local_lr: f64) -> bool {
        local_lr <= self.bound
    }
}

pub fn check_step_size(g: f64, l: f64, mu: f64, beta: f64, eta: f64) -> Result<StepSizeBound> {
    for (name, v) in [("G", g), ("L", l), ("mu", mu), ("beta", beta), ("eta", eta)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::Config(format!("{name} must be a positive finite number, got {v}")));
        }
    }
    let cubic_term = (mu / (120.0 * g * l * l)).cbrt();
    let linear_term = mu / (4.0 * g + 2.0 * eta * l);
    let bound = cubic_term.min(linear_term) / (16.0 * beta);
    Ok(StepSizeBound {
        bound,
        cubic_term,
        linear_term,
    })
}

/// Empirical smoothness, gradient-bound and variance estimates. All are
/// lower bounds on the true constants over the sampled region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub g_hat: f64,
    pub l_hat: f64,
    /// Per coordinate, local (batch) variance `γ_{l,j}²`.
    pub local_var: Vec<f64>,
    /// Per coordinate, cross-area variance `γ_{g,j}²`.
    pub global_var: Vec<f64>,
}

impl Constants {
    /// `γ² = Σ_j (γ_{l,j}² + 6β γ_{g,j}²)`.
    pub fn gamma_sq(&self, beta: usize) -> f64 {
        self.local_var
            .iter()
            .zip(&self.global_var)
            .map(|(l, g)| l + 6.0 * beta as f64 * g)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateConfig {
    /// Sample points around the center (≥ 2).
    pub samples: usize,
    /// Half-width of the uniform box the points are drawn from.
    pub radius: f64,
    /// Stochastic batches per point and area for the local variance.
    pub batches: usize,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            samples: 6,
            radius: 0.05,
            batches: 4,
        }
    }
}

pub fn estimate_constants(
    obj: &dyn Objective,
    center: &ParamVector,
    cfg: EstimateConfig,
    rng: &mut RngStream,
) -> Result<Constants> {
    if cfg.samples < 2 {
        return Err(Error::Estimation("at least two sample points are required".into()));
    }
    let dim = obj.dim();
    if center.len() != dim {
        return Err(Error::shape("estimation center", dim, center.len()));
    }
    let n = obj.areas();
    let points: Vec<Vec<f64>> = (0..cfg.samples)
        .map(|k| {
            if k == 0 {
                center.as_slice().to_vec()
            } else {
                center.as_slice().iter().map(|&c| c + rng.uniform(-cfg.radius, cfg.radius)).collect()
            }
        })
        .collect();

    let mut g_hat = 0.0f64;
    let mut local_var = vec![0.0f64; dim];
    let mut global_var = vec![0.0f64; dim];
    // full[k][i] = ∇F_i(x_k)
    let mut full: Vec<Vec<Vec<f64>>> = Vec::with_capacity(points.len());
    for x in &points {
        let mut per_area = Vec::with_capacity(n);
        for area in 0..n {
            let (_, g) = obj.area_grad(area, x)?;
            g_hat = g.iter().fold(g_hat, |m, v| m.max(v.abs()));
            let mut var = vec![0.0f64; dim];
            for _ in 0..cfg.batches {
                let (_, s) = obj.local_grad(area, x, rng)?;
                g_hat = s.iter().fold(g_hat, |m, v| m.max(v.abs()));
                for ((acc, si), gi) in var.iter_mut().zip(&s).zip(&g) {
                    *acc += (si - gi) * (si - gi);
                }
            }
            if cfg.batches > 0 {
                for (lv, v) in local_var.iter_mut().zip(&var) {
                    *lv = lv.max(*v / cfg.batches as f64);
                }
            }
            per_area.push(g);
        }
        let mean = aggregate_mean(&per_area.iter().cloned().map(ParamVector::new).collect::<Vec<_>>())?;
        for j in 0..dim {
            let spread: f64 = per_area
                .iter()
                .map(|g| (g[j] - mean.as_slice()[j]).powi(2))
                .sum::<f64>()
                / n as f64;
            global_var[j] = global_var[j].max(spread);
        }
        full.push(per_area);
    }

    let mut l_hat: Option<f64> = None;
    for a in 0..points.len() {
        for b in a + 1..points.len() {
            let dx: f64 = points[a].iter().zip(&points[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            if dx == 0.0 {
                continue;
            }
            for area in 0..n {
                let dg: f64 = full[a][area]
                    .iter()
                    .zip(&full[b][area])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let ratio = dg / dx;
                l_hat = Some(l_hat.map_or(ratio, |m| m.max(ratio)));
            }
        }
    }
    let l_hat = l_hat.ok_or_else(|| Error::Estimation("all sample pairs coincide".into()))?;
    Ok(Constants {
        g_hat,
        l_hat,
        local_var,
        global_var,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LedgerMode {
    Federated,
    Centralized,
}

/// Cumulative communication and compute accounting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub mode: LedgerMode,
    pub upload_bytes: u64,
    pub download_bytes: u64,
    pub messages: u64,
    pub local_steps: u64,
    pub server_steps: u64,
}

impl CostLedger {
    pub fn new(mode: LedgerMode) -> Self {
        Self {
            mode,
            upload_bytes: 0,
            download_bytes: 0,
            messages: 0,
            local_steps: 0,
            server_steps: 0,
        }
    }

    pub fn total_bytes(&self) -> u64 {
        self.upload_bytes + self.download_bytes
    }

    pub fn record_upload(&mut self, payload_values: u64) {
        self.upload_bytes += payload_values * BYTES_PER_PARAM + HEADER_BYTES;
        self.messages += 1;
    }

    pub fn record_download(&mut self, payload_values: u64) {
        self.download_bytes += payload_values * BYTES_PER_PARAM + HEADER_BYTES;
        self.messages += 1;
    }
}

/// Closed-form ledgers for a federated run and its centralized counterpart.
///
/// Federated: every round each area downloads the model and uploads
/// `upload_vectors` parameter vectors (1 for mean, one per loss term for
/// gated). Centralized: every non-empty area ships its raw samples once and
/// the server returns one model; the server then takes `β·T` steps.
pub fn cost_compare(
    cfg: &FedConfig,
    areas: usize,
    param_count: usize,
    upload_vectors: usize,
    area_raw_values: &[u64],
) -> (CostLedger, CostLedger) {
    let (t, n, p) = (cfg.rounds as u64, areas as u64, param_count as u64);
    let mut fed = CostLedger::new(LedgerMode::Federated);
    if t > 0 && n > 0 {
        let msgs_down = t * n;
        let msgs_up = t * n * upload_vectors as u64;
        fed.download_bytes = msgs_down * (p * BYTES_PER_PARAM + HEADER_BYTES);
        fed.upload_bytes = msgs_up * (p * BYTES_PER_PARAM + HEADER_BYTES);
        fed.messages = msgs_down + msgs_up;
        fed.local_steps = t * n * cfg.local_steps as u64;
        fed.server_steps = t;
    }
    let mut central = CostLedger::new(LedgerMode::Centralized);
    for &values in area_raw_values.iter().filter(|&&v| v > 0) {
        central.record_upload(values);
    }
    central.record_download(p);
    central.server_steps = t * cfg.local_steps as u64;
    (fed, central)
}

/// One global round as seen from the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Mean batch loss over each area's local steps; `None` when `β = 0`.
    pub area_losses: Vec<Option<f64>>,
    /// Probe loss at `θ_t`.
    pub global_loss: f64,
    /// `‖∇f(θ_t)‖²` on the probe set.
    pub grad_norm_sq: f64,
    pub upload_bytes: u64,
    pub download_bytes: u64,
    pub wall_ms: f64,
}

impl RoundRecord {
    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        let bits = |v: &[Option<f64>]| v.iter().map(|x| x.map(f64::to_bits)).collect::<Vec<_>>();
        self.round == other.round
            && bits(&self.area_losses) == bits(&other.area_losses)
            && self.global_loss.to_bits() == other.global_loss.to_bits()
            && self.grad_norm_sq.to_bits() == other.grad_norm_sq.to_bits()
            && self.upload_bytes == other.upload_bytes
            && self.download_bytes == other.download_bytes
    }
}

#[derive(Debug, Clone)]
pub struct MappingOutcome {
    pub params: ParamVector,
    pub history: Vec<RoundRecord>,
    pub ledger: CostLedger,
    /// Probe loss and squared gradient norm at the returned parameters.
    pub final_loss: f64,
    pub final_grad_norm_sq: f64,
}

/// Runs `cfg.rounds` global rounds from `init`. Area `i` draws its batches
/// from `RngStream::new(seed).fork(i)`, one stream for the whole run.
pub fn run_mapping(
    cfg: &FedConfig,
    obj: &dyn Objective,
    init: &ParamVector,
    seed: u64,
    exec: Execution,
) -> Result<MappingOutcome> {
    cfg.validate()?;
    let n = obj.areas();
    if n == 0 {
        return Err(Error::Data("objective has no areas".into()));
    }
    if init.len() != obj.dim() {
        return Err(Error::shape("initial parameters", obj.dim(), init.len()));
    }
    let gated = cfg.aggregation == Aggregation::Gated;
    let gparams = if gated {
        Some(GatedParams::from_config(cfg, obj.terms())?)
    } else {
        None
    };
    let master = RngStream::new(seed);
    let mut streams: Vec<RngStream> = (0..n).map(|i| master.fork(i as u64)).collect();
    let mut state = AggregatorState::new(obj.terms(), obj.dim());
    let mut theta = init.clone();
    let mut ledger = CostLedger::new(LedgerMode::Federated);
    let mut history = Vec::with_capacity(cfg.rounds);
    let p = obj.dim() as u64;
    let uploads_per_area = if gated { obj.terms() as u64 } else { 1 };

    for round in 0..cfg.rounds {
        let started = Instant::now();
        let (global_loss, probe) = obj.probe_grad(theta.as_slice())?;
        let grad_norm_sq = norm_sq(&probe);

        let results = exec.map(n, |area| {
            let mut rng = streams[area].clone();
            let out = local_train(obj, area, &theta, cfg.local_steps, cfg.local_lr, &mut rng, gated, round);
            (out, rng)
        });
        let mut outcomes = Vec::with_capacity(n);
        for (area, (out, rng)) in results.into_iter().enumerate() {
            streams[area] = rng;
            outcomes.push(out?);
        }

        let (up_before, down_before) = (ledger.upload_bytes, ledger.download_bytes);
        for _ in 0..n {
            ledger.record_download(p);
            for _ in 0..uploads_per_area {
                ledger.record_upload(p);
            }
        }
        ledger.local_steps += (n * cfg.local_steps) as u64;
        ledger.server_steps += 1;

        theta = match &gparams {
            None => {
                let models: Vec<ParamVector> = outcomes.iter().map(|o| o.params.clone()).collect();
                aggregate_mean(&models)?
            }
            Some(gp) => {
                let terms = obj.terms();
                let per_term: Vec<ParamVector> = (0..terms)
                    .map(|m| {
                        let parts: Vec<ParamVector> = outcomes
                            .iter()
                            .map(|o| o.term_deltas.as_ref().expect("tracked")[m].clone())
                            .collect();
                        aggregate_mean(&parts)
                    })
                    .collect::<Result<_>>()?;
                let (step, next) = gated_adaptive_step(&state, &per_term, gp)?;
                state = next;
                let mut t = theta.into_inner();
                for (ti, si) in t.iter_mut().zip(step.as_slice()) {
                    *ti += si;
                }
                if let Some(j) = t.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Divergence {
                        round,
                        area: 0,
                        step: cfg.local_steps,
                        loss: t[j],
                    });
                }
                ParamVector::new(t)
            }
        };

        history.push(RoundRecord {
            round,
            area_losses: outcomes
                .iter()
                .map(|o| (!o.losses.is_empty()).then(|| o.losses.iter().sum::<f64>() / o.losses.len() as f64))
                .collect(),
            global_loss,
            grad_norm_sq,
            upload_bytes: ledger.upload_bytes - up_before,
            download_bytes: ledger.download_bytes - down_before,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    let (final_loss, g) = obj.probe_grad(theta.as_slice())?;
    Ok(MappingOutcome {
        params: theta,
        history,
        ledger,
        final_loss,
        final_grad_norm_sq: norm_sq(&g),
    })
}

/// `steps` plain gradient steps on one area with its own stream; the
/// centralized counterpart of a single-area federated run.
pub fn train_centralized(
    obj: &dyn Objective,
    area: usize,
    init: &ParamVector,
    steps: usize,
    lr: f64,
    rng: &mut RngStream,
) -> Result<ParamVector> {
    Ok(local_train(obj, area, init, steps, lr, rng, false, 0)?.params)
}

/// Trend summary of the recorded probe gradient norms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub initial: f64,
    pub running_min: Vec<f64>,
    pub min: f64,
    pub final_value: f64,
    /// First round whose running minimum is below `fraction · initial`.
    pub reached_at: Option<usize>,
    pub fraction: f64,
}

impl ConvergenceReport {
    pub fn from_history(history: &[RoundRecord], final_grad_norm_sq: Option<f64>, fraction: f64) -> Option<Self> {
        let mut values: Vec<f64> = history.iter().map(|r| r.grad_norm_sq).collect();
        values.extend(final_grad_norm_sq);
        let initial = *values.first()?;
        let mut running_min = Vec::with_capacity(values.len());
        let mut m = f64::INFINITY;
        for &v in &values {
            if v < m {
                m = v;
            }
            running_min.push(m);
        }
        let reached_at = running_min.iter().position(|&v| v < fraction * initial);
        Some(Self {
            initial,
            min: m,
            final_value: *values.last().unwrap(),
            running_min,
            reached_at,
            fraction,
        })
    }

    pub fn converged(&self) -> bool {
        self.reached_at.is_some()
    }

    /// Neither a decrease below the threshold nor a finite final value.
    pub fn failed(&self) -> bool {
        !self.converged() || !self.final_value.is_finite()
    }
}
