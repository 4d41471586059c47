//! Evaluation harness: sample-distribution distance, diagnostic probes
//! (gradient starvation, tape memory, finite-difference convergence), and
//! the multi-seed ablation suite.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Tape, Tensor};
use crate::network::{Activation, Architecture, NetError, VelocityNet};
use crate::objective::{
    cosine_angle_gradient, directional_gradient_probe, mse_angle_gradient, target_velocity,
    total_loss, DerivativeMode, FlowBatch, ObjectiveConfig, ObjectiveError,
};
use crate::par;
use crate::rng::StreamRng;
use crate::tasks::{generate, TaskError, TaskSpec};
use crate::trainer::{train, MetricRecord, TrainConfig, TrainError, TrainRun};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid eval argument: {0}")]
    InvalidArg(String),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

// ---------------------------------------------------------------------------
// Maximum mean discrepancy
// ---------------------------------------------------------------------------

/// Unbiased Gaussian-kernel MMD^2 with the median-heuristic bandwidth;
/// see [`mmd2_with_bandwidth`].
pub fn mmd2(x: &Tensor, y: &Tensor) -> Result<f64, AdError> {
    mmd2_with_bandwidth(x, y, None)
}

/// Clamps an unbiased MMD^2 estimate for report fields, which are defined
/// as non-negative. Raw (possibly slightly negative) values stay in the
/// metric logs so exact-reproduction checks compare the estimator itself.
pub fn mmd2_reported(value: f64) -> f64 {
    value.max(0.0)
}

/// Unbiased Gaussian-kernel MMD^2 between two sample sets `[n, d]` and
/// `[m, d]`. The kernel is `exp(-||a - b||^2 / bw2)`. With `bandwidth:
/// None`, `bw2` is the median of all pooled pairwise squared distances
/// (median heuristic); if that median is zero (degenerate data) it falls
/// back to 1. `Some(bw2)` fixes the squared-distance scale directly. The
/// unbiased estimator may be slightly negative for matching distributions;
/// the value is returned as computed (see [`mmd2_reported`]).
pub fn mmd2_with_bandwidth(x: &Tensor, y: &Tensor, bandwidth: Option<f64>) -> Result<f64, AdError> {
    let (n, d) = x.dims2("mmd2")?;
    let (m, dy) = y.dims2("mmd2")?;
    if d != dy {
        return Err(AdError::InvalidArg {
            op: "mmd2",
            msg: format!("dimension mismatch: {d} vs {dy}"),
        });
    }
    if n < 2 || m < 2 {
        return Err(AdError::InvalidArg {
            op: "mmd2",
            msg: format!("unbiased MMD needs at least 2 samples per side, got {n} and {m}"),
        });
    }

    let sq = |a: &[f64], b: &[f64]| -> f64 {
        let mut s = 0.0;
        for k in 0..d {
            let diff = a[k] - b[k];
            s += diff * diff;
        }
        s
    };

    let bw2 = match bandwidth {
        Some(b) => {
            if !(b > 0.0) || !b.is_finite() {
                return Err(AdError::InvalidArg {
                    op: "mmd2",
                    msg: format!("bandwidth must be positive and finite, got {b}"),
                });
            }
            b
        }
        None => {
            // Median heuristic over the pooled set.
            let total = n + m;
            let row = |i: usize| -> &[f64] {
                if i < n {
                    x.row(i)
                } else {
                    y.row(i - n)
                }
            };
            let mut dists = Vec::with_capacity(total * (total - 1) / 2);
            for i in 0..total {
                for j in (i + 1)..total {
                    dists.push(sq(row(i), row(j)));
                }
            }
            dists.sort_by(f64::total_cmp);
            let mid = dists.len() / 2;
            let median = if dists.len() % 2 == 1 {
                dists[mid]
            } else {
                0.5 * (dists[mid - 1] + dists[mid])
            };
            if median > 0.0 {
                median
            } else {
                1.0
            }
        }
    };

    // Deterministic parallel reductions: one partial per left-hand row.
    let kxx = par::sum_indexed(n, |i| {
        let mut s = 0.0;
        for j in (i + 1)..n {
            s += (-sq(x.row(i), x.row(j)) / bw2).exp();
        }
        s
    });
    let kyy = par::sum_indexed(m, |i| {
        let mut s = 0.0;
        for j in (i + 1)..m {
            s += (-sq(y.row(i), y.row(j)) / bw2).exp();
        }
        s
    });
    let kxy = par::sum_indexed(n, |i| {
        let mut s = 0.0;
        for j in 0..m {
            s += (-sq(x.row(i), y.row(j)) / bw2).exp();
        }
        s
    });

    let nf = n as f64;
    let mf = m as f64;
    Ok(2.0 * kxx / (nf * (nf - 1.0)) + 2.0 * kyy / (mf * (mf - 1.0)) - 2.0 * kxy / (nf * mf))
}

// ---------------------------------------------------------------------------
// Small numeric helpers
// ---------------------------------------------------------------------------

/// `n` evenly spaced values with exact endpoints.
pub fn lin_space(a: f64, b: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2, "lin_space needs at least two points");
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        out.push(a + (b - a) * k as f64 / (n - 1) as f64);
    }
    out[0] = a;
    out[n - 1] = b;
    out
}

/// `n` geometrically spaced values with exact endpoints (both must be
/// positive).
pub fn log_space(a: f64, b: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2 && a > 0.0 && b > 0.0, "log_space needs positive endpoints");
    let (la, lb) = (a.ln(), b.ln());
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        out.push((la + (lb - la) * k as f64 / (n - 1) as f64).exp());
    }
    out[0] = a;
    out[n - 1] = b;
    out
}

/// Mean of the `k` largest values (all of them if fewer).
pub fn top_k_mean(xs: &[f64], k: usize) -> f64 {
    assert!(!xs.is_empty() && k > 0, "top_k_mean needs data");
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| f64::total_cmp(b, a));
    let k = k.min(sorted.len());
    sorted[..k].iter().sum::<f64>() / k as f64
}

/// Sample mean and standard deviation (ddof = 1; zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    assert!(!xs.is_empty());
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

// ---------------------------------------------------------------------------
// Gradient starvation probe
// ---------------------------------------------------------------------------

/// One probe point: numeric angle-gradients of the real loss kernels next to
/// the closed forms `2 rho rho* sin(alpha)` and `sin(alpha)/(1+cos(alpha))`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StarvationPoint {
    pub alpha: f64,
    pub rho: f64,
    pub rho_star: f64,
    pub numeric_mse: f64,
    pub analytic_mse: f64,
    pub numeric_cos: f64,
    pub analytic_cos: f64,
}

/// Numeric/analytic starvation table over an `(alpha, rho_star)` grid at
/// fixed prediction magnitude `rho`.
pub fn starvation_grid(
    rho: f64,
    alphas: &[f64],
    rho_stars: &[f64],
    norm_floor: f64,
    h: f64,
) -> Result<Vec<StarvationPoint>, EvalError> {
    if alphas.is_empty() || rho_stars.is_empty() {
        return Err(EvalError::InvalidArg("empty starvation grid".into()));
    }
    let mut out = Vec::with_capacity(alphas.len() * rho_stars.len());
    for &alpha in alphas {
        for &rho_star in rho_stars {
            let g = directional_gradient_probe(rho, rho_star, alpha, norm_floor, h)?;
            out.push(StarvationPoint {
                alpha,
                rho,
                rho_star,
                numeric_mse: g.d_mse_d_alpha,
                analytic_mse: mse_angle_gradient(rho, rho_star, alpha),
                numeric_cos: g.d_cos_d_alpha,
                analytic_cos: cosine_angle_gradient(alpha),
            });
        }
    }
    Ok(out)
}

/// Default grids: ten angles covering (0, pi) and containing pi/2 exactly,
/// ten magnitudes geometrically spanning 1 down to 1e-4.
pub fn default_starvation_grids() -> (Vec<f64>, Vec<f64>) {
    let pi = std::f64::consts::PI;
    let mut alphas = vec![0.05 * pi];
    for k in 1..=9 {
        alphas.push(k as f64 * 0.1 * pi);
    }
    // Guarantee the headline angle bitwise.
    alphas[5] = std::f64::consts::FRAC_PI_2;
    (alphas, log_space(1.0, 1e-4, 10))
}

// ---------------------------------------------------------------------------
// Synthetic flow batches (probe inputs)
// ---------------------------------------------------------------------------

/// A random training batch with strictly interior, strictly ordered times
/// (`t_lo <= r < t <= t_hi`), useful for probes that need clean central
/// stencils.
pub fn synthetic_flow_batch(
    d: usize,
    b: usize,
    t_lo: f64,
    t_hi: f64,
    seed: u64,
) -> Result<FlowBatch, EvalError> {
    if b == 0 || d == 0 || !(0.0 <= t_lo && t_lo < t_hi && t_hi <= 1.0) {
        return Err(EvalError::InvalidArg(format!(
            "bad synthetic batch request: b={b}, d={d}, window [{t_lo}, {t_hi}]"
        )));
    }
    let mut rng = StreamRng::new(seed, 0);
    let z0 = Tensor::from_raw(vec![b, d], rng.normal_vec(b * d));
    let eps = Tensor::from_raw(vec![b, d], rng.normal_vec(b * d));
    let mut r = Vec::with_capacity(b);
    let mut t = Vec::with_capacity(b);
    for _ in 0..b {
        let pair = rng.uniform_vec(t_lo, t_hi, 2);
        let (lo, hi) = if pair[0] <= pair[1] {
            (pair[0], pair[1])
        } else {
            (pair[1], pair[0])
        };
        r.push(lo);
        t.push(hi);
    }
    let r = Tensor::from_raw(vec![b], r);
    let t = Tensor::from_raw(vec![b], t);
    let one_minus_t = t.neg().add_scalar(1.0);
    let z_t = z0
        .mul(&one_minus_t.broadcast_col(d)?)?
        .add(&eps.mul(&t.broadcast_col(d)?)?)?;
    Ok(FlowBatch {
        z0,
        eps,
        r,
        t,
        z_t,
        cond: None,
    })
}

// ---------------------------------------------------------------------------
// Tape memory sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MemoryPoint {
    pub depth: usize,
    pub nodes_jvp: usize,
    pub saved_jvp: u64,
    pub nodes_dde: usize,
    pub saved_dde: u64,
}

impl MemoryPoint {
    /// How many times more tape nodes the exact derivative records.
    pub fn node_ratio(&self) -> f64 {
        self.nodes_jvp as f64 / self.nodes_dde as f64
    }
}

/// Records one training step per depth under both derivative modes and
/// reports the tape sizes (the memory proxy).
pub fn memory_sweep(
    depths: &[usize],
    hidden_width: usize,
    batch: usize,
    seed: u64,
) -> Result<Vec<MemoryPoint>, EvalError> {
    if depths.is_empty() || hidden_width == 0 || batch == 0 {
        return Err(EvalError::InvalidArg("empty memory sweep request".into()));
    }
    let mut out = Vec::with_capacity(depths.len());
    for &depth in depths {
        if depth == 0 {
            return Err(EvalError::InvalidArg("depth must be positive".into()));
        }
        let arch = Architecture {
            action_dim: 2,
            cond_dim: 0,
            hidden_dims: vec![hidden_width; depth],
            time_embed_dim: 16,
            activation: Activation::Gelu,
            feature_layer: 1,
        };
        let net = VelocityNet::init(arch, seed)?;
        let fb = synthetic_flow_batch(2, batch, 0.2, 0.8, seed.wrapping_add(1))?;
        let mut sizes = Vec::new();
        for mode in [DerivativeMode::Jvp, DerivativeMode::DdeFull] {
            let cfg = ObjectiveConfig {
                derivative_mode: mode,
                ..ObjectiveConfig::default()
            };
            let tape = Tape::new();
            let sr = total_loss(&net, &fb, &cfg, &tape)?;
            sizes.push((sr.diagnostics.tape_nodes, sr.diagnostics.tape_saved_elems));
        }
        out.push(MemoryPoint {
            depth,
            nodes_jvp: sizes[0].0,
            saved_jvp: sizes[0].1,
            nodes_dde: sizes[1].0,
            saved_dde: sizes[1].1,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Finite-difference convergence
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConvergencePoint {
    pub epsilon: f64,
    /// Root-mean-square entrywise error of the stencil derivative against
    /// the exact forward-mode derivative.
    pub rms_err: f64,
}

/// Error of the full finite-difference derivative against the exact one on
/// the same batch, per stencil width. With interior times (no clamping) the
/// central stencil is second order: halving `epsilon` should shrink the
/// error roughly fourfold.
pub fn dde_convergence(
    net: &VelocityNet,
    batch: &FlowBatch,
    epsilons: &[f64],
) -> Result<Vec<ConvergencePoint>, EvalError> {
    if epsilons.is_empty() {
        return Err(EvalError::InvalidArg("no epsilons".into()));
    }
    let exact = {
        let cfg = ObjectiveConfig {
            derivative_mode: DerivativeMode::Jvp,
            ..ObjectiveConfig::default()
        };
        let tape = Tape::new();
        target_velocity(net, batch, &cfg, &tape)?.dudt
    };
    let mut out = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let cfg = ObjectiveConfig {
            derivative_mode: DerivativeMode::DdeFull,
            dde_epsilon: eps,
            ..ObjectiveConfig::default()
        };
        let tape = Tape::new();
        let approx = target_velocity(net, batch, &cfg, &tape)?.dudt;
        let diff = approx.sub(&exact)?;
        let n = diff.numel() as f64;
        let rms = (diff.data().iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        out.push(ConvergencePoint {
            epsilon: eps,
            rms_err: rms,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Ablation suite
// ---------------------------------------------------------------------------

pub const VARIANT_FULL: &str = "full";
/// Drops the feature-spread term (lambda_disp = 0).
pub const VARIANT_NO_DISP: &str = "no_disp";
/// Drops the directional term (lambda_cos = 0); not in the default four-row
/// table but available by name.
pub const VARIANT_NO_COS: &str = "no_cos";
/// Drops both auxiliary terms: plain interval-velocity MSE.
pub const VARIANT_NO_DISP_NO_COS: &str = "no_disp_no_cos";
/// Full objective with the finite-difference derivative substitute.
pub const VARIANT_DDE: &str = "dde";

/// The standard four rows of the ablation table.
pub fn default_variants() -> Vec<String> {
    [VARIANT_FULL, VARIANT_NO_DISP, VARIANT_NO_DISP_NO_COS, VARIANT_DDE]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

/// Maps a variant name onto a concrete objective derived from `base`.
pub fn variant_objective(base: &ObjectiveConfig, name: &str) -> Result<ObjectiveConfig, EvalError> {
    let mut cfg = base.clone();
    match name {
        VARIANT_FULL => {}
        VARIANT_NO_DISP => cfg.lambda_disp = 0.0,
        VARIANT_NO_COS => cfg.lambda_cos = 0.0,
        VARIANT_NO_DISP_NO_COS => {
            cfg.lambda_disp = 0.0;
            cfg.lambda_cos = 0.0;
        }
        VARIANT_DDE => cfg.derivative_mode = DerivativeMode::DdeFull,
        other => {
            return Err(EvalError::InvalidArg(format!(
                "unknown variant {other:?}; expected one of full, no_disp, no_cos, \
                 no_disp_no_cos, dde"
            )))
        }
    }
    Ok(cfg)
}

/// One task entry of the ablation suite: what to train on, with which
/// network, and for how long.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTask {
    pub name: String,
    pub spec: TaskSpec,
    pub arch: Architecture,
    pub train_n: usize,
    pub eval_n: usize,
    /// Seed for dataset generation (shared across variants and train seeds,
    /// so every run sees the same data; the held-out set uses this plus 1).
    pub data_seed: u64,
    pub train: TrainConfig,
}

/// Evaluation points kept per run when scoring the ablation table (mean of
/// the best `k` held-out success rates along the training curve).
pub const ABLATION_TOP_K: usize = 5;

/// Network used for the ablation suite: small enough that the full table
/// (tasks x variants x seeds) trains in tens of minutes on one core, deep
/// enough that the feature-spread term has an interior layer to act on.
pub fn ablation_arch(spec: &TaskSpec) -> Architecture {
    Architecture {
        action_dim: spec.action_dim(),
        cond_dim: spec.cond_dim(),
        hidden_dims: vec![64, 64, 64],
        time_embed_dim: 16,
        activation: Activation::Gelu,
        feature_layer: 1,
    }
}

fn ablation_train(epochs: usize, eval_every: usize, eval_nfe: usize, action_scale: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        eval_every,
        eval_nfe,
        action_scale,
        eval_samples: 512,
        ..TrainConfig::default()
    }
}

/// The frozen toy-task suite behind the ablation table.
///
/// Shared choices: 512 train / 512 held-out rows, batch 128 (four steps per
/// epoch), seeds {0, 1, 2}, default learning rate and loss weights.
///
/// The two docking tasks train with `action_scale` 0.1: their actions are
/// tiny against the unit sampling noise, and rescaling sets the flow-space
/// target magnitude to about a tenth of the noise, which keeps the
/// direction signal visible at this budget. Success bars are relative
/// (angle and norm tolerances), so the rescaling changes optimization
/// geometry only, not the judging. Evaluation NFE differs per task: the
/// pure small-motion task separates the objective variants best with a
/// five-step sampler, the mixed-magnitude task with a two-step one, and
/// the reach sanity task is scored on the headline one-step sampler.
pub fn default_ablation_tasks() -> Vec<AblationTask> {
    let dock = crate::tasks::default_dock(0.02);
    let mixed = crate::tasks::default_mixed();
    let reach = crate::tasks::default_reach();
    vec![
        AblationTask {
            name: "precision_dock".into(),
            arch: ablation_arch(&dock),
            spec: dock,
            train_n: 512,
            eval_n: 512,
            data_seed: 1000,
            train: ablation_train(2500, 125, 5, 0.1),
        },
        AblationTask {
            name: "gen_mixed_magnitude".into(),
            arch: ablation_arch(&mixed),
            spec: mixed,
            train_n: 512,
            eval_n: 512,
            data_seed: 1000,
            train: ablation_train(750, 50, 2, 0.1),
        },
        AblationTask {
            name: "reach".into(),
            arch: ablation_arch(&reach),
            spec: reach,
            train_n: 512,
            eval_n: 512,
            data_seed: 1000,
            train: ablation_train(400, 25, 1, 1.0),
        },
    ]
}

/// Per-seed outcome of one (task, variant) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedScore {
    pub seed: u64,
    /// Success points (0-100): mean of the top-k evaluation points.
    pub score: f64,
    /// Same summary per stratum (includes "all").
    pub stratum_scores: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
    /// Full evaluation log, kept for exact-reproduction checks.
    pub metrics: Vec<MetricRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub task: String,
    pub variant: String,
    pub per_seed: Vec<SeedScore>,
    pub mean: f64,
    pub std: f64,
    /// Cross-seed means per stratum.
    pub stratum_means: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub top_k: usize,
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    pub fn cell(&self, task: &str, variant: &str) -> Option<&AblationCell> {
        self.cells
            .iter()
            .find(|c| c.task == task && c.variant == variant)
    }

    /// Plain-text table, one row per (task, variant).
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<22} {:<16} {:>8} {:>8}  per-seed / strata\n",
            "task", "variant", "mean", "std"
        ));
        for c in &self.cells {
            let seeds: Vec<String> = c.per_seed.iter().map(|s| format!("{:.1}", s.score)).collect();
            let strata: Vec<String> = c
                .stratum_means
                .iter()
                .filter(|(k, _)| k.as_str() != "all")
                .map(|(k, v)| format!("{k}={v:.1}"))
                .collect();
            let mut tail = format!("[{}]", seeds.join(", "));
            if !strata.is_empty() {
                tail.push(' ');
                tail.push_str(&strata.join(" "));
            }
            out.push_str(&format!(
                "{:<22} {:<16} {:>8.1} {:>8.1}  {}\n",
                c.task, c.variant, c.mean, c.std, tail
            ));
        }
        out
    }
}

/// Summarises one run's evaluation log: per stratum, the mean of the `k`
/// best success rates (in points, 0-100). The primary score is the "all"
/// stratum.
pub fn score_run(metrics: &[MetricRecord], top_k: usize) -> Result<(f64, BTreeMap<String, f64>), EvalError> {
    let mut series: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for m in metrics {
        if let Some(succ) = &m.success_by_stratum {
            for (name, stats) in succ {
                series
                    .entry(name.clone())
                    .or_default()
                    .push(stats.success_rate * 100.0);
            }
        }
    }
    if series.is_empty() {
        return Err(EvalError::InvalidArg(
            "no success evaluations in the metric log".into(),
        ));
    }
    let scores: BTreeMap<String, f64> = series
        .iter()
        .map(|(k, v)| (k.clone(), top_k_mean(v, top_k)))
        .collect();
    let all = *scores
        .get("all")
        .ok_or_else(|| EvalError::InvalidArg("missing overall stratum".into()))?;
    Ok((all, scores))
}

/// Trains one seed of one task with the given objective.
pub fn run_task_once(
    objective: &ObjectiveConfig,
    task: &AblationTask,
    seed: u64,
) -> Result<TrainRun, EvalError> {
    let train_ds = generate(&task.spec, task.train_n, task.data_seed)?;
    let eval_ds = generate(&task.spec, task.eval_n, task.data_seed + 1)?;
    Ok(train(&task.arch, objective, &task.train, &train_ds, &eval_ds, seed)?)
}

/// Runs every (task, variant, seed) combination. Runs are independent and
/// executed through the deterministic parallel map, so results do not depend
/// on thread count.
pub fn ablation_suite(
    base_objective: &ObjectiveConfig,
    tasks: &[AblationTask],
    variants: &[String],
    top_k: usize,
) -> Result<AblationReport, EvalError> {
    if tasks.is_empty() || variants.is_empty() || top_k == 0 {
        return Err(EvalError::InvalidArg("empty ablation request".into()));
    }
    // Validate all variants up front so a typo fails before hours of runs.
    for v in variants {
        variant_objective(base_objective, v)?;
    }

    let mut jobs = Vec::new();
    for task in tasks {
        for variant in variants {
            for &seed in &task.train.seeds {
                jobs.push((task, variant.clone(), seed));
            }
        }
    }
    let results: Vec<Result<SeedScore, String>> = par::map_independent(jobs.clone(), |(task, variant, seed)| {
        let run = || -> Result<SeedScore, EvalError> {
            let obj = variant_objective(base_objective, &variant)?;
            let out = run_task_once(arch, &obj, task, seed)?;
            let (score, strata) = score_run(&out.metrics, top_k)?;
            Ok(SeedScore {
                seed,
                score,
                stratum_scores: strata,
                aborted: out.aborted,
                metrics: out.metrics,
            })
        };
        run().map_err(|e| e.to_string())
    });

    let mut cells = Vec::new();
    let mut it = results.into_iter();
    for task in tasks {
        for variant in variants {
            let mut per_seed = Vec::new();
            for _ in &task.train.seeds {
                let r = it
                    .next()
                    .expect("job/result zip")
                    .map_err(EvalError::InvalidArg)?;
                per_seed.push(r);
            }
            let scores: Vec<f64> = per_seed.iter().map(|s| s.score).collect();
            let (mean, std) = mean_std(&scores);
            let mut stratum_means = BTreeMap::new();
            for name in per_seed[0].stratum_scores.keys() {
                let vals: Vec<f64> = per_seed
                    .iter()
                    .map(|s| *s.stratum_scores.get(name).unwrap_or(&0.0))
                    .collect();
                stratum_means.insert(name.clone(), mean_std(&vals).0);
            }
            cells.push(AblationCell {
                task: task.name.clone(),
                variant: variant.clone(),
                per_seed,
                mean,
                std,
                stratum_means,
            });
        }
    }
    Ok(AblationReport { top_k, cells })
}

// ---------------------------------------------------------------------------
// Generative benchmark
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmBenchmark {
    /// Final one-step MMD^2 per seed (after the full step budget).
    pub per_seed: Vec<(u64, f64)>,
    pub mean_mmd2: f64,
    /// Full logs per seed, kept for exact-reproduction checks.
    pub metrics: Vec<Vec<MetricRecord>>,
}

/// Trains the generative task once per seed and reports the final one-step
/// MMD^2 against held-out data.
pub fn gmm_benchmark(
    arch: &Architecture,
    objective: &ObjectiveConfig,
    config: &TrainConfig,
    spec: &TaskSpec,
    train_n: usize,
    eval_n: usize,
    data_seed: u64,
) -> Result<GmmBenchmark, EvalError> {
    let train_ds = generate(spec, train_n, data_seed)?;
    let eval_ds = generate(spec, eval_n, data_seed + 1)?;
    let runs: Vec<Result<(u64, f64, Vec<MetricRecord>), String>> =
        par::map_independent(config.seeds.clone(), |seed| {
            let run = || -> Result<(u64, f64, Vec<MetricRecord>), EvalError> {
                let out = train(arch, objective, config, &train_ds, &eval_ds, seed)?;
                let last = out
                    .metrics
                    .last()
                    .and_then(|m| m.mmd2)
                    .ok_or_else(|| EvalError::InvalidArg("no final distribution metric".into()))?;
                Ok((seed, last, out.metrics))
            };
            run().map_err(|e| e.to_string())
        });
    let mut per_seed = Vec::new();
    let mut metrics = Vec::new();
    for r in runs {
        let (seed, last, log) = r.map_err(EvalError::InvalidArg)?;
        per_seed.push((seed, last));
        metrics.push(log);
    }
    let mean = per_seed.iter().map(|(_, v)| v).sum::<f64>() / per_seed.len() as f64;
    Ok(GmmBenchmark {
        per_seed,
        mean_mmd2: mean,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::default_reach;

    #[test]
    fn mmd2_matches_a_hand_computation() {
        // x = {0, 0}, y = {1, 1} in 1-D. Pooled squared distances:
        // {0, 1, 1, 1, 1, 0} -> median 1 -> bw2 = 1.
        // kxx = kyy = 1 (unit kernel at distance 0), kxy = e^{-1}.
        let x = Tensor::from_raw(vec![2, 1], vec![0.0, 0.0]);
        let y = Tensor::from_raw(vec![2, 1], vec![1.0, 1.0]);
        let got = mmd2(&x, &y).unwrap();
        let expect = 2.0 - 2.0 * (-1.0f64).exp();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn mmd2_separates_and_degenerates_sanely() {
        let mut rng = StreamRng::new(0, 0);
        let x = Tensor::from_raw(vec![128, 2], rng.normal_vec(256));
        let y = Tensor::from_raw(vec![128, 2], rng.normal_vec(256));
        let same = mmd2(&x, &y).unwrap();
        assert!(same.abs() < 0.05, "same distribution: {same}");

        let shifted = Tensor::from_raw(
            vec![128, 2],
            y.data().iter().map(|v| v + 3.0).collect::<Vec<_>>(),
        );
        let far = mmd2(&x, &shifted).unwrap();
        assert!(far > 0.5, "shifted distribution: {far}");

        // All-identical points: zero median, bandwidth falls back, MMD = 0.
        let z = Tensor::zeros(vec![4, 2]);
        assert_eq!(mmd2(&z, &Tensor::zeros(vec![4, 2])).unwrap(), 0.0);

        assert!(mmd2(&Tensor::zeros(vec![1, 2]), &z).is_err());
    }

    #[test]
    fn mmd2_fixed_bandwidth_separates_shifted_gaussians() {
        let mut rng = StreamRng::new(42, 0);
        let x = Tensor::from_raw(vec![500, 1], rng.normal_vec(500));
        let y = Tensor::from_raw(
            vec![500, 1],
            rng.normal_vec(500).iter().map(|v| v + 10.0).collect::<Vec<_>>(),
        );
        let v = mmd2_with_bandwidth(&x, &y, Some(1.0)).unwrap();
        assert!(v > 0.5, "bandwidth-1 separation: {v}");
        // The override must match the heuristic path when given its choice.
        let same = Tensor::from_raw(vec![8, 1], rng.normal_vec(8));
        assert!(mmd2_with_bandwidth(&same, &same, Some(0.0)).is_err());
        assert_eq!(mmd2_reported(-1e-9), 0.0);
        assert_eq!(mmd2_reported(0.25), 0.25);
    }

    #[test]
    fn spacing_helpers_hit_exact_endpoints() {
        let l = lin_space(0.25, 0.75, 3);
        assert_eq!(l, vec![0.25, 0.5, 0.75]);
        let g = log_space(1.0, 1e-4, 10);
        assert_eq!(g[0], 1.0);
        assert_eq!(g[9], 1e-4);
        assert!(g.windows(2).all(|w| w[1] < w[0]));

        assert_eq!(top_k_mean(&[1.0, 4.0, 2.0, 3.0], 2), 3.5);
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[5.0]).1, 0.0);
    }

    #[test]
    fn default_starvation_grids_contain_the_headline_point() {
        let (alphas, rho_stars) = default_starvation_grids();
        assert_eq!(alphas.len(), 10);
        assert_eq!(rho_stars.len(), 10);
        assert!(alphas.contains(&std::f64::consts::FRAC_PI_2));
        assert!(rho_stars.contains(&1.0));
        assert!(rho_stars.contains(&1e-4));

        // Spot check the numeric/analytic agreement on a couple of points.
        let pts = starvation_grid(1.0, &[std::f64::consts::FRAC_PI_2], &[1.0, 1e-3], 1e-8, 1e-4)
            .unwrap();
        for p in pts {
            let rel = (p.numeric_mse - p.analytic_mse).abs() / p.analytic_mse.abs().max(1e-12);
            assert!(rel < 1e-6, "mse {} vs {}", p.numeric_mse, p.analytic_mse);
        }
    }

    #[test]
    fn memory_sweep_shows_the_stencil_saving() {
        let pts = memory_sweep(&[2, 3], 16, 8, 0).unwrap();
        assert_eq!(pts.len(), 2);
        for p in &pts {
            assert!(
                p.nodes_dde < p.nodes_jvp,
                "depth {}: {} vs {}",
                p.depth,
                p.nodes_dde,
                p.nodes_jvp
            );
        }
        assert!(pts[1].node_ratio() > pts[0].node_ratio());
    }

    #[test]
    fn dde_error_shrinks_second_order() {
        let net = VelocityNet::init(
            Architecture {
                action_dim: 2,
                cond_dim: 0,
                hidden_dims: vec![16, 16],
                time_embed_dim: 8,
                activation: Activation::Gelu,
                feature_layer: 1,
            },
            5,
        )
        .unwrap();
        let batch = synthetic_flow_batch(2, 16, 0.2, 0.8, 9).unwrap();
        let pts = dde_convergence(&net, &batch, &[4e-3, 2e-3, 1e-3]).unwrap();
        for w in pts.windows(2) {
            let ratio = w[0].rms_err / w[1].rms_err;
            assert!(ratio > 3.0, "ratio {ratio}");
        }
    }

    #[test]
    fn variant_objectives_toggle_the_right_knobs() {
        let base = ObjectiveConfig::default();
        assert_eq!(variant_objective(&base, VARIANT_FULL).unwrap(), base);
        assert_eq!(variant_objective(&base, VARIANT_NO_DISP).unwrap().lambda_disp, 0.0);
        assert_eq!(variant_objective(&base, VARIANT_NO_COS).unwrap().lambda_cos, 0.0);
        let bare = variant_objective(&base, VARIANT_NO_DISP_NO_COS).unwrap();
        assert_eq!((bare.lambda_disp, bare.lambda_cos), (0.0, 0.0));
        assert_eq!(
            variant_objective(&base, VARIANT_DDE).unwrap().derivative_mode,
            DerivativeMode::DdeFull
        );
        assert!(variant_objective(&base, "bogus").is_err());
        assert_eq!(default_variants().len(), 4);
    }

    #[test]
    fn score_run_summarises_strata() {
        use crate::tasks::StratumStats;
        let mk = |rate: f64| {
            let mut map = BTreeMap::new();
            map.insert(
                "all".to_string(),
                StratumStats {
                    n: 10,
                    success_rate: rate,
                    mean_cos: 0.9,
                },
            );
            MetricRecord {
                seed: 0,
                epoch: 0,
                step: 0,
                total: 0.0,
                mse: 0.0,
                dispersive: 0.0,
                cosine: 0.0,
                mean_cos_alpha: 0.0,
                mean_pred_norm: 0.0,
                mean_target_norm: 0.0,
                clamped_stencil_rows: 0,
                skipped_steps: 0,
                tape_nodes: 0,
                tape_saved_elems: 0,
                mmd2: None,
                success_by_stratum: Some(map),
            }
        };
        let log: Vec<MetricRecord> = [0.1, 0.5, 0.3, 0.9].iter().map(|&r| mk(r)).collect();
        let (score, strata) = score_run(&log, 2).unwrap();
        assert_eq!(score, 70.0); // top-2 of {10, 50, 30, 90}
        assert_eq!(strata["all"], 70.0);
        assert!(score_run(&[], 2).is_err());
    }

    #[test]
    fn frozen_ablation_suite_is_well_formed() {
        let tasks = default_ablation_tasks();
        assert_eq!(tasks.len(), 3);
        let names: Vec<&str> = tasks.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, ["precision_dock", "gen_mixed_magnitude", "reach"]);
        for t in &tasks {
            t.spec.validate().unwrap();
            t.train.validate().unwrap();
            assert_eq!(t.train.seeds, vec![0, 1, 2]);
            let arch = ablation_arch(&t.spec);
            arch.validate().unwrap();
            assert_eq!(arch.cond_dim, t.spec.cond_dim());
            // Every run must produce at least ABLATION_TOP_K eval points.
            assert!(t.train.epochs / t.train.eval_every >= ABLATION_TOP_K);
        }
    }

    #[test]
    fn tiny_ablation_smoke_run() {
        let arch = Architecture {
            action_dim: 2,
            cond_dim: 2,
            hidden_dims: vec![8, 8],
            time_embed_dim: 4,
            activation: Activation::Gelu,
            feature_layer: 1,
        };
        let task = AblationTask {
            name: "reach".into(),
            spec: default_reach(),
            train_n: 64,
            eval_n: 64,
            data_seed: 100,
            train: TrainConfig {
                batch_size: 32,
                epochs: 2,
                eval_every: 1,
                eval_samples: 32,
                seeds: vec![0, 1],
                ..TrainConfig::default()
            },
        };
        let report = ablation_suite(
            &arch,
            &ObjectiveConfig::default(),
            &[task],
            &["full".to_string(), "no_disp_no_cos".to_string()],
            2,
        )
        .unwrap();
        assert_eq!(report.cells.len(), 2);
        let cell = report.cell("reach", "full").unwrap();
        assert_eq!(cell.per_seed.len(), 2);
        assert!(cell.mean.is_finite());
        assert!(cell.stratum_means.contains_key("all"));
        let text = report.render_text();
        assert!(text.contains("reach") && text.contains("no_disp_no_cos"));
    }
}
