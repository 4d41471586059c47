//! Synthetic tasks: generators, dataset text files, and success metrics.
//!
//! Four tasks cover the regimes the training stack has to handle:
//!
//! * `gmm2d` — unconditional 2-D Gaussian mixture; quality is measured by a
//!   sample-distribution distance, not success rates.
//! * `reach` — conditioned on a start position, produce the displacement to a
//!   fixed goal; O(1) magnitudes, easy for plain MSE.
//! * `precision_dock` — conditioned on the unit bearing of a docking port's
//!   centerline, produce a tiny action (norm scale `magnitude`) pointing
//!   near one of two approach directions at ±`mode_offset` around that
//!   bearing. Success demands both direction (within `angle_tol`) and
//!   relative norm accuracy, which makes the low-velocity behaviour of the
//!   loss decisive.
//! * `mixed_magnitude` — a dock-style task whose rows mix two magnitude
//!   regimes (ratio at least 25). The intended regime is part of the
//!   conditioning (third column), so a trained model can honour it; success
//!   is reported per stratum.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Tensor};
use crate::rng::StreamRng;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("misaligned inputs: {0}")]
    Misaligned(String),
    #[error("{0}")]
    Unsupported(String),
    #[error(transparent)]
    Ad(#[from] AdError),
}

/// Stratum label carried by each dataset row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Untagged,
    Large,
    Small,
}

impl Tag {
    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Untagged => "-",
            Tag::Large => "large",
            Tag::Small => "small",
        }
    }

    fn parse(s: &str) -> Option<Tag> {
        match s {
            "-" => Some(Tag::Untagged),
            "large" => Some(Tag::Large),
            "small" => Some(Tag::Small),
            _ => None,
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmSpec {
    pub means: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReachSpec {
    pub goal: [f64; 2],
    /// Action scale: the stored action is `magnitude * (goal - start)` plus
    /// noise, and the environment applies `start + action / magnitude`.
    pub magnitude: f64,
    /// Label noise as a fraction of `magnitude`.
    pub noise_frac: f64,
    pub success_radius: f64,
}

/// Docking port task: the condition is the unit bearing of the port's
/// centerline, and a valid approach departs at +/- `mode_offset_deg` around
/// it with norm near `magnitude`. Giving the bearing directly (rather than a
/// position the network would first have to convert to an angle) keeps the
/// conditional map low-complexity, so what limits success is the loss
/// geometry at tiny magnitudes — the effect the ablation isolates — not
/// approximation capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DockSpec {
    /// Action norm scale; the stress regime uses 0.02.
    pub magnitude: f64,
    /// The two approach directions sit at +/- this angle around the
    /// centerline bearing, in degrees.
    pub mode_offset_deg: f64,
    /// Angular label noise (degrees).
    pub angle_noise_deg: f64,
    /// Norm factor is drawn from `U[1 - jitter, 1 + jitter]`.
    pub norm_jitter: f64,
    /// Success: angular error to the nearest mode below this (degrees).
    pub angle_tol_deg: f64,
    /// Success: `|norm - magnitude| / magnitude` below this.
    pub norm_rel_tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixedSpec {
    /// Geometry and magnitude of the small stratum.
    pub dock: DockSpec,
    /// Magnitude of the large stratum (unimodal, along the bearing).
    pub large_magnitude: f64,
    /// Probability that a row belongs to the small stratum.
    pub small_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    Gmm2d(GmmSpec),
    Reach(ReachSpec),
    PrecisionDock(DockSpec),
    #[serde(rename = "gen_mixed_magnitude")]
    MixedMagnitude(MixedSpec),
}

impl TaskSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            TaskSpec::Gmm2d(_) => "gmm2d",
            TaskSpec::Reach(_) => "reach",
            TaskSpec::PrecisionDock(_) => "precision_dock",
            TaskSpec::MixedMagnitude(_) => "gen_mixed_magnitude",
        }
    }

    pub fn cond_dim(&self) -> usize {
        match self {
            TaskSpec::Gmm2d(_) => 0,
            TaskSpec::Reach(_) | TaskSpec::PrecisionDock(_) => 2,
            // Position plus the magnitude-regime indicator.
            TaskSpec::MixedMagnitude(_) => 3,
        }
    }

    pub fn action_dim(&self) -> usize {
        2
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        match self {
            TaskSpec::Gmm2d(g) => {
                if g.means.is_empty() {
                    return Err(TaskError::InvalidSpec(
                        "mixture needs at least one component".into(),
                    ));
                }
                if g.weights.len() != g.means.len() {
                    return Err(TaskError::InvalidSpec(format!(
                        "{} weights for {} components",
                        g.weights.len(),
                        g.means.len()
                    )));
                }
                if g.weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
                    return Err(TaskError::InvalidSpec(
                        "component weights must be positive".into(),
                    ));
                }
                if !(g.sigma > 0.0) {
                    return Err(TaskError::InvalidSpec(format!(
                        "sigma must be positive, got {}",
                        g.sigma
                    )));
                }
                Ok(())
            }
            TaskSpec::Reach(r) => {
                if !(r.magnitude > 0.0) {
                    return Err(TaskError::InvalidSpec(format!(
                        "magnitude must be positive, got {}",
                        r.magnitude
                    )));
                }
                if !(r.noise_frac >= 0.0 && r.success_radius > 0.0) {
                    return Err(TaskError::InvalidSpec(
                        "noise_frac must be nonnegative and success_radius positive".into(),
                    ));
                }
                Ok(())
            }
            TaskSpec::PrecisionDock(d) => validate_dock(d),
            TaskSpec::MixedMagnitude(m) => {
                validate_dock(&m.dock)?;
                if !(m.large_magnitude > 0.0) {
                    return Err(TaskError::InvalidSpec(
                        "large_magnitude must be positive".into(),
                    ));
                }
                let ratio = m.large_magnitude / m.dock.magnitude;
                if ratio < 25.0 {
                    return Err(TaskError::InvalidSpec(format!(
                        "magnitude ratio must be at least 25, got {ratio:.3}"
                    )));
                }
                if !(0.0..=1.0).contains(&m.small_fraction) {
                    return Err(TaskError::InvalidSpec(
                        "small_fraction must lie in [0, 1]".into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

fn validate_dock(d: &DockSpec) -> Result<(), TaskError> {
    if !(d.magnitude > 0.0) {
        return Err(TaskError::InvalidSpec(format!(
            "magnitude must be positive, got {}",
            d.magnitude
        )));
    }
    if !(d.mode_offset_deg > 0.0 && d.mode_offset_deg < 90.0) {
        return Err(TaskError::InvalidSpec(
            "mode_offset_deg must lie in (0, 90)".into(),
        ));
    }
    if !(d.angle_noise_deg >= 0.0) {
        return Err(TaskError::InvalidSpec("angle_noise_deg must be nonnegative".into()));
    }
    if !(0.0..0.5).contains(&d.norm_jitter) {
        return Err(TaskError::InvalidSpec(
            "norm_jitter must lie in [0, 0.5)".into(),
        ));
    }
    if !(d.angle_tol_deg > 0.0 && d.norm_rel_tol > 0.0) {
        return Err(TaskError::InvalidSpec("tolerances must be positive".into()));
    }
    Ok(())
}

impl Default for GmmSpec {
    /// Canonical four-mode mixture used by the generative benchmark. The
    /// modes sit at radius `1.5·sqrt(2)` so the mixture is clearly separated
    /// from a standard normal: untrained one-step output (which is close to
    /// its input noise) scores far above the benchmark bar, while a trained
    /// sampler must actually transport mass onto the corners to pass.
    fn default() -> Self {
        GmmSpec {
            means: vec![[1.5, 1.5], [-1.5, 1.5], [-1.5, -1.5], [1.5, -1.5]],
            weights: vec![0.25, 0.25, 0.25, 0.25],
            sigma: 0.15,
        }
    }
}

impl Default for ReachSpec {
    fn default() -> Self {
        ReachSpec {
            goal: [0.5, 0.5],
            magnitude: 1.0,
            noise_frac: 0.01,
            success_radius: 0.05,
        }
    }
}

impl Default for DockSpec {
    /// The stress-regime geometry (magnitude 0.02).
    fn default() -> Self {
        default_dock_spec(0.02)
    }
}

impl Default for MixedSpec {
    fn default() -> Self {
        MixedSpec {
            dock: default_dock_spec(0.02),
            large_magnitude: 1.0,
            small_fraction: 0.5,
        }
    }
}

/// Canonical four-mode mixture used by the generative benchmark.
pub fn default_gmm() -> TaskSpec {
    TaskSpec::Gmm2d(GmmSpec::default())
}

pub fn default_reach() -> TaskSpec {
    TaskSpec::Reach(ReachSpec::default())
}

/// Dock geometry at the given magnitude (0.02 in the stress regime).
pub fn default_dock(magnitude: f64) -> TaskSpec {
    TaskSpec::PrecisionDock(default_dock_spec(magnitude))
}

fn default_dock_spec(magnitude: f64) -> DockSpec {
    DockSpec {
        magnitude,
        mode_offset_deg: 45.0,
        angle_noise_deg: 3.0,
        norm_jitter: 0.2,
        angle_tol_deg: 15.0,
        norm_rel_tol: 0.5,
    }
}

pub fn default_mixed() -> TaskSpec {
    TaskSpec::MixedMagnitude(MixedSpec::default())
}

/// A generated dataset: structure-of-arrays plus the spec that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    /// `[n, cond_dim]` (zero columns for unconditional tasks).
    pub conds: Tensor,
    /// `[n, action_dim]`.
    pub actions: Tensor,
    pub tags: Vec<Tag>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Rows `idx` gathered into a new pair of tensors.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Option<Tensor>) {
        let cd = self.spec.cond_dim();
        let ad = self.spec.action_dim();
        let mut actions = Vec::with_capacity(idx.len() * ad);
        let mut conds = Vec::with_capacity(idx.len() * cd);
        for &i in idx {
            actions.extend_from_slice(self.actions.row(i));
            if cd > 0 {
                conds.extend_from_slice(self.conds.row(i));
            }
        }
        let actions = Tensor::from_raw(vec![idx.len(), ad], actions);
        let conds = if cd > 0 {
            Some(Tensor::from_raw(vec![idx.len(), cd], conds))
        } else {
            None
        };
        (actions, conds)
    }
}

/// Draws `n` rows from the task's demonstration distribution. All draws come
/// from one seeded stream in a fixed per-row order, so `(spec, n, seed)`
/// fully determines the dataset.
pub fn generate(spec: &TaskSpec, n: usize, seed: u64) -> Result<Dataset, TaskError> {
    spec.validate()?;
    if n == 0 {
        return Err(TaskError::InvalidSpec("dataset size must be positive".into()));
    }
    let mut rng = StreamRng::new(seed, 0);
    let cd = spec.cond_dim();
    let ad = spec.action_dim();
    let mut conds = Vec::with_capacity(n * cd);
    let mut actions = Vec::with_capacity(n * ad);
    let mut tags = Vec::with_capacity(n);

    match spec {
        TaskSpec::Gmm2d(g) => {
            let total: f64 = g.weights.iter().sum();
            for _ in 0..n {
                let u = rng.uniform_vec(0.0, total, 1)[0];
                let mut acc = 0.0;
                let mut comp = g.means.len() - 1;
                for (k, w) in g.weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        comp = k;
                        break;
                    }
                }
                let nrm = rng.normal_vec(2);
                actions.push(g.means[comp][0] + g.sigma * nrm[0]);
                actions.push(g.means[comp][1] + g.sigma * nrm[1]);
                tags.push(Tag::Untagged);
            }
        }
        TaskSpec::Reach(r) => {
            for _ in 0..n {
                let start = rng.uniform_vec(-1.0, 1.0, 2);
                let nrm = rng.normal_vec(2);
                let ax = r.magnitude * ((r.goal[0] - start[0]) + r.noise_frac * nrm[0]);
                let ay = r.magnitude * ((r.goal[1] - start[1]) + r.noise_frac * nrm[1]);
                conds.extend_from_slice(&start);
                actions.push(ax);
                actions.push(ay);
                tags.push(Tag::Untagged);
            }
        }
        TaskSpec::PrecisionDock(d) => {
            for _ in 0..n {
                let (c, a) = draw_dock_row(d, &mut rng, true);
                conds.extend_from_slice(&c);
                actions.extend_from_slice(&a);
                tags.push(Tag::Untagged);
            }
        }
        TaskSpec::MixedMagnitude(m) => {
            for _ in 0..n {
                let gate = rng.uniform_vec(0.0, 1.0, 1)[0];
                if gate < m.small_fraction {
                    let (c, a) = draw_dock_row(&m.dock, &mut rng, true);
                    conds.extend_from_slice(&c);
                    conds.push(1.0);
                    actions.extend_from_slice(&a);
                    tags.push(Tag::Small);
                } else {
                    let mut big = m.dock.clone();
                    big.magnitude = m.large_magnitude;
                    let (c, a) = draw_dock_row(&big, &mut rng, false);
                    conds.extend_from_slice(&c);
                    conds.push(0.0);
                    actions.extend_from_slice(&a);
                    tags.push(Tag::Large);
                }
            }
        }
    }

    Ok(Dataset {
        spec: spec.clone(),
        conds: Tensor::from_raw(vec![n, cd], conds),
        actions: Tensor::from_raw(vec![n, ad], actions),
        tags,
    })
}

/// One dock-style row: the condition is the unit centerline bearing, the
/// action departs at either +offset or -offset around it (bimodal) or along
/// it (unimodal), with angular label noise and norm jitter.
/// Draw order per row: bearing angle, mode gate (bimodal only), angle noise,
/// norm factor.
fn draw_dock_row(d: &DockSpec, rng: &mut StreamRng, bimodal: bool) -> ([f64; 2], [f64; 2]) {
    let phi = rng.uniform_vec(0.0, std::f64::consts::TAU, 1)[0];
    let c = [phi.cos(), phi.sin()];
    let mode = if bimodal {
        if rng.uniform_vec(0.0, 1.0, 1)[0] < 0.5 {
            1.0
        } else {
            -1.0
        }
    } else {
        0.0
    };
    let noise = rng.normal_vec(1)[0];
    let theta = phi
        + mode * d.mode_offset_deg.to_radians()
        + d.angle_noise_deg.to_radians() * noise;
    let factor = rng.uniform_vec(1.0 - d.norm_jitter, 1.0 + d.norm_jitter, 1)[0];
    let norm = d.magnitude * factor;
    (c, [norm * theta.cos(), norm * theta.sin()])
}

/// Generator entry points named per task. All delegate to [`generate`] with
/// the matching spec wrapper; they also reject a spec of the wrong kind.
pub fn gen_gmm2d(spec: &GmmSpec, n: usize, seed: u64) -> Result<Dataset, TaskError> {
    generate(&TaskSpec::Gmm2d(spec.clone()), n, seed)
}

pub fn gen_reach(spec: &ReachSpec, n: usize, seed: u64) -> Result<Dataset, TaskError> {
    generate(&TaskSpec::Reach(spec.clone()), n, seed)
}

pub fn gen_precision_dock(spec: &DockSpec, n: usize, seed: u64) -> Result<Dataset, TaskError> {
    generate(&TaskSpec::PrecisionDock(spec.clone()), n, seed)
}

pub fn gen_mixed_magnitude(spec: &MixedSpec, n: usize, seed: u64) -> Result<Dataset, TaskError> {
    generate(&TaskSpec::MixedMagnitude(spec.clone()), n, seed)
}

/// Wraps an angle difference to `(-pi, pi]`.
pub fn wrap_angle(x: f64) -> f64 {
    let mut y = x.rem_euclid(std::f64::consts::TAU);
    if y > std::f64::consts::PI {
        y -= std::f64::consts::TAU;
    }
    y
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StratumStats {
    pub n: usize,
    pub success_rate: f64,
    /// Mean cosine between the produced action and its nearest valid
    /// direction (1.0 = perfectly aimed).
    pub mean_cos: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessReport {
    pub overall: StratumStats,
    pub by_stratum: BTreeMap<String, StratumStats>,
}

struct RowJudge {
    success: bool,
    cos: f64,
}

fn judge_dock_row(d: &DockSpec, cond: &[f64], action: &[f64], bimodal: bool) -> RowJudge {
    let theta_base = cond[1].atan2(cond[0]);
    let theta_hat = action[1].atan2(action[0]);
    let err = if bimodal {
        let e1 = wrap_angle(theta_hat - (theta_base + d.mode_offset_deg.to_radians())).abs();
        let e2 = wrap_angle(theta_hat - (theta_base - d.mode_offset_deg.to_radians())).abs();
        e1.min(e2)
    } else {
        wrap_angle(theta_hat - theta_base).abs()
    };
    let norm = (action[0] * action[0] + action[1] * action[1]).sqrt();
    let norm_ok = (norm - d.magnitude).abs() / d.magnitude < d.norm_rel_tol;
    RowJudge {
        success: err < d.angle_tol_deg.to_radians() && norm_ok,
        cos: err.cos(),
    }
}

/// Scores produced actions against the task's success criterion, overall and
/// per stratum. Undefined for the generative task (use the distribution
/// metric instead).
pub fn eval_success(
    spec: &TaskSpec,
    conds: &Tensor,
    actions: &Tensor,
    tags: &[Tag],
) -> Result<SuccessReport, TaskError> {
    spec.validate()?;
    let n = tags.len();
    let (cr, cc) = conds.dims2("eval_success")?;
    let (ar, ac) = actions.dims2("eval_success")?;
    if cr != n || ar != n || cc != spec.cond_dim() || ac != spec.action_dim() {
        return Err(TaskError::Misaligned(format!(
            "conds [{cr}, {cc}], actions [{ar}, {ac}], {n} tags for a task with \
             cond_dim {} and action_dim {}",
            spec.cond_dim(),
            spec.action_dim()
        )));
    }
    if n == 0 {
        return Err(TaskError::Misaligned("no rows to evaluate".into()));
    }

    let mut groups: BTreeMap<String, Vec<RowJudge>> = BTreeMap::new();
    let mut all: Vec<RowJudge> = Vec::with_capacity(n);
    for i in 0..n {
        let cond = conds.row(i);
        let action = actions.row(i);
        let judge = match spec {
            TaskSpec::Gmm2d(_) => {
                return Err(TaskError::Unsupported(
                    "success is undefined for the generative task; use the distribution metric"
                        .into(),
                ))
            }
            TaskSpec::Reach(r) => {
                let next = [
                    cond[0] + action[0] / r.magnitude,
                    cond[1] + action[1] / r.magnitude,
                ];
                let dist =
                    ((next[0] - r.goal[0]).powi(2) + (next[1] - r.goal[1]).powi(2)).sqrt();
                let want = [r.goal[0] - cond[0], r.goal[1] - cond[1]];
                let dot = action[0] * want[0] + action[1] * want[1];
                let na = (action[0] * action[0] + action[1] * action[1]).sqrt();
                let nw = (want[0] * want[0] + want[1] * want[1]).sqrt();
                let cos = if na > 0.0 && nw > 0.0 { dot / (na * nw) } else { 0.0 };
                RowJudge {
                    success: dist < r.success_radius,
                    cos,
                }
            }
            TaskSpec::PrecisionDock(d) => judge_dock_row(d, cond, action, true),
            TaskSpec::MixedMagnitude(m) => match tags[i] {
                Tag::Small => judge_dock_row(&m.dock, &cond[..2], action, true),
                Tag::Large => {
                    let mut big = m.dock.clone();
                    big.magnitude = m.large_magnitude;
                    judge_dock_row(&big, &cond[..2], action, false)
                }
                Tag::Untagged => {
                    return Err(TaskError::Misaligned(format!(
                        "row {i}: mixed-magnitude rows must be tagged large or small"
                    )))
                }
            },
        };
        if tags[i] != Tag::Untagged {
            groups
                .entry(tags[i].as_str().to_string())
                .or_default()
                .push(RowJudge {
                    success: judge.success,
                    cos: judge.cos,
                });
        }
        all.push(judge);
    }

    let stats = |rows: &[RowJudge]| StratumStats {
        n: rows.len(),
        success_rate: rows.iter().filter(|r| r.success).count() as f64 / rows.len() as f64,
        mean_cos: rows.iter().map(|r| r.cos).sum::<f64>() / rows.len() as f64,
    };
    Ok(SuccessReport {
        overall: stats(&all),
        by_stratum: groups.iter().map(|(k, v)| (k.clone(), stats(v))).collect(),
    })
}

const DATASET_MAGIC: &str = "# interval-velocity dataset v1";
const ROWS_MARKER: &str = "---";

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    n: usize,
    cond_dim: usize,
    action_dim: usize,
    spec: TaskSpec,
}

impl Dataset {
    /// Plain-text serialisation: a comment magic line, a TOML header
    /// (row counts and the generating spec), a `---` marker, then one line
    /// per row: `cond... | action... | tag`. Floats use the shortest
    /// round-trip decimal form, so save/load is lossless.
    pub fn save(&self, path: &Path) -> Result<(), TaskError> {
        let mut out = String::new();
        out.push_str(DATASET_MAGIC);
        out.push('\n');
        let header = DatasetHeader {
            n: self.len(),
            cond_dim: self.spec.cond_dim(),
            action_dim: self.spec.action_dim(),
            spec: self.spec.clone(),
        };
        let toml_text = toml::to_string(&header)
            .map_err(|e| TaskError::InvalidSpec(format!("header serialisation: {e}")))?;
        out.push_str(&toml_text);
        out.push_str(ROWS_MARKER);
        out.push('\n');
        let cd = self.spec.cond_dim();
        for i in 0..self.len() {
            let mut fields: Vec<String> = Vec::new();
            if cd > 0 {
                fields.push(
                    self.conds.row(i).iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "),
                );
            } else {
                fields.push(String::new());
            }
            fields.push(
                self.actions.row(i).iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "),
            );
            fields.push(self.tags[i].as_str().to_string());
            out.push_str(&fields.join(" | "));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TaskError> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, first)) if first.trim() == DATASET_MAGIC => {}
            other => {
                return Err(TaskError::Parse {
                    line: 1,
                    msg: format!(
                        "expected magic line {DATASET_MAGIC:?}, found {:?}",
                        other.map(|(_, l)| l).unwrap_or("")
                    ),
                })
            }
        }
        let mut header_text = String::new();
        let mut marker_line = 0usize;
        for (idx, line) in lines.by_ref() {
            if line.trim() == ROWS_MARKER {
                marker_line = idx + 1;
                break;
            }
            header_text.push_str(line);
            header_text.push('\n');
        }
        if marker_line == 0 {
            return Err(TaskError::Parse {
                line: text.lines().count(),
                msg: format!("missing {ROWS_MARKER:?} row marker"),
            });
        }
        let header: DatasetHeader = toml::from_str(&header_text).map_err(|e| TaskError::Parse {
            line: 2,
            msg: format!("header: {e}"),
        })?;
        header.spec.validate()?;
        if header.cond_dim != header.spec.cond_dim() || header.action_dim != header.spec.action_dim()
        {
            return Err(TaskError::Parse {
                line: 2,
                msg: "header dims disagree with the task kind".into(),
            });
        }

        let mut conds = Vec::with_capacity(header.n * header.cond_dim);
        let mut actions = Vec::with_capacity(header.n * header.action_dim);
        let mut tags = Vec::with_capacity(header.n);
        for (idx, line) in lines {
            let lineno = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('|').collect();
            if parts.len() != 3 {
                return Err(TaskError::Parse {
                    line: lineno,
                    msg: format!("expected 'cond | action | tag', found {} fields", parts.len()),
                });
            }
            let parse_floats = |field: &str, want: usize, what: &str| -> Result<Vec<f64>, TaskError> {
                let vals: Result<Vec<f64>, _> =
                    field.split_whitespace().map(str::parse::<f64>).collect();
                let vals = vals.map_err(|e| TaskError::Parse {
                    line: lineno,
                    msg: format!("{what}: {e}"),
                })?;
                if vals.len() != want {
                    return Err(TaskError::Parse {
                        line: lineno,
                        msg: format!("{what}: expected {want} values, found {}", vals.len()),
                    });
                }
                if !vals.iter().all(|v| v.is_finite()) {
                    return Err(TaskError::Parse {
                        line: lineno,
                        msg: format!("{what}: non-finite value"),
                    });
                }
                Ok(vals)
            };
            conds.extend(parse_floats(parts[0], header.cond_dim, "conditioning")?);
            actions.extend(parse_floats(parts[1], header.action_dim, "action")?);
            let tag_text = parts[2].trim();
            let tag = Tag::parse(tag_text).ok_or_else(|| TaskError::Parse {
                line: lineno,
                msg: format!("unknown tag {tag_text:?}"),
            })?;
            tags.push(tag);
        }
        if tags.len() != header.n {
            return Err(TaskError::Parse {
                line: text.lines().count(),
                msg: format!("header promises {} rows, found {}", header.n, tags.len()),
            });
        }
        Ok(Dataset {
            conds: Tensor::from_raw(vec![header.n, header.cond_dim], conds),
            actions: Tensor::from_raw(vec![header.n, header.action_dim], actions),
            tags,
            spec: header.spec,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gmm_moments_match_mixture() {
        let spec = default_gmm();
        let (mode, sigma) = match &spec {
            TaskSpec::Gmm2d(g) => (g.means[0][0].abs(), g.sigma),
            _ => unreachable!(),
        };
        let ds = generate(&spec, 20_000, 0).unwrap();
        let n = ds.len() as f64;
        let mean_x: f64 = (0..ds.len()).map(|i| ds.actions.at2(i, 0)).sum::<f64>() / n;
        let mean_y: f64 = (0..ds.len()).map(|i| ds.actions.at2(i, 1)).sum::<f64>() / n;
        // Symmetric mixture: zero mean; per-axis variance mode^2 + sigma^2.
        assert!(mean_x.abs() < 0.04, "{mean_x}");
        assert!(mean_y.abs() < 0.04, "{mean_y}");
        let var_x: f64 = (0..ds.len()).map(|i| ds.actions.at2(i, 0).powi(2)).sum::<f64>() / n;
        let expect = mode.powi(2) + sigma.powi(2);
        assert!((var_x - expect).abs() < 0.06, "{var_x} vs {expect}");

        // Component occupancy is near the weights: quadrant counts.
        let q1 = (0..ds.len())
            .filter(|&i| ds.actions.at2(i, 0) > 0.0 && ds.actions.at2(i, 1) > 0.0)
            .count() as f64
            / n;
        assert!((q1 - 0.25).abs() < 0.02, "{q1}");
    }

    #[test]
    fn gmm_rejects_empty_mixture() {
        let spec = TaskSpec::Gmm2d(GmmSpec {
            means: vec![],
            weights: vec![],
            sigma: 0.1,
        });
        assert!(matches!(
            generate(&spec, 10, 0),
            Err(TaskError::InvalidSpec(_))
        ));
        // A single component is legal.
        let spec = TaskSpec::Gmm2d(GmmSpec {
            means: vec![[0.0, 0.0]],
            weights: vec![1.0],
            sigma: 0.1,
        });
        assert!(generate(&spec, 10, 0).is_ok());
    }

    #[test]
    fn reach_demonstrations_succeed_and_zero_actions_fail() {
        let spec = default_reach();
        let ds = generate(&spec, 2000, 1).unwrap();
        let report = eval_success(&spec, &ds.conds, &ds.actions, &ds.tags).unwrap();
        assert!(report.overall.success_rate > 0.99, "{}", report.overall.success_rate);
        assert!(report.overall.mean_cos > 0.99);

        let zeros = Tensor::zeros(vec![2000, 2]);
        let report = eval_success(&spec, &ds.conds, &zeros, &ds.tags).unwrap();
        assert!(report.overall.success_rate < 0.01);
    }

    #[test]
    fn dock_demonstrations_succeed() {
        let spec = default_dock(0.02);
        let ds = generate(&spec, 2000, 2).unwrap();
        let report = eval_success(&spec, &ds.conds, &ds.actions, &ds.tags).unwrap();
        // sigma = 3 degrees against a 15-degree tolerance and +/-20% jitter
        // against a 50% norm tolerance: essentially all demonstrations pass.
        assert!(report.overall.success_rate > 0.99, "{}", report.overall.success_rate);
    }

    #[test]
    fn dock_random_directions_score_the_cone_measure() {
        // Actions with the correct norm but uniformly random direction pass
        // only the angular test: two 30-degree cones out of 360 degrees = 1/6.
        let spec = default_dock(0.02);
        let ds = generate(&spec, 40_000, 3).unwrap();
        let mut rng = StreamRng::new(99, 0);
        let mut data = Vec::with_capacity(ds.len() * 2);
        for _ in 0..ds.len() {
            let th = rng.uniform_vec(0.0, std::f64::consts::TAU, 1)[0];
            data.push(0.02 * th.cos());
            data.push(0.02 * th.sin());
        }
        let random_actions = Tensor::from_raw(vec![ds.len(), 2], data);
        let report = eval_success(&spec, &ds.conds, &random_actions, &ds.tags).unwrap();
        let expect = 1.0 / 6.0;
        assert!(
            (report.overall.success_rate - expect).abs() < 0.01,
            "{} vs {expect}",
            report.overall.success_rate
        );
    }

    #[test]
    fn dock_zero_actions_fail_the_norm_test() {
        let spec = default_dock(0.02);
        let ds = generate(&spec, 500, 6).unwrap();
        let zeros = Tensor::zeros(vec![500, 2]);
        let report = eval_success(&spec, &ds.conds, &zeros, &ds.tags).unwrap();
        assert_eq!(report.overall.success_rate, 0.0);
    }

    #[test]
    fn dock_rejects_zero_magnitude() {
        let spec = default_dock(0.0);
        assert!(matches!(
            generate(&spec, 10, 0),
            Err(TaskError::InvalidSpec(_))
        ));
    }

    #[test]
    fn mixed_strata_are_tagged_conditioned_and_ratio_checked() {
        let spec = default_mixed();
        let ds = generate(&spec, 10_000, 4).unwrap();
        let small = ds.tags.iter().filter(|t| **t == Tag::Small).count() as f64;
        assert!((small / 10_000.0 - 0.5).abs() < 0.02);
        // The stratum indicator column matches the tag.
        for i in 0..ds.len() {
            let flag = ds.conds.at2(i, 2);
            match ds.tags[i] {
                Tag::Small => assert_eq!(flag, 1.0),
                Tag::Large => assert_eq!(flag, 0.0),
                Tag::Untagged => panic!("untagged mixed row"),
            }
        }
        // Demonstrations pass their own criterion in both strata.
        let report = eval_success(&spec, &ds.conds, &ds.actions, &ds.tags).unwrap();
        assert!(report.by_stratum["small"].success_rate > 0.99);
        assert!(report.by_stratum["large"].success_rate > 0.99);

        // Ratio below 25 is rejected.
        let bad = TaskSpec::MixedMagnitude(MixedSpec {
            dock: default_dock_spec(0.05),
            large_magnitude: 1.0,
            small_fraction: 0.5,
        });
        assert!(matches!(bad.validate(), Err(TaskError::InvalidSpec(_))));
    }

    #[test]
    fn generation_is_deterministic_in_spec_and_seed() {
        let spec = default_mixed();
        let a = generate(&spec, 100, 7).unwrap();
        let b = generate(&spec, 100, 7).unwrap();
        assert_eq!(a, b);
        let c = generate(&spec, 100, 8).unwrap();
        assert_ne!(a.actions, c.actions);
    }

    #[test]
    fn success_on_generative_task_is_an_error() {
        let spec = default_gmm();
        let ds = generate(&spec, 10, 0).unwrap();
        assert!(matches!(
            eval_success(&spec, &ds.conds, &ds.actions, &ds.tags),
            Err(TaskError::Unsupported(_))
        ));
    }

    #[test]
    fn misaligned_inputs_error() {
        let spec = default_reach();
        let ds = generate(&spec, 10, 0).unwrap();
        let short_actions = Tensor::zeros(vec![5, 2]);
        assert!(matches!(
            eval_success(&spec, &ds.conds, &short_actions, &ds.tags),
            Err(TaskError::Misaligned(_))
        ));
    }

    #[test]
    fn dataset_text_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        for spec in [default_gmm(), default_reach(), default_dock(0.02), default_mixed()] {
            let ds = generate(&spec, 64, 5).unwrap();
            let path = dir.path().join(format!("{}.txt", spec.kind_name()));
            ds.save(&path).unwrap();
            let back = Dataset::load(&path).unwrap();
            assert_eq!(ds, back, "{}", spec.kind_name());
        }
    }

    #[test]
    fn corrupt_dataset_lines_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&default_reach(), 4, 0).unwrap();
        let path = dir.path().join("data.txt");
        ds.save(&path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("0.1 0.2 | not_a_number 0.3 | -\n");
        std::fs::write(&path, text).unwrap();
        match Dataset::load(&path) {
            Err(TaskError::Parse { line, msg }) => {
                assert!(line > 4, "line {line}");
                assert!(msg.contains("action"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn wrap_angle_basics() {
        assert!((wrap_angle(3.5 * std::f64::consts::PI) - (-0.5 * std::f64::consts::PI)).abs() < 1e-12);
        assert_eq!(wrap_angle(0.0), 0.0);
        assert!((wrap_angle(std::f64::consts::PI) - std::f64::consts::PI).abs() < 1e-12);
    }
}
