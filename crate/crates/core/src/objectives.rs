//! Training objectives and the embedding-based output distribution.
//!
//! * ASR loss: `-log P_phi(y_t | h_t)`.
//! * Regularizer: `1 - cos(e~_t, e_{y_t})` against the frozen table row.
//! * Cosine-Softmax: `P_theta(v) ∝ exp(cos(e~_t, e_v) / tau)`.
//! * Fusion: `P_fused = (1 - lambda_f) P_phi + lambda_f P_theta`.
//!
//! Per-utterance objectives sum the per-step terms. The embedding table only
//! ever enters a graph as a frozen constant.

use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine, softmax, Graph, NodeId, Tensor};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::seq2seq::StepNodes;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Baseline,
    Reg,
    Fused,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "reg" => Ok(Self::Reg),
            "fused" => Ok(Self::Fused),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Baseline => "baseline",
            Self::Reg => "reg",
            Self::Fused => "fused",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularizationConfig {
    pub lambda: f64,
}

impl Default for RegularizationConfig {
    fn default() -> Self {
        Self { lambda: 10.0 }
    }
}

impl RegularizationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub tau: f64,
    pub lambda_f: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { tau: 0.1, lambda_f: 0.1 }
    }
}

impl FusionConfig {
    /// Temperature used in the low-resource setting.
    pub const LOW_RESOURCE_TAU: f64 = 0.02;

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        check_lambda_f(self.lambda_f)
    }
}

fn check_lambda_f(lambda_f: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda_f) {
        return Err(Error::Config(format!("lambda_f must be in [0, 1], got {lambda_f}")));
    }
    Ok(())
}

/// Per-step scalar values of an objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    /// ASR or fused negative log-likelihood.
    pub nll: f64,
    pub reg: f64,
    pub cosine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Summed ASR loss, or summed fused loss for the fused objective.
    pub asr_or_fused: f64,
    /// Summed (unweighted) regularization term.
    pub reg: f64,
    pub lambda: f64,
    pub steps: Vec<StepLoss>,
}

impl LossBreakdown {
    pub fn mean_cosine(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.cosine).sum::<f64>() / self.steps.len() as f64
    }

    pub fn log_line(&self, step: usize) -> serde_json::Value {
        serde_json::json!({
            "step": step,
            "total": self.total,
            "asr_or_fused": self.asr_or_fused,
            "reg": self.reg,
            "mean_cosine": self.mean_cosine(),
        })
    }
}

/// Scalar loss node plus its value breakdown.
#[derive(Clone, Debug)]
pub struct Objective {
    pub loss: NodeId,
    pub breakdown: LossBreakdown,
}

/// `-log p[y]`.
pub fn asr_loss(g: &mut Graph<'_>, p_phi: NodeId, y: usize) -> Result<NodeId> {
    let py = g.pick(p_phi, y)?;
    let lp = g.log(py);
    Ok(g.scale(lp, -1.0))
}

/// Same form as [`asr_loss`], applied to the fused distribution.
pub fn fused_loss(g: &mut Graph<'_>, p_fused: NodeId, y: usize) -> Result<NodeId> {
    asr_loss(g, p_fused, y)
}

/// `1 - cos(e_tilde, e_target)`; `e_target` should be a frozen node.
pub fn reg_loss(g: &mut Graph<'_>, e_tilde: NodeId, e_target: NodeId) -> Result<NodeId> {
    let c = g.cosine_similarity(e_tilde, e_target)?;
    Ok(g.affine(c, -1.0, 1.0))
}

fn name_degenerate_row(e: Error) -> Error {
    match e {
        Error::Degenerate(m) if m.starts_with("table row") => {
            Error::Degenerate(m.replacen("table row", "embedding of token", 1))
        }
        other => other,
    }
}

/// Temperature softmax over the cosine between `e_tilde` and every table
/// row. `table` should be a frozen node.
pub fn cosine_softmax(g: &mut Graph<'_>, e_tilde: NodeId, table: NodeId, tau: f64) -> Result<NodeId> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    let cos = g.row_cosines(e_tilde, table).map_err(name_degenerate_row)?;
    g.softmax_with_temperature(cos, tau)
}

/// `(1 - lambda_f) p_phi + lambda_f p_theta`.
pub fn fuse(g: &mut Graph<'_>, p_phi: NodeId, p_theta: NodeId, lambda_f: f64) -> Result<NodeId> {
    check_lambda_f(lambda_f)?;
    let a = g.scale(p_phi, 1.0 - lambda_f);
    let b = g.scale(p_theta, lambda_f);
    g.add(a, b)
}

/// Value form of [`cosine_softmax`].
pub fn cosine_softmax_values(e_tilde: &[f64], table: &EmbeddingTable, tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    let m = table.matrix();
    let cos = (0..m.rows())
        .map(|r| {
            cosine(e_tilde, m.row(r)).map_err(|e| match e {
                Error::Degenerate(msg) => Error::Degenerate(format!("embedding of token {r}: {msg}")),
                other => other,
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    softmax(&cos, tau)
}

/// Value form of [`fuse`].
pub fn fuse_values(p_phi: &[f64], p_theta: &[f64], lambda_f: f64) -> Result<Vec<f64>> {
    check_lambda_f(lambda_f)?;
    if p_phi.len() != p_theta.len() {
        return Err(Error::Shape(format!("fuse of lengths {} and {}", p_phi.len(), p_theta.len())));
    }
    Ok(p_phi
        .iter()
        .zip(p_theta)
        .map(|(&a, &b)| (1.0 - lambda_f) * a + lambda_f * b)
        .collect())
}

fn check_alignment(steps: &[StepNodes], targets: &[usize]) -> Result<()> {
    if steps.len() != targets.len() {
        return Err(Error::Contract(format!(
            "{} decoder steps for {} targets",
            steps.len(),
            targets.len()
        )));
    }
    if steps.is_empty() {
        return Err(Error::Data("empty rollout".into()));
    }
    Ok(())
}

/// Sums `nll_t + lambda * reg_t` over steps, left to right.
fn assemble(
    g: &mut Graph<'_>,
    nll: Vec<NodeId>,
    reg: Option<Vec<NodeId>>,
    lambda: f64,
) -> Result<Objective> {
    let mut total: Option<NodeId> = None;
    let mut steps = Vec::with_capacity(nll.len());
    let (mut nll_sum, mut reg_sum) = (0.0, 0.0);
    for (t, &n) in nll.iter().enumerate() {
        let term = match &reg {
            Some(r) => {
                let w = g.scale(r[t], lambda);
                g.add(n, w)?
            }
            None => n,
        };
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
        let nv = g.value(n).item();
        let rv = reg.as_ref().map_or(0.0, |r| g.value(r[t]).item());
        nll_sum += nv;
        reg_sum += rv;
        steps.push(StepLoss { nll: nv, reg: rv, cosine: 1.0 - rv });
    }
    let loss = total.expect("non-empty rollout");
    let breakdown = LossBreakdown {
        total: g.value(loss).item(),
        asr_or_fused: nll_sum,
        reg: reg_sum,
        lambda,
        steps,
    };
    Ok(Objective { loss, breakdown })
}

fn reg_terms<'a>(
    g: &mut Graph<'a>,
    steps: &[StepNodes],
    targets: &[usize],
    table: NodeId,
) -> Result<Vec<NodeId>> {
    steps
        .iter()
        .zip(targets)
        .map(|(s, &y)| {
            let row = g.slice_row(table, y).map_err(|_| {
                Error::Lookup(format!("target {y} outside embedding table"))
            })?;
            reg_loss(g, s.e_tilde, row)
        })
        .collect()
}

/// Summed ASR loss alone.
pub fn asr_objective(g: &mut Graph<'_>, steps: &[StepNodes], targets: &[usize]) -> Result<Objective> {
    check_alignment(steps, targets)?;
    let nll = steps
        .iter()
        .zip(targets)
        .map(|(s, &y)| asr_loss(g, s.p_phi, y))
        .collect::<Result<Vec<_>>>()?;
    assemble(g, nll, None, 0.0)
}

/// `sum_t (L_asr + lambda * L_reg)`.
pub fn combined_objective<'a>(
    g: &mut Graph<'a>,
    steps: &[StepNodes],
    targets: &[usize],
    table: &'a EmbeddingTable,
    reg: &RegularizationConfig,
) -> Result<Objective> {
    reg.validate()?;
    check_alignment(steps, targets)?;
    let nll = steps
        .iter()
        .zip(targets)
        .map(|(s, &y)| asr_loss(g, s.p_phi, y))
        .collect::<Result<Vec<_>>>()?;
    let tn = g.constant_ref(table.matrix());
    let r = reg_terms(g, steps, targets, tn)?;
    assemble(g, nll, Some(r), reg.lambda)
}

/// `sum_t (L_fused + lambda * L_reg)`.
pub fn combined_fused_objective<'a>(
    g: &mut Graph<'a>,
    steps: &[StepNodes],
    targets: &[usize],
    table: &'a EmbeddingTable,
    reg: &RegularizationConfig,
    fusion: &FusionConfig,
) -> Result<Objective> {
    reg.validate()?;
    fusion.validate()?;
    check_alignment(steps, targets)?;
    let tn = g.constant_ref(table.matrix());
    let mut nll = Vec::with_capacity(steps.len());
    for (s, &y) in steps.iter().zip(targets) {
        let p_theta = cosine_softmax(g, s.e_tilde, tn, fusion.tau)?;
        let p = fuse(g, s.p_phi, p_theta, fusion.lambda_f)?;
        nll.push(fused_loss(g, p, y)?);
    }
    let r = reg_terms(g, steps, targets, tn)?;
    assemble(g, nll, Some(r), reg.lambda)
}

/// The objective selected by `mode`. Baseline ignores `table`.
pub fn objective_for_mode<'a>(
    g: &mut Graph<'a>,
    steps: &[StepNodes],
    targets: &[usize],
    table: Option<&'a EmbeddingTable>,
    mode: TrainMode,
    reg: &RegularizationConfig,
    fusion: &FusionConfig,
) -> Result<Objective> {
    let need = || Error::Config(format!("mode {mode} needs an embedding table"));
    match mode {
        TrainMode::Baseline => asr_objective(g, steps, targets),
        TrainMode::Reg => combined_objective(g, steps, targets, table.ok_or_else(need)?, reg),
        TrainMode::Fused => {
            combined_fused_objective(g, steps, targets, table.ok_or_else(need)?, reg, fusion)
        }
    }
}

/// Cosine between a projected embedding and the target row, as a value.
pub fn target_cosine(e_tilde: &Tensor, table: &EmbeddingTable, y: usize) -> Result<f64> {
    cosine(e_tilde.data(), table.row(y)?)
}
