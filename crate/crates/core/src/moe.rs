//! Shared bottom, per-task softmax gates, the mixture of experts and the task
//! towers.
//!
//! For task `k` the frame computes
//!
//! ```text
//! X   = shared(E)
//! g^k = topk(softmax(mean_pool(E) · W_g^k))
//! X^k = Σ_j g^k_j · expert_j(X)          (conventional)
//! X^k = Σ_j expert_j(g^k_j · X)          (literal)
//! y^k = tower_k(X^k)
//! ```
//!
//! Experts with zero gate weight are never evaluated.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::autograd::{Tape, Var};
use crate::encoder::{encoder_forward, scaled_uniform, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::DetRng;
use crate::tasks::Task;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExpertKind {
    /// Transformer encoder block.
    #[default]
    Transformer,
    /// Position-wise two-layer ReLU MLP.
    MlpRelu,
    /// Single-layer gated recurrent map over positions.
    Recurrent,
}

impl ExpertKind {
    pub const ALL: [ExpertKind; 3] = [ExpertKind::MlpRelu, ExpertKind::Recurrent, ExpertKind::Transformer];

    pub fn as_str(self) -> &'static str {
        match self {
            ExpertKind::Transformer => "transformer",
            ExpertKind::MlpRelu => "mlp_relu",
            ExpertKind::Recurrent => "recurrent",
        }
    }
}

impl fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExpertKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(ExpertKind::Transformer),
            "mlp_relu" => Ok(ExpertKind::MlpRelu),
            "recurrent" => Ok(ExpertKind::Recurrent),
            other => Err(Error::contract(format!("unknown expert kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GatingMode {
    /// Gate weights scale expert outputs.
    #[default]
    Conventional,
    /// Gate weights scale expert inputs.
    Literal,
}

impl GatingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GatingMode::Conventional => "conventional",
            GatingMode::Literal => "literal",
        }
    }
}

impl FromStr for GatingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conventional" => Ok(GatingMode::Conventional),
            "literal" => Ok(GatingMode::Literal),
            other => Err(Error::contract(format!("unknown gating mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MoeConfig {
    pub num_experts: usize,
    pub top_k: usize,
    pub expert_kind: ExpertKind,
    pub gating_mode: GatingMode,
}

impl Default for MoeConfig {
    fn default() -> Self {
        MoeConfig {
            num_experts: 4,
            top_k: 2,
            expert_kind: ExpertKind::Transformer,
            gating_mode: GatingMode::Conventional,
        }
    }
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 || self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::contract(format!(
                "need 1 <= top_k ({}) <= num_experts ({})",
                self.top_k, self.num_experts
            )));
        }
        Ok(())
    }
}

/// Parameters of one expert.
#[derive(Debug, Clone)]
pub enum ExpertParams {
    Transformer(EncoderParams),
    MlpRelu { w1: ParamId, b1: ParamId, w2: ParamId, b2: ParamId },
    Recurrent { wz: ParamId, uz: ParamId, bz: ParamId, wc: ParamId, uc: ParamId, bc: ParamId },
}

impl ExpertParams {
    pub fn scope(index: usize) -> alloc::string::String {
        format!("expert{index}")
    }

    pub fn init(
        params: &mut ParamStore,
        index: usize,
        kind: ExpertKind,
        enc: &EncoderConfig,
        rng: &mut DetRng,
    ) -> Result<Self> {
        let d = enc.d_model;
        match kind {
            ExpertKind::Transformer => Ok(ExpertParams::Transformer(EncoderParams::init(
                params,
                &Self::scope(index),
                enc,
                rng,
            )?)),
            ExpertKind::MlpRelu => {
                let h = enc.ffn_hidden;
                let n = |t: &str| format!("expert.{index}.mlp.{t}");
                params.insert(&n("w1"), scaled_uniform(rng, d, h), true)?;
                params.insert(&n("b1"), Tensor::zeros(&[h]), true)?;
                params.insert(&n("w2"), scaled_uniform(rng, h, d), true)?;
                params.insert(&n("b2"), Tensor::zeros(&[d]), true)?;
                Self::resolve(params, index, kind, enc)
            }
            ExpertKind::Recurrent => {
                let n = |t: &str| format!("expert.{index}.rnn.{t}");
                for (w, u, b) in [("wz", "uz", "bz"), ("wc", "uc", "bc")] {
                    params.insert(&n(w), scaled_uniform(rng, d, d), true)?;
                    params.insert(&n(u), scaled_uniform(rng, d, d), true)?;
                    params.insert(&n(b), Tensor::zeros(&[d]), true)?;
                }
                Self::resolve(params, index, kind, enc)
            }
        }
    }

    pub fn resolve(params: &ParamStore, index: usize, kind: ExpertKind, enc: &EncoderConfig) -> Result<Self> {
        Ok(match kind {
            ExpertKind::Transformer => ExpertParams::Transformer(EncoderParams::resolve(params, &Self::scope(index), enc)?),
            ExpertKind::MlpRelu => {
                let n = |t: &str| params.id(&format!("expert.{index}.mlp.{t}"));
                ExpertParams::MlpRelu { w1: n("w1")?, b1: n("b1")?, w2: n("w2")?, b2: n("b2")? }
            }
            ExpertKind::Recurrent => {
                let n = |t: &str| params.id(&format!("expert.{index}.rnn.{t}"));
                ExpertParams::Recurrent {
                    wz: n("wz")?,
                    uz: n("uz")?,
                    bz: n("bz")?,
                    wc: n("wc")?,
                    uc: n("uc")?,
                    bc: n("bc")?,
                }
            }
        })
    }

    /// Maps `L × d` to `L × d`.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, enc: &EncoderConfig) -> Result<Var> {
        match self {
            ExpertParams::Transformer(p) => encoder_forward(tape, x, p, enc, None),
            ExpertParams::MlpRelu { w1, b1, w2, b2 } => {
                let (w1, b1, w2, b2) = (tape.param(*w1), tape.param(*b1), tape.param(*w2), tape.param(*b2));
                let h = tape.matmul(x, w1)?;
                let h = tape.add_row(h, b1)?;
                let h = tape.relu(h);
                let o = tape.matmul(h, w2)?;
                tape.add_row(o, b2)
            }
            ExpertParams::Recurrent { wz, uz, bz, wc, uc, bc } => {
                // z_t = σ(x_t Wz + h_{t-1} Uz + bz), c_t = tanh(x_t Wc + h_{t-1} Uc + bc),
                // h_t = h_{t-1} + z_t ⊙ (c_t − h_{t-1}), h_{-1} = 0.
                let (wz, uz, bz) = (tape.param(*wz), tape.param(*uz), tape.param(*bz));
                let (wc, uc, bc) = (tape.param(*wc), tape.param(*uc), tape.param(*bc));
                let xz = tape.matmul(x, wz)?;
                let xz = tape.add_row(xz, bz)?;
                let xc = tape.matmul(x, wc)?;
                let xc = tape.add_row(xc, bc)?;
                let len = tape.value(x).rows();
                let mut states = Vec::with_capacity(len);
                let mut prev: Option<Var> = None;
                for t in 0..len {
                    let mut pre_z = tape.gather_rows(xz, &[t])?;
                    let mut pre_c = tape.gather_rows(xc, &[t])?;
                    if let Some(h) = prev {
                        let hz = tape.matmul(h, uz)?;
                        pre_z = tape.add(pre_z, hz)?;
                        let hc = tape.matmul(h, uc)?;
                        pre_c = tape.add(pre_c, hc)?;
                    }
                    let z = tape.sigmoid(pre_z);
                    let c = tape.tanh(pre_c);
                    let h = match prev {
                        Some(h) => {
                            let neg_h = tape.scale(h, -1.0);
                            let delta = tape.add(c, neg_h)?;
                            let step = tape.mul(z, delta)?;
                            tape.add(h, step)?
                        }
                        None => tape.mul(z, c)?,
                    };
                    states.push(h);
                    prev = Some(h);
                }
                tape.concat(&states, 0)
            }
        }
    }
}

/// Gate projection ids, one per task.
#[derive(Debug, Clone, Copy)]
pub struct GateNetwork {
    pub projections: [ParamId; 3],
    pub top_k: usize,
}

impl GateNetwork {
    pub fn name(task: Task) -> alloc::string::String {
        format!("gate.{}.w", task.as_str())
    }

    pub fn init(params: &mut ParamStore, config: &MoeConfig, d: usize, rng: &mut DetRng) -> Result<Self> {
        for task in Task::ALL {
            params.insert(&Self::name(task), scaled_uniform(rng, d, config.num_experts), true)?;
        }
        Self::resolve(params, config)
    }

    pub fn resolve(params: &ParamStore, config: &MoeConfig) -> Result<Self> {
        Ok(GateNetwork {
            projections: [
                params.id(&Self::name(Task::Ita))?,
                params.id(&Self::name(Task::Tia))?,
                params.id(&Self::name(Task::Cvr))?,
            ],
            top_k: config.top_k,
        })
    }
}

/// Indices of the `k` largest entries; ties go to the lower index.
pub fn top_k_indices(weights: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].partial_cmp(&weights[a]).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Gate weights of `task` for the input `e_input` (`L × d`), as a `1 × M` row.
pub fn gate_forward(tape: &mut Tape<'_>, gates: &GateNetwork, task: Task, e_input: Var) -> Result<Var> {
    let w = tape.param(gates.projections[task.index()]);
    let pooled = tape.mean_pool(e_input, 0)?;
    let logits = tape.matmul(pooled, w)?;
    let dense = tape.softmax(logits);
    let m = tape.value(dense).numel();
    if gates.top_k >= m {
        return Ok(dense);
    }
    let keep = top_k_indices(tape.value(dense).data(), gates.top_k);
    tape.topk_renorm(dense, &keep)
}

/// Expert outputs shared between tasks within one forward pass.
#[derive(Debug, Clone, Default)]
pub struct ExpertCache {
    outputs: Vec<Option<Var>>,
    evaluations: usize,
}

impl ExpertCache {
    pub fn new(num_experts: usize) -> Self {
        ExpertCache { outputs: vec![None; num_experts], evaluations: 0 }
    }

    /// Number of expert evaluations performed so far.
    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    pub fn is_evaluated(&self, j: usize) -> bool {
        self.outputs.get(j).is_some_and(Option::is_some)
    }
}

/// Mixture output for one task given gate weights `gate` (`1 × M`) and the
/// shared-bottom output `x`.
pub fn moe_forward(
    tape: &mut Tape<'_>,
    experts: &[ExpertParams],
    enc: &EncoderConfig,
    mode: GatingMode,
    gate: Var,
    x: Var,
    cache: &mut ExpertCache,
) -> Result<Var> {
    let weights = tape.value(gate).data().to_vec();
    if weights.len() != experts.len() {
        return Err(Error::shape("moe gate", &[weights.len()], &[experts.len()]));
    }
    let mut total: Option<Var> = None;
    for (j, expert) in experts.iter().enumerate() {
        if weights[j] == 0.0 {
            continue;
        }
        let g = tape.element(gate, j)?;
        let term = match mode {
            GatingMode::Conventional => {
                let out = match cache.outputs[j] {
                    Some(v) => v,
                    None => {
                        let v = expert.forward(tape, x, enc)?;
                        cache.outputs[j] = Some(v);
                        cache.evaluations += 1;
                        v
                    }
                };
                tape.scale_by(out, g)?
            }
            GatingMode::Literal => {
                let scaled = tape.scale_by(x, g)?;
                cache.evaluations += 1;
                expert.forward(tape, scaled, enc)?
            }
        };
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::contract("gate selected no expert"))
}

/// Mixture output computed densely: every expert is evaluated, weighted by its
/// gate value (zero or not). Used to check the skip rule of [`moe_forward`].
pub fn moe_forward_dense(
    tape: &mut Tape<'_>,
    experts: &[ExpertParams],
    enc: &EncoderConfig,
    gate: Var,
    x: Var,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (j, expert) in experts.iter().enumerate() {
        let g = tape.element(gate, j)?;
        let out = expert.forward(tape, x, enc)?;
        let term = tape.scale_by(out, g)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::contract("no experts"))
}

/// Per-task tower parameters.
#[derive(Debug, Clone)]
pub struct Towers {
    pub towers: [EncoderParams; 3],
}

impl Towers {
    pub fn scope(task: Task) -> alloc::string::String {
        format!("tower_{}", task.as_str())
    }

    pub fn init(params: &mut ParamStore, enc: &EncoderConfig, rng: &mut DetRng) -> Result<Self> {
        for task in Task::ALL {
            EncoderParams::init(params, &Self::scope(task), enc, rng)?;
        }
        Self::resolve(params, enc)
    }

    pub fn resolve(params: &ParamStore, enc: &EncoderConfig) -> Result<Self> {
        Ok(Towers {
            towers: [
                EncoderParams::resolve(params, &Self::scope(Task::Ita), enc)?,
                EncoderParams::resolve(params, &Self::scope(Task::Tia), enc)?,
                EncoderParams::resolve(params, &Self::scope(Task::Cvr), enc)?,
            ],
        })
    }
}

pub fn shared_bottom(tape: &mut Tape<'_>, shared: &EncoderParams, enc: &EncoderConfig, e_input: Var) -> Result<Var> {
    encoder_forward(tape, e_input, shared, enc, None)
}

pub fn tower_forward(tape: &mut Tape<'_>, towers: &Towers, enc: &EncoderConfig, task: Task, x_k: Var) -> Result<Var> {
    encoder_forward(tape, x_k, &towers.towers[task.index()], enc, None)
}
