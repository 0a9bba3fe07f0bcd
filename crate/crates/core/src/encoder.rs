//! Post-norm multi-head transformer encoder blocks.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::{self, DetRng};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub ffn_hidden: usize,
    pub dropout_rate: f64,
}

impl EncoderConfig {
    /// Eight heads, one block, a 4·d feed-forward layer and no dropout.
    pub fn new(d_model: usize) -> Self {
        EncoderConfig {
            d_model,
            num_heads: 8,
            num_blocks: 1,
            ffn_hidden: 4 * d_model,
            dropout_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::contract(format!(
                "d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.num_blocks == 0 || self.ffn_hidden == 0 {
            return Err(Error::contract("encoder needs at least one block and a non-empty FFN"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::contract("dropout rate must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Seeded uniform `±1/√fan_in` matrix.
pub fn scaled_uniform(rng: &mut DetRng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = 1.0 / libm::sqrt(fan_in as f64);
    let data = (0..fan_in * fan_out).map(|_| rng::uniform(rng, -limit, limit)).collect();
    Tensor::from_parts(alloc::vec![fan_in, fan_out], data)
}

/// Parameter ids of one encoder block.
#[derive(Debug, Clone, Copy)]
pub struct BlockParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

const BLOCK_TENSORS: [&str; 16] = [
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2",
    "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
];

/// All blocks of one encoder stack, named `encoder.<scope>.<block>.<tensor>`.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub scope: String,
    pub blocks: Vec<BlockParams>,
}

impl EncoderParams {
    pub fn prefix(scope: &str) -> String {
        format!("encoder.{scope}.")
    }

    /// Creates and registers freshly initialized parameters.
    pub fn init(params: &mut ParamStore, scope: &str, config: &EncoderConfig, rng: &mut DetRng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let h = config.ffn_hidden;
        for b in 0..config.num_blocks {
            let name = |t: &str| format!("encoder.{scope}.{b}.{t}");
            for w in ["wq", "wk", "wv", "wo"] {
                params.insert(&name(w), scaled_uniform(rng, d, d), true)?;
                let bias = format!("b{}", &w[1..]);
                params.insert(&name(&bias), Tensor::zeros(&[d]), true)?;
            }
            params.insert(&name("ffn_w1"), scaled_uniform(rng, d, h), true)?;
            params.insert(&name("ffn_b1"), Tensor::zeros(&[h]), true)?;
            params.insert(&name("ffn_w2"), scaled_uniform(rng, h, d), true)?;
            params.insert(&name("ffn_b2"), Tensor::zeros(&[d]), true)?;
            for ln in ["ln1", "ln2"] {
                params.insert(&name(&format!("{ln}_gain")), Tensor::filled(&[d], 1.0), true)?;
                params.insert(&name(&format!("{ln}_bias")), Tensor::zeros(&[d]), true)?;
            }
        }
        Self::resolve(params, scope, config)
    }

    pub fn resolve(params: &ParamStore, scope: &str, config: &EncoderConfig) -> Result<Self> {
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for b in 0..config.num_blocks {
            let mut ids = [ParamId(0); 16];
            for (slot, t) in ids.iter_mut().zip(BLOCK_TENSORS) {
                *slot = params.id(&format!("encoder.{scope}.{b}.{t}"))?;
            }
            let [wq, bq, wk, bk, wv, bv, wo, bo, ffn_w1, ffn_b1, ffn_w2, ffn_b2, ln1_gain, ln1_bias, ln2_gain, ln2_bias] =
                ids;
            blocks.push(BlockParams {
                wq, bq, wk, bk, wv, bv, wo, bo, ffn_w1, ffn_b1, ffn_w2, ffn_b2, ln1_gain, ln1_bias, ln2_gain,
                ln2_bias,
            });
        }
        Ok(EncoderParams {
            scope: String::from(scope),
            blocks,
        })
    }
}

fn linear(tape: &mut Tape<'_>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let wv = tape.param(w);
    let bv = tape.param(b);
    let xw = tape.matmul(x, wv)?;
    tape.add_row(xw, bv)
}

/// Optional dropout source; `None` or a zero rate disables dropout.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut DetRng,
}

fn dropout(tape: &mut Tape<'_>, x: Var, drop: &mut Option<Dropout<'_>>) -> Result<Var> {
    let Some(dr) = drop.as_mut() else { return Ok(x) };
    if dr.rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - dr.rate;
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).numel();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng::uniform(dr.rng, 0.0, 1.0) < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let m = tape.constant(Tensor::from_parts(shape, mask));
    tape.mul(x, m)
}

/// Multi-head self-attention. Returns the output and the attention node,
/// whose weights are available through [`Tape::attention_weights`].
pub fn mha(
    tape: &mut Tape<'_>,
    x: Var,
    block: &BlockParams,
    num_heads: usize,
    mask: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let q = linear(tape, x, block.wq, block.bq)?;
    let k = linear(tape, x, block.wk, block.bk)?;
    let v = linear(tape, x, block.wv, block.bv)?;
    let att = tape.attention(q, k, v, num_heads, mask)?;
    let out = linear(tape, att, block.wo, block.bo)?;
    Ok((out, att))
}

/// `LayerNorm(h + FFN(h))` with `h = LayerNorm(x + MHA(x))`, for each block.
pub fn encoder_forward(
    tape: &mut Tape<'_>,
    x: Var,
    params: &EncoderParams,
    config: &EncoderConfig,
    mask: Option<&[bool]>,
) -> Result<Var> {
    encoder_forward_with_dropout(tape, x, params, config, mask, None)
}

pub fn encoder_forward_with_dropout(
    tape: &mut Tape<'_>,
    x: Var,
    params: &EncoderParams,
    config: &EncoderConfig,
    mask: Option<&[bool]>,
    mut drop: Option<Dropout<'_>>,
) -> Result<Var> {
    if tape.value(x).cols() != config.d_model || tape.value(x).shape().len() != 2 {
        return Err(Error::shape("encoder input", tape.value(x).shape(), &[config.d_model]));
    }
    let mut h = x;
    for block in &params.blocks {
        let (att, _) = mha(tape, h, block, config.num_heads, mask)?;
        let att = dropout(tape, att, &mut drop)?;
        let res = tape.add(h, att)?;
        let g1 = tape.param(block.ln1_gain);
        let b1 = tape.param(block.ln1_bias);
        let normed = tape.layer_norm(res, g1, b1, LAYER_NORM_EPS)?;

        let hidden = linear(tape, normed, block.ffn_w1, block.ffn_b1)?;
        let hidden = tape.gelu(hidden);
        let ffn = linear(tape, hidden, block.ffn_w2, block.ffn_b2)?;
        let ffn = dropout(tape, ffn, &mut drop)?;
        let res2 = tape.add(normed, ffn)?;
        let g2 = tape.param(block.ln2_gain);
        let b2 = tape.param(block.ln2_bias);
        h = tape.layer_norm(res2, g2, b2, LAYER_NORM_EPS)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_eight_heads_one_block() {
        let c = EncoderConfig::new(16);
        assert_eq!((c.num_heads, c.num_blocks, c.ffn_hidden), (8, 1, 64));
        assert_eq!(c.dropout_rate, 0.0);
        assert!(EncoderConfig { num_heads: 3, ..c }.validate().is_err());
    }

    #[test]
    fn init_registers_named_tensors() {
        let mut params = ParamStore::new();
        let mut r = rng::stream(1, 0);
        let c = EncoderConfig { num_blocks: 2, ..EncoderConfig::new(8) };
        let enc = EncoderParams::init(&mut params, "shared", &c, &mut r).unwrap();
        assert_eq!(enc.blocks.len(), 2);
        assert_eq!(params.len(), 32);
        assert_eq!(params.by_name("encoder.shared.1.ffn_w1").unwrap().shape(), &[8, 32]);
        let w = params.by_name("encoder.shared.0.wq").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 1.0 / 8f64.sqrt()));
    }
}
