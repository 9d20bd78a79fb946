//! Seeded finite-difference checks for every differentiable operation family.
//!
//! Each check reduces its operation to a scalar through a fixed random
//! weighting (a plain sum would hide errors, e.g. softmax rows always sum to
//! one) and compares tape gradients with central differences.

use serde::{Deserialize, Serialize};

use crate::backbone::{
    block_forward, mm_attention, AttentionParams, BlockParams, BoundParams, ConditionKind, Denoiser, LatentShape,
    ModelConfig, ParamStore,
};
use crate::diffusion::{denoise_loss_graph, make_schedule, DiffusionBatch, DiffusionItem};
use crate::encoders::{Encoders, SurrogateEncoderParams};
use crate::error::{Error, Result};
use crate::numcore::{grad_check_many, Graph, Probe, Rng, Tensor, Var};
use crate::synthdata::gen_sample;

pub const OPS: [&str; 7] = [
    "matmul",
    "softmax",
    "layer_norm",
    "gelu",
    "mm_attention",
    "block_forward",
    "denoise_loss",
];

/// Noise added to block parameters: enough to open every gate, small enough
/// that no softmax saturates (saturated rows leave gradients below what f64
/// central differences can resolve at eps = 1e-5).
pub const BLOCK_PERTURBATION: f64 = 0.1;

/// Fraction of denoiser parameters probed by the full-loss check.
pub const LOSS_PROBE_FRACTION: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpCheck {
    pub op: String,
    pub max_rel_error: f64,
    pub probed: usize,
}

fn weighted_sum(g: &mut Graph, out: Var, rng: &mut Rng) -> Result<Var> {
    let w = rng.normal_tensor(g.shape(out));
    let w = g.constant(w);
    let y = g.mul(out, w)?;
    Ok(g.sum(y))
}

fn count(inputs: &[Tensor]) -> usize {
    inputs.iter().map(Tensor::len).sum()
}

fn perturb(store: &mut ParamStore, rng: &mut Rng, std: f64) {
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += std * rng.normal();
        }
    }
}

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn elementwise(name: &str, seed: u64, eps: f64) -> Result<OpCheck> {
    let mut rng = Rng::new(seed);
    let weights = rng.split(1);
    let (inputs, f): (Vec<Tensor>, OpFn) = match name {
        "matmul" => (
            vec![rng.normal_tensor(&[4, 5]), rng.normal_tensor(&[5, 3])],
            Box::new(|g, v| g.matmul(v[0], v[1])),
        ),
        "softmax" => (vec![rng.normal_scaled(&[3, 6], 2.0)], Box::new(|g, v| Ok(g.softmax(v[0])))),
        "layer_norm" => (
            vec![
                rng.normal_tensor(&[4, 6]),
                rng.normal_tensor(&[6]).map(|x| 1.0 + 0.3 * x),
                rng.normal_scaled(&[6], 0.3),
            ],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-6)),
        ),
        "gelu" => (vec![rng.normal_scaled(&[4, 5], 2.0)], Box::new(|g, v| Ok(g.gelu(v[0])))),
        _ => return Err(Error::Contract(format!("unknown operation {name}"))),
    };
    let err = grad_check_many(
        |g, v| {
            let out = f(g, v)?;
            weighted_sum(g, out, &mut weights.clone())
        },
        &inputs,
        eps,
        &Probe::All,
    )?;
    Ok(OpCheck {
        op: name.into(),
        max_rel_error: err,
        probed: count(&inputs),
    })
}

fn attention_check(seed: u64, eps: f64) -> Result<OpCheck> {
    let (d, heads) = (4, 2);
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let params = AttentionParams::new(&mut store, &mut rng, "attn", d, heads)?;
    let weights = rng.split(1);
    let mut inputs = vec![rng.normal_tensor(&[3, d]), rng.normal_tensor(&[2, d])];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    let err = grad_check_many(
        |g, v| {
            let bound = BoundParams::from_vars(v[2..].to_vec());
            let (a, b) = mm_attention(g, &bound, &params, v[0], v[1])?;
            let joint = g.concat_rows(&[a, b])?;
            weighted_sum(g, joint, &mut weights.clone())
        },
        &inputs,
        eps,
        &Probe::All,
    )?;
    Ok(OpCheck {
        op: "mm_attention".into(),
        max_rel_error: err,
        probed: count(&inputs),
    })
}

/// Block inputs `[z, caption, layout, embedding, code, params...]` with every
/// parameter randomized so the gates are open.
pub fn block_check_inputs(seed: u64, d: usize, heads: usize) -> Result<(BlockParams, Vec<Tensor>)> {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let block = BlockParams::new(&mut store, &mut rng, "block", d, heads)?;
    perturb(&mut store, &mut rng, BLOCK_PERTURBATION);
    let mut inputs = vec![
        rng.normal_tensor(&[4, d]),
        rng.normal_tensor(&[3, d]),
        rng.normal_tensor(&[4, d]),
        rng.normal_tensor(&[1, d]),
        rng.normal_tensor(&[1, d]),
    ];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    Ok((block, inputs))
}

/// Scalar reduction of one block used by the block gradient check.
pub fn block_scalar(g: &mut Graph, block: &BlockParams, v: &[Var], weights: &Rng) -> Result<Var> {
    let bound = BoundParams::from_vars(v[5..].to_vec());
    let (z, conds) = block_forward(g, &bound, block, v[0], [v[1], v[2], v[3]], v[4])?;
    let all = g.concat_rows(&[z, conds[0], conds[1], conds[2]])?;
    weighted_sum(g, all, &mut weights.clone())
}

fn block_check(seed: u64, eps: f64) -> Result<OpCheck> {
    let (block, inputs) = block_check_inputs(seed, 8, 2)?;
    let weights = Rng::new(seed).split(1);
    let err = grad_check_many(|g, v| block_scalar(g, &block, v, &weights), &inputs, eps, &Probe::All)?;
    Ok(OpCheck {
        op: "block_forward".into(),
        max_rel_error: err,
        probed: count(&inputs),
    })
}

/// A small denoiser with randomized parameters and a two-item batch, one of
/// whose items has its layout replaced by the null token.
pub fn loss_check_setup(seed: u64) -> Result<(Denoiser, DiffusionBatch, crate::diffusion::NoiseSchedule)> {
    let d = 8;
    let enc = Encoders::new(SurrogateEncoderParams {
        d_model: d,
        ..SurrogateEncoderParams::default()
    })?;
    let config = ModelConfig {
        depth: 1,
        d_model: d,
        n_heads: 2,
        patch_size: 2,
        latent: LatentShape { channels: 4, h: 8, w: 8 },
        timesteps: 20,
    };
    let mut model = Denoiser::new(config, enc, seed)?;
    let mut rng = Rng::new(seed).split(7);
    perturb(&mut model.params, &mut rng, 0.2);
    let schedule = make_schedule(20, 1e-3, 0.2)?;
    let mut items = Vec::new();
    for (i, t) in [(0u64, 3usize), (1, 15)] {
        let s = gen_sample(seed.wrapping_add(i));
        let mut cond = crate::backbone::encode_conditions(&model.encoders, &s.caption_ids, &s.mask, &s.image)?;
        if i == 1 {
            cond = cond.without(ConditionKind::Layout);
        }
        let z0 = model.encoders.encode_image(&s.image)?;
        items.push(DiffusionItem {
            eps: rng.normal_tensor(z0.shape()),
            z0,
            t,
            cond,
        });
    }
    Ok((model, DiffusionBatch { items }, schedule))
}

fn loss_check(seed: u64, eps: f64) -> Result<OpCheck> {
    let (model, batch, schedule) = loss_check_setup(seed)?;
    let inputs: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let total = count(&inputs);
    let k = ((total as f64 * LOSS_PROBE_FRACTION).ceil() as usize).max(1);
    let mut rng = Rng::new(seed).split(11);
    let mut flat: Vec<usize> = (0..total).collect();
    for i in 0..k {
        let j = i + rng.below(total - i);
        flat.swap(i, j);
    }
    let offsets: Vec<usize> = inputs
        .iter()
        .scan(0, |acc, t| {
            let o = *acc;
            *acc += t.len();
            Some(o)
        })
        .collect();
    let components = flat[..k]
        .iter()
        .map(|&c| {
            let i = offsets.partition_point(|&o| o <= c) - 1;
            (i, c - offsets[i])
        })
        .collect();
    let err = grad_check_many(
        |g, v| {
            let bound = BoundParams::from_vars(v.to_vec());
            denoise_loss_graph(g, &bound, &model, &batch, &schedule)
        },
        &inputs,
        eps,
        &Probe::Components(components),
    )?;
    Ok(OpCheck {
        op: "denoise_loss".into(),
        max_rel_error: err,
        probed: k,
    })
}

/// Runs the check for one operation family.
pub fn check_op(name: &str, seed: u64, eps: f64) -> Result<OpCheck> {
    match name {
        "mm_attention" => attention_check(seed, eps),
        "block_forward" => block_check(seed, eps),
        "denoise_loss" => loss_check(seed, eps),
        _ => elementwise(name, seed, eps),
    }
}

/// Every family in [`OPS`] order.
pub fn run_suite(seed: u64, eps: f64) -> Result<Vec<OpCheck>> {
    OPS.iter().map(|op| check_op(op, seed, eps)).collect()
}
