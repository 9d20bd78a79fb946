use super::attention::{mm_attention, AttentionParams};
use super::params::{BoundParams, ParamId, ParamStore};
use crate::error::Result;
use crate::numcore::{Graph, Rng, Var};

pub const LN_EPS: f64 = 1e-6;

/// Image-stream sublayers modulated by the timestep: three attentions and the MLP.
const SUBLAYERS: usize = 4;

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        Self {
            gain: store.add_ones(&format!("{prefix}.gain"), &[d]),
            bias: store.add_zeros(&format!("{prefix}.bias"), &[d]),
        }
    }

    pub fn apply(&self, g: &mut Graph, bound: &BoundParams, x: Var) -> Result<Var> {
        g.layer_norm(x, bound.var(self.gain), bound.var(self.bias), LN_EPS)
    }
}

/// Pre-norm two-layer MLP `d → 4d → d`.
#[derive(Clone, Copy, Debug)]
pub struct MlpParams {
    pub norm: LayerNormParams,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl MlpParams {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, prefix: &str, d: usize) -> Self {
        Self {
            norm: LayerNormParams::new(store, &format!("{prefix}.norm"), d),
            w1: store.add_linear(&format!("{prefix}.w1"), rng, d, 4 * d),
            b1: store.add_zeros(&format!("{prefix}.b1"), &[4 * d]),
            w2: store.add_linear(&format!("{prefix}.w2"), rng, 4 * d, d),
            b2: store.add_zeros(&format!("{prefix}.b2"), &[d]),
        }
    }

    /// The MLP body without its norm.
    pub fn body(&self, g: &mut Graph, bound: &BoundParams, x: Var) -> Result<Var> {
        let h = g.linear(x, bound.var(self.w1), Some(bound.var(self.b1)))?;
        let h = g.gelu(h);
        g.linear(h, bound.var(self.w2), Some(bound.var(self.b2)))
    }
}

/// Norms and attention for the image stream paired with one condition stream.
#[derive(Clone, Copy, Debug)]
pub struct PairParams {
    pub image_norm: LayerNormParams,
    pub cond_norm: LayerNormParams,
    pub attention: AttentionParams,
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    /// Caption, layout and embedding pairs, applied in that order.
    pub pairs: [PairParams; 3],
    pub image_mlp: MlpParams,
    pub cond_mlps: [MlpParams; 3],
    /// `[d × 12d]` map from the timestep code to shift/scale/gate per sublayer.
    pub modulation_w: ParamId,
    pub modulation_b: ParamId,
}

impl BlockParams {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, prefix: &str, d: usize, n_heads: usize) -> Result<Self> {
        let names = ["caption", "layout", "embedding"];
        let mut pairs = Vec::with_capacity(3);
        for name in names {
            pairs.push(PairParams {
                image_norm: LayerNormParams::new(store, &format!("{prefix}.{name}.image_norm"), d),
                cond_norm: LayerNormParams::new(store, &format!("{prefix}.{name}.cond_norm"), d),
                attention: AttentionParams::new(store, rng, &format!("{prefix}.{name}.attn"), d, n_heads)?,
            });
        }
        let image_mlp = MlpParams::new(store, rng, &format!("{prefix}.image_mlp"), d);
        let cond_mlps = names.map(|name| MlpParams::new(store, rng, &format!("{prefix}.{name}.mlp"), d));
        // zero-initialized: every gate starts closed, so the block is the identity on the image stream
        let modulation_w = store.add_zeros(&format!("{prefix}.modulation.w"), &[d, 3 * SUBLAYERS * d]);
        let modulation_b = store.add_zeros(&format!("{prefix}.modulation.b"), &[3 * SUBLAYERS * d]);
        Ok(Self {
            pairs: [pairs[0], pairs[1], pairs[2]],
            image_mlp,
            cond_mlps,
            modulation_w,
            modulation_b,
        })
    }
}

/// `x · (1 + scale) + shift` with row-broadcast `scale`/`shift`.
pub fn modulate(g: &mut Graph, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let one_plus = g.affine(scale, 1.0, 1.0);
    let y = g.mul_row(x, one_plus)?;
    g.add_row(y, shift)
}

/// One denoiser block.
///
/// `cond_code` is the activated timestep code `[1 × d]`. The image stream is
/// updated by the caption, layout and embedding attentions in sequence and
/// then by its MLP, each through a timestep-controlled gate; condition
/// streams take plain residual updates.
pub fn block_forward(
    g: &mut Graph,
    bound: &BoundParams,
    block: &BlockParams,
    z: Var,
    conds: [Var; 3],
    cond_code: Var,
) -> Result<(Var, [Var; 3])> {
    let d = g.shape(z)[1];
    let mods = g.linear(cond_code, bound.var(block.modulation_w), Some(bound.var(block.modulation_b)))?;
    let chunk = |g: &mut Graph, i: usize| g.slice_cols(mods, i * d, d);

    let mut z = z;
    let mut conds = conds;
    for (k, pair) in block.pairs.iter().enumerate() {
        let (shift, scale, gate) = (chunk(g, 3 * k)?, chunk(g, 3 * k + 1)?, chunk(g, 3 * k + 2)?);
        let zn = pair.image_norm.apply(g, bound, z)?;
        let zn = modulate(g, zn, shift, scale)?;
        let cn = pair.cond_norm.apply(g, bound, conds[k])?;
        let (za, ca) = mm_attention(g, bound, &pair.attention, zn, cn)?;
        let za = g.mul_row(za, gate)?;
        z = g.add(z, za)?;
        conds[k] = g.add(conds[k], ca)?;
    }

    let m = 3 * (SUBLAYERS - 1);
    let (shift, scale, gate) = (chunk(g, m)?, chunk(g, m + 1)?, chunk(g, m + 2)?);
    let zn = block.image_mlp.norm.apply(g, bound, z)?;
    let zn = modulate(g, zn, shift, scale)?;
    let h = block.image_mlp.body(g, bound, zn)?;
    let h = g.mul_row(h, gate)?;
    z = g.add(z, h)?;

    for (k, mlp) in block.cond_mlps.iter().enumerate() {
        let cn = mlp.norm.apply(g, bound, conds[k])?;
        let h = mlp.body(g, bound, cn)?;
        conds[k] = g.add(conds[k], h)?;
    }
    Ok((z, conds))
}
