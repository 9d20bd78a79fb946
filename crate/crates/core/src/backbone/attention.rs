//! Joint attention over two modality streams.
//!
//! Each stream is projected with its own query/key/value matrices, the
//! projections are concatenated along the token axis, one scaled-dot-product
//! multi-head attention runs over the joint sequence, and the result is split
//! back and passed through per-stream output projections.

use super::params::{BoundParams, ParamId, ParamStore};
use crate::error::{shape_err, Result};
use crate::numcore::{Graph, Rng, Var};

/// Projections for one side of a modality pair.
#[derive(Clone, Copy, Debug)]
pub struct SideProjections {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl SideProjections {
    fn new(store: &mut ParamStore, rng: &mut Rng, prefix: &str, d: usize) -> Self {
        Self {
            wq: store.add_linear(&format!("{prefix}.wq"), rng, d, d),
            wk: store.add_linear(&format!("{prefix}.wk"), rng, d, d),
            wv: store.add_linear(&format!("{prefix}.wv"), rng, d, d),
            wo: store.add_linear(&format!("{prefix}.wo"), rng, d, d),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub a: SideProjections,
    pub b: SideProjections,
    pub d: usize,
    pub n_heads: usize,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, prefix: &str, d: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || !d.is_multiple_of(n_heads) {
            return shape_err(format!("{n_heads} heads do not divide width {d}"));
        }
        Ok(Self {
            a: SideProjections::new(store, rng, &format!("{prefix}.a"), d),
            b: SideProjections::new(store, rng, &format!("{prefix}.b"), d),
            d,
            n_heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }
}

/// Multi-head scaled-dot-product attention of `q` over `k`/`v` (all `[n × d]`).
pub fn multi_head_attention(g: &mut Graph, q: Var, k: Var, v: Var, n_heads: usize) -> Result<Var> {
    let d = g.shape(q)[1];
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let probs = g.softmax(scores);
        heads.push(g.matmul(probs, vh)?);
    }
    if n_heads == 1 {
        Ok(heads[0])
    } else {
        g.concat_cols(&heads)
    }
}

/// Joint attention over streams `a [na × d]` and `b [nb × d]`; returns the
/// updated `(a', b')` with token counts preserved.
pub fn mm_attention(
    g: &mut Graph,
    bound: &BoundParams,
    params: &AttentionParams,
    a: Var,
    b: Var,
) -> Result<(Var, Var)> {
    let (na, da) = g.value(a).dims2()?;
    let (nb, db) = g.value(b).dims2()?;
    if da != params.d || db != params.d {
        return shape_err(format!(
            "attention width {} vs streams {:?} and {:?}",
            params.d,
            g.shape(a),
            g.shape(b)
        ));
    }
    let qa = g.matmul(a, bound.var(params.a.wq))?;
    let ka = g.matmul(a, bound.var(params.a.wk))?;
    let va = g.matmul(a, bound.var(params.a.wv))?;
    let qb = g.matmul(b, bound.var(params.b.wq))?;
    let kb = g.matmul(b, bound.var(params.b.wk))?;
    let vb = g.matmul(b, bound.var(params.b.wv))?;
    let q = g.concat_rows(&[qa, qb])?;
    let k = g.concat_rows(&[ka, kb])?;
    let v = g.concat_rows(&[va, vb])?;
    let joint = multi_head_attention(g, q, k, v, params.n_heads)?;
    let parts = g.split_rows(joint, &[na, nb])?;
    let out_a = g.matmul(parts[0], bound.var(params.a.wo))?;
    let out_b = g.matmul(parts[1], bound.var(params.b.wo))?;
    Ok((out_a, out_b))
}
