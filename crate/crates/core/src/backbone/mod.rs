//! The layout-conditioned diffusion transformer.

mod attention;
mod block;
mod params;

pub use attention::{mm_attention, multi_head_attention, AttentionParams, SideProjections};
pub use block::{block_forward, modulate, BlockParams, LayerNormParams, MlpParams, PairParams, LN_EPS};
pub use params::{BoundParams, ParamId, ParamStore};

use serde::{Deserialize, Serialize};

use crate::encoders::{extract_patches, fold_patches, grid_position_signal, sinusoid, Encoders, TokenStream};
use crate::error::{contract_err, Error, Result};
use crate::numcore::{Graph, Rng, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentShape {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
}

impl LatentShape {
    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.h, self.w]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub patch_size: usize,
    pub latent: LatentShape,
    /// Number of diffusion steps the timestep embedding accepts.
    pub timesteps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            d_model: 32,
            n_heads: 4,
            patch_size: 2,
            latent: LatentShape { channels: 4, h: 8, w: 8 },
            timesteps: 200,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.depth,
            self.d_model,
            self.n_heads,
            self.patch_size,
            self.latent.channels,
            self.latent.h,
            self.latent.w,
            self.timesteps,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::Config("d_model must be even".into()));
        }
        if !self.latent.h.is_multiple_of(self.patch_size) || !self.latent.w.is_multiple_of(self.patch_size) {
            return Err(Error::Config("latent is not divisible by patch_size".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.latent.h / self.patch_size, self.latent.w / self.patch_size)
    }

    pub fn patch_width(&self) -> usize {
        self.latent.channels * self.patch_size * self.patch_size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionKind {
    Caption,
    Layout,
    Embedding,
}

impl ConditionKind {
    pub const ALL: [ConditionKind; 3] = [Self::Caption, Self::Layout, Self::Embedding];

    pub fn index(self) -> usize {
        match self {
            Self::Caption => 0,
            Self::Layout => 1,
            Self::Embedding => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Caption => "caption",
            Self::Layout => "layout",
            Self::Embedding => "embedding",
        }
    }
}

/// Encoded condition streams for one sample; `None` means the stream is
/// replaced by its learned null token.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditions {
    pub streams: [Option<TokenStream>; 3],
}

impl Conditions {
    pub fn new(caption: TokenStream, layout: TokenStream, embedding: TokenStream) -> Self {
        Self {
            streams: [Some(caption), Some(layout), Some(embedding)],
        }
    }

    pub fn unconditional() -> Self {
        Self {
            streams: [None, None, None],
        }
    }

    pub fn get(&self, kind: ConditionKind) -> Option<&TokenStream> {
        self.streams[kind.index()].as_ref()
    }

    pub fn without(mut self, kind: ConditionKind) -> Self {
        self.streams[kind.index()] = None;
        self
    }

    pub fn without_all(mut self, kinds: &[ConditionKind]) -> Self {
        for &k in kinds {
            self.streams[k.index()] = None;
        }
        self
    }
}

/// Replaces the named stream with the null token on every batch member.
pub fn drop_condition(kind: ConditionKind, batch: &mut [Conditions]) {
    for c in batch {
        c.streams[kind.index()] = None;
    }
}

/// Sinusoidal timestep code before the learned MLP.
pub fn timestep_sinusoid(t: usize, dim: usize) -> Vec<f64> {
    sinusoid(t as f64, dim)
}

#[derive(Clone, Copy, Debug)]
struct TimeEmbedParams {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    time: TimeEmbedParams,
    blocks: Vec<BlockParams>,
    final_norm: LayerNormParams,
    final_mod_w: ParamId,
    final_mod_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    nulls: [ParamId; 3],
}

/// Trainable denoiser plus the frozen encoders it reads through.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: ModelConfig,
    pub encoders: Encoders,
    pub params: ParamStore,
    layout: Layout,
}

impl Denoiser {
    pub fn new(config: ModelConfig, encoders: Encoders, seed: u64) -> Result<Self> {
        config.validate()?;
        let ep = encoders.params;
        if ep.d_model != config.d_model
            || ep.patch_size != config.patch_size
            || ep.latent_channels != config.latent.channels
        {
            return Err(Error::Config(
                "encoder and model geometry disagree (d_model, patch_size or latent channels)".into(),
            ));
        }
        let d = config.d_model;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let time = TimeEmbedParams {
            w1: store.add_linear("time.w1", &mut rng, d, d),
            b1: store.add_zeros("time.b1", &[d]),
            w2: store.add_linear("time.w2", &mut rng, d, d),
            b2: store.add_zeros("time.b2", &[d]),
        };
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            blocks.push(BlockParams::new(&mut store, &mut rng, &format!("block{i}"), d, config.n_heads)?);
        }
        let final_norm = LayerNormParams::new(&mut store, "final.norm", d);
        let final_mod_w = store.add_zeros("final.modulation.w", &[d, 2 * d]);
        let final_mod_b = store.add_zeros("final.modulation.b", &[2 * d]);
        let head_w = store.add_zeros("final.head.w", &[d, config.patch_width()]);
        let head_b = store.add_zeros("final.head.b", &[config.patch_width()]);
        let nulls = ConditionKind::ALL.map(|k| {
            let t = rng.normal_scaled(&[1, d], 1.0);
            store.add(format!("null.{}", k.name()), t)
        });
        Ok(Self {
            config,
            encoders,
            params: store,
            layout: Layout {
                time,
                blocks,
                final_norm,
                final_mod_w,
                final_mod_b,
                head_w,
                head_b,
                nulls,
            },
        })
    }

    pub fn blocks(&self) -> &[BlockParams] {
        &self.layout.blocks
    }

    /// Learned token standing in for a dropped condition stream.
    pub fn null_token(&self, kind: ConditionKind) -> ParamId {
        self.layout.nulls[kind.index()]
    }

    fn check_latent(&self, z: &Tensor) -> Result<()> {
        if z.shape() != self.config.latent.dims() {
            return Err(Error::Config(format!(
                "latent shape {:?} does not match configured {:?}",
                z.shape(),
                self.config.latent.dims()
            )));
        }
        Ok(())
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.config.timesteps {
            return contract_err(format!(
                "timestep {t} outside 0..{}",
                self.config.timesteps
            ));
        }
        Ok(())
    }

    /// Timestep code `[1 × d]`: sinusoid followed by the learned MLP.
    pub fn timestep_embed(&self, g: &mut Graph, bound: &BoundParams, t: usize) -> Result<Var> {
        self.check_t(t)?;
        let p = self.layout.time;
        let s = g.constant(Tensor::row(&timestep_sinusoid(t, self.config.d_model)));
        let h = g.linear(s, bound.var(p.w1), Some(bound.var(p.b1)))?;
        let h = g.gelu(h);
        g.linear(h, bound.var(p.w2), Some(bound.var(p.b2)))
    }

    /// Image tokens of a noisy latent with the grid signal added.
    pub fn image_tokens(&self, z_t: &Tensor) -> Result<Tensor> {
        self.check_latent(z_t)?;
        let stream = self.encoders.patchify_latent(z_t)?;
        let (gh, gw) = self.config.grid();
        add_tensors(&stream.tokens, &grid_position_signal(gh, gw, self.config.d_model))
    }

    fn condition_var(&self, g: &mut Graph, bound: &BoundParams, cond: &Conditions, kind: ConditionKind) -> Result<Var> {
        match cond.get(kind) {
            None => Ok(bound.var(self.layout.nulls[kind.index()])),
            Some(s) => {
                if s.width() != self.config.d_model {
                    return Err(Error::Shape(format!(
                        "{} stream width {} vs d_model {}",
                        kind.name(),
                        s.width(),
                        self.config.d_model
                    )));
                }
                let tokens = match (kind, s.grid) {
                    (ConditionKind::Layout, Some((gh, gw))) => {
                        add_tensors(&s.tokens, &grid_position_signal(gh, gw, self.config.d_model))?
                    }
                    _ => s.tokens.clone(),
                };
                Ok(g.constant(tokens))
            }
        }
    }

    /// Records the full denoiser on `g`; returns the per-token prediction
    /// `[n × c·p²]` in patch layout.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        z_t: &Tensor,
        t: usize,
        cond: &Conditions,
    ) -> Result<Var> {
        let z_tokens = self.image_tokens(z_t)?;
        let mut z = g.constant(z_tokens);
        let t_emb = self.timestep_embed(g, bound, t)?;
        let code = g.gelu(t_emb);
        let mut conds = [
            self.condition_var(g, bound, cond, ConditionKind::Caption)?,
            self.condition_var(g, bound, cond, ConditionKind::Layout)?,
            self.condition_var(g, bound, cond, ConditionKind::Embedding)?,
        ];
        for block in &self.layout.blocks {
            let (nz, nc) = block_forward(g, bound, block, z, conds, code)?;
            z = nz;
            conds = nc;
        }
        let d = self.config.d_model;
        let l = &self.layout;
        let mods = g.linear(code, bound.var(l.final_mod_w), Some(bound.var(l.final_mod_b)))?;
        let shift = g.slice_cols(mods, 0, d)?;
        let scale = g.slice_cols(mods, d, d)?;
        let zn = l.final_norm.apply(g, bound, z)?;
        let zn = modulate(g, zn, shift, scale)?;
        g.linear(zn, bound.var(l.head_w), Some(bound.var(l.head_b)))
    }

    /// Latent-shaped noise prediction.
    pub fn predict_epsilon(&self, z_t: &Tensor, t: usize, cond: &Conditions) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let out = self.forward(&mut g, &bound, z_t, t, cond)?;
        self.unpatchify_output(g.value(out))
    }

    /// Several predictions recorded on one graph with shared parameters.
    pub fn predict_epsilon_batch(&self, items: &[(Tensor, usize, Conditions)]) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let mut outs = Vec::with_capacity(items.len());
        for (z, t, c) in items {
            outs.push(self.forward(&mut g, &bound, z, *t, c)?);
        }
        outs.iter().map(|&o| self.unpatchify_output(g.value(o))).collect()
    }

    /// Parameter leaves without gradient tracking, for inference.
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundParams {
        let mut store = self.params.clone();
        for t in store.tensors_mut() {
            t.requires_grad = false;
        }
        store.bind(g)
    }

    pub fn unpatchify_output(&self, tokens: &Tensor) -> Result<Tensor> {
        fold_patches(
            tokens,
            self.config.latent.channels,
            self.config.grid(),
            self.config.patch_size,
        )
    }

    /// Patch-layout view of a latent matching [`Denoiser::forward`]'s output.
    pub fn patch_rows(&self, latent: &Tensor) -> Result<Tensor> {
        self.check_latent(latent)?;
        Ok(extract_patches(latent, self.config.patch_size)?.0)
    }
}

fn add_tensors(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} + {:?}", a.shape(), b.shape())));
    }
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect())
}

/// Encodes a sample's caption, layout mask and appearance source.
pub fn encode_conditions(
    encoders: &Encoders,
    caption_ids: &[usize],
    mask: &Tensor,
    appearance: &Tensor,
) -> Result<Conditions> {
    Ok(Conditions::new(
        encoders.encode_text(caption_ids)?,
        encoders.encode_layout(mask)?,
        encoders.encode_visual(appearance)?,
    ))
}
