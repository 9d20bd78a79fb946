//! Linear-β DDPM: schedule, forward noising, the conditioned
//! epsilon-prediction loss and ancestral sampling.

use crate::backbone::{BoundParams, Conditions, Denoiser};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::numcore::{Graph, Rng, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn snr(&self, t: usize) -> f64 {
        self.alpha_bar[t] / (1.0 - self.alpha_bar[t])
    }

    /// Posterior variance `β̃_t`; zero at `t = 0`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        if t == 0 {
            return 0.0;
        }
        self.beta[t] * (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t])
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return contract_err(format!("timestep {t} outside 0..{}", self.steps()));
        }
        Ok(())
    }
}

/// Linear β schedule from `beta_start` to `beta_end` over `steps` steps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Config(format!("schedule needs at least 2 steps, got {steps}")));
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
    })
}

/// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε`.
pub fn q_sample(z0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    if z0.shape() != eps.shape() {
        return shape_err(format!(
            "noise shape {:?} vs latent {:?}",
            eps.shape(),
            z0.shape()
        ));
    }
    let a = schedule.alpha_bar[t].sqrt();
    let s = (1.0 - schedule.alpha_bar[t]).sqrt();
    Tensor::new(
        z0.shape(),
        z0.data().iter().zip(eps.data()).map(|(z, e)| a * z + s * e).collect(),
    )
}

/// One training example: clean latent, its noise draw, timestep and conditions.
#[derive(Clone, Debug)]
pub struct DiffusionItem {
    pub z0: Tensor,
    pub eps: Tensor,
    pub t: usize,
    pub cond: Conditions,
}

#[derive(Clone, Debug, Default)]
pub struct DiffusionBatch {
    pub items: Vec<DiffusionItem>,
}

/// Records `mean ‖ε − ε̂(z_t, t, p, l, e)‖²` over the batch on `g`.
pub fn denoise_loss_graph(
    g: &mut Graph,
    bound: &BoundParams,
    model: &Denoiser,
    batch: &DiffusionBatch,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    if batch.items.is_empty() {
        return contract_err("empty diffusion batch");
    }
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for item in &batch.items {
        let z_t = q_sample(&item.z0, item.t, &item.eps, schedule)?;
        let pred = model.forward(g, bound, &z_t, item.t, &item.cond)?;
        let target = g.constant(model.patch_rows(&item.eps)?);
        let diff = g.sub(pred, target)?;
        let sq = g.square(diff);
        let s = g.sum(sq);
        count += item.eps.len();
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    Ok(g.scale(total.unwrap(), 1.0 / count as f64))
}

/// Value of the denoising loss.
pub fn denoise_loss(batch: &DiffusionBatch, model: &Denoiser, schedule: &NoiseSchedule) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.bind_frozen(&mut g);
    let loss = denoise_loss_graph(&mut g, &bound, model, batch, schedule)?;
    Ok(g.value(loss).data()[0])
}

/// Ancestral update `z_t → z_{t−1}` given the predicted noise.
pub fn ddpm_step(
    z_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor> {
    schedule.check_t(t)?;
    if z_t.shape() != eps_hat.shape() {
        return shape_err(format!(
            "prediction shape {:?} vs latent {:?}",
            eps_hat.shape(),
            z_t.shape()
        ));
    }
    let beta = schedule.beta[t];
    let coef = beta / (1.0 - schedule.alpha_bar[t]).sqrt();
    let inv_sqrt_alpha = 1.0 / schedule.alpha[t].sqrt();
    let sigma = schedule.posterior_variance(t).sqrt();
    let data = z_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(z, e)| {
            let mean = (z - coef * e) * inv_sqrt_alpha;
            if t > 0 {
                mean + sigma * rng.normal()
            } else {
                mean
            }
        })
        .collect();
    Tensor::new(z_t.shape(), data)
}

/// Full reverse chain from `z_T ~ N(0, I)` for a batch of condition sets;
/// sample `i` draws from `rng.split(i)`. Returns clean latents.
pub fn sample_batch(
    model: &Denoiser,
    conditions: &[Conditions],
    schedule: &NoiseSchedule,
    rng: &Rng,
    shape: &[usize],
) -> Result<Vec<Tensor>> {
    if shape != model.config.latent.dims() {
        return Err(Error::Config(format!(
            "requested latent shape {shape:?} but the model is configured for {:?}",
            model.config.latent.dims()
        )));
    }
    if schedule.steps() > model.config.timesteps {
        return Err(Error::Config(format!(
            "schedule has {} steps but the model embeds only {}",
            schedule.steps(),
            model.config.timesteps
        )));
    }
    let mut rngs: Vec<Rng> = (0..conditions.len()).map(|i| rng.split(i as u64)).collect();
    let mut z: Vec<Tensor> = rngs.iter_mut().map(|r| r.normal_tensor(shape)).collect();
    for t in (0..schedule.steps()).rev() {
        let items: Vec<(Tensor, usize, Conditions)> = z
            .iter()
            .zip(conditions)
            .map(|(zi, c)| (zi.clone(), t, c.clone()))
            .collect();
        let eps = model.predict_epsilon_batch(&items)?;
        for ((zi, e), r) in z.iter_mut().zip(&eps).zip(rngs.iter_mut()) {
            *zi = ddpm_step(zi, t, e, schedule, r)?;
        }
    }
    if z.iter().any(|zi| !zi.is_finite()) {
        return Err(Error::Numeric("sampler produced non-finite latents".into()));
    }
    Ok(z)
}

/// Single-sample reverse chain.
pub fn sample(
    model: &Denoiser,
    conditions: &Conditions,
    schedule: &NoiseSchedule,
    rng: &Rng,
    shape: &[usize],
) -> Result<Tensor> {
    Ok(sample_batch(model, std::slice::from_ref(conditions), schedule, rng, shape)?.remove(0))
}
