//! Linear-β DDPM: schedules, forward noising, ancestral sampling with full
//! trajectory recording, and per-step Gaussian log-densities.
//!
//! Timesteps are 1-based. Step `t` maps `x_t` to `x_{t-1}`; the last step
//! (`t = 1`) is deterministic.

use serde::{Deserialize, Serialize};

use crate::denoiser::{Conditioning, NoiseModel};
use crate::error::{Error, Result};
use crate::guidance::{cfg_estimate_graph, dropout_pattern, DropoutProbs, GuidanceScales};
use crate::numerics::{Graph, ParamStore, ParamVars, Tensor, Var};
use crate::rng::{self, tags, Rng};
use crate::synth::EditExample;

/// Range the final sample is clamped to before it is scored.
pub const OUTPUT_CLAMP: f64 = 1.5;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_min: 1e-4,
            beta_max: 0.1,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.steps, self.beta_min, self.beta_max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_std: Vec<f64>,
    id: String,
}

/// Linearly spaced β from `beta_min` to `beta_max` inclusive.
pub fn build_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Schedule(format!("need at least 2 steps, got {steps}")));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Schedule(format!(
            "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let beta = (0..steps)
        .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
        .collect();
    let mut s = NoiseSchedule::from_betas(beta)?;
    s.id = format!("linear/{steps}/{beta_min:e}/{beta_max:e}");
    Ok(s)
}

impl NoiseSchedule {
    /// Schedule from explicit β values.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.len() < 2 {
            return Err(Error::Schedule(format!("need at least 2 steps, got {}", beta.len())));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Schedule(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let posterior_std = (0..beta.len())
            .map(|i| {
                if i == 0 {
                    0.0
                } else {
                    ((1.0 - alpha_bar[i - 1]) / (1.0 - alpha_bar[i]) * beta[i]).sqrt()
                }
            })
            .collect();
        let id = format!("betas/{:?}", beta);
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            posterior_std,
            id,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// Identifier recorded in trajectories to detect schedule mismatches.
    pub fn id(&self) -> &str {
        &self.id
    }

    fn check_t(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Timestep { t, max: self.steps() });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.check_t(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.check_t(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.check_t(t)?])
    }

    pub fn posterior_std(&self, t: usize) -> Result<f64> {
        Ok(self.posterior_std[self.check_t(t)?])
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// `sqrt(ᾱ_t)·x0 + sqrt(1−ᾱ_t)·noise`.
pub fn forward_diffuse(x0: &Tensor, t: usize, noise: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.zip_map(noise, |x, n| a * x + b * n)?)
}

/// Coefficients `(1/sqrt(α_t), β_t/sqrt(1−ᾱ_t))` of the posterior mean.
fn mean_coefficients(t: usize, sched: &NoiseSchedule) -> Result<(f64, f64)> {
    Ok((
        1.0 / sched.alpha(t)?.sqrt(),
        sched.beta(t)? / (1.0 - sched.alpha_bar(t)?).sqrt(),
    ))
}

/// Posterior mean `(x_t − c·ε̂)/sqrt(α_t)`.
pub fn posterior_mean(x_t: &Tensor, eps_hat: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    let (inv_sqrt_a, c) = mean_coefficients(t, sched)?;
    Ok(x_t.zip_map(eps_hat, |x, e| inv_sqrt_a * (x - c * e))?)
}

fn posterior_mean_graph(g: &Graph, x_t: Var, eps_hat: Var, t: usize, sched: &NoiseSchedule) -> Result<Var> {
    let (inv_sqrt_a, c) = mean_coefficients(t, sched)?;
    let diff = g.sub(x_t, g.scale(eps_hat, c))?;
    Ok(g.scale(diff, inv_sqrt_a))
}

/// One ancestral step. Returns `(x_{t−1}, mean, std)`; no noise is drawn at `t = 1`.
pub fn ancestral_step(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(Tensor, Tensor, f64)> {
    let mean = posterior_mean(x_t, eps_hat, t, sched)?;
    let std = sched.posterior_std(t)?;
    if std == 0.0 {
        return Ok((mean.clone(), mean, std));
    }
    let z = rng::standard_normal(mean.shape(), rng);
    let next = mean.zip_map(&z, |m, z| m + std * z)?;
    Ok((next, mean, std))
}

/// Diagonal Gaussian log-density with a shared standard deviation.
pub fn gaussian_log_prob(x: &Tensor, mean: &Tensor, std: f64) -> Result<f64> {
    if !(std > 0.0) {
        return Err(Error::NonPositiveStd(std));
    }
    x.expect_same_shape(mean, "gaussian_log_prob")?;
    let sq: f64 = x.data().iter().zip(mean.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    let d = x.len() as f64;
    Ok(-0.5 * LN_2PI * d - std.ln() * d - sq / (2.0 * std * std))
}

fn gaussian_log_prob_graph(g: &Graph, x: &Tensor, mean: Var, std: f64) -> Result<Var> {
    if !(std > 0.0) {
        return Err(Error::NonPositiveStd(std));
    }
    let d = x.len() as f64;
    let diff = g.sub(g.constant(x.clone()), mean)?;
    let sq = g.sum(g.mul(diff, diff)?);
    Ok(g.add_scalar(g.scale(sq, -1.0 / (2.0 * std * std)), -(0.5 * LN_2PI + std.ln()) * d))
}

/// Noise estimate used by the sampling policy: guided when `scales` is set,
/// otherwise the plain fully-conditioned prediction.
pub fn policy_eps_graph<M: NoiseModel + ?Sized>(
    model: &M,
    g: &Graph,
    params: &ParamVars,
    x_t: Var,
    t: usize,
    cond: &Conditioning,
    scales: Option<GuidanceScales>,
) -> Result<Var> {
    match scales {
        Some(s) => cfg_estimate_graph(model, g, params, x_t, t, cond, s),
        None => model.forward(g, params, x_t, t, cond),
    }
}

fn policy_eps<M: NoiseModel + ?Sized>(
    model: &M,
    params: &ParamStore,
    x_t: &Tensor,
    t: usize,
    cond: &Conditioning,
    scales: Option<GuidanceScales>,
) -> Result<Tensor> {
    let g = Graph::new();
    let vars = ParamVars::register(&g, params);
    let x = g.constant(x_t.clone());
    let out = policy_eps_graph(model, &g, &vars, x, t, cond, scales)?;
    let v = g.value(out).clone();
    Ok(v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub state: Tensor,
    pub mean: Tensor,
    pub std: f64,
    pub action: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub seed: u64,
    pub conditioning: Conditioning,
    pub schedule_id: String,
    /// Records for `t = T, T−1, …, 1`.
    pub steps: Vec<StepRecord>,
    pub final_x0: Tensor,
}

impl Trajectory {
    pub fn initial_state(&self) -> &Tensor {
        &self.steps[0].state
    }

    /// The final sample clamped for scoring.
    pub fn output(&self) -> Tensor {
        self.final_x0.map(|v| v.clamp(-OUTPUT_CLAMP, OUTPUT_CLAMP))
    }
}

/// Initial state `x_T` for `seed`.
pub fn initial_noise(seed: u64, shape: &[usize]) -> Tensor {
    rng::standard_normal(shape, &mut rng::stream(seed, tags::INITIAL_NOISE))
}

/// Per-step noise stream for branch `branch` of `seed`.
pub fn branch_stream(seed: u64, branch: u64) -> Rng {
    rng::stream(rng::derive_seed(seed, branch), tags::INITIAL_NOISE)
}

/// Rolls out the policy from `x_T`, drawing per-step noise from `noise`.
#[allow(clippy::too_many_arguments)]
pub fn rollout<M: NoiseModel + ?Sized>(
    model: &M,
    params: &ParamStore,
    cond: &Conditioning,
    x_t: Tensor,
    noise: &mut Rng,
    seed: u64,
    scales: Option<GuidanceScales>,
    sched: &NoiseSchedule,
) -> Result<Trajectory> {
    cond.pattern()?;
    if let Some(s) = scales {
        s.validate()?;
    }
    let mut steps = Vec::with_capacity(sched.steps());
    let mut x = x_t;
    for t in (1..=sched.steps()).rev() {
        let eps = policy_eps(model, params, &x, t, cond, scales)?;
        let (next, mean, std) = ancestral_step(&x, &eps, t, sched, noise)?;
        steps.push(StepRecord {
            t,
            state: x,
            mean,
            std,
            action: next.clone(),
        });
        x = next;
    }
    Ok(Trajectory {
        seed,
        conditioning: cond.clone(),
        schedule_id: sched.id().to_string(),
        steps,
        final_x0: x,
    })
}

/// One trajectory from `x_T` drawn from `seed`, with per-step noise on branch 0.
pub fn sample_trajectory<M: NoiseModel + ?Sized>(
    model: &M,
    params: &ParamStore,
    cond: &Conditioning,
    seed: u64,
    scales: Option<GuidanceScales>,
    sched: &NoiseSchedule,
) -> Result<Trajectory> {
    let x_t = initial_noise(seed, &model.image_size().shape());
    rollout(model, params, cond, x_t, &mut branch_stream(seed, 0), seed, scales, sched)
}

fn check_schedule(traj: &Trajectory, sched: &NoiseSchedule) -> Result<()> {
    if traj.schedule_id != sched.id() || traj.steps.len() != sched.steps() {
        return Err(Error::ScheduleMismatch {
            recorded: traj.schedule_id.clone(),
            given: sched.id().to_string(),
        });
    }
    Ok(())
}

/// Records `log π(action | state)` for one stochastic step of `traj`.
#[allow(clippy::too_many_arguments)]
pub fn step_log_prob_graph<M: NoiseModel + ?Sized>(
    model: &M,
    g: &Graph,
    params: &ParamVars,
    traj: &Trajectory,
    step: &StepRecord,
    scales: Option<GuidanceScales>,
    sched: &NoiseSchedule,
) -> Result<Var> {
    let x = g.constant(step.state.clone());
    let eps = policy_eps_graph(model, g, params, x, step.t, &traj.conditioning, scales)?;
    let mean = posterior_mean_graph(g, x, eps, step.t, sched)?;
    gaussian_log_prob_graph(g, &step.action, mean, sched.posterior_std(step.t)?)
}

/// `log π(action | state)` at one recorded step without keeping a tape.
pub fn step_log_prob<M: NoiseModel + ?Sized>(
    model: &M,
    params: &ParamStore,
    traj: &Trajectory,
    step: &StepRecord,
    scales: Option<GuidanceScales>,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let eps = policy_eps(model, params, &step.state, step.t, &traj.conditioning, scales)?;
    let mean = posterior_mean(&step.state, &eps, step.t, sched)?;
    gaussian_log_prob(&step.action, &mean, sched.posterior_std(step.t)?)
}

/// Log-densities of the recorded actions under `params`, for `t = T, …, 2`.
pub fn trajectory_log_prob<M: NoiseModel + ?Sized>(
    model: &M,
    params: &ParamStore,
    traj: &Trajectory,
    scales: Option<GuidanceScales>,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_schedule(traj, sched)?;
    traj.steps
        .iter()
        .filter(|s| s.t >= 2)
        .map(|s| step_log_prob(model, params, traj, s, scales, sched))
        .collect()
}

/// Records the denoising loss on a batch: mean squared error between the
/// sampled noise and the prediction, with `t` uniform on `1..=T` and
/// conditioning dropout.
pub fn ddpm_loss_graph<M: NoiseModel + ?Sized>(
    model: &M,
    g: &Graph,
    params: &ParamVars,
    batch: &[EditExample],
    sched: &NoiseSchedule,
    probs: DropoutProbs,
    rng: &mut Rng,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let mut total: Option<Var> = None;
    for ex in batch {
        let t = rand::Rng::random_range(rng, 1..=sched.steps());
        let noise = rng::standard_normal(ex.target.shape(), rng);
        let pattern = dropout_pattern(rng, probs)?;
        let cond = Conditioning::full(ex.scene.image.clone(), ex.style.image.clone(), ex.instruction).null_of(pattern);
        let x_t = g.constant(forward_diffuse(&ex.target, t, &noise, sched)?);
        let pred = model.forward(g, params, x_t, t, &cond)?;
        let diff = g.sub(pred, g.constant(noise))?;
        let mse = g.mean(g.mul(diff, diff)?);
        total = Some(match total {
            Some(acc) => g.add(acc, mse)?,
            None => mse,
        });
    }
    Ok(g.scale(total.expect("nonempty batch"), 1.0 / batch.len() as f64))
}

/// Value of [`ddpm_loss_graph`] without keeping gradients.
pub fn ddpm_loss<M: NoiseModel + ?Sized>(
    model: &M,
    params: &ParamStore,
    batch: &[EditExample],
    sched: &NoiseSchedule,
    probs: DropoutProbs,
    rng: &mut Rng,
) -> Result<f64> {
    crate::numerics::value_only(params, |g, vars| ddpm_loss_graph(model, g, vars, batch, sched, probs, rng))
}
