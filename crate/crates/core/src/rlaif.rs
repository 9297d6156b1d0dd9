//! Post-training from AI feedback: pairs of rollouts from a shared initial
//! state are ranked by the scorer, and every recorded step of the preferred
//! rollout is treated as preferred over the matching step of the other.
//! The per-step objective is the DPO logistic loss against a frozen
//! reference policy.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Conditioning, NoiseModel};
use crate::diffusion::{
    branch_stream, initial_noise, rollout, step_log_prob, step_log_prob_graph, NoiseSchedule, Trajectory,
};
use crate::error::{Error, Result};
use crate::guidance::GuidanceScales;
use crate::numerics::{softplus, value_and_grad, Graph, ParamStore, ParamVars, Var};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rng::{self, tags};
use crate::scoring::{combine_and_rank, RawLosses, ScoreConfig, ScoreReport, Scorer, ScoringInput};
use crate::synth::EditExample;

/// Bound applied to each policy/reference log-ratio before the logistic.
pub const LOG_RATIO_CLAMP: f64 = 20.0;

/// `exp(r_w) / (exp(r_w) + exp(r_l))` without overflow.
pub fn bradley_terry_prob(r_w: f64, r_l: f64) -> f64 {
    let d = r_w - r_l;
    if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    }
}

/// `−ln σ(β·(clamp(w_θ − w_ref) − clamp(l_θ − l_ref)))`.
pub fn dpo_timestep_loss(logp_theta_w: f64, logp_ref_w: f64, logp_theta_l: f64, logp_ref_l: f64, beta: f64) -> f64 {
    let clamp = |r: f64| r.clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP);
    let delta = clamp(logp_theta_w - logp_ref_w) - clamp(logp_theta_l - logp_ref_l);
    softplus(-beta * delta)
}

fn dpo_loss_graph(g: &Graph, theta_w: Var, ref_w: f64, theta_l: Var, ref_l: f64, beta: f64) -> Result<Var> {
    let rw = g.clamp(g.add_scalar(theta_w, -ref_w), -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP);
    let rl = g.clamp(g.add_scalar(theta_l, -ref_l), -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP);
    let delta = g.sub(rw, rl)?;
    Ok(g.softplus(g.scale(delta, -beta)))
}

/// Two rollouts sharing conditioning and initial state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPair {
    pub seed: u64,
    pub branches: [Trajectory; 2],
}

/// Draws `x_T` from `seed` and rolls it out twice with independent per-step
/// noise streams.
pub fn generate_pair<M: NoiseModel + ?Sized>(
    model: &M,
    params: &ParamStore,
    cond: &Conditioning,
    seed: u64,
    scales: Option<GuidanceScales>,
    sched: &NoiseSchedule,
) -> Result<TrajectoryPair> {
    let x_t = initial_noise(seed, &model.image_size().shape());
    let a = rollout(model, params, cond, x_t.clone(), &mut branch_stream(seed, 0), seed, scales, sched)?;
    let b = rollout(model, params, cond, x_t, &mut branch_stream(seed, 1), seed, scales, sched)?;
    if a.initial_state() != b.initial_state() {
        return Err(Error::Degenerate("pair rollouts do not share their initial state".into()));
    }
    Ok(TrajectoryPair { seed, branches: [a, b] })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreferencePair {
    pub seed: u64,
    /// Which branch of the generated pair won.
    pub winner_index: usize,
    pub winner: Trajectory,
    pub loser: Trajectory,
    pub winner_report: ScoreReport,
    pub loser_report: ScoreReport,
}

fn scoring_input<'a>(task: &'a EditExample, generated: &'a crate::numerics::Tensor) -> ScoringInput<'a> {
    ScoringInput {
        generated,
        input: &task.scene.image,
        input_mask: &task.scene.region_mask,
        style: &task.style.image,
        style_mask: &task.style.mask,
    }
}

/// Raw losses of a generated image for `task`.
pub fn score_output(scorer: &dyn Scorer, task: &EditExample, output: &crate::numerics::Tensor) -> Result<RawLosses> {
    scorer.losses(&scoring_input(task, output))
}

/// Scores every output, normalizes over the whole batch, and orders each pair.
pub fn rank_pairs(
    pairs: Vec<TrajectoryPair>,
    tasks: &[&EditExample],
    scorer: &dyn Scorer,
    config: &ScoreConfig,
) -> Result<(Vec<PreferencePair>, Vec<[RawLosses; 2]>)> {
    let raw = pairs
        .iter()
        .zip(tasks)
        .map(|(p, task)| {
            Ok([
                score_output(scorer, task, &p.branches[0].output())?,
                score_output(scorer, task, &p.branches[1].output())?,
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    let ranking = combine_and_rank(&raw, config)?;
    let prefs = pairs
        .into_iter()
        .zip(ranking.winners.iter().zip(&ranking.reports))
        .map(|(p, (&w, reports))| {
            let [b0, b1] = p.branches;
            let (winner, loser) = if w == 0 { (b0, b1) } else { (b1, b0) };
            PreferencePair {
                seed: p.seed,
                winner_index: w,
                winner,
                loser,
                winner_report: reports[w],
                loser_report: reports[1 - w],
            }
        })
        .collect();
    Ok((prefs, raw))
}

/// One DPO term: pair index and index into the pair's step records.
pub type Term = (usize, usize);

/// Steps with a density (`t ≥ 2`), subsampled per pair when `subsample` is set.
pub fn sample_terms(prefs: &[PreferencePair], subsample: Option<usize>, seed: u64) -> Result<Vec<Term>> {
    let mut terms = Vec::new();
    for (k, p) in prefs.iter().enumerate() {
        let stochastic: Vec<usize> = (0..p.winner.steps.len()).filter(|&i| p.winner.steps[i].t >= 2).collect();
        let chosen: Vec<usize> = match subsample {
            None => stochastic,
            Some(n) => {
                if n == 0 || n > stochastic.len() {
                    return Err(Error::InvalidArgument(format!(
                        "timestep subsample {n} outside 1..={}",
                        stochastic.len()
                    )));
                }
                let mut r = rng::stream(rng::derive_seed(seed, k as u64), tags::TIMESTEPS);
                let mut idx: Vec<usize> = index::sample(&mut r, stochastic.len(), n).into_iter().collect();
                idx.sort_unstable();
                idx.into_iter().map(|i| stochastic[i]).collect()
            }
        };
        terms.extend(chosen.into_iter().map(|i| (k, i)));
    }
    Ok(terms)
}

/// Reference log-probabilities `(winner, loser)` for each term.
pub fn reference_log_probs<M: NoiseModel + ?Sized>(
    model: &M,
    reference: &ParamStore,
    prefs: &[PreferencePair],
    terms: &[Term],
    scales: Option<GuidanceScales>,
    sched: &NoiseSchedule,
) -> Result<Vec<(f64, f64)>> {
    terms
        .iter()
        .map(|&(k, i)| {
            let p = &prefs[k];
            Ok((
                step_log_prob(model, reference, &p.winner, &p.winner.steps[i], scales, sched)?,
                step_log_prob(model, reference, &p.loser, &p.loser.steps[i], scales, sched)?,
            ))
        })
        .collect()
}

/// Everything fixed while differentiating the step objective.
pub struct DpoBatch<'a> {
    pub prefs: &'a [PreferencePair],
    pub terms: &'a [Term],
    pub reference: &'a [(f64, f64)],
    pub beta: f64,
    pub scales: Option<GuidanceScales>,
    pub sched: &'a NoiseSchedule,
}

fn term_loss<M: NoiseModel + ?Sized>(model: &M, g: &Graph, vars: &ParamVars, b: &DpoBatch<'_>, j: usize) -> Result<Var> {
    let (k, i) = b.terms[j];
    let p = &b.prefs[k];
    let w = step_log_prob_graph(model, g, vars, &p.winner, &p.winner.steps[i], b.scales, b.sched)?;
    let l = step_log_prob_graph(model, g, vars, &p.loser, &p.loser.steps[i], b.scales, b.sched)?;
    let (rw, rl) = b.reference[j];
    dpo_loss_graph(g, w, rw, l, rl, b.beta)
}

/// Records the mean DPO loss over all terms on one tape.
pub fn dpo_objective_graph<M: NoiseModel + ?Sized>(
    model: &M,
    g: &Graph,
    vars: &ParamVars,
    batch: &DpoBatch<'_>,
) -> Result<Var> {
    if batch.terms.is_empty() {
        return Err(Error::InvalidArgument("no DPO terms".into()));
    }
    let mut acc = term_loss(model, g, vars, batch, 0)?;
    for j in 1..batch.terms.len() {
        acc = g.add(acc, term_loss(model, g, vars, batch, j)?)?;
    }
    Ok(g.scale(acc, 1.0 / batch.terms.len() as f64))
}

/// Mean DPO loss and its gradient, accumulated one term at a time so that
/// only one term's tape is alive at once.
pub fn dpo_value_and_grad<M: NoiseModel + ?Sized>(
    model: &M,
    params: &ParamStore,
    batch: &DpoBatch<'_>,
) -> Result<(f64, ParamStore)> {
    if batch.terms.is_empty() {
        return Err(Error::InvalidArgument("no DPO terms".into()));
    }
    let n = batch.terms.len() as f64;
    let mut total = 0.0;
    let mut grads = params.zeros_like();
    for j in 0..batch.terms.len() {
        let (v, g) = value_and_grad(params, |gr, vars| Ok::<_, Error>(gr.scale(term_loss(model, gr, vars, batch, j)?, 1.0 / n)))?;
        total += v;
        grads.axpy(1.0, &g)?;
    }
    Ok((total, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub beta_dpo: f64,
    pub optimizer: OptimizerConfig,
    pub clip_norm: f64,
    pub batch_pairs: usize,
    /// Timesteps drawn per pair; `None` uses every stochastic step.
    pub subsample: Option<usize>,
    pub steps: usize,
    /// Roll out with the guided estimate (otherwise the plain conditional one).
    pub guided_rollouts: bool,
    /// Set from the run seed rather than read from configuration.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            beta_dpo: 1.0,
            optimizer: OptimizerConfig::Sgd { lr: 1e-4, momentum: 0.9 },
            clip_norm: 1.0,
            batch_pairs: 8,
            subsample: Some(8),
            steps: 50,
            guided_rollouts: true,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        self.optimizer.validate()?;
        if !(self.beta_dpo > 0.0 && self.beta_dpo.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta_dpo must be > 0, got {}", self.beta_dpo)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::InvalidArgument(format!("clip_norm must be > 0, got {}", self.clip_norm)));
        }
        if self.batch_pairs < 2 {
            return Err(Error::InvalidArgument(format!("batch_pairs must be >= 2, got {}", self.batch_pairs)));
        }
        if let Some(n) = self.subsample {
            if n == 0 || n >= sched.steps() {
                return Err(Error::InvalidArgument(format!(
                    "subsample must be in 1..={}, got {n}",
                    sched.steps() - 1
                )));
            }
        }
        Ok(())
    }

    pub fn rollout_scales(&self, scales: GuidanceScales) -> Option<GuidanceScales> {
        self.guided_rollouts.then_some(scales)
    }
}

/// Trainable policy plus the frozen reference it is anchored to.
pub struct PostTrainState {
    pub params: ParamStore,
    reference: ParamStore,
    optimizer: Optimizer,
    pub step: usize,
}

impl PostTrainState {
    pub fn new<M: NoiseModel + ?Sized>(model: &M, base: ParamStore, config: &TrainerConfig) -> Result<Self> {
        if let Some(msg) = model.init_params(0).layout_mismatch(&base) {
            return Err(Error::Architecture(msg));
        }
        Ok(Self {
            optimizer: Optimizer::new(config.optimizer, Some(config.clip_norm), &base)?,
            reference: base.clone(),
            params: base,
            step: 0,
        })
    }

    pub fn reference(&self) -> &ParamStore {
        &self.reference
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    /// Mean DPO loss before the update.
    pub dpo_loss: f64,
    pub mean_struct: f64,
    pub mean_sem: f64,
    /// Mean of `struct + alpha·sem` over all generated samples.
    pub mean_combined: f64,
    /// Mean and minimum of `loser.total − winner.total`.
    pub margin_mean: f64,
    pub margin_min: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Seed of pair `k` at `step`.
pub fn pair_seed(seed: u64, step: usize, k: usize) -> u64 {
    rng::derive_seed(rng::derive_seed(rng::derive_seed(seed, tags::PAIR), step as u64), k as u64)
}

/// Draws the step's tasks from `pool`.
pub fn sample_tasks<'a>(pool: &'a [EditExample], n: usize, seed: u64, step: usize) -> Vec<&'a EditExample> {
    let mut r = rng::stream(rng::derive_seed(seed, step as u64), tags::POSTTRAIN);
    (0..n).map(|_| &pool[rand::Rng::random_range(&mut r, 0..pool.len())]).collect()
}

/// Collects ranked pairs for one step under the current parameters.
#[allow(clippy::too_many_arguments)]
pub fn collect_preferences<M: NoiseModel + ?Sized>(
    model: &M,
    params: &ParamStore,
    tasks: &[&EditExample],
    seed: u64,
    step: usize,
    scorer: &dyn Scorer,
    score: &ScoreConfig,
    scales: Option<GuidanceScales>,
    sched: &NoiseSchedule,
) -> Result<(Vec<PreferencePair>, Vec<[RawLosses; 2]>)> {
    let pairs = tasks
        .iter()
        .enumerate()
        .map(|(k, task)| {
            let cond = Conditioning::full(task.scene.image.clone(), task.style.image.clone(), task.instruction);
            generate_pair(model, params, &cond, pair_seed(seed, step, k), scales, sched)
        })
        .collect::<Result<Vec<_>>>()?;
    rank_pairs(pairs, tasks, scorer, score)
}

/// One post-training step: sample tasks, roll out and rank pairs, then take
/// a clipped gradient step on the mean per-timestep DPO loss.
#[allow(clippy::too_many_arguments)]
pub fn posttrain_step<M: NoiseModel + ?Sized>(
    model: &M,
    state: &mut PostTrainState,
    pool: &[EditExample],
    scorer: &dyn Scorer,
    score: &ScoreConfig,
    config: &TrainerConfig,
    scales: GuidanceScales,
    sched: &NoiseSchedule,
) -> Result<StepReport> {
    config.validate(sched)?;
    if pool.is_empty() {
        return Err(Error::InvalidArgument("empty task pool".into()));
    }
    if let Some(msg) = state.params.layout_mismatch(&state.reference) {
        return Err(Error::Architecture(msg));
    }
    let rollout_scales = config.rollout_scales(scales);
    let step = state.step;
    let tasks = sample_tasks(pool, config.batch_pairs, config.seed, step);
    let (prefs, raw) =
        collect_preferences(model, &state.params, &tasks, config.seed, step, scorer, score, rollout_scales, sched)?;
    let term_seed = rng::derive_seed(rng::derive_seed(config.seed, tags::TIMESTEPS), step as u64);
    let terms = sample_terms(&prefs, config.subsample, term_seed)?;
    let reference = reference_log_probs(model, &state.reference, &prefs, &terms, rollout_scales, sched)?;
    let batch = DpoBatch {
        prefs: &prefs,
        terms: &terms,
        reference: &reference,
        beta: config.beta_dpo,
        scales: rollout_scales,
        sched,
    };
    let (dpo_loss, grads) = dpo_value_and_grad(model, &state.params, &batch)?;
    let stats = state.optimizer.step(&mut state.params, &grads)?;
    state.step += 1;

    let flat: Vec<RawLosses> = raw.iter().flatten().copied().collect();
    let n = flat.len() as f64;
    let margins: Vec<f64> = prefs.iter().map(|p| p.loser_report.total - p.winner_report.total).collect();
    Ok(StepReport {
        step,
        dpo_loss,
        mean_struct: flat.iter().map(|l| l.structural).sum::<f64>() / n,
        mean_sem: flat.iter().map(|l| l.semantic).sum::<f64>() / n,
        mean_combined: flat.iter().map(|l| l.combined(score.alpha)).sum::<f64>() / n,
        margin_mean: margins.iter().sum::<f64>() / margins.len() as f64,
        margin_min: margins.iter().copied().fold(f64::INFINITY, f64::min),
        grad_norm: stats.grad_norm,
        clipped: stats.clipped,
    })
}

/// Mean of `log π_θ − log π_ref` over the stochastic steps of `probes`.
pub fn kl_proxy_report<M: NoiseModel + ?Sized>(
    model: &M,
    params: &ParamStore,
    reference: &ParamStore,
    probes: &[Trajectory],
    scales: Option<GuidanceScales>,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for traj in probes {
        for st in traj.steps.iter().filter(|s| s.t >= 2) {
            sum += step_log_prob(model, params, traj, st, scales, sched)?
                - step_log_prob(model, reference, traj, st, scales, sched)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("kl proxy needs at least one probe step".into()));
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{Denoiser, DenoiserConfig, TinyDenoiser};
    use crate::diffusion::build_schedule;
    use crate::numerics::finite_diff_check;
    use crate::scoring::ProxyScorer;
    use crate::synth::{make_dataset, ImageSize};
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    #[test]
    fn bradley_terry_examples() {
        assert_eq!(bradley_terry_prob(0.3, 0.3), 0.5);
        assert!((bradley_terry_prob(3f64.ln(), 0.0) - 0.75).abs() < 1e-15);
        assert_eq!(bradley_terry_prob(1000.0, 0.0), 1.0);
        assert_eq!(bradley_terry_prob(0.0, 1000.0), 0.0);
    }

    #[test]
    fn dpo_examples() {
        assert!((dpo_timestep_loss(-3.0, -3.0, 5.0, 5.0, 0.7) - LN_2).abs() < 1e-15);
        let oracle = (1.0 + (-1.0f64).exp()).ln();
        assert!((dpo_timestep_loss(1.0, 0.0, 0.0, 0.0, 1.0) - oracle).abs() < 1e-15);
        assert!((oracle - 0.313262).abs() < 1e-6);
        // both ratios saturate: the loss stays finite
        let l = dpo_timestep_loss(1e6, 0.0, -1e6, 0.0, 1.0);
        assert!((l - softplus(-40.0)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn dpo_nonnegative_and_monotone(w in -30.0f64..30.0, l in -30.0f64..30.0, dw in 0.01f64..5.0, beta in 0.1f64..5.0) {
            let a = dpo_timestep_loss(w, 0.0, l, 0.0, beta);
            prop_assert!(a >= 0.0);
            if w >= -LOG_RATIO_CLAMP && w + dw <= LOG_RATIO_CLAMP {
                prop_assert!(dpo_timestep_loss(w + dw, 0.0, l, 0.0, beta) < a);
            }
        }
    }

    fn tiny() -> (TinyDenoiser, NoiseSchedule, Vec<EditExample>) {
        let size = ImageSize::new(4, 4);
        (
            TinyDenoiser { size, steps: 4 },
            build_schedule(4, 0.05, 0.3).unwrap(),
            make_dataset(6, 2, size).unwrap(),
        )
    }

    fn cond(ex: &EditExample) -> Conditioning {
        Conditioning::full(ex.scene.image.clone(), ex.style.image.clone(), ex.instruction)
    }

    #[test]
    fn pairs_share_initial_state_and_differ() {
        let (m, s, tasks) = tiny();
        let p = m.init_params(1);
        for seed in 0..20 {
            let pair = generate_pair(&m, &p, &cond(&tasks[0]), seed, Some(GuidanceScales::default()), &s).unwrap();
            assert_eq!(pair.branches[0].initial_state(), pair.branches[1].initial_state());
            assert_ne!(pair.branches[0].final_x0, pair.branches[1].final_x0);
            let again = generate_pair(&m, &p, &cond(&tasks[0]), seed, Some(GuidanceScales::default()), &s).unwrap();
            assert_eq!(pair, again);
        }
    }

    fn ranked(m: &TinyDenoiser, p: &ParamStore, s: &NoiseSchedule, tasks: &[EditExample], n: usize) -> Vec<PreferencePair> {
        let refs: Vec<&EditExample> = tasks.iter().take(n).collect();
        let scorer = ProxyScorer { lambda: 0.5 };
        collect_preferences(m, p, &refs, 3, 0, &scorer, &ScoreConfig::default(), None, s).unwrap().0
    }

    #[test]
    fn winners_have_lower_totals() {
        let (m, s, tasks) = tiny();
        let p = m.init_params(4);
        for pr in ranked(&m, &p, &s, &tasks, 5) {
            assert!(pr.winner_report.total <= pr.loser_report.total);
        }
    }

    fn batch_for<'a>(
        prefs: &'a [PreferencePair],
        terms: &'a [Term],
        reference: &'a [(f64, f64)],
        s: &'a NoiseSchedule,
        beta: f64,
    ) -> DpoBatch<'a> {
        DpoBatch {
            prefs,
            terms,
            reference,
            beta,
            scales: None,
            sched: s,
        }
    }

    #[test]
    fn loss_is_ln2_at_reference() {
        let (m, s, tasks) = tiny();
        let p = m.init_params(5);
        let prefs = ranked(&m, &p, &s, &tasks, 3);
        let terms = sample_terms(&prefs, None, 0).unwrap();
        assert_eq!(terms.len(), 3 * 3);
        let reference = reference_log_probs(&m, &p, &prefs, &terms, None, &s).unwrap();
        let (v, _) = dpo_value_and_grad(&m, &p, &batch_for(&prefs, &terms, &reference, &s, 1.0)).unwrap();
        assert!((v - LN_2).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (m, s, tasks) = tiny();
        let reference_params = m.init_params(6);
        let prefs = ranked(&m, &reference_params, &s, &tasks, 1);
        let terms = sample_terms(&prefs, None, 0).unwrap();
        let reference = reference_log_probs(&m, &reference_params, &prefs, &terms, None, &s).unwrap();
        let batch = batch_for(&prefs, &terms, &reference, &s, 1.0);
        let mut theta = reference_params.clone();
        for (i, (_, t)) in theta.iter_mut().enumerate() {
            t.data_mut()[0] += 0.01 * (i as f64 + 1.0);
        }
        for at in [&reference_params, &theta] {
            let rep = finite_diff_check(|g, v| dpo_objective_graph(&m, g, v, &batch), at, 1e-5, 1e-4).unwrap();
            assert!(rep.passed, "{rep:?}");
            let (_, acc) = dpo_value_and_grad(&m, at, &batch).unwrap();
            let (_, tape) = value_and_grad(at, |g, v| dpo_objective_graph(&m, g, v, &batch)).unwrap();
            let mut diff = acc.clone();
            diff.axpy(-1.0, &tape).unwrap();
            assert!(diff.global_norm() < 1e-12);
        }
    }

    #[test]
    fn gradient_at_reference_is_half_beta_log_prob_gap() {
        let (m, s, tasks) = tiny();
        let p = m.init_params(7);
        let prefs = ranked(&m, &p, &s, &tasks, 1);
        let terms = vec![(0, 1)];
        let reference = reference_log_probs(&m, &p, &prefs, &terms, None, &s).unwrap();
        let beta = 2.5;
        let (_, g) = dpo_value_and_grad(&m, &p, &batch_for(&prefs, &terms, &reference, &s, beta)).unwrap();
        let pr = &prefs[0];
        let (_, gw) = value_and_grad(&p, |gr, v| step_log_prob_graph(&m, gr, v, &pr.winner, &pr.winner.steps[1], None, &s)).unwrap();
        let (_, gl) = value_and_grad(&p, |gr, v| step_log_prob_graph(&m, gr, v, &pr.loser, &pr.loser.steps[1], None, &s)).unwrap();
        let mut expect = gl.clone();
        expect.axpy(-1.0, &gw).unwrap();
        expect.scale_in_place(beta / 2.0);
        let mut diff = g.clone();
        diff.axpy(-1.0, &expect).unwrap();
        assert!(diff.global_norm() < 1e-10 * (1.0 + expect.global_norm()));
    }

    #[test]
    fn subsampling_is_deterministic_and_in_range() {
        let (m, s, tasks) = tiny();
        let p = m.init_params(8);
        let prefs = ranked(&m, &p, &s, &tasks, 4);
        let a = sample_terms(&prefs, Some(2), 9).unwrap();
        assert_eq!(a, sample_terms(&prefs, Some(2), 9).unwrap());
        assert_eq!(a.len(), 8);
        for (k, i) in a {
            assert!(prefs[k].winner.steps[i].t >= 2);
        }
        assert!(sample_terms(&prefs, Some(4), 9).is_err());
    }

    fn small_denoiser() -> Denoiser {
        Denoiser::new(ImageSize::new(4, 4), DenoiserConfig { hidden: 4, ..Default::default() }).unwrap()
    }

    #[test]
    fn steps_keep_reference_frozen_and_start_at_ln2() {
        let m = small_denoiser();
        let s = build_schedule(4, 0.05, 0.3).unwrap();
        let pool = make_dataset(8, 3, m.size).unwrap();
        let base = m.init_params(1);
        let cfg = TrainerConfig {
            subsample: Some(2),
            batch_pairs: 2,
            optimizer: OptimizerConfig::adam(1e-2),
            ..Default::default()
        };
        let mut st = PostTrainState::new(&m, base.clone(), &cfg).unwrap();
        let scorer = ProxyScorer { lambda: 0.5 };
        let mut reports = Vec::new();
        for _ in 0..3 {
            reports.push(
                posttrain_step(&m, &mut st, &pool, &scorer, &ScoreConfig::default(), &cfg, GuidanceScales::default(), &s)
                    .unwrap(),
            );
        }
        assert!((reports[0].dpo_loss - LN_2).abs() < 1e-6);
        assert_eq!(st.reference(), &base);
        assert_ne!(st.params, base);
        assert!(reports.iter().all(|r| r.margin_min >= 0.0));

        // determinism
        let mut again = PostTrainState::new(&m, base.clone(), &cfg).unwrap();
        for r in &reports {
            let r2 = posttrain_step(&m, &mut again, &pool, &scorer, &ScoreConfig::default(), &cfg, GuidanceScales::default(), &s)
                .unwrap();
            assert_eq!(r, &r2);
        }
        assert_eq!(again.params, st.params);
    }

    #[test]
    fn mismatched_base_rejected() {
        let m = small_denoiser();
        let other = Denoiser::new(m.size, DenoiserConfig { hidden: 6, ..Default::default() }).unwrap();
        assert!(matches!(
            PostTrainState::new(&m, other.init_params(0), &TrainerConfig::default()),
            Err(Error::Architecture(_))
        ));
    }

    #[test]
    fn kl_proxy_zero_at_reference() {
        let (m, s, tasks) = tiny();
        let p = m.init_params(2);
        let probe = crate::diffusion::sample_trajectory(&m, &p, &cond(&tasks[0]), 0, None, &s).unwrap();
        assert_eq!(kl_proxy_report(&m, &p, &p, &[probe.clone()], None, &s).unwrap(), 0.0);
        let mut q = p.clone();
        q.get_mut("a").unwrap().data_mut()[0] += 0.05;
        assert!(kl_proxy_report(&m, &q, &p, &[probe], None, &s).unwrap().is_finite());
        assert!(kl_proxy_report(&m, &q, &p, &[], None, &s).is_err());
    }
}
