use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::{NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::guidance::{DropoutProbs, GuidanceScales};
use crate::optim::OptimizerConfig;
use crate::rlaif::TrainerConfig;
use crate::rng::{self, tags};
use crate::scoring::ScoreConfig;
use crate::synth::{build_all_banks, make_dataset, make_examples, Concept, EditExample, ImageSize, Instruction};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub scales: GuidanceScales,
    pub dropout: DropoutProbs,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scales: GuidanceScales::default(),
            dropout: DropoutProbs::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub clip_norm: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 16,
            optimizer: OptimizerConfig::adam(2e-3),
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Size of the pretraining set and of the post-training task pool.
    pub train_tasks: usize,
    pub eval_tasks: usize,
    /// Concepts drawn for post-training and evaluation tasks.
    pub concepts: Vec<Concept>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_tasks: 512,
            eval_tasks: 64,
            concepts: Concept::ALL.to_vec(),
        }
    }
}

/// Everything a run needs. Unknown keys are rejected; omitted keys take
/// their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub image: ImageSize,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub guidance: GuidanceConfig,
    pub score: ScoreConfig,
    pub pretrain: PretrainConfig,
    pub trainer: TrainerConfig,
    pub data: DataConfig,
    /// Post-training writes an intermediate checkpoint every this many steps (0 = never).
    pub checkpoint_every: usize,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image: ImageSize::default(),
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserConfig::default(),
            guidance: GuidanceConfig::default(),
            score: ScoreConfig::default(),
            pretrain: PretrainConfig::default(),
            trainer: TrainerConfig::default(),
            data: DataConfig::default(),
            checkpoint_every: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        self.image.validate().map_err(|e| cfg_err(e.into()))?;
        let sched = self.schedule.build().map_err(cfg_err)?;
        self.denoiser.validate().map_err(cfg_err)?;
        if self.denoiser.vocab <= Instruction::REGISTERED.len() {
            return Err(Error::Config(format!(
                "denoiser vocab {} must exceed the {} registered instructions",
                self.denoiser.vocab,
                Instruction::REGISTERED.len()
            )));
        }
        self.guidance.scales.validate().map_err(cfg_err)?;
        self.guidance.dropout.validate().map_err(cfg_err)?;
        self.score.validate().map_err(cfg_err)?;
        self.trainer.validate(&sched).map_err(cfg_err)?;
        self.pretrain.optimizer.validate().map_err(cfg_err)?;
        if self.pretrain.batch_size == 0 {
            return Err(Error::Config("pretrain batch_size must be >= 1".into()));
        }
        if matches!(self.pretrain.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("pretrain clip_norm must be positive".into()));
        }
        if self.data.train_tasks == 0 || self.data.eval_tasks == 0 || self.data.concepts.is_empty() {
            return Err(Error::Config("data needs train_tasks >= 1, eval_tasks >= 1 and at least one concept".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<Denoiser> {
        Denoiser::new(self.image, self.denoiser)
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        self.schedule.build()
    }

    pub fn trainer(&self) -> TrainerConfig {
        TrainerConfig {
            seed: self.seed,
            ..self.trainer
        }
    }

    /// Pretraining examples over every concept.
    pub fn pretrain_set(&self) -> Result<Vec<EditExample>> {
        Ok(make_dataset(self.data.train_tasks, self.seed, self.image)?)
    }

    fn task_set(&self, n: usize, tag: u64) -> Result<Vec<EditExample>> {
        let banks: Vec<_> = build_all_banks(self.seed, self.image)?
            .into_iter()
            .filter(|b| self.data.concepts.contains(&b.concept))
            .collect();
        Ok(make_examples(n, rng::derive_seed(self.seed, tag), &banks, self.image)?)
    }

    /// Post-training task pool over the configured concepts.
    pub fn posttrain_pool(&self) -> Result<Vec<EditExample>> {
        self.task_set(self.data.train_tasks, tags::POSTTRAIN)
    }

    /// Held-out evaluation tasks; their scenes are disjoint from training draws.
    pub fn eval_tasks(&self) -> Result<Vec<EditExample>> {
        self.task_set(self.data.eval_tasks, tags::EVAL)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_and_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in [
            r#"{"sed": 3}"#,
            r#"{"trainer": {"beta": 1.0}}"#,
            r#"{"score": {"alpha": 1.0, "gamma": 2}}"#,
            r#"{"trainer": {"seed": 4}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            r#"{"schedule": {"steps": 1}}"#,
            r#"{"score": {"alpha": -1.0}}"#,
            r#"{"trainer": {"batch_pairs": 1}}"#,
            r#"{"trainer": {"subsample": 50}}"#,
            r#"{"image": {"height": 2, "width": 16, "channels": 3}}"#,
            r#"{"data": {"concepts": []}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"seed": 7, "trainer": {"steps": 10}}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.trainer.steps, 10);
        assert_eq!(cfg.trainer.batch_pairs, 8);
        assert_eq!(cfg.trainer().seed, 7);
    }

    #[test]
    fn eval_tasks_differ_from_pool() {
        let cfg = RunConfig {
            data: DataConfig {
                train_tasks: 8,
                eval_tasks: 8,
                concepts: vec![Concept::Gold],
            },
            ..Default::default()
        };
        let (pool, eval) = (cfg.posttrain_pool().unwrap(), cfg.eval_tasks().unwrap());
        assert!(pool.iter().chain(&eval).all(|e| e.concept == Concept::Gold));
        assert!(pool.iter().all(|p| eval.iter().all(|e| e.scene.seed != p.scene.seed)));
    }
}
