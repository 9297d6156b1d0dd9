use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::Serialize;

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use super::config::RunConfig;
use super::pnm::{read_pgm, read_ppm, write_ppm};
use crate::denoiser::{Conditioning, NoiseModel};
use crate::diffusion::{ddpm_loss_graph, sample_trajectory};
use crate::error::{Error, Result};
use crate::evalkit::{eval_report, EvalReport, PolicyTable, TableMetrics};
use crate::guidance::GuidanceScales;
use crate::numerics::{value_and_grad, ParamStore, Tensor};
use crate::optim::Optimizer;
use crate::rlaif::{posttrain_step, PostTrainState, StepReport};
use crate::rng::{self, tags};
use crate::scoring::{semantic_score, structural_score, ProxyScorer};
use crate::synth::{EditExample, Instruction};

pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";
pub const PRETRAIN_CSV: &str = "pretrain_metrics.csv";
pub const POSTTRAIN_CKPT: &str = "posttrain.ckpt";
pub const POSTTRAIN_CSV: &str = "posttrain_metrics.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_JSON: &str = "eval.json";

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PretrainRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn check_architecture(expected: &RunConfig, found: &RunConfig, what: &Path) -> Result<()> {
    if expected.image != found.image || expected.denoiser != found.denoiser {
        return Err(Error::Architecture(format!(
            "{} was trained with image {:?} and denoiser {:?}, config asks for {:?} and {:?}",
            what.display(),
            found.image,
            found.denoiser,
            expected.image,
            expected.denoiser
        )));
    }
    Ok(())
}

/// Denoising pretraining on the synthetic dataset. Returns the trained
/// parameters and one metrics row per step.
pub fn pretrain(config: &RunConfig) -> Result<(ParamStore, Vec<PretrainRow>)> {
    config.validate()?;
    let model = config.model()?;
    let sched = config.noise_schedule()?;
    let data = config.pretrain_set()?;
    let pc = config.pretrain;
    let mut params = model.init_params(config.seed);
    let mut opt = Optimizer::new(pc.optimizer, pc.clip_norm, &params)?;
    let mut rng = rng::stream(config.seed, tags::PRETRAIN);
    let mut rows = Vec::with_capacity(pc.steps);
    for step in 0..pc.steps {
        let batch: Vec<EditExample> = (0..pc.batch_size)
            .map(|_| data[rng.random_range(0..data.len())].clone())
            .collect();
        let (loss, grads) = value_and_grad(&params, |g, v| {
            ddpm_loss_graph(&model, g, v, &batch, &sched, config.guidance.dropout, &mut rng)
        })?;
        let stats = opt.step(&mut params, &grads)?;
        rows.push(PretrainRow {
            step,
            loss,
            grad_norm: stats.grad_norm,
            clipped: stats.clipped,
        });
    }
    Ok((params, rows))
}

/// Runs [`pretrain`] and writes the checkpoint and metrics CSV into the output directory.
pub fn cmd_pretrain(config: &RunConfig) -> Result<PathBuf> {
    let dir = &config.output_dir;
    create_dir(dir)?;
    let (params, rows) = pretrain(config)?;
    write_csv(&dir.join(PRETRAIN_CSV), &rows)?;
    let path = dir.join(PRETRAIN_CKPT);
    save_checkpoint(
        &path,
        &Checkpoint {
            config: config.clone(),
            step: rows.len() as u64,
            params,
        },
    )?;
    Ok(path)
}

/// Preference post-training from `base`. `on_step` sees each report and the
/// current state, which lets callers write periodic checkpoints.
pub fn posttrain(
    config: &RunConfig,
    base: ParamStore,
    mut on_step: impl FnMut(&StepReport, &PostTrainState) -> Result<()>,
) -> Result<(ParamStore, Vec<StepReport>)> {
    config.validate()?;
    let model = config.model()?;
    let sched = config.noise_schedule()?;
    let trainer = config.trainer();
    let pool = config.posttrain_pool()?;
    let scorer = ProxyScorer {
        lambda: config.score.lambda,
    };
    let mut state = PostTrainState::new(&model, base, &trainer)?;
    let mut reports = Vec::with_capacity(trainer.steps);
    for _ in 0..trainer.steps {
        let rep = posttrain_step(
            &model,
            &mut state,
            &pool,
            &scorer,
            &config.score,
            &trainer,
            config.guidance.scales,
            &sched,
        )?;
        on_step(&rep, &state)?;
        reports.push(rep);
    }
    Ok((state.params, reports))
}

pub fn cmd_posttrain(config: &RunConfig, base_path: &Path) -> Result<PathBuf> {
    config.validate()?;
    let base = load_checkpoint(base_path)?;
    check_architecture(config, &base.config, base_path)?;
    let dir = &config.output_dir;
    create_dir(dir)?;
    let every = config.checkpoint_every;
    let (params, reports) = posttrain(config, base.params, |rep, state| {
        let done = rep.step + 1;
        if every > 0 && done % every == 0 && done < config.trainer.steps {
            save_checkpoint(
                &dir.join(format!("posttrain_step{done:04}.ckpt")),
                &Checkpoint {
                    config: config.clone(),
                    step: done as u64,
                    params: state.params.clone(),
                },
            )?;
        }
        Ok(())
    })?;
    write_csv(&dir.join(POSTTRAIN_CSV), &reports)?;
    let path = dir.join(POSTTRAIN_CKPT);
    save_checkpoint(
        &path,
        &Checkpoint {
            config: config.clone(),
            step: reports.len() as u64,
            params,
        },
    )?;
    Ok(path)
}

#[derive(Clone, Debug)]
pub struct EditRequest {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub style: PathBuf,
    /// Region used when scoring the edit. Defaults to the whole frame.
    pub mask: Option<PathBuf>,
    pub instruction: String,
    pub scales: GuidanceScales,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EditScores {
    pub structural: f64,
    pub semantic: f64,
}

fn read_sized_image(path: &Path, config: &RunConfig) -> Result<Tensor> {
    let img = read_ppm(path)?;
    if img.shape() != config.image.shape() {
        return Err(Error::Image(format!(
            "{} is {:?}, the checkpoint expects {:?}",
            path.display(),
            img.shape(),
            config.image.shape()
        )));
    }
    Ok(img)
}

/// One guided sample for a user-provided input and style image.
pub fn cmd_edit(req: &EditRequest) -> Result<EditScores> {
    let ckpt = load_checkpoint(&req.checkpoint)?;
    let config = &ckpt.config;
    let instruction = match Instruction::parse(&req.instruction) {
        Some(i) if i != Instruction::NULL => i,
        _ => {
            let known: Vec<String> = Instruction::REGISTERED.iter().map(|(i, n)| format!("{}={n}", i.0)).collect();
            return Err(Error::InvalidArgument(format!(
                "unknown instruction `{}` (known: {})",
                req.instruction,
                known.join(", ")
            )));
        }
    };
    req.scales.validate()?;
    let input = read_sized_image(&req.input, config)?;
    let style = read_sized_image(&req.style, config)?;
    let full = Tensor::full(&config.image.mask_shape(), 1.0);
    let mask = match &req.mask {
        Some(p) => {
            let m = read_pgm(p)?;
            if m.shape() != full.shape() {
                return Err(Error::Image(format!(
                    "mask {} is {:?}, expected {:?}",
                    p.display(),
                    m.shape(),
                    full.shape()
                )));
            }
            m.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
        }
        None => full.clone(),
    };
    let model = config.model()?;
    let sched = config.noise_schedule()?;
    let cond = Conditioning::full(input.clone(), style.clone(), instruction);
    let traj = sample_trajectory(&model, &ckpt.params, &cond, req.seed, Some(req.scales), &sched)?;
    let out = traj.output();
    write_ppm(&req.out, &out)?;
    Ok(EditScores {
        structural: structural_score(&input, &out)?,
        semantic: semantic_score(&out, &input, &style, &mask, &full, config.score.lambda)?,
    })
}

/// Scores `checkpoint` on the held-out tasks of `config`; writes CSV and JSON reports.
pub fn cmd_eval(config: &RunConfig, checkpoint: &Path) -> Result<EvalReport> {
    config.validate()?;
    let ckpt = load_checkpoint(checkpoint)?;
    check_architecture(config, &ckpt.config, checkpoint)?;
    let model = config.model()?;
    let sched = config.noise_schedule()?;
    let tasks = config.eval_tasks()?;
    let report = eval_report(&model, &ckpt.params, &tasks, config.guidance.scales, &sched, &config.score, config.seed)?;
    let dir = &config.output_dir;
    create_dir(dir)?;
    write_csv(&dir.join(EVAL_CSV), &report.rows)?;
    let json = dir.join(EVAL_JSON);
    let mut f = File::create(&json).map_err(|e| Error::io(&json, e))?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    writeln!(f, "{text}").map_err(|e| Error::io(&json, e))?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportFormat {
    Csv,
    Json,
}

pub fn cmd_metrics(table: &Path) -> Result<TableMetrics> {
    PolicyTable::from_path(table)?.metrics()
}

pub fn format_metrics(m: &TableMetrics, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(m).expect("metrics serialize"),
        ReportFormat::Csv => format!("policies,pearson_r,mmrv\n{},{},{}", m.policies, m.pearson_r, m.mmrv),
    }
}
