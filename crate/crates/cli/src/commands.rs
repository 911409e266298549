use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use callig_core::augment::AugmentConfig;
use callig_core::config::{generate_set, RunConfig};
use callig_core::eval::{
    closed_loop_eval, open_loop_eval, run_ablation, AblationVariant, EvalReport, ObservationNoise,
};
use callig_core::fsutil::{write_atomic, AtomicDir};
use callig_core::model::PolicyCheckpoint;
use callig_core::sim::{
    builtin, generate_demonstration, read_dataset, write_dataset, Demonstration, SimConfig, StyleJitter,
};
use callig_core::train::{check_dataset, train_with, StopReason, TrainSetup};
use callig_core::{Error, Result};

use crate::{AblateArgs, EvalArgs, GenerateArgs, Mode, TrainArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOG_FILE: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_FILE: &str = "report.json";
pub const OVERLAY_FILE: &str = "overlay.png";
pub const SUMMARY_FILE: &str = "summary.csv";

fn output_dir(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Usage("no output directory: pass --out or set output_dir".into()))
}

/// Points report plot paths at their final location instead of the staging
/// directory.
fn relocate_plots(report: &mut EvalReport, staged: &Path, target: &Path) {
    for p in &mut report.plots {
        if let Ok(rel) = p.strip_prefix(staged) {
            *p = target.join(rel);
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    if a.count == 0 {
        return Err(Error::Usage("--count must be at least 1".into()));
    }
    let sim = match &a.config {
        Some(p) => RunConfig::load(p)?.sim,
        None => SimConfig::default(),
    };
    let demos = generate_set(&a.templates, a.count, a.seed, !a.no_jitter, &sim)?;
    let m = write_dataset(&demos, &a.out, &sim)?;
    println!(
        "wrote {} demonstrations to {} (templates {}, style seeds {}..={}, image {:?}, {} frames, fingerprint {})",
        m.template_ids.len(),
        a.out.display(),
        a.templates.join(","),
        a.seed,
        a.seed + a.count as u64 - 1,
        m.image_shape,
        m.timesteps.iter().sum::<usize>(),
        &m.config_fingerprint[..12],
    );
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let out = output_dir(&a.out, &cfg)?;
    let demos = cfg.training_demos()?;
    check_dataset(&demos, &cfg.model)?;
    let provenance = cfg.to_toml();
    let stage = AtomicDir::begin(&out)?;
    let setup = TrainSetup {
        demos: &demos,
        sim: &cfg.sim,
        model: &cfg.model,
        augment: &cfg.augment,
        train: &cfg.train,
        seed: cfg.seed,
    };
    let outcome = train_with(&setup, |ck| {
        let mut ck = ck.clone();
        ck.provenance = Some(provenance.clone());
        ck.save(&stage.path().join(format!("checkpoint_step{:06}.ckpt", ck.step)))
    })?;
    let mut ck = outcome.checkpoint;
    ck.provenance = Some(provenance.clone());
    ck.save(&stage.path().join(CHECKPOINT_FILE))?;
    outcome.log.write_csv(&stage.path().join(LOG_FILE))?;
    write_atomic(&stage.path().join(CONFIG_FILE), provenance.as_bytes())?;
    stage.commit()?;

    let loss = match (outcome.log.records.first(), outcome.log.records.last()) {
        (Some(a), Some(b)) => format!("; loss {:.6} -> {:.6}", a.total, b.total),
        _ => String::new(),
    };
    println!(
        "trained {} steps on {} demonstrations ({}){loss}; wrote {}",
        ck.step,
        demos.len(),
        match &outcome.stop {
            StopReason::Budget => "budget",
            StopReason::Converged => "converged",
            StopReason::Diverged(_) => "diverged",
        },
        out.display(),
    );
    match outcome.stop {
        StopReason::Diverged(map) => Err(Error::Divergence(map)),
        _ => Ok(()),
    }
}

fn eval_demos(a: &EvalArgs, ck: &PolicyCheckpoint) -> Result<Vec<Demonstration>> {
    if let Some(path) = &a.dataset {
        let (manifest, demos) = read_dataset(path)?;
        if manifest.sim != ck.sim {
            return Err(Error::config(format!(
                "dataset {} was rendered with different simulator settings than the checkpoint",
                path.display()
            )));
        }
        return Ok(demos);
    }
    let jitter = if a.jitter {
        StyleJitter::from_config(&ck.sim)
    } else {
        StyleJitter::NONE
    };
    a.templates
        .iter()
        .map(|t| generate_demonstration(&builtin(t)?, a.style_seed, jitter, &ck.sim))
        .collect()
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let ck = PolicyCheckpoint::load(&a.checkpoint)?;
    let policy = ck.policy()?;
    let demos = eval_demos(a, &ck)?;
    check_dataset(&demos, &ck.model)?;
    let augment = match &ck.provenance {
        Some(text) => RunConfig::from_canonical(text)?.augment,
        None => AugmentConfig::default(),
    };
    let noise = ObservationNoise {
        pose: a.pose_noise.then(|| augment.clone()),
        image: a.image_noise.then(|| augment.clone()),
        seed: a.noise_seed,
    };

    let stage = AtomicDir::begin(&a.out)?;
    let plot = stage.path().join(OVERLAY_FILE);
    let mut report = match a.mode {
        Mode::Open => open_loop_eval(&policy, &demos, Some(&plot))?,
        Mode::Closed => closed_loop_eval(&policy, &ck.sim, &demos, a.max_steps, &noise, Some(&plot))?.0,
    };
    relocate_plots(&mut report, stage.path(), &a.out);
    write_atomic(&stage.path().join(REPORT_FILE), report.to_json().as_bytes())?;
    stage.commit()?;

    match a.mode {
        Mode::Open => println!(
            "open loop on {} demonstrations: translation RMSE {}, rotation error {}",
            demos.len(),
            fmt_opt(report.open_loop_translation_rmse),
            fmt_opt(report.open_loop_rotation_error)
        ),
        Mode::Closed => {
            for e in &report.closed_loop {
                println!(
                    "{} (seed {}): translation RMSE {:.6}, IoU {:.4}, {:?} after {} steps",
                    e.template_id, e.style_seed, e.translation_rmse, e.canvas_iou, e.termination, e.steps
                );
            }
        }
    }
    Ok(())
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let out = output_dir(&a.out, &cfg)?;
    let variants: Vec<AblationVariant> = if a.variants.is_empty() {
        AblationVariant::ALL.to_vec()
    } else {
        a.variants.iter().map(|v| AblationVariant::parse(v.trim())).collect::<Result<_>>()?
    };
    let train_demos = cfg.training_demos()?;
    check_dataset(&train_demos, &cfg.model)?;
    let eval_demos = cfg.eval_demos(&train_demos)?;
    let noise = cfg.observation_noise();

    let stage = AtomicDir::begin(&out)?;
    let mut summary = String::from(
        "variant,stop,steps,open_loop_translation_rmse,open_loop_rotation_error,closed_loop_translation_rmse,closed_loop_iou\n",
    );
    for v in variants {
        let dir = stage.path().join(v.name());
        fs::create_dir_all(&dir)?;
        let run = run_ablation(
            v,
            &train_demos,
            &cfg.sim,
            &cfg.model,
            &cfg.augment,
            &cfg.train,
            cfg.seed,
            &eval_demos,
            &noise,
            Some(&dir),
        )?;
        let mut variant_cfg = cfg.clone();
        (variant_cfg.model, variant_cfg.augment) = v.apply(&cfg.model, &cfg.augment);
        let mut ck = run.checkpoint;
        ck.provenance = Some(variant_cfg.to_toml());
        ck.save(&dir.join(CHECKPOINT_FILE))?;
        let mut report = run.report;
        relocate_plots(&mut report, stage.path(), &out);
        write_atomic(&dir.join(REPORT_FILE), report.to_json().as_bytes())?;
        let stop = match run.stop {
            StopReason::Budget => "budget",
            StopReason::Converged => "converged",
            StopReason::Diverged(_) => "diverged",
        };
        writeln!(
            summary,
            "{},{},{},{},{},{},{}",
            v.name(),
            stop,
            ck.step,
            fmt_opt(report.open_loop_translation_rmse),
            fmt_opt(report.open_loop_rotation_error),
            fmt_opt(report.closed_loop_translation_rmse),
            fmt_opt(report.closed_loop_iou)
        )
        .expect("string write");
        println!(
            "{}: {stop} after {} steps, closed-loop RMSE {}, IoU {}",
            v.name(),
            ck.step,
            fmt_opt(report.closed_loop_translation_rmse),
            fmt_opt(report.closed_loop_iou)
        );
    }
    write_atomic(&stage.path().join(SUMMARY_FILE), summary.as_bytes())?;
    stage.commit()?;
    Ok(())
}
