//! Subcommand implementations. Every command reads a config (file plus flag
//! overrides), works under an explicit directory, and echoes the resolved
//! configuration next to its outputs.

use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use mogen_core::diffusion::{compose_sample, sample, SamplerConfig};
use mogen_core::editing::{EditSession, HttpLlmClient, LlmClient, MockLlmClient, SessionConfig};
use mogen_core::error::{CoreError, Result};
use mogen_core::hash::fnv1a64_hex;
use mogen_core::model::Denoiser;
use mogen_core::schema::{
    save_dataset, script_from_json, script_to_json, FineGrainedScript,
    MotionSequence,
};

use crate::checkpoint::load_checkpoint;
use crate::config::RunConfig;
use crate::evaluate::run_eval;
use crate::train::{prepare_dataset, run_training, schedule_from, CHECKPOINT_DIR};

pub fn load_config(path: Option<&Path>, desk: bool) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None if desk => RunConfig::desk(),
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_run(run_dir: &Path) -> Result<(RunConfig, Denoiser<f32>)> {
    let ckpt = load_checkpoint(&run_dir.join(CHECKPOINT_DIR))?;
    Ok((ckpt.config, ckpt.model))
}

fn read_script(path: &Path) -> Result<FineGrainedScript> {
    script_from_json(&fs::read_to_string(path)?)
}

/// Write one motion as script JSON + little-endian f32 frames + CSV, with a
/// small metadata manifest carrying shape, fps, and the blob checksum.
pub fn export_motion(
    dir: &Path,
    stem: &str,
    motion: &MotionSequence<f32>,
    script: &FineGrainedScript,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.script.json")), script_to_json(script))?;
    let bytes = motion.frames.to_le_bytes_f32();
    fs::write(dir.join(format!("{stem}.bin")), &bytes)?;
    fs::write(dir.join(format!("{stem}.csv")), motion.to_csv())?;
    let meta = serde_json::json!({
        "shape": motion.frames.shape(),
        "fps": motion.fps,
        "frames_file": format!("{stem}.bin"),
        "checksum": fnv1a64_hex(&bytes),
    });
    fs::write(
        dir.join(format!("{stem}.meta.json")),
        serde_json::to_string_pretty(&meta)?,
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------

pub fn cmd_gen_data(
    config: Option<&Path>,
    desk: bool,
    out: &Path,
    size: Option<usize>,
) -> Result<()> {
    let mut cfg = load_config(config, desk)?;
    if let Some(n) = size {
        cfg.data.dataset_size = n;
    }
    cfg.validate()?;
    let (dataset, partition, _vocab) = prepare_dataset(&cfg)?;
    fs::create_dir_all(out)?;
    save_dataset(out, &dataset, &partition)?;
    cfg.save(&out.join("resolved_config.json"))?;
    let train = dataset
        .iter()
        .filter(|e| e.split == mogen_core::schema::Split::Train)
        .count();
    println!(
        "wrote {} sequences ({} train / {} val) to {}",
        dataset.len(),
        train,
        dataset.len() - train,
        out.display()
    );
    Ok(())
}

pub fn cmd_train(
    config: Option<&Path>,
    desk: bool,
    out: &Path,
    steps: Option<u64>,
    resume: bool,
    quiet: bool,
) -> Result<()> {
    let mut cfg = load_config(config, desk)?;
    if let Some(s) = steps {
        cfg.training.steps = s;
    }
    cfg.validate()?;
    let summary = run_training(&cfg, out, resume, quiet)?;
    println!(
        "trained {} steps: loss {:.5} -> {:.5}; checkpoint at {}",
        summary.steps_run,
        summary.first_loss,
        summary.final_loss,
        summary.checkpoint_dir.display()
    );
    Ok(())
}

pub fn cmd_sample(
    run_dir: &Path,
    script_path: &Path,
    out: &Path,
    seed: u64,
    frames: Option<usize>,
) -> Result<()> {
    let (cfg, model) = load_run(run_dir)?;
    let script = read_script(script_path)?;
    let schedule = schedule_from(&cfg)?;
    let sampler = SamplerConfig {
        steps: cfg.sampler.steps,
        guidance_weight: cfg.sampler.guidance_weight,
    };
    let motion = sample(&model, &script, frames, &schedule, &sampler, seed)?;
    export_motion(out, "sample", &motion, &script)?;
    println!(
        "sampled {} frames x {} features into {}",
        motion.num_frames(),
        motion.dim(),
        out.display()
    );
    Ok(())
}

pub fn cmd_compose(
    run_dir: &Path,
    script_path: &Path,
    offsets: Option<&str>,
    out: &Path,
    seed: u64,
) -> Result<()> {
    let (cfg, model) = load_run(run_dir)?;
    let script = read_script(script_path)?;
    let offsets: Vec<f64> = match offsets {
        Some(spec) => spec
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| CoreError::contract(format!("bad offset `{s}`")))
            })
            .collect::<Result<_>>()?,
        None => vec![0.0; script.num_stages()],
    };
    let schedule = schedule_from(&cfg)?;
    let sampler = SamplerConfig {
        steps: cfg.sampler.steps,
        guidance_weight: cfg.sampler.guidance_weight,
    };
    let motion = compose_sample(&model, &script, &offsets, &schedule, &sampler, seed)?;
    export_motion(out, "composition", &motion, &script)?;
    println!(
        "composed {} stages into {} frames at {}",
        script.num_stages(),
        motion.num_frames(),
        out.display()
    );
    Ok(())
}

pub enum ClientChoice {
    Mock,
    Http { endpoint: String, model: String },
}

pub fn cmd_edit(
    run_dir: &Path,
    script_path: Option<&Path>,
    create: Option<&str>,
    commands_path: Option<&Path>,
    client: ClientChoice,
    out: &Path,
    seed: u64,
) -> Result<()> {
    let (cfg, model) = load_run(run_dir)?;
    let schedule = schedule_from(&cfg)?;
    let session_cfg = SessionConfig {
        sampler: SamplerConfig {
            steps: cfg.sampler.steps,
            guidance_weight: cfg.sampler.guidance_weight,
        },
        base_seed: seed,
    };
    let client: Box<dyn LlmClient> = match client {
        ClientChoice::Mock => Box::new(MockLlmClient::new()),
        ClientChoice::Http { endpoint, model } => Box::new(HttpLlmClient::new(endpoint, model)),
    };

    let (mut session, initial) = match (script_path, create) {
        (Some(path), None) => {
            EditSession::new(&model, schedule, session_cfg, read_script(path)?)?
        }
        (None, Some(sentence)) => {
            EditSession::create(&model, schedule, session_cfg, sentence, client.as_ref())?
        }
        _ => {
            return Err(CoreError::contract(
                "edit needs exactly one of --script or --create",
            ))
        }
    };
    export_motion(out, "step_00", &initial, session.script())?;
    println!("step 00: {} frames", initial.num_frames());

    // Commands arrive line by line from a file or stdin.
    let lines: Vec<String> = match commands_path {
        Some(p) => fs::read_to_string(p)?
            .lines()
            .map(|l| l.to_string())
            .collect(),
        None => {
            let stdin = std::io::stdin();
            stdin.lock().lines().collect::<std::io::Result<_>>()?
        }
    };
    let mut step = 0;
    for line in lines.iter().map(|l| l.trim()).filter(|l| !l.is_empty()) {
        step += 1;
        let (script, motion) = session.step(line, client.as_ref())?;
        let stem = format!("step_{step:02}");
        export_motion(out, &stem, &motion, &script)?;
        println!("step {step:02}: \"{line}\" -> {} frames", motion.num_frames());
    }
    Ok(())
}

pub fn cmd_eval(
    run_dir: &Path,
    out: Option<&Path>,
    samples: Option<usize>,
    seed: Option<u64>,
    quiet: bool,
) -> Result<()> {
    let (mut cfg, model) = load_run(run_dir)?;
    if let Some(n) = samples {
        cfg.eval.samples = n;
    }
    if let Some(s) = seed {
        cfg.eval.seed = s;
    }
    cfg.validate()?;
    let (dataset, _partition, _vocab) = prepare_dataset(&cfg)?;
    let schedule = schedule_from(&cfg)?;
    let outcome = run_eval(&model, &cfg, &dataset, &schedule, quiet)?;
    let report_path = out
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| run_dir.join("report.json"));
    fs::write(&report_path, serde_json::to_string_pretty(&outcome.report)?)?;
    let r = &outcome.report;
    println!(
        "fid {:.4}  r@1 {:.3}±{:.3}  r@2 {:.3}  r@3 {:.3}  div {:.3}  mm {:.3}  mm-dist {:.3}",
        r.fid.mean,
        r.r_precision_top1.mean,
        r.r_precision_top1.ci95,
        r.r_precision_top2.mean,
        r.r_precision_top3.mean,
        r.diversity.mean,
        r.multimodality.mean,
        r.mm_dist.mean
    );
    println!("report written to {}", report_path.display());
    Ok(())
}

/// Parse `spatial=off,temporal=on,moe=off` into toggle values.
pub fn parse_toggles(spec: &str) -> Result<(bool, bool, bool)> {
    let (mut spatial, mut temporal, mut moe) = (None, None, None);
    for piece in spec.split(',') {
        let (key, value) = piece
            .split_once('=')
            .ok_or_else(|| CoreError::contract(format!("bad toggle `{piece}`")))?;
        let v = match value.trim() {
            "on" | "true" | "1" => true,
            "off" | "false" | "0" => false,
            other => return Err(CoreError::contract(format!("bad toggle value `{other}`"))),
        };
        match key.trim() {
            "spatial" => spatial = Some(v),
            "temporal" => temporal = Some(v),
            "moe" => moe = Some(v),
            other => return Err(CoreError::contract(format!("unknown toggle `{other}`"))),
        }
    }
    match (spatial, temporal, moe) {
        (Some(s), Some(t), Some(m)) => Ok((s, t, m)),
        _ => Err(CoreError::contract(
            "toggle spec must set spatial, temporal, and moe",
        )),
    }
}

pub fn cmd_ablate(
    config: Option<&Path>,
    desk: bool,
    out: &Path,
    steps: Option<u64>,
    toggle: Option<&str>,
    quiet: bool,
) -> Result<()> {
    let mut base = load_config(config, desk)?;
    if let Some(s) = steps {
        base.training.steps = s;
    }
    base.validate()?;

    let rows: Vec<(String, bool, bool, bool)> = match toggle {
        Some(spec) => {
            let (s, t, m) = parse_toggles(spec)?;
            vec![(format!("spatial={s},temporal={t},moe={m}"), s, t, m)]
        }
        None => vec![
            ("baseline".to_string(), false, false, false),
            ("spatial".to_string(), true, false, false),
            ("temporal".to_string(), false, true, false),
            ("moe".to_string(), false, false, true),
            ("full".to_string(), true, true, true),
        ],
    };

    fs::create_dir_all(out)?;
    let mut results = Vec::new();
    for (name, spatial, temporal, moe) in &rows {
        let mut cfg = base.clone();
        cfg.model.attention.spatial_independence = *spatial;
        cfg.model.attention.temporal_independence = *temporal;
        cfg.model.attention.moe = *moe;
        let row_dir = out.join(name);
        if !quiet {
            eprintln!("ablation row `{name}`: training {} steps", cfg.training.steps);
        }
        run_training(&cfg, &row_dir, false, quiet)?;
        let ckpt = load_checkpoint(&row_dir.join(CHECKPOINT_DIR))?;
        let (dataset, _p, _v) = prepare_dataset(&cfg)?;
        let schedule = schedule_from(&cfg)?;
        let outcome = run_eval(&ckpt.model, &cfg, &dataset, &schedule, quiet)?;
        let r = &outcome.report;
        println!(
            "{name:<28} spatial={spatial} temporal={temporal} moe={moe}  \
             r@1 {:.3}  fid {:.4}  div {:.3}  mm {:.3}",
            r.r_precision_top1.mean, r.fid.mean, r.diversity.mean, r.multimodality.mean
        );
        results.push(serde_json::json!({
            "name": name,
            "spatial_independence": spatial,
            "temporal_independence": temporal,
            "moe": moe,
            "report": r,
        }));
    }
    fs::write(
        out.join("ablation_report.json"),
        serde_json::to_string_pretty(&serde_json::Value::Array(results))?,
    )?;
    Ok(())
}

/// Ensure an output directory argument exists or default next to the run.
pub fn default_out(run_dir: &Path, sub: &str, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| run_dir.join(sub))
}
