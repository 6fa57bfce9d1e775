//! Command implementations.

use std::path::Path;
use std::time::Instant;

use mgaa_core::harness::{self, generate_token_dataset, init_toy_model};
use mgaa_core::io::{self, RunConfig};
use mgaa_core::pipeline;

use crate::analyze;
use crate::failure::Failure;

type CmdResult = Result<(), Failure>;

/// Tokens are drawn from a separate stream than the model weights so the
/// same seed can drive both files.
const TOKEN_SEED_SALT: u64 = 0x746f_6b31;

/// Pretty JSON with object keys sorted at every level, so reruns diff
/// cleanly.
fn sorted_json<T: serde::Serialize>(value: &T) -> Result<String, Failure> {
    let tree = serde_json::to_value(value).map_err(io::IoError::Json)?;
    serde_json::to_string_pretty(&tree)
        .map_err(io::IoError::Json)
        .map_err(Failure::from)
}

pub fn gen_toy(config: &Path, out: &Path) -> CmdResult {
    let cfg = RunConfig::read_from(config)?;
    let model = init_toy_model(&cfg.toy_model_config())?;
    io::write_model(out, &model)?;
    eprintln!(
        "wrote toy model ({} layers, hidden {}, vocab {}) to {}",
        model.cfg.layers,
        model.cfg.hidden,
        model.cfg.vocab,
        out.display()
    );
    Ok(())
}

pub fn gen_calib(config: &Path, out: &Path) -> CmdResult {
    let cfg = RunConfig::read_from(config)?;
    let dataset = generate_token_dataset(
        cfg.toy.vocab,
        cfg.calib_sequences,
        cfg.calib_tokens,
        cfg.seed ^ TOKEN_SEED_SALT,
    );
    io::write_tokens(out, &dataset)?;
    eprintln!(
        "wrote {} sequences x {} tokens to {}",
        cfg.calib_sequences,
        cfg.calib_tokens,
        out.display()
    );
    Ok(())
}

fn load_calib(path: &Path, vocab: usize) -> Result<Vec<Vec<u32>>, Failure> {
    let dataset = io::read_tokens(path)?;
    for (i, seq) in dataset.iter().enumerate() {
        if let Some(&bad) = seq.iter().find(|&&t| t as usize >= vocab) {
            return Err(Failure::new(
                "data",
                format!(
                    "{}: sequence {i} holds token {bad} outside vocabulary {vocab}",
                    path.display()
                ),
            ));
        }
    }
    Ok(dataset)
}

pub fn capture(model_path: &Path, calib_path: &Path, out_stats: &Path) -> CmdResult {
    let model = io::read_model(model_path)?;
    let dataset = load_calib(calib_path, model.cfg.vocab)?;
    let mut stats = harness::collect_calibration(&model, &dataset)?;
    pipeline::compute_spectra(&model, &mut stats)?;
    io::write_stats(out_stats, &stats)?;
    eprintln!(
        "captured statistics for {} sublayers to {}",
        stats.len(),
        out_stats.display()
    );
    Ok(())
}

pub fn allocate(stats_path: &Path, config: &Path, out_plan: &Path) -> CmdResult {
    let cfg = RunConfig::read_from(config)?;
    let stats = io::read_stats(stats_path)?;
    let plan = pipeline::build_plan_from_stats(&stats, &cfg.allocation_config()?, cfg.method)?;
    io::write_atomic(out_plan, sorted_json(&plan)?.as_bytes())?;
    eprintln!(
        "planned ratio {:.4} (target {:.4}) across {} sublayers to {}",
        plan.predicted_achieved_ratio,
        plan.target_ratio,
        plan.ranks.len(),
        out_plan.display()
    );
    Ok(())
}

pub fn compress(
    model_path: Option<&Path>,
    calib_path: Option<&Path>,
    config: &Path,
    out: Option<&Path>,
    report_path: &Path,
) -> CmdResult {
    let cfg = RunConfig::read_from(config)?;
    let model_path = model_path
        .or(cfg.model.as_deref())
        .ok_or_else(|| Failure::new("config", "no model path (flag --model or config.model)"))?;
    let calib_path = calib_path
        .or(cfg.calib.as_deref())
        .ok_or_else(|| Failure::new("config", "no calib path (flag --calib or config.calib)"))?;
    let out = out
        .or(cfg.output.as_deref())
        .ok_or_else(|| Failure::new("config", "no output path (flag --out or config.output)"))?;

    let model = io::read_model(model_path)?;
    let dataset = load_calib(calib_path, model.cfg.vocab)?;
    let started = Instant::now();
    let (compressed, report) =
        pipeline::mgaa_compress(&model, &dataset, &cfg.allocation_config()?, cfg.method)?;
    io::write_model(out, &compressed)?;
    io::write_atomic(report_path, sorted_json(&report)?.as_bytes())?;
    eprintln!(
        "compressed with {}: achieved ratio {:.4} (target {:.4}), {} clamp events, {:.1} ms",
        report.method,
        report.achieved_ratio,
        report.target_ratio,
        report.clamp_events.len(),
        started.elapsed().as_secs_f64() * 1e3
    );
    Ok(())
}

pub fn eval(model_path: &Path, reference_path: &Path, calib_path: &Path) -> CmdResult {
    let candidate = io::read_model(model_path)?;
    let reference = io::read_model(reference_path)?;
    let dataset = load_calib(calib_path, reference.cfg.vocab)?;
    let metrics = pipeline::eval_model(&candidate, &reference, &dataset)?;
    let json = serde_json::to_string_pretty(&metrics).map_err(io::IoError::Json)?;
    println!("{json}");
    Ok(())
}

pub fn analyze(stats_path: &Path, plot_dir: &Path, config: Option<&Path>) -> CmdResult {
    let stats = io::read_stats(stats_path)?;
    let cfg = match config {
        Some(path) => Some(RunConfig::read_from(path)?),
        None => None,
    };
    analyze::emit(&stats, plot_dir, cfg.as_ref())?;
    eprintln!("wrote analysis artifacts to {}", plot_dir.display());
    Ok(())
}
