//! Subcommand implementations. Each writes its resolved configuration and
//! reproducibility metadata next to its results.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ffae::checkpoint::{self, FORMAT_VERSION};
use ffae::eval::{estimate_bler, fmt_f64, size_sweep, size_sweep_csv, sweep, sweep_csv, BlerPoint};
use ffae::gradcheck::run_gradcheck;
use ffae::models::AnyModel;
use ffae::numerics::make_rng;
use ffae::training::{run_training, Algorithm, Control};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

/// Version of the CSV layouts written by this build.
pub const CSV_FORMAT_VERSION: u32 = 1;
/// Version of the configuration schema.
pub const CONFIG_FORMAT_VERSION: u32 = 1;
pub const BUILD_ID: &str = env!("FFAE_BUILD_ID");

/// Random stream ids of the evaluation commands (training uses 0–2).
pub const STREAM_EVALUATE: u64 = 3;
pub const STREAM_SWEEP: u64 = 4;
pub const STREAM_SIZE_SWEEP: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    GradcheckFailed,
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn prepare_out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir();
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}

/// Writes `{command}.config.toml` and `{command}.metadata.toml`.
fn write_provenance(dir: &Path, command: &str, cfg: &ExperimentConfig, extra: &[(&str, String)]) -> Result<()> {
    write(&dir.join(format!("{command}.config.toml")), &cfg.to_toml())?;
    let mut meta = toml::Table::new();
    let mut put = |k: &str, v: toml::Value| {
        meta.insert(k.to_string(), v);
    };
    put("command", command.into());
    put("seed", toml::Value::Integer(cfg.run.seed as i64));
    put("build_id", BUILD_ID.into());
    put("package_version", env!("CARGO_PKG_VERSION").into());
    put("checkpoint_format_version", toml::Value::Integer(FORMAT_VERSION.into()));
    put("csv_format_version", toml::Value::Integer(CSV_FORMAT_VERSION.into()));
    put("config_format_version", toml::Value::Integer(CONFIG_FORMAT_VERSION.into()));
    put("encoder_depth_convention", "L counts the final n-wide linear encoder layer".into());
    for (k, v) in extra {
        put(k, v.clone().into());
    }
    write(&dir.join(format!("{command}.metadata.toml")), &toml::to_string(&meta).expect("metadata serializes"))
}

pub fn train(cfg: &ExperimentConfig) -> Result<Outcome> {
    let dir = prepare_out_dir(cfg)?;
    let tc = cfg.train_config()?;
    write_provenance(&dir, "train", cfg, &[])?;
    let every = cfg.training.checkpoint_every;
    let progress = (tc.iterations / 10).max(1);
    let mut io_error = None;
    let (model, log) = run_training(&tc, |trainer, row| {
        let it = trainer.iteration();
        if every > 0 && it % every == 0 && it < tc.iterations {
            let path = dir.join(format!("checkpoint-{it:06}.ffae"));
            if let Err(e) = checkpoint::save(&path, &trainer.snapshot()) {
                io_error = Some(e);
                return Ok(Control::Stop);
            }
        }
        if it % progress == 0 {
            match row {
                Some(r) => eprintln!("train: iteration {it}/{} bler {:.4e}", tc.iterations, r.bler),
                None => eprintln!("train: iteration {it}/{}", tc.iterations),
            }
        }
        Ok(Control::Continue)
    })?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    checkpoint::save(&dir.join("model.ffae"), &model)?;
    write(&dir.join("convergence.csv"), &log.to_csv())?;
    eprintln!("train: wrote {}", dir.join("model.ffae").display());
    Ok(Outcome::Success)
}

fn load_model(path: &Path) -> Result<AnyModel> {
    let model = checkpoint::load(path)?;
    Ok(model)
}

fn check_code(cfg: &ExperimentConfig, model: &AnyModel) -> Result<()> {
    let (want, got) = (cfg.code_params()?, model.params());
    if want != got {
        return Err(CliError::Config(format!(
            "code: checkpoint uses k={}, n={} but the configuration says k={}, n={}",
            got.k(),
            got.n(),
            want.k(),
            want.n()
        )));
    }
    Ok(())
}

pub fn evaluate(cfg: &ExperimentConfig, checkpoint_path: &Path) -> Result<Outcome> {
    let model = load_model(checkpoint_path)?;
    check_code(cfg, &model)?;
    let dir = prepare_out_dir(cfg)?;
    write_provenance(&dir, "evaluate", cfg, &[("checkpoint", checkpoint_path.display().to_string())])?;
    let channel = cfg.eval_channel(cfg.eval.ebn0_db)?;
    let point = estimate_bler(&model, &channel, cfg.stop_rule()?, &make_rng(cfg.run.seed, STREAM_EVALUATE))?;
    println!(
        "{} dB: bler {} ({} errors / {} blocks)",
        cfg.eval.ebn0_db,
        fmt_f64(point.bler),
        point.errors,
        point.blocks
    );
    append_point(&dir.join("evaluate.csv"), &point)?;
    Ok(Outcome::Success)
}

fn append_point(path: &Path, point: &BlerPoint) -> Result<()> {
    let csv = sweep_csv(std::slice::from_ref(point));
    let exists = path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CliError::io(path, e))?;
    let text = if exists { csv.split_once('\n').expect("header line").1 } else { &csv };
    f.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))
}

/// One row per message: index, energy, then the transmitted symbols.
pub fn codewords_csv(model: &AnyModel) -> Result<String> {
    let params = model.params();
    let messages: Vec<usize> = (0..params.q()).collect();
    let x = model.encode(&messages)?;
    let mut out = String::from("message,energy");
    for j in 0..params.n() {
        let _ = write!(out, ",x{j}");
    }
    out.push('\n');
    for (m, row) in x.rows().into_iter().enumerate() {
        let _ = write!(out, "{m},{}", fmt_f64(row.dot(&row)));
        for v in row {
            let _ = write!(out, ",{}", fmt_f64(*v));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn run_sweep(cfg: &ExperimentConfig, checkpoint_path: &Path) -> Result<Outcome> {
    let model = load_model(checkpoint_path)?;
    check_code(cfg, &model)?;
    let dir = prepare_out_dir(cfg)?;
    write_provenance(&dir, "sweep", cfg, &[("checkpoint", checkpoint_path.display().to_string())])?;
    let spec = cfg.sweep_spec()?;
    // The grid points carry their own Eb/N0; this only fixes kind and shape.
    let channel = cfg.eval_channel(spec.ebn0_db[0])?;
    let points = sweep(&model, &spec, &channel, &make_rng(cfg.run.seed, STREAM_SWEEP))?;
    write(&dir.join("sweep.csv"), &sweep_csv(&points))?;
    write(&dir.join("codewords.csv"), &codewords_csv(&model)?)?;
    for p in &points {
        eprintln!("sweep: {:>6.2} dB  bler {:.4e}  ({} / {})", p.ebn0_db, p.bler, p.errors, p.blocks);
    }
    Ok(Outcome::Success)
}

pub fn run_size_sweep(cfg: &ExperimentConfig) -> Result<Outcome> {
    let mut tc = cfg.train_config()?;
    if tc.algorithm != Algorithm::Ff {
        return Err(CliError::Config("run.algorithm: size-sweep trains forward-forward models (use ff)".into()));
    }
    tc.eval_stride = 0;
    let dir = prepare_out_dir(cfg)?;
    write_provenance(&dir, "size-sweep", cfg, &[("evaluation_channel_assumption", cfg.channel.kind.clone())])?;
    let grid = cfg.size_grid()?;
    let channel = cfg.eval_channel(cfg.size_sweep.ebn0_db)?;
    eprintln!("size-sweep: training {} networks", grid.cells().len());
    let cells = size_sweep(&tc, &grid, &channel, cfg.stop_rule()?, &make_rng(cfg.run.seed, STREAM_SIZE_SWEEP))?;
    write(&dir.join("size_sweep.csv"), &size_sweep_csv(&cells))?;
    for c in &cells {
        match &c.failure {
            Some(f) => eprintln!("size-sweep: L={} K={} W={} failed: {f}", c.encoder_layers, c.decoder_layers, c.width),
            None => eprintln!("size-sweep: L={} K={} W={} bler {:.4e}", c.encoder_layers, c.decoder_layers, c.width, c.bler),
        }
    }
    Ok(Outcome::Success)
}

pub fn gradcheck(cfg: &ExperimentConfig) -> Result<Outcome> {
    let dir = prepare_out_dir(cfg)?;
    write_provenance(&dir, "gradcheck", cfg, &[])?;
    let report = run_gradcheck(&cfg.gradcheck_config()?)?;
    let text = report.to_text();
    print!("{text}");
    write(&dir.join("gradcheck.txt"), &text)?;
    Ok(if report.passed() { Outcome::Success } else { Outcome::GradcheckFailed })
}
