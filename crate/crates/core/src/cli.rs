//! Command-line front end. Run commands read an optional TOML config; flags
//! given explicitly on the command line override it. The resolved settings
//! are written next to every output.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::parser::ValueSource;
use clap::{ArgAction, ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::adaptor::{sample_adapted, AdapterParams};
use crate::dataio::{load_manifest, write_manifest, ConditionMode, MotionSource, Precision, RunConfig};
use crate::decoder::{pretrain_base, sample_batch, BaseDecoder, PretrainExample, PretrainSettings};
use crate::encoder::FlowEmbedder;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_run, NgramEmbedder};
use crate::synthdata::{generate_dataset, SynthSpec};
use crate::training::{
    load_base, load_checkpoint, load_clips, load_condition, read_tokens, save_base, save_checkpoint, train_adapter,
    write_tokens,
};

pub const CONFIG_ECHO: &str = "run_config.toml";
pub const SPEC_ECHO: &str = "synth_spec.toml";
pub const INVOCATION_ECHO: &str = "invocation.json";
pub const PRETRAIN_LOG: &str = "pretrain_log.json";
pub const FAILED_MARKER: &str = ".failed";

/// Outcome of one command: exit code 0 on success, 1 for invalid input or
/// configuration, 2 for failures while running.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandResult {
    pub exit_code: i32,
    pub summary: String,
    pub written: Vec<PathBuf>,
}

impl CommandResult {
    fn ok(summary: String, written: Vec<PathBuf>) -> Self {
        Self {
            exit_code: 0,
            summary,
            written,
        }
    }

    fn from_error(err: &Error) -> Self {
        Self {
            exit_code: if err.is_validation() { 1 } else { 2 },
            summary: format!("error: {err}"),
            written: Vec::new(),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "cuebeat", version, about = "Gesture- and expression-conditioned music token generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset with known tempo and caption structure.
    SynthData(SynthArgs),
    /// Train the base decoder on a manifest's tokens; the result is frozen.
    Pretrain(PretrainArgs),
    /// Train the condition adapter against a frozen base.
    Train(TrainArgs),
    /// Sample token sequences for every clip of a manifest.
    Generate(GenerateArgs),
    /// Score generated clips against their references.
    Evaluate(EvaluateArgs),
}

macro_rules! run_args {
    ($($field:ident : $ty:ty => $help:literal;)*) => {
        /// Every run setting as a flag. Defaults are the built-in
        /// configuration; only flags present on the command line override
        /// the config file.
        #[derive(Args, Debug, Clone)]
        pub struct RunArgs {
            /// TOML run configuration.
            #[arg(long)]
            pub config: Option<PathBuf>,
            $(
                #[arg(long, help = $help, action = ArgAction::Set, default_value_t = RunConfig::default().$field)]
                pub $field: $ty,
            )*
        }

        impl RunArgs {
            pub fn resolve(&self, matches: &ArgMatches) -> Result<RunConfig> {
                let mut cfg = match &self.config {
                    Some(path) => RunConfig::load(path)?,
                    None => RunConfig::default(),
                };
                $(
                    if matches.value_source(stringify!($field)) == Some(ValueSource::CommandLine) {
                        cfg.$field = self.$field.clone();
                    }
                )*
                cfg.validate()?;
                Ok(cfg)
            }
        }
    };
}

run_args! {
    d_model: usize => "Model width";
    n_layers: usize => "Decoder layers";
    n_heads: usize => "Attention heads";
    ffn_dim: usize => "Feed-forward width";
    vocab_size: usize => "Code vocabulary size";
    prompt_len: usize => "Prompt vectors per caption";
    n_captions: usize => "Number of captions";
    code_rate_hz: f64 => "Token frame rate in Hz";
    adapted_layers: usize => "Final layers that carry the condition prefix";
    face_rank: usize => "Face projection rank";
    motion_rank: usize => "Motion projection rank";
    face_dim: usize => "Face feature width";
    motion_dim: usize => "Motion feature width for the context source";
    max_prefix_len: usize => "Prefix capacity in code frames";
    condition_mode: ConditionMode => "face_only, motion_only or face_and_motion";
    motion_source: MotionSource => "context or flow";
    learning_rate: f64 => "Adapter learning rate";
    batch_size: usize => "Clips per adapter step";
    epochs: usize => "Adapter training epochs";
    grad_clip: bool => "Clip the global gradient norm";
    grad_clip_norm: f64 => "Gradient norm bound";
    precision: Precision => "f32 or f64";
    seed: u64 => "Seed for initialisation, shuffling and sampling";
    pretrain_steps: usize => "Base pretraining steps";
    pretrain_learning_rate: f64 => "Base pretraining learning rate";
    pretrain_crop_len: usize => "Pretraining crop length in frames";
    pretrain_batch_size: usize => "Crops per pretraining step";
    temperature: f64 => "Sampling temperature; 0 is greedy";
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    /// TOML dataset spec; built-in defaults when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the dataset spec's clip count.
    #[arg(long)]
    pub n_clips: Option<usize>,
    /// Override the dataset spec's content seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
pub struct PretrainArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunArgs,
    /// Training manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the frozen base.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunArgs,
    /// Training manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory written by `pretrain`.
    #[arg(long)]
    pub base: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct GenerateArgs {
    #[command(flatten)]
    #[serde(skip)]
    pub run: RunArgs,
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest whose clips provide the conditioning streams and captions.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated sampling seeds; defaults to the run seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Use this caption for every clip instead of the manifest's.
    #[arg(long)]
    pub caption: Option<u32>,
    /// Sample from the frozen base without the adapter.
    #[arg(long)]
    pub base_only: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct EvaluateArgs {
    /// Manifest of generated clips.
    #[arg(long)]
    pub generated: PathBuf,
    /// Manifest of reference clips, in the same order.
    #[arg(long)]
    pub reference: PathBuf,
    /// Path of the JSON report.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads; the report does not depend on it.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Token frame rate in Hz.
    #[arg(long, default_value_t = RunConfig::default().code_rate_hz)]
    pub code_rate_hz: f64,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> CommandResult
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let exit_code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            return CommandResult {
                exit_code,
                summary: e.render().to_string(),
                written: Vec::new(),
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            return CommandResult {
                exit_code: 1,
                summary: e.render().to_string(),
                written: Vec::new(),
            }
        }
    };
    let sub = matches.subcommand().map(|(_, m)| m).expect("a subcommand is required");
    let result = match &cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Pretrain(a) => a.run.resolve(sub).and_then(|cfg| pretrain(a, &cfg)),
        Command::Train(a) => a.run.resolve(sub).and_then(|cfg| train(a, &cfg)),
        Command::Generate(a) => a.run.resolve(sub).and_then(|cfg| generate(a, &cfg)),
        Command::Evaluate(a) => evaluate(a),
    };
    result.unwrap_or_else(|e| CommandResult::from_error(&e))
}

fn write_text(path: &Path, text: &str) -> Result<PathBuf> {
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn echo_invocation(dir: &Path, args: &impl Serialize) -> Result<PathBuf> {
    write_text(&dir.join(INVOCATION_ECHO), &(serde_json::to_string_pretty(args)? + "\n"))
}

/// Runs `work` with `out` created. A failure leaves a `.failed` marker
/// holding the error; success clears any stale marker.
fn guarded<T>(out: &Path, work: impl FnOnce() -> Result<T>) -> Result<T> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let marker = out.join(FAILED_MARKER);
    if marker.exists() {
        fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    work().inspect_err(|e| {
        let _ = fs::write(&marker, format!("{e}\n"));
    })
}

/// Digest of every regular file directly inside `dir`, or `None` when the
/// directory has no files.
fn dir_digest(dir: &Path) -> Option<String> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    if names.is_empty() {
        return None;
    }
    names.sort();
    let mut hasher = Sha256::new();
    for path in names {
        hasher.update(path.file_name()?.as_encoded_bytes());
        hasher.update(fs::read(&path).ok()?);
    }
    Some(hex::encode(hasher.finalize()))
}

fn synth_data(args: &SynthArgs) -> Result<CommandResult> {
    let mut spec = match &args.spec {
        Some(path) => SynthSpec::load(path)?,
        None => SynthSpec::default(),
    };
    if let Some(n) = args.n_clips {
        spec.n_clips = n;
    }
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let before = dir_digest(&args.out);
    let manifest = guarded(&args.out, || {
        let m = generate_dataset(&spec, &args.out)?;
        write_text(&args.out.join(SPEC_ECHO), &spec.to_toml_string())?;
        echo_invocation(&args.out, args)?;
        Ok(m)
    })?;
    let mut summary = format!(
        "wrote {} clips to {} (seed {}, style seed {})",
        manifest.len(),
        args.out.display(),
        spec.seed,
        spec.style_seed
    );
    if before.is_some() && before == dir_digest(&args.out) {
        summary.push_str("; output is byte-identical to the previous contents");
    }
    Ok(CommandResult::ok(summary, vec![args.out.join(crate::synthdata::MANIFEST_FILE)]))
}

fn pretrain(args: &PretrainArgs, cfg: &RunConfig) -> Result<CommandResult> {
    let manifest = load_manifest(&args.data)?;
    let examples = manifest
        .entries
        .iter()
        .map(|e| {
            Ok(PretrainExample {
                codes: read_tokens(&manifest.resolve(&e.token_path), cfg.code_rate_hz)?.codes,
                caption: e.caption_id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let settings = PretrainSettings {
        steps: cfg.pretrain_steps,
        batch_size: cfg.pretrain_batch_size,
        crop_len: cfg.pretrain_crop_len,
        learning_rate: cfg.pretrain_learning_rate,
        clip_norm: cfg.grad_clip.then_some(cfg.grad_clip_norm),
        seed: cfg.seed,
    };
    let out = &args.out;
    let outcome = guarded(out, || {
        let outcome = pretrain_base(&examples, &cfg.into(), settings)?;
        save_base(out, &outcome.params)?;
        cfg.save(out.join(CONFIG_ECHO))?;
        echo_invocation(out, args)?;
        let log = serde_json::json!({
            "steps": settings.steps,
            "losses": outcome.losses,
            "final_ce": outcome.final_ce,
            "unigram_entropy": outcome.unigram_entropy,
            "freeze_hash": outcome.freeze_hash,
        });
        write_text(&out.join(PRETRAIN_LOG), &(serde_json::to_string_pretty(&log)? + "\n"))?;
        Ok(outcome)
    })?;
    let summary = format!(
        "pretrained base for {} steps (seed {}): cross-entropy {:.4} nats, unigram entropy {:.4} nats\nfreeze hash {}",
        settings.steps, cfg.seed, outcome.final_ce, outcome.unigram_entropy, outcome.freeze_hash
    );
    Ok(CommandResult::ok(summary, vec![out.clone()]))
}

/// Builds the frozen decoder, reporting a config mismatch as a config error.
fn decoder_for(cfg: &RunConfig, params: &crate::params::ParamStore) -> Result<BaseDecoder> {
    BaseDecoder::load(cfg.into(), &params.to_dtype(cfg.precision.dtype())?)
        .map_err(|e| Error::Config(format!("base parameters do not fit the configured decoder: {e}")))
}

fn train(args: &TrainArgs, cfg: &RunConfig) -> Result<CommandResult> {
    let (base, hash) = load_base(&args.base)?;
    decoder_for(cfg, &base)?;
    let manifest = load_manifest(&args.data)?;
    let clips = load_clips(&manifest, cfg)?;
    let init = AdapterParams::init(cfg, cfg.seed)?;
    let out = &args.out;
    let outcome = guarded(out, || {
        let outcome = train_adapter(&clips, &base, &hash, &init, cfg)?;
        save_checkpoint(out, &base, &outcome.adapter, &outcome.state)?;
        cfg.save(out.join(CONFIG_ECHO))?;
        echo_invocation(out, args)?;
        Ok(outcome)
    })?;
    let gates: Vec<String> = outcome.state.gates.iter().map(|g| format!("{g:.4}")).collect();
    let summary = format!(
        "{}\ntrained {} epochs, {} steps on {} clips (seed {})\ninitial loss {:.4}, final loss {:.4}\ngates [{}]",
        outcome.budget,
        outcome.state.epoch,
        outcome.state.step,
        clips.len(),
        cfg.seed,
        outcome.initial_ce,
        outcome.final_ce,
        gates.join(", ")
    );
    Ok(CommandResult::ok(summary, vec![out.clone()]))
}

/// Manifest file written by `generate` for one sampling seed.
pub fn generated_manifest_name(seed: u64) -> String {
    format!("manifest_s{seed}.json")
}

fn generate(args: &GenerateArgs, cfg: &RunConfig) -> Result<CommandResult> {
    let (base_params, adapter_params, _) = load_checkpoint(&args.checkpoint)?;
    let base = decoder_for(cfg, &base_params)?;
    let adapter = AdapterParams::load(&adapter_params.to_dtype(cfg.precision.dtype())?)?;
    if adapter.n_layers() != cfg.adapted_layers {
        return Err(Error::Config(format!(
            "checkpoint adapts {} layers, config says {}",
            adapter.n_layers(),
            cfg.adapted_layers
        )));
    }
    let manifest = load_manifest(&args.data)?;
    let flow = FlowEmbedder::seeded(cfg.seed)?;
    let seeds = if args.seeds.is_empty() { vec![cfg.seed] } else { args.seeds.clone() };
    let out = &args.out;
    let written = guarded(out, || {
        let mut per_seed = vec![Vec::with_capacity(manifest.len()); seeds.len()];
        for entry in &manifest.entries {
            let caption = args.caption.unwrap_or(entry.caption_id);
            let aligned = load_condition(&manifest, entry, cfg, &flow)?.to_dtype(cfg.precision.dtype())?;
            let z = adapter.encoder.encode_aligned(&aligned, cfg.condition_mode)?;
            let seqs = if args.base_only {
                sample_batch(&base, &vec![caption; seeds.len()], &seeds, z.len(), cfg.temperature, None)?
            } else {
                sample_adapted(&base, &adapter, &z, caption, &seeds, cfg.temperature)?
            };
            for ((seed, tokens), entries) in seeds.iter().zip(seqs).zip(per_seed.iter_mut()) {
                let name = format!("{}_s{seed}_tokens.expt", entry.clip_id);
                write_tokens(&out.join(&name), &tokens)?;
                let absolute = |r: &str| -> Result<String> {
                    let p = manifest.resolve(r);
                    let p = std::path::absolute(&p).map_err(|e| Error::io(&p, e))?;
                    Ok(p.to_string_lossy().into_owned())
                };
                let mut generated = entry.clone();
                generated.token_path = name;
                generated.caption_id = caption;
                generated.face_path = absolute(&entry.face_path)?;
                generated.motion_path = absolute(&entry.motion_path)?;
                generated.flow_path = entry.flow_path.as_deref().map(absolute).transpose()?;
                entries.push(generated);
            }
        }
        let mut written = Vec::with_capacity(seeds.len());
        for (seed, entries) in seeds.iter().zip(&per_seed) {
            let path = out.join(generated_manifest_name(*seed));
            write_manifest(&path, entries)?;
            written.push(path);
        }
        cfg.save(out.join(CONFIG_ECHO))?;
        echo_invocation(out, args)?;
        Ok(written)
    })?;
    let summary = format!(
        "generated {} clips x {} seeds ({}, temperature {}) into {}",
        manifest.len(),
        seeds.len(),
        if args.base_only { "frozen base" } else { "adapted" },
        cfg.temperature,
        out.display()
    );
    Ok(CommandResult::ok(summary, written))
}

fn evaluate(args: &EvaluateArgs) -> Result<CommandResult> {
    let generated = load_manifest(&args.generated)?;
    let reference = load_manifest(&args.reference)?;
    let report = evaluate_run(&generated, &reference, &NgramEmbedder::default(), None, args.code_rate_hz, args.jobs)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    report.save(&args.out)?;
    let echo = args.out.with_extension(INVOCATION_ECHO);
    write_text(&echo, &(serde_json::to_string_pretty(args)? + "\n"))?;
    Ok(CommandResult::ok(report.to_table(), vec![args.out.clone()]))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `(flag, default)` pairs as rendered in a subcommand's help.
    fn help_defaults(sub: &str) -> Vec<(String, String)> {
        let mut cmd = Cli::command();
        let help = cmd.find_subcommand_mut(sub).unwrap().render_long_help().to_string();
        let mut out = Vec::new();
        let mut flag: Option<String> = None;
        for line in help.lines() {
            let t = line.trim_start();
            if let Some(rest) = t.strip_prefix("--") {
                flag = Some(rest.split_whitespace().next().unwrap().to_string());
            }
            if let (Some(f), Some(i)) = (&flag, t.find("[default: ")) {
                let v = &t[i + 10..];
                out.push((f.clone(), v[..v.find(']').unwrap()].to_string()));
                flag = None;
            }
        }
        out
    }

    #[test]
    fn help_defaults_reproduce_the_default_config() {
        let fields = match toml::Value::try_from(RunConfig::default()).unwrap() {
            toml::Value::Table(t) => t.len(),
            _ => unreachable!(),
        };
        for sub in ["pretrain", "train", "generate"] {
            let defaults = help_defaults(sub);
            assert_eq!(defaults.len(), fields, "{sub}: {defaults:?}");
            let mut argv = vec!["cuebeat".to_string(), sub.to_string()];
            for (flag, value) in &defaults {
                argv.push(format!("--{flag}"));
                argv.push(value.clone());
            }
            argv.extend(["--data", "d", "--out", "o", "--base", "b", "--checkpoint", "c"].map(String::from));
            if sub != "train" {
                argv.retain(|a| a != "--base" && a != "b");
            }
            if sub != "generate" {
                argv.retain(|a| a != "--checkpoint" && a != "c");
            }
            let matches = Cli::command().try_get_matches_from(&argv).unwrap();
            let cli = Cli::from_arg_matches(&matches).unwrap();
            let sub_m = matches.subcommand().unwrap().1;
            let run = match &cli.command {
                Command::Pretrain(a) => &a.run,
                Command::Train(a) => &a.run,
                Command::Generate(a) => &a.run,
                _ => unreachable!(),
            };
            assert_eq!(run.resolve(sub_m).unwrap(), RunConfig::default(), "{sub}");
        }
    }

    fn resolve(argv: &[&str]) -> Result<RunConfig> {
        let matches = Cli::command().try_get_matches_from(argv).unwrap();
        let cli = Cli::from_arg_matches(&matches).unwrap();
        match &cli.command {
            Command::Pretrain(a) => a.run.resolve(matches.subcommand().unwrap().1),
            _ => unreachable!(),
        }
    }

    #[test]
    fn explicit_flags_override_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "epochs = 3\nseed = 11\nd_model = 64\n").unwrap();
        let p = path.to_str().unwrap();
        let base = ["cuebeat", "pretrain", "--data", "d", "--out", "o", "--config", p];
        let cfg = resolve(&base).unwrap();
        assert_eq!((cfg.epochs, cfg.seed, cfg.d_model), (3, 11, 64));

        // A flag at its default value still wins when given explicitly.
        let cfg = resolve(&[&base[..], &["--epochs", "40", "--condition-mode", "motion_only"]].concat()).unwrap();
        assert_eq!((cfg.epochs, cfg.seed), (40, 11));
        assert_eq!(cfg.condition_mode, ConditionMode::MotionOnly);

        let cfg = resolve(&[&base[..], &["--grad-clip", "false"]].concat()).unwrap();
        assert!(!cfg.grad_clip);
    }

    #[test]
    fn invalid_settings_exit_with_code_one() {
        let r = run(["cuebeat", "pretrain", "--data", "d", "--out", "o", "--n-heads", "3"]);
        assert_eq!(r.exit_code, 1, "{}", r.summary);
        assert!(r.summary.contains("n_heads"), "{}", r.summary);
        let r = run(["cuebeat", "pretrain", "--data", "d", "--out", "o", "--precision", "f16"]);
        assert_eq!(r.exit_code, 1);
        let r = run(["cuebeat", "frobnicate"]);
        assert_eq!(r.exit_code, 1);
        let r = run(["cuebeat", "train", "--help"]);
        assert_eq!(r.exit_code, 0);
        assert!(r.summary.contains("--adapted-layers"));
    }

    #[test]
    fn bad_synth_spec_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let spec = dir.path().join("spec.toml");
        fs::write(&spec, "bpm_range = [10.0, 20.0]\n").unwrap();
        let out = dir.path().join("data");
        let r = run([
            "cuebeat",
            "synth-data",
            "--spec",
            spec.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(r.exit_code, 1);
        assert!(r.summary.contains("bpm"), "{}", r.summary);
        assert!(!out.exists());
    }

    #[test]
    fn synth_rerun_reports_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("data");
        let argv = ["cuebeat", "synth-data", "--out", out.to_str().unwrap(), "--n-clips", "2"];
        let first = run(argv);
        assert_eq!(first.exit_code, 0, "{}", first.summary);
        assert!(first.summary.contains("wrote 2 clips"));
        assert!(!first.summary.contains("identical"));
        let second = run(argv);
        assert!(second.summary.contains("byte-identical"), "{}", second.summary);
        assert!(out.join(SPEC_ECHO).is_file());
    }

    #[test]
    fn missing_base_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        assert_eq!(run(["cuebeat", "synth-data", "--out", data.to_str().unwrap(), "--n-clips", "2"]).exit_code, 0);
        let missing = dir.path().join("no_base");
        let r = run([
            "cuebeat",
            "train",
            "--data",
            data.join("manifest.json").to_str().unwrap(),
            "--base",
            missing.to_str().unwrap(),
            "--out",
            dir.path().join("ckpt").to_str().unwrap(),
        ]);
        assert_eq!(r.exit_code, 1);
        assert!(r.summary.contains("no_base"), "{}", r.summary);
    }

    #[test]
    fn failures_inside_a_guard_leave_a_marker() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ckpt");
        let err = guarded(&out, || -> Result<()> { Err(Error::Divergence { step: 3, detail: "nan".into() }) }).unwrap_err();
        assert!(!err.is_validation());
        let marker = fs::read_to_string(out.join(FAILED_MARKER)).unwrap();
        assert!(marker.contains("step 3"));
        guarded(&out, || Ok(())).unwrap();
        assert!(!out.join(FAILED_MARKER).exists());
    }
}
