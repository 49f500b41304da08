//! Command-line surface. `run` returns the process exit status: 0 on
//! success, 2 on usage errors, 1 on any other error (printed as one line).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::backbone::Backbone;
use crate::bench::{
    bench_cyclic, depth_plots, depth_sweep, entropy_plot, entropy_stats, read_sweep_csv, write_bench_csv, write_runs_csv,
    write_sweep_csv,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::Config;
use crate::consolidator::Consolidator;
use crate::engine::{read_trace_jsonl, write_trace_jsonl, Engine, GenerationConfig, Mode, TraceLog};
use crate::error::{Error, Result};
use crate::monitor::{calibrate_threshold, Monitor};
use crate::trainer::{fit, make_synthetic_dataset, prepare_all, evaluate, TrainingExample, BOS};

#[derive(Debug, Parser)]
#[command(name = "flashmem", version, about = "Entropy-gated latent memory on a tiny frozen transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config; defaults apply to anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<Config> {
        let cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        Ok(match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    }
}

/// Comma-separated values given as one argument.
#[derive(Debug, Clone)]
struct List<T>(Vec<T>);

fn parse_list<T: std::str::FromStr>(s: &str) -> std::result::Result<List<T>, String>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<T>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()
        .map(List)
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a consolidator on the synthetic task and save a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to write; defaults to the config's `checkpoint`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_heldout: Option<usize>,
        /// Per-step loss and gradient norms as CSV.
        #[arg(long)]
        metrics_out: Option<PathBuf>,
    },
    /// Generate from a prompt and optionally write the step trace.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<Mode>,
        /// Entropy threshold; ignored in vanilla mode.
        #[arg(long)]
        tau: Option<f64>,
        /// Prompt text, encoded as bytes after BOS. Defaults to a held-out
        /// synthetic prompt.
        #[arg(long)]
        prompt_file: Option<PathBuf>,
        #[arg(long)]
        trace_out: Option<PathBuf>,
        #[arg(long)]
        max_new_tokens: Option<usize>,
    },
    /// Set the monitor threshold to a percentile of validation entropies and
    /// write it into the config.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 85.0)]
        percentile: f64,
        /// One entropy per line, or a `.trace.jsonl` file. Without it,
        /// vanilla runs over held-out prompts supply the entropies.
        #[arg(long)]
        entropies: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        n_prompts: usize,
    },
    /// Cyclic generation benchmark across contexts and modes.
    BenchCyclic {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_list::<usize>)]
        contexts: Option<List<usize>>,
        #[arg(long, value_parser = parse_list::<Mode>)]
        modes: Option<List<Mode>>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long, default_value = "bench_cyclic.csv")]
        out: PathBuf,
        /// Per-run values.
        #[arg(long)]
        runs_out: Option<PathBuf>,
    },
    /// Entropy reduction after triggers, pairing traces by file name.
    EntropyStats {
        #[command(flatten)]
        common: Common,
        /// Directory of vanilla `.trace.jsonl` files.
        #[arg(long)]
        vanilla: PathBuf,
        /// Directory of flashmem `.trace.jsonl` files with the same names.
        #[arg(long)]
        flashmem: PathBuf,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        min_step: Option<usize>,
        #[arg(long)]
        tau_sig: Option<f64>,
        /// JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
        /// One entropy-vs-step SVG per trace pair.
        #[arg(long)]
        plot_dir: Option<PathBuf>,
    },
    /// Train one consolidator per depth and report accuracy, latency and size.
    DepthSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_list::<usize>)]
        depths: Option<List<usize>>,
        /// Receives depth_sweep.csv and two SVG plots.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

/// Runs the CLI on `argv` (including the program name).
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train {
            common,
            out,
            n_train,
            n_heldout,
            metrics_out,
        } => train(&common.load()?, out, n_train, n_heldout, metrics_out),
        Command::Generate {
            common,
            mode,
            tau,
            prompt_file,
            trace_out,
            max_new_tokens,
        } => {
            let mut cfg = common.load()?;
            if let Some(m) = mode {
                cfg.generation.mode = m;
            }
            if let Some(t) = tau {
                cfg.monitor.threshold = Some(t);
            }
            if let Some(n) = max_new_tokens {
                cfg.generation.max_new_tokens = n;
            }
            generate(&cfg, prompt_file.as_deref(), trace_out.as_deref())
        }
        Command::Calibrate {
            common,
            percentile,
            entropies,
            n_prompts,
        } => {
            let path = common
                .config
                .clone()
                .ok_or_else(|| Error::config("calibrate writes the threshold into --config, which is missing"))?;
            calibrate(common.load()?, &path, percentile, entropies.as_deref(), n_prompts)
        }
        Command::BenchCyclic {
            common,
            contexts,
            modes,
            runs,
            out,
            runs_out,
        } => {
            let mut cfg = common.load()?;
            if let Some(c) = contexts {
                cfg.bench.contexts = c.0;
            }
            if let Some(m) = modes {
                cfg.bench.modes = m.0;
            }
            if let Some(r) = runs {
                cfg.bench.n_runs = r;
            }
            let (bb, c) = load_models(&cfg)?;
            let c = c.ok_or_else(|| Error::config("the checkpoint has no consolidator"))?;
            let report = bench_cyclic(&bb, &c, &cfg.bench)?;
            write_bench_csv(&out, &report)?;
            if let Some(p) = runs_out {
                write_runs_csv(p, &report)?;
            }
            println!("wrote {} rows to {}", report.rows.len(), out.display());
            Ok(())
        }
        Command::EntropyStats {
            common,
            vanilla,
            flashmem,
            window,
            min_step,
            tau_sig,
            out,
            plot_dir,
        } => {
            let mut cfg = common.load()?.stats;
            if let Some(w) = window {
                cfg.window_len = w;
            }
            if let Some(m) = min_step {
                cfg.min_step = m;
            }
            if let Some(t) = tau_sig {
                cfg.tau_sig = t;
            }
            let v = read_trace_dir(&vanilla)?;
            let f = read_trace_dir(&flashmem)?;
            let stats = entropy_stats(&v, &f, &cfg)?;
            let text = match &stats {
                Some(s) => serde_json::to_string_pretty(s)?,
                None => "{\"n_triggers\": 0}".to_string(),
            };
            println!("{text}");
            if let Some(p) = out {
                std::fs::write(p, &text)?;
            }
            if let Some(dir) = plot_dir {
                std::fs::create_dir_all(&dir)?;
                for (id, fm) in &f {
                    entropy_plot(&v[id], fm, id).write(dir.join(format!("{id}.svg")))?;
                }
            }
            Ok(())
        }
        Command::DepthSweep { common, depths, out_dir } => {
            let mut cfg = common.load()?;
            if let Some(d) = depths {
                cfg.sweep.depths = d.0;
            }
            std::fs::create_dir_all(&out_dir)?;
            let rows = depth_sweep::<f32>(&cfg.sweep, |r| {
                println!(
                    "L={} accuracy={:.3} ce={:.4} consolidation_ms={:.3} params={}",
                    r.layers, r.heldout_accuracy, r.heldout_ce, r.consolidation_ms, r.param_count
                );
            })?;
            let csv = out_dir.join("depth_sweep.csv");
            write_sweep_csv(&csv, &rows)?;
            let (latency, params) = depth_plots(&read_sweep_csv(&csv)?);
            latency.write(out_dir.join("depth_latency.svg"))?;
            params.write(out_dir.join("depth_params.svg"))?;
            Ok(())
        }
    }
}

/// Checkpoint from the config if it names one, else a seeded backbone with
/// an untrained, inherited consolidator.
fn load_models(cfg: &Config) -> Result<(Backbone<f32>, Option<Consolidator<f32>>)> {
    if let Some(path) = &cfg.checkpoint {
        let ck = load_checkpoint::<f32>(path)?;
        return Ok((ck.backbone, ck.consolidator));
    }
    eprintln!("note: no checkpoint configured; using an untrained consolidator");
    let bb = Backbone::init(cfg.backbone.clone(), cfg.seed)?;
    let c = Consolidator::inherit(&bb, cfg.train.consolidator_config(cfg.backbone.d_model), cfg.seed)?;
    Ok((bb, Some(c)))
}

fn heldout_prompts(cfg: &Config, n: usize) -> Result<Vec<TrainingExample>> {
    Ok(make_synthetic_dataset(&cfg.task, cfg.backbone.vocab_size, 0, n)?.heldout)
}

fn train(
    cfg: &Config,
    out: Option<PathBuf>,
    n_train: Option<usize>,
    n_heldout: Option<usize>,
    metrics_out: Option<PathBuf>,
) -> Result<()> {
    let out = out
        .or_else(|| cfg.checkpoint.clone())
        .ok_or_else(|| Error::config("no checkpoint path: pass --out or set `checkpoint`"))?;
    let n_train = n_train.or(cfg.n_train).unwrap_or(2000);
    let n_heldout = n_heldout.or(cfg.n_heldout).unwrap_or(200);
    let bb = Backbone::<f32>::init(cfg.backbone.clone(), cfg.seed)?;
    let split = make_synthetic_dataset(&cfg.task, cfg.backbone.vocab_size, n_train, n_heldout)?;
    let train = prepare_all(&bb, &split.train)?;
    let heldout = prepare_all(&bb, &split.heldout)?;
    let mut c = Consolidator::inherit(&bb, cfg.train.consolidator_config(cfg.backbone.d_model), cfg.train.seed)?;
    let per_epoch = cfg.train.steps_per_epoch(train.len());
    let steps = fit(&bb, &mut c, &train, &cfg.train, |m| {
        if (m.step + 1) % per_epoch == 0 {
            println!("epoch {} step {} loss {:.4}", (m.step + 1) / per_epoch, m.step + 1, m.loss);
        }
    })?;
    if let Some(p) = metrics_out {
        let mut w = csv::Writer::from_path(p)?;
        for m in &steps {
            w.serialize(m)?;
        }
        w.flush()?;
    }
    let with = evaluate(&bb, Some(&c), &heldout)?;
    let without = evaluate(&bb, None, &heldout)?;
    println!(
        "heldout ce with memory {:.4} without {:.4} (relative improvement {:.1}%), accuracy {:.3} vs {:.3}",
        with.mean_ce,
        without.mean_ce,
        (1.0 - with.mean_ce / without.mean_ce) * 100.0,
        with.accuracy,
        without.accuracy
    );
    save_checkpoint(&out, &bb, Some(&c))?;
    println!("saved {}", out.display());
    Ok(())
}

fn generation_prompt(cfg: &Config, prompt_file: Option<&Path>) -> Result<Vec<u32>> {
    match prompt_file {
        Some(p) => {
            let bytes = std::fs::read(p)?;
            Ok(std::iter::once(BOS).chain(bytes.into_iter().map(u32::from)).collect())
        }
        None => Ok(heldout_prompts(cfg, 1)?.remove(0).x),
    }
}

fn generate(cfg: &Config, prompt_file: Option<&Path>, trace_out: Option<&Path>) -> Result<()> {
    let (bb, c) = load_models(cfg)?;
    let prompt = generation_prompt(cfg, prompt_file)?;
    let engine = Engine::new(&bb, c.as_ref(), Monitor::new(cfg.monitor.clone())?)?;
    let trace = engine.run(&prompt, &cfg.generation)?;
    if let Some(p) = trace_out {
        write_trace_jsonl(p, &trace.log())?;
    }
    let text: String = trace
        .generated_tokens
        .iter()
        .map(|&t| match u8::try_from(t) {
            Ok(b) if b.is_ascii_graphic() || b == b' ' => b as char,
            _ => '.',
        })
        .collect();
    let mut out = std::io::stdout().lock();
    writeln!(out, "mode {} triggers {} final cache {}", trace.mode, trace.triggers.len(), trace.final_cache_len)?;
    writeln!(out, "tokens {:?}", trace.generated_tokens)?;
    writeln!(out, "text {text}")?;
    Ok(())
}

fn read_entropies(path: &Path) -> Result<Vec<f64>> {
    if path.to_string_lossy().ends_with(".jsonl") {
        return Ok(read_trace_jsonl(path)?.entropies());
    }
    std::fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.parse::<f64>()
                .map_err(|e| Error::contract(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn calibrate(mut cfg: Config, config_path: &Path, percentile: f64, entropies: Option<&Path>, n_prompts: usize) -> Result<()> {
    let values = match entropies {
        Some(p) => read_entropies(p)?,
        None => {
            let (bb, _) = load_models(&cfg)?;
            let engine = Engine::new(&bb, None, Monitor::new(cfg.monitor.clone())?)?;
            let gen = GenerationConfig {
                mode: Mode::Vanilla,
                ..cfg.generation.clone()
            };
            let mut all = Vec::new();
            for e in heldout_prompts(&cfg, n_prompts)? {
                all.extend(engine.run(&e.x, &gen)?.log().entropies());
            }
            all
        }
    };
    let tau = calibrate_threshold(&values, percentile)?;
    cfg.monitor.threshold = Some(tau);
    cfg.monitor.percentile_target = percentile;
    cfg.save(config_path)?;
    println!("tau = {tau} ({} entropies, percentile {percentile})", values.len());
    Ok(())
}

fn read_trace_dir(dir: &Path) -> Result<BTreeMap<String, TraceLog>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if let Some(id) = name.strip_suffix(".trace.jsonl") {
            out.insert(id.to_string(), read_trace_jsonl(&path)?);
        }
    }
    Ok(out)
}
