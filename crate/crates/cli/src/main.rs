mod config;

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use musicform_core::exec::Strategy;
use musicform_core::form::{parse_form, validate_form};
use musicform_core::optimizer::{
    exploration_histogram, summary, trajectory_text, BackendEngine, HttpLlm, LlmClient, Optimizer, OptimizerState,
    Phase, ScriptedLlm, SimulatedRater, DEFAULT_SEED_PROMPT,
};
use musicform_core::rvq::{train_preset, RvqCodec};
use musicform_core::stats::{load_ratings, MosReport};
use musicform_core::synth::SynthConfig;
use musicform_core::{plan_piece, render_piece, RemoteBackend, TokenModel, ToyBackend};
use musicform_service::{AppState, DirClipStore, RatingDesk};
use serde::Deserialize;

use crate::config::Config;

/// Exit status 1. Anything else that fails is an I/O or config problem.
#[derive(Debug)]
struct DomainError(String);

impl fmt::Display for DomainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DomainError {}

fn domain(msg: impl fmt::Display) -> anyhow::Error {
    anyhow::Error::new(DomainError(msg.to_string()))
}

#[derive(Parser, Debug)]
#[command(name = "musicform", version, about = "Form-conditioned music generation and prompt optimization")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for generation and optimization.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Remote model backend; the built-in toy model is used otherwise.
    #[arg(long, global = true)]
    backend_url: Option<String>,
    /// Scripted LLM responses: {"po": {...}, "mp": {...}}.
    #[arg(long, global = true)]
    llm_fixture: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a form file against the duration and reference rules.
    Validate { form: PathBuf },
    /// Render a form into tokens, a manifest and a WAV file.
    Generate { form: PathBuf },
    /// Run or resume prompt optimization.
    Optimize(OptimizeArgs),
    /// Summarize a ratings CSV as a MOS table.
    Report(ReportArgs),
    /// Run the rating service.
    Serve {
        #[arg(long)]
        addr: Option<String>,
    },
}

#[derive(Args, Debug)]
struct OptimizeArgs {
    /// File holding the seed instruction prompt.
    #[arg(long)]
    seed_prompt: Option<PathBuf>,
    /// Stop after the exploration phase.
    #[arg(long)]
    explore: bool,
    /// Only run exploitation; requires an explored state.
    #[arg(long)]
    exploit: bool,
    /// Exploitation iterations in total.
    #[arg(long)]
    iterations: Option<usize>,
    /// Continue from the state file in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct ReportArgs {
    ratings: PathBuf,
    /// `group=Label`, in row order. Defaults to every group present.
    #[arg(long = "group")]
    groups: Vec<String>,
    /// Welch test of the first group against each other group.
    #[arg(long)]
    compare: bool,
    /// Rater to drop before summarizing.
    #[arg(long = "exclude")]
    exclude: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<DomainError>()) {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut config = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    config.optimizer.seed = config.seed;
    if let Some(u) = &cli.backend_url {
        config.backend.url = Some(u.clone());
    }
    if let Some(f) = &cli.llm_fixture {
        config.llm.fixture = Some(f.clone());
    }
    if let Some(o) = &cli.out {
        config.store.out = o.clone();
    }
    match cli.command {
        Command::Validate { form } => validate(&config, &form),
        Command::Generate { form } => generate(&config, &form),
        Command::Optimize(args) => optimize(&config, &args),
        Command::Report(args) => report(&args),
        Command::Serve { addr } => serve(&config, addr),
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn validate(config: &Config, path: &Path) -> Result<ExitCode> {
    let spec = parse_form(&read_text(path)?).map_err(domain)?;
    let report = validate_form(&spec, &config.orchestrator().constraints);
    print!("{report}");
    Ok(if report.valid { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn backend(config: &Config) -> Result<Arc<dyn TokenModel>> {
    match &config.backend.url {
        Some(url) => Ok(Arc::new(
            RemoteBackend::connect(url).with_context(|| format!("connecting to backend {url}"))?,
        )),
        None => {
            let (_, k, v) = config.codec_preset.shape();
            Ok(Arc::new(ToyBackend::new(k, v, 4)))
        }
    }
}

fn codec(config: &Config) -> Result<RvqCodec> {
    match &config.store.codec {
        Some(p) if p.exists() => RvqCodec::load(p).with_context(|| format!("loading codec {}", p.display())),
        other => {
            let codec = train_preset(config.codec_preset, config.codec_seed, Strategy::default())?;
            if let Some(p) = other {
                codec.save(p).with_context(|| format!("saving codec {}", p.display()))?;
            }
            Ok(codec)
        }
    }
}

fn generate(config: &Config, path: &Path) -> Result<ExitCode> {
    let spec = parse_form(&read_text(path)?).map_err(domain)?;
    let plan = plan_piece(&spec, &config.orchestrator()).map_err(domain)?;
    let backend = backend(config)?;
    let codec = codec(config)?;
    let artifact = render_piece(&spec, &plan, backend.as_ref(), &codec, Strategy::default()).map_err(domain)?;
    let synth = SynthConfig {
        steps_per_second: config.frame_rate,
        ..SynthConfig::default()
    };
    let out = &config.store.out;
    artifact
        .write_to(out, codec.codebook_size(), &synth)
        .with_context(|| format!("writing {}", out.display()))?;
    let m = &artifact.manifest;
    println!("parts        {}", m.part_ranges.len());
    println!("total steps  {}", m.total_steps);
    println!("boundaries   {:?}", plan.boundaries());
    println!("grid hash    {}", m.grid_hash);
    println!("written to   {}", out.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Deserialize)]
struct LlmFixture {
    po: ScriptedLlm,
    mp: ScriptedLlm,
}

fn llm_clients(config: &Config) -> Result<(Box<dyn LlmClient>, Box<dyn LlmClient>)> {
    if let Some(path) = &config.llm.fixture {
        let f: LlmFixture = serde_json::from_str(&read_text(path)?)
            .with_context(|| format!("parsing LLM fixture {}", path.display()))?;
        return Ok((Box::new(f.po), Box::new(f.mp)));
    }
    let base = config
        .llm
        .base_url
        .as_deref()
        .ok_or_else(|| anyhow!("no LLM configured: set llm.base_url or pass --llm-fixture"))?;
    let model = config.llm.model.as_deref().unwrap_or("default");
    let env = config.llm.credential_env.as_deref();
    let po = HttpLlm::new(base, model, env)?;
    let mp = HttpLlm::new(base, model, env)?;
    Ok((Box::new(po), Box::new(mp)))
}

fn optimize(config: &Config, args: &OptimizeArgs) -> Result<ExitCode> {
    let out = &config.store.out;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let state_path = out.join("state.json");
    let mut state = if args.resume || args.exploit {
        OptimizerState::load(&state_path).with_context(|| format!("loading {}", state_path.display()))?
    } else {
        let seed_prompt = match &args.seed_prompt {
            Some(p) => read_text(p)?,
            None => DEFAULT_SEED_PROMPT.to_string(),
        };
        OptimizerState::new(seed_prompt.trim(), config.optimizer)
    };
    if args.exploit && state.phase == Phase::Exploration {
        return Err(domain("exploitation needs a finished exploration phase"));
    }
    if let Some(n) = args.iterations {
        state.config.max_iterations = n;
        if state.phase == Phase::Done && state.iteration < n {
            state.phase = Phase::Exploitation;
        }
    }

    let (po, mp) = llm_clients(config)?;
    let engine = BackendEngine {
        backend: backend(config)?,
        config: config.orchestrator(),
    };
    let raters = SimulatedRater::new(state.config.seed);
    let opt = Optimizer {
        po_llm: po.as_ref(),
        mp_llm: mp.as_ref(),
        engine: &engine,
        raters: &raters,
        strategy: Strategy::default(),
    };
    let mut save_error = None;
    let mut checkpoint = |s: &OptimizerState| {
        if let Err(e) = s.save(&state_path) {
            save_error.get_or_insert(e);
        }
    };
    let result = if args.explore {
        if state.phase == Phase::Exploration {
            opt.run_exploration(&mut state, &mut checkpoint)
        } else {
            Ok(())
        }
    } else {
        opt.run(&mut state, &mut checkpoint)
    };
    if let Some(e) = save_error {
        return Err(anyhow::Error::new(e).context("saving optimizer state"));
    }
    result.map_err(domain)?;
    state.save(&state_path)?;

    let histogram = exploration_histogram(&state, 0.25);
    let write = |name: &str, text: String| -> Result<()> {
        std::fs::write(out.join(name), text).with_context(|| format!("writing {name}"))
    };
    write("histogram.txt", histogram.render_text())?;
    write("trajectory.txt", trajectory_text(&state))?;
    write("summary.json", serde_json::to_string_pretty(&summary(&state))?)?;
    print!("{}", histogram.render_text());
    if !state.trajectory.is_empty() {
        print!("\n{}", trajectory_text(&state));
    }
    println!("\nphase {:?}, {} evaluations, state in {}", state.phase, state.evaluations, state_path.display());
    Ok(ExitCode::SUCCESS)
}

fn report(args: &ReportArgs) -> Result<ExitCode> {
    let ratings = load_ratings(&args.ratings).with_context(|| format!("reading {}", args.ratings.display()))?;
    let groups: Vec<(String, String)> = if args.groups.is_empty() {
        let present: BTreeSet<String> = ratings.iter().map(|r| r.group().to_string()).collect();
        present.into_iter().map(|g| (g.clone(), g)).collect()
    } else {
        args.groups
            .iter()
            .map(|g| match g.split_once('=') {
                Some((group, label)) => (group.to_string(), label.to_string()),
                None => (g.clone(), g.clone()),
            })
            .collect()
    };
    if groups.is_empty() {
        return Err(domain("no rating groups to report"));
    }
    let excluded: BTreeSet<String> = args.exclude.iter().cloned().collect();
    let mut table = MosReport::build(&ratings, &groups, &excluded).map_err(domain)?;
    if args.compare {
        table = table.with_comparisons(&ratings, &groups).map_err(domain)?;
    }
    print!("{}", table.render_text());
    Ok(ExitCode::SUCCESS)
}

fn serve(config: &Config, addr: Option<String>) -> Result<ExitCode> {
    let addr = addr.unwrap_or_else(|| config.service.addr.clone());
    let desk = RatingDesk::open(&config.store.desk_log, Default::default(), config.seed)
        .with_context(|| format!("opening {}", config.store.desk_log.display()))?;
    let mut state = AppState::new(desk, Arc::new(DirClipStore::new(&config.store.clips)));
    state.qualification_seconds = config.service.qualification_seconds;
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        eprintln!("rating service listening on http://{}", listener.local_addr()?);
        musicform_service::serve(listener, Arc::new(state)).await?;
        anyhow::Ok(())
    })?;
    Ok(ExitCode::SUCCESS)
}
