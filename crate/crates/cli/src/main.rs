mod args;
mod run;

use std::net::SocketAddr;
use std::path::Path;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser};
use serde::{Deserialize, Serialize};

use stratplan_core::agent::{AgentVoice, LlmVoice, TemplateVoice};
use stratplan_core::archive::{read_archive, write_archive};
use stratplan_core::catalog::{enumerate_personas, render_persona_description, Catalog, TaskKind, TemplateRenderer};
use stratplan_core::dialogue::{load_scenarios, Scenario};
use stratplan_core::eval::{evaluate, strategy_sequence_distances, EvalConfig, HistogramEncoder};
use stratplan_core::gateway::{LlmBackend, RemoteBackend, RemoteConfig};
use stratplan_core::planner::sft::{corpus_examples, load_corpus, save_corpus, train_sft, SftConfig};
use stratplan_core::planner::{FeatureLayout, SelectionMode};
use stratplan_core::reward::{JudgeOptions, TranscriptJudge};
use stratplan_core::simulator::{
    build_population_with, BackendChoice, Population, PopulationOptions, EVAL_INSTANCE_BASE,
};
use stratplan_core::synthetic::SyntheticEnvironment;
use stratplan_core::tom::TomMode;
use stratplan_core::trainer::{train, EpisodeContext, TrainConfig, TrainHooks};
use stratplan_core::Policy;
use stratplan_service::{AppState, Engine, ServiceConfig};

use args::{BackendArg, Cli, Command, Global, Switch};
use run::Run;

const DEFAULT_PORT: u16 = 8080;
const DEFAULT_POPULATION_SIZE: usize = 40;

enum Failure {
    /// Bad flag values; exit 2.
    Usage(String),
    /// Anything that went wrong while running; exit 1.
    Runtime(String),
}

type Result<T> = std::result::Result<T, Failure>;

fn rt<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct SftSection {
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    weight_decay: Option<f64>,
    validation_fraction: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct EvalSection {
    repeats: Option<usize>,
}

/// Config file layout: training keys at the top level plus optional tables.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct FileConfig {
    #[serde(flatten)]
    train: TrainConfig,
    #[serde(default)]
    sft: SftSection,
    #[serde(default)]
    eval: EvalSection,
}

fn load_config(g: &Global) -> Result<FileConfig> {
    let mut config = match &g.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            toml::from_str::<FileConfig>(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };
    let t = &mut config.train;
    if let Some(v) = g.seed {
        t.seed = v;
    }
    if let Some(v) = g.episodes {
        t.episodes = v;
    }
    if let Some(v) = g.lr {
        t.lr = v;
    }
    if let Some(v) = g.gamma {
        t.gamma = v;
    }
    if let Some(v) = g.tom {
        t.tom_enabled = v == Switch::On;
    }
    if let Some(v) = g.repeats {
        config.eval.repeats = Some(v);
    }
    config.train.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(config)
}

/// Agent voice, judge and inference backend for the chosen mode.
struct Backends {
    voice: Arc<dyn AgentVoice>,
    judge: Arc<dyn LlmBackend>,
    remote: Option<Arc<dyn LlmBackend>>,
}

impl Backends {
    fn new(kind: BackendArg) -> Result<Self> {
        match kind {
            BackendArg::Scripted => {
                Ok(Backends { voice: Arc::new(TemplateVoice), judge: Arc::new(TranscriptJudge::default()), remote: None })
            }
            BackendArg::Remote => {
                let config = RemoteConfig::from_env().map_err(rt)?;
                let backend: Arc<dyn LlmBackend> = Arc::new(RemoteBackend::new(config).map_err(rt)?);
                Ok(Backends { voice: Arc::new(LlmVoice { backend: backend.clone() }), judge: backend.clone(), remote: Some(backend) })
            }
        }
    }

    fn tom(&self, enabled: bool) -> TomMode<'_> {
        match (enabled, &self.remote) {
            (false, _) => TomMode::Off,
            (true, None) => TomMode::Scripted,
            (true, Some(b)) => TomMode::Backend(b.as_ref()),
        }
    }

    fn context(&self, task: TaskKind, config: &TrainConfig) -> EpisodeContext<'_> {
        let catalog = Catalog::bundled();
        EpisodeContext {
            catalog,
            layout: FeatureLayout::for_task(task, catalog),
            voice: self.voice.as_ref(),
            tom: self.tom(config.tom_enabled),
            judge: self.judge.as_ref(),
            judge_options: JudgeOptions::default(),
            reward: config.reward_config(),
            gamma: config.gamma,
            max_turns: config.max_turns,
            selection: SelectionMode::Greedy,
        }
    }
}

fn require_task(g: &Global, command: &str) -> TaskKind {
    match g.task {
        Some(t) => t.into(),
        None => Cli::command()
            .error(ErrorKind::MissingRequiredArgument, format!("--task is required for `{command}`"))
            .exit(),
    }
}

fn backend_kind(g: &Global) -> BackendArg {
    g.backend.unwrap_or_default()
}

fn scenarios_for(task: TaskKind, path: Option<&Path>) -> Result<Vec<Scenario>> {
    let Some(path) = path else {
        return Ok(vec![Scenario::reference(task)]);
    };
    let all = load_scenarios(path).map_err(Failure::Runtime)?;
    let mine: Vec<Scenario> = all.into_iter().filter(|s| s.task() == task).collect();
    if mine.is_empty() {
        return Err(Failure::Runtime(format!("{}: no scenarios for {task}", path.display())));
    }
    Ok(mine)
}

fn population_for(g: &Global, task: TaskKind, backends: &Backends, eval: bool) -> Result<(Population, Option<String>)> {
    if let Some(path) = &g.population {
        let population = Population::load(path, backends.remote.clone(), Catalog::bundled()).map_err(rt)?;
        if population.task() != task {
            return Err(Failure::Usage(format!("{} is a {} population", path.display(), population.task())));
        }
        return Ok((population, Some(path.display().to_string())));
    }
    let options = PopulationOptions {
        instance_base: if eval { EVAL_INSTANCE_BASE } else { 0 },
        backend: match &backends.remote {
            Some(b) => BackendChoice::LlmBacked(b.clone()),
            None => BackendChoice::Scripted,
        },
    };
    let population = build_population_with(
        task,
        DEFAULT_POPULATION_SIZE,
        &enumerate_personas(),
        &TemplateRenderer,
        &options,
        Catalog::bundled(),
    )
    .map_err(rt)?;
    Ok((population, None))
}

fn load_checkpoint(path: &Path, task: TaskKind) -> Result<Policy> {
    let layout = FeatureLayout::for_task(task, Catalog::bundled());
    Policy::load(path, Some(&layout)).map_err(rt)
}

/// Flag set by the first ctrl-c; long loops check it between steps.
fn interrupt_flag() -> &'static AtomicBool {
    static STOP: AtomicBool = AtomicBool::new(false);
    std::thread::spawn(|| {
        let Ok(runtime) = tokio::runtime::Builder::new_current_thread().enable_all().build() else {
            return;
        };
        runtime.block_on(async {
            if tokio::signal::ctrl_c().await.is_ok() {
                STOP.store(true, Ordering::SeqCst);
                log::warn!("interrupted; saving a checkpoint and exiting");
            }
        });
    });
    &STOP
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable")
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn cmd_sft(g: &Global, corpus: &Path, epochs: Option<usize>, batch_size: Option<usize>, run: &mut Option<Run>) -> Result<ExitCode> {
    let task = require_task(g, "sft");
    let file = load_config(g)?;
    let defaults = SftConfig::default();
    let config = SftConfig {
        epochs: epochs.or(file.sft.epochs).unwrap_or(defaults.epochs),
        batch_size: batch_size.or(file.sft.batch_size).unwrap_or(defaults.batch_size),
        lr: g.lr.or(file.sft.lr).unwrap_or(defaults.lr),
        weight_decay: file.sft.weight_decay.unwrap_or(defaults.weight_decay),
        validation_fraction: file.sft.validation_fraction.unwrap_or(defaults.validation_fraction),
        seed: file.train.seed,
    };
    if config.epochs == 0 || !(config.lr > 0.0) {
        return Err(Failure::Usage("epochs and lr must be positive".into()));
    }
    let backends = Backends::new(backend_kind(g))?;
    let catalog = Catalog::bundled();
    let settings = serde_json::json!({
        "task": task,
        "corpus": corpus.display().to_string(),
        "init": g.checkpoint.as_ref().map(|p| p.display().to_string()),
        "tom_enabled": file.train.tom_enabled,
        "sft": config,
    });
    let r = run.insert(Run::create(&g.runs_dir, "sft", settings, config.seed, catalog.hash()).map_err(Failure::Runtime)?);

    let records = load_corpus(corpus).map_err(rt)?;
    let layout = FeatureLayout::for_task(task, catalog);
    let examples = corpus_examples::<f64>(&records, &layout, catalog, &backends.tom(file.train.tom_enabled)).map_err(rt)?;
    if examples.is_empty() {
        return Err(Failure::Runtime(format!("{}: no {task} records", corpus.display())));
    }
    let init = match &g.checkpoint {
        Some(path) => load_checkpoint(path, task)?,
        None => Policy::zeros(&layout),
    };
    let report = train_sft(init, &examples, &config).map_err(rt)?;
    report.best.save(&r.path("checkpoint.json")).map_err(rt)?;
    r.record("checkpoint.json");
    report.last.save(&r.path("last.json")).map_err(rt)?;
    r.record("last.json");
    let summary = serde_json::json!({
        "examples": examples.len(),
        "best_epoch": report.best_epoch,
        "step_losses": report.step_losses,
        "epoch_train_loss": report.epoch_train_loss,
        "epoch_validation_loss": report.epoch_validation_loss,
    });
    r.write("sft_report.json", pretty(&summary)).map_err(Failure::Runtime)?;
    println!(
        "sft: {} examples, best epoch {}, final train loss {:.4}",
        examples.len(),
        report.best_epoch + 1,
        report.epoch_train_loss.last().copied().unwrap_or(f64::NAN)
    );
    println!("{}", r.dir.display());
    r.finish("ok").map_err(Failure::Runtime)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(g: &Global, scenarios: Option<&Path>, run: &mut Option<Run>) -> Result<ExitCode> {
    let task = require_task(g, "train");
    let file = load_config(g)?;
    let config = file.train.clone();
    let backends = Backends::new(backend_kind(g))?;
    let catalog = Catalog::bundled();
    let scenarios = scenarios_for(task, scenarios)?;
    let (population, population_path) = population_for(g, task, &backends, false)?;
    let init_from = g.checkpoint.as_ref().filter(|_| config.sft_init);
    let settings = serde_json::json!({
        "task": task,
        "backend": format!("{:?}", backend_kind(g)).to_lowercase(),
        "population": population_path,
        "population_size": population.len(),
        "init": init_from.map(|p| p.display().to_string()),
        "scenarios": scenarios.iter().map(|s| s.id.clone()).collect::<Vec<_>>(),
        "train": to_value(&config),
    });
    let r = run.insert(Run::create(&g.runs_dir, "train", settings, config.seed, catalog.hash()).map_err(Failure::Runtime)?);
    r.write("config.toml", toml::to_string(&config).map_err(rt)?).map_err(Failure::Runtime)?;
    if population_path.is_none() {
        population.save(&r.path("population.manifest")).map_err(rt)?;
        r.record("population.manifest");
    }

    let init = match init_from {
        Some(path) => load_checkpoint(path, task)?,
        None => Policy::zeros(&FeatureLayout::for_task(task, catalog)),
    };
    let ctx = backends.context(task, &config);
    let stop = interrupt_flag();
    std::fs::create_dir_all(r.path("checkpoints")).map_err(rt)?;
    let mut saved = Vec::new();
    let mut save_error = None;
    let mut on_checkpoint = |episode: usize, params: &Policy| {
        let name = format!("checkpoints/episode-{episode:06}.json");
        match params.save(&r.dir.join(&name)) {
            Ok(()) => saved.push(name),
            Err(e) => save_error = Some(e.to_string()),
        }
    };
    let hooks = TrainHooks { on_checkpoint: Some(&mut on_checkpoint), stop: Some(stop) };
    let report = train(init, &population, &scenarios, &ctx, &config, hooks).map_err(rt)?;
    for name in saved {
        r.record(&name);
    }
    if let Some(e) = save_error {
        return Err(Failure::Runtime(format!("saving checkpoint: {e}")));
    }
    report.params.save(&r.path("final.json")).map_err(rt)?;
    r.record("final.json");
    r.write("curve.json", pretty(&report.curve)).map_err(Failure::Runtime)?;
    write_archive(&r.path("episodes.jsonl"), &report.records).map_err(rt)?;
    r.record("episodes.jsonl");
    let summary = serde_json::json!({
        "episodes": report.records.len(),
        "invalid_episodes": report.invalid_episodes,
        "skipped_updates": report.skipped_updates,
        "interrupted": report.interrupted,
    });
    r.write("report.json", pretty(&summary)).map_err(Failure::Runtime)?;
    if let Some(last) = report.curve.last() {
        println!("train: {} episodes, last window SR {:.3}, AT {:.2}", report.records.len(), last.success_rate, last.average_turns);
    }
    println!("{}", r.dir.display());
    if report.interrupted {
        r.finish("interrupted").map_err(Failure::Runtime)?;
        return Ok(ExitCode::from(130));
    }
    r.finish("ok").map_err(Failure::Runtime)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(g: &Global, scenarios: Option<&Path>, uniform: bool, run: &mut Option<Run>) -> Result<ExitCode> {
    let task = require_task(g, "eval");
    let file = load_config(g)?;
    let catalog = Catalog::bundled();
    let checkpoint = match (&g.checkpoint, uniform) {
        (Some(_), true) => return Err(Failure::Usage("--uniform and --checkpoint are exclusive".into())),
        (None, false) => return Err(Failure::Usage("eval needs --checkpoint or --uniform".into())),
        (c, _) => c.clone(),
    };
    let repeats = file.eval.repeats.unwrap_or(1);
    if repeats == 0 {
        return Err(Failure::Usage("repeats must be positive".into()));
    }
    let backends = Backends::new(backend_kind(g))?;
    let scenarios = scenarios_for(task, scenarios)?;
    let (population, population_path) = population_for(g, task, &backends, true)?;
    let eval_config = EvalConfig {
        seed: file.train.seed,
        repeats,
        selection: if uniform { SelectionMode::Sample } else { SelectionMode::Greedy },
    };
    let settings = serde_json::json!({
        "task": task,
        "backend": format!("{:?}", backend_kind(g)).to_lowercase(),
        "checkpoint": checkpoint.as_ref().map(|p| p.display().to_string()),
        "uniform": uniform,
        "population": population_path,
        "population_size": population.len(),
        "scenarios": scenarios.iter().map(|s| s.id.clone()).collect::<Vec<_>>(),
        "tom_enabled": file.train.tom_enabled,
        "max_turns": file.train.max_turns,
        "eval": eval_config,
    });
    let r = run.insert(Run::create(&g.runs_dir, "eval", settings, eval_config.seed, catalog.hash()).map_err(Failure::Runtime)?);
    let params = match &checkpoint {
        Some(path) => load_checkpoint(path, task)?,
        None => Policy::zeros(&FeatureLayout::for_task(task, catalog)),
    };
    let ctx = backends.context(task, &file.train);
    let out = evaluate(&params, &population, &scenarios, &ctx, &eval_config).map_err(rt)?;
    r.write("metrics.json", pretty(&out.report)).map_err(Failure::Runtime)?;
    r.write("per_persona.txt", out.report.persona_table()).map_err(Failure::Runtime)?;
    let mut csv = String::from("persona,metric,value\n");
    for (persona, metric, value) in out.report.plot_triples() {
        csv.push_str(&format!("{persona},{metric},{value}\n"));
    }
    r.write("plot.csv", csv).map_err(Failure::Runtime)?;
    write_archive(&r.path("episodes.jsonl"), &out.records).map_err(rt)?;
    r.record("episodes.jsonl");
    println!("{}", out.report.summary());
    println!("{}", r.dir.display());
    r.finish("ok").map_err(Failure::Runtime)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_analyze(g: &Global, archive: &Path, run: &mut Option<Run>) -> Result<ExitCode> {
    let catalog = Catalog::bundled();
    let records = read_archive::<f64>(archive).map_err(rt)?;
    let task = match (g.task, records.first()) {
        (Some(t), _) => t.into(),
        (None, Some(r)) => r.task,
        (None, None) => return Err(Failure::Runtime(format!("{}: archive is empty", archive.display()))),
    };
    let records: Vec<_> = records.into_iter().filter(|r| r.task == task).collect();
    let encoder = HistogramEncoder::new(task, catalog);
    let settings = serde_json::json!({ "task": task, "archive": archive.display().to_string() });
    let r = run.insert(Run::create(&g.runs_dir, "analyze", settings, 0, catalog.hash()).map_err(Failure::Runtime)?);
    let report = strategy_sequence_distances(&records, &encoder).map_err(rt)?;
    r.write("distances.json", pretty(&report)).map_err(Failure::Runtime)?;
    println!(
        "intra-persona {:.4}, inter-persona {:.4} over {} sequences",
        report.intra_persona, report.inter_persona, report.sequence_count
    );
    println!("{}", r.dir.display());
    r.finish("ok").map_err(Failure::Runtime)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_serve(
    g: &Global,
    checkpoint_dir: Option<&Path>,
    max_sessions: usize,
    idle_minutes: u64,
    run: &mut Option<Run>,
) -> Result<ExitCode> {
    let file = load_config(g)?;
    if max_sessions == 0 || idle_minutes == 0 {
        return Err(Failure::Usage("max-sessions and idle-minutes must be positive".into()));
    }
    let engine = match backend_kind(g) {
        BackendArg::Scripted => Engine::scripted(),
        BackendArg::Remote => {
            let config = RemoteConfig::from_env().map_err(rt)?;
            Engine::remote(Arc::new(RemoteBackend::new(config).map_err(rt)?))
        }
    };
    let port = g.serve_port.unwrap_or(DEFAULT_PORT);
    let catalog = Catalog::bundled();
    let settings = serde_json::json!({
        "port": port,
        "checkpoint": g.checkpoint.as_ref().map(|p| p.display().to_string()),
        "checkpoint_dir": checkpoint_dir.map(|p| p.display().to_string()),
        "max_sessions": max_sessions,
        "idle_minutes": idle_minutes,
        "tom_enabled": file.train.tom_enabled,
    });
    let r = run.insert(Run::create(&g.runs_dir, "serve", settings, file.train.seed, catalog.hash()).map_err(Failure::Runtime)?);
    let config = ServiceConfig {
        checkpoint_dir: checkpoint_dir.map(Path::to_path_buf),
        archive: Some(r.path("sessions.jsonl")),
        max_sessions,
        idle_timeout: Duration::from_secs(idle_minutes * 60),
        max_turns: file.train.max_turns,
        tom_enabled: file.train.tom_enabled,
        gamma: file.train.gamma,
        seed: file.train.seed,
        scenarios: Vec::new(),
    };
    let state = AppState::new(config, engine);
    if let Some(path) = &g.checkpoint {
        let params = Policy::load(path, None).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("default").to_string();
        log::info!("serving checkpoint {id:?} for {}", params.task);
        state.register_checkpoint(id, params);
    }
    r.record("sessions.jsonl");
    r.write_manifest().map_err(Failure::Runtime)?;
    let addr = SocketAddr::from(([127, 0, 0, 1], port));
    let runtime = tokio::runtime::Runtime::new().map_err(rt)?;
    println!("serving on http://{addr}");
    runtime.block_on(stratplan_service::serve(addr, state)).map_err(rt)?;
    r.finish("ok").map_err(Failure::Runtime)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_personas() -> Result<ExitCode> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    for (i, p) in enumerate_personas().into_iter().enumerate() {
        // a closed pipe (e.g. `| head`) is not an error
        if writeln!(out, "{i:2}  {p:<32} {}", render_persona_description(p).description).is_err() {
            break;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_population(g: &Global, size: usize, eval: bool, out: &Path) -> Result<ExitCode> {
    let task = require_task(g, "population");
    let backends = Backends::new(backend_kind(g))?;
    let options = PopulationOptions {
        instance_base: if eval { EVAL_INSTANCE_BASE } else { 0 },
        backend: match &backends.remote {
            Some(b) => BackendChoice::LlmBacked(b.clone()),
            None => BackendChoice::Scripted,
        },
    };
    let population =
        build_population_with(task, size, &enumerate_personas(), &TemplateRenderer, &options, Catalog::bundled())
            .map_err(|e| Failure::Usage(e.to_string()))?;
    population.save(out).map_err(rt)?;
    println!("{} {task} simulators written to {}", population.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_corpus(g: &Global, size: usize, out: &Path) -> Result<ExitCode> {
    let task = require_task(g, "corpus");
    if size == 0 {
        return Err(Failure::Usage("size must be positive".into()));
    }
    let records = SyntheticEnvironment::new(task).expert_corpus(size, g.seed.unwrap_or(0));
    save_corpus(out, &records).map_err(rt)?;
    println!("{} {task} records written to {}", records.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let g = &cli.global;
    let mut run = None;
    let result = match &cli.command {
        Command::Sft { corpus, epochs, batch_size } => cmd_sft(g, corpus, *epochs, *batch_size, &mut run),
        Command::Train { scenarios } => cmd_train(g, scenarios.as_deref(), &mut run),
        Command::Eval { scenarios, uniform } => cmd_eval(g, scenarios.as_deref(), *uniform, &mut run),
        Command::Analyze { archive } => cmd_analyze(g, archive, &mut run),
        Command::Serve { checkpoint_dir, max_sessions, idle_minutes } => {
            cmd_serve(g, checkpoint_dir.as_deref(), *max_sessions, *idle_minutes, &mut run)
        }
        Command::Personas => cmd_personas(),
        Command::Population { size, eval, out } => cmd_population(g, *size, *eval, out),
        Command::Corpus { size, out } => cmd_corpus(g, *size, out),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Usage(message)) => {
            Cli::command().error(ErrorKind::ValueValidation, message).exit();
        }
        Err(Failure::Runtime(message)) => {
            if let Some(r) = run.as_mut() {
                let _ = r.finish("failed");
            }
            let line = serde_json::json!({
                "level": "error",
                "command": cli.command.name(),
                "run_dir": run.as_ref().map(|r| r.dir.display().to_string()),
                "message": message,
            });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
