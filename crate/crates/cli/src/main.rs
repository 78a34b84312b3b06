use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use restore_core::agent::{policy_by_name, run_episode, EpisodeConfig, Mode, DEFAULT_BUDGET};
use restore_core::bench::{emit_report, run_comparison, write_records, BenchConfig, ReportFormat};
use restore_core::degrade::{sample_recipe, Profile};
use restore_core::forge::{format_response, generate_pairs, parse_mix, parse_response, ForgeConfig};
use restore_core::image::load_png_dir;
use restore_core::scene::synthetic_scene;
use restore_core::space::{enumerate_decisions, execute_decision, search_space, write_table_jsonl};
use restore_core::{
    apply_recipe, load_image, save_image, Error, Execution, ImageBuffer, Result, ScoreConfig, TaskId, ToolRegistry,
};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "restore", version, about = "Search, score and run image restoration pipelines")]
struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// Worker threads for parallel work (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Tool catalog JSON replacing the built-in one.
    #[arg(long, global = true, env = "RESTORE_CATALOG", value_name = "PATH")]
    catalog: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize degradations onto a clean image.
    Degrade(DegradeArgs),
    /// Run a literal pipeline, written in the response grammar.
    Restore(RestoreArgs),
    /// Count (and optionally list) the decisions for a task set.
    Enumerate(EnumerateArgs),
    /// Exhaustively score every decision against a reference.
    Oracle(OracleArgs),
    /// Run one agent episode.
    Agent(AgentArgs),
    /// Generate training pairs.
    Datagen(DatagenArgs),
    /// Compare decision strategies on a synthetic benchmark.
    Bench(BenchArgs),
}

#[derive(Args)]
struct DegradeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated task or degradation names.
    #[arg(long)]
    tasks: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "mixed")]
    profile: Profile,
    #[arg(long)]
    recipe_out: Option<PathBuf>,
}

#[derive(Args)]
struct RestoreArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// e.g. "1.denoise denoise_medium. 2.dejpeg dejpeg_mild." or "Stop".
    #[arg(long)]
    pipeline: String,
}

#[derive(Args)]
struct EnumerateArgs {
    #[arg(long)]
    tasks: String,
    /// Include pipelines covering a strict subset of the tasks (default).
    #[arg(long, conflicts_with = "full")]
    partial: bool,
    /// Only pipelines covering every task.
    #[arg(long)]
    full: bool,
    /// Print every decision after the count.
    #[arg(long)]
    list: bool,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    tasks: String,
    #[arg(long)]
    full: bool,
    #[arg(long, default_value = "psnr,ssim")]
    metrics: String,
    /// Write every candidate's scores and rank as JSONL.
    #[arg(long)]
    table_out: Option<PathBuf>,
    /// Save the best candidate's image.
    #[arg(long)]
    best_out: Option<PathBuf>,
}

#[derive(Args)]
struct AgentArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// random, fixed, greedy, oracle or external:<command>.
    #[arg(long)]
    policy: String,
    #[arg(long, default_value = "single-shot")]
    mode: Mode,
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    budget: usize,
    /// Tasks the image is known to need (default: every catalog task).
    #[arg(long)]
    tasks: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "psnr,ssim")]
    metrics: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DatagenArgs {
    /// Directory of clean PNGs; synthetic scenes when omitted.
    #[arg(long)]
    clean_dir: Option<PathBuf>,
    /// JSONL output; assets go next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    /// Scenario shares S1..S5, e.g. 60,15,10,10,5.
    #[arg(long, default_value = "60,15,10,10,5")]
    mix: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "mixed")]
    profile: Profile,
    #[arg(long, default_value_t = 128)]
    crop: usize,
    #[arg(long, default_value_t = 0.5)]
    delta: f64,
    #[arg(long, default_value_t = 0.05)]
    epsilon: f64,
    #[arg(long, default_value = "psnr,ssim")]
    metrics: String,
}

#[derive(Args)]
struct BenchArgs {
    /// JSON or TOML bench config; the built-in 120-image set when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report path; `.csv` selects csv, anything else markdown.
    #[arg(long)]
    report_out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let json = cli.json;
    match run(cli) {
        Ok(out) => {
            if json {
                println!("{}", out.json);
            } else if !out.text.is_empty() {
                println!("{}", out.text.trim_end());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::from(1)
        }
    }
}

struct Output {
    text: String,
    json: Value,
}

fn run(cli: Cli) -> Result<Output> {
    if let Some(n) = cli.jobs {
        set_jobs(n)?;
    }
    let reg = registry(cli.catalog.as_deref())?;
    match cli.command {
        Command::Degrade(a) => degrade(a),
        Command::Restore(a) => restore(a, &reg),
        Command::Enumerate(a) => enumerate(a, &reg),
        Command::Oracle(a) => oracle(a, &reg),
        Command::Agent(a) => agent(a, &reg),
        Command::Datagen(a) => datagen(a, &reg),
        Command::Bench(a) => bench(a, &reg),
    }
}

fn set_jobs(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::Config(e.to_string()))?;
    Ok(())
}

fn registry(catalog: Option<&Path>) -> Result<ToolRegistry> {
    let reg = match catalog {
        Some(p) => ToolRegistry::load_catalog(p)?,
        None => ToolRegistry::default_catalog(false),
    };
    Ok(reg.frozen())
}

fn tasks_of(s: &str) -> Result<BTreeSet<TaskId>> {
    let tasks: BTreeSet<TaskId> = s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(TaskId::from_any_name).collect::<Result<_>>()?;
    if tasks.is_empty() {
        return Err(Error::Config("empty task list".into()));
    }
    Ok(tasks)
}

fn score_of(metrics: &str) -> Result<ScoreConfig> {
    let names: Vec<&str> = metrics.split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
    ScoreConfig::from_names(&names)
}

fn degrade(a: DegradeArgs) -> Result<Output> {
    let img = load_image(&a.input)?;
    let source = a.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let recipe = sample_recipe(&tasks_of(&a.tasks)?, a.seed, a.profile)?.with_source(source);
    let out = apply_recipe(&img, &recipe)?;
    save_image(&out, &a.out)?;
    let recipe_json = recipe.to_json()?;
    if let Some(p) = &a.recipe_out {
        std::fs::write(p, &recipe_json)?;
    }
    let order: Vec<&str> = recipe.steps().iter().map(|s| s.task().degradation()).collect();
    Ok(Output {
        text: format!("{} <- {}", a.out.display(), order.join("+")),
        json: json!({"out": a.out, "recipe": serde_json::from_str::<Value>(&recipe_json)?}),
    })
}

fn restore(a: RestoreArgs, reg: &ToolRegistry) -> Result<Output> {
    let img = load_image(&a.input)?;
    let out = match parse_response(&a.pipeline)? {
        restore_core::agent::AgentAction::Pipeline(d) => {
            d.validate(reg)?;
            execute_decision(&img, &d, reg)?
        }
        restore_core::agent::AgentAction::Stop => img,
        other => return Err(Error::PolicyProtocol(format!("not a pipeline: {other:?}"))),
    };
    save_image(&out, &a.out)?;
    Ok(Output { text: a.out.display().to_string(), json: json!({"out": a.out, "pipeline": a.pipeline.trim()}) })
}

fn enumerate(a: EnumerateArgs, reg: &ToolRegistry) -> Result<Output> {
    let tasks = tasks_of(&a.tasks)?;
    let space = enumerate_decisions(reg, &tasks, !a.full)?;
    let list: Vec<String> = space.candidates().iter().map(|d| d.to_string()).collect();
    let mut text = space.len().to_string();
    if a.list {
        for l in &list {
            text.push('\n');
            text.push_str(l);
        }
    }
    let mut j = json!({"count": space.len(), "partial": !a.full});
    if a.list {
        j["decisions"] = json!(list);
    }
    Ok(Output { text, json: j })
}

fn oracle(a: OracleArgs, reg: &ToolRegistry) -> Result<Output> {
    let img = load_image(&a.input)?;
    let reference = load_image(&a.reference)?;
    let tasks = tasks_of(&a.tasks)?;
    let score = score_of(&a.metrics)?;
    let space = enumerate_decisions(reg, &tasks, !a.full)?;
    let result = search_space(&img, &reference, &space, reg, &score, Execution::default())?;
    if let Some(p) = &a.table_out {
        write_table_jsonl(&result.table, p, None)?;
    }
    let best = result.best();
    if let Some(p) = &a.best_out {
        save_image(best.restored.as_ref().expect("best candidate succeeded"), p)?;
    }
    let pipeline = best.decision.to_string();
    let metrics = best.report.as_ref().map(|r| r.values.clone()).unwrap_or_default();
    let failed = result.table.iter().filter(|c| c.failed()).count();
    Ok(Output {
        text: format!(
            "{pipeline}\nrank 1/{} balanced {:.4} {}",
            result.space_size(),
            best.balanced().unwrap_or(0.0),
            metrics.iter().map(|(k, v)| format!("{k} {v:.4}")).collect::<Vec<_>>().join(" ")
        ),
        json: json!({
            "pipeline": pipeline,
            "space_size": result.space_size(),
            "balanced": best.balanced(),
            "metrics": metrics,
            "failed": failed,
        }),
    })
}

fn agent(a: AgentArgs, reg: &ToolRegistry) -> Result<Output> {
    let img = load_image(&a.input)?;
    let reference = a.reference.as_ref().map(load_image).transpose()?;
    let tasks = match &a.tasks {
        Some(s) => tasks_of(s)?,
        None => reg.tasks(),
    };
    let score = score_of(&a.metrics)?;
    let mut policy = policy_by_name(&a.policy, a.seed, &score)?;
    let mut cfg = EpisodeConfig::new(reg, tasks, a.mode).with_budget(a.budget);
    cfg.score = score;
    if let Some(r) = &reference {
        cfg = cfg.with_reference(r);
    }
    let t = run_episode(policy.as_mut(), &img, &cfg)?;
    if let Some(p) = &a.out {
        save_image(&t.final_image, p)?;
    }
    let decision = match t.decision() {
        Some(d) => d.to_string(),
        None => "Stop".to_string(),
    };
    let actions: Vec<String> =
        t.actions.iter().map(|e| format_response(&e.action).unwrap_or_else(|_| format!("{:?}", e.action))).collect();
    let final_scores = t.actions.last().and_then(|e| e.report.as_ref()).map(|r| r.values.clone());
    Ok(Output {
        text: format!("{decision}\n{} actions, {:?}", t.actions.len(), t.terminal),
        json: json!({
            "decision": decision,
            "terminal": t.terminal,
            "actions": actions,
            "history": t.history,
            "failures": t.failures,
            "scores": final_scores,
        }),
    })
}

fn datagen(a: DatagenArgs, reg: &ToolRegistry) -> Result<Output> {
    let out_dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
    let mut cfg = ForgeConfig::new(out_dir, a.count);
    cfg.jsonl = Some(a.out.clone());
    cfg.mix = parse_mix(&a.mix)?;
    cfg.seed = a.seed;
    cfg.profile = a.profile;
    cfg.crop = a.crop;
    cfg.delta = a.delta;
    cfg.epsilon = a.epsilon;
    cfg.score = score_of(&a.metrics)?;
    let clean: Vec<(String, ImageBuffer)> = match &a.clean_dir {
        Some(d) => load_png_dir(d)?,
        None => (0..a.count.clamp(1, 64))
            .map(|i| (format!("scene{i:03}"), synthetic_scene(a.crop, a.crop, a.seed.wrapping_add(i as u64))))
            .collect(),
    };
    let pairs = generate_pairs(&clean, reg, &cfg)?;
    let mut counts = [0usize; 5];
    for p in &pairs {
        counts[p.scenario as usize - 1] += 1;
    }
    Ok(Output {
        text: format!("{} pairs -> {} (S1..S5 {:?})", pairs.len(), a.out.display(), counts),
        json: json!({"pairs": pairs.len(), "out": a.out, "scenarios": counts}),
    })
}

fn bench(a: BenchArgs, reg: &ToolRegistry) -> Result<Output> {
    let cfg = match &a.config {
        Some(p) => BenchConfig::load(p)?,
        None => BenchConfig::default(),
    };
    let outcome = run_comparison(&cfg, reg, Execution::default())?;
    let mut targets: Vec<(PathBuf, ReportFormat)> = Vec::new();
    if let Some(p) = &a.report_out {
        targets.push((p.clone(), format_for(p)));
    }
    if let Some(p) = &cfg.output.markdown {
        targets.push((p.clone(), ReportFormat::Markdown));
    }
    if let Some(p) = &cfg.output.csv {
        targets.push((p.clone(), ReportFormat::Csv));
    }
    for (p, f) in &targets {
        emit_report(&outcome.rows, *f, p)?;
    }
    if let Some(p) = &cfg.output.records {
        write_records(&outcome.records, p)?;
    }
    let rows: Vec<Value> = outcome
        .rows
        .iter()
        .map(|r| {
            json!({
                "dataset": r.group, "strategy": r.strategy, "metrics": r.metrics.iter().map(|(k, v)| (k.clone(), json!(v))).collect::<serde_json::Map<_, _>>(),
                "balanced": r.balanced, "mean_rank": r.mean_rank, "rank_pct": r.rank_pct, "n": r.n, "images": r.images,
            })
        })
        .collect();
    Ok(Output {
        text: restore_core::bench::render_report(&outcome.rows, ReportFormat::Markdown)?,
        json: json!({"rows": rows, "failures": outcome.failures}),
    })
}

fn format_for(p: &Path) -> ReportFormat {
    if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        ReportFormat::Csv
    } else {
        ReportFormat::Markdown
    }
}
