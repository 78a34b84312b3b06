//! Strategy comparison: every strategy's decision for an image is ranked
//! against that image's exhaustive decision table.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::{policy_by_name, AgentAction, Mode, PolicyContext, SessionState, DEFAULT_BUDGET};
use crate::degrade::{apply_recipe, mix_seed, sample_recipe, Profile, TaskId};
use crate::error::{Error, Result};
use crate::image::{load_png_dir, ImageBuffer};
use crate::par::{self, Execution};
use crate::quality::ScoreConfig;
use crate::scene::synthetic_scene;
use crate::space::{enumerate_decisions, rank_of, search_space, OracleResult, PipelineDecision};
use crate::toolbox::ToolRegistry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Combo {
    /// Task or degradation names, e.g. `["noise", "jpeg"]`.
    pub tasks: Vec<String>,
    pub count: usize,
}

impl Combo {
    pub fn task_set(&self) -> Result<BTreeSet<TaskId>> {
        self.tasks.iter().map(|t| TaskId::from_any_name(t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default)]
    pub profile: Profile,
    /// Directory of clean PNGs; synthetic scenes when absent.
    #[serde(default)]
    pub clean_dir: Option<PathBuf>,
    pub combos: Vec<Combo>,
}

fn default_size() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub markdown: Option<PathBuf>,
    #[serde(default)]
    pub csv: Option<PathBuf>,
    /// Per-image, per-strategy records as JSONL.
    #[serde(default)]
    pub records: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub dataset: DatasetSpec,
    pub strategies: Vec<String>,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<String>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output: OutputSpec,
}

fn default_metrics() -> Vec<String> {
    vec!["psnr".into(), "ssim".into()]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl Default for BenchConfig {
    /// The desk-scale dataset: 120 images of 128x128 over seven combos.
    fn default() -> Self {
        let combo = |tasks: &[&str], count| Combo { tasks: tasks.iter().map(|s| s.to_string()).collect(), count };
        BenchConfig {
            dataset: DatasetSpec {
                size: 128,
                profile: Profile::Mixed,
                clean_dir: None,
                combos: vec![
                    combo(&["noise", "jpeg"], 30),
                    combo(&["lowlight", "noise"], 20),
                    combo(&["blur", "noise", "jpeg"], 20),
                    combo(&["rain", "noise", "jpeg"], 15),
                    combo(&["haze", "noise", "jpeg"], 15),
                    combo(&["haze", "rain", "noise", "jpeg"], 10),
                    combo(&["blur", "rain", "noise", "jpeg"], 10),
                ],
            },
            strategies: vec!["oracle".into(), "greedy".into(), "fixed".into(), "random".into()],
            metrics: default_metrics(),
            seeds: default_seeds(),
            output: OutputSpec::default(),
        }
    }
}

impl BenchConfig {
    /// Reads JSON, or TOML when the file ends in `.toml`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::FileMissing(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let cfg: BenchConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        };
        Ok(cfg)
    }

    pub fn validate(&self, reg: &ToolRegistry) -> Result<()> {
        if self.dataset.combos.is_empty() || self.strategies.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("dataset combos, strategies and seeds must be non-empty".into()));
        }
        for c in &self.dataset.combos {
            if c.count == 0 {
                return Err(Error::Config(format!("combo {:?} has count 0", c.tasks)));
            }
            reg.pools(&c.task_set()?)?;
        }
        for s in &self.strategies {
            if !matches!(s.as_str(), "oracle" | "greedy" | "fixed" | "random") && !s.starts_with("external:") {
                return Err(Error::Config(format!("unknown strategy {s:?}")));
            }
        }
        ScoreConfig::from_names(&self.metrics)?;
        Ok(())
    }
}

/// Label such as `haze+rain+noise+jpeg`, in synthesis order.
pub fn combo_label(tasks: &BTreeSet<TaskId>) -> String {
    let mut v: Vec<TaskId> = tasks.iter().copied().collect();
    v.sort_by_key(|t| t.synthesis_rank());
    v.iter().map(|t| t.degradation()).collect::<Vec<_>>().join("+")
}

/// One strategy's outcome on one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub seed: u64,
    pub combo: String,
    pub index: usize,
    pub strategy: String,
    pub decision: String,
    pub rank: usize,
    pub n: usize,
    pub metrics: BTreeMap<String, f64>,
    pub balanced: f64,
}

impl ImageRecord {
    pub fn rank_pct(&self) -> f64 {
        100.0 * self.rank as f64 / self.n as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    /// Combo label, or `average` for the across-dataset group.
    pub group: String,
    pub strategy: String,
    /// Per-metric means in config order.
    pub metrics: Vec<(String, f64)>,
    pub balanced: f64,
    pub mean_rank: f64,
    pub rank_pct: f64,
    /// Decision-space size; `None` for the average group.
    pub n: Option<usize>,
    pub images: usize,
}

#[derive(Debug, Clone)]
pub struct BenchOutcome {
    pub rows: Vec<ReportRow>,
    pub records: Vec<ImageRecord>,
    /// Images excluded after a failure, with the reason.
    pub failures: Vec<String>,
}

struct Job {
    seed: u64,
    combo: usize,
    index: usize,
    global: u64,
}

fn clean_pool(cfg: &BenchConfig) -> Result<Vec<ImageBuffer>> {
    let Some(dir) = &cfg.dataset.clean_dir else { return Ok(Vec::new()) };
    let pool: Vec<ImageBuffer> = load_png_dir(dir)?.into_iter().map(|(_, img)| img).collect();
    if pool.is_empty() {
        return Err(Error::Config(format!("no PNG files in {}", dir.display())));
    }
    Ok(pool)
}

fn clean_image(cfg: &BenchConfig, pool: &[ImageBuffer], seed: u64) -> Result<ImageBuffer> {
    let size = cfg.dataset.size;
    if pool.is_empty() {
        return Ok(synthetic_scene(size, size, seed).quantized());
    }
    let src = &pool[(seed % pool.len() as u64) as usize];
    let side = size.min(src.width()).min(src.height());
    let x = (mix_seed(seed, 1) % (src.width() - side + 1) as u64) as usize;
    let y = (mix_seed(seed, 2) % (src.height() - side + 1) as u64) as usize;
    Ok(src.crop(x, y, side, side)?.quantized())
}

/// Decision of a named strategy for one image, in single-shot mode.
pub fn strategy_decision(
    name: &str,
    degraded: &ImageBuffer,
    reference: &ImageBuffer,
    tasks: &BTreeSet<TaskId>,
    reg: &ToolRegistry,
    score: &ScoreConfig,
    table: &OracleResult,
    seed: u64,
) -> Result<AgentAction> {
    if name == "oracle" {
        return Ok(AgentAction::Pipeline(table.best().decision.clone()));
    }
    let mut policy = policy_by_name(name, seed, score)?;
    let state = SessionState::new(degraded.clone(), DEFAULT_BUDGET);
    policy.decide(&PolicyContext { state: &state, tasks, registry: reg, reference: Some(reference), mode: Mode::SingleShot })
}

/// Rank and balanced score of an action within `table`. A Stop is scored
/// as the untouched image on the table's scale.
fn place(
    action: &AgentAction,
    table: &OracleResult,
    degraded: &ImageBuffer,
    reference: &ImageBuffer,
    score: &ScoreConfig,
) -> Result<(String, usize, f64, BTreeMap<String, f64>)> {
    match action {
        AgentAction::Pipeline(d) => {
            let c = table.find(d).ok_or_else(|| Error::DecisionNotInSpace(d.to_string()))?;
            let report = c.report.as_ref().ok_or_else(|| Error::DecisionNotInSpace(format!("{d} failed")))?;
            Ok((d.to_string(), rank_of(d, &table.table)?, c.balanced().expect("ranked"), report.values.clone()))
        }
        AgentAction::Stop => {
            let report = score.report(degraded, reference)?;
            let s = table.score(&report)?;
            let better = table.succeeded().filter(|c| c.balanced().expect("ranked") > s).count();
            Ok(("Stop".into(), (1 + better).min(table.space_size()), s, report.values))
        }
        other => Err(Error::PolicyProtocol(format!("{other:?} is not a single-shot decision"))),
    }
}

fn run_job(
    job: &Job,
    cfg: &BenchConfig,
    pool: &[ImageBuffer],
    reg: &ToolRegistry,
    score: &ScoreConfig,
    exec: Execution,
) -> Result<Vec<ImageRecord>> {
    let combo = &cfg.dataset.combos[job.combo];
    let tasks = combo.task_set()?;
    let image_seed = mix_seed(job.seed, job.global);
    let reference = clean_image(cfg, pool, image_seed)?;
    let recipe = sample_recipe(&tasks, mix_seed(image_seed, 7), cfg.dataset.profile)?;
    let degraded = apply_recipe(&reference, &recipe)?.quantized();
    let space = enumerate_decisions(reg, &tasks, true)?;
    let table = search_space(&degraded, &reference, &space, reg, score, exec)?;
    let label = combo_label(&tasks);
    cfg.strategies
        .iter()
        .map(|name| {
            let action =
                strategy_decision(name, &degraded, &reference, &tasks, reg, score, &table, mix_seed(image_seed, 11))?;
            let (decision, rank, balanced, metrics) = place(&action, &table, &degraded, &reference, score)?;
            Ok(ImageRecord {
                seed: job.seed,
                combo: label.clone(),
                index: job.index,
                strategy: name.clone(),
                decision,
                rank,
                n: table.space_size(),
                metrics,
                balanced,
            })
        })
        .collect()
}

/// Runs every strategy on every image of every seed.
pub fn run_comparison(cfg: &BenchConfig, reg: &ToolRegistry, exec: Execution) -> Result<BenchOutcome> {
    if !reg.is_frozen() {
        return Err(Error::UnfrozenRegistry);
    }
    cfg.validate(reg)?;
    let score = ScoreConfig::from_names(&cfg.metrics)?;
    let pool = clean_pool(cfg)?;
    let mut jobs = Vec::new();
    let mut global = 0u64;
    for &seed in &cfg.seeds {
        for (ci, c) in cfg.dataset.combos.iter().enumerate() {
            for index in 0..c.count {
                jobs.push(Job { seed, combo: ci, index, global });
                global += 1;
            }
        }
    }
    let results = par::map(exec, &jobs, |j| run_job(j, cfg, &pool, reg, &score, exec));
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (job, r) in jobs.iter().zip(results) {
        match r {
            Ok(mut recs) => records.append(&mut recs),
            Err(e) => {
                let msg = format!("seed {} combo {} image {}: {e}", job.seed, job.combo, job.index);
                log::warn!("{msg}");
                failures.push(msg);
            }
        }
    }
    if records.is_empty() {
        return Err(Error::Config(format!("every bench image failed: {failures:?}")));
    }
    let rows = aggregate(cfg, &records)?;
    Ok(BenchOutcome { rows, records, failures })
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Per-combo rows for every strategy, then the `average` group, which
/// averages the per-combo values.
pub fn aggregate(cfg: &BenchConfig, records: &[ImageRecord]) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for c in &cfg.dataset.combos {
        let l = combo_label(&c.task_set()?);
        if !labels.contains(&l) {
            labels.push(l);
        }
    }
    for label in &labels {
        for strategy in &cfg.strategies {
            let rs: Vec<&ImageRecord> =
                records.iter().filter(|r| &r.combo == label && &r.strategy == strategy).collect();
            if rs.is_empty() {
                continue;
            }
            let n = rs[0].n;
            let metrics = cfg
                .metrics
                .iter()
                .map(|m| (m.clone(), mean(rs.iter().map(|r| r.metrics.get(m).copied().unwrap_or(f64::NAN)))))
                .collect();
            let mean_rank = mean(rs.iter().map(|r| r.rank as f64));
            rows.push(ReportRow {
                group: label.clone(),
                strategy: strategy.clone(),
                metrics,
                balanced: mean(rs.iter().map(|r| r.balanced)),
                mean_rank,
                rank_pct: 100.0 * mean_rank / n as f64,
                n: Some(n),
                images: rs.len(),
            });
        }
    }
    for strategy in &cfg.strategies {
        let rs: Vec<&ReportRow> = rows.iter().filter(|r| &r.strategy == strategy && r.n.is_some()).collect();
        if rs.is_empty() {
            continue;
        }
        let metrics = cfg
            .metrics
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), mean(rs.iter().map(|r| r.metrics[i].1))))
            .collect();
        rows.push(ReportRow {
            group: "average".into(),
            strategy: strategy.clone(),
            metrics,
            balanced: mean(rs.iter().map(|r| r.balanced)),
            mean_rank: mean(rs.iter().map(|r| r.mean_rank)),
            rank_pct: mean(rs.iter().map(|r| r.rank_pct)),
            n: None,
            images: rs.iter().map(|r| r.images).sum(),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(Error::Config(format!("unknown report format {s:?}"))),
        }
    }
}

fn metric_header(name: &str) -> String {
    match name {
        "psnr" => "PSNR".into(),
        "ssim" => "SSIM".into(),
        other => other.to_string(),
    }
}

/// Renders the report; markdown for people, csv for machines.
pub fn render_report(rows: &[ReportRow], format: ReportFormat) -> Result<String> {
    let first = rows.first().ok_or_else(|| Error::Config("no report rows".into()))?;
    let names: Vec<&str> = first.metrics.iter().map(|(n, _)| n.as_str()).collect();
    let mut out = String::new();
    match format {
        ReportFormat::Markdown => {
            let mut head = vec!["Dataset".to_string(), "Strategy".to_string()];
            head.extend(names.iter().map(|n| metric_header(n)));
            head.extend(["Balanced".to_string(), "Ranking".to_string()]);
            writeln!(out, "| {} |", head.join(" | ")).expect("string write");
            writeln!(out, "|{}", "---|".repeat(head.len())).expect("string write");
            for r in rows {
                let mut cells = vec![r.group.clone(), r.strategy.clone()];
                cells.extend(r.metrics.iter().map(|(_, v)| format!("{v:.4}")));
                cells.push(format!("{:.3}", r.balanced));
                cells.push(match r.n {
                    Some(n) => format!("{:.1}% ({:.2}/{n})", r.rank_pct, r.mean_rank),
                    None => format!("{:.1}% ({:.2})", r.rank_pct, r.mean_rank),
                });
                writeln!(out, "| {} |", cells.join(" | ")).expect("string write");
            }
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut head = vec!["dataset".to_string(), "strategy".to_string()];
            head.extend(names.iter().map(|n| n.to_string()));
            head.extend(["balanced", "mean_rank", "rank_pct", "n", "images"].map(String::from));
            w.write_record(&head).map_err(csv_err)?;
            for r in rows {
                let mut cells = vec![r.group.clone(), r.strategy.clone()];
                cells.extend(r.metrics.iter().map(|(_, v)| v.to_string()));
                cells.push(r.balanced.to_string());
                cells.push(r.mean_rank.to_string());
                cells.push(r.rank_pct.to_string());
                cells.push(r.n.map(|n| n.to_string()).unwrap_or_default());
                cells.push(r.images.to_string());
                w.write_record(&cells).map_err(csv_err)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
            out = String::from_utf8(bytes).expect("csv of utf-8 cells");
        }
    }
    Ok(out)
}

pub fn emit_report(rows: &[ReportRow], format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    let text = render_report(rows, format)?;
    std::fs::write(path, text)?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

/// Reads back a csv report written by [`emit_report`].
pub fn parse_csv_report(text: &str) -> Result<Vec<ReportRow>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let head: Vec<String> = rd.headers().map_err(csv_err)?.iter().map(String::from).collect();
    if head.len() < 7 || head[..2] != ["dataset", "strategy"] {
        return Err(Error::Config("unexpected csv header".into()));
    }
    let metric_names = &head[2..head.len() - 5];
    let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Config(format!("bad number {s:?}")));
    let count = |s: &str| s.parse::<usize>().map_err(|_| Error::Config(format!("bad count {s:?}")));
    rd.records()
        .map(|rec| {
            let c = rec.map_err(csv_err)?;
            let k = 2 + metric_names.len();
            Ok(ReportRow {
                group: c[0].to_string(),
                strategy: c[1].to_string(),
                metrics: metric_names.iter().zip(2..k).map(|(n, i)| Ok((n.clone(), num(&c[i])?))).collect::<Result<_>>()?,
                balanced: num(&c[k])?,
                mean_rank: num(&c[k + 1])?,
                rank_pct: num(&c[k + 2])?,
                n: if c[k + 3].is_empty() { None } else { Some(count(&c[k + 3])?) },
                images: count(&c[k + 4])?,
            })
        })
        .collect()
}

/// Writes per-image records as JSONL.
pub fn write_records(records: &[ImageRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Decisions of `strategy` keyed by (seed, combo, index).
pub fn decisions_of<'a>(records: &'a [ImageRecord], strategy: &str) -> Vec<&'a ImageRecord> {
    records.iter().filter(|r| r.strategy == strategy).collect()
}

/// Parses a decision string from a record back into a decision.
pub fn record_decision(r: &ImageRecord) -> Result<Option<PipelineDecision>> {
    match crate::forge::parse_response(&r.decision)? {
        AgentAction::Pipeline(d) => Ok(Some(d)),
        _ => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(group: &str, strategy: &str, n: Option<usize>) -> ReportRow {
        ReportRow {
            group: group.into(),
            strategy: strategy.into(),
            metrics: vec![("psnr".into(), 24.125), ("ssim".into(), 0.7071067811865476)],
            balanced: -0.1 / 3.0,
            mean_rank: 2.5,
            rank_pct: 100.0 * 2.5 / 17.0,
            n,
            images: 30,
        }
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![row("noise+jpeg", "greedy", Some(17)), row("average", "greedy", None)];
        let text = render_report(&rows, ReportFormat::Csv).unwrap();
        assert_eq!(parse_csv_report(&text).unwrap(), rows);
    }

    #[test]
    fn markdown_golden() {
        let text = render_report(&[row("noise+jpeg", "greedy", Some(17))], ReportFormat::Markdown).unwrap();
        assert_eq!(
            text,
            "| Dataset | Strategy | PSNR | SSIM | Balanced | Ranking |\n\
             |---|---|---|---|---|---|\n\
             | noise+jpeg | greedy | 24.1250 | 0.7071 | -0.033 | 14.7% (2.50/17) |\n"
        );
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn labels_follow_synthesis_order() {
        use TaskId::*;
        assert_eq!(combo_label(&[Dejpeg, Denoise, Derain, Dehaze].into()), "haze+rain+noise+jpeg");
        assert_eq!(combo_label(&[Denoise, Lowlight].into()), "lowlight+noise");
    }

    #[test]
    fn config_parses_json_and_toml() {
        let dir = tempfile::tempdir().unwrap();
        let json = dir.path().join("b.json");
        std::fs::write(
            &json,
            r#"{"dataset":{"size":32,"combos":[{"tasks":["noise","jpeg"],"count":2}]},
                "strategies":["oracle","random"],"metrics":["psnr","ssim"],"seeds":[1],
                "output":{"markdown":"r.md"}}"#,
        )
        .unwrap();
        let a = BenchConfig::load(&json).unwrap();
        let toml_path = dir.path().join("b.toml");
        std::fs::write(
            &toml_path,
            "strategies = [\"oracle\", \"random\"]\nmetrics = [\"psnr\", \"ssim\"]\nseeds = [1]\n\
             [dataset]\nsize = 32\n[[dataset.combos]]\ntasks = [\"noise\", \"jpeg\"]\ncount = 2\n\
             [output]\nmarkdown = \"r.md\"\n",
        )
        .unwrap();
        assert_eq!(BenchConfig::load(&toml_path).unwrap(), a);
        assert!(matches!(BenchConfig::load(dir.path().join("none.json")), Err(Error::FileMissing(_))));
        let reg = ToolRegistry::default_catalog(false).frozen();
        a.validate(&reg).unwrap();
        let mut bad = a.clone();
        bad.dataset.combos[0].tasks.push("snow".into());
        assert!(bad.validate(&reg).is_err());
    }

    #[test]
    fn small_run_ranks_oracle_first() {
        let reg = ToolRegistry::default_catalog(false).frozen();
        let mut cfg = BenchConfig::default();
        cfg.dataset.size = 32;
        cfg.dataset.combos = vec![Combo { tasks: vec!["noise".into(), "jpeg".into()], count: 3 }];
        let out = run_comparison(&cfg, &reg, Execution::Serial).unwrap();
        assert_eq!(out.records.len(), 12);
        let oracle = out.rows.iter().find(|r| r.strategy == "oracle" && r.n.is_some()).unwrap();
        assert_eq!(oracle.mean_rank, 1.0);
        assert_eq!(oracle.n, Some(17));
        for r in out.rows.iter().filter(|r| r.n.is_some()) {
            assert!(r.balanced <= oracle.balanced + 1e-12);
            assert!((1.0..=17.0).contains(&r.mean_rank));
        }
        let again = run_comparison(&cfg, &reg, Execution::Parallel).unwrap();
        assert_eq!(again.records, out.records);
    }
}
