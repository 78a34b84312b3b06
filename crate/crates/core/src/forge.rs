//! Prompt/response grammar and training-pair construction.
//!
//! Prompts: `How to enhance the quality of this image? Execution history: <H>.`
//! where `<H>` is `None` or `; `-joined `k.task tool` items, rolled-back
//! items written `k.Rollback(task tool)`.
//!
//! Responses: `1.task tool. 2.task tool.`, `Rollback` or `Stop`.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{AgentAction, EntryKind, HistoryEntry};
use crate::degrade::{apply_recipe, mix_seed, sample_recipe, DegradationRecipe, Profile, TaskId};
use crate::error::{Error, Result};
use crate::image::{save_image, ImageBuffer};
use crate::par::{self, Execution};
use crate::quality::{ScoreConfig, ZScoreStats};
use crate::space::{
    enumerate_decisions, execute_decision, search_space, write_table_jsonl, OracleResult, PipelineDecision, Step,
};
use crate::toolbox::ToolRegistry;

const PROMPT_HEAD: &str = "How to enhance the quality of this image? Execution history: ";

pub fn format_prompt(history: &[HistoryEntry]) -> String {
    let body = if history.is_empty() {
        "None".to_string()
    } else {
        history
            .iter()
            .enumerate()
            .map(|(i, e)| match e.kind {
                EntryKind::Executed => format!("{}.{} {}", i + 1, e.task, e.tool),
                EntryKind::RolledBack => format!("{}.Rollback({} {})", i + 1, e.task, e.tool),
            })
            .collect::<Vec<_>>()
            .join("; ")
    };
    format!("{PROMPT_HEAD}{body}.")
}

/// Renders an action in the response grammar. A single `Step` renders as a
/// one-item pipeline.
pub fn format_response(action: &AgentAction) -> Result<String> {
    Ok(match action {
        AgentAction::Pipeline(d) => {
            if d.is_empty() {
                return Err(Error::EmptyPipeline);
            }
            d.to_string()
        }
        AgentAction::Step(s) => format!("1.{} {}.", s.task, s.tool),
        AgentAction::Rollback => "Rollback".into(),
        AgentAction::Stop => "Stop".into(),
    })
}

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn new(text: &'a str, offset: usize) -> Self {
        Cursor { text, pos: 0, offset }
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse { position: self.offset + self.pos, message: message.into() })
    }

    fn rest(&self) -> &'a str {
        &self.text[self.pos..]
    }

    fn done(&self) -> bool {
        self.pos == self.text.len()
    }

    fn eat(&mut self, lit: &str) -> Result<()> {
        if self.rest().starts_with(lit) {
            self.pos += lit.len();
            Ok(())
        } else {
            self.err(format!("expected {lit:?}"))
        }
    }

    fn try_eat(&mut self, lit: &str) -> bool {
        let ok = self.rest().starts_with(lit);
        if ok {
            self.pos += lit.len();
        }
        ok
    }

    fn take_while(&mut self, f: impl Fn(char) -> bool) -> &'a str {
        let start = self.pos;
        let len = self.rest().find(|c: char| !f(c)).unwrap_or(self.rest().len());
        self.pos += len;
        &self.text[start..self.pos]
    }

    fn index(&mut self, expected: usize) -> Result<()> {
        let at = self.pos;
        let digits = self.take_while(|c| c.is_ascii_digit());
        if digits.parse::<usize>().ok() != Some(expected) {
            self.pos = at;
            return self.err(format!("expected item number {expected}"));
        }
        self.eat(".")
    }

    /// `task tool`, where the tool id stops at `stop`.
    fn step(&mut self, stop: char) -> Result<Step> {
        let at = self.pos;
        let name = self.take_while(|c| c.is_ascii_lowercase());
        let task: TaskId = match name.parse() {
            Ok(t) => t,
            Err(_) => {
                self.pos = at;
                return self.err(format!("unknown task {name:?}"));
            }
        };
        self.eat(" ")?;
        let tool = self.take_while(|c| c != stop && c != '.' && !c.is_whitespace());
        if tool.is_empty() {
            return self.err("missing tool id");
        }
        Ok(Step::new(task, tool))
    }
}

/// Inverse of [`format_response`]; surrounding whitespace is ignored.
pub fn parse_response(text: &str) -> Result<AgentAction> {
    let lead = text.len() - text.trim_start().len();
    let body = text.trim();
    match body {
        "Stop" => return Ok(AgentAction::Stop),
        "Rollback" => return Ok(AgentAction::Rollback),
        "" => return Err(Error::Parse { position: lead, message: "empty response".into() }),
        _ => {}
    }
    let mut c = Cursor::new(body, lead);
    let mut steps = Vec::new();
    loop {
        c.index(steps.len() + 1)?;
        steps.push(c.step('.')?);
        c.eat(".")?;
        if c.done() {
            break;
        }
        c.eat(" ")?;
    }
    PipelineDecision::new(steps)
        .map(AgentAction::Pipeline)
        .map_err(|e| Error::Parse { position: lead, message: e.to_string() })
}

/// Inverse of [`format_prompt`].
pub fn parse_prompt(text: &str) -> Result<Vec<HistoryEntry>> {
    let lead = text.len() - text.trim_start().len();
    let body = text.trim();
    let mut c = Cursor::new(body, lead);
    c.eat(PROMPT_HEAD)?;
    if c.rest() == "None." {
        return Ok(Vec::new());
    }
    let mut history = Vec::new();
    loop {
        c.index(history.len() + 1)?;
        if c.try_eat("Rollback(") {
            let s = c.step(')')?;
            c.eat(")")?;
            history.push(HistoryEntry::rolled_back(s.task, s.tool));
        } else {
            let s = c.step(';')?;
            history.push(HistoryEntry::executed(s.task, s.tool));
        }
        if c.try_eat("; ") {
            continue;
        }
        c.eat(".")?;
        if !c.done() {
            return c.err("trailing text");
        }
        return Ok(history);
    }
}

/// Construction parameters for training pairs.
#[derive(Debug, Clone)]
pub struct ForgeConfig {
    /// Number of degraded images, one pair each.
    pub count: usize,
    /// Scenario shares S1..S5 (any positive scale).
    pub mix: [f64; 5],
    pub delta: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub profile: Profile,
    /// Task sets cycled over the images.
    pub task_sets: Vec<BTreeSet<TaskId>>,
    /// Square crop size taken from each clean image.
    pub crop: usize,
    pub score: ScoreConfig,
    pub exec: Execution,
    /// Directory receiving images, per-image tables and the JSONL.
    pub out_dir: PathBuf,
    /// JSONL path; `out_dir/pairs.jsonl` when unset.
    pub jsonl: Option<PathBuf>,
}

impl ForgeConfig {
    pub fn new(out_dir: impl Into<PathBuf>, count: usize) -> Self {
        ForgeConfig {
            count,
            mix: [60.0, 15.0, 10.0, 10.0, 5.0],
            delta: 0.5,
            epsilon: 0.05,
            seed: 0,
            profile: Profile::Mixed,
            task_sets: default_task_sets(),
            crop: 128,
            score: ScoreConfig::default(),
            exec: Execution::default(),
            out_dir: out_dir.into(),
            jsonl: None,
        }
    }

    pub fn jsonl_path(&self) -> PathBuf {
        self.jsonl.clone().unwrap_or_else(|| self.out_dir.join("pairs.jsonl"))
    }
}

/// The benchmark's degradation combinations.
pub fn default_task_sets() -> Vec<BTreeSet<TaskId>> {
    use TaskId::*;
    vec![
        [Denoise, Dejpeg].into(),
        [Lowlight, Denoise].into(),
        [Deblur, Denoise, Dejpeg].into(),
        [Derain, Denoise, Dejpeg].into(),
        [Dehaze, Denoise, Dejpeg].into(),
        [Dehaze, Derain, Denoise, Dejpeg].into(),
        [Deblur, Derain, Denoise, Dejpeg].into(),
    ]
}

/// Parses `"60,15,10,10,5"`.
pub fn parse_mix(s: &str) -> Result<[f64; 5]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad mix entry {p:?}"))))
        .collect::<Result<_>>()?;
    let mix: [f64; 5] = v.try_into().map_err(|_| Error::Config("mix needs five shares".into()))?;
    if mix.iter().any(|&m| !(m >= 0.0 && m.is_finite())) || mix.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Config("mix shares must be non-negative with a positive sum".into()));
    }
    Ok(mix)
}

/// Largest-remainder apportionment of `count` over `mix`.
pub fn scenario_quotas(mix: &[f64; 5], count: usize) -> [usize; 5] {
    let total: f64 = mix.iter().sum();
    let exact: Vec<f64> = mix.iter().map(|m| m / total * count as f64).collect();
    let mut q: [usize; 5] = std::array::from_fn(|i| exact[i].floor() as usize);
    let mut order: Vec<usize> = (0..5).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = count - q.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        q[i] += 1;
    }
    q
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub recipe: DegradationRecipe,
    pub space_size: usize,
    pub oracle_rank_table: String,
    /// Clean crop the labels were measured against.
    pub reference: String,
    /// Degraded image before any step.
    pub degraded: String,
    /// Tasks of the (re-searched) space the response was chosen from.
    pub tasks: BTreeSet<TaskId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub banned: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub scenario: u8,
    pub image: String,
    pub prompt: String,
    pub response: String,
    pub meta: PairMeta,
}

/// Per-image search results and which scenarios it can serve.
struct Prepared {
    id: String,
    recipe: DegradationRecipe,
    reference: ImageBuffer,
    degraded: ImageBuffer,
    table: OracleResult,
    rollback_steps: Vec<Step>,
    stop_ok: bool,
    multi_step: bool,
    s4_ok: bool,
}

/// Best achievable balanced score after each first step, on the table's scale.
fn best_after_first_step(table: &OracleResult) -> std::collections::BTreeMap<Step, f64> {
    let mut m = std::collections::BTreeMap::new();
    for c in table.succeeded() {
        let s = c.balanced().expect("succeeded");
        let e = m.entry(c.decision.steps()[0].clone()).or_insert(f64::NEG_INFINITY);
        if s > *e {
            *e = s;
        }
    }
    m
}

/// First steps of bottom-decile decisions that cost more than `delta`
/// against the best achievable score.
pub fn rollback_candidates(table: &OracleResult, delta: f64) -> Vec<Step> {
    let ok: Vec<_> = table.succeeded().collect();
    if ok.is_empty() {
        return Vec::new();
    }
    let top = ok[0].balanced().expect("succeeded");
    let after = best_after_first_step(table);
    let decile = ok.len().div_ceil(10);
    ok[ok.len() - decile..]
        .iter()
        .map(|c| c.decision.steps()[0].clone())
        .filter(|s| after[s] < top - delta)
        .collect()
}

/// Whether any single remaining step improves `img` by more than `epsilon`
/// on the scale of `stats`.
pub fn admits_improving_step(
    img: &ImageBuffer,
    reference: &ImageBuffer,
    remaining: &BTreeSet<TaskId>,
    reg: &ToolRegistry,
    score: &ScoreConfig,
    stats: &ZScoreStats,
    epsilon: f64,
) -> Result<bool> {
    let here = stats.score(&score.report(img, reference)?)?;
    for &t in remaining {
        for tool in reg.tools_for(t) {
            let Ok(out) = reg.run_tool(tool, img) else { continue };
            if stats.score(&score.report(&out, reference)?)? - here > epsilon {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

fn stats_of(table: &OracleResult, score: &ScoreConfig, degraded: &ImageBuffer, reference: &ImageBuffer) -> Result<ZScoreStats> {
    match &table.stats {
        Some(s) => Ok(s.clone()),
        None => {
            let pop = [score.report(degraded, reference)?, table.best().report.clone().expect("succeeded")];
            ZScoreStats::from_population(&pop, score)
        }
    }
}

fn prepare(
    index: usize,
    id: &str,
    clean: &ImageBuffer,
    reg: &ToolRegistry,
    cfg: &ForgeConfig,
) -> Result<Prepared> {
    let seed = mix_seed(cfg.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = cfg.crop.min(clean.width()).min(clean.height());
    let (x, y) = (rng.random_range(0..=clean.width() - side), rng.random_range(0..=clean.height() - side));
    let reference = clean.crop(x, y, side, side)?.quantized();
    let tasks = &cfg.task_sets[index % cfg.task_sets.len()];
    let recipe = sample_recipe(tasks, seed, cfg.profile)?.with_source(id);
    let degraded = apply_recipe(&reference, &recipe)?.quantized();
    let space = enumerate_decisions(reg, tasks, true)?;
    let table = search_space(&degraded, &reference, &space, reg, &cfg.score, cfg.exec)?;
    let rollback_steps = rollback_candidates(&table, cfg.delta);
    let stats = stats_of(&table, &cfg.score, &degraded, &reference)?;
    let best = &table.best().decision;
    let after = execute_decision(&degraded, best, reg)?.quantized();
    let remaining: BTreeSet<TaskId> = tasks.iter().copied().filter(|t| !best.tasks().contains(t)).collect();
    let stop_ok = !admits_improving_step(&after, &reference, &remaining, reg, &cfg.score, &stats, cfg.epsilon)?;
    let multi_step = table.table.iter().any(|c| c.decision.len() >= 2);
    let s4_ok = rollback_steps.iter().any(|s| !space.without_steps(&[s.clone()].into()).is_empty());
    Ok(Prepared {
        id: id.to_string(),
        recipe,
        reference,
        degraded,
        table,
        rollback_steps,
        stop_ok,
        multi_step,
        s4_ok,
    })
}

impl Prepared {
    fn feasible(&self, scenario: usize) -> bool {
        match scenario {
            0 => true,
            1 => self.multi_step,
            2 => !self.rollback_steps.is_empty(),
            3 => self.s4_ok,
            4 => self.stop_ok,
            _ => false,
        }
    }
}

/// Picks a scenario per image: the feasible one furthest behind its
/// evenly-spread schedule, ties to the lower scenario number.
fn assign(prepared: &[Option<Prepared>], quotas: [usize; 5]) -> Vec<Option<usize>> {
    let total = prepared.iter().filter(|p| p.is_some()).count().max(1);
    let mut done = [0usize; 5];
    let mut seen = 0usize;
    prepared
        .iter()
        .map(|p| {
            let p = p.as_ref()?;
            seen += 1;
            let pick = (0..5)
                .filter(|&s| p.feasible(s) && done[s] < quotas[s])
                .max_by(|&a, &b| {
                    let lag = |s: usize| quotas[s] as f64 * seen as f64 / total as f64 - done[s] as f64;
                    lag(a).total_cmp(&lag(b)).then(b.cmp(&a))
                })
                .or_else(|| (0..5).find(|&s| p.feasible(s)))?;
            done[pick] += 1;
            Some(pick)
        })
        .collect()
}

struct Assets<'a> {
    root: &'a Path,
}

impl Assets<'_> {
    fn save(&self, sub: &str, name: &str, img: &ImageBuffer) -> Result<String> {
        let dir = self.root.join(sub);
        std::fs::create_dir_all(&dir)?;
        let p = dir.join(name);
        save_image(img, &p)?;
        Ok(p.to_string_lossy().into_owned())
    }
}

fn build_pair(p: &Prepared, scenario: usize, index: usize, reg: &ToolRegistry, cfg: &ForgeConfig) -> Result<TrainingPair> {
    let assets = Assets { root: &cfg.out_dir };
    let reference = assets.save("references", &format!("{}.png", p.id), &p.reference)?;
    let degraded = assets.save("images", &format!("{}_degraded.png", p.id), &p.degraded)?;
    std::fs::create_dir_all(cfg.out_dir.join("tables"))?;
    let table_path = cfg.out_dir.join("tables").join(format!("{}.jsonl", p.id));
    write_table_jsonl(&p.table.table, &table_path, None)?;
    let tasks = p.recipe.tasks();
    let mut meta = PairMeta {
        recipe: p.recipe.clone(),
        space_size: p.table.space_size(),
        oracle_rank_table: table_path.to_string_lossy().into_owned(),
        reference,
        degraded: degraded.clone(),
        tasks: tasks.clone(),
        banned: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed ^ 0x5EED, index as u64));
    let (image, history, action) = match scenario {
        0 => (degraded, Vec::new(), AgentAction::Pipeline(p.table.best().decision.clone())),
        1 => {
            let multi: Vec<&PipelineDecision> =
                p.table.table.iter().map(|c| &c.decision).filter(|d| d.len() >= 2).collect();
            let d = *multi.choose(&mut rng).expect("feasible");
            let k = rng.random_range(1..d.len());
            let prefix = PipelineDecision::new(d.steps()[..k].to_vec())?;
            let state = execute_decision(&p.degraded, &prefix, reg)?.quantized();
            let remaining: BTreeSet<TaskId> = tasks.iter().copied().filter(|t| !prefix.tasks().contains(t)).collect();
            let space = enumerate_decisions(reg, &remaining, true)?;
            let res = search_space(&state, &p.reference, &space, reg, &cfg.score, cfg.exec)?;
            let img = assets.save("images", &format!("{}_s2.png", p.id), &state)?;
            meta.tasks = remaining;
            meta.space_size = res.space_size();
            let history = prefix.steps().iter().map(|s| HistoryEntry::executed(s.task, s.tool.clone())).collect();
            (img, history, AgentAction::Pipeline(res.best().decision.clone()))
        }
        2 => {
            let step = p.rollback_steps.choose(&mut rng).expect("feasible").clone();
            let state = reg.run_tool(&step.tool, &p.degraded)?.quantized();
            let img = assets.save("images", &format!("{}_s3.png", p.id), &state)?;
            (img, vec![HistoryEntry::executed(step.task, step.tool)], AgentAction::Rollback)
        }
        3 => {
            let space = enumerate_decisions(reg, &tasks, true)?;
            let usable: Vec<&Step> =
                p.rollback_steps.iter().filter(|s| !space.without_steps(&[(*s).clone()].into()).is_empty()).collect();
            let step = (*usable.choose(&mut rng).expect("feasible")).clone();
            let filtered = space.without_steps(&[step.clone()].into());
            let res = search_space(&p.degraded, &p.reference, &filtered, reg, &cfg.score, cfg.exec)?;
            meta.space_size = res.space_size();
            meta.banned = vec![step.clone()];
            (degraded, vec![HistoryEntry::rolled_back(step.task, step.tool)], AgentAction::Pipeline(res.best().decision.clone()))
        }
        _ => {
            let best = &p.table.best().decision;
            let state = execute_decision(&p.degraded, best, reg)?.quantized();
            let img = assets.save("images", &format!("{}_s5.png", p.id), &state)?;
            meta.tasks = tasks.iter().copied().filter(|t| !best.tasks().contains(t)).collect();
            let history = best.steps().iter().map(|s| HistoryEntry::executed(s.task, s.tool.clone())).collect();
            (img, history, AgentAction::Stop)
        }
    };
    Ok(TrainingPair {
        scenario: scenario as u8 + 1,
        image,
        prompt: format_prompt(&history),
        response: format_response(&action)?,
        meta,
    })
}

/// Builds one training pair per degraded image and writes them, in image
/// order, to `cfg.jsonl_path()`. Images whose search fails are logged and
/// skipped.
pub fn generate_pairs(clean: &[(String, ImageBuffer)], reg: &ToolRegistry, cfg: &ForgeConfig) -> Result<Vec<TrainingPair>> {
    if !reg.is_frozen() {
        return Err(Error::UnfrozenRegistry);
    }
    if clean.is_empty() {
        return Err(Error::Config("no clean images".into()));
    }
    if cfg.task_sets.is_empty() {
        return Err(Error::Config("no task sets".into()));
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    let ids: Vec<usize> = (0..cfg.count).collect();
    let prepared: Vec<Option<Prepared>> = par::map(cfg.exec, &ids, |&i| {
        let (name, img) = &clean[i % clean.len()];
        let id = format!("{i:05}_{name}");
        prepare(i, &id, img, reg, cfg)
            .map_err(|e| log::warn!("skipping image {id}: {e}"))
            .ok()
    });
    let quotas = scenario_quotas(&cfg.mix, prepared.iter().filter(|p| p.is_some()).count());
    let plan = assign(&prepared, quotas);
    let work: Vec<(usize, &Prepared, usize)> = prepared
        .iter()
        .zip(&plan)
        .enumerate()
        .filter_map(|(i, (p, s))| Some((i, p.as_ref()?, (*s)?)))
        .collect();
    let built = par::map(cfg.exec, &work, |&(i, p, s)| {
        build_pair(p, s, i, reg, cfg).map_err(|e| log::warn!("skipping pair for {}: {e}", p.id)).ok()
    });
    let pairs: Vec<TrainingPair> = built.into_iter().flatten().collect();
    let mut f = std::io::BufWriter::new(std::fs::File::create(cfg.jsonl_path())?);
    for p in &pairs {
        serde_json::to_writer(&mut f, p)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(pairs)
}
