//! Step-wise restoration sessions driven by a policy.
//!
//! A session holds the current image, a stack of pre-step snapshots, the
//! execution history and the set of `(task, tool)` pairs banned by
//! rollbacks. Policies see the session read-only and answer with an
//! [`AgentAction`].

use std::collections::{BTreeSet, VecDeque};
use std::path::PathBuf;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::degrade::TaskId;
use crate::error::{Error, Result};
use crate::forge::format_prompt;
use crate::image::{save_image, ImageBuffer};
use crate::par::{self, Execution};
use crate::provider::{split_command, LineProcess, DEFAULT_TIMEOUT};
use crate::quality::{balanced_scores, ScoreConfig, ScoreReport, ZScoreStats};
use crate::space::{enumerate_decisions, oracle_search, search_space, PipelineDecision, Step};
use crate::toolbox::ToolRegistry;

pub const DEFAULT_BUDGET: usize = 12;

/// Default task priority of the fixed policy.
pub const DEFAULT_PRIORITY: [TaskId; 7] = [
    TaskId::Lowlight,
    TaskId::Dehaze,
    TaskId::Derain,
    TaskId::Desnow,
    TaskId::Deblur,
    TaskId::Denoise,
    TaskId::Dejpeg,
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AgentAction {
    Pipeline(PipelineDecision),
    Step(Step),
    Rollback,
    Stop,
}

impl AgentAction {
    /// Encodes the action as a policy-protocol response object.
    pub fn to_wire(&self) -> Value {
        let steps = |s: &[Step]| -> Vec<Value> { s.iter().map(|s| json!({"task": s.task, "tool": s.tool})).collect() };
        match self {
            AgentAction::Pipeline(d) => json!({"action": "pipeline", "steps": steps(d.steps())}),
            AgentAction::Step(s) => json!({"action": "step", "steps": steps(std::slice::from_ref(s))}),
            AgentAction::Rollback => json!({"action": "rollback", "steps": []}),
            AgentAction::Stop => json!({"action": "stop", "steps": []}),
        }
    }

    /// Decodes a policy-protocol response line.
    pub fn from_wire(line: &str) -> Result<AgentAction> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Wire {
            action: String,
            #[serde(default)]
            steps: Vec<Step>,
        }
        let bad = |m: String| Error::PolicyProtocol(m);
        let w: Wire = serde_json::from_str(line.trim()).map_err(|e| bad(format!("malformed response {line:?}: {e}")))?;
        match w.action.as_str() {
            "pipeline" => PipelineDecision::new(w.steps).map(AgentAction::Pipeline).map_err(|e| bad(e.to_string())),
            "step" => match <[Step; 1]>::try_from(w.steps) {
                Ok([s]) => Ok(AgentAction::Step(s)),
                Err(v) => Err(bad(format!("step action needs exactly one step, got {}", v.len()))),
            },
            "rollback" if w.steps.is_empty() => Ok(AgentAction::Rollback),
            "stop" if w.steps.is_empty() => Ok(AgentAction::Stop),
            "rollback" | "stop" => Err(bad(format!("{} carries steps", w.action))),
            other => Err(bad(format!("unknown action {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Executed,
    RolledBack,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub kind: EntryKind,
    pub task: TaskId,
    pub tool: String,
}

impl HistoryEntry {
    pub fn executed(task: TaskId, tool: impl Into<String>) -> Self {
        HistoryEntry { kind: EntryKind::Executed, task, tool: tool.into() }
    }

    pub fn rolled_back(task: TaskId, tool: impl Into<String>) -> Self {
        HistoryEntry { kind: EntryKind::RolledBack, task, tool: tool.into() }
    }

    pub fn step(&self) -> Step {
        Step::new(self.task, self.tool.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    SingleShot,
    StepWise,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single-shot" => Ok(Mode::SingleShot),
            "step-wise" => Ok(Mode::StepWise),
            _ => Err(Error::Config(format!("unknown mode {s:?} (single-shot | step-wise)"))),
        }
    }
}

/// Mutable restoration session. Failed operations leave the state as it
/// was, apart from the failure log.
#[derive(Debug, Clone)]
pub struct SessionState {
    initial: ImageBuffer,
    current: ImageBuffer,
    snapshots: Vec<ImageBuffer>,
    history: Vec<HistoryEntry>,
    banned: BTreeSet<Step>,
    budget_remaining: usize,
    failures: Vec<String>,
}

impl SessionState {
    pub fn new(initial: ImageBuffer, budget: usize) -> Self {
        SessionState {
            current: initial.clone(),
            initial,
            snapshots: Vec::new(),
            history: Vec::new(),
            banned: BTreeSet::new(),
            budget_remaining: budget,
            failures: Vec::new(),
        }
    }

    pub fn initial(&self) -> &ImageBuffer {
        &self.initial
    }

    pub fn current(&self) -> &ImageBuffer {
        &self.current
    }

    pub fn snapshots(&self) -> &[ImageBuffer] {
        &self.snapshots
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    pub fn banned(&self) -> &BTreeSet<Step> {
        &self.banned
    }

    pub fn budget_remaining(&self) -> usize {
        self.budget_remaining
    }

    pub fn failures(&self) -> &[String] {
        &self.failures
    }

    /// Steps currently in effect, in execution order.
    pub fn active_steps(&self) -> Vec<Step> {
        self.history.iter().filter(|e| e.kind == EntryKind::Executed).map(HistoryEntry::step).collect()
    }

    pub fn executed_tasks(&self) -> BTreeSet<TaskId> {
        self.active_steps().into_iter().map(|s| s.task).collect()
    }

    pub fn execute_step(&mut self, task: TaskId, tool: &str, reg: &ToolRegistry) -> Result<()> {
        let step = Step::new(task, tool);
        if self.budget_remaining == 0 {
            return Err(Error::BudgetExhausted);
        }
        if self.banned.contains(&step) {
            return Err(Error::BannedStep(step.to_string()));
        }
        if self.executed_tasks().contains(&task) {
            return Err(Error::RepeatedTask(task.to_string()));
        }
        let desc = reg.get(tool).ok_or_else(|| Error::UnknownTool(tool.to_string()))?;
        if desc.task != task {
            return Err(Error::InvalidDecision(format!("tool {tool} restores {}, not {task}", desc.task)));
        }
        match reg.run_tool(tool, &self.current) {
            Ok(out) => {
                let prev = std::mem::replace(&mut self.current, out);
                self.snapshots.push(prev);
                self.history.push(HistoryEntry::executed(task, tool));
                self.budget_remaining -= 1;
                Ok(())
            }
            Err(e) => {
                self.failures.push(format!("{step}: {e}"));
                Err(e)
            }
        }
    }

    pub fn rollback(&mut self) -> Result<()> {
        if self.budget_remaining == 0 {
            return Err(Error::BudgetExhausted);
        }
        let prev = self.snapshots.pop().ok_or(Error::NothingToRollback)?;
        self.current = prev;
        let entry = self
            .history
            .iter_mut()
            .rev()
            .find(|e| e.kind == EntryKind::Executed)
            .expect("a snapshot implies an executed entry");
        entry.kind = EntryKind::RolledBack;
        self.banned.insert(entry.step());
        self.budget_remaining -= 1;
        Ok(())
    }
}

/// Re-applies the executed entries of `history` to `initial`.
pub fn replay(initial: &ImageBuffer, history: &[HistoryEntry], reg: &ToolRegistry) -> Result<ImageBuffer> {
    history
        .iter()
        .filter(|e| e.kind == EntryKind::Executed)
        .try_fold(initial.clone(), |img, e| reg.run_tool(&e.tool, &img))
}

/// What a policy sees when asked for its next action.
pub struct PolicyContext<'a> {
    pub state: &'a SessionState,
    /// Degradation types present in the image.
    pub tasks: &'a BTreeSet<TaskId>,
    pub registry: &'a ToolRegistry,
    pub reference: Option<&'a ImageBuffer>,
    pub mode: Mode,
}

impl PolicyContext<'_> {
    /// Present tasks not yet in effect.
    pub fn remaining_tasks(&self) -> BTreeSet<TaskId> {
        let done = self.state.executed_tasks();
        self.tasks.iter().copied().filter(|t| !done.contains(t)).collect()
    }

    /// Remaining tasks with their non-banned tools, skipping tasks left
    /// with no tool.
    pub fn available(&self) -> Vec<(TaskId, Vec<String>)> {
        self.remaining_tasks()
            .into_iter()
            .filter_map(|t| {
                let tools: Vec<String> = self
                    .registry
                    .tools_for(t)
                    .into_iter()
                    .filter(|tool| !self.state.banned().contains(&Step::new(t, *tool)))
                    .map(String::from)
                    .collect();
                (!tools.is_empty()).then_some((t, tools))
            })
            .collect()
    }

    fn reference(&self, policy: &str) -> Result<&ImageBuffer> {
        self.reference.ok_or_else(|| Error::ReferenceRequired(policy.to_string()))
    }
}

pub trait Policy: Send {
    fn name(&self) -> &str;

    /// Whether the policy needs the clean reference (oracle-style labelers).
    fn needs_reference(&self) -> bool {
        false
    }

    /// Clears per-episode state.
    fn reset(&mut self) {}

    fn decide(&mut self, ctx: &PolicyContext) -> Result<AgentAction>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Terminal {
    Stop,
    BudgetExhausted,
}

#[derive(Debug, Clone)]
pub struct TranscriptEntry {
    pub action: AgentAction,
    /// Scores of the image after the action, when a reference is known.
    pub report: Option<ScoreReport>,
    /// Tool failure recorded for this action; the state did not change.
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct AgentTranscript {
    pub actions: Vec<TranscriptEntry>,
    pub terminal: Terminal,
    pub history: Vec<HistoryEntry>,
    pub final_image: ImageBuffer,
    pub failures: Vec<String>,
}

impl AgentTranscript {
    /// Replays the transcript's history; equals `final_image`.
    pub fn replay(&self, initial: &ImageBuffer, reg: &ToolRegistry) -> Result<ImageBuffer> {
        replay(initial, &self.history, reg)
    }

    /// The steps in effect at the end of the episode.
    pub fn decision(&self) -> Option<PipelineDecision> {
        let steps: Vec<Step> =
            self.history.iter().filter(|e| e.kind == EntryKind::Executed).map(HistoryEntry::step).collect();
        PipelineDecision::new(steps).ok()
    }
}

#[derive(Clone)]
pub struct EpisodeConfig<'a> {
    pub registry: &'a ToolRegistry,
    pub tasks: BTreeSet<TaskId>,
    pub reference: Option<&'a ImageBuffer>,
    pub budget: usize,
    pub mode: Mode,
    pub score: ScoreConfig,
}

impl<'a> EpisodeConfig<'a> {
    pub fn new(registry: &'a ToolRegistry, tasks: BTreeSet<TaskId>, mode: Mode) -> Self {
        EpisodeConfig { registry, tasks, reference: None, budget: DEFAULT_BUDGET, mode, score: ScoreConfig::default() }
    }

    pub fn with_reference(mut self, reference: &'a ImageBuffer) -> Self {
        self.reference = Some(reference);
        self
    }

    pub fn with_budget(mut self, budget: usize) -> Self {
        self.budget = budget;
        self
    }
}

/// Runs one episode. Every policy query counts against the budget, so
/// episodes always terminate.
pub fn run_episode(policy: &mut dyn Policy, initial: &ImageBuffer, cfg: &EpisodeConfig) -> Result<AgentTranscript> {
    if cfg.budget == 0 {
        return Err(Error::Config("budget must be at least 1".into()));
    }
    if policy.needs_reference() && cfg.reference.is_none() {
        return Err(Error::ReferenceRequired(policy.name().to_string()));
    }
    policy.reset();
    let reg = cfg.registry;
    let mut state = SessionState::new(initial.clone(), cfg.budget);
    let mut actions = Vec::new();
    let score = |img: &ImageBuffer| -> Result<Option<ScoreReport>> {
        cfg.reference.map(|r| cfg.score.report(img, r)).transpose()
    };
    let terminal = match cfg.mode {
        Mode::SingleShot => {
            let action = policy.decide(&PolicyContext {
                state: &state,
                tasks: &cfg.tasks,
                registry: reg,
                reference: cfg.reference,
                mode: cfg.mode,
            })?;
            match &action {
                AgentAction::Stop => {
                    let report = score(state.current())?;
                    actions.push(TranscriptEntry { action, report, error: None });
                    Terminal::Stop
                }
                AgentAction::Pipeline(d) => {
                    d.validate(reg)?;
                    let mut terminal = Terminal::Stop;
                    let mut error = None;
                    for s in d.steps() {
                        match state.execute_step(s.task, &s.tool, reg) {
                            Ok(()) => {}
                            Err(Error::BudgetExhausted) => {
                                terminal = Terminal::BudgetExhausted;
                                break;
                            }
                            Err(e @ (Error::ExternalToolFailure(_) | Error::DimensionMismatch(_))) => {
                                error = Some(e.to_string());
                                break;
                            }
                            Err(e) => return Err(e),
                        }
                    }
                    let report = score(state.current())?;
                    actions.push(TranscriptEntry { action, report, error });
                    terminal
                }
                other => {
                    return Err(Error::PolicyProtocol(format!("{other:?} is not allowed in single-shot mode")));
                }
            }
        }
        Mode::StepWise => {
            let mut terminal = Terminal::BudgetExhausted;
            for _ in 0..cfg.budget {
                if state.budget_remaining() == 0 {
                    break;
                }
                let action = policy.decide(&PolicyContext {
                    state: &state,
                    tasks: &cfg.tasks,
                    registry: reg,
                    reference: cfg.reference,
                    mode: cfg.mode,
                })?;
                let mut error = None;
                match &action {
                    AgentAction::Stop => {
                        let report = score(state.current())?;
                        actions.push(TranscriptEntry { action, report, error });
                        terminal = Terminal::Stop;
                        break;
                    }
                    AgentAction::Step(s) => match state.execute_step(s.task, &s.tool, reg) {
                        Ok(()) => {}
                        Err(e @ (Error::ExternalToolFailure(_) | Error::DimensionMismatch(_))) => {
                            error = Some(e.to_string());
                        }
                        Err(e) => return Err(e),
                    },
                    AgentAction::Rollback => state.rollback()?,
                    AgentAction::Pipeline(_) => {
                        return Err(Error::PolicyProtocol("pipeline is not allowed in step-wise mode".into()));
                    }
                }
                let report = score(state.current())?;
                actions.push(TranscriptEntry { action, report, error });
            }
            terminal
        }
    };
    Ok(AgentTranscript {
        actions,
        terminal,
        history: state.history().to_vec(),
        final_image: state.current().clone(),
        failures: state.failures().to_vec(),
    })
}

fn step_from_plan(plan: &mut VecDeque<Step>) -> AgentAction {
    plan.pop_front().map(AgentAction::Step).unwrap_or(AgentAction::Stop)
}

fn pipeline_or_stop(steps: Vec<Step>) -> AgentAction {
    PipelineDecision::new(steps).map(AgentAction::Pipeline).unwrap_or(AgentAction::Stop)
}

/// Replays a fixed list of actions, then stops.
pub struct ScriptedPolicy {
    script: Vec<AgentAction>,
    queue: VecDeque<AgentAction>,
}

impl ScriptedPolicy {
    pub fn new(script: Vec<AgentAction>) -> Self {
        ScriptedPolicy { queue: script.iter().cloned().collect(), script }
    }

    /// Step-wise script executing `decision` step by step, then Stop.
    pub fn steps_of(decision: &PipelineDecision) -> Self {
        ScriptedPolicy::new(decision.steps().iter().cloned().map(AgentAction::Step).collect())
    }
}

impl Policy for ScriptedPolicy {
    fn name(&self) -> &str {
        "scripted"
    }

    fn reset(&mut self) {
        self.queue = self.script.iter().cloned().collect();
    }

    fn decide(&mut self, _ctx: &PolicyContext) -> Result<AgentAction> {
        Ok(self.queue.pop_front().unwrap_or(AgentAction::Stop))
    }
}

/// Full-length pipeline over the remaining tasks: uniformly random order and
/// uniformly random tool per task.
pub struct RandomPolicy {
    rng: ChaCha8Rng,
    plan: Option<VecDeque<Step>>,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        RandomPolicy { rng: ChaCha8Rng::seed_from_u64(seed), plan: None }
    }

    fn draw(&mut self, ctx: &PolicyContext) -> Vec<Step> {
        let mut avail = ctx.available();
        avail.shuffle(&mut self.rng);
        avail
            .into_iter()
            .map(|(task, tools)| {
                let i = self.rng.random_range(0..tools.len());
                Step::new(task, tools[i].clone())
            })
            .collect()
    }
}

impl Policy for RandomPolicy {
    fn name(&self) -> &str {
        "random"
    }

    fn reset(&mut self) {
        self.plan = None;
    }

    fn decide(&mut self, ctx: &PolicyContext) -> Result<AgentAction> {
        match ctx.mode {
            Mode::SingleShot => Ok(pipeline_or_stop(self.draw(ctx))),
            Mode::StepWise => {
                if self.plan.is_none() {
                    self.plan = Some(self.draw(ctx).into());
                }
                Ok(step_from_plan(self.plan.as_mut().expect("planned")))
            }
        }
    }
}

/// One predefined template: present tasks ordered by a priority list, each
/// with a configured tool or, by default, the middle tool of its pool.
pub struct FixedPolicy {
    priority: Vec<TaskId>,
    tools: std::collections::BTreeMap<TaskId, String>,
}

impl Default for FixedPolicy {
    fn default() -> Self {
        FixedPolicy::new(DEFAULT_PRIORITY.to_vec())
    }
}

impl FixedPolicy {
    pub fn new(priority: Vec<TaskId>) -> Self {
        FixedPolicy { priority, tools: Default::default() }
    }

    pub fn with_tool(mut self, task: TaskId, tool: impl Into<String>) -> Self {
        self.tools.insert(task, tool.into());
        self
    }

    /// The template for a task set. Tasks missing from the priority list
    /// follow in name order.
    pub fn template(&self, tasks: &BTreeSet<TaskId>, reg: &ToolRegistry, banned: &BTreeSet<Step>) -> Vec<Step> {
        let mut order: Vec<TaskId> = self.priority.iter().copied().filter(|t| tasks.contains(t)).collect();
        order.extend(tasks.iter().copied().filter(|t| !self.priority.contains(t)));
        order
            .into_iter()
            .filter_map(|t| {
                let pool: Vec<&str> =
                    reg.tools_for(t).into_iter().filter(|tool| !banned.contains(&Step::new(t, *tool))).collect();
                let tool = match self.tools.get(&t) {
                    Some(tool) if pool.contains(&tool.as_str()) => tool.clone(),
                    _ if pool.is_empty() => return None,
                    _ => pool[pool.len().div_ceil(2) - 1].to_string(),
                };
                Some(Step::new(t, tool))
            })
            .collect()
    }
}

impl Policy for FixedPolicy {
    fn name(&self) -> &str {
        "fixed"
    }

    fn decide(&mut self, ctx: &PolicyContext) -> Result<AgentAction> {
        let plan = self.template(&ctx.remaining_tasks(), ctx.registry, ctx.state.banned());
        Ok(match ctx.mode {
            Mode::SingleShot => pipeline_or_stop(plan),
            Mode::StepWise => plan.into_iter().next().map(AgentAction::Step).unwrap_or(AgentAction::Stop),
        })
    }
}

/// Every single next step from `img` over `tasks`, skipping banned pairs
/// and failed tools.
fn one_step_outcomes(
    img: &ImageBuffer,
    tasks: &BTreeSet<TaskId>,
    banned: &BTreeSet<Step>,
    reg: &ToolRegistry,
    exec: Execution,
) -> Vec<(Step, ImageBuffer)> {
    let steps: Vec<Step> = tasks
        .iter()
        .flat_map(|&t| reg.tools_for(t).into_iter().map(move |tool| Step::new(t, tool)))
        .filter(|s| !banned.contains(s))
        .collect();
    par::map(exec, &steps, |s| reg.run_tool(&s.tool, img).ok().map(|out| (s.clone(), out)))
        .into_iter()
        .flatten()
        .collect()
}

/// Reference-guided one-step lookahead. Each step is scored against the
/// population {current image} ∪ {one-step outcomes}; the policy stops once
/// the current image is best, after at least `min_steps` steps.
pub struct GreedyPolicy {
    pub score: ScoreConfig,
    pub min_steps: usize,
    pub exec: Execution,
}

impl Default for GreedyPolicy {
    fn default() -> Self {
        GreedyPolicy { score: ScoreConfig::default(), min_steps: 1, exec: Execution::default() }
    }
}

impl GreedyPolicy {
    pub fn new(score: ScoreConfig) -> Self {
        GreedyPolicy { score, ..Default::default() }
    }

    /// Best next step from `img`, or `None` when stopping is preferred.
    fn choose(
        &self,
        img: &ImageBuffer,
        reference: &ImageBuffer,
        tasks: &BTreeSet<TaskId>,
        banned: &BTreeSet<Step>,
        reg: &ToolRegistry,
        done: usize,
    ) -> Result<Option<(Step, ImageBuffer)>> {
        let outcomes = one_step_outcomes(img, tasks, banned, reg, self.exec);
        if outcomes.is_empty() {
            return Ok(None);
        }
        let mut reports = vec![self.score.report(img, reference)?];
        for (_, out) in &outcomes {
            reports.push(self.score.report(out, reference)?);
        }
        let scores = balanced_scores(&reports, &self.score)?;
        let mut best = 0;
        for i in 1..outcomes.len() {
            if scores[i + 1] > scores[best + 1] {
                best = i;
            }
        }
        let improves = scores[best + 1] > scores[0];
        Ok((improves || done < self.min_steps).then(|| outcomes.into_iter().nth(best).expect("index")))
    }
}

impl Policy for GreedyPolicy {
    fn name(&self) -> &str {
        "greedy"
    }

    fn needs_reference(&self) -> bool {
        true
    }

    fn decide(&mut self, ctx: &PolicyContext) -> Result<AgentAction> {
        let reference = ctx.reference(self.name())?;
        let reg = ctx.registry;
        match ctx.mode {
            Mode::StepWise => {
                let done = ctx.state.active_steps().len();
                let next = self.choose(
                    ctx.state.current(),
                    reference,
                    &ctx.remaining_tasks(),
                    ctx.state.banned(),
                    reg,
                    done,
                )?;
                Ok(next.map(|(s, _)| AgentAction::Step(s)).unwrap_or(AgentAction::Stop))
            }
            Mode::SingleShot => {
                let mut img = ctx.state.current().clone();
                let mut remaining = ctx.remaining_tasks();
                let mut plan = Vec::new();
                while let Some((s, out)) =
                    self.choose(&img, reference, &remaining, ctx.state.banned(), reg, plan.len())?
                {
                    remaining.remove(&s.task);
                    plan.push(s);
                    img = out;
                }
                Ok(pipeline_or_stop(plan))
            }
        }
    }
}

/// Exhaustive-search labeler. Single-shot answers the rank-1 decision over
/// the remaining tasks. Step-wise re-searches from the current image at
/// every step, scoring on the scale of the initial image's full table, and
/// stops once no remaining candidate beats the current image.
pub struct OraclePolicy {
    pub score: ScoreConfig,
    pub include_partial: bool,
    pub exec: Execution,
    frozen: Option<ZScoreStats>,
}

impl Default for OraclePolicy {
    fn default() -> Self {
        OraclePolicy::new(ScoreConfig::default())
    }
}

impl OraclePolicy {
    pub fn new(score: ScoreConfig) -> Self {
        OraclePolicy { score, include_partial: true, exec: Execution::default(), frozen: None }
    }

    fn frozen_stats(&mut self, ctx: &PolicyContext, reference: &ImageBuffer) -> Result<ZScoreStats> {
        if let Some(s) = &self.frozen {
            return Ok(s.clone());
        }
        let initial = ctx.state.initial();
        let space = enumerate_decisions(ctx.registry, ctx.tasks, self.include_partial)?;
        let res = search_space(initial, reference, &space, ctx.registry, &self.score, self.exec)?;
        let stats = match res.stats {
            Some(s) => s,
            None => {
                let pop = [self.score.report(initial, reference)?, res.best().report.clone().expect("succeeded")];
                ZScoreStats::from_population(&pop, &self.score)?
            }
        };
        self.frozen = Some(stats.clone());
        Ok(stats)
    }
}

impl Policy for OraclePolicy {
    fn name(&self) -> &str {
        "oracle"
    }

    fn needs_reference(&self) -> bool {
        true
    }

    fn reset(&mut self) {
        self.frozen = None;
    }

    fn decide(&mut self, ctx: &PolicyContext) -> Result<AgentAction> {
        let reference = ctx.reference(self.name())?;
        let remaining = ctx.remaining_tasks();
        if remaining.is_empty() {
            return Ok(AgentAction::Stop);
        }
        let space = enumerate_decisions(ctx.registry, &remaining, self.include_partial)?
            .without_steps(ctx.state.banned());
        if space.is_empty() {
            return Ok(AgentAction::Stop);
        }
        match ctx.mode {
            Mode::SingleShot => {
                let res = search_space(ctx.state.current(), reference, &space, ctx.registry, &self.score, self.exec)?;
                Ok(AgentAction::Pipeline(res.best().decision.clone()))
            }
            Mode::StepWise => {
                let stats = self.frozen_stats(ctx, reference)?;
                let res = search_space(ctx.state.current(), reference, &space, ctx.registry, &self.score, self.exec)?;
                let here = stats.score(&self.score.report(ctx.state.current(), reference)?)?;
                let mut best: Option<(f64, &PipelineDecision)> = None;
                for c in res.succeeded() {
                    let s = stats.score(c.report.as_ref().expect("succeeded"))?;
                    // the table is in decision order within ties, so `>` keeps the first
                    if best.is_none_or(|(b, _)| s > b) {
                        best = Some((s, &c.decision));
                    }
                }
                Ok(match best {
                    Some((s, d)) if s > here => AgentAction::Step(d.steps()[0].clone()),
                    _ => AgentAction::Stop,
                })
            }
        }
    }
}

/// Convenience: the rank-1 decision of a fresh oracle search.
pub fn oracle_decision(
    img: &ImageBuffer,
    reference: &ImageBuffer,
    tasks: &BTreeSet<TaskId>,
    reg: &ToolRegistry,
    score: &ScoreConfig,
) -> Result<PipelineDecision> {
    Ok(oracle_search(img, reference, tasks, reg, score, true)?.best().decision.clone())
}

/// A policy served by a long-lived subprocess speaking line-delimited JSON.
/// It never receives the reference image.
pub struct ExternalPolicy {
    process: LineProcess,
    dir: tempfile::TempDir,
    calls: usize,
}

impl ExternalPolicy {
    pub fn new(command: &str) -> Result<Self> {
        ExternalPolicy::with_timeout(command, DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(command: &str, timeout: Duration) -> Result<Self> {
        let argv = split_command(command);
        if argv.is_empty() {
            return Err(Error::Config("empty policy command".into()));
        }
        Ok(ExternalPolicy { process: LineProcess::new(argv, timeout), dir: tempfile::tempdir()?, calls: 0 })
    }

    /// The request object sent for `ctx`, with the image at `image`.
    pub fn request(ctx: &PolicyContext, image: &std::path::Path) -> Value {
        let available: Vec<Value> =
            ctx.available().into_iter().map(|(task, tools)| json!({"task": task, "tools": tools})).collect();
        json!({
            "image": image.to_string_lossy(),
            "prompt": format_prompt(ctx.state.history()),
            "history": ctx.state.history(),
            "available": available,
            "mode": ctx.mode,
        })
    }
}

impl Policy for ExternalPolicy {
    fn name(&self) -> &str {
        "external"
    }

    fn decide(&mut self, ctx: &PolicyContext) -> Result<AgentAction> {
        self.calls += 1;
        let path: PathBuf = self.dir.path().join(format!("state_{:04}.png", self.calls));
        save_image(ctx.state.current(), &path)?;
        let line = ExternalPolicy::request(ctx, &path).to_string();
        let resp = self.process.request(&line).map_err(Error::ExternalPolicyFailure)?;
        AgentAction::from_wire(&resp)
    }
}

/// Builds a policy from its CLI name: `random`, `fixed`, `greedy`, `oracle`
/// or `external:<command>`.
pub fn policy_by_name(name: &str, seed: u64, score: &ScoreConfig) -> Result<Box<dyn Policy>> {
    if let Some(cmd) = name.strip_prefix("external:") {
        return Ok(Box::new(ExternalPolicy::new(cmd)?));
    }
    Ok(match name {
        "random" => Box::new(RandomPolicy::new(seed)),
        "fixed" => Box::new(FixedPolicy::default()),
        "greedy" => Box::new(GreedyPolicy::new(score.clone())),
        "oracle" => Box::new(OraclePolicy::new(score.clone())),
        other => return Err(Error::Config(format!("unknown policy {other:?}"))),
    })
}
