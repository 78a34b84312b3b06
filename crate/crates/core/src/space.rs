//! Pipeline decision spaces and exhaustive oracle search.
//!
//! A decision is an ordered list of `(task, tool)` steps with no task
//! repeated. The space for a task set holds every such list (optionally only
//! the full-length ones); the empty pipeline is never a member.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::degrade::TaskId;
use crate::error::{Error, Result};
use crate::image::{save_image, ImageBuffer};
use crate::par::{self, Execution};
use crate::quality::{balanced_scores, ScoreConfig, ScoreReport, ZScoreStats};
use crate::toolbox::ToolRegistry;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Step {
    pub task: TaskId,
    pub tool: String,
}

impl Step {
    pub fn new(task: TaskId, tool: impl Into<String>) -> Self {
        Step { task, tool: tool.into() }
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.task, self.tool)
    }
}

/// Ordered restoration pipeline. Ordering is lexicographic over
/// `(task name, tool id)` with prefixes first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<Step>", into = "Vec<Step>")]
pub struct PipelineDecision {
    steps: Vec<Step>,
}

impl TryFrom<Vec<Step>> for PipelineDecision {
    type Error = Error;

    fn try_from(steps: Vec<Step>) -> Result<Self> {
        PipelineDecision::new(steps)
    }
}

impl From<PipelineDecision> for Vec<Step> {
    fn from(d: PipelineDecision) -> Self {
        d.steps
    }
}

impl PipelineDecision {
    pub fn new(steps: Vec<Step>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::EmptyPipeline);
        }
        let mut seen = BTreeSet::new();
        for s in &steps {
            if !seen.insert(s.task) {
                return Err(Error::InvalidDecision(format!("task {} repeats", s.task)));
            }
        }
        Ok(PipelineDecision { steps })
    }

    /// Convenience constructor from `(task, tool)` pairs.
    pub fn from_pairs<S: Into<String>>(pairs: impl IntoIterator<Item = (TaskId, S)>) -> Result<Self> {
        PipelineDecision::new(pairs.into_iter().map(|(t, s)| Step::new(t, s)).collect())
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn tasks(&self) -> Vec<TaskId> {
        self.steps.iter().map(|s| s.task).collect()
    }

    pub fn contains(&self, step: &Step) -> bool {
        self.steps.contains(step)
    }

    /// Checks every tool exists and belongs to its step's task.
    pub fn validate(&self, reg: &ToolRegistry) -> Result<()> {
        for s in &self.steps {
            let d = reg.get(&s.tool).ok_or_else(|| Error::UnknownTool(s.tool.clone()))?;
            if d.task != s.task {
                return Err(Error::InvalidDecision(format!("tool {} restores {}, not {}", s.tool, d.task, s.task)));
            }
        }
        Ok(())
    }
}

impl fmt::Display for PipelineDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.steps.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{}.{} {}.", i + 1, s.task, s.tool)?;
        }
        Ok(())
    }
}

fn factorial(n: usize) -> u64 {
    (1..=n as u64).product()
}

/// Number of decisions for the given pool sizes. With `include_partial`,
/// every non-empty task subset in every order counts; otherwise only
/// full-length orderings.
pub fn count_decisions<K: Ord>(pools: &BTreeMap<K, usize>, include_partial: bool) -> Result<u64> {
    if pools.is_empty() {
        return Err(Error::EmptyPools);
    }
    let sizes: Vec<u64> = pools.values().map(|&m| m as u64).collect();
    if sizes.contains(&0) {
        return Err(Error::Config("every pool needs at least one tool".into()));
    }
    let n = sizes.len();
    if !include_partial {
        return Ok(factorial(n) * sizes.iter().product::<u64>());
    }
    let mut total = 0u64;
    for mask in 1u32..(1 << n) {
        let k = mask.count_ones() as usize;
        let prod: u64 = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| sizes[i]).product();
        total += factorial(k) * prod;
    }
    Ok(total)
}

/// The enumerated candidates for one task set, sorted and duplicate-free.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionSpace {
    pub tasks: BTreeSet<TaskId>,
    pub pools: BTreeMap<TaskId, usize>,
    pub include_partial: bool,
    candidates: Vec<PipelineDecision>,
}

impl DecisionSpace {
    pub fn candidates(&self) -> &[PipelineDecision] {
        &self.candidates
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Sub-space keeping candidates that satisfy `keep`.
    pub fn filtered(&self, keep: impl Fn(&PipelineDecision) -> bool) -> DecisionSpace {
        DecisionSpace { candidates: self.candidates.iter().filter(|d| keep(d)).cloned().collect(), ..self.clone() }
    }

    /// Sub-space without any candidate that uses one of `banned`.
    pub fn without_steps(&self, banned: &BTreeSet<Step>) -> DecisionSpace {
        self.filtered(|d| !d.steps().iter().any(|s| banned.contains(s)))
    }
}

/// Enumerates every decision over `tasks` using the frozen registry's pools.
pub fn enumerate_decisions(reg: &ToolRegistry, tasks: &BTreeSet<TaskId>, include_partial: bool) -> Result<DecisionSpace> {
    if !reg.is_frozen() {
        return Err(Error::UnfrozenRegistry);
    }
    if tasks.is_empty() {
        return Err(Error::EmptyPools);
    }
    let pools = reg.pools(tasks)?;
    let options: Vec<(TaskId, Vec<String>)> = tasks
        .iter()
        .map(|&t| (t, reg.tools_for(t).into_iter().map(String::from).collect()))
        .collect();
    let mut out = Vec::new();
    let mut used = vec![false; options.len()];
    let mut cur = Vec::with_capacity(options.len());
    extend(&options, &mut used, &mut cur, include_partial, &mut out);
    out.sort();
    out.dedup();
    Ok(DecisionSpace { tasks: tasks.clone(), pools, include_partial, candidates: out })
}

fn extend(
    options: &[(TaskId, Vec<String>)],
    used: &mut [bool],
    cur: &mut Vec<Step>,
    include_partial: bool,
    out: &mut Vec<PipelineDecision>,
) {
    if !cur.is_empty() && (include_partial || cur.len() == options.len()) {
        out.push(PipelineDecision { steps: cur.clone() });
    }
    for i in 0..options.len() {
        if used[i] {
            continue;
        }
        used[i] = true;
        for tool in &options[i].1 {
            cur.push(Step::new(options[i].0, tool.clone()));
            extend(options, used, cur, include_partial, out);
            cur.pop();
        }
        used[i] = false;
    }
}

/// Runs the decision's tools in order.
pub fn execute_decision(img: &ImageBuffer, decision: &PipelineDecision, reg: &ToolRegistry) -> Result<ImageBuffer> {
    decision.steps().iter().try_fold(img.clone(), |acc, s| reg.run_tool(&s.tool, &acc))
}

/// Raw metric report of the decision's output against `reference`.
pub fn evaluate_candidate(
    img: &ImageBuffer,
    reference: &ImageBuffer,
    decision: &PipelineDecision,
    reg: &ToolRegistry,
    config: &ScoreConfig,
) -> Result<ScoreReport> {
    if !img.same_dims(reference) {
        return Err(Error::DimensionMismatch("input and reference differ in size".into()));
    }
    decision.validate(reg)?;
    let out = execute_decision(img, decision, reg)?;
    config.report(&out, reference)
}

#[derive(Debug, Clone)]
pub struct CandidateOutcome {
    pub decision: PipelineDecision,
    pub restored: Option<Arc<ImageBuffer>>,
    pub report: Option<ScoreReport>,
    /// `None` for failed candidates, which are excluded from ranking.
    pub rank: Option<usize>,
    pub error: Option<String>,
}

impl CandidateOutcome {
    pub fn balanced(&self) -> Option<f64> {
        self.report.as_ref().and_then(|r| r.balanced)
    }

    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

/// Result of an exhaustive search: the table sorted by rank (ties and
/// failures ordered by decision), failures last.
#[derive(Debug, Clone)]
pub struct OracleResult {
    pub table: Vec<CandidateOutcome>,
    /// Standardisation of the successful population; `None` below two members.
    pub stats: Option<ZScoreStats>,
}

impl OracleResult {
    pub fn best(&self) -> &CandidateOutcome {
        &self.table[0]
    }

    pub fn space_size(&self) -> usize {
        self.table.len()
    }

    pub fn succeeded(&self) -> impl Iterator<Item = &CandidateOutcome> {
        self.table.iter().filter(|c| !c.failed())
    }

    pub fn find(&self, decision: &PipelineDecision) -> Option<&CandidateOutcome> {
        self.table.iter().find(|c| &c.decision == decision)
    }

    /// Balanced score of an arbitrary report on this table's scale.
    pub fn score(&self, report: &ScoreReport) -> Result<f64> {
        match &self.stats {
            Some(s) => s.score(report),
            None => Ok(0.0),
        }
    }
}

/// Images for every distinct prefix of the candidates, computed level by
/// level so shared prefixes run once.
fn prefix_images(
    img: &ImageBuffer,
    candidates: &[PipelineDecision],
    reg: &ToolRegistry,
    exec: Execution,
) -> HashMap<Vec<Step>, Result<Arc<ImageBuffer>, String>> {
    let mut cache: HashMap<Vec<Step>, Result<Arc<ImageBuffer>, String>> = HashMap::new();
    let root = Arc::new(img.clone());
    let max_len = candidates.iter().map(PipelineDecision::len).max().unwrap_or(0);
    for len in 1..=max_len {
        let level: BTreeSet<&[Step]> =
            candidates.iter().filter(|d| d.len() >= len).map(|d| &d.steps[..len]).collect();
        let level: Vec<&[Step]> = level.into_iter().collect();
        let results = par::map(exec, &level, |prefix| {
            let parent = if len == 1 {
                Ok(root.clone())
            } else {
                cache[&prefix[..len - 1]].clone()
            };
            let last = &prefix[len - 1];
            parent.and_then(|p| reg.run_tool(&last.tool, &p).map(Arc::new).map_err(|e| e.to_string()))
        });
        for (prefix, r) in level.into_iter().zip(results) {
            cache.insert(prefix.to_vec(), r);
        }
    }
    cache
}

/// Exhaustive search over an explicit space.
pub fn search_space(
    img: &ImageBuffer,
    reference: &ImageBuffer,
    space: &DecisionSpace,
    reg: &ToolRegistry,
    config: &ScoreConfig,
    exec: Execution,
) -> Result<OracleResult> {
    if space.is_empty() {
        return Err(Error::EmptySpace);
    }
    if !img.same_dims(reference) {
        return Err(Error::DimensionMismatch("input and reference differ in size".into()));
    }
    for d in space.candidates() {
        d.validate(reg)?;
    }
    let images = prefix_images(img, space.candidates(), reg, exec);
    let mut table: Vec<CandidateOutcome> = par::map(exec, space.candidates(), |d| {
        let (restored, report, error) = match &images[d.steps()] {
            Ok(im) => match config.report(im, reference) {
                Ok(r) => (Some(im.clone()), Some(r), None),
                Err(e) => (Some(im.clone()), None, Some(e.to_string())),
            },
            Err(e) => (None, None, Some(e.clone())),
        };
        CandidateOutcome { decision: d.clone(), restored, report, rank: None, error }
    });
    for c in table.iter().filter(|c| c.failed()) {
        log::warn!("candidate {} failed: {}", c.decision, c.error.as_deref().unwrap_or(""));
    }
    let ok: Vec<usize> = (0..table.len()).filter(|&i| !table[i].failed()).collect();
    if ok.is_empty() {
        let first = table[0].error.clone().unwrap_or_default();
        return Err(Error::ExternalToolFailure(format!("every candidate failed; first error: {first}")));
    }
    let reports: Vec<ScoreReport> = ok.iter().map(|&i| table[i].report.clone().expect("succeeded")).collect();
    let (scores, stats) = if reports.len() >= 2 {
        (balanced_scores(&reports, config)?, Some(ZScoreStats::from_population(&reports, config)?))
    } else {
        (vec![0.0], None)
    };
    for (&i, &s) in ok.iter().zip(&scores) {
        table[i].report.as_mut().expect("succeeded").balanced = Some(s);
    }
    for &i in &ok {
        let s = scores[ok.iter().position(|&j| j == i).expect("member")];
        table[i].rank = Some(1 + scores.iter().filter(|&&o| o > s).count());
    }
    table.sort_by(|a, b| match (a.balanced(), b.balanced()) {
        (Some(x), Some(y)) => y.total_cmp(&x).then_with(|| a.decision.cmp(&b.decision)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.decision.cmp(&b.decision),
    });
    Ok(OracleResult { table, stats })
}

/// Enumerates the space for `tasks` and searches it.
pub fn oracle_search(
    img: &ImageBuffer,
    reference: &ImageBuffer,
    tasks: &BTreeSet<TaskId>,
    reg: &ToolRegistry,
    config: &ScoreConfig,
    include_partial: bool,
) -> Result<OracleResult> {
    let space = enumerate_decisions(reg, tasks, include_partial)?;
    search_space(img, reference, &space, reg, config, Execution::default())
}

/// `1 + |{c : S(c) > S(decision)}|` within the table's successful candidates.
pub fn rank_of(decision: &PipelineDecision, table: &[CandidateOutcome]) -> Result<usize> {
    let own = table
        .iter()
        .find(|c| &c.decision == decision)
        .and_then(CandidateOutcome::balanced)
        .ok_or_else(|| Error::DecisionNotInSpace(decision.to_string()))?;
    Ok(1 + table.iter().filter_map(CandidateOutcome::balanced).filter(|&s| s > own).count())
}

#[derive(Serialize)]
struct TableLine<'a> {
    decision: &'a PipelineDecision,
    pipeline: String,
    metrics: Option<&'a BTreeMap<String, f64>>,
    balanced: Option<f64>,
    rank: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    image: Option<String>,
}

/// Writes one JSON object per candidate. When `image_dir` is given each
/// restored image is saved there and referenced by path.
pub fn write_table_jsonl(table: &[CandidateOutcome], path: impl AsRef<Path>, image_dir: Option<&Path>) -> Result<()> {
    if let Some(dir) = image_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (i, c) in table.iter().enumerate() {
        let image = match (image_dir, &c.restored) {
            (Some(dir), Some(img)) => {
                let p = dir.join(format!("candidate_{i:04}.png"));
                save_image(img, &p)?;
                Some(p.to_string_lossy().into_owned())
            }
            _ => None,
        };
        let line = TableLine {
            decision: &c.decision,
            pipeline: c.decision.to_string(),
            metrics: c.report.as_ref().map(|r| &r.values),
            balanced: c.balanced(),
            rank: c.rank,
            error: c.error.as_deref(),
            image,
        };
        serde_json::to_writer(&mut f, &line)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toolbox::{Builtin, ToolDescriptor};

    fn pools(sizes: &[(TaskId, usize)]) -> BTreeMap<TaskId, usize> {
        sizes.iter().copied().collect()
    }

    #[test]
    fn closed_form_counts() {
        use TaskId::*;
        assert_eq!(count_decisions(&pools(&[(Denoise, 3), (Dejpeg, 2)]), true).unwrap(), 17);
        assert_eq!(count_decisions(&pools(&[(Lowlight, 1), (Denoise, 3)]), true).unwrap(), 10);
        assert_eq!(count_decisions(&pools(&[(Deblur, 1), (Denoise, 3), (Dejpeg, 2)]), true).unwrap(), 64);
        assert_eq!(
            count_decisions(&pools(&[(Dehaze, 1), (Derain, 1), (Denoise, 3), (Dejpeg, 2)]), true).unwrap(),
            287
        );
        assert_eq!(count_decisions(&pools(&[(Denoise, 3), (Dejpeg, 3), (Deblur, 3)]), false).unwrap(), 162);
        assert_eq!(
            count_decisions(&pools(&[(Denoise, 1), (Dejpeg, 1), (Deblur, 1), (Dehaze, 1)]), false).unwrap(),
            24
        );
        assert_eq!(count_decisions(&pools(&[(Denoise, 4)]), true).unwrap(), 4);
        assert!(matches!(count_decisions(&BTreeMap::<TaskId, usize>::new(), true), Err(Error::EmptyPools)));
    }

    #[test]
    fn enumeration_matches_and_is_sorted() {
        let reg = ToolRegistry::default_catalog(false).frozen();
        let one = enumerate_decisions(&reg, &[TaskId::Denoise].into(), true).unwrap();
        assert_eq!(one.len(), 3);
        let two = enumerate_decisions(&reg, &[TaskId::Denoise, TaskId::Dejpeg].into(), true).unwrap();
        assert_eq!(two.len(), 17);
        assert!(two.candidates().windows(2).all(|w| w[0] < w[1]));
        let full = enumerate_decisions(&reg, &[TaskId::Denoise, TaskId::Dejpeg].into(), false).unwrap();
        assert_eq!(full.len(), 12);
        assert!(full.candidates().iter().all(|d| d.len() == 2));
    }

    #[test]
    fn enumeration_requires_frozen_and_tools() {
        let reg = ToolRegistry::default_catalog(false);
        assert!(matches!(
            enumerate_decisions(&reg, &[TaskId::Denoise].into(), true),
            Err(Error::UnfrozenRegistry)
        ));
        let reg = reg.frozen();
        assert!(matches!(
            enumerate_decisions(&reg, &[TaskId::Desnow].into(), true),
            Err(Error::TaskWithoutTool(_))
        ));
    }

    #[test]
    fn decision_invariants() {
        assert!(matches!(PipelineDecision::new(vec![]), Err(Error::EmptyPipeline)));
        assert!(PipelineDecision::from_pairs([(TaskId::Denoise, "a"), (TaskId::Denoise, "b")]).is_err());
        let reg = ToolRegistry::default_catalog(false);
        let wrong = PipelineDecision::from_pairs([(TaskId::Dejpeg, "denoise_small")]).unwrap();
        assert!(wrong.validate(&reg).is_err());
        let d = PipelineDecision::from_pairs([(TaskId::Denoise, "denoise_strong"), (TaskId::Dejpeg, "dejpeg_severe")])
            .unwrap();
        assert_eq!(d.to_string(), "1.denoise denoise_strong. 2.dejpeg dejpeg_severe.");
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(serde_json::from_str::<PipelineDecision>(&json).unwrap(), d);
    }

    #[test]
    fn ties_share_rank() {
        let reg = ToolRegistry::new()
            .with(ToolDescriptor::builtin_alias("twin_a", TaskId::Denoise, Builtin::Identity))
            .unwrap()
            .with(ToolDescriptor::builtin_alias("twin_b", TaskId::Denoise, Builtin::Identity))
            .unwrap()
            .with(ToolDescriptor::builtin_alias("real", TaskId::Denoise, Builtin::DenoiseStrong))
            .unwrap()
            .frozen();
        let clean = crate::scene::synthetic_scene(32, 32, 4);
        let noisy = crate::degrade::apply_step(
            &clean,
            &crate::degrade::DegradationStep::new(crate::degrade::StepParams::Denoise { sigma: 40.0 }, 1),
        )
        .unwrap();
        let res = oracle_search(&noisy, &clean, &[TaskId::Denoise].into(), &reg, &ScoreConfig::default(), true)
            .unwrap();
        let a = PipelineDecision::from_pairs([(TaskId::Denoise, "twin_a")]).unwrap();
        let b = PipelineDecision::from_pairs([(TaskId::Denoise, "twin_b")]).unwrap();
        assert_eq!(res.best().decision.steps()[0].tool, "real");
        assert_eq!(rank_of(&a, &res.table).unwrap(), 2);
        assert_eq!(rank_of(&b, &res.table).unwrap(), 2);
        // tie broken lexicographically in the table
        assert_eq!(res.table[1].decision, a);
        let missing = PipelineDecision::from_pairs([(TaskId::Dehaze, "x")]).unwrap();
        assert!(matches!(rank_of(&missing, &res.table), Err(Error::DecisionNotInSpace(_))));
    }

    #[test]
    fn single_candidate_space_is_rank_one() {
        let reg = ToolRegistry::default_catalog(false).frozen();
        let clean = crate::scene::synthetic_scene(24, 24, 1);
        let res =
            oracle_search(&clean, &clean, &[TaskId::Dehaze].into(), &reg, &ScoreConfig::default(), true).unwrap();
        assert_eq!(res.table.len(), 1);
        assert_eq!(res.best().rank, Some(1));
    }
}
