#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use restore_core::degrade::{mix_seed, sample_recipe, Profile};
use restore_core::quality::{psnr, ssim};
use restore_core::scene::synthetic_scene;
use restore_core::space::Step;
use restore_core::{apply_recipe, ImageBuffer, PipelineDecision, TaskId, ToolRegistry};

pub fn registry() -> ToolRegistry {
    ToolRegistry::default_catalog(false).frozen()
}

pub fn tasks(names: &[&str]) -> BTreeSet<TaskId> {
    names.iter().map(|n| TaskId::from_any_name(n).unwrap()).collect()
}

/// (reference, degraded), both on the 8-bit grid.
pub fn fixture(seed: u64, tasks: &BTreeSet<TaskId>, size: usize) -> (ImageBuffer, ImageBuffer) {
    let reference = synthetic_scene(size, size, seed).quantized();
    let recipe = sample_recipe(tasks, mix_seed(seed, 7), Profile::Mixed).unwrap();
    let degraded = apply_recipe(&reference, &recipe).unwrap().quantized();
    (reference, degraded)
}

/// Every ordered selection of distinct tasks with one tool each, built
/// with plain nested recursion.
pub fn naive_decisions(reg: &ToolRegistry, tasks: &BTreeSet<TaskId>, partial: bool) -> Vec<Vec<Step>> {
    fn grow(reg: &ToolRegistry, tasks: &[TaskId], prefix: &mut Vec<Step>, out: &mut Vec<Vec<Step>>, partial: bool) {
        if !prefix.is_empty() && (partial || prefix.len() == tasks.len()) {
            out.push(prefix.clone());
        }
        for &t in tasks {
            if prefix.iter().any(|s| s.task == t) {
                continue;
            }
            for tool in reg.tools_for(t) {
                prefix.push(Step { task: t, tool: tool.to_string() });
                grow(reg, tasks, prefix, out, partial);
                prefix.pop();
            }
        }
    }
    let list: Vec<TaskId> = tasks.iter().copied().collect();
    let mut out = Vec::new();
    grow(reg, &list, &mut Vec::new(), &mut out, partial);
    out
}

/// Brute-force oracle: runs every decision from scratch, standardises PSNR
/// and SSIM by hand and returns (decision, balanced) in enumeration order.
pub fn naive_oracle(
    img: &ImageBuffer,
    reference: &ImageBuffer,
    reg: &ToolRegistry,
    tasks: &BTreeSet<TaskId>,
) -> Vec<(PipelineDecision, f64)> {
    let decisions = naive_decisions(reg, tasks, true);
    let mut p = Vec::new();
    let mut s = Vec::new();
    for d in &decisions {
        let mut cur = img.clone();
        for step in d {
            cur = reg.run_tool(&step.tool, &cur).unwrap();
        }
        p.push(psnr(&cur, reference).unwrap());
        s.push(ssim(&cur, reference).unwrap());
    }
    let z = |v: &[f64]| -> Vec<f64> {
        let n = v.len() as f64;
        let mu = v.iter().sum::<f64>() / n;
        let sd = (v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n).sqrt();
        v.iter().map(|x| if sd > 0.0 { (x - mu) / sd } else { 0.0 }).collect()
    };
    let (zp, zs) = (z(&p), z(&s));
    decisions
        .into_iter()
        .enumerate()
        .map(|(i, d)| (PipelineDecision::new(d).unwrap(), zp[i] + zs[i]))
        .collect()
}

/// Best entry of a naive table; ties go to the lexicographically smaller
/// decision.
pub fn naive_best(table: &[(PipelineDecision, f64)]) -> (PipelineDecision, f64) {
    let mut best = table[0].clone();
    for (d, s) in &table[1..] {
        if *s > best.1 || (*s == best.1 && *d < best.0) {
            best = (d.clone(), *s);
        }
    }
    best
}

pub fn python() -> Option<String> {
    ["python3", "python"]
        .into_iter()
        .find(|p| std::process::Command::new(p).arg("-c").arg("pass").output().is_ok_and(|o| o.status.success()))
        .map(String::from)
}

pub fn write_script(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

/// Policy provider: fixed priority, middle tool of each pool.
pub const ECHO_POLICY: &str = r#"
import json, math, sys
PRIORITY = ["lowlight", "dehaze", "derain", "desnow", "deblur", "denoise", "dejpeg"]
for line in sys.stdin:
    req = json.loads(line)
    avail = sorted(req["available"], key=lambda a: PRIORITY.index(a["task"]))
    if not avail:
        out = {"action": "stop", "steps": []}
    else:
        steps = [{"task": a["task"], "tool": a["tools"][math.ceil(len(a["tools"]) / 2) - 1]} for a in avail]
        if req["mode"] == "step-wise":
            out = {"action": "step", "steps": steps[:1]}
        else:
            out = {"action": "pipeline", "steps": steps}
    print(json.dumps(out), flush=True)
"#;

/// Tool provider: copies its input.
pub const IDENTITY_TOOL: &str = r#"
import shutil, sys
try:
    shutil.copyfile(sys.argv[1], sys.argv[2])
except OSError as e:
    print(e, file=sys.stderr)
    sys.exit(1)
"#;

/// Metric provider: mean squared error over 8-bit RGB PNGs.
pub const MSE_METRIC: &str = r#"
import json, sys
from PIL import Image
for line in sys.stdin:
    req = json.loads(line)
    a = Image.open(req["restored"]).convert("RGB").tobytes()
    b = Image.open(req["reference"]).convert("RGB").tobytes()
    v = sum((x - y) ** 2 for x, y in zip(a, b)) / (len(a) * 255.0 * 255.0)
    print(json.dumps({"value": v}), flush=True)
"#;

/// Outcome of re-checking a training-pair file from its saved assets.
#[derive(Debug, Default)]
pub struct PairCheck {
    pub per_scenario: [usize; 5],
    pub failures: Vec<String>,
}

/// Re-derives every label in `jsonl` from the PNGs it references, without
/// reusing the generator's intermediate results.
pub fn verify_pairs(jsonl: &Path, reg: &ToolRegistry, delta: f64, epsilon: f64) -> PairCheck {
    use restore_core::agent::{AgentAction, EntryKind};
    use restore_core::forge::{format_prompt, format_response, parse_prompt, parse_response, TrainingPair};
    use restore_core::space::{enumerate_decisions, rank_of, search_space};
    use restore_core::{load_image, Execution, ScoreConfig};

    let score = ScoreConfig::default();
    let mut out = PairCheck::default();
    let text = std::fs::read_to_string(jsonl).unwrap();
    for (n, line) in text.lines().enumerate() {
        let pair: TrainingPair = serde_json::from_str(line).unwrap();
        let mut fail = |msg: String| out.failures.push(format!("line {n} S{}: {msg}", pair.scenario));
        out.per_scenario[pair.scenario as usize - 1] += 1;
        let history = match parse_prompt(&pair.prompt) {
            Ok(h) => h,
            Err(e) => {
                fail(format!("prompt does not parse: {e}"));
                continue;
            }
        };
        let action = match parse_response(&pair.response) {
            Ok(a) => a,
            Err(e) => {
                fail(format!("response does not parse: {e}"));
                continue;
            }
        };
        if format_prompt(&history) != pair.prompt || format_response(&action).unwrap() != pair.response {
            fail("grammar round trip changed the text".into());
        }
        let image = load_image(&pair.image).unwrap();
        let reference = load_image(&pair.meta.reference).unwrap();
        let degraded = load_image(&pair.meta.degraded).unwrap();
        let all_tasks = pair.meta.recipe.tasks();
        match (pair.scenario, &action) {
            (1 | 2 | 4, AgentAction::Pipeline(d)) => {
                let banned: BTreeSet<Step> = pair.meta.banned.iter().cloned().collect();
                if pair.scenario == 4 {
                    let rolled: BTreeSet<Step> =
                        history.iter().filter(|e| e.kind == EntryKind::RolledBack).map(|e| e.step()).collect();
                    if rolled != banned || banned.is_empty() {
                        fail("rolled-back history does not match the banned steps".into());
                    }
                }
                let space = enumerate_decisions(reg, &pair.meta.tasks, true).unwrap().without_steps(&banned);
                let res = search_space(&image, &reference, &space, reg, &score, Execution::default()).unwrap();
                match rank_of(d, &res.table) {
                    Ok(1) => {}
                    Ok(r) => fail(format!("{d} re-ranks at {r}")),
                    Err(e) => fail(format!("{d}: {e}")),
                }
            }
            (3, AgentAction::Rollback) => {
                let Some(last) = history.last().filter(|e| e.kind == EntryKind::Executed) else {
                    fail("no executed step to roll back".into());
                    continue;
                };
                let step = last.step();
                let space = enumerate_decisions(reg, &all_tasks, true).unwrap();
                let res = search_space(&degraded, &reference, &space, reg, &score, Execution::default()).unwrap();
                let top = res.best().balanced().unwrap();
                let after = res
                    .succeeded()
                    .filter(|c| c.decision.steps()[0] == step)
                    .map(|c| c.balanced().unwrap())
                    .fold(f64::NEG_INFINITY, f64::max);
                if !(after < top - delta) {
                    fail(format!("{step}: best continuation {after:.3} within {delta} of {top:.3}"));
                }
                let state = reg.run_tool(&step.tool, &degraded).unwrap().quantized();
                if state != image {
                    fail("saved image is not the rolled-back step's output".into());
                }
            }
            (5, AgentAction::Stop) => {
                let space = enumerate_decisions(reg, &all_tasks, true).unwrap();
                let res = search_space(&degraded, &reference, &space, reg, &score, Execution::default()).unwrap();
                let stats = res.stats.clone().unwrap();
                let here = stats.score(&score.report(&image, &reference).unwrap()).unwrap();
                for &t in &pair.meta.tasks {
                    for tool in reg.tools_for(t) {
                        let next = reg.run_tool(tool, &image).unwrap();
                        let s = stats.score(&score.report(&next, &reference).unwrap()).unwrap();
                        if s - here > epsilon {
                            fail(format!("{t} {tool} improves the stop state by {:.3}", s - here));
                        }
                    }
                }
            }
            (s, a) => fail(format!("scenario {s} carries {a:?}")),
        }
    }
    out
}
