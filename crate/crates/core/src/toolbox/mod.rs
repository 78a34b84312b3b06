//! Tool registry: the per-task pools of restoration operators.

pub mod builtin;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::degrade::TaskId;
use crate::error::{Error, Result};
use crate::image::{load_image, save_image, ImageBuffer};
use crate::provider::{run_with_timeout, split_command, DEFAULT_TIMEOUT};

pub use builtin::Builtin;

/// Environment variable naming a catalog JSON that replaces the default catalog.
pub const CATALOG_ENV: &str = "RESTORE_CATALOG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToolKind {
    Builtin,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolDescriptor {
    pub tool_id: String,
    pub task: TaskId,
    pub kind: ToolKind,
    pub display_name: String,
    /// Command template for external tools; `{input}` and `{output}` are
    /// replaced by PNG paths.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exec_spec: Option<String>,
    /// Builtin algorithm name; defaults to `tool_id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_secs: Option<u64>,
}

impl ToolDescriptor {
    pub fn builtin(tool_id: impl Into<String>, task: TaskId, display_name: impl Into<String>) -> Self {
        ToolDescriptor {
            tool_id: tool_id.into(),
            task,
            kind: ToolKind::Builtin,
            display_name: display_name.into(),
            exec_spec: None,
            builtin: None,
            timeout_secs: None,
        }
    }

    /// A builtin tool with its own id that runs an existing algorithm.
    pub fn builtin_alias(tool_id: impl Into<String>, task: TaskId, algorithm: Builtin) -> Self {
        let tool_id = tool_id.into();
        ToolDescriptor { builtin: Some(algorithm.name().into()), ..ToolDescriptor::builtin(tool_id.clone(), task, tool_id) }
    }

    pub fn external(tool_id: impl Into<String>, task: TaskId, exec_spec: impl Into<String>) -> Self {
        let tool_id = tool_id.into();
        ToolDescriptor {
            tool_id: tool_id.clone(),
            task,
            kind: ToolKind::External,
            display_name: tool_id,
            exec_spec: Some(exec_spec.into()),
            builtin: None,
            timeout_secs: None,
        }
    }

    fn algorithm(&self) -> Result<Builtin> {
        self.builtin.as_deref().unwrap_or(&self.tool_id).parse()
    }
}

#[derive(Debug, Clone)]
enum Runner {
    Builtin(Builtin),
    External { template: Vec<String>, timeout: Duration },
}

#[derive(Debug, Clone)]
struct Entry {
    desc: ToolDescriptor,
    runner: Runner,
}

/// Registered tools, in registration order. Frozen registries are read-only.
#[derive(Debug, Clone, Default)]
pub struct ToolRegistry {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
    frozen: bool,
}

impl ToolRegistry {
    pub fn new() -> Self {
        ToolRegistry::default()
    }

    pub fn register(&mut self, desc: ToolDescriptor) -> Result<()> {
        if self.frozen {
            return Err(Error::FrozenRegistry);
        }
        if self.index.contains_key(&desc.tool_id) {
            return Err(Error::DuplicateId(desc.tool_id));
        }
        if desc.tool_id.is_empty() || desc.tool_id.chars().any(|c| c.is_whitespace() || c == '.') {
            return Err(Error::Config(format!("invalid tool id {:?}", desc.tool_id)));
        }
        let runner = match desc.kind {
            ToolKind::Builtin => {
                let algo = desc.algorithm()?;
                if let Some(t) = algo.task() {
                    if t != desc.task {
                        return Err(Error::Config(format!(
                            "builtin {} restores {t}, not {}",
                            algo.name(),
                            desc.task
                        )));
                    }
                }
                Runner::Builtin(algo)
            }
            ToolKind::External => {
                let spec = desc
                    .exec_spec
                    .as_deref()
                    .ok_or_else(|| Error::Config(format!("external tool {} lacks exec_spec", desc.tool_id)))?;
                if !spec.contains("{input}") || !spec.contains("{output}") {
                    return Err(Error::Config("exec_spec must reference {input} and {output}".into()));
                }
                Runner::External {
                    template: split_command(spec),
                    timeout: desc.timeout_secs.map(Duration::from_secs).unwrap_or(DEFAULT_TIMEOUT),
                }
            }
        };
        self.index.insert(desc.tool_id.clone(), self.entries.len());
        self.entries.push(Entry { desc, runner });
        Ok(())
    }

    /// Builder-style registration.
    pub fn with(mut self, desc: ToolDescriptor) -> Result<Self> {
        self.register(desc)?;
        Ok(self)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, tool_id: &str) -> Option<&ToolDescriptor> {
        self.index.get(tool_id).map(|&i| &self.entries[i].desc)
    }

    pub fn descriptors(&self) -> impl Iterator<Item = &ToolDescriptor> {
        self.entries.iter().map(|e| &e.desc)
    }

    /// Tool ids for `task`, in registration order.
    pub fn tools_for(&self, task: TaskId) -> Vec<&str> {
        self.entries.iter().filter(|e| e.desc.task == task).map(|e| e.desc.tool_id.as_str()).collect()
    }

    pub fn tasks(&self) -> BTreeSet<TaskId> {
        self.entries.iter().map(|e| e.desc.task).collect()
    }

    /// Pool sizes for the given tasks; errors if any task has no tool.
    pub fn pools(&self, tasks: &BTreeSet<TaskId>) -> Result<BTreeMap<TaskId, usize>> {
        tasks
            .iter()
            .map(|&t| match self.tools_for(t).len() {
                0 => Err(Error::TaskWithoutTool(t.to_string())),
                n => Ok((t, n)),
            })
            .collect()
    }

    /// Runs one tool. Output has the input's dimensions and lies in `[0,1]`.
    pub fn run_tool(&self, tool_id: &str, img: &ImageBuffer) -> Result<ImageBuffer> {
        let entry = self
            .index
            .get(tool_id)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::UnknownTool(tool_id.to_string()))?;
        match &entry.runner {
            Runner::Builtin(b) => Ok(b.run(img)),
            Runner::External { template, timeout } => run_external(tool_id, template, *timeout, img),
        }
    }

    /// The nine-tool default pool; `with_desnow` adds the snow remover.
    pub fn default_catalog(with_desnow: bool) -> Self {
        let mut reg = ToolRegistry::new();
        let defaults = [
            (Builtin::DenoiseSmall, "Denoiser (low noise)"),
            (Builtin::DenoiseMedium, "Denoiser (medium noise)"),
            (Builtin::DenoiseStrong, "Denoiser (high noise)"),
            (Builtin::DejpegMild, "JPEG artifact remover (mild)"),
            (Builtin::DejpegSevere, "JPEG artifact remover (severe)"),
            (Builtin::DeblurDefault, "Motion deblur"),
            (Builtin::DerainDefault, "Rain streak remover"),
            (Builtin::DehazeDefault, "Dehazer"),
            (Builtin::LowlightDefault, "Low-light enhancer"),
        ];
        for (b, name) in defaults {
            reg.register(ToolDescriptor::builtin(b.name(), b.task().expect("task-bound"), name))
                .expect("default catalog is consistent");
        }
        if with_desnow {
            reg.register(ToolDescriptor::builtin(Builtin::DesnowDefault.name(), TaskId::Desnow, "Snow remover"))
                .expect("default catalog is consistent");
        }
        reg
    }

    /// Parses a catalog: a JSON list of tool descriptors. Not frozen.
    pub fn from_catalog_json(s: &str) -> Result<Self> {
        let descs: Vec<ToolDescriptor> = serde_json::from_str(s)?;
        let mut reg = ToolRegistry::new();
        for d in descs {
            reg.register(d)?;
        }
        Ok(reg)
    }

    pub fn load_catalog(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::FileMissing(path.to_path_buf()));
        }
        ToolRegistry::from_catalog_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_catalog_json(&self) -> Result<String> {
        let descs: Vec<&ToolDescriptor> = self.descriptors().collect();
        Ok(serde_json::to_string_pretty(&descs)?)
    }
}

fn run_external(tool_id: &str, template: &[String], timeout: Duration, img: &ImageBuffer) -> Result<ImageBuffer> {
    let fail = |msg: String| Error::ExternalToolFailure(format!("{tool_id}: {msg}"));
    let dir = tempfile::tempdir()?;
    let input = dir.path().join("input.png");
    let output = dir.path().join("output.png");
    save_image(img, &input)?;
    let argv: Vec<String> = template
        .iter()
        .map(|a| {
            a.replace("{input}", &input.to_string_lossy())
                .replace("{output}", &output.to_string_lossy())
        })
        .collect();
    let (status, stderr) = run_with_timeout(&argv, timeout).map_err(fail)?;
    if !status.success() {
        return Err(fail(format!("exit status {status}: {}", stderr.trim())));
    }
    let out = load_image(&output).map_err(|e| fail(format!("malformed output: {e}")))?;
    if !out.same_dims(img) {
        return Err(fail(format!(
            "output is {}x{}, expected {}x{}",
            out.width(),
            out.height(),
            img.width(),
            img.height()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::synthetic_scene;

    #[test]
    fn default_pool_sizes() {
        let reg = ToolRegistry::default_catalog(false);
        assert_eq!(reg.len(), 9);
        let sizes: BTreeMap<TaskId, usize> = reg.pools(&reg.tasks()).unwrap();
        let expect: BTreeMap<TaskId, usize> = [
            (TaskId::Denoise, 3),
            (TaskId::Dejpeg, 2),
            (TaskId::Deblur, 1),
            (TaskId::Derain, 1),
            (TaskId::Dehaze, 1),
            (TaskId::Lowlight, 1),
        ]
        .into();
        assert_eq!(sizes, expect);
        let with_snow = ToolRegistry::default_catalog(true);
        assert_eq!(with_snow.tools_for(TaskId::Desnow), vec!["desnow_default"]);
    }

    #[test]
    fn register_lookup_duplicate_frozen() {
        let mut reg = ToolRegistry::new();
        let d = ToolDescriptor::builtin("denoise_small", TaskId::Denoise, "small");
        reg.register(d.clone()).unwrap();
        assert_eq!(reg.get("denoise_small"), Some(&d));
        assert!(matches!(reg.register(d), Err(Error::DuplicateId(_))));
        reg.freeze();
        let snow = ToolDescriptor::builtin("desnow_default", TaskId::Desnow, "snow");
        assert!(matches!(reg.register(snow), Err(Error::FrozenRegistry)));
    }

    #[test]
    fn builtin_task_must_match() {
        let mut reg = ToolRegistry::new();
        let wrong = ToolDescriptor::builtin_alias("x", TaskId::Dehaze, Builtin::DenoiseSmall);
        assert!(reg.register(wrong).is_err());
        let ok = ToolDescriptor::builtin_alias("noop_haze", TaskId::Dehaze, Builtin::Identity);
        reg.register(ok).unwrap();
    }

    #[test]
    fn unknown_tool() {
        let reg = ToolRegistry::default_catalog(false);
        let img = synthetic_scene(16, 16, 0);
        assert!(matches!(reg.run_tool("nope", &img), Err(Error::UnknownTool(_))));
    }

    #[test]
    fn lowlight_brightens_constant() {
        let reg = ToolRegistry::default_catalog(false);
        let out = reg.run_tool("lowlight_default", &ImageBuffer::filled(32, 32, 0.25)).unwrap();
        assert!(out.mean() > 0.25);
    }

    #[test]
    fn builtin_runs_keep_dims_and_range() {
        let reg = ToolRegistry::default_catalog(true);
        let img = synthetic_scene(40, 24, 5);
        for d in reg.descriptors() {
            let out = reg.run_tool(&d.tool_id, &img).unwrap();
            assert!(out.same_dims(&img));
            let (lo, hi) = out.min_max();
            assert!(lo >= 0.0 && hi <= 1.0);
            assert_eq!(out, reg.run_tool(&d.tool_id, &img).unwrap(), "{} not deterministic", d.tool_id);
        }
    }

    #[test]
    fn catalog_json_round_trip() {
        let reg = ToolRegistry::default_catalog(true);
        let json = reg.to_catalog_json().unwrap();
        let back = ToolRegistry::from_catalog_json(&json).unwrap();
        assert_eq!(back.descriptors().collect::<Vec<_>>(), reg.descriptors().collect::<Vec<_>>());
        assert!(!back.is_frozen());
    }

    #[cfg(unix)]
    #[test]
    fn external_tool_copy_and_failures() {
        let img = synthetic_scene(16, 16, 3).quantized();
        let mut reg = ToolRegistry::new();
        reg.register(ToolDescriptor::external("copy", TaskId::Denoise, "cp {input} {output}")).unwrap();
        reg.register(ToolDescriptor::external("fails", TaskId::Denoise, "sh -c 'exit 3' {input} {output}"))
            .unwrap();
        reg.register(ToolDescriptor::external("silent", TaskId::Denoise, "true {input} {output}")).unwrap();
        let mut slow = ToolDescriptor::external("slow", TaskId::Denoise, "sleep 5 {input} {output}");
        slow.timeout_secs = Some(0);
        reg.register(slow).unwrap();
        assert_eq!(reg.run_tool("copy", &img).unwrap(), img);
        for id in ["fails", "silent", "slow"] {
            assert!(matches!(reg.run_tool(id, &img), Err(Error::ExternalToolFailure(_))), "{id}");
        }
        assert!(reg.register(ToolDescriptor::external("bad", TaskId::Denoise, "cp a b")).is_err());
    }
}
