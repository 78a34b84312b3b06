//! Reproducible synthesis of degradations onto clean images.
//!
//! Every stochastic step draws from its own ChaCha stream keyed by the step
//! seed, so a recipe re-derives bit-identically no matter where or in what
//! order it is evaluated.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{convolve, motion_kernel, Plane};
use crate::image::{ImageBuffer, CHANNELS};

/// Maximum number of degradations in one recipe.
pub const MAX_RECIPE_STEPS: usize = 4;

/// Degradation family / restoration task. Declared in name order so the
/// derived ordering is lexicographic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskId {
    Deblur,
    Dehaze,
    Dejpeg,
    Denoise,
    Derain,
    Desnow,
    Lowlight,
}

impl TaskId {
    pub const ALL: [TaskId; 7] = [
        TaskId::Deblur,
        TaskId::Dehaze,
        TaskId::Dejpeg,
        TaskId::Denoise,
        TaskId::Derain,
        TaskId::Desnow,
        TaskId::Lowlight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Deblur => "deblur",
            TaskId::Dehaze => "dehaze",
            TaskId::Dejpeg => "dejpeg",
            TaskId::Denoise => "denoise",
            TaskId::Derain => "derain",
            TaskId::Desnow => "desnow",
            TaskId::Lowlight => "lowlight",
        }
    }

    /// Position in the synthesis order: capture-side effects first, codec last.
    /// The degradation this task removes, e.g. `noise` for `denoise`.
    pub fn degradation(self) -> &'static str {
        match self {
            TaskId::Deblur => "blur",
            TaskId::Dehaze => "haze",
            TaskId::Dejpeg => "jpeg",
            TaskId::Denoise => "noise",
            TaskId::Derain => "rain",
            TaskId::Desnow => "snow",
            TaskId::Lowlight => "lowlight",
        }
    }

    /// Accepts a task name or a degradation name.
    pub fn from_any_name(s: &str) -> Result<TaskId> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.name() == s || t.degradation() == s)
            .ok_or_else(|| Error::UnknownTask(s.to_string()))
    }

    pub fn synthesis_rank(self) -> u8 {
        match self {
            TaskId::Lowlight => 0,
            TaskId::Dehaze => 1,
            TaskId::Derain => 2,
            TaskId::Desnow => 3,
            TaskId::Deblur => 4,
            TaskId::Denoise => 5,
            TaskId::Dejpeg => 6,
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnknownTask(s.to_string()))
    }
}

/// Parses a comma-separated task list such as `denoise,dejpeg`.
pub fn parse_task_list(s: &str) -> Result<BTreeSet<TaskId>> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(TaskId::from_str).collect()
}

/// Per-task synthesis parameters. Intensities-as-noise (`sigma`) are on the 0–255 scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", content = "params", rename_all = "lowercase")]
pub enum StepParams {
    Denoise { sigma: f64 },
    Dejpeg { quality: u8 },
    Deblur { length: u32, angle: f64 },
    Derain { density: f64, length: f64, angle: f64, intensity: f64 },
    Dehaze { transmission: f64, airlight: f64 },
    Lowlight { scale: f64, gamma: f64, sigma: f64 },
    Desnow { density: f64, radius_min: f64, radius_max: f64 },
}

impl StepParams {
    pub fn task(&self) -> TaskId {
        match self {
            StepParams::Denoise { .. } => TaskId::Denoise,
            StepParams::Dejpeg { .. } => TaskId::Dejpeg,
            StepParams::Deblur { .. } => TaskId::Deblur,
            StepParams::Derain { .. } => TaskId::Derain,
            StepParams::Dehaze { .. } => TaskId::Dehaze,
            StepParams::Lowlight { .. } => TaskId::Lowlight,
            StepParams::Desnow { .. } => TaskId::Desnow,
        }
    }

    /// Checks the admissible domain of each parameter (wider than any profile).
    pub fn validate(&self) -> Result<()> {
        fn within(name: &str, v: f64, lo: f64, hi: f64) -> Result<()> {
            if v.is_finite() && (lo..=hi).contains(&v) {
                Ok(())
            } else {
                Err(Error::ParamOutOfRange(format!("{name}={v} not in [{lo}, {hi}]")))
            }
        }
        match *self {
            StepParams::Denoise { sigma } => within("sigma", sigma, 0.0, 255.0),
            StepParams::Dejpeg { quality } => within("quality", quality as f64, 1.0, 100.0),
            StepParams::Deblur { length, angle } => {
                within("length", length as f64, 1.0, 64.0)?;
                within("angle", angle, -10.0, 10.0)
            }
            StepParams::Derain { density, length, angle, intensity } => {
                within("density", density, 0.0, 10_000.0)?;
                within("length", length, 1.0, 200.0)?;
                within("angle", angle, -10.0, 10.0)?;
                within("intensity", intensity, 0.0, 1.0)
            }
            StepParams::Dehaze { transmission, airlight } => {
                within("transmission", transmission, 0.0, 1.0)?;
                within("airlight", airlight, 0.0, 1.0)
            }
            StepParams::Lowlight { scale, gamma, sigma } => {
                within("scale", scale, 1e-3, 1.0)?;
                within("gamma", gamma, 1.0, 5.0)?;
                within("sigma", sigma, 0.0, 255.0)
            }
            StepParams::Desnow { density, radius_min, radius_max } => {
                within("density", density, 0.0, 10_000.0)?;
                within("radius_min", radius_min, 0.5, 16.0)?;
                within("radius_max", radius_max, radius_min, 16.0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationStep {
    #[serde(flatten)]
    pub params: StepParams,
    pub seed: u64,
}

impl DegradationStep {
    pub fn new(params: StepParams, seed: u64) -> Self {
        DegradationStep { params, seed }
    }

    pub fn task(&self) -> TaskId {
        self.params.task()
    }
}

/// Ordered list of 1–4 degradation steps with distinct tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRecipe")]
pub struct DegradationRecipe {
    pub source_id: String,
    steps: Vec<DegradationStep>,
}

#[derive(Deserialize)]
struct RawRecipe {
    source_id: String,
    steps: Vec<DegradationStep>,
}

impl TryFrom<RawRecipe> for DegradationRecipe {
    type Error = Error;

    fn try_from(raw: RawRecipe) -> Result<Self> {
        DegradationRecipe::new(raw.source_id, raw.steps)
    }
}

impl DegradationRecipe {
    pub fn new(source_id: impl Into<String>, steps: Vec<DegradationStep>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::InvalidRecipe("recipe has no steps".into()));
        }
        if steps.len() > MAX_RECIPE_STEPS {
            return Err(Error::TooManyTasks(steps.len()));
        }
        let mut seen = BTreeSet::new();
        for s in &steps {
            if !seen.insert(s.task()) {
                return Err(Error::InvalidRecipe(format!("task {} appears twice", s.task())));
            }
            s.params.validate()?;
        }
        Ok(DegradationRecipe { source_id: source_id.into(), steps })
    }

    pub fn steps(&self) -> &[DegradationStep] {
        &self.steps
    }

    pub fn tasks(&self) -> BTreeSet<TaskId> {
        self.steps.iter().map(DegradationStep::task).collect()
    }

    pub fn with_source(mut self, source_id: impl Into<String>) -> Self {
        self.source_id = source_id.into();
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Applies one degradation, returning a new image.
pub fn apply_step(img: &ImageBuffer, step: &DegradationStep) -> Result<ImageBuffer> {
    step.params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(step.seed);
    let out = match step.params {
        StepParams::Denoise { sigma } => add_gaussian_noise(img, sigma, &mut rng),
        StepParams::Dejpeg { quality } => jpeg_round_trip(img, quality)?,
        StepParams::Deblur { length, angle } => motion_blur(img, length as f64, angle),
        StepParams::Derain { density, length, angle, intensity } => {
            add_rain(img, density, length, angle, intensity, &mut rng)
        }
        StepParams::Dehaze { transmission, airlight } => {
            let (t, a) = (transmission as f32, airlight as f32);
            img.map(|v| v * t + a * (1.0 - t))
        }
        StepParams::Lowlight { scale, gamma, sigma } => {
            let (s, g) = (scale as f32, gamma as f32);
            let dark = img.map(|v| (v * s).powf(g));
            add_gaussian_noise(&dark, sigma, &mut rng)
        }
        StepParams::Desnow { density, radius_min, radius_max } => {
            add_snow(img, density, radius_min, radius_max, &mut rng)
        }
    };
    debug_assert!({
        let (lo, hi) = out.min_max();
        lo >= 0.0 && hi <= 1.0
    });
    Ok(out)
}

/// Folds [`apply_step`] over the recipe in order.
pub fn apply_recipe(img: &ImageBuffer, recipe: &DegradationRecipe) -> Result<ImageBuffer> {
    recipe.steps.iter().try_fold(img.clone(), |acc, step| apply_step(&acc, step))
}

fn add_gaussian_noise(img: &ImageBuffer, sigma: f64, rng: &mut ChaCha8Rng) -> ImageBuffer {
    if sigma == 0.0 {
        return img.clone();
    }
    let normal = Normal::new(0.0, sigma / 255.0).expect("finite sigma");
    let data = img.data().iter().map(|&v| v + normal.sample(rng) as f32).collect();
    ImageBuffer::from_vec_clamped(img.width(), img.height(), data).expect("same dims")
}

/// Baseline JPEG encode/decode at `quality` with 4:2:0 chroma subsampling.
pub fn jpeg_round_trip(img: &ImageBuffer, quality: u8) -> Result<ImageBuffer> {
    let (w, h) = (img.width(), img.height());
    if w > u16::MAX as usize || h > u16::MAX as usize {
        return Err(Error::ParamOutOfRange("image too large for JPEG".into()));
    }
    let bytes = img.to_bytes();
    let mut encoded = Vec::new();
    let mut enc = jpeg_encoder::Encoder::new(&mut encoded, quality);
    enc.set_sampling_factor(jpeg_encoder::SamplingFactor::R_4_2_0);
    enc.set_chroma_subsampling_method(jpeg_encoder::ChromaSubsamplingMethod::Average);
    enc.encode(&bytes, w as u16, h as u16, jpeg_encoder::ColorType::Rgb)
        .map_err(|e| Error::CorruptData(format!("jpeg encode: {e}")))?;
    let mut dec = jpeg_decoder::Decoder::new(encoded.as_slice());
    let pixels = dec.decode().map_err(|e| Error::CorruptData(format!("jpeg decode: {e}")))?;
    ImageBuffer::from_rgb_bytes(w, h, &pixels)
}

pub(crate) fn motion_blur(img: &ImageBuffer, length: f64, angle: f64) -> ImageBuffer {
    if length <= 1.0 {
        return img.clone();
    }
    let k = motion_kernel(length, angle);
    let planes: Vec<Plane> = (0..CHANNELS)
        .map(|c| convolve(&Plane::new(img.width(), img.height(), img.channel(c)), &k))
        .collect();
    ImageBuffer::from_planes(img.width(), img.height(), [&planes[0].data, &planes[1].data, &planes[2].data])
        .expect("same dims")
}

fn object_count(density_per_mp: f64, img: &ImageBuffer) -> usize {
    (density_per_mp * img.pixel_count() as f64 / 1e6).round() as usize
}

fn add_rain(img: &ImageBuffer, density: f64, length: f64, angle: f64, intensity: f64, rng: &mut ChaCha8Rng) -> ImageBuffer {
    let n = object_count(density, img);
    if n == 0 || intensity == 0.0 {
        return img.clone();
    }
    let (w, h) = (img.width(), img.height());
    let mut layer = vec![0f32; w * h];
    let (dx, dy) = (angle.cos(), angle.sin());
    const WIDTH_SIGMA: f64 = 0.7;
    for _ in 0..n {
        let cx = rng.random::<f64>() * w as f64;
        let cy = rng.random::<f64>() * h as f64;
        let len = length * rng.random_range(0.8..1.2);
        let amp = intensity * rng.random_range(0.8..1.0);
        let half = len / 2.0;
        let reach = half + 3.0;
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil() as usize).min(w - 1);
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let y1 = ((cy + reach).ceil() as usize).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (rx, ry) = (x as f64 - cx, y as f64 - cy);
                let along = rx * dx + ry * dy;
                let across = -rx * dy + ry * dx;
                if along.abs() > half {
                    continue;
                }
                let taper = 1.0 - (along / half).powi(2) * 0.5;
                let v = amp * taper * (-(across * across) / (2.0 * WIDTH_SIGMA * WIDTH_SIGMA)).exp();
                let cell = &mut layer[y * w + x];
                *cell = cell.max(v as f32);
            }
        }
    }
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v + layer[i / CHANNELS])
        .collect();
    ImageBuffer::from_vec_clamped(w, h, data).expect("same dims")
}

fn add_snow(img: &ImageBuffer, density: f64, r_min: f64, r_max: f64, rng: &mut ChaCha8Rng) -> ImageBuffer {
    let n = object_count(density, img);
    if n == 0 {
        return img.clone();
    }
    let (w, h) = (img.width(), img.height());
    let mut alpha = vec![0f32; w * h];
    for _ in 0..n {
        let cx = rng.random::<f64>() * w as f64;
        let cy = rng.random::<f64>() * h as f64;
        let r = if r_max > r_min { rng.random_range(r_min..r_max) } else { r_min };
        let aspect = rng.random_range(0.6..1.0);
        let rot = rng.random::<f64>() * std::f64::consts::PI;
        let opacity = rng.random_range(0.7..1.0);
        let (ra, rb) = (r, r * aspect);
        let (c, s) = (rot.cos(), rot.sin());
        let reach = r * 2.0 + 1.0;
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil() as usize).min(w - 1);
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let y1 = ((cy + reach).ceil() as usize).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (rx, ry) = (x as f64 - cx, y as f64 - cy);
                let u = (rx * c + ry * s) / ra;
                let v = (-rx * s + ry * c) / rb;
                let d2 = u * u + v * v;
                let a = (opacity * (-d2 * d2).exp()) as f32;
                let cell = &mut alpha[y * w + x];
                *cell = cell.max(a);
            }
        }
    }
    const FLAKE: f32 = 0.97;
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let a = alpha[i / CHANNELS];
            v * (1.0 - a) + FLAKE * a
        })
        .collect();
    ImageBuffer::from_vec_clamped(w, h, data).expect("same dims")
}

/// Severity profile used when sampling recipes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Low,
    Medium,
    High,
    /// Full range of every parameter.
    #[default]
    Mixed,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(Profile::Low),
            "medium" => Ok(Profile::Medium),
            "high" => Ok(Profile::High),
            "mixed" => Ok(Profile::Mixed),
            other => Err(Error::Config(format!("unknown profile {other}"))),
        }
    }
}

/// Closed or half-open interval to draw from.
#[derive(Debug, Clone, Copy)]
enum Span {
    /// `[lo, hi]`
    Closed(f64, f64),
    /// `(lo, hi]`
    OpenLow(f64, f64),
    /// `[lo, hi)`
    OpenHigh(f64, f64),
}

impl Span {
    fn draw(self, rng: &mut ChaCha8Rng) -> f64 {
        let u: f64 = rng.random();
        match self {
            Span::Closed(lo, hi) => lo + (hi - lo) * u,
            Span::OpenLow(lo, hi) => hi - (hi - lo) * u,
            Span::OpenHigh(lo, hi) => lo + (hi - lo) * u,
        }
    }
}

fn thirds(lo: f64, hi: f64, profile: Profile, descending: bool) -> Span {
    let third = (hi - lo) / 3.0;
    let idx = match profile {
        Profile::Low => 0,
        Profile::Medium => 1,
        Profile::High => 2,
        Profile::Mixed => return Span::Closed(lo, hi),
    };
    let idx = if descending { 2 - idx } else { idx };
    Span::Closed(lo + third * idx as f64, lo + third * (idx + 1) as f64)
}

fn sample_params(task: TaskId, profile: Profile, rng: &mut ChaCha8Rng) -> StepParams {
    use std::f64::consts::PI;
    match task {
        TaskId::Denoise => {
            let span = match profile {
                Profile::Low => Span::OpenLow(0.0, 10.0),
                Profile::Medium => Span::OpenLow(10.0, 30.0),
                Profile::High => Span::OpenLow(30.0, 50.0),
                Profile::Mixed => Span::OpenLow(0.0, 50.0),
            };
            StepParams::Denoise { sigma: span.draw(rng) }
        }
        TaskId::Dejpeg => {
            let (lo, hi) = match profile {
                Profile::Low => (50, 90),
                Profile::Medium => (30, 70),
                Profile::High => (10, 49),
                Profile::Mixed => (10, 90),
            };
            StepParams::Dejpeg { quality: rng.random_range(lo..=hi) }
        }
        TaskId::Deblur => {
            let l = thirds(5.0, 25.0, profile, false).draw(rng).round() as u32;
            StepParams::Deblur { length: l, angle: Span::OpenHigh(0.0, PI).draw(rng) }
        }
        TaskId::Derain => StepParams::Derain {
            density: thirds(50.0, 400.0, profile, false).draw(rng),
            length: thirds(10.0, 30.0, profile, false).draw(rng),
            angle: Span::Closed(PI / 2.0 - 0.4, PI / 2.0 + 0.4).draw(rng),
            intensity: thirds(0.3, 0.7, profile, false).draw(rng),
        },
        TaskId::Dehaze => StepParams::Dehaze {
            transmission: thirds(0.3, 0.8, profile, true).draw(rng),
            airlight: Span::Closed(0.7, 1.0).draw(rng),
        },
        TaskId::Lowlight => StepParams::Lowlight {
            scale: thirds(0.15, 0.5, profile, true).draw(rng),
            gamma: thirds(1.5, 3.0, profile, false).draw(rng),
            sigma: Span::OpenLow(0.0, 5.0).draw(rng),
        },
        TaskId::Desnow => StepParams::Desnow {
            density: thirds(30.0, 200.0, profile, false).draw(rng),
            radius_min: 1.0,
            radius_max: 4.0,
        },
    }
}

/// SplitMix64 finaliser, used to key independent streams from `(seed, index)`.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws a recipe for `tasks` in canonical synthesis order.
pub fn sample_recipe(tasks: &BTreeSet<TaskId>, rng_seed: u64, profile: Profile) -> Result<DegradationRecipe> {
    if tasks.len() > MAX_RECIPE_STEPS {
        return Err(Error::TooManyTasks(tasks.len()));
    }
    if tasks.is_empty() {
        return Err(Error::InvalidRecipe("no tasks requested".into()));
    }
    let mut ordered: Vec<TaskId> = tasks.iter().copied().collect();
    ordered.sort_by_key(|t| t.synthesis_rank());
    let steps = ordered
        .into_iter()
        .map(|task| {
            let key = mix_seed(rng_seed, task.synthesis_rank() as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            let params = sample_params(task, profile, &mut rng);
            DegradationStep::new(params, mix_seed(key, 0xD15EA5E))
        })
        .collect();
    DegradationRecipe::new("", steps)
}
