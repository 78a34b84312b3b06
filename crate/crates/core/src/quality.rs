//! Full-reference metrics and the balanced (z-score sum) objective.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::gaussian_taps;
use crate::image::{save_image, ImageBuffer};
use crate::provider::{split_command, LineProcess, DEFAULT_TIMEOUT};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn check_same(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if a.same_dims(b) {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )))
    }
}

/// Mean squared error over all samples of all channels.
pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_same(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.data().len() as f64)
}

/// Peak signal-to-noise ratio in dB on `[0,1]` intensities, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    let m = mse(a, b)?;
    if m <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// Mean SSIM over all valid 11x11 Gaussian windows of the Rec.601 luma.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_same(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::ImageTooSmall(format!("{w}x{h}, SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}")));
    }
    let x: Vec<f64> = a.luma().into_iter().map(f64::from).collect();
    let y: Vec<f64> = b.luma().into_iter().map(f64::from).collect();
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let mu_x = filter_valid(&x, w, h, &taps);
    let mu_y = filter_valid(&y, w, h, &taps);
    let e_xx = filter_valid(&xx, w, h, &taps);
    let e_yy = filter_valid(&yy, w, h, &taps);
    let e_xy = filter_valid(&xy, w, h, &taps);
    let n = mu_x.len();
    let mut total = 0.0;
    for i in 0..n {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = e_xx[i] - mx * mx;
        let vy = e_yy[i] - my * my;
        let cxy = e_xy[i] - mx * my;
        let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2);
        let den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2);
        total += num / den;
    }
    Ok((total / n as f64).clamp(-1.0, 1.0))
}

/// Separable correlation keeping only fully-covered windows.
fn filter_valid(src: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&row[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn zero_spread(sd: f64, mean: f64) -> bool {
    sd <= 1e-12 * (1.0 + mean.abs())
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Standardises with the population standard deviation. A population with
/// no spread maps to all zeros.
pub fn zscores(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::PopulationTooSmall(values.len()));
    }
    let (mean, sd) = mean_sd(values);
    if zero_spread(sd, mean) {
        return Ok(vec![0.0; values.len()]);
    }
    Ok(values.iter().map(|v| (v - mean) / sd).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Polarity {
    HigherBetter,
    LowerBetter,
}

impl Polarity {
    pub fn sign(self) -> f64 {
        match self {
            Polarity::HigherBetter => 1.0,
            Polarity::LowerBetter => -1.0,
        }
    }
}

/// A metric measured by a subprocess speaking the line-JSON metric protocol.
pub struct ExternalMetric {
    name: String,
    polarity: Polarity,
    process: Mutex<LineProcess>,
}

impl fmt::Debug for ExternalMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExternalMetric").field("name", &self.name).field("polarity", &self.polarity).finish()
    }
}

#[derive(Serialize)]
struct MetricRequest<'a> {
    restored: &'a str,
    reference: &'a str,
    metric: &'a str,
}

#[derive(Deserialize)]
struct MetricResponse {
    value: f64,
}

impl ExternalMetric {
    pub fn new(name: impl Into<String>, polarity: Polarity, command: &str) -> Self {
        Self::with_timeout(name, polarity, command, DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(name: impl Into<String>, polarity: Polarity, command: &str, timeout: Duration) -> Self {
        ExternalMetric {
            name: name.into(),
            polarity,
            process: Mutex::new(LineProcess::new(split_command(command), timeout)),
        }
    }

    pub fn measure(&self, restored: &ImageBuffer, reference: &ImageBuffer) -> Result<f64> {
        check_same(restored, reference)?;
        let dir = tempfile::tempdir()?;
        let rp = dir.path().join("restored.png");
        let fp = dir.path().join("reference.png");
        save_image(restored, &rp)?;
        save_image(reference, &fp)?;
        let req = serde_json::to_string(&MetricRequest {
            restored: &rp.to_string_lossy(),
            reference: &fp.to_string_lossy(),
            metric: &self.name,
        })?;
        let mut proc = self.process.lock().unwrap_or_else(|p| p.into_inner());
        let line = proc.request(&req).map_err(Error::ExternalMetricFailure)?;
        let resp: MetricResponse = serde_json::from_str(&line).map_err(|e| {
            proc.reset();
            Error::ExternalMetricFailure(format!("malformed response {line:?}: {e}"))
        })?;
        if !resp.value.is_finite() {
            return Err(Error::ExternalMetricFailure(format!("non-finite value {}", resp.value)));
        }
        Ok(resp.value)
    }
}

#[derive(Debug, Clone)]
pub enum Metric {
    Psnr,
    Ssim,
    External(Arc<ExternalMetric>),
}

impl Metric {
    pub fn name(&self) -> &str {
        match self {
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
            Metric::External(e) => &e.name,
        }
    }

    pub fn polarity(&self) -> Polarity {
        match self {
            Metric::Psnr | Metric::Ssim => Polarity::HigherBetter,
            Metric::External(e) => e.polarity,
        }
    }

    pub fn measure(&self, restored: &ImageBuffer, reference: &ImageBuffer) -> Result<f64> {
        match self {
            Metric::Psnr => psnr(restored, reference),
            Metric::Ssim => ssim(restored, reference),
            Metric::External(e) => e.measure(restored, reference),
        }
    }

    /// Resolves a builtin metric by name.
    pub fn builtin(name: &str) -> Result<Metric> {
        match name {
            "psnr" => Ok(Metric::Psnr),
            "ssim" => Ok(Metric::Ssim),
            other => Err(Error::Config(format!("unknown builtin metric {other}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct WeightedMetric {
    pub metric: Metric,
    pub weight: f64,
}

/// Metrics that make up the objective, with their weights. Default is
/// PSNR and SSIM with equal weight.
#[derive(Debug, Clone)]
pub struct ScoreConfig {
    metrics: Vec<WeightedMetric>,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig::equal(vec![Metric::Psnr, Metric::Ssim]).expect("non-empty")
    }
}

impl ScoreConfig {
    pub fn new(metrics: Vec<WeightedMetric>) -> Result<Self> {
        if metrics.is_empty() {
            return Err(Error::Config("score config needs at least one metric".into()));
        }
        let mut names: Vec<&str> = metrics.iter().map(|m| m.metric.name()).collect();
        names.sort_unstable();
        if names.windows(2).any(|p| p[0] == p[1]) {
            return Err(Error::Config("duplicate metric in score config".into()));
        }
        if metrics.iter().any(|m| !(m.weight.is_finite() && m.weight >= 0.0)) {
            return Err(Error::Config("metric weights must be finite and non-negative".into()));
        }
        Ok(ScoreConfig { metrics })
    }

    pub fn equal(metrics: Vec<Metric>) -> Result<Self> {
        ScoreConfig::new(metrics.into_iter().map(|metric| WeightedMetric { metric, weight: 1.0 }).collect())
    }

    /// Single-metric objective.
    pub fn single(metric: Metric) -> Self {
        ScoreConfig { metrics: vec![WeightedMetric { metric, weight: 1.0 }] }
    }

    /// Builds from builtin metric names, e.g. `["psnr", "ssim"]`.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        ScoreConfig::equal(names.iter().map(|n| Metric::builtin(n.as_ref())).collect::<Result<_>>()?)
    }

    pub fn metrics(&self) -> &[WeightedMetric] {
        &self.metrics
    }

    pub fn names(&self) -> Vec<String> {
        self.metrics.iter().map(|m| m.metric.name().to_string()).collect()
    }

    /// Raw metric values of `restored` against `reference`.
    pub fn report(&self, restored: &ImageBuffer, reference: &ImageBuffer) -> Result<ScoreReport> {
        let mut values = BTreeMap::new();
        for m in &self.metrics {
            values.insert(m.metric.name().to_string(), m.metric.measure(restored, reference)?);
        }
        Ok(ScoreReport { values, balanced: None })
    }
}

/// Raw per-metric values plus the balanced score once standardised.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ScoreReport {
    pub values: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub balanced: Option<f64>,
}

impl ScoreReport {
    pub fn get(&self, metric: &str) -> Option<f64> {
        self.values.get(metric).copied()
    }
}

fn column(table: &[ScoreReport], name: &str) -> Result<Vec<f64>> {
    table
        .iter()
        .map(|r| r.get(name).ok_or_else(|| Error::InconsistentMetricSets(format!("report lacks metric {name}"))))
        .collect()
}

/// Balanced score of every candidate: per-metric z-scores across the
/// population, sign-aligned so higher is better, weighted and summed.
pub fn balanced_scores(table: &[ScoreReport], config: &ScoreConfig) -> Result<Vec<f64>> {
    if table.len() < 2 {
        return Err(Error::PopulationTooSmall(table.len()));
    }
    let mut total = vec![0.0; table.len()];
    for m in config.metrics() {
        let z = zscores(&column(table, m.metric.name())?)?;
        let s = m.metric.polarity().sign() * m.weight;
        for (t, zi) in total.iter_mut().zip(z) {
            *t += s * zi;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub metric: String,
    pub mean: f64,
    pub sd: f64,
    pub polarity: Polarity,
    pub weight: f64,
}

/// Frozen standardisation parameters of one population, so that images
/// outside the population can be scored on the same scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZScoreStats {
    pub metrics: Vec<MetricStats>,
    pub population: usize,
}

impl ZScoreStats {
    pub fn from_population(table: &[ScoreReport], config: &ScoreConfig) -> Result<Self> {
        if table.len() < 2 {
            return Err(Error::PopulationTooSmall(table.len()));
        }
        let metrics = config
            .metrics()
            .iter()
            .map(|m| {
                let (mean, sd) = mean_sd(&column(table, m.metric.name())?);
                Ok(MetricStats {
                    metric: m.metric.name().to_string(),
                    mean,
                    sd,
                    polarity: m.metric.polarity(),
                    weight: m.weight,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ZScoreStats { metrics, population: table.len() })
    }

    /// Balanced score of one report on this population's scale.
    pub fn score(&self, report: &ScoreReport) -> Result<f64> {
        let mut s = 0.0;
        for m in &self.metrics {
            let x = report
                .get(&m.metric)
                .ok_or_else(|| Error::InconsistentMetricSets(format!("report lacks metric {}", m.metric)))?;
            if !zero_spread(m.sd, m.mean) {
                s += m.polarity.sign() * m.weight * (x - m.mean) / m.sd;
            }
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn report(psnr: f64, ssim: f64) -> ScoreReport {
        ScoreReport { values: [("psnr".to_string(), psnr), ("ssim".to_string(), ssim)].into(), balanced: None }
    }

    #[test]
    fn psnr_spot_values() {
        let z = ImageBuffer::filled(16, 16, 0.0);
        let o = ImageBuffer::filled(16, 16, 1.0);
        assert_eq!(psnr(&z, &z).unwrap(), PSNR_CAP);
        assert!(psnr(&z, &o).unwrap().abs() < 1e-12);
        let a = ImageBuffer::filled(16, 16, 0.5);
        let b = ImageBuffer::filled(16, 16, 0.25);
        assert!((psnr(&a, &b).unwrap() - 12.0412).abs() < 1e-3);
        assert!(matches!(psnr(&a, &ImageBuffer::filled(17, 16, 0.5)), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn ssim_spot_values() {
        let img = crate::scene::synthetic_scene(32, 32, 1);
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-9);
        let z = ImageBuffer::filled(16, 16, 0.0);
        let o = ImageBuffer::filled(16, 16, 1.0);
        let expect = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((ssim(&z, &o).unwrap() - expect).abs() < 1e-6);
        assert!(matches!(
            ssim(&ImageBuffer::filled(10, 20, 0.0), &ImageBuffer::filled(10, 20, 0.0)),
            Err(Error::ImageTooSmall(_))
        ));
    }

    #[test]
    fn psnr_drops_as_noise_grows() {
        use crate::degrade::{apply_step, DegradationStep, StepParams};
        let clean = crate::scene::synthetic_scene(48, 48, 2);
        let vals: Vec<f64> = [5.0, 15.0, 30.0]
            .iter()
            .map(|&sigma| {
                let noisy = apply_step(&clean, &DegradationStep::new(StepParams::Denoise { sigma }, 1)).unwrap();
                psnr(&clean, &noisy).unwrap()
            })
            .collect();
        assert!(vals[0] > vals[1] && vals[1] > vals[2], "{vals:?}");
    }

    #[test]
    fn zscore_examples() {
        assert_eq!(zscores(&[5.0, 5.0, 5.0]).unwrap(), vec![0.0; 3]);
        let z = zscores(&[1.0, 2.0, 3.0]).unwrap();
        for (a, b) in z.iter().zip([-1.2247, 0.0, 1.2247]) {
            assert!((a - b).abs() < 1e-4);
        }
        assert!(matches!(zscores(&[1.0]), Err(Error::PopulationTooSmall(1))));
    }

    #[test]
    fn balanced_examples() {
        let cfg = ScoreConfig::default();
        assert_eq!(balanced_scores(&[report(3.0, 0.5), report(3.0, 0.5)], &cfg).unwrap(), vec![0.0, 0.0]);
        let s = balanced_scores(&[report(10.0, 0.5), report(20.0, 0.9)], &cfg).unwrap();
        assert!((s[0] + 2.0).abs() < 1e-12 && (s[1] - 2.0).abs() < 1e-12);
        let missing = ScoreReport { values: [("psnr".to_string(), 1.0)].into(), balanced: None };
        assert!(matches!(
            balanced_scores(&[report(1.0, 0.1), missing], &cfg),
            Err(Error::InconsistentMetricSets(_))
        ));
    }

    #[test]
    fn lower_better_metrics_enter_negated() {
        let ext = Arc::new(ExternalMetric::new("mse", Polarity::LowerBetter, "true"));
        let cfg = ScoreConfig::equal(vec![Metric::External(ext)]).unwrap();
        let t = [
            ScoreReport { values: [("mse".to_string(), 0.1)].into(), balanced: None },
            ScoreReport { values: [("mse".to_string(), 0.3)].into(), balanced: None },
        ];
        let s = balanced_scores(&t, &cfg).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12 && (s[1] + 1.0).abs() < 1e-12, "{s:?}");
    }

    #[test]
    fn frozen_stats_reproduce_population_scores() {
        let cfg = ScoreConfig::default();
        let table: Vec<_> = (0..7).map(|i| report(20.0 + i as f64 * 1.3, 0.5 + (i * i) as f64 * 0.01)).collect();
        let direct = balanced_scores(&table, &cfg).unwrap();
        let stats = ZScoreStats::from_population(&table, &cfg).unwrap();
        for (r, d) in table.iter().zip(direct) {
            assert!((stats.score(r).unwrap() - d).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn zscores_centered_unit_variance(values in prop::collection::vec(-1e3f64..1e3, 2..40)) {
            let (mean, sd) = mean_sd(&values);
            prop_assume!(!zero_spread(sd, mean));
            let z = zscores(&values).unwrap();
            let s: f64 = z.iter().sum();
            let v: f64 = z.iter().map(|x| x * x).sum::<f64>() / z.len() as f64;
            prop_assert!(s.abs() < 1e-9);
            prop_assert!((v - 1.0).abs() < 1e-9);
        }

        #[test]
        fn psnr_shift_leaves_balanced_unchanged(
            rows in prop::collection::vec((10f64..40.0, 0f64..1.0), 2..20),
            shift in -50f64..50.0,
        ) {
            let cfg = ScoreConfig::default();
            let a: Vec<_> = rows.iter().map(|&(p, s)| report(p, s)).collect();
            let b: Vec<_> = rows.iter().map(|&(p, s)| report(p + shift, s)).collect();
            let sa = balanced_scores(&a, &cfg).unwrap();
            let sb = balanced_scores(&b, &cfg).unwrap();
            for (x, y) in sa.iter().zip(&sb) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn ssim_symmetric_and_bounded(seed_a in 0u64..50, seed_b in 0u64..50) {
            let a = crate::scene::synthetic_scene(24, 24, seed_a);
            let b = crate::scene::synthetic_scene(24, 24, seed_b);
            let ab = ssim(&a, &b).unwrap();
            prop_assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
            prop_assert!((psnr(&a, &b).unwrap() - psnr(&b, &a).unwrap()).abs() < 1e-12);
        }
    }
}
