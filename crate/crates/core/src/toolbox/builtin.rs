//! Classical restoration operators backing the builtin tools.
//!
//! Each operator is tuned to one degradation family (and, for denoising and
//! deJPEG, to one severity band) so the pool has distinct competence regions.

use std::str::FromStr;

use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::degrade::TaskId;
use crate::error::{Error, Result};
use crate::filters::{
    box_mean, gaussian_blur, gradients, max_filter, median, median_filter, min_filter, motion_kernel, quantile,
    Fft2, Kernel, Plane,
};
use crate::image::{ImageBuffer, CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Builtin {
    DenoiseSmall,
    DenoiseMedium,
    DenoiseStrong,
    DejpegMild,
    DejpegSevere,
    DeblurDefault,
    DerainDefault,
    DehazeDefault,
    LowlightDefault,
    DesnowDefault,
    /// Returns the input unchanged; usable for any task.
    Identity,
}

impl Builtin {
    pub const ALL: [Builtin; 11] = [
        Builtin::DenoiseSmall,
        Builtin::DenoiseMedium,
        Builtin::DenoiseStrong,
        Builtin::DejpegMild,
        Builtin::DejpegSevere,
        Builtin::DeblurDefault,
        Builtin::DerainDefault,
        Builtin::DehazeDefault,
        Builtin::LowlightDefault,
        Builtin::DesnowDefault,
        Builtin::Identity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Builtin::DenoiseSmall => "denoise_small",
            Builtin::DenoiseMedium => "denoise_medium",
            Builtin::DenoiseStrong => "denoise_strong",
            Builtin::DejpegMild => "dejpeg_mild",
            Builtin::DejpegSevere => "dejpeg_severe",
            Builtin::DeblurDefault => "deblur_default",
            Builtin::DerainDefault => "derain_default",
            Builtin::DehazeDefault => "dehaze_default",
            Builtin::LowlightDefault => "lowlight_default",
            Builtin::DesnowDefault => "desnow_default",
            Builtin::Identity => "identity",
        }
    }

    /// The task this operator restores; `None` for task-agnostic operators.
    pub fn task(self) -> Option<TaskId> {
        match self {
            Builtin::DenoiseSmall | Builtin::DenoiseMedium | Builtin::DenoiseStrong => Some(TaskId::Denoise),
            Builtin::DejpegMild | Builtin::DejpegSevere => Some(TaskId::Dejpeg),
            Builtin::DeblurDefault => Some(TaskId::Deblur),
            Builtin::DerainDefault => Some(TaskId::Derain),
            Builtin::DehazeDefault => Some(TaskId::Dehaze),
            Builtin::LowlightDefault => Some(TaskId::Lowlight),
            Builtin::DesnowDefault => Some(TaskId::Desnow),
            Builtin::Identity => None,
        }
    }

    pub fn run(self, img: &ImageBuffer) -> ImageBuffer {
        match self {
            Builtin::DenoiseSmall => nl_means(img, &NlmParams::for_sigma(5.0)),
            Builtin::DenoiseMedium => nl_means(img, &NlmParams::for_sigma(20.0)),
            Builtin::DenoiseStrong => nl_means(img, &NlmParams::for_sigma(40.0)),
            Builtin::DejpegMild => deblock(img, &DeblockParams::MILD),
            Builtin::DejpegSevere => deblock(img, &DeblockParams::SEVERE),
            Builtin::DeblurDefault => wiener_deblur(img, WIENER_K),
            Builtin::DerainDefault => derain(img),
            Builtin::DehazeDefault => dark_channel_dehaze(img),
            Builtin::LowlightDefault => lowlight_enhance(img),
            Builtin::DesnowDefault => desnow(img),
            Builtin::Identity => img.clone(),
        }
    }
}

impl FromStr for Builtin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Builtin::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::UnknownTool(format!("no builtin algorithm named {s}")))
    }
}

fn planes(img: &ImageBuffer) -> [Plane; 3] {
    [0, 1, 2].map(|c| Plane::new(img.width(), img.height(), img.channel(c)))
}

fn assemble(w: usize, h: usize, p: &[Plane; 3]) -> ImageBuffer {
    ImageBuffer::from_planes(w, h, [&p[0].data, &p[1].data, &p[2].data]).expect("consistent planes")
}

// ---------------------------------------------------------------------------
// Non-local means

#[derive(Debug, Clone)]
pub struct NlmParams {
    /// Assumed noise level on the 0-255 scale.
    pub sigma: f32,
    pub patch_radius: usize,
    pub search_radius: usize,
    /// Filtering strength as a multiple of sigma.
    pub h_factor: f32,
}

impl NlmParams {
    pub fn for_sigma(sigma: f32) -> Self {
        if sigma <= 25.0 {
            NlmParams { sigma, patch_radius: 1, search_radius: 4, h_factor: 0.55 }
        } else {
            NlmParams { sigma, patch_radius: 2, search_radius: 5, h_factor: 0.4 }
        }
    }
}

/// Colour non-local means. Patch distances are averaged over the three
/// channels; each search offset is processed as a whole image so patch sums
/// come from separable box sums.
pub fn nl_means(img: &ImageBuffer, p: &NlmParams) -> ImageBuffer {
    let (w, h) = (img.width(), img.height());
    let pr = p.patch_radius;
    let sr = p.search_radius as isize;
    let pad = p.search_radius + pr;
    let (pw, ph) = (w + 2 * pad, h + 2 * pad);
    let src = planes(img);
    let padded: Vec<Vec<f32>> = src
        .iter()
        .map(|pl| {
            let mut v = vec![0f32; pw * ph];
            for y in 0..ph {
                for x in 0..pw {
                    v[y * pw + x] = pl.at_clamped(x as isize - pad as isize, y as isize - pad as isize);
                }
            }
            v
        })
        .collect();

    let sigma = p.sigma / 255.0;
    let h2 = (p.h_factor * sigma).powi(2);
    let two_s2 = 2.0 * sigma * sigma;
    let patch_n = ((2 * pr + 1) * (2 * pr + 1) * CHANNELS) as f32;

    // region over which per-pixel distances are needed: output grown by pr
    let (rw, rh) = (w + 2 * pr, h + 2 * pr);
    let base = pad - pr;
    let mut dist = vec![0f32; rw * rh];
    let mut rowsum = vec![0f32; w * rh];
    let mut acc = [vec![0f32; w * h], vec![0f32; w * h], vec![0f32; w * h]];
    let mut wsum = vec![0f32; w * h];
    let k = 2 * pr + 1;

    for dy in -sr..=sr {
        for dx in -sr..=sr {
            for y in 0..rh {
                for x in 0..rw {
                    let i = (y + base) * pw + (x + base);
                    let j = ((y + base) as isize + dy) as usize * pw + ((x + base) as isize + dx) as usize;
                    let mut d = 0.0;
                    for ch in &padded {
                        let e = ch[i] - ch[j];
                        d += e * e;
                    }
                    dist[y * rw + x] = d;
                }
            }
            for y in 0..rh {
                let row = &dist[y * rw..(y + 1) * rw];
                let mut s: f32 = row[..k].iter().sum();
                rowsum[y * w] = s;
                for x in 1..w {
                    s += row[x + k - 1] - row[x - 1];
                    rowsum[y * w + x] = s;
                }
            }
            for x in 0..w {
                let mut s: f32 = (0..k).map(|y| rowsum[y * w + x]).sum();
                for y in 0..h {
                    if y > 0 {
                        s += rowsum[(y + k - 1) * w + x] - rowsum[(y - 1) * w + x];
                    }
                    let d2 = (s / patch_n - two_s2).max(0.0);
                    let wt = (-d2 / h2).exp();
                    let o = y * w + x;
                    let j = ((y + pad) as isize + dy) as usize * pw + ((x + pad) as isize + dx) as usize;
                    wsum[o] += wt;
                    for c in 0..CHANNELS {
                        acc[c][o] += wt * padded[c][j];
                    }
                }
            }
        }
    }
    let out: Vec<Plane> = acc
        .iter()
        .map(|a| Plane::new(w, h, a.iter().zip(&wsum).map(|(v, s)| v / s).collect()))
        .collect();
    assemble(w, h, &[out[0].clone(), out[1].clone(), out[2].clone()])
}

// ---------------------------------------------------------------------------
// JPEG artifact reduction

#[derive(Debug, Clone, Copy)]
pub struct DeblockParams {
    /// Largest block-boundary step treated as an artifact rather than an edge.
    pub max_step: f32,
    /// Largest within-block gradient next to the boundary.
    pub max_activity: f32,
    /// Half-width of the ramp that replaces a boundary step.
    pub ramp: usize,
    /// Bilateral range sigma for luma ringing removal.
    pub range_sigma: f32,
    pub spatial_sigma: f32,
    /// Gaussian sigma applied to chroma.
    pub chroma_sigma: f64,
}

impl DeblockParams {
    pub const MILD: DeblockParams = DeblockParams {
        max_step: 0.05,
        max_activity: 0.03,
        ramp: 2,
        range_sigma: 0.025,
        spatial_sigma: 0.8,
        chroma_sigma: 0.8,
    };
    pub const SEVERE: DeblockParams = DeblockParams {
        max_step: 0.12,
        max_activity: 0.06,
        ramp: 3,
        range_sigma: 0.06,
        spatial_sigma: 1.3,
        chroma_sigma: 1.6,
    };
}

fn rgb_to_ycc(img: &ImageBuffer) -> [Plane; 3] {
    let (w, h) = (img.width(), img.height());
    let mut y = Plane::zeros(w, h);
    let mut cb = Plane::zeros(w, h);
    let mut cr = Plane::zeros(w, h);
    for (i, p) in img.data().chunks_exact(CHANNELS).enumerate() {
        let (r, g, b) = (p[0], p[1], p[2]);
        y.data[i] = 0.299 * r + 0.587 * g + 0.114 * b;
        cb.data[i] = -0.168_736 * r - 0.331_264 * g + 0.5 * b;
        cr.data[i] = 0.5 * r - 0.418_688 * g - 0.081_312 * b;
    }
    [y, cb, cr]
}

fn ycc_to_rgb(p: &[Plane; 3]) -> ImageBuffer {
    let (w, h) = (p[0].width, p[0].height);
    let mut data = Vec::with_capacity(w * h * CHANNELS);
    for i in 0..w * h {
        let (y, cb, cr) = (p[0].data[i], p[1].data[i], p[2].data[i]);
        data.push(y + 1.402 * cr);
        data.push(y - 0.344_136 * cb - 0.714_136 * cr);
        data.push(y + 1.772 * cb);
    }
    ImageBuffer::from_vec_clamped(w, h, data).expect("same dims")
}

/// Smooths steps across block boundaries at multiples of `grid`, in place.
fn deblock_plane(pl: &mut Plane, grid: usize, prm: &DeblockParams) {
    let (w, h) = (pl.width, pl.height);
    let m = prm.ramp;
    let fix = |line: &mut [f32], at: usize| {
        if at < m || at + m > line.len() {
            return;
        }
        let p0 = line[at - 1];
        let q0 = line[at];
        let step = q0 - p0;
        if step.abs() >= prm.max_step {
            return;
        }
        let act = (line[at - 1] - line[at - 2]).abs().max((line[at + 1] - line[at]).abs());
        if act >= prm.max_activity {
            return;
        }
        let denom = 2.0 * (m as f32 + 1.0);
        for j in 0..m {
            let d = step * (m - j) as f32 / denom;
            line[at - 1 - j] += d;
            line[at + j] -= d;
        }
    };
    let mut row = vec![0f32; w];
    for y in 0..h {
        row.copy_from_slice(&pl.data[y * w..(y + 1) * w]);
        for at in (grid..w).step_by(grid) {
            fix(&mut row, at);
        }
        pl.data[y * w..(y + 1) * w].copy_from_slice(&row);
    }
    let mut col = vec![0f32; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = pl.data[y * w + x];
        }
        for at in (grid..h).step_by(grid) {
            fix(&mut col, at);
        }
        for y in 0..h {
            pl.data[y * w + x] = col[y];
        }
    }
}

fn bilateral(pl: &Plane, spatial: f32, range: f32) -> Plane {
    let r = (2.0 * spatial).ceil() as isize;
    let mut out = Plane::zeros(pl.width, pl.height);
    let inv_s = 1.0 / (2.0 * spatial * spatial);
    let inv_r = 1.0 / (2.0 * range * range);
    for y in 0..pl.height as isize {
        for x in 0..pl.width as isize {
            let c = pl.at_clamped(x, y);
            let (mut num, mut den) = (0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let v = pl.at_clamped(x + dx, y + dy);
                    let d = v - c;
                    let wt = (-((dx * dx + dy * dy) as f32) * inv_s - d * d * inv_r).exp();
                    num += wt * v;
                    den += wt;
                }
            }
            out.data[y as usize * pl.width + x as usize] = num / den;
        }
    }
    out
}

/// Block-boundary-aware smoothing: ramp out small steps on the 8-px luma
/// grid (16-px for subsampled chroma), then edge-preserving luma smoothing
/// and plain chroma smoothing.
pub fn deblock(img: &ImageBuffer, prm: &DeblockParams) -> ImageBuffer {
    let [mut y, mut cb, mut cr] = rgb_to_ycc(img);
    deblock_plane(&mut y, 8, prm);
    deblock_plane(&mut cb, 16, prm);
    deblock_plane(&mut cr, 16, prm);
    let y = bilateral(&y, prm.spatial_sigma, prm.range_sigma);
    let cb = gaussian_blur(&cb, prm.chroma_sigma);
    let cr = gaussian_blur(&cr, prm.chroma_sigma);
    ycc_to_rgb(&[y, cb, cr])
}

// ---------------------------------------------------------------------------
// Motion deblurring

pub const WIENER_K: f64 = 0.006;
const MIN_BLUR_LAG: usize = 3;
const MAX_BLUR_LAG: usize = 30;
const DIP_SIGMAS: f64 = 6.0;
const ANGLE_STEPS: usize = 24;

/// Direction of least gradient energy, in `[0, pi)`.
pub fn estimate_blur_angle(img: &ImageBuffer) -> f64 {
    let luma = Plane::new(img.width(), img.height(), img.luma());
    let (gx, gy) = gradients(&luma);
    let (mut sxx, mut syy, mut sxy) = (0f64, 0f64, 0f64);
    for (a, b) in gx.data.iter().zip(&gy.data) {
        let (a, b) = (*a as f64, *b as f64);
        sxx += a * a;
        syy += b * b;
        sxy += a * b;
    }
    (0..ANGLE_STEPS)
        .map(|k| std::f64::consts::PI * k as f64 / ANGLE_STEPS as f64)
        .map(|t| {
            let (c, s) = (t.cos(), t.sin());
            (t, c * c * sxx + s * s * syy + 2.0 * c * s * sxy)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(t, _)| t)
        .unwrap_or(0.0)
}

/// Linear blur from the power cepstrum: a blur of length L puts periodic
/// zeros in the spectrum, which show up as a negative cepstral peak at
/// offset (L-1)·(cos θ, sin θ). Returns `(length, angle)`, or `None` when
/// no peak stands out of the annulus searched.
pub fn estimate_blur_cepstrum(img: &ImageBuffer) -> Option<(f64, f64)> {
    let (w, h) = (img.width(), img.height());
    let luma = img.luma();
    let mean = luma.iter().map(|&v| v as f64).sum::<f64>() / luma.len() as f64;
    let hann = |i: usize, n: usize| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * (i as f64 + 0.5) / n as f64).cos();
    let fft = Fft2::new(w, h);
    let mut buf: Vec<Complex<f64>> = (0..w * h)
        .map(|i| Complex::new((luma[i] as f64 - mean) * hann(i % w, w) * hann(i / w, h), 0.0))
        .collect();
    fft.forward(&mut buf);
    for v in buf.iter_mut() {
        *v = Complex::new((v.norm_sqr() + 1e-9).ln(), 0.0);
    }
    fft.inverse(&mut buf);
    let r_max = MAX_BLUR_LAG.min(w / 2 - 1).min(h / 2 - 1) as isize;
    let mut ring = Vec::new();
    for dy in 0..=r_max {
        for dx in -r_max..=r_max {
            let r2 = dx * dx + dy * dy;
            if r2 < (MIN_BLUR_LAG * MIN_BLUR_LAG) as isize || r2 > r_max * r_max || (dy == 0 && dx < 0) {
                continue;
            }
            let x = dx.rem_euclid(w as isize) as usize;
            ring.push((dx, dy, buf[dy as usize * w + x].re));
        }
    }
    let n = ring.len() as f64;
    let mu = ring.iter().map(|p| p.2).sum::<f64>() / n;
    let sd = (ring.iter().map(|p| (p.2 - mu).powi(2)).sum::<f64>() / n).sqrt();
    let &(dx, dy, v) = ring.iter().min_by(|a, b| a.2.total_cmp(&b.2))?;
    if sd <= 0.0 || mu - v < DIP_SIGMAS * sd {
        return None;
    }
    let (fx, fy) = (dx as f64, dy as f64);
    let angle = fy.atan2(fx).rem_euclid(std::f64::consts::PI);
    Some((fx.hypot(fy) + 1.0, angle))
}

/// Wiener deconvolution with a linear motion kernel whose length and angle
/// come from the cepstrum. Without a clear blur signature (sharp input, or
/// blur buried under noise) the input is returned unchanged: deconvolving
/// with a guessed kernel does more harm than good.
pub fn wiener_deblur(img: &ImageBuffer, k: f64) -> ImageBuffer {
    match estimate_blur_cepstrum(img) {
        Some((length, angle)) => wiener_deconvolve(img, &motion_kernel(length, angle), k),
        None => img.clone(),
    }
}

/// Wiener deconvolution with a known kernel and noise-to-signal ratio `k`.
pub fn wiener_deconvolve(img: &ImageBuffer, kernel: &Kernel, k: f64) -> ImageBuffer {
    let (w, h) = (img.width(), img.height());
    // Replicated borders match how the blur saw the scene; the outer half
    // of the margin fades to the plane mean so the circular wrap is smooth.
    let pad = 2 * kernel.size;
    let (fw, fh) = (w + 2 * pad, h + 2 * pad);
    let fft = Fft2::new(fw, fh);

    let mut otf = vec![Complex::new(0.0, 0.0); fw * fh];
    let r = kernel.radius() as isize;
    for ky in 0..kernel.size {
        for kx in 0..kernel.size {
            let x = (kx as isize - r).rem_euclid(fw as isize) as usize;
            let y = (ky as isize - r).rem_euclid(fh as isize) as usize;
            otf[y * fw + x].re += kernel.weights[ky * kernel.size + kx] as f64;
        }
    }
    fft.forward(&mut otf);
    let filter: Vec<Complex<f64>> = otf.iter().map(|hv| hv.conj() / (hv.norm_sqr() + k)).collect();

    let fade = |d: usize| -> f64 {
        // d: distance outside the image along one axis
        let start = kernel.size;
        if d <= start {
            1.0
        } else {
            let t = (d - start) as f64 / (pad - start) as f64;
            0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
        }
    };
    let outside = |i: usize, n: usize| -> usize {
        if i < pad {
            pad - i
        } else if i >= pad + n {
            i + 1 - pad - n
        } else {
            0
        }
    };
    let src = planes(img);
    let mut out: Vec<Plane> = Vec::with_capacity(3);
    for pl in &src {
        let mean = pl.data.iter().map(|&v| v as f64).sum::<f64>() / pl.data.len() as f64;
        let mut buf = vec![Complex::new(0.0, 0.0); fw * fh];
        for y in 0..fh {
            let sy = y.saturating_sub(pad).min(h - 1);
            let wy = fade(outside(y, h));
            for x in 0..fw {
                let sx = x.saturating_sub(pad).min(w - 1);
                let a = wy * fade(outside(x, w));
                buf[y * fw + x].re = mean + a * (pl.data[sy * w + sx] as f64 - mean);
            }
        }
        fft.forward(&mut buf);
        for (b, f) in buf.iter_mut().zip(&filter) {
            *b *= f;
        }
        fft.inverse(&mut buf);
        let mut o = Plane::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                o.data[y * w + x] = buf[(y + pad) * fw + x + pad].re as f32;
            }
        }
        out.push(o);
    }
    assemble(w, h, &[out[0].clone(), out[1].clone(), out[2].clone()])
}

// ---------------------------------------------------------------------------
// Rain streak removal

fn smoothstep(e0: f32, e1: f32, x: f32) -> f32 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Dominant orientation of bright thin structures in `resid`, in radians.
fn streak_angle(resid: &Plane) -> f64 {
    let (gx, gy) = gradients(resid);
    let (mut jxx, mut jyy, mut jxy) = (0f64, 0f64, 0f64);
    for (a, b) in gx.data.iter().zip(&gy.data) {
        let (a, b) = (*a as f64, *b as f64);
        jxx += a * a;
        jyy += b * b;
        jxy += a * b;
    }
    let grad_dir = 0.5 * (2.0 * jxy).atan2(jxx - jyy);
    grad_dir + std::f64::consts::FRAC_PI_2
}

/// Detects bright streaks on the luma residual, estimates their shared
/// orientation and replaces masked pixels by a median taken across the
/// streak direction.
pub fn derain(img: &ImageBuffer) -> ImageBuffer {
    let (w, h) = (img.width(), img.height());
    let luma = Plane::new(w, h, img.luma());
    let bg = median_filter(&luma, 2);
    let resid = Plane::new(w, h, luma.data.iter().zip(&bg.data).map(|(a, b)| (a - b).max(0.0)).collect());
    let mask = Plane::new(w, h, resid.data.iter().map(|&r| smoothstep(0.03, 0.08, r)).collect());
    let mask = max_filter(&mask, 1);
    if mask.data.iter().all(|&m| m == 0.0) {
        return img.clone();
    }
    let angle = streak_angle(&resid);
    // sample across the streak
    let (nx, ny) = ((angle + std::f64::consts::FRAC_PI_2).cos() as f32, (angle + std::f64::consts::FRAC_PI_2).sin() as f32);
    let src = planes(img);
    let mut out = src.clone();
    let mut buf = Vec::with_capacity(9);
    for y in 0..h {
        for x in 0..w {
            let m = mask.data[y * w + x];
            if m == 0.0 {
                continue;
            }
            for c in 0..CHANNELS {
                buf.clear();
                for t in -4i32..=4 {
                    buf.push(src[c].sample(x as f32 + nx * t as f32, y as f32 + ny * t as f32));
                }
                let med = median(&mut buf);
                let i = y * w + x;
                out[c].data[i] = src[c].data[i] * (1.0 - m) + med * m;
            }
        }
    }
    assemble(w, h, &out)
}

// ---------------------------------------------------------------------------
// Dehazing

const DCP_RADIUS: usize = 3;
const DCP_OMEGA: f32 = 0.95;
const DCP_T_MIN: f32 = 0.1;

fn guided_filter(guide: &Plane, src: &Plane, r: usize, eps: f32) -> Plane {
    let (w, h) = (guide.width, guide.height);
    let mul = |a: &Plane, b: &Plane| Plane::new(w, h, a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect());
    let mean_i = box_mean(guide, r);
    let mean_p = box_mean(src, r);
    let corr_ip = box_mean(&mul(guide, src), r);
    let corr_ii = box_mean(&mul(guide, guide), r);
    let mut a = Plane::zeros(w, h);
    let mut b = Plane::zeros(w, h);
    for i in 0..w * h {
        let var = corr_ii.data[i] - mean_i.data[i] * mean_i.data[i];
        let cov = corr_ip.data[i] - mean_i.data[i] * mean_p.data[i];
        a.data[i] = cov / (var + eps);
        b.data[i] = mean_p.data[i] - a.data[i] * mean_i.data[i];
    }
    let ma = box_mean(&a, r);
    let mb = box_mean(&b, r);
    Plane::new(w, h, (0..w * h).map(|i| ma.data[i] * guide.data[i] + mb.data[i]).collect())
}

/// Airlight estimate: mean colour of the brightest decile of the dark channel.
pub fn estimate_airlight(img: &ImageBuffer) -> [f32; 3] {
    let (w, h) = (img.width(), img.height());
    let minc = Plane::new(w, h, img.data().chunks_exact(CHANNELS).map(|p| p[0].min(p[1]).min(p[2])).collect());
    let dark = min_filter(&minc, DCP_RADIUS);
    let cut = quantile(&dark.data, 0.9);
    let mut sum = [0f64; 3];
    let mut n = 0usize;
    for (i, &d) in dark.data.iter().enumerate() {
        if d >= cut {
            let p = img.pixel(i % w, i / w);
            for c in 0..3 {
                sum[c] += p[c] as f64;
            }
            n += 1;
        }
    }
    sum.map(|s| ((s / n.max(1) as f64) as f32).clamp(0.3, 1.0))
}

pub fn dark_channel_dehaze(img: &ImageBuffer) -> ImageBuffer {
    let (w, h) = (img.width(), img.height());
    let air = estimate_airlight(img);
    let norm_min = Plane::new(
        w,
        h,
        img.data()
            .chunks_exact(CHANNELS)
            .map(|p| (p[0] / air[0]).min(p[1] / air[1]).min(p[2] / air[2]))
            .collect(),
    );
    let dark = min_filter(&norm_min, DCP_RADIUS);
    let raw_t = Plane::new(w, h, dark.data.iter().map(|d| 1.0 - DCP_OMEGA * d).collect());
    let guide = Plane::new(w, h, img.luma());
    let t = guided_filter(&guide, &raw_t, 12, 1e-3);
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i % CHANNELS;
            let tt = t.data[i / CHANNELS].clamp(DCP_T_MIN, 1.0);
            (v - air[c]) / tt + air[c]
        })
        .collect();
    ImageBuffer::from_vec_clamped(w, h, data).expect("same dims")
}

// ---------------------------------------------------------------------------
// Low-light enhancement

/// Bright/median percentile ratio assumed for well-exposed content.
const EXPOSED_PERCENTILE_RATIO: f64 = 2.0;
const TARGET_BRIGHT: f64 = 0.9;

/// Inverse-gamma correction with the exponent estimated from the spread
/// between bright and median luma, then a percentile stretch.
pub fn lowlight_enhance(img: &ImageBuffer) -> ImageBuffer {
    let luma = img.luma();
    let floor = 1.0 / 255.0;
    let hi = (quantile(&luma, 0.99) as f64).max(floor);
    let mid = (quantile(&luma, 0.5) as f64).max(floor);
    let gamma = if hi > mid {
        ((hi.ln() - mid.ln()) / EXPOSED_PERCENTILE_RATIO.ln()).clamp(1.0, 3.5)
    } else {
        1.0
    };
    let inv = 1.0 / gamma as f32;
    let hi_lin = hi.powf(1.0 / gamma);
    let gain = (TARGET_BRIGHT / hi_lin).max(1.0) as f32;
    img.map(|v| v.max(0.0).powf(inv) * gain)
}

// ---------------------------------------------------------------------------
// Snow removal

/// Masks bright blobs above the local median and fills them with the median
/// of the surrounding unmasked pixels.
pub fn desnow(img: &ImageBuffer) -> ImageBuffer {
    let (w, h) = (img.width(), img.height());
    let luma = Plane::new(w, h, img.luma());
    let bg = median_filter(&luma, 4);
    let raw = Plane::new(
        w,
        h,
        luma.data.iter().zip(&bg.data).map(|(a, b)| smoothstep(0.05, 0.12, a - b)).collect(),
    );
    let mask = max_filter(&raw, 1);
    if mask.data.iter().all(|&m| m == 0.0) {
        return img.clone();
    }
    let src = planes(img);
    let mut out = src.clone();
    let r = 5isize;
    let mut buf = Vec::with_capacity(121);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let m = mask.data[i];
            if m == 0.0 {
                continue;
            }
            for c in 0..CHANNELS {
                buf.clear();
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (xx, yy) = (x + dx, y + dy);
                        if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                            continue;
                        }
                        let j = yy as usize * w + xx as usize;
                        if mask.data[j] < 0.05 {
                            buf.push(src[c].data[j]);
                        }
                    }
                }
                if buf.is_empty() {
                    continue;
                }
                let med = median(&mut buf);
                out[c].data[i] = src[c].data[i] * (1.0 - m) + med * m;
            }
        }
    }
    assemble(w, h, &out)
}
