//! Single-plane filtering primitives shared by degradations and tools.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// One channel of an image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height);
        Plane { width, height, data }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Plane { width, height, data: vec![0.0; width * height] }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Sample with replicated borders.
    #[inline]
    pub fn at_clamped(&self, x: isize, y: isize) -> f32 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.data[yc * self.width + xc]
    }

    /// Bilinear sample with replicated borders.
    pub fn sample(&self, x: f32, y: f32) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (xi, yi) = (x0 as isize, y0 as isize);
        let a = self.at_clamped(xi, yi);
        let b = self.at_clamped(xi + 1, yi);
        let c = self.at_clamped(xi, yi + 1);
        let d = self.at_clamped(xi + 1, yi + 1);
        (a * (1.0 - fx) + b * fx) * (1.0 - fy) + (c * (1.0 - fx) + d * fx) * fy
    }
}

/// Square convolution kernel with odd side, unit mass unless stated otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub size: usize,
    pub weights: Vec<f32>,
}

impl Kernel {
    pub fn radius(&self) -> usize {
        self.size / 2
    }
}

/// Linear motion-blur kernel: a segment of `length` pixels through the
/// centre at `angle` radians (x right, y down), anti-aliased and normalised.
/// `length <= 1` yields the identity tap.
pub fn motion_kernel(length: f64, angle: f64) -> Kernel {
    let half = ((length - 1.0).max(0.0) / 2.0).ceil() as usize;
    let size = 2 * half + 1;
    let mut w = vec![0f64; size * size];
    if length <= 1.0 {
        w[half * size + half] = 1.0;
    } else {
        let (dx, dy) = (angle.cos(), angle.sin());
        let samples = (length * 8.0).ceil() as usize;
        let span = length - 1.0;
        for i in 0..=samples {
            let t = -span / 2.0 + span * i as f64 / samples as f64;
            let x = half as f64 + t * dx;
            let y = half as f64 + t * dy;
            let (x0, y0) = (x.floor(), y.floor());
            let (fx, fy) = (x - x0, y - y0);
            for (ox, oy, wt) in [
                (0, 0, (1.0 - fx) * (1.0 - fy)),
                (1, 0, fx * (1.0 - fy)),
                (0, 1, (1.0 - fx) * fy),
                (1, 1, fx * fy),
            ] {
                let xi = x0 as isize + ox;
                let yi = y0 as isize + oy;
                if xi >= 0 && yi >= 0 && (xi as usize) < size && (yi as usize) < size {
                    w[yi as usize * size + xi as usize] += wt;
                }
            }
        }
    }
    let total: f64 = w.iter().sum();
    Kernel { size, weights: w.iter().map(|v| (v / total) as f32).collect() }
}

/// Direct 2D convolution (correlation with the flipped kernel) with replicated borders.
pub fn convolve(plane: &Plane, k: &Kernel) -> Plane {
    let r = k.radius() as isize;
    let mut out = Plane::zeros(plane.width, plane.height);
    let taps: Vec<(isize, isize, f32)> = (0..k.size)
        .flat_map(|ky| (0..k.size).map(move |kx| (kx, ky)))
        .filter_map(|(kx, ky)| {
            let w = k.weights[ky * k.size + kx];
            (w != 0.0).then_some((kx as isize - r, ky as isize - r, w))
        })
        .collect();
    for y in 0..plane.height as isize {
        for x in 0..plane.width as isize {
            let mut acc = 0f32;
            for &(dx, dy, w) in &taps {
                // true convolution: output(x) = sum k(d) * in(x - d)
                acc += w * plane.at_clamped(x - dx, y - dy);
            }
            out.data[y as usize * plane.width + x as usize] = acc;
        }
    }
    out
}

/// Normalised 1D Gaussian taps of the given odd length.
pub fn gaussian_taps(len: usize, sigma: f64) -> Vec<f64> {
    let r = (len / 2) as isize;
    let w: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(plane: &Plane, sigma: f64) -> Plane {
    let r = (3.0 * sigma).ceil().max(1.0) as usize;
    let taps: Vec<f32> = gaussian_taps(2 * r + 1, sigma).into_iter().map(|v| v as f32).collect();
    separable(plane, &taps)
}

fn separable(plane: &Plane, taps: &[f32]) -> Plane {
    let r = (taps.len() / 2) as isize;
    let (w, h) = (plane.width, plane.height);
    let mut tmp = Plane::zeros(w, h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for (i, t) in taps.iter().enumerate() {
                acc += t * plane.at_clamped(x + i as isize - r, y);
            }
            tmp.data[y as usize * w + x as usize] = acc;
        }
    }
    let mut out = Plane::zeros(w, h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for (i, t) in taps.iter().enumerate() {
                acc += t * tmp.at_clamped(x, y + i as isize - r);
            }
            out.data[y as usize * w + x as usize] = acc;
        }
    }
    out
}

/// Mean over a `(2r+1)^2` window with replicated borders, via running sums.
pub fn box_mean(plane: &Plane, r: usize) -> Plane {
    let taps = vec![1.0 / (2 * r + 1) as f32; 2 * r + 1];
    separable(plane, &taps)
}

/// Minimum over a `(2r+1)^2` window (separable), replicated borders.
pub fn min_filter(plane: &Plane, r: usize) -> Plane {
    let (w, h) = (plane.width, plane.height);
    let ri = r as isize;
    let mut tmp = Plane::zeros(w, h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let m = (-ri..=ri).map(|d| plane.at_clamped(x + d, y)).fold(f32::INFINITY, f32::min);
            tmp.data[y as usize * w + x as usize] = m;
        }
    }
    let mut out = Plane::zeros(w, h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let m = (-ri..=ri).map(|d| tmp.at_clamped(x, y + d)).fold(f32::INFINITY, f32::min);
            out.data[y as usize * w + x as usize] = m;
        }
    }
    out
}

/// Maximum over a `(2r+1)^2` window, replicated borders.
pub fn max_filter(plane: &Plane, r: usize) -> Plane {
    let neg = Plane::new(plane.width, plane.height, plane.data.iter().map(|v| -v).collect());
    let m = min_filter(&neg, r);
    Plane::new(m.width, m.height, m.data.into_iter().map(|v| -v).collect())
}

/// Median over a `(2r+1)^2` window, replicated borders.
pub fn median_filter(plane: &Plane, r: usize) -> Plane {
    let ri = r as isize;
    let mut out = Plane::zeros(plane.width, plane.height);
    let mut buf = Vec::with_capacity((2 * r + 1) * (2 * r + 1));
    for y in 0..plane.height as isize {
        for x in 0..plane.width as isize {
            buf.clear();
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    buf.push(plane.at_clamped(x + dx, y + dy));
                }
            }
            out.data[y as usize * plane.width + x as usize] = median(&mut buf);
        }
    }
    out
}

/// Median of a scratch buffer (reorders it). Even lengths average the middle pair.
pub fn median(buf: &mut [f32]) -> f32 {
    let n = buf.len();
    assert!(n > 0);
    buf.sort_unstable_by(|a, b| a.total_cmp(b));
    if n % 2 == 1 {
        buf[n / 2]
    } else {
        0.5 * (buf[n / 2 - 1] + buf[n / 2])
    }
}

/// Value at quantile `q` in `[0,1]` (nearest rank).
pub fn quantile(values: &[f32], q: f64) -> f32 {
    let mut v = values.to_vec();
    v.sort_unstable_by(|a, b| a.total_cmp(b));
    let idx = ((v.len() - 1) as f64 * q.clamp(0.0, 1.0)).round() as usize;
    v[idx]
}

/// Central-difference gradients with replicated borders.
pub fn gradients(plane: &Plane) -> (Plane, Plane) {
    let (w, h) = (plane.width, plane.height);
    let mut gx = Plane::zeros(w, h);
    let mut gy = Plane::zeros(w, h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx.data[i] = 0.5 * (plane.at_clamped(x + 1, y) - plane.at_clamped(x - 1, y));
            gy.data[i] = 0.5 * (plane.at_clamped(x, y + 1) - plane.at_clamped(x, y - 1));
        }
    }
    (gx, gy)
}

/// Row-major 2D FFT buffer helper.
pub struct Fft2 {
    pub width: usize,
    pub height: usize,
    row_fwd: std::sync::Arc<dyn rustfft::Fft<f64>>,
    row_inv: std::sync::Arc<dyn rustfft::Fft<f64>>,
    col_fwd: std::sync::Arc<dyn rustfft::Fft<f64>>,
    col_inv: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl Fft2 {
    pub fn new(width: usize, height: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            width,
            height,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    pub fn forward(&self, buf: &mut [Complex<f64>]) {
        self.apply(buf, true);
    }

    /// Inverse transform, including the `1/(w*h)` normalisation.
    pub fn inverse(&self, buf: &mut [Complex<f64>]) {
        self.apply(buf, false);
        let s = 1.0 / (self.width * self.height) as f64;
        for v in buf.iter_mut() {
            *v *= s;
        }
    }

    fn apply(&self, buf: &mut [Complex<f64>], forward: bool) {
        let (w, h) = (self.width, self.height);
        assert_eq!(buf.len(), w * h);
        let (row, col) = if forward { (&self.row_fwd, &self.col_fwd) } else { (&self.row_inv, &self.col_inv) };
        for r in buf.chunks_exact_mut(w) {
            row.process(r);
        }
        let mut column = vec![Complex::new(0.0, 0.0); h];
        for x in 0..w {
            for y in 0..h {
                column[y] = buf[y * w + x];
            }
            col.process(&mut column);
            for y in 0..h {
                buf[y * w + x] = column[y];
            }
        }
    }
}
