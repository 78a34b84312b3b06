//! RGB image buffer with real-valued intensities and lossless PNG I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Interleaved RGB image, row-major, intensities in `[0, 1]`.
///
/// Values are immutable once built: every operation in the crate returns a
/// fresh buffer, so buffers can be shared freely across threads.
#[derive(Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl std::fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImageBuffer")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("mean", &self.mean())
            .finish()
    }
}

impl ImageBuffer {
    /// Builds a buffer from interleaved RGB samples, rejecting values outside `[0, 1]`.
    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(width, height, data.len())?;
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!("intensity {bad} outside [0,1]")));
        }
        Ok(ImageBuffer { width, height, data })
    }

    /// Builds a buffer, clamping every sample into `[0, 1]` (NaN maps to 0).
    pub fn from_vec_clamped(width: usize, height: usize, mut data: Vec<f32>) -> Result<Self> {
        check_dims(width, height, data.len())?;
        for v in &mut data {
            *v = clamp01(*v);
        }
        Ok(ImageBuffer { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        ImageBuffer { width, height, data: vec![clamp01(value); width * height * CHANNELS] }
    }

    /// Builds an image by evaluating `f(x, y)` for each pixel; output is clamped.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        let mut data = Vec::with_capacity(width * height * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(x, y).map(clamp01));
            }
        }
        ImageBuffer { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn same_dims(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Extracts one channel as a planar vector.
    pub fn channel(&self, c: usize) -> Vec<f32> {
        self.data.iter().skip(c).step_by(CHANNELS).copied().collect()
    }

    /// Reassembles an image from three planes, clamping.
    pub fn from_planes(width: usize, height: usize, planes: [&[f32]; 3]) -> Result<Self> {
        let n = width * height;
        if planes.iter().any(|p| p.len() != n) {
            return Err(Error::InvalidImage("plane length mismatch".into()));
        }
        let mut data = Vec::with_capacity(n * CHANNELS);
        for i in 0..n {
            data.extend(planes.map(|p| clamp01(p[i])));
        }
        Ok(ImageBuffer { width, height, data })
    }

    /// Rec.601 luma plane.
    pub fn luma(&self) -> Vec<f32> {
        self.data
            .chunks_exact(CHANNELS)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Applies `f` to every sample; output is clamped.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        ImageBuffer {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| clamp01(f(v))).collect(),
        }
    }

    /// Snaps every sample onto the k/255 grid, i.e. what a save/load cycle yields.
    pub fn quantized(&self) -> Self {
        ImageBuffer {
            width: self.width,
            height: self.height,
            data: self.to_bytes().into_iter().map(byte_to_intensity).collect(),
        }
    }

    /// 8-bit interleaved RGB bytes, rounding half away from zero.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| intensity_to_byte(v)).collect()
    }

    pub fn from_rgb_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        check_dims(width, height, bytes.len())?;
        Ok(ImageBuffer { width, height, data: bytes.iter().map(|&b| byte_to_intensity(b)).collect() })
    }

    /// The `w`x`h` window whose top-left corner is `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(Error::InvalidImage(format!(
                "crop {w}x{h}+{x}+{y} outside {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * CHANNELS);
        for row in y..y + h {
            let start = (row * self.width + x) * CHANNELS;
            data.extend_from_slice(&self.data[start..start + w * CHANNELS]);
        }
        Ok(ImageBuffer { width: w, height: h, data })
    }

    /// Mean absolute difference between two same-size images.
    pub fn mean_abs_diff(&self, other: &ImageBuffer) -> Result<f64> {
        if !self.same_dims(other) {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs() as f64).sum();
        Ok(s / self.data.len() as f64)
    }
}

fn check_dims(width: usize, height: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidImage("zero-sized image".into()));
    }
    if len != width * height * CHANNELS {
        return Err(Error::InvalidImage(format!(
            "data length {len} != {width}x{height}x{CHANNELS}"
        )));
    }
    Ok(())
}

#[inline]
pub fn clamp01(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

#[inline]
pub fn byte_to_intensity(b: u8) -> f32 {
    b as f32 / 255.0
}

/// `round(v * 255)`, half away from zero (`f32::round` semantics).
#[inline]
pub fn intensity_to_byte(v: f32) -> u8 {
    (clamp01(v) as f64 * 255.0).round() as u8
}

/// Reads an 8-bit RGB or grayscale PNG. Grayscale is replicated to three channels.
/// Loads every `.png` in a directory, sorted by file name, keyed by stem.
pub fn load_png_dir(dir: impl AsRef<Path>) -> Result<Vec<(String, ImageBuffer)>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::FileMissing(dir.to_path_buf()));
    }
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((stem, load_image(&p)?))
        })
        .collect()
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::FileMissing(path.to_path_buf()));
    }
    let file = File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut sig = [0u8; 8];
    {
        use std::io::{Read, Seek, SeekFrom};
        let n = reader.read(&mut sig)?;
        if n < 8 || sig != [0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A] {
            return Err(Error::UnsupportedFormat(format!("{} is not a PNG file", path.display())));
        }
        reader.seek(SeekFrom::Start(0))?;
    }
    let mut decoder = png::Decoder::new(reader);
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| Error::CorruptData(e.to_string()))?;
    let info = reader.info();
    let (color, depth) = (info.color_type, info.bit_depth);
    if depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedFormat(format!("bit depth {depth:?}, only 8-bit supported")));
    }
    match color {
        png::ColorType::GrayscaleAlpha | png::ColorType::Rgba => {
            return Err(Error::UnsupportedFormat("alpha channel not supported".into()))
        }
        png::ColorType::Indexed if info.trns.is_some() => {
            return Err(Error::UnsupportedFormat("palette transparency not supported".into()))
        }
        _ => {}
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::CorruptData("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(|e| Error::CorruptData(e.to_string()))?;
    let bytes = &buf[..frame.buffer_size()];
    let rgb: Vec<u8> = match frame.color_type {
        png::ColorType::Grayscale => bytes.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::Rgb => bytes.to_vec(),
        other => return Err(Error::UnsupportedFormat(format!("color type {other:?}"))),
    };
    ImageBuffer::from_rgb_bytes(width, height, &rgb).map_err(|e| Error::CorruptData(e.to_string()))
}

/// Writes an 8-bit RGB PNG.
pub fn save_image(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let w = BufWriter::new(file);
    let mut encoder = png::Encoder::new(w, img.width as u32, img.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(png_io)?;
    writer.write_image_data(&img.to_bytes()).map_err(png_io)?;
    writer.finish().map_err(png_io)?;
    Ok(())
}

fn png_io(e: png::EncodingError) -> Error {
    match e {
        png::EncodingError::IoError(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(other.to_string())),
    }
}
