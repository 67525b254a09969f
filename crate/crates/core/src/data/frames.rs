use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::VideoSample;

/// Axis-aligned crop box in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl CropBox {
    pub fn from_array([x, y, width, height]: [u32; 4]) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Input(format!("degenerate crop box {width}x{height}")));
        }
        Ok(Self { x, y, width, height })
    }

    pub fn to_array(self) -> [u32; 4] {
        [self.x, self.y, self.width, self.height]
    }
}

/// Decoded 8-bit image, interleaved `height × width × channels` with one or
/// three channels.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub data: Vec<u8>,
}

impl RawImage {
    pub fn new(width: u32, height: u32, channels: u8, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::Input(format!(
                "unsupported image geometry {width}x{height}x{channels}"
            )));
        }
        if data.len() != width as usize * height as usize * channels as usize {
            return Err(Error::Input(format!(
                "image buffer has {} bytes, expected {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    /// Pixel value at (row, col) converted to `want` channels, in 0..=255.
    fn pixel(&self, row: usize, col: usize, want: usize, out: &mut [f32; 3]) {
        let c = self.channels as usize;
        let base = (row * self.width as usize + col) * c;
        let px = &self.data[base..base + c];
        match (c, want) {
            (1, _) => out.iter_mut().for_each(|o| *o = px[0] as f32),
            (3, 1) => out[0] = 0.299 * px[0] as f32 + 0.587 * px[1] as f32 + 0.114 * px[2] as f32,
            _ => (0..3).for_each(|i| out[i] = px[i] as f32),
        }
    }
}

/// Decodes an 8-bit PNG; alpha is dropped, grayscale stays single-channel.
pub fn load_png(path: &Path) -> Result<RawImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width(), img.height());
    if img.color().has_color() {
        RawImage::new(w, h, 3, img.into_rgb8().into_raw())
    } else {
        RawImage::new(w, h, 1, img.into_luma8().into_raw())
    }
}

/// PNG frames of a directory in temporal order. Names must be numeric
/// (`000042.png`) and indices distinct.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut frames = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let index: u64 = stem
            .parse()
            .ok()
            .filter(|_| stem.bytes().all(|b| b.is_ascii_digit()))
            .ok_or_else(|| Error::Data(format!("frame name {} is not a numeric index", path.display())))?;
        frames.push((index, path));
    }
    frames.sort();
    if let Some(w) = frames.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Data(format!(
            "frames {} and {} share index {}",
            w[0].1.display(),
            w[1].1.display(),
            w[0].0
        )));
    }
    Ok(frames.into_iter().map(|(_, p)| p).collect())
}

/// Indices `floor(k * source_fps / target_fps)` for k = 0, 1, ... below
/// `frame_count`.
pub fn sample_frames(frame_count: usize, source_fps: f64, target_fps: f64) -> Result<Vec<usize>> {
    if !(target_fps.is_finite() && target_fps > 0.0 && source_fps.is_finite()) || source_fps < target_fps {
        return Err(Error::Argument(format!(
            "need source_fps >= target_fps > 0, got {source_fps} and {target_fps}"
        )));
    }
    let mut out = Vec::new();
    for k in 0usize.. {
        let idx = (k as f64 * source_fps / target_fps).floor() as usize;
        if idx >= frame_count {
            break;
        }
        out.push(idx);
    }
    if out.len() < 2 {
        return Err(Error::Input(format!(
            "{frame_count} frames at {source_fps} fps yield {} frame(s) at {target_fps} fps, need at least 2",
            out.len()
        )));
    }
    Ok(out)
}

/// Crop (or centered square), bilinear resize with half-pixel centers, and
/// scale to [0, 1]. Output is `channels × resolution × resolution`.
pub fn preprocess_frame(
    image: &RawImage,
    crop: Option<CropBox>,
    resolution: usize,
    channels: usize,
) -> Result<Tensor<f32>> {
    if resolution == 0 || !(channels == 1 || channels == 3) {
        return Err(Error::Argument(format!(
            "cannot produce {channels}x{resolution}x{resolution} frames"
        )));
    }
    let (w, h) = (image.width, image.height);
    let bx = match crop {
        Some(b) => {
            if b.width == 0 || b.height == 0 {
                return Err(Error::Input(format!("degenerate crop box {}x{}", b.width, b.height)));
            }
            if b.x as u64 + b.width as u64 > w as u64 || b.y as u64 + b.height as u64 > h as u64 {
                return Err(Error::Input(format!(
                    "crop box {:?} exceeds {w}x{h} image",
                    b.to_array()
                )));
            }
            b
        }
        None => {
            let side = w.min(h);
            CropBox {
                x: (w - side) / 2,
                y: (h - side) / 2,
                width: side,
                height: side,
            }
        }
    };

    let taps = |len: u32, offset: u32| -> Vec<(usize, usize, f32)> {
        let scale = len as f64 / resolution as f64;
        (0..resolution)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(len as usize - 1);
                (lo + offset as usize, hi + offset as usize, (s - lo as f64) as f32)
            })
            .collect()
    };
    let xs = taps(bx.width, bx.x);
    let ys = taps(bx.height, bx.y);

    let plane = resolution * resolution;
    let mut out = vec![0.0f32; channels * plane];
    let (mut p00, mut p01, mut p10, mut p11) = ([0.0; 3], [0.0; 3], [0.0; 3], [0.0; 3]);
    for (r, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (c, &(x0, x1, fx)) in xs.iter().enumerate() {
            image.pixel(y0, x0, channels, &mut p00);
            image.pixel(y0, x1, channels, &mut p01);
            image.pixel(y1, x0, channels, &mut p10);
            image.pixel(y1, x1, channels, &mut p11);
            for ch in 0..channels {
                let top = p00[ch] + (p01[ch] - p00[ch]) * fx;
                let bottom = p10[ch] + (p11[ch] - p10[ch]) * fx;
                let v = (top + (bottom - top) * fy) / 255.0;
                out[ch * plane + r * resolution + c] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![channels, resolution, resolution], out)
}

/// Loads the frames of `sample` selected at `target_fps` as a
/// `[frames, channels, R, R]` clip.
pub fn load_clip(
    sample: &VideoSample,
    target_fps: f64,
    resolution: usize,
    channels: usize,
) -> Result<Tensor<f32>> {
    let files = list_frames(&sample.frame_dir)?;
    let picks = sample_frames(files.len(), sample.source_fps, target_fps)
        .map_err(|e| Error::Input(format!("video `{}`: {e}", sample.id)))?;
    let mut data = Vec::with_capacity(picks.len() * channels * resolution * resolution);
    for &i in &picks {
        let img = load_png(&files[i])?;
        let frame = preprocess_frame(&img, sample.crop, resolution, channels)
            .map_err(|e| Error::Input(format!("video `{}`, {}: {e}", sample.id, files[i].display())))?;
        data.extend_from_slice(frame.data());
    }
    Tensor::new(vec![picks.len(), channels, resolution, resolution], data)
}
