use std::fs;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{list_frames, sample_frames, Label, Manifest, VideoSample, POSED, SPONTANEOUS};

/// Synthetic smile-video generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub videos_per_subject: usize,
    /// Side of the square canvas in pixels.
    pub resolution: usize,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
    pub source_fps: f64,
    /// Inclusive clip length range in seconds.
    pub duration: (f64, f64),
    /// Standard deviation of additive pixel noise on the [0, 1] scale.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 12,
            videos_per_subject: 4,
            resolution: 96,
            channels: 3,
            source_fps: 25.0,
            duration: (1.2, 2.0),
            noise_level: 0.03,
            seed: 0,
        }
    }
}

/// Frame count of a clip of `seconds` at `fps`.
fn frame_count(seconds: f64, fps: f64) -> usize {
    (seconds * fps).round() as usize
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_subjects == 0 || self.videos_per_subject == 0 {
            return bad("subject and video counts must be positive".into());
        }
        if self.resolution < 16 {
            return bad(format!("canvas resolution {} is below 16", self.resolution));
        }
        if !(self.channels == 1 || self.channels == 3) {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        let (lo, hi) = self.duration;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
            return bad(format!("invalid duration range {lo}..{hi}"));
        }
        if !(self.noise_level.is_finite() && self.noise_level >= 0.0) {
            return bad(format!("invalid noise level {}", self.noise_level));
        }
        if !(self.source_fps.is_finite() && self.source_fps >= 5.0) {
            return bad(format!("source_fps {} is below 5", self.source_fps));
        }
        if sample_frames(frame_count(lo, self.source_fps), self.source_fps, 5.0).is_err() {
            return bad(format!("{lo} s clips give fewer than 2 frames at 5 fps"));
        }
        Ok(())
    }

    /// Label of video `v` of any subject: even positions are posed.
    pub fn label_of(video: usize) -> Label {
        if video % 2 == 0 {
            POSED
        } else {
            SPONTANEOUS
        }
    }

    /// (spontaneous, posed) counts the generator will emit.
    pub fn expected_counts(&self) -> (usize, usize) {
        let spont = self.videos_per_subject / 2;
        (
            self.n_subjects * spont,
            self.n_subjects * (self.videos_per_subject - spont),
        )
    }
}

/// Per-subject face layout, in canvas-relative units.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    cx: f64,
    cy: f64,
    background: f64,
    skin: f64,
    mouth_width: f64,
}

impl Geometry {
    fn sample(rng: &mut impl Rng) -> Self {
        Self {
            cx: 0.5 + rng.random_range(-0.04..0.04),
            cy: 0.5 + rng.random_range(-0.04..0.04),
            background: rng.random_range(0.15..0.3),
            skin: rng.random_range(0.55..0.75),
            mouth_width: rng.random_range(0.08..0.10),
        }
    }
}

const EYE_BASE: f64 = 0.2;
const EYE_GAIN: f64 = 0.35;
const MOUTH_LEVEL: f64 = 0.1;
const SKIN_TINT: [f64; 3] = [1.0, 0.82, 0.7];

/// Temporal amplitude profile of one clip, over normalized time in [0, 1].
#[derive(Clone, Copy, Debug)]
enum Envelope {
    /// Linear onset, flat apex, linear offset of equal duration.
    Trapezoid { start: f64, ramp: f64, end: f64, peak: f64 },
    /// Gaussian-shaped rise and slower decay around `center`.
    Smooth { center: f64, rise: f64, decay: f64, peak: f64, jitter: f64 },
}

impl Envelope {
    fn sample(label: Label, rng: &mut impl Rng) -> Self {
        let peak = rng.random_range(0.8..1.0);
        if label == POSED {
            Envelope::Trapezoid {
                start: rng.random_range(0.08..0.18),
                ramp: rng.random_range(0.10..0.15),
                end: 1.0 - rng.random_range(0.08..0.18),
                peak,
            }
        } else {
            Envelope::Smooth {
                center: rng.random_range(0.35..0.55),
                rise: rng.random_range(0.10..0.15),
                decay: rng.random_range(0.25..0.35),
                peak,
                jitter: 0.01,
            }
        }
    }

    fn at(&self, u: f64, rng: &mut impl Rng) -> f64 {
        match *self {
            Envelope::Trapezoid { start, ramp, end, peak } => {
                let up = ((u - start) / ramp).clamp(0.0, 1.0);
                let down = ((end - u) / ramp).clamp(0.0, 1.0);
                peak * up.min(down)
            }
            Envelope::Smooth { center, rise, decay, peak, jitter } => {
                let u = u + jitter * rng.sample::<f64, _>(rand_distr::StandardNormal);
                let tau = if u < center { rise } else { decay };
                peak * (-((u - center) / tau).powi(2)).exp()
            }
        }
    }
}

fn inside(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
    dx * dx + dy * dy <= 1.0
}

fn render(
    g: &Geometry,
    amplitude: f64,
    eye: f64,
    size: usize,
    channels: usize,
    noise: Option<&Normal<f64>>,
    rng: &mut impl Rng,
) -> Vec<u8> {
    let mut buf = Vec::with_capacity(size * size * channels);
    let mouth_rx = g.mouth_width + 0.10 * amplitude;
    let mouth_ry = 0.015 + 0.03 * amplitude;
    for r in 0..size {
        let y = (r as f64 + 0.5) / size as f64;
        for c in 0..size {
            let x = (c as f64 + 0.5) / size as f64;
            let (level, tinted) = if !inside(x, y, g.cx, g.cy, 0.36, 0.44) {
                (g.background, false)
            } else if inside(x, y, g.cx, g.cy + 0.18, mouth_rx, mouth_ry) {
                (MOUTH_LEVEL, false)
            } else if inside(x, y, g.cx - 0.14, g.cy - 0.12, 0.07, 0.035)
                || inside(x, y, g.cx + 0.14, g.cy - 0.12, 0.07, 0.035)
            {
                (eye, false)
            } else {
                (g.skin, true)
            };
            for ch in 0..channels {
                let tint = if tinted && channels == 3 { SKIN_TINT[ch] } else { 1.0 };
                let n = noise.map_or(0.0, |d| d.sample(rng));
                buf.push(((level * tint + n).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    buf
}

struct VideoPlan {
    id: String,
    subject: String,
    label: Label,
    geometry: Geometry,
    frames: usize,
    seed: u64,
}

fn write_video(cfg: &SynthConfig, plan: &VideoPlan, dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let envelope = Envelope::sample(plan.label, &mut rng);
    let noise = (cfg.noise_level > 0.0).then(|| Normal::new(0.0, cfg.noise_level).expect("valid noise"));
    let color = if cfg.channels == 3 {
        image::ExtendedColorType::Rgb8
    } else {
        image::ExtendedColorType::L8
    };
    for i in 0..plan.frames {
        let u = i as f64 / (plan.frames - 1).max(1) as f64;
        let a = envelope.at(u, &mut rng).clamp(0.0, 1.0);
        let eye = if plan.label == SPONTANEOUS {
            EYE_BASE + EYE_GAIN * a
        } else {
            EYE_BASE
        };
        let pixels = render(&plan.geometry, a, eye, cfg.resolution, cfg.channels, noise.as_ref(), &mut rng);
        let path = dir.join(format!("{i:06}.png"));
        let side = cfg.resolution as u32;
        image::save_buffer(&path, &pixels, side, side, color).map_err(|source| Error::Image { path, source })?;
    }
    Ok(())
}

/// Renders the synthetic corpus under `out_dir/frames/<id>/` and writes
/// `out_dir/manifest.json`. Output bytes depend only on `config`.
pub fn synth_generate(config: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut plans = Vec::with_capacity(config.n_subjects * config.videos_per_subject);
    for s in 0..config.n_subjects {
        let geometry = Geometry::sample(&mut rng);
        for v in 0..config.videos_per_subject {
            let seconds = rng.random_range(config.duration.0..=config.duration.1);
            plans.push(VideoPlan {
                id: format!("s{s:03}_v{v:02}"),
                subject: format!("s{s:03}"),
                label: SynthConfig::label_of(v),
                geometry,
                frames: frame_count(seconds, config.source_fps),
                seed: rng.next_u64(),
            });
        }
    }

    let frames_root = out_dir.join("frames");
    plans
        .par_iter()
        .try_for_each(|p| write_video(config, p, &frames_root.join(&p.id)))?;

    let samples = plans
        .into_iter()
        .map(|p| {
            let frame_dir = frames_root.join(&p.id);
            let frame_count = list_frames(&frame_dir)?.len();
            Ok(VideoSample {
                id: p.id,
                subject_id: p.subject,
                label: p.label,
                frame_dir,
                source_fps: config.source_fps,
                crop: None,
                frame_count,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest::new(samples)?;
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_subjects: 2,
            videos_per_subject: 3,
            resolution: 24,
            duration: (0.4, 0.6),
            seed: 9,
            ..SynthConfig::default()
        }
    }

    fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                    out.push((rel, fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        synth_generate(&small(), a.path()).unwrap();
        synth_generate(&small(), b.path()).unwrap();
        let (ta, tb) = (tree_bytes(a.path()), tree_bytes(b.path()));
        assert!(ta.len() > 6);
        assert_eq!(ta, tb);
        let c = tempfile::tempdir().unwrap();
        synth_generate(&SynthConfig { seed: 10, ..small() }, c.path()).unwrap();
        assert_ne!(ta, tree_bytes(c.path()));
    }

    #[test]
    fn counts_match_request() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = small();
        let m = synth_generate(&cfg, tmp.path()).unwrap();
        let c = m.counts();
        assert_eq!((c.spontaneous, c.posed), cfg.expected_counts());
        assert_eq!(c.subjects, 2);
        let reloaded = Manifest::load(tmp.path().join("manifest.json")).unwrap();
        assert_eq!(reloaded, m);
        for s in m.samples() {
            assert!(sample_frames(s.frame_count, s.source_fps, 5.0).is_ok());
        }
    }

    #[test]
    fn grayscale_frames_decode_as_single_channel() {
        let tmp = tempfile::tempdir().unwrap();
        let m = synth_generate(&SynthConfig { channels: 1, ..small() }, tmp.path()).unwrap();
        let first = &list_frames(&m.samples()[0].frame_dir).unwrap()[0];
        let img = super::super::load_png(first).unwrap();
        assert_eq!((img.width, img.channels), (24, 1));
    }

    #[test]
    fn rejects_bad_configs() {
        for cfg in [
            SynthConfig { n_subjects: 0, ..small() },
            SynthConfig { duration: (0.1, 0.2), ..small() },
            SynthConfig { duration: (1.0, 0.5), ..small() },
            SynthConfig { channels: 2, ..small() },
            SynthConfig { noise_level: -1.0, ..small() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn envelopes_have_expected_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Envelope::Trapezoid { start: 0.1, ramp: 0.2, end: 0.9, peak: 1.0 };
        assert_eq!(t.at(0.0, &mut rng), 0.0);
        assert!((t.at(0.2, &mut rng) - 0.5).abs() < 1e-12);
        assert!((t.at(0.8, &mut rng) - 0.5).abs() < 1e-12);
        assert_eq!(t.at(0.5, &mut rng), 1.0);
        let s = Envelope::Smooth { center: 0.4, rise: 0.1, decay: 0.3, peak: 1.0, jitter: 0.0 };
        assert_eq!(s.at(0.4, &mut rng), 1.0);
        // Same offset from the peak decays less on the slow side.
        assert!(s.at(0.6, &mut rng) > s.at(0.2, &mut rng));
    }
}
