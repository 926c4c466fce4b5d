//! Procedural stand-in for ultra-widefield retinal images.
//!
//! Each scene is an elliptical retina field with a radial vignette, an optic
//! disc and a fovea placed exactly five disc radii apart. Reflectance (RG)
//! scenes show a bright disc; autofluorescence (AF) scenes show a dark disc on
//! a brighter, noisier background. The fovea is a dark blob in both.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{save_manifest, AnnotationRecord, Gaze, Landmarks, Laterality, Modality};
use crate::error::{arg_err, Error, Result};
use crate::evaluation::od_radius;
use crate::image_io::{write_pnm, RawImage};

/// Pair spacing in disc radii, the same constant the evaluator divides by.
pub const OD_FOVEA_RADII: f64 = 5.0;

const MAX_PLACEMENT_TRIES: usize = 100;

/// A fixed choice or a per-image coin flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Choice<T> {
    Fixed(T),
    Mixed,
}

impl<T: fmt::Display> fmt::Display for Choice<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Choice::Fixed(v) => write!(f, "{}", v.to_string().to_lowercase()),
            Choice::Mixed => f.write_str("mixed"),
        }
    }
}

impl<T: FromStr<Err = Error>> FromStr for Choice<T> {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("mixed") {
            Ok(Choice::Mixed)
        } else {
            s.to_ascii_uppercase().parse().map(Choice::Fixed)
        }
    }
}

impl<T: Copy> Choice<T> {
    fn pick<R: Rng + ?Sized>(self, rng: &mut R, a: T, b: T) -> T {
        match self {
            Choice::Fixed(v) => v,
            Choice::Mixed => {
                if rng.random_bool(0.5) {
                    a
                } else {
                    b
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub mode: Choice<Modality>,
    pub gaze: Choice<Gaze>,
    pub count: usize,
    /// Disc radius range as a fraction of the image width.
    pub od_radius_range: (f64, f64),
    /// Maximum tilt of the disc-fovea axis from horizontal, in degrees.
    pub angle_jitter_deg: f64,
    pub noise_sigma_rg: f64,
    pub noise_sigma_af: f64,
    pub images_per_subject: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 244,
            height: 192,
            mode: Choice::Mixed,
            gaze: Choice::Mixed,
            count: 100,
            od_radius_range: (0.03, 0.05),
            angle_jitter_deg: 20.0,
            noise_sigma_rg: 4.0,
            noise_sigma_af: 10.0,
            images_per_subject: 4,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn margin(&self, radius: f64) -> f64 {
        radius + 2.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return arg_err("count must be at least 1");
        }
        if self.images_per_subject == 0 {
            return arg_err("images_per_subject must be at least 1");
        }
        let (lo, hi) = self.od_radius_range;
        if !(lo > 0.0 && lo <= hi) {
            return arg_err(format!("bad od_radius_range ({lo}, {hi})"));
        }
        if !(0.0..90.0).contains(&self.angle_jitter_deg) {
            return arg_err("angle_jitter must be in [0, 90) degrees");
        }
        if self.noise_sigma_rg < 0.0 || self.noise_sigma_af < 0.0 {
            return arg_err("noise sigma must be non-negative");
        }
        let r = hi * self.width as f64;
        let span_x = OD_FOVEA_RADII * r + 2.0 * self.margin(r);
        let span_y = OD_FOVEA_RADII * r * self.angle_jitter_deg.to_radians().sin() + 2.0 * self.margin(r);
        if span_x >= self.width as f64 || span_y >= self.height as f64 {
            return arg_err(format!(
                "a {}x{} image cannot hold a disc-fovea pair with radius {r:.1} px",
                self.width, self.height
            ));
        }
        Ok(())
    }
}

/// Exact ground truth of a rendered scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTruth {
    /// Pixel coordinates; pixel `(col, row)` covers `[col, col+1) x [row, row+1)`.
    pub landmarks: Landmarks,
    pub laterality: Laterality,
    pub modality: Modality,
    pub gaze: Gaze,
    pub od_radius_px: f64,
}

/// Renders one scene.
pub fn generate_sample<R: Rng + ?Sized>(config: &SynthConfig, rng: &mut R) -> Result<(RawImage, SceneTruth)> {
    config.validate()?;
    let modality = config.mode.pick(rng, Modality::Rg, Modality::Af);
    let gaze = config.gaze.pick(rng, Gaze::Cp, Gaze::Es);
    let laterality = if rng.random_bool(0.5) { Laterality::Left } else { Laterality::Right };
    let landmarks = place(config, rng, laterality, gaze)?;
    let od_radius_px = od_radius(landmarks)?;
    let truth = SceneTruth { landmarks, laterality, modality, gaze, od_radius_px };
    let image = render(config, rng, &truth);
    Ok((image, truth))
}

fn place<R: Rng + ?Sized>(config: &SynthConfig, rng: &mut R, laterality: Laterality, gaze: Gaze) -> Result<Landmarks> {
    let (w, h) = (config.width as f64, config.height as f64);
    for _ in 0..MAX_PLACEMENT_TRIES {
        let (lo, hi) = config.od_radius_range;
        let r = rng.random_range(lo..=hi) * w;
        let jitter = config.angle_jitter_deg.to_radians();
        let theta = if jitter > 0.0 { rng.random_range(-jitter..jitter) } else { 0.0 };
        let side = match laterality {
            Laterality::Right => 1.0,
            Laterality::Left => -1.0,
        };

        let (mut fx, mut fy) = (
            w / 2.0 + rng.random_range(-0.06..0.06) * w,
            h / 2.0 + rng.random_range(-0.06..0.06) * h,
        );
        if gaze == Gaze::Es {
            let shift = rng.random_range(0.2..0.35);
            match rng.random_range(0..4) {
                0 => fy -= shift * h,
                1 => fy += shift * h,
                2 => fx -= shift * w,
                _ => fx += shift * w,
            }
        }
        let ox = fx + side * OD_FOVEA_RADII * r * theta.cos();
        let oy = fy + OD_FOVEA_RADII * r * theta.sin();

        let m = config.margin(r);
        let inside = |x: f64, y: f64| x >= m && x <= w - m && y >= m && y <= h - m;
        if inside(fx, fy) && inside(ox, oy) {
            return Ok(Landmarks::new(ox, oy, fx, fy));
        }
    }
    Err(Error::Internal(format!(
        "could not place landmarks inside a {}x{} image after {MAX_PLACEMENT_TRIES} tries",
        config.width, config.height
    )))
}

struct Palette {
    background: f64,
    disc: f64,
    fovea: f64,
    noise: f64,
}

fn palette(config: &SynthConfig, modality: Modality) -> Palette {
    match modality {
        Modality::Rg => Palette { background: 110.0, disc: 70.0, fovea: -45.0, noise: config.noise_sigma_rg },
        Modality::Af => Palette { background: 140.0, disc: -60.0, fovea: -40.0, noise: config.noise_sigma_af },
    }
}

fn render<R: Rng + ?Sized>(config: &SynthConfig, rng: &mut R, truth: &SceneTruth) -> RawImage {
    let (w, h) = (config.width, config.height);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (ax, ay) = (0.49 * w as f64, 0.49 * h as f64);
    let pal = palette(config, truth.modality);
    let tilt_x = rng.random_range(-0.15..0.15);
    let tilt_y = rng.random_range(-0.15..0.15);
    let noise = Normal::new(0.0, pal.noise.max(1e-12)).expect("finite sigma");
    let r = truth.od_radius_px;
    let (odx, ody) = truth.landmarks.od();
    let (fx, fy) = truth.landmarks.fovea();
    let fovea_sigma = 0.8 * r;

    let mut data = Vec::with_capacity(w * h);
    for row in 0..h {
        for col in 0..w {
            let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
            let rho2 = ((x - cx) / ax).powi(2) + ((y - cy) / ay).powi(2);
            let mut v = if rho2 <= 1.0 {
                let light = 1.0 + tilt_x * (x - cx) / w as f64 + tilt_y * (y - cy) / h as f64;
                let mut v = pal.background * (1.0 - 0.45 * rho2) * light;
                let d_od = ((x - odx).powi(2) + (y - ody).powi(2)).sqrt();
                // one-pixel soft edge
                let coverage = (r + 0.5 - d_od).clamp(0.0, 1.0);
                v += pal.disc * coverage;
                let d2_fovea = (x - fx).powi(2) + (y - fy).powi(2);
                v += pal.fovea * (-d2_fovea / (2.0 * fovea_sigma * fovea_sigma)).exp();
                v
            } else {
                8.0
            };
            if pal.noise > 0.0 {
                v += noise.sample(rng);
            }
            data.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    RawImage::gray(w, h, data).expect("buffer sized to the image")
}

/// Deterministic generator for image `index` of a dataset.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn image_file_name(index: usize) -> String {
    format!("img_{index:05}.pgm")
}

pub fn subject_of(config: &SynthConfig, index: usize) -> String {
    format!("S{:05}", index / config.images_per_subject)
}

/// Renders scene `index` of the dataset described by `config`.
pub fn generate_indexed(config: &SynthConfig, index: usize) -> Result<(RawImage, AnnotationRecord, SceneTruth)> {
    let mut rng = sample_rng(config.seed, index);
    let (image, truth) = generate_sample(config, &mut rng)?;
    let record = AnnotationRecord {
        image_path: image_file_name(index),
        subject_id: subject_of(config, index),
        laterality: truth.laterality,
        modality: truth.modality,
        gaze: truth.gaze,
        landmarks: truth.landmarks,
        width: config.width,
        height: config.height,
        flipped: false,
    };
    Ok((image, record, truth))
}

/// Writes `count` PGM images and `manifest.csv` into `out_dir`; returns the
/// manifest path. `comments` are written as header comments in every file.
pub fn generate_dataset(config: &SynthConfig, out_dir: &Path, comments: &[String]) -> Result<PathBuf> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut records = Vec::with_capacity(config.count);
    for index in 0..config.count {
        let (image, record, _) = generate_indexed(config, index)?;
        write_pnm(&out_dir.join(&record.image_path), &image, comments)?;
        records.push(record);
    }
    let manifest = out_dir.join("manifest.csv");
    save_manifest(&manifest, &records, comments)?;
    Ok(manifest)
}
