//! Procedural genuine/print/replay/mask face images.
//!
//! Every class starts from the same face-like blob. Attack classes add a
//! class-specific signature: print and replay cues live in the lower-centre
//! region of the face, mask cues cover the whole face. Frames of one video
//! share a random pose and illumination so video-level splits matter.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{AttackClass, DatasetManifest, Granularity, MaskSubtype, SampleRecord};
use crate::error::{Error, Result};
use crate::imaging::{save_gray_as_rgb, GrayImage};
use crate::mix_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    /// `(height, width)`.
    pub image_size: (usize, usize),
    pub videos_per_class: usize,
    pub frames_per_video: usize,
    pub class_signature_strength: f64,
}

impl SynthSpec {
    pub fn new(seed: u64, size: usize, videos_per_class: usize, frames_per_video: usize) -> Self {
        SynthSpec {
            seed,
            image_size: (size, size),
            videos_per_class,
            frames_per_video,
            class_signature_strength: 1.0,
        }
    }

    pub fn with_strength(mut self, s: f64) -> Self {
        self.class_signature_strength = s;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h < 32 || w < 32 {
            return Err(Error::InvalidInput(format!(
                "synthetic images must be at least 32x32, got {h}x{w}"
            )));
        }
        if self.videos_per_class == 0 || self.frames_per_video == 0 {
            return Err(Error::InvalidInput(
                "videos_per_class and frames_per_video must be positive".into(),
            ));
        }
        let s = self.class_signature_strength;
        if !(s > 0.0 && s <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "class_signature_strength must lie in (0, 1], got {s}"
            )));
        }
        Ok(())
    }
}

/// Lower-centre region holding the print and replay cues, as
/// `(x0, y0, x1, y1)` in pixels (half-open).
pub fn signature_region(height: usize, width: usize) -> (usize, usize, usize, usize) {
    let f = |v: f64, n: usize| (v * n as f64).round() as usize;
    (f(0.25, width), f(0.55, height), f(0.75, width), f(0.9, height))
}

const CLASSES: [AttackClass; 4] = [
    AttackClass::Genuine,
    AttackClass::Print,
    AttackClass::Replay,
    AttackClass::Mask(None),
];

const UNSEEN: [MaskSubtype; 4] = [
    MaskSubtype::Paper,
    MaskSubtype::Half,
    MaskSubtype::Transparent,
    MaskSubtype::Mannequin,
];

/// Genuine, print, replay and mask videos.
pub fn generate(spec: &SynthSpec, out_dir: &Path) -> Result<DatasetManifest> {
    write_classes(spec, out_dir, &CLASSES, "synth")
}

/// Genuine videos plus the four held-out mask subtypes.
pub fn generate_unseen_masks(spec: &SynthSpec, out_dir: &Path) -> Result<DatasetManifest> {
    let mut classes = vec![AttackClass::Genuine];
    classes.extend(UNSEEN.iter().map(|&s| AttackClass::Mask(Some(s))));
    write_classes(spec, out_dir, &classes, "synth-unseen")
}

/// Like [`generate_unseen_masks`] plus silicone masks rendered with the
/// training mask signature (the cross-database rows).
pub fn generate_cross_unseen(spec: &SynthSpec, out_dir: &Path) -> Result<DatasetManifest> {
    let mut classes = vec![AttackClass::Genuine, AttackClass::Mask(Some(MaskSubtype::Silicone))];
    classes.extend(UNSEEN.iter().map(|&s| AttackClass::Mask(Some(s))));
    write_classes(spec, out_dir, &classes, "synth-cross-unseen")
}

/// Only the listed classes (e.g. genuine/print/replay for a two-attack
/// database).
pub fn generate_classes(spec: &SynthSpec, out_dir: &Path, classes: &[AttackClass]) -> Result<DatasetManifest> {
    write_classes(spec, out_dir, classes, "synth")
}

fn write_classes(
    spec: &SynthSpec,
    out_dir: &Path,
    classes: &[AttackClass],
    source: &str,
) -> Result<DatasetManifest> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::new();
    for &class in classes {
        let name = class.detail_name();
        for v in 0..spec.videos_per_class {
            let video = format!("{name}_{}v{v:03}", spec.seed);
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                spec.seed,
                ((class_code(class) as u64) << 32) | v as u64,
            ));
            let look = VideoLook::sample(&mut rng);
            for f in 0..spec.frames_per_video {
                let img = render(spec, class, &look, &mut rng);
                let file = format!("{video}_{f}.png");
                save_gray_as_rgb(&img, &out_dir.join(&file))?;
                records.push(SampleRecord {
                    sample_id: format!("{video}_{f}"),
                    media_path: file,
                    frame_index: Some(f as u64),
                    attack_class: class,
                    source_dataset: source.into(),
                    subject_id: Some(format!("subj_{video}")),
                    fold: None,
                });
            }
        }
    }
    let manifest = DatasetManifest::new("manifest", 1, Granularity::Frame, records)?
        .with_base_dir(out_dir);
    manifest.save(out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

fn class_code(class: AttackClass) -> u32 {
    match class {
        AttackClass::Genuine => 0,
        AttackClass::Print => 1,
        AttackClass::Replay => 2,
        AttackClass::Mask(None) => 3,
        AttackClass::Mask(Some(s)) => 4 + s as u32,
    }
}

/// Appearance shared by every frame of a video.
#[derive(Clone, Debug)]
struct VideoLook {
    cx: f64,
    cy: f64,
    scale: f64,
    gain: f64,
    bias: f64,
    /// Background gradient direction.
    bg_tilt: f64,
    /// Skin texture phase.
    phase: (f64, f64),
}

impl VideoLook {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        VideoLook {
            cx: 0.5 + rng.random_range(-0.012..0.012),
            cy: 0.5 + rng.random_range(-0.012..0.012),
            scale: rng.random_range(0.97..1.03),
            gain: rng.random_range(0.94..1.06),
            bias: rng.random_range(-5.0..5.0),
            bg_tilt: rng.random_range(-1.0..1.0),
            phase: (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3)),
        }
    }
}

fn smoothstep(edge: f64, softness: f64, v: f64) -> f64 {
    // 1 inside (v < edge), 0 outside, linear ramp of width `softness`.
    ((edge - v) / softness + 0.5).clamp(0.0, 1.0)
}

/// Normalized elliptical radius.
fn ell(u: f64, v: f64, cu: f64, cv: f64, ru: f64, rv: f64) -> f64 {
    (((u - cu) / ru).powi(2) + ((v - cv) / rv).powi(2)).sqrt()
}

struct Face {
    /// Face membership in [0, 1].
    inside: f64,
    /// Eye/mouth membership in [0, 1] (soft-edged).
    features: f64,
    /// Hard-edged eye/mouth membership.
    hard_features: f64,
    /// Upper-face membership (forehead to nose).
    upper: f64,
}

fn face_geometry(u: f64, v: f64, look: &VideoLook, jitter: (f64, f64)) -> Face {
    let (cu, cv) = (look.cx + jitter.0, look.cy + jitter.1);
    let s = look.scale;
    let face = ell(u, v, cu, cv, 0.3 * s, 0.38 * s);
    let eye_l = ell(u, v, cu - 0.12 * s, cv - 0.1 * s, 0.06 * s, 0.035 * s);
    let eye_r = ell(u, v, cu + 0.12 * s, cv - 0.1 * s, 0.06 * s, 0.035 * s);
    let mouth = ell(u, v, cu, cv + 0.18 * s, 0.1 * s, 0.035 * s);
    let nearest = eye_l.min(eye_r).min(mouth);
    Face {
        inside: smoothstep(1.0, 0.08, face),
        features: smoothstep(1.0, 0.6, nearest),
        hard_features: if nearest < 1.0 { 1.0 } else { 0.0 },
        upper: if v < cv + 0.05 * s { 1.0 } else { 0.0 },
    }
}

fn render(spec: &SynthSpec, class: AttackClass, look: &VideoLook, rng: &mut ChaCha8Rng) -> GrayImage {
    let (h, w) = spec.image_size;
    let s = spec.class_signature_strength;
    let jitter = (rng.random_range(-0.005..0.005), rng.random_range(-0.005..0.005));
    let noise = Normal::new(0.0, 3.0).expect("finite std");
    let (rx0, ry0, rx1, ry1) = signature_region(h, w);
    let (hx, hy) = (
        (rx0 as f64 + (rx1 - rx0) as f64 * rng.random_range(0.3..0.7)) / w as f64,
        (ry0 as f64 + (ry1 - ry0) as f64 * rng.random_range(0.3..0.7)) / h as f64,
    );
    let in_region = |x: usize, y: usize| x >= rx0 && x < rx1 && y >= ry0 && y < ry1;
    let on_border = |x: usize, y: usize| {
        in_region(x, y) && (x < rx0 + 2 || x >= rx1 - 2 || y < ry0 + 2 || y >= ry1 - 2)
    };

    let mut img = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
            let f = face_geometry(u, v, look, jitter);
            let bg = 70.0 + 15.0 * (look.bg_tilt * (u - 0.5) + (v - 0.5));
            let skin_tex = 6.0
                * (u * 37.0 + look.phase.0).sin()
                * (v * 29.0 + look.phase.1).sin();
            let shade = 160.0 - 40.0 * ((u - look.cx).powi(2) + (v - look.cy).powi(2)) * 4.0;
            let genuine_face = shade + skin_tex - 90.0 * f.features;
            let mut face = genuine_face;

            match class {
                AttackClass::Genuine => {}
                AttackClass::Print => {
                    if in_region(x, y) {
                        let (px, py) = (x % 8, y % 8);
                        let d2 = (px as f64 - 3.5).powi(2) + (py as f64 - 3.5).powi(2);
                        if d2 < 5.0 {
                            face -= 55.0 * s;
                        }
                        if on_border(x, y) {
                            face += 60.0 * s;
                        }
                    }
                }
                AttackClass::Replay => {
                    if in_region(x, y) {
                        face += 32.0 * s * (2.0 * std::f64::consts::PI * y as f64 / 8.0).sin();
                        let g = ((u - hx).powi(2) + (v - hy).powi(2)) / (2.0 * 0.03f64.powi(2));
                        face += 70.0 * s * (-g).exp();
                    }
                }
                AttackClass::Mask(sub) => {
                    face = mask_face(sub, genuine_face, shade, &f, u, v, s);
                }
            }
            let val = bg * (1.0 - f.inside) + face * f.inside;
            img.set(x, y, look.gain * val + look.bias + noise.sample(rng));
        }
    }
    img
}

/// Surface of the various mask types. `genuine_face` is the live-face
/// rendering at this pixel, `shade` its smooth illumination.
#[allow(clippy::too_many_arguments)]
fn mask_face(
    sub: Option<MaskSubtype>,
    genuine_face: f64,
    shade: f64,
    f: &Face,
    u: f64,
    v: f64,
    s: f64,
) -> f64 {
    // Smooth blotchy surface texture.
    let blotch = |freq: f64| (u * freq).sin() * (v * freq * 0.8 + 1.0).cos();
    // Hard-edged cutout: dark hole with a bright rim.
    let cutout = |depth: f64| -depth * f.hard_features;
    let mix = |a: f64, b: f64, t: f64| a * (1.0 - t) + b * t;
    match sub {
        None | Some(MaskSubtype::Silicone) => {
            let surface = shade + 38.0 * blotch(34.0) + cutout(110.0);
            mix(genuine_face, surface, s)
        }
        Some(MaskSubtype::Paper) => {
            let grain = 14.0 * ((u * 151.0).sin() * (v * 173.0).sin()).signum();
            let surface = shade - 10.0 + grain + 12.0 * blotch(25.0) + cutout(120.0);
            mix(genuine_face, surface, s)
        }
        Some(MaskSubtype::Half) => {
            let surface = shade + 38.0 * blotch(34.0) + cutout(110.0);
            mix(genuine_face, mix(genuine_face, surface, f.upper), s)
        }
        Some(MaskSubtype::Transparent) => {
            // A thin clear shell over a live face: faint texture and edges.
            let surface = genuine_face + 6.0 * blotch(34.0) + cutout(18.0);
            mix(genuine_face, surface, s)
        }
        Some(MaskSubtype::Mannequin) => {
            let surface = 185.0 + 18.0 * blotch(18.0) - 60.0 * f.hard_features;
            mix(genuine_face, surface, s)
        }
    }
}
