//! Procedurally generated two-domain shape benchmark.
//!
//! Each category is one shape family. Source images show a flat-colored
//! shape with a warm hue on a plain dark background. The target domain draws
//! the same geometry distribution and applies [`TargetShift`]: a hue
//! rotation, additive Gaussian pixel noise and an optional striped background.

use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Domain, DomainPair, ImageSample, SYNTHETIC_IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::rng::stream;

/// Rotation range (radians, symmetric); small enough that square and diamond stay distinct.
const MAX_TILT: f64 = 0.44;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeFamily {
    Flower,
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
    Star,
    Diamond,
    Bar,
    Crescent,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 10] = [
        ShapeFamily::Flower,
        ShapeFamily::Disk,
        ShapeFamily::Square,
        ShapeFamily::Triangle,
        ShapeFamily::Cross,
        ShapeFamily::Ring,
        ShapeFamily::Star,
        ShapeFamily::Diamond,
        ShapeFamily::Bar,
        ShapeFamily::Crescent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Flower => "flower",
            ShapeFamily::Disk => "disk",
            ShapeFamily::Square => "square",
            ShapeFamily::Triangle => "triangle",
            ShapeFamily::Cross => "cross",
            ShapeFamily::Ring => "ring",
            ShapeFamily::Star => "star",
            ShapeFamily::Diamond => "diamond",
            ShapeFamily::Bar => "bar",
            ShapeFamily::Crescent => "crescent",
        }
    }

    /// Membership test in shape-local coordinates (unit radius).
    pub fn contains(self, u: f64, v: f64) -> bool {
        let rho = u.hypot(v);
        let phi = v.atan2(u);
        match self {
            ShapeFamily::Flower => rho <= 0.35 + 0.65 * (2.5 * phi).cos().abs(),
            ShapeFamily::Disk => rho <= 0.85,
            ShapeFamily::Square => u.abs().max(v.abs()) <= 0.7,
            ShapeFamily::Triangle => [-PI / 2.0, PI / 6.0, 5.0 * PI / 6.0]
                .iter()
                .all(|a| u * a.cos() + v * a.sin() <= 0.45),
            ShapeFamily::Cross => {
                (u.abs() <= 0.28 && v.abs() <= 0.95) || (v.abs() <= 0.28 && u.abs() <= 0.95)
            }
            ShapeFamily::Ring => (0.5..=0.9).contains(&rho),
            ShapeFamily::Star => {
                let sector = 2.0 * PI / 5.0;
                let t = (phi.rem_euclid(sector)) / sector;
                rho <= 0.38 + 0.57 * (1.0 - 2.0 * (t - 0.5).abs())
            }
            ShapeFamily::Diamond => u.abs() + v.abs() <= 0.9,
            ShapeFamily::Bar => u.abs() <= 0.95 && v.abs() <= 0.3,
            ShapeFamily::Crescent => rho <= 0.9 && (u - 0.4).hypot(v) > 0.7,
        }
    }
}

/// Target-domain perturbation. All-zero means the two domains are identically distributed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetShift {
    /// Hue rotation in degrees.
    pub hue_degrees: f64,
    /// Additive Gaussian noise standard deviation, in units of full intensity (0..1).
    pub noise_sigma: f64,
    pub background_texture: bool,
}

impl TargetShift {
    pub fn none() -> Self {
        Self {
            hue_degrees: 0.0,
            noise_sigma: 0.0,
            background_texture: false,
        }
    }
}

impl Default for TargetShift {
    fn default() -> Self {
        Self {
            hue_degrees: 60.0,
            noise_sigma: 0.04,
            background_texture: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub per_class: usize,
    pub seed: u64,
    #[serde(default = "default_side")]
    pub side: usize,
    #[serde(default)]
    pub target_shift: TargetShift,
}

fn default_side() -> usize {
    SYNTHETIC_IMAGE_SIDE
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 5,
            per_class: 40,
            seed: 7,
            side: SYNTHETIC_IMAGE_SIDE,
            target_shift: TargetShift::default(),
        }
    }
}

fn hsv_to_rgb(h_deg: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h_deg.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn render(family: ShapeFamily, domain: Domain, spec: &SyntheticSpec, rng: &mut impl Rng) -> (Array3<u8>, Array2<bool>) {
    let s = spec.side as f64;
    let cx = s / 2.0 + rng.random_range(-0.1..0.1) * s;
    let cy = s / 2.0 + rng.random_range(-0.1..0.1) * s;
    let radius = rng.random_range(0.30..0.40) * s;
    let theta = rng.random_range(-MAX_TILT..MAX_TILT);
    let mut hue = rng.random_range(0.0..120.0);
    let background = rng.random_range(25.0..60.0) / 255.0;
    let shift = spec.target_shift;
    let is_target = domain == Domain::Target;
    if is_target {
        hue += shift.hue_degrees;
    }
    let color = hsv_to_rgb(hue, 0.85, 0.95);
    let stripes = if is_target && shift.background_texture {
        let period = rng.random_range(4.0..8.0);
        let angle = rng.random_range(0.0..PI);
        Some((period, angle))
    } else {
        None
    };
    let noise = (is_target && shift.noise_sigma > 0.0).then(|| Normal::new(0.0, shift.noise_sigma).unwrap());

    let n = spec.side;
    let mut pixels = Array3::<u8>::zeros((n, n, 3));
    let mut mask = Array2::<bool>::from_elem((n, n), false);
    let (sin_t, cos_t) = theta.sin_cos();
    for y in 0..n {
        for x in 0..n {
            let dx = (x as f64 + 0.5 - cx) / radius;
            let dy = (y as f64 + 0.5 - cy) / radius;
            let u = dx * cos_t + dy * sin_t;
            let v = -dx * sin_t + dy * cos_t;
            let inside = family.contains(u, v);
            mask[[y, x]] = inside;
            let mut bg = background;
            if let Some((period, angle)) = stripes {
                let t = (x as f64 * angle.cos() + y as f64 * angle.sin()) / period;
                bg += 0.16 * (0.5 + 0.5 * (2.0 * PI * t).sin());
            }
            for c in 0..3 {
                let mut val = if inside { color[c] } else { bg };
                if let Some(dist) = &noise {
                    val += dist.sample(rng);
                }
                pixels[[y, x, c]] = (val.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    (pixels, mask)
}

/// Generates the benchmark. Identical specs give byte-identical datasets.
/// Target labels are stored for evaluation only.
pub fn generate_synthetic_pair(spec: &SyntheticSpec) -> Result<DomainPair> {
    if spec.n_classes < 2 {
        return Err(Error::InvalidConfig(format!("n_classes must be >= 2, got {}", spec.n_classes)));
    }
    if spec.n_classes > ShapeFamily::ALL.len() {
        return Err(Error::InvalidConfig(format!(
            "n_classes must be <= {} (one shape family per class), got {}",
            ShapeFamily::ALL.len(),
            spec.n_classes
        )));
    }
    if spec.per_class < 4 {
        return Err(Error::InvalidConfig(format!("per_class must be >= 4, got {}", spec.per_class)));
    }
    if spec.side < 8 {
        return Err(Error::InvalidConfig(format!("side must be >= 8, got {}", spec.side)));
    }
    let families = &ShapeFamily::ALL[..spec.n_classes];
    let categories = families.iter().map(|f| f.name().to_string()).collect();
    let mut source = Vec::new();
    let mut target = Vec::new();
    for domain in [Domain::Source, Domain::Target] {
        let tag = domain as u64;
        for (label, &family) in families.iter().enumerate() {
            for i in 0..spec.per_class {
                let mut rng = stream(&[spec.seed, tag, label as u64, i as u64]);
                let (pixels, mask) = render(family, domain, spec, &mut rng);
                let id = format!("{}/{}/{i:04}", domain.as_str(), family.name());
                let sample = ImageSample::new(id, pixels, domain, Some(label), Some(mask));
                match domain {
                    Domain::Source => source.push(sample),
                    Domain::Target => target.push(sample),
                }
            }
        }
    }
    DomainPair::new(source, target, categories)
}
