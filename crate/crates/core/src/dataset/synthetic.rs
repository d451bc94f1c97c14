//! Ultrasound-like synthetic images: a dark ellipse on a brighter, depth-
//! attenuated background, blurred and multiplied by speckle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use super::RawPair;
use crate::plane::Plane;

/// Full axis lengths are drawn from this fraction range of the side length.
pub const AXIS_RANGE: (f64, f64) = (0.08, 0.40);

/// Speckle looks: the multiplicative noise is Gamma(L, 1/L), mean 1.
const SPECKLE_LOOKS: f64 = 5.0;

/// Lesion geometry of one synthetic sample, in pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axes.
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }
}

fn rng_for(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draw the lesion for sample `index`. Semi-axes are half the drawn axis
/// plus half a pixel, so the digitized lesion never falls below the nominal
/// area; the centre keeps the whole ellipse clear of the frame.
pub fn ellipse_for(seed: u64, index: u64, size: usize) -> Ellipse {
    let mut rng = rng_for(seed, index);
    draw_ellipse(&mut rng, size)
}

fn draw_ellipse(rng: &mut ChaCha8Rng, size: usize) -> Ellipse {
    let s = size as f64;
    let mut axis = || rng.gen_range(AXIS_RANGE.0..=AXIS_RANGE.1) * s / 2.0 + 0.5;
    let (a, b) = (axis(), axis());
    let reach = AXIS_RANGE.1 * s / 2.0 + 0.5 + 2.0;
    let cx = rng.gen_range(reach..=s - reach);
    let cy = rng.gen_range(reach..=s - reach);
    let theta = rng.gen_range(0.0..std::f64::consts::PI);
    Ellipse {
        cx,
        cy,
        a,
        b,
        theta,
    }
}

/// Sample `index` of the synthetic corpus; a pure function of its arguments.
pub fn synthetic_pair(seed: u64, index: u64, size: usize) -> RawPair {
    let mut rng = rng_for(seed, index);
    let e = draw_ellipse(&mut rng, size);
    let s = size as f64;
    let background = rng.gen_range(0.50..0.70);
    let lesion = rng.gen_range(0.12..0.25);
    let attenuation = rng.gen_range(0.15..0.35);
    let sigma = rng.gen_range(0.8..2.0) * s / 128.0;

    let mask = Plane::from_fn(size, size, |x, y| e.contains(x as f64, y as f64));
    let clean = Plane::from_fn(size, size, |x, y| {
        let base = if mask.get(x, y) { lesion } else { background };
        (base * (1.0 - attenuation * y as f64 / s)) as f32
    });
    let blurred = clean.gaussian_blur(sigma);
    let gamma = Gamma::new(SPECKLE_LOOKS, 1.0 / SPECKLE_LOOKS).expect("valid speckle distribution");
    let image = blurred.map(|v| (f64::from(v) * gamma.sample(&mut rng)).clamp(0.0, 1.0) as f32);
    RawPair { image, mask }
}
