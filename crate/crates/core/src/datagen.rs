//! Deterministic procedural grayscale patterns.
//!
//! All geometry is parameterized in fractions of the grid extent, so a class
//! renders self-similar structure at any size. Rendering is a pure function of
//! (class, seed, H, W, jitter).

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::Tensor;

/// Transition half-profile of the tiled classes: values ramp linearly from
/// −1 to +1 over this fraction of the grid extent around a tile boundary.
/// Narrow enough that pixel centers at the sizes used here saturate to ±1,
/// wide enough that 2x downsampling tracks a direct render.
const TRANSITION_WIDTH: f64 = 0.06;

/// Center-offset coefficient for the radial classes, in extent fractions.
const RADIAL_OFFSET_COEFF: f64 = 0.3;

/// Signed square wave with linear ramps: +1 on the first half-cycle, −1 on
/// the second, ramping over [`TRANSITION_WIDTH`] around each boundary.
/// `cycle` is the full period and `u` the coordinate, both extent fractions.
fn trapezoid_wave(u: f64, cycle: f64) -> f64 {
    let z = (u / cycle).rem_euclid(1.0);
    let sign = if z < 0.5 { 1.0 } else { -1.0 };
    let dist_z = z.min((z - 0.5).abs()).min(1.0 - z);
    let dist_u = dist_z * cycle;
    sign * (2.0 * dist_u / TRANSITION_WIDTH).min(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PatternKind {
    Checkerboard,
    Stripes,
    RadialBlob,
    Ring,
}

/// A renderable pattern class: a kind plus its period/scale parameter as a
/// fraction of the grid extent. The parameter means: checkerboard tile size,
/// stripes full cycle, blob sigma, ring radius.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatternClass {
    pub kind: PatternKind,
    pub scale: f64,
}

impl PatternClass {
    /// The four standard classes with their default scale parameters.
    pub fn standard(kind: PatternKind) -> Self {
        let scale = match kind {
            PatternKind::Checkerboard => 0.5,
            PatternKind::Stripes => 1.0,
            PatternKind::RadialBlob => 0.18,
            PatternKind::Ring => 0.3,
        };
        Self { kind, scale }
    }

    pub fn all_standard() -> Vec<PatternClass> {
        [
            PatternKind::Checkerboard,
            PatternKind::Stripes,
            PatternKind::RadialBlob,
            PatternKind::Ring,
        ]
        .into_iter()
        .map(Self::standard)
        .collect()
    }

    pub fn id(&self) -> &'static str {
        match self.kind {
            PatternKind::Checkerboard => "checkerboard",
            PatternKind::Stripes => "stripes",
            PatternKind::RadialBlob => "radial-blob",
            PatternKind::Ring => "ring",
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        let kind = match id {
            "checkerboard" => PatternKind::Checkerboard,
            "stripes" => PatternKind::Stripes,
            "radial-blob" => PatternKind::RadialBlob,
            "ring" => PatternKind::Ring,
            other => {
                return Err(Error::invalid(format!("unknown pattern class '{other}'")));
            }
        };
        Ok(Self::standard(kind))
    }

    /// Stable index used for class conditioning.
    pub fn index(&self) -> usize {
        match self.kind {
            PatternKind::Checkerboard => 0,
            PatternKind::Stripes => 1,
            PatternKind::RadialBlob => 2,
            PatternKind::Ring => 3,
        }
    }

    /// Largest phase/offset magnitude (extent fraction) at the given jitter.
    pub fn max_offset(&self, jitter: f64) -> f64 {
        match self.kind {
            PatternKind::Checkerboard | PatternKind::Stripes => jitter * self.scale,
            PatternKind::RadialBlob | PatternKind::Ring => jitter * RADIAL_OFFSET_COEFF,
        }
    }
}

/// One labeled training/evaluation image.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor,
    pub class: PatternClass,
    pub seed: u64,
}

/// Renders the analytic pattern with explicit phase/center offsets
/// (extent fractions). This is the template generator behind both the
/// seeded renderer and the pattern scorer.
pub fn render_analytic(class: &PatternClass, offsets: [f64; 2], h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let v = match class.kind {
                PatternKind::Checkerboard => {
                    // Tile size = scale; one full cycle spans two tiles.
                    let u = (j as f64 + 0.5) / w as f64;
                    let vv = (i as f64 + 0.5) / h as f64;
                    trapezoid_wave(u + offsets[0], 2.0 * class.scale)
                        * trapezoid_wave(vv + offsets[1], 2.0 * class.scale)
                }
                PatternKind::Stripes => {
                    let u = (j as f64 + 0.5) / w as f64;
                    trapezoid_wave(u + offsets[0], class.scale)
                }
                PatternKind::RadialBlob => {
                    let ux = (j as f64 + 0.5) / w as f64 - 0.5 - offsets[0];
                    let uy = (i as f64 + 0.5) / h as f64 - 0.5 - offsets[1];
                    let r2 = ux * ux + uy * uy;
                    2.0 * (-r2 / (2.0 * class.scale * class.scale)).exp() - 1.0
                }
                PatternKind::Ring => {
                    let ux = (j as f64 + 0.5) / w as f64 - 0.5 - offsets[0];
                    let uy = (i as f64 + 0.5) / h as f64 - 0.5 - offsets[1];
                    let r = (ux * ux + uy * uy).sqrt();
                    let width = class.scale * 0.27;
                    let d = r - class.scale;
                    2.0 * (-d * d / (2.0 * width * width)).exp() - 1.0
                }
            };
            data.push(v as f32);
        }
    }
    Tensor::new(vec![1, h, w], data).expect("pattern buffer matches shape")
}

/// Draws the jittered offsets for (class, seed); independent of grid size.
pub fn draw_offsets(class: &PatternClass, seed: u64, jitter: f64) -> [f64; 2] {
    let mut rng = substream(seed, "render", class.index() as u64);
    let d0: f64 = rng.gen_range(-1.0..1.0);
    let d1: f64 = rng.gen_range(-1.0..1.0);
    [class.max_offset(jitter) * d0, class.max_offset(jitter) * d1]
}

/// Seeded render. Same (class, seed, H, W, jitter) gives bit-identical output.
pub fn render(
    class: &PatternClass,
    seed: u64,
    h: usize,
    w: usize,
    jitter: f64,
) -> Result<Sample> {
    if h < 8 || w < 8 {
        return Err(Error::invalid(format!("grid {h}x{w} below minimum 8x8")));
    }
    if !(0.0..=0.5).contains(&jitter) {
        return Err(Error::invalid(format!("jitter {jitter} outside [0, 0.5]")));
    }
    let offsets = draw_offsets(class, seed, jitter);
    let image = render_analytic(class, offsets, h, w);
    Ok(Sample {
        image,
        class: *class,
        seed,
    })
}

/// Deterministic class-balanced dataset.
pub fn make_dataset(
    classes: &[PatternClass],
    n_per_class: usize,
    h: usize,
    w: usize,
    seed: u64,
    jitter: f64,
) -> Result<Vec<Sample>> {
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be >= 1"));
    }
    let mut out = Vec::with_capacity(classes.len() * n_per_class);
    for class in classes {
        for k in 0..n_per_class {
            let sample_seed = crate::rng::derive_seed(seed, class.id(), k as u64);
            out.push(render(class, sample_seed, h, w, jitter)?);
        }
    }
    Ok(out)
}
