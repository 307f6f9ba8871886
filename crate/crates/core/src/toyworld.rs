//! Procedural clean images and paired degradations.
//!
//! Images are square, single-channel, values in `[0, 1]`, flattened row-major
//! into vectors. The latent map is the identity, so these vectors are the
//! states the backbone operates on.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_SIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeClass {
    Disk,
    Bar,
    Cross,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [ShapeClass::Disk, ShapeClass::Bar, ShapeClass::Cross];

    /// Token string naming the class for the toy text encoder.
    pub fn token(self) -> &'static str {
        match self {
            ShapeClass::Disk => "DISK",
            ShapeClass::Bar => "BAR",
            ShapeClass::Cross => "CROSS",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CleanSpec {
    pub side: usize,
    pub class: ShapeClass,
    pub seed: u64,
}

impl CleanSpec {
    pub fn new(class: ShapeClass, seed: u64) -> Self {
        Self {
            side: DEFAULT_SIDE,
            class,
            seed,
        }
    }
}

/// Pixel statistics of the generator, for each image independently:
/// background level `U(0, 0.2)`, foreground level `U(0.6, 1.0)`, shape
/// centre jittered by up to ±20% of the side around the middle, soft
/// one-pixel anti-aliased edges.
///
/// For the default 16×16 "disk" the Monte Carlo mean intensity over many
/// images sits inside [`DISK_MEAN_BAND`]: background 0.1 on average, plus
/// 0.7 times an expected covered fraction of about 0.15.
pub const DISK_MEAN_BAND: (f64, f64) = (0.19, 0.22);

pub fn generate_clean(spec: &CleanSpec, n: usize) -> Result<Vec<Tensor>> {
    if n == 0 {
        return Err(Error::invalid("generate_clean needs n >= 1"));
    }
    if spec.side < 4 {
        return Err(Error::invalid(format!("image side must be >= 4, got {}", spec.side)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..n).map(|_| draw_image(spec.side, spec.class, &mut rng)).collect())
}

/// Mixed-class images, class drawn uniformly per image.
pub fn generate_mixed(side: usize, n: usize, seed: u64) -> Result<Vec<(ShapeClass, Tensor)>> {
    if n == 0 {
        return Err(Error::invalid("generate_mixed needs n >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let class = ShapeClass::ALL[rng.random_range(0..ShapeClass::ALL.len())];
            (class, draw_image(side, class, &mut rng))
        })
        .collect())
}

pub(crate) fn draw_image<R: Rng + ?Sized>(side: usize, class: ShapeClass, rng: &mut R) -> Tensor {
    let s = side as f64;
    let bg = rng.random_range(0.0..0.2);
    let fg = rng.random_range(0.6..1.0);
    let jitter = 0.2 * s;
    let cx = s / 2.0 - 0.5 + rng.random_range(-jitter..jitter);
    let cy = s / 2.0 - 0.5 + rng.random_range(-jitter..jitter);

    // Coverage in [0, 1] from a signed distance (positive inside).
    let coverage = |inside: f64| (inside + 0.5).clamp(0.0, 1.0);
    let bar = |x: f64, y: f64, half_len: f64, half_thick: f64, horizontal: bool| {
        let (along, across) = if horizontal { (x - cx, y - cy) } else { (y - cy, x - cx) };
        coverage((half_len - along.abs()).min(half_thick - across.abs()))
    };

    let mut data = Vec::with_capacity(side * side);
    match class {
        ShapeClass::Disk => {
            let radius = rng.random_range(0.15 * s..0.28 * s);
            for y in 0..side {
                for x in 0..side {
                    let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                    data.push(coverage(radius - d));
                }
            }
        }
        ShapeClass::Bar => {
            let horizontal = rng.random_bool(0.5);
            let half_len = rng.random_range(0.25 * s..0.42 * s);
            let half_thick = rng.random_range(0.06 * s..0.14 * s);
            for y in 0..side {
                for x in 0..side {
                    data.push(bar(x as f64, y as f64, half_len, half_thick, horizontal));
                }
            }
        }
        ShapeClass::Cross => {
            let half_len = rng.random_range(0.22 * s..0.38 * s);
            let half_thick = rng.random_range(0.05 * s..0.1 * s);
            for y in 0..side {
                for x in 0..side {
                    let h = bar(x as f64, y as f64, half_len, half_thick, true);
                    let v = bar(x as f64, y as f64, half_len, half_thick, false);
                    data.push(h.max(v));
                }
            }
        }
    }
    for v in &mut data {
        *v = bg + (fg - bg) * *v;
    }
    Tensor::from_parts(vec![side * side], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DegradationKind {
    Veil,
    Gamma,
    Blur,
    Stripe,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 4] = [
        DegradationKind::Veil,
        DegradationKind::Gamma,
        DegradationKind::Blur,
        DegradationKind::Stripe,
    ];

    pub fn label(self) -> &'static str {
        match self {
            DegradationKind::Veil => "veil",
            DegradationKind::Gamma => "gamma",
            DegradationKind::Blur => "blur",
            DegradationKind::Stripe => "stripe",
        }
    }

    /// The operator at its default severity.
    pub fn default_degradation(self) -> Degradation {
        match self {
            DegradationKind::Veil => Degradation::Veil { alpha: 0.6 },
            DegradationKind::Gamma => Degradation::Gamma { gamma: 2.5 },
            DegradationKind::Blur => Degradation::Blur { sigma: 1.5 },
            DegradationKind::Stripe => Degradation::Stripe { amplitude: 0.3 },
        }
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.label())
    }
}

impl FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "veil" | "haze" => Ok(DegradationKind::Veil),
            "gamma" | "lowlight" | "low-light" => Ok(DegradationKind::Gamma),
            "blur" => Ok(DegradationKind::Blur),
            "stripe" | "stripes" => Ok(DegradationKind::Stripe),
            other => Err(Error::invalid(format!(
                "unknown degradation kind `{other}` (expected veil, gamma, blur or stripe)"
            ))),
        }
    }
}

/// A degradation operator with its severity.
///
/// | kind   | severity            | identity at |
/// |--------|---------------------|-------------|
/// | veil   | `alpha ∈ [0.05, 1]` | `alpha = 1` |
/// | gamma  | `gamma ∈ [1, 5]`    | `gamma = 1` |
/// | blur   | `sigma ∈ (0, 4]`    | none        |
/// | stripe | `amplitude ∈ [0, 0.5]` | `amplitude = 0` |
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Degradation {
    /// `α·z + (1 − α)`: a uniform bright veil.
    Veil { alpha: f64 },
    /// `z^γ`: low-light darkening.
    Gamma { gamma: f64 },
    /// Separable Gaussian blur with reflect padding.
    Blur { sigma: f64 },
    /// Per-column additive offsets drawn from the seed, clamped to `[0, 1]`.
    Stripe { amplitude: f64 },
}

impl Degradation {
    pub fn kind(&self) -> DegradationKind {
        match self {
            Degradation::Veil { .. } => DegradationKind::Veil,
            Degradation::Gamma { .. } => DegradationKind::Gamma,
            Degradation::Blur { .. } => DegradationKind::Blur,
            Degradation::Stripe { .. } => DegradationKind::Stripe,
        }
    }

    pub fn severity(&self) -> f64 {
        match *self {
            Degradation::Veil { alpha } => alpha,
            Degradation::Gamma { gamma } => gamma,
            Degradation::Blur { sigma } => sigma,
            Degradation::Stripe { amplitude } => amplitude,
        }
    }

    pub fn with_severity(kind: DegradationKind, severity: f64) -> Result<Self> {
        let d = match kind {
            DegradationKind::Veil => Degradation::Veil { alpha: severity },
            DegradationKind::Gamma => Degradation::Gamma { gamma: severity },
            DegradationKind::Blur => Degradation::Blur { sigma: severity },
            DegradationKind::Stripe => Degradation::Stripe { amplitude: severity },
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Degradation::Veil { alpha } => (0.05..=1.0).contains(&alpha),
            Degradation::Gamma { gamma } => (1.0..=5.0).contains(&gamma),
            Degradation::Blur { sigma } => sigma > 0.0 && sigma <= 4.0,
            Degradation::Stripe { amplitude } => (0.0..=0.5).contains(&amplitude),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("severity out of range for {self:?}")))
        }
    }
}

/// Applies `degradation` to a flattened square image. Deterministic in
/// `(image, degradation, seed)`; only the stripe operator consumes the seed.
pub fn degrade(clean: &Tensor, degradation: &Degradation, seed: u64) -> Result<Tensor> {
    degradation.validate()?;
    let side = square_side(clean)?;
    if clean.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("degrade expects pixels in [0, 1]"));
    }
    let out = match *degradation {
        Degradation::Veil { alpha } => {
            if alpha == 1.0 {
                return Ok(clean.clone());
            }
            clean.map("veil", |z| alpha * z + (1.0 - alpha))?
        }
        Degradation::Gamma { gamma } => {
            if gamma == 1.0 {
                return Ok(clean.clone());
            }
            clean.map("gamma", |z| z.powf(gamma))?
        }
        Degradation::Blur { sigma } => blur(clean, side, sigma)?,
        Degradation::Stripe { amplitude } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let offsets: Vec<f64> = (0..side)
                .map(|_| if amplitude > 0.0 { rng.random_range(-amplitude..=amplitude) } else { 0.0 })
                .collect();
            let data = clean
                .data()
                .iter()
                .enumerate()
                .map(|(i, &z)| (z + offsets[i % side]).clamp(0.0, 1.0))
                .collect();
            Tensor::new(clean.shape().to_vec(), data)?
        }
    };
    out.map("clamp", |v| v.clamp(0.0, 1.0))
}

/// Applies several degradations in sequence, deriving one seed per stage.
pub fn degrade_chain(clean: &Tensor, chain: &[Degradation], seed: u64) -> Result<Tensor> {
    let mut out = clean.clone();
    for (i, d) in chain.iter().enumerate() {
        out = degrade(&out, d, seed.wrapping_add(i as u64 * 0x9E37_79B9))?;
    }
    Ok(out)
}

fn square_side(t: &Tensor) -> Result<usize> {
    let n = t.len();
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n || t.shape().len() != 1 {
        return Err(Error::invalid(format!(
            "expected a flattened square image, got shape {:?}",
            t.shape()
        )));
    }
    Ok(side)
}

/// Normalized 1-D Gaussian taps for radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Half-sample symmetric reflection: `-1 → 0`, `n → n-1`.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

fn blur(img: &Tensor, side: usize, sigma: f64) -> Result<Tensor> {
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as i64;
    let src = img.data();
    let mut tmp = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            tmp[y * side + x] = k
                .iter()
                .enumerate()
                .map(|(j, w)| w * src[y * side + reflect(x as i64 + j as i64 - radius, side)])
                .sum();
        }
    }
    let mut out = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            out[y * side + x] = k
                .iter()
                .enumerate()
                .map(|(j, w)| w * tmp[reflect(y as i64 + j as i64 - radius, side) * side + x])
                .sum();
        }
    }
    Tensor::new(img.shape().to_vec(), out)
}

/// A (clean, degraded) pair with its operator.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub clean: Tensor,
    pub degraded: Tensor,
    pub degradation: Degradation,
}

impl PairedSample {
    pub fn new(clean: Tensor, degradation: Degradation, seed: u64) -> Result<Self> {
        let degraded = degrade(&clean, &degradation, seed)?;
        Ok(Self {
            clean,
            degraded,
            degradation,
        })
    }

    pub fn kind(&self) -> DegradationKind {
        self.degradation.kind()
    }
}

/// `n` mixed-class pairs under one degradation, seeded end to end.
pub fn make_pairs(degradation: Degradation, side: usize, n: usize, seed: u64) -> Result<Vec<PairedSample>> {
    generate_mixed(side, n, seed)?
        .into_iter()
        .enumerate()
        .map(|(i, (_, clean))| PairedSample::new(clean, degradation, seed ^ ((i as u64 + 1) << 20)))
        .collect()
}
