//! Shared numeric primitives: linear RGB triples, vector aliases, and the
//! small pieces of spherical geometry the renderer leans on everywhere.

use serde::{Deserialize, Serialize};
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

pub type Vec2 = nalgebra::Vector2<f64>;
pub type Vec3 = nalgebra::Vector3<f64>;
pub type Vec4 = nalgebra::Vector4<f64>;
pub type Mat2 = nalgebra::Matrix2<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;

/// Linear RGB triple. Radiance values are non-negative; reflectance values
/// live in `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Rgb {
    pub r: f64,
    pub g: f64,
    pub b: f64,
}

impl Rgb {
    pub const BLACK: Rgb = Rgb { r: 0.0, g: 0.0, b: 0.0 };
    pub const WHITE: Rgb = Rgb { r: 1.0, g: 1.0, b: 1.0 };

    pub fn new(r: f64, g: f64, b: f64) -> Self {
        Rgb { r, g, b }
    }

    pub fn splat(v: f64) -> Self {
        Rgb { r: v, g: v, b: v }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.r, self.g, self.b]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Rgb { r: a[0], g: a[1], b: a[2] }
    }

    /// Componentwise product (modulation).
    pub fn mul_rgb(self, o: Rgb) -> Rgb {
        Rgb::new(self.r * o.r, self.g * o.g, self.b * o.b)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Rgb {
        Rgb::new(self.r.clamp(lo, hi), self.g.clamp(lo, hi), self.b.clamp(lo, hi))
    }

    pub fn max_component(self) -> f64 {
        self.r.max(self.g).max(self.b)
    }

    pub fn mean(self) -> f64 {
        (self.r + self.g + self.b) / 3.0
    }

    /// Sum of absolute components; the per-pixel L1 norm used by the
    /// photometric losses.
    pub fn abs_sum(self) -> f64 {
        self.r.abs() + self.g.abs() + self.b.abs()
    }

    pub fn dot(self, o: Rgb) -> f64 {
        self.r * o.r + self.g * o.g + self.b * o.b
    }

    pub fn is_finite(self) -> bool {
        self.r.is_finite() && self.g.is_finite() && self.b.is_finite()
    }
}

impl Add for Rgb {
    type Output = Rgb;
    fn add(self, o: Rgb) -> Rgb {
        Rgb::new(self.r + o.r, self.g + o.g, self.b + o.b)
    }
}

impl AddAssign for Rgb {
    fn add_assign(&mut self, o: Rgb) {
        self.r += o.r;
        self.g += o.g;
        self.b += o.b;
    }
}

impl Sub for Rgb {
    type Output = Rgb;
    fn sub(self, o: Rgb) -> Rgb {
        Rgb::new(self.r - o.r, self.g - o.g, self.b - o.b)
    }
}

impl Mul<f64> for Rgb {
    type Output = Rgb;
    fn mul(self, s: f64) -> Rgb {
        Rgb::new(self.r * s, self.g * s, self.b * s)
    }
}

impl Div<f64> for Rgb {
    type Output = Rgb;
    fn div(self, s: f64) -> Rgb {
        Rgb::new(self.r / s, self.g / s, self.b / s)
    }
}

impl Neg for Rgb {
    type Output = Rgb;
    fn neg(self) -> Rgb {
        Rgb::new(-self.r, -self.g, -self.b)
    }
}

/// Mirror `v` about the unit normal `n`: returns `2 (n·v) n − v`.
///
/// With `v = ω_o` (toward the camera) this yields the reflection
/// direction `ω_r`.
pub fn reflect(v: Vec3, n: Vec3) -> Vec3 {
    n * (2.0 * n.dot(&v)) - v
}

/// Minimal rotation taking +Z onto the unit vector `n`.
///
/// The columns form a right-handed frame whose third axis is `n`, so
/// `R^T w` expresses a world vector `w` in that tangent frame. Near
/// `n = -Z` the minimal rotation degenerates and a fixed 180-degree
/// rotation about X is substituted.
pub fn rotation_z_to(n: Vec3) -> Mat3 {
    let c = n.z;
    if c < -0.999_999 {
        return Mat3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
    }
    let k = 1.0 / (1.0 + c);
    Mat3::new(
        1.0 - n.x * n.x * k,
        -n.x * n.y * k,
        n.x,
        -n.x * n.y * k,
        1.0 - n.y * n.y * k,
        n.y,
        -n.x,
        -n.y,
        n.z,
    )
}

/// Logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`]; the argument is clamped away from {0, 1}.
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

/// Numerically stable `ln(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// sRGB transfer function applied to one linear-light channel in `[0, 1]`.
pub fn linear_to_srgb(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    if x <= 0.003_130_8 {
        12.92 * x
    } else {
        1.055 * x.powf(1.0 / 2.4) - 0.055
    }
}

/// Inverse sRGB transfer function.
pub fn srgb_to_linear(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    if x <= 0.040_45 {
        x / 12.92
    } else {
        ((x + 0.055) / 1.055).powf(2.4)
    }
}
