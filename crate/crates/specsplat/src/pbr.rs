//! Microfacet shading terms and the deferred radiance composition.
//!
//! The specular BRDF follows the Cook-Torrance form with a GGX normal
//! distribution (alpha = roughness^2) and a Smith height-correlated
//! geometry term. The hemispherical material integral is factored into a
//! precomputed scale/bias table so that per-pixel shading reduces to
//! `M_spec = F0 * A + B` plus an environment lookup.

use crate::math::{reflect, Rgb, Vec3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

use crate::SpecError;

/// Roughness alpha floor; keeps the GGX density finite for mirror surfaces.
pub const ALPHA_MIN: f64 = 1e-4;

/// Everything deferred shading needs to know about one surface sample.
#[derive(Clone, Copy, Debug)]
pub struct ShadingPoint {
    /// World-space surface position.
    pub position: Vec3,
    /// Unit surface normal.
    pub normal: Vec3,
    /// Unit direction toward the camera.
    pub view: Vec3,
    /// Unit reflection direction `2 (n·ω_o) n − ω_o`.
    pub reflection: Vec3,
    /// Surface roughness in `[0, 1]`.
    pub roughness: f64,
    /// Fresnel reflectance at normal incidence.
    pub f0: Rgb,
    /// Blended diffuse component.
    pub c_diff: Rgb,
}

impl ShadingPoint {
    /// Assemble a shading point from G-buffer samples. The normal and view
    /// directions must be unit length; the reflection direction is derived.
    pub fn new(position: Vec3, normal: Vec3, view: Vec3, roughness: f64, f0: Rgb, c_diff: Rgb) -> Self {
        ShadingPoint {
            position,
            normal,
            view,
            reflection: reflect(view, normal),
            roughness: roughness.clamp(0.0, 1.0),
            f0,
            c_diff,
        }
    }
}

/// Schlick Fresnel: `F0 + (1 − F0)(1 − cosθ)^5`, componentwise.
pub fn fresnel_schlick(f0: Rgb, cos_theta: f64) -> Rgb {
    let c = cos_theta.clamp(0.0, 1.0);
    let q = (1.0 - c).powi(5);
    Rgb::new(
        f0.r + (1.0 - f0.r) * q,
        f0.g + (1.0 - f0.g) * q,
        f0.b + (1.0 - f0.b) * q,
    )
}

/// GGX normal distribution evaluated at half vector `h`.
///
/// Uses alpha = roughness^2 with a small floor so the mirror limit stays
/// finite. Integrates to one against the projected solid angle `(n·h) dh`.
pub fn ndf_ggx(roughness: f64, n: Vec3, h: Vec3) -> f64 {
    let alpha = (roughness * roughness).max(ALPHA_MIN);
    let a2 = alpha * alpha;
    let nh = n.dot(&h).max(0.0);
    let d = nh * nh * (a2 - 1.0) + 1.0;
    a2 / (std::f64::consts::PI * d * d)
}

fn smith_lambda(cos: f64, a2: f64) -> f64 {
    // Lambda for the height-correlated Smith term; cos must be > 0.
    let c2 = cos * cos;
    let t2 = (1.0 - c2).max(0.0) / c2;
    ((1.0 + a2 * t2).sqrt() - 1.0) * 0.5
}

/// Smith height-correlated geometry attenuation for GGX.
///
/// Returns 0 when either direction lies below the surface; symmetric in
/// its two direction arguments.
pub fn geometry_smith(w_i: Vec3, w_o: Vec3, n: Vec3, roughness: f64) -> f64 {
    let ni = n.dot(&w_i);
    let no = n.dot(&w_o);
    if ni <= 0.0 || no <= 0.0 {
        return 0.0;
    }
    let alpha = (roughness * roughness).max(ALPHA_MIN);
    let a2 = alpha * alpha;
    // sum the lambdas first so the result is bitwise symmetric in (ω_i, ω_o)
    let lam = smith_lambda(ni, a2) + smith_lambda(no, a2);
    1.0 / (1.0 + lam)
}

/// Low-discrepancy points for the table integration.
fn hammersley(i: u32, n: u32) -> (f64, f64) {
    let mut bits = i;
    bits = (bits << 16) | (bits >> 16);
    bits = ((bits & 0x5555_5555) << 1) | ((bits & 0xAAAA_AAAA) >> 1);
    bits = ((bits & 0x3333_3333) << 2) | ((bits & 0xCCCC_CCCC) >> 2);
    bits = ((bits & 0x0F0F_0F0F) << 4) | ((bits & 0xF0F0_F0F0) >> 4);
    bits = ((bits & 0x00FF_00FF) << 8) | ((bits & 0xFF00_FF00) >> 8);
    (i as f64 / n as f64, bits as f64 * 2.328_306_436_538_696e-10)
}

/// Sample a GGX half vector around +Z from uniform `(u1, u2)`.
///
/// The density is `D(h) (z·h)` in solid angle.
pub fn sample_ggx_half(u1: f64, u2: f64, alpha: f64) -> Vec3 {
    let phi = 2.0 * std::f64::consts::PI * u1;
    let a2 = alpha * alpha;
    let cos2 = ((1.0 - u2) / (1.0 + (a2 - 1.0) * u2)).clamp(0.0, 1.0);
    let cos_t = cos2.sqrt();
    let sin_t = (1.0 - cos2).sqrt();
    Vec3::new(sin_t * phi.cos(), sin_t * phi.sin(), cos_t)
}

/// Scale/bias pair per `(n·ω_o, roughness)` bin approximating the
/// hemispherical specular material integral as `F0 * A + B`.
#[derive(Clone, Debug)]
pub struct BrdfLut {
    width: usize,
    height: usize,
    /// Row-major `(A, B)` pairs; row index = roughness bin, column = cosine bin.
    data: Vec<(f64, f64)>,
}

impl BrdfLut {
    /// Integrate the split-sum material table by GGX importance sampling.
    ///
    /// Bins are sampled at their centers: `n·ω_o` across columns, roughness
    /// across rows. Deterministic for a fixed `sample_count` (the sample set
    /// is a fixed low-discrepancy sequence).
    pub fn build(width: usize, height: usize, sample_count: u32) -> Self {
        assert!(sample_count >= 256, "table integration needs at least 256 samples");
        let mut data = vec![(0.0, 0.0); width * height];
        for iy in 0..height {
            let rough = (iy as f64 + 0.5) / height as f64;
            for ix in 0..width {
                let ndotv = ((ix as f64 + 0.5) / width as f64).max(1e-4);
                data[iy * width + ix] = integrate_bin(ndotv, rough, sample_count);
            }
        }
        BrdfLut { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Bilinear lookup of `(A, B)` at `(n·ω_o, roughness)`.
    pub fn sample(&self, ndotv: f64, roughness: f64) -> (f64, f64) {
        let (v, _) = self.sample_with_grad(ndotv, roughness);
        v
    }

    /// Bilinear lookup together with the partial derivatives
    /// `(dA/dx, dB/dx, dA/dy, dB/dy)` where x = `n·ω_o`, y = roughness.
    pub fn sample_with_grad(&self, ndotv: f64, roughness: f64) -> ((f64, f64), (f64, f64, f64, f64)) {
        let fx = (ndotv.clamp(0.0, 1.0) * self.width as f64 - 0.5)
            .clamp(0.0, self.width as f64 - 1.0);
        let fy = (roughness.clamp(0.0, 1.0) * self.height as f64 - 0.5)
            .clamp(0.0, self.height as f64 - 1.0);
        let x0 = (fx.floor() as usize).min(self.width - 1);
        let y0 = (fy.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = fx - x0 as f64;
        let ty = fy - y0 as f64;
        let g = |x: usize, y: usize| self.data[y * self.width + x];
        let (a00, b00) = g(x0, y0);
        let (a10, b10) = g(x1, y0);
        let (a01, b01) = g(x0, y1);
        let (a11, b11) = g(x1, y1);
        let a0 = a00 + (a10 - a00) * tx;
        let a1 = a01 + (a11 - a01) * tx;
        let b0 = b00 + (b10 - b00) * tx;
        let b1 = b01 + (b11 - b01) * tx;
        let a = a0 + (a1 - a0) * ty;
        let b = b0 + (b1 - b0) * ty;
        // d/dfx then rescale by d fx / d ndotv = width (0 at the clamped border).
        let interior_x = ndotv * self.width as f64 - 0.5 > 0.0
            && ndotv * self.width as f64 - 0.5 < self.width as f64 - 1.0;
        let interior_y = roughness * self.height as f64 - 0.5 > 0.0
            && roughness * self.height as f64 - 0.5 < self.height as f64 - 1.0;
        let sx = if interior_x { self.width as f64 } else { 0.0 };
        let sy = if interior_y { self.height as f64 } else { 0.0 };
        let da_dx = ((a10 - a00) + ((a11 - a01) - (a10 - a00)) * ty) * sx;
        let db_dx = ((b10 - b00) + ((b11 - b01) - (b10 - b00)) * ty) * sx;
        let da_dy = (a1 - a0) * sy;
        let db_dy = (b1 - b0) * sy;
        ((a, b), (da_dx, db_dx, da_dy, db_dy))
    }

    /// `M_spec = F0 * A + B` at the given cosine/roughness.
    pub fn m_spec(&self, f0: Rgb, ndotv: f64, roughness: f64) -> Rgb {
        let (a, b) = self.sample(ndotv, roughness);
        Rgb::new(f0.r * a + b, f0.g * a + b, f0.b * a + b)
    }

    /// Serialize as `"BLUT"` + u32 width + u32 height + f32 `(A, B)` pairs,
    /// row-major, little endian.
    pub fn save(&self, path: &Path) -> Result<(), SpecError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(b"BLUT")?;
        f.write_all(&(self.width as u32).to_le_bytes())?;
        f.write_all(&(self.height as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for &(a, b) in &self.data {
            buf.extend_from_slice(&(a as f32).to_le_bytes());
            buf.extend_from_slice(&(b as f32).to_le_bytes());
        }
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SpecError> {
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != b"BLUT" {
            return Err(SpecError::Format(format!(
                "{}: bad magic, expected BLUT",
                path.display()
            )));
        }
        let mut u = [0u8; 4];
        f.read_exact(&mut u)?;
        let width = u32::from_le_bytes(u) as usize;
        f.read_exact(&mut u)?;
        let height = u32::from_le_bytes(u) as usize;
        let mut raw = Vec::new();
        f.read_to_end(&mut raw)?;
        if raw.len() != width * height * 8 {
            return Err(SpecError::Format(format!(
                "{}: payload size {} does not match {}x{} table",
                path.display(),
                raw.len(),
                width,
                height
            )));
        }
        let mut data = Vec::with_capacity(width * height);
        for chunk in raw.chunks_exact(8) {
            let a = f32::from_le_bytes(chunk[0..4].try_into().unwrap()) as f64;
            let b = f32::from_le_bytes(chunk[4..8].try_into().unwrap()) as f64;
            data.push((a, b));
        }
        Ok(BrdfLut { width, height, data })
    }
}

/// One bin of the split-sum material integral:
/// `A = ∫ (1−(1−v·h)^5) G_vis`, `B = ∫ (1−v·h)^5 G_vis` over the GGX lobe.
fn integrate_bin(ndotv: f64, roughness: f64, sample_count: u32) -> (f64, f64) {
    let alpha = (roughness * roughness).max(ALPHA_MIN);
    let v = Vec3::new((1.0 - ndotv * ndotv).max(0.0).sqrt(), 0.0, ndotv);
    let n = Vec3::z();
    let a2 = alpha * alpha;
    let mut acc_a = 0.0;
    let mut acc_b = 0.0;
    for i in 0..sample_count {
        let (u1, u2) = hammersley(i, sample_count);
        let h = sample_ggx_half(u1, u2, alpha);
        let l = reflect(v, h);
        let nl = l.z;
        if nl <= 0.0 {
            continue;
        }
        let nh = h.z.max(0.0);
        let vh = v.dot(&h).max(1e-9);
        // pdf = D nh / (4 vh); integrand = D G F / (4 nv); the D and nh cancel.
        let g = 1.0 / (1.0 + smith_lambda(nl, a2) + smith_lambda(ndotv, a2));
        let g_vis = g * vh / (nh * ndotv).max(1e-12);
        let fc = (1.0 - vh).powi(5);
        acc_a += (1.0 - fc) * g_vis;
        acc_b += fc * g_vis;
    }
    (acc_a / sample_count as f64, acc_b / sample_count as f64)
}

/// Monte Carlo estimate of the material integral with a pseudo-random
/// stream; used for sanity runs where the fixed point set would correlate.
pub fn mc_m_spec(f0: Rgb, ndotv: f64, roughness: f64, samples: u32, seed: u64) -> Rgb {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha = (roughness * roughness).max(ALPHA_MIN);
    let v = Vec3::new((1.0 - ndotv * ndotv).max(0.0).sqrt(), 0.0, ndotv);
    let a2 = alpha * alpha;
    let mut acc = Rgb::BLACK;
    for _ in 0..samples {
        let h = sample_ggx_half(rng.gen::<f64>(), rng.gen::<f64>(), alpha);
        let l = reflect(v, h);
        let nl = l.z;
        if nl <= 0.0 {
            continue;
        }
        let nh = h.z.max(0.0);
        let vh = v.dot(&h).max(1e-9);
        let g = 1.0 / (1.0 + smith_lambda(nl, a2) + smith_lambda(ndotv, a2));
        let g_vis = g * vh / (nh * ndotv).max(1e-12);
        let f = fresnel_schlick(f0, vh);
        acc += f * g_vis;
    }
    acc / samples as f64
}

/// Final deferred composition:
/// `(1 − F)·C_diff + M_spec·((1 − w_vis)·L_direct + w_vis·L_indi)`.
pub fn compose_radiance(
    sp: &ShadingPoint,
    fresnel: Rgb,
    m_spec: Rgb,
    w_vis: f64,
    l_direct: Rgb,
    l_indirect: Rgb,
) -> Rgb {
    let spec_in = l_direct * (1.0 - w_vis) + l_indirect * w_vis;
    Rgb::new(
        (1.0 - fresnel.r) * sp.c_diff.r + m_spec.r * spec_in.r,
        (1.0 - fresnel.g) * sp.c_diff.g + m_spec.g * spec_in.g,
        (1.0 - fresnel.b) * sp.c_diff.b + m_spec.b * spec_in.b,
    )
}
