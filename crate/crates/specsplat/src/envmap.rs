//! Mip cubemap environment lighting.
//!
//! Direct specular reflection is a single trilinear lookup into a
//! prefiltered cube mipmap: bilinear within a level, linear across levels,
//! with the level driven by surface roughness (`level = r^2 (L_max - 1)`).
//! Levels shrink by a factor of four per side and are prefiltered with a
//! GGX lobe of roughness `sqrt(level / (L_max - 1))`.
//!
//! Face order is +X, -X, +Y, -Y, +Z, -Z. Bilinear taps that fall off a
//! face are re-projected through the cube onto the adjacent face instead
//! of clamping, which keeps sampling continuous across seams.

use crate::math::{reflect, rotation_z_to, Rgb, Vec3};
use crate::pbr::sample_ggx_half;
use crate::SpecError;
use std::io::{BufRead, Read, Write};
use std::path::Path;

/// Number of cube faces.
pub const FACES: usize = 6;

/// Map a direction to a face index and in-face `(u, v)` in `[0, 1]`.
///
/// The mapping is projective, so `dir` does not need to be normalized;
/// the zero vector is rejected.
pub fn dir_to_face_uv(dir: Vec3) -> (usize, f64, f64) {
    let (face, u, v, _, _) = dir_to_face_uv_grad(dir);
    (face, u, v)
}

/// Same as [`dir_to_face_uv`] plus the Jacobian rows `du/d(dir)` and
/// `dv/d(dir)` of the projective mapping.
pub fn dir_to_face_uv_grad(dir: Vec3) -> (usize, f64, f64, Vec3, Vec3) {
    let ax = dir.x.abs();
    let ay = dir.y.abs();
    let az = dir.z.abs();
    assert!(
        ax > 0.0 || ay > 0.0 || az > 0.0,
        "cannot map the zero vector to a cube face"
    );
    let (x, y, z) = (dir.x, dir.y, dir.z);
    // For each face: s, t in [-1, 1] and their gradients.
    // u = (s + 1) / 2 so du/d· = ds/d· / 2.
    let (face, s, t, ds, dt);
    if ax >= ay && ax >= az {
        if x > 0.0 {
            // +X: s = -z/x, t = -y/x
            face = 0;
            s = -z / x;
            t = -y / x;
            ds = Vec3::new(z / (x * x), 0.0, -1.0 / x);
            dt = Vec3::new(y / (x * x), -1.0 / x, 0.0);
        } else {
            // -X: s = -z/x, t = y/x (x < 0)
            face = 1;
            s = -z / x;
            t = y / x;
            ds = Vec3::new(z / (x * x), 0.0, -1.0 / x);
            dt = Vec3::new(-y / (x * x), 1.0 / x, 0.0);
        }
    } else if ay >= ax && ay >= az {
        if y > 0.0 {
            // +Y: s = x/y, t = z/y
            face = 2;
            s = x / y;
            t = z / y;
            ds = Vec3::new(1.0 / y, -x / (y * y), 0.0);
            dt = Vec3::new(0.0, -z / (y * y), 1.0 / y);
        } else {
            // -Y: s = -x/y, t = z/y (y < 0)
            face = 3;
            s = -x / y;
            t = z / y;
            ds = Vec3::new(-1.0 / y, x / (y * y), 0.0);
            dt = Vec3::new(0.0, -z / (y * y), 1.0 / y);
        }
    } else if z > 0.0 {
        // +Z: s = x/z, t = -y/z
        face = 4;
        s = x / z;
        t = -y / z;
        ds = Vec3::new(1.0 / z, 0.0, -x / (z * z));
        dt = Vec3::new(0.0, -1.0 / z, y / (z * z));
    } else {
        // -Z: s = x/z, t = y/z (z < 0)
        face = 5;
        s = x / z;
        t = y / z;
        ds = Vec3::new(1.0 / z, 0.0, -x / (z * z));
        dt = Vec3::new(0.0, 1.0 / z, -y / (z * z));
    }
    (face, 0.5 * (s + 1.0), 0.5 * (t + 1.0), ds * 0.5, dt * 0.5)
}

/// Inverse of [`dir_to_face_uv`]: unit direction of `(face, u, v)`.
pub fn face_uv_to_dir(face: usize, u: f64, v: f64) -> Vec3 {
    let s = 2.0 * u - 1.0;
    let t = 2.0 * v - 1.0;
    let d = match face {
        0 => Vec3::new(1.0, -t, -s),
        1 => Vec3::new(-1.0, -t, s),
        2 => Vec3::new(s, 1.0, t),
        3 => Vec3::new(s, -1.0, -t),
        4 => Vec3::new(s, -t, 1.0),
        5 => Vec3::new(-s, -t, -1.0),
        _ => panic!("face index {face} out of range"),
    };
    d.normalize()
}

/// One texel address inside a mip level, with its interpolation weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub level: usize,
    pub face: usize,
    pub x: usize,
    pub y: usize,
    pub weight: f64,
}

/// Six square faces of linear HDR texels.
#[derive(Clone, Debug)]
pub struct Cubemap {
    size: usize,
    faces: Vec<Vec<Rgb>>,
}

impl Cubemap {
    pub fn new(size: usize, fill: Rgb) -> Self {
        assert!(size >= 1);
        Cubemap { size, faces: vec![vec![fill; size * size]; FACES] }
    }

    /// Evaluate `f` at every texel center direction.
    pub fn from_fn(size: usize, mut f: impl FnMut(Vec3) -> Rgb) -> Self {
        let mut cm = Cubemap::new(size, Rgb::BLACK);
        for face in 0..FACES {
            for y in 0..size {
                for x in 0..size {
                    let d = cm.texel_dir(face, x, y);
                    cm.faces[face][y * size + x] = f(d);
                }
            }
        }
        cm
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn texel(&self, face: usize, x: usize, y: usize) -> Rgb {
        self.faces[face][y * self.size + x]
    }

    pub fn texel_mut(&mut self, face: usize, x: usize, y: usize) -> &mut Rgb {
        &mut self.faces[face][y * self.size + x]
    }

    /// Unit direction through the center of texel `(x, y)` on `face`.
    pub fn texel_dir(&self, face: usize, x: usize, y: usize) -> Vec3 {
        let u = (x as f64 + 0.5) / self.size as f64;
        let v = (y as f64 + 0.5) / self.size as f64;
        face_uv_to_dir(face, u, v)
    }

    /// Solid angle subtended by texel `(x, y)` (corner-difference formula).
    pub fn texel_solid_angle(&self, x: usize, y: usize) -> f64 {
        let n = self.size as f64;
        let area = |s: f64, t: f64| f64::atan2(s * t, (s * s + t * t + 1.0).sqrt());
        let s0 = 2.0 * (x as f64) / n - 1.0;
        let s1 = 2.0 * (x as f64 + 1.0) / n - 1.0;
        let t0 = 2.0 * (y as f64) / n - 1.0;
        let t1 = 2.0 * (y as f64 + 1.0) / n - 1.0;
        area(s1, t1) - area(s0, t1) - area(s1, t0) + area(s0, t0)
    }

    /// Solid-angle-weighted mean over all faces.
    pub fn weighted_mean(&self) -> Rgb {
        let mut acc = Rgb::BLACK;
        let mut total = 0.0;
        for face in 0..FACES {
            for y in 0..self.size {
                for x in 0..self.size {
                    let w = self.texel_solid_angle(x, y);
                    acc += self.texel(face, x, y) * w;
                    total += w;
                }
            }
        }
        acc / total
    }

    /// The four bilinear taps for `dir`, re-projecting off-face taps
    /// through the cube. Weights always sum to 1.
    fn bilinear_taps(&self, dir: Vec3, level: usize) -> [Tap; 4] {
        let (face, u, v) = dir_to_face_uv(dir);
        let n = self.size as f64;
        let fx = u * n - 0.5;
        let fy = v * n - 0.5;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let tx = fx - x0;
        let ty = fy - y0;
        let mut taps = [Tap { level, face: 0, x: 0, y: 0, weight: 0.0 }; 4];
        let coords = [
            (x0, y0, (1.0 - tx) * (1.0 - ty)),
            (x0 + 1.0, y0, tx * (1.0 - ty)),
            (x0, y0 + 1.0, (1.0 - tx) * ty),
            (x0 + 1.0, y0 + 1.0, tx * ty),
        ];
        for (i, &(xc, yc, w)) in coords.iter().enumerate() {
            let (f2, x2, y2) = self.resolve_texel(face, xc, yc);
            taps[i] = Tap { level, face: f2, x: x2, y: y2, weight: w };
        }
        taps
    }

    /// Map an integer tap coordinate to a real texel, jumping to the
    /// adjacent face when it falls off this one.
    fn resolve_texel(&self, face: usize, xc: f64, yc: f64) -> (usize, usize, usize) {
        let n = self.size as f64;
        if xc >= 0.0 && xc <= n - 1.0 && yc >= 0.0 && yc <= n - 1.0 {
            return (face, xc as usize, yc as usize);
        }
        // Off-face: take the direction of the virtual texel center on the
        // extended face plane and find the nearest real texel.
        let u = (xc + 0.5) / n;
        let v = (yc + 0.5) / n;
        let d = face_uv_to_dir(face, u, v);
        let (f2, u2, v2) = dir_to_face_uv(d);
        let x2 = ((u2 * n - 0.5).round().clamp(0.0, n - 1.0)) as usize;
        let y2 = ((v2 * n - 0.5).round().clamp(0.0, n - 1.0)) as usize;
        (f2, x2, y2)
    }

    /// Bilinear sample with seam-aware taps.
    pub fn sample_bilinear(&self, dir: Vec3) -> Rgb {
        let taps = self.bilinear_taps(dir, 0);
        let mut acc = Rgb::BLACK;
        for t in taps {
            acc += self.texel(t.face, t.x, t.y) * t.weight;
        }
        acc
    }

    fn scale_add(&mut self, other: &Cubemap, s: f64) {
        assert_eq!(self.size, other.size);
        for f in 0..FACES {
            for i in 0..self.size * self.size {
                self.faces[f][i] += other.faces[f][i] * s;
            }
        }
    }
}

/// Prefiltered mip hierarchy over a [`Cubemap`].
#[derive(Clone, Debug)]
pub struct MipCubemap {
    levels: Vec<Cubemap>,
}

impl MipCubemap {
    /// Build the hierarchy: level 0 is `base`; level `l > 0` has side
    /// length `base/4^l` and holds the GGX-prefiltered radiance for
    /// roughness `sqrt(l / (l_max - 1))`.
    pub fn prefilter(base: &Cubemap, l_max: usize, samples_per_texel: u32) -> Self {
        assert!(l_max >= 1);
        let mut levels = Vec::with_capacity(l_max);
        levels.push(base.clone());
        for l in 1..l_max {
            let side = base.size() / 4usize.pow(l as u32);
            assert!(side >= 1, "base resolution {} too small for {} levels", base.size(), l_max);
            let rough = ((l as f64) / (l_max as f64 - 1.0)).sqrt();
            levels.push(prefilter_level(base, side, rough, samples_per_texel));
        }
        MipCubemap { levels }
    }

    /// Wrap an existing pyramid (used by tests and by the no-mip ablation).
    pub fn from_levels(levels: Vec<Cubemap>) -> Self {
        assert!(!levels.is_empty());
        MipCubemap { levels }
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, l: usize) -> &Cubemap {
        &self.levels[l]
    }

    pub fn base(&self) -> &Cubemap {
        &self.levels[0]
    }

    pub fn base_mut(&mut self) -> &mut Cubemap {
        &mut self.levels[0]
    }

    /// Re-derive levels 1.. from the (possibly updated) base level.
    pub fn refresh(&mut self, samples_per_texel: u32) {
        let l_max = self.levels.len();
        let base = self.levels[0].clone();
        *self = MipCubemap::prefilter(&base, l_max, samples_per_texel);
    }

    /// All contributing taps (at most eight) for a trilinear query.
    pub fn trilinear_taps(&self, dir: Vec3, level: f64) -> Vec<Tap> {
        let (l0, l1, t) = self.level_blend(level);
        let mut taps = Vec::with_capacity(8);
        for tap in self.levels[l0].bilinear_taps(dir, l0) {
            taps.push(Tap { weight: tap.weight * (1.0 - t), ..tap });
        }
        if t > 0.0 {
            for tap in self.levels[l1].bilinear_taps(dir, l1) {
                taps.push(Tap { weight: tap.weight * t, ..tap });
            }
        }
        taps
    }

    fn level_blend(&self, level: f64) -> (usize, usize, f64) {
        let lmax = (self.levels.len() - 1) as f64;
        let level = level.clamp(0.0, lmax);
        let l0 = (level.floor() as usize).min(self.levels.len() - 1);
        let l1 = (l0 + 1).min(self.levels.len() - 1);
        (l0, l1, level - l0 as f64)
    }

    /// Trilinear lookup: bilinear within each adjacent level, linear blend
    /// across them. `level` is clamped to `[0, L_max - 1]`.
    pub fn sample_trilinear(&self, dir: Vec3, level: f64) -> Rgb {
        let mut acc = Rgb::BLACK;
        for tap in self.trilinear_taps(dir, level) {
            acc += self.levels[tap.level].texel(tap.face, tap.x, tap.y) * tap.weight;
        }
        acc
    }

    /// Trilinear lookup together with derivatives with respect to the
    /// (projective) direction and the level.
    pub fn sample_trilinear_full(&self, dir: Vec3, level: f64) -> TrilinearSample {
        let (l0, l1, t) = self.level_blend(level);
        let (_, _, _, du, dv) = dir_to_face_uv_grad(dir);
        let s0 = level_sample_uv_grad(&self.levels[l0], dir);
        let (value, d_u, d_v, d_level);
        if l1 > l0 {
            let s1 = level_sample_uv_grad(&self.levels[l1], dir);
            value = s0.0 * (1.0 - t) + s1.0 * t;
            d_u = s0.1 * (1.0 - t) + s1.1 * t;
            d_v = s0.2 * (1.0 - t) + s1.2 * t;
            d_level = s1.0 - s0.0;
        } else {
            value = s0.0;
            d_u = s0.1;
            d_v = s0.2;
            d_level = Rgb::BLACK;
        }
        let d_dir = [
            Rgb::new(
                d_u.r * du.x + d_v.r * dv.x,
                d_u.g * du.x + d_v.g * dv.x,
                d_u.b * du.x + d_v.b * dv.x,
            ),
            Rgb::new(
                d_u.r * du.y + d_v.r * dv.y,
                d_u.g * du.y + d_v.g * dv.y,
                d_u.b * du.y + d_v.b * dv.y,
            ),
            Rgb::new(
                d_u.r * du.z + d_v.r * dv.z,
                d_u.g * du.z + d_v.g * dv.z,
                d_u.b * du.z + d_v.b * dv.z,
            ),
        ];
        TrilinearSample { value, d_dir, d_level }
    }

    /// Adjoint of [`MipCubemap::sample_trilinear`]: scatter `upstream` to
    /// the contributing texels with the forward interpolation weights.
    pub fn sample_trilinear_backward(&self, dir: Vec3, level: f64, upstream: Rgb) -> Vec<(Tap, Rgb)> {
        self.trilinear_taps(dir, level)
            .into_iter()
            .map(|tap| (tap, upstream * tap.weight))
            .collect()
    }

    /// Scatter a gradient into a base-level accumulation buffer through
    /// the base bilinear weights at `dir` (the route training uses: all
    /// environment gradients land on level 0).
    pub fn scatter_base_gradient(&self, dir: Vec3, upstream: Rgb, grad: &mut Cubemap) {
        debug_assert_eq!(grad.size(), self.levels[0].size());
        for tap in self.levels[0].bilinear_taps(dir, 0) {
            *grad.texel_mut(tap.face, tap.x, tap.y) += upstream * tap.weight;
        }
    }
}

/// Trilinear sample value and its local derivatives.
#[derive(Clone, Copy, Debug)]
pub struct TrilinearSample {
    pub value: Rgb,
    /// Per-axis derivative of the value with respect to the raw direction.
    pub d_dir: [Rgb; 3],
    /// Derivative with respect to the fractional level.
    pub d_level: Rgb,
}

/// Bilinear sample of one level plus d/du, d/dv (in face-uv units).
fn level_sample_uv_grad(cm: &Cubemap, dir: Vec3) -> (Rgb, Rgb, Rgb) {
    let (face, u, v) = dir_to_face_uv(dir);
    let n = cm.size() as f64;
    let fx = u * n - 0.5;
    let fy = v * n - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let tx = fx - x0;
    let ty = fy - y0;
    let fetch = |xc: f64, yc: f64| -> Rgb {
        let (f2, x2, y2) = cm.resolve_texel(face, xc, yc);
        cm.texel(f2, x2, y2)
    };
    let c00 = fetch(x0, y0);
    let c10 = fetch(x0 + 1.0, y0);
    let c01 = fetch(x0, y0 + 1.0);
    let c11 = fetch(x0 + 1.0, y0 + 1.0);
    let a = c00 * (1.0 - tx) + c10 * tx;
    let b = c01 * (1.0 - tx) + c11 * tx;
    let value = a * (1.0 - ty) + b * ty;
    let d_tx = (c10 - c00) * (1.0 - ty) + (c11 - c01) * ty;
    let d_ty = b - a;
    (value, d_tx * n, d_ty * n)
}

/// Convolve the base level with a GGX lobe of roughness `rough`,
/// evaluated at `side`-resolution texel centers (normal = view = texel
/// direction). Deterministic: the sample set is a fixed low-discrepancy
/// sequence.
fn prefilter_level(base: &Cubemap, side: usize, rough: f64, samples: u32) -> Cubemap {
    let alpha = (rough * rough).max(crate::pbr::ALPHA_MIN);
    let mut seq = Vec::with_capacity(samples as usize);
    for i in 0..samples {
        seq.push(hammersley2(i, samples));
    }
    let mut out = Cubemap::new(side, Rgb::BLACK);
    for face in 0..FACES {
        for y in 0..side {
            for x in 0..side {
                let nrm = out.texel_dir(face, x, y);
                let frame = rotation_z_to(nrm);
                let mut acc = Rgb::BLACK;
                let mut wsum = 0.0;
                for &(u1, u2) in &seq {
                    let h = frame * sample_ggx_half(u1, u2, alpha);
                    let l = reflect(nrm, h);
                    let ndotl = nrm.dot(&l);
                    if ndotl <= 0.0 {
                        continue;
                    }
                    acc += base.sample_bilinear(l) * ndotl;
                    wsum += ndotl;
                }
                *out.texel_mut(face, x, y) =
                    if wsum > 0.0 { acc / wsum } else { base.sample_bilinear(nrm) };
            }
        }
    }
    out
}

fn hammersley2(i: u32, n: u32) -> (f64, f64) {
    let mut bits = i;
    bits = (bits << 16) | (bits >> 16);
    bits = ((bits & 0x5555_5555) << 1) | ((bits & 0xAAAA_AAAA) >> 1);
    bits = ((bits & 0x3333_3333) << 2) | ((bits & 0xCCCC_CCCC) >> 2);
    bits = ((bits & 0x0F0F_0F0F) << 4) | ((bits & 0xF0F0_F0F0) >> 4);
    bits = ((bits & 0x00FF_00FF) << 8) | ((bits & 0xFF00_FF00) >> 8);
    (i as f64 / n as f64, bits as f64 * 2.328_306_436_538_696e-10)
}

const FACE_FILES: [&str; 6] = ["px.f32", "nx.f32", "py.f32", "ny.f32", "pz.f32", "nz.f32"];

/// Write the base level as six raw float32 faces plus a manifest that
/// records the face order.
pub fn save_cubemap(cm: &Cubemap, dir: &Path) -> Result<(), SpecError> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (face, name) in FACE_FILES.iter().enumerate() {
        manifest.push_str(name);
        manifest.push('\n');
        let mut f = std::fs::File::create(dir.join(name))?;
        writeln!(f, "{} {}", cm.size(), cm.size())?;
        let mut buf = Vec::with_capacity(cm.size() * cm.size() * 12);
        for y in 0..cm.size() {
            for x in 0..cm.size() {
                let c = cm.texel(face, x, y);
                buf.extend_from_slice(&(c.r as f32).to_le_bytes());
                buf.extend_from_slice(&(c.g as f32).to_le_bytes());
                buf.extend_from_slice(&(c.b as f32).to_le_bytes());
            }
        }
        f.write_all(&buf)?;
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Load a cubemap saved by [`save_cubemap`].
pub fn load_cubemap(dir: &Path) -> Result<Cubemap, SpecError> {
    let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
    let names: Vec<&str> = manifest.lines().filter(|l| !l.trim().is_empty()).collect();
    if names.len() != FACES {
        return Err(SpecError::Format(format!(
            "{}: manifest must list {} faces, found {}",
            dir.display(),
            FACES,
            names.len()
        )));
    }
    let mut cm: Option<Cubemap> = None;
    for (face, name) in names.iter().enumerate() {
        let mut rd = std::io::BufReader::new(std::fs::File::open(dir.join(name))?);
        let mut header = String::new();
        rd.read_line(&mut header)?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| SpecError::Format(format!("{name}: bad header"))))
            .collect::<std::result::Result<_, _>>()?;
        if dims.len() != 2 || dims[0] != dims[1] {
            return Err(SpecError::Format(format!("{name}: faces must be square")));
        }
        let size = dims[0];
        let cm = cm.get_or_insert_with(|| Cubemap::new(size, Rgb::BLACK));
        if cm.size() != size {
            return Err(SpecError::Format(format!("{name}: face size mismatch")));
        }
        let mut raw = Vec::new();
        rd.read_to_end(&mut raw)?;
        if raw.len() != size * size * 12 {
            return Err(SpecError::Format(format!("{name}: payload size mismatch")));
        }
        for (i, chunk) in raw.chunks_exact(12).enumerate() {
            let r = f32::from_le_bytes(chunk[0..4].try_into().unwrap()) as f64;
            let g = f32::from_le_bytes(chunk[4..8].try_into().unwrap()) as f64;
            let b = f32::from_le_bytes(chunk[8..12].try_into().unwrap()) as f64;
            cm.faces[face][i] = Rgb::new(r, g, b);
        }
    }
    Ok(cm.unwrap())
}

/// `level = r^2 (L_max - 1)`, the roughness-to-mip mapping.
pub fn roughness_to_level(r: f64, l_max: usize) -> f64 {
    let r = r.clamp(0.0, 1.0);
    r * r * (l_max as f64 - 1.0)
}

/// Texelwise `base += s * delta`, clamping radiance at zero.
pub fn apply_base_delta(env: &mut MipCubemap, delta: &Cubemap, s: f64) {
    env.base_mut().scale_add(delta, s);
    let size = env.base().size();
    for f in 0..FACES {
        for i in 0..size * size {
            let c = env.levels[0].faces[f][i];
            env.levels[0].faces[f][i] = Rgb::new(c.r.max(0.0), c.g.max(0.0), c.b.max(0.0));
        }
    }
}
