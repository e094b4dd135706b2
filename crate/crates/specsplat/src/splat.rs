//! Differentiable 3D Gaussian rasterization into per-pixel G-buffers.
//!
//! Gaussians carry material attributes (diffuse color, F0, roughness) in
//! addition to geometry; every channel blends with the same depth-sorted
//! alpha-compositing weights. The forward pass bins Gaussians to pixels
//! by their 3-sigma screen bounds; a per-pixel loop over the depth-sorted
//! bin then composites front to back. The backward pass replays the same
//! walk and accumulates hand-derived gradients for all 18 parameters per
//! Gaussian.

use crate::math::{sigmoid, Mat2, Mat3, Rgb, Vec2, Vec3, Vec4};
use crate::SpecError;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

/// Parameters per Gaussian in the flat optimization layout.
pub const G_PARAMS: usize = 18;
/// Offsets into the per-Gaussian parameter vector.
pub const P_POS: usize = 0;
pub const P_LOG_SCALE: usize = 3;
pub const P_QUAT: usize = 6;
pub const P_OPACITY: usize = 10;
pub const P_CDIFF: usize = 11;
pub const P_F0: usize = 14;
pub const P_ROUGH: usize = 17;

/// Contributions with `alpha * density` below this are skipped.
pub const MIN_CONTRIB: f64 = 1.0 / 255.0;
/// Per-contribution alpha cap (keeps the compositing backward finite).
pub const ALPHA_CAP: f64 = 1.0 - 1e-7;
/// Squared-Mahalanobis cutoff: 3 sigma.
const POWER_CUTOFF: f64 = 4.5;
/// Screen-space covariance dilation in pixels squared.
const DILATION: f64 = 0.3;
/// Near plane for culling.
const Z_NEAR: f64 = 0.01;
/// Stop compositing once transmittance drops below this.
const T_STOP: f64 = 1e-9;

/// One optimizable Gaussian primitive.
#[derive(Clone, Debug)]
pub struct Gaussian {
    /// World-space center.
    pub pos: Vec3,
    /// Log of the per-axis scale (scale = exp, always positive).
    pub log_scale: Vec3,
    /// Rotation quaternion (x, y, z, w), not necessarily unit.
    pub quat: Vec4,
    /// Opacity in logit space: opacity = sigmoid(opacity_logit).
    pub opacity_logit: f64,
    /// Diffuse component (linear RGB).
    pub c_diff: Rgb,
    /// Fresnel reflectance at normal incidence, in [0, 1].
    pub f0: Rgb,
    /// Roughness in logit space: r = sigmoid(rough_logit).
    pub rough_logit: f64,
}

impl Gaussian {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn roughness(&self) -> f64 {
        sigmoid(self.rough_logit)
    }

    pub fn scale(&self) -> Vec3 {
        self.log_scale.map(f64::exp)
    }

    /// Normalized rotation matrix of the quaternion.
    pub fn rotation(&self) -> Mat3 {
        let q = self.quat / self.quat.norm();
        quat_to_mat(q)
    }

    /// Covariance `R S S^T R^T`.
    pub fn covariance(&self) -> Mat3 {
        let r = self.rotation();
        let s = self.scale();
        let d = Mat3::from_diagonal(&Vec3::new(s.x * s.x, s.y * s.y, s.z * s.z));
        r * d * r.transpose()
    }

    /// Read one parameter from the flat layout.
    pub fn param(&self, i: usize) -> f64 {
        match i {
            0..=2 => self.pos[i],
            3..=5 => self.log_scale[i - 3],
            6..=9 => self.quat[i - 6],
            10 => self.opacity_logit,
            11..=13 => self.c_diff.to_array()[i - 11],
            14..=16 => self.f0.to_array()[i - 14],
            17 => self.rough_logit,
            _ => panic!("parameter index {i} out of range"),
        }
    }

    /// Write one parameter in the flat layout.
    pub fn set_param(&mut self, i: usize, v: f64) {
        match i {
            0..=2 => self.pos[i] = v,
            3..=5 => self.log_scale[i - 3] = v,
            6..=9 => self.quat[i - 6] = v,
            10 => self.opacity_logit = v,
            11 => self.c_diff.r = v,
            12 => self.c_diff.g = v,
            13 => self.c_diff.b = v,
            14 => self.f0.r = v,
            15 => self.f0.g = v,
            16 => self.f0.b = v,
            17 => self.rough_logit = v,
            _ => panic!("parameter index {i} out of range"),
        }
    }
}

fn quat_to_mat(q: Vec4) -> Mat3 {
    let (x, y, z, w) = (q.x, q.y, q.z, q.w);
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// d(rotation)/d(unit quaternion component); `axis` indexes (x, y, z, w).
fn quat_to_mat_grad(q: Vec4, axis: usize) -> Mat3 {
    let (x, y, z, w) = (q.x, q.y, q.z, q.w);
    match axis {
        0 => Mat3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x),
        1 => Mat3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y),
        2 => Mat3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0),
        3 => Mat3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0),
        _ => unreachable!(),
    }
}

/// Pinhole camera with world-to-camera extrinsics (x right, y down,
/// z forward; pixel (0.5, 0.5) is the center of the top-left pixel).
#[derive(Clone, Debug)]
pub struct PosedView {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rot: Mat3,
    /// World-to-camera translation.
    pub trans: Vec3,
    pub width: usize,
    pub height: usize,
}

impl PosedView {
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fx: f64, width: usize, height: usize) -> Self {
        let fwd = (target - eye).normalize();
        let mut right = fwd.cross(&up);
        if right.norm() < 1e-9 {
            right = fwd.cross(&Vec3::x());
        }
        let right = right.normalize();
        let down = fwd.cross(&right).normalize() * -1.0;
        let down = -down; // y axis points down in camera space
        let rot = Mat3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
        let trans = -(rot * eye);
        PosedView {
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rot,
            trans,
            width,
            height,
        }
    }

    /// Camera center in world coordinates.
    pub fn camera_center(&self) -> Vec3 {
        -(self.rot.transpose() * self.trans)
    }

    pub fn world_to_cam(&self, p: Vec3) -> Vec3 {
        self.rot * p + self.trans
    }

    /// Project a world point; returns pixel coordinates and camera z.
    pub fn project(&self, p: Vec3) -> (Vec2, f64) {
        let c = self.world_to_cam(p);
        (
            Vec2::new(self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy),
            c.z,
        )
    }

    /// Unit camera-space ray direction through pixel center `(ix, iy)`.
    pub fn ray_dir_cam(&self, px: f64, py: f64) -> Vec3 {
        Vec3::new((px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0).normalize()
    }

    /// Unit world-space ray direction through pixel center `(ix, iy)`.
    pub fn ray_dir_world(&self, px: f64, py: f64) -> Vec3 {
        self.rot.transpose() * self.ray_dir_cam(px, py)
    }
}

/// Per-pixel blended surface attributes (premultiplied by the
/// compositing weights, as the volume rendering produces them).
#[derive(Clone, Debug)]
pub struct GBuffer {
    pub width: usize,
    pub height: usize,
    pub c_diff: Vec<Rgb>,
    pub f0: Vec<Rgb>,
    pub roughness: Vec<f64>,
    pub normal: Vec<Vec3>,
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl GBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        let n = width * height;
        GBuffer {
            width,
            height,
            c_diff: vec![Rgb::BLACK; n],
            f0: vec![Rgb::BLACK; n],
            roughness: vec![0.0; n],
            normal: vec![Vec3::zeros(); n],
            depth: vec![0.0; n],
            alpha: vec![0.0; n],
        }
    }

    pub fn idx(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }
}

/// Upstream gradients with respect to every G-buffer channel.
#[derive(Clone, Debug)]
pub struct GBufferGrad {
    pub c_diff: Vec<Rgb>,
    pub f0: Vec<Rgb>,
    pub roughness: Vec<f64>,
    pub normal: Vec<Vec3>,
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl GBufferGrad {
    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        GBufferGrad {
            c_diff: vec![Rgb::BLACK; n],
            f0: vec![Rgb::BLACK; n],
            roughness: vec![0.0; n],
            normal: vec![Vec3::zeros(); n],
            depth: vec![0.0; n],
            alpha: vec![0.0; n],
        }
    }
}

/// Screen-space footprint of one Gaussian, cached between the forward and
/// backward passes (all discrete decisions are frozen here).
#[derive(Clone, Debug)]
struct Projected {
    visible: bool,
    mean2d: Vec2,
    /// Inverse of the dilated 2x2 screen covariance.
    inv_cov: Mat2,
    cov2d: Mat2,
    /// Camera z of the center (sort key).
    z: f64,
    /// Camera-space distance of the center (depth channel value).
    range: f64,
    /// World-space normal, sign-flipped toward the camera.
    normal: Vec3,
    /// Which scale axis was smallest, and the applied sign.
    min_axis: usize,
    flip: f64,
    opacity: f64,
    roughness: f64,
    radius: f64,
}

/// Forward artifacts required by the backward pass.
pub struct RasterContext {
    projected: Vec<Projected>,
    /// Indices of visible Gaussians in front-to-back order.
    order: Vec<u32>,
    /// Per pixel: visible Gaussians whose 3-sigma box covers it, in order.
    pixel_bins: Vec<Vec<u32>>,
    /// Count of Gaussians dropped for non-finite/degenerate covariance.
    pub skipped_degenerate: usize,
}

fn project_one(g: &Gaussian, view: &PosedView) -> Option<Projected> {
    let mut finite = g.pos.iter().all(|v| v.is_finite())
        && g.log_scale.iter().all(|v| v.is_finite())
        && g.quat.iter().all(|v| v.is_finite())
        && g.opacity_logit.is_finite()
        && g.rough_logit.is_finite();
    finite &= g.c_diff.is_finite() && g.f0.is_finite();
    if !finite || g.quat.norm() < 1e-12 {
        return None;
    }
    let cam = view.world_to_cam(g.pos);
    if cam.z <= Z_NEAR {
        return Some(Projected {
            visible: false,
            mean2d: Vec2::zeros(),
            inv_cov: Mat2::zeros(),
            cov2d: Mat2::zeros(),
            z: cam.z,
            range: 0.0,
            normal: Vec3::zeros(),
            min_axis: 0,
            flip: 1.0,
            opacity: 0.0,
            roughness: 0.0,
            radius: 0.0,
        });
    }
    let cov3 = g.covariance();
    let j = proj_jacobian(view, cam);
    let a = j * view.rot;
    let mut cov2 = a * cov3 * a.transpose();
    cov2[(0, 0)] += DILATION;
    cov2[(1, 1)] += DILATION;
    let det = cov2[(0, 0)] * cov2[(1, 1)] - cov2[(0, 1)] * cov2[(1, 0)];
    if !(det.is_finite() && det > 1e-12) {
        return None;
    }
    let inv = Mat2::new(cov2[(1, 1)], -cov2[(0, 1)], -cov2[(1, 0)], cov2[(0, 0)]) / det;
    // largest eigenvalue of the 2x2 covariance bounds the footprint
    let mid = 0.5 * (cov2[(0, 0)] + cov2[(1, 1)]);
    let lam = mid + ((mid * mid - det).max(0.0)).sqrt();
    let radius = 3.0 * lam.sqrt();
    // normal: smallest-scale axis, flipped toward the camera
    let s = g.scale();
    let mut min_axis = 0;
    if s.y < s[min_axis] {
        min_axis = 1;
    }
    if s.z < s[min_axis] {
        min_axis = 2;
    }
    let n0 = g.rotation().column(min_axis).clone_owned();
    let to_cam = view.camera_center() - g.pos;
    let flip = if n0.dot(&to_cam) >= 0.0 { 1.0 } else { -1.0 };
    Some(Projected {
        visible: true,
        mean2d: (Vec2::new(view.fx * cam.x / cam.z + view.cx, view.fy * cam.y / cam.z + view.cy)),
        inv_cov: inv,
        cov2d: cov2,
        z: cam.z,
        range: cam.norm(),
        normal: n0 * flip,
        min_axis,
        flip,
        opacity: g.opacity(),
        roughness: g.roughness(),
        radius,
    })
}

fn proj_jacobian(view: &PosedView, cam: Vec3) -> nalgebra::Matrix2x3<f64> {
    nalgebra::Matrix2x3::new(
        view.fx / cam.z,
        0.0,
        -view.fx * cam.x / (cam.z * cam.z),
        0.0,
        view.fy / cam.z,
        -view.fy * cam.y / (cam.z * cam.z),
    )
}

/// Rasterize the cloud into a G-buffer. Every attribute channel blends
/// with the same front-to-back compositing weights; `alpha` accumulates
/// the weights themselves.
pub fn rasterize(cloud: &[Gaussian], view: &PosedView) -> (GBuffer, RasterContext) {
    let mut projected = Vec::with_capacity(cloud.len());
    let mut skipped = 0usize;
    for g in cloud {
        match project_one(g, view) {
            Some(p) => projected.push(p),
            None => {
                skipped += 1;
                projected.push(Projected {
                    visible: false,
                    mean2d: Vec2::zeros(),
                    inv_cov: Mat2::zeros(),
                    cov2d: Mat2::zeros(),
                    z: 0.0,
                    range: 0.0,
                    normal: Vec3::zeros(),
                    min_axis: 0,
                    flip: 1.0,
                    opacity: 0.0,
                    roughness: 0.0,
                    radius: 0.0,
                });
            }
        }
    }
    let mut order: Vec<u32> = (0..projected.len() as u32)
        .filter(|&i| projected[i as usize].visible)
        .collect();
    order.sort_by(|&a, &b| {
        projected[a as usize]
            .z
            .partial_cmp(&projected[b as usize].z)
            .unwrap()
            .then(a.cmp(&b))
    });
    // bin by 3-sigma boxes, preserving depth order per pixel
    let mut pixel_bins: Vec<Vec<u32>> = vec![Vec::new(); view.width * view.height];
    for &gi in &order {
        let p = &projected[gi as usize];
        let x0 = ((p.mean2d.x - p.radius - 0.5).floor().max(0.0)) as usize;
        let x1 = ((p.mean2d.x + p.radius - 0.5).ceil().min(view.width as f64 - 1.0)) as usize;
        let y0 = ((p.mean2d.y - p.radius - 0.5).floor().max(0.0)) as usize;
        let y1 = ((p.mean2d.y + p.radius - 0.5).ceil().min(view.height as f64 - 1.0)) as usize;
        if p.mean2d.x + p.radius < 0.5 || p.mean2d.y + p.radius < 0.5 {
            continue;
        }
        for y in y0..=y1 {
            for x in x0..=x1 {
                pixel_bins[y * view.width + x].push(gi);
            }
        }
    }
    let mut gb = GBuffer::new(view.width, view.height);
    for py in 0..view.height {
        for px in 0..view.width {
            let idx = py * view.width + px;
            let pix = Vec2::new(px as f64 + 0.5, py as f64 + 0.5);
            let mut t = 1.0;
            for &gi in &pixel_bins[idx] {
                let p = &projected[gi as usize];
                let Some((a, _)) = contribution(p, pix) else {
                    continue;
                };
                let g = cloud[gi as usize];
                let w = a * t;
                gb.c_diff[idx] += g.c_diff * w;
                gb.f0[idx] += g.f0 * w;
                gb.roughness[idx] += p.roughness * w;
                gb.normal[idx] += p.normal * w;
                gb.depth[idx] += p.range * w;
                gb.alpha[idx] += w;
                t *= 1.0 - a;
                if t < T_STOP {
                    break;
                }
            }
        }
    }
    (
        gb,
        RasterContext { projected, order, pixel_bins, skipped_degenerate: skipped },
    )
}

/// Per-contribution alpha and density, applying the 3-sigma cutoff, the
/// minimum-contribution skip, and the alpha cap. Returns `None` when the
/// Gaussian does not contribute at this pixel.
fn contribution(p: &Projected, pix: Vec2) -> Option<(f64, f64)> {
    let d = pix - p.mean2d;
    let power = 0.5 * (p.inv_cov * d).dot(&d);
    if power > POWER_CUTOFF || power < 0.0 {
        return None;
    }
    let gprime = (-power).exp();
    let a = (p.opacity * gprime).min(ALPHA_CAP);
    if a < MIN_CONTRIB {
        return None;
    }
    Some((a, gprime))
}

/// Analytic gradients of a scalar loss with respect to every Gaussian
/// parameter, given upstream gradients on all G-buffer channels.
///
/// Replays the forward walk (all discrete decisions are cached in `ctx`),
/// so it must be called with the same cloud and view.
pub fn rasterize_backward(
    cloud: &[Gaussian],
    view: &PosedView,
    ctx: &RasterContext,
    grad: &GBufferGrad,
) -> Vec<[f64; G_PARAMS]> {
    let mut out = vec![[0.0; G_PARAMS]; cloud.len()];
    // per-Gaussian accumulators for the geometric chain
    let mut d_mean2d = vec![Vec2::zeros(); cloud.len()];
    let mut d_invcov = vec![Mat2::zeros(); cloud.len()];
    let mut d_opacity = vec![0.0; cloud.len()];
    let mut d_normal = vec![Vec3::zeros(); cloud.len()];
    let mut d_range = vec![0.0; cloud.len()];

    struct Contrib {
        gi: u32,
        a: f64,
        gprime: f64,
        t: f64,
        d: Vec2,
    }
    let mut contribs: Vec<Contrib> = Vec::with_capacity(64);

    for py in 0..view.height {
        for px in 0..view.width {
            let idx = py * view.width + px;
            if ctx.pixel_bins[idx].is_empty() {
                continue;
            }
            let pix = Vec2::new(px as f64 + 0.5, py as f64 + 0.5);
            contribs.clear();
            let mut t = 1.0;
            // channel totals for the suffix trick
            let mut tot_cd = Rgb::BLACK;
            let mut tot_f0 = Rgb::BLACK;
            let mut tot_rough = 0.0;
            let mut tot_n = Vec3::zeros();
            let mut tot_depth = 0.0;
            let mut tot_alpha = 0.0;
            for &gi in &ctx.pixel_bins[idx] {
                let p = &ctx.projected[gi as usize];
                let Some((a, gprime)) = contribution(p, pix) else {
                    continue;
                };
                let w = a * t;
                let g = &cloud[gi as usize];
                tot_cd += g.c_diff * w;
                tot_f0 += g.f0 * w;
                tot_rough += p.roughness * w;
                tot_n += p.normal * w;
                tot_depth += p.range * w;
                tot_alpha += w;
                contribs.push(Contrib { gi, a, gprime, t, d: pix - p.mean2d });
                t *= 1.0 - a;
                if t < T_STOP {
                    break;
                }
            }
            if contribs.is_empty() {
                continue;
            }
            let g_cd = grad.c_diff[idx];
            let g_f0 = grad.f0[idx];
            let g_rough = grad.roughness[idx];
            let g_n = grad.normal[idx];
            let g_depth = grad.depth[idx];
            let g_alpha = grad.alpha[idx];
            // walk front to back keeping the strict-suffix channel sums
            let mut rest_cd = tot_cd;
            let mut rest_f0 = tot_f0;
            let mut rest_rough = tot_rough;
            let mut rest_n = tot_n;
            let mut rest_depth = tot_depth;
            let mut rest_alpha = tot_alpha;
            for c in &contribs {
                let gi = c.gi as usize;
                let p = &ctx.projected[gi];
                let g = &cloud[gi];
                let w = c.a * c.t;
                rest_cd = rest_cd - g.c_diff * w;
                rest_f0 = rest_f0 - g.f0 * w;
                rest_rough -= p.roughness * w;
                rest_n -= p.normal * w;
                rest_depth -= p.range * w;
                rest_alpha -= w;
                // direct attribute gradients
                out[gi][P_CDIFF] += g_cd.r * w;
                out[gi][P_CDIFF + 1] += g_cd.g * w;
                out[gi][P_CDIFF + 2] += g_cd.b * w;
                out[gi][P_F0] += g_f0.r * w;
                out[gi][P_F0 + 1] += g_f0.g * w;
                out[gi][P_F0 + 2] += g_f0.b * w;
                let drough_dlogit = p.roughness * (1.0 - p.roughness);
                out[gi][P_ROUGH] += g_rough * w * drough_dlogit;
                d_normal[gi] += g_n * w;
                d_range[gi] += g_depth * w;
                // d loss / d a_k via the compositing weights
                let da = g_cd.dot(g.c_diff) * c.t - g_cd.dot(rest_cd) / (1.0 - c.a)
                    + g_f0.dot(g.f0) * c.t
                    - g_f0.dot(rest_f0) / (1.0 - c.a)
                    + g_rough * (p.roughness * c.t - rest_rough / (1.0 - c.a))
                    + g_n.dot(&(p.normal * c.t - rest_n / (1.0 - c.a)))
                    + g_depth * (p.range * c.t - rest_depth / (1.0 - c.a))
                    + g_alpha * (c.t - rest_alpha / (1.0 - c.a));
                // a = min(opacity * gprime, cap)
                if c.a < ALPHA_CAP {
                    d_opacity[gi] += da * c.gprime;
                    let d_gprime = da * p.opacity;
                    // gprime = exp(-0.5 d^T M d)
                    let md = p.inv_cov * c.d;
                    let d_power = -d_gprime * c.gprime;
                    d_mean2d[gi] += -(md * d_power); // d(d)/d(mean) = -I
                    d_invcov[gi] += (c.d * c.d.transpose()) * (0.5 * d_power);
                }
            }
        }
    }

    // geometric chain per Gaussian
    for gi in 0..cloud.len() {
        let p = &ctx.projected[gi];
        if !p.visible {
            continue;
        }
        let g = &cloud[gi];
        let cam = view.world_to_cam(g.pos);
        let mut d_cam = Vec3::zeros();

        // opacity logit
        out[gi][P_OPACITY] += d_opacity[gi] * p.opacity * (1.0 - p.opacity);

        // inv_cov -> cov2d
        let g_m = 0.5 * (d_invcov[gi] + d_invcov[gi].transpose());
        let d_cov2 = -(p.inv_cov * g_m * p.inv_cov);

        // cov2d = A cov3 A^T + dilation; A = J W
        let j = proj_jacobian(view, cam);
        let a = j * view.rot;
        let cov3 = g.covariance();
        let d_cov3 = a.transpose() * d_cov2 * a;
        let d_a = (d_cov2 + d_cov2.transpose()) * a * cov3;
        let d_j = d_a * view.rot.transpose();
        // J depends on cam
        let z2 = cam.z * cam.z;
        let z3 = z2 * cam.z;
        d_cam.x += d_j[(0, 2)] * (-view.fx / z2);
        d_cam.y += d_j[(1, 2)] * (-view.fy / z2);
        d_cam.z += d_j[(0, 0)] * (-view.fx / z2)
            + d_j[(1, 1)] * (-view.fy / z2)
            + d_j[(0, 2)] * (2.0 * view.fx * cam.x / z3)
            + d_j[(1, 2)] * (2.0 * view.fy * cam.y / z3);

        // mean2d projection
        let dm = d_mean2d[gi];
        d_cam.x += dm.x * view.fx / cam.z;
        d_cam.y += dm.y * view.fy / cam.z;
        d_cam.z += -dm.x * view.fx * cam.x / z2 - dm.y * view.fy * cam.y / z2;

        // depth channel: range = |cam|
        if p.range > 0.0 {
            d_cam += cam * (d_range[gi] / p.range);
        }

        // position
        let d_pos = view.rot.transpose() * d_cam;
        out[gi][P_POS] += d_pos.x;
        out[gi][P_POS + 1] += d_pos.y;
        out[gi][P_POS + 2] += d_pos.z;

        // cov3 = R S^2 R^T -> rotation and log-scale
        let rot = g.rotation();
        let s = g.scale();
        let d_cov3_sym = 0.5 * (d_cov3 + d_cov3.transpose());
        let s2 = Mat3::from_diagonal(&Vec3::new(s.x * s.x, s.y * s.y, s.z * s.z));
        let mut d_rot = 2.0 * d_cov3_sym * rot * s2;
        let inner = rot.transpose() * d_cov3_sym * rot;
        for axis in 0..3 {
            out[gi][P_LOG_SCALE + axis] += inner[(axis, axis)] * 2.0 * s[axis] * s[axis];
        }

        // normal channel: n = flip * R e_min
        let dn = d_normal[gi] * p.flip;
        for row in 0..3 {
            d_rot[(row, p.min_axis)] += dn[row];
        }

        // rotation -> quaternion (through normalization)
        let qn = g.quat.norm();
        let qhat = g.quat / qn;
        let mut d_qhat = Vec4::zeros();
        for axis in 0..4 {
            d_qhat[axis] = quat_to_mat_grad(qhat, axis).component_mul(&d_rot).sum();
        }
        let d_q = (d_qhat - qhat * qhat.dot(&d_qhat)) / qn;
        for axis in 0..4 {
            out[gi][P_QUAT + axis] += d_q[axis];
        }
    }
    out
}

/// Accumulated statistics steering densification.
#[derive(Clone, Debug, Default)]
pub struct DensifyStats {
    /// Sum of positional gradient norms per Gaussian.
    pub grad_norm_sum: Vec<f64>,
    /// Number of accumulation events per Gaussian.
    pub count: Vec<u32>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        DensifyStats { grad_norm_sum: vec![0.0; n], count: vec![0; n] }
    }

    pub fn accumulate(&mut self, grads: &[[f64; G_PARAMS]]) {
        for (i, g) in grads.iter().enumerate() {
            let n = (g[P_POS] * g[P_POS] + g[P_POS + 1] * g[P_POS + 1] + g[P_POS + 2] * g[P_POS + 2])
                .sqrt();
            self.grad_norm_sum[i] += n;
            self.count[i] += 1;
        }
    }
}

/// Outcome of one densify/prune event.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Clone small / split large Gaussians whose mean positional gradient
/// exceeds `grad_threshold`, then prune those with opacity below
/// `min_opacity`. Split children sample their positions inside the parent
/// and shrink its scale by 1.6.
pub fn densify_and_prune(
    cloud: &mut Vec<Gaussian>,
    stats: &DensifyStats,
    grad_threshold: f64,
    split_scale_threshold: f64,
    min_opacity: f64,
    rng: &mut impl rand::Rng,
) -> DensifyReport {
    let mut report = DensifyReport::default();
    let n = cloud.len();
    let mut next: Vec<Gaussian> = Vec::with_capacity(n * 2);
    for i in 0..n {
        let g = cloud[i].clone();
        if g.opacity() < min_opacity {
            report.pruned += 1;
            continue;
        }
        let mean_grad = if stats.count.get(i).copied().unwrap_or(0) > 0 {
            stats.grad_norm_sum[i] / stats.count[i] as f64
        } else {
            0.0
        };
        if mean_grad <= grad_threshold {
            next.push(g);
            continue;
        }
        let max_scale = g.scale().max();
        if max_scale > split_scale_threshold {
            // split: two children sampled inside the parent, scales / 1.6
            report.split += 1;
            let rot = g.rotation();
            let s = g.scale();
            for _ in 0..2 {
                let local = Vec3::new(
                    gauss_sample(rng) * s.x,
                    gauss_sample(rng) * s.y,
                    gauss_sample(rng) * s.z,
                );
                let mut child = g.clone();
                child.pos = g.pos + rot * local;
                child.log_scale = g.log_scale.map(|l| l - 1.6f64.ln());
                next.push(child);
            }
        } else {
            // clone in place
            report.cloned += 1;
            next.push(g.clone());
            next.push(g);
        }
    }
    *cloud = next;
    report
}

fn gauss_sample(rng: &mut impl rand::Rng) -> f64 {
    // Box-Muller; only one of the pair is used for simplicity
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Write the cloud as a plain text table: one row per Gaussian with
/// position, scale, quaternion (x y z w), opacity logit, diffuse color,
/// F0, roughness logit.
pub fn save_cloud(cloud: &[Gaussian], path: &Path) -> Result<(), SpecError> {
    let f = std::fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    writeln!(w, "# specsplat cloud v1 {}", cloud.len())?;
    for g in cloud {
        let s = g.scale();
        writeln!(
            w,
            "{:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e}",
            g.pos.x,
            g.pos.y,
            g.pos.z,
            s.x,
            s.y,
            s.z,
            g.quat.x,
            g.quat.y,
            g.quat.z,
            g.quat.w,
            g.opacity_logit,
            g.c_diff.r,
            g.c_diff.g,
            g.c_diff.b,
            g.f0.r,
            g.f0.g,
            g.f0.b,
            g.rough_logit
        )?;
    }
    Ok(())
}

pub fn load_cloud(path: &Path) -> Result<Vec<Gaussian>, SpecError> {
    let f = std::fs::File::open(path)?;
    let rd = std::io::BufReader::new(f);
    let mut cloud = Vec::new();
    for (ln, line) in rd.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| SpecError::Format(format!("{}:{}: bad number", path.display(), ln + 1)))
            })
            .collect::<std::result::Result<_, _>>()?;
        if vals.len() != G_PARAMS {
            return Err(SpecError::Format(format!(
                "{}:{}: expected {} fields, found {}",
                path.display(),
                ln + 1,
                G_PARAMS,
                vals.len()
            )));
        }
        for (i, v) in vals[3..6].iter().enumerate() {
            if *v <= 0.0 {
                return Err(SpecError::Format(format!(
                    "{}:{}: scale component {} must be positive",
                    path.display(),
                    ln + 1,
                    i
                )));
            }
        }
        cloud.push(Gaussian {
            pos: Vec3::new(vals[0], vals[1], vals[2]),
            log_scale: Vec3::new(vals[3].ln(), vals[4].ln(), vals[5].ln()),
            quat: Vec4::new(vals[6], vals[7], vals[8], vals[9]),
            opacity_logit: vals[10],
            c_diff: Rgb::new(vals[11], vals[12], vals[13]),
            f0: Rgb::new(vals[14], vals[15], vals[16]),
            rough_logit: vals[17],
        });
    }
    Ok(cloud)
}
