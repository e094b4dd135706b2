//! Indirect specular light field: a fixed bank of anisotropic spherical
//! Gaussian lobes over the upper hemisphere, evaluated in the tangent
//! frame of the shading normal, with per-point radiometric parameters
//! (amplitude and two sharpness values per lobe) predicted by a small
//! fully connected network.
//!
//! The network input is a multi-frequency positional encoding of the
//! surface point, a roughness-attenuated spherical-harmonic encoding of
//! the reflection direction, the raw roughness, and the residual specular
//! color. All gradients here are hand-derived reverse mode; finite
//! difference tests pin them down.

use crate::math::{rotation_z_to, softplus, Mat3, Rgb, Vec3};
use crate::SpecError;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

/// Fixed lobe count: 1 zenith + 4 rings x 8 azimuths.
pub const N_LOBES: usize = 33;
/// Positional encoding frequencies.
pub const PE_FREQS: usize = 6;
/// Directional encoding frequency count; bands are 1, 2, 4, 8.
pub const IDE_FREQS: usize = 4;
/// PE feature length: sin/cos per frequency per coordinate plus raw point.
pub const PE_DIM: usize = 3 * 2 * PE_FREQS + 3;
/// IDE feature length: sum of (2l + 1) over bands {1, 2, 4, 8}.
pub const IDE_DIM: usize = 3 + 5 + 9 + 17;
/// Full predictor input: PE ++ IDE ++ roughness ++ residual color.
pub const NET_IN_DIM: usize = PE_DIM + IDE_DIM + 1 + 3;
/// Predictor output: five raw values per lobe (rgb amplitude, lambda, mu).
pub const NET_OUT_DIM: usize = N_LOBES * 5;
/// Sharpness cap applied after softplus.
pub const SHARPNESS_MAX: f64 = 50.0;

/// Orthonormal right-handed geometric frame of one lobe, in tangent space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LobeFrame {
    /// Lobe center direction.
    pub omega: Vec3,
    /// First anisotropy axis (sharpness `lambda`).
    pub axis_lambda: Vec3,
    /// Second anisotropy axis (sharpness `mu`).
    pub axis_mu: Vec3,
}

/// Radiometric parameters of one lobe.
#[derive(Clone, Copy, Debug, Default)]
pub struct AsgLobe {
    pub amplitude: Rgb,
    pub lambda: f64,
    pub mu: f64,
}

/// Gradient of a scalar loss with respect to one lobe's parameters.
#[derive(Clone, Copy, Debug, Default)]
pub struct AsgLobeGrad {
    pub d_amplitude: Rgb,
    pub d_lambda: f64,
    pub d_mu: f64,
}

/// The fixed hemispherical lobe layout: one zenith lobe plus four rings
/// at polar angles `l * pi / 8` with eight azimuths each. Deterministic;
/// two calls produce bit-identical banks.
pub fn build_lobe_bank() -> Vec<LobeFrame> {
    let mut frames = Vec::with_capacity(N_LOBES);
    frames.push(make_frame(Vec3::z()));
    for ring in 1..=4usize {
        let theta = ring as f64 * std::f64::consts::PI / 8.0;
        let (st, ct) = theta.sin_cos();
        for k in 0..8usize {
            let phi = 2.0 * std::f64::consts::PI * k as f64 / 8.0;
            let (sp, cp) = phi.sin_cos();
            frames.push(make_frame(Vec3::new(st * cp, st * sp, ct)));
        }
    }
    frames
}

fn make_frame(omega: Vec3) -> LobeFrame {
    let zc = Vec3::z().cross(&omega);
    let axis_lambda = if zc.norm() < 1e-9 { Vec3::x() } else { zc.normalize() };
    let axis_mu = omega.cross(&axis_lambda);
    LobeFrame { omega, axis_lambda, axis_mu }
}

/// Sum of hemisphere-clamped anisotropic Gaussian lobes at direction `w`
/// (tangent space, unit length):
/// `sum_j a_j max(0, w·ω_j) exp(-λ_j (w·ω_j^λ)² - μ_j (w·ω_j^μ)²)`.
pub fn asg_eval(frames: &[LobeFrame], params: &[AsgLobe], w: Vec3) -> Rgb {
    debug_assert_eq!(frames.len(), params.len());
    let mut acc = Rgb::BLACK;
    for (f, p) in frames.iter().zip(params) {
        let c = w.dot(&f.omega);
        if c <= 0.0 {
            continue;
        }
        let ql = w.dot(&f.axis_lambda);
        let qm = w.dot(&f.axis_mu);
        let e = (-p.lambda * ql * ql - p.mu * qm * qm).exp();
        acc += p.amplitude * (c * e);
    }
    acc
}

/// Reverse-mode gradients of [`asg_eval`] with respect to the lobe
/// parameters and the query direction.
pub fn asg_eval_backward(
    frames: &[LobeFrame],
    params: &[AsgLobe],
    w: Vec3,
    upstream: Rgb,
) -> (Vec<AsgLobeGrad>, Vec3) {
    let mut grads = vec![AsgLobeGrad::default(); params.len()];
    let mut d_w = Vec3::zeros();
    for ((f, p), g) in frames.iter().zip(params).zip(grads.iter_mut()) {
        let c = w.dot(&f.omega);
        if c <= 0.0 {
            continue;
        }
        let ql = w.dot(&f.axis_lambda);
        let qm = w.dot(&f.axis_mu);
        let e = (-p.lambda * ql * ql - p.mu * qm * qm).exp();
        let ce = c * e;
        g.d_amplitude = upstream * ce;
        // scalar pairing of amplitude with the upstream color
        let s = p.amplitude.dot(upstream);
        g.d_lambda = -ql * ql * ce * s;
        g.d_mu = -qm * qm * ce * s;
        let d_c = e * s;
        let d_e = c * s;
        d_w += f.omega * d_c
            + (f.axis_lambda * (-2.0 * p.lambda * ql) + f.axis_mu * (-2.0 * p.mu * qm)) * (d_e * e);
    }
    (grads, d_w)
}

/// Express the world vector `w` in the tangent frame whose z axis is the
/// unit normal `n` (minimal rotation convention).
pub fn world_to_tangent(n: Vec3, w: Vec3) -> Vec3 {
    rotation_z_to(n).transpose() * w
}

/// [`world_to_tangent`] plus Jacobians with respect to `n` and `w`.
///
/// Returns `(t, dt/dn, dt/dw)`. Near `n = -z` the rotation is a fixed
/// fallback and the normal Jacobian is zero.
pub fn world_to_tangent_with_jacobian(n: Vec3, w: Vec3) -> (Vec3, Mat3, Mat3) {
    let rot = rotation_z_to(n);
    let t = rot.transpose() * w;
    if n.z < -0.999_999 {
        return (t, Mat3::zeros(), rot.transpose());
    }
    // Differentiate the rotation entries directly:
    //   t_x = (1 - n_x² k) w_x - n_x n_y k w_y - n_x w_z
    //   t_y = -n_x n_y k w_x + (1 - n_y² k) w_y - n_y w_z
    //   t_z = n · w
    // with k = 1/(1 + n_z), dk/dn_z = -k².
    let k = 1.0 / (1.0 + n.z);
    let k2 = k * k;
    let d_n = Mat3::new(
        // row t_x: d/dn_x, d/dn_y, d/dn_z
        -2.0 * n.x * k * w.x - n.y * k * w.y - w.z,
        -n.x * k * w.y,
        (n.x * n.x * w.x + n.x * n.y * w.y) * k2,
        // row t_y
        -n.y * k * w.x,
        -n.x * k * w.x - 2.0 * n.y * k * w.y - w.z,
        (n.x * n.y * w.x + n.y * n.y * w.y) * k2,
        // row t_z
        w.x,
        w.y,
        w.z,
    );
    (t, d_n, rot.transpose())
}

/// Multi-frequency positional encoding:
/// `[sin(2^k π p), cos(2^k π p)]` for `k = 0..5` per coordinate, followed
/// by the raw point (39 features).
pub fn positional_encoding(p: Vec3) -> Vec<f64> {
    let mut out = Vec::with_capacity(PE_DIM);
    for axis in 0..3 {
        for k in 0..PE_FREQS {
            let arg = (1u32 << k) as f64 * std::f64::consts::PI * p[axis];
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
    out.extend_from_slice(&[p.x, p.y, p.z]);
    out
}

/// [`positional_encoding`] plus, per feature, the axis it depends on and
/// the partial derivative along that axis.
pub fn positional_encoding_with_grad(p: Vec3) -> (Vec<f64>, Vec<(usize, f64)>) {
    let mut out = Vec::with_capacity(PE_DIM);
    let mut grad = Vec::with_capacity(PE_DIM);
    for axis in 0..3 {
        for k in 0..PE_FREQS {
            let scale = (1u32 << k) as f64 * std::f64::consts::PI;
            let arg = scale * p[axis];
            let (s, c) = arg.sin_cos();
            out.push(s);
            grad.push((axis, scale * c));
            out.push(c);
            grad.push((axis, -scale * s));
        }
    }
    for axis in 0..3 {
        out.push(p[axis]);
        grad.push((axis, 1.0));
    }
    (out, grad)
}

/// Scalar with first-order partials in three inputs; drives the
/// polynomial spherical-harmonic recurrences below so direction
/// derivatives come out exactly.
#[derive(Clone, Copy, Debug)]
struct Dual3 {
    v: f64,
    d: [f64; 3],
}

impl Dual3 {
    fn c(v: f64) -> Self {
        Dual3 { v, d: [0.0; 3] }
    }
    fn var(v: f64, axis: usize) -> Self {
        let mut d = [0.0; 3];
        d[axis] = 1.0;
        Dual3 { v, d }
    }
    fn add(self, o: Dual3) -> Dual3 {
        Dual3 {
            v: self.v + o.v,
            d: [self.d[0] + o.d[0], self.d[1] + o.d[1], self.d[2] + o.d[2]],
        }
    }
    fn sub(self, o: Dual3) -> Dual3 {
        Dual3 {
            v: self.v - o.v,
            d: [self.d[0] - o.d[0], self.d[1] - o.d[1], self.d[2] - o.d[2]],
        }
    }
    fn mul(self, o: Dual3) -> Dual3 {
        Dual3 {
            v: self.v * o.v,
            d: [
                self.d[0] * o.v + self.v * o.d[0],
                self.d[1] * o.v + self.v * o.d[1],
                self.d[2] * o.v + self.v * o.d[2],
            ],
        }
    }
    fn scale(self, s: f64) -> Dual3 {
        Dual3 { v: self.v * s, d: [self.d[0] * s, self.d[1] * s, self.d[2] * s] }
    }
}

/// Real spherical harmonics of the selected bands, in the order used by
/// the encoding: for each band `l` in {1, 2, 4, 8}: m = 0, then
/// (cos, sin) pairs for m = 1..l. Evaluated as polynomials in (x, y, z).
fn sh_selected_bands(w: Vec3) -> (Vec<f64>, Vec<Vec3>) {
    const MAX_L: usize = 8;
    let x = Dual3::var(w.x, 0);
    let y = Dual3::var(w.y, 1);
    let z = Dual3::var(w.z, 2);

    // A_m = Re((x+iy)^m), B_m = Im((x+iy)^m)
    let mut a = vec![Dual3::c(1.0); MAX_L + 1];
    let mut b = vec![Dual3::c(0.0); MAX_L + 1];
    for m in 1..=MAX_L {
        a[m] = x.mul(a[m - 1]).sub(y.mul(b[m - 1]));
        b[m] = x.mul(b[m - 1]).add(y.mul(a[m - 1]));
    }

    // q[l][m] = P_l^m(z) / sin^m(theta): polynomial in z.
    let mut q = vec![vec![Dual3::c(0.0); MAX_L + 1]; MAX_L + 1];
    q[0][0] = Dual3::c(1.0);
    for m in 1..=MAX_L {
        // (-1)^m (2m-1)!! is constant
        let prev = q[m - 1][m - 1];
        q[m][m] = prev.scale(-((2 * m - 1) as f64));
    }
    for m in 0..MAX_L {
        q[m + 1][m] = z.mul(q[m][m]).scale((2 * m + 1) as f64);
    }
    for m in 0..=MAX_L {
        for l in (m + 2)..=MAX_L {
            let t1 = z.mul(q[l - 1][m]).scale((2 * l - 1) as f64);
            let t2 = q[l - 2][m].scale((l + m - 1) as f64);
            q[l][m] = t1.sub(t2).scale(1.0 / (l - m) as f64);
        }
    }

    let norm = |l: usize, m: usize| -> f64 {
        let mut ratio = 1.0;
        for i in (l - m + 1)..=(l + m) {
            ratio *= i as f64;
        }
        ((2 * l + 1) as f64 / (4.0 * std::f64::consts::PI) / ratio).sqrt()
    };

    let mut vals = Vec::with_capacity(IDE_DIM);
    let mut grads = Vec::with_capacity(IDE_DIM);
    let mut push = |d: Dual3| {
        vals.push(d.v);
        grads.push(Vec3::new(d.d[0], d.d[1], d.d[2]));
    };
    for &l in &[1usize, 2, 4, 8] {
        push(q[l][0].scale(norm(l, 0)));
        for m in 1..=l {
            let k = std::f64::consts::SQRT_2 * norm(l, m);
            push(q[l][m].mul(a[m]).scale(k));
            push(q[l][m].mul(b[m]).scale(k));
        }
    }
    (vals, grads)
}

/// Roughness-attenuated directional encoding: spherical harmonics of the
/// reflection direction at bands {1, 2, 4, 8}, each band scaled by
/// `exp(-σ l (l+1) / 2)` with `σ = r⁴ / 2` (a vMF lobe of concentration
/// `2 / r⁴`). At `r -> 0` the attenuation vanishes.
pub fn integrated_directional_encoding(w: Vec3, r: f64) -> Vec<f64> {
    integrated_directional_encoding_with_grad(w, r).0
}

/// Encoding plus per-feature direction gradient and roughness derivative.
pub fn integrated_directional_encoding_with_grad(
    w: Vec3,
    r: f64,
) -> (Vec<f64>, Vec<Vec3>, Vec<f64>) {
    let rc = r.clamp(1e-3, 1.0);
    let sigma = 0.5 * rc.powi(4);
    let d_sigma_dr = if (1e-3..=1.0).contains(&r) { 2.0 * rc.powi(3) } else { 0.0 };
    let (sh, sh_grad) = sh_selected_bands(w);
    let mut vals = Vec::with_capacity(IDE_DIM);
    let mut dw = Vec::with_capacity(IDE_DIM);
    let mut dr = Vec::with_capacity(IDE_DIM);
    let mut idx = 0;
    for &l in &[1usize, 2, 4, 8] {
        let lam = (l * (l + 1)) as f64 / 2.0;
        let att = (-sigma * lam).exp();
        let d_att_dr = -lam * d_sigma_dr * att;
        for _ in 0..(2 * l + 1) {
            vals.push(sh[idx] * att);
            dw.push(sh_grad[idx] * att);
            dr.push(sh[idx] * d_att_dr);
            idx += 1;
        }
    }
    (vals, dw, dr)
}

/// Assemble the full predictor input vector and remember how to route
/// gradients back to `(p, ω_r, r, C_res)`.
pub struct EncodedInput {
    pub features: Vec<f64>,
    pe_grad: Vec<(usize, f64)>,
    ide_dw: Vec<Vec3>,
    ide_dr: Vec<f64>,
}

impl EncodedInput {
    pub fn new(p: Vec3, w_r: Vec3, r: f64, c_res: Rgb) -> Self {
        let (pe, pe_grad) = positional_encoding_with_grad(p);
        let (ide, ide_dw, ide_dr) = integrated_directional_encoding_with_grad(w_r, r);
        let mut features = Vec::with_capacity(NET_IN_DIM);
        features.extend_from_slice(&pe);
        features.extend_from_slice(&ide);
        features.push(r);
        features.extend_from_slice(&c_res.to_array());
        EncodedInput { features, pe_grad, ide_dw, ide_dr }
    }

    /// Route a gradient on the feature vector back to the raw inputs.
    /// Returns `(d_p, d_w_r, d_r, d_c_res)`.
    pub fn backward(&self, d_features: &[f64]) -> (Vec3, Vec3, f64, Rgb) {
        assert_eq!(d_features.len(), NET_IN_DIM);
        let mut d_p = Vec3::zeros();
        for (i, &(axis, g)) in self.pe_grad.iter().enumerate() {
            d_p[axis] += d_features[i] * g;
        }
        let mut d_w = Vec3::zeros();
        let mut d_r = 0.0;
        for i in 0..IDE_DIM {
            let up = d_features[PE_DIM + i];
            d_w += self.ide_dw[i] * up;
            d_r += self.ide_dr[i] * up;
        }
        d_r += d_features[PE_DIM + IDE_DIM];
        let c0 = PE_DIM + IDE_DIM + 1;
        let d_c = Rgb::new(d_features[c0], d_features[c0 + 1], d_features[c0 + 2]);
        (d_p, d_w, d_r, d_c)
    }
}

/// Fully connected predictor: three ReLU hidden layers of 128 units and a
/// linear output of five raw values per lobe.
#[derive(Clone, Debug)]
pub struct PredictorNet {
    /// (n_in, n_out) per layer.
    shapes: Vec<(usize, usize)>,
    /// (weight offset, bias offset) per layer into `params`.
    offsets: Vec<(usize, usize)>,
    pub params: Vec<f64>,
}

/// Cached activations of one forward pass: the input of every layer.
pub struct NetCache {
    inputs: Vec<Vec<f64>>,
}

impl PredictorNet {
    /// He-uniform init for hidden layers; the output layer starts at zero
    /// so indirect radiance begins as the constant `softplus(0)` amplitude
    /// pattern per lobe.
    pub fn new(seed: u64) -> Self {
        Self::with_dims(NET_IN_DIM, &[128, 128, 128], NET_OUT_DIM, seed)
    }

    pub fn with_dims(n_in: usize, hidden: &[usize], n_out: usize, seed: u64) -> Self {
        let mut shapes = Vec::new();
        let mut prev = n_in;
        for &h in hidden {
            shapes.push((prev, h));
            prev = h;
        }
        shapes.push((prev, n_out));
        let mut offsets = Vec::new();
        let mut total = 0;
        for &(i, o) in &shapes {
            offsets.push((total, total + i * o));
            total += i * o + o;
        }
        let mut params = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = shapes.len() - 1;
        for (li, &(i, o)) in shapes.iter().enumerate() {
            if li == last {
                continue; // zero-initialized output layer
            }
            let bound = (6.0 / i as f64).sqrt();
            let (w_off, _) = offsets[li];
            for w in params[w_off..w_off + i * o].iter_mut() {
                *w = (rng.gen::<f64>() * 2.0 - 1.0) * bound;
            }
        }
        PredictorNet { shapes, offsets, params }
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn layer_count(&self) -> usize {
        self.shapes.len()
    }

    /// Deterministic forward pass; returns the raw outputs and the cache
    /// needed for the backward pass.
    pub fn forward(&self, input: &[f64]) -> (Vec<f64>, NetCache) {
        assert_eq!(input.len(), self.shapes[0].0);
        let mut inputs = Vec::with_capacity(self.shapes.len());
        let mut x = input.to_vec();
        let last = self.shapes.len() - 1;
        for (li, &(n_in, n_out)) in self.shapes.iter().enumerate() {
            inputs.push(x.clone());
            let (w_off, b_off) = self.offsets[li];
            let mut y = vec![0.0; n_out];
            for o in 0..n_out {
                let row = &self.params[w_off + o * n_in..w_off + (o + 1) * n_in];
                let mut acc = self.params[b_off + o];
                for (wi, xi) in row.iter().zip(&x) {
                    acc += wi * xi;
                }
                y[o] = if li < last { acc.max(0.0) } else { acc };
            }
            x = y;
        }
        (x, NetCache { inputs })
    }

    /// Reverse-mode pass. Accumulates parameter gradients into `grads`
    /// (same layout as `params`) and returns the input gradient.
    pub fn backward(&self, cache: &NetCache, d_out: &[f64], grads: &mut [f64]) -> Vec<f64> {
        assert_eq!(grads.len(), self.params.len());
        let last = self.shapes.len() - 1;
        let mut delta = d_out.to_vec();
        for li in (0..self.shapes.len()).rev() {
            let (n_in, n_out) = self.shapes[li];
            let (w_off, b_off) = self.offsets[li];
            let x = &cache.inputs[li];
            // ReLU mask of this layer's own output (hidden layers only):
            // recompute the activation sign from x of the NEXT layer.
            if li < last {
                let next_in = &cache.inputs[li + 1];
                for (d, &a) in delta.iter_mut().zip(next_in) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let mut d_in = vec![0.0; n_in];
            for o in 0..n_out {
                let g = delta[o];
                if g == 0.0 {
                    continue;
                }
                grads[b_off + o] += g;
                let row = &self.params[w_off + o * n_in..w_off + (o + 1) * n_in];
                let grow = &mut grads[w_off + o * n_in..w_off + (o + 1) * n_in];
                for i in 0..n_in {
                    grow[i] += g * x[i];
                    d_in[i] += g * row[i];
                }
            }
            delta = d_in;
        }
        delta
    }

    /// Flat float32 checkpoint with a layer-shape header.
    pub fn save(&self, path: &Path) -> Result<(), SpecError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(b"MLPC")?;
        f.write_all(&(self.shapes.len() as u32).to_le_bytes())?;
        for &(i, o) in &self.shapes {
            f.write_all(&(i as u32).to_le_bytes())?;
            f.write_all(&(o as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.params.len() * 4);
        for &p in &self.params {
            buf.extend_from_slice(&(p as f32).to_le_bytes());
        }
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SpecError> {
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != b"MLPC" {
            return Err(SpecError::Format(format!("{}: bad magic", path.display())));
        }
        let mut u = [0u8; 4];
        f.read_exact(&mut u)?;
        let n_layers = u32::from_le_bytes(u) as usize;
        let mut shapes = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            f.read_exact(&mut u)?;
            let i = u32::from_le_bytes(u) as usize;
            f.read_exact(&mut u)?;
            let o = u32::from_le_bytes(u) as usize;
            shapes.push((i, o));
        }
        let mut offsets = Vec::new();
        let mut total = 0;
        for &(i, o) in &shapes {
            offsets.push((total, total + i * o));
            total += i * o + o;
        }
        let mut raw = Vec::new();
        f.read_to_end(&mut raw)?;
        if raw.len() != total * 4 {
            return Err(SpecError::Format(format!(
                "{}: expected {} weights, found {} bytes",
                path.display(),
                total,
                raw.len()
            )));
        }
        let params = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(PredictorNet { shapes, offsets, params })
    }
}

/// Map raw network outputs to lobe parameters: amplitudes through
/// softplus, sharpness through softplus capped at [`SHARPNESS_MAX`].
pub fn activate_params(raw: &[f64]) -> Vec<AsgLobe> {
    assert_eq!(raw.len(), NET_OUT_DIM);
    let mut out = Vec::with_capacity(N_LOBES);
    for j in 0..N_LOBES {
        let o = &raw[5 * j..5 * j + 5];
        out.push(AsgLobe {
            amplitude: Rgb::new(softplus(o[0]), softplus(o[1]), softplus(o[2])),
            lambda: softplus(o[3]).min(SHARPNESS_MAX),
            mu: softplus(o[4]).min(SHARPNESS_MAX),
        });
    }
    out
}

/// Adjoint of [`activate_params`].
pub fn activate_params_backward(raw: &[f64], d_lobes: &[AsgLobeGrad]) -> Vec<f64> {
    assert_eq!(raw.len(), NET_OUT_DIM);
    assert_eq!(d_lobes.len(), N_LOBES);
    let dsp = crate::math::sigmoid; // d softplus / dx
    let mut d_raw = vec![0.0; NET_OUT_DIM];
    for j in 0..N_LOBES {
        let o = &raw[5 * j..5 * j + 5];
        let g = &d_lobes[j];
        d_raw[5 * j] = g.d_amplitude.r * dsp(o[0]);
        d_raw[5 * j + 1] = g.d_amplitude.g * dsp(o[1]);
        d_raw[5 * j + 2] = g.d_amplitude.b * dsp(o[2]);
        d_raw[5 * j + 3] = if softplus(o[3]) < SHARPNESS_MAX { g.d_lambda * dsp(o[3]) } else { 0.0 };
        d_raw[5 * j + 4] = if softplus(o[4]) < SHARPNESS_MAX { g.d_mu * dsp(o[4]) } else { 0.0 };
    }
    d_raw
}

/// Convenience wrapper: encode inputs, run the net, apply activations.
pub fn predict_lobe_params(
    net: &PredictorNet,
    p: Vec3,
    w_r: Vec3,
    r: f64,
    c_res: Rgb,
) -> Vec<AsgLobe> {
    let enc = EncodedInput::new(p, w_r, r, c_res);
    let (raw, _) = net.forward(&enc.features);
    activate_params(&raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn lobe_bank_layout() {
        let bank = build_lobe_bank();
        assert_eq!(bank.len(), N_LOBES);
        assert_eq!(bank.len(), 1 + 4 * 8);
        // zenith lobe
        assert_relative_eq!((bank[0].omega - Vec3::z()).norm(), 0.0, epsilon = 1e-15);
        for f in &bank {
            assert!(f.omega.z >= -1e-12, "lobe below hemisphere: {:?}", f.omega);
            assert!(f.omega.dot(&f.axis_lambda).abs() < 1e-6);
            assert!(f.omega.dot(&f.axis_mu).abs() < 1e-6);
            assert!(f.axis_lambda.dot(&f.axis_mu).abs() < 1e-6);
            assert_relative_eq!(f.omega.norm(), 1.0, epsilon = 1e-12);
            assert_relative_eq!(f.axis_lambda.norm(), 1.0, epsilon = 1e-12);
            assert_relative_eq!(f.axis_mu.norm(), 1.0, epsilon = 1e-12);
        }
        // deterministic constant
        let again = build_lobe_bank();
        for (a, b) in bank.iter().zip(&again) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn asg_single_lobe_peak() {
        let bank = build_lobe_bank();
        let mut params = vec![AsgLobe::default(); N_LOBES];
        params[0] = AsgLobe { amplitude: Rgb::splat(2.5), lambda: 8.0, mu: 3.0 };
        // at the lobe center both anisotropy dots vanish and the clamp is 1
        let v = asg_eval(&bank, &params, bank[0].omega);
        assert_relative_eq!(v.r, 2.5, epsilon = 1e-12);
    }

    #[test]
    fn asg_hemisphere_clamp() {
        let bank = build_lobe_bank();
        let params = vec![AsgLobe { amplitude: Rgb::WHITE, lambda: 1.0, mu: 1.0 }; N_LOBES];
        // straight down: every lobe has w·ω_j <= 0
        let v = asg_eval(&bank, &params, -Vec3::z());
        assert_eq!(v, Rgb::BLACK);
    }

    #[test]
    fn asg_hand_computed_value() {
        // zenith lobe, a = 1, lambda = 2, mu = 0, w at 45 degrees in xz:
        // w·ω = cos45, w·axis_lambda = sin45 -> cos45 * exp(-2 * 0.5)
        let bank = build_lobe_bank();
        let mut params = vec![AsgLobe::default(); N_LOBES];
        params[0] = AsgLobe { amplitude: Rgb::WHITE, lambda: 2.0, mu: 0.0 };
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let v = asg_eval(&bank, &params, Vec3::new(s, 0.0, s));
        let expect = s * (-1.0f64).exp();
        assert_relative_eq!(v.r, expect, epsilon = 1e-12);
        assert!((v.r - 0.2602).abs() < 5e-4);
    }

    #[test]
    fn asg_nonnegative_and_continuous_at_clamp() {
        let bank = build_lobe_bank();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params: Vec<AsgLobe> = (0..N_LOBES)
            .map(|_| AsgLobe {
                amplitude: Rgb::new(rng.gen(), rng.gen(), rng.gen()),
                lambda: rng.gen::<f64>() * 10.0,
                mu: rng.gen::<f64>() * 10.0,
            })
            .collect();
        for _ in 0..500 {
            let v = Vec3::new(
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 2.0 - 1.0,
            );
            if v.norm() < 1e-6 {
                continue;
            }
            let out = asg_eval(&bank, &params, v.normalize());
            assert!(out.r >= 0.0 && out.g >= 0.0 && out.b >= 0.0);
        }
        // continuity across a single lobe's clamp boundary: value tends to 0
        let mut single = vec![AsgLobe::default(); N_LOBES];
        single[5] = AsgLobe { amplitude: Rgb::WHITE, lambda: 0.7, mu: 0.3 };
        let omega = bank[5].omega;
        // direction orthogonal to the lobe center: on the clamp boundary
        let t = bank[5].axis_lambda;
        for eps in [1e-3, 1e-5, 1e-7] {
            let w = (t + omega * eps).normalize();
            let inside = asg_eval(&bank, &single, w).r;
            assert!(inside < 2.0 * eps + 1e-9, "not continuous: {inside} at eps {eps}");
            let w = (t - omega * eps).normalize();
            assert_eq!(asg_eval(&bank, &single, w).r, 0.0);
        }
    }

    #[test]
    fn asg_sharpness_strictly_decreases() {
        let bank = build_lobe_bank();
        let w = Vec3::new(0.4, 0.2, 0.89).normalize();
        let mut params = vec![AsgLobe::default(); N_LOBES];
        let mut prev = f64::INFINITY;
        for lam in [0.0, 1.0, 4.0, 16.0] {
            params[0] = AsgLobe { amplitude: Rgb::WHITE, lambda: lam, mu: 0.0 };
            let v = asg_eval(&bank, &params, w).r;
            assert!(v < prev, "lambda {lam} did not decrease the response");
            prev = v;
        }
    }

    #[test]
    fn asg_backward_matches_fd() {
        let bank = build_lobe_bank();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let params: Vec<AsgLobe> = (0..N_LOBES)
            .map(|_| AsgLobe {
                amplitude: Rgb::new(rng.gen(), rng.gen(), rng.gen()),
                lambda: rng.gen::<f64>() * 5.0,
                mu: rng.gen::<f64>() * 5.0,
            })
            .collect();
        let w = Vec3::new(0.3, -0.2, 0.93).normalize();
        let up = Rgb::new(0.7, 1.3, -0.4);
        let (grads, d_w) = asg_eval_backward(&bank, &params, w, up);
        let loss = |ps: &[AsgLobe], w: Vec3| asg_eval(&bank, ps, w).dot(up);
        let h = 1e-6;
        // a few parameter checks
        for j in [0usize, 3, 17, 32] {
            let mut pp = params.clone();
            pp[j].lambda += h;
            let mut pm = params.clone();
            pm[j].lambda -= h;
            let fd = (loss(&pp, w) - loss(&pm, w)) / (2.0 * h);
            assert_relative_eq!(fd, grads[j].d_lambda, epsilon = 1e-6, max_relative = 1e-5);
            let mut pp = params.clone();
            pp[j].amplitude.g += h;
            let fd = (loss(&pp, w) - loss(&params, w)) / h;
            assert_relative_eq!(fd, grads[j].d_amplitude.g, epsilon = 1e-5, max_relative = 1e-4);
        }
        // direction gradient (unconstrained perturbation)
        for axis in 0..3 {
            let mut wp = w;
            wp[axis] += h;
            let mut wm = w;
            wm[axis] -= h;
            let fd = (loss(&params, wp) - loss(&params, wm)) / (2.0 * h);
            assert_relative_eq!(fd, d_w[axis], epsilon = 1e-6, max_relative = 1e-5);
        }
    }

    #[test]
    fn world_to_tangent_jacobians_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let h = 1e-6;
        for _ in 0..100 {
            let n = Vec3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() * 0.8 + 0.1,
            )
            .normalize();
            let w = Vec3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            );
            let (t0, d_n, d_w) = world_to_tangent_with_jacobian(n, w);
            assert_relative_eq!((t0 - world_to_tangent(n, w)).norm(), 0.0, epsilon = 1e-12);
            for axis in 0..3 {
                let mut np = n;
                np[axis] += h;
                let mut nm = n;
                nm[axis] -= h;
                let fd = (world_to_tangent(np, w) - world_to_tangent(nm, w)) / (2.0 * h);
                let an = d_n.column(axis);
                assert!((fd - an).norm() < 1e-5 * (1.0 + fd.norm()), "d/dn axis {axis}");
                let mut wp = w;
                wp[axis] += h;
                let mut wm = w;
                wm[axis] -= h;
                let fd = (world_to_tangent(n, wp) - world_to_tangent(n, wm)) / (2.0 * h);
                let an = d_w.column(axis);
                assert!((fd - an).norm() < 1e-6 * (1.0 + fd.norm()), "d/dw axis {axis}");
            }
        }
    }

    #[test]
    fn pe_basics() {
        let f = positional_encoding(Vec3::zeros());
        assert_eq!(f.len(), PE_DIM);
        assert_eq!(f.len(), 39);
        for i in 0..18 {
            assert_relative_eq!(f[2 * i], 0.0, epsilon = 1e-15); // sin terms
            assert_relative_eq!(f[2 * i + 1], 1.0, epsilon = 1e-15); // cos terms
        }
        // smoothness bound: |d feature / d coord| <= 2^5 π
        let (_, grad) = positional_encoding_with_grad(Vec3::new(0.37, -1.2, 0.05));
        let lip = 32.0 * std::f64::consts::PI;
        for &(_, g) in &grad {
            assert!(g.abs() <= lip + 1e-9);
        }
    }

    #[test]
    fn pe_grad_matches_fd() {
        let p = Vec3::new(0.21, -0.73, 1.45);
        let (_, grad) = positional_encoding_with_grad(p);
        let h = 1e-7;
        for axis in 0..3 {
            let mut pp = p;
            pp[axis] += h;
            let mut pm = p;
            pm[axis] -= h;
            let fp = positional_encoding(pp);
            let fm = positional_encoding(pm);
            for i in 0..PE_DIM {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                let an = if grad[i].0 == axis { grad[i].1 } else { 0.0 };
                assert!(
                    (fd - an).abs() < 1e-5 * (1.0 + an.abs()),
                    "feature {i} axis {axis}: fd {fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn ide_dimensions_and_low_roughness_limit() {
        let w = Vec3::new(0.48, -0.6, 0.64).normalize();
        let f = integrated_directional_encoding(w, 0.0);
        assert_eq!(f.len(), IDE_DIM);
        assert_eq!(f.len(), 34);
        // r -> 0: attenuation -> 1, equals the plain SH values
        let (sh, _) = sh_selected_bands(w);
        for (a, b) in f.iter().zip(&sh) {
            assert_relative_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn ide_high_roughness_kills_high_bands() {
        let w = Vec3::new(0.3, 0.1, 0.95).normalize();
        let (sh, _) = sh_selected_bands(w);
        let f = integrated_directional_encoding(w, 1.0);
        // bands 4 and 8 start at index 3 + 5 = 8
        for i in 8..IDE_DIM {
            if sh[i].abs() > 1e-6 {
                assert!(
                    (f[i] / sh[i]).abs() < 1e-2,
                    "band feature {i} not attenuated: {} vs {}",
                    f[i],
                    sh[i]
                );
            }
        }
    }

    #[test]
    fn ide_band1_is_linear_in_direction() {
        // reconstruct the band-1 linear map from basis vectors, then verify
        // on random directions (rotation equivariance of a linear band).
        let cols = [
            sh_selected_bands(Vec3::x()).0,
            sh_selected_bands(Vec3::y()).0,
            sh_selected_bands(Vec3::z()).0,
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let w = Vec3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            )
            .normalize();
            let f = sh_selected_bands(w).0;
            for i in 0..3 {
                let lin = cols[0][i] * w.x + cols[1][i] * w.y + cols[2][i] * w.z;
                assert_relative_eq!(f[i], lin, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn ide_grads_match_fd() {
        let w = Vec3::new(0.38, -0.51, 0.77).normalize();
        let r = 0.42;
        let (f0, dw, dr) = integrated_directional_encoding_with_grad(w, r);
        let h = 1e-6;
        for axis in 0..3 {
            let mut wp = w;
            wp[axis] += h;
            let mut wm = w;
            wm[axis] -= h;
            let fp = integrated_directional_encoding(wp, r);
            let fm = integrated_directional_encoding(wm, r);
            for i in 0..IDE_DIM {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                assert!((fd - dw[i][axis]).abs() < 1e-4 * (1.0 + fd.abs()), "feat {i} axis {axis}");
            }
        }
        let fp = integrated_directional_encoding(w, r + h);
        let fm = integrated_directional_encoding(w, r - h);
        for i in 0..IDE_DIM {
            let fd = (fp[i] - fm[i]) / (2.0 * h);
            assert!((fd - dr[i]).abs() < 1e-5 * (1.0 + fd.abs()), "feat {i} d/dr");
        }
    }

    #[test]
    fn net_zero_init_output_layer() {
        let net = PredictorNet::new(3);
        let enc = EncodedInput::new(
            Vec3::new(0.2, 0.3, -0.1),
            Vec3::new(0.0, 0.6, 0.8),
            0.4,
            Rgb::splat(0.1),
        );
        let (raw, _) = net.forward(&enc.features);
        assert_eq!(raw.len(), NET_OUT_DIM);
        assert_eq!(raw.len(), 165);
        assert!(raw.iter().all(|&x| x == 0.0));
        let params = activate_params(&raw);
        for p in &params {
            assert_relative_eq!(p.amplitude.r, 2.0f64.ln(), epsilon = 1e-12);
            assert!((p.amplitude.r - 0.6931).abs() < 1e-4);
        }
        // determinism
        let (raw2, _) = net.forward(&enc.features);
        assert_eq!(raw, raw2);
    }

    #[test]
    fn net_backward_matches_fd() {
        let mut net = PredictorNet::with_dims(7, &[16, 16], 5, 11);
        // randomize the output layer too so gradients are informative
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for p in net.params.iter_mut() {
            if *p == 0.0 {
                *p = (rng.gen::<f64>() - 0.5) * 0.2;
            }
        }
        let x: Vec<f64> = (0..7).map(|_| rng.gen::<f64>() - 0.5).collect();
        let up: Vec<f64> = (0..5).map(|_| rng.gen::<f64>() - 0.5).collect();
        let (_, cache) = net.forward(&x);
        let mut grads = vec![0.0; net.n_params()];
        let d_in = net.backward(&cache, &up, &mut grads);
        let loss = |net: &PredictorNet, x: &[f64]| -> f64 {
            let (y, _) = net.forward(x);
            y.iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        let h = 1e-4;
        // 10 random weights
        for _ in 0..10 {
            let i = rng.gen_range(0..net.n_params());
            let mut np = net.clone();
            np.params[i] += h;
            let mut nm = net.clone();
            nm.params[i] -= h;
            let fd = (loss(&np, &x) - loss(&nm, &x)) / (2.0 * h);
            let rel = (fd - grads[i]).abs() / (1e-8 + fd.abs().max(grads[i].abs()));
            if fd.abs() < 1e-12 && grads[i].abs() < 1e-12 {
                continue;
            }
            assert!(rel < 1e-4, "weight {i}: fd {fd} vs {}", grads[i]);
        }
        // input gradient
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * h);
            let rel = (fd - d_in[i]).abs() / (1e-8 + fd.abs().max(d_in[i].abs()));
            assert!(rel < 1e-4, "input {i}: fd {fd} vs {}", d_in[i]);
        }
        // zero upstream -> zero everywhere
        let mut zg = vec![0.0; net.n_params()];
        let dz = net.backward(&cache, &vec![0.0; 5], &mut zg);
        assert!(zg.iter().all(|&g| g == 0.0));
        assert!(dz.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn net_batch_gradient_is_sum_of_samples() {
        let net = PredictorNet::with_dims(4, &[8], 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let xs: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..4).map(|_| rng.gen::<f64>() - 0.5).collect())
            .collect();
        let up = vec![0.3, -0.7, 1.1];
        let mut batch = vec![0.0; net.n_params()];
        for x in &xs {
            let (_, cache) = net.forward(x);
            net.backward(&cache, &up, &mut batch);
        }
        let mut summed = vec![0.0; net.n_params()];
        for x in &xs {
            let (_, cache) = net.forward(x);
            let mut one = vec![0.0; net.n_params()];
            net.backward(&cache, &up, &mut one);
            for (s, o) in summed.iter_mut().zip(&one) {
                *s += o;
            }
        }
        for (a, b) in batch.iter().zip(&summed) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn end_to_end_chain_matches_fd() {
        // d( asg_eval(activate(net(enc))) ) / d(net weights)
        let bank = build_lobe_bank();
        let mut net = PredictorNet::with_dims(NET_IN_DIM, &[32, 32], NET_OUT_DIM, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for p in net.params.iter_mut() {
            if *p == 0.0 {
                *p = (rng.gen::<f64>() - 0.5) * 0.1;
            }
        }
        let enc = EncodedInput::new(
            Vec3::new(0.31, -0.22, 0.54),
            Vec3::new(0.3, 0.42, 0.85).normalize(),
            0.37,
            Rgb::new(0.2, 0.05, 0.6),
        );
        let w_tan = Vec3::new(-0.24, 0.11, 0.96).normalize();
        let up = Rgb::new(1.0, -0.5, 0.25);
        let forward = |net: &PredictorNet| -> f64 {
            let (raw, _) = net.forward(&enc.features);
            asg_eval(&bank, &activate_params(&raw), w_tan).dot(up)
        };
        let (raw, cache) = net.forward(&enc.features);
        let params = activate_params(&raw);
        let (lobe_grads, _) = asg_eval_backward(&bank, &params, w_tan, up);
        let d_raw = activate_params_backward(&raw, &lobe_grads);
        let mut grads = vec![0.0; net.n_params()];
        net.backward(&cache, &d_raw, &mut grads);
        let h = 1e-5;
        let mut checked = 0;
        for _ in 0..300 {
            if checked >= 12 {
                break;
            }
            let i = rng.gen_range(0..net.n_params());
            let mut np = net.clone();
            np.params[i] += h;
            let mut nm = net.clone();
            nm.params[i] -= h;
            let fd = (forward(&np) - forward(&nm)) / (2.0 * h);
            if fd.abs() < 1e-10 && grads[i].abs() < 1e-10 {
                continue;
            }
            let rel = (fd - grads[i]).abs() / (1e-9 + fd.abs().max(grads[i].abs()));
            assert!(rel < 1e-3, "weight {i}: fd {fd} vs analytic {}", grads[i]);
            checked += 1;
        }
        assert!(checked >= 12, "too few informative weights checked: {checked}");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("net.bin");
        let net = PredictorNet::with_dims(6, &[10, 10], 4, 77);
        net.save(&p).unwrap();
        let back = PredictorNet::load(&p).unwrap();
        assert_eq!(back.shapes, net.shapes);
        for (a, b) in net.params.iter().zip(&back.params) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
