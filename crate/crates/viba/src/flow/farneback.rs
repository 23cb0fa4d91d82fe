//! Polynomial-expansion optical flow.
//!
//! Each pixel neighbourhood is approximated by a quadratic
//! `f(x + d) ≈ dᵀA d + bᵀd + c` fitted under a Gaussian applicability
//! window. Between two frames the displacement satisfies `Ā·d = Δb` with
//! `Ā = (A₁ + A₂)/2` and `Δb = −(b₂ − b₁)/2`; the per-pixel equations are
//! averaged over a Gaussian window before solving, and the whole procedure
//! runs coarse-to-fine over an image pyramid with iterative re-warping.

use crate::img::{resize_plane, GrayImage};

use super::{FlowError, FlowField, PyramidConfig};

/// Per-pixel quadratic coefficients, interleaved as
/// `[c, b_x, b_y, a_xx, a_yy, a_xy]`.
#[derive(Debug, Clone)]
pub struct PolyExpansion {
    pub width: usize,
    pub height: usize,
    coeffs: Vec<f32>,
}

impl PolyExpansion {
    fn at(&self, x: usize, y: usize) -> &[f32] {
        &self.coeffs[(y * self.width + x) * 6..][..6]
    }

    /// Constant term of the fit.
    pub fn c(&self, x: usize, y: usize) -> f32 {
        self.at(x, y)[0]
    }

    /// Linear term (b_x, b_y).
    pub fn b(&self, x: usize, y: usize) -> (f32, f32) {
        let r = self.at(x, y);
        (r[1], r[2])
    }

    /// Symmetric quadratic term [[a_xx, a_xy], [a_xy, a_yy]].
    pub fn a(&self, x: usize, y: usize) -> [f32; 3] {
        let r = self.at(x, y);
        [r[3], r[4], r[5]]
    }

    /// Bilinear sample of all six coefficient planes, borders clamped.
    fn sample(&self, x: f32, y: f32) -> [f32; 6] {
        let xc = x.clamp(0.0, (self.width - 1) as f32);
        let yc = y.clamp(0.0, (self.height - 1) as f32);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = xc - x0 as f32;
        let fy = yc - y0 as f32;
        let mut out = [0.0f32; 6];
        let w00 = (1.0 - fx) * (1.0 - fy);
        let w10 = fx * (1.0 - fy);
        let w01 = (1.0 - fx) * fy;
        let w11 = fx * fy;
        let p00 = self.at(x0, y0);
        let p10 = self.at(x1, y0);
        let p01 = self.at(x0, y1);
        let p11 = self.at(x1, y1);
        for k in 0..6 {
            out[k] = w00 * p00[k] + w10 * p10[k] + w01 * p01[k] + w11 * p11[k];
        }
        out
    }
}

/// In-place Gauss-Jordan inverse of a small square matrix.
fn invert(mat: &mut [f64], n: usize) -> Result<Vec<f64>, FlowError> {
    let mut inv = vec![0.0f64; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if mat[row * n + col].abs() > mat[pivot * n + col].abs() {
                pivot = row;
            }
        }
        if mat[pivot * n + col].abs() < 1e-12 {
            return Err(FlowError::Invalid(
                "singular normal-equation matrix in polynomial expansion".into(),
            ));
        }
        for k in 0..n {
            mat.swap(col * n + k, pivot * n + k);
            inv.swap(col * n + k, pivot * n + k);
        }
        let diag = mat[col * n + col];
        for k in 0..n {
            mat[col * n + k] /= diag;
            inv[col * n + k] /= diag;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let factor = mat[row * n + col];
            if factor == 0.0 {
                continue;
            }
            for k in 0..n {
                mat[row * n + k] -= factor * mat[col * n + k];
                inv[row * n + k] -= factor * inv[col * n + k];
            }
        }
    }
    Ok(inv)
}

/// Weighted least-squares fit of a quadratic in every pixel neighbourhood.
///
/// The normal matrix is identical at every pixel (the window and weights are
/// translation invariant; borders replicate samples), so it is inverted once
/// and applied per pixel. A constant window yields A = 0, b = 0, c = value.
pub fn polynomial_expansion(
    image: &GrayImage,
    poly_n: usize,
    poly_sigma: f32,
) -> Result<PolyExpansion, FlowError> {
    if poly_n % 2 == 0 || poly_n < 3 {
        return Err(FlowError::Invalid(format!(
            "poly_n {poly_n} must be odd and >= 3"
        )));
    }
    if poly_sigma <= 0.0 {
        return Err(FlowError::Invalid("poly_sigma must be positive".into()));
    }
    if image.width < poly_n || image.height < poly_n {
        return Err(FlowError::Invalid(format!(
            "image {}x{} smaller than poly_n {poly_n}",
            image.width, image.height
        )));
    }
    let r = (poly_n / 2) as i64;
    // Applicability and basis values over the window, plus the normal matrix.
    let mut weights = Vec::with_capacity(poly_n * poly_n);
    let mut basis = Vec::with_capacity(poly_n * poly_n);
    let mut g = vec![0.0f64; 36];
    for dy in -r..=r {
        for dx in -r..=r {
            let w = (-((dx * dx + dy * dy) as f64) / (2.0 * (poly_sigma as f64).powi(2))).exp();
            let (x, y) = (dx as f64, dy as f64);
            let bb = [1.0, x, y, x * x, y * y, x * y];
            for i in 0..6 {
                for j in 0..6 {
                    g[i * 6 + j] += w * bb[i] * bb[j];
                }
            }
            weights.push(w);
            basis.push(bb);
        }
    }
    let ginv = invert(&mut g, 6)?;

    let (w, h) = (image.width as i64, image.height as i64);
    let mut coeffs = vec![0.0f32; image.width * image.height * 6];
    for py in 0..h {
        for px in 0..w {
            let mut v = [0.0f64; 6];
            let mut idx = 0;
            for dy in -r..=r {
                let sy = (py + dy).clamp(0, h - 1) as usize;
                for dx in -r..=r {
                    let sx = (px + dx).clamp(0, w - 1) as usize;
                    let f = image.data[sy * image.width + sx] as f64 * weights[idx];
                    let bb = &basis[idx];
                    for k in 0..6 {
                        v[k] += f * bb[k];
                    }
                    idx += 1;
                }
            }
            let out = &mut coeffs[((py * w + px) as usize) * 6..][..6];
            for k in 0..6 {
                let mut acc = 0.0f64;
                for j in 0..6 {
                    acc += ginv[k * 6 + j] * v[j];
                }
                out[k] = acc as f32;
            }
            // Reorder from [c, bx, by, axx, ayy, axy] — already that order.
        }
    }
    Ok(PolyExpansion {
        width: image.width,
        height: image.height,
        coeffs,
    })
}

/// Odd-length normalized Gaussian kernel.
fn gaussian_kernel(len: usize, sigma: f64) -> Vec<f32> {
    let r = (len / 2) as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k.into_iter().map(|v| v as f32).collect()
}

/// Separable Gaussian blur with border clamp.
fn blur_plane(data: &[f32], w: usize, h: usize, kernel: &[f32]) -> Vec<f32> {
    let r = (kernel.len() / 2) as i64;
    let mut tmp = vec![0.0f32; w * h];
    for y in 0..h {
        let row = &data[y * w..][..w];
        for x in 0..w as i64 {
            let mut acc = 0.0f32;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sx = (x + ki as i64 - r).clamp(0, w as i64 - 1) as usize;
                acc += kv * row[sx];
            }
            tmp[y * w + x as usize] = acc;
        }
    }
    let mut out = vec![0.0f32; w * h];
    for y in 0..h as i64 {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sy = (y + ki as i64 - r).clamp(0, h as i64 - 1) as usize;
                acc += kv * tmp[sy * w + x];
            }
            out[y as usize * w + x] = acc;
        }
    }
    out
}

/// One refinement pass at a fixed level: warp the second expansion by the
/// current flow, average the displacement equations over a Gaussian window,
/// and solve the regularized 2×2 system per pixel.
fn refine_level(
    exp_prev: &PolyExpansion,
    exp_next: &PolyExpansion,
    flow: &mut FlowField,
    window_kernel: &[f32],
) {
    let (w, h) = (flow.width, flow.height);
    let mut g11 = vec![0.0f32; w * h];
    let mut g12 = vec![0.0f32; w * h];
    let mut g22 = vec![0.0f32; w * h];
    let mut h1 = vec![0.0f32; w * h];
    let mut h2 = vec![0.0f32; w * h];

    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (d0x, d0y) = (flow.dx[i], flow.dy[i]);
            let p1 = exp_prev.at(x, y);
            let p2 = exp_next.sample(x as f32 + d0x, y as f32 + d0y);
            // Averaged quadratic term and the displaced linear term.
            let axx = 0.5 * (p1[3] + p2[3]);
            let ayy = 0.5 * (p1[4] + p2[4]);
            let axy = 0.25 * (p1[5] + p2[5]);
            let mut dbx = -0.5 * (p2[1] - p1[1]);
            let mut dby = -0.5 * (p2[2] - p1[2]);
            dbx += axx * d0x + axy * d0y;
            dby += axy * d0x + ayy * d0y;
            // Normal equations of Ā·d = Δb.
            g11[i] = axx * axx + axy * axy;
            g12[i] = axy * (axx + ayy);
            g22[i] = ayy * ayy + axy * axy;
            h1[i] = axx * dbx + axy * dby;
            h2[i] = axy * dbx + ayy * dby;
        }
    }

    let g11 = blur_plane(&g11, w, h, window_kernel);
    let g12 = blur_plane(&g12, w, h, window_kernel);
    let g22 = blur_plane(&g22, w, h, window_kernel);
    let h1 = blur_plane(&h1, w, h, window_kernel);
    let h2 = blur_plane(&h2, w, h, window_kernel);

    // Diagonal regularization keeps textureless regions solvable.
    const REG: f32 = 1e-6;
    for i in 0..w * h {
        let a = g11[i] + REG;
        let d = g22[i] + REG;
        let b = g12[i];
        let det = a * d - b * b;
        flow.dx[i] = (d * h1[i] - b * h2[i]) / det;
        flow.dy[i] = (a * h2[i] - b * h1[i]) / det;
    }
}

fn level_dims(base: usize, scale: f32, level: usize) -> usize {
    let s = (scale as f64).powi(level as i32);
    ((base as f64) * s).round().max(1.0) as usize
}

/// Dense coarse-to-fine flow between two equal-size grayscale frames with
/// values in [0, 1].
pub fn farneback_flow(
    prev: &GrayImage,
    next: &GrayImage,
    config: &PyramidConfig,
) -> Result<FlowField, FlowError> {
    config.validate()?;
    if prev.width != next.width || prev.height != next.height {
        return Err(FlowError::DimMismatch(
            prev.width,
            prev.height,
            next.width,
            next.height,
        ));
    }
    for img in [prev, next] {
        if img.data.iter().any(|v| !v.is_finite() || *v < -1e-3 || *v > 1.0 + 1e-3) {
            return Err(FlowError::Invalid(
                "frame values must be finite and in [0, 1]".into(),
            ));
        }
    }
    // Smallest level must still fit the expansion window.
    let top = config.levels - 1;
    if level_dims(prev.width, config.scale, top) < config.poly_n
        || level_dims(prev.height, config.scale, top) < config.poly_n
    {
        return Err(FlowError::Invalid(format!(
            "too many pyramid levels ({}) for a {}x{} image",
            config.levels, prev.width, prev.height
        )));
    }

    // Pyramids, base first. Pre-blur before each downsample.
    let down_sigma = 0.5 * ((1.0 / (config.scale as f64)).powi(2) - 1.0).sqrt();
    let down_kernel = gaussian_kernel(2 * down_sigma.ceil().max(1.0) as usize + 1, down_sigma);
    let mut pyr_prev = vec![prev.clone()];
    let mut pyr_next = vec![next.clone()];
    for level in 1..config.levels {
        let mut next_level = Vec::new();
        for pyr in [&pyr_prev, &pyr_next] {
            let cur = pyr.last().unwrap();
            let nw = level_dims(prev.width, config.scale, level);
            let nh = level_dims(prev.height, config.scale, level);
            let blurred = blur_plane(&cur.data, cur.width, cur.height, &down_kernel);
            next_level.push(GrayImage {
                width: nw,
                height: nh,
                data: resize_plane(&blurred, cur.width, cur.height, nw, nh),
            });
        }
        pyr_next.push(next_level.pop().unwrap());
        pyr_prev.push(next_level.pop().unwrap());
    }

    // Conventional auto-sigma for the averaging window.
    let win_sigma = 0.3 * (((config.window - 1) / 2) as f64 - 1.0) + 0.8;
    let window_kernel = gaussian_kernel(config.window, win_sigma);

    let mut flow = FlowField::zeros(
        pyr_prev[top].width,
        pyr_prev[top].height,
    );
    for level in (0..config.levels).rev() {
        let (pw, ph) = (pyr_prev[level].width, pyr_prev[level].height);
        if flow.width != pw || flow.height != ph {
            // Upsample and rescale displacements to the finer grid.
            let sx = pw as f32 / flow.width as f32;
            let sy = ph as f32 / flow.height as f32;
            let dx = resize_plane(&flow.dx, flow.width, flow.height, pw, ph);
            let dy = resize_plane(&flow.dy, flow.width, flow.height, pw, ph);
            flow = FlowField {
                width: pw,
                height: ph,
                dx: dx.into_iter().map(|v| v * sx).collect(),
                dy: dy.into_iter().map(|v| v * sy).collect(),
            };
        }
        let exp_prev = polynomial_expansion(&pyr_prev[level], config.poly_n, config.poly_sigma)?;
        let exp_next = polynomial_expansion(&pyr_next[level], config.poly_n, config.poly_sigma)?;
        for _ in 0..config.iterations {
            refine_level(&exp_prev, &exp_next, &mut flow, &window_kernel);
        }
    }
    if !flow.is_finite() {
        return Err(FlowError::Invalid("non-finite flow values produced".into()));
    }
    Ok(flow)
}


#[cfg(test)]
mod tests {
    use super::tests_support::{render, texture};
    use super::*;

    #[test]
    fn constant_image_fits_constant_polynomial() {
        let img = GrayImage {
            width: 9,
            height: 9,
            data: vec![0.6; 81],
        };
        let exp = polynomial_expansion(&img, 5, 1.1).unwrap();
        for y in 0..9 {
            for x in 0..9 {
                assert!((exp.c(x, y) - 0.6).abs() < 1e-5);
                let (bx, by) = exp.b(x, y);
                assert!(bx.abs() < 1e-5 && by.abs() < 1e-5);
                let a = exp.a(x, y);
                assert!(a.iter().all(|v| v.abs() < 1e-5));
            }
        }
    }

    #[test]
    fn linear_ramp_recovers_gradient() {
        // f(x, y) = 2x scaled into [0,1]: use 0.02x so values stay in range,
        // then check b ≈ (0.02, 0).
        let mut img = GrayImage::new(11, 11);
        for y in 0..11 {
            for x in 0..11 {
                img.data[y * 11 + x] = 0.02 * x as f32;
            }
        }
        let exp = polynomial_expansion(&img, 5, 1.1).unwrap();
        for y in 3..8 {
            for x in 3..8 {
                let (bx, by) = exp.b(x, y);
                assert!((bx - 0.02).abs() < 1e-3, "bx {bx}");
                assert!(by.abs() < 1e-3);
                let a = exp.a(x, y);
                assert!(a.iter().all(|v| v.abs() < 1e-3));
            }
        }
    }

    #[test]
    fn expansion_matches_direct_normal_equations() {
        let f = texture(3);
        let img = render(&f, 16, 16, 0.0, 0.0);
        let exp = polynomial_expansion(&img, 5, 1.1).unwrap();
        // Direct per-pixel weighted least squares at a few positions.
        for &(px, py) in &[(5usize, 6usize), (8, 8), (10, 4)] {
            let mut g = vec![0.0f64; 36];
            let mut v = [0.0f64; 6];
            for dy in -2i64..=2 {
                for dx in -2i64..=2 {
                    let w = (-((dx * dx + dy * dy) as f64) / (2.0 * 1.1f64.powi(2))).exp();
                    let sx = (px as i64 + dx).clamp(0, 15) as usize;
                    let sy = (py as i64 + dy).clamp(0, 15) as usize;
                    let bb = [
                        1.0,
                        dx as f64,
                        dy as f64,
                        (dx * dx) as f64,
                        (dy * dy) as f64,
                        (dx * dy) as f64,
                    ];
                    for i in 0..6 {
                        for j in 0..6 {
                            g[i * 6 + j] += w * bb[i] * bb[j];
                        }
                        v[i] += w * bb[i] * img.data[sy * 16 + sx] as f64;
                    }
                }
            }
            let ginv = invert(&mut g, 6).unwrap();
            let mut want = [0.0f64; 6];
            for k in 0..6 {
                for j in 0..6 {
                    want[k] += ginv[k * 6 + j] * v[j];
                }
            }
            let got = exp.at(px, py);
            for k in 0..6 {
                assert!(
                    (got[k] as f64 - want[k]).abs() < 1e-4,
                    "coeff {k}: {} vs {}",
                    got[k],
                    want[k]
                );
            }
        }
    }

    #[test]
    fn zero_motion_gives_zero_flow() {
        let f = texture(1);
        let img = render(&f, 48, 48, 0.0, 0.0);
        let flow = farneback_flow(&img, &img, &PyramidConfig::default()).unwrap();
        assert!(flow.max_magnitude() < 1e-3);
    }

    #[test]
    fn known_shift_recovered_within_half_pixel() {
        let f = texture(7);
        let prev = render(&f, 128, 128, 0.0, 0.0);
        // Content moves by (3, −2): next frame samples the texture at −(3,−2).
        let next = render(&f, 128, 128, -3.0, 2.0);
        let flow = farneback_flow(&prev, &next, &PyramidConfig::default()).unwrap();
        let mut errs: Vec<f32> = Vec::new();
        for y in 16..112 {
            for x in 16..112 {
                let (dx, dy) = flow.get(x, y);
                errs.push(((dx - 3.0).powi(2) + (dy + 2.0).powi(2)).sqrt());
            }
        }
        errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = errs[errs.len() / 2];
        assert!(median < 0.5, "median endpoint error {median}");
    }

    #[test]
    fn small_rotation_direction_matches_analytic_field() {
        let f = texture(11);
        let prev = render(&f, 128, 128, 0.0, 0.0);
        let theta = 2.0f64.to_radians();
        let (c, s) = (theta.cos(), theta.sin());
        let (cx, cy) = (63.5f64, 63.5f64);
        // next(p) = prev(R⁻¹(p − c) + c) so content rotates by +theta.
        let mut next = GrayImage::new(128, 128);
        for y in 0..128 {
            for x in 0..128 {
                let (rx, ry) = (x as f64 - cx, y as f64 - cy);
                let sxf = c * rx + s * ry + cx;
                let syf = -s * rx + c * ry + cy;
                next.data[y * 128 + x] = f(sxf, syf).clamp(0.0, 1.0) as f32;
            }
        }
        let flow = farneback_flow(&prev, &next, &PyramidConfig::default()).unwrap();
        let mut cos_sum = 0.0f64;
        let mut count = 0usize;
        for y in 16..112 {
            for x in 16..112 {
                let (rx, ry) = (x as f64 - cx, y as f64 - cy);
                let ax = (c - 1.0) * rx - s * ry;
                let ay = s * rx + (c - 1.0) * ry;
                let amag = (ax * ax + ay * ay).sqrt();
                if amag < 0.25 {
                    continue;
                }
                let (dx, dy) = flow.get(x, y);
                let fmag = ((dx * dx + dy * dy) as f64).sqrt();
                if fmag < 1e-6 {
                    continue;
                }
                cos_sum += (ax * dx as f64 + ay * dy as f64) / (amag * fmag);
                count += 1;
            }
        }
        let mean_cos = cos_sum / count as f64;
        assert!(mean_cos > 0.9, "mean direction cosine {mean_cos}");
    }

    #[test]
    fn dim_mismatch_rejected() {
        let a = GrayImage::new(16, 16);
        let b = GrayImage::new(16, 17);
        assert!(matches!(
            farneback_flow(&a, &b, &PyramidConfig::default()),
            Err(FlowError::DimMismatch(..))
        ));
    }

    #[test]
    fn too_many_levels_rejected() {
        let a = GrayImage::new(16, 16);
        let cfg = PyramidConfig {
            levels: 4,
            ..Default::default()
        };
        // 16 → 8 → 4 → 2 undershoots poly_n = 5.
        assert!(farneback_flow(&a, &a, &cfg).is_err());
    }
}
