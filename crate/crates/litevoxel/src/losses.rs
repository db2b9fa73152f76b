//! Photometric supervision: inverse-Sobel low-frequency weighting with a
//! gamma ramp, robust (Charbonnier) photometric loss, SSIM, transmittance
//! concentration, total variation, and total-loss assembly.

use std::collections::BTreeMap;

use crate::grid::{VoxelGrid, VoxelKey};
use crate::img::Image;
use crate::raster::RenderOutput;
use crate::{Error, Result};

pub const LF_EPSILON: f64 = 1e-3;
pub const CHARBONNIER_DELTA: f64 = 1e-3;
pub const TV_SMOOTHING: f64 = 1e-8;

/// Nearest-rank percentile: smallest element whose empirical CDF reaches `p`.
pub fn percentile_nearest(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let n = sorted.len();
    let idx = ((p * n as f64).ceil() as usize).clamp(1, n) - 1;
    sorted[idx]
}

/// Percentile-normalized Sobel magnitude of the luminance, clipped to [0,1].
/// Replicate padding at borders; normalized by the 99th percentile. The
/// result is a stop-grad weight source, never differentiated.
pub fn sobel_map(image: &Image) -> Result<Vec<f64>> {
    let (w, h) = (image.width as i64, image.height as i64);
    if w < 3 || h < 3 {
        return Err(Error::Argument("sobel_map needs at least a 3x3 image".into()));
    }
    let lum = image.luminance();
    let at = |x: i64, y: i64| -> f64 {
        let xc = x.clamp(0, w - 1);
        let yc = y.clamp(0, h - 1);
        lum[(yc * w + xc) as usize]
    };
    let mut mag = vec![0.0; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let gx = -at(x - 1, y - 1) + at(x + 1, y - 1) - 2.0 * at(x - 1, y)
                + 2.0 * at(x + 1, y)
                - at(x - 1, y + 1)
                + at(x + 1, y + 1);
            let gy = -at(x - 1, y - 1) - 2.0 * at(x, y - 1) - at(x + 1, y - 1)
                + at(x - 1, y + 1)
                + 2.0 * at(x, y + 1)
                + at(x + 1, y + 1);
            mag[(y * w + x) as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    let mut sorted = mag.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let p99 = percentile_nearest(&sorted, 0.99);
    // guard against pure float noise on constant images
    if p99 <= 1e-12 {
        return Ok(vec![0.0; mag.len()]);
    }
    Ok(mag.iter().map(|m| (m / p99).clamp(0.0, 1.0)).collect())
}

/// Piecewise-linear LF emphasis schedule: 0 before t0, linear ramp to
/// gamma_max on [t0, t1), gamma_max afterwards.
pub fn gamma_schedule(t: u64, t0: u64, t1: u64, gamma_max: f64) -> Result<f64> {
    if t1 <= t0 {
        return Err(Error::Config("gamma schedule requires t0 < t1".into()));
    }
    Ok(if t < t0 {
        0.0
    } else if t < t1 {
        gamma_max * (t - t0) as f64 / (t1 - t0) as f64
    } else {
        gamma_max
    })
}

/// Mean-normalized inverse-Sobel weights: w(p) = (eps + 1 - s(p))^gamma,
/// w_tilde = w / mean(w).
pub fn lf_weights(sobel: &[f64], gamma: f64, eps: f64) -> Vec<f64> {
    let mut w: Vec<f64> = sobel.iter().map(|s| (eps + 1.0 - s).powf(gamma)).collect();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    for x in w.iter_mut() {
        *x /= mean;
    }
    w
}

/// Per-channel Charbonnier penalty, zero at zero residual.
fn charbonnier(r: f64, delta: f64) -> f64 {
    (r * r + delta * delta).sqrt() - delta
}

fn charbonnier_grad(r: f64, delta: f64) -> f64 {
    r / (r * r + delta * delta).sqrt()
}

/// LF-weighted robust photometric loss with its per-pixel color gradient.
pub fn lf_loss(
    render: &Image,
    gt: &Image,
    weights: &[f64],
) -> Result<(f64, Vec<[f64; 3]>)> {
    if render.width != gt.width || render.height != gt.height || weights.len() != render.data.len()
    {
        return Err(Error::Argument("lf_loss shape mismatch".into()));
    }
    let n = render.data.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![[0.0; 3]; render.data.len()];
    for (i, (rp, gp)) in render.data.iter().zip(gt.data.iter()).enumerate() {
        let w = weights[i];
        for ch in 0..3 {
            let r = rp[ch] - gp[ch];
            loss += w * charbonnier(r, CHARBONNIER_DELTA);
            grad[i][ch] = w * charbonnier_grad(r, CHARBONNIER_DELTA) / n;
        }
    }
    Ok((loss / n, grad))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// 1 - mean SSIM over valid 11x11 Gaussian windows and channels, with the
/// analytic gradient with respect to the rendered image.
pub fn ssim_loss(render: &Image, gt: &Image) -> Result<(f64, Vec<[f64; 3]>)> {
    if render.width != gt.width || render.height != gt.height {
        return Err(Error::Argument("ssim_loss shape mismatch".into()));
    }
    let (w, h) = (render.width as usize, render.height as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Argument(format!(
            "ssim_loss needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images"
        )));
    }
    let k1 = gaussian_kernel();
    let half = SSIM_WINDOW / 2;
    let (vw, vh) = (w - 2 * half, h - 2 * half);
    let n_cells = (vw * vh * 3) as f64;
    let mut loss_sum = 0.0;
    let mut grad = vec![[0.0; 3]; w * h];
    // per-center partials, re-expanded through the separable window below
    for ch in 0..3 {
        let x: Vec<f64> = render.data.iter().map(|p| p[ch]).collect();
        let y: Vec<f64> = gt.data.iter().map(|p| p[ch]).collect();
        for cy in half..h - half {
            for cx in half..w - half {
                let mut mu_x = 0.0;
                let mut mu_y = 0.0;
                let mut ex2 = 0.0;
                let mut ey2 = 0.0;
                let mut exy = 0.0;
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let g = k1[dy] * k1[dx];
                        let xi = x[(cy + dy - half) * w + cx + dx - half];
                        let yi = y[(cy + dy - half) * w + cx + dx - half];
                        mu_x += g * xi;
                        mu_y += g * yi;
                        ex2 += g * xi * xi;
                        ey2 += g * yi * yi;
                        exy += g * xi * yi;
                    }
                }
                let var_x = ex2 - mu_x * mu_x;
                let var_y = ey2 - mu_y * mu_y;
                let cov = exy - mu_x * mu_y;
                let a1 = 2.0 * mu_x * mu_y + SSIM_C1;
                let a2 = 2.0 * cov + SSIM_C2;
                let b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1;
                let b2 = var_x + var_y + SSIM_C2;
                let s = (a1 * a2) / (b1 * b2);
                loss_sum += s;
                // partials w.r.t. the raw window moments of x
                let ds_da1 = a2 / (b1 * b2);
                let ds_da2 = a1 / (b1 * b2);
                let ds_db1 = -s / b1;
                let ds_db2 = -s / b2;
                let d_mu = ds_da1 * 2.0 * mu_y + ds_db1 * 2.0 * mu_x
                    - ds_db2 * 2.0 * mu_x
                    - ds_da2 * 2.0 * mu_y;
                let d_ex2 = ds_db2;
                let d_exy = ds_da2 * 2.0;
                // dL/dx_q = -(1/N) sum_windows g * (d_mu + d_ex2*2x + d_exy*y)
                let scale = -1.0 / n_cells;
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let g = k1[dy] * k1[dx];
                        let qi = (cy + dy - half) * w + cx + dx - half;
                        grad[qi][ch] +=
                            scale * g * (d_mu + d_ex2 * 2.0 * x[qi] + d_exy * y[qi]);
                    }
                }
            }
        }
    }
    Ok((1.0 - loss_sum / n_cells, grad))
}

/// Transmittance concentration: mean T(1-T), minimized at T in {0,1}.
pub fn transmittance_concentration_loss(t_final: &[f64]) -> (f64, Vec<f64>) {
    let n = t_final.len() as f64;
    let loss = t_final.iter().map(|t| t * (1.0 - t)).sum::<f64>() / n;
    let grad = t_final.iter().map(|t| (1.0 - 2.0 * t) / n).collect();
    (loss, grad)
}

/// Smoothed total variation over same-level face-adjacent stored voxel
/// pairs: mean sqrt((alpha_u - alpha_v)^2 + 1e-8). Returns the value plus
/// per-voxel gradients on the opacity parameter.
pub fn tv_loss(grid: &VoxelGrid) -> (f64, BTreeMap<VoxelKey, f64>) {
    let mut pairs: Vec<(VoxelKey, VoxelKey)> = Vec::new();
    for (k, _) in grid.iter() {
        for axis in 0..3 {
            if let Some(nb) = k.face_neighbor(axis, 1) {
                if grid.contains(&nb) {
                    pairs.push((*k, nb));
                }
            }
        }
    }
    let mut grads: BTreeMap<VoxelKey, f64> = BTreeMap::new();
    if pairs.is_empty() {
        return (0.0, grads);
    }
    let n = pairs.len() as f64;
    let mut loss = 0.0;
    for (a, b) in &pairs {
        let va = grid.get(a).unwrap();
        let vb = grid.get(b).unwrap();
        let (aa, ab) = (va.alpha(), vb.alpha());
        let d = aa - ab;
        let root = (d * d + TV_SMOOTHING).sqrt();
        loss += root;
        let g = d / root / n;
        *grads.entry(*a).or_insert(0.0) += g * aa * (1.0 - aa);
        *grads.entry(*b).or_insert(0.0) -= g * ab * (1.0 - ab);
    }
    (loss / n, grads)
}

/// Term weights for loss assembly.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_ssim: f64,
    pub lambda_tconc: f64,
    pub lambda_tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ssim: 0.2,
            lambda_tconc: 0.01,
            lambda_tv: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: f64,
    pub lf: f64,
    pub ssim: f64,
    pub t_conc: f64,
    pub tv: f64,
}

/// Gradients feeding the compositing backward pass plus direct per-voxel
/// opacity-parameter gradients from the TV term.
pub struct LossGrads {
    pub dl_dc: Vec<[f64; 3]>,
    pub dl_dt: Vec<f64>,
    pub voxel_opacity: BTreeMap<VoxelKey, f64>,
}

/// Assemble L_total = L_LF + lambda_SSIM L_SSIM + lambda_Tc L_Tc +
/// lambda_tv L_tv, with all gradients scaled and summed.
pub fn total_loss(
    output: &RenderOutput,
    gt: &Image,
    weights: &[f64],
    grid: &VoxelGrid,
    lw: &LossWeights,
) -> Result<(LossBreakdown, LossGrads)> {
    let (lf, lf_grad) = lf_loss(&output.image, gt, weights)?;
    let (ssim, ssim_grad) = ssim_loss(&output.image, gt)?;
    let (t_conc, t_grad) = transmittance_concentration_loss(&output.transmittance);
    let (tv, tv_grad) = tv_loss(grid);
    let total = lf + lw.lambda_ssim * ssim + lw.lambda_tconc * t_conc + lw.lambda_tv * tv;
    let n = output.image.data.len();
    let mut dl_dc = vec![[0.0; 3]; n];
    for i in 0..n {
        for ch in 0..3 {
            dl_dc[i][ch] = lf_grad[i][ch] + lw.lambda_ssim * ssim_grad[i][ch];
        }
    }
    let dl_dt = t_grad.iter().map(|g| lw.lambda_tconc * g).collect();
    let voxel_opacity = tv_grad
        .into_iter()
        .map(|(k, g)| (k, lw.lambda_tv * g))
        .collect();
    Ok((
        LossBreakdown {
            total,
            lf,
            ssim,
            t_conc,
            tv,
        },
        LossGrads {
            dl_dc,
            dl_dt,
            voxel_opacity,
        },
    ))
}

/// PSNR in dB for range-1 images; identical images report the 99 dB cap.
pub fn psnr(render: &Image, gt: &Image) -> Result<f64> {
    if render.width != gt.width || render.height != gt.height {
        return Err(Error::Argument("psnr shape mismatch".into()));
    }
    let n = render.data.len() as f64 * 3.0;
    let mse = render
        .data
        .iter()
        .zip(gt.data.iter())
        .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(99.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(99.0))
}

/// Mean SSIM (not the loss) for evaluation reporting.
pub fn ssim_index(render: &Image, gt: &Image) -> Result<f64> {
    let (loss, _) = ssim_loss(render, gt)?;
    Ok(1.0 - loss)
}

/// Stop-grad luminance used by the flat-region metric in the A/B experiments.
pub fn flat_region_mse(render: &Image, gt: &Image, sobel: &[f64], threshold: f64) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (a, b)) in render.data.iter().zip(gt.data.iter()).enumerate() {
        if sobel[i] < threshold {
            sum += (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>();
            n += 3;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
