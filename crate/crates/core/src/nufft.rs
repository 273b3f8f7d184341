//! Kaiser-Bessel gridding NUFFT.
//!
//! Sign and scale conventions, with `x` the centered integer voxel offset:
//!
//! * type 2 (image → samples): `s_j = Σ_x f(x) e^{-i l_j·x}`
//! * adjoint: `g(x) = Σ_j v_j e^{+i l_j·x}`, the exact Hermitian adjoint of
//!   type 2 as implemented
//! * type 1: `f(x) = (1/N) Σ_j w_j s_j e^{+i l_j·x}` with `N = N_x·N_y·N_z`,
//!   so a full Cartesian lattice with unit weights inverts type 2
//!
//! The spreading grid is oversampled by `osf` per axis. Image-domain
//! deapodization divides by the kernel's continuous Fourier transform,
//! evaluated numerically per axis.
//!
//! Locations that fall on nodes of the oversampled grid bypass the kernel:
//! type 2 reads them from the zero-padded FFT and the adjoint deposits them
//! on the node, so those samples are exact.

use std::f64::consts::PI;
use std::sync::OnceLock;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::fft::{fft3, Direction};
use crate::geometry::KSpaceLocations;
use crate::volume::ComplexVolume;

/// Relative slack on the `[-π, π]` band check, absorbing rounding in
/// transformed lattice coordinates.
const BAND_SLACK: f64 = 1e-9;

/// Quadrature points per unit of kernel support used for deapodization.
const DEAPOD_POINTS_PER_UNIT: usize = 4000;

/// Distance from an integer, in oversampled-grid units, below which a
/// location counts as a grid node.
const NODE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GriddingConfig {
    pub kernel_width: usize,
    pub oversampling: f64,
    pub beta: f64,
}

impl GriddingConfig {
    /// Kernel width `W`, oversampling `osf`, and the matching Beatty shape.
    pub fn new(kernel_width: usize, oversampling: f64) -> Result<Self> {
        let beta = beatty_beta(kernel_width, oversampling)?;
        Ok(GriddingConfig { kernel_width, oversampling, beta })
    }

    pub fn with_beta(kernel_width: usize, oversampling: f64, beta: f64) -> Result<Self> {
        if kernel_width < 2 {
            return invalid(format!("kernel width must be at least 2, got {kernel_width}"));
        }
        if !(oversampling.is_finite() && oversampling > 1.0) {
            return invalid(format!("oversampling must exceed 1, got {oversampling}"));
        }
        if !(beta.is_finite() && beta > 0.0) {
            return invalid(format!("kernel beta must be positive, got {beta}"));
        }
        Ok(GriddingConfig { kernel_width, oversampling, beta })
    }

    fn grid_len(&self, n: usize) -> usize {
        (self.oversampling * n as f64).ceil() as usize
    }
}

impl Default for GriddingConfig {
    fn default() -> Self {
        GriddingConfig::new(6, 2.0).expect("default gridding parameters are valid")
    }
}

/// Fourier samples paired with their locations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KSpaceSamples {
    pub locations: KSpaceLocations,
    pub values: Vec<Complex64>,
}

impl KSpaceSamples {
    pub fn new(locations: KSpaceLocations, values: Vec<Complex64>) -> Result<Self> {
        if locations.len() != values.len() {
            return invalid(format!(
                "{} locations but {} values",
                locations.len(),
                values.len()
            ));
        }
        Ok(KSpaceSamples { locations, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Beatty et al. kernel shape `β = π·sqrt((W/osf)²·(osf − ½)² − 0.8)`.
pub fn beatty_beta(kernel_width: usize, oversampling: f64) -> Result<f64> {
    if kernel_width < 2 {
        return invalid(format!("kernel width must be at least 2, got {kernel_width}"));
    }
    if !(oversampling.is_finite() && oversampling > 1.0) {
        return invalid(format!("oversampling must exceed 1, got {oversampling}"));
    }
    let w = kernel_width as f64;
    let arg = (w / oversampling).powi(2) * (oversampling - 0.5).powi(2) - 0.8;
    if arg <= 0.0 {
        return invalid(format!("no real Beatty beta for W = {kernel_width}, osf = {oversampling}"));
    }
    Ok(PI * arg.sqrt())
}

/// Modified Bessel function of the first kind, order zero (power series).
pub fn bessel_i0(x: f64) -> f64 {
    let q = 0.25 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    loop {
        term *= q / (k * k);
        sum += term;
        if term <= sum * 1e-17 {
            return sum;
        }
        k += 1.0;
    }
}

/// Normalized Kaiser-Bessel kernel, supported on `|u| < W/2`.
pub fn kb_kernel(u: f64, kernel_width: usize, beta: f64) -> f64 {
    let half = 0.5 * kernel_width as f64;
    if u.abs() >= half {
        return 0.0;
    }
    let r = u / half;
    bessel_i0(beta * (1.0 - r * r).sqrt()) / bessel_i0(beta)
}

/// Per-axis gridding geometry: oversampled length and deapodization profile.
#[derive(Debug, Clone)]
struct AxisGrid {
    n: usize,
    m: usize,
    /// Kernel transform at each centered image offset, divided by its value at 0.
    profile: Vec<f64>,
    /// Kernel transform at offset 0 (the kernel's integral).
    peak: f64,
}

impl AxisGrid {
    fn new(n: usize, cfg: &GriddingConfig) -> Result<Self> {
        let m = cfg.grid_len(n);
        let w = cfg.kernel_width;
        // midpoint rule on the even integrand over [0, W/2]
        let q = DEAPOD_POINTS_PER_UNIT * w / 2;
        let h = 0.5 * w as f64 / q as f64;
        let nodes: Vec<(f64, f64)> = (0..q)
            .map(|t| {
                let u = (t as f64 + 0.5) * h;
                (u, kb_kernel(u, w, cfg.beta))
            })
            .collect();
        let transform = |x: f64| -> f64 {
            let omega = 2.0 * PI * x / m as f64;
            2.0 * h * nodes.iter().map(|&(u, k)| k * (omega * u).cos()).sum::<f64>()
        };
        let peak = transform(0.0);
        let c = (n / 2) as f64;
        let profile: Vec<f64> = (0..n).map(|i| transform(i as f64 - c) / peak).collect();
        if let Some(bad) = profile.iter().find(|&&p| p < 1e-12) {
            return Err(Error::Conditioning(format!(
                "deapodization factor {bad:e} below 1e-12 for axis length {n} (W = {w}, osf = {})",
                cfg.oversampling
            )));
        }
        Ok(AxisGrid { n, m, profile, peak })
    }
}

#[derive(Debug, Clone)]
struct Grids([AxisGrid; 3]);

impl Grids {
    fn new(dims: [usize; 3], cfg: &GriddingConfig) -> Result<Self> {
        Ok(Grids([AxisGrid::new(dims[0], cfg)?, AxisGrid::new(dims[1], cfg)?, AxisGrid::new(dims[2], cfg)?]))
    }

    fn oversampled(&self) -> [usize; 3] {
        [self.0[0].m, self.0[1].m, self.0[2].m]
    }

    fn peak(&self) -> f64 {
        self.0.iter().map(|g| g.peak).product()
    }

    fn correction(&self, i: usize, j: usize, k: usize) -> f64 {
        self.0[0].profile[i] * self.0[1].profile[j] * self.0[2].profile[k]
    }

    /// Grid node a location sits on, if any.
    fn node(&self, l: &[f64; 3]) -> Option<usize> {
        let mut idx = [0usize; 3];
        for axis in 0..3 {
            let m = self.0[axis].m;
            let u = l[axis] * m as f64 / (2.0 * PI);
            let r = u.round();
            if (u - r).abs() > NODE_TOLERANCE {
                return None;
            }
            idx[axis] = (r as isize).rem_euclid(m as isize) as usize;
        }
        let m = self.oversampled();
        Some(idx[0] + m[0] * (idx[1] + m[1] * idx[2]))
    }

    /// Oversampled-grid position of each image index along every axis.
    fn positions(&self) -> [Vec<usize>; 3] {
        let pos = |g: &AxisGrid| -> Vec<usize> {
            let c = (g.n / 2) as isize;
            (0..g.n).map(|i| (i as isize - c).rem_euclid(g.m as isize) as usize).collect()
        };
        [pos(&self.0[0]), pos(&self.0[1]), pos(&self.0[2])]
    }
}

/// Interpolation footprint of a location: first grid index and kernel weight
/// per tap, per axis. Weights are written into `out` (`3·W` values).
fn footprint(l: &[f64; 3], grids: &Grids, cfg: &GriddingConfig, out: &mut [f64]) -> [isize; 3] {
    let w = cfg.kernel_width;
    let half = 0.5 * w as f64;
    let mut first = [0isize; 3];
    for axis in 0..3 {
        let u = l[axis] * grids.0[axis].m as f64 / (2.0 * PI);
        let k0 = (u - half).floor() as isize + 1;
        first[axis] = k0;
        for t in 0..w {
            out[axis * w + t] = kb_kernel(u - (k0 + t as isize) as f64, w, cfg.beta);
        }
    }
    first
}

fn check_band(locations: &KSpaceLocations) -> Result<()> {
    let limit = PI * (1.0 + BAND_SLACK);
    let count = locations
        .iter()
        .filter(|l| l.iter().any(|v| !(v.abs() <= limit)))
        .count();
    if count > 0 {
        return Err(Error::OutOfBand { count, limit: PI });
    }
    Ok(())
}

/// Separable deapodization profile, normalized to 1 at the center voxel.
pub fn deapodization_profile(dims: [usize; 3], cfg: &GriddingConfig) -> Result<Vec<f64>> {
    let grids = Grids::new(dims, cfg)?;
    let mut out = Vec::with_capacity(dims.iter().product());
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                out.push(grids.correction(i, j, k));
            }
        }
    }
    Ok(out)
}

/// Divides an image by the kernel's separable image-domain profile.
pub fn deapodize(image: &ComplexVolume, cfg: &GriddingConfig) -> Result<ComplexVolume> {
    let profile = deapodization_profile(image.dims, cfg)?;
    let mut out = image.clone();
    out.data.iter_mut().zip(&profile).for_each(|(v, p)| *v /= *p);
    Ok(out)
}

/// Type-2 operator with the oversampled spectrum precomputed, so the same
/// image can be sampled at several location sets.
#[derive(Debug, Clone)]
pub struct Type2Plan {
    cfg: GriddingConfig,
    grids: Grids,
    image: Vec<Complex64>,
    spectrum: Vec<Complex64>,
    /// FFT of the zero-padded image, built on first use by a node location.
    padded: OnceLock<Vec<Complex64>>,
}

impl Type2Plan {
    pub fn new(image: &ComplexVolume, cfg: &GriddingConfig) -> Result<Self> {
        Self::build(image, cfg, true)
    }

    pub(crate) fn build(image: &ComplexVolume, cfg: &GriddingConfig, deapodize: bool) -> Result<Self> {
        let grids = Grids::new(image.dims, cfg)?;
        let spectrum = padded_spectrum(&image.data, image.dims, &grids, deapodize);
        Ok(Type2Plan { cfg: *cfg, grids, image: image.data.clone(), spectrum, padded: OnceLock::new() })
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.grids.0[0].n, self.grids.0[1].n, self.grids.0[2].n]
    }

    /// Interpolates the spectrum at each location.
    pub fn sample(&self, locations: &KSpaceLocations) -> Result<Vec<Complex64>> {
        check_band(locations)?;
        let w = self.cfg.kernel_width;
        let m = self.grids.oversampled();
        let scale = 1.0 / self.grids.peak();
        let dims = self.dims();
        let padded = || self.padded.get_or_init(|| padded_spectrum(&self.image, dims, &self.grids, false));
        if locations.iter().any(|l| self.grids.node(l).is_some()) {
            padded();
        }
        Ok(locations
            .as_slice()
            .par_iter()
            .map_init(
                || vec![0.0; 3 * w],
                |weights, l| {
                    if let Some(g) = self.grids.node(l) {
                        return padded()[g];
                    }
                    let first = footprint(l, &self.grids, &self.cfg, weights);
                    let mut acc = Complex64::new(0.0, 0.0);
                    for tz in 0..w {
                        let gz = (first[2] + tz as isize).rem_euclid(m[2] as isize) as usize;
                        let wz = weights[2 * w + tz];
                        for ty in 0..w {
                            let gy = (first[1] + ty as isize).rem_euclid(m[1] as isize) as usize;
                            let wzy = wz * weights[w + ty];
                            let row = m[0] * (gy + m[1] * gz);
                            let mut line = Complex64::new(0.0, 0.0);
                            for tx in 0..w {
                                let gx = (first[0] + tx as isize).rem_euclid(m[0] as isize) as usize;
                                line += self.spectrum[row + gx] * weights[tx];
                            }
                            acc += line * wzy;
                        }
                    }
                    acc * scale
                },
            )
            .collect())
    }
}

/// Forward FFT of the image zero-padded onto the oversampled grid, each
/// voxel optionally divided by the deapodization profile.
fn padded_spectrum(image: &[Complex64], dims: [usize; 3], grids: &Grids, deapodize: bool) -> Vec<Complex64> {
    let m = grids.oversampled();
    let pos = grids.positions();
    let mut spectrum = vec![Complex64::new(0.0, 0.0); m.iter().product()];
    let [nx, ny, nz] = dims;
    for k in 0..nz {
        for j in 0..ny {
            let src = nx * (j + ny * k);
            let dst = m[0] * (pos[1][j] + m[1] * pos[2][k]);
            for i in 0..nx {
                let c = if deapodize { grids.correction(i, j, k) } else { 1.0 };
                spectrum[dst + pos[0][i]] = image[src + i] / c;
            }
        }
    }
    fft3(&mut spectrum, m, Direction::Forward);
    spectrum
}

/// `s_j ≈ Σ_x f(x) e^{-i l_j·x}`.
pub fn nufft_type2(
    image: &ComplexVolume,
    locations: &KSpaceLocations,
    cfg: &GriddingConfig,
) -> Result<KSpaceSamples> {
    check_band(locations)?;
    let values = Type2Plan::new(image, cfg)?.sample(locations)?;
    Ok(KSpaceSamples { locations: locations.clone(), values })
}

/// Exact adjoint of [`nufft_type2`]: `g(x) ≈ Σ_j v_j e^{+i l_j·x}`.
pub fn nufft_adjoint(samples: &KSpaceSamples, dims: [usize; 3], cfg: &GriddingConfig) -> Result<ComplexVolume> {
    adjoint_impl(&samples.locations, &samples.values, dims, cfg, true)
}

pub(crate) fn adjoint_impl(
    locations: &KSpaceLocations,
    values: &[Complex64],
    dims: [usize; 3],
    cfg: &GriddingConfig,
    deapodize: bool,
) -> Result<ComplexVolume> {
    if locations.len() != values.len() {
        return invalid(format!("{} locations but {} values", locations.len(), values.len()));
    }
    if dims.iter().any(|&n| n == 0) {
        return invalid(format!("output dims must be positive, got {dims:?}"));
    }
    check_band(locations)?;
    let grids = Grids::new(dims, cfg)?;
    let m = grids.oversampled();
    let w = cfg.kernel_width;
    let total: usize = m.iter().product();

    let nodes: Vec<Option<usize>> = locations.as_slice().par_iter().map(|l| grids.node(l)).collect();
    let mut node_grid = None;
    if nodes.iter().any(Option::is_some) {
        let mut g = vec![Complex64::new(0.0, 0.0); total];
        for (node, v) in nodes.iter().zip(values) {
            if let Some(t) = node {
                g[*t] += v;
            }
        }
        fft3(&mut g, m, Direction::Inverse);
        node_grid = Some(g);
    }

    let mut weights = vec![0.0; locations.len() * 3 * w];
    let firsts: Vec<[isize; 3]> = locations
        .as_slice()
        .par_iter()
        .zip(weights.par_chunks_mut(3 * w))
        .map(|(l, out)| footprint(l, &grids, cfg, out))
        .collect();

    // Bin (sample, z-tap) pairs by the oversampled z plane they touch. Each
    // bin lists samples in index order, and each plane is owned by one task,
    // so every grid point accumulates its contributions in a fixed order.
    let mut planes: Vec<Vec<(u32, u8)>> = vec![Vec::new(); m[2]];
    for (j, first) in firsts.iter().enumerate() {
        if nodes[j].is_some() {
            continue;
        }
        for tz in 0..w {
            let gz = (first[2] + tz as isize).rem_euclid(m[2] as isize) as usize;
            planes[gz].push((j as u32, tz as u8));
        }
    }

    let plane_len = m[0] * m[1];
    let mut grid = vec![Complex64::new(0.0, 0.0); total];
    grid.par_chunks_mut(plane_len).zip(planes.par_iter()).for_each(|(plane, bin)| {
        for &(j, tz) in bin {
            let j = j as usize;
            let wts = &weights[j * 3 * w..(j + 1) * 3 * w];
            let first = firsts[j];
            let v = values[j] * wts[2 * w + tz as usize];
            for ty in 0..w {
                let gy = (first[1] + ty as isize).rem_euclid(m[1] as isize) as usize;
                let vy = v * wts[w + ty];
                let row = &mut plane[gy * m[0]..(gy + 1) * m[0]];
                for tx in 0..w {
                    let gx = (first[0] + tx as isize).rem_euclid(m[0] as isize) as usize;
                    row[gx] += vy * wts[tx];
                }
            }
        }
    });

    if nodes.iter().any(Option::is_none) {
        fft3(&mut grid, m, Direction::Inverse);
    }

    let pos = grids.positions();
    let scale = 1.0 / grids.peak();
    let mut out = ComplexVolume::zeros(dims, [1.0; 3]);
    let [nx, ny, nz] = dims;
    for k in 0..nz {
        for j in 0..ny {
            let src = m[0] * (pos[1][j] + m[1] * pos[2][k]);
            let dst = nx * (j + ny * k);
            for i in 0..nx {
                let c = if deapodize { grids.correction(i, j, k) } else { 1.0 };
                let mut v = grid[src + pos[0][i]] * (scale / c);
                if let Some(g) = &node_grid {
                    v += g[src + pos[0][i]];
                }
                out.data[dst + i] = v;
            }
        }
    }
    Ok(out)
}

/// `f(x) ≈ (1/N) Σ_j w_j s_j e^{+i l_j·x}` onto a grid of `dims`.
pub fn nufft_adjoint_type1(
    samples: &KSpaceSamples,
    dims: [usize; 3],
    cfg: &GriddingConfig,
    density_weights: &[f64],
) -> Result<ComplexVolume> {
    if density_weights.len() != samples.len() {
        return invalid(format!(
            "{} density weights for {} samples",
            density_weights.len(),
            samples.len()
        ));
    }
    if samples.locations.len() != samples.values.len() {
        return invalid("sample locations and values differ in length");
    }
    let n_total: usize = dims.iter().product();
    let inv_n = 1.0 / n_total.max(1) as f64;
    let weighted: Vec<Complex64> = samples
        .values
        .iter()
        .zip(density_weights)
        .map(|(v, w)| v * (w * inv_n))
        .collect();
    adjoint_impl(&samples.locations, &weighted, dims, cfg, true)
}
