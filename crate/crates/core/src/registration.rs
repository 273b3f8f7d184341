//! k-space registration onto a reference protocol, the image-space
//! (trilinear) baseline, and phase wrapping/unwrapping.
//!
//! An acquired sample at lattice location `l` (acquisition-voxel units)
//! measures the object spectrum at `R · diag(s) · l` in reference-voxel
//! units, `s_i = v_r / v_i`. Registration moves every sample to that
//! location, drops those outside the reference band `[-π, π)³`, and grids
//! the rest onto the reference matrix with the adjoint NUFFT. No
//! image-domain interpolation happens on this path.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{invalid, Error, Result};
use crate::fft::{fft3, signed_index, Direction};
use crate::geometry::{
    cartesian_kspace_lattice, rotate_locations, scale_by, scale_factors, KSpaceLocations, ProtocolDescriptor,
    ReferenceProtocol, RotationMatrix,
};
use crate::nufft::{adjoint_impl, GriddingConfig, KSpaceSamples};
use crate::volume::{ComplexVolume, Mask, ScalarVolume, Volume};

const TWO_PI: f64 = 2.0 * PI;

/// Wraps a phase into `[-π, π)`.
pub fn wrap_phase(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return invalid(format!("cannot wrap non-finite phase {x}"));
    }
    Ok(wrap(x))
}

#[inline]
pub(crate) fn wrap(x: f64) -> f64 {
    let r = (x + PI).rem_euclid(TWO_PI) - PI;
    if r >= PI {
        r - TWO_PI
    } else {
        r
    }
}

/// Laplacian phase unwrapping with periodic boundaries.
///
/// Solves `∇²ψ = cos φ · ∇² sin φ − sin φ · ∇² cos φ` with the spectral
/// Laplacian `−|k|²`, diagonal in the FFT basis. The free constant is
/// chosen so that `ψ` agrees with the input modulo 2π on (circular)
/// average, then moved by the multiple of 2π that brings its mean closest
/// to the input mean.
pub fn laplacian_unwrap(wrapped: &ScalarVolume) -> Result<ScalarVolume> {
    let dims = wrapped.dims;
    if dims.iter().any(|&n| n < 4) {
        return invalid(format!("unwrapping needs at least 4 voxels per axis, got {dims:?}"));
    }
    if wrapped.data.iter().any(|v| !v.is_finite()) {
        return invalid("wrapped phase contains non-finite values");
    }
    let eig = laplacian_eigenvalues(dims);

    let mut sin: Vec<Complex64> = wrapped.data.iter().map(|p| Complex64::new(p.sin(), 0.0)).collect();
    let mut cos: Vec<Complex64> = wrapped.data.iter().map(|p| Complex64::new(p.cos(), 0.0)).collect();
    apply_spectral(&mut sin, dims, |k| eig[k]);
    apply_spectral(&mut cos, dims, |k| eig[k]);

    let mut rhs: Vec<Complex64> = wrapped
        .data
        .iter()
        .zip(sin.iter().zip(&cos))
        .map(|(p, (ls, lc))| Complex64::new(p.cos() * ls.re - p.sin() * lc.re, 0.0))
        .collect();
    apply_spectral(&mut rhs, dims, |k| if eig[k] == 0.0 { 0.0 } else { 1.0 / eig[k] });

    let mut psi: Vec<f64> = rhs.iter().map(|z| z.re).collect();
    let offset: Complex64 = wrapped
        .data
        .iter()
        .zip(&psi)
        .map(|(p, q)| Complex64::from_polar(1.0, p - q))
        .sum();
    let offset = if offset.norm() > 0.0 { offset.arg() } else { 0.0 };
    psi.iter_mut().for_each(|v| *v += offset);

    let n = psi.len() as f64;
    let mean_in = wrapped.data.iter().sum::<f64>() / n;
    let mean_out = psi.iter().sum::<f64>() / n;
    let turns = ((mean_in - mean_out) / TWO_PI).round();
    psi.iter_mut().for_each(|v| *v += turns * TWO_PI);

    Ok(Volume {
        dims,
        voxel_size: wrapped.voxel_size,
        echo_times: wrapped.echo_times.clone(),
        data: psi,
    })
}

/// Eigenvalues `−|k|²` of the spectral Laplacian, unshifted FFT order.
fn laplacian_eigenvalues(dims: [usize; 3]) -> Vec<f64> {
    let axis = |n: usize| -> Vec<f64> {
        (0..n).map(|k| -(TWO_PI * signed_index(k, n) / n as f64).powi(2)).collect()
    };
    let (ex, ey, ez) = (axis(dims[0]), axis(dims[1]), axis(dims[2]));
    let mut out = Vec::with_capacity(dims.iter().product());
    for z in &ez {
        for y in &ey {
            for x in &ex {
                out.push(x + y + z);
            }
        }
    }
    out
}

/// Multiplies the unshifted spectrum of `data` by `filter(index)` in place.
pub(crate) fn apply_spectral(data: &mut [Complex64], dims: [usize; 3], filter: impl Fn(usize) -> f64) {
    fft3(data, dims, Direction::Forward);
    let scale = 1.0 / data.len() as f64;
    data.iter_mut().enumerate().for_each(|(k, v)| *v *= filter(k) * scale);
    fft3(data, dims, Direction::Inverse);
}

/// Derived quantities for registering one protocol onto the reference grid.
#[derive(Debug, Clone)]
pub struct RegistrationPlan {
    pub source: ProtocolDescriptor,
    pub reference: ReferenceProtocol,
    pub scale: [f64; 3],
    pub rotation: RotationMatrix,
    /// Per source-lattice sample: whether it lands inside the reference band.
    pub retained: Vec<bool>,
    /// Reference-frame locations of the retained samples, in lattice order.
    pub locations: KSpaceLocations,
    /// Constant density weight applied to every retained sample.
    pub weight: f64,
}

impl RegistrationPlan {
    pub fn new(source: &ProtocolDescriptor, reference: &ReferenceProtocol) -> Result<Self> {
        let scale = scale_factors(source.voxel_size, reference.iso_voxel_mm)?;
        let lattice = cartesian_kspace_lattice(source.dims)?;
        let moved = rotate_locations(&scale_by(&lattice, scale), &source.rotation);
        let retained: Vec<bool> = moved.iter().map(|l| l.iter().all(|v| (-PI..PI).contains(v))).collect();
        let locations: KSpaceLocations = moved
            .iter()
            .zip(&retained)
            .filter(|(_, &keep)| keep)
            .map(|(l, _)| *l)
            .collect();
        if locations.is_empty() {
            return Err(Error::EmptyCoverage);
        }
        // Rotation preserves density and diag(s) rescales it uniformly, so a
        // single weight suffices. With samples that are acquisition-grid DFTs
        // and a type-1 normalized by the reference size, that weight is the
        // ratio of matrix sizes.
        let n_ref: usize = reference.dims().iter().product();
        let weight = n_ref as f64 / source.len() as f64;
        Ok(RegistrationPlan {
            source: source.clone(),
            reference: *reference,
            scale,
            rotation: source.rotation,
            retained,
            locations,
            weight,
        })
    }

    pub fn retained_count(&self) -> usize {
        self.locations.len()
    }

    /// Grids one echo's lattice-ordered samples onto the reference matrix.
    pub fn apply(&self, values: &[Complex64], cfg: &GriddingConfig) -> Result<ComplexVolume> {
        if values.len() != self.retained.len() {
            return invalid(format!(
                "expected {} samples on the source lattice, got {}",
                self.retained.len(),
                values.len()
            ));
        }
        let dims = self.reference.dims();
        let factor = self.weight / dims.iter().product::<usize>() as f64;
        let kept: Vec<Complex64> = values
            .iter()
            .zip(&self.retained)
            .filter(|(_, &keep)| keep)
            .map(|(v, _)| v * factor)
            .collect();
        let mut out = adjoint_impl(&self.locations, &kept, dims, cfg, true)?;
        out.voxel_size = [self.reference.iso_voxel_mm; 3];
        out.echo_times = self.source.echo_times.clone();
        Ok(out)
    }
}

/// Registers every echo with one shared location transform.
///
/// Sample values must be ordered on the protocol's Cartesian lattice
/// (x-fastest), as produced by an acquisition on that protocol.
pub fn kspace_register(
    acquired: &[KSpaceSamples],
    protocol: &ProtocolDescriptor,
    reference: &ReferenceProtocol,
    cfg: &GriddingConfig,
) -> Result<Vec<ComplexVolume>> {
    let plan = RegistrationPlan::new(protocol, reference)?;
    acquired
        .iter()
        .enumerate()
        .map(|(echo, s)| {
            if s.values.len() != protocol.len() {
                return invalid(format!(
                    "echo {echo}: {} samples for a {:?} lattice",
                    s.values.len(),
                    protocol.dims
                ));
            }
            let mut v = plan.apply(&s.values, cfg)?;
            if let Some(&te) = protocol.echo_times.get(echo) {
                v.echo_times = vec![te];
            }
            Ok(v)
        })
        .collect()
}

/// Plain reconstruction on the acquisition grid: centered inverse FFT of
/// lattice-ordered samples.
pub fn inverse_fft_reconstruction(samples: &KSpaceSamples, protocol: &ProtocolDescriptor) -> Result<ComplexVolume> {
    if samples.values.len() != protocol.len() {
        return invalid(format!(
            "{} samples for a {:?} lattice",
            samples.values.len(),
            protocol.dims
        ));
    }
    let data = crate::fft::centered_ifft3(&samples.values, protocol.dims);
    let mut v = ComplexVolume::new(protocol.dims, protocol.voxel_size, data)?;
    v.echo_times = protocol.echo_times.clone();
    Ok(v)
}

/// Affine map from a reference voxel index to a continuous source voxel
/// index: `n = diag(s) · Rᵀ · (m − c_ref) + c_src`.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceToSource {
    matrix: [[f64; 3]; 3],
    ref_center: [f64; 3],
    src_center: [f64; 3],
}

impl ReferenceToSource {
    pub fn new(source: &ProtocolDescriptor, reference: &ReferenceProtocol) -> Result<Self> {
        let s = scale_factors(source.voxel_size, reference.iso_voxel_mm)?;
        let rt = source.rotation.transpose();
        let mut matrix = [[0.0; 3]; 3];
        for (i, row) in matrix.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = s[i] * rt.rows()[i][j];
            }
        }
        Ok(ReferenceToSource {
            matrix,
            ref_center: reference.dims().map(|n| (n / 2) as f64),
            src_center: source.dims.map(|n| (n / 2) as f64),
        })
    }

    pub fn map(&self, idx: [usize; 3]) -> [f64; 3] {
        let m = [0, 1, 2].map(|a| idx[a] as f64 - self.ref_center[a]);
        [0, 1, 2].map(|a| {
            self.matrix[a][0] * m[0] + self.matrix[a][1] * m[1] + self.matrix[a][2] * m[2] + self.src_center[a]
        })
    }
}

/// Trilinear interpolation at a continuous voxel index. `None` outside the
/// volume (with a 1e-9 voxel tolerance at the faces).
pub fn trilinear(volume: &ScalarVolume, at: [f64; 3]) -> Option<f64> {
    const EDGE: f64 = 1e-9;
    let mut base = [0usize; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let n = volume.dims[a];
        let p = at[a];
        if !(p >= -EDGE && p <= (n - 1) as f64 + EDGE) {
            return None;
        }
        if n == 1 {
            continue;
        }
        let p = p.clamp(0.0, (n - 1) as f64);
        let i0 = (p.floor() as usize).min(n - 2);
        base[a] = i0;
        frac[a] = p - i0 as f64;
    }
    let step = |a: usize| usize::from(volume.dims[a] > 1);
    let mut acc = 0.0;
    for dz in 0..=step(2) {
        let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
        if wz == 0.0 {
            continue;
        }
        for dy in 0..=step(1) {
            let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
            if wy == 0.0 {
                continue;
            }
            for dx in 0..=step(0) {
                let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                if wx == 0.0 {
                    continue;
                }
                acc += wx * wy * wz * volume.get(base[0] + dx, base[1] + dy, base[2] + dz);
            }
        }
    }
    Some(acc)
}

/// Trilinearly resamples a source-grid volume onto the reference grid.
/// Voxels mapping outside the source are zero and cleared in the mask.
pub fn resample_to_reference(
    volume: &ScalarVolume,
    source: &ProtocolDescriptor,
    reference: &ReferenceProtocol,
) -> Result<(ScalarVolume, Mask)> {
    if volume.dims != source.dims {
        return invalid(format!("volume dims {:?} differ from protocol dims {:?}", volume.dims, source.dims));
    }
    let map = ReferenceToSource::new(source, reference)?;
    let dims = reference.dims();
    let mut inside = Mask::empty(dims);
    let mut out = ScalarVolume::zeros(dims, [reference.iso_voxel_mm; 3]);
    out.echo_times = volume.echo_times.clone();
    let mut t = 0;
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                if let Some(v) = trilinear(volume, map.map([i, j, k])) {
                    out.data[t] = v;
                    inside.data[t] = true;
                }
                t += 1;
            }
        }
    }
    Ok((out, inside))
}

/// Output of the image-space baseline.
#[derive(Debug, Clone)]
pub struct ImageRegistered {
    pub phase: Vec<ScalarVolume>,
    pub magnitude: Vec<ScalarVolume>,
    /// Reference voxels that map inside the source volume.
    pub inside: Mask,
}

/// Image-space baseline: trilinear resampling of unwrapped phase and
/// magnitude onto the reference grid under the inverse affine map.
pub fn image_register_baseline(
    unwrapped_phase: &[ScalarVolume],
    magnitude: &[ScalarVolume],
    protocol: &ProtocolDescriptor,
    reference: &ReferenceProtocol,
) -> Result<ImageRegistered> {
    if unwrapped_phase.len() != magnitude.len() {
        return invalid(format!(
            "{} phase volumes but {} magnitude volumes",
            unwrapped_phase.len(),
            magnitude.len()
        ));
    }
    let mut phase = Vec::with_capacity(unwrapped_phase.len());
    let mut mags = Vec::with_capacity(magnitude.len());
    let mut inside = Mask::full(reference.dims());
    for (p, m) in unwrapped_phase.iter().zip(magnitude) {
        if p.dims != m.dims {
            return invalid(format!("phase dims {:?} differ from magnitude dims {:?}", p.dims, m.dims));
        }
        let (rp, mask) = resample_to_reference(p, protocol, reference)?;
        let (rm, _) = resample_to_reference(m, protocol, reference)?;
        inside = inside.and(&mask)?;
        phase.push(rp);
        mags.push(rm);
    }
    Ok(ImageRegistered { phase, magnitude: mags, inside })
}

/// Spatial frequency (cycles/mm) of each unshifted FFT bin, per axis.
pub(crate) fn fft_frequencies(dims: [usize; 3], voxel_size: [f64; 3]) -> [Vec<f64>; 3] {
    [0, 1, 2].map(|a| {
        (0..dims[a])
            .map(|k| signed_index(k, dims[a]) / (dims[a] as f64 * voxel_size[a]))
            .collect()
    })
}
