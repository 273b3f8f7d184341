//! Synthetic ground truth: phantoms, the dipole field model, multi-echo
//! signals and protocol-accurate k-space acquisition.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{
    cartesian_kspace_lattice, rotate_locations, scale_by, scale_factors, ProtocolDescriptor, ReferenceProtocol,
};
use crate::nufft::{GriddingConfig, KSpaceSamples, Type2Plan};
use crate::registration::{apply_spectral, fft_frequencies};
use crate::volume::{ComplexVolume, Mask, ScalarVolume, Volume};

/// Proton gyromagnetic ratio over 2π, Hz/T.
pub const GAMMA_BAR_HZ_PER_T: f64 = 42.576e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicsConstants {
    pub gamma_bar_hz_per_t: f64,
    pub field_strength_t: f64,
}

impl PhysicsConstants {
    pub fn new(field_strength_t: f64) -> Result<Self> {
        if !(field_strength_t.is_finite() && field_strength_t > 0.0) {
            return invalid(format!("field strength must be positive, got {field_strength_t}"));
        }
        Ok(PhysicsConstants { gamma_bar_hz_per_t: GAMMA_BAR_HZ_PER_T, field_strength_t })
    }

    /// Phase accrued per ppm of field per second of echo time (rad).
    pub fn radians_per_ppm_second(&self) -> f64 {
        2.0 * PI * self.gamma_bar_hz_per_t * self.field_strength_t * 1e-6
    }
}

/// Geometric primitive in voxel coordinates of the phantom grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase", deny_unknown_fields)]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
        chi: f64,
        magnitude: f64,
    },
    Ellipsoid {
        center: [f64; 3],
        radii: [f64; 3],
        chi: f64,
        magnitude: f64,
    },
    /// Finite cylinder around `axis` through `center`.
    Cylinder {
        center: [f64; 3],
        radius: f64,
        half_length: f64,
        #[serde(default = "z_axis")]
        axis: [f64; 3],
        chi: f64,
        magnitude: f64,
    },
}

fn z_axis() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

impl Primitive {
    pub fn chi(&self) -> f64 {
        match *self {
            Primitive::Sphere { chi, .. } | Primitive::Ellipsoid { chi, .. } | Primitive::Cylinder { chi, .. } => chi,
        }
    }

    pub fn magnitude(&self) -> f64 {
        match *self {
            Primitive::Sphere { magnitude, .. }
            | Primitive::Ellipsoid { magnitude, .. }
            | Primitive::Cylinder { magnitude, .. } => magnitude,
        }
    }

    fn center(&self) -> [f64; 3] {
        match *self {
            Primitive::Sphere { center, .. }
            | Primitive::Ellipsoid { center, .. }
            | Primitive::Cylinder { center, .. } => center,
        }
    }

    /// Radius of a bounding sphere about the center.
    fn extent(&self) -> f64 {
        match *self {
            Primitive::Sphere { radius, .. } => radius,
            Primitive::Ellipsoid { radii, .. } => radii.iter().cloned().fold(0.0, f64::max),
            Primitive::Cylinder { radius, half_length, .. } => radius.hypot(half_length),
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        let ok = match self {
            Primitive::Sphere { radius, .. } => positive(*radius),
            Primitive::Ellipsoid { radii, .. } => radii.iter().all(|r| positive(*r)),
            Primitive::Cylinder { radius, half_length, axis, .. } => {
                positive(*radius) && positive(*half_length) && axis.iter().map(|a| a * a).sum::<f64>() > 0.0
            }
        };
        if !ok {
            return invalid(format!("primitive has non-positive size: {self:?}"));
        }
        if !(self.chi().is_finite() && self.magnitude().is_finite() && self.magnitude() >= 0.0) {
            return invalid(format!("primitive has invalid chi or magnitude: {self:?}"));
        }
        Ok(())
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let c = self.center();
        let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
        match *self {
            Primitive::Sphere { radius, .. } => d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= radius * radius,
            Primitive::Ellipsoid { radii, .. } => {
                (0..3).map(|a| (d[a] / radii[a]).powi(2)).sum::<f64>() <= 1.0
            }
            Primitive::Cylinder { radius, half_length, axis, .. } => {
                let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
                let along = (d[0] * axis[0] + d[1] * axis[1] + d[2] * axis[2]) / norm;
                let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2] - along * along;
                along.abs() <= half_length && r2 <= radius * radius
            }
        }
    }
}

/// Parametric susceptibility phantom. Later primitives override earlier ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub primitives: Vec<Primitive>,
    #[serde(default)]
    pub background_chi: f64,
    #[serde(default)]
    pub background_magnitude: f64,
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub chi: ScalarVolume,
    pub magnitude: ScalarVolume,
    pub mask: Mask,
    pub warnings: Vec<String>,
}

/// Voxelizes `spec` on a grid of `dims`.
pub fn build_phantom(spec: &PhantomSpec, dims: [usize; 3], voxel_size: [f64; 3]) -> Result<Phantom> {
    build_phantom_upsampled(spec, dims, voxel_size, 1.0)
}

/// Voxelizes `spec` on a grid `upsample` times finer than the one its
/// coordinates refer to: voxel `i` of the fine grid sits at `i / upsample`.
pub fn build_phantom_upsampled(
    spec: &PhantomSpec,
    dims: [usize; 3],
    voxel_size: [f64; 3],
    upsample: f64,
) -> Result<Phantom> {
    if !(upsample.is_finite() && upsample > 0.0) {
        return invalid(format!("upsampling factor must be positive, got {upsample}"));
    }
    if dims.iter().any(|&n| n == 0) {
        return invalid(format!("phantom dims must be positive, got {dims:?}"));
    }
    if dims.iter().any(|&n| n < 16) {
        log::warn!("phantom grid {dims:?} is smaller than 16 voxels along an axis");
    }
    for p in &spec.primitives {
        p.validate()?;
    }
    let mut warnings = Vec::new();
    if spec.primitives.is_empty() {
        warnings.push("phantom has no primitives; susceptibility map is uniform".to_string());
    }
    let extent = dims.map(|n| (n - 1) as f64 / upsample);
    for (idx, p) in spec.primitives.iter().enumerate() {
        let c = p.center();
        let r = p.extent();
        let outside = (0..3).any(|a| c[a] + r < 0.0 || c[a] - r > extent[a]);
        if outside {
            warnings.push(format!("primitive {idx} lies entirely outside the grid"));
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }

    let n: usize = dims.iter().product();
    let mut chi = vec![spec.background_chi; n];
    let mut magnitude = vec![spec.background_magnitude; n];
    let mut mask = vec![false; n];
    let mut t = 0;
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let p = [i as f64 / upsample, j as f64 / upsample, k as f64 / upsample];
                for prim in &spec.primitives {
                    if prim.contains(p) {
                        chi[t] = prim.chi();
                        magnitude[t] = prim.magnitude();
                        mask[t] = true;
                    }
                }
                t += 1;
            }
        }
    }
    Ok(Phantom {
        chi: Volume { dims, voxel_size, echo_times: Vec::new(), data: chi },
        magnitude: Volume { dims, voxel_size, echo_times: Vec::new(), data: magnitude },
        mask: Mask { dims, data: mask },
        warnings,
    })
}

/// Unit dipole response `D(k) = 1/3 − (k̂·b̂₀)²` in unshifted FFT order,
/// with `D(0) = 0`. On even axes the Nyquist bin stands for both `±N/2`, so
/// `D` is averaged over both signs there and the kernel stays Hermitian.
pub fn dipole_kernel(dims: [usize; 3], voxel_size: [f64; 3], b0: [f64; 3]) -> Result<ScalarVolume> {
    let norm = (b0[0] * b0[0] + b0[1] * b0[1] + b0[2] * b0[2]).sqrt();
    if !((norm - 1.0).abs() <= 1e-9) {
        return invalid(format!("B0 direction must be a unit vector, |b0| = {norm}"));
    }
    if voxel_size.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return invalid(format!("voxel sizes must be positive, got {voxel_size:?}"));
    }
    let freqs = fft_frequencies(dims, voxel_size);
    let nyquist = |a: usize, k: usize| dims[a] % 2 == 0 && k == dims[a] / 2;
    let unit = |k: [f64; 3]| -> f64 {
        let k2 = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
        if k2 == 0.0 {
            return 0.0;
        }
        let kb = k[0] * b0[0] + k[1] * b0[1] + k[2] * b0[2];
        1.0 / 3.0 - kb * kb / k2
    };
    let mut data = Vec::with_capacity(dims.iter().product());
    for iz in 0..dims[2] {
        for iy in 0..dims[1] {
            for ix in 0..dims[0] {
                let idx = [ix, iy, iz];
                let k = [freqs[0][ix], freqs[1][iy], freqs[2][iz]];
                let flips: Vec<usize> = (0..3).filter(|&a| nyquist(a, idx[a])).collect();
                if flips.is_empty() {
                    data.push(unit(k));
                    continue;
                }
                let variants = 1usize << flips.len();
                let mut acc = 0.0;
                for bits in 0..variants {
                    let mut kk = k;
                    for (b, &a) in flips.iter().enumerate() {
                        if bits >> b & 1 == 1 {
                            kk[a] = -kk[a];
                        }
                    }
                    acc += unit(kk);
                }
                data.push(acc / variants as f64);
            }
        }
    }
    Ok(Volume { dims, voxel_size, echo_times: Vec::new(), data })
}

/// Field perturbation (ppm) induced by `chi` (ppm): `F⁻¹[D · F[χ]]`.
pub fn field_from_chi(chi: &ScalarVolume, b0: [f64; 3]) -> Result<ScalarVolume> {
    if chi.data.iter().any(|v| !v.is_finite()) {
        return invalid("susceptibility map contains non-finite values");
    }
    let kernel = dipole_kernel(chi.dims, chi.voxel_size, b0)?;
    let mut work: Vec<Complex64> = chi.data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    apply_spectral(&mut work, chi.dims, |k| kernel.data[k]);
    let peak = work.iter().map(|z| z.re.abs()).fold(0.0, f64::max);
    let residue = work.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    if residue > 1e-10 * peak.max(f64::MIN_POSITIVE) {
        log::debug!("field imaginary residue {residue:e} relative to peak {peak:e}");
    }
    Ok(Volume {
        dims: chi.dims,
        voxel_size: chi.voxel_size,
        echo_times: Vec::new(),
        data: work.iter().map(|z| z.re).collect(),
    })
}

/// `magnitude · exp(i · φ_j)` with `φ_j = 2π γ̄ B0 · field · 1e-6 · TE_j`.
pub fn synth_echoes(
    field_ppm: &ScalarVolume,
    magnitude: &ScalarVolume,
    echo_times: &[f64],
    constants: &PhysicsConstants,
) -> Result<Vec<ComplexVolume>> {
    if field_ppm.dims != magnitude.dims {
        return invalid("field and magnitude dims differ");
    }
    if echo_times.iter().any(|t| !(t.is_finite() && *t > 0.0)) || echo_times.windows(2).any(|w| w[1] <= w[0]) {
        return invalid("echo times must be positive and ascending");
    }
    let rate = constants.radians_per_ppm_second();
    Ok(echo_times
        .iter()
        .map(|&te| Volume {
            dims: field_ppm.dims,
            voxel_size: field_ppm.voxel_size,
            echo_times: vec![te],
            data: field_ppm
                .data
                .iter()
                .zip(&magnitude.data)
                .map(|(&f, &m)| Complex64::from_polar(m, rate * f * te))
                .collect(),
        })
        .collect())
}

/// Simulates acquisitions of a fixed high-resolution signal under
/// different protocols. The oversampled spectrum of each echo is computed
/// once and reused.
///
/// Noise is circular complex Gaussian with `E|n|² = σ²`: a ChaCha8 stream
/// seeded with `seed_from_u64(seed)`, stream id = echo index, drawing
/// `(re, im)` standard normals per sample in lattice order, each scaled by
/// `σ/√2`. Output therefore depends only on `(seed, echo, sample index)`.
#[derive(Debug, Clone)]
pub struct AcquisitionSimulator {
    plans: Vec<Type2Plan>,
    voxel_mm: f64,
    echo_times: Vec<f64>,
}

impl AcquisitionSimulator {
    pub fn new(signal: &[ComplexVolume], cfg: &GriddingConfig) -> Result<Self> {
        let first = signal.first().ok_or_else(|| crate::Error::InvalidArgument("no echoes to simulate".into()))?;
        let v = first.voxel_size;
        if (v[0] - v[1]).abs() > 1e-12 * v[0] || (v[0] - v[2]).abs() > 1e-12 * v[0] {
            return invalid(format!("master grid must be isotropic, got voxel {v:?}"));
        }
        if signal.iter().any(|s| s.dims != first.dims || s.voxel_size != v) {
            return invalid("all echoes must share the master grid");
        }
        let plans = signal.iter().map(|s| Type2Plan::new(s, cfg)).collect::<Result<Vec<_>>>()?;
        let echo_times = signal.iter().filter_map(|s| s.echo_times.first().copied()).collect();
        Ok(AcquisitionSimulator { plans, voxel_mm: v[0], echo_times })
    }

    pub fn echo_count(&self) -> usize {
        self.plans.len()
    }

    /// k-space samples on the protocol's lattice, per echo.
    pub fn acquire(
        &self,
        protocol: &ProtocolDescriptor,
        reference: &ReferenceProtocol,
        noise_sigma: f64,
        seed: u64,
    ) -> Result<Vec<KSpaceSamples>> {
        if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
            return invalid(format!("noise sigma must be non-negative, got {noise_sigma}"));
        }
        let lattice = cartesian_kspace_lattice(protocol.dims)?;
        let s = scale_factors(protocol.voxel_size, reference.iso_voxel_mm)?;
        // physical frequency of each acquired sample, in master-voxel units
        let to_master = self.voxel_mm / reference.iso_voxel_mm;
        let master = scale_by(&rotate_locations(&scale_by(&lattice, s), &protocol.rotation), [to_master; 3]);
        let volume_ratio = self.voxel_mm.powi(3) / protocol.voxel_size.iter().product::<f64>();
        let component_sigma = noise_sigma / 2f64.sqrt();

        let mut out = Vec::with_capacity(self.plans.len());
        for (echo, plan) in self.plans.iter().enumerate() {
            let mut values = plan.sample(&master)?;
            values.iter_mut().for_each(|v| *v *= volume_ratio);
            if noise_sigma > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(echo as u64);
                for v in values.iter_mut() {
                    let re: f64 = StandardNormal.sample(&mut rng);
                    let im: f64 = StandardNormal.sample(&mut rng);
                    *v += Complex64::new(re * component_sigma, im * component_sigma);
                }
            }
            out.push(KSpaceSamples { locations: lattice.clone(), values });
        }
        Ok(out)
    }

    pub fn echo_times(&self) -> &[f64] {
        &self.echo_times
    }
}

/// One-shot form of [`AcquisitionSimulator::acquire`].
pub fn simulate_acquisition(
    signal: &[ComplexVolume],
    protocol: &ProtocolDescriptor,
    reference: &ReferenceProtocol,
    noise_sigma: f64,
    seed: u64,
    cfg: &GriddingConfig,
) -> Result<Vec<KSpaceSamples>> {
    AcquisitionSimulator::new(signal, cfg)?.acquire(protocol, reference, noise_sigma, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fft::centered_fft3;
    use crate::geometry::rotation_from_euler;

    fn sphere(center: [f64; 3], radius: f64, chi: f64) -> Primitive {
        Primitive::Sphere { center, radius, chi, magnitude: 1.0 }
    }

    #[test]
    fn empty_spec_gives_zero_chi_and_warning() {
        let spec = PhantomSpec { primitives: vec![], background_chi: 0.0, background_magnitude: 1.0 };
        let p = build_phantom(&spec, [16; 3], [1.0; 3]).unwrap();
        assert!(p.chi.data.iter().all(|&v| v == 0.0));
        assert_eq!(p.mask.count(), 0);
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn sphere_voxel_count_matches_brute_force() {
        let spec = PhantomSpec { primitives: vec![sphere([16.0; 3], 5.0, 0.1)], background_chi: 0.0, background_magnitude: 0.0 };
        let p = build_phantom(&spec, [32; 3], [1.0; 3]).unwrap();
        let mut brute = 0;
        for z in 0..32i64 {
            for y in 0..32i64 {
                for x in 0..32i64 {
                    if (x - 16).pow(2) + (y - 16).pow(2) + (z - 16).pow(2) <= 25 {
                        brute += 1;
                    }
                }
            }
        }
        assert_eq!(p.mask.count(), brute);
        for (c, m) in p.chi.data.iter().zip(&p.mask.data) {
            assert_eq!(*c, if *m { 0.1 } else { 0.0 });
        }
    }

    #[test]
    fn later_primitives_override() {
        let spec = PhantomSpec {
            primitives: vec![sphere([8.0; 3], 4.0, 0.1), sphere([10.0, 8.0, 8.0], 3.0, -0.2)],
            background_chi: 0.0,
            background_magnitude: 0.0,
        };
        let p = build_phantom(&spec, [16; 3], [1.0; 3]).unwrap();
        let overlap = p.chi.index(9, 8, 8);
        assert_eq!(p.chi.data[overlap], -0.2);
        assert_eq!(p.chi.data[p.chi.index(5, 8, 8)], 0.1);
    }

    #[test]
    fn outside_primitive_warns_not_errors() {
        let spec = PhantomSpec { primitives: vec![sphere([100.0; 3], 2.0, 0.1)], background_chi: 0.0, background_magnitude: 0.0 };
        let p = build_phantom(&spec, [16; 3], [1.0; 3]).unwrap();
        assert_eq!(p.mask.count(), 0);
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn upsampled_grid_keeps_geometry() {
        let spec = PhantomSpec { primitives: vec![sphere([8.0; 3], 4.0, 0.1)], background_chi: 0.0, background_magnitude: 0.0 };
        let coarse = build_phantom(&spec, [16; 3], [1.0; 3]).unwrap();
        let fine = build_phantom_upsampled(&spec, [32; 3], [0.5; 3], 2.0).unwrap();
        let ratio = fine.mask.count() as f64 / coarse.mask.count() as f64;
        assert!((ratio - 8.0).abs() < 0.8, "{ratio}");
        assert!(fine.mask.data[fine.mask.dims[0] * (16 + 32 * 16) + 16]);
    }

    #[test]
    fn cylinder_and_ellipsoid_membership() {
        let cyl = Primitive::Cylinder { center: [0.0; 3], radius: 1.0, half_length: 3.0, axis: [1.0, 0.0, 0.0], chi: 0.0, magnitude: 1.0 };
        assert!(cyl.contains([2.9, 0.5, 0.5]));
        assert!(!cyl.contains([3.1, 0.0, 0.0]));
        assert!(!cyl.contains([0.0, 1.0, 0.5]));
        let ell = Primitive::Ellipsoid { center: [0.0; 3], radii: [4.0, 2.0, 1.0], chi: 0.0, magnitude: 1.0 };
        assert!(ell.contains([3.9, 0.0, 0.0]));
        assert!(!ell.contains([0.0, 2.1, 0.0]));
    }

    #[test]
    fn kernel_special_directions() {
        let dims = [8, 8, 8];
        let d = dipole_kernel(dims, [1.0; 3], [0.0, 0.0, 1.0]).unwrap();
        assert_eq!(d.data[0], 0.0);
        // k along z (bin 1 of z)
        assert!((d.data[d.index(0, 0, 1)] + 2.0 / 3.0).abs() < 1e-15);
        // k along x, perpendicular to b0
        assert!((d.data[d.index(1, 0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        // magic angle: k = (1,1,1)/√3 against b0 = z
        assert!(d.data[d.index(1, 1, 1)].abs() < 1e-15);
        assert!(d.data.iter().all(|&v| (-2.0 / 3.0 - 1e-15..=1.0 / 3.0 + 1e-15).contains(&v)));
        assert!(dipole_kernel(dims, [1.0; 3], [0.0, 0.0, 2.0]).is_err());
    }

    #[test]
    fn kernel_is_even_under_index_negation() {
        let dims = [8, 6, 5];
        let d = dipole_kernel(dims, [1.0, 1.2, 0.9], [0.36, 0.48, 0.8]).unwrap();
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let neg = d.index((dims[0] - i) % dims[0], (dims[1] - j) % dims[1], (dims[2] - k) % dims[2]);
                    assert!((d.data[d.index(i, j, k)] - d.data[neg]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn kernel_uses_voxel_sizes() {
        // with 2 mm slices, bin (1,0,1) has k = (1/8, 0, 1/16) per mm
        let d = dipole_kernel([8, 8, 8], [1.0, 1.0, 2.0], [0.0, 0.0, 1.0]).unwrap();
        let (kx, kz) = (1.0f64 / 8.0, 1.0f64 / 16.0);
        let expect = 1.0 / 3.0 - kz * kz / (kx * kx + kz * kz);
        assert!((d.data[d.index(1, 0, 1)] - expect).abs() < 1e-15);
    }

    #[test]
    fn uniform_chi_has_no_field() {
        let chi = ScalarVolume::from_fn([16; 3], [1.0; 3], |_, _, _| 0.3);
        let f = field_from_chi(&chi, [0.0, 0.0, 1.0]).unwrap();
        assert!(f.data.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn field_is_linear_and_dc_free() {
        let spec = PhantomSpec { primitives: vec![sphere([8.0; 3], 4.0, 0.2)], background_chi: 0.0, background_magnitude: 0.0 };
        let p = build_phantom(&spec, [16; 3], [1.0; 3]).unwrap();
        let b0 = [0.0, 0.6, 0.8];
        let f1 = field_from_chi(&p.chi, b0).unwrap();
        let f2 = field_from_chi(&p.chi.map(|v| 2.0 * v), b0).unwrap();
        for (a, b) in f1.data.iter().zip(&f2.data) {
            assert!((2.0 * a - b).abs() <= 1e-15 * (1.0 + b.abs()));
        }
        let mean = f1.data.iter().sum::<f64>() / f1.len() as f64;
        assert!(mean.abs() <= 1e-10);
    }

    /// Periodic spatial-domain convolution with the discretized unit dipole,
    /// the dipole being the inverse DFT of the k-space kernel.
    #[test]
    fn field_matches_direct_convolution() {
        let n = 32;
        let spec = PhantomSpec { primitives: vec![sphere([16.0; 3], 4.0, 0.1)], background_chi: 0.0, background_magnitude: 0.0 };
        let p = build_phantom(&spec, [n; 3], [1.0; 3]).unwrap();
        let fast = field_from_chi(&p.chi, [0.0, 0.0, 1.0]).unwrap();

        // dipole response computed by direct summation of cos terms (real, even kernel)
        let d = dipole_kernel([n; 3], [1.0; 3], [0.0, 0.0, 1.0]).unwrap();
        let nn = n as f64;
        let mut cos_tab = vec![0.0; n * n];
        for k in 0..n {
            for x in 0..n {
                cos_tab[k * n + x] = (2.0 * PI * (k * x % n) as f64 / nn).cos();
            }
        }
        // separable partial sums keep this O(N⁴) instead of O(N⁶)
        let mut stage1 = vec![0.0; n * n * n];
        for kz in 0..n {
            for ky in 0..n {
                for x in 0..n {
                    let mut acc = 0.0;
                    for kx in 0..n {
                        acc += d.data[kx + n * (ky + n * kz)] * cos_tab[kx * n + x];
                    }
                    stage1[x + n * (ky + n * kz)] = acc;
                }
            }
        }
        let mut stage2 = vec![0.0; n * n * n];
        for kz in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let mut acc = 0.0;
                    for ky in 0..n {
                        acc += stage1[x + n * (ky + n * kz)] * cos_tab[ky * n + y];
                    }
                    stage2[x + n * (y + n * kz)] = acc;
                }
            }
        }
        let mut dipole = vec![0.0; n * n * n];
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let mut acc = 0.0;
                    for kz in 0..n {
                        acc += stage2[x + n * (y + n * kz)] * cos_tab[kz * n + z];
                    }
                    dipole[x + n * (y + n * z)] = acc / (nn * nn * nn);
                }
            }
        }
        // direct periodic convolution over the support of χ only
        let support: Vec<(usize, usize, usize, f64)> = (0..n * n * n)
            .filter(|&t| p.chi.data[t] != 0.0)
            .map(|t| (t % n, (t / n) % n, t / (n * n), p.chi.data[t]))
            .collect();
        let mut num = 0.0;
        let mut den = 0.0;
        for z in (0..n).step_by(3) {
            for y in (0..n).step_by(3) {
                for x in 0..n {
                    let mut acc = 0.0;
                    for &(sx, sy, sz, c) in &support {
                        let dx = (x + n - sx) % n;
                        let dy = (y + n - sy) % n;
                        let dz = (z + n - sz) % n;
                        acc += c * dipole[dx + n * (dy + n * dz)];
                    }
                    let f = fast.data[x + n * (y + n * z)];
                    num += (acc - f).powi(2);
                    den += acc * acc;
                }
            }
        }
        let rel = (num / den).sqrt();
        assert!(rel <= 2e-2, "relative error {rel:e}");
    }

    #[test]
    fn echo_phases() {
        let c = PhysicsConstants::new(3.0).unwrap();
        let field = ScalarVolume::from_fn([2, 2, 2], [1.0; 3], |i, _, _| i as f64);
        let mag = ScalarVolume::from_fn([2, 2, 2], [1.0; 3], |_, _, _| 2.0);
        let tes = [7.94e-3, 15.94e-3, 23.94e-3];
        let echoes = synth_echoes(&field, &mag, &tes, &c).unwrap();
        assert_eq!(echoes[0].data[0], Complex64::from_polar(2.0, 0.0));
        let expect = 2.0 * PI * 42.576e6 * 3.0 * 1e-6 * 7.94e-3;
        assert!((expect - 6.372).abs() < 1e-3);
        let phi0 = echoes[0].data[1];
        assert!((phi0 - Complex64::from_polar(2.0, expect)).norm() < 1e-12);
        for (e, te) in echoes.iter().zip(tes) {
            let rate = c.radians_per_ppm_second() * te;
            assert!((e.data[1] - Complex64::from_polar(2.0, rate)).norm() < 1e-12);
        }
        assert!(synth_echoes(&field, &mag, &[0.02, 0.01], &c).is_err());
    }

    fn blob(n: usize, voxel: f64) -> ComplexVolume {
        let c = (n / 2) as f64;
        let mut v = ComplexVolume::from_fn([n; 3], [voxel; 3], |i, j, k| {
            let r2 = (i as f64 - c).powi(2) + (j as f64 - c - 1.0).powi(2) + (k as f64 - c).powi(2);
            Complex64::new((-r2 / 8.0).exp(), 0.0)
        });
        v.echo_times = vec![0.01];
        v
    }

    #[test]
    fn reference_acquisition_equals_centered_fft() {
        let n = 12;
        let reference = ReferenceProtocol::new(1.0, n).unwrap();
        let proto = ProtocolDescriptor::straight(&reference, vec![0.01], 3.0).unwrap();
        let signal = blob(n, 1.0);
        let s = simulate_acquisition(&[signal.clone()], &proto, &reference, 0.0, 1, &GriddingConfig::default()).unwrap();
        let oracle = centered_fft3(&signal.data, [n; 3]);
        let num: f64 = s[0].values.iter().zip(&oracle).map(|(a, b)| (a - b).norm_sqr()).sum();
        let den: f64 = oracle.iter().map(|b| b.norm_sqr()).sum();
        let e = (num / den).sqrt();
        assert!(e <= 1e-5, "{e:e}");
    }

    #[test]
    fn seeded_noise_is_reproducible_and_calibrated() {
        let n = 16;
        let reference = ReferenceProtocol::new(1.0, n).unwrap();
        let proto = ProtocolDescriptor::straight(&reference, vec![0.01], 3.0).unwrap();
        let sim = AcquisitionSimulator::new(&[blob(n, 1.0)], &GriddingConfig::default()).unwrap();
        let a = sim.acquire(&proto, &reference, 0.5, 7).unwrap();
        let b = sim.acquire(&proto, &reference, 0.5, 7).unwrap();
        assert_eq!(a, b);
        let c = sim.acquire(&proto, &reference, 0.5, 8).unwrap();
        let msd = a[0].values.iter().zip(&c[0].values).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>()
            / a[0].len() as f64;
        let expect = 0.5 * 2f64.sqrt();
        assert!((msd.sqrt() - expect).abs() <= 0.05 * expect, "{} vs {expect}", msd.sqrt());
    }

    #[test]
    fn real_master_gives_hermitian_samples() {
        let n = 16;
        let reference = ReferenceProtocol::new(1.0, n / 2).unwrap();
        let r = rotation_from_euler(20.0, 10.0, 0.0).unwrap();
        let proto = ProtocolDescriptor::new(r, [1.0, 1.0, 2.0], [8, 8, 4], 8.0, vec![0.01], 3.0).unwrap();
        let sim = AcquisitionSimulator::new(&[blob(n, 0.5)], &GriddingConfig::default()).unwrap();
        let s = &sim.acquire(&proto, &reference, 0.0, 0).unwrap()[0];
        let dims = proto.dims;
        let idx = |i: usize, j: usize, k: usize| i + dims[0] * (j + dims[1] * k);
        let scale = s.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let mut checked = 0;
        for k in 1..dims[2] {
            for j in 1..dims[1] {
                for i in 1..dims[0] {
                    let a = s.values[idx(i, j, k)];
                    let b = s.values[idx(dims[0] - i, dims[1] - j, dims[2] - k)];
                    assert!((a - b.conj()).norm() <= 1e-6 * scale);
                    checked += 1;
                }
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn simulation_rejects_anisotropic_master() {
        let mut v = blob(8, 1.0);
        v.voxel_size = [1.0, 1.0, 2.0];
        assert!(AcquisitionSimulator::new(&[v], &GriddingConfig::default()).is_err());
    }
}
