//! Field fitting, truncated k-space dipole inversion and error metrics.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::forward::{dipole_kernel, PhysicsConstants};
use crate::registration::apply_spectral;
use crate::volume::{Mask, ScalarVolume, Volume};

#[derive(Debug, Clone)]
pub struct FieldFitResult {
    /// ppm
    pub field: ScalarVolume,
    /// rms phase misfit over echoes (rad); −1 where no echo carried weight
    pub residual: ScalarVolume,
}

/// Magnitude-squared weighted fit of `φ_j = ν · TE_j` per voxel.
pub fn fit_field(
    phases: &[ScalarVolume],
    magnitudes: &[ScalarVolume],
    echo_times: &[f64],
    constants: &PhysicsConstants,
) -> Result<FieldFitResult> {
    if phases.is_empty() {
        return invalid("field fit needs at least one echo");
    }
    if phases.len() != magnitudes.len() || phases.len() != echo_times.len() {
        return invalid(format!(
            "{} phase volumes, {} magnitude volumes, {} echo times",
            phases.len(),
            magnitudes.len(),
            echo_times.len()
        ));
    }
    let dims = phases[0].dims;
    if phases.iter().chain(magnitudes).any(|v| v.dims != dims) {
        return invalid("echo volumes differ in dims");
    }
    if magnitudes.iter().any(|m| m.data.iter().any(|&v| !(v >= 0.0))) {
        return invalid("magnitudes must be non-negative");
    }
    let per_ppm = constants.radians_per_ppm_second();
    let n = phases[0].len();
    let mut field = vec![0.0; n];
    let mut residual = vec![0.0; n];
    for t in 0..n {
        let mut num = 0.0;
        let mut den = 0.0;
        for ((p, m), &te) in phases.iter().zip(magnitudes).zip(echo_times) {
            let w = m.data[t] * m.data[t];
            num += w * te * p.data[t];
            den += w * te * te;
        }
        if den == 0.0 {
            residual[t] = -1.0;
            continue;
        }
        let nu = num / den;
        field[t] = nu / per_ppm;
        let sq: f64 = phases.iter().zip(echo_times).map(|(p, &te)| (p.data[t] - nu * te).powi(2)).sum();
        residual[t] = (sq / phases.len() as f64).sqrt();
    }
    let voxel_size = phases[0].voxel_size;
    Ok(FieldFitResult {
        field: Volume { dims, voxel_size, echo_times: Vec::new(), data: field },
        residual: Volume { dims, voxel_size, echo_times: echo_times.to_vec(), data: residual },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TkdConfig {
    pub threshold: f64,
}

impl TkdConfig {
    pub fn new(threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 2.0 / 3.0) {
            return invalid(format!("TKD threshold must lie in (0, 2/3), got {threshold}"));
        }
        Ok(TkdConfig { threshold })
    }
}

impl Default for TkdConfig {
    fn default() -> Self {
        TkdConfig { threshold: 0.2 }
    }
}

/// Thresholded inverse of the dipole kernel, as applied by [`tkd_invert`].
pub fn tkd_inverse_kernel(d: f64, threshold: f64) -> f64 {
    if d.abs() > threshold {
        1.0 / d
    } else if d < 0.0 {
        -1.0 / threshold
    } else {
        1.0 / threshold
    }
}

/// Susceptibility (ppm) from a local field (ppm) by truncated k-space division.
pub fn tkd_invert(field: &ScalarVolume, b0: [f64; 3], cfg: &TkdConfig) -> Result<ScalarVolume> {
    TkdConfig::new(cfg.threshold)?;
    if field.data.iter().any(|v| !v.is_finite()) {
        return invalid("field map contains non-finite values");
    }
    let kernel = dipole_kernel(field.dims, field.voxel_size, b0)?;
    let mut work: Vec<Complex64> = field.data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    apply_spectral(&mut work, field.dims, |k| tkd_inverse_kernel(kernel.data[k], cfg.threshold));
    Ok(Volume {
        dims: field.dims,
        voxel_size: field.voxel_size,
        echo_times: Vec::new(),
        data: work.iter().map(|z| z.re).collect(),
    })
}

/// Voxels whose magnitude exceeds `fraction` of the volume's maximum.
pub fn support_mask(magnitude: &ScalarVolume, fraction: f64) -> Result<Mask> {
    if !(fraction.is_finite() && (0.0..1.0).contains(&fraction)) {
        return invalid(format!("support fraction must lie in [0, 1), got {fraction}"));
    }
    let peak = magnitude.data.iter().cloned().fold(0.0, f64::max);
    let cut = fraction * peak;
    Ok(Mask { dims: magnitude.dims, data: magnitude.data.iter().map(|&m| m > cut).collect() })
}

/// `‖x − ref‖ / ‖ref‖` over the mask, optionally after removing each
/// volume's mask mean.
pub fn nrmse(x: &ScalarVolume, reference: &ScalarVolume, mask: &Mask, demean: bool) -> Result<f64> {
    if x.dims != reference.dims || mask.dims != x.dims {
        return invalid(format!("dims differ: {:?}, {:?}, mask {:?}", x.dims, reference.dims, mask.dims));
    }
    let count = mask.count();
    if count == 0 {
        return invalid("NRMSE mask is empty");
    }
    let masked = |v: &ScalarVolume| -> Vec<f64> {
        v.data.iter().zip(&mask.data).filter(|(_, &m)| m).map(|(&a, _)| a).collect()
    };
    let mut a = masked(x);
    let mut b = masked(reference);
    if demean {
        for v in [&mut a, &mut b] {
            let mean = v.iter().sum::<f64>() / count as f64;
            v.iter_mut().for_each(|x| *x -= mean);
        }
    }
    let den: f64 = b.iter().map(|v| v * v).sum();
    if den == 0.0 {
        return invalid("reference has zero norm over the mask");
    }
    let num: f64 = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum();
    Ok((num / den).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{build_phantom, field_from_chi, synth_echoes, PhantomSpec, Primitive};
    use crate::registration::fft_frequencies;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constants() -> PhysicsConstants {
        PhysicsConstants::new(3.0).unwrap()
    }

    #[test]
    fn linear_phase_fits_one_ppm() {
        let c = constants();
        assert!((c.radians_per_ppm_second() - 2.0 * std::f64::consts::PI * 127.728).abs() < 1e-9);
        let field = ScalarVolume::from_fn([3, 2, 2], [1.0; 3], |_, _, _| 1.0);
        let mag = ScalarVolume::from_fn([3, 2, 2], [1.0; 3], |i, _, _| 1.0 + i as f64);
        let tes = [2e-3, 4e-3, 6e-3];
        let echoes = synth_echoes(&field, &mag, &tes, &c).unwrap();
        // unwrapped phases, straight from the model
        let phases: Vec<ScalarVolume> = tes.iter().map(|te| field.map(|f| f * c.radians_per_ppm_second() * te)).collect();
        let mags: Vec<ScalarVolume> = echoes.iter().map(|e| e.magnitude()).collect();
        let fit = fit_field(&phases, &mags, &tes, &c).unwrap();
        for (f, r) in fit.field.data.iter().zip(&fit.residual.data) {
            assert!((f - 1.0).abs() < 1e-12);
            assert!(r.abs() <= 1e-10);
        }
    }

    #[test]
    fn single_echo_is_exact_division() {
        let c = constants();
        let phase = ScalarVolume::from_fn([2, 1, 1], [1.0; 3], |i, _, _| 0.3 + i as f64);
        let mag = ScalarVolume::from_fn([2, 1, 1], [1.0; 3], |_, _, _| 0.7);
        let te = 5e-3;
        let fit = fit_field(&[phase.clone()], &[mag], &[te], &c).unwrap();
        for (f, p) in fit.field.data.iter().zip(&phase.data) {
            assert!((f - p / (c.radians_per_ppm_second() * te)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_magnitude_is_flagged() {
        let c = constants();
        let phase = ScalarVolume::from_fn([2, 1, 1], [1.0; 3], |_, _, _| 1.0);
        let mag = ScalarVolume::from_fn([2, 1, 1], [1.0; 3], |i, _, _| i as f64);
        let fit = fit_field(&[phase.clone(), phase], &[mag.clone(), mag], &[1e-3, 2e-3], &c).unwrap();
        assert_eq!(fit.field.data[0], 0.0);
        assert_eq!(fit.residual.data[0], -1.0);
        assert!(fit.residual.data[1] >= 0.0);
        assert!(fit_field(&[], &[], &[], &c).is_err());
    }

    #[test]
    fn noisy_fit_has_positive_residual() {
        let c = constants();
        let tes = [2e-3, 4e-3, 6e-3];
        let phases: Vec<ScalarVolume> = tes
            .iter()
            .enumerate()
            .map(|(j, te)| ScalarVolume::from_fn([1, 1, 1], [1.0; 3], |_, _, _| te * 100.0 + [0.01, -0.02, 0.01][j]))
            .collect();
        let mags = vec![ScalarVolume::from_fn([1, 1, 1], [1.0; 3], |_, _, _| 1.0); 3];
        let fit = fit_field(&phases, &mags, &tes, &c).unwrap();
        assert!(fit.residual.data[0] > 1e-3);
    }

    #[test]
    fn tkd_config_bounds() {
        assert!(TkdConfig::new(0.0).is_err());
        assert!(TkdConfig::new(2.0 / 3.0).is_err());
        assert!(TkdConfig::new(0.1).is_ok());
        assert_eq!(TkdConfig::default().threshold, 0.2);
    }

    #[test]
    fn inverse_kernel_branches() {
        assert_eq!(tkd_inverse_kernel(0.2, 0.2), 5.0);
        assert_eq!(tkd_inverse_kernel(-0.2, 0.2), -5.0);
        assert_eq!(tkd_inverse_kernel(0.5, 0.2), 2.0);
        assert_eq!(tkd_inverse_kernel(0.0, 0.2), 5.0);
        assert_eq!(tkd_inverse_kernel(-0.1, 0.2), -5.0);
    }

    #[test]
    fn tkd_zero_field() {
        let f = ScalarVolume::zeros([8; 3], [1.0; 3]);
        let chi = tkd_invert(&f, [0.0, 0.0, 1.0], &TkdConfig::default()).unwrap();
        assert!(chi.data.iter().all(|&v| v == 0.0));
    }

    fn sphere_phantom(n: usize) -> (ScalarVolume, Mask) {
        let c = n as f64 / 2.0;
        let spec = PhantomSpec {
            primitives: vec![
                Primitive::Sphere { center: [c; 3], radius: 0.3 * n as f64, chi: 0.0, magnitude: 1.0 },
                Primitive::Sphere { center: [c - 4.0, c, c], radius: 0.12 * n as f64, chi: 0.1, magnitude: 1.0 },
                Primitive::Sphere { center: [c + 6.0, c + 2.0, c], radius: 0.08 * n as f64, chi: -0.05, magnitude: 1.0 },
            ],
            background_chi: 0.0,
            background_magnitude: 0.0,
        };
        let p = build_phantom(&spec, [n; 3], [1.0; 3]).unwrap();
        (p.chi, p.mask)
    }

    #[test]
    fn noiseless_tkd_recovers_sphere_phantom() {
        let (chi, mask) = sphere_phantom(48);
        let b0 = [0.0, 0.0, 1.0];
        let field = field_from_chi(&chi, b0).unwrap();
        let est = tkd_invert(&field, b0, &TkdConfig::default()).unwrap();
        let e = nrmse(&est, &chi, &mask, true).unwrap();
        assert!(e <= 0.35, "NRMSE {e}");
    }

    fn band_project(v: &ScalarVolume, keep: &[bool]) -> ScalarVolume {
        let mut work: Vec<Complex64> = v.data.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        apply_spectral(&mut work, v.dims, |k| if keep[k] { 1.0 } else { 0.0 });
        Volume { dims: v.dims, voxel_size: v.voxel_size, echo_times: Vec::new(), data: work.iter().map(|z| z.re).collect() }
    }

    #[test]
    fn tkd_is_identity_on_the_retained_band() {
        let (chi, _) = sphere_phantom(32);
        let b0 = [0.0, 0.6, 0.8];
        let voxel = [1.0, 1.0, 1.0];
        let field = field_from_chi(&chi, b0).unwrap();
        let est = tkd_invert(&field, b0, &TkdConfig::default()).unwrap();
        let d = dipole_kernel(chi.dims, voxel, b0).unwrap();
        let keep: Vec<bool> = d.data.iter().map(|v| v.abs() > 0.2).collect();
        let a = band_project(&chi, &keep);
        let b = band_project(&est, &keep);
        let e = nrmse(&b, &a, &Mask::full(chi.dims), false).unwrap();
        assert!(e <= 1e-6, "{e:e}");
    }

    #[test]
    fn tkd_uses_anisotropic_frequencies() {
        // a single Fourier mode is scaled by exactly 1/D at its frequency
        let dims = [8, 8, 8];
        let voxel = [1.0, 1.0, 2.0];
        let b0 = [0.0, 0.0, 1.0];
        let (i, k) = (1usize, 1usize);
        let mode = ScalarVolume::from_fn(dims, voxel, |x, _, z| {
            (2.0 * std::f64::consts::PI * (i as f64 * x as f64 / 8.0 + k as f64 * z as f64 / 8.0)).cos()
        });
        let est = tkd_invert(&mode, b0, &TkdConfig::new(0.05).unwrap()).unwrap();
        let [fx, _, fz] = fft_frequencies(dims, voxel);
        let d = 1.0 / 3.0 - fz[k].powi(2) / (fx[i].powi(2) + fz[k].powi(2));
        for (a, b) in est.data.iter().zip(&mode.data) {
            assert!((a - b / d).abs() < 1e-12);
        }
    }

    #[test]
    fn tkd_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dims = [8, 6, 4];
        let f = ScalarVolume::from_fn(dims, [1.0; 3], |_, _, _| rng.random::<f64>() - 0.5);
        let g = ScalarVolume::from_fn(dims, [1.0; 3], |_, _, _| rng.random::<f64>() - 0.5);
        let b0 = [0.6, 0.0, 0.8];
        let cfg = TkdConfig::default();
        let mut sum = f.clone();
        sum.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a = 2.0 * *a - 3.0 * b);
        let lhs = tkd_invert(&sum, b0, &cfg).unwrap();
        let (tf, tg) = (tkd_invert(&f, b0, &cfg).unwrap(), tkd_invert(&g, b0, &cfg).unwrap());
        let scale = lhs.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        let err = lhs.data.iter().zip(tf.data.iter().zip(&tg.data)).map(|(l, (a, b))| (l - 2.0 * a + 3.0 * b).powi(2)).sum::<f64>().sqrt();
        assert!(err <= 1e-10 * scale);
    }

    #[test]
    fn support_mask_thresholds_relative_to_peak() {
        let m = ScalarVolume::from_fn([4, 1, 1], [1.0; 3], |i, _, _| i as f64);
        let s = support_mask(&m, 0.5).unwrap();
        assert_eq!(s.data, vec![false, false, true, true]);
        assert!(support_mask(&m, 1.0).is_err());
        assert_eq!(support_mask(&m.map(|_| 0.0), 0.0).unwrap().count(), 0);
    }

    #[test]
    fn nrmse_definitions() {
        let dims = [4, 4, 4];
        let r = ScalarVolume::from_fn(dims, [1.0; 3], |i, j, k| 1.0 + (i + 2 * j + 3 * k) as f64);
        let m = Mask::full(dims);
        assert_eq!(nrmse(&r, &r, &m, true).unwrap(), 0.0);
        assert_eq!(nrmse(&r.map(|_| 0.0), &r, &m, false).unwrap(), 1.0);
        for a in [0.5, 1.3, 2.0] {
            let e = nrmse(&r.map(|v| a * v), &r, &m, false).unwrap();
            assert!((e - (a - 1.0f64).abs()).abs() < 1e-12);
        }
        assert!(nrmse(&r, &r, &Mask::empty(dims), false).is_err());
        assert!(nrmse(&r, &r.map(|_| 0.0), &m, false).is_err());
        // constant reference is zero after demeaning
        assert!(nrmse(&r, &r.map(|_| 2.0), &m, true).is_err());
    }

    #[test]
    fn nrmse_matches_direct_sum_with_perturbation() {
        let dims = [5, 4, 3];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = ScalarVolume::from_fn(dims, [1.0; 3], |_, _, _| rng.random::<f64>());
        let mut mask = Mask::full(dims);
        mask.data.iter_mut().step_by(3).for_each(|m| *m = false);
        let signs: Vec<f64> = (0..r.len()).map(|t| if t % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let mut x = r.clone();
        for ((v, s), &m) in x.data.iter_mut().zip(&signs).zip(&mask.data) {
            if m {
                *v += 0.1 * s;
            }
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for t in 0..r.len() {
            if mask.data[t] {
                num += 0.01;
                den += r.data[t] * r.data[t];
            }
        }
        let e = nrmse(&x, &r, &mask, false).unwrap();
        assert!((e - (num / den as f64).sqrt()).abs() < 1e-12);
    }
}
