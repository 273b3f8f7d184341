//! Deterministic inputs shared by the benchmarks.

use std::f64::consts::PI;

use kreg_core::geometry::{cartesian_kspace_lattice, rotation_from_euler, KSpaceLocations, ProtocolDescriptor, ReferenceProtocol};
use kreg_core::nufft::KSpaceSamples;
use kreg_core::volume::{ComplexVolume, ScalarVolume};
use num_complex::Complex64;

/// Smooth complex test image.
pub fn image(n: usize) -> ComplexVolume {
    let c = n as f64 / 2.0;
    ComplexVolume::from_fn([n; 3], [1.0; 3], |i, j, k| {
        let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2) + (k as f64 - c).powi(2);
        Complex64::from_polar((-r2 / (0.1 * (n * n) as f64)).exp(), 0.05 * (i as f64 - j as f64))
    })
}

/// `count` locations spread over the band by a low-discrepancy sequence.
pub fn locations(count: usize) -> KSpaceLocations {
    let g = [0.819_172_513_396_164_4, 0.671_043_606_703_789_2, 0.549_700_477_901_970_5];
    KSpaceLocations((0..count).map(|i| g.map(|a| ((0.5 + a * i as f64).fract() - 0.5) * 2.0 * PI)).collect())
}

/// Oblique protocol with doubled slice thickness on an `n³` reference.
pub fn oblique(n: usize) -> (ProtocolDescriptor, ReferenceProtocol) {
    let reference = ReferenceProtocol::new(1.0, n).unwrap();
    let protocol = ProtocolDescriptor::new(
        rotation_from_euler(20.0, 10.0, 0.0).unwrap(),
        [1.0, 1.0, 2.0],
        [n, n, n / 2],
        n as f64,
        vec![0.008],
        3.0,
    )
    .unwrap();
    (protocol, reference)
}

/// Lattice-ordered samples for `protocol`.
pub fn lattice_samples(protocol: &ProtocolDescriptor) -> KSpaceSamples {
    let lattice = cartesian_kspace_lattice(protocol.dims).unwrap();
    let values = (0..lattice.len()).map(|i| Complex64::from_polar(1.0 / (1.0 + i as f64).sqrt(), i as f64 * 0.37)).collect();
    KSpaceSamples::new(lattice, values).unwrap()
}

/// Wrapped phase of a 3π blob.
pub fn wrapped_blob(n: usize) -> ScalarVolume {
    let c = n as f64 / 2.0;
    ScalarVolume::from_fn([n; 3], [1.0; 3], |i, j, k| {
        let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2) + (k as f64 - c).powi(2);
        let phi = 3.0 * PI * (-r2 / (0.05 * (n * n) as f64)).exp();
        (phi + PI).rem_euclid(2.0 * PI) - PI
    })
}
