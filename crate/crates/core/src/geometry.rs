//! Acquisition geometry: rotations, protocol descriptors and k-space lattices.
//!
//! Conventions shared by every module in the crate:
//!
//! * A [`RotationMatrix`] maps acquisition-frame coordinates to scanner-frame
//!   coordinates, `p_scanner = R · p_acq`. The main field points along the
//!   scanner `z` axis, so in image (acquisition) axes it is `Rᵀ · e_z`.
//! * k-space locations are normalized angular frequencies in radians per
//!   voxel. Lattice locations use the centered index `k - N/2`, so an even
//!   axis covers `[-π, π)` with `-π` included.
//! * Flat arrays are linearized x-fastest: `i + N_x·(j + N_y·k)`.

use std::f64::consts::PI;

use crate::error::{invalid, Result};

const ORTHO_TOL: f64 = 1e-12;

/// Proper 3×3 rotation, row-major.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix([[f64; 3]; 3]);

impl RotationMatrix {
    pub const IDENTITY: RotationMatrix =
        RotationMatrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    /// Validates orthonormality and `det = +1` to within 1e-12 per entry.
    pub fn new(rows: [[f64; 3]; 3]) -> Result<Self> {
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return invalid("rotation matrix has non-finite entries");
        }
        let r = RotationMatrix(rows);
        let rrt = r.mul(&r.transpose());
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                if (rrt.0[i][j] - expect).abs() > ORTHO_TOL {
                    return invalid(format!(
                        "matrix is not orthonormal: (R·Rᵀ)[{i}][{j}] = {}",
                        rrt.0[i][j]
                    ));
                }
            }
        }
        let det = r.det();
        if (det - 1.0).abs() > ORTHO_TOL {
            return invalid(format!("matrix is not a proper rotation: det = {det}"));
        }
        Ok(r)
    }

    pub fn about_x(rad: f64) -> Self {
        let (s, c) = rad.sin_cos();
        RotationMatrix([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    }

    pub fn about_y(rad: f64) -> Self {
        let (s, c) = rad.sin_cos();
        RotationMatrix([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    }

    pub fn about_z(rad: f64) -> Self {
        let (s, c) = rad.sin_cos();
        RotationMatrix([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn rows(&self) -> &[[f64; 3]; 3] {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        let m = &self.0;
        RotationMatrix([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn mul(&self, other: &Self) -> Self {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[i][k] * other.0[k][j]).sum();
            }
        }
        RotationMatrix(out)
    }

    pub fn apply(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

impl Default for RotationMatrix {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Builds `R = Rz(yaw) · Ry(pitch) · Rx(roll)` from angles in degrees.
pub fn rotation_from_euler(yaw_deg: f64, pitch_deg: f64, roll_deg: f64) -> Result<RotationMatrix> {
    if !(yaw_deg.is_finite() && pitch_deg.is_finite() && roll_deg.is_finite()) {
        return invalid("Euler angles must be finite");
    }
    let rz = RotationMatrix::about_z(yaw_deg.to_radians());
    let ry = RotationMatrix::about_y(pitch_deg.to_radians());
    let rx = RotationMatrix::about_x(roll_deg.to_radians());
    Ok(rz.mul(&ry).mul(&rx))
}

/// Main-field direction expressed in the acquisition (image) axes: `Rᵀ · e_z`.
pub fn b0_in_image_frame(r: &RotationMatrix) -> [f64; 3] {
    let m = r.rows();
    [m[2][0], m[2][1], m[2][2]]
}

/// Acquisition geometry of one protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolDescriptor {
    pub rotation: RotationMatrix,
    pub voxel_size: [f64; 3],
    pub dims: [usize; 3],
    pub fov_mm: f64,
    pub echo_times: Vec<f64>,
    pub field_strength: f64,
}

impl ProtocolDescriptor {
    pub fn new(
        rotation: RotationMatrix,
        voxel_size: [f64; 3],
        dims: [usize; 3],
        fov_mm: f64,
        echo_times: Vec<f64>,
        field_strength: f64,
    ) -> Result<Self> {
        if voxel_size.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return invalid(format!("voxel sizes must be positive, got {voxel_size:?}"));
        }
        if dims.iter().any(|&n| n == 0) {
            return invalid(format!("matrix dims must be positive, got {dims:?}"));
        }
        if !(fov_mm.is_finite() && fov_mm > 0.0) {
            return invalid(format!("field of view must be positive, got {fov_mm}"));
        }
        if !(field_strength.is_finite() && field_strength > 0.0) {
            return invalid(format!("field strength must be positive, got {field_strength}"));
        }
        if echo_times.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return invalid("echo times must be positive");
        }
        if echo_times.windows(2).any(|w| w[1] <= w[0]) {
            return invalid("echo times must be strictly increasing");
        }
        for axis in 0..3 {
            let extent = dims[axis] as f64 * voxel_size[axis];
            if (extent - fov_mm).abs() > voxel_size[axis] {
                log::warn!(
                    "axis {axis}: {} x {} mm = {extent} mm disagrees with FoV {fov_mm} mm",
                    dims[axis],
                    voxel_size[axis]
                );
            }
        }
        Ok(ProtocolDescriptor { rotation, voxel_size, dims, fov_mm, echo_times, field_strength })
    }

    /// Non-oblique isotropic protocol matching `reference`.
    pub fn straight(reference: &ReferenceProtocol, echo_times: Vec<f64>, field_strength: f64) -> Result<Self> {
        let v = reference.iso_voxel_mm;
        Self::new(
            RotationMatrix::IDENTITY,
            [v; 3],
            reference.dims(),
            v * reference.matrix as f64,
            echo_times,
            field_strength,
        )
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Non-oblique isotropic target geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceProtocol {
    pub iso_voxel_mm: f64,
    pub matrix: usize,
}

impl ReferenceProtocol {
    pub fn new(iso_voxel_mm: f64, matrix: usize) -> Result<Self> {
        if !(iso_voxel_mm.is_finite() && iso_voxel_mm > 0.0) {
            return invalid(format!("reference voxel size must be positive, got {iso_voxel_mm}"));
        }
        if matrix == 0 {
            return invalid("reference matrix must be positive");
        }
        Ok(ReferenceProtocol { iso_voxel_mm, matrix })
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.matrix; 3]
    }

    pub fn fov_mm(&self) -> f64 {
        self.iso_voxel_mm * self.matrix as f64
    }
}

/// Fourier sample locations in radians per voxel.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KSpaceLocations(pub Vec<[f64; 3]>);

impl KSpaceLocations {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, [f64; 3]> {
        self.0.iter()
    }

    pub fn as_slice(&self) -> &[[f64; 3]] {
        &self.0
    }
}

impl FromIterator<[f64; 3]> for KSpaceLocations {
    fn from_iter<I: IntoIterator<Item = [f64; 3]>>(iter: I) -> Self {
        KSpaceLocations(iter.into_iter().collect())
    }
}

/// Centered lattice coordinate of index `k` on an axis of length `n`.
#[inline]
pub fn lattice_frequency(k: usize, n: usize) -> f64 {
    2.0 * PI * (k as f64 - (n / 2) as f64) / n as f64
}

/// The acquisition's Cartesian sample grid in acquisition-voxel units,
/// x-fastest.
pub fn cartesian_kspace_lattice(dims: [usize; 3]) -> Result<KSpaceLocations> {
    if dims.iter().any(|&n| n == 0) {
        return invalid(format!("lattice dims must be positive, got {dims:?}"));
    }
    let axes: Vec<Vec<f64>> = dims
        .iter()
        .map(|&n| (0..n).map(|k| lattice_frequency(k, n)).collect())
        .collect();
    let mut out = Vec::with_capacity(dims.iter().product());
    for &lz in &axes[2] {
        for &ly in &axes[1] {
            for &lx in &axes[0] {
                out.push([lx, ly, lz]);
            }
        }
    }
    Ok(KSpaceLocations(out))
}

/// `l ↦ R·l` for every location.
pub fn rotate_locations(locations: &KSpaceLocations, r: &RotationMatrix) -> KSpaceLocations {
    locations.iter().map(|&l| r.apply(l)).collect()
}

/// Per-axis scale factors `s_i = v_r / v_i`.
pub fn scale_factors(voxel_size: [f64; 3], iso_voxel_mm: f64) -> Result<[f64; 3]> {
    if voxel_size.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return invalid(format!("voxel sizes must be positive, got {voxel_size:?}"));
    }
    if !(iso_voxel_mm.is_finite() && iso_voxel_mm > 0.0) {
        return invalid(format!("reference voxel size must be positive, got {iso_voxel_mm}"));
    }
    Ok(voxel_size.map(|v| iso_voxel_mm / v))
}

/// `l ↦ diag(s)·l` with `s_i = v_r / v_i`.
pub fn scale_locations(
    locations: &KSpaceLocations,
    voxel_size: [f64; 3],
    iso_voxel_mm: f64,
) -> Result<KSpaceLocations> {
    let s = scale_factors(voxel_size, iso_voxel_mm)?;
    Ok(scale_by(locations, s))
}

pub(crate) fn scale_by(locations: &KSpaceLocations, s: [f64; 3]) -> KSpaceLocations {
    locations.iter().map(|l| [l[0] * s[0], l[1] * s[1], l[2] * s[2]]).collect()
}
