//! Experiment configuration (JSON, schema version 1).

use std::path::{Path, PathBuf};

use kreg_core::forward::{PhantomSpec, Primitive};
use kreg_core::geometry::{rotation_from_euler, ProtocolDescriptor, ReferenceProtocol};
use kreg_core::nufft::GriddingConfig;
use kreg_core::qsm::TkdConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// QSM on the acquisition grid, resampled afterwards
    None,
    /// trilinear resampling of unwrapped phase
    Ireg,
    /// k-space registration
    Kreg,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Ireg => "ireg",
            Method::Kreg => "kreg",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    pub iso_voxel_mm: f64,
    pub matrix: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcquisitionConfig {
    pub name: String,
    /// yaw, pitch, roll
    #[serde(default)]
    pub angles_deg: [f64; 3],
    pub voxel_mm: [f64; 3],
    /// complex noise standard deviation, in image intensity units
    #[serde(default)]
    pub noise_sigma: f64,
    pub seed: u64,
    /// reconstructions to compare against the baseline
    #[serde(default = "all_methods")]
    pub methods: Vec<Method>,
}

fn all_methods() -> Vec<Method> {
    vec![Method::None, Method::Ireg, Method::Kreg]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GriddingSection {
    pub kernel_width: usize,
    pub oversampling: f64,
}

impl Default for GriddingSection {
    fn default() -> Self {
        GriddingSection { kernel_width: 6, oversampling: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub reference: ReferenceConfig,
    /// master grid voxels per reference voxel along each axis
    #[serde(default = "default_upsample")]
    pub master_upsample: usize,
    /// phantom geometry in reference voxel coordinates
    pub phantom: PhantomSpec,
    /// acquisition whose QSM is the comparison target
    pub baseline: AcquisitionConfig,
    pub tests: Vec<AcquisitionConfig>,
    pub echo_times_s: Vec<f64>,
    pub field_strength_t: f64,
    #[serde(default)]
    pub gridding: GriddingSection,
    #[serde(default)]
    pub tkd: TkdConfig,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_upsample() -> usize {
    2
}

fn default_output() -> PathBuf {
    PathBuf::from("kreg-out")
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig =
            serde_path_to_error::deserialize(de).map_err(|e| CliError::Config(format!("{}: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |path: &str, msg: String| Err(CliError::Config(format!("{path}: {msg}")));
        if self.schema != SCHEMA_VERSION {
            return bad("schema", format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema));
        }
        self.reference_protocol().map_err(|e| CliError::Config(format!("reference: {e}")))?;
        if self.master_upsample == 0 {
            return bad("master_upsample", "must be at least 1".into());
        }
        if self.tests.is_empty() {
            return bad("tests", "at least one test acquisition is required".into());
        }
        if self.echo_times_s.is_empty() {
            return bad("echo_times_s", "at least one echo is required".into());
        }
        if !(self.field_strength_t.is_finite() && self.field_strength_t > 0.0) {
            return bad("field_strength_t", "must be positive".into());
        }
        TkdConfig::new(self.tkd.threshold).map_err(|e| CliError::Config(format!("tkd.threshold: {e}")))?;
        self.gridding_config().map_err(|e| CliError::Config(format!("gridding: {e}")))?;
        let mut names = vec![self.baseline.name.as_str()];
        for (i, acq) in std::iter::once(&self.baseline).chain(&self.tests).enumerate() {
            let path = if i == 0 { "baseline".to_string() } else { format!("tests[{}]", i - 1) };
            self.protocol(acq).map_err(|e| CliError::Config(format!("{path}: {e}")))?;
            if !(acq.noise_sigma.is_finite() && acq.noise_sigma >= 0.0) {
                return bad(&format!("{path}.noise_sigma"), "must be non-negative".into());
            }
            if i > 0 {
                if acq.methods.is_empty() {
                    return bad(&format!("{path}.methods"), "list at least one method".into());
                }
                if names.contains(&acq.name.as_str()) {
                    return bad(&format!("{path}.name"), format!("duplicate acquisition name {:?}", acq.name));
                }
                names.push(&acq.name);
            }
        }
        let mut seeds: Vec<u64> = std::iter::once(&self.baseline).chain(&self.tests).map(|a| a.seed).collect();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return bad("seed", "acquisition seeds must be distinct".into());
        }
        Ok(())
    }

    pub fn reference_protocol(&self) -> kreg_core::Result<ReferenceProtocol> {
        ReferenceProtocol::new(self.reference.iso_voxel_mm, self.reference.matrix)
    }

    pub fn gridding_config(&self) -> kreg_core::Result<GriddingConfig> {
        GriddingConfig::new(self.gridding.kernel_width, self.gridding.oversampling)
    }

    /// Matrix size follows from the reference field of view.
    pub fn protocol(&self, acq: &AcquisitionConfig) -> kreg_core::Result<ProtocolDescriptor> {
        let reference = self.reference_protocol()?;
        let fov = reference.fov_mm();
        let mut dims = [0usize; 3];
        for a in 0..3 {
            let v = acq.voxel_mm[a];
            if !(v.is_finite() && v > 0.0) {
                return Err(kreg_core::Error::InvalidArgument(format!("voxel size {v} must be positive")));
            }
            let n = fov / v;
            if (n - n.round()).abs() > 1e-6 || n.round() < 1.0 {
                return Err(kreg_core::Error::InvalidArgument(format!(
                    "voxel size {v} mm does not divide the {fov} mm field of view"
                )));
            }
            dims[a] = n.round() as usize;
        }
        let [yaw, pitch, roll] = acq.angles_deg;
        let rotation = rotation_from_euler(yaw, pitch, roll)?;
        ProtocolDescriptor::new(rotation, acq.voxel_mm, dims, fov, self.echo_times_s.clone(), self.field_strength_t)
    }

    /// Replaces every acquisition seed with one derived from `base`.
    pub fn reseed(&mut self, base: u64) {
        let derive = |i: u64| base.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i);
        self.baseline.seed = derive(0);
        for (i, t) in self.tests.iter_mut().enumerate() {
            t.seed = derive(i as u64 + 1);
        }
    }
}

/// Desk-scale three-protocol experiment: a straight baseline, a straight
/// retest and an oblique acquisition with doubled slice thickness.
pub fn default_config() -> ExperimentConfig {
    let n = 48.0;
    let c = n / 2.0;
    let sphere = |dx: f64, dy: f64, dz: f64, r: f64, chi: f64| Primitive::Sphere {
        center: [c + dx, c + dy, c + dz],
        radius: r,
        chi,
        magnitude: 1.0,
    };
    let phantom = PhantomSpec {
        primitives: vec![
            Primitive::Ellipsoid { center: [c; 3], radii: [15.0, 13.0, 12.0], chi: 0.0, magnitude: 1.0 },
            sphere(-6.0, -4.0, 2.0, 3.5, 0.2),
            sphere(6.0, -3.0, -2.0, 3.0, 0.15),
            sphere(0.0, 6.0, 3.0, 2.5, -0.1),
            sphere(-3.0, 4.0, -5.0, 2.0, 0.3),
            Primitive::Cylinder {
                center: [c + 3.0, c + 2.0, c],
                radius: 1.5,
                half_length: 6.0,
                axis: [1.0, 0.5, 0.2],
                chi: 0.1,
                magnitude: 1.0,
            },
        ],
        background_chi: 0.0,
        background_magnitude: 0.0,
    };
    let sigma = 0.02;
    ExperimentConfig {
        schema: SCHEMA_VERSION,
        reference: ReferenceConfig { iso_voxel_mm: 0.7, matrix: 48 },
        master_upsample: 2,
        phantom,
        baseline: AcquisitionConfig {
            name: "baseline".into(),
            angles_deg: [0.0; 3],
            voxel_mm: [0.7; 3],
            noise_sigma: sigma,
            seed: 1,
            methods: vec![Method::None],
        },
        tests: vec![
            AcquisitionConfig {
                name: "retest".into(),
                angles_deg: [0.0; 3],
                voxel_mm: [0.7; 3],
                noise_sigma: sigma,
                seed: 2,
                methods: vec![Method::None],
            },
            AcquisitionConfig {
                name: "oblique".into(),
                angles_deg: [20.0, 10.0, 0.0],
                voxel_mm: [0.7, 0.7, 1.4],
                noise_sigma: sigma,
                seed: 3,
                methods: all_methods(),
            },
        ],
        echo_times_s: vec![7.94e-3, 15.94e-3, 23.94e-3],
        field_strength_t: 3.0,
        gridding: GriddingSection::default(),
        tkd: TkdConfig::default(),
        output_dir: default_output(),
    }
}
