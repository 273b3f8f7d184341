//! The end-to-end protocol comparison: simulate every acquisition from one
//! high-resolution phantom, reconstruct QSM per arm, score against the
//! baseline.

use std::collections::BTreeMap;
use std::time::Instant;

use kreg_core::forward::{build_phantom, build_phantom_upsampled, field_from_chi, synth_echoes, AcquisitionSimulator, Phantom, PhysicsConstants};
use kreg_core::geometry::{b0_in_image_frame, ProtocolDescriptor, ReferenceProtocol};
use kreg_core::nufft::{GriddingConfig, KSpaceSamples};
use kreg_core::qsm::{fit_field, nrmse, support_mask, tkd_invert, TkdConfig};
use kreg_core::registration::{
    image_register_baseline, inverse_fft_reconstruction, kspace_register, laplacian_unwrap, resample_to_reference,
};
use kreg_core::volume::{ComplexVolume, Mask, ScalarVolume};
use serde::{Deserialize, Serialize};

use crate::config::{AcquisitionConfig, ExperimentConfig, Method};
use crate::error::CliError;

const SCANNER_B0: [f64; 3] = [0.0, 0.0, 1.0];

/// Signal support: first-echo magnitude above this fraction of its peak.
pub const SUPPORT_FRACTION: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmResult {
    /// `<acquisition>:<method>`
    pub name: String,
    pub acquisition: String,
    pub method: Method,
    pub nrmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonReport {
    pub tool_version: String,
    pub config: ExperimentConfig,
    /// where the NRMSE is evaluated
    pub mask: String,
    pub mask_voxels: usize,
    pub demeaned: bool,
    pub arms: Vec<ArmResult>,
    pub timings_ms: BTreeMap<String, f64>,
}

impl ComparisonReport {
    pub fn new(config: ExperimentConfig, mask: &Mask, arms: Vec<ArmResult>, timings_ms: BTreeMap<String, f64>) -> Self {
        ComparisonReport {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            mask: "phantom".into(),
            mask_voxels: mask.count(),
            demeaned: true,
            arms,
            timings_ms,
        }
    }

    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("report: {e}")))
    }
}

/// Susceptibility maps on the reference grid, for export and inspection.
#[derive(Debug, Clone)]
pub struct ArmMaps {
    pub baseline: ScalarVolume,
    pub arms: Vec<(String, ScalarVolume)>,
}

/// Accumulated wall-clock milliseconds per stage.
#[derive(Debug, Default)]
pub struct Timer(pub BTreeMap<String, f64>);

pub fn arm_name(acquisition: &str, method: Method) -> String {
    format!("{acquisition}:{}", method.as_str())
}

/// Demeaned NRMSE of every configured arm against the baseline, over `mask`.
/// `maps.arms` must follow the configured acquisition and method order.
pub fn score(config: &ExperimentConfig, mask: &Mask, maps: &ArmMaps) -> Result<Vec<ArmResult>, CliError> {
    if mask.count() == 0 {
        return Err(CliError::Numerical { stage: "compare", msg: "phantom mask is empty".into() });
    }
    let mut chis = maps.arms.iter();
    let mut arms = Vec::new();
    for acq in &config.tests {
        for &method in &acq.methods {
            let name = arm_name(&acq.name, method);
            let chi = match chis.next() {
                Some((n, chi)) if *n == name => chi,
                _ => return Err(CliError::Usage(format!("no susceptibility map for arm {name}"))),
            };
            let e = nrmse(chi, &maps.baseline, mask, true).map_err(CliError::at("compare"))?;
            log::info!("{name}: NRMSE {e:.5}");
            arms.push(ArmResult { name, acquisition: acq.name.clone(), method, nrmse: e });
        }
    }
    Ok(arms)
}

impl Timer {
    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        *self.0.entry(stage.to_string()).or_default() += start.elapsed().as_secs_f64() * 1e3;
        out
    }
}

/// Everything that does not depend on acquisition seeds.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub reference: ReferenceProtocol,
    pub gridding: GriddingConfig,
    pub constants: PhysicsConstants,
    /// phantom voxelized on the reference grid
    pub phantom: Phantom,
    simulator: AcquisitionSimulator,
    setup_ms: BTreeMap<String, f64>,
}

impl Experiment {
    pub fn prepare(config: &ExperimentConfig) -> Result<Self, CliError> {
        config.validate()?;
        let mut timer = Timer::default();
        let reference = config.reference_protocol().map_err(CliError::at("reference"))?;
        let gridding = config.gridding_config().map_err(CliError::at("gridding"))?;
        let constants = PhysicsConstants::new(config.field_strength_t).map_err(CliError::at("constants"))?;
        let up = config.master_upsample;
        let master_dims = reference.dims().map(|n| n * up);
        let master_voxel = [reference.iso_voxel_mm / up as f64; 3];

        let master = timer.time("phantom", || {
            build_phantom_upsampled(&config.phantom, master_dims, master_voxel, up as f64)
        });
        let master = master.map_err(CliError::at("phantom"))?;
        let phantom = build_phantom(&config.phantom, reference.dims(), [reference.iso_voxel_mm; 3])
            .map_err(CliError::at("phantom"))?;
        let field = timer.time("forward_field", || field_from_chi(&master.chi, SCANNER_B0));
        let field = field.map_err(CliError::at("forward_field"))?;
        let echoes = synth_echoes(&field, &master.magnitude, &config.echo_times_s, &constants)
            .map_err(CliError::at("echoes"))?;
        let simulator = timer.time("simulation_setup", || AcquisitionSimulator::new(&echoes, &gridding));
        let simulator = simulator.map_err(CliError::at("simulation_setup"))?;
        Ok(Experiment {
            config: config.clone(),
            reference,
            gridding,
            constants,
            phantom,
            simulator,
            setup_ms: timer.0,
        })
    }

    /// Runs every arm with the configured seeds, or seeds derived from
    /// `seed` when given.
    pub fn run(&self, seed: Option<u64>) -> Result<(ComparisonReport, ArmMaps), CliError> {
        let mut config = self.config.clone();
        if let Some(s) = seed {
            config.reseed(s);
        }
        let mut timer = Timer(self.setup_ms.clone());
        let tkd = config.tkd;

        let baseline_chi = self.reconstruct(&config, &config.baseline, Method::None, &tkd, &mut timer)?;
        let mut maps = Vec::new();
        for acq in &config.tests {
            for &method in &acq.methods {
                let chi = self.reconstruct(&config, acq, method, &tkd, &mut timer)?;
                maps.push((arm_name(&acq.name, method), chi));
            }
        }
        let maps = ArmMaps { baseline: baseline_chi, arms: maps };
        let mask = &self.phantom.mask;
        let arms = timer.time("compare", || score(&config, mask, &maps))?;
        Ok((ComparisonReport::new(config, mask, arms, timer.0), maps))
    }

    pub fn acquire(&self, config: &ExperimentConfig, acq: &AcquisitionConfig) -> Result<(ProtocolDescriptor, Vec<KSpaceSamples>), CliError> {
        let protocol = config.protocol(acq).map_err(CliError::at("simulate"))?;
        let sigma_k = acq.noise_sigma * (protocol.len() as f64).sqrt();
        let samples = self
            .simulator
            .acquire(&protocol, &self.reference, sigma_k, acq.seed)
            .map_err(CliError::at("simulate"))?;
        Ok((protocol, samples))
    }

    fn reconstruct(
        &self,
        config: &ExperimentConfig,
        acq: &AcquisitionConfig,
        method: Method,
        tkd: &TkdConfig,
        timer: &mut Timer,
    ) -> Result<ScalarVolume, CliError> {
        let (protocol, samples) = timer.time("simulate", || self.acquire(config, acq))?;
        let stage = match method {
            Method::Kreg => "register_kspace",
            Method::Ireg => "register_image",
            Method::None => "reconstruct",
        };
        let registered =
            timer.time(stage, || register_echoes(method, &samples, &protocol, &self.reference, &self.gridding))?;
        timer.time("qsm", || {
            qsm_from_registered(&registered, &protocol, &self.reference, &config.echo_times_s, &self.constants, tkd)
        })
    }
}

/// Echoes after registration.
#[derive(Debug, Clone)]
pub enum Registered {
    /// Complex images on the reference grid.
    Reference(Vec<ComplexVolume>),
    /// Complex images left on the acquisition grid.
    Acquisition(Vec<ComplexVolume>),
    /// Unwrapped phase and magnitude resampled to the reference grid.
    Phase { phase: Vec<ScalarVolume>, magnitude: Vec<ScalarVolume> },
}

pub fn register_echoes(
    method: Method,
    samples: &[KSpaceSamples],
    protocol: &ProtocolDescriptor,
    reference: &ReferenceProtocol,
    gridding: &GriddingConfig,
) -> Result<Registered, CliError> {
    match method {
        Method::Kreg => kspace_register(samples, protocol, reference, gridding)
            .map(Registered::Reference)
            .map_err(CliError::at("register_kspace")),
        Method::None => recon_echoes(samples, protocol).map(Registered::Acquisition),
        Method::Ireg => {
            let images = recon_echoes(samples, protocol)?;
            let (phase, mag) = unwrap_echoes(&images)?;
            let reg = image_register_baseline(&phase, &mag, protocol, reference).map_err(CliError::at("register_image"))?;
            Ok(Registered::Phase { phase: reg.phase, magnitude: reg.magnitude })
        }
    }
}

/// Susceptibility on the reference grid. Images left on the acquisition
/// grid are inverted with that grid's field direction and then resampled.
pub fn qsm_from_registered(
    registered: &Registered,
    protocol: &ProtocolDescriptor,
    reference: &ReferenceProtocol,
    echo_times: &[f64],
    constants: &PhysicsConstants,
    tkd: &TkdConfig,
) -> Result<ScalarVolume, CliError> {
    match registered {
        Registered::Reference(images) => {
            let (phase, mag) = unwrap_echoes(images)?;
            chi_from_phase(&phase, &mag, echo_times, constants, SCANNER_B0, tkd)
        }
        Registered::Phase { phase, magnitude } => chi_from_phase(phase, magnitude, echo_times, constants, SCANNER_B0, tkd),
        Registered::Acquisition(images) => {
            let (phase, mag) = unwrap_echoes(images)?;
            let b0 = b0_in_image_frame(&protocol.rotation);
            let chi = chi_from_phase(&phase, &mag, echo_times, constants, b0, tkd)?;
            if on_reference_grid(protocol, reference) {
                Ok(chi)
            } else {
                resample_to_reference(&chi, protocol, reference)
                    .map(|(v, _)| v)
                    .map_err(CliError::at("register_image"))
            }
        }
    }
}

fn on_reference_grid(p: &ProtocolDescriptor, r: &ReferenceProtocol) -> bool {
    p.rotation.is_identity() && p.dims == r.dims() && p.voxel_size.iter().all(|&v| (v - r.iso_voxel_mm).abs() <= 1e-12 * v)
}

fn recon_echoes(samples: &[KSpaceSamples], protocol: &ProtocolDescriptor) -> Result<Vec<ComplexVolume>, CliError> {
    samples
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let mut v = inverse_fft_reconstruction(s, protocol)?;
            v.echo_times = protocol.echo_times.get(j).map(|&t| vec![t]).unwrap_or_default();
            Ok(v)
        })
        .collect::<kreg_core::Result<_>>()
        .map_err(CliError::at("reconstruct"))
}

/// Unwrapped phase and magnitude of each echo. Phase outside the signal
/// support is zeroed before unwrapping.
pub fn unwrap_echoes(images: &[ComplexVolume]) -> Result<(Vec<ScalarVolume>, Vec<ScalarVolume>), CliError> {
    let first = images
        .first()
        .ok_or_else(|| CliError::Numerical { stage: "unwrap", msg: "no echoes".into() })?;
    let support = support_mask(&first.magnitude(), SUPPORT_FRACTION).map_err(CliError::at("unwrap"))?;
    let mut phase = Vec::with_capacity(images.len());
    let mut mag = Vec::with_capacity(images.len());
    for img in images {
        let mut p = img.phase();
        p.data.iter_mut().zip(&support.data).for_each(|(v, &m)| if !m { *v = 0.0 });
        phase.push(laplacian_unwrap(&p).map_err(CliError::at("unwrap"))?);
        mag.push(img.magnitude());
    }
    Ok((phase, mag))
}

/// Field fit, restricted to the first-echo signal support, followed by TKD.
pub fn chi_from_phase(
    phase: &[ScalarVolume],
    magnitude: &[ScalarVolume],
    echo_times: &[f64],
    constants: &PhysicsConstants,
    b0: [f64; 3],
    tkd: &TkdConfig,
) -> Result<ScalarVolume, CliError> {
    let mut fit = fit_field(phase, magnitude, echo_times, constants).map_err(CliError::at("field_fit"))?;
    if let Some(first) = magnitude.first() {
        let support = support_mask(first, SUPPORT_FRACTION).map_err(CliError::at("field_fit"))?;
        fit.field.data.iter_mut().zip(&support.data).for_each(|(v, &m)| if !m { *v = 0.0 });
    }
    tkd_invert(&fit.field, b0, tkd).map_err(CliError::at("qsm"))
}

/// Mid-axial slice window for susceptibility maps (ppm).
pub fn chi_window(v: &ScalarVolume, mask: &Mask) -> (f64, f64) {
    let peak = v
        .data
        .iter()
        .zip(&mask.data)
        .filter(|(_, &m)| m)
        .map(|(x, _)| x.abs())
        .fold(0.0, f64::max);
    let w = if peak > 0.0 { peak } else { 1.0 };
    (-w, w)
}
