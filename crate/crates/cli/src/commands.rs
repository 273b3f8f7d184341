//! Subcommands of the `kreg` binary.
//!
//! File layout inside the output directory:
//!
//! | file | contents |
//! |------|----------|
//! | `phantom_{chi,magnitude,mask}.kvol` | phantom on the reference grid |
//! | `kspace_<acq>_e<j>.kvol` | lattice-ordered k-space samples of echo `j` |
//! | `reg_<acq>_<method>_e<j>.kvol` | registered complex echo (`kreg`, `none`) |
//! | `reg_<acq>_ireg_{phase,mag}_e<j>.kvol` | resampled unwrapped phase and magnitude |
//! | `chi_<acq>_<method>.kvol` | susceptibility on the reference grid |
//! | `report.json` | comparison report |
//! | `qsm_*.pgm`, `absdiff_*.pgm` | mid-axial slices |

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use kreg_core::forward::{build_phantom, PhysicsConstants};
use kreg_core::geometry::{cartesian_kspace_lattice, ProtocolDescriptor};
use kreg_core::nufft::KSpaceSamples;
use kreg_core::volume::{export_slice_pgm, read_complex, read_scalar, write_vol, ComplexVolume, Mask, ScalarVolume};

use crate::config::{default_config, AcquisitionConfig, ExperimentConfig, Method};
use crate::error::CliError;
use crate::experiment::{
    arm_name, chi_window, qsm_from_registered, register_echoes, score, ArmMaps, ComparisonReport, Experiment, Registered,
};

#[derive(Debug, Parser)]
#[command(name = "kreg", version, about = "k-space registration experiments for multi-protocol QSM")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// experiment configuration (JSON); the built-in default when omitted
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// output directory, overriding `output_dir` from the config
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// derive every acquisition seed from this value
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub method: Option<Method>,
    #[arg(long, global = true, env = "KREG_THREADS")]
    pub threads: Option<usize>,
    /// directory holding the previous stage's files (defaults to the output directory)
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    /// acquisition name from the config (defaults to the first test acquisition)
    #[arg(long, global = true)]
    pub acquisition: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Voxelize the phantom on the reference grid
    Phantom,
    /// Simulate k-space for every acquisition
    Simulate,
    /// Register one acquisition's echoes to the reference grid
    Register,
    /// Susceptibility from registered echoes
    Qsm,
    /// Score susceptibility maps against the baseline
    Compare,
    /// All stages in memory
    Pipeline,
}

/// Runs the command on a dedicated thread pool.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(cli))
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => default_config(),
    };
    let out = cli.out.clone().unwrap_or_else(|| config.output_dir.clone());
    std::fs::create_dir_all(&out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let input = cli.input.clone().unwrap_or_else(|| out.clone());
    let ctx = Context { config, out, input };
    match cli.command {
        Command::Phantom => ctx.phantom(),
        Command::Simulate => ctx.simulate(cli.seed),
        Command::Register => ctx.register(cli.acquisition.as_deref(), cli.method.unwrap_or(Method::Kreg)),
        Command::Qsm => ctx.qsm(cli.acquisition.as_deref(), cli.method.unwrap_or(Method::Kreg)),
        Command::Compare => ctx.compare(),
        Command::Pipeline => ctx.pipeline(cli.seed),
    }
}

struct Context {
    config: ExperimentConfig,
    out: PathBuf,
    input: PathBuf,
}

impl Context {
    fn out(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn phantom(&self) -> Result<(), CliError> {
        let reference = self.config.reference_protocol().map_err(CliError::at("phantom"))?;
        let voxel = [reference.iso_voxel_mm; 3];
        let phantom = build_phantom(&self.config.phantom, reference.dims(), voxel).map_err(CliError::at("phantom"))?;
        write(&phantom.chi, &self.out("phantom_chi.kvol"))?;
        write(&phantom.magnitude, &self.out("phantom_magnitude.kvol"))?;
        write(&phantom.mask.to_volume(voxel), &self.out("phantom_mask.kvol"))?;
        log::info!("phantom mask: {} voxels", phantom.mask.count());
        Ok(())
    }

    fn simulate(&self, seed: Option<u64>) -> Result<(), CliError> {
        let mut config = self.config.clone();
        if let Some(s) = seed {
            config.reseed(s);
        }
        let exp = Experiment::prepare(&config)?;
        for acq in std::iter::once(&config.baseline).chain(&config.tests) {
            let (protocol, samples) = exp.acquire(&config, acq)?;
            for (j, s) in samples.into_iter().enumerate() {
                let mut v = ComplexVolume::new(protocol.dims, protocol.voxel_size, s.values).map_err(CliError::at("simulate"))?;
                v.echo_times = protocol.echo_times.get(j).map(|&t| vec![t]).unwrap_or_default();
                write(&v, &self.out(&format!("kspace_{}_e{j}.kvol", acq.name)))?;
            }
        }
        Ok(())
    }

    fn acquisition(&self, name: Option<&str>) -> Result<&AcquisitionConfig, CliError> {
        let all = || std::iter::once(&self.config.baseline).chain(&self.config.tests);
        match name {
            None => Ok(&self.config.tests[0]),
            Some(n) => all()
                .find(|a| a.name == n)
                .ok_or_else(|| CliError::Usage(format!("unknown acquisition {n:?}"))),
        }
    }

    fn protocol(&self, acq: &AcquisitionConfig) -> Result<ProtocolDescriptor, CliError> {
        self.config.protocol(acq).map_err(|e| CliError::Config(format!("{}: {e}", acq.name)))
    }

    fn register(&self, acquisition: Option<&str>, method: Method) -> Result<(), CliError> {
        let acq = self.acquisition(acquisition)?;
        let protocol = self.protocol(acq)?;
        let reference = self.config.reference_protocol().map_err(CliError::at("register"))?;
        let gridding = self.config.gridding_config().map_err(CliError::at("register"))?;
        let lattice = cartesian_kspace_lattice(protocol.dims).map_err(CliError::at("register"))?;
        let mut samples = Vec::new();
        for j in 0..self.config.echo_times_s.len() {
            let path = self.input.join(format!("kspace_{}_e{j}.kvol", acq.name));
            let v = input_complex(&path)?;
            if v.dims != protocol.dims {
                return Err(CliError::Usage(format!(
                    "{}: dims {:?} do not match the {:?} acquisition lattice",
                    path.display(),
                    v.dims,
                    protocol.dims
                )));
            }
            samples.push(KSpaceSamples::new(lattice.clone(), v.data).map_err(CliError::at("register"))?);
        }
        let prefix = format!("reg_{}_{}", acq.name, method.as_str());
        match register_echoes(method, &samples, &protocol, &reference, &gridding)? {
            Registered::Reference(images) | Registered::Acquisition(images) => {
                for (j, v) in images.iter().enumerate() {
                    write(v, &self.out(&format!("{prefix}_e{j}.kvol")))?;
                }
            }
            Registered::Phase { phase, magnitude } => {
                for (j, (p, m)) in phase.iter().zip(&magnitude).enumerate() {
                    write(p, &self.out(&format!("{prefix}_phase_e{j}.kvol")))?;
                    write(m, &self.out(&format!("{prefix}_mag_e{j}.kvol")))?;
                }
            }
        }
        Ok(())
    }

    fn qsm(&self, acquisition: Option<&str>, method: Method) -> Result<(), CliError> {
        let acq = self.acquisition(acquisition)?;
        let protocol = self.protocol(acq)?;
        let reference = self.config.reference_protocol().map_err(CliError::at("qsm"))?;
        let constants = PhysicsConstants::new(self.config.field_strength_t).map_err(CliError::at("qsm"))?;
        let prefix = format!("reg_{}_{}", acq.name, method.as_str());
        let echoes = 0..self.config.echo_times_s.len();
        let file = |suffix: String| self.input.join(format!("{prefix}_{suffix}.kvol"));
        let registered = match method {
            Method::Ireg => Registered::Phase {
                phase: echoes.clone().map(|j| input_scalar(&file(format!("phase_e{j}")))).collect::<Result<_, _>>()?,
                magnitude: echoes.map(|j| input_scalar(&file(format!("mag_e{j}")))).collect::<Result<_, _>>()?,
            },
            Method::Kreg => {
                Registered::Reference(echoes.map(|j| input_complex(&file(format!("e{j}")))).collect::<Result<_, _>>()?)
            }
            Method::None => Registered::Acquisition(
                echoes.map(|j| input_complex(&file(format!("e{j}")))).collect::<Result<_, _>>()?,
            ),
        };
        let chi = qsm_from_registered(&registered, &protocol, &reference, &self.config.echo_times_s, &constants, &self.config.tkd)?;
        write(&chi, &self.out(&format!("chi_{}_{}.kvol", acq.name, method.as_str())))
    }

    fn compare(&self) -> Result<(), CliError> {
        let start = Instant::now();
        let reference = self.config.reference_protocol().map_err(CliError::at("compare"))?;
        let phantom = build_phantom(&self.config.phantom, reference.dims(), [reference.iso_voxel_mm; 3])
            .map_err(CliError::at("compare"))?;
        let chi = |acq: &str, method: Method| {
            input_scalar(&self.input.join(format!("chi_{acq}_{}.kvol", method.as_str())))
        };
        let baseline = chi(&self.config.baseline.name, Method::None)?;
        let mut arms = Vec::new();
        for acq in &self.config.tests {
            for &method in &acq.methods {
                arms.push((arm_name(&acq.name, method), chi(&acq.name, method)?));
            }
        }
        let maps = ArmMaps { baseline, arms };
        let scored = score(&self.config, &phantom.mask, &maps)?;
        let timings = [("compare".to_string(), start.elapsed().as_secs_f64() * 1e3)].into();
        let report = ComparisonReport::new(self.config.clone(), &phantom.mask, scored, timings);
        self.emit(&report, &maps, &phantom.mask)
    }

    fn pipeline(&self, seed: Option<u64>) -> Result<(), CliError> {
        let exp = Experiment::prepare(&self.config)?;
        let (report, maps) = exp.run(seed)?;
        write(&maps.baseline, &self.out(&format!("chi_{}_none.kvol", self.config.baseline.name)))?;
        for (name, chi) in &maps.arms {
            write(chi, &self.out(&format!("chi_{}.kvol", name.replace(':', "_"))))?;
        }
        self.emit(&report, &maps, &exp.phantom.mask)
    }

    /// Report to stdout and `report.json`, plus mid-axial slices.
    fn emit(&self, report: &ComparisonReport, maps: &ArmMaps, mask: &Mask) -> Result<(), CliError> {
        let json = report.to_json();
        std::fs::write(self.out("report.json"), &json).map_err(|e| CliError::Io(format!("report.json: {e}")))?;
        println!("{json}");
        let window = chi_window(&maps.baseline, mask);
        let mid = maps.baseline.dims[2] / 2;
        slice(&maps.baseline, window, &self.out("qsm_baseline.pgm"), mid)?;
        for (name, chi) in &maps.arms {
            let file = name.replace(':', "_");
            slice(chi, window, &self.out(&format!("qsm_{file}.pgm")), mid)?;
            let diff = ScalarVolume {
                data: chi.data.iter().zip(&maps.baseline.data).map(|(a, b)| (a - b).abs()).collect(),
                ..chi.clone()
            };
            slice(&diff, (0.0, window.1), &self.out(&format!("absdiff_{file}.pgm")), mid)?;
        }
        Ok(())
    }
}

fn write<T: kreg_core::volume::KvolSample>(v: &kreg_core::volume::Volume<T>, path: &Path) -> Result<(), CliError> {
    write_vol(v, path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn slice(v: &ScalarVolume, window: (f64, f64), path: &Path, index: usize) -> Result<(), CliError> {
    export_slice_pgm(v, 2, index, window, path).map_err(|e| match e {
        kreg_core::Error::Io(io) => CliError::Io(format!("{}: {io}", path.display())),
        other => CliError::Numerical { stage: "export", msg: other.to_string() },
    })
}

/// A missing input is a usage error; an unreadable one is an I/O error.
fn check_input(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("missing input {}", path.display())))
    }
}

fn input_complex(path: &Path) -> Result<ComplexVolume, CliError> {
    check_input(path)?;
    read_complex(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn input_scalar(path: &Path) -> Result<ScalarVolume, CliError> {
    check_input(path)?;
    read_scalar(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
