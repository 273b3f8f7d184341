//! k-space registration of multi-echo MRI volumes for susceptibility mapping.

pub mod error;
pub mod fft;
pub mod forward;
pub mod geometry;
pub mod nufft;
pub mod qsm;
pub mod registration;
pub mod volume;

pub use error::{Error, Result};
pub use forward::{PhantomSpec, PhysicsConstants, Primitive};
pub use geometry::{KSpaceLocations, ProtocolDescriptor, ReferenceProtocol, RotationMatrix};
pub use nufft::{GriddingConfig, KSpaceSamples};
pub use qsm::TkdConfig;
pub use volume::{ComplexVolume, Mask, ScalarVolume, Volume};
