//! Volumetric containers, the KVOL file format, masks and PGM slice export.
//!
//! KVOL layout (little-endian):
//!
//! | field            | type                      |
//! |------------------|---------------------------|
//! | magic            | `b"KVOL"`                 |
//! | version          | `u8` = 1                  |
//! | dtype            | `u8` (1 real32, 2 complex64 interleaved) |
//! | dims             | 3 × `u32`                 |
//! | voxel size (mm)  | 3 × `f32`                 |
//! | echo count `n`   | `u32`                     |
//! | echo times (s)   | `n` × `f32`               |
//! | samples          | x-fastest                 |
//!
//! Samples and header reals are stored as `f32`; in memory they are `f64`.
//! Writing narrows to `f32`, reading widens exactly, so a volume read from
//! disk re-serializes to identical bytes.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use num_complex::Complex64;

use crate::error::{invalid, Error, Result};

pub const KVOL_MAGIC: &[u8; 4] = b"KVOL";
pub const KVOL_VERSION: u8 = 1;

/// Dense 3D grid, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    pub echo_times: Vec<f64>,
    pub data: Vec<T>,
}

pub type ComplexVolume = Volume<Complex64>;
pub type ScalarVolume = Volume<f64>;

impl<T: Clone + Default> Volume<T> {
    pub fn new(dims: [usize; 3], voxel_size: [f64; 3], data: Vec<T>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if data.len() != len {
            return invalid(format!("data length {} does not match dims {dims:?}", data.len()));
        }
        if voxel_size.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return invalid(format!("voxel sizes must be positive, got {voxel_size:?}"));
        }
        Ok(Volume { dims, voxel_size, echo_times: Vec::new(), data })
    }

    pub fn zeros(dims: [usize; 3], voxel_size: [f64; 3]) -> Self {
        Volume {
            dims,
            voxel_size,
            echo_times: Vec::new(),
            data: vec![T::default(); dims.iter().product()],
        }
    }

    /// Fills each voxel from its `(i, j, k)` index.
    pub fn from_fn(dims: [usize; 3], voxel_size: [f64; 3], mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Volume { dims, voxel_size, echo_times: Vec::new(), data }
    }

    pub fn with_echo_times(mut self, echo_times: Vec<f64>) -> Self {
        self.echo_times = echo_times;
        self
    }

    pub fn map<U: Clone + Default>(&self, f: impl Fn(&T) -> U) -> Volume<U> {
        Volume {
            dims: self.dims,
            voxel_size: self.voxel_size,
            echo_times: self.echo_times.clone(),
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T> Volume<T> {
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> &T {
        &self.data[self.index(i, j, k)]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

impl ComplexVolume {
    pub fn magnitude(&self) -> ScalarVolume {
        self.map(|z| z.norm())
    }

    pub fn phase(&self) -> ScalarVolume {
        self.map(|z| z.arg())
    }

    pub fn real_part(&self) -> ScalarVolume {
        self.map(|z| z.re)
    }
}

impl ScalarVolume {
    pub fn to_complex(&self) -> ComplexVolume {
        self.map(|&v| Complex64::new(v, 0.0))
    }
}

/// Boolean region of interest.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub dims: [usize; 3],
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(dims: [usize; 3]) -> Self {
        Mask { dims, data: vec![false; dims.iter().product()] }
    }

    pub fn full(dims: [usize; 3]) -> Self {
        Mask { dims, data: vec![true; dims.iter().product()] }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if self.dims != other.dims {
            return invalid("mask dims differ");
        }
        Ok(Mask {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
        })
    }

    pub fn to_volume(&self, voxel_size: [f64; 3]) -> ScalarVolume {
        Volume {
            dims: self.dims,
            voxel_size,
            echo_times: Vec::new(),
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn from_volume(v: &ScalarVolume) -> Mask {
        Mask { dims: v.dims, data: v.data.iter().map(|&x| x > 0.5).collect() }
    }
}

/// Voxels whose index lies within `radius` (inclusive) of `center`.
pub fn sphere_mask(dims: [usize; 3], center: [f64; 3], radius: f64) -> Mask {
    let r2 = radius * radius;
    let mut data = Vec::with_capacity(dims.iter().product());
    for k in 0..dims[2] {
        let dz = k as f64 - center[2];
        for j in 0..dims[1] {
            let dy = j as f64 - center[1];
            for i in 0..dims[0] {
                let dx = i as f64 - center[0];
                data.push(dx * dx + dy * dy + dz * dz <= r2);
            }
        }
    }
    Mask { dims, data }
}

/// Sample types a KVOL file can carry.
pub trait KvolSample: Sized + Copy {
    const DTYPE: u8;
    const BYTES: usize;
    fn put(&self, out: &mut Vec<u8>);
    fn take(bytes: &[u8]) -> Self;
}

impl KvolSample for f64 {
    const DTYPE: u8 = 1;
    const BYTES: usize = 4;
    fn put(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(*self as f32).to_le_bytes());
    }
    fn take(b: &[u8]) -> Self {
        f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64
    }
}

impl KvolSample for Complex64 {
    const DTYPE: u8 = 2;
    const BYTES: usize = 8;
    fn put(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.re as f32).to_le_bytes());
        out.extend_from_slice(&(self.im as f32).to_le_bytes());
    }
    fn take(b: &[u8]) -> Self {
        Complex64::new(f64::take(&b[..4]), f64::take(&b[4..8]))
    }
}

pub fn encode_vol<T: KvolSample>(v: &Volume<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(64 + v.data.len() * T::BYTES);
    out.extend_from_slice(KVOL_MAGIC);
    out.push(KVOL_VERSION);
    out.push(T::DTYPE);
    for &n in &v.dims {
        let n = u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("dimension {n} exceeds u32")))?;
        out.extend_from_slice(&n.to_le_bytes());
    }
    for &s in &v.voxel_size {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
    out.extend_from_slice(&(v.echo_times.len() as u32).to_le_bytes());
    for &t in &v.echo_times {
        out.extend_from_slice(&(t as f32).to_le_bytes());
    }
    for s in &v.data {
        s.put(&mut out);
    }
    Ok(out)
}

pub fn write_vol<T: KvolSample>(v: &Volume<T>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_vol(v)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// A decoded KVOL file of either dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyVolume {
    Real(ScalarVolume),
    Complex(ComplexVolume),
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, what: &str) -> Result<f64> {
        Ok(f64::take(self.take(4, what)?))
    }

    fn error(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format { offset: offset as u64, msg: msg.into() }
    }
}

pub fn decode_vol(bytes: &[u8]) -> Result<AnyVolume> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != KVOL_MAGIC {
        return Err(c.error(0, "bad magic, expected \"KVOL\""));
    }
    let version = c.u8("version")?;
    if version != KVOL_VERSION {
        return Err(c.error(4, format!("unsupported version {version}")));
    }
    let dtype = c.u8("dtype")?;
    if dtype != f64::DTYPE && dtype != Complex64::DTYPE {
        return Err(c.error(5, format!("unknown dtype {dtype}")));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = c.u32("dims")? as usize;
    }
    let mut voxel_size = [0.0; 3];
    for (axis, v) in voxel_size.iter_mut().enumerate() {
        let at = c.pos;
        *v = c.f32("voxel size")?;
        if !(v.is_finite() && *v > 0.0) {
            return Err(c.error(at, format!("voxel size {axis} is not positive: {v}")));
        }
    }
    let n_te = c.u32("echo count")? as usize;
    let mut echo_times = Vec::with_capacity(n_te.min(1024));
    for _ in 0..n_te {
        echo_times.push(c.f32("echo time")?);
    }
    let len = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let len = len.ok_or_else(|| c.error(6, "dims overflow"))?;
    let data_at = c.pos;
    let volume = if dtype == f64::DTYPE {
        let raw = c.take(len * f64::BYTES, "samples")?;
        AnyVolume::Real(Volume {
            dims,
            voxel_size,
            echo_times,
            data: raw.chunks_exact(f64::BYTES).map(f64::take).collect(),
        })
    } else {
        let raw = c.take(len * Complex64::BYTES, "samples")?;
        AnyVolume::Complex(Volume {
            dims,
            voxel_size,
            echo_times,
            data: raw.chunks_exact(Complex64::BYTES).map(Complex64::take).collect(),
        })
    };
    if c.pos != bytes.len() {
        return Err(c.error(c.pos, format!(
            "{} trailing bytes after {} samples starting at {data_at}",
            bytes.len() - c.pos,
            len
        )));
    }
    Ok(volume)
}

pub fn read_vol(path: impl AsRef<Path>) -> Result<AnyVolume> {
    decode_vol(&fs::read(path)?)
}

pub fn read_complex(path: impl AsRef<Path>) -> Result<ComplexVolume> {
    match read_vol(path)? {
        AnyVolume::Complex(v) => Ok(v),
        AnyVolume::Real(_) => Err(Error::Format { offset: 5, msg: "expected complex64 dtype, found real32".into() }),
    }
}

pub fn read_scalar(path: impl AsRef<Path>) -> Result<ScalarVolume> {
    match read_vol(path)? {
        AnyVolume::Real(v) => Ok(v),
        AnyVolume::Complex(_) => Err(Error::Format { offset: 5, msg: "expected real32 dtype, found complex64".into() }),
    }
}

/// Extracts a 2D slice perpendicular to `axis` as `(width, height, values)`.
pub fn slice(volume: &ScalarVolume, axis: usize, index: usize) -> Result<(usize, usize, Vec<f64>)> {
    if axis > 2 {
        return invalid(format!("axis must be 0, 1 or 2, got {axis}"));
    }
    if index >= volume.dims[axis] {
        return invalid(format!("slice {index} out of range for axis {axis} of length {}", volume.dims[axis]));
    }
    let [nx, ny, nz] = volume.dims;
    let (w, h) = match axis {
        0 => (ny, nz),
        1 => (nx, nz),
        _ => (nx, ny),
    };
    let mut out = Vec::with_capacity(w * h);
    for row in 0..h {
        for col in 0..w {
            let (i, j, k) = match axis {
                0 => (index, col, row),
                1 => (col, index, row),
                _ => (col, row, index),
            };
            out.push(*volume.get(i, j, k));
        }
    }
    Ok((w, h, out))
}

/// Maps `v` to a 16-bit gray level through the window `[lo, hi]`.
#[inline]
pub fn window_level(v: f64, lo: f64, hi: f64) -> u16 {
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    (65535.0 * t).round() as u16
}

/// Encodes a slice as a binary 16-bit PGM (`P5`, big-endian samples).
pub fn encode_slice_pgm(volume: &ScalarVolume, axis: usize, index: usize, window: (f64, f64)) -> Result<Vec<u8>> {
    let (lo, hi) = window;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return invalid(format!("window must satisfy lo < hi, got ({lo}, {hi})"));
    }
    let (w, h, values) = slice(volume, axis, index)?;
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    out.reserve(values.len() * 2);
    for v in values {
        out.extend_from_slice(&window_level(v, lo, hi).to_be_bytes());
    }
    Ok(out)
}

pub fn export_slice_pgm(
    volume: &ScalarVolume,
    axis: usize,
    index: usize,
    window: (f64, f64),
    path: impl AsRef<Path>,
) -> Result<()> {
    let bytes = encode_slice_pgm(volume, axis, index, window)?;
    fs::write(path, bytes)?;
    Ok(())
}
