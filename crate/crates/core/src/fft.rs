//! Multithreaded 3D FFTs over x-fastest flat buffers.
//!
//! Every 1D line is transformed independently with the same plan, so the
//! result does not depend on how rayon schedules the lines.

use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftDirection, FftPlanner};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `Σ f(x) e^{-iθ}`
    Forward,
    /// `Σ F(k) e^{+iθ}`, unnormalized
    Inverse,
}

fn plan(n: usize, dir: Direction) -> Arc<dyn Fft<f64>> {
    let mut planner = FftPlanner::new();
    match dir {
        Direction::Forward => planner.plan_fft(n, FftDirection::Forward),
        Direction::Inverse => planner.plan_fft(n, FftDirection::Inverse),
    }
}

/// Unnormalized in-place 3D transform.
pub fn fft3(data: &mut [Complex64], dims: [usize; 3], dir: Direction) {
    assert_eq!(data.len(), dims.iter().product::<usize>(), "buffer does not match dims");
    if data.is_empty() {
        return;
    }
    for axis in 0..3 {
        if dims[axis] > 1 {
            transform_axis(data, dims, axis, dir);
        }
    }
}

fn transform_axis(data: &mut [Complex64], dims: [usize; 3], axis: usize, dir: Direction) {
    let n = dims[axis];
    let fft = plan(n, dir);
    let scratch_len = fft.get_inplace_scratch_len();
    let zero = Complex64::new(0.0, 0.0);

    if axis == 0 {
        // Lines are contiguous; hand each worker a run of whole lines.
        let lines_per_task = (4096 / n).max(1);
        data.par_chunks_mut(n * lines_per_task).for_each_init(
            || vec![zero; scratch_len],
            |scratch, chunk| fft.process_with_scratch(chunk, scratch),
        );
        return;
    }

    let stride: usize = dims[..axis].iter().product();
    let outer: usize = dims[axis + 1..].iter().product();
    let block = stride * n;
    if outer >= rayon::current_num_threads() {
        data.par_chunks_mut(block).for_each_init(
            || (vec![zero; scratch_len], vec![zero; n]),
            |(scratch, line), chunk| {
                for inner in 0..stride {
                    for (t, v) in line.iter_mut().enumerate() {
                        *v = chunk[inner + t * stride];
                    }
                    fft.process_with_scratch(line, scratch);
                    for (t, v) in line.iter().enumerate() {
                        chunk[inner + t * stride] = *v;
                    }
                }
            },
        );
        return;
    }

    // Few outer blocks (typically the last axis): gather lines, transform in
    // parallel, scatter back.
    for chunk in data.chunks_mut(block) {
        let snapshot: &[Complex64] = chunk;
        let lines: Vec<Vec<Complex64>> = (0..stride)
            .into_par_iter()
            .map_init(
                || vec![zero; scratch_len],
                |scratch, inner| {
                    let mut line: Vec<Complex64> = (0..n).map(|t| snapshot[inner + t * stride]).collect();
                    fft.process_with_scratch(&mut line, scratch);
                    line
                },
            )
            .collect();
        for (inner, line) in lines.into_iter().enumerate() {
            for (t, v) in line.into_iter().enumerate() {
                chunk[inner + t * stride] = v;
            }
        }
    }
}

/// Circularly shifts a volume: `out[(n + shift) mod N] = in[n]` per axis.
pub fn roll3(data: &[Complex64], dims: [usize; 3], shift: [isize; 3]) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); data.len()];
    let target = |n: usize, axis: usize| -> usize {
        (n as isize + shift[axis]).rem_euclid(dims[axis] as isize) as usize
    };
    let xs: Vec<usize> = (0..dims[0]).map(|i| target(i, 0)).collect();
    for k in 0..dims[2] {
        let tk = target(k, 2);
        for j in 0..dims[1] {
            let tj = target(j, 1);
            let src = dims[0] * (j + dims[1] * k);
            let dst = dims[0] * (tj + dims[1] * tk);
            for (i, &ti) in xs.iter().enumerate() {
                out[dst + ti] = data[src + i];
            }
        }
    }
    out
}

fn centers(dims: [usize; 3]) -> [isize; 3] {
    dims.map(|n| (n / 2) as isize)
}

/// `S[k] = Σ_x f(x) e^{-i l_k·x}` with both image and spectrum on centered
/// index grids (`x = n - N/2`, `l_k = 2π (k - N/2) / N`).
pub fn centered_fft3(data: &[Complex64], dims: [usize; 3]) -> Vec<Complex64> {
    let c = centers(dims);
    let mut work = roll3(data, dims, c.map(|v| -v));
    fft3(&mut work, dims, Direction::Forward);
    roll3(&work, dims, c)
}

/// Inverse of [`centered_fft3`], including the `1/N` factor.
pub fn centered_ifft3(spectrum: &[Complex64], dims: [usize; 3]) -> Vec<Complex64> {
    let c = centers(dims);
    let mut work = roll3(spectrum, dims, c.map(|v| -v));
    fft3(&mut work, dims, Direction::Inverse);
    let scale = 1.0 / dims.iter().product::<usize>() as f64;
    work.iter_mut().for_each(|v| *v *= scale);
    roll3(&work, dims, c)
}

/// Signed DFT index of bin `k` in an unshifted length-`n` transform.
#[inline]
pub fn signed_index(k: usize, n: usize) -> f64 {
    if k < n.div_ceil(2) {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn direct(data: &[Complex64], dims: [usize; 3], centered: bool) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); data.len()];
        let c = dims.map(|n| if centered { (n / 2) as f64 } else { 0.0 });
        let l = |k: usize, a: usize| 2.0 * PI * (k as f64 - c[a]) / dims[a] as f64;
        for kz in 0..dims[2] {
            for ky in 0..dims[1] {
                for kx in 0..dims[0] {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for z in 0..dims[2] {
                        for y in 0..dims[1] {
                            for x in 0..dims[0] {
                                let th = l(kx, 0) * (x as f64 - c[0])
                                    + l(ky, 1) * (y as f64 - c[1])
                                    + l(kz, 2) * (z as f64 - c[2]);
                                acc += data[x + dims[0] * (y + dims[1] * z)] * Complex64::from_polar(1.0, -th);
                            }
                        }
                    }
                    out[kx + dims[0] * (ky + dims[1] * kz)] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn centered_fft_matches_direct_sum_even_and_odd() {
        for dims in [[4, 6, 2], [5, 3, 4], [1, 7, 3]] {
            let n: usize = dims.iter().product();
            let data: Vec<Complex64> = (0..n)
                .map(|i| Complex64::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()))
                .collect();
            let fast = centered_fft3(&data, dims);
            let slow = direct(&data, dims, true);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).norm() < 1e-10, "{dims:?}: {a} vs {b}");
            }
            let back = centered_ifft3(&fast, dims);
            for (a, b) in back.iter().zip(&data) {
                assert!((a - b).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn unshifted_fft_matches_direct_sum_on_both_axis_paths() {
        // a single z block goes through the gather path, many blocks through the chunked one
        for dims in [[3, 4, 64], [2, 64, 3]] {
            let n: usize = dims.iter().product();
            let data: Vec<Complex64> = (0..n).map(|i| Complex64::new(i as f64, -(i as f64).sqrt())).collect();
            let mut fast = data.clone();
            fft3(&mut fast, dims, Direction::Forward);
            let slow = direct(&data, dims, false);
            for (x, y) in fast.iter().zip(&slow) {
                assert!((x - y).norm() < 1e-8 * (1.0 + y.norm()));
            }
        }
    }

    #[test]
    fn signed_indices() {
        let even: Vec<f64> = (0..4).map(|k| signed_index(k, 4)).collect();
        assert_eq!(even, vec![0.0, 1.0, -2.0, -1.0]);
        let odd: Vec<f64> = (0..5).map(|k| signed_index(k, 5)).collect();
        assert_eq!(odd, vec![0.0, 1.0, 2.0, -2.0, -1.0]);
    }
}
