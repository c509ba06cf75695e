//! Separable neighborhood filters with border replication.

use crate::tensor::Dims;

/// `(outer, len, inner)` such that `data` reads as `[outer][len][inner]` along `axis`.
fn layout(dims: Dims, axis: usize) -> (usize, usize, usize) {
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

/// Runs `op(src, dst, inner)` for every block of `len` planes along `axis`, where
/// plane `t` of a block occupies `[t * inner, (t + 1) * inner)`.
fn along_axis(
    data: &[f64],
    dims: Dims,
    axis: usize,
    mut op: impl FnMut(&[f64], &mut [f64], usize, usize),
) -> Vec<f64> {
    let (outer, len, inner) = layout(dims, axis);
    let block = len * inner;
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        let range = o * block..(o + 1) * block;
        op(&data[range.clone()], &mut out[range], len, inner);
    }
    out
}

#[inline]
fn add_scaled(acc: &mut [f64], src: &[f64], k: f64) {
    acc.iter_mut().zip(src).for_each(|(a, s)| *a += k * s);
}

/// `out[i] = Σ_{|d| ≤ r} in[clamp(i + d)]` along one axis, as a running window.
fn box_axis(data: &[f64], dims: Dims, axis: usize, radius: usize) -> Vec<f64> {
    if layout(dims, axis).2 == 1 {
        return along_axis(data, dims, axis, |src, dst, len, _| {
            let r = radius as isize;
            let at = |t: isize| src[t.clamp(0, len as isize - 1) as usize];
            let mut acc: f64 = (-r..=r).map(at).sum();
            for (i, slot) in dst.iter_mut().enumerate() {
                *slot = acc;
                let i = i as isize;
                acc += at(i + r + 1) - at(i - r);
            }
        });
    }
    along_axis(data, dims, axis, |src, dst, len, inner| {
        let plane = |t: isize| {
            let t = t.clamp(0, len as isize - 1) as usize;
            &src[t * inner..(t + 1) * inner]
        };
        let r = radius as isize;
        let mut acc = vec![0.0; inner];
        for t in -r..=r {
            add_scaled(&mut acc, plane(t), 1.0);
        }
        for i in 0..len {
            dst[i * inner..(i + 1) * inner].copy_from_slice(&acc);
            let i = i as isize;
            add_scaled(&mut acc, plane(i + r + 1), 1.0);
            add_scaled(&mut acc, plane(i - r), -1.0);
        }
    })
}

/// Transpose of [`box_axis`]: zero-padded box sums evaluated on the extended
/// line, with the overhang folded back onto the end nodes.
fn box_axis_adjoint(data: &[f64], dims: Dims, axis: usize, radius: usize) -> Vec<f64> {
    if layout(dims, axis).2 == 1 {
        return along_axis(data, dims, axis, |src, dst, len, _| {
            let (r, n) = (radius as isize, len as isize);
            let mut acc = 0.0;
            for m in -r..n + r {
                if m + r < n {
                    acc += src[(m + r) as usize];
                }
                dst[m.clamp(0, n - 1) as usize] += acc;
                if m - r >= 0 && m - r < n {
                    acc -= src[(m - r) as usize];
                }
            }
        });
    }
    along_axis(data, dims, axis, |src, dst, len, inner| {
        let r = radius as isize;
        let n = len as isize;
        let plane = |t: isize| &src[t as usize * inner..(t as usize + 1) * inner];
        // ext(m) = Σ_{|i - m| ≤ r, 0 ≤ i < n} g[i], for m in -r .. n + r
        let mut acc = vec![0.0; inner];
        let mut m = -r;
        while m < n + r {
            let enter = m + r;
            if enter < n {
                add_scaled(&mut acc, plane(enter), 1.0);
            }
            let target = m.clamp(0, n - 1) as usize;
            add_scaled(&mut dst[target * inner..(target + 1) * inner], &acc, 1.0);
            let leave = m - r;
            if leave >= 0 && leave < n {
                add_scaled(&mut acc, plane(leave), -1.0);
            }
            m += 1;
        }
    })
}

/// Unnormalized `(2r+1)³` box sum with clamped indexing.
pub fn box_sum(data: &[f64], dims: Dims, radius: usize) -> Vec<f64> {
    let a = box_axis(data, dims, 0, radius);
    let b = box_axis(&a, dims, 1, radius);
    box_axis(&b, dims, 2, radius)
}

/// Transpose of [`box_sum`]: `<box_sum(x), y> = <x, box_sum_adjoint(y)>`.
pub fn box_sum_adjoint(data: &[f64], dims: Dims, radius: usize) -> Vec<f64> {
    let a = box_axis_adjoint(data, dims, 2, radius);
    let b = box_axis_adjoint(&a, dims, 1, radius);
    box_axis_adjoint(&b, dims, 0, radius)
}

/// Separable Gaussian blur (kernel truncated at 3σ, clamped borders).
pub fn gaussian_blur(data: &[f64], dims: Dims, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let mut out = data.to_vec();
    for axis in 0..3 {
        out = along_axis(&out, dims, axis, |src, dst, len, inner| {
            for i in 0..len {
                let row = &mut dst[i * inner..(i + 1) * inner];
                for (t, &k) in kernel.iter().enumerate() {
                    let s = (i as isize + t as isize - radius).clamp(0, len as isize - 1) as usize;
                    add_scaled(row, &src[s * inner..(s + 1) * inner], k);
                }
            }
        });
    }
    out
}

/// Applies `f(lo, mid, hi)` with clamped neighbors along `axis`.
fn three_point(
    data: &[f64],
    dims: Dims,
    axis: usize,
    f: impl Fn(f64, f64, f64) -> f64,
) -> Vec<f64> {
    along_axis(data, dims, axis, |src, dst, len, inner| {
        for i in 0..len {
            let lo = i.saturating_sub(1) * inner;
            let hi = (i + 1).min(len - 1) * inner;
            let mid = i * inner;
            for e in 0..inner {
                dst[mid + e] = f(src[lo + e], src[mid + e], src[hi + e]);
            }
        }
    })
}

/// Central difference along `axis` with clamped neighbors: `(v[i+1] - v[i-1]) / 2`.
pub fn central_difference(data: &[f64], dims: Dims, axis: usize) -> Vec<f64> {
    three_point(data, dims, axis, |lo, _, hi| 0.5 * (hi - lo))
}

/// Six-neighbor Laplacian with clamped neighbors.
pub fn laplacian(data: &[f64], dims: Dims) -> Vec<f64> {
    let mut acc = vec![0.0; data.len()];
    for axis in 0..3 {
        let second = three_point(data, dims, axis, |lo, mid, hi| lo + hi - 2.0 * mid);
        acc.iter_mut().zip(&second).for_each(|(a, s)| *a += s);
    }
    acc
}
