//! Separable Gaussian smoothing with edge renormalization.
//!
//! At the borders the kernel is truncated to the in-range taps and the
//! weights renormalized, so constants are preserved exactly and no values
//! outside the input range are introduced.

use ndarray::{Array1, Array3, Axis, NdFloat};

/// Normalized 1D Gaussian taps over offsets `-radius..=radius`.
pub(crate) fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let mut k: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn smooth_axis<F: NdFloat>(data: &Array3<F>, axis: usize, kernel: &[f64]) -> Array3<F> {
    let radius = kernel.len() / 2;
    let len = data.len_of(Axis(axis));
    let mut out = data.clone();
    // lanes along `axis`; each lane filtered independently
    for (lane_in, mut lane_out) in data
        .lanes(Axis(axis))
        .into_iter()
        .zip(out.lanes_mut(Axis(axis)).into_iter())
    {
        let lane: Array1<F> = lane_in.to_owned();
        for i in 0..len {
            let mut acc = 0.0f64;
            let mut wsum = 0.0f64;
            for (k, &w) in kernel.iter().enumerate() {
                let j = i as isize + k as isize - radius as isize;
                if j >= 0 && (j as usize) < len {
                    acc += w * lane[j as usize].to_f64().unwrap();
                    wsum += w;
                }
            }
            lane_out[i] = F::from(acc / wsum).unwrap();
        }
    }
    out
}

/// Smooths a 3D field with an isotropic Gaussian of `sigma` voxels,
/// truncated at `radius` taps per side.
pub(crate) fn smooth3<F: NdFloat>(data: &Array3<F>, sigma: f64, radius: usize) -> Array3<F> {
    if sigma <= 0.0 || radius == 0 {
        return data.clone();
    }
    let kernel = gaussian_kernel(sigma, radius);
    let mut out = smooth_axis(data, 0, &kernel);
    out = smooth_axis(&out, 1, &kernel);
    smooth_axis(&out, 2, &kernel)
}

/// Default truncation radius: 3 sigma, at least one tap.
pub(crate) fn default_radius(sigma: f64) -> usize {
    (3.0 * sigma).ceil().max(1.0) as usize
}
