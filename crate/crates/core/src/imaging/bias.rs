use ndarray::{Array3, Axis, Zip};

use super::{ImagingError, Volume};

/// Voxels above this fraction of the volume maximum form the foreground mask.
pub const FOREGROUND_FRACTION: f64 = 0.05;

pub fn foreground_mask(volume: &Volume) -> Array3<bool> {
    let (_, max) = volume.min_max();
    let threshold = FOREGROUND_FRACTION * max;
    volume.voxels().mapv(|v| max > 0.0 && v > threshold)
}

/// Coefficient of variation (population SD / mean) over the foreground mask.
/// `None` when the mask is empty or its mean is zero.
pub fn foreground_cv(volume: &Volume) -> Option<f64> {
    let mask = foreground_mask(volume);
    let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
    Zip::from(volume.voxels()).and(&mask).for_each(|&v, &m| {
        if m {
            n += 1;
            sum += v;
            sq += v * v;
        }
    });
    if n == 0 {
        return None;
    }
    let mean = sum / n as f64;
    if mean == 0.0 {
        return None;
    }
    let var = (sq / n as f64 - mean * mean).max(0.0);
    Some(var.sqrt() / mean)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable Gaussian filter with per-axis sigma in voxels; zero padding at the borders.
pub fn gaussian_smooth(data: &Array3<f64>, sigma_vox: [f64; 3]) -> Array3<f64> {
    let mut current = data.clone();
    for (axis, &sigma) in sigma_vox.iter().enumerate() {
        if sigma <= 0.0 {
            continue;
        }
        let kernel = gaussian_kernel(sigma);
        let radius = (kernel.len() / 2) as isize;
        let mut out = Array3::zeros(current.dim());
        for (src, mut dst) in current
            .lanes(Axis(axis))
            .into_iter()
            .zip(out.lanes_mut(Axis(axis)))
        {
            let n = src.len() as isize;
            for i in 0..n {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let j = i + k as isize - radius;
                    if (0..n).contains(&j) {
                        acc += w * src[j as usize];
                    }
                }
                dst[i as usize] = acc;
            }
        }
        current = out;
    }
    current
}

/// Removes a smooth multiplicative intensity field.
///
/// Foreground voxels are log-transformed, the masked log image is smoothed by a
/// normalized Gaussian convolution (sigma `smoothing_scale` mm) and subtracted,
/// and the result is exponentiated and rescaled so the foreground mean is
/// unchanged. Background voxels pass through untouched.
pub fn correct_bias_field(volume: &Volume, smoothing_scale: f64) -> Result<Volume, ImagingError> {
    if !(smoothing_scale.is_finite() && smoothing_scale > 0.0) {
        return Err(ImagingError::InvalidConfig(format!(
            "smoothing scale must be positive, got {smoothing_scale}"
        )));
    }
    let (min, _) = volume.min_max();
    if min < 0.0 {
        return Err(ImagingError::NegativeIntensity(min));
    }
    let mask = foreground_mask(volume);
    let count = mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Ok(volume.clone());
    }

    let vox = volume.voxels();
    let log_img = Zip::from(vox).and(&mask).map_collect(|&v, &m| if m { v.ln() } else { 0.0 });
    let weight = mask.mapv(|m| if m { 1.0 } else { 0.0 });
    let sp = volume.spacing();
    let sigma = std::array::from_fn(|a| smoothing_scale / sp[a]);
    let num = gaussian_smooth(&log_img, sigma);
    let den = gaussian_smooth(&weight, sigma);

    let mut corrected = vox.clone();
    Zip::from(&mut corrected)
        .and(&log_img)
        .and(&num)
        .and(&den)
        .and(&mask)
        .for_each(|c, &l, &n, &d, &m| {
            if m && d > 0.0 {
                *c = (l - n / d).exp();
            }
        });

    let (mut before, mut after) = (0.0, 0.0);
    Zip::from(vox).and(&corrected).and(&mask).for_each(|&v, &c, &m| {
        if m {
            before += v;
            after += c;
        }
    });
    let scale = before / after;
    Zip::from(&mut corrected).and(&mask).for_each(|c, &m| {
        if m {
            *c *= scale;
        }
    });
    Volume::new(corrected, volume.spacing(), volume.origin())
        .map(|v| match &volume.subject_id {
            Some(id) => v.with_subject(id.clone()),
            None => v,
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn foreground_mean(v: &Volume, mask: &Array3<bool>) -> f64 {
        let mut s = 0.0;
        let mut n = 0;
        Zip::from(v.voxels()).and(mask).for_each(|&x, &m| {
            if m {
                s += x;
                n += 1;
            }
        });
        s / n as f64
    }

    /// Sphere of constant intensity inside a 32^3 grid.
    fn flat_phantom(n: usize) -> Array3<f64> {
        let c = (n as f64 - 1.0) / 2.0;
        let r = 0.4 * n as f64;
        Array3::from_shape_fn([n; 3], |(x, y, z)| {
            let d2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2);
            if d2 <= r * r {
                100.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn kernel_is_normalized() {
        let k = gaussian_kernel(2.5);
        assert_eq!(k.len(), 17);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn smoothing_preserves_constants_in_the_interior() {
        let a = Array3::from_elem([20, 20, 20], 3.0);
        let s = gaussian_smooth(&a, [1.0; 3]);
        assert!((s[[10, 10, 10]] - 3.0).abs() < 1e-12);
        assert!(s[[0, 10, 10]] < 3.0);
    }

    #[test]
    fn constant_foreground_is_a_fixed_point() {
        let v = Volume::new(flat_phantom(32), [2.0; 3], [0.0; 3]).unwrap();
        let out = correct_bias_field(&v, 20.0).unwrap();
        for (a, b) in out.voxels().iter().zip(v.voxels()) {
            if *b > 0.0 {
                assert!(((a - b) / b).abs() < 1e-6, "{a} vs {b}");
            } else {
                assert_eq!(*a, 0.0);
            }
        }
    }

    #[test]
    fn all_zero_is_identity() {
        let v = Volume::zeros([6, 6, 6], [1.0; 3]).unwrap();
        assert_eq!(correct_bias_field(&v, 10.0).unwrap(), v);
    }

    #[test]
    fn planted_gain_is_halved_and_mean_preserved() {
        let n = 32;
        let gain = |x: usize, y: usize, z: usize| {
            // smooth field spanning 0.7..1.3
            let u = (x as f64 + 0.5 * y as f64 + 0.25 * z as f64) / (1.75 * (n as f64 - 1.0));
            0.7 + 0.6 * u
        };
        let flat = flat_phantom(n);
        let biased = Array3::from_shape_fn([n; 3], |(x, y, z)| flat[[x, y, z]] * gain(x, y, z));
        let v = Volume::new(biased, [2.0; 3], [0.0; 3]).unwrap();
        let cv_before = foreground_cv(&v).unwrap();
        let out = correct_bias_field(&v, 12.0).unwrap();
        let cv_after = foreground_cv(&out).unwrap();
        assert!(cv_after <= 0.5 * cv_before, "cv {cv_before} -> {cv_after}");

        let mask = foreground_mask(&v);
        let (m0, m1) = (foreground_mean(&v, &mask), foreground_mean(&out, &mask));
        assert!(((m1 - m0) / m0).abs() < 0.01);
    }

    #[test]
    fn contract_violations() {
        let mut a = Array3::zeros([4, 4, 4]);
        a[[1, 1, 1]] = -1.0;
        let v = Volume::new(a, [1.0; 3], [0.0; 3]).unwrap();
        assert!(matches!(correct_bias_field(&v, 5.0), Err(ImagingError::NegativeIntensity(_))));
        let z = Volume::zeros([4, 4, 4], [1.0; 3]).unwrap();
        assert!(matches!(correct_bias_field(&z, 0.0), Err(ImagingError::InvalidConfig(_))));
    }
}
