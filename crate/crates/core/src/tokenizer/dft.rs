//! Frequency-domain reconstruction targets: one-sided DFT magnitudes per
//! patch (DC excluded), z-scored jointly over all patches and bins of one
//! sample.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::signal::PatchGrid;
use crate::tensor::TensorError;

pub type Result<T> = std::result::Result<T, TensorError>;

/// Magnitudes of DFT bins `m = 1..P/2` of a real patch of even length P.
/// Bin `m` of a 1-second patch at 200 Hz corresponds to `m` Hz.
pub fn dft_magnitude(patch: &[f64]) -> Result<Vec<f64>> {
    let p = patch.len();
    if p == 0 || p % 2 != 0 {
        return Err(TensorError::InvalidArg {
            op: "dft_magnitude",
            detail: format!("patch length {p} must be even and nonzero"),
        });
    }
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(p);
    let mut buf: Vec<Complex64> = patch.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft.process(&mut buf);
    Ok(buf[1..=p / 2].iter().map(|c| (c.re * c.re + c.im * c.im).sqrt()).collect())
}

/// Per-sample z-scored frequency magnitudes, row-major `[C*N, P/2]` with
/// rows ordered (channel, time).
#[derive(Debug, Clone)]
pub struct FreqTarget {
    pub n_rows: usize,
    pub bins: usize,
    pub values: Vec<f64>,
}

/// Z-score in place over the whole slice: (x - mean) / max(std, 1e-8)
/// with the population standard deviation.
pub fn zscore(values: &mut [f64]) {
    if values.len() < 2 {
        for v in values.iter_mut() {
            *v = 0.0;
        }
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for v in values.iter_mut() {
        *v = (*v - mean) / std;
    }
}

/// Magnitudes for every patch of one sample, z-scored jointly across all
/// patches and bins of the sample.
pub fn freq_target(grid: &PatchGrid) -> Result<FreqTarget> {
    let rows = grid.n_channels * grid.n_patches;
    let bins = grid.patch_len / 2;
    let mut values = Vec::with_capacity(rows * bins);
    for c in 0..grid.n_channels {
        for j in 0..grid.n_patches {
            let patch: Vec<f64> = grid.patch(c, j).iter().map(|&v| v as f64).collect();
            values.extend(dft_magnitude(&patch)?);
        }
    }
    zscore(&mut values);
    Ok(FreqTarget { n_rows: rows, bins, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct O(P^2) evaluation of the transform definition; the
    /// independent oracle for the FFT-backed implementation.
    fn naive_dft_magnitude(patch: &[f64]) -> Vec<f64> {
        let p = patch.len();
        let mut out = Vec::with_capacity(p / 2);
        for m in 1..=p / 2 {
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for (n, &x) in patch.iter().enumerate() {
                let ang = std::f64::consts::TAU * (m * n) as f64 / p as f64;
                re += x * ang.cos();
                im -= x * ang.sin();
            }
            out.push((re * re + im * im).sqrt());
        }
        out
    }

    #[test]
    fn constant_patch_has_no_ac_energy() {
        let mags = dft_magnitude(&[1.0; 8]).unwrap();
        assert_eq!(mags.len(), 4);
        for m in mags {
            assert!(m.abs() < 1e-12, "magnitude {m}");
        }
    }

    #[test]
    fn unit_cosine_concentrates_at_bin_one() {
        let p = 8;
        let patch: Vec<f64> =
            (0..p).map(|n| (std::f64::consts::TAU * n as f64 / p as f64).cos()).collect();
        let mags = dft_magnitude(&patch).unwrap();
        assert!((mags[0] - 4.0).abs() < 1e-12, "bin 1 = {}", mags[0]);
        for &m in &mags[1..] {
            assert!(m.abs() < 1e-12);
        }
    }

    #[test]
    fn matches_naive_dft_on_random_patches() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let patch: Vec<f64> = (0..200).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let got = dft_magnitude(&patch).unwrap();
            let want = naive_dft_magnitude(&patch);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-9, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn odd_length_rejected() {
        assert!(dft_magnitude(&[0.0; 7]).is_err());
    }

    #[test]
    fn zscore_properties() {
        // degenerate all-equal input maps to zeros via the std floor
        let mut flat = vec![3.5; 10];
        zscore(&mut flat);
        assert!(flat.iter().all(|&v| v == 0.0));

        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let base: Vec<f64> = (0..500).map(|_| rng.gen_range(0.0..10.0)).collect();

        let mut z = base.clone();
        zscore(&mut z);
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6);
        assert!((var.sqrt() - 1.0).abs() < 1e-6);

        // affine invariance: a*x + b z-scores to the same values (a > 0)
        let mut affine: Vec<f64> = base.iter().map(|&v| 2.5 * v - 7.0).collect();
        zscore(&mut affine);
        for (a, b) in affine.iter().zip(&z) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
