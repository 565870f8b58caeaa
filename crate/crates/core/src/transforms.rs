//! Series transformations used as extra projection sources.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::z_normalize;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    FftMag,
    Dct,
    Sax,
    Deriv1,
    Deriv2,
}

impl TransformKind {
    pub const ALL: [TransformKind; 5] = [
        TransformKind::FftMag,
        TransformKind::Dct,
        TransformKind::Sax,
        TransformKind::Deriv1,
        TransformKind::Deriv2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::FftMag => "fft_mag",
            TransformKind::Dct => "dct",
            TransformKind::Sax => "sax",
            TransformKind::Deriv1 => "deriv1",
            TransformKind::Deriv2 => "deriv2",
        }
    }

    /// Output length for an input of length `len`.
    pub fn output_len(self, len: usize, sax: SaxParams) -> usize {
        match self {
            TransformKind::FftMag => len / 2 + 1,
            TransformKind::Sax => sax.words,
            _ => len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaxParams {
    pub words: usize,
    pub alphabet: usize,
}

impl Default for SaxParams {
    fn default() -> Self {
        Self { words: 20, alphabet: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformedSeries {
    pub kind: TransformKind,
    pub values: Vec<f32>,
}

pub fn apply(kind: TransformKind, series: &[f32], sax_params: SaxParams) -> Result<TransformedSeries> {
    let values = match kind {
        TransformKind::FftMag => fft_magnitude(series),
        TransformKind::Dct => dct2(series),
        TransformKind::Sax => sax(series, sax_params)?.into_iter().map(|s| s as f32).collect(),
        TransformKind::Deriv1 => derivative(series, 1)?,
        TransformKind::Deriv2 => derivative(series, 2)?,
    };
    Ok(TransformedSeries { kind, values })
}

/// Full complex spectrum after zero-padding to the next power of two.
pub fn padded_spectrum(series: &[f32]) -> Vec<Complex<f64>> {
    let n = series.len().max(1).next_power_of_two();
    let mut buffer: Vec<Complex<f64>> = series
        .iter()
        .map(|&v| Complex::new(f64::from(v), 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(n)
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buffer);
    buffer
}

/// Magnitudes of the first `floor(T/2) + 1` bins of the padded spectrum.
pub fn fft_magnitude(series: &[f32]) -> Vec<f32> {
    padded_spectrum(series)
        .into_iter()
        .take(series.len() / 2 + 1)
        .map(|c| c.norm() as f32)
        .collect()
}

/// Orthonormal DCT-II by direct evaluation.
pub fn dct2(series: &[f32]) -> Vec<f32> {
    let n = series.len();
    if n == 0 {
        return Vec::new();
    }
    let nf = n as f64;
    (0..n)
        .map(|k| {
            let scale = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
            let sum: f64 = series
                .iter()
                .enumerate()
                .map(|(t, &x)| f64::from(x) * (PI * (t as f64 + 0.5) * k as f64 / nf).cos())
                .sum();
            (scale * sum) as f32
        })
        .collect()
}

/// The `alphabet - 1` standard-normal quantiles `Phi^-1(i / alphabet)`.
pub fn sax_breakpoints(alphabet: usize) -> Vec<f64> {
    let normal = Normal::standard();
    (1..alphabet).map(|i| normal.inverse_cdf(i as f64 / alphabet as f64)).collect()
}

/// Frame means over `words` frames `[i T / W, (i + 1) T / W)`.
pub fn paa(series: &[f64], words: usize) -> Vec<f64> {
    let len = series.len();
    (0..words)
        .map(|i| {
            let frame = &series[i * len / words..(i + 1) * len / words];
            frame.iter().sum::<f64>() / frame.len() as f64
        })
        .collect()
}

/// Symbols in `[0, alphabet)`; a value equal to a breakpoint takes the upper symbol.
pub fn sax(series: &[f32], params: SaxParams) -> Result<Vec<u8>> {
    let SaxParams { words, alphabet } = params;
    if words == 0 || words > series.len() {
        return Err(Error::InvalidParams(format!(
            "word count {words} must be in [1, {}]",
            series.len()
        )));
    }
    if !(2..=10).contains(&alphabet) {
        return Err(Error::InvalidParams(format!("alphabet size {alphabet} outside [2, 10]")));
    }
    let normalized: Vec<f64> = z_normalize(series).into_iter().map(f64::from).collect();
    let breakpoints = sax_breakpoints(alphabet);
    Ok(paa(&normalized, words)
        .into_iter()
        .map(|m| breakpoints.iter().filter(|&&b| m >= b).count() as u8)
        .collect())
}

/// Forward difference, last value repeated; order 2 applies it twice.
pub fn derivative(series: &[f32], order: u8) -> Result<Vec<f32>> {
    if !(1..=2).contains(&order) {
        return Err(Error::InvalidParams(format!("derivative order {order} not in {{1, 2}}")));
    }
    let mut out = series.to_vec();
    for _ in 0..order {
        let mut next: Vec<f32> = out.windows(2).map(|w| w[1] - w[0]).collect();
        if let Some(&last) = next.last() {
            next.push(last);
        } else {
            next = vec![0.0; out.len()];
        }
        out = next;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_lands_in_its_bin() {
        let x: Vec<f32> = (0..8).map(|t| (2.0 * std::f64::consts::PI * 2.0 * t as f64 / 8.0).cos() as f32).collect();
        let mag = fft_magnitude(&x);
        assert_eq!(mag.len(), 5);
        for (k, m) in mag.iter().enumerate() {
            if k == 2 {
                assert!((m - 4.0).abs() < 1e-6);
            } else {
                assert!(m.abs() <= 1e-6, "bin {k} = {m}");
            }
        }
    }

    #[test]
    fn constant_is_dc_only() {
        let mag = fft_magnitude(&[-1.5; 8]);
        assert!((mag[0] - 12.0).abs() < 1e-6);
        assert!(mag[1..].iter().all(|m| m.abs() <= 1e-6));
    }

    #[test]
    fn non_power_of_two_pads() {
        assert_eq!(padded_spectrum(&[1.0; 5]).len(), 8);
        assert_eq!(fft_magnitude(&[1.0; 5]).len(), 3);
        assert!((fft_magnitude(&[1.0; 5])[0] - 5.0).abs() < 1e-6);
    }

    #[test]
    fn dct_of_constant() {
        let c = dct2(&[2.0; 9]);
        assert!((c[0] - 2.0 * 3.0).abs() < 1e-5);
        assert!(c[1..].iter().all(|v| v.abs() <= 1e-6));
    }

    #[test]
    fn dct_of_basis_vector_has_unit_norm() {
        for i in 0..7 {
            let mut e = vec![0.0; 7];
            e[i] = 1.0;
            let norm: f32 = dct2(&e).iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn ramp_symbols() {
        let ramp: Vec<f32> = (0..40).map(|t| t as f32).collect();
        assert_eq!(sax(&ramp, SaxParams { words: 4, alphabet: 4 }).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn constant_maps_to_middle_symbol() {
        for alphabet in 2..=10 {
            let s = sax(&[3.0; 30], SaxParams { words: 5, alphabet }).unwrap();
            assert!(s.iter().all(|&v| usize::from(v) == alphabet / 2), "alphabet {alphabet}: {s:?}");
        }
    }

    #[test]
    fn sax_rejects_bad_params() {
        assert!(sax(&[1.0, 2.0], SaxParams { words: 3, alphabet: 4 }).is_err());
        assert!(sax(&[1.0, 2.0], SaxParams { words: 2, alphabet: 1 }).is_err());
        assert!(sax(&[1.0, 2.0], SaxParams { words: 2, alphabet: 11 }).is_err());
    }

    #[test]
    fn derivatives() {
        assert_eq!(derivative(&[1.0, 3.0, 6.0], 1).unwrap(), vec![2.0, 3.0, 3.0]);
        let ramp: Vec<f32> = (0..10).map(|t| 0.5 * t as f32 + 1.0).collect();
        assert!(derivative(&ramp, 1).unwrap().iter().all(|&v| v == 0.5));
        assert!(derivative(&ramp, 2).unwrap().iter().all(|&v| v == 0.0));
        assert!(derivative(&ramp, 3).is_err());
    }

    #[test]
    fn apply_lengths() {
        let x: Vec<f32> = (0..33).map(|t| (t as f32 * 0.4).sin()).collect();
        let sax_params = SaxParams::default();
        for kind in TransformKind::ALL {
            let out = apply(kind, &x, sax_params).unwrap();
            assert_eq!(out.values.len(), kind.output_len(x.len(), sax_params), "{}", kind.name());
        }
    }

    proptest! {
        #[test]
        fn parseval(x in proptest::collection::vec(-10.0f32..10.0, 2..70)) {
            let spectrum = padded_spectrum(&x);
            let energy: f64 = spectrum.iter().map(|c| c.norm_sqr()).sum();
            let direct: f64 = x.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>() * spectrum.len() as f64;
            prop_assert!((energy - direct).abs() <= 1e-6 * direct.max(1e-12));
        }

        #[test]
        fn dct_preserves_norm(x in proptest::collection::vec(-10.0f32..10.0, 1..70)) {
            let a: f64 = x.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
            let b: f64 = dct2(&x).iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
            prop_assert!((a - b).abs() <= 1e-5 * a.max(1e-6));
        }

        #[test]
        fn fft_shift_changes_only_dc(x in proptest::collection::vec(-5.0f32..5.0, 2..64), c in -3.0f32..3.0) {
            // A shift adds c to the unpadded span only, so exact invariance needs no padding.
            let n = x.len().next_power_of_two();
            let x: Vec<f32> = x.iter().cycle().take(n).copied().collect();
            let shifted: Vec<f32> = x.iter().map(|v| v + c).collect();
            let a = fft_magnitude(&x);
            let b = fft_magnitude(&shifted);
            for k in 1..a.len() {
                prop_assert!((a[k] - b[k]).abs() <= 1e-3 * (1.0 + a[k].abs()));
            }
        }

        #[test]
        fn sax_in_range(x in proptest::collection::vec(-5.0f32..5.0, 20..80), alphabet in 2usize..=10) {
            let s = sax(&x, SaxParams { words: 20, alphabet }).unwrap();
            prop_assert_eq!(s.len(), 20);
            prop_assert!(s.iter().all(|&v| usize::from(v) < alphabet));
            prop_assert_eq!(sax(&x, SaxParams { words: 20, alphabet }).unwrap(), s);
        }
    }
}
