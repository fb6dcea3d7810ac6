//! Wall-clock estimate shown to the uploader while a book is generating.

use std::num::NonZeroUsize;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const CALIBRATION_CSV: &str = include_str!("../../data/generation_times.csv");
const SHIPPED: &str = include_str!("../../data/eta.toml");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EtaError {
    #[error("coefficients must be finite and non-negative (base {base}, slope {slope})")]
    InvalidCoefficients { base: f64, slope: f64 },
    #[error("need at least two samples with distinct x to fit a line")]
    Degenerate,
}

/// `seconds = base_seconds + per_model_seconds * model_count`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaModel {
    pub base_seconds: f64,
    pub per_model_seconds: f64,
}

/// Word-count model used before the model count is known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProvisionalEta {
    pub base_seconds: f64,
    pub per_word_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitWeighting {
    /// Ordinary least squares on absolute error.
    Absolute,
    /// Least squares on error relative to the observed time.
    Relative,
}

/// One finished build: (story words, models generated, seconds taken).
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct CalibrationRow {
    pub title: String,
    pub word_count: u32,
    pub seconds: f64,
    pub model_count: u32,
}

pub fn calibration_rows() -> Vec<CalibrationRow> {
    let mut lines = CALIBRATION_CSV.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    assert_eq!(header, ["title", "word_count", "seconds", "model_count"]);
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            CalibrationRow {
                title: f[0].to_owned(),
                word_count: f[1].parse().expect("bundled csv"),
                seconds: f[2].parse().expect("bundled csv"),
                model_count: f[3].parse().expect("bundled csv"),
            }
        })
        .collect()
}

#[derive(Deserialize)]
struct ShippedFile {
    per_model: EtaModel,
    provisional: ProvisionalEta,
}

fn shipped() -> ShippedFile {
    toml::from_str(SHIPPED).expect("bundled eta.toml")
}

/// Weighted least squares for `y = a + b x`, returning `(a, b)`.
fn fit_line(points: &[(f64, f64)], weighting: FitWeighting) -> Result<(f64, f64), EtaError> {
    let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let w = match weighting {
            FitWeighting::Absolute => 1.0,
            FitWeighting::Relative => 1.0 / (y * y),
        };
        sw += w;
        sx += w * x;
        sy += w * y;
        sxx += w * x * x;
        sxy += w * x * y;
    }
    let det = sw * sxx - sx * sx;
    if points.len() < 2 || det.abs() < 1e-12 {
        return Err(EtaError::Degenerate);
    }
    let slope = (sw * sxy - sx * sy) / det;
    let base = (sy - slope * sx) / sw;
    Ok((base, slope))
}

impl EtaModel {
    pub fn new(base_seconds: f64, per_model_seconds: f64) -> Result<Self, EtaError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ok(base_seconds) && ok(per_model_seconds) {
            Ok(Self {
                base_seconds,
                per_model_seconds,
            })
        } else {
            Err(EtaError::InvalidCoefficients {
                base: base_seconds,
                slope: per_model_seconds,
            })
        }
    }

    /// The coefficients shipped in `data/eta.toml`.
    pub fn shipped() -> Self {
        shipped().per_model
    }

    pub fn fit(rows: &[CalibrationRow], weighting: FitWeighting) -> Result<Self, EtaError> {
        let points: Vec<(f64, f64)> = rows
            .iter()
            .map(|r| (f64::from(r.model_count), r.seconds))
            .collect();
        let (base, slope) = fit_line(&points, weighting)?;
        Self::new(base, slope)
    }

    pub fn estimate_seconds(&self, model_count: NonZeroUsize) -> u64 {
        (self.base_seconds + self.per_model_seconds * model_count.get() as f64).round() as u64
    }
}

impl Default for EtaModel {
    fn default() -> Self {
        Self::shipped()
    }
}

impl ProvisionalEta {
    pub fn shipped() -> Self {
        shipped().provisional
    }

    pub fn fit(rows: &[CalibrationRow], weighting: FitWeighting) -> Result<Self, EtaError> {
        let points: Vec<(f64, f64)> = rows
            .iter()
            .map(|r| (f64::from(r.word_count), r.seconds))
            .collect();
        let (base, slope) = fit_line(&points, weighting)?;
        EtaModel::new(base, slope)?;
        Ok(Self {
            base_seconds: base,
            per_word_seconds: slope,
        })
    }

    pub fn estimate_seconds(&self, word_count: usize) -> u64 {
        (self.base_seconds + self.per_word_seconds * word_count as f64).round() as u64
    }
}

impl Default for ProvisionalEta {
    fn default() -> Self {
        Self::shipped()
    }
}

/// Convenience wrapper over [`EtaModel::estimate_seconds`].
pub fn estimate_generation_seconds(model_count: NonZeroUsize, eta: &EtaModel) -> u64 {
    eta.estimate_seconds(model_count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn nz(n: usize) -> NonZeroUsize {
        NonZeroUsize::new(n).unwrap()
    }

    #[test]
    fn calibration_table_has_eleven_books() {
        let rows = calibration_rows();
        assert_eq!(rows.len(), 11);
        assert_eq!(rows[0].title, "Egre");
        assert_eq!((rows[10].seconds, rows[10].model_count), (202.0, 15));
    }

    #[test]
    fn shipped_coefficients_match_refit() {
        let rows = calibration_rows();
        let fit = EtaModel::fit(&rows, FitWeighting::Relative).unwrap();
        let shipped = EtaModel::shipped();
        assert!((fit.base_seconds - shipped.base_seconds).abs() < 1e-9);
        assert!((fit.per_model_seconds - shipped.per_model_seconds).abs() < 1e-9);

        let pfit = ProvisionalEta::fit(&rows, FitWeighting::Relative).unwrap();
        let pshipped = ProvisionalEta::shipped();
        assert!((pfit.base_seconds - pshipped.base_seconds).abs() < 1e-9);
        assert!((pfit.per_word_seconds - pshipped.per_word_seconds).abs() < 1e-12);
    }

    #[test]
    fn estimates_for_six_and_fifteen_models() {
        let eta = EtaModel::shipped();
        let six = eta.estimate_seconds(nz(6)) as f64;
        let fifteen = eta.estimate_seconds(nz(15)) as f64;
        assert!((six - 86.0).abs() <= 0.25 * 86.0, "{six}");
        assert!((fifteen - 202.0).abs() <= 0.25 * 202.0, "{fifteen}");
    }

    #[test]
    fn absolute_fit_recovers_exact_line() {
        let rows: Vec<CalibrationRow> = (1..5)
            .map(|k| CalibrationRow {
                title: String::new(),
                word_count: 0,
                seconds: 10.0 + 3.0 * f64::from(k),
                model_count: k,
            })
            .collect();
        for w in [FitWeighting::Absolute, FitWeighting::Relative] {
            let m = EtaModel::fit(&rows, w).unwrap();
            assert!((m.base_seconds - 10.0).abs() < 1e-9);
            assert!((m.per_model_seconds - 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_fit_rejected() {
        let row = CalibrationRow {
            title: String::new(),
            word_count: 1,
            seconds: 5.0,
            model_count: 3,
        };
        assert_eq!(
            EtaModel::fit(&[row.clone(), row], FitWeighting::Absolute),
            Err(EtaError::Degenerate)
        );
    }

    #[test]
    fn flat_model_is_constant() {
        let eta = EtaModel::new(100.0, 0.0).unwrap();
        for k in 1..50 {
            assert_eq!(estimate_generation_seconds(nz(k), &eta), 100);
        }
    }

    #[test]
    fn negative_coefficients_rejected() {
        assert!(EtaModel::new(-1.0, 2.0).is_err());
        assert!(EtaModel::new(1.0, f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn estimate_is_monotone(base in 0.0f64..1e4, slope in 0.0f64..1e3, k in 1usize..1000) {
            let eta = EtaModel::new(base, slope).unwrap();
            prop_assert!(eta.estimate_seconds(nz(k)) <= eta.estimate_seconds(nz(k + 1)));
        }
    }
}
