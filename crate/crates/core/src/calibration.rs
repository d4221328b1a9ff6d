//! Channel calibration: fitting the linear distance law `S = V·T + C`.
//!
//! `T` is the one-way time, half of a measured round trip. `V` is the signal
//! speed (m/s) and `C` a constant transmission error (m). Both come from an
//! ordinary least-squares line through at least five (T, S) pairs measured at
//! known distances.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fewest samples a fit accepts.
pub const MIN_SAMPLES: usize = 5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibrationError {
    #[error("invalid sample: total time {total_time} s, distance {distance} m")]
    InvalidSample { total_time: f64, distance: f64 },
    #[error("at least {MIN_SAMPLES} distance-time pairs are required, got {0}")]
    InsufficientSamples(usize),
    #[error("all one-way times are equal; the signal speed is undefined")]
    DegenerateTimes,
    #[error("calibration file: {0}")]
    Csv(String),
}

/// One-way time for a measured round trip.
pub fn half_time(total_time: f64) -> Result<f64, CalibrationError> {
    if total_time.is_finite() && total_time > 0.0 {
        Ok(total_time / 2.0)
    } else {
        Err(CalibrationError::InvalidSample {
            total_time,
            distance: f64::NAN,
        })
    }
}

/// A manually measured distance and the round-trip time observed at it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RttSample {
    total_time: f64,
    distance: f64,
}

impl RttSample {
    pub fn new(total_time: f64, distance: f64) -> Result<Self, CalibrationError> {
        let ok =
            total_time.is_finite() && total_time > 0.0 && distance.is_finite() && distance >= 0.0;
        if ok {
            Ok(RttSample {
                total_time,
                distance,
            })
        } else {
            Err(CalibrationError::InvalidSample {
                total_time,
                distance,
            })
        }
    }

    pub fn total_time(&self) -> f64 {
        self.total_time
    }

    pub fn distance(&self) -> f64 {
        self.distance
    }

    pub fn half_time(&self) -> f64 {
        self.total_time / 2.0
    }
}

/// Row layout of the calibration CSV (`distance_m,total_time_s`).
#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    distance_m: f64,
    total_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationSet {
    samples: Vec<RttSample>,
}

impl CalibrationSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_samples(samples: Vec<RttSample>) -> Self {
        CalibrationSet { samples }
    }

    /// Builds a set from `(distance m, total time s)` pairs.
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self, CalibrationError> {
        let samples = pairs
            .iter()
            .map(|&(s, t)| RttSample::new(t, s))
            .collect::<Result<_, _>>()?;
        Ok(CalibrationSet { samples })
    }

    pub fn push(&mut self, sample: RttSample) {
        self.samples.push(sample);
    }

    /// Several round trips measured at one distance become a single sample
    /// whose total time is their mean.
    pub fn push_repeated(
        &mut self,
        distance: f64,
        total_times: &[f64],
    ) -> Result<(), CalibrationError> {
        if total_times.is_empty() {
            return Err(CalibrationError::InvalidSample {
                total_time: f64::NAN,
                distance,
            });
        }
        for &t in total_times {
            RttSample::new(t, distance)?;
        }
        let mean = total_times.iter().sum::<f64>() / total_times.len() as f64;
        self.samples.push(RttSample::new(mean, distance)?);
        Ok(())
    }

    pub fn samples(&self) -> &[RttSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Reads a CSV with a `distance_m,total_time_s` header, one sample per row.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, CalibrationError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| CalibrationError::Csv(e.to_string()))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["distance_m", "total_time_s"] {
            return Err(CalibrationError::Csv(format!(
                "expected header `distance_m,total_time_s`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut set = CalibrationSet::new();
        for row in rdr.deserialize::<CsvRow>() {
            let row = row.map_err(|e| CalibrationError::Csv(e.to_string()))?;
            set.push(RttSample::new(row.total_time_s, row.distance_m)?);
        }
        Ok(set)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), CalibrationError> {
        let mut wtr = csv::Writer::from_writer(writer);
        for s in &self.samples {
            wtr.serialize(CsvRow {
                distance_m: s.distance,
                total_time_s: s.total_time,
            })
            .map_err(|e| CalibrationError::Csv(e.to_string()))?;
        }
        if self.samples.is_empty() {
            wtr.write_record(["distance_m", "total_time_s"])
                .map_err(|e| CalibrationError::Csv(e.to_string()))?;
        }
        wtr.flush()
            .map_err(|e| CalibrationError::Csv(e.to_string()))
    }
}

/// Intermediate statistics of a fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Mean one-way time M_T, s.
    pub mean_time: f64,
    /// Mean distance M_S, m.
    pub mean_distance: f64,
    /// Mean squared time deviation MS_T, s².
    pub time_variance: f64,
    /// Mean product of time and distance deviations MS_ST, m·s.
    pub covariance: f64,
    pub residual_rms: f64,
    pub n_samples: usize,
}

/// Fitted channel law: distance = speed · one-way time + error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub speed: f64,
    pub error: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<FitDiagnostics>,
}

impl ChannelParams {
    /// Params for a known line, without fit diagnostics.
    pub fn from_line(speed: f64, error: f64) -> Self {
        ChannelParams {
            speed,
            error,
            diagnostics: None,
        }
    }

    pub fn export(&self) -> ParamsDocument {
        ParamsDocument {
            speed_mps: self.speed,
            error_m: self.error,
            residual_rms_m: self.diagnostics.map_or(0.0, |d| d.residual_rms),
            n_samples: self.diagnostics.map_or(0, |d| d.n_samples),
        }
    }
}

/// Exported parameter file, TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsDocument {
    pub speed_mps: f64,
    pub error_m: f64,
    pub residual_rms_m: f64,
    pub n_samples: usize,
}

impl ParamsDocument {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat struct always serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}

/// Least-squares fit of `S = V·T + C`, population statistics throughout.
pub fn fit(set: &CalibrationSet) -> Result<ChannelParams, CalibrationError> {
    let n = set.len();
    if n < MIN_SAMPLES {
        return Err(CalibrationError::InsufficientSamples(n));
    }
    let nf = n as f64;
    let times: Vec<f64> = set.samples.iter().map(RttSample::half_time).collect();
    let dists: Vec<f64> = set.samples.iter().map(|s| s.distance).collect();

    let mean_time = times.iter().sum::<f64>() / nf;
    let mean_distance = dists.iter().sum::<f64>() / nf;
    let (sq, cross) = times
        .iter()
        .zip(&dists)
        .fold((0.0, 0.0), |(sq, cross), (t, s)| {
            let (dt, ds) = (t - mean_time, s - mean_distance);
            (sq + dt * dt, cross + dt * ds)
        });
    let time_variance = sq / nf;
    let covariance = cross / nf;
    if !(time_variance > 0.0) {
        return Err(CalibrationError::DegenerateTimes);
    }

    let speed = covariance / time_variance;
    let error = mean_distance - mean_time * (covariance / time_variance);
    let rss: f64 = times
        .iter()
        .zip(&dists)
        .map(|(t, s)| (s - speed * t - error).powi(2))
        .sum();

    Ok(ChannelParams {
        speed,
        error,
        diagnostics: Some(FitDiagnostics {
            mean_time,
            mean_distance,
            time_variance,
            covariance,
            residual_rms: (rss / nf).sqrt(),
            n_samples: n,
        }),
    })
}

/// Distance predicted for a round trip. Negative predictions are clamped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeEstimate {
    pub meters: f64,
    pub clamped: bool,
}

pub fn distance_from_time(params: &ChannelParams, total_time: f64) -> RangeEstimate {
    let raw = params.speed * (total_time / 2.0) + params.error;
    if raw < 0.0 {
        RangeEstimate {
            meters: 0.0,
            clamped: true,
        }
    } else {
        RangeEstimate {
            meters: raw,
            clamped: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// (T, S) pairs to a set; total time is 2T.
    fn set_ts(pairs: &[(f64, f64)]) -> CalibrationSet {
        CalibrationSet::from_samples(
            pairs
                .iter()
                .map(|&(t, s)| RttSample::new(2.0 * t, s).unwrap())
                .collect(),
        )
    }

    /// Slope and intercept as cov/var from two-pass sums, written separately
    /// from `fit`.
    fn oracle(pairs: &[(f64, f64)]) -> (f64, f64) {
        let n = pairs.len() as f64;
        let (st, ss) = pairs
            .iter()
            .fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
        let (mt, ms) = (st / n, ss / n);
        let cov: f64 = pairs.iter().map(|p| (p.0 - mt) * (p.1 - ms)).sum::<f64>() / (n - 1.0);
        let var: f64 = pairs.iter().map(|p| (p.0 - mt).powi(2)).sum::<f64>() / (n - 1.0);
        let slope = cov / var;
        (slope, ms - slope * mt)
    }

    #[test]
    fn half_time_examples() {
        assert_eq!(half_time(4.0).unwrap(), 2.0);
        assert_eq!(half_time(1e-6).unwrap(), 5e-7);
        assert!(matches!(
            half_time(0.0),
            Err(CalibrationError::InvalidSample { .. })
        ));
        assert!(half_time(-1.0).is_err());
        assert_eq!(RttSample::new(4.0, 1.0).unwrap().half_time(), 2.0);
        assert!(RttSample::new(0.0, 1.0).is_err());
        assert!(RttSample::new(1.0, -0.1).is_err());
    }

    #[test]
    fn fits_exact_lines() {
        let p = fit(&set_ts(&[
            (1.0, 5.0),
            (2.0, 10.0),
            (3.0, 15.0),
            (4.0, 20.0),
            (5.0, 25.0),
        ]))
        .unwrap();
        assert_eq!((p.speed, p.error), (5.0, 0.0));
        let p = fit(&set_ts(&[
            (1.0, 3.0),
            (2.0, 5.0),
            (3.0, 7.0),
            (4.0, 9.0),
            (5.0, 11.0),
        ]))
        .unwrap();
        assert_eq!((p.speed, p.error), (2.0, 1.0));
        let d = p.diagnostics.unwrap();
        assert_eq!(
            (d.mean_time, d.mean_distance, d.time_variance, d.covariance),
            (3.0, 7.0, 2.0, 4.0)
        );
        assert!(d.residual_rms < 1e-10);
        assert_eq!(d.n_samples, 5);
    }

    #[test]
    fn rejects_small_and_degenerate_sets() {
        let four = set_ts(&[(1.0, 5.0), (2.0, 10.0), (3.0, 15.0), (4.0, 20.0)]);
        assert_eq!(fit(&four), Err(CalibrationError::InsufficientSamples(4)));
        let flat = set_ts(&[
            (1.0, 5.0),
            (1.0, 10.0),
            (1.0, 15.0),
            (1.0, 20.0),
            (1.0, 2.0),
        ]);
        assert_eq!(fit(&flat), Err(CalibrationError::DegenerateTimes));
    }

    #[test]
    fn noisy_fit_matches_covariance_oracle() {
        use rand::{Rng, SeedableRng};
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let pairs: Vec<(f64, f64)> = (0..50)
            .map(|_| {
                let t: f64 = rng.random_range(0.001..0.3);
                (t, 340.0 * t + 0.2 + noise.sample(&mut rng))
            })
            .collect();
        let p = fit(&set_ts(&pairs)).unwrap();
        let (v, c) = oracle(&pairs);
        assert_relative_eq!(p.speed, v, max_relative = 1e-9);
        assert_relative_eq!(p.error, c, max_relative = 1e-9);
        assert!((p.speed - 340.0).abs() < 2.0);
    }

    #[test]
    fn distance_examples() {
        let r = distance_from_time(&ChannelParams::from_line(5.0, 0.0), 4.0);
        assert_eq!(
            r,
            RangeEstimate {
                meters: 10.0,
                clamped: false
            }
        );
        let r = distance_from_time(&ChannelParams::from_line(2.0, 1.0), 6.0);
        assert_eq!(
            r,
            RangeEstimate {
                meters: 7.0,
                clamped: false
            }
        );
        let r = distance_from_time(&ChannelParams::from_line(2.0, -5.0), 2.0);
        assert_eq!(
            r,
            RangeEstimate {
                meters: 0.0,
                clamped: true
            }
        );
    }

    #[test]
    fn repeated_measurements_are_averaged() {
        let mut set = CalibrationSet::new();
        set.push_repeated(10.0, &[3.0, 5.0]).unwrap();
        assert_eq!(set.samples()[0].total_time(), 4.0);
        assert_eq!(set.samples()[0].half_time(), 2.0);
        assert!(set.push_repeated(1.0, &[]).is_err());
        assert!(set.push_repeated(1.0, &[1.0, 0.0]).is_err());
        assert_eq!(set.len(), 1);
    }

    #[test]
    fn csv_round_trip_and_header_check() {
        let text = "distance_m,total_time_s\n10,4\n20, 8\n";
        let set = CalibrationSet::read_csv(text.as_bytes()).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.samples()[1].distance(), 20.0);
        let mut out = Vec::new();
        set.write_csv(&mut out).unwrap();
        assert_eq!(CalibrationSet::read_csv(out.as_slice()).unwrap(), set);

        assert!(matches!(
            CalibrationSet::read_csv("10,4\n20,8\n".as_bytes()),
            Err(CalibrationError::Csv(_))
        ));
        assert!(matches!(
            CalibrationSet::read_csv("distance_m,total_time_s\n10,0\n".as_bytes()),
            Err(CalibrationError::InvalidSample { .. })
        ));
        assert!(matches!(
            CalibrationSet::read_csv("distance_m,total_time_s\n10,abc\n".as_bytes()),
            Err(CalibrationError::Csv(_))
        ));
    }

    #[test]
    fn params_document() {
        let p = fit(&set_ts(&[
            (1.0, 3.0),
            (2.0, 5.0),
            (3.0, 7.0),
            (4.0, 9.0),
            (5.0, 11.0),
        ]))
        .unwrap();
        let doc = p.export();
        assert_eq!(
            doc,
            ParamsDocument {
                speed_mps: 2.0,
                error_m: 1.0,
                residual_rms_m: 0.0,
                n_samples: 5
            }
        );
        let text = doc.to_toml();
        assert!(text.contains("speed_mps = 2.0"));
        assert_eq!(ParamsDocument::from_toml(&text).unwrap(), doc);
    }

    fn sample_pairs() -> impl Strategy<Value = Vec<(f64, f64)>> {
        prop::collection::vec((0.01f64..10.0, 0.0f64..100.0), 5..40).prop_filter(
            "need spread in T",
            |v| {
                let (lo, hi) = v.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| {
                    (lo.min(p.0), hi.max(p.0))
                });
                hi - lo > 0.1
            },
        )
    }

    proptest! {
        #[test]
        fn fit_is_least_squares_optimal(pairs in sample_pairs()) {
            let p = fit(&set_ts(&pairs)).unwrap();
            let rss = |v: f64, c: f64| pairs.iter().map(|(t, s)| (s - v * t - c).powi(2)).sum::<f64>();
            let best = rss(p.speed, p.error);
            for (dv, dc) in [(1e-3, 0.0), (-1e-3, 0.0), (0.0, 1e-3), (0.0, -1e-3)] {
                prop_assert!(rss(p.speed + dv, p.error + dc) >= best);
            }
        }

        #[test]
        fn residuals_are_orthogonal(pairs in sample_pairs()) {
            let p = fit(&set_ts(&pairs)).unwrap();
            let scale = pairs.iter().map(|(t, s)| s.abs().max(t.abs())).fold(1.0, f64::max);
            let r: Vec<f64> = pairs.iter().map(|(t, s)| s - p.speed * t - p.error).collect();
            let sum: f64 = r.iter().sum();
            let dot: f64 = r.iter().zip(&pairs).map(|(r, (t, _))| r * t).sum();
            prop_assert!(sum.abs() < 1e-8 * scale * pairs.len() as f64);
            prop_assert!(dot.abs() < 1e-8 * scale * scale * pairs.len() as f64);
        }

        #[test]
        fn exact_lines_interpolate(v in 0.1f64..1e3, c in -50.0f64..50.0, ts in prop::collection::vec(0.01f64..10.0, 5..50)) {
            prop_assume!(ts.iter().any(|t| (t - ts[0]).abs() > 1e-3));
            let pairs: Vec<(f64, f64)> = ts.iter().map(|&t| (t, (v * t + c).max(0.0))).collect();
            prop_assume!(pairs.iter().all(|&(t, s)| s == v * t + c));
            let p = fit(&set_ts(&pairs)).unwrap();
            prop_assert!((p.speed - v).abs() <= 1e-9 * v.abs());
            prop_assert!((p.error - c).abs() <= 1e-9 * c.abs().max(v));
            prop_assert!(p.diagnostics.unwrap().residual_rms <= 1e-10 * v.max(1.0) * 10.0);
        }

        #[test]
        fn sample_order_is_irrelevant(pairs in sample_pairs(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = fit(&set_ts(&pairs)).unwrap();
            let b = fit(&set_ts(&shuffled)).unwrap();
            prop_assert!((a.speed - b.speed).abs() <= 1e-9 * a.speed.abs().max(1.0));
            prop_assert!((a.error - b.error).abs() <= 1e-9 * a.error.abs().max(1.0));
        }
    }
}
