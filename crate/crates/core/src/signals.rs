//! Excitation and reference signal generation.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of a random-frequency multisine, in the spirit of the classic
/// `idinput` sine mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultisineSpec {
    /// Output range `[low, high]`; the signal is affinely scaled to hit both ends.
    pub range: [f64; 2],
    /// Pass band as a fraction of the Nyquist frequency.
    pub band: [f64; 2],
    pub period: usize,
    pub num_periods: usize,
    pub num_sines: usize,
    /// Random phase sets tried; the one with the lowest crest factor wins.
    pub phase_trials: usize,
    /// Use only every `grid_skip`-th DFT bin as a candidate frequency.
    pub grid_skip: usize,
    pub seed: u64,
}

impl Default for MultisineSpec {
    fn default() -> Self {
        Self {
            range: [-4.0, 4.0],
            band: [0.0, 1.0],
            period: 1000,
            num_periods: 1,
            num_sines: 25,
            phase_trials: 40,
            grid_skip: 1,
            seed: 1,
        }
    }
}

impl MultisineSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!("multisine range [{lo}, {hi}] must satisfy low < high")));
        }
        let [b0, b1] = self.band;
        if !(0.0..=1.0).contains(&b0) || !(0.0..=1.0).contains(&b1) || b0 > b1 {
            return Err(Error::Config(format!("multisine band [{b0}, {b1}] must lie in [0, 1]")));
        }
        if self.period == 0 || self.num_periods == 0 {
            return Err(Error::Config("multisine period and period count must be >= 1".into()));
        }
        if self.num_sines == 0 || self.phase_trials == 0 || self.grid_skip == 0 {
            return Err(Error::Config(
                "multisine sine count, phase trials and grid skip must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// DFT bins eligible as sinusoid frequencies.
    pub fn candidate_bins(&self) -> Vec<usize> {
        let p = self.period;
        let half = p as f64 / 2.0;
        let lo = (self.band[0] * half).ceil().max(1.0) as usize;
        let hi = (self.band[1] * half).floor() as usize;
        (lo..=hi)
            .filter(|&k| k >= 1 && 2 * k < p)
            .filter(|&k| (k - 1) % self.grid_skip == 0)
            .collect()
    }
}

fn crest_factor(s: &[f64]) -> f64 {
    let peak = s.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let rms = (s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64).sqrt();
    if rms > 0.0 {
        peak / rms
    } else {
        f64::INFINITY
    }
}

fn synthesize(bins: &[usize], phases: &[f64], period: usize) -> Vec<f64> {
    (0..period)
        .map(|t| {
            bins.iter()
                .zip(phases)
                .map(|(&k, &ph)| (2.0 * PI * (k * t % period) as f64 / period as f64 + ph).cos())
                .sum()
        })
        .collect()
}

/// Multisine excitation, `period * num_periods` samples long.
///
/// Frequencies are drawn without replacement from the in-band DFT grid; the first
/// phase candidate is the Schroeder set, the remaining `phase_trials - 1` are
/// uniform random, and the lowest-crest-factor candidate is kept. The result is
/// scaled so that its minimum and maximum equal the range endpoints.
pub fn multisine(spec: &MultisineSpec) -> Result<Vec<f64>> {
    Ok(multisine_design(spec)?.signal)
}

/// A multisine together with the DFT bins (per period) it occupies.
#[derive(Debug, Clone, PartialEq)]
pub struct MultisineDesign {
    pub signal: Vec<f64>,
    pub bins: Vec<usize>,
}

pub fn multisine_design(spec: &MultisineSpec) -> Result<MultisineDesign> {
    spec.validate()?;
    let mut candidates = spec.candidate_bins();
    if candidates.len() < spec.num_sines {
        return Err(Error::Config(format!(
            "band holds {} usable frequencies, {} sinusoids requested",
            candidates.len(),
            spec.num_sines
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    candidates.shuffle(&mut rng);
    let mut bins: Vec<usize> = candidates[..spec.num_sines].to_vec();
    bins.sort_unstable();

    let n = bins.len() as f64;
    let schroeder: Vec<f64> = (1..=bins.len())
        .map(|i| -PI * (i as f64) * (i as f64 - 1.0) / n)
        .collect();
    let mut best = synthesize(&bins, &schroeder, spec.period);
    let mut best_cf = crest_factor(&best);
    for _ in 1..spec.phase_trials {
        let phases: Vec<f64> = (0..bins.len()).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let s = synthesize(&bins, &phases, spec.period);
        let cf = crest_factor(&s);
        if cf < best_cf {
            best = s;
            best_cf = cf;
        }
    }

    let (min, max) = best
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let [lo, hi] = spec.range;
    let scaled: Vec<f64> = if max > min {
        best.iter()
            .map(|&v| {
                if v == max {
                    hi
                } else if v == min {
                    lo
                } else {
                    lo + (v - min) * (hi - lo) / (max - min)
                }
            })
            .collect()
    } else {
        vec![0.5 * (lo + hi); best.len()]
    };

    let mut out = Vec::with_capacity(spec.period * spec.num_periods);
    for _ in 0..spec.num_periods {
        out.extend_from_slice(&scaled);
    }
    Ok(MultisineDesign { signal: out, bins })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ReferenceKind {
    /// Cycles through `levels`, holding each for `dwell` samples.
    Steps { levels: Vec<f64>, dwell: usize },
    /// `amplitude * sin(2 pi f(k) k ts)` with `f` moving linearly from start to end.
    Chirp {
        amplitude: f64,
        f_start: f64,
        f_end: f64,
        ts: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSpec {
    #[serde(flatten)]
    pub kind: ReferenceKind,
    pub horizon: usize,
}

impl ReferenceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("reference horizon must be >= 1".into()));
        }
        match &self.kind {
            ReferenceKind::Steps { levels, dwell } => {
                if levels.is_empty() || *dwell == 0 {
                    return Err(Error::Config("step reference needs levels and dwell >= 1".into()));
                }
            }
            ReferenceKind::Chirp {
                f_start, f_end, ts, ..
            } => {
                if !(*f_start > 0.0 && f_end >= f_start && *ts > 0.0) {
                    return Err(Error::Config(
                        "chirp needs 0 < f_start <= f_end and ts > 0".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Output reference of length `spec.horizon`.
pub fn reference(spec: &ReferenceSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let h = spec.horizon;
    Ok(match &spec.kind {
        ReferenceKind::Steps { levels, dwell } => {
            (0..h).map(|k| levels[(k / dwell) % levels.len()]).collect()
        }
        ReferenceKind::Chirp {
            amplitude,
            f_start,
            f_end,
            ts,
        } => (0..h)
            .map(|k| {
                let frac = if h > 1 { k as f64 / (h - 1) as f64 } else { 0.0 };
                let f = f_start + (f_end - f_start) * frac;
                amplitude * (2.0 * PI * f * k as f64 * ts).sin()
            })
            .collect(),
    })
}

/// Writes a single-column CSV with a header row.
pub fn write_signal_csv(path: &Path, column: &str, values: &[f64]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{column}")?;
    for v in values {
        writeln!(w, "{v}")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identification_multisine_length_and_range() {
        let s = multisine(&MultisineSpec::default()).unwrap();
        assert_eq!(s.len(), 1000);
        let min = s.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_abs_diff_eq!(min, -4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(max, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn single_sinusoid() {
        let spec = MultisineSpec {
            range: [-1.0, 1.0],
            period: 8,
            num_sines: 1,
            phase_trials: 1,
            ..MultisineSpec::default()
        };
        let s = multisine(&spec).unwrap();
        assert_eq!(s.len(), 8);
        assert_abs_diff_eq!(s.iter().cloned().fold(f64::INFINITY, f64::min), -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn multisine_is_deterministic() {
        let spec = MultisineSpec::default();
        assert_eq!(multisine(&spec).unwrap(), multisine(&spec).unwrap());
        let other = MultisineSpec { seed: 2, ..spec.clone() };
        assert_ne!(multisine(&spec).unwrap(), multisine(&other).unwrap());
    }

    #[test]
    fn multisine_repeats_periods() {
        let spec = MultisineSpec {
            period: 50,
            num_periods: 3,
            num_sines: 5,
            ..MultisineSpec::default()
        };
        let s = multisine(&spec).unwrap();
        assert_eq!(s.len(), 150);
        assert_eq!(s[..50], s[50..100]);
    }

    #[test]
    fn energy_sits_on_chosen_bins() {
        let spec = MultisineSpec::default();
        let d = multisine_design(&spec).unwrap();
        let n = d.signal.len();
        let mean = d.signal.iter().sum::<f64>() / n as f64;
        let mut on = 0.0;
        let mut total = 0.0;
        for k in 1..n / 2 {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, v) in d.signal.iter().enumerate() {
                let w = 2.0 * PI * ((k * t) % n) as f64 / n as f64;
                re += (v - mean) * w.cos();
                im -= (v - mean) * w.sin();
            }
            let e = re * re + im * im;
            total += e;
            if d.bins.contains(&k) {
                on += e;
            }
        }
        assert_eq!(d.bins.len(), 25);
        assert!((total - on) / total < 0.01, "off-bin fraction {}", (total - on) / total);
    }

    #[test]
    fn empty_range_rejected() {
        let spec = MultisineSpec {
            range: [0.0, 0.0],
            ..MultisineSpec::default()
        };
        assert!(matches!(multisine(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn too_many_sines_for_band() {
        let spec = MultisineSpec {
            period: 8,
            num_sines: 4,
            ..MultisineSpec::default()
        };
        assert!(matches!(multisine(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn steps_reference() {
        let r = reference(&ReferenceSpec {
            kind: ReferenceKind::Steps {
                levels: vec![0.5, -0.5],
                dwell: 100,
            },
            horizon: 200,
        })
        .unwrap();
        assert_eq!(r.len(), 200);
        assert!(r[..100].iter().all(|&v| v == 0.5));
        assert!(r[100..].iter().all(|&v| v == -0.5));
    }

    #[test]
    fn zero_amplitude_chirp() {
        let r = reference(&ReferenceSpec {
            kind: ReferenceKind::Chirp {
                amplitude: 0.0,
                f_start: 0.1,
                f_end: 1.0,
                ts: 0.033,
            },
            horizon: 50,
        })
        .unwrap();
        assert!(r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_frequency_chirp() {
        let r = reference(&ReferenceSpec {
            kind: ReferenceKind::Chirp {
                amplitude: 1.0,
                f_start: 0.1,
                f_end: 0.1,
                ts: 0.033,
            },
            horizon: 4,
        })
        .unwrap();
        for (k, v) in r.iter().enumerate() {
            assert_abs_diff_eq!(*v, (2.0 * PI * 0.1 * k as f64 * 0.033).sin(), epsilon = 1e-15);
        }
    }

    #[test]
    fn decreasing_chirp_rejected() {
        let spec = ReferenceSpec {
            kind: ReferenceKind::Chirp {
                amplitude: 1.0,
                f_start: 1.0,
                f_end: 0.5,
                ts: 0.033,
            },
            horizon: 4,
        };
        assert!(reference(&spec).is_err());
    }
}
