//! Snap vibration: onset detection on gridded sound, burst features,
//! decaying-sinusoid template banks, waveform synthesis and WAV export, and
//! the rating store used for human-in-the-loop template choice.

use std::io::{Seek, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::DisplacementGrid;
use crate::model::FieldError;

/// Peak drive voltage of the vibration channel.
pub const MAX_AMPLITUDE_V: f64 = 2.43;
pub const MIN_FREQUENCY_HZ: f64 = 50.0;
pub const MAX_FREQUENCY_HZ: f64 = 20_000.0;
/// End amplitudes of the template bank (V).
pub const END_AMPLITUDES_V: [f64; 3] = [0.0, 0.3, 0.6];
/// Relative frequency variants of the template bank.
pub const FREQUENCY_VARIANTS: [f64; 3] = [1.0, 0.8, 1.2];
/// Fraction of travel excluded at each end before looking for an onset.
pub const ONSET_MASK_FRACTION: f64 = 0.15;
pub const DEFAULT_ONSET_THRESHOLD: f64 = 5.0;
pub const MIN_RATING: u8 = 1;
pub const MAX_RATING: u8 = 7;

#[derive(Debug, Error)]
pub enum VibrationError {
    #[error("window has {crossings} zero crossings; need at least one full period")]
    TooShort { crossings: usize },
    #[error("silent window")]
    Silent,
    #[error("sample rate {sample_rate} Hz is below twice the frequency {frequency} Hz")]
    Nyquist { sample_rate: f64, frequency: f64 },
    #[error("invalid template: {0}")]
    Template(String),
    #[error("rating must be in {MIN_RATING}..={MAX_RATING}, got {0}")]
    Rating(i64),
    #[error(transparent)]
    Wav(#[from] hound::Error),
}

/// Where, how long and at what pitch a button's snap vibration plays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VibrationDescriptor {
    pub onset_mm: f64,
    pub duration_ms: f64,
    pub frequency_hz: f64,
    pub template_id: String,
}

impl VibrationDescriptor {
    pub fn validate(&self, travel_range: f64) -> Vec<FieldError> {
        let mut errs = Vec::new();
        if !(self.onset_mm > 0.0 && self.onset_mm < travel_range) {
            errs.push(FieldError::new(
                "vibration.onset_mm",
                format!("must satisfy 0 < onset < travel range ({travel_range}), got {}", self.onset_mm),
            ));
        }
        if !(self.duration_ms.is_finite() && self.duration_ms > 0.0) {
            errs.push(FieldError::new(
                "vibration.duration_ms",
                format!("must be positive, got {}", self.duration_ms),
            ));
        }
        if !(MIN_FREQUENCY_HZ..=MAX_FREQUENCY_HZ).contains(&self.frequency_hz) {
            errs.push(FieldError::new(
                "vibration.frequency_hz",
                format!(
                    "must be in [{MIN_FREQUENCY_HZ}, {MAX_FREQUENCY_HZ}], got {}",
                    self.frequency_hz
                ),
            ));
        }
        errs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Envelope {
    #[default]
    LinearDecay,
}

/// Linearly enveloped sinusoid starting at phase zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveTemplate {
    pub id: String,
    pub frequency_hz: f64,
    pub duration_ms: f64,
    pub amplitude_start: f64,
    pub amplitude_end: f64,
    #[serde(default)]
    pub envelope: Envelope,
}

impl WaveTemplate {
    pub fn validate(&self) -> Result<(), VibrationError> {
        let bad = |m: String| Err(VibrationError::Template(m));
        if !(self.frequency_hz.is_finite() && self.frequency_hz > 0.0) {
            return bad(format!("frequency must be positive, got {}", self.frequency_hz));
        }
        if !(self.duration_ms.is_finite() && self.duration_ms > 0.0) {
            return bad(format!("duration must be positive, got {}", self.duration_ms));
        }
        if self.amplitude_start.abs() > MAX_AMPLITUDE_V || self.amplitude_end.abs() > MAX_AMPLITUDE_V {
            return bad(format!("amplitudes must stay within ±{MAX_AMPLITUDE_V} V"));
        }
        if self.amplitude_end > self.amplitude_start {
            return bad("amplitude_end must not exceed amplitude_start".into());
        }
        Ok(())
    }

    /// Envelope value at `t_ms` (held at the end value past the duration).
    pub fn amplitude_at(&self, t_ms: f64) -> f64 {
        let w = (t_ms / self.duration_ms).clamp(0.0, 1.0);
        self.amplitude_start + (self.amplitude_end - self.amplitude_start) * w
    }

    pub fn value_at(&self, t_ms: f64) -> f64 {
        self.amplitude_at(t_ms) * (std::f64::consts::TAU * self.frequency_hz * t_ms / 1000.0).sin()
    }

    /// Number of samples covering the duration at `sample_rate`, both ends
    /// included.
    pub fn sample_count(&self, sample_rate: f64) -> usize {
        (self.duration_ms * sample_rate / 1000.0 + 1e-9).floor() as usize + 1
    }
}

/// Burst features measured from a sound window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BurstFeatures {
    pub duration_ms: f64,
    pub frequency_hz: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len().is_multiple_of(2) {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    }
}

/// Robust level and spread (median, 1.4826 MAD) of a sample.
pub fn robust_baseline(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mut v = values.to_vec();
    let center = median(&mut v);
    let mut dev: Vec<f64> = values.iter().map(|x| (x - center).abs()).collect();
    (center, 1.4826 * median(&mut dev))
}

/// First bin in the central part of travel whose sound level departs from
/// the baseline by more than `threshold` robust standard deviations.
/// Returns the lower edge of that bin.
pub fn detect_onset(grid: &DisplacementGrid, sound_per_bin: &[f64], threshold: f64) -> Option<f64> {
    assert_eq!(grid.len(), sound_per_bin.len(), "sound vector does not match grid");
    let travel = grid.travel_range();
    let (lo, hi) = (ONSET_MASK_FRACTION * travel, (1.0 - ONSET_MASK_FRACTION) * travel);
    let masked: Vec<usize> = (0..grid.len())
        .filter(|&i| {
            let c = grid.center(i);
            c >= lo && c <= hi
        })
        .collect();
    let values: Vec<f64> = masked.iter().map(|&i| sound_per_bin[i]).collect();
    let (base, sigma) = robust_baseline(&values);
    let limit = threshold * sigma.max(1e-12);
    masked
        .into_iter()
        .find(|&i| (sound_per_bin[i] - base).abs() > limit)
        .map(|i| grid.edge(i))
}

/// Duration and frequency of a zero-centred burst.
///
/// Duration is the span where |x| exceeds 10% of the peak; frequency comes
/// from linearly interpolated zero crossings inside that span.
pub fn extract_features(samples: &[f64], sample_rate: f64) -> Result<BurstFeatures, VibrationError> {
    let peak = samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak == 0.0 {
        return Err(VibrationError::Silent);
    }
    let above = |x: &f64| x.abs() > 0.1 * peak;
    let first = samples.iter().position(above).unwrap();
    let last = samples.iter().rposition(above).unwrap();
    let duration_ms = (last - first + 1) as f64 / sample_rate * 1000.0;

    let window = &samples[first..=last];
    let mut crossings = Vec::new();
    for (i, w) in window.windows(2).enumerate() {
        let (a, b) = (w[0], w[1]);
        if a == 0.0 && i > 0 {
            continue;
        }
        if (a < 0.0 && b >= 0.0) || (a > 0.0 && b <= 0.0) {
            let frac = if b == a { 0.0 } else { a / (a - b) };
            crossings.push((i as f64 + frac) / sample_rate);
        }
    }
    if crossings.len() < 3 {
        return Err(VibrationError::TooShort {
            crossings: crossings.len(),
        });
    }
    let span = crossings[crossings.len() - 1] - crossings[0];
    Ok(BurstFeatures {
        duration_ms,
        frequency_hz: (crossings.len() - 1) as f64 / (2.0 * span),
    })
}

pub fn template_id(frequency_hz: f64, amplitude_end: f64) -> String {
    format!("sin-{frequency_hz:.0}hz-end{amplitude_end:.1}v")
}

/// Template bank at the measured features: each frequency variant decays from
/// full amplitude to each of the end amplitudes.
pub fn generate_templates(features: BurstFeatures) -> Vec<WaveTemplate> {
    let mut bank = Vec::new();
    for rel in FREQUENCY_VARIANTS {
        let f = (features.frequency_hz * rel).clamp(MIN_FREQUENCY_HZ, MAX_FREQUENCY_HZ);
        for end in END_AMPLITUDES_V {
            bank.push(WaveTemplate {
                id: template_id(f, end),
                frequency_hz: f,
                duration_ms: features.duration_ms,
                amplitude_start: MAX_AMPLITUDE_V,
                amplitude_end: end,
                envelope: Envelope::LinearDecay,
            });
        }
    }
    bank
}

/// Samples the template at `sample_rate` from t = 0 through its duration.
pub fn synthesize(template: &WaveTemplate, sample_rate: f64) -> Result<Vec<f64>, VibrationError> {
    template.validate()?;
    if sample_rate.is_nan() || sample_rate < 2.0 * template.frequency_hz {
        return Err(VibrationError::Nyquist {
            sample_rate,
            frequency: template.frequency_hz,
        });
    }
    Ok((0..template.sample_count(sample_rate))
        .map(|i| template.value_at(i as f64 * 1000.0 / sample_rate))
        .collect())
}

/// Writes 16-bit mono PCM with ±2.43 V mapped to full scale.
pub fn write_wav<W: Write + Seek>(
    writer: W,
    samples: &[f64],
    sample_rate: u32,
) -> Result<(), VibrationError> {
    let format = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::new(writer, format)?;
    for &x in samples {
        let q = (x / MAX_AMPLITUDE_V * i16::MAX as f64).round();
        w.write_sample(q.clamp(i16::MIN as f64, i16::MAX as f64) as i16)?;
    }
    w.finalize()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub button_id: String,
    pub velocity_mm_s: f64,
    pub template_id: String,
    pub score: u8,
}

/// Ratings keyed by (button, velocity, template); re-rating replaces.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RatingStore {
    pub ratings: Vec<Rating>,
}

impl RatingStore {
    pub fn rate(
        &mut self,
        button_id: &str,
        velocity_mm_s: f64,
        template_id: &str,
        score: i64,
    ) -> Result<(), VibrationError> {
        if !(MIN_RATING as i64..=MAX_RATING as i64).contains(&score) {
            return Err(VibrationError::Rating(score));
        }
        let score = score as u8;
        match self.ratings.iter_mut().find(|r| {
            r.button_id == button_id && r.velocity_mm_s == velocity_mm_s && r.template_id == template_id
        }) {
            Some(r) => r.score = score,
            None => self.ratings.push(Rating {
                button_id: button_id.into(),
                velocity_mm_s,
                template_id: template_id.into(),
                score,
            }),
        }
        Ok(())
    }

    pub fn ratings_for<'a>(&'a self, button_id: &'a str, velocity_mm_s: f64) -> impl Iterator<Item = &'a Rating> {
        self.ratings
            .iter()
            .filter(move |r| r.button_id == button_id && r.velocity_mm_s == velocity_mm_s)
    }

    /// Highest-rated template; ties go to the template closest to `measured`.
    pub fn best_template(
        &self,
        button_id: &str,
        velocity_mm_s: f64,
        bank: &[WaveTemplate],
        measured: BurstFeatures,
    ) -> Option<String> {
        let distance = |t: &WaveTemplate| {
            (
                (t.frequency_hz - measured.frequency_hz).abs() / measured.frequency_hz
                    + (t.duration_ms - measured.duration_ms).abs() / measured.duration_ms,
                t.amplitude_end,
            )
        };
        self.ratings_for(button_id, velocity_mm_s)
            .filter_map(|r| bank.iter().find(|t| t.id == r.template_id).map(|t| (r.score, t)))
            .min_by(|(sa, ta), (sb, tb)| {
                sb.cmp(sa).then_with(|| {
                    let (da, db) = (distance(ta), distance(tb));
                    da.0.total_cmp(&db.0).then(da.1.total_cmp(&db.1))
                })
            })
            .map(|(_, t)| t.id.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn burst(f: f64, dur_ms: f64, sr: f64, pad: usize) -> Vec<f64> {
        let n = (dur_ms * sr / 1000.0).round() as usize;
        let mut v = vec![0.0; pad];
        v.extend((0..n).map(|i| (std::f64::consts::TAU * f * i as f64 / sr).sin()));
        v.extend(vec![0.0; pad]);
        v
    }

    #[test]
    fn clear_like_burst_features() {
        let f = extract_features(&burst(239.0, 16.0, 44_100.0, 300), 44_100.0).unwrap();
        assert!((f.frequency_hz - 239.0).abs() <= 10.0, "{f:?}");
        assert!((f.duration_ms - 16.0).abs() <= 2.0, "{f:?}");
    }

    #[test]
    fn hundred_hz_burst_features() {
        let f = extract_features(&burst(100.0, 50.0, 8_000.0, 100), 8_000.0).unwrap();
        assert!((f.frequency_hz - 100.0).abs() <= 5.0, "{f:?}");
        assert!((f.duration_ms - 50.0).abs() <= 5.0, "{f:?}");
    }

    #[test]
    fn dc_window_has_no_features() {
        assert!(matches!(
            extract_features(&[1.0; 500], 1000.0),
            Err(VibrationError::TooShort { crossings: 0 })
        ));
        assert!(matches!(extract_features(&[0.0; 10], 1000.0), Err(VibrationError::Silent)));
    }

    #[test]
    fn bank_contains_the_three_decays() {
        let bank = generate_templates(BurstFeatures {
            duration_ms: 16.0,
            frequency_hz: 239.0,
        });
        assert_eq!(bank.len(), 9);
        for end in END_AMPLITUDES_V {
            assert!(bank.iter().any(|t| t.frequency_hz == 239.0
                && t.duration_ms == 16.0
                && t.amplitude_start == MAX_AMPLITUDE_V
                && t.amplitude_end == end));
        }
        assert!(bank.iter().any(|t| (t.frequency_hz - 191.2).abs() < 1e-9));
        assert!(bank.iter().any(|t| (t.frequency_hz - 286.8).abs() < 1e-9));
    }

    #[test]
    fn synthesis_count_and_phase() {
        let t = WaveTemplate {
            id: "x".into(),
            frequency_hz: 239.0,
            duration_ms: 16.0,
            amplitude_start: 2.43,
            amplitude_end: 0.0,
            envelope: Envelope::LinearDecay,
        };
        let s = synthesize(&t, 44_100.0).unwrap();
        assert_eq!(s.len(), 706);
        assert_eq!(s[0], 0.0);
        assert!(s.iter().all(|x| x.abs() <= MAX_AMPLITUDE_V));
        let silent = WaveTemplate {
            amplitude_start: 0.0,
            ..t.clone()
        };
        assert!(synthesize(&silent, 44_100.0).unwrap().iter().all(|&x| x == 0.0));
        assert!(matches!(synthesize(&t, 400.0), Err(VibrationError::Nyquist { .. })));
    }

    #[test]
    fn onset_of_constructed_burst() {
        let grid = DisplacementGrid::new(4.0);
        let mut sound = vec![0.0; 80];
        for s in sound.iter_mut().skip(42).take(4) {
            *s = 50.0;
        }
        let onset = detect_onset(&grid, &sound, DEFAULT_ONSET_THRESHOLD).unwrap();
        assert!((onset - 2.1).abs() <= 0.05);
        assert_eq!(detect_onset(&grid, &vec![0.0; 80], 5.0), None);
        let mut head = vec![0.0; 80];
        head[4] = 50.0;
        assert_eq!(detect_onset(&grid, &head, 5.0), None);
    }

    #[test]
    fn wav_round_trip() {
        let mut buf = std::io::Cursor::new(Vec::new());
        write_wav(&mut buf, &[0.0, 2.43, -2.43, 1.215], 44_100).unwrap();
        buf.set_position(0);
        let mut r = hound::WavReader::new(buf).unwrap();
        assert_eq!(r.spec().sample_rate, 44_100);
        let s: Vec<i16> = r.samples::<i16>().map(|x| x.unwrap()).collect();
        assert_eq!(s, vec![0, 32767, -32767, 16384]);
    }

    #[test]
    fn ratings_argmax_and_tie_break() {
        let measured = BurstFeatures {
            duration_ms: 16.0,
            frequency_hz: 239.0,
        };
        let bank = generate_templates(measured);
        let mut store = RatingStore::default();
        store.rate("clear", 100.0, &bank[1].id, 3).unwrap();
        store.rate("clear", 100.0, &bank[4].id, 5).unwrap();
        store.rate("clear", 100.0, &bank[7].id, 7).unwrap();
        assert_eq!(store.best_template("clear", 100.0, &bank, measured), Some(bank[7].id.clone()));
        store.rate("clear", 100.0, &bank[7].id, 5).unwrap();
        // 4 is 0.8 f, 7 is 1.2 f: equally far; 1 (measured f) was rated lower
        store.rate("clear", 100.0, &bank[1].id, 5).unwrap();
        assert_eq!(store.best_template("clear", 100.0, &bank, measured), Some(bank[1].id.clone()));
        assert!(store.rate("clear", 100.0, &bank[0].id, 8).is_err());
        assert!(store.rate("clear", 100.0, &bank[0].id, 0).is_err());
        assert_eq!(store.best_template("other", 100.0, &bank, measured), None);
    }
}
