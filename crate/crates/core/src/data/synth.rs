use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::series::RawSeries;
use crate::error::{Error, Result};

/// Relative frequency of each anomaly type among injected events.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalyMix {
    pub spike: f64,
    pub level_shift: f64,
    pub drift: f64,
}

impl Default for AnomalyMix {
    fn default() -> Self {
        AnomalyMix {
            spike: 1.0 / 3.0,
            level_shift: 1.0 / 3.0,
            drift: 1.0 / 3.0,
        }
    }
}

/// Baseline generator for one channel: a daily sinusoid plus AR(1) jitter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub name: String,
    pub level: f64,
    pub diurnal_amplitude: f64,
    /// Period in samples.
    pub diurnal_period: f64,
    /// Phase as a fraction of the period.
    pub phase: f64,
    pub ar_coef: f64,
    pub ar_sigma: f64,
}

const DEFAULT_CHANNELS: [(&str, f64, f64); 4] = [
    ("cpu_util", 55.0, 0.0),
    ("mem_util", 70.0, 0.02),
    ("sched_queue", 12.0, 0.05),
    ("net_io", 30.0, 0.01),
];

impl ChannelSpec {
    /// Default baseline for channel `c` of a minute-sampled series.
    pub fn default_for(c: usize) -> Self {
        let (name, level, phase) = DEFAULT_CHANNELS
            .get(c)
            .map(|&(n, l, p)| (n.to_string(), l, p))
            .unwrap_or_else(|| (format!("ch{c}"), 20.0, 0.03 * c as f64));
        ChannelSpec {
            name,
            level,
            diurnal_amplitude: 1.0,
            diurnal_period: 1440.0,
            phase,
            ar_coef: 0.9,
            ar_sigma: 0.1,
        }
    }
}

/// Recipe for a synthetic labelled telemetry series.
///
/// Anomaly amplitudes are multiples of `noise_sigma`, the per-step white
/// noise: spikes sit well above it, drifts below it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub length: usize,
    pub features: usize,
    pub seed: u64,
    /// Target fraction of anomalous time steps.
    pub anomaly_ratio: f64,
    pub mix: AnomalyMix,
    pub noise_sigma: f64,
    /// Per-channel baselines; empty means [`ChannelSpec::default_for`].
    pub channels: Vec<ChannelSpec>,
    pub spike_amplitude: [f64; 2],
    pub shift_amplitude: [f64; 2],
    pub drift_amplitude: [f64; 2],
    /// Seconds between samples.
    pub sample_interval: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            length: 20_000,
            features: 4,
            seed: 0,
            anomaly_ratio: 0.10,
            mix: AnomalyMix::default(),
            noise_sigma: 1.0,
            channels: Vec::new(),
            spike_amplitude: [4.0, 6.0],
            shift_amplitude: [2.0, 3.0],
            drift_amplitude: [0.6, 0.9],
            sample_interval: 60.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    Spike,
    LevelShift,
    Drift,
}

impl AnomalyKind {
    /// Inclusive range of event lengths in steps.
    pub fn length_range(self) -> (usize, usize) {
        match self {
            AnomalyKind::Spike => (1, 3),
            AnomalyKind::LevelShift => (20, 60),
            AnomalyKind::Drift => (100, 300),
        }
    }
}

/// One injected anomaly covering rows `start..start + len`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyEvent {
    pub kind: AnomalyKind,
    pub start: usize,
    pub len: usize,
    pub channels: Vec<usize>,
    /// Signed peak offset in series units.
    pub amplitude: f64,
}

impl SyntheticSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SyntheticSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn channel(&self, c: usize) -> ChannelSpec {
        self.channels
            .get(c)
            .cloned()
            .unwrap_or_else(|| ChannelSpec::default_for(c))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.length == 0 || self.features == 0 {
            return bad("length and features must be positive".into());
        }
        if !(0.0..=0.5).contains(&self.anomaly_ratio) {
            return bad(format!(
                "anomaly_ratio {} outside [0, 0.5]",
                self.anomaly_ratio
            ));
        }
        let m = &self.mix;
        let parts = [m.spike, m.level_shift, m.drift];
        if parts.iter().any(|&p| !(p >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("anomaly mix must be non-negative and sum to 1".into());
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad("noise_sigma must be finite and ≥ 0".into());
        }
        for (name, [lo, hi]) in [
            ("spike_amplitude", self.spike_amplitude),
            ("shift_amplitude", self.shift_amplitude),
            ("drift_amplitude", self.drift_amplitude),
        ] {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("{name} must be an ordered non-negative range"));
            }
        }
        if !self.channels.is_empty() && self.channels.len() != self.features {
            return bad(format!(
                "{} channel specs for {} features",
                self.channels.len(),
                self.features
            ));
        }
        for c in &self.channels {
            if !(c.ar_coef.abs() < 1.0) || !(c.diurnal_period > 0.0) || !(c.ar_sigma >= 0.0) {
                return bad(format!(
                    "channel `{}` has an unstable or empty baseline",
                    c.name
                ));
            }
        }
        Ok(())
    }
}

fn pick_kind(mix: &AnomalyMix, rng: &mut ChaCha8Rng) -> AnomalyKind {
    let u: f64 = rng.gen();
    if u < mix.spike {
        AnomalyKind::Spike
    } else if u < mix.spike + mix.level_shift || mix.drift == 0.0 {
        AnomalyKind::LevelShift
    } else {
        AnomalyKind::Drift
    }
}

fn plan_events(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Vec<AnomalyEvent>> {
    let n = spec.length;
    let target = (spec.anomaly_ratio * n as f64).round() as usize;
    let mut events = Vec::new();
    let mut covered = 0;
    while covered < target {
        let kind = pick_kind(&spec.mix, rng);
        let (lo, hi) = kind.length_range();
        let len = rng.gen_range(lo..=hi).min(target - covered);
        let mut channels: Vec<usize> = (0..spec.features).filter(|_| rng.gen_bool(0.5)).collect();
        if channels.is_empty() {
            channels.push(rng.gen_range(0..spec.features));
        }
        let [alo, ahi] = match kind {
            AnomalyKind::Spike => spec.spike_amplitude,
            AnomalyKind::LevelShift => spec.shift_amplitude,
            AnomalyKind::Drift => spec.drift_amplitude,
        };
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let amplitude = sign * rng.gen_range(alo..=ahi) * spec.noise_sigma;
        events.push(AnomalyEvent {
            kind,
            start: 0,
            len,
            channels,
            amplitude,
        });
        covered += len;
    }
    // every event is separated from its neighbours and the series ends by at
    // least one normal step
    let required = covered + events.len() + 1;
    if required > n {
        return Err(Error::Config(format!(
            "cannot place {} anomalous steps in {} events within {n} rows",
            covered,
            events.len()
        )));
    }
    let slack = n - required;
    let mut cuts: Vec<usize> = (0..events.len())
        .map(|_| rng.gen_range(0..=slack))
        .collect();
    cuts.sort_unstable();
    events.shuffle(rng);
    let mut cursor = 0;
    let mut prev_cut = 0;
    for (e, &cut) in events.iter_mut().zip(&cuts) {
        cursor += 1 + (cut - prev_cut);
        prev_cut = cut;
        e.start = cursor;
        cursor += e.len;
    }
    Ok(events)
}

/// Offset an event adds at step `i` of its interval.
fn event_offset(e: &AnomalyEvent, i: usize) -> f64 {
    match e.kind {
        AnomalyKind::Spike | AnomalyKind::LevelShift => e.amplitude,
        // ramp over the first half, then hold
        AnomalyKind::Drift => {
            let ramp = (e.len as f64 / 2.0).max(1.0);
            e.amplitude * ((i + 1) as f64 / ramp).min(1.0)
        }
    }
}

/// Generates the series together with the injected events.
pub fn generate_synthetic_with_events(
    spec: &SyntheticSpec,
) -> Result<(RawSeries, Vec<AnomalyEvent>)> {
    spec.validate()?;
    let (n, d) = (spec.length, spec.features);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let channels: Vec<ChannelSpec> = (0..d).map(|c| spec.channel(c)).collect();

    let mut values = vec![0.0; n * d];
    for (c, ch) in channels.iter().enumerate() {
        let stationary = ch.ar_sigma / (1.0 - ch.ar_coef * ch.ar_coef).sqrt();
        let z: f64 = StandardNormal.sample(&mut rng);
        let mut ar = z * stationary;
        for t in 0..n {
            let e: f64 = StandardNormal.sample(&mut rng);
            ar = ch.ar_coef * ar + ch.ar_sigma * e;
            let diurnal =
                ch.diurnal_amplitude * (2.0 * PI * (t as f64 / ch.diurnal_period + ch.phase)).sin();
            let w: f64 = StandardNormal.sample(&mut rng);
            values[t * d + c] = ch.level + diurnal + ar + spec.noise_sigma * w;
        }
    }

    let events = plan_events(spec, &mut rng)?;
    let mut labels = vec![0u8; n];
    for e in &events {
        for i in 0..e.len {
            let t = e.start + i;
            labels[t] = 1;
            let off = event_offset(e, i);
            for &c in &e.channels {
                values[t * d + c] += off;
            }
        }
    }

    let names = channels.into_iter().map(|c| c.name).collect();
    let mut series = RawSeries::from_dense(names, values, labels)?;
    series.sample_interval = Some(spec.sample_interval);
    Ok((series, events))
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<RawSeries> {
    generate_synthetic_with_events(spec).map(|(s, _)| s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_ratio_has_no_labels() {
        let spec = SyntheticSpec {
            length: 3000,
            anomaly_ratio: 0.0,
            ..Default::default()
        };
        let s = generate_synthetic(&spec).unwrap();
        assert!(s.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn seeded_determinism() {
        let spec = SyntheticSpec {
            length: 4000,
            seed: 11,
            ..Default::default()
        };
        let (a, b) = (
            generate_synthetic(&spec).unwrap(),
            generate_synthetic(&spec).unwrap(),
        );
        assert!(a
            .values
            .iter()
            .zip(&b.values)
            .all(|(x, y)| x.unwrap().to_bits() == y.unwrap().to_bits()));
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn realized_ratio_and_intervals() {
        let spec = SyntheticSpec::default();
        let (s, events) = generate_synthetic_with_events(&spec).unwrap();
        let ratio = s.anomaly_ratio();
        assert!((0.08..=0.12).contains(&ratio), "ratio {ratio}");
        let mut expect = vec![0u8; s.len()];
        let mut truncated = 0;
        for e in &events {
            expect[e.start..e.start + e.len]
                .iter_mut()
                .for_each(|l| *l = 1);
            let (lo, hi) = e.kind.length_range();
            assert!(e.len <= hi);
            truncated += (e.len < lo) as usize;
        }
        assert!(truncated <= 1);
        assert_eq!(s.labels, expect);
    }

    #[test]
    fn validation() {
        let bad_ratio = SyntheticSpec {
            anomaly_ratio: 0.9,
            ..Default::default()
        };
        assert!(matches!(
            generate_synthetic(&bad_ratio),
            Err(Error::Config(_))
        ));
        let bad_mix = SyntheticSpec {
            mix: AnomalyMix {
                spike: 0.5,
                level_shift: 0.5,
                drift: 0.5,
            },
            ..Default::default()
        };
        assert!(bad_mix.validate().is_err());
        let cramped = SyntheticSpec {
            length: 3,
            anomaly_ratio: 0.5,
            mix: AnomalyMix {
                spike: 1.0,
                level_shift: 0.0,
                drift: 0.0,
            },
            ..Default::default()
        };
        assert!(generate_synthetic(&cramped).is_err());
        assert!(SyntheticSpec::from_json(r#"{"length": 100, "bogus": 1}"#).is_err());
        assert_eq!(
            SyntheticSpec::from_json(r#"{"length": 100}"#)
                .unwrap()
                .features,
            4
        );
    }
}
