use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Split, TimeSeriesSample, MIN_LENGTH};
use crate::error::{Result, TemsrError};

/// How class identity is written into a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotifFamily {
    /// Per-class frequency with per-class channel amplitudes and phases.
    Sinusoid,
    /// Per-class resonant AR(2) process per channel.
    Autoregressive,
}

/// Distortion applied to the target domain only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub amplitude_scale: f64,
    /// Multiplies the time axis; values above 1 speed the signal up.
    pub time_warp: f64,
    /// Additive per-channel offset, cycled when shorter than the channel count.
    pub channel_offset: Vec<f64>,
    /// Multiplies the noise level.
    pub noise_scale: f64,
}

impl DomainShift {
    pub fn identity() -> Self {
        DomainShift {
            amplitude_scale: 1.0,
            time_warp: 1.0,
            channel_offset: vec![0.0],
            noise_scale: 1.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.amplitude_scale == 1.0
            && self.time_warp == 1.0
            && self.noise_scale == 1.0
            && self.channel_offset.iter().all(|&o| o == 0.0)
    }

    fn offset(&self, channel: usize) -> f64 {
        if self.channel_offset.is_empty() {
            0.0
        } else {
            self.channel_offset[channel % self.channel_offset.len()]
        }
    }
}

impl Default for DomainShift {
    fn default() -> Self {
        DomainShift {
            amplitude_scale: 0.5,
            time_warp: 1.0,
            channel_offset: vec![0.8, -0.8, 0.6],
            noise_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub channels: usize,
    pub length: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub motif: MotifFamily,
    /// Cycles per window of class 0; class `c` adds `c * frequency_step`.
    pub base_frequency: f64,
    pub frequency_step: f64,
    pub noise_std: f64,
    pub shift: DomainShift,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 4,
            channels: 3,
            length: 128,
            train_per_class: 64,
            test_per_class: 32,
            motif: MotifFamily::Sinusoid,
            base_frequency: 3.0,
            frequency_step: 2.0,
            noise_std: 0.25,
            shift: DomainShift::default(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(TemsrError::Config(format!(
                "synthetic spec needs at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.length < MIN_LENGTH {
            return Err(TemsrError::Config(format!(
                "synthetic spec needs length >= {MIN_LENGTH}, got {}",
                self.length
            )));
        }
        if self.channels == 0 {
            return Err(TemsrError::Config("synthetic spec needs channels >= 1".into()));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(TemsrError::Config("empty synthetic split".into()));
        }
        let s = &self.shift;
        if !(s.amplitude_scale.is_finite()
            && s.time_warp > 0.0
            && s.noise_scale >= 0.0
            && self.noise_std >= 0.0)
        {
            return Err(TemsrError::Config("invalid shift descriptor".into()));
        }
        Ok(())
    }
}

/// Train and test splits of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSplits {
    pub train: Dataset,
    pub test: Dataset,
}

/// Class templates shared by both domains.
struct Templates {
    frequency: Vec<f64>,
    /// `[class][channel]`
    amplitude: Vec<Vec<f64>>,
    phase: Vec<Vec<f64>>,
    /// AR(2) pole radius per class.
    radius: Vec<f64>,
}

impl Templates {
    fn draw(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Self {
        let c = spec.classes;
        let n = spec.channels;
        let frequency = (0..c)
            .map(|k| spec.base_frequency + k as f64 * spec.frequency_step)
            .collect();
        let amplitude = (0..c)
            .map(|_| (0..n).map(|_| rng.gen_range(0.6..1.2)).collect())
            .collect();
        let phase = (0..c)
            .map(|_| (0..n).map(|_| rng.gen_range(0.0..2.0 * PI)).collect())
            .collect();
        let radius = (0..c).map(|_| rng.gen_range(0.93..0.97)).collect();
        Templates {
            frequency,
            amplitude,
            phase,
            radius,
        }
    }
}

fn draw_sample(
    spec: &SyntheticSpec,
    templates: &Templates,
    class: usize,
    shift: &DomainShift,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let n = spec.channels;
    let l = spec.length;
    let noise = Normal::new(0.0, 1.0).unwrap();
    let sigma = spec.noise_std * shift.noise_scale;
    let warp = shift.time_warp;
    let mut out = Array2::zeros((n, l));
    match spec.motif {
        MotifFamily::Sinusoid => {
            let start = rng.gen_range(0.0..2.0 * PI);
            let jitter = rng.gen_range(0.85..1.15);
            let freq = templates.frequency[class] * rng.gen_range(0.95..1.05);
            for ch in 0..n {
                let amp = templates.amplitude[class][ch] * jitter;
                let psi = templates.phase[class][ch];
                let mut ar = 0.0;
                for t in 0..l {
                    ar = 0.5 * ar + sigma * noise.sample(rng);
                    let pos = t as f64 * warp / l as f64;
                    let v = amp * (2.0 * PI * freq * pos + start + psi).sin() + ar;
                    out[[ch, t]] = shift.amplitude_scale * v + shift.offset(ch);
                }
            }
        }
        MotifFamily::Autoregressive => {
            // Resonance at the class frequency; the warp moves the resonance.
            let omega = 2.0 * PI * templates.frequency[class] * warp / l as f64;
            let r = templates.radius[class];
            let a1 = 2.0 * r * omega.cos();
            let a2 = -r * r;
            for ch in 0..n {
                let gain = templates.amplitude[class][ch];
                let (mut y1, mut y2) = (0.0, 0.0);
                // Burn-in so the process is near stationarity.
                for t in 0..(l + 64) {
                    let y = a1 * y1 + a2 * y2 + 0.3 * noise.sample(rng);
                    y2 = y1;
                    y1 = y;
                    if t >= 64 {
                        let v = gain * y * 0.4 + sigma * noise.sample(rng);
                        out[[ch, t - 64]] = shift.amplitude_scale * v + shift.offset(ch);
                    }
                }
            }
        }
    }
    // Values are kept f32-representable so the on-disk format round-trips.
    out.mapv_inplace(|v| v as f32 as f64);
    out
}

fn draw_split(
    spec: &SyntheticSpec,
    templates: &Templates,
    shift: &DomainShift,
    per_class: usize,
    domain_id: &str,
    split: Split,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    let mut samples = Vec::with_capacity(per_class * spec.classes);
    for i in 0..per_class * spec.classes {
        let class = i % spec.classes;
        let values = draw_sample(spec, templates, class, shift, rng);
        samples.push(TimeSeriesSample::new(values, Some(class)));
    }
    Dataset::new(samples, domain_id, spec.classes, split)
}

/// Draws a labeled source domain and a shifted target domain that share the
/// class templates. Every split is labeled; adaptation code must call
/// [`Dataset::without_labels`] on the target train split.
pub fn generate_domain_pair(spec: &SyntheticSpec, seed: u64) -> Result<(DomainSplits, DomainSplits)> {
    spec.validate()?;
    let mut template_rng = ChaCha8Rng::seed_from_u64(seed);
    let templates = Templates::draw(spec, &mut template_rng);
    let identity = DomainShift::identity();
    let stream = |s: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(s);
        r
    };
    let source = DomainSplits {
        train: draw_split(spec, &templates, &identity, spec.train_per_class, "source", Split::Train, &mut stream(1))?,
        test: draw_split(spec, &templates, &identity, spec.test_per_class, "source", Split::Test, &mut stream(2))?,
    };
    let target = DomainSplits {
        train: draw_split(spec, &templates, &spec.shift, spec.train_per_class, "target", Split::Train, &mut stream(3))?,
        test: draw_split(spec, &templates, &spec.shift, spec.test_per_class, "target", Split::Test, &mut stream(4))?,
    };
    Ok((source, target))
}
