//! Multichannel sensor recordings: the in-memory model, the `MEGR` binary
//! container, CSV fixtures and seeded synthetic signals.
//!
//! `MEGR` layout (little-endian):
//!
//! | offset | size | field                    |
//! |--------|------|--------------------------|
//! | 0      | 4    | magic `"MEGR"`           |
//! | 4      | 2    | format version (`1`)     |
//! | 6      | 4    | sensor count (`u32`)     |
//! | 10     | 8    | duration in samples      |
//! | 18     | 8    | sample rate, Hz (`f64`)  |
//! | 26     | ...  | sensor-major `f32` data  |

use std::f64::consts::PI;
use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"MEGR";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 26;
/// Bytes per stored sample.
pub const SAMPLE_WIDTH: usize = 4;
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 500.0;

#[derive(Debug, Error)]
pub enum RecordingError {
    #[error("bad magic: expected \"MEGR\"")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("zero sensors")]
    ZeroSensors,
    #[error("at least two sensors are required, got {0}")]
    TooFewSensors(usize),
    #[error("zero-length recording")]
    ZeroDuration,
    #[error("sample rate must be positive and finite, got {0}")]
    BadSampleRate(f64),
    #[error("sample matrix has {found} entries, expected {expected}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("component frequency {freq} Hz violates Nyquist limit {nyquist} Hz")]
    Nyquist { freq: f64, nyquist: f64 },
    #[error("component has {found} delays for {expected} sensors")]
    DelayCount { expected: usize, found: usize },
    #[error("negative delay {0} samples")]
    NegativeDelay(f64),
    #[error("sensor {sensor} out of range (recording has {count})")]
    SensorOutOfRange { sensor: usize, count: usize },
    #[error("window [{offset}, {end}) exceeds recording length {duration}")]
    WindowOutOfRange {
        offset: usize,
        end: usize,
        duration: usize,
    },
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A multichannel time series, sensor-major, in femtotesla.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    sensor_count: usize,
    sample_rate_hz: f64,
    duration_samples: usize,
    samples: Vec<f32>,
}

impl Recording {
    pub fn new(
        sensor_count: usize,
        sample_rate_hz: f64,
        samples: Vec<f32>,
    ) -> Result<Self, RecordingError> {
        if sensor_count == 0 {
            return Err(RecordingError::ZeroSensors);
        }
        if sensor_count < 2 {
            return Err(RecordingError::TooFewSensors(sensor_count));
        }
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(RecordingError::BadSampleRate(sample_rate_hz));
        }
        if samples.is_empty() || samples.len() % sensor_count != 0 {
            return Err(if samples.is_empty() {
                RecordingError::ZeroDuration
            } else {
                RecordingError::ShapeMismatch {
                    expected: (samples.len() / sensor_count + 1) * sensor_count,
                    found: samples.len(),
                }
            });
        }
        let duration_samples = samples.len() / sensor_count;
        Ok(Self {
            sensor_count,
            sample_rate_hz,
            duration_samples,
            samples,
        })
    }

    /// Builds a recording from one vector per sensor.
    pub fn from_channels(
        sample_rate_hz: f64,
        channels: &[Vec<f32>],
    ) -> Result<Self, RecordingError> {
        let duration = channels.first().map_or(0, Vec::len);
        if let Some(bad) = channels.iter().find(|c| c.len() != duration) {
            return Err(RecordingError::ShapeMismatch {
                expected: duration * channels.len(),
                found: bad.len() * channels.len(),
            });
        }
        let samples = channels.iter().flatten().copied().collect();
        Self::new(channels.len(), sample_rate_hz, samples)
    }

    pub fn sensor_count(&self) -> usize {
        self.sensor_count
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn duration_samples(&self) -> usize {
        self.duration_samples
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    /// The full series of one sensor.
    pub fn channel(&self, sensor: usize) -> Result<&[f32], RecordingError> {
        if sensor >= self.sensor_count {
            return Err(RecordingError::SensorOutOfRange {
                sensor,
                count: self.sensor_count,
            });
        }
        let start = sensor * self.duration_samples;
        Ok(&self.samples[start..start + self.duration_samples])
    }

    pub fn payload_bytes(&self) -> usize {
        self.samples.len() * SAMPLE_WIDTH
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload_bytes());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sensor_count as u32).to_le_bytes());
        out.extend_from_slice(&(self.duration_samples as u64).to_le_bytes());
        out.extend_from_slice(&self.sample_rate_hz.to_le_bytes());
        for s in &self.samples {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RecordingError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(RecordingError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(RecordingError::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(RecordingError::UnsupportedVersion(version));
        }
        let sensor_count = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let duration = u64::from_le_bytes(bytes[10..18].try_into().unwrap()) as usize;
        let rate = f64::from_le_bytes(bytes[18..26].try_into().unwrap());
        if sensor_count == 0 {
            return Err(RecordingError::ZeroSensors);
        }
        let expected = sensor_count
            .checked_mul(duration)
            .and_then(|n| n.checked_mul(SAMPLE_WIDTH))
            .and_then(|n| n.checked_add(HEADER_LEN))
            .ok_or(RecordingError::Truncated {
                expected: usize::MAX,
                found: bytes.len(),
            })?;
        if bytes.len() < expected {
            return Err(RecordingError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        let samples = bytes[HEADER_LEN..expected]
            .chunks_exact(SAMPLE_WIDTH)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(sensor_count, rate, samples)
    }
}

/// Storage needed for a recording of the given shape.
pub fn payload_bytes(sensors: u64, sample_rate_hz: u64, seconds: u64, sample_width: u64) -> u64 {
    sensors * sample_rate_hz * seconds * sample_width
}

pub fn load_recording(path: impl AsRef<Path>) -> Result<Recording, RecordingError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    Recording::from_bytes(&bytes)
}

pub fn store_recording(recording: &Recording, path: impl AsRef<Path>) -> Result<(), RecordingError> {
    let mut file = io::BufWriter::new(fs::File::create(path)?);
    file.write_all(&recording.to_bytes())?;
    file.flush()?;
    Ok(())
}

/// Reads a CSV fixture: a `sample_rate=<hz>` line followed by one row per
/// sample instant, one column per sensor.
pub fn read_csv_recording(reader: impl Read) -> Result<Recording, RecordingError> {
    let mut reader = BufReader::new(reader);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let rate = header
        .trim()
        .strip_prefix("sample_rate=")
        .ok_or_else(|| RecordingError::Csv("first line must be sample_rate=<hz>".into()))?
        .trim()
        .parse::<f64>()
        .map_err(|e| RecordingError::Csv(format!("sample rate: {e}")))?;

    let mut csv = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut channels: Vec<Vec<f32>> = Vec::new();
    for (row, record) in csv.records().enumerate() {
        let record = record.map_err(|e| RecordingError::Csv(e.to_string()))?;
        if channels.is_empty() {
            channels = vec![Vec::new(); record.len()];
        } else if record.len() != channels.len() {
            return Err(RecordingError::Csv(format!(
                "row {}: {} columns, expected {}",
                row + 2,
                record.len(),
                channels.len()
            )));
        }
        for (ch, field) in channels.iter_mut().zip(record.iter()) {
            let v = field
                .parse::<f32>()
                .map_err(|e| RecordingError::Csv(format!("row {}: {e}", row + 2)))?;
            ch.push(v);
        }
    }
    if channels.is_empty() {
        return Err(RecordingError::ZeroSensors);
    }
    Recording::from_channels(rate, &channels)
}

pub fn load_csv_recording(path: impl AsRef<Path>) -> Result<Recording, RecordingError> {
    read_csv_recording(fs::File::open(path)?)
}

/// Gaussian amplitude envelope turning a sinusoid into a transient burst.
/// Centered at `center_samples` on an undelayed sensor; every sensor sees the
/// envelope shifted by its own delay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Burst {
    pub center_samples: f64,
    pub width_samples: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub frequency_hz: f64,
    pub amplitude: f64,
    /// One delay per sensor, in samples.
    pub delay_samples: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burst: Option<Burst>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub sensor_count: usize,
    pub sample_rate_hz: f64,
    pub duration_samples: usize,
    pub components: Vec<Component>,
    pub noise_amplitude: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), RecordingError> {
        if self.sensor_count == 0 {
            return Err(RecordingError::ZeroSensors);
        }
        if self.sensor_count < 2 {
            return Err(RecordingError::TooFewSensors(self.sensor_count));
        }
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return Err(RecordingError::BadSampleRate(self.sample_rate_hz));
        }
        if self.duration_samples == 0 {
            return Err(RecordingError::ZeroDuration);
        }
        let nyquist = self.sample_rate_hz / 2.0;
        for c in &self.components {
            if !(c.frequency_hz < nyquist) {
                return Err(RecordingError::Nyquist {
                    freq: c.frequency_hz,
                    nyquist,
                });
            }
            if c.delay_samples.len() != self.sensor_count {
                return Err(RecordingError::DelayCount {
                    expected: self.sensor_count,
                    found: c.delay_samples.len(),
                });
            }
            if let Some(&d) = c.delay_samples.iter().find(|d| !(**d >= 0.0)) {
                return Err(RecordingError::NegativeDelay(d));
            }
        }
        Ok(())
    }
}

/// Deterministic noise stream for one sensor, uniform in [-1, 1].
fn sensor_noise(seed: u64, sensor: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sensor as u64);
    rng
}

pub fn synthesize_recording(spec: &SyntheticSpec) -> Result<Recording, RecordingError> {
    spec.validate()?;
    let n = spec.duration_samples;
    let mut samples = Vec::with_capacity(spec.sensor_count * n);
    for sensor in 0..spec.sensor_count {
        let mut noise = sensor_noise(spec.seed, sensor);
        for t in 0..n {
            let t = t as f64;
            let mut v = 0.0;
            for c in &spec.components {
                let shifted = t - c.delay_samples[sensor];
                let mut term =
                    c.amplitude * (2.0 * PI * c.frequency_hz * shifted / spec.sample_rate_hz).sin();
                if let Some(b) = c.burst {
                    let z = (shifted - b.center_samples) / b.width_samples;
                    term *= (-0.5 * z * z).exp();
                }
                v += term;
            }
            let u: f64 = noise.random_range(-1.0..=1.0);
            v += spec.noise_amplitude * u;
            samples.push(v as f32);
        }
    }
    Recording::new(spec.sensor_count, spec.sample_rate_hz, samples)
}

/// A contiguous slice of one sensor's series.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub sensor_index: usize,
    pub offset_samples: usize,
    pub values: Vec<f64>,
}

impl Window {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn window(
    recording: &Recording,
    sensor: usize,
    offset: usize,
    length: usize,
) -> Result<Window, RecordingError> {
    let channel = recording.channel(sensor)?;
    let end = offset.checked_add(length).unwrap_or(usize::MAX);
    if end > channel.len() {
        return Err(RecordingError::WindowOutOfRange {
            offset,
            end,
            duration: channel.len(),
        });
    }
    Ok(Window {
        sensor_index: sensor,
        offset_samples: offset,
        values: channel[offset..end].iter().map(|&v| f64::from(v)).collect(),
    })
}
