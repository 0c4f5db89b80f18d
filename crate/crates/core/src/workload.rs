//! Meta-job generation, workload sizing, and local execution of a meta-job
//! over every sensor pair and offset in its range.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::recording::{Recording, SAMPLE_WIDTH};
use crate::wavelet::{analyze_pair, asc_bytes, output_stem, ppm_bytes, WaveletConfig, WaveletError};

/// Reference CPU-seconds for one pair at one offset (102 days spread over
/// 7,257,600 analyses on the reference machine).
pub const DEFAULT_FINE_JOB_CPU_SEC: f64 = 1.214;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("meta_job_size must be at least 1")]
    ZeroMetaJobSize,
    #[error("meta_job_size {size} exceeds offset_max {max}")]
    MetaJobTooLarge { size: u64, max: u64 },
    #[error("at least two sensors are required, got {0}")]
    TooFewSensors(usize),
    #[error("per-job cost must be positive, got {0}")]
    BadJobCost(f64),
    #[error("job covers {job} sensors but the recording has {recording}")]
    SensorMismatch { job: usize, recording: usize },
    #[error(transparent)]
    Wavelet(#[from] WaveletError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub sensor_count: usize,
    pub offset_max: u64,
    pub meta_job_size: u64,
    #[serde(default = "default_window_len")]
    pub window_len: usize,
    #[serde(default = "default_fine_cost")]
    pub per_fine_job_cpu_sec: f64,
}

fn default_window_len() -> usize {
    crate::wavelet::DEFAULT_WINDOW_LEN
}

fn default_fine_cost() -> f64 {
    DEFAULT_FINE_JOB_CPU_SEC
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.sensor_count < 2 {
            return Err(WorkloadError::TooFewSensors(self.sensor_count));
        }
        if self.meta_job_size < 1 {
            return Err(WorkloadError::ZeroMetaJobSize);
        }
        if self.meta_job_size > self.offset_max {
            return Err(WorkloadError::MetaJobTooLarge {
                size: self.meta_job_size,
                max: self.offset_max,
            });
        }
        if !(self.per_fine_job_cpu_sec > 0.0 && self.per_fine_job_cpu_sec.is_finite()) {
            return Err(WorkloadError::BadJobCost(self.per_fine_job_cpu_sec));
        }
        Ok(())
    }
}

pub type JobId = u64;

/// A schedulable unit: every sensor pair over a contiguous offset range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaJob {
    pub id: JobId,
    pub offset_start: u64,
    pub offset_count: u64,
    pub sensor_count: usize,
    /// Nominal CPU-seconds on the speed-1.0 reference machine.
    pub work_units: f64,
    /// Bytes of the recording the job reads.
    pub input_bytes: u64,
}

impl MetaJob {
    pub fn offsets(&self) -> std::ops::Range<u64> {
        self.offset_start..self.offset_start + self.offset_count
    }

    /// Name used in plan substitution and output archives.
    pub fn jobname(&self) -> String {
        format!("j{}", self.id + 1)
    }

    pub fn fine_jobs(&self) -> u64 {
        pair_count(self.sensor_count) * self.offset_count
    }
}

pub fn pair_count(sensor_count: usize) -> u64 {
    let n = sensor_count as u64;
    n * n.saturating_sub(1) / 2
}

/// Splits `[0, offset_max)` into `ceil(offset_max / meta_job_size)` jobs; the
/// last one is short when the size does not divide the range.
pub fn generate_meta_jobs(spec: &WorkloadSpec) -> Result<Vec<MetaJob>, WorkloadError> {
    spec.validate()?;
    let count = spec.offset_max.div_ceil(spec.meta_job_size);
    let pairs = pair_count(spec.sensor_count);
    Ok((0..count)
        .map(|i| {
            let offset_start = i * spec.meta_job_size;
            let offset_count = spec.meta_job_size.min(spec.offset_max - offset_start);
            let span = offset_count + spec.window_len as u64 - 1;
            MetaJob {
                id: i,
                offset_start,
                offset_count,
                sensor_count: spec.sensor_count,
                work_units: (offset_count * pairs) as f64 * spec.per_fine_job_cpu_sec,
                input_bytes: spec.sensor_count as u64 * span * SAMPLE_WIDTH as u64,
            }
        })
        .collect())
}

/// Pair-offset analyses for a sweep over `offset_max` offsets.
pub fn fine_job_count(sensor_count: usize, offset_max: u64) -> u64 {
    pair_count(sensor_count) * offset_max
}

/// One analysis per sensor pair per second of recording.
pub fn estimate_workload(sensor_count: usize, duration_seconds: u64) -> u64 {
    pair_count(sensor_count) * duration_seconds
}

/// Serial runtime of `jobs` analyses on the reference machine, in seconds.
pub fn serial_seconds(jobs: u64, per_job_cpu_sec: f64) -> f64 {
    jobs as f64 * per_job_cpu_sec
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaJobOutput {
    pub archive: PathBuf,
    /// File names inside the archive, in archive order.
    pub files: Vec<String>,
}

/// Runs every unordered pair at every offset of `job`, writes each map as
/// ASC and PPM under `out_dir/<jobname>/`, and bundles them into
/// `out_dir/output.tar.<jobname>`.
pub fn execute_meta_job(
    job: &MetaJob,
    recording: &Recording,
    cfg: &WaveletConfig,
    window_len: usize,
    out_dir: impl AsRef<Path>,
) -> Result<MetaJobOutput, WorkloadError> {
    if job.sensor_count != recording.sensor_count() {
        return Err(WorkloadError::SensorMismatch {
            job: job.sensor_count,
            recording: recording.sensor_count(),
        });
    }
    let n = job.sensor_count;
    let work: Vec<(u64, usize, usize)> = job
        .offsets()
        .flat_map(|o| (0..n).flat_map(move |a| (a + 1..n).map(move |b| (o, a, b))))
        .collect();

    let rendered: Vec<(String, Vec<u8>, Vec<u8>)> = work
        .par_iter()
        .map(|&(offset, a, b)| {
            let map = analyze_pair(recording, a, b, offset as usize, window_len, cfg)?;
            Ok((output_stem(a, b, offset as usize), asc_bytes(&map), ppm_bytes(&map)))
        })
        .collect::<Result<_, WaveletError>>()?;

    let out_dir = out_dir.as_ref();
    let job_dir = out_dir.join(job.jobname());
    fs::create_dir_all(&job_dir)?;
    let mut entries = Vec::with_capacity(rendered.len() * 2);
    for (stem, asc, ppm) in rendered {
        entries.push((format!("{stem}.asc"), asc));
        entries.push((format!("{stem}.ppm"), ppm));
    }
    for (name, bytes) in &entries {
        fs::write(job_dir.join(name), bytes)?;
    }
    let archive = out_dir.join(format!("output.tar.{}", job.jobname()));
    let mut file = io::BufWriter::new(fs::File::create(&archive)?);
    write_ustar(&mut file, entries.iter().map(|(n, b)| (n.as_str(), b.as_slice())))?;
    file.flush()?;
    Ok(MetaJobOutput {
        archive,
        files: entries.into_iter().map(|(n, _)| n).collect(),
    })
}

const BLOCK: usize = 512;

fn octal(field: &mut [u8], value: u64) {
    let digits = field.len() - 1;
    let s = format!("{value:0digits$o}");
    field[..digits].copy_from_slice(s.as_bytes());
    field[digits] = 0;
}

/// Writes a POSIX ustar archive of regular files with zeroed ownership and
/// timestamps. Names must fit the 100-byte name field.
pub fn write_ustar<'a>(
    out: &mut impl Write,
    files: impl IntoIterator<Item = (&'a str, &'a [u8])>,
) -> io::Result<()> {
    for (name, data) in files {
        if name.len() > 100 {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("tar entry name too long: {name}"),
            ));
        }
        let mut h = [0u8; BLOCK];
        h[..name.len()].copy_from_slice(name.as_bytes());
        octal(&mut h[100..108], 0o644);
        octal(&mut h[108..116], 0);
        octal(&mut h[116..124], 0);
        octal(&mut h[124..136], data.len() as u64);
        octal(&mut h[136..148], 0);
        h[156] = b'0';
        h[257..263].copy_from_slice(b"ustar\0");
        h[263..265].copy_from_slice(b"00");
        // checksum is computed with its own field read as spaces
        h[148..156].copy_from_slice(b"        ");
        let sum: u32 = h.iter().map(|&b| u32::from(b)).sum();
        let s = format!("{sum:06o}\0 ");
        h[148..156].copy_from_slice(s.as_bytes());
        out.write_all(&h)?;
        out.write_all(data)?;
        let pad = (BLOCK - data.len() % BLOCK) % BLOCK;
        out.write_all(&[0u8; BLOCK][..pad])?;
    }
    out.write_all(&[0u8; 2 * BLOCK])
}
