//! Market directory: providers publish priced services, brokers query and
//! take snapshots.
//!
//! A file-backed [`Registry`] persists as JSON lines, one [`ServiceEntry`]
//! per line, appended on every publish. On load, later lines supersede
//! earlier ones for the same `(resource_host, service_name)`.

use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MEG_SERVICE: &str = "meg-analysis";

/// Milliseconds on whatever clock the caller uses (wall or simulated).
pub type Timestamp = u64;

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("price must be a non-negative finite number, got {0}")]
    InvalidPrice(f64),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PricingModel {
    /// G$ per CPU-second consumed.
    #[serde(rename = "CPU_SEC")]
    CpuSec,
    /// Fixed G$ per job (application operation).
    #[serde(rename = "AO")]
    Ao,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceEntry {
    pub provider_id: String,
    pub resource_host: String,
    pub pricing_model: PricingModel,
    pub price: f64,
    pub service_name: String,
    #[serde(default)]
    pub published_at: Timestamp,
}

impl ServiceEntry {
    pub fn validate(&self) -> Result<(), MarketError> {
        if !(self.price.is_finite() && self.price >= 0.0) {
            return Err(MarketError::InvalidPrice(self.price));
        }
        Ok(())
    }

    fn same_slot(&self, other: &ServiceEntry) -> bool {
        self.resource_host == other.resource_host && self.service_name == other.service_name
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueryFilter {
    pub service_name: Option<String>,
    pub max_price: Option<f64>,
}

impl QueryFilter {
    pub fn service(name: &str) -> Self {
        Self {
            service_name: Some(name.to_string()),
            max_price: None,
        }
    }

    pub fn max_price(mut self, price: f64) -> Self {
        self.max_price = Some(price);
        self
    }

    fn matches(&self, e: &ServiceEntry) -> bool {
        self.service_name.as_ref().is_none_or(|s| *s == e.service_name)
            && self.max_price.is_none_or(|p| e.price <= p)
    }
}

fn sort_entries(entries: &mut [ServiceEntry]) {
    entries.sort_by(|a, b| {
        a.price
            .total_cmp(&b.price)
            .then_with(|| a.resource_host.cmp(&b.resource_host))
            .then_with(|| a.service_name.cmp(&b.service_name))
    });
}

/// Immutable view of the directory at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrySnapshot {
    pub entries: Vec<ServiceEntry>,
    pub taken_at: Timestamp,
}

impl RegistrySnapshot {
    pub fn lookup(&self, host: &str, service: &str) -> Option<&ServiceEntry> {
        self.entries
            .iter()
            .find(|e| e.resource_host == host && e.service_name == service)
    }
}

#[derive(Debug, Default)]
pub struct Registry {
    entries: Vec<ServiceEntry>,
    clock: Timestamp,
    path: Option<PathBuf>,
}

impl Registry {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or starts) a JSON-lines registry file.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, MarketError> {
        let path = path.as_ref().to_path_buf();
        let mut reg = Self::default();
        if path.exists() {
            let reader = BufReader::new(fs::File::open(&path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: ServiceEntry = serde_json::from_str(&line)
                    .map_err(|source| MarketError::Parse { line: i + 1, source })?;
                reg.insert(entry)?;
            }
        }
        reg.path = Some(path);
        Ok(reg)
    }

    fn insert(&mut self, entry: ServiceEntry) -> Result<(), MarketError> {
        entry.validate()?;
        self.clock = self.clock.max(entry.published_at);
        match self.entries.iter_mut().find(|e| e.same_slot(&entry)) {
            Some(slot) => *slot = entry,
            None => self.entries.push(entry),
        }
        Ok(())
    }

    /// Adds or supersedes the entry for its `(host, service)` slot.
    pub fn publish(&mut self, entry: ServiceEntry) -> Result<(), MarketError> {
        entry.validate()?;
        if let Some(path) = &self.path {
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(f, "{}", serde_json::to_string(&entry)?)?;
        }
        self.insert(entry)
    }

    /// Matching entries, ascending by price then host.
    pub fn query(&self, filter: &QueryFilter) -> Vec<ServiceEntry> {
        let mut out: Vec<ServiceEntry> = self
            .entries
            .iter()
            .filter(|e| filter.matches(e))
            .cloned()
            .collect();
        sort_entries(&mut out);
        out
    }

    pub fn last_published(&self) -> Timestamp {
        self.entries.iter().map(|e| e.published_at).max().unwrap_or(0)
    }

    /// Snapshot stamped no earlier than `now` and strictly after every
    /// previous snapshot of this registry.
    pub fn snapshot_at(&mut self, now: Timestamp) -> RegistrySnapshot {
        let taken_at = now.max(self.clock + 1);
        self.clock = taken_at;
        RegistrySnapshot {
            entries: self.query(&QueryFilter::default()),
            taken_at,
        }
    }

    pub fn snapshot(&mut self) -> RegistrySnapshot {
        self.snapshot_at(0)
    }

    pub fn refresh(&mut self, previous: &RegistrySnapshot) -> RegistrySnapshot {
        self.clock = self.clock.max(previous.taken_at);
        self.snapshot()
    }

    pub fn refresh_at(&mut self, previous: &RegistrySnapshot, now: Timestamp) -> RegistrySnapshot {
        self.clock = self.clock.max(previous.taken_at);
        self.snapshot_at(now)
    }
}

/// Reads entries from a JSON-lines file or a JSON array.
pub fn read_entries(path: impl AsRef<Path>) -> Result<Vec<ServiceEntry>, MarketError> {
    let text = fs::read_to_string(path)?;
    if text.trim_start().starts_with('[') {
        return Ok(serde_json::from_str(&text)?);
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| MarketError::Parse { line: i + 1, source })
        })
        .collect()
}
