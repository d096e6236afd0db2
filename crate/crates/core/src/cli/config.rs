use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::precision::Precision;
use crate::transport::{Backend, CostModel};

/// The versioned default cost parameters for the simulated backend.
pub const DEFAULT_COST: &str = include_str!("../../config/cost-v1.conf");
pub const COST_VERSION: u32 = 1;

const DEFAULTS: &[(&str, &str)] = &[
    ("workers", "4"),
    ("sizes", "256,512"),
    ("seed", "1"),
    ("deterministic", "true"),
    ("backend", "inprocess"),
    ("chunk-size", "1048576"),
    ("memory-limit", "0"),
    ("steps", "100"),
    ("batch", "64"),
    ("learning-rate", "0.5"),
    ("hidden", "32"),
    ("samples", "2048"),
    ("features", "16"),
    ("classes", "4"),
    ("precision", "single"),
    ("dataset", ""),
    ("max-workers", "64"),
    ("gemm-size", "4096"),
];

/// Parses `key=value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn cost_defaults() -> Result<Vec<(String, String)>> {
    let mut pairs = parse_pairs(DEFAULT_COST)?;
    let version = pairs.iter().position(|(k, _)| k == "version").ok_or_else(|| Error::Config("cost file lacks a version".into()))?;
    let (_, v) = pairs.remove(version);
    if v.parse::<u32>().ok() != Some(COST_VERSION) {
        return Err(Error::Config(format!("cost file version {v}, expected {COST_VERSION}")));
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    /// Built-in defaults, then the cost file, then GRIDMATH_WORKERS.
    pub fn defaults() -> Result<Config> {
        let mut values: BTreeMap<String, String> = DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        values.extend(cost_defaults()?);
        if let Ok(w) = std::env::var("GRIDMATH_WORKERS") {
            values.insert("workers".into(), w);
        }
        let c = Config { values };
        c.check()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Config> {
        let mut c = Config::defaults()?;
        c.apply_text(&fs::read_to_string(path)?)?;
        Ok(c)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_pairs(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.values.contains_key(key) {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        let old = self.values.insert(key.to_string(), value.to_string());
        if let Err(e) = self.check() {
            self.values.insert(key.to_string(), old.unwrap());
            return Err(e);
        }
        Ok(())
    }

    fn check(&self) -> Result<()> {
        self.workers_list()?;
        self.sizes()?;
        self.hidden()?;
        for k in ["seed", "chunk-size", "memory-limit", "steps", "batch", "samples", "features", "classes", "max-workers", "gemm-size"] {
            self.uint(k)?;
        }
        for k in ["alpha", "beta", "rate", "learning-rate"] {
            self.float(k)?;
        }
        self.flag("deterministic")?;
        self.backend()?;
        self.precision()?;
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn uint(&self, key: &str) -> Result<u64> {
        self.get(key).parse().map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got {:?}", self.get(key))))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        Ok(self.uint(key)? as usize)
    }

    pub fn float(&self, key: &str) -> Result<f64> {
        self.get(key)
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::Config(format!("{key}: expected a number, got {:?}", self.get(key))))
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
        }
    }

    fn list(&self, key: &str) -> Result<Vec<usize>> {
        let v = self.get(key);
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',').map(|s| s.trim().parse().map_err(|_| Error::Config(format!("{key}: bad list entry {s:?}")))).collect()
    }

    pub fn workers_list(&self) -> Result<Vec<usize>> {
        let w = self.list("workers")?;
        if w.is_empty() || w.contains(&0) {
            return Err(Error::Config("workers must be positive".into()));
        }
        Ok(w)
    }

    /// The single worker count for commands that run one session.
    pub fn workers(&self) -> Result<usize> {
        match self.workers_list()?.as_slice() {
            [w] => Ok(*w),
            _ => Err(Error::Config("this command takes a single worker count".into())),
        }
    }

    pub fn sizes(&self) -> Result<Vec<usize>> {
        self.list("sizes")
    }

    pub fn hidden(&self) -> Result<Vec<usize>> {
        let h = self.list("hidden")?;
        if h.contains(&0) {
            return Err(Error::Config("hidden sizes must be positive".into()));
        }
        Ok(h)
    }

    pub fn precision(&self) -> Result<Precision> {
        Precision::parse(self.get("precision"))
    }

    pub fn cost(&self) -> Result<CostModel> {
        CostModel::new(self.float("alpha")?, self.float("beta")?, self.float("rate")?)
    }

    pub fn backend(&self) -> Result<Backend> {
        match self.get("backend") {
            "inprocess" => Ok(Backend::InProcess),
            "simulated" => Ok(Backend::Simulated(self.cost()?)),
            b => Err(Error::Config(format!("backend: expected inprocess or simulated, got {b:?}"))),
        }
    }

    /// Canonical `key=value` text, sorted by key.
    pub fn canonical(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// CRC32 of the canonical text, as eight hex digits.
    pub fn hash(&self) -> String {
        format!("{:08x}", crc32fast::hash(self.canonical().as_bytes()))
    }
}
