//! Output helpers: reproducibility header, CSV writing and quantiles.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::Context;

/// FNV-1a 64-bit hash of the raw config bytes, for output headers.
pub fn config_hash(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub struct CsvWriter {
    buffer: String,
}

impl CsvWriter {
    pub fn new(hash: u64, seed: u64, columns: &[String]) -> Self {
        let mut buffer = String::new();
        let _ = writeln!(buffer, "# config_hash={hash:016x} seed={seed}");
        let _ = writeln!(buffer, "{}", columns.join(","));
        Self { buffer }
    }

    pub fn row(&mut self, values: &[f64]) {
        for (i, v) in values.iter().enumerate() {
            if i > 0 {
                self.buffer.push(',');
            }
            let _ = write!(self.buffer, "{v}");
        }
        self.buffer.push('\n');
    }

    pub fn row_with_index(&mut self, index: usize, values: &[f64]) {
        let _ = write!(self.buffer, "{index}");
        for v in values {
            let _ = write!(self.buffer, ",{v}");
        }
        self.buffer.push('\n');
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.buffer.as_bytes())
            .with_context(|| format!("cannot write {}", path.display()))
    }
}

/// Linear-interpolated percentile of an unsorted sample, `p` in [0, 100].
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = (p / 100.0) * (n as f64 - 1.0);
    let lower = rank.floor() as usize;
    let upper = rank.ceil() as usize;
    if lower == upper {
        sorted[lower]
    } else {
        let w = rank - lower as f64;
        sorted[lower] * (1.0 - w) + sorted[upper] * w
    }
}

/// Column names with per-asset suffixes: `name_1 .. name_dim`.
pub fn asset_columns(name: &str, dim: usize) -> Vec<String> {
    (1..=dim).map(|i| format!("{name}_{i}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_input_sensitive() {
        let a = config_hash(b"abc");
        assert_eq!(a, config_hash(b"abc"));
        assert_ne!(a, config_hash(b"abd"));
    }

    #[test]
    fn percentile_interpolates() {
        let values = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(percentile(&values, 0.0), 1.0);
        assert_eq!(percentile(&values, 100.0), 4.0);
        assert_eq!(percentile(&values, 50.0), 2.5);
    }
}
