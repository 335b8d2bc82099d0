//! Two-line text form of the per-channel training statistics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use qgjet_core::preprocess::ChannelStats;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsFileError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("stats file line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// `mu: m0 m1 m2` / `sigma: s0 s1 s2`, each value in shortest round-trip form.
pub fn format_stats(stats: &ChannelStats) -> String {
    let mut out = String::new();
    for (key, vals) in [("mu", &stats.mu), ("sigma", &stats.sigma)] {
        write!(out, "{key}:").unwrap();
        for v in vals {
            write!(out, " {v:?}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Inverse of [`format_stats`]; the pixel count is not stored and reads as 0.
pub fn parse_stats(text: &str) -> Result<ChannelStats, StatsFileError> {
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() != 2 {
        return Err(StatsFileError::Parse { line: lines.len().min(2) + 1, reason: format!("expected 2 lines, found {}", lines.len()) });
    }
    let mut parsed = [[0.0; 3]; 2];
    for (i, (key, line)) in ["mu", "sigma"].iter().zip(&lines).enumerate() {
        let err = |reason: String| StatsFileError::Parse { line: i + 1, reason };
        let rest = line.trim().strip_prefix(key).and_then(|r| r.strip_prefix(':')).ok_or_else(|| err(format!("expected `{key}:`")))?;
        let vals: Vec<&str> = rest.split_whitespace().collect();
        if vals.len() != 3 {
            return Err(err(format!("expected 3 values, found {}", vals.len())));
        }
        for (slot, v) in parsed[i].iter_mut().zip(vals) {
            *slot = v.parse().map_err(|_| err(format!("`{v}` is not a number")))?;
        }
    }
    Ok(ChannelStats { mu: parsed[0], sigma: parsed[1], n_pixels: 0 })
}

pub fn write_stats(path: &Path, stats: &ChannelStats) -> Result<(), StatsFileError> {
    Ok(fs::write(path, format_stats(stats))?)
}

pub fn read_stats(path: &Path) -> Result<ChannelStats, StatsFileError> {
    parse_stats(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_exact_round_trip() {
        let s = ChannelStats { mu: [0.1, 1e-300, -2.5], sigma: [1.0 / 3.0, 5e-324, 7.0], n_pixels: 9 };
        let text = format_stats(&s);
        assert!(text.starts_with("mu: 0.1 1e-300 -2.5\nsigma: 0.3333333333333333 5e-324 7.0\n"), "{text}");
        let back = parse_stats(&text).unwrap();
        for i in 0..3 {
            assert_eq!(back.mu[i].to_bits(), s.mu[i].to_bits());
            assert_eq!(back.sigma[i].to_bits(), s.sigma[i].to_bits());
        }
    }

    #[test]
    fn malformed_files_name_the_line() {
        assert!(matches!(parse_stats("mu: 1 2 3\n"), Err(StatsFileError::Parse { .. })));
        assert!(matches!(parse_stats("mu: 1 2\nsigma: 1 2 3"), Err(StatsFileError::Parse { line: 1, .. })));
        assert!(matches!(parse_stats("mu: 1 2 3\nsigma: 1 x 3"), Err(StatsFileError::Parse { line: 2, .. })));
        assert!(matches!(parse_stats("sigma: 1 2 3\nmu: 1 2 3"), Err(StatsFileError::Parse { line: 1, .. })));
    }
}
