use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// Renders a number with nine significant digits.
pub fn fmt_num(v: f64) -> String {
    format!("{v:.8e}")
}

/// Flat `key=value` report, kept in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    entries: Vec<(String, String)>,
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_raw(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn num(&mut self, key: &str, v: f64) -> &mut Self {
        self.set_raw(key, fmt_num(v));
        self
    }

    pub fn int(&mut self, key: &str, v: impl Into<u128>) -> &mut Self {
        self.set_raw(key, v.into().to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key)?.parse().ok()
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        let i = self.entries.iter().position(|(k, _)| k == key)?;
        Some(self.entries.remove(i).1)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut r = Self::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("report line without `=`: {line:?}")))?;
            r.set_raw(k, v);
        }
        Ok(r)
    }

    /// Replaces any existing file.
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_format() {
        let mut r = Report::new();
        r.num("rmse", 0.0123456789123).int("count", 3u32).num("rmse", 2.0);
        let text = r.to_string();
        assert_eq!(text, "rmse=2.00000000e0\ncount=3\n");
        let back = Report::parse(&text).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.get_f64("rmse"), Some(2.0));
        assert_eq!(fmt_num(0.0123456789123), "1.23456789e-2");
        assert!(Report::parse("novalue").is_err());
    }
}
