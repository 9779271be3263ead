//! Line-oriented `key = value` text files.
//!
//! Blank lines and everything after `#` are ignored. Keys may repeat; callers
//! decide whether repetition is legal.

use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KvError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: invalid value for `{key}`: {message}")]
    InvalidValue { line: usize, key: String, message: String },
    #[error("line {line}: key `{key}` given more than once")]
    Duplicate { line: usize, key: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvEntry {
    pub key: String,
    pub value: String,
    /// 1-based source line.
    pub line: usize,
}

impl KvEntry {
    pub fn invalid(&self, message: impl Into<String>) -> KvError {
        KvError::InvalidValue {
            line: self.line,
            key: self.key.clone(),
            message: message.into(),
        }
    }

    pub fn parse<T: std::str::FromStr>(&self) -> Result<T, KvError>
    where
        T::Err: std::fmt::Display,
    {
        self.value.trim().parse::<T>().map_err(|e| self.invalid(e.to_string()))
    }

    pub fn parse_bool(&self) -> Result<bool, KvError> {
        match self.value.trim() {
            "true" | "yes" | "1" | "on" => Ok(true),
            "false" | "no" | "0" | "off" => Ok(false),
            other => Err(self.invalid(format!("expected a boolean, got `{other}`"))),
        }
    }

    /// Whitespace separated list of exactly `n` floats.
    pub fn parse_floats(&self, n: usize) -> Result<Vec<f64>, KvError> {
        let values = self
            .value
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|e| self.invalid(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        if values.len() != n {
            return Err(self.invalid(format!("expected {n} numbers, got {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(self.invalid("values must be finite"));
        }
        Ok(values)
    }
}

pub fn parse_kv(text: &str) -> Result<Vec<KvEntry>, KvError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or(KvError::Syntax { line })?;
        let key = key.trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(KvError::Syntax { line });
        }
        out.push(KvEntry {
            key: key.to_string(),
            value: value.trim().to_string(),
            line,
        });
    }
    Ok(out)
}

pub fn format_kv<'a>(entries: impl IntoIterator<Item = (&'a str, String)>) -> String {
    let mut s = String::new();
    for (k, v) in entries {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}
