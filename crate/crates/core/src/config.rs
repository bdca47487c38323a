//! Flat `key = value` text files with `#` comments.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed key/value pairs, remembering the line each key came from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvFile {
    entries: BTreeMap<String, (String, usize)>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::ConfigParse { line: i + 1, message: format!("expected `key = value`, got `{line}`") });
            };
            let key = key.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(Error::ConfigParse { line: i + 1, message: format!("invalid key `{key}`") });
            }
            if entries.insert(key.to_string(), (value.trim().to_string(), i + 1)).is_some() {
                return Err(Error::ConfigParse { line: i + 1, message: format!("duplicate key `{key}`") });
            }
        }
        Ok(Self { entries })
    }

    pub fn reader(&self) -> KvReader<'_> {
        KvReader { file: self, used: Vec::new() }
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }
}

/// Typed access that remembers which keys were read, so leftovers can be reported.
pub struct KvReader<'a> {
    file: &'a KvFile,
    used: Vec<String>,
}

impl KvReader<'_> {
    pub fn raw(&mut self, key: &str) -> Option<&str> {
        self.used.push(key.to_string());
        self.file.get(key)
    }

    pub fn parse_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e: T::Err| Error::InvalidValue { key: key.into(), message: format!("`{v}`: {e}") }),
        }
    }

    pub fn with_or<T>(&mut self, key: &str, default: T, f: impl FnOnce(&str) -> Result<T>) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => f(v),
        }
    }

    /// Fails on the first key that was never read.
    pub fn finish(self) -> Result<()> {
        match self.file.keys().find(|k| !self.used.contains(k)) {
            Some(k) => Err(Error::UnknownKey(k.clone())),
            None => Ok(()),
        }
    }
}

/// Comma-separated list, empty string meaning an empty list.
pub fn parse_list<T: FromStr>(key: &str, text: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e: T::Err| Error::InvalidValue { key: key.into(), message: format!("`{s}`: {e}") }))
        .collect()
}

pub fn join_list<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}
