//! Provenance headers for line-oriented artifact files.
//!
//! Every text artifact starts with zero or more `# key=value` lines. Readers
//! skip them; [`read_header`] collects them so downstream stages can check
//! which configuration produced a file.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ArtifactHeader {
    fields: BTreeMap<String, String>,
}

impl ArtifactHeader {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.fields.insert(key.to_string(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.get(key).map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for (k, v) in &self.fields {
            writeln!(w, "# {k}={v}")?;
        }
        Ok(())
    }

    /// Parses one comment line; returns false when the line is not a header line.
    pub(crate) fn absorb(&mut self, line: &str) -> bool {
        let Some(rest) = line.strip_prefix('#') else {
            return false;
        };
        if let Some((k, v)) = rest.trim().split_once('=') {
            self.fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        true
    }
}

/// Reads the leading `#` lines of an artifact file.
pub fn read_header(path: &Path) -> Result<ArtifactHeader> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = ArtifactHeader::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !header.absorb(&line) {
            break;
        }
    }
    Ok(header)
}
