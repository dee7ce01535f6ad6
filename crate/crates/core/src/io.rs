//! Output formatting and atomic file writes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::measures::{Atom, ParticleCloud};

/// Fixed 17-significant-digit scientific format, stable across runs.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Write `contents` to `path` via a temporary file in the same directory
/// followed by a rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents.as_bytes())?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Simple CSV builder: header row plus rows, always newline-terminated.
#[derive(Debug, Clone)]
pub struct CsvTable {
    buf: String,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        let mut buf = header.join(",");
        buf.push('\n');
        Self { buf }
    }

    pub fn row<I, S>(&mut self, fields: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut first = true;
        for f in fields {
            if !first {
                self.buf.push(',');
            }
            self.buf.push_str(f.as_ref());
            first = false;
        }
        self.buf.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.buf
    }

    pub fn into_string(self) -> String {
        self.buf
    }
}

pub fn cloud_to_csv(cloud: &ParticleCloud) -> String {
    let mut t = CsvTable::new(&["x", "v", "mass"]);
    for a in cloud.atoms() {
        t.row([fmt_f64(a.x), fmt_f64(a.v), fmt_f64(a.mass)]);
    }
    t.into_string()
}

/// Parse a cloud snapshot (`x,v,mass` header, one atom per line).
pub fn cloud_from_csv_str(text: &str, origin: &str) -> Result<ParticleCloud> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            path: origin.to_string(),
            reason: e.to_string(),
        })?
        .clone();
    let expected = ["x", "v", "mass"];
    if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::Parse {
            path: origin.to_string(),
            reason: format!(
                "expected header `x,v,mass`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut atoms = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            path: format!("{origin}:{line}"),
            reason: e.to_string(),
        })?;
        let mut vals = [0.0; 3];
        for (k, slot) in vals.iter_mut().enumerate() {
            let field = rec.get(k).unwrap_or("");
            *slot = field.parse::<f64>().map_err(|e| Error::Parse {
                path: format!("{origin}:{line}"),
                reason: format!("column {}: {e}", expected[k]),
            })?;
        }
        atoms.push(Atom::new(vals[0], vals[1], vals[2]));
    }
    ParticleCloud::new(atoms).map_err(|e| Error::Parse {
        path: origin.to_string(),
        reason: e.to_string(),
    })
}

pub fn read_cloud_csv(path: &Path) -> Result<ParticleCloud> {
    let text = fs::read_to_string(path)?;
    cloud_from_csv_str(&text, &path.display().to_string())
}
