//! Layout interchange: JSON records and a minimal `.sqd` XML document.
//!
//! The `.sqd` subset written here contains a program block, a lattice layer
//! declaring the `si(100)2x1` lattice, and one `dbdot` per site with its
//! lattice coordinates `n` (column), `m` (dimer row) and `l` (sub-row).

use std::path::Path;
use std::str::FromStr;

use quick_xml::events::Event;
use quick_xml::Reader;

use crate::env::{LayoutRecord, Provenance};
use crate::error::{Error, Result};
use crate::lattice::{DbLayout, LatticeSite};

pub const SQD_SUBSET_VERSION: &str = "sidb-designer-sqd/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayoutFormat {
    Json,
    Sqd,
}

impl FromStr for LayoutFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(LayoutFormat::Json),
            "sqd" => Ok(LayoutFormat::Sqd),
            other => Err(Error::Format(other.to_string())),
        }
    }
}

impl LayoutFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        path.extension()
            .and_then(|e| e.to_str())
            .ok_or_else(|| Error::Format(path.display().to_string()))?
            .parse()
    }
}

pub fn export_layout(record: &LayoutRecord, format: LayoutFormat) -> Result<Vec<u8>> {
    match format {
        LayoutFormat::Json => {
            let mut v = serde_json::to_vec_pretty(record)?;
            v.push(b'\n');
            Ok(v)
        }
        LayoutFormat::Sqd => Ok(sqd_document(record.sites.sites()).into_bytes()),
    }
}

fn sqd_document(sites: &[LatticeSite]) -> String {
    let mut s = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<siqad>\n");
    s.push_str("  <program>\n    <file_purpose>simulation</file_purpose>\n");
    s.push_str(&format!("    <version>{SQD_SUBSET_VERSION}</version>\n  </program>\n"));
    s.push_str("  <layers>\n");
    s.push_str("    <layer_prop>\n      <name>Lattice</name>\n      <type>Lattice</type>\n      <lattice_type>si(100)2x1</lattice_type>\n    </layer_prop>\n");
    s.push_str("    <layer_prop>\n      <name>Surface</name>\n      <type>DB</type>\n    </layer_prop>\n");
    s.push_str("  </layers>\n  <design>\n    <layer type=\"Lattice\"/>\n    <layer type=\"DB\">\n");
    for site in sites {
        s.push_str(&format!(
            "      <dbdot>\n        <layer_id>1</layer_id>\n        <latcoord n=\"{}\" m=\"{}\" l=\"{}\"/>\n      </dbdot>\n",
            site.col, site.row, site.sub
        ));
    }
    s.push_str("    </layer>\n  </design>\n</siqad>\n");
    s
}

/// Sites of every `dbdot` in an `.sqd` document.
pub fn import_sqd(text: &str) -> Result<DbLayout> {
    let mut reader = Reader::from_str(text);
    let mut sites = Vec::new();
    let mut in_dbdot = false;
    loop {
        match reader.read_event().map_err(|e| Error::Format(format!("sqd: {e}")))? {
            Event::Start(e) if e.name().as_ref() == b"dbdot" => in_dbdot = true,
            Event::End(e) if e.name().as_ref() == b"dbdot" => in_dbdot = false,
            Event::Empty(e) | Event::Start(e) if in_dbdot && e.name().as_ref() == b"latcoord" => {
                let mut coords = [None::<i64>; 3];
                for attr in e.attributes() {
                    let attr = attr.map_err(|e| Error::Format(format!("sqd: {e}")))?;
                    let slot = match attr.key.as_ref() {
                        b"n" => 0,
                        b"m" => 1,
                        b"l" => 2,
                        _ => continue,
                    };
                    let value = attr
                        .unescape_value()
                        .map_err(|e| Error::Format(format!("sqd: {e}")))?;
                    coords[slot] = Some(
                        value
                            .trim()
                            .parse()
                            .map_err(|_| Error::Format(format!("sqd: bad coordinate {value:?}")))?,
                    );
                }
                let [Some(n), Some(m), Some(l)] = coords else {
                    return Err(Error::Format("sqd: latcoord lacks n, m or l".into()));
                };
                let site = LatticeSite::try_from((n as i32, m as i32, l as u8))
                    .ok()
                    .filter(|_| (0..=1).contains(&l))
                    .ok_or_else(|| Error::Format(format!("sqd: invalid site ({n},{m},{l})")))?;
                sites.push(site);
            }
            Event::Eof => break,
            _ => {}
        }
    }
    DbLayout::raw(sites)
}

/// Reads a layout from `.sqd`, a JSON [`LayoutRecord`] or a JSON site list.
pub fn read_layout_file(path: &Path) -> Result<LayoutRecord> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let format = LayoutFormat::from_path(path).unwrap_or(LayoutFormat::Json);
    match format {
        LayoutFormat::Sqd => Ok(LayoutRecord::new(import_sqd(&text)?, Provenance::default(), Vec::new())),
        LayoutFormat::Json => {
            if let Ok(record) = serde_json::from_str::<LayoutRecord>(&text) {
                record.verify_digest()?;
                return Ok(record);
            }
            let sites: DbLayout = serde_json::from_str(&text)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            Ok(LayoutRecord::new(sites, Provenance::default(), Vec::new()))
        }
    }
}
