//! Line-delimited JSON triplet annotations (`{"ref":..,"text":..,"target":..,"subset":[..]}`).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Triplet, SUBSET_SIZE};
use crate::error::{Result, SsnError};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    #[serde(rename = "ref")]
    reference: u64,
    text: u64,
    target: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subset: Option<Vec<u64>>,
}

pub fn parse_annotations(text: &str) -> Result<Vec<Triplet>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let l: Line = serde_json::from_str(line)
            .map_err(|e| SsnError::Data(format!("annotation line {}: {e}", n + 1)))?;
        let subset_ids = match l.subset {
            None => None,
            Some(ids) => Some(<[u64; SUBSET_SIZE]>::try_from(ids.as_slice()).map_err(|_| {
                SsnError::Data(format!(
                    "annotation line {}: subset needs {SUBSET_SIZE} ids, got {}",
                    n + 1,
                    ids.len()
                ))
            })?),
        };
        out.push(Triplet {
            reference_id: l.reference,
            text_id: l.text,
            target_id: l.target,
            subset_ids,
        });
    }
    Ok(out)
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<Triplet>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| SsnError::io(path, e))?;
    parse_annotations(&text)
}

pub fn write_annotations(triplets: &[Triplet], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for t in triplets {
        let line = Line {
            reference: t.reference_id,
            text: t.text_id,
            target: t.target_id,
            subset: t.subset_ids.map(|s| s.to_vec()),
        };
        serde_json::to_writer(&mut buf, &line).expect("serializing plain integers");
        buf.write_all(b"\n").expect("writing to a Vec");
    }
    std::fs::write(path, buf).map_err(|e| SsnError::io(path, e))
}
