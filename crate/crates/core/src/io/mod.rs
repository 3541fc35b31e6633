//! File formats: canonical JSON, the `CMG1` motion container and the shared
//! magic + JSON header + little-endian payload layout.

pub mod json;
pub mod motion_file;

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Serializes `magic | u32 LE header length | header | payload`.
pub(crate) fn encode_container(magic: &[u8; 4], header: &str, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(payload);
    out
}

/// Splits a container into its JSON header text and raw payload.
pub(crate) fn decode_container<'a>(magic: &[u8; 4], bytes: &'a [u8]) -> Result<(&'a str, &'a [u8])> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        let found = &bytes[..bytes.len().min(4)];
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    if bytes.len() < 8 {
        return Err(Error::Format("file ends inside the header length".into()));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("four bytes")) as usize;
    let end = 8usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format(format!("header of {len} bytes runs past the end of the file")))?;
    let header = std::str::from_utf8(&bytes[8..end]).map_err(|e| Error::Format(format!("header is not UTF-8: {e}")))?;
    Ok((header, &bytes[end..]))
}

pub(crate) fn f32_payload(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn f32_values(payload: &[u8]) -> Vec<f32> {
    payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
        .collect()
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|s| s.to_str()).unwrap_or("out")
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
