//! Deterministic ustar archives for outboxes and merged bundles.

use std::io::Read;

#[derive(Debug, thiserror::Error)]
#[error("malformed archive: {0}")]
pub struct ArchiveError(String);

/// Builds a ustar archive from `(name, bytes)` pairs in the given order.
/// Headers carry a zero mtime and fixed mode so identical input yields identical bytes.
pub fn build_ustar<'a, I>(members: I) -> Vec<u8>
where
    I: IntoIterator<Item = (&'a str, &'a [u8])>,
{
    let mut builder = tar::Builder::new(Vec::new());
    for (name, bytes) in members {
        let mut header = tar::Header::new_ustar();
        header.set_size(bytes.len() as u64);
        header.set_mode(0o644);
        header.set_mtime(0);
        header.set_uid(0);
        header.set_gid(0);
        header.set_entry_type(tar::EntryType::Regular);
        // in-memory writes cannot fail; names are validated by callers
        builder
            .append_data(&mut header, name, bytes)
            .expect("append to in-memory archive");
    }
    builder.into_inner().expect("finish in-memory archive")
}

/// Reads every regular member of an archive, in archive order.
pub fn read_members(bytes: &[u8]) -> Result<Vec<(String, Vec<u8>)>, ArchiveError> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(512) {
        return Err(ArchiveError(format!(
            "length {} is not a positive multiple of 512",
            bytes.len()
        )));
    }
    let mut archive = tar::Archive::new(bytes);
    let entries = archive.entries().map_err(|e| ArchiveError(e.to_string()))?;
    let mut out = Vec::new();
    for entry in entries {
        let mut entry = entry.map_err(|e| ArchiveError(e.to_string()))?;
        if entry.header().entry_type() != tar::EntryType::Regular {
            continue;
        }
        let name = entry
            .path()
            .map_err(|e| ArchiveError(e.to_string()))?
            .to_string_lossy()
            .into_owned();
        let mut data = Vec::new();
        entry
            .read_to_end(&mut data)
            .map_err(|e| ArchiveError(e.to_string()))?;
        out.push((name, data));
    }
    Ok(out)
}
