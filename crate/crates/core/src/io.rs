//! File output helpers.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::Result;

/// Writes `bytes` to a sibling temp file, syncs it and renames it over
/// `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Prefixes a CSV body with its provenance line.
pub fn with_provenance(config_hash: &str, seeds: &[u64], body: &str) -> String {
    let seeds: Vec<String> = seeds.iter().map(u64::to_string).collect();
    format!("# config_hash={config_hash} seed={}\n{body}", seeds.join(","))
}
