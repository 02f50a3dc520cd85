//! File formats, visualizations, and the command-line surface around the
//! registration core: a simple binary field container, a checksummed
//! weights checkpoint, PGM/PPM images, and CSV reports.

pub mod cli;
pub mod csvio;
pub mod error;
pub mod field;
pub mod pgm;
pub mod viz;
pub mod weights;

pub use error::{CliError, ExitCode};

use std::fs;
use std::io::Write as _;
use std::path::Path;

/// Writes a file atomically: the payload lands in a sibling temp file
/// which is renamed over the destination only after a successful write.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or(""),
        std::process::id()
    ));
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    match fs::rename(&tmp, path) {
        Ok(()) => Ok(()),
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}
