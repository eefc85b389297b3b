//! Corpus generation, synthetic conditioning, sequence I/O, evaluation
//! metrics and linear probing.

pub mod conditioner;
pub mod fasta;
pub mod grammar;
pub mod metrics;
pub mod probe;

use std::io::Write;
use std::path::Path;

use crate::error::Result;

pub use conditioner::{corrupt_draft, SyntheticConditioner};
pub use fasta::{format_fasta, parse_fasta, read_fasta, write_fasta, FastaRecord};
pub use grammar::{GrammarConfig, SyntheticGrammar};
pub use metrics::{evaluate, EvalReport};
pub use probe::{linear_probe, ProbeConfig, ProbeReport};

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut file = std::fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
