//! Line-delimited JSON persistence for sample sets.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::data::Sample;
use crate::{Error, Result};

/// Writes one JSON record per line: `{domain_id, local_label, merged_label,
/// features[]}`.
pub fn write_samples_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_samples_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let reader = BufReader::new(
        File::open(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?,
    );
    let mut samples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| {
            Error::Config(format!("{}:{}: malformed sample record: {e}", path.display(), lineno + 1))
        })?;
        samples.push(sample);
    }
    Ok(samples)
}
