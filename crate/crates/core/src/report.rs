//! CSV output with a leading comment that records how the file was made.

use std::io::Write;

use serde::Serialize;

use crate::error::Result;

/// Writes `# <invocation>`, a header row and one row per record.
pub fn write_csv<W: Write, T: Serialize>(mut out: W, invocation: &str, rows: &[T]) -> Result<()> {
    writeln!(out, "# {}", invocation.replace('\n', " "))?;
    let mut writer = csv::Writer::from_writer(out);
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}
