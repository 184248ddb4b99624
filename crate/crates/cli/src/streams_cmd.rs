//! `streams gen`.

use std::path::Path;

use dpcore::streams::{generate, stream_diagnostics, StreamDiagnostics, StreamSpec};

use crate::error::CliResult;
use crate::files::{read_json, write_all_atomic};

pub fn cmd_streams_gen(spec: &Path, out: &Path) -> CliResult<StreamDiagnostics> {
    let spec: StreamSpec = read_json(spec)?;
    spec.validate()?;
    let stream = generate(&spec)?;
    write_all_atomic(&[(out.to_path_buf(), stream.to_csv())])?;
    Ok(stream_diagnostics(&stream))
}
