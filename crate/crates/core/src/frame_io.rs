//! Line-delimited JSON frame files and atomic file output.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::sim::{Frame, FRAME_SCHEMA};

/// Writes `bytes` to a sibling temp file, syncs it, then renames it over
/// `path`, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp.{}", std::process::id()));
    let result = (|| -> Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result
}

/// One JSON document per frame, newline-terminated.
pub fn frames_to_jsonl(frames: &[Frame]) -> Result<String> {
    let mut out = String::new();
    for f in frames {
        out.push_str(&serde_json::to_string(f)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_frames(text: &str) -> Result<Vec<Frame>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let frame: Frame = serde_json::from_str(line).map_err(|e| Error::FrameFile {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if frame.schema != FRAME_SCHEMA {
            return Err(Error::FrameFile {
                line: i + 1,
                reason: format!("unsupported schema `{}`, expected `{FRAME_SCHEMA}`", frame.schema),
            });
        }
        out.push(frame);
    }
    Ok(out)
}

pub fn write_frames(path: &Path, frames: &[Frame]) -> Result<()> {
    write_atomic(path, frames_to_jsonl(frames)?.as_bytes())
}

pub fn read_frames(path: &Path) -> Result<Vec<Frame>> {
    parse_frames(&std::fs::read_to_string(path)?)
}
