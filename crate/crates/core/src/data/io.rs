use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::FrameSequence;
use crate::error::{Error, Result};

fn parse_err(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

/// Fields of a frame-file header line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameHeader {
    pub channels: usize,
    pub frame_rate: f64,
    pub label: usize,
    pub subject: Option<u32>,
}

/// Parses the header `C=<int> rate=<float> label=<int> [subject=<int>]`.
pub fn parse_frame_header(path: &Path, line_no: usize, text: &str) -> Result<FrameHeader> {
    let (mut c, mut rate, mut label, mut subject) = (None, None, None, None);
    for field in text.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| parse_err(path, line_no, format!("header field `{field}` is not key=value")))?;
        let bad = |what: &str| parse_err(path, line_no, format!("header `{key}` is not {what}: `{value}`"));
        match key {
            "C" => c = Some(value.parse::<usize>().map_err(|_| bad("an integer"))?),
            "rate" => rate = Some(value.parse::<f64>().map_err(|_| bad("a number"))?),
            "label" => label = Some(value.parse::<usize>().map_err(|_| bad("a non-negative integer"))?),
            "subject" => subject = Some(value.parse::<u32>().map_err(|_| bad("a non-negative integer"))?),
            _ => return Err(parse_err(path, line_no, format!("unknown header field `{key}`"))),
        }
    }
    let channels = c.ok_or_else(|| parse_err(path, line_no, "header lacks C"))?;
    if channels == 0 {
        return Err(parse_err(path, line_no, "C must be at least 1"));
    }
    let frame_rate = rate.ok_or_else(|| parse_err(path, line_no, "header lacks rate"))?;
    if !(frame_rate > 0.0 && frame_rate.is_finite()) {
        return Err(parse_err(path, line_no, "rate must be positive"));
    }
    let label = label.ok_or_else(|| parse_err(path, line_no, "header lacks label"))?;
    Ok(FrameHeader {
        channels,
        frame_rate,
        label,
        subject,
    })
}

/// Parses one frame line `index m v...` into its index and point-major values.
pub fn parse_frame_line(path: &Path, line_no: usize, text: &str, channels: usize) -> Result<(usize, Vec<f64>)> {
    let mut tok = text.split_whitespace();
    let mut int = |what: &str| -> Result<usize> {
        tok.next()
            .ok_or_else(|| parse_err(path, line_no, format!("missing {what}")))?
            .parse::<usize>()
            .map_err(|_| parse_err(path, line_no, format!("{what} is not a non-negative integer")))
    };
    let index = int("frame index")?;
    let m = int("point count")?;
    let values: Vec<f64> = tok
        .map(|t| t.parse::<f64>().map_err(|_| parse_err(path, line_no, format!("`{t}` is not a number"))))
        .collect::<Result<_>>()?;
    if values.len() != m * channels {
        return Err(parse_err(
            path,
            line_no,
            format!("expected {m} points x {channels} channels = {} values, found {}", m * channels, values.len()),
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(parse_err(path, line_no, "non-finite coordinate"));
    }
    Ok((index, values))
}

/// Parses one sequence in the frame-file text format. `path` is used for
/// error messages only.
pub fn parse_frame_text(path: &Path, text: &str) -> Result<FrameSequence> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (i, header) = lines.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let h = parse_frame_header(path, i + 1, header)?;
    let mut frames = Vec::new();
    let mut last_index: Option<usize> = None;
    for (i, line) in lines {
        let (index, values) = parse_frame_line(path, i + 1, line, h.channels)?;
        if last_index.is_some_and(|l| index <= l) {
            return Err(parse_err(path, i + 1, format!("frame index {index} is not increasing")));
        }
        last_index = Some(index);
        frames.push(values);
    }
    if frames.is_empty() {
        return Err(parse_err(path, 1, "sequence has no frames"));
    }
    Ok(FrameSequence {
        channels: h.channels,
        frame_rate: h.frame_rate,
        label: h.label,
        subject: h.subject,
        frames,
    })
}

pub fn read_frame_file(path: &Path) -> Result<FrameSequence> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_frame_text(path, &text)
}

pub fn format_frame_text(seq: &FrameSequence) -> String {
    let mut s = format!("C={} rate={} label={}", seq.channels, seq.frame_rate, seq.label);
    if let Some(subject) = seq.subject {
        let _ = write!(s, " subject={subject}");
    }
    s.push('\n');
    for (i, f) in seq.frames.iter().enumerate() {
        let _ = write!(s, "{i} {}", f.len() / seq.channels);
        for v in f {
            let _ = write!(s, " {v}");
        }
        s.push('\n');
    }
    s
}

pub fn write_frame_file(path: &Path, seq: &FrameSequence) -> Result<()> {
    fs::write(path, format_frame_text(seq)).map_err(|e| Error::io(path, e))
}

/// Reads a list of frame-file paths, one per line. Blank lines and lines
/// starting with `#` are skipped; relative paths resolve against the
/// manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let p = Path::new(l);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        })
        .collect())
}

/// Loads every sequence named by a manifest, in order.
pub fn load_manifest(path: &Path) -> Result<Vec<FrameSequence>> {
    let files = read_manifest(path)?;
    if files.is_empty() {
        return Err(parse_err(path, 1, "manifest lists no files"));
    }
    files.iter().map(|f| read_frame_file(f)).collect()
}
