//! Versioned, line-oriented text formats.
//!
//! Every file starts with a `MAGIC v<major>` header. Blank lines and
//! anything after `#` are ignored; fields are whitespace separated. Floats
//! are written with 17 significant digits so that reading a file back gives
//! the same bits.

mod assets;
mod config;
mod mapfile;
mod results;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

pub use assets::{
    assemble_map, build_map, format_camera, format_classes, format_depth, format_descriptors, format_global,
    format_keypoints, format_labels, load_bundle, load_image_assets, load_query, parse_camera, parse_classes,
    parse_depth, parse_descriptors, parse_global, parse_keypoints, parse_labels, write_image_assets, AssetBundle,
    Manifest, SfmImage, SfmModel,
};
pub use config::{format_pipeline_config, parse_pipeline_config, KeyValues};
pub use mapfile::{format_map, load_map, parse_map, save_map};
pub use results::{
    format_flags, format_ground_truth, format_results, load_ground_truth, load_results, parse_flags,
    parse_ground_truth, parse_results, write_results, KeypointFlags,
};

/// Major version written and accepted by this crate.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Format { path: PathBuf, line: usize, message: String },
    #[error("{path}: unsupported {kind} version {found}, expected v{FORMAT_VERSION}")]
    VersionMismatch { path: PathBuf, kind: String, found: String },
    #[error("missing asset {0}")]
    MissingAsset(PathBuf),
    #[error("{0}")]
    Invariant(String),
}

pub type Result<T> = std::result::Result<T, IoError>;

pub fn read_text(path: &Path) -> Result<String> {
    match std::fs::read_to_string(path) {
        Ok(s) => Ok(s),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(IoError::MissingAsset(path.to_path_buf())),
        Err(source) => Err(IoError::Io { path: path.to_path_buf(), source }),
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|source| IoError::Io { path: parent.to_path_buf(), source })?;
    }
    std::fs::write(path, text).map_err(|source| IoError::Io { path: path.to_path_buf(), source })
}

/// Exact decimal form of a float; `nan` for NaN and `0` for positive zero.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else if x.to_bits() == 0 {
        "0".to_string()
    } else {
        format!("{x:.16e}")
    }
}

pub(crate) fn push_floats(out: &mut String, values: impl IntoIterator<Item = f64>) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(' ');
        }
        first = false;
        out.push_str(&fmt_f64(v));
    }
    out.push('\n');
}

pub(crate) fn push_line(out: &mut String, args: std::fmt::Arguments<'_>) {
    out.write_fmt(args).expect("writing to a String");
    out.push('\n');
}

/// Names are written as single tokens.
pub(crate) fn check_token(name: &str, what: &str) -> Result<()> {
    if name.is_empty() || name.contains(char::is_whitespace) || name.contains('#') {
        return Err(IoError::Invariant(format!("{what} {name:?} must be a non-empty token without whitespace or '#'")));
    }
    Ok(())
}

/// Tokenized view of a text file with position-aware errors.
pub(crate) struct Reader<'a> {
    path: PathBuf,
    lines: Vec<(usize, Vec<&'a str>)>,
    pos: usize,
    last_line: usize,
}

impl<'a> Reader<'a> {
    pub fn new(path: &Path, text: &'a str) -> Self {
        let mut lines = Vec::new();
        let mut last_line = 0;
        for (i, raw) in text.lines().enumerate() {
            last_line = i + 1;
            let content = raw.split('#').next().unwrap_or("");
            let tokens: Vec<&str> = content.split_whitespace().collect();
            if !tokens.is_empty() {
                lines.push((i + 1, tokens));
            }
        }
        Self { path: path.to_path_buf(), lines, pos: 0, last_line }
    }

    pub fn err(&self, line: usize, message: impl Into<String>) -> IoError {
        IoError::Format { path: self.path.clone(), line, message: message.into() }
    }

    /// Reads `MAGIC v1 ...` and returns the tokens after the version.
    pub fn header(&mut self, magic: &str) -> Result<(usize, Vec<&'a str>)> {
        let (line, tokens) = self.next(&format!("{magic} header"))?;
        if tokens[0] != magic {
            return Err(self.err(line, format!("expected {magic} header, found {:?}", tokens[0])));
        }
        let Some(version) = tokens.get(1) else {
            return Err(self.err(line, "missing format version"));
        };
        let major = version.strip_prefix('v').and_then(|v| v.split('.').next()).and_then(|v| v.parse::<u32>().ok());
        match major {
            Some(FORMAT_VERSION) => Ok((line, tokens[2..].to_vec())),
            Some(_) => Err(IoError::VersionMismatch {
                path: self.path.clone(),
                kind: magic.to_string(),
                found: version.to_string(),
            }),
            None => Err(self.err(line, format!("malformed version {version:?}"))),
        }
    }

    pub fn next(&mut self, expected: &str) -> Result<(usize, Vec<&'a str>)> {
        match self.lines.get(self.pos) {
            Some((line, tokens)) => {
                self.pos += 1;
                Ok((*line, tokens.clone()))
            }
            None => Err(self.err(self.last_line + 1, format!("unexpected end of file, expected {expected}"))),
        }
    }

    pub fn peek(&self) -> Option<&[&'a str]> {
        self.lines.get(self.pos).map(|(_, t)| t.as_slice())
    }

    /// Next line, which must have exactly `n` fields.
    pub fn row(&mut self, n: usize, expected: &str) -> Result<(usize, Vec<&'a str>)> {
        let (line, tokens) = self.next(expected)?;
        if tokens.len() != n {
            return Err(self.err(line, format!("expected {n} fields for {expected}, found {}", tokens.len())));
        }
        Ok((line, tokens))
    }

    pub fn parse<T: FromStr>(&self, line: usize, token: &str, what: &str) -> Result<T> {
        token.parse().map_err(|_| self.err(line, format!("invalid {what}: {token:?}")))
    }

    pub fn floats(&self, line: usize, tokens: &[&str], what: &str) -> Result<Vec<f64>> {
        tokens.iter().map(|t| self.parse::<f64>(line, t, what)).collect()
    }

    /// Section keyword line `KEYWORD args...`.
    pub fn section(&mut self, keyword: &str, n_args: usize) -> Result<(usize, Vec<&'a str>)> {
        let (line, tokens) = self.next(&format!("{keyword} section"))?;
        if tokens[0] != keyword || tokens.len() != n_args + 1 {
            return Err(
                self.err(line, format!("expected `{keyword}` with {n_args} argument(s), found {:?}", tokens.join(" ")))
            );
        }
        Ok((line, tokens[1..].to_vec()))
    }

    pub fn finish(&self) -> Result<()> {
        match self.lines.get(self.pos) {
            None => Ok(()),
            Some((line, _)) => Err(self.err(*line, "unexpected trailing data")),
        }
    }
}
