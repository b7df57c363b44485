use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::resolve;
use crate::error::{Error, Result};
use crate::train::LandmarkSet;

/// Attribute flag names of the WFLW annotation format, in file order.
pub const ATTRIBUTES: [&str; 6] = [
    "pose",
    "expression",
    "illumination",
    "make-up",
    "occlusion",
    "blur",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnotationFormat {
    /// `x0 y0 … x97 y97 bx0 by0 bx1 by1 f0 … f5 path`
    Wflw,
    /// `path x0 y0 … x(L-1) y(L-1)`
    Simple,
}

impl FromStr for AnnotationFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wflw" => Ok(AnnotationFormat::Wflw),
            "simple" | "300w" => Ok(AnnotationFormat::Simple),
            _ => Err(Error::config(format!(
                "unknown annotation format `{s}` (expected wflw or simple)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub image: PathBuf,
    pub landmarks: LandmarkSet,
    /// Face box `[x0, y0, x1, y1]`, WFLW only.
    pub bbox: Option<[i64; 4]>,
    /// One flag per entry of [`ATTRIBUTES`], WFLW only.
    pub attributes: Option<Vec<bool>>,
}

/// Reads one record per non-empty line. Image paths are resolved relative to
/// the directory holding `path`.
pub fn load_annotations(
    path: &Path,
    format: AnnotationFormat,
    landmarks: usize,
) -> Result<Vec<AnnotationRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let rec = match format {
            AnnotationFormat::Wflw => parse_wflw(line, landmarks, base),
            AnnotationFormat::Simple => parse_simple(line, landmarks, base),
        }
        .map_err(err)?;
        out.push(rec);
    }
    Ok(out)
}

fn floats<'a>(tokens: impl Iterator<Item = &'a str>) -> std::result::Result<Vec<f64>, String> {
    tokens
        .map(|t| {
            let v: f64 = t.parse().map_err(|_| format!("`{t}` is not a number"))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(format!("non-finite coordinate `{t}`"))
            }
        })
        .collect()
}

fn pairs(v: &[f64]) -> LandmarkSet {
    LandmarkSet::new(v.chunks(2).map(|c| [c[0], c[1]]).collect())
}

fn parse_wflw(line: &str, l: usize, base: &Path) -> std::result::Result<AnnotationRecord, String> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    let expected = 2 * l + 4 + 6 + 1;
    if tokens.len() != expected {
        let extra = 4 + 6 + 1;
        if tokens.len() > extra && (tokens.len() - extra) % 2 == 0 {
            return Err(format!(
                "line has {} landmarks but the model predicts {l}",
                (tokens.len() - extra) / 2
            ));
        }
        return Err(format!(
            "expected {expected} fields for {l} landmarks, found {}",
            tokens.len()
        ));
    }
    let coords = floats(tokens[..2 * l].iter().copied())?;
    let mut bbox = [0i64; 4];
    for (k, t) in tokens[2 * l..2 * l + 4].iter().enumerate() {
        bbox[k] = t
            .parse()
            .map_err(|_| format!("bounding box value `{t}` is not an integer"))?;
    }
    let mut attributes = Vec::with_capacity(6);
    for (t, name) in tokens[2 * l + 4..2 * l + 10].iter().zip(ATTRIBUTES) {
        attributes.push(match *t {
            "0" => false,
            "1" => true,
            _ => return Err(format!("{name} flag must be 0 or 1, found `{t}`")),
        });
    }
    Ok(AnnotationRecord {
        image: resolve(base, tokens[expected - 1]),
        landmarks: pairs(&coords),
        bbox: Some(bbox),
        attributes: Some(attributes),
    })
}

fn parse_simple(line: &str, l: usize, base: &Path) -> std::result::Result<AnnotationRecord, String> {
    let mut tokens = line.split_whitespace();
    let image = tokens.next().ok_or("missing image path")?;
    let coords = floats(tokens)?;
    if coords.len() != 2 * l {
        return Err(format!(
            "expected {} coordinates for {l} landmarks, found {}",
            2 * l,
            coords.len()
        ));
    }
    Ok(AnnotationRecord {
        image: resolve(base, image),
        landmarks: pairs(&coords),
        bbox: None,
        attributes: None,
    })
}
