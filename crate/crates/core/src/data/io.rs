//! ASCII PLY subset for clouds and seven-number pose files.
//!
//! Values are written with Rust's shortest round-trip formatting, so a
//! write followed by a read reproduces every `f64` exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{Features, PointCloud, Pose};

const FEATURE_NAMES: [&str; 3] = ["r", "g", "b"];

fn feature_name(dim: usize, k: usize) -> String {
    if dim == 3 {
        FEATURE_NAMES[k].to_string()
    } else {
        format!("f{k}")
    }
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let dim = cloud.features.as_ref().map_or(0, |f| f.dim);
    let mut s = String::new();
    let _ = writeln!(s, "ply\nformat ascii 1.0\nelement vertex {}", cloud.len());
    for axis in ["x", "y", "z"] {
        let _ = writeln!(s, "property double {axis}");
    }
    for k in 0..dim {
        let _ = writeln!(s, "property double {}", feature_name(dim, k));
    }
    s.push_str("end_header\n");
    for (i, p) in cloud.points.iter().enumerate() {
        let _ = write!(s, "{} {} {}", p[0], p[1], p[2]);
        if let Some(f) = &cloud.features {
            for v in f.row(i) {
                let _ = write!(s, " {v}");
            }
        }
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

struct Cursor<'a> {
    path: &'a Path,
}

impl Cursor<'_> {
    fn err(&self, line: usize, column: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: PathBuf::from(self.path),
            line,
            column,
            message: message.into(),
        }
    }
}

/// Whitespace-separated tokens with 1-based columns.
fn tokens(line: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in line.char_indices() {
        match (ch.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                out.push((s + 1, &line[s..i]));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s + 1, &line[s..]));
    }
    out
}

fn number(cur: &Cursor, line: usize, column: usize, tok: &str) -> Result<f64> {
    tok.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| cur.err(line, column, format!("expected a finite number, found `{tok}`")))
}

/// Parses PLY-subset text; `path` only labels errors.
pub fn parse_cloud(text: &str, path: &Path) -> Result<PointCloud> {
    let cur = Cursor { path };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut expect = |want: &str| -> Result<usize> {
        match lines.next() {
            Some((n, l)) if l.trim() == want => Ok(n),
            Some((n, l)) => Err(cur.err(n, 1, format!("expected `{want}`, found `{}`", l.trim()))),
            None => Err(cur.err(0, 0, format!("unexpected end of file, expected `{want}`"))),
        }
    };
    expect("ply")?;
    expect("format ascii 1.0")?;
    let mut count = None;
    let mut properties = Vec::new();
    let mut body_start = 0;
    for (n, line) in lines.by_ref() {
        let toks = tokens(line);
        match toks.as_slice() {
            [] => continue,
            [(_, "comment"), ..] => continue,
            [(_, "element"), (_, "vertex"), (c, v)] => {
                count = Some(
                    v.parse::<usize>()
                        .map_err(|_| cur.err(n, *c, format!("invalid vertex count `{v}`")))?,
                );
            }
            [(_, "property"), (c, ty), (_, name)] => {
                if *ty != "double" && *ty != "float" {
                    return Err(cur.err(n, *c, format!("unsupported property type `{ty}`")));
                }
                properties.push(name.to_string());
            }
            [(_, "end_header")] => {
                body_start = n;
                break;
            }
            [(c, t), ..] => return Err(cur.err(n, *c, format!("unexpected header token `{t}`"))),
        }
    }
    let count = count.ok_or_else(|| cur.err(body_start, 1, "header has no `element vertex` line"))?;
    if properties.len() < 3 || properties[..3] != ["x", "y", "z"] {
        return Err(cur.err(body_start, 1, "the first three properties must be x, y, z"));
    }
    let dim = properties.len() - 3;
    let mut points = Vec::with_capacity(count);
    let mut features = Vec::with_capacity(count * dim);
    for (n, line) in lines {
        let toks = tokens(line);
        if toks.is_empty() {
            continue;
        }
        if points.len() == count {
            return Err(cur.err(n, toks[0].0, format!("more than {count} vertex rows")));
        }
        if toks.len() != properties.len() {
            let col = toks.get(properties.len()).map_or(line.len() + 1, |t| t.0);
            return Err(cur.err(
                n,
                col,
                format!("expected {} values, found {}", properties.len(), toks.len()),
            ));
        }
        let vals = toks
            .iter()
            .map(|(c, t)| number(&cur, n, *c, t))
            .collect::<Result<Vec<f64>>>()?;
        points.push([vals[0], vals[1], vals[2]]);
        features.extend_from_slice(&vals[3..]);
    }
    if points.len() != count {
        return Err(cur.err(
            text.lines().count(),
            1,
            format!("expected {count} vertex rows, found {}", points.len()),
        ));
    }
    Ok(PointCloud {
        points,
        features: (dim > 0).then_some(Features { dim, values: features }),
    })
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    parse_cloud(&fs::read_to_string(path)?, path)
}

/// `qw qx qy qz tx ty tz` on one line.
pub fn write_pose(path: &Path, pose: &Pose) -> Result<()> {
    let [w, x, y, z] = pose.rotation;
    let [a, b, c] = pose.translation;
    fs::write(path, format!("{w} {x} {y} {z} {a} {b} {c}\n"))?;
    Ok(())
}

/// Parses one pose; blank lines and `#` comments are ignored.
pub fn parse_pose(text: &str, path: &Path) -> Result<Pose> {
    let cur = Cursor { path };
    let mut found = None;
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let body = line.split('#').next().unwrap_or("");
        let toks = tokens(body);
        if toks.is_empty() {
            continue;
        }
        if found.is_some() {
            return Err(cur.err(n, toks[0].0, "a pose file holds exactly one pose"));
        }
        if toks.len() != 7 {
            let col = toks.get(7).map_or(body.len() + 1, |t| t.0);
            return Err(cur.err(n, col, format!("expected 7 numbers, found {}", toks.len())));
        }
        let v = toks
            .iter()
            .map(|(c, t)| number(&cur, n, *c, t))
            .collect::<Result<Vec<f64>>>()?;
        let pose = Pose::new([v[0], v[1], v[2], v[3]], [v[4], v[5], v[6]])
            .map_err(|e| cur.err(n, toks[0].0, e.to_string()))?;
        found = Some(pose);
    }
    found.ok_or_else(|| cur.err(0, 0, "no pose found"))
}

pub fn read_pose(path: &Path) -> Result<Pose> {
    parse_pose(&fs::read_to_string(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::random_tensor;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn cloud_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.ply");
        for (seed, dim) in [(1u64, 3usize), (2, 0), (3, 5)] {
            let xyz = random_tensor(&[17, 3], 1e3, seed);
            let pts = xyz.data().chunks(3).map(|c| [c[0] / 7.0, c[1] * 1e-9, c[2]]).collect();
            let cloud = if dim == 0 {
                PointCloud::new(pts)
            } else {
                PointCloud::with_features(pts, dim, random_tensor(&[17, dim], 1.0, seed + 9).into_data()).unwrap()
            };
            write_cloud(&file, &cloud).unwrap();
            assert_eq!(read_cloud(&file).unwrap(), cloud);
        }
    }

    #[test]
    fn pose_files() {
        assert_eq!(parse_pose("1 0 0 0 0 0 0\n", p()).unwrap(), Pose::identity());
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("p.txt");
        let pose = Pose::from_axis_angle([0.2, -1.0, 0.4], 2.1, [0.1, -0.25, 0.7]).unwrap();
        write_pose(&file, &pose).unwrap();
        assert_eq!(read_pose(&file).unwrap(), pose);
        assert!(parse_pose("# c\n\n1 0 0 0 0 0 0 # id\n", p()).is_ok());
    }

    #[test]
    fn errors_name_line_and_column() {
        let err = parse_pose("\n1 0 0 x 0 0 0\n", p()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, column: 7, .. }), "{err}");
        let err = parse_pose("1 0 0 0 0 0\n", p()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse_pose("0 0 0 0 0 0 0\n", p()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty double x\nproperty double y\nproperty double z\nend_header\n0 0 0\n1 2\n";
        let err = parse_cloud(text, p()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 9, .. }), "{err}");
        assert!(err.to_string().starts_with("mem:9:"));
        let short = text.replace("1 2\n", "");
        assert!(parse_cloud(&short, p()).is_err());
        assert!(parse_cloud("plx\n", p()).is_err());
    }
}
