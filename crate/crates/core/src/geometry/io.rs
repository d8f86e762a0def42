//! Plain-text clouds: one `x y z [label]` per line, `#` comments allowed.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{Point, PointCloud};
use crate::error::{Error, Result};

pub fn read_cloud(reader: impl BufRead) -> Result<PointCloud> {
    let mut points: Vec<Point> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut labelled: Option<bool> = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let fields: Vec<&str> = body.split_whitespace().collect();
        let err = |msg: String| Error::Parse {
            line: lineno + 1,
            msg,
        };
        if fields.len() != 3 && fields.len() != 4 {
            return Err(err(format!("expected 3 or 4 fields, got {}", fields.len())));
        }
        let has_label = fields.len() == 4;
        match labelled {
            None => labelled = Some(has_label),
            Some(prev) if prev != has_label => {
                return Err(err("label column present on some lines only".into()))
            }
            _ => {}
        }
        let mut p = [0.0; 3];
        for (d, f) in fields[..3].iter().enumerate() {
            p[d] = f
                .parse::<f64>()
                .map_err(|e| err(format!("bad coordinate '{f}': {e}")))?;
        }
        points.push(p);
        if has_label {
            labels.push(
                fields[3]
                    .parse::<usize>()
                    .map_err(|e| err(format!("bad label '{}': {e}", fields[3])))?,
            );
        }
    }
    let cloud = PointCloud::new(points)?;
    if labelled == Some(true) {
        cloud.with_labels(labels)
    } else {
        Ok(cloud)
    }
}

pub fn read_cloud_file(path: &Path) -> Result<PointCloud> {
    read_cloud(BufReader::new(File::open(path)?))
}

pub fn write_cloud(mut w: impl Write, points: &[Point], labels: Option<&[usize]>) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != points.len() {
            return Err(Error::invalid("label count does not match point count"));
        }
    }
    for (i, p) in points.iter().enumerate() {
        match labels {
            Some(l) => writeln!(w, "{} {} {} {}", p[0], p[1], p[2], l[i])?,
            None => writeln!(w, "{} {} {}", p[0], p[1], p[2])?,
        }
    }
    Ok(())
}

pub fn write_cloud_file(path: &Path, points: &[Point], labels: Option<&[usize]>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_cloud(&mut w, points, labels)?;
    w.flush()?;
    Ok(())
}
