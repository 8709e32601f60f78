//! Text serialization of class distributions.
//!
//! ```text
//! axis,horizontal,L,2,N,2
//! 0.5,0.5
//! 0,1
//! ```

use std::fmt::Write as _;
use std::path::Path;

use cdg_core::labels::{ClassDistribution, DistAxis};

use crate::error::{read_file, write_file, Error, Result};

const WHAT: &str = "distribution file";

fn fail(line: usize, msg: impl Into<String>) -> Error {
    Error::Line {
        what: WHAT,
        line,
        msg: msg.into(),
    }
}

/// Values are written in shortest round-trip form, so parsing the output
/// reproduces every `f64` bit for bit.
pub fn format(d: &ClassDistribution) -> String {
    let mut out = format!("axis,{},L,{},N,{}\n", d.axis.name(), d.len, d.classes);
    for row in d.values.chunks(d.classes) {
        for (i, v) in row.iter().enumerate() {
            let sep = if i == 0 { "" } else { "," };
            write!(out, "{sep}{v}").expect("writing to a String");
        }
        out.push('\n');
    }
    out
}

/// A file is read back as normalized when every value lies in `[0, 1]`.
pub fn parse(text: &str) -> Result<ClassDistribution> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let (_, header) = lines.next().ok_or_else(|| fail(1, "missing header"))?;
    let fields: Vec<&str> = header.split(',').map(str::trim).collect();
    let ["axis", axis, "L", len, "N", classes] = fields[..] else {
        return Err(fail(
            1,
            "header must read `axis,<horizontal|vertical>,L,<int>,N,<int>`",
        ));
    };
    let axis = match axis {
        "horizontal" => DistAxis::Horizontal,
        "vertical" => DistAxis::Vertical,
        other => return Err(fail(1, format!("unknown axis `{other}`"))),
    };
    let dim = |s: &str, name: &str| match s.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(fail(
            1,
            format!("{name} must be a positive integer, found `{s}`"),
        )),
    };
    let (len, classes) = (dim(len, "L")?, dim(classes, "N")?);
    let mut values = Vec::with_capacity(len * classes);
    let mut rows = 0;
    for (no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        if rows == len {
            return Err(fail(no, format!("more than {len} rows")));
        }
        let before = values.len();
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| fail(no, format!("`{}` is not a number", field.trim())))?;
            if !v.is_finite() {
                return Err(fail(no, format!("non-finite value `{}`", field.trim())));
            }
            values.push(v);
        }
        if values.len() - before != classes {
            return Err(fail(
                no,
                format!("expected {classes} values, found {}", values.len() - before),
            ));
        }
        rows += 1;
    }
    if rows != len {
        return Err(fail(
            text.lines().count() + 1,
            format!("expected {len} rows, found {rows}"),
        ));
    }
    let normalized = values.iter().all(|v| (0.0..=1.0).contains(v));
    Ok(ClassDistribution::new(
        axis, len, classes, values, normalized,
    )?)
}

pub fn read(path: &Path) -> Result<ClassDistribution> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Parse {
        what: WHAT,
        offset: e.valid_up_to(),
        msg: "invalid UTF-8".into(),
    })?;
    parse(text)
}

pub fn write(path: &Path, d: &ClassDistribution) -> Result<()> {
    write_file(path, format(d).as_bytes())
}
