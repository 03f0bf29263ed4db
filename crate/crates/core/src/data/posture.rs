//! Posture CSV: `Class,User,X0,Y0,Z0,...,X11,Y11,Z11`, one instance per
//! row, absent markers written as `?` in all three cells.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::Instance;
use crate::error::{Error, Result};
use crate::numkit::Matrix;

pub const MAX_MARKERS: usize = 12;

fn header() -> Vec<String> {
    let mut h = vec!["Class".to_string(), "User".to_string()];
    for i in 0..MAX_MARKERS {
        for axis in ["X", "Y", "Z"] {
            h.push(format!("{axis}{i}"));
        }
    }
    h
}

pub fn load_posture_csv(path: &Path) -> Result<Vec<Instance>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_posture_csv(file, path)
}

/// Parses posture rows from any reader; `source` only labels diagnostics.
pub fn read_posture_csv<R: Read>(reader: R, source: &Path) -> Result<Vec<Instance>> {
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: source.to_path_buf(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let expected = header();
    let found = rdr
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if found.iter().ne(expected.iter().map(String::as_str)) {
        return Err(parse_err(
            1,
            format!(
                "header must be {}..., found {}",
                expected[..5].join(","),
                found.iter().take(5).collect::<Vec<_>>().join(",")
            ),
        ));
    }
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != expected.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", expected.len(), record.len()),
            ));
        }
        let class_label: usize = record[0]
            .parse()
            .map_err(|_| parse_err(line, format!("bad class {:?}", &record[0])))?;
        if class_label == 0 {
            return Err(parse_err(line, "class labels start at 1".into()));
        }
        let user_id: u32 = record[1]
            .parse()
            .map_err(|_| parse_err(line, format!("bad user {:?}", &record[1])))?;
        let mut data = Vec::with_capacity(3 * MAX_MARKERS);
        for m in 0..MAX_MARKERS {
            let cells = [&record[2 + 3 * m], &record[3 + 3 * m], &record[4 + 3 * m]];
            let missing = cells.iter().filter(|c| **c == "?").count();
            match missing {
                3 => continue,
                0 => {
                    for c in cells {
                        let v: f64 = c
                            .parse()
                            .map_err(|_| parse_err(line, format!("marker {m}: bad coordinate {c:?}")))?;
                        if !v.is_finite() {
                            return Err(parse_err(line, format!("marker {m}: non-finite coordinate")));
                        }
                        data.push(v);
                    }
                }
                _ => {
                    return Err(parse_err(
                        line,
                        format!("marker {m} is only partially missing"),
                    ))
                }
            }
        }
        if data.is_empty() {
            return Err(parse_err(line, "instance has no markers".into()));
        }
        let n = data.len() / 3;
        out.push(Instance {
            points: Matrix::from_vec(n, 3, data)?,
            class_label,
            user_id,
        });
    }
    Ok(out)
}

pub fn write_posture_csv(path: &Path, instances: &[Instance]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_posture_to(&mut w, instances)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_posture_to<W: Write>(w: W, instances: &[Instance]) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    let to_err = |e: csv::Error| Error::Construction(format!("csv write failed: {e}"));
    wtr.write_record(header()).map_err(to_err)?;
    for (i, inst) in instances.iter().enumerate() {
        if inst.points.cols() != 3 || inst.len() > MAX_MARKERS || inst.is_empty() {
            return Err(Error::Construction(format!(
                "instance {i} has {}x{} points; posture rows hold 1..=12 three-dimensional markers",
                inst.points.rows(),
                inst.points.cols()
            )));
        }
        let mut row = vec![inst.class_label.to_string(), inst.user_id.to_string()];
        for m in 0..MAX_MARKERS {
            if m < inst.len() {
                row.extend(inst.points.row(m).iter().map(|v| v.to_string()));
            } else {
                row.extend(["?", "?", "?"].map(String::from));
            }
        }
        wtr.write_record(&row).map_err(to_err)?;
    }
    wtr.flush().map_err(|e| Error::Construction(format!("csv flush failed: {e}")))
}
