//! CSV and JSON input/output.
//!
//! Every float is written in Rust's shortest round-trip decimal form, so a
//! value read back parses to the identical `f64`. Files are written to a
//! temporary sibling and renamed into place.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use num_rational::Ratio;
use serde::Serialize;

use crate::dynamics::ParticleState;
use crate::error::{Error, Result};
use crate::functionals::{FunctionalSample, SAMPLE_COLUMNS};
use crate::transport::{EmpiricalMeasure, Weight};

/// Version stamped into manifests; bump when a file layout changes.
pub const FORMAT_VERSION: u32 = 1;

/// Description of the numeric format, echoed into manifests.
pub const NUMBER_FORMAT: &str = "shortest round-trip decimal";

/// Writes `contents` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::file(dir, e))?;
    tmp.write_all(contents).map_err(|e| Error::file(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::file(path, e))?;
    tmp.persist(path).map_err(|e| Error::file(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn state_header(d: usize, leading: &[&str], trailing: &[&str]) -> String {
    let mut cols: Vec<String> = leading.iter().map(|s| s.to_string()).collect();
    cols.extend((1..=d).map(|k| format!("x{k}")));
    cols.extend((1..=d).map(|k| format!("v{k}")));
    cols.extend(trailing.iter().map(|s| s.to_string()));
    cols.join(",")
}

fn push_row(out: &mut String, state: &ParticleState, i: usize) {
    for z in state.position(i).iter().chain(state.velocity(i)) {
        write!(out, ",{z}").expect("writing to a String cannot fail");
    }
}

pub fn state_to_csv(state: &ParticleState) -> String {
    let mut out = state_header(state.d(), &["id"], &[]);
    out.push('\n');
    for i in 0..state.n() {
        write!(out, "{i}").unwrap();
        push_row(&mut out, state, i);
        out.push('\n');
    }
    out
}

pub fn write_state_csv(path: &Path, state: &ParticleState) -> Result<()> {
    write_atomic(path, state_to_csv(state).as_bytes())
}

/// States as a long table `t,id,x1..xd,v1..vd`.
pub fn states_to_csv(states: &[ParticleState]) -> String {
    let d = states.first().map_or(0, ParticleState::d);
    let mut out = state_header(d, &["t", "id"], &[]);
    out.push('\n');
    for s in states {
        for i in 0..s.n() {
            write!(out, "{},{i}", s.t).unwrap();
            push_row(&mut out, s, i);
            out.push('\n');
        }
    }
    out
}

pub fn functionals_to_csv(samples: &[FunctionalSample]) -> String {
    let mut out = SAMPLE_COLUMNS.join(",");
    out.push('\n');
    for s in samples {
        let row: Vec<String> = s.values().iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Formats an exact weight as `p/q`, or `p` when the denominator is one.
pub fn format_weight(w: &Weight) -> String {
    if *w.denom() == 1 {
        w.numer().to_string()
    } else {
        format!("{}/{}", w.numer(), w.denom())
    }
}

/// Parses `p/q`, an integer, or a finite decimal such as `0.125` exactly.
pub fn parse_weight(text: &str) -> Result<Weight> {
    let text = text.trim();
    let bad = || Error::InvalidMeasure(format!("cannot parse weight {text:?}"));
    if let Some((p, q)) = text.split_once('/') {
        let p: u64 = p.trim().parse().map_err(|_| bad())?;
        let q: u64 = q.trim().parse().map_err(|_| bad())?;
        if q == 0 {
            return Err(bad());
        }
        return Ok(Ratio::new(p, q));
    }
    let (whole, frac) = text.split_once('.').unwrap_or((text, ""));
    if whole.is_empty() && frac.is_empty()
        || !whole.chars().chain(frac.chars()).all(|c| c.is_ascii_digit())
        || frac.len() > 18
    {
        return Err(bad());
    }
    let denom = 10u64.pow(frac.len() as u32);
    let whole: u64 = if whole.is_empty() { 0 } else { whole.parse().map_err(|_| bad())? };
    let frac_num: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
    let numer = whole
        .checked_mul(denom)
        .and_then(|w| w.checked_add(frac_num))
        .ok_or_else(bad)?;
    Ok(Ratio::new(numer, denom))
}

/// Atoms are split evenly into positions and velocities.
pub fn measure_to_csv(mu: &EmpiricalMeasure) -> String {
    let mut out = state_header(mu.phase_dim() / 2, &["id"], &["weight"]);
    out.push('\n');
    for i in 0..mu.len() {
        write!(out, "{i}").unwrap();
        for z in mu.atom(i) {
            write!(out, ",{z}").unwrap();
        }
        writeln!(out, ",{}", format_weight(&mu.weights()[i])).unwrap();
    }
    out
}

struct Table {
    d: usize,
    has_weight: bool,
    rows: Vec<(usize, Vec<f64>, Option<Weight>)>,
}

/// Reads `id,x1..xd,v1..vd[,weight]`, returning rows sorted by id.
fn read_table(path: &Path) -> Result<Table> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::file(path, e))?.clone();
    let names: Vec<&str> = headers.iter().collect();
    let has_weight = names.last() == Some(&"weight");
    let body = names.len() - 1 - usize::from(has_weight);
    if names.first() != Some(&"id") || body == 0 || body % 2 != 0 {
        return Err(Error::file(
            path,
            "header must be id,x1..xd,v1..vd with an optional trailing weight",
        ));
    }
    let d = body / 2;
    let expected = state_header(d, &["id"], if has_weight { &["weight"] } else { &[] });
    if names.join(",") != expected {
        return Err(Error::file(path, format!("expected header {expected}")));
    }
    let mut rows = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let line = k + 2;
        let record = record.map_err(|e| Error::file(path, format!("line {line}: {e}")))?;
        let at = |msg: String| Error::file(path, format!("line {line}: {msg}"));
        let id: usize = record[0]
            .parse()
            .map_err(|_| at(format!("bad id {:?}", &record[0])))?;
        let values = (1..=2 * d)
            .map(|c| {
                record[c]
                    .parse::<f64>()
                    .map_err(|_| at(format!("bad number {:?}", &record[c])))
            })
            .collect::<Result<Vec<_>>>()?;
        let weight = if has_weight {
            Some(parse_weight(&record[2 * d + 1]).map_err(|e| at(e.to_string()))?)
        } else {
            None
        };
        rows.push((id, values, weight));
    }
    if rows.is_empty() {
        return Err(Error::file(path, "no particles"));
    }
    rows.sort_by_key(|r| r.0);
    if rows.iter().enumerate().any(|(k, r)| r.0 != k) {
        return Err(Error::file(path, "ids must be 0..n-1, each exactly once"));
    }
    Ok(Table {
        d,
        has_weight,
        rows,
    })
}

/// Reads a state at `t = 0`, ordered by particle id.
pub fn read_state_csv(path: &Path) -> Result<ParticleState> {
    let table = read_table(path)?;
    if table.has_weight {
        return Err(Error::file(path, "a state file has no weight column"));
    }
    let d = table.d;
    let mut positions = Vec::with_capacity(table.rows.len() * d);
    let mut velocities = Vec::with_capacity(table.rows.len() * d);
    for (_, values, _) in &table.rows {
        positions.extend_from_slice(&values[..d]);
        velocities.extend_from_slice(&values[d..]);
    }
    ParticleState::new(0.0, d, positions, velocities).map_err(|e| Error::file(path, e))
}

/// Reads a measure; without a weight column every atom weighs `1/n`.
pub fn read_measure_csv(path: &Path) -> Result<EmpiricalMeasure> {
    let table = read_table(path)?;
    let n = table.rows.len();
    let atoms: Vec<f64> = table.rows.iter().flat_map(|r| r.1.iter().copied()).collect();
    let measure = if table.has_weight {
        let weights = table.rows.iter().map(|r| r.2.expect("weight column")).collect();
        EmpiricalMeasure::new(2 * table.d, atoms, weights)
    } else {
        EmpiricalMeasure::new(2 * table.d, atoms, vec![Ratio::new(1, n as u64); n])
    };
    measure.map_err(|e| Error::file(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_parse_exactly() {
        assert_eq!(parse_weight("1/3").unwrap(), Ratio::new(1, 3));
        assert_eq!(parse_weight("0.125").unwrap(), Ratio::new(1, 8));
        assert_eq!(parse_weight("1").unwrap(), Ratio::new(1, 1));
        assert_eq!(parse_weight(".5").unwrap(), Ratio::new(1, 2));
        for bad in ["", ".", "1/0", "-0.5", "1e-3", "abc"] {
            assert!(parse_weight(bad).is_err(), "{bad}");
        }
        assert_eq!(format_weight(&Ratio::new(2, 6)), "1/3");
    }

    #[test]
    fn state_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let s = ParticleState::new(
            0.0,
            2,
            vec![0.1, 1.0 / 3.0, -2.5e-300, 7.0],
            vec![f64::MAX, -0.0, 1e21, 5e-324],
        )
        .unwrap();
        write_state_csv(&path, &s).unwrap();
        assert_eq!(read_state_csv(&path).unwrap(), s);
    }

    #[test]
    fn rows_are_ordered_by_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        fs::write(&path, "id,x1,v1\n1,2.0,3.0\n0,0.5,-1\n").unwrap();
        let s = read_state_csv(&path).unwrap();
        assert_eq!(s.positions(), &[0.5, 2.0]);
        fs::write(&path, "id,x1,v1\n0,1,1\n2,1,1\n").unwrap();
        assert!(read_state_csv(&path).is_err());
        fs::write(&path, "id,x1,v2\n0,1,1\n").unwrap();
        assert!(read_state_csv(&path).is_err());
    }

    #[test]
    fn bad_number_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        fs::write(&path, "id,x1,v1\n0,1,1\n1,oops,1\n").unwrap();
        let msg = read_state_csv(&path).unwrap_err().to_string();
        assert!(msg.contains("line 3"), "{msg}");
        assert!(msg.contains("s.csv"), "{msg}");
    }

    #[test]
    fn measure_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mu = EmpiricalMeasure::new(
            2,
            vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
            vec![Ratio::new(1, 2), Ratio::new(1, 3), Ratio::new(1, 6)],
        )
        .unwrap();
        write_atomic(&path, measure_to_csv(&mu).as_bytes()).unwrap();
        assert_eq!(read_measure_csv(&path).unwrap(), mu);
        fs::write(&path, "id,x1,v1,weight\n0,0,0,0.5\n1,1,1,0.25\n").unwrap();
        assert!(read_measure_csv(&path).is_err());
    }
}
