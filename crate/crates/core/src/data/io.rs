use std::collections::{BTreeMap, HashSet};
use std::io::Read;
use std::path::Path;

use super::{Maneuver, TrackPoint, Trajectory};
use crate::error::{Error, Result};

pub const FEET_TO_METERS: f64 = 0.3048;

const COLUMNS: [&str; 4] = ["vehicle_id", "frame", "x_m", "y_m"];

pub fn load_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let file = std::fs::File::open(path)?;
    parse_trajectories(file)
}

/// Parses `vehicle_id,frame,x_m,y_m` rows. Rows may come in any order;
/// output is grouped by vehicle, sorted by frame and split at frame gaps.
pub fn parse_trajectories<R: Read>(reader: R) -> Result<Vec<Trajectory>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?
        .clone();
    let mut idx = [0usize; 4];
    for (slot, name) in idx.iter_mut().zip(COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse {
                line: 1,
                msg: format!("missing column `{name}`"),
            })?;
    }

    let mut by_vehicle: BTreeMap<u64, Vec<TrackPoint>> = BTreeMap::new();
    let mut seen = HashSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let cell = |i: usize| rec.get(idx[i]).unwrap_or("");
        let vehicle: u64 = parse_cell(cell(0), COLUMNS[0], line)?;
        let frame: u64 = parse_cell(cell(1), COLUMNS[1], line)?;
        let x: f64 = parse_cell(cell(2), COLUMNS[2], line)?;
        let y: f64 = parse_cell(cell(3), COLUMNS[3], line)?;
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::Parse {
                line,
                msg: "non-finite coordinate".into(),
            });
        }
        if !seen.insert((vehicle, frame)) {
            return Err(Error::Parse {
                line,
                msg: format!("duplicate row for vehicle {vehicle} frame {frame}"),
            });
        }
        by_vehicle
            .entry(vehicle)
            .or_default()
            .push(TrackPoint { frame, pos: [x, y] });
    }

    let mut out = Vec::new();
    for (vehicle_id, mut points) in by_vehicle {
        points.sort_by_key(|p| p.frame);
        let mut segment = 0;
        let mut start = 0;
        for i in 1..=points.len() {
            if i == points.len() || points[i].frame != points[i - 1].frame + 1 {
                out.push(Trajectory {
                    vehicle_id,
                    segment,
                    points: points[start..i].to_vec(),
                });
                segment += 1;
                start = i;
            }
        }
    }
    Ok(out)
}

fn parse_cell<T: std::str::FromStr>(s: &str, column: &str, line: usize) -> Result<T> {
    s.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("column `{column}`: cannot parse `{s}`"),
    })
}

/// Writes rows sorted by (vehicle, frame). Floats use the shortest exact
/// representation, so a load round-trip is lossless.
pub fn write_trajectories(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    let mut rows: Vec<(u64, &TrackPoint)> = trajs
        .iter()
        .flat_map(|t| t.points.iter().map(move |p| (t.vehicle_id, p)))
        .collect();
    rows.sort_by_key(|(v, p)| (*v, p.frame));
    let mut w = csv_writer(path)?;
    w.write_record(COLUMNS).map_err(csv_io)?;
    for (v, p) in rows {
        w.write_record([
            v.to_string(),
            p.frame.to_string(),
            p.pos[0].to_string(),
            p.pos[1].to_string(),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `ego_id,maneuver` rows.
pub fn write_manifest(path: &Path, egos: &[(u64, Maneuver)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["ego_id", "maneuver"]).map_err(csv_io)?;
    for (id, m) in egos {
        w.write_record([id.to_string(), m.to_string()]).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Vec<(u64, Maneuver)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_io)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_io)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let id = parse_cell(rec.get(0).unwrap_or(""), "ego_id", line)?;
        let m = rec
            .get(1)
            .unwrap_or("")
            .parse()
            .map_err(|e: Error| Error::Parse { line, msg: e.to_string() })?;
        out.push((id, m));
    }
    Ok(out)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path)?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_io(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line,
            msg: format!("{other:?}"),
        },
    }
}
