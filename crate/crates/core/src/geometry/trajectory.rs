//! Trajectory files: one camera-to-world pose per frame as
//! `timestamp,tx,ty,tz,qx,qy,qz,qw` with Hamilton quaternions.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{Quaternion, Rotation3, UnitQuaternion, Vector3};

use super::{GeometryError, PoseSE3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryEntry {
    pub timestamp: f64,
    pub pose: PoseSE3,
}

pub const TRAJECTORY_HEADER: &str = "timestamp,tx,ty,tz,qx,qy,qz,qw";

pub fn write_trajectory(path: &Path, entries: &[TrajectoryEntry]) -> Result<(), GeometryError> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    writeln!(f, "{TRAJECTORY_HEADER}")?;
    for e in entries {
        let t = e.pose.translation;
        let q = UnitQuaternion::from_rotation_matrix(&e.pose.rotation);
        writeln!(
            f,
            "{:.6},{:.9},{:.9},{:.9},{:.12},{:.12},{:.12},{:.12}",
            e.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
        )?;
    }
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryEntry>, GeometryError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == TRAJECTORY_HEADER => {}
        other => {
            return Err(GeometryError::BadTrajectory(format!(
                "expected header {TRAJECTORY_HEADER:?}, got {other:?}"
            )))
        }
    }
    let mut entries = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(GeometryError::BadTrajectory(format!(
                "row {}: expected 8 fields, got {}",
                i + 2,
                fields.len()
            )));
        }
        let mut v = [0.0f64; 8];
        for (j, field) in fields.iter().enumerate() {
            v[j] = field.trim().parse().map_err(|_| {
                GeometryError::BadTrajectory(format!("row {}: bad number {:?}", i + 2, field))
            })?;
        }
        let q = UnitQuaternion::from_quaternion(Quaternion::new(v[7], v[4], v[5], v[6]));
        entries.push(TrajectoryEntry {
            timestamp: v[0],
            pose: PoseSE3::new(Rotation3::from(q), Vector3::new(v[1], v[2], v[3])),
        });
    }
    Ok(entries)
}
