use std::fs;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion};

use crate::error::{Error, Result};
use crate::geom::{RigidTransform, Vector};

/// Timestamped poses as stored on disk: `timestamp,tx,ty,tz,qx,qy,qz,qw`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StampedPoses {
    pub timestamps: Vec<f64>,
    pub poses: Vec<RigidTransform>,
}

const QUATERNION_NORM_TOLERANCE: f64 = 1e-3;

pub fn read_poses(path: &Path) -> Result<StampedPoses> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_poses(&bytes, path)
}

pub(crate) fn parse_poses(bytes: &[u8], path: &Path) -> Result<StampedPoses> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(bytes);
    let mut out = StampedPoses::default();
    for (k, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if k == 0 && record.get(0).is_some_and(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        if record.len() != 8 {
            return Err(Error::parse(path, line, format!("expected 8 columns, found {}", record.len())));
        }
        let mut v = [0.0; 8];
        for (slot, field) in v.iter_mut().zip(record.iter()) {
            *slot = field
                .parse()
                .ok()
                .filter(|x: &f64| x.is_finite())
                .ok_or_else(|| Error::parse(path, line, format!("bad number {field:?}")))?;
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        if (q.norm() - 1.0).abs() > QUATERNION_NORM_TOLERANCE {
            return Err(Error::parse(path, line, format!("quaternion norm {} is not 1", q.norm())));
        }
        if let Some(&prev) = out.timestamps.last() {
            if v[0] <= prev {
                return Err(Error::parse(path, line, "timestamps must be strictly increasing"));
            }
        }
        out.timestamps.push(v[0]);
        out.poses.push(RigidTransform::from_quaternion(
            UnitQuaternion::from_quaternion(q),
            Vector::new(v[1], v[2], v[3]),
        ));
    }
    Ok(out)
}

pub fn write_poses(path: &Path, timestamps: &[f64], poses: &[RigidTransform]) -> Result<()> {
    super::write_atomic(path, format_poses(timestamps, poses).as_bytes())
}

pub(crate) fn format_poses(timestamps: &[f64], poses: &[RigidTransform]) -> String {
    let mut out = String::from("timestamp,tx,ty,tz,qx,qy,qz,qw\n");
    for (t, pose) in timestamps.iter().zip(poses) {
        let tr = pose.translation();
        let q = pose.quaternion();
        out.push_str(&format!("{},{},{},{},{},{},{},{}\n", t, tr.x, tr.y, tr.z, q.i, q.j, q.k, q.w));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let poses = vec![
            RigidTransform::identity(),
            RigidTransform::from_yaw(0.3, Vector::new(1.0, -2.0, 0.5)),
        ];
        let text = format_poses(&[0.0, 0.1], &poses);
        let back = parse_poses(text.as_bytes(), Path::new("t")).unwrap();
        assert_eq!(back.timestamps, vec![0.0, 0.1]);
        for (a, b) in poses.iter().zip(&back.poses) {
            let (dt, dr) = a.distance_to(b);
            assert!(dt < 1e-12 && dr < 1e-9);
        }
    }

    #[test]
    fn rejects_non_monotonic_time() {
        let text = "0,0,0,0,0,0,0,1\n0,1,0,0,0,0,0,1\n";
        assert!(parse_poses(text.as_bytes(), Path::new("t")).is_err());
    }

    #[test]
    fn rejects_bad_quaternion() {
        assert!(parse_poses(b"0,0,0,0,0,0,0,2\n", Path::new("t")).is_err());
    }
}
