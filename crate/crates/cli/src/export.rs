//! Trajectory directories: `states.bin`, `depth.csv`, `poses.csv`, `points.xyz`.
//!
//! Text files open with `#` comment lines carrying the config hash and the
//! conventions needed to read them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use geoflow::toyworld::{Geometry, GeometryState, Pose};
use geoflow::Tensor;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::checkpoint::TensorFile;
use crate::error::{CliError, Result};

pub const STATES: &str = "states.bin";
pub const DEPTH: &str = "depth.csv";
pub const POSES: &str = "poses.csv";
pub const POINTS: &str = "points.xyz";
pub const PREDICTED: &str = "predicted_latents.bin";

/// JSON header stored in `states.bin` and `predicted_latents.bin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatesHeader {
    pub config_hash: String,
    pub frame_indices: Vec<usize>,
}

pub fn comment_block(config_hash: &str, lines: &[&str]) -> String {
    let mut s = format!("# geoflow config_hash={config_hash}\n");
    for l in lines {
        s.push_str("# ");
        s.push_str(l);
        s.push('\n');
    }
    s
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn csv_bytes(comments: String, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Vec<u8> {
    let mut out = comments.into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(header).expect("in-memory write");
        for r in rows {
            w.write_record(&r).expect("in-memory write");
        }
        w.flush().expect("in-memory flush");
    }
    out
}

pub fn states_file(states: &[GeometryState<f64>], config_hash: &str) -> TensorFile {
    let header = StatesHeader {
        config_hash: config_hash.to_string(),
        frame_indices: states.iter().map(|s| s.frame_index).collect(),
    };
    let mut f = TensorFile::new(serde_json::to_string(&header).expect("header serializes"));
    for s in states {
        f.push(format!("frame.{}", s.frame_index), &s.tokens);
    }
    f
}

pub fn read_states(path: &Path) -> Result<Vec<GeometryState<f64>>> {
    let f = TensorFile::load(path)?;
    let header: StatesHeader =
        serde_json::from_str(&f.header).map_err(|e| CliError::format(path, format!("states header: {e}")))?;
    if header.frame_indices.len() != f.tensors.len() {
        return Err(CliError::format(path, "frame index count differs from tensor count"));
    }
    Ok(header
        .frame_indices
        .iter()
        .zip(&f.tensors)
        .map(|(&frame_index, (_, t))| GeometryState {
            tokens: t.to_tensor(),
            frame_index,
        })
        .collect())
}

pub fn depth_csv(geometry: &Geometry, config_hash: &str) -> Vec<u8> {
    let comments = comment_block(config_hash, &["depth per patch cell; columns frame,row,col,depth"]);
    let rows = geometry.frame_indices.iter().zip(&geometry.depths).flat_map(|(&f, d)| {
        let cols = d.cols();
        d.data()
            .iter()
            .enumerate()
            .map(move |(i, v)| vec![f.to_string(), (i / cols).to_string(), (i % cols).to_string(), v.to_string()])
            .collect::<Vec<_>>()
    });
    csv_bytes(comments, &["frame", "row", "col", "depth"], rows)
}

const POSE_COLUMNS: [&str; 13] = [
    "frame", "r00", "r01", "r02", "r10", "r11", "r12", "r20", "r21", "r22", "t0", "t1", "t2",
];

pub fn poses_csv(geometry: &Geometry, config_hash: &str) -> Vec<u8> {
    let comments = comment_block(
        config_hash,
        &["world-to-camera pose x_cam = R x_world + t; R row-major then t"],
    );
    let rows = geometry.frame_indices.iter().zip(&geometry.poses).map(|(&f, p)| {
        let mut r = vec![f.to_string()];
        for i in 0..3 {
            for j in 0..3 {
                r.push(p.rotation[(i, j)].to_string());
            }
        }
        r.extend(p.translation.iter().map(|v| v.to_string()));
        r
    });
    csv_bytes(comments, &POSE_COLUMNS, rows)
}

pub fn points_xyz(geometry: &Geometry, config_hash: &str) -> Vec<u8> {
    let mut s = comment_block(config_hash, &["world-frame points, one `x y z` per line, grouped by `# frame <t>`"]);
    for (&f, pts) in geometry.frame_indices.iter().zip(&geometry.points) {
        s.push_str(&format!("# frame {f}\n"));
        for r in pts.data().chunks_exact(3) {
            s.push_str(&format!("{} {} {}\n", r[0], r[1], r[2]));
        }
    }
    s.into_bytes()
}

/// Writes `states.bin`, `depth.csv`, `poses.csv` and `points.xyz` into `dir`.
pub fn write_trajectory(dir: &Path, states: &[GeometryState<f64>], geometry: &Geometry, config_hash: &str) -> Result<()> {
    create_dir(dir)?;
    states_file(states, config_hash).save(&dir.join(STATES))?;
    write_file(&dir.join(DEPTH), &depth_csv(geometry, config_hash))?;
    write_file(&dir.join(POSES), &poses_csv(geometry, config_hash))?;
    write_file(&dir.join(POINTS), &points_xyz(geometry, config_hash))?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn parse_f64(path: &Path, s: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| CliError::format(path, format!("not a number: {s:?}")))
}

fn parse_usize(path: &Path, s: &str) -> Result<usize> {
    s.trim().parse().map_err(|_| CliError::format(path, format!("not an index: {s:?}")))
}

fn csv_rows(path: &Path, width: usize) -> Result<Vec<csv::StringRecord>> {
    let text = read_text(path)?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::format(path, e.to_string()))?;
        if rec.len() != width {
            return Err(CliError::format(path, format!("row has {} fields, expected {width}", rec.len())));
        }
        rows.push(rec);
    }
    Ok(rows)
}

/// Depth maps keyed by frame, each flattened row-major.
pub fn read_depth(path: &Path) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mut out: BTreeMap<usize, Vec<(usize, usize, f64)>> = BTreeMap::new();
    for rec in csv_rows(path, 4)? {
        let f = parse_usize(path, &rec[0])?;
        out.entry(f)
            .or_default()
            .push((parse_usize(path, &rec[1])?, parse_usize(path, &rec[2])?, parse_f64(path, &rec[3])?));
    }
    Ok(out
        .into_iter()
        .map(|(f, mut cells)| {
            cells.sort_by_key(|&(r, c, _)| (r, c));
            (f, cells.into_iter().map(|(_, _, v)| v).collect())
        })
        .collect())
}

pub fn read_poses(path: &Path) -> Result<BTreeMap<usize, Pose>> {
    let mut out = BTreeMap::new();
    for rec in csv_rows(path, POSE_COLUMNS.len())? {
        let f = parse_usize(path, &rec[0])?;
        let v = (1..13).map(|i| parse_f64(path, &rec[i])).collect::<Result<Vec<_>>>()?;
        let pose = Pose {
            rotation: Matrix3::from_row_slice(&v[..9]),
            translation: Vector3::new(v[9], v[10], v[11]),
        };
        if out.insert(f, pose).is_some() {
            return Err(CliError::format(path, format!("frame {f} listed twice")));
        }
    }
    Ok(out)
}

pub fn read_points(path: &Path) -> Result<BTreeMap<usize, Vec<Vector3<f64>>>> {
    let text = read_text(path)?;
    let mut out: BTreeMap<usize, Vec<Vector3<f64>>> = BTreeMap::new();
    let mut current: Option<usize> = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(f) = rest.trim().strip_prefix("frame ") {
                let f = parse_usize(path, f)?;
                out.entry(f).or_default();
                current = Some(f);
            }
            continue;
        }
        let f = current.ok_or_else(|| CliError::format(path, "point before any `# frame` line"))?;
        let v = line.split_whitespace().map(|s| parse_f64(path, s)).collect::<Result<Vec<_>>>()?;
        if v.len() != 3 {
            return Err(CliError::format(path, format!("expected 3 coordinates, got {}", v.len())));
        }
        out.get_mut(&f).expect("frame entry").push(Vector3::new(v[0], v[1], v[2]));
    }
    Ok(out)
}

/// Stacks per-frame point rows into `n×3` tensors (used when re-decoding).
pub fn points_tensor(points: &[Vector3<f64>]) -> Tensor<f64> {
    Tensor::matrix(points.len(), 3, points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()).expect("n×3 layout")
}

/// Files a trajectory directory must contain for a given suite, with the ones missing.
pub fn missing_files(dir: &Path, names: &[&str]) -> Vec<PathBuf> {
    names.iter().map(|n| dir.join(n)).filter(|p| !p.is_file()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use geoflow::toyworld::{World, WorldConfig};

    fn traj() -> (Vec<GeometryState<f64>>, Geometry) {
        let w = World::new(WorldConfig {
            d: 16,
            n_patch: 4,
            ..WorldConfig::default()
        })
        .unwrap();
        let t = w.generate_trajectory(3, 4).unwrap();
        (t.states, t.geometry)
    }

    #[test]
    fn text_formats_round_trip_exactly() {
        let (states, geo) = traj();
        let dir = tempfile::tempdir().unwrap();
        write_trajectory(dir.path(), &states, &geo, "abc").unwrap();
        assert_eq!(read_states(&dir.path().join(STATES)).unwrap(), states);
        let depth = read_depth(&dir.path().join(DEPTH)).unwrap();
        let poses = read_poses(&dir.path().join(POSES)).unwrap();
        let points = read_points(&dir.path().join(POINTS)).unwrap();
        for (i, &f) in geo.frame_indices.iter().enumerate() {
            assert_eq!(depth[&f], geo.depths[i].data());
            assert_eq!(poses[&f], geo.poses[i]);
            assert_eq!(points_tensor(&points[&f]), geo.points[i]);
        }
        let text = std::fs::read_to_string(dir.path().join(DEPTH)).unwrap();
        assert!(text.starts_with("# geoflow config_hash=abc\n"));
    }

    #[test]
    fn missing_files_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        write_file(&dir.path().join(DEPTH), b"frame,row,col,depth\n").unwrap();
        let missing = missing_files(dir.path(), &[DEPTH, POSES, POINTS]);
        assert_eq!(missing, vec![dir.path().join(POSES), dir.path().join(POINTS)]);
    }
}
