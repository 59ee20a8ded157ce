//! Trajectory files.
//!
//! Layout: the magic `FDATRJ1`, little-endian `u32` values `T, H, W, V`, then
//! `V` variable names each as a `u32` byte length followed by UTF-8 bytes,
//! then `T·H·W·V` little-endian `f32` values in `(t, h, w, v)` order. A
//! `<file>.meta.json` sidecar repeats the dimensions and stores the dynamics
//! configuration and seed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynamics::{DynamicsConfig, Trajectory};
use crate::error::{Error, Result};
use crate::grid::GridState;

const MAGIC: &[u8; 7] = b"FDATRJ1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryMeta {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub v: usize,
    pub variable_names: Vec<String>,
    pub config: DynamicsConfig,
    pub seed: u64,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

pub fn write_trajectory(traj: &Trajectory, path: &Path) -> Result<()> {
    let first = &traj.states[0];
    let (h, w, v) = first.dims();
    let mut buf = Vec::with_capacity(7 + 16 + traj.len() * h * w * v * 4);
    buf.extend_from_slice(MAGIC);
    for d in [traj.len(), h, w, v] {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for name in first.variable_names() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
    }
    for s in &traj.states {
        for &x in s.values() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))?;
    let meta = TrajectoryMeta {
        t: traj.len(),
        h,
        w,
        v,
        variable_names: first.variable_names().to_vec(),
        config: traj.config.clone(),
        seed: traj.seed,
    };
    let mp = meta_path(path);
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&mp, text).map_err(|e| Error::io(&mp, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let out = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format(format!("{}: truncated at byte {}", self.path.display(), self.pos)))?;
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt = |m: String| Error::Format(format!("{}: {m}", path.display()));
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if cur.take(7).ok() != Some(&MAGIC[..]) {
        return Err(fmt("not a trajectory file (bad magic)".into()));
    }
    let (t, h, w, v) = (cur.u32()?, cur.u32()?, cur.u32()?, cur.u32()?);
    let mut names = Vec::with_capacity(v);
    for _ in 0..v {
        let len = cur.u32()?;
        let raw = cur.take(len)?;
        names.push(String::from_utf8(raw.to_vec()).map_err(|_| fmt("variable name is not UTF-8".into()))?);
    }
    let per = h * w * v;
    let data = cur.take(t * per * 4)?;
    if cur.pos != bytes.len() {
        return Err(fmt(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    let mp = meta_path(path);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: TrajectoryMeta = serde_json::from_str(&text).map_err(|e| fmt(format!("sidecar: {e}")))?;
    if (meta.t, meta.h, meta.w, meta.v) != (t, h, w, v) || meta.variable_names != names {
        return Err(fmt("sidecar dimensions disagree with the binary header".into()));
    }
    let mut states = Vec::with_capacity(t);
    for chunk in data.chunks_exact(per * 4) {
        let values = chunk
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        states.push(GridState::new(h, w, v, values, names.clone())?);
    }
    Trajectory::new(states, meta.config, meta.seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::generate_dataset;

    #[test]
    fn round_trip_is_bitwise_after_first_write() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.trj");
        let b = dir.path().join("b.trj");
        let traj = generate_dataset(&DynamicsConfig::torus(3, 5), 10, 12, 3).unwrap();
        write_trajectory(&traj, &a).unwrap();
        let back = read_trajectory(&a).unwrap();
        assert_eq!(back.len(), 12);
        assert_eq!(back.config, traj.config);
        assert_eq!(back.seed, 3);
        for (x, y) in back.states.iter().zip(&traj.states) {
            for (p, q) in x.values().iter().zip(y.values()) {
                assert_eq!(*p, *q as f32 as f64);
            }
        }
        write_trajectory(&back, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(read_trajectory(&b).unwrap(), back);
    }

    #[test]
    fn header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.trj");
        let traj = generate_dataset(&DynamicsConfig::ring(6), 0, 10, 0).unwrap();
        write_trajectory(&traj, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..7], b"FDATRJ1");
        assert_eq!(u32::from_le_bytes(bytes[7..11].try_into().unwrap()), 10);
        assert_eq!(u32::from_le_bytes(bytes[19..23].try_into().unwrap()), 1);
        assert_eq!(bytes.len(), 7 + 16 + 4 + 1 + 10 * 6 * 4);
        assert!(meta_path(&p).exists());
    }

    #[test]
    fn corruption_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.trj");
        let traj = generate_dataset(&DynamicsConfig::ring(6), 0, 10, 0).unwrap();
        write_trajectory(&traj, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[2] ^= 0xff;
        fs::write(&p, &bytes).unwrap();
        let err = read_trajectory(&p).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert_eq!(err.exit_code(), 3);
        bytes[2] ^= 0xff;
        fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_trajectory(&p), Err(Error::Format(_))));
    }
}
