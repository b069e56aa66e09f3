//! Deterministic artifacts: CSV time series, self-describing field dumps,
//! binary checkpoints, and the run manifest. All floating-point output
//! uses a fixed 17-significant-digit scientific format so identical runs
//! produce byte-identical files.

use crate::config::SimConfig;
use crate::error::{Error, Result};
use crate::grid::{AnnulusGrid, GridField};
use crate::rigid::RigidState;
use crate::solver::FlowState;
use crate::transform::TransformAtlas;
use crate::verify::{EnergyLedger, GapReport};
use nalgebra::Vector2;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.17e}")
}

/// Body rotation angle from the stored matrix.
pub fn body_angle(body: &RigidState) -> f64 {
    body.rot[(1, 0)].atan2(body.rot[(0, 0)])
}

pub struct CsvWriter {
    file: std::fs::File,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &str) -> Result<Self> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "{header}")?;
        Ok(CsvWriter { file })
    }

    pub fn row(&mut self, values: &[f64]) -> Result<()> {
        let line: Vec<String> = values.iter().map(|v| fmt_f64(*v)).collect();
        writeln!(self.file, "{}", line.join(","))?;
        Ok(())
    }
}

pub const TRAJECTORY_HEADER: &str = "t,q_x,q_y,theta,a_x,a_y,omega";
pub const ENERGY_HEADER: &str = "t,E,D_visc,D_slip,defect";
pub const GAP_HEADER: &str = "t,gap_L2,gap_a,gap_omega,integrand";

pub fn trajectory_row(body: &RigidState) -> [f64; 7] {
    let q = body.q2();
    let a = body.a2();
    [body.t, q.x, q.y, body_angle(body), a.x, a.y, body.omega.planar()]
}

pub fn energy_row(ledger: &EnergyLedger) -> [f64; 5] {
    [ledger.t, ledger.e_total, ledger.d_visc, ledger.d_slip, ledger.defect()]
}

/// Appends one gap-report block (one run of the sweep) to gap.csv.
pub fn write_gap_block(w: &mut CsvWriter, report: &GapReport) -> Result<()> {
    for k in 0..report.times.len() {
        w.row(&[
            report.times[k],
            report.gap_l2[k],
            report.gap_a[k],
            report.gap_omega[k],
            report.gronwall_integrand[k],
        ])?;
    }
    Ok(())
}

/// Text field dump: header line, dimensions line, then one row per grid
/// row (including ghosts) with all components.
pub fn dump_field(field: &GridField, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "slipfsi-field v1")?;
    writeln!(f, "{} {} {} {}", field.n_r, field.n_theta, field.comps, fmt_f64(field.t))?;
    for i in 0..=field.n_r + 1 {
        let mut row = Vec::with_capacity(field.n_theta * field.comps);
        for j in 0..field.n_theta {
            for c in 0..field.comps {
                row.push(fmt_f64(field.get(i, j, c)));
            }
        }
        writeln!(f, "{}", row.join(" "))?;
    }
    Ok(())
}

const CKPT_MAGIC: &[u8; 8] = b"SLIPCKPT";
const CKPT_VERSION: u32 = 1;

fn write_f64s(out: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn field_payload(f: &GridField) -> Vec<f64> {
    let mut v = Vec::new();
    for i in 0..=f.n_r + 1 {
        for j in 0..f.n_theta {
            for c in 0..f.comps {
                v.push(f.get(i, j, c));
            }
        }
    }
    v
}

fn field_from_payload(grid: &AnnulusGrid, comps: usize, t: f64, vals: &[f64]) -> GridField {
    let mut f = GridField::zeros(grid, comps);
    f.t = t;
    let mut k = 0;
    for i in 0..=grid.n_r + 1 {
        for j in 0..grid.n_theta {
            for c in 0..comps {
                f.set(i, j, c, vals[k]);
                k += 1;
            }
        }
    }
    f
}

/// Binary snapshot of the full coupled state. The atlas is stored as
/// positions plus map velocity and rebuilt on restore; an exact-identity
/// atlas is flagged and reconstructed analytically so restore-then-step
/// reproduces a continuous run bit for bit.
pub fn checkpoint(state: &FlowState, path: &Path) -> Result<()> {
    let grid = &state.atlas.grid;
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(grid.n_r as u32).to_le_bytes());
    out.extend_from_slice(&(grid.n_theta as u32).to_le_bytes());
    let identity = {
        let mut same = true;
        'outer: for i in 0..=grid.n_r + 1 {
            for j in 0..grid.n_theta {
                let y = grid.node(i, j);
                if state.atlas.x.get(i, j, 0) != y.x || state.atlas.x.get(i, j, 1) != y.y {
                    same = false;
                    break 'outer;
                }
            }
        }
        same
    };
    out.push(identity as u8);
    let body = &state.body;
    write_f64s(
        &mut out,
        &[
            state.t,
            grid.r_inner,
            grid.r_outer,
            body.t,
            body.q2().x,
            body.q2().y,
            body.a2().x,
            body.a2().y,
            body.rot[(0, 0)],
            body.rot[(0, 1)],
            body.rot[(1, 0)],
            body.rot[(1, 1)],
            body.omega.planar(),
        ],
    );
    write_f64s(&mut out, &field_payload(&state.u));
    write_f64s(&mut out, &field_payload(&state.p));
    write_f64s(&mut out, &field_payload(&state.atlas.x));
    write_f64s(&mut out, &field_payload(&state.atlas.xdot));
    std::fs::write(path, out)?;
    Ok(())
}

struct ByteReader {
    data: Vec<u8>,
    pos: usize,
}

impl ByteReader {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint("truncated checkpoint file".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(self.f64()?);
        }
        Ok(v)
    }
}

pub fn restore(path: &Path) -> Result<FlowState> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    let mut r = ByteReader { data, pos: 0 };
    if r.take(8)? != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let n_r = r.u32()? as usize;
    let n_theta = r.u32()? as usize;
    let identity = r.take(1)?[0] != 0;
    let t = r.f64()?;
    let r_inner = r.f64()?;
    let r_outer = r.f64()?;
    let grid = AnnulusGrid::new(n_r, n_theta, r_inner, r_outer)?;
    let body_t = r.f64()?;
    let q = Vector2::new(r.f64()?, r.f64()?);
    let a = Vector2::new(r.f64()?, r.f64()?);
    let rot = [r.f64()?, r.f64()?, r.f64()?, r.f64()?];
    let omega = r.f64()?;
    let mut body = RigidState::planar(q, a, omega);
    body.t = body_t;
    body.rot[(0, 0)] = rot[0];
    body.rot[(0, 1)] = rot[1];
    body.rot[(1, 0)] = rot[2];
    body.rot[(1, 1)] = rot[3];
    let n_nodes = (n_r + 2) * n_theta;
    let u = field_from_payload(&grid, 2, t, &r.f64s(2 * n_nodes)?);
    let p = field_from_payload(&grid, 1, t, &r.f64s(n_nodes)?);
    let x = field_from_payload(&grid, 2, t, &r.f64s(2 * n_nodes)?);
    let xdot = field_from_payload(&grid, 2, t, &r.f64s(2 * n_nodes)?);
    let atlas = if identity {
        TransformAtlas::identity(&grid)
    } else {
        TransformAtlas::from_positions(&grid, t, x, xdot)?
    };
    Ok(FlowState { t, u, p, body, atlas })
}

/// Run provenance: config echo, version, seed, produced files.
#[derive(Debug, serde::Serialize)]
pub struct RunManifest {
    pub version: String,
    pub config_toml: String,
    pub seed: u64,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn begin(cfg: &SimConfig) -> Result<Self> {
        Ok(RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_toml: cfg.to_canonical_toml()?,
            seed: cfg.run.seed,
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
            outputs: Vec::new(),
        })
    }

    pub fn add(&mut self, path: &Path) {
        self.outputs.push(path.file_name().unwrap_or_default().to_string_lossy().into_owned());
    }

    pub fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        self.finished_unix_ms = now_ms();
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self)
            .map_err(|e| Error::Io(std::io::Error::new(std::io::ErrorKind::Other, e)))?;
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

fn now_ms() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{initialize_state, step, InitialCondition, PerturbationSpec};

    fn setup() -> (AnnulusGrid, crate::solver::SolverParams, FlowState) {
        let g = AnnulusGrid::new(16, 32, 0.5, 2.0).unwrap();
        let p = crate::solver::SolverParams {
            mu: 0.05,
            beta: 1.0,
            proj_tol: 1e-10,
            delta0: 0.15,
            pinned: false,
        };
        let body = RigidState::planar(Vector2::zeros(), Vector2::zeros(), 0.0);
        let pert = PerturbationSpec { amplitude: 0.02, seed: 3, modes: 3 };
        let s = initialize_state(&g, &p, InitialCondition::Swirl { amplitude: 0.3 }, Some(&pert), body).unwrap();
        (g, p, s)
    }

    #[test]
    fn checkpoint_round_trip_identical() {
        let (_, p, s0) = setup();
        let dt = 0.5 * crate::solver::stable_dt(&s0, &p);
        let s = step(&s0, &p, dt, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        checkpoint(&s, &path).unwrap();
        let r = restore(&path).unwrap();
        assert_eq!(r.t, s.t);
        assert_eq!(r.u.raw(), s.u.raw());
        assert_eq!(r.p.raw(), s.p.raw());
        assert_eq!(r.body.q2(), s.body.q2());
        assert_eq!(r.atlas.x.raw(), s.atlas.x.raw());
        assert_eq!(r.atlas.x_jac.raw(), s.atlas.x_jac.raw());
    }

    #[test]
    fn restore_then_step_matches_continuous_run() {
        let (_, p, s0) = setup();
        let dt = 0.5 * crate::solver::stable_dt(&s0, &p);
        let s1 = step(&s0, &p, dt, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        checkpoint(&s1, &path).unwrap();
        let s2_cont = step(&s1, &p, dt, None).unwrap();
        let s2_split = step(&restore(&path).unwrap(), &p, dt, None).unwrap();
        assert_eq!(s2_cont.u.raw(), s2_split.u.raw());
        assert_eq!(s2_cont.p.raw(), s2_split.p.raw());
        assert_eq!(s2_cont.body.q2(), s2_split.body.q2());
        assert_eq!(s2_cont.body.omega.planar(), s2_split.body.omega.planar());
    }

    #[test]
    fn identity_atlas_round_trips_exactly() {
        let (_, p, s0) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t0.ckpt");
        checkpoint(&s0, &path).unwrap();
        let r = restore(&path).unwrap();
        assert_eq!(r.atlas.x_jac.raw(), s0.atlas.x_jac.raw());
        // split-run equality also holds from the very first step
        let dt = 0.5 * crate::solver::stable_dt(&s0, &p);
        let a = step(&s0, &p, dt, None).unwrap();
        let b = step(&r, &p, dt, None).unwrap();
        assert_eq!(a.u.raw(), b.u.raw());
    }

    #[test]
    fn corrupted_checkpoint_rejected() {
        let (_, _, s) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        checkpoint(&s, &path).unwrap();
        let mut data = std::fs::read(&path).unwrap();
        data[0] = b'X';
        std::fs::write(&path, &data).unwrap();
        assert!(matches!(restore(&path), Err(Error::Checkpoint(_))));
        // truncation
        checkpoint(&s, &path).unwrap();
        let data = std::fs::read(&path).unwrap();
        std::fs::write(&path, &data[..data.len() / 2]).unwrap();
        assert!(matches!(restore(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn csv_format_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        {
            let mut w = CsvWriter::create(&path, TRAJECTORY_HEADER).unwrap();
            w.row(&[0.1, 1.0 / 3.0, 2.0f64.sqrt(), 0.0, -1.5e-13, 7.0, 0.0]).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        {
            let mut w = CsvWriter::create(&path, TRAJECTORY_HEADER).unwrap();
            w.row(&[0.1, 1.0 / 3.0, 2.0f64.sqrt(), 0.0, -1.5e-13, 7.0, 0.0]).unwrap();
        }
        assert_eq!(text, std::fs::read_to_string(&path).unwrap());
        assert!(text.starts_with("t,q_x"));
    }

    #[test]
    fn field_dump_schema() {
        let g = AnnulusGrid::new(8, 16, 0.5, 2.0).unwrap();
        let f = GridField::from_fn(&g, 2, |x, c| x[c]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.dat");
        dump_field(&f, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "slipfsi-field v1");
        let dims: Vec<&str> = lines.next().unwrap().split(' ').collect();
        assert_eq!(dims[0], "8");
        assert_eq!(dims[1], "16");
        assert_eq!(dims[2], "2");
        assert_eq!(text.lines().count(), 2 + 8 + 2);
    }
}
