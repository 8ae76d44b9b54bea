//! Persistence: the NSMX binary snapshot format, trajectory export, CSV
//! writers with provenance headers, and operator serialization.
//!
//! NSMX layout (all little-endian): magic `NSMX`, format version (u32),
//! `K` (u32), mode count (u32), then one `(re, im)` f64 pair per mode in
//! grid order.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;

use crate::config::LabError;
use crate::control::ControlOperator;
use crate::mixing::ExperimentRecord;
use crate::solver::Trajectory;
use crate::spectral::{SpectralVelocity, WaveGrid};

pub const NSMX_MAGIC: &[u8; 4] = b"NSMX";
pub const NSMX_VERSION: u32 = 1;

pub fn write_nsmx(w: &mut impl Write, field: &SpectralVelocity) -> Result<(), LabError> {
    w.write_all(NSMX_MAGIC)?;
    w.write_all(&NSMX_VERSION.to_le_bytes())?;
    w.write_all(&field.grid().k_max().to_le_bytes())?;
    w.write_all(&(field.coeffs().len() as u32).to_le_bytes())?;
    for c in field.coeffs() {
        w.write_all(&c.re.to_le_bytes())?;
        w.write_all(&c.im.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_nsmx(r: &mut impl Read, grid: &Arc<WaveGrid>) -> Result<SpectralVelocity, LabError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != NSMX_MAGIC {
        return Err(LabError::Validation("bad NSMX magic".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != NSMX_VERSION {
        return Err(LabError::Validation(format!(
            "unsupported NSMX version {version}"
        )));
    }
    r.read_exact(&mut word)?;
    let k = u32::from_le_bytes(word);
    r.read_exact(&mut word)?;
    let count = u32::from_le_bytes(word) as usize;
    if k != grid.k_max() || count != grid.mode_count() {
        return Err(LabError::Validation(format!(
            "snapshot grid K={k}/{count} does not match K={}/{}",
            grid.k_max(),
            grid.mode_count()
        )));
    }
    let mut coeffs = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut buf)?;
        let re = f64::from_le_bytes(buf);
        r.read_exact(&mut buf)?;
        let im = f64::from_le_bytes(buf);
        coeffs.push(Complex64::new(re, im));
    }
    Ok(SpectralVelocity::from_coeffs(grid, coeffs)?)
}

/// Write a trajectory as a stream of NSMX records plus a CSV index with
/// columns `step, t, energy, enstrophy`.
pub fn export_trajectory(
    dir: &Path,
    stem: &str,
    traj: &Trajectory,
    digest: &str,
    seed: u64,
) -> Result<(), LabError> {
    std::fs::create_dir_all(dir)?;
    let mut bin = std::io::BufWriter::new(std::fs::File::create(
        dir.join(format!("{stem}.nsmx")),
    )?);
    for snap in traj.snapshots() {
        write_nsmx(&mut bin, snap)?;
    }
    bin.flush()?;
    let mut csv = CsvWriter::create(
        &dir.join(format!("{stem}_index.csv")),
        digest,
        seed,
        &["step", "t", "energy", "enstrophy"],
    )?;
    for (i, snap) in traj.snapshots().iter().enumerate() {
        let h1 = snap.norm_h1();
        csv.row(&[
            i as f64,
            traj.t(i),
            snap.norm_l2_sq(),
            h1 * h1,
        ])?;
    }
    csv.finish()
}

pub fn read_trajectory_snapshots(
    path: &Path,
    grid: &Arc<WaveGrid>,
) -> Result<Vec<SpectralVelocity>, LabError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    loop {
        let mut magic = [0u8; 4];
        match file.read(&mut magic)? {
            0 => break,
            4 => {}
            n => {
                file.read_exact(&mut magic[n..])?;
            }
        }
        if &magic != NSMX_MAGIC {
            return Err(LabError::Validation("bad NSMX magic in stream".into()));
        }
        let mut word = [0u8; 4];
        file.read_exact(&mut word)?;
        if u32::from_le_bytes(word) != NSMX_VERSION {
            return Err(LabError::Validation("unsupported NSMX version".into()));
        }
        file.read_exact(&mut word)?;
        let k = u32::from_le_bytes(word);
        file.read_exact(&mut word)?;
        let count = u32::from_le_bytes(word) as usize;
        if k != grid.k_max() || count != grid.mode_count() {
            return Err(LabError::Validation("snapshot grid mismatch".into()));
        }
        let mut coeffs = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            file.read_exact(&mut buf)?;
            let re = f64::from_le_bytes(buf);
            file.read_exact(&mut buf)?;
            let im = f64::from_le_bytes(buf);
            coeffs.push(Complex64::new(re, im));
        }
        out.push(SpectralVelocity::from_coeffs(grid, coeffs)?);
    }
    Ok(out)
}

/// CSV file with `# key = value` provenance headers.
pub struct CsvWriter {
    inner: std::io::BufWriter<std::fs::File>,
}

impl CsvWriter {
    pub fn create(
        path: &Path,
        digest: &str,
        seed: u64,
        columns: &[&str],
    ) -> Result<Self, LabError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut inner = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(inner, "# config_digest = {digest}")?;
        writeln!(inner, "# seed = {seed}")?;
        writeln!(inner, "{}", columns.join(","))?;
        Ok(CsvWriter { inner })
    }

    pub fn row(&mut self, values: &[f64]) -> Result<(), LabError> {
        let mut first = true;
        for v in values {
            if !first {
                write!(self.inner, ",")?;
            }
            write!(self.inner, "{v}")?;
            first = false;
        }
        writeln!(self.inner)?;
        Ok(())
    }

    pub fn raw_row(&mut self, values: &[String]) -> Result<(), LabError> {
        writeln!(self.inner, "{}", values.join(","))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), LabError> {
        self.inner.flush()?;
        Ok(())
    }
}

/// Write an experiment record: the row CSV plus a JSON summary with the
/// fitted rates and verdicts.
pub fn write_experiment(dir: &Path, rec: &ExperimentRecord) -> Result<(), LabError> {
    std::fs::create_dir_all(dir)?;
    let cols: Vec<&str> = rec.columns.iter().map(|s| s.as_str()).collect();
    let mut csv = CsvWriter::create(
        &dir.join(format!("{}.csv", rec.kind)),
        &rec.config_digest,
        rec.seed,
        &cols,
    )?;
    for row in &rec.rows {
        csv.row(row)?;
    }
    csv.finish()?;
    let summary = serde_json::json!({
        "kind": rec.kind,
        "config_digest": rec.config_digest,
        "seed": rec.seed,
        "fits": rec.fits.iter().map(|(name, fit)| {
            serde_json::json!({
                "name": name,
                "rate": fit.rate,
                "intercept": fit.intercept,
                "r_squared": fit.r_squared,
                "points_used": fit.points_used,
            })
        }).collect::<Vec<_>>(),
        "verdicts": rec.verdicts.iter().map(|(name, ok)| {
            serde_json::json!({ "name": name, "pass": ok })
        }).collect::<Vec<_>>(),
        "notes": rec.notes,
        "passed": rec.passed(),
    });
    std::fs::write(
        dir.join(format!("{}_summary.json", rec.kind)),
        serde_json::to_string_pretty(&summary).expect("serializable") + "\n",
    )?;
    Ok(())
}

/// Serialize the feedback operator: a CSV matrix dump plus a JSON metadata
/// header with the certificate parameters and trajectory digest.
pub fn write_control_operator(
    dir: &Path,
    op: &ControlOperator,
    digest: &str,
    seed: u64,
    sigma: f64,
) -> Result<(), LabError> {
    std::fs::create_dir_all(dir)?;
    let meta = serde_json::json!({
        "config_digest": digest,
        "seed": seed,
        "n_modes": op.params.n_modes,
        "delta": op.params.delta,
        "m": op.params.m,
        "q": op.params.q,
        "d": op.params.d,
        "trajectory_digest": op.traj_digest,
        "certified_sigma": sigma,
        "pi_n_norm": op.pi_n_norm,
        "operator_norm": op.phi_norm,
        "rows": op.phi.nrows(),
        "cols": op.phi.ncols(),
    });
    std::fs::write(
        dir.join("control_operator.json"),
        serde_json::to_string_pretty(&meta).expect("serializable") + "\n",
    )?;
    let mut csv = CsvWriter::create(
        &dir.join("control_operator.csv"),
        digest,
        seed,
        &["row", "col", "value"],
    )?;
    for r in 0..op.phi.nrows() {
        for c in 0..op.phi.ncols() {
            csv.row(&[r as f64, c as f64, op.phi[(r, c)]])?;
        }
    }
    csv.finish()
}

/// Noise basis CSV: `j, b_j` (and `xi_j` when a sample is attached).
pub fn write_basis_csv(
    path: &Path,
    digest: &str,
    seed: u64,
    amplitudes: &[f64],
    sample: Option<&[f64]>,
) -> Result<(), LabError> {
    let mut csv = CsvWriter::create(path, digest, seed, &["j", "b_j", "xi_j"])?;
    for (j, b) in amplitudes.iter().enumerate() {
        let xi = sample.map_or(f64::NAN, |s| s[j]);
        csv.row(&[(j + 1) as f64, *b, xi])?;
    }
    csv.finish()
}
