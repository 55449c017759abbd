//! File formats: `MFLD 1` binary fields, legacy VTK structured points, and
//! CSV trace tables.
//!
//! An MFLD file is six ASCII header lines, a blank line, then raw
//! little-endian `f64` values in x-fastest node order (three interleaved
//! components per node for vector fields):
//!
//! ```text
//! MFLD 1
//! kind scalar
//! dims 48 48 48
//! origin 0 0 0
//! spacing 0.02127659574468085
//! data little-endian f64
//!
//! <bytes>
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::forward::MeasurementSet;
use crate::grid::{Grid3, ScalarField, VectorField};
use crate::math::Vec3;

#[derive(Debug, Clone, PartialEq)]
pub enum Field {
    Scalar(ScalarField),
    Vector(VectorField),
}

impl Field {
    pub fn grid(&self) -> Grid3 {
        match self {
            Self::Scalar(f) => f.grid,
            Self::Vector(f) => f.grid,
        }
    }

    pub fn into_scalar(self, path: &Path) -> Result<ScalarField> {
        match self {
            Self::Scalar(f) => Ok(f),
            Self::Vector(_) => Err(format_err(path, "expected a scalar field")),
        }
    }

    pub fn into_vector(self, path: &Path) -> Result<VectorField> {
        match self {
            Self::Vector(f) => Ok(f),
            Self::Scalar(_) => Err(format_err(path, "expected a vector field")),
        }
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: msg.into(),
    }
}

fn header(kind: &str, g: &Grid3) -> String {
    // `{:?}` on f64 prints the shortest round-tripping representation.
    format!(
        "MFLD 1\nkind {kind}\ndims {} {} {}\norigin {:?} {:?} {:?}\nspacing {:?}\ndata little-endian f64\n\n",
        g.dims[0], g.dims[1], g.dims[2], g.origin[0], g.origin[1], g.origin[2], g.spacing
    )
}

pub fn encode_mfld(field: &Field) -> Vec<u8> {
    let (kind, g) = match field {
        Field::Scalar(f) => ("scalar", f.grid),
        Field::Vector(f) => ("vector", f.grid),
    };
    let mut out = header(kind, &g).into_bytes();
    match field {
        Field::Scalar(f) => {
            for v in &f.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Field::Vector(f) => {
            for v in f.values.iter().flatten() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn write_mfld(path: &Path, field: &Field) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&encode_mfld(field))?;
    w.flush()?;
    Ok(())
}

pub fn write_scalar(path: &Path, f: &ScalarField) -> Result<()> {
    write_mfld(path, &Field::Scalar(f.clone()))
}

pub fn write_vector(path: &Path, f: &VectorField) -> Result<()> {
    write_mfld(path, &Field::Vector(f.clone()))
}

pub fn read_mfld(path: &Path) -> Result<Field> {
    let mut r = BufReader::new(fs::File::open(path)?);
    decode_mfld(&mut r, path)
}

pub fn read_scalar(path: &Path) -> Result<ScalarField> {
    read_mfld(path)?.into_scalar(path)
}

pub fn read_vector(path: &Path) -> Result<VectorField> {
    read_mfld(path)?.into_vector(path)
}

pub fn decode_mfld(r: &mut impl BufRead, path: &Path) -> Result<Field> {
    let mut lines = Vec::new();
    for _ in 0..7 {
        let mut s = String::new();
        if r.read_line(&mut s)? == 0 {
            return Err(format_err(path, "truncated header"));
        }
        lines.push(s.trim_end_matches('\n').to_string());
    }
    if lines[0] != "MFLD 1" {
        return Err(format_err(path, format!("bad magic line {:?}", lines[0])));
    }
    let field = |line: &str, key: &str| -> Result<Vec<String>> {
        let mut it = line.split_whitespace();
        if it.next() != Some(key) {
            return Err(format_err(path, format!("expected `{key}` line, found {line:?}")));
        }
        Ok(it.map(str::to_string).collect())
    };
    let kind = field(&lines[1], "kind")?;
    let dims = field(&lines[2], "dims")?;
    let origin = field(&lines[3], "origin")?;
    let spacing = field(&lines[4], "spacing")?;
    if lines[5] != "data little-endian f64" || !lines[6].is_empty() {
        return Err(format_err(path, "unsupported data encoding"));
    }
    let parse_usize = |s: &String| s.parse::<usize>().map_err(|e| format_err(path, e.to_string()));
    let parse_f64 = |s: &String| s.parse::<f64>().map_err(|e| format_err(path, e.to_string()));
    if dims.len() != 3 || origin.len() != 3 || spacing.len() != 1 || kind.len() != 1 {
        return Err(format_err(path, "malformed header"));
    }
    let dims = [parse_usize(&dims[0])?, parse_usize(&dims[1])?, parse_usize(&dims[2])?];
    let origin = [parse_f64(&origin[0])?, parse_f64(&origin[1])?, parse_f64(&origin[2])?];
    let grid = Grid3::new(dims, origin, parse_f64(&spacing[0])?).map_err(|e| format_err(path, e.to_string()))?;
    let comps = match kind[0].as_str() {
        "scalar" => 1,
        "vector" => 3,
        k => return Err(format_err(path, format!("unknown kind {k:?}"))),
    };
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != 8 * comps * grid.len() {
        return Err(format_err(
            path,
            format!("{} data bytes, expected {}", bytes.len(), 8 * comps * grid.len()),
        ));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let wrap = |e: Error| format_err(path, e.to_string());
    if comps == 1 {
        Ok(Field::Scalar(ScalarField::from_values(grid, vals).map_err(wrap)?))
    } else {
        let v = vals.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Ok(Field::Vector(VectorField::from_values(grid, v).map_err(wrap)?))
    }
}

/// Legacy ASCII VTK `STRUCTURED_POINTS` for visual inspection.
pub fn write_vtk(path: &Path, name: &str, field: &Field) -> Result<()> {
    let g = field.grid();
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "{name}")?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET STRUCTURED_POINTS")?;
    writeln!(w, "DIMENSIONS {} {} {}", g.dims[0], g.dims[1], g.dims[2])?;
    writeln!(w, "ORIGIN {} {} {}", g.origin[0], g.origin[1], g.origin[2])?;
    writeln!(w, "SPACING {0} {0} {0}", g.spacing)?;
    writeln!(w, "POINT_DATA {}", g.len())?;
    match field {
        Field::Scalar(f) => {
            writeln!(w, "SCALARS {name} double 1")?;
            writeln!(w, "LOOKUP_TABLE default")?;
            for v in &f.values {
                writeln!(w, "{v:e}")?;
            }
        }
        Field::Vector(f) => {
            writeln!(w, "VECTORS {name} double")?;
            for v in &f.values {
                writeln!(w, "{:e} {:e} {:e}", v[0], v[1], v[2])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub const TRACE_HEADER: &str = "# center_x,center_y,center_z,t,m";

/// One row per sample, centers outermost, times in increasing order.
pub fn write_traces_csv(path: &Path, set: &MeasurementSet) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    writeln!(f, "{TRACE_HEADER}")?;
    {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(&mut f);
        for (k, y) in set.centers.iter().enumerate() {
            for (j, t) in set.times.iter().enumerate() {
                w.write_record([
                    format!("{:?}", y[0]),
                    format!("{:?}", y[1]),
                    format!("{:?}", y[2]),
                    format!("{t:?}"),
                    format!("{:?}", set.traces[k][j]),
                ])?;
            }
        }
        w.flush()?;
    }
    f.flush()?;
    Ok(())
}

/// Reads a trace table; the sample grid must be a full center-by-time
/// product in the written order. Metadata not stored in the CSV (pulse
/// width, `B0`, `rho`, `c`) is taken from `meta`.
pub fn read_traces_csv(path: &Path, meta: &MeasurementSet) -> Result<MeasurementSet> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(TRACE_HEADER) {
        return Err(format_err(path, "missing trace header"));
    }
    let body: String = lines.collect::<Vec<_>>().join("\n");
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(body.as_bytes());
    let mut centers: Vec<Vec3> = Vec::new();
    let mut times: Vec<f64> = Vec::new();
    let mut traces: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 5 {
            return Err(format_err(path, format!("row with {} fields", rec.len())));
        }
        let v: Vec<f64> = rec
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|e| format_err(path, e.to_string())))
            .collect::<Result<_>>()?;
        let y = [v[0], v[1], v[2]];
        if centers.last() != Some(&y) {
            centers.push(y);
            traces.push(Vec::new());
        }
        let row = traces.last_mut().expect("row pushed above");
        if centers.len() == 1 {
            times.push(v[3]);
        } else if times.get(row.len()) != Some(&v[3]) {
            return Err(format_err(path, "time samples differ between centers"));
        }
        row.push(v[4]);
    }
    if traces.iter().any(|r| r.len() != times.len()) {
        return Err(format_err(path, "ragged trace table"));
    }
    Ok(MeasurementSet {
        centers,
        times,
        traces,
        pulse_width: meta.pulse_width,
        b0: meta.b0,
        rho: meta.rho,
        sound_speed: meta.sound_speed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mfld_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid3::new([4, 5, 6], [0.1, -0.3, 1.0 / 3.0], 0.07).unwrap();
        let s = ScalarField::from_fn(g, |x| (x[0] * 7.0).sin() + x[1] / 3.0);
        let v = VectorField::from_fn(g, |x| [x[2].exp(), -x[0], 1e-300 * x[1]]);
        let ps = dir.path().join("s.mfld");
        let pv = dir.path().join("v.mfld");
        write_scalar(&ps, &s).unwrap();
        write_vector(&pv, &v).unwrap();
        assert_eq!(read_scalar(&ps).unwrap(), s);
        assert_eq!(read_vector(&pv).unwrap(), v);
        let bytes = fs::read(&ps).unwrap();
        let head = String::from_utf8_lossy(&bytes[..60]);
        assert!(head.starts_with("MFLD 1\nkind scalar\ndims 4 5 6\n"));
        assert_eq!(bytes.len(), header("scalar", &g).len() + 8 * g.len());
    }

    #[test]
    fn mfld_rejects_wrong_kind_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid3::unit_cube(4).unwrap();
        let p = dir.path().join("s.mfld");
        write_scalar(&p, &ScalarField::zeros(g)).unwrap();
        assert!(read_vector(&p).is_err());
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_scalar(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn vtk_has_expected_header() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid3::unit_cube(4).unwrap();
        let p = dir.path().join("f.vtk");
        write_vtk(&p, "sigma", &Field::Scalar(ScalarField::constant(g, 1.5))).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("DATASET STRUCTURED_POINTS\nDIMENSIONS 4 4 4\n"));
        assert_eq!(text.lines().count(), 10 + 64);
    }

    #[test]
    fn traces_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut set = MeasurementSet::zeros(vec![[0.0, 0.0, 3.0], [1.0, -2.0, 0.5]], vec![0.5, 1.0, 1.5], 0.1, [1.0, 0.0, 0.0], 1.0, 1.0);
        set.traces[1][2] = -0.123456789012345;
        set.traces[0][0] = 1e-17;
        let p = dir.path().join("m.csv");
        write_traces_csv(&p, &set).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("# center_x,center_y,center_z,t,m\n"));
        assert_eq!(read_traces_csv(&p, &set).unwrap(), set);
    }
}
