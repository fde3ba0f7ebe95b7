use std::io::{BufRead, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, OccupancyGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IngestReport {
    pub accepted: usize,
    /// Points outside the grid bounds.
    pub dropped: usize,
}

/// Bins points (meters) into cells: a cell is occupied iff at least one point
/// falls inside it. For 2D grids the z coordinate is ignored.
pub fn ingest_points(points: &[[f64; 3]], spec: GridSpec) -> Result<(OccupancyGrid, IngestReport)> {
    let mut grid = OccupancyGrid::empty(spec);
    let mut report = IngestReport { accepted: 0, dropped: 0 };
    for p in points {
        match spec.cell_of(&p[..spec.dim]) {
            Some(idx) => {
                grid.set(&idx[..spec.dim], true);
                report.accepted += 1;
            }
            None => report.dropped += 1,
        }
    }
    if report.accepted == 0 {
        return Err(Error::NoPointsInBounds { dropped: report.dropped });
    }
    Ok((grid, report))
}

/// ASCII XYZ: one whitespace- or comma-separated point per line. Blank lines
/// and lines starting with `#` are skipped; extra columns are ignored.
pub fn read_points_ascii(path: &Path) -> Result<Vec<[f64; 3]>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split(|c: char| c.is_whitespace() || c == ',').filter(|f| !f.is_empty());
        let mut p = [0.0; 3];
        for v in p.iter_mut() {
            let field = fields
                .next()
                .ok_or_else(|| Error::format(path, format!("line {}: expected 3 coordinates", lineno + 1)))?;
            *v = field
                .parse()
                .map_err(|_| Error::format(path, format!("line {}: bad number '{field}'", lineno + 1)))?;
        }
        points.push(p);
    }
    Ok(points)
}

/// Binary little-endian `f32` triples with no header.
pub fn read_points_binary(path: &Path) -> Result<Vec<[f64; 3]>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() % 12 != 0 {
        return Err(Error::format(path, format!("{} bytes is not a whole number of f32 triples", bytes.len())));
    }
    let mut cursor = std::io::Cursor::new(bytes);
    let n = cursor.get_ref().len() / 12;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let mut p = [0.0; 3];
        for v in p.iter_mut() {
            *v = f64::from(cursor.read_f32::<LittleEndian>().map_err(|e| Error::io(path, e))?);
        }
        points.push(p);
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use byteorder::WriteBytesExt;
    use std::io::Write;

    #[test]
    fn point_at_cell_center_occupies_one_cell() {
        let spec = GridSpec::new(3, 8, 4.0).unwrap();
        let c = spec.cell_center(&[2, 5, 7]);
        let (grid, report) = ingest_points(&[c], spec).unwrap();
        assert_eq!(grid.occupied_count(), 1);
        assert!(grid.get(&[2, 5, 7]));
        assert_eq!(report, IngestReport { accepted: 1, dropped: 0 });
    }

    #[test]
    fn corners_of_one_cell_bin_together() {
        let spec = GridSpec::new(3, 8, 4.0).unwrap();
        let res = spec.resolution();
        let lo = [1.0 * res, 3.0 * res, 4.0 * res];
        let eps = 1e-6;
        let mut pts = Vec::new();
        for corner in 0..8 {
            let mut p = [0.0; 3];
            for a in 0..3 {
                p[a] = lo[a] + if (corner >> a) & 1 == 1 { res - eps } else { eps };
            }
            pts.push(p);
        }
        let (grid, _) = ingest_points(&pts, spec).unwrap();
        assert_eq!(grid.occupied_count(), 1);
        assert!(grid.get(&[1, 3, 4]));
    }

    #[test]
    fn out_of_bounds_only_is_an_error() {
        let spec = GridSpec::new(2, 8, 4.0).unwrap();
        let err = ingest_points(&[[5.0, 1.0, 0.0], [-1.0, 0.0, 0.0]], spec).unwrap_err();
        assert!(matches!(err, Error::NoPointsInBounds { dropped: 2 }));
        let (_, report) = ingest_points(&[[5.0, 1.0, 0.0], [1.0, 1.0, 0.0]], spec).unwrap();
        assert_eq!(report.dropped, 1);
    }

    #[test]
    fn readers_agree() {
        let dir = tempfile::tempdir().unwrap();
        let pts = [[0.5, 1.25, 2.0], [3.0, -1.5, 0.125]];
        let ascii = dir.path().join("p.xyz");
        let mut f = std::fs::File::create(&ascii).unwrap();
        writeln!(f, "# comment").unwrap();
        for p in &pts {
            writeln!(f, "{} {} {}", p[0], p[1], p[2]).unwrap();
        }
        let bin = dir.path().join("p.bin");
        let mut f = std::fs::File::create(&bin).unwrap();
        for p in &pts {
            for v in p {
                f.write_f32::<LittleEndian>(*v as f32).unwrap();
            }
        }
        drop(f);
        assert_eq!(read_points_ascii(&ascii).unwrap(), pts.to_vec());
        assert_eq!(read_points_binary(&bin).unwrap(), pts.to_vec());
    }
}
