//! ESRI ASCII grid (.asc) reader and writer.
//!
//! Header keys: ncols, nrows, xllcorner, yllcorner, cellsize,
//! NODATA_value. Data rows are row-major from north (top) to south.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, Vector2};
use thiserror::Error;

use crate::dtm::{DtmError, TerrainGrid};

#[derive(Debug, Error)]
pub enum AscError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("grid contains NODATA cells")]
    NoData,
    #[error(transparent)]
    Grid(#[from] DtmError),
}

pub fn parse_asc(text: &str) -> Result<TerrainGrid, AscError> {
    let mut tokens = text.split_whitespace();
    let mut ncols = None;
    let mut nrows = None;
    let mut xll = None;
    let mut yll = None;
    let mut cellsize = None;
    let mut nodata: Option<f64> = None;
    let mut first_value: Option<f64> = None;
    while let Some(tok) = tokens.next() {
        let key = tok.to_ascii_lowercase();
        let known = matches!(
            key.as_str(),
            "ncols" | "nrows" | "xllcorner" | "yllcorner" | "cellsize" | "nodata_value"
        );
        if !known {
            first_value = Some(
                tok.parse::<f64>()
                    .map_err(|_| AscError::Parse(format!("unexpected token '{tok}'")))?,
            );
            break;
        }
        let value = tokens
            .next()
            .ok_or_else(|| AscError::Parse(format!("missing value for '{tok}'")))?;
        let value: f64 = value
            .parse()
            .map_err(|_| AscError::Parse(format!("bad value '{value}' for '{tok}'")))?;
        match key.as_str() {
            "ncols" => ncols = Some(value as usize),
            "nrows" => nrows = Some(value as usize),
            "xllcorner" => xll = Some(value),
            "yllcorner" => yll = Some(value),
            "cellsize" => cellsize = Some(value),
            _ => nodata = Some(value),
        }
    }
    let ncols = ncols.ok_or_else(|| AscError::Parse("missing ncols".into()))?;
    let nrows = nrows.ok_or_else(|| AscError::Parse("missing nrows".into()))?;
    let cellsize = cellsize.ok_or_else(|| AscError::Parse("missing cellsize".into()))?;
    let xll = xll.unwrap_or(0.0);
    let yll = yll.unwrap_or(0.0);

    let mut values = Vec::with_capacity(nrows * ncols);
    if let Some(v) = first_value {
        values.push(v);
    }
    for tok in tokens {
        values.push(
            tok.parse::<f64>()
                .map_err(|_| AscError::Parse(format!("bad height '{tok}'")))?,
        );
    }
    if values.len() != nrows * ncols {
        return Err(AscError::Parse(format!(
            "expected {} heights, found {}",
            nrows * ncols,
            values.len()
        )));
    }
    if let Some(nd) = nodata {
        if values.iter().any(|v| *v == nd) {
            return Err(AscError::NoData);
        }
    }
    // file rows run north to south; grid rows run south to north
    let mut heights = DMatrix::zeros(nrows, ncols);
    for (file_row, chunk) in values.chunks(ncols).enumerate() {
        let grid_row = nrows - 1 - file_row;
        for (c, v) in chunk.iter().enumerate() {
            heights[(grid_row, c)] = *v;
        }
    }
    Ok(TerrainGrid::new(Vector2::new(xll, yll), cellsize, heights)?)
}

pub fn read_asc(path: &Path) -> Result<TerrainGrid, AscError> {
    parse_asc(&std::fs::read_to_string(path)?)
}

pub fn format_asc(grid: &TerrainGrid) -> String {
    let mut out = String::new();
    writeln!(out, "ncols {}", grid.cols()).unwrap();
    writeln!(out, "nrows {}", grid.rows()).unwrap();
    writeln!(out, "xllcorner {}", grid.origin().x).unwrap();
    writeln!(out, "yllcorner {}", grid.origin().y).unwrap();
    writeln!(out, "cellsize {}", grid.spacing()).unwrap();
    writeln!(out, "NODATA_value -9999").unwrap();
    for file_row in 0..grid.rows() {
        let grid_row = grid.rows() - 1 - file_row;
        let mut line = String::new();
        for c in 0..grid.cols() {
            if c > 0 {
                line.push(' ');
            }
            write!(line, "{}", grid.node_height(grid_row, c)).unwrap();
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

pub fn write_asc(path: &Path, grid: &TerrainGrid) -> Result<(), AscError> {
    std::fs::write(path, format_asc(grid))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dtm::fractal_terrain;

    #[test]
    fn round_trip_is_exact() {
        let g = fractal_terrain(17, 23, 30.0, 150.0, 11).unwrap();
        let text = format_asc(&g);
        let back = parse_asc(&text).unwrap();
        assert_eq!(g.heights(), back.heights());
        assert_eq!(g.spacing(), back.spacing());
        assert_eq!(g.origin(), back.origin());
    }

    #[test]
    fn north_to_south_row_order() {
        let text = "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 10\nNODATA_value -9999\n1 2\n3 4\n";
        let g = parse_asc(text).unwrap();
        // first file row is the northern edge (max y == grid row 1)
        assert_eq!(g.node_height(1, 0), 1.0);
        assert_eq!(g.node_height(1, 1), 2.0);
        assert_eq!(g.node_height(0, 0), 3.0);
        assert_eq!(g.node_height(0, 1), 4.0);
    }

    #[test]
    fn nodata_rejected() {
        let text = "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 10\nNODATA_value -9999\n1 -9999\n3 4\n";
        assert!(matches!(parse_asc(text), Err(AscError::NoData)));
    }

    #[test]
    fn bad_counts_rejected() {
        let text = "ncols 2\nnrows 2\ncellsize 10\n1 2 3\n";
        assert!(matches!(parse_asc(text), Err(AscError::Parse(_))));
    }
}
