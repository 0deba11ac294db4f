//! Height rasters and the two interpolation primitives used by corridor
//! extraction: nearest-cell sampling and row-wise bilinear resampling.
//!
//! Coordinates are planar metres. The raster origin is its lower-left
//! corner; row 0 is the southernmost row and cell `(r, c)` has its center
//! at `(origin_x + (c + 0.5) * cell_size, origin_y + (r + 0.5) * cell_size)`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

const DSR1_MAGIC: &[u8; 4] = b"DSR1";
const DSR1_HEADER_LEN: usize = 4 + 3 * 8 + 2 * 8;

/// A point in the raster's planar frame, in metres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub x: f64,
    pub y: f64,
}

impl GridPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// On-disk raster encodings understood by [`load_raster`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RasterFormat {
    /// Little-endian binary container with a `DSR1` magic.
    Dsr1,
    /// ESRI-style ASCII grid (`ncols`, `nrows`, `xllcorner`, ...).
    AsciiGrid,
}

impl RasterFormat {
    /// Guess the format from a file extension (`.dsr` or `.asc`).
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "dsr" => Some(RasterFormat::Dsr1),
            "asc" => Some(RasterFormat::AsciiGrid),
            _ => None,
        }
    }
}

/// What to do with no-data cells while loading.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LoadOptions {
    /// Replace non-finite or no-data cells with this height. `None` rejects them.
    pub fill: Option<f32>,
}

/// Regular grid of surface heights in metres above sea level.
///
/// Immutable once constructed; all heights are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct DsmRaster {
    origin_x: f64,
    origin_y: f64,
    cell_size: f64,
    n_rows: usize,
    n_cols: usize,
    heights: Vec<f32>,
}

impl DsmRaster {
    pub fn new(
        origin_x: f64,
        origin_y: f64,
        cell_size: f64,
        n_rows: usize,
        n_cols: usize,
        heights: Vec<f32>,
    ) -> Result<Self> {
        if n_rows < 2 || n_cols < 2 {
            return Err(Error::InvalidRaster(format!(
                "raster must be at least 2x2, got {n_rows}x{n_cols}"
            )));
        }
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::InvalidRaster(format!(
                "cell size must be positive, got {cell_size}"
            )));
        }
        if !origin_x.is_finite() || !origin_y.is_finite() {
            return Err(Error::InvalidRaster("origin must be finite".into()));
        }
        if heights.len() != n_rows * n_cols {
            return Err(Error::InvalidRaster(format!(
                "expected {} heights, got {}",
                n_rows * n_cols,
                heights.len()
            )));
        }
        if let Some(i) = heights.iter().position(|h| !h.is_finite()) {
            return Err(Error::NonFiniteHeight {
                row: i / n_cols,
                col: i % n_cols,
            });
        }
        Ok(Self {
            origin_x,
            origin_y,
            cell_size,
            n_rows,
            n_cols,
            heights,
        })
    }

    /// Build a raster by evaluating `f(row, col)` for every cell.
    pub fn from_fn(
        origin_x: f64,
        origin_y: f64,
        cell_size: f64,
        n_rows: usize,
        n_cols: usize,
        mut f: impl FnMut(usize, usize) -> f32,
    ) -> Result<Self> {
        let mut heights = Vec::with_capacity(n_rows * n_cols);
        for r in 0..n_rows {
            for c in 0..n_cols {
                heights.push(f(r, c));
            }
        }
        Self::new(origin_x, origin_y, cell_size, n_rows, n_cols, heights)
    }

    pub fn origin_x(&self) -> f64 {
        self.origin_x
    }

    pub fn origin_y(&self) -> f64 {
        self.origin_y
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn heights(&self) -> &[f32] {
        &self.heights
    }

    pub fn height(&self, row: usize, col: usize) -> f32 {
        self.heights[row * self.n_cols + col]
    }

    /// Planar coordinates of the center of cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> GridPoint {
        GridPoint::new(
            self.origin_x + (col as f64 + 0.5) * self.cell_size,
            self.origin_y + (row as f64 + 0.5) * self.cell_size,
        )
    }

    pub fn width_m(&self) -> f64 {
        self.n_cols as f64 * self.cell_size
    }

    pub fn height_m(&self) -> f64 {
        self.n_rows as f64 * self.cell_size
    }

    /// Whether `p` is inside the bounding box, edges included.
    pub fn contains(&self, p: GridPoint) -> bool {
        p.x.is_finite()
            && p.y.is_finite()
            && p.x >= self.origin_x
            && p.x <= self.origin_x + self.width_m()
            && p.y >= self.origin_y
            && p.y <= self.origin_y + self.height_m()
    }

    /// Height of the cell whose center is closest to `p`.
    ///
    /// Equidistant centers resolve to the lower row-major index. Because the
    /// grid is axis-aligned the search separates per axis.
    pub fn nearest_neighbor_sample(&self, p: GridPoint) -> Result<f32> {
        if !self.contains(p) {
            return Err(Error::OutOfBounds { x: p.x, y: p.y });
        }
        let col = nearest_index((p.x - self.origin_x) / self.cell_size, self.n_cols);
        let row = nearest_index((p.y - self.origin_y) / self.cell_size, self.n_rows);
        Ok(self.height(row, col))
    }

    /// Serialize as DSR1.
    pub fn to_dsr1_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(DSR1_HEADER_LEN + 4 * self.heights.len());
        out.extend_from_slice(DSR1_MAGIC);
        out.extend_from_slice(&self.origin_x.to_le_bytes());
        out.extend_from_slice(&self.origin_y.to_le_bytes());
        out.extend_from_slice(&self.cell_size.to_le_bytes());
        out.extend_from_slice(&(self.n_rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.n_cols as u64).to_le_bytes());
        for h in &self.heights {
            out.extend_from_slice(&h.to_le_bytes());
        }
        out
    }

    pub fn from_dsr1_bytes(bytes: &[u8], opts: LoadOptions) -> Result<Self> {
        if bytes.len() < DSR1_HEADER_LEN || &bytes[..4] != DSR1_MAGIC {
            return Err(Error::format("DSR1", "missing magic or truncated header"));
        }
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let origin_x = f64_at(4);
        let origin_y = f64_at(12);
        let cell_size = f64_at(20);
        let n_rows = usize::try_from(u64_at(28))
            .map_err(|_| Error::format("DSR1", "row count overflows usize"))?;
        let n_cols = usize::try_from(u64_at(36))
            .map_err(|_| Error::format("DSR1", "column count overflows usize"))?;
        let expected = n_rows
            .checked_mul(n_cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format("DSR1", "grid dimensions overflow"))?;
        let payload = &bytes[DSR1_HEADER_LEN..];
        if payload.len() != expected {
            return Err(Error::format(
                "DSR1",
                format!("payload is {} bytes, expected {expected}", payload.len()),
            ));
        }
        let mut heights: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        apply_fill(&mut heights, None, opts)?;
        Self::new(origin_x, origin_y, cell_size, n_rows, n_cols, heights)
    }

    pub fn save_dsr1(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_dsr1_bytes())
            .map_err(|e| Error::io(path, e))
    }

    /// Parse an ASCII grid. The first data row is the northernmost one.
    pub fn from_ascii_grid(text: &str, opts: LoadOptions) -> Result<Self> {
        let mut tokens = text.split_whitespace().peekable();
        let mut ncols = None;
        let mut nrows = None;
        let mut xll = None;
        let mut yll = None;
        let mut cellsize = None;
        let mut nodata = None;
        while let Some(tok) = tokens.peek() {
            let key = tok.to_ascii_lowercase();
            if !key.starts_with(|c: char| c.is_ascii_alphabetic()) {
                break;
            }
            tokens.next();
            let value = tokens
                .next()
                .ok_or_else(|| Error::format("ASCII grid", format!("missing value for {key}")))?;
            let num: f64 = value.parse().map_err(|_| {
                Error::format("ASCII grid", format!("bad value {value:?} for {key}"))
            })?;
            match key.as_str() {
                "ncols" => ncols = Some(num),
                "nrows" => nrows = Some(num),
                "xllcorner" => xll = Some(num),
                "yllcorner" => yll = Some(num),
                "cellsize" => cellsize = Some(num),
                "nodata_value" => nodata = Some(num),
                other => {
                    return Err(Error::format(
                        "ASCII grid",
                        format!("unknown header key {other}"),
                    ))
                }
            }
        }
        let need = |v: Option<f64>, k: &str| {
            v.ok_or_else(|| Error::format("ASCII grid", format!("missing header key {k}")))
        };
        let as_count = |v: f64, k: &str| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::format("ASCII grid", format!("{k} must be a count")))
            }
        };
        let n_cols = as_count(need(ncols, "ncols")?, "ncols")?;
        let n_rows = as_count(need(nrows, "nrows")?, "nrows")?;
        let origin_x = need(xll, "xllcorner")?;
        let origin_y = need(yll, "yllcorner")?;
        let cell_size = need(cellsize, "cellsize")?;

        let values = tokens
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::format("ASCII grid", format!("bad height {t:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != n_rows * n_cols {
            return Err(Error::format(
                "ASCII grid",
                format!("expected {} heights, found {}", n_rows * n_cols, values.len()),
            ));
        }
        let mut heights = vec![0f32; values.len()];
        for (file_row, chunk) in values.chunks_exact(n_cols.max(1)).enumerate() {
            let row = n_rows - 1 - file_row;
            for (c, v) in chunk.iter().enumerate() {
                heights[row * n_cols + c] = *v as f32;
            }
        }
        apply_fill(&mut heights, nodata.map(|v| v as f32), opts)?;
        Self::new(origin_x, origin_y, cell_size, n_rows, n_cols, heights)
    }
}

fn apply_fill(heights: &mut [f32], nodata: Option<f32>, opts: LoadOptions) -> Result<()> {
    if let Some(fill) = opts.fill {
        if !fill.is_finite() {
            return Err(Error::Config("fill value must be finite".into()));
        }
    }
    for h in heights.iter_mut() {
        let missing = !h.is_finite() || nodata.is_some_and(|nd| *h == nd);
        if missing {
            // Mark so that DsmRaster::new reports the position when unfilled.
            *h = opts.fill.unwrap_or(f32::NAN);
        }
    }
    Ok(())
}

/// Index of the nearest cell center along one axis, given the position in
/// cell units from the lower edge. Ties go to the lower index.
fn nearest_index(pos: f64, n: usize) -> usize {
    let idx = (pos - 1.0).ceil();
    idx.clamp(0.0, (n - 1) as f64) as usize
}

/// Read a raster from disk.
pub fn load_raster(path: &Path, format: RasterFormat, opts: LoadOptions) -> Result<DsmRaster> {
    match format {
        RasterFormat::Dsr1 => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            DsmRaster::from_dsr1_bytes(&bytes, opts)
        }
        RasterFormat::AsciiGrid => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            DsmRaster::from_ascii_grid(&text, opts)
        }
    }
}

/// Dense row-major 2-D array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Grid2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidGrid(format!(
                "{rows}x{cols} grid needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.rows).map(move |r| self.get(r, c))
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Resample the row axis of `grid` to `target_rows` rows by linear
/// interpolation; columns are left untouched.
///
/// Output row `r` reads source position `r * (d - 1) / (target_rows - 1)`.
pub fn bilinear_resample(grid: &Grid2, target_rows: usize) -> Result<Grid2> {
    let d = grid.rows();
    if d < 2 {
        return Err(Error::InvalidGrid(format!(
            "need at least 2 source rows, got {d}"
        )));
    }
    if grid.cols() == 0 {
        return Err(Error::InvalidGrid("grid has no columns".into()));
    }
    if target_rows < 2 {
        return Err(Error::InvalidGrid(format!(
            "need at least 2 target rows, got {target_rows}"
        )));
    }
    if grid.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("resample input".into()));
    }
    let denom = (target_rows - 1) as f64;
    let mut out = Grid2::zeros(target_rows, grid.cols());
    for r in 0..target_rows {
        let src = (r * (d - 1)) as f64 / denom;
        let i0 = (src.floor() as usize).min(d - 1);
        let t = src - i0 as f64;
        if t == 0.0 || i0 == d - 1 {
            out.row_mut(r).copy_from_slice(grid.row(i0));
            continue;
        }
        let (a, b) = (grid.row(i0), grid.row(i0 + 1));
        for ((o, &lo), &hi) in out.row_mut(r).iter_mut().zip(a).zip(b) {
            *o = lo + t * (hi - lo);
        }
    }
    Ok(out)
}
