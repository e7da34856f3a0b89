//! Single- and multi-band rasters plus ESRI ASCII grid I/O.
//!
//! Pixel `(i, j)` is row `i`, column `j`; row 0 is the southernmost row, so
//! the pixel center sits at `origin + (j + 0.5, i + 0.5) * pixel_size`. ESRI
//! files list rows north to south and are flipped on read and write.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::Rect;

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixel_size: f64,
    pub origin_x: f64,
    pub origin_y: f64,
    values: Vec<f64>,
    pub nodata: Option<f64>,
}

impl Raster {
    /// `values` are row-major with row 0 southernmost.
    pub fn new(
        width: usize,
        height: usize,
        pixel_size: f64,
        origin_x: f64,
        origin_y: f64,
        values: Vec<f64>,
        nodata: Option<f64>,
    ) -> Result<Self> {
        if !(pixel_size > 0.0) || !pixel_size.is_finite() {
            return Err(Error::Shape(format!("pixel size must be positive, got {pixel_size}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Shape("raster must have at least one pixel".into()));
        }
        if values.len() != width * height {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height} raster",
                values.len()
            )));
        }
        Ok(Raster {
            width,
            height,
            pixel_size,
            origin_x,
            origin_y,
            values,
            nodata,
        })
    }

    /// Raster filled by evaluating `f(x, y)` at every pixel center.
    pub fn from_fn(
        width: usize,
        height: usize,
        pixel_size: f64,
        origin_x: f64,
        origin_y: f64,
        mut f: impl FnMut(f64, f64) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(width * height);
        for i in 0..height {
            for j in 0..width {
                let x = origin_x + (j as f64 + 0.5) * pixel_size;
                let y = origin_y + (i as f64 + 0.5) * pixel_size;
                values.push(f(x, y));
            }
        }
        Raster::new(width, height, pixel_size, origin_x, origin_y, values, None)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    /// Value at `(i, j)` unless it is nodata or non-finite.
    pub fn valid(&self, i: usize, j: usize) -> Option<f64> {
        let v = self.get(i, j);
        if self.is_nodata(v) {
            None
        } else {
            Some(v)
        }
    }

    pub fn is_nodata(&self, v: f64) -> bool {
        !v.is_finite() || self.nodata == Some(v)
    }

    /// Marker written for undefined pixels.
    pub fn nodata_value(&self) -> f64 {
        self.nodata.unwrap_or(f64::NAN)
    }

    pub fn center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.origin_x + (j as f64 + 0.5) * self.pixel_size,
            self.origin_y + (i as f64 + 0.5) * self.pixel_size,
        )
    }

    pub fn extent(&self) -> Rect {
        Rect {
            min_x: self.origin_x,
            min_y: self.origin_y,
            max_x: self.origin_x + self.width as f64 * self.pixel_size,
            max_y: self.origin_y + self.height as f64 * self.pixel_size,
        }
    }

    pub fn same_geometry(&self, other: &Raster) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.pixel_size == other.pixel_size
            && self.origin_x == other.origin_x
            && self.origin_y == other.origin_y
    }

    /// Pixels whose centers fall inside the half-open rectangle, row-major.
    pub fn pixels_in(&self, rect: &Rect) -> impl Iterator<Item = (usize, usize)> + '_ {
        let p = self.pixel_size;
        // Candidate index ranges padded by one pixel, then filtered exactly.
        let j0 = (((rect.min_x - self.origin_x) / p - 0.5).floor() as i64).max(0) as usize;
        let j1 = ((((rect.max_x - self.origin_x) / p - 0.5).ceil() as i64) + 1).clamp(0, self.width as i64) as usize;
        let i0 = (((rect.min_y - self.origin_y) / p - 0.5).floor() as i64).max(0) as usize;
        let i1 = ((((rect.max_y - self.origin_y) / p - 0.5).ceil() as i64) + 1).clamp(0, self.height as i64) as usize;
        let rect = *rect;
        (i0..i1.max(i0))
            .flat_map(move |i| (j0..j1.max(j0)).map(move |j| (i, j)))
            .filter(move |&(i, j)| {
                let (x, y) = self.center(i, j);
                rect.contains(x, y)
            })
    }

    /// Min and max over valid pixels.
    pub fn value_range(&self) -> Option<(f64, f64)> {
        self.values
            .iter()
            .filter(|v| !self.is_nodata(**v))
            .fold(None, |acc, &v| match acc {
                None => Some((v, v)),
                Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
            })
    }

    pub fn map_pixels(&self, values: Vec<f64>, nodata: Option<f64>) -> Result<Raster> {
        Raster::new(
            self.width,
            self.height,
            self.pixel_size,
            self.origin_x,
            self.origin_y,
            values,
            nodata,
        )
    }
}

/// Bands sharing one geometry, in manifest order.
#[derive(Debug, Clone)]
pub struct MultibandRaster {
    names: Vec<String>,
    bands: Vec<Raster>,
}

impl MultibandRaster {
    pub fn new(names: Vec<String>, bands: Vec<Raster>) -> Result<Self> {
        if bands.is_empty() {
            return Err(Error::Shape("multiband raster needs at least one band".into()));
        }
        if names.len() != bands.len() {
            return Err(Error::Shape("one name per band required".into()));
        }
        if let Some(k) = bands.iter().position(|b| !b.same_geometry(&bands[0])) {
            return Err(Error::Shape(format!(
                "band `{}` does not share the geometry of band `{}`",
                names[k], names[0]
            )));
        }
        Ok(MultibandRaster { names, bands })
    }

    pub fn bands(&self) -> &[Raster] {
        &self.bands
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn band(&self, name: &str) -> Option<&Raster> {
        self.names.iter().position(|n| n == name).map(|k| &self.bands[k])
    }

    pub fn len(&self) -> usize {
        self.bands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bands.is_empty()
    }
}

pub fn read_ascii_grid(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_ascii_grid(std::io::BufReader::new(file), path)
}

/// Parses an ESRI ASCII grid. Accepts `xllcenter`/`yllcenter` as well as
/// the corner form; `NODATA_value` is optional.
pub fn parse_ascii_grid<R: BufRead>(reader: R, source: &Path) -> Result<Raster> {
    let src = PathBuf::from(source);
    let mut ncols = None;
    let mut nrows = None;
    let mut xll = None;
    let mut yll = None;
    let mut centered = (false, false);
    let mut cellsize = None;
    let mut nodata = None;
    let mut values: Vec<f64> = Vec::new();
    let mut in_header = true;

    for (k, line) in reader.lines().enumerate() {
        let lineno = k + 1;
        let line = line.map_err(|e| Error::io(&src, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let first = trimmed.split_whitespace().next().unwrap_or("");
        if in_header && first.chars().next().is_some_and(|c| c.is_ascii_alphabetic()) {
            let mut parts = trimmed.split_whitespace();
            let key = parts.next().unwrap().to_ascii_lowercase();
            let val = parts
                .next()
                .ok_or_else(|| Error::parse(&src, lineno, format!("header `{key}` has no value")))?;
            let num = |v: &str| -> Result<f64> {
                v.parse::<f64>()
                    .map_err(|_| Error::parse(&src, lineno, format!("header `{key}`: invalid number `{v}`")))
            };
            let count = |v: &str| -> Result<usize> {
                v.parse::<usize>()
                    .map_err(|_| Error::parse(&src, lineno, format!("header `{key}`: invalid count `{v}`")))
            };
            match key.as_str() {
                "ncols" => ncols = Some(count(val)?),
                "nrows" => nrows = Some(count(val)?),
                "xllcorner" => xll = Some(num(val)?),
                "yllcorner" => yll = Some(num(val)?),
                "xllcenter" => {
                    xll = Some(num(val)?);
                    centered.0 = true;
                }
                "yllcenter" => {
                    yll = Some(num(val)?);
                    centered.1 = true;
                }
                "cellsize" => cellsize = Some(num(val)?),
                "nodata_value" => nodata = Some(num(val)?),
                _ => return Err(Error::parse(&src, lineno, format!("unknown header key `{key}`"))),
            }
            continue;
        }
        in_header = false;
        for tok in trimmed.split_whitespace() {
            let v = tok
                .parse::<f64>()
                .map_err(|_| Error::parse(&src, lineno, format!("invalid value `{tok}`")))?;
            values.push(v);
        }
    }

    let missing = |name: &str| Error::parse(&src, 0, format!("missing header `{name}`"));
    let width = ncols.ok_or_else(|| missing("ncols"))?;
    let height = nrows.ok_or_else(|| missing("nrows"))?;
    let size = cellsize.ok_or_else(|| missing("cellsize"))?;
    let mut x0 = xll.ok_or_else(|| missing("xllcorner"))?;
    let mut y0 = yll.ok_or_else(|| missing("yllcorner"))?;
    if centered.0 {
        x0 -= 0.5 * size;
    }
    if centered.1 {
        y0 -= 0.5 * size;
    }
    if values.len() != width * height {
        return Err(Error::parse(
            &src,
            0,
            format!("expected {} values, found {}", width * height, values.len()),
        ));
    }
    // File rows run north to south.
    let mut flipped = Vec::with_capacity(values.len());
    for i in (0..height).rev() {
        flipped.extend_from_slice(&values[i * width..(i + 1) * width]);
    }
    Raster::new(width, height, size, x0, y0, flipped, nodata)
}

pub fn write_ascii_grid<W: Write>(raster: &Raster, mut w: W) -> std::io::Result<()> {
    writeln!(w, "ncols {}", raster.width)?;
    writeln!(w, "nrows {}", raster.height)?;
    writeln!(w, "xllcorner {}", raster.origin_x)?;
    writeln!(w, "yllcorner {}", raster.origin_y)?;
    writeln!(w, "cellsize {}", raster.pixel_size)?;
    let nodata = raster.nodata.unwrap_or(-9999.0);
    writeln!(w, "NODATA_value {nodata}")?;
    for i in (0..raster.height).rev() {
        let row: Vec<String> = (0..raster.width)
            .map(|j| {
                let v = raster.get(i, j);
                if raster.is_nodata(v) {
                    nodata.to_string()
                } else {
                    v.to_string()
                }
            })
            .collect();
        writeln!(w, "{}", row.join(" "))?;
    }
    Ok(())
}

pub fn save_ascii_grid(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_ascii_grid(raster, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a band manifest: one `name path` pair per line, paths relative to
/// the manifest. Blank lines and `#` comments are skipped.
pub fn read_band_manifest(path: impl AsRef<Path>) -> Result<MultibandRaster> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut names = Vec::new();
    let mut bands = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let name = parts.next().unwrap();
        let file = parts
            .next()
            .ok_or_else(|| Error::parse(path, k + 1, format!("band `{name}` has no file")))?;
        if names.iter().any(|n| n == name) {
            return Err(Error::parse(path, k + 1, format!("band `{name}` listed twice")));
        }
        bands.push(read_ascii_grid(base.join(file))?);
        names.push(name.to_string());
    }
    MultibandRaster::new(names, bands)
}
