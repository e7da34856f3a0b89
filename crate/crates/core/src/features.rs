//! The nine handcrafted cell features: vegetation proportion and spectral
//! entropy from the multispectral image, slope and profile convexity from
//! the DEM, and five street-network statistics.

use std::collections::HashMap;

use log::warn;

use crate::error::{Error, Result};
use crate::grid::{CellId, CellRecord, FeatureTable, Features, GridSpec, Label, Rect, ZoneId, N_FEATURES};
use crate::raster::{MultibandRaster, Raster};
use crate::streets::{street_features, StreetNetwork};

/// NDVI at or above this value marks a vegetated pixel.
pub const VEGETATION_NDVI: f64 = 0.6;

/// Histogram bins per band for the entropy feature.
pub const ENTROPY_BINS: usize = 256;

pub fn ndvi(red: &Raster, nir: &Raster) -> Result<Raster> {
    if !red.same_geometry(nir) {
        return Err(Error::Shape("red and NIR bands have different geometry".into()));
    }
    let nodata = -9999.0;
    let values = red
        .values()
        .iter()
        .zip(nir.values())
        .map(|(&r, &n)| {
            if red.is_nodata(r) || nir.is_nodata(n) || n + r == 0.0 {
                nodata
            } else {
                (n - r) / (n + r)
            }
        })
        .collect();
    red.map_pixels(values, Some(nodata))
}

fn undefined(cell: CellId, reason: impl Into<String>) -> Error {
    Error::FeatureUndefined {
        row: cell.row,
        col: cell.col,
        reason: reason.into(),
    }
}

/// Share of valid in-cell NDVI pixels with NDVI >= 0.6.
pub fn vegetation_proportion(cell: CellId, rect: &Rect, ndvi: &Raster) -> Result<f64> {
    let mut valid = 0usize;
    let mut veg = 0usize;
    for (i, j) in ndvi.pixels_in(rect) {
        if let Some(v) = ndvi.valid(i, j) {
            valid += 1;
            if v >= VEGETATION_NDVI {
                veg += 1;
            }
        }
    }
    if valid == 0 {
        return Err(undefined(cell, "no valid NDVI pixel"));
    }
    Ok(veg as f64 / valid as f64)
}

/// Normalized Shannon entropy of one band's in-cell values over 256 bins
/// spanning `range`. A degenerate range yields 0.
pub fn band_entropy(cell: CellId, rect: &Rect, band: &Raster, range: Option<(f64, f64)>) -> Result<f64> {
    let mut hist = [0usize; ENTROPY_BINS];
    let mut n = 0usize;
    let (lo, hi) = range.unwrap_or((0.0, 0.0));
    let width = hi - lo;
    for (i, j) in band.pixels_in(rect) {
        if let Some(v) = band.valid(i, j) {
            n += 1;
            if width > 0.0 {
                let b = ((v - lo) / width * ENTROPY_BINS as f64).floor();
                let b = (b.max(0.0) as usize).min(ENTROPY_BINS - 1);
                hist[b] += 1;
            }
        }
    }
    if n == 0 {
        return Err(undefined(cell, "band has no valid pixel"));
    }
    if !(width > 0.0) {
        return Ok(0.0);
    }
    let total = n as f64;
    let h: f64 = hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum();
    Ok(h / (ENTROPY_BINS as f64).log2())
}

/// Mean of [`band_entropy`] over all bands, each binned over its own
/// global range.
pub fn cell_entropy(cell: CellId, rect: &Rect, image: &MultibandRaster) -> Result<f64> {
    let ranges: Vec<_> = image.bands().iter().map(Raster::value_range).collect();
    cell_entropy_with_ranges(cell, rect, image, &ranges)
}

fn cell_entropy_with_ranges(
    cell: CellId,
    rect: &Rect,
    image: &MultibandRaster,
    ranges: &[Option<(f64, f64)>],
) -> Result<f64> {
    let mut sum = 0.0;
    for (band, range) in image.bands().iter().zip(ranges) {
        sum += band_entropy(cell, rect, band, *range)?;
    }
    Ok(sum / image.len() as f64)
}

/// 3x3 elevation window around `(i, j)` as `z[dy + 1][dx + 1]`, x east and
/// y north. Out-of-raster or nodata neighbors take the nearest in-raster
/// value, falling back to the center.
pub fn window(dem: &Raster, i: usize, j: usize) -> Option<[[f64; 3]; 3]> {
    let center = dem.valid(i, j)?;
    let mut w = [[center; 3]; 3];
    for (ry, row) in w.iter_mut().enumerate() {
        for (rx, slot) in row.iter_mut().enumerate() {
            let ii = (i as i64 + ry as i64 - 1).clamp(0, dem.height as i64 - 1) as usize;
            let jj = (j as i64 + rx as i64 - 1).clamp(0, dem.width as i64 - 1) as usize;
            *slot = dem.valid(ii, jj).unwrap_or(center);
        }
    }
    Some(w)
}

/// Horn's weighted gradient `(dz/dx, dz/dy)` of a window.
pub fn horn_gradient(z: &[[f64; 3]; 3], pixel_size: f64) -> (f64, f64) {
    let east = z[2][2] + 2.0 * z[1][2] + z[0][2];
    let west = z[2][0] + 2.0 * z[1][0] + z[0][0];
    let north = z[2][0] + 2.0 * z[2][1] + z[2][2];
    let south = z[0][0] + 2.0 * z[0][1] + z[0][2];
    ((east - west) / (8.0 * pixel_size), (north - south) / (8.0 * pixel_size))
}

/// Slope in degrees of one window.
pub fn horn_slope(z: &[[f64; 3]; 3], pixel_size: f64) -> f64 {
    let (gx, gy) = horn_gradient(z, pixel_size);
    (gx * gx + gy * gy).sqrt().atan().to_degrees()
}

/// Zevenbergen–Thorne profile curvature of one window from central
/// differences; 0 where the gradient vanishes.
pub fn zt_profile_curvature(z: &[[f64; 3]; 3], pixel_size: f64) -> f64 {
    let l = pixel_size;
    let d = (z[1][2] - z[1][0]) / (2.0 * l);
    let e = (z[2][1] - z[0][1]) / (2.0 * l);
    let r = (z[1][2] - 2.0 * z[1][1] + z[1][0]) / (l * l);
    let t = (z[2][1] - 2.0 * z[1][1] + z[0][1]) / (l * l);
    let s = (z[2][2] - z[2][0] - z[0][2] + z[0][0]) / (4.0 * l * l);
    let g2 = d * d + e * e;
    if g2 == 0.0 {
        return 0.0;
    }
    -2.0 * (r * d * d + t * e * e + 2.0 * s * d * e) / (g2 * (1.0 + g2))
}

fn mean_over_cell(cell: CellId, rect: &Rect, dem: &Raster, f: impl Fn(&[[f64; 3]; 3], f64) -> f64) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, j) in dem.pixels_in(rect) {
        if let Some(w) = window(dem, i, j) {
            sum += f(&w, dem.pixel_size);
            n += 1;
        }
    }
    if n == 0 {
        return Err(undefined(cell, "no valid DEM pixel"));
    }
    Ok(sum / n as f64)
}

/// Mean Horn slope (degrees) over in-cell pixels.
pub fn slope(cell: CellId, rect: &Rect, dem: &Raster) -> Result<f64> {
    mean_over_cell(cell, rect, dem, horn_slope)
}

/// Mean profile curvature over in-cell pixels.
pub fn profile_convexity(cell: CellId, rect: &Rect, dem: &Raster) -> Result<f64> {
    mean_over_cell(cell, rect, dem, zt_profile_curvature)
}

/// Which manifest bands feed NDVI.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BandRoles {
    pub red: String,
    pub nir: String,
}

impl Default for BandRoles {
    fn default() -> Self {
        BandRoles {
            red: "B04".into(),
            nir: "B08".into(),
        }
    }
}

/// Optional zone and label to attach to a materialized cell.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CellMeta {
    pub zone: Option<ZoneId>,
    pub label: Option<Label>,
}

pub struct FeatureInputs<'a> {
    pub image: &'a MultibandRaster,
    pub roles: &'a BandRoles,
    pub dem: &'a Raster,
    pub streets: &'a StreetNetwork,
    pub grid: GridSpec,
    /// Cells to materialize; `None` means every grid cell.
    pub mask: Option<&'a dyn Fn(CellId) -> bool>,
    pub meta: Option<&'a HashMap<CellId, CellMeta>>,
}

/// A masked cell that was left out because a feature was undefined.
#[derive(Debug, Clone, PartialEq)]
pub struct OmittedCell {
    pub cell: CellId,
    pub reason: String,
}

fn covers(outer: &Rect, inner: &Rect) -> bool {
    let tol = 1e-9 * (1.0 + inner.max_x.abs().max(inner.max_y.abs()));
    outer.min_x <= inner.min_x + tol
        && outer.min_y <= inner.min_y + tol
        && outer.max_x >= inner.max_x - tol
        && outer.max_y >= inner.max_y - tol
}

/// Features of a single cell in canonical order.
pub fn cell_features(
    cell: CellId,
    rect: &Rect,
    ndvi: &Raster,
    image: &MultibandRaster,
    ranges: &[Option<(f64, f64)>],
    dem: &Raster,
    streets: &StreetNetwork,
) -> Result<Features> {
    let st = street_features(rect, streets);
    let f: Features = [
        vegetation_proportion(cell, rect, ndvi)?,
        cell_entropy_with_ranges(cell, rect, image, ranges)?,
        slope(cell, rect, dem)?,
        profile_convexity(cell, rect, dem)?,
        st.node_count,
        st.total_length,
        st.deg_mean,
        st.deg_min,
        st.deg_max,
    ];
    debug_assert_eq!(f.len(), N_FEATURES);
    Ok(f)
}

/// Builds the feature table for every masked cell. Cells with an undefined
/// feature are omitted, logged and returned alongside the table.
pub fn build_feature_table(inputs: &FeatureInputs<'_>) -> Result<(FeatureTable, Vec<OmittedCell>)> {
    let grid = inputs.grid;
    let extent = grid.extent();
    let red = inputs
        .image
        .band(&inputs.roles.red)
        .ok_or_else(|| Error::Config(format!("band `{}` not in manifest", inputs.roles.red)))?;
    let nir = inputs
        .image
        .band(&inputs.roles.nir)
        .ok_or_else(|| Error::Config(format!("band `{}` not in manifest", inputs.roles.nir)))?;
    if !covers(&inputs.image.bands()[0].extent(), &extent) {
        return Err(Error::Extent("multispectral image".into()));
    }
    if !covers(&inputs.dem.extent(), &extent) {
        return Err(Error::Extent("DEM".into()));
    }
    let ndvi = ndvi(red, nir)?;
    let ranges: Vec<_> = inputs.image.bands().iter().map(Raster::value_range).collect();

    let mut table = FeatureTable::new(grid);
    let mut omitted = Vec::new();
    for row in 0..grid.n_rows {
        for col in 0..grid.n_cols {
            let cell = CellId::new(row, col);
            if let Some(mask) = inputs.mask {
                if !mask(cell) {
                    continue;
                }
            }
            let rect = grid.cell_rect(row, col);
            match cell_features(cell, &rect, &ndvi, inputs.image, &ranges, inputs.dem, inputs.streets) {
                Ok(features) => {
                    let meta = inputs.meta.and_then(|m| m.get(&cell)).copied().unwrap_or_default();
                    table.insert(CellRecord {
                        row,
                        col,
                        features,
                        label: meta.label,
                        zone: meta.zone,
                    })?;
                }
                Err(Error::FeatureUndefined { reason, .. }) => {
                    warn!("cell ({row}, {col}) omitted: {reason}");
                    omitted.push(OmittedCell { cell, reason });
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok((table, omitted))
}
