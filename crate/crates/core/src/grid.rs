//! Regular orthogonal analysis grid, king adjacency and the per-cell
//! feature table.
//!
//! Row 0 is the southernmost row. Cell `(r, c)` covers the half-open square
//! `[x0 + c*s, x0 + (c+1)*s) x [y0 + r*s, y0 + (r+1)*s)`, so every point of
//! the grid extent belongs to exactly one cell.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of handcrafted features per cell.
pub const N_FEATURES: usize = 9;

/// Canonical feature names, in column order.
pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "veg_prop",
    "entropy",
    "slope",
    "profile_convexity",
    "street_nodes",
    "street_length",
    "deg_mean",
    "deg_min",
    "deg_max",
];

/// Header of the feature-table CSV.
pub const CSV_HEADER: &str =
    "row,col,zone,label,veg_prop,entropy,slope,profile_convexity,street_nodes,street_length,deg_mean,deg_min,deg_max";

pub type Features = [f64; N_FEATURES];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellId {
    pub row: usize,
    pub col: usize,
}

impl CellId {
    pub const fn new(row: usize, col: usize) -> Self {
        CellId { row, col }
    }

    /// Chebyshev distance 1.
    pub fn is_king_adjacent(self, other: CellId) -> bool {
        let dr = self.row.abs_diff(other.row);
        let dc = self.col.abs_diff(other.col);
        self != other && dr <= 1 && dc <= 1
    }
}

/// Axis-aligned rectangle, half-open on the max side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Rect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min_x && x < self.max_x && y >= self.min_y && y < self.max_y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin_x: f64,
    pub origin_y: f64,
    pub cell_size: f64,
    pub n_rows: usize,
    pub n_cols: usize,
}

impl GridSpec {
    pub const DEFAULT_CELL_SIZE: f64 = 150.0;

    pub fn new(origin_x: f64, origin_y: f64, cell_size: f64, n_rows: usize, n_cols: usize) -> Result<Self> {
        if !(cell_size > 0.0) || !cell_size.is_finite() {
            return Err(Error::InvalidGrid(format!("cell size must be positive, got {cell_size}")));
        }
        if n_rows == 0 || n_cols == 0 {
            return Err(Error::InvalidGrid(format!("grid must be non-empty, got {n_rows}x{n_cols}")));
        }
        if !origin_x.is_finite() || !origin_y.is_finite() {
            return Err(Error::InvalidGrid("origin must be finite".into()));
        }
        Ok(GridSpec {
            origin_x,
            origin_y,
            cell_size,
            n_rows,
            n_cols,
        })
    }

    /// Grid anchored at the origin with the default 150 m cells.
    pub fn with_shape(n_rows: usize, n_cols: usize) -> Result<Self> {
        Self::new(0.0, 0.0, Self::DEFAULT_CELL_SIZE, n_rows, n_cols)
    }

    pub fn n_cells(&self) -> usize {
        self.n_rows * self.n_cols
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row < self.n_rows && col < self.n_cols
    }

    fn check(&self, row: usize, col: usize) -> Result<()> {
        if self.contains(row, col) {
            Ok(())
        } else {
            Err(Error::OutOfBounds {
                row: row as i64,
                col: col as i64,
                n_rows: self.n_rows,
                n_cols: self.n_cols,
            })
        }
    }

    pub fn cell_rect(&self, row: usize, col: usize) -> Rect {
        let s = self.cell_size;
        Rect {
            min_x: self.origin_x + col as f64 * s,
            min_y: self.origin_y + row as f64 * s,
            max_x: self.origin_x + (col + 1) as f64 * s,
            max_y: self.origin_y + (row + 1) as f64 * s,
        }
    }

    pub fn extent(&self) -> Rect {
        Rect {
            min_x: self.origin_x,
            min_y: self.origin_y,
            max_x: self.origin_x + self.n_cols as f64 * self.cell_size,
            max_y: self.origin_y + self.n_rows as f64 * self.cell_size,
        }
    }

    /// Cell containing the point, if any.
    pub fn cell_at(&self, x: f64, y: f64) -> Option<CellId> {
        let fc = ((x - self.origin_x) / self.cell_size).floor();
        let fr = ((y - self.origin_y) / self.cell_size).floor();
        if !(fc >= 0.0 && fr >= 0.0) {
            return None;
        }
        let (row, col) = (fr as usize, fc as usize);
        // floor() of the quotient can land one cell off near boundaries.
        for dr in [0i64, -1, 1] {
            for dc in [0i64, -1, 1] {
                let r = row as i64 + dr;
                let c = col as i64 + dc;
                if r < 0 || c < 0 {
                    continue;
                }
                let (r, c) = (r as usize, c as usize);
                if self.contains(r, c) && self.cell_rect(r, c).contains(x, y) {
                    return Some(CellId::new(r, c));
                }
            }
        }
        None
    }
}

/// In-bounds king neighbors of `(row, col)` in row-major window order, center
/// excluded.
pub fn neighbors_king(row: usize, col: usize, grid: &GridSpec) -> Result<Vec<CellId>> {
    grid.check(row, col)?;
    let mut out = Vec::with_capacity(8);
    for dr in -1i64..=1 {
        for dc in -1i64..=1 {
            if dr == 0 && dc == 0 {
                continue;
            }
            let r = row as i64 + dr;
            let c = col as i64 + dc;
            if r >= 0 && c >= 0 && grid.contains(r as usize, c as usize) {
                out.push(CellId::new(r as usize, c as usize));
            }
        }
    }
    Ok(out)
}

/// All eight window offsets in row-major order; used where absent slots
/// matter (zero padding).
pub const WINDOW_OFFSETS: [(i64, i64); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    NonFavela,
    Favela,
}

impl Label {
    pub fn from_bit(bit: u8) -> Option<Label> {
        match bit {
            0 => Some(Label::NonFavela),
            1 => Some(Label::Favela),
            _ => None,
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Label::NonFavela => 0,
            Label::Favela => 1,
        }
    }

    pub fn is_favela(self) -> bool {
        self == Label::Favela
    }
}

pub type ZoneId = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub row: usize,
    pub col: usize,
    pub features: Features,
    pub label: Option<Label>,
    pub zone: Option<ZoneId>,
}

impl CellRecord {
    pub fn id(&self) -> CellId {
        CellId::new(self.row, self.col)
    }
}

/// Cells of one grid keyed by index. Absent cells (outside the urban mask)
/// simply have no record.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    grid: GridSpec,
    records: BTreeMap<CellId, CellRecord>,
}

impl FeatureTable {
    pub fn new(grid: GridSpec) -> Self {
        FeatureTable {
            grid,
            records: BTreeMap::new(),
        }
    }

    pub fn from_records(grid: GridSpec, records: impl IntoIterator<Item = CellRecord>) -> Result<Self> {
        let mut table = FeatureTable::new(grid);
        for rec in records {
            table.insert(rec)?;
        }
        Ok(table)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// Rejects out-of-bounds cells, duplicates and non-finite features.
    pub fn insert(&mut self, rec: CellRecord) -> Result<()> {
        self.grid.check(rec.row, rec.col)?;
        if let Some(i) = rec.features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!(
                "non-finite feature {} at ({}, {})",
                FEATURE_NAMES[i], rec.row, rec.col
            )));
        }
        let id = rec.id();
        if self.records.contains_key(&id) {
            return Err(Error::Shape(format!("duplicate cell ({}, {})", rec.row, rec.col)));
        }
        self.records.insert(id, rec);
        Ok(())
    }

    pub fn get(&self, row: usize, col: usize) -> Option<&CellRecord> {
        self.records.get(&CellId::new(row, col))
    }

    pub fn get_id(&self, id: CellId) -> Option<&CellRecord> {
        self.records.get(&id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = &CellRecord> {
        self.records.values()
    }

    /// Applies `f` to every record's features.
    pub fn map_features(&self, mut f: impl FnMut(&Features) -> Features) -> FeatureTable {
        let records = self
            .records
            .iter()
            .map(|(id, rec)| {
                let mut rec = rec.clone();
                rec.features = f(&rec.features);
                (*id, rec)
            })
            .collect();
        FeatureTable { grid: self.grid, records }
    }

    /// Sorted distinct zone ids.
    pub fn zones(&self) -> Vec<ZoneId> {
        let mut z: Vec<ZoneId> = self.iter().filter_map(|r| r.zone).collect();
        z.sort_unstable();
        z.dedup();
        z
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut line = String::with_capacity(256);
        writeln!(w, "{CSV_HEADER}")?;
        for rec in self.iter() {
            line.clear();
            write!(line, "{},{},", rec.row, rec.col).unwrap();
            if let Some(z) = rec.zone {
                write!(line, "{z}").unwrap();
            }
            line.push(',');
            if let Some(l) = rec.label {
                write!(line, "{}", l.bit()).unwrap();
            }
            for v in rec.features {
                // Display prints the shortest string that parses back to the same bits.
                write!(line, ",{v}").unwrap();
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_csv(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// (favela, non-favela, unlabeled) counts.
pub fn class_counts(table: &FeatureTable) -> (usize, usize, usize) {
    table.iter().fold((0, 0, 0), |(f, n, u), rec| match rec.label {
        Some(Label::Favela) => (f + 1, n, u),
        Some(Label::NonFavela) => (f, n + 1, u),
        None => (f, n, u + 1),
    })
}

/// Loads a feature table; the grid is inferred as the tightest
/// origin-anchored 150 m grid that holds every index.
pub fn load_feature_table(path: impl AsRef<Path>) -> Result<FeatureTable> {
    load_feature_table_with(path, None)
}

/// Loads a feature table onto a known grid, rejecting out-of-bounds rows.
pub fn load_feature_table_on(path: impl AsRef<Path>, grid: GridSpec) -> Result<FeatureTable> {
    load_feature_table_with(path, Some(grid))
}

fn load_feature_table_with(path: impl AsRef<Path>, grid: Option<GridSpec>) -> Result<FeatureTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_feature_table(std::io::BufReader::new(file), path, grid)
}

/// Parses the canonical CSV from any reader. `source` names it in errors.
pub fn read_feature_table<R: Read>(reader: R, source: &Path, grid: Option<GridSpec>) -> Result<FeatureTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let src = PathBuf::from(source);
    let mut rows = rdr.records();

    let header = match rows.next() {
        Some(h) => h.map_err(|e| Error::parse(&src, 1, e.to_string()))?,
        None => return Err(Error::parse(&src, 1, "missing header")),
    };
    let expected: Vec<&str> = CSV_HEADER.split(',').collect();
    let got: Vec<&str> = header.iter().collect();
    if got != expected {
        return Err(Error::parse(&src, 1, format!("expected header `{CSV_HEADER}`")));
    }

    let mut records: Vec<(usize, CellRecord)> = Vec::new();
    let mut seen: BTreeMap<CellId, usize> = BTreeMap::new();
    for (i, row) in rows.enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::parse(&src, line, e.to_string()))?;
        if row.len() != expected.len() {
            return Err(Error::parse(
                &src,
                line,
                format!("expected {} fields, found {}", expected.len(), row.len()),
            ));
        }
        let index = |k: usize| -> Result<usize> {
            row[k]
                .parse::<usize>()
                .map_err(|_| Error::parse(&src, line, format!("column `{}`: invalid index `{}`", expected[k], &row[k])))
        };
        let r = index(0)?;
        let c = index(1)?;
        let zone = match &row[2] {
            "" => None,
            s => Some(
                s.parse::<ZoneId>()
                    .map_err(|_| Error::parse(&src, line, format!("column `zone`: invalid zone `{s}`")))?,
            ),
        };
        let label = match &row[3] {
            "" => None,
            "0" => Some(Label::NonFavela),
            "1" => Some(Label::Favela),
            s => return Err(Error::parse(&src, line, format!("column `label`: expected 0, 1 or empty, got `{s}`"))),
        };
        let mut features = [0.0; N_FEATURES];
        for (k, slot) in features.iter_mut().enumerate() {
            let name = FEATURE_NAMES[k];
            let text = &row[4 + k];
            let v: f64 = text
                .parse()
                .map_err(|_| Error::parse(&src, line, format!("column `{name}`: invalid number `{text}`")))?;
            if !v.is_finite() {
                return Err(Error::parse(&src, line, format!("column `{name}`: non-finite value `{text}`")));
            }
            *slot = v;
        }
        let id = CellId::new(r, c);
        if let Some(prev) = seen.insert(id, line) {
            return Err(Error::parse(
                &src,
                line,
                format!("duplicate cell ({r}, {c}), first seen on line {prev}"),
            ));
        }
        records.push((
            line,
            CellRecord {
                row: r,
                col: c,
                features,
                label,
                zone,
            },
        ));
    }

    let grid = match grid {
        Some(g) => g,
        None => {
            let n_rows = records.iter().map(|(_, r)| r.row + 1).max().unwrap_or(1);
            let n_cols = records.iter().map(|(_, r)| r.col + 1).max().unwrap_or(1);
            GridSpec::with_shape(n_rows, n_cols)?
        }
    };
    let mut table = FeatureTable::new(grid);
    for (line, rec) in records {
        table.insert(rec).map_err(|e| Error::parse(&src, line, e.to_string()))?;
    }
    Ok(table)
}
