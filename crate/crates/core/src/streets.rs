//! Street network, segment clipping and per-cell street statistics.

use std::collections::HashMap;
use std::path::Path;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Rect;

/// Coordinate tolerance (meters) when matching polyline ends to nodes.
const ENDPOINT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreetNode {
    pub id: u64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreetSegment {
    pub node_a: u64,
    pub node_b: u64,
    pub polyline: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Default)]
pub struct StreetNetwork {
    nodes: Vec<StreetNode>,
    segments: Vec<StreetSegment>,
    degree: HashMap<u64, usize>,
}

impl StreetNetwork {
    /// Validates id uniqueness and that every polyline starts at `node_a`
    /// and ends at `node_b`.
    pub fn new(nodes: Vec<StreetNode>, segments: Vec<StreetSegment>) -> Result<Self> {
        let mut by_id: HashMap<u64, (f64, f64)> = HashMap::with_capacity(nodes.len());
        for n in &nodes {
            if by_id.insert(n.id, (n.x, n.y)).is_some() {
                return Err(Error::Shape(format!("duplicate street node id {}", n.id)));
            }
        }
        let mut degree: HashMap<u64, usize> = HashMap::with_capacity(nodes.len());
        for (k, seg) in segments.iter().enumerate() {
            if seg.polyline.len() < 2 {
                return Err(Error::Shape(format!("segment {k} has fewer than 2 points")));
            }
            for (end, id) in [(seg.polyline[0], seg.node_a), (*seg.polyline.last().unwrap(), seg.node_b)] {
                let &(x, y) = by_id
                    .get(&id)
                    .ok_or_else(|| Error::Shape(format!("segment {k} references unknown node {id}")))?;
                if (end.0 - x).abs() > ENDPOINT_TOLERANCE || (end.1 - y).abs() > ENDPOINT_TOLERANCE {
                    return Err(Error::Shape(format!(
                        "segment {k} endpoint ({}, {}) does not match node {id} at ({x}, {y})",
                        end.0, end.1
                    )));
                }
            }
            *degree.entry(seg.node_a).or_default() += 1;
            *degree.entry(seg.node_b).or_default() += 1;
        }
        Ok(StreetNetwork {
            nodes,
            segments,
            degree,
        })
    }

    pub fn nodes(&self) -> &[StreetNode] {
        &self.nodes
    }

    pub fn segments(&self) -> &[StreetSegment] {
        &self.segments
    }

    /// Segments incident to the node anywhere in the network. A loop counts twice.
    pub fn degree(&self, id: u64) -> usize {
        self.degree.get(&id).copied().unwrap_or(0)
    }

    /// Reads `id,x,y` nodes and `node_a,node_b,wkt_linestring` segments.
    pub fn load(nodes_path: impl AsRef<Path>, segments_path: impl AsRef<Path>) -> Result<Self> {
        let nodes = read_nodes(nodes_path.as_ref())?;
        let segments = read_segments(segments_path.as_ref())?;
        StreetNetwork::new(nodes, segments)
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path, 1, e.to_string()))
}

fn check_header(path: &Path, rdr: &mut csv::Reader<std::fs::File>, expected: &[&str]) -> Result<()> {
    let header = rdr.headers().map_err(|e| Error::parse(path, 1, e.to_string()))?;
    let got: Vec<&str> = header.iter().collect();
    if got != expected {
        return Err(Error::parse(path, 1, format!("expected header `{}`", expected.join(","))));
    }
    Ok(())
}

fn read_nodes(path: &Path) -> Result<Vec<StreetNode>> {
    let mut rdr = csv_reader(path)?;
    check_header(path, &mut rdr, &["id", "x", "y"])?;
    let mut out = Vec::new();
    for (k, row) in rdr.records().enumerate() {
        let line = k + 2;
        let row = row.map_err(|e| Error::parse(path, line, e.to_string()))?;
        if row.len() != 3 {
            return Err(Error::parse(path, line, "expected 3 fields"));
        }
        let id = row[0]
            .parse()
            .map_err(|_| Error::parse(path, line, format!("invalid node id `{}`", &row[0])))?;
        let coord = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(path, line, format!("invalid coordinate `{s}`")))
        };
        out.push(StreetNode {
            id,
            x: coord(&row[1])?,
            y: coord(&row[2])?,
        });
    }
    Ok(out)
}

fn read_segments(path: &Path) -> Result<Vec<StreetSegment>> {
    let mut rdr = csv_reader(path)?;
    check_header(path, &mut rdr, &["node_a", "node_b", "wkt_linestring"])?;
    let mut out = Vec::new();
    for (k, row) in rdr.records().enumerate() {
        let line = k + 2;
        let row = row.map_err(|e| Error::parse(path, line, e.to_string()))?;
        if row.len() != 3 {
            return Err(Error::parse(path, line, "expected 3 fields"));
        }
        let id = |s: &str| -> Result<u64> {
            s.parse()
                .map_err(|_| Error::parse(path, line, format!("invalid node id `{s}`")))
        };
        let polyline = parse_wkt_linestring(&row[2]).map_err(|m| Error::parse(path, line, m))?;
        out.push(StreetSegment {
            node_a: id(&row[0])?,
            node_b: id(&row[1])?,
            polyline,
        });
    }
    Ok(out)
}

/// Parses `LINESTRING (x y, x y, ...)`.
pub fn parse_wkt_linestring(text: &str) -> std::result::Result<Vec<(f64, f64)>, String> {
    let t = text.trim();
    let upper = t.to_ascii_uppercase();
    let rest = upper
        .strip_prefix("LINESTRING")
        .ok_or_else(|| format!("expected LINESTRING, got `{t}`"))?;
    let offset = t.len() - rest.len();
    let body = t[offset..].trim();
    let inner = body
        .strip_prefix('(')
        .and_then(|b| b.strip_suffix(')'))
        .ok_or_else(|| "LINESTRING coordinates must be parenthesized".to_string())?;
    let mut pts = Vec::new();
    for pair in inner.split(',') {
        let mut it = pair.split_whitespace();
        let (Some(xs), Some(ys), None) = (it.next(), it.next(), it.next()) else {
            return Err(format!("bad coordinate pair `{}`", pair.trim()));
        };
        let x: f64 = xs.parse().map_err(|_| format!("bad x `{xs}`"))?;
        let y: f64 = ys.parse().map_err(|_| format!("bad y `{ys}`"))?;
        if !x.is_finite() || !y.is_finite() {
            return Err("non-finite coordinate".into());
        }
        pts.push((x, y));
    }
    if pts.len() < 2 {
        return Err("LINESTRING needs at least 2 points".into());
    }
    Ok(pts)
}

/// Length of segment `[p1, p2]` inside the half-open rectangle
/// `[min_x, max_x) x [min_y, max_y)`, by Liang–Barsky parameter clipping.
///
/// A segment lying exactly on the min edge counts; one on the max edge does
/// not, so adjacent cells never both claim it.
pub fn clip_segment_length<T: Float>(p1: (T, T), p2: (T, T), rect: (T, T, T, T)) -> T {
    let (min_x, min_y, max_x, max_y) = rect;
    let dx = p2.0 - p1.0;
    let dy = p2.1 - p1.1;
    let mut t0 = T::zero();
    let mut t1 = T::one();

    // (p, q) pairs: left, right, bottom, top.
    let edges = [
        (-dx, p1.0 - min_x, false),
        (dx, max_x - p1.0, true),
        (-dy, p1.1 - min_y, false),
        (dy, max_y - p1.1, true),
    ];
    for (p, q, open) in edges {
        if p == T::zero() {
            // Parallel to this edge: inside iff q >= 0 (closed) or q > 0 (open side).
            if q < T::zero() || (open && q == T::zero()) {
                return T::zero();
            }
            continue;
        }
        let r = q / p;
        if p < T::zero() {
            if r > t1 {
                return T::zero();
            }
            if r > t0 {
                t0 = r;
            }
        } else {
            if r < t0 {
                return T::zero();
            }
            if r < t1 {
                t1 = r;
            }
        }
    }
    if t1 <= t0 {
        return T::zero();
    }
    (t1 - t0) * (dx * dx + dy * dy).sqrt()
}

fn rect_tuple(r: &Rect) -> (f64, f64, f64, f64) {
    (r.min_x, r.min_y, r.max_x, r.max_y)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StreetStats {
    pub node_count: f64,
    pub total_length: f64,
    pub deg_mean: f64,
    pub deg_min: f64,
    pub deg_max: f64,
}

/// Street statistics of one cell. Degrees are taken in the full network.
pub fn street_features(cell: &Rect, net: &StreetNetwork) -> StreetStats {
    let mut count = 0usize;
    let mut sum = 0usize;
    let mut min = usize::MAX;
    let mut max = 0usize;
    for n in net.nodes() {
        if cell.contains(n.x, n.y) {
            let d = net.degree(n.id);
            count += 1;
            sum += d;
            min = min.min(d);
            max = max.max(d);
        }
    }
    let rect = rect_tuple(cell);
    let total_length = net
        .segments()
        .iter()
        .flat_map(|s| s.polyline.windows(2))
        .map(|w| clip_segment_length(w[0], w[1], rect))
        .sum();
    if count == 0 {
        return StreetStats {
            total_length,
            ..StreetStats::default()
        };
    }
    StreetStats {
        node_count: count as f64,
        total_length,
        deg_mean: sum as f64 / count as f64,
        deg_min: min as f64,
        deg_max: max as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CELL: (f64, f64, f64, f64) = (0.0, 0.0, 150.0, 150.0);

    #[test]
    fn clip_cases() {
        assert_eq!(clip_segment_length((10.0, 10.0), (40.0, 50.0), CELL), 50.0);
        assert_eq!(clip_segment_length((-10.0, 75.0), (160.0, 75.0), CELL), 150.0);
        assert_eq!(clip_segment_length((200.0, 0.0), (300.0, 50.0), CELL), 0.0);
        assert_eq!(clip_segment_length((-50.0, -50.0), (-1.0, 400.0), CELL), 0.0);
    }

    #[test]
    fn clip_half_open_edges() {
        // On the min edge: counted. On the max edge: not.
        assert_eq!(clip_segment_length((0.0, 10.0), (0.0, 20.0), CELL), 10.0);
        assert_eq!(clip_segment_length((150.0, 10.0), (150.0, 20.0), CELL), 0.0);
        assert_eq!(clip_segment_length((10.0, 150.0), (20.0, 150.0), CELL), 0.0);
    }

    #[test]
    fn clip_diagonal() {
        let l = clip_segment_length((-75.0, -75.0), (225.0, 225.0), CELL);
        assert!((l - 150.0 * 2f64.sqrt()).abs() < 1e-12);
        let l32 = clip_segment_length((-75.0f32, -75.0), (225.0, 225.0), (0.0, 0.0, 150.0, 150.0));
        assert!((l32 - 212.132_03).abs() < 1e-3);
    }

    fn net() -> StreetNetwork {
        let nodes = vec![
            StreetNode { id: 1, x: 10.0, y: 10.0 },
            StreetNode { id: 2, x: 100.0, y: 10.0 },
            StreetNode { id: 3, x: 200.0, y: 10.0 },
            StreetNode { id: 4, x: 100.0, y: 200.0 },
            StreetNode { id: 5, x: 10.0, y: 100.0 },
        ];
        let seg = |a, b, pts: Vec<(f64, f64)>| StreetSegment {
            node_a: a,
            node_b: b,
            polyline: pts,
        };
        let segments = vec![
            seg(1, 2, vec![(10.0, 10.0), (100.0, 10.0)]),
            seg(2, 3, vec![(100.0, 10.0), (200.0, 10.0)]),
            seg(2, 4, vec![(100.0, 10.0), (100.0, 200.0)]),
            seg(2, 5, vec![(100.0, 10.0), (50.0, 50.0), (10.0, 100.0)]),
            seg(1, 5, vec![(10.0, 10.0), (10.0, 100.0)]),
        ];
        StreetNetwork::new(nodes, segments).unwrap()
    }

    #[test]
    fn degrees_use_full_network() {
        let n = net();
        assert_eq!(n.degree(2), 4);
        assert_eq!(n.degree(1), 2);
        assert_eq!(n.degree(3), 1);
        assert_eq!(n.degree(99), 0);
    }

    #[test]
    fn stats_for_cells() {
        let n = net();
        let cell = Rect {
            min_x: 0.0,
            min_y: 0.0,
            max_x: 150.0,
            max_y: 150.0,
        };
        let s = street_features(&cell, &n);
        assert_eq!(s.node_count, 3.0);
        assert_eq!(s.deg_min, 2.0);
        assert_eq!(s.deg_max, 4.0);
        assert!((s.deg_mean - 8.0 / 3.0).abs() < 1e-12);
        let diag = (50f64 * 50.0 + 40.0 * 40.0).sqrt() + (40f64 * 40.0 + 50.0 * 50.0).sqrt();
        let expected = 90.0 + 50.0 + 140.0 + diag + 90.0;
        assert!((s.total_length - expected).abs() < 1e-9, "{}", s.total_length);

        let empty = Rect {
            min_x: 1000.0,
            min_y: 1000.0,
            max_x: 1150.0,
            max_y: 1150.0,
        };
        assert_eq!(street_features(&empty, &n), StreetStats::default());
    }

    #[test]
    fn single_node_degree_three() {
        let nodes = vec![
            StreetNode { id: 0, x: 75.0, y: 75.0 },
            StreetNode { id: 1, x: 300.0, y: 75.0 },
            StreetNode { id: 2, x: 75.0, y: 300.0 },
            StreetNode { id: 3, x: -300.0, y: 75.0 },
        ];
        let segments = (1..=3)
            .map(|k| StreetSegment {
                node_a: 0,
                node_b: k,
                polyline: vec![(75.0, 75.0), (nodes[k as usize].x, nodes[k as usize].y)],
            })
            .collect();
        let n = StreetNetwork::new(nodes, segments).unwrap();
        let cell = Rect {
            min_x: 0.0,
            min_y: 0.0,
            max_x: 150.0,
            max_y: 150.0,
        };
        let s = street_features(&cell, &n);
        assert_eq!((s.node_count, s.deg_mean, s.deg_min, s.deg_max), (1.0, 3.0, 3.0, 3.0));
        assert!((s.total_length - 75.0 * 3.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_mismatched_endpoint() {
        let nodes = vec![StreetNode { id: 1, x: 0.0, y: 0.0 }, StreetNode { id: 2, x: 5.0, y: 0.0 }];
        let segments = vec![StreetSegment {
            node_a: 1,
            node_b: 2,
            polyline: vec![(0.0, 0.0), (6.0, 0.0)],
        }];
        assert!(StreetNetwork::new(nodes, segments).is_err());
    }

    #[test]
    fn wkt_parsing() {
        assert_eq!(
            parse_wkt_linestring("LINESTRING (0 0, 1.5 2)").unwrap(),
            vec![(0.0, 0.0), (1.5, 2.0)]
        );
        assert_eq!(parse_wkt_linestring("linestring(1 1,2 2)").unwrap().len(), 2);
        assert!(parse_wkt_linestring("POINT (1 1)").is_err());
        assert!(parse_wkt_linestring("LINESTRING (1 1)").is_err());
        assert!(parse_wkt_linestring("LINESTRING (1 1, 2)").is_err());
    }
}
