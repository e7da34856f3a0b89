#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nbr-gcn"))
}

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn run(args: &[&str]) -> Run {
    let out: Output = bin().args(args).env_remove("RUST_LOG").output().expect("binary runs");
    Run {
        code: out.status.code().expect("exited normally"),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn ascii_grid(ncols: usize, nrows: usize, x0: f64, y0: f64, cs: f64, value: impl Fn(f64, f64) -> f64) -> String {
    let mut out = format!("ncols {ncols}\nnrows {nrows}\nxllcorner {x0}\nyllcorner {y0}\ncellsize {cs}\nNODATA_value -9999\n");
    // First data line is the northern row.
    for r in (0..nrows).rev() {
        let y = y0 + (r as f64 + 0.5) * cs;
        let line: Vec<String> = (0..ncols).map(|c| value(x0 + (c as f64 + 0.5) * cs, y).to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Inputs for a 2x3 grid of 150 m cells over 30 m pixels.
///
/// * Pixels west of x = 210 have NIR 0.8 / red 0.1 (NDVI 7/9), the rest
///   NIR = red = 0.3 (NDVI 0): cell columns get vegetation shares 1, 2/5, 0
///   and only the middle column mixes two values per band.
/// * The DEM is the plane z = x with a one-pixel margin, so every cell
///   has slope 45 degrees and zero curvature.
/// * Streets: a straight east-west street at y = 75 between nodes 1 and 2
///   and a north-south one at x = 225 from node 4 (on the first street,
///   but not joined to it) to node 3.
pub struct Fixture {
    pub dir: PathBuf,
    pub manifest: PathBuf,
    pub dem: PathBuf,
    pub nodes: PathBuf,
    pub segments: PathBuf,
}

pub fn write_fixture(dir: &Path) -> Fixture {
    let nir = ascii_grid(15, 10, 0.0, 0.0, 30.0, |x, _| if x < 210.0 { 0.8 } else { 0.3 });
    let red = ascii_grid(15, 10, 0.0, 0.0, 30.0, |x, _| if x < 210.0 { 0.1 } else { 0.3 });
    fs::write(dir.join("b08.asc"), nir).unwrap();
    fs::write(dir.join("b04.asc"), red).unwrap();
    let manifest = dir.join("bands.txt");
    fs::write(&manifest, "# name file\nB04 b04.asc\nB08 b08.asc\n").unwrap();
    let dem = dir.join("dem.asc");
    fs::write(&dem, ascii_grid(17, 12, -30.0, -30.0, 30.0, |x, _| x)).unwrap();
    let nodes = dir.join("nodes.csv");
    fs::write(&nodes, "id,x,y\n1,15,75\n2,435,75\n3,225,225\n4,225,75\n").unwrap();
    let segments = dir.join("segments.csv");
    fs::write(
        &segments,
        "node_a,node_b,wkt_linestring\n1,2,\"LINESTRING (15 75, 435 75)\"\n4,3,\"LINESTRING (225 75, 225 225)\"\n",
    )
    .unwrap();
    Fixture {
        dir: dir.to_path_buf(),
        manifest,
        dem,
        nodes,
        segments,
    }
}

impl Fixture {
    pub fn features_args<'a>(&'a self, out: &'a Path) -> Vec<&'a str> {
        vec![
            "features",
            "--image-manifest",
            s(&self.manifest),
            "--dem",
            s(&self.dem),
            "--streets-nodes",
            s(&self.nodes),
            "--streets-segments",
            s(&self.segments),
            "--rows",
            "2",
            "--cols",
            "3",
            "--out",
            s(out),
        ]
    }
}

/// Small synthetic table for end-to-end runs.
pub fn synth_table(dir: &Path, rows: usize, cols: usize, zones: usize, seed: u64) -> PathBuf {
    let out = dir.join("city.csv");
    let r = run(&[
        "synth",
        "--rows",
        &rows.to_string(),
        "--cols",
        &cols.to_string(),
        "--zones",
        &zones.to_string(),
        "--seed",
        &seed.to_string(),
        "--imbalance",
        "4",
        "--no-oracle",
        "--out",
        s(&out),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    out
}
