//! Command implementations behind the `nbr-gcn` binary.
//!
//! Every command writes its primary outputs plus a run manifest recording
//! the command, full configuration, seeds, input digests and output paths.
//! Exit codes: 0 success, 1 runtime or experiment failure, 2 usage, parse
//! or input failure.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{ArgAction, Args, CommandFactory, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;
use sha2::{Digest, Sha256};

use nbr_gcn::experiment::{spatial_crossval, write_prediction_pgm, CrossvalOptions, MetricsReport, ModelKind, TrainConfig};
use nbr_gcn::features::{build_feature_table, BandRoles, CellMeta, FeatureInputs};
use nbr_gcn::gradcheck::{check_gradients, GradcheckReport, GRADCHECK_TOLERANCE};
use nbr_gcn::grid::{load_feature_table, CellId, GridSpec, Label, ZoneId};
use nbr_gcn::models::CHECKPOINT_FORMAT;
use nbr_gcn::raster::{read_ascii_grid, read_band_manifest};
use nbr_gcn::streets::StreetNetwork;
use nbr_gcn::synthetic::{generate_city_with_truth, oracle_metrics, sidecar_json, SynthConfig};

pub const MANIFEST_FORMAT: &str = "nbr-gcn-manifest/1";
pub const TABLE_FORMAT: &str = "nbr-gcn-table/1";

pub const LONG_VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    "\nfeature table: nbr-gcn-table/1\ncheckpoint: nbr-gcn-checkpoint/1\nmanifest: nbr-gcn-manifest/1"
);

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    /// Failure while reading or validating inputs.
    fn input(e: nbr_gcn::Error) -> Self {
        CliError::Usage(e.to_string())
    }

    /// Failure during computation; configuration and geometry problems
    /// still count as usage errors.
    fn compute(e: nbr_gcn::Error) -> Self {
        use nbr_gcn::Error as E;
        match e {
            E::Config(_) | E::Extent(_) | E::Shape(_) | E::Parse { .. } | E::InvalidGrid(_) | E::OutOfBounds { .. } => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "nbr-gcn", version, long_version = LONG_VERSION, args_override_self = true)]
#[command(about = "Neighbor-aware informal settlement classification on regular grids")]
pub struct Cli {
    /// key=value file supplying flag defaults; explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract the 9 cell features from rasters and a street network.
    Features(FeaturesArgs),
    /// Generate a seeded synthetic city.
    Synth(SynthArgs),
    /// Repeated leave-one-zone-out cross-validation.
    Crossval(CrossvalArgs),
    /// Finite-difference check of a model's gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct FeaturesArgs {
    /// Band manifest: one `name path` pair per line.
    #[arg(long)]
    pub image_manifest: PathBuf,
    /// DEM as an ESRI ASCII grid.
    #[arg(long)]
    pub dem: PathBuf,
    /// Street nodes CSV (`id,x,y`).
    #[arg(long)]
    pub streets_nodes: PathBuf,
    /// Street segments CSV (`node_a,node_b,wkt_linestring`).
    #[arg(long)]
    pub streets_segments: PathBuf,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub origin_x: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub origin_y: f64,
    #[arg(long, default_value_t = GridSpec::DEFAULT_CELL_SIZE)]
    pub cell_size: f64,
    #[arg(long)]
    pub rows: usize,
    #[arg(long)]
    pub cols: usize,
    #[arg(long, default_value = "B04")]
    pub red_band: String,
    #[arg(long, default_value = "B08")]
    pub nir_band: String,
    /// Optional `row,col,zone,label` CSV: restricts extraction to the listed
    /// cells and attaches their zone and label.
    #[arg(long)]
    pub cells: Option<PathBuf>,
    /// Output feature table CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = SynthConfig::default().n_rows)]
    pub rows: usize,
    #[arg(long, default_value_t = SynthConfig::default().n_cols)]
    pub cols: usize,
    #[arg(long, default_value_t = SynthConfig::default().n_zones)]
    pub zones: usize,
    /// Target ratio of non-favela to favela cells.
    #[arg(long, default_value_t = SynthConfig::default().imbalance_target)]
    pub imbalance: f64,
    /// Context strength λ in [0, 1].
    #[arg(long, default_value_t = SynthConfig::default().context_strength, allow_negative_numbers = true)]
    pub lambda: f64,
    /// Feature noise σ.
    #[arg(long, default_value_t = SynthConfig::default().noise, allow_negative_numbers = true)]
    pub noise: f64,
    #[arg(long, default_value_t = SynthConfig::default().zone_shift)]
    pub zone_shift: f64,
    #[arg(long, default_value_t = SynthConfig::default().correlation_length)]
    pub correlation_length: f64,
    #[arg(long, default_value_t = SynthConfig::default().hole_fraction)]
    pub hole_fraction: f64,
    #[arg(long, default_value_t = SynthConfig::default().seed)]
    pub seed: u64,
    #[arg(long, default_value_t = SynthConfig::default().oracle_samples)]
    pub oracle_samples: usize,
    /// Skip the Monte-Carlo oracle estimate.
    #[arg(long)]
    pub no_oracle: bool,
    /// Output feature table CSV; the sidecar goes next to it.
    #[arg(long)]
    pub out: PathBuf,
}

impl SynthArgs {
    pub fn config(&self) -> SynthConfig {
        SynthConfig {
            n_rows: self.rows,
            n_cols: self.cols,
            n_zones: self.zones,
            imbalance_target: self.imbalance,
            context_strength: self.lambda,
            noise: self.noise,
            zone_shift: self.zone_shift,
            correlation_length: self.correlation_length,
            hole_fraction: self.hole_fraction,
            seed: self.seed,
            oracle_samples: self.oracle_samples,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct CrossvalArgs {
    /// Feature table CSV with zones and labels.
    #[arg(long)]
    pub table: PathBuf,
    /// Comma-separated models (gcn, mlp-local, mlp-neighbors) or `all`.
    #[arg(long, default_value = "all")]
    pub model: String,
    #[arg(long, default_value_t = 10)]
    pub repetitions: usize,
    /// A count (first N zones) or a comma-separated list of zone ids.
    #[arg(long)]
    pub zones: Option<String>,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; outputs do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Train on raw features.
    #[arg(long)]
    pub no_standardize: bool,
    /// Evaluate at the zone's natural class ratio (non-standard protocol).
    #[arg(long)]
    pub natural_prevalence: bool,
    /// Also write a PGM map of out-of-fold predictions per model.
    #[arg(long)]
    pub map: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// gcn, mlp-local or mlp-neighbors.
    pub model: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Test hook: perturb one analytic gradient entry.
    #[arg(long, hide = true)]
    pub corrupt_gradient: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Provenance record written next to a command's outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub format: &'static str,
    pub command: String,
    pub tool_version: &'static str,
    pub formats: BTreeMap<&'static str, &'static str>,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub created_unix: u64,
}

impl RunManifest {
    fn new(command: &str, config: serde_json::Value) -> Self {
        let formats = BTreeMap::from([
            ("feature_table", TABLE_FORMAT),
            ("checkpoint", CHECKPOINT_FORMAT),
            ("manifest", MANIFEST_FORMAT),
        ]);
        RunManifest {
            format: MANIFEST_FORMAT,
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION"),
            formats,
            config,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        }
    }

    fn input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.push(digest(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?);
        Ok(())
    }

    fn output(&mut self, path: &Path) -> CliResult<()> {
        self.outputs.push(digest(path).map_err(|e| CliError::io(path, e))?);
        Ok(())
    }

    fn save(&self, path: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }
}

fn digest(path: &Path) -> std::io::Result<FileDigest> {
    let bytes = fs::read(path)?;
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

/// `dir/stem.manifest.json` for an output `dir/stem.ext`.
pub fn manifest_path(output: &Path) -> PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    output.with_file_name(format!("{stem}.manifest.json"))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("json value serializes");
    write_file(path, (text + "\n").as_bytes())
}

/// Paths written by [`cmd_features`].
#[derive(Debug, Clone)]
pub struct FeaturesOutcome {
    pub table: PathBuf,
    pub manifest: PathBuf,
    pub n_records: usize,
    pub n_omitted: usize,
}

fn read_cells(path: &Path) -> CliResult<HashMap<CellId, CellMeta>> {
    let bad = |line: usize, m: String| CliError::Usage(format!("{}: line {line}: {m}", path.display()));
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let mut out = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| bad(line, e.to_string()))?;
        let field = |k: usize| rec.get(k).unwrap_or("");
        let index = |k: usize| field(k).parse::<usize>().map_err(|_| bad(line, format!("invalid index `{}`", field(k))));
        let id = CellId::new(index(0)?, index(1)?);
        let zone = match field(2) {
            "" => None,
            z => Some(z.parse::<ZoneId>().map_err(|_| bad(line, format!("invalid zone `{z}`")))?),
        };
        let label = match field(3) {
            "" => None,
            l => Some(
                l.parse::<u8>()
                    .ok()
                    .and_then(Label::from_bit)
                    .ok_or_else(|| bad(line, format!("invalid label `{l}`")))?,
            ),
        };
        if out.insert(id, CellMeta { zone, label }).is_some() {
            return Err(bad(line, format!("duplicate cell ({}, {})", id.row, id.col)));
        }
    }
    Ok(out)
}

fn band_files(manifest: &Path) -> Vec<PathBuf> {
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    fs::read_to_string(manifest)
        .unwrap_or_default()
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter_map(|l| l.split_whitespace().nth(1).map(|f| base.join(f)))
        .collect()
}

pub fn cmd_features(args: &FeaturesArgs) -> CliResult<FeaturesOutcome> {
    let grid = GridSpec::new(args.origin_x, args.origin_y, args.cell_size, args.rows, args.cols).map_err(CliError::input)?;
    let image = read_band_manifest(&args.image_manifest).map_err(CliError::input)?;
    let dem = read_ascii_grid(&args.dem).map_err(CliError::input)?;
    let streets = StreetNetwork::load(&args.streets_nodes, &args.streets_segments).map_err(CliError::input)?;
    let cells = args.cells.as_deref().map(read_cells).transpose()?;
    let roles = BandRoles {
        red: args.red_band.clone(),
        nir: args.nir_band.clone(),
    };
    let mask = cells.as_ref().map(|c| move |id: CellId| c.contains_key(&id));
    let inputs = FeatureInputs {
        image: &image,
        roles: &roles,
        dem: &dem,
        streets: &streets,
        grid,
        mask: mask.as_ref().map(|m| m as &dyn Fn(CellId) -> bool),
        meta: cells.as_ref(),
    };
    let (table, omitted) = build_feature_table(&inputs).map_err(CliError::compute)?;

    let mut csv = Vec::new();
    table.write_csv(&mut csv).map_err(|e| CliError::io(&args.out, e))?;
    write_file(&args.out, &csv)?;

    let config = serde_json::json!({
        "grid": { "origin_x": grid.origin_x, "origin_y": grid.origin_y, "cell_size": grid.cell_size,
                  "n_rows": grid.n_rows, "n_cols": grid.n_cols },
        "bands": { "red": roles.red, "nir": roles.nir },
        "omitted_cells": omitted.iter().map(|o| serde_json::json!({
            "row": o.cell.row, "col": o.cell.col, "reason": o.reason })).collect::<Vec<_>>(),
    });
    let mut manifest = RunManifest::new("features", config);
    manifest.input(&args.image_manifest)?;
    for band in band_files(&args.image_manifest) {
        manifest.input(&band)?;
    }
    manifest.input(&args.dem)?;
    manifest.input(&args.streets_nodes)?;
    manifest.input(&args.streets_segments)?;
    if let Some(c) = &args.cells {
        manifest.input(c)?;
    }
    manifest.output(&args.out)?;
    let manifest_file = manifest_path(&args.out);
    manifest.save(&manifest_file)?;
    info!("wrote {} records ({} omitted) to {}", table.len(), omitted.len(), args.out.display());
    Ok(FeaturesOutcome {
        table: args.out.clone(),
        manifest: manifest_file,
        n_records: table.len(),
        n_omitted: omitted.len(),
    })
}

#[derive(Debug, Clone)]
pub struct SynthOutcome {
    pub table: PathBuf,
    pub sidecar: PathBuf,
    pub manifest: PathBuf,
    pub sidecar_json: serde_json::Value,
}

/// `dir/stem.synth.json` for a table `dir/stem.csv`.
pub fn sidecar_path(table: &Path) -> PathBuf {
    let stem = table.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    table.with_file_name(format!("{stem}.synth.json"))
}

pub fn cmd_synth(args: &SynthArgs) -> CliResult<SynthOutcome> {
    let config = args.config();
    let city = generate_city_with_truth(&config).map_err(CliError::compute)?;
    let oracle = if args.no_oracle {
        None
    } else {
        Some(oracle_metrics(&config).map_err(CliError::compute)?)
    };
    let mut csv = Vec::new();
    city.table.write_csv(&mut csv).map_err(|e| CliError::io(&args.out, e))?;
    write_file(&args.out, &csv)?;

    let manifest_file = manifest_path(&args.out);
    let sidecar = sidecar_path(&args.out);
    let mut side = sidecar_json(&city, oracle.as_ref());
    side["manifest"] = serde_json::json!(manifest_file.file_name().map(|f| f.to_string_lossy().into_owned()));
    write_json(&sidecar, &side)?;

    let mut manifest = RunManifest::new("synth", serde_json::to_value(config).expect("config serializes"));
    manifest.seeds.insert("seed".into(), config.seed);
    manifest.output(&args.out)?;
    manifest.output(&sidecar)?;
    manifest.save(&manifest_file)?;
    let s = city.summary();
    info!(
        "synthetic city: {} cells, {} favela, ratio {:.2}",
        s.n_cells, s.n_favela, s.achieved_ratio
    );
    Ok(SynthOutcome {
        table: args.out.clone(),
        sidecar,
        manifest: manifest_file,
        sidecar_json: side,
    })
}

/// Parses `--model`: `all` or a comma-separated list of model names.
pub fn parse_models(spec: &str) -> CliResult<Vec<ModelKind>> {
    if spec.trim() == "all" {
        return Ok(ModelKind::ALL.to_vec());
    }
    let mut out = Vec::new();
    for name in spec.split(',').map(str::trim) {
        let kind: ModelKind = name.parse().map_err(|e: nbr_gcn::Error| CliError::Usage(e.to_string()))?;
        if !out.contains(&kind) {
            out.push(kind);
        }
    }
    Ok(out)
}

/// Parses `--zones` against the zones present in the table.
pub fn select_zones(spec: Option<&str>, available: &[ZoneId]) -> CliResult<Vec<ZoneId>> {
    let Some(spec) = spec else {
        return Ok(available.to_vec());
    };
    let spec = spec.trim();
    if !spec.contains(',') {
        let n: usize = spec
            .parse()
            .map_err(|_| CliError::Usage(format!("--zones expects a count or a list, got `{spec}`")))?;
        if n > available.len() {
            return Err(CliError::Usage(format!(
                "--zones {n} requested but the table has {} zones",
                available.len()
            )));
        }
        return Ok(available[..n].to_vec());
    }
    let mut zones = Vec::new();
    for z in spec.split(',').map(str::trim) {
        let z: ZoneId = z.parse().map_err(|_| CliError::Usage(format!("invalid zone id `{z}`")))?;
        if !available.contains(&z) {
            return Err(CliError::Usage(format!("zone {z} not in table (zones: {available:?})")));
        }
        zones.push(z);
    }
    zones.sort_unstable();
    zones.dedup();
    Ok(zones)
}

#[derive(Debug, Clone)]
pub struct ModelRun {
    pub model: ModelKind,
    pub report: MetricsReport,
    pub folds_csv: PathBuf,
    pub summary: PathBuf,
    pub map: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct CrossvalOutcome {
    pub runs: Vec<ModelRun>,
    pub manifest: PathBuf,
}

pub fn cmd_crossval(args: &CrossvalArgs) -> CliResult<CrossvalOutcome> {
    let models = parse_models(&args.model)?;
    let table = load_feature_table(&args.table).map_err(CliError::input)?;
    let available = table.zones();
    if available.len() < 2 {
        return Err(CliError::Usage(format!(
            "{}: cross-validation needs at least 2 zones, found {available:?}",
            args.table.display()
        )));
    }
    let zones = select_zones(args.zones.as_deref(), &available)?;
    if args.repetitions == 0 {
        return Err(CliError::Usage("--repetitions must be positive".into()));
    }
    if args.jobs == 0 {
        return Err(CliError::Usage("--jobs must be positive".into()));
    }
    let train = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.learning_rate,
        seed: args.seed,
        standardize: !args.no_standardize,
    };
    train.validate().map_err(CliError::compute)?;
    let opts = CrossvalOptions {
        repetitions: args.repetitions,
        jobs: args.jobs,
        natural_prevalence: args.natural_prevalence,
        record_maps: args.map,
    };

    let manifest_file = args.out.join("crossval.manifest.json");
    let mut runs = Vec::new();
    for &model in &models {
        info!("cross-validating {model} on zones {zones:?}");
        let report = spatial_crossval(&table, &zones, model, &train, &opts).map_err(CliError::compute)?;
        for f in &report.failures {
            warn!("{model}: fold zone {} repetition {} failed: {}", f.zone, f.repetition, f.error);
        }
        let folds_csv = args.out.join(format!("{model}.folds.csv"));
        write_file(&folds_csv, report.csv_string().as_bytes())?;
        let summary = args.out.join(format!("{model}.summary.json"));
        let mut json = report.summary_json();
        json["manifest"] = serde_json::json!("crossval.manifest.json");
        write_json(&summary, &json)?;
        let map = if args.map {
            let path = args.out.join(format!("{model}.map.pgm"));
            let mut buf = Vec::new();
            write_prediction_pgm(table.grid(), &report.prediction_map(), &mut buf).map_err(|e| CliError::io(&path, e))?;
            write_file(&path, &buf)?;
            Some(path)
        } else {
            None
        };
        runs.push(ModelRun {
            model,
            report,
            folds_csv,
            summary,
            map,
        });
    }

    let config = serde_json::json!({
        "models": models,
        "zones": zones,
        "repetitions": args.repetitions,
        "train": train,
        "natural_prevalence": args.natural_prevalence,
        "jobs": args.jobs,
    });
    let mut manifest = RunManifest::new("crossval", config);
    manifest.seeds.insert("seed".into(), args.seed);
    manifest.input(&args.table)?;
    for r in &runs {
        manifest.output(&r.folds_csv)?;
        manifest.output(&r.summary)?;
        if let Some(m) = &r.map {
            manifest.output(m)?;
        }
    }
    manifest.save(&manifest_file)?;

    if runs.iter().any(|r| r.report.folds.is_empty()) {
        let failed: Vec<String> = runs.iter().filter(|r| r.report.folds.is_empty()).map(|r| r.model.to_string()).collect();
        return Err(CliError::Runtime(format!("every fold failed for {}", failed.join(", "))));
    }
    Ok(CrossvalOutcome {
        runs,
        manifest: manifest_file,
    })
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult<GradcheckReport> {
    let kind: ModelKind = args.model.parse().map_err(|e: nbr_gcn::Error| CliError::Usage(e.to_string()))?;
    check_gradients(kind, args.seed, args.corrupt_gradient).map_err(CliError::compute)
}

/// Parses a key=value config file into `(section, key, value)` triples.
/// `#` starts a comment; `[name]` opens a section scoped to one command.
pub fn parse_config_file(text: &str, source: &Path) -> CliResult<Vec<(Option<String>, String, String)>> {
    let mut section = None;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = Some(name.trim().to_string());
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("{}: line {}: expected key = value", source.display(), i + 1)))?;
        let v = v.trim();
        let v = v
            .strip_prefix('"')
            .and_then(|s| s.strip_suffix('"'))
            .unwrap_or(v);
        out.push((section.clone(), k.trim().replace('_', "-"), v.to_string()));
    }
    Ok(out)
}

const SUBCOMMANDS: [&str; 4] = ["features", "synth", "crossval", "gradcheck"];

fn config_location(argv: &[String]) -> Option<PathBuf> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Inserts config-file defaults right after the subcommand, so explicit
/// flags later on the line override them.
pub fn expand_config(argv: Vec<String>) -> CliResult<Vec<String>> {
    let Some(path) = config_location(&argv) else {
        return Ok(argv);
    };
    let Some(pos) = argv.iter().position(|a| SUBCOMMANDS.contains(&a.as_str())) else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let entries = parse_config_file(&text, &path)?;
    let cmd = Cli::command();
    let sub = cmd.find_subcommand(&argv[pos]).expect("known subcommand");
    let mut extra = Vec::new();
    for (section, key, value) in entries {
        if section.as_deref().is_some_and(|s| s != argv[pos]) {
            continue;
        }
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && !a.is_hide_set())
            .ok_or_else(|| CliError::Usage(format!("{}: unknown key `{key}` for {}", path.display(), argv[pos])))?;
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value.as_str() {
                "true" => extra.push(format!("--{key}")),
                "false" => {}
                v => return Err(CliError::Usage(format!("{}: `{key}` expects true or false, got `{v}`", path.display()))),
            }
        } else {
            extra.push(format!("--{key}={value}"));
        }
    }
    let mut out = argv[..=pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}

fn print_summary(out: &mut impl Write, run: &ModelRun) -> std::io::Result<()> {
    let g = &run.report.global;
    writeln!(
        out,
        "{}: kappa {:.4} ± {:.4}, f1 {:.4} ± {:.4} over {} folds ({} failed)",
        run.model,
        g.kappa.mean,
        g.kappa.std,
        g.f1.mean,
        g.f1.std,
        run.report.folds.len(),
        run.report.failures.len()
    )
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run(argv: Vec<String>) -> i32 {
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();

    let mut stdout = std::io::stdout();
    let result = match &cli.command {
        Command::Features(a) => cmd_features(a).map(|o| {
            let _ = writeln!(stdout, "{} records ({} omitted) -> {}", o.n_records, o.n_omitted, o.table.display());
            0
        }),
        Command::Synth(a) => cmd_synth(a).map(|o| {
            let c = &o.sidecar_json["counts"];
            let _ = writeln!(
                stdout,
                "{} cells, {} favela, ratio {} -> {}",
                c["n_cells"],
                c["n_favela"],
                c["achieved_ratio"],
                o.table.display()
            );
            if let Some(k) = o.sidecar_json["oracle"]["kappa"].as_f64() {
                let _ = writeln!(stdout, "oracle kappa {k:.4}");
            }
            0
        }),
        Command::Crossval(a) => cmd_crossval(a).map(|o| {
            for r in &o.runs {
                let _ = print_summary(&mut stdout, r);
            }
            0
        }),
        Command::Gradcheck(a) => cmd_gradcheck(a).map(|r| {
            let verdict = if r.passed() { "ok" } else { "FAILED" };
            let _ = writeln!(
                stdout,
                "{} seed {}: max relative error {:.3e} (tolerance {:.0e}, {} parameters) {verdict}",
                r.model, r.seed, r.max_rel_error, GRADCHECK_TOLERANCE, r.n_params
            );
            i32::from(!r.passed())
        }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
