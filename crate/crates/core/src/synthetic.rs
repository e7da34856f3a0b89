//! Seeded synthetic cities whose labels are only partly recoverable from a
//! single cell, plus the generative model's own Bayes classifier.
//!
//! Generation, in unitless feature space:
//!
//! * `u` is a smooth latent field (bilinear interpolation of coarse N(0,1)
//!   noise); a second independent smooth field marks holes (absent cells).
//! * A cell is favela iff the 3x3 mean of `u` exceeds the quantile that
//!   yields the imbalance target among present cells. Holes keep their
//!   latent label.
//! * Signal `a = (1 - λ)·y + λ·mean(y over the in-grid 3x3 window)`.
//! * Unitless features `s = a·d + offset(zone) + σ·ε`, `ε ~ N(0, I)`, with
//!   `d` the unit favela prototype direction; stored features are
//!   `BASE + SCALE ⊙ s`.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{class_counts, CellId, CellRecord, FeatureTable, Features, GridSpec, Label, ZoneId, N_FEATURES};
use crate::seeds::{derive_seed, stream_rng};

/// Favela direction before normalization: less vegetation, more entropy,
/// steeper, denser and shorter streets.
const PROTOTYPE: Features = [-1.0, 1.0, 1.0, 0.5, 1.0, 0.5, -0.5, -0.5, 0.5];
/// Feature-space location and spread of the unitless features.
const BASE: Features = [0.35, 0.6, 8.0, 0.0, 12.0, 1200.0, 3.0, 1.5, 4.5];
const SCALE: Features = [0.1, 0.08, 3.0, 0.002, 4.0, 300.0, 0.3, 0.4, 0.6];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_rows: usize,
    pub n_cols: usize,
    pub n_zones: usize,
    /// Target ratio of non-favela to favela cells.
    pub imbalance_target: f64,
    /// λ: weight of the neighborhood mean in each cell's signal.
    pub context_strength: f64,
    /// σ: per-feature noise, relative to a unit-length prototype.
    pub noise: f64,
    /// Norm of each zone's prototype offset.
    pub zone_shift: f64,
    /// Coarse-grid spacing of the latent field, in cells.
    pub correlation_length: f64,
    pub hole_fraction: f64,
    pub seed: u64,
    /// Labeled cells the oracle estimate is averaged over.
    pub oracle_samples: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_rows: 200,
            n_cols: 200,
            n_zones: 5,
            imbalance_target: 30.0,
            context_strength: 0.6,
            noise: 1.0,
            zone_shift: 0.3,
            correlation_length: 10.0,
            hole_fraction: 0.1,
            seed: 1,
            oracle_samples: 100_000,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_rows == 0 || self.n_cols == 0 {
            return fail(format!("grid must be non-empty, got {}x{}", self.n_rows, self.n_cols));
        }
        if self.n_zones == 0 || self.n_zones > self.n_cols {
            return fail(format!("zones must be in 1..={}, got {}", self.n_cols, self.n_zones));
        }
        if !(self.imbalance_target > 0.0) || !self.imbalance_target.is_finite() {
            return fail(format!("imbalance target must be positive, got {}", self.imbalance_target));
        }
        if !(0.0..=1.0).contains(&self.context_strength) {
            return fail(format!("context strength must be in [0, 1], got {}", self.context_strength));
        }
        if !(self.noise > 0.0) || !self.noise.is_finite() {
            return fail(format!("noise must be positive, got {}", self.noise));
        }
        if !(self.zone_shift >= 0.0) || !self.zone_shift.is_finite() {
            return fail(format!("zone shift must be non-negative, got {}", self.zone_shift));
        }
        if !(self.correlation_length > 0.0) || !self.correlation_length.is_finite() {
            return fail(format!("correlation length must be positive, got {}", self.correlation_length));
        }
        if !(0.0..1.0).contains(&self.hole_fraction) {
            return fail(format!("hole fraction must be in [0, 1), got {}", self.hole_fraction));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::with_shape(self.n_rows, self.n_cols)
    }

    /// Zones are contiguous vertical bands numbered from 1, west to east.
    pub fn zone_of(&self, col: usize) -> ZoneId {
        (col * self.n_zones / self.n_cols) as ZoneId + 1
    }

    pub fn zone_ids(&self) -> Vec<ZoneId> {
        (1..=self.n_zones as ZoneId).collect()
    }
}

/// The unit favela prototype direction.
pub fn prototype() -> Features {
    let norm = PROTOTYPE.iter().map(|v| v * v).sum::<f64>().sqrt();
    PROTOTYPE.map(|v| v / norm)
}

/// A generated city with its hidden state.
#[derive(Debug, Clone)]
pub struct SynthCity {
    pub config: SynthConfig,
    pub table: FeatureTable,
    /// Latent labels on the whole grid, holes included; row-major.
    pub latent_labels: Vec<bool>,
    /// Signal `a` on the whole grid; row-major.
    pub signal: Vec<f64>,
    pub present: Vec<bool>,
    /// Unitless offset of zone `z` at index `z - 1`.
    pub zone_offsets: Vec<Features>,
}

impl SynthCity {
    pub fn summary(&self) -> CitySummary {
        let (n_favela, n_nonfavela, _) = class_counts(&self.table);
        CitySummary {
            n_cells: self.table.len(),
            n_absent: self.present.iter().filter(|p| !**p).count(),
            n_favela,
            n_nonfavela,
            achieved_ratio: n_nonfavela as f64 / n_favela as f64,
        }
    }

    /// Features with the known zone offset removed, in unitless space.
    fn residual(&self, rec: &CellRecord) -> Features {
        let off = &self.zone_offsets[rec.zone.expect("synthetic cells have zones") as usize - 1];
        std::array::from_fn(|k| (rec.features[k] - BASE[k]) / SCALE[k] - off[k])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CitySummary {
    pub n_cells: usize,
    pub n_absent: usize,
    pub n_favela: usize,
    pub n_nonfavela: usize,
    pub achieved_ratio: f64,
}

fn smooth_field<R: Rng>(n_rows: usize, n_cols: usize, spacing: f64, rng: &mut R) -> Vec<f64> {
    let cr = (n_rows as f64 / spacing).ceil() as usize + 2;
    let cc = (n_cols as f64 / spacing).ceil() as usize + 2;
    let coarse: Vec<f64> = (0..cr * cc).map(|_| rng.sample(StandardNormal)).collect();
    let mut out = Vec::with_capacity(n_rows * n_cols);
    for r in 0..n_rows {
        let y = r as f64 / spacing;
        let (y0, fy) = (y.floor() as usize, y.fract());
        for c in 0..n_cols {
            let x = c as f64 / spacing;
            let (x0, fx) = (x.floor() as usize, x.fract());
            let at = |i: usize, j: usize| coarse[i * cc + j];
            let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
            out.push(v);
        }
    }
    out
}

/// Mean of `v` over the in-grid 3x3 window of every cell.
fn window_mean(v: &[f64], n_rows: usize, n_cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for r in 0..n_rows {
        for c in 0..n_cols {
            let (mut s, mut n) = (0.0, 0usize);
            for rr in r.saturating_sub(1)..=(r + 1).min(n_rows - 1) {
                for cc in c.saturating_sub(1)..=(c + 1).min(n_cols - 1) {
                    s += v[rr * n_cols + cc];
                    n += 1;
                }
            }
            out[r * n_cols + c] = s / n as f64;
        }
    }
    out
}

/// Generates the city of `config` with its hidden state.
pub fn generate_city_with_truth(config: &SynthConfig) -> Result<SynthCity> {
    config.validate()?;
    let grid = config.grid()?;
    let (nr, nc) = (config.n_rows, config.n_cols);
    let n = nr * nc;

    let u = smooth_field(nr, nc, config.correlation_length, &mut stream_rng(config.seed, "latent", &[]));
    let h = smooth_field(nr, nc, config.correlation_length, &mut stream_rng(config.seed, "holes", &[]));

    let n_absent = (config.hole_fraction * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| h[a].total_cmp(&h[b]).then(a.cmp(&b)));
    let mut present = vec![true; n];
    for &i in &order[..n_absent] {
        present[i] = false;
    }
    let n_present = n - n_absent;

    let n_favela = (n_present as f64 / (1.0 + config.imbalance_target)).round() as usize;
    if n_favela == 0 || n_favela >= n_present {
        return Err(Error::Config(format!(
            "imbalance target {} is unachievable with {n_present} cells",
            config.imbalance_target
        )));
    }
    let mu = window_mean(&u, nr, nc);
    let mut ranked: Vec<usize> = (0..n).filter(|&i| present[i]).collect();
    ranked.sort_by(|&a, &b| mu[b].total_cmp(&mu[a]).then(a.cmp(&b)));
    let threshold = mu[ranked[n_favela - 1]];
    let mut latent = vec![false; n];
    for &i in &ranked[..n_favela] {
        latent[i] = true;
    }
    for i in 0..n {
        if !present[i] {
            latent[i] = mu[i] >= threshold;
        }
    }

    let lambda = config.context_strength;
    let y: Vec<f64> = latent.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let my = window_mean(&y, nr, nc);
    let signal: Vec<f64> = (0..n).map(|i| (1.0 - lambda) * y[i] + lambda * my[i]).collect();

    let mut zone_rng = stream_rng(config.seed, "zones", &[]);
    let per_dim = config.zone_shift / (N_FEATURES as f64).sqrt();
    let zone_offsets: Vec<Features> = (0..config.n_zones)
        .map(|_| std::array::from_fn(|_| per_dim * zone_rng.sample::<f64, _>(StandardNormal)))
        .collect();

    let d = prototype();
    let mut noise_rng = stream_rng(config.seed, "noise", &[]);
    let mut records = Vec::with_capacity(n_present);
    for r in 0..nr {
        for c in 0..nc {
            let i = r * nc + c;
            if !present[i] {
                continue;
            }
            let zone = config.zone_of(c);
            let off = &zone_offsets[zone as usize - 1];
            let features: Features = std::array::from_fn(|k| {
                let e: f64 = noise_rng.sample(StandardNormal);
                BASE[k] + SCALE[k] * (signal[i] * d[k] + off[k] + config.noise * e)
            });
            records.push(CellRecord {
                row: r,
                col: c,
                features,
                label: Some(if latent[i] { Label::Favela } else { Label::NonFavela }),
                zone: Some(zone),
            });
        }
    }

    Ok(SynthCity {
        config: *config,
        table: FeatureTable::from_records(grid, records)?,
        latent_labels: latent,
        signal,
        present,
        zone_offsets,
    })
}

/// The canonical feature table of the city of `config`.
pub fn generate_city(config: &SynthConfig) -> Result<FeatureTable> {
    generate_city_with_truth(config).map(|c| c.table)
}

/// Bayes-classifier performance estimated at balanced class weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleMetrics {
    /// Expected kappa on a balanced test set: `TPR + TNR - 1`.
    pub kappa: f64,
    pub tpr: f64,
    pub tnr: f64,
    pub n_samples: usize,
    pub n_cities: usize,
    pub n_patterns_favela: usize,
    pub n_patterns_nonfavela: usize,
}

/// Signal patterns over the 3x3 window (row-major incl. center), weighted
/// by how often they occur around interior cells.
#[derive(Default)]
struct PatternPrior {
    index: HashMap<[u64; 9], usize>,
    patterns: Vec<[f64; 9]>,
    log_weights: Vec<f64>,
    counts: Vec<f64>,
}

impl PatternPrior {
    fn add(&mut self, p: [f64; 9]) {
        let key = p.map(f64::to_bits);
        let next = self.patterns.len();
        let i = *self.index.entry(key).or_insert(next);
        if i == next {
            self.patterns.push(p);
            self.counts.push(0.0);
        }
        self.counts[i] += 1.0;
    }

    fn finish(&mut self) {
        let total: f64 = self.counts.iter().sum();
        self.log_weights = self.counts.iter().map(|c| (c / total).ln()).collect();
    }

    /// `log p(window | class)` up to a class-independent constant, from
    /// per-position projections `t[k] = <r_k, d>/σ²` (NaN when absent).
    fn log_likelihood(&self, t: &[f64; 9], q: f64) -> f64 {
        let mut best = f64::NEG_INFINITY;
        let mut terms = Vec::with_capacity(self.patterns.len());
        for (p, lw) in self.patterns.iter().zip(&self.log_weights) {
            let mut ll = *lw;
            for k in 0..9 {
                if !t[k].is_nan() {
                    ll += p[k] * t[k] - p[k] * p[k] * q;
                }
            }
            best = best.max(ll);
            terms.push(ll);
        }
        best + terms.iter().map(|l| (l - best).exp()).sum::<f64>().ln()
    }
}

fn window_index(city: &SynthCity, r: usize, c: usize) -> impl Iterator<Item = (usize, Option<usize>)> + '_ {
    let (nr, nc) = (city.config.n_rows as i64, city.config.n_cols as i64);
    (0..9).map(move |k| {
        let rr = r as i64 + k as i64 / 3 - 1;
        let cc = c as i64 + k as i64 % 3 - 1;
        let inside = (0..nr).contains(&rr) && (0..nc).contains(&cc);
        (k, inside.then(|| (rr * nc + cc) as usize))
    })
}

/// Monte-Carlo estimate of the balanced-test kappa of the generative
/// model's posterior classifier.
///
/// Cities are drawn from seeds derived from `config.seed` until
/// `config.oracle_samples` labeled cells are covered. The prior over window
/// signal patterns is the empirical one of those cities; zone offsets and
/// σ are known. Out-of-grid and absent window positions are marginalized.
pub fn oracle_metrics(config: &SynthConfig) -> Result<OracleMetrics> {
    config.validate()?;
    let mut cities = Vec::new();
    let mut covered = 0usize;
    while covered < config.oracle_samples.max(1) {
        let seed = derive_seed(config.seed, "oracle-city", &[cities.len() as u64]);
        let city = generate_city_with_truth(&SynthConfig { seed, ..*config })?;
        covered += city.table.len();
        cities.push(city);
    }

    let mut prior = [PatternPrior::default(), PatternPrior::default()];
    for city in &cities {
        let (nr, nc) = (config.n_rows, config.n_cols);
        for r in 1..nr.saturating_sub(1) {
            for c in 1..nc.saturating_sub(1) {
                let mut p = [0.0; 9];
                for (k, i) in window_index(city, r, c) {
                    p[k] = city.signal[i.expect("interior window")];
                }
                prior[city.latent_labels[r * nc + c] as usize].add(p);
            }
        }
    }
    for p in &mut prior {
        if p.patterns.is_empty() {
            return Err(Error::Config("grid too small for an interior pattern prior".into()));
        }
        p.finish();
    }

    let d = prototype();
    let inv_var = 1.0 / (config.noise * config.noise);
    let q = 0.5 * inv_var;
    let (mut tp, mut fn_, mut tn, mut fp) = (0usize, 0usize, 0usize, 0usize);
    for city in &cities {
        let proj: HashMap<CellId, f64> = city
            .table
            .iter()
            .map(|rec| {
                let res = city.residual(rec);
                (rec.id(), res.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>() * inv_var)
            })
            .collect();
        for rec in city.table.iter() {
            let mut t = [f64::NAN; 9];
            for (k, i) in window_index(city, rec.row, rec.col) {
                if let Some(i) = i {
                    let id = CellId::new(i / config.n_cols, i % config.n_cols);
                    if let Some(v) = proj.get(&id) {
                        t[k] = *v;
                    }
                }
            }
            let favela = prior[1].log_likelihood(&t, q) >= prior[0].log_likelihood(&t, q);
            match (rec.label == Some(Label::Favela), favela) {
                (true, true) => tp += 1,
                (true, false) => fn_ += 1,
                (false, false) => tn += 1,
                (false, true) => fp += 1,
            }
        }
    }
    let tpr = tp as f64 / (tp + fn_).max(1) as f64;
    let tnr = tn as f64 / (tn + fp).max(1) as f64;
    Ok(OracleMetrics {
        kappa: tpr + tnr - 1.0,
        tpr,
        tnr,
        n_samples: covered,
        n_cities: cities.len(),
        n_patterns_favela: prior[1].patterns.len(),
        n_patterns_nonfavela: prior[0].patterns.len(),
    })
}

/// JSON sidecar: generating config, achieved class balance and, when
/// computed, oracle metrics.
pub fn sidecar_json(city: &SynthCity, oracle: Option<&OracleMetrics>) -> serde_json::Value {
    serde_json::json!({
        "config": city.config,
        "counts": city.summary(),
        "zones": city.config.zone_ids(),
        "zone_offsets": city.zone_offsets,
        "oracle": oracle,
    })
}
