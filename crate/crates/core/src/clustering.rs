//! Complex Gaussian mixture over candidate azimuths.
//!
//! Each DP-RTF feature is modelled as a mixture of complex Gaussians whose
//! means are the far-field steering values of the candidate directions. The
//! mixture weights are tracked over time with a recursive EM step, their
//! peaks are the detected sources, and each peak grows into an angular
//! region by scanning outwards while the weights keep decreasing.

use serde::Serialize;

use crate::dprtf::DpRtfFeature;
use crate::error::{Error, Result};
use crate::geometry::{CandidateGrid, SteeringTable};

pub const DEFAULT_VARIANCE: f64 = 0.5;
pub const DEFAULT_SMOOTHING: f64 = 0.05;
pub const DEFAULT_MIN_SEPARATION_DEG: f64 = 15.0;
pub const DEFAULT_REGION_DELTA: f64 = 0.3;
/// Weights are kept above this so no direction becomes unrecoverable.
pub const WEIGHT_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusteringParams {
    pub variance: f64,
    pub smoothing: f64,
    /// Absolute weight a peak must reach; `None` means twice the uniform weight.
    pub peak_threshold: Option<f64>,
    pub min_separation_deg: f64,
    pub delta: f64,
    /// Optional clamp on each side of an emitted region.
    pub max_half_width_deg: Option<f64>,
}

impl Default for ClusteringParams {
    fn default() -> Self {
        Self {
            variance: DEFAULT_VARIANCE,
            smoothing: DEFAULT_SMOOTHING,
            peak_threshold: None,
            min_separation_deg: DEFAULT_MIN_SEPARATION_DEG,
            delta: DEFAULT_REGION_DELTA,
            max_half_width_deg: None,
        }
    }
}

impl ClusteringParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.variance > 0.0 && self.variance.is_finite()) {
            return Err(Error::Config(format!("variance must be positive, got {}", self.variance)));
        }
        if !(self.smoothing > 0.0 && self.smoothing <= 1.0) {
            return Err(Error::Config(format!(
                "EM smoothing factor must be in (0, 1], got {}",
                self.smoothing
            )));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Config(format!("delta must be in [0, 1], got {}", self.delta)));
        }
        if !(self.min_separation_deg >= 0.0) {
            return Err(Error::Config("minimum peak separation must be non-negative".into()));
        }
        if let Some(t) = self.peak_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("peak threshold must be in [0, 1], got {t}")));
            }
        }
        if let Some(w) = self.max_half_width_deg {
            if !(w >= 0.0) {
                return Err(Error::Config("maximum region half-width must be non-negative".into()));
            }
        }
        Ok(())
    }

    pub fn threshold(&self, directions: usize) -> f64 {
        self.peak_threshold.unwrap_or(2.0 / directions as f64)
    }
}

/// Log-likelihood of `feature` under every candidate direction: the product
/// of per-channel complex Gaussians `N_c(a; ā, σ²)`, taken in the log domain.
pub fn feature_log_likelihoods(feature: &DpRtfFeature, table: &SteeringTable, variance: f64) -> Vec<f64> {
    let mut out = vec![0.0; table.directions()];
    feature_log_likelihoods_into(feature, table, variance, &mut out);
    out
}

fn feature_log_likelihoods_into(
    feature: &DpRtfFeature,
    table: &SteeringTable,
    variance: f64,
    out: &mut [f64],
) {
    let norm = -(feature.values.len() as f64) * (std::f64::consts::PI * variance).ln();
    let inv = 1.0 / variance;
    for (d, ll) in out.iter_mut().enumerate() {
        let dist: f64 = table
            .means(feature.bin, d)
            .iter()
            .zip(&feature.values)
            .map(|(mean, a)| (a - mean).norm_sqr())
            .sum();
        *ll = norm - dist * inv;
    }
}

/// Posterior over directions given log-likelihoods and prior weights; adds
/// the result into `acc` and returns `log Σ_d w_d N_d`.
fn accumulate_posterior(weights: &[f64], ll: &[f64], scratch: &mut [f64], acc: &mut [f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for ((s, &w), &l) in scratch.iter_mut().zip(weights).zip(ll) {
        *s = if w > 0.0 { w.ln() + l } else { f64::NEG_INFINITY };
        max = max.max(*s);
    }
    let mut total = 0.0;
    for s in scratch.iter_mut() {
        *s = (*s - max).exp();
        total += *s;
    }
    for (a, s) in acc.iter_mut().zip(scratch.iter()) {
        *a += s / total;
    }
    max + total.ln()
}

fn reliable(features: &[DpRtfFeature]) -> impl Iterator<Item = &DpRtfFeature> {
    features.iter().filter(|f| f.reliable)
}

/// Result of fitting the mixture weights to a fixed feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEm {
    pub weights: Vec<f64>,
    /// Objective before each M-step, one entry per iteration.
    pub log_likelihood: Vec<f64>,
    /// No reliable feature was available; the weights are the uniform prior.
    pub silent: bool,
}

/// Batch EM over the mixture weights from a uniform start.
pub fn em_batch(features: &[DpRtfFeature], table: &SteeringTable, variance: f64, iterations: usize) -> BatchEm {
    let d = table.directions();
    em_batch_from(features, table, variance, iterations, &vec![1.0 / d as f64; d])
}

pub fn em_batch_from(
    features: &[DpRtfFeature],
    table: &SteeringTable,
    variance: f64,
    iterations: usize,
    start: &[f64],
) -> BatchEm {
    let d = table.directions();
    let lls: Vec<Vec<f64>> = reliable(features)
        .map(|f| feature_log_likelihoods(f, table, variance))
        .collect();
    if lls.is_empty() {
        return BatchEm {
            weights: vec![1.0 / d as f64; d],
            log_likelihood: Vec::new(),
            silent: true,
        };
    }
    let mut weights = start.to_vec();
    let mut history = Vec::with_capacity(iterations);
    let mut scratch = vec![0.0; d];
    for _ in 0..iterations {
        let mut acc = vec![0.0; d];
        let mut objective = 0.0;
        for ll in &lls {
            objective += accumulate_posterior(&weights, ll, &mut scratch, &mut acc);
        }
        history.push(objective);
        let n = lls.len() as f64;
        for (w, a) in weights.iter_mut().zip(&acc) {
            *w = a / n;
        }
    }
    BatchEm {
        weights,
        log_likelihood: history,
        silent: false,
    }
}

/// Time-varying mixture weights updated once per frame.
#[derive(Debug, Clone)]
pub struct MixtureState {
    weights: Vec<f64>,
    variance: f64,
    smoothing: f64,
    ll: Vec<f64>,
    scratch: Vec<f64>,
    frame_stats: Vec<f64>,
}

impl MixtureState {
    pub fn new(directions: usize, variance: f64, smoothing: f64) -> Self {
        Self::with_weights(vec![1.0 / directions as f64; directions], variance, smoothing)
    }

    pub fn with_weights(weights: Vec<f64>, variance: f64, smoothing: f64) -> Self {
        let d = weights.len();
        Self {
            weights,
            variance,
            smoothing,
            ll: vec![0.0; d],
            scratch: vec![0.0; d],
            frame_stats: vec![0.0; d],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    /// Blends the mean responsibility of this frame's reliable features into
    /// the weights. Returns false (weights untouched) when there are none.
    pub fn update(&mut self, features: &[DpRtfFeature], table: &SteeringTable) -> bool {
        self.frame_stats.fill(0.0);
        let mut count = 0usize;
        for f in reliable(features) {
            feature_log_likelihoods_into(f, table, self.variance, &mut self.ll);
            accumulate_posterior(&self.weights, &self.ll, &mut self.scratch, &mut self.frame_stats);
            count += 1;
        }
        if count == 0 {
            return false;
        }
        let rho = self.smoothing;
        let inv = 1.0 / count as f64;
        for (w, s) in self.weights.iter_mut().zip(&self.frame_stats) {
            *w = ((1.0 - rho) * *w + rho * s * inv).max(WEIGHT_FLOOR);
        }
        let total: f64 = self.weights.iter().sum();
        for w in &mut self.weights {
            *w /= total;
        }
        true
    }
}

/// Circular local maxima at or above `threshold`, kept greedily by
/// descending weight (ties toward the lower index) while every kept pair is
/// at least `min_separation_deg` apart.
pub fn detect_peaks(weights: &[f64], threshold: f64, min_separation_deg: f64, grid: &CandidateGrid) -> Vec<usize> {
    let d = weights.len();
    if d == 0 {
        return Vec::new();
    }
    let mut candidates: Vec<usize> = (0..d)
        .filter(|&i| {
            let w = weights[i];
            w >= threshold && w >= weights[(i + d - 1) % d] && w >= weights[(i + 1) % d]
        })
        .collect();
    candidates.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for c in candidates {
        let far = kept
            .iter()
            .all(|&k| grid.index_distance(c, k) as f64 * grid.spacing_deg() >= min_separation_deg - 1e-9);
        if far {
            kept.push(c);
        }
    }
    kept
}

/// Region boundaries around one peak, in direction-index units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RegionBounds {
    pub center: usize,
    /// Boundary reached scanning toward decreasing index.
    pub b_left: usize,
    /// Boundary reached scanning toward increasing index.
    pub b_right: usize,
    pub left_steps: usize,
    pub right_steps: usize,
}

fn scan(weights: &[f64], peak: usize, delta: f64, forward: bool) -> usize {
    let d = weights.len();
    let floor = delta * weights[peak];
    let step = |i: usize| if forward { (i + 1) % d } else { (i + d - 1) % d };
    let mut cur = peak;
    let mut steps = 0;
    while steps < d / 2 {
        let next = step(cur);
        if weights[next] >= weights[cur] || weights[next] < floor {
            break;
        }
        cur = next;
        steps += 1;
    }
    steps
}

/// Grows a region from `peak` on both sides: a side stops at the first
/// direction whose outward neighbour either does not decrease or falls below
/// `delta` times the peak weight. Each side covers at most half the circle.
pub fn region_boundaries(weights: &[f64], peak: usize, delta: f64) -> RegionBounds {
    let d = weights.len();
    let right_steps = scan(weights, peak, delta, true);
    let left_steps = scan(weights, peak, delta, false);
    RegionBounds {
        center: peak,
        b_left: (peak + d - left_steps) % d,
        b_right: (peak + right_steps) % d,
        left_steps,
        right_steps,
    }
}

/// A region in degrees, unwrapped so that `low_deg <= center_deg <= high_deg`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AngularRegion {
    pub center_deg: f64,
    pub low_deg: f64,
    pub high_deg: f64,
}

impl RegionBounds {
    pub fn to_angles(&self, grid: &CandidateGrid, max_half_width_deg: Option<f64>) -> AngularRegion {
        let spacing = grid.spacing_deg();
        let clamp = |w: f64| max_half_width_deg.map_or(w, |m| w.min(m));
        let center = grid.azimuth_deg(self.center);
        AngularRegion {
            center_deg: center,
            low_deg: center - clamp(self.left_steps as f64 * spacing),
            high_deg: center + clamp(self.right_steps as f64 * spacing),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Peak {
    pub index: usize,
    pub azimuth_deg: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SslRegion {
    #[serde(flatten)]
    pub bounds: RegionBounds,
    #[serde(flatten)]
    pub angles: AngularRegion,
}

/// Per-frame localization output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SslFrame {
    pub frame: usize,
    pub timestamp: f64,
    /// Written separately as CSV.
    #[serde(skip_serializing)]
    pub weights: Vec<f64>,
    pub peaks: Vec<Peak>,
    pub regions: Vec<SslRegion>,
    pub sources: usize,
    /// Number of reliable features that entered this frame's update.
    pub features: usize,
}

impl SslFrame {
    pub fn argmax(&self) -> usize {
        argmax(&self.weights)
    }
}

pub fn argmax(weights: &[f64]) -> usize {
    weights
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bw), (i, &w)| if w > bw { (i, w) } else { (bi, bw) })
        .0
}

/// Recursive mixture tracking plus peak and region extraction.
#[derive(Debug, Clone)]
pub struct SourceTracker {
    grid: CandidateGrid,
    table: SteeringTable,
    params: ClusteringParams,
    state: MixtureState,
}

impl SourceTracker {
    pub fn new(grid: CandidateGrid, table: SteeringTable, params: ClusteringParams) -> Result<Self> {
        params.validate()?;
        if table.directions() != grid.len() {
            return Err(Error::DimensionMismatch {
                expected: (grid.len(), table.bins()),
                found: (table.directions(), table.bins()),
            });
        }
        let state = MixtureState::new(grid.len(), params.variance, params.smoothing);
        Ok(Self {
            grid,
            table,
            params,
            state,
        })
    }

    pub fn grid(&self) -> &CandidateGrid {
        &self.grid
    }

    pub fn table(&self) -> &SteeringTable {
        &self.table
    }

    pub fn params(&self) -> &ClusteringParams {
        &self.params
    }

    pub fn state(&self) -> &MixtureState {
        &self.state
    }

    pub fn process(&mut self, frame: usize, timestamp: f64, features: &[DpRtfFeature]) -> SslFrame {
        self.state.update(features, &self.table);
        let weights = self.state.weights().to_vec();
        let threshold = self.params.threshold(self.grid.len());
        let peak_idx = detect_peaks(&weights, threshold, self.params.min_separation_deg, &self.grid);
        let peaks: Vec<Peak> = peak_idx
            .iter()
            .map(|&i| Peak {
                index: i,
                azimuth_deg: self.grid.azimuth_deg(i),
                weight: weights[i],
            })
            .collect();
        let regions: Vec<SslRegion> = peak_idx
            .iter()
            .map(|&i| {
                let bounds = region_boundaries(&weights, i, self.params.delta);
                SslRegion {
                    bounds,
                    angles: bounds.to_angles(&self.grid, self.params.max_half_width_deg),
                }
            })
            .collect();
        SslFrame {
            frame,
            timestamp,
            sources: peaks.len(),
            features: features.iter().filter(|f| f.reliable).count(),
            weights,
            peaks,
            regions,
        }
    }
}

/// Plotting dump: one row per frame, `frame,timestamp,w_0,…,w_{D-1}`.
pub fn write_weights_csv_row<W: std::io::Write>(out: &mut W, frame: &SslFrame) -> std::io::Result<()> {
    write!(out, "{},{:.6}", frame.frame, frame.timestamp)?;
    for w in &frame.weights {
        write!(out, ",{w:.6e}")?;
    }
    writeln!(out)
}
