//! Direct-path relative transfer function (DP-RTF) estimation.
//!
//! For every frequency bin the convolutive transfer functions (CTFs) of all
//! channels are identified blindly from the pairwise cross-relation
//! `y^m * h^n = y^n * h^m`. Fixing the first tap of the reference channel to
//! one turns each pair and frame into one linear equation `ỹ · h̃ = z` in the
//! remaining `M·Q - 1` unknowns, which are tracked with exponentially
//! forgetting recursive least squares. The first taps of the non-reference
//! channels, divided by the reference's first tap, are the DP-RTFs.
//!
//! Bins are fully independent; [`DpRtfEstimator`] updates them in parallel.

use std::io::Write;

use log::warn;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::stft::{BinMask, SpectrogramFrame};

pub const DEFAULT_CTF_LENGTH: usize = 8;
pub const DEFAULT_FORGETTING: f64 = 0.98;
pub const DEFAULT_INIT_EPSILON: f64 = 1e-2;
pub const DEFAULT_RESIDUAL_THRESHOLD: f64 = 0.5;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Index bookkeeping for the stacked CTF vector.
///
/// The full vector concatenates the `Q` taps of every channel; the reduced
/// vector drops the reference channel's first tap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CtfLayout {
    pub channels: usize,
    pub taps: usize,
    pub reference: usize,
}

impl CtfLayout {
    pub fn new(channels: usize, taps: usize, reference: usize) -> Result<Self> {
        if channels < 2 {
            return Err(Error::Config(format!("need at least 2 channels, got {channels}")));
        }
        if taps == 0 {
            return Err(Error::Config("CTF length must be at least 1".into()));
        }
        if reference >= channels {
            return Err(Error::Config(format!(
                "reference {reference} out of range for {channels} channels"
            )));
        }
        Ok(Self {
            channels,
            taps,
            reference,
        })
    }

    /// Length of the reduced unknown vector, `M·Q - 1`.
    pub fn dim(&self) -> usize {
        self.channels * self.taps - 1
    }

    fn removed(&self) -> usize {
        self.reference * self.taps
    }

    /// Position of (`channel`, `tap`) in the reduced vector; `None` for the
    /// constrained reference tap.
    pub fn reduced_index(&self, channel: usize, tap: usize) -> Option<usize> {
        let full = channel * self.taps + tap;
        let removed = self.removed();
        match full.cmp(&removed) {
            std::cmp::Ordering::Less => Some(full),
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Greater => Some(full - 1),
        }
    }

    pub fn num_pairs(&self) -> usize {
        self.channels * (self.channels - 1) / 2
    }

    /// All pairs `(m, n)` with `m < n`, in lexicographic order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> {
        let channels = self.channels;
        (0..channels).flat_map(move |m| ((m + 1)..channels).map(move |n| (m, n)))
    }

    pub fn non_reference_channels(&self) -> impl Iterator<Item = usize> {
        let r = self.reference;
        (0..self.channels).filter(move |&m| m != r)
    }
}

/// Per-channel delay lines holding the last `Q` STFT values of one bin.
#[derive(Debug, Clone)]
pub struct SignalHistory {
    channels: usize,
    taps: usize,
    data: Vec<Complex64>,
    head: usize,
    filled: usize,
}

impl SignalHistory {
    pub fn new(channels: usize, taps: usize) -> Self {
        Self {
            channels,
            taps,
            data: vec![ZERO; channels * taps],
            head: 0,
            filled: 0,
        }
    }

    /// Appends the newest frame's values (one per channel).
    pub fn push(&mut self, values: &[Complex64]) {
        debug_assert_eq!(values.len(), self.channels);
        self.head = (self.head + self.taps - 1) % self.taps;
        let slot = self.head * self.channels;
        self.data[slot..slot + self.channels].copy_from_slice(values);
        self.filled = (self.filled + 1).min(self.taps);
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn is_full(&self) -> bool {
        self.filled == self.taps
    }

    /// `y^m_{p-lag}` where `p` is the newest frame.
    #[inline]
    pub fn tap(&self, m: usize, lag: usize) -> Complex64 {
        self.data[((self.head + lag) % self.taps) * self.channels + m]
    }

    pub fn scale(&mut self, factor: Complex64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }
}

/// One cross-relation equation `regressor · h̃ = target`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossRelationRow {
    pub regressor: Vec<Complex64>,
    pub target: Complex64,
}

/// Same equation holding only the (at most `2Q`) structurally nonzero entries.
#[derive(Debug, Clone, Default)]
pub(crate) struct SparseRow {
    idx: Vec<usize>,
    val: Vec<Complex64>,
    target: Complex64,
}

impl SparseRow {
    fn with_capacity(n: usize) -> Self {
        Self {
            idx: Vec::with_capacity(n),
            val: Vec::with_capacity(n),
            target: ZERO,
        }
    }

    fn fill(&mut self, history: &SignalHistory, layout: &CtfLayout, m: usize, n: usize) {
        self.idx.clear();
        self.val.clear();
        self.target = ZERO;
        // Coefficient block of h^n is +y^m, of h^m is -y^n: y^m·h^n - y^n·h^m = 0.
        for (channel, source, sign) in [(m, n, -1.0), (n, m, 1.0)] {
            for lag in 0..layout.taps {
                let v = history.tap(source, lag) * sign;
                match layout.reduced_index(channel, lag) {
                    Some(i) => {
                        self.idx.push(i);
                        self.val.push(v);
                    }
                    None => self.target = -v,
                }
            }
        }
    }

    #[inline]
    fn dot(&self, h: &[Complex64]) -> Complex64 {
        self.idx
            .iter()
            .zip(&self.val)
            .fold(ZERO, |acc, (&i, &v)| acc + v * h[i])
    }

    fn to_dense(&self, dim: usize) -> CrossRelationRow {
        let mut regressor = vec![ZERO; dim];
        for (&i, &v) in self.idx.iter().zip(&self.val) {
            regressor[i] = v;
        }
        CrossRelationRow {
            regressor,
            target: self.target,
        }
    }

    fn from_dense(row: &CrossRelationRow) -> Self {
        let mut sparse = Self::with_capacity(row.regressor.len());
        for (i, &v) in row.regressor.iter().enumerate() {
            if v != ZERO {
                sparse.idx.push(i);
                sparse.val.push(v);
            }
        }
        sparse.target = row.target;
        sparse
    }
}

/// Builds the normalized cross-relation equation of pair `(m, n)` from the
/// last `Q` frames of one bin.
pub fn build_cross_relation_row(
    history: &SignalHistory,
    layout: &CtfLayout,
    pair: (usize, usize),
) -> Result<CrossRelationRow> {
    let (m, n) = pair;
    if m == n || m >= layout.channels || n >= layout.channels {
        return Err(Error::InvalidPair(m, n));
    }
    if !history.is_full() {
        return Err(Error::InsufficientHistory {
            needed: layout.taps,
            have: history.filled(),
        });
    }
    let mut row = SparseRow::with_capacity(2 * layout.taps);
    row.fill(history, layout, m, n);
    Ok(row.to_dense(layout.dim()))
}

/// Outcome of feeding one row into the recursion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RlsStatus {
    Updated,
    /// The inverse covariance lost positive definiteness; the state was reset.
    Reset,
}

/// RLS state of one frequency bin.
#[derive(Debug, Clone)]
pub struct CtfState {
    layout: CtfLayout,
    forgetting: f64,
    init_epsilon: f64,
    h: Vec<Complex64>,
    // Inverse covariance, row-major, split into re/im planes. Only the upper
    // triangle (j >= i) is maintained; the rest follows from Hermitian symmetry.
    p_re: Vec<f64>,
    p_im: Vec<f64>,
    history: SignalHistory,
    rows: Vec<SparseRow>,
    gain_re: Vec<f64>,
    gain_im: Vec<f64>,
    residual: f64,
    // Forgetting owed by frames that added no equations, applied lazily.
    pending_decay: f64,
    frames_updated: u64,
    resets: u64,
}

impl CtfState {
    pub fn new(layout: CtfLayout, forgetting: f64, init_epsilon: f64) -> Self {
        let n = layout.dim();
        let mut state = Self {
            layout,
            forgetting,
            init_epsilon,
            h: vec![ZERO; n],
            p_re: vec![0.0; n * n],
            p_im: vec![0.0; n * n],
            history: SignalHistory::new(layout.channels, layout.taps),
            rows: (0..layout.num_pairs())
                .map(|_| SparseRow::with_capacity(2 * layout.taps))
                .collect(),
            gain_re: vec![0.0; n],
            gain_im: vec![0.0; n],
            residual: f64::INFINITY,
            pending_decay: 1.0,
            frames_updated: 0,
            resets: 0,
        };
        state.reset_estimate();
        state
    }

    pub fn layout(&self) -> &CtfLayout {
        &self.layout
    }

    /// Current estimate of the normalized CTF vector `h̃`.
    pub fn estimate(&self) -> &[Complex64] {
        &self.h
    }

    pub fn history(&self) -> &SignalHistory {
        &self.history
    }

    pub fn history_mut(&mut self) -> &mut SignalHistory {
        &mut self.history
    }

    /// Normalized a-posteriori fit error of the last updated frame.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn frames_updated(&self) -> u64 {
        self.frames_updated
    }

    pub fn resets(&self) -> u64 {
        self.resets
    }

    /// Full (Hermitian) inverse covariance matrix, row-major.
    pub fn inverse_covariance(&self) -> Vec<Complex64> {
        let n = self.layout.dim();
        let mut out = vec![ZERO; n * n];
        for i in 0..n {
            for j in i..n {
                let v = Complex64::new(self.p_re[i * n + j], self.p_im[i * n + j]);
                out[i * n + j] = v;
                out[j * n + i] = v.conj();
            }
        }
        out
    }

    /// DP-RTFs `h^m_0 / h^r_0` for every non-reference channel, in channel order.
    pub fn direct_path(&self) -> Vec<Complex64> {
        self.layout
            .non_reference_channels()
            .map(|m| self.h[self.layout.reduced_index(m, 0).expect("non-reference")])
            .collect()
    }

    fn reset_estimate(&mut self) {
        let n = self.layout.dim();
        self.h.fill(ZERO);
        self.p_re.fill(0.0);
        self.p_im.fill(0.0);
        for i in 0..n {
            self.p_re[i * n + i] = 1.0 / self.init_epsilon;
        }
    }

    /// Discounts all past equations by the forgetting factor, once for this
    /// frame and once for every gated frame since the last update. The
    /// gated share stops where the largest variance reaches the prior's, so
    /// a long silence forgets the old fit without winding up the covariance.
    pub fn begin_frame(&mut self) {
        let mut owed = std::mem::replace(&mut self.pending_decay, 1.0);
        let n = self.layout.dim();
        if owed > 1.0 {
            let max_diag = (0..n).map(|i| self.p_re[i * n + i]).fold(0.0, f64::max);
            owed = owed.min((1.0 / self.init_epsilon / max_diag).max(1.0));
        }
        let s = owed / self.forgetting;
        if s == 1.0 {
            return;
        }
        for i in 0..n {
            for v in &mut self.p_re[i * n + i..(i + 1) * n] {
                *v *= s;
            }
            for v in &mut self.p_im[i * n + i..(i + 1) * n] {
                *v *= s;
            }
        }
    }

    /// One recursive least-squares step on a single equation, without
    /// forgetting (forgetting is applied once per frame by [`Self::begin_frame`]).
    pub fn rls_update(&mut self, row: &CrossRelationRow) -> RlsStatus {
        let sparse = SparseRow::from_dense(row);
        if self.update_sparse(&sparse) && self.covariance_healthy() {
            RlsStatus::Updated
        } else {
            self.diverged();
            RlsStatus::Reset
        }
    }

    fn update_sparse(&mut self, row: &SparseRow) -> bool {
        let n = self.layout.dim();
        let (p_re, p_im) = (&self.p_re, &self.p_im);
        let (g_re, g_im) = (&mut self.gain_re[..n], &mut self.gain_im[..n]);
        g_re.fill(0.0);
        g_im.fill(0.0);

        // g = P x with x = conj(row). Column j of P: stored entries above the
        // diagonal, conjugated row j below it.
        for (&j, &v) in row.idx.iter().zip(&row.val) {
            let (xr, xi) = (v.re, -v.im);
            for i in 0..=j {
                let (a, b) = (p_re[i * n + j], p_im[i * n + j]);
                g_re[i] += a * xr - b * xi;
                g_im[i] += a * xi + b * xr;
            }
            let (pr, pi) = (&p_re[j * n..(j + 1) * n], &p_im[j * n..(j + 1) * n]);
            let (pr, pi) = (&pr[..n], &pi[..n]);
            for i in (j + 1)..n {
                let (a, b) = (pr[i], -pi[i]);
                g_re[i] += a * xr - b * xi;
                g_im[i] += a * xi + b * xr;
            }
        }

        // gamma = 1 + x^H P x = 1 + row · g
        let mut gamma = 1.0;
        for (&j, &v) in row.idx.iter().zip(&row.val) {
            gamma += v.re * g_re[j] - v.im * g_im[j];
        }
        if !(gamma.is_finite() && gamma >= 1.0 - 1e-9) {
            return false;
        }

        let err = row.target - row.dot(&self.h);
        let inv = 1.0 / gamma;
        for (i, h) in self.h.iter_mut().enumerate() {
            *h += Complex64::new(g_re[i] * inv, g_im[i] * inv) * err;
        }

        // P -= g g^H / gamma on the upper triangle.
        let (p_re, p_im) = (&mut self.p_re, &mut self.p_im);
        for i in 0..n {
            let (a, b) = (g_re[i] * inv, g_im[i] * inv);
            let len = n - i;
            let (pr, pi) = (&mut p_re[i * n + i..(i + 1) * n], &mut p_im[i * n + i..(i + 1) * n]);
            let (pr, pi, gr, gi) = (&mut pr[..len], &mut pi[..len], &g_re[i..i + len], &g_im[i..i + len]);
            for t in 0..len {
                pr[t] -= a * gr[t] + b * gi[t];
                pi[t] -= b * gr[t] - a * gi[t];
            }
            pi[0] = 0.0;
        }
        true
    }

    fn diverged(&mut self) {
        self.resets += 1;
        warn!(
            "RLS inverse covariance lost positive definiteness (reset #{}); restarting estimate",
            self.resets
        );
        self.reset_estimate();
        self.residual = f64::INFINITY;
    }

    fn covariance_healthy(&self) -> bool {
        let n = self.layout.dim();
        (0..n).all(|i| {
            let d = self.p_re[i * n + i];
            d.is_finite() && d > 0.0
        }) && self.h.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    /// Pushes this frame's values into the delay lines and, when `active`
    /// and enough history is buffered, applies the forgetting factor and
    /// feeds the equations of all channel pairs in lexicographic order.
    /// Inactive frames add no equations but still age the old ones.
    /// Returns the status when an update happened.
    pub fn process_frame(&mut self, values: &[Complex64], active: bool) -> Option<RlsStatus> {
        self.history.push(values);
        if !active || !self.history.is_full() {
            // Forgetting counts frames, not updates.
            if self.frames_updated > 0 {
                self.pending_decay = (self.pending_decay / self.forgetting).min(1e12);
            }
            return None;
        }
        let layout = self.layout;
        for (row, (m, n)) in self.rows.iter_mut().zip(layout.pairs()) {
            row.fill(&self.history, &layout, m, n);
        }
        self.begin_frame();
        let rows = std::mem::take(&mut self.rows);
        let ok = rows.iter().all(|row| self.update_sparse(row));
        let status = if ok && self.covariance_healthy() {
            let mut err = 0.0;
            let mut norm = 0.0;
            for row in &rows {
                err += (row.target - row.dot(&self.h)).norm_sqr();
                norm += row.target.norm_sqr();
            }
            self.residual = if norm > 0.0 { err / norm } else { f64::INFINITY };
            self.frames_updated += 1;
            RlsStatus::Updated
        } else {
            self.diverged();
            RlsStatus::Reset
        };
        self.rows = rows;
        Some(status)
    }
}

/// One localization feature: the DP-RTFs of all non-reference channels at
/// one time-frequency point.
#[derive(Debug, Clone, PartialEq)]
pub struct DpRtfFeature {
    pub frame: usize,
    pub bin: usize,
    /// `a^m_{p,k}` for each non-reference channel, in channel order.
    pub values: Vec<Complex64>,
    pub residual: f64,
    pub reliable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorParams {
    pub ctf_length: usize,
    pub forgetting: f64,
    pub init_epsilon: f64,
    pub residual_threshold: f64,
}

impl Default for EstimatorParams {
    fn default() -> Self {
        Self {
            ctf_length: DEFAULT_CTF_LENGTH,
            forgetting: DEFAULT_FORGETTING,
            init_epsilon: DEFAULT_INIT_EPSILON,
            residual_threshold: DEFAULT_RESIDUAL_THRESHOLD,
        }
    }
}

impl EstimatorParams {
    pub fn validate(&self) -> Result<()> {
        if self.ctf_length == 0 {
            return Err(Error::Config("CTF length Q must be at least 1".into()));
        }
        if !(self.forgetting > 0.0 && self.forgetting <= 1.0) {
            return Err(Error::Config(format!(
                "forgetting factor must be in (0, 1], got {}",
                self.forgetting
            )));
        }
        if !(self.init_epsilon > 0.0) {
            return Err(Error::Config("RLS initialization epsilon must be positive".into()));
        }
        if !(self.residual_threshold >= 0.0) {
            return Err(Error::Config("residual threshold must be non-negative".into()));
        }
        Ok(())
    }
}

/// Reads DP-RTF features out of updated bin states. Bins outside `mask` and
/// bins that were never updated produce nothing.
pub fn extract_features(
    states: &[CtfState],
    frame: usize,
    mask: &BinMask,
    residual_threshold: f64,
) -> Vec<DpRtfFeature> {
    states
        .iter()
        .enumerate()
        .filter(|(k, s)| mask.contains(*k) && s.frames_updated() > 0)
        .map(|(bin, s)| {
            let values = s.direct_path();
            let finite = values.iter().all(|v| v.re.is_finite() && v.im.is_finite());
            DpRtfFeature {
                frame,
                bin,
                values,
                residual: s.residual(),
                reliable: finite && s.residual() <= residual_threshold,
            }
        })
        .collect()
}

/// Bank of independent per-bin estimators.
#[derive(Debug, Clone)]
pub struct DpRtfEstimator {
    layout: CtfLayout,
    params: EstimatorParams,
    states: Vec<CtfState>,
}

impl DpRtfEstimator {
    pub fn new(channels: usize, reference: usize, bins: usize, params: EstimatorParams) -> Result<Self> {
        params.validate()?;
        let layout = CtfLayout::new(channels, params.ctf_length, reference)?;
        let proto = CtfState::new(layout, params.forgetting, params.init_epsilon);
        Ok(Self {
            layout,
            params,
            states: vec![proto; bins],
        })
    }

    pub fn layout(&self) -> &CtfLayout {
        &self.layout
    }

    pub fn params(&self) -> &EstimatorParams {
        &self.params
    }

    pub fn states(&self) -> &[CtfState] {
        &self.states
    }

    pub fn state(&self, k: usize) -> &CtfState {
        &self.states[k]
    }

    pub fn total_resets(&self) -> u64 {
        self.states.iter().map(CtfState::resets).sum()
    }

    /// Updates every bin with the new frame (bins outside `mask` only advance
    /// their delay lines) and returns the features of the masked-in bins.
    pub fn process_frame(&mut self, frame: &SpectrogramFrame, mask: &BinMask) -> Vec<DpRtfFeature> {
        self.states.par_iter_mut().enumerate().for_each(|(k, state)| {
            state.process_frame(frame.bin(k), mask.contains(k));
        });
        extract_features(&self.states, frame.index, mask, self.params.residual_threshold)
    }
}

/// Debug dump: one line per (frame, bin, channel).
pub fn write_features_csv<W: Write>(
    out: &mut W,
    features: &[DpRtfFeature],
    channels: &[usize],
) -> std::io::Result<()> {
    for f in features {
        for (&m, v) in channels.iter().zip(&f.values) {
            writeln!(out, "{},{},{},{:e},{:e},{}", f.frame, f.bin, m, v.re, v.im, f.reliable)?;
        }
    }
    Ok(())
}
