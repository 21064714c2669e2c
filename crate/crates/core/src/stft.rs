//! STFT analysis, overlap-add synthesis and the per-bin energy gate.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::audio::AudioClip;
use crate::error::{Error, Result};

pub const DEFAULT_WINDOW: usize = 256;
pub const DEFAULT_HOP: usize = 128;

/// Periodic Hann window of length `n`.
pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// STFT coefficients of all channels for one frame, stored bin-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramFrame {
    pub index: usize,
    channels: usize,
    bins: usize,
    coeffs: Vec<Complex64>,
}

impl SpectrogramFrame {
    pub fn zeros(index: usize, channels: usize, bins: usize) -> Self {
        Self {
            index,
            channels,
            bins,
            coeffs: vec![Complex64::new(0.0, 0.0); channels * bins],
        }
    }

    /// Builds a frame from per-channel spectra (`spectra[m][k]`).
    pub fn from_channels(index: usize, spectra: &[Vec<Complex64>]) -> Self {
        let channels = spectra.len();
        let bins = spectra.first().map_or(0, Vec::len);
        let mut frame = Self::zeros(index, channels, bins);
        for (m, s) in spectra.iter().enumerate() {
            for (k, &v) in s.iter().enumerate() {
                frame.set(m, k, v);
            }
        }
        frame
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    #[inline]
    pub fn get(&self, m: usize, k: usize) -> Complex64 {
        self.coeffs[k * self.channels + m]
    }

    #[inline]
    pub fn set(&mut self, m: usize, k: usize, v: Complex64) {
        self.coeffs[k * self.channels + m] = v;
    }

    /// All channel coefficients of bin `k`.
    #[inline]
    pub fn bin(&self, k: usize) -> &[Complex64] {
        &self.coeffs[k * self.channels..(k + 1) * self.channels]
    }

    /// Channel-averaged power of bin `k`.
    pub fn bin_power(&self, k: usize) -> f64 {
        self.bin(k).iter().map(Complex64::norm_sqr).sum::<f64>() / self.channels as f64
    }

    pub fn scale(&mut self, factor: Complex64) {
        for c in &mut self.coeffs {
            *c *= factor;
        }
    }
}

/// Windowed FFT of fixed-length multichannel blocks.
pub struct StftAnalyzer {
    window: Vec<f64>,
    hop: usize,
    fft: Arc<dyn Fft<f64>>,
    buffer: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl std::fmt::Debug for StftAnalyzer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftAnalyzer")
            .field("window", &self.window.len())
            .field("hop", &self.hop)
            .finish()
    }
}

impl StftAnalyzer {
    pub fn new(window: usize, hop: usize) -> Result<Self> {
        if hop == 0 {
            return Err(Error::StftParams("hop must be at least 1".into()));
        }
        if window < hop {
            return Err(Error::StftParams(format!(
                "window ({window}) must not be shorter than hop ({hop})"
            )));
        }
        let fft = FftPlanner::new().plan_fft_forward(window);
        let scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        Ok(Self {
            window: hann_periodic(window),
            hop,
            fft,
            buffer: vec![Complex64::new(0.0, 0.0); window],
            scratch,
        })
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn bins(&self) -> usize {
        self.window.len() / 2 + 1
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Transforms one block per channel; each slice must hold at least one
    /// window of samples starting at the frame's first sample.
    pub fn analyze<S: AsRef<[f32]>>(&mut self, index: usize, blocks: &[S]) -> SpectrogramFrame {
        let bins = self.bins();
        let mut frame = SpectrogramFrame::zeros(index, blocks.len(), bins);
        for (m, block) in blocks.iter().enumerate() {
            let block = block.as_ref();
            for ((b, &s), &w) in self.buffer.iter_mut().zip(block).zip(&self.window) {
                *b = Complex64::new(s as f64 * w, 0.0);
            }
            self.fft.process_with_scratch(&mut self.buffer, &mut self.scratch);
            for k in 0..bins {
                frame.set(m, k, self.buffer[k]);
            }
        }
        frame
    }
}

/// Number of full frames in `len` samples.
pub fn frame_count(len: usize, window: usize, hop: usize) -> usize {
    if len < window {
        0
    } else {
        (len - window) / hop + 1
    }
}

/// Frame timestamp (frame center) in seconds.
pub fn frame_center_secs(index: usize, window: usize, hop: usize, sample_rate: f64) -> f64 {
    (index * hop) as f64 / sample_rate + window as f64 / (2.0 * sample_rate)
}

/// Iterator over the STFT frames of a whole clip.
pub struct StftFrames<'a> {
    clip: &'a AudioClip,
    analyzer: StftAnalyzer,
    next: usize,
    count: usize,
}

impl Iterator for StftFrames<'_> {
    type Item = SpectrogramFrame;

    fn next(&mut self) -> Option<SpectrogramFrame> {
        if self.next >= self.count {
            return None;
        }
        let start = self.next * self.analyzer.hop();
        let end = start + self.analyzer.window_len();
        let blocks: Vec<&[f32]> = self.clip.channels().iter().map(|c| &c[start..end]).collect();
        let frame = self.analyzer.analyze(self.next, &blocks);
        self.next += 1;
        Some(frame)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.count - self.next;
        (n, Some(n))
    }
}

impl ExactSizeIterator for StftFrames<'_> {}

/// Frames `floor((T - window) / hop) + 1` periodic-Hann STFT frames.
pub fn stft_stream(clip: &AudioClip, window: usize, hop: usize) -> Result<StftFrames<'_>> {
    let analyzer = StftAnalyzer::new(window, hop)?;
    if clip.len() < window {
        return Err(Error::ClipTooShort {
            samples: clip.len(),
            window,
        });
    }
    Ok(StftFrames {
        clip,
        count: frame_count(clip.len(), window, hop),
        analyzer,
        next: 0,
    })
}

/// Incremental analyzer: accepts interleaved chunks of any size and emits
/// frames as soon as a full window is buffered. Emits exactly the frames
/// [`stft_stream`] would produce for the concatenated input.
#[derive(Debug)]
pub struct StreamingStft {
    analyzer: StftAnalyzer,
    channels: usize,
    pending: Vec<Vec<f32>>,
    next_index: usize,
}

impl StreamingStft {
    pub fn new(channels: usize, window: usize, hop: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::StftParams("need at least one channel".into()));
        }
        Ok(Self {
            analyzer: StftAnalyzer::new(window, hop)?,
            channels,
            pending: vec![Vec::new(); channels],
            next_index: 0,
        })
    }

    pub fn bins(&self) -> usize {
        self.analyzer.bins()
    }

    pub fn push_interleaved(&mut self, samples: &[f32], out: &mut Vec<SpectrogramFrame>) {
        for frame in samples.chunks_exact(self.channels) {
            for (p, &s) in self.pending.iter_mut().zip(frame) {
                p.push(s);
            }
        }
        self.drain(out);
    }

    pub fn push_planar<S: AsRef<[f32]>>(&mut self, channels: &[S], out: &mut Vec<SpectrogramFrame>) {
        for (p, c) in self.pending.iter_mut().zip(channels) {
            p.extend_from_slice(c.as_ref());
        }
        self.drain(out);
    }

    fn drain(&mut self, out: &mut Vec<SpectrogramFrame>) {
        let window = self.analyzer.window_len();
        let hop = self.analyzer.hop();
        let mut consumed = 0;
        while self.pending[0].len() - consumed >= window {
            let blocks: Vec<&[f32]> = self
                .pending
                .iter()
                .map(|p| &p[consumed..consumed + window])
                .collect();
            out.push(self.analyzer.analyze(self.next_index, &blocks));
            self.next_index += 1;
            consumed += hop;
        }
        if consumed > 0 {
            for p in &mut self.pending {
                p.drain(..consumed.min(p.len()));
            }
        }
    }
}

/// Overlap-add resynthesis of one channel from its one-sided spectra.
/// Normalizes by the summed analysis window, so unmodified spectra
/// reconstruct the input wherever the windows cover it.
pub fn overlap_add(spectra: &[Vec<Complex64>], window: usize, hop: usize, len: usize) -> Vec<f64> {
    let inverse = FftPlanner::new().plan_fft_inverse(window);
    let analysis = hann_periodic(window);
    let mut out = vec![0.0; len];
    let mut norm = vec![0.0; len];
    let mut buf = vec![Complex64::new(0.0, 0.0); window];
    for (p, spectrum) in spectra.iter().enumerate() {
        let bins = spectrum.len();
        for k in 0..window {
            buf[k] = if k < bins {
                spectrum[k]
            } else {
                spectrum[window - k].conj()
            };
        }
        inverse.process(&mut buf);
        let start = p * hop;
        for n in 0..window {
            let t = start + n;
            if t >= len {
                break;
            }
            out[t] += buf[n].re / window as f64;
            norm[t] += analysis[n];
        }
    }
    for (o, n) in out.iter_mut().zip(&norm) {
        if *n > 1e-8 {
            *o /= n;
        } else {
            *o = 0.0;
        }
    }
    out
}

/// Set of usable frequency bins for one frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinMask(Vec<bool>);

impl BinMask {
    pub fn none(bins: usize) -> Self {
        Self(vec![false; bins])
    }

    pub fn all(bins: usize) -> Self {
        Self(vec![true; bins])
    }

    pub fn from_vec(v: Vec<bool>) -> Self {
        Self(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().all(|b| !b)
    }

    pub fn contains(&self, k: usize) -> bool {
        self.0.get(k).copied().unwrap_or(false)
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn set(&mut self, k: usize, value: bool) {
        self.0[k] = value;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

/// Default ratio of bin power to the noise estimate for a bin to pass the gate.
pub const DEFAULT_GATE_FACTOR: f64 = 3.0;

/// Power below which a bin is treated as silent regardless of the noise estimate.
pub const ABSOLUTE_POWER_FLOOR: f64 = 1e-12;

/// Marks bin `k` usable iff its channel-averaged power exceeds
/// `factor * noise[k]` (and the absolute silence floor).
pub fn select_reliable_bins(frame: &SpectrogramFrame, factor: f64, noise: &[f64]) -> BinMask {
    BinMask(
        (0..frame.bins())
            .map(|k| {
                let p = frame.bin_power(k);
                p > ABSOLUTE_POWER_FLOOR && p > factor * noise[k]
            })
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseTrackerParams {
    /// Recursive smoothing of the periodogram.
    pub smoothing: f64,
    /// Minimum-search sub-window, in frames.
    pub tracking_frames: usize,
    /// Smoothed power above `presence_ratio * minimum` counts as signal.
    pub presence_ratio: f64,
    /// Recursive averaging factor for the noise estimate in signal-absent bins.
    pub noise_smoothing: f64,
}

impl Default for NoiseTrackerParams {
    fn default() -> Self {
        Self {
            smoothing: 0.7,
            tracking_frames: 125,
            presence_ratio: 5.0,
            noise_smoothing: 0.95,
        }
    }
}

/// Minima-controlled recursive noise-floor estimate per bin.
#[derive(Debug, Clone)]
pub struct NoiseFloorTracker {
    params: NoiseTrackerParams,
    smoothed: Vec<f64>,
    minimum: Vec<f64>,
    candidate_minimum: Vec<f64>,
    noise: Vec<f64>,
    frames: usize,
}

impl NoiseFloorTracker {
    pub fn new(bins: usize, params: NoiseTrackerParams) -> Self {
        Self {
            params,
            smoothed: vec![0.0; bins],
            minimum: vec![0.0; bins],
            candidate_minimum: vec![0.0; bins],
            noise: vec![0.0; bins],
            frames: 0,
        }
    }

    /// Starts from a known noise power spectrum instead of the first frame.
    pub fn with_initial(noise: Vec<f64>, params: NoiseTrackerParams) -> Self {
        Self {
            params,
            smoothed: noise.clone(),
            minimum: noise.clone(),
            candidate_minimum: noise.clone(),
            noise,
            frames: 1,
        }
    }

    pub fn noise(&self) -> &[f64] {
        &self.noise
    }

    pub fn update(&mut self, power: &[f64]) {
        let p = &self.params;
        if self.frames == 0 {
            self.smoothed.copy_from_slice(power);
            self.minimum.copy_from_slice(power);
            self.candidate_minimum.copy_from_slice(power);
            self.noise.copy_from_slice(power);
            self.frames = 1;
            return;
        }
        let restart = self.frames % p.tracking_frames.max(1) == 0;
        for k in 0..power.len() {
            let s = p.smoothing * self.smoothed[k] + (1.0 - p.smoothing) * power[k];
            self.smoothed[k] = s;
            if restart {
                self.minimum[k] = self.candidate_minimum[k].min(s);
                self.candidate_minimum[k] = s;
            } else {
                self.minimum[k] = self.minimum[k].min(s);
                self.candidate_minimum[k] = self.candidate_minimum[k].min(s);
            }
            let present = s > p.presence_ratio * self.minimum[k];
            if !present {
                self.noise[k] =
                    p.noise_smoothing * self.noise[k] + (1.0 - p.noise_smoothing) * power[k];
            }
        }
        self.frames += 1;
    }
}

/// Energy gate: selects bins against the running noise estimate, then
/// feeds the frame into the estimate.
#[derive(Debug, Clone)]
pub struct NoiseGate {
    factor: f64,
    tracker: NoiseFloorTracker,
    power: Vec<f64>,
}

impl NoiseGate {
    pub fn new(bins: usize, factor: f64) -> Self {
        Self::with_tracker(NoiseFloorTracker::new(bins, NoiseTrackerParams::default()), factor)
    }

    pub fn with_tracker(tracker: NoiseFloorTracker, factor: f64) -> Self {
        let bins = tracker.noise().len();
        Self {
            factor,
            tracker,
            power: vec![0.0; bins],
        }
    }

    pub fn noise(&self) -> &[f64] {
        self.tracker.noise()
    }

    pub fn select(&mut self, frame: &SpectrogramFrame) -> BinMask {
        for (k, p) in self.power.iter_mut().enumerate() {
            *p = frame.bin_power(k);
        }
        let mask = if self.tracker.frames == 0 {
            BinMask::none(frame.bins())
        } else {
            select_reliable_bins(frame, self.factor, self.tracker.noise())
        };
        self.tracker.update(&self.power);
        mask
    }
}
