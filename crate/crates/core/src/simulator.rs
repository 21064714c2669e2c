//! Synthetic microphone-array scenes with ground-truth source directions.
//!
//! Direct paths are rendered in the time domain with windowed-sinc fractional
//! delays; optional reverberation is a random per-frequency CTF tail applied
//! in the STFT domain and resynthesized by overlap-add.

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, AudioClip};
use crate::error::{Error, Result};
use crate::geometry::{bin_frequency, wrap_degrees, ArrayGeometry};
use crate::stft::{frame_center_secs, frame_count, overlap_add, SpectrogramFrame, StftAnalyzer, DEFAULT_HOP, DEFAULT_WINDOW};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_LEVEL: f64 = 0.1;
pub const FRACTIONAL_DELAY_TAPS: usize = 32;
const DELAY_BLOCK: usize = 32;
const RAMP_SECS: f64 = 0.005;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneScript {
    pub duration: f64,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: u32,
    #[serde(default)]
    pub sources: Vec<SourceSpec>,
    #[serde(default)]
    pub reverb: Reverb,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
}

fn default_sample_rate() -> u32 {
    DEFAULT_SAMPLE_RATE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    #[serde(default)]
    pub id: Option<usize>,
    /// Fixed position; ignored when `trajectory` is given.
    #[serde(default)]
    pub azimuth: Option<f64>,
    #[serde(default)]
    pub distance: Option<f64>,
    /// Keyframes `[time_s, azimuth_deg, distance_m]`, linearly interpolated
    /// along the shorter arc and held constant outside their span.
    #[serde(default)]
    pub trajectory: Option<Vec<[f64; 3]>>,
    #[serde(default)]
    pub onset: f64,
    #[serde(default)]
    pub offset: Option<f64>,
    pub signal: SignalSpec,
    /// RMS of the emitted signal, referred to 1 m.
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub gate: Option<GateSpec>,
}

fn default_level() -> f64 {
    DEFAULT_LEVEL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SignalSpec {
    White,
    /// AR(2) resonance over white noise, gated on and off like syllables.
    SpeechLike {
        #[serde(default)]
        formant_hz: Option<f64>,
        #[serde(default = "default_pole_radius")]
        pole_radius: f64,
    },
    /// White noise restricted to the listed `[low_hz, high_hz]` bands.
    BandNoise { bands: Vec<[f64; 2]> },
    /// First channel of a WAV file at the scene sample rate.
    Wav { path: PathBuf },
}

fn default_pole_radius() -> f64 {
    0.8
}

/// On/off amplitude modulation. Durations are drawn uniformly within
/// `±jitter` (relative) of the nominal values. Sources sharing a `pattern`
/// number share the same on/off sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateSpec {
    pub on: f64,
    pub off: f64,
    #[serde(default)]
    pub jitter: f64,
    #[serde(default)]
    pub pattern: Option<u64>,
}

impl GateSpec {
    pub fn speech_default() -> Self {
        Self {
            on: 0.4,
            off: 0.2,
            jitter: 0.5,
            pattern: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Reverb {
    #[default]
    Anechoic,
    /// `taps` CTF taps per frequency including the direct path; tap `q`
    /// has expected magnitude `decay^q` relative to the direct path.
    Ctf { taps: usize, decay: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub snr_db: f64,
}

impl SceneScript {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let script: Self = toml::from_str(text).map_err(|e| Error::Parse {
            what: "scene script",
            message: e.to_string(),
        })?;
        script.validate()?;
        Ok(script)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scene script serializes")
    }

    /// Single static source with default speech-like gating.
    pub fn single(azimuth: f64, distance: f64, duration: f64, signal: SignalSpec) -> Self {
        Self {
            duration,
            sample_rate: DEFAULT_SAMPLE_RATE,
            sources: vec![SourceSpec::fixed(azimuth, distance, signal)],
            reverb: Reverb::Anechoic,
            noise: None,
        }
    }

    pub fn num_samples(&self) -> usize {
        (self.duration * self.sample_rate as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Scene(msg));
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return bad(format!("duration must be positive, got {}", self.duration));
        }
        if self.sample_rate == 0 {
            return bad("sample rate must be positive".into());
        }
        for (i, s) in self.sources.iter().enumerate() {
            s.validate(self.duration).map_err(|e| match e {
                Error::Scene(msg) => Error::Scene(format!("source {i}: {msg}")),
                other => other,
            })?;
        }
        let mut ids: Vec<usize> = (0..self.sources.len()).map(|i| self.source_id(i)).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("source ids must be unique".into());
        }
        if let Reverb::Ctf { taps, decay } = self.reverb {
            if taps == 0 {
                return bad("reverb needs at least one tap".into());
            }
            if !(decay.is_finite() && decay >= 0.0) {
                return bad(format!("reverb decay must be non-negative, got {decay}"));
            }
        }
        if let Some(n) = &self.noise {
            if !n.snr_db.is_finite() {
                return bad("snr_db must be finite".into());
            }
        }
        Ok(())
    }

    pub fn source_id(&self, index: usize) -> usize {
        self.sources[index].id.unwrap_or(index)
    }
}

impl SourceSpec {
    pub fn fixed(azimuth: f64, distance: f64, signal: SignalSpec) -> Self {
        let gate = matches!(signal, SignalSpec::SpeechLike { .. }).then(GateSpec::speech_default);
        Self {
            id: None,
            azimuth: Some(azimuth),
            distance: Some(distance),
            trajectory: None,
            onset: 0.0,
            offset: None,
            signal,
            level: DEFAULT_LEVEL,
            gate,
        }
    }

    fn validate(&self, duration: f64) -> Result<()> {
        let bad = |msg: String| Err(Error::Scene(msg));
        match &self.trajectory {
            Some(keys) => {
                if keys.is_empty() {
                    return bad("trajectory needs at least one keyframe".into());
                }
                if keys.iter().any(|k| k.iter().any(|v| !v.is_finite())) {
                    return bad("trajectory values must be finite".into());
                }
                if keys.windows(2).any(|w| w[1][0] <= w[0][0]) {
                    return bad("trajectory times must be strictly increasing".into());
                }
                if keys.iter().any(|k| k[2] <= 0.0) {
                    return bad("distances must be positive".into());
                }
            }
            None => {
                let (Some(az), Some(d)) = (self.azimuth, self.distance) else {
                    return bad("needs azimuth and distance or a trajectory".into());
                };
                if !az.is_finite() {
                    return bad("azimuth must be finite".into());
                }
                if !(d.is_finite() && d > 0.0) {
                    return bad(format!("distance must be positive, got {d}"));
                }
            }
        }
        let offset = self.offset.unwrap_or(duration);
        if !(self.onset >= 0.0 && self.onset < offset) {
            return bad(format!("onset {} must be before offset {offset}", self.onset));
        }
        if !(self.level.is_finite() && self.level >= 0.0) {
            return bad(format!("level must be non-negative, got {}", self.level));
        }
        if let Some(g) = &self.gate {
            if !(g.on > 0.0 && g.off >= 0.0 && (0.0..1.0).contains(&g.jitter)) {
                return bad("gate needs on > 0, off >= 0 and jitter in [0, 1)".into());
            }
        }
        match &self.signal {
            SignalSpec::SpeechLike { pole_radius, formant_hz } => {
                if !(0.0..1.0).contains(pole_radius) {
                    return bad("pole radius must be in [0, 1)".into());
                }
                if formant_hz.is_some_and(|f| !(f > 0.0)) {
                    return bad("formant frequency must be positive".into());
                }
            }
            SignalSpec::BandNoise { bands } => {
                if bands.is_empty() || bands.iter().any(|b| !(b[0] >= 0.0 && b[1] > b[0])) {
                    return bad("bands must be non-empty [low, high] pairs with low < high".into());
                }
            }
            SignalSpec::White | SignalSpec::Wav { .. } => {}
        }
        Ok(())
    }

    /// Azimuth (degrees, wrapped) and distance at time `t`.
    pub fn position_at(&self, t: f64) -> (f64, f64) {
        let Some(keys) = &self.trajectory else {
            return (wrap_degrees(self.azimuth.unwrap_or(0.0)), self.distance.unwrap_or(1.0));
        };
        if t <= keys[0][0] {
            return (wrap_degrees(keys[0][1]), keys[0][2]);
        }
        for w in keys.windows(2) {
            let (a, b) = (w[0], w[1]);
            if t <= b[0] {
                let s = (t - a[0]) / (b[0] - a[0]);
                let step = wrap_degrees(b[1] - a[1]);
                return (wrap_degrees(a[1] + s * step), a[2] + s * (b[2] - a[2]));
            }
        }
        let last = keys[keys.len() - 1];
        (wrap_degrees(last[1]), last[2])
    }
}

/// One active source at one STFT frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActiveSource {
    pub source_id: usize,
    pub azimuth_deg: f64,
    pub distance_m: f64,
}

/// Active sources per STFT frame, sampled at frame centers.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub window: usize,
    pub hop: usize,
    pub sample_rate: u32,
    pub frames: Vec<Vec<ActiveSource>>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn active(&self, frame: usize) -> &[ActiveSource] {
        self.frames.get(frame).map_or(&[], |f| f.as_slice())
    }

    pub fn frame_time(&self, frame: usize) -> f64 {
        frame_center_secs(frame, self.window, self.hop, self.sample_rate as f64)
    }

    /// Writes `frame,time_s,source_id,azimuth_deg,distance_m`, one row per
    /// active source.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["frame", "time_s", "source_id", "azimuth_deg", "distance_m"])?;
        for (p, active) in self.frames.iter().enumerate() {
            for s in active {
                w.write_record([
                    p.to_string(),
                    format!("{:.6}", self.frame_time(p)),
                    s.source_id.to_string(),
                    format!("{:.6}", s.azimuth_deg),
                    format!("{:.6}", s.distance_m),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::Stream(e.to_string()))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normalize_rms(x: &mut [f64], rms: f64) {
    let power = x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64;
    if power > 0.0 {
        let g = rms / power.sqrt();
        x.iter_mut().for_each(|v| *v *= g);
    }
}

fn white(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn ar2(input: &[f64], formant_hz: f64, radius: f64, sample_rate: f64) -> Vec<f64> {
    let theta = 2.0 * PI * formant_hz / sample_rate;
    let (a1, a2) = (2.0 * radius * theta.cos(), -radius * radius);
    let mut out = vec![0.0; input.len()];
    let (mut y1, mut y2) = (0.0, 0.0);
    for (o, &x) in out.iter_mut().zip(input) {
        let y = x + a1 * y1 + a2 * y2;
        *o = y;
        y2 = y1;
        y1 = y;
    }
    out
}

fn band_limit(x: &[f64], bands: &[[f64; 2]], sample_rate: f64) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mut planner = FftPlanner::new();
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, b) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * sample_rate / n as f64;
        if !bands.iter().any(|band| f >= band[0] && f <= band[1]) {
            *b = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

/// Source waveform over the whole scene, already scaled to `level` RMS but
/// not yet gated.
fn source_waveform(spec: &SourceSpec, n: usize, sample_rate: f64, rng: &mut ChaCha8Rng, base_dir: &Path) -> Result<Vec<f64>> {
    let mut x = match &spec.signal {
        SignalSpec::White => white(rng, n),
        SignalSpec::SpeechLike { formant_hz, pole_radius } => {
            let f = formant_hz.unwrap_or_else(|| rng.gen_range(300.0..1000.0));
            ar2(&white(rng, n), f, *pole_radius, sample_rate)
        }
        SignalSpec::BandNoise { bands } => band_limit(&white(rng, n), bands, sample_rate),
        SignalSpec::Wav { path } => {
            let path = if path.is_absolute() { path.clone() } else { base_dir.join(path) };
            let clip = read_wav(&path, None)?;
            if clip.sample_rate() as f64 != sample_rate {
                return Err(Error::Scene(format!(
                    "{} has sample rate {}, scene uses {sample_rate}",
                    path.display(),
                    clip.sample_rate()
                )));
            }
            let mut x: Vec<f64> = clip.channel(0).iter().map(|&v| v as f64).collect();
            x.resize(n, 0.0);
            x
        }
    };
    normalize_rms(&mut x, spec.level);
    Ok(x)
}

/// On intervals in seconds: the onset/offset window cut by the on/off gate.
fn on_segments(spec: &SourceSpec, duration: f64, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let offset = spec.offset.unwrap_or(duration).min(duration);
    let Some(g) = &spec.gate else {
        return vec![(spec.onset, offset)];
    };
    let draw = |nominal: f64, rng: &mut ChaCha8Rng| {
        if g.jitter > 0.0 {
            nominal * (1.0 + g.jitter * rng.gen_range(-1.0..1.0))
        } else {
            nominal
        }
    };
    let mut segments = Vec::new();
    let mut t = spec.onset;
    while t < offset {
        let on = draw(g.on, rng);
        segments.push((t, (t + on).min(offset)));
        t += on + draw(g.off, rng);
    }
    segments
}

/// Amplitude envelope in [0, 1] over the segments, with short raised-cosine
/// ramps at every edge.
fn envelope(segments: &[(f64, f64)], n: usize, sample_rate: f64) -> Vec<f64> {
    let ramp = RAMP_SECS * sample_rate;
    let mut env = vec![0.0; n];
    for &(start, end) in segments {
        let (s, e) = (start * sample_rate, end * sample_rate);
        let first = s.floor().max(0.0) as usize;
        let last = (e.ceil() as usize).min(n);
        for (t, v) in env.iter_mut().enumerate().take(last).skip(first) {
            let t = t as f64;
            if t < s || t >= e {
                continue;
            }
            let edge = ((t - s).min(e - t) / ramp).min(1.0);
            *v = f64::max(*v, 0.5 - 0.5 * (PI * edge).cos());
        }
    }
    env
}

fn is_on(segments: &[(f64, f64)], t: f64) -> bool {
    segments.iter().any(|&(s, e)| t >= s && t < e)
}

fn fractional_delay_taps(frac: f64, taps: &mut [f64; FRACTIONAL_DELAY_TAPS]) {
    let half = (FRACTIONAL_DELAY_TAPS / 2) as f64;
    for (i, h) in taps.iter_mut().enumerate() {
        let x = i as f64 - (half - 1.0) - frac;
        let sinc = if x.abs() < 1e-12 { 1.0 } else { (PI * x).sin() / (PI * x) };
        let w = 0.42 + 0.5 * (PI * x / half).cos() + 0.08 * (2.0 * PI * x / half).cos();
        *h = sinc * if x.abs() < half { w } else { 0.0 };
    }
}

/// Adds `gain(t) * x(t - delay(t))` to `out`, with delay and gain held
/// constant over short blocks.
fn add_delayed(out: &mut [f64], x: &[f64], mut delay_gain: impl FnMut(usize) -> (f64, f64)) {
    let n = out.len();
    let lead = (FRACTIONAL_DELAY_TAPS / 2 - 1) as isize;
    let mut taps = [0.0; FRACTIONAL_DELAY_TAPS];
    for start in (0..n).step_by(DELAY_BLOCK) {
        let end = (start + DELAY_BLOCK).min(n);
        let (delay, gain) = delay_gain((start + end) / 2);
        let whole = delay.floor();
        fractional_delay_taps(delay - whole, &mut taps);
        let whole = whole as isize;
        for (t, o) in out.iter_mut().enumerate().take(end).skip(start) {
            let base = t as isize - whole + lead;
            let mut acc = 0.0;
            for (i, h) in taps.iter().enumerate() {
                let j = base - i as isize;
                if j >= 0 && (j as usize) < x.len() {
                    acc += h * x[j as usize];
                }
            }
            *o += gain * acc;
        }
    }
}

/// Per-channel CTF: `taps[m][q][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ctf {
    pub taps: Vec<Vec<Vec<Complex64>>>,
    reference: usize,
}

impl Ctf {
    /// Random CTF for a far-field source: tap 0 is the direct path
    /// `exp(-j 2 pi f tau_m) / distance`; later taps sum three reflections
    /// with Gaussian gains and delays within one hop, scaled by `decay^q`.
    #[allow(clippy::too_many_arguments)]
    pub fn random(
        geometry: &ArrayGeometry,
        azimuth_deg: f64,
        distance: f64,
        taps: usize,
        decay: f64,
        bins: usize,
        sample_rate: f64,
        hop: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let hop_secs = hop as f64 / sample_rate;
        let gauss = Normal::new(0.0, 1.0 / 3f64.sqrt()).expect("valid normal");
        let taps = (0..geometry.num_mics())
            .map(|m| {
                let tau = geometry.arrival_offset(azimuth_deg, m);
                (0..taps)
                    .map(|q| {
                        let reflections: Vec<(f64, f64)> = if q == 0 {
                            vec![(1.0, 0.0)]
                        } else {
                            (0..3)
                                .map(|_| (gauss.sample(rng) * decay.powi(q as i32), rng.gen_range(0.0..hop_secs)))
                                .collect()
                        };
                        (0..bins)
                            .map(|k| {
                                let f = bin_frequency(k, bins, sample_rate);
                                reflections
                                    .iter()
                                    .map(|&(g, d)| Complex64::from_polar(g / distance, -2.0 * PI * f * (tau + d)))
                                    .sum()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self {
            taps,
            reference: geometry.reference(),
        }
    }

    pub fn channels(&self) -> usize {
        self.taps.len()
    }

    pub fn len(&self) -> usize {
        self.taps[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps[0].is_empty()
    }

    pub fn bins(&self) -> usize {
        self.taps[0][0].len()
    }

    /// Ratio of the first taps of channel `m` and the reference channel.
    pub fn direct_path_ratio(&self, m: usize, k: usize) -> Complex64 {
        self.taps[m][0][k] / self.taps[self.reference][0][k]
    }

    /// Convolves one source spectrogram `source[p][k]` along frames in every
    /// bin, starting at tap `first_tap`.
    pub fn convolve(&self, source: &[Vec<Complex64>], first_tap: usize) -> Vec<Vec<Vec<Complex64>>> {
        self.taps
            .iter()
            .map(|h| {
                (0..source.len())
                    .map(|p| {
                        let mut out = vec![Complex64::new(0.0, 0.0); self.bins()];
                        for (q, hq) in h.iter().enumerate().skip(first_tap).take_while(|(q, _)| *q <= p) {
                            for ((o, &c), &x) in out.iter_mut().zip(hq).zip(&source[p - q]) {
                                *o += c * x;
                            }
                        }
                        out
                    })
                    .collect()
            })
            .collect()
    }

    /// Multichannel STFT frames of a circular white Gaussian source passed
    /// through this CTF, with no time-domain resynthesis so the convolutive
    /// model holds exactly.
    pub fn synthesize_frames(&self, frames: usize, rng: &mut ChaCha8Rng) -> Vec<SpectrogramFrame> {
        let source: Vec<Vec<Complex64>> = (0..frames)
            .map(|_| {
                (0..self.bins())
                    .map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
                    .collect()
            })
            .collect();
        let out = self.convolve(&source, 0);
        (0..frames)
            .map(|p| SpectrogramFrame::from_channels(p, &out.iter().map(|ch| ch[p].clone()).collect::<Vec<_>>()))
            .collect()
    }
}

/// Options that are not part of the scene script itself.
#[derive(Debug, Clone)]
pub struct RenderOptions {
    pub seed: u64,
    pub window: usize,
    pub hop: usize,
    /// Directory that relative WAV paths are resolved against.
    pub base_dir: PathBuf,
}

impl RenderOptions {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            window: DEFAULT_WINDOW,
            hop: DEFAULT_HOP,
            base_dir: PathBuf::from("."),
        }
    }
}

/// Renders the scene for `geometry`. The output is a pure function of the
/// script, the geometry and the options.
pub fn render_scene(script: &SceneScript, geometry: &ArrayGeometry, opts: &RenderOptions) -> Result<(AudioClip, GroundTruth)> {
    script.validate()?;
    let sr = script.sample_rate as f64;
    let n = script.num_samples();
    let mics = geometry.num_mics();
    let mut mix = vec![vec![0.0f64; n]; mics];
    let mut schedules = Vec::with_capacity(script.sources.len());

    for (i, src) in script.sources.iter().enumerate() {
        let mut rng = stream_rng(opts.seed, 1 + i as u64);
        let mut x = source_waveform(src, n, sr, &mut rng, &opts.base_dir)?;
        let mut gate_rng = match src.gate.as_ref().and_then(|g| g.pattern) {
            Some(pattern) => stream_rng(opts.seed, 1 << 32 | pattern),
            None => stream_rng(opts.seed, 1 << 33 | i as u64),
        };
        let segments = on_segments(src, script.duration, &mut gate_rng);
        x.iter_mut().zip(envelope(&segments, n, sr)).for_each(|(v, e)| *v *= e);

        for (m, out) in mix.iter_mut().enumerate() {
            add_delayed(out, &x, |t| {
                let (az, dist) = src.position_at(t as f64 / sr);
                (geometry.arrival_offset(az, m) * sr, 1.0 / dist)
            });
        }

        if let Reverb::Ctf { taps, decay } = script.reverb {
            if taps > 1 {
                add_reverb_tail(&mut mix, &x, src, geometry, taps, decay, sr, opts, i)?;
            }
        }
        schedules.push(segments);
    }

    if let Some(noise) = &script.noise {
        add_noise(&mut mix, &schedules, noise.snr_db, sr, opts.seed);
    }

    let frames = frame_count(n, opts.window, opts.hop);
    let truth = GroundTruth {
        window: opts.window,
        hop: opts.hop,
        sample_rate: script.sample_rate,
        frames: (0..frames)
            .map(|p| {
                let t = frame_center_secs(p, opts.window, opts.hop, sr);
                script
                    .sources
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| is_on(&schedules[*i], t))
                    .map(|(i, src)| {
                        let (azimuth_deg, distance_m) = src.position_at(t);
                        ActiveSource {
                            source_id: script.source_id(i),
                            azimuth_deg,
                            distance_m,
                        }
                    })
                    .collect()
            })
            .collect(),
    };

    let channels = mix.into_iter().map(|c| c.into_iter().map(|v| v as f32).collect()).collect();
    Ok((AudioClip::new(channels, script.sample_rate)?, truth))
}

#[allow(clippy::too_many_arguments)]
fn add_reverb_tail(
    mix: &mut [Vec<f64>],
    dry: &[f64],
    src: &SourceSpec,
    geometry: &ArrayGeometry,
    taps: usize,
    decay: f64,
    sr: f64,
    opts: &RenderOptions,
    index: usize,
) -> Result<()> {
    let n = dry.len();
    if n < opts.window {
        return Ok(());
    }
    let mut analyzer = StftAnalyzer::new(opts.window, opts.hop)?;
    let dry32: Vec<f32> = dry.iter().map(|&v| v as f32).collect();
    let frames = frame_count(n, opts.window, opts.hop);
    let spectra: Vec<Vec<Complex64>> = (0..frames)
        .map(|p| {
            let start = p * opts.hop;
            let frame = analyzer.analyze(p, &[&dry32[start..start + opts.window]]);
            (0..frame.bins()).map(|k| frame.get(0, k)).collect()
        })
        .collect();
    let (az, dist) = src.position_at(src.onset);
    let mut rng = stream_rng(opts.seed, 1 << 34 | index as u64);
    let ctf = Ctf::random(geometry, az, dist, taps, decay, analyzer.bins(), sr, opts.hop, &mut rng);
    for (out, tail) in mix.iter_mut().zip(ctf.convolve(&spectra, 1)) {
        for (o, v) in out.iter_mut().zip(overlap_add(&tail, opts.window, opts.hop, n)) {
            *o += v;
        }
    }
    Ok(())
}

/// Spatially uncorrelated white noise at `snr_db` below the mean per-channel
/// power of the mixture over samples where some source is on.
fn add_noise(mix: &mut [Vec<f64>], schedules: &[Vec<(f64, f64)>], snr_db: f64, sample_rate: f64, seed: u64) {
    let n = mix.first().map_or(0, Vec::len);
    let active: Vec<usize> = (0..n)
        .filter(|&t| schedules.iter().any(|s| is_on(s, t as f64 / sample_rate)))
        .collect();
    if active.is_empty() {
        return;
    }
    let power = mix
        .iter()
        .map(|c| active.iter().map(|&t| c[t] * c[t]).sum::<f64>() / active.len() as f64)
        .sum::<f64>()
        / mix.len() as f64;
    let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    let mut rng = stream_rng(seed, 1 << 35);
    for c in mix.iter_mut() {
        for v in c.iter_mut() {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// Writes a synthetic camera stream for a scene: constant-depth 16-bit
/// depth images, uniformly scattered keypoints and a `frames.csv` index
/// with `timestamp,depth,keypoints` columns. Returns the index path.
pub fn write_camera_fixture(
    dir: &Path,
    width: usize,
    height: usize,
    duration: f64,
    fps: f64,
    keypoints_per_frame: usize,
    seed: u64,
) -> Result<PathBuf> {
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(Error::Config(format!("frame rate must be positive, got {fps}")));
    }
    for sub in ["depth", "keypoints"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut rng = stream_rng(seed, 1 << 36);
    let depth = crate::image::DepthImage::filled(width, height, 3.0);
    let index_path = dir.join("frames.csv");
    let file = std::fs::File::create(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut index = csv::Writer::from_writer(std::io::BufWriter::new(file));
    index.write_record(["timestamp", "depth", "keypoints"])?;
    let frames = (duration * fps).floor() as usize;
    for i in 0..frames {
        let depth_rel = format!("depth/{i:06}.pgm");
        let kp_rel = format!("keypoints/{i:06}.csv");
        depth.save_pgm(dir.join(&depth_rel))?;
        let kp_path = dir.join(&kp_rel);
        let kp_file = std::fs::File::create(&kp_path).map_err(|e| Error::io(&kp_path, e))?;
        let mut kp = csv::Writer::from_writer(std::io::BufWriter::new(kp_file));
        kp.write_record(["u", "v", "score"])?;
        for _ in 0..keypoints_per_frame {
            let u: f64 = rng.gen_range(0.0..width as f64);
            let v: f64 = rng.gen_range(0.0..height as f64);
            let score: f64 = rng.gen_range(0.0..1.0);
            kp.write_record([format!("{u:.2}"), format!("{v:.2}"), format!("{score:.4}")])?;
        }
        kp.flush().map_err(|e| Error::io(&kp_path, e))?;
        index.write_record([format!("{:.6}", i as f64 / fps), depth_rel, kp_rel])?;
    }
    index.flush().map_err(|e| Error::io(&index_path, e))?;
    Ok(index_path)
}

const TDOA_MIN_SECS: f64 = 0.1;
const TDOA_FINE_STEPS: usize = 16;

/// Delay of channel `pair.1` relative to channel `pair.0` in seconds,
/// positive when `pair.1` hears the signal later. PHAT-weighted
/// cross-correlation, refined on a 1/16-sample grid around the integer peak
/// and then by a parabola through the best three grid points.
pub fn oracle_tdoa(clip: &AudioClip, pair: (usize, usize)) -> Result<f64> {
    let (a, b) = pair;
    if a >= clip.num_channels() || b >= clip.num_channels() {
        return Err(Error::InvalidPair(a, b));
    }
    let sr = clip.sample_rate() as f64;
    if clip.duration_secs() < TDOA_MIN_SECS {
        return Err(Error::Degenerate(format!(
            "need at least {TDOA_MIN_SECS} s of audio, got {:.4} s",
            clip.duration_secs()
        )));
    }
    let len = clip.len();
    let n = (2 * len).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let spectrum = |c: &[f32]| {
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for (o, &v) in buf.iter_mut().zip(c) {
            o.re = v as f64;
        }
        fft.process(&mut buf);
        buf
    };
    let (xa, xb) = (spectrum(clip.channel(a)), spectrum(clip.channel(b)));
    let peak_energy = xa.iter().chain(&xb).map(|c| c.norm_sqr()).fold(0.0, f64::max);
    let floor = peak_energy * 1e-20;
    if !(peak_energy > 0.0) || xa.iter().all(|c| c.norm_sqr() == 0.0) || xb.iter().all(|c| c.norm_sqr() == 0.0) {
        return Err(Error::Degenerate("silent channel".into()));
    }
    let cross: Vec<Complex64> = xa
        .iter()
        .zip(&xb)
        .map(|(&p, &q)| {
            let c = p.conj() * q;
            let mag = c.norm();
            if mag > floor {
                c / mag
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect();

    let mut corr = cross.clone();
    planner.plan_fft_inverse(n).process(&mut corr);
    let max_lag = (len - 1) as isize;
    let lag_of = |i: usize| if i < n / 2 { i as isize } else { i as isize - n as isize };
    let (coarse, _) = (0..n)
        .filter(|&i| lag_of(i).abs() <= max_lag)
        .map(|i| (lag_of(i), corr[i].re))
        .fold((0isize, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });

    // r(tau) = sum_k W_k Re(G_k e^{j 2 pi k tau / n}) over the one-sided spectrum.
    let half = n / 2;
    let eval = |tau: f64| {
        let step = Complex64::from_polar(1.0, 2.0 * PI * tau / n as f64);
        let mut rot = Complex64::new(1.0, 0.0);
        let mut acc = 0.0;
        for (k, g) in cross.iter().enumerate().take(half + 1) {
            let w = if k == 0 || k == half { 1.0 } else { 2.0 };
            acc += w * (g * rot).re;
            rot *= step;
            if k % 1024 == 1023 {
                rot /= rot.norm();
            }
        }
        acc
    };
    let grid: Vec<(f64, f64)> = (0..=2 * TDOA_FINE_STEPS)
        .map(|i| {
            let tau = coarse as f64 + (i as f64 - TDOA_FINE_STEPS as f64) / TDOA_FINE_STEPS as f64;
            (tau, eval(tau))
        })
        .collect();
    let best = (0..grid.len()).fold(0, |b, i| if grid[i].1 > grid[b].1 { i } else { b });
    let mut tau = grid[best].0;
    if best > 0 && best + 1 < grid.len() {
        let (y0, y1, y2) = (grid[best - 1].1, grid[best].1, grid[best + 1].1);
        let denom = y0 - 2.0 * y1 + y2;
        if denom < 0.0 {
            tau += 0.5 * (y0 - y2) / denom / TDOA_FINE_STEPS as f64;
        }
    }
    Ok(tau / sr)
}
