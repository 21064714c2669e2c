//! End-to-end runs: configuration, the shared per-frame SSL path, camera
//! frame fusion, output files and timing reports.
//!
//! Offline and streaming runs feed the same [`SslEngine`] and the same
//! [`Fuser`], so they write identical `ssl.jsonl`, `weights.csv`, masks,
//! rectangles and filtered keypoints for the same inputs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, RecvTimeoutError};
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, WavStream};
use crate::clustering::{write_weights_csv_row, ClusteringParams, SourceTracker, SslFrame};
use crate::dprtf::{DpRtfEstimator, EstimatorParams};
use crate::error::{Error, Result};
use crate::fusion::{filter_features, invalidate_depth, load_keypoints, region_to_rectangle, CameraModel, Keypoint, ObstacleMask, ObstacleRect};
use crate::geometry::{compute_steering_table, ArrayGeometry, CandidateGrid};
use crate::image::{write_pgm8, DepthImage};
use crate::stft::{frame_center_secs, stft_stream, NoiseGate, SpectrogramFrame, StreamingStft, DEFAULT_GATE_FACTOR, DEFAULT_HOP, DEFAULT_WINDOW};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    pub audio: PathBuf,
    /// Array geometry file; the built-in 7-microphone profile when absent.
    #[serde(default)]
    pub geometry: Option<PathBuf>,
    #[serde(default)]
    pub camera: Option<PathBuf>,
    /// Camera frame index CSV with `timestamp,depth,keypoints` columns.
    #[serde(default)]
    pub frames: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub window: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            hop: DEFAULT_HOP,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub ctf_length: usize,
    pub forgetting: f64,
    pub init_epsilon: f64,
    pub residual_threshold: f64,
    pub gate_factor: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        let p = EstimatorParams::default();
        Self {
            ctf_length: p.ctf_length,
            forgetting: p.forgetting,
            init_epsilon: p.init_epsilon,
            residual_threshold: p.residual_threshold,
            gate_factor: DEFAULT_GATE_FACTOR,
        }
    }
}

impl EstimatorConfig {
    pub fn params(&self) -> EstimatorParams {
        EstimatorParams {
            ctf_length: self.ctf_length,
            forgetting: self.forgetting,
            init_epsilon: self.init_epsilon,
            residual_threshold: self.residual_threshold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringConfig {
    pub directions: usize,
    pub variance: f64,
    pub smoothing: f64,
    pub peak_threshold: Option<f64>,
    pub min_separation_deg: f64,
    pub delta: f64,
    pub max_half_width_deg: Option<f64>,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        let p = ClusteringParams::default();
        Self {
            directions: CandidateGrid::DEFAULT_DIRECTIONS,
            variance: p.variance,
            smoothing: p.smoothing,
            peak_threshold: p.peak_threshold,
            min_separation_deg: p.min_separation_deg,
            delta: p.delta,
            max_half_width_deg: p.max_half_width_deg,
        }
    }
}

impl ClusteringConfig {
    pub fn params(&self) -> ClusteringParams {
        ClusteringParams {
            variance: self.variance,
            smoothing: self.smoothing,
            peak_threshold: self.peak_threshold,
            min_separation_deg: self.min_separation_deg,
            delta: self.delta,
            max_half_width_deg: self.max_half_width_deg,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    /// Audio samples per channel in each chunk handed to the SSL stage.
    pub chunk_samples: usize,
    pub queue_capacity: usize,
    pub heartbeat_ms: u64,
    /// Deliver audio no faster than real time, as a live device would.
    pub pace: bool,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            chunk_samples: DEFAULT_HOP,
            queue_capacity: 64,
            heartbeat_ms: 1000,
            pace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub inputs: Inputs,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub stft: StftConfig,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub clustering: ClusteringConfig,
    #[serde(default)]
    pub stream: StreamConfig,
}

fn parse_error(message: impl ToString) -> Error {
    Error::Parse {
        what: "pipeline config",
        message: message.to_string(),
    }
}

/// Sets a dotted `key` in a TOML table. The value is read as a TOML literal
/// when it parses as one and as a bare string otherwise.
pub fn apply_override(doc: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty override key {key:?}")))?;
    let mut table = doc;
    for part in parts {
        table = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part} is not a table")))?;
    }
    table.insert(last.to_string(), parsed);
    Ok(())
}

impl PipelineConfig {
    /// Parses a config; relative paths are resolved against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(parse_error)?;
        for (k, v) in overrides {
            apply_override(&mut doc, k, v)?;
        }
        let mut config: Self = toml::Value::Table(doc).try_into().map_err(parse_error)?;
        config.resolve_paths(base_dir);
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base, overrides)
    }

    /// Audio-only config with all defaults.
    pub fn audio_only(audio: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            inputs: Inputs {
                audio: audio.into(),
                geometry: None,
                camera: None,
                frames: None,
            },
            output: OutputConfig { dir: out_dir.into() },
            stft: StftConfig::default(),
            estimator: EstimatorConfig::default(),
            clustering: ClusteringConfig::default(),
            stream: StreamConfig::default(),
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.inputs.audio);
        self.inputs.geometry.as_mut().map(fix);
        self.inputs.camera.as_mut().map(fix);
        self.inputs.frames.as_mut().map(fix);
        fix(&mut self.output.dir);
    }

    pub fn validate(&self) -> Result<()> {
        let exists = |p: &Path, what: &str| {
            if p.is_file() {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} file {} does not exist", p.display())))
            }
        };
        exists(&self.inputs.audio, "audio")?;
        if let Some(p) = &self.inputs.geometry {
            exists(p, "geometry")?;
        }
        if let Some(p) = &self.inputs.camera {
            exists(p, "camera")?;
        }
        if let Some(p) = &self.inputs.frames {
            exists(p, "frame index")?;
            if self.inputs.camera.is_none() {
                return Err(Error::Config("a frame index needs a camera model".into()));
            }
        }
        if self.stft.hop == 0 || self.stft.window < 2 || self.stft.hop > self.stft.window {
            return Err(Error::Config(format!(
                "need 0 < hop <= window and window >= 2, got window {} hop {}",
                self.stft.window, self.stft.hop
            )));
        }
        self.estimator.params().validate()?;
        if !(self.estimator.gate_factor.is_finite() && self.estimator.gate_factor >= 0.0) {
            return Err(Error::Config("gate factor must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.clustering.delta) {
            return Err(Error::Config(format!("delta must be in [0, 1], got {}", self.clustering.delta)));
        }
        if self.clustering.directions == 0 {
            return Err(Error::Config("need at least one candidate direction".into()));
        }
        self.clustering.params().validate()?;
        if self.stream.chunk_samples == 0 || self.stream.queue_capacity == 0 {
            return Err(Error::Config("stream chunk size and queue capacity must be positive".into()));
        }
        Ok(())
    }

    pub fn load_geometry(&self) -> Result<ArrayGeometry> {
        match &self.inputs.geometry {
            Some(p) => ArrayGeometry::load(p),
            None => Ok(ArrayGeometry::default_profile()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub read_s: f64,
    pub stft_s: f64,
    pub dprtf_s: f64,
    pub clustering_s: f64,
    pub fusion_s: f64,
    pub output_s: f64,
}

impl StageTimings {
    fn add(&mut self, other: &StageTimings) {
        self.read_s += other.read_s;
        self.stft_s += other.stft_s;
        self.dprtf_s += other.dprtf_s;
        self.clustering_s += other.clustering_s;
        self.fusion_s += other.fusion_s;
        self.output_s += other.output_s;
    }
}

fn timed<T>(acc: &mut f64, f: impl FnOnce() -> T) -> T {
    let t = Instant::now();
    let out = f();
    *acc += t.elapsed().as_secs_f64();
    out
}

/// Per-frame SSL path: energy gate, DP-RTF estimation and mixture tracking.
pub struct SslEngine {
    gate: NoiseGate,
    estimator: DpRtfEstimator,
    tracker: SourceTracker,
    window: usize,
    hop: usize,
    sample_rate: f64,
    timings: StageTimings,
}

impl SslEngine {
    pub fn new(config: &PipelineConfig, geometry: &ArrayGeometry, sample_rate: u32) -> Result<Self> {
        let bins = config.stft.window / 2 + 1;
        let grid = CandidateGrid::new(config.clustering.directions)?;
        let table = compute_steering_table(geometry, &grid, bins, sample_rate as f64)?;
        Ok(Self {
            gate: NoiseGate::new(bins, config.estimator.gate_factor),
            estimator: DpRtfEstimator::new(geometry.num_mics(), geometry.reference(), bins, config.estimator.params())?,
            tracker: SourceTracker::new(grid, table, config.clustering.params())?,
            window: config.stft.window,
            hop: config.stft.hop,
            sample_rate: sample_rate as f64,
            timings: StageTimings::default(),
        })
    }

    pub fn process(&mut self, frame: &SpectrogramFrame) -> SslFrame {
        let Self { gate, estimator, tracker, timings, .. } = self;
        let features = timed(&mut timings.dprtf_s, || {
            let mask = gate.select(frame);
            estimator.process_frame(frame, &mask)
        });
        let timestamp = frame_center_secs(frame.index, self.window, self.hop, self.sample_rate);
        timed(&mut timings.clustering_s, || tracker.process(frame.index, timestamp, &features))
    }

    pub fn timings(&self) -> &StageTimings {
        &self.timings
    }

    pub fn total_resets(&self) -> u64 {
        self.estimator.total_resets()
    }

    pub fn tracker(&self) -> &SourceTracker {
        &self.tracker
    }
}

/// One row of the camera frame index.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrameEntry {
    pub index: usize,
    pub timestamp: f64,
    pub depth: Option<PathBuf>,
    pub keypoints: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
struct FrameRow {
    timestamp: f64,
    #[serde(default)]
    depth: Option<String>,
    #[serde(default)]
    keypoints: Option<String>,
}

/// Reads a frame index CSV with a `timestamp,depth,keypoints` header. Empty
/// cells mean "not available"; paths are relative to the index file.
pub fn read_frame_index(path: impl AsRef<Path>) -> Result<Vec<CameraFrameEntry>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let resolve = |cell: Option<String>| {
        cell.filter(|s| !s.is_empty()).map(|s| {
            let p = PathBuf::from(s);
            if p.is_relative() {
                base.join(p)
            } else {
                p
            }
        })
    };
    let mut out = Vec::new();
    for (index, row) in reader.deserialize::<FrameRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            what: "frame index",
            message: e.to_string(),
        })?;
        if !row.timestamp.is_finite() {
            return Err(Error::Parse {
                what: "frame index",
                message: format!("row {index}: timestamp must be finite"),
            });
        }
        out.push(CameraFrameEntry {
            index,
            timestamp: row.timestamp,
            depth: resolve(row.depth),
            keypoints: resolve(row.keypoints),
        });
    }
    Ok(out)
}

/// A camera frame with its payload loaded.
#[derive(Debug, Clone)]
pub struct CameraFrame {
    pub index: usize,
    pub timestamp: f64,
    pub depth: Option<DepthImage>,
    pub keypoints: Vec<Keypoint>,
}

impl CameraFrame {
    pub fn load(entry: &CameraFrameEntry) -> Result<Self> {
        Ok(Self {
            index: entry.index,
            timestamp: entry.timestamp,
            depth: entry.depth.as_ref().map(DepthImage::load_pgm).transpose()?,
            keypoints: match &entry.keypoints {
                Some(p) => load_keypoints(p)?,
                None => Vec::new(),
            },
        })
    }
}

/// Fusion result for one camera frame.
#[derive(Debug, Clone)]
pub struct FusedFrame {
    pub camera_frame: usize,
    pub timestamp: f64,
    pub ssl_frame: Option<usize>,
    pub ssl_timestamp: Option<f64>,
    pub mask: ObstacleMask,
    pub keypoints_in: usize,
    pub kept: Vec<Keypoint>,
    /// Valid depth pixels zeroed by the mask; `None` without a depth image.
    pub depth_invalidated: Option<usize>,
}

#[derive(Serialize)]
struct RectRecord<'a> {
    camera_frame: usize,
    timestamp: f64,
    ssl_frame: Option<usize>,
    ssl_timestamp: Option<f64>,
    rects: &'a [ObstacleRect],
    invalid_pixels: usize,
    keypoints_in: usize,
    keypoints_kept: usize,
    depth_invalidated: Option<usize>,
}

/// Maps SSL regions into camera frames.
pub struct Fuser {
    camera: CameraModel,
    last_timestamp: Option<f64>,
    rejected: usize,
}

impl Fuser {
    pub fn new(camera: CameraModel) -> Self {
        Self {
            camera,
            last_timestamp: None,
            rejected: 0,
        }
    }

    pub fn rejected(&self) -> usize {
        self.rejected
    }

    /// Whether a frame at `timestamp` would be accepted; records and warns
    /// about out-of-order frames.
    pub fn admit(&mut self, index: usize, timestamp: f64) -> bool {
        if self.last_timestamp.is_some_and(|last| timestamp < last) {
            log::warn!(
                "camera frame {index} at {timestamp:.6} s is older than the previous frame; rejected"
            );
            self.rejected += 1;
            return false;
        }
        self.last_timestamp = Some(timestamp);
        true
    }

    pub fn fuse(&self, frame: &CameraFrame, ssl: Option<&SslFrame>) -> Result<FusedFrame> {
        let (w, h) = (self.camera.width, self.camera.height);
        let rects: Vec<ObstacleRect> = ssl
            .map(|s| {
                s.regions
                    .iter()
                    .map(|r| region_to_rectangle(&r.angles, &self.camera))
                    .collect()
            })
            .unwrap_or_default();
        let mask = ObstacleMask::new(frame.index, w, h, rects);
        let depth_invalidated = match &frame.depth {
            Some(depth) => {
                let cleared = invalidate_depth(depth, &mask)?;
                let before = depth.data().iter().filter(|&&d| d > 0.0).count();
                let after = cleared.data().iter().filter(|&&d| d > 0.0).count();
                Some(before - after)
            }
            None => None,
        };
        Ok(FusedFrame {
            camera_frame: frame.index,
            timestamp: frame.timestamp,
            ssl_frame: ssl.map(|s| s.frame),
            ssl_timestamp: ssl.map(|s| s.timestamp),
            keypoints_in: frame.keypoints.len(),
            kept: filter_features(&frame.keypoints, &mask),
            mask,
            depth_invalidated,
        })
    }
}

/// Latest SSL frame at or before a query time, pulling frames from a source
/// only as far as needed.
struct SslCursor {
    current: Option<SslFrame>,
    ahead: Option<SslFrame>,
    exhausted: bool,
}

impl SslCursor {
    fn new() -> Self {
        Self {
            current: None,
            ahead: None,
            exhausted: false,
        }
    }

    fn seek(&mut self, t: f64, mut next: impl FnMut() -> Result<Option<SslFrame>>) -> Result<Option<&SslFrame>> {
        loop {
            if self.ahead.is_none() && !self.exhausted {
                self.ahead = next()?;
                self.exhausted = self.ahead.is_none();
            }
            match self.ahead.take() {
                Some(f) if f.timestamp <= t => self.current = Some(f),
                other => {
                    self.ahead = other;
                    break;
                }
            }
        }
        Ok(self.current.as_ref())
    }
}

struct Outputs {
    ssl: BufWriter<File>,
    weights: BufWriter<File>,
    camera: Option<CameraOutputs>,
}

struct CameraOutputs {
    rects: BufWriter<File>,
    keypoints: csv::Writer<BufWriter<File>>,
    masks: PathBuf,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

impl Outputs {
    fn open(dir: &Path, with_camera: bool) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let camera = if with_camera {
            let masks = dir.join("masks");
            std::fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
            let mut keypoints = csv::Writer::from_writer(create(&dir.join("keypoints_filtered.csv"))?);
            keypoints.write_record(["camera_frame", "u", "v", "score"])?;
            Some(CameraOutputs {
                rects: create(&dir.join("rects.jsonl"))?,
                keypoints,
                masks,
            })
        } else {
            None
        };
        Ok(Self {
            ssl: create(&dir.join("ssl.jsonl"))?,
            weights: create(&dir.join("weights.csv"))?,
            camera,
        })
    }

    fn ssl_frame(&mut self, frame: &SslFrame, dir: &Path) -> Result<()> {
        serde_json::to_writer(&mut self.ssl, frame)?;
        writeln!(self.ssl)
            .and_then(|_| write_weights_csv_row(&mut self.weights, frame))
            .map_err(|e| Error::io(dir, e))
    }

    fn fused(&mut self, fused: &FusedFrame, dir: &Path) -> Result<()> {
        let Some(cam) = &mut self.camera else {
            return Ok(());
        };
        let record = RectRecord {
            camera_frame: fused.camera_frame,
            timestamp: fused.timestamp,
            ssl_frame: fused.ssl_frame,
            ssl_timestamp: fused.ssl_timestamp,
            rects: fused.mask.rects(),
            invalid_pixels: fused.mask.invalid_count(),
            keypoints_in: fused.keypoints_in,
            keypoints_kept: fused.kept.len(),
            depth_invalidated: fused.depth_invalidated,
        };
        serde_json::to_writer(&mut cam.rects, &record)?;
        writeln!(cam.rects).map_err(|e| Error::io(dir, e))?;
        for k in &fused.kept {
            cam.keypoints.write_record([
                fused.camera_frame.to_string(),
                k.u.to_string(),
                k.v.to_string(),
                k.score.map(|s| s.to_string()).unwrap_or_default(),
            ])?;
        }
        write_pgm8(
            cam.masks.join(format!("{:06}.pgm", fused.camera_frame)),
            fused.mask.width(),
            fused.mask.height(),
            &fused.mask.to_bytes(),
        )
    }

    fn finish(mut self, dir: &Path) -> Result<()> {
        self.ssl.flush().and_then(|_| self.weights.flush()).map_err(|e| Error::io(dir, e))?;
        if let Some(mut cam) = self.camera {
            cam.rects.flush().map_err(|e| Error::io(dir, e))?;
            cam.keypoints.flush().map_err(|e| Error::io(dir, e))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub max_ms: f64,
    /// Frames emitted later than one hop after the SSL stage received
    /// their last sample.
    pub over_hop: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub mode: String,
    pub frames: usize,
    pub channels: usize,
    pub sample_rate: u32,
    pub audio_seconds: f64,
    pub wall_seconds: f64,
    pub ssl_output_rate_hz: f64,
    pub real_time_factor: f64,
    pub stage_timings: StageTimings,
    pub camera_frames: usize,
    pub rejected_camera_frames: usize,
    pub estimator_resets: u64,
    pub latency: Option<LatencyStats>,
    pub stalls: usize,
    pub repetitions: usize,
}

impl RunReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, self)?;
        writeln!(w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }
}

/// Everything a run needs besides the audio, checked before any processing.
struct Prepared {
    geometry: ArrayGeometry,
    camera: Option<CameraModel>,
    frames: Vec<CameraFrameEntry>,
}

fn prepare(config: &PipelineConfig) -> Result<Prepared> {
    config.validate()?;
    let geometry = config.load_geometry()?;
    let camera = config.inputs.camera.as_ref().map(CameraModel::load).transpose()?;
    let frames = match &config.inputs.frames {
        Some(p) => read_frame_index(p)?,
        None => Vec::new(),
    };
    for e in &frames {
        for p in e.depth.iter().chain(&e.keypoints) {
            if !p.is_file() {
                return Err(Error::Config(format!("camera frame {}: {} does not exist", e.index, p.display())));
            }
        }
    }
    Ok(Prepared { geometry, camera, frames })
}

fn output_rate(first: Option<f64>, last: Option<f64>, frames: usize, sample_rate: u32, hop: usize) -> f64 {
    match (first, last) {
        (Some(a), Some(b)) if frames > 1 && b > a => (frames - 1) as f64 / (b - a),
        _ => sample_rate as f64 / hop as f64,
    }
}

/// Processes the whole recording in one thread.
pub fn run_offline(config: &PipelineConfig) -> Result<RunReport> {
    run_offline_inner(config, true)
}

fn run_offline_inner(config: &PipelineConfig, write: bool) -> Result<RunReport> {
    let prep = prepare(config)?;
    let start = Instant::now();
    let mut timings = StageTimings::default();
    let dir = &config.output.dir;
    let clip = timed(&mut timings.read_s, || read_wav(&config.inputs.audio, Some(prep.geometry.num_mics())))?;
    let mut engine = SslEngine::new(config, &prep.geometry, clip.sample_rate())?;
    let mut outputs = if write {
        Some(Outputs::open(dir, prep.camera.is_some())?)
    } else {
        None
    };
    let mut stft = stft_stream(&clip, config.stft.window, config.stft.hop)?;
    let (mut frames, mut first, mut last) = (0usize, None, None);
    let mut next_ssl = |timings: &mut StageTimings, outputs: &mut Option<Outputs>| -> Result<Option<SslFrame>> {
        let Some(spec) = timed(&mut timings.stft_s, || stft.next()) else {
            return Ok(None);
        };
        let ssl = engine.process(&spec);
        frames += 1;
        first.get_or_insert(ssl.timestamp);
        last = Some(ssl.timestamp);
        if let Some(out) = outputs {
            let t = Instant::now();
            out.ssl_frame(&ssl, dir)?;
            timings.output_s += t.elapsed().as_secs_f64();
        }
        Ok(Some(ssl))
    };

    let mut cursor = SslCursor::new();
    let mut fuser = prep.camera.clone().map(Fuser::new);
    let mut camera_frames = 0;
    if let Some(fuser) = &mut fuser {
        for entry in &prep.frames {
            if !fuser.admit(entry.index, entry.timestamp) {
                continue;
            }
            let frame = timed(&mut timings.read_s, || CameraFrame::load(entry)).map_err(|e| e.at_frame(entry.index))?;
            let mut t = StageTimings::default();
            let ssl = cursor.seek(frame.timestamp, || next_ssl(&mut t, &mut outputs))?;
            let fused = timed(&mut timings.fusion_s, || fuser.fuse(&frame, ssl)).map_err(|e| e.at_frame(entry.index))?;
            timings.add(&t);
            if let Some(out) = &mut outputs {
                timed(&mut timings.output_s, || out.fused(&fused, dir))?;
            }
            camera_frames += 1;
        }
    }
    let mut t = StageTimings::default();
    while next_ssl(&mut t, &mut outputs)?.is_some() {}
    timings.add(&t);
    drop(next_ssl);
    if let Some(out) = outputs {
        out.finish(dir)?;
    }

    timings.add(engine.timings());
    let wall = start.elapsed().as_secs_f64();
    let report = RunReport {
        mode: "offline".into(),
        frames,
        channels: clip.num_channels(),
        sample_rate: clip.sample_rate(),
        audio_seconds: clip.duration_secs(),
        wall_seconds: wall,
        ssl_output_rate_hz: output_rate(first, last, frames, clip.sample_rate(), config.stft.hop),
        real_time_factor: clip.duration_secs() / wall.max(1e-9),
        stage_timings: timings,
        camera_frames,
        rejected_camera_frames: fuser.as_ref().map_or(0, Fuser::rejected),
        estimator_resets: engine.total_resets(),
        latency: None,
        stalls: 0,
        repetitions: 1,
    };
    if write {
        report.save(dir.join("report.json"))?;
    }
    Ok(report)
}

struct TimedSsl {
    frame: SslFrame,
    latency: Duration,
}

struct SslSummary {
    timings: StageTimings,
    resets: u64,
    channels: usize,
    sample_rate: u32,
    samples: usize,
}

/// Receives with a heartbeat: every `heartbeat` without a message logs a
/// stall and counts it. `None` once the sender is gone.
fn recv_with_heartbeat<T>(rx: &Receiver<T>, heartbeat: Duration, what: &str, stalls: &mut usize) -> Option<T> {
    loop {
        match rx.recv_timeout(heartbeat) {
            Ok(v) => return Some(v),
            Err(RecvTimeoutError::Timeout) => {
                *stalls += 1;
                log::warn!("{what} stream stalled: nothing received for {} ms", heartbeat.as_millis());
            }
            Err(RecvTimeoutError::Disconnected) => return None,
        }
    }
}

/// Runs reader, SSL and camera stages on separate threads connected by
/// bounded queues, writing the same outputs as [`run_offline`].
pub fn run_streaming(config: &PipelineConfig) -> Result<RunReport> {
    let prep = prepare(config)?;
    let start = Instant::now();
    let dir = config.output.dir.clone();
    let heartbeat = Duration::from_millis(config.stream.heartbeat_ms.max(1));
    let cap = config.stream.queue_capacity;
    let mics = prep.geometry.num_mics();

    let path = config.inputs.audio.clone();
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut wav = WavStream::new(std::io::BufReader::new(file))?;
    if wav.num_channels() != mics {
        return Err(Error::ChannelMismatch {
            expected: mics,
            found: wav.num_channels(),
        });
    }
    let sample_rate = wav.sample_rate();
    let mut engine = SslEngine::new(config, &prep.geometry, sample_rate)?;
    let mut outputs = Outputs::open(&dir, prep.camera.is_some())?;

    let (audio_tx, audio_rx) = bounded::<Result<Vec<f32>>>(cap);
    let (ssl_tx, ssl_rx) = bounded::<TimedSsl>(cap);
    let (cam_tx, cam_rx) = bounded::<(CameraFrameEntry, Result<CameraFrame>)>(cap);
    let (chunk, pace) = (config.stream.chunk_samples, config.stream.pace);
    let (window, hop) = (config.stft.window, config.stft.hop);

    std::thread::scope(|s| -> Result<RunReport> {
        let reader = s.spawn(move || {
            let mut read_s = 0.0;
            let begun = Instant::now();
            let mut delivered = 0usize;
            loop {
                let samples = timed(&mut read_s, || wav.read_frames(chunk));
                let done = matches!(&samples, Ok(v) if v.is_empty());
                if done {
                    break;
                }
                let failed = samples.is_err();
                if let Ok(v) = &samples {
                    delivered += v.len() / mics;
                    if pace {
                        let due = Duration::from_secs_f64(delivered as f64 / sample_rate as f64);
                        if let Some(wait) = due.checked_sub(begun.elapsed()) {
                            std::thread::sleep(wait);
                        }
                    }
                }
                if audio_tx.send(samples).is_err() || failed {
                    break;
                }
            }
            read_s
        });

        let ssl_stage = s.spawn(move || -> Result<SslSummary> {
            let mut stft = StreamingStft::new(mics, window, hop)?;
            let mut stft_s = 0.0;
            let mut stalls = 0;
            let mut samples = 0usize;
            let mut buf = Vec::new();
            while let Some(msg) = recv_with_heartbeat(&audio_rx, heartbeat, "audio", &mut stalls) {
                let chunk = msg?;
                let received = Instant::now();
                samples += chunk.len() / mics;
                timed(&mut stft_s, || stft.push_interleaved(&chunk, &mut buf));
                for spec in buf.drain(..) {
                    let frame = engine.process(&spec);
                    let latency = received.elapsed();
                    if ssl_tx.send(TimedSsl { frame, latency }).is_err() {
                        return Err(Error::Stream("SSL consumer went away".into()));
                    }
                }
            }
            let mut timings = *engine.timings();
            timings.stft_s += stft_s;
            Ok(SslSummary {
                timings,
                resets: engine.total_resets(),
                channels: mics,
                sample_rate,
                samples,
            })
        });

        let entries = prep.frames.clone();
        let camera_reader = s.spawn(move || {
            let mut read_s = 0.0;
            for e in entries {
                let frame = timed(&mut read_s, || CameraFrame::load(&e));
                if cam_tx.send((e, frame)).is_err() {
                    break;
                }
            }
            read_s
        });

        // Fusion and output writing on this thread.
        let mut timings = StageTimings::default();
        let mut stalls = 0usize;
        let mut latencies: Vec<f64> = Vec::new();
        let (mut frames, mut first, mut last) = (0usize, None, None);
        let mut next_ssl = |timings: &mut StageTimings, stalls: &mut usize, outputs: &mut Outputs| -> Result<Option<SslFrame>> {
            let Some(msg) = recv_with_heartbeat(&ssl_rx, heartbeat, "SSL", stalls) else {
                return Ok(None);
            };
            latencies.push(msg.latency.as_secs_f64() * 1e3);
            frames += 1;
            first.get_or_insert(msg.frame.timestamp);
            last = Some(msg.frame.timestamp);
            timed(&mut timings.output_s, || outputs.ssl_frame(&msg.frame, &dir))?;
            Ok(Some(msg.frame))
        };
        let mut cursor = SslCursor::new();
        let mut fuser = prep.camera.clone().map(Fuser::new);
        let mut camera_frames = 0;
        let mut failure = None;
        if let Some(fuser) = &mut fuser {
            while let Some((entry, frame)) = recv_with_heartbeat(&cam_rx, heartbeat, "camera", &mut stalls) {
                if !fuser.admit(entry.index, entry.timestamp) {
                    continue;
                }
                let step = frame.and_then(|frame| {
                    let mut t = StageTimings::default();
                    let mut st = 0;
                    let ssl = cursor.seek(frame.timestamp, || next_ssl(&mut t, &mut st, &mut outputs));
                    stalls += st;
                    let fused = ssl.and_then(|ssl| timed(&mut timings.fusion_s, || fuser.fuse(&frame, ssl)));
                    timings.add(&t);
                    let fused = fused?;
                    timed(&mut timings.output_s, || outputs.fused(&fused, &dir))
                });
                if let Err(e) = step {
                    failure = Some(e.at_frame(entry.index));
                    break;
                }
                camera_frames += 1;
            }
        }
        if failure.is_none() {
            let mut t = StageTimings::default();
            loop {
                match next_ssl(&mut t, &mut stalls, &mut outputs) {
                    Ok(Some(_)) => {}
                    Ok(None) => break,
                    Err(e) => {
                        failure = Some(e);
                        break;
                    }
                }
            }
            timings.add(&t);
        }
        drop(next_ssl);
        // Unblock producers before joining them.
        drop(ssl_rx);
        drop(cam_rx);
        let read_audio = reader.join().map_err(|_| Error::Stream("audio reader panicked".into()))?;
        let summary = ssl_stage.join().map_err(|_| Error::Stream("SSL stage panicked".into()))?;
        let read_camera = camera_reader.join().map_err(|_| Error::Stream("camera reader panicked".into()))?;
        if let Some(e) = failure {
            return Err(e);
        }
        let summary = summary?;
        outputs.finish(&dir)?;

        timings.read_s += read_audio + read_camera;
        timings.add(&summary.timings);
        let hop_ms = 1e3 * hop as f64 / summary.sample_rate as f64;
        let latency = (!latencies.is_empty()).then(|| LatencyStats {
            mean_ms: latencies.iter().sum::<f64>() / latencies.len() as f64,
            max_ms: latencies.iter().copied().fold(0.0, f64::max),
            over_hop: latencies.iter().filter(|&&l| l > hop_ms).count(),
        });
        let audio_seconds = summary.samples as f64 / summary.sample_rate as f64;
        let wall = start.elapsed().as_secs_f64();
        let report = RunReport {
            mode: "streaming".into(),
            frames,
            channels: summary.channels,
            sample_rate: summary.sample_rate,
            audio_seconds,
            wall_seconds: wall,
            ssl_output_rate_hz: output_rate(first, last, frames, summary.sample_rate, hop),
            real_time_factor: audio_seconds / wall.max(1e-9),
            stage_timings: timings,
            camera_frames,
            rejected_camera_frames: fuser.as_ref().map_or(0, Fuser::rejected),
            estimator_resets: summary.resets,
            latency,
            stalls,
            repetitions: 1,
        };
        report.save(dir.join("report.json"))?;
        Ok(report)
    })
}

/// Repeats an offline run without writing outputs and returns the report of
/// the median-duration repetition.
pub fn benchmark(config: &PipelineConfig, repetitions: usize) -> Result<RunReport> {
    let reps = repetitions.max(1);
    let mut reports = (0..reps).map(|_| run_offline_inner(config, false)).collect::<Result<Vec<_>>>()?;
    reports.sort_by(|a, b| a.wall_seconds.total_cmp(&b.wall_seconds));
    let mut median = reports.swap_remove(reps / 2);
    median.mode = "benchmark".into();
    median.repetitions = reps;
    Ok(median)
}
