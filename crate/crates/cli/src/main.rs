use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use acoustic_fusion_core::audio::{write_wav, WavEncoding};
use acoustic_fusion_core::fusion::CameraModel;
use acoustic_fusion_core::geometry::ArrayGeometry;
use acoustic_fusion_core::pipeline::{benchmark, run_offline, run_streaming, PipelineConfig, RunReport};
use acoustic_fusion_core::simulator::{render_scene, write_camera_fixture, RenderOptions, SceneScript};
use acoustic_fusion_core::{Error, Result};

#[derive(Parser)]
#[command(name = "acoustic-fusion", version, about = "Microphone-array sound source localization and camera masking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Localize sources in a recording and mask camera frames.
    Run {
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Process through the threaded streaming path.
        #[arg(long)]
        stream: bool,
    },
    /// Render a synthetic scene to WAV plus ground truth.
    Simulate {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Array geometry; the built-in 7-microphone profile by default.
        #[arg(long)]
        geometry: Option<PathBuf>,
        /// Also write synthetic camera frames and a ready-to-run pipeline config.
        #[arg(long)]
        camera: Option<PathBuf>,
        #[arg(long, default_value_t = 30.0)]
        fps: f64,
        #[arg(long, value_enum, default_value_t = Encoding::Float32)]
        encoding: Encoding,
    },
    /// Time repeated offline runs and report the median.
    Bench {
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long, default_value_t = 3)]
        repetitions: usize,
        /// Where to write the report; printed only when absent.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    audio: Option<PathBuf>,
    #[arg(long)]
    geometry: Option<PathBuf>,
    #[arg(long)]
    camera: Option<PathBuf>,
    #[arg(long)]
    frames: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// STFT window length in samples.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    hop: Option<usize>,
    /// Multiple of the tracked noise floor a bin must exceed to be used.
    #[arg(long)]
    noise_floor_factor: Option<f64>,
    /// Override any config value, e.g. `--set estimator.forgetting=0.99`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_key_value)]
    overrides: Vec<(String, String)>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Encoding {
    Pcm16,
    Float32,
}

fn parse_key_value(s: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl PipelineArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let mut overrides = self.overrides.clone();
        let flags = [
            ("stft.window", self.window.map(|v| v.to_string())),
            ("stft.hop", self.hop.map(|v| v.to_string())),
            ("estimator.gate_factor", self.noise_floor_factor.map(|v| v.to_string())),
        ];
        overrides.extend(flags.into_iter().filter_map(|(k, v)| Some((k.to_string(), v?))));
        let mut config = PipelineConfig::load(&self.config, &overrides)?;
        if let Some(p) = &self.audio {
            config.inputs.audio = p.clone();
        }
        if let Some(p) = &self.geometry {
            config.inputs.geometry = Some(p.clone());
        }
        if let Some(p) = &self.camera {
            config.inputs.camera = Some(p.clone());
        }
        if let Some(p) = &self.frames {
            config.inputs.frames = Some(p.clone());
        }
        if let Some(p) = &self.out {
            config.output.dir = p.clone();
        }
        Ok(config)
    }
}

fn print_report(report: &RunReport) {
    let t = &report.stage_timings;
    println!(
        "{} frames from {:.2} s of {}-channel audio in {:.3} s: real-time factor {:.2}, SSL rate {:.3} Hz",
        report.frames, report.audio_seconds, report.channels, report.wall_seconds, report.real_time_factor, report.ssl_output_rate_hz
    );
    println!(
        "stages (s): read {:.3}  stft {:.3}  dprtf {:.3}  clustering {:.3}  fusion {:.3}  output {:.3}",
        t.read_s, t.stft_s, t.dprtf_s, t.clustering_s, t.fusion_s, t.output_s
    );
    if report.camera_frames > 0 || report.rejected_camera_frames > 0 {
        println!(
            "camera frames: {} fused, {} rejected",
            report.camera_frames, report.rejected_camera_frames
        );
    }
    if let Some(l) = &report.latency {
        println!(
            "latency: mean {:.3} ms, max {:.3} ms, {} frames over one hop",
            l.mean_ms, l.max_ms, l.over_hop
        );
    }
}

fn simulate(
    scene: &Path,
    seed: u64,
    out: &Path,
    geometry: Option<&Path>,
    camera: Option<&Path>,
    fps: f64,
    encoding: Encoding,
) -> Result<()> {
    let script = SceneScript::load(scene)?;
    let geometry = match geometry {
        Some(p) => ArrayGeometry::load(p)?,
        None => ArrayGeometry::default_profile(),
    };
    let camera_model = camera.map(CameraModel::load).transpose()?;
    let opts = RenderOptions {
        base_dir: scene.parent().unwrap_or(Path::new(".")).to_path_buf(),
        ..RenderOptions::with_seed(seed)
    };
    let (clip, truth) = render_scene(&script, &geometry, &opts)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let write = |name: &str, text: String| {
        let path = out.join(name);
        std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
    };
    let encoding = match encoding {
        Encoding::Pcm16 => WavEncoding::Pcm16,
        Encoding::Float32 => WavEncoding::Float32,
    };
    write_wav(out.join("audio.wav"), &clip, encoding)?;
    truth.save_csv(out.join("ground_truth.csv"))?;
    write("geometry.toml", geometry.to_toml_string())?;
    write("scene.toml", script.to_toml_string())?;

    let mut config = String::from("[inputs]\naudio = \"audio.wav\"\ngeometry = \"geometry.toml\"\n");
    if let (Some(path), Some(cam)) = (camera, &camera_model) {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        write("camera.toml", text)?;
        write_camera_fixture(out, cam.width, cam.height, script.duration, fps, 200, seed)?;
        config.push_str("camera = \"camera.toml\"\nframes = \"frames.csv\"\n");
    }
    config.push_str("\n[output]\ndir = \"results\"\n");
    write("pipeline.toml", config)?;
    println!(
        "rendered {:.2} s, {} channels, {} frames of ground truth into {}",
        clip.duration_secs(),
        clip.num_channels(),
        truth.len(),
        out.display()
    );
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { pipeline, stream } => {
            let config = pipeline.load()?;
            let report = if stream {
                run_streaming(&config)?
            } else {
                run_offline(&config)?
            };
            print_report(&report);
            println!("outputs in {}", config.output.dir.display());
        }
        Command::Simulate {
            scene,
            seed,
            out,
            geometry,
            camera,
            fps,
            encoding,
        } => simulate(&scene, seed, &out, geometry.as_deref(), camera.as_deref(), fps, encoding)?,
        Command::Bench {
            pipeline,
            repetitions,
            report,
        } => {
            let config = pipeline.load()?;
            let result = benchmark(&config, repetitions)?;
            print_report(&result);
            if let Some(path) = report {
                result.save(path)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}
