//! Multichannel clips and WAV I/O.

use std::io::Read;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

/// Planar multichannel audio, samples nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    channels: Vec<Vec<f32>>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(channels: Vec<Vec<f32>>, sample_rate: u32) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Config("audio clip needs at least one channel".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::Config("all channels must have the same length".into()));
        }
        Ok(Self {
            channels,
            sample_rate,
        })
    }

    pub fn from_interleaved(samples: &[f32], num_channels: usize, sample_rate: u32) -> Result<Self> {
        if num_channels == 0 || samples.len() % num_channels != 0 {
            return Err(Error::Config(format!(
                "{} interleaved samples do not divide into {num_channels} channels",
                samples.len()
            )));
        }
        let frames = samples.len() / num_channels;
        let mut channels = vec![Vec::with_capacity(frames); num_channels];
        for frame in samples.chunks_exact(num_channels) {
            for (c, &s) in channels.iter_mut().zip(frame) {
                c.push(s);
            }
        }
        Self::new(channels, sample_rate)
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    pub fn channel(&self, m: usize) -> &[f32] {
        &self.channels[m]
    }

    pub fn channels(&self) -> &[Vec<f32>] {
        &self.channels
    }

    pub fn interleaved(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.len() * self.num_channels());
        for t in 0..self.len() {
            for c in &self.channels {
                out.push(c[t]);
            }
        }
        out
    }

    pub fn check_channels(&self, expected: usize) -> Result<()> {
        if self.num_channels() != expected {
            return Err(Error::ChannelMismatch {
                expected,
                found: self.num_channels(),
            });
        }
        Ok(())
    }
}

/// Streaming WAV decoder producing normalized interleaved `f32` samples.
pub struct WavStream<R: Read> {
    reader: WavReader<R>,
    channels: usize,
    sample_rate: u32,
}

impl<R: Read> WavStream<R> {
    pub fn new(source: R) -> Result<Self> {
        let reader = WavReader::new(source)?;
        let spec = reader.spec();
        check_encoding(&spec)?;
        Ok(Self {
            channels: spec.channels as usize,
            sample_rate: spec.sample_rate,
            reader,
        })
    }

    pub fn num_channels(&self) -> usize {
        self.channels
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Reads up to `frames` multichannel frames; an empty result means end of stream.
    pub fn read_frames(&mut self, frames: usize) -> Result<Vec<f32>> {
        let want = frames.saturating_mul(self.channels);
        let mut out = Vec::with_capacity(want.min(self.reader.len() as usize));
        match self.reader.spec().sample_format {
            SampleFormat::Float => {
                for s in self.reader.samples::<f32>().take(want) {
                    out.push(s?);
                }
            }
            SampleFormat::Int => {
                for s in self.reader.samples::<i16>().take(want) {
                    out.push(s? as f32 / 32768.0);
                }
            }
        }
        // Drop a trailing partial frame.
        out.truncate(out.len() - out.len() % self.channels);
        Ok(out)
    }
}

fn check_encoding(spec: &WavSpec) -> Result<()> {
    match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) | (SampleFormat::Float, 32) => Ok(()),
        (fmt, bits) => Err(Error::UnsupportedEncoding(format!(
            "{bits}-bit {}; expected 16-bit PCM or 32-bit float",
            match fmt {
                SampleFormat::Int => "integer PCM",
                SampleFormat::Float => "float",
            }
        ))),
    }
}

/// Reads a whole WAV file. When `expected_channels` is given the channel
/// count must match it.
pub fn read_wav(path: impl AsRef<Path>, expected_channels: Option<usize>) -> Result<AudioClip> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut stream = WavStream::new(std::io::BufReader::new(file))?;
    if let Some(expected) = expected_channels {
        if stream.num_channels() != expected {
            return Err(Error::ChannelMismatch {
                expected,
                found: stream.num_channels(),
            });
        }
    }
    let samples = stream.read_frames(usize::MAX)?;
    AudioClip::from_interleaved(&samples, stream.num_channels(), stream.sample_rate())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip, encoding: WavEncoding) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: clip.num_channels() as u16,
        sample_rate: clip.sample_rate(),
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => SampleFormat::Int,
            WavEncoding::Float32 => SampleFormat::Float,
        },
    };
    let mut writer = WavWriter::create(path, spec)?;
    for t in 0..clip.len() {
        for c in clip.channels() {
            match encoding {
                WavEncoding::Pcm16 => {
                    let v = (c[t].clamp(-1.0, 1.0) * 32767.0).round() as i16;
                    writer.write_sample(v)?;
                }
                WavEncoding::Float32 => writer.write_sample(c[t])?,
            }
        }
    }
    writer.finalize()?;
    Ok(())
}
