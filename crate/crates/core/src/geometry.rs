//! Microphone-array geometry, the candidate azimuth grid and the far-field
//! steering table used as mixture means.
//!
//! Frame convention: x points along the array's forward axis (the camera's
//! optical axis for the default mounting), y to the left, z up. Azimuth 0° is
//! forward and grows counterclockwise when viewed from above.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::Vector3;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Position = Vector3<f64>;

pub const DEFAULT_SPEED_OF_SOUND: f64 = 343.0;

const DEFAULT_PROFILE: &str = include_str!("../../../configs/kinect7.toml");

#[derive(Debug, Clone, Deserialize)]
struct GeometryDocument {
    mics: Vec<[f64; 3]>,
    #[serde(default)]
    reference: usize,
    #[serde(default = "default_speed_of_sound")]
    speed_of_sound: f64,
}

fn default_speed_of_sound() -> f64 {
    DEFAULT_SPEED_OF_SOUND
}

/// Validated microphone positions plus the reference channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayGeometry {
    mics: Vec<Position>,
    reference: usize,
    speed_of_sound: f64,
}

impl ArrayGeometry {
    pub fn new(mics: Vec<Position>, reference: usize, speed_of_sound: f64) -> Result<Self> {
        if mics.len() < 2 {
            return Err(Error::Geometry(format!(
                "need at least 2 microphones, got {}",
                mics.len()
            )));
        }
        if reference >= mics.len() {
            return Err(Error::Geometry(format!(
                "reference index {reference} out of range for {} microphones",
                mics.len()
            )));
        }
        if !(speed_of_sound.is_finite() && speed_of_sound > 0.0) {
            return Err(Error::Geometry(format!(
                "speed of sound must be positive, got {speed_of_sound}"
            )));
        }
        if let Some(i) = mics.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::Geometry(format!("microphone {i} has a non-finite coordinate")));
        }
        for i in 0..mics.len() {
            for j in (i + 1)..mics.len() {
                if mics[i] == mics[j] {
                    return Err(Error::Geometry(format!(
                        "microphones {i} and {j} share the same position"
                    )));
                }
            }
        }
        Ok(Self {
            mics,
            reference,
            speed_of_sound,
        })
    }

    /// Parses the key/value document (`mics`, `reference`, `speed_of_sound`).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc: GeometryDocument = toml::from_str(text).map_err(|e| Error::Parse {
            what: "geometry config",
            message: e.to_string(),
        })?;
        let mics = doc.mics.iter().map(|p| Position::new(p[0], p[1], p[2])).collect();
        Self::new(mics, doc.reference, doc.speed_of_sound)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// The bundled approximate 7-microphone planar layout.
    pub fn default_profile() -> Self {
        Self::from_toml_str(DEFAULT_PROFILE).expect("bundled geometry profile is valid")
    }

    pub fn to_toml_string(&self) -> String {
        let mut out = String::from("mics = [\n");
        for p in &self.mics {
            out.push_str(&format!("    [{:?}, {:?}, {:?}],\n", p.x, p.y, p.z));
        }
        out.push_str(&format!(
            "]\nreference = {}\nspeed_of_sound = {:?}\n",
            self.reference, self.speed_of_sound
        ));
        out
    }

    pub fn num_mics(&self) -> usize {
        self.mics.len()
    }

    pub fn reference(&self) -> usize {
        self.reference
    }

    pub fn speed_of_sound(&self) -> f64 {
        self.speed_of_sound
    }

    pub fn positions(&self) -> &[Position] {
        &self.mics
    }

    pub fn position(&self, m: usize) -> Position {
        self.mics[m]
    }

    /// Same array with a different reference channel.
    pub fn with_reference(&self, reference: usize) -> Result<Self> {
        Self::new(self.mics.clone(), reference, self.speed_of_sound)
    }

    /// Channels other than the reference, in increasing order.
    pub fn non_reference_channels(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.mics.len()).filter(move |&m| m != self.reference)
    }

    /// Largest inter-microphone distance.
    pub fn max_baseline(&self) -> f64 {
        let mut best = 0.0f64;
        for (i, a) in self.mics.iter().enumerate() {
            for b in &self.mics[i + 1..] {
                best = best.max((a - b).norm());
            }
        }
        best
    }

    /// Far-field time difference of arrival of channel `m` relative to the
    /// reference, in seconds. Positive means `m` hears the wavefront later.
    pub fn far_field_tdoa(&self, azimuth_deg: f64, m: usize) -> f64 {
        let u = unit_direction(azimuth_deg);
        u.dot(&(self.mics[self.reference] - self.mics[m])) / self.speed_of_sound
    }

    /// Arrival time at channel `m` of a plane wave from `azimuth_deg`, relative
    /// to its arrival at the array origin.
    pub fn arrival_offset(&self, azimuth_deg: f64, m: usize) -> f64 {
        -unit_direction(azimuth_deg).dot(&self.mics[m]) / self.speed_of_sound
    }
}

/// Horizontal unit vector pointing from the array towards `azimuth_deg`.
pub fn unit_direction(azimuth_deg: f64) -> Position {
    let a = azimuth_deg.to_radians();
    Position::new(a.cos(), a.sin(), 0.0)
}

/// Wraps an angle in degrees into (-180, 180].
pub fn wrap_degrees(deg: f64) -> f64 {
    let mut a = deg % 360.0;
    if a <= -180.0 {
        a += 360.0;
    } else if a > 180.0 {
        a -= 360.0;
    }
    a
}

/// Absolute angular difference on the circle, in [0, 180].
pub fn angular_distance_deg(a: f64, b: f64) -> f64 {
    wrap_degrees(a - b).abs()
}

/// Uniform azimuth grid covering (-180, 180].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateGrid {
    azimuths_deg: Vec<f64>,
    spacing_deg: f64,
}

impl CandidateGrid {
    pub const DEFAULT_DIRECTIONS: usize = 72;

    /// `directions` equally spaced azimuths; the last one is 180°.
    pub fn new(directions: usize) -> Result<Self> {
        if directions == 0 {
            return Err(Error::Config("candidate grid needs at least one direction".into()));
        }
        let spacing_deg = 360.0 / directions as f64;
        let azimuths_deg = (1..=directions)
            .map(|i| -180.0 + i as f64 * spacing_deg)
            .collect();
        Ok(Self {
            azimuths_deg,
            spacing_deg,
        })
    }

    pub fn len(&self) -> usize {
        self.azimuths_deg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.azimuths_deg.is_empty()
    }

    pub fn spacing_deg(&self) -> f64 {
        self.spacing_deg
    }

    pub fn azimuths_deg(&self) -> &[f64] {
        &self.azimuths_deg
    }

    pub fn azimuth_deg(&self, d: usize) -> f64 {
        self.azimuths_deg[d]
    }

    /// Index of the grid azimuth closest to `azimuth_deg`.
    pub fn nearest_index(&self, azimuth_deg: f64) -> usize {
        let offset = wrap_degrees(azimuth_deg) + 180.0;
        let i = (offset / self.spacing_deg).round() as isize - 1;
        i.rem_euclid(self.len() as isize) as usize
    }

    /// Circular index distance between two grid cells.
    pub fn index_distance(&self, a: usize, b: usize) -> usize {
        let n = self.len();
        let d = a.abs_diff(b) % n;
        d.min(n - d)
    }
}

impl Default for CandidateGrid {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIRECTIONS).expect("default grid")
    }
}

/// Theoretical direct-path relative transfer functions, one per
/// (frequency bin, non-reference channel, candidate direction).
///
/// Stored bin-major, then direction, then channel so that all channel values
/// of one (bin, direction) pair are contiguous.
#[derive(Debug, Clone)]
pub struct SteeringTable {
    bins: usize,
    directions: usize,
    channels: Vec<usize>,
    frequencies_hz: Vec<f64>,
    means: Vec<Complex64>,
}

impl SteeringTable {
    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn directions(&self) -> usize {
        self.directions
    }

    /// Non-reference channel indices, in the order used by [`Self::means`].
    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    pub fn frequency_hz(&self, k: usize) -> f64 {
        self.frequencies_hz[k]
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    /// All channel means for bin `k` and direction `d`.
    #[inline]
    pub fn means(&self, k: usize, d: usize) -> &[Complex64] {
        let c = self.channels.len();
        let start = (k * self.directions + d) * c;
        &self.means[start..start + c]
    }

    /// Mean for bin `k`, the `slot`-th non-reference channel, direction `d`.
    pub fn get(&self, k: usize, slot: usize, d: usize) -> Complex64 {
        self.means(k, d)[slot]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Complex64> {
        self.means.iter()
    }
}

/// Center frequency of STFT bin `k` when there are `bins` one-sided bins.
pub fn bin_frequency(k: usize, bins: usize, sample_rate: f64) -> f64 {
    if bins < 2 {
        return 0.0;
    }
    k as f64 * sample_rate / (2.0 * (bins - 1) as f64)
}

/// Builds the plane-wave steering table `exp(-j 2π f_k τ^{m,d})`.
pub fn compute_steering_table(
    geometry: &ArrayGeometry,
    grid: &CandidateGrid,
    bins: usize,
    sample_rate: f64,
) -> Result<SteeringTable> {
    if bins == 0 {
        return Err(Error::Config("steering table needs at least one bin".into()));
    }
    if !(sample_rate > 0.0) {
        return Err(Error::Config(format!("sample rate must be positive, got {sample_rate}")));
    }
    let channels: Vec<usize> = geometry.non_reference_channels().collect();
    let frequencies_hz: Vec<f64> = (0..bins).map(|k| bin_frequency(k, bins, sample_rate)).collect();
    let tdoas: Vec<Vec<f64>> = (0..grid.len())
        .map(|d| {
            channels
                .iter()
                .map(|&m| geometry.far_field_tdoa(grid.azimuth_deg(d), m))
                .collect()
        })
        .collect();

    let mut means = Vec::with_capacity(bins * grid.len() * channels.len());
    for &f in &frequencies_hz {
        for row in &tdoas {
            for &tau in row {
                means.push(Complex64::from_polar(1.0, -2.0 * PI * f * tau));
            }
        }
    }
    Ok(SteeringTable {
        bins,
        directions: grid.len(),
        channels,
        frequencies_hz,
        means,
    })
}
