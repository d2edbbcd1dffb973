//! Hermetic multichannel scene rendering: far-field directional sources,
//! diffuse noise and a synthetic exponential-decay reverberation tail, with
//! the ground-truth image of every source kept alongside the mixture.
//!
//! Scenario files are plain text:
//!
//! ```text
//! duplex-scn v1
//! # comments and blank lines are ignored
//! duration = 10            # seconds
//! sample_rate = 16000
//! seed = 7
//! noise_level_db = -35     # omit for no noise
//! noise_directions = 12
//! reverb_rt60 = 0.3        # seconds, 0 = anechoic
//! reverb_drr_db = 3
//! source = 0, -26, synthetic          # azimuth deg, level dBFS, kind
//! source = 90, -26, corpus:/data/wavs # directory of mono WAVs
//! mic = 0.0, 0.0, 0.0                 # optional, repeat per microphone
//! speed_of_sound = 343
//! ```

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;

use crate::signal::{read_wav, TimeSignal};
use crate::{Error, Result};

pub const SCENARIO_HEADER: &str = "duplex-scn v1";

const SINC_HALF_TAPS: i64 = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayGeometry {
    mic_positions: Vec<[f64; 3]>,
    speed_of_sound: f64,
}

impl ArrayGeometry {
    pub fn new(mic_positions: Vec<[f64; 3]>, speed_of_sound: f64) -> Result<Self> {
        if mic_positions.len() < 2 {
            return Err(Error::Config("array needs at least two microphones".into()));
        }
        if !(speed_of_sound > 0.0) {
            return Err(Error::Config("speed of sound must be positive".into()));
        }
        for (i, p) in mic_positions.iter().enumerate() {
            for q in &mic_positions[i + 1..] {
                let d2: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                if d2 < 1e-12 {
                    return Err(Error::Config("microphone positions must be distinct".into()));
                }
            }
        }
        Ok(Self { mic_positions, speed_of_sound })
    }

    /// Five microphones on a 9 cm brow arc; microphone 0 is the raised
    /// center one.
    pub fn headset_arc() -> Self {
        let r = 0.09;
        let mut mics = vec![[r, 0.0, 0.02]];
        for deg in [-60.0f64, -25.0, 25.0, 60.0] {
            let a = deg.to_radians();
            mics.push([r * a.cos(), r * a.sin(), 0.0]);
        }
        Self::new(mics, 343.0).expect("valid default geometry")
    }

    /// Uniform linear array along the y axis, centered at the origin.
    pub fn linear(mics: usize, spacing: f64) -> Result<Self> {
        let mid = (mics as f64 - 1.0) / 2.0;
        Self::new((0..mics).map(|i| [0.0, (i as f64 - mid) * spacing, 0.0]).collect(), 343.0)
    }

    /// Uniform circular array in the horizontal plane.
    pub fn circular(mics: usize, radius: f64) -> Result<Self> {
        Self::new(
            (0..mics)
                .map(|i| {
                    let a = 2.0 * PI * i as f64 / mics as f64;
                    [radius * a.cos(), radius * a.sin(), 0.0]
                })
                .collect(),
            343.0,
        )
    }

    pub fn mics(&self) -> usize {
        self.mic_positions.len()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.mic_positions
    }

    pub fn speed_of_sound(&self) -> f64 {
        self.speed_of_sound
    }

    /// Plane-wave arrival delay at each microphone relative to the origin,
    /// in seconds, for a far-field source at `azimuth_deg` in the
    /// horizontal plane (0° = +x, counter-clockwise).
    pub fn delays(&self, azimuth_deg: f64) -> Vec<f64> {
        let a = azimuth_deg.to_radians();
        let dir = [a.cos(), a.sin(), 0.0];
        self.mic_positions
            .iter()
            .map(|p| -(p[0] * dir[0] + p[1] * dir[1] + p[2] * dir[2]) / self.speed_of_sound)
            .collect()
    }

    pub fn aperture(&self) -> f64 {
        let mut best: f64 = 0.0;
        for (i, p) in self.mic_positions.iter().enumerate() {
            for q in &self.mic_positions[i + 1..] {
                let d: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                best = best.max(d);
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SourceKind {
    SyntheticSpeech,
    /// Directory of mono WAV files; one is chosen by the scenario seed.
    Corpus(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceSpec {
    pub azimuth_deg: f64,
    /// Power of the reference-channel image in dB relative to full scale.
    pub level_db: f64,
    pub kind: SourceKind,
}

impl SourceSpec {
    pub fn synthetic(azimuth_deg: f64, level_db: f64) -> Self {
        Self { azimuth_deg, level_db, kind: SourceKind::SyntheticSpeech }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub sources: Vec<SourceSpec>,
    /// Reference-channel power of the diffuse noise in dBFS; `None` = no noise.
    pub noise_level_db: Option<f64>,
    pub noise_directions: usize,
    /// 60 dB decay time of the synthetic reverberation tail; 0 = anechoic.
    pub reverb_rt60: f64,
    /// Direct-to-reverberant energy ratio of the tail.
    pub reverb_drr_db: f64,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            sources: Vec::new(),
            noise_level_db: None,
            noise_directions: 12,
            reverb_rt60: 0.0,
            reverb_drr_db: 3.0,
            duration_s: 10.0,
            sample_rate: 16_000,
            seed: 0,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) {
            return Err(Error::Config("duration must be positive".into()));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        for s in &self.sources {
            if !(0.0..360.0).contains(&s.azimuth_deg) {
                return Err(Error::Config(format!("azimuth {} outside [0, 360)", s.azimuth_deg)));
            }
        }
        if self.noise_level_db.is_some() && self.noise_directions == 0 {
            return Err(Error::Config("diffuse noise needs at least one direction".into()));
        }
        if self.reverb_rt60 < 0.0 {
            return Err(Error::Config("rt60 must be non-negative".into()));
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        (self.duration_s * self.sample_rate as f64).round() as usize
    }

    /// Parses the `duplex-scn v1` text format. Returns the scenario and the
    /// geometry if the file lists microphones.
    pub fn parse(text: &str) -> Result<(Self, Option<ArrayGeometry>)> {
        let mut lines = text.lines().map(|l| l.split('#').next().unwrap_or("").trim()).filter(|l| !l.is_empty());
        match lines.next() {
            Some(SCENARIO_HEADER) => {}
            other => return Err(Error::Config(format!("expected header `{SCENARIO_HEADER}`, found {other:?}"))),
        }
        let mut scn = Scenario::default();
        let mut mics = Vec::new();
        let mut speed = 343.0;
        for line in lines {
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("expected `key = value`, found `{line}`")))?;
            let num = |v: &str| -> Result<f64> {
                v.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad number `{v}` for `{key}`")))
            };
            match key {
                "duration" => scn.duration_s = num(value)?,
                "sample_rate" => scn.sample_rate = num(value)? as u32,
                "seed" => scn.seed = value.parse().map_err(|_| Error::Config(format!("bad seed `{value}`")))?,
                "noise_level_db" => scn.noise_level_db = Some(num(value)?),
                "noise_directions" => scn.noise_directions = num(value)? as usize,
                "reverb_rt60" => scn.reverb_rt60 = num(value)?,
                "reverb_drr_db" => scn.reverb_drr_db = num(value)?,
                "speed_of_sound" => speed = num(value)?,
                "source" => {
                    let parts: Vec<&str> = value.splitn(3, ',').map(str::trim).collect();
                    if parts.len() != 3 {
                        return Err(Error::Config(format!("source needs `azimuth, level, kind`: `{value}`")));
                    }
                    let kind = match parts[2] {
                        "synthetic" => SourceKind::SyntheticSpeech,
                        k if k.starts_with("corpus:") => SourceKind::Corpus(PathBuf::from(&k["corpus:".len()..])),
                        k => return Err(Error::Config(format!("unknown source kind `{k}`"))),
                    };
                    scn.sources.push(SourceSpec { azimuth_deg: num(parts[0])?, level_db: num(parts[1])?, kind });
                }
                "mic" => {
                    let c: Vec<f64> = value.split(',').map(num).collect::<Result<_>>()?;
                    if c.len() != 3 {
                        return Err(Error::Config(format!("mic needs three coordinates: `{value}`")));
                    }
                    mics.push([c[0], c[1], c[2]]);
                }
                other => return Err(Error::Config(format!("unknown scenario key `{other}`"))),
            }
        }
        scn.validate()?;
        let geom = if mics.is_empty() { None } else { Some(ArrayGeometry::new(mics, speed)?) };
        Ok((scn, geom))
    }

    pub fn to_text(&self, geom: Option<&ArrayGeometry>) -> String {
        let mut out = format!("{SCENARIO_HEADER}\n");
        out += &format!("duration = {}\nsample_rate = {}\nseed = {}\n", self.duration_s, self.sample_rate, self.seed);
        if let Some(level) = self.noise_level_db {
            out += &format!("noise_level_db = {level}\n");
        }
        out += &format!(
            "noise_directions = {}\nreverb_rt60 = {}\nreverb_drr_db = {}\n",
            self.noise_directions, self.reverb_rt60, self.reverb_drr_db
        );
        for s in &self.sources {
            let kind = match &s.kind {
                SourceKind::SyntheticSpeech => "synthetic".to_string(),
                SourceKind::Corpus(p) => format!("corpus:{}", p.display()),
            };
            out += &format!("source = {}, {}, {kind}\n", s.azimuth_deg, s.level_db);
        }
        if let Some(g) = geom {
            out += &format!("speed_of_sound = {}\n", g.speed_of_sound());
            for p in g.positions() {
                out += &format!("mic = {}, {}, {}\n", p[0], p[1], p[2]);
            }
        }
        out
    }
}

/// Rendered scene with its decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Multichannel image of every source, in scenario order.
    pub images: Vec<TimeSignal<f64>>,
    /// Direct-path part of each image (equal to the image when anechoic).
    pub direct: Vec<TimeSignal<f64>>,
    /// Multichannel diffuse-noise image (zeros when the scenario has none).
    pub noise: TimeSignal<f64>,
    pub mixture: TimeSignal<f64>,
}

impl GroundTruth {
    /// Single-channel image of source `n` at microphone `channel`.
    pub fn reference_image(&self, n: usize, channel: usize) -> TimeSignal<f64> {
        self.images[n].select_channel(channel)
    }

    /// Concatenates scenes in time. All scenes must have the same source
    /// count, channel count and sample rate.
    pub fn concat(parts: &[GroundTruth]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Shape("no scenes to concatenate".into()))?;
        let join = |pick: &dyn Fn(&GroundTruth) -> &TimeSignal<f64>| -> Result<TimeSignal<f64>> {
            let views: Vec<_> = parts.iter().map(|p| pick(p).samples()).collect();
            let arr = ndarray::concatenate(ndarray::Axis(1), &views)
                .map_err(|e| Error::Shape(format!("cannot concatenate scenes: {e}")))?;
            TimeSignal::new(arr, pick(first).sample_rate())
        };
        if parts.iter().any(|p| p.images.len() != first.images.len()) {
            return Err(Error::Shape("scenes have different source counts".into()));
        }
        let images = (0..first.images.len()).map(|n| join(&|g: &GroundTruth| &g.images[n])).collect::<Result<_>>()?;
        let direct = (0..first.images.len()).map(|n| join(&|g: &GroundTruth| &g.direct[n])).collect::<Result<_>>()?;
        Ok(Self { images, direct, noise: join(&|g| &g.noise)?, mixture: join(&|g| &g.mixture)? })
    }
}

/// Renders a scenario for the given array.
pub fn render_scenario(scn: &Scenario, geom: &ArrayGeometry) -> Result<GroundTruth> {
    scn.validate()?;
    if scn.sources.is_empty() && scn.noise_level_db.is_none() {
        return Err(Error::EmptyScenario);
    }
    let len = scn.samples();
    let fs = scn.sample_rate as f64;
    let m = geom.mics();
    let mut rng = ChaCha8Rng::seed_from_u64(scn.seed);

    let mut images = Vec::with_capacity(scn.sources.len());
    let mut direct = Vec::with_capacity(scn.sources.len());
    for (k, src) in scn.sources.iter().enumerate() {
        let dry = match &src.kind {
            SourceKind::SyntheticSpeech => synthetic_speech(scn.duration_s, scn.seed.wrapping_mul(1_000_003).wrapping_add(k as u64 + 1), scn.sample_rate),
            SourceKind::Corpus(dir) => corpus_speech(dir, len, scn.sample_rate, scn.seed.wrapping_add(k as u64))?,
        };
        let dry = dry.channel(0).to_vec();
        let mut image = propagate(&dry, &geom.delays(src.azimuth_deg), fs);
        let mut path = image.clone();
        if scn.reverb_rt60 > 0.0 {
            let tail_seed: u64 = rng.gen();
            add_reverb_tail(&mut image, scn.reverb_rt60, scn.reverb_drr_db, fs, tail_seed);
        }
        let gain = scale_to_level(&mut image, src.level_db);
        path.mapv_inplace(|v| v * gain);
        images.push(TimeSignal::new(image, scn.sample_rate)?);
        direct.push(TimeSignal::new(path, scn.sample_rate)?);
    }

    let noise = match scn.noise_level_db {
        Some(level) => {
            let mut acc = Array2::<f64>::zeros((m, len));
            let offset: f64 = rng.gen_range(0.0..360.0);
            for d in 0..scn.noise_directions {
                let az = (offset + 360.0 * d as f64 / scn.noise_directions as f64) % 360.0;
                let white: Vec<f64> = (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                acc += &propagate(&white, &geom.delays(az), fs);
            }
            scale_to_level(&mut acc, level);
            acc
        }
        None => Array2::zeros((m, len)),
    };

    let mut mixture = Array2::<f64>::zeros((m, len));
    for img in &images {
        mixture += &img.samples();
    }
    mixture += &noise;
    Ok(GroundTruth { images, direct, noise: TimeSignal::new(noise, scn.sample_rate)?, mixture: TimeSignal::new(mixture, scn.sample_rate)? })
}

/// Scales to the requested reference-channel power and returns the gain.
fn scale_to_level(image: &mut Array2<f64>, level_db: f64) -> f64 {
    let power = image.row(0).iter().map(|v| v * v).sum::<f64>() / image.ncols().max(1) as f64;
    if power > 0.0 {
        let gain = (10f64.powf(level_db / 10.0) / power).sqrt();
        image.mapv_inplace(|v| v * gain);
        gain
    } else {
        1.0
    }
}

/// Delays a mono signal to every microphone with a 32-tap
/// Blackman-windowed sinc interpolator. A common bulk delay keeps every
/// per-microphone delay causal.
fn propagate(dry: &[f64], delays_s: &[f64], fs: f64) -> Array2<f64> {
    let len = dry.len();
    let min_delay = delays_s.iter().copied().fold(f64::INFINITY, f64::min);
    let bulk = SINC_HALF_TAPS as f64 - min_delay * fs;
    let mut out = Array2::zeros((delays_s.len(), len));
    for (m, tau) in delays_s.iter().enumerate() {
        let delay = tau * fs + bulk;
        let whole = delay.floor();
        let frac = delay - whole;
        let whole = whole as i64;
        let taps: Vec<(i64, f64)> = (-SINC_HALF_TAPS + 1..=SINC_HALF_TAPS)
            .map(|j| {
                let x = j as f64 - frac;
                let sinc = if x.abs() < 1e-12 { 1.0 } else { (PI * x).sin() / (PI * x) };
                let w = 0.42 + 0.5 * (PI * x / SINC_HALF_TAPS as f64).cos() + 0.08 * (2.0 * PI * x / SINC_HALF_TAPS as f64).cos();
                (whole + j, sinc * w.max(0.0))
            })
            .collect();
        let mut row = out.row_mut(m);
        for n in 0..len as i64 {
            let mut acc = 0.0;
            for &(shift, h) in &taps {
                let i = n - shift;
                if i >= 0 && (i as usize) < len {
                    acc += h * dry[i as usize];
                }
            }
            row[n as usize] = acc;
        }
    }
    out
}

/// Adds an independent exponentially decaying Gaussian tail per channel,
/// scaled so that tail energy / direct energy = 10^(-drr/10).
fn add_reverb_tail(image: &mut Array2<f64>, rt60: f64, drr_db: f64, fs: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let onset = (0.004 * fs) as usize;
    let tail_len = ((rt60 * fs) as usize).max(onset + 2);
    let decay = 6.91 / (rt60 * fs);
    for m in 0..image.nrows() {
        let mut h: Vec<f64> = (0..tail_len)
            .map(|n| if n < onset { 0.0 } else { rng.sample::<f64, _>(StandardNormal) * (-decay * (n - onset) as f64).exp() })
            .collect();
        let energy: f64 = h.iter().map(|v| v * v).sum();
        let gain = (10f64.powf(-drr_db / 10.0) / energy).sqrt();
        h.iter_mut().for_each(|v| *v *= gain);
        let direct = image.row(m).to_vec();
        let tail = fft_convolve(&direct, &h);
        for (dst, t) in image.row_mut(m).iter_mut().zip(tail) {
            *dst += t;
        }
    }
}

/// Linear convolution truncated to `x.len()`, by FFT overlap-add.
pub fn fft_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return vec![0.0; x.len()];
    }
    let block = h.len().next_power_of_two().max(1024);
    let n = (block + h.len()).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut hf: Vec<Complex<f64>> = h.iter().map(|&v| Complex::new(v, 0.0)).chain(std::iter::repeat(Complex::new(0.0, 0.0))).take(n).collect();
    fwd.process(&mut hf);
    let mut out = vec![0.0; x.len()];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for start in (0..x.len()).step_by(block) {
        let end = (start + block).min(x.len());
        buf.iter_mut().for_each(|b| *b = Complex::new(0.0, 0.0));
        for (b, &v) in buf.iter_mut().zip(&x[start..end]) {
            b.re = v;
        }
        fwd.process(&mut buf);
        for (b, hv) in buf.iter_mut().zip(&hf) {
            *b *= hv;
        }
        inv.process(&mut buf);
        for (i, b) in buf.iter().enumerate() {
            let j = start + i;
            if j >= out.len() {
                break;
            }
            out[j] += b.re / n as f64;
        }
    }
    out
}

fn corpus_speech(dir: &Path, len: usize, sample_rate: u32, seed: u64) -> Result<TimeSignal<f64>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no wav files in corpus directory {}", dir.display())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let path = &files[rng.gen_range(0..files.len())];
        let sig: TimeSignal<f64> = read_wav(path)?;
        if sig.sample_rate() != sample_rate {
            return Err(Error::Config(format!("{} is {} Hz, scenario is {sample_rate} Hz", path.display(), sig.sample_rate())));
        }
        if sig.is_empty() {
            continue;
        }
        out.extend(sig.channel(0).iter().take(len - out.len()));
    }
    TimeSignal::mono(out, sample_rate)
}

/// Speech-like test signal: syllables of amplitude-modulated harmonic
/// complexes with gliding pitch and formant envelopes, separated by pauses.
/// Band-limited to `min(7.5 kHz, 0.47 fs)` and peak-normalized to 0.5.
pub fn synthetic_speech(duration_s: f64, seed: u64, sample_rate: u32) -> TimeSignal<f64> {
    let fs = sample_rate as f64;
    let len = (duration_s * fs).round() as usize;
    let band = 7500f64.min(0.47 * fs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base_f0: f64 = rng.gen_range(95.0..230.0);
    let mut out = vec![0.0; len];
    let mut cursor = (rng.gen_range(0.0..0.25) * fs) as usize;
    while cursor < len {
        let syllables = rng.gen_range(2..7);
        for _ in 0..syllables {
            if cursor >= len {
                break;
            }
            let dur = (rng.gen_range(0.12..0.32) * fs) as usize;
            let gap = (rng.gen_range(0.01..0.06) * fs) as usize;
            render_syllable(&mut out[cursor..(cursor + dur).min(len)], base_f0, band, fs, &mut rng);
            cursor += dur + gap;
        }
        cursor += (rng.gen_range(0.12..0.55) * fs) as usize;
    }
    let peak = out.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    TimeSignal::mono(out, sample_rate).expect("mono signal")
}

fn render_syllable(out: &mut [f64], base_f0: f64, band: f64, fs: f64, rng: &mut ChaCha8Rng) {
    let n = out.len();
    if n < 4 {
        return;
    }
    let formants = [
        (rng.gen_range(300.0..850.0), rng.gen_range(60.0..120.0), 1.0),
        (rng.gen_range(900.0..2300.0), rng.gen_range(80.0..160.0), rng.gen_range(0.3..0.7)),
        (rng.gen_range(2400.0..3300.0), rng.gen_range(120.0..220.0), rng.gen_range(0.1..0.3)),
    ];
    let envelope = |f: f64| -> f64 {
        formants.iter().map(|&(fc, bw, g)| g / (1.0 + ((f - fc) / bw).powi(2))).sum::<f64>() + 0.01
    };
    let f0_start = base_f0 * rng.gen_range(0.85..1.2);
    let f0_end = base_f0 * rng.gen_range(0.8..1.15);
    let vibrato_rate = rng.gen_range(3.0..7.0);
    let loudness = rng.gen_range(0.4..1.0);
    let attack = (0.02 * fs) as usize;
    let release = (0.035 * fs) as usize;
    let max_h = (band / (f0_start.max(f0_end) * 1.05)).floor().max(1.0) as usize;
    let weights: Vec<f64> = (1..=max_h).map(|h| envelope(h as f64 * (f0_start + f0_end) / 2.0)).collect();
    let mut phase = rng.gen_range(0.0..2.0 * PI);
    for (i, slot) in out.iter_mut().enumerate() {
        let t = i as f64 / n as f64;
        let f0 = (f0_start + (f0_end - f0_start) * t) * (1.0 + 0.03 * (2.0 * PI * vibrato_rate * i as f64 / fs).sin());
        phase += 2.0 * PI * f0 / fs;
        // sin(h φ) by the Chebyshev recurrence
        let c2 = 2.0 * phase.cos();
        let (mut prev, mut cur) = (0.0, phase.sin());
        let mut acc = 0.0;
        for w in &weights {
            acc += w * cur;
            let next = c2 * cur - prev;
            prev = cur;
            cur = next;
        }
        let env = if i < attack {
            0.5 - 0.5 * (PI * i as f64 / attack as f64).cos()
        } else if i + release > n {
            0.5 - 0.5 * (PI * (n - i) as f64 / release as f64).cos()
        } else {
            1.0
        };
        *slot += loudness * env * acc;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_source(seed: u64) -> Scenario {
        Scenario {
            sources: vec![SourceSpec::synthetic(0.0, -26.0), SourceSpec::synthetic(90.0, -26.0)],
            duration_s: 2.0,
            seed,
            ..Scenario::default()
        }
    }

    #[test]
    fn empty_scenario_is_an_error() {
        let scn = Scenario::default();
        assert!(matches!(render_scenario(&scn, &ArrayGeometry::headset_arc()), Err(Error::EmptyScenario)));
    }

    #[test]
    fn geometry_validation() {
        assert!(ArrayGeometry::new(vec![[0.0; 3]], 343.0).is_err());
        assert!(ArrayGeometry::new(vec![[0.0; 3], [0.0; 3]], 343.0).is_err());
        assert!(ArrayGeometry::linear(2, 0.1).is_ok());
    }

    #[test]
    fn mixture_is_exact_sum() {
        let mut scn = two_source(4);
        scn.noise_level_db = Some(-40.0);
        scn.reverb_rt60 = 0.2;
        let gt = render_scenario(&scn, &ArrayGeometry::headset_arc()).unwrap();
        let mut sum = gt.images[0].samples().to_owned();
        sum += &gt.images[1].samples();
        sum += &gt.noise.samples();
        assert!(sum.iter().zip(gt.mixture.samples().iter()).all(|(a, b)| a - b == 0.0));
    }

    #[test]
    fn level_calibration() {
        let gt = render_scenario(&two_source(5), &ArrayGeometry::headset_arc()).unwrap();
        for m in 0..5 {
            let p = |n: usize| gt.images[n].channel(m).iter().map(|v| v * v).sum::<f64>();
            let diff_db = 10.0 * (p(0) / p(1)).log10();
            assert!(diff_db.abs() < 0.5, "channel {m}: {diff_db} dB");
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let mut scn = two_source(9);
        scn.noise_level_db = Some(-30.0);
        let g = ArrayGeometry::headset_arc();
        assert_eq!(render_scenario(&scn, &g).unwrap(), render_scenario(&scn, &g).unwrap());
        let other = Scenario { seed: 10, ..scn.clone() };
        assert_ne!(render_scenario(&scn, &g).unwrap().mixture, render_scenario(&other, &g).unwrap().mixture);
    }

    #[test]
    fn synthetic_speech_statistics() {
        let fs = 16_000;
        for seed in 0..4 {
            let s = synthetic_speech(8.0, seed, fs);
            assert_eq!(s, synthetic_speech(8.0, seed, fs));
            let x = s.channel(0);
            let frame = 320;
            let frames = x.len() / frame;
            let active = (0..frames)
                .filter(|&i| {
                    let e = x.slice(ndarray::s![i * frame..(i + 1) * frame]).iter().map(|v| v * v).sum::<f64>() / frame as f64;
                    e.sqrt() >= 0.01
                })
                .count() as f64
                / frames as f64;
            assert!((0.5..=0.9).contains(&active), "seed {seed}: activity {active}");
            // centroid from an independent direct power spectrum over 1024-sample blocks
            let n = 1024;
            let mut num = 0.0;
            let mut den = 0.0;
            for b in 0..(x.len() / n) {
                let blk: Vec<f64> = x.slice(ndarray::s![b * n..(b + 1) * n]).to_vec();
                let spec = fft_power(&blk);
                for (k, p) in spec.iter().enumerate() {
                    let hz = k as f64 * fs as f64 / n as f64;
                    num += hz * p;
                    den += p;
                }
            }
            let centroid = num / den;
            assert!((300.0..=2500.0).contains(&centroid), "seed {seed}: centroid {centroid}");
        }
    }

    fn fft_power(x: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(x.len()).process(&mut buf);
        buf[..x.len() / 2 + 1].iter().map(|z| z.norm_sqr()).collect()
    }

    #[test]
    fn speech_is_band_limited() {
        let s = synthetic_speech(2.0, 3, 16_000);
        let p = fft_power(&s.channel(0).to_vec()[..16384]);
        let hz = |k: usize| k as f64 * 16_000.0 / 16384.0;
        let above: f64 = p.iter().enumerate().filter(|(k, _)| hz(*k) > 7600.0).map(|(_, v)| v).sum();
        let total: f64 = p.iter().sum();
        assert!(above / total < 1e-6);
    }

    #[test]
    fn fft_convolution_matches_direct() {
        let x: Vec<f64> = (0..3000).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect();
        let h: Vec<f64> = (0..300).map(|i| (-(i as f64) / 40.0).exp() * if i % 3 == 0 { 1.0 } else { -0.5 }).collect();
        let fast = fft_convolve(&x, &h);
        for n in (0..3000).step_by(37) {
            let direct: f64 = (0..h.len()).filter(|&k| k <= n).map(|k| h[k] * x[n - k]).sum();
            assert!((fast[n] - direct).abs() < 1e-9);
        }
    }

    #[test]
    fn single_source_mixture_is_its_image() {
        let scn = Scenario { sources: vec![SourceSpec::synthetic(0.0, -20.0)], duration_s: 1.0, ..Scenario::default() };
        let gt = render_scenario(&scn, &ArrayGeometry::headset_arc()).unwrap();
        assert_eq!(gt.mixture, gt.images[0]);
        assert_eq!(gt.direct[0], gt.images[0]);
    }

    #[test]
    fn direct_path_and_tail_follow_drr() {
        let mut scn = two_source(13);
        scn.reverb_rt60 = 0.4;
        scn.reverb_drr_db = 3.0;
        let gt = render_scenario(&scn, &ArrayGeometry::headset_arc()).unwrap();
        for n in 0..2 {
            let d = gt.direct[n].channel(0);
            let tail = &gt.images[n].channel(0) - &d;
            let ratio_db = 10.0 * (d.iter().map(|v| v * v).sum::<f64>() / tail.iter().map(|v| v * v).sum::<f64>()).log10();
            // Truncation at the signal end and cross terms shift the ratio slightly.
            assert!((ratio_db - 3.0).abs() < 1.0, "source {n}: {ratio_db} dB");
        }
    }

    #[test]
    fn scenario_text_round_trip() {
        let mut scn = two_source(12);
        scn.noise_level_db = Some(-33.5);
        scn.reverb_rt60 = 0.25;
        scn.sources.push(SourceSpec { azimuth_deg: 45.0, level_db: -30.0, kind: SourceKind::Corpus("/tmp/c".into()) });
        let geom = ArrayGeometry::linear(3, 0.05).unwrap();
        let text = scn.to_text(Some(&geom));
        let (back, g) = Scenario::parse(&text).unwrap();
        assert_eq!(back, scn);
        assert_eq!(g.unwrap(), geom);
    }

    #[test]
    fn scenario_parse_errors() {
        assert!(Scenario::parse("duplex-scn v2\n").is_err());
        assert!(Scenario::parse("duplex-scn v1\nsource = 400, -20, synthetic\n").is_err());
        assert!(Scenario::parse("duplex-scn v1\nbogus = 1\n").is_err());
        assert!(Scenario::parse("duplex-scn v1\nduration = 0\n").is_err());
        assert!(Scenario::parse("duplex-scn v1\nsource = 10, x, synthetic\n").is_err());
    }

    #[test]
    fn corpus_mode_reads_wavs() {
        let dir = tempfile::tempdir().unwrap();
        let speech = synthetic_speech(0.5, 1, 16_000);
        crate::signal::write_wav(dir.path().join("a.wav"), &speech, crate::signal::WavEncoding::Float32).unwrap();
        let scn = Scenario {
            sources: vec![SourceSpec { azimuth_deg: 30.0, level_db: -25.0, kind: SourceKind::Corpus(dir.path().into()) }],
            duration_s: 1.2,
            ..Scenario::default()
        };
        let gt = render_scenario(&scn, &ArrayGeometry::headset_arc()).unwrap();
        assert_eq!(gt.mixture.len(), 19_200);
    }
}
