//! Time/frequency conversion and multichannel WAV I/O.
//!
//! Frames are taken only where a full analysis window fits in the signal;
//! no padding is applied. Block-online callers therefore carry
//! `window_len - hop` samples of overlap from one block into the next.

use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView1, ArrayView2, Axis};
use num_complex::Complex;
use num_traits::Zero;
use rustfft::FftPlanner;

use crate::{Error, Result, Scalar};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Multichannel real-valued waveform, stored as `(channels, samples)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSignal<T: Scalar> {
    samples: Array2<T>,
    sample_rate: u32,
}

impl<T: Scalar> TimeSignal<T> {
    pub fn new(samples: Array2<T>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn from_channels(channels: &[Vec<T>], sample_rate: u32) -> Result<Self> {
        let len = channels.first().map_or(0, Vec::len);
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::Shape("channels have different lengths".into()));
        }
        let samples = Array2::from_shape_fn((channels.len(), len), |(m, n)| channels[m][n]);
        Self::new(samples, sample_rate)
    }

    pub fn mono(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        let len = samples.len();
        Self::new(Array2::from_shape_vec((1, len), samples).expect("mono shape"), sample_rate)
    }

    pub fn zeros(channels: usize, len: usize, sample_rate: u32) -> Self {
        Self { samples: Array2::zeros((channels, len)), sample_rate }
    }

    pub fn channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn samples(&self) -> ArrayView2<'_, T> {
        self.samples.view()
    }

    pub fn samples_mut(&mut self) -> &mut Array2<T> {
        &mut self.samples
    }

    pub fn into_samples(self) -> Array2<T> {
        self.samples
    }

    pub fn channel(&self, m: usize) -> ArrayView1<'_, T> {
        self.samples.row(m)
    }

    /// Sample range `[start, end)` of every channel.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self { samples: self.samples.slice(s![.., start..end]).to_owned(), sample_rate: self.sample_rate }
    }

    /// Single-channel signal holding channel `m`.
    pub fn select_channel(&self, m: usize) -> Self {
        Self { samples: self.samples.slice(s![m..m + 1, ..]).to_owned(), sample_rate: self.sample_rate }
    }

    pub fn cast<U: Scalar>(&self) -> TimeSignal<U> {
        TimeSignal { samples: self.samples.mapv(|x| U::lit(x.as_f64())), sample_rate: self.sample_rate }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    window_len: usize,
    hop: usize,
    window: Window,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { window_len: 1024, hop: 256, window: Window::Hann }
    }
}

impl StftConfig {
    pub fn new(window_len: usize, hop: usize) -> Result<Self> {
        if !window_len.is_power_of_two() || window_len < 2 {
            return Err(Error::Config(format!("window length {window_len} is not a power of two")));
        }
        if hop == 0 || hop > window_len {
            return Err(Error::Config(format!("hop {hop} must be in 1..={window_len}")));
        }
        Ok(Self { window_len, hop, window: Window::Hann })
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn window_kind(&self) -> Window {
        self.window
    }

    /// Number of one-sided frequency bins, `window_len / 2 + 1`.
    pub fn freq_bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    /// Frames produced for a signal of `len` samples (0 if shorter than a window).
    pub fn frames_for(&self, len: usize) -> usize {
        if len < self.window_len {
            0
        } else {
            (len - self.window_len) / self.hop + 1
        }
    }

    /// Samples spanned by `frames` consecutive frames.
    pub fn samples_for(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.window_len
        }
    }

    /// Periodic Hann window.
    pub fn window<T: Scalar>(&self) -> Vec<T> {
        let n = self.window_len as f64;
        (0..self.window_len)
            .map(|i| T::lit(0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n).cos()))
            .collect()
    }

    /// Center frequency of bin `f` in Hz.
    pub fn bin_hz(&self, f: usize, sample_rate: u32) -> f64 {
        f as f64 * sample_rate as f64 / self.window_len as f64
    }
}

/// Complex STFT tensor indexed `(f, t, m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelSpectrogram<T: Scalar> {
    data: Array3<Complex<T>>,
}

impl<T: Scalar> MultichannelSpectrogram<T> {
    pub fn new(data: Array3<Complex<T>>) -> Self {
        Self { data }
    }

    pub fn zeros(freqs: usize, frames: usize, channels: usize) -> Self {
        Self { data: Array3::zeros((freqs, frames, channels)) }
    }

    pub fn freqs(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn data(&self) -> &Array3<Complex<T>> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<Complex<T>> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<Complex<T>> {
        self.data
    }

    /// `(T, M)` view of frequency bin `f`.
    pub fn bin(&self, f: usize) -> ArrayView2<'_, Complex<T>> {
        self.data.index_axis(Axis(0), f)
    }

    /// `(F, T)` single-channel plane for microphone `m`.
    pub fn channel_plane(&self, m: usize) -> Array2<Complex<T>> {
        self.data.index_axis(Axis(2), m).to_owned()
    }

    /// Builds a single-channel spectrogram from an `(F, T)` plane.
    pub fn from_plane(plane: Array2<Complex<T>>) -> Self {
        let (f, t) = plane.dim();
        Self { data: plane.into_shape_with_order((f, t, 1)).expect("plane reshape") }
    }

    /// Frames `[start, end)`.
    pub fn frame_range(&self, start: usize, end: usize) -> Self {
        Self { data: self.data.slice(s![.., start..end, ..]).to_owned() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

/// Short-time Fourier transform of every channel.
pub fn stft<T: Scalar>(signal: &TimeSignal<T>, cfg: &StftConfig) -> Result<MultichannelSpectrogram<T>> {
    let n = cfg.window_len();
    if signal.len() < n {
        return Err(Error::Length { needed: n, got: signal.len() });
    }
    let frames = cfg.frames_for(signal.len());
    let bins = cfg.freq_bins();
    let channels = signal.channels();
    let window = cfg.window::<T>();
    let fft = FftPlanner::<T>::new().plan_fft_forward(n);
    let mut buf = vec![Complex::zero(); n];
    let mut scratch = vec![Complex::zero(); fft.get_inplace_scratch_len()];
    let mut out = Array3::zeros((bins, frames, channels));
    for m in 0..channels {
        let x = signal.channel(m);
        for t in 0..frames {
            let start = t * cfg.hop();
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(x[start + i] * window[i], T::zero());
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            for f in 0..bins {
                out[[f, t, m]] = buf[f];
            }
        }
    }
    Ok(MultichannelSpectrogram::new(out))
}

/// Inverse STFT by weighted overlap-add, normalized by the summed squared
/// window. Output length is `(T - 1) * hop + window_len`.
pub fn istft<T: Scalar>(spectrogram: &MultichannelSpectrogram<T>, cfg: &StftConfig, sample_rate: u32) -> Result<TimeSignal<T>> {
    let n = cfg.window_len();
    if spectrogram.freqs() != cfg.freq_bins() {
        return Err(Error::Shape(format!(
            "spectrogram has {} bins, config expects {}",
            spectrogram.freqs(),
            cfg.freq_bins()
        )));
    }
    let frames = spectrogram.frames();
    let channels = spectrogram.channels();
    let len = cfg.samples_for(frames);
    let window = cfg.window::<T>();
    let mut norm = vec![T::zero(); len];
    for t in 0..frames {
        for (i, w) in window.iter().enumerate() {
            norm[t * cfg.hop() + i] += *w * *w;
        }
    }
    let ifft = FftPlanner::<T>::new().plan_fft_inverse(n);
    let mut buf = vec![Complex::zero(); n];
    let mut scratch = vec![Complex::zero(); ifft.get_inplace_scratch_len()];
    let scale = T::one() / T::lit(n as f64);
    let mut out = Array2::zeros((channels, len));
    let bins = spectrogram.freqs();
    for m in 0..channels {
        for t in 0..frames {
            for f in 0..bins {
                buf[f] = spectrogram.data[[f, t, m]];
            }
            // Real signals: enforce a real DC/Nyquist and conjugate symmetry.
            buf[0].im = T::zero();
            buf[n / 2].im = T::zero();
            for f in 1..n / 2 {
                buf[n - f] = buf[f].conj();
            }
            ifft.process_with_scratch(&mut buf, &mut scratch);
            let start = t * cfg.hop();
            for i in 0..n {
                out[[m, start + i]] += buf[i].re * scale * window[i];
            }
        }
        // Near the outer edges the summed window tends to zero; clamping it
        // keeps modified spectrograms from being amplified there.
        let floor = norm.iter().fold(T::zero(), |a, &b| a.max(b)) * T::lit(1e-3);
        for (i, w2) in norm.iter().enumerate() {
            out[[m, i]] = if *w2 > T::zero() { out[[m, i]] / w2.max(floor) } else { T::zero() };
        }
    }
    TimeSignal::new(out, sample_rate)
}

/// Windowed time-domain frame energy and its one-sided spectral energy
/// for frame `t` of channel `m`. Both are equal for a correct transform.
pub fn frame_energies<T: Scalar>(signal: &TimeSignal<T>, spectrogram: &MultichannelSpectrogram<T>, cfg: &StftConfig, t: usize, m: usize) -> (T, T) {
    let n = cfg.window_len();
    let window = cfg.window::<T>();
    let x = signal.channel(m);
    let time: T = (0..n).map(|i| {
        let v = x[t * cfg.hop() + i] * window[i];
        v * v
    }).sum();
    let bins = cfg.freq_bins();
    let mut freq = T::zero();
    for f in 0..bins {
        let e = spectrogram.data[[f, t, m]].norm_sqr();
        freq += if f == 0 || f == bins - 1 { e } else { e + e };
    }
    (time, freq / T::lit(n as f64))
}

/// Sample encodings supported for WAV output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

/// Reads a RIFF/WAVE file (PCM16 or float32, any channel count).
/// PCM16 is normalized by 32768 so that -32768 maps to -1.0.
pub fn read_wav<T: Scalar>(path: impl AsRef<Path>) -> Result<TimeSignal<T>> {
    let mut reader = hound::WavReader::open(path)?;
    let header = reader.spec();
    let channels = header.channels as usize;
    if channels == 0 {
        return Err(Error::Format("wav header declares zero channels".into()));
    }
    let interleaved: Vec<T> = match (header.sample_format, header.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| T::lit(v as f64 / 32768.0)))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| T::lit(v as f64)))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::UnsupportedFormat(format!("{fmt:?} with {bits} bits per sample")));
        }
    };
    let len = interleaved.len() / channels;
    let samples = Array2::from_shape_fn((channels, len), |(m, n)| interleaved[n * channels + m]);
    TimeSignal::new(samples, header.sample_rate)
}

pub fn write_wav<T: Scalar>(path: impl AsRef<Path>, signal: &TimeSignal<T>, encoding: WavEncoding) -> Result<()> {
    let (bits, format) = match encoding {
        WavEncoding::Pcm16 => (16, hound::SampleFormat::Int),
        WavEncoding::Float32 => (32, hound::SampleFormat::Float),
    };
    let header = hound::WavSpec {
        channels: signal.channels() as u16,
        sample_rate: signal.sample_rate(),
        bits_per_sample: bits,
        sample_format: format,
    };
    let mut writer = hound::WavWriter::create(path, header)?;
    for n in 0..signal.len() {
        for m in 0..signal.channels() {
            let v = signal.samples[[m, n]].as_f64();
            match encoding {
                WavEncoding::Pcm16 => {
                    let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(q)?;
                }
                WavEncoding::Float32 => writer.write_sample(v as f32)?,
            }
        }
    }
    writer.finalize()?;
    Ok(())
}

/// Relative L2 error `||a - b|| / ||b||` over the sample range `[start, end)`
/// of every channel.
pub fn relative_error<T: Scalar>(a: &TimeSignal<T>, b: &TimeSignal<T>, start: usize, end: usize) -> T {
    let mut num = T::zero();
    let mut den = T::zero();
    for m in 0..a.channels() {
        for n in start..end {
            let d = a.samples[[m, n]] - b.samples[[m, n]];
            num += d * d;
            den += b.samples[[m, n]] * b.samples[[m, n]];
        }
    }
    if den == T::zero() {
        return num.sqrt();
    }
    (num / den).sqrt()
}
