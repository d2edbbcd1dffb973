//! Dual-process scheduling.
//!
//! The back end cuts the stream into non-overlapping long blocks, runs
//! WPE and FastMNMF on each, gates the separated sources against the
//! target direction and pushes accepted teacher masks into a sliding
//! buffer. On a fixed schedule the trainer fine-tunes a copy of the
//! current front-end network on the buffer mixed with pre-training data
//! and publishes it as a new immutable snapshot. The front end processes
//! short overlapping windows with whatever snapshot is current.
//!
//! All times are stream sample indices. An event at time `τ` is visible to
//! a front-end window ending at `e` iff `τ ≤ e`. Back-end blocks become
//! events at their last sample; fine-tunes are due at multiples of the
//! interval. Ties put back-end blocks first.

use std::collections::VecDeque;
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Instant;

use ndarray::{s, Array2};
use num_complex::Complex;
use rand::{seq::index, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::beamform::{apply_beamformer, mvdr_weights, scms_from_mask, steering_matrix, TfMask};
use crate::fastmnmf::{self, FastMnmfConfig};
use crate::gate::{self, GateConfig};
use crate::masknet::{extract_features, teacher_mask_from_image, Direction, MaskNet, TrainConfig, TrainingSample};
use crate::metrics::si_sdr_slice;
use crate::scenario::ArrayGeometry;
use crate::signal::{istft, stft, MultichannelSpectrogram, StftConfig, TimeSignal};
use crate::wpe::{wpe_block, WpeConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub finetune_interval_s: f64,
    pub epochs: usize,
    /// Pre-training samples per buffer sample in each fine-tuning set.
    pub pretrain_ratio: f64,
    pub backend_frames: usize,
    pub frontend_frames: usize,
    /// Front-end window shift in samples.
    pub frontend_shift: usize,
    /// Span of the adaptation buffer in seconds.
    pub window_s: f64,
    /// Frames per training example cut from a buffer entry.
    pub chunk_frames: usize,
    pub adapt: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            finetune_interval_s: 180.0,
            epochs: 1,
            pretrain_ratio: 1.0,
            backend_frames: 561,
            frontend_frames: 189,
            frontend_shift: 8000,
            window_s: 720.0,
            chunk_frames: 189,
            adapt: true,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self, stft: &StftConfig) -> Result<()> {
        if !(self.finetune_interval_s > 0.0) || !self.finetune_interval_s.is_finite() {
            return Err(Error::Config("fine-tune interval must be positive".into()));
        }
        if !(self.pretrain_ratio >= 0.0) || !self.pretrain_ratio.is_finite() {
            return Err(Error::Config("pre-training ratio must be non-negative".into()));
        }
        if !(self.window_s >= 0.0) {
            return Err(Error::Config("buffer window must be non-negative".into()));
        }
        if self.backend_frames < 2 || self.frontend_frames < 2 || self.chunk_frames == 0 {
            return Err(Error::Config("block sizes must cover at least two frames".into()));
        }
        if self.frontend_shift == 0 || self.frontend_shift > stft.samples_for(self.frontend_frames) {
            return Err(Error::Config(format!(
                "front-end shift {} outside 1..={}",
                self.frontend_shift,
                stft.samples_for(self.frontend_frames)
            )));
        }
        Ok(())
    }
}

/// Everything the pipeline needs besides the network and the data.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub stft: StftConfig,
    pub wpe: WpeConfig,
    pub fastmnmf: FastMnmfConfig,
    pub gate: GateConfig,
    pub schedule: ScheduleConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.wpe.validate()?;
        self.fastmnmf.validate()?;
        self.gate.validate()?;
        self.schedule.validate(&self.stft)?;
        if !(self.learning_rate >= 0.0) || self.batch_size == 0 {
            return Err(Error::Config("learning rate must be non-negative and batch size positive".into()));
        }
        Ok(())
    }
}

/// Validated configuration bound to an array, a sample rate and a target
/// direction, with the steering vectors precomputed.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub geometry: ArrayGeometry,
    pub sample_rate: u32,
    pub azimuth: f64,
    steering: Array2<Complex<f64>>,
    steering32: Array2<Complex<f32>>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, geometry: ArrayGeometry, sample_rate: u32, azimuth: f64) -> Result<Self> {
        config.validate()?;
        if !(0.0..360.0).contains(&azimuth) {
            return Err(Error::Config(format!("azimuth {azimuth} outside [0, 360)")));
        }
        let freqs: Vec<f64> = (0..config.stft.freq_bins()).map(|f| config.stft.bin_hz(f, sample_rate)).collect();
        let steering = steering_matrix::<f64>(&geometry, azimuth, &freqs);
        let steering32 = steering.mapv(|z| Complex::new(z.re as f32, z.im as f32));
        Ok(Self { config, geometry, sample_rate, azimuth, steering, steering32 })
    }

    pub fn steering(&self) -> &Array2<Complex<f64>> {
        &self.steering
    }

    pub fn direction(&self) -> Direction<f32> {
        Direction::from_azimuth(self.azimuth)
    }

    pub fn frontend_len(&self) -> usize {
        self.config.stft.samples_for(self.config.schedule.frontend_frames)
    }

    pub fn backend_len(&self) -> usize {
        self.config.stft.samples_for(self.config.schedule.backend_frames)
    }

    /// `(start, end)` sample ranges of the front-end windows that fit in
    /// `len` samples.
    pub fn frontend_windows(&self, len: usize) -> Vec<(usize, usize)> {
        let (l, shift) = (self.frontend_len(), self.config.schedule.frontend_shift);
        if len < l {
            return Vec::new();
        }
        (0..=(len - l) / shift).map(|j| (j * shift, j * shift + l)).collect()
    }

    /// Back-end blocks: consecutive runs of `backend_frames` frames that
    /// share no frame.
    pub fn backend_blocks(&self, len: usize) -> Vec<(usize, usize)> {
        let stride = self.config.schedule.backend_frames * self.config.stft.hop();
        let l = self.backend_len();
        if len < l {
            return Vec::new();
        }
        (0..=(len - l) / stride).map(|i| (i * stride, i * stride + l)).collect()
    }

    /// Stream samples emitted for a stream of `len` samples.
    pub fn output_len(&self, len: usize) -> usize {
        match self.frontend_windows(len).len() {
            0 => 0,
            k => self.frontend_len() + (k - 1) * self.config.schedule.frontend_shift,
        }
    }

    fn finetune_times(&self, horizon: usize) -> Vec<usize> {
        let s = &self.config.schedule;
        if !s.adapt {
            return Vec::new();
        }
        let step = s.finetune_interval_s * self.sample_rate as f64;
        (1..).map(|k| (k as f64 * step).round() as usize).take_while(|&t| t <= horizon).collect()
    }

    fn window_samples(&self) -> u64 {
        (self.config.schedule.window_s * self.sample_rate as f64).round() as u64
    }
}

/// Network parameters published to the front end. Never mutated.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSnapshot {
    pub net: MaskNet<f32>,
    pub generation: u64,
}

/// Teacher data from one accepted back-end block.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherEntry {
    /// Last sample of the block.
    pub timestamp: u64,
    pub azimuth: f64,
    /// Dereverberated block, `(F, T, M)`.
    pub mixture: MultichannelSpectrogram<f32>,
    /// Separated target image at the reference microphone, `(F, T)`.
    pub image: Array2<Complex<f32>>,
    /// Teacher mask `(F, T)`.
    pub mask: Array2<f32>,
}

/// Outcome of one back-end block. Computing these is the expensive part of
/// a run, so drivers accept them precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendRecord {
    pub index: usize,
    pub start: usize,
    pub end: usize,
    /// Normalized direction responses, one per source.
    pub responses: Vec<f64>,
    /// Reference-channel energy share of each source.
    pub shares: Vec<f64>,
    pub accepted: Option<usize>,
    pub error: Option<String>,
    pub entry: Option<Arc<TeacherEntry>>,
}

/// WPE, FastMNMF, gating and teacher extraction for one block. Failures
/// are recorded, not raised.
pub fn backend_step(pipe: &Pipeline, block: &TimeSignal<f64>, index: usize, start: usize) -> BackendRecord {
    let end = start + block.len();
    let mut record = BackendRecord { index, start, end, responses: Vec::new(), shares: Vec::new(), accepted: None, error: None, entry: None };
    if let Err(e) = run_backend(pipe, block, &mut record) {
        log::warn!("back-end block {index} skipped: {e}");
        record.error = Some(e.to_string());
        record.accepted = None;
        record.entry = None;
    }
    record
}

fn run_backend(pipe: &Pipeline, block: &TimeSignal<f64>, record: &mut BackendRecord) -> Result<()> {
    let cfg = &pipe.config;
    let x = wpe_block(&stft(block, &cfg.stft)?, &cfg.wpe)?.spectrogram;
    let fit = fastmnmf::fit(&x, &cfg.fastmnmf, pipe.steering.view())?;
    let responses = gate::direction_response(&fit.model, pipe.steering.view())?;
    let shares = gate::energy_shares(&x, &fit.model)?;
    record.accepted = gate::gate(&responses, Some(&shares), &cfg.gate);
    record.responses = responses.normalized;
    record.shares = shares;
    if let Some(n) = record.accepted {
        let image = fastmnmf::wiener_separate(&x, &fit.model, n)?.channel_plane(0);
        let reference = x.channel_plane(0);
        let mask = teacher_mask_from_image(image.view(), reference.view())?.into_values();
        let to32 = |z: &Complex<f64>| Complex::new(z.re as f32, z.im as f32);
        record.entry = Some(Arc::new(TeacherEntry {
            timestamp: record.end as u64,
            azimuth: pipe.azimuth,
            mixture: MultichannelSpectrogram::new(x.data().map(to32)),
            image: image.map(to32),
            mask: mask.mapv(|v| v as f32),
        }));
    }
    Ok(())
}

/// Back-end records for every block of a stream.
pub fn backend_records(pipe: &Pipeline, mixture: &TimeSignal<f64>) -> Vec<BackendRecord> {
    pipe.backend_blocks(mixture.len())
        .into_iter()
        .enumerate()
        .map(|(i, (a, b))| backend_step(pipe, &mixture.slice(a, b), i, a))
        .collect()
}

/// Time-ordered teacher entries spanning at most `window` samples.
#[derive(Debug, Clone, Default)]
pub struct AdaptationBuffer {
    window: u64,
    entries: VecDeque<Arc<TeacherEntry>>,
}

impl AdaptationBuffer {
    pub fn new(window: u64) -> Self {
        Self { window, entries: VecDeque::new() }
    }

    /// Appends and evicts from the front while the span exceeds the window.
    /// Returns the number evicted.
    pub fn push(&mut self, entry: Arc<TeacherEntry>) -> Result<usize> {
        if let Some(last) = self.entries.back() {
            if entry.timestamp < last.timestamp {
                return Err(Error::Config(format!("entry at {} precedes buffer end {}", entry.timestamp, last.timestamp)));
            }
        }
        let newest = entry.timestamp;
        self.entries.push_back(entry);
        let mut evicted = 0;
        while newest - self.entries[0].timestamp > self.window {
            self.entries.pop_front();
            evicted += 1;
        }
        Ok(evicted)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn timestamps(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.timestamp).collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = &Arc<TeacherEntry>> {
        self.entries.iter()
    }
}

/// Cuts a spectrogram and its mask into training examples of `chunk`
/// frames. A trailing remainder is dropped unless it is the only chunk.
pub fn training_samples(
    x: &MultichannelSpectrogram<f32>,
    mask: &Array2<f32>,
    steering: &Array2<Complex<f32>>,
    direction: Direction<f32>,
    chunk: usize,
) -> Result<Vec<TrainingSample<f32>>> {
    let t_n = x.frames();
    if mask.dim() != (x.freqs(), t_n) {
        return Err(Error::Shape(format!("mask {:?} vs spectrogram ({}, {t_n})", mask.dim(), x.freqs())));
    }
    let count = (t_n / chunk).max(usize::from(t_n > 0));
    (0..count)
        .map(|k| {
            let (a, b) = (k * chunk, ((k + 1) * chunk).min(t_n));
            Ok(TrainingSample {
                features: extract_features(&x.frame_range(a, b), steering.view())?,
                direction,
                target: mask.slice(s![.., a..b]).to_owned(),
            })
        })
        .collect()
}

/// Training examples with oracle targets: the mask of the known target
/// image within the dereverberated mixture.
pub fn oracle_samples(pipe: &Pipeline, mixture: &TimeSignal<f64>, target_image: &TimeSignal<f64>) -> Result<Vec<TrainingSample<f32>>> {
    let cfg = &pipe.config;
    let x = wpe_block(&stft(mixture, &cfg.stft)?, &cfg.wpe)?.spectrogram;
    let image = stft(&target_image.select_channel(0), &cfg.stft)?.channel_plane(0);
    let mask = teacher_mask_from_image(image.view(), x.channel_plane(0).view())?.into_values();
    let x32 = MultichannelSpectrogram::new(x.data().mapv(|z| Complex::new(z.re as f32, z.im as f32)));
    training_samples(&x32, &mask.mapv(|v| v as f32), &pipe.steering32, pipe.direction(), cfg.schedule.chunk_frames)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneStatus {
    Updated,
    SkippedEmpty,
    Diverged,
}

/// One line of the event log. Carries no wall-clock data so that logs are
/// reproducible.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Backend {
        index: usize,
        start: usize,
        end: usize,
        responses: Vec<f64>,
        shares: Vec<f64>,
        accepted: Option<usize>,
        error: Option<String>,
    },
    Finetune {
        index: usize,
        time: usize,
        status: FinetuneStatus,
        generation: u64,
        buffer_entries: usize,
        dataset_size: usize,
        losses: Vec<f64>,
    },
    Frontend {
        index: usize,
        start: usize,
        end: usize,
        generation: u64,
        passthrough: bool,
        si_sdr: Option<f64>,
        si_sdr_input: Option<f64>,
    },
}

impl Event {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("events serialize")
    }
}

/// Writes events as JSON lines.
pub fn write_event_log<W: std::io::Write>(mut w: W, events: &[Event]) -> Result<()> {
    for e in events {
        writeln!(w, "{}", e.to_json_line())?;
    }
    Ok(())
}

/// Owns the buffer and the current snapshot; runs fine-tunes.
#[derive(Debug, Clone)]
pub struct Trainer {
    buffer: AdaptationBuffer,
    pretrain: Arc<Vec<TrainingSample<f32>>>,
    snapshot: Arc<ParamSnapshot>,
    finetunes: usize,
}

impl Trainer {
    pub fn new(pipe: &Pipeline, initial: MaskNet<f32>, pretrain: Arc<Vec<TrainingSample<f32>>>) -> Self {
        Self {
            buffer: AdaptationBuffer::new(pipe.window_samples()),
            pretrain,
            snapshot: Arc::new(ParamSnapshot { net: initial, generation: 0 }),
            finetunes: 0,
        }
    }

    pub fn snapshot(&self) -> &Arc<ParamSnapshot> {
        &self.snapshot
    }

    pub fn buffer(&self) -> &AdaptationBuffer {
        &self.buffer
    }

    /// Buffers the teacher entry of an accepted block.
    pub fn absorb(&mut self, record: &BackendRecord) -> Result<()> {
        if let (Some(_), Some(entry)) = (record.accepted, &record.entry) {
            self.buffer.push(entry.clone())?;
        }
        Ok(())
    }

    /// Fine-tunes a copy of the current network on the buffer plus a
    /// reseeded draw of pre-training samples. The copy replaces the
    /// snapshot only if training stays finite.
    pub fn finetune(&mut self, pipe: &Pipeline, time: usize) -> Result<Event> {
        let index = self.finetunes;
        self.finetunes += 1;
        let cfg = &pipe.config;
        let buffer_entries = self.buffer.len();
        let event = |status, generation, dataset_size, losses| Event::Finetune {
            index,
            time,
            status,
            generation,
            buffer_entries,
            dataset_size,
            losses,
        };
        if self.buffer.is_empty() {
            return Ok(event(FinetuneStatus::SkippedEmpty, self.snapshot.generation, 0, Vec::new()));
        }
        let mut data = Vec::new();
        for e in self.buffer.entries() {
            let dir = Direction::from_azimuth(e.azimuth);
            data.extend(training_samples(&e.mixture, &e.mask, &pipe.steering32, dir, cfg.schedule.chunk_frames)?);
        }
        let wanted = ((data.len() as f64 * cfg.schedule.pretrain_ratio).round() as usize).min(self.pretrain.len());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2 * index as u64));
        let mut picks = index::sample(&mut rng, self.pretrain.len(), wanted).into_vec();
        picks.sort_unstable();
        data.extend(picks.into_iter().map(|i| self.pretrain[i].clone()));

        let train = TrainConfig {
            learning_rate: cfg.learning_rate,
            batch_size: cfg.batch_size,
            epochs: cfg.schedule.epochs,
            seed: derive_seed(cfg.seed, 2 * index as u64 + 1),
        };
        let mut net = self.snapshot.net.clone();
        match net.train(&data, &train) {
            Ok(losses) => {
                self.snapshot = Arc::new(ParamSnapshot { net, generation: self.snapshot.generation + 1 });
                Ok(event(FinetuneStatus::Updated, self.snapshot.generation, data.len(), losses))
            }
            Err(Error::TrainingDivergence { trace, .. }) => {
                log::warn!("fine-tune {index} diverged; keeping generation {}", self.snapshot.generation);
                Ok(event(FinetuneStatus::Diverged, self.snapshot.generation, data.len(), trace))
            }
            Err(e) => Err(e),
        }
    }
}

fn derive_seed(seed: u64, k: u64) -> u64 {
    seed ^ (k + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Enhanced window and whether the beamformer fell back to passthrough.
#[derive(Debug, Clone, PartialEq)]
pub struct FrontendOutput {
    pub samples: Vec<f64>,
    pub passthrough: bool,
}

/// Dereverberates a window, asks `mask_for` for a speech mask of the
/// dereverberated spectrogram and applies the resulting MVDR beamformer.
/// A degenerate covariance yields the raw reference channel instead.
pub fn beamform_window<F>(pipe: &Pipeline, window: &TimeSignal<f64>, mask_for: F) -> Result<FrontendOutput>
where
    F: FnOnce(&MultichannelSpectrogram<f64>) -> Result<TfMask<f64>>,
{
    let cfg = &pipe.config;
    let x = wpe_block(&stft(window, &cfg.stft)?, &cfg.wpe)?.spectrogram;
    let mask = mask_for(&x)?;
    let (speech, noise) = scms_from_mask(&x, &mask)?;
    let w = match mvdr_weights(&speech, &noise, 0) {
        Ok(w) => w,
        Err(Error::DegenerateScm { freq }) => {
            log::warn!("degenerate covariance at bin {freq}; passing the reference channel through");
            return Ok(FrontendOutput { samples: window.channel(0).to_vec(), passthrough: true });
        }
        Err(e) => return Err(e),
    };
    let y = istft(&apply_beamformer(w.view(), &x)?, &cfg.stft, pipe.sample_rate)?;
    let mut samples = y.channel(0).to_vec();
    samples.resize(window.len(), 0.0);
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("front-end output is not finite".into()));
    }
    Ok(FrontendOutput { samples, passthrough: false })
}

/// The front end proper: masks come from the network.
pub fn frontend_step(pipe: &Pipeline, window: &TimeSignal<f64>, net: &MaskNet<f32>) -> Result<FrontendOutput> {
    beamform_window(pipe, window, |x| {
        let x32 = MultichannelSpectrogram::new(x.data().mapv(|z| Complex::new(z.re as f32, z.im as f32)));
        let features = extract_features(&x32, pipe.steering32.view())?;
        let mask = net.forward(&features, pipe.direction())?;
        TfMask::new(mask.into_values().mapv(f64::from))
    })
}

/// Where back-end results come from during a run.
#[derive(Debug, Clone, Copy)]
pub enum BackendSource<'a> {
    /// No back end: no block events, fine-tunes see an empty buffer.
    Off,
    /// Run the back end on the stream.
    Live,
    /// Reuse records computed earlier for the same stream and pipeline.
    Recorded(&'a [BackendRecord]),
}

/// A stream and, optionally, the target image at the reference
/// microphone for per-block scoring.
#[derive(Debug, Clone, Copy)]
pub struct StreamInput<'a> {
    pub mixture: &'a TimeSignal<f64>,
    pub reference: Option<&'a TimeSignal<f64>>,
}

/// Wall-clock cost of each stage. Kept apart from the event log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Timing {
    pub frontend_s: Vec<f64>,
    pub backend_s: Vec<f64>,
    pub finetune_s: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Stitched mono output, `output_len(input)` samples.
    pub enhanced: TimeSignal<f64>,
    pub events: Vec<Event>,
    pub snapshot: Arc<ParamSnapshot>,
    pub timing: Timing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Work {
    Block(usize),
    Finetune(usize),
}

/// Back-end and fine-tune work in stream order, restricted to `horizon`.
fn schedule(pipe: &Pipeline, len: usize, horizon: usize, source: BackendSource<'_>) -> Vec<(usize, Work)> {
    let blocks = if matches!(source, BackendSource::Off) { Vec::new() } else { pipe.backend_blocks(len) };
    let mut items: Vec<(usize, Work)> = blocks
        .into_iter()
        .enumerate()
        .filter(|&(_, (_, end))| end <= horizon)
        .map(|(i, (_, end))| (end, Work::Block(i)))
        .collect();
    items.extend(pipe.finetune_times(horizon).into_iter().map(|t| (t, Work::Finetune(t))));
    items.sort_by_key(|&(t, w)| (t, matches!(w, Work::Finetune(_))));
    items
}

struct BackendWorker<'a> {
    pipe: &'a Pipeline,
    mixture: &'a TimeSignal<f64>,
    source: BackendSource<'a>,
    trainer: Trainer,
    blocks: Vec<(usize, usize)>,
    timing: Timing,
}

impl BackendWorker<'_> {
    /// Returns the event and the new snapshot, if one was published.
    fn process(&mut self, work: Work) -> Result<(Event, Option<Arc<ParamSnapshot>>)> {
        match work {
            Work::Block(i) => {
                let clock = Instant::now();
                let record = match self.source {
                    BackendSource::Off => unreachable!("no blocks are scheduled without a back end"),
                    BackendSource::Live => {
                        let (a, b) = self.blocks[i];
                        backend_step(self.pipe, &self.mixture.slice(a, b), i, a)
                    }
                    BackendSource::Recorded(records) => records
                        .get(i)
                        .filter(|r| (r.start, r.end) == self.blocks[i])
                        .cloned()
                        .ok_or_else(|| Error::Config(format!("no matching back-end record for block {i}")))?,
                };
                self.timing.backend_s.push(clock.elapsed().as_secs_f64());
                self.trainer.absorb(&record)?;
                let event = Event::Backend {
                    index: record.index,
                    start: record.start,
                    end: record.end,
                    responses: record.responses,
                    shares: record.shares,
                    accepted: record.accepted,
                    error: record.error,
                };
                Ok((event, None))
            }
            Work::Finetune(t) => {
                let clock = Instant::now();
                let before = self.trainer.snapshot.generation;
                let event = self.trainer.finetune(self.pipe, t)?;
                self.timing.finetune_s.push(clock.elapsed().as_secs_f64());
                let published = (self.trainer.snapshot.generation != before).then(|| self.trainer.snapshot.clone());
                Ok((event, published))
            }
        }
    }
}

struct FrontendState<'a> {
    pipe: &'a Pipeline,
    input: StreamInput<'a>,
    windows: Vec<(usize, usize)>,
    out: Vec<f64>,
    events: Vec<Event>,
    timing: Vec<f64>,
}

impl<'a> FrontendState<'a> {
    fn new(pipe: &'a Pipeline, input: StreamInput<'a>) -> Self {
        let windows = pipe.frontend_windows(input.mixture.len());
        Self {
            pipe,
            input,
            windows,
            out: Vec::with_capacity(pipe.output_len(input.mixture.len())),
            events: Vec::new(),
            timing: Vec::new(),
        }
    }

    fn horizon(&self) -> usize {
        self.windows.last().map_or(0, |w| w.1)
    }

    fn run_block(&mut self, j: usize, snapshot: &ParamSnapshot) -> Result<()> {
        let (a, b) = self.windows[j];
        let clock = Instant::now();
        let y = frontend_step(self.pipe, &self.input.mixture.slice(a, b), &snapshot.net)?;
        self.timing.push(clock.elapsed().as_secs_f64());
        let keep = if j == 0 { b - a } else { self.pipe.config.schedule.frontend_shift };
        let emitted = &y.samples[y.samples.len() - keep..];
        let (si_sdr, si_sdr_input) = match self.input.reference {
            Some(r) => {
                let r = &r.channel(0).slice(s![b - keep..b]).to_vec();
                let x = self.input.mixture.channel(0).slice(s![b - keep..b]).to_vec();
                (si_sdr_slice(emitted, r).ok(), si_sdr_slice(&x, r).ok())
            }
            None => (None, None),
        };
        self.out.extend_from_slice(emitted);
        self.events.push(Event::Frontend {
            index: j,
            start: a,
            end: b,
            generation: snapshot.generation,
            passthrough: y.passthrough,
            si_sdr,
            si_sdr_input,
        });
        Ok(())
    }
}

fn check_input(pipe: &Pipeline, input: &StreamInput<'_>) -> Result<()> {
    if input.mixture.channels() != pipe.geometry.mics() {
        return Err(Error::Shape(format!("{} channels for {} microphones", input.mixture.channels(), pipe.geometry.mics())));
    }
    if input.mixture.sample_rate() != pipe.sample_rate {
        return Err(Error::Config(format!("stream is {} Hz, pipeline is {} Hz", input.mixture.sample_rate(), pipe.sample_rate)));
    }
    if let Some(r) = input.reference {
        if r.len() != input.mixture.len() {
            return Err(Error::Length { needed: input.mixture.len(), got: r.len() });
        }
    }
    Ok(())
}

/// Single-threaded run: before each front-end window, every back-end and
/// fine-tune event up to the window's last sample is processed.
pub fn run_replay(
    pipe: &Pipeline,
    input: StreamInput<'_>,
    initial: MaskNet<f32>,
    pretrain: Arc<Vec<TrainingSample<f32>>>,
    source: BackendSource<'_>,
) -> Result<RunOutput> {
    check_input(pipe, &input)?;
    let mut fe = FrontendState::new(pipe, input);
    let items = schedule(pipe, input.mixture.len(), fe.horizon(), source);
    let mut worker = BackendWorker {
        pipe,
        mixture: input.mixture,
        source,
        trainer: Trainer::new(pipe, initial, pretrain),
        blocks: pipe.backend_blocks(input.mixture.len()),
        timing: Timing::default(),
    };
    let mut next = 0;
    for j in 0..fe.windows.len() {
        let end = fe.windows[j].1;
        while next < items.len() && items[next].0 <= end {
            let (event, _) = worker.process(items[next].1)?;
            fe.events.push(event);
            next += 1;
        }
        let snapshot = worker.trainer.snapshot.clone();
        fe.run_block(j, &snapshot)?;
    }
    finish(fe, worker.trainer.snapshot, worker.timing)
}

enum Message {
    /// The back end is about to process work at this stream time.
    Upcoming(usize),
    Done(Box<Event>, Option<Arc<ParamSnapshot>>),
    Failed(Error),
}

/// Two-thread run over a bounded queue. The front end consumes back-end
/// results in order and never runs ahead of work it must observe, so the
/// output and event log equal those of [`run_replay`].
pub fn run_concurrent(
    pipe: &Pipeline,
    input: StreamInput<'_>,
    initial: MaskNet<f32>,
    pretrain: Arc<Vec<TrainingSample<f32>>>,
    source: BackendSource<'_>,
) -> Result<RunOutput> {
    check_input(pipe, &input)?;
    let mut fe = FrontendState::new(pipe, input);
    let items = schedule(pipe, input.mixture.len(), fe.horizon(), source);
    let trainer = Trainer::new(pipe, initial, pretrain);
    let mut snapshot = trainer.snapshot.clone();
    let worker = BackendWorker {
        pipe,
        mixture: input.mixture,
        source,
        trainer,
        blocks: pipe.backend_blocks(input.mixture.len()),
        timing: Timing::default(),
    };
    let (tx, rx) = mpsc::sync_channel::<Message>(4);
    std::thread::scope(|scope| {
        let producer = scope.spawn(move || {
            let mut worker = worker;
            for (time, work) in items {
                if tx.send(Message::Upcoming(time)).is_err() {
                    break;
                }
                let msg = match worker.process(work) {
                    Ok((event, snap)) => Message::Done(Box::new(event), snap),
                    Err(e) => Message::Failed(e),
                };
                let failed = matches!(msg, Message::Failed(_));
                if tx.send(msg).is_err() || failed {
                    break;
                }
            }
            (worker.trainer.snapshot, worker.timing)
        });

        let run = (|| -> Result<()> {
            let mut pending: Option<usize> = None;
            let mut closed = false;
            for j in 0..fe.windows.len() {
                let end = fe.windows[j].1;
                while !closed && pending.map_or(true, |t| t <= end) {
                    match rx.recv() {
                        Ok(Message::Upcoming(t)) => pending = Some(t),
                        Ok(Message::Done(event, snap)) => {
                            fe.events.push(*event);
                            if let Some(s) = snap {
                                snapshot = s;
                            }
                            pending = None;
                        }
                        Ok(Message::Failed(e)) => return Err(e),
                        Err(_) => closed = true,
                    }
                }
                fe.run_block(j, &snapshot)?;
            }
            Ok(())
        })();
        drop(rx);
        let (final_snapshot, timing) = producer.join().map_err(|_| Error::Numerical("back-end thread panicked".into()))?;
        run?;
        finish(fe, final_snapshot, timing)
    })
}

fn finish(fe: FrontendState<'_>, snapshot: Arc<ParamSnapshot>, mut timing: Timing) -> Result<RunOutput> {
    timing.frontend_s = fe.timing;
    Ok(RunOutput { enhanced: TimeSignal::mono(fe.out, fe.pipe.sample_rate)?, events: fe.events, snapshot, timing })
}
