//! Subcommand implementations. Each returns a report and writes its
//! artifacts under the output directory.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use duplex_core::beamform::{apply_beamformer, dsbf, mpdr_weights};
use duplex_core::fastmnmf;
use duplex_core::gate;
use duplex_core::masknet::{MaskNet, TrainConfig, TrainingSample};
use duplex_core::metrics::si_sdr_slice;
use duplex_core::orchestrator::{
    backend_step, frontend_step, oracle_samples, run_replay, write_event_log, BackendSource, Event, Pipeline, RunOutput,
    StreamInput,
};
use duplex_core::scenario::{render_scenario, ArrayGeometry, Scenario};
use duplex_core::signal::{istft, read_wav, stft, write_wav, MultichannelSpectrogram, TimeSignal, WavEncoding};
use duplex_core::wpe::wpe_block;
use duplex_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;

/// A rendered stream reduced to what the commands use.
#[derive(Debug, Clone)]
pub struct StreamTruth {
    pub mixture: TimeSignal<f64>,
    /// Direct-path target at the reference microphone; the scoring reference.
    pub reference: TimeSignal<f64>,
    /// Full (reverberant) target image at the reference microphone.
    pub image: TimeSignal<f64>,
    pub scenario: Scenario,
    pub geometry: ArrayGeometry,
}

impl StreamTruth {
    pub fn target_azimuth(&self, cfg: &RunConfig) -> Result<f64> {
        cfg.azimuth
            .or_else(|| self.scenario.sources.first().map(|s| s.azimuth_deg))
            .ok_or_else(|| Error::Config("no target azimuth: set `azimuth` or add a source".into()))
    }
}

/// Renders the stream scenario, segment by segment when configured, so
/// that only the mixture and the reference-channel target stay in memory.
pub fn render_stream(cfg: &RunConfig) -> Result<StreamTruth> {
    let (scn, geometry) = cfg.stream_scenario()?;
    let segments = if cfg.stream.segments == 0 {
        vec![scn.clone()]
    } else {
        (0..cfg.stream.segments)
            .map(|k| {
                let mut s = scn.clone();
                s.duration_s = cfg.stream.segment_duration_s;
                s.seed = scn.seed.wrapping_add(k as u64);
                if let (Some(src), false) = (s.sources.get_mut(1), cfg.stream.interferer_azimuths.is_empty()) {
                    src.azimuth_deg = cfg.stream.interferer_azimuths[k % cfg.stream.interferer_azimuths.len()];
                }
                s
            })
            .collect()
    };
    let mut mixture = Vec::new();
    let mut reference = Vec::new();
    let mut image = Vec::new();
    for s in &segments {
        let gt = render_scenario(s, &geometry)?;
        mixture.push(gt.mixture);
        match (gt.direct.first(), gt.images.first()) {
            (Some(d), Some(i)) => {
                reference.push(d.select_channel(0));
                image.push(i.select_channel(0));
            }
            _ => {
                let zeros = TimeSignal::zeros(1, s.samples(), s.sample_rate);
                reference.push(zeros.clone());
                image.push(zeros);
            }
        }
    }
    Ok(StreamTruth { mixture: concat(&mixture)?, reference: concat(&reference)?, image: concat(&image)?, scenario: scn, geometry })
}

fn concat(parts: &[TimeSignal<f64>]) -> Result<TimeSignal<f64>> {
    let views: Vec<_> = parts.iter().map(|p| p.samples()).collect();
    let joined = ndarray::concatenate(ndarray::Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))?;
    TimeSignal::new(joined, parts[0].sample_rate())
}

fn create(out: &Path, name: &str) -> Result<BufWriter<File>> {
    std::fs::create_dir_all(out)?;
    Ok(BufWriter::new(File::create(out.join(name))?))
}

fn write_csv<S: Serialize>(out: &Path, name: &str, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(out, name)?);
    for r in rows {
        w.serialize(r).map_err(std::io::Error::from)?;
    }
    w.flush()?;
    Ok(())
}

fn write_events(out: &Path, name: &str, events: &[Event]) -> Result<()> {
    let mut w = create(out, name)?;
    write_event_log(&mut w, events)?;
    w.flush()?;
    Ok(())
}

/// Processor and core count, for the report header.
pub fn hardware_description() -> String {
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| s.lines().find(|l| l.starts_with("model name")).and_then(|l| l.split(':').nth(1)).map(|m| m.trim().to_string()))
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{model}; {cores} logical cores; {}", std::env::consts::OS)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateReport {
    pub samples: usize,
    pub channels: usize,
    pub sample_rate: u32,
    pub mixture_si_sdr: Option<f64>,
}

pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<SimulateReport> {
    let truth = render_stream(cfg)?;
    write_wav(out_path(out, "mixture.wav")?, &truth.mixture, WavEncoding::Float32)?;
    write_wav(out.join("target_direct.wav"), &truth.reference, WavEncoding::Float32)?;
    write_wav(out.join("target_image.wav"), &truth.image, WavEncoding::Float32)?;
    create(out, "scenario.scn")?.write_all(truth.scenario.to_text(Some(&truth.geometry)).as_bytes())?;
    let report = SimulateReport {
        samples: truth.mixture.len(),
        channels: truth.mixture.channels(),
        sample_rate: truth.mixture.sample_rate(),
        mixture_si_sdr: si_sdr_slice(&truth.mixture.channel(0).to_vec(), &truth.reference.channel(0).to_vec()).ok(),
    };
    write_csv(out, "summary.csv", &[report.clone()])?;
    Ok(report)
}

fn out_path(out: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(out)?;
    Ok(out.join(name))
}

/// Training and held-out examples with oracle targets drawn from the
/// pre-training condition. Every scene redraws the target direction
/// uniformly and puts the other sources at least 60° away from it.
pub fn pretraining_corpus(cfg: &RunConfig) -> Result<(Vec<TrainingSample<f32>>, Vec<TrainingSample<f32>>)> {
    let (template, geometry) = cfg.pretrain_scenario()?;
    let pipeline = cfg.pipeline()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_c0_7105);
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for k in 0..cfg.pretrain.scenes + cfg.pretrain.holdout_scenes {
        let target: f64 = rng.gen_range(0.0..360.0);
        let mut scn = template.clone();
        scn.duration_s = cfg.pretrain.scene_duration_s;
        scn.seed = template.seed.wrapping_mul(0x9e37_79b9).wrapping_add(cfg.seed).wrapping_add(k as u64 * 7919);
        for (i, src) in scn.sources.iter_mut().enumerate() {
            src.azimuth_deg = if i == 0 { target } else { (target + rng.gen_range(60.0..300.0)) % 360.0 };
        }
        if scn.sources.is_empty() {
            return Err(Error::Config("pre-training scenario needs a target source".into()));
        }
        let gt = render_scenario(&scn, &geometry)?;
        let pipe = Pipeline::new(pipeline.clone(), geometry.clone(), scn.sample_rate, target)?;
        let samples = oracle_samples(&pipe, &gt.mixture, &gt.direct[0])?;
        if k < cfg.pretrain.scenes {
            train.extend(samples);
        } else {
            holdout.extend(samples);
        }
    }
    Ok((train, holdout))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainReport {
    pub train_samples: usize,
    pub holdout_samples: usize,
    pub final_loss: f64,
    pub holdout_mse: Option<f64>,
    #[serde(skip)]
    pub losses: Vec<f64>,
    #[serde(skip)]
    pub checkpoint: PathBuf,
}

pub fn pretrain(cfg: &RunConfig, out: &Path) -> Result<PretrainReport> {
    let (_, geometry) = cfg.pretrain_scenario()?;
    let (train, holdout) = pretraining_corpus(cfg)?;
    let mut net = MaskNet::<f32>::new(cfg.network(geometry.mics())?, cfg.seed)?;
    let tc = TrainConfig {
        learning_rate: cfg.network.learning_rate,
        batch_size: cfg.network.batch_size,
        epochs: cfg.pretrain.epochs,
        seed: cfg.seed,
    };
    let losses = net.train(&train, &tc)?;
    let holdout_mse = if holdout.is_empty() { None } else { Some(net.evaluate(&holdout)?) };
    let checkpoint = cfg.checkpoint.clone().unwrap_or_else(|| out.join("pretrained.ckpt"));
    if let Some(dir) = checkpoint.parent() {
        std::fs::create_dir_all(dir)?;
    }
    net.write_checkpoint(BufWriter::new(File::create(&checkpoint)?))?;
    #[derive(Serialize)]
    struct LossRow {
        epoch: usize,
        loss: f64,
    }
    let rows: Vec<LossRow> = losses.iter().enumerate().map(|(epoch, &loss)| LossRow { epoch, loss }).collect();
    write_csv(out, "pretrain_losses.csv", &rows)?;
    let report = PretrainReport {
        train_samples: train.len(),
        holdout_samples: holdout.len(),
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        holdout_mse,
        losses,
        checkpoint,
    };
    write_csv(out, "summary.csv", &[report.clone()])?;
    Ok(report)
}

/// Loads the configured checkpoint and checks it against the stream.
pub fn load_network(cfg: &RunConfig, channels: usize) -> Result<MaskNet<f32>> {
    let path = cfg.checkpoint_path()?;
    let file = File::open(path).map_err(|e| Error::Config(format!("cannot open checkpoint {}: {e}", path.display())))?;
    let net = MaskNet::<f32>::read_checkpoint(std::io::BufReader::new(file))?;
    let c = net.config;
    if c.channels != channels || c.freqs != cfg.stft.window / 2 + 1 {
        return Err(Error::Config(format!(
            "checkpoint expects {} channels and {} bins; stream has {channels} channels and {} bins",
            c.channels,
            c.freqs,
            cfg.stft.window / 2 + 1
        )));
    }
    Ok(net)
}

fn block_gains(events: &[Event]) -> Vec<(usize, f64)> {
    events
        .iter()
        .filter_map(|e| match e {
            Event::Frontend { end, si_sdr: Some(a), si_sdr_input: Some(b), .. } => Some((*end, a - b)),
            _ => None,
        })
        .collect()
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnhanceReport {
    pub input_samples: usize,
    pub output_samples: usize,
    pub blocks: usize,
    pub passthrough_blocks: usize,
    pub si_sdr_improvement: Option<f64>,
}

pub fn enhance(cfg: &RunConfig, out: &Path) -> Result<EnhanceReport> {
    let (mixture, reference, azimuth) = match &cfg.input {
        Some(path) => {
            let azimuth = cfg.azimuth.ok_or_else(|| Error::Config("`azimuth` is required with `input`".into()))?;
            (read_wav::<f64>(path)?, None, azimuth)
        }
        None => {
            let truth = render_stream(cfg)?;
            let az = truth.target_azimuth(cfg)?;
            (truth.mixture, Some(truth.reference), az)
        }
    };
    let geometry = match &cfg.scenario {
        Some(_) => cfg.stream_scenario()?.1,
        None => ArrayGeometry::headset_arc(),
    };
    let mut pc = cfg.pipeline()?;
    pc.schedule.adapt = false;
    let pipe = Pipeline::new(pc, geometry, mixture.sample_rate(), azimuth)?;
    let net = load_network(cfg, mixture.channels())?;
    let input = StreamInput { mixture: &mixture, reference: reference.as_ref() };
    let run = run_replay(&pipe, input, net, Arc::new(Vec::new()), BackendSource::Off)?;
    write_wav(out_path(out, "enhanced.wav")?, &run.enhanced, WavEncoding::Float32)?;
    write_events(out, "events.jsonl", &run.events)?;
    let gains = block_gains(&run.events);
    let report = EnhanceReport {
        input_samples: mixture.len(),
        output_samples: run.enhanced.len(),
        blocks: run.timing.frontend_s.len(),
        passthrough_blocks: run.events.iter().filter(|e| matches!(e, Event::Frontend { passthrough: true, .. })).count(),
        si_sdr_improvement: (!gains.is_empty()).then(|| mean(gains.iter().map(|g| g.1))),
    };
    write_csv(out, "summary.csv", &[report.clone()])?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmReport {
    pub name: String,
    /// `None` for the frozen arm.
    pub epochs: Option<usize>,
    /// Mean SI-SDR improvement of the front-end blocks ending in each
    /// fine-tune interval.
    pub curve: Vec<f64>,
    pub final_mean: f64,
    pub overall_mean: f64,
    pub generation: u64,
    pub finetune_s: Vec<f64>,
    pub frontend_mean_s: f64,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptReport {
    pub arms: Vec<ArmReport>,
    pub backend_blocks: usize,
    pub accepted_blocks: usize,
    pub backend_block_s: Vec<f64>,
    pub interval_s: f64,
    pub stream_s: f64,
}

impl AdaptReport {
    pub fn arm(&self, name: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.name == name)
    }
}

fn arm_report(name: String, epochs: Option<usize>, run: RunOutput, interval: usize, final_from: usize) -> ArmReport {
    let gains = block_gains(&run.events);
    let intervals = gains.last().map_or(0, |&(end, _)| (end - 1) / interval + 1);
    let curve = (0..intervals).map(|k| mean(gains.iter().filter(|g| (g.0 - 1) / interval == k).map(|g| g.1))).collect();
    ArmReport {
        name,
        epochs,
        curve,
        final_mean: mean(gains.iter().filter(|g| g.0 > final_from).map(|g| g.1)),
        overall_mean: mean(gains.iter().map(|g| g.1)),
        generation: run.snapshot.generation,
        finetune_s: run.timing.finetune_s,
        frontend_mean_s: mean(run.timing.frontend_s.iter().copied()),
        events: run.events,
    }
}

/// Frozen front end plus one adaptive run per epoch setting, all on the
/// same stream and the same back-end records.
pub fn adapt(cfg: &RunConfig, out: &Path) -> Result<AdaptReport> {
    let truth = render_stream(cfg)?;
    let azimuth = truth.target_azimuth(cfg)?;
    let fs = truth.mixture.sample_rate();
    let net = load_network(cfg, truth.mixture.channels())?;
    let pretrain = Arc::new(pretraining_corpus(cfg)?.0);
    let base = cfg.pipeline()?;
    let pipe = Pipeline::new(base.clone(), truth.geometry.clone(), fs, azimuth)?;

    let mut records = Vec::new();
    let mut backend_block_s = Vec::new();
    for (i, (a, b)) in pipe.backend_blocks(truth.mixture.len()).into_iter().enumerate() {
        let clock = Instant::now();
        records.push(backend_step(&pipe, &truth.mixture.slice(a, b), i, a));
        backend_block_s.push(clock.elapsed().as_secs_f64());
    }

    let input = StreamInput { mixture: &truth.mixture, reference: Some(&truth.reference) };
    let interval = (base.schedule.finetune_interval_s * fs as f64).round() as usize;
    let horizon = pipe.frontend_windows(truth.mixture.len()).last().map_or(0, |w| w.1);
    let final_from = horizon.saturating_sub((cfg.schedule.final_window_s * fs as f64).round() as usize);

    let mut arms = Vec::new();
    let mut variants = vec![("frozen".to_string(), None)];
    variants.extend(cfg.epoch_arms().into_iter().map(|e| (format!("epochs{e}"), Some(e))));
    for (name, epochs) in variants {
        let mut pc = base.clone();
        pc.schedule.adapt = epochs.is_some();
        pc.schedule.epochs = epochs.unwrap_or(pc.schedule.epochs);
        let arm_pipe = Pipeline::new(pc, truth.geometry.clone(), fs, azimuth)?;
        let run = run_replay(&arm_pipe, input, net.clone(), pretrain.clone(), BackendSource::Recorded(&records))?;
        write_events(out, &format!("events_{name}.jsonl"), &run.events)?;
        write_wav(out.join(format!("enhanced_{name}.wav")), &run.enhanced, WavEncoding::Float32)?;
        run.snapshot.net.write_checkpoint(BufWriter::new(File::create(out.join(format!("{name}.ckpt")))?))?;
        log::info!("arm {name} done");
        arms.push(arm_report(name, epochs, run, interval, final_from));
    }

    let report = AdaptReport {
        backend_blocks: records.len(),
        accepted_blocks: records.iter().filter(|r| r.accepted.is_some()).count(),
        backend_block_s,
        interval_s: base.schedule.finetune_interval_s,
        stream_s: truth.mixture.len() as f64 / fs as f64,
        arms,
    };
    write_adapt_reports(out, &report)?;
    Ok(report)
}

fn write_adapt_reports(out: &Path, report: &AdaptReport) -> Result<()> {
    #[derive(Serialize)]
    struct CurveRow<'a> {
        arm: &'a str,
        interval: usize,
        start_s: f64,
        end_s: f64,
        si_sdr_improvement: f64,
    }
    #[derive(Serialize)]
    struct SummaryRow<'a> {
        arm: &'a str,
        epochs: Option<usize>,
        generation: u64,
        overall_si_sdr_improvement: f64,
        final_si_sdr_improvement: f64,
        first_interval: f64,
        last_interval: f64,
        accepted_blocks: usize,
        backend_blocks: usize,
    }
    #[derive(Serialize)]
    struct TimingRow<'a> {
        arm: &'a str,
        frontend_mean_s: f64,
        finetune_mean_s: f64,
        finetune_max_s: f64,
        backend_block_mean_s: f64,
    }
    let mut curve = Vec::new();
    let mut summary = Vec::new();
    let mut timing = Vec::new();
    for arm in &report.arms {
        for (k, &v) in arm.curve.iter().enumerate() {
            curve.push(CurveRow {
                arm: &arm.name,
                interval: k,
                start_s: k as f64 * report.interval_s,
                end_s: (k + 1) as f64 * report.interval_s,
                si_sdr_improvement: v,
            });
        }
        summary.push(SummaryRow {
            arm: &arm.name,
            epochs: arm.epochs,
            generation: arm.generation,
            overall_si_sdr_improvement: arm.overall_mean,
            final_si_sdr_improvement: arm.final_mean,
            first_interval: arm.curve.first().copied().unwrap_or(f64::NAN),
            last_interval: arm.curve.last().copied().unwrap_or(f64::NAN),
            accepted_blocks: report.accepted_blocks,
            backend_blocks: report.backend_blocks,
        });
        timing.push(TimingRow {
            arm: &arm.name,
            frontend_mean_s: arm.frontend_mean_s,
            finetune_mean_s: mean(arm.finetune_s.iter().copied()),
            finetune_max_s: arm.finetune_s.iter().copied().fold(0.0, f64::max),
            backend_block_mean_s: mean(report.backend_block_s.iter().copied()),
        });
    }
    write_csv(out, "curve.csv", &curve)?;
    write_csv(out, "summary.csv", &summary)?;
    write_csv(out, "timing.csv", &timing)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Passthrough,
    Dsbf,
    Mpdr,
    Frontend,
    FastMnmf,
}

impl Method {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "passthrough" => Self::Passthrough,
            "dsbf" => Self::Dsbf,
            "mpdr" => Self::Mpdr,
            "frontend" => Self::Frontend,
            "fastmnmf" => Self::FastMnmf,
            other => return Err(Error::Config(format!("unknown method `{other}`"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Passthrough => "passthrough",
            Self::Dsbf => "dsbf",
            Self::Mpdr => "mpdr",
            Self::Frontend => "frontend",
            Self::FastMnmf => "fastmnmf",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodReport {
    pub method: &'static str,
    pub blocks: usize,
    pub si_sdr_improvement: Option<f64>,
    pub error: Option<String>,
    /// Mean wall-clock compute per block.
    #[serde(skip)]
    pub mean_compute_s: f64,
    /// Compute time per block over the block shift.
    #[serde(skip)]
    pub rtf: f64,
    /// Block shift plus mean compute time.
    #[serde(skip)]
    pub latency_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub hardware: String,
    pub shift_s: f64,
    pub block_s: f64,
    pub methods: Vec<MethodReport>,
}

impl BenchReport {
    pub fn method(&self, m: Method) -> Option<&MethodReport> {
        self.methods.iter().find(|r| r.method == m.name())
    }
}

fn run_method(method: Method, pipe: &Pipeline, window: &TimeSignal<f64>, net: Option<&MaskNet<f32>>) -> Result<Vec<f64>> {
    let cfg = &pipe.config;
    let mono = |y: MultichannelSpectrogram<f64>| -> Result<Vec<f64>> {
        let mut s = istft(&y, &cfg.stft, pipe.sample_rate)?.channel(0).to_vec();
        s.resize(window.len(), 0.0);
        Ok(s)
    };
    match method {
        Method::Passthrough => Ok(window.channel(0).to_vec()),
        Method::Dsbf => mono(dsbf(&stft(window, &cfg.stft)?, pipe.steering().view())?),
        Method::Mpdr => {
            let x = stft(window, &cfg.stft)?;
            let w = mpdr_weights(&x, pipe.steering().view())?;
            mono(apply_beamformer(w.view(), &x)?)
        }
        Method::Frontend => {
            let net = net.ok_or_else(|| Error::Config("the frontend method needs `checkpoint`".into()))?;
            Ok(frontend_step(pipe, window, net)?.samples)
        }
        Method::FastMnmf => {
            let x = wpe_block(&stft(window, &cfg.stft)?, &cfg.wpe)?.spectrogram;
            let fit = fastmnmf::fit(&x, &cfg.fastmnmf, pipe.steering().view())?;
            let resp = gate::direction_response(&fit.model, pipe.steering().view())?;
            let shares = gate::energy_shares(&x, &fit.model)?;
            let n = gate::gate(&resp, Some(&shares), &cfg.gate).unwrap_or_else(|| {
                (0..resp.normalized.len()).min_by(|&a, &b| resp.normalized[a].total_cmp(&resp.normalized[b])).unwrap_or(0)
            });
            mono(MultichannelSpectrogram::from_plane(fastmnmf::wiener_separate(&x, &fit.model, n)?.channel_plane(0)))
        }
    }
}

/// Runs every configured method over the same front-end windows.
pub fn bench(cfg: &RunConfig, out: &Path) -> Result<BenchReport> {
    let methods: Vec<Method> = cfg.bench.methods.iter().map(|m| Method::parse(m)).collect::<Result<_>>()?;
    let truth = render_stream(cfg)?;
    let fs = truth.mixture.sample_rate();
    let pipe = Pipeline::new(cfg.pipeline()?, truth.geometry.clone(), fs, truth.target_azimuth(cfg)?)?;
    let net = if methods.contains(&Method::Frontend) { load_network(cfg, truth.mixture.channels()).ok() } else { None };
    let mut windows = pipe.frontend_windows(truth.mixture.len());
    if cfg.bench.max_blocks > 0 {
        windows.truncate(cfg.bench.max_blocks);
    }
    let shift_s = cfg.schedule.frontend_shift as f64 / fs as f64;
    let mut reports = Vec::new();
    for method in methods {
        let mut gains = Vec::new();
        let mut compute = Vec::new();
        let mut error = None;
        for &(a, b) in &windows {
            let window = truth.mixture.slice(a, b);
            let clock = Instant::now();
            let y = match run_method(method, &pipe, &window, net.as_ref()) {
                Ok(y) => y,
                Err(e) => {
                    log::warn!("{} failed on block {a}..{b}: {e}", method.name());
                    error = Some(e.to_string());
                    break;
                }
            };
            compute.push(clock.elapsed().as_secs_f64());
            let r = truth.reference.channel(0).slice(ndarray::s![a..b]).to_vec();
            let x = window.channel(0).to_vec();
            if let (Ok(o), Ok(i)) = (si_sdr_slice(&y, &r), si_sdr_slice(&x, &r)) {
                gains.push(o - i);
            }
        }
        let mean_compute_s = mean(compute.iter().copied());
        reports.push(MethodReport {
            method: method.name(),
            blocks: compute.len(),
            si_sdr_improvement: (error.is_none() && !gains.is_empty()).then(|| mean(gains.iter().copied())),
            error,
            mean_compute_s,
            rtf: mean_compute_s / shift_s,
            latency_s: shift_s + mean_compute_s,
        });
    }
    let report = BenchReport { hardware: hardware_description(), shift_s, block_s: pipe.frontend_len() as f64 / fs as f64, methods: reports };
    write_csv(out, "summary.csv", &report.methods)?;
    #[derive(Serialize)]
    struct TimingRow<'a> {
        method: &'a str,
        mean_compute_s: f64,
        rtf: f64,
        latency_s: f64,
    }
    let timing: Vec<TimingRow> = report
        .methods
        .iter()
        .map(|m| TimingRow { method: m.method, mean_compute_s: m.mean_compute_s, rtf: m.rtf, latency_s: m.latency_s })
        .collect();
    write_csv(out, "timing.csv", &timing)?;
    writeln!(create(out, "hardware.txt")?, "{}", report.hardware)?;
    Ok(report)
}
