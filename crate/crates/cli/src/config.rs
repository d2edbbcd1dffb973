//! Run manifest: a TOML file with one table per stage. Every key has a
//! default; relative paths resolve against the manifest's directory.

use std::path::{Path, PathBuf};

use duplex_core::fastmnmf::FastMnmfConfig;
use duplex_core::gate::GateConfig;
use duplex_core::masknet::MaskNetConfig;
use duplex_core::orchestrator::{PipelineConfig, ScheduleConfig};
use duplex_core::scenario::{ArrayGeometry, Scenario};
use duplex_core::signal::StftConfig;
use duplex_core::wpe::WpeConfig;
use duplex_core::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Scenario of the processed stream (`duplex-scn v1`).
    pub scenario: Option<PathBuf>,
    /// Written by `pretrain`, read by `enhance`, `adapt` and `bench`.
    pub checkpoint: Option<PathBuf>,
    /// Multichannel WAV to enhance instead of rendering the scenario.
    pub input: Option<PathBuf>,
    /// Target direction; defaults to the scenario's first source.
    pub azimuth: Option<f64>,
    pub stft: StftSection,
    pub wpe: WpeSection,
    pub fastmnmf: FastMnmfSection,
    pub gate: GateSection,
    pub schedule: ScheduleSection,
    pub network: NetworkSection,
    pub pretrain: PretrainSection,
    pub stream: StreamSection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenario: None,
            checkpoint: None,
            input: None,
            azimuth: None,
            stft: StftSection::default(),
            wpe: WpeSection::default(),
            fastmnmf: FastMnmfSection::default(),
            gate: GateSection::default(),
            schedule: ScheduleSection::default(),
            network: NetworkSection::default(),
            pretrain: PretrainSection::default(),
            stream: StreamSection::default(),
            bench: BenchSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftSection {
    pub window: usize,
    pub hop: usize,
}

impl Default for StftSection {
    fn default() -> Self {
        Self { window: 1024, hop: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WpeSection {
    pub taps: usize,
    pub delay: usize,
    pub iterations: usize,
}

impl Default for WpeSection {
    fn default() -> Self {
        let d = WpeConfig::default();
        Self { taps: d.taps, delay: d.delay, iterations: d.iterations }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FastMnmfSection {
    pub sources: usize,
    pub components: usize,
    pub iters_freq_invariant: usize,
    pub iters_full: usize,
}

impl Default for FastMnmfSection {
    fn default() -> Self {
        let d = FastMnmfConfig::default();
        Self { sources: d.sources, components: d.components, iters_freq_invariant: d.iters_freq_invariant, iters_full: d.iters_full }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateSection {
    pub threshold: f64,
}

impl Default for GateSection {
    fn default() -> Self {
        Self { threshold: GateConfig::default().threshold }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub finetune_interval_s: f64,
    pub epochs: usize,
    /// Epoch settings compared by `adapt`; empty means just `epochs`.
    pub epoch_arms: Vec<usize>,
    pub pretrain_ratio: f64,
    pub backend_frames: usize,
    pub frontend_frames: usize,
    pub frontend_shift: usize,
    pub window_s: f64,
    pub chunk_frames: usize,
    /// Length of the stream tail summarized by `adapt`.
    pub final_window_s: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let d = ScheduleConfig::default();
        Self {
            finetune_interval_s: d.finetune_interval_s,
            epochs: d.epochs,
            epoch_arms: Vec::new(),
            pretrain_ratio: d.pretrain_ratio,
            backend_frames: d.backend_frames,
            frontend_frames: d.frontend_frames,
            frontend_shift: d.frontend_shift,
            window_s: d.window_s,
            chunk_frames: d.chunk_frames,
            final_window_s: 360.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub embed: usize,
    pub hidden: usize,
    pub depth: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self { embed: 128, hidden: 64, depth: 1, learning_rate: 1e-3, batch_size: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    /// Template of the pre-training condition; defaults to `scenario`.
    /// Target and interferer directions are redrawn for every scene.
    pub scenario: Option<PathBuf>,
    pub scenes: usize,
    pub holdout_scenes: usize,
    pub scene_duration_s: f64,
    pub epochs: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self { scenario: None, scenes: 60, holdout_scenes: 6, scene_duration_s: 30.0, epochs: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSection {
    /// Number of independently seeded segments; 0 renders the scenario once.
    pub segments: usize,
    pub segment_duration_s: f64,
    /// Directions cycled through by the second source, one per segment.
    pub interferer_azimuths: Vec<f64>,
}

impl Default for StreamSection {
    fn default() -> Self {
        Self { segments: 0, segment_duration_s: 60.0, interferer_azimuths: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub methods: Vec<String>,
    /// Maximum number of front-end windows per method; 0 = all.
    pub max_blocks: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self { methods: ["passthrough", "dsbf", "mpdr", "frontend", "fastmnmf"].map(String::from).to_vec(), max_blocks: 0 }
    }
}

impl RunConfig {
    /// Parses a manifest and resolves its relative paths against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        resolve(&mut cfg.scenario);
        resolve(&mut cfg.checkpoint);
        resolve(&mut cfg.input);
        resolve(&mut cfg.pretrain.scenario);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn pipeline(&self) -> Result<PipelineConfig> {
        let cfg = PipelineConfig {
            stft: StftConfig::new(self.stft.window, self.stft.hop)?,
            wpe: WpeConfig { taps: self.wpe.taps, delay: self.wpe.delay, iterations: self.wpe.iterations, ..Default::default() },
            fastmnmf: FastMnmfConfig {
                sources: self.fastmnmf.sources,
                components: self.fastmnmf.components,
                iters_freq_invariant: self.fastmnmf.iters_freq_invariant,
                iters_full: self.fastmnmf.iters_full,
                seed: self.seed,
                ..Default::default()
            },
            gate: GateConfig { threshold: self.gate.threshold, ..Default::default() },
            schedule: ScheduleConfig {
                finetune_interval_s: self.schedule.finetune_interval_s,
                epochs: self.schedule.epochs,
                pretrain_ratio: self.schedule.pretrain_ratio,
                backend_frames: self.schedule.backend_frames,
                frontend_frames: self.schedule.frontend_frames,
                frontend_shift: self.schedule.frontend_shift,
                window_s: self.schedule.window_s,
                chunk_frames: self.schedule.chunk_frames,
                adapt: true,
            },
            learning_rate: self.network.learning_rate,
            batch_size: self.network.batch_size,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn network(&self, channels: usize) -> Result<MaskNetConfig> {
        let cfg = MaskNetConfig {
            freqs: self.stft.window / 2 + 1,
            channels,
            embed: self.network.embed,
            depth: self.network.depth,
            hidden: self.network.hidden,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn epoch_arms(&self) -> Vec<usize> {
        if self.schedule.epoch_arms.is_empty() {
            vec![self.schedule.epochs]
        } else {
            self.schedule.epoch_arms.clone()
        }
    }

    pub fn stream_scenario(&self) -> Result<(Scenario, ArrayGeometry)> {
        let path = self.scenario.as_ref().ok_or_else(|| Error::Config("`scenario` is required".into()))?;
        load_scenario(path)
    }

    pub fn pretrain_scenario(&self) -> Result<(Scenario, ArrayGeometry)> {
        match &self.pretrain.scenario {
            Some(p) => load_scenario(p),
            None => self.stream_scenario(),
        }
    }

    pub fn checkpoint_path(&self) -> Result<&Path> {
        self.checkpoint.as_deref().ok_or_else(|| Error::Config("`checkpoint` is required".into()))
    }
}

/// Reads a scenario file. Files without microphones use the headset arc.
pub fn load_scenario(path: &Path) -> Result<(Scenario, ArrayGeometry)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let (scn, geom) = Scenario::parse(&text)?;
    Ok((scn, geom.unwrap_or_else(ArrayGeometry::headset_arc)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = RunConfig::parse("seed = 4\nscenario = \"a.scn\"\n[schedule]\nepochs = 3\nepoch_arms = [1, 3]\n", Path::new("/tmp/x")).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.scenario.as_deref(), Some(Path::new("/tmp/x/a.scn")));
        assert_eq!(cfg.schedule.epochs, 3);
        assert_eq!(cfg.epoch_arms(), vec![1, 3]);
        assert_eq!(cfg.stft, StftSection::default());
        let p = cfg.pipeline().unwrap();
        assert_eq!(p.schedule.frontend_shift, 8000);
        assert_eq!(p.fastmnmf.seed, 4);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(matches!(RunConfig::parse("sede = 1", Path::new(".")), Err(Error::Config(_))));
        let cfg = RunConfig::parse("[stft]\nwindow = 1000", Path::new(".")).unwrap();
        assert!(matches!(cfg.pipeline(), Err(Error::Config(_))));
        let cfg = RunConfig::parse("[schedule]\nfinetune_interval_s = 0.0", Path::new(".")).unwrap();
        assert!(matches!(cfg.pipeline(), Err(Error::Config(_))));
    }
}
