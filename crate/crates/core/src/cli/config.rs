//! Flat `key = value` run configuration with dotted section prefixes.
//!
//! Every command writes its fully resolved configuration next to its outputs
//! so a run can be reproduced from that file alone. The format is plain text
//! for easy diffing: one key per line, `#` comments, sections selected by
//! prefix (`net.`, `train.`, `loss.`, `synth.`, `paths.`, `ablate.`).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::StreakParams;
use crate::error::{Error, Result};
use crate::losses::{ExtractorKind, LossKind, TapLayer};
use crate::network::{self, NetworkConfig};
use crate::training::TrainConfig;
use crate::util::atomic_write;

/// Which ablation table a run produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Loss,
    LambdaP,
    Streams,
    Cascades,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 4] = [
        AblationAxis::Loss,
        AblationAxis::LambdaP,
        AblationAxis::Streams,
        AblationAxis::Cascades,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Loss => "loss",
            AblationAxis::LambdaP => "lambda_p",
            AblationAxis::Streams => "streams",
            AblationAxis::Cascades => "cascades",
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss" => Ok(AblationAxis::Loss),
            "lambda_p" => Ok(AblationAxis::LambdaP),
            "streams" => Ok(AblationAxis::Streams),
            "cascades" => Ok(AblationAxis::Cascades),
            other => Err(Error::Config(format!(
                "unknown ablation axis {other:?} (expected loss, lambda_p, streams, cascades, or all)"
            ))),
        }
    }
}

/// Parse an axis list: `all`, or a comma list like `loss,streams`.
pub fn parse_axes(s: &str) -> Result<Vec<AblationAxis>> {
    if s.trim() == "all" {
        return Ok(AblationAxis::ALL.to_vec());
    }
    s.split(',').map(|p| p.trim().parse()).collect()
}

fn axes_to_string(axes: &[AblationAxis]) -> String {
    if axes == AblationAxis::ALL {
        "all".into()
    } else {
        axes.iter()
            .map(|a| a.name())
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[derive(Debug, Clone)]
pub struct SynthSection {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub streaks: StreakParams,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            count: 8,
            height: 64,
            width: 64,
            streaks: StreakParams::default(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PathsSection {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Everything a run needs: network shape, optimization settings, loss,
/// synthesis parameters, and file locations.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub net: NetworkConfig,
    pub train: TrainConfig,
    pub synth: SynthSection,
    pub paths: PathsSection,
    pub ablate_axes: Vec<AblationAxis>,
    pub paper_scale: bool,
    /// True once any `net.*` key has been applied. Commands that read a
    /// checkpoint adopt its network shape when the user did not pin one.
    pub net_explicit: bool,
}

impl Default for RunConfig {
    /// Desk-scale defaults: a configuration small enough to train on a CPU
    /// in minutes. `configs/paper.cfg` restores the full-scale values.
    fn default() -> Self {
        Self {
            net: network::desk_config(),
            train: TrainConfig {
                batch_size: 4,
                epochs: 10,
                patches_per_image: 4,
                patch_size: 48,
                eval_every_epochs: 2,
                ..TrainConfig::default()
            },
            synth: SynthSection::default(),
            paths: PathsSection::default(),
            ablate_axes: AblationAxis::ALL.to_vec(),
            paper_scale: false,
            net_explicit: false,
        }
    }
}

fn bad(key: &str, value: &str, want: &str) -> Error {
    Error::Config(format!(
        "invalid value {value:?} for config key {key}: expected {want}"
    ))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.trim()
        .parse()
        .map_err(|_| bad(key, v, "a non-negative integer"))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.trim()
        .parse()
        .map_err(|_| bad(key, v, "a non-negative integer"))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.trim().parse().map_err(|_| bad(key, v, "a number"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, v, "true or false")),
    }
}

fn parse_usize_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|p| parse_usize(key, p))
        .collect()
}

/// `a-b,c-d` pair lists, used for shortcut pairs and orientation bands.
fn parse_pair<T: FromStr>(key: &str, v: &str, what: &str) -> Result<(T, T)> {
    let (a, b) = v
        .split_once('-')
        .ok_or_else(|| bad(key, v, what))?;
    let a = a.trim().parse().map_err(|_| bad(key, v, what))?;
    let b = b.trim().parse().map_err(|_| bad(key, v, what))?;
    Ok((a, b))
}

fn parse_usize_pairs(key: &str, v: &str) -> Result<Vec<(usize, usize)>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|p| parse_pair(key, p.trim(), "pairs like 2-4,1-5"))
        .collect()
}

fn parse_f64_bands(key: &str, v: &str) -> Result<Vec<(f64, f64)>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|p| parse_pair(key, p.trim(), "ranges like 75-105"))
        .collect()
}

fn parse_usize_range(key: &str, v: &str) -> Result<(usize, usize)> {
    let (a, b) = v
        .split_once(',')
        .ok_or_else(|| bad(key, v, "a range like 60,120"))?;
    Ok((parse_usize(key, a)?, parse_usize(key, b)?))
}

fn parse_f64_range(key: &str, v: &str) -> Result<(f64, f64)> {
    let (a, b) = v
        .split_once(',')
        .ok_or_else(|| bad(key, v, "a range like 0.25,0.65"))?;
    Ok((parse_f64(key, a)?, parse_f64(key, b)?))
}

fn fmt_usize_list(v: &[usize]) -> String {
    v.iter()
        .map(|n| n.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn fmt_usize_pairs(v: &[(usize, usize)]) -> String {
    v.iter()
        .map(|(a, b)| format!("{a}-{b}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn fmt_f64_bands(v: &[(f64, f64)]) -> String {
    v.iter()
        .map(|(a, b)| format!("{a}-{b}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// Split flat config text into trimmed `(key, value)` pairs.
pub fn parse_flat(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "config line {}: expected `key = value`, got {line:?}",
                i + 1
            ))
        })?;
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

impl RunConfig {
    /// Apply one `key = value` setting.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        if key.starts_with("net.") {
            self.net_explicit = true;
        }
        match key {
            "net.stream_kernels" => self.net.stream_kernels = parse_usize_list(key, value)?,
            "net.cascades_per_stream" => self.net.cascades_per_stream = parse_usize(key, value)?,
            "net.blocks_per_cascade" => self.net.blocks_per_cascade = parse_usize(key, value)?,
            "net.residual_width" => self.net.dprdb.residual_width = parse_usize(key, value)?,
            "net.dense_growth" => self.net.dprdb.dense_growth = parse_usize(key, value)?,
            "net.bottleneck_width" => self.net.dprdb.bottleneck_width = parse_usize(key, value)?,
            "net.spatial_kernel" => self.net.dprdb.spatial_kernel = parse_usize(key, value)?,
            "net.shortcut_pairs" => self.net.shortcut_pairs = parse_usize_pairs(key, value)?,
            "net.input_channels" => self.net.input_channels = parse_usize(key, value)?,
            "net.inject_input_shortcut" => {
                self.net.inject_input_shortcut = parse_bool(key, value)?
            }
            "net.bn_eps" => self.net.bn.eps = parse_f64(key, value)?,
            "net.bn_momentum" => self.net.bn.momentum = parse_f64(key, value)?,
            "train.initial_lr" => self.train.initial_lr = parse_f64(key, value)?,
            "train.decay_factor" => self.train.decay_factor = parse_f64(key, value)?,
            "train.decay_every_epochs" => {
                self.train.decay_every_epochs = parse_usize(key, value)?
            }
            "train.batch_size" => self.train.batch_size = parse_usize(key, value)?,
            "train.epochs" => self.train.epochs = parse_usize(key, value)?,
            "train.patches_per_image" => {
                self.train.patches_per_image = parse_usize(key, value)?
            }
            "train.patch_size" => self.train.patch_size = parse_usize(key, value)?,
            "train.eval_every_epochs" => {
                self.train.eval_every_epochs = parse_usize(key, value)?
            }
            "train.seed" => self.train.seed = parse_u64(key, value)?,
            "loss.kind" => self.train.loss.loss_kind = value.parse::<LossKind>()?,
            "loss.lambda_p" => self.train.loss.lambda_p = parse_f64(key, value)?,
            "loss.ssim_window" => self.train.loss.ssim.window_size = parse_usize(key, value)?,
            "loss.ssim_sigma" => self.train.loss.ssim.window_sigma = parse_f64(key, value)?,
            "loss.ssim_c1" => self.train.loss.ssim.c1 = parse_f64(key, value)?,
            "loss.ssim_c2" => self.train.loss.ssim.c2 = parse_f64(key, value)?,
            "loss.extractor" => {
                self.train.loss.perceptual.extractor_kind = value.parse::<ExtractorKind>()?
            }
            "loss.tap_layer" => {
                self.train.loss.perceptual.tap_layer = value.parse::<TapLayer>()?
            }
            "loss.weights_path" => {
                self.train.loss.perceptual.weights_path = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "synth.count" => self.synth.count = parse_usize(key, value)?,
            "synth.height" => self.synth.height = parse_usize(key, value)?,
            "synth.width" => self.synth.width = parse_usize(key, value)?,
            "synth.streak_count" => self.synth.streaks.streak_count = parse_usize_range(key, value)?,
            "synth.orientation_deg" => {
                self.synth.streaks.orientation_deg = parse_f64_bands(key, value)?
            }
            "synth.length_px" => self.synth.streaks.length_px = parse_f64_range(key, value)?,
            "synth.width_px" => self.synth.streaks.width_px = parse_f64_range(key, value)?,
            "synth.intensity" => self.synth.streaks.intensity = parse_f64_range(key, value)?,
            "synth.seed" => self.synth.streaks.seed = parse_u64(key, value)?,
            "paths.dataset" => self.paths.dataset = Some(PathBuf::from(value)),
            "paths.checkpoint" => self.paths.checkpoint = Some(PathBuf::from(value)),
            "paths.input" => self.paths.input = Some(PathBuf::from(value)),
            "paths.out" => self.paths.out = Some(PathBuf::from(value)),
            "ablate.axes" => self.ablate_axes = parse_axes(value)?,
            "ablate.paper_scale" => self.paper_scale = parse_bool(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (key, value) in parse_flat(text)? {
            self.apply(&key, &value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| {
            Error::Config(format!("{}: {e}", path.display()))
        })
    }

    /// Serialize with a fixed key order so resolved configs diff cleanly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("# resolved mhderain run configuration\n");
        s.push_str(&format!(
            "net.stream_kernels = {}\n",
            fmt_usize_list(&self.net.stream_kernels)
        ));
        s.push_str(&format!(
            "net.cascades_per_stream = {}\n",
            self.net.cascades_per_stream
        ));
        s.push_str(&format!(
            "net.blocks_per_cascade = {}\n",
            self.net.blocks_per_cascade
        ));
        s.push_str(&format!(
            "net.residual_width = {}\n",
            self.net.dprdb.residual_width
        ));
        s.push_str(&format!("net.dense_growth = {}\n", self.net.dprdb.dense_growth));
        s.push_str(&format!(
            "net.bottleneck_width = {}\n",
            self.net.dprdb.bottleneck_width
        ));
        s.push_str(&format!(
            "net.spatial_kernel = {}\n",
            self.net.dprdb.spatial_kernel
        ));
        s.push_str(&format!(
            "net.shortcut_pairs = {}\n",
            fmt_usize_pairs(&self.net.shortcut_pairs)
        ));
        s.push_str(&format!("net.input_channels = {}\n", self.net.input_channels));
        s.push_str(&format!(
            "net.inject_input_shortcut = {}\n",
            self.net.inject_input_shortcut
        ));
        s.push_str(&format!("net.bn_eps = {}\n", self.net.bn.eps));
        s.push_str(&format!("net.bn_momentum = {}\n", self.net.bn.momentum));
        s.push('\n');
        s.push_str(&format!("train.initial_lr = {}\n", self.train.initial_lr));
        s.push_str(&format!("train.decay_factor = {}\n", self.train.decay_factor));
        s.push_str(&format!(
            "train.decay_every_epochs = {}\n",
            self.train.decay_every_epochs
        ));
        s.push_str(&format!("train.batch_size = {}\n", self.train.batch_size));
        s.push_str(&format!("train.epochs = {}\n", self.train.epochs));
        s.push_str(&format!(
            "train.patches_per_image = {}\n",
            self.train.patches_per_image
        ));
        s.push_str(&format!("train.patch_size = {}\n", self.train.patch_size));
        s.push_str(&format!(
            "train.eval_every_epochs = {}\n",
            self.train.eval_every_epochs
        ));
        s.push_str(&format!("train.seed = {}\n", self.train.seed));
        s.push('\n');
        s.push_str(&format!("loss.kind = {}\n", self.train.loss.loss_kind));
        s.push_str(&format!("loss.lambda_p = {}\n", self.train.loss.lambda_p));
        s.push_str(&format!(
            "loss.ssim_window = {}\n",
            self.train.loss.ssim.window_size
        ));
        s.push_str(&format!(
            "loss.ssim_sigma = {}\n",
            self.train.loss.ssim.window_sigma
        ));
        s.push_str(&format!("loss.ssim_c1 = {}\n", self.train.loss.ssim.c1));
        s.push_str(&format!("loss.ssim_c2 = {}\n", self.train.loss.ssim.c2));
        s.push_str(&format!(
            "loss.extractor = {}\n",
            self.train.loss.perceptual.extractor_kind
        ));
        s.push_str(&format!(
            "loss.tap_layer = {}\n",
            self.train.loss.perceptual.tap_layer
        ));
        if let Some(p) = &self.train.loss.perceptual.weights_path {
            s.push_str(&format!("loss.weights_path = {}\n", p.display()));
        }
        s.push('\n');
        s.push_str(&format!("synth.count = {}\n", self.synth.count));
        s.push_str(&format!("synth.height = {}\n", self.synth.height));
        s.push_str(&format!("synth.width = {}\n", self.synth.width));
        s.push_str(&format!(
            "synth.streak_count = {},{}\n",
            self.synth.streaks.streak_count.0, self.synth.streaks.streak_count.1
        ));
        s.push_str(&format!(
            "synth.orientation_deg = {}\n",
            fmt_f64_bands(&self.synth.streaks.orientation_deg)
        ));
        s.push_str(&format!(
            "synth.length_px = {},{}\n",
            self.synth.streaks.length_px.0, self.synth.streaks.length_px.1
        ));
        s.push_str(&format!(
            "synth.width_px = {},{}\n",
            self.synth.streaks.width_px.0, self.synth.streaks.width_px.1
        ));
        s.push_str(&format!(
            "synth.intensity = {},{}\n",
            self.synth.streaks.intensity.0, self.synth.streaks.intensity.1
        ));
        s.push_str(&format!("synth.seed = {}\n", self.synth.streaks.seed));
        s.push('\n');
        if let Some(p) = &self.paths.dataset {
            s.push_str(&format!("paths.dataset = {}\n", p.display()));
        }
        if let Some(p) = &self.paths.checkpoint {
            s.push_str(&format!("paths.checkpoint = {}\n", p.display()));
        }
        if let Some(p) = &self.paths.input {
            s.push_str(&format!("paths.input = {}\n", p.display()));
        }
        if let Some(p) = &self.paths.out {
            s.push_str(&format!("paths.out = {}\n", p.display()));
        }
        s.push('\n');
        s.push_str(&format!("ablate.axes = {}\n", axes_to_string(&self.ablate_axes)));
        s.push_str(&format!("ablate.paper_scale = {}\n", self.paper_scale));
        s
    }

    /// Write the resolved configuration next to a run's outputs.
    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_text().as_bytes())
    }
}
