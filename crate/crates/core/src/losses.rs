//! Training losses and evaluation metrics.
//!
//! The SSIM score is computed under a sliding Gaussian window (default 11x11,
//! sigma 1.5) per channel, valid positions only, and the same graph code backs
//! both the training loss and the reported metric so the two never drift
//! apart. The perceptual term compares feature maps from a frozen VGG-16-style
//! extractor; the extractor either loads pretrained weights from a container
//! file or draws a fixed-seed random set, so test runs stay hermetic.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array1, Array4};
use serde::{Deserialize, Serialize};

use crate::elem::{c, Elem};
use crate::error::{Error, Result};
use crate::nn::{Graph, Var};
use crate::util::DeterministicRng;

/// Windowed SSIM settings. Constants follow the usual `(K*L)^2` form with
/// data range `L = 1`: `c1 = 0.01^2`, `c2 = 0.03^2`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SsimParams {
    pub window_size: usize,
    pub window_sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window_size: 11,
            window_sigma: 1.5,
            c1: 1e-4,
            c2: 9e-4,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.window_size % 2 == 0 {
            return Err(Error::Config(format!(
                "ssim window size must be odd, got {}",
                self.window_size
            )));
        }
        if !(self.window_sigma > 0.0) {
            return Err(Error::Config(format!(
                "ssim window sigma must be positive, got {}",
                self.window_sigma
            )));
        }
        if !(self.c1 > 0.0) || !(self.c2 > 0.0) {
            return Err(Error::Config(format!(
                "ssim constants must be positive, got c1={} c2={}",
                self.c1, self.c2
            )));
        }
        Ok(())
    }
}

/// Normalized Gaussian window replicated per channel, shaped `(c, 1, k, k)`
/// for a depthwise convolution.
fn gaussian_window<T: Elem>(channels: usize, size: usize, sigma: f64) -> Array4<T> {
    let center = (size as f64 - 1.0) / 2.0;
    let mut plane = vec![0.0f64; size * size];
    let mut total = 0.0;
    for i in 0..size {
        for j in 0..size {
            let di = i as f64 - center;
            let dj = j as f64 - center;
            let v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            plane[i * size + j] = v;
            total += v;
        }
    }
    let mut win = Array4::<T>::zeros((channels, 1, size, size));
    for ch in 0..channels {
        for i in 0..size {
            for j in 0..size {
                win[[ch, 0, i, j]] = c::<T>(plane[i * size + j] / total);
            }
        }
    }
    win
}

/// Mean SSIM between `x` and `y` as a differentiable scalar node.
///
/// Local means, variances, and covariance are gathered with a depthwise
/// Gaussian convolution over valid window positions, the per-location score
/// is `((2*mu_x*mu_y + c1)(2*cov + c2)) / ((mu_x^2 + mu_y^2 + c1)(var_x +
/// var_y + c2))`, and the result is the mean over every location and channel.
pub fn ssim_var<T: Elem>(g: &mut Graph<'_, T>, x: Var, y: Var, p: &SsimParams) -> Result<Var> {
    p.validate()?;
    let xd = g.value(x).dim();
    let yd = g.value(y).dim();
    if xd != yd {
        return Err(Error::Shape(format!(
            "ssim inputs differ in shape: {xd:?} vs {yd:?}"
        )));
    }
    let (_, cdim, h, w) = xd;
    let k = p.window_size;
    if h < k || w < k {
        return Err(Error::Shape(format!(
            "image {h}x{w} is smaller than the {k}x{k} ssim window"
        )));
    }

    let win = g.constant(gaussian_window::<T>(cdim, k, p.window_sigma));
    let mu_x = g.conv2d(x, win, None, 0, cdim)?;
    let mu_y = g.conv2d(y, win, None, 0, cdim)?;

    let xx = g.mul(x, x)?;
    let yy = g.mul(y, y)?;
    let xy = g.mul(x, y)?;
    let e_xx = g.conv2d(xx, win, None, 0, cdim)?;
    let e_yy = g.conv2d(yy, win, None, 0, cdim)?;
    let e_xy = g.conv2d(xy, win, None, 0, cdim)?;

    let mu_xx = g.mul(mu_x, mu_x)?;
    let mu_yy = g.mul(mu_y, mu_y)?;
    let mu_xy = g.mul(mu_x, mu_y)?;
    let var_x = g.sub(e_xx, mu_xx)?;
    let var_y = g.sub(e_yy, mu_yy)?;
    let cov = g.sub(e_xy, mu_xy)?;

    let n1 = {
        let t = g.mul_scalar(mu_xy, 2.0);
        g.add_scalar(t, p.c1)
    };
    let n2 = {
        let t = g.mul_scalar(cov, 2.0);
        g.add_scalar(t, p.c2)
    };
    let d1 = {
        let t = g.add(mu_xx, mu_yy)?;
        g.add_scalar(t, p.c1)
    };
    let d2 = {
        let t = g.add(var_x, var_y)?;
        g.add_scalar(t, p.c2)
    };
    let num = g.mul(n1, n2)?;
    let den = g.mul(d1, d2)?;
    let map = g.div(num, den)?;
    Ok(g.mean_all(map))
}

/// Negated SSIM; minimized at perfect reconstruction where it reaches -1.
pub fn ssim_loss_var<T: Elem>(
    g: &mut Graph<'_, T>,
    predicted: Var,
    target: Var,
    p: &SsimParams,
) -> Result<Var> {
    let s = ssim_var(g, predicted, target, p)?;
    Ok(g.mul_scalar(s, -1.0))
}

/// Mean squared error over every element.
pub fn mse_var<T: Elem>(g: &mut Graph<'_, T>, predicted: Var, target: Var) -> Result<Var> {
    let d = g.sub(predicted, target)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean_all(sq))
}

/// SSIM as an f64 metric. Inputs are promoted to f64 so the reported value
/// does not depend on the training precision.
pub fn ssim_value<T: Elem>(x: &Array4<T>, y: &Array4<T>, p: &SsimParams) -> Result<f64> {
    let store = crate::nn::ParamStore::<f64>::new();
    let mut g = Graph::new(&store, crate::nn::Mode::Eval);
    let xv = g.constant(x.mapv(|v| v.to_f64()));
    let yv = g.constant(y.mapv(|v| v.to_f64()));
    let s = ssim_var(&mut g, xv, yv, p)?;
    Ok(g.scalar(s))
}

/// Peak signal-to-noise ratio in decibels for a data range of 1, computed at
/// f64 and capped at 100 dB (the cap also covers identical images).
pub fn psnr_value<T: Elem>(x: &Array4<T>, y: &Array4<T>) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::Shape(format!(
            "psnr inputs differ in shape: {:?} vs {:?}",
            x.dim(),
            y.dim()
        )));
    }
    let n = x.len() as f64;
    let mut sum = 0.0f64;
    for (&a, &b) in x.iter().zip(y.iter()) {
        let d = a.to_f64() - b.to_f64();
        sum += d * d;
    }
    let mse = sum / n;
    if mse == 0.0 {
        return Ok(100.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(100.0))
}

/// Which objective the trainer optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "mse")]
    Mse,
    #[serde(rename = "ssim")]
    Ssim,
    #[serde(rename = "mse+perceptual")]
    MsePerceptual,
    #[serde(rename = "ssim+perceptual")]
    SsimPerceptual,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Mse,
        LossKind::Ssim,
        LossKind::MsePerceptual,
        LossKind::SsimPerceptual,
    ];

    pub fn uses_perceptual(self) -> bool {
        matches!(self, LossKind::MsePerceptual | LossKind::SsimPerceptual)
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Ssim => "ssim",
            LossKind::MsePerceptual => "mse+perceptual",
            LossKind::SsimPerceptual => "ssim+perceptual",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown loss kind {s:?}; expected one of mse, ssim, mse+perceptual, ssim+perceptual"
                ))
            })
    }
}

/// Source of the feature extractor's parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExtractorKind {
    /// Weights loaded from a local container file; the path is required and
    /// inputs are renormalized with the classifier's training statistics.
    #[serde(rename = "pretrained-classifier-features")]
    PretrainedClassifierFeatures,
    /// He-initialized weights from a fixed internal seed; no file, no
    /// normalization, fully reproducible.
    #[serde(rename = "fixed-random-features")]
    FixedRandomFeatures,
}

impl ExtractorKind {
    pub fn name(self) -> &'static str {
        match self {
            ExtractorKind::PretrainedClassifierFeatures => "pretrained-classifier-features",
            ExtractorKind::FixedRandomFeatures => "fixed-random-features",
        }
    }
}

impl fmt::Display for ExtractorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExtractorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrained-classifier-features" => Ok(ExtractorKind::PretrainedClassifierFeatures),
            "fixed-random-features" => Ok(ExtractorKind::FixedRandomFeatures),
            _ => Err(Error::Config(format!(
                "unknown extractor kind {s:?}; expected pretrained-classifier-features or fixed-random-features"
            ))),
        }
    }
}

/// Feature tap inside the extractor: after the second activation of stage 1
/// or stage 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TapLayer {
    #[serde(rename = "relu1_2")]
    Relu1_2,
    #[serde(rename = "relu2_2")]
    Relu2_2,
}

impl TapLayer {
    pub fn name(self) -> &'static str {
        match self {
            TapLayer::Relu1_2 => "relu1_2",
            TapLayer::Relu2_2 => "relu2_2",
        }
    }
}

impl fmt::Display for TapLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TapLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu1_2" => Ok(TapLayer::Relu1_2),
            "relu2_2" => Ok(TapLayer::Relu2_2),
            _ => Err(Error::Config(format!(
                "unknown tap layer {s:?}; expected relu1_2 or relu2_2"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptualConfig {
    pub extractor_kind: ExtractorKind,
    pub tap_layer: TapLayer,
    pub weights_path: Option<PathBuf>,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self {
            extractor_kind: ExtractorKind::FixedRandomFeatures,
            tap_layer: TapLayer::Relu2_2,
            weights_path: None,
        }
    }
}

impl PerceptualConfig {
    pub fn validate(&self) -> Result<()> {
        if self.extractor_kind == ExtractorKind::PretrainedClassifierFeatures
            && self.weights_path.is_none()
        {
            return Err(Error::Config(
                "pretrained-classifier-features requires perceptual.weights_path".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub loss_kind: LossKind,
    pub lambda_p: f64,
    pub ssim: SsimParams,
    pub perceptual: PerceptualConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            loss_kind: LossKind::SsimPerceptual,
            lambda_p: 1.0,
            ssim: SsimParams::default(),
            perceptual: PerceptualConfig::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_p >= 0.0 && self.lambda_p.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_p must be finite and nonnegative, got {}",
                self.lambda_p
            )));
        }
        self.ssim.validate()?;
        self.perceptual.validate()
    }
}

const CONTAINER_MAGIC: &[u8; 8] = b"MHDNFEAT";
const CONTAINER_VERSION: u32 = 1;

/// Extractor tensor names expected in a weights container, with their shapes
/// (biases are stored as `(1, c, 1, 1)`).
const EXTRACTOR_TENSORS: [(&str, (usize, usize, usize, usize)); 8] = [
    ("conv1_1.weight", (64, 3, 3, 3)),
    ("conv1_1.bias", (1, 64, 1, 1)),
    ("conv1_2.weight", (64, 64, 3, 3)),
    ("conv1_2.bias", (1, 64, 1, 1)),
    ("conv2_1.weight", (128, 64, 3, 3)),
    ("conv2_1.bias", (1, 128, 1, 1)),
    ("conv2_2.weight", (128, 128, 3, 3)),
    ("conv2_2.bias", (1, 128, 1, 1)),
];

/// Per-channel input statistics of the pretrained classifier (RGB mean and
/// standard deviation over its training corpus).
const CLASSIFIER_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const CLASSIFIER_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Seed for the fixed-random extractor; never configurable, so every build
/// produces the same features.
const RANDOM_EXTRACTOR_SEED: u64 = 0xFEA7_0001;

/// Write named f32 tensors to the binary weights container.
///
/// Layout, all integers little-endian: magic `MHDNFEAT`, format version u32,
/// tensor count u32, then per tensor a u32 name length, the UTF-8 name, four
/// u32 dims `(n, c, h, w)`, and `n*c*h*w` f32 values in row-major order.
pub fn write_weight_container(path: &Path, entries: &[(String, Array4<f32>)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let put = |out: &mut BufWriter<File>, bytes: &[u8]| -> Result<()> {
        out.write_all(bytes).map_err(|e| Error::io(path, e))
    };
    put(&mut out, CONTAINER_MAGIC)?;
    put(&mut out, &CONTAINER_VERSION.to_le_bytes())?;
    put(&mut out, &(entries.len() as u32).to_le_bytes())?;
    for (name, tensor) in entries {
        put(&mut out, &(name.len() as u32).to_le_bytes())?;
        put(&mut out, name.as_bytes())?;
        let (n, ch, h, w) = tensor.dim();
        for d in [n, ch, h, w] {
            put(&mut out, &(d as u32).to_le_bytes())?;
        }
        for v in tensor.iter() {
            put(&mut out, &v.to_le_bytes())?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Read every tensor from a weights container written by
/// [`write_weight_container`].
pub fn read_weight_container(path: &Path) -> Result<Vec<(String, Array4<f32>)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut input = BufReader::new(file);
    let bad = |msg: String| Error::Data(format!("weights container {}: {msg}", path.display()));

    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|e| Error::io(path, e))?;
    if &magic != CONTAINER_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let mut u32_buf = [0u8; 4];
    let mut read_u32 = |input: &mut BufReader<File>| -> Result<u32> {
        input
            .read_exact(&mut u32_buf)
            .map_err(|e| Error::io(path, e))?;
        Ok(u32::from_le_bytes(u32_buf))
    };
    let version = read_u32(&mut input)?;
    if version != CONTAINER_VERSION {
        return Err(bad(format!(
            "unsupported version {version}, expected {CONTAINER_VERSION}"
        )));
    }
    let count = read_u32(&mut input)? as usize;
    if count > 1024 {
        return Err(bad(format!("implausible tensor count {count}")));
    }
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut input)? as usize;
        if name_len == 0 || name_len > 256 {
            return Err(bad(format!("implausible name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len];
        input
            .read_exact(&mut name_bytes)
            .map_err(|e| Error::io(path, e))?;
        let name =
            String::from_utf8(name_bytes).map_err(|_| bad("tensor name is not utf-8".into()))?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            let v = read_u32(&mut input)? as usize;
            if v == 0 || v > 65536 {
                return Err(bad(format!("implausible dimension {v} in tensor {name}")));
            }
            *d = v;
        }
        let len = dims.iter().product::<usize>();
        if len > 256 << 20 {
            return Err(bad(format!("tensor {name} too large ({len} values)")));
        }
        let mut data = vec![0f32; len];
        for v in &mut data {
            let mut b = [0u8; 4];
            input.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
            *v = f32::from_le_bytes(b);
        }
        let tensor = Array4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), data)
            .map_err(|e| bad(format!("tensor {name}: {e}")))?;
        entries.push((name, tensor));
    }
    Ok(entries)
}

struct ConvLayer<T: Elem> {
    w: Array4<T>,
    b: Array4<T>,
}

/// Frozen convolutional feature extractor with the VGG-16 front topology
/// (two 64-channel 3x3 convs, a 2x2 max-pool, two 128-channel 3x3 convs,
/// ReLU after every conv). Parameters never receive gradients; gradients
/// still flow through to the extractor's input.
pub struct FeatureExtractor<T: Elem> {
    tap: TapLayer,
    normalize: Option<(Array1<T>, Array1<T>)>,
    layers: Vec<ConvLayer<T>>,
}

impl<T: Elem> FeatureExtractor<T> {
    pub fn from_config(cfg: &PerceptualConfig) -> Result<Self> {
        cfg.validate()?;
        match cfg.extractor_kind {
            ExtractorKind::FixedRandomFeatures => Ok(Self::fixed_random(cfg.tap_layer)),
            ExtractorKind::PretrainedClassifierFeatures => {
                let path = cfg.weights_path.as_ref().expect("validated above");
                Self::load_pretrained(path, cfg.tap_layer)
            }
        }
    }

    /// He-initialized extractor from a fixed internal seed, zero biases, no
    /// input normalization.
    pub fn fixed_random(tap: TapLayer) -> Self {
        let mut layers = Vec::new();
        for (i, (cout, cin)) in [(64usize, 3usize), (64, 64), (128, 64), (128, 128)]
            .into_iter()
            .enumerate()
        {
            let mut rng = DeterministicRng::derive(RANDOM_EXTRACTOR_SEED, "extractor", i as u64);
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let data: Vec<T> = (0..cout * cin * 9)
                .map(|_| c::<T>(rng.normal() * std))
                .collect();
            let w = Array4::from_shape_vec((cout, cin, 3, 3), data).expect("extractor shape");
            let b = Array4::zeros((1, cout, 1, 1));
            layers.push(ConvLayer { w, b });
        }
        Self {
            tap,
            normalize: None,
            layers,
        }
    }

    /// Load pretrained weights from a container file. A missing or malformed
    /// file is a hard error; there is no silent fallback to random weights.
    pub fn load_pretrained(path: &Path, tap: TapLayer) -> Result<Self> {
        let mut tensors: HashMap<String, Array4<f32>> =
            read_weight_container(path)?.into_iter().collect();
        let mut take = |name: &str, dims: (usize, usize, usize, usize)| -> Result<Array4<T>> {
            let t = tensors.remove(name).ok_or_else(|| {
                Error::Data(format!(
                    "weights container {} is missing tensor {name}",
                    path.display()
                ))
            })?;
            if t.dim() != dims {
                return Err(Error::Data(format!(
                    "weights container {}: tensor {name} has shape {:?}, expected {dims:?}",
                    path.display(),
                    t.dim()
                )));
            }
            Ok(t.mapv(|v| c::<T>(v as f64)))
        };
        let mut layers = Vec::new();
        for pair in EXTRACTOR_TENSORS.chunks(2) {
            let w = take(pair[0].0, pair[0].1)?;
            let b = take(pair[1].0, pair[1].1)?;
            layers.push(ConvLayer { w, b });
        }
        let scale = Array1::from_iter(CLASSIFIER_STD.iter().map(|&s| c::<T>(1.0 / s)));
        let shift = Array1::from_iter(
            CLASSIFIER_MEAN
                .iter()
                .zip(CLASSIFIER_STD.iter())
                .map(|(&m, &s)| c::<T>(-m / s)),
        );
        Ok(Self {
            tap,
            normalize: Some((scale, shift)),
            layers,
        })
    }

    pub fn tap_layer(&self) -> TapLayer {
        self.tap
    }

    /// Feature map at the configured tap for a 3-channel input in `[0, 1]`.
    /// The weights enter the graph as constants, so only the input collects
    /// a gradient.
    pub fn features(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (_, cdim, h, w) = g.value(x).dim();
        if cdim != 3 {
            return Err(Error::Shape(format!(
                "feature extractor expects 3 input channels, got {cdim}"
            )));
        }
        if self.tap == TapLayer::Relu2_2 && (h < 2 || w < 2) {
            return Err(Error::Shape(format!(
                "input {h}x{w} is too small for the relu2_2 tap (needs at least 2x2)"
            )));
        }
        let mut cur = x;
        if let Some((scale, shift)) = &self.normalize {
            cur = g.channel_affine(cur, scale.clone(), shift.clone())?;
        }
        cur = self.conv_relu(g, cur, 0)?;
        cur = self.conv_relu(g, cur, 1)?;
        if self.tap == TapLayer::Relu1_2 {
            return Ok(cur);
        }
        cur = g.maxpool2(cur);
        cur = self.conv_relu(g, cur, 2)?;
        self.conv_relu(g, cur, 3)
    }

    fn conv_relu(&self, g: &mut Graph<'_, T>, x: Var, layer: usize) -> Result<Var> {
        let w = g.constant(self.layers[layer].w.clone());
        let b = g.constant(self.layers[layer].b.clone());
        let y = g.conv2d(x, w, Some(b), 1, 1)?;
        Ok(g.relu(y))
    }
}

/// Mean squared distance between extractor features of the two images,
/// averaged over every feature element.
pub fn perceptual_loss_var<T: Elem>(
    g: &mut Graph<'_, T>,
    predicted: Var,
    target: Var,
    extractor: &FeatureExtractor<T>,
) -> Result<Var> {
    let fp = extractor.features(g, predicted)?;
    let ft = extractor.features(g, target)?;
    let d = g.sub(fp, ft)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean_all(sq))
}

/// The configured training objective: a base term (negated SSIM or MSE),
/// plus `lambda_p` times the perceptual term for the `+perceptual` kinds.
/// Perceptual kinds require an extractor; passing `None` for them is a
/// configuration error.
pub fn hybrid_loss_var<T: Elem>(
    g: &mut Graph<'_, T>,
    predicted: Var,
    target: Var,
    cfg: &LossConfig,
    extractor: Option<&FeatureExtractor<T>>,
) -> Result<Var> {
    cfg.validate()?;
    let base = match cfg.loss_kind {
        LossKind::Mse | LossKind::MsePerceptual => mse_var(g, predicted, target)?,
        LossKind::Ssim | LossKind::SsimPerceptual => {
            ssim_loss_var(g, predicted, target, &cfg.ssim)?
        }
    };
    if !cfg.loss_kind.uses_perceptual() {
        return Ok(base);
    }
    let extractor = extractor.ok_or_else(|| {
        Error::Config(format!(
            "loss kind {} needs a feature extractor",
            cfg.loss_kind
        ))
    })?;
    let lp = perceptual_loss_var(g, predicted, target, extractor)?;
    let weighted = g.mul_scalar(lp, cfg.lambda_p);
    g.add(base, weighted)
}

/// Evaluate the hybrid loss on plain tensors, outside any training graph.
pub fn hybrid_loss_value<T: Elem>(
    predicted: &Array4<T>,
    target: &Array4<T>,
    cfg: &LossConfig,
    extractor: Option<&FeatureExtractor<T>>,
) -> Result<f64> {
    let store = crate::nn::ParamStore::<T>::new();
    let mut g = Graph::new(&store, crate::nn::Mode::Eval);
    let p = g.constant(predicted.clone());
    let t = g.constant(target.clone());
    let loss = hybrid_loss_var(&mut g, p, t, cfg, extractor)?;
    Ok(g.scalar(loss).to_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mode, ParamStore};

    fn rand_image(seed: u64, h: usize, w: usize) -> Array4<f64> {
        let mut rng = DeterministicRng::derive(seed, "loss-test", 0);
        let data: Vec<f64> = (0..3 * h * w).map(|_| rng.uniform()).collect();
        Array4::from_shape_vec((1, 3, h, w), data).unwrap()
    }

    fn ssim_of(x: &Array4<f64>, y: &Array4<f64>, p: &SsimParams) -> f64 {
        ssim_value(x, y, p).unwrap()
    }

    /// Scalar reference: loops over every window position and channel,
    /// computes the weighted statistics with the subtract-the-mean
    /// covariance form, and averages the per-window scores.
    fn ssim_reference(x: &Array4<f64>, y: &Array4<f64>, p: &SsimParams) -> f64 {
        let (n, cdim, h, w) = x.dim();
        let k = p.window_size;
        let center = (k as f64 - 1.0) / 2.0;
        let mut win = vec![0.0; k * k];
        let mut total = 0.0;
        for i in 0..k {
            for j in 0..k {
                let di = i as f64 - center;
                let dj = j as f64 - center;
                let v = (-(di * di + dj * dj) / (2.0 * p.window_sigma * p.window_sigma)).exp();
                win[i * k + j] = v;
                total += v;
            }
        }
        for v in &mut win {
            *v /= total;
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for b in 0..n {
            for ch in 0..cdim {
                for i0 in 0..=(h - k) {
                    for j0 in 0..=(w - k) {
                        let mut mx = 0.0;
                        let mut my = 0.0;
                        for i in 0..k {
                            for j in 0..k {
                                let wt = win[i * k + j];
                                mx += wt * x[[b, ch, i0 + i, j0 + j]];
                                my += wt * y[[b, ch, i0 + i, j0 + j]];
                            }
                        }
                        let mut vx = 0.0;
                        let mut vy = 0.0;
                        let mut cxy = 0.0;
                        for i in 0..k {
                            for j in 0..k {
                                let wt = win[i * k + j];
                                let dx = x[[b, ch, i0 + i, j0 + j]] - mx;
                                let dy = y[[b, ch, i0 + i, j0 + j]] - my;
                                vx += wt * dx * dx;
                                vy += wt * dy * dy;
                                cxy += wt * dx * dy;
                            }
                        }
                        sum += ((2.0 * mx * my + p.c1) * (2.0 * cxy + p.c2))
                            / ((mx * mx + my * my + p.c1) * (vx + vy + p.c2));
                        count += 1;
                    }
                }
            }
        }
        sum / count as f64
    }

    #[test]
    fn identical_images_score_exactly_one() {
        let p = SsimParams::default();
        for seed in [3u64, 17, 40] {
            let x = rand_image(seed, 13, 12);
            assert_eq!(ssim_of(&x, &x, &p), 1.0);
        }
    }

    #[test]
    fn constant_black_vs_white_matches_hand_value() {
        let p = SsimParams::default();
        let x = Array4::<f64>::zeros((1, 3, 16, 16));
        let y = Array4::<f64>::ones((1, 3, 16, 16));
        // mu_x=0, mu_y=1, all variances zero: score = c1*c2 / ((1+c1)*c2).
        let expect = p.c1 / (1.0 + p.c1);
        assert!((ssim_of(&x, &y, &p) - expect).abs() < 1e-9);
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, Mode::Eval);
        let xv = g.constant(x);
        let yv = g.constant(y);
        let l = ssim_loss_var(&mut g, xv, yv, &p).unwrap();
        assert!((g.scalar(l) + expect).abs() < 1e-9);
    }

    #[test]
    fn windowed_ssim_matches_loop_reference() {
        let p = SsimParams::default();
        for seed in 0..20u64 {
            let x = rand_image(1000 + seed, 16, 16);
            let y = rand_image(2000 + seed, 16, 16);
            let got = ssim_of(&x, &y, &p);
            let want = ssim_reference(&x, &y, &p);
            assert!(
                (got - want).abs() < 1e-6,
                "seed {seed}: {got} vs reference {want}"
            );
        }
    }

    #[test]
    fn ssim_loss_rises_with_noise_amplitude() {
        let p = SsimParams::default();
        let mut rng = DeterministicRng::derive(77, "noise", 0);
        let base: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.uniform_in(0.3, 0.7)).collect();
        let noise: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let x = Array4::from_shape_vec((1, 3, 16, 16), base.clone()).unwrap();
        let mut last = f64::NEG_INFINITY;
        for amp in [0.0, 0.05, 0.1, 0.2, 0.3] {
            let noisy: Vec<f64> = base
                .iter()
                .zip(noise.iter())
                .map(|(&b, &u)| b + amp * u)
                .collect();
            let xhat = Array4::from_shape_vec((1, 3, 16, 16), noisy).unwrap();
            let loss = -ssim_of(&xhat, &x, &p);
            assert!(
                loss >= last,
                "loss fell from {last} to {loss} at amplitude {amp}"
            );
            last = loss;
        }
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        let p = SsimParams::default();
        for seed in [5u64, 6, 7] {
            let x = rand_image(seed, 14, 14);
            let y = rand_image(seed + 100, 14, 14);
            let a = ssim_of(&x, &y, &p);
            let b = ssim_of(&y, &x, &p);
            assert_eq!(a, b);
            assert!((-1.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn ssim_rejects_mismatched_and_undersized_inputs() {
        let p = SsimParams::default();
        let x = rand_image(1, 16, 16);
        let y = rand_image(2, 16, 15);
        assert!(matches!(
            ssim_value(&x, &y, &p),
            Err(crate::Error::Shape(_))
        ));
        let small = rand_image(3, 8, 8);
        let err = ssim_value(&small, &small, &p).unwrap_err();
        assert!(err.to_string().contains("window"), "{err}");
    }

    #[test]
    fn ssim_params_validation_catches_bad_values() {
        let mut p = SsimParams::default();
        p.window_size = 10;
        assert!(p.validate().is_err());
        p = SsimParams::default();
        p.window_sigma = 0.0;
        assert!(p.validate().is_err());
        p = SsimParams::default();
        p.c2 = -1.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn ssim_loss_gradient_vanishes_at_perfect_reconstruction() {
        let p = SsimParams {
            window_size: 5,
            ..SsimParams::default()
        };
        let x = rand_image(42, 8, 8);
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, Mode::Eval);
        let xhat = g.input(x.clone(), true);
        let target = g.constant(x.clone());
        let loss = ssim_loss_var(&mut g, xhat, target, &p).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(xhat).unwrap();
        let max_grad = grad.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        assert!(max_grad < 1e-10, "analytic gradient {max_grad}");

        // Central finite differences on a few probe pixels agree that the
        // point is stationary.
        let eval = |img: &Array4<f64>| -> f64 {
            let store = ParamStore::<f64>::new();
            let mut g = Graph::new(&store, Mode::Eval);
            let a = g.constant(img.clone());
            let b = g.constant(x.clone());
            let l = ssim_loss_var(&mut g, a, b, &p).unwrap();
            g.scalar(l)
        };
        let h = 1e-5;
        for (ch, i, j) in [(0, 0, 0), (1, 3, 4), (2, 7, 7), (0, 5, 2)] {
            let mut up = x.clone();
            up[[0, ch, i, j]] += h;
            let mut dn = x.clone();
            dn[[0, ch, i, j]] -= h;
            let fd = (eval(&up) - eval(&dn)) / (2.0 * h);
            assert!(fd.abs() < 1e-6, "fd gradient {fd} at ({ch},{i},{j})");
        }
    }

    #[test]
    fn loss_kind_names_round_trip() {
        for kind in LossKind::ALL {
            assert_eq!(kind.name().parse::<LossKind>().unwrap(), kind);
        }
        assert!(matches!(
            "ssim+adversarial".parse::<LossKind>(),
            Err(crate::Error::Config(_))
        ));
        assert_eq!(
            serde_json::to_string(&LossKind::SsimPerceptual).unwrap(),
            "\"ssim+perceptual\""
        );
    }

    #[test]
    fn loss_config_defaults_and_validation() {
        let cfg = LossConfig::default();
        assert_eq!(cfg.loss_kind, LossKind::SsimPerceptual);
        assert_eq!(cfg.lambda_p, 1.0);
        cfg.validate().unwrap();
        let mut bad = LossConfig::default();
        bad.lambda_p = -0.5;
        assert!(bad.validate().is_err());
        let mut pretrained = LossConfig::default();
        pretrained.perceptual.extractor_kind = ExtractorKind::PretrainedClassifierFeatures;
        assert!(pretrained.validate().is_err());
    }

    #[test]
    fn perceptual_loss_is_zero_on_identical_inputs() {
        let fx = FeatureExtractor::<f64>::fixed_random(TapLayer::Relu2_2);
        let x = rand_image(9, 16, 16);
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, Mode::Eval);
        let a = g.constant(x.clone());
        let b = g.constant(x);
        let l = perceptual_loss_var(&mut g, a, b, &fx).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn perceptual_loss_is_positive_on_distinct_inputs() {
        for tap in [TapLayer::Relu1_2, TapLayer::Relu2_2] {
            let fx = FeatureExtractor::<f64>::fixed_random(tap);
            let x = rand_image(10, 16, 16);
            let y = rand_image(11, 16, 16);
            let store = ParamStore::<f64>::new();
            let mut g = Graph::new(&store, Mode::Eval);
            let a = g.constant(x);
            let b = g.constant(y);
            let l = perceptual_loss_var(&mut g, a, b, &fx).unwrap();
            let v = g.scalar(l);
            assert!(v > 0.0 && v.is_finite());
        }
    }

    #[test]
    fn perceptual_loss_matches_direct_feature_distance() {
        let fx = FeatureExtractor::<f64>::fixed_random(TapLayer::Relu2_2);
        let x = rand_image(20, 32, 32);
        let y = rand_image(21, 32, 32);
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, Mode::Eval);
        let a = g.constant(x);
        let b = g.constant(y);
        let fa = fx.features(&mut g, a).unwrap();
        let fb = fx.features(&mut g, b).unwrap();
        let mut sum = 0.0;
        for (u, v) in g.value(fa).iter().zip(g.value(fb).iter()) {
            let d = u - v;
            sum += d * d;
        }
        let want = sum / g.value(fa).len() as f64;
        let l = perceptual_loss_var(&mut g, a, b, &fx).unwrap();
        assert!((g.scalar(l) - want).abs() < 1e-6 * want.max(1.0));
    }

    #[test]
    fn extractor_feature_shapes_follow_the_tap() {
        let x = rand_image(30, 20, 24);
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, Mode::Eval);
        let v = g.constant(x);
        let f1 = FeatureExtractor::<f64>::fixed_random(TapLayer::Relu1_2)
            .features(&mut g, v)
            .unwrap();
        assert_eq!(g.value(f1).dim(), (1, 64, 20, 24));
        let f2 = FeatureExtractor::<f64>::fixed_random(TapLayer::Relu2_2)
            .features(&mut g, v)
            .unwrap();
        assert_eq!(g.value(f2).dim(), (1, 128, 10, 12));
    }

    #[test]
    fn missing_pretrained_weights_is_a_hard_error() {
        let cfg = PerceptualConfig {
            extractor_kind: ExtractorKind::PretrainedClassifierFeatures,
            tap_layer: TapLayer::Relu2_2,
            weights_path: Some(PathBuf::from("/nonexistent/features.bin")),
        };
        assert!(matches!(
            FeatureExtractor::<f64>::from_config(&cfg),
            Err(crate::Error::Io { .. })
        ));
        let unset = PerceptualConfig {
            extractor_kind: ExtractorKind::PretrainedClassifierFeatures,
            tap_layer: TapLayer::Relu2_2,
            weights_path: None,
        };
        assert!(matches!(
            FeatureExtractor::<f64>::from_config(&unset),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn weight_container_round_trips_bitwise() {
        let dir = std::env::temp_dir().join("mhdn-container-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.bin");
        let mut rng = DeterministicRng::derive(55, "container", 0);
        let entries: Vec<(String, Array4<f32>)> = vec![
            (
                "a.weight".into(),
                Array4::from_shape_vec(
                    (2, 3, 3, 3),
                    (0..54).map(|_| rng.normal() as f32).collect(),
                )
                .unwrap(),
            ),
            (
                "a.bias".into(),
                Array4::from_shape_vec((1, 2, 1, 1), vec![0.25f32, -1.5]).unwrap(),
            ),
        ];
        write_weight_container(&path, &entries).unwrap();
        let back = read_weight_container(&path).unwrap();
        assert_eq!(back.len(), entries.len());
        for ((n0, t0), (n1, t1)) in entries.iter().zip(back.iter()) {
            assert_eq!(n0, n1);
            assert_eq!(t0.dim(), t1.dim());
            for (a, b) in t0.iter().zip(t1.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn pretrained_mode_normalizes_then_runs_the_same_convs() {
        let dir = std::env::temp_dir().join("mhdn-container-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("pretrained.bin");
        // Export the fixed-random tensors as a container so the only
        // difference between the two extractors is input normalization.
        let random = FeatureExtractor::<f32>::fixed_random(TapLayer::Relu2_2);
        let entries: Vec<(String, Array4<f32>)> = EXTRACTOR_TENSORS
            .iter()
            .enumerate()
            .map(|(i, (name, _))| {
                let layer = &random.layers[i / 2];
                let t = if i % 2 == 0 { &layer.w } else { &layer.b };
                (name.to_string(), t.clone())
            })
            .collect();
        write_weight_container(&path, &entries).unwrap();
        let pretrained = FeatureExtractor::<f32>::load_pretrained(&path, TapLayer::Relu2_2).unwrap();

        let x = rand_image(60, 12, 12).mapv(|v| v as f32);
        let mut normalized = x.clone();
        for ch in 0..3 {
            let s = (1.0 / CLASSIFIER_STD[ch]) as f32;
            let t = (-CLASSIFIER_MEAN[ch] / CLASSIFIER_STD[ch]) as f32;
            normalized
                .slice_mut(ndarray::s![.., ch, .., ..])
                .mapv_inplace(|v| v * s + t);
        }
        let store = ParamStore::<f32>::new();
        let mut g = Graph::new(&store, Mode::Eval);
        let raw = g.constant(x);
        let pre = g.constant(normalized);
        let via_pretrained = pretrained.features(&mut g, raw).unwrap();
        let via_random = random.features(&mut g, pre).unwrap();
        assert_eq!(g.value(via_pretrained), g.value(via_random));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn hybrid_loss_is_minus_one_at_perfect_reconstruction() {
        let fx = FeatureExtractor::<f64>::fixed_random(TapLayer::Relu2_2);
        let x = rand_image(70, 16, 16);
        for lambda in [0.0, 1.0, 7.25] {
            let cfg = LossConfig {
                lambda_p: lambda,
                ..LossConfig::default()
            };
            let v = hybrid_loss_value(&x, &x, &cfg, Some(&fx)).unwrap();
            assert_eq!(v, -1.0, "lambda {lambda}");
        }
    }

    #[test]
    fn hybrid_loss_with_zero_lambda_equals_ssim_loss() {
        let fx = FeatureExtractor::<f64>::fixed_random(TapLayer::Relu2_2);
        let x = rand_image(71, 16, 16);
        let y = rand_image(72, 16, 16);
        let cfg = LossConfig {
            lambda_p: 0.0,
            ..LossConfig::default()
        };
        let hybrid = hybrid_loss_value(&x, &y, &cfg, Some(&fx)).unwrap();
        let plain = -ssim_of(&x, &y, &cfg.ssim);
        assert_eq!(hybrid, plain);
    }

    #[test]
    fn hybrid_loss_is_linear_in_lambda() {
        let fx = FeatureExtractor::<f64>::fixed_random(TapLayer::Relu2_2);
        let x = rand_image(73, 16, 16);
        let y = rand_image(74, 16, 16);
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, Mode::Eval);
        let a = g.constant(x.clone());
        let b = g.constant(y.clone());
        let lp_var = perceptual_loss_var(&mut g, a, b, &fx).unwrap();
        let lp = g.scalar(lp_var);
        for lambda in [0.1, 1.0, 10.0] {
            let cfg = LossConfig {
                lambda_p: lambda,
                ..LossConfig::default()
            };
            let zero = LossConfig {
                lambda_p: 0.0,
                ..LossConfig::default()
            };
            let diff = hybrid_loss_value(&x, &y, &cfg, Some(&fx)).unwrap()
                - hybrid_loss_value(&x, &y, &zero, Some(&fx)).unwrap();
            let want = lambda * lp;
            let tol = 4.0 * f64::EPSILON * (1.0 + want.abs());
            assert!(
                (diff - want).abs() <= tol,
                "lambda {lambda}: {diff} vs {want}"
            );
        }
    }

    #[test]
    fn mse_variants_dispatch_correctly() {
        let fx = FeatureExtractor::<f64>::fixed_random(TapLayer::Relu2_2);
        let x = rand_image(75, 16, 16);
        let y = rand_image(76, 16, 16);
        let mse: f64 = {
            let d = &x - &y;
            d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64
        };
        let mse_cfg = LossConfig {
            loss_kind: LossKind::Mse,
            ..LossConfig::default()
        };
        let got = hybrid_loss_value(&x, &y, &mse_cfg, None).unwrap();
        assert!((got - mse).abs() < 1e-12);

        let both = LossConfig {
            loss_kind: LossKind::MsePerceptual,
            lambda_p: 2.0,
            ..LossConfig::default()
        };
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, Mode::Eval);
        let a = g.constant(x.clone());
        let b = g.constant(y.clone());
        let lp_var = perceptual_loss_var(&mut g, a, b, &fx).unwrap();
        let lp = g.scalar(lp_var);
        let got = hybrid_loss_value(&x, &y, &both, Some(&fx)).unwrap();
        assert!((got - (mse + 2.0 * lp)).abs() < 1e-12);
    }

    #[test]
    fn perceptual_kinds_require_an_extractor() {
        let x = rand_image(77, 16, 16);
        let cfg = LossConfig::default();
        assert!(matches!(
            hybrid_loss_value(&x, &x, &cfg, None),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn psnr_matches_closed_forms() {
        let zero = Array4::<f64>::zeros((1, 3, 8, 8));
        let half = Array4::<f64>::from_elem((1, 3, 8, 8), 0.5);
        assert!((psnr_value(&zero, &half).unwrap() - 10.0 * 4.0f64.log10()).abs() < 1e-3);

        let a = Array4::<f64>::from_elem((1, 3, 8, 8), 0.4);
        let b = Array4::<f64>::from_elem((1, 3, 8, 8), 0.5);
        assert!((psnr_value(&a, &b).unwrap() - 20.0).abs() < 1e-3);
    }

    #[test]
    fn psnr_caps_at_one_hundred_decibels() {
        let x = rand_image(80, 8, 8);
        assert_eq!(psnr_value(&x, &x).unwrap(), 100.0);
        let mut y = x.clone();
        y[[0, 0, 0, 0]] += 1e-7;
        assert_eq!(psnr_value(&x, &y).unwrap(), 100.0);
    }

    #[test]
    fn psnr_is_symmetric_and_rejects_shape_mismatch() {
        let x = rand_image(81, 9, 9);
        let y = rand_image(82, 9, 9);
        assert_eq!(psnr_value(&x, &y).unwrap(), psnr_value(&y, &x).unwrap());
        let z = rand_image(83, 9, 8);
        assert!(matches!(psnr_value(&x, &z), Err(crate::Error::Shape(_))));
    }
}
