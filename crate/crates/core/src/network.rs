//! The full deraining network: parallel cascade streams with distinct
//! kernel sizes, channel-wise fusion into a negative residual map, and the
//! coarse-to-fine refinement head.
//!
//! Per stream: one stem conv lifts the image to `residual_width +
//! dense_growth` channels, then `cascades_per_stream` cascades run in
//! sequence. Where a long shortcut ends, the destination cascade reads a
//! merge of the shortcut source's output and the previous cascade's output.
//! The stream outputs (plus the raw input, when `inject_input_shortcut` is
//! set) are concatenated, reduced to image channels by a 3x3 conv and
//! squashed by tanh into the negative residual NR. The coarse estimate is
//! `x + NR`; refinement is ReLU-Conv(7x7)-ReLU-Conv(3x3).

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    cascade_forward, register_cascade, register_merge, shortcut_merge, BnSettings, BrcParams,
    CascadeConfig, CascadeParams, DprdbConfig,
};
use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::nn::{ConvIds, Graph, Mode, ParamStore, Var};
use crate::util::DeterministicRng;

/// Architecture hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NetworkConfig {
    /// Middle-conv kernel size of each stream; one stream per entry.
    pub stream_kernels: Vec<usize>,
    pub cascades_per_stream: usize,
    pub blocks_per_cascade: usize,
    pub dprdb: DprdbConfig,
    /// Long shortcuts as 1-based (source, destination) cascade indices,
    /// applied within every stream.
    pub shortcut_pairs: Vec<(usize, usize)>,
    pub input_channels: usize,
    /// Concatenate the raw input into the fusion step.
    pub inject_input_shortcut: bool,
    #[serde(default)]
    pub bn: BnSettings,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            stream_kernels: vec![3, 5, 7],
            cascades_per_stream: 6,
            blocks_per_cascade: 6,
            dprdb: DprdbConfig::default(),
            shortcut_pairs: vec![(2, 4), (1, 5)],
            input_channels: 3,
            inject_input_shortcut: true,
            bn: BnSettings::default(),
        }
    }
}

impl NetworkConfig {
    /// The cascade layout every stream shares. The transition width equals
    /// the block update width so cascades compose with the stem.
    pub fn cascade_config(&self) -> CascadeConfig {
        CascadeConfig {
            blocks_per_cascade: self.blocks_per_cascade,
            cascades_per_stream: self.cascades_per_stream,
            transition_width: self.dprdb.update_width(),
            shortcut_pairs: self.shortcut_pairs.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stream_kernels.is_empty() {
            return Err(Error::Config("network needs at least one stream".into()));
        }
        for &k in &self.stream_kernels {
            if k == 0 || k % 2 == 0 {
                return Err(Error::Config(format!(
                    "stream kernel sizes must be odd and positive, got {k}"
                )));
            }
        }
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be at least 1".into()));
        }
        self.cascade_config().validate(&self.dprdb)
    }
}

/// The three tensors a full inference pass produces.
pub struct DerainOutput<T: Elem> {
    /// Fusion output in [-1, 1]; the network's estimate of minus the rain.
    pub negative_residual: Array4<T>,
    /// Input plus negative residual.
    pub coarse: Array4<T>,
    /// Refined image, clamped to [0, 1].
    pub derained: Array4<T>,
}

/// Graph nodes of one forward pass, for training on the unclamped output.
pub struct ForwardVars {
    pub negative_residual: Var,
    pub coarse: Var,
    /// Refinement output before the inference-only clamp.
    pub refined: Var,
}

/// One stream's tape nodes: the tensors entering and leaving each cascade.
#[derive(Debug)]
pub struct StreamTrace {
    pub output: Var,
    pub cascade_inputs: Vec<Var>,
    pub cascade_outputs: Vec<Var>,
}

struct StreamParams {
    stem: ConvIds,
    cascades: Vec<CascadeParams>,
    /// Indexed by destination cascade (0-based); holds the 0-based source
    /// cascade and the merge unit.
    joins: Vec<Option<(usize, BrcParams)>>,
}

/// A deraining model: configuration plus parameter store.
pub struct DerainNet<T: Elem> {
    config: NetworkConfig,
    store: ParamStore<T>,
    streams: Vec<StreamParams>,
    fusion: ConvIds,
    refine1: ConvIds,
    refine2: ConvIds,
}

impl<T: Elem> DerainNet<T> {
    /// Register all parameters with seeded init. The draw order is fixed by
    /// the registration sequence, so (config, seed) fully determines the
    /// initial weights.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = DeterministicRng::derive(seed, "init", 0);
        let mut store = ParamStore::new();
        let cascade_cfg = config.cascade_config();
        let width = cascade_cfg.transition_width;

        let mut streams = Vec::new();
        for (i, &kernel) in config.stream_kernels.iter().enumerate() {
            let prefix = format!("stream{i}");
            let stem = store.register_conv(
                &format!("{prefix}.stem"),
                width,
                config.input_channels,
                kernel,
                false,
                &mut rng,
            )?;
            let dprdb = DprdbConfig {
                spatial_kernel: kernel,
                ..config.dprdb
            };
            let mut cascades = Vec::new();
            let mut joins = vec![None; config.cascades_per_stream];
            for k in 1..=config.cascades_per_stream {
                if let Some(&(src, dst)) =
                    config.shortcut_pairs.iter().find(|&&(_, dst)| dst == k)
                {
                    let merge =
                        register_merge(&mut store, &format!("{prefix}.join{dst}"), width, &mut rng)?;
                    joins[k - 1] = Some((src - 1, merge));
                }
                cascades.push(register_cascade(
                    &mut store,
                    &format!("{prefix}.cascade{k}"),
                    &cascade_cfg,
                    &dprdb,
                    &mut rng,
                )?);
            }
            streams.push(StreamParams {
                stem,
                cascades,
                joins,
            });
        }

        let fused_channels = config.stream_kernels.len() * width
            + if config.inject_input_shortcut {
                config.input_channels
            } else {
                0
            };
        let fusion = store.register_conv(
            "fusion.conv",
            config.input_channels,
            fused_channels,
            3,
            true,
            &mut rng,
        )?;
        let refine1 = store.register_conv(
            "refine.conv1",
            config.input_channels,
            config.input_channels,
            7,
            true,
            &mut rng,
        )?;
        let refine2 = store.register_conv(
            "refine.conv2",
            config.input_channels,
            config.input_channels,
            3,
            true,
            &mut rng,
        )?;

        Ok(Self {
            config,
            store,
            streams,
            fusion,
            refine1,
            refine2,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Run one stream: stem conv, then cascades with shortcut joins.
    pub fn stream_forward(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        stream_index: usize,
    ) -> Result<StreamTrace> {
        let Some(stream) = self.streams.get(stream_index) else {
            return Err(Error::Config(format!(
                "stream index {stream_index} out of range for {} streams",
                self.streams.len()
            )));
        };
        let kernel = self.config.stream_kernels[stream_index];
        let cascade_cfg = self.config.cascade_config();
        let dprdb = DprdbConfig {
            spatial_kernel: kernel,
            ..self.config.dprdb
        };
        let bn = self.config.bn;

        let mut cur = g.apply_conv(stream.stem, x, (kernel - 1) / 2)?;
        let mut inputs = Vec::new();
        let mut outputs: Vec<Var> = Vec::new();
        for k in 0..self.config.cascades_per_stream {
            let entry = match &stream.joins[k] {
                Some((src, merge)) => shortcut_merge(g, cur, outputs[*src], merge, bn)?,
                None => cur,
            };
            inputs.push(entry);
            let t = cascade_forward(g, entry, &stream.cascades[k], &cascade_cfg, &dprdb, bn)?;
            outputs.push(t);
            cur = t;
        }
        Ok(StreamTrace {
            output: cur,
            cascade_inputs: inputs,
            cascade_outputs: outputs,
        })
    }

    /// Concatenate stream outputs (and the raw input if configured), reduce
    /// with a 3x3 conv and bound with tanh.
    pub fn fuse_streams(&self, g: &mut Graph<'_, T>, streams: &[Var], x: Var) -> Result<Var> {
        let first = g.value(streams[0]).dim();
        for &s in streams {
            if g.value(s).dim() != first {
                return Err(Error::Shape(format!(
                    "stream outputs disagree: {:?} vs {:?}",
                    first,
                    g.value(s).dim()
                )));
            }
        }
        let mut parts = streams.to_vec();
        if self.config.inject_input_shortcut {
            parts.push(x);
        }
        let cat = g.concat_c(&parts)?;
        let conv = g.apply_conv(self.fusion, cat, 1)?;
        Ok(g.tanh(conv))
    }

    /// Refinement head on the coarse estimate; output is unclamped.
    pub fn fine_tune(&self, g: &mut Graph<'_, T>, coarse: Var) -> Result<Var> {
        let a = g.relu(coarse);
        let b = g.apply_conv(self.refine1, a, 3)?;
        let r = g.relu(b);
        g.apply_conv(self.refine2, r, 1)
    }

    /// Full forward pass on an existing graph. Training drives this in
    /// train mode and puts the loss on `refined`; inference uses
    /// [`DerainNet::derain`].
    pub fn forward(&self, g: &mut Graph<'_, T>, x: Var) -> Result<ForwardVars> {
        let channels = g.value(x).dim().1;
        if channels != self.config.input_channels {
            return Err(Error::Shape(format!(
                "input has {channels} channels, network expects {}",
                self.config.input_channels
            )));
        }
        let mut outputs = Vec::new();
        for i in 0..self.streams.len() {
            outputs.push(self.stream_forward(g, x, i)?.output);
        }
        let nr = self.fuse_streams(g, &outputs, x)?;
        let coarse = g.add(x, nr)?;
        let refined = self.fine_tune(g, coarse)?;
        Ok(ForwardVars {
            negative_residual: nr,
            coarse,
            refined,
        })
    }

    /// Inference: eval-mode forward plus the final clamp to [0, 1].
    pub fn derain(&self, x: &Array4<T>) -> Result<DerainOutput<T>> {
        if !x.iter().all(|v| v.is_finite() && *v >= T::zero() && *v <= T::one()) {
            return Err(Error::Data(
                "derain input must lie in [0, 1]".into(),
            ));
        }
        let mut g = Graph::new(&self.store, Mode::Eval);
        let xv = g.input(x.clone(), false);
        let vars = self.forward(&mut g, xv)?;
        let one = T::one();
        let zero = T::zero();
        Ok(DerainOutput {
            negative_residual: g.value(vars.negative_residual).clone(),
            coarse: g.value(vars.coarse).clone(),
            derained: g.value(vars.refined).mapv(|v| v.max(zero).min(one)),
        })
    }
}

/// Clamp helper shared by CLI paths that post-process refined tensors.
pub fn clamp01<T: Elem>(x: &Array4<T>) -> Array4<T> {
    x.mapv(|v| v.max(T::zero()).min(T::one()))
}

/// A small configuration for quick desk runs and tests: one stream, two
/// cascades of two blocks, narrow channels.
pub fn desk_config() -> NetworkConfig {
    NetworkConfig {
        stream_kernels: vec![3],
        cascades_per_stream: 2,
        blocks_per_cascade: 2,
        dprdb: DprdbConfig {
            residual_width: 8,
            dense_growth: 4,
            bottleneck_width: 8,
            spatial_kernel: 3,
        },
        shortcut_pairs: vec![(1, 2)],
        input_channels: 3,
        inject_input_shortcut: true,
        bn: BnSettings::default(),
    }
}
