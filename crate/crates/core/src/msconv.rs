//! Multi-scale convolution with kernels shared across scales.
//!
//! The primary maps are bilinearly resized to each of `m` scales and every
//! resized copy is convolved with the same kernel groups. Each
//! `(scale, channel)` stream is then batch-normalized on its own statistics,
//! multiplied by a learnable scalar `sw[i, j]` and rectified:
//! `y_ij = relu(sw_ij · BN_ij(conv_j(resize_i(x))))`.
//!
//! Output channels of all kernel groups are numbered consecutively in group
//! order, giving the flat channel index `j ∈ 0..N`. Groups use padding
//! `(k - 1) / 2`, so a size-2 kernel yields maps one pixel smaller than a
//! size-3 kernel on the same scale; each group's maps are kept as a separate
//! tensor.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{scaled_extent, BatchNorm2d, BatchStats, Mode};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_SCALES: [f64; 3] = [0.5, 0.75, 1.0];
pub const DEFAULT_KERNEL_GROUPS: [KernelGroup; 2] = [
    KernelGroup { size: 2, out_channels: 8 },
    KernelGroup { size: 3, out_channels: 10 },
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelGroup {
    pub size: usize,
    pub out_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsConvConfig {
    /// `(height, width)` resize factors, one pathway each.
    pub scales: Vec<(f64, f64)>,
    pub kernel_groups: Vec<KernelGroup>,
    pub use_norm: bool,
    pub use_scale_weights: bool,
}

impl Default for MsConvConfig {
    fn default() -> Self {
        MsConvConfig {
            scales: DEFAULT_SCALES.iter().map(|&s| (s, s)).collect(),
            kernel_groups: DEFAULT_KERNEL_GROUPS.to_vec(),
            use_norm: true,
            use_scale_weights: true,
        }
    }
}

impl MsConvConfig {
    pub fn isotropic(scales: &[f64], kernel_groups: &[KernelGroup], use_norm: bool, use_scale_weights: bool) -> Self {
        MsConvConfig {
            scales: scales.iter().map(|&s| (s, s)).collect(),
            kernel_groups: kernel_groups.to_vec(),
            use_norm,
            use_scale_weights,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("msconv needs at least one scale".into()));
        }
        for &(h, w) in &self.scales {
            if h != w {
                return Err(Error::Config(format!("anisotropic msconv scale ({h}, {w})")));
            }
            if !(0.25..=2.0).contains(&h) {
                return Err(Error::Config(format!("msconv scale {h} outside [1/4, 2]")));
            }
        }
        if self.kernel_groups.is_empty() || self.channels() == 0 {
            return Err(Error::Config("msconv needs at least one output channel".into()));
        }
        if self.kernel_groups.iter().any(|g| g.size == 0) {
            return Err(Error::Config("kernel size must be positive".into()));
        }
        Ok(())
    }

    /// Total output channels `N`.
    pub fn channels(&self) -> usize {
        self.kernel_groups.iter().map(|g| g.out_channels).sum()
    }

    /// Distinct effective receptive fields: scales × kernel sizes.
    pub fn receptive_field_count(&self) -> usize {
        self.scales.len() * self.kernel_groups.len()
    }

    fn max_kernel(&self) -> usize {
        self.kernel_groups.iter().map(|g| g.size).max().unwrap_or(1)
    }
}

/// Secondary feature maps: `maps[i]` lists, for scale `i`, each kernel
/// group's `[b, out_g, h', w']` tensor with the flat index of its first channel.
#[derive(Clone, Debug)]
pub struct ScaledFeatureMaps {
    pub channels: usize,
    pub maps: Vec<Vec<(Var, usize)>>,
}

impl ScaledFeatureMaps {
    /// Wraps a single `[b, N, h, w]` tensor (e.g. primary maps pooled directly).
    pub fn single(x: Var, channels: usize) -> Self {
        ScaledFeatureMaps {
            channels,
            maps: vec![vec![(x, 0)]],
        }
    }

    pub fn pool_inputs(&self) -> impl Iterator<Item = (Var, usize)> + '_ {
        self.maps.iter().flatten().copied()
    }

    /// Maps restricted to batch item `index`, recorded as slices on `g`.
    pub fn slice_instance(&self, g: &mut Graph, index: usize) -> Result<Self> {
        let maps = self
            .maps
            .iter()
            .map(|scale| {
                scale
                    .iter()
                    .map(|&(v, off)| Ok((g.slice_outer(v, index)?, off)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ScaledFeatureMaps {
            channels: self.channels,
            maps,
        })
    }

    /// Items `start..start + len` of the leading axis.
    pub fn slice_range(&self, g: &mut Graph, start: usize, len: usize) -> Result<Self> {
        let parts = (start..start + len)
            .map(|i| self.slice_instance(g, i))
            .collect::<Result<Vec<_>>>()?;
        if parts.len() == 1 {
            return Ok(parts.into_iter().next().expect("one part"));
        }
        let mut maps = Vec::with_capacity(self.maps.len());
        for (s, scale) in self.maps.iter().enumerate() {
            let mut joined = Vec::with_capacity(scale.len());
            for (j, &(_, off)) in scale.iter().enumerate() {
                let vars: Vec<Var> = parts.iter().map(|p| p.maps[s][j].0).collect();
                joined.push((g.concat(&vars, 0)?, off));
            }
            maps.push(joined);
        }
        Ok(ScaledFeatureMaps {
            channels: self.channels,
            maps,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SharedKernel {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub group: KernelGroup,
    pub offset: usize,
}

#[derive(Clone, Debug)]
pub struct MsConvLayer {
    pub config: MsConvConfig,
    pub in_channels: usize,
    /// One parameter set per kernel group, shared by every scale.
    pub kernels: Vec<SharedKernel>,
    /// One normalizer per scale over all `N` channels.
    pub norms: Option<Vec<BatchNorm2d>>,
    /// `sw` as an `[m, N]` parameter.
    pub scale_weights: Option<ParamId>,
}

/// Train-mode statistics of scale `scale`'s normalizer for channels `offset..`.
#[derive(Clone, Debug)]
pub struct MsConvBnUpdate {
    pub scale: usize,
    pub offset: usize,
    pub stats: BatchStats,
}

pub(crate) fn he_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Result<Tensor> {
    let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng) as Real)
}

impl MsConvLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        config: MsConvConfig,
        lr_scale: Real,
    ) -> Result<Self> {
        config.validate()?;
        let mut kernels = Vec::with_capacity(config.kernel_groups.len());
        let mut offset = 0;
        for (gi, group) in config.kernel_groups.iter().enumerate() {
            let fan_in = in_channels * group.size * group.size;
            let w = he_normal(rng, &[group.out_channels, in_channels, group.size, group.size], fan_in)?;
            let weight = store.add(format!("{name}.k{gi}.weight"), w, lr_scale)?;
            let bias = if config.use_norm {
                None
            } else {
                Some(store.add(format!("{name}.k{gi}.bias"), Tensor::zeros(&[group.out_channels])?, lr_scale)?)
            };
            kernels.push(SharedKernel {
                weight,
                bias,
                group: *group,
                offset,
            });
            offset += group.out_channels;
        }
        let n = config.channels();
        let m = config.scales.len();
        let norms = if config.use_norm {
            Some(
                (0..m)
                    .map(|i| BatchNorm2d::new(store, &format!("{name}.bn{i}"), n, lr_scale))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let scale_weights = if config.use_scale_weights {
            Some(store.add(format!("{name}.sw"), Tensor::ones(&[m, n])?, lr_scale)?)
        } else {
            None
        };
        Ok(MsConvLayer {
            config,
            in_channels,
            kernels,
            norms,
            scale_weights,
        })
    }

    pub fn channels(&self) -> usize {
        self.config.channels()
    }

    /// Number of trainable scalars implied by the configuration.
    pub fn expected_param_count(&self) -> usize {
        let n = self.channels();
        let m = self.config.scales.len();
        let kernels: usize = self
            .config
            .kernel_groups
            .iter()
            .map(|g| g.size * g.size * self.in_channels * g.out_channels + if self.config.use_norm { 0 } else { g.out_channels })
            .sum();
        kernels + if self.config.use_norm { 2 * m * n } else { 0 } + if self.config.use_scale_weights { m * n } else { 0 }
    }

    /// Runs every scale pathway on `x [b, c, h, w]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mode: Mode,
    ) -> Result<(ScaledFeatureMaps, Vec<MsConvBnUpdate>)> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("msconv expects [b, {}, h, w]", self.in_channels),
            });
        }
        let kmax = self.config.max_kernel();
        let sw = self.scale_weights.map(|id| g.param(store, id));
        let n = self.channels();
        let mut maps = Vec::with_capacity(self.config.scales.len());
        let mut updates = Vec::new();
        for (i, &(sh, sw_w)) in self.config.scales.iter().enumerate() {
            let (eh, ew) = (scaled_extent(shape[2], sh), scaled_extent(shape[3], sw_w));
            if eh.min(ew) < kmax {
                return Err(Error::ScaleTooSmall {
                    scale: sh,
                    extent: eh.min(ew),
                    kernel: kmax,
                });
            }
            let resized = if sh == 1.0 && sw_w == 1.0 {
                x
            } else {
                g.bilinear_resize(x, sh, sw_w)?
            };
            let mut scale_maps = Vec::with_capacity(self.kernels.len());
            for kernel in &self.kernels {
                let w = g.param(store, kernel.weight);
                let b = kernel.bias.map(|id| g.param(store, id));
                let mut y = g.conv2d(resized, w, b, 1, (kernel.group.size - 1) / 2)?;
                if let Some(norms) = &self.norms {
                    let (out, stats) = norms[i].forward(g, store, y, kernel.offset, mode)?;
                    y = out;
                    if let Some(stats) = stats {
                        updates.push(MsConvBnUpdate {
                            scale: i,
                            offset: kernel.offset,
                            stats,
                        });
                    }
                }
                if let Some(sw) = sw {
                    y = g.channel_scale(y, sw, i * n + kernel.offset)?;
                }
                scale_maps.push((g.relu(y), kernel.offset));
            }
            maps.push(scale_maps);
        }
        Ok((ScaledFeatureMaps { channels: n, maps }, updates))
    }

    pub fn apply_bn_update(&mut self, update: &MsConvBnUpdate) {
        if let Some(norms) = &mut self.norms {
            norms[update.scale].update_running(update.offset, &update.stats);
        }
    }
}

/// `m · n` for a configuration.
pub fn receptive_field_count(config: &MsConvConfig) -> usize {
    config.receptive_field_count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(config: MsConvConfig, in_ch: usize) -> (ParamStore, MsConvLayer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = MsConvLayer::new(&mut store, &mut rng, "ms", in_ch, config, 1.0).unwrap();
        (store, l)
    }

    #[test]
    fn receptive_fields() {
        let g2 = DEFAULT_KERNEL_GROUPS.to_vec();
        let g1 = vec![KernelGroup { size: 3, out_channels: 4 }];
        assert_eq!(MsConvConfig::isotropic(&DEFAULT_SCALES, &g2, true, true).receptive_field_count(), 6);
        assert_eq!(MsConvConfig::isotropic(&[1.0], &g1, true, true).receptive_field_count(), 1);
        assert_eq!(receptive_field_count(&MsConvConfig::isotropic(&DEFAULT_SCALES, &g1, true, true)), 3);
    }

    #[test]
    fn default_shapes_on_sixteen_pixel_maps() {
        let (store, l) = layer(MsConvConfig::default(), 4);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 4, 16, 16], |i| ((i % 7) as Real) * 0.1).unwrap());
        let (maps, updates) = l.forward(&mut g, &store, x, Mode::Train).unwrap();
        assert_eq!(maps.channels, 18);
        assert_eq!(updates.len(), 6);
        let extents: Vec<Vec<Vec<usize>>> = maps
            .maps
            .iter()
            .map(|s| s.iter().map(|&(v, _)| g.value(v).shape().to_vec()).collect())
            .collect();
        assert_eq!(
            extents,
            vec![
                vec![vec![1, 8, 7, 7], vec![1, 10, 8, 8]],
                vec![vec![1, 8, 11, 11], vec![1, 10, 12, 12]],
                vec![vec![1, 8, 15, 15], vec![1, 10, 16, 16]],
            ]
        );
    }

    #[test]
    fn zero_scale_weights_silence_a_scale() {
        let (mut store, l) = layer(MsConvConfig::default(), 2);
        let mut sw = vec![1.0; 3 * 18];
        sw[18..36].fill(0.0);
        store.set_value(l.scale_weights.unwrap(), Tensor::new(&[3, 18], sw).unwrap()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 2, 8, 8], |i| ((i * 13 % 17) as Real) * 0.1 - 0.5).unwrap());
        let (maps, _) = l.forward(&mut g, &store, x, Mode::Train).unwrap();
        for &(v, _) in &maps.maps[1] {
            assert!(g.value(v).data().iter().all(|&y| y == 0.0));
        }
        assert!(maps.maps[0].iter().any(|&(v, _)| g.value(v).data().iter().any(|&y| y != 0.0)));
    }

    #[test]
    fn flags_control_parameter_sets() {
        let (store, l) = layer(MsConvConfig::isotropic(&DEFAULT_SCALES, &DEFAULT_KERNEL_GROUPS, false, false), 5);
        assert!(l.norms.is_none() && l.scale_weights.is_none());
        assert!(l.kernels.iter().all(|k| k.bias.is_some()));
        assert_eq!(store.num_scalars(), l.expected_param_count());
        let (store, l) = layer(MsConvConfig::default(), 5);
        assert!(l.kernels.iter().all(|k| k.bias.is_none()));
        assert_eq!(store.num_scalars(), l.expected_param_count());
        // 4·5·8 + 9·5·10 kernels, 2·3·18 norm, 3·18 sw
        assert_eq!(store.num_scalars(), 160 + 450 + 108 + 54);
    }

    #[test]
    fn too_small_scale_names_scale_and_kernel() {
        let (store, l) = layer(MsConvConfig::default(), 1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 4, 4]).unwrap());
        let err = l.forward(&mut g, &store, x, Mode::Eval).unwrap_err();
        assert!(matches!(err, Error::ScaleTooSmall { scale, kernel: 3, .. } if scale == 0.5), "{err}");
    }

    #[test]
    fn config_validation() {
        let mut c = MsConvConfig::default();
        c.scales.push((0.2, 0.2));
        assert!(c.validate().is_err());
        let mut c = MsConvConfig::default();
        c.scales[0] = (0.5, 1.0);
        assert!(c.validate().is_err());
        let c = MsConvConfig::isotropic(&[1.0], &[], true, true);
        assert!(c.validate().is_err());
    }
}
