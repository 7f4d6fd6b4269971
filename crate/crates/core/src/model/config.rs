use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kernel size of the fractionally strided (transposed) convolutions.
pub const UPSAMPLE_KERNEL: usize = 4;
pub const UPSAMPLE_STRIDE: usize = 2;
pub const UPSAMPLE_PAD: usize = 1;

/// Slope every PReLU starts from.
pub const INITIAL_PRELU_SLOPE: f64 = 0.25;

/// One "same"-padded convolution followed by PReLU and, optionally, a
/// 2x2 stride-2 max-pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub maps: usize,
    pub kernel: usize,
    #[serde(default)]
    pub pool: bool,
}

impl ConvSpec {
    pub const fn new(maps: usize, kernel: usize) -> Self {
        Self {
            maps,
            kernel,
            pool: false,
        }
    }

    pub const fn pooled(maps: usize, kernel: usize) -> Self {
        Self {
            maps,
            kernel,
            pool: true,
        }
    }
}

/// Layer inventory of the cascaded network.
///
/// Map counts and hidden FC widths are multiplied by `width_multiplier`
/// (rounded up) when the network is built; the class count (last FC width),
/// input channels and the single output map are never scaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    #[serde(default = "one")]
    pub input_channels: usize,
    pub shared: Vec<ConvSpec>,
    pub prior_convs: Vec<ConvSpec>,
    pub prior_fc: Vec<usize>,
    pub spp_levels: Vec<usize>,
    pub density_convs: Vec<ConvSpec>,
    pub fusion_convs: Vec<ConvSpec>,
    /// Output maps of each x2 transposed convolution.
    pub upsample: Vec<usize>,
    pub width_multiplier: f64,
    /// Drop the prior stage; fusion then sees density features only.
    #[serde(default)]
    pub single_stage: bool,
}

fn one() -> usize {
    1
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_channels: 1,
            shared: vec![ConvSpec::new(16, 9), ConvSpec::new(32, 7)],
            prior_convs: vec![
                ConvSpec::pooled(32, 7),
                ConvSpec::pooled(32, 5),
                ConvSpec::new(64, 5),
                ConvSpec::new(64, 5),
            ],
            prior_fc: vec![512, 256, 10],
            spp_levels: vec![1, 2, 4],
            density_convs: vec![
                ConvSpec::pooled(20, 7),
                ConvSpec::pooled(40, 5),
                ConvSpec::new(20, 5),
                ConvSpec::new(10, 5),
            ],
            fusion_convs: vec![ConvSpec::new(24, 3), ConvSpec::new(32, 3)],
            upsample: vec![16, 18],
            width_multiplier: 1.0,
            single_stage: false,
        }
    }
}

impl NetworkConfig {
    /// The default network at a quarter of its width.
    pub fn tiny() -> Self {
        Self {
            width_multiplier: 0.25,
            ..Self::default()
        }
    }

    pub fn with_width(mut self, width_multiplier: f64) -> Self {
        self.width_multiplier = width_multiplier;
        self
    }

    pub fn with_single_stage(mut self, single_stage: bool) -> Self {
        self.single_stage = single_stage;
        self
    }

    pub fn classes(&self) -> usize {
        self.prior_fc.last().copied().unwrap_or(0)
    }

    pub(crate) fn scaled(&self, maps: usize) -> usize {
        (Float::ceil(maps as f64 * self.width_multiplier) as usize).max(1)
    }

    /// Total down-sampling of the encoder stages; inputs must be a multiple of it.
    pub fn downsample_factor(&self) -> usize {
        1 << self.density_convs.iter().filter(|c| c.pool).count()
    }

    /// Smallest input side for which the finest pyramid level still fits.
    pub fn min_input_side(&self) -> usize {
        let finest = if self.single_stage {
            1
        } else {
            self.spp_levels.iter().copied().max().unwrap_or(1)
        };
        finest * self.downsample_factor()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(Error::Config(format!(
                "width multiplier must be positive, got {}",
                self.width_multiplier
            )));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("input channels must be positive".into()));
        }
        check_convs("shared", &self.shared, false)?;
        check_convs("density", &self.density_convs, true)?;
        check_convs("fusion", &self.fusion_convs, false)?;
        if self.shared.is_empty() || self.density_convs.is_empty() {
            return Err(Error::Config(
                "the shared and density stages need at least one convolution each".into(),
            ));
        }
        let density_pools = self.density_convs.iter().filter(|c| c.pool).count();
        if self.upsample.len() != density_pools {
            return Err(Error::Config(format!(
                "the density stage pools {density_pools} times, so {density_pools} x2 upsampling layers \
                 are needed to restore full resolution; found {}",
                self.upsample.len()
            )));
        }
        if self.upsample.contains(&0) {
            return Err(Error::Config("upsampling layers need at least one map".into()));
        }
        if !self.single_stage {
            check_convs("prior", &self.prior_convs, true)?;
            if self.prior_convs.is_empty() {
                return Err(Error::Config("the prior stage needs at least one convolution".into()));
            }
            let prior_pools = self.prior_convs.iter().filter(|c| c.pool).count();
            if prior_pools != density_pools {
                return Err(Error::Config(format!(
                    "prior features are fused with density features, so both stages must pool the \
                     same number of times: expected {density_pools}, found {prior_pools} in the prior stage"
                )));
            }
            if self.prior_fc.is_empty() || self.prior_fc.contains(&0) {
                return Err(Error::Config("prior FC widths must be positive".into()));
            }
            if self.classes() < 2 {
                return Err(Error::Config("the classifier needs at least two classes".into()));
            }
            if self.spp_levels.is_empty()
                || self.spp_levels[0] == 0
                || self.spp_levels.windows(2).any(|w| w[0] >= w[1])
            {
                return Err(Error::Config(format!(
                    "pyramid levels must be non-empty, positive and strictly ascending, got {:?}",
                    self.spp_levels
                )));
            }
        }
        Ok(())
    }
}

fn check_convs(stage: &str, convs: &[ConvSpec], pools_allowed: bool) -> Result<()> {
    for (i, c) in convs.iter().enumerate() {
        if c.maps == 0 || c.kernel == 0 || c.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "{stage} conv {i}: maps must be positive and the kernel odd, got {} maps of {}x{}",
                c.maps, c.kernel, c.kernel
            )));
        }
        if c.pool && !pools_allowed {
            return Err(Error::Config(format!("{stage} conv {i}: this stage does not pool")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ParamKind {
    Weight,
    Bias,
    Slope,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub fan_in: usize,
    /// Whether a PReLU follows; picks the initialization gain.
    pub rectified: bool,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ConvLayer {
    pub name: String,
    pub weight: usize,
    pub bias: usize,
    pub slope: Option<usize>,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub pool: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct DeconvLayer {
    pub name: String,
    pub weight: usize,
    pub bias: usize,
    pub slope: usize,
    pub in_c: usize,
    pub out_c: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct DenseLayer {
    pub name: String,
    pub weight: usize,
    pub bias: usize,
    pub slope: Option<usize>,
    pub inputs: usize,
    pub outputs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct PriorStage {
    pub convs: Vec<ConvLayer>,
    pub dense: Vec<DenseLayer>,
    pub levels: Vec<usize>,
}

/// A validated configuration resolved into concrete layers and a flat,
/// ordered parameter list.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Architecture {
    pub shared: Vec<ConvLayer>,
    pub prior: Option<PriorStage>,
    pub density: Vec<ConvLayer>,
    pub fusion: Vec<ConvLayer>,
    pub upsample: Vec<DeconvLayer>,
    pub output: ConvLayer,
    pub params: Vec<ParamSpec>,
}

struct Builder {
    params: Vec<ParamSpec>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, kind: ParamKind, fan_in: usize, rectified: bool) -> usize {
        self.params.push(ParamSpec {
            name,
            shape,
            kind,
            fan_in,
            rectified,
        });
        self.params.len() - 1
    }

    fn conv(&mut self, name: String, in_c: usize, out_c: usize, kernel: usize, pool: bool, rectified: bool) -> ConvLayer {
        let fan_in = in_c * kernel * kernel;
        let weight = self.push(
            format!("{name}.weight"),
            vec![out_c, in_c, kernel, kernel],
            ParamKind::Weight,
            fan_in,
            rectified,
        );
        let bias = self.push(format!("{name}.bias"), vec![out_c], ParamKind::Bias, fan_in, rectified);
        let slope = rectified
            .then(|| self.push(format!("{name}.slope"), vec![1], ParamKind::Slope, fan_in, rectified));
        ConvLayer {
            name,
            weight,
            bias,
            slope,
            in_c,
            out_c,
            kernel,
            pool,
        }
    }

    fn stage(&mut self, stage: &str, specs: &[ConvSpec], cfg: &NetworkConfig, mut in_c: usize) -> Vec<ConvLayer> {
        specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let out_c = cfg.scaled(s.maps);
                let layer = self.conv(format!("{stage}.conv{i}"), in_c, out_c, s.kernel, s.pool, true);
                in_c = out_c;
                layer
            })
            .collect()
    }
}

impl Architecture {
    pub fn new(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder { params: Vec::new() };

        let shared = b.stage("shared", &cfg.shared, cfg, cfg.input_channels);
        let shared_c = shared.last().map_or(cfg.input_channels, |l| l.out_c);

        let prior = if cfg.single_stage {
            None
        } else {
            let convs = b.stage("prior", &cfg.prior_convs, cfg, shared_c);
            let feat_c = convs.last().map_or(shared_c, |l| l.out_c);
            let bins: usize = cfg.spp_levels.iter().map(|n| n * n).sum();
            let mut inputs = feat_c * bins;
            let last = cfg.prior_fc.len() - 1;
            let dense = cfg
                .prior_fc
                .iter()
                .enumerate()
                .map(|(i, &width)| {
                    let hidden = i < last;
                    let outputs = if hidden { cfg.scaled(width) } else { width };
                    let name = format!("prior.fc{i}");
                    let weight = b.push(format!("{name}.weight"), vec![outputs, inputs], ParamKind::Weight, inputs, hidden);
                    let bias = b.push(format!("{name}.bias"), vec![outputs], ParamKind::Bias, inputs, hidden);
                    let slope = hidden.then(|| b.push(format!("{name}.slope"), vec![1], ParamKind::Slope, inputs, true));
                    let layer = DenseLayer {
                        name,
                        weight,
                        bias,
                        slope,
                        inputs,
                        outputs,
                    };
                    inputs = outputs;
                    layer
                })
                .collect();
            Some(PriorStage {
                convs,
                dense,
                levels: cfg.spp_levels.clone(),
            })
        };

        let density = b.stage("density", &cfg.density_convs, cfg, shared_c);
        let density_c = density.last().map_or(shared_c, |l| l.out_c);
        let prior_c = prior
            .as_ref()
            .and_then(|p| p.convs.last())
            .map_or(0, |l| l.out_c);

        let fusion = b.stage("fusion", &cfg.fusion_convs, cfg, density_c + prior_c);
        let mut in_c = fusion.last().map_or(density_c + prior_c, |l| l.out_c);

        let mut upsample = Vec::with_capacity(cfg.upsample.len());
        for (i, &maps) in cfg.upsample.iter().enumerate() {
            let out_c = cfg.scaled(maps);
            let name = format!("upsample.deconv{i}");
            let k = UPSAMPLE_KERNEL;
            // Each output pixel of a stride-2 transposed conv sees k*k/4 taps per input map.
            let fan_in = in_c * k * k / (UPSAMPLE_STRIDE * UPSAMPLE_STRIDE);
            let weight = b.push(format!("{name}.weight"), vec![in_c, out_c, k, k], ParamKind::Weight, fan_in, true);
            let bias = b.push(format!("{name}.bias"), vec![out_c], ParamKind::Bias, fan_in, true);
            let slope = b.push(format!("{name}.slope"), vec![1], ParamKind::Slope, fan_in, true);
            upsample.push(DeconvLayer {
                name,
                weight,
                bias,
                slope,
                in_c,
                out_c,
            });
            in_c = out_c;
        }

        let output = b.conv("output".into(), in_c, 1, 1, false, false);
        Ok(Self {
            shared,
            prior,
            density,
            fusion,
            upsample,
            output,
            params: b.params,
        })
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }
}
