use serde::{Deserialize, Serialize};

use super::ModelError;

/// Architecture hyperparameters of the dense-block U-Net.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Output channels of the initial convolution.
    pub initial_channels: usize,
    /// Channels added by each dense block.
    pub growth: usize,
    pub dense_per_level: usize,
    pub levels: usize,
    /// Transition 1x1 conv output = floor(input * compression).
    pub compression: f64,
    /// Residual channels per decoding layer, deepest first. `None` mirrors the
    /// encoder's transition outputs.
    pub decoder_channels: Option<Vec<usize>>,
    pub kernel: usize,
    pub leaky_slope: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 1,
            initial_channels: 16,
            growth: 16,
            dense_per_level: 2,
            levels: 2,
            compression: 0.5,
            decoder_channels: None,
            kernel: 3,
            leaky_slope: 0.1,
        }
    }
}

impl UNetConfig {
    /// Small network used for desk-scale experiments and gradient checks.
    pub fn tiny(initial_channels: usize, growth: usize) -> Self {
        UNetConfig {
            initial_channels,
            growth,
            ..Default::default()
        }
    }

    /// Spatial sizes must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << self.levels
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.in_channels != 1 {
            return bad("only single-channel input is supported");
        }
        if self.initial_channels == 0 || self.growth == 0 {
            return bad("channel counts must be positive");
        }
        if self.levels == 0 || self.dense_per_level == 0 {
            return bad("levels and dense blocks per level must be positive");
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return bad("compression must lie in (0, 1]");
        }
        if self.kernel.is_multiple_of(2) {
            return bad("kernel size must be odd");
        }
        if (self.leaky_slope - super::ops::LEAKY_SLOPE).abs() > 1e-12 {
            return bad("leaky slope is fixed at 0.1");
        }
        let plan = ChannelPlan::derive(self);
        if plan.transition.contains(&0) {
            return bad("transition produces zero channels");
        }
        if let Some(d) = &self.decoder_channels {
            if d.len() != self.levels || d.contains(&0) {
                return bad("decoder_channels needs one positive entry per level");
            }
        }
        Ok(())
    }
}

/// Channel counts implied by a config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChannelPlan {
    pub initial: usize,
    /// Per level: channel count after each dense block, starting with the input.
    pub dense_trace: Vec<Vec<usize>>,
    /// Per level: transition output channels.
    pub transition: Vec<usize>,
    /// Per decoding layer, deepest first: (input, residual/output) channels.
    pub decoder: Vec<(usize, usize)>,
    /// Input channels of the final 1x1 convolution.
    pub head_in: usize,
}

impl ChannelPlan {
    pub fn derive(cfg: &UNetConfig) -> Self {
        let mut c = cfg.initial_channels;
        let mut dense_trace = Vec::new();
        let mut transition = Vec::new();
        for _ in 0..cfg.levels {
            let trace: Vec<usize> = (0..=cfg.dense_per_level).map(|d| c + d * cfg.growth).collect();
            let skip = *trace.last().unwrap();
            dense_trace.push(trace);
            c = (skip as f64 * cfg.compression).floor() as usize;
            transition.push(c);
        }
        let dec_ch: Vec<usize> = match &cfg.decoder_channels {
            Some(d) => d.clone(),
            None => transition.iter().rev().copied().collect(),
        };
        let mut decoder = Vec::new();
        let mut input = *transition.last().unwrap();
        for (j, &out) in dec_ch.iter().enumerate() {
            decoder.push((input, out));
            // next decoder consumes this output concatenated with the skip one level up
            let level = cfg.levels - 1 - j;
            input = out + dense_trace[level].last().unwrap();
        }
        ChannelPlan {
            initial: cfg.initial_channels,
            dense_trace,
            transition,
            decoder,
            head_in: input,
        }
    }
}

/// A convolution, optionally followed by leaky ReLU and batch norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub act_bn: bool,
    /// Index of the weight tensor in the parameter list; bias follows, then
    /// gamma, beta, running mean and running variance when `act_bn`.
    pub first: usize,
}

impl ConvSpec {
    pub fn tensor_count(&self) -> usize {
        if self.act_bn {
            6
        } else {
            2
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLevel {
    pub dense: Vec<ConvSpec>,
    pub transition: ConvSpec,
}

#[derive(Debug, Clone)]
pub struct DecoderLevel {
    pub res1: ConvSpec,
    pub res2: ConvSpec,
    pub projection: Option<ConvSpec>,
    pub up: ConvSpec,
}

/// Layer graph with parameter slots, derived from a config.
#[derive(Debug, Clone)]
pub struct Architecture {
    pub initial: ConvSpec,
    pub encoder: Vec<EncoderLevel>,
    /// Deepest first.
    pub decoder: Vec<DecoderLevel>,
    pub head: ConvSpec,
    /// `(name, shape, learnable)` of every tensor, in parameter order.
    pub slots: Vec<(String, Vec<usize>, bool)>,
}

impl Architecture {
    pub fn new(cfg: &UNetConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let plan = ChannelPlan::derive(cfg);
        let k = cfg.kernel;
        let mut slots = Vec::new();
        let mut unit = |name: String, cin: usize, cout: usize, k: usize, act_bn: bool| {
            let first = slots.len();
            slots.push((format!("{name}.weight"), vec![cout, cin, k, k], true));
            slots.push((format!("{name}.bias"), vec![cout], true));
            if act_bn {
                slots.push((format!("{name}.bn.gamma"), vec![cout], true));
                slots.push((format!("{name}.bn.beta"), vec![cout], true));
                slots.push((format!("{name}.bn.running_mean"), vec![cout], false));
                slots.push((format!("{name}.bn.running_var"), vec![cout], false));
            }
            ConvSpec {
                cin,
                cout,
                k,
                act_bn,
                first,
            }
        };

        let initial = unit("initial".into(), cfg.in_channels, plan.initial, k, true);
        let mut encoder = Vec::new();
        for (l, trace) in plan.dense_trace.iter().enumerate() {
            let dense = trace
                .windows(2)
                .enumerate()
                .map(|(d, w)| unit(format!("enc{l}.dense{d}"), w[0], w[1] - w[0], k, true))
                .collect();
            let transition = unit(
                format!("enc{l}.transition"),
                *trace.last().unwrap(),
                plan.transition[l],
                1,
                true,
            );
            encoder.push(EncoderLevel { dense, transition });
        }
        let mut decoder = Vec::new();
        for (j, &(cin, cout)) in plan.decoder.iter().enumerate() {
            let level = cfg.levels - 1 - j;
            let res1 = unit(format!("dec{level}.res.conv1"), cin, cout, k, true);
            let res2 = unit(format!("dec{level}.res.conv2"), cout, cout, k, true);
            let projection = (cin != cout).then(|| unit(format!("dec{level}.res.projection"), cin, cout, 1, false));
            let up = unit(format!("dec{level}.up.conv"), cout, cout, k, true);
            decoder.push(DecoderLevel {
                res1,
                res2,
                projection,
                up,
            });
        }
        let head = unit("head".into(), plan.head_in, 1, 1, false);
        Ok(Architecture {
            initial,
            encoder,
            decoder,
            head,
            slots,
        })
    }
}
