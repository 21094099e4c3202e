use serde::{Deserialize, Serialize};

use super::conv::{upsample, upsample_backward, Conv, Feature};
use super::TimeMode;
use crate::error::{Error, Result};

const MAX_KERNEL: usize = 15;
const MAX_LEVELS: usize = 8;
const MAX_WIDTH: usize = 1024;
const MAX_DEPTH: usize = 32;

/// Layout of the convolutional velocity network.
///
/// The encoder halves the resolution once per entry of `widths`, the
/// bottleneck runs `bottleneck_depth` convolutions at the coarsest scale (with
/// time as an extra constant channel when the field is time-dependent) and the
/// decoder mirrors the encoder with nearest upsampling followed by a
/// convolution. A final linear convolution produces one channel per axis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuralFieldSpec {
    pub widths: Vec<usize>,
    pub bottleneck_depth: usize,
    pub kernel: usize,
}

impl Default for NeuralFieldSpec {
    fn default() -> Self {
        NeuralFieldSpec {
            widths: vec![16, 32],
            bottleneck_depth: 2,
            kernel: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Pre {
    None,
    AppendTime,
    /// Upsample to the recorded extents first.
    Upsample([usize; 3]),
}

#[derive(Clone, Debug, PartialEq)]
struct Stage {
    pre: Pre,
    conv: Conv,
}

/// A built network for one grid size.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Network {
    stages: Vec<Stage>,
    param_count: usize,
}

/// Intermediate values of one forward pass.
pub(crate) struct Tape {
    inputs: Vec<Feature>,
    outputs: Vec<Feature>,
}

impl Network {
    pub fn build(
        spec: &NeuralFieldSpec,
        dims: [usize; 3],
        ndim: usize,
        time_mode: TimeMode,
    ) -> Result<Self> {
        if spec.widths.is_empty() || spec.widths.contains(&0) {
            return Err(Error::Parameter("network needs at least one level of non-zero width".into()));
        }
        if spec.kernel % 2 == 0 || spec.kernel > MAX_KERNEL {
            return Err(Error::Parameter(format!("kernel size must be odd and at most {MAX_KERNEL}")));
        }
        if spec.widths.len() > MAX_LEVELS || spec.widths.iter().any(|&w| w > MAX_WIDTH) || spec.bottleneck_depth > MAX_DEPTH {
            return Err(Error::Parameter(format!(
                "network limited to {MAX_LEVELS} levels of width <= {MAX_WIDTH} and a bottleneck depth <= {MAX_DEPTH}"
            )));
        }
        let k = spec.kernel;
        let half = k / 2;
        let (kernel, pad) = if ndim == 2 {
            ([1, k, k], [0, half, half])
        } else {
            ([k, k, k], [half, half, half])
        };
        let down = if ndim == 2 { [1, 2, 2] } else { [2, 2, 2] };
        let time_ch = usize::from(time_mode == TimeMode::TimeInjected);

        let mut stages = Vec::new();
        let mut offset = 0;
        let mut push = |stages: &mut Vec<Stage>, pre, cin, cout, stride, tanh| {
            let conv = Conv {
                cin,
                cout,
                kernel,
                stride,
                pad,
                tanh,
                offset,
            };
            offset += conv.param_count();
            stages.push(Stage { pre, conv });
        };

        let mut level_dims = vec![dims];
        let mut ch = ndim;
        for &w in &spec.widths {
            push(&mut stages, Pre::None, ch, w, down, true);
            let last = *level_dims.last().unwrap();
            level_dims.push(stages.last().unwrap().conv.out_dims(last));
            ch = w;
        }
        for _ in 0..spec.bottleneck_depth {
            let pre = if time_ch == 1 { Pre::AppendTime } else { Pre::None };
            push(&mut stages, pre, ch + time_ch, ch, [1, 1, 1], true);
        }
        for l in (0..spec.widths.len()).rev() {
            let cout = spec.widths[l.saturating_sub(1)];
            push(&mut stages, Pre::Upsample(level_dims[l]), ch, cout, [1, 1, 1], true);
            ch = cout;
        }
        push(&mut stages, Pre::None, ch, ndim, [1, 1, 1], false);

        Ok(Network {
            stages,
            param_count: offset,
        })
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    /// `(offset, count, fan_in)` of each convolution's weights, and whether
    /// it is the output layer.
    pub fn weight_blocks(&self) -> impl Iterator<Item = (usize, usize, usize, bool)> + '_ {
        let last = self.stages.len() - 1;
        self.stages.iter().enumerate().map(move |(i, s)| {
            (s.conv.offset, s.conv.weight_count(), s.conv.fan_in(), i == last)
        })
    }

    pub fn forward(&self, params: &[f64], input: Feature, t: f64) -> (Feature, Tape) {
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.stages.len()),
            outputs: Vec::with_capacity(self.stages.len()),
        };
        let mut h = input;
        for stage in &self.stages {
            let x = match stage.pre {
                Pre::None => h,
                Pre::AppendTime => h.with_constant_channel(t),
                Pre::Upsample(dims) => upsample(&h, dims),
            };
            let y = stage.conv.forward(params, &x);
            tape.inputs.push(x);
            tape.outputs.push(y.clone());
            h = y;
        }
        (h, tape)
    }

    /// Returns the input cotangent and accumulates parameter gradients.
    pub fn backward(&self, params: &[f64], tape: &Tape, cot: Feature, grad: &mut [f64]) -> Feature {
        let mut g = cot;
        for (i, stage) in self.stages.iter().enumerate().rev() {
            let gx = stage
                .conv
                .backward(params, &tape.inputs[i], &tape.outputs[i], &g, grad);
            g = match stage.pre {
                Pre::None => gx,
                Pre::AppendTime => gx.drop_last_channel(),
                Pre::Upsample(_) => {
                    let src = if i == 0 { tape.inputs[0].dims } else { tape.outputs[i - 1].dims };
                    upsample_backward(&gx, src)
                }
            };
        }
        g
    }
}
