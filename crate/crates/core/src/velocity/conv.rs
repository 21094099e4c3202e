//! Dense feature maps and the convolution / resampling layers of the neural
//! velocity field, each with a hand-written backward pass.
//!
//! Work is split across output (or input) channels only, so every sum is
//! accumulated in a fixed order and results do not depend on the thread count.

use rayon::prelude::*;

/// `channels x D x H x W` feature map, planar by channel.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Feature {
    pub ch: usize,
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl Feature {
    pub fn zeros(ch: usize, dims: [usize; 3]) -> Self {
        Feature {
            ch,
            dims,
            data: vec![0.0; ch * dims.iter().product::<usize>()],
        }
    }

    pub fn plane(&self) -> usize {
        self.dims.iter().product()
    }

    /// Appends a constant channel.
    pub fn with_constant_channel(&self, value: f64) -> Feature {
        let mut data = self.data.clone();
        data.extend(std::iter::repeat_n(value, self.plane()));
        Feature {
            ch: self.ch + 1,
            dims: self.dims,
            data,
        }
    }

    pub fn drop_last_channel(mut self) -> Feature {
        self.ch -= 1;
        self.data.truncate(self.ch * self.plane());
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub tanh: bool,
    /// Offset of the weights in the flat parameter vector; biases follow them.
    pub offset: usize,
}

/// Range of output positions whose tap `k` lands inside an input of extent `n`.
fn valid_range(out_n: usize, n: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let (k, pad, stride, n) = (k as isize, pad as isize, stride as isize, n as isize);
    let lo = if pad > k { (pad - k + stride - 1) / stride } else { 0 };
    let top = n - 1 + pad - k;
    let hi = if top < 0 { 0 } else { top / stride + 1 };
    (lo as usize, (hi as usize).min(out_n).max(lo as usize))
}

impl Conv {
    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn weight_count(&self) -> usize {
        self.cout * self.cin * self.kernel_volume()
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.cout
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.kernel_volume()
    }

    pub fn out_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        std::array::from_fn(|a| (dims[a] + 2 * self.pad[a] - self.kernel[a]) / self.stride[a] + 1)
    }

    fn weights<'a>(&self, params: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        let w = &params[self.offset..self.offset + self.weight_count()];
        let b = &params[self.offset + self.weight_count()..self.offset + self.param_count()];
        (w, b)
    }

    /// Visits every (output row, input row, tap column range) triple for one
    /// input/output plane pair and kernel tap.
    #[inline]
    fn for_each_row(
        &self,
        in_dims: [usize; 3],
        out_dims: [usize; 3],
        tap: [usize; 3],
        mut f: impl FnMut(usize, usize, usize, usize),
    ) {
        let [kz, ky, kx] = tap;
        let (zlo, zhi) = valid_range(out_dims[0], in_dims[0], kz, self.stride[0], self.pad[0]);
        let (ylo, yhi) = valid_range(out_dims[1], in_dims[1], ky, self.stride[1], self.pad[1]);
        let (xlo, xhi) = valid_range(out_dims[2], in_dims[2], kx, self.stride[2], self.pad[2]);
        if xlo >= xhi {
            return;
        }
        for oz in zlo..zhi {
            let iz = oz * self.stride[0] + kz - self.pad[0];
            for oy in ylo..yhi {
                let iy = oy * self.stride[1] + ky - self.pad[1];
                let out_row = (oz * out_dims[1] + oy) * out_dims[2];
                let in_row = (iz * in_dims[1] + iy) * in_dims[2];
                f(out_row, in_row, xlo, xhi);
            }
        }
    }

    fn taps(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let [kd, kh, kw] = self.kernel;
        (0..kd).flat_map(move |z| (0..kh).flat_map(move |y| (0..kw).map(move |x| [z, y, x])))
    }

    pub fn forward(&self, params: &[f64], x: &Feature) -> Feature {
        debug_assert_eq!(x.ch, self.cin);
        let (w, b) = self.weights(params);
        let od = self.out_dims(x.dims);
        let mut out = Feature::zeros(self.cout, od);
        let (ip, op, kv) = (x.plane(), out.plane(), self.kernel_volume());
        let (sx, px) = (self.stride[2], self.pad[2]);
        out.data.par_chunks_mut(op).enumerate().for_each(|(o, dst)| {
            dst.fill(b[o]);
            for i in 0..self.cin {
                let src = &x.data[i * ip..(i + 1) * ip];
                for (t, tap) in self.taps().enumerate() {
                    let wt = w[(o * self.cin + i) * kv + t];
                    let kx = tap[2];
                    self.for_each_row(x.dims, od, tap, |orow, irow, lo, hi| {
                        for ox in lo..hi {
                            dst[orow + ox] += wt * src[irow + ox * sx + kx - px];
                        }
                    });
                }
            }
            if self.tanh {
                dst.iter_mut().for_each(|v| *v = v.tanh());
            }
        });
        out
    }

    /// Backward pass given the layer input `x`, its (post-activation) output
    /// `y` and the output cotangent. Writes parameter gradients into
    /// `grad_params` (the full parameter-shaped buffer) and returns the input
    /// cotangent.
    pub fn backward(
        &self,
        params: &[f64],
        x: &Feature,
        y: &Feature,
        gy: &Feature,
        grad_params: &mut [f64],
    ) -> Feature {
        let (w, _) = self.weights(params);
        let od = y.dims;
        let (ip, op, kv) = (x.plane(), y.plane(), self.kernel_volume());
        let (sx, px) = (self.stride[2], self.pad[2]);

        let gpre: Vec<f64> = if self.tanh {
            gy.data
                .iter()
                .zip(&y.data)
                .map(|(g, v)| g * (1.0 - v * v))
                .collect()
        } else {
            gy.data.clone()
        };

        let (gw, rest) = grad_params[self.offset..self.offset + self.param_count()]
            .split_at_mut(self.weight_count());
        for (o, gb) in rest.iter_mut().enumerate() {
            *gb += gpre[o * op..(o + 1) * op].iter().sum::<f64>();
        }
        gw.par_chunks_mut(self.cin * kv)
            .enumerate()
            .for_each(|(o, gwo)| {
                let g = &gpre[o * op..(o + 1) * op];
                for i in 0..self.cin {
                    let src = &x.data[i * ip..(i + 1) * ip];
                    for (t, tap) in self.taps().enumerate() {
                        let kx = tap[2];
                        let mut acc = 0.0;
                        self.for_each_row(x.dims, od, tap, |orow, irow, lo, hi| {
                            for ox in lo..hi {
                                acc += g[orow + ox] * src[irow + ox * sx + kx - px];
                            }
                        });
                        gwo[i * kv + t] += acc;
                    }
                }
            });

        let mut gx = Feature::zeros(self.cin, x.dims);
        gx.data.par_chunks_mut(ip).enumerate().for_each(|(i, dst)| {
            for o in 0..self.cout {
                let g = &gpre[o * op..(o + 1) * op];
                for (t, tap) in self.taps().enumerate() {
                    let wt = w[(o * self.cin + i) * kv + t];
                    let kx = tap[2];
                    self.for_each_row(x.dims, od, tap, |orow, irow, lo, hi| {
                        for ox in lo..hi {
                            dst[irow + ox * sx + kx - px] += wt * g[orow + ox];
                        }
                    });
                }
            }
        });
        gx
    }
}

fn upsample_index(i: usize, src: usize, dst: usize) -> usize {
    if src == dst {
        i
    } else {
        (i / 2).min(src - 1)
    }
}

/// Nearest-neighbour upsampling by two (or identity on axes whose extent is unchanged).
pub(crate) fn upsample(x: &Feature, dims: [usize; 3]) -> Feature {
    let mut out = Feature::zeros(x.ch, dims);
    let (ip, op) = (x.plane(), out.plane());
    for c in 0..x.ch {
        for z in 0..dims[0] {
            let sz = upsample_index(z, x.dims[0], dims[0]);
            for y in 0..dims[1] {
                let sy = upsample_index(y, x.dims[1], dims[1]);
                for xx in 0..dims[2] {
                    let sxx = upsample_index(xx, x.dims[2], dims[2]);
                    out.data[c * op + (z * dims[1] + y) * dims[2] + xx] =
                        x.data[c * ip + (sz * x.dims[1] + sy) * x.dims[2] + sxx];
                }
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(g: &Feature, src_dims: [usize; 3]) -> Feature {
    let mut out = Feature::zeros(g.ch, src_dims);
    let (ip, op) = (out.plane(), g.plane());
    let dims = g.dims;
    for c in 0..g.ch {
        for z in 0..dims[0] {
            let sz = upsample_index(z, src_dims[0], dims[0]);
            for y in 0..dims[1] {
                let sy = upsample_index(y, src_dims[1], dims[1]);
                for xx in 0..dims[2] {
                    let sxx = upsample_index(xx, src_dims[2], dims[2]);
                    out.data[c * ip + (sz * src_dims[1] + sy) * src_dims[2] + sxx] +=
                        g.data[c * op + (z * dims[1] + y) * dims[2] + xx];
                }
            }
        }
    }
    out
}
