//! Valid, stride-1, bias-free 3D convolution followed by ReLU.

use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};

/// Work (multiply-adds) below which the kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_maps: usize,
    pub out_maps: usize,
    pub kernel: [usize; 3],
}

impl ConvSpec {
    pub fn new(in_maps: usize, out_maps: usize, kernel: [usize; 3]) -> Result<Self> {
        if in_maps == 0 || out_maps == 0 {
            return Err(Error::config(
                "convolution needs at least one input and output map",
            ));
        }
        if kernel.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::config(format!(
                "kernel extents must be odd and >= 1, got {kernel:?}"
            )));
        }
        Ok(Self {
            in_maps,
            out_maps,
            kernel,
        })
    }

    pub fn kernel_dims(&self) -> [usize; 5] {
        let [q, r, s] = self.kernel;
        [self.out_maps, self.in_maps, q, r, s]
    }

    pub fn fan_in(&self) -> usize {
        self.in_maps * self.kernel.iter().product::<usize>()
    }

    /// Spatial extents after a valid convolution, or `None` if the input is too small.
    pub fn output_extents(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            if input[a] < self.kernel[a] {
                return None;
            }
            out[a] = input[a] - self.kernel[a] + 1;
        }
        Some(out)
    }
}

fn check_shapes(input: &Tensor, spec: &ConvSpec, kernels: &Tensor) -> Result<[usize; 3]> {
    input.expect_rank(4, "conv3d input")?;
    kernels.expect_dims(&spec.kernel_dims(), "conv3d kernels")?;
    let d = input.dims();
    if d[0] != spec.in_maps {
        return Err(Error::shape(format!(
            "conv3d: input has {} maps, spec expects {}",
            d[0], spec.in_maps
        )));
    }
    spec.output_extents([d[1], d[2], d[3]]).ok_or_else(|| {
        Error::shape(format!(
            "conv3d: input extents {:?} smaller than kernel {:?}",
            &d[1..],
            spec.kernel
        ))
    })
}

/// `out[j,x,y,z] = ReLU(sum_{k,q,r,s} w[j,k,q,r,s] * in[k,x+q,y+r,z+s])`.
pub fn conv3d_forward(input: &Tensor, spec: &ConvSpec, kernels: &Tensor) -> Result<Tensor> {
    let [ox, oy, oz] = check_shapes(input, spec, kernels)?;
    let [_, ix, iy, iz] = <[usize; 4]>::try_from(input.dims()).expect("rank 4");
    let [q_n, r_n, s_n] = spec.kernel;
    let in_map = ix * iy * iz;
    let out_map = ox * oy * oz;
    let k_per_out = spec.in_maps * q_n * r_n * s_n;
    let inp = input.data();
    let w = kernels.data();

    let mut out = Tensor::zeros(&[spec.out_maps, ox, oy, oz]);
    let fill = |j: usize, dst: &mut [f64]| {
        let wj = &w[j * k_per_out..(j + 1) * k_per_out];
        for k in 0..spec.in_maps {
            let src = &inp[k * in_map..(k + 1) * in_map];
            for q in 0..q_n {
                for r in 0..r_n {
                    for s in 0..s_n {
                        let wv = wj[((k * q_n + q) * r_n + r) * s_n + s];
                        if wv == 0.0 {
                            continue;
                        }
                        for x in 0..ox {
                            for y in 0..oy {
                                let o = (x * oy + y) * oz;
                                let i = ((x + q) * iy + (y + r)) * iz + s;
                                let drow = &mut dst[o..o + oz];
                                let srow = &src[i..i + oz];
                                for (d, v) in drow.iter_mut().zip(srow) {
                                    *d += wv * v;
                                }
                            }
                        }
                    }
                }
            }
        }
        for v in dst.iter_mut() {
            *v = v.max(0.0);
        }
    };

    let work = out_map * k_per_out * spec.out_maps;
    if work >= PAR_THRESHOLD {
        out.data_mut()
            .par_chunks_mut(out_map)
            .enumerate()
            .for_each(|(j, dst)| fill(j, dst));
    } else {
        out.data_mut()
            .chunks_mut(out_map)
            .enumerate()
            .for_each(|(j, dst)| fill(j, dst));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    /// `None` when the caller asked to skip the input gradient.
    pub input: Option<Tensor>,
    pub kernels: Tensor,
}

/// Gradients of [`conv3d_forward`]. `output` is the forward result; its
/// positive entries form the ReLU mask.
pub fn conv3d_backward(
    input: &Tensor,
    spec: &ConvSpec,
    kernels: &Tensor,
    output: &Tensor,
    grad_out: &Tensor,
    need_input_grad: bool,
) -> Result<ConvGrads> {
    let [ox, oy, oz] = check_shapes(input, spec, kernels)?;
    let out_dims = [spec.out_maps, ox, oy, oz];
    output.expect_dims(&out_dims, "conv3d_backward output")?;
    grad_out.expect_dims(&out_dims, "conv3d_backward grad_out")?;
    let [_, ix, iy, iz] = <[usize; 4]>::try_from(input.dims()).expect("rank 4");
    let [q_n, r_n, s_n] = spec.kernel;
    let in_map = ix * iy * iz;
    let out_map = ox * oy * oz;
    let k_per_out = spec.in_maps * q_n * r_n * s_n;
    let inp = input.data();
    let w = kernels.data();

    let masked: Vec<f64> = grad_out
        .data()
        .iter()
        .zip(output.data())
        .map(|(&g, &o)| if o > 0.0 { g } else { 0.0 })
        .collect();

    let mut grad_k = Tensor::zeros(&spec.kernel_dims());
    let kernel_grad = |j: usize, dst: &mut [f64]| {
        let gj = &masked[j * out_map..(j + 1) * out_map];
        if gj.iter().all(|&g| g == 0.0) {
            return;
        }
        for k in 0..spec.in_maps {
            let src = &inp[k * in_map..(k + 1) * in_map];
            for q in 0..q_n {
                for r in 0..r_n {
                    for s in 0..s_n {
                        let mut acc = 0.0;
                        for x in 0..ox {
                            for y in 0..oy {
                                let o = (x * oy + y) * oz;
                                let i = ((x + q) * iy + (y + r)) * iz + s;
                                acc += gj[o..o + oz]
                                    .iter()
                                    .zip(&src[i..i + oz])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            }
                        }
                        dst[((k * q_n + q) * r_n + r) * s_n + s] = acc;
                    }
                }
            }
        }
    };
    let work = out_map * k_per_out * spec.out_maps;
    if work >= PAR_THRESHOLD {
        grad_k
            .data_mut()
            .par_chunks_mut(k_per_out)
            .enumerate()
            .for_each(|(j, dst)| kernel_grad(j, dst));
    } else {
        grad_k
            .data_mut()
            .chunks_mut(k_per_out)
            .enumerate()
            .for_each(|(j, dst)| kernel_grad(j, dst));
    }

    let grad_in = if need_input_grad {
        let mut gi = Tensor::zeros(input.dims());
        let input_grad = |k: usize, dst: &mut [f64]| {
            for j in 0..spec.out_maps {
                let gj = &masked[j * out_map..(j + 1) * out_map];
                let wj = &w[j * k_per_out..(j + 1) * k_per_out];
                for q in 0..q_n {
                    for r in 0..r_n {
                        for s in 0..s_n {
                            let wv = wj[((k * q_n + q) * r_n + r) * s_n + s];
                            if wv == 0.0 {
                                continue;
                            }
                            for x in 0..ox {
                                for y in 0..oy {
                                    let o = (x * oy + y) * oz;
                                    let i = ((x + q) * iy + (y + r)) * iz + s;
                                    for (d, g) in dst[i..i + oz].iter_mut().zip(&gj[o..o + oz]) {
                                        *d += wv * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        };
        if work >= PAR_THRESHOLD {
            gi.data_mut()
                .par_chunks_mut(in_map)
                .enumerate()
                .for_each(|(k, dst)| input_grad(k, dst));
        } else {
            gi.data_mut()
                .chunks_mut(in_map)
                .enumerate()
                .for_each(|(k, dst)| input_grad(k, dst));
        }
        Some(gi)
    } else {
        None
    };

    Ok(ConvGrads {
        input: grad_in,
        kernels: grad_k,
    })
}
