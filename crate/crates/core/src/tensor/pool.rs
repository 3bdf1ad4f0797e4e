use super::Tensor;
use crate::error::{Error, Result};

/// Result of a max pooling pass. `argmax[i]` is the linear input index that
/// produced `output.data()[i]`.
#[derive(Debug, Clone)]
pub struct Pooled {
    pub output: Tensor,
    pub argmax: Vec<usize>,
}

/// Non-overlapping cubic max pooling over `[C, X, Y, Z]` with stride equal to
/// the window. Trailing planes that do not fill a window are dropped; ties go
/// to the lowest linear index.
pub fn maxpool3d(input: &Tensor, window: usize) -> Result<Pooled> {
    input.expect_rank(4, "maxpool3d input")?;
    if window == 0 {
        return Err(Error::config("pooling window must be >= 1"));
    }
    let [c, ix, iy, iz] = <[usize; 4]>::try_from(input.dims()).expect("rank 4");
    if ix < window || iy < window || iz < window {
        return Err(Error::shape(format!(
            "maxpool3d: extents {:?} smaller than window {window}",
            &input.dims()[1..]
        )));
    }
    let (ox, oy, oz) = (ix / window, iy / window, iz / window);
    let mut output = Tensor::zeros(&[c, ox, oy, oz]);
    let mut argmax = vec![0usize; output.len()];
    let src = input.data();
    let dst = output.data_mut();
    let mut o = 0;
    for m in 0..c {
        let base = m * ix * iy * iz;
        for x in 0..ox {
            for y in 0..oy {
                for z in 0..oz {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for dx in 0..window {
                        for dy in 0..window {
                            for dz in 0..window {
                                let i = base
                                    + ((x * window + dx) * iy + (y * window + dy)) * iz
                                    + z * window
                                    + dz;
                                if src[i] > best || best_i == usize::MAX {
                                    best = src[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    dst[o] = best;
                    argmax[o] = best_i;
                    o += 1;
                }
            }
        }
    }
    Ok(Pooled { output, argmax })
}

/// Route each output gradient to the input element that won the max.
pub fn maxpool3d_backward(
    grad_out: &Tensor,
    argmax: &[usize],
    input_dims: &[usize],
) -> Result<Tensor> {
    if grad_out.len() != argmax.len() {
        return Err(Error::shape(format!(
            "maxpool3d_backward: {} gradients for {} argmax entries",
            grad_out.len(),
            argmax.len()
        )));
    }
    let mut gi = Tensor::zeros(input_dims);
    let n = gi.len();
    let g = gi.data_mut();
    for (&i, &v) in argmax.iter().zip(grad_out.data()) {
        if i >= n {
            return Err(Error::shape(format!("argmax index {i} out of range {n}")));
        }
        g[i] += v;
    }
    Ok(gi)
}

/// Per-map maximum over all spatial positions: `[J, ...] -> [J]`.
pub fn global_maxpool(input: &Tensor) -> Result<Pooled> {
    if input.rank() < 2 {
        return Err(Error::shape(format!(
            "global_maxpool: need [maps, ...], got {:?}",
            input.dims()
        )));
    }
    let maps = input.dims()[0];
    let per = input.len() / maps;
    let mut output = Tensor::zeros(&[maps]);
    let mut argmax = Vec::with_capacity(maps);
    for (j, chunk) in input.data().chunks(per).enumerate() {
        let (mut bi, mut bv) = (0, chunk[0]);
        for (i, &v) in chunk.iter().enumerate().skip(1) {
            if v > bv {
                bi = i;
                bv = v;
            }
        }
        output.data_mut()[j] = bv;
        argmax.push(j * per + bi);
    }
    Ok(Pooled { output, argmax })
}

pub fn global_maxpool_backward(
    grad_out: &Tensor,
    argmax: &[usize],
    input_dims: &[usize],
) -> Result<Tensor> {
    maxpool3d_backward(grad_out, argmax, input_dims)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_picks_first_index() {
        let input = Tensor::full(&[1, 2, 2, 2], 3.0);
        let p = maxpool3d(&input, 2).unwrap();
        assert_eq!(p.output.data(), &[3.0]);
        assert_eq!(p.argmax, vec![0]);
    }

    #[test]
    fn block_of_one_to_eight() {
        let input = Tensor::from_vec(&[1, 2, 2, 2], (1..=8).map(f64::from).collect()).unwrap();
        let p = maxpool3d(&input, 2).unwrap();
        assert_eq!(p.output.data(), &[8.0]);
        assert_eq!(p.argmax, vec![7]);
    }

    #[test]
    fn odd_extent_drops_trailing_plane() {
        let input = Tensor::zeros(&[2, 5, 4, 3]);
        let p = maxpool3d(&input, 2).unwrap();
        assert_eq!(p.output.dims(), &[2, 2, 2, 1]);
        assert!(maxpool3d(&Tensor::zeros(&[1, 1, 4, 4]), 2).is_err());
    }

    #[test]
    fn backward_conserves_mass() {
        let input = Tensor::from_vec(
            &[1, 4, 2, 2],
            (0..16).map(|v| (v * 7 % 16) as f64).collect(),
        )
        .unwrap();
        let p = maxpool3d(&input, 2).unwrap();
        let go = Tensor::from_vec(p.output.dims(), vec![1.5, -0.25]).unwrap();
        let gi = maxpool3d_backward(&go, &p.argmax, input.dims()).unwrap();
        assert_eq!(gi.sum(), go.sum());
        assert_eq!(gi.data().iter().filter(|&&v| v != 0.0).count(), 2);
    }

    #[test]
    fn global_max_cases() {
        let zeros = global_maxpool(&Tensor::zeros(&[1, 3, 3, 3])).unwrap();
        assert_eq!(zeros.output.data(), &[0.0]);

        let mut t = Tensor::zeros(&[1, 3, 3, 3]);
        t.data_mut()[13] = 5.0;
        let p = global_maxpool(&t).unwrap();
        assert_eq!(p.output.data(), &[5.0]);
        assert_eq!(p.argmax, vec![13]);

        let wide = global_maxpool(&Tensor::zeros(&[1000, 2, 5, 2])).unwrap();
        assert_eq!(wide.output.dims(), &[1000]);
    }
}
