//! Trained models as checkpoints: every field becomes a named tensor, so a
//! model can be rebuilt from its CKPT file alone.

use std::collections::BTreeMap;

use crate::encoder::{EncoderConfig, EncoderParams, PARAM_NAMES};
use crate::error::{Error, Result};
use crate::formats::{Checkpoint, NamedTensor};
use crate::lm::NgramModel;
use crate::rate::RateModel;
use crate::tensor::Tensor;

fn ints(t: &NamedTensor, n: usize) -> Result<Vec<usize>> {
    if t.data.len() != n {
        return Err(Error::Data(format!(
            "{}: expected {n} values, got {}",
            t.name,
            t.data.len()
        )));
    }
    t.data
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < 2f64.powi(53) {
                Ok(v as usize)
            } else {
                Err(Error::Data(format!("{}: {v} is not a count", t.name)))
            }
        })
        .collect()
}

fn scalar(ckpt: &Checkpoint, name: &str) -> Result<f64> {
    let t = ckpt.get(name)?;
    match t.data.as_slice() {
        [v] => Ok(*v),
        _ => Err(Error::Data(format!("{name}: expected a scalar"))),
    }
}

fn triple(ckpt: &Checkpoint, name: &str) -> Result<[usize; 3]> {
    let v = ints(ckpt.get(name)?, 3)?;
    Ok([v[0], v[1], v[2]])
}

fn usizes(v: &[usize]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub fn encoder_to_ckpt(params: &EncoderParams) -> Checkpoint {
    let c = &params.config;
    let mut ckpt = Checkpoint::default();
    ckpt.push(NamedTensor::vector("encoder.input", usizes(&c.input)));
    ckpt.push(NamedTensor::vector("encoder.filters", usizes(&c.filters)));
    ckpt.push(NamedTensor::vector("encoder.kernels", usizes(&c.kernels)));
    ckpt.push(NamedTensor::vector(
        "encoder.latent_dim",
        vec![c.latent_dim as f64],
    ));
    ckpt.push(NamedTensor::vector(
        "encoder.logvar_clamp",
        vec![c.logvar_clamp],
    ));
    for (name, t) in PARAM_NAMES.iter().zip(params.to_vec()) {
        ckpt.push(
            NamedTensor::new(format!("encoder.{name}"), t.dims().to_vec(), t.into_data())
                .expect("tensor dims match data"),
        );
    }
    ckpt
}

pub fn encoder_from_ckpt(ckpt: &Checkpoint) -> Result<EncoderParams> {
    let latent = ints(ckpt.get("encoder.latent_dim")?, 1)?[0];
    let config = EncoderConfig {
        input: triple(ckpt, "encoder.input")?,
        filters: triple(ckpt, "encoder.filters")?,
        kernels: triple(ckpt, "encoder.kernels")?,
        latent_dim: latent,
        logvar_clamp: scalar(ckpt, "encoder.logvar_clamp")?,
    };
    let tensors = PARAM_NAMES
        .iter()
        .map(|name| {
            let t = ckpt.get(&format!("encoder.{name}"))?;
            Tensor::from_vec(&t.dims, t.data.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    EncoderParams::from_vec(config, tensors)
}

pub fn rate_to_ckpt(model: &RateModel) -> Checkpoint {
    let mut ckpt = Checkpoint::default();
    ckpt.push(NamedTensor::vector("rate.extents", usizes(&model.extents)));
    ckpt.push(NamedTensor::vector("rate.voxels", usizes(&model.voxels)));
    ckpt.push(NamedTensor::vector(
        "rate.delays",
        vec![model.delays as f64],
    ));
    ckpt.push(NamedTensor::vector("rate.weights", model.weights.clone()));
    ckpt.push(NamedTensor::vector("rate.intercept", vec![model.intercept]));
    ckpt.push(NamedTensor::vector("rate.lambda", vec![model.lambda]));
    ckpt
}

pub fn rate_from_ckpt(ckpt: &Checkpoint) -> Result<RateModel> {
    let voxels = ckpt.get("rate.voxels")?;
    RateModel::new(
        triple(ckpt, "rate.extents")?,
        ints(voxels, voxels.data.len())?,
        ints(ckpt.get("rate.delays")?, 1)?[0],
        ckpt.get("rate.weights")?.data.clone(),
        scalar(ckpt, "rate.intercept")?,
        scalar(ckpt, "rate.lambda")?,
    )
}

/// Counts of context length `l` are stored as rows `[context.., next, count]`
/// in sorted order.
pub fn lm_to_ckpt(model: &NgramModel) -> Checkpoint {
    let mut ckpt = Checkpoint::default();
    ckpt.push(NamedTensor::vector(
        "lm.meta",
        vec![
            model.order() as f64,
            model.vocab_size() as f64,
            model.discount(),
            model.max_context() as f64,
        ],
    ));
    for (l, table) in model.tables().iter().enumerate() {
        let mut rows: BTreeMap<(&[u32], u32), u64> = BTreeMap::new();
        for (ctx, stats) in table {
            for (&c, &n) in &stats.next {
                rows.insert((ctx.as_slice(), c), n);
            }
        }
        let width = l + 2;
        let mut data = Vec::with_capacity(rows.len() * width);
        for ((ctx, c), n) in &rows {
            data.extend(ctx.iter().map(|&x| x as f64));
            data.push(*c as f64);
            data.push(*n as f64);
        }
        ckpt.push(
            NamedTensor::new(format!("lm.counts.{l}"), vec![rows.len(), width], data)
                .expect("row width matches"),
        );
    }
    ckpt
}

pub fn lm_from_ckpt(ckpt: &Checkpoint) -> Result<NgramModel> {
    let meta = ckpt.get("lm.meta")?;
    if meta.data.len() != 4 {
        return Err(Error::Data("lm.meta: expected 4 values".into()));
    }
    let head = ints(
        &NamedTensor::vector("lm.meta", vec![meta.data[0], meta.data[1], meta.data[3]]),
        3,
    )?;
    let (order, vocab, max_context) = (head[0], head[1], head[2]);
    let mut model = NgramModel::empty(order, vocab)?
        .with_discount(meta.data[2])?
        .with_max_context(max_context);
    for l in 0..order {
        let name = format!("lm.counts.{l}");
        let t = ckpt.get(&name)?;
        let width = l + 2;
        if t.dims.len() != 2 || t.dims[1] != width {
            return Err(Error::Data(format!(
                "{name}: expected rows of width {width}"
            )));
        }
        let vals = ints(t, t.data.len())?;
        for row in vals.chunks_exact(width) {
            if row[..=l].iter().any(|&c| c >= vocab) {
                return Err(Error::Data(format!(
                    "{name}: character id outside vocabulary"
                )));
            }
            let ctx = row[..l].iter().map(|&c| c as u32).collect();
            model.add_count(l, ctx, row[l] as u32, row[l + 1] as u64);
        }
    }
    Ok(model)
}
