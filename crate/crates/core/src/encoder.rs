//! Six-layer 3D CNN with a variational information bottleneck head.
//!
//! conv(k1, F1) -> pool(2) -> conv(k2, F2) -> pool(2) -> conv(k3, F3)
//! -> global max -> two affine heads producing the mean and log-variance of
//! a diagonal Gaussian over the `D`-dim semantic feature.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::tensor::{
    clip_gradients, conv3d_backward, conv3d_forward, finite_diff_check, global_maxpool,
    global_maxpool_backward, linear_apply, linear_backward, maxpool3d, maxpool3d_backward, AdamW,
    AdamWConfig, ConvSpec, GradCheckOptions, Pooled, Tensor,
};

const POOL: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub input: [usize; 3],
    pub filters: [usize; 3],
    /// Cubic kernel extent per convolution layer (odd).
    pub kernels: [usize; 3],
    pub latent_dim: usize,
    pub logvar_clamp: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input: [53, 63, 52],
            filters: [32, 128, 1000],
            kernels: [7, 7, 7],
            latent_dim: 768,
            logvar_clamp: 10.0,
        }
    }
}

impl EncoderConfig {
    pub fn conv_specs(&self) -> Result<[ConvSpec; 3]> {
        Ok([
            ConvSpec::new(1, self.filters[0], [self.kernels[0]; 3])?,
            ConvSpec::new(self.filters[0], self.filters[1], [self.kernels[1]; 3])?,
            ConvSpec::new(self.filters[1], self.filters[2], [self.kernels[2]; 3])?,
        ])
    }

    /// Spatial extents after each layer, or a shape error naming the first
    /// layer whose input is too small.
    pub fn layer_extents(&self) -> Result<Vec<(&'static str, [usize; 3])>> {
        let specs = self.conv_specs()?;
        let mut ext = self.input;
        let mut out = Vec::with_capacity(5);
        for (i, spec) in specs.iter().enumerate() {
            let name = ["conv1", "conv2", "conv3"][i];
            ext = spec.output_extents(ext).ok_or_else(|| {
                Error::shape(format!(
                    "{name}: input extents {ext:?} smaller than kernel {:?}",
                    spec.kernel
                ))
            })?;
            out.push((name, ext));
            if i < 2 {
                let pname = ["pool1", "pool2"][i];
                if ext.iter().any(|&e| e < POOL) {
                    return Err(Error::shape(format!(
                        "{pname}: input extents {ext:?} smaller than window {POOL}"
                    )));
                }
                ext = ext.map(|e| e / POOL);
                out.push((pname, ext));
            }
        }
        Ok(out)
    }
}

/// All trainable tensors of the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub conv: [Tensor; 3],
    pub mu_w: Tensor,
    pub mu_b: Tensor,
    pub logvar_w: Tensor,
    pub logvar_b: Tensor,
}

pub const PARAM_NAMES: [&str; 7] = [
    "conv1",
    "conv2",
    "conv3",
    "mu.weight",
    "mu.bias",
    "logvar.weight",
    "logvar.bias",
];

impl EncoderParams {
    /// Kaiming-uniform convolution kernels and mean-head weights; the
    /// log-variance head starts at zero so every latent starts at unit variance.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.layer_extents()?;
        let specs = config.conv_specs()?;
        let mut rng = stream(seed, &[0x1a17]);
        let conv = specs.map(|s| Tensor::kaiming_uniform(&s.kernel_dims(), s.fan_in(), &mut rng));
        let (f3, d) = (config.filters[2], config.latent_dim);
        let mu_w = Tensor::kaiming_uniform(&[f3, d], f3, &mut rng);
        Ok(Self {
            conv,
            mu_w,
            mu_b: Tensor::zeros(&[d]),
            logvar_w: Tensor::zeros(&[f3, d]),
            logvar_b: Tensor::zeros(&[d]),
            config,
        })
    }

    pub fn tensors(&self) -> [&Tensor; 7] {
        [
            &self.conv[0],
            &self.conv[1],
            &self.conv[2],
            &self.mu_w,
            &self.mu_b,
            &self.logvar_w,
            &self.logvar_b,
        ]
    }

    pub fn to_vec(&self) -> Vec<Tensor> {
        self.tensors().into_iter().cloned().collect()
    }

    pub fn from_vec(config: EncoderConfig, mut t: Vec<Tensor>) -> Result<Self> {
        if t.len() != 7 {
            return Err(Error::shape(format!(
                "encoder needs 7 tensors, got {}",
                t.len()
            )));
        }
        let specs = config.conv_specs()?;
        let (f3, d) = (config.filters[2], config.latent_dim);
        let expected: [Vec<usize>; 7] = [
            specs[0].kernel_dims().to_vec(),
            specs[1].kernel_dims().to_vec(),
            specs[2].kernel_dims().to_vec(),
            vec![f3, d],
            vec![d],
            vec![f3, d],
            vec![d],
        ];
        for (i, dims) in expected.iter().enumerate() {
            t[i].expect_dims(dims, PARAM_NAMES[i])?;
        }
        let mut it = t.drain(..);
        let mut next = || it.next().expect("length checked");
        Ok(Self {
            conv: [next(), next(), next()],
            mu_w: next(),
            mu_b: next(),
            logvar_w: next(),
            logvar_b: next(),
            config,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// Diagonal Gaussian `N(mean, diag(exp(logvar)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGaussian {
    pub mean: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl LatentGaussian {
    pub fn std(&self) -> Vec<f64> {
        self.logvar.iter().map(|lv| (0.5 * lv).exp()).collect()
    }

    /// Reparametrized draw `mean + std * eps`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> LatentSample {
        let eps: Vec<f64> = (0..self.mean.len())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        self.sample_with(eps)
    }

    pub fn sample_with(&self, eps: Vec<f64>) -> LatentSample {
        let z = self
            .mean
            .iter()
            .zip(self.std())
            .zip(&eps)
            .map(|((m, s), e)| m + s * e)
            .collect();
        LatentSample { z, eps }
    }

    /// `KL(self || N(0, I))`.
    pub fn kl_to_standard(&self) -> f64 {
        0.5 * self
            .mean
            .iter()
            .zip(&self.logvar)
            .map(|(m, lv)| lv.exp() + m * m - 1.0 - lv)
            .sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub z: Vec<f64>,
    pub eps: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeMode {
    Mean,
    Sample,
}

/// Exact KL divergence between diagonal Gaussians given means and variances.
pub fn kl_gaussians(mu1: &[f64], var1: &[f64], mu2: &[f64], var2: &[f64]) -> Result<f64> {
    let d = mu1.len();
    if var1.len() != d || mu2.len() != d || var2.len() != d {
        return Err(Error::shape("kl_gaussians: dimension mismatch"));
    }
    if var1.iter().chain(var2).any(|&v| !(v > 0.0)) {
        return Err(Error::Domain("variances must be positive".into()));
    }
    let mut trace = 0.0;
    let mut quad = 0.0;
    let mut logdet = 0.0;
    for i in 0..d {
        trace += var1[i] / var2[i];
        let diff = mu2[i] - mu1[i];
        quad += diff * diff / var2[i];
        logdet += var2[i].ln() - var1[i].ln();
    }
    Ok(0.5 * (trace + quad - d as f64 + logdet))
}

/// Value and gradients of the per-example bottleneck objective.
#[derive(Debug, Clone)]
pub struct VibLoss {
    pub total: f64,
    pub alignment: f64,
    /// Unscaled `KL(p(z|x) || N(0, I))`.
    pub kl: f64,
    pub grad_mean: Vec<f64>,
    pub grad_logvar: Vec<f64>,
}

/// `1/2 ||z - y||^2 + beta * kl_scale * KL(N(mu, sigma^2) || N(0, I))` with
/// `z = mu + sigma * eps`; gradients flow through the reparametrized sample.
pub fn vib_loss(
    dist: &LatentGaussian,
    sample: &LatentSample,
    target: &[f64],
    beta: f64,
    kl_scale: f64,
) -> Result<VibLoss> {
    let d = dist.mean.len();
    if dist.logvar.len() != d || sample.z.len() != d || sample.eps.len() != d || target.len() != d {
        return Err(Error::shape(format!(
            "vib_loss: latent dim {d}, target dim {}",
            target.len()
        )));
    }
    let weight = beta * kl_scale;
    let mut alignment = 0.0;
    let mut grad_mean = vec![0.0; d];
    let mut grad_logvar = vec![0.0; d];
    for i in 0..d {
        let r = sample.z[i] - target[i];
        alignment += 0.5 * r * r;
        let var = dist.logvar[i].exp();
        let std = (0.5 * dist.logvar[i]).exp();
        grad_mean[i] = r + weight * dist.mean[i];
        grad_logvar[i] = r * sample.eps[i] * 0.5 * std + weight * 0.5 * (var - 1.0);
    }
    let kl = dist.kl_to_standard();
    let total = alignment + weight * kl;
    if !total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss (alignment {alignment}, kl {kl})"
        )));
    }
    Ok(VibLoss {
        total,
        alignment,
        kl,
        grad_mean,
        grad_logvar,
    })
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Tensor,
    act: [Tensor; 3],
    pools: [Pooled; 2],
    global: Pooled,
    logvar_raw: Vec<f64>,
    pub dist: LatentGaussian,
}

impl ForwardTrace {
    /// The global-max feature vector fed to the heads.
    pub fn features(&self) -> &Tensor {
        &self.global.output
    }
}

pub fn forward(volume: &Tensor, params: &EncoderParams) -> Result<ForwardTrace> {
    let cfg = &params.config;
    if volume.dims() != cfg.input {
        return Err(Error::shape(format!(
            "encoder expects volume {:?}, got {:?}",
            cfg.input,
            volume.dims()
        )));
    }
    let specs = cfg.conv_specs()?;
    let input = volume
        .clone()
        .reshape(&[1, cfg.input[0], cfg.input[1], cfg.input[2]])?;
    let a1 =
        conv3d_forward(&input, &specs[0], &params.conv[0]).map_err(|e| layer_err("conv1", e))?;
    let p1 = maxpool3d(&a1, POOL).map_err(|e| layer_err("pool1", e))?;
    let a2 = conv3d_forward(&p1.output, &specs[1], &params.conv[1])
        .map_err(|e| layer_err("conv2", e))?;
    let p2 = maxpool3d(&a2, POOL).map_err(|e| layer_err("pool2", e))?;
    let a3 = conv3d_forward(&p2.output, &specs[2], &params.conv[2])
        .map_err(|e| layer_err("conv3", e))?;
    let global = global_maxpool(&a3)?;
    let mean = linear_apply(&global.output, &params.mu_w, Some(&params.mu_b))?.into_data();
    let logvar_raw =
        linear_apply(&global.output, &params.logvar_w, Some(&params.logvar_b))?.into_data();
    let c = cfg.logvar_clamp;
    let logvar = logvar_raw.iter().map(|v| v.clamp(-c, c)).collect();
    Ok(ForwardTrace {
        input,
        act: [a1, a2, a3],
        pools: [p1, p2],
        global,
        logvar_raw,
        dist: LatentGaussian { mean, logvar },
    })
}

fn layer_err(layer: &str, e: Error) -> Error {
    match e {
        Error::Shape(m) => Error::Shape(format!("{layer}: {m}")),
        other => other,
    }
}

/// Gradients for every parameter tensor (in [`EncoderParams::tensors`] order)
/// and optionally the input volume.
#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub params: Vec<Tensor>,
    pub input: Option<Tensor>,
}

pub fn backward(
    trace: &ForwardTrace,
    params: &EncoderParams,
    grad_mean: &[f64],
    grad_logvar: &[f64],
    need_input_grad: bool,
) -> Result<EncoderGrads> {
    let cfg = &params.config;
    let specs = cfg.conv_specs()?;
    let d = cfg.latent_dim;
    if grad_mean.len() != d || grad_logvar.len() != d {
        return Err(Error::shape("backward: latent gradient length"));
    }
    let c = cfg.logvar_clamp;
    let glv: Vec<f64> = grad_logvar
        .iter()
        .zip(&trace.logvar_raw)
        .map(|(&g, &raw)| if (-c..=c).contains(&raw) { g } else { 0.0 })
        .collect();
    let gmu = Tensor::from_vec(&[d], grad_mean.to_vec())?;
    let glv = Tensor::from_vec(&[d], glv)?;
    let h = &trace.global.output;
    let mu_g = linear_backward(h, &params.mu_w, &gmu)?;
    let lv_g = linear_backward(h, &params.logvar_w, &glv)?;
    let mut gh = mu_g.input;
    gh.add_scaled(&lv_g.input, 1.0)?;

    let [a1, a2, a3] = &trace.act;
    let [p1, p2] = &trace.pools;
    let ga3 = global_maxpool_backward(&gh, &trace.global.argmax, a3.dims())?;
    let g3 = conv3d_backward(&p2.output, &specs[2], &params.conv[2], a3, &ga3, true)?;
    let ga2 = maxpool3d_backward(&g3.input.expect("requested"), &p2.argmax, a2.dims())?;
    let g2 = conv3d_backward(&p1.output, &specs[1], &params.conv[1], a2, &ga2, true)?;
    let ga1 = maxpool3d_backward(&g2.input.expect("requested"), &p1.argmax, a1.dims())?;
    let g1 = conv3d_backward(
        &trace.input,
        &specs[0],
        &params.conv[0],
        a1,
        &ga1,
        need_input_grad,
    )?;
    let input = match g1.input {
        Some(gi) => Some(gi.reshape(&cfg.input)?),
        None => None,
    };
    Ok(EncoderGrads {
        params: vec![
            g1.kernels,
            g2.kernels,
            g3.kernels,
            mu_g.weights,
            mu_g.bias,
            lv_g.weights,
            lv_g.bias,
        ],
        input,
    })
}

/// Encode one volume. `Mean` ignores `rng`; `Sample` draws one reparametrized sample.
pub fn encode<R: Rng + ?Sized>(
    volume: &Tensor,
    params: &EncoderParams,
    mode: EncodeMode,
    rng: &mut R,
) -> Result<(Vec<f64>, LatentGaussian)> {
    let trace = forward(volume, params)?;
    let z = match mode {
        EncodeMode::Mean => trace.dist.mean.clone(),
        EncodeMode::Sample => trace.dist.sample(rng).z,
    };
    Ok((z, trace.dist))
}

/// Mean encodings of many volumes, `[T, D]`.
pub fn encode_means(volumes: &[Tensor], params: &EncoderParams) -> Result<Tensor> {
    let d = params.config.latent_dim;
    let rows = volumes
        .par_iter()
        .map(|v| forward(v, params).map(|t| t.dist.mean))
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_vec(&[rows.len().max(1), d], {
        let mut flat: Vec<f64> = rows.concat();
        if flat.is_empty() {
            flat = vec![0.0; d];
        }
        flat
    })
}

/// Full bottleneck loss and parameter gradients for one example, with the
/// reparametrization noise supplied explicitly.
pub fn example_loss(
    volume: &Tensor,
    target: &[f64],
    params: &EncoderParams,
    eps: Vec<f64>,
    beta: f64,
    kl_scale: f64,
) -> Result<(VibLoss, EncoderGrads)> {
    let trace = forward(volume, params)?;
    let sample = trace.dist.sample_with(eps);
    let loss = vib_loss(&trace.dist, &sample, target, beta, kl_scale)?;
    let grads = backward(&trace, params, &loss.grad_mean, &loss.grad_logvar, false)?;
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub beta: f64,
    pub kl_scale: f64,
    pub clip: (f64, f64),
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            weight_decay: 0.01,
            batch: 128,
            epochs: 100,
            beta: 1.0,
            kl_scale: 0.01,
            clip: (-1.0, 1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || self.batch == 0 || self.epochs == 0 {
            return Err(Error::config(format!("invalid training config {self:?}")));
        }
        if self.beta < 0.0 || self.kl_scale < 0.0 || self.clip.0 > self.clip.1 {
            return Err(Error::config(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub alignment: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }
}

/// One training example: a volume and its semantic target.
#[derive(Debug, Clone)]
pub struct Example {
    pub volume: Tensor,
    pub target: Vec<f64>,
}

/// Minibatch AdamW on the bottleneck objective. Shuffling and the
/// reparametrization noise are derived from `(seed, epoch, sample)`.
pub fn train_encoder(
    dataset: &[Example],
    init: EncoderParams,
    cfg: &TrainConfig,
) -> Result<(EncoderParams, TrainHistory)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    let d = init.config.latent_dim;
    if let Some(ex) = dataset.iter().find(|e| e.target.len() != d) {
        return Err(Error::shape(format!(
            "target dim {} does not match latent dim {d}",
            ex.target.len()
        )));
    }
    let config = init.config.clone();
    let mut params = init.to_vec();
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
        &params,
    );
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream(cfg.seed, &[epoch as u64, u64::MAX]));
        let (mut loss_sum, mut align_sum, mut kl_sum) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch) {
            let current = EncoderParams::from_vec(config.clone(), params.clone())?;
            let results = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = stream(cfg.seed, &[epoch as u64, i as u64]);
                    let eps = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                    let ex = &dataset[i];
                    example_loss(
                        &ex.volume,
                        &ex.target,
                        &current,
                        eps,
                        cfg.beta,
                        cfg.kl_scale,
                    )
                })
                .collect::<Vec<_>>();
            let mut grads: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.dims())).collect();
            let scale = 1.0 / batch.len() as f64;
            for r in results {
                let (loss, g) = r.map_err(|e| match e {
                    Error::Numeric(_) => Error::Divergence {
                        epoch,
                        loss: f64::NAN,
                    },
                    other => other,
                })?;
                loss_sum += loss.total;
                align_sum += loss.alignment;
                kl_sum += loss.kl;
                for (acc, gi) in grads.iter_mut().zip(&g.params) {
                    acc.add_scaled(gi, scale)?;
                }
            }
            clip_gradients(&mut grads, cfg.clip.0, cfg.clip.1)?;
            opt.step(&mut params, &grads)
                .map_err(|_| Error::Divergence {
                    epoch,
                    loss: f64::NAN,
                })?;
        }
        let n = dataset.len() as f64;
        let stats = EpochStats {
            loss: loss_sum / n,
            alignment: align_sum / n,
            kl: kl_sum / n,
        };
        if !stats.loss.is_finite() || params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                loss: stats.loss,
            });
        }
        history.epochs.push(stats);
    }
    Ok((EncoderParams::from_vec(config, params)?, history))
}

/// Independent noise stream for example `index` at `epoch`; exposed for tests
/// that replay a training step.
pub fn noise_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    derive_seed(seed, &[epoch as u64, index as u64])
}

impl EncoderConfig {
    /// 12³ input, filters 2/3/4, four latent dimensions: small enough to
    /// finite-difference every parameter.
    pub fn tiny() -> Self {
        EncoderConfig {
            input: [12, 12, 12],
            filters: [2, 3, 4],
            kernels: [3, 3, 1],
            latent_dim: 4,
            logvar_clamp: 10.0,
        }
    }
}

/// Max relative error between the analytic gradient of the full loss and
/// central differences, on a random volume, target and noise draw.
pub fn gradient_check(config: EncoderConfig, seed: u64, opts: &GradCheckOptions) -> Result<f64> {
    let mut rng = stream(seed, &[]);
    let mut p = EncoderParams::init(config, rng.random())?;
    for v in p.logvar_w.data_mut() {
        *v = rng.random_range(-0.3..0.3);
    }
    let n: usize = p.config.input.iter().product();
    let v = Tensor::from_vec(
        &p.config.input,
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let d = p.config.latent_dim;
    let y: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let (_, g) = example_loss(&v, &y, &p, eps.clone(), 1.0, 0.01)?;
    let cfg = p.config.clone();
    let mut failure = None;
    let err = finite_diff_check(
        |t| {
            let q = EncoderParams::from_vec(cfg.clone(), t.to_vec()).expect("same shapes");
            match example_loss(&v, &y, &q, eps.clone(), 1.0, 0.01) {
                Ok((l, _)) => l.total,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &p.to_vec(),
        &g.params,
        opts,
    );
    match failure {
        Some(e) => Err(e),
        None if err.is_finite() => Ok(err),
        None => Err(Error::Numeric(
            "gradient check produced a non-finite error".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> EncoderConfig {
        EncoderConfig::tiny()
    }

    fn random_volume(dims: [usize; 3], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        Tensor::from_vec(&dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn paper_architecture_extents() {
        let ext = EncoderConfig::default().layer_extents().unwrap();
        assert_eq!(ext.last().unwrap().1, [2, 5, 2]);
    }

    #[test]
    fn too_small_volume_names_layer() {
        let cfg = EncoderConfig {
            input: [8, 8, 8],
            ..tiny_config()
        };
        let err = EncoderParams::init(cfg, 0).unwrap_err();
        assert!(
            err.to_string().contains("conv3") || err.to_string().contains("pool2"),
            "{err}"
        );
    }

    #[test]
    fn zero_volume_with_zero_heads_encodes_to_zero() {
        let mut p = EncoderParams::init(tiny_config(), 1).unwrap();
        p.mu_w = Tensor::zeros(p.mu_w.dims());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (z, dist) = encode(
            &Tensor::zeros(&[12, 12, 12]),
            &p,
            EncodeMode::Mean,
            &mut rng,
        )
        .unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        assert!(dist.logvar.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_volume_reaches_only_the_head_bias() {
        let mut p = EncoderParams::init(tiny_config(), 1).unwrap();
        p.mu_b = Tensor::from_vec(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (z, _) = encode(
            &Tensor::zeros(&[12, 12, 12]),
            &p,
            EncodeMode::Mean,
            &mut rng,
        )
        .unwrap();
        assert_eq!(z, vec![0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn encoding_is_deterministic() {
        let p = EncoderParams::init(tiny_config(), 2).unwrap();
        let v = random_volume([12, 12, 12], 3);
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(10);
        let a = encode(&v, &p, EncodeMode::Mean, &mut r1).unwrap().0;
        let b = encode(&v, &p, EncodeMode::Mean, &mut r2).unwrap().0;
        assert_eq!(a, b);
        let s1 = encode(
            &v,
            &p,
            EncodeMode::Sample,
            &mut ChaCha8Rng::seed_from_u64(4),
        )
        .unwrap()
        .0;
        let s2 = encode(
            &v,
            &p,
            EncodeMode::Sample,
            &mut ChaCha8Rng::seed_from_u64(4),
        )
        .unwrap()
        .0;
        assert_eq!(s1, s2);
        assert_ne!(s1, a);
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(
            kl_gaussians(&[0.3, -1.0], &[2.0, 0.5], &[0.3, -1.0], &[2.0, 0.5]).unwrap(),
            0.0
        );
        assert!((kl_gaussians(&[0.0], &[1.0], &[1.0], &[1.0]).unwrap() - 0.5).abs() < 1e-15);
        let v = kl_gaussians(&[0.0], &[2.0], &[0.0], &[1.0]).unwrap();
        assert!((v - 0.5 * (2.0 - 1.0 + 0.5f64.ln())).abs() < 1e-15);
        assert!((v - 0.1534).abs() < 1e-4);
        assert!(matches!(
            kl_gaussians(&[0.0], &[0.0], &[0.0], &[1.0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn vib_loss_cases() {
        let dist = LatentGaussian {
            mean: vec![0.0, 0.0],
            logvar: vec![0.0, 0.0],
        };
        let s = LatentSample {
            z: vec![0.4, -0.2],
            eps: vec![0.4, -0.2],
        };
        let l = vib_loss(&dist, &s, &[0.4, -0.2], 1.0, 0.01).unwrap();
        assert_eq!(l.total, 0.0);

        let dist = LatentGaussian {
            mean: vec![1.0],
            logvar: vec![0.0],
        };
        let s = dist.sample_with(vec![0.0]);
        let l = vib_loss(&dist, &s, &[1.0], 1.0, 0.01).unwrap();
        assert_eq!(l.alignment, 0.0);
        assert!((l.total - 0.01 * 0.5).abs() < 1e-15);
        assert!((l.kl - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_to_standard_agrees_with_general_formula() {
        let dist = LatentGaussian {
            mean: vec![0.3, -0.8, 1.2],
            logvar: vec![-0.5, 0.2, 1.0],
        };
        let var: Vec<f64> = dist.logvar.iter().map(|v| v.exp()).collect();
        let general = kl_gaussians(&dist.mean, &var, &[0.0; 3], &[1.0; 3]).unwrap();
        assert!((general - dist.kl_to_standard()).abs() < 1e-12);
    }

    #[test]
    fn full_loss_gradient_check() {
        let p = EncoderParams::init(tiny_config(), 5).unwrap();
        let mut p = p;
        // Non-zero log-variance head so its gradient is exercised.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for v in p.logvar_w.data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
        let v = random_volume([12, 12, 12], 7);
        let y = vec![0.5, -0.3, 0.2, 0.9];
        let eps = vec![0.3, -1.1, 0.7, 0.05];
        let (_, g) = example_loss(&v, &y, &p, eps.clone(), 1.0, 0.01).unwrap();
        let cfg = p.config.clone();
        let err = finite_diff_check(
            |t| {
                let q = EncoderParams::from_vec(cfg.clone(), t.to_vec()).unwrap();
                example_loss(&v, &y, &q, eps.clone(), 1.0, 0.01)
                    .unwrap()
                    .0
                    .total
            },
            &p.to_vec(),
            &g.params,
            &GradCheckOptions::default(),
        );
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn seeded_gradient_check_passes() {
        for seed in 0..3 {
            let err =
                gradient_check(EncoderConfig::tiny(), seed, &GradCheckOptions::default()).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn input_gradient_check() {
        let p = EncoderParams::init(tiny_config(), 8).unwrap();
        let v = random_volume([12, 12, 12], 9);
        let y = vec![0.1, 0.2, -0.4, 0.3];
        let trace = forward(&v, &p).unwrap();
        let grad_mean: Vec<f64> = trace.dist.mean.iter().zip(&y).map(|(m, t)| m - t).collect();
        let g = backward(&trace, &p, &grad_mean, &[0.0; 4], true).unwrap();
        let err = finite_diff_check(
            |t| {
                let tr = forward(&t[0], &p).unwrap();
                tr.dist
                    .mean
                    .iter()
                    .zip(&y)
                    .map(|(m, t)| 0.5 * (m - t).powi(2))
                    .sum()
            },
            &[v],
            &[g.input.unwrap()],
            &GradCheckOptions {
                max_coords_per_tensor: 300,
                ..Default::default()
            },
        );
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn reparametrization_is_unbiased() {
        let dist = LatentGaussian {
            mean: vec![0.5, -1.0],
            logvar: vec![0.0, (0.25f64).ln()],
        };
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut sums = [0.0; 2];
        for _ in 0..n {
            let s = dist.sample(&mut rng);
            sums[0] += s.z[0];
            sums[1] += s.z[1];
        }
        for (i, std) in dist.std().iter().enumerate() {
            let mean = sums[i] / n as f64;
            assert!((mean - dist.mean[i]).abs() < 3.0 * std / (n as f64).sqrt());
        }
    }

    fn toy_dataset(n: usize) -> Vec<Example> {
        (0..n)
            .map(|i| Example {
                volume: random_volume([12, 12, 12], 100 + i as u64),
                target: vec![0.5, -0.5, 0.25, 1.0],
            })
            .collect()
    }

    #[test]
    fn overfits_one_example() {
        let data = toy_dataset(1);
        let cfg = TrainConfig {
            lr: 0.03,
            weight_decay: 0.0,
            batch: 1,
            epochs: 1000,
            beta: 0.0,
            ..Default::default()
        };
        let init = EncoderParams::init(tiny_config(), 12).unwrap();
        let (_, hist) = train_encoder(&data, init, &cfg).unwrap();
        let first = hist.epochs[0].alignment;
        let last = hist.last().unwrap().alignment;
        assert!(last < 1e-2 * first, "alignment {first} -> {last}");
    }

    #[test]
    fn bottleneck_pressure_lowers_kl() {
        let data = toy_dataset(4);
        let base = TrainConfig {
            lr: 0.01,
            batch: 2,
            epochs: 40,
            seed: 3,
            ..Default::default()
        };
        let init = EncoderParams::init(tiny_config(), 13).unwrap();
        let (_, with_ib) = train_encoder(&data, init.clone(), &base).unwrap();
        let (_, without) = train_encoder(&data, init, &TrainConfig { beta: 0.0, ..base }).unwrap();
        assert!(with_ib.last().unwrap().kl < without.last().unwrap().kl);
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_dataset(3);
        let cfg = TrainConfig {
            lr: 1e-3,
            batch: 2,
            epochs: 3,
            seed: 4,
            ..Default::default()
        };
        let init = EncoderParams::init(tiny_config(), 14).unwrap();
        let (a, ha) = train_encoder(&data, init.clone(), &cfg).unwrap();
        let (b, hb) = train_encoder(&data, init, &cfg).unwrap();
        assert_eq!(ha, hb);
        for (x, y) in a.tensors().iter().zip(b.tensors()) {
            let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let mut data = toy_dataset(1);
        data[0].target = vec![f64::INFINITY; 4];
        let cfg = TrainConfig {
            epochs: 2,
            batch: 1,
            ..Default::default()
        };
        let init = EncoderParams::init(tiny_config(), 15).unwrap();
        assert!(matches!(
            train_encoder(&data, init, &cfg),
            Err(Error::Divergence { epoch: 0, .. })
        ));
    }
}
