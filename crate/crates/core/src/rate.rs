//! Character-rate model: ridge regression from the volumes acquired one to
//! five TRs later onto the number of characters heard in each acquisition,
//! and uniform onset placement from predicted counts.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::features::AcquisitionGrid;
use crate::stats::pearson;
use crate::volume::VolumeSeries;

pub const DEFAULT_DELAYS: usize = 5;
pub const DEFAULT_LAMBDAS: [f64; 5] = [1.0, 10.0, 100.0, 1e3, 1e4];
pub const DEFAULT_FOLDS: usize = 5;

/// Which voxels enter the design matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum VoxelMask {
    #[default]
    All,
    /// Flat voxel indices.
    Explicit(Vec<usize>),
    /// The `n` voxels with the largest temporal variance.
    TopVariance(usize),
}

impl VoxelMask {
    /// Sorted flat voxel indices selected from `volumes`.
    pub fn resolve(&self, volumes: &VolumeSeries) -> Result<Vec<usize>> {
        let n = volumes.voxels();
        match self {
            VoxelMask::All => Ok((0..n).collect()),
            VoxelMask::Explicit(idx) => {
                let mut idx = idx.clone();
                idx.sort_unstable();
                idx.dedup();
                if idx.is_empty() {
                    return Err(Error::config("empty voxel mask"));
                }
                if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
                    return Err(Error::config(format!("voxel {bad} outside volume of {n}")));
                }
                Ok(idx)
            }
            VoxelMask::TopVariance(k) => {
                if *k == 0 {
                    return Err(Error::config("empty voxel mask"));
                }
                let var = voxel_variance(volumes);
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
                order.truncate((*k).min(n));
                order.sort_unstable();
                Ok(order)
            }
        }
    }
}

fn voxel_variance(volumes: &VolumeSeries) -> Vec<f64> {
    let (n, t_n) = (volumes.voxels(), volumes.frames());
    let mut sum = vec![0.0; n];
    let mut sq = vec![0.0; n];
    for t in 0..t_n {
        for (i, &v) in volumes.frame(t).iter().enumerate() {
            sum[i] += v;
            sq[i] += v * v;
        }
    }
    let tf = t_n.max(1) as f64;
    sum.iter()
        .zip(&sq)
        .map(|(s, q)| (q / tf - (s / tf).powi(2)).max(0.0))
        .collect()
}

/// Design matrix: row `i` is acquisition `rows[i]`, holding the masked
/// voxels of frames `t+1..=t+delays` side by side.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub x: DMatrix<f64>,
    pub rows: Vec<usize>,
    pub dropped: Vec<usize>,
}

pub fn assemble_design(volumes: &VolumeSeries, voxels: &[usize], delays: usize) -> Result<Design> {
    let t_n = volumes.frames();
    if delays == 0 {
        return Err(Error::config("rate model needs at least one delay"));
    }
    if t_n <= delays {
        return Err(Error::InsufficientData(format!(
            "{t_n} acquisitions, need more than {delays}"
        )));
    }
    if let Some(&bad) = voxels.iter().find(|&&v| v >= volumes.voxels()) {
        return Err(Error::shape(format!("voxel {bad} outside volume")));
    }
    let usable = t_n - delays;
    let m = voxels.len();
    let x = DMatrix::from_fn(usable, m * delays, |t, j| {
        let (d, v) = (j / m, j % m);
        volumes.frame(t + d + 1)[voxels[v]]
    });
    Ok(Design {
        x,
        rows: (0..usable).collect(),
        dropped: (usable..t_n).collect(),
    })
}

/// Ridge solutions along a path of penalties, with an unpenalized intercept.
/// Uses the dual form when there are more columns than rows.
fn ridge_path(x: &DMatrix<f64>, y: &[f64], lambdas: &[f64]) -> Result<Vec<(DVector<f64>, f64)>> {
    let (n, p) = x.shape();
    if n != y.len() {
        return Err(Error::shape(format!(
            "{n} design rows but {} targets",
            y.len()
        )));
    }
    if n == 0 {
        return Err(Error::InsufficientData("no rows to fit".into()));
    }
    let col_mean = DVector::from_fn(p, |j, _| x.column(j).mean());
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let mut xc = x.clone();
    for j in 0..p {
        let mu = col_mean[j];
        xc.column_mut(j).add_scalar_mut(-mu);
    }
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    let primal = p <= n;
    let (eig, rhs) = if primal {
        (SymmetricEigen::new(xc.tr_mul(&xc)), xc.tr_mul(&yc))
    } else {
        (SymmetricEigen::new(&xc * xc.transpose()), yc)
    };
    let proj = eig.eigenvectors.tr_mul(&rhs);
    lambdas
        .iter()
        .map(|&lambda| {
            let scaled = DVector::from_fn(proj.len(), |i, _| {
                proj[i] / (eig.eigenvalues[i].max(0.0) + lambda)
            });
            let sol = &eig.eigenvectors * scaled;
            let w = if primal { sol } else { xc.tr_mul(&sol) };
            let b = y_mean - w.dot(&col_mean);
            if !(b.is_finite() && w.iter().all(|v| v.is_finite())) {
                return Err(Error::Numeric(format!(
                    "ridge solve at lambda {lambda} not finite"
                )));
            }
            Ok((w, b))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    /// Cross-validated correlation per candidate penalty.
    pub cv: Vec<(f64, f64)>,
}

/// Closed-form ridge at a single penalty.
pub fn ridge_solve(x: &DMatrix<f64>, y: &[f64], lambda: f64) -> Result<(Vec<f64>, f64)> {
    if !(lambda > 0.0) {
        return Err(Error::config(format!(
            "ridge penalty must be positive, got {lambda}"
        )));
    }
    let (w, b) = ridge_path(x, y, &[lambda])?.remove(0);
    Ok((w.iter().copied().collect(), b))
}

/// Ridge with the penalty chosen by blocked cross-validation: `folds`
/// contiguous blocks, held-out predictions pooled, Pearson correlation with
/// the targets maximized. Undefined correlations count as 0; ties keep the
/// smaller penalty.
pub fn ridge_fit(x: &DMatrix<f64>, y: &[f64], lambdas: &[f64], folds: usize) -> Result<RidgeFit> {
    if lambdas.is_empty() {
        return Err(Error::config("empty penalty grid"));
    }
    if let Some(l) = lambdas.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
        return Err(Error::config(format!(
            "ridge penalty must be positive, got {l}"
        )));
    }
    let n = x.nrows();
    if n != y.len() {
        return Err(Error::shape(format!(
            "{n} design rows but {} targets",
            y.len()
        )));
    }
    if folds < 2 || n < 2 * folds {
        return Err(Error::InsufficientData(format!(
            "{n} rows cannot form {folds} folds of at least 2"
        )));
    }
    let mut held = vec![vec![0.0; n]; lambdas.len()];
    for f in 0..folds {
        let (lo, hi) = (f * n / folds, (f + 1) * n / folds);
        let train: Vec<usize> = (0..lo).chain(hi..n).collect();
        let xt = x.select_rows(&train);
        let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let path = ridge_path(&xt, &yt, lambdas)?;
        for (li, (w, b)) in path.iter().enumerate() {
            for i in lo..hi {
                held[li][i] = x.row(i).transpose().dot(w) + b;
            }
        }
    }
    let cv: Vec<(f64, f64)> = lambdas
        .iter()
        .zip(&held)
        .map(|(&l, pred)| (l, pearson(pred, y).unwrap_or(0.0)))
        .collect();
    let best = cv
        .iter()
        .enumerate()
        .fold(0, |best, (i, c)| if c.1 > cv[best].1 { i } else { best });
    let lambda = lambdas[best];
    let (weights, intercept) = ridge_solve(x, y, lambda)?;
    Ok(RidgeFit {
        weights,
        intercept,
        lambda,
        cv,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateConfig {
    pub delays: usize,
    pub lambdas: Vec<f64>,
    pub folds: usize,
    pub mask: VoxelMask,
}

impl Default for RateConfig {
    fn default() -> Self {
        Self {
            delays: DEFAULT_DELAYS,
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            folds: DEFAULT_FOLDS,
            mask: VoxelMask::All,
        }
    }
}

/// Linear map from future volumes to characters per acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct RateModel {
    pub extents: [usize; 3],
    pub voxels: Vec<usize>,
    pub delays: usize,
    /// Delay-major: all masked voxels at `t+1`, then at `t+2`, ...
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
}

impl RateModel {
    pub fn new(
        extents: [usize; 3],
        voxels: Vec<usize>,
        delays: usize,
        weights: Vec<f64>,
        intercept: f64,
        lambda: f64,
    ) -> Result<Self> {
        if weights.len() != voxels.len() * delays {
            return Err(Error::shape(format!(
                "{} weights for {} voxels x {delays} delays",
                weights.len(),
                voxels.len()
            )));
        }
        let n = extents.iter().product::<usize>();
        if voxels.iter().any(|&v| v >= n) {
            return Err(Error::shape("rate model voxel outside volume"));
        }
        Ok(Self {
            extents,
            voxels,
            delays,
            weights,
            intercept,
            lambda,
        })
    }

    /// Weights followed by the intercept.
    pub fn coefficients(&self) -> Vec<f64> {
        let mut c = self.weights.clone();
        c.push(self.intercept);
        c
    }
}

pub fn fit_rate_model(
    volumes: &VolumeSeries,
    rates: &[f64],
    cfg: &RateConfig,
) -> Result<RateModel> {
    if rates.len() != volumes.frames() {
        return Err(Error::shape(format!(
            "{} rates for {} acquisitions",
            rates.len(),
            volumes.frames()
        )));
    }
    fit_rate_model_on(volumes, rates, None, cfg)
}

/// Fit using only the acquisitions in `keep` (all when `None`); rows whose
/// future window is incomplete are always excluded.
pub fn fit_rate_model_on(
    volumes: &VolumeSeries,
    rates: &[f64],
    keep: Option<&[usize]>,
    cfg: &RateConfig,
) -> Result<RateModel> {
    if rates.len() != volumes.frames() {
        return Err(Error::shape(format!(
            "{} rates for {} acquisitions",
            rates.len(),
            volumes.frames()
        )));
    }
    let voxels = cfg.mask.resolve(volumes)?;
    let design = assemble_design(volumes, &voxels, cfg.delays)?;
    let (x, rows) = match keep {
        None => (design.x, design.rows),
        Some(keep) => {
            let mut wanted = vec![false; volumes.frames()];
            for &t in keep {
                if let Some(w) = wanted.get_mut(t) {
                    *w = true;
                }
            }
            let idx: Vec<usize> = (0..design.rows.len())
                .filter(|&i| wanted[design.rows[i]])
                .collect();
            let rows = idx.iter().map(|&i| design.rows[i]).collect();
            (design.x.select_rows(idx.iter()), rows)
        }
    };
    let y: Vec<f64> = rows.iter().map(|&t: &usize| rates[t]).collect();
    let fit = ridge_fit(&x, &y, &cfg.lambdas, cfg.folds)?;
    RateModel::new(
        volumes.extents(),
        voxels,
        cfg.delays,
        fit.weights,
        fit.intercept,
        fit.lambda,
    )
}

/// Real-valued rate per acquisition. The last `delays` acquisitions have no
/// complete future window and get the intercept.
pub fn predict_rates(volumes: &VolumeSeries, model: &RateModel) -> Result<Vec<f64>> {
    if volumes.extents() != model.extents {
        return Err(Error::shape(format!(
            "volumes {:?} but rate model fit on {:?}",
            volumes.extents(),
            model.extents
        )));
    }
    let t_n = volumes.frames();
    let m = model.voxels.len();
    Ok((0..t_n)
        .map(|t| {
            if t + model.delays >= t_n {
                return model.intercept;
            }
            let mut acc = model.intercept;
            for d in 0..model.delays {
                let frame = volumes.frame(t + d + 1);
                let w = &model.weights[d * m..(d + 1) * m];
                for (&v, &wv) in model.voxels.iter().zip(w) {
                    acc += frame[v] * wv;
                }
            }
            acc
        })
        .collect())
}

/// Clamp at zero, then round half up.
pub fn round_count(x: f64) -> usize {
    if !(x > 0.0) {
        return 0;
    }
    let f = x.floor();
    (if x - f >= 0.5 { f + 1.0 } else { f }) as usize
}

pub fn predict_counts(volumes: &VolumeSeries, model: &RateModel) -> Result<Vec<usize>> {
    Ok(predict_rates(volumes, model)?
        .into_iter()
        .map(round_count)
        .collect())
}

/// `n` onsets per acquisition at the midpoints of `n` equal subintervals.
pub fn place_onsets(counts: &[usize], grid: &AcquisitionGrid) -> Result<Vec<f64>> {
    if counts.len() != grid.count {
        return Err(Error::shape(format!(
            "{} counts for a grid of {}",
            counts.len(),
            grid.count
        )));
    }
    let mut out = Vec::with_capacity(counts.iter().sum());
    for (k, &n) in counts.iter().enumerate() {
        let t = grid.time(k);
        let step = grid.tr / n as f64;
        out.extend((0..n).map(|j| t + (j as f64 + 0.5) * step));
    }
    Ok(out)
}
