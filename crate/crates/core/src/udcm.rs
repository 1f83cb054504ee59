//! Uncertainty-guided decision calibration: class-difficulty table,
//! per-source uncertainty embeddings, the bin-expectation head for the fusion
//! weight and the final logit rectification.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var, D};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::nn::{log_softmax, rows_f64, softmax, Linear};
use crate::params::{Init, ParamStore};

pub const UNCERTAINTY_DIM: usize = 5;
pub const TOP_K: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyStats {
    counts: Vec<usize>,
    beta: f64,
}

impl FrequencyStats {
    pub fn new(counts: Vec<usize>, beta: f64) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::config("frequency stats need at least one class"));
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::config(format!("class {c} has no training samples")));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::config(format!("beta must be positive, got {beta}")));
        }
        Ok(Self { counts, beta })
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn n_min(&self) -> usize {
        *self.counts.iter().min().expect("non-empty")
    }

    pub fn n_max(&self) -> usize {
        *self.counts.iter().max().expect("non-empty")
    }
}

/// Smoothed inverse frequency `(1 - (N_c - N_min) / (N_max - N_min))^beta`.
/// Errors when every class has the same count.
pub fn init_difficulty(stats: &FrequencyStats) -> Result<Vec<f64>> {
    let (lo, hi) = (stats.n_min() as f64, stats.n_max() as f64);
    if hi == lo {
        return Err(Error::config(format!(
            "all {} classes have {} samples; difficulty init is undefined",
            stats.counts.len(),
            lo
        )));
    }
    Ok(stats
        .counts
        .iter()
        .map(|&n| (1.0 - (n as f64 - lo) / (hi - lo)).powf(stats.beta))
        .collect())
}

/// Learnable per-class difficulty `W_cls` plus the values it started from.
pub struct ClassDifficultyTable {
    weights: Var,
    init: Vec<f64>,
}

impl ClassDifficultyTable {
    /// Degenerate stats (all counts equal) fall back to 0.5 everywhere.
    pub fn new(store: &mut ParamStore, stats: &FrequencyStats) -> Result<Self> {
        let init = match init_difficulty(stats) {
            Ok(w) => w,
            Err(_) => {
                log::warn!("all class counts are equal; initializing class difficulty to 0.5");
                vec![0.5; stats.counts.len()]
            }
        };
        let weights = store.var("udcm.w_cls", &[init.len()], Init::Values(init.clone()))?;
        Ok(Self { weights, init })
    }

    pub fn weights(&self) -> &Var {
        &self.weights
    }

    pub fn initial(&self) -> &[f64] {
        &self.init
    }

    pub fn len(&self) -> usize {
        self.init.len()
    }

    pub fn is_empty(&self) -> bool {
        self.init.is_empty()
    }
}

/// Indices of the three largest logits in descending order, smaller index
/// first on ties.
pub fn top3(logits: &[f64]) -> Result<[usize; TOP_K]> {
    if logits.len() < TOP_K {
        return Err(Error::config(format!(
            "difficulty gather needs at least {TOP_K} classes, got {}",
            logits.len()
        )));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    Ok([order[0], order[1], order[2]])
}

/// `(B, 3)` difficulty values at each row's Top-3 classes; differentiable
/// with respect to `weights`.
pub fn gather_difficulty(weights: &Tensor, logits: &Tensor) -> Result<Tensor> {
    let (b, k) = logits.dims2()?;
    if weights.dims() != [k] {
        return Err(Error::invalid(format!(
            "difficulty table of shape {:?} for {k} classes",
            weights.dims()
        )));
    }
    let mut idx = Vec::with_capacity(b * TOP_K);
    for row in rows_f64(logits)? {
        idx.extend(top3(&row)?.iter().map(|&i| i as u32));
    }
    let idx = Tensor::from_vec(idx, b * TOP_K, logits.device())?;
    Ok(weights.index_select(&idx, 0)?.reshape((b, TOP_K))?)
}

/// `(B, 2)` rows of `[entropy, max probability]` (natural log) from detached logits.
pub fn instance_uncertainty(logits: &Tensor) -> Result<Tensor> {
    let z = logits.detach();
    let logp = log_softmax(&z)?;
    let p = logp.exp()?;
    let entropy = (p.mul(&logp)?.sum_keepdim(D::Minus1)? * -1.0)?;
    let conf = p.max_keepdim(D::Minus1)?;
    Ok(Tensor::cat(&[&entropy, &conf], 1)?)
}

/// `[u^c || u^i]`, shape `(B, 5)`.
pub fn uncertainty_embedding(weights: &Tensor, logits: &Tensor) -> Result<Tensor> {
    let uc = gather_difficulty(weights, &logits.detach())?;
    let ui = instance_uncertainty(logits)?.to_dtype(uc.dtype())?;
    Ok(Tensor::cat(&[&uc, &ui], 1)?)
}

/// Midpoints of `n` equal bins over `range`.
pub fn bin_centers(n: usize, range: [f64; 2]) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::config(format!("need at least 2 bins, got {n}")));
    }
    let [lo, hi] = range;
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(Error::config(format!("invalid bin range [{lo}, {hi}]")));
    }
    Ok((1..=n)
        .map(|i| lo + (hi - lo) * (2 * i - 1) as f64 / (2 * n) as f64)
        .collect())
}

/// `lambda = sum_i s_i b_i` for `(B, N)` distributions.
pub fn expectation(s: &Tensor, centers: &Tensor) -> Result<Tensor> {
    Ok(s.broadcast_mul(centers)?.sum(D::Minus1)?)
}

pub struct BinHead {
    proj_b: Linear,
    proj_e: Linear,
    fc1: Linear,
    fc2: Linear,
    centers: Tensor,
    center_values: Vec<f64>,
}

impl BinHead {
    pub fn new(store: &mut ParamStore, bins: usize, range: [f64; 2], hidden: usize) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::config("bin head hidden width must be positive"));
        }
        let center_values = bin_centers(bins, range)?;
        let centers = Tensor::from_vec(center_values.clone(), bins, store.device())?.to_dtype(store.dtype())?;
        Ok(Self {
            proj_b: Linear::new(store, "udcm.proj_b", UNCERTAINTY_DIM, hidden)?,
            proj_e: Linear::new(store, "udcm.proj_e", UNCERTAINTY_DIM, hidden)?,
            fc1: Linear::new(store, "udcm.fc1", 2 * hidden, hidden)?,
            fc2: Linear::new(store, "udcm.fc2", hidden, bins)?,
            centers,
            center_values,
        })
    }

    pub fn bins(&self) -> usize {
        self.center_values.len()
    }

    pub fn centers(&self) -> &[f64] {
        &self.center_values
    }

    /// Bin distribution `s` `(B, N)` and its expectation `lambda` `(B,)`.
    pub fn forward(&self, u_b: &Tensor, u_e: &Tensor) -> Result<(Tensor, Tensor)> {
        let hb = self.proj_b.forward(u_b)?.relu()?;
        let he = self.proj_e.forward(u_e)?.relu()?;
        let h = self.fc1.forward(&Tensor::cat(&[&hb, &he], 1)?)?.relu()?;
        let s = softmax(&self.fc2.forward(&h)?)?;
        let lambda = expectation(&s, &self.centers)?;
        Ok((s, lambda))
    }
}

/// `z_b + lambda * z_e` row-wise; `lambda` is `(B,)`.
pub fn calibrate(z_b: &Tensor, z_e: &Tensor, lambda: &Tensor) -> Result<Tensor> {
    if z_b.dims() != z_e.dims() || z_b.rank() != 2 {
        return Err(Error::invalid(format!(
            "calibration needs equal (B, K) logits, got {:?} and {:?}",
            z_b.dims(),
            z_e.dims()
        )));
    }
    let b = z_b.dims()[0];
    if lambda.dims() != [b] {
        return Err(Error::invalid(format!("lambda shape {:?} for batch {b}", lambda.dims())));
    }
    Ok((z_b + z_e.broadcast_mul(&lambda.reshape((b, 1))?)?)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CalibrationMode {
    Learned,
    Fixed(f64),
    /// Plain sum of the two logit sources (`lambda = 1`).
    Average,
}

impl FromStr for CalibrationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(Self::Learned),
            "average" => Ok(Self::Average),
            _ => match s.strip_prefix("fixed:").map(str::parse::<f64>) {
                Some(Ok(v)) if v.is_finite() => Ok(Self::Fixed(v)),
                _ => Err(Error::config(format!(
                    "unknown udcm mode `{s}` (learned | average | fixed:<lambda>)"
                ))),
            },
        }
    }
}

impl fmt::Display for CalibrationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Learned => f.write_str("learned"),
            Self::Average => f.write_str("average"),
            Self::Fixed(v) => write!(f, "fixed:{v}"),
        }
    }
}

impl Serialize for CalibrationMode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CalibrationMode {
    fn deserialize<De: Deserializer<'de>>(d: De) -> std::result::Result<Self, De::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UdcmConfig {
    pub bins: usize,
    pub beta: f64,
    pub range: [f64; 2],
    pub hidden: usize,
    pub mode: CalibrationMode,
}

impl Default for UdcmConfig {
    fn default() -> Self {
        Self {
            bins: 8,
            beta: 2.0,
            range: [0.0, 2.0],
            hidden: 32,
            mode: CalibrationMode::Learned,
        }
    }
}

pub struct CalibrationOutcome {
    /// Bin distribution; absent unless the mode is `learned`.
    pub s: Option<Tensor>,
    pub lambda: Tensor,
    pub z_hat: Tensor,
}

/// Calibration module in one of its three modes. Only `learned` owns
/// parameters.
pub struct Udcm {
    mode: CalibrationMode,
    learned: Option<(ClassDifficultyTable, BinHead)>,
}

impl Udcm {
    pub fn new(store: &mut ParamStore, cfg: &UdcmConfig, stats: &FrequencyStats) -> Result<Self> {
        let learned = match cfg.mode {
            CalibrationMode::Learned => {
                if stats.counts().len() < TOP_K {
                    return Err(Error::config(format!(
                        "learned calibration needs at least {TOP_K} classes, got {}",
                        stats.counts().len()
                    )));
                }
                let table = ClassDifficultyTable::new(store, stats)?;
                let head = BinHead::new(store, cfg.bins, cfg.range, cfg.hidden)?;
                Some((table, head))
            }
            _ => None,
        };
        Ok(Self {
            mode: cfg.mode,
            learned,
        })
    }

    pub fn mode(&self) -> CalibrationMode {
        self.mode
    }

    pub fn table(&self) -> Option<&ClassDifficultyTable> {
        self.learned.as_ref().map(|(t, _)| t)
    }

    pub fn head(&self) -> Option<&BinHead> {
        self.learned.as_ref().map(|(_, h)| h)
    }

    pub fn forward(&self, z_b: &Tensor, z_e: &Tensor) -> Result<CalibrationOutcome> {
        let b = z_b.dims().first().copied().unwrap_or(0);
        let constant = |v: f64| -> Result<Tensor> {
            Ok(Tensor::full(v, b, z_b.device())?.to_dtype(z_b.dtype())?)
        };
        let (s, lambda) = match (&self.mode, &self.learned) {
            (CalibrationMode::Learned, Some((table, head))) => {
                let w = table.weights().as_tensor();
                let u_b = uncertainty_embedding(w, z_b)?;
                let u_e = uncertainty_embedding(w, z_e)?;
                let (s, lambda) = head.forward(&u_b, &u_e)?;
                (Some(s), lambda)
            }
            (CalibrationMode::Fixed(v), _) => (None, constant(*v)?),
            (CalibrationMode::Average, _) => (None, constant(1.0)?),
            (CalibrationMode::Learned, None) => unreachable!("learned mode always builds its head"),
        };
        let z_hat = calibrate(z_b, z_e, &lambda)?;
        Ok(CalibrationOutcome { s, lambda, z_hat })
    }
}

/// Single-row convenience for `[entropy, max probability]`.
pub fn instance_uncertainty_row(logits: &[f64]) -> Result<[f64; 2]> {
    let t = Tensor::from_vec(logits.to_vec(), (1, logits.len()), &Device::Cpu)?.to_dtype(DType::F64)?;
    let v = instance_uncertainty(&t)?.to_vec2::<f64>()?;
    Ok([v[0][0], v[0][1]])
}
