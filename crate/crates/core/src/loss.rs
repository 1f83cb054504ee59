//! Composite objective: backbone CE + expert CE + per-sample CE on the
//! calibrated logits weighted by the detached fusion weight.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::log_softmax;

/// Batch means of each term. `l_e` and `l_cal` are zero when the expert
/// branch is disabled.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_b")]
    pub l_b: f64,
    #[serde(rename = "L_e")]
    pub l_e: f64,
    #[serde(rename = "L_cal")]
    pub l_cal: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub mean_lambda: f64,
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "L_b={:.6} L_e={:.6} L_cal={:.6} L_total={:.6} mean_lambda={:.4}",
            self.l_b, self.l_e, self.l_cal, self.l_total, self.mean_lambda
        )
    }
}

/// `-ln softmax(logits)[label]` through log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::invalid(format!("label {label} outside {} classes", logits.len())));
    }
    let top = crate::nn::argmax(logits).expect("non-empty");
    let max = logits[top];
    // ln_1p keeps precision when the label already dominates.
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != top)
        .map(|(_, z)| (z - max).exp())
        .sum();
    Ok((max - logits[label]) + rest.ln_1p())
}

fn label_tensor(labels: &[usize], k: usize, logits: &Tensor) -> Result<Tensor> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} outside {k} classes")));
    }
    let idx: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    Ok(Tensor::from_vec(idx, (labels.len(), 1), logits.device())?)
}

/// Per-sample CE `(B,)` for `(B, K)` logits.
pub fn cross_entropy_per_sample(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, k) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::invalid(format!("{} labels for a batch of {b}", labels.len())));
    }
    let idx = label_tensor(labels, k, logits)?;
    Ok((log_softmax(logits)?.gather(&idx, D::Minus1)?.squeeze(1)? * -1.0)?)
}

pub struct ExpertTerms<'a> {
    pub z_e: &'a Tensor,
    pub z_hat: &'a Tensor,
    /// Per-sample fusion weight `(B,)`; detached before use.
    pub lambda: &'a Tensor,
}

pub struct TotalLoss {
    pub total: Tensor,
    /// The detached per-sample weights multiplying the calibrated CE.
    pub weights: Option<Tensor>,
    pub breakdown: LossBreakdown,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

fn finite(term: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence {
            term,
            last: "none".into(),
        })
    }
}

/// `L_b + L_e + mean_i(sg(lambda_i) * CE(z_hat_i))`, or `L_b` alone without
/// the expert branch.
pub fn total_loss(z_b: &Tensor, expert: Option<ExpertTerms<'_>>, labels: &[usize]) -> Result<TotalLoss> {
    let l_b = cross_entropy_per_sample(z_b, labels)?.mean_all()?;
    let l_b_val = finite("L_b", scalar(&l_b)?)?;
    let Some(ex) = expert else {
        return Ok(TotalLoss {
            total: l_b,
            weights: None,
            breakdown: LossBreakdown {
                l_b: l_b_val,
                l_total: l_b_val,
                ..Default::default()
            },
        });
    };
    if ex.z_e.dims() != z_b.dims() || ex.z_hat.dims() != z_b.dims() {
        return Err(Error::invalid(format!(
            "logit shapes disagree: z_b {:?}, z_e {:?}, z_hat {:?}",
            z_b.dims(),
            ex.z_e.dims(),
            ex.z_hat.dims()
        )));
    }
    if ex.lambda.dims() != [labels.len()] {
        return Err(Error::invalid(format!(
            "lambda shape {:?} for batch {}",
            ex.lambda.dims(),
            labels.len()
        )));
    }
    let l_e = cross_entropy_per_sample(ex.z_e, labels)?.mean_all()?;
    let weights = ex.lambda.detach();
    let l_cal = cross_entropy_per_sample(ex.z_hat, labels)?.mul(&weights)?.mean_all()?;
    let total = ((&l_b + &l_e)? + &l_cal)?;
    let breakdown = LossBreakdown {
        l_b: l_b_val,
        l_e: finite("L_e", scalar(&l_e)?)?,
        l_cal: finite("L_cal", scalar(&l_cal)?)?,
        l_total: finite("L_total", scalar(&total)?)?,
        mean_lambda: finite("lambda", scalar(&weights.mean_all()?)?)?,
    };
    Ok(TotalLoss {
        total,
        weights: Some(weights),
        breakdown,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::udcm::{Udcm, UdcmConfig, FrequencyStats};
    use candle_core::{DType, Device};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(rows: Vec<Vec<f64>>) -> Tensor {
        let (b, k) = (rows.len(), rows[0].len());
        Tensor::from_vec(rows.concat(), (b, k), &Device::Cpu).unwrap()
    }

    #[test]
    fn scalar_ce_examples() {
        assert!((cross_entropy(&[0.0, 0.0], 0).unwrap() - 2f64.ln()).abs() < 1e-12);
        let tiny = cross_entropy(&[10.0, -10.0], 0).unwrap();
        assert!((tiny / (-20f64).exp().ln_1p() - 1.0).abs() < 1e-12);
        assert!((tiny - 2.061e-9).abs() < 1e-12);
        let v = cross_entropy(&[1.0, 2.0, 3.0], 2).unwrap();
        let oracle = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 0.40761).abs() < 1e-5);
        assert!(matches!(cross_entropy(&[1.0], 1), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn tensor_ce_matches_scalar_ce() {
        let rows = vec![vec![1.0, 2.0, 3.0], vec![10.0, -10.0, 0.0]];
        let ce = cross_entropy_per_sample(&t(rows.clone()), &[2, 0]).unwrap().to_vec1::<f64>().unwrap();
        for (i, row) in rows.iter().enumerate() {
            assert!((ce[i] - cross_entropy(row, [2, 0][i]).unwrap()).abs() < 1e-12);
            assert!(ce[i] >= 0.0);
        }
        assert!(cross_entropy_per_sample(&t(rows), &[3, 0]).is_err());
    }

    #[test]
    fn zero_lambda_drops_the_calibrated_term() {
        let zb = t(vec![vec![1.0, 0.0, -1.0], vec![0.5, 0.2, 0.1]]);
        let ze = t(vec![vec![0.0, 2.0, 0.0], vec![1.0, 0.0, 0.0]]);
        let zh = t(vec![vec![3.0, 3.0, 3.0], vec![0.0, 0.0, 9.0]]);
        let lam = Tensor::zeros(2, DType::F64, &Device::Cpu).unwrap();
        let out = total_loss(&zb, Some(ExpertTerms { z_e: &ze, z_hat: &zh, lambda: &lam }), &[0, 1]).unwrap();
        let b = &out.breakdown;
        assert_eq!(b.l_cal, 0.0);
        assert!((b.l_total - (b.l_b + b.l_e)).abs() < 1e-12);
    }

    #[test]
    fn unit_lambda_with_silent_expert_doubles_the_backbone_term() {
        let zb = t(vec![vec![1.0, 0.0, -1.0], vec![0.5, 0.2, 0.1]]);
        let ze = Tensor::zeros((2, 3), DType::F64, &Device::Cpu).unwrap();
        let lam = Tensor::ones(2, DType::F64, &Device::Cpu).unwrap();
        let out = total_loss(&zb, Some(ExpertTerms { z_e: &ze, z_hat: &zb, lambda: &lam }), &[2, 0]).unwrap();
        let b = &out.breakdown;
        assert!((b.l_total - (2.0 * b.l_b + b.l_e)).abs() < 1e-12);
        assert!((b.l_e - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn larger_lambda_weighs_the_calibrated_term_more() {
        let zb = t(vec![vec![1.0, 0.0, -1.0]]);
        let zh = t(vec![vec![0.0, 1.0, 0.0]]);
        let mut prev = -1.0;
        for l in [0.125, 0.5, 1.0, 1.875] {
            let lam = Tensor::new(&[l], &Device::Cpu).unwrap();
            let out = total_loss(&zb, Some(ExpertTerms { z_e: &zb, z_hat: &zh, lambda: &lam }), &[0]).unwrap();
            assert!(out.breakdown.l_cal > prev);
            prev = out.breakdown.l_cal;
        }
    }

    #[test]
    fn non_finite_terms_name_themselves() {
        let zb = t(vec![vec![f64::NAN, 0.0]]);
        match total_loss(&zb, None, &[0]) {
            Err(Error::Divergence { term: "L_b", .. }) => {}
            other => panic!("expected L_b divergence, got {:?}", other.err()),
        }
        let ok = t(vec![vec![1.0, 0.0]]);
        let bad = t(vec![vec![f64::INFINITY, 0.0]]);
        let lam = Tensor::ones(1, DType::F64, &Device::Cpu).unwrap();
        match total_loss(&ok, Some(ExpertTerms { z_e: &bad, z_hat: &ok, lambda: &lam }), &[1]) {
            Err(Error::Divergence { term: "L_e", .. }) => {}
            other => panic!("expected L_e divergence, got {:?}", other.err()),
        }
    }

    // Autodiff of L_total through the bin head must equal central differences
    // of the loss with the per-sample weights held at their unperturbed values.
    #[test]
    fn head_gradient_respects_the_stop_gradient() {
        let mut store = ParamStore::new(21, DType::F64);
        let stats = FrequencyStats::new(vec![50, 30, 12, 8], 2.0).unwrap();
        let udcm = Udcm::new(&mut store, &UdcmConfig::default(), &stats).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rnd = |b: usize| t((0..b).map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).collect());
        let (zb, ze) = (rnd(3), rnd(3));
        let labels = [0, 2, 3];

        let out = udcm.forward(&zb, &ze).unwrap();
        let loss = total_loss(&zb, Some(ExpertTerms { z_e: &ze, z_hat: &out.z_hat, lambda: &out.lambda }), &labels).unwrap();
        let w0 = loss.weights.clone().unwrap();
        assert!(!w0.track_op(), "the stop-gradient weight must be a graph constant");
        let grads = loss.total.backward().unwrap();

        // With z_hat independent of lambda, lambda reaches the loss only via the
        // weight, so the head must receive no gradient at all.
        let zh = zb.detach();
        let only_weight = total_loss(&zb, Some(ExpertTerms { z_e: &ze, z_hat: &zh, lambda: &out.lambda }), &labels).unwrap();
        let g_weight = only_weight.total.backward().unwrap();
        for (path, var) in store.iter().filter(|(p, _)| p.starts_with("udcm.")) {
            let leak = g_weight
                .get(var.as_tensor())
                .map_or(0.0, |g| g.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap());
            assert_eq!(leak, 0.0, "{path} received gradient through sg(lambda)");
        }

        let frozen_loss = |udcm: &Udcm| -> f64 {
            let o = udcm.forward(&zb, &ze).unwrap();
            let ce = cross_entropy_per_sample(&o.z_hat, &labels).unwrap();
            let cal = ce.mul(&w0).unwrap().mean_all().unwrap().to_scalar::<f64>().unwrap();
            let lb = cross_entropy_per_sample(&zb, &labels).unwrap().mean_all().unwrap().to_scalar::<f64>().unwrap();
            let le = cross_entropy_per_sample(&ze, &labels).unwrap().mean_all().unwrap().to_scalar::<f64>().unwrap();
            lb + le + cal
        };
        let step = 1e-3;
        let mut checked = 0;
        for (path, var) in store.iter().filter(|(p, _)| p.starts_with("udcm.fc") || p.starts_with("udcm.proj")) {
            let g = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for j in (0..base.len()).step_by((base.len() / 5).max(1)) {
                let set = |d: f64| {
                    let mut v = base.clone();
                    v[j] += d;
                    var.set(&Tensor::from_vec(v, var.shape(), &Device::Cpu).unwrap()).unwrap();
                };
                set(step);
                let plus = frozen_loss(&udcm);
                set(-step);
                let minus = frozen_loss(&udcm);
                set(0.0);
                let fd = (plus - minus) / (2.0 * step);
                assert!(
                    (g[j] - fd).abs() <= 1e-3 * fd.abs().max(g[j].abs()) || (g[j] - fd).abs() < 1e-10,
                    "{path}[{j}]: {} vs {fd}",
                    g[j]
                );
                checked += 1;
            }
        }
        assert!(checked >= 20);
    }
}
