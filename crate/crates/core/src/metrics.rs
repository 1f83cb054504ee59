//! Accuracy, macro/weighted precision-recall-F1, confusion matrices,
//! frequency-binned accuracy and the fusion-weight/frequency correlation.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Accuracy over test samples whose true class is rare (`N_c < 20`), common
/// (`20 <= N_c <= 50`) or abundant (`N_c > 50`); `None` for empty bins.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBins {
    pub rare: Option<f64>,
    pub common: Option<f64>,
    pub abundant: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LambdaStats {
    /// Mean fusion weight per true class; `None` where the class has no samples.
    pub per_class_mean: Vec<Option<f64>>,
    /// Spearman correlation between class count and mean weight.
    pub spearman: Option<f64>,
    pub global_mean: f64,
}

/// All metrics are percentages. Confusion rows are true classes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    #[serde(rename = "mP")]
    pub macro_p: f64,
    #[serde(rename = "mR")]
    pub macro_r: f64,
    #[serde(rename = "mF1")]
    pub macro_f1: f64,
    #[serde(rename = "wP")]
    pub weighted_p: f64,
    #[serde(rename = "wR")]
    pub weighted_r: f64,
    #[serde(rename = "wF1")]
    pub weighted_f1: f64,
    pub num_samples: usize,
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequency_bins: Option<FrequencyBins>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<LambdaStats>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn check_inputs(predictions: &[usize], truths: &[usize], num_classes: usize) -> Result<()> {
    if predictions.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} ground-truth labels",
            predictions.len(),
            truths.len()
        )));
    }
    if let Some(&bad) = predictions.iter().chain(truths).find(|&&c| c >= num_classes) {
        return Err(Error::invalid(format!("class index {bad} outside {num_classes} classes")));
    }
    Ok(())
}

/// Macro averages run over the classes that occur in the truths or the
/// predictions; weighted averages use true-class support.
pub fn compute_report(
    predictions: &[usize],
    truths: &[usize],
    num_classes: usize,
    counts: Option<&[usize]>,
    lambdas: Option<&[f64]>,
) -> Result<MetricsReport> {
    check_inputs(predictions, truths, num_classes)?;
    let n = truths.len();
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &t) in predictions.iter().zip(truths) {
        confusion[t][p] += 1;
    }
    let per_class: Vec<ClassMetrics> = (0..num_classes)
        .map(|c| {
            let tp = confusion[c][c];
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            ClassMetrics {
                precision,
                recall,
                f1: harmonic(precision, recall),
                support,
            }
        })
        .collect();
    let present: Vec<usize> = (0..num_classes)
        .filter(|&c| per_class[c].support > 0 || confusion.iter().any(|row| row[c] > 0))
        .collect();
    let macro_avg = |f: fn(&ClassMetrics) -> f64| {
        if present.is_empty() {
            0.0
        } else {
            100.0 * present.iter().map(|&c| f(&per_class[c])).sum::<f64>() / present.len() as f64
        }
    };
    let weighted_avg = |f: fn(&ClassMetrics) -> f64| {
        if n == 0 {
            0.0
        } else {
            100.0 * per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / n as f64
        }
    };
    let correct = (0..num_classes).map(|c| confusion[c][c]).sum();

    let frequency_bins = counts
        .map(|c| frequency_binned_accuracy(predictions, truths, c))
        .transpose()?;
    let lambda = match (lambdas, counts) {
        (Some(l), Some(c)) => Some(lambda_frequency_correlation(l, truths, c)?),
        _ => None,
    };

    Ok(MetricsReport {
        acc: 100.0 * ratio(correct, n),
        macro_p: macro_avg(|m| m.precision),
        macro_r: macro_avg(|m| m.recall),
        macro_f1: macro_avg(|m| m.f1),
        weighted_p: weighted_avg(|m| m.precision),
        weighted_r: weighted_avg(|m| m.recall),
        weighted_f1: weighted_avg(|m| m.f1),
        num_samples: n,
        confusion,
        per_class,
        frequency_bins,
        lambda,
    })
}

pub fn frequency_binned_accuracy(predictions: &[usize], truths: &[usize], counts: &[usize]) -> Result<FrequencyBins> {
    check_inputs(predictions, truths, counts.len())?;
    let mut tally = [(0usize, 0usize); 3];
    for (&p, &t) in predictions.iter().zip(truths) {
        let bin = match counts[t] {
            n if n < 20 => 0,
            n if n <= 50 => 1,
            _ => 2,
        };
        tally[bin].0 += usize::from(p == t);
        tally[bin].1 += 1;
    }
    let acc = |(hit, total): (usize, usize)| (total > 0).then(|| 100.0 * hit as f64 / total as f64);
    Ok(FrequencyBins {
        rare: acc(tally[0]),
        common: acc(tally[1]),
        abundant: acc(tally[2]),
    })
}

/// Ranks starting at 1; tied values share their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        Some(0.0)
    } else {
        Some(cov / (vx * vy).sqrt())
    }
}

/// Per-class mean fusion weight and its rank correlation with class count,
/// over classes that have at least one sample (absent below three classes).
pub fn lambda_frequency_correlation(lambdas: &[f64], truths: &[usize], counts: &[usize]) -> Result<LambdaStats> {
    if lambdas.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} lambda values for {} samples",
            lambdas.len(),
            truths.len()
        )));
    }
    let k = counts.len();
    let mut sums = vec![(0.0f64, 0usize); k];
    for (&l, &t) in lambdas.iter().zip(truths) {
        if t >= k {
            return Err(Error::invalid(format!("class index {t} outside {k} classes")));
        }
        sums[t].0 += l;
        sums[t].1 += 1;
    }
    let per_class_mean: Vec<Option<f64>> = sums
        .iter()
        .map(|&(s, n)| (n > 0).then(|| s / n as f64))
        .collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = per_class_mean
        .iter()
        .zip(counts)
        .filter_map(|(m, &c)| m.map(|m| (c as f64, m)))
        .unzip();
    let spearman = if xs.len() >= 3 { spearman(&xs, &ys) } else { None };
    let global_mean = if lambdas.is_empty() {
        0.0
    } else {
        lambdas.iter().sum::<f64>() / lambdas.len() as f64
    };
    Ok(LambdaStats {
        per_class_mean,
        spearman,
        global_mean,
    })
}

pub const TABLE_HEADER: &str = "| Method | Acc | mP | mR | mF1 | wP | wR | wF1 |\n|---|---|---|---|---|---|---|---|";

pub fn markdown_row(name: &str, r: &MetricsReport) -> String {
    format!(
        "| {name} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} |",
        r.acc, r.macro_p, r.macro_r, r.macro_f1, r.weighted_p, r.weighted_r, r.weighted_f1
    )
}

pub fn render_markdown(rows: &[(&str, &MetricsReport)]) -> String {
    let mut out = String::from(TABLE_HEADER);
    for (name, r) in rows {
        out.push('\n');
        out.push_str(&markdown_row(name, r));
    }
    out.push('\n');
    if let [(_, r)] = rows {
        if let Some(b) = &r.frequency_bins {
            let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
            out.push_str(&format!(
                "\nFrequency bins: rare {} | common {} | abundant {}\n",
                fmt(b.rare),
                fmt(b.common),
                fmt(b.abundant)
            ));
        }
        if let Some(l) = &r.lambda {
            out.push_str(&format!(
                "\nMean lambda {:.4}, Spearman rho(count, lambda) {}\n",
                l.global_mean,
                l.spearman.map_or("-".into(), |v| format!("{v:.4}"))
            ));
        }
    }
    out
}

/// Row-normalized confusion heatmap for `classes` (all when empty), `cell`
/// pixels per entry, white (0) to dark blue (1).
pub fn confusion_png(report: &MetricsReport, classes: &[usize], cell: u32, path: &Path) -> Result<()> {
    let k = report.confusion.len();
    let subset: Vec<usize> = if classes.is_empty() { (0..k).collect() } else { classes.to_vec() };
    if let Some(&bad) = subset.iter().find(|&&c| c >= k) {
        return Err(Error::invalid(format!("class {bad} outside {k} classes")));
    }
    let cell = cell.max(1);
    let side = subset.len() as u32 * cell;
    let mut img = RgbImage::new(side.max(1), side.max(1));
    for (i, &t) in subset.iter().enumerate() {
        let row_total: usize = report.confusion[t].iter().sum();
        for (j, &p) in subset.iter().enumerate() {
            let v = ratio(report.confusion[t][p], row_total) as f32;
            let shade = |k: f32| (255.0 * (1.0 - k * v)).round() as u8;
            let px = Rgb([shade(1.0), shade(0.8), shade(0.4)]);
            for dy in 0..cell {
                for dx in 0..cell {
                    img.put_pixel(j as u32 * cell + dx, i as u32 * cell + dy, px);
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}
