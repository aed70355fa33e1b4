//! Evaluation metrics: pixel-level similarity scores and classifier-based
//! scores computed from probability rows.

use std::fmt::{self, Write as _};

use crossmlp_autograd::Tensor;

use crate::error::{shape_err, ModelError, Result};

/// Returned by PSNR and SD for identical inputs instead of infinity.
pub const SCORE_CAP: f64 = 99.0;
/// Smoothing applied inside the KL score.
pub const KL_EPS: f64 = 1e-10;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn check_pair(op: &str, x: &Tensor<f64>, y: &Tensor<f64>, range: f64) -> Result<(usize, usize, usize)> {
    if x.shape() != y.shape() {
        return shape_err(format!("{op}: shapes {:?} and {:?} differ", x.shape(), y.shape()));
    }
    if range.is_nan() || range <= 0.0 {
        return Err(ModelError::Domain(format!("{op}: data range must be positive, got {range}")));
    }
    match *x.shape() {
        [h, w] => Ok((1, h, w)),
        [c, h, w] => Ok((c, h, w)),
        _ => shape_err(format!("{op}: expected [H, W] or [C, H, W], got {:?}", x.shape())),
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-region filtering of one `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5) over the valid
/// region, averaged over channels. Images smaller than 11 pixels use the
/// largest odd window that fits.
pub fn ssim(x: &Tensor<f64>, y: &Tensor<f64>, data_range: f64) -> Result<f64> {
    let (c, h, w) = check_pair("ssim", x, y, data_range)?;
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    if size == 0 {
        return shape_err("ssim: empty image");
    }
    let k = gaussian_window(size, SSIM_SIGMA);
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let xs = &x.data()[ch * plane..(ch + 1) * plane];
        let ys = &y.data()[ch * plane..(ch + 1) * plane];
        let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mx = filter_valid(xs, h, w, &k);
        let my = filter_valid(ys, h, w, &k);
        let mxx = filter_valid(&prod(xs, xs), h, w, &k);
        let myy = filter_valid(&prod(ys, ys), h, w, &k);
        let mxy = filter_valid(&prod(xs, ys), h, w, &k);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cov = mxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / c as f64)
}

fn capped_psnr(mse: f64, data_range: f64) -> f64 {
    if mse == 0.0 {
        SCORE_CAP
    } else {
        (10.0 * (data_range * data_range / mse).log10()).min(SCORE_CAP)
    }
}

/// `10 log10(range^2 / MSE)`, capped at [`SCORE_CAP`].
pub fn psnr(x: &Tensor<f64>, y: &Tensor<f64>, data_range: f64) -> Result<f64> {
    check_pair("psnr", x, y, data_range)?;
    let mse = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64;
    Ok(capped_psnr(mse, data_range))
}

/// PSNR between the gradient-magnitude maps `|d_h| + |d_v|` (forward
/// differences, over the `(H-1) x (W-1)` positions where both exist).
pub fn sharpness_difference(x: &Tensor<f64>, y: &Tensor<f64>, data_range: f64) -> Result<f64> {
    let (c, h, w) = check_pair("sharpness_difference", x, y, data_range)?;
    if h < 2 || w < 2 {
        return shape_err(format!("sharpness_difference: {h}x{w} image has no gradients"));
    }
    let grad = |d: &[f64], ch: usize, i: usize, j: usize| {
        let at = |i: usize, j: usize| d[(ch * h + i) * w + j];
        (at(i, j + 1) - at(i, j)).abs() + (at(i + 1, j) - at(i, j)).abs()
    };
    let mut sum = 0.0;
    for ch in 0..c {
        for i in 0..h - 1 {
            for j in 0..w - 1 {
                sum += (grad(x.data(), ch, i, j) - grad(y.data(), ch, i, j)).powi(2);
            }
        }
    }
    Ok(capped_psnr(sum / (c * (h - 1) * (w - 1)) as f64, data_range))
}

fn check_rows(op: &str, probs: &[Vec<f64>]) -> Result<usize> {
    let k = probs.first().map(Vec::len).ok_or_else(|| ModelError::Domain(format!("{op}: no probability rows")))?;
    for (i, row) in probs.iter().enumerate() {
        if row.len() != k {
            return shape_err(format!("{op}: row {i} has {} classes, expected {k}", row.len()));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-4 || row.iter().any(|&p| p.is_nan() || p < 0.0) {
            return Err(ModelError::Domain(format!("{op}: row {i} is not a probability vector (sum {s})")));
        }
    }
    Ok(k)
}

fn marginal(probs: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; probs[0].len()];
    for row in probs {
        for (a, &p) in m.iter_mut().zip(row) {
            *a += p;
        }
    }
    m.iter_mut().for_each(|a| *a /= probs.len() as f64);
    m
}

/// `KL(p || q)` with zero-probability terms of `p` dropped.
fn kl(p: &[f64], q: &[f64], eps: f64) -> f64 {
    p.iter().zip(q).filter(|(&a, _)| a > 0.0).map(|(&a, &b)| a * ((a + eps) / (b + eps)).ln()).sum()
}

/// `exp(mean_i KL(p(y|x_i) || p(y)))`, averaged over `splits` equal parts.
pub fn inception_score(probs: &[Vec<f64>], splits: usize) -> Result<f64> {
    check_rows("inception_score", probs)?;
    if splits == 0 || splits > probs.len() {
        return Err(ModelError::Config(format!("inception_score: {splits} splits for {} rows", probs.len())));
    }
    let n = probs.len();
    let mut total = 0.0;
    for s in 0..splits {
        let part = &probs[s * n / splits..(s + 1) * n / splits];
        let m = marginal(part);
        let mean_kl = part.iter().map(|p| kl(p, &m, 0.0)).sum::<f64>() / part.len() as f64;
        total += mean_kl.exp();
    }
    Ok(total / splits as f64)
}

/// Keep the `k` largest entries of each row and renormalise.
pub fn truncate_top_k(probs: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    probs
        .iter()
        .map(|row| {
            let keep = top_k_indices(row, k);
            let mass: f64 = keep.iter().map(|&i| row[i]).sum();
            let mut out = vec![0.0; row.len()];
            for i in keep {
                out[i] = if mass > 0.0 { row[i] / mass } else { 1.0 / k as f64 };
            }
            out
        })
        .collect()
}

/// Indices of the `k` largest entries; ties go to the lower index.
fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn argmax(row: &[f64]) -> usize {
    top_k_indices(row, 1)[0]
}

/// Mean and population standard deviation of `KL(p(y|x_fake) || mean real)`.
pub fn kl_score(fake: &[Vec<f64>], real: &[Vec<f64>]) -> Result<(f64, f64)> {
    let kf = check_rows("kl_score", fake)?;
    let kr = check_rows("kl_score", real)?;
    if kf != kr {
        return shape_err(format!("kl_score: {kf} fake classes vs {kr} real classes"));
    }
    let m = marginal(real);
    let vals: Vec<f64> = fake.iter().map(|p| kl(p, &m, KL_EPS)).collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    Ok((mean, var.sqrt()))
}

/// Which paired rows enter a top-k accuracy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AccuracySubset {
    All,
    /// Only pairs whose real top-1 probability exceeds the threshold.
    Confident(f64),
}

/// Percentage of pairs whose fake argmax lies in the real top-`k` classes.
/// `None` when the subset is empty.
pub fn topk_accuracy(fake: &[Vec<f64>], real: &[Vec<f64>], k: usize, subset: AccuracySubset) -> Result<Option<f64>> {
    let kf = check_rows("topk_accuracy", fake)?;
    check_rows("topk_accuracy", real)?;
    if fake.len() != real.len() || fake[0].len() != real[0].len() {
        return shape_err("topk_accuracy: fake and real rows are not paired");
    }
    if k == 0 || k > kf {
        return Err(ModelError::Config(format!("topk_accuracy: k={k} outside 1..={kf}")));
    }
    let mut hits = 0usize;
    let mut count = 0usize;
    for (f, r) in fake.iter().zip(real) {
        if let AccuracySubset::Confident(t) = subset {
            if r[argmax(r)] <= t {
                continue;
            }
        }
        count += 1;
        if top_k_indices(r, k).contains(&argmax(f)) {
            hits += 1;
        }
    }
    Ok((count > 0).then(|| 100.0 * hits as f64 / count as f64))
}

/// Callable contract for the metrics that live in a classifier's
/// feature space: images in, probability rows out.
pub trait Classifier {
    fn classes(&self) -> usize;
    /// One probability row per image (`[C, H, W]`, values in `[-1, 1]`).
    fn predict(&self, images: &[Tensor<f64>]) -> Vec<Vec<f64>>;
}

/// Nearest-centroid softmax classifier on per-channel mean colour; small
/// enough to fit on toy data in one pass.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidClassifier {
    pub centroids: Vec<Vec<f64>>,
    pub temperature: f64,
}

impl CentroidClassifier {
    fn features(image: &Tensor<f64>) -> Vec<f64> {
        let c = image.shape()[0];
        let plane = image.len() / c;
        image.data().chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect()
    }

    /// Class centroids from labelled images. Classes without examples get
    /// an all-zero centroid.
    pub fn fit(images: &[Tensor<f64>], labels: &[usize], classes: usize, temperature: f64) -> Result<Self> {
        if images.len() != labels.len() || images.is_empty() {
            return shape_err("classifier fit: need one label per image");
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(ModelError::Config(format!("classifier fit: label {bad} >= {classes} classes")));
        }
        let dim = images[0].shape()[0];
        let mut sums = vec![vec![0.0; dim]; classes];
        let mut counts = vec![0usize; classes];
        for (img, &l) in images.iter().zip(labels) {
            for (s, f) in sums[l].iter_mut().zip(Self::features(img)) {
                *s += f;
            }
            counts[l] += 1;
        }
        for (s, &n) in sums.iter_mut().zip(&counts) {
            if n > 0 {
                s.iter_mut().for_each(|v| *v /= n as f64);
            }
        }
        Ok(Self { centroids: sums, temperature })
    }
}

impl Classifier for CentroidClassifier {
    fn classes(&self) -> usize {
        self.centroids.len()
    }

    fn predict(&self, images: &[Tensor<f64>]) -> Vec<Vec<f64>> {
        images
            .iter()
            .map(|img| {
                let f = Self::features(img);
                let logits: Vec<f64> = self
                    .centroids
                    .iter()
                    .map(|c| -c.iter().zip(&f).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / self.temperature)
                    .collect();
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            })
            .collect()
    }
}

/// Scores that need classifier probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierScores {
    pub inception_all: f64,
    pub inception_top1: f64,
    pub inception_top5: f64,
    pub kl_mean: f64,
    pub kl_std: f64,
    pub acc_top1_all: Option<f64>,
    pub acc_top1_confident: Option<f64>,
    pub acc_top5_all: Option<f64>,
    pub acc_top5_confident: Option<f64>,
}

/// Real top-1 probability above which a pair counts as confident.
pub const CONFIDENCE_THRESHOLD: f64 = 0.5;

impl ClassifierScores {
    pub fn compute(fake: &[Vec<f64>], real: &[Vec<f64>]) -> Result<Self> {
        let k = check_rows("classifier scores", fake)?;
        let k5 = k.min(5);
        let (kl_mean, kl_std) = kl_score(fake, real)?;
        let acc = |top, subset| topk_accuracy(fake, real, top, subset);
        let conf = AccuracySubset::Confident(CONFIDENCE_THRESHOLD);
        Ok(Self {
            inception_all: inception_score(fake, 1)?,
            inception_top1: inception_score(&truncate_top_k(fake, 1), 1)?,
            inception_top5: inception_score(&truncate_top_k(fake, k5), 1)?,
            kl_mean,
            kl_std,
            acc_top1_all: acc(1, AccuracySubset::All)?,
            acc_top1_confident: acc(1, conf)?,
            acc_top5_all: acc(k5, AccuracySubset::All)?,
            acc_top5_confident: acc(k5, conf)?,
        })
    }
}

/// Everything `eval` reports. Classifier metrics are `None` when no
/// classifier or probability file was supplied.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub pairs: usize,
    pub ssim: f64,
    pub psnr: f64,
    pub sd: f64,
    pub classifier: Option<ClassifierScores>,
}

impl MetricReport {
    /// Machine-readable `key=value` lines; absent metrics print `absent`.
    pub fn key_values(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("pairs".to_string(), self.pairs.to_string()),
            ("ssim".into(), format!("{:.6}", self.ssim)),
            ("psnr".into(), format!("{:.6}", self.psnr)),
            ("sd".into(), format!("{:.6}", self.sd)),
        ];
        let opt = |v: Option<f64>| v.map_or("absent".to_string(), |v| format!("{v:.6}"));
        let c = self.classifier.as_ref();
        let fields: [(&str, Option<f64>); 9] = [
            ("acc_top1_all", c.and_then(|c| c.acc_top1_all)),
            ("acc_top1_confident", c.and_then(|c| c.acc_top1_confident)),
            ("acc_top5_all", c.and_then(|c| c.acc_top5_all)),
            ("acc_top5_confident", c.and_then(|c| c.acc_top5_confident)),
            ("inception_all", c.map(|c| c.inception_all)),
            ("inception_top1", c.map(|c| c.inception_top1)),
            ("inception_top5", c.map(|c| c.inception_top5)),
            ("kl_mean", c.map(|c| c.kl_mean)),
            ("kl_std", c.map(|c| c.kl_std)),
        ];
        kv.extend(fields.into_iter().map(|(k, v)| (k.to_string(), opt(v))));
        kv
    }

    /// One table row; `table` and `comparison_table` share the layout.
    pub fn table_row(&self, method: &str) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
        let c = self.classifier.as_ref();
        let kl = c.map_or("-".to_string(), |c| format!("{:.2} ± {:.2}", c.kl_mean, c.kl_std));
        let cells = [
            method.to_string(),
            opt(c.and_then(|c| c.acc_top1_all)),
            opt(c.and_then(|c| c.acc_top1_confident)),
            opt(c.and_then(|c| c.acc_top5_all)),
            opt(c.and_then(|c| c.acc_top5_confident)),
            opt(c.map(|c| c.inception_all)),
            opt(c.map(|c| c.inception_top1)),
            opt(c.map(|c| c.inception_top5)),
            format!("{:.4}", self.ssim),
            format!("{:.4}", self.psnr),
            format!("{:.4}", self.sd),
            kl,
        ];
        format!("| {} |", cells.join(" | "))
    }

    /// Table with the accuracy / inception / pixel / KL column groups.
    pub fn table(&self, method: &str) -> String {
        comparison_table(&[(method, self)])
    }
}

pub const TABLE_HEADER: &str = "| Method | Acc Top-1 (all) | Acc Top-1 (conf) | Acc Top-5 (all) | Acc Top-5 (conf) | IS all | IS Top-1 | IS Top-5 | SSIM | PSNR | SD | KL |";

/// Several labelled reports under one header.
pub fn comparison_table(rows: &[(&str, &MetricReport)]) -> String {
    let mut out = String::new();
    out.push_str(TABLE_HEADER);
    out.push_str("\n|---|---|---|---|---|---|---|---|---|---|---|---|\n");
    for (method, report) in rows {
        let _ = writeln!(out, "{}", report.table_row(method));
    }
    out
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.key_values() {
            writeln!(f, "{k}={v}")?;
        }
        write!(f, "\n{}", self.table("CrossMLP"))
    }
}
