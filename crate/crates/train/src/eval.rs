//! Test-set evaluation: pixel metrics always, classifier metrics from a
//! probabilities file or the toy centroid classifier.

use std::collections::HashMap;
use std::path::Path;

use crossmlp_autograd::{Bound, Graph, Scalar, Tensor};
use crossmlp_core::metrics::{psnr, sharpness_difference, ssim, CentroidClassifier, ClassifierScores};
use crossmlp_core::{Classifier, CrossMlpGan, MetricReport};
use crossmlp_data::batch::load_batch;
use crossmlp_data::{BatchPlan, LoadOptions, Manifest};

use crate::error::{io_err, Result, TrainError};

/// Images live in `[-1, 1]`.
pub const DATA_RANGE: f64 = 2.0;
const TOY_TEMPERATURE: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ClassifierSource {
    None,
    /// `#classes K` file with `<id>/real` and `<id>/fake` rows.
    Probs(std::path::PathBuf),
    /// Centroid classifier fitted on the real targets.
    Toy,
}

type Rows = Vec<Vec<f64>>;

/// Per-id probability rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbsFile {
    pub classes: usize,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl ProbsFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let err = |line: usize, msg: String| TrainError::Probs { line: line + 1, msg };
        let (i, header) = lines.next().ok_or_else(|| err(0, "empty file".into()))?;
        let classes: usize = header
            .strip_prefix("#classes ")
            .and_then(|k| k.trim().parse().ok())
            .filter(|&k| k > 0)
            .ok_or_else(|| err(i, format!("expected `#classes K`, got `{header}`")))?;
        let mut rows = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in lines {
            let mut fields = line.split('\t');
            let id = fields.next().unwrap_or_default().to_string();
            let probs: Vec<f64> = fields
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| err(i, "probabilities must be numbers".into()))?;
            if probs.len() != classes {
                return Err(err(i, format!("{} probabilities, expected {classes}", probs.len())));
            }
            if !seen.insert(id.clone()) {
                return Err(err(i, format!("duplicate id `{id}`")));
            }
            rows.push((id, probs));
        }
        Ok(Self { classes, rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("#classes {}\n", self.classes);
        for (id, p) in &self.rows {
            let cells: Vec<String> = p.iter().map(f64::to_string).collect();
            s.push_str(&format!("{id}\t{}\n", cells.join("\t")));
        }
        s
    }

    /// `(fake, real)` rows in `ids` order.
    pub fn pairs(&self, ids: &[String]) -> Result<(Rows, Rows)> {
        let index: HashMap<&str, &Vec<f64>> = self.rows.iter().map(|(id, p)| (id.as_str(), p)).collect();
        let get = |key: String| {
            index
                .get(key.as_str())
                .map(|p| (*p).clone())
                .ok_or_else(|| TrainError::Probs { line: 0, msg: format!("no row for `{key}`") })
        };
        let mut fake = Vec::new();
        let mut real = Vec::new();
        for id in ids {
            fake.push(get(format!("{id}/fake"))?);
            real.push(get(format!("{id}/real"))?);
        }
        Ok((fake, real))
    }
}

/// Generated and ground-truth images of a test set, as `[C, H, W]` f64.
#[derive(Clone, Debug, Default)]
pub struct Generated {
    pub ids: Vec<String>,
    pub fake: Vec<Tensor<f64>>,
    pub real: Vec<Tensor<f64>>,
    /// Ground-truth semantic maps, `[K, H, W]`.
    pub semantic: Vec<Tensor<f64>>,
}

fn split<T: Scalar>(t: &Tensor<T>) -> Vec<Tensor<f64>> {
    (0..t.shape()[0])
        .map(|i| {
            let one = t.narrow(0, i, 1);
            let shape = one.shape()[1..].to_vec();
            one.cast::<f64>().reshape(&shape).expect("drop leading axis")
        })
        .collect()
}

/// Runs the two-stage generator over every manifest entry in order.
pub fn generate_all<T: Scalar>(
    gan: &CrossMlpGan<T>,
    manifest: &Manifest,
    opts: &LoadOptions,
    batch_size: usize,
) -> Result<Generated> {
    let plan = BatchPlan { batch_size: batch_size.max(1), shuffle: false, augment: false, seed: 0 };
    let mut out = Generated::default();
    let indices: Vec<usize> = (0..manifest.len()).collect();
    for group in indices.chunks(plan.batch_size) {
        let batch = load_batch::<T>(manifest, group, opts, &plan, 0)?;
        let g = Graph::new();
        let p = Bound::frozen(&g, &gan.gen_params);
        let o = gan.generator.forward(&p, g.constant(batch.source.clone()), g.constant(batch.semantic.clone()))?;
        out.fake.extend(split(&o.final_image.value()));
        out.real.extend(split(&batch.target));
        out.semantic.extend(split(&batch.semantic));
        out.ids.extend(batch.ids);
    }
    Ok(out)
}

/// Mean SSIM, PSNR and SD over the pairs.
pub fn pixel_metrics(fake: &[Tensor<f64>], real: &[Tensor<f64>]) -> Result<(f64, f64, f64)> {
    if fake.is_empty() || fake.len() != real.len() {
        return Err(TrainError::Config(format!("{} generated vs {} real images", fake.len(), real.len())));
    }
    let mut sums = (0.0, 0.0, 0.0);
    for (f, r) in fake.iter().zip(real) {
        sums.0 += ssim(f, r, DATA_RANGE)?;
        sums.1 += psnr(f, r, DATA_RANGE)?;
        sums.2 += sharpness_difference(f, r, DATA_RANGE)?;
    }
    let n = fake.len() as f64;
    Ok((sums.0 / n, sums.1 / n, sums.2 / n))
}

/// Toy label: the most frequent class other than 0 (sky) in the map.
pub fn dominant_class(semantic: &Tensor<f64>) -> usize {
    let k = semantic.shape()[0];
    let plane = semantic.len() / k;
    let counts: Vec<f64> = semantic.data().chunks(plane).map(|c| c.iter().sum()).collect();
    (1..k).fold(if k > 1 { 1 } else { 0 }, |best, c| if counts[c] > counts[best] { c } else { best })
}

pub fn toy_classifier(real: &[Tensor<f64>], semantic: &[Tensor<f64>]) -> Result<CentroidClassifier> {
    let classes = semantic.first().map_or(1, |s| s.shape()[0]);
    let labels: Vec<usize> = semantic.iter().map(dominant_class).collect();
    Ok(CentroidClassifier::fit(real, &labels, classes, TOY_TEMPERATURE)?)
}

pub fn report(generated: &Generated, classifier: &ClassifierSource) -> Result<MetricReport> {
    let (ssim, psnr, sd) = pixel_metrics(&generated.fake, &generated.real)?;
    let classifier = match classifier {
        ClassifierSource::None => None,
        ClassifierSource::Probs(path) => {
            let (fake, real) = ProbsFile::load(path)?.pairs(&generated.ids)?;
            Some(ClassifierScores::compute(&fake, &real)?)
        }
        ClassifierSource::Toy => {
            let c = toy_classifier(&generated.real, &generated.semantic)?;
            Some(ClassifierScores::compute(&c.predict(&generated.fake), &c.predict(&generated.real))?)
        }
    };
    Ok(MetricReport { pairs: generated.fake.len(), ssim, psnr, sd, classifier })
}

pub fn evaluate<T: Scalar>(
    gan: &CrossMlpGan<T>,
    manifest: &Manifest,
    opts: &LoadOptions,
    classifier: &ClassifierSource,
    batch_size: usize,
) -> Result<MetricReport> {
    if manifest.is_empty() {
        return Err(TrainError::Config("evaluation manifest lists no samples".into()));
    }
    report(&generate_all(gan, manifest, opts, batch_size)?, classifier)
}
