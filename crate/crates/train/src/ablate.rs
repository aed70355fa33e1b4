//! Block-count and pixel-loss ablations: one train + evaluate run per
//! value, reported in a single table.

use crossmlp_autograd::Scalar;
use crossmlp_core::metrics::comparison_table;
use crossmlp_core::MetricReport;
use crossmlp_data::Manifest;

use crate::config::{PixelLoss, RunConfig};
use crate::error::{Result, TrainError};
use crate::eval::{evaluate, ClassifierSource};
use crate::run::{load_options, train};
use crate::state::TrainState;

/// The only block counts the blocks axis accepts.
pub const BLOCK_VALUES: [usize; 4] = [3, 5, 7, 9];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Blocks,
    Loss,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "blocks" => Ok(AblationAxis::Blocks),
            "loss" => Ok(AblationAxis::Loss),
            _ => Err(TrainError::Config(format!("unknown ablation axis `{s}` (blocks|loss)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Blocks => "blocks",
            AblationAxis::Loss => "loss",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub config: RunConfig,
    pub report: MetricReport,
}

/// One `(label, config)` per value; `values` defaults to the whole axis.
/// Each variant trains into `<out_dir>/<axis>_<value>`.
pub fn variants(base: &RunConfig, axis: AblationAxis, values: Option<&[String]>) -> Result<Vec<(String, RunConfig)>> {
    let defaults: Vec<String> = match axis {
        AblationAxis::Blocks => BLOCK_VALUES.iter().map(usize::to_string).collect(),
        AblationAxis::Loss => vec!["baseline".into(), "refined".into()],
    };
    let values = values.map(<[String]>::to_vec).unwrap_or(defaults);
    if values.is_empty() {
        return Err(TrainError::Config("ablation needs at least one value".into()));
    }
    let mut out: Vec<(String, RunConfig)> = Vec::new();
    for v in values {
        let mut c = base.clone();
        let label = match axis {
            AblationAxis::Blocks => {
                let blocks: usize =
                    v.parse().ok().filter(|b| BLOCK_VALUES.contains(b)).ok_or_else(|| {
                        TrainError::Config(format!("block count `{v}` is not one of {BLOCK_VALUES:?}"))
                    })?;
                c.model.blocks = blocks;
                format!("{blocks} blocks")
            }
            AblationAxis::Loss => {
                c.loss.pixel = PixelLoss::parse(&v)
                    .ok_or_else(|| TrainError::Config(format!("loss variant `{v}` is not baseline|refined")))?;
                format!("{v} loss")
            }
        };
        if out.iter().any(|(l, _)| *l == label) {
            return Err(TrainError::Config(format!("ablation value `{v}` given twice")));
        }
        c.train.out_dir = base.train.out_dir.join(format!("{}_{v}", axis.name()));
        c.validate()?;
        out.push((label, c));
    }
    Ok(out)
}

pub fn ablate<T: Scalar>(
    base: &RunConfig,
    axis: AblationAxis,
    values: Option<&[String]>,
    classifier: &ClassifierSource,
    mut echo: impl FnMut(&str),
) -> Result<Vec<AblationRow>> {
    let runs = variants(base, axis, values)?;
    let test = Manifest::load(&base.data.test_manifest)?;
    let mut rows = Vec::new();
    for (label, config) in runs {
        echo(&format!("# {label}: training into {}", config.train.out_dir.display()));
        let summary = train::<T>(&config, None, &mut echo)?;
        let state = TrainState::<T>::load(&summary.final_checkpoint)?;
        let report = evaluate(&state.gan, &test, &load_options(&config), classifier, config.train.batch_size)?;
        rows.push(AblationRow { label, config, report });
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    comparison_table(&rows.iter().map(|r| (r.label.as_str(), &r.report)).collect::<Vec<_>>())
}
