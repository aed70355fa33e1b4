//! The epoch loop: batching, logging, periodic and final checkpoints,
//! resumption.

use std::io::Write;
use std::path::{Path, PathBuf};

use crossmlp_autograd::Scalar;
use crossmlp_data::batch::{epoch_order, load_batch};
use crossmlp_data::{BatchPlan, LoadOptions, Manifest};

use crate::config::RunConfig;
use crate::error::{io_err, Result, TrainError};
use crate::state::{initialize, TrainState};
use crate::step::{train_step, StepRecord};

pub const LOG_FILE: &str = "train.log";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const CONFIG_FILE: &str = "config.txt";

pub fn load_options(config: &RunConfig) -> LoadOptions {
    LoadOptions {
        size: config.model.image_size as u32,
        classes: config.model.semantic_classes,
        source_center_crop: (config.data.source_center_crop > 0).then_some(config.data.source_center_crop),
    }
}

pub fn batch_plan(config: &RunConfig) -> BatchPlan {
    BatchPlan {
        batch_size: config.train.batch_size,
        shuffle: config.train.shuffle,
        augment: config.train.augment,
        seed: config.train.seed,
    }
}

/// Steps the schedule asks for in total, after the `max_steps` cap.
pub fn total_steps(config: &RunConfig, samples: usize) -> u64 {
    let per_epoch = samples.div_ceil(config.train.batch_size.max(1)) as u64;
    let total = config.train.epochs * per_epoch;
    match config.train.max_steps {
        0 => total,
        cap => total.min(cap),
    }
}

pub fn step_checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.ckpt")
}

/// Runs from `state.step` to the end of the schedule. The batch for global
/// step `k` depends only on `(seed, k)`, so a resumed run sees the same
/// data as an uninterrupted one.
pub fn train_loop<T: Scalar>(
    state: &mut TrainState<T>,
    manifest: &Manifest,
    mut on_step: impl FnMut(&StepRecord, &TrainState<T>) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    let config = state.config.clone();
    let (opts, plan) = (load_options(&config), batch_plan(&config));
    let per_epoch = manifest.len().div_ceil(config.train.batch_size.max(1)) as u64;
    let total = total_steps(&config, manifest.len());
    let mut records = Vec::new();
    let mut cached: Option<(u64, Vec<Vec<usize>>)> = None;
    while state.step < total {
        let (epoch, index) = (state.step / per_epoch, (state.step % per_epoch) as usize);
        if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            cached = Some((epoch, epoch_order(manifest.len(), &plan, epoch)?));
        }
        let group = &cached.as_ref().expect("cached order").1[index];
        let batch = load_batch::<T>(manifest, group, &opts, &plan, epoch)?;
        // Freezing contract spot-checked on the first batch of every epoch.
        let record = train_step(state, &batch, index == 0)?;
        on_step(&record, state)?;
        records.push(record);
    }
    Ok(records)
}

/// Outcome of [`train`].
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub records: Vec<StepRecord>,
    pub final_checkpoint: PathBuf,
    pub final_step: u64,
}

/// Full run: writes the resolved config, `train.log` (appended on resume),
/// `step_<n>.ckpt` every `checkpoint_every` steps and `final.ckpt`.
pub fn train<T: Scalar>(config: &RunConfig, resume: Option<&Path>, mut echo: impl FnMut(&str)) -> Result<RunSummary> {
    config.validate()?;
    let out = &config.train.out_dir;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    std::fs::write(out.join(CONFIG_FILE), config.to_text()).map_err(io_err(out.join(CONFIG_FILE)))?;
    let mut state = match resume {
        Some(path) => {
            let mut s = TrainState::<T>::load(path)?;
            s.adopt_config(config.clone())?;
            s
        }
        None => initialize::<T>(config)?,
    };
    let manifest = Manifest::load(&config.data.train_manifest)?;
    if manifest.is_empty() {
        return Err(TrainError::Config(format!("{} lists no samples", config.data.train_manifest.display())));
    }
    manifest.check_files()?;

    let log_path = out.join(LOG_FILE);
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    let every = config.train.checkpoint_every;
    let records = train_loop(&mut state, &manifest, |record, state| {
        let line = record.log_line();
        writeln!(log, "{line}").map_err(io_err(&log_path))?;
        echo(&line);
        if every > 0 && record.step % every == 0 {
            state.save(&out.join(step_checkpoint_name(record.step)))?;
        }
        Ok(())
    })?;
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    state.save(&final_checkpoint)?;
    Ok(RunSummary { records, final_checkpoint, final_step: state.step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::tiny_config;
    use crossmlp_data::generate_toy_dataset;

    fn setup(dir: &Path, n: usize) -> RunConfig {
        let data = dir.join("data");
        generate_toy_dataset(&data, n, 32, 4, 1).unwrap();
        let mut c = tiny_config();
        c.data.train_manifest = data.join("manifest.txt");
        c.data.test_manifest = data.join("manifest.txt");
        c.train.out_dir = dir.join("run");
        c.train.epochs = 1;
        c
    }

    #[test]
    fn step_budget() {
        let mut c = tiny_config();
        c.train.batch_size = 4;
        c.train.epochs = 3;
        assert_eq!(total_steps(&c, 10), 9);
        c.train.max_steps = 5;
        assert_eq!(total_steps(&c, 10), 5);
        c.train.epochs = 0;
        assert_eq!(total_steps(&c, 10), 0);
    }

    #[test]
    fn zero_epochs_writes_only_the_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = setup(dir.path(), 2);
        c.train.epochs = 0;
        c.train.checkpoint_every = 1;
        let summary = train::<f32>(&c, None, |_| {}).unwrap();
        assert!(summary.records.is_empty());
        let ckpts: Vec<_> = std::fs::read_dir(&c.train.out_dir)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|n| n.ends_with(".ckpt"))
            .collect();
        assert_eq!(ckpts, [FINAL_CHECKPOINT]);
        let init = initialize::<f32>(&c).unwrap().to_checkpoint().to_bytes().unwrap();
        assert_eq!(std::fs::read(&summary.final_checkpoint).unwrap(), init);
        assert_eq!(std::fs::read_to_string(c.train.out_dir.join(LOG_FILE)).unwrap(), "");
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = setup(dir.path(), 3);
        c.train.epochs = 4;
        c.train.max_steps = 7;
        let full = train::<f32>(&c, None, |_| {}).unwrap();
        let full_state = TrainState::<f32>::load(&full.final_checkpoint).unwrap();

        let mut first = c.clone();
        first.train.max_steps = 2;
        first.train.out_dir = dir.path().join("split");
        let part = train::<f32>(&first, None, |_| {}).unwrap();
        let mut second = c.clone();
        second.train.out_dir = first.train.out_dir.clone();
        let rest = train::<f32>(&second, Some(&part.final_checkpoint), |_| {}).unwrap();
        assert_eq!(rest.records.len(), 5);
        assert_eq!(rest.records, full.records[2..]);
        let resumed = TrainState::<f32>::load(&rest.final_checkpoint).unwrap();
        assert_eq!(
            resumed.gan.gen_params.iter().map(|x| x.2.clone()).collect::<Vec<_>>(),
            full_state.gan.gen_params.iter().map(|x| x.2.clone()).collect::<Vec<_>>()
        );
        assert_eq!(resumed.gen_opt, full_state.gen_opt);
        assert_eq!(resumed.disc_opt, full_state.disc_opt);
        let log = std::fs::read_to_string(first.train.out_dir.join(LOG_FILE)).unwrap();
        assert_eq!(log.lines().count(), 7);
        assert_eq!(log, std::fs::read_to_string(c.train.out_dir.join(LOG_FILE)).unwrap());
    }

    #[test]
    fn periodic_checkpoints_and_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = setup(dir.path(), 4);
        c.train.checkpoint_every = 1;
        let summary = train::<f32>(&c, None, |_| {}).unwrap();
        assert_eq!(summary.final_step, 2);
        for step in [1, 2] {
            assert!(c.train.out_dir.join(step_checkpoint_name(step)).is_file());
        }
        let empty = dir.path().join("empty.txt");
        std::fs::write(&empty, "#crossmlp-manifest-v1\n").unwrap();
        c.data.train_manifest = empty;
        assert!(train::<f32>(&c, None, |_| {}).is_err());
    }
}
