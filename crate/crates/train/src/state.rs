//! Everything a run needs to continue: both networks, both optimisers,
//! the step counter and the config. All randomness derives from the seed,
//! so no RNG state is stored.

use std::path::Path;

use crossmlp_autograd::{Adam, ParamStore, Scalar, Tensor};
use crossmlp_core::{Checkpoint, CrossMlpGan};
use crossmlp_data::seed::mix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Precision, RunConfig};
use crate::error::{Result, TrainError};

const GEN_INIT_STREAM: u64 = 11;
const DISC_INIT_STREAM: u64 = 12;

#[derive(Clone, Debug)]
pub struct TrainState<T: Scalar> {
    pub config: RunConfig,
    pub gan: CrossMlpGan<T>,
    pub gen_opt: Adam<T>,
    pub disc_opt: Adam<T>,
    /// Completed train steps.
    pub step: u64,
}

/// Seeded weights per `config.train.init`; biases 0, gains 1.
pub fn initialize<T: Scalar>(config: &RunConfig) -> Result<TrainState<T>> {
    config.validate()?;
    let mut gan = CrossMlpGan::new(config.model.clone())?;
    let seed = config.train.seed;
    gan.gen_params.initialize(config.train.init, &mut ChaCha8Rng::seed_from_u64(mix(&[seed, GEN_INIT_STREAM])));
    gan.disc_params.initialize(config.train.init, &mut ChaCha8Rng::seed_from_u64(mix(&[seed, DISC_INIT_STREAM])));
    let gen_opt = Adam::new(config.optim, &gan.gen_params);
    let disc_opt = Adam::new(config.optim, &gan.disc_params);
    Ok(TrainState { config: config.clone(), gan, gen_opt, disc_opt, step: 0 })
}

fn push_store<T: Scalar>(ckpt: &mut Checkpoint<T>, prefix: &str, store: &ParamStore<T>, opt: &Adam<T>) {
    for (id, name, t) in store.iter() {
        ckpt.push(format!("{prefix}/{name}"), t.clone());
        ckpt.push(format!("{prefix}_adam_m/{name}"), opt.first[id.0].clone());
        ckpt.push(format!("{prefix}_adam_v/{name}"), opt.second[id.0].clone());
    }
}

fn take_store<T: Scalar>(
    ckpt: &Checkpoint<T>,
    prefix: &str,
    store: &mut ParamStore<T>,
    opt: &mut Adam<T>,
    used: &mut usize,
) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let fetch = |key: String| -> Result<Tensor<T>> {
            let t = ckpt.tensor(&key).ok_or_else(|| TrainError::Checkpoint(format!("missing tensor `{key}`")))?;
            if t.shape() != store.get(id).shape() {
                return Err(TrainError::Checkpoint(format!(
                    "`{key}` has shape {:?}, model needs {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            Ok(t.clone())
        };
        let value = fetch(format!("{prefix}/{name}"))?;
        opt.first[id.0] = fetch(format!("{prefix}_adam_m/{name}"))?;
        opt.second[id.0] = fetch(format!("{prefix}_adam_v/{name}"))?;
        store.set(id, value).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        *used += 3;
    }
    Ok(())
}

fn meta_u64<T: Scalar>(ckpt: &Checkpoint<T>, key: &str) -> Result<u64> {
    ckpt.meta(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| TrainError::Checkpoint(format!("missing or invalid `{key}` metadata")))
}

impl<T: Scalar> TrainState<T> {
    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut ckpt = Checkpoint::new();
        ckpt.set_meta("step", self.step);
        ckpt.set_meta("gen_adam_step", self.gen_opt.step);
        ckpt.set_meta("disc_adam_step", self.disc_opt.step);
        for key in RunConfig::keys() {
            ckpt.set_meta(&format!("config.{key}"), self.config.get(key).expect("known key"));
        }
        push_store(&mut ckpt, "gen", &self.gan.gen_params, &self.gen_opt);
        push_store(&mut ckpt, "disc", &self.gan.disc_params, &self.disc_opt);
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        let mut config = RunConfig::default();
        for (k, v) in &ckpt.meta {
            if let Some(key) = k.strip_prefix("config.") {
                config.set(key, v)?;
            }
        }
        let mut state = initialize::<T>(&config)?;
        state.step = meta_u64(ckpt, "step")?;
        state.gen_opt.step = meta_u64(ckpt, "gen_adam_step")?;
        state.disc_opt.step = meta_u64(ckpt, "disc_adam_step")?;
        let mut used = 0;
        let gan = &mut state.gan;
        take_store(ckpt, "gen", &mut gan.gen_params, &mut state.gen_opt, &mut used)?;
        take_store(ckpt, "disc", &mut gan.disc_params, &mut state.disc_opt, &mut used)?;
        if used != ckpt.tensors.len() {
            return Err(TrainError::Checkpoint(format!(
                "{} tensors do not belong to this model",
                ckpt.tensors.len() - used
            )));
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Continue from this state under `config`. The architecture must
    /// match; schedule and optimiser settings come from `config`.
    pub fn adopt_config(&mut self, config: RunConfig) -> Result<()> {
        if config.model != self.config.model {
            return Err(TrainError::Config("model settings differ from the checkpoint".into()));
        }
        config.validate()?;
        self.gen_opt.config = config.optim;
        self.disc_opt.config = config.optim;
        self.config = config;
        Ok(())
    }
}

/// Element type recorded in a checkpoint file.
pub fn checkpoint_precision(path: &Path) -> Result<Precision> {
    use std::io::BufRead;
    let file = std::fs::File::open(path).map_err(crate::error::io_err(path))?;
    let mut lines = std::io::BufReader::new(file).lines();
    let mut next = || lines.next().and_then(|l| l.ok()).unwrap_or_default();
    let (tag, dtype) = (next(), next());
    if tag != crossmlp_core::CHECKPOINT_TAG {
        return Err(TrainError::Checkpoint(format!(
            "{} is not a {} file",
            path.display(),
            crossmlp_core::CHECKPOINT_TAG
        )));
    }
    match dtype.as_str() {
        "dtype f32" => Ok(Precision::F32),
        "dtype f64" => Ok(Precision::F64),
        other => Err(TrainError::Checkpoint(format!("unknown `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::tiny_config as tiny;
    use crossmlp_autograd::{InitPolicy, ParamKind};

    fn weights(store: &ParamStore<f64>) -> Vec<f64> {
        store
            .iter()
            .filter(|(id, _, _)| matches!(store.kind(*id), ParamKind::Weight { .. }))
            .flat_map(|(_, _, t)| t.data().to_vec())
            .collect()
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = initialize::<f64>(&tiny()).unwrap();
        let b = initialize::<f64>(&tiny()).unwrap();
        assert_eq!(a.to_checkpoint(), b.to_checkpoint());
        let mut other = tiny();
        other.train.seed = 1;
        let c = initialize::<f64>(&other).unwrap();
        assert_ne!(weights(&a.gan.gen_params), weights(&c.gan.gen_params));
        // Generator and discriminator draw from different streams.
        assert_ne!(weights(&a.gan.gen_params)[..10], weights(&a.gan.disc_params)[..10]);
    }

    #[test]
    fn biases_zero_gains_one() {
        let s = initialize::<f32>(&tiny()).unwrap();
        for (id, name, t) in s.gan.gen_params.iter() {
            match s.gan.gen_params.kind(id) {
                ParamKind::Bias => assert!(t.data().iter().all(|&v| v == 0.0), "{name}"),
                ParamKind::Gain => assert!(t.data().iter().all(|&v| v == 1.0), "{name}"),
                ParamKind::Weight { .. } => assert!(t.data().iter().any(|&v| v != 0.0), "{name}"),
            }
        }
    }

    #[test]
    fn gaussian_policy_statistics() {
        let mut c = tiny();
        c.model.base_channels = 32;
        c.train.init = InitPolicy::Gaussian { std: 0.02 };
        let s = initialize::<f64>(&c).unwrap();
        let w: Vec<f64> = weights(&s.gan.gen_params).into_iter().take(100_000).collect();
        assert_eq!(w.len(), 100_000);
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        assert!(mean.abs() <= 3.0 * 0.02 / n.sqrt(), "{mean}");
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var.sqrt() / 0.02 - 1.0).abs() < 0.02, "{}", var.sqrt());
    }

    #[test]
    fn xavier_policy_variance() {
        let mut c = tiny();
        c.model.base_channels = 32;
        c.train.init = InitPolicy::Xavier;
        let s = initialize::<f64>(&c).unwrap();
        let mut checked = 0;
        for (id, name, t) in s.gan.gen_params.iter() {
            if let ParamKind::Weight { fan_in, fan_out } = s.gan.gen_params.kind(id) {
                if t.len() < 4096 {
                    continue;
                }
                let n = t.len() as f64;
                let mean = t.data().iter().sum::<f64>() / n;
                let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let expect = 2.0 / (fan_in + fan_out) as f64;
                assert!((var / expect - 1.0).abs() < 0.1, "{name}: {var} vs {expect}");
                checked += 1;
            }
        }
        assert!(checked >= 3, "{checked}");
    }

    #[test]
    fn invalid_policy_is_rejected() {
        assert!(RunConfig::parse("train.init=kaiming").is_err());
        assert!(RunConfig::parse("train.init=gaussian:-1").is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = initialize::<f32>(&tiny()).unwrap();
        let bytes = s.to_checkpoint().to_bytes().unwrap();
        let back = TrainState::<f32>::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.to_checkpoint().to_bytes().unwrap(), bytes);
        assert_eq!(back.config, s.config);

        let mut extra = s.to_checkpoint();
        extra.push("stray", Tensor::zeros(&[1]));
        assert!(TrainState::<f32>::from_checkpoint(&extra).is_err());
        let mut missing = s.to_checkpoint();
        missing.tensors.pop();
        assert!(TrainState::<f32>::from_checkpoint(&missing).is_err());
    }

    #[test]
    fn precision_sniffing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        initialize::<f64>(&tiny()).unwrap().save(&path).unwrap();
        assert_eq!(checkpoint_precision(&path).unwrap(), Precision::F64);
        assert!(TrainState::<f32>::load(&path).is_err());
    }

    #[test]
    fn adopt_config_requires_same_model() {
        let mut s = initialize::<f32>(&tiny()).unwrap();
        let mut c = tiny();
        c.optim.lr = 1e-3;
        s.adopt_config(c).unwrap();
        assert_eq!(s.gen_opt.config.lr, 1e-3);
        let mut c = tiny();
        c.model.blocks = 2;
        assert!(s.adopt_config(c).is_err());
    }
}
