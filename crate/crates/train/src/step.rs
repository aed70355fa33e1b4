//! One alternating update: generator side with D frozen, then
//! discriminator side with the generator frozen.

use crossmlp_autograd::{Bound, Graph, Scalar, Tensor, Var};
use crossmlp_core::losses::{adversarial_loss, baseline_uncertainty_loss, l1, refined_pixel_loss, tv_loss};
use crossmlp_core::{AdversarialSide, CrossMlpGan, GeneratorOutput, LossBundle, LossParts};
use crossmlp_data::Batch;

use crate::config::PixelLoss;
use crate::error::{Result, TrainError};
use crate::state::TrainState;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based index of the step just taken.
    pub step: u64,
    pub losses: LossBundle,
    pub d: f64,
    /// Mean `|I'_g - I_g|` of the batch before the update.
    pub l1_coarse: f64,
}

impl StepRecord {
    pub fn log_line(&self) -> String {
        let l = &self.losses;
        format!(
            "step={} g_total={:.6} d={:.6} refined_img={:.6} refined_sem={:.6} tv={:.6} adv={:.6} l1_coarse={:.6}",
            self.step, l.total, self.d, l.refined_image, l.refined_semantic, l.tv, l.adversarial, self.l1_coarse
        )
    }
}

/// Discriminator logits for the stage-1 and stage-2 candidates. Both go
/// through the same network and parameters.
pub fn fake_logits<'g, T: Scalar>(
    gan: &CrossMlpGan<T>,
    d: &Bound<'g, '_, T>,
    source: Var<'g, T>,
    coarse: Var<'g, T>,
    refined: Var<'g, T>,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    Ok((gan.discriminator.forward(d, source, coarse)?, gan.discriminator.forward(d, source, refined)?))
}

fn pixel_terms<'g, T: Scalar>(
    kind: PixelLoss,
    out: &GeneratorOutput<'g, T>,
    target: Var<'g, T>,
    semantic: Var<'g, T>,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let s = &out.stage1;
    let sel = &out.selection;
    Ok(match kind {
        PixelLoss::Refined => (
            refined_pixel_loss(s.coarse_image, out.final_image, target, sel.u_image)?,
            refined_pixel_loss(s.coarse_semantic, out.refined_semantic, semantic, sel.u_semantic)?,
        ),
        PixelLoss::Baseline => (
            baseline_uncertainty_loss(s.coarse_image, target, sel.u_image)?
                + baseline_uncertainty_loss(out.final_image, target, sel.u_image)?,
            baseline_uncertainty_loss(s.coarse_semantic, semantic, sel.u_semantic)?
                + baseline_uncertainty_loss(out.refined_semantic, semantic, sel.u_semantic)?,
        ),
    })
}

fn value<T: Scalar>(v: Var<'_, T>) -> f64 {
    v.item().as_f64()
}

/// Fakes produced by the generator sub-step, reused (detached) by the
/// discriminator sub-step.
struct Fakes<T> {
    coarse: Tensor<T>,
    refined: Tensor<T>,
}

fn generator_substep<T: Scalar>(
    state: &mut TrainState<T>,
    batch: &Batch<T>,
    step: u64,
) -> Result<(LossBundle, f64, Fakes<T>)> {
    let gan = &state.gan;
    let g = Graph::new();
    let pg = Bound::trainable(&g, &gan.gen_params);
    let pd = Bound::frozen(&g, &gan.disc_params);
    let source = g.constant(batch.source.clone());
    let target = g.constant(batch.target.clone());
    let semantic = g.constant(batch.semantic.clone());

    let out = gan.generator.forward(&pg, source, semantic)?;
    let (refined_image, refined_semantic) = pixel_terms(state.config.loss.pixel, &out, target, semantic)?;
    let (l1_logits, l2_logits) = fake_logits(gan, &pd, source, out.stage1.coarse_image, out.final_image)?;
    let adversarial = adversarial_loss(None, l1_logits, AdversarialSide::Generator)?
        + adversarial_loss(None, l2_logits, AdversarialSide::Generator)?;
    let tv = tv_loss(out.final_image)?;
    let parts = LossParts { refined_image, refined_semantic, adversarial, tv };
    let total = state.config.loss.weights.combine(&parts);
    let bundle = LossBundle {
        refined_image: value(refined_image),
        refined_semantic: value(refined_semantic),
        adversarial: value(adversarial),
        tv: value(tv),
        total: value(total),
    };
    if let Some(component) = bundle.non_finite() {
        return Err(TrainError::NonFinite { step, component });
    }
    let l1_coarse = value(l1(out.stage1.coarse_image, target)?);
    let grads = g.backward(total);
    let gen_grads = pg.collect_grads(&grads);
    let fakes =
        Fakes { coarse: (*out.stage1.coarse_image.value()).clone(), refined: (*out.final_image.value()).clone() };
    drop(pd);
    drop(pg);
    state.gen_opt.update(&mut state.gan.gen_params, &gen_grads);
    Ok((bundle, l1_coarse, fakes))
}

fn discriminator_substep<T: Scalar>(
    state: &mut TrainState<T>,
    batch: &Batch<T>,
    fakes: Fakes<T>,
    step: u64,
) -> Result<f64> {
    let gan = &state.gan;
    let g = Graph::new();
    let pd = Bound::trainable(&g, &gan.disc_params);
    let source = g.constant(batch.source.clone());
    let real = gan.discriminator.forward(&pd, source, g.constant(batch.target.clone()))?;
    let (f1, f2) = fake_logits(gan, &pd, source, g.constant(fakes.coarse), g.constant(fakes.refined))?;
    let loss = (adversarial_loss(Some(real), f1, AdversarialSide::Discriminator)?
        + adversarial_loss(Some(real), f2, AdversarialSide::Discriminator)?)
    .scale(0.5);
    let d = value(loss);
    if !d.is_finite() {
        return Err(TrainError::NonFinite { step, component: "d" });
    }
    let grads = pd.collect_grads(&g.backward(loss));
    drop(pd);
    state.disc_opt.update(&mut state.gan.disc_params, &grads);
    Ok(d)
}

fn snapshot<T: Scalar>(store: &crossmlp_autograd::ParamStore<T>) -> Vec<Tensor<T>> {
    store.iter().map(|(_, _, t)| t.clone()).collect()
}

/// One generator Adam step then one discriminator Adam step. With
/// `verify`, also asserts each sub-step left the other network's
/// parameters bitwise unchanged.
pub fn train_step<T: Scalar>(state: &mut TrainState<T>, batch: &Batch<T>, verify: bool) -> Result<StepRecord> {
    let step = state.step + 1;
    let disc_before = verify.then(|| snapshot(&state.gan.disc_params));
    let (losses, l1_coarse, fakes) = generator_substep(state, batch, step)?;
    if let Some(before) = disc_before {
        if before != snapshot(&state.gan.disc_params) {
            return Err(TrainError::Config(format!(
                "step {step}: discriminator changed during the generator sub-step"
            )));
        }
    }
    let gen_before = verify.then(|| snapshot(&state.gan.gen_params));
    let d = discriminator_substep(state, batch, fakes, step)?;
    if let Some(before) = gen_before {
        if before != snapshot(&state.gan.gen_params) {
            return Err(TrainError::Config(format!(
                "step {step}: generator changed during the discriminator sub-step"
            )));
        }
    }
    state.step = step;
    Ok(StepRecord { step, losses, d, l1_coarse })
}
