use std::collections::BTreeMap;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::model::AhgModel;
use crate::error::{bail_input, Error, Result};
use crate::nn::Adam;
use crate::tensor_ops::{all_finite, scalar_f64};

/// Loss components of one generator/critic update.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AhgLossRecord {
    pub step: u64,
    pub total: f64,
    pub l1_hazy: f64,
    pub l1_clear: f64,
    pub adversarial: f64,
    pub critic: f64,
}

impl AhgLossRecord {
    fn is_finite(&self) -> bool {
        [self.total, self.l1_hazy, self.l1_clear, self.adversarial, self.critic]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub struct AhgTrainer {
    pub model: AhgModel,
    gen_opt: Adam,
    critic_opt: Adam,
}

/// Mean absolute difference.
pub fn l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.mean_all()?)
}

fn mse_to(x: &Tensor, target: f64) -> Result<Tensor> {
    Ok(x.affine(1.0, -target)?.sqr()?.mean_all()?)
}

impl AhgTrainer {
    pub fn new(model: AhgModel) -> Result<Self> {
        let cfg = model.config().optimizer;
        let gen_opt = Adam::new(model.generator_params().named_vars(), cfg)?;
        let critic_opt = Adam::new(model.critic_params().named_vars(), cfg)?;
        Ok(Self {
            model,
            gen_opt,
            critic_opt,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.gen_opt.step_count()
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.gen_opt.set_learning_rate(lr);
        self.critic_opt.set_learning_rate(lr);
    }

    /// Generator and critic optimizer state, keyed `gen.*` and `critic.*`.
    pub fn optimizer_state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (prefix, opt) in [("gen", &self.gen_opt), ("critic", &self.critic_opt)] {
            for (k, v) in opt.state() {
                out.insert(format!("{prefix}.{k}"), v);
            }
        }
        out
    }

    pub fn load_optimizer_state(&mut self, state: &BTreeMap<String, Tensor>, step: u64) -> Result<()> {
        for (prefix, opt) in [("gen.", &mut self.gen_opt), ("critic.", &mut self.critic_opt)] {
            let sub: BTreeMap<String, Tensor> = state
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|k| (k.to_string(), v.clone())))
                .collect();
            opt.load_state(&sub, step)?;
        }
        Ok(())
    }

    /// One update of the reconstruction + adversarial objective followed by a
    /// least-squares critic update on the detached fake.
    pub fn train_step(&mut self, clear: &Tensor, hazy: &Tensor) -> Result<AhgLossRecord> {
        if clear.dims() != hazy.dims() {
            bail_input!("clear {:?} and hazy {:?} batches differ", clear.dims(), hazy.dims());
        }
        let cfg = self.model.config().clone();
        let (m_c, m_h) = self.model.encode(clear, hazy)?;
        let b = clear.dims()[0];
        // Both reconstructions share one decoder pass.
        let clear2 = Tensor::cat(&[clear, clear], 0)?;
        let maps = Tensor::cat(&[&m_h.values, &m_c.values], 0)?;
        let recon = self.model.decode_raw(&clear2, &maps)?;
        let fake_hazy = recon.narrow(0, 0, b)?;
        let fake_clear = recon.narrow(0, b, b)?;

        let l1_hazy = l1(&fake_hazy, hazy)?;
        let l1_clear = l1(&fake_clear, clear)?;
        let adv = mse_to(&self.model.discriminate(&fake_hazy)?, 1.0)?;
        let total = ((&l1_hazy + l1_clear.affine(cfg.lambda_clear, 0.0)?)? + adv.affine(cfg.lambda_adv, 0.0)?)?;

        let mut record = AhgLossRecord {
            step: self.gen_opt.step_count() + 1,
            total: scalar_f64(&total)?,
            l1_hazy: scalar_f64(&l1_hazy)?,
            l1_clear: scalar_f64(&l1_clear)?,
            adversarial: scalar_f64(&adv)?,
            critic: f64::NAN,
        };
        if !(record.total.is_finite() && record.l1_hazy.is_finite() && record.adversarial.is_finite()) {
            return Err(Error::NonFinite(format!("haze generator loss: {record:?}")));
        }
        let grads = total.backward()?;
        for (name, var) in self.model.generator_params().named_vars() {
            if let Some(g) = grads.get(var.as_tensor()) {
                if !all_finite(g)? {
                    return Err(Error::NonFinite(format!("gradient of `{name}` at step {}", record.step)));
                }
            }
        }
        self.gen_opt.step(&grads)?;

        let fake = fake_hazy.detach();
        let real_score = mse_to(&self.model.discriminate(hazy)?, 1.0)?;
        let fake_score = mse_to(&self.model.discriminate(&fake)?, 0.0)?;
        let critic = ((real_score + fake_score)? * 0.5)?;
        record.critic = scalar_f64(&critic)?;
        if !record.is_finite() {
            return Err(Error::NonFinite(format!("haze critic loss: {record:?}")));
        }
        let grads = critic.backward()?;
        self.critic_opt.step(&grads)?;
        Ok(record)
    }
}
