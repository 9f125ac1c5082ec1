use crate::error::Result;
use crate::harness::OptimConfig;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adam with bias correction and coupled L2 weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: OptimConfig,
    step: i32,
    m: ParamStore,
    v: ParamStore,
}

impl Adam {
    pub fn new(cfg: OptimConfig, params: &ParamStore) -> Self {
        let zeros = |p: &ParamStore| {
            let mut z = ParamStore::new();
            for (k, t) in p.iter() {
                z.insert(k.clone(), Tensor::zeros(t.shape()));
            }
            z
        };
        Self {
            m: zeros(params),
            v: zeros(params),
            cfg,
            step: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let g = grads.get(&name)?;
            let theta = params.get_mut(&name)?;
            let m = self.m.get_mut(&name)?;
            let v = self.v.get_mut(&name)?;
            for (((p, &gi), mi), vi) in theta
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi + c.weight_decay * *p;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= c.learning_rate * mhat / (vhat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}
