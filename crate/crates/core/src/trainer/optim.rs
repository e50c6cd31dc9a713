use crate::compose::SsnParameters;
use crate::numerics::{Gradients, Tensor};

/// Adaptive-moment update with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First and second moments, one tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamState {
    pub fn new(params: &SsnParameters) -> Self {
        let zeros = || {
            params
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.value.shape()))
                .collect()
        };
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

impl AdamW {
    /// One update. Parameters without a gradient (unused by the variant)
    /// are left untouched, moments included.
    pub fn step(
        &self,
        params: &mut SsnParameters,
        grads: &Gradients<f32>,
        state: &mut AdamState,
        lr: f64,
    ) {
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let Some(g) = grads.param(i) else { continue };
            let decay = params.entries()[i].decay;
            let shrink = if decay { 1.0 - lr * self.weight_decay } else { 1.0 };
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            let p = params.tensor_mut(i);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gv = gv as f64;
                let m1 = self.beta1 * *mv as f64 + (1.0 - self.beta1) * gv;
                let v1 = self.beta2 * *vv as f64 + (1.0 - self.beta2) * gv * gv;
                *mv = m1 as f32;
                *vv = v1 as f32;
                let update = (m1 / c1) / ((v1 / c2).sqrt() + self.eps);
                *pv = (*pv as f64 * shrink - lr * update) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compose::{ModelConfig, SsnParameters};
    use crate::numerics::Tape;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = ModelConfig { heads: 2, ..ModelConfig::new(4, 4) };
        let mut p = SsnParameters::init(&cfg, 1).unwrap();
        let before = p.clone();
        let mut tape = Tape::<f32>::new();
        let vars = p.register(&mut tape);
        // loss = sum(proj.weight * 3) - sum(proj.bias)
        let w = tape.scale(vars[0], 3.0);
        let a = tape.mean_all(w);
        let b = tape.mean_all(vars[1]);
        let l = tape.sub(a, b).unwrap();
        let grads = tape.backward(l, &Tensor::scalar(1.0)).unwrap();
        let mut st = AdamState::new(&p);
        let opt = AdamW::default();
        opt.step(&mut p, &grads, &mut st, 0.01);
        for (a, b) in p.tensor(0).data().iter().zip(before.tensor(0).data()) {
            let expected = *b as f64 * (1.0 - 0.01 * 0.01) - 0.01;
            assert!((*a as f64 - expected).abs() < 1e-6);
        }
        // bias: gradient negative, no decay
        for (a, b) in p.tensor(1).data().iter().zip(before.tensor(1).data()) {
            assert!((*a as f64 - (*b as f64 + 0.01)).abs() < 1e-6);
        }
        // untouched parameters stay put
        assert_eq!(p.tensor(5), before.tensor(5));
        assert_eq!(st.step, 1);
    }

    #[test]
    fn matches_scalar_reference() {
        // Two steps of the textbook recurrences on a single scalar.
        let opt = AdamW { weight_decay: 0.1, ..AdamW::default() };
        let (mut p, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        let grads = [0.3, -0.2];
        for (t, g) in grads.iter().enumerate() {
            let t = t as i32 + 1;
            p *= 1.0 - 0.05 * 0.1;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            p -= 0.05 * mh / (vh.sqrt() + 1e-8);
        }
        let cfg = ModelConfig { heads: 1, ..ModelConfig::new(1, 1) };
        let mut params = SsnParameters::init(&cfg, 0).unwrap();
        params.tensor_mut(0).data_mut()[0] = 0.5;
        let mut st = AdamState::new(&params);
        for g in grads {
            let mut tape = Tape::<f32>::new();
            let vars = params.register(&mut tape);
            let s = tape.scale(vars[0], g as f32);
            let l = tape.mean_all(s);
            let gr = tape.backward(l, &Tensor::scalar(1.0)).unwrap();
            opt.step(&mut params, &gr, &mut st, 0.05);
        }
        assert!((params.tensor(0).data()[0] as f64 - p).abs() < 1e-6);
    }
}
