use super::TrainError;
use crate::params::ParamSet;
use crate::tensor::{DiffTensor, Real};

pub const ADAM_BETA1: f64 = 0.5;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// Bias-corrected Adam with moments stored next to the parameters.
#[derive(Debug, Clone)]
pub struct Adam<T: Real = f32> {
    pub cfg: AdamConfig,
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    /// Number of updates applied so far.
    pub t: u64,
}

fn rebuild<T: Real>(like: &DiffTensor<T>, values: Vec<T>) -> DiffTensor<T> {
    DiffTensor::new(like.shape(), values).expect("same shape")
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &ParamSet<T>) -> Self {
        Self {
            cfg,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// Applies one update. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>) -> Result<(), TrainError> {
        params.check_layout(grads).map_err(|e| super::invalid("grads", e.to_string()))?;
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            return Err(TrainError::NonFiniteGradient { tensor: name.to_string() });
        }
        let t = self.t + 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t as i32);
        let bc2 = 1.0 - c.beta2.powi(t as i32);
        let mut new_p = ParamSet::new();
        let mut new_m = ParamSet::new();
        let mut new_v = ParamSet::new();
        for (name, p) in params.iter() {
            let g = grads.get(name).expect("layout checked");
            let m = self.m.get(name).expect("moment layout");
            let v = self.v.get(name).expect("moment layout");
            let n = p.len();
            let (mut pv, mut mv, mut vv) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
            for i in 0..n {
                let gi = g.values()[i].as_f64();
                let mi = T::from_f64(c.beta1 * m.values()[i].as_f64() + (1.0 - c.beta1) * gi);
                let vi = T::from_f64(c.beta2 * v.values()[i].as_f64() + (1.0 - c.beta2) * gi * gi);
                let mhat = mi.as_f64() / bc1;
                let vhat = vi.as_f64() / bc2;
                pv.push(T::from_f64(p.values()[i].as_f64() - c.lr * mhat / (vhat.sqrt() + c.eps)));
                mv.push(mi);
                vv.push(vi);
            }
            new_p.insert(name, rebuild(p, pv));
            new_m.insert(name, rebuild(p, mv));
            new_v.insert(name, rebuild(p, vv));
        }
        *params = new_p;
        self.m = new_m;
        self.v = new_v;
        self.t = t;
        Ok(())
    }
}

/// `shadow ← decay·shadow + (1 − decay)·params`, elementwise.
///
/// In `f32` the shadow stops moving once `(1 − decay)·|p − shadow|` drops
/// below half an ulp of the shadow, so it settles a few ulps/(1 − decay)
/// away from a constant target.
pub fn ema_update<T: Real>(shadow: &mut ParamSet<T>, params: &ParamSet<T>, decay: f64) {
    let mut next = ParamSet::new();
    for (name, s) in shadow.iter() {
        let p = params.get(name).expect("ema layout matches parameters");
        let vals: Vec<T> = s
            .values()
            .iter()
            .zip(p.values())
            .map(|(&a, &b)| T::from_f64(decay * a.as_f64() + (1.0 - decay) * b.as_f64()))
            .collect();
        next.insert(name, DiffTensor::new(s.shape(), vals).expect("same shape"));
    }
    *shadow = next;
}
