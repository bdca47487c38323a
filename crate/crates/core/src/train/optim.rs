use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub momentum: f64,
    /// `(step, factor)`: from `step` on, the rate is multiplied by `factor`.
    pub schedule: Vec<(usize, f64)>,
}

impl OptimizerConfig {
    pub fn new(base_lr: f64, momentum: f64, schedule: Vec<(usize, f64)>) -> Result<Self> {
        let cfg = Self { base_lr, momentum, schedule };
        cfg.validate()?;
        Ok(cfg)
    }

    /// 0.1, divided by 5 at 10K, then by 10 every further 10K up to 50K.
    pub fn pretrain() -> Self {
        Self {
            base_lr: 0.1,
            momentum: 0.9,
            schedule: vec![(10_000, 0.2), (20_000, 0.1), (30_000, 0.1), (40_000, 0.1)],
        }
    }

    /// 0.05, decayed by 10 at 5K, 15K and 25K.
    pub fn segmentation() -> Self {
        Self { base_lr: 0.05, momentum: 0.9, schedule: vec![(5_000, 0.1), (15_000, 0.1), (25_000, 0.1)] }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |key: &str, message: String| Err(Error::InvalidValue { key: key.into(), message });
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return invalid("lr", format!("{} is not a positive rate", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid("momentum", format!("{} is not in [0, 1)", self.momentum));
        }
        if self.schedule.iter().any(|(_, f)| !(f.is_finite() && *f > 0.0)) {
            return invalid("schedule", "factors must be positive".into());
        }
        if self.schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return invalid("schedule", "steps must be strictly increasing".into());
        }
        Ok(())
    }

    pub fn schedule_text(&self) -> String {
        self.schedule.iter().map(|(s, f)| format!("{s}:{f}")).collect::<Vec<_>>().join(",")
    }

    pub fn parse_schedule(text: &str) -> Result<Vec<(usize, f64)>> {
        let bad = |m: String| Error::InvalidValue { key: "schedule".into(), message: m };
        text.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|item| {
                let (s, f) = item.split_once(':').ok_or_else(|| bad(format!("`{item}` is not `step:factor`")))?;
                let step = s.trim().parse().map_err(|_| bad(format!("bad step in `{item}`")))?;
                let factor = f.trim().parse().map_err(|_| bad(format!("bad factor in `{item}`")))?;
                Ok((step, factor))
            })
            .collect()
    }
}

/// Base rate times every factor whose step has been reached.
pub fn lr_at(cfg: &OptimizerConfig, step: usize) -> f64 {
    cfg.schedule
        .iter()
        .filter(|(s, _)| *s <= step)
        .fold(cfg.base_lr, |lr, (_, f)| lr * f)
}

/// Classical momentum: `v = momentum * v + g`, `p -= lr * v`. Only parameters present in
/// `grads` move; missing velocities start at zero.
pub fn sgd_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    velocity: &mut ParamStore<T>,
    lr: T,
    momentum: T,
) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params
            .try_get(name)
            .ok_or_else(|| Error::Shape(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!("gradient of `{name}` has shape {:?}, parameter {:?}", g.shape(), p.shape())));
        }
        if !velocity.contains(name) {
            velocity.accumulate(name, g.shape(), &[]);
        }
        let v = velocity.get_mut(name);
        if v.shape() != g.shape() {
            return Err(Error::Shape(format!("velocity of `{name}` has shape {:?}", v.shape())));
        }
        let p = params.get_mut(name);
        for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = momentum * *vi + *gi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_vec(vec![1], vec![v]).unwrap()
    }

    fn step(p: f64, g: f64, v: &mut ParamStore<f64>, lr: f64, m: f64) -> f64 {
        let mut params = ParamStore::new();
        params.insert("p", scalar(p));
        let mut grads = ParamStore::new();
        grads.insert("p", scalar(g));
        sgd_step(&mut params, &grads, v, lr, m).unwrap();
        params.get("p").data()[0]
    }

    #[test]
    fn plain_and_momentum_updates() {
        let mut v = ParamStore::new();
        assert!((step(1.0, 2.0, &mut v, 0.1, 0.0) - 0.8).abs() < 1e-12);
        let mut v = ParamStore::new();
        let p1 = step(0.0, 1.0, &mut v, 1.0, 0.9);
        let p2 = step(p1, 1.0, &mut v, 1.0, 0.9);
        assert!((p2 + 2.9).abs() < 1e-12, "{p2}");
        let mut v = ParamStore::new();
        assert_eq!(step(0.5, 0.0, &mut v, 1.0, 0.9), 0.5);
    }

    #[test]
    fn schedules() {
        let cfg = OptimizerConfig::pretrain();
        assert!((lr_at(&cfg, 0) - 0.1).abs() < 1e-15);
        assert!((lr_at(&cfg, 9_999) - 0.1).abs() < 1e-15);
        assert!((lr_at(&cfg, 10_000) - 0.02).abs() < 1e-15);
        assert!((lr_at(&cfg, 20_000) - 0.002).abs() < 1e-15);
        let flat = OptimizerConfig::new(0.3, 0.9, vec![]).unwrap();
        assert_eq!(lr_at(&flat, 123_456), 0.3);
        let seg = OptimizerConfig::segmentation();
        assert!((lr_at(&seg, 15_000) - 0.0005).abs() < 1e-15);
    }

    #[test]
    fn schedule_text_round_trip() {
        let cfg = OptimizerConfig::pretrain();
        assert_eq!(OptimizerConfig::parse_schedule(&cfg.schedule_text()).unwrap(), cfg.schedule);
        assert!(OptimizerConfig::new(0.1, 0.9, vec![(5, 0.1), (5, 0.1)]).is_err());
        assert!(OptimizerConfig::new(0.1, 0.9, vec![(5, 0.0)]).is_err());
    }
}
