use super::params::{Gradients, ParameterSet};
use super::Real;
use crate::error::{Error, Result};

/// Adam with the usual bias-corrected moments.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Update every parameter that has a gradient. Parameters without one keep
    /// their value and optimizer state untouched.
    pub fn step<R: Real>(&self, params: &mut ParameterSet<R>, grads: &Gradients<R>) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        // validate everything before mutating anything
        for (name, g) in grads.iter() {
            let p = params
                .get(name)
                .ok_or_else(|| Error::shape(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient of `{name}` has shape {:?}, parameter is {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        let (b1, b2) = (R::lit(self.beta1), R::lit(self.beta2));
        let (one_b1, one_b2) = (R::lit(1.0 - self.beta1), R::lit(1.0 - self.beta2));
        let eps = R::lit(self.eps);
        for (name, g) in grads.iter() {
            let (p, st) = params.state_mut(name).expect("validated above");
            st.step += 1;
            let t = st.step as i32;
            let c1 = R::lit(1.0 - self.beta1.powi(t));
            let c2 = R::lit(1.0 - self.beta2.powi(t));
            let lr = R::lit(self.lr);
            for (((pv, m), v), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
                .zip(g.data())
            {
                *m = b1 * *m + one_b1 * gv;
                *v = b2 * *v + one_b2 * gv * gv;
                let mh = *m / c1;
                let vh = *v / c2;
                *pv -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::Tensor;

    fn one_param(p: f64) -> ParameterSet<f64> {
        let mut ps = ParameterSet::new();
        ps.insert("p", Tensor::scalar(p));
        ps
    }

    fn grad(g: f64) -> Gradients<f64> {
        let mut gs = Gradients::default();
        gs.insert("p".into(), Tensor::scalar(g));
        gs
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut ps = one_param(1.5);
        Adam::new(0.1).step(&mut ps, &grad(0.0)).unwrap();
        assert_eq!(ps.get("p").unwrap().data(), &[1.5]);
        assert_eq!(ps.state("p").unwrap().step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = one_param(1.0);
        Adam::new(0.1).step(&mut ps, &grad(1.0)).unwrap();
        let want = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((ps.get("p").unwrap().data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_decreases_monotonically() {
        let mut ps = one_param(1.0);
        let a = Adam::new(0.1);
        a.step(&mut ps, &grad(1.0)).unwrap();
        let p1 = ps.get("p").unwrap().data()[0];
        a.step(&mut ps, &grad(1.0)).unwrap();
        let p2 = ps.get("p").unwrap().data()[0];
        assert!(p1 < 1.0 && p2 < p1);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut ps = one_param(1.0);
        let mut gs = Gradients::default();
        gs.insert("p".into(), Tensor::zeros(&[2]));
        assert!(matches!(Adam::new(0.1).step(&mut ps, &gs), Err(Error::Shape(_))));
        assert!(Adam::new(-1.0).step(&mut ps, &grad(1.0)).is_err());
    }
}
