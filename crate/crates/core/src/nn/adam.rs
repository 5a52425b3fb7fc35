use crate::{Error, Result};

/// Bias-corrected adaptive moment estimation over a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// Moments sized for tensors of the given lengths.
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_mlp(lr: f64, net: &crate::nn::Mlp) -> Self {
        let sizes: Vec<usize> = net
            .weights
            .iter()
            .zip(&net.biases)
            .flat_map(|(w, b)| [w.len(), b.len()])
            .collect();
        Adam::new(lr, &sizes)
    }

    /// One update. Every gradient is validated before any parameter moves.
    pub fn update(&mut self, params: Vec<(String, &mut [f64])>, grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "optimizer state does not match the parameter list",
            ));
        }
        for (((name, p), g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::shape(format!(
                    "gradient shape mismatch for `{name}`"
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (_, p)) in params.into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], grads[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn step_mlp(
        &mut self,
        net: &mut crate::nn::Mlp,
        grads: &crate::nn::MlpGrads,
    ) -> Result<()> {
        let gs: Vec<&[f64]> = grads
            .weights
            .iter()
            .zip(&grads.biases)
            .flat_map(|(w, b)| {
                [
                    w.as_slice().expect("standard layout"),
                    b.as_slice().expect("standard layout"),
                ]
            })
            .collect();
        self.update(net.params_mut(), &gs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![0.3, -0.2];
        let mut opt = Adam::new(0.1, &[2]);
        opt.update(vec![("w".into(), &mut p)], &[&[0.0, 0.0]])
            .unwrap();
        assert_eq!(p, vec![0.3, -0.2]);
    }

    #[test]
    fn first_step_is_sign_like() {
        let g = [2.0, -0.5, 1e-3];
        let mut p = vec![0.0; 3];
        let mut opt = Adam::new(0.01, &[3]);
        opt.update(vec![("w".into(), &mut p)], &[&g]).unwrap();
        for (pi, gi) in p.iter().zip(g) {
            let expected = -0.01 * gi / (gi.abs() + 1e-8);
            assert!((pi - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = vec![0.0];
        let mut opt = Adam::new(0.1, &[1]);
        let err = opt
            .update(vec![("bias7".into(), &mut p)], &[&[f64::NAN]])
            .unwrap_err();
        assert!(err.to_string().contains("bias7"));
        assert_eq!(p, vec![0.0]);
    }

    #[test]
    fn quadratic_bowl_norm_decreases() {
        use rand::Rng as _;
        let mut r = crate::rng::seeded(8);
        for _ in 0..5 {
            let mut w: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
            let mut opt = Adam::new(3e-4, &[6]);
            let mut prev = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            for _ in 0..500 {
                let g: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
                opt.update(vec![("w".into(), &mut w)], &[&g]).unwrap();
                let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!(n < prev);
                prev = n;
            }
        }
    }
}
