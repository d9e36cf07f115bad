//! Adam optimizer over tape parameters.

use super::tape::Tensor;
use ndarray::ArrayD;

pub struct Adam {
    params: Vec<Tensor>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(params: Vec<Tensor>, lr: f64) -> Self {
        let m = params.iter().map(|p| ArrayD::zeros(p.data().raw_dim())).collect();
        let v = params.iter().map(|p| ArrayD::zeros(p.data().raw_dim())).collect();
        Self {
            params,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Apply one update from the gradients currently stored on the
    /// parameters; parameters without a gradient this step see a zero
    /// gradient (their moments decay).
    pub fn step(&mut self) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in self.params.iter().enumerate() {
            let grad = p.grad().unwrap_or_else(|| ArrayD::zeros(p.data().raw_dim()));
            self.m[i] = &self.m[i] * self.beta1 + &grad * (1.0 - self.beta1);
            self.v[i] = &self.v[i] * self.beta2 + &grad.mapv(|g| g * g) * (1.0 - self.beta2);
            let m_hat = &self.m[i] / bc1;
            let v_hat = &self.v[i] / bc2;
            let mut data = p.value();
            ndarray::Zip::from(&mut data)
                .and(&m_hat)
                .and(&v_hat)
                .for_each(|d, &mh, &vh| {
                    *d -= self.lr * mh / (vh.sqrt() + self.eps);
                });
            p.set_value(data);
        }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}
