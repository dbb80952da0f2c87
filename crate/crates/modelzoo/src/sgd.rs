use bks_autograd::Parameter;

#[derive(Debug, Clone, Copy)]
pub struct SgdConfig {
    pub lr: f64,
    /// In [0, 1); zero disables the velocity term.
    pub momentum: f64,
}

impl SgdConfig {
    pub fn new(lr: f64) -> SgdConfig {
        SgdConfig { lr, momentum: 0.0 }
    }

    pub fn with_momentum(mut self, momentum: f64) -> SgdConfig {
        assert!((0.0..1.0).contains(&momentum));
        self.momentum = momentum;
        self
    }
}

/// Plain SGD with optional momentum: `v <- momentum*v + g; theta <- theta - lr*v`.
/// A parameter whose grad is absent this step is skipped entirely — value and
/// velocity stay untouched. Grads are cleared after being applied.
pub struct Sgd {
    params: Vec<Parameter>,
    velocity: Vec<Vec<f64>>,
    cfg: SgdConfig,
}

impl Sgd {
    pub fn new(params: Vec<Parameter>, cfg: SgdConfig) -> Sgd {
        assert!(cfg.lr > 0.0);
        let velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Sgd {
            params,
            velocity,
            cfg,
        }
    }

    pub fn step(&mut self) {
        for (param, velocity) in self.params.iter().zip(self.velocity.iter_mut()) {
            if param.is_buffer() {
                continue;
            }
            let Some(grad) = param.grad() else { continue };
            for (v, g) in velocity.iter_mut().zip(&grad) {
                *v = self.cfg.momentum * *v + g;
            }
            param
                .add_scaled(velocity, -self.cfg.lr)
                .expect("velocity length matches parameter");
            param.clear_grad();
        }
    }

    pub fn zero_grad(&mut self) {
        for param in &self.params {
            param.clear_grad();
        }
    }
}
