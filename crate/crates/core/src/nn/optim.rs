use super::{FcnnModel, GradientSet, NnError};

/// Adam with bias correction. State mirrors the model's layer shapes.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u32,
    m: GradientSet,
    v: GradientSet,
}

impl Adam {
    pub fn new(model: &FcnnModel, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: GradientSet::zeros_like(model),
            v: GradientSet::zeros_like(model),
        }
    }

    /// Descend along `grads`.
    pub fn step(&mut self, model: &mut FcnnModel, grads: &GradientSet) -> Result<(), NnError> {
        if grads.layers.len() != self.m.layers.len() || model.layers().len() != self.m.layers.len() {
            return Err(NnError::Shape {
                op: "Adam::step",
                detail: "optimizer state does not mirror the model".into(),
            });
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for (((layer, g), m), v) in model
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.m.layers)
            .zip(&mut self.v.layers)
        {
            if g.weight.shape() != layer.weight.shape() || g.bias.len() != layer.bias.len() {
                return Err(NnError::Shape {
                    op: "Adam::step",
                    detail: "gradient shape does not mirror the model".into(),
                });
            }
            for (((p, &gi), mi), vi) in layer
                .weight
                .data_mut()
                .iter_mut()
                .zip(g.weight.data())
                .zip(m.weight.data_mut())
                .zip(v.weight.data_mut())
            {
                update(p, gi, mi, vi);
            }
            for (((p, &gi), mi), vi) in layer.bias.iter_mut().zip(&g.bias).zip(&mut m.bias).zip(&mut v.bias) {
                update(p, gi, mi, vi);
            }
        }
        Ok(())
    }
}
