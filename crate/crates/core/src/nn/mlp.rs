use ndarray::{Array2, ArrayView2, ArrayViewD, ArrayViewMutD};
use rand::Rng;

use super::activation::{gelu, gelu_backward};
use super::linear::Linear;
use crate::params::{join, Params};

pub const MLP_RATIO: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        let hidden = width * MLP_RATIO;
        Self {
            fc1: Linear::xavier(width, hidden, true, rng),
            fc2: Linear::xavier(hidden, width, true, rng),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, MlpCache) {
        let pre = self.fc1.forward(x);
        let act = gelu(pre.view());
        let y = self.fc2.forward(act.view());
        (
            y,
            MlpCache {
                x: x.to_owned(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, cache: &MlpCache, dy: ArrayView2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let dact = self.fc2.backward(cache.act.view(), dy, &mut grad.fc2);
        let dpre = gelu_backward(cache.pre.view(), dact.view());
        self.fc1.backward(cache.x.view(), dpre.view(), &mut grad.fc1)
    }
}

impl Params for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}
