//! Uniform traversal of a model's trainable tensors.
//!
//! Visit order is fixed per type, which is what lets optimizer state, tape
//! leaves, and gradient lists line up by index.

use crate::tensor::Tensor;

pub trait Parameters {
    fn visit_params(&self, f: &mut dyn FnMut(&Tensor));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Tensor));
    /// Structure-preserving map over every parameter, in visit order.
    fn map_params(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self
    where
        Self: Sized;

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_| n += 1);
        n
    }

    /// Clones every parameter into a flat list, in visit order.
    fn collect_params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit_params(&mut |t| out.push(t.clone()));
        out
    }
}

impl Parameters for Vec<Tensor> {
    fn visit_params(&self, f: &mut dyn FnMut(&Tensor)) {
        for t in self {
            f(t);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        for t in self {
            f(t);
        }
    }

    fn map_params(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> Self {
        self.iter().map(|t| f(t)).collect()
    }
}
