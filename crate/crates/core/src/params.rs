//! Named parameter traversal shared by the optimizer, the checkpoint writer
//! and the gradient checker.
//!
//! Gradients are stored in a value of the same type as the module they
//! belong to, so a single traversal order serves both.

use ndarray::{ArrayViewD, ArrayViewMutD};

pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, a| n += a.len());
        n
    }

    fn tensor_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _| n += 1);
        n
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit("", &mut |_, a| out.extend(a.iter().copied()));
        out
    }

    fn assign_flat(&mut self, flat: &[f64]) {
        let mut i = 0;
        self.visit_mut("", &mut |_, mut a| {
            for v in a.iter_mut() {
                *v = flat[i];
                i += 1;
            }
        });
        assert_eq!(i, flat.len(), "flat parameter length mismatch");
    }

    /// Names and element ranges in flat order.
    fn layout(&self, prefix: &str) -> Vec<(String, std::ops::Range<usize>)> {
        let mut out = Vec::new();
        let mut off = 0;
        self.visit(prefix, &mut |name, a| {
            out.push((name.to_string(), off..off + a.len()));
            off += a.len();
        });
        out
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut("", &mut |_, mut a| a.fill(value));
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    fn add_assign_from(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let flat = other.to_flat();
        let mut i = 0;
        self.visit_mut("", &mut |_, mut a| {
            for v in a.iter_mut() {
                *v += flat[i];
                i += 1;
            }
        });
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
