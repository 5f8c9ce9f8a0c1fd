use crate::numerics::Param;

/// Enumerates learnable tensors under stable hierarchical names.
///
/// Visiting order is fixed, so it doubles as the optimizer's parameter order.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param));

    fn named_params(&self, prefix: &str) -> Vec<(String, Param)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |name, p| out.push((name, p.clone())));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.value().numel());
        n
    }
}
