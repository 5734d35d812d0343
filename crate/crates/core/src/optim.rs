//! Plain stochastic gradient descent.

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::model::ParamSet;

/// `p ← p − η·g` for every parameter. Every parameter needs a gradient of
/// its own shape; extra gradient keys are ignored.
pub fn sgd_step(params: &mut ParamSet, grads: &Gradients, eta: f64) -> Result<()> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::validation(format!("learning rate {eta} must be finite and >= 0")));
    }
    for name in params.names() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::contract(format!("no gradient for parameter {name}")))?;
        g.check_same_shape(params.get(name).expect("listed"), "sgd_step")?;
    }
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let g = &grads[&name];
        let p = params.get_mut(&name).expect("listed");
        for (v, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *v -= eta * d;
        }
    }
    Ok(())
}
