use crate::error::{Error, Result};

/// Heavy-ball SGD: `v <- momentum * v + grad; p <- p - lr * v`.
pub fn sgd_momentum_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape(
            "sgd_momentum_step",
            format!("params {}, grads {}, velocity {}", params.len(), grads.len(), velocity.len()),
        ));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}
