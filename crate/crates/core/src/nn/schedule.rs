use std::f64::consts::PI;

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at `last_step`.
pub fn cosine_lr(step: usize, last_step: usize, lr_max: f64, lr_min: f64) -> f64 {
    if last_step == 0 {
        return lr_max;
    }
    let t = step.min(last_step) as f64 / last_step as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * t).cos())
}
