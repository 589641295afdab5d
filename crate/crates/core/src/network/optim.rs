use super::params::ModelParameters;
use super::Real;

/// One velocity buffer per parameter tensor (unused for running statistics).
pub type Velocities<T> = Vec<Vec<T>>;

/// `theta + mu * v` for trainable tensors; running statistics are copied.
pub fn lookahead<T: Real>(params: &ModelParameters<T>, velocities: &Velocities<T>, momentum: T) -> ModelParameters<T> {
    let mut out = params.clone();
    for (t, v) in out.tensors.iter_mut().zip(velocities) {
        if t.kind.trainable() {
            for (w, &vi) in t.data.iter_mut().zip(v) {
                *w += momentum * vi;
            }
        }
    }
    out
}

/// `v <- mu * v - lr * g; theta <- theta + v`, with `g` taken at the
/// lookahead point.
pub fn nesterov_update<T: Real>(theta: &mut [T], v: &mut [T], g: &[T], lr: T, momentum: T) {
    for ((w, vi), &gi) in theta.iter_mut().zip(v.iter_mut()).zip(g) {
        *vi = momentum * *vi - lr * gi;
        *w += *vi;
    }
}

pub fn nesterov_step<T: Real>(
    params: &mut ModelParameters<T>,
    velocities: &mut Velocities<T>,
    grads: &[Vec<T>],
    lr: T,
    momentum: T,
) {
    for ((t, v), g) in params.tensors.iter_mut().zip(velocities.iter_mut()).zip(grads) {
        if t.kind.trainable() {
            nesterov_update(&mut t.data, v, g, lr, momentum);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_steps_on_quadratic() {
        let (mut th, mut v) = ([1.0f64], [0.0f64]);
        let (mu, lr) = (0.9, 0.1);
        let g = [th[0] + mu * v[0]];
        nesterov_update(&mut th, &mut v, &g, lr, mu);
        assert!((v[0] + 0.1).abs() < 1e-15 && (th[0] - 0.9).abs() < 1e-15);
        let g = [th[0] + mu * v[0]];
        assert!((g[0] - 0.81).abs() < 1e-15);
        nesterov_update(&mut th, &mut v, &g, lr, mu);
        assert!((v[0] + 0.171).abs() < 1e-15 && (th[0] - 0.729).abs() < 1e-15);
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let (mut th, mut v) = ([1.0f64], [0.0f64]);
        let g = [th[0]];
        nesterov_update(&mut th, &mut v, &g, 0.1, 0.0);
        assert!((th[0] - 0.9).abs() < 1e-15);
        let before = th[0];
        let g = [th[0]];
        nesterov_update(&mut th, &mut v, &g, 0.1, 0.0);
        assert!((th[0] - before * 0.9).abs() < 1e-15);
    }

    #[test]
    fn quadratic_loss_strictly_decreases() {
        // curvature 4, lr below 1/4
        for lr in [0.01, 0.1, 0.2, 0.24] {
            let (mut th, mut v) = ([3.0f64], [0.0f64]);
            let loss = |t: f64| 2.0 * t * t;
            let before = loss(th[0]);
            let g = [4.0 * th[0]];
            nesterov_update(&mut th, &mut v, &g, lr, 0.0);
            assert!(loss(th[0]) < before);
        }
    }
}
