use crate::numerics::{Gradients, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for RadamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// `ρ_t = ρ_∞ - 2 t β₂ᵗ / (1 - β₂ᵗ)` with `ρ_∞ = 2 / (1 - β₂) - 1`.
pub fn rho(t: u64, beta2: f64) -> f64 {
    let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
    let b2t = beta2.powi(t as i32);
    rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t)
}

/// First and second moments for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct RadamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl RadamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One rectified Adam update. Parameters without a gradient are treated as
/// having a zero gradient (they still decay).
pub fn radam_step(store: &mut ParamStore, grads: &Gradients, state: &mut RadamState, cfg: &RadamConfig) {
    state.step += 1;
    let t = state.step;
    let bias1 = 1.0 - cfg.beta1.powi(t as i32);
    let bias2 = 1.0 - cfg.beta2.powi(t as i32);
    let rho_inf = 2.0 / (1.0 - cfg.beta2) - 1.0;
    let rho_t = rho(t, cfg.beta2);
    let rect = (rho_t > 4.0)
        .then(|| ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt());
    let decay = 1.0 - cfg.lr * cfg.weight_decay;

    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let i = id.index();
        let grad = grads.get(id);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let p = store.get_mut(id).data_mut();
        for k in 0..p.len() {
            let gk = grad.map_or(0.0, |g| g[k]);
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let m_hat = m[k] / bias1;
            let step = match rect {
                Some(r) => r * m_hat / ((v[k] / bias2).sqrt() + cfg.eps),
                None => m_hat,
            };
            p[k] = p[k] * decay - cfg.lr * step;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn rho_crosses_four_after_step_four() {
        for t in 1..=4 {
            assert!(rho(t, 0.999) <= 4.0, "t={t}: {}", rho(t, 0.999));
        }
        assert!(rho(5, 0.999) > 4.0);
    }

    #[test]
    fn zero_gradient_decays_geometrically() {
        let mut store = ParamStore::new();
        let id = store.register("p", Tensor::from_vec(vec![1.0, -2.0])).unwrap();
        let cfg = RadamConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..RadamConfig::default()
        };
        let mut state = RadamState::new(&store);
        for step in 1..=10 {
            radam_step(&mut store, &Gradients::default(), &mut state, &cfg);
            let expect = 0.95f64.powi(step);
            assert!((store.get(id).data()[0] - expect).abs() < 1e-15);
            assert!((store.get(id).data()[1] + 2.0 * expect).abs() < 1e-15);
        }
    }

    #[test]
    fn quadratic_converges() {
        let mut store = ParamStore::new();
        let id = store.register("theta", Tensor::scalar(0.0)).unwrap();
        let cfg = RadamConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..RadamConfig::default()
        };
        let mut state = RadamState::new(&store);
        for _ in 0..500 {
            let theta = store.get(id).item();
            let mut grads = Gradients::default();
            grads.push(id, vec![2.0 * (theta - 3.0)]);
            radam_step(&mut store, &grads, &mut state, &cfg);
        }
        assert!((store.get(id).item() - 3.0).abs() < 0.05, "{}", store.get(id).item());
    }
}
