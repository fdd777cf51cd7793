// Central finite-difference oracle for encoder gradients.

use premsel_core::encoder::{Encoder, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub struct TensorCheck {
    pub name: String,
    pub rel_err: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

/// Moves every parameter by N(0, std) noise so the check runs away from the
/// near-linear regime of a fresh initialization.
pub fn jitter(enc: &mut Encoder<f64>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, std).unwrap();
    for x in enc.params.data_mut() {
        *x += n.sample(&mut rng);
    }
}

/// Below this norm a tensor gradient is treated as exactly zero. Central
/// differences of an O(1) loss carry about 1e-16 / step of round-off per
/// element, so gradients that vanish analytically (key biases under softmax
/// shift invariance, for instance) show up numerically near 1e-12.
pub const ZERO_FLOOR: f64 = 1e-8;

/// Relative error `|a - n| / max(|a|, |n|)` per tensor, 0 when both norms
/// are below [`ZERO_FLOOR`].
pub fn check<F>(enc: &Encoder<f64>, analytic: &ParamStore<f64>, step: f64, loss: F) -> Vec<TensorCheck>
where
    F: Fn(&Encoder<f64>) -> f64,
{
    let mut probe = enc.clone();
    let layout = enc.params.layout().clone();
    let mut out = Vec::new();
    for spec in layout.tensors() {
        let mut diff = 0.0;
        let mut an = 0.0;
        let mut nn = 0.0;
        for i in spec.offset..spec.offset + spec.len() {
            let orig = probe.params.data()[i];
            probe.params.data_mut()[i] = orig + step;
            let up = loss(&probe);
            probe.params.data_mut()[i] = orig - step;
            let down = loss(&probe);
            probe.params.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[i];
            diff += (a - numeric) * (a - numeric);
            an += a * a;
            nn += numeric * numeric;
        }
        let (diff, an, nn) = (diff.sqrt(), an.sqrt(), nn.sqrt());
        let denom = an.max(nn);
        let rel_err = if denom < ZERO_FLOOR { 0.0 } else { diff / denom };
        out.push(TensorCheck {
            name: spec.name.clone(),
            rel_err,
            analytic_norm: an,
            numeric_norm: nn,
        });
    }
    out
}

pub fn worst(checks: &[TensorCheck]) -> &TensorCheck {
    checks.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err)).expect("at least one tensor")
}
