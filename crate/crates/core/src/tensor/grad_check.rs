use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Result, Tensor, TensorError, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference half step.
    pub step: f64,
    /// Coordinates sampled per parameter tensor; tensors with fewer
    /// entries are checked exhaustively.
    pub coords_per_param: usize,
    pub seed: u64,
    /// Smallest denominator of the relative error. Gradients that vanish
    /// identically (e.g. a key bias under softmax) would otherwise compare
    /// pure roundoff.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_param: 24,
            seed: 0,
            floor: 1e-6,
        }
    }
}

/// Compares the analytic gradient of a scalar-valued graph with central
/// finite differences and returns the largest relative error
/// `|a - n| / max(|a|, |n|, floor)` over the sampled coordinates.
///
/// `build` receives a fresh graph and one parameter leaf per entry of
/// `params`, and must return the scalar output.
pub fn grad_check<F>(build: F, params: &[Tensor], cfg: &GradCheckConfig) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |params: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let out = build(&mut g, &vars)?;
        if g.value(out).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "grad_check needs a scalar output, got shape {:?}",
                g.value(out).shape()
            )));
        }
        Ok((g, vars, out))
    };

    let (g, vars, out) = eval(params)?;
    let grads = g.backward(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, v) in vars.iter().enumerate() {
        let n = params[pi].numel();
        let analytic = grads
            .get(*v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = if n <= cfg.coords_per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, cfg.coords_per_param).into_vec()
        };
        for c in coords {
            let orig = work[pi].data()[c];
            work[pi].data_mut()[c] = orig + cfg.step;
            let (gp, _, op) = eval(&work)?;
            let fp = gp.value(op).item()?;
            work[pi].data_mut()[c] = orig - cfg.step;
            let (gm, _, om) = eval(&work)?;
            let fm = gm.value(om).item()?;
            work[pi].data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let a = analytic[c];
            let denom = a.abs().max(numeric.abs()).max(cfg.floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
