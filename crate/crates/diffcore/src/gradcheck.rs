use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Central-difference check of `f`'s analytic gradient.
///
/// Samples up to `samples` coordinates across `params` (all of them when
/// there are fewer) and returns the largest
/// `|analytic - numeric| / max(floor, |analytic|, |numeric|)` with
/// `floor = 1e-6`, so near-zero gradients are compared absolutely.
pub fn grad_check<F>(store: &mut ParamStore, params: &[ParamId], eps: f64, samples: usize, seed: u64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Graph) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let coords: Vec<(ParamId, usize)> =
        params.iter().flat_map(|&p| (0..store.value(p).len()).map(move |i| (p, i))).collect();
    let picked: Vec<usize> = if coords.len() <= samples {
        (0..coords.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = sample(&mut rng, coords.len(), samples).into_vec();
        v.sort_unstable();
        v
    };
    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference(store);
        let loss = f(&mut g)?;
        Ok(g.scalar(loss))
    };
    let mut worst: f64 = 0.0;
    for ci in picked {
        let (p, i) = coords[ci];
        let a = analytic.param(p).map_or(0.0, |g| g[i]);
        let orig = store.value(p).data()[i];
        store.value_mut(p).data_mut()[i] = orig + eps;
        let up = eval(store)?;
        store.value_mut(p).data_mut()[i] = orig - eps;
        let down = eval(store)?;
        store.value_mut(p).data_mut()[i] = orig;
        let n = (up - down) / (2.0 * eps);
        let err = (a - n).abs() / GRAD_CHECK_FLOOR.max(a.abs()).max(n.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
