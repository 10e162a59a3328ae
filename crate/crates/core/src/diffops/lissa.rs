use super::{check_inputs, check_vec, InverseHvp, IhvpConfig, TargetFunction};
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::linalg::norm;
use crate::rng::Stream;

const MAX_DOUBLINGS: usize = 30;

/// Stochastic Neumann recursion
/// `r₀ = v,  r_j = v + (I − (H_j + λI)/scale) r_{j−1}`, returning `r_depth / scale`,
/// where `H_j` is the Hessian on the j-th seeded minibatch. The minibatch
/// sequence is drawn once when binding, so every `v` sees the same operator.
pub struct LissaIhvp<'f, F: TargetFunction + ?Sized> {
    f: &'f F,
    params: Vec<f64>,
    /// One entry per recursion step; a single entry is reused when full-batch.
    batches: Vec<Dataset>,
    depth: usize,
    regularization: f64,
    scale: f64,
    auto_scale: bool,
}

pub fn ihvp_at_x_lissa<'f, F: TargetFunction + ?Sized>(
    f: &'f F,
    params: &[f64],
    batch: &Dataset,
    cfg: &IhvpConfig,
) -> Result<LissaIhvp<'f, F>> {
    cfg.validate()?;
    check_inputs(f, params, batch)?;
    let l = &cfg.lissa;
    let batches = if l.batch_size >= batch.len() {
        vec![batch.clone()]
    } else {
        let mut s = Stream::new(l.seed, "lissa/minibatch");
        (0..l.recursion_depth)
            .map(|_| batch.select(&s.choose_sorted(batch.len(), l.batch_size)))
            .collect()
    };
    Ok(LissaIhvp {
        f,
        params: params.to_vec(),
        batches,
        depth: l.recursion_depth,
        regularization: cfg.regularization,
        scale: l.scale,
        auto_scale: l.auto_scale,
    })
}

impl<F: TargetFunction + ?Sized> LissaIhvp<'_, F> {
    /// Norm bound for a contracting recursion is `(depth + 1)‖v‖`; anything
    /// past this is treated as divergence.
    fn blowup_factor(&self) -> f64 {
        1e3_f64.max(2.0 * (self.depth as f64 + 1.0))
    }

    fn run(&self, v: &[f64], scale: f64) -> Result<Vec<f64>> {
        let limit = self.blowup_factor() * norm(v);
        let mut r = v.to_vec();
        for j in 0..self.depth {
            let batch = &self.batches[if self.batches.len() == 1 { 0 } else { j }];
            let hr = self.f.hvp_raw(&self.params, batch, &r);
            for ((ri, hi), vi) in r.iter_mut().zip(&hr).zip(v) {
                *ri = vi + *ri - (hi + self.regularization * *ri) / scale;
            }
            let nr = norm(&r);
            if !nr.is_finite() || nr > limit {
                return Err(Error::Divergence(format!(
                    "LiSSA iterate norm {nr:e} exceeds {limit:e} at step {} with scale {scale}",
                    j + 1
                )));
            }
        }
        Ok(r.into_iter().map(|x| x / scale).collect())
    }
}

impl<F: TargetFunction + ?Sized> InverseHvp for LissaIhvp<'_, F> {
    fn dim(&self) -> usize {
        self.params.len()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_vec(self.dim(), v)?;
        let mut scale = self.scale;
        let mut doublings = 0;
        loop {
            match self.run(v, scale) {
                Err(Error::Divergence(msg)) if self.auto_scale && doublings < MAX_DOUBLINGS => {
                    log::debug!("{msg}; doubling scale");
                    scale *= 2.0;
                    doublings += 1;
                }
                other => return other,
            }
        }
    }
}
