use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

/// Dense sketches are materialised up to this many entries; larger ones are
/// regenerated row block by row block on every call.
const MATERIALIZE_LIMIT: usize = 100_000_000;
const STREAM_ROWS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    Rademacher,
    Gaussian,
}

impl Distribution {
    /// 32-bit ChaCha words consumed per matrix entry.
    fn words(self) -> u128 {
        match self {
            Distribution::Rademacher => 2,
            Distribution::Gaussian => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub seed: u64,
    pub distribution: Distribution,
}

/// A linear map `ℝ^p → ℝ^k`.
pub trait Projector: Send + Sync {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn project(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Projects each row of a row-major `n × in_dim` matrix; returns `n × out_dim`.
    fn project_rows(&self, rows: &[f64]) -> Result<Vec<f64>> {
        let p = self.in_dim();
        if p == 0 || !rows.len().is_multiple_of(p) {
            return Err(Error::Shape(format!("{} values are not rows of width {p}", rows.len())));
        }
        let mut out = Vec::with_capacity(rows.len() / p * self.out_dim());
        for r in rows.chunks_exact(p) {
            out.extend(self.project(r)?);
        }
        Ok(out)
    }
}

/// `y = P x` with `P[i, j]` i.i.d. (Rademacher or standard normal) scaled by
/// `1/√k`. Entry `(i, j)` is read from the counter-based stream at word
/// `(i·p + j)·w`, so any entry can be generated on its own.
#[derive(Debug, Clone)]
pub struct RandomProjection {
    spec: ProjectionSpec,
    matrix: Option<Vec<f64>>,
}

pub fn random_project(spec: ProjectionSpec) -> Result<RandomProjection> {
    build(spec, spec.in_dim.saturating_mul(spec.out_dim) <= MATERIALIZE_LIMIT)
}

pub(crate) fn build(spec: ProjectionSpec, materialize: bool) -> Result<RandomProjection> {
    if spec.out_dim == 0 || spec.out_dim > spec.in_dim {
        return Err(Error::Config(format!(
            "projection dimension {} must be in [1, {}]",
            spec.out_dim, spec.in_dim
        )));
    }
    let mut proj = RandomProjection { spec, matrix: None };
    if materialize {
        let p = spec.in_dim;
        let mut m = vec![0.0; p * spec.out_dim];
        for (i, row) in m.chunks_mut(p).enumerate() {
            proj.fill_row(i, row);
        }
        proj.matrix = Some(m);
    }
    Ok(proj)
}

impl RandomProjection {
    pub fn spec(&self) -> &ProjectionSpec {
        &self.spec
    }

    /// Entry `(i, j)` computed directly from its stream position.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        let s = &self.spec;
        let word = (i as u128 * s.in_dim as u128 + j as u128) * s.distribution.words();
        let mut stream = Stream::at_word(s.seed, "projection", 0, word);
        self.draw(&mut stream)
    }

    fn draw(&self, stream: &mut Stream) -> f64 {
        let k = (self.spec.out_dim as f64).sqrt();
        match self.spec.distribution {
            Distribution::Rademacher => {
                if stream.next_u64() >> 63 == 1 {
                    1.0 / k
                } else {
                    -1.0 / k
                }
            }
            Distribution::Gaussian => stream.normal() / k,
        }
    }

    fn fill_row(&self, i: usize, row: &mut [f64]) {
        let s = &self.spec;
        let word = i as u128 * s.in_dim as u128 * s.distribution.words();
        let mut stream = Stream::at_word(s.seed, "projection", 0, word);
        for r in row.iter_mut() {
            *r = self.draw(&mut stream);
        }
    }
}

impl Projector for RandomProjection {
    fn in_dim(&self) -> usize {
        self.spec.in_dim
    }

    fn project_rows(&self, rows: &[f64]) -> Result<Vec<f64>> {
        let (p, k) = (self.spec.in_dim, self.spec.out_dim);
        let Some(m) = &self.matrix else {
            return rows.chunks(p).map(|r| self.project(r)).collect::<Result<Vec<_>>>().map(|v| v.concat());
        };
        if !rows.len().is_multiple_of(p) {
            return Err(Error::Shape(format!("{} values are not rows of width {p}", rows.len())));
        }
        let n = rows.len() / p;
        // Row-major buffers read as column-major: X is p × n, P is p × k, and
        // Pᵀ X (k × n, column-major) is the row-major n × k result.
        let x = nalgebra::DMatrixView::from_slice(rows, p, n);
        let pm = nalgebra::DMatrixView::from_slice(m, p, k);
        Ok((pm.transpose() * x).as_slice().to_vec())
    }

    fn out_dim(&self) -> usize {
        self.spec.out_dim
    }

    fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        let p = self.spec.in_dim;
        if x.len() != p {
            return Err(Error::Shape(format!("projection expects length {p}, got {}", x.len())));
        }
        let dot = |row: &[f64]| row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        Ok(match &self.matrix {
            Some(m) => m.chunks_exact(p).map(dot).collect(),
            None => {
                let mut out = Vec::with_capacity(self.spec.out_dim);
                let mut block = vec![0.0; STREAM_ROWS * p];
                for start in (0..self.spec.out_dim).step_by(STREAM_ROWS) {
                    let rows = STREAM_ROWS.min(self.spec.out_dim - start);
                    for r in 0..rows {
                        self.fill_row(start + r, &mut block[r * p..(r + 1) * p]);
                    }
                    out.extend(block[..rows * p].chunks_exact(p).map(dot));
                }
                out
            }
        })
    }
}

/// `P = I`, for checks that need the unprojected gradients.
#[derive(Debug, Clone, Copy)]
pub struct IdentityProjection {
    pub dim: usize,
}

impl Projector for IdentityProjection {
    fn in_dim(&self) -> usize {
        self.dim
    }

    fn out_dim(&self) -> usize {
        self.dim
    }

    fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::Shape(format!("projection expects length {}, got {}", self.dim, x.len())));
        }
        Ok(x.to_vec())
    }
}
