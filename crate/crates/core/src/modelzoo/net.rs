//! Per-sample forward and backward passes, generic over [`Scalar`].

use super::scalar::Scalar;
use super::ModelSpec;

/// Which scalar function of the logits an objective evaluates per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Softmax cross-entropy `logsumexp(z) − z_y`.
    CrossEntropy,
    /// Correct-class margin `z_y − logsumexp_{k≠y} z_k = log(p_y / (1 − p_y))`.
    Margin,
}

/// Scaled dropout masks (entries 0 or `1/(1−rate)`) for the two hidden layers.
#[derive(Debug, Clone, Copy)]
pub struct MaskRef<'a> {
    pub hidden1: &'a [f64],
    pub hidden2: &'a [f64],
}

pub(crate) struct Workspace<T> {
    x: Vec<T>,
    a1: Vec<T>,
    h1: Vec<T>,
    a2: Vec<T>,
    h2: Vec<T>,
    pub(crate) z: Vec<T>,
    dz: Vec<T>,
    d2: Vec<T>,
    d1: Vec<T>,
}

impl<T: Scalar> Workspace<T> {
    pub(crate) fn new(spec: &ModelSpec) -> Self {
        let (d, h1, h2, c) = spec.dims();
        let z = Vec::new;
        let mut ws = Workspace {
            x: z(),
            a1: z(),
            h1: z(),
            a2: z(),
            h2: z(),
            z: z(),
            dz: z(),
            d2: z(),
            d1: z(),
        };
        ws.x.resize(d, T::zero());
        ws.a1.resize(h1, T::zero());
        ws.h1.resize(h1, T::zero());
        ws.a2.resize(h2, T::zero());
        ws.h2.resize(h2, T::zero());
        ws.z.resize(c, T::zero());
        ws.dz.resize(c, T::zero());
        ws.d2.resize(h2, T::zero());
        ws.d1.resize(h1, T::zero());
        ws
    }

    /// Penultimate features `h` for the last linear layer (the input itself
    /// for logistic regression).
    pub(crate) fn penultimate(&self, spec: &ModelSpec) -> &[T] {
        match spec {
            ModelSpec::LogReg { .. } => &self.x,
            ModelSpec::Mlp { .. } => &self.h2,
        }
    }
}

#[inline]
fn affine<T: Scalar>(w: &[T], b: Option<&[T]>, x: &[T], out: &mut [T]) {
    let n_in = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * n_in..(i + 1) * n_in];
        let mut acc = match b {
            Some(b) => b[i],
            None => T::zero(),
        };
        for (wk, xk) in row.iter().zip(x) {
            acc += *wk * *xk;
        }
        *o = acc;
    }
}

/// Fills `ws.z` with the logits of one sample.
pub(crate) fn forward_sample<T: Scalar>(
    spec: &ModelSpec,
    p: &[T],
    x: &[f64],
    masks: Option<MaskRef<'_>>,
    ws: &mut Workspace<T>,
) {
    for (dst, &src) in ws.x.iter_mut().zip(x) {
        *dst = T::from_f64(src);
    }
    match *spec {
        ModelSpec::LogReg { .. } => {
            affine(p, None, &ws.x, &mut ws.z);
        }
        ModelSpec::Mlp { in_dim, h1, h2, n_classes, .. } => {
            let o = MlpOffsets::new(in_dim, h1, h2, n_classes);
            affine(&p[o.w1..o.b1], Some(&p[o.b1..o.w2]), &ws.x, &mut ws.a1);
            for (i, (h, a)) in ws.h1.iter_mut().zip(&ws.a1).enumerate() {
                *h = a.relu();
                if let Some(m) = masks {
                    *h = h.scale(m.hidden1[i]);
                }
            }
            affine(&p[o.w2..o.b2], Some(&p[o.b2..o.w3]), &ws.h1, &mut ws.a2);
            for (i, (h, a)) in ws.h2.iter_mut().zip(&ws.a2).enumerate() {
                *h = a.relu();
                if let Some(m) = masks {
                    *h = h.scale(m.hidden2[i]);
                }
            }
            affine(&p[o.w3..o.b3], Some(&p[o.b3..o.end]), &ws.h2, &mut ws.z);
        }
    }
}

/// Evaluates `head` on the logits in `ws.z`; writes `∂head/∂z` into `ws.dz`.
pub(crate) fn head_and_dlogits<T: Scalar>(head: Head, y: usize, ws: &mut Workspace<T>) -> T {
    let z = &ws.z;
    match head {
        Head::CrossEntropy => {
            let (lse, probs) = log_softmax_parts(z, None);
            for (k, d) in ws.dz.iter_mut().enumerate() {
                *d = probs[k] - T::from_f64(if k == y { 1.0 } else { 0.0 });
            }
            lse - z[y]
        }
        Head::Margin => {
            let (lse, probs) = log_softmax_parts(z, Some(y));
            for (k, d) in ws.dz.iter_mut().enumerate() {
                *d = if k == y { T::from_f64(1.0) } else { -probs[k] };
            }
            z[y] - lse
        }
    }
}

/// `logsumexp` over all entries except `skip`, and the matching softmax
/// (zero at `skip`).
fn log_softmax_parts<T: Scalar>(z: &[T], skip: Option<usize>) -> (T, Vec<T>) {
    let keep = |k: usize| Some(k) != skip;
    let mut m_idx = None;
    for (k, v) in z.iter().enumerate() {
        if keep(k) && m_idx.is_none_or(|j: usize| v.re() > z[j].re()) {
            m_idx = Some(k);
        }
    }
    let m = z[m_idx.expect("at least one logit kept")];
    let mut e: Vec<T> = z
        .iter()
        .enumerate()
        .map(|(k, &v)| if keep(k) { (v - m).exp() } else { T::zero() })
        .collect();
    let mut s = T::zero();
    for v in &e {
        s += *v;
    }
    for v in e.iter_mut() {
        *v = *v / s;
    }
    (m + s.ln(), e)
}

/// Accumulates `weight · ∂head/∂θ` into `grad`, given `ws.dz` from
/// [`head_and_dlogits`] and the caches from [`forward_sample`].
pub(crate) fn backward_sample<T: Scalar>(
    spec: &ModelSpec,
    p: &[T],
    masks: Option<MaskRef<'_>>,
    ws: &mut Workspace<T>,
    weight: f64,
    grad: &mut [T],
) {
    for d in ws.dz.iter_mut() {
        *d = d.scale(weight);
    }
    match *spec {
        ModelSpec::LogReg { in_dim, .. } => {
            outer_acc(&ws.dz, &ws.x, &mut grad[..ws.dz.len() * in_dim]);
        }
        ModelSpec::Mlp { in_dim, h1, h2, n_classes, .. } => {
            let o = MlpOffsets::new(in_dim, h1, h2, n_classes);
            // last layer
            outer_acc(&ws.dz, &ws.h2, &mut grad[o.w3..o.b3]);
            for (g, d) in grad[o.b3..o.end].iter_mut().zip(&ws.dz) {
                *g += *d;
            }
            transpose_matvec(&p[o.w3..o.b3], &ws.dz, &mut ws.d2);
            for i in 0..h2 {
                let mut d = if ws.a2[i].re() > 0.0 { ws.d2[i] } else { T::zero() };
                if let Some(m) = masks {
                    d = d.scale(m.hidden2[i]);
                }
                ws.d2[i] = d;
            }
            outer_acc(&ws.d2, &ws.h1, &mut grad[o.w2..o.b2]);
            for (g, d) in grad[o.b2..o.w3].iter_mut().zip(&ws.d2) {
                *g += *d;
            }
            transpose_matvec(&p[o.w2..o.b2], &ws.d2, &mut ws.d1);
            for i in 0..h1 {
                let mut d = if ws.a1[i].re() > 0.0 { ws.d1[i] } else { T::zero() };
                if let Some(m) = masks {
                    d = d.scale(m.hidden1[i]);
                }
                ws.d1[i] = d;
            }
            outer_acc(&ws.d1, &ws.x, &mut grad[o.w1..o.b1]);
            for (g, d) in grad[o.b1..o.w2].iter_mut().zip(&ws.d1) {
                *g += *d;
            }
        }
    }
}

#[inline]
fn outer_acc<T: Scalar>(col: &[T], row: &[T], out: &mut [T]) {
    let n = row.len();
    for (i, &c) in col.iter().enumerate() {
        for (o, &r) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
            *o += c * r;
        }
    }
}

#[inline]
fn transpose_matvec<T: Scalar>(w: &[T], v: &[T], out: &mut [T]) {
    let n = out.len();
    out.iter_mut().for_each(|o| *o = T::zero());
    for (i, &vi) in v.iter().enumerate() {
        for (o, &wk) in out.iter_mut().zip(&w[i * n..(i + 1) * n]) {
            *o += wk * vi;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct MlpOffsets {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub w3: usize,
    pub b3: usize,
    pub end: usize,
}

impl MlpOffsets {
    pub fn new(d: usize, h1: usize, h2: usize, c: usize) -> Self {
        let w1 = 0;
        let b1 = w1 + h1 * d;
        let w2 = b1 + h1;
        let b2 = w2 + h2 * h1;
        let w3 = b2 + h2;
        let b3 = w3 + c * h2;
        let end = b3 + c;
        MlpOffsets { w1, b1, w2, b2, w3, b3, end }
    }
}
