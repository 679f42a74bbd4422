use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::dimension(
                "tensor",
                format!("shape {:?} implies {} values, got {}", shape, expected, values.len()),
            ));
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), values: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], values: vec![v] }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor { shape: vec![values.len()], values }
    }

    /// Matrix from rows; all rows must have equal length.
    pub fn matrix(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut values = Vec::with_capacity(r * c);
        for row in &rows {
            if row.len() != c {
                return Err(Error::dimension("matrix", "ragged rows"));
            }
            values.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], values)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.values[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.values.len(), 1);
        self.values[0]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        let (_, c) = self.dims2().expect("rank-2 tensor");
        self.values[i * c + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.dims2().expect("rank-2 tensor");
        &self.values[i * c..(i + 1) * c]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }
}

/// W·x + b for W [m×n], x [n], b [m].
pub fn affine(w: &Tensor, x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, n) = w
        .dims2()
        .ok_or_else(|| Error::dimension("affine", format!("W has shape {:?}, expected rank 2", w.shape())))?;
    if x.shape() != [n] {
        return Err(Error::dimension(
            "affine",
            format!("W is {}x{} but x has shape {:?}", m, n, x.shape()),
        ));
    }
    if b.shape() != [m] {
        return Err(Error::dimension(
            "affine",
            format!("W is {}x{} but b has shape {:?}", m, n, b.shape()),
        ));
    }
    let mut out = vec![0.0; m];
    for i in 0..m {
        let mut acc = b.values[i];
        let row = &w.values[i * n..(i + 1) * n];
        for j in 0..n {
            acc += row[j] * x.values[j];
        }
        out[i] = acc;
    }
    Ok(Tensor::vector(out))
}

/// Numerically stable softmax over a nonempty vector (max-subtraction).
pub fn softmax(scores: &Tensor) -> Result<Tensor> {
    if scores.is_empty() {
        return Err(Error::domain("softmax", "empty input"));
    }
    let max = scores.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.values.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(Tensor::vector(exps.iter().map(|e| e / sum).collect()))
}

pub(crate) const COSINE_NORM_GUARD: f64 = 1e-8;

/// Cosine similarity with a zero-norm guard: if either norm is below
/// 1e-8 the result is 0 (and the gradient there is defined as 0).
pub fn cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() || a.shape.len() != 1 {
        return Err(Error::dimension(
            "cosine",
            format!("shapes {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    let na = a.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < COSINE_NORM_GUARD || nb < COSINE_NORM_GUARD {
        return Ok(0.0);
    }
    Ok(dot / (na * nb))
}

/// KL(p ‖ p̂) = Σ p_i log(p_i / p̂_i), with 0·log 0 := 0.
pub fn kl_divergence(p: &Tensor, p_hat: &Tensor) -> Result<f64> {
    if p.shape() != p_hat.shape() {
        return Err(Error::dimension(
            "kl_divergence",
            format!("shapes {:?} vs {:?}", p.shape(), p_hat.shape()),
        ));
    }
    for (dist, name) in [(p, "p"), (p_hat, "p_hat")] {
        if dist.values.iter().any(|&v| v < 0.0) {
            return Err(Error::domain("kl_divergence", format!("{name} has negative entries")));
        }
        let sum: f64 = dist.values.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::domain("kl_divergence", format!("{name} sums to {sum}, not 1")));
        }
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.values.iter().zip(&p_hat.values) {
        if pi > 0.0 {
            if qi == 0.0 {
                return Err(Error::domain("kl_divergence", "p_hat is zero where p > 0"));
            }
            total += pi * (pi / qi).ln();
        }
    }
    Ok(total)
}
