//! Plain-loop reference implementations used as test oracles.
#![allow(dead_code)]

use norface::diffcore::{Linear, Mlp, Params, Tensor};

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn matvec(x: &[f64], w: &Tensor) -> Vec<f64> {
    (0..w.cols()).map(|j| x.iter().enumerate().map(|(i, xi)| xi * w.get(i, j)).sum()).collect()
}

pub fn linear(params: &Params, l: &Linear, x: &[f64]) -> Vec<f64> {
    let b = params.get(l.b);
    matvec(x, params.get(l.w)).into_iter().enumerate().map(|(j, v)| v + b.get(0, j)).collect()
}

pub fn mlp(params: &Params, m: &Mlp, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = linear(params, &m.fc1, x).into_iter().map(gelu).collect();
    linear(params, &m.fc2, &h)
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b))
}

/// Squared coefficient of variation, population variance.
pub fn cv2(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    var / (mean * mean)
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
