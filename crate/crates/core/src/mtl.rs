//! Combination of the four sub-task losses into one training objective.

use std::fmt;
use std::str::FromStr;

use vrnet_tensor::{Graph, Var};

use crate::error::{Error, Result};

/// Fixed per-task weights listed as `(box, conf, cls, seg)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManualWeights(pub [f64; 4]);

impl ManualWeights {
    pub fn new(w: [f64; 4]) -> Result<Self> {
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config(format!("manual weights must be finite and non-negative, got {w:?}")));
        }
        Ok(Self(w))
    }

    /// Reorders to the loss bundle order `(cls, conf, seg, box)`.
    pub fn bundle_order(&self) -> [f64; 4] {
        let [b, c, k, s] = self.0;
        [k, c, s, b]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weighting {
    /// Learned log-variances `s_k`.
    Uncertainty,
    Manual(ManualWeights),
}

impl FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "uncertainty" {
            return Ok(Weighting::Uncertainty);
        }
        let list = s
            .strip_prefix("manual:")
            .ok_or_else(|| Error::Config(format!("weighting must be 'uncertainty' or 'manual:w1,w2,w3,w4', got '{s}'")))?;
        let w: Vec<f64> = list
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("manual weights '{list}': {e}")))?;
        let w: [f64; 4] = w
            .try_into()
            .map_err(|_| Error::Config(format!("manual weighting needs 4 weights, got '{list}'")))?;
        Ok(Weighting::Manual(ManualWeights::new(w)?))
    }
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Weighting::Uncertainty => write!(f, "uncertainty"),
            Weighting::Manual(ManualWeights([a, b, c, d])) => write!(f, "manual:{a},{b},{c},{d}"),
        }
    }
}

/// `Σ exp(−s_k)·L_k + ½·Σ s_k` with `s` a `[4]` vector aligned with `losses`.
pub fn uncertainty_combine(g: &mut Graph, losses: [Var; 4], s: Var) -> Result<Var> {
    if g.dims(s) != [4] {
        return Err(Error::Invalid(format!("log-variances must be [4], got {:?}", g.dims(s))));
    }
    let mut terms = Vec::with_capacity(4);
    for (k, &l) in losses.iter().enumerate() {
        let sk = g.slice(s, 0, k, 1)?;
        let neg = g.neg(sk);
        let inv_var = g.exp(neg);
        terms.push(g.mul(inv_var, l)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    let reg = g.sum(s);
    let reg = g.scale(reg, 0.5);
    let total = g.add(total, reg)?;
    Ok(g.sum(total))
}

/// `Σ w_k·L_k` with weights aligned to `losses`.
pub fn manual_combine(g: &mut Graph, losses: [Var; 4], w: [f64; 4]) -> Result<Var> {
    let mut total = g.scalar(0.0);
    for (&l, &wk) in losses.iter().zip(&w) {
        if wk == 0.0 {
            continue;
        }
        let t = g.scale(l, wk);
        total = g.add(total, t)?;
    }
    Ok(total)
}

/// Stationary log-variance for a fixed loss: `s* = ln(2L)`.
pub fn stationary_log_variance(loss: f64) -> f64 {
    (2.0 * loss).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use vrnet_tensor::Tensor;

    #[test]
    fn unit_variances_sum_losses() {
        let mut g = Graph::new();
        let ls = [0.5, 1.25, 2.0, 0.125].map(|v| g.scalar(v));
        let s = g.constant(Tensor::zeros(vec![4]));
        let t = uncertainty_combine(&mut g, ls, s).unwrap();
        assert_eq!(g.value(t).item(), 0.5 + 1.25 + 2.0 + 0.125);
    }

    #[test]
    fn selector_weights() {
        let mut g = Graph::new();
        let ls = [2.0, 5.0, 7.0, 9.0].map(|v| g.scalar(v));
        let t = manual_combine(&mut g, ls, [1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(g.value(t).item(), 2.0);
    }

    #[test]
    fn parse_weighting() {
        assert_eq!("uncertainty".parse::<Weighting>().unwrap(), Weighting::Uncertainty);
        let w: Weighting = "manual:0.0,0.0,0.0,1.0".parse().unwrap();
        match w {
            Weighting::Manual(m) => assert_eq!(m.bundle_order(), [0.0, 0.0, 1.0, 0.0]),
            _ => panic!("expected manual"),
        }
        assert!("manual:1,2".parse::<Weighting>().is_err());
        assert!("manual:-1,0,0,0".parse::<Weighting>().is_err());
        assert!("softmax".parse::<Weighting>().is_err());
        assert_eq!(w.to_string(), "manual:0,0,0,1");
    }
}
