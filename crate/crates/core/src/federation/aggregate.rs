use crate::error::{Error, Result};
use crate::nn::MultiTaskModel;

/// `p_k = n_k / Σ n`.
pub fn size_weights(sizes: &[usize]) -> Vec<f64> {
    let total: usize = sizes.iter().sum();
    sizes.iter().map(|&n| n as f64 / total as f64).collect()
}

/// Weighted parameter mean `Σ p_k ν_k`, evaluated as `ν_0 + Σ p_k (ν_k − ν_0)`
/// so identical submissions reproduce the submitted model bit for bit.
/// Momentum buffers of the result are zero.
pub fn fedavg(models: &[&MultiTaskModel], weights: &[f64]) -> Result<MultiTaskModel> {
    let (first, rest) = models
        .split_first()
        .ok_or_else(|| Error::Incompatible("no models to aggregate".into()))?;
    if weights.len() != models.len() {
        return Err(Error::Incompatible(format!(
            "{} weights for {} models",
            weights.len(),
            models.len()
        )));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-12 || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::WeightSum(sum));
    }
    if let Some(bad) = rest.iter().position(|m| !first.compatible_with(m)) {
        return Err(Error::Incompatible(format!("model {} differs in shape or activities", bad + 1)));
    }
    let mut out = (*first).clone();
    out.reset_momentum();
    for (model, &w) in rest.iter().zip(&weights[1..]) {
        for (acc, (src, base)) in out.blocks_mut().zip(model.blocks().zip(first.blocks())) {
            ndarray::Zip::from(&mut acc.values)
                .and(&src.values)
                .and(&base.values)
                .for_each(|a, &s, &b| *a += w * (s - b));
        }
    }
    Ok(out)
}
